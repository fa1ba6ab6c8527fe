#pragma once

// Named, ordered parameter storage and a portable random source.
//
// Registration order is the canonical order for checkpoints and optimizer
// state, so two stores built by the same code from the same seed are
// bit-identical.

#include "hqdet/tensor.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace hqdet {

/// mt19937_64 with distribution code of our own so streams are identical
/// across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t bits() { return engine_(); }
    /// [0, 1)
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// [0, n)
    std::size_t index(std::size_t n);
    double normal();

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
    }

private:
    std::mt19937_64 engine_;
};

struct Init {
    enum class Kind { Zeros, Constant, Xavier, Normal };
    Kind kind = Kind::Zeros;
    double value = 0.0;

    static Init zeros() { return {Kind::Zeros, 0.0}; }
    static Init ones() { return {Kind::Constant, 1.0}; }
    static Init constant(double v) { return {Kind::Constant, v}; }
    /// Uniform(+-sqrt(6 / (fan_in + fan_out))) over the first two dims.
    static Init xavier() { return {Kind::Xavier, 0.0}; }
    static Init normal(double stddev) { return {Kind::Normal, stddev}; }
};

class ParamStore {
public:
    explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}

    /// Registers a leaf that requires gradients. Names must be unique.
    Tensor add(const std::string& name, Shape shape, Init init);

    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    std::size_t total_numel() const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    Tensor get(const std::string& name) const;

    void zero_grad();
    Rng& rng() { return rng_; }

private:
    Rng rng_;
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace hqdet
