#include "hqdet/params.hpp"

#include <cmath>
#include <numbers>

namespace hqdet {

std::size_t Rng::index(std::size_t n) {
    if (n == 0) throw UsageError("Rng::index: empty range");
    return static_cast<std::size_t>((static_cast<unsigned __int128>(engine_()) * n) >> 64);
}

double Rng::normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Tensor ParamStore::add(const std::string& name, Shape shape, Init init) {
    if (contains(name)) throw UsageError("parameter registered twice: " + name);
    const std::size_t n = shape_numel(shape);
    std::vector<double> values(n, 0.0);
    switch (init.kind) {
        case Init::Kind::Zeros:
            break;
        case Init::Kind::Constant:
            for (double& v : values) v = init.value;
            break;
        case Init::Kind::Xavier: {
            const double fan_in = static_cast<double>(shape.empty() ? 1 : shape[0]);
            const double fan_out = static_cast<double>(shape.size() > 1 ? shape[1] : 1);
            const double limit = std::sqrt(6.0 / (fan_in + fan_out));
            for (double& v : values) v = rng_.uniform(-limit, limit);
            break;
        }
        case Init::Kind::Normal:
            for (double& v : values) v = init.value * rng_.normal();
            break;
    }
    Tensor t(std::move(shape), std::move(values), true);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, t);
    return t;
}

std::size_t ParamStore::total_numel() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
}

Tensor ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter: " + name);
    return entries_[it->second].second;
}

void ParamStore::zero_grad() {
    for (auto& [name, t] : entries_) t.zero_grad();
}

}  // namespace hqdet
