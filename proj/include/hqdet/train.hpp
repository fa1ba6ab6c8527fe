#pragma once

// AdamW training over a fixed scene set. The scene visiting order is a pure
// function of (seed, step), so a resumed run replays the same batches.

#include "hqdet/losses.hpp"
#include "hqdet/model.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

namespace hqdet {

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// First and second moments per parameter, in ParamStore order.
struct AdamState {
    std::vector<std::vector<double>> m, v;
    std::uint64_t step = 0;

    static AdamState zeros(const ParamStore& store);
    bool operator==(const AdamState&) const = default;
};

struct Sample {
    ModelInput input;
    Scene scene;
};

/// Global-norm clipping, then decoupled weight decay (rank >= 2 tensors only)
/// and a bias-corrected adaptive-moment step. Gradients are read, not cleared.
/// Returns the pre-clip gradient norm.
double adamw_update(ParamStore& store, AdamState& state, const ModelConfig& cfg, double lr);

/// Learning rate for optimizer step `step` (0-based) with linear warmup.
double learning_rate(const ModelConfig& cfg, std::uint64_t step);

/// One optimizer step over `batch`, gradients averaged over scenes in index
/// order. Throws TrainingError with the loss breakdown when the loss or the
/// gradient is not finite; parameters are untouched in that case.
LossBreakdown train_step(Model& model, AdamState& state, std::span<const Sample* const> batch);

/// Scene indices visited at optimizer step `step`: consecutive slices of a
/// per-epoch permutation seeded by (seed, epoch).
std::vector<std::size_t> batch_indices(std::uint64_t seed, std::uint64_t step, std::size_t num_scenes,
                                       std::size_t batch_size);

using StepCallback = std::function<void(std::uint64_t step, const LossBreakdown& loss)>;

/// Runs optimizer steps until state.step reaches `target_steps`, appending
/// each step's mean loss to `history`. Batches come from batch_indices with
/// the model seed, so stopping and resuming replays the same trajectory.
void train_until(Model& model, AdamState& state, std::span<const Sample> samples, std::uint64_t target_steps,
                 std::vector<double>& history, const StepCallback& on_step = {});

}  // namespace hqdet
