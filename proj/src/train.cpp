#include "hqdet/train.hpp"

#include <cmath>
#include <sstream>

namespace hqdet {

AdamState AdamState::zeros(const ParamStore& store) {
    AdamState s;
    for (const auto& [name, t] : store.entries()) {
        s.m.emplace_back(t.numel(), 0.0);
        s.v.emplace_back(t.numel(), 0.0);
    }
    return s;
}

double learning_rate(const ModelConfig& cfg, std::uint64_t step) {
    const double base = cfg.lr_drop_step != 0 && step >= cfg.lr_drop_step ? cfg.lr * cfg.lr_drop_factor : cfg.lr;
    if (cfg.warmup_steps == 0 || step >= cfg.warmup_steps) return base;
    return base * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
}

double adamw_update(ParamStore& store, AdamState& state, const ModelConfig& cfg, double lr) {
    const auto& entries = store.entries();
    if (state.m.size() != entries.size() || state.v.size() != entries.size()) {
        throw UsageError("adamw: optimizer state has " + std::to_string(state.m.size()) + " slots for " +
                         std::to_string(entries.size()) + " parameters");
    }
    double sq = 0;
    for (const auto& [name, t] : entries)
        if (t.has_grad())
            for (double g : t.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    const double clip = (cfg.grad_clip > 0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;

    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < entries.size(); ++k) {
        Tensor t = entries[k].second;
        auto& m = state.m[k];
        auto& v = state.v[k];
        if (m.size() != t.numel()) throw UsageError("adamw: state size mismatch for " + entries[k].first);
        const bool decay = t.rank() >= 2 && cfg.weight_decay > 0;
        auto p = t.values_mut();
        const bool has = t.has_grad();
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double g = has ? t.grad()[i] * clip : 0.0;
            m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * g * g;
            if (lr == 0.0) continue;
            if (decay) p[i] -= lr * cfg.weight_decay * p[i];
            p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps);
        }
    }
    return norm;
}

namespace {

std::string describe(const LossBreakdown& b) {
    std::ostringstream os;
    os << "total=" << b.total << " cls2d=" << b.cls2d << " l1_2d=" << b.l1_2d << " giou2d=" << b.giou2d
       << " alpha=" << b.alpha << " cls3d=" << b.cls3d << " reg3d=" << b.reg3d << " matched2d=" << b.matched2d
       << " matched3d=" << b.matched3d;
    return os.str();
}

bool finite(const Tensor& t) {
    for (double x : t.values())
        if (!std::isfinite(x)) return false;
    return true;
}

bool outputs_finite(const DecoderOutput& out) {
    for (const Stage2D& st : out.stages2d)
        for (const Pred2D& p : st.layers)
            if (!finite(p.logits) || !finite(p.alpha) || !finite(p.boxes)) return false;
    for (const Pred3D& p : out.preds3d)
        if (!finite(p.logits) || !finite(p.encoded)) return false;
    return true;
}

void accumulate(LossBreakdown& into, const LossBreakdown& b, double w) {
    into.total += w * b.total;
    into.cls2d += w * b.cls2d;
    into.l1_2d += w * b.l1_2d;
    into.giou2d += w * b.giou2d;
    into.alpha += w * b.alpha;
    into.cls3d += w * b.cls3d;
    into.reg3d += w * b.reg3d;
    into.aux3d += w * b.aux3d;
    into.matched2d += b.matched2d;
    into.matched3d += b.matched3d;
}

}  // namespace

LossBreakdown train_step(Model& model, AdamState& state, std::span<const Sample* const> batch) {
    if (batch.empty()) throw UsageError("train_step: empty batch");
    ParamStore& store = model.params();
    // Non-finite state would otherwise surface as contract failures deep in
    // the forward pass (sampling, softmax).
    for (const auto& [name, t] : store.entries())
        if (!finite(t)) throw TrainingError("non-finite parameter " + name + " at step " + std::to_string(state.step));
    for (const Sample* sample : batch)
        for (const Tensor& t : sample->input.tokens)
            if (!finite(t)) throw TrainingError("non-finite input on scene '" + sample->scene.scene_id + "'");
    store.zero_grad();
    const double w = 1.0 / static_cast<double>(batch.size());
    LossBreakdown mean;
    for (std::size_t s = 0; s < batch.size(); ++s) {
        Tape tape;
        TapeScope scope(&tape);
        const DecoderOutput out = model.forward(batch[s]->input);
        if (!outputs_finite(out)) {
            throw TrainingError("non-finite decoder output at step " + std::to_string(state.step) + " on scene '" +
                                batch[s]->scene.scene_id + "'");
        }
        LossResult loss = compute_losses(out, batch[s]->scene, model.config());
        if (!std::isfinite(loss.parts.total)) {
            throw TrainingError("non-finite loss at step " + std::to_string(state.step) + " on scene '" +
                                batch[s]->scene.scene_id + "': " + describe(loss.parts));
        }
        tape.backward(scale(loss.total, w));
        accumulate(mean, loss.parts, w);
    }
    for (const auto& [name, t] : store.entries()) {
        if (!t.has_grad()) continue;
        for (double g : t.grad()) {
            if (!std::isfinite(g)) {
                throw TrainingError("non-finite gradient in " + name + " at step " + std::to_string(state.step) +
                                    ": " + describe(mean));
            }
        }
    }
    adamw_update(store, state, model.config(), learning_rate(model.config(), state.step));
    return mean;
}

std::vector<std::size_t> batch_indices(std::uint64_t seed, std::uint64_t step, std::size_t num_scenes,
                                       std::size_t batch_size) {
    if (num_scenes == 0 || batch_size == 0) throw UsageError("batch_indices: no scenes or zero batch size");
    std::vector<std::size_t> out;
    out.reserve(batch_size);
    std::uint64_t pos = step * batch_size;
    std::uint64_t cached_epoch = ~std::uint64_t{0};
    std::vector<std::size_t> perm;
    for (std::size_t k = 0; k < batch_size; ++k, ++pos) {
        const std::uint64_t epoch = pos / num_scenes;
        if (epoch != cached_epoch) {
            perm.resize(num_scenes);
            for (std::size_t i = 0; i < num_scenes; ++i) perm[i] = i;
            Rng rng(seed * 0x9e3779b97f4a7c15ULL + epoch + 1);
            rng.shuffle(perm);
            cached_epoch = epoch;
        }
        out.push_back(perm[pos % num_scenes]);
    }
    return out;
}

void train_until(Model& model, AdamState& state, std::span<const Sample> samples, std::uint64_t target_steps,
                 std::vector<double>& history, const StepCallback& on_step) {
    const ModelConfig& cfg = model.config();
    while (state.step < target_steps) {
        std::vector<const Sample*> batch;
        for (std::size_t i : batch_indices(cfg.seed, state.step, samples.size(), cfg.batch_size)) batch.push_back(&samples[i]);
        const std::uint64_t step = state.step;
        const LossBreakdown loss = train_step(model, state, batch);
        history.push_back(loss.total);
        if (on_step) on_step(step, loss);
    }
}

}  // namespace hqdet
