#pragma once

// Set-prediction losses with deep supervision over every decoder output.
// 2D predictions are matched per camera group against that camera's labels,
// 3D predictions globally against the scene objects.

#include "hqdet/matching.hpp"
#include "hqdet/model.hpp"
#include "hqdet/scene.hpp"

#include <span>

namespace hqdet {

/// Component sums over all supervised layers, as plain values.
struct LossBreakdown {
    double total = 0;
    double cls2d = 0, l1_2d = 0, giou2d = 0;
    /// Unweighted mean alpha error summed over 2D layers; enters L_2d times lambda.
    double alpha = 0;
    double cls3d = 0, reg3d = 0;
    double aux3d = 0;  // share of cls3d + reg3d coming from aggregation taps
    std::size_t matched2d = 0, matched3d = 0;
};

struct LossResult {
    Tensor total;
    LossBreakdown parts;
};

/// Mean over rows of |sin - sin_hat| + |cos - cos_hat| for pred[K, 2] = (sin, cos)
/// against target angles. Zero for K = 0.
Tensor alpha_loss(const Tensor& pred, std::span<const double> target_angles);

/// Focal matching cost of predicting class `cls` from logit `x`.
double focal_cost(double x, double alpha = 0.25, double gamma = 2.0);

/// Per-camera Hungarian matches of one 2D layer: pairs (global column, label index).
std::vector<std::pair<std::size_t, std::size_t>> match_2d(const Pred2D& pred, const MappingMatrix& mapping,
                                                          const Scene& scene, const ModelConfig& cfg);
std::vector<std::pair<std::size_t, std::size_t>> match_3d(const Pred3D& pred, const Scene& scene,
                                                          const ModelConfig& cfg);

/// L = sum over 2D layers of (L_detr2d + lambda * L_alpha) plus sum over 3D
/// outputs of L_3d, aggregation taps scaled by aux_weight.
LossResult compute_losses(const DecoderOutput& out, const Scene& scene, const ModelConfig& cfg);

}  // namespace hqdet
