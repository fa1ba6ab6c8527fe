#pragma once

// Query-group attention blocks. Every block is pre-norm with a residual:
// y = x + sublayer(LN(x) + pos), where the optional positional embedding
// `pos` only enters the sublayer input.

#include "hqdet/allocation.hpp"
#include "hqdet/params.hpp"
#include "hqdet/tensor.hpp"

#include <span>
#include <string>
#include <vector>

namespace hqdet {

struct AttentionConfig {
    std::size_t embed_dim = 64;
    std::size_t heads = 4;
    /// Deformable sample points per head.
    std::size_t points = 4;
    /// Image pixels per feature-map cell.
    double feature_stride = 1.0;

    void validate() const;
};

/// M x M additive mask, 0 inside a camera group's diagonal block, -inf elsewhere.
Tensor group_mask(std::span<const std::size_t> group_sizes);

struct LayerNormParams {
    Tensor gamma, beta;
    static LayerNormParams create(ParamStore& store, const std::string& prefix, std::size_t dim);
    Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

struct AttentionParams {
    LayerNormParams norm;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    static AttentionParams create(ParamStore& store, const std::string& prefix, std::size_t dim);
};

struct DeformableParams {
    LayerNormParams norm;
    Tensor w_offset, b_offset;  // C -> heads * points * 2, zero-initialised
    Tensor w_weight, b_weight;  // C -> heads * points
    Tensor w_value, b_value;    // feature C -> C
    Tensor wo, bo;
    static DeformableParams create(ParamStore& store, const std::string& prefix, const AttentionConfig& cfg);
};

struct FeedForwardParams {
    LayerNormParams norm;
    Tensor w1, b1, w2, b2;
    static FeedForwardParams create(ParamStore& store, const std::string& prefix, std::size_t dim, std::size_t hidden);
};

/// Projected multi-head attention of `queries` over `keys_values` without
/// norm or residual. Logits are scaled by 1/sqrt(head dim).
Tensor multi_head_attention(const Tensor& queries, const Tensor& keys_values, const Tensor& mask,
                            const AttentionParams& p, std::size_t heads);

/// x + MHA(LN(x) + pos) restricted by `mask` (undefined = unmasked).
Tensor self_attention(const Tensor& x, const Tensor& mask, const AttentionParams& p, const AttentionConfig& cfg,
                      const Tensor& pos = {});

Tensor group_self_attention(const Tensor& q2d, const Tensor& mask, const AttentionParams& p,
                            const AttentionConfig& cfg, const Tensor& pos = {});

/// Deformable sampling core without norm, output projection or residual.
/// Row j of `x` is sampled in camera mapping.columns()[j].camera around the
/// pixel reference (reference_points[2j], reference_points[2j + 1]).
Tensor deformable_sample(const Tensor& x, std::span<const double> reference_points, std::span<const Tensor> featmaps,
                         const MappingMatrix& mapping, const DeformableParams& p, const AttentionConfig& cfg);

/// Deformable cross-attention of each 2D query over its own camera's
/// feature map. `reference_points` interleaves (u, v) pixels per column of
/// `mapping`; featmaps[v] is [H, W, C] or undefined for cameras without
/// queries.
Tensor group_cross_attention(const Tensor& q2d, std::span<const double> reference_points,
                             std::span<const Tensor> featmaps, const MappingMatrix& mapping,
                             const DeformableParams& p, const AttentionConfig& cfg, const Tensor& pos = {});

/// 3D-query variant: each query samples every camera it is visible in
/// (one mapping column per camera) and the per-camera results are averaged.
/// Queries visible nowhere receive only the output bias.
Tensor multi_view_cross_attention(const Tensor& q3d, std::span<const double> reference_points,
                                  std::span<const Tensor> featmaps, const MappingMatrix& mapping,
                                  const DeformableParams& p, const AttentionConfig& cfg, const Tensor& pos = {});

/// x + MHA(LN(x) + pos, memory). Empty or undefined memory returns x unchanged.
Tensor temporal_cross_attention(const Tensor& q, const Tensor& memory, const AttentionParams& p,
                                const AttentionConfig& cfg, const Tensor& pos = {});

/// x + W2 gelu(W1 LN(x)).
Tensor feed_forward(const Tensor& x, const FeedForwardParams& p);

}  // namespace hqdet
