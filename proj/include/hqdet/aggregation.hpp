#pragma once

// Adaptive query aggregation: truncation-aware gating of 2D queries, fusion
// back onto their owning 3D queries and a self-attention merge.

#include "hqdet/allocation.hpp"
#include "hqdet/attention.hpp"

#include <span>

namespace hqdet {

/// Gate MLP (C + 1) -> C -> C with GELU hidden activation and sigmoid output.
struct GateParams {
    Tensor w1, b1, w2, b2;
    static GateParams create(ParamStore& store, const std::string& prefix, std::size_t dim);
};

/// q2d * sigmoid(MLP([q2d, trunc])); the truncation bit enters as an extra column.
Tensor gate_truncation(const Tensor& q2d, std::span<const unsigned char> truncation, const GateParams& p);

/// Row i is the mean of the gated rows owned by 3D query i; zero when it owns none.
Tensor fuse(const Tensor& q2d_gated, const MappingMatrix& mapping);

/// x = q3d + fused, then unmasked self-attention over all N queries. With
/// `residual` the attention output is added back onto x.
Tensor merge(const Tensor& q3d, const Tensor& fused, const AttentionParams& p, const AttentionConfig& cfg,
             bool residual = true);

struct AggregationParams {
    GateParams gate;
    AttentionParams merge;
    static AggregationParams create(ParamStore& store, const std::string& prefix, std::size_t dim);
};

struct AggregationOutput {
    Tensor q3d_agg;
    Tensor fused;
    /// Same tensor as q3d_agg; the auxiliary 3D head reads from here.
    Tensor aux_head_input;
};

AggregationOutput aggregate(const Tensor& q3d, const Tensor& q2d, std::span<const unsigned char> truncation,
                            const MappingMatrix& mapping, const AggregationParams& p, const AttentionConfig& cfg,
                            bool merge_residual = true);

}  // namespace hqdet
