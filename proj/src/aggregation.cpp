#include "hqdet/aggregation.hpp"

#include <string>

namespace hqdet {

GateParams GateParams::create(ParamStore& store, const std::string& prefix, std::size_t dim) {
    GateParams p;
    p.w1 = store.add(prefix + ".w1", {dim + 1, dim}, Init::xavier());
    p.b1 = store.add(prefix + ".b1", {dim}, Init::zeros());
    p.w2 = store.add(prefix + ".w2", {dim, dim}, Init::xavier());
    p.b2 = store.add(prefix + ".b2", {dim}, Init::zeros());
    return p;
}

Tensor gate_truncation(const Tensor& q2d, std::span<const unsigned char> truncation, const GateParams& p) {
    if (q2d.rank() != 2 || q2d.dim(0) != truncation.size()) {
        throw DimensionError("gate: queries " + shape_str(q2d.shape()) + " vs " + std::to_string(truncation.size()) +
                             " truncation bits");
    }
    const std::size_t m = q2d.dim(0);
    if (m == 0) return q2d;
    std::vector<double> bits(m);
    for (std::size_t j = 0; j < m; ++j) bits[j] = truncation[j] ? 1.0 : 0.0;
    Tensor in = concat_cols({q2d, Tensor({m, 1}, std::move(bits))});
    Tensor gate = sigmoid(linear(gelu(linear(in, p.w1, p.b1)), p.w2, p.b2));
    return mul(q2d, gate);
}

Tensor fuse(const Tensor& q2d_gated, const MappingMatrix& mapping) {
    if (q2d_gated.rank() != 2 || q2d_gated.dim(0) != mapping.num_columns()) {
        throw DimensionError("fuse: queries " + shape_str(q2d_gated.shape()) + " vs " +
                             std::to_string(mapping.num_columns()) + " mapping columns");
    }
    const auto owners = mapping.owners();
    return segment_mean_rows(q2d_gated, owners, mapping.num_queries());
}

Tensor merge(const Tensor& q3d, const Tensor& fused, const AttentionParams& p, const AttentionConfig& cfg,
             bool residual) {
    if (q3d.shape() != fused.shape()) {
        throw DimensionError("merge: " + shape_str(q3d.shape()) + " vs " + shape_str(fused.shape()));
    }
    Tensor x = add(q3d, fused);
    if (x.dim(0) == 0) return x;
    Tensor xn = p.norm(x);
    Tensor att = multi_head_attention(xn, xn, Tensor(), p, cfg.heads);
    return residual ? add(x, att) : att;
}

AggregationParams AggregationParams::create(ParamStore& store, const std::string& prefix, std::size_t dim) {
    return {GateParams::create(store, prefix + ".gate", dim), AttentionParams::create(store, prefix + ".merge", dim)};
}

AggregationOutput aggregate(const Tensor& q3d, const Tensor& q2d, std::span<const unsigned char> truncation,
                            const MappingMatrix& mapping, const AggregationParams& p, const AttentionConfig& cfg,
                            bool merge_residual) {
    AggregationOutput out;
    out.fused = fuse(gate_truncation(q2d, truncation, p.gate), mapping);
    out.q3d_agg = merge(q3d, out.fused, p.merge, cfg, merge_residual);
    out.aux_head_input = out.q3d_agg;
    return out;
}

}  // namespace hqdet
