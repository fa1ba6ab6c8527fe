#include "hqdet/attention.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace hqdet {

void AttentionConfig::validate() const {
    if (heads == 0 || embed_dim % heads != 0) {
        throw UsageError("attention: embed dim " + std::to_string(embed_dim) + " not divisible by " +
                         std::to_string(heads) + " heads");
    }
    if (points == 0) throw UsageError("attention: need at least one sample point");
    if (!(feature_stride > 0)) throw UsageError("attention: feature stride must be positive");
}

Tensor group_mask(std::span<const std::size_t> group_sizes) {
    std::size_t m = 0;
    for (std::size_t s : group_sizes) m += s;
    std::vector<double> mask(m * m, -std::numeric_limits<double>::infinity());
    std::size_t begin = 0;
    for (std::size_t s : group_sizes) {
        for (std::size_t i = begin; i < begin + s; ++i)
            for (std::size_t j = begin; j < begin + s; ++j) mask[i * m + j] = 0.0;
        begin += s;
    }
    return Tensor({m, m}, std::move(mask));
}

LayerNormParams LayerNormParams::create(ParamStore& store, const std::string& prefix, std::size_t dim) {
    return {store.add(prefix + ".gamma", {dim}, Init::ones()), store.add(prefix + ".beta", {dim}, Init::zeros())};
}

AttentionParams AttentionParams::create(ParamStore& store, const std::string& prefix, std::size_t dim) {
    AttentionParams p;
    p.norm = LayerNormParams::create(store, prefix + ".norm", dim);
    p.wq = store.add(prefix + ".wq", {dim, dim}, Init::xavier());
    p.bq = store.add(prefix + ".bq", {dim}, Init::zeros());
    p.wk = store.add(prefix + ".wk", {dim, dim}, Init::xavier());
    p.bk = store.add(prefix + ".bk", {dim}, Init::zeros());
    p.wv = store.add(prefix + ".wv", {dim, dim}, Init::xavier());
    p.bv = store.add(prefix + ".bv", {dim}, Init::zeros());
    p.wo = store.add(prefix + ".wo", {dim, dim}, Init::xavier());
    p.bo = store.add(prefix + ".bo", {dim}, Init::zeros());
    return p;
}

DeformableParams DeformableParams::create(ParamStore& store, const std::string& prefix, const AttentionConfig& cfg) {
    cfg.validate();
    const std::size_t c = cfg.embed_dim, hp = cfg.heads * cfg.points;
    DeformableParams p;
    p.norm = LayerNormParams::create(store, prefix + ".norm", c);
    p.w_offset = store.add(prefix + ".w_offset", {c, hp * 2}, Init::zeros());
    p.b_offset = store.add(prefix + ".b_offset", {hp * 2}, Init::zeros());
    p.w_weight = store.add(prefix + ".w_weight", {c, hp}, Init::zeros());
    p.b_weight = store.add(prefix + ".b_weight", {hp}, Init::zeros());
    p.w_value = store.add(prefix + ".w_value", {c, c}, Init::xavier());
    p.b_value = store.add(prefix + ".b_value", {c}, Init::zeros());
    p.wo = store.add(prefix + ".wo", {c, c}, Init::xavier());
    p.bo = store.add(prefix + ".bo", {c}, Init::zeros());
    return p;
}

FeedForwardParams FeedForwardParams::create(ParamStore& store, const std::string& prefix, std::size_t dim,
                                            std::size_t hidden) {
    FeedForwardParams p;
    p.norm = LayerNormParams::create(store, prefix + ".norm", dim);
    p.w1 = store.add(prefix + ".w1", {dim, hidden}, Init::xavier());
    p.b1 = store.add(prefix + ".b1", {hidden}, Init::zeros());
    p.w2 = store.add(prefix + ".w2", {hidden, dim}, Init::xavier());
    p.b2 = store.add(prefix + ".b2", {dim}, Init::zeros());
    return p;
}

Tensor multi_head_attention(const Tensor& queries, const Tensor& keys_values, const Tensor& mask,
                            const AttentionParams& p, std::size_t heads) {
    if (queries.rank() != 2 || keys_values.rank() != 2 || queries.dim(1) != keys_values.dim(1)) {
        throw DimensionError("attention: queries " + shape_str(queries.shape()) + " vs keys " +
                             shape_str(keys_values.shape()));
    }
    const double d = static_cast<double>(queries.dim(1) / heads);
    Tensor q = split_heads(linear(queries, p.wq, p.bq), heads);
    Tensor k = split_heads(linear(keys_values, p.wk, p.bk), heads);
    Tensor v = split_heads(linear(keys_values, p.wv, p.bv), heads);
    Tensor att = masked_softmax(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(d)), mask);
    return linear(merge_heads(matmul(att, v)), p.wo, p.bo);
}

namespace {

Tensor with_pos(const Tensor& xn, const Tensor& pos) { return pos.defined() ? add(xn, pos) : xn; }

}  // namespace

Tensor self_attention(const Tensor& x, const Tensor& mask, const AttentionParams& p, const AttentionConfig& cfg,
                      const Tensor& pos) {
    if (x.dim(0) == 0) return x;
    Tensor xn = with_pos(p.norm(x), pos);
    return add(x, multi_head_attention(xn, xn, mask, p, cfg.heads));
}

Tensor group_self_attention(const Tensor& q2d, const Tensor& mask, const AttentionParams& p,
                            const AttentionConfig& cfg, const Tensor& pos) {
    if (!mask.defined() || mask.rank() != 2 || mask.dim(0) != q2d.dim(0) || mask.dim(1) != q2d.dim(0)) {
        throw DimensionError("group self-attention: mask does not match " + shape_str(q2d.shape()));
    }
    return self_attention(q2d, mask, p, cfg, pos);
}

Tensor deformable_sample(const Tensor& x, std::span<const double> reference_points, std::span<const Tensor> featmaps,
                         const MappingMatrix& mapping, const DeformableParams& p, const AttentionConfig& cfg) {
    const std::size_t m = mapping.num_columns();
    if (x.rank() != 2 || x.dim(0) != m || x.dim(1) != cfg.embed_dim || reference_points.size() != 2 * m) {
        throw DimensionError("deformable attention: queries " + shape_str(x.shape()) + ", " +
                             std::to_string(reference_points.size() / 2) + " reference points, " +
                             std::to_string(m) + " mapping columns");
    }
    const std::size_t heads = cfg.heads, points = cfg.points, hp = heads * points, c = cfg.embed_dim;
    if (m == 0) return Tensor::zeros({0, c});

    Tensor offsets = linear(x, p.w_offset, p.b_offset);
    Tensor weights = reshape(softmax(reshape(linear(x, p.w_weight, p.b_weight), {m, heads, points})), {m, hp});

    std::vector<Tensor> parts;
    for (std::size_t v = 0; v < mapping.num_cameras(); ++v) {
        const std::size_t begin = mapping.group_offset(v), end = mapping.group_offset(v + 1);
        if (begin == end) continue;
        if (v >= featmaps.size() || !featmaps[v].defined()) {
            throw UsageError("deformable attention: no feature map for camera " + std::to_string(v));
        }
        const Tensor& fm = featmaps[v];
        if (fm.rank() != 3 || fm.dim(2) != c) {
            throw DimensionError("deformable attention: feature map " + shape_str(fm.shape()) + " for C = " +
                                 std::to_string(c));
        }
        const std::size_t fh = fm.dim(0), fw = fm.dim(1), mv = end - begin;
        Tensor value = reshape(linear(reshape(fm, {fh * fw, c}), p.w_value, p.b_value), {fh, fw, c});

        std::vector<double> base(mv * hp * 2);
        for (std::size_t j = 0; j < mv; ++j)
            for (std::size_t s = 0; s < hp; ++s) {
                base[(j * hp + s) * 2] = reference_points[2 * (begin + j)];
                base[(j * hp + s) * 2 + 1] = reference_points[2 * (begin + j) + 1];
            }
        Tensor pixels = add(reshape(slice_rows(offsets, begin, end), {mv * hp, 2}), Tensor({mv * hp, 2}, base));
        Tensor cells = add_scalar(scale(pixels, 1.0 / cfg.feature_stride), -0.5);
        parts.push_back(deform_combine(bilinear_sample(value, cells), slice_rows(weights, begin, end), heads));
    }
    return concat_rows(parts);
}

Tensor group_cross_attention(const Tensor& q2d, std::span<const double> reference_points,
                             std::span<const Tensor> featmaps, const MappingMatrix& mapping,
                             const DeformableParams& p, const AttentionConfig& cfg, const Tensor& pos) {
    if (q2d.rank() != 2 || q2d.dim(0) != mapping.num_columns()) {
        throw DimensionError("group cross-attention: queries " + shape_str(q2d.shape()) + " vs " +
                             std::to_string(mapping.num_columns()) + " mapping columns");
    }
    if (q2d.dim(0) == 0) return q2d;
    Tensor sampled = deformable_sample(with_pos(p.norm(q2d), pos), reference_points, featmaps, mapping, p, cfg);
    return add(q2d, linear(sampled, p.wo, p.bo));
}

Tensor multi_view_cross_attention(const Tensor& q3d, std::span<const double> reference_points,
                                  std::span<const Tensor> featmaps, const MappingMatrix& mapping,
                                  const DeformableParams& p, const AttentionConfig& cfg, const Tensor& pos) {
    if (q3d.rank() != 2 || q3d.dim(0) != mapping.num_queries()) {
        throw DimensionError("multi-view cross-attention: queries " + shape_str(q3d.shape()) + " vs " +
                             std::to_string(mapping.num_queries()) + " mapping rows");
    }
    if (q3d.dim(0) == 0) return q3d;
    Tensor cols = mapping.gather(with_pos(p.norm(q3d), pos));
    Tensor sampled = deformable_sample(cols, reference_points, featmaps, mapping, p, cfg);
    const auto owners = mapping.owners();
    Tensor per_query = segment_mean_rows(sampled, owners, mapping.num_queries());
    return add(q3d, linear(per_query, p.wo, p.bo));
}

Tensor temporal_cross_attention(const Tensor& q, const Tensor& memory, const AttentionParams& p,
                                const AttentionConfig& cfg, const Tensor& pos) {
    if (!memory.defined() || memory.numel() == 0 || q.dim(0) == 0) return q;
    return add(q, multi_head_attention(with_pos(p.norm(q), pos), memory, Tensor(), p, cfg.heads));
}

Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) {
    if (x.dim(0) == 0) return x;
    return add(x, linear(gelu(linear(p.norm(x), p.w1, p.b1)), p.w2, p.b2));
}

}  // namespace hqdet
