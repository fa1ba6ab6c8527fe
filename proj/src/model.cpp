#include "hqdet/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace hqdet {

namespace {

constexpr double kLogSizeMin = -3.0, kLogSizeMax = 4.0;
// sigmoid(-4.595) = 0.01: the usual low-confidence prior for focal heads.
constexpr double kClassPrior = -4.595;

Tensor head_hidden(const LayerNormParams& norm, const Tensor& w, const Tensor& b, const Tensor& q, const Tensor& pos) {
    Tensor x = norm(q);
    if (pos.defined()) x = add(x, pos);
    return gelu(linear(x, w, b));
}

int argmax_row(std::span<const double> logits, std::size_t row, std::size_t classes) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c)
        if (logits[row * classes + c] > logits[row * classes + best]) best = c;
    return static_cast<int>(best);
}

double sigmoid_value(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

// ------------------------------------------------------------------ anchors

std::array<double, kAnchorEncoding> encode_anchor(const Anchor3D& a) {
    return {a.x, a.y, a.z, std::log(a.w), std::log(a.l), std::log(a.h), std::sin(a.yaw), std::cos(a.yaw), a.vx, a.vy};
}

Anchor3D decode_anchor(std::span<const double> enc) {
    if (enc.size() != kAnchorEncoding) throw DimensionError("decode_anchor: expected 10 values");
    auto size = [](double v) { return std::exp(std::clamp(v, kLogSizeMin, kLogSizeMax)); };
    Anchor3D a;
    a.x = enc[0];
    a.y = enc[1];
    a.z = enc[2];
    a.w = size(enc[3]);
    a.l = size(enc[4]);
    a.h = size(enc[5]);
    a.yaw = (enc[6] == 0.0 && enc[7] == 0.0) ? 0.0 : wrap_angle(std::atan2(enc[6], enc[7]));
    a.vx = enc[8];
    a.vy = enc[9];
    return a;
}

std::vector<Anchor3D> initial_anchors(const ModelConfig& cfg) {
    Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    const auto& classes = default_classes();
    const double r0 = cfg.anchor_range_min * cfg.anchor_range_min, r1 = cfg.anchor_range_max * cfg.anchor_range_max;
    const double half = cfg.anchor_half_angle_deg * std::numbers::pi / 180.0;
    std::vector<Anchor3D> out(cfg.num_queries);
    for (std::size_t i = 0; i < out.size(); ++i) {
        // Uniform in r^2 is uniform in area over the annular sector.
        const double r = std::sqrt(rng.uniform(r0, r1));
        const double theta = rng.uniform(-half, half);
        const ClassSpec& cls = classes[(i % cfg.num_classes) % classes.size()];
        Anchor3D& a = out[i];
        a.x = r * std::cos(theta);
        a.y = r * std::sin(theta);
        a.l = cls.l;
        a.w = cls.w;
        a.h = cls.h;
        a.z = cls.h / 2;
    }
    return out;
}

// -------------------------------------------------------------------- model

Model::Mlp Model::make_mlp(const std::string& prefix, std::size_t in, std::size_t out) {
    return {store_.add(prefix + ".w1", {in, out}, Init::xavier()), store_.add(prefix + ".b1", {out}, Init::zeros()),
            store_.add(prefix + ".w2", {out, out}, Init::xavier()), store_.add(prefix + ".b2", {out}, Init::zeros())};
}

Tensor Model::run_mlp(const Mlp& m, const Tensor& x) { return linear(gelu(linear(x, m.w1, m.b1)), m.w2, m.b2); }

Model::Model(const ModelConfig& cfg) : cfg_(cfg), att_(cfg.attention()), store_(cfg.seed) {
    cfg_.validate();
    att_.validate();
    const std::size_t c = cfg_.embed_dim, k = cfg_.num_classes;
    anchors_ = initial_anchors(cfg_);

    query_init_ = store_.add("query_init", {cfg_.num_queries, c}, Init::normal(0.5));
    patch_w_ = store_.add("patch.w", {cfg_.input_channels * cfg_.patch_size * cfg_.patch_size, c}, Init::xavier());
    patch_b_ = store_.add("patch.b", {c}, Init::zeros());
    patch_norm_ = LayerNormParams::create(store_, "patch.norm", c);
    anchor_embed_ = make_mlp("anchor_embed", kAnchorEncoding, c);
    pos2d_embed_ = make_mlp("pos2d_embed", 5, c);

    head2d_.norm = LayerNormParams::create(store_, "head2d.norm", c);
    head2d_.wh = store_.add("head2d.wh", {c, c}, Init::xavier());
    head2d_.bh = store_.add("head2d.bh", {c}, Init::zeros());
    head2d_.wc = store_.add("head2d.wc", {c, k}, Init::xavier());
    head2d_.bc = store_.add("head2d.bc", {k}, Init::constant(kClassPrior));
    head2d_.wa = store_.add("head2d.wa", {c, 2}, Init::xavier());
    head2d_.ba = store_.add("head2d.ba", {2}, Init::zeros());
    head2d_.wb = store_.add("head2d.wb", {c, 4}, Init::zeros());
    head2d_.bb = store_.add("head2d.bb", {4}, Init::zeros());

    head3d_.norm = LayerNormParams::create(store_, "head3d.norm", c);
    head3d_.wh = store_.add("head3d.wh", {c, c}, Init::xavier());
    head3d_.bh = store_.add("head3d.bh", {c}, Init::zeros());
    head3d_.wc = store_.add("head3d.wc", {c, k}, Init::xavier());
    head3d_.bc = store_.add("head3d.bc", {k}, Init::constant(kClassPrior));
    head3d_.wr = store_.add("head3d.wr", {c, kAnchorEncoding}, Init::zeros());
    head3d_.br = store_.add("head3d.br", {kAnchorEncoding}, Init::zeros());

    const std::size_t hidden = c * cfg_.ffn_mult;
    blocks_.resize(cfg_.hybrid_blocks);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        const std::string pb = "block" + std::to_string(b);
        Block& blk = blocks_[b];
        if (!cfg_.temporal_shared || temporal_.empty()) {
            const std::string name = cfg_.temporal_shared ? std::string("temporal") : pb + ".temporal";
            temporal_.push_back(std::make_unique<AttentionParams>(AttentionParams::create(store_, name, c)));
        }
        blk.temporal = temporal_.back().get();
        for (std::size_t l = 0; l < cfg_.layers_2d; ++l) {
            const std::string pl = pb + ".l2d" + std::to_string(l);
            blk.layers2d.push_back({AttentionParams::create(store_, pl + ".self", c),
                                    DeformableParams::create(store_, pl + ".cross", att_),
                                    FeedForwardParams::create(store_, pl + ".ffn", c, hidden)});
        }
        if (cfg_.layers_2d > 0) blk.aggregation = AggregationParams::create(store_, pb + ".agg", c);
        for (std::size_t l = 0; l < cfg_.layers_3d; ++l) {
            const std::string pl = pb + ".l3d" + std::to_string(l);
            blk.layers3d.push_back({AttentionParams::create(store_, pl + ".self", c),
                                    DeformableParams::create(store_, pl + ".cross", att_),
                                    FeedForwardParams::create(store_, pl + ".ffn", c, hidden)});
        }
    }
}

std::vector<Tensor> Model::feature_maps(const ModelInput& input) const {
    const std::size_t tokens = input.feat_h * input.feat_w;
    const std::size_t width = cfg_.input_channels * cfg_.patch_size * cfg_.patch_size;
    if (input.tokens.size() != input.rig.size()) {
        throw DimensionError("model: " + std::to_string(input.tokens.size()) + " token sets for " +
                             std::to_string(input.rig.size()) + " cameras");
    }
    std::vector<Tensor> out;
    for (const Tensor& t : input.tokens) {
        if (t.rank() != 2 || t.dim(0) != tokens || t.dim(1) != width) {
            throw DimensionError("model: tokens " + shape_str(t.shape()) + ", expected [" + std::to_string(tokens) +
                                 ", " + std::to_string(width) + "]");
        }
        out.push_back(reshape(patch_norm_(linear(t, patch_w_, patch_b_)), {input.feat_h, input.feat_w, cfg_.embed_dim}));
    }
    return out;
}

Tensor Model::anchor_embedding(std::span<const Anchor3D> anchors) const {
    std::vector<double> feats;
    feats.reserve(anchors.size() * kAnchorEncoding);
    for (const auto& a : anchors) {
        const auto e = encode_anchor(a);
        const double row[kAnchorEncoding] = {e[0] / 30, e[1] / 30, e[2] / 3, e[3], e[4], e[5], e[6], e[7],
                                             e[8] / 10, e[9] / 10};
        feats.insert(feats.end(), row, row + kAnchorEncoding);
    }
    return run_mlp(anchor_embed_, Tensor({anchors.size(), kAnchorEncoding}, std::move(feats)));
}

Tensor Model::pos2d_embedding(const AllocationResult& alloc, const CameraRig& rig) const {
    const std::size_t m = alloc.mapping.num_columns();
    std::vector<double> feats(m * 5);
    for (std::size_t j = 0; j < m; ++j) {
        const CameraParams& cam = rig[alloc.mapping.columns()[j].camera];
        const Rect& r = alloc.rects[j];
        feats[j * 5 + 0] = alloc.reference_points[2 * j] / cam.width;
        feats[j * 5 + 1] = alloc.reference_points[2 * j + 1] / cam.height;
        feats[j * 5 + 2] = alloc.truncation[j] ? 1.0 : 0.0;
        feats[j * 5 + 3] = (r.x2 - r.x1) / cam.width;
        feats[j * 5 + 4] = (r.y2 - r.y1) / cam.height;
    }
    return run_mlp(pos2d_embed_, Tensor({m, 5}, std::move(feats)));
}

Pred2D Model::head_2d(const Tensor& q2d, const Tensor& pos, std::span<const double> refs,
                      std::span<const double> default_wh) const {
    const Head2D& h = head2d_;
    Tensor hidden = head_hidden(h.norm, h.wh, h.bh, q2d, pos);
    return {linear(hidden, h.wc, h.bc), linear(hidden, h.wa, h.ba),
            decode_box2d(linear(hidden, h.wb, h.bb), refs, default_wh)};
}

Pred3D Model::head_3d(const Tensor& q3d, const Tensor& pos, std::span<const Anchor3D> anchors) const {
    const Head3D& h = head3d_;
    Tensor hidden = head_hidden(h.norm, h.wh, h.bh, q3d, pos);
    std::vector<double> base;
    base.reserve(anchors.size() * kAnchorEncoding);
    for (const auto& a : anchors) {
        const auto e = encode_anchor(a);
        base.insert(base.end(), e.begin(), e.end());
    }
    Pred3D p;
    p.logits = linear(hidden, h.wc, h.bc);
    p.encoded = add(Tensor({anchors.size(), kAnchorEncoding}, std::move(base)), linear(hidden, h.wr, h.br));
    return p;
}

DecoderOutput Model::forward(const ModelInput& input, const TemporalMemory* memory,
                             const std::vector<std::vector<Anchor3D>>* fixed_anchors) const {
    if (input.rig.size() != cfg_.num_cameras) {
        throw DimensionError("model: rig has " + std::to_string(input.rig.size()) + " cameras, config expects " +
                             std::to_string(cfg_.num_cameras));
    }
    const std::vector<Tensor> featmaps = feature_maps(input);
    const AllocationConfig alloc_cfg{AnchorLimits{}, cfg_.truncated_cap};

    Tensor memory_kv;
    if (memory && !memory->empty()) memory_kv = add(memory->queries.detach(), anchor_embedding(memory->anchors));

    DecoderOutput out;
    Tensor q = query_init_;
    std::vector<Anchor3D> anchors = anchors_;
    if (fixed_anchors) {
        const std::size_t heads = blocks_.size() * (cfg_.layers_3d + (cfg_.layers_2d > 0 ? 1 : 0));
        if (fixed_anchors->size() != heads + 1) {
            throw UsageError("model: anchor trace has " + std::to_string(fixed_anchors->size()) + " entries, expected " +
                             std::to_string(heads + 1));
        }
        for (const auto& a : *fixed_anchors)
            if (a.size() != cfg_.num_queries) throw UsageError("model: anchor trace entry of the wrong size");
        anchors = fixed_anchors->front();
    }
    out.anchor_trace.push_back(anchors);
    auto refine = [&](Pred3D pred, std::size_t b, bool aux) {
        pred.block = b;
        pred.aux = aux;
        anchors = fixed_anchors ? (*fixed_anchors)[out.preds3d.size() + 1] : decode_predictions(pred);
        out.anchor_trace.push_back(anchors);
        out.preds3d.push_back(std::move(pred));
    };

    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        const Block& blk = blocks_[b];
        Tensor pos3 = anchor_embedding(anchors);
        q = temporal_cross_attention(q, memory_kv, *blk.temporal, att_, pos3);

        if (!blk.layers2d.empty()) {
            Stage2D stage;
            stage.block = b;
            stage.alloc = allocate(q, anchors, input.rig, alloc_cfg);
            const AllocationResult& al = stage.alloc;
            const std::size_t m = al.mapping.num_columns();
            stage.default_wh.resize(2 * m);
            for (std::size_t j = 0; j < m; ++j) {
                stage.default_wh[2 * j] = std::max(al.rects[j].x2 - al.rects[j].x1, 2.0);
                stage.default_wh[2 * j + 1] = std::max(al.rects[j].y2 - al.rects[j].y1, 2.0);
            }
            Tensor q2 = al.q2d;
            if (m > 0) {
                const Tensor pos2 = pos2d_embedding(al, input.rig);
                const Tensor mask = group_mask(al.group_sizes);
                for (const Layer2D& layer : blk.layers2d) {
                    q2 = group_self_attention(q2, mask, layer.self, att_, pos2);
                    q2 = group_cross_attention(q2, al.reference_points, featmaps, al.mapping, layer.cross, att_, pos2);
                    q2 = feed_forward(q2, layer.ffn);
                    stage.layers.push_back(head_2d(q2, pos2, al.reference_points, stage.default_wh));
                }
            } else {
                for (std::size_t l = 0; l < blk.layers2d.size(); ++l) {
                    stage.layers.push_back({Tensor::zeros({0, cfg_.num_classes}), Tensor::zeros({0, 2}),
                                            Tensor::zeros({0, 4})});
                }
            }
            q = aggregate(q, q2, al.truncation, al.mapping, *blk.aggregation, att_, cfg_.merge_residual).q3d_agg;
            out.stages2d.push_back(std::move(stage));

            refine(head_3d(q, pos3, anchors), b, true);
        }

        for (const Layer3D& layer : blk.layers3d) {
            pos3 = anchor_embedding(anchors);
            q = self_attention(q, Tensor(), layer.self, att_, pos3);
            const AllocationResult geo = allocate_geometry(anchors, input.rig, alloc_cfg);
            q = multi_view_cross_attention(q, geo.reference_points, featmaps, geo.mapping, layer.cross, att_, pos3);
            q = feed_forward(q, layer.ffn);
            refine(head_3d(q, pos3, anchors), b, false);
        }
    }
    out.queries = q;
    out.anchors = std::move(anchors);
    return out;
}

// ------------------------------------------------------------ post-process

std::vector<Anchor3D> decode_predictions(const Pred3D& pred) {
    const std::size_t n = pred.encoded.dim(0);
    const auto enc = pred.encoded.values();
    std::vector<Anchor3D> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = decode_anchor(enc.subspan(i * kAnchorEncoding, kAnchorEncoding));
    return out;
}

SceneDetections detect(const DecoderOutput& out, const std::string& scene_id, double min_score) {
    SceneDetections dets;
    dets.scene_id = scene_id;
    if (out.preds3d.empty()) return dets;

    const Pred3D& last = out.preds3d.back();
    const std::size_t n = last.logits.dim(0), k = last.logits.dim(1);
    const auto logits = last.logits.values();
    const auto boxes = decode_predictions(last);
    for (std::size_t i = 0; i < n; ++i) {
        const int cls = argmax_row(logits, i, k);
        const double score = sigmoid_value(logits[i * k + cls]);
        if (score < min_score) continue;
        dets.det3d.push_back({static_cast<int>(i), boxes[i], cls, score});
    }

    if (out.stages2d.empty() || out.stages2d.back().layers.empty()) return dets;
    const Stage2D& stage = out.stages2d.back();
    const Pred2D& p2 = stage.layers.back();
    const std::size_t m = p2.logits.dim(0), k2 = p2.logits.dim(1);
    const auto l2 = p2.logits.values();
    const auto b2 = p2.boxes.values();
    for (std::size_t j = 0; j < m; ++j) {
        const int cls = argmax_row(l2, j, k2);
        const double score = sigmoid_value(l2[j * k2 + cls]);
        if (score < min_score) continue;
        const MappingColumn& col = stage.alloc.mapping.columns()[j];
        Detection2D d;
        d.id = static_cast<int>(j);
        d.camera = col.camera;
        d.box = {b2[j * 4], b2[j * 4 + 1], b2[j * 4 + 2], b2[j * 4 + 3], cls, score};
        d.linked_3d_id = static_cast<int>(col.query);
        dets.det2d.push_back(d);
    }
    return dets;
}

std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k) {
    std::vector<std::size_t> idx(scores.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    k = std::min(k, idx.size());
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    idx.resize(k);
    return idx;
}

Anchor3D compensate_ego_motion(const Anchor3D& a, const EgoDelta& delta) {
    const double c = std::cos(delta.dyaw), s = std::sin(delta.dyaw);
    const double px = a.x - delta.dx, py = a.y - delta.dy;
    Anchor3D out = a;
    out.x = c * px + s * py;
    out.y = -s * px + c * py;
    out.vx = c * a.vx + s * a.vy;
    out.vy = -s * a.vx + c * a.vy;
    out.yaw = wrap_angle(a.yaw - delta.dyaw);
    return out;
}

TemporalMemory propagate_temporal(const DecoderOutput& out, std::size_t k, const EgoDelta& delta) {
    TemporalMemory mem;
    if (out.preds3d.empty() || k == 0) return mem;
    const Tensor& logits = out.preds3d.back().logits;
    const std::size_t n = logits.dim(0), classes = logits.dim(1);
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i) {
        double best = logits.values()[i * classes];
        for (std::size_t c = 1; c < classes; ++c) best = std::max(best, logits.values()[i * classes + c]);
        scores[i] = sigmoid_value(best);
    }
    const auto idx = top_k_indices(scores, k);
    mem.queries = gather_rows(out.queries.detach(), idx);
    for (std::size_t i : idx) mem.anchors.push_back(compensate_ego_motion(out.anchors[i], delta));
    return mem;
}

}  // namespace hqdet
