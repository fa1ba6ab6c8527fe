#include "hqdet/losses.hpp"

#include <algorithm>
#include <cmath>

namespace hqdet {

namespace {

double sigmoid_value(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

std::vector<std::size_t> first_of(const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
    std::vector<std::size_t> out;
    for (const auto& p : pairs) out.push_back(p.first);
    return out;
}

std::vector<int> class_targets(std::size_t rows, const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                               const std::vector<int>& gt_class) {
    std::vector<int> t(rows, -1);
    for (const auto& [r, g] : pairs) t[r] = gt_class[g];
    return t;
}

}  // namespace

double focal_cost(double x, double alpha, double gamma) {
    const double p = sigmoid_value(x);
    const double eps = 1e-12;
    const double pos = alpha * std::pow(1 - p, gamma) * -std::log(p + eps);
    const double neg = (1 - alpha) * std::pow(p, gamma) * -std::log(1 - p + eps);
    return pos - neg;
}

Tensor alpha_loss(const Tensor& pred, std::span<const double> target_angles) {
    if (pred.rank() != 2 || pred.dim(1) != 2 || pred.dim(0) != target_angles.size()) {
        throw DimensionError("alpha loss: " + shape_str(pred.shape()) + " vs " +
                             std::to_string(target_angles.size()) + " angles");
    }
    const std::size_t k = target_angles.size();
    if (k == 0) return Tensor::scalar(0.0);
    std::vector<double> target;
    for (double a : target_angles) {
        const auto [s, c] = encode_angle(a);
        target.push_back(s);
        target.push_back(c);
    }
    const double w[2] = {1.0, 1.0};
    return scale(weighted_l1(pred, target, w), 1.0 / static_cast<double>(k));
}

std::vector<std::pair<std::size_t, std::size_t>> match_2d(const Pred2D& pred, const MappingMatrix& mapping,
                                                          const Scene& scene, const ModelConfig& cfg) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    const std::size_t k = pred.logits.dim(1);
    const auto logits = pred.logits.values();
    const auto boxes = pred.boxes.values();
    for (std::size_t v = 0; v < mapping.num_cameras(); ++v) {
        std::vector<std::size_t> gt;
        for (std::size_t g = 0; g < scene.labels.size(); ++g)
            if (scene.labels[g].camera == v) gt.push_back(g);
        const std::size_t begin = mapping.group_offset(v), rows = mapping.group_size(v);
        if (rows == 0 || gt.empty()) continue;
        const CameraParams& cam = scene.rig.at(v);
        std::vector<double> cost(rows * gt.size());
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t j = begin + r;
            const Box2D pb{boxes[j * 4], boxes[j * 4 + 1], boxes[j * 4 + 2], boxes[j * 4 + 3]};
            for (std::size_t c = 0; c < gt.size(); ++c) {
                const Box2D& gb = scene.labels[gt[c]].box;
                const double l1 = std::abs(pb.cx - gb.cx) / cam.width + std::abs(pb.cy - gb.cy) / cam.height +
                                  std::abs(pb.w - gb.w) / cam.width + std::abs(pb.h - gb.h) / cam.height;
                // GIoU from the differentiable loss: 1 - loss.
                const double giou =
                    1.0 - giou_loss(Tensor({1, 4}, {pb.cx, pb.cy, pb.w, pb.h}), std::vector<double>{gb.cx, gb.cy, gb.w, gb.h})
                              .item();
                cost[r * gt.size() + c] = cfg.w_cls * focal_cost(logits[j * k + gb.class_id]) + cfg.w_l1 * l1 -
                                          cfg.w_giou * giou;
            }
        }
        for (const auto& [r, c] : hungarian_match(cost, rows, gt.size()).pairs) out.emplace_back(begin + r, gt[c]);
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<std::pair<std::size_t, std::size_t>> match_3d(const Pred3D& pred, const Scene& scene,
                                                          const ModelConfig& cfg) {
    const std::size_t n = pred.logits.dim(0), k = pred.logits.dim(1), g = scene.objects.size();
    if (n == 0 || g == 0) return {};
    const auto logits = pred.logits.values();
    const auto enc = pred.encoded.values();
    std::vector<double> cost(n * g);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < g; ++c) {
            const Anchor3D& b = scene.objects[c].box;
            const double l1 = std::abs(enc[i * kAnchorEncoding] - b.x) + std::abs(enc[i * kAnchorEncoding + 1] - b.y) +
                              std::abs(enc[i * kAnchorEncoding + 2] - b.z);
            cost[i * g + c] = cfg.w_cls * focal_cost(logits[i * k + scene.objects[c].class_id]) + cfg.w_center * l1;
        }
    return hungarian_match(cost, n, g).pairs;
}

LossResult compute_losses(const DecoderOutput& out, const Scene& scene, const ModelConfig& cfg) {
    LossResult res;
    std::vector<Tensor> terms;

    for (const Stage2D& stage : out.stages2d) {
        const MappingMatrix& mapping = stage.alloc.mapping;
        const std::size_t m = mapping.num_columns();
        if (m == 0) continue;
        std::size_t num_gt = 0;
        for (const Label2D& l : scene.labels)
            if (l.camera < mapping.num_cameras()) ++num_gt;
        const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(num_gt, 1));
        std::vector<int> gt_class;
        for (const Label2D& l : scene.labels) gt_class.push_back(l.box.class_id);

        for (const Pred2D& pred : stage.layers) {
            const auto pairs = match_2d(pred, mapping, scene, cfg);
            Tensor cls = scale(sigmoid_focal_loss(pred.logits, class_targets(m, pairs, gt_class)), cfg.w_cls * norm);
            terms.push_back(cls);
            res.parts.cls2d += cls.item();
            res.parts.matched2d += pairs.size();
            if (pairs.empty()) continue;

            const auto rows = first_of(pairs);
            std::vector<double> target, weights, angles;
            Tensor boxes = gather_rows(pred.boxes, rows);
            Tensor alpha = gather_rows(pred.alpha, rows);
            // Pairs are sorted by column, so each camera's matches are contiguous
            // and share one image-size normalisation.
            std::vector<Tensor> l1_parts;
            std::size_t begin = 0;
            while (begin < pairs.size()) {
                const std::size_t cam = mapping.columns()[pairs[begin].first].camera;
                std::size_t end = begin;
                std::vector<double> t;
                while (end < pairs.size() && mapping.columns()[pairs[end].first].camera == cam) {
                    const Box2D& gb = scene.labels[pairs[end].second].box;
                    t.insert(t.end(), {gb.cx, gb.cy, gb.w, gb.h});
                    ++end;
                }
                const CameraParams& c = scene.rig.at(cam);
                const double w[4] = {cfg.w_l1 / c.width, cfg.w_l1 / c.height, cfg.w_l1 / c.width, cfg.w_l1 / c.height};
                l1_parts.push_back(weighted_l1(slice_rows(boxes, begin, end), t, w));
                begin = end;
            }
            for (const auto& [r, g] : pairs) {
                const Box2D& gb = scene.labels[g].box;
                target.insert(target.end(), {gb.cx, gb.cy, gb.w, gb.h});
                angles.push_back(scene.labels[g].alpha);
            }
            Tensor l1 = l1_parts.front();
            for (std::size_t i = 1; i < l1_parts.size(); ++i) l1 = add(l1, l1_parts[i]);
            l1 = scale(l1, norm);
            Tensor giou = scale(giou_loss(boxes, target), cfg.w_giou * norm);
            Tensor la = alpha_loss(alpha, angles);
            terms.push_back(l1);
            terms.push_back(giou);
            terms.push_back(scale(la, cfg.lambda_alpha));
            res.parts.l1_2d += l1.item();
            res.parts.giou2d += giou.item();
            res.parts.alpha += la.item();
        }
    }

    std::vector<int> gt_class;
    std::vector<std::array<double, kAnchorEncoding>> gt_enc;
    for (const SceneObject& o : scene.objects) {
        gt_class.push_back(o.class_id);
        gt_enc.push_back(encode_anchor(o.box));
    }
    const double norm3 = 1.0 / static_cast<double>(std::max<std::size_t>(scene.objects.size(), 1));
    const double w3[kAnchorEncoding] = {cfg.w_center, cfg.w_center, cfg.w_center, cfg.w_size, cfg.w_size,
                                        cfg.w_size,   cfg.w_yaw,    cfg.w_yaw,    cfg.w_vel,  cfg.w_vel};
    for (const Pred3D& pred : out.preds3d) {
        const double tap = pred.aux ? cfg.aux_weight : 1.0;
        const auto pairs = match_3d(pred, scene, cfg);
        Tensor cls = scale(sigmoid_focal_loss(pred.logits, class_targets(pred.logits.dim(0), pairs, gt_class)),
                           cfg.w_cls * norm3 * tap);
        Tensor layer = cls;
        double reg_value = 0;
        if (!pairs.empty()) {
            std::vector<double> target;
            for (const auto& [r, g] : pairs) target.insert(target.end(), gt_enc[g].begin(), gt_enc[g].end());
            Tensor reg = scale(weighted_l1(gather_rows(pred.encoded, first_of(pairs)), target, w3), norm3 * tap);
            layer = add(layer, reg);
            reg_value = reg.item();
        }
        terms.push_back(layer);
        res.parts.cls3d += cls.item();
        res.parts.reg3d += reg_value;
        if (pred.aux) res.parts.aux3d += cls.item() + reg_value;
        res.parts.matched3d += pairs.size();
    }

    Tensor total = terms.empty() ? Tensor::scalar(0.0) : terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
    res.total = total;
    res.parts.total = total.item();
    return res;
}

}  // namespace hqdet
