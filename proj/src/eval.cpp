#include "hqdet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

namespace hqdet {

namespace {

std::map<std::string, const SceneDetections*> index_detections(std::span<const SceneDetections> detections,
                                                               std::span<const Scene> scenes) {
    std::map<std::string, const SceneDetections*> out;
    for (const SceneDetections& d : detections) {
        const bool known = std::any_of(scenes.begin(), scenes.end(), [&](const Scene& s) { return s.scene_id == d.scene_id; });
        if (!known) throw UsageError("eval: detections for unknown scene '" + d.scene_id + "'");
        if (!out.emplace(d.scene_id, &d).second) throw UsageError("eval: duplicate detections for '" + d.scene_id + "'");
    }
    return out;
}

const SceneObject& object_by_id(const Scene& s, int id) {
    for (const SceneObject& o : s.objects)
        if (o.id == id) return o;
    throw UsageError("eval: scene '" + s.scene_id + "' has a label for missing object " + std::to_string(id));
}

}  // namespace

void MatchPredicateParams::validate() const {
    if (!(tau_dis > 0)) throw UsageError("eval: tau_dis must be positive");
    if (!(tau_iou > 0 && tau_iou < 1)) throw UsageError("eval: tau_iou must lie in (0, 1)");
}

bool phi(const Detection3D& p3d, const Label2D& g2d, const SceneObject& g3d, const CameraParams& cam,
         const MatchPredicateParams& params) {
    if (p3d.class_id != g2d.box.class_id) return false;
    if (center_dist3d(p3d.box, g3d.box) > params.tau_dis) return false;
    const ProjectionResult proj = project_anchor(clamp_anchor(p3d.box), cam);
    if (!proj.valid) return false;
    return iou2d(proj.rect.to_box(), g2d.box) >= params.tau_iou;
}

bool psi(const Detection3D& p3d, const Detection2D* p2d, const Label2D& g2d, const SceneObject& g3d,
         const CameraParams& cam, const MatchPredicateParams& params) {
    if (!p2d || !phi(p3d, g2d, g3d, cam, params)) return false;
    return p2d->box.class_id == g2d.box.class_id && iou2d(p2d->box, g2d.box) >= params.tau_iou;
}

std::vector<double> default_tau_iou_sweep() {
    std::vector<double> out;
    for (int i = 1; i <= 9; ++i) out.push_back(i / 10.0);
    return out;
}

AssociationReport aar_recall(std::span<const SceneDetections> detections, std::span<const Scene> scenes,
                             double tau_dis, std::span<const double> tau_iou_sweep) {
    const auto by_scene = index_detections(detections, scenes);
    AssociationReport report;
    report.tau_dis = tau_dis;
    for (double tau_iou : tau_iou_sweep) {
        const MatchPredicateParams params{tau_dis, tau_iou};
        params.validate();
        AssociationPoint pt;
        pt.tau_iou = tau_iou;
        for (const Scene& s : scenes) {
            pt.num_gt2d += s.labels.size();
            const auto it = by_scene.find(s.scene_id);
            if (it == by_scene.end()) continue;
            const SceneDetections& d = *it->second;
            for (const Detection3D& p3d : d.det3d) {
                for (const Label2D& g : s.labels) {
                    const Detection2D* link = nullptr;
                    for (const Detection2D& p2d : d.det2d) {
                        if (p2d.linked_3d_id != p3d.id || p2d.camera != g.camera) continue;
                        if (link) {
                            throw UsageError("eval: 3D detection " + std::to_string(p3d.id) +
                                             " links two 2D detections in camera " + std::to_string(g.camera));
                        }
                        link = &p2d;
                    }
                    const SceneObject& g3d = object_by_id(s, g.object_id);
                    const CameraParams& cam = s.rig.at(g.camera);
                    if (phi(p3d, g, g3d, cam, params)) ++pt.matching;
                    if (psi(p3d, link, g, g3d, cam, params)) ++pt.valid_matching;
                }
            }
        }
        if (pt.matching > 0) pt.aar = 100.0 * static_cast<double>(pt.valid_matching) / static_cast<double>(pt.matching);
        if (pt.num_gt2d > 0) {
            pt.recall = 100.0 * static_cast<double>(pt.valid_matching) / static_cast<double>(pt.num_gt2d);
        }
        report.curve.push_back(pt);
    }
    return report;
}

APReport average_precision_2d(std::span<const SceneDetections> detections, std::span<const Scene> scenes,
                              double iou_threshold, std::size_t num_classes) {
    const auto by_scene = index_detections(detections, scenes);
    APReport report;
    report.per_class.assign(num_classes, std::nullopt);
    report.pr_points.resize(num_classes);
    std::size_t counted = 0;
    double total = 0;
    for (std::size_t cls = 0; cls < num_classes; ++cls) {
        struct Cand {
            double score;
            std::size_t scene, order;
            const Detection2D* det;
        };
        std::vector<Cand> cands;
        std::size_t num_gt = 0;
        for (std::size_t si = 0; si < scenes.size(); ++si) {
            for (const Label2D& l : scenes[si].labels)
                if (l.box.class_id == static_cast<int>(cls)) ++num_gt;
            const auto it = by_scene.find(scenes[si].scene_id);
            if (it == by_scene.end()) continue;
            const auto& dets = it->second->det2d;
            for (std::size_t k = 0; k < dets.size(); ++k)
                if (dets[k].box.class_id == static_cast<int>(cls)) cands.push_back({dets[k].box.score, si, k, &dets[k]});
        }
        if (num_gt == 0) continue;
        std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.score > b.score; });

        std::vector<std::vector<char>> used(scenes.size());
        for (std::size_t si = 0; si < scenes.size(); ++si) used[si].assign(scenes[si].labels.size(), 0);
        std::vector<double> precision, recall;
        std::size_t tp = 0, seen = 0;
        for (const Cand& c : cands) {
            ++seen;
            const auto& labels = scenes[c.scene].labels;
            double best = -1;
            std::size_t best_k = 0;
            for (std::size_t k = 0; k < labels.size(); ++k) {
                if (used[c.scene][k] || labels[k].camera != c.det->camera || labels[k].box.class_id != static_cast<int>(cls))
                    continue;
                const double iou = iou2d(c.det->box, labels[k].box);
                if (iou > best) {
                    best = iou;
                    best_k = k;
                }
            }
            if (best >= iou_threshold) {
                used[c.scene][best_k] = 1;
                ++tp;
            }
            precision.push_back(static_cast<double>(tp) / static_cast<double>(seen));
            recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
        }
        for (std::size_t i = 0; i < precision.size(); ++i) report.pr_points[cls].emplace_back(recall[i], precision[i]);
        // Precision envelope, then area under the step function.
        for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
        double ap = 0, prev_recall = 0;
        for (std::size_t i = 0; i < precision.size(); ++i) {
            ap += (recall[i] - prev_recall) * precision[i];
            prev_recall = recall[i];
        }
        report.per_class[cls] = ap;
        total += ap;
        ++counted;
    }
    report.mean = counted ? total / static_cast<double>(counted) : 0.0;
    return report;
}

CenterErrorReport center_error_3d(std::span<const SceneDetections> detections, std::span<const Scene> scenes,
                                  double gate) {
    const auto by_scene = index_detections(detections, scenes);
    CenterErrorReport report;
    std::vector<double> dists, yaws;
    for (const Scene& s : scenes) {
        report.num_gt += s.objects.size();
        const auto it = by_scene.find(s.scene_id);
        if (it == by_scene.end()) continue;
        std::vector<const Detection3D*> dets;
        for (const Detection3D& d : it->second->det3d) dets.push_back(&d);
        std::stable_sort(dets.begin(), dets.end(),
                         [](const Detection3D* a, const Detection3D* b) { return a->score > b->score; });
        std::vector<char> used(s.objects.size(), 0);
        for (const Detection3D* d : dets) {
            double best = gate;
            std::size_t best_k = s.objects.size();
            for (std::size_t k = 0; k < s.objects.size(); ++k) {
                if (used[k] || s.objects[k].class_id != d->class_id) continue;
                const double dist = center_dist3d(d->box, s.objects[k].box);
                if (dist <= best) {
                    if (best_k < s.objects.size() && dist == best) continue;
                    best = dist;
                    best_k = k;
                }
            }
            if (best_k == s.objects.size()) continue;
            used[best_k] = 1;
            dists.push_back(best);
            yaws.push_back(std::abs(wrap_angle(d->box.yaw - s.objects[best_k].box.yaw)));
        }
    }
    report.matched = dists.size();
    if (!dists.empty()) {
        double sum = 0, ysum = 0;
        for (double d : dists) sum += d;
        for (double y : yaws) ysum += y;
        report.mean = sum / static_cast<double>(dists.size());
        report.mean_yaw = ysum / static_cast<double>(yaws.size());
        std::vector<double> sorted = dists;
        std::sort(sorted.begin(), sorted.end());
        const std::size_t n = sorted.size();
        report.median = n % 2 ? sorted[n / 2] : (sorted[n / 2 - 1] + sorted[n / 2]) / 2;
    }
    return report;
}

}  // namespace hqdet
