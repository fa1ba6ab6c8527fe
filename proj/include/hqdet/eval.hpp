#pragma once

// Detection metrics: single-threshold 2D average precision, 3D center and yaw
// error over greedy matches, and the association accuracy rate (AAR) with
// its recall.

#include "hqdet/scene.hpp"

#include <optional>
#include <span>
#include <vector>

namespace hqdet {

struct MatchPredicateParams {
    double tau_dis = 2.0;  // meters
    double tau_iou = 0.5;

    /// Throws UsageError unless tau_dis > 0 and tau_iou in (0, 1).
    void validate() const;
};

/// Phi: the 3D prediction lies within tau_dis of the label's object, its own
/// projection rectangle overlaps the label by at least tau_iou and the
/// classes agree. Zero when the prediction is not valid in the camera.
bool phi(const Detection3D& p3d, const Label2D& g2d, const SceneObject& g3d, const CameraParams& cam,
         const MatchPredicateParams& params);

/// Psi: phi plus the linked 2D prediction `p2d` (null when the 3D prediction
/// has none in this camera) overlapping the label by tau_iou with the same class.
bool psi(const Detection3D& p3d, const Detection2D* p2d, const Label2D& g2d, const SceneObject& g3d,
         const CameraParams& cam, const MatchPredicateParams& params);

struct AssociationPoint {
    double tau_iou = 0;
    std::size_t matching = 0;        // sum of phi
    std::size_t valid_matching = 0;  // sum of psi
    std::size_t num_gt2d = 0;
    /// Percent; absent when no candidate match exists.
    std::optional<double> aar;
    /// valid_matching / num_gt2d in percent; absent without 2D labels.
    std::optional<double> recall;
};

struct AssociationReport {
    double tau_dis = 2.0;
    std::vector<AssociationPoint> curve;
};

/// 0.1, 0.2, ..., 0.9
std::vector<double> default_tau_iou_sweep();

/// Sums phi and psi over every (3D prediction, 2D label) pair of every
/// scene. Detections are paired with scenes by scene_id; a scene without
/// detections contributes only its labels. Throws UsageError when a 3D id
/// links to two 2D predictions in one camera or a detection names an unknown
/// scene.
AssociationReport aar_recall(std::span<const SceneDetections> detections, std::span<const Scene> scenes,
                             double tau_dis, std::span<const double> tau_iou_sweep);

struct APReport {
    /// Per class; absent for classes without ground truth.
    std::vector<std::optional<double>> per_class;
    double mean = 0;  // over classes with ground truth
    /// Raw (recall, precision) after each ranked detection, per class.
    std::vector<std::vector<std::pair<double, double>>> pr_points;
};

/// Score-sorted greedy matching within (scene, camera, class): each
/// detection takes the unmatched label of highest IoU, a true positive when
/// that IoU reaches the threshold. All-point interpolated area under the
/// precision-recall curve.
APReport average_precision_2d(std::span<const SceneDetections> detections, std::span<const Scene> scenes,
                              double iou_threshold, std::size_t num_classes);

struct CenterErrorReport {
    std::size_t matched = 0;
    std::size_t num_gt = 0;
    double mean = 0, median = 0;
    /// Mean absolute wrapped yaw difference over the same pairs, radians.
    double mean_yaw = 0;
};

/// Detections in descending score order each take the nearest unmatched
/// same-class object of their scene within `gate` meters.
CenterErrorReport center_error_3d(std::span<const SceneDetections> detections, std::span<const Scene> scenes,
                                  double gate = 2.0);

}  // namespace hqdet
