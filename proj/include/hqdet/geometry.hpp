#pragma once

// Pinhole multi-camera geometry: box corners, ego -> pixel projection, the
// per-camera validity predicate, clipped bounding rectangles, observation
// angle and box overlap.
//
// Frames: ego is x forward, y left, z up. Camera frames are x right, y down,
// z forward (optical axis).

#include <Eigen/Core>

#include <array>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace hqdet {

class GeometryError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Points closer to the image plane than this are treated as behind it.
inline constexpr double kFrontEpsilon = 1e-6;

struct CameraParams {
    Eigen::Matrix3d intrinsic = Eigen::Matrix3d::Identity();
    /// Maps homogeneous ego points to the camera frame.
    Eigen::Matrix4d extrinsic = Eigen::Matrix4d::Identity();
    double width = 0.0;
    double height = 0.0;

    double fx() const { return intrinsic(0, 0); }
    double fy() const { return intrinsic(1, 1); }
    double cx() const { return intrinsic(0, 2); }
    double cy() const { return intrinsic(1, 2); }

    /// Throws GeometryError unless fx, fy > 0, the principal point is inside
    /// the image and the rotation block is orthonormal with det +1.
    void validate() const;
};

/// Camera mounted at ego position `position`, yawed by `yaw` (radians, about
/// ego z) with a level optical axis.
CameraParams make_camera(double yaw, const Eigen::Vector3d& position, double hfov, double width, double height);

struct Anchor3D {
    double x = 0, y = 0, z = 0;
    double w = 1, l = 1, h = 1;
    double yaw = 0;
    double vx = 0, vy = 0;

    bool operator==(const Anchor3D&) const = default;
};

struct AnchorLimits {
    double max_l = 35.0;
    double max_w = 35.0;
    double max_h = 10.0;
};

/// Copy with l, w, h clamped to `limits`.
Anchor3D clamp_anchor(const Anchor3D& a, const AnchorLimits& limits = {});

struct Box2D {
    double cx = 0, cy = 0, w = 0, h = 0;
    int class_id = 0;
    double score = 1.0;
};

struct Rect {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    double area() const { return (x2 - x1) * (y2 - y1); }
    Box2D to_box() const { return {(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1}; }
};

struct ProjectedPoint {
    double u = 0, v = 0;
    double depth = 0;  // camera-frame z
    bool in_front = false;
};

inline constexpr std::size_t kObjectPoints = 9;

struct ProjectionResult {
    std::array<ProjectedPoint, kObjectPoints> points{};
    bool valid = false;
    /// Rectangle of in-front points, clipped to [0, W] x [0, H]. Meaningful
    /// only when `valid`.
    Rect rect{};
    /// Projected center is in front of the camera and strictly inside the image.
    bool center_in_image = false;
};

/// Center followed by the 8 corners. Corner k (index k + 1) sits at local
/// offset (+-l/2, +-w/2, +-h/2) with bit 0 of k selecting the sign along l,
/// bit 1 along w and bit 2 along h (bit set = +), rotated by yaw about z.
std::array<Eigen::Vector3d, kObjectPoints> box_corners(const Anchor3D& a);

ProjectedPoint project_point(const Eigen::Vector3d& p_ego, const CameraParams& cam);
std::vector<ProjectedPoint> project_points(std::span<const Eigen::Vector3d> pts, const CameraParams& cam);

/// Inverse of project_point for a pixel at camera-frame depth `depth`.
Eigen::Vector3d unproject(double u, double v, double depth, const CameraParams& cam);

/// Projects the anchor's center and corners and derives validity, the clipped
/// bounding rectangle and the center-in-image flag.
ProjectionResult project_anchor(const Anchor3D& a, const CameraParams& cam);

/// f(q, v): some in-front projected point lies strictly inside (0,W) x (0,H).
bool validity(const ProjectionResult& proj, const CameraParams& cam);

/// Observation angle: camera-frame heading yaw minus the viewing-ray angle
/// atan2(x_cam, z_cam), wrapped to (-pi, pi]. The camera-frame yaw is
/// atan2(-h_z, h_x) of the ego heading vector rotated into the camera frame.
/// Throws GeometryError when the center is behind the camera.
double alpha_angle(const Anchor3D& a, const CameraParams& cam);

double wrap_angle(double theta);

/// (sin, cos) encoding used by the observation-angle loss.
std::pair<double, double> encode_angle(double theta);

double iou2d(const Box2D& a, const Box2D& b);
double center_dist3d(const Anchor3D& a, const Anchor3D& b);

}  // namespace hqdet
