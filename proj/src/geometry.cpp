#include "hqdet/geometry.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace hqdet {

void CameraParams::validate() const {
    if (!(fx() > 0 && fy() > 0)) throw GeometryError("camera: focal lengths must be positive");
    if (!(width > 0 && height > 0)) throw GeometryError("camera: image size must be positive");
    if (!(cx() > 0 && cx() < width && cy() > 0 && cy() < height)) {
        throw GeometryError("camera: principal point outside the image");
    }
    const Eigen::Matrix3d r = extrinsic.topLeftCorner<3, 3>();
    if (!(r.transpose() * r).isApprox(Eigen::Matrix3d::Identity(), 1e-9) || std::abs(r.determinant() - 1.0) > 1e-9) {
        throw GeometryError("camera: extrinsic rotation is not a proper rotation");
    }
}

CameraParams make_camera(double yaw, const Eigen::Vector3d& position, double hfov, double width, double height) {
    const Eigen::Vector3d forward(std::cos(yaw), std::sin(yaw), 0.0);
    const Eigen::Vector3d right(std::sin(yaw), -std::cos(yaw), 0.0);
    const Eigen::Vector3d down(0.0, 0.0, -1.0);
    Eigen::Matrix3d r;
    r.row(0) = right.transpose();
    r.row(1) = down.transpose();
    r.row(2) = forward.transpose();

    CameraParams cam;
    cam.extrinsic.setIdentity();
    cam.extrinsic.topLeftCorner<3, 3>() = r;
    cam.extrinsic.topRightCorner<3, 1>() = -r * position;
    const double f = (width / 2.0) / std::tan(hfov / 2.0);
    cam.intrinsic << f, 0, width / 2.0, 0, f, height / 2.0, 0, 0, 1;
    cam.width = width;
    cam.height = height;
    return cam;
}

Anchor3D clamp_anchor(const Anchor3D& a, const AnchorLimits& limits) {
    Anchor3D out = a;
    out.l = std::min(out.l, limits.max_l);
    out.w = std::min(out.w, limits.max_w);
    out.h = std::min(out.h, limits.max_h);
    return out;
}

std::array<Eigen::Vector3d, kObjectPoints> box_corners(const Anchor3D& a) {
    std::array<Eigen::Vector3d, kObjectPoints> pts;
    const Eigen::Vector3d center(a.x, a.y, a.z);
    pts[0] = center;
    const double c = std::cos(a.yaw), s = std::sin(a.yaw);
    for (int k = 0; k < 8; ++k) {
        const double dl = (k & 1 ? 0.5 : -0.5) * a.l;
        const double dw = (k & 2 ? 0.5 : -0.5) * a.w;
        const double dh = (k & 4 ? 0.5 : -0.5) * a.h;
        pts[static_cast<std::size_t>(k) + 1] = center + Eigen::Vector3d(c * dl - s * dw, s * dl + c * dw, dh);
    }
    return pts;
}

ProjectedPoint project_point(const Eigen::Vector3d& p_ego, const CameraParams& cam) {
    const Eigen::Vector3d pc = cam.extrinsic.topLeftCorner<3, 3>() * p_ego + cam.extrinsic.topRightCorner<3, 1>();
    const Eigen::Vector3d pix = cam.intrinsic * pc;
    ProjectedPoint out;
    out.depth = pc.z();
    out.in_front = pc.z() > kFrontEpsilon;
    // Pixel coordinates of points behind the camera are still defined (the
    // divide flips them) but never count toward validity.
    const double z = std::abs(pc.z()) > kFrontEpsilon ? pc.z() : (pc.z() < 0 ? -kFrontEpsilon : kFrontEpsilon);
    out.u = pix.x() / z;
    out.v = pix.y() / z;
    return out;
}

std::vector<ProjectedPoint> project_points(std::span<const Eigen::Vector3d> pts, const CameraParams& cam) {
    std::vector<ProjectedPoint> out;
    out.reserve(pts.size());
    for (const auto& p : pts) out.push_back(project_point(p, cam));
    return out;
}

Eigen::Vector3d unproject(double u, double v, double depth, const CameraParams& cam) {
    const Eigen::Vector3d ray = cam.intrinsic.inverse() * Eigen::Vector3d(u, v, 1.0);
    const Eigen::Vector3d pc = ray * depth;
    const Eigen::Matrix3d r = cam.extrinsic.topLeftCorner<3, 3>();
    return r.transpose() * (pc - cam.extrinsic.topRightCorner<3, 1>());
}

namespace {

bool strictly_inside(const ProjectedPoint& p, const CameraParams& cam) {
    return p.in_front && p.u > 0 && p.u < cam.width && p.v > 0 && p.v < cam.height;
}

}  // namespace

bool validity(const ProjectionResult& proj, const CameraParams& cam) {
    return std::any_of(proj.points.begin(), proj.points.end(),
                       [&](const ProjectedPoint& p) { return strictly_inside(p, cam); });
}

ProjectionResult project_anchor(const Anchor3D& a, const CameraParams& cam) {
    ProjectionResult out;
    const auto pts = box_corners(a);
    for (std::size_t k = 0; k < kObjectPoints; ++k) out.points[k] = project_point(pts[k], cam);
    out.valid = validity(out, cam);
    out.center_in_image = strictly_inside(out.points[0], cam);
    if (out.valid) {
        Rect r{cam.width, cam.height, 0.0, 0.0};
        for (const auto& p : out.points) {
            if (!p.in_front) continue;
            r.x1 = std::min(r.x1, std::clamp(p.u, 0.0, cam.width));
            r.y1 = std::min(r.y1, std::clamp(p.v, 0.0, cam.height));
            r.x2 = std::max(r.x2, std::clamp(p.u, 0.0, cam.width));
            r.y2 = std::max(r.y2, std::clamp(p.v, 0.0, cam.height));
        }
        out.rect = r;
    }
    return out;
}

double wrap_angle(double theta) {
    constexpr double pi = std::numbers::pi;
    double t = std::fmod(theta + pi, 2 * pi);
    if (t <= 0) t += 2 * pi;
    return t - pi;
}

std::pair<double, double> encode_angle(double theta) { return {std::sin(theta), std::cos(theta)}; }

double alpha_angle(const Anchor3D& a, const CameraParams& cam) {
    const Eigen::Matrix3d r = cam.extrinsic.topLeftCorner<3, 3>();
    const Eigen::Vector3d center = r * Eigen::Vector3d(a.x, a.y, a.z) + cam.extrinsic.topRightCorner<3, 1>();
    if (center.z() <= kFrontEpsilon) throw GeometryError("alpha_angle: object center is behind the camera");
    const Eigen::Vector3d heading = r * Eigen::Vector3d(std::cos(a.yaw), std::sin(a.yaw), 0.0);
    const double yaw_cam = std::atan2(-heading.z(), heading.x());
    return wrap_angle(yaw_cam - std::atan2(center.x(), center.z()));
}

double iou2d(const Box2D& a, const Box2D& b) {
    const double iw = std::min(a.cx + a.w / 2, b.cx + b.w / 2) - std::max(a.cx - a.w / 2, b.cx - b.w / 2);
    const double ih = std::min(a.cy + a.h / 2, b.cy + b.h / 2) - std::max(a.cy - a.h / 2, b.cy - b.h / 2);
    const double inter = std::max(0.0, iw) * std::max(0.0, ih);
    const double uni = a.w * a.h + b.w * b.h - inter;
    return uni > 0 ? inter / uni : 0.0;
}

double center_dist3d(const Anchor3D& a, const Anchor3D& b) {
    return std::sqrt((a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y) + (a.z - b.z) * (a.z - b.z));
}

}  // namespace hqdet
