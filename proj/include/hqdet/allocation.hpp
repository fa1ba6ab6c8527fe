#pragma once

// Dynamic query allocation: decides which cameras each 3D query is visible
// in and materialises one 2D query per (camera, visible 3D query).
//
// The N x M mapping matrix T is binary with exactly one 1 per column, so it
// is stored as the column sequence (camera, owning 3D query) grouped by
// camera. Q2d = T^T Q3d is a row gather; T X is a row scatter-add.

#include "hqdet/geometry.hpp"
#include "hqdet/tensor.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace hqdet {

using CameraRig = std::vector<CameraParams>;

struct MappingColumn {
    std::size_t camera = 0;
    std::size_t query = 0;

    bool operator==(const MappingColumn&) const = default;
};

class MappingMatrix {
public:
    MappingMatrix() = default;
    /// `columns` must be grouped by ascending camera index.
    MappingMatrix(std::size_t num_queries, std::size_t num_cameras, std::vector<MappingColumn> columns);

    std::size_t num_queries() const { return num_queries_; }
    std::size_t num_columns() const { return columns_.size(); }
    std::size_t num_cameras() const { return offsets_.empty() ? 0 : offsets_.size() - 1; }

    const std::vector<MappingColumn>& columns() const { return columns_; }
    /// Column range of camera v is [group_offset(v), group_offset(v + 1)).
    std::size_t group_offset(std::size_t camera) const { return offsets_.at(camera); }
    std::size_t group_size(std::size_t camera) const { return offsets_.at(camera + 1) - offsets_.at(camera); }
    std::vector<std::size_t> group_sizes() const;
    std::vector<std::size_t> owners() const;
    /// Number of columns owned by each 3D query (row sums of T).
    std::vector<std::size_t> row_counts() const;

    /// T^T Y for Y[N, C] -> [M, C].
    Tensor gather(const Tensor& y) const;
    /// T X for X[M, C] -> [N, C] (plain sum, no normalisation).
    Tensor scatter_sum(const Tensor& x) const;

    bool operator==(const MappingMatrix&) const = default;

private:
    std::size_t num_queries_ = 0;
    std::vector<MappingColumn> columns_;
    std::vector<std::size_t> offsets_;
};

/// Projections of every anchor into every camera, indexed [camera][query].
struct RigProjection {
    std::size_t num_queries = 0;
    std::vector<std::vector<ProjectionResult>> per_camera;
};

/// Projects clamped copies of the anchors; the anchors themselves are not
/// modified.
RigProjection project_rig(std::span<const Anchor3D> anchors, const CameraRig& rig, const AnchorLimits& limits = {});

/// Keeps, per camera, the diagonal columns whose query is valid there, then
/// concatenates cameras in ascending order.
MappingMatrix build_mapping(const RigProjection& proj);
MappingMatrix build_mapping(std::span<const Anchor3D> anchors, const CameraRig& rig);

inline constexpr std::size_t kTruncatedCapPerCamera = 100;

/// Limits each camera group to `cap` truncated columns (projected center
/// outside the image or behind the camera). Excess columns are evicted in
/// ascending order of clipped-rectangle area, ties by ascending query index.
MappingMatrix apply_caps(const MappingMatrix& mapping, const RigProjection& proj,
                         std::size_t cap = kTruncatedCapPerCamera);
MappingMatrix apply_caps(const MappingMatrix& mapping, std::span<const Anchor3D> anchors, const CameraRig& rig,
                         std::size_t cap = kTruncatedCapPerCamera, const AnchorLimits& limits = {});

struct AllocationConfig {
    AnchorLimits limits{};
    std::size_t truncated_cap = kTruncatedCapPerCamera;
};

struct AllocationResult {
    MappingMatrix mapping;
    /// [M, C], row j a copy of q3d row owner(j).
    Tensor q2d;
    /// Interleaved (u, v) per column: projected center when it lands inside
    /// the image, else the center of the clipped bounding rectangle.
    std::vector<double> reference_points;
    /// 1 when the projected center is outside the image or behind the camera.
    std::vector<unsigned char> truncation;
    /// Clipped bounding rectangle per column.
    std::vector<Rect> rects;
    std::vector<std::size_t> group_sizes;
};

/// Geometry half of allocate(): mapping plus per-column reference points,
/// truncation bits and rectangles, without touching any query tensor.
AllocationResult allocate_geometry(std::span<const Anchor3D> anchors, const CameraRig& rig,
                                   const AllocationConfig& config = {});

AllocationResult allocate(const Tensor& q3d, std::span<const Anchor3D> anchors, const CameraRig& rig,
                          const AllocationConfig& config = {});

}  // namespace hqdet
