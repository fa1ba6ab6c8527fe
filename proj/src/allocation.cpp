#include "hqdet/allocation.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace hqdet {

MappingMatrix::MappingMatrix(std::size_t num_queries, std::size_t num_cameras, std::vector<MappingColumn> columns)
    : num_queries_(num_queries), columns_(std::move(columns)), offsets_(num_cameras + 1, 0) {
    for (std::size_t j = 0; j < columns_.size(); ++j) {
        const auto& c = columns_[j];
        if (c.camera >= num_cameras || c.query >= num_queries) {
            throw DimensionError("mapping: column " + std::to_string(j) + " out of range");
        }
        if (j > 0 && c.camera < columns_[j - 1].camera) {
            throw DimensionError("mapping: columns are not grouped by camera");
        }
        ++offsets_[c.camera + 1];
    }
    std::partial_sum(offsets_.begin(), offsets_.end(), offsets_.begin());
}

std::vector<std::size_t> MappingMatrix::group_sizes() const {
    std::vector<std::size_t> out(num_cameras());
    for (std::size_t v = 0; v < out.size(); ++v) out[v] = group_size(v);
    return out;
}

std::vector<std::size_t> MappingMatrix::owners() const {
    std::vector<std::size_t> out;
    out.reserve(columns_.size());
    for (const auto& c : columns_) out.push_back(c.query);
    return out;
}

std::vector<std::size_t> MappingMatrix::row_counts() const {
    std::vector<std::size_t> out(num_queries_, 0);
    for (const auto& c : columns_) ++out[c.query];
    return out;
}

Tensor MappingMatrix::gather(const Tensor& y) const {
    if (y.rank() != 2 || y.dim(0) != num_queries_) {
        throw DimensionError("mapping gather: expected [" + std::to_string(num_queries_) + ",C], got " +
                             shape_str(y.shape()));
    }
    const auto own = owners();
    return gather_rows(y, own);
}

Tensor MappingMatrix::scatter_sum(const Tensor& x) const {
    if (x.rank() != 2 || x.dim(0) != columns_.size()) {
        throw DimensionError("mapping scatter: expected [" + std::to_string(columns_.size()) + ",C], got " +
                             shape_str(x.shape()));
    }
    const auto own = owners();
    return segment_sum_rows(x, own, num_queries_);
}

RigProjection project_rig(std::span<const Anchor3D> anchors, const CameraRig& rig, const AnchorLimits& limits) {
    RigProjection out;
    out.num_queries = anchors.size();
    out.per_camera.resize(rig.size());
    for (std::size_t v = 0; v < rig.size(); ++v) {
        out.per_camera[v].reserve(anchors.size());
        for (const auto& a : anchors) out.per_camera[v].push_back(project_anchor(clamp_anchor(a, limits), rig[v]));
    }
    return out;
}

MappingMatrix build_mapping(const RigProjection& proj) {
    std::vector<MappingColumn> cols;
    for (std::size_t v = 0; v < proj.per_camera.size(); ++v)
        for (std::size_t i = 0; i < proj.num_queries; ++i)
            if (proj.per_camera[v][i].valid) cols.push_back({v, i});
    return MappingMatrix(proj.num_queries, proj.per_camera.size(), std::move(cols));
}

MappingMatrix build_mapping(std::span<const Anchor3D> anchors, const CameraRig& rig) {
    RigProjection proj;
    proj.num_queries = anchors.size();
    proj.per_camera.resize(rig.size());
    for (std::size_t v = 0; v < rig.size(); ++v)
        for (const auto& a : anchors) proj.per_camera[v].push_back(project_anchor(a, rig[v]));
    return build_mapping(proj);
}

MappingMatrix apply_caps(const MappingMatrix& mapping, const RigProjection& proj, std::size_t cap) {
    std::vector<MappingColumn> kept;
    kept.reserve(mapping.num_columns());
    for (std::size_t v = 0; v < mapping.num_cameras(); ++v) {
        const std::size_t begin = mapping.group_offset(v), end = mapping.group_offset(v + 1);
        std::vector<std::size_t> truncated;
        for (std::size_t j = begin; j < end; ++j)
            if (!proj.per_camera[v][mapping.columns()[j].query].center_in_image) truncated.push_back(j);
        std::vector<unsigned char> drop(end - begin, 0);
        if (truncated.size() > cap) {
            auto area = [&](std::size_t j) { return proj.per_camera[v][mapping.columns()[j].query].rect.area(); };
            std::stable_sort(truncated.begin(), truncated.end(), [&](std::size_t a, std::size_t b) {
                const double aa = area(a), ab = area(b);
                if (aa != ab) return aa < ab;
                return mapping.columns()[a].query < mapping.columns()[b].query;
            });
            for (std::size_t k = 0; k < truncated.size() - cap; ++k) drop[truncated[k] - begin] = 1;
        }
        for (std::size_t j = begin; j < end; ++j)
            if (!drop[j - begin]) kept.push_back(mapping.columns()[j]);
    }
    return MappingMatrix(mapping.num_queries(), mapping.num_cameras(), std::move(kept));
}

MappingMatrix apply_caps(const MappingMatrix& mapping, std::span<const Anchor3D> anchors, const CameraRig& rig,
                         std::size_t cap, const AnchorLimits& limits) {
    return apply_caps(mapping, project_rig(anchors, rig, limits), cap);
}

AllocationResult allocate_geometry(std::span<const Anchor3D> anchors, const CameraRig& rig,
                                   const AllocationConfig& config) {
    const RigProjection proj = project_rig(anchors, rig, config.limits);
    AllocationResult out;
    out.mapping = apply_caps(build_mapping(proj), proj, config.truncated_cap);
    const std::size_t m = out.mapping.num_columns();
    out.reference_points.resize(2 * m);
    out.truncation.resize(m);
    out.rects.resize(m);
    for (std::size_t j = 0; j < m; ++j) {
        const auto& col = out.mapping.columns()[j];
        const ProjectionResult& p = proj.per_camera[col.camera][col.query];
        out.rects[j] = p.rect;
        out.truncation[j] = p.center_in_image ? 0 : 1;
        if (p.center_in_image) {
            out.reference_points[2 * j] = p.points[0].u;
            out.reference_points[2 * j + 1] = p.points[0].v;
        } else {
            out.reference_points[2 * j] = (p.rect.x1 + p.rect.x2) / 2;
            out.reference_points[2 * j + 1] = (p.rect.y1 + p.rect.y2) / 2;
        }
    }
    out.group_sizes = out.mapping.group_sizes();
    return out;
}

AllocationResult allocate(const Tensor& q3d, std::span<const Anchor3D> anchors, const CameraRig& rig,
                          const AllocationConfig& config) {
    if (q3d.rank() != 2 || q3d.dim(0) != anchors.size()) {
        throw UsageError("allocate: q3d " + shape_str(q3d.shape()) + " does not match " +
                         std::to_string(anchors.size()) + " anchors");
    }
    AllocationResult out = allocate_geometry(anchors, rig, config);
    out.q2d = out.mapping.gather(q3d);
    return out;
}

}  // namespace hqdet
