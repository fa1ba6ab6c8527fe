#pragma once

// Synthetic scenes and the rasterized features that stand in for an image
// backbone.

#include "hqdet/model.hpp"
#include "hqdet/scene.hpp"
#include "hqdet/train.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace hqdet {

struct RigConfig {
    std::size_t cameras = 3;
    /// Yaw step between neighbouring cameras, centred on the forward axis.
    double yaw_spacing_deg = 50.0;
    double hfov_deg = 60.0;
    double width = 128.0, height = 64.0;
    double mount_height = 1.5;
};

CameraRig make_rig(const RigConfig& cfg);

struct GenConfig {
    RigConfig rig;
    double range_min = 6.0, range_max = 25.0;
    double half_angle_deg = 75.0;
    std::size_t min_objects = 3, max_objects = 6;
    std::vector<ClassSpec> classes = default_classes();
    /// Relative size jitter around the class medians.
    double size_jitter = 0.1;
    /// Every visible projection must be at least this many pixels wide and tall.
    double min_box_px = 2.0;
    bool require_straddle = true;
    std::size_t max_attempts = 1000;

    /// Throws ConfigError when the ranges are inconsistent or a straddling
    /// object is required but no two camera frusta overlap.
    void validate() const;
};

/// Clipped projection rectangles of every object in every camera where it is
/// valid, with truncation bit and observation angle, ordered by camera then
/// object.
std::vector<Label2D> derive_labels(std::span<const SceneObject> objects, const CameraRig& rig);

/// Deterministic in `seed`. Objects have disjoint footprints, sit on the
/// ground plane and are static. Placements whose projection is thinner than
/// min_box_px or whose center is behind a camera that sees them are
/// resampled; whole scenes without a straddling object are resampled.
Scene generate_scene(std::uint64_t seed, const GenConfig& cfg = {});
std::vector<Scene> generate_scenes(std::uint64_t seed, std::size_t count, const GenConfig& cfg = {});

struct RasterConfig {
    std::size_t num_classes = 2;
    /// Leak channels extend this many pixels beyond each rectangle.
    double halo_px = 24.0;

    std::size_t channels() const { return 15 + num_classes; }
};

/// Per-pixel channels for camera `cam` as [H, W, channels]. Each pixel is
/// owned by the nearest object (camera depth of its center, ties by id) whose
/// rectangle contains it, else by the nearest object whose halo contains it.
/// Channel layout: presence, inverse depth, class one-hot (rectangle owners
/// only), then halo proximity, offset to the projected center, four edge
/// distances, inverse depth, truncation bit, ego center x/y and
/// observation-angle sin/cos. Heading is only visible through the observation
/// angle.
Tensor rasterize(const Scene& scene, std::size_t cam, const RasterConfig& cfg = {});

/// [H, W, ch] -> [(H/p)(W/p), p*p*ch] row-major patches.
Tensor patchify(const Tensor& raster, std::size_t patch);

ModelInput make_model_input(const Scene& scene, const ModelConfig& model_cfg);
std::vector<Sample> make_samples(std::span<const Scene> scenes, const ModelConfig& model_cfg);

/// Inference without a tape; detections below `min_score` are dropped.
std::vector<SceneDetections> run_detection(const Model& model, std::span<const Sample> samples, double min_score);

}  // namespace hqdet
