#include "hqdet/harness.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace hqdet {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double footprint_radius(const Anchor3D& a) { return 0.5 * std::hypot(a.l, a.w); }

}  // namespace

CameraRig make_rig(const RigConfig& cfg) {
    CameraRig rig;
    const double mid = (static_cast<double>(cfg.cameras) - 1.0) / 2.0;
    for (std::size_t v = 0; v < cfg.cameras; ++v) {
        const double yaw = (static_cast<double>(v) - mid) * cfg.yaw_spacing_deg * kDeg;
        rig.push_back(make_camera(yaw, Eigen::Vector3d(0, 0, cfg.mount_height), cfg.hfov_deg * kDeg, cfg.width,
                                  cfg.height));
    }
    return rig;
}

void GenConfig::validate() const {
    if (!(range_min > 0 && range_max > range_min)) throw ConfigError("generator: invalid range");
    if (!(half_angle_deg > 0 && half_angle_deg <= 180)) throw ConfigError("generator: invalid sector");
    if (min_objects > max_objects) throw ConfigError("generator: min_objects > max_objects");
    if (classes.empty()) throw ConfigError("generator: no classes");
    if (!(size_jitter >= 0 && size_jitter < 1)) throw ConfigError("generator: size_jitter must be in [0, 1)");
    if (rig.cameras == 0 || !(rig.hfov_deg > 0 && rig.hfov_deg < 180)) throw ConfigError("generator: invalid rig");
    if (require_straddle) {
        if (max_objects == 0) throw ConfigError("generator: a straddling object needs max_objects > 0");
        if (rig.cameras < 2 || rig.yaw_spacing_deg >= rig.hfov_deg) {
            throw ConfigError("generator: straddling object required but no two camera frusta overlap");
        }
    }
}

std::vector<Label2D> derive_labels(std::span<const SceneObject> objects, const CameraRig& rig) {
    std::vector<Label2D> labels;
    for (std::size_t v = 0; v < rig.size(); ++v) {
        for (const SceneObject& o : objects) {
            const ProjectionResult p = project_anchor(o.box, rig[v]);
            if (!p.valid) continue;
            Label2D l;
            l.camera = v;
            l.object_id = o.id;
            l.box = p.rect.to_box();
            l.box.class_id = o.class_id;
            l.truncated = !p.center_in_image;
            l.alpha = p.points[0].in_front ? alpha_angle(o.box, rig[v]) : 0.0;
            labels.push_back(l);
        }
    }
    return labels;
}

Scene generate_scene(std::uint64_t seed, const GenConfig& cfg) {
    cfg.validate();
    const CameraRig rig = make_rig(cfg.rig);
    Rng rng(seed);
    const double r0 = cfg.range_min * cfg.range_min, r1 = cfg.range_max * cfg.range_max;
    const double half = cfg.half_angle_deg * kDeg;

    auto acceptable = [&](const Anchor3D& a, std::size_t& cameras_seen) {
        cameras_seen = 0;
        for (const CameraParams& cam : rig) {
            const ProjectionResult p = project_anchor(a, cam);
            if (!p.valid) continue;
            if (!p.points[0].in_front) return false;
            if (p.rect.x2 - p.rect.x1 < cfg.min_box_px || p.rect.y2 - p.rect.y1 < cfg.min_box_px) return false;
            ++cameras_seen;
        }
        return cameras_seen > 0;
    };

    for (std::size_t attempt = 0; attempt < cfg.max_attempts; ++attempt) {
        const std::size_t n = cfg.min_objects + rng.index(cfg.max_objects - cfg.min_objects + 1);
        std::vector<SceneObject> objects;
        bool straddle = false;
        for (std::size_t tries = 0; objects.size() < n && tries < 200 * (n + 1); ++tries) {
            SceneObject o;
            o.id = static_cast<int>(objects.size());
            o.class_id = static_cast<int>(rng.index(cfg.classes.size()));
            const ClassSpec& cls = cfg.classes[static_cast<std::size_t>(o.class_id)];
            Anchor3D& a = o.box;
            a.l = cls.l * (1 + rng.uniform(-cfg.size_jitter, cfg.size_jitter));
            a.w = cls.w * (1 + rng.uniform(-cfg.size_jitter, cfg.size_jitter));
            a.h = cls.h * (1 + rng.uniform(-cfg.size_jitter, cfg.size_jitter));
            const double r = std::sqrt(rng.uniform(r0, r1));
            const double theta = rng.uniform(-half, half);
            a.x = r * std::cos(theta);
            a.y = r * std::sin(theta);
            a.z = a.h / 2;
            a.yaw = wrap_angle(rng.uniform(-std::numbers::pi, std::numbers::pi));

            bool clear = true;
            for (const SceneObject& other : objects) {
                const double d = std::hypot(a.x - other.box.x, a.y - other.box.y);
                if (d <= footprint_radius(a) + footprint_radius(other.box)) clear = false;
            }
            std::size_t seen = 0;
            if (!clear || !acceptable(a, seen)) continue;
            straddle = straddle || seen >= 2;
            objects.push_back(o);
        }
        if (objects.size() < n || (cfg.require_straddle && !straddle)) continue;

        Scene s;
        s.scene_id = "scene-" + std::to_string(seed);
        s.ego_delta = {rng.uniform(0.0, 1.5), rng.uniform(-0.2, 0.2), rng.uniform(-0.05, 0.05)};
        s.rig = rig;
        s.objects = std::move(objects);
        s.labels = derive_labels(s.objects, s.rig);
        return s;
    }
    throw ConfigError("generator: no acceptable scene after " + std::to_string(cfg.max_attempts) + " attempts");
}

std::vector<Scene> generate_scenes(std::uint64_t seed, std::size_t count, const GenConfig& cfg) {
    std::vector<Scene> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(generate_scene(splitmix64(seed * 1000003ULL + i), cfg));
    return out;
}

Tensor rasterize(const Scene& scene, std::size_t cam, const RasterConfig& cfg) {
    const CameraParams& c = scene.rig.at(cam);
    const std::size_t width = static_cast<std::size_t>(c.width), height = static_cast<std::size_t>(c.height);
    const std::size_t ch = cfg.channels(), k = cfg.num_classes;

    struct Item {
        double depth;
        int id;
        const SceneObject* obj;
        Rect rect;
        double uc, vc, alpha;
        bool truncated;
    };
    std::vector<Item> items;
    for (const SceneObject& o : scene.objects) {
        if (o.class_id < 0 || static_cast<std::size_t>(o.class_id) >= k) {
            throw UsageError("rasterize: class " + std::to_string(o.class_id) + " outside " + std::to_string(k) +
                             " classes");
        }
        const ProjectionResult p = project_anchor(o.box, c);
        if (!p.valid) continue;
        Item it{0, o.id, &o, p.rect, 0, 0, 0, !p.center_in_image};
        if (p.points[0].in_front) {
            it.depth = p.points[0].depth;
            it.uc = p.points[0].u;
            it.vc = p.points[0].v;
            it.alpha = alpha_angle(o.box, c);
        } else {
            // Center behind the camera: fall back to the nearest visible point.
            it.depth = std::numeric_limits<double>::infinity();
            for (const auto& pt : p.points)
                if (pt.in_front) it.depth = std::min(it.depth, pt.depth);
            it.uc = (p.rect.x1 + p.rect.x2) / 2;
            it.vc = (p.rect.y1 + p.rect.y2) / 2;
        }
        items.push_back(it);
    }
    std::sort(items.begin(), items.end(),
              [](const Item& a, const Item& b) { return a.depth != b.depth ? a.depth < b.depth : a.id < b.id; });

    std::vector<double> out(height * width * ch, 0.0);
    for (std::size_t r = 0; r < height; ++r) {
        const double v = static_cast<double>(r) + 0.5;
        for (std::size_t col = 0; col < width; ++col) {
            const double u = static_cast<double>(col) + 0.5;
            const Item* owner = nullptr;
            bool core = false;
            double halo_dist = 0;
            for (const Item& it : items) {
                if (u >= it.rect.x1 && u < it.rect.x2 && v >= it.rect.y1 && v < it.rect.y2) {
                    owner = &it;
                    core = true;
                    break;
                }
            }
            if (!owner) {
                for (const Item& it : items) {
                    const double dx = std::max({it.rect.x1 - u, 0.0, u - it.rect.x2});
                    const double dy = std::max({it.rect.y1 - v, 0.0, v - it.rect.y2});
                    const double d = std::hypot(dx, dy);
                    if (d < cfg.halo_px) {
                        owner = &it;
                        halo_dist = d;
                        break;
                    }
                }
            }
            if (!owner) continue;
            double* px = &out[(r * width + col) * ch];
            const Anchor3D& box = owner->obj->box;
            if (core) {
                px[0] = 1.0;
                px[1] = std::min(1.0, 4.0 / owner->depth);
                px[2 + static_cast<std::size_t>(owner->obj->class_id)] = 1.0;
            }
            double* leak = px + 2 + k;
            leak[0] = core ? 1.0 : 1.0 - halo_dist / cfg.halo_px;
            leak[1] = (owner->uc - u) / c.width;
            leak[2] = (owner->vc - v) / c.height;
            leak[3] = (u - owner->rect.x1) / c.width;
            leak[4] = (owner->rect.x2 - u) / c.width;
            leak[5] = (v - owner->rect.y1) / c.height;
            leak[6] = (owner->rect.y2 - v) / c.height;
            leak[7] = std::min(1.0, 4.0 / owner->depth);
            leak[8] = owner->truncated ? 1.0 : 0.0;
            leak[9] = box.x / 30.0;
            leak[10] = box.y / 30.0;
            leak[11] = std::sin(owner->alpha);
            leak[12] = std::cos(owner->alpha);
        }
    }
    return Tensor({height, width, ch}, std::move(out));
}

Tensor patchify(const Tensor& raster, std::size_t patch) {
    if (raster.rank() != 3 || patch == 0 || raster.dim(0) % patch != 0 || raster.dim(1) % patch != 0) {
        throw DimensionError("patchify: raster " + shape_str(raster.shape()) + " not divisible by patch " +
                             std::to_string(patch));
    }
    const std::size_t h = raster.dim(0), w = raster.dim(1), ch = raster.dim(2);
    const std::size_t fh = h / patch, fw = w / patch, width = patch * patch * ch;
    const auto src = raster.values();
    std::vector<double> out(fh * fw * width);
    for (std::size_t pr = 0; pr < fh; ++pr)
        for (std::size_t pc = 0; pc < fw; ++pc) {
            double* dst = &out[(pr * fw + pc) * width];
            for (std::size_t dy = 0; dy < patch; ++dy)
                for (std::size_t dx = 0; dx < patch; ++dx) {
                    const double* s = &src[((pr * patch + dy) * w + pc * patch + dx) * ch];
                    std::copy(s, s + ch, dst + (dy * patch + dx) * ch);
                }
        }
    return Tensor({fh * fw, width}, std::move(out));
}

ModelInput make_model_input(const Scene& scene, const ModelConfig& model_cfg) {
    RasterConfig rc;
    rc.num_classes = model_cfg.num_classes;
    if (rc.channels() != model_cfg.input_channels) {
        throw ConfigError("config: input_channels " + std::to_string(model_cfg.input_channels) + " but the raster has " +
                          std::to_string(rc.channels()) + " channels for " + std::to_string(rc.num_classes) +
                          " classes");
    }
    ModelInput in;
    in.rig = scene.rig;
    for (std::size_t v = 0; v < scene.rig.size(); ++v) {
        Tensor raster = rasterize(scene, v, rc);
        if (v == 0) {
            in.feat_h = raster.dim(0) / model_cfg.patch_size;
            in.feat_w = raster.dim(1) / model_cfg.patch_size;
        } else if (raster.dim(0) / model_cfg.patch_size != in.feat_h ||
                   raster.dim(1) / model_cfg.patch_size != in.feat_w) {
            throw DimensionError("model input: cameras have different image sizes");
        }
        in.tokens.push_back(patchify(raster, model_cfg.patch_size));
    }
    return in;
}

std::vector<Sample> make_samples(std::span<const Scene> scenes, const ModelConfig& model_cfg) {
    std::vector<Sample> out;
    out.reserve(scenes.size());
    for (const Scene& s : scenes) out.push_back({make_model_input(s, model_cfg), s});
    return out;
}

std::vector<SceneDetections> run_detection(const Model& model, std::span<const Sample> samples, double min_score) {
    TapeScope no_tape(nullptr);
    std::vector<SceneDetections> out;
    for (const Sample& s : samples) out.push_back(detect(model.forward(s.input), s.scene.scene_id, min_score));
    return out;
}

}  // namespace hqdet
