#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "hqdet/harness.hpp"
#include "test_support.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

using namespace hqdet;

namespace {

// Painter's-algorithm raster: halos far to near, then rectangles far to near,
// each overwriting the pixel. Written independently of the scanline version.
std::vector<double> painter_raster(const Scene& s, std::size_t cam, const RasterConfig& rc) {
    const CameraParams& c = s.rig.at(cam);
    const std::size_t W = static_cast<std::size_t>(c.width), H = static_cast<std::size_t>(c.height);
    const std::size_t ch = rc.channels(), k = rc.num_classes;
    struct Obj {
        double depth;
        int id;
        const SceneObject* o;
        ProjectionResult p;
    };
    std::vector<Obj> objs;
    for (const SceneObject& o : s.objects) {
        ProjectionResult p = project_anchor(o.box, c);
        if (!p.valid) continue;
        double depth = p.points[0].depth;
        if (!p.points[0].in_front) {
            depth = 1e300;
            for (const auto& pt : p.points)
                if (pt.in_front) depth = std::min(depth, pt.depth);
        }
        objs.push_back({depth, o.id, &o, p});
    }
    std::sort(objs.begin(), objs.end(), [](const Obj& a, const Obj& b) {
        return a.depth > b.depth || (a.depth == b.depth && a.id > b.id);
    });
    std::vector<double> out(H * W * ch, 0.0);
    auto paint = [&](const Obj& ob, std::size_t r, std::size_t col, bool core, double dist) {
        double* px = &out[(r * W + col) * ch];
        std::fill(px, px + ch, 0.0);
        const Rect& R = ob.p.rect;
        const double u = col + 0.5, v = r + 0.5;
        const double inv = std::min(1.0, 4.0 / ob.depth);
        const bool centre_visible = ob.p.points[0].in_front;
        const double uc = centre_visible ? ob.p.points[0].u : (R.x1 + R.x2) / 2;
        const double vc = centre_visible ? ob.p.points[0].v : (R.y1 + R.y2) / 2;
        const double alpha = centre_visible ? alpha_angle(ob.o->box, c) : 0.0;
        if (core) {
            px[0] = 1;
            px[1] = inv;
            px[2 + ob.o->class_id] = 1;
        }
        const double leak[13] = {core ? 1.0 : 1.0 - dist / rc.halo_px,
                                 (uc - u) / c.width,
                                 (vc - v) / c.height,
                                 (u - R.x1) / c.width,
                                 (R.x2 - u) / c.width,
                                 (v - R.y1) / c.height,
                                 (R.y2 - v) / c.height,
                                 inv,
                                 ob.p.center_in_image ? 0.0 : 1.0,
                                 ob.o->box.x / 30,
                                 ob.o->box.y / 30,
                                 std::sin(alpha),
                                 std::cos(alpha)};
        std::copy(leak, leak + 13, px + 2 + k);
    };
    for (int pass = 0; pass < 2; ++pass) {
        for (const Obj& ob : objs) {
            const Rect& R = ob.p.rect;
            for (std::size_t r = 0; r < H; ++r)
                for (std::size_t col = 0; col < W; ++col) {
                    const double u = col + 0.5, v = r + 0.5;
                    const bool inside = u >= R.x1 && u < R.x2 && v >= R.y1 && v < R.y2;
                    const double dx = std::max({R.x1 - u, 0.0, u - R.x2}), dy = std::max({R.y1 - v, 0.0, v - R.y2});
                    const double d = std::hypot(dx, dy);
                    if (pass == 0 && !inside && d < rc.halo_px) paint(ob, r, col, false, d);
                    if (pass == 1 && inside) paint(ob, r, col, true, 0);
                }
        }
    }
    return out;
}

SceneObject object(int id, int cls, double x, double y, double yaw = 0.0) {
    SceneObject o;
    o.id = id;
    o.class_id = cls;
    const ClassSpec& c = default_classes()[cls];
    o.box = {x, y, c.h / 2, c.w, c.l, c.h, yaw, 0, 0};
    return o;
}

Scene single_camera(std::vector<SceneObject> objects) {
    Scene s;
    s.scene_id = "hand";
    RigConfig rc;
    rc.cameras = 1;
    s.rig = make_rig(rc);
    s.objects = std::move(objects);
    s.labels = derive_labels(s.objects, s.rig);
    return s;
}

// Separating-axis test for two yawed footprints.
bool footprints_overlap(const Anchor3D& a, const Anchor3D& b) {
    auto corners = [](const Anchor3D& q) {
        std::array<std::array<double, 2>, 4> out;
        const double c = std::cos(q.yaw), s = std::sin(q.yaw);
        const double sx[4] = {1, 1, -1, -1}, sy[4] = {1, -1, -1, 1};
        for (int i = 0; i < 4; ++i) {
            const double lx = sx[i] * q.l / 2, ly = sy[i] * q.w / 2;
            out[i] = {q.x + c * lx - s * ly, q.y + s * lx + c * ly};
        }
        return out;
    };
    const auto ca = corners(a), cb = corners(b);
    for (const Anchor3D* q : {&a, &b}) {
        for (double ang : {q->yaw, q->yaw + std::numbers::pi / 2}) {
            const double ax = std::cos(ang), ay = std::sin(ang);
            double amin = 1e300, amax = -1e300, bmin = 1e300, bmax = -1e300;
            for (const auto& p : ca) {
                amin = std::min(amin, p[0] * ax + p[1] * ay);
                amax = std::max(amax, p[0] * ax + p[1] * ay);
            }
            for (const auto& p : cb) {
                bmin = std::min(bmin, p[0] * ax + p[1] * ay);
                bmax = std::max(bmax, p[0] * ax + p[1] * ay);
            }
            if (amax < bmin || bmax < amin) return false;
        }
    }
    return true;
}

}  // namespace

// ---------------------------------------------------------------- generator

TEST_CASE("generator: deterministic in the seed") {
    CHECK(generate_scene(42) == generate_scene(42));
    CHECK_FALSE(generate_scene(42) == generate_scene(43));
    CHECK(generate_scene(42).scene_id == "scene-42");
    const auto a = generate_scenes(9, 5), b = generate_scenes(9, 5);
    CHECK(a == b);
    std::set<std::string> ids;
    for (const Scene& s : a) ids.insert(s.scene_id);
    CHECK(ids.size() == 5);
}

TEST_CASE("generator: object count honours the configured bounds") {
    GenConfig cfg;
    cfg.min_objects = cfg.max_objects = 3;
    for (std::uint64_t seed = 0; seed < 10; ++seed) CHECK(generate_scene(seed, cfg).objects.size() == 3);
    std::set<std::size_t> counts;
    for (std::uint64_t seed = 0; seed < 60; ++seed) {
        const std::size_t n = generate_scene(seed).objects.size();
        CHECK(n >= 3);
        CHECK(n <= 6);
        counts.insert(n);
    }
    CHECK(counts.size() > 1);
}

TEST_CASE("generator: property - placement, visibility and labels") {
    const GenConfig cfg;
    for (const Scene& s : generate_scenes(2024, 40)) {
        CAPTURE(s.scene_id);
        REQUIRE(s.rig.size() == 3);
        CHECK(s.labels == derive_labels(s.objects, s.rig));
        bool straddle = false;
        for (std::size_t i = 0; i < s.objects.size(); ++i) {
            const SceneObject& o = s.objects[i];
            CHECK(o.id == static_cast<int>(i));
            const double r = std::hypot(o.box.x, o.box.y);
            CHECK(r >= cfg.range_min);
            CHECK(r <= cfg.range_max);
            CHECK(std::abs(std::atan2(o.box.y, o.box.x)) <= cfg.half_angle_deg * std::numbers::pi / 180);
            CHECK(o.box.z == o.box.h / 2);
            CHECK(o.box.vx == 0.0);
            CHECK(o.box.vy == 0.0);
            const ClassSpec& c = default_classes()[o.class_id];
            CHECK(std::abs(o.box.l / c.l - 1) <= cfg.size_jitter + 1e-12);
            CHECK(std::abs(o.box.w / c.w - 1) <= cfg.size_jitter + 1e-12);
            for (std::size_t j = 0; j < i; ++j) CHECK_FALSE(footprints_overlap(o.box, s.objects[j].box));
            std::size_t seen = 0;
            for (const Label2D& l : s.labels) seen += l.object_id == o.id;
            CHECK(seen >= 1);
            straddle = straddle || seen >= 2;
        }
        CHECK(straddle);
        for (std::size_t k = 0; k < s.labels.size(); ++k) {
            const Label2D& l = s.labels[k];
            const CameraParams& cam = s.rig.at(l.camera);
            CHECK(l.box.w >= cfg.min_box_px);
            CHECK(l.box.h >= cfg.min_box_px);
            CHECK(l.box.cx - l.box.w / 2 >= 0.0);
            CHECK(l.box.cx + l.box.w / 2 <= cam.width + 1e-9);
            CHECK(l.box.cy + l.box.h / 2 <= cam.height + 1e-9);
            // Object centers are never behind a camera that labels them.
            CHECK(project_anchor(s.objects[l.object_id].box, cam).points[0].in_front);
            if (k > 0) CHECK(std::pair(s.labels[k - 1].camera, s.labels[k - 1].object_id) < std::pair(l.camera, l.object_id));
        }
    }
}

TEST_CASE("generator: configuration errors") {
    GenConfig cfg;
    cfg.range_max = cfg.range_min;
    CHECK_THROWS_AS(generate_scene(0, cfg), ConfigError);
    cfg = {};
    cfg.rig.cameras = 1;
    CHECK_THROWS_AS(generate_scene(0, cfg), ConfigError);
    cfg.require_straddle = false;
    CHECK_NOTHROW(generate_scene(0, cfg));
    cfg = {};
    cfg.min_objects = 4;
    cfg.max_objects = 3;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("labels: truncation and observation angle") {
    // Straight ahead and untruncated: the observation angle equals the yaw.
    const Scene s = single_camera({object(0, 0, 15, 0, 0.4)});
    REQUIRE(s.labels.size() == 1);
    CHECK_FALSE(s.labels[0].truncated);
    CHECK(s.labels[0].alpha == doctest::Approx(alpha_angle(s.objects[0].box, s.rig[0])).epsilon(1e-15));
    // Centre just outside the field of view, body still partly inside.
    const Scene edge = single_camera({object(0, 0, 8, 5.0, 0.0)});
    REQUIRE(edge.labels.size() == 1);
    CHECK(edge.labels[0].truncated);
}

// ------------------------------------------------------------------- raster

TEST_CASE("raster: empty scene is all zeros") {
    const Scene s = single_camera({});
    const Tensor r = rasterize(s, 0);
    CHECK(r.shape() == Shape{64, 128, 17});
    CHECK(std::all_of(r.values().begin(), r.values().end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("raster: single object against the painter oracle and by hand") {
    const Scene s = single_camera({object(0, 1, 14, 1, 0.3)});
    const RasterConfig rc;
    const Tensor r = rasterize(s, 0, rc);
    CHECK(hqdet::testing::max_abs_diff(r.values(), painter_raster(s, 0, rc)) == 0.0);

    const Box2D b = s.labels[0].box;
    auto at = [&](double u, double v, std::size_t c) {
        return r.at(static_cast<std::size_t>(v), static_cast<std::size_t>(u), c);
    };
    // Centre pixel: presence, truck one-hot, full proximity.
    CHECK(at(b.cx, b.cy, 0) == 1.0);
    CHECK(at(b.cx, b.cy, 2) == 0.0);
    CHECK(at(b.cx, b.cy, 3) == 1.0);
    CHECK(at(b.cx, b.cy, 4) == 1.0);
    // Left of the box by ~12 px: halo only, proximity about one half.
    const double u = std::floor(b.cx - b.w / 2 - 12) + 0.5, v = std::floor(b.cy) + 0.5;
    const double d = (b.cx - b.w / 2) - u;
    CHECK(at(u, v, 0) == 0.0);
    CHECK(at(u, v, 4) == doctest::Approx(1 - d / rc.halo_px).epsilon(1e-12));
    // Far corner of the image is untouched.
    for (std::size_t c = 0; c < rc.channels(); ++c) CHECK(r.at(63, 127, c) == 0.0);
    // Heading appears only through the observation angle.
    const Tensor turned = rasterize(single_camera({object(0, 1, 14, 1, 0.3 + 1e-3)}), 0, rc);
    CHECK(at(b.cx, b.cy, 15) != turned.at(static_cast<std::size_t>(b.cy), static_cast<std::size_t>(b.cx), 15));
}

TEST_CASE("raster: nearest object owns overlaps, halos yield to rectangles") {
    const Scene s = single_camera({object(0, 0, 20, 0.5), object(1, 1, 12, -0.5), object(2, 0, 16, 4)});
    const RasterConfig rc;
    const Tensor r = rasterize(s, 0, rc);
    CHECK(hqdet::testing::max_abs_diff(r.values(), painter_raster(s, 0, rc)) == 0.0);
    // The nearer truck covers the far car's centre.
    const Box2D far = s.labels[0].box;
    CHECK(r.at(static_cast<std::size_t>(far.cy), static_cast<std::size_t>(far.cx), 3) == 1.0);
}

TEST_CASE("raster: property - matches the oracle and ignores object order") {
    const RasterConfig rc;
    for (const Scene& s : generate_scenes(31, 12)) {
        Scene shuffled = s;
        std::reverse(shuffled.objects.begin(), shuffled.objects.end());
        for (std::size_t cam = 0; cam < s.rig.size(); ++cam) {
            const Tensor a = rasterize(s, cam, rc);
            CHECK(hqdet::testing::max_abs_diff(a.values(), painter_raster(s, cam, rc)) == 0.0);
            CHECK(hqdet::testing::bit_identical(a, rasterize(shuffled, cam, rc)));
            CHECK(std::all_of(a.values().begin(), a.values().end(), [](double v) { return std::isfinite(v); }));
        }
    }
}

TEST_CASE("raster: classes outside the configured count are rejected") {
    RasterConfig rc;
    rc.num_classes = 1;
    CHECK_THROWS_AS(rasterize(single_camera({object(0, 1, 14, 0)}), 0, rc), UsageError);
}

// ------------------------------------------------------------------ patches

TEST_CASE("patchify: row-major patches, pixel-major channels") {
    std::vector<double> v(4 * 4 * 2);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
    const Tensor p = patchify(Tensor({4, 4, 2}, v), 2);
    CHECK(p.shape() == Shape{4, 8});
    // Patch 1 is rows 0-1, columns 2-3.
    const std::vector<double> expect{4, 5, 6, 7, 12, 13, 14, 15};
    for (std::size_t j = 0; j < 8; ++j) CHECK(p.at(1, j) == expect[j]);
    CHECK(p.at(2, 0) == 16.0);
    CHECK_THROWS_AS(patchify(Tensor::zeros({6, 4, 1}), 4), DimensionError);
}

TEST_CASE("model input: token shapes and channel agreement") {
    const Scene s = generate_scene(1);
    ModelConfig cfg;
    const ModelInput in = make_model_input(s, cfg);
    REQUIRE(in.tokens.size() == 3);
    CHECK(in.feat_h == 16);
    CHECK(in.feat_w == 32);
    CHECK(in.tokens[0].shape() == Shape{512, 17 * 16});
    cfg.input_channels = 12;
    CHECK_THROWS_AS(make_model_input(s, cfg), ConfigError);
}

TEST_CASE("run_detection: score filter and scene ids") {
    ModelConfig cfg;
    cfg.num_queries = 12;
    cfg.embed_dim = 16;
    const auto scenes = generate_scenes(4, 2);
    const auto samples = make_samples(scenes, cfg);
    const Model model(cfg);
    const auto all = run_detection(model, samples, 0.0);
    const auto some = run_detection(model, samples, 0.0105);
    REQUIRE(all.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(all[i].scene_id == scenes[i].scene_id);
        CHECK(all[i].det3d.size() == cfg.num_queries);
        CHECK(some[i].det3d.size() <= all[i].det3d.size());
        for (const Detection3D& d : some[i].det3d) CHECK(d.score >= 0.0105);
        for (const Detection2D& d : some[i].det2d) CHECK(d.box.score >= 0.0105);
    }
}
