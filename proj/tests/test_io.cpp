#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "hqdet/harness.hpp"
#include "hqdet/io.hpp"
#include "test_support.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

using namespace hqdet;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
    const fs::path p = fs::temp_directory_path() / "hqdet_test_io";
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    out << s;
}

std::string error_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const DataError& e) {
        return e.what();
    }
    return {};
}

SceneDetections awkward_detections() {
    SceneDetections d;
    d.scene_id = "scene-\"quoted\"";
    Anchor3D a{1.0 / 3.0, -2e-300, 0.8, 1.9, 4.5, 1.6, -3.14159, 0.25, -0.125};
    d.det3d = {{7, a, 1, 0.1 + 0.2}};
    d.det2d = {{0, 2, {12.5, 3.0 / 7.0, 9.0, 4.0, 1, 0.625}, 7}, {1, 0, {1, 2, 3, 4, 0, 1e-17}, -1}};
    return d;
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.num_queries = 6;
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.deform_points = 1;
    return cfg;
}

}  // namespace

// ------------------------------------------------------------------- scenes

TEST_CASE("scenes: JSONL round trip is exact") {
    const auto scenes = generate_scenes(12, 4);
    const fs::path p = scratch_dir() / "scenes.jsonl";
    save_scenes(p.string(), scenes);
    CHECK(load_scenes(p.string()) == scenes);
    // One scene per line.
    const std::string text = slurp(p);
    CHECK(std::count(text.begin(), text.end(), '\n') == 4);
    // Blank lines are tolerated.
    spit(p, "\n" + text + "\n\n");
    CHECK(load_scenes(p.string()) == scenes);
}

TEST_CASE("scenes: hand-written fixture parses field by field") {
    const std::string line =
        R"({"version":1,"scene_id":"fixture","ego_delta":[0.5,0.1,-0.02],)"
        R"("rig":[{"intrinsic":[100,0,64,0,100,32,0,0,1],"extrinsic":[1,0,0,0,0,1,0,0,0,0,1,1.5,0,0,0,1],)"
        R"("width":128,"height":64}],)"
        R"("objects":[{"id":4,"class_id":1,"box":[10,-1,1.6,2.6,8,3.2,0.5,0,0]}],)"
        R"("labels":[{"camera":0,"object_id":4,"box":[60,30,20,12],"class_id":1,"truncated":true,"alpha":0.25}]})";
    const Scene s = scene_from_json(line);
    CHECK(s.scene_id == "fixture");
    CHECK(s.ego_delta.dx == 0.5);
    CHECK(s.ego_delta.dyaw == -0.02);
    REQUIRE(s.rig.size() == 1);
    CHECK(s.rig[0].width == 128.0);
    REQUIRE(s.objects.size() == 1);
    CHECK(s.objects[0].id == 4);
    CHECK(s.objects[0].class_id == 1);
    CHECK(s.objects[0].box.l == 8.0);
    CHECK(s.objects[0].box.yaw == 0.5);
    REQUIRE(s.labels.size() == 1);
    CHECK(s.labels[0].box.cx == 60.0);
    CHECK(s.labels[0].box.h == 12.0);
    CHECK(s.labels[0].box.class_id == 1);
    CHECK(s.labels[0].truncated);
    CHECK(s.labels[0].alpha == 0.25);
    CHECK(scene_from_json(scene_to_json(s)) == s);
}

TEST_CASE("scenes: malformed input names the file and line") {
    const auto scenes = generate_scenes(3, 3);
    const fs::path p = scratch_dir() / "broken.jsonl";
    save_scenes(p.string(), scenes);
    std::string text = slurp(p);
    // Cut the file in the middle of the second record.
    const auto second = text.find('\n') + 1;
    spit(p, text.substr(0, second + 40));
    const std::string msg = error_of([&] { load_scenes(p.string()); });
    CHECK(msg.find(p.string() + ":2") != std::string::npos);

    spit(p, scene_to_json(scenes[0]) + "\n" + R"({"version":2,"scene_id":"x"})" + "\n");
    const std::string ver = error_of([&] { load_scenes(p.string()); });
    CHECK(ver.find(":2") != std::string::npos);
    CHECK(ver.find("version 2") != std::string::npos);

    std::string missing = scene_to_json(scenes[0]);
    missing.replace(missing.find("\"labels\""), 8, "\"lab\"");
    CHECK_THROWS_AS(scene_from_json(missing), DataError);

    std::string bad_cam = scene_to_json(scenes[0]);
    const auto pos = bad_cam.find("\"camera\":");
    bad_cam.replace(pos, 10, "\"camera\":9");
    CHECK_THROWS_AS(scene_from_json(bad_cam), DataError);

    CHECK_THROWS_AS(load_scenes((scratch_dir() / "absent.jsonl").string()), DataError);
}

// --------------------------------------------------------------- detections

TEST_CASE("detections: JSONL round trip is exact") {
    const std::vector<SceneDetections> dets{awkward_detections(), SceneDetections{"empty", {}, {}}};
    const fs::path p = scratch_dir() / "dets.jsonl";
    save_detections(p.string(), dets);
    const auto back = load_detections(p.string());
    REQUIRE(back.size() == 2);
    CHECK(back[0].scene_id == dets[0].scene_id);
    REQUIRE(back[0].det3d.size() == 1);
    CHECK(back[0].det3d[0].box.x == dets[0].det3d[0].box.x);
    CHECK(back[0].det3d[0].box.y == dets[0].det3d[0].box.y);
    CHECK(back[0].det3d[0].score == dets[0].det3d[0].score);
    REQUIRE(back[0].det2d.size() == 2);
    CHECK(back[0].det2d[0].box == dets[0].det2d[0].box);
    CHECK(back[0].det2d[1].box == dets[0].det2d[1].box);
    CHECK(back[0].det2d[0].linked_3d_id == 7);
    CHECK(back[0].det2d[1].linked_3d_id == -1);
    CHECK(back[0].det2d[0].camera == 2);
    CHECK(back[1].det3d.empty());
    CHECK(detections_to_json(back[0]) == detections_to_json(dets[0]));
}

TEST_CASE("detections: errors") {
    std::string j = detections_to_json(awkward_detections());
    j.replace(j.find("\"version\":1"), 11, "\"version\":7");
    CHECK_THROWS_AS(detections_from_json(j), DataError);
    CHECK_THROWS_AS(detections_from_json("{"), DataError);
    CHECK_THROWS_AS(detections_from_json(R"({"version":1,"scene_id":"a","det3d":[{"id":0}],"det2d":[]})"), DataError);
}

// -------------------------------------------------------------- checkpoints

TEST_CASE("checkpoint: round trip is bit-exact") {
    const ModelConfig cfg = tiny_config();
    Model model(cfg);
    AdamState adam = AdamState::zeros(model.params());
    adam.step = 17;
    std::mt19937_64 rng(5);
    for (auto& m : adam.m)
        for (double& x : m) x = hqdet::testing::random_values(1, rng)[0];
    for (auto& v : adam.v)
        for (double& x : v) x = std::ldexp(hqdet::testing::random_values(1, rng)[0], -1070);  // subnormals
    const std::vector<double> history{1.5, -0.0, std::numeric_limits<double>::denorm_min(), 3.0 / 7.0};
    const Checkpoint c = make_checkpoint(model, adam, history);
    const fs::path p = scratch_dir() / "model.ckpt";
    save_checkpoint(p.string(), c);
    const Checkpoint back = load_checkpoint(p.string());
    CHECK(back.config_text == c.config_text);
    CHECK(back.adam == adam);
    REQUIRE(back.loss_history.size() == history.size());
    for (std::size_t i = 0; i < history.size(); ++i)
        CHECK(std::memcmp(&back.loss_history[i], &history[i], sizeof(double)) == 0);
    REQUIRE(back.params.size() == c.params.size());
    for (std::size_t k = 0; k < c.params.size(); ++k) {
        CHECK(back.params[k].first == c.params[k].first);
        CHECK(hqdet::testing::bit_identical(back.params[k].second, c.params[k].second));
    }
    // Saving the loaded checkpoint reproduces the file byte for byte.
    const fs::path q = scratch_dir() / "model2.ckpt";
    save_checkpoint(q.string(), back);
    CHECK(slurp(p) == slurp(q));
    CHECK(slurp(p).substr(0, 8) == "HQDETCKP");

    // Restoring over scrambled values, with the stored config, reproduces the outputs.
    Model other(config_from_text(back.config_text));
    for (const auto& [name, t] : other.params().entries()) {
        Tensor w = t;
        for (double& x : w.values_mut()) x = -x + 0.5;
    }
    restore_parameters(other, back);
    const Scene s = generate_scene(1);
    const ModelInput in = make_model_input(s, cfg);
    CHECK(hqdet::testing::bit_identical(model.forward(in).queries, other.forward(in).queries));
}

TEST_CASE("checkpoint: corruption is detected") {
    const ModelConfig cfg = tiny_config();
    Model model(cfg);
    const Checkpoint c = make_checkpoint(model, AdamState::zeros(model.params()), {0.5});
    const fs::path p = scratch_dir() / "corrupt.ckpt";
    save_checkpoint(p.string(), c);
    const std::string good = slurp(p);

    spit(p, good.substr(0, good.size() - 8));
    CHECK(error_of([&] { load_checkpoint(p.string()); }).find("truncated") != std::string::npos);

    spit(p, good + "x");
    CHECK(error_of([&] { load_checkpoint(p.string()); }).find("trailing") != std::string::npos);

    std::string bad = good;
    bad[0] = 'X';
    spit(p, bad);
    CHECK(error_of([&] { load_checkpoint(p.string()); }).find("magic") != std::string::npos);

    bad = good;
    bad[8] = 2;
    spit(p, bad);
    CHECK(error_of([&] { load_checkpoint(p.string()); }).find("version 2") != std::string::npos);

    // First manifest offset: skip magic, version, config, count, name, rank, dims.
    std::size_t pos = 8 + 4;
    auto read_u64 = [&](std::size_t at) {
        std::uint64_t v = 0;
        std::memcpy(&v, good.data() + at, 8);
        return v;
    };
    pos += 8 + read_u64(pos);
    pos += 8;
    pos += 8 + read_u64(pos);
    const std::uint64_t rank = read_u64(pos);
    pos += 8 + 8 * rank;
    bad = good;
    const std::uint64_t shifted = read_u64(pos) + 8;
    std::memcpy(bad.data() + pos, &shifted, 8);
    spit(p, bad);
    CHECK(error_of([&] { load_checkpoint(p.string()); }).find("offset") != std::string::npos);

    CHECK_THROWS_AS(load_checkpoint((scratch_dir() / "nothing.ckpt").string()), DataError);
}

TEST_CASE("checkpoint: restoring into a different architecture fails") {
    Model small(tiny_config());
    const Checkpoint c = make_checkpoint(small, AdamState::zeros(small.params()), {});
    ModelConfig wider = tiny_config();
    wider.embed_dim = 16;
    Model other(wider);
    CHECK_THROWS_AS(restore_parameters(other, c), DataError);
    ModelConfig deeper = tiny_config();
    deeper.hybrid_blocks = 2;
    deeper.total_layers = 4;
    Model more(deeper);
    CHECK_THROWS_AS(restore_parameters(more, c), DataError);
}
