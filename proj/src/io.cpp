#include "hqdet/io.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace hqdet {

using nlohmann::json;

namespace {

json anchor_json(const Anchor3D& a) { return json::array({a.x, a.y, a.z, a.w, a.l, a.h, a.yaw, a.vx, a.vy}); }

Anchor3D anchor_from(const json& j) {
    if (!j.is_array() || j.size() != 9) throw DataError("anchor must be a 9-element array");
    Anchor3D a;
    double* f[9] = {&a.x, &a.y, &a.z, &a.w, &a.l, &a.h, &a.yaw, &a.vx, &a.vy};
    for (std::size_t i = 0; i < 9; ++i) *f[i] = j[i].get<double>();
    return a;
}

json camera_json(const CameraParams& c) {
    json k = json::array(), e = json::array();
    for (int r = 0; r < 3; ++r)
        for (int col = 0; col < 3; ++col) k.push_back(c.intrinsic(r, col));
    for (int r = 0; r < 4; ++r)
        for (int col = 0; col < 4; ++col) e.push_back(c.extrinsic(r, col));
    return {{"intrinsic", k}, {"extrinsic", e}, {"width", c.width}, {"height", c.height}};
}

CameraParams camera_from(const json& j) {
    CameraParams c;
    const json& k = j.at("intrinsic");
    const json& e = j.at("extrinsic");
    if (k.size() != 9 || e.size() != 16) throw DataError("camera matrices must have 9 and 16 entries");
    for (int r = 0; r < 3; ++r)
        for (int col = 0; col < 3; ++col) c.intrinsic(r, col) = k[r * 3 + col].get<double>();
    for (int r = 0; r < 4; ++r)
        for (int col = 0; col < 4; ++col) c.extrinsic(r, col) = e[r * 4 + col].get<double>();
    c.width = j.at("width").get<double>();
    c.height = j.at("height").get<double>();
    return c;
}

json box_json(const Box2D& b) { return json::array({b.cx, b.cy, b.w, b.h}); }

Box2D box_from(const json& j) {
    if (!j.is_array() || j.size() != 4) throw DataError("2D box must be a 4-element array");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

void check_version(const json& j, int expected) {
    const int v = j.at("version").get<int>();
    if (v != expected) {
        throw DataError("format version " + std::to_string(v) + " is not supported (expected " +
                        std::to_string(expected) + ")");
    }
}

template <typename T, typename Parse>
std::vector<T> load_lines(const std::string& path, Parse parse) {
    std::ifstream in(path);
    if (!in) throw DataError(path + ": cannot open");
    std::vector<T> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        out.push_back(parse(line, path + ":" + std::to_string(n)));
    }
    return out;
}

template <typename T, typename Dump>
void save_lines(const std::string& path, const std::vector<T>& items, Dump dump) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(path + ": cannot write");
    for (const T& item : items) out << dump(item) << '\n';
    if (!out) throw DataError(path + ": write failed");
}

template <typename F>
auto guarded(const std::string& where, F f) {
    try {
        return f();
    } catch (const DataError& e) {
        throw DataError(where + ": " + e.what());
    } catch (const json::exception& e) {
        throw DataError(where + ": " + e.what());
    }
}

}  // namespace

std::string scene_to_json(const Scene& s) {
    json rig = json::array(), objects = json::array(), labels = json::array();
    for (const CameraParams& c : s.rig) rig.push_back(camera_json(c));
    for (const SceneObject& o : s.objects) objects.push_back({{"id", o.id}, {"class_id", o.class_id}, {"box", anchor_json(o.box)}});
    for (const Label2D& l : s.labels) {
        labels.push_back({{"camera", l.camera},
                          {"object_id", l.object_id},
                          {"box", box_json(l.box)},
                          {"class_id", l.box.class_id},
                          {"truncated", l.truncated},
                          {"alpha", l.alpha}});
    }
    json j = {{"version", kSceneFormatVersion},
              {"scene_id", s.scene_id},
              {"ego_delta", json::array({s.ego_delta.dx, s.ego_delta.dy, s.ego_delta.dyaw})},
              {"rig", rig},
              {"objects", objects},
              {"labels", labels}};
    return j.dump();
}

Scene scene_from_json(const std::string& line, const std::string& where) {
    return guarded(where, [&] {
        const json j = json::parse(line);
        check_version(j, kSceneFormatVersion);
        Scene s;
        s.scene_id = j.at("scene_id").get<std::string>();
        const json& ego = j.at("ego_delta");
        if (ego.size() != 3) throw DataError("ego_delta must have 3 entries");
        s.ego_delta = {ego[0].get<double>(), ego[1].get<double>(), ego[2].get<double>()};
        for (const json& c : j.at("rig")) s.rig.push_back(camera_from(c));
        for (const json& o : j.at("objects")) {
            s.objects.push_back({o.at("id").get<int>(), o.at("class_id").get<int>(), anchor_from(o.at("box"))});
        }
        for (const json& l : j.at("labels")) {
            Label2D lab;
            lab.camera = l.at("camera").get<std::size_t>();
            if (lab.camera >= s.rig.size()) throw DataError("label camera " + std::to_string(lab.camera) + " out of range");
            lab.object_id = l.at("object_id").get<int>();
            lab.box = box_from(l.at("box"));
            lab.box.class_id = l.at("class_id").get<int>();
            lab.truncated = l.at("truncated").get<bool>();
            lab.alpha = l.at("alpha").get<double>();
            s.labels.push_back(lab);
        }
        return s;
    });
}

void save_scenes(const std::string& path, const std::vector<Scene>& scenes) {
    save_lines(path, scenes, scene_to_json);
}

std::vector<Scene> load_scenes(const std::string& path) {
    return load_lines<Scene>(path, [](const std::string& l, const std::string& w) { return scene_from_json(l, w); });
}

std::string detections_to_json(const SceneDetections& d) {
    json d3 = json::array(), d2 = json::array();
    for (const Detection3D& p : d.det3d) {
        d3.push_back({{"id", p.id}, {"box", anchor_json(p.box)}, {"class_id", p.class_id}, {"score", p.score}});
    }
    for (const Detection2D& p : d.det2d) {
        d2.push_back({{"id", p.id},
                      {"camera", p.camera},
                      {"cx", p.box.cx},
                      {"cy", p.box.cy},
                      {"w", p.box.w},
                      {"h", p.box.h},
                      {"class_id", p.box.class_id},
                      {"score", p.box.score},
                      {"linked_3d_id", p.linked_3d_id}});
    }
    json j = {{"version", kDetectionFormatVersion}, {"scene_id", d.scene_id}, {"det3d", d3}, {"det2d", d2}};
    return j.dump();
}

SceneDetections detections_from_json(const std::string& line, const std::string& where) {
    return guarded(where, [&] {
        const json j = json::parse(line);
        check_version(j, kDetectionFormatVersion);
        SceneDetections d;
        d.scene_id = j.at("scene_id").get<std::string>();
        for (const json& p : j.at("det3d")) {
            d.det3d.push_back({p.at("id").get<int>(), anchor_from(p.at("box")), p.at("class_id").get<int>(),
                               p.at("score").get<double>()});
        }
        for (const json& p : j.at("det2d")) {
            Detection2D q;
            q.id = p.at("id").get<int>();
            q.camera = p.at("camera").get<std::size_t>();
            q.box = {p.at("cx").get<double>(), p.at("cy").get<double>(), p.at("w").get<double>(),
                     p.at("h").get<double>(), p.at("class_id").get<int>(), p.at("score").get<double>()};
            q.linked_3d_id = p.at("linked_3d_id").get<int>();
            d.det2d.push_back(q);
        }
        return d;
    });
}

void save_detections(const std::string& path, const std::vector<SceneDetections>& dets) {
    save_lines(path, dets, detections_to_json);
}

std::vector<SceneDetections> load_detections(const std::string& path) {
    return load_lines<SceneDetections>(path,
                                       [](const std::string& l, const std::string& w) { return detections_from_json(l, w); });
}

// --------------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[8] = {'H', 'Q', 'D', 'E', 'T', 'C', 'K', 'P'};

class Writer {
public:
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void bytes(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
    void str(const std::string& s) {
        u64(s.size());
        bytes(s.data(), s.size());
    }
    const std::vector<char>& buffer() const { return buf_; }

private:
    std::vector<char> buf_;
};

class Reader {
public:
    Reader(std::vector<char> data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        const std::uint64_t n = u64();
        need(n);
        std::string s(data_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    void bytes(char* out, std::size_t n) {
        need(n);
        std::memcpy(out, data_.data() + pos_, n);
        pos_ += n;
    }
    std::size_t pos() const { return pos_; }
    std::size_t size() const { return data_.size(); }
    void seek(std::size_t p) {
        if (p > data_.size()) fail("offset past end of file");
        pos_ = p;
    }
    [[noreturn]] void fail(const std::string& msg) const { throw DataError(path_ + ": checkpoint " + msg); }

private:
    void need(std::uint64_t n) const {
        if (n > data_.size() - pos_) fail("truncated");
    }
    std::vector<char> data_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace

Checkpoint make_checkpoint(const Model& model, const AdamState& adam, const std::vector<double>& loss_history) {
    Checkpoint c;
    c.config_text = config_to_text(model.config());
    for (const auto& [name, t] : model.params().entries()) c.params.emplace_back(name, t.detach());
    c.adam = adam;
    c.loss_history = loss_history;
    return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    const std::size_t n = ckpt.params.size();
    if (ckpt.adam.m.size() != n || ckpt.adam.v.size() != n) throw UsageError("checkpoint: optimizer state size mismatch");

    // Header size is known once names and shapes are fixed, so offsets can be
    // absolute file positions.
    Writer head;
    head.bytes(kMagic, 8);
    head.u32(kCheckpointVersion);
    head.str(ckpt.config_text);
    head.u64(n);
    std::size_t header = head.buffer().size();
    for (const auto& [name, t] : ckpt.params) header += 8 + name.size() + 8 + 8 * t.rank() + 16;
    header += 16;

    std::uint64_t offset = header;
    for (std::size_t k = 0; k < n; ++k) {
        const auto& [name, t] = ckpt.params[k];
        if (ckpt.adam.m[k].size() != t.numel() || ckpt.adam.v[k].size() != t.numel()) {
            throw UsageError("checkpoint: optimizer state size mismatch for " + name);
        }
        head.str(name);
        head.u64(t.rank());
        for (std::size_t d : t.shape()) head.u64(d);
        head.u64(offset);
        head.u64(t.numel());
        offset += 8 * t.numel();
    }
    head.u64(ckpt.adam.step);
    head.u64(ckpt.loss_history.size());
    for (const auto& [name, t] : ckpt.params)
        for (double x : t.values()) head.f64(x);
    for (const auto& m : ckpt.adam.m)
        for (double x : m) head.f64(x);
    for (const auto& v : ckpt.adam.v)
        for (double x : v) head.f64(x);
    for (double x : ckpt.loss_history) head.f64(x);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(path + ": cannot write");
    out.write(head.buffer().data(), static_cast<std::streamsize>(head.buffer().size()));
    if (!out) throw DataError(path + ": write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(path + ": cannot open");
    std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Reader r(std::move(data), path);

    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0) r.fail("has a bad magic number");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        r.fail("version " + std::to_string(version) + " is not supported (expected " +
               std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint c;
    c.config_text = r.str();
    const std::uint64_t n = r.u64();
    struct Entry {
        std::string name;
        Shape shape;
        std::uint64_t offset, count;
    };
    std::vector<Entry> entries;
    for (std::uint64_t k = 0; k < n; ++k) {
        Entry e;
        e.name = r.str();
        const std::uint64_t rank = r.u64();
        if (rank > 8) r.fail("parameter " + e.name + " has rank " + std::to_string(rank));
        for (std::uint64_t d = 0; d < rank; ++d) e.shape.push_back(r.u64());
        e.offset = r.u64();
        e.count = r.u64();
        if (shape_numel(e.shape) != e.count) r.fail("parameter " + e.name + " count does not match its shape");
        entries.push_back(std::move(e));
    }
    c.adam.step = r.u64();
    const std::uint64_t history = r.u64();

    // Parameters must tile the payload start without gaps or overlap.
    std::uint64_t expect = r.pos();
    for (const Entry& e : entries) {
        if (e.offset != expect) r.fail("manifest offset of " + e.name + " is inconsistent");
        expect += 8 * e.count;
    }
    for (const Entry& e : entries) {
        r.seek(e.offset);
        std::vector<double> vals(e.count);
        for (double& x : vals) x = r.f64();
        c.params.emplace_back(e.name, Tensor(e.shape, std::move(vals)));
    }
    for (auto* moments : {&c.adam.m, &c.adam.v}) {
        for (const Entry& e : entries) {
            std::vector<double> vals(e.count);
            for (double& x : vals) x = r.f64();
            moments->push_back(std::move(vals));
        }
    }
    c.loss_history.resize(history);
    for (double& x : c.loss_history) x = r.f64();
    if (r.pos() != r.size()) r.fail("has trailing bytes");
    return c;
}

void restore_parameters(Model& model, const Checkpoint& ckpt) {
    const auto& entries = model.params().entries();
    if (entries.size() != ckpt.params.size()) {
        throw DataError("checkpoint has " + std::to_string(ckpt.params.size()) + " parameters, model has " +
                        std::to_string(entries.size()));
    }
    for (std::size_t k = 0; k < entries.size(); ++k) {
        const auto& [name, t] = entries[k];
        const auto& [cname, ct] = ckpt.params[k];
        if (name != cname || t.shape() != ct.shape()) {
            throw DataError("checkpoint parameter " + cname + " " + shape_str(ct.shape()) + " does not match " + name +
                            " " + shape_str(t.shape()));
        }
    }
    for (std::size_t k = 0; k < entries.size(); ++k) {
        Tensor t = entries[k].second;
        const auto src = ckpt.params[k].second.values();
        std::copy(src.begin(), src.end(), t.values_mut().begin());
    }
}

}  // namespace hqdet
