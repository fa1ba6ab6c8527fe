#pragma once

// Persistence: scene and detection JSONL, model checkpoints.

#include "hqdet/model.hpp"
#include "hqdet/scene.hpp"
#include "hqdet/train.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace hqdet {

/// Malformed or incompatible input data; the message names the file and line.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr int kSceneFormatVersion = 1;
inline constexpr int kDetectionFormatVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string scene_to_json(const Scene& scene);
/// `where` prefixes error messages (e.g. "scenes.jsonl:3").
Scene scene_from_json(const std::string& line, const std::string& where = "scene");
void save_scenes(const std::string& path, const std::vector<Scene>& scenes);
std::vector<Scene> load_scenes(const std::string& path);

std::string detections_to_json(const SceneDetections& dets);
SceneDetections detections_from_json(const std::string& line, const std::string& where = "detections");
void save_detections(const std::string& path, const std::vector<SceneDetections>& dets);
std::vector<SceneDetections> load_detections(const std::string& path);

struct Checkpoint {
    std::string config_text;
    /// Parameter values in store order.
    std::vector<std::pair<std::string, Tensor>> params;
    AdamState adam;
    std::vector<double> loss_history;
};

/// Snapshot of the model's parameter values (copies, detached).
Checkpoint make_checkpoint(const Model& model, const AdamState& adam, const std::vector<double>& loss_history);

/// Binary layout: magic "HQDETCKP", u32 version, u64 config length + text,
/// u64 parameter count, per parameter (u64 name length, name, u64 rank,
/// u64 dims, u64 byte offset, u64 element count), u64 optimizer step, u64
/// history length, then the payload of little-endian IEEE doubles: every
/// parameter, every first moment, every second moment, the loss history.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Copies checkpoint values into `model`; names and shapes must match exactly.
void restore_parameters(Model& model, const Checkpoint& ckpt);

}  // namespace hqdet
