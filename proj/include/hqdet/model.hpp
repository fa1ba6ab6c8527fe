#pragma once

// Hybrid decoder: L_hybrid blocks, each running L_2d multi-view 2D layers on
// allocated 2D queries, aggregating them back into the 3D queries, and then
// L_3d 3D layers. Anchors are refined after every 3D head (including the
// auxiliary head on the aggregation output).

#include "hqdet/aggregation.hpp"
#include "hqdet/attention.hpp"
#include "hqdet/params.hpp"
#include "hqdet/scene.hpp"

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace hqdet {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
    std::size_t num_queries = 32;
    std::size_t embed_dim = 64;
    std::size_t num_cameras = 3;
    std::size_t layers_2d = 1;
    std::size_t layers_3d = 1;
    std::size_t hybrid_blocks = 3;
    /// Must equal (layers_2d + layers_3d) * hybrid_blocks.
    std::size_t total_layers = 6;
    std::size_t num_classes = 2;
    std::size_t heads = 4;
    std::size_t ffn_mult = 4;
    std::size_t deform_points = 4;
    /// Raster channels per pixel and the square patch that forms one token.
    std::size_t input_channels = 17;
    std::size_t patch_size = 4;

    double lambda_alpha = 0.5;
    double w_cls = 2.0;
    double w_l1 = 5.0;
    double w_giou = 2.0;
    double w_center = 1.0;
    double w_size = 0.5;
    double w_yaw = 0.5;
    double w_vel = 0.2;
    double aux_weight = 1.0;

    double lr = 4e-4;
    double weight_decay = 1e-4;
    double grad_clip = 10.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t warmup_steps = 0;
    /// From this step on the learning rate is multiplied by lr_drop_factor; 0 disables.
    std::size_t lr_drop_step = 0;
    double lr_drop_factor = 0.1;
    std::size_t batch_size = 1;
    std::uint64_t seed = 0;

    std::size_t top_k = 8;
    double score_threshold = 0.3;
    std::size_t truncated_cap = kTruncatedCapPerCamera;
    bool temporal_shared = false;
    bool merge_residual = true;

    /// Initial anchors fill this polar sector around the ego origin.
    double anchor_range_min = 6.0;
    double anchor_range_max = 25.0;
    double anchor_half_angle_deg = 75.0;

    /// Throws ConfigError on any inconsistency, including the layer-count relation.
    void validate() const;
    AttentionConfig attention() const;
};

/// Flat `key = value` text, one field per line, `#` comments.
std::string config_to_text(const ModelConfig& cfg);
/// Fields missing from `text` keep their defaults; unknown keys throw ConfigError.
ModelConfig config_from_text(const std::string& text);
/// Applies `key = value` assignments on top of `base`.
void apply_config_text(ModelConfig& cfg, const std::string& text);

/// The six decoder topologies (L_2d, L_3d, L_hybrid) of the layer ablation, labelled A-F.
struct LayerTopology {
    char label;
    std::size_t layers_2d, layers_3d, hybrid_blocks;
};
const std::array<LayerTopology, 6>& layer_topologies();

// ------------------------------------------------------------------ anchors

inline constexpr std::size_t kAnchorEncoding = 10;

/// [x, y, z, log w, log l, log h, sin yaw, cos yaw, vx, vy]
std::array<double, kAnchorEncoding> encode_anchor(const Anchor3D& a);
/// Inverse of encode_anchor; yaw = atan2(sin, cos), log sizes clamped to [-3, 4].
Anchor3D decode_anchor(std::span<const double> enc);

/// Deterministic area-uniform anchors over the configured sector, per-class
/// median sizes alternating by index, yaw and velocity zero.
std::vector<Anchor3D> initial_anchors(const ModelConfig& cfg);

// ------------------------------------------------------------ inputs/outputs

struct ModelInput {
    CameraRig rig;
    /// Per camera [feat_h * feat_w, input_channels * patch^2] patch tokens.
    std::vector<Tensor> tokens;
    std::size_t feat_h = 0, feat_w = 0;
};

struct TemporalMemory {
    Tensor queries;  // [K, C], detached
    std::vector<Anchor3D> anchors;
    bool empty() const { return anchors.empty(); }
};

struct Pred2D {
    Tensor logits;  // [M, classes]
    Tensor alpha;   // [M, 2] (sin, cos)
    Tensor boxes;   // [M, 4] pixel (cx, cy, w, h)
};

struct Stage2D {
    std::size_t block = 0;
    AllocationResult alloc;
    std::vector<double> default_wh;
    std::vector<Pred2D> layers;
};

struct Pred3D {
    std::size_t block = 0;
    bool aux = false;
    Tensor logits;   // [N, classes]
    Tensor encoded;  // [N, kAnchorEncoding]
};

struct DecoderOutput {
    std::vector<Stage2D> stages2d;
    std::vector<Pred3D> preds3d;
    Tensor queries;
    std::vector<Anchor3D> anchors;
    /// anchor_trace[k] is the anchor set that 3D prediction k refined;
    /// the last entry equals `anchors`.
    std::vector<std::vector<Anchor3D>> anchor_trace;
};

class Model {
public:
    explicit Model(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    const std::vector<Anchor3D>& anchors() const { return anchors_; }

    /// Patch embedding of every camera's tokens: LN(tokens W + b) as [H, W, C].
    std::vector<Tensor> feature_maps(const ModelInput& input) const;

    /// Refined anchors are values without gradient. Passing a previous
    /// run's anchor_trace as `fixed_anchors` replays those anchors instead of
    /// decoding new ones, which makes the output a differentiable function of
    /// the parameters alone.
    DecoderOutput forward(const ModelInput& input, const TemporalMemory* memory = nullptr,
                          const std::vector<std::vector<Anchor3D>>* fixed_anchors = nullptr) const;

private:
    struct Mlp {
        Tensor w1, b1, w2, b2;
    };
    struct Head2D {
        LayerNormParams norm;
        Tensor wh, bh, wc, bc, wa, ba, wb, bb;
    };
    struct Head3D {
        LayerNormParams norm;
        Tensor wh, bh, wc, bc, wr, br;
    };
    struct Layer2D {
        AttentionParams self;
        DeformableParams cross;
        FeedForwardParams ffn;
    };
    struct Layer3D {
        AttentionParams self;
        DeformableParams cross;
        FeedForwardParams ffn;
    };
    struct Block {
        /// Owned by temporal_; shared by every block when temporal_shared.
        const AttentionParams* temporal = nullptr;
        std::vector<Layer2D> layers2d;
        std::optional<AggregationParams> aggregation;
        std::vector<Layer3D> layers3d;
    };

    Mlp make_mlp(const std::string& prefix, std::size_t in, std::size_t out);
    static Tensor run_mlp(const Mlp& m, const Tensor& x);
    Tensor anchor_embedding(std::span<const Anchor3D> anchors) const;
    Tensor pos2d_embedding(const AllocationResult& alloc, const CameraRig& rig) const;
    Pred2D head_2d(const Tensor& q2d, const Tensor& pos, std::span<const double> refs,
                   std::span<const double> default_wh) const;
    Pred3D head_3d(const Tensor& q3d, const Tensor& pos, std::span<const Anchor3D> anchors) const;

    ModelConfig cfg_;
    AttentionConfig att_;
    ParamStore store_;
    std::vector<Anchor3D> anchors_;
    Tensor query_init_;
    Tensor patch_w_, patch_b_;
    LayerNormParams patch_norm_;
    Mlp anchor_embed_, pos2d_embed_;
    Head2D head2d_;
    Head3D head3d_;
    std::vector<std::unique_ptr<AttentionParams>> temporal_;
    std::vector<Block> blocks_;
};

/// Anchors decoded from a 3D prediction, values only.
std::vector<Anchor3D> decode_predictions(const Pred3D& pred);

/// Final-layer detections. 3D detection ids are query indices; 2D detections
/// come from the last 2D layer and link to their owning query. Detections
/// scoring below `min_score` are dropped.
SceneDetections detect(const DecoderOutput& out, const std::string& scene_id, double min_score = 0.0);

/// Indices of the `k` largest scores, descending, ties by lower index; k is
/// clamped to the score count.
std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k);

/// Moves an anchor from the previous ego frame into the current one.
Anchor3D compensate_ego_motion(const Anchor3D& a, const EgoDelta& delta);

/// Top-K queries by maximum class probability of the final 3D prediction,
/// with anchors carried into the next frame's ego coordinates.
TemporalMemory propagate_temporal(const DecoderOutput& out, std::size_t k, const EgoDelta& delta = {});

}  // namespace hqdet
