#include "hqdet/model.hpp"

#include <charconv>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <variant>

namespace hqdet {

namespace {

// The seed is a std::uint64_t, which is std::size_t on the supported targets.
static_assert(std::is_same_v<std::size_t, std::uint64_t>);
using Field = std::variant<std::size_t ModelConfig::*, double ModelConfig::*, bool ModelConfig::*>;

const std::vector<std::pair<const char*, Field>>& fields() {
    static const std::vector<std::pair<const char*, Field>> table{
        {"num_queries", &ModelConfig::num_queries},
        {"embed_dim", &ModelConfig::embed_dim},
        {"num_cameras", &ModelConfig::num_cameras},
        {"layers_2d", &ModelConfig::layers_2d},
        {"layers_3d", &ModelConfig::layers_3d},
        {"hybrid_blocks", &ModelConfig::hybrid_blocks},
        {"total_layers", &ModelConfig::total_layers},
        {"num_classes", &ModelConfig::num_classes},
        {"heads", &ModelConfig::heads},
        {"ffn_mult", &ModelConfig::ffn_mult},
        {"deform_points", &ModelConfig::deform_points},
        {"input_channels", &ModelConfig::input_channels},
        {"patch_size", &ModelConfig::patch_size},
        {"lambda_alpha", &ModelConfig::lambda_alpha},
        {"w_cls", &ModelConfig::w_cls},
        {"w_l1", &ModelConfig::w_l1},
        {"w_giou", &ModelConfig::w_giou},
        {"w_center", &ModelConfig::w_center},
        {"w_size", &ModelConfig::w_size},
        {"w_yaw", &ModelConfig::w_yaw},
        {"w_vel", &ModelConfig::w_vel},
        {"aux_weight", &ModelConfig::aux_weight},
        {"lr", &ModelConfig::lr},
        {"weight_decay", &ModelConfig::weight_decay},
        {"grad_clip", &ModelConfig::grad_clip},
        {"beta1", &ModelConfig::beta1},
        {"beta2", &ModelConfig::beta2},
        {"adam_eps", &ModelConfig::adam_eps},
        {"warmup_steps", &ModelConfig::warmup_steps},
        {"lr_drop_step", &ModelConfig::lr_drop_step},
        {"lr_drop_factor", &ModelConfig::lr_drop_factor},
        {"batch_size", &ModelConfig::batch_size},
        {"seed", &ModelConfig::seed},
        {"top_k", &ModelConfig::top_k},
        {"score_threshold", &ModelConfig::score_threshold},
        {"truncated_cap", &ModelConfig::truncated_cap},
        {"temporal_shared", &ModelConfig::temporal_shared},
        {"merge_residual", &ModelConfig::merge_residual},
        {"anchor_range_min", &ModelConfig::anchor_range_min},
        {"anchor_range_max", &ModelConfig::anchor_range_max},
        {"anchor_half_angle_deg", &ModelConfig::anchor_half_angle_deg},
    };
    return table;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_unsigned(const std::string& text, const std::string& key) {
    T v{};
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size()) {
        throw ConfigError("config: " + key + " expects a non-negative integer, got '" + text + "'");
    }
    return v;
}

double parse_double(const std::string& text, const std::string& key) {
    try {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used != text.size() || !std::isfinite(v)) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: " + key + " expects a number, got '" + text + "'");
    }
}

}  // namespace

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
    if ((layers_2d + layers_3d) * hybrid_blocks != total_layers) {
        fail("total_layers " + std::to_string(total_layers) + " != (layers_2d + layers_3d) * hybrid_blocks = " +
             std::to_string((layers_2d + layers_3d) * hybrid_blocks));
    }
    if (hybrid_blocks == 0 || layers_2d + layers_3d == 0) fail("decoder has no layers");
    if (num_queries == 0) fail("num_queries must be positive");
    if (num_classes == 0) fail("num_classes must be positive");
    if (heads == 0 || embed_dim % heads != 0) fail("embed_dim must be divisible by heads");
    if (deform_points == 0 || ffn_mult == 0 || patch_size == 0 || input_channels == 0) {
        fail("deform_points, ffn_mult, patch_size and input_channels must be positive");
    }
    if (batch_size == 0) fail("batch_size must be positive");
    if (lr < 0 || weight_decay < 0 || grad_clip < 0) fail("lr, weight_decay and grad_clip must be non-negative");
    if (!(lr_drop_factor > 0 && lr_drop_factor <= 1)) fail("lr_drop_factor must be in (0, 1]");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0)) fail("invalid AdamW moments");
    if (!(anchor_range_min > 0 && anchor_range_max > anchor_range_min)) fail("invalid anchor range");
    if (!(anchor_half_angle_deg > 0 && anchor_half_angle_deg <= 180)) fail("invalid anchor sector");
}

AttentionConfig ModelConfig::attention() const {
    AttentionConfig a;
    a.embed_dim = embed_dim;
    a.heads = heads;
    a.points = deform_points;
    a.feature_stride = static_cast<double>(patch_size);
    return a;
}

std::string config_to_text(const ModelConfig& cfg) {
    std::ostringstream os;
    os << std::setprecision(17);
    for (const auto& [name, field] : fields()) {
        os << name << " = ";
        std::visit(
            [&](auto member) {
                using T = std::remove_reference_t<decltype(cfg.*member)>;
                if constexpr (std::is_same_v<T, bool>)
                    os << (cfg.*member ? "true" : "false");
                else
                    os << cfg.*member;
            },
            field);
        os << '\n';
    }
    return os.str();
}

void apply_config_text(ModelConfig& cfg, const std::string& text) {
    std::istringstream is(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        const Field* field = nullptr;
        for (const auto& [name, f] : fields())
            if (key == name) field = &f;
        if (!field) throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
        std::visit(
            [&](auto member) {
                using T = std::remove_reference_t<decltype(cfg.*member)>;
                if constexpr (std::is_same_v<T, bool>) {
                    if (value == "true" || value == "1")
                        cfg.*member = true;
                    else if (value == "false" || value == "0")
                        cfg.*member = false;
                    else
                        throw ConfigError("config: " + key + " expects true or false, got '" + value + "'");
                } else if constexpr (std::is_same_v<T, double>) {
                    cfg.*member = parse_double(value, key);
                } else {
                    cfg.*member = parse_unsigned<T>(value, key);
                }
            },
            *field);
    }
}

ModelConfig config_from_text(const std::string& text) {
    ModelConfig cfg;
    apply_config_text(cfg, text);
    return cfg;
}

const std::array<LayerTopology, 6>& layer_topologies() {
    static const std::array<LayerTopology, 6> table{{
        {'A', 0, 1, 6},
        {'B', 1, 0, 6},
        {'C', 2, 1, 2},
        {'D', 1, 2, 2},
        {'E', 3, 3, 1},
        {'F', 1, 1, 3},
    }};
    return table;
}

}  // namespace hqdet
