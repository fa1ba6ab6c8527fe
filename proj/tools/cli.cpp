#include "cli.hpp"

#include "hqdet/eval.hpp"
#include "hqdet/harness.hpp"
#include "hqdet/io.hpp"
#include "hqdet/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace hqdet {

namespace {

constexpr int kUsage = 1, kData = 2;

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError(path + ": cannot open");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError(path + ": cannot write");
    out << std::setprecision(17);
    return out;
}

std::vector<double> parse_sweep(const std::string& text) {
    if (text.empty()) return default_tau_iou_sweep();
    std::vector<double> out;
    auto num = [&](const std::string& s) {
        try {
            std::size_t used = 0;
            const double v = std::stod(s, &used);
            if (used != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw UsageError("--tau-iou-sweep: cannot parse '" + s + "'");
        }
    };
    if (const auto c1 = text.find(':'); c1 != std::string::npos) {
        const auto c2 = text.find(':', c1 + 1);
        if (c2 == std::string::npos) throw UsageError("--tau-iou-sweep: expected lo:hi:step");
        const double lo = num(text.substr(0, c1)), hi = num(text.substr(c1 + 1, c2 - c1 - 1)),
                     step = num(text.substr(c2 + 1));
        if (!(step > 0) || hi < lo) throw UsageError("--tau-iou-sweep: empty range");
        const auto n = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9));
        for (std::size_t i = 0; i <= n; ++i) out.push_back(std::round((lo + static_cast<double>(i) * step) * 1e12) / 1e12);
        return out;
    }
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(num(item));
    return out;
}

struct Options {
    std::uint64_t seed = 0;
    std::size_t count = 1;
    std::string out, scenes, config, ckpt, resume, detections, dump_detections, dump_plots, dump_mapping, out_csv;
    std::uint64_t steps = 0;
    std::size_t log_every = 0;
    double tau_dis = 2.0;
    std::string sweep;
    double min_score = -1;
};

int gen_scenes(const Options& o, std::ostream& out) {
    save_scenes(o.out, generate_scenes(o.seed, o.count));
    out << "wrote " << o.count << " scenes to " << o.out << "\n";
    return 0;
}

int train(const Options& o, std::ostream& out) {
    ModelConfig cfg;
    if (!o.config.empty()) apply_config_text(cfg, read_file(o.config));
    Checkpoint resumed;
    if (!o.resume.empty()) {
        resumed = load_checkpoint(o.resume);
        const ModelConfig saved = config_from_text(resumed.config_text);
        if (!o.config.empty() && config_to_text(saved) != config_to_text(cfg)) {
            throw UsageError("--config differs from the configuration stored in " + o.resume);
        }
        cfg = saved;
    }
    Model model(cfg);
    AdamState state = AdamState::zeros(model.params());
    std::vector<double> history;
    if (!o.resume.empty()) {
        restore_parameters(model, resumed);
        state = resumed.adam;
        history = resumed.loss_history;
        if (state.m.size() != model.params().size()) throw DataError(o.resume + ": optimizer state does not match");
    }
    const auto scenes = load_scenes(o.scenes);
    if (scenes.empty()) throw DataError(o.scenes + ": no scenes");
    const auto samples = make_samples(scenes, cfg);
    train_until(model, state, samples, o.steps, history, [&](std::uint64_t step, const LossBreakdown& l) {
        if (o.log_every && (step + 1) % o.log_every == 0) {
            out << "step " << step + 1 << " loss " << l.total << " cls2d " << l.cls2d << " l1_2d " << l.l1_2d
                << " giou2d " << l.giou2d << " alpha " << l.alpha << " cls3d " << l.cls3d << " reg3d " << l.reg3d
                << "\n";
        }
    });
    save_checkpoint(o.out, make_checkpoint(model, state, history));
    out << "trained to step " << state.step << ", checkpoint " << o.out << "\n";
    return 0;
}

int evaluate(const Options& o, std::ostream& out) {
    const Checkpoint ckpt = load_checkpoint(o.ckpt);
    const ModelConfig cfg = config_from_text(ckpt.config_text);
    Model model(cfg);
    restore_parameters(model, ckpt);
    const auto scenes = load_scenes(o.scenes);
    const auto samples = make_samples(scenes, cfg);
    const double min_score = o.min_score >= 0 ? o.min_score : cfg.score_threshold;
    const auto dets = run_detection(model, samples, min_score);
    if (!o.dump_detections.empty()) save_detections(o.dump_detections, dets);

    const APReport ap50 = average_precision_2d(dets, scenes, 0.5, cfg.num_classes);
    const APReport ap75 = average_precision_2d(dets, scenes, 0.75, cfg.num_classes);
    const CenterErrorReport ce = center_error_3d(dets, scenes);
    const auto sweep = default_tau_iou_sweep();
    const AssociationReport assoc = aar_recall(dets, scenes, 2.0, sweep);
    out << std::setprecision(6) << "AP2d@0.5 " << ap50.mean << "\nAP2d@0.75 " << ap75.mean << "\ncenter_error_mean "
        << ce.mean << "\ncenter_error_median " << ce.median << "\nyaw_error_mean " << ce.mean_yaw << "\nmatched3d "
        << ce.matched << "/" << ce.num_gt << "\n";
    for (const AssociationPoint& p : assoc.curve) {
        if (std::abs(p.tau_iou - 0.5) < 1e-9) {
            out << "AAR@0.5 " << (p.aar ? std::to_string(*p.aar) : "n/a") << "\nRecall@0.5 "
                << (p.recall ? std::to_string(*p.recall) : "n/a") << "\n";
        }
    }

    if (!o.dump_plots.empty()) {
        std::filesystem::create_directories(o.dump_plots);
        const std::filesystem::path dir(o.dump_plots);
        auto loss = open_out((dir / "loss_curve.csv").string());
        loss << "step,loss\n";
        for (std::size_t i = 0; i < ckpt.loss_history.size(); ++i) loss << i + 1 << "," << ckpt.loss_history[i] << "\n";
        auto aar = open_out((dir / "aar_curve.csv").string());
        aar << std::setprecision(12) << "tau_iou,aar,recall\n";
        for (const AssociationPoint& p : assoc.curve) {
            aar << p.tau_iou << "," << (p.aar ? std::to_string(*p.aar) : "") << ","
                << (p.recall ? std::to_string(*p.recall) : "") << "\n";
        }
        auto pr = open_out((dir / "pr_points.csv").string());
        pr << "iou_threshold,class,recall,precision\n";
        for (const auto* rep : {&ap50, &ap75}) {
            const double thr = rep == &ap50 ? 0.5 : 0.75;
            for (std::size_t c = 0; c < rep->pr_points.size(); ++c)
                for (const auto& [r, p] : rep->pr_points[c]) pr << thr << "," << c << "," << r << "," << p << "\n";
        }
    }
    return 0;
}

// One JSON object per scene: N, M, group sizes and every column's owner.
int project(const Options& o, std::ostream& out) {
    const auto scenes = load_scenes(o.scenes);
    auto dump = open_out(o.dump_mapping);
    std::size_t total = 0;
    for (const Scene& s : scenes) {
        std::vector<Anchor3D> anchors;
        for (const SceneObject& obj : s.objects) anchors.push_back(obj.box);
        const AllocationResult a = allocate_geometry(anchors, s.rig);
        nlohmann::json cols = nlohmann::json::array();
        for (std::size_t j = 0; j < a.mapping.num_columns(); ++j) {
            const MappingColumn& c = a.mapping.columns()[j];
            const Rect& r = a.rects[j];
            cols.push_back({{"camera", c.camera},
                            {"query", c.query},
                            {"object_id", s.objects[c.query].id},
                            {"ref", {a.reference_points[2 * j], a.reference_points[2 * j + 1]}},
                            {"truncated", a.truncation[j] != 0},
                            {"rect", {r.x1, r.y1, r.x2, r.y2}}});
        }
        const nlohmann::json line = {{"scene_id", s.scene_id},
                                     {"N", anchors.size()},
                                     {"M", a.mapping.num_columns()},
                                     {"group_sizes", a.mapping.group_sizes()},
                                     {"columns", cols}};
        dump << line.dump() << "\n";
        total += a.mapping.num_columns();
    }
    out << "wrote " << total << " mapping columns for " << scenes.size() << " scenes to " << o.dump_mapping << "\n";
    return 0;
}

int assoc_metric(const Options& o, std::ostream& out) {
    const auto sweep = parse_sweep(o.sweep);
    for (double t : sweep) MatchPredicateParams{o.tau_dis, t}.validate();
    const auto dets = load_detections(o.detections);
    const auto scenes = load_scenes(o.scenes);
    const AssociationReport rep = aar_recall(dets, scenes, o.tau_dis, sweep);
    std::ofstream file;
    std::ostream* csv = &out;
    if (!o.out_csv.empty()) {
        file = open_out(o.out_csv);
        csv = &file;
    }
    // Sweep values are rounded to 1e-12, so 12 digits print them exactly.
    *csv << std::setprecision(12) << "tau_iou,aar,recall\n";
    for (const AssociationPoint& p : rep.curve) {
        *csv << p.tau_iou << "," << (p.aar ? std::to_string(*p.aar) : "") << ","
             << (p.recall ? std::to_string(*p.recall) : "") << "\n";
    }
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Multi-view 3D detection with a hybrid 2D/3D decoder on synthetic scenes"};
    app.require_subcommand(1);
    Options o;

    auto* gen = app.add_subcommand("gen-scenes", "Generate synthetic scenes as JSONL");
    gen->add_option("--seed", o.seed, "Generator seed")->required();
    gen->add_option("--count", o.count, "Number of scenes")->required();
    gen->add_option("--out", o.out, "Output JSONL path")->required();

    auto* tr = app.add_subcommand("train", "Train a model and write a checkpoint");
    tr->add_option("--scenes", o.scenes, "Scene JSONL")->required();
    tr->add_option("--config", o.config, "Config file (key = value lines)");
    tr->add_option("--out-ckpt", o.out, "Checkpoint to write")->required();
    tr->add_option("--steps", o.steps, "Total optimizer steps to reach")->required();
    tr->add_option("--resume", o.resume, "Checkpoint to resume from");
    tr->add_option("--log-every", o.log_every, "Print the loss every N steps");

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on scenes");
    ev->add_option("--scenes", o.scenes, "Scene JSONL")->required();
    ev->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
    ev->add_option("--dump-detections", o.dump_detections, "Write detections JSONL");
    ev->add_option("--dump-plots", o.dump_plots, "Directory for CSV series");
    ev->add_option("--min-score", o.min_score, "Score threshold (default: config score_threshold)");

    auto* pr = app.add_subcommand("project", "Dump the query allocation of ground-truth boxes");
    pr->add_option("--scenes", o.scenes, "Scene JSONL")->required();
    pr->add_option("--dump-mapping", o.dump_mapping, "Mapping JSONL to write, one scene per line")->required();

    auto* am = app.add_subcommand("assoc-metric", "AAR and recall over a tau_iou sweep");
    am->add_option("--detections", o.detections, "Detection JSONL")->required();
    am->add_option("--scenes", o.scenes, "Scene JSONL")->required();
    am->add_option("--tau-dis", o.tau_dis, "Center distance gate in meters");
    am->add_option("--tau-iou-sweep", o.sweep, "lo:hi:step or comma list (default 0.1:0.9:0.1)");
    am->add_option("--out-csv", o.out_csv, "CSV path (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : kUsage;
    }

    try {
        if (*gen) return gen_scenes(o, out);
        if (*tr) return train(o, out);
        if (*ev) return evaluate(o, out);
        if (*pr) return project(o, out);
        return assoc_metric(o, out);
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        return kData;
    } catch (const ConfigError& e) {
        err << "usage error: " << e.what() << "\n";
        return kUsage;
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        err << "data error: " << e.what() << "\n";
        return kData;
    }
}

}  // namespace hqdet
