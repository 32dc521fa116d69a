#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mrae/backbone.hpp"
#include "mrae/data.hpp"
#include "mrae/gradcheck.hpp"
#include "mrae/io.hpp"
#include "mrae/rng.hpp"
#include "mrae/tensor.hpp"
#include "mrae/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using namespace mrae;

// Exit codes shared by every subcommand.
constexpr int kOk = 0;
constexpr int kUsageError = 1;
constexpr int kDataError = 2;
constexpr int kNumericalFailure = 3;

std::string manifest_path_for(const fs::path& output) {
    return output.string() + ".manifest.json";
}

json parse_json_file(const fs::path& path) {
    const std::string text = read_text(path);
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": malformed JSON: " + e.what());
    }
}

int cmd_filter_coco(const fs::path& in, const fs::path& out, double max_area) {
    RunManifest manifest;
    manifest.command = "filter-coco";
    manifest.started_at = iso8601_utc_now();
    manifest.config = {{"in", in.string()}, {"out", out.string()}, {"max_area", max_area}};

    const CocoDataset dataset = parse_coco(in);
    const CocoDataset kept = filter_small(dataset, max_area);
    const std::size_t retained = kept.annotations.size();
    const std::size_t dropped = dataset.annotations.size() - retained;

    atomic_write_text(out, emit_coco(kept));
    manifest.outputs = {out.string()};
    manifest.finished_at = iso8601_utc_now();
    write_manifest(manifest_path_for(out), manifest);

    std::cout << "retained " << retained << " / dropped " << dropped << "\n";
    return kOk;
}

int cmd_cluster_anchors(const fs::path& in, const fs::path& out_dir, int scales, int ratios,
                        std::uint64_t seed) {
    RunManifest manifest;
    manifest.command = "cluster-anchors";
    manifest.started_at = iso8601_utc_now();
    manifest.config = {{"in", in.string()},
                       {"out", out_dir.string()},
                       {"scales", scales},
                       {"ratios", ratios},
                       {"seed", seed}};
    manifest.seed = seed;

    const CocoDataset dataset = parse_coco(in);
    AnchorSet anchors;
    try {
        anchors = cluster_anchors(dataset.annotations, seed, static_cast<std::size_t>(scales),
                                  static_cast<std::size_t>(ratios));
    } catch (const std::invalid_argument& e) {
        // Too few or degenerate annotations are a property of the input file.
        throw DataError(in.string() + ": " + e.what());
    }

    const fs::path csv_path = out_dir / "anchors.csv";
    const fs::path json_path = out_dir / "anchors.json";
    atomic_write_text(csv_path, anchors_to_csv(anchors));
    atomic_write_text(json_path, anchors_to_json(anchors));
    manifest.outputs = {csv_path.string(), json_path.string()};
    manifest.finished_at = iso8601_utc_now();
    write_manifest((out_dir / "manifest.json").string(), manifest);

    if (anchors.degenerate) {
        std::cerr << "warning: clustering is degenerate (duplicate centers)\n";
    }
    std::cout << anchors.scales.size() << " scales / " << anchors.ratios.size() << " ratios -> "
              << out_dir.string() << "\n";
    return kOk;
}

int cmd_gradcheck(std::uint64_t seed, double eps, double tol) {
    const GradCheckReport report = run_gradcheck_suite(seed, eps, tol);
    std::cout << gradcheck_table(report);
    if (!report.all_passed()) {
        std::cerr << "gradient check failed\n";
        return kNumericalFailure;
    }
    return kOk;
}

TemplateSwitch parse_switch_spec(const std::string& spec) {
    const auto at = spec.find('@');
    if (at == std::string::npos || at == 0 || at + 1 == spec.size()) {
        throw std::invalid_argument("--switch-template expects N@STEP, e.g. 2@500");
    }
    TemplateSwitch sw;
    try {
        std::size_t used = 0;
        sw.new_template = std::stoi(spec.substr(0, at), &used);
        if (used != at) throw std::invalid_argument("");
        const std::string step_str = spec.substr(at + 1);
        sw.step = std::stoll(step_str, &used);
        if (used != step_str.size()) throw std::invalid_argument("");
    } catch (const std::exception&) {
        throw std::invalid_argument("--switch-template expects N@STEP, e.g. 2@500");
    }
    return sw;
}

struct TrainFlags {
    std::string fusion;
    int template_level = 1;
    bool template_given = false;
    std::string hard_level = "1";
    bool hard_level_given = false;
    std::string switch_spec;
    long long steps = 1000;
    std::uint64_t seed = 0;
    std::string out = "run";
    std::string backbone_config;
    int d_embed = 32;
    long long images = 1000;
    long long image_size = 64;
    long long max_obj_size = 8;
    long long classes = 1;
    long long objects_per_image = 3;
    double noise_std = 0.1;
};

json train_config_json(const TrainConfig& cfg, const SyntheticConfig& synth) {
    json schedule = json::array();
    for (const auto& seg : cfg.lr_schedule) {
        schedule.push_back({{"steps", seg.step_count}, {"lr", seg.lr}});
    }
    json doc = {{"fusion", fusion_mode_name(cfg.fusion)},
                {"steps", cfg.steps},
                {"seed", cfg.seed},
                {"momentum", cfg.momentum},
                {"lr_schedule", schedule},
                {"d_embed", cfg.d_embed},
                {"backbone",
                 {{"channels", cfg.backbone.channels}, {"blocks_per_level", cfg.backbone.blocks_per_level}}},
                {"dataset",
                 {{"images", synth.n_images},
                  {"image_size", synth.image_size},
                  {"max_obj_size", synth.max_obj_size},
                  {"classes", synth.n_classes},
                  {"objects_per_image", synth.objects_per_image},
                  {"noise_std", synth.noise_std},
                  {"seed", synth.seed}}}};
    doc["template"] = cfg.template_level ? json(*cfg.template_level) : json(nullptr);
    if (cfg.hard_level) {
        doc["hard_level"] = cfg.hard_level->random ? json("random") : json(cfg.hard_level->level);
    } else {
        doc["hard_level"] = nullptr;
    }
    if (cfg.switch_template_at) {
        doc["switch_template"] = {{"step", cfg.switch_template_at->step},
                                  {"new_template", cfg.switch_template_at->new_template}};
    } else {
        doc["switch_template"] = nullptr;
    }
    return doc;
}

int cmd_train(const TrainFlags& flags) {
    TrainConfig cfg;
    cfg.fusion = parse_fusion_mode(flags.fusion);
    if (flags.template_given) {
        cfg.template_level = flags.template_level;
    } else if (cfg.fusion == FusionMode::kMrae) {
        cfg.template_level = 1;
    }
    if (flags.hard_level_given && cfg.fusion != FusionMode::kHard) {
        throw std::invalid_argument("--hard-level requires --fusion hard");
    }
    if (cfg.fusion == FusionMode::kHard) {
        HardLevel hl;
        if (flags.hard_level == "random") {
            hl.random = true;
        } else {
            hl.level = std::stoi(flags.hard_level);
        }
        cfg.hard_level = hl;
    }
    if (!flags.switch_spec.empty()) cfg.switch_template_at = parse_switch_spec(flags.switch_spec);
    cfg.steps = flags.steps;
    cfg.seed = flags.seed;
    cfg.d_embed = flags.d_embed;
    if (!flags.backbone_config.empty()) {
        try {
            cfg.backbone = parse_backbone_config(flags.backbone_config);
        } catch (const std::invalid_argument& e) {
            throw DataError(flags.backbone_config + ": " + e.what());
        }
    }
    cfg.validate();

    SyntheticConfig synth;
    synth.n_images = static_cast<std::size_t>(flags.images);
    synth.image_size = static_cast<std::size_t>(flags.image_size);
    synth.max_obj_size = static_cast<std::size_t>(flags.max_obj_size);
    synth.n_classes = static_cast<std::size_t>(flags.classes);
    synth.objects_per_image = static_cast<std::size_t>(flags.objects_per_image);
    synth.noise_std = flags.noise_std;
    synth.seed = mix_seed(flags.seed, 0x64617461);

    RunManifest manifest;
    manifest.command = "train";
    manifest.started_at = iso8601_utc_now();
    manifest.config = train_config_json(cfg, synth);
    manifest.seed = flags.seed;

    const SyntheticDataset dataset = generate_synthetic(synth);
    const TrainReport report = train(cfg, dataset);

    const fs::path out_dir(flags.out);
    const fs::path csv_path = out_dir / "report.csv";
    const fs::path summary_path = out_dir / "summary.json";
    atomic_write_text(csv_path, report_to_csv(report));
    atomic_write_text(summary_path, report_summary_json(report, cfg));
    manifest.outputs = {csv_path.string(), summary_path.string()};
    manifest.finished_at = iso8601_utc_now();
    manifest.extra = {{"ms_per_step", report.ms_per_step}};
    write_manifest((out_dir / "manifest.json").string(), manifest);

    std::cout << "steps " << report.steps.size() << " final_loss " << format_full(report.final_loss)
              << " localization " << format_full(report.eval.localization_score) << " weights "
              << format_full(report.eval.mean_weights[0]) << ","
              << format_full(report.eval.mean_weights[1]) << ","
              << format_full(report.eval.mean_weights[2]) << "\n";
    return kOk;
}

struct CompareRow {
    std::string run;
    std::string fusion;
    std::string template_cell;
    double final_loss = std::numeric_limits<double>::quiet_NaN();
    double localization = 0.0;
    std::array<double, 3> weights{};
    double ms_per_step = std::numeric_limits<double>::quiet_NaN();
};

std::string run_label(const std::string& dir) {
    const fs::path p = fs::path(dir).lexically_normal();
    const std::string name = p.filename().string();
    if (!name.empty() && name != ".") return name;
    const std::string parent = p.parent_path().filename().string();
    return parent.empty() ? dir : parent;
}

int cmd_compare(const std::vector<std::string>& report_dirs, const fs::path& out_dir) {
    std::vector<CompareRow> rows;
    rows.reserve(report_dirs.size());
    for (const std::string& dir : report_dirs) {
        const json summary = parse_json_file(fs::path(dir) / "summary.json");
        CompareRow row;
        row.run = run_label(dir);
        try {
            row.fusion = summary.at("fusion").get<std::string>();
            row.template_cell =
                summary.at("template").is_null() ? "-" : std::to_string(summary.at("template").get<int>());
            row.final_loss = summary.at("final_loss").is_null()
                                 ? std::numeric_limits<double>::quiet_NaN()
                                 : summary.at("final_loss").get<double>();
            row.localization = summary.at("localization_score").get<double>();
            const auto& w = summary.at("mean_weights");
            for (int i = 0; i < 3; ++i) row.weights[i] = w.at(i).get<double>();
        } catch (const json::exception& e) {
            throw DataError(dir + "/summary.json: missing or mistyped field: " + e.what());
        }
        const fs::path manifest_path = fs::path(dir) / "manifest.json";
        if (fs::exists(manifest_path)) {
            const json manifest = parse_json_file(manifest_path);
            if (manifest.contains("extra") && manifest["extra"].contains("ms_per_step")) {
                row.ms_per_step = manifest["extra"]["ms_per_step"].get<double>();
            }
        }
        rows.push_back(std::move(row));
    }

    std::string csv = "run,fusion,template,final_loss,localization_score,a1,a2,a3,ms_per_step\n";
    std::string md =
        "| run | fusion | template | final_loss | localization_score | a1 | a2 | a3 | ms_per_step "
        "|\n| --- | --- | --- | --- | --- | --- | --- | --- | --- |\n";
    for (const CompareRow& row : rows) {
        const std::string ms = std::isnan(row.ms_per_step) ? "" : format_full(row.ms_per_step);
        csv += row.run + "," + row.fusion + "," + row.template_cell + "," +
               format_full(row.final_loss) + "," + format_full(row.localization) + "," +
               format_full(row.weights[0]) + "," + format_full(row.weights[1]) + "," +
               format_full(row.weights[2]) + "," + ms + "\n";
        md += "| " + row.run + " | " + row.fusion + " | " + row.template_cell + " | " +
              format_full(row.final_loss) + " | " + format_full(row.localization) + " | " +
              format_full(row.weights[0]) + " | " + format_full(row.weights[1]) + " | " +
              format_full(row.weights[2]) + " | " + (ms.empty() ? "-" : ms) + " |\n";
    }

    RunManifest manifest;
    manifest.command = "compare";
    manifest.started_at = iso8601_utc_now();
    manifest.config = {{"reports", report_dirs}, {"out", out_dir.string()}};

    const fs::path csv_path = out_dir / "compare.csv";
    const fs::path md_path = out_dir / "compare.md";
    atomic_write_text(csv_path, csv);
    atomic_write_text(md_path, md);
    manifest.outputs = {csv_path.string(), md_path.string()};
    manifest.finished_at = iso8601_utc_now();
    write_manifest((out_dir / "manifest.json").string(), manifest);

    std::cout << md;
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multiresolution attention fusion toolkit"};
    app.set_version_flag("--version", mrae::kToolVersion);
    app.require_subcommand(1);

    auto* filter = app.add_subcommand("filter-coco", "Keep only small-object annotations");
    std::string filter_in, filter_out;
    double max_area = 1024.0;
    filter->add_option("--in", filter_in, "Input COCO JSON")->required();
    filter->add_option("--out", filter_out, "Output COCO JSON")->required();
    filter->add_option("--max-area", max_area, "Strict area cutoff in square pixels")
        ->capture_default_str();

    auto* cluster = app.add_subcommand("cluster-anchors", "K-means anchor scales and ratios");
    std::string cluster_in, cluster_out = "anchors";
    int scales = 4, ratios = 3;
    std::uint64_t cluster_seed = 0;
    cluster->add_option("--in", cluster_in, "Input COCO JSON")->required();
    cluster->add_option("--out", cluster_out, "Output directory")->capture_default_str();
    cluster->add_option("--scales", scales, "Number of scale clusters")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    cluster->add_option("--ratios", ratios, "Number of aspect-ratio clusters")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    cluster->add_option("--seed", cluster_seed, "Clustering seed")->capture_default_str();

    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
    std::uint64_t gc_seed = 0;
    double eps = 1e-5, tol = 1e-4;
    gradcheck->add_option("--seed", gc_seed, "Draw seed")->capture_default_str();
    gradcheck->add_option("--eps", eps, "Central-difference half width")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    gradcheck->add_option("--tol", tol, "Relative error bound")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);

    auto* train = app.add_subcommand("train", "Train on the synthetic small-object task");
    TrainFlags tf;
    train->add_option("--fusion", tf.fusion, "Fusion mode")
        ->required()
        ->check(CLI::IsMember({"soft", "mrae", "hard"}));
    auto* template_opt =
        train->add_option("--template", tf.template_level, "Template level for mrae (default 1)");
    auto* hard_opt = train->add_option("--hard-level", tf.hard_level,
                                       "Level for hard fusion: 1, 2, 3 or random")
                         ->check(CLI::IsMember({"1", "2", "3", "random"}));
    train->add_option("--switch-template", tf.switch_spec,
                      "Switch the mrae template mid-run, format N@STEP");
    train->add_option("--steps", tf.steps, "Optimizer steps")
        ->capture_default_str()
        ->check(CLI::NonNegativeNumber);
    train->add_option("--seed", tf.seed, "Run seed (model init, data, shuffling)")
        ->capture_default_str();
    train->add_option("--out", tf.out, "Output directory")->capture_default_str();
    train->add_option("--backbone-config", tf.backbone_config,
                      "Key-value file overriding the backbone shape");
    train->add_option("--d-embed", tf.d_embed, "Embedding width for mrae")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    train->add_option("--images", tf.images, "Synthetic dataset size")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    train->add_option("--image-size", tf.image_size, "Synthetic image side in pixels")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    train->add_option("--max-obj-size", tf.max_obj_size, "Largest object side in pixels")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    train->add_option("--classes", tf.classes, "Number of object classes")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    train->add_option("--objects-per-image", tf.objects_per_image, "Objects drawn per image")
        ->capture_default_str()
        ->check(CLI::NonNegativeNumber);
    train->add_option("--noise-std", tf.noise_std, "Background noise amplitude")
        ->capture_default_str()
        ->check(CLI::NonNegativeNumber);

    auto* compare = app.add_subcommand("compare", "Merge training reports into one table");
    std::vector<std::string> report_dirs;
    std::string compare_out = "compare";
    compare->add_option("--reports", report_dirs, "Report directories from train runs")
        ->required()
        ->expected(-1);
    compare->add_option("--out", compare_out, "Output directory")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsageError;
    }

    tf.template_given = template_opt->count() > 0;
    tf.hard_level_given = hard_opt->count() > 0;

    try {
        if (filter->parsed()) return cmd_filter_coco(filter_in, filter_out, max_area);
        if (cluster->parsed()) {
            return cmd_cluster_anchors(cluster_in, cluster_out, scales, ratios, cluster_seed);
        }
        if (gradcheck->parsed()) return cmd_gradcheck(gc_seed, eps, tol);
        if (train->parsed()) return cmd_train(tf);
        if (compare->parsed()) return cmd_compare(report_dirs, compare_out);
    } catch (const mrae::NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kNumericalFailure;
    } catch (const mrae::DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kDataError;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kUsageError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kDataError;
    }
    return kUsageError;
}
