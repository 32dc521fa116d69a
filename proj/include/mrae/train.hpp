#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mrae/backbone.hpp"
#include "mrae/data.hpp"
#include "mrae/fusion.hpp"
#include "mrae/optim.hpp"

namespace mrae {

inline constexpr double kHeatmapSigma = 1.5;  // in grid cells
inline constexpr double kHeatmapStride = 4.0;  // pixels per grid cell

const char* fusion_mode_name(FusionMode mode);
FusionMode parse_fusion_mode(const std::string& name);

struct LrSegment {
    std::size_t step_count = 0;
    double lr = 0.0;
};

struct HardLevel {
    bool random = false;
    int level = 1;  // used when random is false
};

struct TemplateSwitch {
    std::size_t step = 0;  // the first step that runs with the new template
    int new_template = 1;
};

struct TrainConfig {
    FusionMode fusion = FusionMode::kSoft;
    std::optional<int> template_level;    // required iff fusion is mrae
    std::optional<HardLevel> hard_level;  // hard only; defaults to fixed level 1
    std::vector<LrSegment> lr_schedule{{600, 3e-4}, {300, 3e-5}, {100, 3e-6}};
    double momentum = 0.9;
    std::size_t steps = 1000;
    std::uint64_t seed = 0;
    std::optional<TemplateSwitch> switch_template_at;  // mrae only
    BackboneConfig backbone = BackboneConfig::toy();
    std::size_t d_embed = 32;
    Interp interp = Interp::kBilinear;

    void validate() const;
    /// Learning rate for a step index: schedule segments in order, the last
    /// segment's rate extends past the end. A zero rate freezes parameters.
    double lr_at(std::size_t step) const;
};

struct StepRecord {
    std::size_t step = 0;
    double loss = 0.0;
    std::array<double, 3> weights{};
    double ms = 0.0;
};

struct EvalResult {
    double localization_score = 0.0;
    std::array<double, 3> mean_weights{};
    std::size_t n_targets = 0;
};

struct TrainReport {
    std::vector<StepRecord> steps;
    double final_loss = 0.0;  // mean loss over the last 100 logged steps
    EvalResult eval;
    double ms_per_step = 0.0;
    std::size_t param_count = 0;
};

// Backbone + fusion + 1x1 classification head producing per-class heatmaps on
// the stride-4 grid. One generator seeds every part in a fixed order, so runs
// that differ only in fusion mode start from identical shared weights.
class FusionModel {
public:
    FusionModel(FusionMode mode, const BackboneConfig& backbone_cfg, const FusionConfig& fusion_cfg,
                std::size_t n_classes, std::uint64_t seed, int hard_level = 1);

    struct Output {
        AttentionWeights weights;
        Tensor heatmap;  // [N, K, H/4, W/4]
    };
    Output forward(const Tensor& images) const;

    /// Parameters the optimizer may touch in this mode: the backbone, head,
    /// and alignment convs always; the soft or embedding branches only when
    /// the mode exercises them.
    ParamList trainable_params() const;
    ParamList all_params() const;

    FusionMode mode() const { return mode_; }
    std::size_t n_classes() const { return n_classes_; }
    int hard_level() const { return hard_level_; }
    FusionParams& fusion() { return fusion_; }
    const FusionParams& fusion() const { return fusion_; }

private:
    FusionMode mode_;
    std::size_t n_classes_;
    int hard_level_;
    Backbone backbone_;
    FusionParams fusion_;
    Conv2dLayer head_;
};

// Gaussian bumps (peak 1, max-combined on overlap) per class channel on the
// stride-4 grid; one row of targets per batch image.
Tensor render_heatmap_targets(const std::vector<std::vector<SyntheticTarget>>& targets,
                              std::size_t n_classes, std::size_t grid_h, std::size_t grid_w,
                              double sigma = kHeatmapSigma, double stride = kHeatmapStride);

// MSE between predicted heatmaps [N,K,Hg,Wg] and rendered target bumps.
Tensor heatmap_loss(const Tensor& pred, const std::vector<std::vector<SyntheticTarget>>& targets,
                    double sigma = kHeatmapSigma);

// Counts targets whose class-channel argmax cell lies within one cell
// (Chebyshev) of the cell containing the true center. Returns (hits, total).
std::pair<std::size_t, std::size_t> count_heatmap_hits(
    const Tensor& heatmaps, const std::vector<std::vector<SyntheticTarget>>& targets);

// Deterministic per-epoch sample order.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

// Single-image-per-step training loop with per-step control for tests.
class Trainer {
public:
    Trainer(const TrainConfig& config, const SyntheticDataset& dataset);

    std::size_t steps_done() const { return next_step_; }
    bool done() const { return next_step_ >= config_.steps; }
    StepRecord step_once();
    void run();

    FusionModel& model() { return model_; }
    const TrainConfig& config() const { return config_; }
    /// Aggregates the log and evaluates on the training dataset.
    TrainReport finish();

private:
    TrainConfig config_;
    const SyntheticDataset& dataset_;
    FusionModel model_;
    ParamList params_;
    std::optional<SgdMomentum> optimizer_;
    std::vector<StepRecord> log_;
    std::vector<std::size_t> order_;
    std::size_t next_step_ = 0;
};

TrainReport train(const TrainConfig& config, const SyntheticDataset& dataset);

EvalResult evaluate(const FusionModel& model, const SyntheticDataset& dataset);

// CSV with header step,loss,a1,a2,a3; full float precision.
std::string report_to_csv(const TrainReport& report);
// Deterministic JSON summary (no wall-clock fields).
std::string report_summary_json(const TrainReport& report, const TrainConfig& config);

}  // namespace mrae
