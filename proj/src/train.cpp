#include "mrae/train.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "mrae/io.hpp"

namespace mrae {

const char* fusion_mode_name(FusionMode mode) {
    switch (mode) {
        case FusionMode::kSoft: return "soft";
        case FusionMode::kMrae: return "mrae";
        case FusionMode::kHard: return "hard";
    }
    throw std::invalid_argument("unknown fusion mode");
}

FusionMode parse_fusion_mode(const std::string& name) {
    if (name == "soft") return FusionMode::kSoft;
    if (name == "mrae") return FusionMode::kMrae;
    if (name == "hard") return FusionMode::kHard;
    throw std::invalid_argument("unknown fusion mode '" + name + "' (expected soft, mrae, or hard)");
}

void TrainConfig::validate() const {
    backbone.validate();
    if (fusion == FusionMode::kMrae) {
        if (!template_level) {
            throw std::invalid_argument("train config: mrae fusion requires a template level");
        }
        if (*template_level < 1 || *template_level > 3) {
            throw std::invalid_argument("train config: template level must be 1, 2, or 3");
        }
    } else if (template_level) {
        throw std::invalid_argument("train config: template level is only valid with mrae fusion");
    }
    if (hard_level && fusion != FusionMode::kHard) {
        throw std::invalid_argument("train config: hard level is only valid with hard fusion");
    }
    if (hard_level && !hard_level->random && (hard_level->level < 1 || hard_level->level > 3)) {
        throw std::invalid_argument("train config: hard level must be 1, 2, 3, or random");
    }
    if (switch_template_at) {
        if (fusion != FusionMode::kMrae) {
            throw std::invalid_argument("train config: template switching is only valid with mrae fusion");
        }
        if (switch_template_at->new_template < 1 || switch_template_at->new_template > 3) {
            throw std::invalid_argument("train config: switch target template must be 1, 2, or 3");
        }
    }
    if (lr_schedule.empty()) {
        throw std::invalid_argument("train config: learning-rate schedule must not be empty");
    }
    double prev = std::numeric_limits<double>::infinity();
    for (const auto& seg : lr_schedule) {
        if (!(seg.lr >= 0) || !std::isfinite(seg.lr)) {
            throw std::invalid_argument("train config: learning rates must be finite and non-negative");
        }
        if (seg.lr > prev) {
            throw std::invalid_argument("train config: learning rates must be non-increasing");
        }
        if (seg.step_count == 0) {
            throw std::invalid_argument("train config: schedule segments need a positive step count");
        }
        prev = seg.lr;
    }
    if (!(momentum >= 0) || momentum >= 1) {
        throw std::invalid_argument("train config: momentum must lie in [0, 1)");
    }
    if (d_embed == 0) throw std::invalid_argument("train config: embedding width must be positive");
}

double TrainConfig::lr_at(std::size_t step) const {
    std::size_t boundary = 0;
    for (const auto& seg : lr_schedule) {
        boundary += seg.step_count;
        if (step < boundary) return seg.lr;
    }
    return lr_schedule.back().lr;
}

FusionModel::FusionModel(FusionMode mode, const BackboneConfig& backbone_cfg,
                         const FusionConfig& fusion_cfg, std::size_t n_classes, std::uint64_t seed,
                         int hard_level)
    : mode_(mode),
      n_classes_(n_classes),
      hard_level_(hard_level),
      backbone_([&] {
          Rng rng(mix_seed(seed, 0x6d6f646c));
          return Backbone(backbone_cfg, rng);
      }()),
      fusion_([&] {
          Rng rng(mix_seed(seed, 0x66757365));
          return FusionParams(backbone_cfg.channels, fusion_cfg, rng);
      }()),
      head_([&] {
          Rng rng(mix_seed(seed, 0x68656164));
          return Conv2dLayer(backbone_cfg.channels[2], n_classes, 1, 1, 0, rng);
      }()) {
    if (n_classes == 0) throw std::invalid_argument("model needs at least one class channel");
    if (mode == FusionMode::kHard && (hard_level < 1 || hard_level > 3)) {
        throw std::invalid_argument("hard attention level must be 1, 2, or 3");
    }
}

FusionModel::Output FusionModel::forward(const Tensor& images) const {
    const FeatureLevels levels = backbone_.forward(images);
    AttentionWeights weights = mode_ == FusionMode::kSoft ? fusion_.soft_attention_weights(levels)
                               : mode_ == FusionMode::kMrae ? fusion_.mrae_weights(levels)
                                                            : one_hot_weights(hard_level_);
    weights.validate();
    const AttentionMap fused = fusion_.fuse(levels, weights);
    return {std::move(weights), head_.forward(fused.map)};
}

ParamList FusionModel::trainable_params() const {
    ParamList params;
    backbone_.register_into(params, "backbone");
    switch (mode_) {
        case FusionMode::kSoft:
            fusion_.register_soft_into(params, "fusion");
            fusion_.register_align_into(params, "fusion");
            break;
        case FusionMode::kMrae:
            fusion_.register_mrae_into(params, "fusion");
            fusion_.register_align_into(params, "fusion");
            break;
        case FusionMode::kHard:
            // Alignment stays in the graph with exactly-zero gradients.
            fusion_.register_align_into(params, "fusion");
            break;
    }
    head_.register_into(params, "head");
    return params;
}

ParamList FusionModel::all_params() const {
    ParamList params;
    backbone_.register_into(params, "backbone");
    fusion_.register_into(params, "fusion");
    head_.register_into(params, "head");
    return params;
}

Tensor render_heatmap_targets(const std::vector<std::vector<SyntheticTarget>>& targets,
                              std::size_t n_classes, std::size_t grid_h, std::size_t grid_w,
                              double sigma, double stride) {
    if (n_classes == 0 || grid_h == 0 || grid_w == 0) {
        throw std::invalid_argument("heatmap grid and class count must be positive");
    }
    if (!(sigma > 0) || !(stride > 0)) {
        throw std::invalid_argument("heatmap sigma and stride must be positive");
    }
    Tensor field = Tensor::zeros({targets.size(), n_classes, grid_h, grid_w});
    auto data = field.mutable_data();
    const double denom = 2.0 * sigma * sigma;
    for (std::size_t n = 0; n < targets.size(); ++n) {
        for (const auto& t : targets[n]) {
            if (t.class_id >= n_classes) {
                throw DataError("target class " + std::to_string(t.class_id) +
                                " outside the " + std::to_string(n_classes) + "-channel heatmap");
            }
            const double gx = t.cx / stride;
            const double gy = t.cy / stride;
            if (gx < 0 || gy < 0 || gx >= static_cast<double>(grid_w) ||
                gy >= static_cast<double>(grid_h)) {
                throw DataError("target center (" + format_full(t.cx) + ", " + format_full(t.cy) +
                                ") falls outside the " + std::to_string(grid_w) + "x" +
                                std::to_string(grid_h) + " heatmap grid");
            }
            const std::size_t base = (n * n_classes + t.class_id) * grid_h * grid_w;
            for (std::size_t i = 0; i < grid_h; ++i) {
                for (std::size_t j = 0; j < grid_w; ++j) {
                    const double dy = static_cast<double>(i) - gy;
                    const double dx = static_cast<double>(j) - gx;
                    const double bump = std::exp(-(dx * dx + dy * dy) / denom);
                    double& cell = data[base + i * grid_w + j];
                    cell = std::max(cell, bump);
                }
            }
        }
    }
    return field;
}

Tensor heatmap_loss(const Tensor& pred, const std::vector<std::vector<SyntheticTarget>>& targets,
                    double sigma) {
    if (pred.rank() != 4) throw ShapeError("heatmap_loss expects [N,K,H,W], got " + shape_str(pred.shape()));
    const Shape& s = pred.shape();
    if (targets.size() != s[0]) {
        throw ShapeError("heatmap_loss: " + std::to_string(targets.size()) +
                         " target rows for a batch of " + std::to_string(s[0]));
    }
    const Tensor field = render_heatmap_targets(targets, s[1], s[2], s[3], sigma);
    return mse_loss(pred, field);
}

std::pair<std::size_t, std::size_t> count_heatmap_hits(
    const Tensor& heatmaps, const std::vector<std::vector<SyntheticTarget>>& targets) {
    if (heatmaps.rank() != 4) throw ShapeError("count_heatmap_hits expects [N,K,H,W]");
    const Shape& s = heatmaps.shape();
    if (targets.size() != s[0]) throw ShapeError("count_heatmap_hits: batch size mismatch");
    const std::size_t hw = s[2] * s[3];
    std::size_t hits = 0, total = 0;
    for (std::size_t n = 0; n < targets.size(); ++n) {
        for (const auto& t : targets[n]) {
            if (t.class_id >= s[1]) throw DataError("target class outside heatmap channels");
            const auto chan = heatmaps.data().subspan((n * s[1] + t.class_id) * hw, hw);
            std::size_t best = 0;
            for (std::size_t i = 1; i < hw; ++i) {
                if (chan[i] > chan[best]) best = i;  // first occurrence wins ties
            }
            const auto bi = static_cast<double>(best / s[3]);
            const auto bj = static_cast<double>(best % s[3]);
            const double ti = std::floor(t.cy / kHeatmapStride);
            const double tj = std::floor(t.cx / kHeatmapStride);
            ++total;
            if (std::abs(bi - ti) <= 1.0 && std::abs(bj - tj) <= 1.0) ++hits;
        }
    }
    return {hits, total};
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(seed, 0x45504f43 + epoch));
    for (std::size_t i = n; i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(order[i - 1], order[j]);
    }
    return order;
}

namespace {

int resolve_hard_level(const TrainConfig& cfg) {
    if (cfg.fusion != FusionMode::kHard) return 1;
    const HardLevel spec = cfg.hard_level.value_or(HardLevel{});
    return spec.random ? random_level(cfg.seed) : spec.level;
}

FusionConfig fusion_config_of(const TrainConfig& cfg) {
    FusionConfig fcfg;
    fcfg.d_embed = cfg.d_embed;
    fcfg.template_level = cfg.template_level.value_or(1);
    fcfg.interp = cfg.interp;
    return fcfg;
}

std::string param_norm_digest(const ParamList& params) {
    double backbone = 0, fusion = 0, head = 0;
    for (const auto& p : params.items()) {
        double sq = 0;
        for (const double v : p.tensor.data()) sq += v * v;
        if (p.name.starts_with("backbone")) backbone += sq;
        else if (p.name.starts_with("fusion")) fusion += sq;
        else head += sq;
    }
    return "parameter norms: backbone=" + format_full(std::sqrt(backbone)) +
           " fusion=" + format_full(std::sqrt(fusion)) + " head=" + format_full(std::sqrt(head));
}

}  // namespace

Trainer::Trainer(const TrainConfig& config, const SyntheticDataset& dataset)
    : config_(config),
      dataset_(dataset),
      model_([&] {
          config.validate();
          if (dataset.samples.empty()) throw DataError("training dataset is empty");
          return FusionModel(config.fusion, config.backbone, fusion_config_of(config),
                             dataset.config.n_classes, config.seed, resolve_hard_level(config));
      }()),
      params_(model_.trainable_params()) {
    log_.reserve(config_.steps);
}

StepRecord Trainer::step_once() {
    if (done()) throw std::logic_error("training already finished");
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t t = next_step_;
    const std::size_t n = dataset_.samples.size();
    if (t % n == 0) order_ = epoch_order(n, config_.seed, t / n);

    if (config_.switch_template_at && t == config_.switch_template_at->step) {
        model_.fusion().set_template_level(config_.switch_template_at->new_template);
    }

    const std::size_t idx = order_[t % n];
    const Tensor image = stack_images(dataset_.samples, {idx});

    StepRecord rec;
    rec.step = t;
    try {
        const FusionModel::Output out = model_.forward(image);
        const Tensor loss = heatmap_loss(out.heatmap, {dataset_.samples[idx].targets});
        rec.loss = loss.item();
        if (!std::isfinite(rec.loss)) throw NumericError("loss is not finite");
        rec.weights = {out.weights.at(1), out.weights.at(2), out.weights.at(3)};
        loss.backward();
        const double lr = config_.lr_at(t);
        if (lr > 0) {
            if (!optimizer_) {
                optimizer_.emplace(params_.items(), lr, config_.momentum);
            } else {
                optimizer_->set_lr(lr);
            }
            optimizer_->step();
        }
    } catch (const NumericError& e) {
        throw NumericError("training aborted at step " + std::to_string(t) + ": " + e.what() +
                           "; " + param_norm_digest(params_));
    }
    params_.zero_grad();

    rec.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    log_.push_back(rec);
    ++next_step_;
    return rec;
}

void Trainer::run() {
    while (!done()) step_once();
}

TrainReport Trainer::finish() {
    TrainReport report;
    report.steps = log_;
    report.param_count = params_.total_elements();
    if (!log_.empty()) {
        const std::size_t tail = std::min<std::size_t>(100, log_.size());
        double sum = 0, ms = 0;
        for (std::size_t i = log_.size() - tail; i < log_.size(); ++i) sum += log_[i].loss;
        for (const auto& rec : log_) ms += rec.ms;
        report.final_loss = sum / static_cast<double>(tail);
        report.ms_per_step = ms / static_cast<double>(log_.size());
    } else {
        report.final_loss = std::numeric_limits<double>::quiet_NaN();
    }
    report.eval = evaluate(model_, dataset_);
    return report;
}

TrainReport train(const TrainConfig& config, const SyntheticDataset& dataset) {
    Trainer trainer(config, dataset);
    trainer.run();
    return trainer.finish();
}

EvalResult evaluate(const FusionModel& model, const SyntheticDataset& dataset) {
    if (dataset.samples.empty()) throw DataError("evaluation dataset is empty");
    EvalResult res;
    std::size_t hits = 0;
    std::array<double, 3> wsum{};
    for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
        const Tensor image = stack_images(dataset.samples, {i});
        const FusionModel::Output out = model.forward(image);
        const auto [h, t] = count_heatmap_hits(out.heatmap, {dataset.samples[i].targets});
        hits += h;
        res.n_targets += t;
        for (int l = 1; l <= 3; ++l) wsum[static_cast<std::size_t>(l - 1)] += out.weights.at(l);
    }
    if (res.n_targets == 0) {
        throw DataError("evaluation dataset has no targets to localize");
    }
    res.localization_score = static_cast<double>(hits) / static_cast<double>(res.n_targets);
    for (std::size_t l = 0; l < 3; ++l) {
        res.mean_weights[l] = wsum[l] / static_cast<double>(dataset.samples.size());
    }
    return res;
}

std::string report_to_csv(const TrainReport& report) {
    std::string out = "step,loss,a1,a2,a3\n";
    for (const auto& rec : report.steps) {
        out += std::to_string(rec.step) + "," + format_full(rec.loss) + "," +
               format_full(rec.weights[0]) + "," + format_full(rec.weights[1]) + "," +
               format_full(rec.weights[2]) + "\n";
    }
    return out;
}

std::string report_summary_json(const TrainReport& report, const TrainConfig& config) {
    nlohmann::json doc;
    doc["fusion"] = fusion_mode_name(config.fusion);
    if (config.template_level) {
        doc["template"] = *config.template_level;
    } else {
        doc["template"] = nullptr;
    }
    if (config.fusion == FusionMode::kHard) {
        const HardLevel spec = config.hard_level.value_or(HardLevel{});
        doc["hard_level"] = spec.random ? nlohmann::json("random") : nlohmann::json(spec.level);
    }
    if (config.switch_template_at) {
        doc["switch_template_at"] = {{"step", config.switch_template_at->step},
                                     {"new_template", config.switch_template_at->new_template}};
    }
    doc["steps"] = report.steps.size();
    doc["seed"] = config.seed;
    doc["param_count"] = report.param_count;
    if (std::isfinite(report.final_loss)) {
        doc["final_loss"] = report.final_loss;
    } else {
        doc["final_loss"] = nullptr;
    }
    doc["localization_score"] = report.eval.localization_score;
    doc["mean_weights"] = report.eval.mean_weights;
    doc["n_targets"] = report.eval.n_targets;
    return doc.dump(2) + "\n";
}

}  // namespace mrae
