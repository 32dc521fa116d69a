#include "mrae/fusion.hpp"

#include <cmath>
#include <string>

namespace mrae {

namespace {

constexpr double kWeightSumTol = 1e-12;

void check_level_index(int level, const char* what) {
    if (level < 1 || level > 3) {
        throw std::invalid_argument(std::string(what) + ": level " + std::to_string(level) +
                                    " out of range 1..3");
    }
}

}  // namespace

void FusionConfig::validate() const {
    if (d_embed < 1) throw std::invalid_argument("fusion config: d_embed must be >= 1");
    check_level_index(template_level, "fusion config");
}

double AttentionWeights::at(int level) const {
    check_level_index(level, "attention weights");
    return a.data()[static_cast<std::size_t>(level - 1)];
}

void AttentionWeights::validate() const {
    if (a.shape() != Shape{3}) {
        throw ShapeError("attention weights: expected shape [3], got " + shape_str(a.shape()));
    }
    double sum = 0;
    for (const double v : a.data()) {
        if (v < 0.0 || v > 1.0) {
            throw NumericError("attention weights: value " + std::to_string(v) +
                               " outside [0,1]");
        }
        sum += v;
    }
    if (std::abs(sum - 1.0) > kWeightSumTol) {
        throw NumericError("attention weights: sum " + std::to_string(sum) + " is not 1");
    }
}

AttentionWeights one_hot_weights(int level) {
    check_level_index(level, "one_hot_weights");
    std::vector<double> v(3, 0.0);
    v[static_cast<std::size_t>(level - 1)] = 1.0;
    return AttentionWeights{Tensor::from_vector({3}, std::move(v))};
}

FusionParams::FusionParams(const std::array<std::size_t, 3>& channels, const FusionConfig& cfg,
                           Rng& rng)
    : cfg_(cfg), channels_(channels) {
    cfg_.validate();
    for (int i = 0; i < 3; ++i) {
        soft_convs_[i] = Conv2dLayer(channels_[i], 1, 1, 1, 0, rng);
    }
    for (int i = 0; i < 2; ++i) {
        align_convs_[i] = Conv2dLayer(channels_[i], channels_[2], 1, 1, 0, rng);
    }
    for (int i = 0; i < 3; ++i) {
        embed_convs_[i] = Conv2dLayer(channels_[i], cfg_.d_embed, 1, 1, 0, rng);
    }
    for (int i = 0; i < 3; ++i) {
        embed_fcs_[i] = LinearLayer(cfg_.d_embed, cfg_.d_embed, rng);
    }
}

Tensor FusionParams::soft_logits(const FeatureLevels& levels) const {
    std::vector<Tensor> scalars;
    scalars.reserve(3);
    const Tensor* maps[3] = {&levels.f1, &levels.f2, &levels.f3};
    for (int i = 0; i < 3; ++i) {
        const Tensor pooled = global_max_pool(soft_convs_[i].forward(*maps[i]));  // [N,1]
        scalars.push_back(index(mean_over_batch(pooled), 0));
    }
    return stack_scalars(scalars);
}

AttentionWeights FusionParams::soft_attention_weights(const FeatureLevels& levels) const {
    return AttentionWeights{softmax(soft_logits(levels))};
}

std::array<Tensor, 3> FusionParams::embeddings(const FeatureLevels& levels) const {
    std::array<Tensor, 3> out;
    const Tensor* maps[3] = {&levels.f1, &levels.f2, &levels.f3};
    for (int i = 0; i < 3; ++i) {
        const Tensor pooled = global_avg_pool(embed_convs_[i].forward(*maps[i]));  // [N,d]
        out[i] = mean_over_batch(embed_fcs_[i].forward(pooled));                   // [d]
    }
    return out;
}

Tensor FusionParams::similarity_logits(const std::array<Tensor, 3>& embeds) const {
    const int t = cfg_.template_level;
    std::vector<Tensor> logits;
    logits.reserve(3);
    for (int i = 1; i <= 3; ++i) {
        if (i == t) {
            // The template's logit is pinned to 1; no gradient path.
            logits.push_back(Tensor::scalar(1.0));
        } else {
            logits.push_back(cosine_similarity(embeds[static_cast<std::size_t>(t - 1)],
                                               embeds[static_cast<std::size_t>(i - 1)]));
        }
    }
    return stack_scalars(logits);
}

AttentionWeights FusionParams::mrae_weights(const FeatureLevels& levels) const {
    return AttentionWeights{softmax(similarity_logits(embeddings(levels)))};
}

std::array<Tensor, 3> FusionParams::align_and_upsample(const FeatureLevels& levels,
                                                       bool apply_g) const {
    Tensor a1, a2;
    if (apply_g) {
        a1 = align_convs_[0].forward(levels.f1);
        a2 = align_convs_[1].forward(levels.f2);
    } else {
        for (const Tensor* f : {&levels.f1, &levels.f2}) {
            if (f->shape()[1] != levels.f3.shape()[1]) {
                throw ShapeError(
                    "align_and_upsample: channel alignment disabled but level widths differ (" +
                    std::to_string(f->shape()[1]) + " vs " +
                    std::to_string(levels.f3.shape()[1]) + ")");
            }
        }
        a1 = levels.f1;
        a2 = levels.f2;
    }
    std::array<Tensor, 3> out{a1, upsample(a2, 2, cfg_.interp), upsample(levels.f3, 4, cfg_.interp)};
    for (const auto& u : out) {
        if (u.shape() != out[0].shape()) {
            throw ShapeError("align_and_upsample: levels disagree after alignment, " +
                             shape_str(u.shape()) + " vs " + shape_str(out[0].shape()));
        }
    }
    return out;
}

AttentionMap FusionParams::fuse(const FeatureLevels& levels, const AttentionWeights& weights,
                                bool apply_g) const {
    weights.validate();
    const std::array<Tensor, 3> aligned = align_and_upsample(levels, apply_g);
    Tensor acc = scale(aligned[0], index(weights.a, 0));
    acc = add(acc, scale(aligned[1], index(weights.a, 1)));
    acc = add(acc, scale(aligned[2], index(weights.a, 2)));
    return AttentionMap{acc};
}

AttentionMap FusionParams::hard_attention(const FeatureLevels& levels, int level) const {
    check_level_index(level, "hard_attention");
    return fuse(levels, one_hot_weights(level));
}

void FusionParams::set_template_level(int level) {
    check_level_index(level, "set_template_level");
    cfg_.template_level = level;
}

void FusionParams::register_soft_into(ParamList& params, const std::string& prefix) const {
    for (int i = 0; i < 3; ++i) {
        soft_convs_[i].register_into(params, prefix + ".soft" + std::to_string(i + 1));
    }
}

void FusionParams::register_align_into(ParamList& params, const std::string& prefix) const {
    for (int i = 0; i < 2; ++i) {
        align_convs_[i].register_into(params, prefix + ".align" + std::to_string(i + 1));
    }
}

void FusionParams::register_mrae_into(ParamList& params, const std::string& prefix) const {
    for (int i = 0; i < 3; ++i) {
        embed_convs_[i].register_into(params, prefix + ".embed" + std::to_string(i + 1));
        embed_fcs_[i].register_into(params, prefix + ".fc" + std::to_string(i + 1));
    }
}

void FusionParams::register_into(ParamList& params, const std::string& prefix) const {
    register_soft_into(params, prefix);
    register_align_into(params, prefix);
    register_mrae_into(params, prefix);
}

}  // namespace mrae
