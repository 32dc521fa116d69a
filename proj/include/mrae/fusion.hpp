#pragma once

#include <array>
#include <cstddef>

#include "mrae/backbone.hpp"
#include "mrae/layers.hpp"
#include "mrae/rng.hpp"
#include "mrae/tensor.hpp"

namespace mrae {

enum class FusionMode { kSoft, kMrae, kHard };

struct FusionConfig {
    std::size_t d_embed = 32;
    int template_level = 1;  // anchor level for the template path
    Interp interp = Interp::kBilinear;

    void validate() const;
};

/// Per-level mixing coefficients as a rank-1 length-3 tensor, so gradients
/// flow from the fused map back into the logit networks.
struct AttentionWeights {
    Tensor a;

    /// 1-based accessor matching level numbering.
    double at(int level) const;
    /// Shape [3], every entry in [0,1], sum within 1e-12 of 1. One-hot
    /// vectors pass; softmax outputs additionally land strictly inside (0,1).
    void validate() const;
};

AttentionWeights one_hot_weights(int level);

/// Fused feature map at f1 resolution with the deepest level's channels.
struct AttentionMap {
    Tensor map;
};

/// The three fusion strategies over FeatureLevels. All strategy heads are
/// constructed eagerly from one generator so that runs differing only in
/// strategy share identical initial weights elsewhere.
class FusionParams {
public:
    FusionParams(const std::array<std::size_t, 3>& channels, const FusionConfig& cfg, Rng& rng);

    // Per-level 1x1 conv to one channel, global max pool, batch mean.
    Tensor soft_logits(const FeatureLevels& levels) const;  // [3]
    AttentionWeights soft_attention_weights(const FeatureLevels& levels) const;

    // Per-level 1x1 conv, global average pool, fc, batch mean.
    std::array<Tensor, 3> embeddings(const FeatureLevels& levels) const;  // each [d_embed]
    /// Cosine similarities against the template's embedding; the template's
    /// own logit is the constant 1 and carries no gradient.
    Tensor similarity_logits(const std::array<Tensor, 3>& embeds) const;  // [3]
    AttentionWeights mrae_weights(const FeatureLevels& levels) const;

    /// Channel-aligns f1, f2 to the deepest width via 1x1 convs (f3 passes
    /// through), then upsamples f2 x2 and f3 x4. With apply_g false the 1x1
    /// convs are skipped, which is only well-formed when all levels already
    /// share the deepest channel count.
    std::array<Tensor, 3> align_and_upsample(const FeatureLevels& levels,
                                             bool apply_g = true) const;

    AttentionMap fuse(const FeatureLevels& levels, const AttentionWeights& weights,
                      bool apply_g = true) const;

    /// Single-level baseline: fuse with one-hot weights at `level`.
    AttentionMap hard_attention(const FeatureLevels& levels, int level) const;

    int template_level() const { return cfg_.template_level; }
    /// Mixed-training support: swaps the anchor level, touching no weights.
    void set_template_level(int level);

    const FusionConfig& config() const { return cfg_; }

    void register_into(ParamList& params, const std::string& prefix) const;
    void register_soft_into(ParamList& params, const std::string& prefix) const;
    void register_mrae_into(ParamList& params, const std::string& prefix) const;
    void register_align_into(ParamList& params, const std::string& prefix) const;

private:
    FusionConfig cfg_;
    std::array<std::size_t, 3> channels_;
    std::array<Conv2dLayer, 3> soft_convs_;   // c_i -> 1
    std::array<Conv2dLayer, 2> align_convs_;  // c_1 -> c_3, c_2 -> c_3
    std::array<Conv2dLayer, 3> embed_convs_;  // c_i -> d_embed
    std::array<LinearLayer, 3> embed_fcs_;    // d_embed -> d_embed
};

}  // namespace mrae
