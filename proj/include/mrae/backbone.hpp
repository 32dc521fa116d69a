#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "mrae/layers.hpp"
#include "mrae/rng.hpp"
#include "mrae/tensor.hpp"

namespace mrae {

struct BackboneConfig {
    std::array<std::size_t, 3> channels{16, 32, 64};
    std::array<int, 3> blocks_per_level{1, 1, 1};
    std::uint64_t seed = 0;

    void validate() const;

    static BackboneConfig toy() { return {}; }
    /// Full-width preset with realistic channel ratios (256, 512, 1024).
    static BackboneConfig wide() {
        BackboneConfig cfg;
        cfg.channels = {256, 512, 1024};
        return cfg;
    }
};

/// Key-value text file with keys: channels (three comma-separated ints),
/// blocks_per_level (same), seed. '#' starts a comment.
BackboneConfig parse_backbone_config(const std::filesystem::path& path);

/// Three feature maps at strides 4, 8, 16 relative to the input image.
struct FeatureLevels {
    Tensor f1, f2, f3;
};

/// Stem (7x7 stride-2 conv, relu, 3x3 stride-2 max pool) followed by three
/// groups of 3x3 conv+relu blocks; the first conv of groups 2 and 3 has
/// stride 2 and raises the channel count.
class Backbone {
public:
    Backbone(const BackboneConfig& cfg, Rng& rng);

    FeatureLevels forward(const Tensor& image) const;
    void register_into(ParamList& params, const std::string& prefix) const;
    const BackboneConfig& config() const { return cfg_; }

private:
    BackboneConfig cfg_;
    Conv2dLayer stem_;
    std::array<std::vector<Conv2dLayer>, 3> levels_;
};

const Tensor& select_level(const FeatureLevels& levels, int i);

/// Deterministic level draw in {1,2,3} for randomized single-level baselines.
int random_level(std::uint64_t seed);

}  // namespace mrae
