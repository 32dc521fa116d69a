#include "mrae/backbone.hpp"

#include <algorithm>
#include <sstream>
#include <string>

#include "mrae/io.hpp"

namespace mrae {

void BackboneConfig::validate() const {
    if (!(channels[0] < channels[1] && channels[1] < channels[2])) {
        throw std::invalid_argument("backbone config: channels must be strictly increasing");
    }
    for (const int b : blocks_per_level) {
        if (b < 1) throw std::invalid_argument("backbone config: blocks_per_level must be >= 1");
    }
}

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

template <typename T, std::size_t N>
std::array<T, N> parse_triple(const std::string& value, const std::string& context) {
    std::array<T, N> out{};
    std::stringstream ss(value);
    std::string item;
    std::size_t i = 0;
    while (std::getline(ss, item, ',')) {
        if (i >= N) throw DataError(context + ": expected " + std::to_string(N) + " values");
        try {
            const long long parsed = std::stoll(trim(item));
            if (parsed < 0) throw DataError(context + ": negative value");
            out[i++] = static_cast<T>(parsed);
        } catch (const std::logic_error&) {
            throw DataError(context + ": cannot parse '" + trim(item) + "' as an integer");
        }
    }
    if (i != N) throw DataError(context + ": expected " + std::to_string(N) + " values");
    return out;
}

}  // namespace

BackboneConfig parse_backbone_config(const std::filesystem::path& path) {
    const std::string text = read_text(path);
    BackboneConfig cfg;
    std::stringstream lines(text);
    std::string line;
    int lineno = 0;
    while (std::getline(lines, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        const std::string where = path.string() + ":" + std::to_string(lineno);
        if (eq == std::string::npos) {
            throw DataError(where + ": expected 'key = value', got '" + line + "'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key == "channels") {
            cfg.channels = parse_triple<std::size_t, 3>(value, where + " (channels)");
        } else if (key == "blocks_per_level") {
            cfg.blocks_per_level = parse_triple<int, 3>(value, where + " (blocks_per_level)");
        } else if (key == "seed") {
            try {
                cfg.seed = std::stoull(value);
            } catch (const std::logic_error&) {
                throw DataError(where + ": cannot parse seed '" + value + "'");
            }
        } else {
            throw DataError(where + ": unknown key '" + key +
                            "' (known: channels, blocks_per_level, seed)");
        }
    }
    cfg.validate();
    return cfg;
}

Backbone::Backbone(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    stem_ = Conv2dLayer(3, cfg_.channels[0], 7, 2, 3, rng);
    for (int lvl = 0; lvl < 3; ++lvl) {
        std::size_t cin = lvl == 0 ? cfg_.channels[0] : cfg_.channels[lvl - 1];
        const std::size_t cout = cfg_.channels[lvl];
        for (int b = 0; b < cfg_.blocks_per_level[lvl]; ++b) {
            // First conv of levels 2 and 3 downsamples.
            const int stride = (b == 0 && lvl > 0) ? 2 : 1;
            levels_[lvl].emplace_back(cin, cout, 3, stride, 1, rng);
            cin = cout;
        }
    }
}

FeatureLevels Backbone::forward(const Tensor& image) const {
    if (image.rank() != 4 || image.shape()[1] != 3) {
        throw ShapeError("backbone: expected [N,3,H,W] input, got " + shape_str(image.shape()));
    }
    const std::size_t h = image.shape()[2], w = image.shape()[3];
    if (h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0) {
        throw ShapeError("backbone: input extents must be positive multiples of 16, got " +
                         std::to_string(h) + "x" + std::to_string(w));
    }
    Tensor x = mrae::max_pool2d(mrae::relu(stem_.forward(image)), 3, 2, 1);
    FeatureLevels out;
    for (int lvl = 0; lvl < 3; ++lvl) {
        for (const auto& block : levels_[lvl]) {
            x = mrae::relu(block.forward(x));
        }
        (lvl == 0 ? out.f1 : lvl == 1 ? out.f2 : out.f3) = x;
    }
    return out;
}

void Backbone::register_into(ParamList& params, const std::string& prefix) const {
    stem_.register_into(params, prefix + ".stem");
    for (int lvl = 0; lvl < 3; ++lvl) {
        for (std::size_t b = 0; b < levels_[lvl].size(); ++b) {
            levels_[lvl][b].register_into(params, prefix + ".level" + std::to_string(lvl + 1) +
                                                      ".block" + std::to_string(b));
        }
    }
}

const Tensor& select_level(const FeatureLevels& levels, int i) {
    switch (i) {
        case 1:
            return levels.f1;
        case 2:
            return levels.f2;
        case 3:
            return levels.f3;
        default:
            throw std::invalid_argument("select_level: level " + std::to_string(i) +
                                        " out of range 1..3");
    }
}

int random_level(std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x4c45564cull));  // "LEVL"
    return static_cast<int>(rng.uniform_int(1, 3));
}

}  // namespace mrae
