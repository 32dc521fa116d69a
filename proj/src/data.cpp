#include "mrae/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include <json.hpp>

namespace mrae {

namespace {

using nlohmann::json;

[[noreturn]] void parse_fail(const std::string& source, const std::string& path,
                             const std::string& what) {
    throw DataError(source + ": " + path + ": " + what);
}

const json& require_key(const json& obj, const char* key, const std::string& source,
                        const std::string& path) {
    if (!obj.is_object()) parse_fail(source, path, "expected an object");
    const auto it = obj.find(key);
    if (it == obj.end()) parse_fail(source, path, std::string("missing required key '") + key + "'");
    return *it;
}

std::int64_t as_int(const json& v, const std::string& source, const std::string& path) {
    if (!v.is_number_integer() && !v.is_number_unsigned()) {
        parse_fail(source, path, "expected an integer");
    }
    return v.get<std::int64_t>();
}

double as_number(const json& v, const std::string& source, const std::string& path) {
    if (!v.is_number()) parse_fail(source, path, "expected a number");
    return v.get<double>();
}

std::string as_string(const json& v, const std::string& source, const std::string& path) {
    if (!v.is_string()) parse_fail(source, path, "expected a string");
    return v.get<std::string>();
}

std::string idx(const std::string& base, std::size_t i) {
    return base + "[" + std::to_string(i) + "]";
}

}  // namespace

CocoDataset parse_coco_text(const std::string& text, const std::string& source_name) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw DataError(source_name + ": malformed JSON: " + e.what());
    }
    if (!doc.is_object()) parse_fail(source_name, "$", "top level must be an object");

    CocoDataset out;

    const json& images = require_key(doc, "images", source_name, "$");
    if (!images.is_array()) parse_fail(source_name, "$.images", "expected an array");
    std::unordered_map<std::int64_t, const ImageRecord*> by_id;
    out.images.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
        const std::string path = idx("$.images", i);
        const json& rec = images[i];
        ImageRecord img;
        img.id = as_int(require_key(rec, "id", source_name, path), source_name, path + ".id");
        if (const auto it = rec.find("file_name"); it != rec.end()) {
            img.file_name = as_string(*it, source_name, path + ".file_name");
        }
        if (const auto it = rec.find("width"); it != rec.end()) {
            img.width = as_int(*it, source_name, path + ".width");
        }
        if (const auto it = rec.find("height"); it != rec.end()) {
            img.height = as_int(*it, source_name, path + ".height");
        }
        if (img.width < 0 || img.height < 0) parse_fail(source_name, path, "negative image extent");
        out.images.push_back(img);
    }
    for (const auto& img : out.images) {
        if (!by_id.emplace(img.id, &img).second) {
            parse_fail(source_name, "$.images", "duplicate image id " + std::to_string(img.id));
        }
    }

    const json& anns = require_key(doc, "annotations", source_name, "$");
    if (!anns.is_array()) parse_fail(source_name, "$.annotations", "expected an array");
    out.annotations.reserve(anns.size());
    for (std::size_t i = 0; i < anns.size(); ++i) {
        const std::string path = idx("$.annotations", i);
        const json& rec = anns[i];
        Annotation ann;
        if (const auto it = rec.find("id"); it != rec.end()) {
            ann.id = as_int(*it, source_name, path + ".id");
        } else {
            ann.id = static_cast<std::int64_t>(i);
        }
        ann.image_id =
            as_int(require_key(rec, "image_id", source_name, path), source_name, path + ".image_id");
        ann.category_id = as_int(require_key(rec, "category_id", source_name, path), source_name,
                                 path + ".category_id");
        const json& bbox = require_key(rec, "bbox", source_name, path);
        if (!bbox.is_array() || bbox.size() != 4) {
            parse_fail(source_name, path + ".bbox", "expected an array of 4 numbers");
        }
        for (std::size_t j = 0; j < 4; ++j) {
            ann.bbox[j] = as_number(bbox[j], source_name, idx(path + ".bbox", j));
            if (!std::isfinite(ann.bbox[j])) {
                parse_fail(source_name, idx(path + ".bbox", j), "non-finite value");
            }
        }
        const double w = ann.bbox[2], h = ann.bbox[3];
        if (w <= 0 || h <= 0) {
            parse_fail(source_name, path + ".bbox", "box width and height must be positive");
        }
        ann.area = w * h;  // never trusted from the file
        if (const auto it = by_id.find(ann.image_id); it != by_id.end()) {
            const ImageRecord& img = *it->second;
            if (img.width > 0 && img.height > 0) {
                const double x = ann.bbox[0], y = ann.bbox[1];
                if (x < 0 || y < 0 || x + w > static_cast<double>(img.width) ||
                    y + h > static_cast<double>(img.height)) {
                    parse_fail(source_name, path + ".bbox",
                               "box extends outside image " + std::to_string(img.id));
                }
            }
        }
        out.annotations.push_back(ann);
    }

    const json& cats = require_key(doc, "categories", source_name, "$");
    if (!cats.is_array()) parse_fail(source_name, "$.categories", "expected an array");
    out.categories.reserve(cats.size());
    for (std::size_t i = 0; i < cats.size(); ++i) {
        const std::string path = idx("$.categories", i);
        Category cat;
        cat.id = as_int(require_key(cats[i], "id", source_name, path), source_name, path + ".id");
        if (const auto it = cats[i].find("name"); it != cats[i].end()) {
            cat.name = as_string(*it, source_name, path + ".name");
        }
        out.categories.push_back(std::move(cat));
    }
    return out;
}

CocoDataset parse_coco(const std::filesystem::path& path) {
    return parse_coco_text(read_text(path), path.string());
}

std::string emit_coco(const CocoDataset& dataset) {
    json doc;
    doc["images"] = json::array();
    for (const auto& img : dataset.images) {
        json rec{{"id", img.id}, {"file_name", img.file_name}};
        if (img.width > 0) rec["width"] = img.width;
        if (img.height > 0) rec["height"] = img.height;
        doc["images"].push_back(std::move(rec));
    }
    doc["annotations"] = json::array();
    for (const auto& ann : dataset.annotations) {
        doc["annotations"].push_back(json{{"id", ann.id},
                                          {"image_id", ann.image_id},
                                          {"category_id", ann.category_id},
                                          {"bbox", ann.bbox},
                                          {"area", ann.area}});
    }
    doc["categories"] = json::array();
    for (const auto& cat : dataset.categories) {
        doc["categories"].push_back(json{{"id", cat.id}, {"name", cat.name}});
    }
    return doc.dump(2) + "\n";
}

CocoDataset filter_small(const CocoDataset& dataset, double max_area) {
    CocoDataset out;
    out.categories = dataset.categories;
    std::set<std::int64_t> live_images;
    for (const auto& ann : dataset.annotations) {
        if (ann.area < max_area) {
            out.annotations.push_back(ann);
            live_images.insert(ann.image_id);
        }
    }
    for (const auto& img : dataset.images) {
        if (live_images.contains(img.id)) out.images.push_back(img);
    }
    return out;
}

KMeansResult kmeans_1d(std::vector<double> points, std::size_t k, std::uint64_t seed,
                       std::size_t max_iters) {
    if (k == 0) throw std::invalid_argument("kmeans_1d: k must be positive");
    if (points.size() < k) {
        throw std::invalid_argument("kmeans_1d: need at least " + std::to_string(k) +
                                    " points, got " + std::to_string(points.size()));
    }
    for (const double p : points) {
        if (!std::isfinite(p)) throw std::invalid_argument("kmeans_1d: non-finite point");
    }
    std::sort(points.begin(), points.end());
    const std::size_t n = points.size();
    const double range = points.back() - points.front();

    KMeansResult res;
    res.centers.resize(k);
    if (range == 0.0) {
        // Every point identical: the only centroid is that value.
        std::fill(res.centers.begin(), res.centers.end(), points.front());
        res.wcss_trace.push_back(0.0);
        res.degenerate = true;
        return res;
    }

    // Quantile-spread initialization on the sorted sample.
    for (std::size_t i = 0; i < k; ++i) {
        const double pos = (static_cast<double>(i) + 0.5) / static_cast<double>(k) *
                           static_cast<double>(n - 1);
        const auto lo = static_cast<std::size_t>(pos);
        const std::size_t hi = std::min(lo + 1, n - 1);
        const double frac = pos - static_cast<double>(lo);
        res.centers[i] = points[lo] + frac * (points[hi] - points[lo]);
    }
    // Heavy duplicate mass can collapse quantiles onto one value; a seeded
    // jitter far below data resolution breaks those ties deterministically.
    if (std::adjacent_find(res.centers.begin(), res.centers.end()) != res.centers.end()) {
        Rng rng(mix_seed(seed, 0x6b6d6e73));
        for (auto& c : res.centers) c += rng.uniform(-1.0, 1.0) * range * 1e-9;
        std::sort(res.centers.begin(), res.centers.end());
    }

    std::vector<std::size_t> assign(n, 0), prev(n, k);
    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double best_d = std::abs(points[i] - res.centers[0]);
            for (std::size_t c = 1; c < k; ++c) {
                const double d = std::abs(points[i] - res.centers[c]);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            assign[i] = best;
        }
        std::vector<double> sum(k, 0.0);
        std::vector<std::size_t> cnt(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            sum[assign[i]] += points[i];
            ++cnt[assign[i]];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (cnt[c] > 0) res.centers[c] = sum[c] / static_cast<double>(cnt[c]);
            // An empty cluster keeps its previous center.
        }
        double wcss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = points[i] - res.centers[assign[i]];
            wcss += d * d;
        }
        res.wcss_trace.push_back(wcss);
        res.iterations = iter + 1;
        if (assign == prev) break;
        prev = assign;
    }

    std::sort(res.centers.begin(), res.centers.end());
    res.degenerate =
        std::adjacent_find(res.centers.begin(), res.centers.end()) != res.centers.end();
    return res;
}

AnchorSet cluster_anchors(const std::vector<Annotation>& annotations, std::uint64_t seed,
                          std::size_t n_scales, std::size_t n_ratios) {
    if (n_scales == 0 || n_ratios == 0) {
        throw std::invalid_argument("cluster_anchors: cluster counts must be positive");
    }
    if (annotations.size() < std::max(n_scales, n_ratios)) {
        throw std::invalid_argument("cluster_anchors: need at least " +
                                    std::to_string(std::max(n_scales, n_ratios)) +
                                    " annotations, got " + std::to_string(annotations.size()));
    }
    std::vector<double> scales, ratios;
    scales.reserve(annotations.size());
    ratios.reserve(annotations.size());
    for (const auto& ann : annotations) {
        scales.push_back(std::sqrt(ann.bbox[2] * ann.bbox[3]));
        ratios.push_back(ann.bbox[2] / ann.bbox[3]);
    }
    const KMeansResult ks = kmeans_1d(std::move(scales), n_scales, mix_seed(seed, 1));
    const KMeansResult kr = kmeans_1d(std::move(ratios), n_ratios, mix_seed(seed, 2));
    AnchorSet out;
    out.scales = ks.centers;
    out.ratios = kr.centers;
    out.degenerate = ks.degenerate || kr.degenerate;
    return out;
}

std::string anchors_to_csv(const AnchorSet& anchors) {
    std::string out = "kind,index,value\n";
    for (std::size_t i = 0; i < anchors.scales.size(); ++i) {
        out += "scale," + std::to_string(i) + "," + format_full(anchors.scales[i]) + "\n";
    }
    for (std::size_t i = 0; i < anchors.ratios.size(); ++i) {
        out += "ratio," + std::to_string(i) + "," + format_full(anchors.ratios[i]) + "\n";
    }
    return out;
}

std::string anchors_to_json(const AnchorSet& anchors) {
    json doc{{"scales", anchors.scales},
             {"ratios", anchors.ratios},
             {"degenerate", anchors.degenerate}};
    return doc.dump(2) + "\n";
}

SizeHistogram size_histogram(const std::vector<Annotation>& annotations, double bin_width) {
    if (!(bin_width > 0) || !std::isfinite(bin_width)) {
        throw std::invalid_argument("size_histogram: bin width must be positive");
    }
    std::map<std::pair<std::int64_t, std::int64_t>, std::size_t> counts;
    for (const auto& ann : annotations) {
        const auto wb = static_cast<std::int64_t>(std::floor(ann.bbox[2] / bin_width));
        const auto hb = static_cast<std::int64_t>(std::floor(ann.bbox[3] / bin_width));
        ++counts[{wb, hb}];
    }
    SizeHistogram hist;
    hist.bin_width = bin_width;
    hist.cells.reserve(counts.size());
    for (const auto& [key, count] : counts) {
        hist.cells.push_back({static_cast<double>(key.first) * bin_width,
                              static_cast<double>(key.second) * bin_width, count});
    }
    return hist;
}

std::string histogram_to_csv(const SizeHistogram& histogram) {
    std::string out = "w_bin,h_bin,count\n";
    for (const auto& cell : histogram.cells) {
        out += format_full(cell.w_lo) + "," + format_full(cell.h_lo) + "," +
               std::to_string(cell.count) + "\n";
    }
    return out;
}

void SyntheticConfig::validate() const {
    if (image_size == 0) throw std::invalid_argument("synthetic config: image_size must be positive");
    if (max_obj_size < 2) {
        throw std::invalid_argument("synthetic config: max_obj_size must be at least 2");
    }
    if (max_obj_size > image_size / 8) {
        throw std::invalid_argument("synthetic config: max_obj_size " +
                                    std::to_string(max_obj_size) + " exceeds image_size/8 = " +
                                    std::to_string(image_size / 8));
    }
    if (n_classes == 0) throw std::invalid_argument("synthetic config: n_classes must be positive");
    if (!(noise_std >= 0) || !std::isfinite(noise_std)) {
        throw std::invalid_argument("synthetic config: noise_std must be finite and non-negative");
    }
}

namespace {

// Stable per-class color, independent of the dataset seed so that class k
// looks the same in every generated dataset.
std::array<double, 3> class_color(std::size_t class_id) {
    Rng rng(mix_seed(0x70616c65, class_id));
    return {rng.uniform(0.35, 1.0), rng.uniform(0.35, 1.0), rng.uniform(0.35, 1.0)};
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticConfig& config) {
    config.validate();
    const std::size_t hw = config.image_size;

    std::vector<std::array<double, 3>> palette(config.n_classes);
    for (std::size_t c = 0; c < config.n_classes; ++c) palette[c] = class_color(c);

    SyntheticDataset out;
    out.config = config;
    out.samples.reserve(config.n_images);
    for (std::size_t index = 0; index < config.n_images; ++index) {
        Rng rng(mix_seed(config.seed, index));
        SyntheticSample sample{Tensor::zeros({3, hw, hw}), {}};
        auto px = sample.image.mutable_data();
        for (auto& v : px) v = config.noise_std * rng.uniform();

        sample.targets.reserve(config.objects_per_image);
        for (std::size_t obj = 0; obj < config.objects_per_image; ++obj) {
            const auto class_id =
                static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(config.n_classes) - 1));
            const auto size = static_cast<std::size_t>(
                rng.uniform_int(2, static_cast<std::int64_t>(config.max_obj_size)));
            const auto x0 = static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(hw - size)));
            const auto y0 = static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(hw - size)));

            const bool circle = class_id % 2 == 1;
            const double r = static_cast<double>(size) / 2.0;
            const double ccx = static_cast<double>(x0) + (static_cast<double>(size) - 1) / 2.0;
            const double ccy = static_cast<double>(y0) + (static_cast<double>(size) - 1) / 2.0;
            for (std::size_t y = y0; y < y0 + size; ++y) {
                for (std::size_t x = x0; x < x0 + size; ++x) {
                    if (circle) {
                        const double dx = static_cast<double>(x) - ccx;
                        const double dy = static_cast<double>(y) - ccy;
                        if (dx * dx + dy * dy > r * r) continue;
                    }
                    for (std::size_t ch = 0; ch < 3; ++ch) {
                        px[(ch * hw + y) * hw + x] = palette[class_id][ch];
                    }
                }
            }
            sample.targets.push_back({static_cast<double>(x0) + r, static_cast<double>(y0) + r,
                                      size, class_id});
        }
        out.samples.push_back(std::move(sample));
    }
    return out;
}

Tensor stack_images(const std::vector<SyntheticSample>& samples,
                    const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw std::invalid_argument("stack_images: empty selection");
    const Shape& single = samples.at(indices[0]).image.shape();
    Tensor batch = Tensor::zeros({indices.size(), single[0], single[1], single[2]});
    auto dst = batch.mutable_data();
    const std::size_t stride = samples.at(indices[0]).image.size();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const Tensor& img = samples.at(indices[i]).image;
        if (img.shape() != single) throw ShapeError("stack_images: mismatched sample shapes");
        std::copy(img.data().begin(), img.data().end(), dst.begin() + static_cast<std::ptrdiff_t>(i * stride));
    }
    return batch;
}

}  // namespace mrae
