#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mrae/io.hpp"
#include "mrae/rng.hpp"
#include "mrae/tensor.hpp"

namespace mrae {

// Bounding-box annotation in COCO instances layout. The stored area is always
// recomputed as w*h; the value in the source file is not trusted.
struct Annotation {
    std::int64_t id = 0;
    std::int64_t image_id = 0;
    std::int64_t category_id = 0;
    std::array<double, 4> bbox{};  // x, y, w, h in pixels
    double area = 0.0;
};

struct ImageRecord {
    std::int64_t id = 0;
    std::string file_name;
    std::int64_t width = 0;   // 0 when the file omits extents
    std::int64_t height = 0;
};

struct Category {
    std::int64_t id = 0;
    std::string name;
};

struct CocoDataset {
    std::vector<ImageRecord> images;
    std::vector<Annotation> annotations;
    std::vector<Category> categories;
};

// Parses a COCO instances JSON document. Unknown keys are ignored; missing or
// malformed required fields raise DataError naming the path into the document
// (e.g. "$.annotations[2].bbox"). Boxes are checked against image extents when
// the referenced image record carries them.
CocoDataset parse_coco(const std::filesystem::path& path);
CocoDataset parse_coco_text(const std::string& text, const std::string& source_name);

// Serializes back to COCO instances JSON. parse(emit(d)) == d field for field.
std::string emit_coco(const CocoDataset& dataset);

// Keeps annotations with area strictly below max_area and drops images left
// without any annotation. Categories pass through. Idempotent.
CocoDataset filter_small(const CocoDataset& dataset, double max_area = 1024.0);

struct KMeansResult {
    std::vector<double> centers;     // ascending
    std::vector<double> wcss_trace;  // within-cluster sum of squares per iteration
    std::size_t iterations = 0;
    bool degenerate = false;  // fewer distinct centers than requested clusters
};

// Lloyd's algorithm in one dimension. Centers start at evenly spread sample
// quantiles; the seed only feeds a tiny tie-breaking jitter when heavy
// duplicates make quantile centers coincide. Runs to an assignment fixpoint
// or max_iters. Order-invariant: points are sorted before clustering.
KMeansResult kmeans_1d(std::vector<double> points, std::size_t k, std::uint64_t seed,
                       std::size_t max_iters = 100);

struct AnchorSet {
    std::vector<double> scales;  // ascending side lengths, sqrt(w*h)
    std::vector<double> ratios;  // ascending aspect ratios, w/h
    bool degenerate = false;
};

// Clusters sqrt(w*h) into n_scales centers and w/h into n_ratios centers as
// two independent 1-D problems.
AnchorSet cluster_anchors(const std::vector<Annotation>& annotations, std::uint64_t seed,
                          std::size_t n_scales = 4, std::size_t n_ratios = 3);

std::string anchors_to_csv(const AnchorSet& anchors);
std::string anchors_to_json(const AnchorSet& anchors);

struct HistogramCell {
    double w_lo = 0.0;  // lower bin edges
    double h_lo = 0.0;
    std::size_t count = 0;
};

struct SizeHistogram {
    double bin_width = 0.0;
    std::vector<HistogramCell> cells;  // nonzero cells, sorted by (w_lo, h_lo)
};

SizeHistogram size_histogram(const std::vector<Annotation>& annotations, double bin_width);
std::string histogram_to_csv(const SizeHistogram& histogram);

struct SyntheticConfig {
    std::size_t n_images = 0;
    std::size_t image_size = 64;
    std::size_t max_obj_size = 8;  // must stay at or below image_size / 8
    std::size_t n_classes = 1;
    std::size_t objects_per_image = 0;
    double noise_std = 0.1;
    std::uint64_t seed = 0;

    void validate() const;
};

struct SyntheticTarget {
    double cx = 0.0;  // object center in pixels
    double cy = 0.0;
    std::size_t size = 0;  // square side or circle diameter
    std::size_t class_id = 0;
};

struct SyntheticSample {
    Tensor image;  // [3, H, W]
    std::vector<SyntheticTarget> targets;
};

struct SyntheticDataset {
    SyntheticConfig config;
    std::vector<SyntheticSample> samples;
};

// Seeded generator: uniform-noise background plus filled squares (even class
// ids) and circles (odd class ids) in per-class colors. Each image derives its
// own stream from (seed, index), so generation order cannot leak between
// samples. Targets record exact centers; every object lies fully inside.
SyntheticDataset generate_synthetic(const SyntheticConfig& config);

// Stacks the selected samples into one [N, 3, H, W] batch.
Tensor stack_images(const std::vector<SyntheticSample>& samples,
                    const std::vector<std::size_t>& indices);

}  // namespace mrae
