#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <set>
#include <string>

#include "mrae/data.hpp"

using mrae::Annotation;
using mrae::CocoDataset;
using mrae::DataError;
using mrae::Rng;
using mrae::SyntheticConfig;
using mrae::SyntheticDataset;
using mrae::Tensor;

namespace {

std::string fixture_path(const std::string& name) {
    const char* dir = std::getenv("MRAE_FIXTURES");
    REQUIRE_MESSAGE(dir != nullptr, "MRAE_FIXTURES must point at tests/fixtures");
    return std::string(dir) + "/" + name;
}

Annotation box(std::int64_t id, std::int64_t image_id, double w, double h) {
    Annotation ann;
    ann.id = id;
    ann.image_id = image_id;
    ann.category_id = 1;
    ann.bbox = {0, 0, w, h};
    ann.area = w * h;
    return ann;
}

bool same_annotations(const std::vector<Annotation>& a, const std::vector<Annotation>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].id != b[i].id || a[i].image_id != b[i].image_id ||
            a[i].category_id != b[i].category_id || a[i].bbox != b[i].bbox ||
            a[i].area != b[i].area) {
            return false;
        }
    }
    return true;
}

}  // namespace

TEST_SUITE_BEGIN("coco parsing");

TEST_CASE("tiny fixture parses into typed records") {
    const CocoDataset d = mrae::parse_coco(fixture_path("coco_tiny.json"));
    REQUIRE(d.images.size() == 2);
    REQUIRE(d.annotations.size() == 3);
    REQUIRE(d.categories.size() == 2);
    CHECK(d.images[0].id == 7);
    CHECK(d.images[0].file_name == "a.jpg");
    CHECK(d.images[0].width == 64);
    CHECK(d.images[0].height == 48);
    CHECK(d.annotations[0].image_id == 7);
    CHECK(d.annotations[0].category_id == 2);
    CHECK(d.annotations[0].bbox == std::array<double, 4>{10, 20, 5, 8});
    CHECK(d.annotations[0].area == 40.0);  // recomputed, file claims 999
    CHECK(d.annotations[1].area == 50.0);  // 12.5 * 4, file has no area key
    CHECK(d.categories[1].name == "gadget");
}

TEST_CASE("empty annotations array is fine") {
    const CocoDataset d = mrae::parse_coco_text(
        R"({"images": [], "annotations": [], "categories": []})", "inline");
    CHECK(d.images.empty());
    CHECK(d.annotations.empty());
    CHECK(d.categories.empty());
}

TEST_CASE("errors name the path into the document") {
    using mrae::parse_coco_text;
    CHECK_THROWS_WITH_AS(parse_coco_text("{not json", "bad.json"),
                         doctest::Contains("bad.json: malformed JSON"), DataError);
    CHECK_THROWS_WITH_AS(parse_coco_text(R"({"annotations": [], "categories": []})", "f"),
                         doctest::Contains("missing required key 'images'"), DataError);
    CHECK_THROWS_WITH_AS(parse_coco_text(R"({"images": [], "categories": []})", "f"),
                         doctest::Contains("missing required key 'annotations'"), DataError);
    CHECK_THROWS_WITH_AS(parse_coco_text(R"({"images": [], "annotations": []})", "f"),
                         doctest::Contains("missing required key 'categories'"), DataError);
    CHECK_THROWS_WITH_AS(
        parse_coco_text(
            R"({"images": [], "annotations": [{"image_id": 1, "category_id": 1, "bbox": [1,2,3]}], "categories": []})",
            "f"),
        doctest::Contains("$.annotations[0].bbox"), DataError);
    CHECK_THROWS_WITH_AS(
        parse_coco_text(
            R"({"images": [], "annotations": [{"image_id": 1, "category_id": 1, "bbox": [1,2,"x",4]}], "categories": []})",
            "f"),
        doctest::Contains("$.annotations[0].bbox[2]"), DataError);
    CHECK_THROWS_WITH_AS(
        parse_coco_text(
            R"({"images": [], "annotations": [{"category_id": 1, "bbox": [1,2,3,4]}], "categories": []})",
            "f"),
        doctest::Contains("missing required key 'image_id'"), DataError);
    CHECK_THROWS_WITH_AS(
        parse_coco_text(
            R"({"images": [], "annotations": [{"image_id": 1, "category_id": 1, "bbox": [0,0,0,4]}], "categories": []})",
            "f"),
        doctest::Contains("must be positive"), DataError);
    CHECK_THROWS_WITH_AS(
        parse_coco_text(R"({"images": [{"id": 1}, {"id": 1}], "annotations": [], "categories": []})",
                        "f"),
        doctest::Contains("duplicate image id 1"), DataError);
    CHECK_THROWS_WITH_AS(mrae::parse_coco("/nonexistent/nowhere.json"),
                         doctest::Contains("nowhere.json"), DataError);
}

TEST_CASE("boxes are checked against image extents only when extents exist") {
    const char* outside =
        R"({"images": [{"id": 1, "width": 32, "height": 32}],
            "annotations": [{"image_id": 1, "category_id": 1, "bbox": [20, 0, 20, 10]}],
            "categories": []})";
    CHECK_THROWS_WITH_AS(mrae::parse_coco_text(outside, "f"),
                         doctest::Contains("outside image 1"), DataError);
    const char* no_extent =
        R"({"images": [{"id": 1}],
            "annotations": [{"image_id": 1, "category_id": 1, "bbox": [20, 0, 2000, 10]}],
            "categories": []})";
    CHECK(mrae::parse_coco_text(no_extent, "f").annotations.size() == 1);
}

TEST_CASE("annotation ids default to array position") {
    const CocoDataset d = mrae::parse_coco_text(
        R"({"images": [], "categories": [],
            "annotations": [{"image_id": 5, "category_id": 1, "bbox": [0,0,1,1]},
                            {"image_id": 5, "category_id": 1, "bbox": [0,0,2,2]}]})",
        "f");
    CHECK(d.annotations[0].id == 0);
    CHECK(d.annotations[1].id == 1);
}

TEST_SUITE_END();

TEST_SUITE_BEGIN("small-object filter");

TEST_CASE("six-annotation fixture keeps the four boxes under the area bound") {
    const CocoDataset d = mrae::parse_coco(fixture_path("coco_six.json"));
    REQUIRE(d.annotations.size() == 6);
    const CocoDataset kept = mrae::filter_small(d);
    REQUIRE(kept.annotations.size() == 4);
    std::set<std::int64_t> ids;
    for (const auto& ann : kept.annotations) ids.insert(ann.id);
    CHECK(ids == std::set<std::int64_t>{11, 12, 13, 16});
    // 31x33 = 1023 survives the strict bound, 32x32 = 1024 does not.
    CHECK(ids.contains(13));
    CHECK(!ids.contains(14));
    CHECK(kept.images.size() == 3);
    CHECK(kept.categories.size() == 2);
}

TEST_CASE("images without surviving annotations are dropped") {
    CocoDataset d;
    d.images = {{1, "a.jpg", 0, 0}, {2, "b.jpg", 0, 0}};
    d.annotations = {box(1, 1, 10, 10), box(2, 2, 40, 40)};
    const CocoDataset kept = mrae::filter_small(d);
    REQUIRE(kept.images.size() == 1);
    CHECK(kept.images[0].id == 1);
    CHECK(kept.annotations.size() == 1);
}

TEST_CASE("filtering is idempotent") {
    const CocoDataset d = mrae::parse_coco(fixture_path("coco_six.json"));
    const CocoDataset once = mrae::filter_small(d);
    const CocoDataset twice = mrae::filter_small(once);
    CHECK(mrae::emit_coco(once) == mrae::emit_coco(twice));
}

TEST_CASE("emitted subset re-parses and re-filters to the same multiset") {
    const CocoDataset d = mrae::parse_coco(fixture_path("coco_six.json"));
    const CocoDataset kept = mrae::filter_small(d);
    const CocoDataset reparsed = mrae::parse_coco_text(mrae::emit_coco(kept), "round-trip");
    CHECK(same_annotations(reparsed.annotations, kept.annotations));
    const CocoDataset refiltered = mrae::filter_small(reparsed);
    CHECK(same_annotations(refiltered.annotations, kept.annotations));
    REQUIRE(reparsed.images.size() == kept.images.size());
    for (std::size_t i = 0; i < kept.images.size(); ++i) {
        CHECK(reparsed.images[i].id == kept.images[i].id);
        CHECK(reparsed.images[i].file_name == kept.images[i].file_name);
    }
}

TEST_CASE("zero bound empties the dataset") {
    const CocoDataset d = mrae::parse_coco(fixture_path("coco_six.json"));
    const CocoDataset kept = mrae::filter_small(d, 0.0);
    CHECK(kept.annotations.empty());
    CHECK(kept.images.empty());
    CHECK(kept.categories.size() == 2);
}

TEST_SUITE_END();

TEST_SUITE_BEGIN("anchor clustering");

TEST_CASE("k equal to point count recovers the points exactly") {
    const auto res = mrae::kmeans_1d({24, 4, 16, 8}, 4, 123);
    CHECK(res.centers == std::vector<double>{4, 8, 16, 24});
    CHECK(!res.degenerate);
    REQUIRE(!res.wcss_trace.empty());
    CHECK(res.wcss_trace.back() == 0.0);
}

TEST_CASE("identical points give a repeated centroid and a warning flag") {
    const auto res = mrae::kmeans_1d({1.0, 1.0, 1.0, 1.0}, 3, 7);
    CHECK(res.centers == std::vector<double>{1.0, 1.0, 1.0});
    CHECK(res.degenerate);
}

TEST_CASE("heavy duplicates still separate when a far point exists") {
    const auto res = mrae::kmeans_1d({1, 1, 1, 1, 1, 1, 1, 1, 9}, 2, 11);
    REQUIRE(res.centers.size() == 2);
    CHECK(res.centers[0] == doctest::Approx(1.0));
    CHECK(res.centers[1] == doctest::Approx(9.0));
    CHECK(!res.degenerate);
}

TEST_CASE("k of one returns the mean") {
    const auto res = mrae::kmeans_1d({2, 4, 6}, 1, 0);
    REQUIRE(res.centers.size() == 1);
    CHECK(res.centers[0] == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("wcss never increases and order does not matter") {
    Rng rng(99);
    std::vector<double> points(200);
    for (auto& p : points) p = rng.uniform(1.0, 64.0);
    const auto res = mrae::kmeans_1d(points, 4, 5);
    REQUIRE(res.wcss_trace.size() >= 2);  // nontrivial run, not an instant fixpoint
    for (std::size_t i = 1; i < res.wcss_trace.size(); ++i) {
        CHECK(res.wcss_trace[i] <= res.wcss_trace[i - 1] + 1e-9);
    }
    std::vector<double> shuffled = points;
    for (std::size_t i = shuffled.size(); i > 1; --i) {
        std::swap(shuffled[i - 1],
                  shuffled[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    }
    const auto res2 = mrae::kmeans_1d(shuffled, 4, 5);
    CHECK(std::memcmp(res.centers.data(), res2.centers.data(), 4 * sizeof(double)) == 0);
}

TEST_CASE("invalid clustering inputs are rejected") {
    CHECK_THROWS_AS(mrae::kmeans_1d({1, 2}, 0, 0), std::invalid_argument);
    CHECK_THROWS_AS(mrae::kmeans_1d({1, 2}, 3, 0), std::invalid_argument);
    CHECK_THROWS_AS(mrae::kmeans_1d({1, std::nan("")}, 1, 0), std::invalid_argument);
}

TEST_CASE("anchors from square boxes recover scales exactly and flag flat ratios") {
    std::vector<Annotation> anns = {box(1, 1, 4, 4), box(2, 1, 8, 8), box(3, 1, 16, 16),
                                    box(4, 1, 24, 24)};
    const auto anchors = mrae::cluster_anchors(anns, 42);
    CHECK(anchors.scales == std::vector<double>{4, 8, 16, 24});
    CHECK(anchors.ratios == std::vector<double>{1, 1, 1});
    CHECK(anchors.degenerate);
}

TEST_CASE("anchor output shape, ordering, and determinism") {
    Rng rng(3);
    std::vector<Annotation> anns;
    for (int i = 0; i < 120; ++i) {
        anns.push_back(box(i, 1, rng.uniform(2.0, 40.0), rng.uniform(2.0, 40.0)));
    }
    const auto a = mrae::cluster_anchors(anns, 9);
    const auto b = mrae::cluster_anchors(anns, 9);
    REQUIRE(a.scales.size() == 4);
    REQUIRE(a.ratios.size() == 3);
    CHECK(std::is_sorted(a.scales.begin(), a.scales.end()));
    CHECK(std::is_sorted(a.ratios.begin(), a.ratios.end()));
    for (const double s : a.scales) CHECK(s > 0);
    for (const double r : a.ratios) CHECK(r > 0);
    CHECK(a.scales == b.scales);
    CHECK(a.ratios == b.ratios);
    CHECK(!a.degenerate);
    CHECK_THROWS_AS(mrae::cluster_anchors({box(1, 1, 2, 2)}, 0), std::invalid_argument);
}

TEST_CASE("anchor serialization carries full precision") {
    mrae::AnchorSet set;
    set.scales = {4.000000000000001, 8, 16, 24};
    set.ratios = {0.5, 1, 2};
    const std::string csv = mrae::anchors_to_csv(set);
    CHECK(csv.starts_with("kind,index,value\n"));
    CHECK(csv.find("scale,0,4.0000000000000009") != std::string::npos);
    CHECK(csv.find("ratio,2,2\n") != std::string::npos);
    const std::string js = mrae::anchors_to_json(set);
    CHECK(js.find("\"scales\"") != std::string::npos);
    CHECK(js.find("\"ratios\"") != std::string::npos);
}

TEST_SUITE_END();

TEST_SUITE_BEGIN("size histogram");

TEST_CASE("single small box lands in one cell") {
    std::vector<Annotation> anns = {box(1, 1, 5, 8)};
    const auto hist = mrae::size_histogram(anns, 10.0);
    REQUIRE(hist.cells.size() == 1);
    CHECK(hist.cells[0].w_lo == 0.0);
    CHECK(hist.cells[0].h_lo == 0.0);
    CHECK(hist.cells[0].count == 1);
    CHECK(mrae::histogram_to_csv(hist) == "w_bin,h_bin,count\n0,0,1\n");
}

TEST_CASE("empty input yields an empty table") {
    const auto hist = mrae::size_histogram({}, 10.0);
    CHECK(hist.cells.empty());
    CHECK(mrae::histogram_to_csv(hist) == "w_bin,h_bin,count\n");
}

TEST_CASE("six-box fixture matches the hand tally") {
    const CocoDataset d = mrae::parse_coco(fixture_path("coco_six.json"));
    const auto hist = mrae::size_histogram(d.annotations, 10.0);
    // Boxes: 10x10, 25x20, 31x33, 32x32, 50x40, 10x5.
    REQUIRE(hist.cells.size() == 5);
    auto cell = [&](double w, double h) -> std::size_t {
        for (const auto& c : hist.cells) {
            if (c.w_lo == w && c.h_lo == h) return c.count;
        }
        return 0;
    };
    CHECK(cell(10, 0) == 1);
    CHECK(cell(10, 10) == 1);
    CHECK(cell(20, 20) == 1);
    CHECK(cell(30, 30) == 2);
    CHECK(cell(50, 40) == 1);
}

TEST_CASE("bin width must be positive") {
    CHECK_THROWS_AS(mrae::size_histogram({}, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(mrae::size_histogram({}, -1.0), std::invalid_argument);
}

TEST_SUITE_END();

TEST_SUITE_BEGIN("synthetic generator");

TEST_CASE("same seed gives bit-identical datasets") {
    SyntheticConfig cfg;
    cfg.n_images = 8;
    cfg.n_classes = 3;
    cfg.objects_per_image = 2;
    cfg.seed = 77;
    const SyntheticDataset a = mrae::generate_synthetic(cfg);
    const SyntheticDataset b = mrae::generate_synthetic(cfg);
    REQUIRE(a.samples.size() == 8);
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        CHECK(std::memcmp(a.samples[i].image.data().data(), b.samples[i].image.data().data(),
                          a.samples[i].image.size() * sizeof(double)) == 0);
        REQUIRE(a.samples[i].targets.size() == b.samples[i].targets.size());
        for (std::size_t t = 0; t < a.samples[i].targets.size(); ++t) {
            CHECK(a.samples[i].targets[t].cx == b.samples[i].targets[t].cx);
            CHECK(a.samples[i].targets[t].cy == b.samples[i].targets[t].cy);
            CHECK(a.samples[i].targets[t].size == b.samples[i].targets[t].size);
            CHECK(a.samples[i].targets[t].class_id == b.samples[i].targets[t].class_id);
        }
    }
}

TEST_CASE("zero objects per image means pure noise") {
    SyntheticConfig cfg;
    cfg.n_images = 4;
    cfg.objects_per_image = 0;
    cfg.noise_std = 0.25;
    cfg.seed = 5;
    const SyntheticDataset d = mrae::generate_synthetic(cfg);
    for (const auto& s : d.samples) {
        CHECK(s.targets.empty());
        for (const double v : s.image.data()) {
            CHECK(v >= 0.0);
            CHECK(v < 0.25);
        }
    }
    SyntheticConfig silent = cfg;
    silent.noise_std = 0.0;
    for (const auto& s : mrae::generate_synthetic(silent).samples) {
        for (const double v : s.image.data()) CHECK(v == 0.0);
    }
}

TEST_CASE("every target respects the size bound and stays inside the image") {
    SyntheticConfig cfg;
    cfg.n_images = 200;
    cfg.image_size = 64;
    cfg.max_obj_size = 8;
    cfg.n_classes = 5;
    cfg.objects_per_image = 3;
    cfg.seed = 31;
    const SyntheticDataset d = mrae::generate_synthetic(cfg);
    std::size_t seen = 0;
    for (const auto& s : d.samples) {
        CHECK(s.image.shape() == mrae::Shape{3, 64, 64});
        for (const auto& t : s.targets) {
            ++seen;
            CHECK(t.size >= 2);
            CHECK(t.size <= 8);
            CHECK(t.class_id < 5);
            const double half = static_cast<double>(t.size) / 2.0;
            CHECK(t.cx - half >= 0.0);
            CHECK(t.cy - half >= 0.0);
            CHECK(t.cx + half <= 64.0);
            CHECK(t.cy + half <= 64.0);
        }
    }
    CHECK(seen == 600);
}

TEST_CASE("squares fill their box and circles clip corners") {
    SyntheticConfig cfg;
    cfg.n_images = 60;
    cfg.n_classes = 2;  // class 0 square, class 1 circle
    cfg.objects_per_image = 1;
    cfg.noise_std = 0.1;
    cfg.seed = 13;
    const SyntheticDataset d = mrae::generate_synthetic(cfg);
    bool saw_square = false, saw_circle = false;
    for (const auto& s : d.samples) {
        REQUIRE(s.targets.size() == 1);
        const auto& t = s.targets[0];
        if (t.size < 4) continue;  // tiny circles degenerate to full squares
        const auto x0 = static_cast<std::size_t>(t.cx - static_cast<double>(t.size) / 2.0);
        const auto y0 = static_cast<std::size_t>(t.cy - static_cast<double>(t.size) / 2.0);
        const double corner = s.image.at({0, y0, x0});
        const double center = s.image.at({0, static_cast<std::size_t>(t.cy),
                                          static_cast<std::size_t>(t.cx)});
        CHECK(center >= 0.35);  // palette colors sit well above the noise floor
        if (t.class_id == 0) {
            CHECK(corner >= 0.35);
            saw_square = true;
        } else {
            CHECK(corner < 0.1);  // corner pixel keeps the background noise
            saw_circle = true;
        }
    }
    CHECK(saw_square);
    CHECK(saw_circle);
}

TEST_CASE("a longer run extends a shorter one with the same seed") {
    SyntheticConfig small;
    small.n_images = 3;
    small.n_classes = 2;
    small.objects_per_image = 2;
    small.seed = 21;
    SyntheticConfig big = small;
    big.n_images = 6;
    const SyntheticDataset a = mrae::generate_synthetic(small);
    const SyntheticDataset b = mrae::generate_synthetic(big);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(std::memcmp(a.samples[i].image.data().data(), b.samples[i].image.data().data(),
                          a.samples[i].image.size() * sizeof(double)) == 0);
    }
}

TEST_CASE("different seeds give different images") {
    SyntheticConfig cfg;
    cfg.n_images = 1;
    cfg.objects_per_image = 1;
    cfg.seed = 1;
    SyntheticConfig other = cfg;
    other.seed = 2;
    const auto a = mrae::generate_synthetic(cfg);
    const auto b = mrae::generate_synthetic(other);
    CHECK(std::memcmp(a.samples[0].image.data().data(), b.samples[0].image.data().data(),
                      a.samples[0].image.size() * sizeof(double)) != 0);
}

TEST_CASE("config bounds are enforced") {
    SyntheticConfig cfg;
    cfg.n_images = 1;
    cfg.image_size = 64;
    cfg.max_obj_size = 9;  // above 64/8
    CHECK_THROWS_AS(mrae::generate_synthetic(cfg), std::invalid_argument);
    cfg.max_obj_size = 1;
    CHECK_THROWS_AS(mrae::generate_synthetic(cfg), std::invalid_argument);
    cfg.max_obj_size = 8;
    cfg.n_classes = 0;
    CHECK_THROWS_AS(mrae::generate_synthetic(cfg), std::invalid_argument);
    cfg.n_classes = 1;
    cfg.noise_std = -0.5;
    CHECK_THROWS_AS(mrae::generate_synthetic(cfg), std::invalid_argument);
    cfg.noise_std = 0.1;
    cfg.image_size = 0;
    CHECK_THROWS_AS(mrae::generate_synthetic(cfg), std::invalid_argument);
}

TEST_CASE("stack_images batches selected samples") {
    SyntheticConfig cfg;
    cfg.n_images = 4;
    cfg.image_size = 16;
    cfg.max_obj_size = 2;
    cfg.objects_per_image = 1;
    cfg.seed = 8;
    const SyntheticDataset d = mrae::generate_synthetic(cfg);
    const Tensor batch = mrae::stack_images(d.samples, {2, 0});
    REQUIRE(batch.shape() == mrae::Shape{2, 3, 16, 16});
    CHECK(std::memcmp(batch.data().data(), d.samples[2].image.data().data(),
                      d.samples[2].image.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(batch.data().data() + d.samples[2].image.size(),
                      d.samples[0].image.data().data(),
                      d.samples[0].image.size() * sizeof(double)) == 0);
    CHECK_THROWS_AS(mrae::stack_images(d.samples, {}), std::invalid_argument);
}

TEST_SUITE_END();
