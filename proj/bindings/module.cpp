#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "mrae/backbone.hpp"
#include "mrae/data.hpp"
#include "mrae/fusion.hpp"
#include "mrae/gradcheck.hpp"
#include "mrae/io.hpp"
#include "mrae/rng.hpp"
#include "mrae/tensor.hpp"
#include "mrae/train.hpp"

namespace py = pybind11;
using namespace mrae;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor tensor_from_array(const DoubleArray& arr) {
    Shape shape(static_cast<std::size_t>(arr.ndim()));
    for (py::ssize_t d = 0; d < arr.ndim(); ++d) {
        shape[static_cast<std::size_t>(d)] = static_cast<std::size_t>(arr.shape(d));
    }
    std::vector<double> values(arr.data(), arr.data() + arr.size());
    return Tensor::from_vector(shape, std::move(values));
}

py::array_t<double> array_from_tensor(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().size());
    for (std::size_t d = 0; d < t.shape().size(); ++d) {
        shape[d] = static_cast<py::ssize_t>(t.shape()[d]);
    }
    py::array_t<double> out(shape);
    const auto data = t.data();
    std::copy(data.begin(), data.end(), out.mutable_data());
    return out;
}

Interp parse_interp(const std::string& mode) {
    if (mode == "nearest") return Interp::kNearest;
    if (mode == "bilinear") return Interp::kBilinear;
    throw std::invalid_argument("upsample mode must be 'nearest' or 'bilinear', got '" + mode + "'");
}

// Backbone plus one fusion head, seeded like the training harness so python
// results line up with CLI runs of the same seed.
class PyFusion {
public:
    PyFusion(const std::string& mode, int level, int d_embed,
             const std::array<std::size_t, 3>& channels, std::uint64_t seed)
        : mode_(parse_fusion_mode(mode)), level_(level) {
        BackboneConfig bcfg;
        bcfg.channels = channels;
        bcfg.validate();
        Rng net_rng(mix_seed(seed, 0x6d6f646c));
        net_.emplace(bcfg, net_rng);
        FusionConfig fcfg;
        fcfg.d_embed = static_cast<std::size_t>(d_embed);
        fcfg.template_level = mode_ == FusionMode::kMrae ? level : 1;
        Rng fusion_rng(mix_seed(seed, 0x66757365));
        fusion_.emplace(bcfg.channels, fcfg, fusion_rng);
        if (mode_ == FusionMode::kHard && (level < 1 || level > 3)) {
            throw std::invalid_argument("hard fusion level must be 1, 2 or 3");
        }
    }

    py::array_t<double> weights(const DoubleArray& image) const {
        return array_from_tensor(attention(tensor_from_array(image)).a);
    }

    py::array_t<double> fused(const DoubleArray& image) const {
        const Tensor img = tensor_from_array(image);
        const FeatureLevels levels = net_->forward(img);
        return array_from_tensor(fusion_->fuse(levels, attention_for(levels)).map);
    }

    void set_template(int level) {
        fusion_->set_template_level(level);
        if (mode_ == FusionMode::kMrae) level_ = level;
    }

private:
    AttentionWeights attention(const Tensor& img) const {
        return attention_for(net_->forward(img));
    }

    AttentionWeights attention_for(const FeatureLevels& levels) const {
        switch (mode_) {
            case FusionMode::kSoft: return fusion_->soft_attention_weights(levels);
            case FusionMode::kMrae: return fusion_->mrae_weights(levels);
            case FusionMode::kHard: return one_hot_weights(level_);
        }
        throw std::logic_error("unreachable fusion mode");
    }

    FusionMode mode_;
    int level_;
    std::optional<Backbone> net_;
    mutable std::optional<FusionParams> fusion_;
};

}  // namespace

PYBIND11_MODULE(_mrae, m) {
    m.doc() = "Multiresolution attention feature fusion core";
    m.attr("__version__") = kToolVersion;

    m.def(
        "conv2d",
        [](const DoubleArray& x, const DoubleArray& w, const DoubleArray& b, int stride,
           int padding) {
            return array_from_tensor(conv2d(tensor_from_array(x), tensor_from_array(w),
                                            tensor_from_array(b), stride, padding));
        },
        py::arg("input"), py::arg("weight"), py::arg("bias"), py::arg("stride") = 1,
        py::arg("padding") = 0, "2-D convolution over [N,C,H,W]");

    m.def(
        "max_pool2d",
        [](const DoubleArray& x, int kernel, int stride, int padding) {
            return array_from_tensor(max_pool2d(tensor_from_array(x), kernel, stride, padding));
        },
        py::arg("input"), py::arg("kernel"), py::arg("stride"), py::arg("padding") = 0);

    m.def(
        "global_max_pool",
        [](const DoubleArray& x) { return array_from_tensor(global_max_pool(tensor_from_array(x))); },
        py::arg("input"), "[N,C,H,W] -> [N,C] spatial max");

    m.def(
        "global_avg_pool",
        [](const DoubleArray& x) { return array_from_tensor(global_avg_pool(tensor_from_array(x))); },
        py::arg("input"), "[N,C,H,W] -> [N,C] spatial mean");

    m.def(
        "relu", [](const DoubleArray& x) { return array_from_tensor(relu(tensor_from_array(x))); },
        py::arg("input"));

    m.def(
        "upsample",
        [](const DoubleArray& x, int factor, const std::string& mode) {
            return array_from_tensor(upsample(tensor_from_array(x), factor, parse_interp(mode)));
        },
        py::arg("input"), py::arg("factor"), py::arg("mode") = "nearest",
        "Spatial upsampling by a factor of 2 or 4");

    m.def(
        "softmax",
        [](const DoubleArray& v) { return array_from_tensor(softmax(tensor_from_array(v))); },
        py::arg("logits"));

    m.def(
        "cosine_similarity",
        [](const DoubleArray& u, const DoubleArray& v) {
            return cosine_similarity(tensor_from_array(u), tensor_from_array(v)).item();
        },
        py::arg("u"), py::arg("v"));

    py::class_<PyFusion>(m, "Fusion",
                         "Toy backbone plus one fusion variant; mode is 'soft', 'mrae' or 'hard'. "
                         "For mrae, level picks the template; for hard, the selected level.")
        .def(py::init<const std::string&, int, int, const std::array<std::size_t, 3>&,
                      std::uint64_t>(),
             py::arg("mode"), py::arg("level") = 1, py::arg("d_embed") = 32,
             py::arg("channels") = std::array<std::size_t, 3>{16, 32, 64}, py::arg("seed") = 0)
        .def("weights", &PyFusion::weights, py::arg("image"),
             "Attention weights [3] for a [N,3,H,W] image batch")
        .def("fused", &PyFusion::fused, py::arg("image"),
             "Fused attention map [N,C3,H/4,W/4] for a [N,3,H,W] image batch")
        .def("set_template", &PyFusion::set_template, py::arg("level"));

    m.def(
        "generate_synthetic",
        [](std::size_t n_images, std::size_t image_size, std::size_t max_obj_size,
           std::size_t classes, std::size_t objects_per_image, double noise_std,
           std::uint64_t seed) {
            SyntheticConfig cfg;
            cfg.n_images = n_images;
            cfg.image_size = image_size;
            cfg.max_obj_size = max_obj_size;
            cfg.n_classes = classes;
            cfg.objects_per_image = objects_per_image;
            cfg.noise_std = noise_std;
            cfg.seed = seed;
            const SyntheticDataset dataset = generate_synthetic(cfg);
            std::vector<std::size_t> indices(dataset.samples.size());
            for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
            py::list targets;
            for (const auto& sample : dataset.samples) {
                py::list per_image;
                for (const auto& t : sample.targets) {
                    per_image.append(py::make_tuple(t.cx, t.cy, t.size, t.class_id));
                }
                targets.append(std::move(per_image));
            }
            return py::make_tuple(array_from_tensor(stack_images(dataset.samples, indices)),
                                  targets);
        },
        py::arg("n_images"), py::arg("image_size") = 64, py::arg("max_obj_size") = 8,
        py::arg("classes") = 1, py::arg("objects_per_image") = 3, py::arg("noise_std") = 0.1,
        py::arg("seed") = 0,
        "Returns (images [N,3,S,S], per-image target tuples (cx, cy, size, class))");

    m.def(
        "kmeans_1d",
        [](const std::vector<double>& points, std::size_t k, std::uint64_t seed) {
            const KMeansResult result = kmeans_1d(points, k, seed);
            return py::make_tuple(result.centers, result.wcss_trace, result.degenerate);
        },
        py::arg("points"), py::arg("k"), py::arg("seed") = 0,
        "Lloyd's k-means on scalars; returns (centers, wcss_trace, degenerate)");

    m.def(
        "gradcheck",
        [](std::uint64_t seed, double eps, double tol) {
            const GradCheckReport report = run_gradcheck_suite(seed, eps, tol);
            return py::make_tuple(report.all_passed(), gradcheck_table(report));
        },
        py::arg("seed") = 0, py::arg("eps") = 1e-5, py::arg("tol") = 1e-4,
        "Runs the finite-difference suite; returns (passed, table)");

    m.def(
        "filter_coco_text",
        [](const std::string& text, double max_area) {
            const CocoDataset dataset = parse_coco_text(text, "<memory>");
            const CocoDataset kept = filter_small(dataset, max_area);
            return py::make_tuple(emit_coco(kept), kept.annotations.size(),
                                  dataset.annotations.size() - kept.annotations.size());
        },
        py::arg("text"), py::arg("max_area") = 1024.0,
        "Filters a COCO JSON string; returns (filtered_json, retained, dropped)");
}
