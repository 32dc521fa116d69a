#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mrae/rng.hpp"
#include "mrae/tensor.hpp"

namespace mrae {

/// Named trainable tensor. Names are dotted paths like "fusion.align1.weight".
struct Parameter {
    std::string name;
    Tensor tensor;
};

/// Flat registry of a model's parameters with unique names.
class ParamList {
public:
    void add(std::string name, Tensor tensor) {
        if (!tensor.requires_grad()) {
            throw std::invalid_argument("parameter " + name + " does not require gradients");
        }
        if (!names_.insert(name).second) {
            throw std::invalid_argument("duplicate parameter name: " + name);
        }
        items_.push_back(Parameter{std::move(name), std::move(tensor)});
    }

    void merge(const ParamList& other) {
        for (const auto& p : other.items_) add(p.name, p.tensor);
    }

    const std::vector<Parameter>& items() const { return items_; }

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out;
        out.reserve(items_.size());
        for (const auto& p : items_) out.push_back(p.tensor);
        return out;
    }

    std::size_t count() const { return items_.size(); }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& p : items_) n += p.tensor.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : items_) p.tensor.zero_grad();
    }

    /// Sum of squared entries over all parameters, for divergence reports.
    double squared_norm() const {
        double acc = 0;
        for (const auto& p : items_) {
            for (const double v : p.tensor.data()) acc += v * v;
        }
        return acc;
    }

private:
    std::vector<Parameter> items_;
    std::unordered_set<std::string> names_;
};

namespace init {

/// Kaiming-style fan-in scaled normal draw.
inline Tensor kaiming_normal(Shape shape, std::size_t fan_in, Rng& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = rng.normal(0.0, stddev);
    return Tensor::from_vector(std::move(shape), std::move(v), true);
}

}  // namespace init

struct Conv2dLayer {
    Tensor weight, bias;
    int stride = 1;
    int padding = 0;

    Conv2dLayer() = default;

    Conv2dLayer(std::size_t cin, std::size_t cout, std::size_t kernel, int stride, int padding,
                Rng& rng)
        : weight(init::kaiming_normal({cout, cin, kernel, kernel}, cin * kernel * kernel, rng)),
          bias(Tensor::zeros({cout}, true)),
          stride(stride),
          padding(padding) {}

    Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }

    void register_into(ParamList& params, const std::string& prefix) const {
        params.add(prefix + ".weight", weight);
        params.add(prefix + ".bias", bias);
    }
};

struct LinearLayer {
    Tensor weight, bias;

    LinearLayer() = default;

    LinearLayer(std::size_t din, std::size_t dout, Rng& rng)
        : weight(init::kaiming_normal({dout, din}, din, rng)), bias(Tensor::zeros({dout}, true)) {}

    Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }

    void register_into(ParamList& params, const std::string& prefix) const {
        params.add(prefix + ".weight", weight);
        params.add(prefix + ".bias", bias);
    }
};

}  // namespace mrae
