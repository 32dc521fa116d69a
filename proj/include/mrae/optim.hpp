#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mrae/layers.hpp"
#include "mrae/tensor.hpp"

namespace mrae {

/// Classic momentum SGD: v <- momentum*v + grad; p <- p - lr*v.
class SgdMomentum {
public:
    SgdMomentum(std::vector<Parameter> params, double lr, double momentum)
        : params_(std::move(params)), lr_(lr), momentum_(momentum) {
        if (!(lr_ > 0.0)) throw std::invalid_argument("sgd: learning rate must be positive");
        if (momentum_ < 0.0 || momentum_ >= 1.0) {
            throw std::invalid_argument("sgd: momentum must lie in [0,1)");
        }
        velocity_.reserve(params_.size());
        for (const auto& p : params_) {
            velocity_.emplace_back(p.tensor.size(), 0.0);
        }
    }

    double lr() const { return lr_; }
    void set_lr(double lr) {
        if (!(lr > 0.0)) throw std::invalid_argument("sgd: learning rate must be positive");
        lr_ = lr;
    }
    double momentum() const { return momentum_; }

    /// Applies one update from the gradients currently stored on the
    /// parameters. Parameters without a populated gradient are an error.
    void step() {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (!p.tensor.has_grad()) {
                throw NumericError("sgd: parameter " + p.name + " has no gradient");
            }
            if (p.tensor.grad().size() != velocity_[i].size()) {
                throw ShapeError("sgd: state size mismatch for " + p.name);
            }
            auto data = p.tensor.mutable_data();
            const auto grad = p.tensor.grad();
            auto& v = velocity_[i];
            for (std::size_t j = 0; j < v.size(); ++j) {
                v[j] = momentum_ * v[j] + grad[j];
                data[j] -= lr_ * v[j];
                if (!std::isfinite(data[j])) {
                    throw NumericError("sgd: parameter " + p.name + " became non-finite");
                }
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    const std::vector<std::vector<double>>& velocities() const { return velocity_; }

private:
    std::vector<Parameter> params_;
    std::vector<std::vector<double>> velocity_;
    double lr_;
    double momentum_;
};

}  // namespace mrae
