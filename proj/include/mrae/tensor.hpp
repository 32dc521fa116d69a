#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mrae {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Non-finite values, backward-pass misuse, failed numerical checks.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

enum class Interp { kNearest, kBilinear };

namespace detail {

template <typename T>
struct TensorImpl;

// Type-erased backward callback. A hand-rolled holder instead of
// std::function: gcc 11 miscompiles std::function construction from local
// lambdas inside function templates in C++20 mode.
template <typename T>
class Backprop {
    struct Base {
        virtual void run(TensorImpl<T>&) = 0;
        virtual ~Base() = default;
    };
    template <typename F>
    struct Holder final : Base {
        F fn;
        explicit Holder(F f) : fn(std::move(f)) {}
        void run(TensorImpl<T>& self) override { fn(self); }
    };
    std::unique_ptr<Base> impl_;

public:
    Backprop() = default;
    template <typename F>
        requires(!std::is_same_v<std::remove_cvref_t<F>, Backprop>)
    Backprop(F f) : impl_(std::make_unique<Holder<F>>(std::move(f))) {}
    Backprop& operator=(std::nullptr_t) {
        impl_.reset();
        return *this;
    }
    explicit operator bool() const { return static_cast<bool>(impl_); }
    void operator()(TensorImpl<T>& self) { impl_->run(self); }
};

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;  // allocated during backward, cleared by zero_grad
    const char* op = "leaf";
    bool consumed = false;  // a backward pass already ran through this node

    // Autograd tape: parents are the grad-requiring inputs; backprop reads
    // this node's grad and accumulates into the parents' grads.
    std::vector<std::shared_ptr<TensorImpl>> parents;
    Backprop<T> backprop;

    std::size_t size() const { return data.size(); }

    std::vector<T>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

template <typename T>
inline void check_finite(const std::vector<T>& values, const char* what) {
    for (const T v : values) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string("non-finite value produced by ") + what);
        }
    }
}

}  // namespace detail

/// Dense N-dimensional array with optional participation in a reverse-mode
/// gradient tape. Handles share storage; ops build a fresh graph per forward
/// pass. Values are guaranteed finite after every op.
template <typename T>
class TensorT {
    static_assert(std::is_floating_point_v<T>);

public:
    using value_type = T;
    using Impl = detail::TensorImpl<T>;

    TensorT() : impl_(std::make_shared<Impl>()) { impl_->shape = {0}; }

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), T(0), requires_grad);
    }

    static TensorT full(Shape shape, T value, bool requires_grad = false) {
        TensorT t;
        t.impl_->shape = std::move(shape);
        t.impl_->data.assign(numel(t.impl_->shape), value);
        t.impl_->requires_grad = requires_grad;
        detail::check_finite(t.impl_->data, "tensor constructor");
        return t;
    }

    static TensorT from_vector(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (numel(shape) != values.size()) {
            throw ShapeError("tensor: shape " + shape_str(shape) + " expects " +
                             std::to_string(numel(shape)) + " values, got " +
                             std::to_string(values.size()));
        }
        TensorT t;
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(values);
        t.impl_->requires_grad = requires_grad;
        detail::check_finite(t.impl_->data, "tensor constructor");
        return t;
    }

    static TensorT scalar(T value, bool requires_grad = false) {
        return full(Shape{}, value, requires_grad);
    }

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t size() const { return impl_->data.size(); }

    std::span<const T> data() const { return impl_->data; }
    /// Mutable storage access; intended for initialization and optimizer steps.
    /// Const-qualified because a Tensor is a handle to shared storage.
    std::span<T> mutable_data() const { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool value) { impl_->requires_grad = value; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const T> grad() const {
        if (impl_->grad.empty()) {
            throw NumericError("grad accessed before a backward pass populated it");
        }
        return impl_->grad;
    }
    void zero_grad() const { impl_->grad.clear(); }

    T item() const {
        if (size() != 1) {
            throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
        }
        return impl_->data[0];
    }

    T at(std::initializer_list<std::size_t> idx) const {
        if (idx.size() != rank()) {
            throw ShapeError("at: rank mismatch");
        }
        std::size_t flat = 0;
        auto it = idx.begin();
        for (std::size_t d = 0; d < rank(); ++d, ++it) {
            if (*it >= impl_->shape[d]) throw ShapeError("at: index out of range");
            flat = flat * impl_->shape[d] + *it;
        }
        return impl_->data[flat];
    }

    const char* op_name() const { return impl_->op; }

    bool same_storage(const TensorT& other) const { return impl_ == other.impl_; }

    /// Reverse-mode sweep from a scalar. Populates grad on every
    /// grad-requiring tensor reachable through the tape, then releases the
    /// graph; a second call on the same result is an error.
    void backward() const {
        if (size() != 1) {
            throw NumericError("backward: output " + shape_str(shape()) + " is not a scalar");
        }
        if (!impl_->backprop) {
            if (impl_->consumed) {
                throw NumericError("backward called twice on the same graph; rebuild the "
                                   "forward pass first");
            }
            throw NumericError("backward: no recorded computation reaches this tensor");
        }

        // Iterative DFS postorder; parents are visited in insertion order so
        // the sweep is deterministic. `order` owns the nodes: releasing
        // backprop closures and parent edges mid-sweep must not free interior
        // nodes still awaiting their visit.
        std::vector<std::shared_ptr<Impl>> order;
        std::unordered_set<Impl*> seen;
        std::vector<std::pair<std::shared_ptr<Impl>, std::size_t>> stack;
        stack.emplace_back(impl_, 0);
        seen.insert(impl_.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                const std::shared_ptr<Impl>& parent = node->parents[next++];
                if (seen.insert(parent.get()).second) stack.emplace_back(parent, 0);
            } else {
                order.push_back(std::move(node));
                stack.pop_back();
            }
        }

        impl_->ensure_grad();
        impl_->grad[0] = T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Impl* node = it->get();
            node->consumed = true;
            if (!node->grad.empty()) {
                detail::check_finite(node->grad, node->op);
            }
            if (node->backprop) {
                node->backprop(*node);
                node->backprop = nullptr;
                node->parents.clear();
            }
        }
    }

    // Handle semantics: constness of the handle does not propagate to the
    // shared node, mirroring shared_ptr::operator*.
    Impl& impl() const { return *impl_; }
    const std::shared_ptr<Impl>& impl_ptr() const { return impl_; }

private:
    std::shared_ptr<Impl> impl_;
};

using Tensor = TensorT<double>;

namespace detail {

template <typename T>
TensorT<T> make_op_result(const char* op, Shape shape, std::vector<T> data,
                          std::initializer_list<TensorT<T>> inputs, Backprop<T> backprop) {
    check_finite(data, op);
    TensorT<T> out = TensorT<T>::from_vector(std::move(shape), std::move(data));
    out.impl().op = op;
    bool needs_grad = false;
    for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
    if (needs_grad) {
        out.impl().requires_grad = true;
        for (const auto& in : inputs) {
            if (in.requires_grad()) out.impl().parents.push_back(in.impl_ptr());
        }
        out.impl().backprop = std::move(backprop);
    }
    return out;
}

template <typename T>
void accumulate(TensorT<T> target, const std::vector<T>& delta) {
    auto& g = target.impl().ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

template <typename T>
void check_same_shape(const char* op, const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    check_same_shape("add", a, b);
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return detail::make_op_result<T>(
        "add", a.shape(), std::move(out), {a, b}, [a, b](detail::TensorImpl<T>& self) {
            if (a.requires_grad()) detail::accumulate(a, self.grad);
            if (b.requires_grad()) detail::accumulate(b, self.grad);
        });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    check_same_shape("sub", a, b);
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return detail::make_op_result<T>(
        "sub", a.shape(), std::move(out), {a, b}, [a, b](detail::TensorImpl<T>& self) {
            if (a.requires_grad()) detail::accumulate(a, self.grad);
            if (b.requires_grad()) {
                auto& g = b.impl().ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
            }
        });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    check_same_shape("mul", a, b);
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return detail::make_op_result<T>(
        "mul", a.shape(), std::move(out), {a, b}, [a, b](detail::TensorImpl<T>& self) {
            if (a.requires_grad()) {
                auto& g = a.impl().ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b.data()[i];
            }
            if (b.requires_grad()) {
                auto& g = b.impl().ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a.data()[i];
            }
        });
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
    return detail::make_op_result<T>(
        "relu", x.shape(), std::move(out), {x}, [x](detail::TensorImpl<T>& self) {
            auto& g = x.impl().ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (x.data()[i] > T(0)) g[i] += self.grad[i];
            }
        });
}

/// out = x * s with s a single-element tensor; gradients flow to both.
template <typename T>
TensorT<T> scale(const TensorT<T>& x, const TensorT<T>& s) {
    if (s.size() != 1) {
        throw ShapeError("scale: scale factor must be a single element, got " +
                         shape_str(s.shape()));
    }
    const T sv = s.data()[0];
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * sv;
    return detail::make_op_result<T>(
        "scale", x.shape(), std::move(out), {x, s}, [x, s, sv](detail::TensorImpl<T>& self) {
            if (x.requires_grad()) {
                auto& g = x.impl().ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * sv;
            }
            if (s.requires_grad()) {
                T acc = 0;
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    acc += self.grad[i] * x.data()[i];
                }
                s.impl().ensure_grad()[0] += acc;
            }
        });
}

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x) {
    T acc = 0;
    for (const T v : x.data()) acc += v;
    return detail::make_op_result<T>(
        "sum", Shape{}, std::vector<T>{acc}, {x}, [x](detail::TensorImpl<T>& self) {
            auto& g = x.impl().ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
        });
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& x) {
    if (x.size() == 0) throw ShapeError("mean: empty tensor");
    T acc = 0;
    for (const T v : x.data()) acc += v;
    const T inv = T(1) / static_cast<T>(x.size());
    return detail::make_op_result<T>(
        "mean", Shape{}, std::vector<T>{acc * inv}, {x}, [x, inv](detail::TensorImpl<T>& self) {
            auto& g = x.impl().ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * inv;
        });
}

/// [N,D] -> [D], mean over the batch dimension.
template <typename T>
TensorT<T> mean_over_batch(const TensorT<T>& x) {
    if (x.rank() != 2) {
        throw ShapeError("mean_over_batch: expected rank-2 input, got " + shape_str(x.shape()));
    }
    const std::size_t n = x.shape()[0], d = x.shape()[1];
    if (n == 0) throw ShapeError("mean_over_batch: empty batch");
    std::vector<T> out(d, T(0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) out[j] += x.data()[i * d + j];
    }
    const T inv = T(1) / static_cast<T>(n);
    for (auto& v : out) v *= inv;
    return detail::make_op_result<T>(
        "mean_over_batch", Shape{d}, std::move(out), {x},
        [x, n, d, inv](detail::TensorImpl<T>& self) {
            auto& g = x.impl().ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < d; ++j) g[i * d + j] += self.grad[j] * inv;
            }
        });
}

/// Scalar pick out of a rank-1 tensor, differentiable.
template <typename T>
TensorT<T> index(const TensorT<T>& v, std::size_t i) {
    if (v.rank() != 1) {
        throw ShapeError("index: expected rank-1 input, got " + shape_str(v.shape()));
    }
    if (i >= v.size()) {
        throw ShapeError("index: " + std::to_string(i) + " out of range for " +
                         shape_str(v.shape()));
    }
    return detail::make_op_result<T>(
        "index", Shape{}, std::vector<T>{v.data()[i]}, {v}, [v, i](detail::TensorImpl<T>& self) {
            v.impl().ensure_grad()[i] += self.grad[0];
        });
}

/// Pack k single-element tensors into a rank-1 tensor of length k.
template <typename T>
TensorT<T> stack_scalars(const std::vector<TensorT<T>>& parts) {
    if (parts.empty()) throw ShapeError("stack_scalars: empty input");
    std::vector<T> out(parts.size());
    bool needs_grad = false;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (parts[i].size() != 1) {
            throw ShapeError("stack_scalars: element " + std::to_string(i) + " has shape " +
                             shape_str(parts[i].shape()));
        }
        out[i] = parts[i].data()[0];
        needs_grad = needs_grad || parts[i].requires_grad();
    }
    detail::check_finite(out, "stack_scalars");
    TensorT<T> result = TensorT<T>::from_vector(Shape{parts.size()}, std::move(out));
    result.impl().op = "stack_scalars";
    if (needs_grad) {
        result.impl().requires_grad = true;
        for (const auto& p : parts) {
            if (p.requires_grad()) result.impl().parents.push_back(p.impl_ptr());
        }
        result.impl().backprop = [parts](detail::TensorImpl<T>& self) {
            for (std::size_t i = 0; i < parts.size(); ++i) {
                if (parts[i].requires_grad()) parts[i].impl().ensure_grad()[0] += self.grad[i];
            }
        };
    }
    return result;
}

template <typename T>
TensorT<T> mse_loss(const TensorT<T>& pred, const TensorT<T>& target) {
    check_same_shape("mse_loss", pred, target);
    if (pred.size() == 0) throw ShapeError("mse_loss: empty tensors");
    T acc = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const T d = pred.data()[i] - target.data()[i];
        acc += d * d;
    }
    const T inv = T(1) / static_cast<T>(pred.size());
    return detail::make_op_result<T>(
        "mse_loss", Shape{}, std::vector<T>{acc * inv}, {pred, target},
        [pred, target, inv](detail::TensorImpl<T>& self) {
            const T c = T(2) * inv * self.grad[0];
            if (pred.requires_grad()) {
                auto& g = pred.impl().ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += c * (pred.data()[i] - target.data()[i]);
                }
            }
            if (target.requires_grad()) {
                auto& g = target.impl().ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] -= c * (pred.data()[i] - target.data()[i]);
                }
            }
        });
}

/// Grad-free dtype conversion; the result is a leaf.
template <typename U, typename T>
TensorT<U> cast(const TensorT<T>& x) {
    std::vector<U> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(x.data()[i]);
    return TensorT<U>::from_vector(x.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Softmax / cosine similarity
// ---------------------------------------------------------------------------

/// Max-subtracted softmax over a rank-1 tensor.
template <typename T>
TensorT<T> softmax(const TensorT<T>& logits) {
    if (logits.rank() != 1 || logits.size() == 0) {
        throw ShapeError("softmax: expected non-empty rank-1 input, got " +
                         shape_str(logits.shape()));
    }
    for (const T v : logits.data()) {
        if (!std::isfinite(v)) throw NumericError("softmax: non-finite logit");
    }
    const T m = *std::max_element(logits.data().begin(), logits.data().end());
    std::vector<T> out(logits.size());
    T denom = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::exp(logits.data()[i] - m);
        denom += out[i];
    }
    for (auto& v : out) v /= denom;
    return detail::make_op_result<T>(
        "softmax", logits.shape(), std::move(out), {logits},
        [logits](detail::TensorImpl<T>& self) {
            T dot = 0;
            for (std::size_t i = 0; i < self.data.size(); ++i) dot += self.grad[i] * self.data[i];
            auto& g = logits.impl().ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.data[i] * (self.grad[i] - dot);
            }
        });
}

inline constexpr double kNormEps = 1e-12;

/// cos(u, v) as a scalar tensor; returns 0 when either norm is below 1e-12.
template <typename T>
TensorT<T> cosine_similarity(const TensorT<T>& u, const TensorT<T>& v) {
    if (u.rank() != 1 || v.rank() != 1) {
        throw ShapeError("cosine_similarity: expected rank-1 inputs");
    }
    if (u.size() != v.size() || u.size() == 0) {
        throw ShapeError("cosine_similarity: length mismatch " + shape_str(u.shape()) + " vs " +
                         shape_str(v.shape()));
    }
    T dotv = 0, nu2 = 0, nv2 = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dotv += u.data()[i] * v.data()[i];
        nu2 += u.data()[i] * u.data()[i];
        nv2 += v.data()[i] * v.data()[i];
    }
    const T nu = std::sqrt(nu2), nv = std::sqrt(nv2);
    if (nu < static_cast<T>(kNormEps) || nv < static_cast<T>(kNormEps)) {
        // Neutral contribution for degenerate vectors; gradient is zero but
        // still materialized so downstream consumers see populated grads.
        return detail::make_op_result<T>("cosine_similarity", Shape{}, std::vector<T>{T(0)},
                                         {u, v}, [u, v](detail::TensorImpl<T>&) {
                                             if (u.requires_grad()) u.impl().ensure_grad();
                                             if (v.requires_grad()) v.impl().ensure_grad();
                                         });
    }
    const T c = dotv / (nu * nv);
    return detail::make_op_result<T>(
        "cosine_similarity", Shape{}, std::vector<T>{c}, {u, v},
        [u, v, c, nu, nv](detail::TensorImpl<T>& self) {
            const T dy = self.grad[0];
            if (u.requires_grad()) {
                auto& g = u.impl().ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += dy * (v.data()[i] / (nu * nv) - c * u.data()[i] / (nu * nu));
                }
            }
            if (v.requires_grad()) {
                auto& g = v.impl().ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += dy * (u.data()[i] / (nu * nv) - c * v.data()[i] / (nv * nv));
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Convolution / pooling / linear / upsample
// ---------------------------------------------------------------------------

namespace detail {

inline std::size_t conv_extent(std::size_t in, int pad, std::size_t k, int stride) {
    return (in + 2 * static_cast<std::size_t>(pad) - k) / static_cast<std::size_t>(stride) + 1;
}

}  // namespace detail

/// 2-D cross-correlation, NCHW layout.
/// input [N,Cin,H,W] * weight [Cout,Cin,kh,kw] + bias [Cout] -> [N,Cout,H',W']
template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias,
                  int stride = 1, int padding = 0) {
    if (input.rank() != 4 || weight.rank() != 4 || bias.rank() != 1) {
        throw ShapeError("conv2d: expected input rank 4, weight rank 4, bias rank 1; got " +
                         shape_str(input.shape()) + ", " + shape_str(weight.shape()) + ", " +
                         shape_str(bias.shape()));
    }
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    if (padding < 0) throw ShapeError("conv2d: padding must be >= 0");
    const std::size_t n = input.shape()[0], cin = input.shape()[1];
    const std::size_t h = input.shape()[2], w = input.shape()[3];
    const std::size_t cout = weight.shape()[0], kh = weight.shape()[2], kw = weight.shape()[3];
    if (weight.shape()[1] != cin) {
        throw ShapeError("conv2d: input has " + std::to_string(cin) +
                         " channels but weight expects " + std::to_string(weight.shape()[1]) +
                         " (input " + shape_str(input.shape()) + ", weight " +
                         shape_str(weight.shape()) + ")");
    }
    if (bias.shape()[0] != cout) {
        throw ShapeError("conv2d: bias length " + std::to_string(bias.shape()[0]) +
                         " does not match " + std::to_string(cout) + " output channels");
    }
    const std::size_t p = static_cast<std::size_t>(padding);
    if (kh > h + 2 * p || kw > w + 2 * p) {
        throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " larger than padded input " + std::to_string(h + 2 * p) + "x" +
                         std::to_string(w + 2 * p));
    }
    const std::size_t oh = detail::conv_extent(h, padding, kh, stride);
    const std::size_t ow = detail::conv_extent(w, padding, kw, stride);
    const std::size_t s = static_cast<std::size_t>(stride);

    std::vector<T> out(n * cout * oh * ow);
    const T* in_p = input.data().data();
    const T* w_p = weight.data().data();
    const T* b_p = bias.data().data();
    const int ip = padding;
    for (std::size_t ni = 0; ni < n; ++ni) {
        for (std::size_t co = 0; co < cout; ++co) {
            T* out_c = out.data() + (ni * cout + co) * oh * ow;
            std::fill(out_c, out_c + oh * ow, b_p[co]);
            for (std::size_t ci = 0; ci < cin; ++ci) {
                const T* in_c = in_p + (ni * cin + ci) * h * w;
                const T* w_c = w_p + (co * cin + ci) * kh * kw;
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const T wv = w_c[ky * kw + kx];
                        for (std::size_t y = 0; y < oh; ++y) {
                            const long iy = static_cast<long>(y * s + ky) - ip;
                            if (iy < 0 || iy >= static_cast<long>(h)) continue;
                            const T* in_row = in_c + iy * w;
                            T* out_row = out_c + y * ow;
                            for (std::size_t x = 0; x < ow; ++x) {
                                const long ix = static_cast<long>(x * s + kx) - ip;
                                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                                out_row[x] += wv * in_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }

    return detail::make_op_result<T>(
        "conv2d", Shape{n, cout, oh, ow}, std::move(out), {input, weight, bias},
        [input, weight, bias, n, cin, cout, h, w, kh, kw, oh, ow, s,
         ip](detail::TensorImpl<T>& self) {
            const T* dout = self.grad.data();
            const T* in_p2 = input.data().data();
            const T* w_p2 = weight.data().data();
            const bool need_in = input.requires_grad();
            const bool need_w = weight.requires_grad();
            if (need_in) input.impl().ensure_grad();
            if (need_w) weight.impl().ensure_grad();
            T* din = need_in ? input.impl().grad.data() : nullptr;
            T* dw = need_w ? weight.impl().grad.data() : nullptr;
            for (std::size_t ni = 0; ni < n; ++ni) {
                for (std::size_t co = 0; co < cout; ++co) {
                    const T* dout_c = dout + (ni * cout + co) * oh * ow;
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const T* in_c = in_p2 + (ni * cin + ci) * h * w;
                        T* din_c = need_in ? din + (ni * cin + ci) * h * w : nullptr;
                        for (std::size_t ky = 0; ky < kh; ++ky) {
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const std::size_t widx = (co * cin + ci) * kh * kw + ky * kw + kx;
                                const T wv = w_p2[widx];
                                T wacc = 0;
                                for (std::size_t y = 0; y < oh; ++y) {
                                    const long iy = static_cast<long>(y * s + ky) - ip;
                                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                                    const T* dout_row = dout_c + y * ow;
                                    const T* in_row = in_c + iy * w;
                                    T* din_row = need_in ? din_c + iy * w : nullptr;
                                    for (std::size_t x = 0; x < ow; ++x) {
                                        const long ix = static_cast<long>(x * s + kx) - ip;
                                        if (ix < 0 || ix >= static_cast<long>(w)) continue;
                                        const T dy = dout_row[x];
                                        if (need_in) din_row[ix] += wv * dy;
                                        if (need_w) wacc += in_row[ix] * dy;
                                    }
                                }
                                if (need_w) dw[widx] += wacc;
                            }
                        }
                    }
                    if (bias.requires_grad()) {
                        T acc = 0;
                        for (std::size_t i = 0; i < oh * ow; ++i) acc += dout_c[i];
                        bias.impl().ensure_grad()[co] += acc;
                    }
                }
            }
        });
}

/// Window max, NCHW. Padding cells count as -inf; gradient routes to the
/// first max element in row-major window order.
template <typename T>
TensorT<T> max_pool2d(const TensorT<T>& input, int kernel, int stride, int padding = 0) {
    if (input.rank() != 4) {
        throw ShapeError("max_pool2d: expected rank-4 input, got " + shape_str(input.shape()));
    }
    if (kernel < 1 || stride < 1) throw ShapeError("max_pool2d: kernel and stride must be >= 1");
    if (padding < 0 || padding >= kernel) {
        throw ShapeError("max_pool2d: padding must satisfy 0 <= padding < kernel");
    }
    const std::size_t n = input.shape()[0], c = input.shape()[1];
    const std::size_t h = input.shape()[2], w = input.shape()[3];
    const std::size_t k = static_cast<std::size_t>(kernel);
    const std::size_t p = static_cast<std::size_t>(padding);
    if (k > h + 2 * p || k > w + 2 * p) {
        throw ShapeError("max_pool2d: kernel " + std::to_string(k) + " larger than padded input " +
                         std::to_string(h + 2 * p) + "x" + std::to_string(w + 2 * p));
    }
    const std::size_t oh = detail::conv_extent(h, padding, k, stride);
    const std::size_t ow = detail::conv_extent(w, padding, k, stride);
    const std::size_t s = static_cast<std::size_t>(stride);

    std::vector<T> out(n * c * oh * ow);
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    const T* in_p = input.data().data();
    std::size_t oi = 0;
    for (std::size_t nc = 0; nc < n * c; ++nc) {
        const T* in_c = in_p + nc * h * w;
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x, ++oi) {
                T best = std::numeric_limits<T>::lowest();
                std::size_t best_idx = 0;
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const long iy = static_cast<long>(y * s + ky) - static_cast<long>(p);
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const long ix = static_cast<long>(x * s + kx) - static_cast<long>(p);
                        if (ix < 0 || ix >= static_cast<long>(w)) continue;
                        const T v = in_c[iy * w + ix];
                        if (v > best) {
                            best = v;
                            best_idx = nc * h * w + iy * w + ix;
                        }
                    }
                }
                out[oi] = best;
                (*argmax)[oi] = best_idx;
            }
        }
    }

    return detail::make_op_result<T>(
        "max_pool2d", Shape{n, c, oh, ow}, std::move(out), {input},
        [input, argmax](detail::TensorImpl<T>& self) {
            auto& g = input.impl().ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                g[(*argmax)[i]] += self.grad[i];
            }
        });
}

/// [N,C,H,W] -> [N,C], per-channel spatial max.
template <typename T>
TensorT<T> global_max_pool(const TensorT<T>& input) {
    if (input.rank() != 4) {
        throw ShapeError("global_max_pool: expected rank-4 input, got " +
                         shape_str(input.shape()));
    }
    const std::size_t n = input.shape()[0], c = input.shape()[1];
    const std::size_t hw = input.shape()[2] * input.shape()[3];
    if (hw == 0) throw ShapeError("global_max_pool: empty spatial extents");
    std::vector<T> out(n * c);
    auto argmax = std::make_shared<std::vector<std::size_t>>(n * c);
    for (std::size_t nc = 0; nc < n * c; ++nc) {
        const T* base = input.data().data() + nc * hw;
        std::size_t best = 0;
        for (std::size_t i = 1; i < hw; ++i) {
            if (base[i] > base[best]) best = i;
        }
        out[nc] = base[best];
        (*argmax)[nc] = nc * hw + best;
    }
    return detail::make_op_result<T>(
        "global_max_pool", Shape{n, c}, std::move(out), {input},
        [input, argmax](detail::TensorImpl<T>& self) {
            auto& g = input.impl().ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                g[(*argmax)[i]] += self.grad[i];
            }
        });
}

/// [N,C,H,W] -> [N,C], per-channel spatial mean.
template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& input) {
    if (input.rank() != 4) {
        throw ShapeError("global_avg_pool: expected rank-4 input, got " +
                         shape_str(input.shape()));
    }
    const std::size_t n = input.shape()[0], c = input.shape()[1];
    const std::size_t hw = input.shape()[2] * input.shape()[3];
    if (hw == 0) throw ShapeError("global_avg_pool: empty spatial extents");
    const T inv = T(1) / static_cast<T>(hw);
    std::vector<T> out(n * c);
    for (std::size_t nc = 0; nc < n * c; ++nc) {
        const T* base = input.data().data() + nc * hw;
        T acc = 0;
        for (std::size_t i = 0; i < hw; ++i) acc += base[i];
        out[nc] = acc * inv;
    }
    return detail::make_op_result<T>(
        "global_avg_pool", Shape{n, c}, std::move(out), {input},
        [input, hw, inv](detail::TensorImpl<T>& self) {
            auto& g = input.impl().ensure_grad();
            for (std::size_t nc = 0; nc < self.grad.size(); ++nc) {
                const T d = self.grad[nc] * inv;
                T* gp = g.data() + nc * hw;
                for (std::size_t i = 0; i < hw; ++i) gp[i] += d;
            }
        });
}

/// input [N,Din] * weight [Dout,Din]^T + bias [Dout] -> [N,Dout]
template <typename T>
TensorT<T> linear(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias) {
    if (input.rank() != 2 || weight.rank() != 2 || bias.rank() != 1) {
        throw ShapeError("linear: expected input rank 2, weight rank 2, bias rank 1");
    }
    const std::size_t n = input.shape()[0], din = input.shape()[1];
    const std::size_t dout = weight.shape()[0];
    if (weight.shape()[1] != din) {
        throw ShapeError("linear: input feature size " + std::to_string(din) +
                         " does not match weight " + shape_str(weight.shape()));
    }
    if (bias.shape()[0] != dout) {
        throw ShapeError("linear: bias length " + std::to_string(bias.shape()[0]) +
                         " does not match " + std::to_string(dout) + " outputs");
    }
    std::vector<T> out(n * dout);
    for (std::size_t i = 0; i < n; ++i) {
        const T* in_row = input.data().data() + i * din;
        for (std::size_t o = 0; o < dout; ++o) {
            const T* w_row = weight.data().data() + o * din;
            T acc = bias.data()[o];
            for (std::size_t j = 0; j < din; ++j) acc += in_row[j] * w_row[j];
            out[i * dout + o] = acc;
        }
    }
    return detail::make_op_result<T>(
        "linear", Shape{n, dout}, std::move(out), {input, weight, bias},
        [input, weight, bias, n, din, dout](detail::TensorImpl<T>& self) {
            for (std::size_t i = 0; i < n; ++i) {
                const T* dy = self.grad.data() + i * dout;
                if (input.requires_grad()) {
                    auto& g = input.impl().ensure_grad();
                    for (std::size_t o = 0; o < dout; ++o) {
                        const T* w_row = weight.data().data() + o * din;
                        for (std::size_t j = 0; j < din; ++j) {
                            g[i * din + j] += dy[o] * w_row[j];
                        }
                    }
                }
                if (weight.requires_grad()) {
                    auto& g = weight.impl().ensure_grad();
                    const T* in_row = input.data().data() + i * din;
                    for (std::size_t o = 0; o < dout; ++o) {
                        for (std::size_t j = 0; j < din; ++j) {
                            g[o * din + j] += dy[o] * in_row[j];
                        }
                    }
                }
                if (bias.requires_grad()) {
                    auto& g = bias.impl().ensure_grad();
                    for (std::size_t o = 0; o < dout; ++o) g[o] += dy[o];
                }
            }
        });
}

namespace detail {

// align-corners-false source coordinate with clamping.
struct LerpIndex {
    std::size_t lo, hi;
    double t;
};

inline LerpIndex bilinear_coord(std::size_t dst, int factor, std::size_t extent) {
    double src = (static_cast<double>(dst) + 0.5) / factor - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(extent - 1));
    const auto lo = static_cast<std::size_t>(src);
    const std::size_t hi = std::min(lo + 1, extent - 1);
    return {lo, hi, src - static_cast<double>(lo)};
}

}  // namespace detail

/// Integer-factor spatial upsampling, factor 2 or 4. Nearest replicates
/// pixels; bilinear uses the align-corners-false convention.
template <typename T>
TensorT<T> upsample(const TensorT<T>& input, int factor, Interp mode) {
    if (input.rank() != 4) {
        throw ShapeError("upsample: expected rank-4 input, got " + shape_str(input.shape()));
    }
    if (factor != 2 && factor != 4) {
        throw ShapeError("upsample: unsupported factor " + std::to_string(factor) +
                         " (must be 2 or 4)");
    }
    const std::size_t n = input.shape()[0], c = input.shape()[1];
    const std::size_t h = input.shape()[2], w = input.shape()[3];
    if (h == 0 || w == 0) throw ShapeError("upsample: empty spatial extents");
    const std::size_t f = static_cast<std::size_t>(factor);
    const std::size_t oh = h * f, ow = w * f;
    std::vector<T> out(n * c * oh * ow);

    if (mode == Interp::kNearest) {
        for (std::size_t nc = 0; nc < n * c; ++nc) {
            const T* in_c = input.data().data() + nc * h * w;
            T* out_c = out.data() + nc * oh * ow;
            for (std::size_t y = 0; y < oh; ++y) {
                const T* in_row = in_c + (y / f) * w;
                T* out_row = out_c + y * ow;
                for (std::size_t x = 0; x < ow; ++x) out_row[x] = in_row[x / f];
            }
        }
        return detail::make_op_result<T>(
            "upsample_nearest", Shape{n, c, oh, ow}, std::move(out), {input},
            [input, n, c, h, w, f, oh, ow](detail::TensorImpl<T>& self) {
                auto& g = input.impl().ensure_grad();
                for (std::size_t nc = 0; nc < n * c; ++nc) {
                    const T* d_c = self.grad.data() + nc * oh * ow;
                    T* g_c = g.data() + nc * h * w;
                    for (std::size_t y = 0; y < oh; ++y) {
                        T* g_row = g_c + (y / f) * w;
                        const T* d_row = d_c + y * ow;
                        for (std::size_t x = 0; x < ow; ++x) g_row[x / f] += d_row[x];
                    }
                }
            });
    }

    auto ys = std::make_shared<std::vector<detail::LerpIndex>>(oh);
    auto xs = std::make_shared<std::vector<detail::LerpIndex>>(ow);
    for (std::size_t y = 0; y < oh; ++y) (*ys)[y] = detail::bilinear_coord(y, factor, h);
    for (std::size_t x = 0; x < ow; ++x) (*xs)[x] = detail::bilinear_coord(x, factor, w);
    for (std::size_t nc = 0; nc < n * c; ++nc) {
        const T* in_c = input.data().data() + nc * h * w;
        T* out_c = out.data() + nc * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
            const auto [y0, y1, ty] = (*ys)[y];
            const T* r0 = in_c + y0 * w;
            const T* r1 = in_c + y1 * w;
            T* out_row = out_c + y * ow;
            for (std::size_t x = 0; x < ow; ++x) {
                const auto [x0, x1, tx] = (*xs)[x];
                const double top = (1.0 - tx) * r0[x0] + tx * r0[x1];
                const double bot = (1.0 - tx) * r1[x0] + tx * r1[x1];
                out_row[x] = static_cast<T>((1.0 - ty) * top + ty * bot);
            }
        }
    }
    return detail::make_op_result<T>(
        "upsample_bilinear", Shape{n, c, oh, ow}, std::move(out), {input},
        [input, ys, xs, n, c, h, w, oh, ow](detail::TensorImpl<T>& self) {
            auto& g = input.impl().ensure_grad();
            for (std::size_t nc = 0; nc < n * c; ++nc) {
                const T* d_c = self.grad.data() + nc * oh * ow;
                T* g_c = g.data() + nc * h * w;
                for (std::size_t y = 0; y < oh; ++y) {
                    const auto [y0, y1, ty] = (*ys)[y];
                    const T* d_row = d_c + y * ow;
                    for (std::size_t x = 0; x < ow; ++x) {
                        const auto [x0, x1, tx] = (*xs)[x];
                        const double dy = d_row[x];
                        g_c[y0 * w + x0] += static_cast<T>((1.0 - ty) * (1.0 - tx) * dy);
                        g_c[y0 * w + x1] += static_cast<T>((1.0 - ty) * tx * dy);
                        g_c[y1 * w + x0] += static_cast<T>(ty * (1.0 - tx) * dy);
                        g_c[y1 * w + x1] += static_cast<T>(ty * tx * dy);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Raw dump format for test fixtures: little-endian u64 rank, u64 extents,
// then the values as f64.
// ---------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little,
              "tensor dump format assumes a little-endian host");

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_tensor: cannot open " + path.string());
    const std::uint64_t rank = t.rank();
    out.write(reinterpret_cast<const char*>(&rank), sizeof(rank));
    for (const std::size_t e : t.shape()) {
        const std::uint64_t v = e;
        out.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!out) throw std::runtime_error("save_tensor: write failed for " + path.string());
}

inline Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_tensor: cannot open " + path.string());
    std::uint64_t rank = 0;
    in.read(reinterpret_cast<char*>(&rank), sizeof(rank));
    Shape shape(rank);
    for (auto& e : shape) {
        std::uint64_t v = 0;
        in.read(reinterpret_cast<char*>(&v), sizeof(v));
        e = v;
    }
    std::vector<double> values(numel(shape));
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw std::runtime_error("load_tensor: truncated file " + path.string());
    return Tensor::from_vector(std::move(shape), std::move(values));
}

}  // namespace mrae
