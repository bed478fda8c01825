#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "dact/rng.hpp"

namespace dact {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

[[noreturn]] inline void shape_error(const std::string& what) {
    throw std::invalid_argument("shape error: " + what);
}

namespace detail {
inline thread_local bool grad_enabled = true;
}

// Suppresses graph recording in its scope (inference / sampler loops).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class Real>
struct TensorNode {
    Shape shape;
    std::vector<Real> value;
    std::vector<Real> grad;  // allocated on demand, same length as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Propagates this node's grad into its parents. Receives *this so closures
    // never hold a shared_ptr to their own node.
    std::function<void(const TensorNode&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
    }
};

// Shared-handle tensor; copying shares storage and graph linkage.
template <class Real>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), Real(0), requires_grad);
    }

    static Tensor filled(Shape shape, Real v, bool requires_grad = false) {
        Tensor t;
        t.n_ = std::make_shared<TensorNode<Real>>();
        t.n_->shape = std::move(shape);
        t.n_->value.assign(static_cast<size_t>(shape_numel(t.n_->shape)), v);
        t.n_->requires_grad = requires_grad;
        return t;
    }

    static Tensor from(Shape shape, std::vector<Real> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            shape_error("data length " + std::to_string(data.size()) + " does not match " + shape_str(shape));
        Tensor t;
        t.n_ = std::make_shared<TensorNode<Real>>();
        t.n_->shape = std::move(shape);
        t.n_->value = std::move(data);
        t.n_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(Real v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int ndim() const { return static_cast<int>(n_->shape.size()); }
    int64_t dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(n_->value.size()); }

    std::vector<Real>& data() { return n_->value; }
    const std::vector<Real>& data() const { return n_->value; }
    std::vector<Real>& grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    bool has_grad() const { return n_->grad.size() == n_->value.size(); }
    void zero_grad() {
        if (has_grad()) std::fill(n_->grad.begin(), n_->grad.end(), Real(0));
    }

    bool requires_grad() const { return n_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        n_->requires_grad = rg;
        return *this;
    }

    Real item() const {
        if (size() != 1) throw std::invalid_argument("item(): tensor is not scalar, shape " + shape_str(shape()));
        return n_->value[0];
    }

    std::shared_ptr<TensorNode<Real>> node() const { return n_; }

private:
    std::shared_ptr<TensorNode<Real>> n_;
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

// ---------------------------------------------------------------------------
// op plumbing
// ---------------------------------------------------------------------------

namespace detail {

template <class Real>
Tensor<Real> make_result(Shape shape) {
    return Tensor<Real>::zeros(std::move(shape));
}

template <class Real>
bool any_requires_grad(std::initializer_list<const Tensor<Real>*> ts) {
    if (!grad_enabled) return false;
    for (const auto* t : ts)
        if (t->requires_grad()) return true;
    return false;
}

template <class Real>
void record(Tensor<Real>& out, std::initializer_list<const Tensor<Real>*> parents,
            std::function<void(const TensorNode<Real>&)> backward_fn) {
    if (!any_requires_grad<Real>(parents)) return;
    out.node()->requires_grad = true;
    for (const auto* p : parents) out.node()->parents.push_back(p->node());
    out.node()->backward_fn = std::move(backward_fn);
}

template <class Real>
using MatMap = Eigen::Map<Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class Real>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <class Real>
ConstMatMap<Real> cmap(const std::vector<Real>& v, int64_t offset, int64_t rows, int64_t cols) {
    return ConstMatMap<Real>(v.data() + offset, rows, cols);
}
template <class Real>
MatMap<Real> mmap(std::vector<Real>& v, int64_t offset, int64_t rows, int64_t cols) {
    return MatMap<Real>(v.data() + offset, rows, cols);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and broadcast ops
// ---------------------------------------------------------------------------

// b must have the same shape as a, or a shape that is a suffix of a's shape
// (b is then broadcast over the leading dimensions; e.g. bias rows).
template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    const Shape &sa = a.shape(), &sb = b.shape();
    const bool same = sa == sb;
    if (!same) {
        if (sb.size() > sa.size() || !std::equal(sb.rbegin(), sb.rend(), sa.rbegin()))
            shape_error("add: " + shape_str(sb) + " is not a suffix of " + shape_str(sa));
    }
    auto out = detail::make_result<Real>(sa);
    const int64_t nb = b.size();
    const auto &va = a.data(), &vb = b.data();
    auto& vo = out.data();
    for (int64_t i = 0; i < a.size(); ++i) vo[i] = va[i] + vb[i % nb];

    auto an = a.node();
    auto bn = b.node();
    detail::record<Real>(out, {&a, &b}, [an, bn, nb](const TensorNode<Real>& o) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i % nb] += o.grad[i];
        }
    });
    return out;
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape()) shape_error("sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = detail::make_result<Real>(a.shape());
    for (int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    auto an = a.node();
    auto bn = b.node();
    detail::record<Real>(out, {&a, &b}, [an, bn](const TensorNode<Real>& o) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] -= o.grad[i];
        }
    });
    return out;
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape()) shape_error("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = detail::make_result<Real>(a.shape());
    for (int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    auto an = a.node();
    auto bn = b.node();
    detail::record<Real>(out, {&a, &b}, [an, bn](const TensorNode<Real>& o) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i] * an->value[i];
        }
    });
    return out;
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
    auto out = detail::make_result<Real>(a.shape());
    for (int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * c;
    auto an = a.node();
    detail::record<Real>(out, {&a}, [an, c](const TensorNode<Real>& o) {
        an->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * c;
    });
    return out;
}

// GELU, tanh approximation (the variant the gradient oracles assume):
//   gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <class Real>
Tensor<Real> gelu(const Tensor<Real>& a) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kCube = 0.044715;
    auto out = detail::make_result<Real>(a.shape());
    for (int64_t i = 0; i < a.size(); ++i) {
        const double x = static_cast<double>(a.data()[i]);
        const double t = std::tanh(kC * (x + kCube * x * x * x));
        out.data()[i] = static_cast<Real>(0.5 * x * (1.0 + t));
    }
    auto an = a.node();
    detail::record<Real>(out, {&a}, [an](const TensorNode<Real>& o) {
        an->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) {
            const double x = static_cast<double>(an->value[i]);
            const double inner = kC * (x + kCube * x * x * x);
            const double t = std::tanh(inner);
            const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kC * (1.0 + 3.0 * kCube * x * x);
            an->grad[i] += o.grad[i] * static_cast<Real>(d);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

// Supported shapes: [m,k]x[k,n], [B,m,k]x[k,n] (shared rhs), [B,m,k]x[B,k,n].
template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    const Shape &sa = a.shape(), &sb = b.shape();
    int64_t batch = 1, m = 0, k = 0, n = 0;
    bool batched_a = false, batched_b = false;
    if (sa.size() == 2 && sb.size() == 2) {
        m = sa[0]; k = sa[1]; n = sb[1];
        if (sb[0] != k) shape_error("matmul: inner dims " + shape_str(sa) + " x " + shape_str(sb));
    } else if (sa.size() == 3 && sb.size() == 2) {
        batch = sa[0]; m = sa[1]; k = sa[2]; n = sb[1];
        batched_a = true;
        if (sb[0] != k) shape_error("matmul: inner dims " + shape_str(sa) + " x " + shape_str(sb));
    } else if (sa.size() == 3 && sb.size() == 3) {
        batch = sa[0]; m = sa[1]; k = sa[2]; n = sb[2];
        batched_a = batched_b = true;
        if (sb[0] != batch || sb[1] != k) shape_error("matmul: " + shape_str(sa) + " x " + shape_str(sb));
    } else {
        shape_error("matmul: unsupported ranks " + shape_str(sa) + " x " + shape_str(sb));
    }

    Shape out_shape = batched_a ? Shape{batch, m, n} : Shape{m, n};
    auto out = detail::make_result<Real>(out_shape);
    for (int64_t p = 0; p < batch; ++p) {
        auto A = detail::cmap<Real>(a.data(), batched_a ? p * m * k : 0, m, k);
        auto B = detail::cmap<Real>(b.data(), batched_b ? p * k * n : 0, k, n);
        detail::mmap<Real>(out.data(), p * m * n, m, n).noalias() = A * B;
    }

    auto an = a.node();
    auto bn = b.node();
    detail::record<Real>(out, {&a, &b},
                         [an, bn, batch, m, k, n, batched_a, batched_b](const TensorNode<Real>& o) {
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (int64_t p = 0; p < batch; ++p) {
            auto G = detail::cmap<Real>(o.grad, p * m * n, m, n);
            if (an->requires_grad) {
                auto B = detail::cmap<Real>(bn->value, batched_b ? p * k * n : 0, k, n);
                detail::mmap<Real>(an->grad, batched_a ? p * m * k : 0, m, k).noalias() += G * B.transpose();
            }
            if (bn->requires_grad) {
                auto A = detail::cmap<Real>(an->value, batched_a ? p * m * k : 0, m, k);
                detail::mmap<Real>(bn->grad, batched_b ? p * k * n : 0, k, n).noalias() += A.transpose() * G;
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
    if (shape_numel(shape) != a.size())
        shape_error("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    auto out = Tensor<Real>::from(std::move(shape), a.data());
    auto an = a.node();
    detail::record<Real>(out, {&a}, [an](const TensorNode<Real>& o) {
        an->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
    });
    return out;
}

// Swaps the last two axes of a 2-D or 3-D tensor.
template <class Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
    const Shape& s = a.shape();
    if (s.size() != 2 && s.size() != 3) shape_error("transpose: rank must be 2 or 3, got " + shape_str(s));
    const int64_t batch = s.size() == 3 ? s[0] : 1;
    const int64_t m = s[s.size() - 2], n = s[s.size() - 1];
    Shape out_shape = s;
    std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
    auto out = detail::make_result<Real>(out_shape);
    for (int64_t p = 0; p < batch; ++p)
        detail::mmap<Real>(out.data(), p * m * n, n, m) = detail::cmap<Real>(a.data(), p * m * n, m, n).transpose();
    auto an = a.node();
    detail::record<Real>(out, {&a}, [an, batch, m, n](const TensorNode<Real>& o) {
        an->ensure_grad();
        for (int64_t p = 0; p < batch; ++p)
            detail::mmap<Real>(an->grad, p * m * n, m, n) += detail::cmap<Real>(o.grad, p * m * n, n, m).transpose();
    });
    return out;
}

// Contiguous slice [start, start+len) along `axis`.
template <class Real>
Tensor<Real> slice(const Tensor<Real>& a, int axis, int64_t start, int64_t len) {
    const Shape& s = a.shape();
    if (axis < 0 || axis >= static_cast<int>(s.size())) shape_error("slice: bad axis");
    if (start < 0 || len < 0 || start + len > s[static_cast<size_t>(axis)]) shape_error("slice: range out of bounds");
    Shape out_shape = s;
    out_shape[static_cast<size_t>(axis)] = len;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
    const int64_t ax = s[static_cast<size_t>(axis)];

    auto out = detail::make_result<Real>(out_shape);
    for (int64_t o = 0; o < outer; ++o)
        std::copy_n(a.data().begin() + (o * ax + start) * inner, len * inner,
                    out.data().begin() + o * len * inner);
    auto an = a.node();
    detail::record<Real>(out, {&a}, [an, outer, inner, ax, start, len](const TensorNode<Real>& o) {
        an->ensure_grad();
        for (int64_t q = 0; q < outer; ++q)
            for (int64_t i = 0; i < len * inner; ++i)
                an->grad[(q * ax + start) * inner + i] += o.grad[q * len * inner + i];
    });
    return out;
}

template <class Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, int axis) {
    if (parts.empty()) shape_error("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis < 0 || axis >= static_cast<int>(s0.size())) shape_error("concat: bad axis");
    int64_t total = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != s0.size()) shape_error("concat: rank mismatch");
        for (size_t i = 0; i < s.size(); ++i)
            if (static_cast<int>(i) != axis && s[i] != s0[i]) shape_error("concat: dim mismatch");
        total += s[static_cast<size_t>(axis)];
    }
    Shape out_shape = s0;
    out_shape[static_cast<size_t>(axis)] = total;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s0.size(); ++i) inner *= s0[i];

    auto out = detail::make_result<Real>(out_shape);
    int64_t off = 0;
    for (const auto& p : parts) {
        const int64_t ax = p.shape()[static_cast<size_t>(axis)];
        for (int64_t q = 0; q < outer; ++q)
            std::copy_n(p.data().begin() + q * ax * inner, ax * inner,
                        out.data().begin() + (q * total + off) * inner);
        off += ax;
    }

    bool any_rg = false;
    if (detail::grad_enabled)
        for (const auto& p : parts) any_rg = any_rg || p.requires_grad();
    if (any_rg) {
        std::vector<std::shared_ptr<TensorNode<Real>>> nodes;
        std::vector<int64_t> axes;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            axes.push_back(p.shape()[static_cast<size_t>(axis)]);
        }
        auto& on = *out.node();
        on.requires_grad = true;
        on.parents = nodes;
        on.backward_fn = [nodes, axes, outer, inner, total](const TensorNode<Real>& o) {
            int64_t part_off = 0;
            for (size_t pi = 0; pi < nodes.size(); ++pi) {
                const auto& pn = nodes[pi];
                const int64_t ax_p = axes[pi];
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    for (int64_t q = 0; q < outer; ++q)
                        for (int64_t i = 0; i < ax_p * inner; ++i)
                            pn->grad[q * ax_p * inner + i] += o.grad[(q * total + part_off) * inner + i];
                }
                part_off += ax_p;
            }
        };
    }
    return out;
}

// Repeats the whole tensor `times` along a new leading block: [r, ...] -> [times*r, ...].
template <class Real>
Tensor<Real> repeat_rows(const Tensor<Real>& a, int64_t times) {
    if (times < 1) shape_error("repeat_rows: times must be >= 1");
    Shape out_shape = a.shape();
    out_shape[0] *= times;
    auto out = detail::make_result<Real>(out_shape);
    const int64_t block = a.size();
    for (int64_t r = 0; r < times; ++r)
        std::copy_n(a.data().begin(), block, out.data().begin() + r * block);
    auto an = a.node();
    detail::record<Real>(out, {&a}, [an, times, block](const TensorNode<Real>& o) {
        an->ensure_grad();
        for (int64_t r = 0; r < times; ++r)
            for (int64_t i = 0; i < block; ++i) an->grad[i] += o.grad[r * block + i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// normalization / activation over the last axis
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> softmax(const Tensor<Real>& a) {
    const Shape& s = a.shape();
    if (s.empty()) shape_error("softmax: scalar input");
    const int64_t d = s.back();
    const int64_t rows = a.size() / d;
    auto out = detail::make_result<Real>(s);
    for (int64_t r = 0; r < rows; ++r) {
        const Real* x = a.data().data() + r * d;
        Real* y = out.data().data() + r * d;
        Real mx = x[0];
        for (int64_t i = 1; i < d; ++i) mx = std::max(mx, x[i]);
        Real sum = 0;
        for (int64_t i = 0; i < d; ++i) {
            y[i] = std::exp(x[i] - mx);
            sum += y[i];
        }
        for (int64_t i = 0; i < d; ++i) y[i] /= sum;
    }
    auto an = a.node();
    auto on = out.node();
    detail::record<Real>(out, {&a}, [an, on, rows, d](const TensorNode<Real>& o) {
        an->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const Real* y = on->value.data() + r * d;
            const Real* g = o.grad.data() + r * d;
            Real dot = 0;
            for (int64_t i = 0; i < d; ++i) dot += g[i] * y[i];
            for (int64_t i = 0; i < d; ++i) an->grad[r * d + i] += y[i] * (g[i] - dot);
        }
    });
    return out;
}

// Layer norm over the last axis with affine (gamma, beta), epsilon-guarded.
template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& a, const Tensor<Real>& gamma, const Tensor<Real>& beta,
                        Real eps = Real(1e-5)) {
    const Shape& s = a.shape();
    if (s.empty()) shape_error("layer_norm: scalar input");
    const int64_t d = s.back();
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d})
        shape_error("layer_norm: affine params must be [" + std::to_string(d) + "]");
    const int64_t rows = a.size() / d;
    auto out = detail::make_result<Real>(s);
    // Cache normalized rows and 1/sigma for the backward pass.
    auto xhat = std::make_shared<std::vector<Real>>(static_cast<size_t>(a.size()));
    auto inv_sigma = std::make_shared<std::vector<Real>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const Real* x = a.data().data() + r * d;
        Real mean = 0;
        for (int64_t i = 0; i < d; ++i) mean += x[i];
        mean /= static_cast<Real>(d);
        Real var = 0;
        for (int64_t i = 0; i < d; ++i) var += (x[i] - mean) * (x[i] - mean);
        var /= static_cast<Real>(d);
        const Real is = Real(1) / std::sqrt(var + eps);
        (*inv_sigma)[static_cast<size_t>(r)] = is;
        for (int64_t i = 0; i < d; ++i) {
            const Real xh = (x[i] - mean) * is;
            (*xhat)[static_cast<size_t>(r * d + i)] = xh;
            out.data()[r * d + i] = gamma.data()[i] * xh + beta.data()[i];
        }
    }
    auto an = a.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    detail::record<Real>(out, {&a, &gamma, &beta},
                         [an, gn, bn, xhat, inv_sigma, rows, d](const TensorNode<Real>& o) {
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (an->requires_grad) an->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const Real* g = o.grad.data() + r * d;
            const Real* xh = xhat->data() + r * d;
            if (gn->requires_grad)
                for (int64_t i = 0; i < d; ++i) gn->grad[i] += g[i] * xh[i];
            if (bn->requires_grad)
                for (int64_t i = 0; i < d; ++i) bn->grad[i] += g[i];
            if (an->requires_grad) {
                // dx = (is/d) * (d*gy - sum(gy) - xhat * sum(gy*xhat)), gy = gamma*g
                Real sum_gy = 0, sum_gy_xh = 0;
                for (int64_t i = 0; i < d; ++i) {
                    const Real gy = gn->value[i] * g[i];
                    sum_gy += gy;
                    sum_gy_xh += gy * xh[i];
                }
                const Real is = (*inv_sigma)[static_cast<size_t>(r)];
                for (int64_t i = 0; i < d; ++i) {
                    const Real gy = gn->value[i] * g[i];
                    an->grad[r * d + i] +=
                        is * (gy - sum_gy / static_cast<Real>(d) - xh[i] * sum_gy_xh / static_cast<Real>(d));
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// embedding lookup
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> embedding(const Tensor<Real>& table, const std::vector<int64_t>& ids) {
    if (table.ndim() != 2) shape_error("embedding: table must be 2-D");
    const int64_t v = table.dim(0), d = table.dim(1);
    for (int64_t id : ids)
        if (id < 0 || id >= v) throw std::invalid_argument("embedding: id " + std::to_string(id) + " out of range");
    auto out = detail::make_result<Real>({static_cast<int64_t>(ids.size()), d});
    for (size_t r = 0; r < ids.size(); ++r)
        std::copy_n(table.data().begin() + ids[r] * d, d, out.data().begin() + static_cast<int64_t>(r) * d);
    auto tn = table.node();
    auto ids_copy = std::make_shared<std::vector<int64_t>>(ids);
    detail::record<Real>(out, {&table}, [tn, ids_copy, d](const TensorNode<Real>& o) {
        tn->ensure_grad();
        for (size_t r = 0; r < ids_copy->size(); ++r)
            for (int64_t i = 0; i < d; ++i)
                tn->grad[(*ids_copy)[r] * d + i] += o.grad[static_cast<int64_t>(r) * d + i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// fused multi-head self-attention core
// ---------------------------------------------------------------------------

// q,k,v: [B,T,D] already projected; returns softmax(QK^T/sqrt(dh)) V per head,
// heads concatenated back to [B,T,D]. Full (non-causal) attention.
namespace detail {
inline thread_local int64_t last_attention_tokens = -1;
}

template <class Real>
Tensor<Real> attention(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v, int num_heads) {
    const Shape& s = q.shape();
    if (s.size() != 3 || k.shape() != s || v.shape() != s) shape_error("attention: q,k,v must be [B,T,D]");
    const int64_t B = s[0], T = s[1], D = s[2];
    if (num_heads < 1 || D % num_heads != 0) shape_error("attention: D not divisible by num_heads");
    const int64_t H = num_heads, dh = D / H;
    const Real inv_sqrt_dh = Real(1) / std::sqrt(static_cast<Real>(dh));
    detail::last_attention_tokens = T;

    using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    // probs cached for backward: [B*H] matrices of [T,T]
    auto probs = std::make_shared<std::vector<Mat>>();
    probs->reserve(static_cast<size_t>(B * H));

    auto out = detail::make_result<Real>(s);
    Mat Qh(T, dh), Kh(T, dh), Vh(T, dh);
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t h = 0; h < H; ++h) {
            for (int64_t t = 0; t < T; ++t)
                for (int64_t i = 0; i < dh; ++i) {
                    const int64_t src = (b * T + t) * D + h * dh + i;
                    Qh(t, i) = q.data()[src];
                    Kh(t, i) = k.data()[src];
                    Vh(t, i) = v.data()[src];
                }
            Mat S = (Qh * Kh.transpose()) * inv_sqrt_dh;
            // row softmax
            for (int64_t r = 0; r < T; ++r) {
                const Real mx = S.row(r).maxCoeff();
                S.row(r) = (S.row(r).array() - mx).exp();
                S.row(r) /= S.row(r).sum();
            }
            Mat O = S * Vh;
            for (int64_t t = 0; t < T; ++t)
                for (int64_t i = 0; i < dh; ++i) out.data()[(b * T + t) * D + h * dh + i] = O(t, i);
            probs->push_back(std::move(S));
        }
    }

    auto qn = q.node();
    auto kn = k.node();
    auto vn = v.node();
    detail::record<Real>(out, {&q, &k, &v},
                         [qn, kn, vn, probs, B, T, D, H, dh, inv_sqrt_dh](const TensorNode<Real>& o) {
        if (qn->requires_grad) qn->ensure_grad();
        if (kn->requires_grad) kn->ensure_grad();
        if (vn->requires_grad) vn->ensure_grad();
        Mat Qh(T, dh), Kh(T, dh), Vh(T, dh), Gh(T, dh);
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t h = 0; h < H; ++h) {
                for (int64_t t = 0; t < T; ++t)
                    for (int64_t i = 0; i < dh; ++i) {
                        const int64_t src = (b * T + t) * D + h * dh + i;
                        Qh(t, i) = qn->value[src];
                        Kh(t, i) = kn->value[src];
                        Vh(t, i) = vn->value[src];
                        Gh(t, i) = o.grad[src];
                    }
                const Mat& P = (*probs)[static_cast<size_t>(b * H + h)];
                Mat dV = P.transpose() * Gh;
                Mat dP = Gh * Vh.transpose();
                // softmax backward per row
                Mat dS(T, T);
                for (int64_t r = 0; r < T; ++r) {
                    const Real dot = (dP.row(r).array() * P.row(r).array()).sum();
                    dS.row(r) = P.row(r).array() * (dP.row(r).array() - dot);
                }
                dS *= inv_sqrt_dh;
                Mat dQ = dS * Kh;
                Mat dK = dS.transpose() * Qh;
                for (int64_t t = 0; t < T; ++t)
                    for (int64_t i = 0; i < dh; ++i) {
                        const int64_t dst = (b * T + t) * D + h * dh + i;
                        if (qn->requires_grad) qn->grad[dst] += dQ(t, i);
                        if (kn->requires_grad) kn->grad[dst] += dK(t, i);
                        if (vn->requires_grad) vn->grad[dst] += dV(t, i);
                    }
            }
        }
    });
    return out;
}

// Token count seen by the most recent attention() call on this thread.
inline int64_t last_attention_window() { return detail::last_attention_tokens; }

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// Mean over all elements of (a-b)^2.
template <class Real>
Tensor<Real> mse(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape()) shape_error("mse: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int64_t n = a.size();
    double acc = 0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
        acc += d * d;
    }
    auto out = Tensor<Real>::scalar(static_cast<Real>(acc / static_cast<double>(n)));
    auto an = a.node();
    auto bn = b.node();
    detail::record<Real>(out, {&a, &b}, [an, bn, n](const TensorNode<Real>& o) {
        const Real g = o.grad[0] * Real(2) / static_cast<Real>(n);
        if (an->requires_grad) {
            an->ensure_grad();
            for (int64_t i = 0; i < n; ++i) an->grad[i] += g * (an->value[i] - bn->value[i]);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t i = 0; i < n; ++i) bn->grad[i] -= g * (an->value[i] - bn->value[i]);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Each reachable node is visited
// exactly once, in an order where consumers run before producers.
template <class Real>
void backward(const Tensor<Real>& loss) {
    if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar, shape " + shape_str(loss.shape()));
    if (!loss.requires_grad())
        throw std::invalid_argument("backward: loss does not require grad (no recorded graph)");

    // Iterative post-order DFS; reversed gives a valid topological order.
    std::vector<TensorNode<Real>*> order;
    std::unordered_set<TensorNode<Real>*> visited;
    struct Frame {
        TensorNode<Real>* node;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.node().get(), 0});
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            TensorNode<Real>* p = f.node->parents[f.next_parent++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad();
    loss.node()->grad[0] += Real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode<Real>* node_ptr = *it;
        if (node_ptr->backward_fn) node_ptr->backward_fn(*node_ptr);
    }
}

// ---------------------------------------------------------------------------
// parameter store
// ---------------------------------------------------------------------------

template <class Real>
class ParamStore {
public:
    using Map = std::map<std::string, Tensor<Real>>;

    Tensor<Real>& add(const std::string& name, Tensor<Real> t) {
        auto [it, inserted] = params_.emplace(name, std::move(t));
        if (!inserted) throw std::invalid_argument("ParamStore: duplicate name " + name);
        it->second.set_requires_grad(true);
        return it->second;
    }

    Tensor<Real>& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::invalid_argument("ParamStore: unknown name " + name);
        return it->second;
    }
    const Tensor<Real>& at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::invalid_argument("ParamStore: unknown name " + name);
        return it->second;
    }

    bool contains(const std::string& name) const { return params_.count(name) > 0; }

    // Adopt another store's tensors (shared handles) under a prefix.
    void merge(const std::string& prefix, const ParamStore& other) {
        for (const auto& [name, t] : other.params_) add(prefix + name, t);
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& [name, t] : params_) n += t.size();
        return n;
    }

    bool all_finite() const {
        for (const auto& [name, t] : params_)
            for (Real x : t.data())
                if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    void zero_grad() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    Map& map() { return params_; }
    const Map& map() const { return params_; }

private:
    Map params_;
};

// Truncated-normal init (std 0.02, clipped at 2 std), seeded from the global
// seed and the tensor name so rebuilds are reproducible tensor-by-tensor.
template <class Real>
Tensor<Real> init_trunc_normal(Shape shape, uint64_t seed, const std::string& name, double std_dev = 0.02) {
    Rng rng(mix_seed(seed, name));
    auto t = Tensor<Real>::zeros(std::move(shape));
    for (auto& x : t.data()) x = static_cast<Real>(rng.trunc_normal(std_dev));
    return t;
}

}  // namespace dact
