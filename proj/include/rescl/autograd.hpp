#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "rescl/tensor.hpp"

namespace rescl {

template <typename T>
struct Node;

template <typename T>
using Var = std::shared_ptr<Node<T>>;

/// One value in the recorded computation. Holds the result tensor (whose
/// grad buffer doubles as the adjoint accumulator), the parents it was
/// computed from, and the closure that pushes its adjoint to them.
template <typename T>
struct Node {
    Tensor<T> t;
    std::vector<Var<T>> parents;
    std::function<void(Node<T>&)> backward;

    bool requires_grad() const { return t.requires_grad; }
    const Tensor<T>& value() const { return t; }
};

/// Op trace for one forward pass. Nodes are appended in evaluation order,
/// so walking the trace backwards is a valid reverse topological order.
/// A trace can be consumed by backward() exactly once.
template <typename T>
class Tape {
public:
    /// Wrap a tensor as a leaf. Trainable leaves get a zeroed grad buffer.
    Var<T> leaf(Tensor<T> value, bool requires_grad) {
        auto n = std::make_shared<Node<T>>();
        n->t = std::move(value);
        if (requires_grad) n->t.ensure_grad();
        nodes_.push_back(n);
        return n;
    }

    Var<T> constant(const Tensor<T>& value) { return leaf(value, false); }

    Var<T> make(Tensor<T> value, std::vector<Var<T>> parents,
                std::function<void(Node<T>&)> backward) {
        bool needs = false;
        for (const auto& p : parents) needs = needs || p->requires_grad();
        auto n = std::make_shared<Node<T>>();
        n->t = std::move(value);
        if (needs) {
            n->t.ensure_grad();
            n->parents = std::move(parents);
            n->backward = std::move(backward);
        }
        nodes_.push_back(n);
        return n;
    }

    /// Reverse sweep from a scalar root. Errors if this trace was already
    /// consumed; record a new forward pass (or reset) first.
    void backward(const Var<T>& root) {
        if (consumed_)
            throw std::logic_error("tape: backward called twice without a new forward pass");
        consumed_ = true;
        if (root->t.size() != 1)
            throw std::invalid_argument("tape: backward root must be a scalar");
        if (!root->requires_grad())
            throw std::invalid_argument("tape: root does not depend on any trainable leaf");
        root->t.grad[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node<T>& n = **it;
            if (n.requires_grad() && n.backward) n.backward(n);
        }
    }

    void reset() {
        nodes_.clear();
        consumed_ = false;
    }

    std::size_t recorded_ops() const { return nodes_.size(); }

private:
    std::vector<Var<T>> nodes_;
    bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Deterministic gemm kernels (fixed ikj accumulation order).

namespace detail {

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void gemm_nn_acc(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            T a = A[i * k + p];
            const T* brow = B + p * n;
            T* crow = C + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += a * brow[j];
        }
}

// C[m x n] += A[m x k] * B[n x k]^T
template <typename T>
void gemm_nt_acc(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const T* arow = A + i * k;
            const T* brow = B + j * k;
            T s = T(0);
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            C[i * n + j] += s;
        }
}

// C[m x n] += A[k x m]^T * B[k x n]
template <typename T>
void gemm_tn_acc(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p)
        for (std::size_t i = 0; i < m; ++i) {
            T a = A[p * m + i];
            const T* brow = B + p * n;
            T* crow = C + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += a * brow[j];
        }
}

struct ConvGeom {
    std::size_t N, Ci, H, W, Co, Kh, Kw, Ho, Wo;
    std::size_t stride, pad;
};

inline ConvGeom conv_geometry(const Shape& x, const Shape& w, std::size_t stride,
                              std::size_t pad) {
    if (x.size() != 4 || w.size() != 4)
        throw std::invalid_argument("conv2d: expected 4-d input and kernel");
    ConvGeom g{};
    g.N = x[0];
    g.Ci = x[1];
    g.H = x[2];
    g.W = x[3];
    g.Co = w[0];
    g.Kh = w[2];
    g.Kw = w[3];
    g.stride = stride;
    g.pad = pad;
    if (w[1] != g.Ci)
        throw std::invalid_argument("conv2d: kernel expects " + std::to_string(w[1]) +
                                    " input channels, got " + std::to_string(g.Ci));
    if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
    std::size_t hp = g.H + 2 * pad, wp = g.W + 2 * pad;
    if (hp < g.Kh || wp < g.Kw || (hp - g.Kh) % stride != 0 || (wp - g.Kw) % stride != 0)
        throw std::invalid_argument("conv2d: output size is not integral for input " +
                                    shape_str(x) + ", kernel " + shape_str(w) + ", stride " +
                                    std::to_string(stride) + ", pad " + std::to_string(pad));
    g.Ho = (hp - g.Kh) / stride + 1;
    g.Wo = (wp - g.Kw) / stride + 1;
    return g;
}

// col layout: [Ci*Kh*Kw x Ho*Wo], one sample at a time
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
    const std::size_t HW = g.Ho * g.Wo;
    for (std::size_t c = 0; c < g.Ci; ++c)
        for (std::size_t kh = 0; kh < g.Kh; ++kh)
            for (std::size_t kw = 0; kw < g.Kw; ++kw) {
                T* dst = col + ((c * g.Kh + kh) * g.Kw + kw) * HW;
                for (std::size_t oh = 0; oh < g.Ho; ++oh) {
                    std::ptrdiff_t ih =
                        static_cast<std::ptrdiff_t>(oh * g.stride + kh) -
                        static_cast<std::ptrdiff_t>(g.pad);
                    for (std::size_t ow = 0; ow < g.Wo; ++ow) {
                        std::ptrdiff_t iw =
                            static_cast<std::ptrdiff_t>(ow * g.stride + kw) -
                            static_cast<std::ptrdiff_t>(g.pad);
                        T v = T(0);
                        if (ih >= 0 && ih < static_cast<std::ptrdiff_t>(g.H) && iw >= 0 &&
                            iw < static_cast<std::ptrdiff_t>(g.W))
                            v = x[(c * g.H + static_cast<std::size_t>(ih)) * g.W +
                                  static_cast<std::size_t>(iw)];
                        dst[oh * g.Wo + ow] = v;
                    }
                }
            }
}

template <typename T>
void col2im_acc(const T* col, const ConvGeom& g, T* dx) {
    const std::size_t HW = g.Ho * g.Wo;
    for (std::size_t c = 0; c < g.Ci; ++c)
        for (std::size_t kh = 0; kh < g.Kh; ++kh)
            for (std::size_t kw = 0; kw < g.Kw; ++kw) {
                const T* src = col + ((c * g.Kh + kh) * g.Kw + kw) * HW;
                for (std::size_t oh = 0; oh < g.Ho; ++oh) {
                    std::ptrdiff_t ih =
                        static_cast<std::ptrdiff_t>(oh * g.stride + kh) -
                        static_cast<std::ptrdiff_t>(g.pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.H)) continue;
                    for (std::size_t ow = 0; ow < g.Wo; ++ow) {
                        std::ptrdiff_t iw =
                            static_cast<std::ptrdiff_t>(ow * g.stride + kw) -
                            static_cast<std::ptrdiff_t>(g.pad);
                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.W)) continue;
                        dx[(c * g.H + static_cast<std::size_t>(ih)) * g.W +
                           static_cast<std::size_t>(iw)] += src[oh * g.Wo + ow];
                    }
                }
            }
}

// channel geometry for per-channel ops on N x C or N x C x H x W tensors
inline void channel_geometry(const Shape& s, std::size_t& n, std::size_t& c,
                             std::size_t& inner, const char* op) {
    if (s.size() < 2) throw std::invalid_argument(std::string(op) + ": rank must be >= 2");
    n = s[0];
    c = s[1];
    inner = 1;
    for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable ops.

template <typename T>
Var<T> add(Tape<T>& tape, Var<T> a, Var<T> b) {
    check_same_shape(a->t, b->t, "add");
    Tensor<T> out = a->t;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->t[i];
    return tape.make(std::move(out), {a, b}, [a, b](Node<T>& n) {
        if (a->requires_grad())
            for (std::size_t i = 0; i < n.t.size(); ++i) a->t.grad[i] += n.t.grad[i];
        if (b->requires_grad())
            for (std::size_t i = 0; i < n.t.size(); ++i) b->t.grad[i] += n.t.grad[i];
    });
}

template <typename T>
Var<T> mul(Tape<T>& tape, Var<T> a, Var<T> b) {
    check_same_shape(a->t, b->t, "mul");
    Tensor<T> out = a->t;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->t[i];
    return tape.make(std::move(out), {a, b}, [a, b](Node<T>& n) {
        if (a->requires_grad())
            for (std::size_t i = 0; i < n.t.size(); ++i) a->t.grad[i] += n.t.grad[i] * b->t[i];
        if (b->requires_grad())
            for (std::size_t i = 0; i < n.t.size(); ++i) b->t.grad[i] += n.t.grad[i] * a->t[i];
    });
}

/// Multiply by a compile-time-known constant scalar.
template <typename T>
Var<T> scale(Tape<T>& tape, Var<T> a, T c) {
    Tensor<T> out = a->t;
    for (auto& v : out.data) v *= c;
    return tape.make(std::move(out), {a}, [a, c](Node<T>& n) {
        for (std::size_t i = 0; i < n.t.size(); ++i) a->t.grad[i] += c * n.t.grad[i];
    });
}

template <typename T>
Var<T> matmul(Tape<T>& tape, Var<T> a, Var<T> b) {
    const Shape& sa = a->t.shape;
    const Shape& sb = b->t.shape;
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(sa) + " * " +
                                    shape_str(sb));
    std::size_t m = sa[0], k = sa[1], n = sb[1];
    Tensor<T> out(Shape{m, n});
    detail::gemm_nn_acc(a->t.data.data(), b->t.data.data(), out.data.data(), m, k, n);
    return tape.make(std::move(out), {a, b}, [a, b, m, k, n](Node<T>& g) {
        if (a->requires_grad())
            detail::gemm_nt_acc(g.t.grad.data(), b->t.data.data(), a->t.grad.data(), m, n, k);
        if (b->requires_grad())
            detail::gemm_tn_acc(a->t.data.data(), g.t.grad.data(), b->t.grad.data(), k, m, n);
    });
}

/// y = x * W^T + b with x: [N x Ci], W: [Co x Ci], b: [Co].
template <typename T>
Var<T> linear(Tape<T>& tape, Var<T> x, Var<T> w, Var<T> b) {
    const Shape& sx = x->t.shape;
    const Shape& sw = w->t.shape;
    if (sx.size() != 2 || sw.size() != 2 || sx[1] != sw[1])
        throw std::invalid_argument("linear: incompatible shapes " + shape_str(sx) + ", W " +
                                    shape_str(sw));
    std::size_t n = sx[0], ci = sx[1], co = sw[0];
    if (b->t.shape != Shape{co}) throw std::invalid_argument("linear: bad bias shape");
    Tensor<T> out(Shape{n, co});
    detail::gemm_nt_acc(x->t.data.data(), w->t.data.data(), out.data.data(), n, ci, co);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < co; ++j) out[i * co + j] += b->t[j];
    return tape.make(std::move(out), {x, w, b}, [x, w, b, n, ci, co](Node<T>& g) {
        if (x->requires_grad())
            detail::gemm_nn_acc(g.t.grad.data(), w->t.data.data(), x->t.grad.data(), n, co, ci);
        if (w->requires_grad())
            detail::gemm_tn_acc(g.t.grad.data(), x->t.data.data(), w->t.grad.data(), co, n, ci);
        if (b->requires_grad())
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < co; ++j) b->t.grad[j] += g.t.grad[i * co + j];
    });
}

/// Cross-correlation with per-output-channel bias. im2col + gemm; the
/// direct-loop reference lives in the test suite as the oracle.
template <typename T>
Var<T> conv2d(Tape<T>& tape, Var<T> x, Var<T> w, Var<T> b, std::size_t stride, std::size_t pad) {
    auto g = detail::conv_geometry(x->t.shape, w->t.shape, stride, pad);
    if (b->t.shape != Shape{g.Co}) throw std::invalid_argument("conv2d: bad bias shape");
    const std::size_t K = g.Ci * g.Kh * g.Kw, HW = g.Ho * g.Wo;
    Tensor<T> out(Shape{g.N, g.Co, g.Ho, g.Wo});
    std::vector<T> col(K * HW);
    for (std::size_t n = 0; n < g.N; ++n) {
        detail::im2col(x->t.data.data() + n * g.Ci * g.H * g.W, g, col.data());
        T* y = out.data.data() + n * g.Co * HW;
        detail::gemm_nn_acc(w->t.data.data(), col.data(), y, g.Co, K, HW);
        for (std::size_t c = 0; c < g.Co; ++c)
            for (std::size_t i = 0; i < HW; ++i) y[c * HW + i] += b->t[c];
    }
    return tape.make(std::move(out), {x, w, b}, [x, w, b, g, K, HW](Node<T>& gn) {
        std::vector<T> col(K * HW), dcol(K * HW);
        for (std::size_t n = 0; n < g.N; ++n) {
            const T* gy = gn.t.grad.data() + n * g.Co * HW;
            if (w->requires_grad() || x->requires_grad())
                detail::im2col(x->t.data.data() + n * g.Ci * g.H * g.W, g, col.data());
            if (w->requires_grad())
                detail::gemm_nt_acc(gy, col.data(), w->t.grad.data(), g.Co, HW, K);
            if (b->requires_grad())
                for (std::size_t c = 0; c < g.Co; ++c)
                    for (std::size_t i = 0; i < HW; ++i) b->t.grad[c] += gy[c * HW + i];
            if (x->requires_grad()) {
                std::fill(dcol.begin(), dcol.end(), T(0));
                detail::gemm_tn_acc(w->t.data.data(), gy, dcol.data(), K, g.Co, HW);
                detail::col2im_acc(dcol.data(), g, x->t.grad.data() + n * g.Ci * g.H * g.W);
            }
        }
    });
}

template <typename T>
Var<T> relu(Tape<T>& tape, Var<T> x) {
    Tensor<T> out = x->t;
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    return tape.make(std::move(out), {x}, [x](Node<T>& n) {
        for (std::size_t i = 0; i < n.t.size(); ++i)
            if (x->t[i] > T(0)) x->t.grad[i] += n.t.grad[i];
    });
}

/// Row-wise tempered softmax over [N x K] logits, max-subtracted.
template <typename T>
Var<T> softmax_t(Tape<T>& tape, Var<T> logits, T temperature) {
    if (!(temperature > T(0))) throw std::invalid_argument("softmax_t: temperature must be > 0");
    if (logits->t.rank() != 2) throw std::invalid_argument("softmax_t: expected [N x K] logits");
    if (!logits->t.all_finite()) throw std::invalid_argument("softmax_t: non-finite logits");
    std::size_t n = logits->t.shape[0], k = logits->t.shape[1];
    Tensor<T> out(logits->t.shape);
    for (std::size_t i = 0; i < n; ++i) {
        const T* z = logits->t.data.data() + i * k;
        T* q = out.data.data() + i * k;
        T m = z[0];
        for (std::size_t j = 1; j < k; ++j) m = std::max(m, z[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < k; ++j) {
            q[j] = std::exp((z[j] - m) / temperature);
            sum += q[j];
        }
        for (std::size_t j = 0; j < k; ++j) q[j] /= sum;
    }
    return tape.make(std::move(out), {logits}, [logits, n, k, temperature](Node<T>& g) {
        for (std::size_t i = 0; i < n; ++i) {
            const T* q = g.t.data.data() + i * k;
            const T* gy = g.t.grad.data() + i * k;
            T dot = T(0);
            for (std::size_t j = 0; j < k; ++j) dot += gy[j] * q[j];
            T* gz = logits->t.grad.data() + i * k;
            for (std::size_t j = 0; j < k; ++j) gz[j] += q[j] * (gy[j] - dot) / temperature;
        }
    });
}

/// Batch-mean KL divergence sum_j p_j log(p_j / q_j) with q = softmax_t(logits).
/// Targets are plain data (soft distributions or one-hot rows); zero or
/// negative target mass contributes nothing. Reduces to tempered
/// cross-entropy for one-hot targets.
template <typename T>
Var<T> kl_tempered(Tape<T>& tape, const Tensor<T>& targets, Var<T> logits, T temperature) {
    if (!(temperature > T(0))) throw std::invalid_argument("kl_tempered: temperature must be > 0");
    if (logits->t.rank() != 2 || targets.shape != logits->t.shape)
        throw std::invalid_argument("kl_tempered: target/logit shape mismatch");
    if (!logits->t.all_finite()) throw std::invalid_argument("kl_tempered: non-finite logits");
    std::size_t n = targets.shape[0], k = targets.shape[1];
    // softmax saved for backward; targets copied so the closure does not
    // depend on the caller's buffer lifetime
    auto q = std::make_shared<std::vector<T>>(n * k);
    auto p_saved = std::make_shared<std::vector<T>>(targets.data);
    T loss = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        const T* z = logits->t.data.data() + i * k;
        T m = z[0];
        for (std::size_t j = 1; j < k; ++j) m = std::max(m, z[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < k; ++j) sum += std::exp((z[j] - m) / temperature);
        T lse = std::log(sum);
        for (std::size_t j = 0; j < k; ++j) {
            T lq = (z[j] - m) / temperature - lse;
            (*q)[i * k + j] = std::exp(lq);
            T p = targets[i * k + j];
            if (p > T(0)) loss += p * (std::log(p) - lq);
        }
    }
    loss /= static_cast<T>(n);
    Tensor<T> out = Tensor<T>::scalar(loss);
    return tape.make(std::move(out), {logits}, [logits, p_saved, q, n, k, temperature](Node<T>& g) {
        T gy = g.t.grad[0];
        for (std::size_t i = 0; i < n; ++i) {
            T psum = T(0);
            for (std::size_t j = 0; j < k; ++j)
                psum += std::max((*p_saved)[i * k + j], T(0));
            T* gz = logits->t.grad.data() + i * k;
            for (std::size_t j = 0; j < k; ++j) {
                T p = std::max((*p_saved)[i * k + j], T(0));
                gz[j] += gy * ((*q)[i * k + j] * psum - p) / (temperature * static_cast<T>(n));
            }
        }
    });
}

/// y[n,c,...] = x[n,c,...] * s[c]; the gradient for s sums over batch and
/// spatial axes.
template <typename T>
Var<T> scale_per_channel(Tape<T>& tape, Var<T> x, Var<T> s) {
    std::size_t n, c, inner;
    detail::channel_geometry(x->t.shape, n, c, inner, "scale_per_channel");
    if (s->t.shape != Shape{c})
        throw std::invalid_argument("scale_per_channel: scale length " + shape_str(s->t.shape) +
                                    " does not match channel count " + std::to_string(c));
    Tensor<T> out = x->t;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            T* row = out.data.data() + (i * c + j) * inner;
            T sv = s->t[j];
            for (std::size_t t = 0; t < inner; ++t) row[t] *= sv;
        }
    return tape.make(std::move(out), {x, s}, [x, s, n, c, inner](Node<T>& g) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                const T* gr = g.t.grad.data() + (i * c + j) * inner;
                if (x->requires_grad()) {
                    T* gx = x->t.grad.data() + (i * c + j) * inner;
                    T sv = s->t[j];
                    for (std::size_t t = 0; t < inner; ++t) gx[t] += gr[t] * sv;
                }
                if (s->requires_grad()) {
                    const T* xr = x->t.data.data() + (i * c + j) * inner;
                    T acc = T(0);
                    for (std::size_t t = 0; t < inner; ++t) acc += gr[t] * xr[t];
                    s->t.grad[j] += acc;
                }
            }
    });
}

/// y[n,c,...] = x[n,c,...] + b[c]
template <typename T>
Var<T> channel_bias(Tape<T>& tape, Var<T> x, Var<T> b) {
    std::size_t n, c, inner;
    detail::channel_geometry(x->t.shape, n, c, inner, "channel_bias");
    if (b->t.shape != Shape{c}) throw std::invalid_argument("channel_bias: bad bias length");
    Tensor<T> out = x->t;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            T* row = out.data.data() + (i * c + j) * inner;
            for (std::size_t t = 0; t < inner; ++t) row[t] += b->t[j];
        }
    return tape.make(std::move(out), {x, b}, [x, b, n, c, inner](Node<T>& g) {
        if (x->requires_grad())
            for (std::size_t i = 0; i < g.t.size(); ++i) x->t.grad[i] += g.t.grad[i];
        if (b->requires_grad())
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j) {
                    const T* gr = g.t.grad.data() + (i * c + j) * inner;
                    T acc = T(0);
                    for (std::size_t t = 0; t < inner; ++t) acc += gr[t];
                    b->t.grad[j] += acc;
                }
    });
}

struct BatchStats {
    // per-channel biased moments of the minibatch, in double for accuracy
    std::vector<double> mean;
    std::vector<double> var;
    std::size_t count = 0;  // elements per channel
};

/// Train-phase batch normalization: normalize with the current minibatch
/// statistics (biased variance). Batch statistics are returned so callers
/// can maintain running averages or exact population moments.
template <typename T>
Var<T> batchnorm_train(Tape<T>& tape, Var<T> x, Var<T> gamma, Var<T> beta, T eps,
                       BatchStats* stats_out = nullptr) {
    std::size_t n, c, inner;
    detail::channel_geometry(x->t.shape, n, c, inner, "batchnorm");
    if (n < 2)
        throw std::invalid_argument("batchnorm: train mode needs batch size >= 2");
    if (gamma->t.shape != Shape{c} || beta->t.shape != Shape{c})
        throw std::invalid_argument("batchnorm: parameter length mismatch");
    const std::size_t m = n * inner;
    std::vector<double> mean(c, 0.0), var(c, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            const T* row = x->t.data.data() + (i * c + j) * inner;
            for (std::size_t t = 0; t < inner; ++t) mean[j] += static_cast<double>(row[t]);
        }
    for (std::size_t j = 0; j < c; ++j) mean[j] /= static_cast<double>(m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            const T* row = x->t.data.data() + (i * c + j) * inner;
            for (std::size_t t = 0; t < inner; ++t) {
                double d = static_cast<double>(row[t]) - mean[j];
                var[j] += d * d;
            }
        }
    for (std::size_t j = 0; j < c; ++j) var[j] = std::max(0.0, var[j] / static_cast<double>(m));
    if (stats_out) {
        stats_out->mean = mean;
        stats_out->var = var;
        stats_out->count = m;
    }

    auto inv_std = std::make_shared<std::vector<T>>(c);
    for (std::size_t j = 0; j < c; ++j)
        (*inv_std)[j] = static_cast<T>(1.0 / std::sqrt(var[j] + static_cast<double>(eps)));
    auto xhat = std::make_shared<std::vector<T>>(x->t.size());
    Tensor<T> out(x->t.shape);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            const T* row = x->t.data.data() + (i * c + j) * inner;
            T* orow = out.data.data() + (i * c + j) * inner;
            T* hrow = xhat->data() + (i * c + j) * inner;
            T mu = static_cast<T>(mean[j]);
            T is = (*inv_std)[j];
            for (std::size_t t = 0; t < inner; ++t) {
                hrow[t] = (row[t] - mu) * is;
                orow[t] = gamma->t[j] * hrow[t] + beta->t[j];
            }
        }
    return tape.make(std::move(out), {x, gamma, beta},
                     [x, gamma, beta, xhat, inv_std, n, c, inner, m](Node<T>& g) {
        for (std::size_t j = 0; j < c; ++j) {
            // per-channel reductions over batch and spatial axes
            T sum_g = T(0), sum_gh = T(0);
            for (std::size_t i = 0; i < n; ++i) {
                const T* gr = g.t.grad.data() + (i * c + j) * inner;
                const T* hr = xhat->data() + (i * c + j) * inner;
                for (std::size_t t = 0; t < inner; ++t) {
                    sum_g += gr[t];
                    sum_gh += gr[t] * hr[t];
                }
            }
            if (gamma->requires_grad()) gamma->t.grad[j] += sum_gh;
            if (beta->requires_grad()) beta->t.grad[j] += sum_g;
            if (x->requires_grad()) {
                T k = gamma->t[j] * (*inv_std)[j] / static_cast<T>(m);
                for (std::size_t i = 0; i < n; ++i) {
                    T* gx = x->t.grad.data() + (i * c + j) * inner;
                    const T* gr = g.t.grad.data() + (i * c + j) * inner;
                    const T* hr = xhat->data() + (i * c + j) * inner;
                    for (std::size_t t = 0; t < inner; ++t)
                        gx[t] += k * (static_cast<T>(m) * gr[t] - sum_g - hr[t] * sum_gh);
                }
            }
        }
    });
}

/// [N x C x H x W] -> [N x C] spatial mean.
template <typename T>
Var<T> global_avg_pool(Tape<T>& tape, Var<T> x) {
    if (x->t.rank() != 4) throw std::invalid_argument("global_avg_pool: expected 4-d input");
    std::size_t n = x->t.shape[0], c = x->t.shape[1], hw = x->t.shape[2] * x->t.shape[3];
    Tensor<T> out(Shape{n, c});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            const T* row = x->t.data.data() + (i * c + j) * hw;
            T s = T(0);
            for (std::size_t t = 0; t < hw; ++t) s += row[t];
            out[i * c + j] = s / static_cast<T>(hw);
        }
    return tape.make(std::move(out), {x}, [x, n, c, hw](Node<T>& g) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                T gv = g.t.grad[i * c + j] / static_cast<T>(hw);
                T* gx = x->t.grad.data() + (i * c + j) * hw;
                for (std::size_t t = 0; t < hw; ++t) gx[t] += gv;
            }
    });
}

/// [N x C x H x W] -> [N x C*H*W]
template <typename T>
Var<T> flatten(Tape<T>& tape, Var<T> x) {
    if (x->t.rank() < 2) throw std::invalid_argument("flatten: expected rank >= 2");
    std::size_t n = x->t.shape[0];
    Tensor<T> out(Shape{n, x->t.size() / n}, x->t.data);
    return tape.make(std::move(out), {x}, [x](Node<T>& g) {
        for (std::size_t i = 0; i < g.t.size(); ++i) x->t.grad[i] += g.t.grad[i];
    });
}

template <typename T>
Var<T> sum(Tape<T>& tape, Var<T> x) {
    T s = T(0);
    for (T v : x->t.data) s += v;
    return tape.make(Tensor<T>::scalar(s), {x}, [x](Node<T>& g) {
        T gv = g.t.grad[0];
        for (std::size_t i = 0; i < x->t.size(); ++i) x->t.grad[i] += gv;
    });
}

/// sum |x|; subgradient at 0 is 0.
template <typename T>
Var<T> sum_abs(Tape<T>& tape, Var<T> x) {
    T s = T(0);
    for (T v : x->t.data) s += v < T(0) ? -v : v;
    return tape.make(Tensor<T>::scalar(s), {x}, [x](Node<T>& g) {
        T gv = g.t.grad[0];
        for (std::size_t i = 0; i < x->t.size(); ++i) {
            T v = x->t[i];
            if (v > T(0))
                x->t.grad[i] += gv;
            else if (v < T(0))
                x->t.grad[i] -= gv;
        }
    });
}

template <typename T>
Var<T> sum_squares(Tape<T>& tape, Var<T> x) {
    T s = T(0);
    for (T v : x->t.data) s += v * v;
    return tape.make(Tensor<T>::scalar(s), {x}, [x](Node<T>& g) {
        T gv = g.t.grad[0];
        for (std::size_t i = 0; i < x->t.size(); ++i) x->t.grad[i] += T(2) * gv * x->t[i];
    });
}

}  // namespace rescl
