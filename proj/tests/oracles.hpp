#pragma once

// Independent reference implementations the tests check the library
// against. These deliberately avoid the library's compute paths.

#include <cmath>
#include <cstddef>
#include <vector>

#include "rescl/random.hpp"
#include "rescl/tensor.hpp"

namespace oracle {

// Direct six-loop cross-correlation, the reference for the im2col path.
template <typename T>
rescl::Tensor<T> conv2d_ref(const rescl::Tensor<T>& x, const rescl::Tensor<T>& w,
                            const rescl::Tensor<T>& b, std::size_t stride, std::size_t pad) {
    std::size_t N = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
    std::size_t Co = w.shape[0], Kh = w.shape[2], Kw = w.shape[3];
    std::size_t Ho = (H + 2 * pad - Kh) / stride + 1;
    std::size_t Wo = (W + 2 * pad - Kw) / stride + 1;
    rescl::Tensor<T> y(rescl::Shape{N, Co, Ho, Wo});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Co; ++co)
            for (std::size_t oh = 0; oh < Ho; ++oh)
                for (std::size_t ow = 0; ow < Wo; ++ow) {
                    T acc = b[co];
                    for (std::size_t ci = 0; ci < Ci; ++ci)
                        for (std::size_t kh = 0; kh < Kh; ++kh)
                            for (std::size_t kw = 0; kw < Kw; ++kw) {
                                std::ptrdiff_t ih =
                                    static_cast<std::ptrdiff_t>(oh * stride + kh) -
                                    static_cast<std::ptrdiff_t>(pad);
                                std::ptrdiff_t iw =
                                    static_cast<std::ptrdiff_t>(ow * stride + kw) -
                                    static_cast<std::ptrdiff_t>(pad);
                                if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H) || iw < 0 ||
                                    iw >= static_cast<std::ptrdiff_t>(W))
                                    continue;
                                acc += x.at4(n, ci, static_cast<std::size_t>(ih),
                                             static_cast<std::size_t>(iw)) *
                                       w.at4(co, ci, kh, kw);
                            }
                    y.at4(n, co, oh, ow) = acc;
                }
    return y;
}

template <typename T>
rescl::Tensor<T> random_tensor(rescl::Shape shape, rescl::SplitMix64& rng, double lo = -1.0,
                               double hi = 1.0) {
    rescl::Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
double max_abs_diff(const rescl::Tensor<T>& a, const rescl::Tensor<T>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

template <typename T>
double max_rel_diff(const rescl::Tensor<T>& a, const rescl::Tensor<T>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double da = a[i], db = b[i];
        m = std::max(m, std::abs(da - db) / (1.0 + std::abs(db)));
    }
    return m;
}

// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
    auto ranks = [](const std::vector<double>& v) {
        std::size_t n = v.size();
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return v[a] < v[b];
        });
        std::vector<double> r(n);
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
            double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    auto rx = ranks(xs), ry = ranks(ys);
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= rx.size();
    my /= ry.size();
    double num = 0, dx = 0, dy = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        num += (rx[i] - mx) * (ry[i] - my);
        dx += (rx[i] - mx) * (rx[i] - mx);
        dy += (ry[i] - my) * (ry[i] - my);
    }
    return num / std::sqrt(dx * dy);
}

}  // namespace oracle
