#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "rescl/tensor.hpp"

namespace rescl {

/// Compare reverse-mode gradients against central finite differences.
///
/// `params` are the tensors the loss reads; `loss_value` evaluates the loss
/// from their current contents; `loss_grads` returns the autodiff gradient
/// for each parameter, in the same order. Returns the max over elements of
/// |g_ad - g_fd| / (1e-8 + |g_ad| + |g_fd|), with central step 1e-5.
/// Meant for 64-bit tensors.
template <typename T>
T grad_check(std::vector<Tensor<T>*> params, const std::function<T()>& loss_value,
             const std::function<std::vector<Tensor<T>>()>& loss_grads) {
    const T h = static_cast<T>(1e-5);
    std::vector<Tensor<T>> ad = loss_grads();
    if (ad.size() != params.size())
        throw std::invalid_argument("grad_check: gradient count mismatch");
    T worst = T(0);
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor<T>& t = *params[p];
        if (ad[p].shape != t.shape)
            throw std::invalid_argument("grad_check: gradient shape mismatch");
        for (std::size_t i = 0; i < t.size(); ++i) {
            T saved = t[i];
            t[i] = saved + h;
            T up = loss_value();
            t[i] = saved - h;
            T down = loss_value();
            t[i] = saved;
            if (!std::isfinite(static_cast<double>(up)) ||
                !std::isfinite(static_cast<double>(down)))
                throw std::runtime_error("grad_check: non-finite loss during perturbation");
            T fd = (up - down) / (T(2) * h);
            T g = ad[p][i];
            T err = std::abs(g - fd) / (static_cast<T>(1e-8) + std::abs(g) + std::abs(fd));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace rescl
