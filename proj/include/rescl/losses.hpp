#pragma once

#include <string>
#include <utility>
#include <vector>

#include "rescl/combine.hpp"

namespace rescl {

enum class AlphaNorm { L1, L2 };

template <typename T>
struct LossConfig {
    T lambda = static_cast<T>(1e-4);      // decay multiplier for alpha
    T lambda_dec = static_cast<T>(1e-4);  // weight decay for theta_t
    T temperature = T(2);
    AlphaNorm alpha_norm = AlphaNorm::L1;
    Parameterization parameterization = Parameterization::Residual;
};

/// lambda * sum |alpha| over all combination layers (or lambda * 1/2 sum
/// alpha^2 for L2). Under the residual parameterization the minimizer is
/// the source network. Subgradient of the L1 term at 0 is 0.
template <typename T>
Var<T> alpha_decay(ForwardCtx<T>& ctx, std::vector<CombinationParams<T>>& combs, T lambda,
                   AlphaNorm norm) {
    if (lambda < T(0)) throw std::invalid_argument("alpha_decay: lambda must be >= 0");
    Var<T> total;
    for (auto& p : combs) {
        auto as = ctx.param(p.alpha_s);
        auto at = ctx.param(p.alpha_t);
        Var<T> term;
        if (norm == AlphaNorm::L1)
            term = add(ctx.tape, sum_abs(ctx.tape, as), sum_abs(ctx.tape, at));
        else
            term = add(ctx.tape, sum_squares(ctx.tape, as), sum_squares(ctx.tape, at));
        total = total ? add(ctx.tape, total, term) : term;
    }
    if (!total) return ctx.tape.constant(Tensor<T>::scalar(T(0)));
    T factor = norm == AlphaNorm::L1 ? lambda : lambda * T(0.5);
    return scale(ctx.tape, total, factor);
}

/// 1/2 * lambda_dec * ||theta||_2^2 over the given parameters (trainable
/// weights and task heads; alpha and the frozen source are excluded by the
/// caller).
template <typename T>
Var<T> weight_decay_l2(ForwardCtx<T>& ctx, const std::vector<Var<T>>& params, T lambda_dec) {
    if (lambda_dec < T(0)) throw std::invalid_argument("weight_decay_l2: lambda must be >= 0");
    Var<T> total;
    for (const auto& p : params) {
        auto term = sum_squares(ctx.tape, p);
        total = total ? add(ctx.tape, total, term) : term;
    }
    if (!total) return ctx.tape.constant(Tensor<T>::scalar(T(0)));
    return scale(ctx.tape, total, lambda_dec * T(0.5));
}

/// The combined-training objective: one tempered KL term per source head
/// against the cached source outputs, a tempered KL distillation term for
/// the target head against the fine-tuned outputs, the alpha decay loss,
/// and L2 weight decay on the trainable weights.
template <typename T>
Var<T> rescl_total_loss(ForwardCtx<T>& ctx, CombinedNetwork<T>& c, Var<T> x,
                        const std::vector<std::pair<std::string, Tensor<T>>>& source_targets,
                        const Tensor<T>& target_targets, const std::vector<Var<T>>& theta_t,
                        const LossConfig<T>& cfg) {
    if (source_targets.empty())
        throw std::invalid_argument("rescl_total_loss: missing source soft targets");
    c.parameterization = cfg.parameterization;
    auto feats = combined_trunk_forward(ctx, c, x);
    ForwardCtx<T> frozen{ctx.tape};
    Var<T> loss;
    for (const auto& [task, rows] : source_targets) {
        auto logits = head_forward(frozen, c.source, task, feats);
        auto term = kl_tempered(ctx.tape, rows, logits, cfg.temperature);
        loss = loss ? add(ctx.tape, loss, term) : term;
    }
    auto tgt_logits = head_forward(ctx, c.target, c.target_task, feats);
    loss = add(ctx.tape, loss, kl_tempered(ctx.tape, target_targets, tgt_logits, cfg.temperature));
    loss = add(ctx.tape, loss, alpha_decay(ctx, c.combs, cfg.lambda, cfg.alpha_norm));
    loss = add(ctx.tape, loss, weight_decay_l2(ctx, theta_t, cfg.lambda_dec));
    return loss;
}

}  // namespace rescl
