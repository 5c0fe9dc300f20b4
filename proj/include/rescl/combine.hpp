#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rescl/layers.hpp"

namespace rescl {

/// Residual: out = (1 + alpha_s) o y_s + alpha_t o y_t.
/// Naive: out = alpha_s o y_s + alpha_t o y_t (ablation; decaying alpha
/// here silences the source path instead of restoring it).
enum class Parameterization { Residual, Naive };

/// One learnable (alpha_s, alpha_t) pair per combination layer, sized by
/// the output channels of the block pair it mixes. Pairs are never shared
/// between layers.
template <typename T>
struct CombinationParams {
    Tensor<T> alpha_s, alpha_t;
};

/// Frozen source network plus a trainable fine-tuned copy, mixed by one
/// combination layer per mergeable block. Task heads are not
/// reparameterized: old heads stay frozen on the source side and the new
/// task head lives in the target network.
template <typename T>
struct CombinedNetwork {
    NetworkState<T> source;
    NetworkState<T> target;
    std::string target_task;
    std::vector<CombinationParams<T>> combs;
    Parameterization parameterization = Parameterization::Residual;

    std::vector<std::string> source_tasks() const {
        std::vector<std::string> out;
        for (const auto& [task, head] : source.heads) out.push_back(task);
        return out;
    }
};

// ---------------------------------------------------------------------------
// Mergeable-block enumeration (depth order; a unit lists entry, mid, out,
// then its projection).

template <typename T, typename F>
void for_each_mergeable_block(NetworkState<T>& net, F&& fn) {
    for (auto& item : net.trunk)
        std::visit(
            [&](auto& it) {
                using I = std::decay_t<decltype(it)>;
                if constexpr (std::is_same_v<I, LinearBlock<T>>)
                    fn(it);
                else if constexpr (std::is_same_v<I, ResidualUnit<T>>) {
                    fn(it.entry);
                    fn(it.mid);
                    fn(it.out);
                    if (it.projection) fn(*it.projection);
                }
            },
            item);
}

template <typename T>
std::size_t mergeable_block_count(NetworkState<T>& net) {
    std::size_t n = 0;
    for_each_mergeable_block(net, [&](LinearBlock<T>&) { ++n; });
    return n;
}

// ---------------------------------------------------------------------------
// Combination layer.

template <typename T>
Var<T> combine_outputs(ForwardCtx<T>& ctx, Var<T> y_s, Var<T> y_t, CombinationParams<T>& p,
                       Parameterization mode = Parameterization::Residual) {
    check_same_shape(y_s->t, y_t->t, "combine_outputs");
    auto as = ctx.param(p.alpha_s);
    auto at = ctx.param(p.alpha_t);
    auto src_scaled = scale_per_channel(ctx.tape, y_s, as);
    auto tgt_scaled = scale_per_channel(ctx.tape, y_t, at);
    if (mode == Parameterization::Naive) return add(ctx.tape, src_scaled, tgt_scaled);
    return add(ctx.tape, add(ctx.tape, y_s, src_scaled), tgt_scaled);
}

/// Build a combined network from a frozen source and a structurally
/// identical target. One combination layer per mergeable block, alpha
/// initialized to (-1/2, +1/2) so both paths start balanced. Identity
/// shortcuts are shared; projection shortcuts get their own pair.
template <typename T>
CombinedNetwork<T> build_combined(const NetworkState<T>& net_s, const NetworkState<T>& net_t,
                                  const std::string& target_task) {
    CombinedNetwork<T> c;
    c.source = net_s;
    c.target = net_t;
    c.target_task = target_task;
    if (to_spec_string(c.source) != to_spec_string(c.target) ||
        c.source.input_shape != c.target.input_shape)
        throw std::invalid_argument("build_combined: source and target specs differ");
    if (!c.target.has_task(target_task))
        throw std::invalid_argument("build_combined: target network lacks task '" + target_task +
                                    "'");
    for_each_mergeable_block(c.source, [&](LinearBlock<T>& blk) {
        std::size_t ch = blk.out_channels();
        c.combs.push_back(CombinationParams<T>{Tensor<T>::full(Shape{ch}, T(-0.5)),
                                               Tensor<T>::full(Shape{ch}, T(0.5))});
    });
    return c;
}

/// Forward through the combined trunk. The source path always runs with
/// frozen parameters and source population statistics; the target path
/// follows the caller's context (batch statistics while training).
template <typename T>
Var<T> combined_trunk_forward(ForwardCtx<T>& ctx, CombinedNetwork<T>& c, Var<T> x) {
    ForwardCtx<T> sctx{ctx.tape};
    sctx.bn_mode = BnMode::Population;
    sctx.bn_force_population = true;
    std::size_t k = 0;
    auto combined_block = [&](LinearBlock<T>& sb, LinearBlock<T>& tb, Var<T> in) {
        auto y_s = block_forward(sctx, sb, in);
        auto y_t = block_forward(ctx, tb, in);
        return combine_outputs(ctx, y_s, y_t, c.combs[k++], c.parameterization);
    };
    for (std::size_t i = 0; i < c.source.trunk.size(); ++i) {
        auto& s_item = c.source.trunk[i];
        auto& t_item = c.target.trunk[i];
        if (auto* sb = std::get_if<LinearBlock<T>>(&s_item)) {
            x = combined_block(*sb, std::get<LinearBlock<T>>(t_item), x);
        } else if (std::holds_alternative<ReluItem>(s_item)) {
            x = relu(ctx.tape, x);
        } else if (std::holds_alternative<GlobalAvgPoolItem>(s_item)) {
            x = global_avg_pool(ctx.tape, x);
        } else if (std::holds_alternative<FlattenItem>(s_item)) {
            x = flatten(ctx.tape, x);
        } else {
            auto& su = std::get<ResidualUnit<T>>(s_item);
            auto& tu = std::get<ResidualUnit<T>>(t_item);
            auto h = relu(ctx.tape, combined_block(su.entry, tu.entry, x));
            h = relu(ctx.tape, combined_block(su.mid, tu.mid, h));
            h = combined_block(su.out, tu.out, h);
            auto sc = su.projection ? combined_block(*su.projection, *tu.projection, x) : x;
            x = add(ctx.tape, h, sc);
        }
    }
    return x;
}

template <typename T>
Var<T> combined_forward(ForwardCtx<T>& ctx, CombinedNetwork<T>& c, Var<T> x,
                        const std::string& task) {
    auto feats = combined_trunk_forward(ctx, c, x);
    if (task == c.target_task) return head_forward(ctx, c.target, task, feats);
    ForwardCtx<T> sctx{ctx.tape};  // frozen source heads
    return head_forward(sctx, c.source, task, feats);
}

// ---------------------------------------------------------------------------
// Folding. Every linear block collapses to one conv, one linear, or one
// per-channel affine once BN layers are in their inference form.

namespace detail {

template <typename T>
struct ChannelAffine {
    std::vector<T> scale, shift;
    static ChannelAffine identity(std::size_t c) {
        return ChannelAffine{std::vector<T>(c, T(1)), std::vector<T>(c, T(0))};
    }
};

template <typename T>
ChannelAffine<T> bn_as_affine(const BatchNormLayer<T>& bn) {
    if (!bn.stats_finalized)
        throw std::invalid_argument("merge: batchnorm population statistics not finalized");
    std::size_t c = bn.gamma.size();
    ChannelAffine<T> a{std::vector<T>(c), std::vector<T>(c)};
    for (std::size_t j = 0; j < c; ++j) {
        double denom = static_cast<double>(bn.pop_var[j]) + static_cast<double>(bn.eps);
        if (!(denom > 0)) throw std::invalid_argument("merge: sigma^2 + eps must be positive");
        a.scale[j] = static_cast<T>(static_cast<double>(bn.gamma[j]) / std::sqrt(denom));
        a.shift[j] = bn.beta[j] - bn.pop_mean[j] * a.scale[j];
    }
    return a;
}

// second o first
template <typename T>
ChannelAffine<T> compose(const ChannelAffine<T>& second, const ChannelAffine<T>& first) {
    std::size_t c = second.scale.size();
    ChannelAffine<T> out{std::vector<T>(c), std::vector<T>(c)};
    for (std::size_t j = 0; j < c; ++j) {
        out.scale[j] = second.scale[j] * first.scale[j];
        out.shift[j] = second.scale[j] * first.shift[j] + second.shift[j];
    }
    return out;
}

// conv(affine(x)): scale kernel input channels, push the shift through the
// kernel into the bias. Zero padding happens after the affine in the
// two-layer form, so border taps would see 0 rather than the shift; the
// fold is exact only for unpadded convolutions.
template <typename T>
void fold_pre_affine_conv(ConvLayer<T>& conv, const ChannelAffine<T>& in) {
    if (conv.pad != 0) {
        bool shifted = false;
        for (T t : in.shift) shifted = shifted || t != T(0);
        if (shifted)
            throw std::invalid_argument(
                "fold: affine-then-conv with zero padding is not exactly foldable");
    }
    std::size_t co = conv.W.shape[0], ci = conv.W.shape[1], kk = conv.W.shape[2] * conv.W.shape[3];
    for (std::size_t o = 0; o < co; ++o) {
        T acc = T(0);
        for (std::size_t i = 0; i < ci; ++i) {
            T* w = conv.W.data.data() + (o * ci + i) * kk;
            for (std::size_t t = 0; t < kk; ++t) {
                acc += w[t] * in.shift[i];
                w[t] *= in.scale[i];
            }
        }
        conv.b[o] += acc;
    }
}

// affine(conv(x)): scale output channels and adjust bias
template <typename T>
void fold_post_affine_conv(ConvLayer<T>& conv, const ChannelAffine<T>& out) {
    std::size_t co = conv.W.shape[0], rest = conv.W.size() / co;
    for (std::size_t o = 0; o < co; ++o) {
        T* w = conv.W.data.data() + o * rest;
        for (std::size_t t = 0; t < rest; ++t) w[t] *= out.scale[o];
        conv.b[o] = conv.b[o] * out.scale[o] + out.shift[o];
    }
}

template <typename T>
void fold_pre_affine_linear(LinearLayer<T>& lin, const ChannelAffine<T>& in) {
    std::size_t co = lin.W.shape[0], ci = lin.W.shape[1];
    for (std::size_t o = 0; o < co; ++o) {
        T acc = T(0);
        for (std::size_t i = 0; i < ci; ++i) {
            acc += lin.W[o * ci + i] * in.shift[i];
            lin.W[o * ci + i] *= in.scale[i];
        }
        lin.b[o] += acc;
    }
}

template <typename T>
void fold_post_affine_linear(LinearLayer<T>& lin, const ChannelAffine<T>& out) {
    std::size_t co = lin.W.shape[0], ci = lin.W.shape[1];
    for (std::size_t o = 0; o < co; ++o) {
        for (std::size_t i = 0; i < ci; ++i) lin.W[o * ci + i] *= out.scale[o];
        lin.b[o] = lin.b[o] * out.scale[o] + out.shift[o];
    }
}

}  // namespace detail

enum class FoldOrder { ConvThenBn, BnThenConv };

/// Fold an inference-phase BN into an adjacent conv, in either order.
template <typename T>
ConvLayer<T> fold_bn_into_conv(const ConvLayer<T>& conv, const BatchNormLayer<T>& bn,
                               FoldOrder order) {
    ConvLayer<T> out = conv;
    auto a = detail::bn_as_affine(bn);
    if (order == FoldOrder::ConvThenBn)
        detail::fold_post_affine_conv(out, a);
    else
        detail::fold_pre_affine_conv(out, a);
    return out;
}

/// Collapse a linear block into a single equivalent layer (inference
/// semantics). Blocks with a conv/linear fold surrounding BN/affine layers
/// into it; normalization-only blocks collapse to one per-channel affine.
template <typename T>
BlockPrim<T> fold_block(const LinearBlock<T>& blk) {
    std::optional<ConvLayer<T>> conv;
    std::optional<LinearLayer<T>> lin;
    std::optional<detail::ChannelAffine<T>> affine;  // pending pre- or post-transform
    auto flush_affine_into = [&](auto& layer, auto fold_pre) {
        if (affine) {
            fold_pre(layer, *affine);
            affine.reset();
        }
    };
    for (const auto& prim : blk.prims) {
        std::visit(
            [&](const auto& layer) {
                using L = std::decay_t<decltype(layer)>;
                if constexpr (std::is_same_v<L, ConvLayer<T>>) {
                    if (conv || lin)
                        throw std::invalid_argument("fold_block: more than one conv/linear");
                    conv = layer;
                    flush_affine_into(*conv,
                                      [](ConvLayer<T>& c, const detail::ChannelAffine<T>& a) {
                                          detail::fold_pre_affine_conv(c, a);
                                      });
                } else if constexpr (std::is_same_v<L, LinearLayer<T>>) {
                    if (conv || lin)
                        throw std::invalid_argument("fold_block: more than one conv/linear");
                    lin = layer;
                    flush_affine_into(*lin,
                                      [](LinearLayer<T>& l, const detail::ChannelAffine<T>& a) {
                                          detail::fold_pre_affine_linear(l, a);
                                      });
                } else {
                    detail::ChannelAffine<T> a;
                    if constexpr (std::is_same_v<L, BatchNormLayer<T>>)
                        a = detail::bn_as_affine(layer);
                    else
                        a = detail::ChannelAffine<T>{
                            std::vector<T>(layer.scale.data.begin(), layer.scale.data.end()),
                            std::vector<T>(layer.shift.data.begin(), layer.shift.data.end())};
                    if (conv)
                        detail::fold_post_affine_conv(*conv, a);
                    else if (lin)
                        detail::fold_post_affine_linear(*lin, a);
                    else if (affine)
                        affine = detail::compose(a, *affine);
                    else
                        affine = a;
                }
            },
            prim);
    }
    if (conv) return BlockPrim<T>(std::move(*conv));
    if (lin) return BlockPrim<T>(std::move(*lin));
    if (!affine) throw std::invalid_argument("fold_block: empty block");
    std::size_t c = affine->scale.size();
    AffineLayer<T> out{Tensor<T>(Shape{c}, affine->scale), Tensor<T>(Shape{c}, affine->shift)};
    return BlockPrim<T>(std::move(out));
}

namespace detail {

// W_merged = (cs 1^T) o W_s' + (alpha_t 1^T) o W_t', biases alike, where
// cs = 1 + alpha_s (residual) or alpha_s (naive ablation).
template <typename T>
LinearBlock<T> merge_block_pair(const LinearBlock<T>& src, const LinearBlock<T>& tgt,
                                const CombinationParams<T>& p, Parameterization mode) {
    BlockPrim<T> fs = fold_block(src);
    BlockPrim<T> ft = fold_block(tgt);
    std::size_t ch = p.alpha_s.size();
    std::vector<T> cs(ch), ct(ch);
    for (std::size_t j = 0; j < ch; ++j) {
        cs[j] = (mode == Parameterization::Residual ? T(1) : T(0)) + p.alpha_s[j];
        ct[j] = p.alpha_t[j];
    }
    LinearBlock<T> out;
    if (auto* c1 = std::get_if<ConvLayer<T>>(&fs)) {
        auto& c2 = std::get<ConvLayer<T>>(ft);
        ConvLayer<T> m = *c1;
        std::size_t rest = m.W.size() / m.W.shape[0];
        for (std::size_t o = 0; o < m.W.shape[0]; ++o) {
            for (std::size_t t = 0; t < rest; ++t)
                m.W[o * rest + t] = cs[o] * c1->W[o * rest + t] + ct[o] * c2.W[o * rest + t];
            m.b[o] = cs[o] * c1->b[o] + ct[o] * c2.b[o];
        }
        out.prims.emplace_back(std::move(m));
    } else if (auto* l1 = std::get_if<LinearLayer<T>>(&fs)) {
        auto& l2 = std::get<LinearLayer<T>>(ft);
        LinearLayer<T> m = *l1;
        std::size_t ci = m.W.shape[1];
        for (std::size_t o = 0; o < m.W.shape[0]; ++o) {
            for (std::size_t i = 0; i < ci; ++i)
                m.W[o * ci + i] = cs[o] * l1->W[o * ci + i] + ct[o] * l2.W[o * ci + i];
            m.b[o] = cs[o] * l1->b[o] + ct[o] * l2.b[o];
        }
        out.prims.emplace_back(std::move(m));
    } else {
        auto& a1 = std::get<AffineLayer<T>>(fs);
        auto& a2 = std::get<AffineLayer<T>>(ft);
        AffineLayer<T> m = a1;
        for (std::size_t j = 0; j < ch; ++j) {
            m.scale[j] = cs[j] * a1.scale[j] + ct[j] * a2.scale[j];
            m.shift[j] = cs[j] * a1.shift[j] + ct[j] * a2.shift[j];
        }
        out.prims.emplace_back(std::move(m));
    }
    return out;
}

}  // namespace detail

/// Collapse the combined network into a single network with the source
/// trunk's deployed size: per block, fold BN into the adjacent conv/linear
/// on each path, then mix both paths into one layer via the combination
/// coefficients. Pure function of the combined state.
template <typename T>
NetworkState<T> merge(const CombinedNetwork<T>& c) {
    NetworkState<T> out;
    out.input_shape = c.source.input_shape;
    out.trunk_out_dim = c.source.trunk_out_dim;
    std::size_t k = 0;
    auto merge_pair = [&](const LinearBlock<T>& s, const LinearBlock<T>& t) {
        return detail::merge_block_pair(s, t, c.combs[k++], c.parameterization);
    };
    for (std::size_t i = 0; i < c.source.trunk.size(); ++i) {
        const auto& s_item = c.source.trunk[i];
        const auto& t_item = c.target.trunk[i];
        if (auto* sb = std::get_if<LinearBlock<T>>(&s_item)) {
            out.trunk.emplace_back(merge_pair(*sb, std::get<LinearBlock<T>>(t_item)));
        } else if (std::holds_alternative<ReluItem>(s_item)) {
            out.trunk.emplace_back(ReluItem{});
        } else if (std::holds_alternative<GlobalAvgPoolItem>(s_item)) {
            out.trunk.emplace_back(GlobalAvgPoolItem{});
        } else if (std::holds_alternative<FlattenItem>(s_item)) {
            out.trunk.emplace_back(FlattenItem{});
        } else {
            const auto& su = std::get<ResidualUnit<T>>(s_item);
            const auto& tu = std::get<ResidualUnit<T>>(t_item);
            ResidualUnit<T> mu;
            mu.entry = merge_pair(su.entry, tu.entry);
            mu.mid = merge_pair(su.mid, tu.mid);
            mu.out = merge_pair(su.out, tu.out);
            if (su.projection) mu.projection = merge_pair(*su.projection, *tu.projection);
            out.trunk.emplace_back(std::move(mu));
        }
    }
    out.heads = c.source.heads;
    out.heads[c.target_task] = c.target.heads.at(c.target_task);
    return out;
}

/// Learnable parameter count of the trunk in deployed (fully folded) form.
/// This is the size that stays constant under merging.
template <typename T>
std::size_t inference_param_count(NetworkState<T>& net) {
    std::size_t n = 0;
    for_each_mergeable_block(net, [&](LinearBlock<T>& blk) {
        BlockPrim<T> f = fold_block(blk);
        std::visit(
            [&](const auto& layer) {
                using L = std::decay_t<decltype(layer)>;
                if constexpr (std::is_same_v<L, ConvLayer<T>> || std::is_same_v<L, LinearLayer<T>>)
                    n += layer.W.size() + layer.b.size();
                else if constexpr (std::is_same_v<L, AffineLayer<T>>)
                    n += layer.scale.size() + layer.shift.size();
                // fold_block never yields a bare BN layer
            },
            f);
    });
    return n;
}

// ---------------------------------------------------------------------------
// Diagnostics.

template <typename T>
struct AlphaStatsRow {
    std::size_t depth;  // combination-layer index in depth order
    T mean_abs_alpha_s;
    T mean_abs_alpha_t;
    T mean_abs_alpha;
};

/// Per-depth mean |alpha| table over all combination layers.
template <typename T>
std::vector<AlphaStatsRow<T>> alpha_stats(const CombinedNetwork<T>& c) {
    std::vector<AlphaStatsRow<T>> rows;
    for (std::size_t k = 0; k < c.combs.size(); ++k) {
        const auto& p = c.combs[k];
        T ss = T(0), st = T(0);
        for (T v : p.alpha_s.data) ss += std::abs(v);
        for (T v : p.alpha_t.data) st += std::abs(v);
        std::size_t n = p.alpha_s.size();
        rows.push_back(AlphaStatsRow<T>{k, ss / static_cast<T>(n), st / static_cast<T>(n),
                                        (ss + st) / static_cast<T>(2 * n)});
    }
    return rows;
}

template <typename T>
T overall_mean_abs_alpha(const CombinedNetwork<T>& c) {
    double sum = 0;
    std::size_t n = 0;
    for (const auto& p : c.combs) {
        for (T v : p.alpha_s.data) sum += std::abs(static_cast<double>(v));
        for (T v : p.alpha_t.data) sum += std::abs(static_cast<double>(v));
        n += p.alpha_s.size() + p.alpha_t.size();
    }
    return static_cast<T>(sum / static_cast<double>(n));
}

/// Exact full-pass population statistics for the target-path BN layers of
/// a combined network, collected by forwarding the combined trunk (source
/// path stays pinned to its source statistics).
template <typename T>
void recompute_target_population_stats(CombinedNetwork<T>& c, const Tensor<T>& images,
                                       std::size_t batch = 64) {
    if (images.shape.empty() || images.shape[0] == 0)
        throw std::invalid_argument("recompute_target_population_stats: empty dataset");
    std::size_t n_bn = 0;
    for_each_bn(c.target, [&](const std::string&, BatchNormLayer<T>& bn) {
        bn.begin_collect();
        ++n_bn;
    });
    if (n_bn == 0) return;
    for (auto [start, len] : batch_ranges(images.shape[0], batch)) {
        Tape<T> tape;
        ForwardCtx<T> ctx{tape};
        ctx.bn_mode = BnMode::Collect;
        auto x = tape.constant(slice_rows(images, start, len));
        combined_trunk_forward(ctx, c, x);
    }
    for_each_bn(c.target, [&](const std::string&, BatchNormLayer<T>& bn) { bn.finish_collect(); });
}

// Named-tensor traversal for combined checkpoints: source under "src.",
// target under "tgt.", combination parameters as "comb.<k>.alpha_s/_t".
template <typename T, typename F>
void for_each_combined_tensor(CombinedNetwork<T>& c, F&& fn) {
    for_each_named_tensor(c.source,
                          [&](const std::string& n, Tensor<T>& t) { fn("src." + n, t); });
    for_each_named_tensor(c.target,
                          [&](const std::string& n, Tensor<T>& t) { fn("tgt." + n, t); });
    for (std::size_t k = 0; k < c.combs.size(); ++k) {
        fn("comb." + std::to_string(k) + ".alpha_s", c.combs[k].alpha_s);
        fn("comb." + std::to_string(k) + ".alpha_t", c.combs[k].alpha_t);
    }
}

}  // namespace rescl
