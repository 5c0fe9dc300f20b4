#pragma once

#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "rescl/autograd.hpp"
#include "rescl/random.hpp"
#include "rescl/tensor.hpp"

namespace rescl {

// ---------------------------------------------------------------------------
// Layer primitives.

template <typename T>
struct ConvLayer {
    Tensor<T> W;  // [Co x Ci x Kh x Kw]
    Tensor<T> b;  // [Co]
    std::size_t stride = 1, pad = 1;
};

template <typename T>
struct LinearLayer {
    Tensor<T> W;  // [Co x Ci]
    Tensor<T> b;  // [Co]
};

/// Batch normalization with the usual split personality: minibatch
/// statistics in training, stored population statistics at inference.
/// Population moments use the biased (1/N) variance throughout.
template <typename T>
struct BatchNormLayer {
    Tensor<T> gamma, beta;
    Tensor<T> pop_mean, pop_var;
    T eps = static_cast<T>(1e-5);
    T momentum = static_cast<T>(0.1);
    bool stats_finalized = false;

    // transient exact-moment accumulators for recompute_population_stats
    bool collecting = false;
    double acc_count = 0;
    std::vector<double> acc_sum, acc_sumsq;

    std::size_t channels() const { return gamma.size(); }

    void begin_collect() {
        collecting = true;
        acc_count = 0;
        acc_sum.assign(channels(), 0.0);
        acc_sumsq.assign(channels(), 0.0);
    }
    void finish_collect() {
        for (std::size_t c = 0; c < channels(); ++c) {
            double mu = acc_sum[c] / acc_count;
            pop_mean[c] = static_cast<T>(mu);
            pop_var[c] = static_cast<T>(std::max(0.0, acc_sumsq[c] / acc_count - mu * mu));
        }
        collecting = false;
        stats_finalized = true;
    }
};

/// Per-channel y = scale * x + shift. This is what a BN layer folds into,
/// so merged networks stay representable.
template <typename T>
struct AffineLayer {
    Tensor<T> scale, shift;
};

template <typename T>
using BlockPrim = std::variant<ConvLayer<T>, LinearLayer<T>, BatchNormLayer<T>, AffineLayer<T>>;

/// A maximal run of linear operations between nonlinearities: at most one
/// conv or linear plus any BN/affine layers around it. Always collapsible
/// to a single layer in inference (see combine.hpp).
template <typename T>
struct LinearBlock {
    std::vector<BlockPrim<T>> prims;

    std::size_t out_channels() const {
        std::size_t c = 0;
        for (const auto& p : prims)
            std::visit(
                [&](const auto& l) {
                    using L = std::decay_t<decltype(l)>;
                    if constexpr (std::is_same_v<L, ConvLayer<T>> ||
                                  std::is_same_v<L, LinearLayer<T>>)
                        c = l.W.shape[0];
                    else if constexpr (std::is_same_v<L, BatchNormLayer<T>>)
                        c = l.gamma.size();
                    else
                        c = l.scale.size();
                },
                p);
        return c;
    }
};

struct ReluItem {};
struct GlobalAvgPoolItem {};
struct FlattenItem {};

/// Pre-activation residual unit:
///   out = shortcut(x) + out_block(relu(mid_block(relu(entry_block(x)))))
/// entry = [BN] (or [affine] once merged), mid = [conv,BN] (or [conv]),
/// out = [conv]; projection is a 1x1 conv block when shape changes.
template <typename T>
struct ResidualUnit {
    LinearBlock<T> entry, mid, out;
    std::optional<LinearBlock<T>> projection;
};

template <typename T>
using TrunkItem =
    std::variant<LinearBlock<T>, ReluItem, GlobalAvgPoolItem, FlattenItem, ResidualUnit<T>>;

// ---------------------------------------------------------------------------
// Network container.

template <typename T>
struct NetworkState {
    Shape input_shape;  // per-sample shape, e.g. {1,8,8} or {16}
    std::vector<TrunkItem<T>> trunk;
    std::map<std::string, LinearLayer<T>> heads;  // one per registered task
    std::size_t trunk_out_dim = 0;

    bool has_task(const std::string& task) const { return heads.count(task) != 0; }
};

// ---------------------------------------------------------------------------
// Forward machinery.

enum class BnMode { Batch, Population, Collect };

template <typename T>
struct ForwardCtx {
    Tape<T>& tape;
    BnMode bn_mode = BnMode::Population;
    bool bn_force_population = false;  // pinned source-path statistics
    const std::unordered_map<const void*, Var<T>>* trainable = nullptr;

    Var<T> param(const Tensor<T>& t) {
        if (trainable) {
            auto it = trainable->find(static_cast<const void*>(&t));
            if (it != trainable->end()) return it->second;
        }
        return tape.constant(t);
    }
    bool is_trainable(const Tensor<T>& t) const {
        return trainable && trainable->count(static_cast<const void*>(&t)) != 0;
    }
};

namespace detail {

template <typename T>
Var<T> bn_population_forward(ForwardCtx<T>& ctx, BatchNormLayer<T>& bn, Var<T> x) {
    std::size_t c = bn.channels();
    Tensor<T> inv_std(Shape{c}), neg_mu_scaled(Shape{c});
    for (std::size_t j = 0; j < c; ++j) {
        inv_std[j] = static_cast<T>(
            1.0 / std::sqrt(static_cast<double>(bn.pop_var[j]) + static_cast<double>(bn.eps)));
        neg_mu_scaled[j] = -bn.pop_mean[j] * inv_std[j];
    }
    if (ctx.is_trainable(bn.gamma)) {
        // keep gamma/beta in the graph: xhat = (x - mu)/std, then affine
        auto xhat = channel_bias(ctx.tape, scale_per_channel(ctx.tape, x, ctx.tape.constant(inv_std)),
                                 ctx.tape.constant(neg_mu_scaled));
        return channel_bias(ctx.tape, scale_per_channel(ctx.tape, xhat, ctx.param(bn.gamma)),
                            ctx.param(bn.beta));
    }
    // constants: fold gamma/beta into one scale+shift pair
    Tensor<T> sc(Shape{c}), sh(Shape{c});
    for (std::size_t j = 0; j < c; ++j) {
        sc[j] = bn.gamma[j] * inv_std[j];
        sh[j] = bn.beta[j] + bn.gamma[j] * neg_mu_scaled[j];
    }
    return channel_bias(ctx.tape, scale_per_channel(ctx.tape, x, ctx.tape.constant(sc)),
                        ctx.tape.constant(sh));
}

template <typename T>
Var<T> bn_forward(ForwardCtx<T>& ctx, BatchNormLayer<T>& bn, Var<T> x) {
    BnMode mode = ctx.bn_force_population ? BnMode::Population : ctx.bn_mode;
    if (mode == BnMode::Population) return bn_population_forward(ctx, bn, x);
    BatchStats stats;
    auto y = batchnorm_train(ctx.tape, x, ctx.param(bn.gamma), ctx.param(bn.beta), bn.eps, &stats);
    if (mode == BnMode::Batch) {
        for (std::size_t j = 0; j < bn.channels(); ++j) {
            bn.pop_mean[j] = (T(1) - bn.momentum) * bn.pop_mean[j] +
                             bn.momentum * static_cast<T>(stats.mean[j]);
            bn.pop_var[j] =
                (T(1) - bn.momentum) * bn.pop_var[j] + bn.momentum * static_cast<T>(stats.var[j]);
        }
    } else if (bn.collecting) {  // Collect
        std::size_t n, c, inner;
        channel_geometry(x->t.shape, n, c, inner, "batchnorm");
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                const T* row = x->t.data.data() + (i * c + j) * inner;
                for (std::size_t t = 0; t < inner; ++t) {
                    double v = static_cast<double>(row[t]);
                    bn.acc_sum[j] += v;
                    bn.acc_sumsq[j] += v * v;
                }
            }
        bn.acc_count += static_cast<double>(n * inner);
    }
    return y;
}

}  // namespace detail

template <typename T>
Var<T> block_forward(ForwardCtx<T>& ctx, LinearBlock<T>& blk, Var<T> x) {
    for (auto& prim : blk.prims) {
        std::visit(
            [&](auto& layer) {
                using L = std::decay_t<decltype(layer)>;
                if constexpr (std::is_same_v<L, ConvLayer<T>>)
                    x = conv2d(ctx.tape, x, ctx.param(layer.W), ctx.param(layer.b), layer.stride,
                               layer.pad);
                else if constexpr (std::is_same_v<L, LinearLayer<T>>)
                    x = linear(ctx.tape, x, ctx.param(layer.W), ctx.param(layer.b));
                else if constexpr (std::is_same_v<L, BatchNormLayer<T>>)
                    x = detail::bn_forward(ctx, layer, x);
                else
                    x = channel_bias(ctx.tape,
                                     scale_per_channel(ctx.tape, x, ctx.param(layer.scale)),
                                     ctx.param(layer.shift));
            },
            prim);
    }
    return x;
}

template <typename T>
Var<T> unit_forward(ForwardCtx<T>& ctx, ResidualUnit<T>& u, Var<T> x) {
    auto h = relu(ctx.tape, block_forward(ctx, u.entry, x));
    h = relu(ctx.tape, block_forward(ctx, u.mid, h));
    h = block_forward(ctx, u.out, h);
    auto sc = u.projection ? block_forward(ctx, *u.projection, x) : x;
    return add(ctx.tape, h, sc);
}

template <typename T>
Var<T> trunk_forward(ForwardCtx<T>& ctx, NetworkState<T>& net, Var<T> x) {
    for (auto& item : net.trunk) {
        std::visit(
            [&](auto& it) {
                using I = std::decay_t<decltype(it)>;
                if constexpr (std::is_same_v<I, LinearBlock<T>>)
                    x = block_forward(ctx, it, x);
                else if constexpr (std::is_same_v<I, ReluItem>)
                    x = relu(ctx.tape, x);
                else if constexpr (std::is_same_v<I, GlobalAvgPoolItem>)
                    x = global_avg_pool(ctx.tape, x);
                else if constexpr (std::is_same_v<I, FlattenItem>)
                    x = flatten(ctx.tape, x);
                else
                    x = unit_forward(ctx, it, x);
            },
            item);
    }
    return x;
}

template <typename T>
Var<T> head_forward(ForwardCtx<T>& ctx, NetworkState<T>& net, const std::string& task,
                    Var<T> features) {
    auto it = net.heads.find(task);
    if (it == net.heads.end()) throw std::invalid_argument("forward: unknown task '" + task + "'");
    return linear(ctx.tape, features, ctx.param(it->second.W), ctx.param(it->second.b));
}

template <typename T>
Var<T> network_forward(ForwardCtx<T>& ctx, NetworkState<T>& net, Var<T> x,
                       const std::string& task) {
    return head_forward(ctx, net, task, trunk_forward(ctx, net, x));
}

// ---------------------------------------------------------------------------
// Named-tensor enumeration. Checkpoints see everything (including BN
// statistics); training collects only gradient-bearing tensors.

template <typename T, typename F>
void for_each_prim_tensor(LinearBlock<T>& blk, const std::string& prefix, bool include_stats,
                          F&& fn) {
    for (std::size_t j = 0; j < blk.prims.size(); ++j) {
        std::string p = prefix + "." + std::to_string(j);
        std::visit(
            [&](auto& layer) {
                using L = std::decay_t<decltype(layer)>;
                if constexpr (std::is_same_v<L, ConvLayer<T>> || std::is_same_v<L, LinearLayer<T>>) {
                    fn(p + ".weight", layer.W);
                    fn(p + ".bias", layer.b);
                } else if constexpr (std::is_same_v<L, BatchNormLayer<T>>) {
                    fn(p + ".gamma", layer.gamma);
                    fn(p + ".beta", layer.beta);
                    if (include_stats) {
                        fn(p + ".mean", layer.pop_mean);
                        fn(p + ".var", layer.pop_var);
                    }
                } else {
                    fn(p + ".scale", layer.scale);
                    fn(p + ".shift", layer.shift);
                }
            },
            blk.prims[j]);
    }
}

template <typename T, typename F>
void for_each_trunk_tensor(NetworkState<T>& net, bool include_stats, F&& fn) {
    for (std::size_t i = 0; i < net.trunk.size(); ++i) {
        std::string p = "trunk." + std::to_string(i);
        std::visit(
            [&](auto& it) {
                using I = std::decay_t<decltype(it)>;
                if constexpr (std::is_same_v<I, LinearBlock<T>>)
                    for_each_prim_tensor(it, p, include_stats, fn);
                else if constexpr (std::is_same_v<I, ResidualUnit<T>>) {
                    for_each_prim_tensor(it.entry, p + ".entry", include_stats, fn);
                    for_each_prim_tensor(it.mid, p + ".mid", include_stats, fn);
                    for_each_prim_tensor(it.out, p + ".out", include_stats, fn);
                    if (it.projection)
                        for_each_prim_tensor(*it.projection, p + ".proj", include_stats, fn);
                }
            },
            net.trunk[i]);
    }
}

template <typename T, typename F>
void for_each_named_tensor(NetworkState<T>& net, F&& fn) {
    for_each_trunk_tensor(net, /*include_stats=*/true, fn);
    for (auto& [task, head] : net.heads) {
        fn("head." + task + ".weight", head.W);
        fn("head." + task + ".bias", head.b);
    }
}

template <typename T>
std::size_t trunk_param_count(NetworkState<T>& net) {
    std::size_t n = 0;
    for_each_trunk_tensor(net, /*include_stats=*/false,
                          [&](const std::string&, Tensor<T>& t) { n += t.size(); });
    return n;
}

template <typename T>
std::uint64_t trunk_checksum(NetworkState<T>& net) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for_each_trunk_tensor(net, /*include_stats=*/true, [&](const std::string& name, Tensor<T>& t) {
        h = fnv1a(name.data(), name.size(), h);
        h = tensor_checksum(t, h);
    });
    return h;
}

template <typename T, typename U>
NetworkState<U> convert_network(NetworkState<T>& net);

// ---------------------------------------------------------------------------
// Structure description string. Grammar (tokens joined by '|'):
//   in:CxHxW | in:D         input shape
//   conv:Co,K,S,P[+bn]      conv block, optionally fused with BN
//   linear:Co[+bn]          fully-connected block
//   bn | affine             standalone normalization / per-channel affine
//   relu | gap | flatten
//   unit:Co,S[,plain]       pre-activation residual unit ("plain" = merged
//                           form: affine entry, convs without BN)

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, sep))
        if (!tok.empty()) out.push_back(tok);
    return out;
}

template <typename T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, SplitMix64& rng) {
    Tensor<T> t(shape);
    double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.data) v = static_cast<T>(rng.normal() * std);
    return t;
}

template <typename T>
BatchNormLayer<T> fresh_bn(std::size_t c) {
    BatchNormLayer<T> bn;
    bn.gamma = Tensor<T>::ones(Shape{c});
    bn.beta = Tensor<T>::zeros(Shape{c});
    bn.pop_mean = Tensor<T>::zeros(Shape{c});
    bn.pop_var = Tensor<T>::ones(Shape{c});
    return bn;
}

template <typename T>
AffineLayer<T> fresh_affine(std::size_t c) {
    return AffineLayer<T>{Tensor<T>::ones(Shape{c}), Tensor<T>::zeros(Shape{c})};
}

template <typename T>
ConvLayer<T> fresh_conv(std::size_t ci, std::size_t co, std::size_t k, std::size_t s,
                        std::size_t p, SplitMix64& rng) {
    ConvLayer<T> conv;
    conv.W = he_normal<T>(Shape{co, ci, k, k}, ci * k * k, rng);
    conv.b = Tensor<T>::zeros(Shape{co});
    conv.stride = s;
    conv.pad = p;
    return conv;
}

template <typename T>
LinearLayer<T> fresh_linear(std::size_t ci, std::size_t co, SplitMix64& rng) {
    return LinearLayer<T>{he_normal<T>(Shape{co, ci}, ci, rng), Tensor<T>::zeros(Shape{co})};
}

}  // namespace detail

template <typename T>
NetworkState<T> make_network(const std::string& spec, SplitMix64& rng) {
    auto tokens = detail::split(spec, '|');
    if (tokens.empty() || tokens[0].rfind("in:", 0) != 0)
        throw std::invalid_argument("network spec must start with in:...");
    NetworkState<T> net;
    {
        auto dims = detail::split(tokens[0].substr(3), 'x');
        for (const auto& d : dims) net.input_shape.push_back(std::stoul(d));
    }
    // current feature geometry while building
    bool spatial = net.input_shape.size() == 3;
    std::size_t C = net.input_shape[0];
    std::size_t H = spatial ? net.input_shape[1] : 0, W = spatial ? net.input_shape[2] : 0;

    auto conv_out = [](std::size_t d, std::size_t k, std::size_t s, std::size_t p) {
        return (d + 2 * p - k) / s + 1;
    };

    for (std::size_t ti = 1; ti < tokens.size(); ++ti) {
        const std::string& tok = tokens[ti];
        auto colon = tok.find(':');
        std::string kind = tok.substr(0, colon);
        std::string args = colon == std::string::npos ? "" : tok.substr(colon + 1);
        bool with_bn = false;
        if (args.size() >= 3 && args.substr(args.size() - 3) == "+bn") {
            with_bn = true;
            args = args.substr(0, args.size() - 3);
        }
        if (kind == "conv") {
            auto a = detail::split(args, ',');
            if (a.size() != 4) throw std::invalid_argument("conv token needs Co,K,S,P");
            std::size_t co = std::stoul(a[0]), k = std::stoul(a[1]), s = std::stoul(a[2]),
                        p = std::stoul(a[3]);
            LinearBlock<T> blk;
            blk.prims.emplace_back(detail::fresh_conv<T>(C, co, k, s, p, rng));
            if (with_bn) blk.prims.emplace_back(detail::fresh_bn<T>(co));
            net.trunk.emplace_back(std::move(blk));
            H = conv_out(H, k, s, p);
            W = conv_out(W, k, s, p);
            C = co;
        } else if (kind == "linear") {
            std::size_t co = std::stoul(args);
            LinearBlock<T> blk;
            blk.prims.emplace_back(detail::fresh_linear<T>(C, co, rng));
            if (with_bn) blk.prims.emplace_back(detail::fresh_bn<T>(co));
            net.trunk.emplace_back(std::move(blk));
            C = co;
        } else if (kind == "bn") {
            LinearBlock<T> blk;
            blk.prims.emplace_back(detail::fresh_bn<T>(C));
            net.trunk.emplace_back(std::move(blk));
        } else if (kind == "affine") {
            LinearBlock<T> blk;
            blk.prims.emplace_back(detail::fresh_affine<T>(C));
            net.trunk.emplace_back(std::move(blk));
        } else if (kind == "relu") {
            net.trunk.emplace_back(ReluItem{});
        } else if (kind == "gap") {
            net.trunk.emplace_back(GlobalAvgPoolItem{});
            spatial = false;
        } else if (kind == "flatten") {
            net.trunk.emplace_back(FlattenItem{});
            C = C * H * W;
            spatial = false;
        } else if (kind == "unit") {
            auto a = detail::split(args, ',');
            if (a.size() < 2) throw std::invalid_argument("unit token needs Co,S");
            std::size_t co = std::stoul(a[0]), s = std::stoul(a[1]);
            if (s != 1 && s != 2) throw std::invalid_argument("unit stride must be 1 or 2");
            bool plain = a.size() > 2 && a[2] == "plain";
            // even kernels for stride 2 keep conv output sizes integral on
            // even feature maps (3x3 stride-2 would not divide)
            std::size_t mid_k = s == 1 ? 3 : 4;
            std::size_t proj_k = s == 1 ? 1 : 2;
            ResidualUnit<T> u;
            if (plain)
                u.entry.prims.emplace_back(detail::fresh_affine<T>(C));
            else
                u.entry.prims.emplace_back(detail::fresh_bn<T>(C));
            u.mid.prims.emplace_back(detail::fresh_conv<T>(C, co, mid_k, s, 1, rng));
            if (!plain) u.mid.prims.emplace_back(detail::fresh_bn<T>(co));
            u.out.prims.emplace_back(detail::fresh_conv<T>(co, co, 3, 1, 1, rng));
            if (co != C || s != 1) {
                u.projection.emplace();
                u.projection->prims.emplace_back(detail::fresh_conv<T>(C, co, proj_k, s, 0, rng));
            }
            net.trunk.emplace_back(std::move(u));
            H = conv_out(H, mid_k, s, 1);
            W = conv_out(W, mid_k, s, 1);
            C = co;
        } else {
            throw std::invalid_argument("unknown network spec token: " + tok);
        }
    }
    net.trunk_out_dim = C;
    return net;
}

template <typename T>
void add_head(NetworkState<T>& net, const std::string& task, std::size_t classes,
              SplitMix64& rng) {
    if (net.has_task(task)) throw std::invalid_argument("add_head: task already registered");
    net.heads[task] = detail::fresh_linear<T>(net.trunk_out_dim, classes, rng);
}

namespace detail {

template <typename T>
std::string block_token(const LinearBlock<T>& blk) {
    // reconstruct the spec token for a linear block
    bool has_bn = false, has_affine = false;
    const ConvLayer<T>* conv = nullptr;
    const LinearLayer<T>* lin = nullptr;
    for (const auto& p : blk.prims) {
        if (std::holds_alternative<ConvLayer<T>>(p)) conv = &std::get<ConvLayer<T>>(p);
        if (std::holds_alternative<LinearLayer<T>>(p)) lin = &std::get<LinearLayer<T>>(p);
        if (std::holds_alternative<BatchNormLayer<T>>(p)) has_bn = true;
        if (std::holds_alternative<AffineLayer<T>>(p)) has_affine = true;
    }
    if (conv) {
        std::string t = "conv:" + std::to_string(conv->W.shape[0]) + "," +
                        std::to_string(conv->W.shape[2]) + "," + std::to_string(conv->stride) +
                        "," + std::to_string(conv->pad);
        if (has_bn) t += "+bn";
        return t;
    }
    if (lin) {
        std::string t = "linear:" + std::to_string(lin->W.shape[0]);
        if (has_bn) t += "+bn";
        return t;
    }
    return has_bn ? "bn" : (has_affine ? "affine" : "bn");
}

}  // namespace detail

template <typename T>
std::string to_spec_string(const NetworkState<T>& net) {
    std::string s = "in:";
    for (std::size_t i = 0; i < net.input_shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(net.input_shape[i]);
    }
    for (const auto& item : net.trunk) {
        s += "|";
        std::visit(
            [&](const auto& it) {
                using I = std::decay_t<decltype(it)>;
                if constexpr (std::is_same_v<I, LinearBlock<T>>)
                    s += detail::block_token(it);
                else if constexpr (std::is_same_v<I, ReluItem>)
                    s += "relu";
                else if constexpr (std::is_same_v<I, GlobalAvgPoolItem>)
                    s += "gap";
                else if constexpr (std::is_same_v<I, FlattenItem>)
                    s += "flatten";
                else {
                    const ConvLayer<T>& mid = std::get<ConvLayer<T>>(it.mid.prims[0]);
                    s += "unit:" + std::to_string(mid.W.shape[0]) + "," +
                         std::to_string(mid.stride);
                    if (std::holds_alternative<AffineLayer<T>>(it.entry.prims[0])) s += ",plain";
                }
            },
            item);
    }
    return s;
}

template <typename T, typename U>
NetworkState<U> convert_network(NetworkState<T>& net) {
    SplitMix64 rng(0);
    NetworkState<U> out = make_network<U>(to_spec_string(net), rng);
    for (auto& [task, head] : net.heads)
        out.heads[task] = LinearLayer<U>{head.W.template cast<U>(), head.b.template cast<U>()};
    out.trunk_out_dim = net.trunk_out_dim;
    // copy every tensor (including BN statistics) by matching names
    std::map<std::string, Tensor<U>> src;
    for_each_named_tensor(net, [&](const std::string& name, Tensor<T>& t) {
        src[name] = t.template cast<U>();
    });
    for_each_named_tensor(out, [&](const std::string& name, Tensor<U>& t) {
        t = std::move(src.at(name));
    });
    // BN finalized flags carry over positionally via spec identity
    std::vector<bool> flags;
    for_each_bn(net, [&](const std::string&, BatchNormLayer<T>& bn) {
        flags.push_back(bn.stats_finalized);
    });
    std::size_t i = 0;
    for_each_bn(out, [&](const std::string&, BatchNormLayer<U>& bn) {
        bn.stats_finalized = flags[i++];
    });
    return out;
}

// ---------------------------------------------------------------------------
// BN traversal, exact population statistics, stats export.

template <typename T, typename F>
void for_each_bn_in_block(LinearBlock<T>& blk, const std::string& prefix, F&& fn) {
    for (std::size_t j = 0; j < blk.prims.size(); ++j)
        if (auto* bn = std::get_if<BatchNormLayer<T>>(&blk.prims[j]))
            fn(prefix + "." + std::to_string(j), *bn);
}

template <typename T, typename F>
void for_each_bn(NetworkState<T>& net, F&& fn) {
    for (std::size_t i = 0; i < net.trunk.size(); ++i) {
        std::string p = "trunk." + std::to_string(i);
        std::visit(
            [&](auto& it) {
                using I = std::decay_t<decltype(it)>;
                if constexpr (std::is_same_v<I, LinearBlock<T>>)
                    for_each_bn_in_block(it, p, fn);
                else if constexpr (std::is_same_v<I, ResidualUnit<T>>) {
                    for_each_bn_in_block(it.entry, p + ".entry", fn);
                    for_each_bn_in_block(it.mid, p + ".mid", fn);
                    for_each_bn_in_block(it.out, p + ".out", fn);
                    if (it.projection) for_each_bn_in_block(*it.projection, p + ".proj", fn);
                }
            },
            net.trunk[i]);
    }
}

/// Deterministic contiguous batch ranges; a trailing batch of one sample is
/// absorbed into its predecessor so BN train-mode never sees batch size 1.
inline std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n,
                                                                     std::size_t batch) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    if (batch == 0) batch = n;
    std::size_t i = 0;
    while (i < n) {
        std::size_t len = std::min(batch, n - i);
        if (n - i - len == 1) len += 1;  // absorb the trailing singleton
        out.emplace_back(i, len);
        i += len;
    }
    return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& all, std::size_t start, std::size_t len) {
    std::size_t per = all.size() / all.shape[0];
    Shape s = all.shape;
    s[0] = len;
    Tensor<T> out(s);
    std::copy(all.data.begin() + start * per, all.data.begin() + (start + len) * per,
              out.data.begin());
    return out;
}

/// One pass over the dataset in train-statistics-collection mode: every BN
/// normalizes with its minibatch statistics while exact full-pass moments
/// are accumulated, then population statistics are replaced by those
/// moments. Idempotent for a fixed dataset and batch size; parameters are
/// untouched.
template <typename T>
void recompute_population_stats(NetworkState<T>& net, const Tensor<T>& images,
                                std::size_t batch = 64) {
    if (images.shape.empty() || images.shape[0] == 0)
        throw std::invalid_argument("recompute_population_stats: empty dataset");
    std::size_t n_bn = 0;
    for_each_bn(net, [&](const std::string&, BatchNormLayer<T>& bn) {
        bn.begin_collect();
        ++n_bn;
    });
    if (n_bn == 0) return;
    for (auto [start, len] : batch_ranges(images.shape[0], batch)) {
        Tape<T> tape;
        ForwardCtx<T> ctx{tape};
        ctx.bn_mode = BnMode::Collect;
        auto x = tape.constant(slice_rows(images, start, len));
        trunk_forward(ctx, net, x);
    }
    for_each_bn(net, [&](const std::string&, BatchNormLayer<T>& bn) { bn.finish_collect(); });
}

template <typename T>
struct BnStatsRow {
    std::string layer;
    std::vector<T> mu;
    std::vector<T> sigma;  // sqrt of the population variance
};

template <typename T>
std::vector<BnStatsRow<T>> bn_stats_dump(NetworkState<T>& net) {
    std::vector<BnStatsRow<T>> rows;
    for_each_bn(net, [&](const std::string& name, BatchNormLayer<T>& bn) {
        BnStatsRow<T> row;
        row.layer = name;
        row.mu.assign(bn.pop_mean.data.begin(), bn.pop_mean.data.end());
        for (auto v : bn.pop_var.data)
            row.sigma.push_back(static_cast<T>(std::sqrt(std::max(T(0), v))));
        rows.push_back(std::move(row));
    });
    return rows;
}

}  // namespace rescl
