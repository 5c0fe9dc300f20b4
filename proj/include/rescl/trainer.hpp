#pragma once

#include <cstdio>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rescl/checkpoint.hpp"
#include "rescl/combine.hpp"
#include "rescl/data.hpp"
#include "rescl/losses.hpp"

namespace rescl {

/// Non-finite loss or gradient during training (CLI exit code 3).
struct TrainingDiverged : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <typename T>
struct TrainConfig {
    std::size_t iterations = 2000;
    std::size_t batch = 64;
    T lr = T(0.1);
    T momentum = T(0.9);
    std::uint64_t seed = 0;
    LossConfig<T> loss;
    std::size_t eval_every = 0;  // 0 = no periodic evaluation rows
    bool aug_flip = false;
    int aug_pad_crop = 0;

    void validate() const {
        if (iterations == 0 && batch == 0) return;
        if (batch < 2) throw std::invalid_argument("train config: batch must be >= 2");
        if (!(lr > T(0))) throw std::invalid_argument("train config: lr must be > 0");
    }
    /// x0.1 at 50% and 75% of the run.
    T lr_at(std::size_t iter) const {
        T f = T(1);
        if (iter >= iterations / 2) f *= T(0.1);
        if (iter >= (3 * iterations) / 4) f *= T(0.1);
        return lr * f;
    }
};

// ---------------------------------------------------------------------------
// Metrics: per-iteration loss rows and per-evaluation accuracy rows.

inline std::string fmt_g9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

struct MetricsSink {
    struct Row {
        std::size_t iter;
        std::string kind;  // "loss" | "acc"
        std::string key;
        double value;
    };
    std::vector<Row> rows;

    void loss(std::size_t iter, double v) { rows.push_back({iter, "loss", "train", v}); }
    void acc(std::size_t iter, const std::string& key, double v) {
        rows.push_back({iter, "acc", key, v});
    }
    void save(const std::string& path) const {
        auto os = io::open_out(path);
        os << "iter,kind,key,value\n";
        for (const auto& r : rows)
            os << r.iter << "," << r.kind << "," << r.key << "," << fmt_g9(r.value) << "\n";
    }
};

// ---------------------------------------------------------------------------
// SGD with momentum: v <- momentum * v + g; p <- p - lr * v.

template <typename T>
void sgd_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& velocity, T lr, T momentum) {
    check_same_shape(param, grad, "sgd_step");
    if (velocity.shape != param.shape) velocity = Tensor<T>::zeros(param.shape);
    for (std::size_t i = 0; i < param.size(); ++i) {
        if (!std::isfinite(static_cast<double>(grad[i])))
            throw TrainingDiverged("sgd_step: non-finite gradient");
        velocity[i] = momentum * velocity[i] + grad[i];
        param[i] -= lr * velocity[i];
    }
}

template <typename T>
struct ParamSlot {
    std::string name;
    Tensor<T>* value = nullptr;
    Tensor<T> velocity;
    bool weight_decay = true;  // part of ||theta_t||^2 (alpha pairs opt out)
};

template <typename T>
std::vector<ParamSlot<T>> trunk_slots(NetworkState<T>& net) {
    std::vector<ParamSlot<T>> slots;
    for_each_trunk_tensor(net, /*include_stats=*/false, [&](const std::string& n, Tensor<T>& t) {
        slots.push_back(ParamSlot<T>{n, &t, Tensor<T>::zeros(t.shape), true});
    });
    return slots;
}

template <typename T>
void add_head_slots(std::vector<ParamSlot<T>>& slots, NetworkState<T>& net,
                    const std::string& task) {
    auto& head = net.heads.at(task);
    slots.push_back(ParamSlot<T>{"head." + task + ".weight", &head.W,
                                 Tensor<T>::zeros(head.W.shape), true});
    slots.push_back(ParamSlot<T>{"head." + task + ".bias", &head.b,
                                 Tensor<T>::zeros(head.b.shape), true});
}

// ---------------------------------------------------------------------------
// Batching.

/// Per-epoch permutation of sample indices drawn from the run seed; the
/// trailing partial chunk of each epoch is dropped so every step sees a
/// full batch.
class Batcher {
public:
    Batcher(std::size_t n, std::size_t batch, std::uint64_t seed)
        : n_(n), batch_(std::min(batch, n)), rng_(seed) {
        if (n_ == 0) throw std::invalid_argument("batcher: empty dataset");
        refill();
    }
    std::vector<std::size_t> next() {
        if (pos_ + batch_ > perm_.size()) refill();
        std::vector<std::size_t> out(perm_.begin() + pos_, perm_.begin() + pos_ + batch_);
        pos_ += batch_;
        return out;
    }

private:
    void refill() {
        if (perm_.empty()) {
            perm_.resize(n_);
            for (std::size_t i = 0; i < n_; ++i) perm_[i] = i;
        }
        rng_.shuffle(perm_);
        pos_ = 0;
    }
    std::size_t n_, batch_, pos_ = 0;
    std::vector<std::size_t> perm_;
    SplitMix64 rng_;
};

template <typename T>
Tensor<T> gather_images(const Tensor<float>& images, const std::vector<std::size_t>& idx) {
    std::size_t per = images.size() / images.shape[0];
    Shape s = images.shape;
    s[0] = idx.size();
    Tensor<T> out(s);
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < per; ++j)
            out[i * per + j] = static_cast<T>(images.data[idx[i] * per + j]);
    return out;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& rows, const std::vector<std::size_t>& idx) {
    std::size_t per = rows.size() / rows.shape[0];
    Shape s = rows.shape;
    s[0] = idx.size();
    Tensor<T> out(s);
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < per; ++j) out[i * per + j] = rows[idx[i] * per + j];
    return out;
}

template <typename T>
Tensor<T> one_hot(const std::vector<std::uint16_t>& labels, const std::vector<std::size_t>& idx,
                  std::size_t classes) {
    Tensor<T> out(Shape{idx.size(), classes});
    for (std::size_t i = 0; i < idx.size(); ++i) out[i * classes + labels[idx[i]]] = T(1);
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation (read-only; inference statistics).

template <typename T>
std::pair<std::size_t, std::size_t> evaluate(NetworkState<T>& net, const Dataset& data,
                                             const std::string& task,
                                             std::size_t batch = 128) {
    std::size_t correct = 0;
    for (auto [start, len] : batch_ranges(data.size(), batch)) {
        Tape<T> tape;
        ForwardCtx<T> ctx{tape};
        auto x = tape.constant(slice_rows(data.images, start, len).template cast<T>());
        auto logits = network_forward(ctx, net, x, task);
        std::size_t k = logits->t.shape[1];
        for (std::size_t i = 0; i < len; ++i) {
            const T* row = logits->t.data.data() + i * k;
            std::size_t best = 0;
            for (std::size_t j = 1; j < k; ++j)
                if (row[j] > row[best]) best = j;
            if (best == data.labels[start + i]) ++correct;
        }
    }
    return {correct, data.size()};
}

template <typename T>
std::pair<std::size_t, std::size_t> evaluate_combined(CombinedNetwork<T>& c, const Dataset& data,
                                                      const std::string& task,
                                                      std::size_t batch = 128) {
    std::size_t correct = 0;
    for (auto [start, len] : batch_ranges(data.size(), batch)) {
        Tape<T> tape;
        ForwardCtx<T> ctx{tape};
        auto x = tape.constant(slice_rows(data.images, start, len).template cast<T>());
        auto logits = combined_forward(ctx, c, x, task);
        std::size_t k = logits->t.shape[1];
        for (std::size_t i = 0; i < len; ++i) {
            const T* row = logits->t.data.data() + i * k;
            std::size_t best = 0;
            for (std::size_t j = 1; j < k; ++j)
                if (row[j] > row[best]) best = j;
            if (best == data.labels[start + i]) ++correct;
        }
    }
    return {correct, data.size()};
}

// ---------------------------------------------------------------------------
// Generic SGD loop. The loss builder sees the forward context (with the
// trainable map installed) and the per-slot parameter vars.

namespace detail {

template <typename T>
struct StepVars {
    std::unordered_map<const void*, Var<T>> lookup;
    std::vector<Var<T>> by_slot;
};

template <typename T>
StepVars<T> wrap_slots(Tape<T>& tape, std::vector<ParamSlot<T>>& slots) {
    StepVars<T> vars;
    for (auto& s : slots) {
        auto v = tape.leaf(*s.value, true);
        vars.lookup[static_cast<const void*>(s.value)] = v;
        vars.by_slot.push_back(v);
    }
    return vars;
}

template <typename T, typename LossBuilder>
void run_sgd(std::vector<ParamSlot<T>>& slots, const TrainConfig<T>& cfg, LossBuilder&& build,
             MetricsSink* metrics, const std::function<void(std::size_t)>& eval_hook = {}) {
    cfg.validate();
    for (std::size_t iter = 0; iter < cfg.iterations; ++iter) {
        Tape<T> tape;
        StepVars<T> vars = wrap_slots(tape, slots);
        ForwardCtx<T> ctx{tape};
        ctx.bn_mode = BnMode::Batch;
        ctx.trainable = &vars.lookup;
        Var<T> loss = build(ctx, vars, iter);
        T lv = loss->t[0];
        if (!std::isfinite(static_cast<double>(lv)))
            throw TrainingDiverged("training diverged: loss is not finite at iteration " +
                                   std::to_string(iter));
        tape.backward(loss);
        T lr = cfg.lr_at(iter);
        for (std::size_t i = 0; i < slots.size(); ++i) {
            Tensor<T> g(slots[i].value->shape, vars.by_slot[i]->t.grad);
            sgd_step(*slots[i].value, g, slots[i].velocity, lr, cfg.momentum);
        }
        if (metrics) metrics->loss(iter, static_cast<double>(lv));
        if (eval_hook && cfg.eval_every > 0 &&
            ((iter + 1) % cfg.eval_every == 0 || iter + 1 == cfg.iterations))
            eval_hook(iter + 1);
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Plain supervised training (source task, fine-tuning, joint).

/// Cross-entropy (tempered KL against one-hot labels at T=1) plus L2 decay
/// over the given slots.
template <typename T>
void supervised_train(NetworkState<T>& net, std::vector<ParamSlot<T>>& slots,
                      const std::string& task, const Dataset& data, const TrainConfig<T>& cfg,
                      MetricsSink* metrics = nullptr,
                      const std::function<void(std::size_t)>& eval_hook = {}) {
    if (cfg.iterations == 0) return;
    Batcher batcher(data.size(), cfg.batch, cfg.seed);
    SplitMix64 aug_rng(cfg.seed ^ 0xA36A3A6E55AA55AAULL);
    detail::run_sgd(
        slots, cfg,
        [&](ForwardCtx<T>& ctx, detail::StepVars<T>& vars, std::size_t) {
            auto idx = batcher.next();
            Tensor<T> x;
            if (cfg.aug_flip || cfg.aug_pad_crop > 0) {
                Tensor<float> raw = gather_images<float>(data.images, idx);
                x = augment(raw, cfg.aug_flip, cfg.aug_pad_crop, aug_rng).template cast<T>();
            } else {
                x = gather_images<T>(data.images, idx);
            }
            auto logits = network_forward(ctx, net, ctx.tape.constant(x), task);
            auto ce = kl_tempered(ctx.tape, one_hot<T>(data.labels, idx, data.classes), logits,
                                  T(1));
            std::vector<Var<T>> decayed;
            for (std::size_t i = 0; i < vars.by_slot.size(); ++i)
                if (slots[i].weight_decay) decayed.push_back(vars.by_slot[i]);
            return add(ctx.tape, ce, weight_decay_l2(ctx, decayed, cfg.loss.lambda_dec));
        },
        metrics, eval_hook);
    recompute_population_stats(net, data.images.cast<T>(), cfg.batch);
}

/// Train a fresh network on the source task.
template <typename T>
NetworkState<T> train_source(const std::string& spec, const std::string& task,
                             std::size_t classes, const Dataset& data, const TrainConfig<T>& cfg,
                             MetricsSink* metrics = nullptr) {
    SplitMix64 rng(cfg.seed);
    NetworkState<T> net = make_network<T>(spec, rng);
    add_head(net, task, classes, rng);
    auto slots = trunk_slots(net);
    add_head_slots(slots, net, task);
    supervised_train(net, slots, task, data, cfg, metrics);
    return net;
}

/// Train only the task head, trunk frozen (the warm-up step every method
/// starts with). Trunk features are computed once in inference mode and
/// the head is fit on them, so trunk parameters and BN statistics are
/// untouched by construction.
template <typename T>
void warmup_head(NetworkState<T>& net, const std::string& task, const Dataset& data,
                 const TrainConfig<T>& cfg, MetricsSink* metrics = nullptr) {
    if (!net.has_task(task)) throw std::invalid_argument("warmup_head: head not attached");
    if (cfg.iterations == 0) return;
    // cache trunk features over the training set
    Tensor<T> feats;
    {
        std::vector<T> buf;
        std::size_t dim = 0;
        for (auto [start, len] : batch_ranges(data.size(), 256)) {
            Tape<T> tape;
            ForwardCtx<T> ctx{tape};
            auto x = tape.constant(slice_rows(data.images, start, len).template cast<T>());
            auto f = trunk_forward(ctx, net, x);
            dim = f->t.shape[1];
            buf.insert(buf.end(), f->t.data.begin(), f->t.data.end());
        }
        feats = Tensor<T>(Shape{data.size(), dim}, std::move(buf));
    }
    std::vector<ParamSlot<T>> slots;
    add_head_slots(slots, net, task);
    Batcher batcher(data.size(), cfg.batch, cfg.seed);
    detail::run_sgd(
        slots, cfg,
        [&](ForwardCtx<T>& ctx, detail::StepVars<T>& vars, std::size_t) {
            auto idx = batcher.next();
            auto x = ctx.tape.constant(gather_rows(feats, idx));
            auto logits = head_forward(ctx, net, task, x);
            auto ce = kl_tempered(ctx.tape, one_hot<T>(data.labels, idx, data.classes), logits,
                                  T(1));
            return add(ctx.tape, ce, weight_decay_l2(ctx, vars.by_slot, cfg.loss.lambda_dec));
        },
        metrics);
}

/// Fine-tune the whole trunk plus the target head (warm-up already applied).
/// Old task heads ride along frozen.
template <typename T>
NetworkState<T> finetune(const NetworkState<T>& net_warm, const std::string& task,
                         const Dataset& data, const TrainConfig<T>& cfg,
                         MetricsSink* metrics = nullptr) {
    NetworkState<T> net = net_warm;
    auto slots = trunk_slots(net);
    add_head_slots(slots, net, task);
    supervised_train(net, slots, task, data, cfg, metrics);
    return net;
}

// ---------------------------------------------------------------------------
// Soft targets (computed once at T=2 and cached).

template <typename T>
struct SoftTargets {
    std::vector<std::pair<std::string, Tensor<T>>> source;  // one entry per old head
    Tensor<T> target;                                       // fine-tuned target-head outputs
};

template <typename T>
Tensor<T> soft_outputs(NetworkState<T>& net, const std::string& task, const Tensor<float>& images,
                       T temperature) {
    std::vector<T> buf;
    std::size_t k = 0;
    for (auto [start, len] : batch_ranges(images.shape[0], 256)) {
        Tape<T> tape;
        ForwardCtx<T> ctx{tape};
        auto x = tape.constant(slice_rows(images, start, len).template cast<T>());
        auto probs = softmax_t(tape, network_forward(ctx, net, x, task), temperature);
        k = probs->t.shape[1];
        buf.insert(buf.end(), probs->t.data.begin(), probs->t.data.end());
    }
    return Tensor<T>(Shape{images.shape[0], k}, std::move(buf));
}

template <typename T>
SoftTargets<T> compute_soft_targets(NetworkState<T>& net_s, NetworkState<T>& net_t,
                                    const std::string& target_task, const Tensor<float>& images,
                                    T temperature) {
    SoftTargets<T> soft;
    for (auto& [task, head] : net_s.heads)
        soft.source.emplace_back(task, soft_outputs(net_s, task, images, temperature));
    soft.target = soft_outputs(net_t, target_task, images, temperature);
    return soft;
}

template <typename T>
void save_soft_targets(const std::string& path, const SoftTargets<T>& soft) {
    std::vector<RawTensor> ts;
    for (const auto& [task, rows] : soft.source)
        ts.push_back(RawTensor::from("soft.src." + task, rows));
    ts.push_back(RawTensor::from("soft.tgt", soft.target));
    write_checkpoint(path, ts);
}

template <typename T>
SoftTargets<T> load_soft_targets(const std::string& path) {
    SoftTargets<T> soft;
    for (auto& raw : read_checkpoint(path)) {
        if (raw.name.rfind("soft.src.", 0) == 0)
            soft.source.emplace_back(raw.name.substr(9), raw.template to<T>());
        else if (raw.name == "soft.tgt")
            soft.target = raw.template to<T>();
        else
            throw FileError("soft targets: unexpected tensor " + raw.name);
    }
    if (soft.source.empty() || soft.target.size() == 0)
        throw FileError("soft targets: incomplete file");
    return soft;
}

// ---------------------------------------------------------------------------
// Combined training and the full pipeline.

template <typename T>
struct ResclConfig {
    std::string target_task;
    std::size_t target_classes = 4;
    TrainConfig<T> warmup;
    TrainConfig<T> finetune;
    TrainConfig<T> combined;  // combined.loss.lambda is the trade-off knob
};

template <typename T>
ResclConfig<T> default_rescl_config(const std::string& task, std::size_t classes,
                                    std::uint64_t seed, std::size_t iters = 2000) {
    ResclConfig<T> cfg;
    cfg.target_task = task;
    cfg.target_classes = classes;
    cfg.warmup.iterations = iters / 4;
    cfg.warmup.seed = seed;
    cfg.finetune.iterations = iters;
    cfg.finetune.seed = seed + 1;
    cfg.combined.iterations = iters;
    cfg.combined.seed = seed + 2;
    return cfg;
}

/// Minimize the combined objective over (alpha, theta_t, target head).
/// The frozen source path is never wrapped as trainable, so no gradient is
/// ever accumulated for theta_s*.
template <typename T>
void combined_train(CombinedNetwork<T>& c, const Dataset& data, const SoftTargets<T>& soft,
                    const TrainConfig<T>& cfg, MetricsSink* metrics = nullptr,
                    const std::function<void(std::size_t)>& eval_hook = {}) {
    if (cfg.iterations == 0) return;
    if (soft.target.shape[0] != data.size())
        throw std::invalid_argument("combined_train: soft targets not aligned with dataset");
    std::vector<ParamSlot<T>> slots = trunk_slots(c.target);
    add_head_slots(slots, c.target, c.target_task);
    std::size_t n_theta = slots.size();
    for (std::size_t k = 0; k < c.combs.size(); ++k) {
        slots.push_back(ParamSlot<T>{"comb." + std::to_string(k) + ".alpha_s",
                                     &c.combs[k].alpha_s,
                                     Tensor<T>::zeros(c.combs[k].alpha_s.shape), false});
        slots.push_back(ParamSlot<T>{"comb." + std::to_string(k) + ".alpha_t",
                                     &c.combs[k].alpha_t,
                                     Tensor<T>::zeros(c.combs[k].alpha_t.shape), false});
    }
    Batcher batcher(data.size(), cfg.batch, cfg.seed);
    detail::run_sgd(
        slots, cfg,
        [&](ForwardCtx<T>& ctx, detail::StepVars<T>& vars, std::size_t) {
            auto idx = batcher.next();
            auto x = ctx.tape.constant(gather_images<T>(data.images, idx));
            std::vector<std::pair<std::string, Tensor<T>>> src_rows;
            for (const auto& [task, rows] : soft.source)
                src_rows.emplace_back(task, gather_rows(rows, idx));
            Tensor<T> tgt_rows = gather_rows(soft.target, idx);
            std::vector<Var<T>> theta(vars.by_slot.begin(),
                                      vars.by_slot.begin() + static_cast<std::ptrdiff_t>(n_theta));
            return rescl_total_loss(ctx, c, x, src_rows, tgt_rows, theta, cfg.loss);
        },
        metrics, eval_hook);
}

template <typename T>
struct ResclPrep {
    NetworkState<T> warmed;     // source + trained target head
    NetworkState<T> finetuned;  // theta_t*
    SoftTargets<T> soft;
};

/// Stages of Algorithm "warm-up -> fine-tune -> cache soft targets" that do
/// not depend on the trade-off hyperparameter (shared across sweep points).
template <typename T>
ResclPrep<T> rescl_prepare(const NetworkState<T>& net_s, const Dataset& data,
                           const ResclConfig<T>& cfg) {
    ResclPrep<T> prep;
    prep.warmed = net_s;
    if (!prep.warmed.has_task(cfg.target_task)) {
        SplitMix64 rng(cfg.warmup.seed ^ 0x5EEDFACEULL);
        add_head(prep.warmed, cfg.target_task, cfg.target_classes, rng);
    }
    warmup_head(prep.warmed, cfg.target_task, data, cfg.warmup);
    prep.finetuned = finetune(prep.warmed, cfg.target_task, data, cfg.finetune);
    NetworkState<T> source = net_s;  // soft source targets come from the original heads
    prep.soft = compute_soft_targets(source, prep.finetuned, cfg.target_task, data.images,
                                     cfg.combined.loss.temperature);
    return prep;
}

template <typename T>
struct ResclResult {
    CombinedNetwork<T> combined;
    NetworkState<T> merged;
};

template <typename T>
std::string prep_task_name(const ResclPrep<T>& prep) {
    // the task present in the fine-tuned net but absent from the soft sources
    for (const auto& [task, head] : prep.finetuned.heads) {
        bool is_source = false;
        for (const auto& [s, rows] : prep.soft.source) is_source = is_source || s == task;
        if (!is_source) return task;
    }
    throw std::logic_error("rescl: cannot identify target task");
}

template <typename T>
ResclResult<T> rescl_combine_stage(const NetworkState<T>& net_s, const ResclPrep<T>& prep,
                                   const Dataset& data, const TrainConfig<T>& combined_cfg,
                                   MetricsSink* metrics = nullptr) {
    ResclResult<T> res;
    res.combined = build_combined(net_s, prep.finetuned, prep_task_name(prep));
    res.combined.parameterization = combined_cfg.loss.parameterization;
    combined_train(res.combined, data, prep.soft, combined_cfg, metrics);
    recompute_target_population_stats(res.combined, data.images.cast<T>(), combined_cfg.batch);
    res.merged = merge(res.combined);
    return res;
}

/// The full pipeline: warm-up, fine-tune, cache soft targets, combine with
/// balanced alpha init and theta_t = theta_t*, train the combined network,
/// finalize target-path BN statistics, merge.
template <typename T>
ResclResult<T> run_rescl(const NetworkState<T>& net_s, const Dataset& data,
                         const ResclConfig<T>& cfg, MetricsSink* metrics = nullptr) {
    ResclPrep<T> prep = rescl_prepare(net_s, data, cfg);
    return rescl_combine_stage(net_s, prep, data, cfg.combined, metrics);
}

// ---------------------------------------------------------------------------
// Baselines.

/// Learning without Forgetting on the source network itself: tempered KL
/// pulls every old head toward the cached source outputs while plain
/// cross-entropy fits the target head; lambda_lwf scales the source term.
template <typename T>
NetworkState<T> baseline_lwf(const NetworkState<T>& net_s, const Dataset& data,
                             const ResclConfig<T>& cfg, T lambda_lwf,
                             MetricsSink* metrics = nullptr) {
    NetworkState<T> net = net_s;
    if (!net.has_task(cfg.target_task)) {
        SplitMix64 rng(cfg.warmup.seed ^ 0x5EEDFACEULL);
        add_head(net, cfg.target_task, cfg.target_classes, rng);
    }
    warmup_head(net, cfg.target_task, data, cfg.warmup);
    NetworkState<T> source = net_s;
    std::vector<std::pair<std::string, Tensor<T>>> soft_src;
    for (auto& [task, head] : source.heads)
        soft_src.emplace_back(task,
                              soft_outputs(source, task, data.images, cfg.combined.loss.temperature));

    const TrainConfig<T>& tc = cfg.combined;
    if (tc.iterations == 0) return net;
    auto slots = trunk_slots(net);
    for (auto& [task, head] : net.heads) add_head_slots(slots, net, task);
    Batcher batcher(data.size(), tc.batch, tc.seed);
    detail::run_sgd(
        slots, tc,
        [&](ForwardCtx<T>& ctx, detail::StepVars<T>& vars, std::size_t) {
            auto idx = batcher.next();
            auto x = ctx.tape.constant(gather_images<T>(data.images, idx));
            auto feats = trunk_forward(ctx, net, x);
            Var<T> loss;
            for (const auto& [task, rows] : soft_src) {
                auto logits = head_forward(ctx, net, task, feats);
                auto term = kl_tempered(ctx.tape, gather_rows(rows, idx), logits,
                                        tc.loss.temperature);
                loss = loss ? add(ctx.tape, loss, term) : term;
            }
            loss = scale(ctx.tape, loss, lambda_lwf);
            auto tgt_logits = head_forward(ctx, net, cfg.target_task, feats);
            auto ce = kl_tempered(ctx.tape, one_hot<T>(data.labels, idx, data.classes),
                                  tgt_logits, T(1));
            loss = add(ctx.tape, loss, ce);
            return add(ctx.tape, loss, weight_decay_l2(ctx, vars.by_slot, tc.loss.lambda_dec));
        },
        metrics);
    recompute_population_stats(net, data.images.cast<T>(), tc.batch);
    return net;
}

/// Elementwise convex combination of two structurally identical networks
/// (BN population statistics averaged the same way).
template <typename T>
NetworkState<T> baseline_mean_imm(NetworkState<T>& net_a, NetworkState<T>& net_b, T mix) {
    if (mix < T(0) || mix > T(1))
        throw std::invalid_argument("mean_imm: mix must be in [0,1]");
    if (to_spec_string(net_a) != to_spec_string(net_b))
        throw std::invalid_argument("mean_imm: network specs differ");
    for (auto& [task, head] : net_a.heads)
        if (!net_b.has_task(task)) throw std::invalid_argument("mean_imm: head sets differ");
    if (net_a.heads.size() != net_b.heads.size())
        throw std::invalid_argument("mean_imm: head sets differ");
    NetworkState<T> out = net_a;
    std::map<std::string, Tensor<T>*> b_tensors;
    for_each_named_tensor(net_b,
                          [&](const std::string& n, Tensor<T>& t) { b_tensors[n] = &t; });
    for_each_named_tensor(out, [&](const std::string& n, Tensor<T>& t) {
        Tensor<T>* tb = b_tensors.at(n);
        for (std::size_t i = 0; i < t.size(); ++i)
            t[i] = (T(1) - mix) * t[i] + mix * (*tb)[i];
    });
    return out;
}

/// Upper-bound reference: alternate batches from both tasks, training the
/// shared trunk and both heads.
template <typename T>
NetworkState<T> baseline_joint(const NetworkState<T>& start, const std::string& source_task,
                               const Dataset& source_data, const std::string& target_task,
                               const Dataset& target_data, const TrainConfig<T>& cfg,
                               MetricsSink* metrics = nullptr) {
    NetworkState<T> net = start;
    if (cfg.iterations == 0) return net;
    auto slots = trunk_slots(net);
    for (auto& [task, head] : net.heads) add_head_slots(slots, net, task);
    Batcher src_batches(source_data.size(), cfg.batch, cfg.seed);
    Batcher tgt_batches(target_data.size(), cfg.batch, cfg.seed + 1);
    detail::run_sgd(
        slots, cfg,
        [&](ForwardCtx<T>& ctx, detail::StepVars<T>& vars, std::size_t iter) {
            bool on_source = iter % 2 == 0;
            const Dataset& data = on_source ? source_data : target_data;
            const std::string& task = on_source ? source_task : target_task;
            auto idx = (on_source ? src_batches : tgt_batches).next();
            auto x = ctx.tape.constant(gather_images<T>(data.images, idx));
            auto logits = network_forward(ctx, net, x, task);
            auto ce = kl_tempered(ctx.tape, one_hot<T>(data.labels, idx, data.classes), logits,
                                  T(1));
            return add(ctx.tape, ce, weight_decay_l2(ctx, vars.by_slot, cfg.loss.lambda_dec));
        },
        metrics);
    // population statistics from both tasks, source first
    Shape s = source_data.images.shape;
    s[0] = source_data.size() + target_data.size();
    Tensor<T> both(s);
    std::size_t off = 0;
    for (float v : source_data.images.data) both[off++] = static_cast<T>(v);
    for (float v : target_data.images.data) both[off++] = static_cast<T>(v);
    recompute_population_stats(net, both, cfg.batch);
    return net;
}

}  // namespace rescl
