#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "rescl/trainer.hpp"

using namespace rescl;

TEST_CASE("sgd_step: plain step, momentum recurrence, zero gradient", "[trainer]") {
    auto p = Tensor<double>::scalar(5.0);
    auto v = Tensor<double>::zeros({1});
    sgd_step(p, Tensor<double>::scalar(2.0), v, 1.0, 0.0);
    REQUIRE(p[0] == 3.0);

    p = Tensor<double>::scalar(0.0);
    v = Tensor<double>::zeros({1});
    sgd_step(p, Tensor<double>::scalar(1.0), v, 1.0, 0.9);
    sgd_step(p, Tensor<double>::scalar(1.0), v, 1.0, 0.9);
    REQUIRE(p[0] == Catch::Approx(-2.9).epsilon(1e-12));

    auto before = p[0];
    auto vel_before = v[0];
    sgd_step(p, Tensor<double>::scalar(0.0), v, 1.0, 0.9);
    REQUIRE(p[0] != before);  // momentum keeps moving
    REQUIRE(v[0] == Catch::Approx(0.9 * vel_before).epsilon(1e-12));

    // zero gradient with zero velocity leaves parameters unchanged
    auto q = Tensor<double>::scalar(1.5);
    auto vq = Tensor<double>::zeros({1});
    sgd_step(q, Tensor<double>::scalar(0.0), vq, 1.0, 0.9);
    REQUIRE(q[0] == 1.5);

    Tensor<double> nang = Tensor<double>::scalar(std::nan(""));
    REQUIRE_THROWS_AS(sgd_step(q, nang, vq, 1.0, 0.9), TrainingDiverged);
}

TEST_CASE("learning-rate schedule steps at 50% and 75%", "[trainer]") {
    TrainConfig<double> cfg;
    cfg.iterations = 2000;
    cfg.lr = 0.1;
    REQUIRE(cfg.lr_at(0) == 0.1);
    REQUIRE(cfg.lr_at(999) == 0.1);
    REQUIRE(cfg.lr_at(1000) == Catch::Approx(0.01));
    REQUIRE(cfg.lr_at(1499) == Catch::Approx(0.01));
    REQUIRE(cfg.lr_at(1500) == Catch::Approx(0.001));
}

namespace {

TaskData small_task(PatternFamily family, std::uint64_t seed) {
    TaskSpec spec;
    spec.family = family;
    spec.n_train = 200;
    spec.n_val = 60;
    spec.n_test = 60;
    spec.seed = seed;
    return gen_task(spec);
}

NetworkState<float> small_source(const TaskData& task, std::uint64_t seed,
                                 std::size_t iters = 300) {
    TrainConfig<float> cfg;
    cfg.iterations = iters;
    cfg.batch = 32;
    cfg.seed = seed;
    return train_source<float>("in:1x8x8|conv:6,3,1,1|unit:6,1|unit:8,2|bn|relu|gap", "A", 4,
                               task.train, cfg);
}

}  // namespace

TEST_CASE("warmup: trunk untouched, source head outputs identical", "[trainer][slow]") {
    auto taskA = small_task(PatternFamily::Bars, 100);
    auto taskB = small_task(PatternFamily::Glyphs, 200);
    auto net = small_source(taskA, 1);
    auto trunk_before = trunk_checksum(net);

    SplitMix64 rng(9);
    auto x = oracle::random_tensor<float>({4, 1, 8, 8}, rng, 0, 1);
    auto src_logits = [&]() {
        Tape<float> tape;
        ForwardCtx<float> ctx{tape};
        return network_forward(ctx, net, tape.constant(x), "A")->t;
    };
    auto before_logits = src_logits();

    add_head(net, "B", 4, rng);
    TrainConfig<float> wcfg;
    wcfg.iterations = 200;
    wcfg.batch = 32;
    wcfg.seed = 3;
    warmup_head(net, "B", taskB.train, wcfg);

    REQUIRE(trunk_checksum(net) == trunk_before);
    REQUIRE(src_logits().data == before_logits.data);

    auto [correct, total] = evaluate(net, taskB.val, "B");
    REQUIRE(static_cast<double>(correct) / total > 0.3);  // above 4-class chance
}

TEST_CASE("finetune: zero iterations is the identity; seeded runs reproduce", "[trainer][slow]") {
    auto taskA = small_task(PatternFamily::Bars, 101);
    auto taskB = small_task(PatternFamily::Glyphs, 201);
    auto net = small_source(taskA, 2);
    SplitMix64 rng(5);
    add_head(net, "B", 4, rng);
    TrainConfig<float> wcfg;
    wcfg.iterations = 100;
    wcfg.batch = 32;
    wcfg.seed = 4;
    warmup_head(net, "B", taskB.train, wcfg);

    TrainConfig<float> zero;
    zero.iterations = 0;
    auto same = finetune(net, "B", taskB.train, zero);
    REQUIRE(trunk_checksum(same) == trunk_checksum(net));
    REQUIRE(same.heads.at("B").W.data == net.heads.at("B").W.data);

    TrainConfig<float> fcfg;
    fcfg.iterations = 150;
    fcfg.batch = 32;
    fcfg.seed = 6;
    auto t1 = finetune(net, "B", taskB.train, fcfg);
    auto t2 = finetune(net, "B", taskB.train, fcfg);
    REQUIRE(trunk_checksum(t1) == trunk_checksum(t2));
    REQUIRE(t1.heads.at("B").W.data == t2.heads.at("B").W.data);
}

TEST_CASE("mean-IMM: endpoints and scalar averaging", "[trainer]") {
    SplitMix64 rng(7);
    std::string spec = "in:1x6x6|conv:3,3,1,1+bn|relu|gap";
    auto a = make_network<float>(spec, rng);
    add_head(a, "A", 2, rng);
    auto b = make_network<float>(spec, rng);
    b.heads = a.heads;

    auto only_a = baseline_mean_imm(a, b, 0.0f);
    REQUIRE(trunk_checksum(only_a) == trunk_checksum(a));
    auto only_b = baseline_mean_imm(a, b, 1.0f);
    REQUIRE(trunk_checksum(only_b) == trunk_checksum(b));

    // scalar check: weights 2 and 4 average to 3
    auto& ca = std::get<ConvLayer<float>>(std::get<LinearBlock<float>>(a.trunk[0]).prims[0]);
    auto& cb = std::get<ConvLayer<float>>(std::get<LinearBlock<float>>(b.trunk[0]).prims[0]);
    ca.W[0] = 2.0f;
    cb.W[0] = 4.0f;
    auto mid = baseline_mean_imm(a, b, 0.5f);
    auto& cm = std::get<ConvLayer<float>>(std::get<LinearBlock<float>>(mid.trunk[0]).prims[0]);
    REQUIRE(cm.W[0] == 3.0f);

    // the sweep axis r = alpha_1/alpha_2 maps to mix = 1/(1+r)
    for (int k = -3; k <= 3; ++k) {
        double r = std::pow(2.0, k);
        double mix = 1.0 / (1.0 + r);
        REQUIRE(mix > 0.0);
        REQUIRE(mix < 1.0);
        auto m = baseline_mean_imm(a, b, static_cast<float>(mix));
        auto& cw = std::get<ConvLayer<float>>(std::get<LinearBlock<float>>(m.trunk[0]).prims[0]);
        REQUIRE(cw.W[0] == Catch::Approx((1 - mix) * 2.0 + mix * 4.0).epsilon(1e-6));
    }

    REQUIRE_THROWS_AS(baseline_mean_imm(a, b, 1.5f), std::invalid_argument);
    auto other = make_network<float>("in:1x6x6|conv:4,3,1,1|relu|gap", rng);
    add_head(other, "A", 2, rng);
    REQUIRE_THROWS_AS(baseline_mean_imm(a, other, 0.5f), std::invalid_argument);
}

TEST_CASE("run_rescl: end-to-end on a tiny problem, deterministic", "[trainer][slow]") {
    auto taskA = small_task(PatternFamily::Bars, 102);
    auto taskB = small_task(PatternFamily::Glyphs, 202);
    auto net_s = small_source(taskA, 3);

    auto cfg = default_rescl_config<float>("B", 4, 11, /*iters=*/120);
    cfg.warmup.batch = cfg.finetune.batch = cfg.combined.batch = 32;
    auto r1 = run_rescl(net_s, taskB.train, cfg);
    auto r2 = run_rescl(net_s, taskB.train, cfg);
    REQUIRE(trunk_checksum(r1.merged) == trunk_checksum(r2.merged));

    // the source path is untouched by training
    REQUIRE(trunk_checksum(r1.combined.source) == trunk_checksum(net_s));
    // the merged net serves both tasks
    auto [ca, ta] = evaluate(r1.merged, taskA.test, "A");
    auto [cb, tb] = evaluate(r1.merged, taskB.test, "B");
    REQUIRE(ta == taskA.test.size());
    REQUIRE(tb == taskB.test.size());
    REQUIRE(r1.merged.heads.size() == 2);
    (void)ca;
    (void)cb;

    // alpha moved away from the balanced init during training
    bool moved = false;
    for (const auto& p : r1.combined.combs)
        for (float v : p.alpha_s.data) moved = moved || v != -0.5f;
    REQUIRE(moved);
}

TEST_CASE("combined gradients reach alpha and theta_t but never theta_s", "[trainer][slow]") {
    auto taskA = small_task(PatternFamily::Bars, 103);
    auto taskB = small_task(PatternFamily::Glyphs, 203);
    auto net_s = small_source(taskA, 4, 150);
    auto cfg = default_rescl_config<float>("B", 4, 12, /*iters=*/40);
    cfg.warmup.batch = cfg.finetune.batch = cfg.combined.batch = 32;
    auto prep = rescl_prepare(net_s, taskB.train, cfg);
    auto c = build_combined(net_s, prep.finetuned, "B");

    // one manual step: wrap trainables, compute the loss, check gradients
    std::vector<ParamSlot<float>> slots = trunk_slots(c.target);
    add_head_slots(slots, c.target, "B");
    std::size_t n_theta = slots.size();
    for (auto& p : c.combs) {
        slots.push_back(ParamSlot<float>{"as", &p.alpha_s, Tensor<float>::zeros(p.alpha_s.shape),
                                         false});
        slots.push_back(ParamSlot<float>{"at", &p.alpha_t, Tensor<float>::zeros(p.alpha_t.shape),
                                         false});
    }
    Tape<float> tape;
    std::unordered_map<const void*, Var<float>> lookup;
    std::vector<Var<float>> by_slot;
    for (auto& s : slots) {
        auto v = tape.leaf(*s.value, true);
        lookup[s.value] = v;
        by_slot.push_back(v);
    }
    ForwardCtx<float> ctx{tape};
    ctx.bn_mode = BnMode::Batch;
    ctx.trainable = &lookup;
    std::vector<std::size_t> idx(32);
    for (std::size_t i = 0; i < 32; ++i) idx[i] = i;
    auto x = tape.constant(gather_images<float>(taskB.train.images, idx));
    std::vector<std::pair<std::string, Tensor<float>>> src_rows;
    for (auto& [task, rows] : prep.soft.source) src_rows.emplace_back(task, gather_rows(rows, idx));
    std::vector<Var<float>> theta(by_slot.begin(), by_slot.begin() + n_theta);
    auto loss = rescl_total_loss(ctx, c, x, src_rows, gather_rows(prep.soft.target, idx), theta,
                                 cfg.combined.loss);
    tape.backward(loss);
    double alpha_sq = 0, theta_sq = 0;
    for (std::size_t i = 0; i < slots.size(); ++i) {
        double sq = 0;
        for (float g : by_slot[i]->t.grad) sq += static_cast<double>(g) * g;
        if (i < n_theta)
            theta_sq += sq;
        else
            alpha_sq += sq;
    }
    REQUIRE(alpha_sq > 0.0);
    REQUIRE(theta_sq > 0.0);
    // source parameters were never wrapped, so nothing accumulated for them
    REQUIRE(trunk_checksum(c.source) == trunk_checksum(net_s));
}

TEST_CASE("baseline_lwf: tiny run is deterministic and keeps both heads", "[trainer][slow]") {
    auto taskA = small_task(PatternFamily::Bars, 104);
    auto taskB = small_task(PatternFamily::Glyphs, 204);
    auto net_s = small_source(taskA, 5, 150);
    auto cfg = default_rescl_config<float>("B", 4, 13, /*iters=*/60);
    cfg.warmup.batch = cfg.combined.batch = 32;
    auto m1 = baseline_lwf(net_s, taskB.train, cfg, 1.0f);
    auto m2 = baseline_lwf(net_s, taskB.train, cfg, 1.0f);
    REQUIRE(trunk_checksum(m1) == trunk_checksum(m2));
    REQUIRE(m1.has_task("A"));
    REQUIRE(m1.has_task("B"));
}

TEST_CASE("baseline_joint: zero iterations is identity; trains both heads", "[trainer][slow]") {
    auto taskA = small_task(PatternFamily::Bars, 105);
    auto taskB = small_task(PatternFamily::Glyphs, 205);
    auto net = small_source(taskA, 6, 150);
    SplitMix64 rng(14);
    add_head(net, "B", 4, rng);
    TrainConfig<float> zero;
    zero.iterations = 0;
    auto same = baseline_joint(net, "A", taskA.train, "B", taskB.train, zero);
    REQUIRE(trunk_checksum(same) == trunk_checksum(net));

    TrainConfig<float> cfg;
    cfg.iterations = 200;
    cfg.batch = 32;
    cfg.seed = 15;
    auto joint = baseline_joint(net, "A", taskA.train, "B", taskB.train, cfg);
    auto [ca, ta] = evaluate(joint, taskA.val, "A");
    auto [cb, tb] = evaluate(joint, taskB.val, "B");
    REQUIRE(static_cast<double>(ca) / ta > 0.5);
    REQUIRE(static_cast<double>(cb) / tb > 0.5);
}

TEST_CASE("soft targets: rows sum to one and align with the dataset", "[trainer]") {
    auto taskB = small_task(PatternFamily::Glyphs, 206);
    SplitMix64 rng(16);
    auto net = make_network<float>("in:1x8x8|conv:4,3,1,1|bn|relu|gap", rng);
    add_head(net, "A", 4, rng);
    for_each_bn(net, [](const std::string&, BatchNormLayer<float>& bn) {
        bn.stats_finalized = true;
    });
    auto net_t = net;
    add_head(net_t, "B", 4, rng);
    auto soft = compute_soft_targets(net, net_t, "B", taskB.train.images, 2.0f);
    REQUIRE(soft.source.size() == 1);
    REQUIRE(soft.target.shape[0] == taskB.train.size());
    for (std::size_t i = 0; i < soft.target.shape[0]; ++i) {
        double row = 0;
        for (std::size_t j = 0; j < soft.target.shape[1]; ++j) row += soft.target.at2(i, j);
        REQUIRE(row == Catch::Approx(1.0).margin(1e-5));
    }
    save_soft_targets("/tmp/rescl_soft.rcln", soft);
    auto back = load_soft_targets<float>("/tmp/rescl_soft.rcln");
    REQUIRE(back.source[0].second.data == soft.source[0].second.data);
    REQUIRE(back.target.data == soft.target.data);
}
