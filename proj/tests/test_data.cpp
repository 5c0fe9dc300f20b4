#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <set>

#include "oracles.hpp"
#include "rescl/data.hpp"
#include "rescl/trainer.hpp"

using namespace rescl;

TEST_CASE("gen_task: same spec yields byte-identical datasets and files", "[data]") {
    TaskSpec spec;
    spec.family = PatternFamily::Bars;
    spec.n_train = 60;
    spec.n_val = 20;
    spec.n_test = 20;
    spec.seed = 42;
    auto a = gen_task(spec);
    auto b = gen_task(spec);
    REQUIRE(a.train.images.data == b.train.images.data);
    REQUIRE(a.train.labels == b.train.labels);
    REQUIRE(a.test.images.data == b.test.images.data);

    store_dataset("/tmp/rescl_data_a.rcld", a.train);
    store_dataset("/tmp/rescl_data_b.rcld", b.train);
    REQUIRE(io::file_hash("/tmp/rescl_data_a.rcld") == io::file_hash("/tmp/rescl_data_b.rcld"));

    spec.seed = 43;
    auto c = gen_task(spec);
    REQUIRE(a.train.images.data != c.train.images.data);
}

TEST_CASE("gen_task: values in range, labels in range, splits disjoint", "[data]") {
    for (auto family : {PatternFamily::Bars, PatternFamily::Glyphs, PatternFamily::Blobs,
                        PatternFamily::Halves}) {
        TaskSpec spec;
        spec.family = family;
        spec.n_train = 50;
        spec.n_val = 20;
        spec.n_test = 20;
        spec.seed = 7;
        auto task = gen_task(spec);
        REQUIRE(task.train.size() == 50);
        REQUIRE(task.val.size() == 20);
        REQUIRE(task.test.size() == 20);
        for (auto& d : {task.train, task.val, task.test}) {
            for (float v : d.images.data) {
                REQUIRE(v >= 0.0f);
                REQUIRE(v <= 1.0f);
            }
            for (auto l : d.labels) REQUIRE(l < spec.classes);
        }
        // no image appears in both train and val/test (noise makes
        // collisions vanishingly unlikely, so hashes suffice)
        std::set<std::uint64_t> train_hashes;
        std::size_t hw = spec.resolution * spec.resolution;
        for (std::size_t i = 0; i < task.train.size(); ++i)
            train_hashes.insert(
                fnv1a(task.train.images.data.data() + i * hw, hw * sizeof(float)));
        for (auto* d : {&task.val, &task.test})
            for (std::size_t i = 0; i < d->size(); ++i)
                REQUIRE(train_hashes.count(
                            fnv1a(d->images.data.data() + i * hw, hw * sizeof(float))) == 0);
    }
}

TEST_CASE("gen_task: invalid parameters rejected", "[data]") {
    TaskSpec spec;
    spec.classes = 1;
    REQUIRE_THROWS_AS(gen_task(spec), std::invalid_argument);
    spec.classes = 4;
    spec.n_train = 0;
    REQUIRE_THROWS_AS(gen_task(spec), std::invalid_argument);
    spec.n_train = 10;
    spec.noise = 0.9;
    REQUIRE_THROWS_AS(gen_task(spec), std::invalid_argument);
}

TEST_CASE("halves family at zero noise is linearly separable", "[data]") {
    TaskSpec spec;
    spec.family = PatternFamily::Halves;
    spec.classes = 2;
    spec.noise = 0.0;
    spec.n_train = 120;
    spec.n_val = 10;
    spec.n_test = 10;
    spec.seed = 5;
    auto task = gen_task(spec);
    SplitMix64 rng(1);
    auto probe = make_network<double>("in:1x8x8|flatten", rng);
    add_head(probe, "T", 2, rng);
    auto slots = trunk_slots(probe);
    REQUIRE(slots.empty());  // flatten has no parameters; linear probe only
    add_head_slots(slots, probe, "T");
    TrainConfig<double> cfg;
    cfg.iterations = 300;
    cfg.batch = 32;
    cfg.lr = 0.5;
    cfg.seed = 2;
    supervised_train(probe, slots, "T", task.train, cfg);
    auto [correct, total] = evaluate(probe, task.train, "T");
    REQUIRE(correct == total);  // 100% train accuracy
}

TEST_CASE("augment: disabled is the identity and draws nothing", "[data]") {
    SplitMix64 rng(3);
    auto batch = oracle::random_tensor<float>({4, 1, 8, 8}, rng);
    SplitMix64 aug_rng(10);
    auto out = augment(batch, false, 0, aug_rng);
    REQUIRE(out.data == batch.data);
    SplitMix64 untouched(10);
    REQUIRE(aug_rng.next() == untouched.next());  // no draws happened
}

TEST_CASE("augment: flip is an involution and shapes are preserved", "[data]") {
    SplitMix64 rng(4);
    auto batch = oracle::random_tensor<float>({3, 2, 6, 6}, rng);
    auto flipped = flip_horizontal(batch);
    REQUIRE(flipped.data != batch.data);
    auto twice = flip_horizontal(flipped);
    REQUIRE(twice.data == batch.data);

    for (int pad : {0, 1, 2, 3}) {
        SplitMix64 aug_rng(5);
        auto out = augment(batch, true, pad, aug_rng);
        REQUIRE(out.shape == batch.shape);
    }
    SplitMix64 aug_rng(6);
    REQUIRE_THROWS_AS(augment(batch, false, -1, aug_rng), std::invalid_argument);
}

TEST_CASE("dataset files: round-trip, bad magic, empty rejected", "[data]") {
    TaskSpec spec;
    spec.n_train = 16;
    spec.n_val = 4;
    spec.n_test = 4;
    spec.seed = 9;
    auto task = gen_task(spec);
    store_dataset("/tmp/rescl_roundtrip.rcld", task.train);
    auto back = load_dataset("/tmp/rescl_roundtrip.rcld");
    REQUIRE(back.images.shape == task.train.images.shape);
    REQUIRE(back.images.data == task.train.images.data);
    REQUIRE(back.labels == task.train.labels);
    REQUIRE(back.classes == task.train.classes);

    {
        std::ofstream os("/tmp/rescl_badmagic.rcld", std::ios::binary);
        os << "NOPE then some garbage bytes";
    }
    REQUIRE_THROWS_AS(load_dataset("/tmp/rescl_badmagic.rcld"), FileError);

    {
        // truncate mid-header
        std::ofstream os("/tmp/rescl_trunc.rcld", std::ios::binary);
        os << "RCLD";
    }
    REQUIRE_THROWS_AS(load_dataset("/tmp/rescl_trunc.rcld"), FileError);

    Dataset empty;
    empty.images = Tensor<float>(Shape{0, 1, 8, 8});
    empty.classes = 4;
    REQUIRE_THROWS_AS(store_dataset("/tmp/rescl_empty.rcld", empty), FileError);
    REQUIRE_THROWS_AS(load_dataset("/tmp/rescl_missing_file.rcld"), FileError);
}
