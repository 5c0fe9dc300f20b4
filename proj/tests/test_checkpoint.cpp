#include <catch2/catch_amalgamated.hpp>

#include <fstream>

#include "oracles.hpp"
#include "rescl/checkpoint.hpp"

using namespace rescl;

TEST_CASE("network checkpoints round-trip bitwise", "[checkpoint]") {
    SplitMix64 rng(1);
    auto net = make_network<float>("in:1x8x8|conv:4,3,1,1|unit:6,2|bn|relu|gap", rng);
    add_head(net, "A", 3, rng);
    add_head(net, "B", 2, rng);
    for_each_bn(net, [&](const std::string&, BatchNormLayer<float>& bn) {
        for (auto& v : bn.pop_mean.data) v = static_cast<float>(rng.uniform(-1, 1));
        for (auto& v : bn.pop_var.data) v = static_cast<float>(rng.uniform(0.1, 2));
        bn.stats_finalized = true;
    });
    save_network("/tmp/rescl_net.rcln", net);
    auto back = load_network<float>("/tmp/rescl_net.rcln", to_spec_string(net));
    REQUIRE(to_spec_string(back) == to_spec_string(net));
    REQUIRE(trunk_checksum(back) == trunk_checksum(net));
    REQUIRE(back.heads.size() == 2);
    REQUIRE(back.heads.at("A").W.data == net.heads.at("A").W.data);
    for_each_bn(back, [&](const std::string&, BatchNormLayer<float>& bn) {
        REQUIRE(bn.stats_finalized);
    });

    // saving twice yields byte-identical files
    save_network("/tmp/rescl_net2.rcln", net);
    REQUIRE(io::file_hash("/tmp/rescl_net.rcln") == io::file_hash("/tmp/rescl_net2.rcln"));
}

TEST_CASE("combined checkpoints carry alpha under comb.<k> names", "[checkpoint]") {
    SplitMix64 rng(2);
    std::string spec = "in:1x6x6|conv:3,3,1,1|bn|relu|gap";
    auto net_s = make_network<float>(spec, rng);
    add_head(net_s, "A", 2, rng);
    for_each_bn(net_s, [](const std::string&, BatchNormLayer<float>& bn) {
        bn.stats_finalized = true;
    });
    auto net_t = net_s;
    add_head(net_t, "B", 2, rng);
    auto c = build_combined(net_s, net_t, "B");
    c.combs[0].alpha_s[0] = 0.125f;
    save_combined("/tmp/rescl_comb.rcln", c);

    bool saw_alpha = false;
    for (const auto& raw : read_checkpoint("/tmp/rescl_comb.rcln"))
        if (raw.name == "comb.0.alpha_s") {
            saw_alpha = true;
            REQUIRE(raw.values[0] == 0.125);
        }
    REQUIRE(saw_alpha);

    auto back = load_combined<float>("/tmp/rescl_comb.rcln", spec, "B");
    REQUIRE(back.combs.size() == c.combs.size());
    REQUIRE(back.combs[0].alpha_s.data == c.combs[0].alpha_s.data);
    REQUIRE(back.target.has_task("B"));
    REQUIRE(back.source.heads.size() == 1);
}

TEST_CASE("checkpoint errors: magic, version, truncation, missing tensors", "[checkpoint]") {
    {
        std::ofstream os("/tmp/rescl_ck_bad.rcln", std::ios::binary);
        os << "XXXX";
    }
    REQUIRE_THROWS_AS(read_checkpoint("/tmp/rescl_ck_bad.rcln"), FileError);

    {
        std::ofstream os("/tmp/rescl_ck_trunc.rcln", std::ios::binary);
        os << "RCLN";
    }
    REQUIRE_THROWS_AS(read_checkpoint("/tmp/rescl_ck_trunc.rcln"), FileError);

    // a checkpoint missing one trunk tensor must be rejected
    SplitMix64 rng(3);
    auto net = make_network<float>("in:1x6x6|conv:2,3,1,1|relu|gap", rng);
    add_head(net, "A", 2, rng);
    std::vector<RawTensor> ts;
    for_each_named_tensor(net, [&](const std::string& name, Tensor<float>& t) {
        if (name != "trunk.0.0.bias") ts.push_back(RawTensor::from(name, t));
    });
    write_checkpoint("/tmp/rescl_ck_missing.rcln", ts);
    REQUIRE_THROWS_AS(load_network<float>("/tmp/rescl_ck_missing.rcln", to_spec_string(net)),
                      FileError);

    // an extra unknown tensor must also be rejected
    ts.push_back(RawTensor::from("trunk.0.0.bias",
                                 Tensor<float>::zeros({2})));
    ts.push_back(RawTensor::from("mystery", Tensor<float>::zeros({1})));
    write_checkpoint("/tmp/rescl_ck_extra.rcln", ts);
    REQUIRE_THROWS_AS(load_network<float>("/tmp/rescl_ck_extra.rcln", to_spec_string(net)),
                      FileError);
}

TEST_CASE("checkpoints convert between element widths on load", "[checkpoint]") {
    SplitMix64 rng(4);
    auto net = make_network<double>("in:1x6x6|conv:2,3,1,1|relu|gap", rng);
    add_head(net, "A", 2, rng);
    save_network("/tmp/rescl_ck_f64.rcln", net);
    auto as_float = load_network<float>("/tmp/rescl_ck_f64.rcln", to_spec_string(net));
    auto& blk = std::get<LinearBlock<float>>(as_float.trunk[0]);
    auto& conv64 = std::get<LinearBlock<double>>(net.trunk[0]);
    REQUIRE(std::get<ConvLayer<float>>(blk.prims[0]).W[0] ==
            static_cast<float>(std::get<ConvLayer<double>>(conv64.prims[0]).W[0]));
}
