#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rescl/combine.hpp"
#include "rescl/io_common.hpp"
#include "rescl/layers.hpp"

namespace rescl {

// Checkpoint container ("RCLN"): magic, format version u32, tensor count,
// then per tensor: name length + UTF-8 name, dtype tag (0=f32, 1=f64),
// rank, dims as u64, raw little-endian values. BN population statistics
// and combination parameters are ordinary named tensors.

constexpr std::uint32_t kCheckpointVersion = 1;

struct RawTensor {
    std::string name;
    std::uint8_t dtype = 0;  // 0 = f32, 1 = f64
    Shape dims;
    std::vector<double> values;  // held widened; narrowed on write if f32

    template <typename T>
    static RawTensor from(const std::string& name, const Tensor<T>& t) {
        RawTensor r;
        r.name = name;
        r.dtype = sizeof(T) == 4 ? 0 : 1;
        r.dims = t.shape;
        r.values.assign(t.data.begin(), t.data.end());
        return r;
    }

    template <typename T>
    Tensor<T> to() const {
        Tensor<T> t(dims);
        for (std::size_t i = 0; i < values.size(); ++i) t[i] = static_cast<T>(values[i]);
        return t;
    }
};

inline void write_checkpoint(const std::string& path, const std::vector<RawTensor>& tensors) {
    auto os = io::open_out(path);
    io::put_magic(os, "RCLN");
    io::put_u32(os, kCheckpointVersion);
    io::put_u64(os, tensors.size());
    for (const auto& t : tensors) {
        io::put_u32(os, static_cast<std::uint32_t>(t.name.size()));
        os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        os.put(static_cast<char>(t.dtype));
        io::put_u32(os, static_cast<std::uint32_t>(t.dims.size()));
        for (auto d : t.dims) io::put_u64(os, d);
        if (t.dtype == 0)
            for (double v : t.values) io::put_f32(os, static_cast<float>(v));
        else
            for (double v : t.values) io::put_f64(os, v);
    }
    if (!os) throw FileError("checkpoint: write failed: " + path);
}

inline std::vector<RawTensor> read_checkpoint(const std::string& path) {
    auto is = io::open_in(path);
    io::check_magic(is, "RCLN", "checkpoint");
    std::uint32_t version = io::get_u32(is, "checkpoint");
    if (version != kCheckpointVersion)
        throw FileError("checkpoint: unsupported version " + std::to_string(version));
    std::uint64_t count = io::get_u64(is, "checkpoint");
    std::vector<RawTensor> out;
    out.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        RawTensor t;
        std::uint32_t name_len = io::get_u32(is, "checkpoint");
        t.name.resize(name_len);
        if (!is.read(t.name.data(), name_len)) throw FileError("checkpoint: truncated");
        int d = is.get();
        if (d != 0 && d != 1) throw FileError("checkpoint: bad dtype tag");
        t.dtype = static_cast<std::uint8_t>(d);
        std::uint32_t rank = io::get_u32(is, "checkpoint");
        std::size_t n = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            t.dims.push_back(io::get_u64(is, "checkpoint"));
            n *= t.dims.back();
        }
        t.values.resize(n);
        for (std::size_t j = 0; j < n; ++j)
            t.values[j] = t.dtype == 0 ? static_cast<double>(io::get_f32(is, "checkpoint"))
                                       : io::get_f64(is, "checkpoint");
        out.push_back(std::move(t));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Network <-> checkpoint. Loading rebuilds the trunk from the structure
// string, creates heads from the stored head tensors, and treats every BN
// statistic in the file as finalized.

template <typename T>
void save_network(const std::string& path, NetworkState<T>& net) {
    std::vector<RawTensor> ts;
    for_each_named_tensor(net, [&](const std::string& name, Tensor<T>& t) {
        ts.push_back(RawTensor::from(name, t));
    });
    write_checkpoint(path, ts);
}

namespace detail {

template <typename T>
void fill_network_tensors(NetworkState<T>& net, const std::map<std::string, RawTensor>& by_name) {
    // create heads first so enumeration sees them
    for (const auto& [name, raw] : by_name) {
        if (name.rfind("head.", 0) != 0 || !name.ends_with(".weight")) continue;
        std::string task = name.substr(5, name.size() - 5 - 7);
        LinearLayer<T> head;
        head.W = raw.template to<T>();
        auto bias = by_name.find("head." + task + ".bias");
        if (bias == by_name.end()) throw FileError("checkpoint: missing bias for head " + task);
        head.b = bias->second.template to<T>();
        net.heads[task] = std::move(head);
    }
    std::size_t used = net.heads.size() * 2;
    for_each_trunk_tensor(net, /*include_stats=*/true, [&](const std::string& name, Tensor<T>& t) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw FileError("checkpoint: missing tensor " + name);
        if (it->second.dims != t.shape)
            throw FileError("checkpoint: shape mismatch for " + name);
        t = it->second.template to<T>();
        ++used;
    });
    if (used != by_name.size())
        throw FileError("checkpoint: file contains tensors not in the network structure");
    for_each_bn(net, [](const std::string&, BatchNormLayer<T>& bn) { bn.stats_finalized = true; });
}

}  // namespace detail

template <typename T>
NetworkState<T> load_network(const std::string& path, const std::string& spec) {
    SplitMix64 rng(0);
    NetworkState<T> net = make_network<T>(spec, rng);
    std::map<std::string, RawTensor> by_name;
    for (auto& t : read_checkpoint(path)) by_name.emplace(t.name, std::move(t));
    detail::fill_network_tensors(net, by_name);
    return net;
}

template <typename T>
void save_combined(const std::string& path, CombinedNetwork<T>& c) {
    std::vector<RawTensor> ts;
    for_each_combined_tensor(c, [&](const std::string& name, Tensor<T>& t) {
        ts.push_back(RawTensor::from(name, t));
    });
    write_checkpoint(path, ts);
}

template <typename T>
CombinedNetwork<T> load_combined(const std::string& path, const std::string& spec,
                                 const std::string& target_task) {
    std::map<std::string, RawTensor> src, tgt;
    std::map<std::size_t, std::pair<RawTensor, RawTensor>> combs;
    for (auto& t : read_checkpoint(path)) {
        if (t.name.rfind("src.", 0) == 0) {
            std::string n = t.name.substr(4);
            src.emplace(n, std::move(t)).first->second.name = n;
        } else if (t.name.rfind("tgt.", 0) == 0) {
            std::string n = t.name.substr(4);
            tgt.emplace(n, std::move(t)).first->second.name = n;
        } else if (t.name.rfind("comb.", 0) == 0) {
            auto dot = t.name.find('.', 5);
            std::size_t k = std::stoul(t.name.substr(5, dot - 5));
            if (t.name.substr(dot) == ".alpha_s")
                combs[k].first = std::move(t);
            else if (t.name.substr(dot) == ".alpha_t")
                combs[k].second = std::move(t);
            else
                throw FileError("checkpoint: unexpected tensor " + t.name);
        } else {
            throw FileError("checkpoint: unexpected tensor " + t.name);
        }
    }
    CombinedNetwork<T> c;
    SplitMix64 rng(0);
    c.source = make_network<T>(spec, rng);
    c.target = make_network<T>(spec, rng);
    c.target_task = target_task;
    detail::fill_network_tensors(c.source, src);
    detail::fill_network_tensors(c.target, tgt);
    for (std::size_t k = 0; k < combs.size(); ++k) {
        auto it = combs.find(k);
        if (it == combs.end()) throw FileError("checkpoint: missing combination pair");
        c.combs.push_back(CombinationParams<T>{it->second.first.template to<T>(),
                                               it->second.second.template to<T>()});
    }
    if (c.combs.size() != mergeable_block_count(c.source))
        throw FileError("checkpoint: combination pair count does not match structure");
    if (!c.target.has_task(target_task))
        throw FileError("checkpoint: target head missing from combined checkpoint");
    return c;
}

}  // namespace rescl
