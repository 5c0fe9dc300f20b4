// Command-line harness: dataset generation, training runs, baselines,
// hyperparameter sweeps, fairness measures, merge/eval/inspect utilities.
//
// Exit codes: 0 success, 1 usage error, 2 bad input file, 3 training
// divergence, 4 requirement unachievable.

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "rescl/checkpoint.hpp"
#include "rescl/combine.hpp"
#include "rescl/data.hpp"
#include "rescl/layers.hpp"
#include "rescl/losses.hpp"
#include "rescl/report.hpp"
#include "rescl/trainer.hpp"

namespace fs = std::filesystem;
using namespace rescl;

namespace {

using F = float;  // training element type; evaluation promotes to double

constexpr const char* kDefaultArch =
    "in:1x8x8|conv:3,3,1,1|unit:3,1|unit:6,2|unit:6,1|bn|relu|gap";

// ---------------------------------------------------------------------------
// Frozen default suite: task A (bars) is the source, task B (glyphs) the
// similar target, task C (blobs) the dissimilar one.

TaskSpec task_spec_for(const std::string& name) {
    TaskSpec spec;
    spec.classes = 4;
    spec.resolution = 8;
    spec.n_train = 2000;
    spec.n_val = 400;
    spec.n_test = 400;
    spec.noise = 0.15;
    if (name == "A") {
        spec.family = PatternFamily::Bars;
        spec.seed = 101;
    } else if (name == "B") {
        spec.family = PatternFamily::Glyphs;
        spec.seed = 202;
    } else if (name == "C") {
        spec.family = PatternFamily::Blobs;
        spec.seed = 303;
        spec.noise = 0.25;
    } else {
        throw CLI::ValidationError("unknown task: " + name);
    }
    return spec;
}

std::vector<std::string> scenario_chain(const std::string& scenario) {
    if (scenario == "A-to-B") return {"A", "B"};
    if (scenario == "A-to-C") return {"A", "C"};
    if (scenario == "A-to-B-to-C") return {"A", "B", "C"};
    throw CLI::ValidationError("unknown scenario: " + scenario +
                               " (expected A-to-B, A-to-C or A-to-B-to-C)");
}

// ---------------------------------------------------------------------------
// Small filesystem and manifest helpers.

void write_manifest(const fs::path& path, const std::map<std::string, std::string>& kv) {
    std::ofstream os(path);
    if (!os) throw FileError("cannot write manifest: " + path.string());
    for (const auto& [k, v] : kv) os << k << "=" << v << "\n";
}

std::map<std::string, std::string> read_manifest(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw FileError("cannot read manifest: " + path.string());
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw FileError("malformed manifest line: " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

std::string hex64(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

struct TaskFiles {
    Dataset train, val, test;
};

TaskFiles load_task(const fs::path& data_dir, const std::string& task) {
    TaskFiles t;
    t.train = load_dataset((data_dir / (task + ".train.rcld")).string());
    t.val = load_dataset((data_dir / (task + ".val.rcld")).string());
    t.test = load_dataset((data_dir / (task + ".test.rcld")).string());
    return t;
}

std::uint64_t data_dir_hash(const fs::path& data_dir, const std::vector<std::string>& tasks) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tasks)
        for (const char* split : {".train.rcld", ".val.rcld", ".test.rcld"}) {
            std::uint64_t fh = io::file_hash((data_dir / (t + split)).string());
            h = fnv1a(&fh, sizeof(fh), h);
        }
    return h;
}

// atomically merge rows into a report file, skipping rows already present
void append_report_rows(const fs::path& path, const std::vector<ReportRow>& rows,
                        const std::map<std::string, std::string>& provenance) {
    SweepReport rep;
    if (fs::exists(path)) rep = load_report(path.string());
    for (const auto& [k, v] : provenance) rep.provenance[k] = v;
    auto key = [](const ReportRow& r) {
        return r.method + "|" + r.hyper + "|" + std::to_string(r.seed) + "|" + r.split + "|" +
               r.task;
    };
    std::set<std::string> seen;
    for (const auto& r : rep.rows) seen.insert(key(r));
    for (const auto& r : rows)
        if (!seen.count(key(r))) rep.rows.push_back(r);
    fs::path tmp = path.string() + ".tmp";
    save_report(tmp.string(), rep);
    fs::rename(tmp, path);
}

void append_kv_rows(const fs::path& path, const std::string& header,
                    const std::vector<std::string>& rows) {
    std::vector<std::string> all;
    if (fs::exists(path)) {
        std::ifstream is(path);
        std::string line;
        std::getline(is, line);  // header
        while (std::getline(is, line))
            if (!line.empty()) all.push_back(line);
    }
    for (const auto& r : rows)
        if (std::find(all.begin(), all.end(), r) == all.end()) all.push_back(r);
    fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp);
        os << header << "\n";
        for (const auto& r : all) os << r << "\n";
    }
    fs::rename(tmp, path);
}

// evaluation always runs in double so merged/combined comparisons are
// insensitive to float accumulation differences
std::pair<std::size_t, std::size_t> eval_plain(NetworkState<F>& net, const Dataset& data,
                                               const std::string& task) {
    auto dnet = convert_network<F, double>(net);
    return evaluate(dnet, data, task);
}

ReportRow make_row(const std::string& method, const std::string& hyper, std::uint64_t seed,
                   const std::string& split, const std::string& task, std::size_t correct,
                   std::size_t total) {
    ReportRow r;
    r.method = method;
    r.hyper = hyper;
    r.seed = seed;
    r.split = split;
    r.task = task;
    r.correct = static_cast<long long>(correct);
    r.total = static_cast<long long>(total);
    return r;
}

// rows for every task the net can serve, on val and test splits
std::vector<ReportRow> eval_rows(NetworkState<F>& net, const fs::path& data_dir,
                                 const std::vector<std::string>& tasks,
                                 const std::string& method, const std::string& hyper,
                                 std::uint64_t seed) {
    std::vector<ReportRow> rows;
    for (const auto& task : tasks) {
        auto files = load_task(data_dir, task);
        auto [cv, tv] = eval_plain(net, files.val, task);
        rows.push_back(make_row(method, hyper, seed, "val", task, cv, tv));
        auto [ct, tt] = eval_plain(net, files.test, task);
        rows.push_back(make_row(method, hyper, seed, "test", task, ct, tt));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Shared per-seed artifacts for runs and sweeps.

struct StageConfig {
    std::size_t iters = 2000;
    std::size_t batch = 64;
    double lr = 0.1;
    // the combined stage runs cooler: the alpha decay term at the top of
    // the 2^10 grid oscillates under momentum, and lr*lambda beyond ~3e-3
    // tips the combined network into divergence
    double combined_lr = 0.03;
    std::uint64_t seed = 0;
};

ResclConfig<F> make_pipeline_config(const std::string& target, std::size_t classes,
                                    const StageConfig& sc) {
    auto cfg = default_rescl_config<F>(target, classes, sc.seed, sc.iters);
    cfg.warmup.batch = cfg.finetune.batch = cfg.combined.batch = sc.batch;
    cfg.warmup.lr = cfg.finetune.lr = static_cast<F>(sc.lr);
    cfg.combined.lr = static_cast<F>(sc.combined_lr);
    return cfg;
}

NetworkState<F> ensure_source(const fs::path& dir, const fs::path& data_dir,
                              const std::string& source_task, const std::string& arch,
                              const StageConfig& sc) {
    fs::create_directories(dir);
    fs::path ckpt = dir / "source.rcln";
    if (fs::exists(ckpt)) {
        auto manifest = read_manifest(dir / "manifest.txt");
        return load_network<F>(ckpt.string(), manifest.at("arch"));
    }
    auto task = load_task(data_dir, source_task);
    TrainConfig<F> cfg;
    cfg.iterations = sc.iters;
    cfg.batch = sc.batch;
    cfg.lr = static_cast<F>(sc.lr);
    cfg.seed = sc.seed;
    MetricsSink metrics;
    auto net = train_source<F>(arch, source_task, task.train.classes, task.train, cfg, &metrics);
    save_network(ckpt.string(), net);
    metrics.save((dir / "metrics.csv").string());
    write_manifest(dir / "manifest.txt",
                   {{"kind", "source"},
                    {"arch", to_spec_string(net)},
                    {"task", source_task},
                    {"seed", std::to_string(sc.seed)},
                    {"iters", std::to_string(sc.iters)},
                    {"data_hash", hex64(data_dir_hash(data_dir, {source_task}))}});
    return net;
}

// ---------------------------------------------------------------------------
// gen-data

int cmd_gen_data(const fs::path& out_dir, const std::string& scenario) {
    fs::create_directories(out_dir);
    std::vector<std::string> tasks =
        scenario == "all" ? std::vector<std::string>{"A", "B", "C"} : scenario_chain(scenario);
    std::map<std::string, std::string> manifest;
    for (const auto& name : tasks) {
        TaskSpec spec = task_spec_for(name);
        TaskData data = gen_task(spec);
        for (auto [d, split] : {std::pair<Dataset*, const char*>{&data.train, "train"},
                                {&data.val, "val"},
                                {&data.test, "test"}}) {
            fs::path p = out_dir / (name + "." + split + ".rcld");
            store_dataset(p.string(), *d);
            manifest[name + "." + split + ".hash"] = hex64(io::file_hash(p.string()));
        }
        manifest[name + ".family"] = family_name(spec.family);
        manifest[name + ".seed"] = std::to_string(spec.seed);
        manifest[name + ".classes"] = std::to_string(spec.classes);
        manifest[name + ".resolution"] = std::to_string(spec.resolution);
        manifest[name + ".noise"] = fmt_g9(spec.noise);
        manifest[name + ".n"] = std::to_string(spec.n_train) + "/" + std::to_string(spec.n_val) +
                                "/" + std::to_string(spec.n_test);
    }
    write_manifest(out_dir / "manifest.txt", manifest);
    std::cout << "wrote " << tasks.size() << " task(s) to " << out_dir.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// run (the full pipeline, chaining scenarios supported)

int cmd_run(const fs::path& data_dir, const std::string& scenario, const fs::path& source_dir,
            const fs::path& out_dir, double lambda_mult, const StageConfig& sc,
            const std::string& parameterization) {
    auto chain = scenario_chain(scenario);
    fs::create_directories(out_dir);
    auto manifest = read_manifest(source_dir / "manifest.txt");
    NetworkState<F> source = load_network<F>((source_dir / "source.rcln").string(),
                                             manifest.at("arch"));
    std::string hyper = format_hyper(lambda_mult);
    std::vector<ReportRow> rows;
    for (std::size_t round = 1; round < chain.size(); ++round) {
        const std::string& target = chain[round];
        auto files = load_task(data_dir, target);
        auto cfg = make_pipeline_config(target, files.train.classes, sc);
        cfg.combined.loss.lambda = static_cast<F>(lambda_mult * 1e-4);
        cfg.combined.loss.parameterization = parameterization == "naive"
                                                 ? Parameterization::Naive
                                                 : Parameterization::Residual;
        MetricsSink metrics;
        auto result = run_rescl(source, files.train, cfg, &metrics);
        std::string tag = chain.size() > 2 ? "." + std::to_string(round) : "";
        save_combined((out_dir / ("combined" + tag + ".rcln")).string(), result.combined);
        save_network((out_dir / ("merged" + tag + ".rcln")).string(), result.merged);
        metrics.save((out_dir / ("metrics" + tag + ".csv")).string());
        {
            std::ofstream os(out_dir / ("alphas" + tag + ".csv"));
            os << "depth,mean_abs_alpha_s,mean_abs_alpha_t,mean_abs_alpha\n";
            for (const auto& r : alpha_stats(result.combined))
                os << r.depth << "," << fmt_g9(r.mean_abs_alpha_s) << ","
                   << fmt_g9(r.mean_abs_alpha_t) << "," << fmt_g9(r.mean_abs_alpha) << "\n";
        }
        source = result.merged;
    }
    rows = eval_rows(source, data_dir, chain, "rescl", hyper, sc.seed);
    append_report_rows(out_dir / "report.csv", rows,
                       {{"data_hash", hex64(data_dir_hash(data_dir, chain))}});
    write_manifest(out_dir / "manifest.txt",
                   {{"kind", "rescl-run"},
                    {"scenario", scenario},
                    {"arch", to_spec_string(source)},
                    {"source_arch", manifest.at("arch")},
                    {"target_task", chain.back()},
                    {"tasks", [&] {
                         std::string s;
                         for (const auto& t : chain) s += (s.empty() ? "" : ",") + t;
                         return s;
                     }()},
                    {"lambda_mult", hyper},
                    {"seed", std::to_string(sc.seed)},
                    {"iters", std::to_string(sc.iters)}});
    for (const auto& r : rows)
        std::cout << r.task << " " << r.split << " accuracy " << r.accuracy().percent() << "% ("
                  << r.correct << "/" << r.total << ")\n";
    return 0;
}

// ---------------------------------------------------------------------------
// baselines

int cmd_baseline(const std::string& method, const fs::path& data_dir,
                 const std::string& scenario, const fs::path& source_dir,
                 const fs::path& out_dir, double hyper_value, const StageConfig& sc) {
    auto chain = scenario_chain(scenario);
    if (chain.size() != 2)
        throw CLI::ValidationError("baseline supports two-task scenarios only");
    const std::string source_task = chain[0], target_task = chain[1];
    fs::create_directories(out_dir);
    auto manifest = read_manifest(source_dir / "manifest.txt");
    NetworkState<F> net_s = load_network<F>((source_dir / "source.rcln").string(),
                                            manifest.at("arch"));
    auto files = load_task(data_dir, target_task);
    auto cfg = make_pipeline_config(target_task, files.train.classes, sc);
    std::string hyper = "-";
    NetworkState<F> model = net_s;

    if (method == "finetune" || method == "lastlayer") {
        SplitMix64 rng(cfg.warmup.seed ^ 0x5EEDFACEULL);
        add_head(model, target_task, files.train.classes, rng);
        warmup_head(model, target_task, files.train, cfg.warmup);
        if (method == "finetune") model = finetune(model, target_task, files.train, cfg.finetune);
    } else if (method == "lwf") {
        hyper = format_hyper(hyper_value);
        model = baseline_lwf(net_s, files.train, cfg, static_cast<F>(hyper_value));
    } else if (method == "imm") {
        hyper = format_hyper(hyper_value);
        NetworkState<F> warmed = net_s;
        SplitMix64 rng(cfg.warmup.seed ^ 0x5EEDFACEULL);
        add_head(warmed, target_task, files.train.classes, rng);
        warmup_head(warmed, target_task, files.train, cfg.warmup);
        auto lwf = baseline_lwf(net_s, files.train, cfg, F(1));
        double mix = 1.0 / (1.0 + hyper_value);  // hyper is the ratio alpha_1/alpha_2
        model = baseline_mean_imm(warmed, lwf, static_cast<F>(mix));
    } else if (method == "joint") {
        auto src_files = load_task(data_dir, source_task);
        SplitMix64 rng(cfg.warmup.seed ^ 0x5EEDFACEULL);
        add_head(model, target_task, files.train.classes, rng);
        warmup_head(model, target_task, files.train, cfg.warmup);
        model = baseline_joint(model, source_task, src_files.train, target_task, files.train,
                               cfg.finetune);
    } else {
        throw CLI::ValidationError("unknown baseline: " + method);
    }

    save_network((out_dir / "model.rcln").string(), model);
    auto rows = eval_rows(model, data_dir, chain, method, hyper, sc.seed);
    append_report_rows(out_dir / "report.csv", rows,
                       {{"data_hash", hex64(data_dir_hash(data_dir, chain))}});
    write_manifest(out_dir / "manifest.txt",
                   {{"kind", "baseline-" + method},
                    {"scenario", scenario},
                    {"arch", to_spec_string(model)},
                    {"target_task", target_task},
                    {"hyper", hyper},
                    {"seed", std::to_string(sc.seed)},
                    {"iters", std::to_string(sc.iters)}});
    for (const auto& r : rows)
        std::cout << r.task << " " << r.split << " accuracy " << r.accuracy().percent() << "% ("
                  << r.correct << "/" << r.total << ")\n";
    return 0;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepJob {
    int grid_exp = 0;       // hyper = 2^grid_exp (times the method's base)
    std::uint64_t seed = 0;
    std::string hyper;      // formatted multiplier, "-" for hyperless methods
};

int cmd_sweep(const std::string& method, const fs::path& data_dir, const std::string& scenario,
              const fs::path& out_dir, int grid_min, int grid_max, std::size_t n_seeds,
              std::size_t jobs, const StageConfig& base_sc) {
    auto chain = scenario_chain(scenario);
    if (chain.size() != 2) throw CLI::ValidationError("sweep supports two-task scenarios only");
    const std::string source_task = chain[0], target_task = chain[1];
    fs::create_directories(out_dir / "runs");
    auto files = load_task(data_dir, target_task);

    const bool has_hyper = method == "rescl" || method == "lwf" || method == "imm";
    std::vector<SweepJob> grid;
    for (std::uint64_t s = 0; s < n_seeds; ++s) {
        if (!has_hyper) {
            grid.push_back({0, s, "-"});
            continue;
        }
        for (int k = grid_min; k <= grid_max; ++k)
            grid.push_back({k, s, format_hyper(std::pow(2.0, k))});
    }

    // existing rows short-circuit their grid points (append-only reports)
    std::set<std::string> done;
    if (fs::exists(out_dir / "report.csv"))
        for (const auto& r : load_report((out_dir / "report.csv").string()).rows)
            if (r.method == method) done.insert(r.hyper + "|" + std::to_string(r.seed));

    // per-seed shared artifacts, computed serially
    std::map<std::uint64_t, NetworkState<F>> sources;
    std::map<std::uint64_t, ResclPrep<F>> preps;       // rescl
    std::map<std::uint64_t, NetworkState<F>> warmeds;  // imm
    std::map<std::uint64_t, NetworkState<F>> lwf_refs; // imm
    for (std::uint64_t s = 0; s < n_seeds; ++s) {
        bool any = false;
        for (const auto& j : grid)
            any = any || (j.seed == s && !done.count(j.hyper + "|" + std::to_string(j.seed)));
        if (!any) continue;
        StageConfig sc = base_sc;
        sc.seed = base_sc.seed + s;
        sources.emplace(s, ensure_source(out_dir / "shared" / ("seed" + std::to_string(s)),
                                         data_dir, source_task, kDefaultArch, sc));
        auto cfg = make_pipeline_config(target_task, files.train.classes, sc);
        if (method == "rescl") {
            preps.emplace(s, rescl_prepare(sources.at(s), files.train, cfg));
        } else if (method == "imm") {
            NetworkState<F> warmed = sources.at(s);
            SplitMix64 rng(cfg.warmup.seed ^ 0x5EEDFACEULL);
            add_head(warmed, target_task, files.train.classes, rng);
            warmup_head(warmed, target_task, files.train, cfg.warmup);
            warmeds.emplace(s, std::move(warmed));
            lwf_refs.emplace(s, baseline_lwf(sources.at(s), files.train, cfg, F(1)));
        }
    }

    // independent grid points may run concurrently; each run stays
    // single-threaded with private state
    std::vector<std::vector<ReportRow>> results(grid.size());
    std::vector<std::string> alpha_rows(grid.size());
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::string fail_msg;
    std::mutex fail_mu;
    auto worker = [&]() {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= grid.size() || failed.load()) return;
            const SweepJob& job = grid[i];
            if (done.count(job.hyper + "|" + std::to_string(job.seed))) continue;
            try {
                StageConfig sc = base_sc;
                sc.seed = base_sc.seed + job.seed;
                auto cfg = make_pipeline_config(target_task, files.train.classes, sc);
                double mult = std::pow(2.0, job.grid_exp);
                NetworkState<F> model;
                std::optional<CombinedNetwork<F>> combined;
                if (method == "rescl") {
                    cfg.combined.loss.lambda = static_cast<F>(mult * 1e-4);
                    auto res = rescl_combine_stage(sources.at(job.seed), preps.at(job.seed),
                                                   files.train, cfg.combined);
                    model = std::move(res.merged);
                    combined = std::move(res.combined);
                } else if (method == "lwf") {
                    model = baseline_lwf(sources.at(job.seed), files.train, cfg,
                                         static_cast<F>(mult));
                } else if (method == "imm") {
                    double mix = 1.0 / (1.0 + mult);
                    model = baseline_mean_imm(warmeds.at(job.seed), lwf_refs.at(job.seed),
                                              static_cast<F>(mix));
                } else if (method == "finetune" || method == "lastlayer") {
                    model = sources.at(job.seed);
                    SplitMix64 rng(cfg.warmup.seed ^ 0x5EEDFACEULL);
                    add_head(model, target_task, files.train.classes, rng);
                    warmup_head(model, target_task, files.train, cfg.warmup);
                    if (method == "finetune")
                        model = finetune(model, target_task, files.train, cfg.finetune);
                } else if (method == "joint") {
                    auto src_files = load_task(data_dir, source_task);
                    model = sources.at(job.seed);
                    SplitMix64 rng(cfg.warmup.seed ^ 0x5EEDFACEULL);
                    add_head(model, target_task, files.train.classes, rng);
                    warmup_head(model, target_task, files.train, cfg.warmup);
                    model = baseline_joint(model, source_task, src_files.train, target_task,
                                           files.train, cfg.finetune);
                } else {
                    throw CLI::ValidationError("unknown sweep method: " + method);
                }
                fs::path run_dir =
                    out_dir / "runs" /
                    (method + "-m" + job.hyper + "-s" + std::to_string(job.seed));
                fs::create_directories(run_dir);
                save_network((run_dir / "model.rcln").string(), model);
                if (combined) {
                    std::ofstream os(run_dir / "alphas.csv");
                    os << "depth,mean_abs_alpha_s,mean_abs_alpha_t,mean_abs_alpha\n";
                    for (const auto& r : alpha_stats(*combined))
                        os << r.depth << "," << fmt_g9(r.mean_abs_alpha_s) << ","
                           << fmt_g9(r.mean_abs_alpha_t) << "," << fmt_g9(r.mean_abs_alpha)
                           << "\n";
                    alpha_rows[i] = method + "," + job.hyper + "," + std::to_string(job.seed) +
                                    "," + fmt_g9(overall_mean_abs_alpha(*combined));
                }
                results[i] = eval_rows(model, data_dir, chain, method, job.hyper, job.seed);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lk(fail_mu);
                failed = true;
                fail_msg = e.what();
                return;
            }
        }
    };
    std::size_t n_workers = std::max<std::size_t>(1, std::min(jobs, grid.size()));
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (failed) throw std::runtime_error("sweep worker failed: " + fail_msg);

    // merge rows in grid order so reruns are byte-identical
    std::vector<ReportRow> merged;
    std::vector<std::string> alpha_merged;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        merged.insert(merged.end(), results[i].begin(), results[i].end());
        if (!alpha_rows[i].empty()) alpha_merged.push_back(alpha_rows[i]);
    }
    std::string cfg_desc = method + "|" + scenario + "|grid=" + std::to_string(grid_min) + ".." +
                           std::to_string(grid_max) + "|seeds=" + std::to_string(n_seeds) +
                           "|iters=" + std::to_string(base_sc.iters) + "|arch=" + kDefaultArch;
    append_report_rows(out_dir / "report.csv", merged,
                       {{"config_hash_" + method, hex64(fnv1a(cfg_desc.data(), cfg_desc.size()))},
                        {"data_hash", hex64(data_dir_hash(data_dir, chain))}});
    if (!alpha_merged.empty())
        append_kv_rows(out_dir / "alpha_summary.csv", "method,hyper,seed,mean_abs_alpha",
                       alpha_merged);
    std::cout << "sweep " << method << " on " << scenario << ": " << merged.size()
              << " new rows -> " << (out_dir / "report.csv").string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// report (fairness measures)

int cmd_report(const fs::path& report_path, const std::string& measure,
               const std::string& method, const std::string& scenario, double fraction,
               const std::string& finetune_target) {
    auto chain = scenario_chain(scenario);
    const std::string target_task = chain.back();
    std::vector<std::string> source_tasks(chain.begin(), chain.end() - 1);
    auto rep = load_report(report_path.string());
    if (measure == "max-avg") {
        auto best = max_achievable_avg(rep, method, chain);
        std::cout << "method=" << method << " best_hyper=" << best.hyper
                  << " max_achievable_avg=" << best.average.percent() << "% ("
                  << best.average.str() << ")\n";
        return 0;
    }
    if (measure == "source-at-target") {
        Rational ft;
        if (!finetune_target.empty()) {
            ft = parse_rational(finetune_target);
        } else {
            // seed-mean fine-tuning validation target accuracy from the report
            auto groups = detail::group_rows(rep.rows, "finetune", "val", {target_task});
            if (groups.empty())
                throw Unachievable("report has no finetune rows; pass --finetune-target");
            ft = detail::seed_mean_task_mean(groups.front(), {target_task});
        }
        long long denom = 1000000;
        auto frac = Rational(static_cast<long long>(fraction * static_cast<double>(denom)), denom);
        auto got = source_at_required_target(rep, method, source_tasks, target_task, ft, frac);
        if (!got)
            throw Unachievable("no hyperparameter reaches the required target accuracy " +
                               (frac * ft).str());
        std::cout << "method=" << method << " hyper=" << got->hyper
                  << " source_accuracy=" << got->source_accuracy.percent() << "% ("
                  << got->source_accuracy.str() << ")"
                  << " target_val=" << got->target_val_accuracy.percent() << "%"
                  << " required=" << got->required.percent() << "%\n";
        return 0;
    }
    throw CLI::ValidationError("unknown measure: " + measure);
}

// ---------------------------------------------------------------------------
// merge / eval / inspect

bool checkpoint_is_combined(const std::string& path) {
    auto tensors = read_checkpoint(path);
    for (const auto& t : tensors)
        if (t.name.rfind("comb.", 0) == 0) return true;
    return false;
}

int cmd_merge(const fs::path& run_dir, const std::string& ckpt, const std::string& out_name) {
    auto manifest = read_manifest(run_dir / "manifest.txt");
    auto c = load_combined<F>((run_dir / ckpt).string(), manifest.at("source_arch"),
                              manifest.at("target_task"));
    auto merged = merge(c);
    save_network((run_dir / out_name).string(), merged);
    std::cout << "merged " << ckpt << " -> " << out_name << " (trunk parameters "
              << trunk_param_count(merged) << ")\n";
    return 0;
}

int cmd_eval(const fs::path& run_dir, const std::string& ckpt, const fs::path& data_file,
             const std::string& task, const std::string& split) {
    auto manifest = read_manifest(run_dir / "manifest.txt");
    Dataset data = load_dataset(data_file.string());
    std::size_t correct = 0, total = 0;
    if (checkpoint_is_combined((run_dir / ckpt).string())) {
        auto c = load_combined<F>((run_dir / ckpt).string(), manifest.at("source_arch"),
                                  manifest.at("target_task"));
        CombinedNetwork<double> dc;
        dc.source = convert_network<F, double>(c.source);
        dc.target = convert_network<F, double>(c.target);
        dc.target_task = c.target_task;
        dc.parameterization = c.parameterization;
        for (auto& p : c.combs)
            dc.combs.push_back(CombinationParams<double>{p.alpha_s.cast<double>(),
                                                         p.alpha_t.cast<double>()});
        std::tie(correct, total) = evaluate_combined(dc, data, task);
    } else {
        auto net = load_network<F>((run_dir / ckpt).string(), manifest.at("arch"));
        std::tie(correct, total) = eval_plain(net, data, task);
    }
    Rational acc(static_cast<long long>(correct), static_cast<long long>(total));
    std::cout << task << " " << split << " accuracy " << acc.percent() << "% (" << acc.str()
              << ")\n";
    return 0;
}

int cmd_inspect(const fs::path& run_dir, const std::string& ckpt, bool alphas, bool bn_stats) {
    auto manifest = read_manifest(run_dir / "manifest.txt");
    if (alphas) {
        auto c = load_combined<F>((run_dir / ckpt).string(), manifest.at("source_arch"),
                                  manifest.at("target_task"));
        std::cout << "depth,mean_abs_alpha_s,mean_abs_alpha_t,mean_abs_alpha\n";
        for (const auto& r : alpha_stats(c))
            std::cout << r.depth << "," << fmt_g9(r.mean_abs_alpha_s) << ","
                      << fmt_g9(r.mean_abs_alpha_t) << "," << fmt_g9(r.mean_abs_alpha) << "\n";
        return 0;
    }
    if (bn_stats) {
        auto net = load_network<F>((run_dir / ckpt).string(), manifest.at("arch"));
        std::cout << "layer,channel,mu,sigma\n";
        for (const auto& row : bn_stats_dump(net))
            for (std::size_t c = 0; c < row.mu.size(); ++c)
                std::cout << row.layer << "," << c << "," << fmt_g9(row.mu[c]) << ","
                          << fmt_g9(row.sigma[c]) << "\n";
        return 0;
    }
    throw CLI::ValidationError("inspect: pass --alphas or --bn-stats");
}

int cmd_train_source(const fs::path& data_dir, const std::string& scenario,
                     const fs::path& out_dir, const std::string& arch, const StageConfig& sc) {
    auto chain = scenario_chain(scenario);
    fs::create_directories(out_dir);
    if (fs::exists(out_dir / "source.rcln")) fs::remove(out_dir / "source.rcln");
    auto net = ensure_source(out_dir, data_dir, chain.front(), arch, sc);
    auto files = load_task(data_dir, chain.front());
    auto [cv, tv] = eval_plain(net, files.val, chain.front());
    auto [ct, tt] = eval_plain(net, files.test, chain.front());
    Rational val_acc(static_cast<long long>(cv), static_cast<long long>(tv));
    Rational test_acc(static_cast<long long>(ct), static_cast<long long>(tt));
    std::cout << chain.front() << " val accuracy " << val_acc.percent() << "%, test accuracy "
              << test_acc.percent() << "%\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Residual continual learning toolkit"};
    app.require_subcommand(1);

    StageConfig sc;
    std::size_t jobs = 1;

    auto add_stage_opts = [&](CLI::App* cmd) {
        cmd->add_option("--iters", sc.iters, "training iterations per stage");
        cmd->add_option("--batch", sc.batch, "minibatch size");
        cmd->add_option("--lr", sc.lr, "initial learning rate");
        cmd->add_option("--combined-lr", sc.combined_lr,
                        "initial learning rate of the combined stage");
        cmd->add_option("--seed", sc.seed, "run seed");
        cmd->set_config("--config", "", "flat key=value config file");
    };

    // gen-data
    fs::path gd_out;
    std::string gd_scenario = "all";
    auto* gen = app.add_subcommand("gen-data", "generate the synthetic task suite");
    gen->add_option("--out", gd_out, "output directory")->required();
    gen->add_option("--scenario", gd_scenario, "scenario or 'all'");
    gen->set_config("--config", "", "flat key=value config file");

    // train-source
    fs::path ts_data, ts_out;
    std::string ts_scenario = "A-to-C";
    std::string ts_arch = kDefaultArch;
    auto* tsrc = app.add_subcommand("train-source", "train the source network");
    tsrc->add_option("--data", ts_data, "dataset directory")->required();
    tsrc->add_option("--scenario", ts_scenario, "scenario (source task comes from it)");
    tsrc->add_option("--out", ts_out, "run directory")->required();
    tsrc->add_option("--arch", ts_arch, "network structure string");
    add_stage_opts(tsrc);

    // run
    fs::path r_data, r_source, r_out;
    std::string r_scenario = "A-to-C";
    double r_lambda_mult = 1.0;
    std::string r_param = "residual";
    auto* run = app.add_subcommand("run", "run the full residual continual learning pipeline");
    run->add_option("--data", r_data, "dataset directory")->required();
    run->add_option("--scenario", r_scenario, "scenario");
    run->add_option("--source", r_source, "source run directory")->required();
    run->add_option("--out", r_out, "run directory")->required();
    run->add_option("--lambda-mult", r_lambda_mult,
                    "alpha-decay multiplier (lambda = mult * 1e-4)");
    run->add_option("--parameterization", r_param, "residual | naive (ablation)");
    add_stage_opts(run);

    // baseline
    fs::path b_data, b_source, b_out;
    std::string b_scenario = "A-to-C", b_method;
    double b_hyper = 1.0;
    auto* base = app.add_subcommand("baseline", "run a comparison baseline");
    base->add_option("--method", b_method, "finetune|lastlayer|lwf|imm|joint")->required();
    base->add_option("--data", b_data, "dataset directory")->required();
    base->add_option("--scenario", b_scenario, "scenario");
    base->add_option("--source", b_source, "source run directory")->required();
    base->add_option("--out", b_out, "run directory")->required();
    base->add_option("--hyper", b_hyper, "trade-off hyperparameter (lwf, imm)");
    add_stage_opts(base);

    // sweep
    fs::path s_data, s_out;
    std::string s_scenario = "A-to-C", s_method = "rescl";
    int s_gmin = -10, s_gmax = 10;
    std::size_t s_seeds = 3;
    auto* sweep = app.add_subcommand("sweep", "sweep the trade-off hyperparameter grid");
    sweep->add_option("--method", s_method, "rescl|lwf|imm|finetune|lastlayer|joint");
    sweep->add_option("--data", s_data, "dataset directory")->required();
    sweep->add_option("--scenario", s_scenario, "scenario");
    sweep->add_option("--out", s_out, "sweep directory")->required();
    sweep->add_option("--grid-min", s_gmin, "smallest exponent of the 2^k grid");
    sweep->add_option("--grid-max", s_gmax, "largest exponent of the 2^k grid");
    sweep->add_option("--seeds", s_seeds, "number of seeds");
    sweep->add_option("--jobs", jobs, "concurrent grid points");
    add_stage_opts(sweep);

    // report
    fs::path rp_path;
    std::string rp_measure = "max-avg", rp_method = "rescl", rp_scenario = "A-to-C";
    std::string rp_ft;
    double rp_fraction = 0.95;
    auto* rep = app.add_subcommand("report", "compute fairness measures from a report");
    rep->add_option("--report", rp_path, "report.csv path")->required();
    rep->add_option("--measure", rp_measure, "max-avg | source-at-target");
    rep->add_option("--method", rp_method, "method to score");
    rep->add_option("--scenario", rp_scenario, "scenario");
    rep->add_option("--fraction", rp_fraction, "required fraction of fine-tune target accuracy");
    rep->add_option("--finetune-target", rp_ft,
                    "fine-tune target accuracy as correct/total (default: from report)");
    rep->set_config("--config", "", "flat key=value config file");

    // merge
    fs::path m_run;
    std::string m_ckpt = "combined.rcln", m_out = "merged-cli.rcln";
    auto* mrg = app.add_subcommand("merge", "merge a combined checkpoint into a single network");
    mrg->add_option("--run", m_run, "run directory")->required();
    mrg->add_option("--ckpt", m_ckpt, "combined checkpoint name");
    mrg->add_option("--out", m_out, "output checkpoint name");

    // eval
    fs::path e_run, e_data;
    std::string e_ckpt = "merged.rcln", e_task, e_split = "test";
    auto* evl = app.add_subcommand("eval", "evaluate a checkpoint on a dataset file");
    evl->add_option("--run", e_run, "run directory")->required();
    evl->add_option("--ckpt", e_ckpt, "checkpoint name");
    evl->add_option("--data-file", e_data, "dataset file (.rcld)")->required();
    evl->add_option("--task", e_task, "task head to evaluate")->required();
    evl->add_option("--split", e_split, "split label for display");

    // inspect
    fs::path i_run;
    std::string i_ckpt;
    bool i_alphas = false, i_bn = false;
    auto* ins = app.add_subcommand("inspect", "dump combination parameters or BN statistics");
    ins->add_option("--run", i_run, "run directory")->required();
    ins->add_option("--ckpt", i_ckpt, "checkpoint name");
    ins->add_flag("--alphas", i_alphas, "per-depth mean |alpha| table");
    ins->add_flag("--bn-stats", i_bn, "per-layer BN population statistics");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return cmd_gen_data(gd_out, gd_scenario);
        if (tsrc->parsed()) return cmd_train_source(ts_data, ts_scenario, ts_out, ts_arch, sc);
        if (run->parsed())
            return cmd_run(r_data, r_scenario, r_source, r_out, r_lambda_mult, sc, r_param);
        if (base->parsed())
            return cmd_baseline(b_method, b_data, b_scenario, b_source, b_out, b_hyper, sc);
        if (sweep->parsed())
            return cmd_sweep(s_method, s_data, s_scenario, s_out, s_gmin, s_gmax, s_seeds, jobs,
                             sc);
        if (rep->parsed())
            return cmd_report(rp_path, rp_measure, rp_method, rp_scenario, rp_fraction, rp_ft);
        if (mrg->parsed()) return cmd_merge(m_run, m_ckpt, m_out);
        if (evl->parsed()) return cmd_eval(e_run, e_ckpt, e_data, e_task, e_split);
        if (ins->parsed())
            return cmd_inspect(i_run, i_ckpt.empty() ? (i_alphas ? "combined.rcln" : "model.rcln")
                                                     : i_ckpt,
                               i_alphas, i_bn);
        return 1;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    } catch (const Unachievable& e) {
        std::cerr << "unachievable: " << e.what() << "\n";
        return 4;
    } catch (const TrainingDiverged& e) {
        std::cerr << "diverged: " << e.what() << "\n";
        return 3;
    } catch (const FileError& e) {
        std::cerr << "bad input: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
