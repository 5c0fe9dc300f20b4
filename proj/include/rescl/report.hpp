#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rescl/io_common.hpp"

namespace rescl {

/// Requested operating point cannot be met (CLI exit code 4).
struct Unachievable : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Exact fraction for accuracies: selection logic never sees rounded
/// values; two decimals are a display concern only.
struct Rational {
    long long num = 0;
    long long den = 1;

    Rational() = default;
    Rational(long long n, long long d) : num(n), den(d) {
        if (den == 0) throw std::invalid_argument("rational: zero denominator");
        if (den < 0) {
            num = -num;
            den = -den;
        }
        long long g = std::gcd(num < 0 ? -num : num, den);
        if (g > 1) {
            num /= g;
            den /= g;
        }
    }

    Rational operator+(const Rational& o) const { return {num * o.den + o.num * den, den * o.den}; }
    Rational operator*(const Rational& o) const { return {num * o.num, den * o.den}; }
    Rational operator/(long long k) const { return {num, den * k}; }
    bool operator==(const Rational& o) const { return num == o.num && den == o.den; }
    bool operator<(const Rational& o) const { return num * o.den < o.num * den; }
    bool operator<=(const Rational& o) const { return num * o.den <= o.num * den; }
    bool operator>=(const Rational& o) const { return o <= *this; }
    bool operator>(const Rational& o) const { return o < *this; }

    double to_double() const { return static_cast<double>(num) / static_cast<double>(den); }
    std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }
    /// percent with two decimals, for display
    std::string percent() const {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * to_double());
        return buf;
    }
};

inline Rational parse_rational(const std::string& s) {
    auto slash = s.find('/');
    if (slash == std::string::npos) throw FileError("report: accuracy must be correct/total");
    return Rational(std::stoll(s.substr(0, slash)), std::stoll(s.substr(slash + 1)));
}

// ---------------------------------------------------------------------------
// Report rows: method,hyper,seed,split,task,accuracy with exact rational
// accuracy ("correct/total"). hyper is "-" for methods without one.

struct ReportRow {
    std::string method;
    std::string hyper;
    std::uint64_t seed = 0;
    std::string split;  // "val" | "test"
    std::string task;
    long long correct = 0;  // stored raw, never reduced
    long long total = 1;

    Rational accuracy() const { return Rational(correct, total); }
    double hyper_value() const { return hyper == "-" ? 0.0 : std::stod(hyper); }
};

struct SweepReport {
    std::vector<ReportRow> rows;
    std::map<std::string, std::string> provenance;  // config_hash, data hashes, ...
};

inline std::string format_hyper(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

inline void save_report(const std::string& path, const SweepReport& rep) {
    auto os = io::open_out(path);
    for (const auto& [k, v] : rep.provenance) os << "# " << k << "=" << v << "\n";
    os << "method,hyper,seed,split,task,accuracy\n";
    for (const auto& r : rep.rows)
        os << r.method << "," << r.hyper << "," << r.seed << "," << r.split << "," << r.task
           << "," << r.correct << "/" << r.total << "\n";
}

inline SweepReport load_report(const std::string& path) {
    auto is = io::open_in(path);
    SweepReport rep;
    std::string line;
    bool header_seen = false;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            auto eq = line.find('=');
            if (eq != std::string::npos)
                rep.provenance[line.substr(2, eq - 2)] = line.substr(eq + 1);
            continue;
        }
        if (!header_seen) {  // column header
            header_seen = true;
            continue;
        }
        std::stringstream ss(line);
        std::string f[6];
        for (int i = 0; i < 6; ++i)
            if (!std::getline(ss, f[i], ',')) throw FileError("report: malformed row: " + line);
        ReportRow r;
        r.method = f[0];
        r.hyper = f[1];
        r.seed = std::stoull(f[2]);
        r.split = f[3];
        r.task = f[4];
        auto slash = f[5].find('/');
        if (slash == std::string::npos)
            throw FileError("report: accuracy must be correct/total: " + line);
        r.correct = std::stoll(f[5].substr(0, slash));
        r.total = std::stoll(f[5].substr(slash + 1));
        if (r.total <= 0 || r.correct < 0 || r.correct > r.total)
            throw FileError("report: malformed accuracy: " + line);
        rep.rows.push_back(std::move(r));
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Fairness measures.

namespace detail {

struct HyperGroup {
    std::string hyper;
    double value = 0;
    // seed -> task -> accuracy
    std::map<std::uint64_t, std::map<std::string, Rational>> cells;
};

inline std::vector<HyperGroup> group_rows(const std::vector<ReportRow>& rows,
                                          const std::string& method, const std::string& split,
                                          const std::vector<std::string>& tasks) {
    std::map<std::string, HyperGroup> groups;
    std::set<std::string> wanted(tasks.begin(), tasks.end());
    for (const auto& r : rows) {
        if (r.method != method || r.split != split || !wanted.count(r.task)) continue;
        auto& g = groups[r.hyper];
        g.hyper = r.hyper;
        g.value = r.hyper_value();
        g.cells[r.seed][r.task] = r.accuracy();
    }
    std::vector<HyperGroup> out;
    for (auto& [h, g] : groups) out.push_back(std::move(g));
    return out;
}

/// Mean over tasks, then mean over seeds. Seeds missing any task are a
/// report defect and rejected.
inline Rational seed_mean_task_mean(const HyperGroup& g, const std::vector<std::string>& tasks) {
    Rational seed_sum(0, 1);
    long long seeds = 0;
    for (const auto& [seed, by_task] : g.cells) {
        Rational task_sum(0, 1);
        for (const auto& t : tasks) {
            auto it = by_task.find(t);
            if (it == by_task.end())
                throw std::invalid_argument("report: missing task '" + t + "' for hyper " +
                                            g.hyper);
            task_sum = task_sum + it->second;
        }
        seed_sum = seed_sum + task_sum / static_cast<long long>(tasks.size());
        ++seeds;
    }
    if (seeds == 0) throw std::invalid_argument("report: empty hyper group");
    return seed_sum / seeds;
}

}  // namespace detail

struct MaxAvgResult {
    std::string hyper;
    double hyper_value = 0;
    Rational average;
};

/// Best seed-averaged average accuracy over the hyperparameter grid; the
/// average is taken over every source task learned so far plus the current
/// target task. Ties break toward the larger hyperparameter (stronger
/// source protection).
inline MaxAvgResult max_achievable_avg(const SweepReport& rep, const std::string& method,
                                       const std::vector<std::string>& tasks,
                                       const std::string& split = "test") {
    auto groups = detail::group_rows(rep.rows, method, split, tasks);
    if (groups.empty()) throw std::invalid_argument("max_achievable_avg: empty report");
    std::optional<MaxAvgResult> best;
    for (const auto& g : groups) {
        Rational avg = detail::seed_mean_task_mean(g, tasks);
        bool better = !best || best->average < avg ||
                      (avg == best->average && g.value > best->hyper_value);
        if (better) best = MaxAvgResult{g.hyper, g.value, avg};
    }
    return *best;
}

struct SourceAtTargetResult {
    std::string hyper;
    double hyper_value = 0;
    Rational source_accuracy;   // test split
    Rational target_val_accuracy;
    Rational required;
};

/// The practical measure: required target accuracy is `fraction` of the
/// fine-tuning model's; among grid points whose validation target accuracy
/// meets it, take the largest hyperparameter and report that model's
/// source test accuracy. Returns nullopt when no grid point qualifies.
inline std::optional<SourceAtTargetResult> source_at_required_target(
    const SweepReport& rep, const std::string& method,
    const std::vector<std::string>& source_tasks, const std::string& target_task,
    Rational finetune_target_acc, Rational fraction = Rational(19, 20)) {
    Rational required = fraction * finetune_target_acc;
    auto val_groups = detail::group_rows(rep.rows, method, "val", {target_task});
    std::optional<SourceAtTargetResult> best;
    for (const auto& g : val_groups) {
        Rational tgt = detail::seed_mean_task_mean(g, {target_task});
        if (tgt < required) continue;
        if (!best || g.value > best->hyper_value) {
            SourceAtTargetResult r;
            r.hyper = g.hyper;
            r.hyper_value = g.value;
            r.target_val_accuracy = tgt;
            r.required = required;
            best = r;
        }
    }
    if (!best) return std::nullopt;
    // evaluate the chosen model once on the source test set
    auto test_groups = detail::group_rows(rep.rows, method, "test", source_tasks);
    for (const auto& g : test_groups)
        if (g.hyper == best->hyper) {
            best->source_accuracy = detail::seed_mean_task_mean(g, source_tasks);
            return best;
        }
    throw std::invalid_argument("report: no source test rows for hyper " + best->hyper);
}

}  // namespace rescl
