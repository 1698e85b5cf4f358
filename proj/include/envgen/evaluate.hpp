#pragma once

// Prediction-quality evaluation.  Every method produces one trajectory per
// held-out test trajectory (rolled out from the same initial frame for the
// same horizon) and is scored against the stored ground truth:
//
//   generated    - experts sampled from the conditional latent model
//   one_per_env  - the zoo expert fitted to that environment (seen envs only)
//   one_for_all  - a single expert fitted across all seen environments
//   truth_sim    - re-integration of the true dynamics (oracle reference)
//
// Rollouts that diverge early are padded: every missing element is charged a
// squared error equal to the truth trajectory's global value range (and a
// structural-similarity score of zero), so truncation is never rewarded.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "envgen/common.hpp"
#include "envgen/dataset.hpp"
#include "envgen/dynamics.hpp"
#include "envgen/expert.hpp"
#include "envgen/io.hpp"
#include "envgen/metrics.hpp"
#include "envgen/tensor.hpp"

#include <nlohmann/json.hpp>

namespace envgen {

enum class EvalMethod { Generated = 0, OnePerEnv = 1, OneForAll = 2, TruthSim = 3 };

inline const char* eval_method_name(EvalMethod m) {
    switch (m) {
        case EvalMethod::Generated: return "generated";
        case EvalMethod::OnePerEnv: return "one_per_env";
        case EvalMethod::OneForAll: return "one_for_all";
        case EvalMethod::TruthSim: return "truth_sim";
    }
    throw ConfigError("eval_method_name: unknown method");
}

struct EvalRow {
    int env_id = -1;
    bool seen = false;
    std::vector<double> coeffs;
    EvalMethod method = EvalMethod::Generated;
    std::uint64_t seed = 0;  // generation seed; 0 for the deterministic baselines
    int n_traj = 0;
    double rmse = 0.0;
    double ssim = std::numeric_limits<double>::quiet_NaN();
};

struct EvalReport {
    std::string system;
    std::uint64_t dataset_hash = 0;
    std::uint64_t config_hash = 0;
    std::vector<std::uint64_t> seeds;
    std::vector<EvalRow> rows;
    std::map<std::string, double> summary;
};

namespace eval_detail {

inline double truth_range(const Trajectory& truth) {
    float lo = truth.states[0], hi = truth.states[0];
    for (std::int64_t i = 1; i < truth.states.size(); ++i) {
        lo = std::min(lo, truth.states[static_cast<std::int64_t>(i)]);
        hi = std::max(hi, truth.states[static_cast<std::int64_t>(i)]);
    }
    const double r = static_cast<double>(hi) - static_cast<double>(lo);
    return r > 0.0 ? r : 1.0;  // constant truth: charge unit error per missing element
}

}  // namespace eval_detail

// RMSE over the full truth horizon.  A shorter (truncated) prediction is
// padded with per-element squared error equal to the truth value range.
inline double trajectory_rmse(const Trajectory& pred, const Trajectory& truth) {
    if (truth.states.rank() < 2 || truth.states.size() == 0)
        throw ShapeError("trajectory_rmse: empty truth trajectory");
    if (pred.states.rank() != truth.states.rank())
        throw ShapeError("trajectory_rmse: rank mismatch between prediction and truth");
    for (int d = 1; d < truth.states.rank(); ++d)
        if (pred.states.dim(d) != truth.states.dim(d))
            throw ShapeError("trajectory_rmse: frame shape mismatch");
    if (pred.states.dim(0) > truth.states.dim(0))
        throw ShapeError("trajectory_rmse: prediction longer than truth");
    double acc = 0.0;
    for (std::int64_t i = 0; i < pred.states.size(); ++i) {
        const double d = static_cast<double>(pred.states[i]) - static_cast<double>(truth.states[i]);
        acc += d * d;
    }
    const std::int64_t missing = truth.states.size() - pred.states.size();
    if (missing > 0) {
        const double r = eval_detail::truth_range(truth);
        acc += static_cast<double>(missing) * r * r;
    }
    return std::sqrt(acc / static_cast<double>(truth.states.size()));
}

// Mean per-frame structural similarity for field trajectories ([T+1, C, H, W]).
// Missing frames of a truncated prediction score zero.
inline double trajectory_ssim(const Trajectory& pred, const Trajectory& truth) {
    if (truth.states.rank() != 4)
        throw ShapeError("trajectory_ssim: needs field trajectories [T+1, C, H, W], got " +
                         shape_str(truth.states.shape()));
    if (pred.states.rank() != 4 || pred.states.dim(1) != truth.states.dim(1) ||
        pred.states.dim(2) != truth.states.dim(2) || pred.states.dim(3) != truth.states.dim(3))
        throw ShapeError("trajectory_ssim: frame shape mismatch");
    if (pred.states.dim(0) > truth.states.dim(0))
        throw ShapeError("trajectory_ssim: prediction longer than truth");
    const double range = eval_detail::truth_range(truth);
    double acc = 0.0;
    const int t_pred = pred.states.dim(0), t_truth = truth.states.dim(0);
    for (int t = 0; t < t_pred; ++t) acc += ssim(pred.frame(t), truth.frame(t), range);
    return acc / static_cast<double>(t_truth);
}

// Score one expert on every held-out trajectory of one environment.
// Returns (mean rmse, mean ssim); ssim is NaN for non-field systems.
inline std::pair<double, double> eval_expert_on_env(const ArchSpec& arch, const FlatWeights& w,
                                                    const TrajectorySet& data, int env_id, bool with_ssim) {
    const auto it = data.test.find(env_id);
    if (it == data.test.end() || it->second.empty())
        throw ConfigError("eval_expert_on_env: no test trajectories for env " + std::to_string(env_id));
    double rm = 0.0, ss = 0.0;
    for (const Trajectory& truth : it->second) {
        Trajectory pred = rollout(arch, w, truth.frame(0), truth.steps(), truth.dt, env_id);
        rm += trajectory_rmse(pred, truth);
        if (with_ssim) ss += trajectory_ssim(pred, truth);
    }
    const double n = static_cast<double>(it->second.size());
    return {rm / n, with_ssim ? ss / n : std::numeric_limits<double>::quiet_NaN()};
}

namespace eval_detail {

inline EvalRow make_row(const EnvironmentSpec& env, EvalMethod method, std::uint64_t seed, int n_traj,
                        std::pair<double, double> scores) {
    EvalRow r;
    r.env_id = env.id;
    r.seen = env.seen;
    r.coeffs = env.coeffs;
    r.method = method;
    r.seed = seed;
    r.n_traj = n_traj;
    r.rmse = scores.first;
    r.ssim = scores.second;
    return r;
}

}  // namespace eval_detail

// Score a set of per-environment experts (one row per provided environment).
inline std::vector<EvalRow> eval_expert_map(const ArchSpec& arch, const std::map<int, FlatWeights>& experts,
                                            const TrajectorySet& data, EvalMethod method, std::uint64_t seed,
                                            bool with_ssim) {
    std::vector<EvalRow> rows;
    for (const EnvironmentSpec& env : data.envs) {
        const auto it = experts.find(env.id);
        if (it == experts.end()) continue;
        const int n = static_cast<int>(data.test.at(env.id).size());
        rows.push_back(eval_detail::make_row(env, method, seed, n,
                                             eval_expert_on_env(arch, it->second, data, env.id, with_ssim)));
    }
    if (rows.empty()) throw ConfigError("eval_expert_map: no provided expert matches a dataset environment");
    return rows;
}

// Score one shared expert on every environment.
inline std::vector<EvalRow> eval_one_for_all(const ArchSpec& arch, const FlatWeights& w, const TrajectorySet& data,
                                             bool with_ssim) {
    std::map<int, FlatWeights> experts;
    for (const EnvironmentSpec& env : data.envs) experts[env.id] = w;
    return eval_expert_map(arch, experts, data, EvalMethod::OneForAll, 0, with_ssim);
}

// Oracle reference: re-integrate the true dynamics from each test frame.
inline std::vector<EvalRow> eval_truth_sim(const TrajectorySet& data, bool with_ssim) {
    std::vector<EvalRow> rows;
    for (const EnvironmentSpec& env : data.envs) {
        const auto& trajs = data.test.at(env.id);
        double rm = 0.0, ss = 0.0;
        for (const Trajectory& truth : trajs) {
            Trajectory pred = simulate_from(env, truth.frame(0), truth.dt, truth.steps());
            rm += trajectory_rmse(pred, truth);
            if (with_ssim) ss += trajectory_ssim(pred, truth);
        }
        const double n = static_cast<double>(trajs.size());
        rows.push_back(eval_detail::make_row(
            env, EvalMethod::TruthSim, 0, static_cast<int>(trajs.size()),
            {rm / n, with_ssim ? ss / n : std::numeric_limits<double>::quiet_NaN()}));
    }
    return rows;
}

// Per-environment aggregate over generation seeds: each test environment
// appears exactly once per method, carrying mean and sample std of its scores.
struct EnvAggregate {
    int env_id = -1;
    bool seen = false;
    std::vector<double> coeffs;
    EvalMethod method = EvalMethod::Generated;
    int runs = 0;
    double rmse_mean = 0.0, rmse_std = 0.0;
    double ssim_mean = std::numeric_limits<double>::quiet_NaN(), ssim_std = 0.0;
};

inline std::vector<EnvAggregate> aggregate_env_rows(const std::vector<EvalRow>& rows) {
    std::map<std::pair<int, int>, std::vector<const EvalRow*>> groups;  // (method, env) -> rows
    for (const EvalRow& r : rows) groups[{static_cast<int>(r.method), r.env_id}].push_back(&r);
    std::vector<EnvAggregate> out;
    for (const auto& [key, grp] : groups) {
        (void)key;
        EnvAggregate a;
        a.env_id = grp.front()->env_id;
        a.seen = grp.front()->seen;
        a.coeffs = grp.front()->coeffs;
        a.method = grp.front()->method;
        a.runs = static_cast<int>(grp.size());
        auto mean_std = [&](auto value, double& mean, double& stdev) {
            double m = 0.0;
            int n = 0;
            for (const EvalRow* r : grp) {
                const double v = value(*r);
                if (!std::isfinite(v)) continue;
                m += v;
                ++n;
            }
            if (n == 0) return;
            m /= n;
            double s2 = 0.0;
            for (const EvalRow* r : grp) {
                const double v = value(*r);
                if (!std::isfinite(v)) continue;
                s2 += (v - m) * (v - m);
            }
            mean = m;
            stdev = n > 1 ? std::sqrt(s2 / (n - 1)) : 0.0;
        };
        mean_std([](const EvalRow& r) { return r.rmse; }, a.rmse_mean, a.rmse_std);
        mean_std([](const EvalRow& r) { return r.ssim; }, a.ssim_mean, a.ssim_std);
        out.push_back(std::move(a));
    }
    return out;
}

// Aggregate rows into "<method>.<in|out>_domain.{rmse_mean,ssim_mean,rows}".
// Each row (one environment under one method and seed) weighs equally.
inline std::map<std::string, double> summarize_rows(const std::vector<EvalRow>& rows) {
    struct Agg {
        double rmse = 0.0, ssim = 0.0;
        int n = 0, n_ssim = 0;
    };
    std::map<std::string, Agg> by_key;
    for (const EvalRow& r : rows) {
        std::string key = std::string(eval_method_name(r.method)) + (r.seen ? ".in_domain" : ".out_domain");
        Agg& a = by_key[key];
        a.rmse += r.rmse;
        a.n += 1;
        if (std::isfinite(r.ssim)) {
            a.ssim += r.ssim;
            a.n_ssim += 1;
        }
    }
    std::map<std::string, double> out;
    for (const auto& [key, a] : by_key) {
        out[key + ".rmse_mean"] = a.rmse / a.n;
        out[key + ".rows"] = static_cast<double>(a.n);
        if (a.n_ssim > 0) out[key + ".ssim_mean"] = a.ssim / a.n_ssim;
    }
    return out;
}

// ---- report artifacts --------------------------------------------------------
// CSV of per-environment rows plus a JSON summary.  Both are byte-deterministic
// for a fixed report (sorted rows, fixed float formatting, no timestamps), so
// reruns of an identical configuration can be compared by content hash.

namespace eval_detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace eval_detail

inline std::string eval_csv_filename(EvalMethod method, std::uint64_t dataset_hash,
                                     const std::vector<std::uint64_t>& seeds) {
    std::string s = "eval_" + std::string(eval_method_name(method)) + "_" + hex64(dataset_hash) + "_seeds";
    if (seeds.empty()) s += "_0";
    for (std::uint64_t v : seeds) s += "_" + std::to_string(v);
    return s + ".csv";
}

inline void write_eval_rows_csv(std::vector<EvalRow> rows, const std::string& path) {
    std::sort(rows.begin(), rows.end(), [](const EvalRow& a, const EvalRow& b) {
        if (a.method != b.method) return static_cast<int>(a.method) < static_cast<int>(b.method);
        if (a.env_id != b.env_id) return a.env_id < b.env_id;
        return a.seed < b.seed;
    });
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    os << "env_id,seen,coeffs,method,seed,n_traj,rmse,ssim\n";
    for (const EvalRow& r : rows) {
        std::string coeffs;
        for (std::size_t i = 0; i < r.coeffs.size(); ++i) {
            if (i) coeffs += ';';
            coeffs += eval_detail::fmt_double(r.coeffs[i]);
        }
        os << r.env_id << ',' << (r.seen ? 1 : 0) << ',' << coeffs << ',' << eval_method_name(r.method) << ','
           << r.seed << ',' << r.n_traj << ',' << eval_detail::fmt_double(r.rmse) << ','
           << eval_detail::fmt_double(r.ssim) << '\n';
    }
    if (!os) throw IoError("write failed: " + path);
}

inline void write_eval_summary_json(const EvalReport& report, const std::string& path) {
    nlohmann::json j;
    j["system"] = report.system;
    j["dataset_hash"] = hex64(report.dataset_hash);
    j["config_hash"] = hex64(report.config_hash);
    j["seeds"] = report.seeds;
    j["row_count"] = report.rows.size();
    nlohmann::json metrics = nlohmann::json::object();
    for (const auto& [k, v] : report.summary) metrics[k] = v;
    j["metrics"] = metrics;
    nlohmann::json envs = nlohmann::json::array();
    for (const EnvAggregate& a : aggregate_env_rows(report.rows)) {
        nlohmann::json e;
        e["env_id"] = a.env_id;
        e["seen"] = a.seen;
        e["coeffs"] = a.coeffs;
        e["method"] = eval_method_name(a.method);
        e["runs"] = a.runs;
        e["rmse_mean"] = a.rmse_mean;
        e["rmse_std"] = a.rmse_std;
        if (std::isfinite(a.ssim_mean)) {
            e["ssim_mean"] = a.ssim_mean;
            e["ssim_std"] = a.ssim_std;
        }
        envs.push_back(std::move(e));
    }
    j["env_rows"] = envs;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    os << j.dump(2) << '\n';
    if (!os) throw IoError("write failed: " + path);
}

}  // namespace envgen
