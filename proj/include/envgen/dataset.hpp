#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "envgen/common.hpp"
#include "envgen/dynamics.hpp"
#include "envgen/io.hpp"
#include "envgen/rng.hpp"

namespace envgen {

struct DatasetConfig {
    SystemId system = SystemId::LotkaVolterra;
    int grid = 11;        // LV: grid x grid over (beta, delta); LO: grid values of beta
    int n_seen = 24;      // environments with training data
    int n_train = 20;     // training trajectories per seen environment
    int n_test = 5;       // held-out trajectories per environment (seen and unseen)
    double dt = 0.1;
    double T = 10.0;
    int field_size = 32;      // Lambda-Omega grid resolution
    double burn_in = 5.0;     // Lambda-Omega settle time before recording
    double ic_noise = 0.01;   // Lambda-Omega spiral perturbation amplitude
    double ic_lo = 1.0, ic_hi = 3.0;  // LV initial-population range
    int probe_pool = 1024;    // cached states for functional losses
    std::uint64_t seed = 0;
};

struct TrajectorySet {
    DatasetConfig cfg;
    std::vector<EnvironmentSpec> envs;                // dense grid, stable ids
    std::map<int, std::vector<Trajectory>> train;     // seen envs only
    std::map<int, std::vector<Trajectory>> test;      // every env
    Tensor probes;                                    // [P, ...state] pooled from training data
    std::uint64_t config_hash = 0;

    const EnvironmentSpec& env(int id) const {
        for (const auto& e : envs)
            if (e.id == id) return e;
        throw ConfigError("unknown environment id " + std::to_string(id));
    }
    std::vector<int> seen_ids() const {
        std::vector<int> out;
        for (const auto& e : envs)
            if (e.seen) out.push_back(e.id);
        return out;
    }
    std::vector<int> unseen_ids() const {
        std::vector<int> out;
        for (const auto& e : envs)
            if (!e.seen) out.push_back(e.id);
        return out;
    }
};

inline std::uint64_t dataset_config_hash(const DatasetConfig& c) {
    std::string s = std::string(system_name(c.system)) + "|" + std::to_string(c.grid) + "|" +
                    std::to_string(c.n_seen) + "|" + std::to_string(c.n_train) + "|" + std::to_string(c.n_test) +
                    "|" + std::to_string(c.dt) + "|" + std::to_string(c.T) + "|" + std::to_string(c.field_size) +
                    "|" + std::to_string(c.burn_in) + "|" + std::to_string(c.ic_noise) + "|" +
                    std::to_string(c.ic_lo) + "|" + std::to_string(c.ic_hi) + "|" + std::to_string(c.probe_pool) +
                    "|" + std::to_string(c.seed);
    return fnv1a64(s);
}

// Dense coefficient grid with stable ids; which envs are "seen" is a seeded
// uniform draw without replacement.
inline std::vector<EnvironmentSpec> make_env_grid(const DatasetConfig& cfg) {
    std::vector<EnvironmentSpec> envs;
    if (cfg.system == SystemId::LotkaVolterra) {
        if (cfg.grid < 2) throw ConfigError("LV grid must be >= 2");
        for (int i = 0; i < cfg.grid; ++i) {
            double beta = 0.5 + 0.5 * i / (cfg.grid - 1);
            for (int j = 0; j < cfg.grid; ++j) {
                double delta = 0.5 + 0.5 * j / (cfg.grid - 1);
                envs.push_back({cfg.system, i * cfg.grid + j, {beta, delta}, false});
            }
        }
    } else {
        if (cfg.grid < 2) throw ConfigError("Lambda-Omega grid must be >= 2");
        for (int i = 0; i < cfg.grid; ++i) {
            double beta = 1.0 + 0.5 * i / (cfg.grid - 1);
            envs.push_back({cfg.system, i, {beta}, false});
        }
    }
    if (cfg.n_seen <= 0 || cfg.n_seen > static_cast<int>(envs.size()))
        throw ConfigError("n_seen out of range for grid");
    std::vector<int> idx(envs.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(cfg.seed, "env_split"));
    for (std::size_t i = 0; i < idx.size(); ++i) {  // Fisher-Yates
        std::size_t j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
        std::swap(idx[i], idx[j]);
    }
    for (int k = 0; k < cfg.n_seen; ++k) envs[idx[k]].seen = true;
    return envs;
}

namespace detail {

inline Trajectory sample_trajectory(const EnvironmentSpec& env, const DatasetConfig& cfg, Rng& rng) {
    if (env.system == SystemId::LotkaVolterra) {
        double x0 = rng.uniform(cfg.ic_lo, cfg.ic_hi);
        double y0 = rng.uniform(cfg.ic_lo, cfg.ic_hi);
        return simulate_lv(env, x0, y0, cfg.dt, cfg.T);
    }
    Tensor ic = lambda_omega_spiral_ic(cfg.field_size, cfg.ic_noise, rng);
    if (cfg.burn_in > 0.0) {
        Trajectory settle = simulate_lambda_omega(env, ic, cfg.dt, cfg.burn_in);
        ic = settle.frame(settle.steps());
    }
    Trajectory t = simulate_lambda_omega(env, ic, cfg.dt, cfg.T);
    return t;
}

}  // namespace detail

inline TrajectorySet make_dataset(const DatasetConfig& cfg) {
    TrajectorySet set;
    set.cfg = cfg;
    set.config_hash = dataset_config_hash(cfg);
    set.envs = make_env_grid(cfg);
    for (const auto& env : set.envs) {
        if (env.seen) {
            auto& tr = set.train[env.id];
            tr.reserve(cfg.n_train);
            for (int k = 0; k < cfg.n_train; ++k) {
                Rng rng(derive_seed(cfg.seed, "traj", {(static_cast<std::uint64_t>(env.id) << 20) | static_cast<std::uint64_t>(2 * k)}));
                tr.push_back(detail::sample_trajectory(env, cfg, rng));
            }
        }
        auto& te = set.test[env.id];
        te.reserve(cfg.n_test);
        for (int k = 0; k < cfg.n_test; ++k) {
            Rng rng(derive_seed(cfg.seed, "traj", {(static_cast<std::uint64_t>(env.id) << 20) | static_cast<std::uint64_t>(2 * k + 1)}));
            te.push_back(detail::sample_trajectory(env, cfg, rng));
        }
    }

    // Probe pool: states drawn uniformly from seen-env training trajectories.
    std::vector<int> seen = set.seen_ids();
    if (!seen.empty() && cfg.probe_pool > 0) {
        Rng rng(derive_seed(cfg.seed, "probes"));
        const Trajectory& proto = set.train.at(seen[0]).front();
        Shape fs(proto.states.shape().begin() + 1, proto.states.shape().end());
        Shape ps;
        ps.push_back(cfg.probe_pool);
        ps.insert(ps.end(), fs.begin(), fs.end());
        set.probes = Tensor(ps);
        std::int64_t fn = numel(fs);
        for (int p = 0; p < cfg.probe_pool; ++p) {
            int env_id = seen[static_cast<std::size_t>(rng.below(seen.size()))];
            const auto& trs = set.train.at(env_id);
            const Trajectory& tr = trs[static_cast<std::size_t>(rng.below(trs.size()))];
            int t = static_cast<int>(rng.below(static_cast<std::uint64_t>(tr.states.dim(0))));
            const float* src = tr.states.data() + static_cast<std::int64_t>(t) * fn;
            std::copy(src, src + fn, set.probes.data() + static_cast<std::int64_t>(p) * fn);
        }
    }
    return set;
}

// ---- persistence -----------------------------------------------------------
// <dir>/dataset.json manifest, <dir>/env_<id>.bin per environment, <dir>/probes.bin

constexpr char kTrajMagic[] = "ENVTRJ1\0";
constexpr std::uint32_t kTrajVersion = 1;

namespace detail {

inline void write_env_file(const std::filesystem::path& path, const EnvironmentSpec& env,
                           const std::vector<Trajectory>* train, const std::vector<Trajectory>& test) {
    BinaryWriter w(path.string());
    w.magic(kTrajMagic);
    w.u32(kTrajVersion);
    w.u32(static_cast<std::uint32_t>(env.system));
    w.u32(static_cast<std::uint32_t>(env.id));
    const Trajectory& proto = train && !train->empty() ? train->front() : test.front();
    w.u32(static_cast<std::uint32_t>(proto.steps()));
    w.u32(static_cast<std::uint32_t>(proto.states.rank() - 1));
    for (int d = 1; d < proto.states.rank(); ++d) w.u32(static_cast<std::uint32_t>(proto.states.dim(d)));
    w.f64(proto.dt);
    w.u32(train ? static_cast<std::uint32_t>(train->size()) : 0u);
    w.u32(static_cast<std::uint32_t>(test.size()));
    auto dump = [&](const Trajectory& t) {
        if (!t.states.same_shape(proto.states)) throw IoError("trajectory shape mismatch within env file");
        w.f32s(t.states.data(), t.states.size());
    };
    if (train)
        for (const auto& t : *train) dump(t);
    for (const auto& t : test) dump(t);
    w.crc_trailer();
    w.close();
}

inline void read_env_file(const std::filesystem::path& path, const EnvironmentSpec& env,
                          std::vector<Trajectory>* train, std::vector<Trajectory>& test) {
    BinaryReader r(path.string());
    r.expect_magic(kTrajMagic);
    if (r.u32() != kTrajVersion) throw IoError("unsupported trajectory file version: " + path.string());
    if (r.u32() != static_cast<std::uint32_t>(env.system)) throw IoError("system mismatch in " + path.string());
    if (r.u32() != static_cast<std::uint32_t>(env.id)) throw IoError("environment id mismatch in " + path.string());
    int steps = static_cast<int>(r.u32());
    int frank = static_cast<int>(r.u32());
    Shape shape{steps + 1};
    for (int d = 0; d < frank; ++d) shape.push_back(static_cast<int>(r.u32()));
    double dt = r.f64();
    std::uint32_t n_train = r.u32();
    std::uint32_t n_test = r.u32();
    auto slurp = [&]() {
        Trajectory t;
        t.dt = dt;
        t.env_id = env.id;
        t.states = Tensor(shape);
        r.f32s(t.states.data(), t.states.size());
        return t;
    };
    if (train) {
        train->clear();
        for (std::uint32_t i = 0; i < n_train; ++i) train->push_back(slurp());
    } else if (n_train != 0) {
        throw IoError("unexpected training block in " + path.string());
    }
    test.clear();
    for (std::uint32_t i = 0; i < n_test; ++i) test.push_back(slurp());
    r.check_crc_trailer();
}

}  // namespace detail

inline void save_dataset(const TrajectorySet& set, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json m;
    m["format"] = "trajectory-set";
    m["version"] = kTrajVersion;
    m["system"] = system_name(set.cfg.system);
    m["config_hash"] = hex64(set.config_hash);
    m["seed"] = set.cfg.seed;
    m["grid"] = set.cfg.grid;
    m["n_seen"] = set.cfg.n_seen;
    m["n_train"] = set.cfg.n_train;
    m["n_test"] = set.cfg.n_test;
    m["dt"] = set.cfg.dt;
    m["T"] = set.cfg.T;
    m["field_size"] = set.cfg.field_size;
    m["burn_in"] = set.cfg.burn_in;
    m["ic_noise"] = set.cfg.ic_noise;
    m["ic_lo"] = set.cfg.ic_lo;
    m["ic_hi"] = set.cfg.ic_hi;
    m["probe_pool"] = set.cfg.probe_pool;
    nlohmann::json envs = nlohmann::json::array();
    for (const auto& e : set.envs)
        envs.push_back({{"id", e.id}, {"coeffs", e.coeffs}, {"seen", e.seen}});
    m["envs"] = envs;
    write_text_file((fs::path(dir) / "dataset.json").string(), m.dump(2) + "\n");

    for (const auto& e : set.envs) {
        auto it = set.train.find(e.id);
        detail::write_env_file(fs::path(dir) / ("env_" + std::to_string(e.id) + ".bin"), e,
                               it == set.train.end() ? nullptr : &it->second, set.test.at(e.id));
    }
    if (set.probes.size() > 0) {
        BinaryWriter w((fs::path(dir) / "probes.bin").string());
        w.magic(kTrajMagic);
        w.u32(kTrajVersion);
        w.tensor(set.probes);
        w.crc_trailer();
        w.close();
    }
}

inline TrajectorySet load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    fs::path mp = fs::path(dir) / "dataset.json";
    if (!fs::exists(mp))
        throw MissingArtifactError("dataset manifest not found: " + mp.string() + " (run the simulate stage first)");
    nlohmann::json m = nlohmann::json::parse(read_text_file(mp.string()));
    TrajectorySet set;
    DatasetConfig& c = set.cfg;
    std::string sys = m.at("system").get<std::string>();
    c.system = sys == "lotka_volterra" ? SystemId::LotkaVolterra : SystemId::LambdaOmega;
    c.seed = m.at("seed").get<std::uint64_t>();
    c.grid = m.at("grid").get<int>();
    c.n_seen = m.at("n_seen").get<int>();
    c.n_train = m.at("n_train").get<int>();
    c.n_test = m.at("n_test").get<int>();
    c.dt = m.at("dt").get<double>();
    c.T = m.at("T").get<double>();
    c.field_size = m.at("field_size").get<int>();
    c.burn_in = m.at("burn_in").get<double>();
    c.ic_noise = m.at("ic_noise").get<double>();
    c.ic_lo = m.at("ic_lo").get<double>();
    c.ic_hi = m.at("ic_hi").get<double>();
    c.probe_pool = m.at("probe_pool").get<int>();
    set.config_hash = dataset_config_hash(c);
    if (hex64(set.config_hash) != m.at("config_hash").get<std::string>())
        throw IoError("dataset manifest config hash mismatch (manifest edited?)");
    for (const auto& je : m.at("envs")) {
        EnvironmentSpec e;
        e.system = c.system;
        e.id = je.at("id").get<int>();
        e.coeffs = je.at("coeffs").get<std::vector<double>>();
        e.seen = je.at("seen").get<bool>();
        set.envs.push_back(e);
    }
    for (const auto& e : set.envs) {
        fs::path p = fs::path(dir) / ("env_" + std::to_string(e.id) + ".bin");
        if (!fs::exists(p))
            throw MissingArtifactError("trajectory file missing: " + p.string() + " (run the simulate stage first)");
        detail::read_env_file(p, e, e.seen ? &set.train[e.id] : nullptr, set.test[e.id]);
    }
    fs::path pp = fs::path(dir) / "probes.bin";
    if (fs::exists(pp)) {
        BinaryReader r(pp.string());
        r.expect_magic(kTrajMagic);
        if (r.u32() != kTrajVersion) throw IoError("unsupported probe file version");
        set.probes = r.tensor();
        r.check_crc_trailer();
    }
    return set;
}

}  // namespace envgen
