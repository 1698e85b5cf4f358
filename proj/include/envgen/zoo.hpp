#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "envgen/dataset.hpp"
#include "envgen/expert.hpp"
#include "envgen/io.hpp"
#include "envgen/weight_graph.hpp"

namespace envgen {

struct ExpertRecord {
    std::uint64_t arch_id = 0;
    FlatWeights w;
    int env_id = 0;
    int index = 0;
    double final_loss = 0.0;
    int epochs = 0;
    std::uint64_t seed = 0;
    int perturbed_layer = -1;
    double sigma = 0.0;
    bool flagged = false;  // failed the loss gate even after one retry
};

struct ZooConfig {
    int per_env = 32;
    TrainConfig pretrain{.epochs = 40, .lr = 1e-4, .batch = 32};
    TrainConfig finetune{.epochs = 15, .lr = 1e-4, .batch = 32};
    double sigma = 0.1;
    std::uint64_t seed = 0;
};

struct Zoo {
    ArchSpec arch;
    FlatWeights global_init;
    std::vector<ExpertRecord> records;
    WeightNormalizer normalizer;
    std::uint64_t dataset_hash = 0;
    ZooConfig cfg;

    std::vector<const ExpertRecord*> env_records(int env_id) const {
        std::vector<const ExpertRecord*> out;
        for (const auto& r : records)
            if (r.env_id == env_id) out.push_back(&r);
        return out;
    }
    // proxy expert: best-loss unflagged record of the environment
    const ExpertRecord& proxy(int env_id) const {
        const ExpertRecord* best = nullptr;
        for (const auto& r : records)
            if (r.env_id == env_id && !r.flagged && (!best || r.final_loss < best->final_loss)) best = &r;
        if (!best)
            for (const auto& r : records)
                if (r.env_id == env_id && (!best || r.final_loss < best->final_loss)) best = &r;
        if (!best) throw ConfigError("zoo has no records for env " + std::to_string(env_id));
        return *best;
    }
};

// Shared initialization trained by empirical risk over mixed-environment pairs.
inline TrainResult pretrain_global(const TrajectorySet& data, const ArchSpec& arch, const TrainConfig& cfg) {
    std::vector<const Trajectory*> trajs;
    for (int id : data.seen_ids())
        for (const auto& t : data.train.at(id)) trajs.push_back(&t);
    if (data.seen_ids().size() < 2)
        std::cerr << "[warn] pretrain_global: only one seen environment; behaving as ordinary training\n";
    FlatWeights w0 = build_expert(arch, InitScheme::FanIn, derive_seed(cfg.seed, "pretrain_init"));
    return train_expert(arch, w0, trajs, cfg);
}

// Gaussian noise on exactly one randomly chosen layer's weight segment,
// scaled by that layer's own weight std.
inline FlatWeights perturb_layer(const FlatWeights& w, const ArchSpec& arch, double sigma, std::uint64_t seed,
                                 int* chosen = nullptr) {
    if (sigma < 0.0) throw ConfigError("perturb_layer: sigma must be >= 0");
    Layout lay = make_layout(arch);
    std::vector<const Segment*> weights;
    for (const auto& seg : lay.segments)
        if (seg.role == SegmentRole::Weight) weights.push_back(&seg);
    Rng rng(derive_seed(seed, "perturb"));
    const Segment& seg = *weights[static_cast<std::size_t>(rng.below(weights.size()))];
    if (chosen) *chosen = seg.layer;
    FlatWeights out = w;
    if (sigma == 0.0) return out;
    double m = 0.0, m2 = 0.0;
    for (std::int64_t i = 0; i < seg.count(); ++i) {
        m += w[seg.offset + i];
        m2 += static_cast<double>(w[seg.offset + i]) * w[seg.offset + i];
    }
    m /= static_cast<double>(seg.count());
    double s = std::sqrt(std::max(m2 / static_cast<double>(seg.count()) - m * m, 0.0));
    for (std::int64_t i = 0; i < seg.count(); ++i)
        out[seg.offset + i] += static_cast<float>(rng.normal(0.0, sigma * s));
    return out;
}

inline Zoo build_zoo(const TrajectorySet& data, const ArchSpec& arch, const ZooConfig& cfg) {
    if (cfg.per_env < 1) throw ConfigError("build_zoo: per_env must be >= 1");
    Zoo zoo;
    zoo.arch = arch;
    zoo.cfg = cfg;
    zoo.dataset_hash = data.config_hash;

    TrainConfig pre = cfg.pretrain;
    pre.seed = derive_seed(cfg.seed, "pretrain");
    zoo.global_init = pretrain_global(data, arch, pre).w;

    for (int env_id : data.seen_ids()) {
        std::vector<const Trajectory*> trajs;
        for (const auto& t : data.train.at(env_id)) trajs.push_back(&t);
        std::vector<ExpertRecord> env_records;
        for (int k = 0; k < cfg.per_env; ++k) {
            std::uint64_t rec_seed =
                derive_seed(cfg.seed, "record", {(static_cast<std::uint64_t>(env_id) << 16) | static_cast<std::uint64_t>(k), 0});
            ExpertRecord rec;
            rec.arch_id = arch.arch_id();
            rec.env_id = env_id;
            rec.index = k;
            rec.seed = rec_seed;
            rec.sigma = cfg.sigma;
            FlatWeights w0 = perturb_layer(zoo.global_init, arch, cfg.sigma, rec_seed, &rec.perturbed_layer);
            TrainConfig ft = cfg.finetune;
            ft.seed = rec_seed;
            TrainResult tr = train_expert(arch, w0, trajs, ft);
            rec.w = tr.w;
            rec.final_loss = tr.final_loss;
            rec.epochs = static_cast<int>(tr.curve.size());
            env_records.push_back(std::move(rec));
        }
        // loss gate: > 5x the env's median final loss triggers one retry, then a flag
        std::vector<double> losses;
        for (const auto& r : env_records) losses.push_back(r.final_loss);
        std::nth_element(losses.begin(), losses.begin() + losses.size() / 2, losses.end());
        double median = losses[losses.size() / 2];
        for (auto& rec : env_records) {
            if (rec.final_loss <= 5.0 * median) continue;
            std::uint64_t retry_seed = derive_seed(
                cfg.seed, "record", {(static_cast<std::uint64_t>(env_id) << 16) | static_cast<std::uint64_t>(rec.index), 1});
            FlatWeights w0 = perturb_layer(zoo.global_init, arch, cfg.sigma, retry_seed, &rec.perturbed_layer);
            TrainConfig ft = cfg.finetune;
            ft.seed = retry_seed;
            TrainResult tr = train_expert(arch, w0, trajs, ft);
            rec.w = tr.w;
            rec.final_loss = tr.final_loss;
            rec.epochs = static_cast<int>(tr.curve.size());
            rec.seed = retry_seed;
            if (rec.final_loss > 5.0 * median) rec.flagged = true;
        }
        for (auto& rec : env_records) zoo.records.push_back(std::move(rec));
    }

    std::vector<const FlatWeights*> ws;
    for (const auto& r : zoo.records) ws.push_back(&r.w);
    zoo.normalizer = fit_normalizer(arch, ws);
    return zoo;
}

// mean pairwise L2 distance between weight vectors (dispersion diagnostics)
inline double mean_pairwise_l2(const std::vector<const FlatWeights*>& ws) {
    if (ws.size() < 2) throw ConfigError("mean_pairwise_l2: need >= 2 vectors");
    double total = 0.0;
    int pairs = 0;
    for (std::size_t i = 0; i < ws.size(); ++i)
        for (std::size_t j = i + 1; j < ws.size(); ++j) {
            double d2 = 0.0;
            for (std::int64_t k = 0; k < ws[i]->size(); ++k) {
                double d = (*ws[i])[k] - (*ws[j])[k];
                d2 += d * d;
            }
            total += std::sqrt(d2);
            ++pairs;
        }
    return total / pairs;
}

// ---- arch (de)serialization -------------------------------------------------

inline nlohmann::json arch_to_json(const ArchSpec& a) {
    nlohmann::json j;
    j["name"] = a.name;
    j["integrator"] = a.integrator == Integrator::Rk4NeuralOde ? "rk4_neural_ode" : "next_frame";
    j["pad"] = a.pad == Pad::Circular ? "circular" : "zero";
    j["layers"] = nlohmann::json::array();
    for (const auto& l : a.layers) {
        nlohmann::json jl;
        jl["kind"] = l.kind == LayerKind::Linear ? "linear" : "conv2d";
        jl["in"] = l.in;
        jl["out"] = l.out;
        jl["kernel"] = l.kernel;
        jl["act"] = l.act == Activation::Tanh ? "tanh" : l.act == Activation::Gelu ? "gelu" : "none";
        j["layers"].push_back(jl);
    }
    j["skips"] = nlohmann::json::array();
    for (const auto& s : a.skips) j["skips"].push_back({{"from", s.from}, {"to", s.to}});
    return j;
}

inline ArchSpec arch_from_json(const nlohmann::json& j) {
    ArchSpec a;
    a.name = j.at("name").get<std::string>();
    a.integrator = j.at("integrator").get<std::string>() == "rk4_neural_ode" ? Integrator::Rk4NeuralOde
                                                                             : Integrator::NextFrame;
    a.pad = j.at("pad").get<std::string>() == "circular" ? Pad::Circular : Pad::Zero;
    for (const auto& jl : j.at("layers")) {
        LayerSpec l;
        std::string kind = jl.at("kind").get<std::string>();
        l.kind = kind == "linear" ? LayerKind::Linear : LayerKind::Conv2d;
        l.in = jl.at("in").get<int>();
        l.out = jl.at("out").get<int>();
        l.kernel = jl.at("kernel").get<int>();
        std::string act = jl.at("act").get<std::string>();
        l.act = act == "tanh" ? Activation::Tanh : act == "gelu" ? Activation::Gelu : Activation::None;
        a.layers.push_back(l);
    }
    for (const auto& js : j.at("skips")) a.skips.push_back({js.at("from").get<int>(), js.at("to").get<int>()});
    a.validate();
    return a;
}

// ---- persistence -------------------------------------------------------------
// <dir>/zoo.json manifest, <dir>/global_init.bin, <dir>/normalizer.bin,
// <dir>/rec_<env>_<idx>.bin records.

constexpr char kZooMagic[] = "ENVZOO1\0";
constexpr std::uint32_t kZooVersion = 1;

namespace detail {

inline void write_weights_file(const std::string& path, std::uint64_t arch_id, std::uint32_t env_id,
                               std::uint32_t index, const FlatWeights& w) {
    BinaryWriter wr(path);
    wr.magic(kZooMagic);
    wr.u32(kZooVersion);
    wr.u64(arch_id);
    wr.u32(env_id);
    wr.u32(index);
    wr.u64(static_cast<std::uint64_t>(w.size()));
    wr.f32s(w.data(), w.size());
    wr.crc_trailer();
    wr.close();
}

inline FlatWeights read_weights_file(const std::string& path, std::uint64_t arch_id, std::uint32_t env_id,
                                     std::uint32_t index) {
    BinaryReader r(path);
    r.expect_magic(kZooMagic);
    if (r.u32() != kZooVersion) throw IoError("unsupported zoo record version: " + path);
    if (r.u64() != arch_id) throw IoError("arch id mismatch in " + path);
    if (r.u32() != env_id || r.u32() != index) throw IoError("env/index mismatch in " + path);
    std::uint64_t n = r.u64();
    FlatWeights w({static_cast<int>(n)});
    r.f32s(w.data(), w.size());
    r.check_crc_trailer();
    return w;
}

}  // namespace detail

inline void save_zoo(const Zoo& zoo, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json m;
    m["format"] = "model-zoo";
    m["version"] = kZooVersion;
    m["arch"] = arch_to_json(zoo.arch);
    m["arch_id"] = hex64(zoo.arch.arch_id());
    m["dataset_hash"] = hex64(zoo.dataset_hash);
    m["seed"] = zoo.cfg.seed;
    m["sigma"] = zoo.cfg.sigma;
    m["per_env"] = zoo.cfg.per_env;
    m["pretrain"] = {{"epochs", zoo.cfg.pretrain.epochs}, {"lr", zoo.cfg.pretrain.lr}, {"batch", zoo.cfg.pretrain.batch}};
    m["finetune"] = {{"epochs", zoo.cfg.finetune.epochs}, {"lr", zoo.cfg.finetune.lr}, {"batch", zoo.cfg.finetune.batch}};
    m["normalizer_file"] = "normalizer.bin";
    m["global_init_file"] = "global_init.bin";
    std::map<int, int> counts;
    for (const auto& r : zoo.records) counts[r.env_id]++;
    nlohmann::json jc = nlohmann::json::object();
    for (const auto& [env, n] : counts) jc[std::to_string(env)] = n;
    m["counts"] = jc;
    nlohmann::json jr = nlohmann::json::array();
    for (const auto& r : zoo.records)
        jr.push_back({{"env", r.env_id},
                      {"index", r.index},
                      {"final_loss", r.final_loss},
                      {"epochs", r.epochs},
                      {"seed", r.seed},
                      {"perturbed_layer", r.perturbed_layer},
                      {"sigma", r.sigma},
                      {"flagged", r.flagged}});
    m["records"] = jr;
    write_text_file((fs::path(dir) / "zoo.json").string(), m.dump(2) + "\n");
    detail::write_weights_file((fs::path(dir) / "global_init.bin").string(), zoo.arch.arch_id(), 0xffffffffu, 0,
                               zoo.global_init);
    save_normalizer(zoo.normalizer, (fs::path(dir) / "normalizer.bin").string());
    for (const auto& r : zoo.records)
        detail::write_weights_file(
            (fs::path(dir) / ("rec_" + std::to_string(r.env_id) + "_" + std::to_string(r.index) + ".bin")).string(),
            r.arch_id, static_cast<std::uint32_t>(r.env_id), static_cast<std::uint32_t>(r.index), r.w);
}

inline Zoo load_zoo(const std::string& dir) {
    namespace fs = std::filesystem;
    fs::path mp = fs::path(dir) / "zoo.json";
    if (!fs::exists(mp))
        throw MissingArtifactError("zoo manifest not found: " + mp.string() + " (run the build-zoo stage first)");
    nlohmann::json m = nlohmann::json::parse(read_text_file(mp.string()));
    Zoo zoo;
    zoo.arch = arch_from_json(m.at("arch"));
    if (hex64(zoo.arch.arch_id()) != m.at("arch_id").get<std::string>())
        throw IoError("zoo manifest arch id does not match arch definition");
    zoo.dataset_hash = std::stoull(m.at("dataset_hash").get<std::string>(), nullptr, 16);
    zoo.cfg.seed = m.at("seed").get<std::uint64_t>();
    zoo.cfg.sigma = m.at("sigma").get<double>();
    zoo.cfg.per_env = m.at("per_env").get<int>();
    auto read_tc = [&m](const char* key, TrainConfig& tc) {
        tc.epochs = m.at(key).at("epochs").get<int>();
        tc.lr = m.at(key).at("lr").get<double>();
        tc.batch = m.at(key).at("batch").get<int>();
    };
    read_tc("pretrain", zoo.cfg.pretrain);
    read_tc("finetune", zoo.cfg.finetune);
    zoo.global_init = detail::read_weights_file((fs::path(dir) / m.at("global_init_file").get<std::string>()).string(),
                                                zoo.arch.arch_id(), 0xffffffffu, 0);
    zoo.normalizer = load_normalizer((fs::path(dir) / m.at("normalizer_file").get<std::string>()).string());
    if (zoo.normalizer.arch_id != zoo.arch.arch_id()) throw IoError("zoo normalizer arch id mismatch");
    std::map<int, int> counts;
    for (const auto& jr : m.at("records")) {
        ExpertRecord r;
        r.arch_id = zoo.arch.arch_id();
        r.env_id = jr.at("env").get<int>();
        r.index = jr.at("index").get<int>();
        r.final_loss = jr.at("final_loss").get<double>();
        r.epochs = jr.at("epochs").get<int>();
        r.seed = jr.at("seed").get<std::uint64_t>();
        r.perturbed_layer = jr.at("perturbed_layer").get<int>();
        r.sigma = jr.at("sigma").get<double>();
        r.flagged = jr.at("flagged").get<bool>();
        fs::path p = fs::path(dir) / ("rec_" + std::to_string(r.env_id) + "_" + std::to_string(r.index) + ".bin");
        if (!fs::exists(p))
            throw MissingArtifactError("zoo record missing: " + p.string() + " (run the build-zoo stage first)");
        r.w = detail::read_weights_file(p.string(), r.arch_id, static_cast<std::uint32_t>(r.env_id),
                                        static_cast<std::uint32_t>(r.index));
        counts[r.env_id]++;
        zoo.records.push_back(std::move(r));
    }
    for (const auto& [env, n] : counts)
        if (m.at("counts").at(std::to_string(env)).get<int>() != n)
            throw IoError("zoo manifest count mismatch for env " + std::to_string(env));
    return zoo;
}

}  // namespace envgen
