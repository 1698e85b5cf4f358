#pragma once

// Strict pipeline configuration: a JSON tree with one sub-object per stage.
// Every key inside a present block is mandatory and unknown keys are rejected
// with their full path, so a typo can never silently fall back to a default.
// Seeds are explicit — no stage ever seeds from the clock.

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "envgen/common.hpp"
#include "envgen/dataset.hpp"
#include "envgen/diffusion.hpp"
#include "envgen/distill.hpp"
#include "envgen/expert.hpp"
#include "envgen/io.hpp"
#include "envgen/prompter.hpp"
#include "envgen/vae.hpp"
#include "envgen/zoo.hpp"

namespace envgen {

namespace config_detail {

// Cursor into one JSON object that tracks which keys were consumed; finish()
// names any leftover (unknown) key by its full path.
class Node {
public:
    Node(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError("config: " + path_ + " must be an object");
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    const nlohmann::json& raw() const { return j_; }

    Node child(const std::string& key) {
        used_.insert(key);
        if (!j_.contains(key)) throw ConfigError("config: missing key " + join(key));
        return Node(j_.at(key), join(key));
    }

    template <typename T>
    T get(const std::string& key) {
        used_.insert(key);
        if (!j_.contains(key)) throw ConfigError("config: missing key " + join(key));
        try {
            return j_.at(key).get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config: bad value at " + join(key) + ": " + e.what());
        }
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            (void)value;
            if (!used_.count(key)) throw ConfigError("config: unknown key " + join(key));
        }
    }

private:
    std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> used_;
};

inline TrainConfig parse_train(Node n, bool with_seed) {
    TrainConfig t;
    t.epochs = n.get<int>("epochs");
    t.lr = n.get<double>("lr");
    t.batch = n.get<int>("batch");
    if (with_seed) t.seed = n.get<std::uint64_t>("seed");
    n.finish();
    return t;
}

}  // namespace config_detail

struct DistillStageConfig {
    StlsqConfig stlsq;
    int steps = 100;
    double dt = 0.1;
    std::vector<int> env_ids;  // environments to distill (planar systems only)
};

struct PipelineConfig {
    std::string out_dir;
    DatasetConfig dataset;
    ArchSpec arch;
    ZooConfig zoo;
    VaeConfig vae;
    LdmConfig ldm;
    LabelMode label_mode = LabelMode::TrueEnv;
    bool has_prompter = false;
    PrompterConfig prompter;
    std::vector<std::uint64_t> generate_seeds;
    bool with_ssim = false;
    TrainConfig one_for_all;
    bool has_distill = false;
    DistillStageConfig distill;
    nlohmann::json raw;  // canonical tree, used for config hashes

    std::uint64_t hash() const { return fnv1a64(raw.dump()); }
    std::uint64_t subtree_hash(const std::string& key) const {
        if (!raw.contains(key)) throw ConfigError("config: no subtree " + key);
        return fnv1a64(raw.at(key).dump());
    }
};

inline PipelineConfig parse_pipeline_config(const nlohmann::json& j) {
    using config_detail::Node;
    PipelineConfig cfg;
    cfg.raw = j;
    Node root(j, "");

    cfg.out_dir = root.get<std::string>("out_dir");
    if (cfg.out_dir.empty()) throw ConfigError("config: out_dir must be non-empty");

    const std::string system = root.get<std::string>("system");
    if (system == "lotka_volterra")
        cfg.dataset.system = SystemId::LotkaVolterra;
    else if (system == "lambda_omega")
        cfg.dataset.system = SystemId::LambdaOmega;
    else
        throw ConfigError("config: system must be lotka_volterra or lambda_omega, got " + system);

    {
        Node d = root.child("dataset");
        cfg.dataset.grid = d.get<int>("grid");
        cfg.dataset.n_seen = d.get<int>("n_seen");
        cfg.dataset.n_train = d.get<int>("n_train");
        cfg.dataset.n_test = d.get<int>("n_test");
        cfg.dataset.dt = d.get<double>("dt");
        cfg.dataset.T = d.get<double>("T");
        cfg.dataset.field_size = d.get<int>("field_size");
        cfg.dataset.burn_in = d.get<double>("burn_in");
        cfg.dataset.ic_noise = d.get<double>("ic_noise");
        cfg.dataset.ic_lo = d.get<double>("ic_lo");
        cfg.dataset.ic_hi = d.get<double>("ic_hi");
        cfg.dataset.probe_pool = d.get<int>("probe_pool");
        cfg.dataset.seed = d.get<std::uint64_t>("seed");
        d.finish();
    }
    {
        Node a = root.child("arch");
        const std::string kind = a.get<std::string>("kind");
        if (kind == "lv_mlp") {
            cfg.arch = lv_mlp_arch(a.get<int>("hidden"));
        } else if (kind == "field_cnn") {
            cfg.arch = field_cnn_arch(a.get<int>("channels"), a.get<bool>("skip"));
        } else {
            throw ConfigError("config: arch.kind must be lv_mlp or field_cnn, got " + kind);
        }
        a.finish();
    }
    {
        Node z = root.child("zoo");
        cfg.zoo.per_env = z.get<int>("per_env");
        cfg.zoo.sigma = z.get<double>("sigma");
        cfg.zoo.seed = z.get<std::uint64_t>("seed");
        cfg.zoo.pretrain = config_detail::parse_train(z.child("pretrain"), false);
        cfg.zoo.finetune = config_detail::parse_train(z.child("finetune"), false);
        z.finish();
    }
    {
        Node v = root.child("vae");
        cfg.vae.d_z = v.get<int>("d_z");
        cfg.vae.width = v.get<int>("width");
        cfg.vae.heads = v.get<int>("heads");
        cfg.vae.depth = v.get<int>("depth");
        cfg.vae.beta = v.get<double>("kl_weight");
        cfg.vae.lambda = v.get<double>("func_weight");
        cfg.vae.probe_batch = v.get<int>("probe_batch");
        cfg.vae.epochs = v.get<int>("epochs");
        cfg.vae.lr = v.get<double>("lr");
        cfg.vae.batch = v.get<int>("batch");
        cfg.vae.seed = v.get<std::uint64_t>("seed");
        v.finish();
        cfg.vae.validate();
    }
    {
        Node l = root.child("ldm");
        cfg.ldm.n_steps = l.get<int>("n_steps");
        cfg.ldm.beta1 = l.get<double>("beta1");
        cfg.ldm.betaN = l.get<double>("betaN");
        cfg.ldm.width = l.get<int>("width");
        cfg.ldm.heads = l.get<int>("heads");
        cfg.ldm.depth = l.get<int>("depth");
        cfg.ldm.lr = l.get<double>("lr");
        cfg.ldm.epochs = l.get<int>("epochs");
        cfg.ldm.batch = l.get<int>("batch");
        cfg.ldm.ema = l.get<double>("ema");
        cfg.ldm.seed = l.get<std::uint64_t>("seed");
        const std::string mode = l.get<std::string>("label_mode");
        if (mode == "true_env")
            cfg.label_mode = LabelMode::TrueEnv;
        else if (mode == "surrogate")
            cfg.label_mode = LabelMode::Surrogate;
        else
            throw ConfigError("config: ldm.label_mode must be true_env or surrogate, got " + mode);
        l.finish();
        cfg.ldm.validate();
    }
    if (root.has("prompter")) {
        Node p = root.child("prompter");
        cfg.has_prompter = true;
        cfg.prompter.n_probes = p.get<int>("n_probes");
        cfg.prompter.max_examples = p.get<int>("max_examples");
        cfg.prompter.svr_c = p.get<double>("svr_c");
        cfg.prompter.svr_tol = p.get<double>("svr_tol");
        cfg.prompter.seed = p.get<std::uint64_t>("seed");
        p.finish();
        cfg.prompter.validate();
    }
    if (cfg.label_mode == LabelMode::Surrogate && !cfg.has_prompter)
        throw ConfigError("config: ldm.label_mode surrogate requires a prompter block");
    {
        Node g = root.child("generate");
        cfg.generate_seeds = g.get<std::vector<std::uint64_t>>("seeds");
        if (cfg.generate_seeds.empty()) throw ConfigError("config: generate.seeds must be non-empty");
        g.finish();
    }
    {
        Node e = root.child("evaluate");
        cfg.with_ssim = e.get<bool>("with_ssim");
        cfg.one_for_all = config_detail::parse_train(e.child("one_for_all"), true);
        e.finish();
    }
    if (root.has("distill")) {
        Node d = root.child("distill");
        cfg.has_distill = true;
        cfg.distill.stlsq.threshold = d.get<double>("threshold");
        cfg.distill.stlsq.n_iter = d.get<int>("n_iter");
        cfg.distill.steps = d.get<int>("steps");
        cfg.distill.dt = d.get<double>("dt");
        cfg.distill.env_ids = d.get<std::vector<int>>("env_ids");
        d.finish();
        if (cfg.dataset.system != SystemId::LotkaVolterra)
            throw ConfigError("config: distill block requires a planar (lotka_volterra) system");
    }
    root.finish();
    return cfg;
}

inline PipelineConfig load_pipeline_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: parse failure in " + path + ": " + e.what());
    }
    return parse_pipeline_config(j);
}

// Replace every stage seed with one derived from `master`, keeping the rest of
// the configuration intact.  The raw tree is rewritten too, so config hashes
// reflect the effective seeds.
inline void apply_seed_override(PipelineConfig& cfg, std::uint64_t master) {
    auto set = [&](const char* block, const char* tag, std::uint64_t& field) {
        field = derive_seed(master, tag);
        cfg.raw.at(block)["seed"] = field;
    };
    set("dataset", "dataset", cfg.dataset.seed);
    set("zoo", "zoo", cfg.zoo.seed);
    set("vae", "vae", cfg.vae.seed);
    set("ldm", "ldm", cfg.ldm.seed);
    if (cfg.has_prompter) set("prompter", "prompter", cfg.prompter.seed);
    cfg.one_for_all.seed = derive_seed(master, "one_for_all");
    cfg.raw.at("evaluate").at("one_for_all")["seed"] = cfg.one_for_all.seed;
    for (std::size_t i = 0; i < cfg.generate_seeds.size(); ++i)
        cfg.generate_seeds[i] = derive_seed(master, "generate", {static_cast<std::uint64_t>(i)});
    cfg.raw.at("generate")["seeds"] = cfg.generate_seeds;
}

}  // namespace envgen
