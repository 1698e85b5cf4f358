#pragma once

// Stage orchestration: each stage reads only the artifacts of the stages it
// declares, writes its own artifacts plus a deterministic meta file (stage
// name, config hashes, output list — never timestamps), and fails with
// MissingArtifactError naming the required prior stage when an input is
// absent.  Stage order for a full run:
//
//   simulate -> build-zoo -> train-vae -> [fit-prompter] -> train-ldm
//            -> generate -> evaluate -> [distill]

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "envgen/common.hpp"
#include "envgen/config.hpp"
#include "envgen/dataset.hpp"
#include "envgen/diffusion.hpp"
#include "envgen/distill.hpp"
#include "envgen/evaluate.hpp"
#include "envgen/expert.hpp"
#include "envgen/io.hpp"
#include "envgen/prompter.hpp"
#include "envgen/vae.hpp"
#include "envgen/weight_graph.hpp"
#include "envgen/zoo.hpp"

namespace envgen {

inline const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names = {"simulate", "build-zoo",    "train-vae", "train-ldm",
                                                   "fit-prompter", "generate", "evaluate",  "distill"};
    return names;
}

namespace pipeline_detail {

namespace fs = std::filesystem;

inline void require_artifact(const fs::path& path, const std::string& producing_stage) {
    if (!fs::exists(path))
        throw MissingArtifactError("requires " + producing_stage + " artifact: " + path.string() + " not found");
}

// Deterministic per-stage record: which config produced this artifact set.
inline void write_stage_meta(const fs::path& out, const std::string& stage, const PipelineConfig& cfg,
                             const std::vector<std::string>& subtrees, std::vector<std::string> outputs) {
    nlohmann::json j;
    j["stage"] = stage;
    j["config_hash"] = hex64(cfg.hash());
    nlohmann::json hs = nlohmann::json::object();
    for (const std::string& key : subtrees) hs[key] = hex64(cfg.subtree_hash(key));
    j["subtree_hashes"] = hs;
    std::sort(outputs.begin(), outputs.end());
    j["outputs"] = outputs;
    std::ofstream os(out / (stage + ".meta.json"), std::ios::binary);
    if (!os) throw IoError("cannot write stage meta for " + stage);
    os << j.dump(2) << '\n';
}

// ---- generated-expert persistence --------------------------------------------

constexpr char kGenMagic[] = "ENVGWT1\0";
constexpr std::uint32_t kGenVersion = 1;

}  // namespace pipeline_detail

struct GeneratedSet {
    std::uint64_t config_hash = 0;
    std::uint64_t arch_id = 0;
    std::uint64_t seed = 0;
    std::map<int, FlatWeights> experts;  // env id -> flat weights
};

inline void save_generated(const GeneratedSet& g, const std::string& path) {
    BinaryWriter w(path);
    w.magic(pipeline_detail::kGenMagic);
    w.u32(pipeline_detail::kGenVersion);
    w.u64(g.config_hash);
    w.u64(g.arch_id);
    w.u64(g.seed);
    w.u32(static_cast<std::uint32_t>(g.experts.size()));
    for (const auto& [env_id, weights] : g.experts) {
        w.u32(static_cast<std::uint32_t>(env_id));
        w.tensor(weights);
    }
    w.crc_trailer();
    w.close();
}

inline GeneratedSet load_generated(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic(pipeline_detail::kGenMagic);
    if (r.u32() != pipeline_detail::kGenVersion) throw IoError("generated-expert file version mismatch: " + path);
    GeneratedSet g;
    g.config_hash = r.u64();
    g.arch_id = r.u64();
    g.seed = r.u64();
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        const int env_id = static_cast<int>(r.u32());
        g.experts[env_id] = r.tensor();
    }
    r.check_crc_trailer();
    return g;
}

// ---- stage bodies --------------------------------------------------------------

namespace pipeline_detail {

inline fs::path dataset_dir(const fs::path& out) { return out / "dataset"; }
inline fs::path zoo_dir(const fs::path& out) { return out / "zoo"; }
inline fs::path vae_path(const fs::path& out) { return out / "vae.bin"; }
inline fs::path ldm_path(const fs::path& out) { return out / "ldm.bin"; }
inline fs::path prompter_json(const fs::path& out) { return out / "prompter.json"; }
inline fs::path prompter_bin(const fs::path& out) { return out / "prompter.bin"; }
inline fs::path generated_path(const fs::path& out, std::uint64_t seed) {
    return out / "generated" / ("gen_" + std::to_string(seed) + ".bin");
}

inline TrajectorySet load_dataset_artifact(const PipelineConfig& cfg, const fs::path& out) {
    require_artifact(dataset_dir(out) / "dataset.json", "simulate");
    TrajectorySet data = load_dataset(dataset_dir(out).string());
    if (data.config_hash != dataset_config_hash(cfg.dataset))
        throw ConfigError("stored dataset was produced by a different dataset config; rerun simulate");
    return data;
}

inline Zoo load_zoo_artifact(const fs::path& out) {
    require_artifact(zoo_dir(out) / "zoo.json", "build-zoo");
    return load_zoo(zoo_dir(out).string());
}

// Records used for latent-model fitting: unflagged experts, with a fallback to
// everything when the gate rejected the whole zoo (mirrors the VAE's choice).
inline std::vector<const ExpertRecord*> usable_records(const Zoo& zoo) {
    std::vector<const ExpertRecord*> recs;
    for (const auto& r : zoo.records)
        if (!r.flagged) recs.push_back(&r);
    if (recs.empty())
        for (const auto& r : zoo.records) recs.push_back(&r);
    if (recs.empty()) throw ConfigError("zoo has no records");
    return recs;
}

// Surrogate label of one environment: mean prompter prediction over the frames
// of its first held-out trajectory (the pipeline's observable for unseen envs).
inline double surrogate_label_for_env(const Prompter& p, const TrajectorySet& data, int env_id) {
    const auto& trajs = data.test.at(env_id);
    if (trajs.empty()) throw ConfigError("no test trajectory to prompt for env " + std::to_string(env_id));
    const Trajectory& tr = trajs.front();
    double acc = 0.0;
    const int frames = tr.states.dim(0);
    for (int t = 0; t < frames; ++t) acc += predict_label(p, tr.frame(t));
    return acc / static_cast<double>(frames);
}

inline std::vector<EnvLabel> labels_for_envs(const PipelineConfig& cfg, const TrajectorySet& data,
                                             const Prompter* prompter) {
    std::vector<EnvLabel> labels;
    labels.reserve(data.envs.size());
    for (const EnvironmentSpec& env : data.envs) {
        EnvLabel l;
        l.mode = cfg.label_mode;
        if (cfg.label_mode == LabelMode::TrueEnv) {
            l.values = env.coeffs;
        } else {
            if (!prompter) throw ConfigError("surrogate labels need a fitted prompter");
            l.values = {surrogate_label_for_env(*prompter, data, env.id)};
        }
        labels.push_back(std::move(l));
    }
    return labels;
}

}  // namespace pipeline_detail

inline void run_simulate(const PipelineConfig& cfg, const std::filesystem::path& out) {
    namespace pd = pipeline_detail;
    std::filesystem::create_directories(out);
    TrajectorySet data = make_dataset(cfg.dataset);
    save_dataset(data, pd::dataset_dir(out).string());
    pd::write_stage_meta(out, "simulate", cfg, {"dataset"}, {"dataset"});
}

inline void run_build_zoo(const PipelineConfig& cfg, const std::filesystem::path& out) {
    namespace pd = pipeline_detail;
    TrajectorySet data = pd::load_dataset_artifact(cfg, out);
    Zoo zoo = build_zoo(data, cfg.arch, cfg.zoo);
    save_zoo(zoo, pd::zoo_dir(out).string());
    pd::write_stage_meta(out, "build-zoo", cfg, {"dataset", "arch", "zoo"}, {"zoo"});
}

inline void run_train_vae(const PipelineConfig& cfg, const std::filesystem::path& out) {
    namespace pd = pipeline_detail;
    TrajectorySet data = pd::load_dataset_artifact(cfg, out);
    Zoo zoo = pd::load_zoo_artifact(out);
    VaeTrainResult res = train_vae(zoo, data.probes, cfg.vae);
    res.model.provenance = cfg.hash();
    save_vae(res.model, pd::vae_path(out).string());
    pd::write_stage_meta(out, "train-vae", cfg, {"dataset", "arch", "zoo", "vae"}, {"vae.bin"});
}

inline void run_fit_prompter(const PipelineConfig& cfg, const std::filesystem::path& out) {
    namespace pd = pipeline_detail;
    if (!cfg.has_prompter) throw ConfigError("config has no prompter block");
    TrajectorySet data = pd::load_dataset_artifact(cfg, out);
    Zoo zoo = pd::load_zoo_artifact(out);
    Prompter p = fit_prompter(zoo, data, cfg.prompter);
    save_prompter(p, pd::prompter_json(out).string(), pd::prompter_bin(out).string());
    pd::write_stage_meta(out, "fit-prompter", cfg, {"dataset", "arch", "zoo", "prompter"},
                         {"prompter.json", "prompter.bin"});
}

inline void run_train_ldm(const PipelineConfig& cfg, const std::filesystem::path& out) {
    namespace pd = pipeline_detail;
    Zoo zoo = pd::load_zoo_artifact(out);
    pd::require_artifact(pd::vae_path(out), "train-vae");
    VaeModel vae = load_vae(pd::vae_path(out).string());

    // condition source per record
    std::map<int, std::vector<double>> env_label;
    if (cfg.label_mode == LabelMode::Surrogate) {
        pd::require_artifact(pd::prompter_json(out), "fit-prompter");
        Prompter p = load_prompter(pd::prompter_json(out).string(), pd::prompter_bin(out).string());
        for (std::size_t i = 0; i < p.env_ids.size(); ++i) env_label[p.env_ids[i]] = {p.labels[i]};
    } else {
        TrajectorySet data = pd::load_dataset_artifact(cfg, out);
        for (const EnvironmentSpec& env : data.envs) env_label[env.id] = env.coeffs;
    }

    const auto records = pd::usable_records(zoo);
    const int tokens = vae.tokens(), dz = vae.cfg.d_z;
    const int cdim = static_cast<int>(env_label.begin()->second.size());
    Tensor latents({static_cast<int>(records.size()), tokens, dz});
    Tensor labels({static_cast<int>(records.size()), cdim});
    for (std::size_t i = 0; i < records.size(); ++i) {
        const ExpertRecord& rec = *records[i];
        const auto it = env_label.find(rec.env_id);
        if (it == env_label.end())
            throw ConfigError("no condition label for env " + std::to_string(rec.env_id));
        Posterior post = vae_encode(vae, apply_normalizer(vae.normalizer, encode_graph(vae.arch, rec.w)));
        std::copy(post.mu.data(), post.mu.data() + post.mu.size(),
                  latents.data() + static_cast<std::int64_t>(i) * tokens * dz);
        for (int c = 0; c < cdim; ++c)
            labels[static_cast<std::int64_t>(i) * cdim + c] = static_cast<float>(it->second[static_cast<std::size_t>(c)]);
    }

    LdmTrainResult res = train_ldm(latents, labels, cfg.label_mode, cfg.ldm);
    res.model.provenance = cfg.hash();
    save_ldm(res.model, pd::ldm_path(out).string());
    pd::write_stage_meta(out, "train-ldm", cfg, {"arch", "zoo", "vae", "ldm"}, {"ldm.bin"});
}

inline void run_generate(const PipelineConfig& cfg, const std::filesystem::path& out) {
    namespace pd = pipeline_detail;
    TrajectorySet data = pd::load_dataset_artifact(cfg, out);
    pd::require_artifact(pd::vae_path(out), "train-vae");
    pd::require_artifact(pd::ldm_path(out), "train-ldm");
    VaeModel vae = load_vae(pd::vae_path(out).string());
    LdmModel ldm = load_ldm(pd::ldm_path(out).string());

    Prompter prompter;
    const Prompter* pp = nullptr;
    if (cfg.label_mode == LabelMode::Surrogate) {
        pd::require_artifact(pd::prompter_json(out), "fit-prompter");
        prompter = load_prompter(pd::prompter_json(out).string(), pd::prompter_bin(out).string());
        pp = &prompter;
    }
    std::vector<EnvLabel> labels = pd::labels_for_envs(cfg, data, pp);

    std::filesystem::create_directories(out / "generated");
    std::vector<std::string> outputs;
    for (std::uint64_t seed : cfg.generate_seeds) {
        std::vector<FlatWeights> ws = generate_experts(vae, ldm, labels, seed);
        GeneratedSet g;
        g.config_hash = cfg.hash();
        g.arch_id = vae.arch.arch_id();
        g.seed = seed;
        for (std::size_t i = 0; i < ws.size(); ++i) g.experts[data.envs[i].id] = std::move(ws[i]);
        const auto path = pd::generated_path(out, seed);
        save_generated(g, path.string());
        outputs.push_back("generated/" + path.filename().string());
    }
    pd::write_stage_meta(out, "generate", cfg, {"vae", "ldm", "generate"}, std::move(outputs));
}

inline EvalReport run_evaluate(const PipelineConfig& cfg, const std::filesystem::path& out) {
    namespace pd = pipeline_detail;
    TrajectorySet data = pd::load_dataset_artifact(cfg, out);
    Zoo zoo = pd::load_zoo_artifact(out);
    for (std::uint64_t seed : cfg.generate_seeds) pd::require_artifact(pd::generated_path(out, seed), "generate");

    EvalReport report;
    report.system = system_name(cfg.dataset.system);
    report.dataset_hash = data.config_hash;
    report.config_hash = cfg.hash();
    report.seeds = cfg.generate_seeds;

    std::vector<EvalRow> generated_rows;
    for (std::uint64_t seed : cfg.generate_seeds) {
        GeneratedSet g = load_generated(pd::generated_path(out, seed).string());
        if (g.arch_id != zoo.arch.arch_id()) throw ConfigError("generated experts use a different architecture");
        auto rows = eval_expert_map(zoo.arch, g.experts, data, EvalMethod::Generated, seed, cfg.with_ssim);
        generated_rows.insert(generated_rows.end(), rows.begin(), rows.end());
    }

    std::map<int, FlatWeights> per_env;
    for (int id : data.seen_ids()) per_env[id] = zoo.proxy(id).w;
    std::vector<EvalRow> oracle_rows =
        eval_expert_map(zoo.arch, per_env, data, EvalMethod::OnePerEnv, 0, cfg.with_ssim);

    TrainResult ofa = pretrain_global(data, zoo.arch, cfg.one_for_all);
    std::vector<EvalRow> ofa_rows = eval_one_for_all(zoo.arch, ofa.w, data, cfg.with_ssim);

    std::vector<EvalRow> truth_rows = eval_truth_sim(data, cfg.with_ssim);

    report.rows = generated_rows;
    report.rows.insert(report.rows.end(), oracle_rows.begin(), oracle_rows.end());
    report.rows.insert(report.rows.end(), ofa_rows.begin(), ofa_rows.end());
    report.rows.insert(report.rows.end(), truth_rows.begin(), truth_rows.end());
    report.summary = summarize_rows(report.rows);

    const auto eval_dir = out / "eval";
    std::filesystem::create_directories(eval_dir);
    const std::uint64_t dh = data.config_hash;
    std::map<std::string, std::vector<EvalRow>> by_file;
    by_file[eval_csv_filename(EvalMethod::Generated, dh, cfg.generate_seeds)] = generated_rows;
    by_file[eval_csv_filename(EvalMethod::OnePerEnv, dh, {})] = oracle_rows;
    by_file[eval_csv_filename(EvalMethod::OneForAll, dh, {})] = ofa_rows;
    by_file[eval_csv_filename(EvalMethod::TruthSim, dh, {})] = truth_rows;
    std::vector<std::string> outputs;
    for (const auto& [name, rows] : by_file) {
        write_eval_rows_csv(rows, (eval_dir / name).string());
        outputs.push_back("eval/" + name);
    }
    write_eval_summary_json(report, (eval_dir / "summary.json").string());
    outputs.push_back("eval/summary.json");

    nlohmann::json hashes = nlohmann::json::object();
    for (const auto& [name, rows] : by_file) {
        (void)rows;
        hashes[name] = hex64(file_fnv1a64(eval_dir / name));
    }
    hashes["summary.json"] = hex64(file_fnv1a64(eval_dir / "summary.json"));
    std::ofstream hs(eval_dir / "hashes.json", std::ios::binary);
    if (!hs) throw IoError("cannot write eval hashes");
    hs << hashes.dump(2) << '\n';
    outputs.push_back("eval/hashes.json");

    pd::write_stage_meta(out, "evaluate", cfg, {"dataset", "zoo", "generate", "evaluate"}, std::move(outputs));
    return report;
}

inline void run_distill(const PipelineConfig& cfg, const std::filesystem::path& out) {
    namespace pd = pipeline_detail;
    if (!cfg.has_distill) throw ConfigError("config has no distill block");
    TrajectorySet data = pd::load_dataset_artifact(cfg, out);
    const std::uint64_t seed = cfg.generate_seeds.front();
    pd::require_artifact(pd::generated_path(out, seed), "generate");
    GeneratedSet g = load_generated(pd::generated_path(out, seed).string());

    std::vector<int> env_ids = cfg.distill.env_ids;
    std::sort(env_ids.begin(), env_ids.end());
    std::filesystem::create_directories(out / "distill");
    std::ofstream os(out / "distill" / "distilled.csv", std::ios::binary);
    if (!os) throw IoError("cannot write distill report");
    os << "env_id,beta,delta,dim,c_1,c_x,c_y,c_xx,c_xy,c_yy,equation\n";
    for (int env_id : env_ids) {
        const auto it = g.experts.find(env_id);
        if (it == g.experts.end())
            throw ConfigError("distill: no generated expert for env " + std::to_string(env_id));
        const EnvironmentSpec& env = data.env(env_id);
        const Tensor ic = data.test.at(env_id).front().frame(0);
        SindyModel m = distill_expert(cfg.arch, it->second, ic, cfg.distill.steps, cfg.distill.dt,
                                      cfg.distill.stlsq);
        for (int dim = 0; dim < 2; ++dim) {
            os << env_id << ',' << eval_detail::fmt_double(env.coeffs[0]) << ','
               << eval_detail::fmt_double(env.coeffs[1]) << ',' << (dim == 0 ? "dx" : "dy");
            for (int k = 0; k < kSindyTerms; ++k)
                os << ',' << eval_detail::fmt_double(m.coeffs[static_cast<std::int64_t>(k) * 2 + dim]);
            os << ',' << sindy_equation(m.coeffs, dim) << '\n';
        }
    }
    os.close();
    pd::write_stage_meta(out, "distill", cfg, {"generate", "distill"}, {"distill/distilled.csv"});
}

// Dispatch by stage name; "all" runs every applicable stage in order.
// Returns the list of stages actually run.
inline std::vector<std::string> run_stage(const std::string& name, const PipelineConfig& cfg,
                                          const std::filesystem::path& out) {
    if (name == "simulate") {
        run_simulate(cfg, out);
    } else if (name == "build-zoo") {
        run_build_zoo(cfg, out);
    } else if (name == "train-vae") {
        run_train_vae(cfg, out);
    } else if (name == "train-ldm") {
        run_train_ldm(cfg, out);
    } else if (name == "fit-prompter") {
        run_fit_prompter(cfg, out);
    } else if (name == "generate") {
        run_generate(cfg, out);
    } else if (name == "evaluate") {
        run_evaluate(cfg, out);
    } else if (name == "distill") {
        run_distill(cfg, out);
    } else if (name == "all") {
        std::vector<std::string> plan = {"simulate", "build-zoo", "train-vae"};
        if (cfg.has_prompter) plan.push_back("fit-prompter");
        plan.push_back("train-ldm");
        plan.push_back("generate");
        plan.push_back("evaluate");
        if (cfg.has_distill) plan.push_back("distill");
        for (const std::string& stage : plan) run_stage(stage, cfg, out);
        return plan;
    } else {
        throw ConfigError("unknown stage: " + name);
    }
    return {name};
}

}  // namespace envgen
