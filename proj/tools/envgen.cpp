// Command-line front end for the environment-conditioned weight-generation
// pipeline.  One subcommand per stage plus `all`; every run appends a log line
// file under <out>/logs/ so artifact directories stay free of timestamps.
//
// Exit codes: 0 success, 2 configuration error, 3 missing upstream artifact
// or unreadable input, 4 numerical failure.

#include <chrono>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "envgen/config.hpp"
#include "envgen/io.hpp"
#include "envgen/pipeline.hpp"

namespace {

enum class LogLevel { Debug = 0, Info = 1, Warn = 2 };

LogLevel parse_log_level(const std::string& s) {
    if (s == "debug") return LogLevel::Debug;
    if (s == "info") return LogLevel::Info;
    if (s == "warn") return LogLevel::Warn;
    throw envgen::ConfigError("log level must be debug, info, or warn, got " + s);
}

struct StageLogger {
    std::ofstream file;
    LogLevel level = LogLevel::Info;

    void open(const std::filesystem::path& out, const std::string& stage) {
        std::filesystem::create_directories(out / "logs");
        file.open(out / "logs" / (stage + ".log"), std::ios::app);
    }
    void line(LogLevel l, const std::string& msg) {
        if (l < level) return;
        std::cerr << msg << '\n';
        if (file) file << msg << '\n';
    }
};

int run(const std::string& stage, const std::string& config_path, const std::string& out_override, int jobs,
        bool has_seed_override, std::uint64_t seed_override, LogLevel level) {
    using namespace envgen;

    PipelineConfig cfg = load_pipeline_config(config_path);
    if (has_seed_override) apply_seed_override(cfg, seed_override);
    const std::filesystem::path out = out_override.empty() ? cfg.out_dir : out_override;

    StageLogger log;
    log.level = level;
    log.open(out, stage);
    log.line(LogLevel::Info, "[" + stage + "] config " + config_path + " hash " + hex64(cfg.hash()));
    log.line(LogLevel::Debug, "[" + stage + "] out " + out.string() + " jobs " + std::to_string(jobs) +
                                  " dataset seed " + std::to_string(cfg.dataset.seed));
    if (jobs != 1)
        log.line(LogLevel::Warn, "[" + stage + "] jobs " + std::to_string(jobs) +
                                     " requested; stages execute serially for reproducibility");

    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::string> ran = run_stage(stage, cfg, out);
    const auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    for (const std::string& s : ran) log.line(LogLevel::Debug, "[" + stage + "] ran " + s);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", dt);
    log.line(LogLevel::Info, "[" + stage + "] done: " + std::to_string(ran.size()) + " stage(s) in " + buf + " s");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"environment-conditioned generation of dynamical-system experts"};
    app.require_subcommand(1);

    std::string config_path, out_override, log_level = "info";
    int jobs = 1;
    std::uint64_t seed_override = 0;
    bool has_seed_override = false;

    app.add_option("--config", config_path, "pipeline configuration (JSON)")->required();
    app.add_option("--out", out_override, "artifact directory (overrides the config's out_dir)");
    app.add_option("--jobs", jobs, "worker hint; execution is serial either way")->check(CLI::PositiveNumber);
    CLI::Option* seed_opt = app.add_option("--seed-override", seed_override, "master seed replacing every stage seed");
    app.add_option("--log-level", log_level, "debug, info, or warn")
        ->check(CLI::IsMember({"debug", "info", "warn"}));

    const std::vector<std::pair<const char*, const char*>> stages = {
        {"simulate", "integrate the environment grid into a trajectory dataset"},
        {"build-zoo", "train one expert per seen environment"},
        {"train-vae", "fit the weight-graph autoencoder on the zoo"},
        {"train-ldm", "fit the conditional latent diffusion model"},
        {"fit-prompter", "fit the surrogate environment labeler"},
        {"generate", "sample experts for every environment"},
        {"evaluate", "roll out and score all methods"},
        {"distill", "extract sparse planar dynamics from generated experts"},
        {"all", "run every applicable stage in order"},
    };
    // options may appear after the stage name; they belong to the main app
    for (const auto& [name, desc] : stages) app.add_subcommand(name, desc)->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);  // prints help or the usage error
        return code == 0 ? 0 : 2;
    }
    has_seed_override = seed_opt->count() > 0;
    const std::string stage = app.get_subcommands().front()->get_name();

    try {
        return run(stage, config_path, out_override, jobs, has_seed_override, seed_override,
                   parse_log_level(log_level));
    } catch (const envgen::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const envgen::MissingArtifactError& e) {
        std::cerr << "missing artifact: " << e.what() << '\n';
        return 3;
    } catch (const envgen::IoError& e) {
        std::cerr << "io error: " << e.what() << '\n';
        return 3;
    } catch (const envgen::NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
