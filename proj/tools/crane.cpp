// crane: a desk-scale laboratory for relevance-based identification of
// language-specific neurons in tiny decoder-only transformers, with masking
// interventions, LangSpec-F1 reporting and base-to-finetuned transfer.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "crane/stages.hpp"
#include "crane/verify.hpp"

namespace {

crane::PipelineConfig load_config(const std::string& path, const std::string& out_override,
                                  std::optional<std::uint64_t> seed_override, bool restrict_seeds) {
    nlohmann::json j = nlohmann::json::parse(crane::read_file(path), nullptr, false);
    if (j.is_discarded()) throw crane::ConfigError("config file '" + path + "' is not valid JSON");
    crane::PipelineConfig cfg = crane::pipeline_config_from_json(j);
    if (!out_override.empty()) cfg.output_dir = out_override;
    if (restrict_seeds && seed_override) {
        cfg.seeds = {*seed_override};
        cfg.validate();
    }
    return cfg;
}

int run_verify_metric(const std::string& input, double tolerance) {
    auto rows = crane::verify_metric_file(input, tolerance);
    int strict_total = 0, strict_pass = 0, noted = 0;
    std::printf("fixture %s (tolerance %.4g)\n", input.c_str(), tolerance);
    for (const auto& r : rows) {
        const char* status = r.strict ? (r.pass ? "PASS" : "FAIL") : (r.pass ? "noted-pass" : "noted");
        std::printf("  %-8s %-4s expected %.4f  recomputed %.6f  diff %.6f  %s\n", r.method.c_str(),
                    r.mask_lang.c_str(), r.expected, r.recomputed, std::abs(r.recomputed - r.expected),
                    status);
        if (r.strict) {
            ++strict_total;
            if (r.pass) ++strict_pass;
        } else {
            ++noted;
        }
    }
    std::printf("summary: %d/%d strict rows pass, %d noted rows\n", strict_pass, strict_total, noted);
    return strict_pass == strict_total ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CRANE workflow: corpus generation, model building and training, relevance "
                 "attribution, kurtosis-based neuron selection, masking interventions, transfer "
                 "analysis and LangSpec-F1 reporting"};
    app.require_subcommand(1);

    std::string config_path, out_dir, verify_input;
    std::optional<std::uint64_t> seed;
    double tolerance = 0.002;

    auto add_common = [&](CLI::App* cmd, bool needs_config = true) {
        if (needs_config)
            cmd->add_option("--config", config_path, "pipeline config JSON")->required();
        cmd->add_option("--seed", seed, "restrict to one run seed");
        cmd->add_option("--out", out_dir, "override the configured output directory");
    };

    CLI::App* cmd_run = app.add_subcommand("run", "execute every stage for every seed, then report");
    add_common(cmd_run);
    const char* stage_names[] = {"gen-corpus", "build-model", "train", "attribute",
                                 "select", "intervene", "transfer", "report"};
    const char* stage_help[] = {
        "generate per-language corpora, splits and cloze tasks",
        "build the (optionally planted) base model",
        "train the base model on the mixed corpus",
        "propagate relevance over identification samples and accumulate statistics",
        "compute normalized kurtosis and export neuron sets per method and language",
        "run the masking grid and write the per-seed report",
        "build the transfer destination model and evaluate transferred sets",
        "aggregate per-seed reports into the final report, summary and heatmaps"};
    for (int i = 0; i < 8; ++i) add_common(app.add_subcommand(stage_names[i], stage_help[i]));

    CLI::App* cmd_verify = app.add_subcommand(
        "verify-metric", "recompute LangSpec-F1 from published score fixtures and check it");
    cmd_verify->add_option("--input", verify_input, "fixture CSV")->required();
    cmd_verify->add_option("--tolerance", tolerance, "pass/fail tolerance (default 0.002)");

    CLI::App* cmd_init = app.add_subcommand("init-config", "write the default pipeline config");
    std::string init_path = "crane.config.json";
    cmd_init->add_option("--out", init_path, "destination path (default crane.config.json)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (cmd_verify->parsed()) return run_verify_metric(verify_input, tolerance);
        if (cmd_init->parsed()) {
            crane::atomic_write_file(
                init_path, crane::pipeline_config_to_json(crane::default_pipeline_config()).dump(2) + "\n");
            std::printf("wrote %s\n", init_path.c_str());
            return 0;
        }
        if (cmd_run->parsed()) {
            crane::PipelineConfig cfg = load_config(config_path, out_dir, seed, true);
            crane::RunManifest manifest = crane::run_pipeline(cfg);
            std::printf("run complete: %zu artifacts, config %s\n", manifest.artifacts.size(),
                        manifest.config_hash.c_str());
            return 0;
        }
        for (const char* stage : stage_names)
            if (app.get_subcommand(stage)->parsed()) {
                crane::PipelineConfig cfg = load_config(config_path, out_dir, std::nullopt, false);
                crane::Pipeline(cfg).run_stage(stage, seed);
                return 0;
            }
        std::fprintf(stderr, "no subcommand\n");
        return 2;
    } catch (const crane::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const crane::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "unexpected error: %s\n", e.what());
        return 3;
    }
}
