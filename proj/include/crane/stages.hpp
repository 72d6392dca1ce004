#pragma once

#include <chrono>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "crane/pipeline.hpp"
#include "crane/verify.hpp"

namespace crane {

// ----------------------------- manifest -----------------------------

struct RunManifest {
    std::string tool_version = kToolVersion;
    std::string config_hash;
    std::vector<std::uint64_t> seeds;
    std::map<std::string, std::string> artifacts;  // relative path -> content hash
    std::vector<std::string> stages;               // e.g. "attribute.seed3"

    nlohmann::json to_json() const {
        return {{"tool_version", tool_version},
                {"config_hash", config_hash},
                {"seeds", seeds},
                {"artifacts", artifacts},
                {"stages", stages}};
    }
};

// ----------------------------- stage runner -----------------------------

inline const std::vector<std::string>& per_seed_stages() {
    static const std::vector<std::string> s{"gen-corpus", "build-model", "train",
                                            "attribute", "select", "intervene", "transfer"};
    return s;
}

// Executes the stage graph against an output directory. Every stage writes a
// stamp (config hash + output hashes); a stage re-runs only when its stamp is
// missing, its config hash is stale, or any output no longer matches.
class Pipeline {
public:
    explicit Pipeline(PipelineConfig config)
        : cfg_(std::move(config)), out_(cfg_.output_dir), hash_(config_hash(cfg_)) {
        cfg_.validate();
    }

    const PipelineConfig& config() const { return cfg_; }
    const std::string& hash() const { return hash_; }
    const std::map<std::string, double>& timings() const { return timings_; }

    // Full run: all per-seed stages in order, then the aggregate report and
    // the manifest.
    RunManifest run() {
        write_canonical();
        RunManifest manifest;
        manifest.config_hash = hash_;
        manifest.seeds = cfg_.seeds;
        manifest.artifacts["config.canonical.json"] = file_hash_hex(out_ / "config.canonical.json");
        for (std::uint64_t seed : cfg_.seeds)
            for (const auto& stage : per_seed_stages()) {
                auto outputs = execute(stage, seed);
                manifest.stages.push_back(stage + ".seed" + std::to_string(seed));
                for (auto& [path, h] : outputs) manifest.artifacts[path] = h;
            }
        auto report_outputs = execute("report", std::nullopt);
        manifest.stages.push_back("report");
        for (auto& [path, h] : report_outputs) manifest.artifacts[path] = h;

        atomic_write_file(out_ / "manifest.json", manifest.to_json().dump(2) + "\n");
        nlohmann::json times;
        for (const auto& [k, v] : timings_) times[k] = v;
        atomic_write_file(out_ / "times.json", nlohmann::json{{"seconds", times}}.dump(2) + "\n");
        return manifest;
    }

    // Standalone stage entry (CLI subcommands). Per-seed stages run for every
    // configured seed unless one is pinned.
    void run_stage(const std::string& stage, std::optional<std::uint64_t> only_seed) {
        write_canonical();
        if (stage == "report") {
            execute("report", std::nullopt);
            return;
        }
        bool known = false;
        for (const auto& s : per_seed_stages()) known = known || s == stage;
        if (!known) throw ConfigError("unknown stage '" + stage + "'");
        for (std::uint64_t seed : cfg_.seeds) {
            if (only_seed && *only_seed != seed) continue;
            execute(stage, seed);
        }
    }

private:
    using Outputs = std::map<std::string, std::string>;  // relpath -> hash

    // ---- paths ----
    std::filesystem::path seed_dir(std::uint64_t seed) const {
        return out_ / ("seed" + std::to_string(seed));
    }
    std::string rel(const std::filesystem::path& p) const {
        return std::filesystem::relative(p, out_).generic_string();
    }
    std::filesystem::path stamp_path(const std::string& stage,
                                     std::optional<std::uint64_t> seed) const {
        std::string name = seed ? stage + ".seed" + std::to_string(*seed) : stage;
        return out_ / "stamps" / (name + ".json");
    }

    void write_canonical() { atomic_write_file(out_ / "config.canonical.json", canonical_config_json(cfg_)); }

    // ---- stamps ----
    std::optional<Outputs> stamped_outputs(const std::string& stage,
                                           std::optional<std::uint64_t> seed) const {
        std::filesystem::path sp = stamp_path(stage, seed);
        if (!std::filesystem::exists(sp)) return std::nullopt;
        nlohmann::json j = nlohmann::json::parse(read_file(sp), nullptr, false);
        if (j.is_discarded() || !j.contains("config_hash") || !j.contains("outputs"))
            return std::nullopt;
        if (j.at("config_hash").get<std::string>() != hash_) return std::nullopt;  // stale, never reuse
        Outputs outputs;
        for (const auto& [path, h] : j.at("outputs").items()) {
            std::filesystem::path full = out_ / path;
            if (!std::filesystem::exists(full)) return std::nullopt;
            if (file_hash_hex(full) != h.get<std::string>()) return std::nullopt;
            outputs[path] = h.get<std::string>();
        }
        return outputs;
    }

    void write_stamp(const std::string& stage, std::optional<std::uint64_t> seed,
                     const Outputs& outputs) {
        nlohmann::json j{{"config_hash", hash_}, {"outputs", outputs}};
        atomic_write_file(stamp_path(stage, seed), j.dump(2) + "\n");
    }

    Outputs execute(const std::string& stage, std::optional<std::uint64_t> seed) {
        std::string label = seed ? stage + ".seed" + std::to_string(*seed) : stage;
        if (auto cached = stamped_outputs(stage, seed)) {
            std::cerr << "[crane] " << label << ": cached\n";
            return *cached;
        }
        auto t0 = std::chrono::steady_clock::now();
        Outputs outputs;
        try {
            if (stage == "gen-corpus") outputs = run_gen_corpus(*seed);
            else if (stage == "build-model") outputs = run_build_model(*seed);
            else if (stage == "train") outputs = run_train(*seed);
            else if (stage == "attribute") outputs = run_attribute(*seed);
            else if (stage == "select") outputs = run_select(*seed);
            else if (stage == "intervene") outputs = run_intervene(*seed);
            else if (stage == "transfer") outputs = run_transfer(*seed);
            else if (stage == "report") outputs = run_report();
            else throw ConfigError("unknown stage '" + stage + "'");
        } catch (const Error&) {
            std::cerr << "[crane] " << label << ": FAILED\n";
            throw;
        }
        write_stamp(stage, seed, outputs);
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        timings_[label] = secs;
        std::cerr << "[crane] " << label << ": done (" << secs << "s)\n";
        return outputs;
    }

    std::string emit(Outputs& outputs, const std::filesystem::path& path, std::string_view data) {
        atomic_write_file(path, data);
        std::string h = file_hash_hex(path);
        outputs[rel(path)] = h;
        return h;
    }

    void require(const std::filesystem::path& path, const std::string& producing_stage) const {
        if (!std::filesystem::exists(path))
            throw InputError("missing stage artifact '" + path.generic_string() + "' — run '" +
                             producing_stage + "' first");
    }

    // ---- stage bodies ----

    Outputs run_gen_corpus(std::uint64_t seed) {
        Outputs outputs;
        std::filesystem::path dir = seed_dir(seed) / "corpus";
        int total = cfg_.identification.samples_per_language + cfg_.evaluation.heldout_samples;
        double fraction = static_cast<double>(cfg_.evaluation.heldout_samples) / total;
        for (std::size_t li = 0; li < cfg_.languages.size(); ++li) {
            const LanguageConfig& lc = cfg_.languages[li];
            LanguageSpec spec = cfg_.language_spec(lc);
            Corpus corpus = generate_corpus(spec, total, cfg_.evaluation.seq_len,
                                            derive_seed(seed, "gen-corpus", li));
            auto [train_split, heldout] = split_corpus(corpus, fraction, derive_seed(seed, "split", li));
            McTask task = make_mc_task(heldout, spec, cfg_.evaluation.mc_items_per_language,
                                       derive_seed(seed, "mc-task", li));
            emit(outputs, dir / (lc.id + ".train.txt"), corpus_to_text(train_split));
            emit(outputs, dir / (lc.id + ".heldout.txt"), corpus_to_text(heldout));
            emit(outputs, dir / (lc.id + ".task.json"), mc_task_to_json(task).dump(2) + "\n");
        }
        return outputs;
    }

    Outputs run_build_model(std::uint64_t seed) {
        Outputs outputs;
        std::filesystem::path dir = seed_dir(seed) / "model";
        std::uint64_t model_seed = derive_seed(seed, "build-model");
        if (cfg_.plant) {
            auto [weights, truth] =
                build_planted(cfg_.model, cfg_.plant_spec(), cfg_.language_ids(), model_seed);
            emit(outputs, dir / "base.crnw", serialize_model(weights));
            for (const auto& [lang, set] : truth)
                emit(outputs, dir / ("truth." + lang + ".neurons"), neuron_set_to_text(set));
        } else {
            emit(outputs, dir / "base.crnw", serialize_model(build_model(cfg_.model, model_seed)));
        }
        return outputs;
    }

    std::map<std::string, Corpus> load_train_corpora(std::uint64_t seed) const {
        std::map<std::string, Corpus> corpora;
        for (const auto& lc : cfg_.languages) {
            std::filesystem::path p = seed_dir(seed) / "corpus" / (lc.id + ".train.txt");
            require(p, "gen-corpus");
            corpora[lc.id] = read_corpus(p);
        }
        return corpora;
    }

    Corpus mixed_corpus(const std::map<std::string, Corpus>& corpora) const {
        Corpus mixed;
        mixed.language = "mixed";
        for (const auto& lc : cfg_.languages) {
            const Corpus& c = corpora.at(lc.id);
            mixed.samples.insert(mixed.samples.end(), c.samples.begin(), c.samples.end());
        }
        return mixed;
    }

    Outputs run_train(std::uint64_t seed) {
        Outputs outputs;
        std::filesystem::path base_path = seed_dir(seed) / "model" / "base.crnw";
        require(base_path, "build-model");
        ModelWeights base = read_model(base_path);
        if (!cfg_.train.enabled) {
            emit(outputs, seed_dir(seed) / "model" / "trained.crnw", serialize_model(base));
            return outputs;
        }
        Corpus mixed = mixed_corpus(load_train_corpora(seed));
        TrainConfig tc;
        tc.lr = cfg_.train.lr;
        tc.steps = cfg_.train.steps;
        tc.batch = cfg_.train.batch;
        tc.seed = derive_seed(seed, "train");
        ModelWeights trained = train(base, mixed, tc);
        emit(outputs, seed_dir(seed) / "model" / "trained.crnw", serialize_model(trained));
        return outputs;
    }

    AttributionOptions attribution_options() const {
        AttributionOptions opt;
        opt.epsilon = cfg_.identification.epsilon;
        opt.aggregation = cfg_.identification.aggregation == "abs" ? TokenAggregation::abs_sum
                                                                   : TokenAggregation::signed_sum;
        opt.objective = cfg_.identification.objective == "logprob"
                            ? ObjectiveKind::gold_logprob_sum
                            : ObjectiveKind::gold_logit_sum;
        return opt;
    }

    Outputs run_attribute(std::uint64_t seed) {
        Outputs outputs;
        std::filesystem::path model_path = seed_dir(seed) / "model" / "trained.crnw";
        require(model_path, "train");
        ModelWeights weights = read_model(model_path);
        std::map<std::string, Corpus> corpora = load_train_corpora(seed);
        IdentificationResult result = identify(weights, corpora, attribution_options(),
                                               cfg_.identification.dump_relevance);
        emit(outputs, seed_dir(seed) / "stats" / "identification.crna",
             serialize_stats(result.rel, result.act));
        if (cfg_.identification.dump_relevance)
            for (const auto& [lang, body] : result.dumps)
                emit(outputs, seed_dir(seed) / "relevance" / (lang + ".crnr"),
                     relevance_dump_header(weights.layout()) + body);
        return outputs;
    }

    Outputs run_select(std::uint64_t seed) {
        Outputs outputs;
        std::filesystem::path stats_path = seed_dir(seed) / "stats" / "identification.crna";
        require(stats_path, "attribute");
        auto [rel_acc, act_acc] = deserialize_stats(read_file(stats_path));

        KurtosisTable table = normalize_layerwise(kurtosis_table(rel_acc));
        emit(outputs, seed_dir(seed) / "stats" / "kurtosis.csv", kurtosis_csv(table));

        SelectionConfig sel;
        sel.threshold = cfg_.selection.threshold;
        sel.budget = cfg_.selection.budget;
        for (const auto& method : cfg_.selection.methods) {
            for (std::size_t li = 0; li < cfg_.languages.size(); ++li) {
                const std::string& lang = cfg_.languages[li].id;
                std::uint64_t sel_seed = derive_seed(seed, "select:" + method, li);
                NeuronSet set;
                if (method == "crane")
                    set = crane_select(table, lang, sel);
                else if (method == "lape")
                    set = lape_select(act_acc, lang, sel);
                else
                    set = random_select(rel_acc.layout(), sel, sel_seed);
                set.target_language = lang;
                std::filesystem::path base = seed_dir(seed) / "sets" / (method + "." + lang);
                emit(outputs, base.string() + ".neurons", neuron_set_to_text(set));
                SelectionSidecar side{method, lang, sel.threshold, sel.budget, sel_seed};
                emit(outputs, base.string() + ".json", sidecar_to_json(side).dump(2) + "\n");
            }
        }
        return outputs;
    }

    EvalTasks load_tasks(std::uint64_t seed) const {
        EvalTasks tasks;
        for (const auto& lc : cfg_.languages) {
            std::filesystem::path task_path = seed_dir(seed) / "corpus" / (lc.id + ".task.json");
            std::filesystem::path held_path = seed_dir(seed) / "corpus" / (lc.id + ".heldout.txt");
            require(task_path, "gen-corpus");
            require(held_path, "gen-corpus");
            tasks.languages.push_back(lc.id);
            nlohmann::json j = nlohmann::json::parse(read_file(task_path), nullptr, false);
            if (j.is_discarded())
                throw FormatError(task_path.filename().string() + ": unparsable task json");
            tasks.mc[lc.id] = mc_task_from_json(j, task_path.filename().string());
            tasks.heldout[lc.id] = read_corpus(held_path);
        }
        return tasks;
    }

    NeuronSetMap load_sets(std::uint64_t seed) const {
        NeuronSetMap sets;
        for (const auto& method : cfg_.selection.methods)
            for (const auto& lc : cfg_.languages) {
                std::filesystem::path base = seed_dir(seed) / "sets" / (method + "." + lc.id);
                std::filesystem::path ids_path = base.string() + ".neurons";
                std::filesystem::path side_path = base.string() + ".json";
                require(ids_path, "select");
                require(side_path, "select");
                nlohmann::json j = nlohmann::json::parse(read_file(side_path), nullptr, false);
                if (j.is_discarded())
                    throw FormatError(side_path.filename().string() + ": unparsable sidecar");
                SelectionSidecar side = sidecar_from_json(j);
                NeuronSet set;
                set.ids = read_neuron_ids(ids_path);
                set.method = method_from_name(side.method);
                set.target_language = side.target;
                set.budget = side.budget;
                set.normalize();
                sets[{method, lc.id}] = std::move(set);
            }
        return sets;
    }

    Outputs emit_report(Outputs& outputs, std::uint64_t seed, const std::string& name,
                        const EvalReport& report) {
        std::filesystem::path dir = seed_dir(seed) / "reports";
        emit(outputs, dir / (name + ".csv"), report_csv(report));
        emit(outputs, dir / (name + ".summary.json"),
             report_summary_json(report, {seed}).dump(2) + "\n");
        emit(outputs, dir / (name + ".heatmap.csv"), heatmap_csv(report));
        return outputs;
    }

    Outputs run_intervene(std::uint64_t seed) {
        Outputs outputs;
        std::filesystem::path model_path = seed_dir(seed) / "model" / "trained.crnw";
        require(model_path, "train");
        ModelWeights weights = read_model(model_path);
        EvalReport report = run_intervention_grid(weights, load_sets(seed), load_tasks(seed),
                                                  cfg_.evaluation.epsilon);
        emit_report(outputs, seed, "intervene", report);
        return outputs;
    }

    Outputs run_transfer(std::uint64_t seed) {
        Outputs outputs;
        if (!cfg_.transfer.enabled) return outputs;
        std::filesystem::path model_path = seed_dir(seed) / "model" / "trained.crnw";
        require(model_path, "train");
        ModelWeights source = read_model(model_path);

        ModelWeights destination = source;
        if (cfg_.transfer.mode == "finetune") {
            Corpus mixed = mixed_corpus(load_train_corpora(seed));
            TrainConfig tc;
            tc.lr = cfg_.transfer.lr;
            tc.steps = cfg_.transfer.steps;
            tc.batch = cfg_.train.batch;
            tc.seed = derive_seed(seed, "transfer-finetune");
            destination = train(source, mixed, tc);
        } else {
            Rng rng(derive_seed(seed, "transfer-perturb"));
            for_each_tensor(destination, [&](std::string_view, std::vector<double>& t) {
                for (double& v : t) v += rng.normal(0.0, cfg_.transfer.sigma);
            });
        }
        emit(outputs, seed_dir(seed) / "model" / "transfer.crnw", serialize_model(destination));

        EvalReport report = transfer_eval(load_sets(seed), source.config, destination,
                                          load_tasks(seed), cfg_.evaluation.epsilon);
        emit_report(outputs, seed, "transfer", report);
        return outputs;
    }

    // ---- aggregate report ----

    struct ParsedRow {
        std::string method, mask_lang, task, language;
        double original, masked, delta, clamped;
    };

    static std::vector<ParsedRow> parse_report_csv(const std::string& text, const std::string& what) {
        std::vector<ParsedRow> rows;
        auto lines = split(text, '\n');
        if (lines.empty() || lines[0] != "method,mask_lang,task,language,original,masked,delta,clamped_delta")
            throw FormatError(what + ":1: unexpected report header");
        for (std::size_t i = 1; i < lines.size(); ++i) {
            if (trim(lines[i]).empty()) continue;
            auto f = split(lines[i], ',');
            if (f.size() != 8)
                throw FormatError(what + ":" + std::to_string(i + 1) + ": expected 8 fields");
            std::string at = what + ":" + std::to_string(i + 1);
            rows.push_back({f[0], f[1], f[2], f[3], parse_double(f[4], at), parse_double(f[5], at),
                            parse_double(f[6], at), parse_double(f[7], at)});
        }
        return rows;
    }

    Outputs run_report() {
        Outputs outputs;
        std::string combined = "seed,tag,method,mask_lang,task,language,original,masked,delta,clamped_delta\n";
        // (tag, method, mask_lang, task_kind) -> seed -> f1 triple
        std::map<std::string, std::map<std::string, std::map<std::string, std::vector<double>>>> summary_acc;
        // heatmap means per tag
        std::map<std::string, std::map<std::pair<std::string, std::string>, std::map<std::string, double>>> heat;
        std::map<std::string, std::vector<std::string>> heat_columns;

        double epsilon = cfg_.evaluation.epsilon;
        int budget = cfg_.selection.budget;
        std::vector<std::string> tags{"intervene"};
        if (cfg_.transfer.enabled) tags.push_back("transfer");

        for (std::uint64_t seed : cfg_.seeds)
            for (const auto& tag : tags) {
                std::filesystem::path csv_path = seed_dir(seed) / "reports" / (tag + ".csv");
                std::filesystem::path sum_path = seed_dir(seed) / "reports" / (tag + ".summary.json");
                require(csv_path, tag == "transfer" ? "transfer" : "intervene");
                require(sum_path, tag == "transfer" ? "transfer" : "intervene");
                auto rows = parse_report_csv(read_file(csv_path), csv_path.filename().string());
                for (const auto& r : rows) {
                    combined += std::to_string(seed) + "," + tag + "," + r.method + "," + r.mask_lang +
                                "," + r.task + "," + r.language + "," + fmt_double(r.original) + "," +
                                fmt_double(r.masked) + "," + fmt_double(r.delta) + "," +
                                fmt_double(r.clamped) + "\n";
                    if (r.method != "org") {
                        std::string col = r.task + ":" + r.language;
                        auto& cols = heat_columns[tag];
                        if (std::find(cols.begin(), cols.end(), col) == cols.end()) cols.push_back(col);
                        heat[tag][{r.method, r.mask_lang}][col] += r.clamped / static_cast<double>(cfg_.seeds.size());
                    }
                }
                nlohmann::json sj = nlohmann::json::parse(read_file(sum_path), nullptr, false);
                if (sj.is_discarded())
                    throw FormatError(sum_path.filename().string() + ": unparsable summary");
                for (const auto& row : sj.at("summaries")) {
                    std::string key = row.at("method").get<std::string>() + "\t" +
                                      row.at("mask_lang").get<std::string>() + "\t" +
                                      row.at("task_kind").get<std::string>();
                    auto& triple = summary_acc[tag][key][std::to_string(seed)];
                    triple = {row.at("precision").get<double>(), row.at("recall").get<double>(),
                              row.at("langspec_f1").get<double>()};
                }
            }

        emit(outputs, out_ / "final" / "report.csv", combined);

        nlohmann::json final_summary{{"tool_version", kToolVersion},
                                     {"config_hash", hash_},
                                     {"epsilon", epsilon},
                                     {"budget", budget},
                                     {"seeds", cfg_.seeds}};
        for (const auto& tag : tags) {
            nlohmann::json rows = nlohmann::json::array();
            for (const auto& [key, per_seed] : summary_acc[tag]) {
                auto parts = split(key, '\t');
                nlohmann::json per;
                double mean_p = 0, mean_r = 0, mean_f = 0;
                for (const auto& [s, triple] : per_seed) {
                    per[s] = {{"precision", triple[0]}, {"recall", triple[1]}, {"langspec_f1", triple[2]}};
                    mean_p += triple[0];
                    mean_r += triple[1];
                    mean_f += triple[2];
                }
                double n = static_cast<double>(per_seed.size());
                rows.push_back({{"method", parts[0]},
                                {"mask_lang", parts[1]},
                                {"task_kind", parts[2]},
                                {"per_seed", per},
                                {"mean_precision", mean_p / n},
                                {"mean_recall", mean_r / n},
                                {"mean_langspec_f1", mean_f / n}});
            }
            final_summary[tag] = rows;
        }
        emit(outputs, out_ / "final" / "summary.json", final_summary.dump(2) + "\n");

        for (const auto& tag : tags) {
            std::string csv = "method,mask_lang";
            for (const auto& c : heat_columns[tag]) csv += "," + c;
            csv += "\n";
            for (const auto& [key, cells] : heat[tag]) {
                csv += key.first + "," + key.second;
                for (const auto& c : heat_columns[tag]) {
                    auto it = cells.find(c);
                    csv += "," + (it == cells.end() ? std::string("") : fmt_double(it->second));
                }
                csv += "\n";
            }
            emit(outputs, out_ / "final" / (tag == "intervene" ? "heatmap.csv" : "transfer_heatmap.csv"),
                 csv);
        }
        return outputs;
    }

    PipelineConfig cfg_;
    std::filesystem::path out_;
    std::string hash_;
    std::map<std::string, double> timings_;
};

inline RunManifest run_pipeline(const PipelineConfig& config) { return Pipeline(config).run(); }

}  // namespace crane
