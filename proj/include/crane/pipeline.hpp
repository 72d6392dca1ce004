#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "crane/attribution.hpp"
#include "crane/corpus.hpp"
#include "crane/errors.hpp"
#include "crane/evaluation.hpp"
#include "crane/model.hpp"
#include "crane/plant.hpp"
#include "crane/specialization.hpp"
#include "crane/train.hpp"
#include "crane/util.hpp"

namespace crane {

inline constexpr const char* kToolVersion = "crane 1.0.0";

// ----------------------------- configuration -----------------------------

struct LanguageConfig {
    std::string id;
    int lo = 0;
    int hi = 0;
    std::string grammar = "markov";  // markov | bracket
    double zipf_s = 1.0;
    double jitter = 1.0;         // markov row perturbation
    int depth_limit = 6;         // bracket nesting bound
    int regime_tokens = 8;       // rare closed block at the top of the range
    double regime_prob = 0.07;   // per-sample probability of the rare regime
    std::uint64_t seed = 0;      // structural seed (fixed across run seeds)
};

struct PlantConfig {
    int neurons_per_language = 16;
    double gain = 3.0;
    double repel = 0.5;
    double down_gain = 0.2;
    double unembed_scale = 25.0;
    int boost_group = 8;
};

struct PipelineConfig {
    ModelConfig model;
    std::optional<PlantConfig> plant;
    std::vector<LanguageConfig> languages;
    bool allow_vocab_overlap = false;

    struct {
        int samples_per_language = 2048;
        double epsilon = 1e-9;           // LRP stabilizer
        std::string aggregation = "signed";  // signed | abs
        std::string objective = "logit";     // logit | logprob
        int min_samples = 256;
        bool dump_relevance = false;
    } identification;

    struct {
        double threshold = 1.0;
        int budget = 16;
        std::vector<std::string> methods{"crane", "lape", "random"};
    } selection;

    struct {
        int mc_items_per_language = 256;
        int heldout_samples = 256;
        int seq_len = 32;
        double epsilon = 1e-9;  // metric stabilizer (Eqs. accounting)
    } evaluation;

    struct {
        bool enabled = true;
        int steps = 300;
        double lr = 0.5;
        int batch = 16;
    } train;

    struct {
        bool enabled = true;
        std::string mode = "finetune";  // finetune | perturb
        int steps = 200;
        double lr = 0.2;
        double sigma = 0.02;
    } transfer;

    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::string output_dir = "out";

    std::vector<std::string> language_ids() const {
        std::vector<std::string> ids;
        for (const auto& l : languages) ids.push_back(l.id);
        return ids;
    }

    void validate() const {
        model.validate();
        if (languages.empty()) throw ConfigError("config: at least one language required");
        if (seeds.empty()) throw ConfigError("config: seeds must be non-empty");
        for (std::size_t i = 0; i < languages.size(); ++i) {
            const auto& l = languages[i];
            if (l.id.empty()) throw ConfigError("config: language id must be non-empty");
            if (l.lo < 0 || l.hi > model.vocab_size || l.hi - l.lo < 4)
                throw ConfigError("config: language '" + l.id + "' range invalid for vocab");
            if (l.grammar != "markov" && l.grammar != "bracket")
                throw ConfigError("config: language '" + l.id + "' has unknown grammar '" + l.grammar + "'");
            for (std::size_t j = 0; j < i; ++j) {
                if (languages[j].id == l.id)
                    throw ConfigError("config: duplicate language id '" + l.id + "'");
                if (!allow_vocab_overlap && l.lo < languages[j].hi && languages[j].lo < l.hi)
                    throw ConfigError("config: language vocab ranges overlap ('" + l.id + "', '" +
                                      languages[j].id + "')");
            }
        }
        for (const auto& m : selection.methods)
            if (m != "crane" && m != "lape" && m != "random")
                throw ConfigError("config: unknown selection method '" + m + "'");
        if (selection.methods.empty()) throw ConfigError("config: methods must be non-empty");
        if (selection.budget < 0 || selection.budget > model.neuron_count())
            throw ConfigError("config: budget outside [0, N]");
        if (identification.samples_per_language < identification.min_samples)
            throw ConfigError("config: samples_per_language below min_samples (" +
                              std::to_string(identification.min_samples) + ")");
        if (identification.epsilon < 0.0) throw ConfigError("config: identification epsilon < 0");
        if (identification.aggregation != "signed" && identification.aggregation != "abs")
            throw ConfigError("config: aggregation must be 'signed' or 'abs'");
        if (identification.objective != "logit" && identification.objective != "logprob")
            throw ConfigError("config: objective must be 'logit' or 'logprob'");
        if (evaluation.mc_items_per_language < 1 || evaluation.heldout_samples < 1)
            throw ConfigError("config: evaluation sizes must be >= 1");
        if (evaluation.seq_len < 2 || evaluation.seq_len > model.max_seq_len)
            throw ConfigError("config: seq_len must lie in [2, max_seq_len]");
        if (evaluation.epsilon <= 0.0) throw ConfigError("config: evaluation epsilon must be > 0");
        if (train.enabled && (train.steps < 0 || train.batch < 1))
            throw ConfigError("config: bad train block");
        if (transfer.enabled && transfer.mode != "finetune" && transfer.mode != "perturb")
            throw ConfigError("config: transfer mode must be 'finetune' or 'perturb'");
        if (plant) {
            PlantSpec spec = plant_spec();
            spec.validate(model, languages.size());
        }
    }

    PlantSpec plant_spec() const {
        PlantSpec spec;
        if (plant) {
            spec.neurons_per_language = plant->neurons_per_language;
            spec.gain = plant->gain;
            spec.repel = plant->repel;
            spec.down_gain = plant->down_gain;
            spec.unembed_scale = plant->unembed_scale;
            spec.boost_group = plant->boost_group;
        }
        for (const auto& l : languages) {
            spec.vocab_ranges.push_back({l.lo, l.hi});
            spec.rare_tokens.push_back(l.regime_tokens);
        }
        return spec;
    }

    LanguageSpec language_spec(const LanguageConfig& l) const {
        if (l.grammar == "markov")
            return make_markov_language(l.id, l.lo, l.hi, l.zipf_s, l.jitter, l.regime_tokens,
                                        l.regime_prob, l.seed);
        return make_bracket_language(l.id, l.lo, l.hi, l.zipf_s, l.depth_limit, l.regime_tokens,
                                     l.regime_prob, l.seed);
    }
};

inline nlohmann::json pipeline_config_to_json(const PipelineConfig& c) {
    nlohmann::json langs = nlohmann::json::array();
    for (const auto& l : c.languages)
        langs.push_back({{"id", l.id},
                         {"lo", l.lo},
                         {"hi", l.hi},
                         {"grammar", l.grammar},
                         {"zipf_s", l.zipf_s},
                         {"jitter", l.jitter},
                         {"depth_limit", l.depth_limit},
                         {"regime_tokens", l.regime_tokens},
                         {"regime_prob", l.regime_prob},
                         {"seed", l.seed}});
    nlohmann::json plant;
    if (c.plant)
        plant = {{"neurons_per_language", c.plant->neurons_per_language},
                 {"gain", c.plant->gain},
                 {"repel", c.plant->repel},
                 {"down_gain", c.plant->down_gain},
                 {"unembed_scale", c.plant->unembed_scale},
                 {"boost_group", c.plant->boost_group}};
    return {{"model", config_to_json(c.model)},
            {"plant", plant},
            {"languages", langs},
            {"allow_vocab_overlap", c.allow_vocab_overlap},
            {"identification",
             {{"samples_per_language", c.identification.samples_per_language},
              {"epsilon", c.identification.epsilon},
              {"aggregation", c.identification.aggregation},
              {"objective", c.identification.objective},
              {"min_samples", c.identification.min_samples},
              {"dump_relevance", c.identification.dump_relevance}}},
            {"selection",
             {{"threshold", c.selection.threshold},
              {"budget", c.selection.budget},
              {"methods", c.selection.methods}}},
            {"evaluation",
             {{"mc_items_per_language", c.evaluation.mc_items_per_language},
              {"heldout_samples", c.evaluation.heldout_samples},
              {"seq_len", c.evaluation.seq_len},
              {"epsilon", c.evaluation.epsilon}}},
            {"train",
             {{"enabled", c.train.enabled},
              {"steps", c.train.steps},
              {"lr", c.train.lr},
              {"batch", c.train.batch}}},
            {"transfer",
             {{"enabled", c.transfer.enabled},
              {"mode", c.transfer.mode},
              {"steps", c.transfer.steps},
              {"lr", c.transfer.lr},
              {"sigma", c.transfer.sigma}}},
            {"seeds", c.seeds},
            {"output_dir", c.output_dir}};
}

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
    PipelineConfig c;
    try {
        c.model = config_from_json(j.at("model"));
        if (j.contains("plant") && !j.at("plant").is_null() && !j.at("plant").empty()) {
            const auto& p = j.at("plant");
            PlantConfig pc;
            pc.neurons_per_language = p.value("neurons_per_language", pc.neurons_per_language);
            pc.gain = p.value("gain", pc.gain);
            pc.repel = p.value("repel", pc.repel);
            pc.down_gain = p.value("down_gain", pc.down_gain);
            pc.unembed_scale = p.value("unembed_scale", pc.unembed_scale);
            pc.boost_group = p.value("boost_group", pc.boost_group);
            c.plant = pc;
        }
        c.languages.clear();
        for (const auto& lj : j.at("languages")) {
            LanguageConfig l;
            l.id = lj.at("id").get<std::string>();
            l.lo = lj.at("lo").get<int>();
            l.hi = lj.at("hi").get<int>();
            l.grammar = lj.value("grammar", l.grammar);
            l.zipf_s = lj.value("zipf_s", l.zipf_s);
            l.jitter = lj.value("jitter", l.jitter);
            l.depth_limit = lj.value("depth_limit", l.depth_limit);
            l.regime_tokens = lj.value("regime_tokens", l.regime_tokens);
            l.regime_prob = lj.value("regime_prob", l.regime_prob);
            l.seed = lj.value("seed", l.seed);
            c.languages.push_back(l);
        }
        c.allow_vocab_overlap = j.value("allow_vocab_overlap", c.allow_vocab_overlap);
        if (j.contains("identification")) {
            const auto& p = j.at("identification");
            c.identification.samples_per_language =
                p.value("samples_per_language", c.identification.samples_per_language);
            c.identification.epsilon = p.value("epsilon", c.identification.epsilon);
            c.identification.aggregation = p.value("aggregation", c.identification.aggregation);
            c.identification.objective = p.value("objective", c.identification.objective);
            c.identification.min_samples = p.value("min_samples", c.identification.min_samples);
            c.identification.dump_relevance = p.value("dump_relevance", c.identification.dump_relevance);
        }
        if (j.contains("selection")) {
            const auto& p = j.at("selection");
            c.selection.threshold = p.value("threshold", c.selection.threshold);
            c.selection.budget = p.value("budget", c.selection.budget);
            if (p.contains("methods")) c.selection.methods = p.at("methods").get<std::vector<std::string>>();
        }
        if (j.contains("evaluation")) {
            const auto& p = j.at("evaluation");
            c.evaluation.mc_items_per_language =
                p.value("mc_items_per_language", c.evaluation.mc_items_per_language);
            c.evaluation.heldout_samples = p.value("heldout_samples", c.evaluation.heldout_samples);
            c.evaluation.seq_len = p.value("seq_len", c.evaluation.seq_len);
            c.evaluation.epsilon = p.value("epsilon", c.evaluation.epsilon);
        }
        if (j.contains("train")) {
            const auto& p = j.at("train");
            c.train.enabled = p.value("enabled", c.train.enabled);
            c.train.steps = p.value("steps", c.train.steps);
            c.train.lr = p.value("lr", c.train.lr);
            c.train.batch = p.value("batch", c.train.batch);
        }
        if (j.contains("transfer")) {
            const auto& p = j.at("transfer");
            c.transfer.enabled = p.value("enabled", c.transfer.enabled);
            c.transfer.mode = p.value("mode", c.transfer.mode);
            c.transfer.steps = p.value("steps", c.transfer.steps);
            c.transfer.lr = p.value("lr", c.transfer.lr);
            c.transfer.sigma = p.value("sigma", c.transfer.sigma);
        }
        if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        c.output_dir = j.value("output_dir", c.output_dir);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

// Canonical form used for hashing and resumability; the output location does
// not change what is computed, so it is normalized out.
inline std::string canonical_config_json(const PipelineConfig& c) {
    nlohmann::json j = pipeline_config_to_json(c);
    j["output_dir"] = "";
    return j.dump(2) + "\n";
}

inline std::string config_hash(const PipelineConfig& c) {
    return to_hex(fnv1a64(canonical_config_json(c)));
}

// The default desk-scale experiment: three synthetic languages over a planted
// model, trained briefly, with all three selectors under one budget.
inline PipelineConfig default_pipeline_config() {
    PipelineConfig c;
    c.languages = {
        {"L1", 0, 32, "markov", 1.0, 1.0, 6, 8, 0.07, 11},
        {"L2", 32, 64, "markov", 1.3, 1.2, 6, 8, 0.07, 22},
        {"L3", 64, 96, "bracket", 1.2, 1.0, 6, 8, 0.07, 33},
    };
    c.plant = PlantConfig{};
    c.plant->neurons_per_language = 16;
    c.selection.budget = 16;
    return c;
}

// ----------------------------- task files -----------------------------

inline nlohmann::json mc_task_to_json(const McTask& task) {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& it : task.items)
        items.push_back({{"prefix", it.prefix},
                         {"gold", it.gold},
                         {"distractors", std::vector<int>{it.distractors[0], it.distractors[1],
                                                          it.distractors[2]}}});
    return {{"language", task.language}, {"items", items}};
}

inline McTask mc_task_from_json(const nlohmann::json& j, const std::string& what) {
    McTask task;
    try {
        task.language = j.at("language").get<std::string>();
        for (const auto& ij : j.at("items")) {
            McItem item;
            item.prefix = ij.at("prefix").get<std::vector<int>>();
            item.gold = ij.at("gold").get<int>();
            auto d = ij.at("distractors").get<std::vector<int>>();
            if (d.size() != 3) throw FormatError(what + ": item needs exactly 3 distractors");
            item.distractors = {d[0], d[1], d[2]};
            task.items.push_back(std::move(item));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(what + ": " + e.what());
    }
    return task;
}

// ----------------------------- relevance dump -----------------------------
// Optional per-sample record stream: "CRNR", version, layout, then one record
// per sample (language, objective, N float64 values, layer-major).

inline constexpr char kRelevanceMagic[4] = {'C', 'R', 'N', 'R'};
inline constexpr std::uint32_t kRelevanceVersion = 1;

inline std::string relevance_dump_header(const NeuronLayout& layout) {
    std::string out;
    out.append(kRelevanceMagic, 4);
    put_u32_le(out, kRelevanceVersion);
    put_u32_le(out, static_cast<std::uint32_t>(layout.n_layers));
    put_u32_le(out, static_cast<std::uint32_t>(layout.d_mlp));
    return out;
}

inline void relevance_dump_append(std::string& out, const RelevanceVector& rel) {
    put_u32_le(out, static_cast<std::uint32_t>(rel.language.size()));
    out += rel.language;
    put_f64_le(out, rel.objective_value);
    for (double v : rel.values) put_f64_le(out, v);
}

inline std::vector<RelevanceVector> read_relevance_dump(const std::filesystem::path& path) {
    std::string data = read_file(path);
    ByteReader r(data, path.filename().string());
    if (r.bytes(4) != std::string(kRelevanceMagic, 4))
        throw FormatError(path.filename().string() + ": bad magic");
    if (r.u32() != kRelevanceVersion) throw FormatError(path.filename().string() + ": bad version");
    NeuronLayout layout{static_cast<int>(r.u32()), static_cast<int>(r.u32())};
    std::vector<RelevanceVector> out;
    while (!r.at_end()) {
        RelevanceVector rel;
        std::uint32_t len = r.u32();
        rel.language = r.bytes(len);
        rel.objective_value = r.f64();
        rel.values.resize(static_cast<std::size_t>(layout.total()));
        for (double& v : rel.values) v = r.f64();
        out.push_back(std::move(rel));
    }
    return out;
}

// ----------------------------- identification -----------------------------

inline int crane_workers() {
    if (const char* env = std::getenv("CRANE_WORKERS")) {
        long v = std::strtol(env, nullptr, 10);
        if (v >= 1 && v <= 64) return static_cast<int>(v);
    }
    unsigned hw = std::thread::hardware_concurrency();
    return static_cast<int>(std::min<unsigned>(std::max<unsigned>(hw, 1), 8));
}

struct IdentificationResult {
    RelevanceAccumulator rel;
    ActivationAccumulator act;
    std::map<std::string, std::string> dumps;  // language -> dump bytes (optional)
};

// Fans samples out over fixed 64-sample shards; each shard owns its
// accumulators, merged in shard order afterwards, so results are
// byte-identical for any worker count.
inline IdentificationResult identify(const ModelWeights& weights,
                                     const std::map<std::string, Corpus>& corpora,
                                     const AttributionOptions& opt, bool dump_relevance) {
    std::vector<std::string> languages;
    for (const auto& [lang, corpus] : corpora) languages.push_back(lang);
    NeuronLayout layout = weights.layout();

    struct Shard {
        const Corpus* corpus;
        std::size_t begin, end;
    };
    constexpr std::size_t kShardSize = 64;
    std::vector<Shard> shards;
    for (const auto& [lang, corpus] : corpora)
        for (std::size_t b = 0; b < corpus.samples.size(); b += kShardSize)
            shards.push_back({&corpus, b, std::min(b + kShardSize, corpus.samples.size())});

    std::vector<RelevanceAccumulator> shard_rel(shards.size());
    std::vector<ActivationAccumulator> shard_act(shards.size());
    std::vector<std::string> shard_dump(shards.size());
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::string error_message;
    std::mutex error_mutex;

    auto worker = [&]() {
        while (!failed.load(std::memory_order_relaxed)) {
            std::size_t i = next.fetch_add(1);
            if (i >= shards.size()) break;
            const Shard& shard = shards[i];
            RelevanceAccumulator rel(layout, languages);
            ActivationAccumulator act(layout, languages);
            try {
                for (std::size_t s = shard.begin; s < shard.end; ++s) {
                    const auto& tokens = shard.corpus->samples[s];
                    if (tokens.size() < 2) continue;
                    ForwardTrace trace;
                    forward_impl(weights, tokens, nullptr, &trace);
                    AttributionDetail det =
                        attribute_trace_detailed(weights, trace, tokens, shard.corpus->language, opt);
                    observe_sample(rel, act, det.relevance, trace, shard.corpus->language);
                    if (dump_relevance) relevance_dump_append(shard_dump[i], det.relevance);
                }
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!failed.exchange(true)) error_message = e.what();
            }
            shard_rel[i] = std::move(rel);
            shard_act[i] = std::move(act);
        }
    };

    int n_workers = std::max(1, std::min<int>(crane_workers(), static_cast<int>(shards.size())));
    if (n_workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> threads;
        for (int t = 0; t < n_workers; ++t) threads.emplace_back(worker);
        for (auto& t : threads) t.join();
    }
    if (failed.load()) throw AttributionError("identification failed: " + error_message);

    IdentificationResult out{RelevanceAccumulator(layout, languages),
                             ActivationAccumulator(layout, languages),
                             {}};
    for (std::size_t i = 0; i < shards.size(); ++i) {
        out.rel.merge(shard_rel[i]);
        out.act.merge(shard_act[i]);
        if (dump_relevance) out.dumps[shards[i].corpus->language] += shard_dump[i];
    }
    return out;
}

}  // namespace crane
