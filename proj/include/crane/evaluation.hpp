#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "crane/corpus.hpp"
#include "crane/errors.hpp"
#include "crane/model.hpp"
#include "crane/util.hpp"

namespace crane {

enum class TaskKind { mc_accuracy, mean_loglik };

// The open-ended judge protocol is replaced by a deterministic likelihood
// surrogate; reports label that column accordingly.
inline const char* task_kind_label(TaskKind k) {
    return k == TaskKind::mc_accuracy ? "mc_accuracy" : "openended_surrogate";
}

// Fraction of items whose gold option carries the maximal next-token logit
// after the prefix; ties go to the lowest token id.
inline double eval_mc_accuracy(const ModelWeights& w, const McTask& task, const NeuronSet* mask) {
    if (task.items.empty()) throw InputError("eval_mc_accuracy: empty task");
    std::vector<std::uint8_t> bits;
    if (mask) bits = mask_bits_of(*mask, w.layout());
    int V = w.config.vocab_size;
    long long correct = 0;
    for (const McItem& item : task.items) {
        std::vector<double> logits = forward_impl(w, item.prefix, mask ? &bits : nullptr, nullptr);
        const double* last = logits.data() + (item.prefix.size() - 1) * static_cast<std::size_t>(V);
        int options[4] = {item.gold, item.distractors[0], item.distractors[1], item.distractors[2]};
        int best = options[0];
        for (int o : options)
            if (last[o] > last[best] || (last[o] == last[best] && o < best)) best = o;
        if (best == item.gold) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(task.items.size());
}

// Mean per-token log-probability of the gold next tokens under teacher
// forcing, in nats.
inline double eval_mean_loglik(const ModelWeights& w, const Corpus& corpus, const NeuronSet* mask) {
    if (corpus.samples.empty()) throw InputError("eval_mean_loglik: empty corpus");
    std::vector<std::uint8_t> bits;
    if (mask) bits = mask_bits_of(*mask, w.layout());
    int V = w.config.vocab_size;
    double total = 0.0;
    long long targets = 0;
    for (const auto& sample : corpus.samples) {
        if (sample.size() < 2) continue;
        std::vector<double> logits = forward_impl(w, sample, mask ? &bits : nullptr, nullptr);
        for (std::size_t t = 0; t + 1 < sample.size(); ++t) {
            const double* lt = logits.data() + t * static_cast<std::size_t>(V);
            double mx = lt[0];
            for (int v = 1; v < V; ++v) mx = std::max(mx, lt[v]);
            double z = 0.0;
            for (int v = 0; v < V; ++v) z += std::exp(lt[v] - mx);
            total += lt[sample[t + 1]] - mx - std::log(z);
            ++targets;
        }
    }
    if (targets == 0) throw InputError("eval_mean_loglik: no next-token targets in corpus");
    return total / static_cast<double>(targets);
}

// Performance improvements are not counted as degradation.
inline double clamped_delta(double original, double masked) {
    return std::max(original - masked, 0.0);
}

// ----------------------------- LangSpec-F1 -----------------------------

struct F1Result {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

struct LangScores {
    double original = 0.0;
    double masked = 0.0;
};

struct ScoreTable {
    TaskKind kind = TaskKind::mc_accuracy;
    std::vector<std::pair<std::string, LangScores>> rows;  // one per language
};

// Precision: target drop against the worst non-target drop.
// Recall: target drop against the original target score, capped at 1 so the
// metric stays in [0,1] when a masked score falls below the scale floor.
// F1: their harmonic mean. All drops clamped at zero; epsilon appears in all
// three denominators.
inline F1Result langspec_f1(const ScoreTable& scores, const std::string& target, double epsilon) {
    if (epsilon <= 0.0) throw InputError("langspec_f1: epsilon must be positive");
    double delta_target = 0.0, s_target = 0.0, max_other = 0.0;
    bool found = false;
    for (const auto& [lang, s] : scores.rows) {
        double d = clamped_delta(s.original, s.masked);
        if (lang == target) {
            found = true;
            delta_target = d;
            s_target = s.original;
        } else {
            max_other = std::max(max_other, d);
        }
    }
    if (!found) throw InputError("langspec_f1: no score row for target '" + target + "'");
    F1Result r;
    r.precision = delta_target / (delta_target + max_other + epsilon);
    r.recall = std::min(delta_target / (s_target + epsilon), 1.0);
    r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall + epsilon);
    return r;
}

// ----------------------------- report -----------------------------

struct EvalRow {
    std::string method;
    std::string mask_language;  // "-" for the unmasked baseline
    std::string task;           // task kind label
    std::string language;       // the language the task evaluates
    double original = 0.0;
    double masked = 0.0;
    double delta = 0.0;
    double clamped = 0.0;
};

struct EvalSummary {
    std::string method;
    std::string mask_language;
    TaskKind kind = TaskKind::mc_accuracy;
    F1Result f1;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    std::vector<EvalSummary> summaries;
    double epsilon = 1e-9;
    int budget = 0;
    std::string tag = "in_model";
    double loglik_shift = 0.0;  // uniform baseline shift applied to surrogate scores in Eq. accounting
};

struct EvalTasks {
    std::vector<std::string> languages;
    std::map<std::string, McTask> mc;        // per language
    std::map<std::string, Corpus> heldout;   // per language
};

using NeuronSetMap = std::map<std::pair<std::string, std::string>, NeuronSet>;  // (method, target)

namespace detail {

struct TaskScores {
    // scores[kind][language] for one model configuration (masked or not)
    std::map<std::string, double> mc;
    std::map<std::string, double> loglik;
};

inline TaskScores evaluate_all(const ModelWeights& w, const EvalTasks& tasks, const NeuronSet* mask) {
    TaskScores out;
    for (const auto& lang : tasks.languages) {
        out.mc[lang] = eval_mc_accuracy(w, tasks.mc.at(lang), mask);
        out.loglik[lang] = eval_mean_loglik(w, tasks.heldout.at(lang), mask);
    }
    return out;
}

}  // namespace detail

// Algorithm stage 4: evaluate every task unmasked once, then under each
// neuron set; fill per-row drops and per-set LangSpec-F1. All sets must share
// one budget and carry exactly that many neurons.
inline EvalReport run_intervention_grid(const ModelWeights& w, const NeuronSetMap& sets,
                                        const EvalTasks& tasks, double epsilon = 1e-9) {
    if (tasks.languages.empty()) throw InputError("run_intervention_grid: no languages");
    for (const auto& lang : tasks.languages) {
        if (!tasks.mc.count(lang)) throw InputError("run_intervention_grid: missing mc task for " + lang);
        if (!tasks.heldout.count(lang))
            throw InputError("run_intervention_grid: missing heldout corpus for " + lang);
    }
    int budget = -1;
    for (const auto& [key, set] : sets) {
        set.validate(w.layout());
        if (budget < 0) budget = set.budget;
        if (set.budget != budget)
            throw ConfigError("run_intervention_grid: mismatched budgets across methods (" +
                              std::to_string(set.budget) + " vs " + std::to_string(budget) + ")");
        if (static_cast<int>(set.ids.size()) != set.budget)
            throw ConfigError("run_intervention_grid: set " + key.first + "/" + key.second +
                              " holds " + std::to_string(set.ids.size()) + " neurons, budget " +
                              std::to_string(set.budget));
    }

    EvalReport report;
    report.epsilon = epsilon;
    report.budget = std::max(budget, 0);
    report.loglik_shift = std::log(static_cast<double>(w.config.vocab_size));

    detail::TaskScores org = detail::evaluate_all(w, tasks, nullptr);
    for (const auto& lang : tasks.languages)
        report.rows.push_back({"org", "-", task_kind_label(TaskKind::mc_accuracy), lang, org.mc.at(lang),
                               org.mc.at(lang), 0.0, 0.0});
    for (const auto& lang : tasks.languages)
        report.rows.push_back({"org", "-", task_kind_label(TaskKind::mean_loglik), lang,
                               org.loglik.at(lang), org.loglik.at(lang), 0.0, 0.0});

    for (const auto& [key, set] : sets) {
        const auto& [method, target] = key;
        detail::TaskScores masked = detail::evaluate_all(w, tasks, &set);
        for (const auto& lang : tasks.languages) {
            double o = org.mc.at(lang), m = masked.mc.at(lang);
            report.rows.push_back({method, target, task_kind_label(TaskKind::mc_accuracy), lang, o, m,
                                   o - m, clamped_delta(o, m)});
        }
        for (const auto& lang : tasks.languages) {
            double o = org.loglik.at(lang), m = masked.loglik.at(lang);
            report.rows.push_back({method, target, task_kind_label(TaskKind::mean_loglik), lang, o, m,
                                   o - m, clamped_delta(o, m)});
        }
        for (TaskKind kind : {TaskKind::mc_accuracy, TaskKind::mean_loglik}) {
            ScoreTable table;
            table.kind = kind;
            for (const auto& lang : tasks.languages) {
                double o = kind == TaskKind::mc_accuracy ? org.mc.at(lang) : org.loglik.at(lang);
                double m = kind == TaskKind::mc_accuracy ? masked.mc.at(lang) : masked.loglik.at(lang);
                if (kind == TaskKind::mean_loglik) {
                    // log-likelihoods are negative; shift by the uniform
                    // baseline so recall's denominator is nonnegative
                    o += report.loglik_shift;
                    m += report.loglik_shift;
                }
                table.rows.push_back({lang, {o, m}});
            }
            EvalSummary summary;
            summary.method = method;
            summary.mask_language = target;
            summary.kind = kind;
            summary.f1 = langspec_f1(table, target, epsilon);
            report.summaries.push_back(summary);
        }
    }
    return report;
}

// Applies neuron sets identified on a source model to a destination model
// with no re-selection (the transfer protocol); scores are recomputed on the
// destination, including the unmasked baseline.
inline EvalReport transfer_eval(const NeuronSetMap& sets_from_source,
                                const ModelConfig& source_config, const ModelWeights& destination,
                                const EvalTasks& tasks, double epsilon = 1e-9) {
    if (!(source_config == destination.config))
        throw InputError("transfer_eval: source and destination model configs differ");
    EvalReport report = run_intervention_grid(destination, sets_from_source, tasks, epsilon);
    report.tag = "transfer";
    return report;
}

// ----------------------------- artifact formats -----------------------------

inline std::string report_csv(const EvalReport& report) {
    std::string out = "method,mask_lang,task,language,original,masked,delta,clamped_delta\n";
    for (const EvalRow& r : report.rows)
        out += r.method + "," + r.mask_language + "," + r.task + "," + r.language + "," +
               fmt_double(r.original) + "," + fmt_double(r.masked) + "," + fmt_double(r.delta) + "," +
               fmt_double(r.clamped) + "\n";
    return out;
}

inline nlohmann::json report_summary_json(const EvalReport& report,
                                          const std::vector<std::uint64_t>& seeds) {
    nlohmann::json rows = nlohmann::json::array();
    for (const EvalSummary& s : report.summaries)
        rows.push_back({{"method", s.method},
                        {"mask_lang", s.mask_language},
                        {"task_kind", task_kind_label(s.kind)},
                        {"precision", s.f1.precision},
                        {"recall", s.f1.recall},
                        {"langspec_f1", s.f1.f1}});
    return {{"tag", report.tag},
            {"epsilon", report.epsilon},
            {"budget", report.budget},
            {"seeds", seeds},
            {"loglik_shift", report.loglik_shift},
            {"summaries", rows}};
}

// Rows = (method, mask_lang); columns = task instances; cells = clamped drops.
inline std::string heatmap_csv(const EvalReport& report) {
    std::vector<std::string> columns;
    std::map<std::pair<std::string, std::string>, std::map<std::string, double>> grid;
    for (const EvalRow& r : report.rows) {
        if (r.method == "org") continue;
        std::string col = r.task + ":" + r.language;
        if (std::find(columns.begin(), columns.end(), col) == columns.end()) columns.push_back(col);
        grid[{r.method, r.mask_language}][col] = r.clamped;
    }
    std::string out = "method,mask_lang";
    for (const auto& c : columns) out += "," + c;
    out += "\n";
    for (const auto& [key, cells] : grid) {
        out += key.first + "," + key.second;
        for (const auto& c : columns) {
            auto it = cells.find(c);
            out += "," + (it == cells.end() ? std::string("") : fmt_double(it->second));
        }
        out += "\n";
    }
    return out;
}

}  // namespace crane
