#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "crane/attribution.hpp"
#include "crane/errors.hpp"
#include "crane/model.hpp"
#include "crane/moments.hpp"
#include "crane/rng.hpp"
#include "crane/util.hpp"

namespace crane {

// ----------------------------- accumulators -----------------------------

// Language-conditioned relevance moments, one stream per (neuron, language).
// Single writer per instance; parallel aggregation shards samples across
// instances and merges.
class RelevanceAccumulator {
public:
    RelevanceAccumulator() = default;
    RelevanceAccumulator(NeuronLayout layout, std::vector<std::string> languages)
        : layout_(layout), languages_(std::move(languages)) {
        cells_.resize(languages_.size() * static_cast<std::size_t>(layout_.total()));
    }

    const NeuronLayout& layout() const { return layout_; }
    const std::vector<std::string>& languages() const { return languages_; }

    int language_index(const std::string& id) const {
        for (std::size_t i = 0; i < languages_.size(); ++i)
            if (languages_[i] == id) return static_cast<int>(i);
        throw InputError("unknown language '" + id + "'");
    }

    void observe(const RelevanceVector& rel) {
        int lang = language_index(rel.language);
        if (rel.values.size() != static_cast<std::size_t>(layout_.total()))
            throw InputError("relevance vector length does not match accumulator layout");
        MomentAccumulator* row = cells_.data() + static_cast<std::size_t>(lang) * layout_.total();
        for (int n = 0; n < layout_.total(); ++n) row[n].push(rel.values[static_cast<std::size_t>(n)]);
    }

    void merge(const RelevanceAccumulator& other) {
        if (!(layout_ == other.layout_) || languages_ != other.languages_)
            throw InputError("accumulator layout mismatch in merge");
        for (std::size_t i = 0; i < cells_.size(); ++i) cells_[i].merge(other.cells_[i]);
    }

    const MomentAccumulator& cell(int lang, int flat) const {
        return cells_[static_cast<std::size_t>(lang) * layout_.total() + static_cast<std::size_t>(flat)];
    }

    MomentAccumulator& cell_mut(int lang, int flat) {
        return cells_[static_cast<std::size_t>(lang) * layout_.total() + static_cast<std::size_t>(flat)];
    }

private:
    NeuronLayout layout_;
    std::vector<std::string> languages_;
    std::vector<MomentAccumulator> cells_;
};

// Token-level activation likelihood counts per (neuron, language).
class ActivationAccumulator {
public:
    ActivationAccumulator() = default;
    ActivationAccumulator(NeuronLayout layout, std::vector<std::string> languages)
        : layout_(layout), languages_(std::move(languages)) {
        tokens_.assign(languages_.size() * static_cast<std::size_t>(layout_.total()), 0);
        positive_.assign(tokens_.size(), 0);
    }

    const NeuronLayout& layout() const { return layout_; }
    const std::vector<std::string>& languages() const { return languages_; }

    int language_index(const std::string& id) const {
        for (std::size_t i = 0; i < languages_.size(); ++i)
            if (languages_[i] == id) return static_cast<int>(i);
        throw InputError("unknown language '" + id + "'");
    }

    void observe(const std::string& language, const ForwardTrace& trace) {
        int lang = language_index(language);
        if (static_cast<int>(trace.layers.size()) != layout_.n_layers)
            throw InputError("trace does not match accumulator layout");
        for (int l = 0; l < layout_.n_layers; ++l) {
            const auto& post = trace.layers[static_cast<std::size_t>(l)].mlp_post;
            for (int t = 0; t < trace.seq_len; ++t)
                for (int n = 0; n < layout_.d_mlp; ++n) {
                    std::size_t i = idx(lang, l * layout_.d_mlp + n);
                    tokens_[i] += 1;
                    if (post[static_cast<std::size_t>(t) * layout_.d_mlp + static_cast<std::size_t>(n)] > 0.0)
                        positive_[i] += 1;
                }
        }
    }

    void merge(const ActivationAccumulator& other) {
        if (!(layout_ == other.layout_) || languages_ != other.languages_)
            throw InputError("accumulator layout mismatch in merge");
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            tokens_[i] += other.tokens_[i];
            positive_[i] += other.positive_[i];
        }
    }

    std::uint64_t token_count(int lang, int flat) const { return tokens_[idx(lang, flat)]; }
    std::uint64_t positive_count(int lang, int flat) const { return positive_[idx(lang, flat)]; }

    // activation probability p_{n,l}
    double p(int lang, int flat) const {
        std::uint64_t t = tokens_[idx(lang, flat)];
        return t == 0 ? 0.0 : static_cast<double>(positive_[idx(lang, flat)]) / static_cast<double>(t);
    }

    void restore(int lang, int flat, std::uint64_t tokens, std::uint64_t positive) {
        if (positive > tokens) throw FormatError("activation counts: positive exceeds tokens");
        tokens_[idx(lang, flat)] = tokens;
        positive_[idx(lang, flat)] = positive;
    }

private:
    std::size_t idx(int lang, int flat) const {
        return static_cast<std::size_t>(lang) * layout_.total() + static_cast<std::size_t>(flat);
    }

    NeuronLayout layout_;
    std::vector<std::string> languages_;
    std::vector<std::uint64_t> tokens_, positive_;
};

// Algorithm stage 1 aggregation: fold one attributed sample into both stores.
inline void observe_sample(RelevanceAccumulator& rel_acc, ActivationAccumulator& act_acc,
                           const RelevanceVector& rel, const ForwardTrace& trace,
                           const std::string& language) {
    if (rel.language != language) throw InputError("observe_sample: language tag mismatch");
    rel_acc.observe(rel);
    act_acc.observe(language, trace);
}

inline std::optional<double> kurtosis_of(const RelevanceAccumulator& acc, NeuronId id,
                                         const std::string& language) {
    return acc.cell(acc.language_index(language), acc.layout().flat(id)).kurtosis();
}

// ----------------------------- kurtosis table -----------------------------

struct KurtosisTable {
    NeuronLayout layout;
    std::vector<std::string> languages;
    std::vector<double> raw;         // lang-major flat
    std::vector<double> normalized;  // valid after normalize_layerwise
    std::vector<std::uint8_t> valid; // per (lang, neuron): >= 4 samples and sigma > 0
    bool is_normalized = false;

    std::size_t idx(int lang, int flat) const {
        return static_cast<std::size_t>(lang) * layout.total() + static_cast<std::size_t>(flat);
    }

    int language_index(const std::string& id) const {
        for (std::size_t i = 0; i < languages.size(); ++i)
            if (languages[i] == id) return static_cast<int>(i);
        throw InputError("unknown language '" + id + "'");
    }
};

inline KurtosisTable kurtosis_table(const RelevanceAccumulator& acc) {
    KurtosisTable t;
    t.layout = acc.layout();
    t.languages = acc.languages();
    std::size_t total = t.languages.size() * static_cast<std::size_t>(t.layout.total());
    t.raw.assign(total, 0.0);
    t.normalized.assign(total, 0.0);
    t.valid.assign(total, 0);
    for (int lang = 0; lang < static_cast<int>(t.languages.size()); ++lang)
        for (int n = 0; n < t.layout.total(); ++n) {
            auto k = acc.cell(lang, n).kurtosis();
            if (k) {
                t.raw[t.idx(lang, n)] = *k;
                t.valid[t.idx(lang, n)] = 1;
            }
        }
    return t;
}

// Z-score within each (layer, language) slice over its valid neurons; a
// zero-variance slice normalizes to all zeros. Idempotent on normalized data.
inline KurtosisTable normalize_layerwise(KurtosisTable t) {
    const double* source = t.is_normalized ? t.normalized.data() : t.raw.data();
    std::vector<double> out(t.raw.size(), 0.0);
    for (int lang = 0; lang < static_cast<int>(t.languages.size()); ++lang)
        for (int layer = 0; layer < t.layout.n_layers; ++layer) {
            double sum = 0.0;
            long long count = 0;
            for (int i = 0; i < t.layout.d_mlp; ++i) {
                std::size_t ix = t.idx(lang, layer * t.layout.d_mlp + i);
                if (!t.valid[ix]) continue;
                sum += source[ix];
                ++count;
            }
            if (count == 0) continue;
            double mean = sum / static_cast<double>(count);
            double var = 0.0;
            for (int i = 0; i < t.layout.d_mlp; ++i) {
                std::size_t ix = t.idx(lang, layer * t.layout.d_mlp + i);
                if (!t.valid[ix]) continue;
                double d = source[ix] - mean;
                var += d * d;
            }
            var /= static_cast<double>(count);
            double std_dev = std::sqrt(var);
            for (int i = 0; i < t.layout.d_mlp; ++i) {
                std::size_t ix = t.idx(lang, layer * t.layout.d_mlp + i);
                if (!t.valid[ix]) continue;
                out[ix] = std_dev > 0.0 ? (source[ix] - mean) / std_dev : 0.0;
            }
        }
    t.normalized = std::move(out);
    t.is_normalized = true;
    return t;
}

inline std::string kurtosis_csv(const KurtosisTable& t) {
    std::string out = "layer,index,language,kappa_raw,kappa_norm,valid\n";
    for (int layer = 0; layer < t.layout.n_layers; ++layer)
        for (int i = 0; i < t.layout.d_mlp; ++i)
            for (int lang = 0; lang < static_cast<int>(t.languages.size()); ++lang) {
                std::size_t ix = t.idx(lang, layer * t.layout.d_mlp + i);
                out += std::to_string(layer) + "," + std::to_string(i) + "," + t.languages[static_cast<std::size_t>(lang)] +
                       "," + fmt_double(t.raw[ix]) + "," + fmt_double(t.normalized[ix]) + "," +
                       (t.valid[ix] ? "1" : "0") + "\n";
            }
    return out;
}

// ----------------------------- selection -----------------------------

struct SelectionConfig {
    double threshold = 1.0;  // tau, in normalized-kurtosis units
    int budget = 16;         // B
};

struct SetQuality {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

namespace detail {

struct RankedNeuron {
    double key = 0.0;  // margin (crane) or p_target (lape)
    NeuronId id;
};

inline void sort_ranked(std::vector<RankedNeuron>& v) {
    std::sort(v.begin(), v.end(), [](const RankedNeuron& a, const RankedNeuron& b) {
        if (a.key != b.key) return a.key > b.key;
        if (a.id.layer != b.id.layer) return a.id.layer < b.id.layer;
        return a.id.index < b.id.index;
    });
}

// linear-interpolation quantile over a copy
inline double quantile(std::vector<double> v, double p) {
    if (v.empty()) throw InputError("quantile of empty set");
    std::sort(v.begin(), v.end());
    double h = p * static_cast<double>(v.size() - 1);
    std::size_t lo = static_cast<std::size_t>(h);
    if (lo + 1 >= v.size()) return v.back();
    double frac = h - static_cast<double>(lo);
    return v[lo] + frac * (v[lo + 1] - v[lo]);
}

}  // namespace detail

// Contrast selection: normalized target kurtosis above tau while every other
// language stays below tau; ranked by the margin (target minus worst other).
// Languages with no valid estimate contribute nothing to the max; a neuron
// with no valid non-target estimate gets the neutral score 0.
inline NeuronSet crane_select(const KurtosisTable& table, const std::string& target,
                              const SelectionConfig& sel) {
    if (!table.is_normalized) throw InputError("crane_select: table must be normalized first");
    if (sel.budget < 0) throw InputError("crane_select: negative budget");
    int target_ix = table.language_index(target);

    std::vector<detail::RankedNeuron> candidates;
    for (int n = 0; n < table.layout.total(); ++n) {
        if (!table.valid[table.idx(target_ix, n)]) continue;
        double kt = table.normalized[table.idx(target_ix, n)];
        double max_other = 0.0;
        bool any_other = false;
        for (int lang = 0; lang < static_cast<int>(table.languages.size()); ++lang) {
            if (lang == target_ix || !table.valid[table.idx(lang, n)]) continue;
            double k = table.normalized[table.idx(lang, n)];
            max_other = any_other ? std::max(max_other, k) : k;
            any_other = true;
        }
        if (!any_other) max_other = 0.0;
        if (kt > sel.threshold && max_other < sel.threshold)
            candidates.push_back({kt - max_other, table.layout.unflat(n)});
    }
    detail::sort_ranked(candidates);
    NeuronSet set;
    set.method = SelectionMethod::crane;
    set.target_language = target;
    set.budget = sel.budget;
    for (std::size_t i = 0; i < candidates.size() && i < static_cast<std::size_t>(sel.budget); ++i)
        set.ids.push_back(candidates[i].id);
    set.normalize();
    return set;
}

// Activation-likelihood baseline: low language-entropy of the normalized
// activation probabilities, argmax at the target, above-median target
// probability; ranked by the target probability.
inline NeuronSet lape_select(const ActivationAccumulator& act, const std::string& target,
                             const SelectionConfig& sel) {
    if (sel.budget < 0) throw InputError("lape_select: negative budget");
    int target_ix = act.language_index(target);
    int n_langs = static_cast<int>(act.languages().size());
    for (int lang = 0; lang < n_langs; ++lang)
        if (act.token_count(lang, 0) == 0)
            throw InputError("lape_select: language '" + act.languages()[static_cast<std::size_t>(lang)] +
                             "' has no observed tokens");

    struct Entry {
        int flat;
        double entropy;
        int argmax;
        double p_target;
    };
    std::vector<Entry> considered;
    for (int n = 0; n < act.layout().total(); ++n) {
        double sum = 0.0;
        std::vector<double> p(static_cast<std::size_t>(n_langs));
        for (int lang = 0; lang < n_langs; ++lang) {
            p[static_cast<std::size_t>(lang)] = act.p(lang, n);
            sum += p[static_cast<std::size_t>(lang)];
        }
        if (sum <= 0.0) continue;  // never active anywhere
        double h = 0.0;
        int arg = 0;
        for (int lang = 0; lang < n_langs; ++lang) {
            double q = p[static_cast<std::size_t>(lang)] / sum;
            if (q > 0.0) h -= q * std::log(q);
            if (p[static_cast<std::size_t>(lang)] > p[static_cast<std::size_t>(arg)]) arg = lang;
        }
        considered.push_back({n, h, arg, p[static_cast<std::size_t>(target_ix)]});
    }

    NeuronSet set;
    set.method = SelectionMethod::lape;
    set.target_language = target;
    set.budget = sel.budget;
    if (considered.empty()) return set;

    std::vector<double> entropies, targets;
    for (const auto& e : considered) {
        entropies.push_back(e.entropy);
        targets.push_back(e.p_target);
    }
    double h_cut = detail::quantile(entropies, 0.25);
    double p_median = detail::quantile(targets, 0.5);

    std::vector<detail::RankedNeuron> candidates;
    for (const auto& e : considered)
        if (e.entropy < h_cut && e.argmax == target_ix && e.p_target > p_median)
            candidates.push_back({e.p_target, act.layout().unflat(e.flat)});
    detail::sort_ranked(candidates);
    for (std::size_t i = 0; i < candidates.size() && i < static_cast<std::size_t>(sel.budget); ++i)
        set.ids.push_back(candidates[i].id);
    set.normalize();
    return set;
}

// Budget-matched control: exactly B distinct neurons, uniform without
// replacement.
inline NeuronSet random_select(const NeuronLayout& layout, const SelectionConfig& sel,
                               std::uint64_t seed) {
    if (sel.budget < 0 || sel.budget > layout.total())
        throw InputError("random_select: budget outside [0, N]");
    Rng rng(derive_seed(seed, "random-select"));
    NeuronSet set;
    set.method = SelectionMethod::random;
    set.budget = sel.budget;
    for (int flat : rng.sample_without_replacement(layout.total(), sel.budget))
        set.ids.push_back(layout.unflat(flat));
    set.normalize();
    return set;
}

// Set precision/recall/F1 against a ground-truth set; empty selections score
// zero precision.
inline SetQuality selection_quality(const NeuronSet& selected, const NeuronSet& truth) {
    SetQuality q;
    if (selected.ids.empty() && truth.ids.empty()) {
        q.precision = 0.0;
        q.recall = 1.0;
        q.f1 = 0.0;
        return q;
    }
    std::size_t overlap = 0;
    for (const NeuronId& id : selected.ids)
        if (truth.contains(id)) ++overlap;
    q.precision = selected.ids.empty() ? 0.0
                                       : static_cast<double>(overlap) / static_cast<double>(selected.ids.size());
    q.recall = truth.ids.empty() ? 1.0
                                 : static_cast<double>(overlap) / static_cast<double>(truth.ids.size());
    q.f1 = (q.precision + q.recall) > 0.0 ? 2.0 * q.precision * q.recall / (q.precision + q.recall)
                                          : 0.0;
    return q;
}

// ----------------------------- selection sidecar -----------------------------

struct SelectionSidecar {
    std::string method;
    std::string target;
    double threshold = 0.0;
    int budget = 0;
    std::uint64_t seed = 0;
};

inline nlohmann::json sidecar_to_json(const SelectionSidecar& s) {
    return {{"method", s.method},
            {"target", s.target},
            {"threshold", s.threshold},
            {"budget", s.budget},
            {"seed", s.seed}};
}

inline SelectionSidecar sidecar_from_json(const nlohmann::json& j) {
    SelectionSidecar s;
    try {
        s.method = j.at("method").get<std::string>();
        s.target = j.at("target").get<std::string>();
        s.threshold = j.at("threshold").get<double>();
        s.budget = j.at("budget").get<int>();
        s.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("selection sidecar: ") + e.what());
    }
    return s;
}

// ----------------------------- stats files -----------------------------
// "CRNA": both accumulators for one identification run, little-endian.

inline constexpr char kStatsMagic[4] = {'C', 'R', 'N', 'A'};
inline constexpr std::uint32_t kStatsVersion = 1;

inline std::string serialize_stats(const RelevanceAccumulator& rel, const ActivationAccumulator& act) {
    if (!(rel.layout() == act.layout()) || rel.languages() != act.languages())
        throw InputError("serialize_stats: accumulator layout mismatch");
    std::string out;
    out.append(kStatsMagic, 4);
    put_u32_le(out, kStatsVersion);
    put_u32_le(out, static_cast<std::uint32_t>(rel.layout().n_layers));
    put_u32_le(out, static_cast<std::uint32_t>(rel.layout().d_mlp));
    put_u32_le(out, static_cast<std::uint32_t>(rel.languages().size()));
    for (const auto& lang : rel.languages()) {
        put_u32_le(out, static_cast<std::uint32_t>(lang.size()));
        out += lang;
    }
    int total = rel.layout().total();
    for (int lang = 0; lang < static_cast<int>(rel.languages().size()); ++lang)
        for (int n = 0; n < total; ++n) {
            const MomentAccumulator& m = rel.cell(lang, n);
            put_u64_le(out, static_cast<std::uint64_t>(m.count()));
            put_f64_le(out, m.mean());
            put_f64_le(out, m.m2());
            put_f64_le(out, m.m3());
            put_f64_le(out, m.m4());
            put_u64_le(out, act.token_count(lang, n));
            put_u64_le(out, act.positive_count(lang, n));
        }
    return out;
}

inline std::pair<RelevanceAccumulator, ActivationAccumulator> deserialize_stats(
    std::string_view bytes) {
    ByteReader r(bytes, "stats file");
    if (r.bytes(4) != std::string(kStatsMagic, 4)) throw FormatError("stats file: bad magic");
    std::uint32_t version = r.u32();
    if (version != kStatsVersion)
        throw FormatError("stats file: unsupported version " + std::to_string(version));
    NeuronLayout layout{static_cast<int>(r.u32()), static_cast<int>(r.u32())};
    std::uint32_t n_langs = r.u32();
    if (layout.n_layers < 1 || layout.d_mlp < 1 || n_langs < 1 || n_langs > 1024)
        throw FormatError("stats file: implausible header");
    std::vector<std::string> languages;
    for (std::uint32_t i = 0; i < n_langs; ++i) {
        std::uint32_t len = r.u32();
        if (len > 4096) throw FormatError("stats file: language id too long");
        languages.push_back(r.bytes(len));
    }
    RelevanceAccumulator rel(layout, languages);
    ActivationAccumulator act(layout, languages);
    for (int lang = 0; lang < static_cast<int>(n_langs); ++lang)
        for (int n = 0; n < layout.total(); ++n) {
            auto count = static_cast<long long>(r.u64());
            double mean = r.f64(), m2 = r.f64(), m3 = r.f64(), m4 = r.f64();
            if (count < 0 || (count > 0 && !std::isfinite(mean)))
                throw FormatError("stats file: corrupt moment cell");
            rel.cell_mut(lang, n).restore(count, mean, m2, m3, m4);
            std::uint64_t tokens = r.u64();
            std::uint64_t positive = r.u64();
            act.restore(lang, n, tokens, positive);
        }
    r.expect_end();
    return {std::move(rel), std::move(act)};
}

}  // namespace crane
