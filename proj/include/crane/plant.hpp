#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "crane/errors.hpp"
#include "crane/model.hpp"
#include "crane/rng.hpp"

namespace crane {

// Ground-truth construction: a planted model carries, per language, K neurons
// wired to fire on that language's common-regime tokens and to push
// probability mass toward the frequent part of its vocab range. Recovery
// tests score selectors against the returned sets.
//
// The per-language `rare_tokens` tail of each range hosts the corpus's rare
// regime; planted neurons stay exactly silent there (and on every other
// language), so their per-sample relevance is a two-point mixture with heavy
// tails under the target language and undefined kurtosis elsewhere.
struct PlantSpec {
    int neurons_per_language = 0;  // K
    double gain = 3.0;             // up-column strength on the language indicator
    double repel = 0.5;            // negative indicator multiple outside the feature block
    double down_gain = 0.2;        // total output strength per language (split across K)
    double unembed_scale = 25.0;   // uniform output sharpening; carries no language signal
    int boost_group = 8;           // |A|: leading range tokens whose logits the plant boosts
    std::vector<std::pair<int, int>> vocab_ranges;  // [lo, hi) per language, disjoint
    std::vector<int> rare_tokens;  // per language: range tail outside the feature block

    void validate(const ModelConfig& config, std::size_t n_languages) const {
        if (neurons_per_language < 0) throw ConfigError("plant: K must be >= 0");
        if (neurons_per_language == 0) return;
        if (gain <= 0.0) throw ConfigError("plant: gain must be positive");
        if (vocab_ranges.size() != n_languages)
            throw ConfigError("plant: one vocab range per language required");
        if (!rare_tokens.empty() && rare_tokens.size() != n_languages)
            throw ConfigError("plant: rare_tokens must align with languages");
        long long total = static_cast<long long>(neurons_per_language) * static_cast<long long>(n_languages);
        if (total > config.neuron_count())
            throw ConfigError("plant: " + std::to_string(total) + " neurons exceed model capacity " +
                              std::to_string(config.neuron_count()));
        if (neurons_per_language > config.d_mlp)
            throw ConfigError("plant: K exceeds a single layer's neuron count");
        if (static_cast<int>(n_languages) > config.d_model)
            throw ConfigError("plant: d_model too small for per-language directions");
        for (std::size_t i = 0; i < vocab_ranges.size(); ++i) {
            auto [lo, hi] = vocab_ranges[i];
            if (lo < 0 || hi > config.vocab_size || hi - lo < 2)
                throw ConfigError("plant: bad vocab range [" + std::to_string(lo) + "," +
                                  std::to_string(hi) + ")");
            if (!rare_tokens.empty() &&
                (rare_tokens[i] < 0 || rare_tokens[i] > hi - lo - 2))
                throw ConfigError("plant: rare_tokens leaves no feature block");
            for (std::size_t j = 0; j < i; ++j) {
                auto [lo2, hi2] = vocab_ranges[j];
                if (lo < hi2 && lo2 < hi) throw ConfigError("plant: vocab ranges overlap");
            }
        }
    }
};

namespace detail {

// Gaussian elimination with partial pivoting; A is n x n row-major.
inline std::vector<double> solve_dense(std::vector<double> a, std::vector<double> b) {
    int n = static_cast<int>(b.size());
    for (int col = 0; col < n; ++col) {
        int pivot = col;
        for (int r = col + 1; r < n; ++r)
            if (std::abs(a[static_cast<std::size_t>(r) * n + col]) >
                std::abs(a[static_cast<std::size_t>(pivot) * n + col]))
                pivot = r;
        if (std::abs(a[static_cast<std::size_t>(pivot) * n + col]) < 1e-300)
            throw InternalError("plant: singular system while fitting boost direction");
        if (pivot != col) {
            for (int cc = 0; cc < n; ++cc)
                std::swap(a[static_cast<std::size_t>(pivot) * n + cc],
                          a[static_cast<std::size_t>(col) * n + cc]);
            std::swap(b[static_cast<std::size_t>(pivot)], b[static_cast<std::size_t>(col)]);
        }
        double d = a[static_cast<std::size_t>(col) * n + col];
        for (int r = col + 1; r < n; ++r) {
            double f = a[static_cast<std::size_t>(r) * n + col] / d;
            if (f == 0.0) continue;
            for (int cc = col; cc < n; ++cc)
                a[static_cast<std::size_t>(r) * n + cc] -= f * a[static_cast<std::size_t>(col) * n + cc];
            b[static_cast<std::size_t>(r)] -= f * b[static_cast<std::size_t>(col)];
        }
    }
    std::vector<double> x(static_cast<std::size_t>(n), 0.0);
    for (int r = n - 1; r >= 0; --r) {
        double s = b[static_cast<std::size_t>(r)];
        for (int cc = r + 1; cc < n; ++cc)
            s -= a[static_cast<std::size_t>(r) * n + cc] * x[static_cast<std::size_t>(cc)];
        x[static_cast<std::size_t>(r)] = s / a[static_cast<std::size_t>(r) * n + r];
    }
    return x;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline void normalize(std::vector<double>& v) {
    double n = std::sqrt(dot(v, v));
    if (n < 1e-300) throw InternalError("plant: degenerate direction");
    for (double& x : v) x /= n;
}

}  // namespace detail

// Builds build_model(config, seed) and, when K > 0, wires in the plant:
//  - per language an orthonormal indicator direction u;
//  - feature-block token embeddings carry +u, every other token (the
//    language's rare block and all foreign tokens) carries -repel*u, so
//    planted relu pre-activations stay silent off the feature block;
//  - planted mlp_up columns are gain*u; all K neurons of a language sit in
//    one layer (their own boost output only reaches later layers, keeping
//    the stream they read clean);
//  - planted mlp_down rows point along the least-squares direction that
//    raises the logits of the range's leading `boost_group` tokens;
//  - the unembedding is sharpened by a uniform factor so output effects are
//    measurable through the norm-capped residual (uniform across all tokens,
//    so it carries no language information itself).
// K = 0 returns the base model bit for bit.
inline std::pair<ModelWeights, std::map<std::string, NeuronSet>> build_planted(
    const ModelConfig& config, const PlantSpec& plant, const std::vector<std::string>& languages,
    std::uint64_t seed) {
    config.validate();
    plant.validate(config, languages.size());
    ModelWeights w = build_model(config, seed);
    std::map<std::string, NeuronSet> truth;
    for (const std::string& lang : languages) {
        NeuronSet set;
        set.method = SelectionMethod::planted;
        set.target_language = lang;
        set.budget = plant.neurons_per_language;
        truth[lang] = std::move(set);
    }
    int K = plant.neurons_per_language;
    if (K == 0) return {std::move(w), std::move(truth)};

    Rng rng(derive_seed(seed, "plant"));
    int d = config.d_model;
    int L = static_cast<int>(languages.size());

    // L orthonormal indicator directions via Gram-Schmidt.
    std::vector<std::vector<double>> dirs;
    while (static_cast<int>(dirs.size()) < L) {
        std::vector<double> v(static_cast<std::size_t>(d));
        for (double& x : v) x = rng.normal();
        for (const auto& prev : dirs) {
            double c = detail::dot(v, prev);
            for (int i = 0; i < d; ++i) v[static_cast<std::size_t>(i)] -= c * prev[static_cast<std::size_t>(i)];
        }
        detail::normalize(v);
        dirs.push_back(std::move(v));
    }

    // One layer per language; indices drawn from a per-layer shuffle.
    std::vector<std::vector<int>> free_per_layer(static_cast<std::size_t>(config.n_layers));
    for (int l = 0; l < config.n_layers; ++l) {
        std::vector<int> idx(static_cast<std::size_t>(config.d_mlp));
        for (int i = 0; i < config.d_mlp; ++i) idx[static_cast<std::size_t>(i)] = i;
        rng.shuffle(idx);
        free_per_layer[static_cast<std::size_t>(l)] = std::move(idx);
    }
    std::vector<std::size_t> cursor(static_cast<std::size_t>(config.n_layers), 0);
    for (int li = 0; li < L; ++li) {
        NeuronSet& set = truth[languages[static_cast<std::size_t>(li)]];
        int layer = li % config.n_layers;
        for (int k = 0; k < K; ++k) {
            auto& cur = cursor[static_cast<std::size_t>(layer)];
            if (cur >= free_per_layer[static_cast<std::size_t>(layer)].size())
                throw ConfigError("plant: layer capacity exhausted");
            set.ids.push_back({layer, free_per_layer[static_cast<std::size_t>(layer)][cur++]});
        }
        set.normalize();
    }

    // Embedding edits: +u on the feature block, -repel*u elsewhere.
    for (int li = 0; li < L; ++li) {
        const auto& u = dirs[static_cast<std::size_t>(li)];
        auto [lo, hi] = plant.vocab_ranges[static_cast<std::size_t>(li)];
        int rare = plant.rare_tokens.empty() ? 0 : plant.rare_tokens[static_cast<std::size_t>(li)];
        int feature_hi = hi - rare;
        for (int t = 0; t < config.vocab_size; ++t) {
            double coeff = (t >= lo && t < feature_hi) ? 1.0 : -plant.repel;
            double* row = w.token_embedding.data() + static_cast<std::ptrdiff_t>(t) * d;
            for (int i = 0; i < d; ++i) row[i] += coeff * u[static_cast<std::size_t>(i)];
        }
    }

    // Uniform output sharpening.
    for (double& v : w.unembedding) v *= plant.unembed_scale;

    // Boost directions: least-squares fit of the indicator of the range's
    // leading tokens through the (sharpened) unembedding, then projected off
    // the indicator directions so layers do not cross-talk.
    int V = config.vocab_size;
    std::vector<double> gram(static_cast<std::size_t>(d) * static_cast<std::size_t>(d), 0.0);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
            double s = 0.0;
            for (int t = 0; t < V; ++t)
                s += w.unembedding[static_cast<std::size_t>(i) * V + static_cast<std::size_t>(t)] *
                     w.unembedding[static_cast<std::size_t>(j) * V + static_cast<std::size_t>(t)];
            gram[static_cast<std::size_t>(i) * d + static_cast<std::size_t>(j)] = s;
        }
    for (int i = 0; i < d; ++i) gram[static_cast<std::size_t>(i) * d + static_cast<std::size_t>(i)] += 1e-9;

    for (int li = 0; li < L; ++li) {
        auto [lo, hi] = plant.vocab_ranges[static_cast<std::size_t>(li)];
        int n_boost = std::min(plant.boost_group, hi - lo);
        std::vector<double> rhs(static_cast<std::size_t>(d), 0.0);
        for (int i = 0; i < d; ++i)
            for (int t = lo; t < lo + n_boost; ++t)
                rhs[static_cast<std::size_t>(i)] +=
                    w.unembedding[static_cast<std::size_t>(i) * V + static_cast<std::size_t>(t)];
        std::vector<double> v = detail::solve_dense(gram, rhs);
        for (const auto& dir : dirs) {
            double c = detail::dot(v, dir);
            for (int i = 0; i < d; ++i) v[static_cast<std::size_t>(i)] -= c * dir[static_cast<std::size_t>(i)];
        }
        detail::normalize(v);

        const auto& u = dirs[static_cast<std::size_t>(li)];
        double row_gain = plant.down_gain / static_cast<double>(K);
        for (const NeuronId& id : truth[languages[static_cast<std::size_t>(li)]].ids) {
            LayerWeights& lw = w.layers[static_cast<std::size_t>(id.layer)];
            for (int i = 0; i < d; ++i) {
                lw.mlp_up[static_cast<std::size_t>(i) * config.d_mlp + static_cast<std::size_t>(id.index)] =
                    plant.gain * u[static_cast<std::size_t>(i)];
                lw.mlp_down[static_cast<std::size_t>(id.index) * d + static_cast<std::size_t>(i)] =
                    row_gain * v[static_cast<std::size_t>(i)];
            }
        }
    }
    return {std::move(w), std::move(truth)};
}

}  // namespace crane
