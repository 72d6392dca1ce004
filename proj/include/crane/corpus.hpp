#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "crane/errors.hpp"
#include "crane/rng.hpp"
#include "crane/util.hpp"

namespace crane {

// ----------------------------- language specs -----------------------------

enum class Grammar { markov, bracket };

// A synthetic "language": a token distribution over a private vocab range.
// markov samples an order-1 chain; bracket emits balanced nested pairs.
struct LanguageSpec {
    std::string id;
    int vocab_lo = 0;
    int vocab_hi = 0;  // [lo, hi)
    Grammar grammar = Grammar::markov;

    // markov: row-stochastic transition over the range, plus a start
    // distribution; both indexed relative to vocab_lo.
    std::vector<double> transition;  // m*m row-major
    std::vector<double> start;       // m

    // bracket: tokens pair up as (lo+2k, lo+2k+1). Each sample draws its
    // pair-type regime once: the common block with probability
    // 1 - regime_prob, the rare block otherwise.
    int depth_limit = 0;
    std::vector<double> pair_weights;       // m/2, normalized; common regime
    std::vector<double> pair_weights_rare;  // m/2, normalized; rare regime (may equal pair_weights)
    double regime_prob = 0.0;

    int range_size() const { return vocab_hi - vocab_lo; }

    void validate() const {
        int m = range_size();
        if (id.empty()) throw ConfigError("language id must be non-empty");
        if (m <= 0 || vocab_lo < 0) throw ConfigError("language '" + id + "': bad vocab range");
        if (grammar == Grammar::markov) {
            if (transition.size() != static_cast<std::size_t>(m) * static_cast<std::size_t>(m))
                throw ConfigError("language '" + id + "': transition matrix shape mismatch");
            if (start.size() != static_cast<std::size_t>(m))
                throw ConfigError("language '" + id + "': start distribution shape mismatch");
            check_stochastic(start, "start distribution");
            for (int r = 0; r < m; ++r) {
                std::vector<double> row(transition.begin() + static_cast<std::ptrdiff_t>(r) * m,
                                        transition.begin() + static_cast<std::ptrdiff_t>(r + 1) * m);
                check_stochastic(row, "transition row " + std::to_string(r));
            }
        } else {
            if (m % 2 != 0) throw ConfigError("language '" + id + "': bracket range must be even");
            if (depth_limit < 1) throw ConfigError("language '" + id + "': depth limit must be >= 1");
            if (pair_weights.size() != static_cast<std::size_t>(m / 2))
                throw ConfigError("language '" + id + "': pair weight shape mismatch");
            check_stochastic(pair_weights, "pair weights");
            if (!pair_weights_rare.empty()) {
                if (pair_weights_rare.size() != pair_weights.size())
                    throw ConfigError("language '" + id + "': rare pair weight shape mismatch");
                check_stochastic(pair_weights_rare, "rare pair weights");
            }
            if (regime_prob < 0.0 || regime_prob > 1.0)
                throw ConfigError("language '" + id + "': regime_prob outside [0,1]");
        }
    }

private:
    void check_stochastic(const std::vector<double>& p, const std::string& what) const {
        double sum = 0.0;
        for (double v : p) {
            if (v < 0.0) throw ConfigError("language '" + id + "': negative probability in " + what);
            sum += v;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw ConfigError("language '" + id + "': " + what + " not stochastic (sum " +
                              fmt_double(sum) + ")");
    }
};

enum class Split { train, heldout };

inline const char* split_name(Split s) { return s == Split::train ? "train" : "heldout"; }

struct Corpus {
    std::vector<std::vector<int>> samples;
    std::string language;
    Split split = Split::train;
};

struct McItem {
    std::vector<int> prefix;
    int gold = 0;
    std::array<int, 3> distractors{};
};

// Four-way cloze items: pick the true next token against three in-range
// distractors.
struct McTask {
    std::vector<McItem> items;
    std::string language;
};

// ----------------------------- generation -----------------------------

inline Corpus generate_corpus(const LanguageSpec& spec, int n_samples, int seq_len,
                              std::uint64_t seed) {
    spec.validate();
    if (n_samples < 0) throw InputError("generate_corpus: negative sample count");
    if (seq_len < 1) throw InputError("generate_corpus: seq_len must be >= 1");

    Corpus corpus;
    corpus.language = spec.id;
    corpus.samples.reserve(static_cast<std::size_t>(n_samples));
    Rng rng(derive_seed(seed, "corpus:" + spec.id));
    int m = spec.range_size();

    for (int s = 0; s < n_samples; ++s) {
        std::vector<int> tokens;
        tokens.reserve(static_cast<std::size_t>(seq_len));
        if (spec.grammar == Grammar::markov) {
            int cur = rng.sample_discrete(spec.start);
            tokens.push_back(spec.vocab_lo + cur);
            for (int t = 1; t < seq_len; ++t) {
                std::vector<double> row(spec.transition.begin() + static_cast<std::ptrdiff_t>(cur) * m,
                                        spec.transition.begin() + static_cast<std::ptrdiff_t>(cur + 1) * m);
                cur = rng.sample_discrete(row);
                tokens.push_back(spec.vocab_lo + cur);
            }
        } else {
            // Balanced bracket string of even length <= seq_len; the pair-type
            // regime is drawn once per sample.
            const std::vector<double>& weights =
                (!spec.pair_weights_rare.empty() && rng.uniform01() < spec.regime_prob)
                    ? spec.pair_weights_rare
                    : spec.pair_weights;
            int len = seq_len - (seq_len % 2);
            std::vector<int> stack;  // open pair types
            int used = 0;
            while (used < len) {
                int remaining = len - used;
                int depth = static_cast<int>(stack.size());
                bool can_open = depth < spec.depth_limit && remaining >= depth + 2;
                bool can_close = depth > 0;
                bool open;
                if (can_open && can_close)
                    open = rng.uniform01() < 0.55;
                else if (can_open)
                    open = true;
                else
                    open = false;
                if (open) {
                    int pair = rng.sample_discrete(weights);
                    stack.push_back(pair);
                    tokens.push_back(spec.vocab_lo + 2 * pair);
                } else {
                    int pair = stack.back();
                    stack.pop_back();
                    tokens.push_back(spec.vocab_lo + 2 * pair + 1);
                }
                ++used;
            }
        }
        corpus.samples.push_back(std::move(tokens));
    }
    return corpus;
}

inline McTask make_mc_task(const Corpus& corpus, const LanguageSpec& spec, int n_items,
                           std::uint64_t seed) {
    if (corpus.samples.empty()) throw InputError("make_mc_task: empty corpus");
    if (spec.range_size() < 4)
        throw ConfigError("make_mc_task: vocab range smaller than 4 cannot host distractors");
    if (n_items < 0) throw InputError("make_mc_task: negative item count");

    McTask task;
    task.language = corpus.language;
    task.items.reserve(static_cast<std::size_t>(n_items));
    Rng rng(derive_seed(seed, "mc-task:" + corpus.language));

    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < corpus.samples.size(); ++i)
        if (corpus.samples[i].size() >= 2) usable.push_back(i);
    if (usable.empty()) throw InputError("make_mc_task: no sample has length >= 2");

    for (int n = 0; n < n_items; ++n) {
        const auto& sample = corpus.samples[usable[rng.below(usable.size())]];
        // Gold is the token at a random non-initial position.
        int pos = 1 + rng.below_int(static_cast<int>(sample.size()) - 1);
        McItem item;
        item.prefix.assign(sample.begin(), sample.begin() + pos);
        item.gold = sample[static_cast<std::size_t>(pos)];
        for (int d = 0; d < 3; ++d) {
            int tok;
            bool fresh;
            do {
                tok = spec.vocab_lo + rng.below_int(spec.range_size());
                fresh = tok != item.gold;
                for (int e = 0; e < d; ++e) fresh = fresh && tok != item.distractors[static_cast<std::size_t>(e)];
            } while (!fresh);
            item.distractors[static_cast<std::size_t>(d)] = tok;
        }
        task.items.push_back(std::move(item));
    }
    return task;
}

inline std::pair<Corpus, Corpus> split_corpus(const Corpus& corpus, double heldout_fraction,
                                              std::uint64_t seed) {
    if (!(heldout_fraction > 0.0 && heldout_fraction < 1.0))
        throw InputError("split_corpus: fraction must lie in (0, 1)");
    std::vector<std::size_t> order(corpus.samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(seed, "split:" + corpus.language));
    rng.shuffle(order);

    auto n_heldout = static_cast<std::size_t>(
        std::llround(heldout_fraction * static_cast<double>(corpus.samples.size())));
    n_heldout = std::min(n_heldout, corpus.samples.size());

    Corpus heldout, train;
    heldout.language = train.language = corpus.language;
    heldout.split = Split::heldout;
    train.split = Split::train;
    for (std::size_t i = 0; i < order.size(); ++i) {
        const auto& s = corpus.samples[order[i]];
        if (i < n_heldout)
            heldout.samples.push_back(s);
        else
            train.samples.push_back(s);
    }
    return {train, heldout};
}

// ----------------------------- default language builders -----------------------------

inline std::vector<double> zipf_weights(int m, double s) {
    std::vector<double> w(static_cast<std::size_t>(m));
    double sum = 0.0;
    for (int j = 0; j < m; ++j) {
        w[static_cast<std::size_t>(j)] = 1.0 / std::pow(static_cast<double>(j + 1), s);
        sum += w[static_cast<std::size_t>(j)];
    }
    for (double& v : w) v /= sum;
    return w;
}

// Order-1 chain with two closed token blocks: the common block [lo, hi-r)
// and a rare block [hi-r, hi). Chains never cross blocks, and the start
// distribution picks the rare block with probability regime_prob, so each
// sample commits to one regime. The per-sample statistics this induces are
// two-point mixtures, which is what gives per-neuron relevance distributions
// their heavy tails. Rows are Zipf-shaped with multiplicative jitter (the
// jitter structure is what differentiates one markov language from another).
inline LanguageSpec make_markov_language(const std::string& id, int lo, int hi, double zipf_s,
                                         double jitter, int regime_tokens, double regime_prob,
                                         std::uint64_t seed) {
    LanguageSpec spec;
    spec.id = id;
    spec.vocab_lo = lo;
    spec.vocab_hi = hi;
    spec.grammar = Grammar::markov;
    int m = hi - lo;
    int r = std::clamp(regime_tokens, 0, m - 2);
    if (r == 1) r = 2;  // a closed block needs at least two states
    int a = m - r;
    if (m < 4) throw ConfigError("make_markov_language: range too small");
    if (regime_prob < 0.0 || regime_prob > 1.0)
        throw ConfigError("make_markov_language: regime_prob outside [0,1]");
    Rng rng(derive_seed(seed, "markov:" + id));

    auto block_row = [&](int block_lo, int block_size) {
        std::vector<double> weights = zipf_weights(block_size, zipf_s);
        std::vector<double> row(static_cast<std::size_t>(m), 0.0);
        double sum = 0.0;
        for (int j = 0; j < block_size; ++j) {
            double u = rng.uniform01() * 2.0 - 1.0;
            double w = weights[static_cast<std::size_t>(j)] * std::exp(jitter * u);
            row[static_cast<std::size_t>(block_lo + j)] = w;
            sum += w;
        }
        for (int j = 0; j < block_size; ++j) row[static_cast<std::size_t>(block_lo + j)] /= sum;
        return row;
    };

    spec.transition.assign(static_cast<std::size_t>(m) * static_cast<std::size_t>(m), 0.0);
    for (int cur = 0; cur < m; ++cur) {
        std::vector<double> row = cur < a ? block_row(0, a) : block_row(a, r);
        std::copy(row.begin(), row.end(), spec.transition.begin() + static_cast<std::ptrdiff_t>(cur) * m);
    }

    spec.start.assign(static_cast<std::size_t>(m), 0.0);
    std::vector<double> start_a = zipf_weights(a, zipf_s);
    for (int j = 0; j < a; ++j) spec.start[static_cast<std::size_t>(j)] = (1.0 - regime_prob) * start_a[static_cast<std::size_t>(j)];
    if (r > 0) {
        std::vector<double> start_r = zipf_weights(r, zipf_s);
        for (int j = 0; j < r; ++j)
            spec.start[static_cast<std::size_t>(a + j)] = regime_prob * start_r[static_cast<std::size_t>(j)];
    } else {
        for (double& v : spec.start) v /= (1.0 - regime_prob);
    }
    return spec;
}

// Balanced-bracket language with the same two-regime structure over pair
// types: common pairs [0, P-r) and rare pairs [P-r, P), one regime per
// sample.
inline LanguageSpec make_bracket_language(const std::string& id, int lo, int hi, double zipf_s,
                                          int depth_limit, int regime_tokens, double regime_prob,
                                          std::uint64_t seed) {
    (void)seed;
    LanguageSpec spec;
    spec.id = id;
    spec.vocab_lo = lo;
    spec.vocab_hi = hi;
    spec.grammar = Grammar::bracket;
    spec.depth_limit = depth_limit;
    spec.regime_prob = regime_prob;
    int m = hi - lo;
    if (m < 4 || m % 2 != 0) throw ConfigError("make_bracket_language: range must be even and >= 4");
    int pairs = m / 2;
    int rare_pairs = std::clamp(regime_tokens / 2, 0, pairs - 1);
    int common_pairs = pairs - rare_pairs;

    std::vector<double> common = zipf_weights(common_pairs, zipf_s);
    spec.pair_weights.assign(static_cast<std::size_t>(pairs), 0.0);
    std::copy(common.begin(), common.end(), spec.pair_weights.begin());
    if (rare_pairs > 0) {
        std::vector<double> rare = zipf_weights(rare_pairs, zipf_s);
        spec.pair_weights_rare.assign(static_cast<std::size_t>(pairs), 0.0);
        std::copy(rare.begin(), rare.end(),
                  spec.pair_weights_rare.begin() + static_cast<std::ptrdiff_t>(common_pairs));
    } else {
        spec.regime_prob = 0.0;
    }
    return spec;
}

// ----------------------------- corpus files -----------------------------
// UTF-8; header "#lang=<id> split=<name>", then one sample per line as
// space-separated token ids.

inline std::string corpus_to_text(const Corpus& corpus) {
    std::string out = "#lang=" + corpus.language + " split=" + split_name(corpus.split) + "\n";
    for (const auto& sample : corpus.samples) {
        for (std::size_t i = 0; i < sample.size(); ++i) {
            if (i) out.push_back(' ');
            out += std::to_string(sample[i]);
        }
        out.push_back('\n');
    }
    return out;
}

inline Corpus corpus_from_text(const std::string& text, const std::string& what) {
    Corpus corpus;
    std::size_t line_no = 0;
    std::size_t start = 0;
    bool have_header = false;
    while (start <= text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        std::string line = trim(std::string_view(text).substr(start, end - start));
        ++line_no;
        start = end + 1;
        if (line.empty()) {
            if (start > text.size()) break;
            continue;
        }
        if (!have_header) {
            if (line.rfind("#lang=", 0) != 0)
                throw FormatError(what + ":" + std::to_string(line_no) + ": missing corpus header");
            std::size_t sp = line.find(' ');
            if (sp == std::string::npos || line.find("split=", sp + 1) != sp + 1)
                throw FormatError(what + ":" + std::to_string(line_no) + ": malformed corpus header");
            corpus.language = line.substr(6, sp - 6);
            std::string split = line.substr(sp + 7);
            if (split == "train")
                corpus.split = Split::train;
            else if (split == "heldout")
                corpus.split = Split::heldout;
            else
                throw FormatError(what + ":" + std::to_string(line_no) + ": unknown split '" + split + "'");
            have_header = true;
            continue;
        }
        if (line[0] == '#') continue;
        std::vector<int> sample;
        for (const auto& field : split(line, ' ')) {
            if (field.empty()) continue;
            long long v = parse_int(field, what + ":" + std::to_string(line_no));
            if (v < 0) throw FormatError(what + ":" + std::to_string(line_no) + ": negative token id");
            sample.push_back(static_cast<int>(v));
        }
        if (!sample.empty()) corpus.samples.push_back(std::move(sample));
    }
    if (!have_header) throw FormatError(what + ": empty corpus file");
    return corpus;
}

inline void write_corpus(const std::filesystem::path& path, const Corpus& corpus) {
    atomic_write_file(path, corpus_to_text(corpus));
}

inline Corpus read_corpus(const std::filesystem::path& path) {
    return corpus_from_text(read_file(path), path.filename().string());
}

}  // namespace crane
