#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "crane/corpus.hpp"

using namespace crane;

namespace {

// Independent stack-based balance checker for bracket samples.
bool balanced(const std::vector<int>& tokens, int lo, int depth_limit) {
    std::vector<int> stack;
    for (int t : tokens) {
        int rel = t - lo;
        if (rel < 0) return false;
        if (rel % 2 == 0) {
            stack.push_back(rel / 2);
            if (static_cast<int>(stack.size()) > depth_limit) return false;
        } else {
            if (stack.empty() || stack.back() != rel / 2) return false;
            stack.pop_back();
        }
    }
    return stack.empty();
}

LanguageSpec tiny_markov() {
    return make_markov_language("L1", 0, 16, 1.0, 1.0, 4, 0.07, 42);
}

}  // namespace

TEST_CASE("markov language builder produces stochastic rows with closed regimes") {
    LanguageSpec spec = tiny_markov();
    REQUIRE_NOTHROW(spec.validate());
    int m = spec.range_size();
    int common = m - 4;  // regime_tokens = 4
    for (int r = 0; r < m; ++r) {
        double sum = 0.0;
        for (int j = 0; j < m; ++j) sum += spec.transition[static_cast<std::size_t>(r * m + j)];
        CHECK_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-9));
        // blocks are closed: no cross-regime transitions
        for (int j = 0; j < m; ++j) {
            bool cross = (r < common) != (j < common);
            if (cross) CHECK(spec.transition[static_cast<std::size_t>(r * m + j)] == 0.0);
        }
    }
    // start mass splits by the regime probability
    double rare_mass = 0.0;
    for (int j = common; j < m; ++j) rare_mass += spec.start[static_cast<std::size_t>(j)];
    CHECK_THAT(rare_mass, Catch::Matchers::WithinAbs(0.07, 1e-12));
}

TEST_CASE("generate_corpus basics") {
    LanguageSpec spec = tiny_markov();

    SECTION("zero samples gives an empty corpus") {
        Corpus c = generate_corpus(spec, 0, 32, 7);
        CHECK(c.samples.empty());
        CHECK(c.language == "L1");
    }

    SECTION("deterministic per seed, different across seeds") {
        Corpus a = generate_corpus(spec, 20, 32, 7);
        Corpus b = generate_corpus(spec, 20, 32, 7);
        Corpus c = generate_corpus(spec, 20, 32, 8);
        CHECK(a.samples == b.samples);
        CHECK(a.samples != c.samples);
    }

    SECTION("tokens stay in range with requested length") {
        Corpus c = generate_corpus(spec, 50, 24, 3);
        for (const auto& s : c.samples) {
            CHECK(s.size() == 24);
            for (int t : s) {
                CHECK(t >= spec.vocab_lo);
                CHECK(t < spec.vocab_hi);
            }
        }
    }

    SECTION("invalid transition matrix is rejected") {
        LanguageSpec bad = spec;
        bad.transition[3] += 0.5;
        CHECK_THROWS_AS(generate_corpus(bad, 5, 8, 1), ConfigError);
    }
}

TEST_CASE("deterministic permutation chain cycles") {
    // Transition = cyclic shift permutation; every sample walks the same cycle
    // from its start token.
    int m = 8;
    LanguageSpec spec;
    spec.id = "perm";
    spec.vocab_lo = 0;
    spec.vocab_hi = m;
    spec.grammar = Grammar::markov;
    spec.transition.assign(static_cast<std::size_t>(m) * m, 0.0);
    for (int r = 0; r < m; ++r) spec.transition[static_cast<std::size_t>(r * m + (r + 1) % m)] = 1.0;
    spec.start.assign(static_cast<std::size_t>(m), 1.0 / m);

    Corpus c = generate_corpus(spec, 30, 16, 5);
    for (const auto& s : c.samples)
        for (std::size_t t = 0; t + 1 < s.size(); ++t) CHECK(s[t + 1] == (s[t] + 1) % m);
}

TEST_CASE("bracket corpus always balances") {
    LanguageSpec spec = make_bracket_language("L3", 64, 96, 1.2, 6, 8, 0.07, 11);
    REQUIRE_NOTHROW(spec.validate());
    Corpus c = generate_corpus(spec, 200, 32, 9);
    for (const auto& s : c.samples) {
        CHECK(s.size() == 32);
        CHECK(balanced(s, 64, 6));
    }
    // odd requested length rounds down to even
    Corpus odd = generate_corpus(spec, 5, 31, 9);
    for (const auto& s : odd.samples) {
        CHECK(s.size() == 30);
        CHECK(balanced(s, 64, 6));
    }
}

TEST_CASE("distinct languages realize disjoint token sets") {
    LanguageSpec a = make_markov_language("L1", 0, 32, 1.0, 1.0, 8, 0.07, 1);
    LanguageSpec b = make_markov_language("L2", 32, 64, 1.3, 1.0, 8, 0.07, 2);
    LanguageSpec c = make_bracket_language("L3", 64, 96, 1.2, 6, 8, 0.07, 3);
    std::set<int> sa, sb, sc;
    for (const auto& s : generate_corpus(a, 50, 32, 4).samples) sa.insert(s.begin(), s.end());
    for (const auto& s : generate_corpus(b, 50, 32, 4).samples) sb.insert(s.begin(), s.end());
    for (const auto& s : generate_corpus(c, 50, 32, 4).samples) sc.insert(s.begin(), s.end());
    for (int t : sa) CHECK((sb.count(t) == 0 && sc.count(t) == 0));
    for (int t : sb) CHECK(sc.count(t) == 0);
}

TEST_CASE("make_mc_task") {
    LanguageSpec spec = tiny_markov();
    Corpus corpus = generate_corpus(spec, 100, 32, 21);

    SECTION("one item with four distinct options") {
        McTask task = make_mc_task(corpus, spec, 1, 13);
        REQUIRE(task.items.size() == 1);
        const McItem& it = task.items[0];
        std::set<int> options{it.gold, it.distractors[0], it.distractors[1], it.distractors[2]};
        CHECK(options.size() == 4);
        for (int o : options) {
            CHECK(o >= spec.vocab_lo);
            CHECK(o < spec.vocab_hi);
        }
        CHECK_FALSE(it.prefix.empty());
    }

    SECTION("same seed reproduces the task") {
        McTask t1 = make_mc_task(corpus, spec, 50, 13);
        McTask t2 = make_mc_task(corpus, spec, 50, 13);
        REQUIRE(t1.items.size() == t2.items.size());
        for (std::size_t i = 0; i < t1.items.size(); ++i) {
            CHECK(t1.items[i].prefix == t2.items[i].prefix);
            CHECK(t1.items[i].gold == t2.items[i].gold);
            CHECK(t1.items[i].distractors == t2.items[i].distractors);
        }
    }

    SECTION("empty corpus is rejected") {
        Corpus empty;
        empty.language = "L1";
        CHECK_THROWS_AS(make_mc_task(empty, spec, 5, 1), InputError);
    }

    SECTION("range smaller than 4 is rejected") {
        LanguageSpec narrow;
        narrow.id = "n";
        narrow.vocab_lo = 0;
        narrow.vocab_hi = 3;
        Corpus c;
        c.language = "n";
        c.samples = {{0, 1, 2}};
        CHECK_THROWS_AS(make_mc_task(c, narrow, 1, 1), ConfigError);
    }

    SECTION("gold marginals track non-initial token frequency") {
        // Oracle: gold tokens are drawn from uniformly random non-initial
        // positions, so their frequency should match the corpus frequency of
        // non-initial tokens within binomial error.
        Corpus big = generate_corpus(spec, 400, 32, 77);
        McTask task = make_mc_task(big, spec, 4000, 5);
        std::map<int, double> corpus_freq;
        double total = 0.0;
        for (const auto& s : big.samples)
            for (std::size_t t = 1; t < s.size(); ++t) {
                corpus_freq[s[t]] += 1.0;
                total += 1.0;
            }
        for (auto& [tok, cnt] : corpus_freq) cnt /= total;
        std::map<int, int> gold_count;
        for (const auto& it : task.items) gold_count[it.gold]++;
        double n = static_cast<double>(task.items.size());
        for (const auto& [tok, p] : corpus_freq) {
            if (p < 0.01) continue;  // skip rare tokens where 5-sigma is vacuous
            double expected = n * p;
            double sigma = std::sqrt(n * p * (1.0 - p));
            CHECK(std::abs(gold_count[tok] - expected) <= 5.0 * sigma);
        }
    }
}

TEST_CASE("split_corpus") {
    LanguageSpec spec = tiny_markov();
    Corpus corpus = generate_corpus(spec, 10, 8, 3);

    SECTION("half split of 10 gives 5/5") {
        auto [train, heldout] = split_corpus(corpus, 0.5, 17);
        CHECK(train.samples.size() == 5);
        CHECK(heldout.samples.size() == 5);
        CHECK(train.split == Split::train);
        CHECK(heldout.split == Split::heldout);
    }

    SECTION("splits partition the original multiset") {
        auto [train, heldout] = split_corpus(corpus, 0.3, 17);
        std::multiset<std::vector<int>> original(corpus.samples.begin(), corpus.samples.end());
        std::multiset<std::vector<int>> both(train.samples.begin(), train.samples.end());
        both.insert(heldout.samples.begin(), heldout.samples.end());
        CHECK(original == both);
    }

    SECTION("deterministic per seed") {
        auto [t1, h1] = split_corpus(corpus, 0.3, 17);
        auto [t2, h2] = split_corpus(corpus, 0.3, 17);
        CHECK(t1.samples == t2.samples);
        CHECK(h1.samples == h2.samples);
    }

    SECTION("fraction out of range is rejected") {
        CHECK_THROWS_AS(split_corpus(corpus, 0.0, 1), InputError);
        CHECK_THROWS_AS(split_corpus(corpus, 1.0, 1), InputError);
    }
}

TEST_CASE("corpus file round-trip") {
    LanguageSpec spec = tiny_markov();
    Corpus corpus = generate_corpus(spec, 25, 16, 3);
    corpus.split = Split::heldout;
    std::string text = corpus_to_text(corpus);
    Corpus back = corpus_from_text(text, "mem");
    CHECK(back.language == corpus.language);
    CHECK(back.split == corpus.split);
    CHECK(back.samples == corpus.samples);

    SECTION("missing header is a format error") {
        CHECK_THROWS_AS(corpus_from_text("1 2 3\n", "mem"), FormatError);
    }
    SECTION("bad token is a format error with the line") {
        try {
            corpus_from_text("#lang=x split=train\n1 2\n3 oops\n", "mem");
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find(":3") != std::string::npos);
        }
    }
}
