#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "crane/model.hpp"
#include "crane/rng.hpp"
#include "crane/specialization.hpp"

using namespace crane;

namespace {

RelevanceVector vec_for(const NeuronLayout& layout, const std::string& lang,
                        const std::vector<double>& values) {
    RelevanceVector v;
    v.language = lang;
    v.values = values;
    v.values.resize(static_cast<std::size_t>(layout.total()), 0.0);
    return v;
}

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300});
}

// hand-constructed normalized table for selector fixtures
KurtosisTable manual_table(const NeuronLayout& layout, const std::vector<std::string>& langs) {
    KurtosisTable t;
    t.layout = layout;
    t.languages = langs;
    std::size_t total = langs.size() * static_cast<std::size_t>(layout.total());
    t.raw.assign(total, 0.0);
    t.normalized.assign(total, 0.0);
    t.valid.assign(total, 1);
    t.is_normalized = true;
    return t;
}

}  // namespace

TEST_CASE("observe_sample counts and moments") {
    NeuronLayout layout{2, 3};
    std::vector<std::string> langs{"A", "B"};
    RelevanceAccumulator rel(layout, langs);

    SECTION("one observation leaves central sums at zero") {
        rel.observe(vec_for(layout, "A", {1.0, -2.0, 0.5, 3.0, 0.0, 7.0}));
        for (int n = 0; n < layout.total(); ++n) {
            CHECK(rel.cell(0, n).count() == 1);
            CHECK(rel.cell(0, n).m2() == 0.0);
            CHECK(rel.cell(0, n).m3() == 0.0);
            CHECK(rel.cell(0, n).m4() == 0.0);
            CHECK(rel.cell(1, n).count() == 0);
        }
        CHECK(rel.cell(0, 1).mean() == -2.0);
    }

    SECTION("constant stream gives mean 1, M2 0") {
        for (int i = 0; i < 3; ++i) rel.observe(vec_for(layout, "A", {1.0, 1.0, 1.0, 1.0, 1.0, 1.0}));
        CHECK(rel.cell(0, 0).mean() == 1.0);
        CHECK(rel.cell(0, 0).m2() == 0.0);
    }

    SECTION("unknown language is rejected") {
        CHECK_THROWS_AS(rel.observe(vec_for(layout, "C", {})), InputError);
    }

    SECTION("streaming equals a two-pass batch over 1000 values") {
        Rng rng(31);
        std::vector<double> xs;
        for (int i = 0; i < 1000; ++i) {
            double x = rng.normal() * 3.0 + 0.5;
            xs.push_back(x);
            rel.observe(vec_for(layout, "B", {x}));
        }
        double mean = 0.0;
        for (double x : xs) mean += x;
        mean /= 1000.0;
        double m2 = 0.0, m4 = 0.0;
        for (double x : xs) {
            m2 += (x - mean) * (x - mean);
            m4 += std::pow(x - mean, 4);
        }
        double batch_kurt = 1000.0 * m4 / (m2 * m2);
        auto k = kurtosis_of(rel, {0, 0}, "B");
        REQUIRE(k.has_value());
        CHECK(rel_err(*k, batch_kurt) < 1e-10);
    }
}

TEST_CASE("accumulator merge") {
    NeuronLayout layout{1, 2};
    std::vector<std::string> langs{"A"};
    Rng rng(17);

    RelevanceAccumulator whole(layout, langs), first(layout, langs), second(layout, langs);
    for (int i = 0; i < 1000; ++i) {
        std::vector<double> v{rng.normal(), rng.normal() * 2.0 + 1.0};
        RelevanceVector r = vec_for(layout, "A", v);
        whole.observe(r);
        (i < 500 ? first : second).observe(r);
    }

    SECTION("merge of halves equals the single pass") {
        RelevanceAccumulator merged = first;
        merged.merge(second);
        for (int n = 0; n < 2; ++n) {
            CHECK(merged.cell(0, n).count() == whole.cell(0, n).count());
            CHECK(rel_err(merged.cell(0, n).mean(), whole.cell(0, n).mean()) < 1e-12);
            CHECK(rel_err(merged.cell(0, n).m4(), whole.cell(0, n).m4()) < 1e-10);
        }
    }

    SECTION("merge with empty is the identity") {
        RelevanceAccumulator merged = whole;
        merged.merge(RelevanceAccumulator(layout, langs));
        for (int n = 0; n < 2; ++n) {
            CHECK(merged.cell(0, n).mean() == whole.cell(0, n).mean());
            CHECK(merged.cell(0, n).m4() == whole.cell(0, n).m4());
        }
    }

    SECTION("commutativity within 1e-10") {
        RelevanceAccumulator ab = first, ba = second;
        ab.merge(second);
        ba.merge(first);
        for (int n = 0; n < 2; ++n) {
            CHECK(rel_err(ab.cell(0, n).m2(), ba.cell(0, n).m2()) < 1e-10);
            CHECK(rel_err(ab.cell(0, n).m4(), ba.cell(0, n).m4()) < 1e-10);
        }
    }

    SECTION("layout mismatch is rejected") {
        RelevanceAccumulator other(NeuronLayout{2, 2}, langs);
        CHECK_THROWS_AS(whole.merge(other), InputError);
    }
}

TEST_CASE("normalize_layerwise") {
    NeuronLayout layout{2, 2};
    std::vector<std::string> langs{"A"};

    SECTION("two-point slice z-scores to -1, +1") {
        KurtosisTable t = manual_table(layout, langs);
        t.is_normalized = false;
        t.raw = {1.0, 3.0, 5.0, 5.0};  // layer0: {1,3}, layer1: {5,5}
        KurtosisTable n = normalize_layerwise(t);
        CHECK_THAT(n.normalized[0], Catch::Matchers::WithinAbs(-1.0, 1e-12));
        CHECK_THAT(n.normalized[1], Catch::Matchers::WithinAbs(1.0, 1e-12));
        // zero-variance slice collapses to zeros
        CHECK(n.normalized[2] == 0.0);
        CHECK(n.normalized[3] == 0.0);
    }

    SECTION("slices have mean 0 and unit variance; idempotent") {
        NeuronLayout big{3, 64};
        RelevanceAccumulator acc(big, langs);
        Rng rng(9);
        for (int i = 0; i < 200; ++i) {
            std::vector<double> v(static_cast<std::size_t>(big.total()));
            for (double& x : v) x = rng.normal() * std::exp(rng.normal());
            acc.observe(vec_for(big, "A", v));
        }
        KurtosisTable n = normalize_layerwise(kurtosis_table(acc));
        for (int layer = 0; layer < big.n_layers; ++layer) {
            double sum = 0.0, sq = 0.0;
            int count = 0;
            for (int i = 0; i < big.d_mlp; ++i) {
                std::size_t ix = n.idx(0, layer * big.d_mlp + i);
                if (!n.valid[ix]) continue;
                sum += n.normalized[ix];
                sq += n.normalized[ix] * n.normalized[ix];
                ++count;
            }
            REQUIRE(count > 0);
            double mean = sum / count;
            double var = sq / count - mean * mean;
            CHECK(std::abs(mean) < 1e-9);
            CHECK(std::abs(var - 1.0) < 1e-9);
        }
        KurtosisTable again = normalize_layerwise(n);
        for (std::size_t i = 0; i < n.normalized.size(); ++i)
            CHECK(std::abs(again.normalized[i] - n.normalized[i]) <= 1e-9);
    }
}

TEST_CASE("crane_select") {
    NeuronLayout layout{1, 8};
    std::vector<std::string> langs{"T", "O1", "O2"};
    SelectionConfig sel;
    sel.threshold = 1.0;
    sel.budget = 8;

    SECTION("contrast region membership") {
        KurtosisTable t = manual_table(layout, langs);
        // neuron 0: target 2.0, max-other 0.5 -> selected
        t.normalized[t.idx(0, 0)] = 2.0;
        t.normalized[t.idx(1, 0)] = 0.5;
        t.normalized[t.idx(2, 0)] = 0.2;
        // neuron 1: target 2.0 but another language at 1.5 -> excluded
        t.normalized[t.idx(0, 1)] = 2.0;
        t.normalized[t.idx(1, 1)] = 1.5;
        NeuronSet set = crane_select(t, "T", sel);
        CHECK(set.contains({0, 0}));
        CHECK_FALSE(set.contains({0, 1}));
        CHECK(set.method == SelectionMethod::crane);
        CHECK(set.target_language == "T");
    }

    SECTION("budget keeps the largest margins with fixed tie-break") {
        KurtosisTable t = manual_table(layout, langs);
        struct Row {
            int n;
            double kt, other;
        };
        // margins: n0 -> 1.6, n1 -> 2.0, n2 -> 1.3, n3 -> 2.0, n4 -> 1.2
        std::vector<Row> rows{{0, 1.8, 0.2}, {1, 2.1, 0.1}, {2, 1.5, 0.2}, {3, 2.2, 0.2}, {4, 1.4, 0.2}};
        for (const Row& r : rows) {
            t.normalized[t.idx(0, r.n)] = r.kt;
            t.normalized[t.idx(1, r.n)] = r.other;
            t.normalized[t.idx(2, r.n)] = r.other - 0.1;
        }
        SelectionConfig two = sel;
        two.budget = 2;
        NeuronSet set = crane_select(t, "T", two);
        REQUIRE(set.ids.size() == 2);
        // n1 and n3 tie at margin 2.0 -> lower index wins the second slot
        CHECK(set.contains({0, 1}));
        CHECK(set.contains({0, 3}));
    }

    SECTION("invalid target entries never select; invalid others do not veto") {
        KurtosisTable t = manual_table(layout, langs);
        t.normalized[t.idx(0, 2)] = 3.0;
        t.valid[t.idx(0, 2)] = 0;  // invalid under target
        t.normalized[t.idx(0, 3)] = 3.0;
        t.valid[t.idx(1, 3)] = 0;  // invalid under both others: neutral max-other
        t.valid[t.idx(2, 3)] = 0;
        NeuronSet set = crane_select(t, "T", sel);
        CHECK_FALSE(set.contains({0, 2}));
        CHECK(set.contains({0, 3}));
    }

    SECTION("unnormalized table and unknown target are rejected") {
        KurtosisTable t = manual_table(layout, langs);
        t.is_normalized = false;
        CHECK_THROWS_AS(crane_select(t, "T", sel), InputError);
        KurtosisTable ok = manual_table(layout, langs);
        CHECK_THROWS_AS(crane_select(ok, "X", sel), InputError);
    }
}

TEST_CASE("lape_select") {
    NeuronLayout layout{1, 6};
    std::vector<std::string> langs{"A", "B", "C"};
    ActivationAccumulator act(layout, langs);
    // token count 100 everywhere; positives encode the fixture probabilities
    auto fill = [&](int n, double pa, double pb, double pc) {
        act.restore(0, n, 100, static_cast<std::uint64_t>(pa * 100));
        act.restore(1, n, 100, static_cast<std::uint64_t>(pb * 100));
        act.restore(2, n, 100, static_cast<std::uint64_t>(pc * 100));
    };
    fill(0, 0.9, 0.0, 0.0);    // pure selectivity: H=0, top target probability
    fill(1, 0.5, 0.5, 0.5);    // uniform: maximal entropy
    fill(2, 0.6, 0.1, 0.1);    // moderate entropy 0.7357
    fill(3, 0.2, 0.8, 0.0);    // argmax B
    fill(4, 0.85, 0.05, 0.05); // entropy 0.4094, above the 25th percentile
    fill(5, 0.7, 0.0, 0.0);    // second pure-selectivity neuron

    SelectionConfig sel;
    sel.budget = 6;

    SECTION("hand-computed ordering: thresholds at q25(H)=0.1024, median(p)=0.65") {
        NeuronSet set = lape_select(act, "A", sel);
        REQUIRE(set.ids.size() == 2);
        CHECK(set.contains({0, 0}));
        CHECK(set.contains({0, 5}));
        SelectionConfig one = sel;
        one.budget = 1;
        NeuronSet top = lape_select(act, "A", one);
        REQUIRE(top.ids.size() == 1);
        CHECK(top.ids[0] == NeuronId{0, 0});  // p_target 0.9 ranks first
    }

    SECTION("uniform neuron is excluded") {
        NeuronSet set = lape_select(act, "A", sel);
        CHECK_FALSE(set.contains({0, 1}));
    }

    SECTION("zero-token language is an input error") {
        ActivationAccumulator empty(layout, langs);
        CHECK_THROWS_AS(lape_select(empty, "A", sel), InputError);
    }
}

TEST_CASE("random_select") {
    NeuronLayout layout{4, 16};
    SelectionConfig sel;

    SECTION("budget N returns every neuron") {
        sel.budget = layout.total();
        NeuronSet set = random_select(layout, sel, 3);
        CHECK(static_cast<int>(set.ids.size()) == layout.total());
    }

    SECTION("deterministic per seed") {
        sel.budget = 10;
        CHECK(random_select(layout, sel, 5).ids == random_select(layout, sel, 5).ids);
        CHECK(random_select(layout, sel, 5).ids != random_select(layout, sel, 6).ids);
    }

    SECTION("budget above N is rejected") {
        sel.budget = layout.total() + 1;
        CHECK_THROWS_AS(random_select(layout, sel, 1), InputError);
    }

    SECTION("B=1 draws are uniform within 5 sigma over 10000 seeds") {
        sel.budget = 1;
        std::vector<int> counts(static_cast<std::size_t>(layout.total()), 0);
        for (int s = 0; s < 10000; ++s) {
            NeuronSet set = random_select(layout, sel, static_cast<std::uint64_t>(s));
            counts[static_cast<std::size_t>(layout.flat(set.ids[0]))]++;
        }
        double p = 1.0 / layout.total();
        double expect = 10000.0 * p;
        double sigma = std::sqrt(10000.0 * p * (1.0 - p));
        for (int c : counts) CHECK(std::abs(c - expect) <= 5.0 * sigma);
    }
}

TEST_CASE("selection_quality") {
    NeuronSet a, b;
    a.budget = b.budget = 8;
    for (int i = 0; i < 8; ++i) b.ids.push_back({0, i});

    SECTION("perfect match") {
        a.ids = b.ids;
        SetQuality q = selection_quality(a, b);
        CHECK(q.precision == 1.0);
        CHECK(q.recall == 1.0);
        CHECK(q.f1 == 1.0);
    }

    SECTION("disjoint sets") {
        for (int i = 0; i < 8; ++i) a.ids.push_back({1, i});
        SetQuality q = selection_quality(a, b);
        CHECK(q.precision == 0.0);
        CHECK(q.recall == 0.0);
        CHECK(q.f1 == 0.0);
    }

    SECTION("partial overlap: |sel|=4, |gt|=8, overlap 3") {
        a.ids = {{0, 0}, {0, 1}, {0, 2}, {1, 15}};
        SetQuality q = selection_quality(a, b);
        CHECK_THAT(q.precision, Catch::Matchers::WithinAbs(0.75, 1e-15));
        CHECK_THAT(q.recall, Catch::Matchers::WithinAbs(0.375, 1e-15));
        CHECK_THAT(q.f1, Catch::Matchers::WithinAbs(0.5, 1e-15));
    }

    SECTION("empty selection scores zero precision") {
        SetQuality q = selection_quality(a, b);
        CHECK(q.precision == 0.0);
        CHECK(q.f1 == 0.0);
    }
}

TEST_CASE("stats file round-trip") {
    NeuronLayout layout{2, 4};
    std::vector<std::string> langs{"A", "B"};
    RelevanceAccumulator rel(layout, langs);
    ActivationAccumulator act(layout, langs);
    Rng rng(23);
    for (int i = 0; i < 37; ++i) {
        std::vector<double> v(static_cast<std::size_t>(layout.total()));
        for (double& x : v) x = rng.normal();
        rel.observe(vec_for(layout, i % 2 ? "A" : "B", v));
    }
    for (int lang = 0; lang < 2; ++lang)
        for (int n = 0; n < layout.total(); ++n)
            act.restore(lang, n, 640, static_cast<std::uint64_t>(rng.below(641)));

    std::string bytes = serialize_stats(rel, act);
    auto [rel2, act2] = deserialize_stats(bytes);
    CHECK(rel2.languages() == langs);
    for (int lang = 0; lang < 2; ++lang)
        for (int n = 0; n < layout.total(); ++n) {
            CHECK(rel2.cell(lang, n).count() == rel.cell(lang, n).count());
            CHECK(rel2.cell(lang, n).mean() == rel.cell(lang, n).mean());
            CHECK(rel2.cell(lang, n).m4() == rel.cell(lang, n).m4());
            CHECK(act2.token_count(lang, n) == act.token_count(lang, n));
            CHECK(act2.positive_count(lang, n) == act.positive_count(lang, n));
        }

    SECTION("corruption is rejected") {
        std::string bad = bytes;
        bad[0] = 'X';
        CHECK_THROWS_AS(deserialize_stats(bad), FormatError);
        std::string trunc = bytes.substr(0, bytes.size() - 3);
        CHECK_THROWS_AS(deserialize_stats(trunc), FormatError);
    }
}
