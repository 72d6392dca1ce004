#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "crane/corpus.hpp"
#include "crane/model.hpp"
#include "crane/rng.hpp"
#include "crane/train.hpp"

using namespace crane;

namespace {

ModelConfig grad_config(Activation act, Norm norm) {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_mlp = 8;
    c.vocab_size = 12;
    c.max_seq_len = 8;
    c.activation = act;
    c.norm = norm;
    return c;
}

std::vector<std::vector<int>> grad_sequences(int vocab) {
    Rng rng(2024);
    std::vector<std::vector<int>> seqs;
    for (int s = 0; s < 3; ++s) {
        std::vector<int> t(static_cast<std::size_t>(5 + s));
        for (int& x : t) x = rng.below_int(vocab);
        seqs.push_back(std::move(t));
    }
    return seqs;
}

double batch_loss(const ModelWeights& w, const std::vector<std::vector<int>>& seqs) {
    double loss = 0.0;
    for (const auto& s : seqs) loss += sequence_loss(w, s);
    return loss / static_cast<double>(seqs.size());
}

// Central finite differences against the analytic gradients; reports the
// worst guarded relative error over every parameter.
double max_grad_error(const ModelConfig& config, double h) {
    ModelWeights w = build_model(config, 3);
    // Lift weights well away from the init scale so activations and logits
    // are non-degenerate (and relu kinks are far from the probe step).
    for_each_tensor(w, [](std::string_view name, std::vector<double>& t) {
        if (name.find("norm") == std::string_view::npos)
            for (double& v : t) v *= 40.0;
    });
    auto seqs = grad_sequences(config.vocab_size);

    ModelWeights analytic = make_zero_weights(config);
    double bw = 1.0 / static_cast<double>(seqs.size());
    for (const auto& s : seqs) sequence_loss_grad(w, s, bw, analytic);

    double worst = 0.0;
    for_each_tensor(w, [&](std::string_view name, std::vector<double>& tensor) {
        std::vector<double>* ga = nullptr;
        for_each_tensor(analytic, [&](std::string_view n2, std::vector<double>& t2) {
            if (n2 == name) ga = &t2;
        });
        REQUIRE(ga != nullptr);
        for (std::size_t i = 0; i < tensor.size(); ++i) {
            double keep = tensor[i];
            tensor[i] = keep + h;
            double up = batch_loss(w, seqs);
            tensor[i] = keep - h;
            double dn = batch_loss(w, seqs);
            tensor[i] = keep;
            double fd = (up - dn) / (2.0 * h);
            double a = (*ga)[i];
            double err = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-3});
            worst = std::max(worst, err);
        }
    });
    return worst;
}

}  // namespace

TEST_CASE("analytic gradients match central finite differences") {
    SECTION("relu + rmsnorm") {
        CHECK(max_grad_error(grad_config(Activation::relu, Norm::rmsnorm), 1e-5) <= 1e-4);
    }
    SECTION("silu + no norm") {
        CHECK(max_grad_error(grad_config(Activation::silu, Norm::none), 1e-5) <= 1e-4);
    }
    SECTION("silu + rmsnorm") {
        CHECK(max_grad_error(grad_config(Activation::silu, Norm::rmsnorm), 1e-5) <= 1e-4);
    }
}

TEST_CASE("zero learning rate leaves weights bit-identical") {
    ModelConfig c = grad_config(Activation::relu, Norm::rmsnorm);
    ModelWeights w = build_model(c, 5);
    LanguageSpec spec = make_markov_language("L1", 0, 12, 1.0, 1.0, 4, 0.07, 4);
    Corpus corpus = generate_corpus(spec, 32, 8, 6);
    TrainConfig tc;
    tc.lr = 0.0;
    tc.steps = 3;
    tc.batch = 4;
    tc.seed = 1;
    ModelWeights out = train(w, corpus, tc);
    bool identical = true;
    for_each_tensor(w, [&](std::string_view name, const std::vector<double>& t) {
        for_each_tensor(out, [&](std::string_view n2, const std::vector<double>& t2) {
            if (n2 == name && t != t2) identical = false;
        });
    });
    CHECK(identical);
}

TEST_CASE("200 steps on a fixed 3-language corpus reduce the loss") {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_mlp = 16;
    c.vocab_size = 24;
    c.max_seq_len = 16;
    ModelWeights w = build_model(c, 11);

    Corpus mixed;
    mixed.language = "mixed";
    for (int li = 0; li < 3; ++li) {
        LanguageSpec spec = make_markov_language("L" + std::to_string(li + 1), li * 8, (li + 1) * 8,
                                                 1.0, 1.0, 2, 0.07, static_cast<std::uint64_t>(li));
        Corpus one = generate_corpus(spec, 40, 12, 20 + static_cast<std::uint64_t>(li));
        for (auto& s : one.samples) mixed.samples.push_back(std::move(s));
    }

    auto loss_on = [&](const ModelWeights& m) {
        double loss = 0.0;
        for (const auto& s : mixed.samples) loss += sequence_loss(m, s);
        return loss / static_cast<double>(mixed.samples.size());
    };

    double initial = loss_on(w);
    TrainConfig tc;
    tc.lr = 0.5;
    tc.steps = 200;
    tc.batch = 8;
    tc.seed = 2;
    ModelWeights trained = train(w, mixed, tc);
    double final = loss_on(trained);
    INFO("initial " << initial << " final " << final);
    CHECK(final < initial);
}

TEST_CASE("training is deterministic in the seed") {
    ModelConfig c = grad_config(Activation::relu, Norm::rmsnorm);
    ModelWeights w = build_model(c, 5);
    LanguageSpec spec = make_markov_language("L1", 0, 12, 1.0, 1.0, 4, 0.07, 4);
    Corpus corpus = generate_corpus(spec, 32, 8, 6);
    TrainConfig tc;
    tc.lr = 0.2;
    tc.steps = 20;
    tc.batch = 4;
    tc.seed = 9;
    ModelWeights a = train(w, corpus, tc);
    ModelWeights b = train(w, corpus, tc);
    CHECK(a.token_embedding == b.token_embedding);
    CHECK(a.unembedding == b.unembedding);
    CHECK(a.layers[0].mlp_up == b.layers[0].mlp_up);
}

TEST_CASE("non-finite loss raises a training error naming the step") {
    ModelConfig c = grad_config(Activation::relu, Norm::none);
    ModelWeights w = build_model(c, 5);
    for (double& v : w.unembedding) v = 1e308;  // overflow the logits
    for (double& v : w.token_embedding) v = 1e308;
    LanguageSpec spec = make_markov_language("L1", 0, 12, 1.0, 1.0, 4, 0.07, 4);
    Corpus corpus = generate_corpus(spec, 8, 8, 6);
    TrainConfig tc;
    tc.lr = 0.1;
    tc.steps = 2;
    tc.batch = 2;
    tc.seed = 3;
    try {
        train(w, corpus, tc);
        FAIL("expected TrainError");
    } catch (const TrainError& e) {
        CHECK(std::string(e.what()).find("step 0") != std::string::npos);
    }
}
