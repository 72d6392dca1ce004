#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crane/errors.hpp"
#include "crane/rng.hpp"
#include "crane/util.hpp"

namespace crane {

// ----------------------------- config -----------------------------

enum class Activation { relu, silu };
enum class Norm { rmsnorm, none };

inline constexpr double kRmsEps = 1e-6;

struct ModelConfig {
    int n_layers = 4;
    int d_model = 64;
    int n_heads = 4;
    int d_mlp = 128;  // neurons per layer
    int vocab_size = 96;
    int max_seq_len = 64;
    Activation activation = Activation::relu;
    Norm norm = Norm::rmsnorm;

    int head_dim() const { return d_model / n_heads; }
    int neuron_count() const { return n_layers * d_mlp; }

    bool operator==(const ModelConfig&) const = default;

    void validate() const {
        if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_mlp < 1 || vocab_size < 1 ||
            max_seq_len < 1)
            throw ConfigError("model config: all dimensions must be >= 1");
        if (d_model % n_heads != 0)
            throw ConfigError("model config: n_heads must divide d_model");
    }
};

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers},
            {"d_model", c.d_model},
            {"n_heads", c.n_heads},
            {"d_mlp", c.d_mlp},
            {"vocab_size", c.vocab_size},
            {"max_seq_len", c.max_seq_len},
            {"activation", c.activation == Activation::relu ? "relu" : "silu"},
            {"norm", c.norm == Norm::rmsnorm ? "rmsnorm" : "none"}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.n_layers = j.at("n_layers").get<int>();
        c.d_model = j.at("d_model").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.d_mlp = j.at("d_mlp").get<int>();
        c.vocab_size = j.at("vocab_size").get<int>();
        c.max_seq_len = j.at("max_seq_len").get<int>();
        std::string act = j.at("activation").get<std::string>();
        std::string norm = j.at("norm").get<std::string>();
        if (act == "relu")
            c.activation = Activation::relu;
        else if (act == "silu")
            c.activation = Activation::silu;
        else
            throw ConfigError("model config: unknown activation '" + act + "'");
        if (norm == "rmsnorm")
            c.norm = Norm::rmsnorm;
        else if (norm == "none")
            c.norm = Norm::none;
        else
            throw ConfigError("model config: unknown norm '" + norm + "'");
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

// ----------------------------- neurons -----------------------------

// One MLP intermediate unit: column `index` of mlp_up paired with row
// `index` of mlp_down in layer `layer`.
struct NeuronId {
    int layer = 0;
    int index = 0;
    auto operator<=>(const NeuronId&) const = default;
};

struct NeuronLayout {
    int n_layers = 0;
    int d_mlp = 0;
    int total() const { return n_layers * d_mlp; }
    int flat(NeuronId id) const { return id.layer * d_mlp + id.index; }
    NeuronId unflat(int i) const { return {i / d_mlp, i % d_mlp}; }
    bool contains(NeuronId id) const {
        return id.layer >= 0 && id.layer < n_layers && id.index >= 0 && id.index < d_mlp;
    }
    bool operator==(const NeuronLayout&) const = default;
};

enum class SelectionMethod { crane, lape, random, planted };

inline const char* method_name(SelectionMethod m) {
    switch (m) {
        case SelectionMethod::crane: return "crane";
        case SelectionMethod::lape: return "lape";
        case SelectionMethod::random: return "random";
        case SelectionMethod::planted: return "planted";
    }
    return "?";
}

inline SelectionMethod method_from_name(const std::string& s) {
    if (s == "crane") return SelectionMethod::crane;
    if (s == "lape") return SelectionMethod::lape;
    if (s == "random") return SelectionMethod::random;
    if (s == "planted") return SelectionMethod::planted;
    throw InputError("unknown selection method '" + s + "'");
}

// The unit of intervention: a deduplicated, sorted set of neurons with the
// method that produced it and the budget it was selected under.
struct NeuronSet {
    std::vector<NeuronId> ids;  // sorted, unique
    SelectionMethod method = SelectionMethod::random;
    std::string target_language;  // empty = none
    int budget = 0;

    void normalize() {
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    }

    bool contains(NeuronId id) const {
        return std::binary_search(ids.begin(), ids.end(), id);
    }

    void validate(const NeuronLayout& layout) const {
        if (budget < 0) throw InputError("neuron set: negative budget");
        if (static_cast<int>(ids.size()) > budget)
            throw InputError("neuron set: size exceeds budget");
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (!layout.contains(ids[i]))
                throw InputError("neuron set: neuron (" + std::to_string(ids[i].layer) + "," +
                                 std::to_string(ids[i].index) + ") outside model layout");
            if (i > 0 && !(ids[i - 1] < ids[i]))
                throw InputError("neuron set: ids not sorted/unique");
        }
    }
};

// ----------------------------- weights -----------------------------

struct LayerWeights {
    std::vector<double> attn_q, attn_k, attn_v, attn_o;  // d_model x d_model
    std::vector<double> mlp_up;                          // d_model x d_mlp
    std::vector<double> mlp_down;                        // d_mlp x d_model
    std::vector<double> norm_attn_scale, norm_mlp_scale; // d_model
};

struct ModelWeights {
    ModelConfig config;
    std::vector<double> token_embedding;   // vocab x d_model
    std::vector<LayerWeights> layers;
    std::vector<double> final_norm_scale;  // d_model
    std::vector<double> unembedding;       // d_model x vocab

    NeuronLayout layout() const { return {config.n_layers, config.d_mlp}; }
};

// Fixed tensor order shared by initialization, serialization, gradients and
// finite-difference sweeps.
template <typename W, typename F>
void for_each_tensor(W& w, F&& f) {
    f("token_embedding", w.token_embedding);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        f(p + "attn_q", w.layers[l].attn_q);
        f(p + "attn_k", w.layers[l].attn_k);
        f(p + "attn_v", w.layers[l].attn_v);
        f(p + "attn_o", w.layers[l].attn_o);
        f(p + "mlp_up", w.layers[l].mlp_up);
        f(p + "mlp_down", w.layers[l].mlp_down);
        f(p + "norm_attn_scale", w.layers[l].norm_attn_scale);
        f(p + "norm_mlp_scale", w.layers[l].norm_mlp_scale);
    }
    f("final_norm_scale", w.final_norm_scale);
    f("unembedding", w.unembedding);
}

inline ModelWeights make_zero_weights(const ModelConfig& config) {
    config.validate();
    ModelWeights w;
    w.config = config;
    auto n = [](int a, int b) { return static_cast<std::size_t>(a) * static_cast<std::size_t>(b); };
    w.token_embedding.assign(n(config.vocab_size, config.d_model), 0.0);
    w.layers.resize(static_cast<std::size_t>(config.n_layers));
    for (auto& layer : w.layers) {
        layer.attn_q.assign(n(config.d_model, config.d_model), 0.0);
        layer.attn_k.assign(n(config.d_model, config.d_model), 0.0);
        layer.attn_v.assign(n(config.d_model, config.d_model), 0.0);
        layer.attn_o.assign(n(config.d_model, config.d_model), 0.0);
        layer.mlp_up.assign(n(config.d_model, config.d_mlp), 0.0);
        layer.mlp_down.assign(n(config.d_mlp, config.d_model), 0.0);
        layer.norm_attn_scale.assign(static_cast<std::size_t>(config.d_model), 0.0);
        layer.norm_mlp_scale.assign(static_cast<std::size_t>(config.d_model), 0.0);
    }
    w.final_norm_scale.assign(static_cast<std::size_t>(config.d_model), 0.0);
    w.unembedding.assign(n(config.d_model, config.vocab_size), 0.0);
    return w;
}

// Scaled-Gaussian init, std = 0.02/sqrt(d_model), norm scales at 1.
// Deterministic in (config, seed).
inline ModelWeights build_model(const ModelConfig& config, std::uint64_t seed) {
    ModelWeights w = make_zero_weights(config);
    Rng rng(derive_seed(seed, "model-init"));
    double std = 0.02 / std::sqrt(static_cast<double>(config.d_model));
    for_each_tensor(w, [&](std::string_view name, std::vector<double>& t) {
        if (name.find("norm") != std::string_view::npos) {
            std::fill(t.begin(), t.end(), 1.0);
        } else {
            for (double& v : t) v = rng.normal(0.0, std);
        }
    });
    return w;
}

// ----------------------------- forward pass -----------------------------

struct LayerTrace {
    std::vector<double> input;        // T x d_model, residual entering the layer
    std::vector<double> attn_normed;  // T x d_model
    std::vector<double> q, k, v;      // T x d_model
    std::vector<double> attn_weights; // n_heads x T x T, row-stochastic over i <= t
    std::vector<double> attn_concat;  // T x d_model, weighted values pre-Wo
    std::vector<double> attn_out;     // T x d_model
    std::vector<double> mid;          // T x d_model, input + attn_out
    std::vector<double> mlp_normed;   // T x d_model
    std::vector<double> mlp_pre;      // T x d_mlp
    std::vector<double> mlp_post;     // T x d_mlp, activation (then masking) applied
    std::vector<double> mlp_out;      // T x d_model
};

struct ForwardTrace {
    int seq_len = 0;
    std::vector<int> tokens;
    std::vector<LayerTrace> layers;
    std::vector<double> final_normed;  // T x d_model
    std::vector<double> logits;        // T x vocab
};

namespace detail {

// out[t*od + o] = sum_i in[t*id + i] * W[i*od + o]
inline void matmul(const std::vector<double>& x, const std::vector<double>& w,
                   std::vector<double>& out, int T, int in_dim, int out_dim) {
    out.assign(static_cast<std::size_t>(T) * static_cast<std::size_t>(out_dim), 0.0);
    for (int t = 0; t < T; ++t) {
        const double* xt = x.data() + static_cast<std::ptrdiff_t>(t) * in_dim;
        double* ot = out.data() + static_cast<std::ptrdiff_t>(t) * out_dim;
        for (int i = 0; i < in_dim; ++i) {
            double xi = xt[i];
            if (xi == 0.0) continue;
            const double* wr = w.data() + static_cast<std::ptrdiff_t>(i) * out_dim;
            for (int o = 0; o < out_dim; ++o) ot[o] += xi * wr[o];
        }
    }
}

inline double rms_of(const double* x, int d) {
    double s = 0.0;
    for (int i = 0; i < d; ++i) s += x[i] * x[i];
    return std::sqrt(s / static_cast<double>(d) + kRmsEps);
}

inline void rmsnorm(const std::vector<double>& x, const std::vector<double>& scale,
                    std::vector<double>& out, int T, int d) {
    out.resize(static_cast<std::size_t>(T) * static_cast<std::size_t>(d));
    for (int t = 0; t < T; ++t) {
        const double* xt = x.data() + static_cast<std::ptrdiff_t>(t) * d;
        double* ot = out.data() + static_cast<std::ptrdiff_t>(t) * d;
        double inv = 1.0 / rms_of(xt, d);
        for (int i = 0; i < d; ++i) ot[i] = xt[i] * inv * scale[static_cast<std::size_t>(i)];
    }
}

inline double activate(Activation a, double x) {
    if (a == Activation::relu) return x > 0.0 ? x : 0.0;
    return x / (1.0 + std::exp(-x));  // silu
}

}  // namespace detail

// Causal decoder forward. `mask_bits`, when non-null, holds one byte per
// neuron (layer-major flat layout); set entries force the corresponding
// post-activation to zero before mlp_down.
inline std::vector<double> forward_impl(const ModelWeights& w, std::span<const int> tokens,
                                        const std::vector<std::uint8_t>* mask_bits,
                                        ForwardTrace* trace) {
    const ModelConfig& c = w.config;
    int T = static_cast<int>(tokens.size());
    if (T < 1) throw InputError("forward: empty token sequence");
    if (T > c.max_seq_len) throw InputError("forward: sequence longer than max_seq_len");
    for (int t = 0; t < T; ++t)
        if (tokens[static_cast<std::size_t>(t)] < 0 || tokens[static_cast<std::size_t>(t)] >= c.vocab_size)
            throw InputError("forward: token id " + std::to_string(tokens[static_cast<std::size_t>(t)]) +
                             " out of range at position " + std::to_string(t));

    int d = c.d_model;
    int hd = c.head_dim();
    double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    bool use_norm = c.norm == Norm::rmsnorm;

    if (trace) {
        trace->seq_len = T;
        trace->tokens.assign(tokens.begin(), tokens.end());
        trace->layers.assign(static_cast<std::size_t>(c.n_layers), {});
    }

    std::vector<double> x(static_cast<std::size_t>(T) * static_cast<std::size_t>(d));
    for (int t = 0; t < T; ++t) {
        const double* row = w.token_embedding.data() +
                            static_cast<std::ptrdiff_t>(tokens[static_cast<std::size_t>(t)]) * d;
        std::copy(row, row + d, x.data() + static_cast<std::ptrdiff_t>(t) * d);
    }

    std::vector<double> xa, q, k, v, concat, attn_out, mid, xm, pre, post, mlp_out;
    for (int l = 0; l < c.n_layers; ++l) {
        const LayerWeights& lw = w.layers[static_cast<std::size_t>(l)];
        LayerTrace* lt = trace ? &trace->layers[static_cast<std::size_t>(l)] : nullptr;
        if (lt) lt->input = x;

        if (use_norm)
            detail::rmsnorm(x, lw.norm_attn_scale, xa, T, d);
        else
            xa = x;
        detail::matmul(xa, lw.attn_q, q, T, d, d);
        detail::matmul(xa, lw.attn_k, k, T, d, d);
        detail::matmul(xa, lw.attn_v, v, T, d, d);

        std::vector<double> attn_w(static_cast<std::size_t>(c.n_heads) * T * T, 0.0);
        concat.assign(static_cast<std::size_t>(T) * static_cast<std::size_t>(d), 0.0);
        std::vector<double> scores(static_cast<std::size_t>(T));
        for (int h = 0; h < c.n_heads; ++h) {
            int off = h * hd;
            for (int t = 0; t < T; ++t) {
                const double* qt = q.data() + static_cast<std::ptrdiff_t>(t) * d + off;
                double mx = -1e300;
                for (int i = 0; i <= t; ++i) {
                    const double* ki = k.data() + static_cast<std::ptrdiff_t>(i) * d + off;
                    double s = 0.0;
                    for (int e = 0; e < hd; ++e) s += qt[e] * ki[e];
                    s *= inv_sqrt_hd;
                    scores[static_cast<std::size_t>(i)] = s;
                    mx = std::max(mx, s);
                }
                double z = 0.0;
                for (int i = 0; i <= t; ++i) {
                    scores[static_cast<std::size_t>(i)] = std::exp(scores[static_cast<std::size_t>(i)] - mx);
                    z += scores[static_cast<std::size_t>(i)];
                }
                double* at = attn_w.data() + (static_cast<std::ptrdiff_t>(h) * T + t) * T;
                double* ct = concat.data() + static_cast<std::ptrdiff_t>(t) * d + off;
                for (int i = 0; i <= t; ++i) {
                    double a = scores[static_cast<std::size_t>(i)] / z;
                    at[i] = a;
                    const double* vi = v.data() + static_cast<std::ptrdiff_t>(i) * d + off;
                    for (int e = 0; e < hd; ++e) ct[e] += a * vi[e];
                }
            }
        }
        detail::matmul(concat, lw.attn_o, attn_out, T, d, d);

        mid.resize(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) mid[i] = x[i] + attn_out[i];

        if (use_norm)
            detail::rmsnorm(mid, lw.norm_mlp_scale, xm, T, d);
        else
            xm = mid;
        detail::matmul(xm, lw.mlp_up, pre, T, d, c.d_mlp);
        post.resize(pre.size());
        for (std::size_t i = 0; i < pre.size(); ++i) post[i] = detail::activate(c.activation, pre[i]);
        if (mask_bits) {
            const std::uint8_t* mb = mask_bits->data() + static_cast<std::ptrdiff_t>(l) * c.d_mlp;
            for (int t = 0; t < T; ++t) {
                double* pt = post.data() + static_cast<std::ptrdiff_t>(t) * c.d_mlp;
                for (int n = 0; n < c.d_mlp; ++n)
                    if (mb[n]) pt[n] = 0.0;
            }
        }
        detail::matmul(post, lw.mlp_down, mlp_out, T, c.d_mlp, d);

        if (lt) {
            lt->attn_normed = xa;
            lt->q = q;
            lt->k = k;
            lt->v = v;
            lt->attn_weights = std::move(attn_w);
            lt->attn_concat = concat;
            lt->attn_out = attn_out;
            lt->mid = mid;
            lt->mlp_normed = xm;
            lt->mlp_pre = pre;
            lt->mlp_post = post;
            lt->mlp_out = mlp_out;
        }

        for (std::size_t i = 0; i < x.size(); ++i) x[i] = mid[i] + mlp_out[i];
    }

    std::vector<double> fn;
    if (use_norm)
        detail::rmsnorm(x, w.final_norm_scale, fn, T, d);
    else
        fn = x;
    std::vector<double> logits;
    detail::matmul(fn, w.unembedding, logits, T, d, c.vocab_size);
    if (trace) {
        trace->final_normed = fn;
        trace->logits = logits;
    }
    return logits;
}

inline ForwardTrace forward(const ModelWeights& w, std::span<const int> tokens) {
    ForwardTrace trace;
    forward_impl(w, tokens, nullptr, &trace);
    return trace;
}

inline std::vector<std::uint8_t> mask_bits_of(const NeuronSet& mask, const NeuronLayout& layout) {
    mask.validate(layout);
    std::vector<std::uint8_t> bits(static_cast<std::size_t>(layout.total()), 0);
    for (const NeuronId& id : mask.ids) bits[static_cast<std::size_t>(layout.flat(id))] = 1;
    return bits;
}

// Identical to forward() except masked neurons' post-activations are set to
// zero before mlp_down; exactly equivalent to zeroing their mlp_down rows.
inline std::vector<double> forward_masked(const ModelWeights& w, std::span<const int> tokens,
                                          const NeuronSet& mask) {
    std::vector<std::uint8_t> bits = mask_bits_of(mask, w.layout());
    return forward_impl(w, tokens, &bits, nullptr);
}

// ----------------------------- weight files -----------------------------
// "CRN1" magic, u32 format version, length-prefixed config JSON, then each
// tensor as little-endian float64 in for_each_tensor order.

inline constexpr char kWeightMagic[4] = {'C', 'R', 'N', '1'};
inline constexpr std::uint32_t kWeightVersion = 1;

inline std::string serialize_model(const ModelWeights& w) {
    std::string out;
    out.append(kWeightMagic, 4);
    put_u32_le(out, kWeightVersion);
    std::string cfg = config_to_json(w.config).dump();
    put_u32_le(out, static_cast<std::uint32_t>(cfg.size()));
    out += cfg;
    for_each_tensor(w, [&](std::string_view, const std::vector<double>& t) {
        for (double v : t) put_f64_le(out, v);
    });
    return out;
}

inline ModelWeights deserialize_model(std::string_view bytes) {
    ByteReader r(bytes, "weight file");
    std::string magic = r.bytes(4);
    if (magic != std::string(kWeightMagic, 4)) throw FormatError("weight file: bad magic");
    std::uint32_t version = r.u32();
    if (version != kWeightVersion)
        throw FormatError("weight file: unsupported version " + std::to_string(version));
    std::uint32_t cfg_len = r.u32();
    std::string cfg_text = r.bytes(cfg_len);
    nlohmann::json cfg_json = nlohmann::json::parse(cfg_text, nullptr, false);
    if (cfg_json.is_discarded()) throw FormatError("weight file: unparsable config block");
    ModelConfig config;
    try {
        config = config_from_json(cfg_json);
    } catch (const ConfigError& e) {
        throw FormatError(std::string("weight file: ") + e.what());
    }
    ModelWeights w = make_zero_weights(config);
    for_each_tensor(w, [&](std::string_view, std::vector<double>& t) {
        for (double& v : t) v = r.f64();
    });
    r.expect_end();
    return w;
}

inline void write_model(const std::filesystem::path& path, const ModelWeights& w) {
    atomic_write_file(path, serialize_model(w));
}

inline ModelWeights read_model(const std::filesystem::path& path) {
    return deserialize_model(read_file(path));
}

// ----------------------------- neuron-set files -----------------------------
// UTF-8 lines "layer,index"; '#' starts a comment.

inline std::string neuron_set_to_text(const NeuronSet& set) {
    std::string out = "# method=" + std::string(method_name(set.method)) +
                      " target=" + (set.target_language.empty() ? "-" : set.target_language) +
                      " budget=" + std::to_string(set.budget) + "\n";
    for (const NeuronId& id : set.ids)
        out += std::to_string(id.layer) + "," + std::to_string(id.index) + "\n";
    return out;
}

inline std::vector<NeuronId> neuron_ids_from_text(const std::string& text, const std::string& what) {
    std::vector<NeuronId> ids;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        std::string line = trim(std::string_view(text).substr(start, end - start));
        ++line_no;
        start = end + 1;
        if (line.empty() || line[0] == '#') continue;
        auto fields = split(line, ',');
        if (fields.size() != 2)
            throw FormatError(what + ":" + std::to_string(line_no) + ": expected 'layer,index'");
        std::string at = what + ":" + std::to_string(line_no);
        ids.push_back({static_cast<int>(parse_int(trim(fields[0]), at)),
                       static_cast<int>(parse_int(trim(fields[1]), at))});
    }
    return ids;
}

inline void write_neuron_set(const std::filesystem::path& path, const NeuronSet& set) {
    atomic_write_file(path, neuron_set_to_text(set));
}

inline std::vector<NeuronId> read_neuron_ids(const std::filesystem::path& path) {
    return neuron_ids_from_text(read_file(path), path.filename().string());
}

}  // namespace crane
