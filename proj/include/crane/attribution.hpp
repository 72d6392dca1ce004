#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "crane/errors.hpp"
#include "crane/model.hpp"

namespace crane {

enum class ObjectiveKind { gold_logit_sum, gold_logprob_sum };
enum class TokenAggregation { signed_sum, abs_sum };

struct AttributionOptions {
    double epsilon = 1e-9;
    ObjectiveKind objective = ObjectiveKind::gold_logit_sum;
    TokenAggregation aggregation = TokenAggregation::signed_sum;
};

// Per-sample neuron relevance, layer-major flat layout (layer * d_mlp + index).
struct RelevanceVector {
    std::vector<double> values;
    double objective_value = 0.0;
    std::string language;
};

namespace detail {

inline double stabilize(double z, double eps) { return z >= 0.0 ? z + eps : z - eps; }

inline double logsumexp(const double* x, int n) {
    double mx = x[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    double z = 0.0;
    for (int i = 0; i < n; ++i) z += std::exp(x[i] - mx);
    return mx + std::log(z);
}

}  // namespace detail

// Teacher-forced objective: the summed logit of each gold next token, final
// position excluded.
inline double objective_value(const ForwardTrace& trace, std::span<const int> tokens) {
    if (tokens.size() < 2) throw InputError("objective_value: need at least 2 tokens");
    if (static_cast<int>(tokens.size()) != trace.seq_len)
        throw InputError("objective_value: trace/token length mismatch");
    int V = static_cast<int>(trace.logits.size()) / trace.seq_len;
    double obj = 0.0;
    for (int t = 0; t + 1 < trace.seq_len; ++t)
        obj += trace.logits[static_cast<std::size_t>(t) * V +
                            static_cast<std::size_t>(tokens[static_cast<std::size_t>(t + 1)])];
    return obj;
}

// Epsilon-stabilized proportional redistribution through y = x W:
//   R_in[j] = sum_k x[j] W[j,k] / (z_k + eps*sign(z_k)) * R_out[k].
// Conserves sum(R) up to O(eps) leakage per output unit.
inline std::vector<double> propagate_linear(std::span<const double> relevance_out,
                                            std::span<const double> inputs,
                                            const std::vector<double>& weight, double eps) {
    std::size_t in_dim = inputs.size();
    std::size_t out_dim = relevance_out.size();
    if (weight.size() != in_dim * out_dim)
        throw InputError("propagate_linear: weight shape mismatch");
    // fold R_out/z into one factor per output unit
    std::vector<double> factor(out_dim, 0.0);
    bool any = false;
    for (std::size_t k = 0; k < out_dim; ++k) {
        if (relevance_out[k] == 0.0) continue;
        double z = 0.0;
        for (std::size_t j = 0; j < in_dim; ++j) z += inputs[j] * weight[j * out_dim + k];
        factor[k] = relevance_out[k] / detail::stabilize(z, eps);
        any = true;
    }
    std::vector<double> rin(in_dim, 0.0);
    if (!any) return rin;
    for (std::size_t j = 0; j < in_dim; ++j) {
        double xj = inputs[j];
        if (xj == 0.0) continue;
        const double* wr = weight.data() + j * out_dim;
        double acc = 0.0;
        for (std::size_t k = 0; k < out_dim; ++k) acc += wr[k] * factor[k];
        rin[j] = xj * acc;
    }
    return rin;
}

// Identity pass-through for elementwise maps (activations, norms treated as
// constants); exactly conserving.
inline std::vector<double> propagate_elementwise(std::span<const double> relevance_out,
                                                 std::span<const double> pre,
                                                 std::span<const double> post) {
    if (relevance_out.size() != pre.size() || pre.size() != post.size())
        throw InputError("propagate_elementwise: shape mismatch");
    return std::vector<double>(relevance_out.begin(), relevance_out.end());
}

// Attention weights treated as constants: relevance at output position t is
// split across source positions proportionally to A[t,i] * v_i, per head and
// coordinate. Returns relevance on the value vectors (T x d_model).
inline std::vector<double> propagate_attention(const std::vector<double>& relevance_out,
                                               const std::vector<double>& attn_weights,
                                               const std::vector<double>& values, int n_heads,
                                               int seq_len, int d_model, double eps) {
    int T = seq_len;
    int hd = d_model / n_heads;
    if (relevance_out.size() != static_cast<std::size_t>(T) * static_cast<std::size_t>(d_model) ||
        values.size() != relevance_out.size() ||
        attn_weights.size() != static_cast<std::size_t>(n_heads) * T * T)
        throw InputError("propagate_attention: shape mismatch");

    for (int h = 0; h < n_heads; ++h)
        for (int t = 0; t < T; ++t) {
            double sum = 0.0;
            for (int i = 0; i <= t; ++i)
                sum += attn_weights[(static_cast<std::size_t>(h) * T + t) * T + static_cast<std::size_t>(i)];
            if (std::abs(sum - 1.0) > 1e-6)
                throw InternalError("propagate_attention: non-stochastic attention row (head " +
                                    std::to_string(h) + ", position " + std::to_string(t) + ")");
        }

    std::vector<double> rv(values.size(), 0.0);
    for (int h = 0; h < n_heads; ++h) {
        int off = h * hd;
        for (int t = 0; t < T; ++t) {
            const double* at = attn_weights.data() + (static_cast<std::ptrdiff_t>(h) * T + t) * T;
            const double* rt = relevance_out.data() + static_cast<std::ptrdiff_t>(t) * d_model + off;
            for (int e = 0; e < hd; ++e) {
                double r = rt[e];
                if (r == 0.0) continue;
                double z = 0.0;
                for (int i = 0; i <= t; ++i)
                    z += at[i] * values[static_cast<std::size_t>(i) * d_model +
                                        static_cast<std::size_t>(off + e)];
                double f = r / detail::stabilize(z, eps);
                for (int i = 0; i <= t; ++i) {
                    std::size_t vi = static_cast<std::size_t>(i) * d_model + static_cast<std::size_t>(off + e);
                    rv[vi] += at[i] * values[vi] * f;
                }
            }
        }
    }
    return rv;
}

// Full backward relevance walk with internals exposed for conservation tests.
struct AttributionDetail {
    RelevanceVector relevance;
    std::vector<double> leaf;  // T x d_model relevance at the token embeddings
    double leaf_total = 0.0;
};

// Variant over a caller-provided (unmasked) trace for the given tokens.
inline AttributionDetail attribute_trace_detailed(const ModelWeights& w, const ForwardTrace& trace,
                                                  std::span<const int> tokens,
                                                  const std::string& language,
                                                  const AttributionOptions& opt = {}) {
    if (opt.epsilon < 0.0) throw InputError("attribute_sample: epsilon must be >= 0");
    if (tokens.size() < 2) throw InputError("attribute_sample: need at least 2 tokens");
    if (trace.seq_len != static_cast<int>(tokens.size()))
        throw InputError("attribute_sample: trace/token length mismatch");
    const ModelConfig& c = w.config;
    int T = trace.seq_len;
    int d = c.d_model;
    int V = c.vocab_size;
    double eps = opt.epsilon;

    AttributionDetail out;
    out.relevance.language = language;
    out.relevance.values.assign(static_cast<std::size_t>(c.neuron_count()), 0.0);

    // Output initialization: the gold logit (or its log-probability) seeds
    // relevance at the gold logit unit of each teacher-forced position.
    std::vector<double> r_logits(static_cast<std::size_t>(T) * static_cast<std::size_t>(V), 0.0);
    double objective = 0.0;
    for (int t = 0; t + 1 < T; ++t) {
        const double* lt = trace.logits.data() + static_cast<std::ptrdiff_t>(t) * V;
        int gold = tokens[static_cast<std::size_t>(t + 1)];
        double term = opt.objective == ObjectiveKind::gold_logit_sum
                          ? lt[gold]
                          : lt[gold] - detail::logsumexp(lt, V);
        objective += term;
        r_logits[static_cast<std::size_t>(t) * V + static_cast<std::size_t>(gold)] = term;
    }
    out.relevance.objective_value = objective;

    // Through the unembedding; final norm is identity pass-through.
    std::vector<double> r(static_cast<std::size_t>(T) * static_cast<std::size_t>(d), 0.0);
    for (int t = 0; t < T; ++t) {
        auto rl = std::span<const double>(r_logits).subspan(static_cast<std::size_t>(t) * V, V);
        auto fn = std::span<const double>(trace.final_normed).subspan(static_cast<std::size_t>(t) * d, d);
        std::vector<double> rt = propagate_linear(rl, fn, w.unembedding, eps);
        std::copy(rt.begin(), rt.end(), r.begin() + static_cast<std::ptrdiff_t>(t) * d);
    }

    std::vector<double> r_branch(static_cast<std::size_t>(T) * static_cast<std::size_t>(d));
    for (int l = c.n_layers - 1; l >= 0; --l) {
        const LayerTrace& lt = trace.layers[static_cast<std::size_t>(l)];
        const LayerWeights& lw = w.layers[static_cast<std::size_t>(l)];

        // MLP residual junction: x_out = mid + mlp_out. The branch share is
        // proportional (epsilon-stabilized); the trunk takes the exact
        // complement, so junction additivity holds to the bit.
        for (int t = 0; t < T; ++t)
            for (int j = 0; j < d; ++j) {
                std::size_t i = static_cast<std::size_t>(t) * d + static_cast<std::size_t>(j);
                double x_out = lt.mid[i] + lt.mlp_out[i];
                double share = r[i] == 0.0 ? 0.0
                                           : r[i] * lt.mlp_out[i] / detail::stabilize(x_out, eps);
                r_branch[i] = share;
                r[i] -= share;
            }

        // MLP branch: down-projection, activation pass-through, up-projection,
        // norm pass-through; neuron relevance is read at the post-activation.
        for (int t = 0; t < T; ++t) {
            auto rb = std::span<const double>(r_branch).subspan(static_cast<std::size_t>(t) * d, d);
            auto post = std::span<const double>(lt.mlp_post)
                            .subspan(static_cast<std::size_t>(t) * c.d_mlp, static_cast<std::size_t>(c.d_mlp));
            std::vector<double> r_post = propagate_linear(rb, post, lw.mlp_down, eps);
            double* rel = out.relevance.values.data() + static_cast<std::ptrdiff_t>(l) * c.d_mlp;
            if (opt.aggregation == TokenAggregation::signed_sum)
                for (int n = 0; n < c.d_mlp; ++n) rel[n] += r_post[static_cast<std::size_t>(n)];
            else
                for (int n = 0; n < c.d_mlp; ++n) rel[n] += std::abs(r_post[static_cast<std::size_t>(n)]);

            auto pre = std::span<const double>(lt.mlp_pre)
                           .subspan(static_cast<std::size_t>(t) * c.d_mlp, static_cast<std::size_t>(c.d_mlp));
            std::vector<double> r_pre = propagate_elementwise(r_post, pre, post);
            auto xm = std::span<const double>(lt.mlp_normed).subspan(static_cast<std::size_t>(t) * d, d);
            std::vector<double> r_xm = propagate_linear(r_pre, xm, lw.mlp_up, eps);
            for (int j = 0; j < d; ++j)
                r[static_cast<std::size_t>(t) * d + static_cast<std::size_t>(j)] +=
                    r_xm[static_cast<std::size_t>(j)];
        }

        // Attention residual junction: mid = input + attn_out.
        for (int t = 0; t < T; ++t)
            for (int j = 0; j < d; ++j) {
                std::size_t i = static_cast<std::size_t>(t) * d + static_cast<std::size_t>(j);
                double share = r[i] == 0.0
                                   ? 0.0
                                   : r[i] * lt.attn_out[i] / detail::stabilize(lt.mid[i], eps);
                r_branch[i] = share;
                r[i] -= share;
            }

        // Attention branch: output projection, constant-weight attention
        // routing into the value path, value projection, norm pass-through.
        std::vector<double> r_concat(static_cast<std::size_t>(T) * static_cast<std::size_t>(d));
        for (int t = 0; t < T; ++t) {
            auto rb = std::span<const double>(r_branch).subspan(static_cast<std::size_t>(t) * d, d);
            auto concat = std::span<const double>(lt.attn_concat).subspan(static_cast<std::size_t>(t) * d, d);
            std::vector<double> rc = propagate_linear(rb, concat, lw.attn_o, eps);
            std::copy(rc.begin(), rc.end(), r_concat.begin() + static_cast<std::ptrdiff_t>(t) * d);
        }
        std::vector<double> r_v =
            propagate_attention(r_concat, lt.attn_weights, lt.v, c.n_heads, T, d, eps);
        for (int t = 0; t < T; ++t) {
            auto rv = std::span<const double>(r_v).subspan(static_cast<std::size_t>(t) * d, d);
            auto xa = std::span<const double>(lt.attn_normed).subspan(static_cast<std::size_t>(t) * d, d);
            std::vector<double> r_xa = propagate_linear(rv, xa, lw.attn_v, eps);
            for (int j = 0; j < d; ++j)
                r[static_cast<std::size_t>(t) * d + static_cast<std::size_t>(j)] +=
                    r_xa[static_cast<std::size_t>(j)];
        }

        for (double v : r)
            if (!std::isfinite(v))
                throw AttributionError("attribute_sample: non-finite relevance at layer " +
                                       std::to_string(l));
    }

    out.leaf = std::move(r);
    for (double v : out.leaf) out.leaf_total += v;
    return out;
}

inline AttributionDetail attribute_sample_detailed(const ModelWeights& w,
                                                   std::span<const int> tokens,
                                                   const std::string& language,
                                                   const AttributionOptions& opt = {}) {
    if (tokens.size() < 2) throw InputError("attribute_sample: need at least 2 tokens");
    ForwardTrace trace;
    forward_impl(w, tokens, nullptr, &trace);
    return attribute_trace_detailed(w, trace, tokens, language, opt);
}

// Algorithm stage 1: the per-sample neuron relevance vector r(x, language).
inline RelevanceVector attribute_sample(const ModelWeights& w, std::span<const int> tokens,
                                        const std::string& language,
                                        const AttributionOptions& opt = {}) {
    return attribute_sample_detailed(w, tokens, language, opt).relevance;
}

}  // namespace crane
