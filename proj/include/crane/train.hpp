#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "crane/corpus.hpp"
#include "crane/errors.hpp"
#include "crane/model.hpp"
#include "crane/rng.hpp"

namespace crane {

struct TrainConfig {
    double lr = 0.1;
    int steps = 100;
    int batch = 16;
    std::uint64_t seed = 0;
};

namespace detail {

// dx for y = rmsnorm(x) * scale, plus scale gradient. x, dy: T x d.
inline void rmsnorm_backward(const std::vector<double>& x, const std::vector<double>& scale,
                             const std::vector<double>& dy, std::vector<double>& dx_accum,
                             std::vector<double>& dscale_accum, int T, int d) {
    for (int t = 0; t < T; ++t) {
        const double* xt = x.data() + static_cast<std::ptrdiff_t>(t) * d;
        const double* dyt = dy.data() + static_cast<std::ptrdiff_t>(t) * d;
        double* dxt = dx_accum.data() + static_cast<std::ptrdiff_t>(t) * d;
        double ms = 0.0;
        for (int i = 0; i < d; ++i) ms += xt[i] * xt[i];
        ms = ms / static_cast<double>(d) + kRmsEps;
        double r = 1.0 / std::sqrt(ms);
        double proj = 0.0;  // sum_j dy_j * s_j * x_j
        for (int i = 0; i < d; ++i) proj += dyt[i] * scale[static_cast<std::size_t>(i)] * xt[i];
        double r3_over_d = r * r * r / static_cast<double>(d);
        for (int i = 0; i < d; ++i) {
            dscale_accum[static_cast<std::size_t>(i)] += dyt[i] * xt[i] * r;
            dxt[i] += r * scale[static_cast<std::size_t>(i)] * dyt[i] - r3_over_d * xt[i] * proj;
        }
    }
}

// dW += x^T dy and dx += dy W^T for y = x W (x: T x in, W: in x out).
inline void matmul_backward(const std::vector<double>& x, const std::vector<double>& w,
                            const std::vector<double>& dy, std::vector<double>& dx_accum,
                            std::vector<double>& dw_accum, int T, int in_dim, int out_dim) {
    for (int t = 0; t < T; ++t) {
        const double* xt = x.data() + static_cast<std::ptrdiff_t>(t) * in_dim;
        const double* dyt = dy.data() + static_cast<std::ptrdiff_t>(t) * out_dim;
        double* dxt = dx_accum.data() + static_cast<std::ptrdiff_t>(t) * in_dim;
        for (int i = 0; i < in_dim; ++i) {
            const double* wr = w.data() + static_cast<std::ptrdiff_t>(i) * out_dim;
            double* dwr = dw_accum.data() + static_cast<std::ptrdiff_t>(i) * out_dim;
            double acc = 0.0;
            double xi = xt[i];
            for (int o = 0; o < out_dim; ++o) {
                acc += dyt[o] * wr[o];
                dwr[o] += xi * dyt[o];
            }
            dxt[i] += acc;
        }
    }
}

inline double activate_grad(Activation a, double pre) {
    if (a == Activation::relu) return pre > 0.0 ? 1.0 : 0.0;
    double s = 1.0 / (1.0 + std::exp(-pre));
    return s * (1.0 + pre * (1.0 - s));
}

}  // namespace detail

// Mean next-token cross-entropy of one sequence (nats per target token).
inline double sequence_loss(const ModelWeights& w, std::span<const int> tokens) {
    if (tokens.size() < 2) throw InputError("sequence_loss: need at least 2 tokens");
    std::vector<double> logits = forward_impl(w, tokens, nullptr, nullptr);
    int T = static_cast<int>(tokens.size());
    int V = w.config.vocab_size;
    double loss = 0.0;
    for (int t = 0; t + 1 < T; ++t) {
        const double* lt = logits.data() + static_cast<std::ptrdiff_t>(t) * V;
        double mx = lt[0];
        for (int v = 1; v < V; ++v) mx = std::max(mx, lt[v]);
        double z = 0.0;
        for (int v = 0; v < V; ++v) z += std::exp(lt[v] - mx);
        loss += mx + std::log(z) - lt[tokens[static_cast<std::size_t>(t + 1)]];
    }
    return loss / static_cast<double>(T - 1);
}

// Mean next-token cross-entropy plus analytic parameter gradients, scaled by
// `weight` and accumulated into `grad` (a zero-initialized weight mirror).
inline double sequence_loss_grad(const ModelWeights& w, std::span<const int> tokens, double weight,
                                 ModelWeights& grad) {
    if (tokens.size() < 2) throw InputError("sequence_loss_grad: need at least 2 tokens");
    const ModelConfig& c = w.config;
    ForwardTrace trace;
    forward_impl(w, tokens, nullptr, &trace);

    int T = trace.seq_len;
    int d = c.d_model;
    int V = c.vocab_size;
    int hd = c.head_dim();
    double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    bool use_norm = c.norm == Norm::rmsnorm;
    double inv_targets = 1.0 / static_cast<double>(T - 1);

    double loss = 0.0;
    std::vector<double> dlogits(static_cast<std::size_t>(T) * static_cast<std::size_t>(V), 0.0);
    for (int t = 0; t + 1 < T; ++t) {
        const double* lt = trace.logits.data() + static_cast<std::ptrdiff_t>(t) * V;
        double* dlt = dlogits.data() + static_cast<std::ptrdiff_t>(t) * V;
        int gold = tokens[static_cast<std::size_t>(t + 1)];
        double mx = lt[0];
        for (int v = 1; v < V; ++v) mx = std::max(mx, lt[v]);
        double z = 0.0;
        for (int v = 0; v < V; ++v) z += std::exp(lt[v] - mx);
        loss += mx + std::log(z) - lt[gold];
        double scale = weight * inv_targets;
        for (int v = 0; v < V; ++v) dlt[v] = std::exp(lt[v] - mx) / z * scale;
        dlt[gold] -= scale;
    }
    loss *= inv_targets;

    // unembedding and final norm
    std::vector<double> dfn(static_cast<std::size_t>(T) * static_cast<std::size_t>(d), 0.0);
    detail::matmul_backward(trace.final_normed, w.unembedding, dlogits, dfn, grad.unembedding, T, d, V);

    // residual entering the final norm = last layer's mid + mlp_out
    const LayerTrace& last = trace.layers.back();
    std::vector<double> x_last(last.mid.size());
    for (std::size_t i = 0; i < x_last.size(); ++i) x_last[i] = last.mid[i] + last.mlp_out[i];

    std::vector<double> dx(static_cast<std::size_t>(T) * static_cast<std::size_t>(d), 0.0);
    if (use_norm)
        detail::rmsnorm_backward(x_last, w.final_norm_scale, dfn, dx, grad.final_norm_scale, T, d);
    else
        dx = dfn;

    std::vector<double> dmid, dpost, dpre, dxm, dattn, dconcat, dq, dk, dv, dxa;
    for (int l = c.n_layers - 1; l >= 0; --l) {
        const LayerTrace& lt = trace.layers[static_cast<std::size_t>(l)];
        const LayerWeights& lw = w.layers[static_cast<std::size_t>(l)];
        LayerWeights& gl = grad.layers[static_cast<std::size_t>(l)];

        // dx is the gradient wrt this layer's output (mid + mlp_out)
        dmid = dx;  // residual branch
        dpost.assign(static_cast<std::size_t>(T) * static_cast<std::size_t>(c.d_mlp), 0.0);
        detail::matmul_backward(lt.mlp_post, lw.mlp_down, dx, dpost, gl.mlp_down, T, c.d_mlp, d);

        dpre.resize(dpost.size());
        for (std::size_t i = 0; i < dpost.size(); ++i)
            dpre[i] = dpost[i] * detail::activate_grad(c.activation, lt.mlp_pre[i]);

        dxm.assign(static_cast<std::size_t>(T) * static_cast<std::size_t>(d), 0.0);
        detail::matmul_backward(lt.mlp_normed, lw.mlp_up, dpre, dxm, gl.mlp_up, T, d, c.d_mlp);

        if (use_norm)
            detail::rmsnorm_backward(lt.mid, lw.norm_mlp_scale, dxm, dmid, gl.norm_mlp_scale, T, d);
        else
            for (std::size_t i = 0; i < dmid.size(); ++i) dmid[i] += dxm[i];

        // dmid is the gradient wrt (input + attn_out)
        dx = dmid;  // becomes the input branch gradient
        dconcat.assign(static_cast<std::size_t>(T) * static_cast<std::size_t>(d), 0.0);
        detail::matmul_backward(lt.attn_concat, lw.attn_o, dmid, dconcat, gl.attn_o, T, d, d);

        dq.assign(static_cast<std::size_t>(T) * static_cast<std::size_t>(d), 0.0);
        dk.assign(static_cast<std::size_t>(T) * static_cast<std::size_t>(d), 0.0);
        dv.assign(static_cast<std::size_t>(T) * static_cast<std::size_t>(d), 0.0);
        std::vector<double> da(static_cast<std::size_t>(T), 0.0);
        std::vector<double> dscore(static_cast<std::size_t>(T), 0.0);
        for (int h = 0; h < c.n_heads; ++h) {
            int off = h * hd;
            for (int t = 0; t < T; ++t) {
                const double* at = lt.attn_weights.data() + (static_cast<std::ptrdiff_t>(h) * T + t) * T;
                const double* dct = dconcat.data() + static_cast<std::ptrdiff_t>(t) * d + off;
                double inner = 0.0;
                for (int i = 0; i <= t; ++i) {
                    const double* vi = lt.v.data() + static_cast<std::ptrdiff_t>(i) * d + off;
                    double s = 0.0;
                    for (int e = 0; e < hd; ++e) s += dct[e] * vi[e];
                    da[static_cast<std::size_t>(i)] = s;
                    inner += at[i] * s;
                    double* dvi = dv.data() + static_cast<std::ptrdiff_t>(i) * d + off;
                    for (int e = 0; e < hd; ++e) dvi[e] += at[i] * dct[e];
                }
                for (int i = 0; i <= t; ++i)
                    dscore[static_cast<std::size_t>(i)] = at[i] * (da[static_cast<std::size_t>(i)] - inner);
                double* dqt = dq.data() + static_cast<std::ptrdiff_t>(t) * d + off;
                const double* qt = lt.q.data() + static_cast<std::ptrdiff_t>(t) * d + off;
                for (int i = 0; i <= t; ++i) {
                    double ds = dscore[static_cast<std::size_t>(i)] * inv_sqrt_hd;
                    const double* ki = lt.k.data() + static_cast<std::ptrdiff_t>(i) * d + off;
                    double* dki = dk.data() + static_cast<std::ptrdiff_t>(i) * d + off;
                    for (int e = 0; e < hd; ++e) {
                        dqt[e] += ds * ki[e];
                        dki[e] += ds * qt[e];
                    }
                }
            }
        }

        dxa.assign(static_cast<std::size_t>(T) * static_cast<std::size_t>(d), 0.0);
        detail::matmul_backward(lt.attn_normed, lw.attn_q, dq, dxa, gl.attn_q, T, d, d);
        detail::matmul_backward(lt.attn_normed, lw.attn_k, dk, dxa, gl.attn_k, T, d, d);
        detail::matmul_backward(lt.attn_normed, lw.attn_v, dv, dxa, gl.attn_v, T, d, d);

        if (use_norm)
            detail::rmsnorm_backward(lt.input, lw.norm_attn_scale, dxa, dx, gl.norm_attn_scale, T, d);
        else
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dxa[i];
    }

    for (int t = 0; t < T; ++t) {
        double* ge = grad.token_embedding.data() +
                     static_cast<std::ptrdiff_t>(tokens[static_cast<std::size_t>(t)]) * d;
        const double* dxt = dx.data() + static_cast<std::ptrdiff_t>(t) * d;
        for (int i = 0; i < d; ++i) ge[i] += dxt[i];
    }
    return loss;
}

// Plain SGD over next-token cross-entropy. Deterministic in (inputs, seed);
// a zero learning rate leaves the weights bit-identical.
inline ModelWeights train(const ModelWeights& w0, const Corpus& corpus, const TrainConfig& cfg) {
    if (cfg.steps < 0 || cfg.batch < 1) throw ConfigError("train: steps must be >= 0, batch >= 1");
    ModelWeights w = w0;
    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < corpus.samples.size(); ++i)
        if (corpus.samples[i].size() >= 2) usable.push_back(i);
    if (usable.empty()) throw InputError("train: corpus has no sequence with >= 2 tokens");

    Rng rng(derive_seed(cfg.seed, "train"));
    ModelWeights grad = make_zero_weights(w.config);
    for (int step = 0; step < cfg.steps; ++step) {
        for_each_tensor(grad, [](std::string_view, std::vector<double>& t) {
            std::fill(t.begin(), t.end(), 0.0);
        });
        double loss = 0.0;
        double bw = 1.0 / static_cast<double>(cfg.batch);
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& sample = corpus.samples[usable[rng.below(usable.size())]];
            loss += bw * sequence_loss_grad(w, sample, bw, grad);
        }
        if (!std::isfinite(loss))
            throw TrainError("train: non-finite loss at step " + std::to_string(step));
        if (cfg.lr != 0.0) {
            for_each_tensor(w, [&](std::string_view name, std::vector<double>& t) {
                const std::vector<double>* g = nullptr;
                for_each_tensor(grad, [&](std::string_view n2, const std::vector<double>& t2) {
                    if (n2 == name) g = &t2;
                });
                for (std::size_t i = 0; i < t.size(); ++i) t[i] -= cfg.lr * (*g)[i];
            });
        }
    }
    return w;
}

}  // namespace crane
