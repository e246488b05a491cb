#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "costa/common.hpp"
#include "costa/rng.hpp"
#include "costa/tensor.hpp"

namespace costa {

// BERT-shaped encoder at configurable (desk) scale: learned absolute position
// embeddings, multi-head self-attention, post-layer-norm residual blocks,
// GELU feed-forward, tied MLM output embeddings. Dropout is fixed at zero so
// forward/backward are exactly deterministic.
struct EncoderConfig {
    int layers = 2;
    int heads = 2;
    int hidden = 32;
    int ffn = 64;
    int vocab = 0;
    int max_len = 512;
    double dropout = 0.0;

    int head_dim() const { return hidden / heads; }

    void validate() const {
        if (hidden <= 0 || heads <= 0 || hidden % heads != 0)
            throw Error("BadEncoderConfig", "hidden must be a positive multiple of heads");
        if (max_len < 2) throw Error("BadEncoderConfig", "max_len must be at least 2");
        if (layers < 1 || ffn < 1) throw Error("BadEncoderConfig", "layers and ffn must be positive");
        if (vocab < 5) throw Error("BadEncoderConfig", "vocab must cover the reserved ids");
        if (dropout != 0.0) throw Error("BadEncoderConfig", "only dropout=0 is supported");
    }

    friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

enum class Projector { Nonlinear, Linear, None };

inline const char* projector_name(Projector p) {
    switch (p) {
        case Projector::Nonlinear: return "nonlinear";
        case Projector::Linear: return "linear";
        case Projector::None: return "none";
    }
    return "?";
}

inline Projector parse_projector(const std::string& s) {
    if (s == "nonlinear") return Projector::Nonlinear;
    if (s == "linear") return Projector::Linear;
    if (s == "none") return Projector::None;
    throw Error("BadProjector", "unknown projector '" + s + "' (nonlinear|linear|none)");
}

namespace detail {
constexpr double kLayerNormEps = 1e-12;

inline std::string layer_prefix(int l) { return "layer" + std::to_string(l) + "."; }
}  // namespace detail

template <class Real>
struct ParamStore {
    EncoderConfig config;
    NamedTensors<Real> tensors;

    Tensor<Real>& operator[](const std::string& name) { return tensors.at(name); }
    const Tensor<Real>& at(const std::string& name) const { return tensors.at(name); }

    static std::map<std::string, std::vector<int64_t>> expected_shapes(const EncoderConfig& c) {
        std::map<std::string, std::vector<int64_t>> s;
        const int64_t H = c.hidden, F = c.ffn, V = c.vocab, P = c.max_len;
        s["embed.token"] = {V, H};
        s["embed.position"] = {P, H};
        for (int l = 0; l < c.layers; ++l) {
            const std::string p = detail::layer_prefix(l);
            for (const char* part : {"query", "key", "value", "output"}) {
                s[p + "attn." + part + ".w"] = {H, H};
                s[p + "attn." + part + ".b"] = {H};
            }
            s[p + "attn.norm.gain"] = {H};
            s[p + "attn.norm.bias"] = {H};
            s[p + "ffn.in.w"] = {H, F};
            s[p + "ffn.in.b"] = {F};
            s[p + "ffn.out.w"] = {F, H};
            s[p + "ffn.out.b"] = {H};
            s[p + "ffn.norm.gain"] = {H};
            s[p + "ffn.norm.bias"] = {H};
        }
        s["projector.w"] = {H, H};
        s["projector.b"] = {H};
        s["mlm.bias"] = {V};
        return s;
    }

    // Truncated normal (sigma 0.02, cut at 2 sigma) for weight matrices,
    // ones for norm gains, zeros for biases. Tensors are filled in name
    // order, so initialization is a pure function of the seed.
    static ParamStore random_init(const EncoderConfig& c, Rng& rng) {
        c.validate();
        ParamStore p;
        p.config = c;
        for (const auto& [name, shape] : expected_shapes(c)) {
            Tensor<Real> t(shape);
            const bool is_weight = name.ends_with(".w") || name.starts_with("embed.");
            const bool is_gain = name.ends_with(".gain");
            if (is_weight) {
                for (auto& v : t.data) {
                    double x;
                    do {
                        x = rng.normal();
                    } while (std::abs(x) > 2.0);
                    v = static_cast<Real>(0.02 * x);
                }
            } else if (is_gain) {
                for (auto& v : t.data) v = Real(1);
            }
            p.tensors.emplace(name, std::move(t));
        }
        return p;
    }

    static ParamStore zeros(const EncoderConfig& c) {
        ParamStore p;
        p.config = c;
        for (const auto& [name, shape] : expected_shapes(c)) p.tensors.emplace(name, Tensor<Real>(shape));
        return p;
    }

    NamedTensors<Real> zero_grads() const {
        NamedTensors<Real> g;
        for (const auto& [name, t] : tensors) g.emplace(name, Tensor<Real>(t.shape));
        return g;
    }

    template <class Other>
    ParamStore<Other> cast() const {
        ParamStore<Other> out;
        out.config = config;
        for (const auto& [name, t] : tensors) out.tensors.emplace(name, t.template cast<Other>());
        return out;
    }
};

namespace detail {

// y = x W + b; x: S x I, W: I x O.
template <class Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b) {
    const int64_t S = x.rows(), I = x.cols(), O = w.cols();
    Tensor<Real> y({S, O});
    for (int64_t i = 0; i < S; ++i) {
        Real* yi = y.row(i);
        const Real* xi = x.row(i);
        for (int64_t o = 0; o < O; ++o) yi[o] = b.at(o);
        for (int64_t k = 0; k < I; ++k) {
            const Real a = xi[k];
            const Real* wk = w.row(k);
            for (int64_t o = 0; o < O; ++o) yi[o] += a * wk[o];
        }
    }
    return y;
}

// Accumulates dW += x^T dy, db += sum rows(dy), dx += dy W^T.
template <class Real>
void linear_backward(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& dy,
                     Tensor<Real>& dw, Tensor<Real>& db, Tensor<Real>& dx) {
    const int64_t S = x.rows(), I = x.cols(), O = w.cols();
    for (int64_t i = 0; i < S; ++i) {
        const Real* xi = x.row(i);
        const Real* dyi = dy.row(i);
        for (int64_t o = 0; o < O; ++o) db.at(o) += dyi[o];
        for (int64_t k = 0; k < I; ++k) {
            const Real a = xi[k];
            Real* dwk = dw.row(k);
            for (int64_t o = 0; o < O; ++o) dwk[o] += a * dyi[o];
        }
        Real* dxi = dx.row(i);
        for (int64_t k = 0; k < I; ++k) {
            const Real* wk = w.row(k);
            Real s = 0;
            for (int64_t o = 0; o < O; ++o) s += dyi[o] * wk[o];
            dxi[k] += s;
        }
    }
}

constexpr double kInvSqrt2 = 1.0 / std::numbers::sqrt2;

template <class Real>
Real gelu(Real x) {
    return Real(0.5) * x * (Real(1) + std::erf(x * Real(kInvSqrt2)));
}

template <class Real>
Real gelu_grad(Real x) {
    const Real cdf = Real(0.5) * (Real(1) + std::erf(x * Real(kInvSqrt2)));
    const Real pdf = std::exp(Real(-0.5) * x * x) * Real(0.3989422804014326779);
    return cdf + x * pdf;
}

}  // namespace detail

template <class Real>
struct LayerNormCache {
    Tensor<Real> normalized;  // x-hat
    std::vector<Real> rstd;   // 1/sigma per row
};

namespace detail {

template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias,
                        LayerNormCache<Real>& cache) {
    const int64_t S = x.rows(), H = x.cols();
    Tensor<Real> y({S, H});
    cache.normalized = Tensor<Real>({S, H});
    cache.rstd.assign(static_cast<size_t>(S), Real(0));
    for (int64_t i = 0; i < S; ++i) {
        const Real* xi = x.row(i);
        Real mean = 0;
        for (int64_t j = 0; j < H; ++j) mean += xi[j];
        mean /= Real(H);
        Real var = 0;
        for (int64_t j = 0; j < H; ++j) var += (xi[j] - mean) * (xi[j] - mean);
        var /= Real(H);
        const Real rstd = Real(1) / std::sqrt(var + Real(kLayerNormEps));
        cache.rstd[static_cast<size_t>(i)] = rstd;
        Real* ni = cache.normalized.row(i);
        Real* yi = y.row(i);
        for (int64_t j = 0; j < H; ++j) {
            ni[j] = (xi[j] - mean) * rstd;
            yi[j] = gain.at(j) * ni[j] + bias.at(j);
        }
    }
    return y;
}

template <class Real>
void layer_norm_backward(const LayerNormCache<Real>& cache, const Tensor<Real>& gain,
                         const Tensor<Real>& dy, Tensor<Real>& dgain, Tensor<Real>& dbias,
                         Tensor<Real>& dx) {
    const int64_t S = dy.rows(), H = dy.cols();
    for (int64_t i = 0; i < S; ++i) {
        const Real* dyi = dy.row(i);
        const Real* ni = cache.normalized.row(i);
        const Real rstd = cache.rstd[static_cast<size_t>(i)];
        Real m1 = 0, m2 = 0;
        for (int64_t j = 0; j < H; ++j) {
            dgain.at(j) += dyi[j] * ni[j];
            dbias.at(j) += dyi[j];
            const Real dxhat = dyi[j] * gain.at(j);
            m1 += dxhat;
            m2 += dxhat * ni[j];
        }
        m1 /= Real(H);
        m2 /= Real(H);
        Real* dxi = dx.row(i);
        for (int64_t j = 0; j < H; ++j) {
            const Real dxhat = dyi[j] * gain.at(j);
            dxi[j] += (dxhat - m1 - ni[j] * m2) * rstd;
        }
    }
}

}  // namespace detail

template <class Real>
struct LayerCache {
    Tensor<Real> input;              // S x H
    Tensor<Real> q, k, v;            // S x H
    std::vector<Tensor<Real>> attn;  // per head, S x S softmax rows
    Tensor<Real> context;            // S x H, heads re-concatenated
    Tensor<Real> attn_res;           // input + attention output
    LayerNormCache<Real> ln1;
    Tensor<Real> normed1;  // block 1 output, FFN input
    Tensor<Real> ffn_pre;  // S x F
    Tensor<Real> ffn_act;  // S x F
    Tensor<Real> ffn_res;  // normed1 + FFN output
    LayerNormCache<Real> ln2;
};

// Everything the backward pass needs; hidden row 0 is [CLS].
template <class Real>
struct Activations {
    std::vector<int32_t> ids;   // with [CLS] prepended
    std::vector<uint8_t> mask;  // 1 = attendable ([PAD] rows are 0)
    Tensor<Real> embedded;
    std::vector<LayerCache<Real>> layers;
    Tensor<Real> hidden;  // S x H

    int64_t seq_len() const { return static_cast<int64_t>(ids.size()); }
    int64_t token_count() const { return seq_len() - 1; }
};

// Deterministic full forward pass over one [CLS]-prefixed sequence. [PAD]
// tokens are excluded from every attention softmax, so trailing padding
// cannot influence the other positions.
template <class Real>
Activations<Real> forward(std::span<const int32_t> tokens, const ParamStore<Real>& params) {
    const EncoderConfig& c = params.config;
    if (tokens.empty()) throw Error("EmptyInput", "cannot encode an empty token sequence");
    if (static_cast<int>(tokens.size()) > c.max_len - 1)
        throw Error("InputTooLong", "sequence of " + std::to_string(tokens.size()) +
                                        " tokens exceeds max_len-1=" + std::to_string(c.max_len - 1) +
                                        "; chunk the document first");

    Activations<Real> acts;
    acts.ids.reserve(tokens.size() + 1);
    acts.ids.push_back(1);  // [CLS]
    for (int32_t t : tokens) {
        if (t < 0 || t >= c.vocab)
            throw Error("BadTokenId", "token id " + std::to_string(t) + " outside vocabulary");
        acts.ids.push_back(t);
    }
    const int64_t S = acts.seq_len();
    const int64_t H = c.hidden, A = c.heads, dh = c.head_dim(), F = c.ffn;
    acts.mask.resize(static_cast<size_t>(S));
    for (int64_t i = 0; i < S; ++i) acts.mask[static_cast<size_t>(i)] = acts.ids[static_cast<size_t>(i)] != 0;

    const Tensor<Real>& tok_emb = params.at("embed.token");
    const Tensor<Real>& pos_emb = params.at("embed.position");
    acts.embedded = Tensor<Real>({S, H});
    for (int64_t i = 0; i < S; ++i) {
        const Real* te = tok_emb.row(acts.ids[static_cast<size_t>(i)]);
        const Real* pe = pos_emb.row(i);
        Real* xi = acts.embedded.row(i);
        for (int64_t j = 0; j < H; ++j) xi[j] = te[j] + pe[j];
    }

    const Real scale = Real(1) / std::sqrt(Real(dh));
    Tensor<Real> x = acts.embedded;
    acts.layers.resize(static_cast<size_t>(c.layers));
    for (int l = 0; l < c.layers; ++l) {
        LayerCache<Real>& lc = acts.layers[static_cast<size_t>(l)];
        const std::string p = detail::layer_prefix(l);
        lc.input = x;
        lc.q = detail::linear(x, params.at(p + "attn.query.w"), params.at(p + "attn.query.b"));
        lc.k = detail::linear(x, params.at(p + "attn.key.w"), params.at(p + "attn.key.b"));
        lc.v = detail::linear(x, params.at(p + "attn.value.w"), params.at(p + "attn.value.b"));

        lc.context = Tensor<Real>({S, H});
        lc.attn.assign(static_cast<size_t>(A), Tensor<Real>({S, S}));
        for (int64_t h = 0; h < A; ++h) {
            const int64_t off = h * dh;
            Tensor<Real>& probs = lc.attn[static_cast<size_t>(h)];
            for (int64_t i = 0; i < S; ++i) {
                // Scores over attendable keys only; softmax with max
                // subtraction. Masked keys keep probability exactly 0.
                Real maxs = std::numeric_limits<Real>::lowest();
                std::vector<Real> score(static_cast<size_t>(S), Real(0));
                for (int64_t j = 0; j < S; ++j) {
                    if (!acts.mask[static_cast<size_t>(j)]) continue;
                    Real s = 0;
                    const Real* qi = lc.q.row(i) + off;
                    const Real* kj = lc.k.row(j) + off;
                    for (int64_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
                    s *= scale;
                    score[static_cast<size_t>(j)] = s;
                    maxs = std::max(maxs, s);
                }
                Real denom = 0;
                Real* pi = probs.row(i);
                for (int64_t j = 0; j < S; ++j) {
                    if (!acts.mask[static_cast<size_t>(j)]) {
                        pi[j] = 0;
                        continue;
                    }
                    pi[j] = std::exp(score[static_cast<size_t>(j)] - maxs);
                    denom += pi[j];
                }
                for (int64_t j = 0; j < S; ++j) pi[j] /= denom;
                Real* ctx = lc.context.row(i) + off;
                for (int64_t d = 0; d < dh; ++d) ctx[d] = 0;
                for (int64_t j = 0; j < S; ++j) {
                    if (pi[j] == Real(0)) continue;
                    const Real* vj = lc.v.row(j) + off;
                    for (int64_t d = 0; d < dh; ++d) ctx[d] += pi[j] * vj[d];
                }
            }
        }

        Tensor<Real> attn_out =
            detail::linear(lc.context, params.at(p + "attn.output.w"), params.at(p + "attn.output.b"));
        lc.attn_res = Tensor<Real>({S, H});
        for (int64_t i = 0; i < S * H; ++i) lc.attn_res.at(i) = x.at(i) + attn_out.at(i);
        lc.normed1 = detail::layer_norm(lc.attn_res, params.at(p + "attn.norm.gain"),
                                        params.at(p + "attn.norm.bias"), lc.ln1);

        lc.ffn_pre = detail::linear(lc.normed1, params.at(p + "ffn.in.w"), params.at(p + "ffn.in.b"));
        lc.ffn_act = Tensor<Real>({S, F});
        for (int64_t i = 0; i < S * F; ++i) lc.ffn_act.at(i) = detail::gelu(lc.ffn_pre.at(i));
        Tensor<Real> ffn_out =
            detail::linear(lc.ffn_act, params.at(p + "ffn.out.w"), params.at(p + "ffn.out.b"));
        lc.ffn_res = Tensor<Real>({S, H});
        for (int64_t i = 0; i < S * H; ++i) lc.ffn_res.at(i) = lc.normed1.at(i) + ffn_out.at(i);
        x = detail::layer_norm(lc.ffn_res, params.at(p + "ffn.norm.gain"), params.at(p + "ffn.norm.bias"),
                               lc.ln2);
    }
    acts.hidden = std::move(x);
    return acts;
}

// Accumulates parameter gradients for d loss / d hidden. Parameters are never
// mutated; grads must come from zero_grads() (or be shape-compatible).
template <class Real>
void backward(const Activations<Real>& acts, const ParamStore<Real>& params, const Tensor<Real>& dhidden,
              NamedTensors<Real>& grads) {
    const EncoderConfig& c = params.config;
    if (acts.layers.size() != static_cast<size_t>(c.layers))
        throw Error("MissingCaches", "activations do not match the encoder configuration");
    const int64_t S = acts.seq_len(), H = c.hidden, A = c.heads, dh = c.head_dim(), F = c.ffn;
    const Real scale = Real(1) / std::sqrt(Real(dh));

    Tensor<Real> dx = dhidden;
    for (int l = c.layers - 1; l >= 0; --l) {
        const LayerCache<Real>& lc = acts.layers[static_cast<size_t>(l)];
        const std::string p = detail::layer_prefix(l);

        // ln2: dx is d(layer output)
        Tensor<Real> d_ffn_res({S, H});
        detail::layer_norm_backward(lc.ln2, params.at(p + "ffn.norm.gain"), dx,
                                    grads.at(p + "ffn.norm.gain"), grads.at(p + "ffn.norm.bias"),
                                    d_ffn_res);

        // ffn_res = normed1 + ffn_out
        Tensor<Real> d_normed1 = d_ffn_res;
        Tensor<Real> d_ffn_act({S, F});
        {
            Tensor<Real> d_ffn_pre({S, F});
            detail::linear_backward(lc.ffn_act, params.at(p + "ffn.out.w"), d_ffn_res,
                                    grads.at(p + "ffn.out.w"), grads.at(p + "ffn.out.b"), d_ffn_act);
            for (int64_t i = 0; i < S * F; ++i)
                d_ffn_pre.at(i) = d_ffn_act.at(i) * detail::gelu_grad(lc.ffn_pre.at(i));
            detail::linear_backward(lc.normed1, params.at(p + "ffn.in.w"), d_ffn_pre,
                                    grads.at(p + "ffn.in.w"), grads.at(p + "ffn.in.b"), d_normed1);
        }

        // ln1
        Tensor<Real> d_attn_res({S, H});
        detail::layer_norm_backward(lc.ln1, params.at(p + "attn.norm.gain"), d_normed1,
                                    grads.at(p + "attn.norm.gain"), grads.at(p + "attn.norm.bias"),
                                    d_attn_res);

        // attn_res = input + attn_out
        Tensor<Real> d_input = d_attn_res;
        Tensor<Real> d_context({S, H});
        detail::linear_backward(lc.context, params.at(p + "attn.output.w"), d_attn_res,
                                grads.at(p + "attn.output.w"), grads.at(p + "attn.output.b"), d_context);

        Tensor<Real> dq({S, H}), dk({S, H}), dv({S, H});
        for (int64_t h = 0; h < A; ++h) {
            const int64_t off = h * dh;
            const Tensor<Real>& probs = lc.attn[static_cast<size_t>(h)];
            for (int64_t i = 0; i < S; ++i) {
                const Real* pi = probs.row(i);
                const Real* dctx = d_context.row(i) + off;
                // dP and dV
                std::vector<Real> dp(static_cast<size_t>(S), Real(0));
                for (int64_t j = 0; j < S; ++j) {
                    if (pi[j] == Real(0) && !acts.mask[static_cast<size_t>(j)]) continue;
                    const Real* vj = lc.v.row(j) + off;
                    Real s = 0;
                    for (int64_t d = 0; d < dh; ++d) s += dctx[d] * vj[d];
                    dp[static_cast<size_t>(j)] = s;
                    Real* dvj = dv.row(j) + off;
                    for (int64_t d = 0; d < dh; ++d) dvj[d] += pi[j] * dctx[d];
                }
                // softmax backward
                Real inner = 0;
                for (int64_t j = 0; j < S; ++j) inner += dp[static_cast<size_t>(j)] * pi[j];
                for (int64_t j = 0; j < S; ++j) {
                    const Real ds = pi[j] * (dp[static_cast<size_t>(j)] - inner);
                    if (ds == Real(0)) continue;
                    const Real g = ds * scale;
                    const Real* kj = lc.k.row(j) + off;
                    const Real* qi = lc.q.row(i) + off;
                    Real* dqi = dq.row(i) + off;
                    Real* dkj = dk.row(j) + off;
                    for (int64_t d = 0; d < dh; ++d) {
                        dqi[d] += g * kj[d];
                        dkj[d] += g * qi[d];
                    }
                }
            }
        }
        detail::linear_backward(lc.input, params.at(p + "attn.query.w"), dq, grads.at(p + "attn.query.w"),
                                grads.at(p + "attn.query.b"), d_input);
        detail::linear_backward(lc.input, params.at(p + "attn.key.w"), dk, grads.at(p + "attn.key.w"),
                                grads.at(p + "attn.key.b"), d_input);
        detail::linear_backward(lc.input, params.at(p + "attn.value.w"), dv, grads.at(p + "attn.value.w"),
                                grads.at(p + "attn.value.b"), d_input);
        dx = std::move(d_input);
    }

    Tensor<Real>& d_tok = grads.at("embed.token");
    Tensor<Real>& d_pos = grads.at("embed.position");
    for (int64_t i = 0; i < S; ++i) {
        const Real* dxi = dx.row(i);
        Real* dt = d_tok.row(acts.ids[static_cast<size_t>(i)]);
        Real* dp = d_pos.row(i);
        for (int64_t j = 0; j < c.hidden; ++j) {
            dt[j] += dxi[j];
            dp[j] += dxi[j];
        }
    }
}

// Projector head over the [CLS] state: tanh(W h + b), the linear variant, or
// the identity (the "no projector" ablation).
template <class Real>
std::vector<Real> project(const Real* h0, const ParamStore<Real>& params, Projector kind) {
    const int64_t H = params.config.hidden;
    std::vector<Real> z(static_cast<size_t>(H));
    if (kind == Projector::None) {
        for (int64_t j = 0; j < H; ++j) z[static_cast<size_t>(j)] = h0[j];
        return z;
    }
    const Tensor<Real>& w = params.at("projector.w");
    const Tensor<Real>& b = params.at("projector.b");
    for (int64_t j = 0; j < H; ++j) z[static_cast<size_t>(j)] = b.at(j);
    for (int64_t i = 0; i < H; ++i) {
        const Real a = h0[i];
        const Real* wi = w.row(i);
        for (int64_t j = 0; j < H; ++j) z[static_cast<size_t>(j)] += a * wi[j];
    }
    if (kind == Projector::Nonlinear)
        for (auto& v : z) v = std::tanh(v);
    return z;
}

template <class Real>
void project_backward(const Real* h0, const std::vector<Real>& z, const Real* dz,
                      const ParamStore<Real>& params, Projector kind, NamedTensors<Real>& grads,
                      Real* dh0) {
    const int64_t H = params.config.hidden;
    if (kind == Projector::None) {
        for (int64_t j = 0; j < H; ++j) dh0[j] += dz[j];
        return;
    }
    std::vector<Real> dpre(static_cast<size_t>(H));
    for (int64_t j = 0; j < H; ++j) {
        const Real zj = z[static_cast<size_t>(j)];
        dpre[static_cast<size_t>(j)] =
            kind == Projector::Nonlinear ? dz[j] * (Real(1) - zj * zj) : dz[j];
    }
    const Tensor<Real>& w = params.at("projector.w");
    Tensor<Real>& dw = grads.at("projector.w");
    Tensor<Real>& db = grads.at("projector.b");
    for (int64_t j = 0; j < H; ++j) db.at(j) += dpre[static_cast<size_t>(j)];
    for (int64_t i = 0; i < H; ++i) {
        const Real* wi = w.row(i);
        Real* dwi = dw.row(i);
        Real s = 0;
        for (int64_t j = 0; j < H; ++j) {
            dwi[j] += h0[i] * dpre[static_cast<size_t>(j)];
            s += wi[j] * dpre[static_cast<size_t>(j)];
        }
        dh0[i] += s;
    }
}

// Mean of hidden states h_{start+1} .. h_{end} (the +1 skips [CLS]).
template <class Real>
std::vector<Real> avg_pool(const Activations<Real>& acts, int32_t start, int32_t end) {
    const int64_t n = acts.token_count(), H = acts.hidden.cols();
    if (start < 0 || start >= end || end > n)
        throw Error("BadSpan", "span [" + std::to_string(start) + "," + std::to_string(end) +
                                   ") invalid for " + std::to_string(n) + " tokens");
    std::vector<Real> out(static_cast<size_t>(H), Real(0));
    for (int32_t i = start; i < end; ++i) {
        const Real* hi = acts.hidden.row(i + 1);
        for (int64_t j = 0; j < H; ++j) out[static_cast<size_t>(j)] += hi[j];
    }
    const Real inv = Real(1) / Real(end - start);
    for (auto& v : out) v *= inv;
    return out;
}

template <class Real>
void avg_pool_backward(int32_t start, int32_t end, const Real* dz, Tensor<Real>& dhidden) {
    const int64_t H = dhidden.cols();
    const Real inv = Real(1) / Real(end - start);
    for (int32_t i = start; i < end; ++i) {
        Real* dhi = dhidden.row(i + 1);
        for (int64_t j = 0; j < H; ++j) dhi[j] += dz[j] * inv;
    }
}

// MLM logits for the requested positions (activation rows, 1-based over
// tokens) through the tied embedding matrix plus the output bias.
template <class Real>
Tensor<Real> mlm_logits(const Activations<Real>& acts, const ParamStore<Real>& params,
                        const std::vector<int32_t>& positions) {
    const int64_t V = params.config.vocab, H = params.config.hidden, n = acts.token_count();
    Tensor<Real> logits({static_cast<int64_t>(positions.size()), V});
    const Tensor<Real>& emb = params.at("embed.token");
    const Tensor<Real>& bias = params.at("mlm.bias");
    for (size_t p = 0; p < positions.size(); ++p) {
        const int32_t pos = positions[p];
        if (pos < 1 || pos > n)
            throw Error("BadMlmPosition", "position " + std::to_string(pos) +
                                              " outside [1," + std::to_string(n) + "] ([CLS] is not predictable)");
        const Real* h = acts.hidden.row(pos);
        Real* lp = logits.row(static_cast<int64_t>(p));
        for (int64_t v = 0; v < V; ++v) {
            const Real* ev = emb.row(v);
            Real s = bias.at(v);
            for (int64_t j = 0; j < H; ++j) s += ev[j] * h[j];
            lp[v] = s;
        }
    }
    return logits;
}

template <class Real>
void mlm_logits_backward(const Activations<Real>& acts, const ParamStore<Real>& params,
                         const std::vector<int32_t>& positions, const Tensor<Real>& dlogits,
                         NamedTensors<Real>& grads, Tensor<Real>& dhidden) {
    const int64_t V = params.config.vocab, H = params.config.hidden;
    const Tensor<Real>& emb = params.at("embed.token");
    Tensor<Real>& demb = grads.at("embed.token");
    Tensor<Real>& dbias = grads.at("mlm.bias");
    for (size_t p = 0; p < positions.size(); ++p) {
        const int32_t pos = positions[p];
        const Real* h = acts.hidden.row(pos);
        const Real* dlp = dlogits.row(static_cast<int64_t>(p));
        Real* dh = dhidden.row(pos);
        for (int64_t v = 0; v < V; ++v) {
            const Real g = dlp[v];
            if (g == Real(0)) continue;
            dbias.at(v) += g;
            const Real* ev = emb.row(v);
            Real* dev = demb.row(v);
            for (int64_t j = 0; j < H; ++j) {
                dh[j] += g * ev[j];
                dev[j] += g * h[j];
            }
        }
    }
}

}  // namespace costa
