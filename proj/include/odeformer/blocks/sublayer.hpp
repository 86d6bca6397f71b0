#pragma once

#include <cmath>
#include <string>

#include "odeformer/rng.hpp"
#include "odeformer/tensor/ops.hpp"
#include "odeformer/tensor/param_store.hpp"

namespace odeformer::blocks {

using tensor::ParamStore;
using tensor::Shape;
using tensor::Tape;
using tensor::Tensor;

// Runtime context threaded through every forward: the tape, the layer-norm
// epsilon, and the dropout stream (rng == nullptr disables dropout).
template <class T>
struct FwdCtx {
    Tape<T>& tape;
    double ln_eps = 1e-6;
    double dropout = 0.0;
    Rng* rng = nullptr;

    bool drop() const { return rng != nullptr && dropout > 0.0; }
};

enum class SublayerKind { SAN, FFN };

struct SublayerSpec {
    SublayerKind kind = SublayerKind::FFN;
    int64_t d_model = 0;
    int64_t heads = 1;    // SAN only
    int64_t ffn_dim = 0;  // FFN only
    double dropout = 0.0;

    void validate() const {
        if (d_model < 1) throw config_error("sublayer: d_model must be positive");
        if (kind == SublayerKind::SAN && d_model % heads != 0) {
            throw config_error("sublayer: d_model " + std::to_string(d_model) +
                               " not divisible by heads " + std::to_string(heads));
        }
        if (kind == SublayerKind::FFN && ffn_dim < d_model) {
            throw config_error("sublayer: ffn_dim " + std::to_string(ffn_dim) +
                               " must be >= d_model " + std::to_string(d_model));
        }
    }
};

template <class T>
struct AttnParams {
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<T> ln_g, ln_b;
};

template <class T>
struct FfnParams {
    Tensor<T> w1, b1, w2, b2;
    Tensor<T> ln_g, ln_b;
};

template <class T>
AttnParams<T> make_attn_params(ParamStore<T>& store, const std::string& prefix, int64_t d) {
    AttnParams<T> p;
    p.wq = store.create(prefix + ".wq", {d, d});
    p.bq = store.create(prefix + ".bq", {d});
    p.wk = store.create(prefix + ".wk", {d, d});
    p.bk = store.create(prefix + ".bk", {d});
    p.wv = store.create(prefix + ".wv", {d, d});
    p.bv = store.create(prefix + ".bv", {d});
    p.wo = store.create(prefix + ".wo", {d, d});
    p.bo = store.create(prefix + ".bo", {d});
    p.ln_g = store.create(prefix + ".ln_g", {d});
    p.ln_b = store.create(prefix + ".ln_b", {d});
    for (T& v : p.ln_g.value()) v = T(1);
    return p;
}

template <class T>
FfnParams<T> make_ffn_params(ParamStore<T>& store, const std::string& prefix, int64_t d,
                             int64_t ffn_dim) {
    FfnParams<T> p;
    p.w1 = store.create(prefix + ".w1", {d, ffn_dim});
    p.b1 = store.create(prefix + ".b1", {ffn_dim});
    p.w2 = store.create(prefix + ".w2", {ffn_dim, d});
    p.b2 = store.create(prefix + ".b2", {d});
    p.ln_g = store.create(prefix + ".ln_g", {d});
    p.ln_b = store.create(prefix + ".ln_b", {d});
    for (T& v : p.ln_g.value()) v = T(1);
    return p;
}

// Additive attention mask, 0 for visible and -1e9 for blocked entries.
// kv_valid is row-major [batch, len_k] with 1 = real token; empty means all valid.
template <class T>
Tensor<T> attn_mask(int64_t batch, int64_t heads, int64_t len_q, int64_t len_k,
                    const std::vector<uint8_t>& kv_valid, bool causal) {
    if (!kv_valid.empty() &&
        static_cast<int64_t>(kv_valid.size()) != batch * len_k) {
        throw shape_error("attn_mask: validity vector length " + std::to_string(kv_valid.size()) +
                          " does not match batch*len_k");
    }
    Tensor<T> m = Tensor<T>::zeros({batch, heads, len_q, len_k});
    const T blocked = static_cast<T>(-1e9);
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t h = 0; h < heads; ++h) {
            for (int64_t i = 0; i < len_q; ++i) {
                T* row = m.value().data() + (((b * heads + h) * len_q) + i) * len_k;
                for (int64_t j = 0; j < len_k; ++j) {
                    bool ok = true;
                    if (causal && j > i) ok = false;
                    if (ok && !kv_valid.empty() && !kv_valid[static_cast<size_t>(b * len_k + j)])
                        ok = false;
                    if (!ok) row[j] = blocked;
                }
            }
        }
    }
    return m;
}

// Pre-norm multi-head attention increment: the residual add stays outside.
// kv defaults to the (un-normalized) query input for self-attention; pass
// encoder states for cross-attention (they are used as-is, no extra norm).
template <class T>
Tensor<T> attention_f(const FwdCtx<T>& ctx, const AttnParams<T>& p, int64_t heads,
                      const Tensor<T>& y, const Tensor<T>& kv_states, bool norm_kv,
                      const Tensor<T>& mask) {
    using namespace odeformer::tensor;
    Tape<T>& tape = ctx.tape;

    const int64_t batch = y.dim(0);
    const int64_t len_q = y.dim(1);
    const int64_t d = y.dim(2);
    const int64_t len_k = kv_states.dim(1);
    const int64_t dh = d / heads;

    if (mask.shape() != Shape{batch, heads, len_q, len_k}) {
        throw shape_error("attention: mask " + shape_str(mask.shape()) + " does not match [" +
                          std::to_string(batch) + "," + std::to_string(heads) + "," +
                          std::to_string(len_q) + "," + std::to_string(len_k) + "]");
    }

    Tensor<T> q_in = layer_norm(tape, y, p.ln_g, p.ln_b, ctx.ln_eps);
    Tensor<T> kv_in = kv_states;
    if (norm_kv) kv_in = q_in; // self-attention: same normalized activations

    auto split_heads = [&](Tensor<T> x, int64_t len) {
        x = reshape(tape, x, {batch, len, heads, dh});
        return swap_axes12(tape, x); // [batch, heads, len, dh]
    };

    Tensor<T> q = split_heads(add_bias(tape, matmul(tape, q_in, p.wq), p.bq), len_q);
    Tensor<T> k = split_heads(add_bias(tape, matmul(tape, kv_in, p.wk), p.bk), len_k);
    Tensor<T> v = split_heads(add_bias(tape, matmul(tape, kv_in, p.wv), p.bv), len_k);

    Tensor<T> scores = matmul(tape, q, transpose_last2(tape, k));
    scores = scalar_mul(tape, scores, 1.0 / std::sqrt(static_cast<double>(dh)));
    scores = add(tape, scores, mask);
    Tensor<T> attn = softmax_last(tape, scores);
    if (ctx.drop()) attn = dropout(tape, attn, ctx.dropout, *ctx.rng);

    Tensor<T> mixed = matmul(tape, attn, v);                 // [batch, heads, len_q, dh]
    mixed = reshape(tape, swap_axes12(tape, mixed), {batch, len_q, d});
    return add_bias(tape, matmul(tape, mixed, p.wo), p.bo);
}

template <class T>
Tensor<T> self_attention_f(const FwdCtx<T>& ctx, const AttnParams<T>& p, int64_t heads,
                           const Tensor<T>& y, const Tensor<T>& mask) {
    return attention_f(ctx, p, heads, y, y, /*norm_kv=*/true, mask);
}

// Pre-norm feed-forward increment: w2 . relu(w1 . LN(y) + b1) + b2.
template <class T>
Tensor<T> ffn_f(const FwdCtx<T>& ctx, const FfnParams<T>& p, const Tensor<T>& y) {
    using namespace odeformer::tensor;
    Tape<T>& tape = ctx.tape;
    Tensor<T> h = layer_norm(tape, y, p.ln_g, p.ln_b, ctx.ln_eps);
    Tensor<T> a = relu(tape, add_bias(tape, matmul(tape, h, p.w1), p.b1));
    if (ctx.drop()) a = dropout(tape, a, ctx.dropout, *ctx.rng);
    return add_bias(tape, matmul(tape, a, p.w2), p.b2);
}

// One sublayer increment dispatched on kind; `params_attn`/`params_ffn` must
// match the spec kind. Output shape equals input shape, and zeroed output
// projections force a zero increment.
template <class T>
Tensor<T> sublayer_f(const FwdCtx<T>& ctx, const SublayerSpec& spec, const AttnParams<T>* attn,
                     const FfnParams<T>* ffn, const Tensor<T>& y, const Tensor<T>& mask) {
    spec.validate();
    if (spec.kind == SublayerKind::SAN) {
        if (!attn) throw config_error("sublayer_f: SAN spec without attention params");
        return self_attention_f(ctx, *attn, spec.heads, y, mask);
    }
    if (!ffn) throw config_error("sublayer_f: FFN spec without ffn params");
    return ffn_f(ctx, *ffn, y);
}

} // namespace odeformer::blocks
