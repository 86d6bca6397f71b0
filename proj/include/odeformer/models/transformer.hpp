#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "odeformer/blocks/block.hpp"
#include "odeformer/blocks/sublayer.hpp"
#include "odeformer/models/config.hpp"
#include "odeformer/rng.hpp"
#include "odeformer/tensor/grad_check.hpp"
#include "odeformer/tensor/ops.hpp"
#include "odeformer/tensor/param_store.hpp"

namespace odeformer::models {

using blocks::AttnParams;
using blocks::BlockCoeffs;
using blocks::BlockState;
using blocks::BlockTag;
using blocks::FfnParams;
using blocks::FwdCtx;
using blocks::StageFn;
using tensor::ParamStore;
using tensor::Shape;
using tensor::Tape;
using tensor::Tensor;
using tensor::TokenBatch;

// One padded batch of a sequence-to-sequence task. Validity vectors are
// row-major [batch * len] with 1 = real token.
struct SeqBatch {
    TokenBatch source;
    TokenBatch target_in;   // decoder input, BOS-first
    TokenBatch target_out;  // labels, EOS-last
    std::vector<uint8_t> src_valid;
    std::vector<uint8_t> tgt_valid;
};

// Sinusoidal table tiled to [batch, len, d]; constant, never on the tape.
template <class T>
Tensor<T> sinusoidal_positions(int64_t batch, int64_t len, int64_t d) {
    Tensor<T> out = Tensor<T>::zeros({batch, len, d});
    std::vector<T> row(static_cast<size_t>(len * d));
    for (int64_t p = 0; p < len; ++p) {
        for (int64_t i = 0; i < d; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
            row[static_cast<size_t>(p * d + i)] = static_cast<T>(std::sin(p * freq));
            if (i + 1 < d) {
                row[static_cast<size_t>(p * d + i + 1)] = static_cast<T>(std::cos(p * freq));
            }
        }
    }
    for (int64_t b = 0; b < batch; ++b) {
        std::copy(row.begin(), row.end(), out.value().begin() + b * len * d);
    }
    return out;
}

template <class T>
struct EncLayerParams {
    AttnParams<T> san;
    FfnParams<T> ffn;
    BlockCoeffs<T> coef;      // Fused
    BlockCoeffs<T> coef_san;  // SublayerWise / SanOnly
    BlockCoeffs<T> coef_ffn;  // SublayerWise / FfnOnly
};

template <class T>
struct DecLayerParams {
    AttnParams<T> san;
    AttnParams<T> cross;
    FfnParams<T> ffn;
};

// Pre-norm Transformer with selectable residual-integration rule. The rule
// applies to encoder blocks (and to every block of the dec_depth == 0 causal
// LM); decoder blocks always run the plain first-order residual update.
template <class T>
class SeqModel {
public:
    SeqModel(ModelConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        build_params();
        Rng rng(init_seed);
        init_params(rng);
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }
    int64_t param_count() const { return store_.total_params(); }

    // Fires once per stage evaluation with the owning block's name.
    std::function<void(const std::string&)> stage_probe;

    // ---- encoder ----------------------------------------------------------

    Tensor<T> encode(Tape<T>& tape, const TokenBatch& src, const std::vector<uint8_t>& src_valid,
                     Rng* dropout_rng = nullptr) {
        if (cfg_.is_lm()) throw config_error("encode: model was built as a causal LM");
        FwdCtx<T> ctx{tape, cfg_.ln_eps, cfg_.dropout, dropout_rng};
        Tensor<T> y = embed(ctx, src_embed_, src, "enc");
        Tensor<T> mask = blocks::attn_mask<T>(src.rows, cfg_.heads, src.cols, src.cols,
                                              src_valid, /*causal=*/false);
        y = run_ode_stack(ctx, enc_layers_, y, mask, "enc");
        return tensor::layer_norm(tape, y, enc_ln_g_, enc_ln_b_, cfg_.ln_eps);
    }

    // ---- decoder ----------------------------------------------------------

    // Teacher-forced decoder logits for all positions: [B, Lt, vocab].
    Tensor<T> decode_logits(Tape<T>& tape, const TokenBatch& tgt_in, const Tensor<T>& enc_states,
                            const std::vector<uint8_t>& src_valid, Rng* dropout_rng = nullptr) {
        if (cfg_.is_lm()) throw config_error("decode_logits: model was built as a causal LM");
        FwdCtx<T> ctx{tape, cfg_.ln_eps, cfg_.dropout, dropout_rng};
        const int64_t batch = tgt_in.rows;
        const int64_t len = tgt_in.cols;
        const int64_t src_len = enc_states.dim(1);

        Tensor<T> y = embed(ctx, tgt_embed_, tgt_in, "dec");
        Tensor<T> self_mask =
            blocks::attn_mask<T>(batch, cfg_.heads, len, len, {}, /*causal=*/true);
        Tensor<T> cross_mask =
            blocks::attn_mask<T>(batch, cfg_.heads, len, src_len, src_valid, /*causal=*/false);

        for (size_t t = 0; t < dec_layers_.size(); ++t) {
            DecLayerParams<T>& layer = dec_layers_[t];
            const std::string name = "dec.layer" + std::to_string(t);
            probe(name + ".san");
            y = tensor::add(tape, y,
                            blocks::self_attention_f(ctx, layer.san, cfg_.heads, y, self_mask));
            probe(name + ".cross");
            y = tensor::add(tape, y,
                            blocks::attention_f(ctx, layer.cross, cfg_.heads, y, enc_states,
                                                /*norm_kv=*/false, cross_mask));
            probe(name + ".ffn");
            y = tensor::add(tape, y, blocks::ffn_f(ctx, layer.ffn, y));
        }
        y = tensor::layer_norm(tape, y, dec_ln_g_, dec_ln_b_, cfg_.ln_eps);
        return output_logits(tape, y, tgt_embed_);
    }

    // Next-token logits [B, vocab] for the last prefix position.
    Tensor<T> decode_step(Tape<T>& tape, const TokenBatch& tgt_prefix,
                          const Tensor<T>& enc_states, const std::vector<uint8_t>& src_valid) {
        Tensor<T> logits = decode_logits(tape, tgt_prefix, enc_states, src_valid);
        const int64_t batch = tgt_prefix.rows;
        const int64_t len = tgt_prefix.cols;
        const int64_t vocab = cfg_.vocab_size;
        Tensor<T> last = Tensor<T>::zeros({batch, vocab});
        for (int64_t b = 0; b < batch; ++b) {
            std::copy_n(logits.value().data() + ((b * len) + len - 1) * vocab, vocab,
                        last.value().data() + b * vocab);
        }
        return last;
    }

    // ---- causal LM --------------------------------------------------------

    Tensor<T> lm_logits(Tape<T>& tape, const TokenBatch& tokens, Rng* dropout_rng = nullptr) {
        if (!cfg_.is_lm()) throw config_error("lm_logits: model has a decoder stack");
        FwdCtx<T> ctx{tape, cfg_.ln_eps, cfg_.dropout, dropout_rng};
        Tensor<T> y = embed(ctx, src_embed_, tokens, "lm");
        Tensor<T> mask = blocks::attn_mask<T>(tokens.rows, cfg_.heads, tokens.cols, tokens.cols,
                                              {}, /*causal=*/true);
        y = run_ode_stack(ctx, enc_layers_, y, mask, "lm");
        y = tensor::layer_norm(tape, y, enc_ln_g_, enc_ln_b_, cfg_.ln_eps);
        return output_logits(tape, y, src_embed_);
    }

    struct LmResult {
        Tensor<T> loss_matrix;  // [B, L-1], zero at padded targets
        Tensor<T> mean_loss;    // scalar over non-pad targets
        int64_t target_tokens = 0;
    };

    // Next-token cross-entropy; pad_id < 0 disables padding exclusion.
    LmResult lm_forward(Tape<T>& tape, const TokenBatch& tokens, int32_t pad_id,
                        double label_smoothing = 0.0, Rng* dropout_rng = nullptr) {
        const int64_t batch = tokens.rows;
        const int64_t len = tokens.cols;
        if (len < 2) throw length_error("lm_forward: need at least two positions");

        Tensor<T> logits = lm_logits(tape, tokens, dropout_rng); // [B, L, V]
        // Positions 0..L-2 predict tokens 1..L-1; the last row of each
        // sequence is a dummy masked out of the mean.
        std::vector<int32_t> targets(static_cast<size_t>(batch * len), 0);
        std::vector<uint8_t> valid(static_cast<size_t>(batch * len), 0);
        for (int64_t b = 0; b < batch; ++b) {
            for (int64_t i = 0; i + 1 < len; ++i) {
                const int32_t tgt = tokens.at(b, i + 1);
                targets[static_cast<size_t>(b * len + i)] = tgt;
                valid[static_cast<size_t>(b * len + i)] =
                    (pad_id >= 0 && tgt == pad_id) ? 0 : 1;
            }
        }

        Tensor<T> flat = tensor::reshape(tape, logits, {batch * len, cfg_.vocab_size});
        Tensor<T> per_tok = tensor::token_cross_entropy(tape, flat, targets, label_smoothing);

        LmResult res;
        res.mean_loss = tensor::masked_mean(tape, per_tok, valid);
        res.target_tokens = 0;
        for (uint8_t v : valid) res.target_tokens += v;

        res.loss_matrix = Tensor<T>::zeros({batch, len - 1});
        for (int64_t b = 0; b < batch; ++b) {
            for (int64_t i = 0; i + 1 < len; ++i) {
                if (valid[static_cast<size_t>(b * len + i)]) {
                    res.loss_matrix.value()[b * (len - 1) + i] =
                        per_tok.value()[b * len + i];
                }
            }
        }
        return res;
    }

    // ---- generation -------------------------------------------------------

    // Argmax decoding with ties toward the lowest token id; stops per row at
    // eos_id or after max_out_len tokens. Returned rows exclude BOS/EOS.
    std::vector<std::vector<int32_t>> greedy_decode(const TokenBatch& src,
                                                    const std::vector<uint8_t>& src_valid,
                                                    int64_t max_out_len, int32_t bos_id,
                                                    int32_t eos_id, int32_t pad_id) {
        Tape<T> tape;
        typename Tape<T>::NoGrad off(tape);

        const int64_t batch = src.rows;
        std::vector<std::vector<int32_t>> outputs(static_cast<size_t>(batch));
        if (max_out_len == 0) return outputs;

        Tensor<T> enc_states = encode(tape, src, src_valid);
        TokenBatch prefix;
        prefix.rows = batch;
        prefix.cols = 1;
        prefix.ids.assign(static_cast<size_t>(batch), bos_id);
        std::vector<uint8_t> done(static_cast<size_t>(batch), 0);

        for (int64_t step = 0; step < max_out_len; ++step) {
            Tensor<T> logits = decode_step(tape, prefix, enc_states, src_valid);
            std::vector<int32_t> next = tensor::argmax_last(logits);
            bool all_done = true;
            for (int64_t b = 0; b < batch; ++b) {
                int32_t tok = next[static_cast<size_t>(b)];
                if (done[static_cast<size_t>(b)]) {
                    tok = pad_id;
                } else if (tok == eos_id) {
                    done[static_cast<size_t>(b)] = 1;
                } else {
                    outputs[static_cast<size_t>(b)].push_back(tok);
                    all_done = false;
                }
            }
            if (all_done) {
                bool every = true;
                for (uint8_t d : done) every = every && d;
                if (every) break;
            }
            TokenBatch grown;
            grown.rows = batch;
            grown.cols = prefix.cols + 1;
            grown.ids.resize(static_cast<size_t>(batch * grown.cols));
            for (int64_t b = 0; b < batch; ++b) {
                std::copy_n(prefix.ids.begin() + b * prefix.cols, prefix.cols,
                            grown.ids.begin() + b * grown.cols);
                grown.ids[static_cast<size_t>(b * grown.cols + prefix.cols)] =
                    next[static_cast<size_t>(b)];
            }
            prefix = std::move(grown);
        }
        return outputs;
    }

private:
    void probe(const std::string& name) {
        if (stage_probe) stage_probe(name);
    }

    void build_params() {
        const int64_t d = cfg_.d_model;
        const std::string emb_prefix = cfg_.is_lm() ? "lm" : "enc";

        src_embed_ = store_.create(cfg_.is_lm() ? "lm.embed" : "embed.src", {cfg_.vocab_size, d});
        if (!cfg_.is_lm()) tgt_embed_ = store_.create("embed.tgt", {cfg_.vocab_size, d});
        if (!cfg_.tie_embeddings) {
            out_w_ = store_.create(emb_prefix + ".out_w", {d, cfg_.vocab_size});
        }
        if (cfg_.position == PositionKind::LearnedAbsolute) {
            pos_embed_ = store_.create("embed.pos", {cfg_.max_len, d});
        }

        const std::string stack = cfg_.is_lm() ? "lm" : "enc";
        for (int t = 0; t < cfg_.enc_depth; ++t) {
            const std::string prefix = stack + ".layer" + std::to_string(t);
            EncLayerParams<T> layer;
            layer.san = blocks::make_attn_params(store_, prefix + ".san", d);
            layer.ffn = blocks::make_ffn_params(store_, prefix + ".ffn", d, cfg_.ffn_dim);
            switch (cfg_.granularity) {
                case Granularity::Fused:
                    layer.coef =
                        blocks::make_block_coeffs(store_, prefix + ".coef", cfg_.variant, d, t);
                    break;
                case Granularity::SublayerWise:
                    layer.coef_san = blocks::make_block_coeffs(store_, prefix + ".coef_san",
                                                               cfg_.variant, d, 2 * t);
                    layer.coef_ffn = blocks::make_block_coeffs(store_, prefix + ".coef_ffn",
                                                               cfg_.variant, d, 2 * t + 1);
                    break;
                case Granularity::SanOnly:
                    layer.coef_san = blocks::make_block_coeffs(store_, prefix + ".coef_san",
                                                               cfg_.variant, d, t);
                    break;
                case Granularity::FfnOnly:
                    layer.coef_ffn = blocks::make_block_coeffs(store_, prefix + ".coef_ffn",
                                                               cfg_.variant, d, t);
                    break;
            }
            enc_layers_.push_back(std::move(layer));
        }
        enc_ln_g_ = store_.create(stack + ".ln_out_g", {d});
        enc_ln_b_ = store_.create(stack + ".ln_out_b", {d});

        for (int t = 0; t < cfg_.dec_depth; ++t) {
            const std::string prefix = "dec.layer" + std::to_string(t);
            DecLayerParams<T> layer;
            layer.san = blocks::make_attn_params(store_, prefix + ".san", d);
            layer.cross = blocks::make_attn_params(store_, prefix + ".cross", d);
            layer.ffn = blocks::make_ffn_params(store_, prefix + ".ffn", d, cfg_.ffn_dim);
            dec_layers_.push_back(std::move(layer));
        }
        if (!cfg_.is_lm()) {
            dec_ln_g_ = store_.create("dec.ln_out_g", {d});
            dec_ln_b_ = store_.create("dec.ln_out_b", {d});
        }
    }

    void init_params(Rng& rng) {
        const double emb_std = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
        for (auto& [name, t] : store_) {
            if (name.find("ln_") != std::string::npos) {
                // gains were set to 1 at creation; out-norm gains here
                if (name.find("_g") != std::string::npos ||
                    name.find("ln_g") != std::string::npos) {
                    for (T& v : t.value()) v = T(1);
                }
                continue;
            }
            if (name.find("embed") != std::string::npos) {
                tensor::fill_normal(t, rng, 0.0, emb_std);
                continue;
            }
            if (name.find(".coef") != std::string::npos) continue; // block inits hold
            if (t.rank() == 2) {
                const double std =
                    std::sqrt(2.0 / static_cast<double>(t.dim(0) + t.dim(1)));
                tensor::fill_normal(t, rng, 0.0, std);
            }
            // rank-1 biases stay zero
        }
    }

    Tensor<T> embed(FwdCtx<T>& ctx, const Tensor<T>& table, const TokenBatch& toks,
                    const char* side) {
        if (toks.cols > cfg_.max_len) {
            throw length_error(std::string(side) + ": sequence length " +
                               std::to_string(toks.cols) + " exceeds max_len " +
                               std::to_string(cfg_.max_len));
        }
        Tape<T>& tape = ctx.tape;
        Tensor<T> e = tensor::embedding_lookup(tape, table, toks);
        e = tensor::scalar_mul(tape, e, std::sqrt(static_cast<double>(cfg_.d_model)));
        if (cfg_.position == PositionKind::Sinusoidal) {
            Tensor<T> pos = sinusoidal_positions<T>(toks.rows, toks.cols, cfg_.d_model);
            e = tensor::add(tape, e, pos);
        } else {
            TokenBatch idx;
            idx.rows = toks.rows;
            idx.cols = toks.cols;
            idx.ids.resize(static_cast<size_t>(toks.rows * toks.cols));
            for (int64_t b = 0; b < toks.rows; ++b) {
                for (int64_t i = 0; i < toks.cols; ++i) {
                    idx.ids[static_cast<size_t>(b * toks.cols + i)] = static_cast<int32_t>(i);
                }
            }
            e = tensor::add(tape, e, tensor::embedding_lookup(tape, pos_embed_, idx));
        }
        return e;
    }

    Tensor<T> output_logits(Tape<T>& tape, const Tensor<T>& states, const Tensor<T>& embed_table) {
        if (cfg_.tie_embeddings) {
            return tensor::matmul(tape, states, tensor::transpose_last2(tape, embed_table));
        }
        return tensor::matmul(tape, states, out_w_);
    }

    // Applies the configured residual-integration rule across the stack.
    // History state threads only through the blocks that run the variant.
    Tensor<T> run_ode_stack(FwdCtx<T>& ctx, std::vector<EncLayerParams<T>>& layers, Tensor<T> y,
                            const Tensor<T>& mask, const std::string& stack_name) {
        Tape<T>& tape = ctx.tape;
        BlockState<T> state;
        for (size_t t = 0; t < layers.size(); ++t) {
            EncLayerParams<T>& layer = layers[t];
            const std::string name = stack_name + ".layer" + std::to_string(t);

            StageFn<T> san_stage = [this, &ctx, &layer, &mask, name](Tape<T>& tp,
                                                                     const Tensor<T>& v) {
                probe(name);
                FwdCtx<T> inner{tp, ctx.ln_eps, ctx.dropout, ctx.rng};
                return blocks::self_attention_f(inner, layer.san, cfg_.heads, v, mask);
            };
            StageFn<T> ffn_stage = [this, &ctx, &layer, name](Tape<T>& tp, const Tensor<T>& v) {
                probe(name);
                FwdCtx<T> inner{tp, ctx.ln_eps, ctx.dropout, ctx.rng};
                return blocks::ffn_f(inner, layer.ffn, v);
            };
            // Whole-layer increment: attention step then feed-forward on top.
            StageFn<T> fused_stage = [this, &ctx, &layer, &mask, name](Tape<T>& tp,
                                                                       const Tensor<T>& v) {
                probe(name);
                FwdCtx<T> inner{tp, ctx.ln_eps, ctx.dropout, ctx.rng};
                Tensor<T> s = blocks::self_attention_f(inner, layer.san, cfg_.heads, v, mask);
                Tensor<T> mid = tensor::add(tp, v, s);
                return tensor::add(tp, s, blocks::ffn_f(inner, layer.ffn, mid));
            };

            switch (cfg_.granularity) {
                case Granularity::Fused:
                    y = blocks::block_forward(tape, layer.coef, fused_stage, y, state);
                    break;
                case Granularity::SublayerWise:
                    y = blocks::block_forward(tape, layer.coef_san, san_stage, y, state);
                    y = blocks::block_forward(tape, layer.coef_ffn, ffn_stage, y, state);
                    break;
                case Granularity::SanOnly:
                    y = blocks::block_forward(tape, layer.coef_san, san_stage, y, state);
                    y = tensor::add(tape, y, ffn_stage(tape, y));
                    break;
                case Granularity::FfnOnly:
                    y = tensor::add(tape, y, san_stage(tape, y));
                    y = blocks::block_forward(tape, layer.coef_ffn, ffn_stage, y, state);
                    break;
            }
        }
        return y;
    }

    ModelConfig cfg_;
    ParamStore<T> store_;
    std::vector<EncLayerParams<T>> enc_layers_;
    std::vector<DecLayerParams<T>> dec_layers_;
    Tensor<T> src_embed_, tgt_embed_, out_w_, pos_embed_;
    Tensor<T> enc_ln_g_, enc_ln_b_, dec_ln_g_, dec_ln_b_;
};

// Fraction of valid positions whose argmax logit equals the target.
template <class T>
double token_accuracy(const Tensor<T>& logits, const std::vector<int32_t>& targets,
                      const std::vector<uint8_t>& valid) {
    std::vector<int32_t> pred = tensor::argmax_last(logits);
    int64_t hit = 0, total = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (!valid[i]) continue;
        ++total;
        if (pred[i] == targets[i]) ++hit;
    }
    return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

} // namespace odeformer::models
