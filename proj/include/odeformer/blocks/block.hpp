#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "odeformer/tensor/ops.hpp"
#include "odeformer/tensor/param_store.hpp"

namespace odeformer::blocks {

using tensor::ParamStore;
using tensor::Tape;
using tensor::Tensor;

// Residual-integration rules. The RK2 family differs only in how the two
// stage outputs are combined; the last four rows consume block history.
enum class BlockTag {
    Euler,
    RK2,
    RK2GammaOne,
    RK2LearnableScalar,
    RK2GatedSigmoid,
    RK2GatedSigmoidPair,
    RK2Tanh,
    RK4,
    Leapfrog,
    Multistep,
    DLCL,
    PolyNet,
};

inline const char* block_tag_name(BlockTag tag) {
    switch (tag) {
        case BlockTag::Euler: return "Euler";
        case BlockTag::RK2: return "RK2";
        case BlockTag::RK2GammaOne: return "RK2GammaOne";
        case BlockTag::RK2LearnableScalar: return "RK2LearnableScalar";
        case BlockTag::RK2GatedSigmoid: return "RK2GatedSigmoid";
        case BlockTag::RK2GatedSigmoidPair: return "RK2GatedSigmoidPair";
        case BlockTag::RK2Tanh: return "RK2Tanh";
        case BlockTag::RK4: return "RK4";
        case BlockTag::Leapfrog: return "Leapfrog";
        case BlockTag::Multistep: return "Multistep";
        case BlockTag::DLCL: return "DLCL";
        case BlockTag::PolyNet: return "PolyNet";
    }
    return "?";
}

inline std::vector<BlockTag> all_block_tags() {
    return {BlockTag::Euler,
            BlockTag::RK2,
            BlockTag::RK2GammaOne,
            BlockTag::RK2LearnableScalar,
            BlockTag::RK2GatedSigmoid,
            BlockTag::RK2GatedSigmoidPair,
            BlockTag::RK2Tanh,
            BlockTag::RK4,
            BlockTag::Leapfrog,
            BlockTag::Multistep,
            BlockTag::DLCL,
            BlockTag::PolyNet};
}

// Case-insensitive tag lookup for config strings.
inline BlockTag parse_block_tag(const std::string& s) {
    auto fold = [](std::string v) {
        std::transform(v.begin(), v.end(), v.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        return v;
    };
    const std::string want = fold(s);
    for (BlockTag tag : all_block_tags()) {
        if (fold(block_tag_name(tag)) == want) return tag;
    }
    throw config_error("unknown block variant '" + s + "'");
}

// Number of learnable combination parameters a block of this tag declares
// on top of its shared sublayer parameters.
inline int64_t declared_coeff_params(BlockTag tag, int64_t d_model, int block_index) {
    switch (tag) {
        case BlockTag::RK2LearnableScalar: return 2;
        case BlockTag::RK2GatedSigmoidPair: return 2 * d_model + 1;
        case BlockTag::RK2GatedSigmoid: return 2 * (2 * d_model + 1);
        case BlockTag::RK2Tanh: return 2 * (2 * d_model + 1);
        case BlockTag::Multistep: return 1;
        case BlockTag::DLCL: return block_index + 1;
        default: return 0;
    }
}

template <class T>
struct BlockCoeffs {
    BlockTag tag = BlockTag::Euler;
    Tensor<T> gamma1, gamma2;          // RK2LearnableScalar
    Tensor<T> gate_w, gate_b;          // paired gate, or first gate of the two-gate rows
    Tensor<T> gate2_w, gate2_b;        // second gate (sigmoid/sigmoid, tanh/tanh)
    Tensor<T> mix_k;                   // Multistep
    std::vector<Tensor<T>> dlcl_w;     // DLCL combination weights, one per earlier block
};

template <class T>
BlockCoeffs<T> make_block_coeffs(ParamStore<T>& store, const std::string& prefix, BlockTag tag,
                                 int64_t d_model, int block_index) {
    BlockCoeffs<T> c;
    c.tag = tag;
    switch (tag) {
        case BlockTag::RK2LearnableScalar:
            c.gamma1 = store.create(prefix + ".gamma1", {1});
            c.gamma2 = store.create(prefix + ".gamma2", {1});
            c.gamma1.value()[0] = T(1);
            c.gamma2.value()[0] = T(1);
            break;
        case BlockTag::RK2GatedSigmoidPair:
            c.gate_w = store.create(prefix + ".gate_w", {2 * d_model});
            c.gate_b = store.create(prefix + ".gate_b", {1});
            break;
        case BlockTag::RK2GatedSigmoid:
        case BlockTag::RK2Tanh:
            c.gate_w = store.create(prefix + ".gate1_w", {2 * d_model});
            c.gate_b = store.create(prefix + ".gate1_b", {1});
            c.gate2_w = store.create(prefix + ".gate2_w", {2 * d_model});
            c.gate2_b = store.create(prefix + ".gate2_b", {1});
            break;
        case BlockTag::Multistep:
            c.mix_k = store.create(prefix + ".mix_k", {1});
            c.mix_k.value()[0] = T(0.5);
            break;
        case BlockTag::DLCL:
            for (int l = 0; l <= block_index; ++l) {
                Tensor<T>& w = store.create(prefix + ".dlcl_w" + std::to_string(l), {1});
                w.value()[0] = static_cast<T>(1.0 / static_cast<double>(block_index + 1));
                c.dlcl_w.push_back(w);
            }
            break;
        default:
            break;
    }
    return c;
}

// Cross-block memory. y_prev/y0/history are only populated for the variants
// that consume them; depth counts blocks already applied.
template <class T>
struct BlockState {
    Tensor<T> y_prev;
    Tensor<T> y0;
    std::vector<Tensor<T>> history;
    int depth = 0;
};

template <class T>
using StageFn = std::function<Tensor<T>(Tape<T>&, const Tensor<T>&)>;

namespace detail {

template <class T>
Tensor<T> gate_preact(Tape<T>& tape, const Tensor<T>& f1, const Tensor<T>& f2,
                      const Tensor<T>& w, const Tensor<T>& b) {
    using namespace odeformer::tensor;
    if (f1.shape() != f2.shape()) {
        throw shape_error("gate: stage shapes " + shape_str(f1.shape()) + " and " +
                          shape_str(f2.shape()) + " differ");
    }
    const int64_t d = f1.shape().back();
    if (w.numel() != 2 * d) {
        throw shape_error("gate: weight length " + std::to_string(w.numel()) + ", expected " +
                          std::to_string(2 * d));
    }
    Tensor<T> cat = concat_last(tape, f1, f2);
    Tensor<T> wc = reshape(tape, w, {2 * d, 1});
    Tensor<T> s = add_bias(tape, matmul(tape, cat, wc), b);  // [..., 1]
    tensor::Shape lead(f1.shape().begin(), f1.shape().end() - 1);
    return reshape(tape, s, lead);
}

} // namespace detail

// Scalar gate per (batch, position): sigmoid([F1, F2] . W + b), strictly in (0,1).
template <class T>
Tensor<T> rk2_gate(Tape<T>& tape, const Tensor<T>& f1, const Tensor<T>& f2, const Tensor<T>& w,
                   const Tensor<T>& b) {
    return tensor::sigmoid(tape, detail::gate_preact(tape, f1, f2, w, b));
}

// One residual-integration step. All stage evaluations go through the single
// StageFn, so the sublayer parameters are shared across stages by
// construction. `state` is advanced in place.
template <class T>
Tensor<T> block_forward(Tape<T>& tape, const BlockCoeffs<T>& coef, const StageFn<T>& f,
                        const Tensor<T>& y, BlockState<T>& state) {
    using namespace odeformer::tensor;
    const BlockTag tag = coef.tag;

    // History bootstrap: the first block sees y_{-1} := y_0.
    if (tag == BlockTag::Leapfrog || tag == BlockTag::Multistep) {
        if (state.depth == 0) {
            state.y_prev = y;
        } else if (!state.y_prev.defined()) {
            throw state_error(std::string(block_tag_name(tag)) + " block at depth " +
                              std::to_string(state.depth) + " is missing y_prev");
        }
    }
    if (tag == BlockTag::DLCL) {
        if (state.depth == 0) {
            state.y0 = y;
            state.history.clear();
        } else if (!state.y0.defined() ||
                   static_cast<int>(state.history.size()) != state.depth) {
            throw state_error("DLCL block at depth " + std::to_string(state.depth) +
                              " expects " + std::to_string(state.depth) +
                              " history entries, has " + std::to_string(state.history.size()));
        }
    }

    Tensor<T> out;
    switch (tag) {
        case BlockTag::Euler: {
            out = add(tape, y, f(tape, y));
            break;
        }
        case BlockTag::RK2: {
            Tensor<T> f1 = f(tape, y);
            Tensor<T> f2 = f(tape, add(tape, y, f1));
            out = add(tape, add(tape, y, scalar_mul(tape, f1, 0.5)), scalar_mul(tape, f2, 0.5));
            break;
        }
        case BlockTag::RK2GammaOne: {
            Tensor<T> f1 = f(tape, y);
            Tensor<T> f2 = f(tape, add(tape, y, f1));
            out = add(tape, add(tape, y, f1), f2);
            break;
        }
        case BlockTag::RK2LearnableScalar: {
            Tensor<T> f1 = f(tape, y);
            Tensor<T> f2 = f(tape, add(tape, y, f1));
            out = add(tape, add(tape, y, scale(tape, f1, coef.gamma1)),
                      scale(tape, f2, coef.gamma2));
            break;
        }
        case BlockTag::RK2GatedSigmoidPair: {
            Tensor<T> f1 = f(tape, y);
            Tensor<T> f2 = f(tape, add(tape, y, f1));
            Tensor<T> g = rk2_gate(tape, f1, f2, coef.gate_w, coef.gate_b);
            out = add(tape, add(tape, y, scale_rows(tape, f1, g)),
                      scale_rows(tape, f2, one_minus(tape, g)));
            break;
        }
        case BlockTag::RK2GatedSigmoid: {
            Tensor<T> f1 = f(tape, y);
            Tensor<T> f2 = f(tape, add(tape, y, f1));
            Tensor<T> g1 = rk2_gate(tape, f1, f2, coef.gate_w, coef.gate_b);
            Tensor<T> g2 = rk2_gate(tape, f1, f2, coef.gate2_w, coef.gate2_b);
            out = add(tape, add(tape, y, scale_rows(tape, f1, g1)),
                      scale_rows(tape, f2, g2));
            break;
        }
        case BlockTag::RK2Tanh: {
            Tensor<T> f1 = f(tape, y);
            Tensor<T> f2 = f(tape, add(tape, y, f1));
            Tensor<T> g1 =
                tanh_act(tape, detail::gate_preact(tape, f1, f2, coef.gate_w, coef.gate_b));
            Tensor<T> g2 =
                tanh_act(tape, detail::gate_preact(tape, f1, f2, coef.gate2_w, coef.gate2_b));
            out = add(tape, add(tape, y, scale_rows(tape, f1, g1)),
                      scale_rows(tape, f2, g2));
            break;
        }
        case BlockTag::RK4: {
            Tensor<T> f1 = f(tape, y);
            Tensor<T> f2 = f(tape, add(tape, y, scalar_mul(tape, f1, 0.5)));
            Tensor<T> f3 = f(tape, add(tape, y, scalar_mul(tape, f2, 0.5)));
            Tensor<T> f4 = f(tape, add(tape, y, f3));
            out = add(tape, y, scalar_mul(tape, f1, 1.0 / 6.0));
            out = add(tape, out, scalar_mul(tape, f2, 2.0 / 6.0));
            out = add(tape, out, scalar_mul(tape, f3, 2.0 / 6.0));
            out = add(tape, out, scalar_mul(tape, f4, 1.0 / 6.0));
            break;
        }
        case BlockTag::Leapfrog: {
            out = add(tape, state.y_prev, scalar_mul(tape, f(tape, y), 2.0));
            break;
        }
        case BlockTag::Multistep: {
            Tensor<T> k = clamp01(tape, coef.mix_k);
            Tensor<T> mixed = add(tape, scale(tape, y, k),
                                  scale(tape, state.y_prev, one_minus(tape, k)));
            out = add(tape, mixed, f(tape, y));
            break;
        }
        case BlockTag::DLCL: {
            if (static_cast<int>(coef.dlcl_w.size()) != state.depth + 1) {
                throw state_error("DLCL block has " + std::to_string(coef.dlcl_w.size()) +
                                  " weights for depth " + std::to_string(state.depth));
            }
            state.history.push_back(f(tape, y));
            out = state.y0;
            for (size_t l = 0; l < state.history.size(); ++l) {
                out = add(tape, out, scale(tape, state.history[l], coef.dlcl_w[l]));
            }
            break;
        }
        case BlockTag::PolyNet: {
            Tensor<T> f1 = f(tape, y);
            Tensor<T> f2 = f(tape, f1);
            out = add(tape, add(tape, y, f1), f2);
            break;
        }
    }

    if (tag == BlockTag::Leapfrog || tag == BlockTag::Multistep) state.y_prev = y;
    state.depth += 1;
    return out;
}

// Stage evaluations per block, fixed per tag.
inline int stage_count(BlockTag tag) {
    switch (tag) {
        case BlockTag::RK4: return 4;
        case BlockTag::RK2:
        case BlockTag::RK2GammaOne:
        case BlockTag::RK2LearnableScalar:
        case BlockTag::RK2GatedSigmoid:
        case BlockTag::RK2GatedSigmoidPair:
        case BlockTag::RK2Tanh:
        case BlockTag::PolyNet: return 2;
        default: return 1;
    }
}

// Closed-form depth gradient d y_L / d y_t for the linear probe F(y) = c*y.
// RK2 contracts by 1/2 per stage pair; the gamma=1 variant does not.
inline double analytic_depth_gradient(BlockTag tag, double c, int depth, int index) {
    if (index < 0 || index >= depth) {
        throw config_error("analytic_depth_gradient: index must satisfy 0 <= t < L");
    }
    const int span = depth - index;
    switch (tag) {
        case BlockTag::RK2:
            // per-block factor (1 + (1+c)^2) / 2 = 1 + c + c^2/2
            return std::pow(1.0 + c + 0.5 * c * c, span);
        case BlockTag::RK2GammaOne:
            return std::pow((1.0 + c) * (1.0 + c), span);
        default:
            throw config_error("analytic_depth_gradient: no closed form for variant " +
                               std::string(block_tag_name(tag)));
    }
}

} // namespace odeformer::blocks
