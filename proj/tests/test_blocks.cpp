#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "odeformer/blocks/block.hpp"
#include "odeformer/blocks/sublayer.hpp"
#include "odeformer/rng.hpp"
#include "odeformer/tensor/grad_check.hpp"

using namespace odeformer;
using namespace odeformer::blocks;
using namespace odeformer::tensor;

using DTensor = Tensor<double>;
using DTape = Tape<double>;

namespace {

constexpr int64_t kD = 4;
constexpr int64_t kHeads = 2;
constexpr int64_t kFfn = 8;
constexpr int64_t kBatch = 2;
constexpr int64_t kLen = 3;

struct TestLayer {
    ParamStore<double> store;
    AttnParams<double> attn;
    FfnParams<double> ffn;

    explicit TestLayer(uint64_t seed, double scale = 0.3) {
        attn = make_attn_params(store, "blk.san", kD);
        ffn = make_ffn_params(store, "blk.ffn", kD, kFfn);
        Rng rng(seed);
        for (auto& [name, t] : store) {
            if (name.find("ln_") == std::string::npos) fill_normal(t, rng, 0.0, scale);
        }
    }
};

DTensor random_input(uint64_t seed) {
    Rng rng(seed);
    DTensor y = DTensor::zeros({kBatch, kLen, kD});
    fill_normal(y, rng, 0.0, 1.0);
    return y;
}

// Fused SAN+FFN increment: the whole pre-norm layer as one stage function.
StageFn<double> fused_stage(TestLayer& layer, int* counter = nullptr) {
    return [&layer, counter](DTape& tape, const DTensor& y) {
        if (counter) ++*counter;
        FwdCtx<double> ctx{tape};
        DTensor mask = attn_mask<double>(y.dim(0), kHeads, y.dim(1), y.dim(1), {}, false);
        DTensor s = self_attention_f(ctx, layer.attn, kHeads, y, mask);
        DTensor mid = add(tape, y, s);
        return add(tape, s, ffn_f(ctx, layer.ffn, mid));
    };
}

StageFn<double> probe_stage(double c) {
    return [c](DTape& tape, const DTensor& y) { return scalar_mul(tape, y, c); };
}

BlockCoeffs<double> coeffs_for(ParamStore<double>& store, BlockTag tag, int block_index = 0) {
    return make_block_coeffs(store, std::string("coef.") + block_tag_name(tag) + "." +
                                        std::to_string(block_index),
                             tag, kD, block_index);
}

} // namespace

TEST_CASE("variant tags parse case-insensitively") {
    CHECK(parse_block_tag("euler") == BlockTag::Euler);
    CHECK(parse_block_tag("rk2gammaone") == BlockTag::RK2GammaOne);
    CHECK(parse_block_tag("RK2GatedSigmoidPair") == BlockTag::RK2GatedSigmoidPair);
    CHECK(parse_block_tag("dlcl") == BlockTag::DLCL);
    CHECK_THROWS_AS(parse_block_tag("rk3"), config_error);
    CHECK(all_block_tags().size() == 12);
}

TEST_CASE("zeroed output projections make the sublayer increment vanish") {
    TestLayer layer(3);
    // Zero wo/bo and w2/b2: both increments must be exactly zero.
    for (double& v : layer.attn.wo.value()) v = 0.0;
    for (double& v : layer.attn.bo.value()) v = 0.0;
    for (double& v : layer.ffn.w2.value()) v = 0.0;
    for (double& v : layer.ffn.b2.value()) v = 0.0;

    DTape tape;
    FwdCtx<double> ctx{tape};
    DTensor y = random_input(5);
    DTensor mask = attn_mask<double>(kBatch, kHeads, kLen, kLen, {}, false);

    SublayerSpec san{SublayerKind::SAN, kD, kHeads, 0, 0.0};
    DTensor fs = sublayer_f<double>(ctx, san, &layer.attn, nullptr, y, mask);
    for (double v : fs.value()) CHECK(v == 0.0);

    SublayerSpec ffn{SublayerKind::FFN, kD, 1, kFfn, 0.0};
    DTensor ff = sublayer_f<double>(ctx, ffn, nullptr, &layer.ffn, y, mask);
    for (double v : ff.value()) CHECK(v == 0.0);
}

TEST_CASE("ffn increment on a single position matches the affine-relu-affine chain") {
    ParamStore<double> store;
    FfnParams<double> p = make_ffn_params(store, "f", kD, kFfn);
    Rng rng(11);
    fill_normal(p.w1, rng, 0.0, 0.5);
    fill_normal(p.b1, rng, 0.0, 0.5);
    fill_normal(p.w2, rng, 0.0, 0.5);
    fill_normal(p.b2, rng, 0.0, 0.5);

    DTensor y = DTensor::from_data({1, 1, kD}, {1.0, 3.0, -2.0, 0.5});
    DTape tape;
    FwdCtx<double> ctx{tape};
    DTensor out = ffn_f(ctx, p, y);

    // Direct evaluation oracle.
    const double eps = 1e-6;
    double mean = (1.0 + 3.0 - 2.0 + 0.5) / 4.0;
    double var = 0.0;
    for (double v : {1.0, 3.0, -2.0, 0.5}) var += (v - mean) * (v - mean);
    var /= 4.0;
    std::vector<double> xhat;
    for (double v : {1.0, 3.0, -2.0, 0.5}) xhat.push_back((v - mean) / std::sqrt(var + eps));

    std::vector<double> hidden(kFfn);
    for (int64_t j = 0; j < kFfn; ++j) {
        double acc = p.b1.value()[j];
        for (int64_t i = 0; i < kD; ++i) acc += xhat[i] * p.w1.value()[i * kFfn + j];
        hidden[j] = std::max(acc, 0.0);
    }
    for (int64_t j = 0; j < kD; ++j) {
        double acc = p.b2.value()[j];
        for (int64_t i = 0; i < kFfn; ++i) acc += hidden[i] * p.w2.value()[i * kD + j];
        CHECK(out.value()[j] == doctest::Approx(acc).epsilon(1e-10));
    }
}

TEST_CASE("single-position attention reduces to the value-output path") {
    ParamStore<double> store;
    AttnParams<double> p = make_attn_params(store, "a", kD);
    Rng rng(13);
    for (auto& [name, t] : store) {
        if (name.find("ln_") == std::string::npos) fill_normal(t, rng, 0.0, 0.5);
    }

    DTensor y = DTensor::from_data({1, 1, kD}, {0.3, -1.2, 2.0, 0.7});
    DTape tape;
    FwdCtx<double> ctx{tape};
    DTensor mask = attn_mask<double>(1, 1, 1, 1, {}, false);
    DTensor out = attention_f(ctx, p, 1, y, y, true, mask);

    // Softmax over one position puts weight 1 on it: out = (LN(y) Wv + bv) Wo + bo.
    DTensor h = layer_norm(tape, y, p.ln_g, p.ln_b, ctx.ln_eps);
    DTensor v = add_bias(tape, matmul(tape, h, p.wv), p.bv);
    DTensor expect = add_bias(tape, matmul(tape, v, p.wo), p.bo);
    for (int64_t i = 0; i < kD; ++i) {
        CHECK(out.value()[i] == doctest::Approx(expect.value()[i]).epsilon(1e-12));
    }
}

TEST_CASE("zero stage function leaves every variant at the identity") {
    StageFn<double> zero = [](DTape& tape, const DTensor& y) {
        (void)tape;
        return DTensor::zeros(y.shape());
    };
    DTensor y = random_input(17);
    for (BlockTag tag : all_block_tags()) {
        CAPTURE(block_tag_name(tag));
        ParamStore<double> store;
        BlockCoeffs<double> coef = coeffs_for(store, tag);
        BlockState<double> state;
        DTape tape;
        DTensor out = block_forward(tape, coef, zero, y, state);
        REQUIRE(out.shape() == y.shape());
        for (int64_t i = 0; i < y.numel(); ++i) {
            CHECK(out.value()[i] == doctest::Approx(y.value()[i]).epsilon(1e-15));
        }
    }
}

TEST_CASE("linear probe forward factors at c = 0.1") {
    const double c = 0.1;
    DTensor y = DTensor::full({1, 1, 1}, 1.0);

    auto factor = [&](BlockTag tag) {
        ParamStore<double> store;
        BlockCoeffs<double> coef = coeffs_for(store, tag);
        BlockState<double> state;
        DTape tape;
        return block_forward(tape, coef, probe_stage(c), y, state).value()[0];
    };

    CHECK(factor(BlockTag::Euler) == doctest::Approx(1.1).epsilon(1e-14));
    CHECK(factor(BlockTag::RK2) == doctest::Approx(1.105).epsilon(1e-14));
    CHECK(factor(BlockTag::RK2GammaOne) == doctest::Approx(1.21).epsilon(1e-14));
    // gamma scalars start at 1, so the learnable row starts at the gamma=1 value
    CHECK(factor(BlockTag::RK2LearnableScalar) == doctest::Approx(1.21).epsilon(1e-14));
    CHECK(factor(BlockTag::PolyNet) == doctest::Approx(1.11).epsilon(1e-14));
    // RK4 stages: 0.1, 0.105, 0.10525, 0.110525 -> 1 + 0.631025/6
    CHECK(factor(BlockTag::RK4) == doctest::Approx(1.0 + 0.631025 / 6.0).epsilon(1e-14));
}

TEST_CASE("history variants across two blocks on the linear probe") {
    const double c = 0.1;
    DTensor y = DTensor::full({1, 1, 1}, 1.0);

    auto two_blocks = [&](BlockTag tag) {
        ParamStore<double> store;
        BlockCoeffs<double> c0 = coeffs_for(store, tag, 0);
        BlockCoeffs<double> c1 = coeffs_for(store, tag, 1);
        BlockState<double> state;
        DTape tape;
        DTensor y1 = block_forward(tape, c0, probe_stage(c), y, state);
        return block_forward(tape, c1, probe_stage(c), y1, state).value()[0];
    };

    // Leapfrog: y1 = (1+2c) y0; y2 = y0 + 2c y1 = 1 + 2c + 4c^2
    CHECK(two_blocks(BlockTag::Leapfrog) == doctest::Approx(1.0 + 2 * c + 4 * c * c).epsilon(1e-14));
    // Multistep (k=0.5): y1 = (1+c) y0; y2 = 0.5 y1 + 0.5 y0 + c y1 = 1 + 1.5c + c^2
    CHECK(two_blocks(BlockTag::Multistep) ==
          doctest::Approx(1.0 + 1.5 * c + c * c).epsilon(1e-14));
    // DLCL: y1 = (1+c) y0 with w0=1; y2 = y0 + 0.5 c y0 + 0.5 c (1+c) y0
    CHECK(two_blocks(BlockTag::DLCL) ==
          doctest::Approx(1.0 + c + 0.5 * c * c).epsilon(1e-14));
}

TEST_CASE("dlcl first block with unit weight equals euler") {
    DTensor y = random_input(19);
    TestLayer layer(23);
    StageFn<double> f = fused_stage(layer);

    ParamStore<double> cs;
    BlockCoeffs<double> dlcl = coeffs_for(cs, BlockTag::DLCL, 0);
    dlcl.dlcl_w[0].value()[0] = 1.0;
    BlockCoeffs<double> euler = coeffs_for(cs, BlockTag::Euler, 0);

    DTape tape;
    BlockState<double> s1, s2;
    DTensor a = block_forward(tape, dlcl, f, y, s1);
    DTensor b = block_forward(tape, euler, f, y, s2);
    for (int64_t i = 0; i < a.numel(); ++i) {
        CHECK(a.value()[i] == doctest::Approx(b.value()[i]).epsilon(1e-14));
    }
}

TEST_CASE("stage function is called the declared number of times") {
    DTensor y = random_input(29);
    TestLayer layer(31);
    for (BlockTag tag : all_block_tags()) {
        CAPTURE(block_tag_name(tag));
        int calls = 0;
        StageFn<double> f = fused_stage(layer, &calls);
        ParamStore<double> store;
        BlockCoeffs<double> coef = coeffs_for(store, tag);
        BlockState<double> state;
        DTape tape;
        block_forward(tape, coef, f, y, state);
        CHECK(calls == stage_count(tag));
    }
}

TEST_CASE("gate with zero parameters is exactly one half") {
    DTape tape;
    DTensor f1 = random_input(37);
    DTensor f2 = random_input(41);
    DTensor w = DTensor::zeros({2 * kD});
    DTensor b = DTensor::zeros({1});
    DTensor g = rk2_gate(tape, f1, f2, w, b);
    CHECK(g.shape() == Shape{kBatch, kLen});
    for (double v : g.value()) CHECK(v == 0.5);
}

TEST_CASE("gate saturates toward one for large bias") {
    DTape tape;
    DTensor f1 = random_input(43);
    DTensor f2 = random_input(47);
    DTensor w = DTensor::zeros({2 * kD});
    DTensor b = DTensor::full({1}, 30.0);
    DTensor g = rk2_gate(tape, f1, f2, w, b);
    for (double v : g.value()) {
        CHECK(v > 1.0 - 1e-9);
        CHECK(v < 1.0);
    }
}

TEST_CASE("gate rejects a wrong-length weight vector") {
    DTape tape;
    DTensor f1 = random_input(51);
    DTensor f2 = random_input(53);
    CHECK_THROWS_AS(rk2_gate(tape, f1, f2, DTensor::zeros({kD}), DTensor::zeros({1})),
                    shape_error);
}

TEST_CASE("gradient through the gate matches finite differences") {
    Rng rng(59);
    DTensor f1 = random_input(61);
    DTensor f2 = random_input(67);
    DTensor b = DTensor::scalar(0.2);

    double err = grad_check<double>(
        [&](DTape& t, const DTensor& w) {
            DTensor g = rk2_gate(t, f1, f2, w, b);
            return sum_all(t, mul(t, g, g));
        },
        [&] {
            DTensor w = DTensor::zeros({2 * kD});
            fill_normal(w, rng, 0.0, 0.5);
            return w;
        }(),
        1e-5);
    CHECK(err < 1e-6);
}

TEST_CASE("zeroed gate parameters reduce the paired variant to rk2") {
    TestLayer layer(71);
    StageFn<double> f = fused_stage(layer);
    ParamStore<double> cs;
    BlockCoeffs<double> gated = coeffs_for(cs, BlockTag::RK2GatedSigmoidPair);
    BlockCoeffs<double> rk2 = coeffs_for(cs, BlockTag::RK2);

    for (uint64_t seed = 100; seed < 110; ++seed) {
        DTensor y = random_input(seed);
        DTape tape;
        BlockState<double> s1, s2;
        DTensor a = block_forward(tape, gated, f, y, s1);
        DTensor b = block_forward(tape, rk2, f, y, s2);
        for (int64_t i = 0; i < a.numel(); ++i) {
            CHECK(std::abs(a.value()[i] - b.value()[i]) < 1e-12);
        }
    }
}

TEST_CASE("declared coefficient parameter counts") {
    CHECK(declared_coeff_params(BlockTag::Euler, 64, 0) == 0);
    CHECK(declared_coeff_params(BlockTag::RK2, 64, 0) == 0);
    CHECK(declared_coeff_params(BlockTag::RK4, 64, 0) == 0);
    CHECK(declared_coeff_params(BlockTag::RK2LearnableScalar, 64, 0) == 2);
    CHECK(declared_coeff_params(BlockTag::RK2GatedSigmoidPair, 64, 0) == 2 * 64 + 1);
    CHECK(declared_coeff_params(BlockTag::RK2GatedSigmoid, 64, 0) == 2 * (2 * 64 + 1));
    CHECK(declared_coeff_params(BlockTag::RK2Tanh, 64, 0) == 2 * (2 * 64 + 1));
    CHECK(declared_coeff_params(BlockTag::Multistep, 64, 0) == 1);
    CHECK(declared_coeff_params(BlockTag::DLCL, 64, 3) == 4);
    CHECK(declared_coeff_params(BlockTag::PolyNet, 64, 0) == 0);

    // Store totals match the declared counts exactly.
    for (BlockTag tag : all_block_tags()) {
        ParamStore<double> store;
        make_block_coeffs(store, "c", tag, 64, 3);
        CHECK(store.total_params() == declared_coeff_params(tag, 64, 3));
    }
}

TEST_CASE("analytic depth gradient closed forms") {
    // one block: RK2 factor 1.105, gamma-one factor 1.21 at c = 0.1
    CHECK(analytic_depth_gradient(BlockTag::RK2, 0.1, 1, 0) ==
          doctest::Approx(1.105).epsilon(1e-14));
    CHECK(analytic_depth_gradient(BlockTag::RK2GammaOne, 0.1, 1, 0) ==
          doctest::Approx(1.21).epsilon(1e-14));
    // zero field passes gradients unchanged
    CHECK(analytic_depth_gradient(BlockTag::RK2, 0.0, 6, 2) == 1.0);
    CHECK(analytic_depth_gradient(BlockTag::RK2GammaOne, 0.0, 6, 2) == 1.0);
    // eight blocks: power oracle
    CHECK(analytic_depth_gradient(BlockTag::RK2, 0.1, 8, 0) ==
          doctest::Approx(std::pow(1.105, 8)).epsilon(1e-13));
    CHECK(analytic_depth_gradient(BlockTag::RK2GammaOne, 0.1, 8, 0) ==
          doctest::Approx(std::pow(1.21, 8)).epsilon(1e-13));
    CHECK_THROWS_AS(analytic_depth_gradient(BlockTag::RK4, 0.1, 2, 0), config_error);
    CHECK_THROWS_AS(analytic_depth_gradient(BlockTag::RK2, 0.1, 2, 2), config_error);
}

TEST_CASE("autodiff through linear-probe stacks matches the closed form") {
    for (BlockTag tag : {BlockTag::RK2, BlockTag::RK2GammaOne}) {
        CAPTURE(block_tag_name(tag));
        for (double c : {0.01, 0.1, 0.5}) {
            const int depth = 8;
            ParamStore<double> store;
            std::vector<BlockCoeffs<double>> coefs;
            for (int t = 0; t < depth; ++t) coefs.push_back(coeffs_for(store, tag, t));

            DTensor y0 = DTensor::full({1, 1, 1}, 1.0);
            y0.set_requires_grad(true);
            DTape tape;
            BlockState<double> state;
            std::vector<DTensor> outputs; // y_1 .. y_L
            DTensor y = y0;
            for (int t = 0; t < depth; ++t) {
                y = block_forward(tape, coefs[static_cast<size_t>(t)], probe_stage(c), y, state);
                outputs.push_back(y);
            }
            DTensor loss = sum_all(tape, y);
            tape.backward(loss);

            // d y_L / d y_t for every prefix depth, including the input t=0.
            for (int t = 0; t < depth; ++t) {
                double expect = analytic_depth_gradient(tag, c, depth, t);
                double got = (t == 0) ? y0.grad()[0] : outputs[static_cast<size_t>(t - 1)]
                                                            .node()->grad[0];
                CHECK(std::abs(got - expect) / expect < 1e-10);
            }
        }
    }
}

TEST_CASE("gradients through one block of every variant check out") {
    TestLayer layer(73, 0.2);
    for (auto& [name, t] : layer.store) t.set_requires_grad(false); // probe input only

    for (BlockTag tag : all_block_tags()) {
        CAPTURE(block_tag_name(tag));
        ParamStore<double> cs;
        BlockCoeffs<double> coef = coeffs_for(cs, tag);
        for (auto& [name, t] : cs) t.set_requires_grad(false);

        double err = grad_check<double>(
            [&](DTape& t, const DTensor& v) {
                StageFn<double> f = fused_stage(layer);
                BlockState<double> state;
                DTensor out = block_forward(t, coef, f, v, state);
                return sum_all(t, mul(t, out, out));
            },
            random_input(81), 1e-5);
        CHECK(err < 1e-6);
    }
}

TEST_CASE("gradients wrt block coefficients check out") {
    TestLayer layer(83, 0.2);
    for (auto& [name, t] : layer.store) t.set_requires_grad(false);
    DTensor y = random_input(87);

    auto through_coef = [&](BlockTag tag, auto pick) {
        ParamStore<double> cs;
        BlockCoeffs<double> coef = coeffs_for(cs, tag);
        for (auto& [name, t] : cs) t.set_requires_grad(false);
        Tensor<double>* slot = pick(coef);
        DTensor x0 = slot->clone();
        return grad_check<double>(
            [&](DTape& t, const DTensor& v) {
                BlockCoeffs<double> local = coef;
                Tensor<double>* lslot = pick(local);
                *lslot = v;
                StageFn<double> f = fused_stage(layer);
                BlockState<double> state;
                DTensor out = block_forward(t, local, f, y, state);
                return sum_all(t, mul(t, out, out));
            },
            x0, 1e-5);
    };

    CHECK(through_coef(BlockTag::RK2LearnableScalar,
                       [](BlockCoeffs<double>& c) { return &c.gamma1; }) < 1e-6);
    CHECK(through_coef(BlockTag::RK2GatedSigmoidPair,
                       [](BlockCoeffs<double>& c) { return &c.gate_w; }) < 1e-6);
    CHECK(through_coef(BlockTag::RK2Tanh,
                       [](BlockCoeffs<double>& c) { return &c.gate2_w; }) < 1e-6);
    CHECK(through_coef(BlockTag::Multistep,
                       [](BlockCoeffs<double>& c) { return &c.mix_k; }) < 1e-6);
    CHECK(through_coef(BlockTag::DLCL,
                       [](BlockCoeffs<double>& c) { return &c.dlcl_w[0]; }) < 1e-6);
}

TEST_CASE("history variants refuse inconsistent state") {
    DTensor y = random_input(91);
    ParamStore<double> cs;

    BlockCoeffs<double> leap = coeffs_for(cs, BlockTag::Leapfrog);
    BlockState<double> s;
    s.depth = 1; // claims one block ran, but y_prev was never stored
    DTape tape;
    CHECK_THROWS_AS(block_forward(tape, leap, probe_stage(0.1), y, s), state_error);

    BlockCoeffs<double> dlcl0 = coeffs_for(cs, BlockTag::DLCL, 0);
    BlockState<double> s2;
    s2.depth = 1;
    CHECK_THROWS_AS(block_forward(tape, dlcl0, probe_stage(0.1), y, s2), state_error);
}
