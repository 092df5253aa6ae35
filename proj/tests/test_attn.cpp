#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <stdexcept>
#include <vector>

#include "fd.hpp"
#include "sigattn/attn.hpp"
#include "sigattn/core.hpp"

using namespace sigattn;

namespace {

AttnConfig sigmoid_cfg() {
    AttnConfig cfg;
    cfg.activation = Activation::sigmoid;
    return cfg;
}

double half_sq_norm(const Matrix& m) {
    double s = 0.0;
    for (double v : m.data) s += v * v;
    return 0.5 * s;
}

Matrix repeat_rows(const Matrix& m, int times) {
    Matrix out(m.rows * times, m.cols);
    for (int t = 0; t < times; ++t)
        for (int i = 0; i < m.rows; ++i)
            for (int j = 0; j < m.cols; ++j) out.at(t * m.rows + i, j) = m.at(i, j);
    return out;
}

}  // namespace

TEST_CASE("logit_bias modes") {
    AttnConfig cfg = sigmoid_cfg();

    cfg.bias = BiasSpec::neg_log_n();
    CHECK(logit_bias(cfg, 1)[0] == 0.0);
    auto b = logit_bias(cfg, 4096);
    CHECK(b.size() == 4096);
    CHECK(b[0] == doctest::Approx(-8.3177661667193433).epsilon(1e-14));
    CHECK(b[4095] == b[0]);

    cfg.bias = BiasSpec::constant(-4.0);
    for (double v : logit_bias(cfg, 5)) CHECK(v == -4.0);

    cfg.bias = BiasSpec::learnable(-10.0);
    for (double v : logit_bias(cfg, 3)) CHECK(v == -10.0);

    cfg.bias = BiasSpec::none();
    for (double v : logit_bias(cfg, 3)) CHECK(v == 0.0);

    cfg.bias = BiasSpec::neg_log_rowlen();
    auto rb = logit_bias(cfg, 3, {1, 2, 3});
    CHECK(rb[0] == 0.0);
    CHECK(rb[1] == doctest::Approx(-std::log(2.0)));
    CHECK(rb[2] == doctest::Approx(-std::log(3.0)));

    CHECK_THROWS_AS(logit_bias(cfg, 0), std::invalid_argument);
    CHECK_THROWS_AS(logit_bias(cfg, 3, {1, 2}), std::invalid_argument);
    CHECK_THROWS_AS(logit_bias(cfg, 2, {1, 0}), std::invalid_argument);
}

TEST_CASE("bias modes are rejected for non-sigmoid activations") {
    AttnConfig cfg;
    cfg.activation = Activation::softmax;
    cfg.bias = BiasSpec::neg_log_n();
    Rng rng(1);
    Matrix q = rng_normal(rng, 3, 2), k = rng_normal(rng, 3, 2), v = rng_normal(rng, 3, 2);
    CHECK_THROWS_AS(attn_forward(q, k, v, cfg), std::invalid_argument);
    cfg.activation = Activation::relu;
    CHECK_THROWS_AS(attn_forward(q, k, v, cfg), std::invalid_argument);
}

TEST_CASE("alibi_bias oracles") {
    // slope 0.5 is head 0 of 8
    CHECK(alibi_slope(0, 8) == 0.5);
    const double expected[] = {1.0 / 2, 1.0 / 4, 1.0 / 8, 1.0 / 16,
                               1.0 / 32, 1.0 / 64, 1.0 / 128, 1.0 / 256};
    for (int h = 0; h < 8; ++h) CHECK(alibi_slope(h, 8) == expected[h]);

    Matrix causal = alibi_bias(3, 0, 8, true);
    for (int i = 0; i < 3; ++i) CHECK(causal.at(i, i) == 0.0);
    CHECK(causal.at(2, 0) == -1.0);
    CHECK(causal.at(2, 1) == -0.5);
    CHECK(causal.at(2, 2) == 0.0);
    CHECK(causal.at(0, 2) == 0.0);  // above-diagonal entries are masked downstream

    Matrix enc = alibi_bias(4, 0, 8, false);
    for (int i = 0; i < 4; ++i) CHECK(enc.at(i, i) == 0.0);
    CHECK(enc.at(0, 2) == -1.0);                               // forward slope m
    CHECK(enc.at(2, 0) == -0.5 * kAlibiBackwardSlopeRatio * 2);  // backward slope m/2
    CHECK(enc.at(2, 0) != enc.at(0, 2));                       // nonsymmetric

    CHECK_THROWS_AS(alibi_bias(3, 8, 8, true), std::invalid_argument);
    CHECK_THROWS_AS(alibi_bias(3, -1, 8, true), std::invalid_argument);
}

TEST_CASE("seq_norm_weights oracles") {
    Matrix ones = seq_norm_weights(5, 0.0, true);
    CHECK(max_abs_diff(ones, Matrix::full(5, 5, 1.0)) == 0.0);

    Matrix causal = seq_norm_weights(3, 1.0, true);
    CHECK(causal.at(0, 0) == 1.0);
    CHECK(causal.at(1, 0) == 0.5);
    CHECK(causal.at(1, 2) == 0.5);
    CHECK(causal.at(2, 1) == doctest::Approx(1.0 / 3.0));

    Matrix enc = seq_norm_weights(4, 0.5, false);
    for (double v : enc.data) CHECK(v == 0.5);
}

TEST_CASE("attn_forward: n=1 softmax returns V exactly") {
    Rng rng(3);
    Matrix q = rng_normal(rng, 1, 4), k = rng_normal(rng, 1, 4), v = rng_normal(rng, 1, 6);
    AttnConfig cfg;  // softmax
    AttnResult r = attn_forward(q, k, v, cfg);
    CHECK(max_abs_diff(r.O, v) == 0.0);
    CHECK(r.P.at(0, 0) == 1.0);
}

TEST_CASE("attn_forward: zero logits with neg_log_n bias approximately normalize") {
    const int n = 6, d = 3;
    Matrix q(n, d), k(n, d);  // zero queries/keys -> zero logits
    Rng rng(4);
    Matrix v = rng_normal(rng, n, 2);
    AttnConfig cfg = sigmoid_cfg();
    cfg.bias = BiasSpec::neg_log_n();
    AttnResult r = attn_forward(q, k, v, cfg);

    const double expect = 1.0 / (n + 1);  // sigma(-ln n)
    for (double p : r.P.data) CHECK(p == doctest::Approx(expect).epsilon(1e-14));
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += r.P.at(i, j);
        CHECK(s == doctest::Approx(n * expect).epsilon(1e-14));
        CHECK(s > 1.0 - 1.0 / n);
        CHECK(s < 1.0);
    }
    // O row = n/(n+1) * column mean of V
    for (int e = 0; e < 2; ++e) {
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += v.at(j, e);
        mean /= n;
        CHECK(r.O.at(0, e) == doctest::Approx(mean * n / (n + 1.0)).epsilon(1e-12));
    }
}

TEST_CASE("attn_forward: masked entries are zero after activation") {
    Rng rng(5);
    const int n = 5;
    Matrix q = rng_normal(rng, n, 3), k = rng_normal(rng, n, 3), v = rng_normal(rng, n, 3);
    for (Activation act : {Activation::sigmoid, Activation::relu, Activation::tanh,
                           Activation::softmax}) {
        AttnConfig cfg;
        cfg.activation = act;
        cfg.causal = true;
        AttnResult r = attn_forward(q, k, v, cfg);
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) CHECK(r.P.at(i, j) == 0.0);
    }
}

TEST_CASE("attn_forward: sigmoid P entries lie in (0,1); softmax rows sum to 1") {
    Rng rng(6);
    const int n = 7;
    Matrix q = rng_normal(rng, n, 4), k = rng_normal(rng, n, 4), v = rng_normal(rng, n, 4);

    AttnConfig scfg = sigmoid_cfg();
    AttnResult rs = attn_forward(q, k, v, scfg);
    for (double p : rs.P.data) {
        CHECK(p > 0.0);
        CHECK(p < 1.0);
    }

    AttnConfig smax;
    smax.causal = true;
    AttnResult rm = attn_forward(q, k, v, smax);
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += rm.P.at(i, j);
        CHECK(std::abs(s - 1.0) <= 1e-12);
    }
}

TEST_CASE("attn_forward: permutation equivariance for non-causal sigmoid") {
    Rng rng(7);
    const int n = 6, d = 3;
    Matrix q = rng_normal(rng, n, d), k = rng_normal(rng, n, d), v = rng_normal(rng, n, d);
    AttnConfig cfg = sigmoid_cfg();
    cfg.bias = BiasSpec::neg_log_n();
    AttnResult base = attn_forward(q, k, v, cfg);

    const int perm[n] = {3, 0, 5, 1, 4, 2};
    Matrix qp(n, d), kp(n, d), vp(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
            qp.at(i, j) = q.at(perm[i], j);
            kp.at(i, j) = k.at(perm[i], j);
            vp.at(i, j) = v.at(perm[i], j);
        }
    AttnResult permuted = attn_forward(qp, kp, vp, cfg);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            CHECK(std::abs(permuted.O.at(i, j) - base.O.at(perm[i], j)) <= 1e-12);
}

TEST_CASE("sequence doubling: invariant iff alpha=1, ratio 2^(1-alpha) otherwise") {
    Rng rng(8);
    const int n = 5, d = 3;
    Matrix q = rng_normal(rng, n, d), k = rng_normal(rng, n, d), v = rng_normal(rng, n, d);
    Matrix q2 = repeat_rows(q, 2), k2 = repeat_rows(k, 2), v2 = repeat_rows(v, 2);

    for (double alpha : {1.0, 0.5, 0.0}) {
        AttnConfig cfg = sigmoid_cfg();
        cfg.alpha = alpha;
        cfg.bias = BiasSpec::constant(-2.0);  // fixed bias: independent of sequence length
        AttnResult r1 = attn_forward(q, k, v, cfg);
        AttnResult r2 = attn_forward(q2, k2, v2, cfg);
        const double ratio = std::pow(2.0, 1.0 - alpha);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
                CHECK(std::abs(r2.O.at(i, j) - ratio * r1.O.at(i, j)) <= 1e-12);
    }
}

TEST_CASE("attn_forward shape errors") {
    Rng rng(9);
    Matrix q = rng_normal(rng, 3, 4), k = rng_normal(rng, 3, 5), v = rng_normal(rng, 3, 4);
    AttnConfig cfg = sigmoid_cfg();
    CHECK_THROWS_AS(attn_forward(q, k, v, cfg), std::invalid_argument);

    Matrix k2 = rng_normal(rng, 4, 4), v2 = rng_normal(rng, 3, 4);
    CHECK_THROWS_AS(attn_forward(q, k2, v2, cfg), std::invalid_argument);  // K/V rows disagree

    cfg.causal = true;
    Matrix k3 = rng_normal(rng, 5, 4), v3 = rng_normal(rng, 5, 4);
    CHECK_THROWS_AS(attn_forward(q, k3, v3, cfg), std::invalid_argument);  // causal non-square

    cfg.alpha = -0.5;
    CHECK_THROWS_AS(attn_forward(q, k, v, cfg), std::invalid_argument);
}

TEST_CASE("attn_backward: zero upstream gradient gives zero triple") {
    Rng rng(10);
    Matrix q = rng_normal(rng, 4, 3), k = rng_normal(rng, 4, 3), v = rng_normal(rng, 4, 3);
    AttnConfig cfg = sigmoid_cfg();
    GradTriple g = attn_backward(q, k, v, Matrix(4, 3), cfg);
    CHECK(max_abs(g.dQ) == 0.0);
    CHECK(max_abs(g.dK) == 0.0);
    CHECK(max_abs(g.dV) == 0.0);
}

TEST_CASE("attn_backward matches finite differences across every config combination") {
    const int n = 5, d = 3, d_v = 3;
    const double h = 1e-5;

    struct Combo {
        Activation act;
        BiasSpec bias;
    };
    std::vector<Combo> combos = {
        {Activation::softmax, BiasSpec::none()},
        {Activation::relu, BiasSpec::none()},
        {Activation::tanh, BiasSpec::none()},
        {Activation::sigmoid, BiasSpec::none()},
        {Activation::sigmoid, BiasSpec::constant(-4.0)},
        {Activation::sigmoid, BiasSpec::neg_log_n()},
        {Activation::sigmoid, BiasSpec::neg_log_rowlen()},
        {Activation::sigmoid, BiasSpec::learnable(-2.0)},
    };

    int checked = 0;
    uint64_t seed = 100;
    for (const Combo& combo : combos)
        for (bool causal : {false, true})
            for (double alpha : {0.0, 0.5, 1.0})
                for (bool alibi : {false, true}) {
                    AttnConfig cfg;
                    cfg.activation = combo.act;
                    cfg.bias = combo.bias;
                    cfg.causal = causal;
                    cfg.alpha = alpha;
                    if (alibi) cfg.pos_bias = PosBias::alibi(4, 1);

                    Rng rng(seed++);
                    Matrix q = rng_normal(rng, n, d), k = rng_normal(rng, n, d);
                    Matrix v = rng_normal(rng, n, d_v);

                    AttnResult fwd = attn_forward(q, k, v, cfg);
                    GradTriple g = attn_backward(q, k, v, fwd.O, cfg);

                    auto loss = [&] { return half_sq_norm(attn_forward(q, k, v, cfg).O); };
                    Matrix* inputs[] = {&q, &k, &v};
                    const Matrix* grads[] = {&g.dQ, &g.dK, &g.dV};
                    for (int m = 0; m < 3; ++m)
                        for (size_t idx = 0; idx < inputs[m]->data.size(); ++idx) {
                            double fd = central_diff(loss, &inputs[m]->data[idx], h);
                            CHECK_MESSAGE(grad_close(grads[m]->data[idx], fd),
                                          "combo act=" << static_cast<int>(combo.act)
                                                       << " causal=" << causal << " alpha=" << alpha
                                                       << " alibi=" << alibi << " matrix=" << m
                                                       << " idx=" << idx);
                        }
                    ++checked;
                }
    CHECK(checked == static_cast<int>(combos.size()) * 2 * 3 * 2);
}

TEST_CASE("attn_backward with qk normalization matches finite differences") {
    const int n = 4, d = 4;
    const double h = 1e-5;
    Rng rng(55);
    Matrix q = rng_normal(rng, n, d), k = rng_normal(rng, n, d), v = rng_normal(rng, n, d);
    AttnConfig cfg = sigmoid_cfg();
    cfg.qk_norm = true;
    cfg.qk_norm_eps = 1e-6;
    cfg.bias = BiasSpec::constant(-1.0);

    AttnResult fwd = attn_forward(q, k, v, cfg);
    GradTriple g = attn_backward(q, k, v, fwd.O, cfg);
    auto loss = [&] { return half_sq_norm(attn_forward(q, k, v, cfg).O); };
    Matrix* inputs[] = {&q, &k, &v};
    const Matrix* grads[] = {&g.dQ, &g.dK, &g.dV};
    for (int m = 0; m < 3; ++m)
        for (size_t idx = 0; idx < inputs[m]->data.size(); ++idx) {
            double fd = central_diff(loss, &inputs[m]->data[idx], h);
            CHECK(grad_close(grads[m]->data[idx], fd));
        }
}

TEST_CASE("learnable bias scalar gradient matches finite differences") {
    const int n = 5, d = 3;
    Rng rng(66);
    Matrix q = rng_normal(rng, n, d), k = rng_normal(rng, n, d), v = rng_normal(rng, n, d);
    for (bool causal : {false, true}) {
        AttnConfig cfg = sigmoid_cfg();
        cfg.bias = BiasSpec::learnable(-1.5);
        cfg.causal = causal;
        AttnResult fwd = attn_forward(q, k, v, cfg);
        double d_bias = 0.0;
        attn_backward_ex(q, k, v, fwd.O, cfg, &d_bias);
        auto loss = [&] { return half_sq_norm(attn_forward(q, k, v, cfg).O); };
        double fd = central_diff(loss, &cfg.bias.value, 1e-5);
        CHECK(grad_close(d_bias, fd));
    }
}

TEST_CASE("qk_normalize oracles") {
    Matrix constant_row(1, 4, {2.0, 2.0, 2.0, 2.0});
    Matrix z = qk_normalize(constant_row, {1.0, 1.0, 1.0, 1.0}, 1e-6);
    for (double v : z.data) CHECK(v == 0.0);

    Matrix pm(1, 2, {1.0, -1.0});
    Matrix y = qk_normalize(pm, {1.0, 1.0}, 1e-12);
    CHECK(std::abs(y.at(0, 0) - 1.0) <= 1e-9);
    CHECK(std::abs(y.at(0, 1) + 1.0) <= 1e-9);

    Rng rng(12);
    Matrix x = rng_normal(rng, 5, 16, 1.0, 3.0);
    Matrix n = qk_normalize(x, std::vector<double>(16, 1.0), 1e-10);
    for (int i = 0; i < 5; ++i) {
        double mu = 0.0, var = 0.0;
        for (int j = 0; j < 16; ++j) mu += n.at(i, j);
        mu /= 16;
        for (int j = 0; j < 16; ++j) var += (n.at(i, j) - mu) * (n.at(i, j) - mu);
        var /= 16;
        CHECK(std::abs(mu) <= 1e-12);
        CHECK(std::abs(var - 1.0) <= 1e-6);
    }

    CHECK_THROWS_AS(qk_normalize(pm, {1.0}, 1e-6), std::invalid_argument);
}

TEST_CASE("qk_normalize_backward matches finite differences and accumulates gain grads") {
    Rng rng(13);
    const int rows = 3, d = 5;
    Matrix x = rng_normal(rng, rows, d);
    std::vector<double> gain = {0.9, 1.1, 1.0, 0.8, 1.2};
    Matrix w = rng_normal(rng, rows, d);  // random linear functional
    const double eps = 1e-6;

    auto loss = [&] {
        Matrix y = qk_normalize(x, gain, eps);
        double s = 0.0;
        for (size_t i = 0; i < y.data.size(); ++i) s += y.data[i] * w.data[i];
        return s;
    };
    std::vector<double> d_gain(d, 0.0);
    Matrix dX = qk_normalize_backward(x, gain, eps, w, &d_gain);
    for (size_t idx = 0; idx < x.data.size(); ++idx) {
        double fd = central_diff(loss, &x.data[idx], 1e-6);
        CHECK(grad_close(dX.data[idx], fd));
    }
    for (int j = 0; j < d; ++j) {
        double fd = central_diff(loss, &gain[j], 1e-6);
        CHECK(grad_close(d_gain[j], fd));
    }
}

TEST_CASE("apply_rope oracles") {
    Rng rng(14);
    Matrix m = rng_normal(rng, 6, 8);
    Matrix r = apply_rope(m);

    for (int j = 0; j < 8; ++j) CHECK(r.at(0, j) == m.at(0, j));  // position 0 unchanged

    for (int p = 0; p < 6; ++p) {
        double before = 0.0, after = 0.0;
        for (int j = 0; j < 8; ++j) {
            before += m.at(p, j) * m.at(p, j);
            after += r.at(p, j) * r.at(p, j);
        }
        CHECK(std::abs(std::sqrt(before) - std::sqrt(after)) <= 1e-12);
    }

    Matrix unit(4, 2);
    for (int p = 0; p < 4; ++p) unit.at(p, 0) = 1.0;
    Matrix ru = apply_rope(unit, 12345.0);  // d=2: angle is p regardless of base
    for (int p = 0; p < 4; ++p) {
        CHECK(ru.at(p, 0) == doctest::Approx(std::cos(static_cast<double>(p))).epsilon(1e-14));
        CHECK(ru.at(p, 1) == doctest::Approx(std::sin(static_cast<double>(p))).epsilon(1e-14));
    }

    CHECK_THROWS_AS(apply_rope(Matrix(2, 3)), std::invalid_argument);
}

TEST_CASE("apply_rope_backward is the adjoint of apply_rope") {
    Rng rng(15);
    Matrix x = rng_normal(rng, 5, 6), y = rng_normal(rng, 5, 6);
    Matrix rx = apply_rope(x);
    Matrix ay = apply_rope_backward(y);
    double lhs = 0.0, rhs = 0.0;
    for (size_t i = 0; i < x.data.size(); ++i) {
        lhs += rx.data[i] * y.data[i];
        rhs += x.data[i] * ay.data[i];
    }
    CHECK(std::abs(lhs - rhs) <= 1e-12);
}

TEST_CASE("multihead_attn oracles") {
    Rng rng(16);
    const int n = 5, d_model = 6, d_head = 3;
    Matrix x = rng_normal(rng, n, d_model);
    AttnConfig cfg = sigmoid_cfg();
    cfg.bias = BiasSpec::neg_log_n();

    // h=1 with identity Wo reproduces single-head attn_forward
    std::vector<Matrix> wq = {rng_normal(rng, d_model, d_head)};
    std::vector<Matrix> wk = {rng_normal(rng, d_model, d_head)};
    std::vector<Matrix> wv = {rng_normal(rng, d_model, d_head)};
    Matrix single = multihead_attn(x, wq, wk, wv, Matrix::identity(d_head), cfg);
    AttnResult ref =
        attn_forward(matmul(x, wq[0]), matmul(x, wk[0]), matmul(x, wv[0]), cfg);
    CHECK(max_abs_diff(single, ref.O) == 0.0);

    // zero Wo -> zero output
    Matrix zeroed = multihead_attn(x, wq, wk, wv, Matrix(d_head, d_model), cfg);
    CHECK(max_abs(zeroed) == 0.0);

    // h=2 equals manual concatenation + matmul
    std::vector<Matrix> wq2 = {wq[0], rng_normal(rng, d_model, d_head)};
    std::vector<Matrix> wk2 = {wk[0], rng_normal(rng, d_model, d_head)};
    std::vector<Matrix> wv2 = {wv[0], rng_normal(rng, d_model, d_head)};
    Matrix wo = rng_normal(rng, 2 * d_head, d_model);
    Matrix out = multihead_attn(x, wq2, wk2, wv2, wo, cfg);

    Matrix concat(n, 2 * d_head);
    for (int head = 0; head < 2; ++head) {
        AttnResult r = attn_forward(matmul(x, wq2[head]), matmul(x, wk2[head]),
                                    matmul(x, wv2[head]), cfg);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d_head; ++j) concat.at(i, head * d_head + j) = r.O.at(i, j);
    }
    CHECK(max_abs_diff(out, matmul(concat, wo)) <= 1e-14);

    // wrong Wo shape and alibi head-count mismatch
    CHECK_THROWS_AS(multihead_attn(x, wq2, wk2, wv2, Matrix(d_head, d_model), cfg),
                    std::invalid_argument);
    AttnConfig bad = cfg;
    bad.pos_bias = PosBias::alibi(8);
    CHECK_THROWS_AS(multihead_attn(x, wq2, wk2, wv2, wo, bad), std::invalid_argument);
}
