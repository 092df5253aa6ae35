#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "sigattn/attn.hpp"
#include "sigattn/core.hpp"
#include "sigattn/flash.hpp"

using namespace sigattn;

namespace {

struct Problem {
    Matrix Q, K, V, dO;
};

Problem make_problem(int n_q, int n_k, int d, int d_v, uint64_t seed) {
    Rng rng(seed);
    Problem p{rng_normal(rng, n_q, d), rng_normal(rng, n_k, d), rng_normal(rng, n_k, d_v),
              rng_normal(rng, n_q, d_v)};
    return p;
}

AttnConfig sigmoid_cfg() {
    AttnConfig cfg;
    cfg.activation = Activation::sigmoid;
    return cfg;
}

bool exactly_equal(const Matrix& a, const Matrix& b) {
    return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
}

}  // namespace

TEST_CASE("single-block tiling reproduces the reference forward exactly") {
    const Problem p = make_problem(7, 7, 3, 4, 0xf1a5401ULL);
    std::vector<AttnConfig> cfgs;
    {
        AttnConfig c = sigmoid_cfg();
        cfgs.push_back(c);
        c.bias = BiasSpec::neg_log_n();
        cfgs.push_back(c);
        c.causal = true;
        cfgs.push_back(c);
        c.bias = BiasSpec::constant(-1.5);
        c.pos_bias = PosBias::alibi(4, 2);
        cfgs.push_back(c);
        c.causal = false;
        cfgs.push_back(c);
        c.bias = BiasSpec::neg_log_rowlen();
        cfgs.push_back(c);
    }
    for (size_t ci = 0; ci < cfgs.size(); ++ci) {
        CAPTURE(ci);
        const AttnResult ref = attn_forward(p.Q, p.K, p.V, cfgs[ci]);
        const auto [O, mem] = flash_forward(p.Q, p.K, p.V, cfgs[ci], BlockSpec{16, 16});
        CHECK(exactly_equal(O, ref.O));
        CHECK(mem.blocks_processed == 1);
        CHECK(mem.blocks_skipped == 0);
        CHECK_FALSE(mem.n_sq_materialized);
    }
}

TEST_CASE("single-block tiling reproduces the reference backward exactly") {
    const Problem p = make_problem(6, 6, 4, 3, 0xf1a5402ULL);
    for (const bool causal : {false, true}) {
        CAPTURE(causal);
        AttnConfig cfg = sigmoid_cfg();
        cfg.causal = causal;
        cfg.bias = BiasSpec::learnable(-0.75);
        cfg.pos_bias = PosBias::alibi(2, 1);

        double db_ref = 0.0, db_flash = 0.0;
        const GradTriple ref = attn_backward_ex(p.Q, p.K, p.V, p.dO, cfg, &db_ref);
        const auto [g, mem] =
            flash_backward(p.Q, p.K, p.V, p.dO, cfg, BlockSpec{8, 8}, nullptr, 1, &db_flash);
        CHECK(exactly_equal(g.dQ, ref.dQ));
        CHECK(exactly_equal(g.dK, ref.dK));
        CHECK(exactly_equal(g.dV, ref.dV));
        CHECK(db_flash == db_ref);
        CHECK(mem.blocks_processed == 1);
    }
}

TEST_CASE("forward matches the reference across the block-size grid") {
    const int n = 130, d = 16;
    const std::vector<int> sizes{1, 3, 32, 64, n, n + 7};

    AttnConfig plain = sigmoid_cfg();
    plain.bias = BiasSpec::neg_log_n();
    plain.pos_bias = PosBias::alibi(2, 1);

    AttnConfig caus = sigmoid_cfg();
    caus.bias = BiasSpec::constant(-2.0);
    caus.causal = true;

    const Problem rect = make_problem(n, n, d, d, 0x9a1dULL);
    for (const AttnConfig& cfg : {plain, caus}) {
        const AttnResult ref = attn_forward(rect.Q, rect.K, rect.V, cfg);
        for (int br : sizes) {
            for (int bc : sizes) {
                CAPTURE(br);
                CAPTURE(bc);
                CAPTURE(cfg.causal);
                const auto [O, mem] = flash_forward(rect.Q, rect.K, rect.V, cfg, BlockSpec{br, bc});
                CHECK(max_abs_diff(O, ref.O) <= 1e-10);
                CHECK_FALSE(mem.n_sq_materialized);
            }
        }
    }
}

TEST_CASE("forward handles rectangular shapes and the documented sizes") {
    {
        // queries and keys of different lengths, value width different again
        const Problem p = make_problem(37, 61, 5, 3, 0x3ec7a1ULL);
        AttnConfig cfg = sigmoid_cfg();
        cfg.bias = BiasSpec::neg_log_n();
        const AttnResult ref = attn_forward(p.Q, p.K, p.V, cfg);
        const auto [O, mem] = flash_forward(p.Q, p.K, p.V, cfg, BlockSpec{16, 32});
        CHECK(max_abs_diff(O, ref.O) <= 1e-10);
        CHECK(mem.pairs_visited == 37LL * 61);
    }
    {
        // odd length that leaves ragged edge blocks at the default block shape
        const Problem p = make_problem(257, 257, 32, 32, 0x257257ULL);
        AttnConfig cfg = sigmoid_cfg();
        cfg.bias = BiasSpec::neg_log_n();
        const AttnResult ref = attn_forward(p.Q, p.K, p.V, cfg);
        for (const BlockSpec bs : {BlockSpec{}, kAltBlocks}) {
            const auto [O, mem] = flash_forward(p.Q, p.K, p.V, cfg, bs);
            CHECK(max_abs_diff(O, ref.O) <= 1e-10);
            CHECK_FALSE(mem.n_sq_materialized);
        }
    }
}

TEST_CASE("backward matches the reference across block sizes") {
    const int n = 130, d = 16;
    const Problem p = make_problem(n, n, d, d, 0xbac4a2dULL);

    AttnConfig cfg = sigmoid_cfg();
    cfg.bias = BiasSpec::learnable(0.25);
    cfg.pos_bias = PosBias::alibi(3, 0);

    double db_ref = 0.0;
    const GradTriple ref = attn_backward_ex(p.Q, p.K, p.V, p.dO, cfg, &db_ref);

    SUBCASE("documented 32x64 tiling") {
        double db = 0.0;
        const auto [g, mem] =
            flash_backward(p.Q, p.K, p.V, p.dO, cfg, BlockSpec{32, 64}, nullptr, 1, &db);
        CHECK(max_abs_diff(g.dQ, ref.dQ) <= 1e-10);
        CHECK(max_abs_diff(g.dK, ref.dK) <= 1e-10);
        CHECK(max_abs_diff(g.dV, ref.dV) <= 1e-10);
        CHECK(std::abs(db - db_ref) <= 1e-10 * std::max(1.0, std::abs(db_ref)));
        CHECK(mem.pairs_visited == static_cast<long long>(n) * n);
    }

    SUBCASE("grid of tilings") {
        for (int br : {1, 32, 64, n + 7}) {
            for (int bc : {3, 64, n}) {
                CAPTURE(br);
                CAPTURE(bc);
                const auto [g, mem] = flash_backward(p.Q, p.K, p.V, p.dO, cfg, BlockSpec{br, bc});
                CHECK(max_abs_diff(g.dQ, ref.dQ) <= 1e-10);
                CHECK(max_abs_diff(g.dK, ref.dK) <= 1e-10);
                CHECK(max_abs_diff(g.dV, ref.dV) <= 1e-10);
            }
        }
    }

    SUBCASE("causal 4x4 tiling at n=16") {
        const Problem sq = make_problem(16, 16, 16, 16, 0xca5a11ULL);
        AttnConfig ccfg = sigmoid_cfg();
        ccfg.causal = true;
        ccfg.bias = BiasSpec::neg_log_rowlen();
        const GradTriple cref = attn_backward(sq.Q, sq.K, sq.V, sq.dO, ccfg);
        const auto [g, mem] = flash_backward(sq.Q, sq.K, sq.V, sq.dO, ccfg, BlockSpec{4, 4});
        CHECK(max_abs_diff(g.dQ, cref.dQ) <= 1e-10);
        CHECK(max_abs_diff(g.dK, cref.dK) <= 1e-10);
        CHECK(max_abs_diff(g.dV, cref.dV) <= 1e-10);
        CHECK(mem.pairs_visited == 16LL * 17 / 2);
    }
}

TEST_CASE("causal tiling skips fully masked blocks without touching them") {
    const int n = 16;
    const Problem p = make_problem(n, n, 8, 8, 0x5c1bULL);
    AttnConfig cfg = sigmoid_cfg();
    cfg.causal = true;

    const auto [O, mem] = flash_forward(p.Q, p.K, p.V, cfg, BlockSpec{4, 4});
    // 4x4 block grid: tiles strictly above the diagonal never contribute.
    CHECK(mem.blocks_skipped == 6);
    CHECK(mem.blocks_processed == 10);
    // Every evaluated logit lies on or below the diagonal.
    CHECK(mem.pairs_visited == static_cast<long long>(n) * (n + 1) / 2);

    const AttnResult ref = attn_forward(p.Q, p.K, p.V, cfg);
    CHECK(max_abs_diff(O, ref.O) <= 1e-10);

    const auto [g, bmem] = flash_backward(p.Q, p.K, p.V, p.dO, cfg, BlockSpec{4, 4});
    CHECK(bmem.blocks_skipped == 6);
    CHECK(bmem.blocks_processed == 10);
    CHECK(bmem.pairs_visited == static_cast<long long>(n) * (n + 1) / 2);

    // Ragged tiling: the counters still cover exactly the lower triangle.
    const auto [O2, mem2] = flash_forward(p.Q, p.K, p.V, cfg, BlockSpec{5, 3});
    CHECK(mem2.pairs_visited == static_cast<long long>(n) * (n + 1) / 2);
    CHECK(mem2.blocks_processed + mem2.blocks_skipped == 4LL * 6);
    CHECK(max_abs_diff(O2, ref.O) <= 1e-10);
}

TEST_CASE("block schedule permutations do not change the results") {
    const int n = 97, d = 8;
    const Problem p = make_problem(n, n, d, d, 0x0bde4ULL);
    AttnConfig cfg = sigmoid_cfg();
    cfg.bias = BiasSpec::neg_log_n();
    const BlockSpec bs{16, 32};

    const int n_ib = (n + bs.b_r - 1) / bs.b_r;  // 7 query blocks
    const int n_jb = (n + bs.b_c - 1) / bs.b_c;  // 4 key blocks

    const auto [O_ref, mem_ref] = flash_forward(p.Q, p.K, p.V, cfg, bs);
    std::vector<int> rev_i(n_ib);
    for (int i = 0; i < n_ib; ++i) rev_i[i] = n_ib - 1 - i;
    const std::vector<int> shuffled_i{3, 0, 6, 2, 5, 1, 4};
    for (const std::vector<int>& ord : {rev_i, shuffled_i}) {
        const auto [O, mem] = flash_forward(p.Q, p.K, p.V, cfg, bs, &ord);
        CHECK(max_abs_diff(O, O_ref) <= 1e-12);
        CHECK(mem.pairs_visited == mem_ref.pairs_visited);
    }

    double db_ref = 0.0;
    const auto [g_ref, bmem_ref] =
        flash_backward(p.Q, p.K, p.V, p.dO, cfg, bs, nullptr, 1, &db_ref);
    std::vector<int> rev_j(n_jb);
    for (int j = 0; j < n_jb; ++j) rev_j[j] = n_jb - 1 - j;
    const std::vector<int> shuffled_j{2, 0, 3, 1};
    for (const std::vector<int>& ord : {rev_j, shuffled_j}) {
        double db = 0.0;
        const auto [g, mem] = flash_backward(p.Q, p.K, p.V, p.dO, cfg, bs, &ord, 1, &db);
        CHECK(max_abs_diff(g.dQ, g_ref.dQ) <= 1e-12);
        // each key block is finished within one outer iteration, so dK and dV
        // are insensitive to the outer order
        CHECK(exactly_equal(g.dK, g_ref.dK));
        CHECK(exactly_equal(g.dV, g_ref.dV));
        CHECK(std::abs(db - db_ref) <= 1e-12 * std::max(1.0, std::abs(db_ref)));
    }

    SUBCASE("malformed schedules are rejected") {
        const std::vector<int> short_order{0, 1};
        CHECK_THROWS_AS(flash_forward(p.Q, p.K, p.V, cfg, bs, &short_order),
                        std::invalid_argument);
        const std::vector<int> oob{0, 1, 2, 3, 4, 5, 7};
        CHECK_THROWS_AS(flash_forward(p.Q, p.K, p.V, cfg, bs, &oob), std::invalid_argument);
        const std::vector<int> dup{0, 1, 2, 3, 4, 5, 5};
        CHECK_THROWS_AS(flash_forward(p.Q, p.K, p.V, cfg, bs, &dup), std::invalid_argument);
        const std::vector<int> bad_j{0, 0, 1, 2};
        CHECK_THROWS_AS(flash_backward(p.Q, p.K, p.V, p.dO, cfg, bs, &bad_j),
                        std::invalid_argument);
    }
}

TEST_CASE("auxiliary memory is block-bounded and independent of sequence length") {
    AttnConfig cfg = sigmoid_cfg();
    const BlockSpec bs{32, 32};
    const int d = 8;

    long long aux_small = 0, aux_large = 0;
    {
        const Problem p = make_problem(64, 64, d, d, 0xa0c1ULL);
        const auto [O, mem] = flash_forward(p.Q, p.K, p.V, cfg, bs);
        aux_small = mem.aux_floats;
        CHECK(aux_small == 32LL * 32);
        const auto [g, bmem] = flash_backward(p.Q, p.K, p.V, p.dO, cfg, bs);
        CHECK(bmem.aux_floats == 2LL * 32 * 32);
        CHECK(bmem.aux_floats <= 4LL * (bs.b_r * bs.b_c + bs.b_r * d + bs.b_c * d));
    }
    {
        const Problem p = make_problem(256, 256, d, d, 0xa0c2ULL);
        const auto [O, mem] = flash_forward(p.Q, p.K, p.V, cfg, bs);
        aux_large = mem.aux_floats;
    }
    CHECK(aux_small == aux_large);

    // blocks wider than the problem only pay for the clipped tile
    const Problem tiny = make_problem(5, 5, d, d, 0xa0c3ULL);
    const auto [O, mem] = flash_forward(tiny.Q, tiny.K, tiny.V, cfg, BlockSpec{128, 128});
    CHECK(mem.aux_floats == 25);
}

TEST_CASE("worker threads do not change the forward result") {
    const int n = 130, d = 8;
    const Problem p = make_problem(n, n, d, d, 0x7a1edULL);
    AttnConfig cfg = sigmoid_cfg();
    cfg.bias = BiasSpec::neg_log_n();
    cfg.causal = true;
    const BlockSpec bs{16, 16};

    const auto [O1, mem1] = flash_forward(p.Q, p.K, p.V, cfg, bs, nullptr, 1);
    const auto [O4, mem4] = flash_forward(p.Q, p.K, p.V, cfg, bs, nullptr, 4);
    CHECK(exactly_equal(O1, O4));
    CHECK(mem1.pairs_visited == mem4.pairs_visited);
    CHECK(mem1.blocks_processed == mem4.blocks_processed);
    // each worker owns one tile buffer
    CHECK(mem4.aux_floats == 4 * mem1.aux_floats);

    // more workers than query blocks are clipped
    const auto [O99, mem99] = flash_forward(p.Q, p.K, p.V, cfg, bs, nullptr, 99);
    CHECK(exactly_equal(O1, O99));
    const int n_ib = (n + bs.b_r - 1) / bs.b_r;
    CHECK(mem99.aux_floats == static_cast<long long>(n_ib) * bs.b_r * bs.b_c);
}

TEST_CASE("unsupported configurations are rejected") {
    const Problem p = make_problem(8, 8, 4, 4, 0xbadcf6ULL);
    const BlockSpec bs{4, 4};

    AttnConfig softmax_cfg;  // default activation
    CHECK_THROWS_AS(flash_forward(p.Q, p.K, p.V, softmax_cfg, bs), std::invalid_argument);

    AttnConfig relu_cfg = sigmoid_cfg();
    relu_cfg.activation = Activation::relu;
    CHECK_THROWS_AS(flash_forward(p.Q, p.K, p.V, relu_cfg, bs), std::invalid_argument);

    AttnConfig alpha_cfg = sigmoid_cfg();
    alpha_cfg.alpha = 0.5;
    CHECK_THROWS_AS(flash_forward(p.Q, p.K, p.V, alpha_cfg, bs), std::invalid_argument);
    CHECK_THROWS_AS(flash_backward(p.Q, p.K, p.V, p.dO, alpha_cfg, bs), std::invalid_argument);

    AttnConfig norm_cfg = sigmoid_cfg();
    norm_cfg.qk_norm = true;
    CHECK_THROWS_AS(flash_forward(p.Q, p.K, p.V, norm_cfg, bs), std::invalid_argument);

    const AttnConfig ok = sigmoid_cfg();
    CHECK_THROWS_AS(flash_forward(p.Q, p.K, p.V, ok, BlockSpec{0, 4}), std::invalid_argument);
    CHECK_THROWS_AS(flash_forward(p.Q, p.K, p.V, ok, BlockSpec{4, -1}), std::invalid_argument);
    CHECK_THROWS_AS(flash_forward(p.Q, p.K, p.V, ok, bs, nullptr, 0), std::invalid_argument);

    AttnConfig causal_cfg = sigmoid_cfg();
    causal_cfg.causal = true;
    const Problem rect = make_problem(6, 8, 4, 4, 0xbadcf9ULL);
    CHECK_THROWS_AS(flash_forward(rect.Q, rect.K, rect.V, causal_cfg, bs),
                    std::invalid_argument);

    const Matrix bad_dO(3, 4);
    CHECK_THROWS_AS(flash_backward(p.Q, p.K, p.V, bad_dO, ok, bs), std::invalid_argument);
}

TEST_CASE("overflowing logits surface as a domain error") {
    Matrix Q(2, 2, {1e300, 1e300, 1e300, 1e300});
    Matrix K(2, 2, {1e300, 1e300, 1e300, 1e300});
    Matrix V(2, 2, {1.0, 0.0, 0.0, 1.0});
    const AttnConfig cfg = sigmoid_cfg();
    CHECK_THROWS_AS(flash_forward(Q, K, V, cfg, BlockSpec{2, 2}), std::domain_error);
    CHECK_THROWS_AS(flash_backward(Q, K, V, V, cfg, BlockSpec{2, 2}), std::domain_error);
}

TEST_CASE("zero output gradient produces zero input gradients") {
    const Problem p = make_problem(9, 9, 4, 4, 0x0d00ULL);
    AttnConfig cfg = sigmoid_cfg();
    cfg.bias = BiasSpec::learnable(-1.0);
    const Matrix zero(9, 4);
    double db = 0.0;
    const auto [g, mem] = flash_backward(p.Q, p.K, p.V, zero, cfg, BlockSpec{4, 4}, nullptr, 1, &db);
    CHECK(max_abs(g.dQ) == 0.0);
    CHECK(max_abs(g.dK) == 0.0);
    CHECK(max_abs(g.dV) == 0.0);
    CHECK(db == 0.0);
}

TEST_CASE("kernel benchmark reports both paths with medians and samples") {
    const BenchReport rep = kernel_bench(32, 8, BlockSpec{16, 16}, 5);
    REQUIRE(rep.cells.size() == 4);
    CHECK(rep.cells[0].path == "naive_forward");
    CHECK(rep.cells[1].path == "naive_backward");
    CHECK(rep.cells[2].path == "flash_forward");
    CHECK(rep.cells[3].path == "flash_backward");
    for (const BenchCell& cell : rep.cells) {
        CAPTURE(cell.path);
        CHECK_FALSE(cell.skipped);
        CHECK(cell.samples_ns.size() == 5);
        CHECK(cell.median_ns > 0.0);
        for (double s : cell.samples_ns) CHECK(s > 0.0);
    }
    CHECK(rep.cells[0].aux_floats == 32LL * 32);
    CHECK(rep.cells[2].aux_floats == 16LL * 16);
    CHECK(rep.cells[3].aux_floats == 2LL * 16 * 16);
    CHECK(rep.cells[2].b_r == 16);
    CHECK(rep.cells[0].b_r == 0);

    // the median lies within the sampled range
    for (const BenchCell& cell : rep.cells) {
        const auto [lo, hi] =
            std::minmax_element(cell.samples_ns.begin(), cell.samples_ns.end());
        CHECK(cell.median_ns >= *lo);
        CHECK(cell.median_ns <= *hi);
    }
}

TEST_CASE("kernel benchmark skips the quadratic path above the threshold") {
    const BenchReport rep = kernel_bench(40, 4, BlockSpec{16, 16}, 3, /*naive_threshold=*/16);
    REQUIRE(rep.cells.size() == 4);
    CHECK(rep.cells[0].skipped);
    CHECK(rep.cells[1].skipped);
    CHECK(rep.cells[0].samples_ns.empty());
    CHECK(rep.cells[0].aux_floats == 40LL * 40);  // projected quadratic cost
    CHECK_FALSE(rep.cells[2].skipped);
    CHECK(rep.cells[2].samples_ns.size() == 3);

    CHECK_THROWS_AS(kernel_bench(8, 4, BlockSpec{4, 4}, 2), std::invalid_argument);
    CHECK_THROWS_AS(kernel_bench(0, 4, BlockSpec{4, 4}, 3), std::invalid_argument);
}
