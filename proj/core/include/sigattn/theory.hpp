#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sigattn/attn.hpp"
#include "sigattn/core.hpp"

namespace sigattn {

// Upper bound on the spectral norm of the Jacobian of
//   X  ->  sigmoid(X A X^T + b) X Wv,   A = (1/sqrt(d_qk)) Wq Wk^T.
// The suprema are taken over the logits realized by X (tight); the
// input-independent caps n and n/4 are reported alongside for context, and
// `scale` records the factor folded into the bilinear form.
struct LipschitzReport {
    double sigma_inf = 0.0;        // n * sup sigmoid(u + b) over realized logits u
    double sigma_prime_inf = 0.0;  // n * sup sigmoid'(u + b) over realized logits u
    double a_spec = 0.0;           // spectral norm of the scaled bilinear form A
    double mean_sq_norm = 0.0;     // (1/n) * sum of squared row norms of X
    double wv_spec = 0.0;          // spectral norm of Wv
    double bound = 0.0;  // wv_spec * (sigma_inf + 2*sigma_prime_inf*a_spec*mean_sq_norm)
    double sigma_inf_cap = 0.0;        // n
    double sigma_prime_inf_cap = 0.0;  // n / 4
    double scale = 0.0;                // 1/sqrt(d_qk)
};

// The unique b with sum_i sigmoid(z_i + b) == 1, found by bisection on
// [-log(n-1) - max(z), -log(n-1) - min(z)] driven down to machine width.
// Requires n >= 2 and tol > 0; the residual |phi(b) - 1| is within tol.
double solve_bias(const std::vector<double>& z, double tol = 1e-12);

LipschitzReport lipschitz_bound(const Matrix& Wq, const Matrix& Wk, const Matrix& Wv,
                                const Matrix& X, double b);

// Exact directional derivative at X, in direction Delta, of the map bounded
// by lipschitz_bound (same conventions, same folded scale).
Matrix attn_jacobian_apply(const Matrix& X, const Matrix& Delta, const Matrix& Wq,
                           const Matrix& Wk, const Matrix& Wv, double b);

// Spectral-norm estimate of that Jacobian. When the input space is small
// (rows*cols <= 64) the full matrix is assembled from basis directions and
// measured directly; otherwise power iteration runs on J^T J from a seeded
// random start. `method` (when non-null) receives "basis" or "power".
double empirical_jacobian_norm(const Matrix& X, const Matrix& Wq, const Matrix& Wk,
                               const Matrix& Wv, double b, int iters,
                               std::uint64_t seed = 0x5eed9acULL, std::string* method = nullptr);

// (sqrt(n) - sum(c)/sqrt(sum(c^2))) / (sqrt(n) - 1), in [0, 1].
// Requires n >= 2, entries >= 0, not all zero.
double hoyer_sparsity(const std::vector<double>& c);

// Forward floating-point operations per token per attention head.
// c = (n+1)/(2n) for causal attention, 1 otherwise; the causal counts are
// evaluated in algebraically reduced form so they are exact in doubles.
struct FlopCounts {
    double c = 1.0;
    long long c_num = 1, c_den = 1;  // c as an exact fraction
    double logit_flops = 0.0;        // 2 * c * n * d
    double activation_flops = 0.0;   // 3 * c * n (softmax) or 5 * c * n (sigmoid)
    double delta = 0.0;              // 1 / d
};
FlopCounts flop_count(int n_ctx, int d_head, bool causal, Activation activation);

// A sequence of n grid tokens in [0,1)^d with coordinates on the delta-lattice
// {0, delta, ..., 1-delta}, stored one token per column and ordered by the
// scalar index l = u^T x, u = [1, 1/delta, ..., (1/delta)^(d-1)].
// delta must be a negative power of two so every index
// and every value produced by the shift construction is an exact double.
struct GridSeq {
    double delta = 0.0;
    int d = 0;
    int n = 0;
    Matrix columns;  // d x n

    std::vector<double> indices() const;  // l per column, strictly increasing
    void validate() const;
};
GridSeq make_grid_seq(double delta, const Matrix& columns);

// Smallest admissible-c threshold (n-1) * (delta^-d - 1) * C(n-1, ceil((n-1)/2)).
double selective_shift_c_threshold(double delta, int d, int n);

// Sequentially applies the shift layers i = 0 .. delta^-d - 1, each a
// combination of four Heaviside-attention heads with coefficient c/2, to the
// scalarized indices; returns the shifted indices. c must be an integer
// exceeding the threshold so all arithmetic stays on the exact lattice.
std::vector<double> selective_shift_trace(const GridSeq& X, double c);

// The full map q(X): the shift layers followed by the global head that adds
// c^(n+1) times the largest shifted index to every entry.
std::vector<double> selective_shift_stack(const GridSeq& X, double c);

// Enumerates every ordered grid sequence for (delta, d, n), runs the stack,
// and verifies by exact comparison that q separates positions within a
// sequence and sequences from each other, plus the monotonicity and growth
// bounds of the shifted indices. An inadmissible c is reported, not thrown;
// an enumeration larger than 1e5 sequences is an error.
struct ContextualReport {
    bool precondition_ok = false;
    double c = 0.0;
    double c_threshold = 0.0;
    std::string note;  // reason when the precondition rejects
    long long sequences = 0;
    long long within_pairs = 0;
    long long cross_pairs = 0;
    bool within_distinct = false;
    bool cross_distinct = false;
    bool monotone_ok = false;  // shifted indices strictly increase, every sequence
    bool bounds_ok = false;    // growth bounds hold, every sequence
    double min_separation = 0.0;  // smallest gap between values required to differ
};
ContextualReport contextual_mapping_check(double delta, int d, int n, double c);

}  // namespace sigattn
