#include "sigattn/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace sigattn {

namespace {

constexpr double kExactInt = 9007199254740992.0;  // 2^53; integers below are exact

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

double sigmoid_prime(double p) { return p * (1.0 - p); }

bool is_neg_pow2(double delta) {
    if (!(delta > 0.0) || !(delta < 1.0)) return false;
    int exp = 0;
    return std::frexp(delta, &exp) == 0.5;
}

// Integer power with exactness guard: every partial product must stay below
// 2^53 or the lattice arithmetic downstream stops being exact.
double ipow_exact(double base, int e, const char* what) {
    double r = 1.0;
    for (int i = 0; i < e; ++i) {
        r *= base;
        if (!(r < kExactInt))
            throw std::domain_error(std::string(what) + ": power exceeds the exact integer range");
    }
    return r;
}

// C(m, k) by the multiplicative rule; every prefix is itself a binomial
// coefficient, so the divisions are exact while the values stay below 2^53.
double binom(int m, int k) {
    if (k < 0 || k > m) return 0.0;
    k = std::min(k, m - k);
    double r = 1.0;
    for (int i = 1; i <= k; ++i) {
        r = r * (m - k + i) / i;
        if (!(r < kExactInt))
            throw std::domain_error("binom: value exceeds the exact integer range");
    }
    return r;
}

// H(a*b) with the half convention at zero, decided purely by signs so a
// rounded product can never misclassify the boundary.
double heaviside_of_product(double a, double b) {
    const int sa = (a > 0.0) - (a < 0.0);
    const int sb = (b > 0.0) - (b < 0.0);
    const int s = sa * sb;
    if (s > 0) return 1.0;
    if (s < 0) return 0.0;
    return 0.5;
}

// One Heaviside-attention head on the scalarized indices:
// psi_j(b_q, b_k) = sum_k w_k * H((w_k - b_q)(w_j - b_k)).
double psi_head(const std::vector<double>& w, size_t j, double b_q, double b_k) {
    double s = 0.0;
    for (double wk : w) s += wk * heaviside_of_product(wk - b_q, w[j] - b_k);
    return s;
}

void check_lattice_range(double value, double delta, const char* what) {
    if (!(std::abs(value) / delta < kExactInt))
        throw std::domain_error(std::string(what) +
                                ": values left the exactly representable lattice range");
}

// q_j = w_j + c^(n+1) * psi_j((c^n + 1/2)*delta, 0). Only the largest index
// exceeds the query threshold, so every position gains c^(n+1) * w_max.
std::vector<double> global_shift(const std::vector<double>& w, double c, double delta) {
    const int n = static_cast<int>(w.size());
    const double cn = ipow_exact(c, n, "selective_shift");
    const double cn1 = ipow_exact(c, n + 1, "selective_shift");
    const double b_q = (cn + 0.5) * delta;
    std::vector<double> q(w.size());
    for (size_t j = 0; j < w.size(); ++j) {
        q[j] = w[j] + cn1 * psi_head(w, j, b_q, 0.0);
        check_lattice_range(q[j], delta, "selective_shift");
    }
    return q;
}

struct JacContext {
    Matrix A;    // scaled bilinear form
    Matrix P;    // sigmoid(X A X^T + b)
    Matrix M;    // elementwise sigmoid'
    Matrix XWv;  // X * Wv
};

void check_jacobian_shapes(const Matrix& X, const Matrix& Wq, const Matrix& Wk,
                           const Matrix& Wv, double b) {
    require(X.rows >= 1 && X.cols >= 1, "jacobian: X must be non-empty");
    require(Wq.rows == X.cols && Wk.rows == X.cols && Wv.rows == X.cols,
            "jacobian: projection rows must match the X feature dimension");
    require(Wq.cols == Wk.cols && Wq.cols >= 1, "jacobian: Q/K projection widths disagree");
    require(Wv.cols >= 1, "jacobian: Wv must be non-empty");
    if (!std::isfinite(b)) throw std::invalid_argument("jacobian: b must be finite");
}

JacContext make_jac_context(const Matrix& X, const Matrix& Wq, const Matrix& Wk,
                            const Matrix& Wv, double b) {
    JacContext ctx;
    const double scl = 1.0 / std::sqrt(static_cast<double>(Wq.cols));
    ctx.A = scaled(matmul(Wq, transpose(Wk)), scl);
    const Matrix S = matmul(matmul(X, ctx.A), transpose(X));
    ctx.P = Matrix(S.rows, S.cols);
    ctx.M = Matrix(S.rows, S.cols);
    for (size_t e = 0; e < S.data.size(); ++e) {
        const double p = sigmoid_via_tanh(S.data[e] + b);
        ctx.P.data[e] = p;
        ctx.M.data[e] = sigmoid_prime(p);
    }
    ctx.XWv = matmul(X, Wv);
    return ctx;
}

Matrix jac_apply(const JacContext& ctx, const Matrix& X, const Matrix& Wv,
                 const Matrix& Delta) {
    const Matrix dS =
        add(matmul(matmul(Delta, ctx.A), transpose(X)), matmul(matmul(X, ctx.A), transpose(Delta)));
    const Matrix dP = hadamard(ctx.M, dS);
    return add(matmul(dP, ctx.XWv), matmul(ctx.P, matmul(Delta, Wv)));
}

// Adjoint of jac_apply under the Frobenius inner product:
// J^T Y = (M.(Y W^T)) X A^T + (M.(Y W^T))^T X A + P^T Y Wv^T,  W = X Wv.
Matrix jac_adjoint(const JacContext& ctx, const Matrix& X, const Matrix& Wv, const Matrix& Y) {
    const Matrix G = hadamard(ctx.M, matmul(Y, transpose(ctx.XWv)));
    Matrix out = matmul(matmul(G, X), transpose(ctx.A));
    out = add(out, matmul(matmul(transpose(G), X), ctx.A));
    return add(out, matmul(matmul(transpose(ctx.P), Y), transpose(Wv)));
}

double frob(const Matrix& m) { return frobenius_norm(m); }

}  // namespace

double solve_bias(const std::vector<double>& z, double tol) {
    const size_t n = z.size();
    require(n >= 2, "solve_bias: need at least two logits");
    require(tol > 0.0, "solve_bias: tol must be > 0");
    for (double v : z)
        if (!std::isfinite(v)) throw std::domain_error("solve_bias: non-finite logit");

    const auto phi = [&z](double b) {
        double s = 0.0;
        for (double v : z) s += sigmoid_via_tanh(v + b);
        return s;
    };

    const auto [mn, mx] = std::minmax_element(z.begin(), z.end());
    const double base = -std::log(static_cast<double>(n) - 1.0);
    double lo = base - *mx;
    double hi = base - *mn;
    // phi is strictly increasing in b and brackets 1 on [lo, hi]; bisect until
    // the bracket stops shrinking, which leaves the residual far inside tol.
    for (int it = 0; it < 200 && lo < hi; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi) break;
        if (phi(mid) < 1.0)
            lo = mid;
        else
            hi = mid;
    }
    return 0.5 * (lo + hi);
}

LipschitzReport lipschitz_bound(const Matrix& Wq, const Matrix& Wk, const Matrix& Wv,
                                const Matrix& X, double b) {
    check_jacobian_shapes(X, Wq, Wk, Wv, b);
    const int n = X.rows;
    const double scl = 1.0 / std::sqrt(static_cast<double>(Wq.cols));

    LipschitzReport rep;
    rep.scale = scl;
    const Matrix A = scaled(matmul(Wq, transpose(Wk)), scl);
    const Matrix S = matmul(matmul(X, A), transpose(X));

    double sup_s = 0.0, sup_sp = 0.0;
    for (double u : S.data) {
        const double p = sigmoid_via_tanh(u + b);
        sup_s = std::max(sup_s, p);
        sup_sp = std::max(sup_sp, sigmoid_prime(p));
    }
    rep.sigma_inf = n * sup_s;
    rep.sigma_prime_inf = n * sup_sp;
    rep.sigma_inf_cap = static_cast<double>(n);
    rep.sigma_prime_inf_cap = n / 4.0;

    rep.a_spec = spectral_norm(A);
    double ssq = 0.0;
    for (double v : X.data) ssq += v * v;
    rep.mean_sq_norm = ssq / n;
    rep.wv_spec = spectral_norm(Wv);
    rep.bound = rep.wv_spec * (rep.sigma_inf + 2.0 * rep.sigma_prime_inf * rep.a_spec * rep.mean_sq_norm);
    return rep;
}

Matrix attn_jacobian_apply(const Matrix& X, const Matrix& Delta, const Matrix& Wq,
                           const Matrix& Wk, const Matrix& Wv, double b) {
    check_jacobian_shapes(X, Wq, Wk, Wv, b);
    require(Delta.same_shape(X), "attn_jacobian_apply: Delta must match the shape of X");
    const JacContext ctx = make_jac_context(X, Wq, Wk, Wv, b);
    return jac_apply(ctx, X, Wv, Delta);
}

double empirical_jacobian_norm(const Matrix& X, const Matrix& Wq, const Matrix& Wk,
                               const Matrix& Wv, double b, int iters, std::uint64_t seed,
                               std::string* method) {
    check_jacobian_shapes(X, Wq, Wk, Wv, b);
    require(iters >= 10, "empirical_jacobian_norm: iters must be >= 10");
    const int n = X.rows, d = X.cols, d_v = Wv.cols;
    const JacContext ctx = make_jac_context(X, Wq, Wk, Wv, b);

    if (n * d <= 64) {
        if (method) *method = "basis";
        Matrix J(n * d_v, n * d);
        Matrix basis(n, d);
        for (int r = 0; r < n; ++r) {
            for (int c = 0; c < d; ++c) {
                basis.at(r, c) = 1.0;
                const Matrix col = jac_apply(ctx, X, Wv, basis);
                basis.at(r, c) = 0.0;
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < d_v; ++j) J.at(i * d_v + j, r * d + c) = col.at(i, j);
            }
        }
        return spectral_norm(J, iters);
    }

    if (method) *method = "power";
    Rng rng(seed);
    Matrix v = rng_normal(rng, n, d);
    const double nv0 = frob(v);
    if (nv0 == 0.0) return 0.0;
    for (double& e : v.data) e /= nv0;
    for (int it = 0; it < iters; ++it) {
        const Matrix w = jac_apply(ctx, X, Wv, v);
        const Matrix z = jac_adjoint(ctx, X, Wv, w);
        const double nz = frob(z);
        if (nz == 0.0) return 0.0;  // v landed in the null space; norm is 0 only if J is 0
        v = scaled(z, 1.0 / nz);
    }
    return frob(jac_apply(ctx, X, Wv, v));
}

double hoyer_sparsity(const std::vector<double>& c) {
    const size_t n = c.size();
    require(n >= 2, "hoyer_sparsity: need at least two entries");
    double sum = 0.0, ssq = 0.0;
    for (double v : c) {
        require(v >= 0.0 && std::isfinite(v), "hoyer_sparsity: entries must be finite and >= 0");
        sum += v;
        ssq += v * v;
    }
    if (ssq == 0.0) throw std::invalid_argument("hoyer_sparsity: all entries are zero");
    const double rn = std::sqrt(static_cast<double>(n));
    return (rn - sum / std::sqrt(ssq)) / (rn - 1.0);
}

FlopCounts flop_count(int n_ctx, int d_head, bool causal, Activation activation) {
    require(n_ctx >= 1 && d_head >= 1, "flop_count: n_ctx and d_head must be >= 1");
    require(activation == Activation::softmax || activation == Activation::sigmoid,
            "flop_count: accounting is defined for softmax and sigmoid only");
    FlopCounts rec;
    rec.delta = 1.0 / d_head;
    const double n = static_cast<double>(n_ctx);
    if (causal) {
        rec.c_num = static_cast<long long>(n_ctx) + 1;
        rec.c_den = 2LL * n_ctx;
        rec.c = static_cast<double>(rec.c_num) / static_cast<double>(rec.c_den);
        // 2*c*n*d = d*(n+1) and (3 or 5)*c*n = 1.5 or 2.5 times (n+1): evaluate
        // the reduced forms so the counts are exact doubles.
        rec.logit_flops = static_cast<double>(d_head) * (n + 1.0);
        rec.activation_flops =
            (activation == Activation::softmax ? 1.5 : 2.5) * (n + 1.0);
    } else {
        rec.c_num = 1;
        rec.c_den = 1;
        rec.c = 1.0;
        rec.logit_flops = 2.0 * n * d_head;
        rec.activation_flops = (activation == Activation::softmax ? 3.0 : 5.0) * n;
    }
    return rec;
}

std::vector<double> GridSeq::indices() const {
    std::vector<double> l(static_cast<size_t>(n), 0.0);
    const double B = 1.0 / delta;
    for (int j = 0; j < n; ++j) {
        double u = 1.0;
        double acc = 0.0;
        for (int r = 0; r < d; ++r) {
            acc += u * columns.at(r, j);
            u *= B;
        }
        l[static_cast<size_t>(j)] = acc;
    }
    return l;
}

void GridSeq::validate() const {
    require(is_neg_pow2(delta), "GridSeq: delta must be a negative power of two in (0,1)");
    require(d >= 1 && n >= 1, "GridSeq: d and n must be >= 1");
    require(columns.rows == d && columns.cols == n, "GridSeq: columns must be d x n");
    const double B = 1.0 / delta;
    for (int r = 0; r < d; ++r) {
        for (int j = 0; j < n; ++j) {
            const double m = columns.at(r, j) / delta;
            require(m == std::floor(m) && m >= 0.0 && m < B,
                    "GridSeq: coordinates must lie on {0, delta, ..., 1-delta}");
        }
    }
    const std::vector<double> l = indices();
    for (size_t j = 1; j < l.size(); ++j)
        require(l[j] > l[j - 1], "GridSeq: column indices must be strictly increasing");
}

GridSeq make_grid_seq(double delta, const Matrix& columns) {
    GridSeq g;
    g.delta = delta;
    g.d = columns.rows;
    g.n = columns.cols;
    g.columns = columns;
    g.validate();
    return g;
}

double selective_shift_c_threshold(double delta, int d, int n) {
    require(is_neg_pow2(delta), "selective_shift: delta must be a negative power of two in (0,1)");
    require(d >= 1 && n >= 1, "selective_shift: d and n must be >= 1");
    const double g = ipow_exact(1.0 / delta, d, "selective_shift");
    return (n - 1.0) * (g - 1.0) * binom(n - 1, n / 2);
}

std::vector<double> selective_shift_trace(const GridSeq& X, double c) {
    X.validate();
    require(c == std::floor(c) && c >= 1.0 && c < kExactInt,
            "selective_shift: c must be a positive integer");
    require(c > selective_shift_c_threshold(X.delta, X.d, X.n),
            "selective_shift: c must exceed the separation threshold");
    const double layers = ipow_exact(1.0 / X.delta, X.d, "selective_shift");
    require(layers <= 16777216.0, "selective_shift: grid too fine to sweep");

    std::vector<double> w = X.indices();
    const size_t n = w.size();
    std::vector<double> t(n, 0.0);
    const double half_c = 0.5 * c;
    for (double i = 0.0; i < layers; i += 1.0) {
        const double below = (i - 0.5) * X.delta;
        const double above = (i + 0.5) * X.delta;
        for (size_t j = 0; j < n; ++j) {
            const double t1 = psi_head(w, j, 0.0, below);
            const double t2 = psi_head(w, j, 0.0, above);
            const double t3 = psi_head(w, j, above, above);
            const double t4 = psi_head(w, j, above, below);
            t[j] = t1 - t2 - t3 + t4;
        }
        for (size_t j = 0; j < n; ++j) {
            w[j] += half_c * t[j];
            check_lattice_range(w[j], X.delta, "selective_shift");
        }
    }
    return w;
}

std::vector<double> selective_shift_stack(const GridSeq& X, double c) {
    return global_shift(selective_shift_trace(X, c), c, X.delta);
}

ContextualReport contextual_mapping_check(double delta, int d, int n, double c) {
    require(is_neg_pow2(delta), "contextual_mapping_check: delta must be a negative power of two");
    require(d >= 1 && n >= 1, "contextual_mapping_check: d and n must be >= 1");
    const double g = ipow_exact(1.0 / delta, d, "contextual_mapping_check");
    require(g >= n, "contextual_mapping_check: n exceeds the number of grid points");

    // enumeration budget: C(g, n) sequences
    {
        double count = 1.0;
        for (int i = 1; i <= n; ++i) {
            count = count * (g - n + i) / i;
            if (count > 1e5)
                throw std::invalid_argument("contextual_mapping_check: enumeration budget exceeded");
        }
    }

    ContextualReport rep;
    rep.c = c;
    rep.c_threshold = selective_shift_c_threshold(delta, d, n);
    if (c != std::floor(c) || c < 1.0 || !(c < kExactInt)) {
        rep.note = "c must be a positive integer";
        return rep;
    }
    if (!(c > rep.c_threshold)) {
        rep.note = "c does not exceed the separation threshold";
        return rep;
    }
    rep.precondition_ok = true;

    const long long G = static_cast<long long>(g);
    const long long B = static_cast<long long>(1.0 / delta);

    struct Entry {
        double value;
        long long seq;
    };
    std::vector<Entry> entries;
    bool monotone_ok = true, bounds_ok = true;
    const double cn_delta = ipow_exact(c, n, "contextual_mapping_check") * delta;

    std::vector<long long> combo(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j) combo[static_cast<size_t>(j)] = j;
    Matrix columns(d, n);
    while (true) {
        for (int j = 0; j < n; ++j) {
            long long rem = combo[static_cast<size_t>(j)];
            for (int r = 0; r < d; ++r) {
                columns.at(r, j) = static_cast<double>(rem % B) * delta;
                rem /= B;
            }
        }
        const GridSeq X = make_grid_seq(delta, columns);
        const std::vector<double> lt = selective_shift_trace(X, c);
        for (size_t j = 1; j < lt.size(); ++j)
            if (!(lt[j] > lt[j - 1])) monotone_ok = false;
        // growth bounds on the shifted indices (1-indexed position p):
        //   c^p*delta < lt_p < c^(p+1)*delta for 1 < p < n;
        //   lt_p <= c^n*delta for p < n;  lt_n > c^n*delta.
        for (int p = 2; p < n; ++p) {
            const double lo = ipow_exact(c, p, "contextual_mapping_check") * delta;
            const double hi = ipow_exact(c, p + 1, "contextual_mapping_check") * delta;
            const double v = lt[static_cast<size_t>(p - 1)];
            if (!(lo < v && v < hi)) bounds_ok = false;
        }
        for (int p = 1; p < n; ++p)
            if (!(lt[static_cast<size_t>(p - 1)] <= cn_delta)) bounds_ok = false;
        if (!(lt[static_cast<size_t>(n - 1)] > cn_delta)) bounds_ok = false;

        const std::vector<double> q = global_shift(lt, c, delta);
        for (double v : q) entries.push_back({v, rep.sequences});
        ++rep.sequences;

        // next combination of {0..G-1} choose n, ascending
        int pos = n - 1;
        while (pos >= 0 && combo[static_cast<size_t>(pos)] == G - n + pos) --pos;
        if (pos < 0) break;
        ++combo[static_cast<size_t>(pos)];
        for (int j = pos + 1; j < n; ++j)
            combo[static_cast<size_t>(j)] = combo[static_cast<size_t>(j - 1)] + 1;
    }

    rep.monotone_ok = monotone_ok;
    rep.bounds_ok = bounds_ok;
    rep.within_pairs = rep.sequences * (static_cast<long long>(n) * (n - 1) / 2);
    rep.cross_pairs =
        rep.sequences * (rep.sequences - 1) / 2 * static_cast<long long>(n) * n;

    // Every emitted value must be unique: a collision within one sequence
    // breaks property (i), across sequences property (ii). Sorting makes the
    // minimum gap an adjacent-pair question; comparisons are exact because the
    // values are exact.
    std::sort(entries.begin(), entries.end(),
              [](const Entry& a, const Entry& b) { return a.value < b.value; });
    bool within_ok = true, cross_ok = true;
    double min_sep = std::numeric_limits<double>::infinity();
    for (size_t e = 1; e < entries.size(); ++e) {
        const double gap = entries[e].value - entries[e - 1].value;
        if (gap == 0.0) {
            if (entries[e].seq == entries[e - 1].seq)
                within_ok = false;
            else
                cross_ok = false;
        } else {
            min_sep = std::min(min_sep, gap);
        }
    }
    rep.within_distinct = within_ok;
    rep.cross_distinct = cross_ok;
    rep.min_separation = entries.size() > 1 && std::isfinite(min_sep) ? min_sep : 0.0;
    return rep;
}

}  // namespace sigattn
