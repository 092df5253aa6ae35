#include "sigattn/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace sigattn {

namespace {

void check_shape(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

Matrix::Matrix(int r, int c) : rows(r), cols(c) {
    check_shape(r >= 0 && c >= 0, "Matrix: negative shape");
    data.assign(static_cast<size_t>(r) * static_cast<size_t>(c), 0.0);
}

Matrix::Matrix(int r, int c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
    check_shape(r >= 0 && c >= 0, "Matrix: negative shape");
    if (data.size() != static_cast<size_t>(r) * static_cast<size_t>(c))
        throw std::invalid_argument("Matrix: data length does not match rows*cols");
    ensure_finite("Matrix construction");
}

Matrix Matrix::identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

Matrix Matrix::full(int r, int c, double value) {
    Matrix m(r, c);
    std::fill(m.data.begin(), m.data.end(), value);
    m.ensure_finite("Matrix::full");
    return m;
}

void Matrix::ensure_finite(const char* what) const {
    for (double v : data) {
        if (!std::isfinite(v))
            throw std::domain_error(std::string(what) + ": non-finite entry");
    }
}

Matrix transpose(const Matrix& m) {
    Matrix t(m.cols, m.rows);
    for (int i = 0; i < m.rows; ++i)
        for (int j = 0; j < m.cols; ++j) t.at(j, i) = m.at(i, j);
    return t;
}

Matrix add(const Matrix& a, const Matrix& b) {
    check_shape(a.same_shape(b), "add: shape mismatch");
    Matrix c(a.rows, a.cols);
    for (size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] + b.data[i];
    c.ensure_finite("add");
    return c;
}

Matrix sub(const Matrix& a, const Matrix& b) {
    check_shape(a.same_shape(b), "sub: shape mismatch");
    Matrix c(a.rows, a.cols);
    for (size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] - b.data[i];
    c.ensure_finite("sub");
    return c;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    check_shape(a.same_shape(b), "hadamard: shape mismatch");
    Matrix c(a.rows, a.cols);
    for (size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] * b.data[i];
    c.ensure_finite("hadamard");
    return c;
}

Matrix scaled(const Matrix& m, double c) {
    Matrix out(m.rows, m.cols);
    for (size_t i = 0; i < m.data.size(); ++i) out.data[i] = m.data[i] * c;
    out.ensure_finite("scaled");
    return out;
}

double max_abs(const Matrix& m) {
    double mx = 0.0;
    for (double v : m.data) mx = std::max(mx, std::abs(v));
    return mx;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    check_shape(a.same_shape(b), "max_abs_diff: shape mismatch");
    double mx = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) mx = std::max(mx, std::abs(a.data[i] - b.data[i]));
    return mx;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    check_shape(a.cols == b.rows, "matmul: inner dimensions disagree");
    Matrix c(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        const double* arow = a.row(i);
        double* crow = c.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            const double* brow = b.row(k);
            for (int j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
        }
    }
    c.ensure_finite("matmul");
    return c;
}

double sigmoid_via_tanh(double x) { return 0.5 * (1.0 + std::tanh(0.5 * x)); }

Matrix row_softmax(const Matrix& m, const Matrix* mask) {
    if (mask) {
        check_shape(mask->same_shape(m), "row_softmax: mask shape mismatch");
        for (double v : mask->data)
            if (v != 0.0 && v != 1.0)
                throw std::invalid_argument("row_softmax: mask entries must be 0 or 1");
    }
    Matrix p(m.rows, m.cols);
    for (int i = 0; i < m.rows; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (int j = 0; j < m.cols; ++j) {
            if (mask && mask->at(i, j) == 0.0) continue;
            any = true;
            mx = std::max(mx, m.at(i, j));
        }
        if (!any)
            throw std::domain_error("row_softmax: fully-masked row " + std::to_string(i));
        double sum = 0.0;
        for (int j = 0; j < m.cols; ++j) {
            if (mask && mask->at(i, j) == 0.0) continue;
            double e = std::exp(m.at(i, j) - mx);
            p.at(i, j) = e;
            sum += e;
        }
        for (int j = 0; j < m.cols; ++j) {
            if (mask && mask->at(i, j) == 0.0) continue;
            p.at(i, j) /= sum;
        }
    }
    return p;
}

double frobenius_norm(const Matrix& m) {
    double s = 0.0;
    for (double v : m.data) s += v * v;
    return std::sqrt(s);
}

double spectral_norm(const Matrix& m, int iters, double tol) {
    check_shape(m.rows >= 1 && m.cols >= 1, "spectral_norm: empty matrix");
    check_shape(iters >= 1, "spectral_norm: iters must be >= 1");
    if (frobenius_norm(m) == 0.0) return 0.0;

    // Fixed-seed random start: a deterministic constant vector can be exactly
    // orthogonal to the dominant eigenvector.
    Rng rng(0x5eed0001ULL);
    std::vector<double> v(m.cols);
    auto randomize = [&] {
        double nrm = 0.0;
        for (auto& x : v) {
            x = rng.normal();
            nrm += x * x;
        }
        nrm = std::sqrt(nrm);
        for (auto& x : v) x /= nrm;
    };
    randomize();

    std::vector<double> t(m.rows), w(m.cols);
    double sigma_prev = -1.0;
    double lambda = 0.0;
    for (int it = 0; it < iters; ++it) {
        for (int i = 0; i < m.rows; ++i) {
            const double* r = m.row(i);
            double s = 0.0;
            for (int j = 0; j < m.cols; ++j) s += r[j] * v[j];
            t[i] = s;
        }
        std::fill(w.begin(), w.end(), 0.0);
        for (int i = 0; i < m.rows; ++i) {
            const double* r = m.row(i);
            for (int j = 0; j < m.cols; ++j) w[j] += r[j] * t[i];
        }
        lambda = 0.0;
        for (int j = 0; j < m.cols; ++j) lambda += v[j] * w[j];
        double wn = 0.0;
        for (double x : w) wn += x * x;
        wn = std::sqrt(wn);
        if (wn == 0.0) {  // v landed in the null space; restart
            randomize();
            sigma_prev = -1.0;
            continue;
        }
        for (int j = 0; j < m.cols; ++j) v[j] = w[j] / wn;
        double sigma = std::sqrt(std::max(lambda, 0.0));
        if (sigma_prev >= 0.0 && std::abs(sigma - sigma_prev) <= tol * std::max(1.0, sigma)) {
            sigma_prev = sigma;
            break;
        }
        sigma_prev = sigma;
    }
    return sigma_prev;
}

uint64_t Rng::next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

Matrix rng_normal(Rng& rng, int rows, int cols, double mean, double std,
                  std::optional<double> truncate_at) {
    if (std < 0.0) throw std::invalid_argument("rng_normal: std must be >= 0");
    if (truncate_at && *truncate_at <= 0.0)
        throw std::invalid_argument("rng_normal: truncate_at must be > 0");
    Matrix out(rows, cols);
    for (auto& v : out.data) {
        double z = rng.normal();
        if (truncate_at) {
            const double t = *truncate_at;
            for (int attempt = 0; std::abs(z) > t && attempt < 100; ++attempt) z = rng.normal();
            z = std::clamp(z, -t, t);
        }
        v = mean + std * z;
    }
    out.ensure_finite("rng_normal");
    return out;
}

}  // namespace sigattn
