#pragma once

#include <cstdint>
#include <optional>
#include <vector>

namespace sigattn {

// Dense row-major matrix of doubles. All entries are finite; operations that
// could overflow check their results and throw std::domain_error instead of
// propagating NaN/Inf.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;  // rows * cols, row-major

    Matrix() = default;
    Matrix(int rows, int cols);                            // zero-filled
    Matrix(int rows, int cols, std::vector<double> values);

    static Matrix identity(int n);
    static Matrix full(int rows, int cols, double value);

    double& at(int i, int j) { return data[static_cast<size_t>(i) * cols + j]; }
    double at(int i, int j) const { return data[static_cast<size_t>(i) * cols + j]; }
    double* row(int i) { return data.data() + static_cast<size_t>(i) * cols; }
    const double* row(int i) const { return data.data() + static_cast<size_t>(i) * cols; }

    bool same_shape(const Matrix& other) const {
        return rows == other.rows && cols == other.cols;
    }
    // Throws std::domain_error naming `what` if any entry is NaN/Inf.
    void ensure_finite(const char* what) const;
};

Matrix transpose(const Matrix& m);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scaled(const Matrix& m, double c);
double max_abs(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);

// Standard product. Accumulation over the inner dimension is strictly
// ascending per output element, so results are reproducible within a build.
Matrix matmul(const Matrix& a, const Matrix& b);

// 0.5 * (1 + tanh(0.5 x)); the formulation used by every sigmoid in this
// library so reference and tiled paths agree bit-for-bit.
double sigmoid_via_tanh(double x);

// Row-wise softmax with row-max subtraction. `mask`, if given, must match the
// shape with entries in {0,1}; masked entries are treated as -inf logits and
// come out exactly 0. Throws std::domain_error on a fully-masked row.
Matrix row_softmax(const Matrix& m, const Matrix* mask = nullptr);

// Largest singular value via power iteration on m^T m. Stops early once
// successive estimates differ by at most tol. Zero matrix returns 0.
double spectral_norm(const Matrix& m, int iters = 200, double tol = 1e-12);

double frobenius_norm(const Matrix& m);

// Seeded 64-bit generator (splitmix64 stream) with Box-Muller normals.
// Same seed => identical stream within one build.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), state_(seed) {}
    uint64_t seed() const { return seed_; }
    uint64_t next_u64();
    double uniform();  // [0, 1)
    double normal();   // N(0, 1)

private:
    uint64_t seed_;
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Gaussian matrix mean + std*z. If truncate_at is set, each standard draw z is
// rejection-resampled until |z| <= truncate_at (at most 100 extra attempts,
// then clamped).
Matrix rng_normal(Rng& rng, int rows, int cols, double mean = 0.0, double std = 1.0,
                  std::optional<double> truncate_at = std::nullopt);

}  // namespace sigattn
