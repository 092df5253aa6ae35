#pragma once

#include <optional>
#include <vector>

#include "sigattn/core.hpp"

namespace sigattn {

enum class Activation { softmax, sigmoid, relu, tanh };

// Scalar added to every logit of a row before the activation.
struct BiasSpec {
    enum class Mode { none, constant, neg_log_n, neg_log_rowlen, learnable };
    Mode mode = Mode::none;
    double value = 0.0;  // constant offset, or current value of the learnable scalar

    static BiasSpec none() { return {}; }
    static BiasSpec constant(double b) { return {Mode::constant, b}; }
    static BiasSpec neg_log_n() { return {Mode::neg_log_n, 0.0}; }
    static BiasSpec neg_log_rowlen() { return {Mode::neg_log_rowlen, 0.0}; }
    static BiasSpec learnable(double init) { return {Mode::learnable, init}; }
};

// Additive distance bias. Non-causal uses distinct forward/backward slopes;
// the backward slope is kAlibiBackwardSlopeRatio times the forward one.
inline constexpr double kAlibiBackwardSlopeRatio = 0.5;

struct PosBias {
    enum class Kind { none, alibi };
    Kind kind = Kind::none;
    int num_heads = 1;
    int head = 0;

    static PosBias none() { return {}; }
    static PosBias alibi(int num_heads, int head = 0) { return {Kind::alibi, num_heads, head}; }
};

struct AttnConfig {
    Activation activation = Activation::softmax;
    BiasSpec bias;
    double alpha = 0.0;        // post-activation row multiplier exponent (0 disables)
    bool causal = false;
    PosBias pos_bias;
    std::optional<double> scale;  // defaults to 1/sqrt(d_qk)
    bool qk_norm = false;         // unit-gain row LayerNorm on Q and K before the logits
    double qk_norm_eps = 1e-6;

    void validate() const;  // alpha >= 0; bias modes other than none require sigmoid
};

struct GradTriple {
    Matrix dQ, dK, dV;
};

struct AttnResult {
    Matrix O;  // attention output
    Matrix P;  // post-activation (and post row-multiplier) attention matrix
    Matrix S;  // logits: scale*Q K^T + positional bias + row bias
};

double resolve_scale(const AttnConfig& cfg, int d_qk);
double alibi_slope(int head, int num_heads);
// Single entry of the distance-bias matrix; shared by the reference matrix
// builder and the tiled kernel so both see bit-identical values.
double alibi_entry(int i, int j, double slope, bool causal);
// Logit offset of query row i given n_keys keys; same sharing rationale.
double row_bias_value(const AttnConfig& cfg, int i, int n_keys);

// Per-row logit offsets for a length-n attention. row_lengths (visible keys
// per row) is only consulted in neg_log_rowlen mode and must then have n
// entries, each >= 1.
std::vector<double> logit_bias(const AttnConfig& cfg, int n,
                               const std::vector<int>& row_lengths = {});

Matrix alibi_bias(int n, int head, int num_heads, bool causal);

// Row i multiplier (1/n_i)^alpha replicated across columns; n_i = i+1 when
// causal, n otherwise.
Matrix seq_norm_weights(int n, double alpha, bool causal);

AttnResult attn_forward(const Matrix& Q, const Matrix& K, const Matrix& V, const AttnConfig& cfg);

GradTriple attn_backward(const Matrix& Q, const Matrix& K, const Matrix& V, const Matrix& dO,
                         const AttnConfig& cfg);
// As attn_backward; additionally accumulates d(loss)/d(bias scalar) into
// *d_bias when non-null (meaningful for constant/learnable bias modes).
GradTriple attn_backward_ex(const Matrix& Q, const Matrix& K, const Matrix& V, const Matrix& dO,
                            const AttnConfig& cfg, double* d_bias);

// Per-row LayerNorm with gain and no shift: (x - mean)/sqrt(var + eps) * gain.
Matrix qk_normalize(const Matrix& m, const std::vector<double>& gain, double eps);
// Reverse-mode companion; accumulates into *d_gain when non-null.
Matrix qk_normalize_backward(const Matrix& m, const std::vector<double>& gain, double eps,
                             const Matrix& dY, std::vector<double>* d_gain = nullptr);

// Rotary embedding: row p rotated pairwise by angles p * base^(-2k/d).
Matrix apply_rope(const Matrix& m, double base = 10000.0);
// Reverse-mode companion (inverse rotation of the cotangent).
Matrix apply_rope_backward(const Matrix& dY, double base = 10000.0);

// Concatenated per-head attention outputs times Wo. Wq/Wk/Wv hold one
// projection per head; with ALiBi configured, head h uses slope h.
Matrix multihead_attn(const Matrix& X, const std::vector<Matrix>& Wq,
                      const std::vector<Matrix>& Wk, const std::vector<Matrix>& Wv,
                      const Matrix& Wo, const AttnConfig& cfg);

}  // namespace sigattn
