#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sigattn/attn.hpp"
#include "sigattn/core.hpp"

namespace sigattn {

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

enum class TaskKind { ksum, pair_repeat };

struct TaskSpec {
    TaskKind kind = TaskKind::ksum;
    // masked summation: inputs are 2n features (n gaussian values followed by
    // an n-dim mask with exactly k ones); target is the masked sum.
    int ksum_n = 10;
    int ksum_k = 1;
    // pair repeat: symbols from {0..vocab-1}, label 1 iff the first two
    // symbols reappear adjacently later; sequences right-padded with the
    // out-of-vocab symbol `vocab` up to max_len.
    int vocab = 5;
    int len_lo = 8;
    int len_hi = 10;
    int max_len = 14;

    int tokens() const { return kind == TaskKind::ksum ? 2 * ksum_n : max_len; }
    void validate() const;
};

struct TaskBatch {
    TaskKind kind = TaskKind::ksum;
    // ksum: batch x 2n feature rows; pair_repeat: batch x max_len symbol ids
    Matrix inputs;
    std::vector<double> targets;  // ksum: sums; pair_repeat: labels in {0,1}
    std::vector<int> lengths;     // pair_repeat: pre-padding lengths
};

TaskBatch gen_ksum(int n, int k, int batch, Rng& rng);
TaskBatch gen_pair_repeat(int vocab, int len_lo, int len_hi, int max_len, int batch, Rng& rng);
// Label by definition: 1 iff (s[0], s[1]) == (s[n], s[n+1]) for some n >= 2.
int pair_repeat_label(const std::vector<int>& symbols);

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

enum class PosEmbed { none, learnable, sincos, rope, alibi };

struct ModelConfig {
    int d_model = 64;
    int n_heads = 4;
    int n_layers = 1;
    int mlp_ratio = 4;
    Activation activation = Activation::sigmoid;
    BiasSpec bias;  // learnable mode adds one scalar offset parameter per layer
    bool qk_norm = false;
    bool layerscale = true;
    double layerscale_init = 1e-4;
    PosEmbed pos = PosEmbed::learnable;
    double alpha = 0.0;  // post-activation row-multiplier exponent
    bool causal = false;
    bool use_flash = false;  // route the attention kernel through the tiled path

    void validate() const;
};

// Flat named-tensor registry: a fixed, deterministic build order makes the
// optimizer, serialization, and finite-difference sweeps uniform.
struct ModelParams {
    ModelConfig model;
    TaskSpec task;
    std::vector<std::string> names;
    std::vector<Matrix> tensors;

    int find(const std::string& name) const;  // -1 when absent
    Matrix& tensor(const std::string& name);
    const Matrix& tensor(const std::string& name) const;
    long long scalar_count() const;
};

ModelParams init_model(const ModelConfig& model, const TaskSpec& task, Rng& rng);
std::vector<Matrix> zero_grads(const ModelParams& params);

struct ForwardResult {
    std::vector<double> predictions;  // one scalar per batch row
    // Post-activation attention matrices, outer index layer, inner index
    // sample-major then head; filled only when requested.
    std::vector<std::vector<Matrix>> attn;
};

ForwardResult model_forward(const ModelParams& params, const TaskBatch& batch,
                            bool want_attn = false);
// Task loss: mean squared error (ksum) or logit binary cross-entropy
// (pair_repeat) of the predictions against the batch targets.
double model_loss(const ModelParams& params, const TaskBatch& batch);
// Reverse-mode pass through the whole graph; accumulates into grads (shaped
// like params.tensors) and returns the loss. Optionally exposes the forward.
double model_backward(const ModelParams& params, const TaskBatch& batch,
                      std::vector<Matrix>& grads, ForwardResult* fwd = nullptr,
                      bool want_attn = false);
double batch_accuracy(const std::vector<double>& logits, const std::vector<double>& labels);

// Exact (erf-based) GELU and its derivative.
double gelu(double x);
double gelu_grad(double x);

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

struct AdamState {
    std::vector<Matrix> m, v;
    long long t = 0;
};

AdamState make_adam_state(const ModelParams& params);
void adam_step(ModelParams& params, const std::vector<Matrix>& grads, AdamState& state,
               double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

enum class Schedule { constant, warmup_cosine };

// warmup_cosine: linear ramp over the first 5% of total_steps, then a cosine
// decay to zero.
double schedule_lr(Schedule schedule, double max_lr, long long step, long long total_steps);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
    long long steps = 20000;
    int batch = 32;
    double lr = 1e-3;
    Schedule schedule = Schedule::constant;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    double clip = 0.0;  // global-norm gradient clip; 0 disables
    int metrics_every = 100;
    // Early stopping on the windowed mean; negative disables.
    double stop_loss = -1.0;
    double stop_acc = -1.0;
    int smooth_window = 50;
    std::uint64_t seed = 1;

    void validate() const;
};

struct MetricsRecord {
    long long step = 0;
    double loss = 0.0;
    std::optional<double> accuracy;   // pair_repeat only
    std::vector<double> attn_norms;   // per layer: mean Frobenius norm of P
    std::vector<double> hoyer;        // per layer: mean row sparsity of |P|
    double grad_norm = 0.0;           // global L2 norm before clipping
    double lr = 0.0;
};

struct TrainResult {
    std::vector<MetricsRecord> metrics;
    ModelParams params;
    double final_loss = 0.0;      // windowed mean at exit
    double final_accuracy = -1.0; // windowed mean at exit; -1 when not tracked
    long long steps_run = 0;
    long long samples_seen = 0;
};

// Fresh batches every step; deterministic given cfg.seed; throws
// std::runtime_error with a diagnostic when the loss or gradient diverges.
TrainResult train(const ModelConfig& model, const TaskSpec& task, const TrainConfig& cfg);

struct LengthReport {
    int length = 0;
    double accuracy = 0.0;
    long long samples = 0;
};

// Accuracy on freshly generated pair_repeat data at each requested length.
std::vector<LengthReport> eval_length_generalization(const ModelParams& params,
                                                     const std::vector<int>& lengths,
                                                     int samples_per_length, Rng& rng);

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

// Columns: step,loss[,accuracy],attn_norm_layer_i...,hoyer_layer_i...,grad_norm,lr
void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& records,
                       int n_layers, bool with_accuracy);
// Flat binary of 64-bit floats in registry order plus a JSON shape manifest.
void save_params(const ModelParams& params, const std::string& bin_path,
                 const std::string& manifest_path);
// Reads the binary back into an already-initialized registry (shape source of
// truth is the config); byte count must match exactly.
void load_params(ModelParams& params, const std::string& bin_path);

}  // namespace sigattn
