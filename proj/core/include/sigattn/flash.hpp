#pragma once

#include <string>
#include <utility>
#include <vector>

#include "sigattn/attn.hpp"
#include "sigattn/core.hpp"

namespace sigattn {

struct BlockSpec {
    int b_r = 128;  // query block rows
    int b_c = 128;  // key/value block rows
};

// Documented alternative block shape trading key-block reuse for smaller tiles.
inline constexpr BlockSpec kAltBlocks{128, 64};

struct MemReport {
    long long aux_floats = 0;          // peak auxiliary doubles beyond inputs/outputs
    bool n_sq_materialized = false;    // always false for the tiled paths
    long long blocks_processed = 0;
    long long blocks_skipped = 0;      // fully-masked blocks skipped before any arithmetic
    long long pairs_visited = 0;       // (i,j) logit entries actually evaluated
};

// Tiled sigmoid attention forward. Requires activation == sigmoid, alpha == 0
// and qk_norm == false (normalize Q/K beforehand); all bias modes and ALiBi
// are supported and computed per block. Never materializes an n x n buffer.
// i_block_order, when given, is a permutation of the query-block indices.
// threads > 1 parallelizes over query blocks; results are identical because
// query blocks write disjoint output rows.
std::pair<Matrix, MemReport> flash_forward(const Matrix& Q, const Matrix& K, const Matrix& V,
                                           const AttnConfig& cfg, BlockSpec blocks,
                                           const std::vector<int>* i_block_order = nullptr,
                                           int threads = 1);

// Tiled backward: outer loop over key/value blocks, inner over query blocks,
// recomputing S and P per block (the forward output is not an input). dQ is a
// read-modify-write accumulator across the outer loop. j_block_order permutes
// the outer loop; dK/dV are unaffected and dQ changes only by floating-point
// associativity. Accumulates d(bias scalar) into *d_bias when non-null.
// Runs single-threaded regardless of `threads`: dQ is the one cross-block
// accumulator and its accumulation order is pinned by the determinism contract.
std::pair<GradTriple, MemReport> flash_backward(const Matrix& Q, const Matrix& K, const Matrix& V,
                                                const Matrix& dO, const AttnConfig& cfg,
                                                BlockSpec blocks,
                                                const std::vector<int>* j_block_order = nullptr,
                                                int threads = 1, double* d_bias = nullptr);

struct BenchCell {
    std::string path;  // naive_forward | naive_backward | flash_forward | flash_backward
    int n = 0, d = 0;
    int b_r = 0, b_c = 0;  // 0 for the naive path
    bool skipped = false;  // naive skipped above the threshold
    std::vector<double> samples_ns;
    double median_ns = 0.0;
    long long aux_floats = 0;  // projected n*n for a skipped naive path
};

struct BenchReport {
    std::vector<BenchCell> cells;
};

// Median wall time over `reps` runs of naive vs tiled forward/backward at the
// given size. The naive path is skipped above naive_threshold rows and its
// projected n*n allocation is reported instead.
BenchReport kernel_bench(int n, int d, BlockSpec blocks, int reps, int naive_threshold = 4096);

}  // namespace sigattn
