#pragma once

// Analytic multiply-accumulate model.  1 MAC = 1 FLOP unit; activations,
// norms and gates are counted linearly in their tensor sizes; the masked
// half of the parallel score matrix is omitted analytically (L*L/2
// convention) even where an implementation computes full blocks.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vil/config.hpp"

namespace vil {

struct FlopsItem {
  std::string name;
  int64_t macs = 0;
  bool per_block = false;  // scaled by drop-path survival in expectation
};

struct FlopsReport {
  std::vector<FlopsItem> items;
  int64_t total = 0;  // always the sum over items
  KernelMode mode = KernelMode::Parallel;
  int64_t chunk = 0;  // meaningful for chunkwise only
  int64_t seq_len = 0;
  int64_t dim = 0;
};

// Core kernel count for one head over a length-L sequence:
//   recurrent:   L * (d_qk*d_v + d_qk + d_v)
//   chunkwise C: sum_chunks c(c+1)/2 * (d_qk+d_v)  +  n_chunks * d_qk*d_v
//   parallel:    chunkwise with C = L
// Chunkwise degenerates exactly to recurrent at C=1 and parallel at C=L.
int64_t flops_mlstm(int64_t L, int64_t d_qk, int64_t d_v, KernelMode mode, int64_t chunk = 0);

// Parallel-mode split into the masked score/value product (exactly half of
// the unmasked L^2 term whenever that is even) and the remainder.
struct MLSTMFlopsBreakdown {
  int64_t score_value = 0;
  int64_t normalization = 0;
  int64_t total = 0;
  int64_t unmasked_score_value = 0;
};
MLSTMFlopsBreakdown flops_mlstm_parallel_breakdown(int64_t L, int64_t d_qk, int64_t d_v);

// (C, count) for every C in [1, L]; exposes the chunk-size minimum to
// exhaustive scan.
std::vector<std::pair<int64_t, int64_t>> chunk_sweep(int64_t L, int64_t d_qk, int64_t d_v);

// Whole-model estimate at the given input resolution (square images).
FlopsReport estimate_model_flops(const ViLConfig& cfg, int64_t resolution,
                                 KernelMode mode = KernelMode::Parallel, int64_t chunk = 0);

// Expectation under efficient stochastic depth: every per-block item is
// scaled by the mean survival probability of the schedule; the rest is
// untouched.  rate must lie in [0, 1).
FlopsReport expected_flops_with_droppath(const FlopsReport& report, double rate,
                                         DropPathSchedule schedule, int64_t depth);

std::string flops_report_csv(const FlopsReport& report);
std::string flops_report_table(const FlopsReport& report);

}  // namespace vil
