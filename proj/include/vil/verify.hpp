#pragma once

// Verification harnesses shared by the CLI and the acceptance suite:
// finite-difference gradient checks, cross-mode kernel equivalence sweeps,
// runtime scaling benchmarks, and the block-design ablation matrix.

#include <cstdint>
#include <string>
#include <vector>

#include "vil/config.hpp"
#include "vil/configfile.hpp"

namespace vil {

// ---- gradient check -----------------------------------------------------------

struct GradCheckGroup {
  std::string name;
  double max_rel_err = 0;
  bool skipped = false;  // requires_grad disabled
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double max_rel_err = 0;  // over non-skipped groups
  int64_t param_count = 0;
};

// Central finite differences at 64 bits against analytic gradients of the
// cross-entropy loss on one random image.  Micro-scale only (<= 5e4
// parameters).  Names listed in `freeze` run with gradients disabled and
// are reported as skipped.
GradCheckReport gradcheck_model(const ViLConfig& cfg, uint64_t seed, double fd_step = 1e-4,
                                const std::vector<std::string>& freeze = {});

// ---- cross-mode equivalence ---------------------------------------------------

struct EquivalenceCase {
  int64_t L = 0, d = 0, chunk = 0, trial = 0;
  double deviation = 0;  // max abs over the three mode pairings
};

struct EquivalenceReport {
  double max_deviation = 0;
  EquivalenceCase worst;
  int64_t cases_run = 0;
};

// Random-input recurrent/parallel/chunkwise forwards for every
// (L, d, min(C, L), trial) combination; T selects the working precision.
template <typename T>
EquivalenceReport equivalence_sweep(const std::vector<int64_t>& Ls, const std::vector<int64_t>& ds,
                                    const std::vector<int64_t>& chunks, int64_t trials,
                                    uint64_t seed);

// ---- runtime scaling benchmark -------------------------------------------------

struct BenchRow {
  int64_t L = 0;
  int64_t chunk = 0;  // 0 for non-chunkwise rows
  std::string mode;
  double median_ms = 0;
  int64_t analytic_flops = 0;
  bool timer_warning = false;  // median under 1 ms
};

struct BenchReport {
  std::vector<BenchRow> rows;
  double parallel_exponent = 0;
  double recurrent_exponent = 0;
};

BenchReport run_bench(const std::vector<int64_t>& Ls, int64_t d,
                      const std::vector<int64_t>& chunks, int64_t repeats, uint64_t seed);
std::string bench_csv(const BenchReport& report);

// Least-squares slope of log y against log x.
double fit_log_exponent(const std::vector<double>& x, const std::vector<double>& y);

// ---- ablation -------------------------------------------------------------------

struct AblationRow {
  std::string design;
  std::string pooling;
  std::vector<double> seed_accs;  // held-out accuracy per seed
  double mean_acc = 0;
  int64_t params = 0;
  int64_t head_in_dim = 0;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  double uni_mean = 0;
  double alt_bi_mean = 0;
  // Head input width per pooling mode at embedding width 192.
  std::vector<std::pair<std::string, int64_t>> pooling_dims;
};

// Built-in design matrix (uni / alternating-bi / shared-bi / unshared-bi at
// middle-patch pooling) trained on the corners task over `seeds` seeds.
AblationReport run_ablation(const TrainConfig& recipe, int64_t seeds, uint64_t base_seed);
std::string ablation_csv(const AblationReport& report);

}  // namespace vil
