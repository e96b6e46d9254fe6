#pragma once

// Toy-scale training loop: AdamW, linear warmup + cosine decay, global
// gradient-norm clipping, per-step metrics, checkpointing, and eval.

#include <cstdint>
#include <string>
#include <vector>

#include "vil/backbone.hpp"
#include "vil/configfile.hpp"
#include "vil/dataset.hpp"

namespace vil {

struct MetricsRecord {
  int64_t step = 0;
  double loss = 0;
  double train_acc = 0;  // batch accuracy at this step
  double eval_acc = -1;  // most recent held-out accuracy; -1 before the first eval
  double lr = 0;
  double ms_per_step = 0;
};

extern const char kMetricsHeader[];  // "step,loss,train_acc,eval_acc,lr,ms_per_step"
std::string metrics_csv(const std::vector<MetricsRecord>& rows);

// Linear warmup 0 -> peak over warmup_steps, then cosine decay to end_lr at
// total_steps.  Monotone on each phase; lr_at_step(0) == 0 when warming up.
double lr_at_step(int64_t step, int64_t total_steps, int64_t warmup_steps, double peak_lr,
                  double end_lr);

// Eval-mode accuracy over the whole dataset (no gradient graphs).
double evaluate(const ViLModel& model, const ImageDataset& data);

struct TrainResult {
  std::vector<MetricsRecord> metrics;
  double final_train_acc = 0;  // full train set, final weights
  double final_eval_acc = 0;
  int64_t steps_run = 0;
  std::string checkpoint_path;
  std::string metrics_path;
};

// Runs the full recipe; writes metrics.csv and checkpoint.bin under
// cfg.out_dir.  A non-finite loss aborts with the last good weights saved.
TrainResult train_model(const TrainConfig& cfg);

}  // namespace vil
