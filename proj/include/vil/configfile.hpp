#pragma once

// Strict INI-style config files: [section] headers, `key = value` lines,
// '#'/';' comments.  Unknown keys, duplicate keys, and malformed values are
// hard errors carrying the offending line number.

#include <cstdint>
#include <string>
#include <vector>

#include "vil/config.hpp"
#include "vil/dataset.hpp"

namespace vil {

struct ConfigEntry {
  std::string key;  // "section.key"
  std::string value;
  std::string origin;  // file name or caller-chosen tag, for error messages
  int line = 0;
};

std::vector<ConfigEntry> parse_config_text(const std::string& text, const std::string& origin);
std::vector<ConfigEntry> parse_config_path(const std::string& path);

struct TrainConfig {
  ViLConfig model;
  DatasetSpec data;
  int64_t epochs = 1;
  int64_t batch_size = 32;
  double base_lr = 1e-3;
  double warmup_epochs = 1.0;
  double end_lr = 1e-6;
  double weight_decay = 0.05;
  double grad_clip_norm = 1.0;
  double lr_scale_divisor = 1024.0;
  uint64_t seed = 0;
  int64_t eval_every = 100;  // steps between held-out evaluations
  std::string out_dir = "out";

  int64_t steps_per_epoch() const;
  int64_t total_steps() const;
  int64_t warmup_steps() const;
  double peak_lr() const;
};

// Applies `section.key` entries onto the defaults; origin/line information
// feeds error messages.  Validates the final model config.
TrainConfig train_config_from_entries(const std::vector<ConfigEntry>& entries);
TrainConfig load_train_config(const std::string& path);

// Built-in recipes used when no config file is given.  The toy recipe trains
// a small alternating bidirectional model to high accuracy on the corners
// task in a few hundred steps; the ablation recipe is a shortened variant
// with middle-patch pooling so causal-only designs are structurally blind to
// one corner.  The micro config is small enough for finite-difference
// gradient verification.
TrainConfig builtin_toy_recipe();
TrainConfig builtin_ablation_recipe();
ViLConfig builtin_micro_config();

}  // namespace vil
