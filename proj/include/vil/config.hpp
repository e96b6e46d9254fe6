#pragma once

// Model configuration: architecture hyperparameters, presets, and the
// derived dimension arithmetic shared by the backbone, the parameter
// counter, and the analytic operation-count model.

#include <cstdint>
#include <string>

#include "vil/errors.hpp"
#include "vil/traversal.hpp"

namespace vil {

enum class Pooling { AVG, MiddlePatch, MiddleCLS, BilateralAvg, BilateralConcat };
enum class ConvKind { Causal1D, Conv2D3x3 };
enum class DropPathSchedule { Constant, Linear };  // Linear ramps 0 -> rate across depth
enum class KernelMode { Parallel, Recurrent, Chunkwise };

const char* pooling_name(Pooling p);
const char* conv_kind_name(ConvKind k);
const char* kernel_mode_name(KernelMode m);

// Parsers for config-file values; unknown names raise ConfigError.
Pooling pooling_from_name(const std::string& s);
ConvKind conv_kind_from_name(const std::string& s);

struct ViLConfig {
  int64_t image_size = 224;
  int64_t patch_size = 16;
  int64_t patch_stride = 16;  // = patch_size/2 for 50% patch overlap
  int64_t dim = 192;
  int64_t depth = 24;
  double expansion = 2.0;
  double qk_dim_ratio = 0.5;
  int64_t heads = 4;
  BlockDesign block_design = BlockDesign::bi(/*alternating=*/true, /*shared_params=*/false);
  Pooling pooling = Pooling::BilateralConcat;
  ConvKind conv_kind = ConvKind::Conv2D3x3;
  int64_t conv1d_kernel = 4;
  bool use_bias = true;
  int64_t num_classes = 1000;
  double drop_path_rate = 0.0;
  DropPathSchedule drop_path_schedule = DropPathSchedule::Linear;

  // ---- derived dimension arithmetic ----
  int64_t grid_h() const { return (image_size - patch_size) / patch_stride + 1; }
  int64_t grid_w() const { return grid_h(); }
  int64_t num_patches() const { return grid_h() * grid_w(); }
  bool has_cls() const { return pooling == Pooling::MiddleCLS; }
  int64_t seq_len() const { return num_patches() + (has_cls() ? 1 : 0); }
  int64_t inner_dim() const { return static_cast<int64_t>(expansion * static_cast<double>(dim) + 0.5); }
  int64_t qk_total() const {
    return static_cast<int64_t>(qk_dim_ratio * static_cast<double>(inner_dim()) + 0.5);
  }
  int64_t head_v_dim() const { return inner_dim() / heads; }
  int64_t head_qk_dim() const { return qk_total() / heads; }
  int64_t pool_dim() const { return pooling == Pooling::BilateralConcat ? 2 * dim : dim; }

  static ViLConfig tiny();
  static ViLConfig small();
  static ViLConfig base();
};

// Throws ConfigError on any violated constraint (patch divisibility, head
// divisibility, degenerate sizes, drop-path range, pooling/cls coherence).
void validate_config(const ViLConfig& cfg);

// Deterministic textual form of every architecture-relevant field; hashed
// into checkpoint headers so weights cannot be loaded into a mismatched model.
std::string canonical_config_string(const ViLConfig& cfg);

}  // namespace vil
