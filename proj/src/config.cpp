#include "vil/config.hpp"

#include <sstream>

namespace vil {

const char* pooling_name(Pooling p) {
  switch (p) {
    case Pooling::AVG: return "avg";
    case Pooling::MiddlePatch: return "middle_patch";
    case Pooling::MiddleCLS: return "middle_cls";
    case Pooling::BilateralAvg: return "bilateral_avg";
    case Pooling::BilateralConcat: return "bilateral_concat";
  }
  fail<UsageError>("unknown pooling");
}

const char* conv_kind_name(ConvKind k) {
  switch (k) {
    case ConvKind::Causal1D: return "causal1d";
    case ConvKind::Conv2D3x3: return "conv2d";
  }
  fail<UsageError>("unknown conv kind");
}

const char* kernel_mode_name(KernelMode m) {
  switch (m) {
    case KernelMode::Parallel: return "parallel";
    case KernelMode::Recurrent: return "recurrent";
    case KernelMode::Chunkwise: return "chunkwise";
  }
  fail<UsageError>("unknown kernel mode");
}

Pooling pooling_from_name(const std::string& s) {
  if (s == "avg") return Pooling::AVG;
  if (s == "middle_patch") return Pooling::MiddlePatch;
  if (s == "middle_cls") return Pooling::MiddleCLS;
  if (s == "bilateral_avg") return Pooling::BilateralAvg;
  if (s == "bilateral_concat") return Pooling::BilateralConcat;
  fail<ConfigError>("unknown pooling '", s,
                    "' (expected avg|middle_patch|middle_cls|bilateral_avg|bilateral_concat)");
}

ConvKind conv_kind_from_name(const std::string& s) {
  if (s == "causal1d") return ConvKind::Causal1D;
  if (s == "conv2d") return ConvKind::Conv2D3x3;
  fail<ConfigError>("unknown conv kind '", s, "' (expected causal1d|conv2d)");
}

ViLConfig ViLConfig::tiny() {
  ViLConfig cfg;
  cfg.dim = 192;
  cfg.depth = 24;
  cfg.drop_path_rate = 0.0;
  return cfg;
}

ViLConfig ViLConfig::small() {
  ViLConfig cfg;
  cfg.dim = 384;
  cfg.depth = 24;
  cfg.drop_path_rate = 0.05;
  return cfg;
}

ViLConfig ViLConfig::base() {
  ViLConfig cfg;
  cfg.dim = 768;
  cfg.depth = 24;
  cfg.drop_path_rate = 0.2;
  return cfg;
}

void validate_config(const ViLConfig& cfg) {
  check<ConfigError>(cfg.image_size >= 1 && cfg.patch_size >= 1 && cfg.patch_stride >= 1,
                     "image/patch/stride must be positive");
  check<ConfigError>(cfg.patch_size <= cfg.image_size, "patch ", cfg.patch_size,
                     " exceeds image ", cfg.image_size);
  check<ConfigError>((cfg.image_size - cfg.patch_size) % cfg.patch_stride == 0,
                     "(image_size - patch_size) = ", cfg.image_size - cfg.patch_size,
                     " is not divisible by patch_stride = ", cfg.patch_stride);
  check<ConfigError>(cfg.dim >= 1 && cfg.depth >= 1 && cfg.heads >= 1,
                     "dim/depth/heads must be positive");
  check<ConfigError>(cfg.expansion > 0 && cfg.qk_dim_ratio > 0,
                     "expansion and qk_dim_ratio must be positive");
  check<ConfigError>(cfg.inner_dim() >= cfg.heads && cfg.inner_dim() % cfg.heads == 0,
                     "inner width ", cfg.inner_dim(), " must be a positive multiple of heads = ",
                     cfg.heads);
  check<ConfigError>(cfg.qk_total() >= cfg.heads && cfg.qk_total() % cfg.heads == 0,
                     "qk width ", cfg.qk_total(), " must be a positive multiple of heads = ",
                     cfg.heads);
  check<ConfigError>(cfg.num_classes >= 2, "need at least 2 classes, got ", cfg.num_classes);
  check<ConfigError>(cfg.drop_path_rate >= 0.0 && cfg.drop_path_rate < 1.0,
                     "drop_path_rate must lie in [0, 1), got ", cfg.drop_path_rate);
  if (cfg.conv_kind == ConvKind::Causal1D)
    check<ConfigError>(cfg.conv1d_kernel >= 1, "conv1d kernel must be positive");
  if (cfg.pooling == Pooling::MiddleCLS)
    check<ConfigError>(cfg.num_patches() % 2 == 0,
                       "middle_cls needs an even patch count for a central insertion, got ",
                       cfg.num_patches());
  validate_design(cfg.block_design);
}

std::string canonical_config_string(const ViLConfig& cfg) {
  std::ostringstream os;
  os << "vil1"
     << ";image=" << cfg.image_size << ";patch=" << cfg.patch_size
     << ";stride=" << cfg.patch_stride << ";dim=" << cfg.dim << ";depth=" << cfg.depth
     << ";expansion=" << cfg.expansion << ";qk_ratio=" << cfg.qk_dim_ratio
     << ";heads=" << cfg.heads << ";design=";
  for (PathKind d : cfg.block_design.directions) os << path_kind_name(d) << ",";
  os << ";alternating=" << (cfg.block_design.alternating ? 1 : 0)
     << ";shared=" << (cfg.block_design.shared_params ? 1 : 0)
     << ";pooling=" << pooling_name(cfg.pooling) << ";conv=" << conv_kind_name(cfg.conv_kind)
     << ";conv1d_kernel=" << cfg.conv1d_kernel << ";bias=" << (cfg.use_bias ? 1 : 0)
     << ";classes=" << cfg.num_classes << ";drop_path=" << cfg.drop_path_rate
     << ";drop_path_schedule="
     << (cfg.drop_path_schedule == DropPathSchedule::Linear ? "linear" : "constant");
  return os.str();
}

}  // namespace vil
