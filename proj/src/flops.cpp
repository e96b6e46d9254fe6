#include "vil/flops.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "vil/errors.hpp"

namespace vil {

int64_t flops_mlstm(int64_t L, int64_t d_qk, int64_t d_v, KernelMode mode, int64_t chunk) {
  check<ConfigError>(L >= 1 && d_qk >= 1 && d_v >= 1, "flops_mlstm needs L, dims >= 1, got L=", L,
                     " d_qk=", d_qk, " d_v=", d_v);
  switch (mode) {
    case KernelMode::Recurrent:
      return L * (d_qk * d_v + d_qk + d_v);
    case KernelMode::Parallel:
      return flops_mlstm(L, d_qk, d_v, KernelMode::Chunkwise, L);
    case KernelMode::Chunkwise: {
      check<ConfigError>(chunk >= 1 && chunk <= L, "chunk size ", chunk, " outside [1, ", L, "]");
      const int64_t full = L / chunk, rem = L % chunk;
      auto intra = [&](int64_t c) { return c * (c + 1) / 2 * (d_qk + d_v); };
      const int64_t nchunks = full + (rem ? 1 : 0);
      return full * intra(chunk) + (rem ? intra(rem) : 0) + nchunks * d_qk * d_v;
    }
  }
  fail<UsageError>("unknown kernel mode");
}

MLSTMFlopsBreakdown flops_mlstm_parallel_breakdown(int64_t L, int64_t d_qk, int64_t d_v) {
  MLSTMFlopsBreakdown b;
  b.total = flops_mlstm(L, d_qk, d_v, KernelMode::Parallel);
  b.unmasked_score_value = L * L * (d_qk + d_v);
  b.score_value = b.unmasked_score_value / 2;
  b.normalization = b.total - b.score_value;
  return b;
}

std::vector<std::pair<int64_t, int64_t>> chunk_sweep(int64_t L, int64_t d_qk, int64_t d_v) {
  std::vector<std::pair<int64_t, int64_t>> sweep;
  sweep.reserve(static_cast<size_t>(L));
  for (int64_t c = 1; c <= L; ++c)
    sweep.emplace_back(c, flops_mlstm(L, d_qk, d_v, KernelMode::Chunkwise, c));
  return sweep;
}

FlopsReport estimate_model_flops(const ViLConfig& cfg, int64_t resolution, KernelMode mode,
                                 int64_t chunk) {
  validate_config(cfg);
  check<ConfigError>(resolution >= cfg.patch_size, "resolution ", resolution,
                     " below patch size ", cfg.patch_size);
  check<ConfigError>((resolution - cfg.patch_size) % cfg.patch_stride == 0,
                     "(resolution - patch) not divisible by stride at ", resolution);
  const int64_t gh = (resolution - cfg.patch_size) / cfg.patch_stride + 1;
  const int64_t n_patches = gh * gh;
  const int64_t L = n_patches + (cfg.has_cls() ? 1 : 0);
  const int64_t D = cfg.dim, E = cfg.inner_dim(), H = cfg.heads;
  const int64_t QK = cfg.qk_total(), Eh = E / H, QKh = QK / H;
  const int64_t kernel_chunk = mode == KernelMode::Chunkwise ? chunk : 0;

  // Direction passes summed over the whole stack.
  int64_t dir_passes = 0;
  for (const auto& dirs : assign_directions(cfg.block_design, cfg.depth))
    dir_passes += static_cast<int64_t>(dirs.size());

  FlopsReport rep;
  rep.mode = mode;
  rep.chunk = kernel_chunk;
  rep.seq_len = L;
  rep.dim = D;
  auto item = [&](std::string name, int64_t macs, bool per_block) {
    rep.items.push_back({std::move(name), macs, per_block});
  };

  item("patch_embed", n_patches * (cfg.patch_size * cfg.patch_size * 3) * D, false);
  item("pos_embed", n_patches * D, false);
  item("block.norm", dir_passes * L * D, true);
  item("block.proj_up", dir_passes * 2 * L * D * E, true);
  const int64_t conv_macs = cfg.conv_kind == ConvKind::Conv2D3x3 ? 9 * n_patches * E
                                                                 : cfg.conv1d_kernel * L * E;
  item("block.conv", dir_passes * conv_macs, true);
  item("block.qk_proj", dir_passes * 2 * L * Eh * QK, true);
  item("block.gates", dir_passes * 2 * L * E * H, true);
  item("block.mlstm", dir_passes * H * flops_mlstm(L, QKh, Eh, mode, kernel_chunk), true);
  item("block.norm_gate_skip", dir_passes * 5 * L * E, true);
  item("block.proj_down", dir_passes * L * E * D, true);
  item("final_norm", L * D, false);
  item("pool", cfg.pooling == Pooling::AVG ? L * D : cfg.pool_dim(), false);
  item("head", cfg.pool_dim() * cfg.num_classes, false);

  rep.total = 0;
  for (const auto& it : rep.items) rep.total += it.macs;
  return rep;
}

FlopsReport expected_flops_with_droppath(const FlopsReport& report, double rate,
                                         DropPathSchedule schedule, int64_t depth) {
  check<ConfigError>(rate >= 0.0 && rate < 1.0, "drop-path rate must lie in [0, 1), got ", rate);
  check<ConfigError>(depth >= 1, "depth must be positive");
  double mean_survival = 1.0 - rate;
  if (schedule == DropPathSchedule::Linear && depth > 1) mean_survival = 1.0 - rate / 2.0;
  FlopsReport out = report;
  out.total = 0;
  for (auto& it : out.items) {
    if (it.per_block)
      it.macs = static_cast<int64_t>(std::llround(static_cast<double>(it.macs) * mean_survival));
    out.total += it.macs;
  }
  return out;
}

std::string flops_report_csv(const FlopsReport& report) {
  std::ostringstream os;
  os << "component,count\n";
  for (const auto& it : report.items) os << it.name << "," << it.macs << "\n";
  os << "total," << report.total << "\n";
  return os.str();
}

std::string flops_report_table(const FlopsReport& report) {
  size_t width = 5;
  for (const auto& it : report.items) width = std::max(width, it.name.size());
  std::ostringstream os;
  os << "mode=" << kernel_mode_name(report.mode);
  if (report.mode == KernelMode::Chunkwise) os << "(C=" << report.chunk << ")";
  os << " L=" << report.seq_len << " D=" << report.dim << "\n";
  for (const auto& it : report.items)
    os << "  " << std::left << std::setw(static_cast<int>(width)) << it.name << "  "
       << std::right << std::setw(14) << it.macs << "\n";
  os << "  " << std::left << std::setw(static_cast<int>(width)) << "total" << "  " << std::right
     << std::setw(14) << report.total << "\n";
  return os.str();
}

}  // namespace vil
