#include "vil/backbone.hpp"

#include <algorithm>
#include <cmath>

namespace vil {

// ==== free ops =================================================================

template <typename T>
TensorT<T> patchify(const TensorT<T>& image, int64_t patch, int64_t stride) {
  check<ShapeError>(image.rank() == 3 && image.dim(2) == 3,
                    "patchify expects an {H,W,3} image, got ", shape_str(image.shape()));
  const int64_t h = image.dim(0), w = image.dim(1);
  check<ConfigError>(patch >= 1 && stride >= 1 && patch <= h && patch <= w,
                     "patch ", patch, "/stride ", stride, " invalid for ", h, "x", w, " image");
  check<ConfigError>((h - patch) % stride == 0 && (w - patch) % stride == 0,
                     "(image - patch) = ", h - patch, "x", w - patch,
                     " not divisible by stride = ", stride);
  const int64_t gh = (h - patch) / stride + 1;
  const int64_t gw = (w - patch) / stride + 1;
  const int64_t pv = patch * patch * 3;
  std::vector<T> out(static_cast<size_t>(gh * gw * pv));
  auto img = image.values();
  for (int64_t gy = 0; gy < gh; ++gy)
    for (int64_t gx = 0; gx < gw; ++gx) {
      T* dst = out.data() + (gy * gw + gx) * pv;
      for (int64_t py = 0; py < patch; ++py)
        for (int64_t px = 0; px < patch; ++px) {
          const T* src = img.data() + ((gy * stride + py) * w + (gx * stride + px)) * 3;
          dst[(py * patch + px) * 3 + 0] = src[0];
          dst[(py * patch + px) * 3 + 1] = src[1];
          dst[(py * patch + px) * 3 + 2] = src[2];
        }
    }
  return TensorT<T>::from_values({gh * gw, pv}, std::move(out));
}

namespace {

// Catmull-Rom value at fraction t within [p1, p2].  Reproduces constants and
// linear fields exactly (weights sum to 1, first moment matches).
double catmull_rom(double p0, double p1, double p2, double p3, double t) {
  const double t2 = t * t, t3 = t2 * t;
  return 0.5 * ((2.0 * p1) + (-p0 + p2) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2 +
                (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t3);
}

// Samples a length-n array at (possibly out-of-range) integer index via
// linear extension from the boundary pair.
double tap(const std::vector<double>& v, int64_t i) {
  const int64_t n = static_cast<int64_t>(v.size());
  if (n == 1) return v[0];
  if (i < 0) return v[0] + static_cast<double>(i) * (v[1] - v[0]);
  if (i >= n) return v[static_cast<size_t>(n - 1)] +
                     static_cast<double>(i - (n - 1)) * (v[static_cast<size_t>(n - 1)] - v[static_cast<size_t>(n - 2)]);
  return v[static_cast<size_t>(i)];
}

// 1-D Catmull-Rom resample from n to n2 points, endpoints aligned.
std::vector<double> resample_axis(const std::vector<double>& v, int64_t n2) {
  const int64_t n = static_cast<int64_t>(v.size());
  std::vector<double> out(static_cast<size_t>(n2));
  for (int64_t o = 0; o < n2; ++o) {
    const double src = n2 > 1 ? static_cast<double>(o) * static_cast<double>(n - 1) /
                                    static_cast<double>(n2 - 1)
                              : static_cast<double>(n - 1) / 2.0;
    const int64_t i1 = static_cast<int64_t>(std::floor(src));
    const double t = src - static_cast<double>(i1);
    out[static_cast<size_t>(o)] =
        catmull_rom(tap(v, i1 - 1), tap(v, i1), tap(v, i1 + 1), tap(v, i1 + 2), t);
  }
  return out;
}

}  // namespace

template <typename T>
TensorT<T> interpolate_positional(const TensorT<T>& pos, int64_t h, int64_t w, int64_t h2,
                                  int64_t w2) {
  check<ShapeError>(pos.rank() == 2, "positional table must be rank 2, got ",
                    shape_str(pos.shape()));
  check<ShapeError>(pos.dim(0) == h * w, "positional table has ", pos.dim(0),
                    " rows, expected ", h, "*", w);
  check<ConfigError>(h >= 1 && w >= 1 && h2 >= 1 && w2 >= 1, "degenerate grid ", h2, "x", w2);
  const int64_t d = pos.dim(1);
  if (h2 == h && w2 == w)
    return TensorT<T>::from_values(pos.shape(),
                                   std::vector<T>(pos.values().begin(), pos.values().end()));
  auto pv = pos.values();
  std::vector<T> out(static_cast<size_t>(h2 * w2 * d));
  std::vector<double> col(static_cast<size_t>(h)), row(static_cast<size_t>(w));
  // Separable passes per channel: rows (h -> h2), then columns (w -> w2).
  std::vector<double> mid(static_cast<size_t>(h2 * w));
  for (int64_t c = 0; c < d; ++c) {
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t y = 0; y < h; ++y) col[static_cast<size_t>(y)] = static_cast<double>(pv[(y * w + x) * d + c]);
      auto rc = resample_axis(col, h2);
      for (int64_t y = 0; y < h2; ++y) mid[static_cast<size_t>(y * w + x)] = rc[static_cast<size_t>(y)];
    }
    for (int64_t y = 0; y < h2; ++y) {
      for (int64_t x = 0; x < w; ++x) row[static_cast<size_t>(x)] = mid[static_cast<size_t>(y * w + x)];
      auto rr = resample_axis(row, w2);
      for (int64_t x = 0; x < w2; ++x)
        out[static_cast<size_t>((y * w2 + x) * d + c)] = static_cast<T>(rr[static_cast<size_t>(x)]);
    }
  }
  return TensorT<T>::from_values({h2 * w2, d}, std::move(out));
}

std::pair<bool, double> drop_path_decision(double rate, bool training, std::mt19937& rng) {
  check<ConfigError>(rate >= 0.0 && rate < 1.0, "drop-path rate must lie in [0, 1), got ", rate);
  if (!training || rate == 0.0) return {false, 1.0};
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return {u(rng) < rate, 1.0 / (1.0 - rate)};
}

std::vector<double> drop_path_rates(const ViLConfig& cfg) {
  std::vector<double> rates(static_cast<size_t>(cfg.depth), cfg.drop_path_rate);
  if (cfg.drop_path_schedule == DropPathSchedule::Linear && cfg.depth > 1) {
    for (int64_t b = 0; b < cfg.depth; ++b)
      rates[static_cast<size_t>(b)] =
          cfg.drop_path_rate * static_cast<double>(b) / static_cast<double>(cfg.depth - 1);
  }
  return rates;
}

// ==== parameter enumeration ====================================================

int64_t param_set_for(const ViLConfig& cfg, PathKind dir) {
  const BlockDesign& d = cfg.block_design;
  if (d.alternating || d.shared_params) return 0;
  for (size_t i = 0; i < d.directions.size(); ++i)
    if (d.directions[i] == dir) return static_cast<int64_t>(i);
  fail<UsageError>("direction ", path_kind_name(dir), " is not part of the block design");
}

std::vector<ParamSpec> describe_params(const ViLConfig& cfg) {
  validate_config(cfg);
  const int64_t D = cfg.dim, E = cfg.inner_dim(), H = cfg.heads;
  const int64_t QK = cfg.qk_total(), Eh = E / H;
  std::vector<ParamSpec> specs;
  auto push = [&](std::string name, Shape shape, InitKind init) {
    specs.push_back({std::move(name), std::move(shape), init});
  };
  auto push_bias = [&](std::string name, Shape shape, InitKind init) {
    if (cfg.use_bias) push(std::move(name), std::move(shape), init);
  };

  push("patch_embed.w", {cfg.patch_size * cfg.patch_size * 3, D}, InitKind::Normal02);
  push_bias("patch_embed.b", {D}, InitKind::Zeros);
  push("pos_embed", {cfg.num_patches(), D}, InitKind::Normal02);
  if (cfg.has_cls()) push("cls", {1, D}, InitKind::Normal02);

  const int64_t sets = (cfg.block_design.alternating || cfg.block_design.shared_params)
                           ? 1
                           : static_cast<int64_t>(cfg.block_design.directions.size());
  const Shape conv_shape = cfg.conv_kind == ConvKind::Conv2D3x3 ? Shape{3, 3, E}
                                                                : Shape{cfg.conv1d_kernel, E};
  for (int64_t b = 0; b < cfg.depth; ++b) {
    for (int64_t s = 0; s < sets; ++s) {
      const std::string p = "blocks." + std::to_string(b) + ".dir" + std::to_string(s) + ".";
      push(p + "norm.g", {D}, InitKind::Ones);
      push(p + "norm.b", {D}, InitKind::Zeros);
      push(p + "xproj.w", {D, E}, InitKind::Normal02);
      push_bias(p + "xproj.b", {E}, InitKind::Zeros);
      push(p + "zproj.w", {D, E}, InitKind::Normal02);
      push_bias(p + "zproj.b", {E}, InitKind::Zeros);
      push(p + "conv.w", conv_shape, InitKind::Normal02);
      push_bias(p + "conv.b", {E}, InitKind::Zeros);
      push(p + "q.w", {Eh, QK}, InitKind::Normal02);
      push_bias(p + "q.b", {QK}, InitKind::Zeros);
      push(p + "k.w", {Eh, QK}, InitKind::Normal02);
      push_bias(p + "k.b", {QK}, InitKind::Zeros);
      push(p + "igate.w", {E, H}, InitKind::Normal02);
      push_bias(p + "igate.b", {H}, InitKind::Zeros);
      push(p + "fgate.w", {E, H}, InitKind::Normal02);
      push_bias(p + "fgate.b", {H}, InitKind::ForgetBias);
      push(p + "gn.g", {E}, InitKind::Ones);
      push(p + "gn.b", {E}, InitKind::Zeros);
      push(p + "skip", {E}, InitKind::Ones);
      push(p + "down.w", {E, D}, InitKind::Normal02);
      push_bias(p + "down.b", {D}, InitKind::Zeros);
    }
  }
  push("final_norm.g", {D}, InitKind::Ones);
  push("final_norm.b", {D}, InitKind::Zeros);
  push("head.w", {cfg.pool_dim(), cfg.num_classes}, InitKind::Normal02);
  push_bias("head.b", {cfg.num_classes}, InitKind::Zeros);
  return specs;
}

int64_t count_params(const ViLConfig& cfg) {
  int64_t total = 0;
  for (const auto& sp : describe_params(cfg)) total += shape_numel(sp.shape);
  return total;
}

// ==== model ====================================================================

template <typename T>
ViLModelT<T>::ViLModelT(const ViLConfig& cfg, uint64_t seed) : cfg_(cfg) {
  validate_config(cfg_);
  schedule_ = assign_directions(cfg_.block_design, cfg_.depth);
  drop_rates_ = drop_path_rates(cfg_);
  std::mt19937 rng(static_cast<std::mt19937::result_type>(seed));
  auto specs = describe_params(cfg_);
  params_.reserve(specs.size());
  for (const auto& sp : specs) {
    TensorT<T> t;
    switch (sp.init) {
      case InitKind::Normal02: t = TensorT<T>::randn(sp.shape, rng, T(0.02), true); break;
      case InitKind::Zeros: t = TensorT<T>::zeros(sp.shape, true); break;
      case InitKind::Ones: t = TensorT<T>::full(sp.shape, T(1), true); break;
      case InitKind::ForgetBias: t = TensorT<T>::full(sp.shape, T(3), true); break;
    }
    name_index_[sp.name] = params_.size();
    params_.emplace_back(sp.name, std::move(t));
  }
}

template <typename T>
TensorT<T> ViLModelT<T>::param(const std::string& name) const {
  auto it = name_index_.find(name);
  check<UsageError>(it != name_index_.end(), "no parameter named '", name, "'");
  return params_[it->second].second;
}

template <typename T>
bool ViLModelT<T>::has_param(const std::string& name) const {
  return name_index_.count(name) != 0;
}

template <typename T>
int64_t ViLModelT<T>::total_params() const {
  int64_t total = 0;
  for (const auto& [name, p] : params_) total += p.numel();
  return total;
}

template <typename T>
void ViLModelT<T>::set_all_requires_grad(bool rg) {
  for (auto& [name, p] : params_) p.set_requires_grad(rg);
}

template <typename T>
TensorT<T> ViLModelT<T>::block_param(int64_t block, PathKind dir, const char* leaf) const {
  const int64_t set = param_set_for(cfg_, dir);
  return param("blocks." + std::to_string(block) + ".dir" + std::to_string(set) + "." + leaf);
}

template <typename T>
TensorT<T> ViLModelT<T>::block_bias(int64_t block, PathKind dir, const char* leaf) const {
  return cfg_.use_bias ? block_param(block, dir, leaf) : TensorT<T>{};
}

namespace {

// Lifts a patch-grid permutation to the full token sequence, pinning the
// cls row (if any) in place.
std::vector<int64_t> sequence_permutation(const std::vector<int64_t>& grid_perm, int64_t cls) {
  if (cls < 0) return grid_perm;
  const int64_t n = static_cast<int64_t>(grid_perm.size());
  std::vector<int64_t> full(static_cast<size_t>(n + 1));
  for (int64_t i = 0; i <= n; ++i) {
    if (i == cls) {
      full[static_cast<size_t>(i)] = cls;
      continue;
    }
    const int64_t pi = i - (i > cls ? 1 : 0);
    const int64_t src_patch = grid_perm[static_cast<size_t>(pi)];
    full[static_cast<size_t>(i)] = src_patch + (src_patch >= cls ? 1 : 0);
  }
  return full;
}

}  // namespace

template <typename T>
TensorT<T> ViLModelT<T>::mlstm_branch(const TensorT<T>& x, int64_t block, PathKind dir,
                                      const SeqCtx& ctx, const ForwardOptionsT<T>& opts) const {
  const int64_t L = x.dim(0);
  const int64_t E = cfg_.inner_dim(), H = cfg_.heads;
  const int64_t Eh = E / H, QKh = cfg_.qk_total() / H;

  TensorT<T> h0 = layernorm(x, block_param(block, dir, "norm.g"), block_param(block, dir, "norm.b"));
  TensorT<T> xb = linear(h0, block_param(block, dir, "xproj.w"), block_bias(block, dir, "xproj.b"));
  TensorT<T> zb = linear(h0, block_param(block, dir, "zproj.w"), block_bias(block, dir, "zproj.b"));

  TensorT<T> conv_out;
  if (cfg_.conv_kind == ConvKind::Conv2D3x3) {
    // Column traversals see the transposed grid in their token order.
    const bool col = dir == PathKind::ColForward || dir == PathKind::ColBackward;
    const int64_t gh = col ? ctx.gw : ctx.gh;
    const int64_t gw = col ? ctx.gh : ctx.gw;
    TensorT<T> patches = xb;
    TensorT<T> cls_row;
    if (ctx.cls >= 0) {
      cls_row = slice_rows(xb, ctx.cls, ctx.cls + 1);
      patches = concat_rows<T>({slice_rows(xb, 0, ctx.cls), slice_rows(xb, ctx.cls + 1, L)});
    }
    TensorT<T> cv = conv2d_depthwise(reshape(patches, {gh, gw, E}),
                                     block_param(block, dir, "conv.w"),
                                     block_bias(block, dir, "conv.b"));
    TensorT<T> flat = reshape(cv, {gh * gw, E});
    conv_out = ctx.cls >= 0
                   ? concat_rows<T>({slice_rows(flat, 0, ctx.cls), cls_row,
                                     slice_rows(flat, ctx.cls, gh * gw)})
                   : flat;
  } else {
    conv_out = causal_conv1d(xb, block_param(block, dir, "conv.w"),
                             block_bias(block, dir, "conv.b"));
  }
  TensorT<T> xc = silu(conv_out);

  // Head-wise q/k projections read each head's slice of the conv output.
  TensorT<T> qw = block_param(block, dir, "q.w"), kw = block_param(block, dir, "k.w");
  std::vector<TensorT<T>> qparts, kparts;
  qparts.reserve(static_cast<size_t>(H));
  kparts.reserve(static_cast<size_t>(H));
  for (int64_t h = 0; h < H; ++h) {
    TensorT<T> xc_h = slice_cols(xc, h * Eh, (h + 1) * Eh);
    qparts.push_back(matmul(xc_h, slice_cols(qw, h * QKh, (h + 1) * QKh)));
    kparts.push_back(matmul(xc_h, slice_cols(kw, h * QKh, (h + 1) * QKh)));
  }
  TensorT<T> q = concat_cols(qparts);
  TensorT<T> k = concat_cols(kparts);
  if (cfg_.use_bias) {
    q = add_row_bias(q, block_param(block, dir, "q.b"));
    k = add_row_bias(k, block_param(block, dir, "k.b"));
  }
  TensorT<T> ig = linear(xc, block_param(block, dir, "igate.w"), block_bias(block, dir, "igate.b"));
  TensorT<T> fg = linear(xc, block_param(block, dir, "fgate.w"), block_bias(block, dir, "fgate.b"));

  std::vector<TensorT<T>> houts;
  houts.reserve(static_cast<size_t>(H));
  for (int64_t h = 0; h < H; ++h) {
    TensorT<T> q_h = slice_cols(q, h * QKh, (h + 1) * QKh);
    TensorT<T> k_h = slice_cols(k, h * QKh, (h + 1) * QKh);
    TensorT<T> v_h = slice_cols(xb, h * Eh, (h + 1) * Eh);
    TensorT<T> i_h = reshape(slice_cols(ig, h, h + 1), {L});
    TensorT<T> f_h = reshape(slice_cols(fg, h, h + 1), {L});
    switch (opts.mode) {
      case KernelMode::Parallel:
        houts.push_back(mlstm::forward_parallel(q_h, k_h, v_h, i_h, f_h));
        break;
      case KernelMode::Recurrent:
        houts.push_back(
            mlstm::forward_recurrent(q_h, k_h, v_h, i_h, f_h, mlstm::MLSTMStateT<T>::zero(QKh, Eh)).H);
        break;
      case KernelMode::Chunkwise:
        houts.push_back(mlstm::forward_chunkwise(q_h, k_h, v_h, i_h, f_h, opts.chunk_size,
                                                 mlstm::MLSTMStateT<T>::zero(QKh, Eh)).H);
        break;
    }
  }
  TensorT<T> core = concat_cols(houts);
  TensorT<T> gn = norm_groups(core, block_param(block, dir, "gn.g"), block_param(block, dir, "gn.b"),
                              H, T(1e-6));
  TensorT<T> mid = add(gn, row_scale(xc, block_param(block, dir, "skip")));
  TensorT<T> gated = mul(mid, silu(zb));
  return linear(gated, block_param(block, dir, "down.w"), block_bias(block, dir, "down.b"));
}

template <typename T>
TensorT<T> ViLModelT<T>::run_block(const TensorT<T>& x, int64_t block, const SeqCtx& ctx,
                                   const ForwardOptionsT<T>& opts) const {
  if (opts.stats) opts.stats->blocks_total++;
  double survivor_scale = 1.0;
  const double rate = drop_rates_[static_cast<size_t>(block)];
  if (opts.training && rate > 0.0) {
    check<UsageError>(opts.rng != nullptr, "training forward with drop-path needs an rng");
    auto [skip, sc] = drop_path_decision(rate, true, *opts.rng);
    if (skip) {
      if (opts.stats) opts.stats->blocks_skipped++;
      return x;
    }
    survivor_scale = sc;
  }

  TensorT<T> sum_out;
  for (PathKind dir : schedule_[static_cast<size_t>(block)]) {
    TensorT<T> xp = x;
    std::vector<int64_t> inv;
    if (dir != PathKind::RowForward) {
      auto perm = sequence_permutation(grid_permutation({dir, ctx.gh, ctx.gw}), ctx.cls);
      inv = inverse_permutation(perm);
      xp = apply_permutation(x, perm);
    }
    if (opts.hook) opts.hook(block, dir, xp);
    TensorT<T> br;
    try {
      br = mlstm_branch(xp, block, dir, ctx, opts);
    } catch (const NumericError& e) {
      fail<NumericError>("block ", block, " (", path_kind_name(dir), "): ", e.what());
    }
    TensorT<T> out_dir = dir != PathKind::RowForward ? apply_permutation(br, inv) : br;
    sum_out = sum_out.defined() ? add(sum_out, out_dir) : out_dir;
  }
  if (survivor_scale != 1.0) sum_out = scale(sum_out, static_cast<T>(survivor_scale));
  return add(x, sum_out);
}

template <typename T>
TensorT<T> ViLModelT<T>::pool(const TensorT<T>& x, const SeqCtx& ctx) const {
  const int64_t L = x.dim(0);
  if (cfg_.pooling == Pooling::MiddleCLS) {
    check<ConfigError>(ctx.cls == L / 2, "middle_cls pooling needs the cls token at L/2");
    return slice_rows(x, ctx.cls, ctx.cls + 1);
  }
  check<ConfigError>(ctx.cls < 0, pooling_name(cfg_.pooling), " pooling admits no cls token");
  switch (cfg_.pooling) {
    case Pooling::AVG:
      return mean_rows(x);
    case Pooling::MiddlePatch:
      return slice_rows(x, L / 2, L / 2 + 1);
    case Pooling::BilateralAvg:
      return scale(add(slice_rows(x, 0, 1), slice_rows(x, L - 1, L)), T(0.5));
    case Pooling::BilateralConcat:
      return concat_cols<T>({slice_rows(x, 0, 1), slice_rows(x, L - 1, L)});
    default:
      fail<UsageError>("unhandled pooling");
  }
}

template <typename T>
TensorT<T> ViLModelT<T>::forward(const TensorT<T>& image, const ForwardOptionsT<T>& opts) const {
  check<ShapeError>(image.rank() == 3 && image.dim(2) == 3, "forward expects an {H,W,3} image, got ",
                    shape_str(image.shape()));
  TensorT<T> tokens = patchify(image, cfg_.patch_size, cfg_.patch_stride);
  const int64_t gh = (image.dim(0) - cfg_.patch_size) / cfg_.patch_stride + 1;
  const int64_t gw = (image.dim(1) - cfg_.patch_size) / cfg_.patch_stride + 1;

  TensorT<T> x = linear(tokens, param("patch_embed.w"),
                        cfg_.use_bias ? param("patch_embed.b") : TensorT<T>{});
  if (gh == cfg_.grid_h() && gw == cfg_.grid_w()) {
    x = add(x, param("pos_embed"));
  } else {
    x = add(x, interpolate_positional(param("pos_embed"), cfg_.grid_h(), cfg_.grid_w(), gh, gw));
  }

  SeqCtx ctx{gh, gw, -1};
  if (cfg_.has_cls()) {
    const int64_t n = gh * gw;
    check<ConfigError>(n % 2 == 0, "middle_cls needs an even patch count, got ", n);
    ctx.cls = n / 2;
    x = concat_rows<T>({slice_rows(x, 0, ctx.cls), param("cls"), slice_rows(x, ctx.cls, n)});
  }

  for (int64_t b = 0; b < cfg_.depth; ++b) x = run_block(x, b, ctx, opts);

  x = layernorm(x, param("final_norm.g"), param("final_norm.b"));
  TensorT<T> pooled = pool(x, ctx);
  TensorT<T> logits = linear(pooled, param("head.w"),
                             cfg_.use_bias ? param("head.b") : TensorT<T>{});
  return reshape(logits, {cfg_.num_classes});
}

// ==== instantiations ===========================================================

template TensorT<float> patchify(const TensorT<float>&, int64_t, int64_t);
template TensorT<double> patchify(const TensorT<double>&, int64_t, int64_t);
template TensorT<float> interpolate_positional(const TensorT<float>&, int64_t, int64_t, int64_t,
                                               int64_t);
template TensorT<double> interpolate_positional(const TensorT<double>&, int64_t, int64_t, int64_t,
                                                int64_t);
template class ViLModelT<float>;
template class ViLModelT<double>;

}  // namespace vil
