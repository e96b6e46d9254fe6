#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>
#include <tuple>
#include <vector>

#include "doctest.h"
#include "test_helpers.hpp"
#include "vil/backbone.hpp"
#include "vil/configfile.hpp"
#include "vil/errors.hpp"

using namespace vil;

namespace {
ViLConfig micro() { return builtin_micro_config(); }
}  // namespace

// ==== patchify =================================================================

TEST_CASE("patchify token counts at the reference resolution") {
  ViLConfig t = ViLConfig::tiny();
  CHECK(t.num_patches() == 196);  // 224, patch 16, stride 16
  ViLConfig o = ViLConfig::tiny();
  o.patch_stride = 8;
  CHECK(o.num_patches() == 729);  // overlapping stride 8 -> 27x27
  std::mt19937 rng(1);
  auto img = TensorF64::rand_uniform({224, 224, 3}, rng, 0.0, 1.0);
  CHECK(patchify(img, 16, 16).shape() == Shape{196, 16 * 16 * 3});
  CHECK(patchify(img, 16, 8).shape() == Shape{729, 16 * 16 * 3});
}

TEST_CASE("patchify frozen layout on a tiny image") {
  // 4x4 single-channel-coded image: pixel (y,x) stores y*4+x in channel 0,
  // 100+y*4+x in channel 1, 200+y*4+x in channel 2.
  std::vector<double> px(4 * 4 * 3);
  for (int64_t y = 0; y < 4; ++y)
    for (int64_t x = 0; x < 4; ++x)
      for (int64_t c = 0; c < 3; ++c) px[(y * 4 + x) * 3 + c] = c * 100 + y * 4 + x;
  auto img = TensorF64::from_values({4, 4, 3}, std::move(px));
  auto tok = patchify(img, 2, 2);
  REQUIRE(tok.shape() == Shape{4, 12});
  // Token 1 covers pixels (0,2),(0,3),(1,2),(1,3); values flattened (py,px,c).
  const std::vector<double> want = {2, 102, 202, 3, 103, 203, 6, 106, 206, 7, 107, 207};
  for (int i = 0; i < 12; ++i) CHECK(tok.values()[12 + i] == want[i]);
  // Token order is row-major over the grid.
  CHECK(tok.values()[0 * 12 + 0] == 0);   // token 0 starts at pixel (0,0)
  CHECK(tok.values()[2 * 12 + 0] == 8);   // token 2 starts at pixel (2,0)
  CHECK(tok.values()[3 * 12 + 0] == 10);  // token 3 starts at pixel (2,2)
}

TEST_CASE("patchify rejects non-covering strides") {
  auto img = TensorF64::zeros({5, 5, 3});
  CHECK_THROWS_AS((void)patchify(img, 2, 2), ConfigError);  // 5 not reachable
}

// ==== positional interpolation =================================================

TEST_CASE("positional interpolation is exact on constant and linear fields") {
  // pos laid out on a 2x2 grid, one channel: f(y,x) = 3 + 2y - x.
  auto lin = TensorF64::from_values({4, 1}, {3, 2, 5, 4});
  auto up = interpolate_positional(lin, 2, 2, 4, 4);
  REQUIRE(up.shape() == Shape{16, 1});
  // Align-corners mapping: src = dst * (n-1)/(n2-1); the reproduced field is
  // f(ys, xs) with ys,xs in {0, 1/3, 2/3, 1} scaled to the source extent.
  for (int64_t y = 0; y < 4; ++y)
    for (int64_t x = 0; x < 4; ++x) {
      const double ys = y / 3.0, xs = x / 3.0;
      CHECK(up.values()[y * 4 + x] == doctest::Approx(3 + 2 * ys - xs).epsilon(1e-5));
    }
  auto flat = TensorF64::full({4, 2}, 0.75);
  auto up2 = interpolate_positional(flat, 2, 2, 3, 5);
  for (double v : up2.values()) CHECK(v == doctest::Approx(0.75).epsilon(1e-9));
}

TEST_CASE("positional interpolation onto the same grid is bit-exact") {
  std::mt19937 rng(2);
  auto pos = TensorF64::randn({12, 5}, rng);
  auto same = interpolate_positional(pos, 3, 4, 3, 4);
  CHECK(testutil::max_abs_diff(same, pos) == 0.0);
}

// ==== drop path ================================================================

TEST_CASE("drop_path_decision basics") {
  std::mt19937 rng(3);
  auto [skip0, scale0] = drop_path_decision(0.0, true, rng);
  CHECK_FALSE(skip0);
  CHECK(scale0 == 1.0);
  auto [skip1, scale1] = drop_path_decision(0.4, false, rng);
  CHECK_FALSE(skip1);
  CHECK(scale1 == 1.0);
  CHECK_THROWS_AS((void)drop_path_decision(1.0, true, rng), ConfigError);
  CHECK_THROWS_AS((void)drop_path_decision(-0.1, true, rng), ConfigError);
}

TEST_CASE("drop_path_decision frequency and survivor scaling") {
  std::mt19937 rng(4);
  const double rate = 0.3;
  int skipped = 0;
  for (int i = 0; i < 10000; ++i) {
    auto [skip, scl] = drop_path_decision(rate, true, rng);
    if (skip) ++skipped;
    else CHECK(scl == doctest::Approx(1.0 / 0.7).epsilon(1e-12));
  }
  CHECK(std::abs(skipped / 10000.0 - rate) < 0.012);
}

TEST_CASE("drop path schedules") {
  ViLConfig cfg = micro();
  cfg.depth = 5;
  cfg.drop_path_rate = 0.2;
  cfg.drop_path_schedule = DropPathSchedule::Linear;
  auto lin = drop_path_rates(cfg);
  REQUIRE(lin.size() == 5);
  CHECK(lin[0] == 0.0);
  CHECK(lin[4] == doctest::Approx(0.2));
  CHECK(lin[2] == doctest::Approx(0.1));
  cfg.drop_path_schedule = DropPathSchedule::Constant;
  for (double r : drop_path_rates(cfg)) CHECK(r == doctest::Approx(0.2));
}

// ==== parameter enumeration ====================================================

TEST_CASE("pinned parameter counts for the three presets") {
  CHECK(count_params(ViLConfig::tiny()) == 6999016);
  CHECK(count_params(ViLConfig::small()) == 26383144);
  CHECK(count_params(ViLConfig::base()) == 102310312);
}

TEST_CASE("parameter sharing collapses to one set") {
  ViLConfig uni = micro();
  uni.block_design = BlockDesign::uni();
  ViLConfig shared_quad = micro();
  shared_quad.block_design = BlockDesign::quad(false, true);
  CHECK(count_params(shared_quad) == count_params(uni));
  ViLConfig shared_bi = micro();
  shared_bi.block_design = BlockDesign::bi(false, true);
  CHECK(count_params(shared_bi) == count_params(uni));
  // Unshared simultaneous designs are strictly larger.
  ViLConfig unshared = micro();
  unshared.block_design = BlockDesign::bi(false, false);
  CHECK(count_params(unshared) > count_params(uni));
  // Alternating designs also use a single set per block.
  ViLConfig alt = micro();
  alt.block_design = BlockDesign::bi(true, false);
  CHECK(count_params(alt) == count_params(uni));
}

TEST_CASE("describe_params matches the allocated model exactly") {
  ViLConfig cfg = micro();
  cfg.block_design = BlockDesign::bi(false, false);  // exercise dir1 names
  auto specs = describe_params(cfg);
  ViLModelT<double> model(cfg, 7);
  REQUIRE(specs.size() == model.params().size());
  int64_t total = 0;
  for (size_t i = 0; i < specs.size(); ++i) {
    CHECK(specs[i].name == model.params()[i].first);
    CHECK(specs[i].shape == model.params()[i].second.shape());
    total += shape_numel(specs[i].shape);
  }
  CHECK(total == model.total_params());
  CHECK(total == count_params(cfg));
  CHECK(model.has_param("blocks.0.dir1.q.w"));
  CHECK_FALSE(model.has_param("blocks.0.dir2.q.w"));
}

TEST_CASE("forget gate bias starts at its high-retention init") {
  ViLModelT<double> model(micro(), 11);
  auto fb = model.param("blocks.0.dir0.fgate.b");
  for (double v : fb.values()) CHECK(v == doctest::Approx(3.0));
  auto skip = model.param("blocks.0.dir0.skip");
  for (double v : skip.values()) CHECK(v == doctest::Approx(1.0));
  auto nb = model.param("blocks.0.dir0.norm.b");
  for (double v : nb.values()) CHECK(v == doctest::Approx(0.0));
}

// ==== forward pass =============================================================

TEST_CASE("forward produces logits and is deterministic in eval mode") {
  ViLConfig cfg = micro();
  ViLModelT<double> a(cfg, 21), b(cfg, 21);
  std::mt19937 rng(5);
  auto img = TensorF64::rand_uniform({32, 32, 3}, rng, 0.0, 1.0);
  auto la = a.forward(img);
  auto lb = b.forward(img);
  REQUIRE(la.shape() == Shape{cfg.num_classes});
  CHECK(all_finite(la.values()));
  for (size_t i = 0; i < la.values().size(); ++i) CHECK(la.values()[i] == lb.values()[i]);
  // Same model twice: bit-identical logits.
  auto la2 = a.forward(img);
  for (size_t i = 0; i < la.values().size(); ++i) CHECK(la.values()[i] == la2.values()[i]);
}

TEST_CASE("kernel mode does not change eval predictions") {
  ViLConfig cfg = micro();
  ViLModelT<double> model(cfg, 22);
  std::mt19937 rng(6);
  auto img = TensorF64::rand_uniform({32, 32, 3}, rng, 0.0, 1.0);
  ForwardOptionsT<double> par, rec, chk;
  rec.mode = KernelMode::Recurrent;
  chk.mode = KernelMode::Chunkwise;
  chk.chunk_size = 3;
  auto lp = model.forward(img, par);
  auto lr = model.forward(img, rec);
  auto lc = model.forward(img, chk);
  CHECK(testutil::max_abs_diff(lp, lr) < 1e-9);
  CHECK(testutil::max_abs_diff(lp, lc) < 1e-9);
}

TEST_CASE("off-native resolutions reuse interpolated positional tables") {
  ViLConfig cfg = micro();
  ViLModelT<double> model(cfg, 23);
  std::mt19937 rng(7);
  auto img = TensorF64::rand_uniform({64, 64, 3}, rng, 0.0, 1.0);  // 4x4 grid vs native 2x2
  auto logits = model.forward(img);
  REQUIRE(logits.shape() == Shape{cfg.num_classes});
  CHECK(all_finite(logits.values()));
  CHECK_THROWS_AS((void)model.forward(TensorF64::zeros({33, 32, 3})), ConfigError);
}

TEST_CASE("hook exposes permuted sequences whose round trip restores order") {
  ViLConfig cfg = micro();
  cfg.block_design = BlockDesign::bi(false, false);
  ViLModelT<double> model(cfg, 24);
  std::mt19937 rng(8);
  auto img = TensorF64::rand_uniform({32, 32, 3}, rng, 0.0, 1.0);

  std::vector<std::tuple<int64_t, PathKind, TensorF64>> seen;
  ForwardOptionsT<double> opts;
  opts.hook = [&](int64_t block, PathKind dir, const TensorF64& xp) {
    seen.emplace_back(block, dir, xp);
  };
  (void)model.forward(img, opts);
  REQUIRE(seen.size() == static_cast<size_t>(2 * cfg.depth));
  for (int64_t b = 0; b < cfg.depth; ++b) {
    auto& [b0, d0, fwd] = seen[2 * b];
    auto& [b1, d1, bwd] = seen[2 * b + 1];
    CHECK(b0 == b);
    CHECK(b1 == b);
    CHECK(d0 == PathKind::RowForward);
    CHECK(d1 == PathKind::RowBackward);
    // Same block input, two orders: undoing the backward order recovers the
    // forward view bit-exactly.
    auto perm = grid_permutation({PathKind::RowBackward, cfg.grid_h(), cfg.grid_w()});
    auto undone = apply_permutation(bwd, inverse_permutation(perm));
    CHECK(testutil::max_abs_diff(undone, fwd) == 0.0);
  }
}

TEST_CASE("the cls token stays pinned under every traversal") {
  ViLConfig cfg = micro();
  cfg.pooling = Pooling::MiddleCLS;
  cfg.block_design = BlockDesign::quad(false, false);
  validate_config(cfg);
  ViLModelT<double> model(cfg, 25);
  std::mt19937 rng(9);
  auto img = TensorF64::rand_uniform({32, 32, 3}, rng, 0.0, 1.0);

  const int64_t cls_pos = cfg.num_patches() / 2;  // grid 2x2 -> cls at row 2
  std::vector<TensorF64> views;
  ForwardOptionsT<double> opts;
  opts.hook = [&](int64_t block, PathKind, const TensorF64& xp) {
    if (block == 0) views.push_back(xp);
  };
  (void)model.forward(img, opts);
  REQUIRE(views.size() == 4);
  const auto& base = views[0];  // RowForward view == canonical order
  for (const auto& view : views) {
    REQUIRE(view.shape() == base.shape());
    for (int64_t cch = 0; cch < view.dim(1); ++cch)
      CHECK(view.values()[cls_pos * view.dim(1) + cch] ==
            base.values()[cls_pos * base.dim(1) + cch]);
  }
}

TEST_CASE("pooling variants feed the head the advertised widths") {
  for (auto pooling : {Pooling::AVG, Pooling::MiddlePatch, Pooling::MiddleCLS,
                       Pooling::BilateralAvg, Pooling::BilateralConcat}) {
    ViLConfig cfg = micro();
    cfg.pooling = pooling;
    validate_config(cfg);
    ViLModelT<double> model(cfg, 31);
    auto head = model.param("head.w");
    const int64_t want = pooling == Pooling::BilateralConcat ? 2 * cfg.dim : cfg.dim;
    CHECK(cfg.pool_dim() == want);
    CHECK(head.dim(0) == want);
    std::mt19937 rng(10);
    auto img = TensorF64::rand_uniform({32, 32, 3}, rng, 0.0, 1.0);
    auto logits = model.forward(img);
    REQUIRE(logits.shape() == Shape{cfg.num_classes});
    CHECK(all_finite(logits.values()));
  }
}

TEST_CASE("scaling the head scales logits without moving the argmax") {
  ViLConfig cfg = micro();
  ViLModelT<double> model(cfg, 26);
  std::mt19937 rng(11);
  auto img = TensorF64::rand_uniform({32, 32, 3}, rng, 0.0, 1.0);
  auto before = model.forward(img);
  const double c = 2.5;
  for (const char* name : {"head.w", "head.b"}) {
    auto p = model.param(name);
    for (auto& v : p.values_mut()) v *= c;
  }
  auto after = model.forward(img);
  for (size_t i = 0; i < before.values().size(); ++i)
    CHECK(after.values()[i] == doctest::Approx(c * before.values()[i]).epsilon(1e-9));
  CHECK(argmax(before.values()) == argmax(after.values()));
}

TEST_CASE("training mode with drop path skips whole blocks") {
  ViLConfig cfg = micro();
  cfg.depth = 6;
  cfg.drop_path_rate = 0.8;
  cfg.drop_path_schedule = DropPathSchedule::Constant;
  ViLModelT<double> model(cfg, 27);
  std::mt19937 rng(12);
  auto img = TensorF64::rand_uniform({32, 32, 3}, rng, 0.0, 1.0);
  ForwardOptionsT<double> opts;
  opts.training = true;
  std::mt19937 droprng(13);
  opts.rng = &droprng;
  ForwardStats stats;
  opts.stats = &stats;
  (void)model.forward(img, opts);
  CHECK(stats.blocks_total == 6);
  CHECK(stats.blocks_skipped > 0);  // rate .8 over 6 blocks: vanishing miss chance
  // Training with a positive rate but no rng is a usage error.
  ForwardOptionsT<double> bad;
  bad.training = true;
  CHECK_THROWS_AS((void)model.forward(img, bad), UsageError);
  // Eval mode ignores drop path entirely.
  ForwardStats es;
  ForwardOptionsT<double> ev;
  ev.stats = &es;
  (void)model.forward(img, ev);
  CHECK(es.blocks_skipped == 0);
}

TEST_CASE("fd: parameter sharing accumulates gradients from every direction") {
  ViLConfig cfg = micro();
  cfg.block_design = BlockDesign::bi(false, true);  // both directions, one set
  cfg.depth = 1;
  cfg.dim = 4;
  cfg.heads = 1;
  validate_config(cfg);
  ViLModelT<double> model(cfg, 28);
  std::mt19937 rng(14);
  auto img = TensorF64::rand_uniform({32, 32, 3}, rng, 0.0, 1.0);

  std::vector<TensorF64> leaves;
  for (const char* name : {"blocks.0.dir0.q.w", "blocks.0.dir0.xproj.w", "blocks.0.dir0.skip"})
    leaves.push_back(model.param(name));
  auto fn = [&] { return softmax_cross_entropy(model.forward(img), 1); };
  CHECK(testutil::fd_gradcheck(leaves, fn) < 1e-5);
}

TEST_CASE("causal 1-d conv variant runs end to end") {
  ViLConfig cfg = micro();
  cfg.conv_kind = ConvKind::Causal1D;
  cfg.conv1d_kernel = 4;
  validate_config(cfg);
  ViLModelT<double> model(cfg, 29);
  std::mt19937 rng(15);
  auto img = TensorF64::rand_uniform({32, 32, 3}, rng, 0.0, 1.0);
  auto logits = model.forward(img);
  CHECK(all_finite(logits.values()));
  // Conv kernel parameters take the {K, E} layout in this variant.
  auto k = model.param("blocks.0.dir0.conv.w");
  CHECK(k.shape() == Shape{4, cfg.inner_dim()});
}

TEST_CASE("config validation rejections") {
  ViLConfig odd = micro();
  odd.pooling = Pooling::MiddleCLS;
  odd.image_size = 48;  // 3x3 grid -> 9 patches, odd
  CHECK_THROWS_AS(validate_config(odd), ConfigError);
  ViLConfig bad_heads = micro();
  bad_heads.heads = 3;  // inner dim 16 not divisible
  CHECK_THROWS_AS(validate_config(bad_heads), ConfigError);
  ViLConfig bad_rate = micro();
  bad_rate.drop_path_rate = 1.0;
  CHECK_THROWS_AS(validate_config(bad_rate), ConfigError);
  ViLConfig bad_grid = micro();
  bad_grid.image_size = 30;  // stride does not cover
  CHECK_THROWS_AS(validate_config(bad_grid), ConfigError);
}
