#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <random>
#include <sstream>

#include "doctest.h"
#include "test_helpers.hpp"
#include "vil/backbone.hpp"
#include "vil/configfile.hpp"
#include "vil/errors.hpp"
#include "vil/flops.hpp"

using namespace vil;

// ==== kernel counts ============================================================

TEST_CASE("recurrent count frozen formula") {
  // L * (d_qk*d_v + d_qk + d_v)
  CHECK(flops_mlstm(10, 4, 8, KernelMode::Recurrent) == 10 * (32 + 4 + 8));
  CHECK(flops_mlstm(1, 1, 1, KernelMode::Recurrent) == 3);
}

TEST_CASE("chunkwise degenerates exactly to recurrent at C=1") {
  for (int64_t L : {1, 2, 7, 64})
    for (int64_t d : {1, 4, 32})
      CHECK(flops_mlstm(L, d, d, KernelMode::Chunkwise, 1) ==
            flops_mlstm(L, d, d, KernelMode::Recurrent));
  // Mixed dims too.
  CHECK(flops_mlstm(13, 3, 7, KernelMode::Chunkwise, 1) ==
        flops_mlstm(13, 3, 7, KernelMode::Recurrent));
}

TEST_CASE("chunkwise degenerates exactly to parallel at C=L") {
  for (int64_t L : {1, 5, 48, 196})
    CHECK(flops_mlstm(L, 16, 32, KernelMode::Chunkwise, L) ==
          flops_mlstm(L, 16, 32, KernelMode::Parallel));
}

TEST_CASE("ragged final chunks are counted") {
  // L=10, C=4: chunks of 4,4,2 -> 10+10+3 score rows times (dq+dv), 3 state
  // products.
  const int64_t dq = 2, dv = 3;
  const int64_t want = (10 + 10 + 3) * (dq + dv) + 3 * dq * dv;
  CHECK(flops_mlstm(10, dq, dv, KernelMode::Chunkwise, 4) == want);
}

TEST_CASE("masked score/value work is exactly half the unmasked count") {
  for (int64_t L : {2, 8, 64, 196}) {
    auto b = flops_mlstm_parallel_breakdown(L, 24, 48);
    CHECK(b.unmasked_score_value == L * L * (24 + 48));
    CHECK(2 * b.score_value == b.unmasked_score_value);
    CHECK(b.score_value + b.normalization == b.total);
    CHECK(b.total == flops_mlstm(L, 24, 48, KernelMode::Parallel));
  }
}

TEST_CASE("chunk sweep exposes an interior minimum") {
  const int64_t L = 256, d = 64;
  auto sweep = chunk_sweep(L, d, d);
  REQUIRE(sweep.size() == static_cast<size_t>(L));
  // Ends are the exact degeneracies.
  CHECK(sweep.front().second == flops_mlstm(L, d, d, KernelMode::Recurrent));
  CHECK(sweep.back().second == flops_mlstm(L, d, d, KernelMode::Parallel));
  auto best = *std::min_element(sweep.begin(), sweep.end(),
                                [](auto a, auto b) { return a.second < b.second; });
  CHECK(best.second < sweep.front().second);
  CHECK(best.second < sweep.back().second);
  CHECK(best.first > 1);
  CHECK(best.first < L);
}

TEST_CASE("counts are monotone in length and dims") {
  for (auto mode : {KernelMode::Recurrent, KernelMode::Parallel}) {
    int64_t prev = 0;
    for (int64_t L : {1, 2, 4, 8, 32, 128}) {
      int64_t cur = flops_mlstm(L, 16, 16, mode);
      CHECK(cur > prev);
      prev = cur;
    }
  }
  CHECK(flops_mlstm(64, 32, 16, KernelMode::Parallel) <
        flops_mlstm(64, 33, 16, KernelMode::Parallel));
  CHECK(flops_mlstm(64, 32, 16, KernelMode::Chunkwise, 8) <
        flops_mlstm(64, 32, 17, KernelMode::Chunkwise, 8));
}

TEST_CASE("kernel count argument validation") {
  CHECK_THROWS_AS((void)flops_mlstm(8, 4, 4, KernelMode::Chunkwise, 0), ConfigError);
  CHECK_THROWS_AS((void)flops_mlstm(8, 4, 4, KernelMode::Chunkwise, 9), ConfigError);
  CHECK_THROWS_AS((void)flops_mlstm(0, 4, 4, KernelMode::Parallel), ConfigError);
}

// ==== whole-model estimates ====================================================

TEST_CASE("pinned preset totals at the reference resolution") {
  const int64_t tiny = estimate_model_flops(ViLConfig::tiny(), 224).total;
  const int64_t small = estimate_model_flops(ViLConfig::small(), 224).total;
  const int64_t base = estimate_model_flops(ViLConfig::base(), 224).total;
  // Within +/-30% of the published 1.5/5.1/18.6 GFLOPs scale anchors.
  CHECK(tiny > 0.7 * 1.5e9);
  CHECK(tiny < 1.3 * 1.5e9);
  CHECK(small > 0.7 * 5.1e9);
  CHECK(small < 1.3 * 5.1e9);
  CHECK(base > 0.7 * 18.6e9);
  CHECK(base < 1.3 * 18.6e9);
}

TEST_CASE("doubling the resolution scales the kernel item by ~16") {
  auto at224 = estimate_model_flops(ViLConfig::tiny(), 224);
  auto at448 = estimate_model_flops(ViLConfig::tiny(), 448);
  auto item = [](const FlopsReport& r) {
    for (const auto& it : r.items)
      if (it.name == "block.mlstm") return it.macs;
    FAIL("missing block.mlstm item");
    return int64_t{0};
  };
  const double ratio = static_cast<double>(item(at448)) / static_cast<double>(item(at224));
  CHECK(ratio > 15.5);
  CHECK(ratio < 16.5);
}

TEST_CASE("report totals always equal the item sum") {
  for (auto mode : {KernelMode::Parallel, KernelMode::Recurrent, KernelMode::Chunkwise}) {
    auto rep = estimate_model_flops(ViLConfig::tiny(), 224, mode, 49);
    int64_t sum = 0;
    for (const auto& it : rep.items) sum += it.macs;
    CHECK(sum == rep.total);
  }
}

TEST_CASE("recurrent-mode model estimate is cheaper than parallel at 224") {
  const auto par = estimate_model_flops(ViLConfig::tiny(), 224, KernelMode::Parallel).total;
  const auto rec = estimate_model_flops(ViLConfig::tiny(), 224, KernelMode::Recurrent).total;
  CHECK(rec < par);  // L=196 > d_qk+d_v regime
}

// ==== stochastic-depth expectation =============================================

TEST_CASE("drop-path expectation: rate 0 unchanged, constant 0.5 halves blocks") {
  auto rep = estimate_model_flops(ViLConfig::tiny(), 224);
  auto same = expected_flops_with_droppath(rep, 0.0, DropPathSchedule::Constant, 24);
  CHECK(same.total == rep.total);
  auto half = expected_flops_with_droppath(rep, 0.5, DropPathSchedule::Constant, 24);
  for (size_t i = 0; i < rep.items.size(); ++i) {
    if (rep.items[i].per_block)
      CHECK(half.items[i].macs == (rep.items[i].macs + 1) / 2);  // llround of x/2
    else
      CHECK(half.items[i].macs == rep.items[i].macs);
  }
  CHECK_THROWS_AS((void)expected_flops_with_droppath(rep, 1.0, DropPathSchedule::Constant, 24),
                  ConfigError);
}

TEST_CASE("linear schedule has mean survival 1 - rate/2") {
  auto rep = estimate_model_flops(ViLConfig::tiny(), 224);
  auto lin = expected_flops_with_droppath(rep, 0.2, DropPathSchedule::Linear, 24);
  for (size_t i = 0; i < rep.items.size(); ++i)
    if (rep.items[i].per_block) {
      const double want = 0.9 * static_cast<double>(rep.items[i].macs);
      CHECK(std::abs(lin.items[i].macs - want) <= 1.0);
    }
}

// ==== counter consistency ======================================================

TEST_CASE("instrumented counters agree with the analytic estimate within 5%") {
  ViLConfig cfg;
  cfg.image_size = 64;
  cfg.patch_size = 8;
  cfg.patch_stride = 8;
  cfg.dim = 64;
  cfg.depth = 2;
  cfg.heads = 4;
  cfg.num_classes = 10;
  cfg.block_design = BlockDesign::bi(true, false);
  cfg.pooling = Pooling::BilateralConcat;
  validate_config(cfg);

  ViLModel model(cfg, 17);
  std::mt19937 rng(18);
  auto img = Tensor::rand_uniform({64, 64, 3}, rng, 0.0f, 1.0f);
  NoGradGuard ng;
  opcount::reset();
  (void)model.forward(img);
  const auto counted = static_cast<double>(opcount::macs());
  const auto analytic = static_cast<double>(estimate_model_flops(cfg, 64).total);
  CHECK(std::abs(counted - analytic) / analytic < 0.05);
}

// ==== serialization ============================================================

TEST_CASE("csv and table forms carry every component") {
  auto rep = estimate_model_flops(ViLConfig::tiny(), 224);
  const std::string csv = flops_report_csv(rep);
  CHECK(csv.rfind("component,count\n", 0) == 0);
  std::istringstream is(csv);
  std::string line;
  size_t rows = 0;
  bool saw_total = false;
  while (std::getline(is, line)) {
    if (line.rfind("total,", 0) == 0) {
      saw_total = true;
      CHECK(line == "total," + std::to_string(rep.total));
    }
    ++rows;
  }
  CHECK(saw_total);
  CHECK(rows == rep.items.size() + 2);  // header + items + total

  const std::string table = flops_report_table(rep);
  for (const auto& it : rep.items) CHECK(table.find(it.name) != std::string::npos);
}
