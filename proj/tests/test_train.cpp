#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "test_helpers.hpp"
#include "vil/configfile.hpp"
#include "vil/dataset.hpp"
#include "vil/errors.hpp"
#include "vil/flops.hpp"
#include "vil/serialize.hpp"
#include "vil/train.hpp"
#include "vil/verify.hpp"

using namespace vil;

namespace {

std::string scratch(const std::string& name) {
  const auto dir = std::filesystem::path("vil_test_scratch") / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

TrainConfig fast_recipe(const std::string& out) {
  TrainConfig cfg;
  cfg.model = builtin_micro_config();
  cfg.model.num_classes = 4;
  cfg.data.image_size = 32;
  cfg.data.num_classes = 4;
  cfg.data.marker_size = 16;
  cfg.data.train_size = 16;
  cfg.data.eval_size = 8;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.base_lr = 1e-3;
  cfg.lr_scale_divisor = 8.0;
  cfg.warmup_epochs = 1.0;
  cfg.eval_every = 2;
  cfg.seed = 5;
  cfg.out_dir = out;
  return cfg;
}

}  // namespace

// ==== config files =============================================================

TEST_CASE("ini parsing: sections, comments, trimming") {
  const std::string text =
      "# leading comment\n"
      "[model]\n"
      "dim = 64   ; trailing comment\n"
      "depth=2\n"
      "\n"
      "[train]\n"
      "base_lr = 0.005 # another\n";
  auto entries = parse_config_text(text, "inline");
  REQUIRE(entries.size() == 3);
  CHECK(entries[0].key == "model.dim");
  CHECK(entries[0].value == "64");
  CHECK(entries[0].line == 3);
  CHECK(entries[1].key == "model.depth");
  CHECK(entries[2].key == "train.base_lr");
  CHECK(entries[2].value == "0.005");
}

TEST_CASE("ini parsing rejects malformed input with line numbers") {
  auto has_line = [](const char* text, const char* needle) {
    try {
      (void)train_config_from_entries(parse_config_text(text, "inline"));
      return std::string("no error");
    } catch (const ConfigError& e) {
      std::string msg = e.what();
      return msg.find(needle) != std::string::npos ? std::string("ok") : msg;
    }
  };
  CHECK(has_line("[model]\ndim = 64\ndim = 32\n", "inline:3:") == "ok");     // duplicate
  CHECK(has_line("[model]\nwidth = 64\n", "inline:2:") == "ok");             // unknown key
  CHECK(has_line("dim = 64\n", "inline:1:") == "ok");                        // before section
  CHECK(has_line("[model]\ndim = banana\n", "inline:2:") == "ok");           // bad int
  CHECK_THROWS_AS((void)parse_config_text("[model\ndim=1\n", "inline"), ConfigError);
  CHECK_THROWS_AS((void)parse_config_text("[model]\njust words\n", "inline"), ConfigError);
}

TEST_CASE("train config defaults and overrides") {
  TrainConfig def = train_config_from_entries({});
  CHECK(def.weight_decay == doctest::Approx(0.05));
  CHECK(def.grad_clip_norm == doctest::Approx(1.0));
  CHECK(def.lr_scale_divisor == doctest::Approx(1024.0));
  CHECK(def.model.dim == 192);

  const std::string text =
      "[model]\n"
      "dim = 32\n"
      "depth = 4\n"
      "heads = 2\n"
      "image_size = 32\n"
      "patch_size = 16\n"
      "patch_stride = 16\n"
      "num_classes = 8\n"
      "design = quad\n"
      "alternating = true\n"
      "pooling = middle_patch\n"
      "conv = causal1d\n"
      "[data]\n"
      "image_size = 32\n"
      "num_classes = 8\n"
      "[train]\n"
      "epochs = 3\n"
      "batch_size = 16\n"
      "base_lr = 0.002\n"
      "seed = 9\n";
  TrainConfig cfg = train_config_from_entries(parse_config_text(text, "inline"));
  CHECK(cfg.model.dim == 32);
  CHECK(cfg.model.block_design.directions.size() == 4);
  CHECK(cfg.model.block_design.alternating);
  CHECK(cfg.model.pooling == Pooling::MiddlePatch);
  CHECK(cfg.model.conv_kind == ConvKind::Causal1D);
  CHECK(cfg.seed == 9);
  CHECK(cfg.steps_per_epoch() == (512 + 15) / 16);
  CHECK(cfg.total_steps() == 3 * cfg.steps_per_epoch());
  CHECK(cfg.peak_lr() == doctest::Approx(0.002 * 16 / 1024.0));
}

TEST_CASE("train config validation failures") {
  CHECK_THROWS_AS((void)train_config_from_entries(
                      parse_config_text("[train]\nbatch_size = 0\n", "inline")),
                  ConfigError);
  CHECK_THROWS_AS((void)train_config_from_entries(
                      parse_config_text("[model]\ndrop_path_rate = 1.5\n", "inline")),
                  ConfigError);
  CHECK_THROWS_AS((void)train_config_from_entries(
                      parse_config_text("[model]\ndrop_path_schedule = banana\n", "inline")),
                  ConfigError);
}

// ==== synthetic dataset ========================================================

TEST_CASE("marker intensities round-trip for every class") {
  for (int64_t k : {2, 8, 127})
    for (int64_t v = 0; v < k; ++v) CHECK(marker_value(marker_intensity(v, k), k) == v);
  CHECK_THROWS_AS((void)marker_intensity(0, 200), ConfigError);  // > 127 classes
}

TEST_CASE("synthesis is deterministic per (seed, index)") {
  DatasetSpec spec;
  auto a = synthesize_corners(spec, 7, 32);
  auto b = synthesize_corners(spec, 7, 32);
  CHECK(a.pixels == b.pixels);
  CHECK(a.labels == b.labels);
  auto c = synthesize_corners(spec, 8, 32);
  CHECK(a.pixels != c.pixels);
  // Prefixes agree: sample i depends only on (seed, i).
  auto longer = synthesize_corners(spec, 7, 48);
  CHECK(std::equal(a.pixels.begin(), a.pixels.end(), longer.pixels.begin()));
}

TEST_CASE("labels re-derive from the corner pixels alone") {
  DatasetSpec spec;
  auto ds = synthesize_corners(spec, 11, 64);
  for (int64_t i = 0; i < ds.count; ++i)
    CHECK(derive_label_from_pixels(ds, i, spec.marker_size, spec.num_classes) == ds.labels[i]);
}

TEST_CASE("class balance within 2% over a 10k draw") {
  DatasetSpec spec;
  auto ds = synthesize_corners(spec, 13, 10000);
  std::vector<int64_t> counts(spec.num_classes, 0);
  for (int64_t l : ds.labels) ++counts[static_cast<size_t>(l)];
  const double ideal = 10000.0 / static_cast<double>(spec.num_classes);
  for (int64_t c : counts) CHECK(std::abs(c - ideal) / 10000.0 < 0.02);
}

TEST_CASE("image tensors are scaled to [0,1]") {
  DatasetSpec spec;
  auto ds = synthesize_corners(spec, 17, 4);
  auto t = ds.image_tensor<float>(2);
  REQUIRE(t.shape() == Shape{32, 32, 3});
  for (float v : t.values()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  CHECK(t.values()[0] == doctest::Approx(ds.image(2)[0] / 255.0f));
}

TEST_CASE("dataset files round-trip byte-exactly") {
  const std::string dir = scratch("dataset_rt");
  DatasetSpec spec;
  auto ds = synthesize_corners(spec, 19, 12);
  save_dataset(ds, dir + "/images.bin", dir + "/labels.txt");
  auto back = load_dataset(dir + "/images.bin", dir + "/labels.txt");
  CHECK(back.count == ds.count);
  CHECK(back.height == ds.height);
  CHECK(back.pixels == ds.pixels);
  CHECK(back.labels == ds.labels);
  // Corrupted magic and truncation are hard errors.
  {
    std::string bytes = slurp(dir + "/images.bin");
    bytes[0] = 'X';
    std::ofstream os(dir + "/bad.bin", std::ios::binary);
    os << bytes;
  }
  CHECK_THROWS_AS((void)load_dataset(dir + "/bad.bin", dir + "/labels.txt"), ConfigError);
  {
    std::string bytes = slurp(dir + "/images.bin");
    std::ofstream os(dir + "/short.bin", std::ios::binary);
    os << bytes.substr(0, bytes.size() / 2);
  }
  CHECK_THROWS_AS((void)load_dataset(dir + "/short.bin", dir + "/labels.txt"), ConfigError);
}

// ==== checkpoints ==============================================================

TEST_CASE("fnv1a64 frozen reference values") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("checkpoint round-trip is bit-exact and logits survive") {
  const std::string dir = scratch("ckpt_rt");
  ViLConfig cfg = builtin_micro_config();
  ViLModel model(cfg, 33);
  std::mt19937 rng(34);
  auto img = Tensor::rand_uniform({32, 32, 3}, rng, 0.0f, 1.0f);
  auto before = model.forward(img);

  save_checkpoint(dir + "/m.bin", model);
  ViLModel other(cfg, 999);  // different init, same architecture
  load_checkpoint(dir + "/m.bin", other);
  for (size_t i = 0; i < model.params().size(); ++i) {
    auto a = model.params()[i].second.values();
    auto b = other.params()[i].second.values();
    REQUIRE(a.size() == b.size());
    for (size_t j = 0; j < a.size(); ++j) CHECK(a[j] == b[j]);
  }
  auto after = other.forward(img);
  for (size_t i = 0; i < before.values().size(); ++i)
    CHECK(before.values()[i] == after.values()[i]);

  // Saving the loaded model reproduces the file byte-for-byte.
  save_checkpoint(dir + "/m2.bin", other);
  CHECK(slurp(dir + "/m.bin") == slurp(dir + "/m2.bin"));
}

TEST_CASE("checkpoints refuse mismatched configs and bad files") {
  const std::string dir = scratch("ckpt_bad");
  ViLConfig cfg = builtin_micro_config();
  ViLModel model(cfg, 35);
  save_checkpoint(dir + "/m.bin", model);

  ViLConfig other_cfg = cfg;
  other_cfg.num_classes = 5;
  ViLModel other(other_cfg, 36);
  CHECK_THROWS_AS(load_checkpoint(dir + "/m.bin", other), ConfigError);

  std::string bytes = slurp(dir + "/m.bin");
  bytes[2] = 'X';
  std::ofstream(dir + "/bad.bin", std::ios::binary) << bytes;
  CHECK_THROWS_AS((void)read_checkpoint(dir + "/bad.bin"), ConfigError);
  std::ofstream(dir + "/short.bin", std::ios::binary) << bytes.substr(0, 20);
  CHECK_THROWS_AS((void)read_checkpoint(dir + "/short.bin"), ConfigError);
}

// ==== learning-rate schedule ===================================================

TEST_CASE("lr schedule endpoints and monotonicity") {
  const double peak = 1.0, end = 0.01;
  CHECK(lr_at_step(0, 100, 10, peak, end) == 0.0);
  CHECK(lr_at_step(10, 100, 10, peak, end) == doctest::Approx(peak));
  CHECK(lr_at_step(100, 100, 10, peak, end) == doctest::Approx(end));
  CHECK(lr_at_step(500, 100, 10, peak, end) == doctest::Approx(end));
  for (int64_t s = 1; s <= 10; ++s)
    CHECK(lr_at_step(s, 100, 10, peak, end) >= lr_at_step(s - 1, 100, 10, peak, end));
  for (int64_t s = 11; s <= 100; ++s)
    CHECK(lr_at_step(s, 100, 10, peak, end) <= lr_at_step(s - 1, 100, 10, peak, end));
  // Degenerate: no cosine segment.
  CHECK(lr_at_step(10, 10, 10, peak, end) == doctest::Approx(peak));
  CHECK_THROWS_AS((void)lr_at_step(-1, 10, 5, peak, end), UsageError);
}

// ==== metrics ==================================================================

TEST_CASE("metrics csv header and row formatting are frozen") {
  CHECK(std::string(kMetricsHeader) == "step,loss,train_acc,eval_acc,lr,ms_per_step");
  MetricsRecord r;
  r.step = 7;
  r.loss = 0.5;
  r.train_acc = 0.25;
  r.eval_acc = -1.0;
  r.lr = 0.001;
  r.ms_per_step = 2.5;
  const std::string csv = metrics_csv({r});
  CHECK(csv == std::string(kMetricsHeader) + "\n7,0.500000,0.2500,-1.0000,0.001,2.500\n");
}

// ==== training loop ============================================================

TEST_CASE("toy training writes metrics and a loadable checkpoint") {
  const std::string dir = scratch("train_smoke");
  TrainConfig cfg = fast_recipe(dir);
  TrainResult res = train_model(cfg);
  CHECK(res.steps_run == cfg.total_steps());
  REQUIRE(res.metrics.size() == static_cast<size_t>(res.steps_run));
  for (const auto& m : res.metrics) {
    CHECK(std::isfinite(m.loss));
    CHECK(m.lr >= 0);
  }
  // eval_acc carries -1 until the first eval step.
  CHECK(res.metrics[0].eval_acc == -1.0);
  CHECK(res.metrics[1].eval_acc >= 0.0);

  const std::string csv = slurp(res.metrics_path);
  CHECK(csv.rfind(std::string(kMetricsHeader) + "\n", 0) == 0);

  ViLModel model(cfg.model, 1234);
  load_checkpoint(res.checkpoint_path, model);
  auto eval_set = synthesize_corners(cfg.data, mix_seed(cfg.seed, 13), cfg.data.eval_size);
  CHECK(evaluate(model, eval_set) == doctest::Approx(res.final_eval_acc));
}

TEST_CASE("same seed reproduces everything except wall-clock timings") {
  TrainConfig a = fast_recipe(scratch("train_det_a"));
  TrainConfig b = fast_recipe(scratch("train_det_b"));
  TrainResult ra = train_model(a);
  TrainResult rb = train_model(b);
  REQUIRE(ra.metrics.size() == rb.metrics.size());
  for (size_t i = 0; i < ra.metrics.size(); ++i) {
    CHECK(ra.metrics[i].step == rb.metrics[i].step);
    CHECK(ra.metrics[i].loss == rb.metrics[i].loss);
    CHECK(ra.metrics[i].train_acc == rb.metrics[i].train_acc);
    CHECK(ra.metrics[i].eval_acc == rb.metrics[i].eval_acc);
    CHECK(ra.metrics[i].lr == rb.metrics[i].lr);
  }
  CHECK(ra.final_eval_acc == rb.final_eval_acc);
  CHECK(slurp(ra.checkpoint_path) == slurp(rb.checkpoint_path));
}

TEST_CASE("zero epochs checkpoints the initialization bit-for-bit") {
  const std::string dir = scratch("train_zero");
  TrainConfig cfg = fast_recipe(dir);
  cfg.epochs = 0;
  TrainResult res = train_model(cfg);
  CHECK(res.steps_run == 0);
  ViLModel loaded(cfg.model, 4321);
  load_checkpoint(res.checkpoint_path, loaded);
  ViLModel init(cfg.model, mix_seed(cfg.seed, 17));
  for (size_t i = 0; i < init.params().size(); ++i) {
    auto a = init.params()[i].second.values();
    auto b = loaded.params()[i].second.values();
    for (size_t j = 0; j < a.size(); ++j) CHECK(a[j] == b[j]);
  }
}

TEST_CASE("model/data mismatches are rejected up front") {
  TrainConfig cfg = fast_recipe(scratch("train_mismatch"));
  cfg.data.num_classes = 6;  // model says 4
  CHECK_THROWS_AS((void)train_model(cfg), ConfigError);
  TrainConfig cfg2 = fast_recipe(scratch("train_mismatch2"));
  cfg2.data.image_size = 64;
  CHECK_THROWS_AS((void)train_model(cfg2), ConfigError);
}

TEST_CASE("diverging runs abort on the first non-finite loss") {
  const std::string dir = scratch("train_nan");
  TrainConfig cfg = fast_recipe(dir);
  cfg.base_lr = 1e30;  // one optimizer step destroys the weights
  cfg.lr_scale_divisor = 1.0;
  cfg.warmup_epochs = 0.0;
  cfg.epochs = 4;
  CHECK_THROWS_AS((void)train_model(cfg), NumericError);
  // The abort still flushed a last-good checkpoint and metrics.
  CHECK(std::filesystem::exists(dir + "/checkpoint.bin"));
  CHECK(std::filesystem::exists(dir + "/metrics.csv"));
}

// ==== verification harnesses ===================================================

TEST_CASE("gradcheck_model passes on the micro config and honors freezes") {
  ViLConfig cfg = builtin_micro_config();
  auto report = gradcheck_model(cfg, 3, 1e-4, {"head.w", "pos_embed"});
  CHECK(report.param_count == count_params(cfg));
  CHECK(report.max_rel_err < 1e-3);
  int skipped = 0;
  for (const auto& g : report.groups) {
    if (g.skipped) {
      ++skipped;
      CHECK((g.name == "head.w" || g.name == "pos_embed"));
    }
  }
  CHECK(skipped == 2);
}

TEST_CASE("gradcheck_model refuses non-micro configs") {
  CHECK_THROWS_AS((void)gradcheck_model(ViLConfig::tiny(), 1), ConfigError);
}

TEST_CASE("fit_log_exponent recovers power laws") {
  std::vector<double> x = {128, 256, 512, 1024};
  std::vector<double> quad, lin;
  for (double v : x) {
    quad.push_back(3.0 * v * v);
    lin.push_back(0.25 * v);
  }
  CHECK(fit_log_exponent(x, quad) == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(fit_log_exponent(x, lin) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("bench rows carry the analytic counts verbatim") {
  auto rep = run_bench({16, 32}, 8, {8}, 5, 77);
  REQUIRE(!rep.rows.empty());
  for (const auto& row : rep.rows) {
    if (row.mode == "parallel")
      CHECK(row.analytic_flops == flops_mlstm(row.L, 8, 8, KernelMode::Parallel));
    if (row.mode == "recurrent")
      CHECK(row.analytic_flops == flops_mlstm(row.L, 8, 8, KernelMode::Recurrent));
    if (row.mode == "chunkwise")
      CHECK(row.analytic_flops == flops_mlstm(row.L, 8, 8, KernelMode::Chunkwise, row.chunk));
    CHECK(row.median_ms >= 0.0);
  }
  const std::string csv = bench_csv(rep);
  CHECK(csv.rfind("L,C,mode,median_ms,analytic_flops\n", 0) == 0);
}

TEST_CASE("ablation csv shape") {
  AblationReport rep;
  AblationRow row;
  row.design = "uni";
  row.pooling = "middle_patch";
  row.seed_accs = {0.5, 0.25};
  row.mean_acc = 0.375;
  row.params = 1000;
  row.head_in_dim = 32;
  rep.rows.push_back(row);
  const std::string csv = ablation_csv(rep);
  CHECK(csv.find("design") != std::string::npos);
  CHECK(csv.find("uni") != std::string::npos);
  CHECK(csv.find("0.375") != std::string::npos);
}
