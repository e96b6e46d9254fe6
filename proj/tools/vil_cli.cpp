// Command-line surface of the engine: training, evaluation, verification
// (gradient checks, cross-mode equivalence), benchmarking, ablations,
// dataset synthesis, and the analytic FLOPS/parameter reports.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vil/backbone.hpp"
#include "vil/configfile.hpp"
#include "vil/dataset.hpp"
#include "vil/errors.hpp"
#include "vil/flops.hpp"
#include "vil/serialize.hpp"
#include "vil/train.hpp"
#include "vil/verify.hpp"

namespace {

std::vector<int64_t> parse_int_list(const std::string& csv) {
  std::vector<int64_t> out;
  size_t pos = 0;
  while (pos < csv.size()) {
    size_t comma = csv.find(',', pos);
    if (comma == std::string::npos) comma = csv.size();
    const std::string tok = csv.substr(pos, comma - pos);
    size_t used = 0;
    out.push_back(std::stoll(tok, &used));
    vil::check<vil::ConfigError>(used == tok.size(), "bad integer list entry '", tok, "'");
    pos = comma + 1;
  }
  vil::check<vil::ConfigError>(!out.empty(), "empty integer list");
  return out;
}

vil::ViLConfig preset_by_name(const std::string& name) {
  if (name == "tiny") return vil::ViLConfig::tiny();
  if (name == "small") return vil::ViLConfig::small();
  if (name == "base") return vil::ViLConfig::base();
  vil::fail<vil::ConfigError>("unknown preset '", name, "' (expected tiny|small|base)");
}

void write_text(const std::string& path, const std::string& text) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream os(path);
  vil::check<vil::ConfigError>(os.good(), "cannot open '", path, "' for writing");
  os << text;
  vil::check<vil::ConfigError>(os.good(), "failed writing '", path, "'");
}

int run_train(const std::string& config_path, uint64_t seed, bool seed_set,
              const std::string& out, const std::string& precision) {
  vil::check<vil::ConfigError>(precision == "f32", "training runs in f32");
  vil::TrainConfig cfg =
      config_path.empty() ? vil::builtin_toy_recipe() : vil::load_train_config(config_path);
  if (seed_set) cfg.seed = seed;
  if (!out.empty()) cfg.out_dir = out;
  vil::TrainResult res = vil::train_model(cfg);
  std::printf("steps=%lld final_train_acc=%.4f final_eval_acc=%.4f\n",
              static_cast<long long>(res.steps_run), res.final_train_acc, res.final_eval_acc);
  std::printf("metrics: %s\ncheckpoint: %s\n", res.metrics_path.c_str(),
              res.checkpoint_path.c_str());
  return 0;
}

int run_eval(const std::string& config_path, const std::string& checkpoint, uint64_t seed,
             bool seed_set, const std::string& precision) {
  vil::check<vil::ConfigError>(precision == "f32", "checkpoints are stored in f32");
  vil::TrainConfig cfg =
      config_path.empty() ? vil::builtin_toy_recipe() : vil::load_train_config(config_path);
  if (seed_set) cfg.seed = seed;
  vil::ViLModel model(cfg.model, vil::mix_seed(cfg.seed, 17));
  vil::load_checkpoint(checkpoint, model);
  vil::ImageDataset eval_set =
      vil::synthesize_corners(cfg.data, vil::mix_seed(cfg.seed, 13), cfg.data.eval_size);
  const double acc = vil::evaluate(model, eval_set);
  std::printf("eval_acc=%.4f over %lld samples\n", acc, static_cast<long long>(eval_set.count));
  return 0;
}

int run_gradcheck(const std::string& config_path, uint64_t seed,
                  const std::vector<std::string>& freeze) {
  vil::ViLConfig cfg = config_path.empty() ? vil::builtin_micro_config()
                                           : vil::load_train_config(config_path).model;
  vil::GradCheckReport report = vil::gradcheck_model(cfg, seed, 1e-4, freeze);
  bool ok = true;
  for (const auto& g : report.groups) {
    if (g.skipped) {
      std::printf("%-28s skipped (requires_grad off)\n", g.name.c_str());
      continue;
    }
    const bool pass = g.max_rel_err < 1e-3;
    ok = ok && pass;
    std::printf("%-28s max_rel_err=%.3e %s\n", g.name.c_str(), g.max_rel_err,
                pass ? "ok" : "FAIL");
  }
  std::printf("params=%lld overall max_rel_err=%.3e -> %s\n",
              static_cast<long long>(report.param_count), report.max_rel_err,
              ok ? "PASS" : "FAIL");
  return ok ? 0 : 1;
}

int run_equivalence(const std::string& lengths, const std::string& dims, const std::string& chunks,
                    int64_t trials, uint64_t seed, const std::string& precision) {
  const auto Ls = parse_int_list(lengths);
  const auto ds = parse_int_list(dims);
  const auto cs = parse_int_list(chunks);
  const bool f64 = precision == "f64";
  const double tol = f64 ? 1e-10 : 1e-4;
  vil::EquivalenceReport rep = f64 ? vil::equivalence_sweep<double>(Ls, ds, cs, trials, seed)
                                   : vil::equivalence_sweep<float>(Ls, ds, cs, trials, seed);
  std::printf("cases=%lld max_deviation=%.3e (worst: L=%lld d=%lld C=%lld trial=%lld)\n",
              static_cast<long long>(rep.cases_run), rep.max_deviation,
              static_cast<long long>(rep.worst.L), static_cast<long long>(rep.worst.d),
              static_cast<long long>(rep.worst.chunk), static_cast<long long>(rep.worst.trial));
  if (rep.max_deviation >= tol) {
    std::fprintf(stderr, "equivalence FAIL: %.3e >= %.0e at (L=%lld d=%lld C=%lld trial=%lld)\n",
                 rep.max_deviation, tol, static_cast<long long>(rep.worst.L),
                 static_cast<long long>(rep.worst.d), static_cast<long long>(rep.worst.chunk),
                 static_cast<long long>(rep.worst.trial));
    return 1;
  }
  std::printf("equivalence PASS (tolerance %.0e, %s)\n", tol, f64 ? "f64" : "f32");
  return 0;
}

int run_bench(const std::string& lengths, int64_t d, const std::string& chunks, int64_t repeats,
              uint64_t seed, const std::string& out) {
  const auto Ls = parse_int_list(lengths);
  const auto cs = parse_int_list(chunks);
  vil::BenchReport rep = vil::run_bench(Ls, d, cs, repeats, seed);
  const std::string csv = vil::bench_csv(rep);
  std::fputs(csv.c_str(), stdout);
  for (const auto& r : rep.rows)
    if (r.timer_warning)
      std::fprintf(stderr, "warning: %s median %.3f ms at L=%lld is below 1 ms timer resolution\n",
                   r.mode.c_str(), r.median_ms, static_cast<long long>(r.L));
  std::printf("fit exponents: parallel=%.3f recurrent=%.3f\n", rep.parallel_exponent,
              rep.recurrent_exponent);
  if (!out.empty()) {
    write_text(out + "/bench.csv", csv);
    std::printf("csv: %s/bench.csv\n", out.c_str());
  }
  return 0;
}

int run_ablate(const std::string& config_path, int64_t seeds, uint64_t seed,
               const std::string& out) {
  vil::TrainConfig recipe = config_path.empty() ? vil::builtin_ablation_recipe()
                                                : vil::load_train_config(config_path);
  if (!out.empty()) recipe.out_dir = out;
  vil::AblationReport rep = vil::run_ablation(recipe, seeds, seed);
  const std::string csv = vil::ablation_csv(rep);
  std::fputs(csv.c_str(), stdout);
  for (const auto& [pool, dim] : rep.pooling_dims)
    std::printf("pooling %-18s head_in_dim@192=%lld\n", pool.c_str(),
                static_cast<long long>(dim));
  write_text(recipe.out_dir + "/ablation.csv", csv);
  std::printf("csv: %s/ablation.csv\n", recipe.out_dir.c_str());
  if (!(rep.alt_bi_mean > rep.uni_mean)) {
    std::fprintf(stderr, "ablation FAIL: alternating-bi mean %.4f not above uni mean %.4f\n",
                 rep.alt_bi_mean, rep.uni_mean);
    return 1;
  }
  std::printf("alternating_bi mean %.4f > uni mean %.4f\n", rep.alt_bi_mean, rep.uni_mean);
  return 0;
}

int run_synth(const std::string& out, int64_t count, int64_t image_size, int64_t classes,
              int64_t marker, uint64_t seed) {
  vil::DatasetSpec spec;
  spec.image_size = image_size;
  spec.num_classes = classes;
  spec.marker_size = marker;
  vil::ImageDataset ds = vil::synthesize_corners(spec, seed, count);
  std::filesystem::create_directories(out);
  const std::string images = out + "/images.bin", labels = out + "/labels.txt";
  vil::save_dataset(ds, images, labels);
  std::printf("wrote %lld samples: %s, %s\n", static_cast<long long>(count), images.c_str(),
              labels.c_str());
  return 0;
}

int run_flops(const std::string& preset, const std::string& config_path, int64_t resolution,
              const std::string& mode_name, int64_t chunk, bool sweep, const std::string& out) {
  vil::ViLConfig cfg = config_path.empty() ? preset_by_name(preset)
                                           : vil::load_train_config(config_path).model;
  vil::KernelMode mode = vil::KernelMode::Parallel;
  if (mode_name == "recurrent") mode = vil::KernelMode::Recurrent;
  else if (mode_name == "chunkwise") mode = vil::KernelMode::Chunkwise;
  else vil::check<vil::ConfigError>(mode_name == "parallel", "unknown mode '", mode_name, "'");
  vil::FlopsReport rep = vil::estimate_model_flops(cfg, resolution, mode, chunk);
  std::fputs(vil::flops_report_table(rep).c_str(), stdout);
  if (sweep) {
    const int64_t L = rep.seq_len;
    std::printf("chunk sweep (per head, L=%lld, d_qk=%lld, d_v=%lld):\nC,count\n",
                static_cast<long long>(L), static_cast<long long>(cfg.head_qk_dim()),
                static_cast<long long>(cfg.head_v_dim()));
    for (auto [c, macs] : vil::chunk_sweep(L, cfg.head_qk_dim(), cfg.head_v_dim()))
      std::printf("%lld,%lld\n", static_cast<long long>(c), static_cast<long long>(macs));
  }
  if (!out.empty()) {
    write_text(out + "/flops.csv", vil::flops_report_csv(rep));
    std::printf("csv: %s/flops.csv\n", out.c_str());
  }
  return 0;
}

int run_params(const std::string& preset, const std::string& config_path) {
  vil::ViLConfig cfg = config_path.empty() ? preset_by_name(preset)
                                           : vil::load_train_config(config_path).model;
  const auto specs = vil::describe_params(cfg);
  int64_t blocks = 0, other = 0;
  for (const auto& sp : specs) {
    if (sp.name.rfind("blocks.", 0) == 0) blocks += vil::shape_numel(sp.shape);
    else other += vil::shape_numel(sp.shape);
  }
  std::printf("tensors=%zu block_params=%lld other_params=%lld total=%lld\n", specs.size(),
              static_cast<long long>(blocks), static_cast<long long>(other),
              static_cast<long long>(blocks + other));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vision-LSTM engine: training, verification and analysis"};
  app.require_subcommand(1);

  std::string config_path, out, precision = "f32", checkpoint;
  uint64_t seed = 0;
  bool seed_set = false;
  auto add_common = [&](CLI::App* cmd, bool with_precision) {
    cmd->add_option("--config", config_path, "config file path");
    cmd->add_option("--seed", seed, "seed override")->each([&](const std::string&) {
      seed_set = true;
    });
    cmd->add_option("--out", out, "output directory");
    if (with_precision)
      cmd->add_option("--precision", precision, "f32|f64")
          ->check(CLI::IsMember({"f32", "f64"}));
  };

  int rc = 0;

  auto* train = app.add_subcommand("train", "train on the synthetic corners task");
  add_common(train, true);
  train->callback([&] { rc = run_train(config_path, seed, seed_set, out, precision); });

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, true);
  eval->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
  eval->callback([&] { rc = run_eval(config_path, checkpoint, seed, seed_set, precision); });

  std::vector<std::string> freeze;
  auto* gradcheck = app.add_subcommand("gradcheck",
                                       "finite-difference gradient verification (runs in f64)");
  add_common(gradcheck, false);
  gradcheck->add_option("--freeze", freeze, "parameter groups to freeze (reported as skipped)");
  gradcheck->callback([&] { rc = run_gradcheck(config_path, seed, freeze); });

  std::string lengths = "64", dims = "32", chunks = "1,8,64";
  int64_t trials = 100;
  auto* equivalence =
      app.add_subcommand("equivalence", "recurrent/parallel/chunkwise cross-check");
  add_common(equivalence, true);
  equivalence->add_option("--lengths", lengths, "comma list of sequence lengths");
  equivalence->add_option("--dims", dims, "comma list of head dims");
  equivalence->add_option("--chunks", chunks, "comma list of chunk sizes");
  equivalence->add_option("--trials", trials, "random trials per combination");
  equivalence->callback(
      [&] { rc = run_equivalence(lengths, dims, chunks, trials, seed, precision); });

  std::string bench_lengths = "128,256,512,1024,2048", bench_chunks = "64";
  int64_t bench_dim = 64, repeats = 5;
  auto* bench = app.add_subcommand("bench", "wall-clock scaling of the kernel modes");
  add_common(bench, false);
  bench->add_option("--lengths", bench_lengths, "comma list of sequence lengths");
  bench->add_option("--dim", bench_dim, "head dim");
  bench->add_option("--chunks", bench_chunks, "comma list of chunk sizes");
  bench->add_option("--repeats", repeats, "timed repeats per point (median reported)");
  bench->callback([&] { rc = run_bench(bench_lengths, bench_dim, bench_chunks, repeats, seed, out); });

  int64_t seeds = 3;
  auto* ablate = app.add_subcommand("ablate", "block-design/pooling ablation matrix");
  add_common(ablate, false);
  ablate->add_option("--seeds", seeds, "seeds per design row");
  ablate->callback([&] { rc = run_ablate(config_path, seeds, seed, out); });

  int64_t count = 1000, image_size = 32, classes = 8, marker = 16;
  auto* synth = app.add_subcommand("synth", "write a synthetic corners dataset to disk");
  add_common(synth, false);
  synth->add_option("--count", count, "number of samples");
  synth->add_option("--image-size", image_size, "square image size");
  synth->add_option("--classes", classes, "number of classes");
  synth->add_option("--marker", marker, "corner marker size in pixels");
  synth->callback([&] {
    vil::check<vil::ConfigError>(!out.empty(), "synth needs --out");
    rc = run_synth(out, count, image_size, classes, marker, seed);
  });

  std::string preset = "tiny", mode_name = "parallel";
  int64_t resolution = 224, chunk = 196;
  bool sweep = false;
  auto* flops = app.add_subcommand("flops", "analytic operation counts");
  add_common(flops, false);
  flops->add_option("--preset", preset, "tiny|small|base (ignored with --config)");
  flops->add_option("--resolution", resolution, "input resolution");
  flops->add_option("--mode", mode_name, "parallel|recurrent|chunkwise");
  flops->add_option("--chunk", chunk, "chunk size for chunkwise mode");
  flops->add_flag("--sweep", sweep, "print the full per-head chunk sweep");
  flops->callback(
      [&] { rc = run_flops(preset, config_path, resolution, mode_name, chunk, sweep, out); });

  auto* params = app.add_subcommand("params", "exact learnable-parameter counts");
  add_common(params, false);
  params->add_option("--preset", preset, "tiny|small|base (ignored with --config)");
  params->callback([&] { rc = run_params(preset, config_path); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const vil::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return rc;
}
