#include "vil/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "vil/optim.hpp"
#include "vil/serialize.hpp"

namespace vil {

const char kMetricsHeader[] = "step,loss,train_acc,eval_acc,lr,ms_per_step";

std::string metrics_csv(const std::vector<MetricsRecord>& rows) {
  std::string out = kMetricsHeader;
  out += "\n";
  char buf[192];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%lld,%.6f,%.4f,%.4f,%.8g,%.3f\n",
                  static_cast<long long>(r.step), r.loss, r.train_acc, r.eval_acc, r.lr,
                  r.ms_per_step);
    out += buf;
  }
  return out;
}

double lr_at_step(int64_t step, int64_t total_steps, int64_t warmup_steps, double peak_lr,
                  double end_lr) {
  check<UsageError>(step >= 0 && total_steps >= 0 && warmup_steps >= 0, "negative step counts");
  if (warmup_steps > 0 && step < warmup_steps)
    return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps <= warmup_steps) return peak_lr;
  const double t = static_cast<double>(std::min(step, total_steps) - warmup_steps) /
                   static_cast<double>(total_steps - warmup_steps);
  return end_lr + (peak_lr - end_lr) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

double evaluate(const ViLModel& model, const ImageDataset& data) {
  NoGradGuard ng;
  int64_t correct = 0;
  for (int64_t i = 0; i < data.count; ++i) {
    Tensor logits = model.forward(data.image_tensor<float>(i));
    if (argmax<float>(logits.values()) == data.labels[static_cast<size_t>(i)]) ++correct;
  }
  return data.count == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(data.count);
}

TrainResult train_model(const TrainConfig& cfg) {
  check<ConfigError>(cfg.model.image_size == cfg.data.image_size, "model.image_size ",
                     cfg.model.image_size, " must match data.image_size ", cfg.data.image_size);
  check<ConfigError>(cfg.model.num_classes == cfg.data.num_classes, "model.num_classes ",
                     cfg.model.num_classes, " must match data.num_classes ",
                     cfg.data.num_classes);
  std::filesystem::create_directories(cfg.out_dir);

  ImageDataset train_set = synthesize_corners(cfg.data, mix_seed(cfg.seed, 11),
                                              cfg.data.train_size);
  ImageDataset eval_set = synthesize_corners(cfg.data, mix_seed(cfg.seed, 13),
                                             cfg.data.eval_size);
  ViLModel model(cfg.model, mix_seed(cfg.seed, 17));
  std::mt19937 shuffle_rng(static_cast<uint32_t>(mix_seed(cfg.seed, 19)));
  std::mt19937 drop_rng(static_cast<uint32_t>(mix_seed(cfg.seed, 23)));

  std::vector<Tensor> params;
  params.reserve(model.params().size());
  for (auto& [name, p] : model.params()) params.push_back(p);

  AdamWConfig ocfg;
  ocfg.weight_decay = cfg.weight_decay;
  AdamWT<float> opt(ocfg);

  const int64_t total_steps = cfg.total_steps();
  const int64_t warmup = cfg.warmup_steps();
  const double peak = cfg.peak_lr();

  TrainResult result;
  result.checkpoint_path = cfg.out_dir + "/checkpoint.bin";
  result.metrics_path = cfg.out_dir + "/metrics.csv";

  auto flush_outputs = [&]() {
    std::ofstream mf(result.metrics_path);
    check<ConfigError>(mf.good(), "cannot open '", result.metrics_path, "' for writing");
    mf << metrics_csv(result.metrics);
    check<ConfigError>(mf.good(), "failed writing '", result.metrics_path, "'");
    save_checkpoint(result.checkpoint_path, model);
  };

  std::vector<int64_t> order(static_cast<size_t>(train_set.count));
  std::iota(order.begin(), order.end(), 0);
  double last_eval = -1.0;
  int64_t step = 0;

  try {
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      for (int64_t off = 0; off < train_set.count; off += cfg.batch_size, ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        const int64_t bsz = std::min(cfg.batch_size, train_set.count - off);
        for (auto& p : params) p.zero_grad();

        double loss_sum = 0;
        int64_t correct = 0;
        for (int64_t b = 0; b < bsz; ++b) {
          const int64_t idx = order[static_cast<size_t>(off + b)];
          ForwardOptionsT<float> fo;
          fo.training = true;
          fo.rng = &drop_rng;
          Tensor logits = model.forward(train_set.image_tensor<float>(idx), fo);
          const int64_t target = train_set.labels[static_cast<size_t>(idx)];
          Tensor loss = softmax_cross_entropy(logits, target);
          const double lval = static_cast<double>(loss.item());
          if (!std::isfinite(lval)) {
            // Weights have not been touched this step; they are the last good
            // state.  Persist them with the metrics gathered so far, then abort.
            flush_outputs();
            fail<NumericError>("non-finite loss ", lval, " at step ", step,
                               "; last good checkpoint written to ", result.checkpoint_path);
          }
          loss_sum += lval;
          backward(loss);
          if (argmax<float>(logits.values()) == target) ++correct;
        }

        for (auto& p : params) {
          for (auto& gv : p.node()->grad) gv /= static_cast<float>(bsz);
        }
        clip_grad_norm(params, cfg.grad_clip_norm);
        const double lr = lr_at_step(step, total_steps, warmup, peak, cfg.end_lr);
        opt.step(params, lr);

        const bool eval_now = ((step + 1) % cfg.eval_every == 0) || (step + 1 == total_steps);
        if (eval_now) last_eval = evaluate(model, eval_set);

        const auto t1 = std::chrono::steady_clock::now();
        MetricsRecord rec;
        rec.step = step;
        rec.loss = loss_sum / static_cast<double>(bsz);
        rec.train_acc = static_cast<double>(correct) / static_cast<double>(bsz);
        rec.eval_acc = last_eval;
        rec.lr = lr;
        rec.ms_per_step =
            std::chrono::duration_cast<std::chrono::duration<double, std::milli>>(t1 - t0).count();
        result.metrics.push_back(rec);
      }
    }
  } catch (const NumericError&) {
    // A diverged run must stay inspectable: persist the metrics so far
    // and the current weights before propagating the abort.
    flush_outputs();
    throw;
  }

  result.steps_run = step;
  result.final_train_acc = evaluate(model, train_set);
  result.final_eval_acc = evaluate(model, eval_set);
  flush_outputs();
  return result;
}

}  // namespace vil
