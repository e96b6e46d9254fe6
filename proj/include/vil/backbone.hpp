#pragma once

// The Vision-LSTM backbone: patch embedding, learnable positional
// embeddings, a stack of direction-scheduled mLSTM blocks, pooling, and a
// linear classification head.
//
// Parameters are named, creation-ordered tensors; the order defines the
// checkpoint layout.  Multi-direction blocks either allocate one parameter
// set per direction or share a single set (BlockDesign.shared_params), in
// which case all directions reference the identical tensors.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vil/config.hpp"
#include "vil/mlstm.hpp"
#include "vil/tensor.hpp"
#include "vil/traversal.hpp"

namespace vil {

// ---- free ops ----------------------------------------------------------------

// Cuts a {H,W,3} image into flattened patch vectors, row-major top-left to
// bottom-right.  Returns {L, patch*patch*3} with L = grid_h*grid_w.
template <typename T>
TensorT<T> patchify(const TensorT<T>& image, int64_t patch, int64_t stride);

// Bicubic (Catmull-Rom, linear edge extension) resampling of a positional
// table laid out on an (h,w) grid to a new (h2,w2) grid; value-level, no
// gradient graph.  Reproduces constant and linear fields exactly.
template <typename T>
TensorT<T> interpolate_positional(const TensorT<T>& pos, int64_t h, int64_t w, int64_t h2,
                                  int64_t w2);

// Stochastic-depth decision: returns {skip, survivor_scale}.  In eval mode
// never skips and never rescales.  rate must lie in [0, 1).
std::pair<bool, double> drop_path_decision(double rate, bool training, std::mt19937& rng);

// Per-block drop-path rates under the configured schedule.
std::vector<double> drop_path_rates(const ViLConfig& cfg);

// ---- parameter enumeration ----------------------------------------------------

enum class InitKind { Normal02, Zeros, Ones, ForgetBias };

struct ParamSpec {
  std::string name;
  Shape shape;
  InitKind init;
};

// Every learnable tensor of a model built from cfg, in creation order.
std::vector<ParamSpec> describe_params(const ViLConfig& cfg);

// Exact learnable-scalar count (no allocation).
int64_t count_params(const ViLConfig& cfg);

// ---- model --------------------------------------------------------------------

struct ForwardStats {
  int64_t blocks_total = 0;
  int64_t blocks_skipped = 0;
};

template <typename T>
struct ForwardOptionsT {
  bool training = false;
  std::mt19937* rng = nullptr;  // required when training with drop_path_rate > 0
  KernelMode mode = KernelMode::Parallel;
  int64_t chunk_size = 16;
  ForwardStats* stats = nullptr;
  // Instrumentation: called with each block's permuted token matrix before
  // the branch runs (inverse-permutation round-trips are checked in tests).
  std::function<void(int64_t block, PathKind dir, const TensorT<T>& permuted)> hook;
};

template <typename T>
class ViLModelT {
 public:
  ViLModelT(const ViLConfig& cfg, uint64_t seed);

  const ViLConfig& config() const { return cfg_; }
  const std::vector<std::pair<std::string, TensorT<T>>>& params() const { return params_; }
  std::vector<std::pair<std::string, TensorT<T>>>& params() { return params_; }
  TensorT<T> param(const std::string& name) const;
  bool has_param(const std::string& name) const;
  int64_t total_params() const;
  const std::vector<std::vector<PathKind>>& schedule() const { return schedule_; }

  // image {H,W,3} -> logits {num_classes}
  TensorT<T> forward(const TensorT<T>& image, const ForwardOptionsT<T>& opts = {}) const;

  void set_all_requires_grad(bool rg);

 private:
  // Sequence layout of one forward pass: grid dims (possibly from an
  // off-native resolution) and the fixed cls position (-1 when absent).
  struct SeqCtx {
    int64_t gh = 0;
    int64_t gw = 0;
    int64_t cls = -1;
  };

  TensorT<T> run_block(const TensorT<T>& x, int64_t block, const SeqCtx& ctx,
                       const ForwardOptionsT<T>& opts) const;
  TensorT<T> mlstm_branch(const TensorT<T>& x, int64_t block, PathKind dir, const SeqCtx& ctx,
                          const ForwardOptionsT<T>& opts) const;
  TensorT<T> pool(const TensorT<T>& x, const SeqCtx& ctx) const;
  TensorT<T> block_param(int64_t block, PathKind dir, const char* leaf) const;
  TensorT<T> block_bias(int64_t block, PathKind dir, const char* leaf) const;

  ViLConfig cfg_;
  std::vector<std::pair<std::string, TensorT<T>>> params_;
  std::unordered_map<std::string, size_t> name_index_;
  std::vector<std::vector<PathKind>> schedule_;
  std::vector<double> drop_rates_;
};

using ViLModel = ViLModelT<float>;

// Direction-set label inside parameter names: shared designs collapse every
// direction onto set 0; alternating designs have one direction per block.
int64_t param_set_for(const ViLConfig& cfg, PathKind dir);

}  // namespace vil
