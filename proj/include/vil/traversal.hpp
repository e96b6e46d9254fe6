#pragma once

// Token-order machinery: the four canonical grid scan orders, sequence
// flipping for even blocks, and the per-block direction schedule.
//
// A permutation perm is applied as out[i] = in[perm[i]]; RowForward is the
// identity, RowBackward the full reversal, ColForward visits the row-major
// grid in column-major order (index-grid transpose), and ColBackward is the
// reversal of ColForward.

#include <cstdint>
#include <vector>

#include "vil/tensor.hpp"

namespace vil {

enum class PathKind { RowForward, RowBackward, ColForward, ColBackward };

const char* path_kind_name(PathKind kind);

struct TraversalPath {
  PathKind kind;
  int64_t rows;
  int64_t cols;
};

struct BlockDesign {
  std::vector<PathKind> directions;  // full direction list (one block's worth)
  bool alternating = false;          // one direction per block, cycling
  bool shared_params = false;        // directions share one parameter set

  static BlockDesign uni();
  static BlockDesign bi(bool alternating, bool shared_params);
  static BlockDesign quad(bool alternating, bool shared_params);
};

// Validates direction-list conventions: non-empty, no duplicates; two-path
// lists must be exactly {RowForward, RowBackward} and four-path lists all
// four kinds.
void validate_design(const BlockDesign& design);

std::vector<int64_t> grid_permutation(const TraversalPath& path);
std::vector<int64_t> inverse_permutation(const std::vector<int64_t>& perm);

// Per-block direction lists for a stack of `depth` blocks: alternating
// designs cycle one direction per block; non-alternating designs repeat the
// full list every block.
std::vector<std::vector<PathKind>> assign_directions(const BlockDesign& design, int64_t depth);

template <typename T>
TensorT<T> apply_permutation(const TensorT<T>& x, const std::vector<int64_t>& perm);

// Reverses token order; equals applying grid_permutation(RowBackward).
template <typename T>
TensorT<T> flip_sequence(const TensorT<T>& x);

}  // namespace vil
