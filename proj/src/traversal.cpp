#include "vil/traversal.hpp"

#include <algorithm>

#include "vil/errors.hpp"

namespace vil {

const char* path_kind_name(PathKind kind) {
  switch (kind) {
    case PathKind::RowForward: return "row_forward";
    case PathKind::RowBackward: return "row_backward";
    case PathKind::ColForward: return "col_forward";
    case PathKind::ColBackward: return "col_backward";
  }
  fail<UsageError>("unknown path kind");
}

BlockDesign BlockDesign::uni() {
  return BlockDesign{{PathKind::RowForward}, false, false};
}

BlockDesign BlockDesign::bi(bool alternating, bool shared_params) {
  return BlockDesign{{PathKind::RowForward, PathKind::RowBackward}, alternating, shared_params};
}

BlockDesign BlockDesign::quad(bool alternating, bool shared_params) {
  return BlockDesign{{PathKind::RowForward, PathKind::RowBackward,
                      PathKind::ColForward, PathKind::ColBackward},
                     alternating, shared_params};
}

void validate_design(const BlockDesign& design) {
  const auto& dirs = design.directions;
  check<ConfigError>(!dirs.empty(), "block design needs at least one direction");
  for (size_t a = 0; a < dirs.size(); ++a)
    for (size_t b = a + 1; b < dirs.size(); ++b)
      check<ConfigError>(dirs[a] != dirs[b], "duplicate direction ", path_kind_name(dirs[a]),
                         " in block design");
  if (dirs.size() == 2) {
    check<ConfigError>(dirs[0] == PathKind::RowForward && dirs[1] == PathKind::RowBackward,
                       "two-direction designs must be {row_forward, row_backward}");
  } else if (dirs.size() == 4) {
    check<ConfigError>(dirs[0] == PathKind::RowForward && dirs[1] == PathKind::RowBackward &&
                           dirs[2] == PathKind::ColForward && dirs[3] == PathKind::ColBackward,
                       "four-direction designs must be the canonical quad order");
  } else {
    check<ConfigError>(dirs.size() == 1, "block design must list 1, 2, or 4 directions, got ",
                       dirs.size());
  }
}

std::vector<int64_t> grid_permutation(const TraversalPath& path) {
  check<ConfigError>(path.rows > 0 && path.cols > 0, "grid dims must be positive, got ",
                     path.rows, "x", path.cols);
  const int64_t n = path.rows * path.cols;
  std::vector<int64_t> perm(static_cast<size_t>(n));
  switch (path.kind) {
    case PathKind::RowForward:
      for (int64_t t = 0; t < n; ++t) perm[static_cast<size_t>(t)] = t;
      break;
    case PathKind::RowBackward:
      for (int64_t t = 0; t < n; ++t) perm[static_cast<size_t>(t)] = n - 1 - t;
      break;
    case PathKind::ColForward:
      // t walks columns top-to-bottom, left-to-right over the row-major grid.
      for (int64_t t = 0; t < n; ++t)
        perm[static_cast<size_t>(t)] = (t % path.rows) * path.cols + (t / path.rows);
      break;
    case PathKind::ColBackward: {
      for (int64_t t = 0; t < n; ++t)
        perm[static_cast<size_t>(t)] =
            ((n - 1 - t) % path.rows) * path.cols + ((n - 1 - t) / path.rows);
      break;
    }
  }
  return perm;
}

std::vector<int64_t> inverse_permutation(const std::vector<int64_t>& perm) {
  const int64_t n = static_cast<int64_t>(perm.size());
  std::vector<int64_t> inv(perm.size(), -1);
  for (int64_t i = 0; i < n; ++i) {
    const int64_t p = perm[static_cast<size_t>(i)];
    check<UsageError>(p >= 0 && p < n, "permutation entry ", p, " out of range [0, ", n, ")");
    check<UsageError>(inv[static_cast<size_t>(p)] == -1, "permutation repeats entry ", p);
    inv[static_cast<size_t>(p)] = i;
  }
  return inv;
}

std::vector<std::vector<PathKind>> assign_directions(const BlockDesign& design, int64_t depth) {
  validate_design(design);
  check<ConfigError>(depth > 0, "depth must be positive, got ", depth);
  std::vector<std::vector<PathKind>> schedule(static_cast<size_t>(depth));
  for (int64_t b = 0; b < depth; ++b) {
    if (design.alternating) {
      schedule[static_cast<size_t>(b)] = {
          design.directions[static_cast<size_t>(b) % design.directions.size()]};
    } else {
      schedule[static_cast<size_t>(b)] = design.directions;
    }
  }
  return schedule;
}

template <typename T>
TensorT<T> apply_permutation(const TensorT<T>& x, const std::vector<int64_t>& perm) {
  check<ShapeError>(x.rank() == 2, "apply_permutation expects a {L, D} tensor, got rank ",
                    x.rank());
  check<ShapeError>(x.dim(0) == static_cast<int64_t>(perm.size()), "permutation length ",
                    perm.size(), " does not match sequence length ", x.dim(0));
  return gather_rows(x, perm);
}

template <typename T>
TensorT<T> flip_sequence(const TensorT<T>& x) {
  check<ShapeError>(x.rank() == 2, "flip_sequence expects a {L, D} tensor, got rank ", x.rank());
  return apply_permutation(x, grid_permutation({PathKind::RowBackward, x.dim(0), 1}));
}

template TensorT<float> apply_permutation(const TensorT<float>&, const std::vector<int64_t>&);
template TensorT<double> apply_permutation(const TensorT<double>&, const std::vector<int64_t>&);
template TensorT<float> flip_sequence(const TensorT<float>&);
template TensorT<double> flip_sequence(const TensorT<double>&);

}  // namespace vil
