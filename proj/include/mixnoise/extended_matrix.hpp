#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "mixnoise/error.hpp"

namespace mixnoise {

/// Class labels are 0-based: closed classes 0..c-1, the meta class is c.
using Label = int;

enum class MatrixOrigin { truth, estimated, revised };

inline const char* to_string(MatrixOrigin origin) {
  switch (origin) {
    case MatrixOrigin::truth: return "true";
    case MatrixOrigin::estimated: return "estimated";
    case MatrixOrigin::revised: return "revised";
  }
  return "unknown";
}

inline MatrixOrigin origin_from_string(const std::string& s) {
  if (s == "true") return MatrixOrigin::truth;
  if (s == "estimated") return MatrixOrigin::estimated;
  if (s == "revised") return MatrixOrigin::revised;
  throw ConfigError("unknown matrix origin '" + s + "'");
}

inline bool is_row_stochastic(const Eigen::MatrixXd& m, double tol = 1e-9) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    double sum = 0.0;
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double v = m(r, j);
      if (!std::isfinite(v) || v < -tol || v > 1.0 + tol) return false;
      sum += v;
    }
    if (std::abs(sum - 1.0) > tol) return false;
  }
  return true;
}

/// Clamp every entry to [0,1] and rescale rows to sum to one. A row that
/// clamps to all zeros becomes uniform.
inline void project_rows(Eigen::MatrixXd& m) {
  m = m.cwiseMax(0.0).cwiseMin(1.0);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double sum = m.row(r).sum();
    if (sum > 0.0) {
      m.row(r) /= sum;
    } else {
      m.row(r).setConstant(1.0 / static_cast<double>(m.cols()));
    }
  }
}

/// (c+1)×c row-stochastic matrix. Rows 0..c-1 are the closed-set flip
/// probabilities P(noisy=j | clean=i); row c is the meta-class row
/// P(noisy=j | clean=meta).
struct ExtendedTransitionMatrix {
  Eigen::MatrixXd entries;
  MatrixOrigin origin = MatrixOrigin::estimated;
  std::optional<std::size_t> cluster_id;
  /// Per-row provenance: true when the row was copied from the global
  /// estimate because the cluster lacked anchors for it.
  std::vector<bool> fallback_rows;

  ExtendedTransitionMatrix() = default;
  ExtendedTransitionMatrix(Eigen::MatrixXd m, MatrixOrigin o)
      : entries(std::move(m)), origin(o),
        fallback_rows(static_cast<std::size_t>(entries.rows()), false) {
    check_shape();
  }

  int classes() const { return static_cast<int>(entries.cols()); }
  Eigen::Index meta_index() const { return entries.cols(); }
  Eigen::MatrixXd closed_block() const {
    return entries.topRows(entries.cols());
  }
  Eigen::RowVectorXd meta_row() const { return entries.row(entries.cols()); }

  void check_shape() const {
    if (entries.cols() < 1 || entries.rows() != entries.cols() + 1) {
      throw ShapeError("extended transition matrix must be (c+1)x c, got " +
                       std::to_string(entries.rows()) + "x" +
                       std::to_string(entries.cols()));
    }
  }

  /// Throws if the shape or stochasticity invariant fails.
  void validate(double tol = 1e-9) const {
    check_shape();
    if (!is_row_stochastic(entries, tol)) {
      throw ConfigError("extended transition matrix is not row-stochastic");
    }
  }

  /// Top block identity, meta row uniform.
  static ExtendedTransitionMatrix identity(int c) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(c + 1, c);
    m.topRows(c).setIdentity();
    m.row(c).setConstant(1.0 / c);
    return {m, MatrixOrigin::truth};
  }
};

}  // namespace mixnoise
