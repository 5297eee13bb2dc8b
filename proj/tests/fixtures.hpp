#pragma once

#include <Eigen/Dense>

#include <random>
#include <vector>

#include "mixnoise/synthdata.hpp"

namespace mixnoise::testing {

/// 1-d two-class mixture with all rows in the train split.
inline MixtureSpec line_mixture(double half_gap, double sigma, int c = 2) {
  MixtureSpec spec;
  spec.c = c;
  spec.d = 1;
  for (int k = 0; k < c; ++k) {
    spec.means.push_back(Eigen::VectorXd::Constant(1, -half_gap + 2.0 * half_gap * k / (c - 1)));
  }
  spec.means.push_back(Eigen::VectorXd::Constant(1, 100.0));
  spec.covariance_scale.assign(spec.means.size(), sigma);
  spec.class_priors.assign(c, 1.0 / c);
  spec.test_fraction = 0.0;
  spec.val_fraction = 0.0;
  return spec;
}

/// Empirical P(noisy=j | clean=i) over closed-set train rows, plus the
/// noisy-label law of meta rows in the last row.
inline Eigen::MatrixXd empirical_transition(const Dataset& noisy, Split split = Split::train) {
  const int c = noisy.c;
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(c + 1, c);
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    if (noisy.split[i] != split) continue;
    counts(noisy.clean_labels[i], noisy.noisy_labels[i]) += 1.0;
  }
  for (Eigen::Index r = 0; r < counts.rows(); ++r) {
    const double total = counts.row(r).sum();
    if (total > 0) counts.row(r) /= total;
  }
  return counts;
}

inline Eigen::MatrixXd random_stochastic(int rows, int cols, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int j = 0; j < cols; ++j) m(r, j) = u(rng);
    m.row(r) /= m.row(r).sum();
  }
  return m;
}

inline Eigen::VectorXd random_simplex(int n, std::mt19937_64& rng) {
  std::exponential_distribution<double> e(1.0);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = e(rng);
  return v / v.sum();
}

}  // namespace mixnoise::testing
