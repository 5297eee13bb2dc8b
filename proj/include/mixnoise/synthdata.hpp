#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "mixnoise/error.hpp"
#include "mixnoise/extended_matrix.hpp"

namespace mixnoise {

enum class Split : std::uint8_t { train, val, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split tag '" + s + "'");
}

/// Feature rows with clean and noisy labels. Clean labels use `c` for the
/// meta (open-set) class; noisy labels are always closed classes.
struct Dataset {
  Eigen::MatrixXd features;  // n x d
  std::vector<Label> clean_labels;
  std::vector<Label> noisy_labels;
  std::vector<Split> split;
  int c = 0;

  std::size_t size() const { return clean_labels.size(); }
  int dim() const { return static_cast<int>(features.cols()); }
  Label meta() const { return c; }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i) {
      if (split[i] == s) out.push_back(i);
    }
    return out;
  }

  /// Gathers the selected rows as columns (d x |idx|), the layout the
  /// network consumes.
  Eigen::MatrixXd columns(const std::vector<std::size_t>& idx) const {
    Eigen::MatrixXd out(features.cols(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j) {
      out.col(static_cast<Eigen::Index>(j)) =
          features.row(static_cast<Eigen::Index>(idx[j])).transpose();
    }
    return out;
  }

  void validate() const {
    const auto n = size();
    if (noisy_labels.size() != n || split.size() != n ||
        static_cast<std::size_t>(features.rows()) != n) {
      throw ShapeError("dataset columns have inconsistent lengths");
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (clean_labels[i] < 0 || clean_labels[i] > c) {
        throw ShapeError("clean label out of range at row " + std::to_string(i));
      }
      if (noisy_labels[i] < 0 || noisy_labels[i] >= c) {
        throw ShapeError("noisy label out of range at row " + std::to_string(i));
      }
    }
  }
};

/// Gaussian mixture description: `c` class populations followed by one or
/// more outside populations that feed the open-set reservoir. Each
/// population is isotropic with standard deviation `covariance_scale[k]`.
struct MixtureSpec {
  int c = 0;
  int d = 0;
  std::vector<Eigen::VectorXd> means;
  std::vector<double> covariance_scale;
  std::vector<double> class_priors;
  /// Reservoir size as a multiple of n.
  double open_fraction_reservoir = 0.5;
  double test_fraction = 0.2;
  /// Fraction of the non-test data held out as (noisy) validation.
  double val_fraction = 0.1;

  int open_populations() const {
    return static_cast<int>(means.size()) - c;
  }

  void validate() const {
    if (c < 2) throw ConfigError("mixture needs at least 2 classes");
    if (d < 1) throw ConfigError("mixture dimension must be positive");
    if (static_cast<int>(means.size()) < c) {
      throw ConfigError("mixture needs a mean per class");
    }
    if (covariance_scale.size() != means.size()) {
      throw ConfigError("covariance_scale needs one entry per population");
    }
    for (const auto& m : means) {
      if (m.size() != d) throw ConfigError("mean dimension does not match d");
    }
    for (double s : covariance_scale) {
      if (!(s > 0.0)) throw ConfigError("covariance_scale must be positive");
    }
    if (static_cast<int>(class_priors.size()) != c) {
      throw ConfigError("class_priors must have c entries");
    }
    double total = 0.0;
    for (double p : class_priors) {
      if (p < 0.0) throw ConfigError("class_priors must be nonnegative");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-12) {
      throw ConfigError("class_priors must sum to 1");
    }
    for (std::size_t a = 0; a < means.size(); ++a) {
      for (std::size_t b = a + 1; b < means.size(); ++b) {
        if ((means[a] - means[b]).norm() == 0.0) {
          throw ConfigError("population means must be pairwise distinct");
        }
      }
    }
    if (test_fraction < 0.0 || test_fraction >= 1.0 || val_fraction < 0.0 ||
        val_fraction >= 1.0) {
      throw ConfigError("split fractions must lie in [0,1)");
    }
    if (open_fraction_reservoir < 0.0) {
      throw ConfigError("open_fraction_reservoir must be nonnegative");
    }
  }
};

/// Class means at pairwise distance `separation`·sigma on scaled basis
/// vectors; outside populations sit on further axes (or opposite
/// directions once axes run out) at least `open_separation`·sigma from every
/// class mean.
inline MixtureSpec make_gaussian_mixture(int c, int d, int open_populations,
                                         double separation,
                                         double open_separation,
                                         double sigma = 1.0) {
  if (c < 2 || d < 1 || open_populations < 0) {
    throw ConfigError("invalid mixture shape");
  }
  MixtureSpec spec;
  spec.c = c;
  spec.d = d;
  const double class_radius = separation * sigma / std::sqrt(2.0);
  // Direction k gets axis k mod d; wrapped directions are negated and, on
  // further wraps, scaled outward so means stay distinct.
  auto axis = [d](int k, double radius) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(d);
    const int wrap = k / d;
    const double sign = (wrap % 2 == 0) ? 1.0 : -1.0;
    v(k % d) = sign * radius * (1.0 + wrap / 2);
    return v;
  };
  for (int k = 0; k < c; ++k) spec.means.push_back(axis(k, class_radius));
  // Distance from an open mean at radius R on a fresh axis to a class mean
  // is sqrt(R^2 + class_radius^2); pick R so it clears open_separation.
  const double open_radius =
      std::max(open_separation * sigma, class_radius + open_separation * sigma);
  for (int k = 0; k < open_populations; ++k) {
    spec.means.push_back(axis(c + k, open_radius));
  }
  spec.covariance_scale.assign(spec.means.size(), sigma);
  spec.class_priors.assign(c, 1.0 / c);
  return spec;
}

namespace detail {

/// floor(rate·n) robust to representation error in the rate product.
inline std::size_t exact_count(double rate, std::size_t n) {
  return static_cast<std::size_t>(
      std::floor(rate * static_cast<double>(n) + 1e-9));
}

inline std::size_t nearest_row(const std::vector<Eigen::VectorXd>& centers,
                               const Eigen::RowVectorXd& x) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < centers.size(); ++k) {
    const double dist = (x.transpose() - centers[k]).squaredNorm();
    if (dist < best_d) {
      best_d = dist;
      best = k;
    }
  }
  return best;
}

}  // namespace detail

/// Draws a clean dataset: labels from the class priors, features from the
/// class Gaussians, split tags by a seeded permutation.
inline Dataset generate_mixture(const MixtureSpec& spec, std::size_t n,
                                std::uint64_t seed) {
  spec.validate();
  if (n < static_cast<std::size_t>(spec.c) * 10) {
    throw ConfigError("generate_mixture needs n >= 10*c (got " +
                      std::to_string(n) + ")");
  }
  std::mt19937_64 rng(seed);
  std::discrete_distribution<int> pick_class(spec.class_priors.begin(),
                                             spec.class_priors.end());
  std::normal_distribution<double> normal(0.0, 1.0);

  Dataset data;
  data.c = spec.c;
  data.features.resize(static_cast<Eigen::Index>(n), spec.d);
  data.clean_labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = pick_class(rng);
    data.clean_labels[i] = y;
    const auto row = static_cast<Eigen::Index>(i);
    for (int j = 0; j < spec.d; ++j) {
      data.features(row, j) =
          spec.means[y](j) + spec.covariance_scale[y] * normal(rng);
    }
  }
  data.noisy_labels = data.clean_labels;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_test = detail::exact_count(spec.test_fraction, n);
  const auto n_val = detail::exact_count(spec.val_fraction, n - n_test);
  data.split.assign(n, Split::train);
  for (std::size_t k = 0; k < n_test; ++k) data.split[order[k]] = Split::test;
  for (std::size_t k = n_test; k < n_test + n_val; ++k) {
    data.split[order[k]] = Split::val;
  }
  return data;
}

/// Samples `count` features from the outside populations (population picked
/// uniformly per draw).
inline Eigen::MatrixXd generate_reservoir(const MixtureSpec& spec,
                                          std::size_t count,
                                          std::uint64_t seed) {
  spec.validate();
  const int p = spec.open_populations();
  if (p < 1 && count > 0) {
    throw ConfigError("reservoir requested but mixture has no outside populations");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, std::max(p - 1, 0));
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(count), spec.d);
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const int k = spec.c + pick(rng);
    for (int j = 0; j < spec.d; ++j) {
      out(i, j) = spec.means[k](j) + spec.covariance_scale[k] * normal(rng);
    }
  }
  return out;
}

enum class NoiseStructure { class_dependent, region_dependent };

/// How a replaced (open-set) instance gets its noisy label.
enum class OpenLabelMode {
  preserve,  ///< keep the label of the instance it replaced
  uniform    ///< draw uniformly over the c closed classes
};

/// Noise law for one feature region: nearest-centroid membership, a c×c
/// closed-set flip matrix, and the fraction of region members replaced by
/// open-set features.
struct RegionNoise {
  Eigen::VectorXd centroid;
  Eigen::MatrixXd flip;
  double open_rate = 0.0;
};

struct NoiseSpec {
  double tau = 0.0;
  double rho = 0.0;
  NoiseStructure structure = NoiseStructure::class_dependent;
  std::vector<RegionNoise> regions;
  OpenLabelMode open_labels = OpenLabelMode::preserve;
  std::uint64_t seed = 0;

  /// Class-dependent symmetric mixed noise at rate tau, open share rho.
  static NoiseSpec mixed(double tau, double rho, std::uint64_t seed = 0) {
    NoiseSpec s;
    s.tau = tau;
    s.rho = rho;
    s.seed = seed;
    return s;
  }

  double open_rate() const { return tau * rho; }
  double closed_rate() const { return tau * (1.0 - rho); }

  void validate(int c) const {
    if (tau < 0.0 || tau > 1.0 || rho < 0.0 || rho > 1.0) {
      throw ConfigError("tau and rho must lie in [0,1]");
    }
    if (open_rate() + closed_rate() > 1.0 + 1e-12) {
      throw ConfigError("tau*rho + tau*(1-rho) exceeds 1");
    }
    if (structure == NoiseStructure::region_dependent) {
      if (regions.empty()) {
        throw ConfigError("region_dependent noise needs at least one region");
      }
      for (std::size_t r = 0; r < regions.size(); ++r) {
        const auto& reg = regions[r];
        if (reg.flip.rows() != c || reg.flip.cols() != c) {
          throw ConfigError("region " + std::to_string(r) +
                            " flip matrix must be c x c");
        }
        if (!is_row_stochastic(reg.flip, 1e-9)) {
          throw ConfigError("region " + std::to_string(r) +
                            " flip matrix is not row-stochastic");
        }
        if (reg.open_rate < 0.0 || reg.open_rate > 1.0) {
          throw ConfigError("region open_rate must lie in [0,1]");
        }
      }
    }
  }
};

namespace detail {

inline void check_clean_input(const Dataset& data) {
  data.validate();
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.split[i] == Split::test) continue;
    if (data.clean_labels[i] == data.meta() ||
        data.noisy_labels[i] != data.clean_labels[i]) {
      throw ConfigError("noise injection expects clean closed-set labels");
    }
  }
}

/// Draws reservoir rows without replacement in a seeded order.
class ReservoirCursor {
 public:
  ReservoirCursor(const Eigen::MatrixXd& reservoir, std::mt19937_64& rng)
      : reservoir_(reservoir), order_(static_cast<std::size_t>(reservoir.rows())) {
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), rng);
  }
  std::size_t remaining() const { return order_.size() - next_; }
  Eigen::RowVectorXd take() {
    return reservoir_.row(static_cast<Eigen::Index>(order_[next_++]));
  }

 private:
  const Eigen::MatrixXd& reservoir_;
  std::vector<std::size_t> order_;
  std::size_t next_ = 0;
};

inline void replace_with_open(Dataset& out, std::size_t i,
                              ReservoirCursor& cursor, OpenLabelMode mode,
                              std::mt19937_64& rng) {
  out.features.row(static_cast<Eigen::Index>(i)) = cursor.take();
  out.clean_labels[i] = out.meta();
  if (mode == OpenLabelMode::uniform) {
    std::uniform_int_distribution<int> any(0, out.c - 1);
    out.noisy_labels[i] = any(rng);
  }
}

}  // namespace detail

/// Class-dependent mixed noise with exact counts per corrupted split:
/// floor(tau·rho·n) instances get outside features (clean label -> meta),
/// a disjoint floor(tau·(1-rho)·n) get a symmetric flip to one of the other
/// c-1 classes. Train and val are corrupted independently; test is untouched.
inline Dataset inject_mixed_noise(const Dataset& data, const NoiseSpec& spec,
                                  const Eigen::MatrixXd& reservoir) {
  detail::check_clean_input(data);
  spec.validate(data.c);
  if (reservoir.rows() > 0 && reservoir.cols() != data.features.cols()) {
    throw ShapeError("reservoir dimension does not match features");
  }
  std::mt19937_64 rng(spec.seed);
  Dataset out = data;

  struct Plan {
    std::vector<std::size_t> members;
    std::size_t open = 0, flip = 0;
  };
  std::vector<Plan> plans;
  std::size_t open_total = 0;
  for (Split s : {Split::train, Split::val}) {
    Plan p;
    p.members = data.indices(s);
    const auto n = p.members.size();
    p.open = detail::exact_count(spec.open_rate(), n);
    p.flip = detail::exact_count(spec.closed_rate(), n);
    if (p.open + p.flip > n) {
      throw ConfigError("requested corruption count exceeds split size");
    }
    open_total += p.open;
    plans.push_back(std::move(p));
  }
  if (static_cast<std::size_t>(reservoir.rows()) < open_total) {
    throw ResourceError("reservoir holds " + std::to_string(reservoir.rows()) +
                        " rows but " + std::to_string(open_total) +
                        " open-set replacements are required");
  }
  detail::ReservoirCursor cursor(reservoir, rng);
  std::uniform_int_distribution<int> other(0, data.c - 2);

  for (auto& p : plans) {
    std::shuffle(p.members.begin(), p.members.end(), rng);
    for (std::size_t k = 0; k < p.open; ++k) {
      detail::replace_with_open(out, p.members[k], cursor, spec.open_labels, rng);
    }
    for (std::size_t k = p.open; k < p.open + p.flip; ++k) {
      const auto i = p.members[k];
      const Label y = out.clean_labels[i];
      Label j = other(rng);
      if (j >= y) ++j;
      out.noisy_labels[i] = j;
    }
  }
  return out;
}

/// Region-dependent noise: each non-test instance belongs to the region with
/// the nearest centroid (on its original features). Within a region,
/// floor(open_rate·n_r) members are replaced by reservoir features; the
/// remaining members of clean class i are relabelled with exact counts
/// floor(flip(i,j)·n_ri) for every j != i.
inline Dataset inject_region_noise(const Dataset& data, const NoiseSpec& spec,
                                   const Eigen::MatrixXd& reservoir) {
  if (spec.structure != NoiseStructure::region_dependent) {
    throw ConfigError("inject_region_noise requires region_dependent structure");
  }
  detail::check_clean_input(data);
  spec.validate(data.c);
  for (const auto& reg : spec.regions) {
    if (reg.centroid.size() != data.features.cols()) {
      throw ShapeError("region centroid dimension does not match features");
    }
  }
  std::mt19937_64 rng(spec.seed);
  Dataset out = data;
  std::vector<Eigen::VectorXd> centers;
  for (const auto& reg : spec.regions) centers.push_back(reg.centroid);

  // groups[split][region]
  std::vector<std::vector<std::vector<std::size_t>>> groups;
  std::size_t open_total = 0;
  for (Split s : {Split::train, Split::val}) {
    std::vector<std::vector<std::size_t>> by_region(spec.regions.size());
    for (auto i : data.indices(s)) {
      by_region[detail::nearest_row(
                    centers, data.features.row(static_cast<Eigen::Index>(i)))]
          .push_back(i);
    }
    for (std::size_t r = 0; r < by_region.size(); ++r) {
      open_total += detail::exact_count(spec.regions[r].open_rate,
                                        by_region[r].size());
    }
    groups.push_back(std::move(by_region));
  }
  if (static_cast<std::size_t>(reservoir.rows()) < open_total) {
    throw ResourceError("reservoir holds " + std::to_string(reservoir.rows()) +
                        " rows but " + std::to_string(open_total) +
                        " open-set replacements are required");
  }
  if (open_total > 0 && reservoir.cols() != data.features.cols()) {
    throw ShapeError("reservoir dimension does not match features");
  }
  detail::ReservoirCursor cursor(reservoir, rng);

  for (auto& by_region : groups) {
    for (std::size_t r = 0; r < by_region.size(); ++r) {
      auto& members = by_region[r];
      const auto& reg = spec.regions[r];
      std::shuffle(members.begin(), members.end(), rng);
      const auto n_open = detail::exact_count(reg.open_rate, members.size());
      std::vector<std::vector<std::size_t>> by_class(data.c);
      for (std::size_t k = 0; k < members.size(); ++k) {
        if (k < n_open) {
          detail::replace_with_open(out, members[k], cursor, spec.open_labels, rng);
        } else {
          by_class[data.clean_labels[members[k]]].push_back(members[k]);
        }
      }
      for (int i = 0; i < data.c; ++i) {
        const auto& cls = by_class[i];
        std::size_t next = 0;
        for (int j = 0; j < data.c; ++j) {
          if (j == i) continue;
          const auto count = detail::exact_count(reg.flip(i, j), cls.size());
          for (std::size_t k = 0; k < count && next < cls.size(); ++k) {
            out.noisy_labels[cls[next++]] = j;
          }
        }
      }
    }
  }
  return out;
}

/// Analytic T* for class-dependent symmetric noise. Closed rows condition
/// on a closed clean class, so the flip rate is tau(1-rho)/(1-tau·rho). The
/// meta row is the label law of replaced instances: the class priors under
/// label-preserving replacement, uniform otherwise.
inline ExtendedTransitionMatrix true_extended_matrix(
    const NoiseSpec& spec, int c, std::vector<double> priors = {}) {
  if (spec.structure != NoiseStructure::class_dependent) {
    throw ConfigError("true_extended_matrix requires class_dependent noise");
  }
  if (c < 2) throw ConfigError("need at least 2 classes");
  spec.validate(c);
  const double closed_mass = 1.0 - spec.open_rate();
  if (closed_mass <= 0.0) {
    throw ConfigError("tau*rho = 1 leaves no closed-set instances");
  }
  if (priors.empty() || spec.open_labels == OpenLabelMode::uniform) {
    priors.assign(c, 1.0 / c);
  }
  if (static_cast<int>(priors.size()) != c) {
    throw ShapeError("priors must have c entries");
  }
  const double flip = spec.closed_rate() / closed_mass;
  Eigen::MatrixXd m(c + 1, c);
  for (int i = 0; i < c; ++i) {
    for (int j = 0; j < c; ++j) {
      m(i, j) = (i == j) ? 1.0 - flip : flip / (c - 1);
    }
  }
  for (int j = 0; j < c; ++j) m(c, j) = priors[j];
  return {m, MatrixOrigin::truth};
}

/// Ground truth for one region of region-dependent noise.
inline ExtendedTransitionMatrix true_region_matrix(const RegionNoise& region,
                                                   int c,
                                                   std::vector<double> priors = {}) {
  if (priors.empty()) priors.assign(c, 1.0 / c);
  Eigen::MatrixXd m(c + 1, c);
  m.topRows(c) = region.flip;
  for (int j = 0; j < c; ++j) m(c, j) = priors[j];
  return {m, MatrixOrigin::truth};
}

/// Symmetric c×c flip matrix with diagonal `keep`.
inline Eigen::MatrixXd symmetric_flip(int c, double keep) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Constant(c, c, (1.0 - keep) / (c - 1));
  m.diagonal().setConstant(keep);
  return m;
}

/// Stacks datasets row-wise (same c and d).
inline Dataset concat(const std::vector<Dataset>& parts) {
  if (parts.empty()) throw ConfigError("concat needs at least one dataset");
  Dataset out;
  out.c = parts.front().c;
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.c != out.c || p.features.cols() != parts.front().features.cols()) {
      throw ShapeError("concat parts disagree on c or d");
    }
    rows += p.features.rows();
  }
  out.features.resize(rows, parts.front().features.cols());
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.features.middleRows(at, p.features.rows()) = p.features;
    at += p.features.rows();
    out.clean_labels.insert(out.clean_labels.end(), p.clean_labels.begin(),
                            p.clean_labels.end());
    out.noisy_labels.insert(out.noisy_labels.end(), p.noisy_labels.begin(),
                            p.noisy_labels.end());
    out.split.insert(out.split.end(), p.split.begin(), p.split.end());
  }
  return out;
}

}  // namespace mixnoise
