#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mixnoise/error.hpp"
#include "mixnoise/extended_matrix.hpp"

namespace mixnoise {

/// Hard k-means partition of a point set (rows of the input matrix).
struct ClusterModel {
  Eigen::MatrixXd centroids;  // k x q
  std::vector<std::size_t> assignment;
  double loss = 0.0;
  /// Loss after every Lloyd iteration.
  std::vector<double> loss_trace;
  std::optional<std::size_t> meta_cluster;
  /// cluster -> class; the meta cluster maps to the meta label c.
  std::optional<std::vector<Label>> class_of_cluster;
  /// Dataset row of every clustered point (identity when not set).
  std::vector<std::size_t> point_ids;

  std::size_t k() const { return static_cast<std::size_t>(centroids.rows()); }

  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> s(k(), 0);
    for (auto a : assignment) ++s[a];
    return s;
  }

  /// Point positions (not dataset rows) assigned to `cluster`, ascending.
  std::vector<std::size_t> members(std::size_t cluster) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < assignment.size(); ++i) {
      if (assignment[i] == cluster) out.push_back(i);
    }
    return out;
  }

  /// Nearest centroid (squared Euclidean, ties to the lowest index).
  std::size_t nearest(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < centroids.rows(); ++j) {
      const double d = (centroids.row(j).transpose() - x).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<std::size_t>(j);
      }
    }
    return best;
  }

  std::optional<std::size_t> cluster_of_class(Label cls) const {
    if (!class_of_cluster) return std::nullopt;
    for (std::size_t j = 0; j < class_of_cluster->size(); ++j) {
      if ((*class_of_cluster)[j] == cls) return j;
    }
    return std::nullopt;
  }
};

/// Mean of the listed rows, summed in list order.
inline Eigen::VectorXd centroid_of(const Eigen::MatrixXd& points,
                                   const std::vector<std::size_t>& rows) {
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(points.cols());
  for (auto r : rows) sum += points.row(static_cast<Eigen::Index>(r)).transpose();
  if (!rows.empty()) sum /= static_cast<double>(rows.size());
  return sum;
}

inline double kmeans_objective(const Eigen::MatrixXd& points,
                               const Eigen::MatrixXd& centroids,
                               const std::vector<std::size_t>& assignment) {
  double total = 0.0;
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    total += (points.row(static_cast<Eigen::Index>(i)) -
              centroids.row(static_cast<Eigen::Index>(assignment[i])))
                 .squaredNorm();
  }
  return total;
}

namespace detail {

inline Eigen::MatrixXd kmeanspp_seeds(const Eigen::MatrixXd& points, std::size_t k,
                                      std::mt19937_64& rng) {
  const auto n = static_cast<std::size_t>(points.rows());
  Eigen::MatrixXd centers(static_cast<Eigen::Index>(k), points.cols());
  std::vector<bool> chosen(n, false);
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  std::size_t pick = first(rng);
  chosen[pick] = true;
  centers.row(0) = points.row(static_cast<Eigen::Index>(pick));
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) {
    d2[i] = (points.row(static_cast<Eigen::Index>(i)) - centers.row(0)).squaredNorm();
  }
  for (std::size_t c = 1; c < k; ++c) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    if (total > 0.0) {
      std::discrete_distribution<std::size_t> next(d2.begin(), d2.end());
      pick = next(rng);
    } else {
      // Every point coincides with a chosen seed: take an unused index.
      std::vector<std::size_t> unused;
      for (std::size_t i = 0; i < n; ++i) {
        if (!chosen[i]) unused.push_back(i);
      }
      std::uniform_int_distribution<std::size_t> any(0, unused.size() - 1);
      pick = unused[any(rng)];
    }
    chosen[pick] = true;
    centers.row(static_cast<Eigen::Index>(c)) = points.row(static_cast<Eigen::Index>(pick));
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], (points.row(static_cast<Eigen::Index>(i)) -
                               centers.row(static_cast<Eigen::Index>(c)))
                                  .squaredNorm());
    }
  }
  return centers;
}

}  // namespace detail

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iters` is reached. A cluster that empties takes over the
/// point farthest from its current centroid.
inline ClusterModel kmeans(const Eigen::MatrixXd& points, std::size_t k,
                           std::uint64_t seed, std::size_t max_iters = 100) {
  const auto n = static_cast<std::size_t>(points.rows());
  if (k < 1) throw ConfigError("kmeans needs k >= 1");
  if (n < k) {
    throw ConfigError("kmeans needs at least k points (n=" + std::to_string(n) +
                      ", k=" + std::to_string(k) + ")");
  }
  if (max_iters < 1) throw ConfigError("kmeans needs max_iters >= 1");

  std::mt19937_64 rng(seed);
  ClusterModel model;
  model.centroids = detail::kmeanspp_seeds(points, k, rng);
  model.point_ids.resize(n);
  std::iota(model.point_ids.begin(), model.point_ids.end(), 0);
  std::vector<std::size_t> previous;
  std::vector<std::size_t>& assign = model.assignment;
  assign.assign(n, 0);

  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      assign[i] = model.nearest(points.row(static_cast<Eigen::Index>(i)).transpose());
    }
    // Repair empty clusters one at a time.
    for (;;) {
      auto sizes = model.sizes();
      auto empty = std::find(sizes.begin(), sizes.end(), std::size_t{0});
      if (empty == sizes.end()) break;
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (sizes[assign[i]] < 2) continue;
        const double d = (points.row(static_cast<Eigen::Index>(i)) -
                          model.centroids.row(static_cast<Eigen::Index>(assign[i])))
                             .squaredNorm();
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      const auto target = static_cast<std::size_t>(empty - sizes.begin());
      assign[far] = target;
      model.centroids.row(static_cast<Eigen::Index>(target)) =
          points.row(static_cast<Eigen::Index>(far));
    }
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), points.cols());
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(static_cast<Eigen::Index>(assign[i])) += points.row(static_cast<Eigen::Index>(i));
      ++counts[assign[i]];
    }
    for (std::size_t j = 0; j < k; ++j) {
      model.centroids.row(static_cast<Eigen::Index>(j)) =
          sums.row(static_cast<Eigen::Index>(j)) / static_cast<double>(counts[j]);
    }
    model.loss = kmeans_objective(points, model.centroids, assign);
    model.loss_trace.push_back(model.loss);
    if (assign == previous) break;
    previous = assign;
  }
  return model;
}

/// Best (lowest loss) of `restarts` seeded runs; ties keep the earliest.
inline ClusterModel kmeans_restarts(const Eigen::MatrixXd& points, std::size_t k,
                                    std::uint64_t seed, std::size_t restarts,
                                    std::size_t max_iters = 100) {
  if (restarts < 1) throw ConfigError("kmeans needs at least one restart");
  std::seed_seq seq{seed};
  std::vector<std::uint64_t> seeds(restarts);
  seq.generate(seeds.begin(), seeds.end());
  ClusterModel best = kmeans(points, k, seeds[0], max_iters);
  for (std::size_t r = 1; r < restarts; ++r) {
    auto cand = kmeans(points, k, seeds[r], max_iters);
    if (cand.loss < best.loss) best = std::move(cand);
  }
  return best;
}

/// The smallest of the c+1 clusters is the meta (open-set) cluster; ties go
/// to the lowest index.
inline std::size_t identify_meta_cluster(ClusterModel& model, int c) {
  if (model.k() != static_cast<std::size_t>(c) + 1) {
    throw ConfigError("meta-cluster identification needs k = c+1 clusters (k=" +
                      std::to_string(model.k()) + ", c=" + std::to_string(c) + ")");
  }
  const auto sizes = model.sizes();
  const auto meta = static_cast<std::size_t>(
      std::min_element(sizes.begin(), sizes.end()) - sizes.begin());
  model.meta_cluster = meta;
  return meta;
}

/// counts[r][j]: number of points with noisy label j in closed cluster r.
using CountMatrix = std::vector<std::vector<std::size_t>>;

/// Maximum-weight bijection rows -> columns on a square count matrix. Among
/// optimal matchings the lexicographically smallest (row 0's column first)
/// is returned. Exact subset DP, so c is limited to 20.
inline std::vector<std::size_t> max_weight_matching(const CountMatrix& counts) {
  const std::size_t c = counts.size();
  if (c > 20) throw ConfigError("bipartite class matching supports at most 20 classes");
  for (const auto& row : counts) {
    if (row.size() != c) throw ShapeError("count matrix must be square");
  }
  const std::size_t full = std::size_t{1} << c;
  // best[mask]: best total for rows popcount(mask)..c-1 given columns in mask are taken.
  std::vector<long long> best(full, -1);
  best[full - 1] = 0;
  for (std::size_t mask = full - 1; mask-- > 0;) {
    const auto row = static_cast<std::size_t>(__builtin_popcountll(mask));
    long long b = -1;
    for (std::size_t j = 0; j < c; ++j) {
      if (mask & (std::size_t{1} << j)) continue;
      const auto nxt = best[mask | (std::size_t{1} << j)];
      if (nxt < 0) continue;
      b = std::max(b, static_cast<long long>(counts[row][j]) + nxt);
    }
    best[mask] = b;
  }
  std::vector<std::size_t> out(c);
  std::size_t mask = 0;
  for (std::size_t row = 0; row < c; ++row) {
    for (std::size_t j = 0; j < c; ++j) {
      if (mask & (std::size_t{1} << j)) continue;
      const auto nxt = best[mask | (std::size_t{1} << j)];
      if (nxt >= 0 && static_cast<long long>(counts[row][j]) + nxt == best[mask]) {
        out[row] = j;
        mask |= std::size_t{1} << j;
        break;
      }
    }
  }
  return out;
}

/// Class-order greedy: class j takes the unclaimed cluster holding the most
/// noisy-j points (ties to the lowest cluster).
inline std::vector<std::size_t> greedy_matching(const CountMatrix& counts) {
  const std::size_t c = counts.size();
  std::vector<std::size_t> out(c, c);
  std::vector<bool> taken(c, false);
  for (std::size_t j = 0; j < c; ++j) {
    std::size_t pick = c;
    for (std::size_t r = 0; r < c; ++r) {
      if (taken[r]) continue;
      if (pick == c || counts[r][j] > counts[pick][j]) pick = r;
    }
    taken[pick] = true;
    out[pick] = j;
  }
  return out;
}

inline std::size_t matching_weight(const CountMatrix& counts,
                                   const std::vector<std::size_t>& match) {
  std::size_t total = 0;
  for (std::size_t r = 0; r < match.size(); ++r) total += counts[r][match[r]];
  return total;
}

/// Maps closed clusters to classes by matching on noisy-label counts. Label
/// `noisy_labels[i]` belongs to clustered point i. The meta cluster maps to
/// the meta label c.
inline std::vector<Label> assign_classes(ClusterModel& model,
                                         const std::vector<Label>& noisy_labels, int c,
                                         bool greedy = false) {
  if (!model.meta_cluster) throw ConfigError("assign_classes needs the meta cluster first");
  if (noisy_labels.size() != model.assignment.size()) {
    throw ShapeError("noisy labels do not align with clustered points");
  }
  std::vector<std::size_t> closed;
  for (std::size_t j = 0; j < model.k(); ++j) {
    if (j != *model.meta_cluster) closed.push_back(j);
  }
  if (closed.size() < static_cast<std::size_t>(c)) {
    throw ConfigError("fewer closed clusters than classes");
  }
  closed.resize(static_cast<std::size_t>(c));
  CountMatrix counts(closed.size(), std::vector<std::size_t>(closed.size(), 0));
  std::vector<std::ptrdiff_t> row_of(model.k(), -1);
  for (std::size_t r = 0; r < closed.size(); ++r) row_of[closed[r]] = static_cast<std::ptrdiff_t>(r);
  for (std::size_t i = 0; i < noisy_labels.size(); ++i) {
    const auto r = row_of[model.assignment[i]];
    if (r < 0) continue;
    const Label y = noisy_labels[i];
    if (y < 0 || y >= c) throw ShapeError("noisy label out of range");
    ++counts[static_cast<std::size_t>(r)][static_cast<std::size_t>(y)];
  }
  const auto match = greedy ? greedy_matching(counts) : max_weight_matching(counts);
  std::vector<Label> map(model.k(), c);
  for (std::size_t r = 0; r < closed.size(); ++r) {
    map[closed[r]] = static_cast<Label>(match[r]);
  }
  model.class_of_cluster = map;
  return map;
}

/// Anchors for one row of T*: clustered-point positions and the noisy
/// posterior vector read off at each.
struct AnchorRow {
  std::vector<std::size_t> points;
  std::vector<Eigen::VectorXd> posteriors;
  bool global_pool = false;
};

/// Rows 0..c-1 for the closed classes, row c for the meta class.
struct AnchorSet {
  std::vector<AnchorRow> rows;
  std::vector<std::string> warnings;
};

/// Picks `m` candidates by descending score, starting at the rank of the
/// given percentile: 0-based start = max(ceil((100-p)/100 · N) - 1, 0),
/// shifted left when fewer than m candidates remain. Ties rank by position.
inline std::vector<std::size_t> select_by_percentile(std::vector<std::size_t> candidates,
                                                     const Eigen::Ref<const Eigen::VectorXd>& scores,
                                                     double percentile, std::size_t m) {
  if (!(percentile > 0.0 && percentile <= 100.0)) {
    throw ConfigError("anchor percentile must lie in (0, 100]");
  }
  if (candidates.size() < m) throw ConfigError("not enough candidates");
  std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
    const double sa = scores(static_cast<Eigen::Index>(a));
    const double sb = scores(static_cast<Eigen::Index>(b));
    if (sa != sb) return sa > sb;
    return a < b;
  });
  const double n = static_cast<double>(candidates.size());
  const double rank = std::ceil((100.0 - percentile) * n / 100.0 - 1e-9);
  auto start = static_cast<std::size_t>(std::max(rank - 1.0, 0.0));
  start = std::min(start, candidates.size() - m);
  return {candidates.begin() + static_cast<std::ptrdiff_t>(start),
          candidates.begin() + static_cast<std::ptrdiff_t>(start + m)};
}

namespace detail {

inline AnchorRow make_row(std::vector<std::size_t> points,
                          const Eigen::MatrixXd& posteriors) {
  AnchorRow row;
  for (auto p : points) row.posteriors.push_back(posteriors.col(static_cast<Eigen::Index>(p)));
  row.points = std::move(points);
  return row;
}

}  // namespace detail

/// Closed-class anchors. `posteriors` is c x n (noisy posteriors of the
/// clustered points). For class i the pool is the class-i cluster; when it
/// holds fewer than m points the whole point set is used instead.
inline AnchorSet detect_closed_anchors(const Eigen::MatrixXd& posteriors,
                                       const ClusterModel& model, double percentile,
                                       std::size_t m) {
  if (m < 1) throw ConfigError("anchor count m must be >= 1");
  if (!model.class_of_cluster) throw ConfigError("clusters have no class assignment");
  if (static_cast<std::size_t>(posteriors.cols()) != model.assignment.size()) {
    throw ShapeError("posteriors do not align with clustered points");
  }
  const int c = static_cast<int>(posteriors.rows());
  AnchorSet set;
  set.rows.resize(static_cast<std::size_t>(c) + 1);
  for (Label i = 0; i < c; ++i) {
    std::vector<std::size_t> pool;
    if (auto cl = model.cluster_of_class(i)) pool = model.members(*cl);
    bool global = false;
    if (pool.size() < m) {
      pool.resize(model.assignment.size());
      std::iota(pool.begin(), pool.end(), 0);
      global = true;
      set.warnings.push_back("class " + std::to_string(i) +
                             " cluster too small; using the global candidate pool");
    }
    if (pool.size() < m) {
      throw AnchorShortageError("not enough anchor candidates for class " + std::to_string(i),
                                static_cast<std::size_t>(i));
    }
    auto picked = select_by_percentile(std::move(pool), posteriors.row(i).transpose(),
                                       percentile, m);
    set.rows[static_cast<std::size_t>(i)] = detail::make_row(std::move(picked), posteriors);
    set.rows[static_cast<std::size_t>(i)].global_pool = global;
  }
  return set;
}

/// The m members of `pool` nearest `center` (squared Euclidean, ties by
/// position).
inline std::vector<std::size_t> nearest_members(const Eigen::MatrixXd& points,
                                                std::vector<std::size_t> pool,
                                                const Eigen::VectorXd& center, std::size_t m) {
  std::vector<double> dist(points.rows(), 0.0);
  for (auto p : pool) {
    dist[p] = (points.row(static_cast<Eigen::Index>(p)).transpose() - center).squaredNorm();
  }
  std::stable_sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) {
    if (dist[a] != dist[b]) return dist[a] < dist[b];
    return a < b;
  });
  pool.resize(std::min(m, pool.size()));
  return pool;
}

/// Meta anchors: the m meta-cluster points nearest its centroid. When the
/// cluster is smaller than m, all its points are used and a warning is
/// recorded in `set`.
inline AnchorRow detect_meta_anchors(const Eigen::MatrixXd& points,
                                     const Eigen::MatrixXd& posteriors,
                                     const ClusterModel& model, std::size_t m,
                                     AnchorSet* set = nullptr) {
  if (m < 1) throw ConfigError("anchor count m must be >= 1");
  if (!model.meta_cluster) throw ConfigError("meta cluster not identified");
  auto pool = model.members(*model.meta_cluster);
  if (pool.empty()) {
    throw AnchorShortageError("meta cluster is empty", static_cast<std::size_t>(posteriors.rows()));
  }
  if (pool.size() < m && set) {
    set->warnings.push_back("meta cluster has " + std::to_string(pool.size()) +
                            " points; using m=" + std::to_string(pool.size()));
  }
  const Eigen::VectorXd center =
      model.centroids.row(static_cast<Eigen::Index>(*model.meta_cluster)).transpose();
  return detail::make_row(nearest_members(points, std::move(pool), center, m), posteriors);
}

}  // namespace mixnoise
