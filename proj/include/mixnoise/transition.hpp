#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mixnoise/clusterkit.hpp"
#include "mixnoise/error.hpp"
#include "mixnoise/extended_matrix.hpp"
#include "mixnoise/losses.hpp"
#include "mixnoise/netcore.hpp"
#include "mixnoise/synthdata.hpp"

namespace mixnoise {

/// T^T g: noisy-class posterior implied by the clean posterior g (length
/// c+1, meta last).
inline Eigen::VectorXd noisy_posterior(const ExtendedTransitionMatrix& t,
                                       const Eigen::VectorXd& g) {
  t.check_shape();
  if (g.size() != t.entries.rows()) {
    throw ShapeError("posterior length " + std::to_string(g.size()) +
                     " does not match T* rows " + std::to_string(t.entries.rows()));
  }
  return t.entries.transpose() * g;
}

/// Sum of entrywise absolute differences.
inline double l1_error(const Eigen::MatrixXd& estimate, const Eigen::MatrixXd& truth) {
  if (estimate.rows() != truth.rows() || estimate.cols() != truth.cols()) {
    throw ShapeError("l1_error needs matrices of equal shape");
  }
  return (estimate - truth).cwiseAbs().sum();
}

inline double l1_error(const ExtendedTransitionMatrix& estimate,
                       const ExtendedTransitionMatrix& truth) {
  return l1_error(estimate.entries, truth.entries);
}

/// At an anchor of class i the noisy posterior equals row i of T*, so a row
/// estimate is the mean anchor posterior, renormalized to sum to one.
inline Eigen::RowVectorXd estimate_row(const AnchorRow& anchors) {
  if (anchors.posteriors.empty()) {
    throw AnchorShortageError("no anchors for transition row", 0);
  }
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(anchors.posteriors.front().size());
  for (const auto& p : anchors.posteriors) mean += p;
  mean /= static_cast<double>(anchors.posteriors.size());
  mean = mean.cwiseMax(0.0);
  const double total = mean.sum();
  if (!(total > 0.0)) throw AnchorShortageError("anchor posteriors sum to zero", 0);
  return (mean / total).transpose();
}

enum class FeatureSpace { representation, features };

inline const char* to_string(FeatureSpace s) {
  return s == FeatureSpace::representation ? "representation" : "features";
}

inline FeatureSpace feature_space_from_string(const std::string& s) {
  if (s == "representation") return FeatureSpace::representation;
  if (s == "features") return FeatureSpace::features;
  throw ConfigError("unknown clustering space '" + s + "'");
}

struct AnchorConfig {
  double percentile = 97.0;
  std::size_t m = 5;
  bool greedy_matching = false;
  FeatureSpace space = FeatureSpace::representation;
  std::size_t kmeans_restarts = 10;
  std::size_t max_iters = 100;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(percentile > 0.0 && percentile <= 100.0)) {
      throw ConfigError("anchor percentile must lie in (0, 100]");
    }
    if (m < 1) throw ConfigError("anchor count m must be >= 1");
    if (kmeans_restarts < 1 || max_iters < 1) {
      throw ConfigError("kmeans restarts and max_iters must be >= 1");
    }
  }
};

/// Points in the clustering space for the given dataset rows (one row per
/// example).
inline Eigen::MatrixXd clustering_points(const ClassifierParams& warmup, const Dataset& data,
                                         const std::vector<std::size_t>& idx,
                                         FeatureSpace space) {
  if (space == FeatureSpace::features) {
    return data.columns(idx).transpose();
  }
  return representations(warmup, data, idx).transpose();
}

/// What estimation reads off the warmup model for the train split.
struct EstimationInputs {
  int c = 0;
  std::vector<std::size_t> train_ids;
  Eigen::MatrixXd points;      // n x q
  Eigen::MatrixXd posteriors;  // c x n, noisy-class posteriors
  std::vector<Label> noisy;
};

inline EstimationInputs prepare_estimation(const ClassifierParams& warmup, const Dataset& data,
                                           const AnchorConfig& cfg) {
  if (warmup.out_dim() != data.c) {
    throw ShapeError("warmup model must output c noisy-class posteriors");
  }
  EstimationInputs in;
  in.c = data.c;
  in.train_ids = data.indices(Split::train);
  if (in.train_ids.empty()) throw ConfigError("train split is empty");
  auto pass = forward_batch(warmup, data.columns(in.train_ids));
  in.posteriors = pass.probs;
  in.points = cfg.space == FeatureSpace::representation
                  ? Eigen::MatrixXd(pass.hidden().transpose())
                  : Eigen::MatrixXd(data.columns(in.train_ids).transpose());
  for (auto i : in.train_ids) in.noisy.push_back(data.noisy_labels[i]);
  return in;
}

/// k = c+1 clustering with the meta cluster and class map resolved.
inline ClusterModel fine_clusters(const EstimationInputs& in, const AnchorConfig& cfg) {
  cfg.validate();
  auto model = kmeans_restarts(in.points, static_cast<std::size_t>(in.c) + 1, cfg.seed,
                               cfg.kmeans_restarts, cfg.max_iters);
  identify_meta_cluster(model, in.c);
  assign_classes(model, in.noisy, in.c, cfg.greedy_matching);
  model.point_ids = in.train_ids;
  return model;
}

/// Anchor-based T* over all train points: closed rows from percentile
/// anchors inside each class cluster, meta row from the points nearest the
/// meta centroid.
inline ExtendedTransitionMatrix estimate_extended(const EstimationInputs& in,
                                                  const ClusterModel& fine,
                                                  const AnchorConfig& cfg,
                                                  AnchorSet* anchors_out = nullptr) {
  cfg.validate();
  AnchorSet set = detect_closed_anchors(in.posteriors, fine, cfg.percentile, cfg.m);
  set.rows[static_cast<std::size_t>(in.c)] =
      detect_meta_anchors(in.points, in.posteriors, fine, cfg.m, &set);
  Eigen::MatrixXd m(in.c + 1, in.c);
  for (int r = 0; r <= in.c; ++r) {
    try {
      m.row(r) = estimate_row(set.rows[static_cast<std::size_t>(r)]);
    } catch (const AnchorShortageError&) {
      throw AnchorShortageError("anchor shortage for row " + std::to_string(r),
                                static_cast<std::size_t>(r));
    }
  }
  if (anchors_out) *anchors_out = std::move(set);
  return {m, MatrixOrigin::estimated};
}

/// One T* per coarse cluster plus the coarse clustering used for routing.
struct TransitionBundle {
  std::vector<ExtendedTransitionMatrix> matrices;
  ClusterModel coarse;
  FeatureSpace space = FeatureSpace::representation;

  std::size_t k() const { return matrices.size(); }

  void validate(double tol = 1e-9) const {
    if (matrices.empty()) throw ConfigError("transition bundle is empty");
    if (coarse.k() != matrices.size()) {
      throw ShapeError("bundle has " + std::to_string(matrices.size()) +
                       " matrices but " + std::to_string(coarse.k()) + " coarse clusters");
    }
    for (const auto& m : matrices) m.validate(tol);
  }

  static TransitionBundle single(ExtendedTransitionMatrix t, int q) {
    TransitionBundle b;
    t.cluster_id = 0;
    b.matrices.push_back(std::move(t));
    b.coarse.centroids = Eigen::MatrixXd::Zero(1, q);
    return b;
  }
};

/// Algorithm: cluster the representations into k coarse clusters and run
/// the anchor procedure on each cluster's points. Closed-class pools are the
/// cluster's members of that class's fine cluster; the meta pool is the
/// cluster's members of the global meta cluster. A row whose pool is too
/// small (closed: fewer than m, meta: empty) copies the global row and is
/// flagged in `fallback_rows`.
inline TransitionBundle estimate_cluster_dependent(const EstimationInputs& in,
                                                   const ClusterModel& fine, std::size_t k,
                                                   const AnchorConfig& cfg) {
  cfg.validate();
  const auto n = static_cast<std::size_t>(in.points.rows());
  if (k < 1 || k > n) {
    throw ConfigError("cluster-dependent estimation needs 1 <= k <= n (k=" +
                      std::to_string(k) + ")");
  }
  const auto global = estimate_extended(in, fine, cfg);

  TransitionBundle bundle;
  bundle.space = cfg.space;
  bundle.coarse = kmeans_restarts(in.points, k, cfg.seed + 1, cfg.kmeans_restarts, cfg.max_iters);
  bundle.coarse.point_ids = in.train_ids;

  const auto meta = *fine.meta_cluster;
  for (std::size_t r = 0; r < k; ++r) {
    std::vector<bool> in_cluster(n, false);
    for (auto p : bundle.coarse.members(r)) in_cluster[p] = true;
    auto restrict = [&](std::size_t fine_cluster) {
      std::vector<std::size_t> out;
      for (auto p : fine.members(fine_cluster)) {
        if (in_cluster[p]) out.push_back(p);
      }
      return out;
    };

    Eigen::MatrixXd m(in.c + 1, in.c);
    std::vector<bool> fallback(static_cast<std::size_t>(in.c) + 1, false);
    for (Label i = 0; i < in.c; ++i) {
      std::vector<std::size_t> pool;
      if (auto cl = fine.cluster_of_class(i)) pool = restrict(*cl);
      if (pool.size() < cfg.m) {
        m.row(i) = global.entries.row(i);
        fallback[static_cast<std::size_t>(i)] = true;
        continue;
      }
      auto picked = select_by_percentile(std::move(pool), in.posteriors.row(i).transpose(),
                                         cfg.percentile, cfg.m);
      m.row(i) = estimate_row(detail::make_row(std::move(picked), in.posteriors));
    }
    auto meta_pool = restrict(meta);
    if (meta_pool.empty()) {
      m.row(in.c) = global.entries.row(in.c);
      fallback[static_cast<std::size_t>(in.c)] = true;
    } else {
      const Eigen::VectorXd center = centroid_of(in.points, meta_pool);
      auto picked = nearest_members(in.points, std::move(meta_pool), center, cfg.m);
      m.row(in.c) = estimate_row(detail::make_row(std::move(picked), in.posteriors));
    }
    ExtendedTransitionMatrix t(m, MatrixOrigin::estimated);
    t.cluster_id = r;
    t.fallback_rows = std::move(fallback);
    bundle.matrices.push_back(std::move(t));
  }
  return bundle;
}

/// Coarse cluster for every dataset row (nearest coarse centroid in the
/// bundle's clustering space, computed with the frozen warmup model).
inline std::vector<std::size_t> route_examples(const TransitionBundle& bundle,
                                               const ClassifierParams& warmup,
                                               const Dataset& data) {
  std::vector<std::size_t> routes(data.size(), 0);
  if (bundle.k() <= 1) return routes;
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  const auto pts = clustering_points(warmup, data, all, bundle.space);
  for (std::size_t i = 0; i < data.size(); ++i) {
    routes[i] = bundle.coarse.nearest(pts.row(static_cast<Eigen::Index>(i)).transpose());
  }
  return routes;
}

/// d(reweighted loss)/dT* for one example: nonzero only in column y, where
/// it equals dL/df · g with f = (T^T g)[y]. The stop-gradient form treats the
/// importance weight as a constant; the full form differentiates it too.
/// Zero when the floor is active.
inline Eigen::MatrixXd reweighted_transition_gradient(const ExtendedTransitionMatrix& t,
                                                      const Eigen::Ref<const Eigen::VectorXd>& g,
                                                      Label y, double epsilon,
                                                      bool differentiate_weight) {
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(t.entries.rows(), t.entries.cols());
  const double f = t.entries.col(y).dot(g);
  if (f < epsilon) return d;
  const double dl_df = differentiate_weight ? g(y) / (f * f) * (std::log(f) - 1.0)
                                            : -g(y) / (f * f);
  d.col(y) = dl_df * g;
  return d;
}

struct RevisionConfig {
  /// Classifier fine-tuning rate (Adam).
  double learning_rate = 5e-7;
  /// Adam rate for the additive slack on T*.
  double slack_learning_rate = 5e-7;
  int epochs = 10;
  int batch_size = 128;
  double epsilon = 1e-8;
  bool differentiate_weight = false;
  std::uint64_t seed = 0;
};

struct RevisionResult {
  TransitionBundle bundle;
  ClassifierParams params;
  /// Final slack (revised minus initial) per matrix.
  std::vector<Eigen::MatrixXd> slack;
  /// Mean reweighted train objective after each epoch.
  std::vector<double> objective_trace;
};

/// Jointly fine-tunes the classifier and an additive slack on every T* by
/// Adam on the reweighted objective. After each step the revised matrix is
/// clamped to [0,1] and row-renormalized.
inline RevisionResult revise(const TransitionBundle& bundle, ClassifierParams params,
                             const Dataset& data, const std::vector<std::size_t>& routes,
                             const RevisionConfig& cfg) {
  bundle.validate();
  if (routes.size() != data.size()) throw ShapeError("routes must cover every dataset row");
  if (params.out_dim() != data.c + 1) throw ShapeError("revision needs a (c+1)-output model");
  RevisionResult result{bundle, params, {}, {}};
  for (const auto& t : bundle.matrices) {
    result.slack.push_back(Eigen::MatrixXd::Zero(t.entries.rows(), t.entries.cols()));
  }
  if (cfg.epochs <= 0) return result;

  std::vector<ExtendedTransitionMatrix> current = bundle.matrices;
  std::vector<Eigen::MatrixXd> slack = result.slack;
  Adam net_opt(cfg.learning_rate);
  Adam slack_opt(cfg.slack_learning_rate);
  std::mt19937_64 rng(cfg.seed);
  auto train = data.indices(Split::train);
  if (train.empty()) throw ConfigError("train split is empty");
  const auto batch = static_cast<std::size_t>(std::max(cfg.batch_size, 1));
  const int c = data.c;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    double epoch_total = 0.0;
    for (std::size_t at = 0; at < train.size(); at += batch) {
      std::vector<std::size_t> ids(
          train.begin() + static_cast<std::ptrdiff_t>(at),
          train.begin() + static_cast<std::ptrdiff_t>(std::min(train.size(), at + batch)));
      auto pass = forward_batch(params, data.columns(ids));
      Eigen::MatrixXd dlogits(pass.probs.rows(), pass.probs.cols());
      std::vector<Eigen::MatrixXd> dT;
      for (const auto& t : current) dT.push_back(Eigen::MatrixXd::Zero(t.entries.rows(), c));
      double total = 0.0;
      for (std::size_t j = 0; j < ids.size(); ++j) {
        const auto col = static_cast<Eigen::Index>(j);
        const auto r = routes[ids[j]];
        const Label y = data.noisy_labels[ids[j]];
        LossAux aux;
        aux.transition = &current[r];
        aux.epsilon = cfg.epsilon;
        aux.differentiate_weight = cfg.differentiate_weight;
        const auto g = pass.probs.col(col);
        auto v = loss_and_logit_gradient(LossKind::reweighted, g, y, aux, dlogits.col(col));
        total += v.loss;
        if (v.floored) continue;
        dT[r] += reweighted_transition_gradient(current[r], g, y, cfg.epsilon,
                                                cfg.differentiate_weight);
      }
      if (!std::isfinite(total)) {
        throw DivergenceError<TransitionBundle>(
            "non-finite revision loss at epoch " + std::to_string(epoch), result.bundle);
      }
      epoch_total += total;
      const double scale = 1.0 / static_cast<double>(ids.size());
      ParamTensors grads = zeros_like(params);
      backpropagate(params, pass, dlogits * scale, grads);
      net_opt.tick();
      net_opt.step(params, grads);
      slack_opt.tick();
      for (std::size_t r = 0; r < current.size(); ++r) {
        slack_opt.update(r, slack[r], dT[r] * scale);
        Eigen::MatrixXd revised = bundle.matrices[r].entries + slack[r];
        project_rows(revised);
        slack[r] = revised - bundle.matrices[r].entries;
        current[r].entries = revised;
      }
    }
    result.objective_trace.push_back(epoch_total / static_cast<double>(train.size()));
    result.params = params;
    for (std::size_t r = 0; r < current.size(); ++r) {
      result.bundle.matrices[r].entries = current[r].entries;
      result.bundle.matrices[r].origin = MatrixOrigin::revised;
    }
    result.slack = slack;
  }
  return result;
}

}  // namespace mixnoise
