#pragma once

#include <Eigen/Dense>

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mixnoise/error.hpp"
#include "mixnoise/losses.hpp"
#include "mixnoise/netcore.hpp"
#include "mixnoise/synthdata.hpp"
#include "mixnoise/transition.hpp"

namespace mixnoise {

struct RobustConfig {
  LossKind objective = LossKind::reweighted;
  std::optional<TransitionBundle> bundle;
  TrainConfig train;
  /// Floor on (T^T g)[y] in the forward and reweighted losses.
  double epsilon = 1e-8;
  bool differentiate_weight = false;
  bool revise = false;
  RevisionConfig revision;
  /// Initialize from the warmup model (hidden layers and closed-class head)
  /// instead of fresh weights.
  bool warm_start = false;

  void validate() const {
    train.validate();
    if (!(epsilon > 0.0 && epsilon <= 1e-3)) {
      throw ConfigError("epsilon must lie in (0, 1e-3]");
    }
    if (objective != LossKind::ce && !bundle) {
      throw ConfigError(std::string(to_string(objective)) + " objective needs a transition bundle");
    }
    if (bundle) bundle->validate();
    if (revise && objective != LossKind::reweighted) {
      throw ConfigError("revision applies to the reweighted objective only");
    }
  }
};

struct RobustResult {
  ClassifierParams params;
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  /// Set when revision ran.
  std::optional<TransitionBundle> revised;
  std::vector<double> revision_trace;
};

/// Per-example loss for the configured objective; `routes[i]` selects the
/// bundle matrix for dataset row i.
inline ExampleLoss robust_loss(const Dataset& data, const RobustConfig& cfg,
                               const std::vector<ExtendedTransitionMatrix>* matrices,
                               const std::vector<std::size_t>* routes) {
  const LossKind kind = cfg.objective;
  const double eps = cfg.epsilon;
  const bool diff = cfg.differentiate_weight;
  return [&data, kind, eps, diff, matrices, routes](
             std::size_t i, const Eigen::Ref<const Eigen::VectorXd>& probs,
             Eigen::Ref<Eigen::VectorXd> d) {
    LossAux aux;
    aux.epsilon = eps;
    aux.differentiate_weight = diff;
    if (kind != LossKind::ce) aux.transition = &(*matrices)[(*routes)[i]];
    return loss_and_logit_gradient(kind, probs, data.noisy_labels[i], aux, d);
  };
}

/// Trains the (c+1)-output classifier g on the noisy train split with the
/// selected objective, then optionally revises the bundle jointly with g.
inline RobustResult train_robust(const Dataset& data, const RobustConfig& cfg,
                                 const std::vector<std::size_t>& routes,
                                 const ClassifierParams* warmup = nullptr) {
  cfg.validate();
  if (routes.size() != data.size()) throw ShapeError("routes must cover every dataset row");
  if (cfg.bundle) {
    for (auto r : routes) {
      if (r >= cfg.bundle->k()) throw ShapeError("route index outside the bundle");
    }
  }
  std::mt19937_64 rng(cfg.train.seed);
  auto params = ClassifierParams::init(data.dim(), cfg.train.hidden, data.c + 1,
                                       cfg.train.activation, rng);
  if (cfg.warm_start) {
    if (!warmup) throw ConfigError("warm_start needs the warmup model");
    if (warmup->layers.size() != params.layers.size()) {
      throw ShapeError("warm_start needs matching architectures");
    }
    for (std::size_t i = 0; i + 1 < params.layers.size(); ++i) {
      params.layers[i] = warmup->layers[i];
    }
    // Closed-class output rows come from the warmup head; the meta row
    // starts at zero so its logit is neutral.
    auto& head = params.layers.back();
    const auto& warm_head = warmup->layers.back();
    if (warm_head.weight.rows() != data.c || warm_head.weight.cols() != head.weight.cols()) {
      throw ShapeError("warm_start needs a warmup head with c outputs");
    }
    head.weight.topRows(data.c) = warm_head.weight;
    head.bias.head(data.c) = warm_head.bias;
    head.weight.row(data.c).setZero();
    head.bias(data.c) = 0.0;
  }
  const auto* matrices = cfg.bundle ? &cfg.bundle->matrices : nullptr;
  auto loss = robust_loss(data, cfg, matrices, &routes);
  auto trained = train_classifier(data, cfg.train, std::move(params), loss, rng);

  RobustResult out;
  out.params = std::move(trained.params);
  out.history = std::move(trained.history);
  out.best_epoch = trained.best_epoch;
  if (cfg.revise) {
    auto rev_cfg = cfg.revision;
    rev_cfg.epsilon = cfg.epsilon;
    rev_cfg.differentiate_weight = cfg.differentiate_weight;
    auto rev = revise(*cfg.bundle, out.params, data, routes, rev_cfg);
    out.params = std::move(rev.params);
    out.revised = std::move(rev.bundle);
    out.revision_trace = std::move(rev.objective_trace);
  }
  return out;
}

/// argmax over the closed classes of g (meta output excluded); ties go to
/// the lowest index.
inline Label predict_from_posterior(const Eigen::Ref<const Eigen::VectorXd>& g, int c) {
  if (g.size() != c + 1) {
    throw ShapeError("prediction expects c+1 outputs, got " + std::to_string(g.size()));
  }
  Label best = 0;
  for (Label j = 1; j < c; ++j) {
    if (g(j) > g(best)) best = j;
  }
  return best;
}

inline Label predict(const ClassifierParams& params, const Eigen::VectorXd& x) {
  const auto g = forward(params, x).probs;
  return predict_from_posterior(g, params.out_dim() - 1);
}

inline std::vector<Label> predict_rows(const ClassifierParams& params, const Dataset& data,
                                       const std::vector<std::size_t>& idx) {
  const auto probs = posteriors(params, data, idx);
  std::vector<Label> out;
  out.reserve(idx.size());
  for (Eigen::Index j = 0; j < probs.cols(); ++j) {
    out.push_back(predict_from_posterior(probs.col(j), params.out_dim() - 1));
  }
  return out;
}

}  // namespace mixnoise
