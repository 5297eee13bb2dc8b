#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

#include "mixnoise/error.hpp"
#include "mixnoise/extended_matrix.hpp"

namespace mixnoise {

/// Floor applied to probabilities inside log() for plain cross entropy.
inline constexpr double kProbabilityFloor = 1e-12;

enum class LossKind { ce, forward_corrected, reweighted };

inline const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::ce: return "ce";
    case LossKind::forward_corrected: return "forward";
    case LossKind::reweighted: return "reweighted";
  }
  return "?";
}

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "ce") return LossKind::ce;
  if (s == "forward" || s == "forward_corrected") return LossKind::forward_corrected;
  if (s == "reweighted") return LossKind::reweighted;
  throw ConfigError("unknown loss kind '" + s + "'");
}

/// Extra inputs for the transition-aware losses.
struct LossAux {
  const ExtendedTransitionMatrix* transition = nullptr;
  double epsilon = 1e-8;
  /// Differentiate through the importance ratio instead of treating it as a
  /// constant within the step.
  bool differentiate_weight = false;
  /// Overrides the importance weight (used by gradient checks so the
  /// finite-difference oracle sees the same constant weight).
  std::optional<double> fixed_weight;
};

struct LossValue {
  double loss = 0.0;
  double weight = 1.0;
  bool floored = false;
};

/// -log p[label] with p floored at 1e-12.
inline double ce_loss(const Eigen::Ref<const Eigen::VectorXd>& probs, Label label) {
  if (label < 0 || label >= probs.size()) {
    throw ShapeError("label " + std::to_string(label) + " out of range for " +
                     std::to_string(probs.size()) + " outputs");
  }
  return -std::log(std::max(probs(label), kProbabilityFloor));
}

/// (T^T g)[label]: noisy-class probability implied by clean posterior g.
inline double mapped_probability(const ExtendedTransitionMatrix& t,
                                 const Eigen::Ref<const Eigen::VectorXd>& g,
                                 Label label) {
  return t.entries.col(label).dot(g);
}

namespace detail {

inline void check_transition_args(const LossAux& aux,
                                  const Eigen::Ref<const Eigen::VectorXd>& g,
                                  Label label) {
  if (aux.transition == nullptr) {
    throw ConfigError("transition-aware loss needs a transition matrix");
  }
  const auto& t = aux.transition->entries;
  if (g.size() != t.rows()) {
    throw ShapeError("posterior length " + std::to_string(g.size()) +
                     " does not match transition rows " + std::to_string(t.rows()));
  }
  if (label < 0 || label >= t.cols()) {
    throw ShapeError("noisy label " + std::to_string(label) + " out of range");
  }
}

}  // namespace detail

/// -log max((T^T g)[label], epsilon).
inline double forward_loss(const Eigen::Ref<const Eigen::VectorXd>& g,
                           Label label, const ExtendedTransitionMatrix& t,
                           double epsilon = 1e-8) {
  LossAux aux;
  aux.transition = &t;
  detail::check_transition_args(aux, g, label);
  return -std::log(std::max(mapped_probability(t, g, label), epsilon));
}

/// Importance weight g[label] / max((T^T g)[label], epsilon).
inline double importance_weight(const Eigen::Ref<const Eigen::VectorXd>& g,
                                Label label, const ExtendedTransitionMatrix& t,
                                double epsilon = 1e-8) {
  return g(label) / std::max(mapped_probability(t, g, label), epsilon);
}

/// weight · forward_loss.
inline double reweighted_loss(const Eigen::Ref<const Eigen::VectorXd>& g,
                              Label label, const ExtendedTransitionMatrix& t,
                              double epsilon = 1e-8) {
  return importance_weight(g, label, t, epsilon) * forward_loss(g, label, t, epsilon);
}

/// Evaluates the per-example loss and writes d loss / d logits into
/// `dlogits` (same length as `probs`). `probs` must be softmax(logits).
inline LossValue loss_and_logit_gradient(LossKind kind,
                                         const Eigen::Ref<const Eigen::VectorXd>& probs,
                                         Label label, const LossAux& aux,
                                         Eigen::Ref<Eigen::VectorXd> dlogits) {
  LossValue out;
  if (kind == LossKind::ce) {
    out.loss = ce_loss(probs, label);
    out.floored = probs(label) < kProbabilityFloor;
    if (out.floored) {
      dlogits.setZero();
    } else {
      dlogits = probs;
      dlogits(label) -= 1.0;
    }
    return out;
  }

  detail::check_transition_args(aux, probs, label);
  const auto& t = aux.transition->entries;
  const double f = t.col(label).dot(probs);
  out.floored = f < aux.epsilon;
  const double denom = out.floored ? aux.epsilon : f;
  const double nll = -std::log(denom);

  // d(-log f)/dg = -T[:,label]/f, zero when the floor is active.
  Eigen::VectorXd dg = Eigen::VectorXd::Zero(probs.size());
  if (!out.floored) dg = -t.col(label) / f;

  if (kind == LossKind::forward_corrected) {
    out.loss = nll;
  } else if (kind == LossKind::reweighted) {
    out.weight = aux.fixed_weight ? *aux.fixed_weight : probs(label) / denom;
    out.loss = out.weight * nll;
    if (aux.differentiate_weight && !aux.fixed_weight) {
      // d/dg of (g_y / F) · (-log F), F = max(f, eps).
      Eigen::VectorXd dweight = Eigen::VectorXd::Zero(probs.size());
      dweight(label) = 1.0 / denom;
      if (!out.floored) dweight -= probs(label) * t.col(label) / (denom * denom);
      dg = out.weight * dg + nll * dweight;
    } else {
      dg *= out.weight;
    }
  } else {
    throw ConfigError("unknown loss kind");
  }
  // Softmax Jacobian: dL/dh = g ⊙ (dL/dg - <g, dL/dg>).
  const double mean_dg = probs.dot(dg);
  dlogits = (probs.array() * (dg.array() - mean_dg)).matrix();
  return out;
}

}  // namespace mixnoise
