#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mixnoise/error.hpp"
#include "mixnoise/losses.hpp"
#include "mixnoise/synthdata.hpp"

namespace mixnoise {

enum class Activation { relu, sigmoid };

inline const char* to_string(Activation a) {
  return a == Activation::relu ? "relu" : "sigmoid";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  throw ConfigError("unknown activation '" + s + "'");
}

struct Layer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out
};

/// Feed-forward net: hidden layers apply the activation, the last layer is
/// affine and feeds a softmax.
struct ClassifierParams {
  std::vector<Layer> layers;
  Activation activation = Activation::relu;

  int in_dim() const { return static_cast<int>(layers.front().weight.cols()); }
  int out_dim() const { return static_cast<int>(layers.back().weight.rows()); }

  void validate() const {
    if (layers.empty()) throw ShapeError("network has no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (l.bias.size() != l.weight.rows()) {
        throw ShapeError("layer " + std::to_string(i) + " bias length mismatch");
      }
      if (i > 0 && l.weight.cols() != layers[i - 1].weight.rows()) {
        throw ShapeError("layer " + std::to_string(i) + " input width mismatch");
      }
      if (!l.weight.allFinite() || !l.bias.allFinite()) {
        throw ShapeError("layer " + std::to_string(i) + " has non-finite entries");
      }
    }
  }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
  static ClassifierParams init(int in_dim, const std::vector<int>& hidden,
                               int out_dim, Activation act, std::mt19937_64& rng) {
    ClassifierParams p;
    p.activation = act;
    std::vector<int> widths{in_dim};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(out_dim);
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      if (widths[i] < 1 || widths[i + 1] < 1) {
        throw ConfigError("layer widths must be positive");
      }
      const double bound = 1.0 / std::sqrt(static_cast<double>(widths[i]));
      std::uniform_real_distribution<double> u(-bound, bound);
      Layer l;
      l.weight.resize(widths[i + 1], widths[i]);
      l.bias.resize(widths[i + 1]);
      for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
        for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = u(rng);
      }
      for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias(r) = u(rng);
      p.layers.push_back(std::move(l));
    }
    return p;
  }
};

/// Same shape as the parameters; used for gradients and optimizer state.
using ParamTensors = std::vector<Layer>;

inline ParamTensors zeros_like(const ClassifierParams& p) {
  ParamTensors out;
  for (const auto& l : p.layers) {
    out.push_back({Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()),
                   Eigen::VectorXd::Zero(l.bias.size())});
  }
  return out;
}

/// Column-wise softmax with max subtraction.
inline Eigen::MatrixXd softmax_columns(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const double m = logits.col(j).maxCoeff();
    out.col(j) = (logits.col(j).array() - m).exp().matrix();
    out.col(j) /= out.col(j).sum();
  }
  return out;
}

inline Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  return softmax_columns(logits);
}

/// Cached activations of a batch pass. `activations[0]` is the input,
/// `activations[i]` the output of hidden layer i.
struct BatchPass {
  std::vector<Eigen::MatrixXd> activations;
  Eigen::MatrixXd probs;

  /// Post-activation output of the last hidden layer.
  const Eigen::MatrixXd& hidden() const { return activations.back(); }
};

inline BatchPass forward_batch(const ClassifierParams& p, const Eigen::MatrixXd& x) {
  if (x.rows() != p.in_dim()) {
    throw ShapeError("input has dimension " + std::to_string(x.rows()) +
                     ", network expects " + std::to_string(p.in_dim()));
  }
  BatchPass pass;
  pass.activations.reserve(p.layers.size());
  pass.activations.push_back(x);
  for (std::size_t i = 0; i + 1 < p.layers.size(); ++i) {
    const auto& l = p.layers[i];
    Eigen::MatrixXd z = l.weight * pass.activations.back();
    z.colwise() += l.bias;
    if (p.activation == Activation::relu) {
      z = z.cwiseMax(0.0);
    } else {
      z = (1.0 + (-z.array()).exp()).inverse().matrix();
    }
    pass.activations.push_back(std::move(z));
  }
  const auto& last = p.layers.back();
  Eigen::MatrixXd logits = last.weight * pass.activations.back();
  logits.colwise() += last.bias;
  pass.probs = softmax_columns(logits);
  return pass;
}

struct ForwardResult {
  Eigen::VectorXd probs;
  Eigen::VectorXd hidden;
};

inline ForwardResult forward(const ClassifierParams& p, const Eigen::VectorXd& x) {
  auto pass = forward_batch(p, x);
  return {pass.probs.col(0), pass.hidden().col(0)};
}

/// Last-hidden-layer representations for selected dataset rows (one column
/// per row).
inline Eigen::MatrixXd representations(const ClassifierParams& p,
                                       const Dataset& data,
                                       const std::vector<std::size_t>& idx) {
  return forward_batch(p, data.columns(idx)).hidden();
}

inline Eigen::MatrixXd posteriors(const ClassifierParams& p, const Dataset& data,
                                  const std::vector<std::size_t>& idx) {
  return forward_batch(p, data.columns(idx)).probs;
}

/// Backpropagates d loss / d logits (one column per example) and adds the
/// summed parameter gradients into `grads`.
inline void backpropagate(const ClassifierParams& p, const BatchPass& pass,
                          Eigen::MatrixXd dlogits, ParamTensors& grads) {
  Eigen::MatrixXd delta = std::move(dlogits);
  for (std::size_t ii = p.layers.size(); ii-- > 0;) {
    const auto& input = pass.activations[ii];
    grads[ii].weight.noalias() += delta * input.transpose();
    grads[ii].bias += delta.rowwise().sum();
    if (ii == 0) break;
    Eigen::MatrixXd back = p.layers[ii].weight.transpose() * delta;
    const auto& a = pass.activations[ii];
    if (p.activation == Activation::relu) {
      back = back.cwiseProduct((a.array() > 0.0).cast<double>().matrix());
    } else {
      back = back.cwiseProduct((a.array() * (1.0 - a.array())).matrix());
    }
    delta = std::move(back);
  }
}

/// Per-example loss callback: (example position in batch order, probs,
/// dlogits out) -> loss value.
using ExampleLoss = std::function<LossValue(
    std::size_t, const Eigen::Ref<const Eigen::VectorXd>&, Eigen::Ref<Eigen::VectorXd>)>;

struct BatchLoss {
  double total = 0.0;
  std::size_t floored = 0;
};

/// Loss summed over the batch; gradients (summed) added into `grads` when
/// non-null. `ids[j]` is handed to the callback for column j.
inline BatchLoss batch_loss_and_gradients(const ClassifierParams& p,
                                          const Eigen::MatrixXd& x,
                                          const std::vector<std::size_t>& ids,
                                          const ExampleLoss& loss,
                                          ParamTensors* grads) {
  auto pass = forward_batch(p, x);
  Eigen::MatrixXd dlogits(pass.probs.rows(), pass.probs.cols());
  BatchLoss out;
  for (Eigen::Index j = 0; j < pass.probs.cols(); ++j) {
    auto v = loss(ids[static_cast<std::size_t>(j)], pass.probs.col(j), dlogits.col(j));
    out.total += v.loss;
    if (v.floored) ++out.floored;
  }
  if (grads) backpropagate(p, pass, std::move(dlogits), *grads);
  return out;
}

/// Exact analytic gradient of a single example's loss.
inline ParamTensors backward(const ClassifierParams& p, const Eigen::VectorXd& x,
                             Label label, LossKind kind, const LossAux& aux = {}) {
  auto grads = zeros_like(p);
  ExampleLoss fn = [&](std::size_t, const Eigen::Ref<const Eigen::VectorXd>& probs,
                       Eigen::Ref<Eigen::VectorXd> d) {
    return loss_and_logit_gradient(kind, probs, label, aux, d);
  };
  batch_loss_and_gradients(p, x, {0}, fn, &grads);
  return grads;
}

inline double example_loss(const ClassifierParams& p, const Eigen::VectorXd& x,
                           Label label, LossKind kind, const LossAux& aux = {}) {
  auto probs = forward(p, x).probs;
  Eigen::VectorXd scratch(probs.size());
  return loss_and_logit_gradient(kind, probs, label, aux, scratch).loss;
}

namespace detail {

using LongMatrix = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
using LongVector = Eigen::Matrix<long double, Eigen::Dynamic, 1>;

struct LongLayer {
  LongMatrix weight;
  LongVector bias;
};

/// Independent extended-precision forward pass and per-example loss, used
/// only as the finite-difference oracle.
inline long double oracle_loss(const std::vector<LongLayer>& layers, Activation act,
                               const LongVector& x, Label label, LossKind kind,
                               const LossAux& aux) {
  LongVector h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    LongVector z = layers[i].weight * h + layers[i].bias;
    if (i + 1 < layers.size()) {
      for (Eigen::Index r = 0; r < z.size(); ++r) {
        z(r) = act == Activation::relu ? std::max(z(r), 0.0L) : 1.0L / (1.0L + std::exp(-z(r)));
      }
    }
    h = std::move(z);
  }
  const long double top = h.maxCoeff();
  LongVector g = (h.array() - top).exp().matrix();
  g /= g.sum();
  if (kind == LossKind::ce) {
    return -std::log(std::max(g(label), static_cast<long double>(kProbabilityFloor)));
  }
  const auto& t = aux.transition->entries;
  long double f = 0.0L;
  for (Eigen::Index r = 0; r < g.size(); ++r) f += static_cast<long double>(t(r, label)) * g(r);
  const long double denom = std::max(f, static_cast<long double>(aux.epsilon));
  const long double nll = -std::log(denom);
  if (kind == LossKind::forward_corrected) return nll;
  const long double w = aux.fixed_weight ? static_cast<long double>(*aux.fixed_weight) : g(label) / denom;
  return w * nll;
}

}  // namespace detail

/// Max relative error between analytic gradients and central differences
/// with h = 1e-6 taken on an extended-precision re-implementation of the
/// loss, so roundoff (~1e-13) and truncation (~1e-12) stay far below the
/// compared scale. Coordinates are compared relative to max(|a|, |n|, 1e-6)
/// so vanishing entries are judged on an absolute 1e-6 scale. For the
/// reweighted loss in stop-gradient mode the weight is frozen at its value
/// for the unperturbed parameters, matching the analytic treatment.
inline double grad_check(const ClassifierParams& params, const Eigen::VectorXd& x,
                         Label label, LossKind kind, LossAux aux = {}) {
  constexpr long double h = 1e-6L;
  if (kind != LossKind::ce) detail::check_transition_args(aux, forward(params, x).probs, label);
  if (kind == LossKind::reweighted && !aux.differentiate_weight && !aux.fixed_weight) {
    const auto probs = forward(params, x).probs;
    aux.fixed_weight = importance_weight(probs, label, *aux.transition, aux.epsilon);
  }
  const auto analytic = backward(params, x, label, kind, aux);
  std::vector<detail::LongLayer> layers;
  for (const auto& l : params.layers) {
    layers.push_back({l.weight.cast<long double>(), l.bias.cast<long double>()});
  }
  const detail::LongVector lx = x.cast<long double>();
  double worst = 0.0;
  auto compare = [&](long double& slot, double a) {
    const long double saved = slot;
    slot = saved + h;
    const long double up = detail::oracle_loss(layers, params.activation, lx, label, kind, aux);
    slot = saved - h;
    const long double down = detail::oracle_loss(layers, params.activation, lx, label, kind, aux);
    slot = saved;
    const double numeric = static_cast<double>((up - down) / (2.0L * h));
    const double scale = std::max({std::abs(a), std::abs(numeric), 1e-6});
    worst = std::max(worst, std::abs(a - numeric) / scale);
  };
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& l = layers[i];
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) {
        compare(l.weight(r, c), analytic[i].weight(r, c));
      }
    }
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) {
      compare(l.bias(r), analytic[i].bias(r));
    }
  }
  return worst;
}

struct TrainConfig {
  double learning_rate = 0.01;
  /// (epoch, divisor): from that epoch on the rate is divided by divisor.
  std::vector<std::pair<int, double>> lr_schedule;
  int epochs = 60;
  int batch_size = 128;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  std::vector<int> hidden{32, 32};
  Activation activation = Activation::relu;

  /// Divide-by-10 drops at 40% and 80% of the budget.
  static std::vector<std::pair<int, double>> default_schedule(int epochs) {
    return {{static_cast<int>(std::lround(0.4 * epochs)), 10.0},
            {static_cast<int>(std::lround(0.8 * epochs)), 10.0}};
  }

  double learning_rate_at(int epoch) const {
    double lr = learning_rate;
    for (const auto& [at, divisor] : lr_schedule) {
      if (epoch >= at) lr /= divisor;
    }
    return lr;
  }

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be nonnegative");
    if (momentum < 0.0 || momentum >= 1.0) {
      throw ConfigError("momentum must lie in [0,1)");
    }
    for (const auto& [at, divisor] : lr_schedule) {
      if (at < 0 || !(divisor > 0.0)) throw ConfigError("invalid lr_schedule entry");
    }
  }
};

/// Heavy-ball SGD with L2 weight decay, PyTorch convention:
/// v = momentum·v + (g + wd·θ); θ -= lr·v.
class SgdMomentum {
 public:
  SgdMomentum(const ClassifierParams& p, double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay), velocity_(zeros_like(p)) {}

  void step(ClassifierParams& p, const ParamTensors& grads, double lr) {
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
      auto& l = p.layers[i];
      auto& v = velocity_[i];
      v.weight = momentum_ * v.weight + grads[i].weight + weight_decay_ * l.weight;
      v.bias = momentum_ * v.bias + grads[i].bias + weight_decay_ * l.bias;
      l.weight -= lr * v.weight;
      l.bias -= lr * v.bias;
    }
  }

 private:
  double momentum_;
  double weight_decay_;
  ParamTensors velocity_;
};

/// Adam over a flat set of Eigen arrays.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Updates `param` in place; `slot` identifies the moment buffers.
  void update(std::size_t slot, Eigen::Ref<Eigen::MatrixXd> param,
              const Eigen::MatrixXd& grad) {
    if (slot >= m_.size()) {
      m_.resize(slot + 1);
      v_.resize(slot + 1);
    }
    if (m_[slot].size() == 0) {
      m_[slot] = Eigen::MatrixXd::Zero(grad.rows(), grad.cols());
      v_[slot] = Eigen::MatrixXd::Zero(grad.rows(), grad.cols());
    }
    m_[slot] = beta1_ * m_[slot] + (1.0 - beta1_) * grad;
    v_[slot] = beta2_ * v_[slot] + (1.0 - beta2_) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    param -= (lr_ * (m_[slot] / c1).array() /
              ((v_[slot] / c2).array().sqrt() + eps_))
                 .matrix();
  }

  /// Call once per optimization step, before the update() calls.
  void tick() { ++t_; }

  void step(ClassifierParams& p, const ParamTensors& grads) {
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
      update(2 * i, p.layers[i].weight, grads[i].weight);
      Eigen::MatrixXd b = p.layers[i].bias;
      update(2 * i + 1, b, grads[i].bias);
      p.layers[i].bias = b;
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Eigen::MatrixXd> m_, v_;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double floor_rate = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  ClassifierParams params;
  std::vector<EpochRecord> history;
  int best_epoch = 0;
};

/// Mean loss over `idx` (no gradients), evaluated in fixed-size chunks.
inline BatchLoss mean_loss(const ClassifierParams& p, const Dataset& data,
                           const std::vector<std::size_t>& idx, const ExampleLoss& loss) {
  BatchLoss out;
  constexpr std::size_t chunk = 4096;
  for (std::size_t at = 0; at < idx.size(); at += chunk) {
    std::vector<std::size_t> part(idx.begin() + static_cast<std::ptrdiff_t>(at),
                                  idx.begin() + static_cast<std::ptrdiff_t>(
                                                    std::min(idx.size(), at + chunk)));
    auto b = batch_loss_and_gradients(p, data.columns(part), part, loss, nullptr);
    out.total += b.total;
    out.floored += b.floored;
  }
  if (!idx.empty()) out.total /= static_cast<double>(idx.size());
  return out;
}

/// Minibatch SGD on the train split with per-epoch evaluation; returns the
/// parameters of the epoch with the lowest validation loss (train loss when
/// there is no validation split). The callback receives dataset row indices.
inline TrainResult train_classifier(const Dataset& data, const TrainConfig& cfg,
                                    ClassifierParams params, const ExampleLoss& loss,
                                    std::mt19937_64& rng) {
  cfg.validate();
  params.validate();
  auto train = data.indices(Split::train);
  const auto val = data.indices(Split::val);
  if (train.empty()) throw ConfigError("train split is empty");

  TrainResult result;
  result.params = params;
  double best = std::numeric_limits<double>::infinity();
  SgdMomentum opt(params, cfg.momentum, cfg.weight_decay);
  ParamTensors grads = zeros_like(params);
  const auto batch = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.learning_rate_at(epoch);
    std::shuffle(train.begin(), train.end(), rng);
    std::size_t floored = 0;
    for (std::size_t at = 0; at < train.size(); at += batch) {
      std::vector<std::size_t> ids(
          train.begin() + static_cast<std::ptrdiff_t>(at),
          train.begin() + static_cast<std::ptrdiff_t>(std::min(train.size(), at + batch)));
      for (auto& g : grads) {
        g.weight.setZero();
        g.bias.setZero();
      }
      auto b = batch_loss_and_gradients(params, data.columns(ids), ids, loss, &grads);
      if (!std::isfinite(b.total)) {
        throw DivergenceError<TrainResult>(
            "non-finite training loss at epoch " + std::to_string(epoch), result);
      }
      floored += b.floored;
      const double scale = 1.0 / static_cast<double>(ids.size());
      for (auto& g : grads) {
        g.weight *= scale;
        g.bias *= scale;
      }
      opt.step(params, grads, lr);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.floor_rate = static_cast<double>(floored) / static_cast<double>(train.size());
    rec.train_loss = mean_loss(params, data, train, loss).total;
    rec.val_loss = val.empty() ? rec.train_loss : mean_loss(params, data, val, loss).total;
    if (!std::isfinite(rec.train_loss) || !std::isfinite(rec.val_loss)) {
      throw DivergenceError<TrainResult>(
          "non-finite evaluation loss at epoch " + std::to_string(epoch), result);
    }
    result.history.push_back(rec);
    if (rec.val_loss < best) {
      best = rec.val_loss;
      result.params = params;
      result.best_epoch = epoch;
    }
  }
  return result;
}

/// Warmup model: out_dim = c, plain cross entropy on the noisy labels.
inline TrainResult train_warmup(const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.indices(Split::train).empty()) throw ConfigError("train split is empty");
  std::mt19937_64 rng(cfg.seed);
  auto params = ClassifierParams::init(data.dim(), cfg.hidden, data.c, cfg.activation, rng);
  ExampleLoss loss = [&data](std::size_t i, const Eigen::Ref<const Eigen::VectorXd>& probs,
                             Eigen::Ref<Eigen::VectorXd> d) {
    return loss_and_logit_gradient(LossKind::ce, probs, data.noisy_labels[i], {}, d);
  };
  return train_classifier(data, cfg, std::move(params), loss, rng);
}

}  // namespace mixnoise
