#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "mixnoise/error.hpp"
#include "mixnoise/extended_matrix.hpp"

namespace mixnoise {

inline double accuracy(const std::vector<Label>& pred, const std::vector<Label>& truth) {
  if (pred.size() != truth.size()) throw ShapeError("accuracy needs equal-length vectors");
  if (pred.empty()) throw ShapeError("accuracy needs at least one prediction");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-15;
  constexpr double kTiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double regularized_incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) throw ConfigError("incomplete beta needs a, b > 0");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                           a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return front * detail::beta_continued_fraction(a, b, x) / a;
  }
  return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

/// P(|T| >= |t|) for Student's t with df degrees of freedom.
inline double student_t_two_sided_p(double t, double df) {
  if (!(df > 0.0)) throw ConfigError("degrees of freedom must be positive");
  if (std::isinf(t)) return 0.0;
  return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

struct TTestResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
  /// Zero variance in both samples with different means.
  bool degenerate = false;
};

inline double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Sample variance (n-1 denominator).
inline double variance_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return ss / static_cast<double>(v.size() - 1);
}

/// Two independent samples t-test, two-sided. Pooled-variance Student's t by
/// default; `welch` switches to unequal variances with Welch–Satterthwaite
/// degrees of freedom.
inline TTestResult ttest_independent(const std::vector<double>& a, const std::vector<double>& b,
                                     bool welch = false) {
  if (a.size() < 2 || b.size() < 2) {
    throw ConfigError("t-test needs at least two observations per sample");
  }
  const double n1 = static_cast<double>(a.size());
  const double n2 = static_cast<double>(b.size());
  const double m1 = mean_of(a), m2 = mean_of(b);
  const double v1 = variance_of(a), v2 = variance_of(b);
  TTestResult r;
  double se2 = 0.0;
  if (welch) {
    se2 = v1 / n1 + v2 / n2;
    const double num = se2 * se2;
    const double den = (v1 / n1) * (v1 / n1) / (n1 - 1.0) + (v2 / n2) * (v2 / n2) / (n2 - 1.0);
    r.df = den > 0.0 ? num / den : n1 + n2 - 2.0;
  } else {
    r.df = n1 + n2 - 2.0;
    const double pooled = ((n1 - 1.0) * v1 + (n2 - 1.0) * v2) / r.df;
    se2 = pooled * (1.0 / n1 + 1.0 / n2);
  }
  const double diff = m1 - m2;
  if (se2 <= 0.0) {
    if (diff == 0.0) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = diff > 0 ? std::numeric_limits<double>::infinity()
                     : -std::numeric_limits<double>::infinity();
      r.p = 0.0;
      r.degenerate = true;
    }
    return r;
  }
  r.t = diff / std::sqrt(se2);
  r.p = student_t_two_sided_p(r.t, r.df);
  return r;
}

/// p-value with four decimals ("0.0000" below 5e-5).
inline std::string format_pvalue(double p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", p);
  return buf;
}

/// Accuracy fraction as a percentage with two decimals: 0.90861 -> "90.86".
inline std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * fraction);
  return buf;
}

struct TrialReport {
  std::uint64_t seed = 0;
  std::string config_digest;
  std::string method;
  double tau = 0.0;
  double rho = 0.0;
  std::size_t k = 0;
  double test_accuracy = 0.0;
  /// l1 errors of the global estimate against truth: full T*, closed block
  /// T, and meta row.
  double l1_error_global = 0.0;
  double l1_error_closed = 0.0;
  double l1_error_meta = 0.0;
  std::vector<double> l1_errors_per_cluster;
  double runtime_seconds = 0.0;
};

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
  /// Single observation: std reported as 0 by convention.
  bool single = false;
};

inline MetricSummary summarize(const std::vector<double>& values) {
  if (values.empty()) throw ConfigError("cannot summarize an empty sample");
  MetricSummary s;
  s.count = values.size();
  s.mean = mean_of(values);
  s.single = values.size() == 1;
  s.std = s.single ? 0.0 : std::sqrt(variance_of(values));
  return s;
}

/// "mean±std" of an accuracy sample in percent, two decimals.
inline std::string format_mean_std(const MetricSummary& s) {
  return format_percent(s.mean) + "±" + format_percent(s.std);
}

struct Summary {
  MetricSummary accuracy;
  MetricSummary l1_error_global;
  MetricSummary l1_error_closed;
  MetricSummary l1_error_meta;
  MetricSummary runtime_seconds;
};

inline Summary aggregate(const std::vector<TrialReport>& reports) {
  if (reports.empty()) throw ConfigError("aggregate needs at least one report");
  auto pick = [&](auto field) {
    std::vector<double> v;
    for (const auto& r : reports) v.push_back(r.*field);
    return summarize(v);
  };
  Summary s;
  s.accuracy = pick(&TrialReport::test_accuracy);
  s.l1_error_global = pick(&TrialReport::l1_error_global);
  s.l1_error_closed = pick(&TrialReport::l1_error_closed);
  s.l1_error_meta = pick(&TrialReport::l1_error_meta);
  s.runtime_seconds = pick(&TrialReport::runtime_seconds);
  return s;
}

}  // namespace mixnoise
