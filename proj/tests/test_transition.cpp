#include <gtest/gtest.h>

#include <random>

#include "fixtures.hpp"
#include "mixnoise/transition.hpp"

using namespace mixnoise;

namespace {

struct OracleFixture {
  EstimationInputs in;
  std::vector<Label> clean;
  ExtendedTransitionMatrix truth;
};

// Well-separated clusters in the plane, one per class plus a smaller meta
// cluster. Every point's noisy posterior is the true T* row of its clean
// class, so every point is an exact anchor.
OracleFixture exact_anchor_fixture(int c, std::size_t per_class, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  OracleFixture f;
  f.truth = ExtendedTransitionMatrix(mixnoise::testing::random_stochastic(c + 1, c, rng),
                                     MatrixOrigin::truth);
  // Make every closed row diagonal-dominant so the class matching is unique.
  for (int i = 0; i < c; ++i) {
    f.truth.entries.row(i) *= 0.3;
    f.truth.entries(i, i) += 0.7;
  }
  const std::size_t n = per_class * c + per_class / 2;
  f.in.c = c;
  f.in.points.resize(static_cast<Eigen::Index>(n), 2);
  f.in.posteriors.resize(c, static_cast<Eigen::Index>(n));
  std::size_t at = 0;
  for (int k = 0; k <= c; ++k) {
    const std::size_t count = k < c ? per_class : per_class / 2;
    for (std::size_t s = 0; s < count; ++s, ++at) {
      const auto row = static_cast<Eigen::Index>(at);
      f.in.points(row, 0) = 40.0 * std::cos(2.0 * M_PI * k / (c + 1)) + n01(rng);
      f.in.points(row, 1) = 40.0 * std::sin(2.0 * M_PI * k / (c + 1)) + n01(rng);
      f.in.posteriors.col(row) = f.truth.entries.row(k).transpose();
      f.clean.push_back(k);
      f.in.train_ids.push_back(at);
    }
  }
  // Noisy labels: the clean class for closed points (diagonal dominates),
  // the most likely label for meta points.
  for (auto y : f.clean) {
    Eigen::Index arg;
    f.truth.entries.row(y).maxCoeff(&arg);
    f.in.noisy.push_back(y < c ? y : static_cast<Label>(arg));
  }
  return f;
}

}  // namespace

TEST(NoisyPosterior, WorkedExample) {
  Eigen::MatrixXd m(3, 2);
  m << 0.8, 0.2, 0.3, 0.7, 0.5, 0.5;
  ExtendedTransitionMatrix t(m, MatrixOrigin::estimated);
  Eigen::VectorXd g(3);
  g << 0.5, 0.3, 0.2;
  auto p = noisy_posterior(t, g);
  EXPECT_NEAR(p(0), 0.59, 1e-15);
  EXPECT_NEAR(p(1), 0.41, 1e-15);
  EXPECT_THROW(noisy_posterior(t, Eigen::VectorXd::Ones(2)), ShapeError);
}

TEST(NoisyPosterior, StaysOnTheSimplex) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const int c = 2 + trial % 6;
    ExtendedTransitionMatrix t(mixnoise::testing::random_stochastic(c + 1, c, rng),
                               MatrixOrigin::estimated);
    auto p = noisy_posterior(t, mixnoise::testing::random_simplex(c + 1, rng));
    EXPECT_NEAR(p.sum(), 1.0, 1e-12);
    EXPECT_GE(p.minCoeff(), 0.0);
  }
}

TEST(L1Error, SumOfAbsoluteDifferences) {
  Eigen::MatrixXd a(2, 2), b(2, 2);
  a << 0.9, 0.1, 0.2, 0.8;
  b << 0.8, 0.2, 0.2, 0.8;
  EXPECT_NEAR(l1_error(a, b), 0.2, 1e-15);
  EXPECT_THROW(l1_error(a, Eigen::MatrixXd::Zero(3, 2)), ShapeError);
}

TEST(EstimateRow, MeanOfAnchorPosteriorsRenormalized) {
  AnchorRow row;
  Eigen::VectorXd a(3), b(3);
  a << 0.7, 0.2, 0.1;
  b << 0.5, 0.4, 0.1;
  row.posteriors = {a, b};
  auto r = estimate_row(row);
  EXPECT_NEAR(r(0), 0.6, 1e-15);
  EXPECT_NEAR(r(1), 0.3, 1e-15);
  EXPECT_NEAR(r.sum(), 1.0, 1e-15);
  EXPECT_THROW(estimate_row(AnchorRow{}), AnchorShortageError);
}

TEST(EstimateRow, TwoAnchorAverage) {
  AnchorRow row;
  Eigen::VectorXd a(2), b(2);
  a << 0.8, 0.2;
  b << 0.6, 0.4;
  row.posteriors = {a, b};
  auto r = estimate_row(row);
  EXPECT_NEAR(r(0), 0.7, 1e-15);
  EXPECT_NEAR(r(1), 0.3, 1e-15);
}

TEST(EstimateExtended, ExactAnchorsRecoverTheTruth) {
  for (int c : {2, 3, 5}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      auto f = exact_anchor_fixture(c, 40, seed);
      AnchorConfig cfg;
      cfg.seed = seed;
      auto fine = fine_clusters(f.in, cfg);
      auto est = estimate_extended(f.in, fine, cfg);
      EXPECT_LE((est.entries - f.truth.entries).cwiseAbs().maxCoeff(), 1e-12)
          << "c=" << c << " seed=" << seed;
      EXPECT_EQ(est.origin, MatrixOrigin::estimated);
    }
  }
}

TEST(EstimateExtended, RowsAreStochastic) {
  std::mt19937_64 rng(5);
  auto f = exact_anchor_fixture(3, 30, 1);
  // Perturb the posteriors so anchors are inexact.
  for (Eigen::Index j = 0; j < f.in.posteriors.cols(); ++j) {
    f.in.posteriors.col(j) = mixnoise::testing::random_simplex(3, rng);
  }
  AnchorConfig cfg;
  auto fine = fine_clusters(f.in, cfg);
  auto est = estimate_extended(f.in, fine, cfg);
  EXPECT_TRUE(is_row_stochastic(est.entries, 1e-9));
}

TEST(ClusterDependent, SingleClusterIsBitIdenticalToGlobal) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    auto f = exact_anchor_fixture(3, 30, seed);
    std::mt19937_64 rng(seed);
    for (Eigen::Index j = 0; j < f.in.posteriors.cols(); ++j) {
      f.in.posteriors.col(j) = mixnoise::testing::random_simplex(3, rng);
    }
    AnchorConfig cfg;
    cfg.seed = seed;
    auto fine = fine_clusters(f.in, cfg);
    auto global = estimate_extended(f.in, fine, cfg);
    auto bundle = estimate_cluster_dependent(f.in, fine, 1, cfg);
    ASSERT_EQ(bundle.k(), 1u);
    EXPECT_TRUE((bundle.matrices[0].entries.array() == global.entries.array()).all());
    for (bool fb : bundle.matrices[0].fallback_rows) EXPECT_FALSE(fb);
  }
}

TEST(ClusterDependent, SparseClusterRowsFallBackToGlobal) {
  auto f = exact_anchor_fixture(3, 30, 2);
  AnchorConfig cfg;
  auto fine = fine_clusters(f.in, cfg);
  auto global = estimate_extended(f.in, fine, cfg);
  // Four coarse clusters on four well-separated groups: each coarse cluster
  // holds one fine cluster, so all rows but one fall back.
  auto bundle = estimate_cluster_dependent(f.in, fine, 4, cfg);
  ASSERT_EQ(bundle.k(), 4u);
  EXPECT_NO_THROW(bundle.validate());
  for (const auto& t : bundle.matrices) {
    std::size_t own = 0;
    for (std::size_t r = 0; r < t.fallback_rows.size(); ++r) {
      if (t.fallback_rows[r]) {
        EXPECT_TRUE((t.entries.row(static_cast<Eigen::Index>(r)).array() ==
                     global.entries.row(static_cast<Eigen::Index>(r)).array())
                        .all());
      } else {
        ++own;
      }
    }
    EXPECT_EQ(own, 1u);
    EXPECT_TRUE(is_row_stochastic(t.entries, 1e-9));
  }
  EXPECT_THROW(estimate_cluster_dependent(f.in, fine, 0, cfg), ConfigError);
}

TEST(Routing, SingleMatrixRoutesEverythingToZero) {
  auto spec = make_gaussian_mixture(2, 3, 1, 6.0, 8.0);
  auto data = generate_mixture(spec, 100, 1);
  std::mt19937_64 rng(1);
  auto warm = ClassifierParams::init(3, {4}, 2, Activation::relu, rng);
  auto bundle = TransitionBundle::single(ExtendedTransitionMatrix::identity(2), 4);
  auto routes = route_examples(bundle, warm, data);
  EXPECT_EQ(routes.size(), data.size());
  for (auto r : routes) EXPECT_EQ(r, 0u);
}

TEST(Routing, FeatureSpaceNearestCentroid) {
  auto spec = make_gaussian_mixture(2, 1, 1, 6.0, 8.0);
  auto data = generate_mixture(spec, 100, 1);
  std::mt19937_64 rng(1);
  auto warm = ClassifierParams::init(1, {4}, 2, Activation::relu, rng);
  TransitionBundle bundle;
  bundle.space = FeatureSpace::features;
  bundle.matrices = {ExtendedTransitionMatrix::identity(2), ExtendedTransitionMatrix::identity(2)};
  bundle.coarse.centroids.resize(2, 1);
  bundle.coarse.centroids << -100.0, 100.0;
  auto routes = route_examples(bundle, warm, data);
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(routes[i], data.features(static_cast<Eigen::Index>(i), 0) < 0 ? 0u : 1u);
  }
}

class TransitionGradient : public ::testing::TestWithParam<bool> {};

TEST_P(TransitionGradient, MatchesFiniteDifferences) {
  const bool full = GetParam();
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const int c = 2 + trial % 4;
    ExtendedTransitionMatrix t(mixnoise::testing::random_stochastic(c + 1, c, rng),
                               MatrixOrigin::estimated);
    Eigen::VectorXd g = mixnoise::testing::random_simplex(c + 1, rng);
    const Label y = trial % c;
    const double w0 = importance_weight(g, y, t);
    auto objective = [&](const ExtendedTransitionMatrix& m) {
      return full ? reweighted_loss(g, y, m) : w0 * forward_loss(g, y, m);
    };
    auto analytic = reweighted_transition_gradient(t, g, y, 1e-8, full);
    constexpr double h = 1e-6;
    for (Eigen::Index r = 0; r < t.entries.rows(); ++r) {
      for (Eigen::Index j = 0; j < t.entries.cols(); ++j) {
        auto up = t, down = t;
        up.entries(r, j) += h;
        down.entries(r, j) -= h;
        const double numeric = (objective(up) - objective(down)) / (2 * h);
        EXPECT_NEAR(analytic(r, j), numeric, 1e-6 * std::max(1.0, std::abs(numeric)));
      }
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Modes, TransitionGradient, ::testing::Bool());

namespace {

Dataset small_problem(std::uint64_t seed) {
  auto spec = make_gaussian_mixture(3, 4, 1, 6.0, 8.0);
  auto clean = generate_mixture(spec, 600, seed);
  NoiseSpec noise = NoiseSpec::mixed(0.4, 0.25);
  noise.seed = seed;
  return inject_mixed_noise(clean, noise, generate_reservoir(spec, 600, seed + 1));
}

}  // namespace

TEST(Revise, ZeroEpochsLeavesTheBundleAlone) {
  auto data = small_problem(3);
  std::mt19937_64 rng(3);
  auto params = ClassifierParams::init(4, {8}, 4, Activation::relu, rng);
  auto bundle = TransitionBundle::single(true_extended_matrix(NoiseSpec::mixed(0.4, 0.25), 3), 8);
  RevisionConfig cfg;
  cfg.epochs = 0;
  auto r = revise(bundle, params, data, std::vector<std::size_t>(data.size(), 0), cfg);
  EXPECT_TRUE((r.bundle.matrices[0].entries.array() == bundle.matrices[0].entries.array()).all());
  EXPECT_TRUE(r.slack[0].isZero(0.0));
}

TEST(Revise, StaysFeasibleAndMarksOrigin) {
  auto data = small_problem(4);
  std::mt19937_64 rng(4);
  auto params = ClassifierParams::init(4, {8}, 4, Activation::relu, rng);
  auto bundle = TransitionBundle::single(true_extended_matrix(NoiseSpec::mixed(0.4, 0.25), 3), 8);
  RevisionConfig cfg;
  cfg.epochs = 3;
  cfg.slack_learning_rate = 0.05;
  cfg.learning_rate = 1e-3;
  for (bool full : {false, true}) {
    cfg.differentiate_weight = full;
    auto r = revise(bundle, params, data, std::vector<std::size_t>(data.size(), 0), cfg);
    const auto& m = r.bundle.matrices[0];
    EXPECT_EQ(m.origin, MatrixOrigin::revised);
    EXPECT_TRUE(is_row_stochastic(m.entries, 1e-9));
    EXPECT_GE(m.entries.minCoeff(), 0.0);
    EXPECT_LE(m.entries.maxCoeff(), 1.0);
    EXPECT_EQ(r.objective_trace.size(), 3u);
    EXPECT_TRUE(((m.entries - bundle.matrices[0].entries - r.slack[0]).array().abs() < 1e-12).all());
  }
}

TEST(Revise, RejectsClosedSetModel) {
  auto data = small_problem(5);
  std::mt19937_64 rng(4);
  auto params = ClassifierParams::init(4, {8}, 3, Activation::relu, rng);
  auto bundle = TransitionBundle::single(ExtendedTransitionMatrix::identity(3), 8);
  EXPECT_THROW(revise(bundle, params, data, std::vector<std::size_t>(data.size(), 0), {}),
               ShapeError);
}

TEST(MetaCluster, RecoversOpenInstancesOnSeparatedData) {
  // tau*rho = 0.1, c = 3, n = 10^4: the smallest fine cluster in the warmup
  // representation holds at least 90% of the open-set train rows.
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto spec = make_gaussian_mixture(3, 8, 2, 6.0, 8.0);
    auto clean = generate_mixture(spec, 10000, 100 + seed);
    auto data = inject_mixed_noise(clean, NoiseSpec::mixed(0.2, 0.5, 200 + seed),
                                   generate_reservoir(spec, 10000, 300 + seed));
    TrainConfig w;
    w.epochs = 30;
    w.lr_schedule = TrainConfig::default_schedule(30);
    w.seed = 400 + seed;
    w.activation = Activation::sigmoid;
    w.learning_rate = 0.2;
    auto warm = train_warmup(data, w);
    AnchorConfig ac;
    ac.seed = 500 + seed;
    const auto in = prepare_estimation(warm.params, data, ac);
    const auto fine = fine_clusters(in, ac);
    std::size_t open = 0, hit = 0;
    for (std::size_t p = 0; p < in.train_ids.size(); ++p) {
      if (data.clean_labels[in.train_ids[p]] != data.meta()) continue;
      ++open;
      hit += fine.assignment[p] == *fine.meta_cluster;
    }
    ASSERT_GT(open, 0u);
    EXPECT_GE(static_cast<double>(hit) / static_cast<double>(open), 0.9) << "seed " << seed;
  }
}
