#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "mixnoise/clusterkit.hpp"

using namespace mixnoise;

namespace {

Eigen::MatrixXd column(std::initializer_list<double> v) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

// Exhaustive optimum over all 2-partitions with both parts nonempty.
double brute_force_two_means(const Eigen::MatrixXd& pts) {
  const auto n = static_cast<std::size_t>(pts.rows());
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t mask = 1; mask + 1 < (std::size_t{1} << n); ++mask) {
    std::vector<std::size_t> a, b;
    for (std::size_t i = 0; i < n; ++i) ((mask >> i) & 1 ? a : b).push_back(i);
    const auto ca = centroid_of(pts, a), cb = centroid_of(pts, b);
    double loss = 0.0;
    for (auto i : a) loss += (pts.row(static_cast<Eigen::Index>(i)).transpose() - ca).squaredNorm();
    for (auto i : b) loss += (pts.row(static_cast<Eigen::Index>(i)).transpose() - cb).squaredNorm();
    best = std::min(best, loss);
  }
  return best;
}

// Exhaustive max-weight matching; the first optimum in lexicographic
// permutation order is the lexicographically smallest one.
std::vector<std::size_t> brute_force_matching(const CountMatrix& counts) {
  std::vector<std::size_t> perm(counts.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<std::size_t> best = perm;
  std::size_t best_w = matching_weight(counts, perm);
  while (std::next_permutation(perm.begin(), perm.end())) {
    const auto w = matching_weight(counts, perm);
    if (w > best_w) {
      best_w = w;
      best = perm;
    }
  }
  return best;
}

}  // namespace

TEST(KMeans, TwoSeparatedGroups) {
  auto pts = column({0.0, 0.1, 0.2, 10.0, 10.1, 10.2});
  auto m = kmeans(pts, 2, 1);
  std::vector<double> cs{m.centroids(0, 0), m.centroids(1, 0)};
  std::sort(cs.begin(), cs.end());
  EXPECT_NEAR(cs[0], 0.1, 1e-12);
  EXPECT_NEAR(cs[1], 10.1, 1e-12);
  EXPECT_NEAR(m.loss, 0.04, 1e-12);
  EXPECT_EQ(m.assignment[0], m.assignment[2]);
  EXPECT_NE(m.assignment[0], m.assignment[3]);
}

TEST(KMeans, MoreClustersThanPointsRejected) {
  auto pts = column({1.0, 2.0});
  EXPECT_THROW(kmeans(pts, 3, 0), ConfigError);
  EXPECT_THROW(kmeans(pts, 0, 0), ConfigError);
}

TEST(KMeans, RestartsReachBruteForceOptimumOnSmallSets) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n01;
  for (int trial = 0; trial < 25; ++trial) {
    const int n = 6 + trial % 7;
    Eigen::MatrixXd pts(n, 2);
    for (int i = 0; i < n; ++i) {
      pts(i, 0) = n01(rng) + (i % 2 ? 4.0 : 0.0);
      pts(i, 1) = n01(rng);
    }
    const double opt = brute_force_two_means(pts);
    const auto best = kmeans_restarts(pts, 2, trial, 30);
    EXPECT_GE(best.loss, opt - 1e-9);
    EXPECT_NEAR(best.loss, opt, 1e-9) << "trial " << trial;
  }
}

TEST(KMeans, LossNeverBelowBruteForceAndTraceNonIncreasing) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 40; ++trial) {
    Eigen::MatrixXd pts(10, 3);
    for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = u(rng);
    auto m = kmeans(pts, 2, trial);
    EXPECT_GE(m.loss, brute_force_two_means(pts) - 1e-12);
    for (std::size_t i = 1; i < m.loss_trace.size(); ++i) {
      EXPECT_LE(m.loss_trace[i], m.loss_trace[i - 1] + 1e-12);
    }
  }
}

TEST(KMeans, RepairsEmptyClusters) {
  Eigen::MatrixXd pts = Eigen::MatrixXd::Zero(8, 2);
  pts(7, 0) = 1.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto m = kmeans(pts, 4, seed);
    for (auto s : m.sizes()) EXPECT_GE(s, 1u);
  }
}

TEST(KMeans, SameSeedSameResult) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n01;
  Eigen::MatrixXd pts(200, 3);
  for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = n01(rng);
  auto a = kmeans_restarts(pts, 5, 17, 4);
  auto b = kmeans_restarts(pts, 5, 17, 4);
  EXPECT_EQ(a.assignment, b.assignment);
  EXPECT_TRUE((a.centroids.array() == b.centroids.array()).all());
}

TEST(KMeans, SingleClusterCentroidIsTheMean) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n01;
  Eigen::MatrixXd pts(50, 4);
  for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = n01(rng);
  auto m = kmeans(pts, 1, 3);
  std::vector<std::size_t> all(50);
  std::iota(all.begin(), all.end(), 0);
  EXPECT_TRUE((m.centroids.row(0).transpose().array() == centroid_of(pts, all).array()).all());
}

TEST(MetaCluster, SmallestWithLowestIndexTieBreak) {
  ClusterModel m;
  m.centroids = Eigen::MatrixXd::Zero(3, 1);
  m.assignment = {0, 0, 1, 2, 2, 0};
  EXPECT_EQ(identify_meta_cluster(m, 2), 1u);
  m.assignment = {0, 0, 1, 2, 0};
  EXPECT_EQ(identify_meta_cluster(m, 2), 1u);
  m.assignment = {0, 0, 1, 1, 2, 2};
  EXPECT_EQ(identify_meta_cluster(m, 2), 0u);
  EXPECT_THROW(identify_meta_cluster(m, 3), ConfigError);
}

TEST(Matching, AgreesWithExhaustiveEnumeration) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t c = 2 + trial % 5;
    // Small count range forces plenty of ties.
    std::uniform_int_distribution<std::size_t> u(0, trial % 2 ? 3 : 50);
    CountMatrix counts(c, std::vector<std::size_t>(c));
    for (auto& row : counts) {
      for (auto& x : row) x = u(rng);
    }
    const auto oracle = brute_force_matching(counts);
    const auto got = max_weight_matching(counts);
    EXPECT_EQ(matching_weight(counts, got), matching_weight(counts, oracle));
    EXPECT_EQ(got, oracle);
  }
}

TEST(Matching, GreedyCanBeSuboptimal) {
  CountMatrix counts{{5, 4}, {4, 0}};
  auto g = greedy_matching(counts);
  auto opt = max_weight_matching(counts);
  EXPECT_EQ(matching_weight(counts, g), 5u);
  EXPECT_EQ(matching_weight(counts, opt), 8u);
}

TEST(Matching, TooManyClassesRejected) {
  CountMatrix counts(21, std::vector<std::size_t>(21, 1));
  EXPECT_THROW(max_weight_matching(counts), ConfigError);
}

TEST(AssignClasses, MetaClusterMapsToMetaLabel) {
  ClusterModel m;
  m.centroids = Eigen::MatrixXd::Zero(3, 1);
  m.assignment = {0, 0, 0, 1, 2, 2, 2, 2};
  identify_meta_cluster(m, 2);
  std::vector<Label> noisy{1, 1, 0, 0, 0, 0, 1, 0};
  auto map = assign_classes(m, noisy, 2);
  EXPECT_EQ(map[1], 2);
  EXPECT_EQ(map[0], 1);
  EXPECT_EQ(map[2], 0);
  EXPECT_EQ(m.cluster_of_class(0), 2u);
}

TEST(Percentile, StartRankOfHundredCandidates) {
  Eigen::VectorXd scores(100);
  for (int i = 0; i < 100; ++i) scores(i) = i;
  std::vector<std::size_t> cand(100);
  std::iota(cand.begin(), cand.end(), 0);
  // 97th percentile of 100 starts at the third-highest score.
  auto picked = select_by_percentile(cand, scores, 97.0, 5);
  EXPECT_EQ(picked, (std::vector<std::size_t>{97, 96, 95, 94, 93}));
  picked = select_by_percentile(cand, scores, 100.0, 1);
  EXPECT_EQ(picked, (std::vector<std::size_t>{99}));
  // Near the bottom the window shifts so that m points fit.
  picked = select_by_percentile(cand, scores, 2.0, 5);
  EXPECT_EQ(picked, (std::vector<std::size_t>{4, 3, 2, 1, 0}));
  EXPECT_THROW(select_by_percentile(cand, scores, 0.0, 5), ConfigError);
}

TEST(Anchors, SmallClusterFallsBackToGlobalPool) {
  ClusterModel m;
  m.centroids = Eigen::MatrixXd::Zero(3, 1);
  m.assignment = {0, 0, 0, 0, 0, 0, 1, 2, 2};
  m.meta_cluster = 1;
  m.class_of_cluster = std::vector<Label>{0, 2, 1};
  Eigen::MatrixXd post(2, 9);
  post.row(0) << 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.1, 0.2, 0.3;
  post.row(1) = (1.0 - post.row(0).array()).matrix();
  auto set = detect_closed_anchors(post, m, 100.0, 3);
  EXPECT_FALSE(set.rows[0].global_pool);
  EXPECT_EQ(set.rows[0].points, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_TRUE(set.rows[1].global_pool);
  EXPECT_EQ(set.rows[1].points, (std::vector<std::size_t>{6, 7, 8}));
  EXPECT_EQ(set.warnings.size(), 1u);
  EXPECT_THROW(detect_closed_anchors(post, m, 100.0, 10), AnchorShortageError);
}

TEST(Anchors, MetaAnchorsAreNearestTheCentroid) {
  auto pts = column({0.0, 5.0, 5.5, 4.0, 6.5, 20.0});
  ClusterModel m;
  m.centroids = column({0.0, 5.25, 20.0});
  m.assignment = {0, 1, 1, 1, 1, 2};
  m.meta_cluster = 1;
  Eigen::MatrixXd post = Eigen::MatrixXd::Constant(2, 6, 0.5);
  AnchorSet set;
  auto row = detect_meta_anchors(pts, post, m, 2, &set);
  EXPECT_EQ(row.points, (std::vector<std::size_t>{1, 2}));
  EXPECT_TRUE(set.warnings.empty());
  row = detect_meta_anchors(pts, post, m, 9, &set);
  EXPECT_EQ(row.points.size(), 4u);
  EXPECT_EQ(set.warnings.size(), 1u);
}

TEST(KMeans, ThreePointsOnALine) {
  auto pts = column({0.0, 1.0, 10.0});
  auto m = kmeans_restarts(pts, 2, 0, 10);
  std::vector<double> cs{m.centroids(0, 0), m.centroids(1, 0)};
  std::sort(cs.begin(), cs.end());
  EXPECT_NEAR(cs[0], 0.5, 1e-12);
  EXPECT_NEAR(cs[1], 10.0, 1e-12);
  EXPECT_NEAR(m.loss, 0.5, 1e-12);
}

TEST(Matching, CrossedCountsPickTheOffDiagonal) {
  CountMatrix counts{{60, 40}, {70, 30}};
  auto got = max_weight_matching(counts);
  EXPECT_EQ(got, (std::vector<std::size_t>{1, 0}));
  EXPECT_EQ(matching_weight(counts, got), 110u);
}

TEST(Anchors, SingleMetaAnchorIsTheClosestPoint) {
  Eigen::MatrixXd pts(3, 2);
  pts << 0.0, 0.0, 1.0, 0.0, 5.0, 5.0;
  ClusterModel m;
  m.centroids = Eigen::MatrixXd(1, 2);
  m.centroids << 2.0, 5.0 / 3.0;
  m.assignment = {0, 0, 0};
  m.meta_cluster = 0;
  Eigen::MatrixXd post(2, 3);
  post << 0.1, 0.7, 0.4, 0.9, 0.3, 0.6;
  auto row = detect_meta_anchors(pts, post, m, 1);
  EXPECT_EQ(row.points, (std::vector<std::size_t>{1}));
  ASSERT_EQ(row.posteriors.size(), 1u);
  EXPECT_DOUBLE_EQ(row.posteriors[0](0), 0.7);
}

TEST(KMeans, ObjectiveIsPermutationInvariantInPoints) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> n01;
  Eigen::MatrixXd pts(30, 2);
  for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = n01(rng);
  auto m = kmeans(pts, 3, 5);
  std::vector<std::size_t> order(30);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  Eigen::MatrixXd shuffled(30, 2);
  std::vector<std::size_t> assignment(30);
  for (std::size_t i = 0; i < 30; ++i) {
    shuffled.row(static_cast<Eigen::Index>(i)) = pts.row(static_cast<Eigen::Index>(order[i]));
    assignment[i] = m.assignment[order[i]];
  }
  EXPECT_NEAR(kmeans_objective(shuffled, m.centroids, assignment), m.loss, 1e-9);
}
