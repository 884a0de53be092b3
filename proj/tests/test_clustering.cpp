#include "himpc/clustering.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace himpc;

namespace {

// Gaussian blobs plus uniform background so that core, border and noise
// points all occur.
Matrix blob_points(int n, int dim, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> centers(1, 5);
  const int k = centers(rng);
  const Matrix c = oracle::random_matrix(k, dim, rng, 3.0);
  std::uniform_real_distribution<double> u(-6.0, 6.0);
  std::normal_distribution<double> g(0.0, 0.6);
  Matrix pts(n, dim);
  for (int i = 0; i < n; ++i) {
    if (i % 7 == 6) {
      for (int d = 0; d < dim; ++d) pts(i, d) = u(rng);
    } else {
      const int which = i % k;
      for (int d = 0; d < dim; ++d) pts(i, d) = c(which, d) + g(rng);
    }
  }
  return pts;
}

}  // namespace

TEST(Dbscan, ThreeClosePointsOneCluster) {
  Matrix p(3, 2);
  p << 0, 0, 0.1, 0, 0, 0.1;
  EXPECT_EQ(dbscan(p, 0.5, 2), (std::vector<int>{0, 0, 0}));
}

TEST(Dbscan, IsolatedPointIsOutlier) {
  Matrix p(3, 2);
  p << 0, 0, 0.1, 0, 9, 9;
  EXPECT_EQ(dbscan(p, 0.5, 2), (std::vector<int>{0, 0, kOutlier}));
  EXPECT_EQ(dbscan(Matrix::Zero(1, 4), 0.5, 2), std::vector<int>{kOutlier});
}

TEST(Dbscan, BoundaryDistanceCounts) {
  Matrix p(2, 1);
  p << 0.0, 0.5;
  EXPECT_EQ(dbscan(p, 0.5, 2), (std::vector<int>{0, 0}));
}

TEST(Dbscan, MinSamplesCountsSelf) {
  Matrix p(1, 3);
  p.setZero();
  EXPECT_EQ(dbscan(p, 0.1, 1), std::vector<int>{0});
}

TEST(Dbscan, BorderJoinsFirstExpandedCluster) {
  // index 0 is a non-core point within eps of one core in each cluster
  Matrix p(9, 1);
  p << 1.05, 2.01, 2.04, 2.07, 2.10, 0.0, 0.03, 0.06, 0.09;
  EXPECT_EQ(dbscan(p, 0.97, 4), (std::vector<int>{0, 0, 0, 0, 0, 1, 1, 1, 1}));
  EXPECT_EQ(oracle::dbscan(oracle::to_mat(p), 0.97, 4), dbscan(p, 0.97, 4));
}

TEST(Dbscan, MatchesBruteForceOracle) {
  std::mt19937_64 rng(50);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix p = blob_points(50, 8, rng);
    for (int ms : {1, 2, 4}) {
      const auto got = dbscan(p, 1.6, ms);
      EXPECT_EQ(got, oracle::dbscan(oracle::to_mat(p), 1.6, ms)) << "trial " << trial;
    }
  }
}

TEST(Dbscan, PermutationInvariantUpToRelabeling) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix p = blob_points(40, 4, rng);
    std::vector<int> perm(40);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix q(40, 4);
    for (int i = 0; i < 40; ++i) q.row(i) = p.row(perm[static_cast<std::size_t>(i)]);
    const auto lp = dbscan(p, 1.2, 3);
    const auto lq = dbscan(q, 1.2, 3);
    // compare core-point co-membership, which has no tie ambiguity
    const auto oracle_p = oracle::dbscan(oracle::to_mat(p), 1.2, 3);
    for (int i = 0; i < 40; ++i)
      for (int j = 0; j < 40; ++j) {
        const int pi = perm[static_cast<std::size_t>(i)], pj = perm[static_cast<std::size_t>(j)];
        const bool core_pair = [&] {
          int ci = 0, cj = 0;
          for (int k = 0; k < 40; ++k) {
            ci += (p.row(pi) - p.row(k)).norm() <= 1.2;
            cj += (p.row(pj) - p.row(k)).norm() <= 1.2;
          }
          return ci >= 3 && cj >= 3;
        }();
        if (!core_pair) continue;
        EXPECT_EQ(lq[static_cast<std::size_t>(i)] == lq[static_cast<std::size_t>(j)],
                  lp[static_cast<std::size_t>(pi)] == lp[static_cast<std::size_t>(pj)]);
      }
    EXPECT_EQ(outlier_count(lp), outlier_count(lq));
    EXPECT_EQ(lp, oracle_p);
  }
}

TEST(Dbscan, GrowingEpsNeverAddsOutliers) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix p = blob_points(60, 6, rng);
    int prev = outlier_count(dbscan(p, 0.2, 3));
    for (double eps = 0.4; eps < 8.0; eps += 0.4) {
      const int now = outlier_count(dbscan(p, eps, 3));
      EXPECT_LE(now, prev);
      prev = now;
    }
  }
}

TEST(Dbscan, RejectsBadArguments) {
  EXPECT_THROW(dbscan(Matrix(0, 2), 1.0, 1), ValidationError);
  EXPECT_THROW(dbscan(Matrix::Zero(2, 2), 0.0, 1), ValidationError);
  EXPECT_THROW(dbscan(Matrix::Zero(2, 2), 1.0, 0), ValidationError);
}

TEST(Prototypes, SingletonAndPair) {
  Matrix p(3, 2);
  p << 1, 2, 3, 4, 7, 7;
  const Matrix protos = compute_prototypes(p, {0, 0, 1});
  EXPECT_EQ(protos.row(0), Eigen::RowVector2d(2, 3));
  EXPECT_EQ(protos.row(1), Eigen::RowVector2d(7, 7));
}

TEST(Prototypes, OutliersExcludedAndWeightedMeanHolds) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix p = blob_points(50, 5, rng);
    const auto labels = dbscan(p, 1.4, 3);
    if (cluster_count(labels) == 0) continue;
    const Matrix protos = compute_prototypes(p, labels);
    Eigen::RowVectorXd weighted = Eigen::RowVectorXd::Zero(5), direct = Eigen::RowVectorXd::Zero(5);
    int members = 0;
    for (int c = 0; c < protos.rows(); ++c) {
      int size = 0;
      Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(5);
      for (int i = 0; i < 50; ++i)
        if (labels[static_cast<std::size_t>(i)] == c) {
          mean += p.row(i);
          ++size;
        }
      mean /= size;
      EXPECT_LT((protos.row(c) - mean).cwiseAbs().maxCoeff(), 1e-12);
      weighted += size * protos.row(c);
      members += size;
    }
    for (int i = 0; i < 50; ++i)
      if (labels[static_cast<std::size_t>(i)] != kOutlier) direct += p.row(i);
    EXPECT_LT(((weighted - direct) / members).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Prototypes, AllOutliersIsNumericalError) {
  EXPECT_THROW(compute_prototypes(Matrix::Zero(3, 2), {kOutlier, kOutlier, kOutlier}), NumericalError);
}

TEST(ClusterLevel, NormalizationOnlyAffectsDistances) {
  Matrix p(4, 2);
  p << 1, 0, 10, 0.1, 0, 1, 0, 20;
  const auto raw = cluster_level(p, 0.5, 2, false);
  EXPECT_EQ(raw.clusters(), 0);
  const auto unit = cluster_level(p, 0.5, 2, true);
  EXPECT_EQ(unit.labels, (std::vector<int>{0, 0, 1, 1}));
  EXPECT_EQ(unit.prototypes.row(0), Eigen::RowVector2d(5.5, 0.05));
}

TEST(ClusterStats, Histogram) {
  const auto j = cluster_stats_json({0, 0, 1, kOutlier, 2, 2, 2});
  EXPECT_EQ(j["clusters"], 3);
  EXPECT_EQ(j["outliers"], 1);
}
