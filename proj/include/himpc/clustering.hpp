#pragma once

// DBSCAN over instance vectors and per-cluster prototypes.

#include "himpc/core.hpp"

#include <json.hpp>

#include <deque>
#include <map>
#include <vector>

namespace himpc {

inline constexpr int kOutlier = -1;

/// Classic DBSCAN with Euclidean distance. A point is core when at least
/// min_samples points (itself included) lie within eps. Clusters are
/// numbered in the order their first core point appears in the input; a
/// border point reachable from several clusters joins the one expanded
/// first. Unreachable points get kOutlier.
inline std::vector<int> dbscan(const Matrix& points, double eps, int min_samples) {
  require(points.rows() >= 1, "dbscan needs at least one point");
  require(eps > 0.0, "dbscan eps must be positive");
  require(min_samples >= 1, "dbscan min_samples must be >= 1");

  const Eigen::Index n = points.rows();
  const double eps2 = eps * eps;
  std::vector<std::vector<int>> neighbors(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if ((points.row(i) - points.row(j)).squaredNorm() <= eps2)
        neighbors[static_cast<std::size_t>(i)].push_back(static_cast<int>(j));

  auto is_core = [&](int i) { return static_cast<int>(neighbors[static_cast<std::size_t>(i)].size()) >= min_samples; };

  constexpr int kUnvisited = -2;
  std::vector<int> labels(static_cast<std::size_t>(n), kUnvisited);
  int cluster = 0;
  for (int i = 0; i < n; ++i) {
    if (labels[static_cast<std::size_t>(i)] != kUnvisited) continue;
    if (!is_core(i)) {
      labels[static_cast<std::size_t>(i)] = kOutlier;  // may become a border point later
      continue;
    }
    labels[static_cast<std::size_t>(i)] = cluster;
    std::deque<int> queue(neighbors[static_cast<std::size_t>(i)].begin(), neighbors[static_cast<std::size_t>(i)].end());
    while (!queue.empty()) {
      const int q = queue.front();
      queue.pop_front();
      auto& lq = labels[static_cast<std::size_t>(q)];
      if (lq == kOutlier) lq = cluster;
      if (lq != kUnvisited) continue;
      lq = cluster;
      if (is_core(q))
        for (int r : neighbors[static_cast<std::size_t>(q)]) queue.push_back(r);
    }
    ++cluster;
  }
  return labels;
}

inline int cluster_count(const std::vector<int>& labels) {
  int c = 0;
  for (int l : labels) c = std::max(c, l + 1);
  return c;
}

inline int outlier_count(const std::vector<int>& labels) {
  return static_cast<int>(std::count(labels.begin(), labels.end(), kOutlier));
}

/// Row c is the mean of the instances labelled c; outliers are ignored.
inline Matrix compute_prototypes(const Matrix& instances, const std::vector<int>& labels) {
  require(static_cast<Eigen::Index>(labels.size()) == instances.rows(), "one label per instance required");
  const int C = cluster_count(labels);
  if (C == 0) throw NumericalError("every instance is an outlier; no prototypes");
  Matrix protos = Matrix::Zero(C, instances.cols());
  std::vector<int> counts(static_cast<std::size_t>(C), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == kOutlier) continue;
    protos.row(labels[i]) += instances.row(static_cast<Eigen::Index>(i));
    ++counts[static_cast<std::size_t>(labels[i])];
  }
  for (int c = 0; c < C; ++c) {
    require(counts[static_cast<std::size_t>(c)] > 0, "cluster " + std::to_string(c) + " has no members");
    protos.row(c) /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
  }
  return protos;
}

/// Clustering result for one level.
struct LevelClusters {
  std::vector<int> labels;
  Matrix prototypes;  // C x h, empty when every instance is an outlier

  int clusters() const { return static_cast<int>(prototypes.rows()); }
};

struct ClusterState {
  double eps = 0.0;
  int min_samples = 0;
  std::vector<LevelClusters> levels;
};

/// Clusters one level's instances. When normalize is set, distances are
/// measured between L2-normalized instances; prototypes always average
/// the raw instances.
inline LevelClusters cluster_level(const Matrix& instances, double eps, int min_samples, bool normalize = false) {
  LevelClusters lc;
  if (normalize) {
    Matrix unit = instances;
    for (Eigen::Index i = 0; i < unit.rows(); ++i) {
      const double n = unit.row(i).norm();
      if (n > 0.0) unit.row(i) /= n;
    }
    lc.labels = dbscan(unit, eps, min_samples);
  } else {
    lc.labels = dbscan(instances, eps, min_samples);
  }
  if (cluster_count(lc.labels) > 0) lc.prototypes = compute_prototypes(instances, lc.labels);
  return lc;
}

/// {"clusters": C, "outliers": n, "sizes": {size: count, ...}}
inline nlohmann::json cluster_stats_json(const std::vector<int>& labels) {
  std::vector<int> sizes(static_cast<std::size_t>(cluster_count(labels)), 0);
  for (int l : labels)
    if (l != kOutlier) ++sizes[static_cast<std::size_t>(l)];
  std::map<int, int> hist;
  for (int s : sizes) ++hist[s];
  nlohmann::json h = nlohmann::json::object();
  for (auto [size, count] : hist) h[std::to_string(size)] = count;
  return {{"clusters", sizes.size()}, {"outliers", outlier_count(labels)}, {"size_histogram", h}};
}

}  // namespace himpc
