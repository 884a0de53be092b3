#pragma once

// Multi-level meta-representations and probe/gallery matching (CMC, mAP).

#include "himpc/core.hpp"
#include "himpc/hierarchy.hpp"
#include "himpc/model.hpp"
#include "himpc/skeleton_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

namespace himpc {

struct MsmrOptions {
  std::array<bool, kLevels> levels{true, true, true};
  bool center_root = false;
};

/// Concatenation over active levels of the head-averaged pooled
/// meta-instance. Without heads a level contributes its pooled instance.
inline Vector build_msmr(const ModelParams& params, const PartitionSet& partitions, const Matrix& frames,
                         const MsmrOptions& opt = {}) {
  require(frames.cols() == 3 * partitions[0].joints,
          "sequence has " + std::to_string(frames.cols() / 3) + " joints, model expects " +
              std::to_string(partitions[0].joints));
  Matrix input = frames;
  if (opt.center_root) {
    for (Eigen::Index f = 0; f < input.rows(); ++f) {
      const Eigen::RowVector3d root = input.block<1, 3>(f, 0);
      for (int j = 0; j < partitions[0].joints; ++j) input.block<1, 3>(f, 3 * j) -= root;
    }
  }
  const int active = static_cast<int>(std::count(opt.levels.begin(), opt.levels.end(), true));
  Vector out(static_cast<Eigen::Index>(active) * params.embed);
  Eigen::Index offset = 0;
  for (int l = 0; l < kLevels; ++l) {
    if (!opt.levels[l]) continue;
    const Vector v = tap(encode_frames(params, l, level_representation(input, partitions[l])));
    Vector block = Vector::Zero(params.embed);
    if (params.heads == 0) {
      block = v;
    } else {
      for (const auto& h : params.instance_heads[l]) block += h * v;
      block /= static_cast<double>(params.heads);
    }
    out.segment(offset, params.embed) = block;
    offset += params.embed;
  }
  return out;
}

/// Worker count for embarrassingly parallel passes: HIMPC_THREADS when
/// set, otherwise the hardware concurrency.
inline int worker_count() {
  int n = static_cast<int>(std::thread::hardware_concurrency());
  if (const char* env = std::getenv("HIMPC_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) n = cap;
  }
  return std::max(1, n);
}

/// Calls fn(i) for i in [0, n) on up to worker_count() threads. Each index
/// is handled by exactly one call, so results written per index are
/// independent of the thread count.
template <class Fn>
void parallel_for(int n, Fn&& fn) {
  const int workers = std::min(worker_count(), std::max(1, n));
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += workers) fn(i);
    });
  for (auto& t : pool) t.join();
}

struct Embedded {
  std::string seq_id;
  int identity = -1;
  Vector msmr;
};

inline std::vector<Embedded> embed_sequences(const ModelParams& params, const PartitionSet& partitions,
                                             const std::vector<SkeletonSequence>& seqs, const MsmrOptions& opt = {}) {
  std::vector<Embedded> out(seqs.size());
  for (const auto& s : seqs)
    if (!s.identity) throw ValidationError("evaluation sequence '" + s.seq_id + "' has no identity");
  parallel_for(static_cast<int>(seqs.size()), [&](int i) {
    const auto& s = seqs[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(i)] = {s.seq_id, *s.identity, build_msmr(params, partitions, s.frames, opt)};
  });
  return out;
}

struct ProbeResult {
  std::string seq_id;
  int identity = -1;
  std::string nearest_seq_id;
  int nearest_identity = -1;
  double nearest_distance = 0.0;
  int first_correct_rank = 0;  // 1-based, 0 if the identity is absent
  double average_precision = 0.0;
};

struct EvalReport {
  std::vector<double> curve;  // curve[k-1] = fraction matched within top k
  double r1 = 0.0, r5 = 0.0, r10 = 0.0;
  double map = 0.0;
  std::vector<ProbeResult> probes;
};

/// Gallery indices sorted by ascending distance; ties keep gallery order.
inline std::vector<int> rank_gallery(const Vector& probe, const std::vector<Embedded>& gallery) {
  std::vector<double> dist(gallery.size());
  for (std::size_t g = 0; g < gallery.size(); ++g) dist[g] = (gallery[g].msmr - probe).norm();
  std::vector<int> order(gallery.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return dist[static_cast<std::size_t>(a)] < dist[static_cast<std::size_t>(b)];
  });
  return order;
}

/// Matches every probe independently against the whole gallery.
inline EvalReport match(const std::vector<Embedded>& probes, const std::vector<Embedded>& gallery) {
  require(!probes.empty(), "probe set is empty");
  require(!gallery.empty(), "gallery set is empty");
  const auto dim = probes.front().msmr.size();
  for (const auto& e : probes) require(e.msmr.size() == dim, "probe representations differ in dimension");
  for (const auto& e : gallery) require(e.msmr.size() == dim, "gallery representation dimension mismatch");

  EvalReport rep;
  rep.probes.resize(probes.size());
  parallel_for(static_cast<int>(probes.size()), [&](int pi) {
    const auto& p = probes[static_cast<std::size_t>(pi)];
    const auto order = rank_gallery(p.msmr, gallery);
    ProbeResult r;
    r.seq_id = p.seq_id;
    r.identity = p.identity;
    const auto& nearest = gallery[static_cast<std::size_t>(order.front())];
    r.nearest_seq_id = nearest.seq_id;
    r.nearest_identity = nearest.identity;
    r.nearest_distance = (nearest.msmr - p.msmr).norm();
    int hits = 0;
    double precision_sum = 0.0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      if (gallery[static_cast<std::size_t>(order[k])].identity != p.identity) continue;
      ++hits;
      if (r.first_correct_rank == 0) r.first_correct_rank = static_cast<int>(k) + 1;
      precision_sum += static_cast<double>(hits) / static_cast<double>(k + 1);
    }
    r.average_precision = hits == 0 ? 0.0 : precision_sum / hits;
    rep.probes[static_cast<std::size_t>(pi)] = r;
  });

  rep.curve.assign(gallery.size(), 0.0);
  double ap_sum = 0.0;
  for (const auto& r : rep.probes) {
    if (r.first_correct_rank > 0)
      for (std::size_t k = static_cast<std::size_t>(r.first_correct_rank) - 1; k < rep.curve.size(); ++k) rep.curve[k] += 1.0;
    ap_sum += r.average_precision;
  }
  for (auto& c : rep.curve) c /= static_cast<double>(probes.size());
  auto at = [&](std::size_t k) { return rep.curve[std::min(k, rep.curve.size()) - 1]; };
  rep.r1 = at(1);
  rep.r5 = at(5);
  rep.r10 = at(10);
  rep.map = ap_sum / static_cast<double>(probes.size());
  return rep;
}

inline nlohmann::json report_to_json(const EvalReport& r, bool with_probes = true) {
  nlohmann::json j = {{"r1", r.r1}, {"r5", r.r5}, {"r10", r.r10}, {"map", r.map}, {"curve", r.curve}};
  if (with_probes) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& p : r.probes)
      rows.push_back({{"seq_id", p.seq_id},
                      {"identity", p.identity},
                      {"nearest_seq_id", p.nearest_seq_id},
                      {"nearest_identity", p.nearest_identity},
                      {"nearest_distance", p.nearest_distance},
                      {"first_correct_rank", p.first_correct_rank},
                      {"average_precision", p.average_precision}});
    j["probes"] = rows;
  }
  return j;
}

/// Two columns: rank (1-based), cumulative match rate.
inline std::string cmc_csv(const EvalReport& r) {
  std::string out = "rank,rate\n";
  char buf[64];
  for (std::size_t k = 0; k < r.curve.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", k + 1, r.curve[k]);
    out += buf;
  }
  return out;
}

}  // namespace himpc
