#pragma once

// Finite-difference checks of every training loss on a small seeded batch.

#include "himpc/gradcheck.hpp"
#include "himpc/trainer.hpp"

#include <json.hpp>

#include <random>
#include <string>

namespace himpc {

struct ToyProblem {
  ModelParams params;
  TrainBatch batch;
  double tau = 1.0;
};

/// Four synthetic sequences of two walkers, clustered by walker at every
/// level, with prototypes from the initial parameters.
inline ToyProblem make_toy_problem(std::uint64_t seed, int embed = 16, int heads = 2, int joints = 20,
                                   int frames = 6, bool heterogeneous = false) {
  SyntheticOptions so;
  so.n_identities = 2;
  so.seqs_per_id = 2;
  so.frames = frames;
  so.joints = joints;
  so.noise_sigma = 0.01;
  so.seed = seed;
  const auto seqs = strip_labels(generate_synthetic(so));

  TrainConfig cfg;
  cfg.frames = frames;
  cfg.embed = embed;
  cfg.heads = heads;
  cfg.heterogeneous_heads = heterogeneous;
  cfg.seed = seed;
  const auto partitions = builtin_partitions(joints);
  TrainState s = init_training(cfg, partitions);
  const TrainingData data = prepare_training_data(seqs, cfg, partitions);

  ClusterState cs;
  cs.levels.resize(kLevels);
  const std::vector<int> labels{0, 0, 1, 1};
  for (int l = 0; l < kLevels; ++l) {
    cs.levels[l].labels = labels;
    cs.levels[l].prototypes = compute_prototypes(encode_instances(s.params, data, l), labels);
  }
  const std::vector<int> members{0, 1, 2, 3};
  return {s.params, make_train_batch(data, cs, members), cfg.tau()};
}

struct LossGradReport {
  GradCheckResult himpc;
  GradCheckResult himpc_h;          // importance weights held fixed
  GradCheckResult himpc_h_through;  // gradients also flow through the weights
  GradCheckResult dpc;

  double worst() const {
    return std::max({himpc.max_rel_error, himpc_h.max_rel_error, himpc_h_through.max_rel_error, dpc.max_rel_error});
  }
};

inline GradCheckResult check_loss(const TrainBatch& batch, LossOptions opt, const ModelParams& params, int probes,
                                  double fd_eps, std::uint64_t seed) {
  auto fn = [&](const ModelParams& p, ModelParams* g) { return batch_loss_and_grad(p, batch, opt, g); };
  return grad_check(fn, params, probes, fd_eps, seed);
}

inline LossGradReport check_loss_gradients(std::uint64_t seed, int probes = 200, double fd_eps = 1e-5, int embed = 16,
                                           int heads = 2) {
  const ToyProblem toy = make_toy_problem(seed, embed, heads);
  LossGradReport r;
  TrainBatch frozen = toy.batch;
  freeze_importance(toy.params, frozen);
  r.himpc = check_loss(toy.batch, {LossVariant::himpc, toy.tau, true}, toy.params, probes, fd_eps, seed + 1);
  r.himpc_h = check_loss(frozen, {LossVariant::himpc_h, toy.tau, true}, toy.params, probes, fd_eps, seed + 2);
  r.himpc_h_through =
      check_loss(toy.batch, {LossVariant::himpc_h, toy.tau, false}, toy.params, probes, fd_eps, seed + 3);
  ModelParams plain = toy.params;
  for (int l = 0; l < kLevels; ++l) plain.instance_heads[l].clear();
  plain.heads = 0;
  r.dpc = check_loss(toy.batch, {LossVariant::dpc, toy.tau, true}, plain, probes, fd_eps, seed + 4);
  return r;
}

inline nlohmann::json grad_report_json(const LossGradReport& r) {
  auto one = [](const GradCheckResult& g) {
    return nlohmann::json{{"max_rel_error", g.max_rel_error}, {"worst", g.worst}, {"probes", g.probes}};
  };
  return {{"himpc", one(r.himpc)},
          {"himpc_h", one(r.himpc_h)},
          {"himpc_h_through_weights", one(r.himpc_h_through)},
          {"dpc", one(r.dpc)},
          {"max_rel_error", r.worst()}};
}

}  // namespace himpc
