#pragma once

// Alternating cluster / contrast training loop with resumable state.
//
// Each epoch: encode every training sequence at every active level and
// pool over time; run DBSCAN per level; average members into
// prototypes; then sweep shuffled mini-batches of the clustered
// sequences, minimizing the configured loss with Adam. Prototypes stay
// fixed for the whole epoch.

#include "himpc/adam.hpp"
#include "himpc/clustering.hpp"
#include "himpc/config.hpp"
#include "himpc/hierarchy.hpp"
#include "himpc/loss.hpp"
#include "himpc/model.hpp"
#include "himpc/skeleton_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace himpc {

struct EpochRecord {
  int epoch = 0;  // 1-based
  double loss = 0.0;
  bool skipped = false;  // every instance was an outlier
  std::array<int, kLevels> clusters{};
  std::array<int, kLevels> outliers{};
  int batches = 0;
  double wall_seconds = 0.0;

  bool same_outcome(const EpochRecord& o) const {
    return epoch == o.epoch && skipped == o.skipped && clusters == o.clusters && outliers == o.outliers &&
           batches == o.batches && (skipped || loss == o.loss);
  }
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;  // 0 until an epoch has produced a loss
};

/// Per-epoch deterministic content only; timing is kept out so that two
/// identical runs serialize identically.
inline nlohmann::json log_to_json(const TrainLog& log, bool with_timing = false) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : log.epochs) {
    nlohmann::json j = {{"epoch", e.epoch},
                        {"loss", e.skipped ? nlohmann::json(nullptr) : nlohmann::json(e.loss)},
                        {"skipped", e.skipped},
                        {"clusters", e.clusters},
                        {"outliers", e.outliers},
                        {"batches", e.batches}};
    if (with_timing) j["wall_seconds"] = e.wall_seconds;
    arr.push_back(std::move(j));
  }
  return {{"best_epoch", log.best_epoch}, {"epochs", arr}};
}

inline TrainLog log_from_json(const nlohmann::json& j) {
  TrainLog log;
  log.best_epoch = j.at("best_epoch").get<int>();
  for (const auto& e : j.at("epochs")) {
    EpochRecord r;
    r.epoch = e.at("epoch").get<int>();
    r.skipped = e.at("skipped").get<bool>();
    r.loss = r.skipped ? 0.0 : e.at("loss").get<double>();
    r.clusters = e.at("clusters").get<std::array<int, kLevels>>();
    r.outliers = e.at("outliers").get<std::array<int, kLevels>>();
    r.batches = e.at("batches").get<int>();
    if (e.contains("wall_seconds")) r.wall_seconds = e["wall_seconds"].get<double>();
    log.epochs.push_back(r);
  }
  return log;
}

/// Everything needed to continue training bit-exactly.
struct TrainState {
  TrainConfig config;
  PartitionSet partitions;
  ModelParams params;
  AdamState<ModelParams> adam;
  std::mt19937_64 rng;
  int epoch = 0;  // completed epochs
  double best_loss = std::numeric_limits<double>::infinity();
  int patience = 0;
  int outlier_streak = 0;
  bool finished = false;
  TrainLog log;
};

using WarningSink = std::function<void(const std::string&)>;

inline TrainState init_training(const TrainConfig& config, const PartitionSet& partitions) {
  validate(config);
  validate_partitions(partitions);
  TrainState s;
  s.config = config;
  s.partitions = partitions;
  s.rng.seed(config.seed);
  const int heads = config.loss == LossVariant::dpc ? 0 : config.heads;
  s.params = init_params(partition_sizes(partitions), config.embed, heads, config.heterogeneous_heads, s.rng,
                         config.activation);
  s.adam = AdamState<ModelParams>(s.params, AdamOptions{config.lr});
  s.finished = config.max_epoch == 0;
  return s;
}

/// Level inputs of a training set, prepared once: hierarchy[l] stacks
/// the level-l frames of every sequence, sequence-major.
struct TrainingData {
  int sequences = 0;
  int frames = 0;
  std::array<Matrix, kLevels> hierarchy;
};

inline TrainingData prepare_training_data(std::span<const UnlabeledSequence> seqs, const TrainConfig& config,
                                          const PartitionSet& partitions) {
  require(!seqs.empty(), "training set is empty");
  const int F = config.frames;
  TrainingData d;
  d.sequences = static_cast<int>(seqs.size());
  d.frames = F;
  for (int l = 0; l < kLevels; ++l) d.hierarchy[l].resize(static_cast<Eigen::Index>(seqs.size()) * F, 3 * partitions[l].size());
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& s = seqs[i];
    require(s.frames.rows() == F, "sequence '" + s.seq_id + "' has " + std::to_string(s.frames.rows()) +
                                      " frames; training expects windows of " + std::to_string(F));
    require(s.joints == partitions[0].joints,
            "sequence '" + s.seq_id + "' has " + std::to_string(s.joints) + " joints, expected " +
                std::to_string(partitions[0].joints));
    Matrix frames = s.frames;
    if (config.center_root) {
      for (int f = 0; f < F; ++f) {
        const Eigen::RowVector3d root = frames.block<1, 3>(f, 0);
        for (int j = 0; j < s.joints; ++j) frames.block<1, 3>(f, 3 * j) -= root;
      }
    }
    const auto h = build_hierarchy(s.seq_id, frames, partitions);
    for (int l = 0; l < kLevels; ++l) d.hierarchy[l].middleRows(static_cast<Eigen::Index>(i) * F, F) = h.levels[l];
  }
  return d;
}

/// Pooled instances (N x h) of one level under the current parameters.
inline Matrix encode_instances(const ModelParams& params, const TrainingData& data, int level) {
  const Matrix z = encode_frames(params, level, data.hierarchy[level]);
  Matrix v(data.sequences, params.embed);
  for (int i = 0; i < data.sequences; ++i) v.row(i) = z.middleRows(i * data.frames, data.frames).colwise().mean();
  return v;
}

/// Re-encodes and clusters every active level.
inline ClusterState cluster_epoch(const TrainState& s, const TrainingData& data) {
  ClusterState cs;
  cs.eps = s.config.eps;
  cs.min_samples = s.config.min_samples;
  cs.levels.resize(kLevels);
  for (int l = 0; l < kLevels; ++l) {
    if (!s.config.levels[l]) {
      cs.levels[l].labels.assign(static_cast<std::size_t>(data.sequences), kOutlier);
      continue;
    }
    cs.levels[l] = cluster_level(encode_instances(s.params, data, l), s.config.eps, s.config.min_samples,
                                 s.config.normalize_instances);
  }
  return cs;
}

inline TrainBatch make_train_batch(const TrainingData& data, const ClusterState& cs, std::span<const int> members) {
  TrainBatch b;
  b.frames = data.frames;
  const int F = data.frames;
  for (int l = 0; l < kLevels; ++l) {
    const auto& lc = cs.levels[static_cast<std::size_t>(l)];
    std::vector<int> rows;
    for (int i : members)
      if (lc.labels[static_cast<std::size_t>(i)] != kOutlier) rows.push_back(i);
    auto& lb = b.levels[l];
    if (rows.empty()) continue;
    lb.frames.resize(static_cast<Eigen::Index>(rows.size()) * F, data.hierarchy[l].cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      lb.frames.middleRows(static_cast<Eigen::Index>(r) * F, F) = data.hierarchy[l].middleRows(rows[r] * F, F);
      lb.labels.push_back(lc.labels[static_cast<std::size_t>(rows[r])]);
    }
    lb.prototypes = lc.prototypes;
  }
  return b;
}

inline LossOptions loss_options(const TrainConfig& c) {
  return {c.loss, c.tau(), c.stop_grad_weights};
}

/// Loss and (optionally) gradients of one batch.
inline double batch_loss_and_grad(const ModelParams& params, const TrainBatch& batch, const LossOptions& opt,
                                  ModelParams* grads) {
  Tape tape;
  const ParamVars pv = bind_params(tape, params);
  const Var loss = batch_loss(tape, pv, params, batch, opt);
  const double value = tape.value(loss)(0, 0);
  if (grads) {
    tape.backward(loss);
    *grads = collect_grads(tape, pv, params);
  }
  return value;
}

/// Runs epochs until the state is finished or `budget` more epochs have
/// completed (budget < 0 means no limit).
inline void run_epochs(TrainState& s, std::span<const UnlabeledSequence> seqs, int budget = -1,
                       const WarningSink& warn = {}) {
  if (s.finished) return;
  const TrainingData data = prepare_training_data(seqs, s.config, s.partitions);
  const LossOptions opt = loss_options(s.config);
  int done = 0;

  while (!s.finished && (budget < 0 || done < budget)) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = s.epoch + 1;

    const ClusterState cs = cluster_epoch(s, data);
    std::vector<int> members;
    for (int i = 0; i < data.sequences; ++i) {
      bool any = false;
      for (int l = 0; l < kLevels; ++l) any = any || cs.levels[l].labels[static_cast<std::size_t>(i)] != kOutlier;
      if (any) members.push_back(i);
    }
    bool degenerate = true;
    for (int l = 0; l < kLevels; ++l) {
      if (!s.config.levels[l]) continue;
      rec.clusters[l] = cs.levels[l].clusters();
      rec.outliers[l] = outlier_count(cs.levels[l].labels);
      degenerate = degenerate && rec.clusters[l] <= 1;
    }

    if (members.empty()) {
      rec.skipped = true;
      if (++s.outlier_streak >= 3)
        throw NumericalError("every instance was an outlier for 3 consecutive epochs; increase eps or lower min_samples");
      if (warn) warn("epoch " + std::to_string(rec.epoch) + ": every instance is an outlier, epoch skipped");
    } else {
      s.outlier_streak = 0;
      if (degenerate && warn)
        warn("epoch " + std::to_string(rec.epoch) +
             ": clustering collapsed to a single cluster; the contrastive loss is zero (try a smaller eps)");
      std::shuffle(members.begin(), members.end(), s.rng);
      double total = 0.0;
      for (std::size_t start = 0; start < members.size(); start += static_cast<std::size_t>(s.config.batch_size)) {
        const std::size_t end = std::min(members.size(), start + static_cast<std::size_t>(s.config.batch_size));
        const TrainBatch batch =
            make_train_batch(data, cs, std::span<const int>(members).subspan(start, end - start));
        ModelParams grads;
        const double loss = batch_loss_and_grad(s.params, batch, opt, &grads);
        if (!std::isfinite(loss)) throw NumericalError("non-finite loss at epoch " + std::to_string(rec.epoch));
        adam_step(s.adam, s.params, grads);
        total += loss;
        ++rec.batches;
      }
      rec.loss = total / rec.batches;
      if (rec.loss < s.best_loss) {
        s.best_loss = rec.loss;
        s.log.best_epoch = rec.epoch;
        s.patience = 0;
      } else {
        ++s.patience;
      }
    }

    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    s.log.epochs.push_back(rec);
    ++s.epoch;
    ++done;
    if (s.epoch >= s.config.max_epoch || s.patience >= s.config.max_patience) s.finished = true;
  }
}

struct TrainResult {
  ModelParams params;
  TrainLog log;
};

inline TrainResult train(std::span<const UnlabeledSequence> seqs, const TrainConfig& config,
                         const PartitionSet& partitions, const WarningSink& warn = {}) {
  require(!seqs.empty(), "training set is empty");
  TrainState s = init_training(config, partitions);
  run_epochs(s, seqs, -1, warn);
  return {s.params, s.log};
}

inline TrainResult train(std::span<const UnlabeledSequence> seqs, const TrainConfig& config,
                         const WarningSink& warn = {}) {
  require(!seqs.empty(), "training set is empty");
  return train(seqs, config, builtin_partitions(seqs.front().joints), warn);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json checkpoint_to_json(const TrainState& s) {
  std::ostringstream rng;
  rng << s.rng;
  return {{"format", "himpc-checkpoint"},
          {"version", kCheckpointVersion},
          {"config", config_to_json(s.config)},
          {"partitions", partitions_to_json(s.partitions)},
          {"params", params_to_json(s.params)},
          {"adam", adam_to_json(s.adam)},
          {"rng", rng.str()},
          {"epoch", s.epoch},
          {"best_loss", std::isfinite(s.best_loss) ? nlohmann::json(s.best_loss) : nlohmann::json(nullptr)},
          {"patience", s.patience},
          {"outlier_streak", s.outlier_streak},
          {"finished", s.finished},
          {"log", log_to_json(s.log)}};
}

inline TrainState checkpoint_from_json(const nlohmann::json& j) {
  TrainState s;
  try {
    require(j.at("format").get<std::string>() == "himpc-checkpoint", "not a checkpoint file");
    require(j.at("version").get<int>() == kCheckpointVersion, "unsupported checkpoint version");
    s.config = config_from_json(j.at("config"));
    s.partitions = partitions_from_json(j.at("partitions"));
    s.params = params_from_json(j.at("params"));
    s.adam = adam_from_json(j.at("adam"));
    std::istringstream rng(j.at("rng").get<std::string>());
    rng >> s.rng;
    require(!rng.fail(), "corrupt RNG state in checkpoint");
    s.epoch = j.at("epoch").get<int>();
    s.best_loss = j.at("best_loss").is_null() ? std::numeric_limits<double>::infinity()
                                              : j.at("best_loss").get<double>();
    s.patience = j.at("patience").get<int>();
    s.outlier_streak = j.at("outlier_streak").get<int>();
    s.finished = j.at("finished").get<bool>();
    s.log = log_from_json(j.at("log"));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint: ") + e.what());
  }
  return s;
}

inline void save_checkpoint(const std::string& path, const TrainState& s) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError("cannot write checkpoint " + path);
  os << checkpoint_to_json(s).dump() << '\n';
}

inline TrainState load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open checkpoint " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace himpc
