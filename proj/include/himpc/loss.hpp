#pragma once

// Meta-prototype contrastive losses and hard skeleton mining.
//
// Per level l and head m, instances v, frame features z and prototypes p
// are mapped by the head into a contrastive subspace:
//   v^ = H v,  z^_j = H z_j,  p^_c = H' p_c   (H' = H unless heterogeneous)
// The sequence loss is  -log softmax_c(v^ . p^_c / tau)[own cluster].
// The frame-weighted loss replaces v^ by each z^_j and weights frame j by
//   w_j = softmax_j( s * z^_j . p^_y )
// where y = argmax_c v^ . p^_c and s = -1 when y is the own cluster,
// +1 otherwise. Both losses are averaged over (level, sequence, head).

#include "himpc/autodiff.hpp"
#include "himpc/clustering.hpp"
#include "himpc/core.hpp"
#include "himpc/hierarchy.hpp"
#include "himpc/model.hpp"

#include <array>
#include <cmath>
#include <string>
#include <vector>

namespace himpc {

enum class LossVariant { himpc, himpc_h, dpc };

inline std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::himpc: return "himpc";
    case LossVariant::himpc_h: return "himpc-h";
    case LossVariant::dpc: return "dpc";
  }
  return "?";
}

inline LossVariant loss_variant_from_string(const std::string& s) {
  if (s == "himpc") return LossVariant::himpc;
  if (s == "himpc-h" || s == "himpc_h") return LossVariant::himpc_h;
  if (s == "dpc") return LossVariant::dpc;
  throw ValidationError("unknown loss variant '" + s + "' (expected himpc, himpc-h or dpc)");
}

/// tau = sqrt(h)
struct Temperature {
  double tau;

  static Temperature for_embedding(int h) {
    require(h >= 1, "embedding size must be >= 1");
    return {std::sqrt(static_cast<double>(h))};
  }
};

// ---------------------------------------------------------------------------
// Value path
// ---------------------------------------------------------------------------

/// Meta features of one level for a batch of B sequences of F frames.
struct MetaLevel {
  int frames = 1;
  std::vector<int> labels;          // own cluster per sequence
  std::vector<Matrix> instances;    // [head] B x h
  std::vector<Matrix> frame_feats;  // [head] (B*F) x h, sequence-major
  std::vector<Matrix> prototypes;   // [head] C x h

  int sequences() const { return static_cast<int>(labels.size()); }
  int heads() const { return static_cast<int>(instances.size()); }
};

struct MetaBatch {
  std::vector<MetaLevel> levels;
};

/// [level][head] is a B x F matrix; row b holds the frame weights of
/// sequence b.
struct ImportanceWeights {
  std::vector<std::vector<Matrix>> levels;
};

/// argmax_c v . p_c; ties go to the lowest index.
inline int predict_cluster(const Eigen::Ref<const Eigen::RowVectorXd>& instance, const Matrix& prototypes) {
  require(prototypes.rows() >= 1, "predict_cluster needs at least one prototype");
  require(prototypes.cols() == instance.size(), "predict_cluster: dimension mismatch");
  int best = 0;
  double best_dot = prototypes.row(0).dot(instance);
  for (Eigen::Index c = 1; c < prototypes.rows(); ++c) {
    const double d = prototypes.row(c).dot(instance);
    if (d > best_dot) {
      best_dot = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

namespace detail {
inline Vector softmax(const Vector& x) {
  Vector e = (x.array() - x.maxCoeff()).exp();
  return e / e.sum();
}

/// -log softmax(logits)[target]
inline double neg_log_softmax(const Eigen::Ref<const Eigen::RowVectorXd>& logits, int target) {
  const double mx = logits.maxCoeff();
  return std::log((logits.array() - mx).exp().sum()) + mx - logits(target);
}
}  // namespace detail

/// Normalized similarity of each frame to the predicted prototype.
inline Vector frame_certainty(const Matrix& frame_feats, const Eigen::Ref<const Eigen::RowVectorXd>& proto) {
  require(frame_feats.rows() >= 1, "frame_certainty needs at least one frame");
  return detail::softmax(frame_feats * proto.transpose());
}

/// Importance of each frame: favours the least similar frames when the
/// prediction agrees with the cluster (hard positives) and the most
/// similar ones otherwise (hard negatives).
inline Vector frame_importance(const Matrix& frame_feats, const Eigen::Ref<const Eigen::RowVectorXd>& proto,
                               int predicted, int cluster) {
  require(frame_feats.rows() >= 1, "frame_importance needs at least one frame");
  const double sign = predicted == cluster ? -1.0 : 1.0;
  return detail::softmax(sign * (frame_feats * proto.transpose()));
}

inline ImportanceWeights importance_weights(const MetaBatch& batch) {
  ImportanceWeights w;
  for (const auto& lvl : batch.levels) {
    std::vector<Matrix> per_head;
    for (int m = 0; m < lvl.heads(); ++m) {
      Matrix wm(lvl.sequences(), lvl.frames);
      const Matrix& protos = lvl.prototypes[static_cast<std::size_t>(m)];
      for (int b = 0; b < lvl.sequences(); ++b) {
        const int y = predict_cluster(lvl.instances[static_cast<std::size_t>(m)].row(b), protos);
        const Matrix frames = lvl.frame_feats[static_cast<std::size_t>(m)].middleRows(b * lvl.frames, lvl.frames);
        wm.row(b) = frame_importance(frames, protos.row(y), y, lvl.labels[static_cast<std::size_t>(b)]).transpose();
      }
      per_head.push_back(std::move(wm));
    }
    w.levels.push_back(std::move(per_head));
  }
  return w;
}

/// Sequence-level meta-prototype contrastive loss.
inline double himpc_loss(const MetaBatch& batch, double tau) {
  double total = 0.0;
  long long terms = 0;
  for (const auto& lvl : batch.levels) {
    for (int m = 0; m < lvl.heads(); ++m) {
      const Matrix logits = lvl.instances[static_cast<std::size_t>(m)] *
                            lvl.prototypes[static_cast<std::size_t>(m)].transpose() / tau;
      for (int b = 0; b < lvl.sequences(); ++b)
        total += detail::neg_log_softmax(logits.row(b), lvl.labels[static_cast<std::size_t>(b)]);
      terms += lvl.sequences();
    }
  }
  return terms == 0 ? 0.0 : total / static_cast<double>(terms);
}

/// Frame-level loss weighted by hard skeleton mining importances.
inline double himpc_h_loss(const MetaBatch& batch, const ImportanceWeights& weights, double tau) {
  require(weights.levels.size() == batch.levels.size(), "importance weights do not match the batch");
  double total = 0.0;
  long long terms = 0;
  for (std::size_t l = 0; l < batch.levels.size(); ++l) {
    const auto& lvl = batch.levels[l];
    for (int m = 0; m < lvl.heads(); ++m) {
      const Matrix logits = lvl.frame_feats[static_cast<std::size_t>(m)] *
                            lvl.prototypes[static_cast<std::size_t>(m)].transpose() / tau;
      const Matrix& w = weights.levels[l][static_cast<std::size_t>(m)];
      for (int b = 0; b < lvl.sequences(); ++b) {
        const int c = lvl.labels[static_cast<std::size_t>(b)];
        double seq = 0.0;
        for (int j = 0; j < lvl.frames; ++j) seq += w(b, j) * detail::neg_log_softmax(logits.row(b * lvl.frames + j), c);
        total += seq;
      }
      terms += lvl.sequences();
    }
  }
  return terms == 0 ? 0.0 : total / static_cast<double>(terms);
}

/// Instances and prototypes of one level in the original feature space.
struct PlainLevel {
  std::vector<int> labels;
  Matrix instances;   // B x h
  Matrix prototypes;  // C x h
};

/// Direct prototype contrast: the sequence loss without heads.
inline double loss_variant_dpc(const std::vector<PlainLevel>& levels, double tau) {
  double total = 0.0;
  long long terms = 0;
  for (const auto& lvl : levels) {
    const Matrix logits = lvl.instances * lvl.prototypes.transpose() / tau;
    for (std::size_t b = 0; b < lvl.labels.size(); ++b)
      total += detail::neg_log_softmax(logits.row(static_cast<Eigen::Index>(b)), lvl.labels[b]);
    terms += static_cast<long long>(lvl.labels.size());
  }
  return terms == 0 ? 0.0 : total / static_cast<double>(terms);
}

// ---------------------------------------------------------------------------
// Training batches (tape path)
// ---------------------------------------------------------------------------

/// Encoder inputs of one level: the member sequences' frames stacked
/// sequence-major, their clusters, and that level's prototypes.
struct LevelBatch {
  Matrix frames;  // (B*F) x 3n_l
  std::vector<int> labels;
  Matrix prototypes;  // C x h, held constant

  int sequences() const { return static_cast<int>(labels.size()); }
};

struct TrainBatch {
  int frames = 1;
  std::array<LevelBatch, kLevels> levels;  // empty level = inactive
  // Optional importance weights held fixed ([level][head], B x F), used
  // instead of recomputing them when weights are stop-gradient.
  std::array<std::vector<Matrix>, kLevels> fixed_weights;
};

struct LossOptions {
  LossVariant variant = LossVariant::himpc_h;
  double tau = 1.0;
  bool stop_grad_weights = true;
};

/// Builds the batch loss on the tape and returns the scalar node.
inline Var batch_loss(Tape& t, const ParamVars& pv, const ModelParams& params, const TrainBatch& batch,
                      const LossOptions& opt) {
  const int F = batch.frames;
  const int heads = opt.variant == LossVariant::dpc ? 0 : params.heads;
  if (opt.variant != LossVariant::dpc) require(heads >= 1, "meta-prototype losses need at least one head");

  std::vector<Var> parts;
  long long terms = 0;
  for (int l = 0; l < kLevels; ++l) {
    const auto& lb = batch.levels[l];
    if (lb.sequences() == 0) continue;
    require(lb.frames.rows() == static_cast<Eigen::Index>(lb.sequences()) * F, "level batch has wrong frame count");
    Var frames = t.constant(lb.frames);
    Var z = encode_on_tape(t, pv, l, frames, params.activation);
    Var protos = t.constant(lb.prototypes);

    if (opt.variant == LossVariant::dpc) {
      Var v = ops::mean_groups(t, z, F);
      Var logits = ops::scale(t, ops::matmul_nt(t, v, protos), 1.0 / opt.tau);
      parts.push_back(ops::sum(t, ops::cross_entropy_rows(t, logits, lb.labels)));
      terms += lb.sequences();
      continue;
    }

    Var v = ops::mean_groups(t, z, F);
    for (int m = 0; m < heads; ++m) {
      Var h_inst = pv.instance_heads[l][static_cast<std::size_t>(m)];
      Var p_hat = ops::matmul_nt(t, protos, pv.prototype_head(l, m));
      if (opt.variant == LossVariant::himpc) {
        Var v_hat = ops::matmul_nt(t, v, h_inst);
        Var logits = ops::scale(t, ops::matmul_nt(t, v_hat, p_hat), 1.0 / opt.tau);
        parts.push_back(ops::sum(t, ops::cross_entropy_rows(t, logits, lb.labels)));
      } else {
        Var z_hat = ops::matmul_nt(t, z, h_inst);
        Var v_hat = ops::matmul_nt(t, v, h_inst);
        const Matrix& vh = t.value(v_hat);
        const Matrix& ph = t.value(p_hat);
        std::vector<int> predicted_rows;
        std::vector<int> frame_targets;
        Matrix signs(lb.sequences() * F, 1);
        for (int b = 0; b < lb.sequences(); ++b) {
          const int y = predict_cluster(vh.row(b), ph);
          const double s = y == lb.labels[static_cast<std::size_t>(b)] ? -1.0 : 1.0;
          for (int j = 0; j < F; ++j) {
            predicted_rows.push_back(y);
            frame_targets.push_back(lb.labels[static_cast<std::size_t>(b)]);
            signs(b * F + j, 0) = s;
          }
        }
        Var weights;
        if (opt.stop_grad_weights && !batch.fixed_weights[l].empty()) {
          const Matrix& fw = batch.fixed_weights[l][static_cast<std::size_t>(m)];
          require(fw.rows() == lb.sequences() && fw.cols() == F, "fixed importance weights have wrong shape");
          Matrix w(lb.sequences() * F, 1);
          for (int b = 0; b < lb.sequences(); ++b) w.col(0).segment(b * F, F) = fw.row(b).transpose();
          weights = t.constant(std::move(w));
        } else if (opt.stop_grad_weights) {
          Matrix w(lb.sequences() * F, 1);
          const Matrix& zh = t.value(z_hat);
          for (int b = 0; b < lb.sequences(); ++b) {
            const int y = predicted_rows[static_cast<std::size_t>(b * F)];
            w.col(0).segment(b * F, F) =
                frame_importance(zh.middleRows(b * F, F), ph.row(y), y, lb.labels[static_cast<std::size_t>(b)]);
          }
          weights = t.constant(std::move(w));
        } else {
          Var p_pred = ops::gather_rows(t, p_hat, predicted_rows);
          Var dots = ops::rowwise_dot(t, z_hat, p_pred);
          weights = ops::softmax_groups(t, ops::hadamard(t, dots, t.constant(signs)), F);
        }
        Var logits = ops::scale(t, ops::matmul_nt(t, z_hat, p_hat), 1.0 / opt.tau);
        Var ce = ops::cross_entropy_rows(t, logits, std::move(frame_targets));
        parts.push_back(ops::sum(t, ops::hadamard(t, weights, ce)));
      }
      terms += lb.sequences();
    }
  }

  if (parts.empty()) return t.constant(Matrix::Zero(1, 1));
  Var total = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) total = ops::add(t, total, parts[i]);
  return ops::scale(t, total, 1.0 / static_cast<double>(terms));
}

/// Value-only meta features of a training batch, for inspection and for
/// cross-checking the tape.
inline MetaBatch meta_batch(const ModelParams& params, const TrainBatch& batch) {
  MetaBatch mb;
  for (int l = 0; l < kLevels; ++l) {
    const auto& lb = batch.levels[l];
    if (lb.sequences() == 0) continue;
    MetaLevel ml;
    ml.frames = batch.frames;
    ml.labels = lb.labels;
    const Matrix z = encode_frames(params, l, lb.frames);
    Matrix v(lb.sequences(), params.embed);
    for (int b = 0; b < lb.sequences(); ++b) v.row(b) = tap(z.middleRows(b * batch.frames, batch.frames)).transpose();
    for (int m = 0; m < params.heads; ++m) {
      const Matrix& hi = params.instance_heads[l][static_cast<std::size_t>(m)];
      ml.instances.push_back(meta_transform(hi, v));
      ml.frame_feats.push_back(meta_transform(hi, z));
      ml.prototypes.push_back(meta_transform(params.prototype_head(l, m), lb.prototypes));
    }
    mb.levels.push_back(std::move(ml));
  }
  return mb;
}

/// Pins the importance weights of the current parameters into the batch.
inline void freeze_importance(const ModelParams& params, TrainBatch& batch) {
  const ImportanceWeights w = importance_weights(meta_batch(params, batch));
  std::size_t k = 0;
  for (int l = 0; l < kLevels; ++l) {
    batch.fixed_weights[l].clear();
    if (batch.levels[l].sequences() == 0) continue;
    batch.fixed_weights[l] = w.levels[k++];
  }
}

}  // namespace himpc
