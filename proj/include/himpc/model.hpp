#pragma once

// Level encoders (one-hidden-layer MLPs), temporal average pooling and
// meta-transformation heads, as values and as tape expressions.

#include "himpc/autodiff.hpp"
#include "himpc/core.hpp"
#include "himpc/hierarchy.hpp"

#include <json.hpp>

#include <array>
#include <concepts>
#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace himpc {

enum class Activation { relu, tanh };

inline std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw ValidationError("unknown activation '" + s + "'");
}

/// z = W_out * act(W_in * x + b_in) + b_out. Biases are 1 x h rows.
struct LevelEncoder {
  Matrix w_in;   // h x 3n
  Matrix b_in;   // 1 x h
  Matrix w_out;  // h x h
  Matrix b_out;  // 1 x h
};

struct ModelParams {
  int embed = 0;  // h, also the hidden width
  int heads = 0;  // M; 0 means identity transform (plain prototype contrast)
  bool heterogeneous = false;
  Activation activation = Activation::relu;
  std::array<int, kLevels> parts{};  // n_l
  std::array<LevelEncoder, kLevels> encoders;
  std::array<std::vector<Matrix>, kLevels> instance_heads;   // h x h each
  std::array<std::vector<Matrix>, kLevels> prototype_heads;  // only when heterogeneous

  const Matrix& prototype_head(int level, int m) const {
    return heterogeneous ? prototype_heads[level][static_cast<std::size_t>(m)]
                         : instance_heads[level][static_cast<std::size_t>(m)];
  }
};

/// Visits every tensor in a fixed order with a stable name.
template <class P, class Fn>
  requires std::same_as<std::remove_const_t<P>, ModelParams>
void for_each_tensor(P& p, Fn&& fn) {
  for (int l = 0; l < kLevels; ++l) {
    const std::string pre = "encoder[" + std::to_string(l + 1) + "].";
    fn(pre + "w_in", p.encoders[l].w_in);
    fn(pre + "b_in", p.encoders[l].b_in);
    fn(pre + "w_out", p.encoders[l].w_out);
    fn(pre + "b_out", p.encoders[l].b_out);
  }
  for (int l = 0; l < kLevels; ++l)
    for (std::size_t m = 0; m < p.instance_heads[l].size(); ++m)
      fn("head[" + std::to_string(l + 1) + "][" + std::to_string(m) + "]", p.instance_heads[l][m]);
  for (int l = 0; l < kLevels; ++l)
    for (std::size_t m = 0; m < p.prototype_heads[l].size(); ++m)
      fn("proto_head[" + std::to_string(l + 1) + "][" + std::to_string(m) + "]", p.prototype_heads[l][m]);
}

/// A loose bag of named tensors, for generic gradient checks.
struct TensorList {
  std::vector<std::string> names;
  std::vector<Matrix> values;
};

template <class P, class Fn>
  requires std::same_as<std::remove_const_t<P>, TensorList>
void for_each_tensor(P& p, Fn&& fn) {
  for (std::size_t i = 0; i < p.values.size(); ++i) fn(p.names[i], p.values[i]);
}

template <class P>
P zeros_like(const P& p) {
  P z = p;
  for_each_tensor(z, [](const std::string&, Matrix& m) { m.setZero(); });
  return z;
}

namespace detail {
inline Matrix uniform_init(Eigen::Index rows, Eigen::Index cols, double fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(fan_in);
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}
}  // namespace detail

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias.
inline ModelParams init_params(const std::array<int, kLevels>& parts, int embed, int heads, bool heterogeneous,
                               std::mt19937_64& rng, Activation act = Activation::relu) {
  require(embed >= 1, "embedding size must be >= 1");
  require(heads >= 0, "head count must be >= 0");
  ModelParams p;
  p.embed = embed;
  p.heads = heads;
  p.heterogeneous = heterogeneous;
  p.activation = act;
  p.parts = parts;
  for (int l = 0; l < kLevels; ++l) {
    const int in = 3 * parts[l];
    require(parts[l] >= 1, "partition count must be >= 1");
    auto& e = p.encoders[l];
    e.w_in = detail::uniform_init(embed, in, in, rng);
    e.b_in = detail::uniform_init(1, embed, in, rng);
    e.w_out = detail::uniform_init(embed, embed, embed, rng);
    e.b_out = detail::uniform_init(1, embed, embed, rng);
  }
  for (int l = 0; l < kLevels; ++l)
    for (int m = 0; m < heads; ++m) p.instance_heads[l].push_back(detail::uniform_init(embed, embed, embed, rng));
  if (heterogeneous)
    for (int l = 0; l < kLevels; ++l)
      for (int m = 0; m < heads; ++m)
        p.prototype_heads[l].push_back(detail::uniform_init(embed, embed, embed, rng));
  return p;
}

inline std::array<int, kLevels> partition_sizes(const PartitionSet& tables) {
  return {tables[0].size(), tables[1].size(), tables[2].size()};
}

// ---------------------------------------------------------------------------
// Value path
// ---------------------------------------------------------------------------

inline Matrix apply_activation(const Matrix& x, Activation act) {
  if (act == Activation::relu) return x.cwiseMax(0.0);
  return x.array().tanh().matrix();
}

/// Encodes F frames (rows) of one level: F x 3n -> F x h.
inline Matrix encode_frames(const ModelParams& p, int level, const Matrix& frames) {
  require(level >= 0 && level < kLevels, "level index out of range");
  const auto& e = p.encoders[level];
  require(frames.cols() == e.w_in.cols(), "frame representation has length " + std::to_string(frames.cols()) +
                                              ", encoder expects " + std::to_string(e.w_in.cols()));
  Matrix hidden = (frames * e.w_in.transpose()).rowwise() + e.b_in.row(0);
  hidden = apply_activation(hidden, p.activation);
  Matrix out = (hidden * e.w_out.transpose()).rowwise() + e.b_out.row(0);
  return out;
}

inline Vector encode_frame(const ModelParams& p, int level, const Vector& frame_rep) {
  Matrix row = frame_rep.transpose();
  return encode_frames(p, level, row).row(0).transpose();
}

/// Temporal average pooling: column means of F x h frame features.
inline Vector tap(const Matrix& frame_features) {
  require(frame_features.rows() >= 1, "temporal pooling needs at least one frame");
  return frame_features.colwise().mean().transpose();
}

/// Applies a head to row vectors: rows * H^T.
inline Matrix meta_transform(const Matrix& head, const Matrix& rows) {
  require(head.cols() == rows.cols(), "meta_transform: head has " + std::to_string(head.cols()) +
                                          " columns, vectors have " + std::to_string(rows.cols()));
  return rows * head.transpose();
}

// ---------------------------------------------------------------------------
// Tape path
// ---------------------------------------------------------------------------

struct ParamVars {
  struct Enc {
    Var w_in, b_in, w_out, b_out;
  };
  std::array<Enc, kLevels> encoders;
  std::array<std::vector<Var>, kLevels> instance_heads;
  std::array<std::vector<Var>, kLevels> prototype_heads;

  Var prototype_head(int level, int m) const {
    return prototype_heads[level].empty() ? instance_heads[level][static_cast<std::size_t>(m)]
                                          : prototype_heads[level][static_cast<std::size_t>(m)];
  }
};

inline ParamVars bind_params(Tape& t, const ModelParams& p) {
  ParamVars v;
  for (int l = 0; l < kLevels; ++l) {
    const auto& e = p.encoders[l];
    v.encoders[l] = {t.variable(e.w_in), t.variable(e.b_in), t.variable(e.w_out), t.variable(e.b_out)};
    for (const auto& h : p.instance_heads[l]) v.instance_heads[l].push_back(t.variable(h));
    for (const auto& h : p.prototype_heads[l]) v.prototype_heads[l].push_back(t.variable(h));
  }
  return v;
}

/// Copies tape gradients into a ModelParams-shaped container.
inline ModelParams collect_grads(const Tape& t, const ParamVars& v, const ModelParams& like) {
  ModelParams g = like;
  for (int l = 0; l < kLevels; ++l) {
    auto& e = g.encoders[l];
    e.w_in = t.grad(v.encoders[l].w_in);
    e.b_in = t.grad(v.encoders[l].b_in);
    e.w_out = t.grad(v.encoders[l].w_out);
    e.b_out = t.grad(v.encoders[l].b_out);
    for (std::size_t m = 0; m < v.instance_heads[l].size(); ++m) g.instance_heads[l][m] = t.grad(v.instance_heads[l][m]);
    for (std::size_t m = 0; m < v.prototype_heads[l].size(); ++m)
      g.prototype_heads[l][m] = t.grad(v.prototype_heads[l][m]);
  }
  return g;
}

inline Var encode_on_tape(Tape& t, const ParamVars& v, int level, Var frames, Activation act) {
  const auto& e = v.encoders[level];
  Var hidden = ops::add_row(t, ops::matmul_nt(t, frames, e.w_in), e.b_in);
  if (act == Activation::relu) {
    hidden = ops::relu(t, hidden);
  } else {
    Matrix y = t.value(hidden).array().tanh().matrix();
    Var in = hidden;
    Matrix yy = y;
    hidden = t.record(std::move(y), {in}, [in, yy = std::move(yy)](Tape& t, const Matrix& g) {
      t.accumulate(in, g.cwiseProduct((1.0 - yy.array().square()).matrix()));
    });
  }
  return ops::add_row(t, ops::matmul_nt(t, hidden, e.w_out), e.b_out);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline nlohmann::json matrix_to_json(const Matrix& m) {
  std::vector<double> data(m.data(), m.data() + m.size());
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto& data = j.at("data");
  require(static_cast<Eigen::Index>(data.size()) == rows * cols, "matrix data length mismatch");
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = data[static_cast<std::size_t>(i)].get<double>();
    require(std::isfinite(m.data()[i]), "non-finite value in stored matrix");
  }
  return m;
}

inline nlohmann::json params_to_json(const ModelParams& p) {
  nlohmann::json tensors = nlohmann::json::object();
  for_each_tensor(p, [&](const std::string& name, const Matrix& m) { tensors[name] = matrix_to_json(m); });
  return {{"embed", p.embed},
          {"heads", p.heads},
          {"heterogeneous", p.heterogeneous},
          {"activation", to_string(p.activation)},
          {"parts", p.parts},
          {"tensors", tensors}};
}

inline ModelParams params_from_json(const nlohmann::json& j) {
  ModelParams p;
  try {
    p.embed = j.at("embed").get<int>();
    p.heads = j.at("heads").get<int>();
    p.heterogeneous = j.at("heterogeneous").get<bool>();
    p.activation = activation_from_string(j.at("activation").get<std::string>());
    p.parts = j.at("parts").get<std::array<int, kLevels>>();
    for (int l = 0; l < kLevels; ++l) {
      p.instance_heads[l].resize(static_cast<std::size_t>(p.heads));
      if (p.heterogeneous) p.prototype_heads[l].resize(static_cast<std::size_t>(p.heads));
    }
    const auto& tensors = j.at("tensors");
    for_each_tensor(p, [&](const std::string& name, Matrix& m) { m = matrix_from_json(tensors.at(name)); });
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed model parameters: ") + e.what());
  }
  for (int l = 0; l < kLevels; ++l) {
    const auto& e = p.encoders[l];
    require(e.w_in.rows() == p.embed && e.w_in.cols() == 3 * p.parts[l], "encoder input weight has wrong shape");
    require(e.b_in.rows() == 1 && e.b_in.cols() == p.embed, "encoder bias has wrong shape");
    require(e.w_out.rows() == p.embed && e.w_out.cols() == p.embed, "encoder output weight has wrong shape");
    require(e.b_out.rows() == 1 && e.b_out.cols() == p.embed, "encoder bias has wrong shape");
  }
  for_each_tensor(p, [&](const std::string& name, const Matrix& m) {
    if (name.find("head") != std::string::npos)
      require(m.rows() == p.embed && m.cols() == p.embed, name + " has wrong shape");
  });
  return p;
}

}  // namespace himpc
