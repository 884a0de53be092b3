#pragma once

#include "himpc/core.hpp"
#include "himpc/model.hpp"

#include <json.hpp>

#include <cmath>
#include <string>
#include <vector>

namespace himpc {

struct AdamOptions {
  double lr = 0.00035;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment buffers mirror the parameter container they update.
template <class P>
struct AdamState {
  AdamOptions options;
  P first;
  P second;
  long long step = 0;

  AdamState() = default;
  AdamState(const P& like, AdamOptions opt) : options(opt), first(zeros_like(like)), second(zeros_like(like)) {}
};

/// One bias-corrected Adam update. The step is rejected before any
/// parameter changes if a gradient is non-finite.
template <class P>
void adam_step(AdamState<P>& state, P& params, const P& grads) {
  std::vector<const Matrix*> g;
  for_each_tensor(grads, [&](const std::string& name, const Matrix& m) {
    if (!m.allFinite()) throw NumericalError("non-finite gradient in " + name);
    g.push_back(&m);
  });
  std::vector<Matrix*> m1, m2;
  for_each_tensor(state.first, [&](const std::string&, Matrix& m) { m1.push_back(&m); });
  for_each_tensor(state.second, [&](const std::string&, Matrix& m) { m2.push_back(&m); });

  ++state.step;
  const auto& o = state.options;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  std::size_t i = 0;
  for_each_tensor(params, [&](const std::string& name, Matrix& p) {
    const Matrix& gi = *g[i];
    require(gi.rows() == p.rows() && gi.cols() == p.cols(), "gradient shape mismatch for " + name);
    Matrix& m = *m1[i];
    Matrix& v = *m2[i];
    m = o.beta1 * m + (1.0 - o.beta1) * gi;
    v = o.beta2 * v + (1.0 - o.beta2) * gi.cwiseProduct(gi);
    p.array() -= o.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + o.epsilon);
    ++i;
  });
}

inline nlohmann::json adam_to_json(const AdamState<ModelParams>& s) {
  return {{"lr", s.options.lr},
          {"beta1", s.options.beta1},
          {"beta2", s.options.beta2},
          {"epsilon", s.options.epsilon},
          {"step", s.step},
          {"first", params_to_json(s.first)},
          {"second", params_to_json(s.second)}};
}

inline AdamState<ModelParams> adam_from_json(const nlohmann::json& j) {
  AdamState<ModelParams> s;
  try {
    s.options = {j.at("lr").get<double>(), j.at("beta1").get<double>(), j.at("beta2").get<double>(),
                 j.at("epsilon").get<double>()};
    s.step = j.at("step").get<long long>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed optimizer state: ") + e.what());
  }
  s.first = params_from_json(j.at("first"));
  s.second = params_from_json(j.at("second"));
  return s;
}

}  // namespace himpc
