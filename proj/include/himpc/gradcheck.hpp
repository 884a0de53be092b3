#pragma once

// Central finite-difference verification of backward gradients.

#include "himpc/core.hpp"
#include "himpc/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace himpc {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "name[index]" of the worst probe
  int probes = 0;
};

/// Denominator floor for the relative error; below it the comparison is
/// effectively absolute.
inline constexpr double kGradCheckFloor = 1e-6;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
}

/// loss(params, grads_out) returns the loss and, when grads_out is not
/// null, writes the backward gradient into it. probe_count scalar
/// parameters are drawn uniformly from all tensors.
template <class P, class LossFn>
GradCheckResult grad_check(LossFn&& loss, const P& params, int probe_count, double fd_eps, std::uint64_t seed = 0) {
  require(probe_count >= 1, "probe_count must be >= 1");
  require(fd_eps > 0.0, "fd_eps must be positive");

  P grads = zeros_like(params);
  const double base = loss(params, &grads);
  if (!std::isfinite(base)) throw NumericalError("loss is non-finite at the check point");

  struct Slot {
    std::string name;
    std::size_t tensor;
    Eigen::Index size;
  };
  std::vector<Slot> slots;
  Eigen::Index total = 0;
  {
    std::size_t k = 0;
    for_each_tensor(params, [&](const std::string& name, const Matrix& m) {
      slots.push_back({name, k++, m.size()});
      total += m.size();
    });
  }
  require(total > 0, "no parameters to check");

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Eigen::Index> pick(0, total - 1);
  GradCheckResult res;
  P probe = params;
  for (int n = 0; n < probe_count; ++n) {
    Eigen::Index flat = pick(rng);
    std::size_t which = 0;
    while (flat >= slots[which].size) flat -= slots[which++].size;

    auto scalar = [&](P& p) -> double& {
      double* out = nullptr;
      std::size_t k = 0;
      for_each_tensor(p, [&](const std::string&, Matrix& m) {
        if (k++ == which) out = m.data() + flat;
      });
      return *out;
    };
    const double analytic = scalar(grads);
    double& x = scalar(probe);
    const double orig = x;
    x = orig + fd_eps;
    const double up = loss(std::as_const(probe), nullptr);
    x = orig - fd_eps;
    const double down = loss(std::as_const(probe), nullptr);
    x = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) throw NumericalError("loss is non-finite at a probe point");
    const double numeric = (up - down) / (2.0 * fd_eps);
    const double err = relative_error(analytic, numeric);
    ++res.probes;
    if (err >= res.max_rel_error) {
      res.max_rel_error = err;
      res.worst = slots[which].name + "[" + std::to_string(flat) + "]";
    }
  }
  return res;
}

}  // namespace himpc
