#include "himpc/himpc.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace himpc;

namespace {

ModelParams small_params(std::uint64_t seed, int embed = 8, int heads = 2, bool hetero = false,
                         Activation act = Activation::relu) {
  std::mt19937_64 rng(seed);
  return init_params(partition_sizes(builtin_partitions(20)), embed, heads, hetero, rng, act);
}

}  // namespace

TEST(Encoder, ZeroWeightsGiveZero) {
  auto p = zeros_like(small_params(1));
  Vector x = Vector::Random(60);
  EXPECT_EQ(encode_frame(p, 0, x), Vector::Zero(8));
}

TEST(Encoder, ReluKillsNegativeInputs) {
  auto p = zeros_like(small_params(1, 8));
  auto& e = p.encoders[2];  // 15 inputs
  e.w_in.setZero();
  for (int i = 0; i < 8; ++i) e.w_in(i, i) = 1.0;
  e.w_out.setIdentity();
  const Vector x = -Vector::Ones(15) - Vector::LinSpaced(15, 0.0, 3.0);
  EXPECT_EQ(encode_frame(p, 2, x), Vector::Zero(8));
}

TEST(Encoder, MatchesHandRolledOracle) {
  for (auto act : {Activation::relu, Activation::tanh}) {
    const auto p = small_params(7, 12, 0, false, act);
    std::mt19937_64 rng(3);
    for (int l = 0; l < kLevels; ++l) {
      const Matrix frames = oracle::random_matrix(5, 3 * p.parts[l], rng);
      const Matrix z = encode_frames(p, l, frames);
      for (int f = 0; f < 5; ++f) {
        std::vector<double> x(frames.row(f).data(), frames.row(f).data() + frames.cols());
        const auto ref = oracle::encode(p.encoders[l], act, x);
        for (int k = 0; k < 12; ++k) EXPECT_NEAR(z(f, k), ref[static_cast<std::size_t>(k)], 1e-12);
        EXPECT_LT((encode_frame(p, l, frames.row(f).transpose()) - z.row(f).transpose()).norm(), 1e-12);
      }
    }
  }
}

TEST(Encoder, LipschitzBound) {
  const auto p = small_params(11, 16);
  std::mt19937_64 rng(4);
  for (int l = 0; l < kLevels; ++l) {
    const auto& e = p.encoders[l];
    const double win = Eigen::JacobiSVD<Matrix>(e.w_in).singularValues()(0);
    const double wout = Eigen::JacobiSVD<Matrix>(e.w_out).singularValues()(0);
    for (int trial = 0; trial < 20; ++trial) {
      const Vector x = oracle::random_matrix(3 * p.parts[l], 1, rng, 3.0);
      const double bound = wout * (win * x.norm() + e.b_in.norm()) + e.b_out.norm();
      EXPECT_LE(encode_frame(p, l, x).norm(), bound + 1e-12);
    }
  }
}

TEST(Encoder, ShapeMismatchRejected) {
  const auto p = small_params(1);
  EXPECT_THROW(encode_frame(p, 1, Vector::Zero(31)), ValidationError);
}

TEST(Tap, Examples) {
  Matrix one(1, 3);
  one << 1, -2, 5;
  EXPECT_EQ(tap(one), one.row(0).transpose());
  Matrix sym(2, 3);
  sym << 1, -2, 5, -1, 2, -5;
  EXPECT_EQ(tap(sym), Vector::Zero(3));
  Matrix two(2, 2);
  two << 1, 3, 3, 5;
  EXPECT_EQ(tap(two), Eigen::Vector2d(2, 4));
  EXPECT_THROW(tap(Matrix(0, 3)), ValidationError);
}

TEST(Init, UniformBoundsAndDeterminism) {
  const auto a = small_params(9, 32, 3, true);
  const auto b = small_params(9, 32, 3, true);
  EXPECT_EQ(params_to_json(a), params_to_json(b));
  EXPECT_EQ(a.prototype_heads[1].size(), 3u);
  for (int l = 0; l < kLevels; ++l) {
    const double bound_in = 1.0 / std::sqrt(3.0 * a.parts[l]);
    EXPECT_LE(a.encoders[l].w_in.cwiseAbs().maxCoeff(), bound_in);
    EXPECT_LE(a.instance_heads[l][0].cwiseAbs().maxCoeff(), 1.0 / std::sqrt(32.0));
  }
}

TEST(Params, JsonRoundTripExact) {
  const auto p = small_params(13, 8, 2, true, Activation::tanh);
  const auto back = params_from_json(nlohmann::json::parse(params_to_json(p).dump()));
  EXPECT_EQ(params_to_json(back), params_to_json(p));
  EXPECT_EQ(back.activation, Activation::tanh);
  auto broken = params_to_json(p);
  broken["tensors"]["encoder[1].w_in"]["rows"] = 7;
  broken["tensors"]["encoder[1].w_in"]["data"].push_back(0.0);
  EXPECT_THROW(params_from_json(broken), ValidationError);
}

TEST(Adam, ZeroGradientLeavesParams) {
  auto p = small_params(2);
  const auto before = params_to_json(p);
  AdamState<ModelParams> s(p, {});
  adam_step(s, p, zeros_like(p));
  EXPECT_EQ(params_to_json(p), before);
  EXPECT_EQ(s.step, 1);
}

TEST(Adam, HandComputedFirstStep) {
  // m = 0.1, v = 0.001; bias-corrected m/(sqrt(v)+eps) = 1/(1+1e-8)
  TensorList p{{"x"}, {Matrix::Constant(1, 1, 1.0)}};
  AdamState<TensorList> s(p, AdamOptions{0.1});
  adam_step(s, p, TensorList{{"x"}, {Matrix::Constant(1, 1, 1.0)}});
  EXPECT_NEAR(p.values[0](0, 0), 0.9, 1e-8);
  EXPECT_NEAR(p.values[0](0, 0), 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, DuplicatedParamsStayIdentical) {
  TensorList p{{"a", "b"}, {Matrix::Constant(2, 2, 0.5), Matrix::Constant(2, 2, 0.5)}};
  AdamState<TensorList> s(p, {});
  const TensorList g{{"a", "b"}, {Matrix::Constant(2, 2, -0.3), Matrix::Constant(2, 2, -0.3)}};
  adam_step(s, p, g);
  adam_step(s, p, g);
  EXPECT_EQ(p.values[0], p.values[1]);
  EXPECT_EQ(s.step, 2);
}

TEST(Adam, NonFiniteGradientAbortsBeforeUpdate) {
  auto p = small_params(2);
  const auto before = params_to_json(p);
  AdamState<ModelParams> s(p, {});
  auto g = zeros_like(p);
  g.instance_heads[1][1](0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    adam_step(s, p, g);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("head[2][1]"), std::string::npos) << e.what();
  }
  EXPECT_EQ(params_to_json(p), before);
  EXPECT_EQ(s.step, 0);
}

TEST(Adam, JsonRoundTrip) {
  auto p = small_params(2);
  AdamState<ModelParams> s(p, {});
  auto g = p;  // any finite gradient
  adam_step(s, p, g);
  const auto back = adam_from_json(nlohmann::json::parse(adam_to_json(s).dump()));
  EXPECT_EQ(adam_to_json(back), adam_to_json(s));
}

TEST(GradCheck, Quadratic) {
  TensorList p{{"t"}, {Matrix::Constant(1, 1, 3.0)}};
  auto loss = [](const TensorList& q, TensorList* g) {
    const double t = q.values[0](0, 0);
    if (g) g->values[0](0, 0) = t;
    return 0.5 * t * t;
  };
  EXPECT_LT(grad_check(loss, p, 5, 1e-5).max_rel_error, 1e-8);
}

TEST(GradCheck, Linear) {
  std::mt19937_64 rng(1);
  const Matrix a = oracle::random_matrix(4, 3, rng);
  TensorList p{{"t"}, {oracle::random_matrix(4, 3, rng)}};
  auto loss = [&](const TensorList& q, TensorList* g) {
    if (g) g->values[0] = a;
    return a.cwiseProduct(q.values[0]).sum();
  };
  EXPECT_LT(grad_check(loss, p, 12, 1e-5).max_rel_error, 1e-8);
}

TEST(GradCheck, DetectsWrongGradient) {
  TensorList p{{"t"}, {Matrix::Constant(1, 1, 2.0)}};
  auto loss = [](const TensorList& q, TensorList* g) {
    if (g) g->values[0](0, 0) = 1.0;  // true derivative is 4
    return q.values[0](0, 0) * q.values[0](0, 0);
  };
  const auto r = grad_check(loss, p, 3, 1e-5);
  EXPECT_GT(r.max_rel_error, 0.5);
  EXPECT_EQ(r.worst, "t[0]");
}

TEST(GradCheck, NonFiniteLossRaises) {
  TensorList p{{"t"}, {Matrix::Constant(1, 1, -1.0)}};
  auto loss = [](const TensorList& q, TensorList*) { return std::log(q.values[0](0, 0)); };
  EXPECT_THROW(grad_check(loss, p, 1, 1e-5), NumericalError);
}

namespace {

// Checks d(sum(out .* weights))/d(inputs) of a single tape op against
// central differences.
template <class Build>
double op_gradient_error(std::vector<Matrix> inputs, Build build, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Matrix weights;
  auto eval = [&](const std::vector<Matrix>& in, std::vector<Matrix>* grads) {
    Tape t;
    std::vector<Var> vars;
    for (const auto& m : in) vars.push_back(t.variable(m));
    const Var out = build(t, vars);
    if (weights.size() == 0) weights = oracle::random_matrix(t.value(out).rows(), t.value(out).cols(), rng);
    const Var loss = ops::sum(t, ops::hadamard(t, out, t.constant(weights)));
    if (grads) {
      t.backward(loss);
      grads->clear();
      for (const auto& v : vars) grads->push_back(t.grad(v));
    }
    return t.value(loss)(0, 0);
  };
  std::vector<Matrix> analytic;
  eval(inputs, &analytic);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      auto up = inputs, down = inputs;
      up[k].data()[i] += 1e-6;
      down[k].data()[i] -= 1e-6;
      const double fd = (eval(up, nullptr) - eval(down, nullptr)) / 2e-6;
      worst = std::max(worst, relative_error(analytic[k].data()[i], fd));
    }
  return worst;
}

}  // namespace

TEST(Tape, EveryOpMatchesFiniteDifferences) {
  std::mt19937_64 rng(21);
  auto R = [&](int r, int c) { return oracle::random_matrix(r, c, rng); };
  constexpr double tol = 1e-6;
  EXPECT_LT(op_gradient_error({R(3, 4), R(5, 4)}, [](Tape& t, auto& v) { return ops::matmul_nt(t, v[0], v[1]); }, 1), tol);
  EXPECT_LT(op_gradient_error({R(3, 4), R(3, 4)}, [](Tape& t, auto& v) { return ops::add(t, v[0], v[1]); }, 2), tol);
  EXPECT_LT(op_gradient_error({R(3, 4), R(1, 4)}, [](Tape& t, auto& v) { return ops::add_row(t, v[0], v[1]); }, 3), tol);
  EXPECT_LT(op_gradient_error({R(3, 4)}, [](Tape& t, auto& v) { return ops::relu(t, v[0]); }, 4), tol);
  EXPECT_LT(op_gradient_error({R(3, 4)}, [](Tape& t, auto& v) { return ops::scale(t, v[0], -0.7); }, 5), tol);
  EXPECT_LT(op_gradient_error({R(3, 4), R(3, 4)}, [](Tape& t, auto& v) { return ops::hadamard(t, v[0], v[1]); }, 6), tol);
  EXPECT_LT(op_gradient_error({R(6, 4)}, [](Tape& t, auto& v) { return ops::mean_groups(t, v[0], 3); }, 7), tol);
  EXPECT_LT(op_gradient_error({R(3, 4)}, [](Tape& t, auto& v) { return ops::gather_rows(t, v[0], {2, 0, 2, 1}); }, 8), tol);
  EXPECT_LT(op_gradient_error({R(5, 4), R(5, 4)}, [](Tape& t, auto& v) { return ops::rowwise_dot(t, v[0], v[1]); }, 9), tol);
  EXPECT_LT(op_gradient_error({R(6, 1)}, [](Tape& t, auto& v) { return ops::softmax_groups(t, v[0], 3); }, 10), tol);
  EXPECT_LT(op_gradient_error({R(4, 3)}, [](Tape& t, auto& v) { return ops::cross_entropy_rows(t, v[0], {0, 2, 1, 2}); }, 11), tol);
}

TEST(Tape, GradientsHaveParameterShapes) {
  const auto toy = make_toy_problem(3, 8, 2);
  ModelParams g;
  batch_loss_and_grad(toy.params, toy.batch, {LossVariant::himpc_h, toy.tau, true}, &g);
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes_p, shapes_g;
  for_each_tensor(toy.params, [&](const std::string&, const Matrix& m) { shapes_p.emplace_back(m.rows(), m.cols()); });
  for_each_tensor(g, [&](const std::string&, const Matrix& m) { shapes_g.emplace_back(m.rows(), m.cols()); });
  EXPECT_EQ(shapes_p, shapes_g);
}

TEST(Tape, TanhEncoderGradient) {
  auto toy = make_toy_problem(5, 8, 2);
  std::mt19937_64 rng(5);
  toy.params = init_params(toy.params.parts, 8, 2, false, rng, Activation::tanh);
  const auto r = check_loss(toy.batch, {LossVariant::himpc, toy.tau, true}, toy.params, 100, 1e-5, 1);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Tape, HeterogeneousHeadsGradient) {
  const auto r = check_loss_gradients(17, 150, 1e-5, 8, 2);
  EXPECT_LT(r.worst(), 1e-4);
  const auto toy = make_toy_problem(17, 8, 2, 20, 6, true);
  TrainBatch frozen = toy.batch;
  freeze_importance(toy.params, frozen);
  const auto h = check_loss(frozen, {LossVariant::himpc_h, toy.tau, true}, toy.params, 150, 1e-5, 3);
  EXPECT_LT(h.max_rel_error, 1e-4) << h.worst;
}
