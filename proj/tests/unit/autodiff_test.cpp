// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "bsr/autodiff.hpp"
#include "bsr/errors.hpp"
#include "test_support.hpp"

namespace bsr {
namespace {

using ad::BufferRole;
using testing::OpFn;
using testing::random_tensor;

constexpr double kOracleTolerance = 1e-6;

struct Fixture {
  ad::ParamStore params;
  ad::ParamId w, b, gamma, beta;

  explicit Fixture(std::size_t in = 6, std::size_t out = 6, bool trainable = true) {
    w = params.add("w", random_tensor({in, out}, 1, 0.5), trainable);
    b = params.add("b", random_tensor({out}, 2), trainable);
    gamma = params.add("gamma", random_tensor({in}, 3), trainable);
    beta = params.add("beta", random_tensor({in}, 4), trainable);
  }
};

void expect_input_grad(const ad::ParamStore& params, const OpFn& f, const Tensor& x, std::uint64_t seed) {
  const Tensor probe = random_tensor(testing::output_shape(params, f, x), seed);
  const Tensor analytic = testing::tape_input_grad(params, f, x, probe);
  const Tensor numeric = testing::numeric_input_grad(params, f, x, probe);
  EXPECT_LT(testing::relative_error(analytic, numeric), kOracleTolerance);
}

// Per-op input gradients against central differences -----------------------

TEST(AutodiffOracle, MatMulBiasAdd) {
  Fixture fx;
  expect_input_grad(fx.params, [&](ad::OpContext& c, const ad::Var& x) { return ad::matmul(c, x, fx.w); },
                    random_tensor({3, 6}, 10), 11);
  expect_input_grad(fx.params, [&](ad::OpContext& c, const ad::Var& x) { return ad::bias_add(c, x, fx.b); },
                    random_tensor({3, 6}, 12), 13);
}

TEST(AutodiffOracle, AddScaleAndResidual) {
  Fixture fx;
  expect_input_grad(
      fx.params,
      [&](ad::OpContext& c, const ad::Var& x) { return ad::add(c, x, ad::scale(c, ad::matmul(c, x, fx.w), -0.7)); },
      random_tensor({4, 6}, 14), 15);
}

TEST(AutodiffOracle, GeluMatchesErfDefinition) {
  Fixture fx;
  expect_input_grad(fx.params, [](ad::OpContext& c, const ad::Var& x) { return ad::gelu(c, x); },
                    random_tensor({3, 5}, 16, 2.0), 17);
  for (double x : {-3.0, -0.5, 0.0, 0.4, 2.5}) {
    EXPECT_NEAR(ad::gelu_value(x), 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))), 1e-15);
    const double h = 1e-6;
    EXPECT_NEAR(ad::gelu_derivative(x), (ad::gelu_value(x + h) - ad::gelu_value(x - h)) / (2 * h), 1e-8);
  }
}

TEST(AutodiffOracle, LayerNorm) {
  Fixture fx;
  expect_input_grad(fx.params,
                    [&](ad::OpContext& c, const ad::Var& x) { return ad::layernorm(c, x, fx.gamma, fx.beta); },
                    random_tensor({4, 6}, 18, 3.0), 19);
}

TEST(AutodiffOracle, SoftmaxRows) {
  Fixture fx;
  expect_input_grad(fx.params, [](ad::OpContext& c, const ad::Var& x) { return ad::softmax_rows(c, x); },
                    random_tensor({2, 3, 4}, 20), 21);
}

TEST(AutodiffOracle, AttentionChain) {
  Fixture fx;
  const OpFn attention = [](ad::OpContext& c, const ad::Var& x) {
    const ad::Var q = ad::slice_heads(c, x, 0, 2);
    const ad::Var k = ad::slice_heads(c, x, 1, 2);
    const ad::Var v = ad::slice_heads(c, x, 2, 2);
    const ad::Var p = ad::softmax_rows(c, ad::attention_scores(c, q, k, 0.5));
    return ad::merge_heads(c, ad::attention_apply(c, p, v));
  };
  expect_input_grad(fx.params, attention, random_tensor({5, 12}, 22), 23);
}

TEST(AutodiffOracle, SelectRows) {
  Fixture fx;
  expect_input_grad(fx.params,
                    [](ad::OpContext& c, const ad::Var& x) { return ad::select_rows(c, x, {0, 2, 2}); },
                    random_tensor({4, 3}, 24), 25);
}

TEST(AutodiffOracle, TokenImportanceAndFusion) {
  Fixture fx;
  const OpFn fused = [](ad::OpContext& c, const ad::Var& x) {
    const ad::Var q = ad::slice_heads(c, x, 0, 2);
    const ad::Var k = ad::slice_heads(c, x, 1, 2);
    const ad::Var s = ad::token_importance(c, q, k, 0.7);
    return ad::select_and_fuse(c, x, s, {2, 4}, {1, 3, 5});
  };
  expect_input_grad(fx.params, fused, random_tensor({6, 12}, 26), 27);
}

// Parameter gradients ------------------------------------------------------

TEST(AutodiffOracle, ParameterGradients) {
  Fixture fx;
  const Tensor x = random_tensor({3, 6}, 30);
  const Tensor probe = random_tensor({3, 6}, 31);
  const auto forward = [&](const ad::ParamStore& ps, ad::Tape* tape) {
    ad::OpContext c{ps, tape, 0};
    const ad::Var h = ad::layernorm(c, ad::Var{x}, fx.gamma, fx.beta);
    return ad::gelu(c, ad::bias_add(c, ad::matmul(c, h, fx.w), fx.b)).value;
  };
  ad::Tape tape(fx.params);
  forward(fx.params, &tape);
  const ad::GradTable g = ad::backward(tape, probe);
  for (ad::ParamId id : {fx.w, fx.b, fx.gamma, fx.beta}) {
    ASSERT_NE(g.param(id), nullptr);
    Tensor numeric(fx.params.at(id).value.shape());
    for (std::size_t i = 0; i < numeric.numel(); ++i) {
      ad::ParamStore ps = fx.params;
      const double h = 1e-6;
      ps.at(id).value[i] += h;
      const double lp = testing::dot(forward(ps, nullptr), probe);
      ps.at(id).value[i] -= 2 * h;
      const double lm = testing::dot(forward(ps, nullptr), probe);
      numeric[i] = (lp - lm) / (2 * h);
    }
    EXPECT_LT(testing::relative_error(*g.param(id), numeric), kOracleTolerance) << fx.params.at(id).name;
  }
}

TEST(Autodiff, FrozenParametersReceiveNoGradient) {
  Fixture fx(6, 6, false);
  fx.params.set_trainable(fx.b, true);
  ad::Tape tape(fx.params);
  ad::OpContext c{fx.params, &tape, 0};
  const ad::Var x = ad::input(c, random_tensor({2, 6}, 40), 0);
  const ad::Var y = ad::bias_add(c, ad::matmul(c, ad::layernorm(c, x, fx.gamma, fx.beta), fx.w), fx.b);
  const ad::GradTable g = ad::backward(tape, Tensor(y.value.shape(), 1.0));
  EXPECT_EQ(g.params.size(), 1u);
  EXPECT_NE(g.param(fx.b), nullptr);
  EXPECT_EQ(g.param(fx.w), nullptr);
}

// Retention policy ---------------------------------------------------------

std::set<BufferRole> roles(const ad::TapeNode& n) {
  std::set<BufferRole> r;
  for (const auto& b : n.retained) {
    r.insert(b.role);
  }
  return r;
}

TEST(AutodiffRetention, LinearOpsKeepNothingWhenFrozen) {
  Fixture fx(6, 6, false);
  ad::Tape tape(fx.params);
  ad::OpContext c{fx.params, &tape, 0};
  const ad::Var x = ad::input(c, random_tensor({2, 6}, 41), 0);
  ad::Var y = ad::matmul(c, x, fx.w);
  y = ad::bias_add(c, y, fx.b);
  y = ad::add(c, y, x);
  y = ad::scale(c, y, 2.0);
  y = ad::select_rows(c, y, {1});
  for (const auto& n : tape.nodes()) {
    EXPECT_TRUE(n.retained.empty()) << ad::op_name(n.op);
    EXPECT_EQ(n.linearity, ad::Linearity::LinearInInput);
  }
  EXPECT_EQ(tape.retained_bytes(), 0u);
}

TEST(AutodiffRetention, TrainableMatMulKeepsItsInput) {
  Fixture fx;
  ad::Tape tape(fx.params, 4);
  ad::OpContext c{fx.params, &tape, 0};
  const ad::Var x = ad::input(c, random_tensor({3, 6}, 42), 0);
  ad::matmul(c, x, fx.w);
  EXPECT_EQ(roles(tape.node(1)), std::set<BufferRole>{BufferRole::InputActivation});
  EXPECT_EQ(tape.retained_bytes(), 3u * 6u * 4u);
}

TEST(AutodiffRetention, NonLinearOpsKeepWhatBackwardReads) {
  Fixture fx(4, 4, false);
  ad::Tape tape(fx.params, 4);
  ad::OpContext c{fx.params, &tape, 0};
  const ad::Var x = ad::input(c, random_tensor({4, 12}, 43), 0);
  const ad::Var q = ad::slice_heads(c, x, 0, 2);
  const ad::Var k = ad::slice_heads(c, x, 1, 2);
  const ad::Var v = ad::slice_heads(c, x, 2, 2);
  const ad::Var s = ad::attention_scores(c, q, k, 0.5);
  const ad::Var p = ad::softmax_rows(c, s);
  const ad::Var o = ad::attention_apply(c, p, v);
  const ad::Var g = ad::gelu(c, ad::merge_heads(c, o));
  EXPECT_EQ(roles(tape.node(s.node)), (std::set<BufferRole>{BufferRole::Query, BufferRole::Key}));
  EXPECT_EQ(roles(tape.node(p.node)), std::set<BufferRole>{BufferRole::Probabilities});
  EXPECT_EQ(roles(tape.node(o.node)), (std::set<BufferRole>{BufferRole::Probabilities, BufferRole::Value}));
  EXPECT_EQ(roles(tape.node(g.node)), std::set<BufferRole>{BufferRole::GeluInput});
  // Softmax output and the apply operand are one buffer.
  EXPECT_EQ(tape.node(p.node).find(BufferRole::Probabilities)->tensor.get(),
            tape.node(o.node).find(BufferRole::Probabilities)->tensor.get());
  // q, k, v: 3 x [2x4x2]; probs [2x4x4]; gelu input [4x4].
  EXPECT_EQ(tape.retained_bytes(), (3 * 16 + 32 + 16) * 4u);

  const ad::Var ln = ad::layernorm(c, g, fx.gamma, fx.beta);
  EXPECT_EQ(roles(tape.node(ln.node)), (std::set<BufferRole>{BufferRole::LayerNormXhat, BufferRole::LayerNormStats}));
}

TEST(AutodiffRetention, UntrackedInputWithFrozenWeightsRecordsNothing) {
  Fixture fx(6, 6, false);
  ad::Tape tape(fx.params);
  ad::OpContext c{fx.params, &tape, 0};
  const ad::Var y = ad::gelu(c, ad::matmul(c, ad::Var{random_tensor({2, 6}, 44)}, fx.w));
  EXPECT_FALSE(y.tracked());
  EXPECT_EQ(tape.size(), 0u);
}

TEST(AutodiffRetention, MissingBufferRaisesRetentionViolation) {
  Fixture fx(6, 6, false);
  ad::Tape tape(fx.params);
  ad::OpContext c{fx.params, &tape, 0};
  const ad::Var x = ad::input(c, random_tensor({2, 3, 3}, 45), 0);
  const ad::Var p = ad::softmax_rows(c, x);
  ASSERT_TRUE(tape.drop_retained(p.node, BufferRole::Probabilities));
  EXPECT_FALSE(tape.drop_retained(p.node, BufferRole::Probabilities));
  EXPECT_THROW(ad::backward(tape, Tensor(p.value.shape(), 1.0)), RetentionViolation);
}

TEST(AutodiffRetention, InferenceRecordsNothing) {
  Fixture fx;
  ad::OpContext c{fx.params, nullptr, 0};
  const ad::Var y = ad::layernorm(c, ad::matmul(c, ad::Var{random_tensor({2, 6}, 46)}, fx.w), fx.gamma, fx.beta);
  EXPECT_FALSE(y.tracked());
}

// Tape structure -----------------------------------------------------------

TEST(AutodiffTape, HorizonSkipsEarlierBlocks) {
  Fixture fx;
  ad::Tape tape(fx.params);
  ad::OpContext c0{fx.params, &tape, 0};
  const ad::Var x = ad::input(c0, random_tensor({2, 6}, 47), 0);
  const ad::Var h = ad::matmul(c0, x, fx.w);
  ad::OpContext c1{fx.params, &tape, 1};
  const ad::Var y = ad::bias_add(c1, h, fx.b);
  tape.set_horizon(1);
  const ad::GradTable g = ad::backward(tape, Tensor(y.value.shape(), 1.0));
  EXPECT_NE(g.param(fx.b), nullptr);
  EXPECT_EQ(g.param(fx.w), nullptr);
  EXPECT_EQ(g.block_input(0), nullptr);
}

TEST(AutodiffTape, SeedShapeAndEmptyTape) {
  Fixture fx;
  ad::Tape tape(fx.params);
  EXPECT_THROW(ad::backward(tape, Tensor({1})), ContractError);
  ad::OpContext c{fx.params, &tape, 0};
  ad::gelu(c, ad::input(c, random_tensor({2, 2}, 48), 0));
  EXPECT_THROW(ad::backward(tape, Tensor({3})), DimensionError);
}

TEST(AutodiffTape, FanOutAccumulates) {
  Fixture fx;
  ad::Tape tape(fx.params);
  ad::OpContext c{fx.params, &tape, 0};
  const ad::Var x = ad::input(c, Tensor::matrix({{1.0, 2.0}}), 0);
  const ad::Var y = ad::add(c, x, ad::add(c, x, x));
  const ad::GradTable g = ad::backward(tape, Tensor::matrix({{1.0, -1.0}}));
  EXPECT_EQ(*g.block_input(0), Tensor::matrix({{3.0, -3.0}}));
  EXPECT_EQ(y.value, Tensor::matrix({{3.0, 6.0}}));
}

TEST(AutodiffParams, StoreLookup) {
  ad::ParamStore ps;
  const ad::ParamId a = ps.add("a", Tensor({2, 2}), true);
  EXPECT_EQ(ps.id("a"), a);
  EXPECT_FALSE(ps.find("missing").has_value());
  EXPECT_THROW(ps.id("missing"), ContractError);
  EXPECT_THROW(ps.add("a", Tensor({1})), ContractError);
  EXPECT_EQ(ps.trainable_scalars(), 4u);
  ps.freeze_all();
  EXPECT_EQ(ps.trainable_scalars(), 0u);
}

}  // namespace
}  // namespace bsr
