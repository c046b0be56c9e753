#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "grad_cases.hpp"
#include "grad_check.hpp"
#include "rl4rec/nn/checkpoint.hpp"
#include "rl4rec/nn/layers.hpp"
#include "rl4rec/nn/optim.hpp"
#include "rl4rec/nn/tape.hpp"

namespace nn = rl4rec::nn;
using rl4rec::Rng;
using namespace rl4rec::testing;

TEST(Forward, MatmulByIdentityReturnsInput) {
  Rng rng(1);
  nn::Tape t;
  nn::Tensor a = random_tensor(3, 3, rng);
  auto out = nn::matmul(t.constant(nn::Tensor::identity(3)), t.constant(a));
  EXPECT_EQ(out.value(), a);
}

TEST(Forward, SoftmaxOfZerosIsUniform) {
  nn::Tape t;
  auto p = nn::softmax(t.constant(nn::Tensor::row({0, 0, 0})));
  for (double v : p.value().values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Forward, SigmoidOfZeroIsHalf) {
  nn::Tape t;
  EXPECT_DOUBLE_EQ(nn::sigmoid(t.constant(nn::Tensor::scalar(0))).item(), 0.5);
}

TEST(Forward, SoftmaxRowsArePositiveAndSumToOne) {
  Rng rng(7);
  for (int seed = 0; seed < 50; ++seed) {
    nn::Tape t;
    auto p = nn::softmax(t.constant(random_tensor(4, 9, rng, -20, 20)));
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (double v : p.value().row_span(r)) {
        EXPECT_GT(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Forward, MaskedSoftmaxGivesZeroToMaskedEntries) {
  nn::Tape t;
  nn::Mask m = {1, 0, 1};
  auto p = nn::softmax(t.constant(nn::Tensor::row({1, 100, 1})), m);
  EXPECT_DOUBLE_EQ(p.value()[1], 0.0);
  EXPECT_DOUBLE_EQ(p.value()[0], 0.5);
  EXPECT_THROW(nn::softmax(t.constant(nn::Tensor::row({1, 2})), nn::Mask{0, 0}),
               rl4rec::ContractViolation);
}

TEST(Forward, ShapeMismatchIsContractViolation) {
  nn::Tape t;
  EXPECT_THROW(nn::matmul(t.constant(nn::Tensor(2, 3)), t.constant(nn::Tensor(2, 3))),
               rl4rec::ContractViolation);
  EXPECT_THROW(nn::add(t.constant(nn::Tensor(2, 3)), t.constant(nn::Tensor(3, 3))),
               rl4rec::ContractViolation);
}

TEST(Forward, NonFiniteOutputIsNumericError) {
  nn::Tape t;
  EXPECT_THROW(nn::log(t.constant(nn::Tensor::scalar(0.0))), rl4rec::NumericError);
  EXPECT_THROW(nn::exp(t.constant(nn::Tensor::scalar(1e4))), rl4rec::NumericError);
}

TEST(Backward, SquareHasDerivativeSix) {
  nn::Tape t;
  auto x = t.leaf(nn::Tensor::scalar(3.0), true);
  t.backward(x * x);
  EXPECT_DOUBLE_EQ(t.grad(x).item(), 6.0);
}

TEST(Backward, SumOfSoftmaxHasZeroGradient) {
  Rng rng(3);
  nn::Tape t;
  auto z = t.leaf(random_tensor(1, 5, rng), true);
  t.backward(nn::sum(nn::softmax(z)));
  for (double g : t.grad(z).values()) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Backward, UnusedLeafGetsZeroGradient) {
  nn::Tape t;
  auto x = t.leaf(nn::Tensor::scalar(2.0), true);
  auto unused = t.leaf(nn::Tensor(2, 2, 1.0), true);
  t.backward(x * x);
  EXPECT_EQ(t.grad(unused), nn::Tensor(2, 2, 0.0));
}

TEST(Backward, NonScalarLossIsRejected) {
  nn::Tape t;
  auto x = t.leaf(nn::Tensor(1, 2, 1.0), true);
  EXPECT_THROW(t.backward(x), rl4rec::ContractViolation);
}

TEST(Backward, IsBitwiseDeterministic) {
  auto run = [] {
    Rng rng(99);
    nn::Mlp mlp("m", {5, 7, 3}, rng);
    nn::Tensor x = random_tensor(4, 5, rng);
    std::vector<nn::Parameter*> ps;
    mlp.collect(ps);
    for (auto* p : ps) p->zero_grad();
    nn::Tape t;
    t.backward(nn::mean(nn::square(mlp(t, t.constant(x)))));
    std::vector<double> out;
    for (auto* p : ps) out.insert(out.end(), p->grad.values().begin(), p->grad.values().end());
    return out;
  };
  auto a = run();
  auto b = run();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_EQ(std::bit_cast<std::uint64_t>(a[i]), std::bit_cast<std::uint64_t>(b[i]));
}

TEST(Backward, EveryPrimitiveMatchesFiniteDifferences) {
  for (const auto& c : primitive_cases())
    for (int seed = 0; seed < 20; ++seed) EXPECT_LT(primitive_grad_error(c, seed), 1e-4) << c.name << " seed " << seed;
}

TEST(Backward, TwoLayerMlpMatchesFiniteDifferences) {
  for (int seed = 0; seed < 20; ++seed) EXPECT_LT(mlp_grad_error(seed), 1e-4) << "seed " << seed;
}

TEST(Gru, ZeroParametersAndZeroStateGiveZero) {
  Rng rng(0);
  nn::GruCell cell("g", 3, 4, rng);
  std::vector<nn::Parameter*> ps;
  cell.collect(ps);
  for (auto* p : ps) p->value.fill(0.0);
  nn::Tape t;
  auto h = cell(t, t.constant(random_tensor(1, 3, rng)), t.constant(nn::Tensor(1, 4)));
  EXPECT_EQ(h.value(), nn::Tensor(1, 4));
}

TEST(Gru, ThreeChainedCellsMatchFiniteDifferences) {
  for (int seed = 0; seed < 20; ++seed) EXPECT_LT(gru_grad_error(seed), 1e-4) << "seed " << seed;
}

TEST(Gru, OutputStaysInsideOpenUnitInterval) {
  Rng rng(11);
  nn::GruCell cell("g", 3, 5, rng);
  nn::Tape t;
  nn::Var h = t.constant(nn::Tensor(1, 5));
  for (int step = 0; step < 50; ++step) {
    h = cell(t, t.constant(random_tensor(1, 3, rng, -10, 10)), h);
    for (double v : h.value().values()) {
      EXPECT_GT(v, -1.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(Gru, DimensionMismatchIsContractViolation) {
  Rng rng(0);
  nn::GruCell cell("g", 3, 4, rng);
  nn::Tape t;
  EXPECT_THROW(cell(t, t.constant(nn::Tensor(1, 2)), t.constant(nn::Tensor(1, 4))),
               rl4rec::ContractViolation);
}

TEST(Optimizer, SgdStep) {
  nn::Parameter p("p", nn::Tensor::scalar(1.0));
  nn::Optimizer opt({nn::OptimizerKind::SGD, 0.1}, {&p});
  p.grad = nn::Tensor::scalar(2.0);
  opt.step();
  EXPECT_DOUBLE_EQ(p.value.item(), 0.8);
  EXPECT_EQ(opt.step_count(), 1u);
}

TEST(Optimizer, AdamFirstStepIsLearningRateRegardlessOfScale) {
  for (double g : {1e-4, 1.0, 1e4}) {
    nn::Parameter p("p", nn::Tensor(2, 2, 0.0));
    nn::Optimizer opt({nn::OptimizerKind::Adam, 1e-3}, {&p});
    p.grad = nn::Tensor(2, 2, g);
    opt.step();
    for (double v : p.value.values()) EXPECT_NEAR(v, -1e-3, 1e-6) << "g=" << g;
  }
}

TEST(Optimizer, SgdOnQuadraticFollowsGeometricDecay) {
  // f(p) = (p-4)^2, gradient 2(p-4): p_k - 4 = (1 - 2 lr)^k (p_0 - 4).
  nn::Parameter p("p", nn::Tensor::scalar(0.0));
  nn::Optimizer opt({nn::OptimizerKind::SGD, 0.1}, {&p});
  for (int k = 0; k < 100; ++k) {
    opt.zero_grad();
    nn::Tape t;
    auto x = t.param(p);
    t.backward(nn::square(nn::affine(x, 1.0, -4.0)));
    opt.step();
  }
  const double closed_form = 4.0 + std::pow(0.8, 100) * (0.0 - 4.0);
  EXPECT_NEAR(p.value.item(), closed_form, 1e-12);
  EXPECT_LT(std::abs(p.value.item() - 4.0), 1e-3);
}

TEST(Optimizer, MissingGradientIsContractViolation) {
  nn::Parameter p;
  p.name = "p";
  p.value = nn::Tensor(2, 2);
  nn::Optimizer opt({nn::OptimizerKind::SGD, 0.1}, {&p});
  EXPECT_THROW(opt.step(), rl4rec::ContractViolation);
}

TEST(Optimizer, RejectsNonPositiveLearningRate) {
  nn::Parameter p("p", nn::Tensor::scalar(0));
  EXPECT_THROW(nn::Optimizer({nn::OptimizerKind::SGD, 0.0}, {&p}), rl4rec::ConfigError);
}

TEST(Optimizer, FiniteGradientsKeepParametersFinite) {
  Rng rng(5);
  for (auto kind : {nn::OptimizerKind::SGD, nn::OptimizerKind::Adam}) {
    nn::Parameter p("p", random_tensor(3, 3, rng));
    nn::Optimizer opt({kind, 1e-2}, {&p});
    for (int i = 0; i < 200; ++i) {
      p.grad = random_tensor(3, 3, rng, -1e6, 1e6);
      opt.step();
      ASSERT_TRUE(p.value.all_finite());
    }
  }
}

TEST(Checkpoint, RoundTripPreservesNamesShapesAndBits) {
  Rng rng(8);
  nn::Mlp mlp("net", {3, 4, 2}, rng);
  std::vector<nn::Parameter*> ps;
  mlp.collect(ps);
  nn::Checkpoint ck;
  ck.meta["kind"] = "test";
  nn::add_parameters(ck, ps);
  std::stringstream ss;
  nn::write_checkpoint(ss, ck);
  auto back = nn::read_checkpoint(ss);
  EXPECT_EQ(back.meta_or("kind"), "test");

  Rng other(9);
  nn::Mlp copy("net", {3, 4, 2}, other);
  std::vector<nn::Parameter*> qs;
  copy.collect(qs);
  nn::restore_parameters(back, qs);
  for (std::size_t i = 0; i < ps.size(); ++i) EXPECT_EQ(ps[i]->value, qs[i]->value);

  nn::Mlp wrong("net", {3, 5, 2}, other);
  std::vector<nn::Parameter*> ws;
  wrong.collect(ws);
  EXPECT_THROW(nn::restore_parameters(back, ws), rl4rec::ConfigError);
}

TEST(Checkpoint, EncodingIsLittleEndian) {
  nn::Checkpoint ck;
  ck.arrays.push_back({"x", nn::Tensor::scalar(1.0)});
  std::stringstream ss;
  nn::write_checkpoint(ss, ck);
  const std::string bytes = ss.str();
  // magic(8) version(4) n_meta(4) n_arrays(4) name(4+1) rank(4) dims(16) value(8)
  ASSERT_EQ(bytes.size(), 8u + 4 + 4 + 4 + 5 + 4 + 16 + 8);
  EXPECT_EQ(bytes.substr(0, 8), "RL4RCKPT");
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1);  // version, low byte first
  const std::string value = bytes.substr(bytes.size() - 8);
  EXPECT_EQ(static_cast<unsigned char>(value[7]), 0x3F);  // 1.0 = 0x3FF0000000000000
  EXPECT_EQ(static_cast<unsigned char>(value[6]), 0xF0);
}
