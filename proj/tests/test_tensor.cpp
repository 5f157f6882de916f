#include "tabalign/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "tabalign/optim.hpp"

namespace tabalign {
namespace {

using Tensor = TensorT<double>;
using Parameter = ParameterT<double>;
using DTape = Tape<double>;

Tensor make(int rows, int cols, std::vector<double> values) {
  Tensor t(rows, cols);
  t.data = std::move(values);
  return t;
}

TEST(Ops, SoftmaxUniformOnEqualLogits) {
  DTape tape;
  const int logits = tape.input(make(1, 3, {0.0, 0.0, 0.0}));
  const int p = tape.softmax_rows(logits);
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(tape.val(p).at(0, j), 1.0 / 3.0, 1e-15);
}

TEST(Ops, SoftmaxRowsSumToOne) {
  Rng rng(5);
  DTape tape;
  Tensor logits(8, 13);
  for (auto& v : logits.data) v = rng.normal(0.0, 3.0);
  const int p = tape.softmax_rows(tape.input(logits));
  for (int i = 0; i < 8; ++i) {
    double sum = 0;
    for (int j = 0; j < 13; ++j) sum += tape.val(p).at(i, j);
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Ops, CrossEntropyUniformSevenClasses) {
  DTape tape;
  const int logits = tape.input(make(1, 7, std::vector<double>(7, 0.0)));
  const int loss = tape.cross_entropy_row(logits, 0, 3);
  EXPECT_NEAR(tape.val(loss).data[0], std::log(7.0), 1e-12);
}

TEST(Ops, CrossEntropyNearOneHotGoesToZero) {
  DTape tape;
  Tensor logits(1, 5);
  logits.at(0, 2) = 40.0;
  const int loss = tape.cross_entropy_row(tape.input(logits), 0, 2);
  EXPECT_LT(tape.val(loss).data[0], 1e-12);
}

TEST(Ops, MatmulIdentity) {
  Rng rng(17);
  Tensor a(3, 3);
  for (auto& v : a.data) v = rng.normal();
  Tensor eye(3, 3);
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  DTape tape;
  const int c = tape.matmul(tape.input(eye), tape.input(a));
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(tape.val(c).at(i, j), a.at(i, j));
  }
}

TEST(Ops, ShapeMismatchNamesBothShapes) {
  DTape tape;
  const int a = tape.input(Tensor(2, 3));
  const int b = tape.input(Tensor(2, 3));
  try {
    tape.matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("(2x3)"), std::string::npos);
  }
}

TEST(Ops, MaskedSoftmaxZeroesMaskedPositions) {
  DTape tape;
  Tensor logits(2, 4);
  logits.at(0, 1) = 5.0;
  logits.at(1, 2) = -2.0;
  Tensor mask(2, 4);
  mask.at(0, 0) = 1;
  mask.at(0, 1) = 1;
  mask.at(1, 2) = 1;
  const int p = tape.masked_softmax_rows(tape.input(logits), mask);
  EXPECT_EQ(tape.val(p).at(0, 2), 0.0);
  EXPECT_EQ(tape.val(p).at(0, 3), 0.0);
  EXPECT_NEAR(tape.val(p).at(0, 0) + tape.val(p).at(0, 1), 1.0, 1e-12);
  EXPECT_EQ(tape.val(p).at(1, 0), 0.0);
  EXPECT_NEAR(tape.val(p).at(1, 2), 1.0, 1e-12);
}

TEST(Ops, MaskedSoftmaxAllMaskedRowIsError) {
  DTape tape;
  const int logits = tape.input(Tensor(1, 3));
  Tensor mask(1, 3);
  EXPECT_THROW(tape.masked_softmax_rows(logits, mask), NumericError);
}

TEST(Ops, CrossEntropySoftmaxGradientIsPMinusOneHot) {
  Rng rng(23);
  for (int iter = 0; iter < 20; ++iter) {
    Parameter logits("logits", 1, 9);
    for (auto& v : logits.value.data) v = rng.normal(0.0, 2.0);
    const int target = static_cast<int>(rng.below(9));
    DTape tape;
    const int node = tape.param(logits);
    const int loss = tape.cross_entropy_row(node, 0, target);
    tape.backward(loss);
    // fused analytic form
    double mx = -1e300;
    for (double v : logits.value.data) mx = std::max(mx, v);
    double z = 0;
    for (double v : logits.value.data) z += std::exp(v - mx);
    for (int j = 0; j < 9; ++j) {
      const double p = std::exp(logits.value.data[static_cast<std::size_t>(j)] - mx) / z;
      const double expected = p - (j == target ? 1.0 : 0.0);
      EXPECT_NEAR(logits.grad.at(0, j), expected, 1e-12);
    }
  }
}

TEST(Adam, FirstStepMagnitudeIsLearningRate) {
  Parameter p("x", 1, 1);
  p.value.data[0] = 2.5;
  p.grad.data[0] = 0.731;  // any nonzero gradient
  std::vector<Parameter*> params = {&p};
  AdamState<double> state(AdamConfig{0.05, 0.9, 0.999, 0.0});
  adam_step(params, state);
  // bias-corrected first step is exactly lr * sign(g) when eps = 0
  EXPECT_NEAR(p.value.data[0], 2.5 - 0.05, 1e-14);
  EXPECT_EQ(p.grad.data[0], 0.0);  // gradients zeroed afterward
}

TEST(Adam, ZeroGradientIsIdentity) {
  Parameter p("x", 2, 2);
  p.value.data = {1.0, -2.0, 3.0, -4.0};
  std::vector<Parameter*> params = {&p};
  AdamState<double> state;
  adam_step(params, state);
  EXPECT_EQ(p.value.data, (std::vector<double>{1.0, -2.0, 3.0, -4.0}));
}

// Two Adam steps on f(x) = x^2 from x = 1 with lr = 0.1; expected iterates
// computed by hand: x1 = 0.9000000005, x2 = 0.8004122286917928.
TEST(Adam, TwoStepsOnQuadraticMatchHandComputation) {
  Parameter x("x", 1, 1);
  x.value.data[0] = 1.0;
  std::vector<Parameter*> params = {&x};
  AdamState<double> state(AdamConfig{0.1, 0.9, 0.999, 1e-8});
  double prev = 1.0;
  x.grad.data[0] = 2.0 * x.value.data[0];
  adam_step(params, state);
  EXPECT_NEAR(x.value.data[0], 0.9000000005, 1e-12);
  EXPECT_LT(x.value.data[0], prev);
  prev = x.value.data[0];
  x.grad.data[0] = 2.0 * x.value.data[0];
  adam_step(params, state);
  EXPECT_NEAR(x.value.data[0], 0.8004122286917928, 1e-12);
  EXPECT_LT(x.value.data[0], prev);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  Parameter p("phi.block0.attn.wq", 1, 2);
  p.grad.data[1] = std::numeric_limits<double>::quiet_NaN();
  std::vector<Parameter*> params = {&p};
  AdamState<double> state;
  try {
    adam_step(params, state);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("phi.block0.attn.wq"), std::string::npos);
  }
}

TEST(GradCheck, QuadraticAtThree) {
  Parameter x("x", 1, 1);
  x.value.data[0] = 3.0;
  std::vector<Parameter*> params = {&x};
  auto loss_fn = [&](bool with_grad) {
    const double v = x.value.data[0];
    if (with_grad) x.grad.data[0] += 2.0 * v;
    return v * v;
  };
  Rng rng(1);
  const double err = finite_difference_check<double>(loss_fn, params, 8, 1e-4, rng);
  EXPECT_LT(err, 1e-8);
}

TEST(GradCheck, LinearIsNearExact) {
  Parameter x("x", 1, 1);
  x.value.data[0] = -11.25;
  std::vector<Parameter*> params = {&x};
  auto loss_fn = [&](bool with_grad) {
    if (with_grad) x.grad.data[0] += 5.0;
    return 5.0 * x.value.data[0];
  };
  Rng rng(2);
  const double err = finite_difference_check<double>(loss_fn, params, 4, 1e-4, rng);
  EXPECT_LT(err, 1e-10);
}

TEST(GradCheck, RejectsBadStep) {
  Parameter x("x", 1, 1);
  std::vector<Parameter*> params = {&x};
  auto loss_fn = [&](bool) { return 0.0; };
  Rng rng(3);
  EXPECT_THROW(finite_difference_check<double>(loss_fn, params, 1, 1e-2, rng), ConfigError);
  EXPECT_THROW(finite_difference_check<double>(loss_fn, params, 1, 1e-8, rng), ConfigError);
}

// Composite graph exercising every primitive's backward against central
// differences.
TEST(GradCheck, AllPrimitivesComposite) {
  Rng init(99);
  Parameter w1("w1", 6, 8);
  Parameter w2("w2", 4, 8);
  Parameter gamma("gamma", 1, 8);
  Parameter beta("beta", 1, 8);
  Parameter emb("emb", 10, 6);
  Parameter bias("bias", 1, 8);
  for (auto* p : {&w1, &w2, &gamma, &beta, &emb, &bias}) {
    for (auto& v : p->value.data) v = init.normal(0.0, 0.5);
  }
  const std::vector<int> ids = {1, 4, 9, 2};
  std::vector<Parameter*> params = {&w1, &w2, &gamma, &beta, &emb, &bias};
  Tensor mask(4, 4);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) mask.at(i, j) = (j <= i) ? 1.0 : 0.0;  // causal-style mask
  }
  auto loss_fn = [&](bool with_grad) {
    DTape tape;
    const int x = tape.embedding(tape.param(emb), ids);           // 4x6
    const int h = tape.matmul(x, tape.param(w1));                 // 4x8
    const int hb = tape.add_row(h, tape.param(bias));             // 4x8
    const int ln = tape.layer_norm(hb, tape.param(gamma), tape.param(beta));
    const int act = tape.gelu(ln);
    const int left = tape.slice_cols(act, 0, 4);
    const int right = tape.slice_cols(act, 4, 8);
    const int glued = tape.concat_cols({left, right});            // 4x8
    const int scores = tape.scale(tape.matmul_nt(glued, tape.param(w2)), 0.5);  // 4x4
    const int probs = tape.masked_softmax_rows(scores, mask);
    const int mixed = tape.matmul(probs, tape.slice_rows(glued, 0, 4));
    const int pooled = tape.rows_mean(mixed, {0, 2, 3});          // 1x8
    const int twice = tape.add(pooled, pooled);
    const int stacked = tape.concat_rows({twice, pooled});        // 2x8
    const int ce1 = tape.cross_entropy_row(stacked, 0, 3);
    const int ce2 = tape.cross_entropy_row(stacked, 1, 6, {1, 1, 0, 1, 1, 1, 1, 0});
    const int total = tape.add_n({ce1, ce2});
    const double value = tape.val(total).data[0];
    if (with_grad) tape.backward(total);
    return value;
  };
  Rng rng(7);
  const double err = finite_difference_check<double>(loss_fn, params, 200, 3e-4, rng);
  EXPECT_LT(err, 1e-6) << "analytic gradients disagree with central differences";
}

TEST(GradCheck, DropoutWithFixedMaskBackpropagates) {
  Parameter w("w", 3, 3);
  Rng init(5);
  for (auto& v : w.value.data) v = init.normal();
  std::vector<Parameter*> params = {&w};
  auto loss_fn = [&](bool with_grad) {
    Rng drop(42);  // identical mask on every call
    DTape tape;
    const int x = tape.dropout(tape.param(w), 0.4, &drop);
    const int sq = tape.matmul_nt(x, x);  // 3x3
    const int loss = tape.cross_entropy_row(sq, 1, 2);
    const double v = tape.val(loss).data[0];
    if (with_grad) tape.backward(loss);
    return v;
  };
  Rng rng(11);
  const double err = finite_difference_check<double>(loss_fn, params, 60, 1e-4, rng);
  EXPECT_LT(err, 1e-6);
}

TEST(Tensor, FiniteScanWorks) {
  Tensor t(2, 2);
  EXPECT_TRUE(t.all_finite());
  t.at(1, 1) = std::numeric_limits<double>::infinity();
  EXPECT_FALSE(t.all_finite());
}

}  // namespace
}  // namespace tabalign
