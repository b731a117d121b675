#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "pncnn/autodiff.hpp"
#include "pncnn/error.hpp"
#include "pncnn/gradcheck.hpp"
#include "pncnn/rng.hpp"

using namespace pncnn;

namespace {

TensorPtr random_tensor(SplitRng& rng, Shape shape, double lo, double hi, bool grad = true) {
  auto t = make_tensor(std::move(shape), 0.0, grad);
  for (auto& v : t->data()) v = rng.uniform(lo, hi);
  return t;
}

// Reduces an op output to a scalar with fixed random weights so every element
// contributes a distinct gradient.
TensorPtr weighted_sum(Tape& tape, const TensorPtr& y, std::uint64_t seed) {
  SplitRng rng(seed);
  auto w = random_tensor(rng, y->shape(), -1.0, 1.0, false);
  return sum(tape, mul(tape, y, w));
}

constexpr double kTol = 1e-6;

}  // namespace

TEST(Tensor, ShapeHelpers) {
  EXPECT_EQ(shape_numel({2, 3, 4}), 24u);
  EXPECT_EQ(shape_str({2, 3}), "[2,3]");
  auto t = make_tensor({1, 2, 3}, 1.5);
  EXPECT_EQ(t->size(), 6u);
  EXPECT_DOUBLE_EQ(t->at(0, 1, 2), 1.5);
  EXPECT_THROW(make_tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Tensor, GradIsLazyAndZeroed) {
  auto t = make_tensor({3}, 2.0, true);
  EXPECT_FALSE(t->has_grad());
  for (double g : t->grad()) EXPECT_EQ(g, 0.0);
  EXPECT_TRUE(t->has_grad());
  t->drop_grad();
  EXPECT_FALSE(t->has_grad());
}

TEST(Autodiff, ShapeMismatchNamesBothShapes) {
  Tape tape;
  auto a = make_tensor({2, 3}, 1.0, true);
  auto b = make_tensor({3, 2}, 1.0, true);
  try {
    add(tape, a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[3,2]"), std::string::npos);
  }
}

TEST(Autodiff, ConstantsAreNotRecorded) {
  Tape tape;
  auto a = make_tensor({4}, 1.0, false);
  auto b = add(tape, a, a);
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(b->requires_grad());
}

TEST(Autodiff, DisabledTapeRecordsNothing) {
  Tape tape;
  tape.set_enabled(false);
  auto a = make_tensor({4}, 1.0, true);
  auto b = square(tape, a);
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_DOUBLE_EQ((*b)[0], 1.0);
}

TEST(Autodiff, BackwardRequiresScalar) {
  Tape tape;
  auto a = make_tensor({2}, 1.0, true);
  auto b = square(tape, a);
  EXPECT_THROW(tape.backward(b), ShapeError);
}

TEST(Autodiff, FanOutAccumulatesAndRepeatedBackwardIsIdempotent) {
  Tape tape;
  auto x = make_tensor({1}, 3.0, true);
  auto y = add(tape, mul(tape, x, x), x);  // x^2 + x
  tape.backward(y);
  EXPECT_DOUBLE_EQ(x->grad()[0], 7.0);
  tape.backward(y);
  EXPECT_DOUBLE_EQ(x->grad()[0], 7.0);
  EXPECT_EQ(tape.last_backward_visits(), tape.size());
}

TEST(Autodiff, NonFiniteGradientNamesTheOp) {
  Tape tape;
  auto x = make_tensor({1}, 0.0, true);
  auto y = sum(tape, div(tape, make_tensor({1}, 1.0, true), x, 0.0));
  try {
    tape.backward(y);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("div"), std::string::npos);
  }
}

TEST(Autodiff, LogRejectsNonPositive) {
  Tape tape;
  EXPECT_THROW(log(tape, make_tensor({2}, std::vector<double>{1.0, 0.0}, true)), DomainError);
}

TEST(Autodiff, SoftplusIsStableForLargeInputs) {
  Tape tape;
  auto x = make_tensor({3}, std::vector<double>{-800.0, 0.0, 800.0}, true);
  auto y = softplus(tape, x);
  EXPECT_NEAR((*y)[0], 0.0, 1e-300);
  EXPECT_DOUBLE_EQ((*y)[1], std::log(2.0));
  EXPECT_DOUBLE_EQ((*y)[2], 800.0);
}

TEST(Autodiff, Conv2dMatchesDirectLoops) {
  SplitRng rng(11);
  for (int stride : {1, 2})
    for (int pad : {0, 1, 2}) {
      auto in = random_tensor(rng, {3, 7, 6}, -1, 1, false);
      auto k = random_tensor(rng, {4, 3, 3, 3}, -1, 1, false);
      auto b = random_tensor(rng, {4}, -1, 1, false);
      Tape tape;
      auto out = conv2d(tape, in, k, b, stride, pad);
      std::size_t oh = 0, ow = 0;
      const auto ref = oracle::conv2d(*in, *k, b.get(), stride, pad, oh, ow);
      ASSERT_EQ(out->shape(), (Shape{4, oh, ow}));
      for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR((*out)[i], ref[i], 1e-12);
    }
}

TEST(Autodiff, MaxPoolCeilModeAndTies) {
  Tape tape;
  auto x = make_tensor({1, 3, 3}, std::vector<double>{1, 1, 5, 1, 1, 2, 7, 0, 3}, true);
  auto r = maxpool2x(tape, x);
  ASSERT_EQ(r.out->shape(), (Shape{1, 2, 2}));
  EXPECT_EQ(r.argmax[0], 0u);  // tie -> first
  EXPECT_DOUBLE_EQ((*r.out)[1], 5.0);
  EXPECT_DOUBLE_EQ((*r.out)[2], 7.0);
  EXPECT_DOUBLE_EQ((*r.out)[3], 3.0);
}

TEST(Autodiff, UpsampleCropsToRequestedExtent) {
  Tape tape;
  auto x = make_tensor({1, 2, 2}, std::vector<double>{1, 2, 3, 4}, true);
  auto y = upsample2x(tape, x, 3, 4);
  ASSERT_EQ(y->shape(), (Shape{1, 3, 4}));
  EXPECT_DOUBLE_EQ(y->at(0, 2, 3), 4.0);
  EXPECT_DOUBLE_EQ(y->at(0, 1, 1), 1.0);
  EXPECT_THROW(upsample2x(tape, x, 5, 4), ShapeError);
}

// --- Finite-difference checks, one per registered op ------------------------

struct UnaryCase {
  const char* name;
  double lo, hi;
  std::function<TensorPtr(Tape&, const TensorPtr&)> op;
};

class UnaryGrad : public ::testing::TestWithParam<UnaryCase> {};

TEST_P(UnaryGrad, MatchesFiniteDifferences) {
  const auto& c = GetParam();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SplitRng rng(seed);
    auto x = random_tensor(rng, {2, 3, 4}, c.lo, c.hi);
    ScalarFn f = [&](Tape& t) { return weighted_sum(t, c.op(t, x), 99 + seed); };
    EXPECT_LT(finite_diff_check(f, x), kTol) << c.name << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(
    Ops, UnaryGrad,
    ::testing::Values(
        UnaryCase{"scale", -2, 2, [](Tape& t, const TensorPtr& x) { return scale(t, x, -1.7); }},
        UnaryCase{"add_scalar", -2, 2, [](Tape& t, const TensorPtr& x) { return add_scalar(t, x, 0.3); }},
        UnaryCase{"log", 0.2, 3, [](Tape& t, const TensorPtr& x) { return log(t, x); }},
        UnaryCase{"exp", -2, 2, [](Tape& t, const TensorPtr& x) { return exp(t, x); }},
        UnaryCase{"square", -2, 2, [](Tape& t, const TensorPtr& x) { return square(t, x); }},
        UnaryCase{"abs", 0.1, 2, [](Tape& t, const TensorPtr& x) { return abs(t, scale(t, x, -1.0)); }},
        UnaryCase{"softplus", -4, 4, [](Tape& t, const TensorPtr& x) { return softplus(t, x); }},
        UnaryCase{"relu", 0.05, 2, [](Tape& t, const TensorPtr& x) { return relu(t, add_scalar(t, x, -1.0)); }},
        UnaryCase{"clamp_min", 0.05, 2, [](Tape& t, const TensorPtr& x) { return clamp_min(t, x, 1.0); }},
        UnaryCase{"sum", -2, 2, [](Tape& t, const TensorPtr& x) { return scale(t, sum(t, x), 1.0); }},
        UnaryCase{"mean", -2, 2, [](Tape& t, const TensorPtr& x) { return mean(t, x); }},
        UnaryCase{"upsample2x", -2, 2, [](Tape& t, const TensorPtr& x) { return upsample2x(t, x, 5, 8); }},
        UnaryCase{"maxpool2x", -2, 2, [](Tape& t, const TensorPtr& x) { return maxpool2x(t, x).out; }}),
    [](const auto& info) { return std::string(info.param.name); });

TEST(AutodiffGrad, BinaryOps) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SplitRng rng(seed);
    auto x = random_tensor(rng, {2, 3, 3}, 0.5, 2.0);
    auto y = random_tensor(rng, {2, 3, 3}, 0.5, 2.0);
    using Bin = TensorPtr (*)(Tape&, const TensorPtr&, const TensorPtr&);
    const std::pair<const char*, Bin> ops[] = {
        {"add", [](Tape& t, const TensorPtr& a, const TensorPtr& b) { return add(t, a, b); }},
        {"sub", [](Tape& t, const TensorPtr& a, const TensorPtr& b) { return sub(t, a, b); }},
        {"mul", [](Tape& t, const TensorPtr& a, const TensorPtr& b) { return mul(t, a, b); }},
        {"div", [](Tape& t, const TensorPtr& a, const TensorPtr& b) { return div(t, a, b); }},
        {"concat", [](Tape& t, const TensorPtr& a, const TensorPtr& b) { return concat_channels(t, {a, b}); }}};
    for (const auto& [name, op] : ops) {
      ScalarFn f = [&, op = op](Tape& t) { return weighted_sum(t, op(t, x, y), seed); };
      EXPECT_LT(finite_diff_check(f, x), kTol) << name << " wrt x";
      EXPECT_LT(finite_diff_check(f, y), kTol) << name << " wrt y";
    }
  }
}

TEST(AutodiffGrad, Conv2dAllInputs) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    SplitRng rng(seed);
    auto in = random_tensor(rng, {2, 6, 5}, -1, 1);
    auto k = random_tensor(rng, {3, 2, 3, 3}, -1, 1);
    auto b = random_tensor(rng, {3}, -1, 1);
    const int stride = seed % 2 ? 2 : 1;
    const int pad = static_cast<int>(seed % 3);
    ScalarFn f = [&](Tape& t) { return weighted_sum(t, conv2d(t, in, k, b, stride, pad), seed); };
    EXPECT_LT(finite_diff_check(f, in), kTol);
    EXPECT_LT(finite_diff_check(f, k), kTol);
    EXPECT_LT(finite_diff_check(f, b), kTol);
  }
}

TEST(GradCheck, RestoresInputAndDetectsWrongGradient) {
  auto x = make_tensor({3}, std::vector<double>{0.5, 1.0, 2.0}, true);
  const auto before = x->storage();
  ScalarFn ok = [&](Tape& t) { return sum(t, square(t, x)); };
  EXPECT_LT(finite_diff_check(ok, x), 1e-8);
  EXPECT_EQ(x->storage(), before);

  // An op with a deliberately wrong backward must be caught.
  ScalarFn bad = [&](Tape& t) {
    auto out = make_tensor({1}, 0.0);
    for (double v : x->data()) (*out)[0] += v * v;
    t.record("bad", {x}, {out}, [x, out] {
      for (std::size_t i = 0; i < x->size(); ++i) x->grad()[i] += out->grad()[0] * (*x)[i];
    });
    return out;
  };
  EXPECT_GT(finite_diff_check(bad, x), 0.1);
}

TEST(NanPropagation, ActivationsAndPoolingKeepNaN) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  Tape tape;
  auto x = make_tensor({1, 2, 2}, std::vector<double>{-1.0, nan, 3.0, 0.5});
  EXPECT_TRUE(std::isnan((*relu(tape, x))[1]));
  EXPECT_TRUE(std::isnan((*clamp_min(tape, x, 0.0))[1]));
  EXPECT_TRUE(std::isnan((*maxpool2x(tape, x).out)[0]));
}

TEST(GradCheck, UnusedInputWithStaleGradient) {
  auto x = make_tensor({2}, std::vector<double>{1.0, 2.0}, true);
  auto y = make_tensor({2}, std::vector<double>{3.0, 4.0}, true);
  x->grad()[0] = 5.0;
  ScalarFn f = [&](Tape& t) { return sum(t, square(t, y)); };
  EXPECT_EQ(finite_diff_check(f, x), 0.0);
}
