#include <gtest/gtest.h>

#include <cmath>

#include "mslka/conv.hpp"
#include "mslka/gradcheck.hpp"
#include "mslka/ops.hpp"
#include "mslka/random.hpp"
#include "oracles.hpp"

using namespace mslka;
using TD = Tensor<double>;

namespace {

double max_abs_diff(std::span<const double> a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < b.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Tensor, ShapeInvariants) {
  TD t(Shape{2, 3, 4, 5});
  EXPECT_EQ(t.numel(), 120u);
  EXPECT_FALSE(t.has_grad());
  EXPECT_THROW(TD(Shape{0, 1, 1, 1}), DimensionError);
  EXPECT_THROW(TD(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(Conv2d, AllOnesSumsNine) {
  auto out = conv2d(TD::ones({1, 1, 3, 3}), TD::ones({1, 1, 3, 3}), ConvSpec{1, 1, 3, 3});
  ASSERT_EQ(out.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(out.item(), 9.0);
}

TEST(Conv2d, IdentityKernelReproducesInput) {
  Rng rng(3);
  auto x = random_uniform<double>({1, 1, 5, 4}, rng);
  auto out = conv2d(x, TD::ones({1, 1, 1, 1}), ConvSpec::pointwise(1, 1));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(out.data()[i], x.data()[i]);
}

TEST(Conv2d, DilatedMatchesDirectSummation) {
  Rng rng(11);
  auto x = random_uniform<double>({1, 2, 5, 5}, rng);
  auto w = random_uniform<double>({3, 2, 3, 3}, rng);
  ConvSpec spec{2, 3, 3, 3, 1, 2, 2, 1};
  auto out = conv2d(x, w, spec);
  EXPECT_LT(max_abs_diff(out.data(), oracle::conv2d(x, w, {}, spec)), 1e-6);
}

TEST(Conv2d, RandomConfigurationsMatchOracle) {
  Rng rng(2024);
  for (int trial = 0; trial < 60; ++trial) {
    const bool depthwise = rng.bernoulli(0.5);
    const int cin = rng.uniform_int(1, 4);
    const int cout = depthwise ? cin : rng.uniform_int(1, 4);
    const int k = 2 * rng.uniform_int(0, 2) + 1;
    ConvSpec spec{cin, cout, k, k, rng.uniform_int(1, 2), rng.uniform_int(0, 4),
                  rng.uniform_int(1, 5), depthwise ? cin : 1};
    const int span = spec.dilation * (k - 1) + 1;
    const int h = std::max(span - 2 * spec.padding, 1) + rng.uniform_int(0, 4);
    auto x = random_uniform<double>({2, cin, h, h + 1}, rng);
    auto w = random_uniform<double>(spec.weight_shape(), rng);
    auto bias = random_uniform<double>({1, cout, 1, 1}, rng);
    auto out = conv2d<double>(x, w, bias, spec);
    EXPECT_LT(max_abs_diff(out.data(), oracle::conv2d(x, w, bias.values(), spec)), 1e-6)
        << "trial " << trial;
  }
}

TEST(Conv2d, ShapeErrors) {
  TD x({1, 2, 5, 5});
  EXPECT_THROW(conv2d(x, TD({1, 3, 3, 3}), ConvSpec{3, 1, 3, 3}), DimensionError);
  EXPECT_THROW(conv2d(x, TD({1, 1, 3, 3}), ConvSpec{2, 1, 3, 3}), DimensionError);
  EXPECT_THROW(conv2d(x, TD({1, 2, 7, 7}), ConvSpec{2, 1, 7, 7}), ConfigError);
  EXPECT_THROW(conv2d(x, TD({3, 1, 3, 3}), ConvSpec{2, 3, 3, 3, 1, 1, 1, 2}), ConfigError);
}

TEST(Conv2d, LinearInInput) {
  Rng rng(5);
  auto w = random_uniform<double>({3, 2, 3, 3}, rng);
  auto a = random_uniform<double>({1, 2, 6, 6}, rng);
  auto b = random_uniform<double>({1, 2, 6, 6}, rng);
  const ConvSpec spec = ConvSpec::same(2, 3, 3, 2);
  const double alpha = 0.7, beta = -1.3;
  auto mix = add(scale(a, alpha), scale(b, beta));
  auto lhs = conv2d(mix, w, spec);
  auto ca = conv2d(a, w, spec);
  auto cb = conv2d(b, w, spec);
  for (std::size_t i = 0; i < lhs.numel(); ++i) {
    EXPECT_NEAR(lhs.data()[i], alpha * ca.data()[i] + beta * cb.data()[i], 1e-6);
  }
}

TEST(GlobalAvgPool, Means) {
  EXPECT_EQ(global_avg_pool(TD::ones({1, 1, 4, 4})).item(), 1.0);
  EXPECT_EQ(global_avg_pool(TD({1, 1, 2, 2}, {1, 3, 5, 7})).item(), 4.0);
  Rng rng(8);
  auto x = random_uniform<double>({2, 3, 8, 8}, rng);
  auto p = global_avg_pool(x);
  ASSERT_EQ(p.shape(), (Shape{2, 3, 1, 1}));
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 3; ++c) {
      double acc = 0;
      for (int y = 0; y < 8; ++y)
        for (int xx = 0; xx < 8; ++xx) acc += x.at(b, c, y, xx);
      EXPECT_NEAR(p.at(b, c, 0, 0), acc / 64.0, 1e-6);
    }
}

TEST(Upsample, ConstantFieldsStayConstant) {
  auto one = upsample_bilinear(TD({1, 1, 1, 1}, 5.0), 7, 3);
  for (double v : one.data()) EXPECT_EQ(v, 5.0);
  auto up = upsample_bilinear(TD({1, 1, 2, 2}, 3.0), 4, 4);
  for (double v : up.data()) EXPECT_EQ(v, 3.0);
  EXPECT_THROW(upsample_bilinear(TD({1, 1, 2, 2}), 0, 4), DimensionError);
}

TEST(Upsample, MatchesScalarHalfPixelOracle) {
  TD x({1, 1, 2, 2}, {0, 1, 2, 3});
  auto up = upsample_bilinear(x, 4, 4);
  std::vector<double> img{0, 1, 2, 3};
  for (int y = 0; y < 4; ++y)
    for (int xx = 0; xx < 4; ++xx)
      EXPECT_NEAR(up.at(0, 0, y, xx), oracle::bilinear_at(img, 2, 2, 4, 4, y, xx), 1e-6);
  // Half-pixel centers put the first output sample a quarter pixel past the corner.
  EXPECT_NEAR(up.at(0, 0, 0, 1), 0.25, 1e-12);
}

TEST(ConcatSplit, RoundTripIsBitIdentical) {
  Rng rng(4);
  auto x = random_uniform<double>({1, 8, 4, 4}, rng);
  auto parts = split_channels(x, {2, 2, 2, 2});
  auto back = concat_channels(parts);
  ASSERT_EQ(back.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(back.data()[i], x.data()[i]);
  auto whole = split_channels(x, {8});
  ASSERT_EQ(whole.size(), 1u);
  EXPECT_EQ(whole[0].values(), x.values());
}

TEST(ConcatSplit, Errors) {
  TD a({1, 2, 4, 4}), b({1, 2, 4, 5});
  EXPECT_THROW(concat_channels<double>({a, b}), DimensionError);
  EXPECT_THROW(split_channels(a, {1, 2}), DimensionError);
}

TEST(ConcatSplit, ConcatGradientIsOnes) {
  TD a({1, 2, 3, 3}, 0.5), b({1, 1, 3, 3}, 2.0);
  a.set_requires_grad();
  sum(concat_channels<double>({a, b})).backward();
  for (double g : a.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Elementwise, PointwiseSemantics) {
  Rng rng(1);
  auto x = random_uniform<double>({1, 2, 3, 3}, rng);
  auto zeroed = mul(x, TD::zeros(x.shape()));
  for (double v : zeroed.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(sigmoid(TD::scalar(0.0)).item(), 0.5);
  EXPECT_EQ(relu(TD::scalar(-1.0)).item(), 0.0);
  EXPECT_EQ(mslka::tanh(TD::scalar(0.0)).item(), 0.0);
  EXPECT_THROW(mul(x, TD({1, 2, 3, 1})), DimensionError);
  auto s = mul(x, TD({1, 2, 1, 1}, {2.0, -1.0}));
  EXPECT_EQ(s.at(0, 0, 1, 2), 2.0 * x.at(0, 0, 1, 2));
  EXPECT_EQ(s.at(0, 1, 2, 0), -x.at(0, 1, 2, 0));
}

TEST(Elementwise, MulGradientMatchesFiniteDifferences) {
  Rng rng(6);
  auto x = random_uniform<double>({1, 2, 3, 3}, rng);
  auto y = random_uniform<double>({1, 2, 3, 3}, rng);
  EXPECT_LT(finite_diff_check([&](const TD& v) { return sum(mul(v, y)); }, x), 1e-6);
  x.set_requires_grad();
  sum(mul(x, y)).backward();
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x.grad()[i], y.data()[i]);
}

TEST(Backward, SumAndQuadratic) {
  TD x({1, 1, 2, 2}, 3.0);
  x.set_requires_grad();
  sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  x.zero_grad();
  sum(mul(x, x)).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 6.0);
}

TEST(Backward, UsageErrors) {
  TD x({1, 1, 2, 2}, 1.0);
  x.set_requires_grad();
  EXPECT_THROW(relu(x).backward(), UsageError);  // not a scalar
  auto loss = sum(x);
  loss.backward();
  EXPECT_THROW(loss.backward(), UsageError);  // graph consumed
  EXPECT_THROW(sum(x).backward(), UsageError);  // grad not reset
  x.zero_grad();
  EXPECT_NO_THROW(sum(x).backward());
  EXPECT_THROW(TD::scalar(1.0).backward(), UsageError);  // no history
}

TEST(Backward, ConvGradientsMatchFiniteDifferences) {
  Rng rng(12);
  auto x = random_uniform<double>({2, 3, 6, 5}, rng);
  auto w = random_uniform<double>({4, 3, 3, 3}, rng);
  auto b = random_uniform<double>({4, 1, 1, 1}, rng);
  auto r = random_uniform<double>({2, 4, 3, 3}, rng);
  ConvSpec spec{3, 4, 3, 3, 2, 1, 1, 1};
  auto f = [&] { return sum(mul(conv2d<double>(x, w, b, spec), r)); };
  EXPECT_LT(finite_diff_check(f, {x, w, b}), 1e-6);
}

TEST(Backward, DepthwiseDilatedGradients) {
  Rng rng(13);
  auto x = random_uniform<double>({1, 3, 9, 8}, rng);
  auto w = random_uniform<double>({3, 1, 5, 5}, rng);
  auto b = random_uniform<double>({3, 1, 1, 1}, rng);
  for (int stride : {1, 2}) {
    ConvSpec spec{3, 3, 5, 5, stride, 4, 2, 3};
    auto ho = spec.out_size(9, 5), wo = spec.out_size(8, 5);
    auto r = random_uniform<double>({1, 3, ho, wo}, rng);
    auto f = [&] { return sum(mul(conv2d<double>(x, w, b, spec), r)); };
    EXPECT_LT(finite_diff_check(f, {x, w, b}), 1e-6) << "stride " << stride;
  }
}

TEST(Backward, EveryOpPassesGradientCheck) {
  Rng rng(21);
  auto x = random_uniform<double>({2, 4, 6, 6}, rng);
  auto y = random_uniform<double>({2, 4, 6, 6}, rng);
  auto yb = random_uniform<double>({2, 4, 1, 1}, rng);
  auto gamma = random_uniform<double>({1, 4, 1, 1}, rng, 0.5, 1.5);
  auto beta = random_uniform<double>({1, 4, 1, 1}, rng);
  auto weigh = [&](const TD& t) {
    Rng local(99);
    return sum(mul(t, random_uniform<double>(t.shape(), local)));
  };
  EXPECT_LT(finite_diff_check([&] { return weigh(add(x, yb)); }, {x, yb}), 1e-6);
  EXPECT_LT(finite_diff_check([&] { return weigh(sub(x, y)); }, {x, y}), 1e-6);
  EXPECT_LT(finite_diff_check([&] { return weigh(mul(x, yb)); }, {x, yb}), 1e-6);
  EXPECT_LT(finite_diff_check([&] { return weigh(sigmoid(x)); }, {x}), 1e-6);
  EXPECT_LT(finite_diff_check([&] { return weigh(mslka::tanh(x)); }, {x}), 1e-6);
  EXPECT_LT(finite_diff_check([&] { return weigh(relu(x)); }, {x}), 1e-6);
  EXPECT_LT(finite_diff_check([&] { return weigh(global_avg_pool(x)); }, {x}), 1e-6);
  EXPECT_LT(finite_diff_check([&] { return weigh(avg_pool2x2(x)); }, {x}), 1e-6);
  EXPECT_LT(finite_diff_check([&] { return weigh(upsample_bilinear(x, 11, 9)); }, {x}), 1e-6);
  EXPECT_LT(finite_diff_check([&] { return weigh(instance_norm(x, gamma, beta)); }, {x, gamma, beta}),
            1e-6);
  EXPECT_LT(finite_diff_check([&] { return weigh(gram_matrix(x)); }, {x}), 1e-6);
  EXPECT_LT(finite_diff_check([&] {
              auto parts = split_channels(x, {1, 3});
              return weigh(concat_channels<double>({parts[1], y, parts[0]}));
            },
                              {x, y}),
            1e-6);
  EXPECT_LT(finite_diff_check([&] { return mean(activation(sub(x, y), Activation::abs)); }, {x, y}),
            1e-6);
}

TEST(FiniteDiffCheck, ExactCases) {
  TD x({1, 1, 2, 2}, 3.0);
  EXPECT_LT(finite_diff_check([](const TD& v) { return sum(mul(v, v)); }, x), 1e-8);
  TD far({1, 1, 2, 2}, {2.0, -3.0, 1.5, -0.7});
  EXPECT_LT(finite_diff_check([](const TD& v) { return sum(relu(v)); }, far), 1e-8);
}

TEST(FiniteDiffCheck, FlagsWrongBackwardAndCountsKinks) {
  // y = x^2 with a backward that forgets the factor 2.
  auto bad_square = [](const TD& v) {
    mslka::Buffer<double> out(v.values());
    for (auto& e : out) e *= e;
    return mslka::detail::make_result<double>(v.shape(), out, {v.node()}, [v](auto& node) {
      auto& g = v.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i] * v.values()[i];
    });
  };
  TD x({1, 1, 2, 2}, {0.5, -1.0, 2.0, 1.5});
  EXPECT_GT(finite_diff_check([&](const TD& v) { return sum(bad_square(v)); }, x), 0.4);

  // 3e-4 from the relu kink is resolved by a smaller step; 1e-9 never is.
  TD near_kink({1, 1, 1, 3}, {3e-4, 1e-9, 1.0});
  auto r = finite_diff_report([&] { return sum(relu(near_kink)); }, {near_kink});
  EXPECT_EQ(r.skipped, 1u);
  EXPECT_EQ(r.checked, 2u);
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(Gradients, LeaveStoredGradientsUntouched) {
  TD w({1, 1, 1, 2}, {1.0, 2.0});
  TD x({1, 1, 1, 2}, {3.0, 4.0});
  w.set_requires_grad();
  x.set_requires_grad();
  sum(mul(w, x)).backward();
  const std::vector<double> stored(w.grad().begin(), w.grad().end());
  const auto g = gradients(sum(mul(mul(w, x), x)), {x});
  EXPECT_EQ(g[0], (std::vector<double>{6.0, 16.0}));
  EXPECT_EQ(std::vector<double>(w.grad().begin(), w.grad().end()), stored);
}

TEST(NoGrad, RecordsNothing) {
  TD x({1, 1, 2, 2}, 1.0);
  x.set_requires_grad();
  NoGradGuard guard;
  auto y = sum(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Determinism, RepeatedForwardIsBitIdentical) {
  Rng r1(77), r2(77);
  auto x1 = random_uniform<float>({2, 4, 16, 16}, r1);
  auto x2 = random_uniform<float>({2, 4, 16, 16}, r2);
  auto w = Tensor<float>::ones({8, 4, 3, 3});
  auto a = conv2d(x1, w, ConvSpec::same(4, 8, 3));
  auto b = conv2d(x2, w, ConvSpec::same(4, 8, 3));
  EXPECT_EQ(a.values(), b.values());
}
