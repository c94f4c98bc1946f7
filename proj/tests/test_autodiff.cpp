#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "volsynth/adam.hpp"
#include "volsynth/ops.hpp"

using namespace volsynth;
using volsynth::gradcheck::gradient_relative_error;

namespace {

// Direct nested-loop 2-D convolution, single sample.
std::vector<double> direct_conv2d(const Tensor& x, const Tensor& w, std::size_t s, std::size_t p) {
  const std::size_t ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t co = w.dim(0), k = w.dim(2);
  const std::size_t Ho = (H + 2 * p - k) / s + 1, Wo = (W + 2 * p - k) / s + 1;
  std::vector<double> out(co * Ho * Wo, 0.0);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        double acc = 0;
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t a = 0; a < k; ++a)
            for (std::size_t b = 0; b < k; ++b) {
              const long yy = static_cast<long>(i * s + a) - static_cast<long>(p);
              const long xx = static_cast<long>(j * s + b) - static_cast<long>(p);
              if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
              acc += w.data()[((o * ci + c) * k + a) * k + b] * x.data()[(c * H + yy) * W + xx];
            }
        out[(o * Ho + i) * Wo + j] = acc;
      }
  return out;
}

// Direct scatter-accumulate 3-D transpose convolution with cropping, single sample.
std::vector<double> direct_conv_transpose3d(const Tensor& x, const Tensor& w, std::size_t s, std::size_t p) {
  const std::size_t ci = x.dim(1), D = x.dim(2), co = w.dim(1), k = w.dim(2);
  const std::size_t full = s * (D - 1) + k, out_ext = full - 2 * p;
  std::vector<double> big(co * full * full * full, 0.0);
  for (std::size_t c = 0; c < ci; ++c)
    for (std::size_t z = 0; z < D; ++z)
      for (std::size_t y = 0; y < D; ++y)
        for (std::size_t xx = 0; xx < D; ++xx) {
          const double v = x.data()[((c * D + z) * D + y) * D + xx];
          for (std::size_t o = 0; o < co; ++o)
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t b = 0; b < k; ++b)
                for (std::size_t e = 0; e < k; ++e)
                  big[((o * full + z * s + a) * full + y * s + b) * full + xx * s + e] +=
                      v * w.data()[(((c * co + o) * k + a) * k + b) * k + e];
        }
  std::vector<double> out;
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t a = 0; a < out_ext; ++a)
      for (std::size_t b = 0; b < out_ext; ++b)
        for (std::size_t e = 0; e < out_ext; ++e)
          out.push_back(big[((o * full + a + p) * full + b + p) * full + e + p]);
  return out;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

}  // namespace

TEST(Conv2d, DiscriminatorLayerShape) {
  std::mt19937_64 rng(1);
  auto x = Tensor::randn({2, 3, 64, 64}, rng);
  auto w = Tensor::randn({64, 3, 4, 4}, rng);
  auto y = conv(x, w, 2, 1);
  EXPECT_EQ(y.shape(), (Shape{2, 64, 32, 32}));
}

TEST(Conv2d, ZeroKernelGivesZeros) {
  std::mt19937_64 rng(2);
  auto x = Tensor::randn({1, 1, 4, 4}, rng);
  auto y = add_bias(conv(x, Tensor::zeros({1, 1, 4, 4}), 2, 0), Tensor::zeros({1}));
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 0.0);
}

TEST(Conv2d, MatchesDirectSummation) {
  std::mt19937_64 rng(3);
  for (auto [k, s, p] : {std::tuple{3u, 1u, 0u}, {4u, 2u, 1u}, {3u, 2u, 2u}}) {
    auto x = Tensor::randn({1, 2, 7, 5}, rng);
    auto w = Tensor::randn({3, 2, k, k}, rng);
    auto y = conv(x, w, s, p);
    const auto ref = direct_conv2d(x, w, s, p);
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-12);
  }
  auto x = Tensor::randn({1, 1, 5, 5}, rng);
  auto w = Tensor::randn({1, 1, 3, 3}, rng);
  const auto ref = direct_conv2d(x, w, 1, 0);
  auto y = conv(x, w, 1, 0);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-12);
}

TEST(Conv2d, KernelLargerThanInputIsDimensionError) {
  EXPECT_THROW(conv(Tensor::zeros({1, 1, 3, 3}), Tensor::zeros({1, 1, 4, 4}), 1, 0), DimensionError);
  EXPECT_THROW(conv(Tensor::zeros({1, 2, 8, 8}), Tensor::zeros({1, 3, 4, 4}), 1, 0), DimensionError);
}

TEST(ConvTranspose3d, TableOneShapes) {
  std::mt19937_64 rng(4);
  auto z = Tensor::randn({1, 2, 4, 4, 4}, rng);
  EXPECT_EQ(conv_transpose(z, Tensor::randn({2, 3, 4, 4, 4}, rng), 2, 2).shape(), (Shape{1, 3, 6, 6, 6}));
  auto h = Tensor::randn({1, 1, 34, 34, 34}, rng);
  EXPECT_EQ(conv_transpose(h, Tensor::randn({1, 2, 4, 4, 4}, rng), 2, 3).shape(), (Shape{1, 2, 64, 64, 64}));
}

TEST(ConvTranspose3d, InformationDensityOfOnes) {
  auto y = conv_transpose(Tensor::ones({1, 1, 3, 3}), Tensor::ones({1, 1, 4, 4}), 2, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 8, 8}));
  EXPECT_EQ(y.data()[3 * 8 + 3], 4.0);
  EXPECT_EQ(y.data()[0], 1.0);
  EXPECT_EQ(y.data()[7], 1.0);
  EXPECT_EQ(y.data()[63], 1.0);
}

TEST(ConvTranspose3d, MatchesScatterDefinition) {
  std::mt19937_64 rng(5);
  for (auto [k, s, p] : {std::tuple{4u, 2u, 2u}, {4u, 2u, 0u}, {3u, 3u, 1u}, {4u, 3u, 1u}}) {
    auto x = Tensor::randn({1, 2, 3, 3, 3}, rng);
    auto w = Tensor::randn({2, 2, k, k, k}, rng);
    auto y = conv_transpose(x, w, s, p);
    const auto ref = direct_conv_transpose3d(x, w, s, p);
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-12);
  }
}

TEST(ConvTranspose3d, OverCroppingIsDimensionError) {
  EXPECT_THROW(conv_transpose(Tensor::ones({1, 1, 1, 1, 1}), Tensor::ones({1, 1, 2, 2, 2}), 1, 1), DimensionError);
}

TEST(ConvShapeLaws, RandomSpecs) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::size_t> kd(1, 5), sd(1, 3), pd(0, 2), ld(1, 9);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t k = kd(rng), s = sd(rng), p = pd(rng), l = ld(rng);
    const long long t = static_cast<long long>(s * (l - 1) + k) - 2 * static_cast<long long>(p);
    if (t > 0) {
      auto y = conv_transpose(Tensor::ones({1, 1, l, l, l}), Tensor::ones({1, 1, k, k, k}), s, p);
      EXPECT_EQ(y.dim(2), static_cast<std::size_t>(t));
    }
    if (l + 2 * p >= k) {
      auto y = conv(Tensor::ones({1, 1, l, l}), Tensor::ones({1, 1, k, k}), s, p);
      EXPECT_EQ(y.dim(2), (l + 2 * p - k) / s + 1);
    }
  }
}

TEST(Adjointness, ConvAndTransposeConv) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t k = 2 + trial % 3, s = 1 + trial % 2, p = trial % 2;
    auto x = Tensor::randn({2, 3, 9, 8, 7}, rng);
    auto w = Tensor::randn({4, 3, k, k, k}, rng);
    auto cx = conv(x, w, s, p);
    auto y = Tensor::randn(cx.shape(), rng);
    // conv maps 3 -> 4 channels; the transpose with the same weights maps 4 -> 3.
    ConvPlan plan;
    plan.geom = kernels::ConvGeometry::from_input(2, 3, 4, {9, 8, 7}, {k, k, k}, {s, s, s}, {p, p, p});
    auto ty = conv_adjoint_data(y, w, plan);
    EXPECT_NEAR(dot(cx, y), dot(x, ty), 1e-10 * std::max(1.0, std::abs(dot(cx, y))));
  }
}

TEST(Activations, SoftmaxOfEqualValuesIsUniform) {
  auto y = softmax_channels(Tensor({1, 3, 2, 2}, std::vector<double>(12, 0.7)));
  for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Activations, SoftmaxIsSimplex) {
  std::mt19937_64 rng(8);
  auto y = softmax_channels(Tensor::randn({2, 4, 3, 3, 3}, rng, 5.0));
  const std::size_t inner = 27;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t j = 0; j < inner; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < 4; ++c) {
        const double v = y.data()[(n * 4 + c) * inner + j];
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

TEST(Activations, LeakyReluDefinition) {
  auto y = leaky_relu(Tensor({4}, {-2.0, -0.5, 0.0, 3.0}), 0.2);
  EXPECT_DOUBLE_EQ(y.data()[0], -0.4);
  EXPECT_DOUBLE_EQ(y.data()[1], -0.1);
  EXPECT_DOUBLE_EQ(y.data()[2], 0.0);
  EXPECT_DOUBLE_EQ(y.data()[3], 3.0);
}

TEST(Gradients, SoftmaxMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  auto x = Tensor::randn({1, 3, 2, 2}, rng);
  auto wts = Tensor::randn({1, 3, 2, 2}, rng);
  auto f = [&](const std::vector<Tensor>& in) { return sum(mul(softmax_channels(in[0]), wts)); };
  EXPECT_LT(gradient_relative_error(f, {x}), 1e-6);
}

TEST(Gradients, SumGivesOnes) {
  std::mt19937_64 rng(10);
  Tensor x(Shape{3, 4}, Tensor::randn({3, 4}, rng).data(), true);
  auto g = grad(sum(x), {x});
  for (double v : g[0].data()) EXPECT_EQ(v, 1.0);
}

TEST(Gradients, EveryOpMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const auto positive = [&](Shape s) {
    auto t = Tensor::uniform(std::move(s), rng, 0.5, 2.0);
    return t;
  };
  std::vector<std::pair<const char*, std::function<double()>>> cases;
  int trials = 0;
  for (int rep = 0; rep < 8; ++rep) {
    auto a = Tensor::randn({2, 3, 3, 3}, rng), b = Tensor::randn({2, 3, 3, 3}, rng);
    auto c = Tensor::randn({2, 3, 3, 3}, rng);
    auto pos = positive({2, 3, 3, 3});
    auto bias = Tensor::randn({3}, rng);
    auto v = Tensor::randn({2}, rng);
    const auto check = [&](const char* name, const gradcheck::ScalarFn& f, std::vector<Tensor> in) {
      ++trials;
      EXPECT_LT(gradient_relative_error(f, in), 1e-4) << name;
    };
    // Weighted sums keep the gradients non-trivial.
    check("add", [&](auto& in) { return sum(mul(add(in[0], in[1]), c)); }, {a, b});
    check("sub", [&](auto& in) { return sum(mul(sub(in[0], in[1]), c)); }, {a, b});
    check("mul", [&](auto& in) { return sum(mul(mul(in[0], in[1]), c)); }, {a, b});
    check("div", [&](auto& in) { return sum(mul(div(in[0], in[1]), c)); }, {a, pos});
    check("scale", [&](auto& in) { return sum(mul(scale(in[0], 1.7), c)); }, {a});
    check("sqrt", [&](auto& in) { return sum(mul(sqrt(in[0]), c)); }, {pos});
    check("leaky_relu", [&](auto& in) { return sum(mul(leaky_relu(in[0], 0.2), c)); }, {a});
    check("softmax", [&](auto& in) { return sum(mul(softmax_channels(in[0]), c)); }, {a});
    check("sum_channels", [&](auto& in) { return sum(square(sum_channels(in[0]))); }, {a});
    check("bias", [&](auto& in) { return sum(mul(add_bias(in[0], in[1]), c)); }, {a, bias});
    check("per_sample", [&](auto& in) { return sum(mul(broadcast_per_sample(in[1], a.shape()), mul(in[0], c))); },
          {a, v});
    check("norm", [&](auto& in) { return sum(mul(norm_per_sample(in[0]), v)); }, {a});
    check("permute", [&](auto& in) { return sum(mul(permute(in[0], {2, 0, 3, 1}), permute(c, {2, 0, 3, 1}))); },
          {a});
    check("select", [&](auto& in) { return sum(square(select_batch(in[0], {1, 0, 1}))); }, {a});
    check("reshape", [&](auto& in) { return sum(mul(reshape(in[0], {6, 9}), reshape(c, {6, 9}))); }, {a});
    auto w2 = Tensor::randn({2, 3, 2, 2}, rng);
    check("conv2d", [&](auto& in) { return sum(square(conv(in[0], in[1], 1, 1))); }, {a, w2});
    auto w3 = Tensor::randn({3, 2, 2, 2}, rng);
    check("conv_transpose2d", [&](auto& in) { return sum(square(conv_transpose(in[0], in[1], 2, 1))); }, {a, w3});
    auto x3 = Tensor::randn({1, 2, 3, 3, 3}, rng);
    auto w33 = Tensor::randn({2, 2, 2, 2, 2}, rng);
    check("conv_transpose3d", [&](auto& in) { return sum(square(conv_transpose(in[0], in[1], 2, 1))); }, {x3, w33});
    check("conv3d", [&](auto& in) { return sum(square(conv(in[0], in[1], 1, 0))); }, {x3, w33});
  }
  EXPECT_GE(trials, 100);
}

TEST(Gradients, ConvGradientsAreDifferentiable) {
  // Second order through conv, its transpose and its weight gradient.
  std::mt19937_64 rng(12);
  auto x = Tensor::randn({2, 2, 5, 5}, rng);
  auto w = Tensor::randn({3, 2, 3, 3}, rng);
  auto f = [](const std::vector<Tensor>& in) {
    GradModeGuard on(true);
    Tensor xx = in[0].requires_grad() ? in[0] : Tensor(in[0].shape(), in[0].data(), true);
    Tensor ww = in[1].requires_grad() ? in[1] : Tensor(in[1].shape(), in[1].data(), true);
    auto y = sum(square(leaky_relu(conv(xx, ww, 2, 1), 0.2)));
    auto g = grad(y, {xx, ww}, {.create_graph = true});
    return add(sum(square(g[0])), sum(square(g[1])));
  };
  EXPECT_LT(gradient_relative_error(f, {x, w}), 1e-4);
}

TEST(Gradients, ReverseOverReverseSquare) {
  std::mt19937_64 rng(13);
  Tensor x(Shape{5}, Tensor::randn({5}, rng).data(), true);
  auto g = grad(sum(square(x)), {x}, {.create_graph = true});
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(g[0].data()[i], 2 * x.data()[i], 1e-15);
  auto h = grad(sum(g[0]), {x}, {.create_graph = true});
  for (double v : h[0].data()) EXPECT_EQ(v, 2.0);
  // Third order of sum(x^3)/6 is 1 everywhere.
  auto g1 = grad(scale(sum(mul(x, square(x))), 1.0 / 6.0), {x}, {.create_graph = true});
  auto g2 = grad(sum(g1[0]), {x}, {.create_graph = true});
  auto g3 = grad(sum(g2[0]), {x});
  for (double v : g3[0].data()) EXPECT_NEAR(v, 1.0, 1e-14);
}

TEST(Gradients, UnitLinearDiscriminatorHasZeroPenalty) {
  // D(k) = <u, k> with ||u|| = 1: the input gradient is u, so (||grad|| - 1)^2 = 0
  // and its gradient with respect to u vanishes.
  Tensor u(Shape{1, 1, 2, 2}, {0.5, -0.5, 0.5, 0.5}, true);
  Tensor k(Shape{1, 1, 2, 2}, {0.3, 1.2, -0.7, 2.0}, true);
  auto d = sum(conv(k, u, 1, 0));
  auto gk = grad(d, {k}, {.create_graph = true});
  auto penalty = sum(square(add_scalar(norm_per_sample(gk[0]), -1.0)));
  EXPECT_NEAR(penalty.item(), 0.0, 1e-15);
  auto gu = grad(penalty, {u});
  for (double v : gu[0].data()) EXPECT_NEAR(v, 0.0, 1e-15);
}

TEST(Gradients, PenaltyOfTwoLayerDiscriminatorMatchesFiniteDifferences) {
  std::mt19937_64 rng(14);
  auto k = Tensor::randn({3, 2, 8, 8}, rng);
  auto w1 = Tensor::randn({4, 2, 4, 4}, rng, 0.3);
  auto w2 = Tensor::randn({1, 4, 4, 4}, rng, 0.3);
  auto penalty = [&](const std::vector<Tensor>& w) {
    Tensor kk(k.shape(), k.data(), true);
    GradModeGuard on(true);
    auto d = sum(conv(leaky_relu(conv(kk, w[0], 2, 1), 0.2), w[1], 2, 0));
    auto gk = grad(d, {kk}, {.create_graph = true});
    return mean(square(add_scalar(norm_per_sample(gk[0]), -1.0)));
  };
  EXPECT_LT(gradient_relative_error(penalty, {w1, w2}), 1e-4);
}

TEST(Gradients, UsageErrors) {
  Tensor x(Shape{3}, {1.0, 2.0, 3.0}, true);
  Tensor c(Shape{3}, {1.0, 2.0, 3.0});
  EXPECT_THROW(grad(sum(x), {c}), UsageError);
  EXPECT_THROW(grad(mul(x, x), {x}), UsageError);
}

TEST(Gradients, ConstantsReceiveNoGradientAndUnusedParamsGetZeros) {
  Tensor x(Shape{2}, {1.0, 2.0}, true);
  Tensor unused(Shape{2}, {5.0, 6.0}, true);
  Tensor c(Shape{2}, {3.0, 4.0});
  auto g = grad(sum(mul(x, c)), {x, unused});
  EXPECT_EQ(g[0].data(), (std::vector<double>{3.0, 4.0}));
  EXPECT_EQ(g[1].data(), (std::vector<double>{0.0, 0.0}));
  EXPECT_FALSE(c.requires_grad());
}

TEST(Numerics, NonFiniteIsAnError) {
  Tensor a(Shape{2}, {1.0, 1.0});
  Tensor b(Shape{2}, {0.0, 1.0});
  EXPECT_THROW(div(a, b), NumericError);
  EXPECT_THROW(sqrt(Tensor(Shape{1}, {-1.0})), NumericError);
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  std::vector<Tensor> params{Tensor(Shape{3}, {1.0, -2.0, 3.0}, true)};
  auto state = AdamState<double>::for_params(params);
  adam_step(params, {Tensor::zeros({3})}, state, {.lr = 0.1});
  EXPECT_EQ(params[0].data(), (std::vector<double>{1.0, -2.0, 3.0}));
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<Tensor> params{Tensor(Shape{1}, {0.0}, true)};
  auto state = AdamState<double>::for_params(params);
  const AdamParams hp{.lr = 0.1, .beta1 = 0.9, .beta2 = 0.99, .eps = 1e-8};
  adam_step(params, {Tensor::ones({1})}, state, hp);
  EXPECT_NEAR(params[0].item(), -0.1 / (1 + 1e-8), 1e-15);
}

TEST(Adam, QuadraticDescentMatchesScalarReference) {
  const AdamParams hp{.lr = 0.1, .beta1 = 0.9, .beta2 = 0.99, .eps = 1e-8};
  std::vector<Tensor> params{Tensor(Shape{1}, {1.0}, true)};
  auto state = AdamState<double>::for_params(params);
  double w = 1.0, m = 0, v = 0, prev = 1.0;
  for (int t = 1; t <= 10; ++t) {
    auto g = grad(sum(square(params[0])), params);
    adam_step(params, g, state, hp);
    const double gs = 2 * w;
    m = 0.9 * m + 0.1 * gs;
    v = 0.99 * v + 0.01 * gs * gs;
    w -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.99, t))) + 1e-8);
    EXPECT_NEAR(params[0].item(), w, 1e-14);
    EXPECT_LT(std::abs(params[0].item()), prev);
    prev = std::abs(params[0].item());
  }
}
