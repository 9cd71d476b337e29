#include <cmath>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "viewsynth/checkpoint.hpp"
#include "viewsynth/ops.hpp"
#include "viewsynth/optim.hpp"

using namespace viewsynth;
using viewsynth::testing::check_gradient;
using viewsynth::testing::random_readout;
using viewsynth::testing::random_tensor;

TEST(Conv2d, OneByOneIdentityKernelCopiesInput) {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({5, 4, 3}, rng, false);
  std::vector<double> k(9, 0.0);
  for (int c = 0; c < 3; ++c) k[static_cast<std::size_t>(c * 3 + c)] = 1.0;
  Tensor kernel = Tensor::from_values({1, 1, 3, 3}, k);
  Tensor y = conv2d(x, kernel, 1, Padding::Same);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], x[i]);
}

TEST(Conv2d, OnesKernelOnOnesInputValid) {
  Tensor x = Tensor::from_values({5, 5, 1}, std::vector<double>(25, 1.0));
  Tensor k = Tensor::from_values({3, 3, 1, 1}, std::vector<double>(9, 1.0));
  Tensor y = conv2d(x, k, 1, Padding::Valid);
  ASSERT_EQ(y.shape(), (Shape{3, 3, 1}));
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 9.0);
}

TEST(Conv2d, StridedSameShapes) {
  std::mt19937_64 rng(2);
  Tensor k = random_tensor({3, 3, 2, 4}, rng, false);
  EXPECT_EQ(conv2d(random_tensor({7, 7, 2}, rng, false), k, 1, Padding::Same).shape(),
            (Shape{7, 7, 4}));
  EXPECT_EQ(conv2d(random_tensor({7, 9, 2}, rng, false), k, 2, Padding::Same).shape(),
            (Shape{4, 5, 4}));
  EXPECT_EQ(conv2d(random_tensor({64, 64, 2}, rng, false), k, 2, Padding::Same).shape(),
            (Shape{32, 32, 4}));
}

TEST(Conv2d, ChannelMismatchIsShapeError) {
  std::mt19937_64 rng(3);
  EXPECT_THROW(conv2d(random_tensor({4, 4, 3}, rng), random_tensor({3, 3, 2, 1}, rng), 1,
                      Padding::Same),
               ShapeError);
  EXPECT_THROW(conv2d(random_tensor({4, 4, 2}, rng), random_tensor({2, 2, 2, 1}, rng), 1,
                      Padding::Same),
               ShapeError);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  for (std::size_t stride : {1u, 2u}) {
    Tensor x = random_tensor({7, 7, 2}, rng);
    Tensor k = random_tensor({3, 3, 2, 4}, rng);
    auto fn = [&] { return random_readout(conv2d(x, k, stride, Padding::Same), 99); };
    const auto gx = check_gradient(fn, x);
    const auto gk = check_gradient(fn, k);
    EXPECT_LE(gx.max_abs, 1e-3);
    EXPECT_LE(gk.max_abs, 1e-3);
    EXPECT_LE(gx.relative, 1e-3);
    EXPECT_LE(gk.relative, 1e-3);
  }
}

TEST(Linear, IdentityAndBias) {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({3, 4}, rng, false);
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[static_cast<std::size_t>(i * 5)] = 1.0;
  Tensor y = linear(x, Tensor::from_values({4, 4}, eye), Tensor::zeros({4}));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], x[i]);

  Tensor b = Tensor::from_values({2}, {0.25, -3.0});
  Tensor z = linear(x, Tensor::zeros({4, 2}), b);
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_DOUBLE_EQ(z[r * 2], 0.25);
    EXPECT_DOUBLE_EQ(z[r * 2 + 1], -3.0);
  }
  EXPECT_THROW(linear(x, Tensor::zeros({3, 2}), b), ShapeError);
}

TEST(Linear, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({2, 3, 5}, rng);
  Tensor w = random_tensor({5, 4}, rng);
  Tensor b = random_tensor({4}, rng);
  auto fn = [&] { return random_readout(linear(x, w, b), 7); };
  for (Tensor* t : {&x, &w, &b}) {
    const auto r = check_gradient(fn, *t);
    EXPECT_LE(r.max_abs, 1e-3);
    EXPECT_LE(r.relative, 1e-3);
  }
}

TEST(Elementwise, SpotValues) {
  Tensor x = Tensor::from_values({3}, {-1.0, 0.0, 2.0});
  EXPECT_DOUBLE_EQ(relu(x)[0], 0.0);
  EXPECT_DOUBLE_EQ(relu(x)[2], 2.0);
  EXPECT_DOUBLE_EQ(sigmoid(x)[1], 0.5);
  EXPECT_DOUBLE_EQ(square(x)[2], 4.0);
  EXPECT_DOUBLE_EQ(scale(x, -0.5)[2], -1.0);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(8);
  Tensor x = random_tensor({4, 6}, rng);
  for (auto fn_kind : {Elementwise::Relu, Elementwise::Sigmoid, Elementwise::Square,
                       Elementwise::Scale}) {
    auto fn = [&] { return random_readout(elementwise(x, fn_kind, 1.7), 11); };
    const auto r = check_gradient(fn, x);
    EXPECT_LE(r.relative, 1e-3);
  }
}

TEST(L2Normalize, SpotValuesAndZeroFiber) {
  Tensor x = Tensor::from_values({2, 2}, {3.0, 4.0, 0.0, 0.0});
  Tensor y = l2_normalize(x, 1e-8);
  EXPECT_NEAR(y[0], 0.6, 1e-15);
  EXPECT_NEAR(y[1], 0.8, 1e-15);
  EXPECT_EQ(y[2], 0.0);
  EXPECT_EQ(y[3], 0.0);
  EXPECT_FALSE(std::isnan(y[2]));
}

TEST(L2Normalize, UnitNormProperty) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor({3, 3, 7}, rng, false, -5.0, 5.0);
    Tensor y = l2_normalize(x);
    for (std::size_t p = 0; p < 9; ++p) {
      double ss = 0.0;
      for (std::size_t c = 0; c < 7; ++c) ss += y[p * 7 + c] * y[p * 7 + c];
      EXPECT_NEAR(std::sqrt(ss), 1.0, 1e-6);
    }
  }
}

TEST(L2Normalize, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  Tensor x = random_tensor({3, 4, 5}, rng);
  const auto r = check_gradient([&] { return random_readout(l2_normalize(x), 12); }, x);
  EXPECT_LE(r.max_abs, 1e-3);
  EXPECT_LE(r.relative, 1e-3);
}

TEST(GlobalAveragePool, ConstantAndSingleEntry) {
  Tensor c = Tensor::from_values({3, 4, 2}, std::vector<double>(24, 2.5));
  Tensor g = global_average_pool(c);
  EXPECT_DOUBLE_EQ(g[0], 2.5);
  EXPECT_DOUBLE_EQ(g[1], 2.5);

  std::vector<double> v(12, 0.0);
  v[7] = 6.0;
  Tensor s = global_average_pool(Tensor::from_values({3, 4, 1}, v));
  EXPECT_DOUBLE_EQ(s[0], 6.0 / 12.0);
}

TEST(GlobalAveragePool, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  Tensor x = random_tensor({3, 5, 4}, rng);
  const auto r = check_gradient([&] { return random_readout(global_average_pool(x), 14); }, x);
  EXPECT_LE(r.relative, 1e-3);
}

TEST(BilinearSample, IdentityGridCopiesInput) {
  std::mt19937_64 rng(15);
  Tensor x = random_tensor({4, 6, 3}, rng, false);
  Tensor y = bilinear_sample(x, MappingGrid::identity(4, 6));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], x[i]);
}

TEST(BilinearSample, MidpointAveragesNeighbours) {
  Tensor x = Tensor::from_values({1, 2, 1}, {2.0, 5.0});
  MappingGrid g(1, 1, 1, 2);
  g.coords[0] = {0.5, 1.0};  // halfway between the two cell centers
  g.valid[0] = 1;
  EXPECT_DOUBLE_EQ(bilinear_sample(x, g)[0], 3.5);
}

TEST(BilinearSample, InvalidCellsAreZero) {
  Tensor x = Tensor::from_values({2, 2, 1}, {1.0, 2.0, 3.0, 4.0});
  MappingGrid g = MappingGrid::identity(2, 2);
  g.valid[3] = 0;
  Tensor y = bilinear_sample(x, g);
  EXPECT_DOUBLE_EQ(y[0], 1.0);
  EXPECT_DOUBLE_EQ(y[3], 0.0);
}

TEST(BilinearSample, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(16);
  Tensor x = random_tensor({5, 6, 3}, rng);
  MappingGrid g(4, 4, 5, 6);
  std::uniform_real_distribution<double> ur(0.0, 5.0), uc(0.0, 6.0);
  for (std::size_t p = 0; p < 16; ++p) {
    g.coords[p] = {ur(rng), uc(rng)};
    g.valid[p] = p % 5 != 0;
  }
  const auto r = check_gradient([&] { return random_readout(bilinear_sample(x, g), 17); }, x);
  EXPECT_LE(r.max_abs, 1e-3);
  EXPECT_LE(r.relative, 1e-3);
}

TEST(Graph, GradientOfSumIsSumOfGradients) {
  std::mt19937_64 rng(18);
  Tensor x = random_tensor({3, 3, 2}, rng);
  Tensor k = random_tensor({3, 3, 2, 2}, rng);
  auto f1 = [&] { return random_readout(conv2d(x, k, 1, Padding::Same), 1); };
  auto f2 = [&] { return random_readout(l2_normalize(x), 2); };

  f1().backward();
  std::vector<double> g1(x.grad().begin(), x.grad().end());
  x.zero_grad();
  k.zero_grad();
  f2().backward();
  std::vector<double> g2(x.grad().begin(), x.grad().end());
  x.zero_grad();
  k.zero_grad();
  add(f1(), f2()).backward();
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(x.grad()[i], g1[i] + g2[i], 1e-12);
}

TEST(Graph, SharedSubexpressionAccumulates) {
  Tensor x = Tensor::from_values({1}, {3.0}, true);
  Tensor y = square(x);
  sum(add(y, y)).backward();  // d/dx 2x^2 = 4x
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Graph, NoGradGuardSkipsRecording) {
  Tensor x = Tensor::from_values({2}, {1.0, 2.0}, true);
  NoGradGuard guard;
  Tensor y = sum(square(x));
  EXPECT_FALSE(y.requires_grad());
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  ParameterSet ps;
  ps.add("w", {3}, {1.0, -2.0, 0.5});
  sum(scale(ps.at("w").tensor, 0.0)).backward();
  adam_step(ps, {});
  EXPECT_DOUBLE_EQ(ps.at("w").tensor[0], 1.0);
  EXPECT_DOUBLE_EQ(ps.at("w").tensor[1], -2.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParameterSet ps;
  ps.add("x", {1}, {0.0});
  sum(ps.at("x").tensor).backward();  // gradient 1
  adam_step(ps, {0.1, 0.9, 0.999, 1e-8});
  // bias-corrected update lr * g / (sqrt(g^2) + eps)
  EXPECT_NEAR(ps.at("x").tensor[0], -0.1 * 1.0 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, QuadraticDecreasesMonotonically) {
  ParameterSet ps;
  ps.add("x", {1}, {1.0});
  double prev = 1.0;
  for (int i = 0; i < 10; ++i) {
    ps.zero_grad();
    sum(square(ps.at("x").tensor)).backward();
    adam_step(ps, {0.05, 0.9, 0.999, 1e-8});
    const double f = ps.at("x").tensor[0] * ps.at("x").tensor[0];
    EXPECT_LT(f, prev);
    prev = f;
  }
}

TEST(Adam, DeterministicForIdenticalInputs) {
  auto run = [] {
    ParameterSet ps;
    std::mt19937_64 rng(3);
    ps.add_he("w", {4, 4}, 4, rng);
    for (int i = 0; i < 5; ++i) {
      ps.zero_grad();
      sum(square(ps.at("w").tensor)).backward();
      adam_step(ps, {});
    }
    return std::vector<double>(ps.at("w").tensor.values().begin(), ps.at("w").tensor.values().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(ParameterSet, DuplicateNamesRejected) {
  ParameterSet ps;
  ps.add_zeros("a", {2});
  EXPECT_THROW(ps.add_zeros("a", {2}), ConfigError);
}

TEST(Checkpoint, RoundTripsValuesAndMoments) {
  std::mt19937_64 rng(21);
  ParameterSet a;
  a.add_he("conv.kernel", {3, 3, 1, 2}, 9, rng);
  a.add_zeros("conv.bias", {2});
  a.zero_grad();
  sum(square(a.at("conv.kernel").tensor)).backward();
  adam_step(a, {});

  const auto path = std::filesystem::temp_directory_path() / "viewsynth_ckpt_test.bin";
  save_checkpoint(a, path);

  std::mt19937_64 other(99);
  ParameterSet b;
  b.add_he("conv.kernel", {3, 3, 1, 2}, 9, other);
  b.add_zeros("conv.bias", {2});
  load_checkpoint(b, path);
  for (const auto& name : {"conv.kernel", "conv.bias"}) {
    const auto& pa = a.at(name);
    const auto& pb = b.at(name);
    EXPECT_EQ(pa.step, pb.step);
    EXPECT_TRUE(std::equal(pa.tensor.values().begin(), pa.tensor.values().end(),
                           pb.tensor.values().begin()));
    EXPECT_EQ(pa.first_moment, pb.first_moment);
    EXPECT_EQ(pa.second_moment, pb.second_moment);
  }

  ParameterSet wrong;
  wrong.add_zeros("conv.kernel", {3, 3, 1, 3});
  wrong.add_zeros("conv.bias", {2});
  EXPECT_THROW(load_checkpoint(wrong, path), FormatError);
  std::filesystem::remove(path);
}
