#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "checks.hpp"
#include "tdsr/depthsim.hpp"

using namespace tdsr;
using namespace tdsr::depthsim;

namespace {

/// Textbook gradient noise: sum over the four cell corners of
/// fade-weighted dot products, with gradients drawn the same way.
Grid<double> reference_perlin(int w, int h, int lx, int ly, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> gx((lx + 1) * (ly + 1)), gy(gx.size());
  for (std::size_t i = 0; i < gx.size(); ++i) {
    const double a = 2.0 * std::numbers::pi * rng.uniform();
    gx[i] = std::cos(a);
    gy[i] = std::sin(a);
  }
  auto s = [](double t) { return 6 * std::pow(t, 5) - 15 * std::pow(t, 4) + 10 * std::pow(t, 3); };
  Grid<double> g(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double u = (x + 0.5) * lx / w, v = (y + 0.5) * ly / h;
      const int i0 = static_cast<int>(u), j0 = static_cast<int>(v);
      double acc = 0.0;
      for (int dj = 0; dj <= 1; ++dj)
        for (int di = 0; di <= 1; ++di) {
          const int k = (j0 + dj) * (lx + 1) + i0 + di;
          const double ox = u - (i0 + di), oy = v - (j0 + dj);
          const double wx = di ? s(u - i0) : 1.0 - s(u - i0);
          const double wy = dj ? s(v - j0) : 1.0 - s(v - j0);
          acc += wx * wy * (gx[k] * ox + gy[k] * oy);
        }
      g.at(x, y) = acc;
    }
  const auto [lo, hi] = std::minmax_element(g.values.begin(), g.values.end());
  const double a = *lo, b = *hi;
  for (auto& e : g.values) e = (e - a) / (b - a);
  return g;
}

}  // namespace

TEST(Perlin, ZeroAtLatticePoints) {
  const auto grads = lattice_gradients(4, 3, 11);
  for (int j = 0; j <= 3; ++j)
    for (int i = 0; i <= 4; ++i) EXPECT_EQ(lattice_noise(grads, 4, 3, i, j), 0.0);
}

TEST(Perlin, Deterministic) {
  EXPECT_EQ(generate_perlin(64, 64, 4, 4, 7).values, generate_perlin(64, 64, 4, 4, 7).values);
}

TEST(Perlin, MatchesReferenceImplementation) {
  const auto f = generate_perlin(64, 64, 4, 4, 7);
  const auto ref = reference_perlin(64, 64, 4, 4, 7);
  EXPECT_EQ(*std::min_element(f.values.values.begin(), f.values.values.end()), 0.0);
  EXPECT_EQ(*std::max_element(f.values.values.begin(), f.values.values.end()), 1.0);
  for (std::size_t i = 0; i < ref.values.size(); ++i)
    ASSERT_NEAR(f.values.values[i], ref.values[i], 1e-12) << i;
  for (auto [lx, ly] : {std::pair{1, 1}, {2, 8}, {16, 4}, {32, 32}}) {
    const auto g = generate_perlin(32, 32, lx, ly, 99);
    const auto r = reference_perlin(32, 32, lx, ly, 99);
    for (std::size_t i = 0; i < r.values.size(); ++i) ASSERT_NEAR(g.values.values[i], r.values[i], 1e-12);
  }
}

TEST(Perlin, RejectsBadLattice) {
  EXPECT_THROW(generate_perlin(10, 10, 3, 3, 0), ArgumentError);
  EXPECT_THROW(generate_perlin(1, 10, 1, 1, 0), ArgumentError);
  EXPECT_THROW(generate_perlin(8, 8, 0, 1, 0), ArgumentError);
}

TEST(Perlin, SampledLatticeIsPowerOfTwoInRange) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const int c = sample_lattice_count(rng, {1, 5}, 32);
    EXPECT_TRUE(c == 2 || c == 4 || c == 8 || c == 16 || c == 32) << c;
  }
  EXPECT_EQ(sample_lattice_count(rng, {5, 5}, 8), 8);
}

TEST(DepthSim, AffineRange) {
  const auto f = generate_perlin(32, 32, 4, 4, 1);
  const auto d = simulate_depth(f, {0.4, 0.3});
  const auto [lo, hi] = std::minmax_element(d.depth.values.begin(), d.depth.values.end());
  EXPECT_EQ(*lo, 0.3);
  EXPECT_EQ(*hi, 0.4 + 0.3);
  for (std::size_t i = 0; i < d.depth.values.size(); ++i)
    EXPECT_EQ(d.depth.values[i], 0.4 * f.values.values[i] + 0.3);
}

TEST(DepthSim, IdentityAndNearConstant) {
  const auto f = generate_perlin(16, 16, 2, 2, 5);
  EXPECT_EQ(simulate_depth(f, {1.0, 0.0}).depth.values, f.values.values);
  const auto d = simulate_depth(f, {1e-9, 0.5});
  for (double v : d.depth.values) EXPECT_NEAR(v, 0.5, 1e-8);
}

TEST(DepthSim, RejectsInvalidParameters) {
  const auto f = generate_perlin(8, 8, 2, 2, 5);
  EXPECT_THROW(simulate_depth(f, {0.0, 0.1}), ArgumentError);
  EXPECT_THROW(simulate_depth(f, {0.7, 0.5}), ArgumentError);
  EXPECT_THROW(simulate_depth(f, {0.5, -0.1}), ArgumentError);
}

TEST(DepthSim, ParameterDistribution) {
  const auto laws = checks::simulation_laws(1000, 100000, 21);
  EXPECT_EQ(laws.range_violations, 0);
  EXPECT_EQ(laws.constraint_violations, 0);
  EXPECT_LT(laws.ks_alpha, 0.01);
  EXPECT_LT(laws.ks_beta_ratio, 0.01);
}

TEST(DepthSim, ParametersDeterministic) {
  Rng a(8), b(8);
  for (int i = 0; i < 50; ++i) {
    const auto p = sample_depth_params(a), q = sample_depth_params(b);
    EXPECT_EQ(p.alpha, q.alpha);
    EXPECT_EQ(p.beta, q.beta);
  }
}

TEST(AnomalyMask, ZeroThresholdCoversAllButMinimum) {
  Rng rng(4);
  const auto m = generate_anomaly_mask(32, 32, 0.0, rng);
  EXPECT_GE(m.coverage, 1.0 - 1.0 / (32 * 32));
}

TEST(AnomalyMask, CoverageMatchesDirectCount) {
  Rng a(17), b(17);
  const auto m = generate_anomaly_mask(64, 64, 0.5, a, nullptr, {1, 5});
  // Replay the same draw and count directly.
  const auto f = sample_perlin(64, 64, {1, 5}, b);
  std::size_t above = 0;
  for (std::size_t i = 0; i < f.values.values.size(); ++i) {
    above += f.values.values[i] > 0.5;
    EXPECT_EQ(m.mask.values[i], f.values.values[i] > 0.5);
  }
  EXPECT_DOUBLE_EQ(m.coverage, static_cast<double>(above) / (64 * 64));
}

TEST(AnomalyMask, RestrictedToForeground) {
  Rng rng(2);
  BinaryMask fg(16, 16, 0);
  for (int y = 4; y < 12; ++y)
    for (int x = 4; x < 12; ++x) fg.at(x, y) = 1;
  for (int k = 0; k < 20; ++k) {
    const auto m = generate_anomaly_mask(16, 16, 0.5, rng, &fg);
    for (std::size_t i = 0; i < fg.values.size(); ++i)
      if (m.mask.values[i]) EXPECT_TRUE(fg.values[i]);
    EXPECT_GT(count_positive(m.mask), 0u);
  }
}

TEST(AnomalyMask, EmptyForegroundFailsAfterRetries) {
  Rng rng(2);
  BinaryMask fg(16, 16, 0);
  EXPECT_THROW(generate_anomaly_mask(16, 16, 0.5, rng, &fg), DegenerateError);
  EXPECT_THROW(generate_anomaly_mask(16, 16, 1.0, rng), ArgumentError);
}

TEST(PerlinTexture, ThreeChannelsInUnitRange) {
  Rng rng(6);
  const auto t = perlin_texture(16, 16, {1, 3}, rng);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        EXPECT_GE(t.at(c, x, y), 0.0);
        EXPECT_LE(t.at(c, x, y), 1.0);
      }
}
