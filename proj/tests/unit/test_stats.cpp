#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <numeric>

#include "critsmooth/parallel.hpp"
#include "critsmooth/random.hpp"
#include "critsmooth/stats.hpp"

using namespace critsmooth;

TEST(MeanSE, KnownSample) {
  const std::vector<double> x{1, 2, 3, 4};
  const auto m = mean_se(x);
  EXPECT_DOUBLE_EQ(m.mean, 2.5);
  EXPECT_NEAR(m.sd, std::sqrt(5.0 / 3.0), 1e-14);
  EXPECT_NEAR(m.se, std::sqrt(5.0 / 3.0) / 2.0, 1e-14);
  EXPECT_EQ(m.n, 4u);
}

TEST(MeanSE, ConstantSampleHasZeroZ) {
  const std::vector<double> x(10, 0.1 + 0.2);
  EXPECT_EQ(mean_se(x).z(0.3), 0.0);
  EXPECT_GT(std::abs(mean_se(x).z(1.0)), 1e6);
}

TEST(Median, OddAndEven) {
  EXPECT_DOUBLE_EQ(median({3, 1, 2}), 2.0);
  EXPECT_DOUBLE_EQ(median({4, 1, 3, 2}), 2.5);
}

TEST(Kolmogorov, TableValues) {
  // classical critical values of the limiting distribution
  EXPECT_NEAR(kolmogorov_q(1.3581), 0.05, 1e-3);
  EXPECT_NEAR(kolmogorov_q(1.6276), 0.01, 1e-3);
  EXPECT_NEAR(kolmogorov_q(0.0), 1.0, 1e-12);
}

TEST(KS, SameLawNotRejectedShiftRejected) {
  Stream rng(4);
  std::vector<double> a(2000), b(2000), c(2000);
  for (auto& x : a) x = rng.normal();
  for (auto& x : b) x = rng.normal();
  for (auto& x : c) x = rng.normal() + 0.5;
  EXPECT_GT(ks_two_sample(a, b).p_value, 0.01);
  EXPECT_LT(ks_two_sample(a, c).p_value, 1e-6);
  EXPECT_NEAR(ks_two_sample(a, a).statistic, 0.0, 1e-15);
}

TEST(LinearFit, ExactLine) {
  const std::vector<double> t{1, 2, 3, 4}, y{3, 5, 7, 9};
  const auto f = linear_fit(t, y);
  EXPECT_NEAR(f.slope, 2.0, 1e-13);
  EXPECT_NEAR(f.intercept, 1.0, 1e-13);
  EXPECT_NEAR(f.slope_se, 0.0, 1e-12);
}

TEST(LinearFit, WeightedMatchesClosedForm) {
  const std::vector<double> t{0, 1, 2}, y{0, 2, 1}, s{1, 1, 0.5};
  // normal equations with weights 1, 1, 4
  const double w[3] = {1, 1, 4};
  double sw = 0, st = 0, sy = 0, stt = 0, sty = 0;
  for (int i = 0; i < 3; ++i) {
    sw += w[i];
    st += w[i] * t[i];
    sy += w[i] * y[i];
    stt += w[i] * t[i] * t[i];
    sty += w[i] * t[i] * y[i];
  }
  const double slope = (sw * sty - st * sy) / (sw * stt - st * st);
  const auto f = linear_fit(t, y, s);
  EXPECT_NEAR(f.slope, slope, 1e-13);
  EXPECT_NEAR(f.slope_se, std::sqrt(sw / (sw * stt - st * st)), 1e-13);
}

TEST(Stream, ChildrenAreReproducibleAndDistinct) {
  const Stream root(9);
  auto a = root.child(1, 2), b = root.child(1, 2), c = root.child(1, 3);
  EXPECT_EQ(a(), b());
  EXPECT_NE(root.child(1, 2)(), c());
}

TEST(Stream, UniformMoments) {
  Stream rng(1);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GT(u, 0.0);
    ASSERT_LT(u, 1.0);
    s += u;
    s2 += u * u;
  }
  EXPECT_NEAR(s / n, 0.5, 4 * std::sqrt(1.0 / 12 / n));
  EXPECT_NEAR(s2 / n, 1.0 / 3.0, 0.005);
}

TEST(ParallelFor, CoversEveryIndexOnce) {
  for (int workers : {1, 2, 5}) {
    std::vector<std::atomic<int>> hits(103);
    parallel_for(hits.size(), workers, [&](std::size_t i, int) { hits[i]++; });
    for (auto& h : hits) EXPECT_EQ(h.load(), 1);
  }
}

TEST(ParallelFor, PropagatesExceptions) {
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i, int) {
                 if (i == 7) throw std::runtime_error("boom");
               }),
               std::runtime_error);
}
