#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "critsmooth/spectral.hpp"

using namespace critsmooth;

namespace {

// log m for RANK1-2D at θ = 1
double log_m1(double s) { return std::log(2.0 * (0.99 + 0.01 * std::pow(100.0, s))); }

double m_rank1(double s, double theta) { return 2.0 * std::pow(theta, s) * (0.99 + 0.01 * std::pow(100.0, s)); }

// RANK1-2D-B: the chain lives on {w1, w2} and the 2×2 transfer matrix
// ½[[1, cˢ], [cˢ, 1]] has spectral radius ½(1 + cˢ).
double m_rank1_b(double s, double theta) {
  Vec w1(2), w2(2);
  w1 << 1.0, 0.4;
  w2 << 0.3, 1.0;
  const double c = w1.normalized().dot(w2.normalized());
  return std::pow(theta, s) * (0.99 + 0.01 * std::pow(100.0, s)) * (1.0 + std::pow(c, s));
}

// Critical α solves log m(α) = α (log m)'(α) at θ = 1; plain bisection.
double alpha_oracle() {
  auto g = [](double s) {
    const double h = 1e-6;
    return log_m1(s) - s * (log_m1(s + h) - log_m1(s - h)) / (2 * h);
  };
  double lo = 1e-3, hi = 1.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (g(mid) > 0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

TEST(Spectral, RankOneClosedForm) {
  const auto disc = discretize(rank1_2d(0.4));
  const std::vector<double> s{0.1, 0.5, 0.8, 1.0, 1.7};
  const auto c = m_curve(*disc, s);
  for (std::size_t i = 0; i < s.size(); ++i) {
    EXPECT_NEAR(c.m[i] / m_rank1(s[i], 0.4), 1.0, 1e-12) << s[i];
    const double h = 1e-6;
    const double dm = (m_rank1(s[i] + h, 0.4) - m_rank1(s[i] - h, 0.4)) / (2 * h);
    EXPECT_NEAR(c.m_prime[i], dm, 1e-6 * std::max(1.0, std::abs(dm)));
  }
}

TEST(Spectral, TwoStateClosedForm) {
  const auto disc = discretize(rank1_2d_b(0.7));
  const std::vector<double> s{0.2, 0.6, 1.0, 1.5};
  const auto c = m_curve(*disc, s);
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(c.m[i] / m_rank1_b(s[i], 0.7), 1.0, 1e-10) << s[i];
}

TEST(Spectral, LogConvexity) {
  std::vector<double> s;
  for (int i = 1; i <= 20; ++i) s.push_back(0.1 * i);
  for (const auto& spec : {rank1_2d(), rank1_2d_b(), ball_2d()}) {
    DiscretizationOptions opt;
    opt.resolution = 64;
    opt.mc_samples = 2000;
    EXPECT_GE(m_curve(*discretize(spec, opt), s).min_log_convexity(), -1e-6) << spec.name;
  }
}

TEST(Calibration, MatchesIndependentRoot) {
  const auto [cs, cal] = calibrate_critical(rank1_2d());
  const double a = alpha_oracle();
  EXPECT_NEAR(cal.alpha, a, 1e-7);
  EXPECT_NEAR(cal.theta_star, std::exp(-(log_m1(a) / a)), 1e-7);
  EXPECT_NEAR(m_rank1(cal.alpha, cal.theta_star), 1.0, 1e-10);
  EXPECT_DOUBLE_EQ(cs.theta, cal.theta_star);
}

TEST(Calibration, OutOfRange) {
  try {
    calibrate_critical(c14());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::CalibrationOutOfRange);
  }
}

TEST(EigenSystem, HarmonicFunctionRankOne) {
  // P* of a rank-one e eᵀ ensemble maps f to a multiple of ⟨u,e⟩ˢ
  const auto [cs, cal] = calibrate_critical(rank1_2d());
  const auto eig = critical_system(cs, cal.alpha);
  const auto e = Direction::diagonal(2);
  for (std::size_t i = 0; i < eig.grid().size(); i += 17) {
    const auto& u = eig.grid()[i];
    EXPECT_NEAR(eig.H[i] / eig.H_at(e), std::pow(u.coords().dot(e.coords()), cal.alpha), 1e-10);
  }
}

TEST(EigenSystem, ResidualsDualityAndMeanIdentity) {
  for (const auto& spec : {rank1_2d(), rank1_2d_b()}) {
    const auto [cs, cal] = calibrate_critical(spec);
    const auto eig = critical_system(cs, cal.alpha);
    const auto r = spectral_residuals(eig);
    EXPECT_LE(r.right, 1e-8);
    EXPECT_LE(r.left, 1e-8);
    EXPECT_NEAR(eig.k, 0.5, 1e-10);  // m = E N · k = 1
    EXPECT_LE(duality_check(eig).duality_error, 1e-8);
    const auto one = duality_check(eigen_solve(discretize(cs), 1.0));
    EXPECT_TRUE(one.s_is_one);
    EXPECT_LE(one.m1_error, 1e-8);
  }
}

TEST(EigenSystem, StationaryLawAndPoisson) {
  const auto [cs, cal] = calibrate_critical(rank1_2d_b());
  const auto eig = critical_system(cs, cal.alpha);
  EXPECT_NEAR(std::accumulate(eig.pi.begin(), eig.pi.end(), 0.0), 1.0, 1e-12);
  double pib = 0.0;
  for (std::size_t i = 0; i < eig.pi.size(); ++i) pib += eig.pi[i] * eig.b[i];
  EXPECT_NEAR(pib, 0.0, 1e-10);
  EXPECT_NEAR(eig.drift, 0.0, 1e-8);
  for (std::size_t i = 0; i < eig.grid().size(); i += 11) EXPECT_LE(poisson_residual(eig, eig.grid()[i]), 1e-8);
}

TEST(EigenSystem, KernelIsAProbability) {
  const auto [cs, cal] = calibrate_critical(rank1_2d_b());
  const auto eig = critical_system(cs, cal.alpha);
  for (std::size_t i = 0; i < eig.grid().size(); i += 23) {
    double total = 0.0;
    for (const auto& o : eig.kernel(eig.grid()[i])) total += o.prob;
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Discretization, BallRadiusConvergesInResolution) {
  DiscretizationOptions lo, hi;
  lo.resolution = 64;
  hi.resolution = 256;
  lo.mc_samples = hi.mc_samples = 4000;
  const double a = spectral_radius(*discretize(ball_2d(), lo), 0.7).k;
  const double b = spectral_radius(*discretize(ball_2d(), hi), 0.7).k;
  EXPECT_NEAR(a / b, 1.0, 1e-3);
}

TEST(Discretization, RejectsBadResolution) {
  DiscretizationOptions opt;
  opt.resolution = 1;
  EXPECT_THROW(discretize(rank1_2d(), opt), Error);
}
