#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace critsmooth {

struct MeanSE {
  double mean = 0.0;
  double se = 0.0;
  double sd = 0.0;
  std::size_t n = 0;

  /// (mean − target)/se. Deviations at rounding level count as zero, so a
  /// sample that is constant up to rounding does not produce a huge z.
  double z(double target) const {
    const double dev = mean - target;
    if (std::abs(dev) <= 1e-12 * std::max(1.0, std::abs(target))) return 0.0;
    if (se > 0.0) return dev / se;
    return std::copysign(INFINITY, dev);
  }
};

inline MeanSE mean_se(std::span<const double> x) {
  MeanSE r;
  r.n = x.size();
  if (x.empty()) return r;
  // two-pass for accuracy with large offsets
  double m = 0.0;
  for (double v : x) m += v;
  m /= static_cast<double>(x.size());
  double ss = 0.0;
  for (double v : x) ss += (v - m) * (v - m);
  r.mean = m;
  r.sd = x.size() > 1 ? std::sqrt(ss / static_cast<double>(x.size() - 1)) : 0.0;
  r.se = r.sd / std::sqrt(static_cast<double>(x.size()));
  return r;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return NAN;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}

/// Survival function of the Kolmogorov distribution, P(K > λ).
inline double kolmogorov_q(double lambda) {
  if (lambda < 1e-3) return 1.0;
  double sum = 0.0;
  for (int k = 1; k <= 200; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += (k % 2 == 1 ? 2.0 : -2.0) * term;
    if (term < 1e-17) break;
  }
  return std::clamp(sum, 0.0, 1.0);
}

struct KSResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

/// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value (Stephens'
/// small-sample correction of the argument). Ties make it conservative.
inline KSResult ks_two_sample(std::vector<double> a, std::vector<double> b) {
  KSResult r;
  if (a.empty() || b.empty()) return r;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  const double ne = std::sqrt(na * nb / (na + nb));
  r.statistic = d;
  r.p_value = kolmogorov_q((ne + 0.12 + 0.11 / ne) * d);
  return r;
}

struct LinearFit {
  double intercept = 0.0;
  double slope = 0.0;
  double slope_se = 0.0;
};

/// Weighted least squares y = a + b t with weights 1/σ² (unit weights when
/// `sigma` is empty).
inline LinearFit linear_fit(std::span<const double> t, std::span<const double> y, std::span<const double> sigma = {}) {
  double sw = 0, st = 0, sy = 0, stt = 0, sty = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double w = sigma.empty() || !(sigma[i] > 0.0) ? 1.0 : 1.0 / (sigma[i] * sigma[i]);
    sw += w;
    st += w * t[i];
    sy += w * y[i];
    stt += w * t[i] * t[i];
    sty += w * t[i] * y[i];
  }
  LinearFit f;
  const double det = sw * stt - st * st;
  if (!(std::abs(det) > 0.0)) return f;
  f.slope = (sw * sty - st * sy) / det;
  f.intercept = (stt * sy - st * sty) / det;
  if (!sigma.empty()) {
    f.slope_se = std::sqrt(sw / det);
  } else if (t.size() > 2) {
    double rss = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double e = y[i] - f.intercept - f.slope * t[i];
      rss += e * e;
    }
    f.slope_se = std::sqrt(rss / static_cast<double>(t.size() - 2) * sw / det);
  }
  return f;
}

}  // namespace critsmooth
