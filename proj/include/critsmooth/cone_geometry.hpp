#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "critsmooth/errors.hpp"

namespace critsmooth {

/// Largest supported dimension. Matrices and vectors live on the stack.
inline constexpr int kMaxDim = 4;

using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, Eigen::ColMajor, kMaxDim, 1>;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor, kMaxDim, kMaxDim>;

/// A point of the nonnegative part of the Euclidean unit sphere.
class Direction {
 public:
  Direction() = default;

  /// Normalizes a nonnegative, nonzero vector. Rounding noise below zero is
  /// clipped; genuinely negative input is rejected.
  static Direction normalize(const Vec& x) {
    Vec y = x;
    for (int i = 0; i < y.size(); ++i) {
      if (y(i) < 0.0) {
        if (y(i) < -1e-12 * x.cwiseAbs().maxCoeff()) {
          throw Error(ErrorKind::ZeroImage, "direction has a negative coordinate");
        }
        y(i) = 0.0;
      }
    }
    const double n = y.norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw Error(ErrorKind::ZeroImage, "zero vector has no direction");
    Direction d;
    d.coords_ = y / n;
    return d;
  }

  static Direction basis(int dim, int i) {
    Vec x = Vec::Zero(dim);
    x(i) = 1.0;
    return normalize(x);
  }

  static Direction diagonal(int dim) { return normalize(Vec::Ones(dim)); }

  const Vec& coords() const { return coords_; }
  int dim() const { return static_cast<int>(coords_.size()); }
  double operator[](int i) const { return coords_(i); }

  bool is_valid() const {
    return coords_.size() > 0 && (coords_.array() >= 0.0).all() && std::abs(coords_.norm() - 1.0) <= 1e-12;
  }

  bool interior() const { return (coords_.array() > 0.0).all(); }

  friend bool operator<(const Direction& a, const Direction& b) {
    return std::lexicographical_compare(a.coords_.data(), a.coords_.data() + a.coords_.size(), b.coords_.data(),
                                        b.coords_.data() + b.coords_.size());
  }

 private:
  Vec coords_;
};

inline double distance(const Direction& a, const Direction& b) { return (a.coords() - b.coords()).norm(); }

inline bool is_nonnegative(const Mat& a) { return (a.array() >= 0.0).all(); }

inline bool is_strictly_positive(const Mat& a) { return (a.array() > 0.0).all(); }

/// No zero row nor zero column.
inline bool is_allowable(const Mat& a) {
  if (!is_nonnegative(a)) return false;
  for (int i = 0; i < a.rows(); ++i) {
    if (!(a.row(i).maxCoeff() > 0.0)) return false;
  }
  for (int j = 0; j < a.cols(); ++j) {
    if (!(a.col(j).maxCoeff() > 0.0)) return false;
  }
  return true;
}

struct ActResult {
  Direction direction;
  /// −log|au|, the level increment attached to the step.
  double level;
};

/// Projective action u ↦ au/|au| together with the log-scale increment.
inline ActResult act(const Mat& a, const Direction& u) {
  const Vec image = a * u.coords();
  const double n = image.norm();
  if (!(n > 0.0)) throw Error(ErrorKind::ZeroImage, "|au| = 0: matrix is not allowable");
  return {Direction::normalize(image), -std::log(n)};
}

/// Same as `act` but for an arbitrary nonnegative vector (used for
/// homogeneous extensions where x = |x|·u).
inline ActResult polar(const Vec& x) {
  const double n = x.norm();
  if (!(n > 0.0)) throw Error(ErrorKind::ZeroImage, "zero vector");
  return {Direction::normalize(x), -std::log(n)};
}

inline double operator_norm(const Mat& a) {
  Eigen::SelfAdjointEigenSolver<Mat> es(a.transpose() * a, Eigen::EigenvaluesOnly);
  return std::sqrt(std::max(0.0, es.eigenvalues().maxCoeff()));
}

/// Deterministic grid on the nonnegative unit sphere containing every basis
/// vector. For d = 2 the angles are equally spaced on [0, π/2]; for d ≥ 3 it
/// is the normalized simplex lattice {i ∈ ℕ^d : Σi = resolution}.
inline std::vector<Direction> sphere_grid(int d, int resolution) {
  if (resolution < 2) throw Error(ErrorKind::BadResolution, "resolution must be at least 2");
  if (d < 2 || d > kMaxDim) throw Error(ErrorKind::BadResolution, "dimension out of range");
  std::vector<Direction> out;
  if (d == 2) {
    out.reserve(resolution);
    for (int k = 0; k < resolution; ++k) {
      const double phi = (std::numbers::pi / 2.0) * k / (resolution - 1);
      Vec x(2);
      x << std::cos(phi), std::sin(phi);
      if (k == 0) x << 1.0, 0.0;
      if (k == resolution - 1) x << 0.0, 1.0;
      out.push_back(Direction::normalize(x));
    }
    return out;
  }
  // lexicographically descending lattice enumeration
  std::vector<int> idx(d, 0);
  auto rec = [&](auto&& self, int pos, int remaining) -> void {
    if (pos == d - 1) {
      idx[pos] = remaining;
      Vec x(d);
      for (int i = 0; i < d; ++i) x(i) = idx[i];
      out.push_back(Direction::normalize(x));
      return;
    }
    for (int v = remaining; v >= 0; --v) {
      idx[pos] = v;
      self(self, pos + 1, remaining - v);
    }
  };
  rec(rec, 0, resolution);
  return out;
}

namespace detail {

inline double golden_min(auto&& f, double lo, double hi, double tol = 1e-14) {
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c = b - g * (b - a), d = a + g * (b - a);
  double fc = f(c), fd = f(d);
  while (b - a > tol) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - g * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + g * (b - a);
      fd = f(d);
    }
  }
  return std::min({f(a), f(b), fc, fd});
}

}  // namespace detail

struct Norms {
  double op_norm;
  double iota;  ///< min over the nonnegative sphere of |au|
};

/// Operator norm and ι(a) = min_{u ∈ 𝕊₊} |au|. ι is found on a dense grid and
/// refined locally (golden section in angle for d = 2, a shrinking pattern
/// search otherwise); accuracy target 1e-8.
inline Norms norms(const Mat& a) {
  const int d = static_cast<int>(a.cols());
  const Mat q = a.transpose() * a;
  auto value = [&](const Vec& u) { return std::sqrt(std::max(0.0, u.dot(q * u))); };
  double iota = 0.0;
  if (d == 2) {
    constexpr int kGrid = 2048;
    auto at = [&](double phi) {
      Vec u(2);
      u << std::cos(phi), std::sin(phi);
      return value(u);
    };
    const double step = (std::numbers::pi / 2.0) / (kGrid - 1);
    int best = 0;
    double best_val = at(0.0);
    for (int k = 1; k < kGrid; ++k) {
      const double v = at(k * step);
      if (v < best_val) {
        best_val = v;
        best = k;
      }
    }
    const double lo = std::max(0.0, (best - 1) * step);
    const double hi = std::min(std::numbers::pi / 2.0, (best + 1) * step);
    iota = std::min(best_val, detail::golden_min(at, lo, hi));
  } else {
    const int res = d == 3 ? 100 : 24;
    Vec best_u;
    double best_val = std::numeric_limits<double>::infinity();
    for (const auto& u : sphere_grid(d, res)) {
      const double v = value(u.coords());
      if (v < best_val) {
        best_val = v;
        best_u = u.coords();
      }
    }
    double step = 1.0 / res;
    while (step > 1e-12) {
      bool improved = false;
      for (int i = 0; i < d && !improved; ++i) {
        for (double sgn : {1.0, -1.0}) {
          Vec trial = best_u;
          trial(i) = std::max(0.0, trial(i) + sgn * step);
          if (!(trial.norm() > 0.0)) continue;
          trial.normalize();
          const double v = value(trial);
          if (v < best_val) {
            best_val = v;
            best_u = trial;
            improved = true;
            break;
          }
        }
      }
      if (!improved) step *= 0.5;
    }
    iota = best_val;
  }
  return {operator_norm(a), iota};
}

struct PerronPair {
  double lambda;
  Direction vector;
};

/// Dominant eigenpair of a strictly positive matrix by power iteration.
inline PerronPair perron(const Mat& a, int max_iter = 100000) {
  if (!is_strictly_positive(a)) {
    throw Error(ErrorKind::NotStrictlyPositive, "Perron eigenpair requires strictly positive entries");
  }
  const int d = static_cast<int>(a.rows());
  Vec v = Vec::Ones(d) / std::sqrt(static_cast<double>(d));
  for (int it = 0; it < max_iter; ++it) {
    const Vec w = a * v;
    const double lambda = v.dot(w);  // Rayleigh quotient, |v| = 1
    const double residual = (w - lambda * v).norm();
    if (residual <= 1e-13 * lambda) return {lambda, Direction::normalize(v)};
    v = w / w.norm();
  }
  throw Error(ErrorKind::NoConvergence, "power iteration did not converge");
}

/// Rotation in the plane spanned by `from` and `to` carrying `from` onto `to`
/// (identity on the orthogonal complement).
inline Mat plane_rotation(const Direction& from, const Direction& to) {
  const int d = from.dim();
  const Vec a = from.coords();
  Vec b = to.coords() - a.dot(to.coords()) * a;
  const double sin_phi = b.norm();
  const double cos_phi = std::clamp(a.dot(to.coords()), -1.0, 1.0);
  Mat r = Mat::Identity(d, d);
  if (sin_phi < 1e-300) return r;
  b /= sin_phi;
  r += sin_phi * (b * a.transpose() - a * b.transpose()) + (cos_phi - 1.0) * (a * a.transpose() + b * b.transpose());
  return r;
}

/// Angle between two directions.
inline double angle(const Direction& a, const Direction& b) {
  return std::acos(std::clamp(a.coords().dot(b.coords()), -1.0, 1.0));
}

/// Collocation points on 𝕊₊ with nearest-point lookup and piecewise-linear
/// interpolation (linear in angle for d = 2, barycentric on the simplex
/// lattice for d ≥ 3).
class DirectionGrid {
 public:
  DirectionGrid() = default;

  /// `lattice_resolution` must be the resolution used to build the lattice
  /// part when d ≥ 3; extra points beyond the lattice are matched exactly.
  explicit DirectionGrid(std::vector<Direction> points, int lattice_resolution = 0)
      : points_(std::move(points)), lattice_resolution_(lattice_resolution) {
    if (points_.empty()) throw Error(ErrorKind::BadResolution, "empty grid");
    dim_ = points_.front().dim();
    if (dim_ == 2) {
      std::sort(points_.begin(), points_.end(),
                [](const Direction& a, const Direction& b) { return angle_of(a) < angle_of(b); });
      std::vector<Direction> unique;
      for (const auto& p : points_) {
        if (unique.empty() || angle_of(p) - angle_of(unique.back()) > 1e-13) unique.push_back(p);
      }
      points_ = std::move(unique);
      angles_.reserve(points_.size());
      for (const auto& p : points_) angles_.push_back(angle_of(p));
    } else {
      std::vector<Direction> unique;
      for (const auto& p : points_) {
        bool dup = false;
        for (const auto& q : unique) {
          if (distance(p, q) < 1e-13) {
            dup = true;
            break;
          }
        }
        if (!dup) unique.push_back(p);
      }
      points_ = std::move(unique);
      if (lattice_resolution_ >= 2) index_lattice();
    }
  }

  int dim() const { return dim_; }
  std::size_t size() const { return points_.size(); }
  const Direction& operator[](std::size_t i) const { return points_[i]; }
  const std::vector<Direction>& points() const { return points_; }

  std::size_t nearest(const Direction& u) const {
    if (dim_ == 2) {
      const double a = angle_of(u);
      auto it = std::lower_bound(angles_.begin(), angles_.end(), a);
      if (it == angles_.end()) return angles_.size() - 1;
      const std::size_t hi = static_cast<std::size_t>(it - angles_.begin());
      if (hi == 0) return 0;
      return (a - angles_[hi - 1] <= angles_[hi] - a) ? hi - 1 : hi;
    }
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < points_.size(); ++i) {
      const double dd = (points_[i].coords() - u.coords()).squaredNorm();
      if (dd < best_d) {
        best_d = dd;
        best = i;
      }
    }
    return best;
  }

  double interpolate(std::span<const double> values, const Direction& u) const {
    if (dim_ == 2) {
      const double a = angle_of(u);
      auto it = std::lower_bound(angles_.begin(), angles_.end(), a);
      if (it == angles_.end()) return values[angles_.size() - 1];
      const std::size_t hi = static_cast<std::size_t>(it - angles_.begin());
      if (hi == 0 || *it == a) return values[hi];
      const double w = (a - angles_[hi - 1]) / (angles_[hi] - angles_[hi - 1]);
      return (1.0 - w) * values[hi - 1] + w * values[hi];
    }
    // exact hits first (anchor points that are not on the lattice)
    const std::size_t near = nearest(u);
    if (distance(points_[near], u) < 1e-12 || lattice_.empty()) return values[near];
    return lattice_interpolate(values, u);
  }

  static double angle_of(const Direction& u) { return std::atan2(u[1], u[0]); }

 private:
  void index_lattice() {
    const int n = lattice_resolution_;
    for (std::size_t i = 0; i < points_.size(); ++i) {
      const Vec& c = points_[i].coords();
      const Vec bary = c / c.sum() * n;
      std::vector<int> key(dim_);
      bool integral = true;
      for (int k = 0; k < dim_; ++k) {
        key[k] = static_cast<int>(std::lround(bary(k)));
        if (std::abs(bary(k) - key[k]) > 1e-9) integral = false;
      }
      if (integral) lattice_[key] = i;
    }
  }

  // Kuhn triangulation in cumulative coordinates c_k = Σ_{i≤k} x_i; the
  // order constraints of the simplex are respected by every Kuhn cell.
  double lattice_interpolate(std::span<const double> values, const Direction& u) const {
    const int n = lattice_resolution_;
    const int m = dim_ - 1;
    const Vec x = u.coords() / u.coords().sum() * n;
    std::vector<double> cum(m);
    double run = 0.0;
    for (int k = 0; k < m; ++k) {
      run += x(k);
      cum[k] = std::clamp(run, 0.0, static_cast<double>(n));
    }
    std::vector<int> base(m);
    std::vector<double> frac(m);
    for (int k = 0; k < m; ++k) {
      base[k] = std::min(static_cast<int>(std::floor(cum[k])), n - 1);
      base[k] = std::max(base[k], 0);
      frac[k] = cum[k] - base[k];
    }
    std::vector<int> order(m);
    for (int k = 0; k < m; ++k) order[k] = k;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
    auto lookup = [&](const std::vector<int>& c) -> double {
      std::vector<int> key(dim_);
      int prev = 0;
      for (int k = 0; k < m; ++k) {
        key[k] = c[k] - prev;
        prev = c[k];
      }
      key[m] = n - prev;
      auto it = lattice_.find(key);
      if (it == lattice_.end()) return values[nearest(u)];
      return values[it->second];
    };
    std::vector<int> vertex = base;
    double result = (1.0 - frac[order[0]]) * lookup(vertex);
    for (int k = 0; k < m; ++k) {
      vertex[order[k]] += 1;
      const double w = frac[order[k]] - (k + 1 < m ? frac[order[k + 1]] : 0.0);
      if (w != 0.0) result += w * lookup(vertex);
    }
    return result;
  }

  std::vector<Direction> points_;
  std::vector<double> angles_;
  int dim_ = 0;
  int lattice_resolution_ = 0;
  std::map<std::vector<int>, std::size_t> lattice_;
};

}  // namespace critsmooth
