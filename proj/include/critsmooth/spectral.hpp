#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "critsmooth/cone_geometry.hpp"
#include "critsmooth/errors.hpp"
#include "critsmooth/model.hpp"
#include "critsmooth/random.hpp"

namespace critsmooth {

struct DiscretizationOptions {
  int resolution = 256;
  std::size_t mc_samples = 10000;  ///< fixed common sample for continuous ensembles
  std::uint64_t mc_seed = 0x5eed5eedULL;
};

/// Sparse transfer table on the collocation grid. Row i lists, for every
/// matrix of the operator sample, the grid index of the image direction and
/// the log of the image norm; any exponent s is then a matter of exp().
struct TransferTable {
  struct Entry {
    std::uint32_t col;
    std::uint32_t atom;
    double log_norm;
  };
  std::vector<std::vector<Entry>> rows;

  Eigen::MatrixXd at(double s, const std::vector<MuAtom>& atoms, int derivative = 0) const {
    const auto k = static_cast<Eigen::Index>(rows.size());
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(k, k);
    for (Eigen::Index i = 0; i < k; ++i) {
      for (const auto& e : rows[i]) {
        double v = atoms[e.atom].weight * std::exp(s * e.log_norm);
        for (int p = 0; p < derivative; ++p) v *= e.log_norm;
        a(i, e.col) += v;
      }
    }
    return a;
  }
};

/// Everything about an ensemble that does not depend on the exponent s.
struct Discretization {
  EnsembleSpec spec;
  DirectionGrid grid;
  std::vector<MuAtom> atoms;  ///< exact μ-atoms, or the equally weighted MC sample
  bool exact = true;          ///< finite support: expectations are exact sums
  double en = 0.0;
  TransferTable adjoint;  ///< rows for Mᵀ∘u
  TransferTable forward;  ///< rows for M∘u
  std::size_t center_index = 0;
};

/// Collocation grid: sphere_grid plus anchor directions that the dynamics
/// visits exactly (rank-one images, Perron vectors, the diagonal).
inline DirectionGrid collocation_grid(const EnsembleSpec& spec, int resolution,
                                      const std::vector<MuAtom>* atoms = nullptr) {
  auto pts = sphere_grid(spec.d, resolution);
  pts.push_back(Direction::diagonal(spec.d));
  if (spec.finite()) {
    for (const auto& t : spec.templates)
      for (const auto& r : t.rank_one) {
        pts.push_back(r.v);
        pts.push_back(r.w);
      }
    if (atoms) {
      for (const auto& a : *atoms) {
        if (is_strictly_positive(a.matrix)) {
          pts.push_back(perron(a.matrix).vector);
          pts.push_back(perron(Mat(a.matrix.transpose())).vector);
        }
      }
    }
  } else if (is_strictly_positive(spec.center())) {
    pts.push_back(perron(spec.center()).vector);
    pts.push_back(perron(Mat(spec.center().transpose())).vector);
  }
  return DirectionGrid(std::move(pts), spec.d >= 3 ? resolution : 0);
}

inline std::shared_ptr<const Discretization> discretize(const EnsembleSpec& spec, DiscretizationOptions opt = {}) {
  auto out = std::make_shared<Discretization>();
  out->spec = spec;
  out->en = spec.expected_n();
  if (spec.finite()) {
    out->atoms = mu_atoms(spec);
    out->exact = true;
  } else {
    Stream rng(opt.mc_seed);
    out->atoms.reserve(opt.mc_samples);
    const double w = 1.0 / static_cast<double>(opt.mc_samples);
    for (std::size_t i = 0; i < opt.mc_samples; ++i) out->atoms.push_back({w, sample_mu(spec, rng)});
    out->exact = false;
  }
  out->grid = collocation_grid(spec, opt.resolution, out->exact ? &out->atoms : nullptr);
  const std::size_t k = out->grid.size();
  out->adjoint.rows.resize(k);
  out->forward.rows.resize(k);
  std::vector<Mat> transposed;
  transposed.reserve(out->atoms.size());
  for (const auto& a : out->atoms) transposed.push_back(a.matrix.transpose());
  for (std::size_t i = 0; i < k; ++i) {
    const Direction& u = out->grid[i];
    for (std::size_t a = 0; a < out->atoms.size(); ++a) {
      const auto r = act(transposed[a], u);
      out->adjoint.rows[i].push_back(
          {static_cast<std::uint32_t>(out->grid.nearest(r.direction)), static_cast<std::uint32_t>(a), -r.level});
      const auto f = act(out->atoms[a].matrix, u);
      out->forward.rows[i].push_back(
          {static_cast<std::uint32_t>(out->grid.nearest(f.direction)), static_cast<std::uint32_t>(a), -f.level});
    }
  }
  out->center_index = out->grid.nearest(Direction::diagonal(spec.d));
  return out;
}

namespace detail {

struct PowerResult {
  double lambda;
  Eigen::VectorXd vec;
};

/// Dominant eigenpair of a nonnegative matrix by power iteration. `left`
/// iterates x ↦ xA instead of Ax. The vector is returned with unit sum.
inline PowerResult power_iteration(const Eigen::MatrixXd& a, bool left, int max_iter = 100000, double tol = 1e-14) {
  const auto k = a.rows();
  Eigen::VectorXd x = Eigen::VectorXd::Constant(k, 1.0 / static_cast<double>(k));
  double lambda = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    Eigen::VectorXd y = left ? Eigen::VectorXd(a.transpose() * x) : Eigen::VectorXd(a * x);
    const double s = y.sum();
    if (!(s > 0.0) || !std::isfinite(s)) throw Error(ErrorKind::NoConvergence, "power iteration collapsed");
    lambda = s / x.sum();
    y /= s;
    const double change = (y - x).cwiseAbs().maxCoeff() / y.cwiseAbs().maxCoeff();
    x = std::move(y);
    if (change <= tol) {
      // Rayleigh-type refinement of the eigenvalue on the final vector
      Eigen::VectorXd z = left ? Eigen::VectorXd(a.transpose() * x) : Eigen::VectorXd(a * x);
      lambda = z.sum() / x.sum();
      return {lambda, x};
    }
  }
  throw Error(ErrorKind::NoConvergence, "power iteration did not reach tolerance");
}

}  // namespace detail

/// One outcome of the tilted kernel from a given direction.
struct KernelOutcome {
  std::size_t atom;
  double prob;
  Direction direction;  ///< Mᵀ∘u
  double increment;     ///< −log|Mᵀu|
};

/// Discretized spectral data at exponent s.
struct EigenSystem {
  std::shared_ptr<const Discretization> disc;
  double s = 0.0;
  double k = 0.0;
  double m = 0.0;
  std::vector<double> H, nu, nu_star, pi, b;
  bool alpha_flag = false;
  double drift = 0.0;  ///< π-mean of E_u S₁ (zero at criticality up to rounding)

  const DirectionGrid& grid() const { return disc->grid; }
  const std::vector<MuAtom>& atoms() const { return disc->atoms; }

  double H_grid(const Direction& u) const { return grid().interpolate(H, u); }

  /// H^s(u). Finite ensembles use one application of the eigen-relation
  /// H = k⁻¹ P_s* H, which is exact whenever images fall on anchors.
  double H_at(const Direction& u) const {
    if (!disc->exact) return H_grid(u);
    double acc = 0.0;
    for (const auto& a : atoms()) {
      const auto r = act(Mat(a.matrix.transpose()), u);
      acc += a.weight * std::exp(-s * r.level) * H_grid(r.direction);
    }
    return acc / k;
  }

  /// α-homogeneous extension |x|^s H(x/|x|).
  double H_hom(const Vec& x) const {
    const auto p = polar(x);
    return std::exp(-s * p.level) * H_at(p.direction);
  }

  /// Tilted kernel outcomes from u (finite ensembles).
  std::vector<KernelOutcome> kernel(const Direction& u) const {
    std::vector<KernelOutcome> out;
    out.reserve(atoms().size());
    double total = 0.0;
    for (std::size_t i = 0; i < atoms().size(); ++i) {
      const auto r = act(Mat(atoms()[i].matrix.transpose()), u);
      const double w = atoms()[i].weight * std::exp(-s * r.level) * H_grid(r.direction);
      total += w;
      out.push_back({i, w, r.direction, r.level});
    }
    for (auto& o : out) o.prob /= total;
    return out;
  }

  /// Raw kernel mass Σ μ_a |Mᵀu|^s H(Mᵀ∘u); equals k·H(u).
  double kernel_mass(const Direction& u) const {
    double total = 0.0;
    for (const auto& a : atoms()) {
      const auto r = act(Mat(a.matrix.transpose()), u);
      total += a.weight * std::exp(-s * r.level) * H_grid(r.direction);
    }
    return total;
  }

  double b_grid(const Direction& u) const { return grid().interpolate(b, u); }

  /// b(u) from the Poisson relation b(u) = E_u[S₁ + b(U₁)] − drift.
  double b_at(const Direction& u) const {
    if (b.empty()) throw Error(ErrorKind::ModeUnsupported, "bias function not computed");
    if (!disc->exact) return b_grid(u);
    double acc = 0.0;
    for (const auto& o : kernel(u)) acc += o.prob * (o.increment + b_grid(o.direction));
    return acc - drift;
  }
};

/// Spectral radius and (optionally) its derivative in s without eigenvector
/// post-processing.
struct RadiusResult {
  double k;
  double dk;
};

inline RadiusResult spectral_radius(const Discretization& disc, double s, bool with_derivative = false) {
  const Eigen::MatrixXd a = disc.adjoint.at(s, disc.atoms);
  const auto right = detail::power_iteration(a, false);
  if (!with_derivative) return {right.lambda, 0.0};
  const auto left = detail::power_iteration(a, true);
  const Eigen::MatrixXd da = disc.adjoint.at(s, disc.atoms, 1);
  const double dk = left.vec.dot(da * right.vec) / left.vec.dot(right.vec);
  return {right.lambda, dk};
}

/// Eigenfunction, eigenmeasures and spectral radius of the discretized
/// transfer operators at exponent s.
inline EigenSystem eigen_solve(std::shared_ptr<const Discretization> disc, double s) {
  if (!(s > 0.0)) throw Error(ErrorKind::BadResolution, "exponent must be positive");
  EigenSystem e;
  e.disc = disc;
  e.s = s;
  const Eigen::MatrixXd a_star = disc->adjoint.at(s, disc->atoms);
  const Eigen::MatrixXd a_fwd = disc->forward.at(s, disc->atoms);

  // quasi-compactness sanity check on the full discrete spectrum
  {
    Eigen::EigenSolver<Eigen::MatrixXd> es(a_star, false);
    std::vector<double> mods;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) mods.push_back(std::abs(es.eigenvalues()(i)));
    std::sort(mods.rbegin(), mods.rend());
    if (mods.size() >= 2 && mods[0] - mods[1] < 1e-12) {
      throw Error(ErrorKind::DegenerateSpectrum, "two leading eigenvalues coincide numerically");
    }
  }

  const auto h = detail::power_iteration(a_star, false);
  const auto ns = detail::power_iteration(a_star, true);
  const auto n = detail::power_iteration(a_fwd, true);
  e.k = h.lambda;
  e.m = disc->en * e.k;
  e.nu.assign(n.vec.data(), n.vec.data() + n.vec.size());
  e.nu_star.assign(ns.vec.data(), ns.vec.data() + ns.vec.size());

  // pin H through the duality relation at the grid point nearest the diagonal
  const std::size_t c = disc->center_index;
  double dual = 0.0;
  for (std::size_t j = 0; j < disc->grid.size(); ++j) {
    dual += std::pow(std::max(0.0, disc->grid[c].coords().dot(disc->grid[j].coords())), s) * e.nu[j];
  }
  const double scale = dual / h.vec(static_cast<Eigen::Index>(c));
  e.H.resize(disc->grid.size());
  for (std::size_t i = 0; i < e.H.size(); ++i) e.H[i] = h.vec(static_cast<Eigen::Index>(i)) * scale;
  return e;
}

struct SpectralResiduals {
  double right;  ///< ‖P*H − kH‖∞ / ‖H‖∞
  double left;   ///< ‖ν P − k ν‖₁
  double left_star;
};

inline SpectralResiduals spectral_residuals(const EigenSystem& e) {
  const auto& d = *e.disc;
  const Eigen::MatrixXd a_star = d.adjoint.at(e.s, d.atoms);
  const Eigen::MatrixXd a_fwd = d.forward.at(e.s, d.atoms);
  const Eigen::Map<const Eigen::VectorXd> h(e.H.data(), static_cast<Eigen::Index>(e.H.size()));
  const Eigen::Map<const Eigen::VectorXd> nu(e.nu.data(), static_cast<Eigen::Index>(e.nu.size()));
  const Eigen::Map<const Eigen::VectorXd> ns(e.nu_star.data(), static_cast<Eigen::Index>(e.nu_star.size()));
  return {(a_star * h - e.k * h).cwiseAbs().maxCoeff() / h.cwiseAbs().maxCoeff(),
          (a_fwd.transpose() * nu - e.k * nu).cwiseAbs().sum(),
          (a_star.transpose() * ns - e.k * ns).cwiseAbs().sum()};
}

struct SpectralCurve {
  std::vector<double> s, k, m, m_prime;

  /// Smallest discrete second difference of log m (should be ≥ −1e-6).
  double min_log_convexity() const {
    double worst = std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i + 1 < s.size(); ++i) {
      const double h1 = s[i] - s[i - 1], h2 = s[i + 1] - s[i];
      const double d2 = ((std::log(m[i + 1]) - std::log(m[i])) / h2 - (std::log(m[i]) - std::log(m[i - 1])) / h1);
      worst = std::min(worst, d2);
    }
    return worst;
  }
};

inline double central_step(double s) { return 1e-5 * (1.0 + std::abs(s)); }

inline SpectralCurve m_curve(const Discretization& disc, const std::vector<double>& s_list) {
  SpectralCurve c;
  for (double s : s_list) {
    if (!(s > 0.0)) throw Error(ErrorKind::BadResolution, "exponent must be positive");
    const double h = std::min(central_step(s), 0.5 * s);
    const double k = spectral_radius(disc, s).k;
    const double kp = spectral_radius(disc, s + h).k;
    const double km = spectral_radius(disc, s - h).k;
    c.s.push_back(s);
    c.k.push_back(k);
    c.m.push_back(disc.en * k);
    c.m_prime.push_back(disc.en * (kp - km) / (2.0 * h));
  }
  return c;
}

struct CriticalCalibration {
  double alpha = 0.0;
  double theta_star = 0.0;
  double res_m = 0.0;
  double res_mprime = 0.0;
  double g1 = 0.0;  ///< g(1) of the unit-scale family
};

/// Scale family θ ↦ θT: finds α ∈ (0,1] with g(α) = log m₁(α) − α (log m₁)′(α) = 0
/// and θ* = exp(−(log m₁)′(α)). (log m₁)′ uses the eigenvector formula for
/// the derivative of a simple eigenvalue.
inline std::pair<EnsembleSpec, CriticalCalibration> calibrate_critical(const EnsembleSpec& spec,
                                                                       DiscretizationOptions opt = {}) {
  const auto unit = discretize(spec.with_theta(1.0), opt);
  auto dlog = [&](double s) {
    const auto r = spectral_radius(*unit, s, true);
    return std::pair{std::log(unit->en * r.k), r.dk / r.k};
  };
  auto g = [&](double s) {
    const auto [l, lp] = dlog(s);
    return l - s * lp;
  };
  CriticalCalibration cal;
  cal.g1 = g(1.0);
  if (cal.g1 > 0.0) {
    throw Error(ErrorKind::CalibrationOutOfRange,
                "no critical exponent in (0,1]: g(1) = " + detail::fmt(cal.g1) + " > 0");
  }
  double lo = 1e-9, hi = 1.0;
  if (g(lo) <= 0.0) throw Error(ErrorKind::CalibrationOutOfRange, "g is not positive near 0");
  for (int it = 0; it < 200 && hi - lo > 1e-16; ++it) {
    const double mid = 0.5 * (lo + hi);
    (g(mid) > 0.0 ? lo : hi) = mid;
  }
  cal.alpha = 0.5 * (lo + hi);
  cal.theta_star = std::exp(-dlog(cal.alpha).second);
  EnsembleSpec out = spec.with_theta(cal.theta_star);
  const auto disc = discretize(out, opt);
  const auto curve = m_curve(*disc, {cal.alpha});
  cal.res_m = std::abs(curve.m[0] - 1.0);
  cal.res_mprime = std::abs(curve.m_prime[0]);
  return {out, cal};
}

/// Fills π ∝ H ⊙ ν* and solves the Poisson equation for b with Σπb = 0.
inline EigenSystem stationary_and_b(EigenSystem e) {
  const auto& d = *e.disc;
  const auto k = static_cast<Eigen::Index>(d.grid.size());
  e.pi.resize(k);
  double z = 0.0;
  for (Eigen::Index i = 0; i < k; ++i) z += e.pi[i] = e.H[i] * e.nu_star[i];
  for (auto& p : e.pi) p /= z;

  Eigen::MatrixXd pbar = Eigen::MatrixXd::Zero(k, k);
  Eigen::VectorXd gbar = Eigen::VectorXd::Zero(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    double total = 0.0;
    for (const auto& en : d.adjoint.rows[i]) {
      const double w = d.atoms[en.atom].weight * std::exp(e.s * en.log_norm) * e.H[en.col];
      pbar(i, en.col) += w;
      gbar(i) += w * (-en.log_norm);
      total += w;
    }
    pbar.row(i) /= total;
    gbar(i) /= total;
  }
  const Eigen::Map<const Eigen::VectorXd> pi(e.pi.data(), k);
  e.drift = pi.dot(gbar);
  Eigen::MatrixXd sys = Eigen::MatrixXd::Identity(k, k) - pbar + Eigen::VectorXd::Ones(k) * pi.transpose();
  Eigen::FullPivLU<Eigen::MatrixXd> lu(sys);
  lu.setThreshold(1e-12);
  if (lu.rank() < k) throw Error(ErrorKind::SingularPoisson, "Poisson system is singular");
  const Eigen::VectorXd rhs = gbar - Eigen::VectorXd::Constant(k, e.drift);
  const Eigen::VectorXd b = lu.solve(rhs);
  e.b.assign(b.data(), b.data() + k);
  e.alpha_flag = true;
  return e;
}

/// Convenience: discretize, eigen-solve at s and fill π and b.
inline EigenSystem critical_system(const EnsembleSpec& calibrated, double alpha, DiscretizationOptions opt = {}) {
  return stationary_and_b(eigen_solve(discretize(calibrated, opt), alpha));
}

/// |E_u[S₁ + b(U₁)] − b(u)| using the exact kernel.
inline double poisson_residual(const EigenSystem& e, const Direction& u) {
  double acc = 0.0;
  for (const auto& o : e.kernel(u)) acc += o.prob * (o.increment + e.b_at(o.direction));
  return std::abs(acc - e.b_at(u));
}

struct DualityReport {
  double duality_error = 0.0;  ///< max |H(u) − Σ⟨u,y⟩^s ν(y)|
  bool s_is_one = false;
  double lambda_B = 0.0;
  double m1_error = 0.0;      ///< |m(1) − E N λ_B|
  double h_linear_error = 0.0;  ///< max relative deviation of H¹ from c⟨u, v_B⟩
};

inline DualityReport duality_check(const EigenSystem& e) {
  const auto& d = *e.disc;
  DualityReport r;
  for (std::size_t i = 0; i < d.grid.size(); ++i) {
    double dual = 0.0;
    for (std::size_t j = 0; j < d.grid.size(); ++j) {
      dual += std::pow(std::max(0.0, d.grid[i].coords().dot(d.grid[j].coords())), e.s) * e.nu[j];
    }
    r.duality_error = std::max(r.duality_error, std::abs(e.H[i] - dual));
  }
  if (std::abs(e.s - 1.0) < 1e-12) {
    r.s_is_one = true;
    Mat bmat = d.exact ? Mat(Mat::Zero(d.spec.d, d.spec.d)) : d.spec.center();
    if (d.exact)
      for (const auto& a : d.atoms) bmat += a.weight * a.matrix;
    const auto p = perron(bmat);
    r.lambda_B = p.lambda;
    r.m1_error = std::abs(e.m - d.en * p.lambda);
    const std::size_t c = d.center_index;
    const double scale = e.H[c] / d.grid[c].coords().dot(p.vector.coords());
    for (std::size_t i = 0; i < d.grid.size(); ++i) {
      const double lin = scale * d.grid[i].coords().dot(p.vector.coords());
      r.h_linear_error = std::max(r.h_linear_error, std::abs(e.H[i] - lin) / std::max(lin, 1e-300));
    }
  }
  return r;
}

/// π-weighted mean direction, normalized.
inline Direction pi_mean_direction(const EigenSystem& e) {
  Vec acc = Vec::Zero(e.disc->spec.d);
  for (std::size_t i = 0; i < e.pi.size(); ++i) acc += e.pi[i] * e.grid()[i].coords();
  return Direction::normalize(acc);
}

}  // namespace critsmooth
