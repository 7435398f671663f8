#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <memory>
#include <unordered_map>
#include <vector>

#include "critsmooth/branching.hpp"
#include "critsmooth/cone_geometry.hpp"
#include "critsmooth/errors.hpp"
#include "critsmooth/model.hpp"
#include "critsmooth/mrw.hpp"
#include "critsmooth/parallel.hpp"
#include "critsmooth/random.hpp"
#include "critsmooth/spectral.hpp"
#include "critsmooth/stats.hpp"

namespace critsmooth {

/// A Monte Carlo value with its standard error.
struct Estimate {
  double value = 0.0;
  double se = 0.0;

  double z() const {
    if (se > 0.0) return value / se;
    return value == 0.0 ? 0.0 : std::copysign(INFINITY, value);
  }
};

namespace detail {

using DirKey = std::array<std::uint64_t, kMaxDim>;

inline DirKey direction_key(const Direction& u) {
  DirKey k{};
  for (int i = 0; i < u.dim(); ++i) std::memcpy(&k[static_cast<std::size_t>(i)], &u.coords()[i], sizeof(double));
  return k;
}

/// Rounds coordinates to multiples of 2⁻⁴⁰ so that directions equal up to
/// rounding (e.g. images under one rank-one factor) share cache entries.
inline Direction snap(const Direction& u) {
  Vec c = u.coords();
  for (int i = 0; i < c.size(); ++i) c[i] = std::ldexp(std::nearbyint(std::ldexp(c[i], 40)), -40);
  return Direction::normalize(c);
}

struct DirKeyHash {
  std::size_t operator()(const DirKey& k) const {
    std::uint64_t h = 0;
    for (auto v : k) h = Stream::combine(h, v);
    return static_cast<std::size_t>(h);
  }
};

struct PointKey {
  DirKey dir;
  std::uint64_t rho;
  bool operator==(const PointKey&) const = default;
};

struct PointKeyHash {
  std::size_t operator()(const PointKey& k) const { return static_cast<std::size_t>(Stream::combine(DirKeyHash{}(k.dir), k.rho)); }
};

/// Σ w (y − ȳ)² with weights summing to one, turned into the variance of a
/// mean of `draws` samples. Zero for exact enumerations (draws = 0).
inline double mean_variance(std::span<const double> w, std::span<const double> y, double draws) {
  if (!(draws > 1.0)) return 0.0;
  double m = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) m += w[i] * y[i];
  double v = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) v += w[i] * (y[i] - m) * (y[i] - m);
  return v * draws / (draws - 1.0) / draws;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Weight tuples for outer expectations

/// Either M sampled tuples (identical templates grouped) or, for finite
/// ensembles on request, the exact template distribution.
struct TupleSet {
  std::vector<double> weight;  ///< sums to one
  std::vector<std::vector<Mat>> matrices;
  double draws = 0.0;  ///< M for sampled sets, 0 for exact ones

  bool exact() const { return draws == 0.0; }
  std::size_t size() const { return weight.size(); }
};

inline TupleSet sample_tuples(const EnsembleSpec& spec, long m, Stream rng) {
  TupleSet set;
  set.draws = static_cast<double>(m);
  TupleSampler sampler(spec);
  if (spec.finite()) {
    std::vector<double> counts(spec.templates.size(), 0.0);
    for (long j = 0; j < m; ++j) counts[sampler.draw_template(rng)] += 1.0;
    for (std::size_t t = 0; t < counts.size(); ++t) {
      if (counts[t] == 0.0) continue;
      set.weight.push_back(counts[t] / static_cast<double>(m));
      std::vector<Mat> mats;
      for (std::size_t i = 0; i < spec.templates[t].matrices.size(); ++i) mats.push_back(spec.weight(t, i));
      set.matrices.push_back(std::move(mats));
    }
  } else {
    for (long j = 0; j < m; ++j) {
      set.weight.push_back(1.0 / static_cast<double>(m));
      set.matrices.push_back(sampler(rng).matrices);
    }
  }
  return set;
}

inline TupleSet exact_tuples(const EnsembleSpec& spec) {
  if (!spec.finite()) throw Error(ErrorKind::ModeUnsupported, "exact tuple enumeration needs a finite ensemble");
  TupleSet set;
  for (std::size_t t = 0; t < spec.templates.size(); ++t) {
    if (spec.templates[t].prob <= 0.0) continue;
    set.weight.push_back(spec.templates[t].prob);
    std::vector<Mat> mats;
    for (std::size_t i = 0; i < spec.templates[t].matrices.size(); ++i) mats.push_back(spec.weight(t, i));
    set.matrices.push_back(std::move(mats));
  }
  return set;
}

// ---------------------------------------------------------------------------
// Linear functionals of 1 − φ̂

/// Σ c · (1 − φ̂(x)) over a finite set of points, kept per direction so the
/// replicate influence can be evaluated in one pass.
class LinearForm {
 public:
  void add(const Vec& x, double c) {
    const double n = x.norm();
    if (!(n > 0.0) || c == 0.0) return;
    const Direction u = detail::snap(Direction::normalize(x));
    auto& slot = terms_[detail::direction_key(u)];
    slot.first = u;
    slot.second[n] += c;
  }

  void append(const LinearForm& other, double scale = 1.0) {
    for (const auto& [key, slot] : other.terms_) {
      auto& mine = terms_[key];
      mine.first = slot.first;
      for (const auto& [rho, c] : slot.second) mine.second[rho] += scale * c;
    }
  }

  const auto& terms() const { return terms_; }

 private:
  std::map<detail::DirKey, std::pair<Direction, std::map<double, double>>> terms_;
};

// ---------------------------------------------------------------------------
// Fixed point model

/// How 𝒲̂ is evaluated at a point x = ρu. `Point` measures levels from x
/// itself, 𝒲̂(x) = Σ [−log|Lᵀx| + b] H e^{α log|Lᵀx|} = ρ^α(𝒲̂(u) − log ρ · Ŵ(u)),
/// so the children of the root reproduce the same estimator one generation
/// deeper. `Homogeneous` uses ρ^α 𝒲̂(u). Both share the limit ρ^α 𝒲(u).
enum class WForm { Point, Homogeneous };

struct FixedPointOptions {
  int replicates = 5000;
  int depth = 15;
  double K = 1.0;
  double cap = 1e6;  ///< stored classes per replicate and generation
  /// Leaves with −log‖L‖ at or below the barrier max(0, −min b) keep
  /// branching until they clear it, which makes every summand of 𝒲̂ positive.
  bool extend = true;
  double max_radius = 1000.0;  ///< point form: levels measured from x up to this norm
  WForm form = WForm::Point;
  int extension_limit = 400;  ///< extra generations allowed for extension
  std::uint64_t seed = 1;
  int workers = 1;
};

struct FixedPointStats {
  double mean_classes = 0.0;
  double max_classes = 0.0;
  int max_generation = 0;
  double extended_fraction = 0.0;  ///< replicates that needed extension
};

/// Laplace transform φ̂(ru) = mean_r exp(−r^α K 𝒲̂_r(u)) built from R
/// independent derivative-martingale environments.
class FixedPointModel {
 public:
  FixedPointModel(const EnsembleSpec& spec, const EigenSystem& eig, const FixedPointOptions& opt)
      : spec_(spec), eig_(eig), opt_(opt) {
    if (opt.replicates < 2) throw Error(ErrorKind::ConfigError, "need at least two replicates");
    if (opt.depth < 1) throw Error(ErrorKind::ConfigError, "depth must be positive");
    if (!(opt.K > 0.0)) throw Error(ErrorKind::ConfigError, "K must be positive");
    barrier_ = 0.0;
    if (!eig_.b.empty()) barrier_ = std::max(0.0, -*std::min_element(eig_.b.begin(), eig_.b.end()));
    if (opt.form == WForm::Point) barrier_ += std::max(0.0, std::log(opt.max_radius));
    envs_.resize(static_cast<std::size_t>(opt.replicates));
    std::vector<int> gens(envs_.size(), 0);
    std::vector<char> extended(envs_.size(), 0);
    const PopulationStepper stepper(spec_);
    const Stream root(opt.seed);
    parallel_for(envs_.size(), opt.workers, [&](std::size_t r, int) {
      Stream rng = root.child(0xF1, r);
      Population pop = Population::root(spec_.d);
      for (int g = 0; g < opt.depth; ++g) pop = stepper.step(pop, rng, opt.cap);
      if (opt.extend) {
        Population done, active;
        split(pop, done, active);
        int extra = 0;
        while (!active.empty()) {
          extended[r] = 1;
          if (++extra > opt.extension_limit)
            throw Error(ErrorKind::NonTermination, "barrier extension did not finish within the generation limit");
          Population next = stepper.step(active, rng, opt.cap);
          active = Population{};
          active.generation = next.generation;
          split(next, done, active);
        }
        done.generation = pop.generation + extra;
        pop = std::move(done);
      }
      gens[r] = pop.generation;
      envs_[r] = std::move(pop);
    });
    for (std::size_t r = 0; r < envs_.size(); ++r) {
      stats_.mean_classes += static_cast<double>(envs_[r].classes()) / static_cast<double>(envs_.size());
      stats_.max_classes = std::max(stats_.max_classes, static_cast<double>(envs_[r].classes()));
      stats_.max_generation = std::max(stats_.max_generation, gens[r]);
      stats_.extended_fraction += extended[r] ? 1.0 / static_cast<double>(envs_.size()) : 0.0;
    }
  }

  int replicates() const { return static_cast<int>(envs_.size()); }
  double alpha() const { return eig_.s; }
  double K() const { return opt_.K; }
  double barrier() const { return barrier_; }
  const EigenSystem& eig() const { return eig_; }
  const EnsembleSpec& spec() const { return spec_; }
  const FixedPointOptions& options() const { return opt_; }
  const FixedPointStats& stats() const { return stats_; }
  const Population& environment(std::size_t r) const { return envs_[r]; }

  struct Values {
    std::vector<double> W;   ///< Ŵ_r(u)
    std::vector<double> DW;  ///< 𝒲̂_r(u)
  };

  /// Ŵ_r(u) and 𝒲̂_r(u) for every replicate r; cached per exact direction.
  const Values& values(const Direction& u) const {
    const auto key = detail::direction_key(u);
    auto it = wcache_.find(key);
    if (it != wcache_.end()) return it->second;
    if (wcache_.size() > 4096) wcache_.clear();
    Values v;
    v.W.resize(envs_.size());
    v.DW.resize(envs_.size());
    const int workers = std::max(1, opt_.workers);
    std::vector<std::unique_ptr<DirectionCache>> caches;
    for (int k = 0; k < workers; ++k) caches.push_back(std::make_unique<DirectionCache>(eig_));
    parallel_for(envs_.size(), workers, [&](std::size_t r, int k) {
      const auto g = evaluate_generation(envs_[r].L, envs_[r].mult, u, eig_, *caches[static_cast<std::size_t>(k)], false);
      v.W[r] = g.W;
      v.DW[r] = g.DW;
    });
    return wcache_.emplace(key, std::move(v)).first->second;
  }

  const std::vector<double>& W_hat(const Direction& u) const { return values(u).DW; }

  double positive_fraction(const Direction& u) const {
    const auto& w = W_hat(u);
    return static_cast<double>(std::count_if(w.begin(), w.end(), [](double x) { return x > 0.0; })) /
           static_cast<double>(w.size());
  }

  /// K 𝒲̂_r(ρu) for every replicate. Past `max_radius` the point form is
  /// continued α-homogeneously, so exponents stay nonnegative under extension.
  void exponents(const Direction& u, double rho, std::vector<double>& out) const {
    const auto& v = values(u);
    const double scale = std::pow(rho, alpha()) * opt_.K;
    const double shift = opt_.form == WForm::Point ? std::log(std::min(rho, opt_.max_radius)) : 0.0;
    out.resize(v.DW.size());
    for (std::size_t r = 0; r < out.size(); ++r) out[r] = scale * (v.DW[r] - shift * v.W[r]);
  }

  /// 1 − φ̂(x), memoized per point; expm1 keeps small values accurate.
  double one_minus_phi(const Vec& x) const {
    const double n = x.norm();
    if (!(n > 0.0)) return 0.0;
    const Direction u = detail::snap(Direction::normalize(x));
    detail::PointKey key{detail::direction_key(u), 0};
    std::memcpy(&key.rho, &n, sizeof n);
    auto it = pcache_.find(key);
    if (it != pcache_.end()) return it->second;
    if (pcache_.size() > 2000000) pcache_.clear();
    thread_local std::vector<double> ex;
    exponents(u, n, ex);
    double acc = 0.0;
    for (double e : ex) acc -= std::expm1(-e);
    const double a = acc / static_cast<double>(ex.size());
    pcache_.emplace(key, a);
    return a;
  }

  double phi(const Vec& x) const { return 1.0 - one_minus_phi(x); }

  /// log φ̂(x); a log-sum-exp keeps it finite where φ̂ underflows.
  double log_phi(const Vec& x) const {
    const double a = one_minus_phi(x);
    if (a < 0.5) return std::log1p(-a);
    const double n = x.norm();
    const Direction u = detail::snap(Direction::normalize(x));
    detail::PointKey key{detail::direction_key(u), 0};
    std::memcpy(&key.rho, &n, sizeof n);
    auto it = lcache_.find(key);
    if (it != lcache_.end()) return it->second;
    std::vector<double> ex;
    exponents(u, n, ex);
    const double lo = *std::min_element(ex.begin(), ex.end());
    double acc = 0.0;
    for (double e : ex) acc += std::exp(lo - e);
    const double l = -lo + std::log(acc / static_cast<double>(ex.size()));
    lcache_.emplace(key, l);
    return l;
  }

  Estimate phi_estimate(const Vec& x) const {
    const double n = x.norm();
    if (!(n > 0.0)) return {1.0, 0.0};
    std::vector<double> e;
    exponents(detail::snap(Direction::normalize(x)), n, e);
    for (auto& v : e) v = std::exp(-v);
    const auto ms = mean_se(e);
    return {ms.mean, ms.se};
  }

  /// Value Σ c (1 − φ̂) of a linear form and its standard error from the
  /// per-replicate influence values.
  Estimate evaluate(const LinearForm& form) const {
    std::vector<double> psi(envs_.size(), 0.0);
    std::vector<double> ex;
    for (const auto& [key, slot] : form.terms()) {
      for (const auto& [rho, c] : slot.second) {
        exponents(slot.first, rho, ex);
        for (std::size_t r = 0; r < ex.size(); ++r) psi[r] -= c * std::expm1(-ex[r]);
      }
    }
    const auto ms = mean_se(psi);
    return {ms.mean, ms.se};
  }

  /// Largest t for which levels are resolved by the stored depth:
  /// 0.8 · depth · median tilted increment.
  double t_max() const {
    if (t_max_ < 0.0) {
      Stream rng = Stream(opt_.seed).child(0xF2, 0);
      const Direction start = eig_.grid()[eig_.disc->center_index];
      const auto tr = simulate(eig_, start, 4000, rng);
      std::vector<double> inc;
      for (std::size_t i = 1; i < tr.states.size(); ++i) inc.push_back(tr.states[i].s - tr.states[i - 1].s);
      t_max_ = 0.8 * opt_.depth * median(inc);
    }
    return t_max_;
  }

  void require_t(double t) const {
    if (t > t_max())
      throw Error(ErrorKind::DepthInsufficient,
                  "t = " + detail::fmt(t) + " exceeds the resolved range t_max = " + detail::fmt(t_max()));
  }

 private:
  void split(const Population& pop, Population& done, Population& active) const {
    for (std::size_t c = 0; c < pop.classes(); ++c) {
      Population& dst = -std::log(operator_norm(pop.L[c])) > barrier_ ? done : active;
      dst.L.push_back(pop.L[c]);
      dst.mult.push_back(pop.mult[c]);
    }
  }

  EnsembleSpec spec_;
  EigenSystem eig_;
  FixedPointOptions opt_;
  double barrier_ = 0.0;
  std::vector<Population> envs_;
  FixedPointStats stats_;
  mutable double t_max_ = -1.0;
  mutable std::unordered_map<detail::DirKey, Values, detail::DirKeyHash> wcache_;
  mutable std::unordered_map<detail::PointKey, double, detail::PointKeyHash> pcache_;
  mutable std::unordered_map<detail::PointKey, double, detail::PointKeyHash> lcache_;
};

// ---------------------------------------------------------------------------
// Laplace grid

struct LaplaceGrid {
  std::vector<Direction> directions;
  std::vector<double> radii;
  std::vector<std::vector<Estimate>> phi;  ///< [direction][radius]

  /// Largest increase of φ̂ between consecutive radii, in units of the
  /// standard error of the step (≤ 0 when every ray decreases).
  double worst_increase_z() const {
    double worst = -INFINITY;
    for (const auto& row : phi)
      for (std::size_t j = 1; j < row.size(); ++j) {
        const double se = std::hypot(row[j].se, row[j - 1].se);
        const double dz = (row[j].value - row[j - 1].value) / (se > 0.0 ? se : 1e-300);
        worst = std::max(worst, dz);
      }
    return worst;
  }
};

inline LaplaceGrid laplace_grid(const FixedPointModel& fpm, const std::vector<Direction>& dirs, std::vector<double> radii) {
  std::sort(radii.begin(), radii.end());
  LaplaceGrid g;
  g.directions = dirs;
  g.radii = radii;
  for (const auto& u : dirs) {
    std::vector<Estimate> row;
    for (double r : radii) row.push_back(fpm.phi_estimate(r * u.coords()));
    g.phi.push_back(std::move(row));
  }
  return g;
}

// ---------------------------------------------------------------------------
// Fixed-point residual

struct ResidualPoint {
  double r = 0.0;
  Direction u;
  double lhs = 0.0;
  double rhs = 0.0;
  Estimate residual;
};

struct ResidualReport {
  std::vector<ResidualPoint> points;
  double max_abs = 0.0;
  double max_abs_z = 0.0;
};

/// φ̂(x) against mean over tuples of Π φ̂(T_iᵀx). The standard error combines
/// the replicate influence of both sides with the tuple sampling variance.
inline ResidualReport fixed_point_residual(const FixedPointModel& fpm, const std::vector<std::pair<double, Direction>>& grid,
                                           const TupleSet& tuples) {
  ResidualReport rep;
  for (const auto& [r, u] : grid) {
    ResidualPoint p;
    p.r = r;
    p.u = u;
    const Vec x = r * u.coords();
    p.lhs = fpm.phi(x);
    LinearForm form;
    form.add(x, -1.0);  // φ̂(x) = 1 − a(x)
    std::vector<double> prods(tuples.size());
    for (std::size_t j = 0; j < tuples.size(); ++j) {
      const auto& mats = tuples.matrices[j];
      std::vector<Vec> kids;
      std::vector<double> ph;
      for (const auto& t : mats) {
        kids.push_back(t.transpose() * x);
        ph.push_back(fpm.phi(kids.back()));
      }
      double prod = 1.0;
      for (double v : ph) prod *= v;
      prods[j] = prod;
      p.rhs += tuples.weight[j] * prod;
      // ∂Π/∂a_i = −Π_{k≠i} φ̂_k, and the residual subtracts the product
      for (std::size_t i = 0; i < kids.size(); ++i) {
        double others = 1.0;
        for (std::size_t k = 0; k < kids.size(); ++k)
          if (k != i) others *= ph[k];
        form.add(kids[i], tuples.weight[j] * others);
      }
    }
    const Estimate lin = fpm.evaluate(form);
    const double outer = detail::mean_variance(tuples.weight, prods, tuples.draws);
    p.residual = {p.lhs - p.rhs, std::sqrt(lin.se * lin.se + outer)};
    rep.max_abs = std::max(rep.max_abs, std::abs(p.residual.value));
    rep.max_abs_z = std::max(rep.max_abs_z, std::abs(p.residual.z()));
    rep.points.push_back(p);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// D, G and the renewal equation

namespace detail {

/// Π(1 − a_i) + Σ a_i − 1 accumulated without cancellation; nonnegative for
/// a_i ∈ [0, 1].
inline double excess(std::span<const double> a) {
  double e = 0.0, sum = 0.0;
  for (double ai : a) {
    e = e * (1.0 - ai) + ai * sum;
    sum += ai;
  }
  return e;
}

/// ∂excess/∂a_i = 1 − Π_{k≠i}(1 − a_k).
inline double excess_partial(std::span<const double> a, std::size_t i) {
  double p = 1.0;
  for (std::size_t k = 0; k < a.size(); ++k)
    if (k != i) p *= 1.0 - a[k];
  return -std::expm1(std::log(std::max(p, 1e-300)));
}

}  // namespace detail

/// D(u,t) = (1 − φ̂(e^{−t}u)) / (e^{−αt} H(u)).
inline double D_value(const FixedPointModel& fpm, const Direction& u, double t) {
  return fpm.one_minus_phi(std::exp(-t) * u.coords()) * std::exp(fpm.alpha() * t) / fpm.eig().H_at(u);
}

inline Estimate D_estimate(const FixedPointModel& fpm, const Direction& u, double t) {
  LinearForm f;
  f.add(std::exp(-t) * u.coords(), std::exp(fpm.alpha() * t) / fpm.eig().H_at(u));
  return fpm.evaluate(f);
}

/// G(u,t) = (e^{αt}/H(u)) · E[Π φ̂(e^{−t}T_iᵀu) + Σ(1 − φ̂(e^{−t}T_iᵀu)) − 1].
/// When `form` is given, the linearization of G in 1 − φ̂ is added to it;
/// `per_tuple` receives the scaled excess of every tuple.
inline double G_value(const FixedPointModel& fpm, const Direction& u, double t, const TupleSet& tuples,
                      LinearForm* form = nullptr, std::vector<double>* per_tuple = nullptr, double scale = 1.0) {
  const double f = std::exp(fpm.alpha() * t) / fpm.eig().H_at(u);
  const Vec x = std::exp(-t) * u.coords();
  double g = 0.0;
  if (per_tuple) per_tuple->assign(tuples.size(), 0.0);
  std::vector<double> a;
  std::vector<Vec> kids;
  for (std::size_t j = 0; j < tuples.size(); ++j) {
    a.clear();
    kids.clear();
    for (const auto& m : tuples.matrices[j]) {
      kids.push_back(m.transpose() * x);
      a.push_back(fpm.one_minus_phi(kids.back()));
    }
    const double e = detail::excess(a);
    g += tuples.weight[j] * e;
    if (per_tuple) (*per_tuple)[j] = f * e;
    if (form)
      for (std::size_t i = 0; i < kids.size(); ++i)
        form->add(kids[i], scale * f * tuples.weight[j] * detail::excess_partial(a, i));
  }
  return f * g;
}

struct RenewalDiagnostics {
  Direction u;
  std::vector<double> t;
  std::vector<Estimate> D, G, residual;
  /// e^{−αt}G at consecutive grid points: later minus earlier.
  std::vector<Estimate> eG_step;
  bool G_nonnegative = true;
  bool eG_monotone = true;  ///< every step ≤ 3 standard errors
  double max_abs_z = 0.0;
  double t_max = 0.0;

  // Projection onto regeneration cycles, present with a schedule.
  bool has_regen = false;
  std::vector<double> D_hat, g_hat, hat_residual, hat_ratio;
  std::vector<double> g_tail;  ///< partial sums of unit-interval suprema of ĝ
  double beyond_t_max = 0.0;   ///< share of projected lookups past t_max
  std::size_t cycles = 0;
};

struct RenewalOptions {
  long tuples = 5000;
  long kernel_samples = 5000;  ///< continuous ensembles only
  std::uint64_t seed = 2;
  std::size_t max_cycles = 1000;
  double table_step = 0.05;  ///< t spacing of the interpolation tables used for D̂ and ĝ
};

namespace detail {

/// Piecewise linear tables of D(u,·) and G(u,·) per direction, filled lazily.
class CurveTables {
 public:
  CurveTables(const FixedPointModel& fpm, const TupleSet& tuples, double step)
      : fpm_(&fpm), tuples_(&tuples), step_(step) {}

  double D(const Direction& u, double t) { return interp(u, t, false); }
  double G(const Direction& u, double t) { return interp(u, t, true); }

 private:
  double node(const Direction& u, long i, bool g) {
    const auto key = std::make_tuple(direction_key(u), i, g);
    auto it = values_.find(key);
    if (it != values_.end()) return it->second;
    const double t = static_cast<double>(i) * step_;
    const double v = g ? G_value(*fpm_, u, t, *tuples_) : D_value(*fpm_, u, t);
    values_.emplace(key, v);
    return v;
  }

  double interp(const Direction& u, double t, bool g) {
    const double x = t / step_;
    const long i = static_cast<long>(std::floor(x));
    const double f = x - static_cast<double>(i);
    const double lo = node(u, i, g);
    if (f == 0.0) return lo;
    return lo + f * (node(u, i + 1, g) - lo);
  }

  const FixedPointModel* fpm_;
  const TupleSet* tuples_;
  double step_;
  std::map<std::tuple<DirKey, long, bool>, double> values_;
};

}  // namespace detail

/// D and G along a t grid with the renewal residual
/// D(u,t) − [E_u^α D(U₁, t+S₁) − G(u,t)]; tuples and kernel draws are shared
/// across t. With a regeneration schedule the projected D̂, ĝ and the D̂/D
/// ratio are added.
inline RenewalDiagnostics D_G_curves(const FixedPointModel& fpm, const Direction& u, const std::vector<double>& t_grid,
                                     const RenewalOptions& opt = {}, const RegenSchedule* schedule = nullptr) {
  RenewalDiagnostics out;
  out.u = u;
  out.t = t_grid;
  out.t_max = fpm.t_max();
  for (double t : t_grid) fpm.require_t(t);
  const auto& eig = fpm.eig();
  const double a = fpm.alpha();
  const Stream root(opt.seed);
  const TupleSet tuples = sample_tuples(fpm.spec(), opt.tuples, root.child(1));

  // tilted kernel outcomes: exact for finite ensembles, sampled otherwise
  std::vector<KernelOutcome> outcomes;
  double kernel_draws = 0.0;
  if (eig.disc->exact) {
    outcomes = eig.kernel(u);
  } else {
    TiltedKernel kernel(eig);
    Stream krng = root.child(2);
    for (long j = 0; j < opt.kernel_samples; ++j) {
      const auto st = kernel.step({u, 0.0, 0}, krng);
      outcomes.push_back({0, 1.0 / static_cast<double>(opt.kernel_samples), st.u, st.s});
    }
    kernel_draws = static_cast<double>(opt.kernel_samples);
  }

  std::vector<double> prev_excess;
  double prev_eG = 0.0;
  for (std::size_t k = 0; k < t_grid.size(); ++k) {
    const double t = t_grid[k];
    const double f = std::exp(a * t) / eig.H_at(u);
    out.D.push_back(D_estimate(fpm, u, t));

    LinearForm gform;
    std::vector<double> per_tuple;
    const double g = G_value(fpm, u, t, tuples, &gform, &per_tuple);
    const Estimate glin = fpm.evaluate(gform);
    const double gvar_tuple = detail::mean_variance(tuples.weight, per_tuple, tuples.draws);
    out.G.push_back({g, std::sqrt(glin.se * glin.se + gvar_tuple)});
    if (!(g >= 0.0)) out.G_nonnegative = false;

    // residual
    LinearForm rform;
    rform.add(std::exp(-t) * u.coords(), f);
    double expect = 0.0;
    std::vector<double> kvals;
    std::vector<double> kweights;
    for (const auto& o : outcomes) {
      const double c = std::exp(a * (t + o.increment)) / eig.H_at(o.direction);
      const Vec y = std::exp(-(t + o.increment)) * o.direction.coords();
      const double d = fpm.one_minus_phi(y) * c;
      expect += o.prob * d;
      kvals.push_back(d);
      kweights.push_back(o.prob);
      rform.add(y, -o.prob * c);
    }
    rform.append(gform);
    const Estimate rlin = fpm.evaluate(rform);
    const double kvar = detail::mean_variance(kweights, kvals, kernel_draws);
    const double res = out.D.back().value - expect + g;
    out.residual.push_back({res, std::sqrt(rlin.se * rlin.se + gvar_tuple + kvar)});
    out.max_abs_z = std::max(out.max_abs_z, std::abs(out.residual.back().z()));

    // paired step of e^{−αt}G = mean excess / H(u)
    const double h = eig.H_at(u);
    std::vector<double> cur(per_tuple.size());
    for (std::size_t j = 0; j < cur.size(); ++j) cur[j] = per_tuple[j] / (f * h);
    const double eG = g / (f * h);
    if (k > 0) {
      LinearForm step_form;
      G_value(fpm, u, t, tuples, &step_form, nullptr, std::exp(-a * t));
      G_value(fpm, u, t_grid[k - 1], tuples, &step_form, nullptr, -std::exp(-a * t_grid[k - 1]));
      const Estimate slin = fpm.evaluate(step_form);
      std::vector<double> diff(cur.size());
      for (std::size_t j = 0; j < diff.size(); ++j) diff[j] = cur[j] - prev_excess[j];
      const double svar = detail::mean_variance(tuples.weight, diff, tuples.draws);
      const Estimate st{eG - prev_eG, std::sqrt(slin.se * slin.se + svar)};
      out.eG_step.push_back(st);
      if (st.value > 3.0 * st.se) out.eG_monotone = false;
    }
    prev_eG = eG;
    prev_excess = std::move(cur);
  }

  if (schedule && schedule->sigma.size() >= 3) {
    out.has_regen = true;
    const TupleSet gt = fpm.spec().finite() ? exact_tuples(fpm.spec()) : tuples;
    detail::CurveTables tab(fpm, gt, opt.table_step);
    const auto& states = schedule->trajectory.states;
    const std::size_t C = std::min(opt.max_cycles, schedule->sigma.size() - 1);
    out.cycles = C;
    std::size_t lookups = 0, beyond = 0;
    auto Dt = [&](const Direction& v, double t) {
      ++lookups;
      if (t > out.t_max) ++beyond;
      return tab.D(v, t);
    };
    auto Gt = [&](const Direction& v, double t) {
      ++lookups;
      if (t > out.t_max) ++beyond;
      return tab.G(v, t);
    };
    auto d_hat = [&](double t) {
      double acc = 0.0;
      for (std::size_t c = 0; c < C; ++c) acc += Dt(schedule->cycle_end[c], t + schedule->v_increment[c]);
      return acc / static_cast<double>(C);
    };
    auto g_hat = [&](double t) {
      double acc = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        const double v = schedule->v_increment[(c + 1) % C];  // independent copy of V₁
        const auto lo = static_cast<std::size_t>(schedule->sigma[c] - 1);
        const auto hi = static_cast<std::size_t>(schedule->sigma[c + 1] - 1);
        for (std::size_t i = lo; i < hi; ++i) acc += Gt(states[i].u, t + v + states[i].s - states[lo].s);
      }
      return acc / static_cast<double>(C);
    };
    for (std::size_t k = 0; k < t_grid.size(); ++k) {
      const double t = t_grid[k];
      const double dh = d_hat(t);
      const double gh = g_hat(t);
      double shifted = 0.0;
      for (std::size_t c = 0; c < C; ++c) shifted += d_hat(t + schedule->v_increment[c]);
      shifted /= static_cast<double>(C);
      out.D_hat.push_back(dh);
      out.g_hat.push_back(gh);
      out.hat_residual.push_back(dh - (shifted - gh));
      out.hat_ratio.push_back(dh / out.D[k].value);
    }
    double partial = 0.0;
    for (int unit = 0; unit < static_cast<int>(std::floor(out.t_max)); ++unit) {
      double sup = 0.0;
      for (int q = 0; q <= 4; ++q) sup = std::max(sup, g_hat(unit + 0.25 * q));
      partial += sup;
      out.g_tail.push_back(partial);
    }
    out.beyond_t_max = lookups ? static_cast<double>(beyond) / static_cast<double>(lookups) : 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Slow variation and the log law

struct SlowVarReport {
  Direction u0;
  std::vector<double> t, s;
  std::vector<Direction> directions;
  /// h[i][j][k] = h_{t_j}(directions[i], s_k)
  std::vector<std::vector<std::vector<double>>> h;
  std::vector<Estimate> D_u0;
  double Kprime = 0.0;
  double Kprime_se = 0.0;
  std::array<double, 2> band{};  ///< K′ ± 2 se
  double ratio_variation = 0.0;  ///< max/min − 1 of D(u0,t)/t over the fitted range
  bool increasing = true;        ///< D(u0,·) strictly increasing on the fitted range
  std::vector<double> fit_t;
};

/// u0 default: normalized π-mean direction, which must lie in the interior.
inline Direction default_u0(const EigenSystem& eig) {
  const Direction u = pi_mean_direction(eig);
  if (!u.interior()) throw Error(ErrorKind::ValidationFailure, "π-mean direction is on the boundary");
  return u;
}

inline SlowVarReport slowvar_diag(const FixedPointModel& fpm, const Direction& u0, const std::vector<Direction>& dirs,
                                  const std::vector<double>& s_grid, const std::vector<double>& t_grid) {
  SlowVarReport rep;
  rep.u0 = u0;
  rep.t = t_grid;
  rep.s = s_grid;
  rep.directions = dirs;
  for (double t : t_grid) {
    fpm.require_t(t);
    for (double s : s_grid) fpm.require_t(s + t);
  }
  for (const auto& u : dirs) {
    std::vector<std::vector<double>> rows;
    for (double t : t_grid) {
      const double base = D_value(fpm, u0, t);
      std::vector<double> row;
      for (double s : s_grid) row.push_back(D_value(fpm, u, s + t) / base);
      rows.push_back(std::move(row));
    }
    rep.h.push_back(std::move(rows));
  }
  for (double t : t_grid) rep.D_u0.push_back(D_estimate(fpm, u0, t));

  // linear fit on the upper half of the grid
  const std::size_t lo = t_grid.size() / 2 > 0 && t_grid.size() % 2 == 0 ? t_grid.size() / 2 - 1 : t_grid.size() / 2;
  std::vector<double> tt, yy, ss;
  for (std::size_t i = lo; i < t_grid.size(); ++i) {
    tt.push_back(t_grid[i]);
    yy.push_back(rep.D_u0[i].value);
    ss.push_back(rep.D_u0[i].se);
  }
  rep.fit_t = tt;
  const auto fit = linear_fit(tt, yy, ss);
  rep.Kprime = fit.slope;
  rep.Kprime_se = fit.slope_se;
  rep.band = {fit.slope - 2.0 * fit.slope_se, fit.slope + 2.0 * fit.slope_se};
  double rmin = INFINITY, rmax = -INFINITY;
  for (std::size_t i = 0; i < tt.size(); ++i) {
    const double q = yy[i] / tt[i];
    rmin = std::min(rmin, q);
    rmax = std::max(rmax, q);
    if (i > 0 && !(yy[i] > yy[i - 1])) rep.increasing = false;
  }
  rep.ratio_variation = rmax / rmin - 1.0;
  return rep;
}

// ---------------------------------------------------------------------------
// Homogeneity of Z

struct HomogeneityReport {
  Direction u;
  int depth = 0;
  long trees = 0;
  std::vector<double> r;
  std::vector<Estimate> ratio;  ///< Z_n(ru)/Z_n(u) / r^α
};

/// Z_n(x) = −Σ log φ̂(L(v)ᵀx) over generation `depth` of fresh trees, using
/// log φ̂ so that the tiny arguments deep in the tree keep their precision.
inline HomogeneityReport homogeneity_check(const FixedPointModel& fpm, const Direction& u, const std::vector<double>& r_list,
                                           int depth, long trees, std::uint64_t seed, int workers = 1) {
  HomogeneityReport rep;
  rep.u = u;
  rep.depth = depth;
  rep.trees = trees;
  rep.r = r_list;
  const PopulationStepper stepper(fpm.spec());
  std::vector<Population> pops(static_cast<std::size_t>(trees));
  const Stream root(seed);
  parallel_for(pops.size(), workers, [&](std::size_t i, int) {
    Stream rng = root.child(0xF3, i);
    Population p = Population::root(fpm.spec().d);
    for (int g = 0; g < depth; ++g) p = stepper.step(p, rng, fpm.options().cap);
    pops[i] = std::move(p);
  });
  auto Z = [&](const Population& p, const Vec& x) {
    double z = 0.0;
    for (std::size_t c = 0; c < p.classes(); ++c) z -= p.mult[c] * fpm.log_phi(p.L[c].transpose() * x);
    return z;
  };
  std::vector<double> base(pops.size());
  for (std::size_t i = 0; i < pops.size(); ++i) base[i] = Z(pops[i], u.coords());
  const auto mb = mean_se(base);
  for (double r : r_list) {
    std::vector<double> top(pops.size());
    for (std::size_t i = 0; i < pops.size(); ++i) top[i] = Z(pops[i], r * u.coords());
    const auto mt = mean_se(top);
    const double q = mt.mean / mb.mean;
    // delta method for a ratio of paired means
    std::vector<double> infl(pops.size());
    for (std::size_t i = 0; i < pops.size(); ++i) infl[i] = (top[i] - q * base[i]) / mb.mean;
    const double target = std::pow(r, fpm.alpha());
    rep.ratio.push_back({q / target, mean_se(infl).se / target});
  }
  return rep;
}

}  // namespace critsmooth
