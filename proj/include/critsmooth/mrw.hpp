#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "critsmooth/cone_geometry.hpp"
#include "critsmooth/errors.hpp"
#include "critsmooth/model.hpp"
#include "critsmooth/random.hpp"
#include "critsmooth/spectral.hpp"

namespace critsmooth {

struct ChainState {
  Direction u;
  double s = 0.0;
  long n = 0;
};

/// Samples the tilted kernel Q̄: M from μ reweighted by |Mᵀu|^α H(Mᵀ∘u),
/// U′ = Mᵀ∘u and S′ = S − log|Mᵀu|.
class TiltedKernel {
 public:
  explicit TiltedKernel(const EigenSystem& eig) : eig_(&eig) {
    const auto& d = *eig.disc;
    if (!d.exact) {
      const double hmax = *std::max_element(eig.H.begin(), eig.H.end());
      const double top = operator_norm(d.spec.center()) + d.spec.radius();
      bound_ = std::pow(top, eig.s) * hmax;
      center_t_ = d.spec.center().transpose();
    }
  }

  ChainState step(const ChainState& st, Stream& rng) const {
    if (eig_->disc->exact) {
      const auto outcomes = cached(st.u);
      double x = rng.uniform();
      for (const auto& o : outcomes) {
        x -= o.prob;
        if (x <= 0.0) return {o.direction, st.s + o.increment, st.n + 1};
      }
      const auto& o = outcomes.back();
      return {o.direction, st.s + o.increment, st.n + 1};
    }
    // rejection against sup ‖M‖^α · max H
    const double r = eig_->disc->spec.radius();
    for (long tries = 1;; ++tries) {
      const Mat a = sample_ball_matrix(center_t_, r, rng);
      const auto img = act(a, st.u);
      const double w = std::exp(-eig_->s * img.level) * eig_->H_grid(img.direction);
      if (w > bound_ * (1.0 + 1e-12)) throw Error(ErrorKind::RejectionStall, "rejection bound violated");
      if (rng.uniform() * bound_ <= w) return {img.direction, st.s + img.level, st.n + 1};
      if (tries >= 100000) throw Error(ErrorKind::RejectionStall, "acceptance rate below 1e-5");
    }
  }

  const EigenSystem& eig() const { return *eig_; }

 private:
  std::vector<KernelOutcome> cached(const Direction& u) const {
    for (const auto& [dir, outs] : cache_) {
      if (dir.coords() == u.coords()) return outs;
    }
    auto outs = eig_->kernel(u);
    if (cache_.size() < 64) cache_.emplace_back(u, outs);
    return outs;
  }

  const EigenSystem* eig_;
  double bound_ = 0.0;
  Mat center_t_;
  mutable std::vector<std::pair<Direction, std::vector<KernelOutcome>>> cache_;
};

inline ChainState step_tilted(const EigenSystem& eig, const ChainState& st, Stream& rng) {
  return TiltedKernel(eig).step(st, rng);
}

struct Trajectory {
  std::vector<ChainState> states;
  double min_s = 0.0;
  double max_s = 0.0;
  double mean_increment = 0.0;
  double sd_increment = 0.0;

  double drift() const { return states.size() > 1 ? states.back().s / static_cast<double>(states.size() - 1) : 0.0; }
};

inline Trajectory simulate(const EigenSystem& eig, const Direction& u0, long n, Stream& rng) {
  Trajectory tr;
  TiltedKernel kernel(eig);
  tr.states.reserve(static_cast<std::size_t>(n) + 1);
  tr.states.push_back({u0, 0.0, 0});
  double sum = 0.0, sum2 = 0.0;
  for (long i = 0; i < n; ++i) {
    tr.states.push_back(kernel.step(tr.states.back(), rng));
    const double y = tr.states.back().s - tr.states[tr.states.size() - 2].s;
    sum += y;
    sum2 += y * y;
    tr.min_s = std::min(tr.min_s, tr.states.back().s);
    tr.max_s = std::max(tr.max_s, tr.states.back().s);
  }
  if (n > 0) {
    tr.mean_increment = sum / static_cast<double>(n);
    tr.sd_increment = n > 1 ? std::sqrt(std::max(0.0, (sum2 - sum * sum / n) / (n - 1))) : 0.0;
  }
  return tr;
}

// ---------------------------------------------------------------------------
// Many-to-one by exhaustive enumeration

using PathFunctional = std::function<double(std::span<const ChainState>)>;

struct ManyToOne {
  double lhs = 0.0;
  double rhs = 0.0;
  double error = 0.0;
  std::size_t lhs_outcomes = 0;
  std::size_t rhs_outcomes = 0;
};

/// Left side: Σ over index words v of length n and the tuples along the
/// ancestral line of v (the summand only depends on those), divided by
/// H(u) m(α)ⁿ. Right side: all atom sequences of the tilted chain.
inline ManyToOne many_to_one_check(const EigenSystem& eig, const Direction& u, int n, const PathFunctional& f,
                                   std::size_t limit = 1'000'000) {
  const auto& d = *eig.disc;
  if (!d.exact) throw Error(ErrorKind::ModeUnsupported, "enumeration needs a finite ensemble");
  const auto& spec = d.spec;
  std::size_t per_level = 0;
  for (const auto& t : spec.templates) per_level += t.matrices.size();
  ManyToOne out;
  double lhs_count = std::pow(static_cast<double>(per_level), n);
  double rhs_count = std::pow(static_cast<double>(d.atoms.size()), n);
  if (lhs_count > static_cast<double>(limit) || rhs_count > static_cast<double>(limit)) {
    throw Error(ErrorKind::EnumerationTooLarge,
                "enumeration needs " + detail::fmt(std::max(lhs_count, rhs_count)) + " outcomes");
  }
  out.lhs_outcomes = static_cast<std::size_t>(lhs_count);
  out.rhs_outcomes = static_cast<std::size_t>(rhs_count);

  std::vector<ChainState> path(static_cast<std::size_t>(n) + 1);
  path[0] = {u, 0.0, 0};

  // transposed weights, template by template
  std::vector<std::vector<Mat>> tw(spec.templates.size());
  for (std::size_t t = 0; t < spec.templates.size(); ++t)
    for (std::size_t i = 0; i < spec.templates[t].matrices.size(); ++i) tw[t].push_back(spec.weight(t, i).transpose());

  double lhs = 0.0;
  auto rec_l = [&](auto&& self, int k, double prob) -> void {
    if (k == n) {
      const auto& st = path[static_cast<std::size_t>(n)];
      lhs += prob * f(path) * std::exp(-eig.s * st.s) * eig.H_at(st.u);
      return;
    }
    const auto& cur = path[static_cast<std::size_t>(k)];
    for (std::size_t t = 0; t < tw.size(); ++t) {
      for (const auto& m : tw[t]) {
        const auto r = act(m, cur.u);
        path[static_cast<std::size_t>(k) + 1] = {r.direction, cur.s + r.level, k + 1};
        self(self, k + 1, prob * spec.templates[t].prob);
      }
    }
  };
  rec_l(rec_l, 0, 1.0);
  out.lhs = lhs / (eig.H_at(u) * std::pow(eig.m, n));

  double rhs = 0.0;
  auto rec_r = [&](auto&& self, int k, double prob) -> void {
    if (k == n) {
      rhs += prob * f(path);
      return;
    }
    const auto& cur = path[static_cast<std::size_t>(k)];
    for (const auto& o : eig.kernel(cur.u)) {
      path[static_cast<std::size_t>(k) + 1] = {o.direction, cur.s + o.increment, k + 1};
      self(self, k + 1, prob * o.prob);
    }
  };
  rec_r(rec_r, 0, 1.0);
  out.rhs = rhs;
  out.error = std::abs(out.lhs - out.rhs);
  return out;
}

// ---------------------------------------------------------------------------
// Regeneration

enum class RegenMode { Atom, Split };

struct SplitParameters {
  Direction v0;          ///< Perron vector of A₀ = a₀ᵀ
  double lambda0 = 0.0;  ///< its eigenvalue
  double delta = 0.0;    ///< certified angular radius of the small set around v0
  double gamma = 0.0;    ///< certified lower bound of the minorization constant
  double h_hi = 0.0;     ///< max of H over the small set
  double h_min = 0.0;    ///< min of H over the image set of η
  double eta_bound = 0.0;
};

struct RegenSchedule {
  RegenMode mode = RegenMode::Atom;
  Direction atom;
  std::vector<long> sigma;          ///< regeneration times, increasing
  std::vector<long> cycle_length;   ///< σ_{k+1} − σ_k
  std::vector<double> v_increment;  ///< S_{σ_{k+1}−1} − S_{σ_k−1}
  std::vector<Direction> cycle_end;  ///< U_{σ_{k+1}−1}
  SplitParameters split;
  Trajectory trajectory;
};

/// Default atom: lexicographically smallest state among the rank-one images.
inline Direction default_atom(const EnsembleSpec& spec) {
  std::vector<Direction> states;
  for (const auto& t : spec.templates)
    for (const auto& r : t.rank_one) states.push_back(r.w);
  if (states.empty()) throw Error(ErrorKind::ModeUnsupported, "atom mode needs rank-one weights");
  return *std::min_element(states.begin(), states.end());
}

/// Atom mode on a simulated trajectory. With V the visit times to the atom,
/// σ_k = V_k + 1 so that U_{σ_k − 1} is the atom and the step leaving it
/// starts a fresh cycle.
inline RegenSchedule regenerate_atom(const EigenSystem& eig, const Trajectory& tr, const Direction& atom) {
  if (!eig.disc->exact || eig.disc->spec.kind != EnsembleKind::RankOneFinite) {
    throw Error(ErrorKind::ModeUnsupported, "atom mode needs a finite rank-one ensemble");
  }
  RegenSchedule r;
  r.mode = RegenMode::Atom;
  r.atom = atom;
  r.trajectory = tr;
  std::vector<long> visits;
  for (const auto& st : tr.states) {
    if (distance(st.u, atom) <= 1e-12) visits.push_back(st.n);
  }
  for (long v : visits) r.sigma.push_back(v + 1);
  for (std::size_t k = 0; k + 1 < visits.size(); ++k) {
    r.cycle_length.push_back(visits[k + 1] - visits[k]);
    r.v_increment.push_back(tr.states[static_cast<std::size_t>(visits[k + 1])].s -
                            tr.states[static_cast<std::size_t>(visits[k])].s);
    r.cycle_end.push_back(tr.states[static_cast<std::size_t>(visits[k + 1])].u);
  }
  return r;
}

namespace detail {

/// ‖A₀(O_u − I)‖_F with O_u the plane rotation carrying v0 onto u.
inline double rotation_defect(const Mat& a0, const Direction& v0, const Direction& u) {
  const Mat o = plane_rotation(v0, u);
  return (a0 * (o - Mat::Identity(o.rows(), o.cols()))).norm();
}

}  // namespace detail

/// Certifies the split-chain minorization for a uniform-ball ensemble.
///
/// For u in the small set, b = M O_u with O_u v0 = u is uniform on a ball
/// containing B_{c/2}(A₀), so Q̄(u,·) ≥ γ η(·) with η the law of
/// (b∘v0, −log|b v0|) under density ∝ |b v0|^α H(b∘v0) on B_{c/2}(A₀).
inline SplitParameters certify_split(const EigenSystem& eig, int angle_grid = 2000) {
  const auto& d = *eig.disc;
  if (d.exact) throw Error(ErrorKind::ModeUnsupported, "split mode needs a uniform-ball ensemble");
  const Mat a0 = d.spec.center().transpose();
  const double c = d.spec.radius();
  SplitParameters p;
  const auto pp = perron(a0);
  p.v0 = pp.vector;
  p.lambda0 = pp.lambda;
  // largest δ such that every u with angle ≤ δ keeps the rotated ball large
  const int dim = d.spec.d;
  double delta = 0.0;
  const double step = (std::numbers::pi / 2.0) / angle_grid;
  for (int k = 1; k <= angle_grid; ++k) {
    const double ang = k * step;
    bool ok = true;
    // probe the directions at angle `ang` along every basis-plane
    for (int j = 0; j < dim && ok; ++j) {
      Vec dirv = Vec::Zero(dim);
      dirv(j) = 1.0;
      Vec t = dirv - dirv.dot(p.v0.coords()) * p.v0.coords();
      if (t.norm() < 1e-12) continue;
      t.normalize();
      for (double sgn : {1.0, -1.0}) {
        Vec x = std::cos(ang) * p.v0.coords() + sgn * std::sin(ang) * t;
        if ((x.array() < 0.0).any()) continue;
        if (detail::rotation_defect(a0, p.v0, Direction::normalize(x)) > 0.5 * c) ok = false;
      }
    }
    if (!ok) break;
    delta = ang;
  }
  p.delta = delta;
  if (!(p.delta > 0.0)) throw Error(ErrorKind::MinorizationFailure, "no small set around v0");

  // H_hi bounds H on the small set {u : ‖A₀(O_u − I)‖_F ≤ c/2}; grid nodes up
  // to twice that defect are included so the interpolant is covered too
  p.h_hi = 0.0;
  for (std::size_t i = 0; i < d.grid.size(); ++i) {
    if (detail::rotation_defect(a0, p.v0, d.grid[i]) <= c) p.h_hi = std::max(p.h_hi, eig.H[i]);
  }
  p.h_min = *std::min_element(eig.H.begin(), eig.H.end());
  const double low = p.lambda0 - 0.5 * c;  // |b v0| ≥ λ₀ − c/2 on B_{c/2}(A₀)
  const double high = p.lambda0 + 0.5 * c;
  p.eta_bound = std::pow(high, eig.s) * *std::max_element(eig.H.begin(), eig.H.end());
  const double ratio = std::pow(0.5, dim * dim);  // vol B_{c/2} / vol B_c
  p.gamma = low > 0.0 ? std::pow(low, eig.s) * p.h_min * ratio / (eig.k * p.h_hi) : 0.0;
  if (!(p.gamma > 0.0)) throw Error(ErrorKind::MinorizationFailure, "certified gamma is not positive");
  return p;
}

/// One draw (w, y) from η by rejection from the uniform law on B_{c/2}(A₀).
inline std::pair<Direction, double> sample_eta(const EigenSystem& eig, const SplitParameters& p, Stream& rng) {
  const auto& d = *eig.disc;
  const Mat a0 = d.spec.center().transpose();
  for (long tries = 1;; ++tries) {
    const Mat b = sample_ball_matrix(a0, 0.5 * d.spec.radius(), rng);
    const auto r = act(b, p.v0);
    const double w = std::exp(-eig.s * r.level) * eig.H_grid(r.direction);
    if (rng.uniform() * p.eta_bound <= w) return {r.direction, r.level};
    if (tries >= 100000) throw Error(ErrorKind::RejectionStall, "eta sampler stalled");
  }
}

/// Split mode: simulates the chain from u0 for n steps. A move made from a
/// small-set state is flagged as regenerative with probability H(u)/H_hi when
/// the drawn matrix lies in the rotated half-radius ball; flagged moves are
/// exactly γ-fraction draws from η (retrospective Nummelin splitting).
inline RegenSchedule regenerate_split(const EigenSystem& eig, const Direction& u0, long n, Stream& rng) {
  const auto& d = *eig.disc;
  RegenSchedule r;
  r.mode = RegenMode::Split;
  r.split = certify_split(eig);
  const auto& p = r.split;
  const Mat a0 = d.spec.center().transpose();
  const double c = d.spec.radius();
  const double hmax = *std::max_element(eig.H.begin(), eig.H.end());
  const double bound = std::pow(operator_norm(a0) + c, eig.s) * hmax;

  auto& tr = r.trajectory;
  tr.states.push_back({u0, 0.0, 0});
  std::vector<long> flagged;  // times k such that (U_{k+1}, Y_{k+1}) ~ η
  for (long i = 0; i < n; ++i) {
    const auto& st = tr.states.back();
    Mat a;
    ActResult img;
    for (long tries = 1;; ++tries) {
      a = sample_ball_matrix(a0, c, rng);
      img = act(a, st.u);
      const double w = std::exp(-eig.s * img.level) * eig.H_grid(img.direction);
      if (rng.uniform() * bound <= w) break;
      if (tries >= 100000) throw Error(ErrorKind::RejectionStall, "acceptance rate below 1e-5");
    }
    if (detail::rotation_defect(a0, p.v0, st.u) <= 0.5 * c) {
      const Mat o = plane_rotation(p.v0, st.u);
      if ((a * o - a0).norm() <= 0.5 * c) {
        const double eps = eig.H_grid(st.u) / p.h_hi;
        if (eps > 1.0) throw Error(ErrorKind::MinorizationFailure, "H exceeds its small-set bound");
        if (rng.uniform() < eps) flagged.push_back(st.n);
      }
    }
    tr.states.push_back({img.direction, st.s + img.level, st.n + 1});
    tr.min_s = std::min(tr.min_s, tr.states.back().s);
    tr.max_s = std::max(tr.max_s, tr.states.back().s);
  }
  for (long k : flagged) r.sigma.push_back(k + 1);
  for (std::size_t j = 0; j + 1 < r.sigma.size(); ++j) {
    const auto a_end = static_cast<std::size_t>(r.sigma[j + 1] - 1);
    const auto a_beg = static_cast<std::size_t>(r.sigma[j] - 1);
    r.cycle_length.push_back(r.sigma[j + 1] - r.sigma[j]);
    r.v_increment.push_back(tr.states[a_end].s - tr.states[a_beg].s);
    r.cycle_end.push_back(tr.states[a_end].u);
  }
  return r;
}

struct RegenConfig {
  RegenMode mode = RegenMode::Atom;
  long steps = 100000;
  std::optional<Direction> atom;
  std::optional<Direction> start;
};

inline RegenSchedule regenerate(const EigenSystem& eig, const RegenConfig& cfg, Stream& rng) {
  const auto& spec = eig.disc->spec;
  if (cfg.mode == RegenMode::Atom) {
    if (spec.kind != EnsembleKind::RankOneFinite) {
      throw Error(ErrorKind::ModeUnsupported, "atom mode needs a finite rank-one ensemble");
    }
    const Direction atom = cfg.atom ? *cfg.atom : default_atom(spec);
    const auto tr = simulate(eig, cfg.start ? *cfg.start : atom, cfg.steps, rng);
    return regenerate_atom(eig, tr, atom);
  }
  if (spec.kind != EnsembleKind::UniformBall) throw Error(ErrorKind::ModeUnsupported, "split mode needs a ball ensemble");
  const auto p = certify_split(eig);
  return regenerate_split(eig, cfg.start ? *cfg.start : p.v0, cfg.steps, rng);
}

/// Geometric tail fit: l = ⌈median cycle length⌉, q = max_n P̂(σ > l n)^{1/n}.
/// The max is taken up to the last nonempty tail, so sparse far bins push q up.
struct GeometricTail {
  long l = 1;
  double q = 0.0;
};

inline GeometricTail fit_geometric_tail(const std::vector<long>& lengths) {
  GeometricTail g;
  if (lengths.empty()) return g;
  std::vector<long> v = lengths;
  std::sort(v.begin(), v.end());
  g.l = std::max<long>(1, v[v.size() / 2]);
  const double total = static_cast<double>(v.size());
  for (long n = 1;; ++n) {
    const auto it = std::upper_bound(v.begin(), v.end(), g.l * n);
    const double tail = static_cast<double>(v.end() - it) / total;
    if (tail <= 0.0) break;
    g.q = std::max(g.q, std::pow(tail, 1.0 / static_cast<double>(n)));
  }
  return g;
}

}  // namespace critsmooth
