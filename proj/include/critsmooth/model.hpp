#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "critsmooth/cone_geometry.hpp"
#include "critsmooth/errors.hpp"
#include "critsmooth/random.hpp"

namespace critsmooth {

enum class EnsembleKind { FiniteTuple, RankOneFinite, UniformBall };

inline std::string_view to_string(EnsembleKind k) {
  switch (k) {
    case EnsembleKind::FiniteTuple: return "finite_tuple";
    case EnsembleKind::RankOneFinite: return "rank_one_finite";
    case EnsembleKind::UniformBall: return "uniform_ball";
  }
  return "unknown";
}

/// T = scale · v wᵀ (before the global scale θ is applied).
struct RankOneFactor {
  double scale = 1.0;
  Direction v;
  Direction w;

  Mat matrix() const { return scale * v.coords() * w.coords().transpose(); }
};

/// One possible weight matrix of an i.i.d. component.
struct Factor {
  double prob = 0.0;
  Mat matrix;
  std::optional<RankOneFactor> rank_one;
};

/// A possible realisation of the whole tuple (T₁,…,T_N) with its probability.
/// Matrices are stored without the global scale θ.
struct TupleTemplate {
  double prob = 0.0;
  std::vector<Mat> matrices;
  std::vector<RankOneFactor> rank_one;  // parallel to `matrices` for rank-one kinds
};

/// Atom of the marginal law μ (scaled by θ).
struct MuAtom {
  double weight;
  Mat matrix;
};

/// Law of the weight tuple. Finite kinds always carry the expanded template
/// list; when the tuple consists of i.i.d. components the factor list is kept
/// too so that populations can be advanced with a single multinomial.
struct EnsembleSpec {
  std::string name;
  EnsembleKind kind = EnsembleKind::FiniteTuple;
  int d = 2;
  double theta = 1.0;

  std::vector<TupleTemplate> templates;

  int iid_count = 0;
  std::vector<Factor> iid_factors;

  int ball_count = 0;
  Mat ball_center;       // unscaled a₀/θ
  double ball_radius = 0;  // unscaled c_ball/θ

  bool finite() const { return kind != EnsembleKind::UniformBall; }
  bool has_iid_form() const { return iid_count > 0 && !iid_factors.empty(); }

  Mat weight(std::size_t tmpl, std::size_t i) const { return theta * templates[tmpl].matrices[i]; }

  Mat center() const { return theta * ball_center; }
  double radius() const { return theta * ball_radius; }

  double expected_n() const {
    if (!finite()) return ball_count;
    double en = 0.0;
    for (const auto& t : templates) en += t.prob * static_cast<double>(t.matrices.size());
    return en;
  }

  std::size_t max_n() const {
    if (!finite()) return static_cast<std::size_t>(ball_count);
    std::size_t n = 0;
    for (const auto& t : templates) n = std::max(n, t.matrices.size());
    return n;
  }

  EnsembleSpec with_theta(double th) const {
    EnsembleSpec s = *this;
    s.theta = th;
    return s;
  }
};

/// Builds a finite ensemble whose tuple is `count` i.i.d. draws from `factors`.
/// The product templates are expanded eagerly.
inline EnsembleSpec make_iid_spec(std::string name, EnsembleKind kind, int d, double theta, int count,
                                  std::vector<Factor> factors) {
  EnsembleSpec spec;
  spec.name = std::move(name);
  spec.kind = kind;
  spec.d = d;
  spec.theta = theta;
  spec.iid_count = count;
  spec.iid_factors = std::move(factors);
  const std::size_t f = spec.iid_factors.size();
  std::size_t total = 1;
  for (int i = 0; i < count; ++i) {
    total *= f;
    if (total > 1'000'000) throw Error(ErrorKind::ConfigError, "too many tuple templates");
  }
  for (std::size_t code = 0; code < total; ++code) {
    TupleTemplate t;
    t.prob = 1.0;
    std::size_t c = code;
    std::vector<std::size_t> digits(count);
    for (int i = count - 1; i >= 0; --i) {
      digits[i] = c % f;
      c /= f;
    }
    for (int i = 0; i < count; ++i) {
      const auto& fac = spec.iid_factors[digits[i]];
      t.prob *= fac.prob;
      t.matrices.push_back(fac.matrix);
      if (fac.rank_one) t.rank_one.push_back(*fac.rank_one);
    }
    spec.templates.push_back(std::move(t));
  }
  return spec;
}

inline Factor rank_one_factor(double prob, double scale, const Vec& v, const Vec& w) {
  RankOneFactor r{scale, Direction::normalize(v), Direction::normalize(w)};
  return {prob, r.matrix(), r};
}

/// RANK1-2D with the given scale: T_i = θ·C_i·e eᵀ, C_i i.i.d. in {1,100}.
inline EnsembleSpec rank1_2d(double theta = 1.0) {
  const Vec e = Vec::Ones(2);
  return make_iid_spec("RANK1-2D", EnsembleKind::RankOneFinite, 2, theta, 2,
                       {rank_one_factor(0.99, 1.0, e, e), rank_one_factor(0.01, 100.0, e, e)});
}

/// RANK1-2D-B: each component picks (v,w) ∈ {(w₁,w₁),(w₂,w₂)} uniformly and
/// C ∈ {1,100} independently.
inline EnsembleSpec rank1_2d_b(double theta = 1.0) {
  Vec w1(2), w2(2);
  w1 << 1.0, 0.4;
  w2 << 0.3, 1.0;
  std::vector<Factor> f;
  for (const Vec* w : {&w1, &w2}) {
    f.push_back(rank_one_factor(0.5 * 0.99, 1.0, *w, *w));
    f.push_back(rank_one_factor(0.5 * 0.01, 100.0, *w, *w));
  }
  return make_iid_spec("RANK1-2D-B", EnsembleKind::RankOneFinite, 2, theta, 2, std::move(f));
}

/// Mixture C ∈ {1,4} w.p. {¾,¼}; cannot be made critical with α ≤ 1.
inline EnsembleSpec c14(double theta = 1.0) {
  const Vec e = Vec::Ones(2);
  return make_iid_spec("C14", EnsembleKind::RankOneFinite, 2, theta, 2,
                       {rank_one_factor(0.75, 1.0, e, e), rank_one_factor(0.25, 4.0, e, e)});
}

inline EnsembleSpec ball_2d(double theta = 1.0) {
  EnsembleSpec s;
  s.name = "BALL-2D";
  s.kind = EnsembleKind::UniformBall;
  s.d = 2;
  s.theta = theta;
  s.ball_count = 2;
  s.ball_center.resize(2, 2);
  s.ball_center << 1.0, 0.6, 0.4, 1.0;
  s.ball_radius = 0.2;
  return s;
}

/// Explicit finite tuple spec; matrices are unscaled.
inline EnsembleSpec finite_tuple_spec(std::string name, int d, double theta, std::vector<TupleTemplate> templates) {
  EnsembleSpec s;
  s.name = std::move(name);
  s.kind = EnsembleKind::FiniteTuple;
  s.d = d;
  s.theta = theta;
  s.templates = std::move(templates);
  return s;
}

struct WeightTuple {
  std::vector<Mat> matrices;
  std::size_t template_index = 0;  ///< meaningful for finite kinds only

  int n_branches() const { return static_cast<int>(matrices.size()); }
};

/// Categorical draw from probabilities that sum to one.
inline std::size_t sample_index(std::span<const double> cumulative, Stream& rng) {
  const double x = rng.uniform() * cumulative.back();
  auto it = std::upper_bound(cumulative.begin(), cumulative.end(), x);
  if (it == cumulative.end()) --it;
  return static_cast<std::size_t>(it - cumulative.begin());
}

inline std::vector<double> cumulative_probs(const EnsembleSpec& spec) {
  std::vector<double> c;
  c.reserve(spec.templates.size());
  double run = 0.0;
  for (const auto& t : spec.templates) c.push_back(run += t.prob);
  return c;
}

/// Uniform point of the Frobenius ball of radius r around `center`.
inline Mat sample_ball_matrix(const Mat& center, double r, Stream& rng) {
  const int d = static_cast<int>(center.rows());
  const int dim = d * d;
  Mat g(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) g(i, j) = rng.normal();
  const double radius = r * std::pow(rng.uniform(), 1.0 / dim);
  return center + (radius / g.norm()) * g;
}

/// Template draws use a precomputed cumulative table when sampling in bulk.
class TupleSampler {
 public:
  explicit TupleSampler(const EnsembleSpec& spec) : spec_(&spec) {
    if (spec.finite()) cumulative_ = cumulative_probs(spec);
  }

  std::size_t draw_template(Stream& rng) const { return sample_index(cumulative_, rng); }

  WeightTuple operator()(Stream& rng) const {
    WeightTuple t;
    if (spec_->finite()) {
      t.template_index = draw_template(rng);
      const auto& tm = spec_->templates[t.template_index];
      t.matrices.reserve(tm.matrices.size());
      for (std::size_t i = 0; i < tm.matrices.size(); ++i) t.matrices.push_back(spec_->weight(t.template_index, i));
    } else {
      const Mat c = spec_->center();
      for (int i = 0; i < spec_->ball_count; ++i) t.matrices.push_back(sample_ball_matrix(c, spec_->radius(), rng));
    }
    return t;
  }

  const EnsembleSpec& spec() const { return *spec_; }

 private:
  const EnsembleSpec* spec_;
  std::vector<double> cumulative_;
};

inline WeightTuple sample_tuple(const EnsembleSpec& spec, Stream& rng) { return TupleSampler(spec)(rng); }

/// Atoms of μ for finite kinds, identical matrices merged.
inline std::vector<MuAtom> mu_atoms(const EnsembleSpec& spec) {
  if (!spec.finite()) throw Error(ErrorKind::ModeUnsupported, "μ has no atoms for a continuous ensemble");
  const double en = spec.expected_n();
  std::vector<MuAtom> atoms;
  for (std::size_t t = 0; t < spec.templates.size(); ++t) {
    const auto& tm = spec.templates[t];
    for (std::size_t i = 0; i < tm.matrices.size(); ++i) {
      const Mat m = spec.weight(t, i);
      bool merged = false;
      for (auto& a : atoms) {
        if ((a.matrix - m).cwiseAbs().maxCoeff() <= 1e-14 * std::max(1.0, m.cwiseAbs().maxCoeff())) {
          a.weight += tm.prob / en;
          merged = true;
          break;
        }
      }
      if (!merged) atoms.push_back({tm.prob / en, m});
    }
  }
  return atoms;
}

/// One draw from μ: a tuple size-biased by N/E N, then a uniform branch.
inline Mat sample_mu(const EnsembleSpec& spec, Stream& rng) {
  if (!spec.finite()) return sample_ball_matrix(spec.center(), spec.radius(), rng);
  const double en = spec.expected_n();
  std::vector<double> c;
  double run = 0.0;
  for (const auto& t : spec.templates) c.push_back(run += t.prob * static_cast<double>(t.matrices.size()) / en);
  const std::size_t t = sample_index(c, rng);
  const std::size_t n = spec.templates[t].matrices.size();
  const std::size_t i = std::min(n - 1, static_cast<std::size_t>(rng.uniform() * static_cast<double>(n)));
  return spec.weight(t, i);
}

// ---------------------------------------------------------------------------
// Assumption checks

struct AssumptionEntry {
  std::string name;
  bool pass;
  bool mandatory;
  double witness;
  std::string detail;
};

struct AssumptionReport {
  std::vector<AssumptionEntry> entries;
  double c = 0.0;        ///< certified lower bound of ι(Mᵀ) over the support
  double c_prime = 0.0;  ///< −log c
  double p0 = 0.0;
  double p1 = 0.0;
  double delta = 0.0;

  bool ok() const {
    return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.pass || !e.mandatory; });
  }

  std::string failures() const {
    std::string out;
    for (const auto& e : entries) {
      if (!e.pass && e.mandatory) out += (out.empty() ? "" : "; ") + e.name + ": " + e.detail;
    }
    return out;
  }

  const AssumptionEntry* find(std::string_view name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

namespace detail {

inline std::string fmt(double x) {
  std::ostringstream os;
  os.precision(10);
  os << x;
  return os.str();
}

inline std::uint32_t zero_pattern(const Mat& m) {
  std::uint32_t p = 0;
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j)
      if (m(i, j) > 0.0) p |= 1u << (i * m.cols() + j);
  return p;
}

inline std::uint32_t pattern_product(std::uint32_t a, std::uint32_t b, int d) {
  std::uint32_t out = 0;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      for (int k = 0; k < d; ++k)
        if ((a >> (i * d + k) & 1u) && (b >> (k * d + j) & 1u)) out |= 1u << (i * d + j);
  return out;
}

/// Depth of the shortest product with all entries positive, or 0 if none is
/// found up to `max_depth`.
inline int positive_product_depth(const std::vector<Mat>& support, int d, int max_depth) {
  const std::uint32_t full = d * d == 32 ? ~0u : ((1u << (d * d)) - 1u);
  std::set<std::uint32_t> gens;
  for (const auto& m : support) gens.insert(zero_pattern(m));
  std::set<std::uint32_t> seen = gens;
  std::vector<std::uint32_t> frontier(gens.begin(), gens.end());
  for (int depth = 1; depth <= max_depth; ++depth) {
    for (auto p : frontier)
      if (p == full) return depth;
    std::vector<std::uint32_t> next;
    for (auto p : frontier)
      for (auto g : gens) {
        const auto q = pattern_product(p, g, d);
        if (seen.insert(q).second) next.push_back(q);
      }
    if (next.empty()) return 0;
    frontier = std::move(next);
  }
  return 0;
}

}  // namespace detail

/// Builds the report without throwing; `alpha` is the exponent used for the
/// moment witness (1 before calibration).
inline AssumptionReport check_assumptions(const EnsembleSpec& spec, double alpha = 1.0) {
  AssumptionReport rep;
  const int d = spec.d;
  auto add = [&](std::string name, bool pass, bool mandatory, double w, std::string detail) {
    rep.entries.push_back({std::move(name), pass, mandatory, w, std::move(detail)});
  };

  // well-formedness
  if (spec.finite()) {
    double total = 0.0;
    bool shapes = !spec.templates.empty();
    for (const auto& t : spec.templates) {
      total += t.prob;
      if (t.prob < 0.0) shapes = false;
      for (const auto& m : t.matrices)
        if (m.rows() != d || m.cols() != d) shapes = false;
    }
    add("probabilities", shapes && std::abs(total - 1.0) <= 1e-12, true, total,
        "template probabilities sum to " + detail::fmt(total));
  } else {
    const bool shapes = spec.ball_center.rows() == d && spec.ball_center.cols() == d;
    const double min_entry = shapes ? spec.ball_center.minCoeff() : 0.0;
    const bool positive = shapes && spec.ball_radius > 0.0 && min_entry > spec.ball_radius;
    add("ball_positivity", positive, true, min_entry - spec.ball_radius,
        "min entry of a0 " + detail::fmt(min_entry * spec.theta) + " vs c_ball " + detail::fmt(spec.radius()));
  }

  // A1
  bool n_ok = true;
  if (spec.finite()) {
    for (const auto& t : spec.templates)
      if (t.prob > 0.0 && t.matrices.empty()) n_ok = false;
  } else {
    n_ok = spec.ball_count >= 1;
  }
  const double en = spec.expected_n();
  add("branching_number", n_ok && en > 1.0 && std::isfinite(en), true, en,
      "E N = " + detail::fmt(en) + (n_ok ? "" : " and N = 0 has positive probability"));

  // A2
  std::vector<Mat> support;
  if (spec.finite()) {
    for (const auto& a : mu_atoms(spec))
      if (a.weight > 0.0) support.push_back(a.matrix);
  }
  if (spec.finite()) {
    bool allow = true;
    std::string bad;
    for (const auto& m : support) {
      if (!is_allowable(m)) {
        allow = false;
        std::ostringstream os;
        os << "[" << m.format(Eigen::IOFormat(Eigen::StreamPrecision, Eigen::DontAlignCols, ",", ";")) << "]";
        bad += (bad.empty() ? "" : " ") + os.str();
      }
    }
    add("allowability", allow, true, allow ? 1.0 : 0.0, allow ? "every support matrix allowable" : "not allowable: " + bad);
    const int depth = allow ? detail::positive_product_depth(support, d, 8) : 0;
    add("positive_product", depth > 0, true, depth,
        depth > 0 ? "positive product of length " + std::to_string(depth) : "undetermined up to depth 8");
  } else {
    const bool pos = is_strictly_positive(spec.center());
    add("allowability", pos, true, 1.0, "ball around a strictly positive centre");
    add("positive_product", pos, true, 1.0, "a0 is strictly positive");
  }

  add("criticality", true, false, 0.0, "checked by calibration");

  // A6: lower bound of ι(Mᵀ)
  double c = std::numeric_limits<double>::infinity();
  if (spec.finite()) {
    for (const auto& m : support) c = std::min(c, norms(m.transpose()).iota);
  } else {
    c = norms(spec.center().transpose()).iota - spec.radius();
  }
  rep.c = c;
  rep.c_prime = c > 0.0 ? -std::log(c) : std::numeric_limits<double>::infinity();
  add("iota_lower_bound", c > 0.0, true, c, "c = " + detail::fmt(c) + ", c' = " + detail::fmt(rep.c_prime));

  // A7 / moments: bounded ensembles have every moment
  rep.p0 = 2.0;
  rep.p1 = 2.0;
  rep.delta = 0.5;
  double witness = 0.0;
  const double q = alpha / (1.0 + rep.delta);
  if (spec.finite()) {
    for (std::size_t t = 0; t < spec.templates.size(); ++t) {
      double sum = 0.0;
      for (std::size_t i = 0; i < spec.templates[t].matrices.size(); ++i)
        sum += std::pow(operator_norm(spec.weight(t, i)), q);
      witness += spec.templates[t].prob * std::pow(sum, 1.0 + rep.delta);
    }
  } else {
    const double top = operator_norm(spec.center()) + spec.radius();
    witness = std::pow(spec.ball_count * std::pow(top, q), 1.0 + rep.delta);
  }
  add("moments", std::isfinite(witness), true, witness,
      "p0 = 2, p1 = 2, delta = 0.5, moment bound " + detail::fmt(witness));
  return rep;
}

/// Throws ValidationFailure naming every violated assumption.
inline AssumptionReport verify_assumptions(const EnsembleSpec& spec, double alpha = 1.0) {
  auto rep = check_assumptions(spec, alpha);
  if (!rep.ok()) throw Error(ErrorKind::ValidationFailure, rep.failures());
  return rep;
}

}  // namespace critsmooth
