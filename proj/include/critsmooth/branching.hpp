#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <unordered_map>
#include <vector>

#include "critsmooth/cone_geometry.hpp"
#include "critsmooth/errors.hpp"
#include "critsmooth/model.hpp"
#include "critsmooth/random.hpp"
#include "critsmooth/spectral.hpp"

namespace critsmooth {

// ---------------------------------------------------------------------------
// Full trees

struct TreeNode {
  std::int32_t parent;
  std::int32_t branch;
  Mat L;
};

/// A realized weighted branching tree. Node i of generation g draws its
/// tuple from Stream(seed).child(g, i), so any node can be recomputed from
/// the seed record alone.
struct TreeRun {
  int depth = 0;
  std::uint64_t seed = 0;
  double cap = 0;
  std::vector<std::vector<TreeNode>> generations;

  const std::vector<TreeNode>& generation(int n) const { return generations.at(static_cast<std::size_t>(n)); }
  const std::vector<TreeNode>& leaves() const { return generations.back(); }
};

inline Stream node_stream(std::uint64_t seed, int generation, std::size_t index) {
  return Stream(seed).child(static_cast<std::uint64_t>(generation), index);
}

/// The tuple attached to node `index` of `generation`.
inline WeightTuple node_tuple(const TupleSampler& sampler, std::uint64_t seed, int generation, std::size_t index) {
  Stream rng = node_stream(seed, generation, index);
  return sampler(rng);
}

inline TreeRun grow(const EnsembleSpec& spec, int depth, std::uint64_t seed, double cap = 1e6) {
  TreeRun run;
  run.depth = depth;
  run.seed = seed;
  run.cap = cap;
  run.generations.resize(1);
  run.generations[0].push_back({-1, -1, Mat::Identity(spec.d, spec.d)});
  TupleSampler sampler(spec);
  for (int g = 0; g < depth; ++g) {
    const auto& cur = run.generations[static_cast<std::size_t>(g)];
    std::vector<WeightTuple> tuples;
    tuples.reserve(cur.size());
    double total = 0.0;
    for (std::size_t i = 0; i < cur.size(); ++i) {
      tuples.push_back(node_tuple(sampler, seed, g, i));
      total += tuples.back().n_branches();
    }
    if (total > cap) throw CapExceeded(g + 1, total, cap);
    std::vector<TreeNode> next;
    next.reserve(static_cast<std::size_t>(total));
    for (std::size_t i = 0; i < cur.size(); ++i) {
      for (int b = 0; b < tuples[i].n_branches(); ++b) {
        next.push_back({static_cast<std::int32_t>(i), b, cur[i].L * tuples[i].matrices[static_cast<std::size_t>(b)]});
      }
    }
    run.generations.push_back(std::move(next));
  }
  return run;
}

// ---------------------------------------------------------------------------
// Compressed populations

/// A generation stored as classes of identical products with multiplicities.
/// Functionals of the multiset {L(v) : |v| = n} (W_n, 𝒲_n, M_n, norms) are
/// unaffected by the compression; the genealogy is not kept.
struct Population {
  std::vector<Mat> L;
  std::vector<double> mult;
  /// Log likelihood ratio of each class when the population was grown under
  /// an importance proposal; empty means the natural law.
  std::vector<double> log_lr;
  int generation = 0;

  double weight(std::size_t i) const { return log_lr.empty() ? mult[i] : mult[i] * std::exp(log_lr[i]); }

  static Population root(int d) {
    Population p;
    p.L.push_back(Mat::Identity(d, d));
    p.mult.push_back(1.0);
    return p;
  }

  std::size_t classes() const { return L.size(); }
  double size() const { return std::accumulate(mult.begin(), mult.end(), 0.0); }
  bool empty() const { return L.empty(); }

  void append(const Population& other) {
    if (log_lr.empty() && !other.log_lr.empty()) log_lr.assign(L.size(), 0.0);
    L.insert(L.end(), other.L.begin(), other.L.end());
    mult.insert(mult.end(), other.mult.begin(), other.mult.end());
    if (!log_lr.empty()) {
      if (other.log_lr.empty()) log_lr.resize(L.size(), 0.0);
      else log_lr.insert(log_lr.end(), other.log_lr.begin(), other.log_lr.end());
    }
  }

  /// Sorts classes and merges products equal to relative precision 1e-12.
  void merge() {
    const std::size_t n = L.size();
    if (n < 2) return;
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    const bool lr = !log_lr.empty();
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      const Mat& x = L[a];
      const Mat& y = L[b];
      if (std::lexicographical_compare(x.data(), x.data() + x.size(), y.data(), y.data() + y.size())) return true;
      if (std::lexicographical_compare(y.data(), y.data() + y.size(), x.data(), x.data() + x.size())) return false;
      return lr && log_lr[a] < log_lr[b];
    });
    std::vector<Mat> nl;
    std::vector<double> nm, nr;
    nl.reserve(n);
    nm.reserve(n);
    for (std::size_t i : idx) {
      if (mult[i] <= 0.0) continue;
      if (!nl.empty()) {
        const Mat& last = nl.back();
        const double scale = std::max(last.cwiseAbs().maxCoeff(), L[i].cwiseAbs().maxCoeff());
        const bool same_lr = !lr || std::abs(nr.back() - log_lr[i]) <= 1e-12 * std::max(1.0, std::abs(log_lr[i]));
        if (same_lr && (last - L[i]).cwiseAbs().maxCoeff() <= 1e-12 * scale) {
          nm.back() += mult[i];
          continue;
        }
      }
      nl.push_back(L[i]);
      nm.push_back(mult[i]);
      if (lr) nr.push_back(log_lr[i]);
    }
    L = std::move(nl);
    mult = std::move(nm);
    log_lr = std::move(nr);
  }
};

/// Advances populations by one generation.
///
/// With `tilt` τ > 0 (finite kinds) children are drawn from the proposal
/// q_j ∝ p_j ‖θF_j‖^τ (per factor, or per template using the sum of norms)
/// and every class carries the log likelihood ratio of its path. Additive
/// functionals Σ_v f(path of v) weighted by these ratios stay unbiased
/// because each summand depends on its own path only.
class PopulationStepper {
 public:
  explicit PopulationStepper(const EnsembleSpec& spec, double tilt = 0.0) : spec_(spec), sampler_(spec_) {
    if (spec_.has_iid_form()) {
      for (const auto& f : spec_.iid_factors) {
        factors_.push_back(spec_.theta * f.matrix);
        probs_.push_back(f.prob);
        sizes_.push_back(operator_norm(factors_.back()));
      }
    } else if (spec_.finite()) {
      for (std::size_t t = 0; t < spec_.templates.size(); ++t) {
        probs_.push_back(spec_.templates[t].prob);
        double n = 0.0;
        for (std::size_t i = 0; i < spec_.templates[t].matrices.size(); ++i) n += operator_norm(spec_.weight(t, i));
        sizes_.push_back(std::max(n, 1e-300));
      }
    }
    proposal_ = probs_;
    if (tilt != 0.0 && spec_.finite()) {
      double z = 0.0;
      for (std::size_t j = 0; j < probs_.size(); ++j) z += proposal_[j] = probs_[j] * std::pow(sizes_[j], tilt);
      for (std::size_t j = 0; j < probs_.size(); ++j) {
        proposal_[j] /= z;
        log_ratio_.push_back(probs_[j] > 0.0 ? std::log(probs_[j] / proposal_[j]) : 0.0);
      }
    }
  }

  bool weighted() const { return !log_ratio_.empty(); }

  /// `cap` bounds the number of stored classes of the new generation.
  Population step(const Population& pop, Stream& rng, double cap = std::numeric_limits<double>::infinity()) const {
    Population next;
    next.generation = pop.generation + 1;
    std::vector<double> counts;
    const bool lr = weighted();
    for (std::size_t c = 0; c < pop.classes(); ++c) {
      const double m = pop.mult[c];
      const double base = lr && !pop.log_lr.empty() ? pop.log_lr[c] : 0.0;
      if (spec_.has_iid_form()) {
        multinomial(m * spec_.iid_count, counts, rng);
        for (std::size_t j = 0; j < counts.size(); ++j) {
          if (counts[j] > 0.0) push(next, pop.L[c] * factors_[j], counts[j], cap);
          if (counts[j] > 0.0 && lr) next.log_lr.push_back(base + log_ratio_[j]);
        }
      } else if (spec_.finite()) {
        multinomial(m, counts, rng);
        for (std::size_t t = 0; t < counts.size(); ++t) {
          if (counts[t] <= 0.0) continue;
          for (std::size_t i = 0; i < spec_.templates[t].matrices.size(); ++i) {
            push(next, pop.L[c] * spec_.weight(t, i), counts[t], cap);
            if (lr) next.log_lr.push_back(base + log_ratio_[t]);
          }
        }
      } else {
        const auto units = static_cast<long long>(std::llround(m));
        for (long long k = 0; k < units; ++k) {
          const auto tuple = sampler_(rng);
          for (const auto& t : tuple.matrices) push(next, pop.L[c] * t, 1.0, cap);
        }
      }
    }
    if (spec_.finite()) next.merge();
    return next;
  }

  const EnsembleSpec& spec() const { return spec_; }

 private:
  void multinomial(double n, std::vector<double>& counts, Stream& rng) const {
    counts.assign(proposal_.size(), 0.0);
    double remaining = n;
    double mass = 1.0;
    for (std::size_t j = 0; j + 1 < proposal_.size() && remaining > 0.0; ++j) {
      const double p = mass > 0.0 ? std::clamp(proposal_[j] / mass, 0.0, 1.0) : 0.0;
      counts[j] = sample_binomial(remaining, p, rng);
      remaining -= counts[j];
      mass -= proposal_[j];
    }
    if (!proposal_.empty()) counts.back() += remaining;
  }

  static void push(Population& next, Mat l, double m, double cap) {
    if (static_cast<double>(next.L.size()) + 1.0 > cap) throw CapExceeded(next.generation, next.L.size() + 1.0, cap);
    next.L.push_back(std::move(l));
    next.mult.push_back(m);
  }

  EnsembleSpec spec_;
  TupleSampler sampler_;
  std::vector<Mat> factors_;
  std::vector<double> probs_;
  std::vector<double> sizes_;
  std::vector<double> proposal_;
  std::vector<double> log_ratio_;
};

// ---------------------------------------------------------------------------
// Martingales

/// Memoizes H^α and b at exactly repeated directions (rank-one chains only
/// ever visit a handful of them).
class DirectionCache {
 public:
  explicit DirectionCache(const EigenSystem& eig) : eig_(&eig) {}

  struct Value {
    double H;
    double b;
  };

  const Value& operator()(const Direction& u) {
    Key key{};
    std::memcpy(key.bits.data(), u.coords().data(), sizeof(double) * static_cast<std::size_t>(u.dim()));
    auto it = map_.find(key);
    if (it != map_.end()) return it->second;
    if (map_.size() > 200000) map_.clear();
    Value v{eig_->H_at(u), eig_->b.empty() ? 0.0 : eig_->b_at(u)};
    return map_.emplace(key, v).first->second;
  }

 private:
  struct Key {
    std::array<double, kMaxDim> bits{};
    bool operator==(const Key& o) const { return std::memcmp(bits.data(), o.bits.data(), sizeof(bits)) == 0; }
  };
  struct Hash {
    std::size_t operator()(const Key& k) const {
      std::uint64_t h = 0;
      for (double x : k.bits) {
        std::uint64_t v;
        std::memcpy(&v, &x, sizeof v);
        h = Stream::combine(h, v);
      }
      return static_cast<std::size_t>(h);
    }
  };
  const EigenSystem* eig_;
  std::unordered_map<Key, Value, Hash> map_;
};

struct GenerationValues {
  double W = 0.0;
  double DW = 0.0;
  double max_norm = 0.0;
  double min_level = std::numeric_limits<double>::infinity();
};

/// W = Σ H^α(Lᵀu), 𝒲 = Σ [S + b(U)] H^α(U) e^{−αS}, max ‖L‖ over a multiset.
inline GenerationValues evaluate_generation(std::span<const Mat> L, std::span<const double> mult, const Direction& u,
                                            const EigenSystem& eig, DirectionCache& cache, bool with_norm = true) {
  GenerationValues g;
  const double a = eig.s;
  for (std::size_t i = 0; i < L.size(); ++i) {
    const double m = mult.empty() ? 1.0 : mult[i];
    if (m <= 0.0) continue;
    const auto r = act(Mat(L[i].transpose()), u);
    const auto& v = cache(r.direction);
    const double w = std::exp(-a * r.level) * v.H;
    g.W += m * w;
    g.DW += m * (r.level + v.b) * w;
    g.min_level = std::min(g.min_level, r.level);
    if (with_norm) g.max_norm = std::max(g.max_norm, operator_norm(L[i]));
  }
  return g;
}

struct MartingaleSeries {
  Direction u;
  std::vector<int> n;
  std::vector<double> W, DW, max_norm;
};

inline MartingaleSeries martingales(const TreeRun& tree, const Direction& u, const EigenSystem& eig) {
  MartingaleSeries out;
  out.u = u;
  DirectionCache cache(eig);
  std::vector<Mat> ls;
  for (int g = 0; g <= tree.depth; ++g) {
    ls.clear();
    for (const auto& node : tree.generation(g)) ls.push_back(node.L);
    const auto v = evaluate_generation(ls, {}, u, eig, cache);
    out.n.push_back(g);
    out.W.push_back(v.W);
    out.DW.push_back(v.DW);
    out.max_norm.push_back(v.max_norm);
  }
  return out;
}

/// Streams one replicate through `depth` generations without keeping the
/// tree, recording the generations listed in `record` (sorted).
inline MartingaleSeries streamed_martingales(const PopulationStepper& stepper, const EigenSystem& eig,
                                             const Direction& u, int depth, Stream rng, const std::vector<int>& record,
                                             double cap, DirectionCache& cache, bool with_norm = true) {
  MartingaleSeries out;
  out.u = u;
  Population pop = Population::root(stepper.spec().d);
  std::size_t next = 0;
  for (int g = 0; g <= depth; ++g) {
    if (next < record.size() && record[next] == g) {
      std::vector<double> w(pop.classes());
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = pop.weight(i);
      const auto v = evaluate_generation(pop.L, w, u, eig, cache, with_norm);
      out.n.push_back(g);
      out.W.push_back(v.W);
      out.DW.push_back(v.DW);
      out.max_norm.push_back(v.max_norm);
      ++next;
    }
    if (g < depth) pop = stepper.step(pop, rng, cap);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stopping lines

struct LineNode {
  Direction U;
  double S;
};

struct StoppingLineSample {
  Direction u;
  double t = 0.0;
  std::vector<LineNode> nodes;
  int max_depth = 0;
};

/// First-crossing line 𝒥_t^u = {v : S^u(v) > t, S^u(v|k) ≤ t for k < |v|},
/// expanded depth first. Node tuples come from streams keyed by the path.
inline StoppingLineSample stopping_line(const EnsembleSpec& spec, const Direction& u, double t, std::uint64_t seed,
                                        double cap = 1e6, int max_depth = 10000) {
  StoppingLineSample out;
  out.u = u;
  out.t = t;
  TupleSampler sampler(spec);
  struct Item {
    Vec x;  // L(v)ᵀu
    std::uint64_t key;
    int depth;
  };
  std::vector<Item> stack;
  stack.push_back({u.coords(), Stream::mix(seed), 0});
  while (!stack.empty()) {
    Item it = std::move(stack.back());
    stack.pop_back();
    const auto p = polar(it.x);
    if (p.level > t) {
      if (static_cast<double>(out.nodes.size()) + 1.0 > cap) throw CapExceeded(it.depth, out.nodes.size() + 1.0, cap);
      out.nodes.push_back({p.direction, p.level});
      out.max_depth = std::max(out.max_depth, it.depth);
      continue;
    }
    if (it.depth >= max_depth) throw Error(ErrorKind::NonTermination, "stopping line deeper than guard");
    Stream rng(it.key);
    const auto tuple = sampler(rng);
    for (int i = tuple.n_branches() - 1; i >= 0; --i) {
      stack.push_back({tuple.matrices[static_cast<std::size_t>(i)].transpose() * it.x,
                       Stream::combine(it.key, static_cast<std::uint64_t>(i) + 1), it.depth + 1});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Disintegration

struct Disintegration {
  std::vector<int> n;
  std::vector<double> M, Z;
};

using LaplaceFn = std::function<double(const Vec&)>;

inline void check_transform(const LaplaceFn& phi, int d) {
  const double at0 = phi(Vec::Zero(d));
  if (!(std::abs(at0 - 1.0) <= 1e-9)) throw Error(ErrorKind::BadTransform, "phi(0) = " + detail::fmt(at0));
}

/// Z(x) = −Σ mult·log φ(Lᵀx) over one generation.
inline double disintegration_Z(std::span<const Mat> L, std::span<const double> mult, const LaplaceFn& phi,
                               const Vec& x) {
  double z = 0.0;
  for (std::size_t i = 0; i < L.size(); ++i) {
    const double m = mult.empty() ? 1.0 : mult[i];
    if (m <= 0.0) continue;
    const double v = phi(L[i].transpose() * x);
    if (!(v > 0.0) || v > 1.0 + 1e-12) throw Error(ErrorKind::BadTransform, "phi outside (0,1]");
    z -= m * std::log(v);
  }
  return z;
}

inline Disintegration disintegrate(const TreeRun& tree, const LaplaceFn& phi, const Vec& x) {
  check_transform(phi, static_cast<int>(x.size()));
  Disintegration out;
  std::vector<Mat> ls;
  for (int g = 0; g <= tree.depth; ++g) {
    ls.clear();
    for (const auto& node : tree.generation(g)) ls.push_back(node.L);
    const double z = disintegration_Z(ls, {}, phi, x);
    out.n.push_back(g);
    out.Z.push_back(z);
    out.M.push_back(std::exp(-z));
  }
  return out;
}

inline Disintegration disintegrate(const Population& pop, const LaplaceFn& phi, const Vec& x) {
  check_transform(phi, static_cast<int>(x.size()));
  Disintegration out;
  const double z = disintegration_Z(pop.L, pop.mult, phi, x);
  out.n.push_back(pop.generation);
  out.Z.push_back(z);
  out.M.push_back(std::exp(-z));
  return out;
}

}  // namespace critsmooth
