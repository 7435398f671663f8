#pragma once

// Model files in TOML. Needs toml++ on the include path (target critsmooth_io).
//
//   name  = "RANK1-2D"
//   kind  = "rank_one_finite"      # finite_tuple | rank_one_finite | uniform_ball
//   d     = 2
//   theta = 1.0
//
//   [components]                   # tuple = `count` i.i.d. factors
//   count = 2
//   [[components.factor]]
//   prob = 0.99
//   scale = 1.0                    # rank-one factor scale·v wᵀ ...
//   v = [1.0, 1.0]
//   w = [1.0, 1.0]
//   # matrix = [[..], [..]]        # ... or an explicit matrix
//
//   [[tuple]]                      # alternative: explicit tuple templates
//   prob = 1.0
//   matrices = [[[..], [..]], ...]
//
//   [ball]                         # uniform_ball only
//   count = 2
//   center = [[1.0, 0.6], [0.4, 1.0]]
//   radius = 0.2
//
// Matrices and radii are unscaled; the weights are θ times them. Unknown keys
// are rejected.

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <toml.hpp>

#include "critsmooth/errors.hpp"
#include "critsmooth/model.hpp"

namespace critsmooth {

namespace io_detail {

[[noreturn]] inline void fail(const std::string& where, const std::string& what) {
  throw Error(ErrorKind::ConfigError, where + ": " + what);
}

inline void check_keys(const toml::table& t, const std::set<std::string>& allowed, const std::string& where) {
  for (const auto& [k, v] : t) {
    (void)v;
    if (!allowed.count(std::string(k.str()))) fail(where, "unknown key '" + std::string(k.str()) + "'");
  }
}

inline double number(const toml::node* n, const std::string& where) {
  if (!n) fail(where, "missing");
  if (auto d = n->value<double>()) return *d;
  fail(where, "expected a number");
}

inline Vec vector(const toml::node* n, int d, const std::string& where) {
  const auto* a = n ? n->as_array() : nullptr;
  if (!a) fail(where, "expected an array");
  if (static_cast<int>(a->size()) != d) fail(where, "expected " + std::to_string(d) + " entries");
  Vec v(d);
  for (int i = 0; i < d; ++i) v[i] = number(a->get(static_cast<std::size_t>(i)), where);
  return v;
}

inline Mat matrix(const toml::node* n, int d, const std::string& where) {
  const auto* a = n ? n->as_array() : nullptr;
  if (!a || static_cast<int>(a->size()) != d) fail(where, "expected a " + std::to_string(d) + "x" + std::to_string(d) + " matrix");
  Mat m(d, d);
  for (int i = 0; i < d; ++i) m.row(i) = vector(a->get(static_cast<std::size_t>(i)), d, where).transpose();
  return m;
}

inline Factor factor(const toml::table& t, int d, bool need_rank_one, const std::string& where) {
  const bool has_matrix = t.contains("matrix");
  if (has_matrix) {
    check_keys(t, {"prob", "matrix"}, where);
    if (need_rank_one) fail(where, "rank_one_finite factors need scale, v and w");
    return {number(t.get("prob"), where + ".prob"), matrix(t.get("matrix"), d, where + ".matrix"), std::nullopt};
  }
  check_keys(t, {"prob", "scale", "v", "w"}, where);
  const double scale = t.contains("scale") ? number(t.get("scale"), where + ".scale") : 1.0;
  return rank_one_factor(number(t.get("prob"), where + ".prob"), scale, vector(t.get("v"), d, where + ".v"),
                         vector(t.get("w"), d, where + ".w"));
}

inline toml::array to_array(const Vec& v) {
  toml::array a;
  for (int i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline toml::array to_array(const Mat& m) {
  toml::array a;
  for (int i = 0; i < m.rows(); ++i) a.push_back(to_array(Vec(m.row(i).transpose())));
  return a;
}

}  // namespace io_detail

inline EnsembleKind parse_kind(std::string_view s) {
  for (auto k : {EnsembleKind::FiniteTuple, EnsembleKind::RankOneFinite, EnsembleKind::UniformBall})
    if (to_string(k) == s) return k;
  throw Error(ErrorKind::ConfigError, "unknown kind '" + std::string(s) + "'");
}

inline EnsembleSpec parse_model(std::string_view text, const std::string& source = "model") {
  using namespace io_detail;
  toml::table root;
  try {
    root = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << e.description() << " (line " << e.source().begin.line << ")";
    fail(source, os.str());
  }
  check_keys(root, {"name", "kind", "d", "theta", "components", "tuple", "ball"}, source);
  const auto kind_s = root["kind"].value<std::string>();
  if (!kind_s) fail(source, "missing kind");
  const EnsembleKind kind = parse_kind(*kind_s);
  const auto d64 = root["d"].value<std::int64_t>();
  if (!d64) fail(source, "missing integer d");
  const int d = static_cast<int>(*d64);
  if (d < 1 || d > kMaxDim) fail(source, "d must be in 1.." + std::to_string(kMaxDim));
  const double theta = root.contains("theta") ? number(root.get("theta"), source + ".theta") : 1.0;
  if (!(theta > 0.0)) fail(source, "theta must be positive");
  const std::string name = root["name"].value_or(std::string("model"));

  const int blocks = int(root.contains("components")) + int(root.contains("tuple")) + int(root.contains("ball"));
  if (blocks != 1) fail(source, "exactly one of [components], [[tuple]], [ball] is required");

  if (kind == EnsembleKind::UniformBall) {
    const auto* b = root["ball"].as_table();
    if (!b) fail(source, "uniform_ball needs a [ball] table");
    check_keys(*b, {"count", "center", "radius"}, source + ".ball");
    EnsembleSpec s;
    s.name = name;
    s.kind = kind;
    s.d = d;
    s.theta = theta;
    const auto count = (*b)["count"].value<std::int64_t>();
    if (!count || *count < 1) fail(source + ".ball.count", "expected a positive integer");
    s.ball_count = static_cast<int>(*count);
    s.ball_center = matrix(b->get("center"), d, source + ".ball.center");
    s.ball_radius = number(b->get("radius"), source + ".ball.radius");
    if (!(s.ball_radius > 0.0)) fail(source + ".ball.radius", "must be positive");
    return s;
  }

  const bool rank_one = kind == EnsembleKind::RankOneFinite;
  if (const auto* c = root["components"].as_table()) {
    check_keys(*c, {"count", "factor"}, source + ".components");
    const auto count = (*c)["count"].value<std::int64_t>();
    if (!count || *count < 1) fail(source + ".components.count", "expected a positive integer");
    const auto* fs = (*c)["factor"].as_array();
    if (!fs || fs->empty()) fail(source + ".components", "needs [[components.factor]] entries");
    std::vector<Factor> factors;
    for (std::size_t i = 0; i < fs->size(); ++i) {
      const auto* t = fs->get(i)->as_table();
      const std::string where = source + ".components.factor[" + std::to_string(i) + "]";
      if (!t) fail(where, "expected a table");
      factors.push_back(factor(*t, d, rank_one, where));
    }
    return make_iid_spec(name, kind, d, theta, static_cast<int>(*count), std::move(factors));
  }

  const auto* ts = root["tuple"].as_array();
  if (!ts || ts->empty()) fail(source, "[[tuple]] entries expected");
  std::vector<TupleTemplate> templates;
  for (std::size_t i = 0; i < ts->size(); ++i) {
    const auto* t = ts->get(i)->as_table();
    const std::string where = source + ".tuple[" + std::to_string(i) + "]";
    if (!t) fail(where, "expected a table");
    check_keys(*t, {"prob", "matrices", "factor"}, where);
    TupleTemplate tt;
    tt.prob = number(t->get("prob"), where + ".prob");
    if (const auto* ms = (*t)["matrices"].as_array()) {
      if (rank_one) fail(where, "rank_one_finite tuples list [[tuple.factor]] entries");
      for (std::size_t j = 0; j < ms->size(); ++j) tt.matrices.push_back(matrix(ms->get(j), d, where + ".matrices"));
    } else if (const auto* fs = (*t)["factor"].as_array()) {
      for (std::size_t j = 0; j < fs->size(); ++j) {
        const auto* ft = fs->get(j)->as_table();
        if (!ft) fail(where, "factor entries must be tables");
        auto f = factor(*ft, d, rank_one, where + ".factor[" + std::to_string(j) + "]");
        if (ft->contains("prob")) fail(where, "tuple factors take no prob");
        tt.matrices.push_back(f.matrix);
        if (f.rank_one) tt.rank_one.push_back(*f.rank_one);
      }
    } else {
      fail(where, "needs matrices or [[tuple.factor]]");
    }
    templates.push_back(std::move(tt));
  }
  EnsembleSpec s = finite_tuple_spec(name, d, theta, std::move(templates));
  s.kind = kind;
  return s;
}

inline EnsembleSpec load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ConfigError, "cannot open model file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_model(ss.str(), path.string());
}

/// Inverse of parse_model up to floating point formatting.
inline std::string format_model(const EnsembleSpec& s) {
  using namespace io_detail;
  toml::table root;
  root.insert("name", s.name);
  root.insert("kind", std::string(to_string(s.kind)));
  root.insert("d", s.d);
  root.insert("theta", s.theta);
  auto put_factor = [&](toml::table& t, const Mat& m, const std::optional<RankOneFactor>& r) {
    if (r) {
      t.insert("scale", r->scale);
      t.insert("v", to_array(r->v.coords()));
      t.insert("w", to_array(r->w.coords()));
    } else {
      t.insert("matrix", to_array(m));
    }
  };
  if (!s.finite()) {
    toml::table b;
    b.insert("count", s.ball_count);
    b.insert("center", to_array(s.ball_center));
    b.insert("radius", s.ball_radius);
    root.insert("ball", std::move(b));
  } else if (s.has_iid_form()) {
    toml::table c;
    c.insert("count", s.iid_count);
    toml::array fs;
    for (const auto& f : s.iid_factors) {
      toml::table t;
      t.insert("prob", f.prob);
      put_factor(t, f.matrix, f.rank_one);
      fs.push_back(std::move(t));
    }
    c.insert("factor", std::move(fs));
    root.insert("components", std::move(c));
  } else {
    toml::array ts;
    for (const auto& tt : s.templates) {
      toml::table t;
      t.insert("prob", tt.prob);
      if (tt.rank_one.size() == tt.matrices.size() && !tt.rank_one.empty()) {
        toml::array fs;
        for (const auto& r : tt.rank_one) {
          toml::table ft;
          put_factor(ft, r.matrix(), r);
          fs.push_back(std::move(ft));
        }
        t.insert("factor", std::move(fs));
      } else {
        toml::array ms;
        for (const auto& m : tt.matrices) ms.push_back(to_array(m));
        t.insert("matrices", std::move(ms));
      }
      ts.push_back(std::move(t));
    }
    root.insert("tuple", std::move(ts));
  }
  std::ostringstream os;
  os << root << "\n";
  return os.str();
}

}  // namespace critsmooth
