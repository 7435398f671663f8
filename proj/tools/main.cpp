// critsmooth command line front end.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "critsmooth/branching.hpp"
#include "critsmooth/model.hpp"
#include "critsmooth/model_io.hpp"
#include "critsmooth/mrw.hpp"
#include "critsmooth/parallel.hpp"
#include "critsmooth/smoothing.hpp"
#include "critsmooth/spectral.hpp"
#include "critsmooth/stats.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace critsmooth;

namespace {

enum Exit { kOk = 0, kValidation = 1, kCalibration = 2, kNumerical = 3, kConfig = 4 };

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::ValidationFailure: return kValidation;
    case ErrorKind::CalibrationOutOfRange: return kCalibration;
    case ErrorKind::ConfigError:
    case ErrorKind::BadResolution: return kConfig;
    default: return kNumerical;
  }
}

std::string num(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.15g", x);
  return buf;
}

// ---------------------------------------------------------------------------
// grids and directions

std::vector<double> parse_grid(std::string text) {
  for (auto& c : text)
    if (c == ',' || c == ';') c = ' ';
  std::vector<double> out;
  auto fail = [&] { throw Error(ErrorKind::ConfigError, "bad grid '" + text + "'"); };
  if (text.rfind("logr", 0) == 0) {
    std::string rest = text.substr(4);
    for (auto& c : rest)
      if (c == ':') c = ' ';
    std::istringstream is(rest);
    double a, b;
    long n;
    if (!(is >> a >> b >> n) || n < 1 || !(a > 0.0) || !(b > 0.0)) fail();
    for (long i = 0; i < n; ++i)
      out.push_back(n == 1 ? a : std::exp(std::log(a) + (std::log(b) - std::log(a)) * static_cast<double>(i) / static_cast<double>(n - 1)));
    return out;
  }
  if (text.find(':') != std::string::npos) {
    for (auto& c : text)
      if (c == ':') c = ' ';
    std::istringstream is(text);
    double a, b, step;
    if (!(is >> a >> b >> step) || !(step > 0.0) || b < a) fail();
    const long n = static_cast<long>(std::floor((b - a) / step + 1e-9));
    for (long i = 0; i <= n; ++i) out.push_back(a + step * static_cast<double>(i));
    return out;
  }
  std::istringstream is(text);
  double v;
  while (is >> v) out.push_back(v);
  if (!is.eof() || out.empty()) fail();
  return out;
}

std::vector<int> int_grid(const std::string& text) {
  std::vector<int> out;
  for (double v : parse_grid(text)) {
    if (v < 0 || v != std::floor(v)) throw Error(ErrorKind::ConfigError, "expected integers in '" + text + "'");
    out.push_back(static_cast<int>(v));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

/// "diag" (default), "e1".."e4" or a comma separated vector.
Direction parse_direction(const std::string& text, int d) {
  if (text.empty() || text == "diag") return Direction::diagonal(d);
  if (text.size() == 2 && text[0] == 'e' && text[1] >= '1' && text[1] - '0' <= d) return Direction::basis(d, text[1] - '1');
  const auto v = parse_grid(text);
  if (static_cast<int>(v.size()) != d) throw Error(ErrorKind::ConfigError, "direction '" + text + "' needs " + std::to_string(d) + " entries");
  Vec x(d);
  for (int i = 0; i < d; ++i) x[i] = v[static_cast<std::size_t>(i)];
  if ((x.array() < 0.0).any()) throw Error(ErrorKind::ConfigError, "direction '" + text + "' has negative entries");
  return Direction::normalize(x);
}

json to_json(const Direction& u) {
  json a = json::array();
  for (int i = 0; i < u.dim(); ++i) a.push_back(u[i]);
  return a;
}

json to_json(const Estimate& e) { return {{"value", e.value}, {"se", e.se}}; }

// ---------------------------------------------------------------------------
// output handling

std::string sha256_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr);
  std::string out;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    out += buf;
  }
  return out;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Output {
 public:
  explicit Output(fs::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw Error(ErrorKind::ConfigError, "cannot create output directory '" + dir_.string() + "'");
  }

  void write(const std::string& name, const std::string& content) {
    std::ofstream out(dir_ / name, std::ios::binary);
    if (!out) throw Error(ErrorKind::ConfigError, "cannot write '" + (dir_ / name).string() + "'");
    out << content;
    files_.push_back({{"name", name}, {"sha256", sha256_hex(content)}, {"bytes", content.size()}});
  }

  void write_json(const std::string& name, const json& j) { write(name, j.dump(2) + "\n"); }

  const json& files() const { return files_; }
  const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
  json files_ = json::array();
};

// ---------------------------------------------------------------------------
// options

struct Options {
  std::string command;
  std::string model;
  std::string out = "out";
  std::uint64_t seed = 1;
  int workers = 1;
  int resolution = 256;
  std::optional<double> alpha;

  // spectral
  std::string s_grid = "0.1:2.0:0.1";
  // martingale
  int replicates = 1000;
  int fp_replicates = 5000;
  std::string n_grid = "0,5,10";
  std::vector<std::string> dirs;
  double tilt = 0.0;
  double cap = 1e6;
  std::optional<double> line_t;
  // mrw / regen
  long steps = 10000;
  std::string mode = "atom";
  std::string atom;
  std::string start;
  // many2one
  int n = 3;
  // fixed point family
  int depth = 15;
  double K = 1.0;
  long tuples = 5000;
  std::string r_grid = "logr 0.1 10 5";
  std::string residual_r = "0.25,1,4";
  std::string t_grid = "1:6:1";
  std::string regen = "none";
  long regen_steps = 20000;
  std::string slow_s = "-1,0,1";
  std::string homog_r = "0.5,2";
  int homog_depth = 15;
  long homog_trees = 10000;

  json echo() const {
    json j;
    j["command"] = command;
    j["model"] = model;
    j["out"] = out;
    j["seed"] = seed;
    j["workers"] = workers;
    j["resolution"] = resolution;
    if (alpha) j["alpha"] = *alpha;
    if (command == "spectral") j["s"] = s_grid;
    if (command == "martingale") {
      j["replicates"] = replicates;
      j["n"] = n_grid;
      j["tilt"] = tilt;
      j["cap"] = cap;
      if (line_t) j["line_t"] = *line_t;
    }
    if (command == "mrw" || command == "regen") j["steps"] = steps;
    if (command == "regen") {
      j["mode"] = mode;
      j["atom"] = atom;
    }
    if (command == "mrw" || command == "regen") j["start"] = start;
    if (command == "many2one") j["n"] = n;
    if (command == "fixedpoint" || command == "renewal" || command == "slowvar") {
      j["replicates"] = fp_replicates;
      j["depth"] = depth;
      j["K"] = K;
      j["cap"] = cap;
    }
    if (command == "fixedpoint") {
      j["tuples"] = tuples;
      j["r"] = r_grid;
      j["residual_r"] = residual_r;
    }
    if (command == "renewal") {
      j["tuples"] = tuples;
      j["t"] = t_grid;
      j["regen"] = regen;
      j["regen_steps"] = regen_steps;
    }
    if (command == "slowvar") {
      j["t"] = t_grid;
      j["s"] = slow_s;
      j["homog_r"] = homog_r;
      j["homog_depth"] = homog_depth;
      j["homog_trees"] = homog_trees;
    }
    if (!dirs.empty()) j["u"] = dirs;
    return j;
  }
};

struct Context {
  const Options& opt;
  EnsembleSpec spec;
  Output& out;
  json summary;

  DiscretizationOptions disc() const {
    DiscretizationOptions d;
    d.resolution = opt.resolution;
    return d;
  }

  /// Calibrated model and eigen system, or the model as given at --alpha.
  std::pair<EnsembleSpec, EigenSystem> critical() {
    if (opt.alpha) {
      auto e = stationary_and_b(eigen_solve(discretize(spec, disc()), *opt.alpha));
      summary["alpha"] = *opt.alpha;
      summary["theta"] = spec.theta;
      summary["calibrated"] = false;
      return {spec, std::move(e)};
    }
    auto [cs, cal] = calibrate_critical(spec, disc());
    summary["alpha"] = cal.alpha;
    summary["theta"] = cal.theta_star;
    summary["calibrated"] = true;
    auto e = critical_system(cs, cal.alpha, disc());
    return {cs, std::move(e)};
  }

  std::vector<Direction> directions(const std::vector<std::string>& fallback) const {
    std::vector<Direction> out;
    for (const auto& s : opt.dirs.empty() ? fallback : opt.dirs) out.push_back(parse_direction(s, spec.d));
    return out;
  }
};

// ---------------------------------------------------------------------------
// subcommands

int cmd_validate(Context& c) {
  double alpha = 1.0;
  EnsembleSpec s = c.spec;
  if (c.opt.alpha) {
    alpha = *c.opt.alpha;
  } else {
    try {
      auto [cs, cal] = calibrate_critical(c.spec, c.disc());
      s = cs;
      alpha = cal.alpha;
      c.summary["calibrated"] = true;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::CalibrationOutOfRange) throw;
      c.summary["calibrated"] = false;
      c.summary["calibration_error"] = e.what();
    }
  }
  const auto rep = check_assumptions(s, alpha);
  json entries = json::array();
  for (const auto& e : rep.entries)
    entries.push_back({{"name", e.name}, {"pass", e.pass}, {"mandatory", e.mandatory}, {"witness", e.witness}, {"detail", e.detail}});
  c.summary["alpha"] = alpha;
  c.summary["theta"] = s.theta;
  c.summary["entries"] = entries;
  c.summary["c"] = rep.c;
  c.summary["c_prime"] = rep.c_prime;
  c.summary["ok"] = rep.ok();
  c.out.write_json("validate.json", c.summary);
  for (const auto& e : rep.entries)
    std::printf("%-20s %s%s\n", e.name.c_str(), e.pass ? "pass" : "FAIL", e.mandatory ? "" : " (advisory)");
  if (!rep.ok()) {
    std::fprintf(stderr, "validation failed: %s\n", rep.failures().c_str());
    return kValidation;
  }
  return kOk;
}

int cmd_spectral(Context& c) {
  const auto s_list = parse_grid(c.opt.s_grid);
  const auto disc = discretize(c.spec, c.disc());
  const auto curve = m_curve(*disc, s_list);
  std::string csv = "s,k,m,m_prime\n";
  for (std::size_t i = 0; i < curve.s.size(); ++i)
    csv += num(curve.s[i]) + "," + num(curve.k[i]) + "," + num(curve.m[i]) + "," + num(curve.m_prime[i]) + "\n";
  c.out.write("spectral.csv", csv);
  c.summary["theta"] = c.spec.theta;
  c.summary["min_log_convexity"] = curve.s.size() > 2 ? curve.min_log_convexity() : 0.0;
  c.out.write_json("spectral.json", c.summary);
  return kOk;
}

int cmd_calibrate(Context& c) {
  auto [cs, cal] = calibrate_critical(c.spec, c.disc());
  const auto eig = critical_system(cs, cal.alpha, c.disc());
  const auto res = spectral_residuals(eig);
  json j;
  j["alpha"] = cal.alpha;
  j["theta"] = cal.theta_star;
  j["res_m"] = cal.res_m;
  j["res_mprime"] = cal.res_mprime;
  j["g1"] = cal.g1;
  j["k"] = eig.k;
  j["eigen_residual_H"] = res.right;
  j["eigen_residual_nu"] = res.left;
  j["drift"] = eig.drift;
  c.out.write_json("calibration.json", j);
  std::printf("alpha = %s  theta = %s\n", num(cal.alpha).c_str(), num(cal.theta_star).c_str());
  return kOk;
}

int cmd_martingale(Context& c) {
  auto [cs, eig] = c.critical();
  const Direction u = c.directions({"diag"}).front();
  const auto record = int_grid(c.opt.n_grid);
  const int depth = record.back();
  const PopulationStepper stepper(cs, c.opt.tilt);
  const auto R = static_cast<std::size_t>(c.opt.replicates);
  std::vector<MartingaleSeries> series(R);
  std::vector<std::unique_ptr<DirectionCache>> caches;
  for (int k = 0; k < std::max(1, c.opt.workers); ++k) caches.push_back(std::make_unique<DirectionCache>(eig));
  const Stream root(c.opt.seed);
  parallel_for(R, c.opt.workers, [&](std::size_t r, int k) {
    series[r] = streamed_martingales(stepper, eig, u, depth, root.child(0xA1, r), record, c.opt.cap, *caches[static_cast<std::size_t>(k)]);
  });
  std::string csv = "replicate,n,W,DW,maxnorm\n";
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t i = 0; i < series[r].n.size(); ++i)
      csv += std::to_string(r) + "," + std::to_string(series[r].n[i]) + "," + num(series[r].W[i]) + "," + num(series[r].DW[i]) + "," +
             num(series[r].max_norm[i]) + "\n";
  c.out.write("martingales.csv", csv);
  const double h = eig.H_at(u), b = eig.b_at(u);
  json rows = json::array();
  for (std::size_t i = 0; i < record.size(); ++i) {
    std::vector<double> w(R), dw(R);
    for (std::size_t r = 0; r < R; ++r) {
      w[r] = series[r].W[i];
      dw[r] = series[r].DW[i];
    }
    const auto mw = mean_se(w), md = mean_se(dw);
    rows.push_back({{"n", record[i]}, {"W_mean", mw.mean}, {"W_se", mw.se}, {"W_z", mw.z(h)}, {"DW_mean", md.mean},
                    {"DW_se", md.se}, {"DW_z", md.z(b * h)}, {"W_median", median(w)}});
  }
  c.summary["u"] = to_json(u);
  c.summary["H"] = h;
  c.summary["bH"] = b * h;
  c.summary["generations"] = rows;
  if (c.opt.line_t) {
    const auto line = stopping_line(cs, u, *c.opt.line_t, Stream(c.opt.seed).child(0xA2).key(), c.opt.cap);
    std::string lc = "t,S";
    for (int i = 0; i < cs.d; ++i) lc += ",U" + std::to_string(i + 1);
    lc += "\n";
    for (const auto& nd : line.nodes) {
      lc += num(line.t) + "," + num(nd.S);
      for (int i = 0; i < cs.d; ++i) lc += "," + num(nd.U[i]);
      lc += "\n";
    }
    c.out.write("stopping_line.csv", lc);
    c.summary["line_nodes"] = line.nodes.size();
  }
  c.out.write_json("martingale.json", c.summary);
  return kOk;
}

int cmd_mrw(Context& c) {
  auto [cs, eig] = c.critical();
  const Direction u = c.opt.start.empty() ? eig.grid()[eig.disc->center_index] : parse_direction(c.opt.start, cs.d);
  Stream rng = Stream(c.opt.seed).child(0xB1);
  const auto tr = simulate(eig, u, c.opt.steps, rng);
  std::string csv = "n";
  for (int i = 0; i < cs.d; ++i) csv += ",u" + std::to_string(i + 1);
  csv += ",S\n";
  for (const auto& st : tr.states) {
    csv += std::to_string(st.n);
    for (int i = 0; i < cs.d; ++i) csv += "," + num(st.u[i]);
    csv += "," + num(st.s) + "\n";
  }
  c.out.write("trajectory.csv", csv);
  c.summary["drift"] = tr.drift();
  c.summary["sd_increment"] = tr.sd_increment;
  c.summary["min_S"] = tr.min_s;
  c.summary["max_S"] = tr.max_s;
  c.summary["pi_drift"] = eig.drift;
  c.out.write_json("mrw.json", c.summary);
  return kOk;
}

RegenSchedule make_schedule(const EnsembleSpec& cs, const EigenSystem& eig, const std::string& mode, const std::string& atom,
                            const std::string& start, long steps, Stream rng) {
  RegenConfig cfg;
  if (mode == "atom") {
    cfg.mode = RegenMode::Atom;
    cfg.atom = atom.empty() ? default_atom(cs) : parse_direction(atom, cs.d);
  } else if (mode == "split") {
    cfg.mode = RegenMode::Split;
  } else {
    throw Error(ErrorKind::ConfigError, "unknown regeneration mode '" + mode + "'");
  }
  cfg.steps = steps;
  if (!start.empty()) cfg.start = parse_direction(start, cs.d);
  return regenerate(eig, cfg, rng);
}

int cmd_regen(Context& c) {
  auto [cs, eig] = c.critical();
  const auto sch = make_schedule(cs, eig, c.opt.mode, c.opt.atom, c.opt.start, c.opt.steps, Stream(c.opt.seed).child(0xC1));
  std::string csv = "k,sigma,V_increment\n";
  for (std::size_t k = 0; k < sch.v_increment.size(); ++k)
    csv += std::to_string(k) + "," + std::to_string(sch.sigma[k]) + "," + num(sch.v_increment[k]) + "\n";
  c.out.write("regen.csv", csv);
  std::vector<double> len(sch.cycle_length.begin(), sch.cycle_length.end());
  const auto ml = mean_se(len);
  const auto mv = mean_se(sch.v_increment);
  const auto tail = fit_geometric_tail(sch.cycle_length);
  c.summary["mode"] = c.opt.mode;
  c.summary["cycles"] = len.size();
  c.summary["cycle_mean"] = ml.mean;
  c.summary["cycle_se"] = ml.se;
  c.summary["V_mean"] = mv.mean;
  c.summary["V_se"] = mv.se;
  c.summary["tail_l"] = tail.l;
  c.summary["tail_q"] = tail.q;
  if (sch.mode == RegenMode::Atom) {
    c.summary["atom"] = to_json(sch.atom);
    c.summary["inverse_pi_atom"] = 1.0 / eig.pi[eig.grid().nearest(sch.atom)];
  } else {
    c.summary["split"] = {{"lambda0", sch.split.lambda0}, {"delta", sch.split.delta}, {"gamma", sch.split.gamma}, {"h_hi", sch.split.h_hi}};
  }
  c.out.write_json("regen.json", c.summary);
  return kOk;
}

int cmd_many2one(Context& c) {
  auto [cs, eig] = c.critical();
  const Direction u = c.directions({"diag"}).front();
  const double a = eig.s;
  const std::vector<std::pair<std::string, PathFunctional>> fns = {
      {"one", [](std::span<const ChainState>) { return 1.0; }},
      {"level", [](std::span<const ChainState> p) { return p.back().s; }},
      {"mixed", [a](std::span<const ChainState> p) {
         double x = 0.0;
         for (const auto& st : p) x += std::cos(st.s) * st.u[0];
         return x + std::exp(-a * std::abs(p.back().s));
       }}};
  json rows = json::array();
  double worst = 0.0;
  for (int n = 1; n <= c.opt.n; ++n)
    for (const auto& [name, f] : fns) {
      const auto r = many_to_one_check(eig, u, n, f);
      worst = std::max(worst, r.error);
      rows.push_back({{"n", n}, {"functional", name}, {"lhs", r.lhs}, {"rhs", r.rhs}, {"abs_error", r.error}, {"lhs_outcomes", r.lhs_outcomes}});
    }
  c.summary["checks"] = rows;
  c.summary["max_abs_error"] = worst;
  c.out.write_json("many2one.json", c.summary);
  std::printf("max |lhs - rhs| = %s\n", num(worst).c_str());
  return kOk;
}

FixedPointModel build_model(Context& c, const EnsembleSpec& cs, const EigenSystem& eig) {
  FixedPointOptions fo;
  fo.replicates = c.opt.fp_replicates;
  fo.depth = c.opt.depth;
  fo.K = c.opt.K;
  fo.cap = c.opt.cap;
  fo.seed = Stream(c.opt.seed).child(0xD1).key();
  fo.workers = c.opt.workers;
  FixedPointModel m(cs, eig, fo);
  c.summary["model"] = {{"replicates", m.replicates()},      {"depth", fo.depth},
                        {"K", fo.K},                         {"barrier", m.barrier()},
                        {"mean_classes", m.stats().mean_classes}, {"max_generation", m.stats().max_generation},
                        {"extended_fraction", m.stats().extended_fraction}, {"t_max", m.t_max()}};
  return m;
}

int cmd_fixedpoint(Context& c) {
  auto [cs, eig] = c.critical();
  const auto fpm = build_model(c, cs, eig);
  const auto dirs = c.directions({"diag", "e1"});
  const auto grid = laplace_grid(fpm, dirs, parse_grid(c.opt.r_grid));
  std::string csv = "r";
  for (int i = 0; i < cs.d; ++i) csv += ",u" + std::to_string(i + 1);
  csv += ",phi,se\n";
  for (std::size_t i = 0; i < grid.directions.size(); ++i)
    for (std::size_t j = 0; j < grid.radii.size(); ++j) {
      csv += num(grid.radii[j]);
      for (int k = 0; k < cs.d; ++k) csv += "," + num(grid.directions[i][k]);
      csv += "," + num(grid.phi[i][j].value) + "," + num(grid.phi[i][j].se) + "\n";
    }
  c.out.write("laplace.csv", csv);
  std::vector<std::pair<double, Direction>> pts;
  for (double r : parse_grid(c.opt.residual_r))
    for (const auto& u : dirs) pts.push_back({r, u});
  const auto rep = fixed_point_residual(fpm, pts, sample_tuples(cs, c.opt.tuples, Stream(c.opt.seed).child(0xD2)));
  json rows = json::array();
  for (const auto& p : rep.points)
    rows.push_back({{"r", p.r}, {"u", to_json(p.u)}, {"lhs", p.lhs}, {"rhs", p.rhs}, {"residual", p.residual.value}, {"se", p.residual.se}, {"z", p.residual.z()}});
  c.summary["residuals"] = rows;
  c.summary["max_abs_residual"] = rep.max_abs;
  c.summary["max_abs_z"] = rep.max_abs_z;
  c.summary["positive_fraction"] = fpm.positive_fraction(dirs.front());
  c.summary["worst_increase_z"] = grid.worst_increase_z();
  c.out.write_json("fixedpoint.json", c.summary);
  std::printf("max |z| = %.3f\n", rep.max_abs_z);
  return kOk;
}

int cmd_renewal(Context& c) {
  auto [cs, eig] = c.critical();
  const auto fpm = build_model(c, cs, eig);
  const Direction u = c.opt.dirs.empty() ? default_u0(eig) : parse_direction(c.opt.dirs.front(), cs.d);
  RenewalOptions ro;
  ro.tuples = c.opt.tuples;
  ro.kernel_samples = c.opt.tuples;
  ro.seed = Stream(c.opt.seed).child(0xE1).key();
  std::optional<RegenSchedule> sch;
  if (c.opt.regen != "none")
    sch = make_schedule(cs, eig, c.opt.regen, c.opt.atom, "", c.opt.regen_steps, Stream(c.opt.seed).child(0xE2));
  const auto rd = D_G_curves(fpm, u, parse_grid(c.opt.t_grid), ro, sch ? &*sch : nullptr);
  std::string csv = "t,D,G,residual,z\n";
  for (std::size_t k = 0; k < rd.t.size(); ++k)
    csv += num(rd.t[k]) + "," + num(rd.D[k].value) + "," + num(rd.G[k].value) + "," + num(rd.residual[k].value) + "," + num(rd.residual[k].z()) + "\n";
  c.out.write("renewal.csv", csv);
  json rows = json::array();
  for (std::size_t k = 0; k < rd.t.size(); ++k) {
    json r = {{"t", rd.t[k]}, {"D", to_json(rd.D[k])}, {"G", to_json(rd.G[k])}, {"residual", to_json(rd.residual[k])}};
    if (rd.has_regen) {
      r["D_hat"] = rd.D_hat[k];
      r["g_hat"] = rd.g_hat[k];
      r["hat_residual"] = rd.hat_residual[k];
      r["hat_ratio"] = rd.hat_ratio[k];
    }
    rows.push_back(r);
  }
  json steps = json::array();
  for (const auto& s : rd.eG_step) steps.push_back(to_json(s));
  c.summary["u"] = to_json(u);
  c.summary["rows"] = rows;
  c.summary["eG_steps"] = steps;
  c.summary["G_nonnegative"] = rd.G_nonnegative;
  c.summary["eG_monotone"] = rd.eG_monotone;
  c.summary["max_abs_z"] = rd.max_abs_z;
  if (rd.has_regen) {
    c.summary["cycles"] = rd.cycles;
    c.summary["g_tail"] = rd.g_tail;
    c.summary["beyond_t_max"] = rd.beyond_t_max;
  }
  c.out.write_json("renewal.json", c.summary);
  return kOk;
}

int cmd_slowvar(Context& c) {
  auto [cs, eig] = c.critical();
  const auto fpm = build_model(c, cs, eig);
  const Direction u0 = default_u0(eig);
  std::vector<Direction> dirs{u0};
  for (const auto& d : c.directions({"diag"})) dirs.push_back(d);
  const auto t = parse_grid(c.opt.t_grid);
  const auto s = parse_grid(c.opt.slow_s);
  const auto rep = slowvar_diag(fpm, u0, dirs, s, t);
  json table = json::array();
  for (std::size_t i = 0; i < dirs.size(); ++i)
    for (std::size_t j = 0; j < t.size(); ++j)
      for (std::size_t k = 0; k < s.size(); ++k)
        table.push_back({{"u", to_json(dirs[i])}, {"t", t[j]}, {"s", s[k]}, {"h", rep.h[i][j][k]}});
  json dvals = json::array();
  for (std::size_t j = 0; j < t.size(); ++j) dvals.push_back({{"t", t[j]}, {"D", rep.D_u0[j].value}, {"se", rep.D_u0[j].se}});
  const auto hom = homogeneity_check(fpm, u0, parse_grid(c.opt.homog_r), c.opt.homog_depth, c.opt.homog_trees,
                                     Stream(c.opt.seed).child(0xF9).key(), c.opt.workers);
  json hrows = json::array();
  for (std::size_t i = 0; i < hom.r.size(); ++i) hrows.push_back({{"r", hom.r[i]}, {"ratio_over_r_alpha", hom.ratio[i].value}, {"se", hom.ratio[i].se}});
  json j;
  j["Kprime"] = rep.Kprime;
  j["band"] = {rep.band[0], rep.band[1]};
  j["h_table"] = table;
  j["u0"] = to_json(u0);
  j["D_u0"] = dvals;
  j["fit_t"] = rep.fit_t;
  j["ratio_variation"] = rep.ratio_variation;
  j["increasing"] = rep.increasing;
  j["homogeneity"] = {{"depth", hom.depth}, {"trees", hom.trees}, {"rows", hrows}};
  j["run"] = c.summary;
  c.out.write_json("slowvar.json", j);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  const auto wall0 = std::chrono::steady_clock::now();
  Options opt;
  CLI::App app{"Simulation and diagnostics for critical multivariate smoothing transforms"};
  app.set_version_flag("--version", std::string(CRITSMOOTH_VERSION));
  app.set_config("--config", "", "TOML run configuration (keys as long option names)");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);

  auto common = [&](CLI::App* sub) {
    sub->add_option("--model", opt.model, "model file (TOML)")->required();
    sub->add_option("--out", opt.out, "output directory");
    sub->add_option("--seed", opt.seed, "root seed");
    sub->add_option("--workers", opt.workers, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--resolution", opt.resolution, "direction grid resolution");
  };
  auto with_alpha = [&](CLI::App* sub) {
    sub->add_option("--alpha", opt.alpha, "use the model's theta at this exponent instead of calibrating");
  };
  auto fixed_point = [&](CLI::App* sub) {
    sub->add_option("--replicates", opt.fp_replicates, "replicate environments");
    sub->add_option("--depth", opt.depth, "environment depth");
    sub->add_option("--K", opt.K, "scale constant");
    sub->add_option("--cap", opt.cap, "class cap per generation");
  };

  auto* validate = app.add_subcommand("validate", "check the model assumptions");
  common(validate);
  with_alpha(validate);
  auto* spectral = app.add_subcommand("spectral", "m(s) and its derivative on a grid");
  common(spectral);
  spectral->add_option("--s", opt.s_grid, "exponent grid a:b:step or list");
  auto* calibrate = app.add_subcommand("calibrate", "solve m(alpha)=1, m'(alpha)=0");
  common(calibrate);
  auto* martingale = app.add_subcommand("martingale", "additive and derivative martingales");
  common(martingale);
  with_alpha(martingale);
  martingale->add_option("--replicates", opt.replicates, "replicate trees");
  martingale->add_option("--n", opt.n_grid, "generations to record");
  martingale->add_option("--u", opt.dirs, "direction");
  martingale->add_option("--tilt", opt.tilt, "importance tilt exponent");
  martingale->add_option("--cap", opt.cap, "class cap per generation");
  martingale->add_option("--line-t", opt.line_t, "also sample one stopping line at this level");
  auto* mrw = app.add_subcommand("mrw", "simulate the tilted Markov random walk");
  common(mrw);
  with_alpha(mrw);
  mrw->add_option("--steps", opt.steps, "chain length");
  mrw->add_option("--start", opt.start, "start direction");
  auto* regen = app.add_subcommand("regen", "regeneration cycles of the chain");
  common(regen);
  with_alpha(regen);
  regen->add_option("--mode", opt.mode, "atom or split")->check(CLI::IsMember({"atom", "split"}));
  regen->add_option("--steps", opt.steps, "chain length");
  regen->add_option("--atom", opt.atom, "atom direction");
  regen->add_option("--start", opt.start, "start direction");
  auto* many2one = app.add_subcommand("many2one", "exhaustive many-to-one identity check");
  common(many2one);
  with_alpha(many2one);
  many2one->add_option("--n", opt.n, "largest generation")->check(CLI::Range(1, 8));
  many2one->add_option("--u", opt.dirs, "direction");
  auto* fixedpoint = app.add_subcommand("fixedpoint", "Laplace transform of the fixed point and its residual");
  common(fixedpoint);
  with_alpha(fixedpoint);
  fixed_point(fixedpoint);
  fixedpoint->add_option("--tuples", opt.tuples, "tuples for the residual");
  fixedpoint->add_option("--r", opt.r_grid, "radii, e.g. 'logr 0.1 10 5'");
  fixedpoint->add_option("--residual-r", opt.residual_r, "radii of the residual grid");
  fixedpoint->add_option("--u", opt.dirs, "directions");
  auto* renewal = app.add_subcommand("renewal", "D, G and the renewal equation");
  common(renewal);
  with_alpha(renewal);
  fixed_point(renewal);
  renewal->add_option("--tuples", opt.tuples, "tuples and kernel draws");
  renewal->add_option("--t", opt.t_grid, "t grid");
  renewal->add_option("--u", opt.dirs, "direction (default: pi-mean direction)");
  renewal->add_option("--regen", opt.regen, "none, atom or split")->check(CLI::IsMember({"none", "atom", "split"}));
  renewal->add_option("--atom", opt.atom, "atom direction");
  renewal->add_option("--regen-steps", opt.regen_steps, "chain length for the schedule");
  auto* slowvar = app.add_subcommand("slowvar", "slow variation, log law and homogeneity");
  common(slowvar);
  with_alpha(slowvar);
  fixed_point(slowvar);
  slowvar->add_option("--t", opt.t_grid, "t grid");
  slowvar->add_option("--s", opt.slow_s, "shift grid");
  slowvar->add_option("--u", opt.dirs, "extra directions for the h table");
  slowvar->add_option("--homog-r", opt.homog_r, "radii for the homogeneity check");
  slowvar->add_option("--homog-depth", opt.homog_depth, "tree depth for the homogeneity check");
  slowvar->add_option("--homog-trees", opt.homog_trees, "trees for the homogeneity check");
  opt.t_grid = "1:6:1";

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }
  for (auto* sub : app.get_subcommands()) opt.command = sub->get_name();
  if (opt.command == "slowvar" && app.get_subcommand("slowvar")->count("--t") == 0) opt.t_grid = "1:7:1";

  std::optional<Output> out;
  int code = kOk;
  try {
    if (!fs::exists(opt.model)) throw Error(ErrorKind::ConfigError, "model file not found: " + opt.model);
    out.emplace(opt.out);
    Context ctx{opt, load_model(opt.model), *out, json::object()};
    if (opt.command == "validate") code = cmd_validate(ctx);
    else if (opt.command == "spectral") code = cmd_spectral(ctx);
    else if (opt.command == "calibrate") code = cmd_calibrate(ctx);
    else if (opt.command == "martingale") code = cmd_martingale(ctx);
    else if (opt.command == "mrw") code = cmd_mrw(ctx);
    else if (opt.command == "regen") code = cmd_regen(ctx);
    else if (opt.command == "many2one") code = cmd_many2one(ctx);
    else if (opt.command == "fixedpoint") code = cmd_fixedpoint(ctx);
    else if (opt.command == "renewal") code = cmd_renewal(ctx);
    else if (opt.command == "slowvar") code = cmd_slowvar(ctx);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    code = exit_code(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    code = kNumerical;
  }
  if (!out) return code;

  json manifest;
  manifest["command"] = opt.command;
  manifest["config"] = opt.echo();
  manifest["seed"] = opt.seed;
  manifest["version"] = CRITSMOOTH_VERSION;
  manifest["model_sha256"] = sha256_hex(read_file(opt.model));
  manifest["exit_code"] = code;
  manifest["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
  manifest["files"] = out->files();
  std::ofstream mf(out->dir() / "manifest.json");
  mf << manifest.dump(2) << "\n";
  return code;
}
