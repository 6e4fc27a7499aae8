#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <boost/math/distributions/normal.hpp>
#include <boost/version.hpp>

#include "polylab/chaos.hpp"
#include "polylab/core.hpp"
#include "polylab/environment.hpp"
#include "polylab/geometry.hpp"
#include "polylab/gibbs.hpp"
#include "polylab/paths.hpp"
#include "polylab/stats.hpp"
#include "polylab/tube.hpp"
#include "json.hpp"

namespace polylab::lab {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr std::uint64_t kDefaultSeed = 20240601;

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// h_alpha(u) = u - u^2/(alpha (1+u)) - ln(1+u)
inline double h_alpha(double alpha, double u) {
  if (!(u > -1.0)) throw ConfigError("h_alpha needs u > -1");
  if (!(alpha > 0.0)) throw ConfigError("h_alpha needs alpha > 0");
  return u - u * u / (alpha * (1.0 + u)) - std::log1p(u);
}

// The alpha for which h_alpha(lambda(beta)) = 0.
inline double alpha_of_beta(double beta) {
  double l = lambda(beta);
  if (l == 0.0) throw ConfigError("alpha(beta) undefined at beta = 0");
  return l * l / (std::exp(beta) * (l - beta));
}

inline double curve_nu(double a, double alpha, double beta) {
  double l = lambda(beta);
  if (l == 0.0) throw ConfigError("curve undefined at beta = 0");
  if (!(alpha > 0.0) || !(a > 0.0)) throw ConfigError("curve needs a > 0 and alpha > 0");
  return a * std::pow(std::abs(l), -alpha);
}

// ---------------------------------------------------------------- config

class ExperimentConfig {
 public:
  std::string preset;
  std::string source = "<config>";

  void set(const std::string& key, const std::string& value, int line) { kv_[key] = {value, line}; }
  bool has(const std::string& key) const { return kv_.count(key) > 0; }
  const std::map<std::string, std::pair<std::string, int>>& entries() const { return kv_; }

  double num(const std::string& key, double def) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    return parse_double(it->second.first, key, it->second.second);
  }
  std::size_t count(const std::string& key, std::size_t def) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    double v = parse_double(it->second.first, key, it->second.second);
    if (v < 0 || v != std::floor(v) || v > 1e12) fail(it->second.second, key + " must be a non-negative integer");
    return static_cast<std::size_t>(v);
  }
  std::vector<double> list(const std::string& key, std::vector<double> def) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    std::vector<double> out;
    std::string s = it->second.first;
    std::replace(s.begin(), s.end(), ',', ' ');
    std::istringstream is(s);
    std::string tok;
    while (is >> tok) out.push_back(parse_double(tok, key, it->second.second));
    if (out.empty()) fail(it->second.second, key + " is empty");
    return out;
  }
  std::string str(const std::string& key, const std::string& def) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? def : it->second.first;
  }
  int line_of(const std::string& key) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? 0 : it->second.second;
  }
  [[noreturn]] void fail(int line, const std::string& msg) const {
    if (line > 0) throw ConfigError(source + ":" + std::to_string(line) + ": " + msg);
    throw ConfigError(source + ": " + msg);
  }

 private:
  double parse_double(const std::string& s, const std::string& key, int line) const {
    try {
      std::size_t pos = 0;
      double v = std::stod(s, &pos);
      if (pos != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      fail(line, "cannot read '" + s + "' as a number for " + key);
    }
  }
  std::map<std::string, std::pair<std::string, int>> kv_;
};

inline std::string trim(const std::string& s) {
  auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// Flat `key = value` lines, `#` starts a comment.
inline ExperimentConfig parse_config(std::istream& is, const std::string& source = "<config>") {
  ExperimentConfig c;
  c.source = source;
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) c.fail(n, "expected 'key = value'");
    std::string k = trim(line.substr(0, eq)), v = trim(line.substr(eq + 1));
    if (k.empty()) c.fail(n, "missing key");
    if (v.empty()) c.fail(n, "missing value for " + k);
    if (c.has(k)) c.fail(n, "duplicate key " + k);
    c.set(k, v, n);
  }
  return c;
}

inline const std::set<std::string>& known_presets() {
  static const std::set<std::string> p{"verify", "scan", "crossover", "localization", "exponents", "doob"};
  return p;
}

inline const std::set<std::string>& allowed_keys(const std::string& preset) {
  static const std::map<std::string, std::set<std::string>> m{
      {"verify", {"preset", "seed", "out", "instances", "envs", "paths", "replicas", "t", "beta", "nu", "r"}},
      {"scan", {"preset", "seed", "out", "betas", "nus", "r", "d", "t", "envs", "paths", "overlap_envs", "a", "alpha"}},
      {"crossover", {"preset", "seed", "out", "beta_star", "ts", "replicas", "particles", "K"}},
      {"localization", {"preset", "seed", "out", "beta0", "nub2", "r", "t", "envs", "particles", "delta"}},
      {"exponents", {"preset", "seed", "out", "beta", "nu", "r", "ts", "envs", "particles"}},
      {"doob", {"preset", "seed", "out", "beta", "nu", "r", "t", "envs", "paths", "steps"}},
  };
  auto it = m.find(preset);
  if (it == m.end()) throw ConfigError("unknown preset '" + preset + "'");
  return it->second;
}

inline void check_keys(const ExperimentConfig& c, const std::string& preset) {
  const auto& ok = allowed_keys(preset);
  for (const auto& [k, v] : c.entries())
    if (!ok.count(k)) c.fail(v.second, "unknown key '" + k + "' for preset " + preset);
  if (c.has("preset") && c.str("preset", "") != preset)
    c.fail(c.line_of("preset"), "config is for preset '" + c.str("preset", "") + "', not '" + preset + "'");
}

// ---------------------------------------------------------------- output

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline const char* kEstimateHeader = "observable,beta,nu,r,d,t,value,stderr,n,method,seed\n";

struct Row {
  std::string observable;
  double beta = 0, nu = 0, r = 0;
  int d = 1;
  double t = 0;
  Estimate est;
  std::uint64_t seed = 0;
};

inline std::string csv_row(const Row& r) {
  std::ostringstream os;
  os << r.observable << ',' << fmt(r.beta) << ',' << fmt(r.nu) << ',' << fmt(r.r) << ',' << r.d << ',' << fmt(r.t)
     << ',' << fmt(r.est.value) << ',' << fmt(r.est.std_error) << ',' << r.est.n << ',' << method_name(r.est.method)
     << ',' << r.seed << '\n';
  return os.str();
}

struct Check {
  std::string name;
  double statistic = 0;
  double threshold = 0;
  bool exact = false;  // exact identity: statistic is a relative residual
  bool pass = true;
};

struct CellOutput {
  std::string csv;
  std::vector<Row> rows;
  std::vector<Check> checks;
  nlohmann::json extra;
};

struct Cell {
  std::string id;
  std::uint64_t seed = 0;
  std::function<CellOutput(Stream&)> run;
};

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  return h;
}

// Seed of a cell depends only on the base seed and the cell id.
inline std::uint64_t cell_seed(std::uint64_t base, const std::string& id) {
  return splitmix64(splitmix64(base) ^ fnv1a(id));
}

// Cells run on `workers` threads; `sink` sees the outputs in cell order from
// the calling thread only.
inline void run_cells(const std::vector<Cell>& cells, std::size_t workers,
                      const std::function<void(std::size_t, const CellOutput&)>& sink) {
  const std::size_t n = cells.size();
  std::vector<std::optional<CellOutput>> done(n);
  std::vector<std::exception_ptr> err(n);
  std::mutex mu;
  std::condition_variable cv;
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      std::optional<CellOutput> out;
      std::exception_ptr e;
      try {
        Stream rng(cells[i].seed);
        out = cells[i].run(rng);
      } catch (...) {
        e = std::current_exception();
      }
      {
        std::lock_guard<std::mutex> lk(mu);
        if (e)
          err[i] = e;
        else
          done[i] = std::move(out);
      }
      cv.notify_all();
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, n));
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  std::exception_ptr first;
  for (std::size_t i = 0; i < n; ++i) {
    std::unique_lock<std::mutex> lk(mu);
    cv.wait(lk, [&] { return done[i].has_value() || err[i]; });
    if (err[i]) {
      first = err[i];
      next = n;
      break;
    }
    CellOutput out = std::move(*done[i]);
    done[i].reset();
    lk.unlock();
    try {
      sink(i, out);
    } catch (...) {
      first = std::current_exception();
      next = n;
      break;
    }
  }
  for (auto& th : pool) th.join();
  if (first) std::rethrow_exception(first);
}

inline void write_file(const std::filesystem::path& p, const std::string& content) {
  std::error_code ec;
  std::filesystem::create_directories(p.parent_path(), ec);
  if (ec) throw IoError("cannot create " + p.parent_path().string() + ": " + ec.message());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot open " + p.string() + " for writing");
  os << content;
  os.flush();
  if (!os) throw IoError("write failed for " + p.string());
}

// ---------------------------------------------------------------- svg

struct Series {
  std::string label;
  std::vector<double> x, y, err;
};

namespace svg {

inline std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

inline const char* color(std::size_t i) {
  static const char* c[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"};
  return c[i % 6];
}

struct Frame {
  double x0, x1, y0, y1;
  double W = 640, H = 420, ml = 70, mr = 20, mt = 40, mb = 55;
  double px(double x) const { return ml + (x - x0) / (x1 - x0) * (W - ml - mr); }
  double py(double y) const { return H - mb - (y - y0) / (y1 - y0) * (H - mt - mb); }
};

inline std::string axes(const Frame& f, const std::string& title, const std::string& xl, const std::string& yl) {
  std::ostringstream o;
  o << "<rect x='" << f.ml << "' y='" << f.mt << "' width='" << f.W - f.ml - f.mr << "' height='"
    << f.H - f.mt - f.mb << "' fill='none' stroke='black'/>\n";
  o << "<text x='" << f.W / 2 << "' y='22' text-anchor='middle' font-size='15'>" << esc(title) << "</text>\n";
  o << "<text x='" << f.W / 2 << "' y='" << f.H - 12 << "' text-anchor='middle' font-size='13'>" << esc(xl)
    << "</text>\n";
  o << "<text x='16' y='" << f.H / 2 << "' text-anchor='middle' font-size='13' transform='rotate(-90 16 " << f.H / 2
    << ")'>" << esc(yl) << "</text>\n";
  for (int k = 0; k <= 4; ++k) {
    double x = f.x0 + (f.x1 - f.x0) * k / 4, y = f.y0 + (f.y1 - f.y0) * k / 4;
    o << "<text x='" << f.px(x) << "' y='" << f.H - f.mb + 16 << "' text-anchor='middle' font-size='11'>" << fmt(x)
      << "</text>\n";
    o << "<text x='" << f.ml - 6 << "' y='" << f.py(y) + 4 << "' text-anchor='end' font-size='11'>" << fmt(y)
      << "</text>\n";
  }
  return o.str();
}

inline std::string line_plot(const std::vector<Series>& s, const std::string& title, const std::string& xl,
                             const std::string& yl) {
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& q : s)
    for (std::size_t i = 0; i < q.x.size(); ++i) {
      double e = i < q.err.size() && std::isfinite(q.err[i]) ? q.err[i] : 0.0;
      if (!std::isfinite(q.y[i])) continue;
      x0 = std::min(x0, q.x[i]), x1 = std::max(x1, q.x[i]);
      y0 = std::min(y0, q.y[i] - e), y1 = std::max(y1, q.y[i] + e);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x0 -= 0.5, x1 += 0.5;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  double pad = 0.05 * (y1 - y0);
  Frame f{x0, x1, y0 - pad, y1 + pad};
  std::ostringstream o;
  o << "<svg xmlns='http://www.w3.org/2000/svg' width='" << f.W << "' height='" << f.H << "'>\n";
  o << "<rect width='100%' height='100%' fill='white'/>\n" << axes(f, title, xl, yl);
  for (std::size_t k = 0; k < s.size(); ++k) {
    const auto& q = s[k];
    o << "<polyline fill='none' stroke='" << color(k) << "' stroke-width='1.5' points='";
    for (std::size_t i = 0; i < q.x.size(); ++i)
      if (std::isfinite(q.y[i])) o << fmt(f.px(q.x[i])) << ',' << fmt(f.py(q.y[i])) << ' ';
    o << "'/>\n";
    for (std::size_t i = 0; i < q.x.size(); ++i) {
      if (!std::isfinite(q.y[i])) continue;
      o << "<circle cx='" << fmt(f.px(q.x[i])) << "' cy='" << fmt(f.py(q.y[i])) << "' r='3' fill='" << color(k)
        << "'/>\n";
      if (i < q.err.size() && q.err[i] > 0 && std::isfinite(q.err[i]))
        o << "<line x1='" << fmt(f.px(q.x[i])) << "' x2='" << fmt(f.px(q.x[i])) << "' y1='"
          << fmt(f.py(q.y[i] - q.err[i])) << "' y2='" << fmt(f.py(q.y[i] + q.err[i])) << "' stroke='" << color(k)
          << "'/>\n";
    }
    o << "<text x='" << f.W - f.mr - 8 << "' y='" << f.mt + 16 + 15 * k << "' text-anchor='end' font-size='12' fill='"
      << color(k) << "'>" << esc(q.label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

// Cells centred on the given x, y grid values; `curve` is drawn on top.
inline std::string heatmap(const std::vector<double>& xs, const std::vector<double>& ys,
                           const std::vector<std::vector<double>>& z, const std::string& title, const std::string& xl,
                           const std::string& yl, const Series* curve = nullptr) {
  auto edges = [](const std::vector<double>& v) {
    std::vector<double> e(v.size() + 1);
    if (v.size() == 1) return std::vector<double>{v[0] - 0.5, v[0] + 0.5};
    for (std::size_t i = 1; i < v.size(); ++i) e[i] = 0.5 * (v[i - 1] + v[i]);
    e[0] = v[0] - (e[1] - v[0]);
    e[v.size()] = v.back() + (v.back() - e[v.size() - 1]);
    return e;
  };
  auto ex = edges(xs), ey = edges(ys);
  double zmin = INFINITY, zmax = -INFINITY;
  for (const auto& row : z)
    for (double v : row)
      if (std::isfinite(v)) zmin = std::min(zmin, v), zmax = std::max(zmax, v);
  if (!std::isfinite(zmin)) zmin = 0, zmax = 1;
  if (zmax == zmin) zmax = zmin + 1;
  Frame f{ex.front(), ex.back(), ey.front(), ey.back()};
  f.mr = 90;
  std::ostringstream o;
  o << "<svg xmlns='http://www.w3.org/2000/svg' width='" << f.W << "' height='" << f.H << "'>\n";
  o << "<rect width='100%' height='100%' fill='white'/>\n";
  for (std::size_t j = 0; j < ys.size(); ++j)
    for (std::size_t i = 0; i < xs.size(); ++i) {
      double v = z[j][i];
      double u = std::isfinite(v) ? (v - zmin) / (zmax - zmin) : 0;
      int R = static_cast<int>(255 * u), B = static_cast<int>(255 * (1 - u)), G = 60;
      double x0 = f.px(ex[i]), x1 = f.px(ex[i + 1]), y0 = f.py(ey[j + 1]), y1 = f.py(ey[j]);
      o << "<rect x='" << fmt(x0) << "' y='" << fmt(y0) << "' width='" << fmt(x1 - x0) << "' height='" << fmt(y1 - y0)
        << "' fill='rgb(" << R << ',' << G << ',' << B << ")'/>\n";
    }
  o << axes(f, title, xl, yl);
  if (curve) {
    o << "<polyline fill='none' stroke='white' stroke-width='2' stroke-dasharray='6 3' points='";
    for (std::size_t i = 0; i < curve->x.size(); ++i) {
      double x = curve->x[i], y = curve->y[i];
      if (!std::isfinite(y) || x < f.x0 || x > f.x1 || y < f.y0 || y > f.y1) continue;
      o << fmt(f.px(x)) << ',' << fmt(f.py(y)) << ' ';
    }
    o << "'/>\n";
    o << "<text x='" << f.ml + 8 << "' y='" << f.mt + 16 << "' font-size='12' fill='white'>" << esc(curve->label)
      << "</text>\n";
  }
  o << "<text x='" << f.W - 80 << "' y='" << f.mt + 12 << "' font-size='11'>max " << fmt(zmax) << "</text>\n";
  o << "<text x='" << f.W - 80 << "' y='" << f.H - f.mb << "' font-size='11'>min " << fmt(zmin) << "</text>\n";
  o << "</svg>\n";
  return o.str();
}

}  // namespace svg

// ---------------------------------------------------------------- helpers

inline double bonferroni_z(std::size_t m, double level = 0.01) {
  boost::math::normal N;
  return boost::math::quantile(N, 1.0 - level / (2.0 * static_cast<double>(std::max<std::size_t>(1, m))));
}

inline Estimate exact(double v, std::size_t n = 1) {
  Estimate e;
  e.value = v;
  e.n = n;
  e.method = Method::closed_form;
  return e;
}

// R* and 1 - R from genealogical particle paths, averaged over environments.
struct LocalizationPoint {
  double nub2 = 0, beta = 0, nu = 0;
  Estimate R_star, one_minus_R, J;
};

inline LocalizationPoint localization_point(double beta, double nu, const TubeSpec& spec, double t, std::size_t n_env,
                                            std::size_t particles, Stream& rng) {
  EnvConfig cfg{spec.d, nu, t, default_half_width(t, spec.r), 0};
  std::vector<double> rs(n_env), om(n_env), jj(n_env);
  for (std::size_t e = 0; e < n_env; ++e) {
    Stream es = rng.child(2 * e), ps = rng.child(2 * e + 1);
    Environment env = sample_environment(cfg, es);
    TubeIndex idx(env, spec, t);
    GibbsEnsemble g = smc_path_ensemble(idx, env, beta, SmcOptions{particles, 1}, ps);
    FavoritePath f = favorite_path(g);
    rs[e] = f.R_star.value;
    om[e] = 1.0 - f.J_plugin;
    jj[e] = f.J_plugin;
  }
  LocalizationPoint p;
  p.beta = beta;
  p.nu = nu;
  p.nub2 = nu * beta * beta;
  p.R_star = stats::mean_estimate(rs, Method::smc);
  p.one_minus_R = stats::mean_estimate(om, Method::smc);
  p.J = stats::mean_estimate(jj, Method::smc);
  return p;
}

struct LocalizationReport {
  std::vector<LocalizationPoint> points;
  bool monotone = true;        // R* non-decreasing within 3 combined standard errors
  stats::LinearFit fit;        // log(1 - R*) against log(nu beta^2) over positive rungs
  bool fit_ok = false;
  double reference_slope = -1.0 / 6.0;
};

inline LocalizationReport summarize_localization(std::vector<LocalizationPoint> pts) {
  LocalizationReport r;
  r.points = std::move(pts);
  for (std::size_t i = 1; i < r.points.size(); ++i) {
    const auto &a = r.points[i - 1].R_star, &b = r.points[i].R_star;
    if (a.value - b.value > 3.0 * std::hypot(a.std_error, b.std_error)) r.monotone = false;
  }
  std::vector<double> x, y;
  for (const auto& p : r.points)
    if (p.nub2 > 0 && p.R_star.value < 1.0) {
      x.push_back(std::log(p.nub2));
      y.push_back(std::log(1.0 - p.R_star.value));
    }
  if (x.size() >= 2) {
    r.fit = stats::linear_fit(x, y);
    r.fit_ok = true;
  }
  return r;
}

inline LocalizationReport localization_sweep(double beta0, const std::vector<double>& nub2, const TubeSpec& spec,
                                             double t, std::size_t n_env, std::size_t particles, Stream& rng) {
  if (spec.d != 1) throw ConfigError("localization sweep is implemented for d = 1");
  if (nub2.size() < 4) throw ConfigError("localization ladder needs at least 4 rungs");
  for (std::size_t i = 1; i < nub2.size(); ++i)
    if (!(nub2[i] > nub2[i - 1])) throw ConfigError("localization ladder must be increasing");
  if (!(beta0 > 0)) throw ConfigError("beta0 must be positive");
  std::vector<LocalizationPoint> pts;
  for (std::size_t q = 0; q < nub2.size(); ++q) {
    double beta = nub2[q] == 0.0 ? 0.0 : beta0, nu = nub2[q] == 0.0 ? 1.0 : nub2[q] / (beta0 * beta0);
    Stream s = rng.child(q);
    auto p = localization_point(beta, nu, spec, t, n_env, particles, s);
    p.nub2 = nub2[q];
    pts.push_back(p);
  }
  return summarize_localization(std::move(pts));
}

// Exponent probe: Var(ln Z_t) and the Gibbs endpoint spread along a t ladder.
struct ExponentPoint {
  double t = 0;
  Estimate var_log_z;  // across environments, fourth-moment error
  Estimate spread;     // E P_t[|B_t|^2] / d
};

struct ExponentReport {
  std::vector<ExponentPoint> points;
  std::optional<stats::LinearFit> fit_par, fit_perp;
  double xi_par = NAN, xi_par_lo = NAN, xi_par_hi = NAN;
  double xi_perp = NAN, xi_perp_lo = NAN, xi_perp_hi = NAN;
  bool par_defined = false;
  bool par_ok = true, perp_ok = true;  // upper band edge respects 1/2 and 3/4
};

inline ExponentPoint exponent_point(double beta, double nu, const TubeSpec& spec, double t, std::size_t n_env,
                                    std::size_t particles, Stream& rng) {
  EnvConfig cfg{spec.d, nu, t, default_half_width(t, spec.r), 0};
  std::vector<double> lz(n_env), sp(n_env);
  for (std::size_t e = 0; e < n_env; ++e) {
    Stream es = rng.child(2 * e), ps = rng.child(2 * e + 1);
    Environment env = sample_environment(cfg, es);
    TubeIndex idx(env, spec, t);
    SmcResult r = smc_partition(idx, beta, SmcOptions{particles, 1}, ps);
    lz[e] = r.log_z;
    double s = 0;
    for (std::size_t i = 0; i < r.endpoint.size(); ++i) s += r.weight[i] * norm2(r.endpoint[i], spec.d);
    sp[e] = s / spec.d;
  }
  ExponentPoint p;
  p.t = t;
  double m = stats::mean(lz), v = stats::variance(lz), m4 = 0;
  for (double x : lz) m4 += std::pow(x - m, 4);
  m4 /= static_cast<double>(n_env);
  p.var_log_z.value = v;
  p.var_log_z.std_error = std::sqrt(std::max(0.0, m4 - v * v) / static_cast<double>(n_env));
  p.var_log_z.n = n_env;
  p.var_log_z.method = Method::smc;
  p.spread = stats::mean_estimate(sp, Method::smc);
  return p;
}

// Log-log fits with delta-method weights; bands are 95% t intervals of
// slope/2.
inline ExponentReport summarize_exponents(std::vector<ExponentPoint> pts) {
  ExponentReport r;
  r.points = std::move(pts);
  auto band = [](const std::vector<double>& x, const std::vector<double>& y, const std::vector<double>& sy,
                 double& c, double& lo, double& hi) {
    auto f = stats::linear_fit(x, y, sy);
    double q = stats::t_quantile(0.975, static_cast<double>(std::max<std::size_t>(1, x.size() - 2)));
    c = 0.5 * f.slope;
    lo = 0.5 * (f.slope - q * f.slope_se);
    hi = 0.5 * (f.slope + q * f.slope_se);
    return f;
  };
  std::vector<double> x, y, sy, x2, y2, sy2;
  for (const auto& p : r.points) {
    if (p.var_log_z.value > 0) {
      x.push_back(std::log(p.t));
      y.push_back(std::log(p.var_log_z.value));
      sy.push_back(std::max(p.var_log_z.std_error / p.var_log_z.value, 1e-12));
    }
    if (p.spread.value > 0) {
      x2.push_back(std::log(p.t));
      y2.push_back(std::log(p.spread.value));
      sy2.push_back(std::max(p.spread.std_error / p.spread.value, 1e-12));
    }
  }
  if (x.size() >= 3) {
    r.fit_par = band(x, y, sy, r.xi_par, r.xi_par_lo, r.xi_par_hi);
    r.par_defined = true;
    r.par_ok = r.xi_par_lo <= 0.5;
  }
  if (x2.size() >= 3) {
    r.fit_perp = band(x2, y2, sy2, r.xi_perp, r.xi_perp_lo, r.xi_perp_hi);
    r.perp_ok = r.xi_perp_lo <= 0.75;
  }
  return r;
}

inline ExponentReport exponent_probe(double beta, double nu, const TubeSpec& spec, const std::vector<double>& ts,
                                     std::size_t n_env, std::size_t particles, Stream& rng) {
  if (spec.d != 1) throw ConfigError("exponent probe is implemented for d = 1");
  if (ts.size() < 4) throw ConfigError("exponent probe needs at least 4 rungs");
  std::vector<ExponentPoint> pts;
  for (std::size_t q = 0; q < ts.size(); ++q) {
    Stream s = rng.child(q);
    pts.push_back(exponent_point(beta, nu, spec, ts[q], n_env, particles, s));
  }
  return summarize_exponents(std::move(pts));
}

// ---------------------------------------------------------------- presets

struct RunOptions {
  std::string out;  // empty: config `out`, else polylab-out
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
};

struct RunResult {
  int exit_code = 0;
  std::vector<std::string> files;
  std::vector<Check> checks;
  std::filesystem::path dir;
};

inline std::uint64_t resolve_seed(const ExperimentConfig& c, const RunOptions& o) {
  if (o.seed) return *o.seed;
  if (c.has("seed")) {
    std::string s = c.str("seed", "");
    try {
      std::size_t pos = 0;
      auto v = std::stoull(s, &pos);
      if (pos == s.size()) return v;
    } catch (const std::exception&) {
    }
    c.fail(c.line_of("seed"), "seed must be an unsigned 64-bit integer");
  }
  if (const char* env = std::getenv("POLYLAB_SEED")) {
    try {
      std::size_t pos = 0;
      std::string s = env;
      auto v = std::stoull(s, &pos);
      if (pos == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError("POLYLAB_SEED must be an unsigned 64-bit integer");
  }
  return kDefaultSeed;
}

struct Plan {
  std::vector<Cell> cells;
  // called after all cells, with their outputs in order; returns extra files
  std::function<void(const std::vector<CellOutput>&, std::map<std::string, std::string>&, nlohmann::json&)> finish;
};

namespace detail {

inline void positive(const ExperimentConfig& c, const std::string& k, double v) {
  if (!(v > 0)) c.fail(c.line_of(k), k + " must be positive");
}
inline void at_least(const ExperimentConfig& c, const std::string& k, double v, double lo) {
  if (v < lo) c.fail(c.line_of(k), k + " must be at least " + fmt(lo));
}
inline void dim_ok(const ExperimentConfig& c, int d) {
  if (d < 1 || d > 3) c.fail(c.line_of("d"), "d must be 1, 2 or 3");
}

inline std::string rows_csv(const std::vector<Row>& rows) {
  std::string s = kEstimateHeader;
  for (const auto& r : rows) s += csv_row(r);
  return s;
}

// ---- verify

inline Plan plan_verify(const ExperimentConfig& c, std::uint64_t base) {
  const std::size_t inst = c.count("instances", 200), envs = c.count("envs", 2000), paths = c.count("paths", 200),
                    reps = c.count("replicas", 2000);
  const double t = c.num("t", 2.0), beta = c.num("beta", 0.5), nu = c.num("nu", 1.0), r = c.num("r", 1.0);
  positive(c, "t", t);
  positive(c, "nu", nu);
  positive(c, "r", r);
  at_least(c, "instances", inst, 1);
  at_least(c, "envs", envs, 100);
  at_least(c, "paths", paths, 10);
  at_least(c, "replicas", reps, 100);
  Plan p;
  auto add = [&](std::string id, std::function<CellOutput(Stream&)> f) {
    std::uint64_t s = cell_seed(base, id);
    p.cells.push_back({id, s, std::move(f)});
  };
  const double tol = 1e-10;
  auto exact_cell = [&](std::string id, std::function<double(Stream&, std::size_t)> residual) {
    add(id, [=](Stream& rng) {
      double worst = 0;
      for (std::size_t i = 0; i < inst; ++i) {
        Stream s = rng.child(i);
        worst = std::max(worst, residual(s, i));
      }
      CellOutput o;
      o.rows.push_back({id + "_max_residual", beta, nu, r, 1, t, exact(worst, inst), 0});
      o.checks.push_back({id, worst, tol, true, worst < tol});
      return o;
    });
  };
  // random small instances in d = 1
  auto instance = [=](Stream& s, double& b, Environment& env) {
    b = -1.0 + 2.0 * s.uniform();
    EnvConfig cfg{1, nu, t, default_half_width(t, r), 0};
    Stream es = s.child(0);
    env = sample_environment(cfg, es);
  };
  exact_cell("telescoping", [=](Stream& s, std::size_t) {
    double b;
    Environment env;
    instance(s, b, env);
    Stream ps = s.child(1);
    GibbsEnsemble g = sample_ensemble(env, TubeSpec(1, r), b, t, 50, ps);
    double direct = std::log(partition(env, b, g.bundle, g.spec).value);
    double tele = telescoped_log_partition(g);
    return std::abs(std::expm1(tele - direct));
  });
  exact_cell("chaos_identity", [=](Stream& s, std::size_t) {
    double b;
    Environment env;
    instance(s, b, env);
    Stream ps = s.child(1);
    PathBundle pb = sample_free(make_time_grid(env, t), 1, 1, ps);
    return chaos_identity_check(env, pb, 0, b, TubeSpec(1, r), t);
  });
  exact_cell("shear_coupling", [=](Stream& s, std::size_t) {
    double b;
    Environment env;
    instance(s, b, env);
    Point xi{s.normal() / std::sqrt(t), 0, 0};
    Stream ps = s.child(1);
    return p2p_shear_coupled(env, b, TubeSpec(1, r), t, xi, 20, ps).residual;
  });
  exact_cell("cameron_martin", [=](Stream& s, std::size_t) {
    double b;
    Environment env;
    EnvConfig cfg{1, nu, t, default_half_width(t, r, 2.0 * std::sqrt(t)), 0};
    b = -1.0 + 2.0 * s.uniform();
    Stream es = s.child(0);
    env = sample_environment(cfg, es);
    Point a{s.uniform() * 2.0 - 1.0, 0, 0};
    Stream ps = s.child(1);
    GibbsEnsemble g = sample_ensemble(env, TubeSpec(1, r), b, t, 50, ps);
    TiltedMgf m = tilted_mgf(g, a, TiltMode::drifted);
    return std::abs(m.lhs.value - m.rhs.value) / std::abs(m.rhs.value);
  });
  // statistical checks; Bonferroni over these
  const std::size_t m = 3;
  const double zc = bonferroni_z(m);
  add("annealed_mean", [=](Stream& rng) {
    EnvConfig cfg{1, nu, t, default_half_width(t, r), 0};
    TubeSpec spec(1, r);
    std::vector<double> w(envs);
    for (std::size_t e = 0; e < envs; ++e) {
      Stream es = rng.child(2 * e), ps = rng.child(2 * e + 1);
      Environment env = sample_environment(cfg, es);
      TubeIndex idx(env, spec, t);
      SparseSample sm = sparse_paths(idx, paths, ps);
      w[e] = partition_from_hits(sm.hits, beta).value * std::exp(-annealed_rate(beta, nu, spec) * t);
    }
    CellOutput o;
    Estimate est = stats::mean_estimate(w);
    o.rows.push_back({"W_mean", beta, nu, r, 1, t, est, 0});
    double z = z_score(est, 1.0);
    o.checks.push_back({"annealed_mean_z", z, zc, false, std::abs(z) < zc});
    return o;
  });
  add("mecke", [=](Stream& rng) {
    EnvConfig cfg{1, nu, t, 2.0, 0};
    // h(s, x; omega) = cos(x) exp(-0.1 omega([0, s] x box)), which sees the added point
    MeckeIntegrand h = [](double s, const Point& x, const Environment& env) {
      return std::cos(x[0]) * std::exp(-0.1 * static_cast<double>(env.count_until(s)));
    };
    MeckeResult res = mecke_check(cfg, h, reps, rng, 16);
    CellOutput o;
    o.rows.push_back({"mecke_lhs", beta, nu, r, 1, t, res.lhs, 0});
    o.rows.push_back({"mecke_rhs", beta, nu, r, 1, t, res.rhs, 0});
    o.checks.push_back({"mecke_z", res.z, zc, false, std::abs(res.z) < zc});
    return o;
  });
  add("poisson_counts", [=](Stream& rng) {
    EnvConfig cfg{1, nu, t, 2.0, 0};
    std::vector<std::uint64_t> counts(reps);
    for (std::size_t i = 0; i < reps; ++i) {
      Stream es = rng.child(i);
      counts[i] = sample_environment(cfg, es).size();
    }
    auto chi = stats::chi_square_poisson(counts, cfg.mean_count());
    CellOutput o;
    Estimate e;
    e.value = chi.statistic;
    e.n = reps;
    o.rows.push_back({"count_chi_square", beta, nu, r, 1, t, e, 0});
    double level = 0.01 / static_cast<double>(m);
    o.checks.push_back({"poisson_count_pvalue", chi.pvalue, level, false, chi.pvalue >= level});
    return o;
  });
  p.finish = [](const std::vector<CellOutput>&, std::map<std::string, std::string>&, nlohmann::json&) {};
  return p;
}

// ---- scan

inline Plan plan_scan(const ExperimentConfig& c, std::uint64_t base) {
  const auto betas = c.list("betas", {0.0, 0.25, 0.5, 0.75, 1.0});
  const auto nus = c.list("nus", {0.25, 0.5, 1.0, 2.0, 4.0});
  const double r = c.num("r", 1.0), t = c.num("t", 4.0), a = c.num("a", 1.0), alpha = c.num("alpha", 2.0);
  const int d = static_cast<int>(c.num("d", 1));
  const std::size_t envs = c.count("envs", 40), paths = c.count("paths", 400), oenvs = c.count("overlap_envs", 8);
  dim_ok(c, d);
  positive(c, "r", r);
  positive(c, "t", t);
  positive(c, "a", a);
  positive(c, "alpha", alpha);
  at_least(c, "envs", envs, 30);
  at_least(c, "paths", paths, 20);
  at_least(c, "overlap_envs", oenvs, 1);
  for (double v : nus)
    if (!(v > 0)) c.fail(c.line_of("nus"), "nus must be positive");
  Plan p;
  for (std::size_t j = 0; j < nus.size(); ++j)
    for (std::size_t i = 0; i < betas.size(); ++i) {
      double b = betas[i], nu = nus[j];
      std::string id = "cell_b" + fmt(b) + "_nu" + fmt(nu);
      std::uint64_t seed = cell_seed(base, id);
      p.cells.push_back({id, seed, [=](Stream& rng) {
                           TubeSpec spec(d, r);
                           Stream fs = rng.child(0), os = rng.child(1);
                           FreeEnergy f = free_energy(b, nu, spec, t, envs, paths, fs);
                           std::vector<double> J(oenvs);
                           EnvConfig cfg{d, nu, t, default_half_width(t, r), 0};
                           for (std::size_t e = 0; e < oenvs; ++e) {
                             Stream es = os.child(2 * e), ps = os.child(2 * e + 1);
                             Environment env = sample_environment(cfg, es);
                             if (d == 1) {
                               GibbsEnsemble g = sample_ensemble(env, spec, b, t, 200, ps);
                               J[e] = overlaps(g).J;
                             } else {
                               TubeIndex idx(env, spec, t);
                               GibbsEnsemble g = smc_path_ensemble(idx, env, b, SmcOptions{100, 1}, ps);
                               J[e] = overlaps(g).J_plugin;
                             }
                           }
                           CellOutput o;
                           o.rows.push_back({"p_t", b, nu, r, d, t, f.p, seed});
                           o.rows.push_back({"psi_t", b, nu, r, d, t, f.psi, seed});
                           o.rows.push_back({"J_t", b, nu, r, d, t, stats::mean_estimate(J), seed});
                           o.rows.push_back({"annealed_rate", b, nu, r, d, t, exact(f.annealed), seed});
                           return o;
                         }});
    }
  p.finish = [=](const std::vector<CellOutput>& outs, std::map<std::string, std::string>& files, nlohmann::json& man) {
    std::vector<std::vector<double>> psi(nus.size(), std::vector<double>(betas.size()));
    std::vector<std::vector<Estimate>> pe(nus.size(), std::vector<Estimate>(betas.size()));
    for (std::size_t j = 0; j < nus.size(); ++j)
      for (std::size_t i = 0; i < betas.size(); ++i) {
        pe[j][i] = outs[j * betas.size() + i].rows[1].est;
        psi[j][i] = pe[j][i].value;
      }
    Series curve{"nu = " + fmt(a) + " |lambda|^-" + fmt(alpha), {}, {}, {}};
    double b0 = betas.front(), b1 = betas.back();
    for (int k = 0; k <= 200; ++k) {
      double b = b0 + (b1 - b0) * k / 200.0;
      if (lambda(b) == 0.0) continue;
      curve.x.push_back(b);
      curve.y.push_back(curve_nu(a, alpha, b));
    }
    files["plots/psi_heatmap.svg"] = svg::heatmap(betas, nus, psi, "excess free energy psi_t", "beta", "nu", &curve);
    // critical proxies: per nu, smallest beta > 0 (largest beta < 0) with psi
    // above 3 standard errors; nu_c proxy is the largest nu with psi at 0 on the whole range
    std::string s = "nu,beta_c_plus,beta_c_minus\n";
    double nu_c = NAN;
    for (std::size_t j = 0; j < nus.size(); ++j) {
      double bp = NAN, bm = NAN;
      bool all_zero = true;
      for (std::size_t i = 0; i < betas.size(); ++i) {
        bool pos = pe[j][i].value > 3.0 * pe[j][i].std_error;
        if (pos) all_zero = false;
        if (pos && betas[i] > 0 && (std::isnan(bp) || betas[i] < bp)) bp = betas[i];
        if (pos && betas[i] < 0 && (std::isnan(bm) || betas[i] > bm)) bm = betas[i];
      }
      if (all_zero) nu_c = std::isnan(nu_c) ? nus[j] : std::max(nu_c, nus[j]);
      s += fmt(nus[j]) + "," + fmt(bp) + "," + fmt(bm) + "\n";
    }
    files["critical.csv"] = s;
    man["nu_c_proxy"] = std::isnan(nu_c) ? nlohmann::json(nullptr) : nlohmann::json(nu_c);
    man["nu_c_proxy_note"] = "empirical proxy: largest nu whose psi_t stays within 3 standard errors of 0 over the beta grid";
  };
  return p;
}

// ---- crossover

inline Plan plan_crossover(const ExperimentConfig& c, std::uint64_t base) {
  const double bs = c.num("beta_star", 0.5);
  const auto ts = c.list("ts", {64, 256, 1024});
  const std::size_t reps = c.count("replicas", 2000), particles = c.count("particles", 128);
  const int K = static_cast<int>(c.count("K", 8));
  at_least(c, "replicas", reps, 2);
  at_least(c, "particles", particles, 1);
  if (K > 8) c.fail(c.line_of("K"), "K must be at most 8");
  for (std::size_t i = 1; i < ts.size(); ++i)
    if (!(ts[i] > ts[i - 1])) c.fail(c.line_of("ts"), "ts must be increasing");
  Plan p;
  std::string id = "crossover";
  std::uint64_t seed = cell_seed(base, id);
  p.cells.push_back({id, seed, [=](Stream& rng) {
                       CrossoverSchedule sch;
                       sch.beta_star = bs;
                       CrossoverOptions opt;
                       opt.smc.particles = particles;
                       opt.K = K;
                       auto rows = crossover_experiment(sch, ts, reps, rng, opt);
                       CellOutput o;
                       o.csv = "t,beta_t,nu_t,r_t,gamma_t,mean,var,var_target,ks_prev\n";
                       Series m{"mean", {}, {}, {}}, v{"var", {}, {}, {}}, tg{"var target", {}, {}, {}};
                       for (const auto& row : rows) {
                         const auto& R = row.rung;
                         o.csv += fmt(R.t) + "," + fmt(R.beta) + "," + fmt(R.nu) + "," + fmt(R.r) + "," +
                                  fmt(R.gamma) + "," + fmt(row.mean.value) + "," + fmt(row.var.value) + "," +
                                  fmt(row.var_target) + "," + fmt(row.ks_prev) + "\n";
                         m.x.push_back(std::log2(R.t));
                         m.y.push_back(row.mean.value);
                         m.err.push_back(row.mean.std_error);
                         v.x.push_back(std::log2(R.t));
                         v.y.push_back(row.var.value);
                         v.err.push_back(row.var.std_error);
                         tg.x.push_back(std::log2(R.t));
                         tg.y.push_back(row.var_target);
                       }
                       o.extra["plot"] = svg::line_plot({m, v, tg}, "crossover ladder", "log2 t", "value");
                       return o;
                     }});
  p.finish = [](const std::vector<CellOutput>& outs, std::map<std::string, std::string>& files, nlohmann::json&) {
    files["plots/crossover.svg"] = outs[0].extra["plot"].get<std::string>();
  };
  return p;
}

// ---- localization

inline Plan plan_localization(const ExperimentConfig& c, std::uint64_t base) {
  const double beta0 = c.num("beta0", 1.0), r = c.num("r", 1.0), t = c.num("t", 8.0), delta = c.num("delta", 0.25);
  const auto nub2 = c.list("nub2", {0, 1, 4, 16, 64});
  const std::size_t envs = c.count("envs", 20), particles = c.count("particles", 400);
  positive(c, "beta0", beta0);
  positive(c, "r", r);
  positive(c, "t", t);
  if (!(delta > 0 && delta < 0.5)) c.fail(c.line_of("delta"), "delta must lie in (0, 1/2)");
  if (nub2.size() < 4) c.fail(c.line_of("nub2"), "ladder needs at least 4 rungs");
  for (std::size_t i = 1; i < nub2.size(); ++i)
    if (!(nub2[i] > nub2[i - 1])) c.fail(c.line_of("nub2"), "ladder must be increasing");
  if (nub2[0] < 0) c.fail(c.line_of("nub2"), "ladder must be non-negative");
  at_least(c, "envs", envs, 2);
  at_least(c, "particles", particles, 2);
  Plan p;
  for (std::size_t q = 0; q < nub2.size(); ++q) {
    double beta = nub2[q] == 0.0 ? 0.0 : beta0, nu = nub2[q] == 0.0 ? 1.0 : nub2[q] / (beta0 * beta0);
    std::string id = "rung_" + fmt(nub2[q]);
    std::uint64_t seed = cell_seed(base, id);
    double key = nub2[q];
    p.cells.push_back({id, seed, [=](Stream& rng) {
                         auto pt = localization_point(beta, nu, TubeSpec(1, r), t, envs, particles, rng);
                         pt.nub2 = key;
                         CellOutput o;
                         o.rows.push_back({"R_star", beta, nu, r, 1, t, pt.R_star, seed});
                         o.rows.push_back({"one_minus_R", beta, nu, r, 1, t, pt.one_minus_R, seed});
                         o.extra = {{"nub2", key}};
                         return o;
                       }});
  }
  p.finish = [=](const std::vector<CellOutput>& outs, std::map<std::string, std::string>& files, nlohmann::json& man) {
    std::vector<LocalizationPoint> pts;
    for (const auto& o : outs) {
      LocalizationPoint lp;
      lp.nub2 = o.extra["nub2"].get<double>();
      lp.beta = o.rows[0].beta;
      lp.nu = o.rows[0].nu;
      lp.R_star = o.rows[0].est;
      lp.one_minus_R = o.rows[1].est;
      pts.push_back(lp);
    }
    auto rep = summarize_localization(pts);
    man["R_star_monotone"] = rep.monotone;
    if (rep.fit_ok) {
      man["one_minus_R_star_slope"] = rep.fit.slope;
      man["one_minus_R_star_slope_se"] = rep.fit.slope_se;
    }
    man["reference_slope"] = rep.reference_slope;
    Series a{"R*", {}, {}, {}}, b{"1 - R", {}, {}, {}};
    for (const auto& q : rep.points) {
      double x = std::log2(1.0 + q.nub2);
      a.x.push_back(x), a.y.push_back(q.R_star.value), a.err.push_back(q.R_star.std_error);
      b.x.push_back(x), b.y.push_back(q.one_minus_R.value), b.err.push_back(q.one_minus_R.std_error);
    }
    files["plots/localization.svg"] = svg::line_plot({a, b}, "localization ladder", "log2(1 + nu beta^2)", "index");
  };
  return p;
}

// ---- exponents

inline Plan plan_exponents(const ExperimentConfig& c, std::uint64_t base) {
  const double beta = c.num("beta", 0.8), nu = c.num("nu", 1.0), r = c.num("r", 1.0);
  const auto ts = c.list("ts", {2, 4, 8, 16, 32});
  const std::size_t envs = c.count("envs", 100), particles = c.count("particles", 200);
  positive(c, "nu", nu);
  positive(c, "r", r);
  if (ts.size() < 4) c.fail(c.line_of("ts"), "ladder needs at least 4 rungs");
  for (std::size_t i = 1; i < ts.size(); ++i)
    if (!(ts[i] > ts[i - 1])) c.fail(c.line_of("ts"), "ts must be increasing");
  if (!(ts[0] > 0)) c.fail(c.line_of("ts"), "ts must be positive");
  at_least(c, "envs", envs, 10);
  at_least(c, "particles", particles, 2);
  Plan p;
  for (double t : ts) {
    std::string id = "t_" + fmt(t);
    std::uint64_t seed = cell_seed(base, id);
    p.cells.push_back({id, seed, [=](Stream& rng) {
                         auto pt = exponent_point(beta, nu, TubeSpec(1, r), t, envs, particles, rng);
                         CellOutput o;
                         o.rows.push_back({"var_log_Z", beta, nu, r, 1, t, pt.var_log_z, seed});
                         o.rows.push_back({"endpoint_spread", beta, nu, r, 1, t, pt.spread, seed});
                         return o;
                       }});
  }
  p.finish = [=](const std::vector<CellOutput>& outs, std::map<std::string, std::string>& files, nlohmann::json& man) {
    std::vector<ExponentPoint> pts;
    for (std::size_t q = 0; q < outs.size(); ++q) pts.push_back({ts[q], outs[q].rows[0].est, outs[q].rows[1].est});
    auto rep = summarize_exponents(pts);
    if (rep.par_defined)
      man["xi_par"] = {{"estimate", rep.xi_par}, {"lo", rep.xi_par_lo}, {"hi", rep.xi_par_hi}, {"bound", 0.5},
                       {"consistent", rep.par_ok}};
    else
      man["xi_par"] = "undefined (Var ln Z_t = 0)";
    man["xi_perp"] = {{"estimate", rep.xi_perp}, {"lo", rep.xi_perp_lo}, {"hi", rep.xi_perp_hi}, {"bound", 0.75},
                      {"consistent", rep.perp_ok}};
    Series a{"log Var ln Z", {}, {}, {}}, b{"log spread", {}, {}, {}};
    for (const auto& q : rep.points) {
      a.x.push_back(std::log(q.t));
      a.y.push_back(q.var_log_z.value > 0 ? std::log(q.var_log_z.value) : NAN);
      b.x.push_back(std::log(q.t));
      b.y.push_back(q.spread.value > 0 ? std::log(q.spread.value) : NAN);
    }
    files["plots/exponents.svg"] = svg::line_plot({a, b}, "exponent probe", "log t", "log value");
  };
  return p;
}

// ---- doob

inline Plan plan_doob(const ExperimentConfig& c, std::uint64_t base) {
  const double beta = c.num("beta", 0.8), nu = c.num("nu", 1.0), r = c.num("r", 1.0), t = c.num("t", 4.0);
  const std::size_t envs = c.count("envs", 4), paths = c.count("paths", 400), steps = c.count("steps", 200);
  positive(c, "nu", nu);
  positive(c, "r", r);
  positive(c, "t", t);
  at_least(c, "envs", envs, 1);
  at_least(c, "paths", paths, 2);
  Plan p;
  for (std::size_t e = 0; e < envs; ++e) {
    std::string id = "env_" + std::to_string(e);
    std::uint64_t seed = cell_seed(base, id);
    p.cells.push_back({id, seed, [=](Stream& rng) {
                         TubeSpec spec(1, r);
                         EnvConfig cfg{1, nu, t, default_half_width(t, r), 0};
                         Stream es = rng.child(0), ps = rng.child(1);
                         Environment env = sample_environment(cfg, es);
                         GibbsEnsemble g = sample_ensemble(env, spec, beta, t, paths, ps, steps);
                         DoobDecomp D = doob_decomposition(g);
                         CellOutput o;
                         o.csv = "time,A,M,I_left\n";
                         const auto& tm = g.bundle.times();
                         for (std::size_t k = 0; k < tm.size(); ++k)
                           o.csv += fmt(tm[k]) + "," + fmt(D.A[k]) + "," + fmt(D.M[k]) + "," + fmt(D.I_left[k]) + "\n";
                         o.rows.push_back({"A_t", beta, nu, r, 1, t, exact(D.A_t), seed});
                         o.rows.push_back({"M_t", beta, nu, r, 1, t, exact(D.M_t), seed});
                         o.rows.push_back({"log_W_t", beta, nu, r, 1, t, exact(D.log_W), seed});
                         o.rows.push_back({"int_I", beta, nu, r, 1, t, exact(D.int_I), seed});
                         Series a{"A", {}, {}, {}}, m{"M", {}, {}, {}};
                         for (std::size_t k = 0; k < tm.size(); k += std::max<std::size_t>(1, tm.size() / 400)) {
                           a.x.push_back(tm[k]), a.y.push_back(D.A[k]);
                           m.x.push_back(tm[k]), m.y.push_back(D.M[k]);
                         }
                         o.extra["plot"] = svg::line_plot({a, m}, "Doob decomposition", "time", "value");
                         return o;
                       }});
  }
  p.finish = [=](const std::vector<CellOutput>& outs, std::map<std::string, std::string>& files, nlohmann::json&) {
    for (std::size_t e = 0; e < outs.size(); ++e)
      files["plots/doob_env_" + std::to_string(e) + ".svg"] = outs[e].extra["plot"].get<std::string>();
  };
  return p;
}

}  // namespace detail

inline Plan make_plan(const std::string& preset, const ExperimentConfig& c, std::uint64_t seed) {
  check_keys(c, preset);
  if (preset == "verify") return detail::plan_verify(c, seed);
  if (preset == "scan") return detail::plan_scan(c, seed);
  if (preset == "crossover") return detail::plan_crossover(c, seed);
  if (preset == "localization") return detail::plan_localization(c, seed);
  if (preset == "exponents") return detail::plan_exponents(c, seed);
  return detail::plan_doob(c, seed);
}

// Runs a preset and writes <out>/<preset>/<cell>.csv, manifest.json and
// plots/*.svg. Exit code 2 when a verify check fails.
inline RunResult run(const std::string& preset, const ExperimentConfig& config, const RunOptions& opt) {
  if (!known_presets().count(preset)) throw ConfigError("unknown preset '" + preset + "'");
  const auto start = std::chrono::steady_clock::now();
  const std::uint64_t seed = resolve_seed(config, opt);
  std::string out_dir = opt.out;
  if (config.has("out") && opt.out.empty()) out_dir = config.str("out", "");
  if (out_dir.empty()) out_dir = "polylab-out";
  Plan plan = make_plan(preset, config, seed);
  RunResult res;
  res.dir = std::filesystem::path(out_dir) / preset;
  nlohmann::json man;
  man["preset"] = preset;
  man["seed"] = seed;
  nlohmann::json cfg = nlohmann::json::object();
  for (const auto& [k, v] : config.entries()) cfg[k] = v.first;
  man["config"] = cfg;
  man["versions"] = {{"polylab", kVersion}, {"boost", BOOST_LIB_VERSION}, {"compiler", __VERSION__}};
  man["workers"] = opt.workers;
  std::vector<CellOutput> outs(plan.cells.size());
  nlohmann::json cells = nlohmann::json::array();
  run_cells(plan.cells, opt.workers, [&](std::size_t i, const CellOutput& o) {
    const Cell& cell = plan.cells[i];
    std::string csv = o.csv;
    if (csv.empty()) {
      std::vector<Row> rows = o.rows;
      for (auto& r : rows) r.seed = cell.seed;
      csv = detail::rows_csv(rows);
    }
    auto file = res.dir / (cell.id + ".csv");
    write_file(file, csv);
    if (!o.csv.empty() && !o.rows.empty()) {
      std::vector<Row> rows = o.rows;
      for (auto& r : rows) r.seed = cell.seed;
      write_file(res.dir / (cell.id + "_summary.csv"), detail::rows_csv(rows));
    }
    res.files.push_back(file.string());
    cells.push_back({{"id", cell.id}, {"seed", cell.seed}, {"file", cell.id + ".csv"}});
    for (const auto& ch : o.checks) res.checks.push_back(ch);
    outs[i] = o;
  });
  std::map<std::string, std::string> extra;
  plan.finish(outs, extra, man);
  for (const auto& [name, content] : extra) {
    write_file(res.dir / name, content);
    res.files.push_back((res.dir / name).string());
  }
  man["cells"] = cells;
  nlohmann::json checks = nlohmann::json::array();
  bool ok = true;
  for (const auto& ch : res.checks) {
    checks.push_back({{"name", ch.name}, {"statistic", ch.statistic}, {"threshold", ch.threshold}, {"exact", ch.exact},
                      {"pass", ch.pass}});
    ok = ok && ch.pass;
  }
  man["checks"] = checks;
  man["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_file(res.dir / "manifest.json", man.dump(2) + "\n");
  res.exit_code = ok ? 0 : 2;
  return res;
}

}  // namespace polylab::lab
