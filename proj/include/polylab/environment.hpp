#pragma once

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <functional>
#include <istream>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "polylab/core.hpp"
#include "polylab/stats.hpp"

namespace polylab {

struct EnvConfig {
  int d = 1;
  double nu = 1.0;       // intensity
  double t = 1.0;        // horizon
  double L = 1.0;        // box half-width
  std::uint64_t seed = 0;

  void validate() const {
    if (d < 1 || d > 3) throw ConfigError("dimension must be 1, 2 or 3");
    if (!(nu > 0) || !std::isfinite(nu)) throw ConfigError("intensity must be positive");
    if (!(t > 0) || !std::isfinite(t)) throw ConfigError("horizon must be positive");
    if (!(L > 0) || !std::isfinite(L)) throw ConfigError("box half-width must be positive");
    if (t >= kLatticeLimit / 4 || L >= kLatticeLimit / 4) throw ConfigError("box exceeds coordinate range");
  }
  double volume() const { return t * std::pow(2.0 * L, d); }
  double mean_count() const { return nu * volume(); }
};

struct Event {
  double time;
  Point pos;
};

inline bool event_less(const Event& a, const Event& b) {
  if (a.time != b.time) return a.time < b.time;
  return a.pos < b.pos;
}

inline bool operator==(const Event& a, const Event& b) { return a.time == b.time && a.pos == b.pos; }

class Environment {
 public:
  Environment() = default;
  Environment(EnvConfig cfg, std::vector<Event> events, std::vector<std::string> log = {})
      : cfg_(cfg), events_(std::move(events)), log_(std::move(log)) {
    std::sort(events_.begin(), events_.end(), event_less);
  }

  const EnvConfig& config() const { return cfg_; }
  int dim() const { return cfg_.d; }
  const std::vector<Event>& events() const { return events_; }
  std::size_t size() const { return events_.size(); }
  const std::vector<std::string>& transform_log() const { return log_; }

  // Number of events with time <= s.
  std::size_t count_until(double s) const {
    return static_cast<std::size_t>(
        std::upper_bound(events_.begin(), events_.end(), s, [](double v, const Event& e) { return v < e.time; }) -
        events_.begin());
  }

  Environment with_point(double s, const Point& x) const {
    std::vector<Event> ev;
    ev.reserve(events_.size() + 1);
    Event add{s, x};
    auto it = std::lower_bound(events_.begin(), events_.end(), add, event_less);
    ev.insert(ev.end(), events_.begin(), it);
    ev.push_back(add);
    ev.insert(ev.end(), it, events_.end());
    Environment out;
    out.cfg_ = cfg_;
    out.events_ = std::move(ev);
    return out;
  }

 private:
  EnvConfig cfg_;
  std::vector<Event> events_;
  std::vector<std::string> log_;
};

inline Environment sample_environment(const EnvConfig& cfg, Stream& rng) {
  cfg.validate();
  std::uint64_t n = rng.poisson(cfg.mean_count());
  std::vector<Event> ev(n);
  for (auto& e : ev) {
    e.time = lattice(cfg.t * (1.0 - rng.uniform()));
    if (e.time <= 0.0) e.time = std::ldexp(1.0, -kLatticeBits);
    e.pos = {0.0, 0.0, 0.0};
    for (int j = 0; j < cfg.d; ++j) e.pos[j] = lattice(cfg.L * (2.0 * rng.uniform() - 1.0));
  }
  return Environment(cfg, std::move(ev));
}

inline Environment sample_environment(const EnvConfig& cfg) {
  Stream rng(cfg.seed);
  return sample_environment(cfg, rng);
}

namespace detail {
inline std::vector<std::string> extend_log(const Environment& env, std::string entry) {
  auto log = env.transform_log();
  log.push_back(std::move(entry));
  return log;
}
inline std::string fmt_point(const Point& p, int d) {
  std::ostringstream os;
  os.precision(17);
  os << "(";
  for (int j = 0; j < d; ++j) os << (j ? "," : "") << p[j];
  os << ")";
  return os.str();
}
}  // namespace detail

// (s, x) -> (s - t0, x - x0); events landing at time <= 0 are dropped.
inline Environment shift(const Environment& env, double t0, const Point& x0) {
  const int d = env.dim();
  double t0q = lattice(t0);
  Point x0q = lattice(x0);
  std::vector<Event> ev;
  ev.reserve(env.size());
  for (const auto& e : env.events()) {
    double s = e.time - t0q;
    if (s <= 0.0) continue;
    Event n{s, e.pos};
    for (int j = 0; j < d; ++j) n.pos[j] = e.pos[j] - x0q[j];
    ev.push_back(n);
  }
  std::ostringstream os;
  os.precision(17);
  os << "shift(" << t0q << "," << detail::fmt_point(x0q, d) << ")";
  return Environment(env.config(), std::move(ev), detail::extend_log(env, os.str()));
}

using Drift = std::function<Point(double)>;

inline Drift linear_drift(const Point& xi) {
  return [xi](double s) { return Point{s * xi[0], s * xi[1], s * xi[2]}; };
}

// (s, x) -> (s, x + phi(s)); phi values are rounded to the coordinate lattice,
// so shearing by phi and then by -phi restores the input bit for bit.
inline Environment shear(const Environment& env, const Drift& phi, const std::string& label = "phi") {
  const int d = env.dim();
  std::vector<Event> ev = env.events();
  for (auto& e : ev) {
    Point p = lattice(phi(e.time));
    for (int j = 0; j < d; ++j) e.pos[j] += p[j];
  }
  return Environment(env.config(), std::move(ev), detail::extend_log(env, "shear(" + label + ")"));
}

// (t_i, x_i) -> (t - t_i, x_i - x), keeping the events that land in (0, t].
inline Environment reverse(const Environment& env, double t, const Point& x) {
  const int d = env.dim();
  double tq = lattice(t);
  Point xq = lattice(x);
  std::vector<Event> ev;
  for (const auto& e : env.events()) {
    double s = tq - e.time;
    if (s <= 0.0 || s > tq) continue;
    Event n{s, e.pos};
    for (int j = 0; j < d; ++j) n.pos[j] = e.pos[j] - xq[j];
    ev.push_back(n);
  }
  std::ostringstream os;
  os.precision(17);
  os << "reverse(" << tq << "," << detail::fmt_point(xq, d) << ")";
  return Environment(env.config(), std::move(ev), detail::extend_log(env, os.str()));
}

inline Environment superpose(const Environment& a, const Environment& b) {
  const auto &ca = a.config(), &cb = b.config();
  if (ca.d != cb.d || ca.t != cb.t || ca.L != cb.L) throw ConfigError("superpose: mismatched geometry");
  std::vector<Event> ev = a.events();
  ev.insert(ev.end(), b.events().begin(), b.events().end());
  EnvConfig c = ca;
  c.nu = ca.nu + cb.nu;
  return Environment(c, std::move(ev), detail::extend_log(a, "superpose"));
}

using EventFunction = std::function<double(double, const Point&)>;

struct TiltedSample {
  Environment env;
  double acceptance = 1.0;  // fraction of dominating points kept
};

// PPP with intensity e^{f} nu by thinning a dominating process of intensity
// e^{f_sup} nu. f_sup must bound f on the box.
inline TiltedSample tilted_sample(const EnvConfig& cfg, const EventFunction& f, double f_sup, Stream& rng) {
  cfg.validate();
  if (!std::isfinite(f_sup)) throw ConfigError("tilt bound must be finite");
  EnvConfig dom = cfg;
  dom.nu = cfg.nu * std::exp(f_sup);
  Environment big = sample_environment(dom, rng);
  std::vector<Event> kept;
  for (const auto& e : big.events()) {
    double v = f(e.time, e.pos);
    if (!std::isfinite(v) || v > f_sup + 1e-12) throw ConfigError("tilt exceeds its declared bound");
    if (rng.uniform() < std::exp(v - f_sup)) kept.push_back(e);
  }
  TiltedSample out;
  out.acceptance = big.size() ? static_cast<double>(kept.size()) / big.size() : 1.0;
  std::ostringstream os;
  os << "tilt(sup=" << f_sup << ",kept=" << kept.size() << "/" << big.size() << ")";
  out.env = Environment(cfg, std::move(kept), {os.str()});
  return out;
}

struct MeckeResult {
  Estimate lhs, rhs;
  double z = 0.0;
};

using MeckeIntegrand = std::function<double(double, const Point&, const Environment&)>;

// Compares E[sum over points of h(s,x;omega)] with nu * int E[h(s,x;omega+delta)].
// The right side uses a midpoint grid with `cells` nodes per axis and an
// independent environment per replica.
inline MeckeResult mecke_check(const EnvConfig& cfg, const MeckeIntegrand& h, std::size_t n, Stream& rng,
                               int cells = 8) {
  cfg.validate();
  if (n < 100) throw ConfigError("mecke_check needs at least 100 replicas");
  const int d = cfg.d;
  std::size_t nodes_space = 1;
  for (int j = 0; j < d; ++j) nodes_space *= cells;
  const double cell_vol = cfg.volume() / (static_cast<double>(nodes_space) * cells);
  std::vector<double> lhs(n), rhs(n);
  for (std::size_t i = 0; i < n; ++i) {
    Stream a = rng.child(2 * i), b = rng.child(2 * i + 1);
    Environment env = sample_environment(cfg, a);
    double s = 0.0;
    for (const auto& e : env.events()) s += h(e.time, e.pos, env);
    lhs[i] = s;

    Environment env2 = sample_environment(cfg, b);
    double q = 0.0;
    for (int it = 0; it < cells; ++it) {
      double time = (it + 0.5) * cfg.t / cells;
      for (std::size_t k = 0; k < nodes_space; ++k) {
        Point x{0, 0, 0};
        std::size_t rem = k;
        for (int j = 0; j < d; ++j) {
          x[j] = -cfg.L + (static_cast<double>(rem % cells) + 0.5) * 2.0 * cfg.L / cells;
          rem /= cells;
        }
        q += h(time, x, env2.with_point(time, x));
      }
    }
    rhs[i] = cfg.nu * cell_vol * q;
    if (!std::isfinite(lhs[i]) || !std::isfinite(rhs[i])) throw NumericError("mecke integrand is not finite");
  }
  MeckeResult r;
  r.lhs = stats::mean_estimate(lhs);
  r.rhs = stats::mean_estimate(rhs, Method::quadrature);
  r.z = z_score(r.lhs, r.rhs);
  return r;
}

// Text serialization; 17 significant digits make the round trip exact.
inline void write_environment(std::ostream& os, const Environment& env) {
  const auto& c = env.config();
  char buf[128];
  std::snprintf(buf, sizeof buf, "# d=%d nu=%.17g t=%.17g L=%.17g seed=%" PRIu64 "\n", c.d, c.nu, c.t, c.L, c.seed);
  os << buf;
  for (const auto& e : env.events()) {
    std::snprintf(buf, sizeof buf, "%.17g", e.time);
    os << buf;
    for (int j = 0; j < c.d; ++j) {
      std::snprintf(buf, sizeof buf, " %.17g", e.pos[j]);
      os << buf;
    }
    os << "\n";
  }
}

inline Environment read_environment(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ConfigError("environment: missing header");
  EnvConfig c;
  unsigned long long seed = 0;
  if (std::sscanf(line.c_str(), "# d=%d nu=%lf t=%lf L=%lf seed=%llu", &c.d, &c.nu, &c.t, &c.L, &seed) != 5)
    throw ConfigError("environment: malformed header");
  c.seed = seed;
  c.validate();
  std::vector<Event> ev;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    Event e{0, {0, 0, 0}};
    std::string tok;
    auto next = [&]() {
      if (!(ls >> tok)) throw ConfigError("environment: short row at line " + std::to_string(lineno));
      return std::strtod(tok.c_str(), nullptr);
    };
    e.time = next();
    for (int j = 0; j < c.d; ++j) e.pos[j] = next();
    ev.push_back(e);
  }
  return Environment(c, std::move(ev));
}

}  // namespace polylab
