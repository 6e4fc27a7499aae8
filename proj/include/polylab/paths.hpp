#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "polylab/core.hpp"
#include "polylab/environment.hpp"
#include "polylab/geometry.hpp"

namespace polylab {

enum class PathKind { free, bridge, sheared };

// n paths observed at a common increasing time set. A per-time offset holds
// any deterministic shear applied afterwards; offsets are lattice rounded so
// opposite shears cancel exactly.
class PathBundle {
 public:
  PathBundle() = default;
  PathBundle(std::vector<double> times, std::size_t n, int d)
      : times_(std::move(times)), n_(n), d_(d), pos_(n * times_.size(), Point{0, 0, 0}),
        offset_(times_.size(), Point{0, 0, 0}) {}

  const std::vector<double>& times() const { return times_; }
  std::size_t n_paths() const { return n_; }
  std::size_t n_times() const { return times_.size(); }
  int dim() const { return d_; }
  double horizon() const { return times_.empty() ? 0.0 : times_.back(); }

  Point at(std::size_t i, std::size_t k) const {
    Point p = pos_[i * times_.size() + k];
    const Point& o = offset_[k];
    for (int j = 0; j < d_; ++j) p[j] += o[j];
    return p;
  }
  Point& raw(std::size_t i, std::size_t k) { return pos_[i * times_.size() + k]; }
  const std::vector<Point>& offsets() const { return offset_; }
  std::vector<Point>& offsets() { return offset_; }

  PathKind kind = PathKind::free;
  PathKind base_kind = PathKind::free;
  Point target{0, 0, 0};  // bridge endpoint
  std::uint64_t seed = 0;

 private:
  std::vector<double> times_;
  std::size_t n_ = 0;
  int d_ = 1;
  std::vector<Point> pos_;
  std::vector<Point> offset_;
};

inline void check_times(const std::vector<double>& times) {
  if (times.empty()) throw ConfigError("empty time set");
  if (!(times[0] >= 0.0)) throw ConfigError("times must start at or after 0");
  for (std::size_t k = 1; k < times.size(); ++k)
    if (!(times[k] > times[k - 1])) throw ConfigError("times must be strictly increasing");
}

// Union of 0, the event times up to t, a uniform grid of m steps, and t.
inline std::vector<double> make_time_grid(const Environment& env, double t, std::size_t m = 0) {
  std::vector<double> g{0.0, t};
  for (const auto& e : env.events())
    if (e.time <= t) g.push_back(e.time);
  for (std::size_t k = 1; k < m; ++k) g.push_back(t * static_cast<double>(k) / static_cast<double>(m));
  std::sort(g.begin(), g.end());
  g.erase(std::unique(g.begin(), g.end()), g.end());
  return g;
}

inline PathBundle sample_free(const std::vector<double>& times, std::size_t n, int d, Stream& rng,
                              const Point& start = {0, 0, 0}) {
  check_times(times);
  if (d < 1 || d > 3) throw ConfigError("unsupported dimension");
  PathBundle b(times, n, d);
  b.seed = rng.seed();
  for (std::size_t i = 0; i < n; ++i) {
    Point x = start;
    double prev = 0.0;
    for (std::size_t k = 0; k < times.size(); ++k) {
      double sd = std::sqrt(times[k] - prev);
      for (int j = 0; j < d; ++j) x[j] += sd * rng.normal();
      b.raw(i, k) = x;
      prev = times[k];
    }
  }
  return b;
}

// Bridge from (0, 0) to (t, x); t must be the last time.
inline PathBundle sample_bridge(const std::vector<double>& times, double t, const Point& x, std::size_t n, int d,
                                Stream& rng) {
  check_times(times);
  if (times.back() != t) throw ConfigError("bridge end time must be the last sampled time");
  PathBundle b(times, n, d);
  b.kind = b.base_kind = PathKind::bridge;
  b.target = x;
  b.seed = rng.seed();
  for (std::size_t i = 0; i < n; ++i) {
    Point y{0, 0, 0};
    double prev = 0.0;
    for (std::size_t k = 0; k < times.size(); ++k) {
      double s = times[k];
      if (k + 1 == times.size()) {
        for (int j = 0; j < d; ++j) y[j] = x[j];
      } else if (s > prev) {
        double frac = (s - prev) / (t - prev);
        double sd = std::sqrt((s - prev) * (t - s) / (t - prev));
        for (int j = 0; j < d; ++j) y[j] += (x[j] - y[j]) * frac + sd * rng.normal();
      }
      b.raw(i, k) = y;
      prev = s;
    }
  }
  return b;
}

// Adds phi(s) to every position at time s.
inline PathBundle shear_paths(const PathBundle& b, const Drift& phi) {
  PathBundle out = b;
  out.kind = PathKind::sheared;
  const auto& times = b.times();
  for (std::size_t k = 0; k < times.size(); ++k) {
    Point p = lattice(phi(times[k]));
    for (int j = 0; j < b.dim(); ++j) out.offsets()[k][j] += p[j];
  }
  return out;
}

struct MirrorCoupling {
  PathBundle base;
  PathBundle reflected;
  std::vector<bool> met;
  std::vector<double> meeting_time;  // +inf when not met within the grid
};

namespace detail {
// Reflection across the hyperplane bisecting [0, x].
inline Point reflect(const Point& y, const Point& x, int d) {
  double nx = std::sqrt(norm2(x, d));
  Point u{0, 0, 0};
  for (int j = 0; j < d; ++j) u[j] = x[j] / nx;
  double c = 0.0;
  for (int j = 0; j < d; ++j) c += (y[j] - 0.5 * x[j]) * u[j];
  Point r = y;
  for (int j = 0; j < d; ++j) r[j] -= 2.0 * c * u[j];
  return r;
}
inline bool crossed(const Point& y, const Point& x, int d) {
  double c = 0.0;
  for (int j = 0; j < d; ++j) c += (y[j] - 0.5 * x[j]) * x[j];
  return c >= 0.0;
}
}  // namespace detail

// With `bridge_crossing` a crossing between two sampled times is drawn from
// the Brownian bridge law, P = exp(-2 a b / dt) for signed distances a, b to
// the hyperplane; the reflected bundle is then exactly Brownian from x at the
// sampled times. Otherwise meeting is detected at sampled times only.
inline MirrorCoupling mirror_couple(const std::vector<double>& times, const Point& x, std::size_t n, int d,
                                   Stream& rng, bool bridge_crossing = false) {
  if (norm2(x, d) == 0.0) throw ConfigError("mirror coupling needs x != 0");
  MirrorCoupling m;
  m.base = sample_free(times, n, d, rng);
  m.reflected = PathBundle(times, n, d);
  m.met.assign(n, false);
  m.meeting_time.assign(n, std::numeric_limits<double>::infinity());
  const double nx = std::sqrt(norm2(x, d));
  auto dist = [&](const Point& y) {
    double c = 0.0;
    for (int j = 0; j < d; ++j) c += (y[j] - 0.5 * x[j]) * x[j];
    return c / nx;
  };
  for (std::size_t i = 0; i < n; ++i) {
    double prev_t = 0.0, prev_a = -0.5 * nx;
    for (std::size_t k = 0; k < times.size(); ++k) {
      Point y = m.base.raw(i, k);
      if (!m.met[i]) {
        double a = dist(y);
        bool hit = a >= 0.0;
        if (!hit && bridge_crossing && times[k] > prev_t)
          hit = rng.uniform() < std::exp(-2.0 * prev_a * a / (times[k] - prev_t));
        if (hit) {
          m.met[i] = true;
          m.meeting_time[i] = times[k];
        }
        prev_t = times[k];
        prev_a = a;
      }
      m.reflected.raw(i, k) = m.met[i] ? y : detail::reflect(y, x, d);
    }
  }
  return m;
}

// Detected meeting times of mirror-coupled paths on nested grids: the path is
// sampled on `times` and inspected only every `stride` points. Nothing is
// stored, so very fine grids are affordable.
inline std::vector<std::vector<double>> mirror_meeting_times(const std::vector<double>& times, const Point& x,
                                                             std::size_t n, int d, Stream& rng,
                                                             const std::vector<std::size_t>& strides) {
  check_times(times);
  if (norm2(x, d) == 0.0) throw ConfigError("mirror coupling needs x != 0");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> out(strides.size(), std::vector<double>(n, inf));
  for (std::size_t i = 0; i < n; ++i) {
    Point y{0, 0, 0};
    double prev = 0.0;
    std::size_t pending = strides.size();
    for (std::size_t k = 0; k < times.size() && pending > 0; ++k) {
      double sd = std::sqrt(times[k] - prev);
      for (int j = 0; j < d; ++j) y[j] += sd * rng.normal();
      prev = times[k];
      if (!detail::crossed(y, x, d)) continue;
      for (std::size_t g = 0; g < strides.size(); ++g)
        if (out[g][i] == inf && (k + 1) % strides[g] == 0) {
          out[g][i] = times[k];
          --pending;
        }
    }
  }
  return out;
}

// Running hit process: which events each path sees, as event-time indices.
struct HitProcess {
  std::size_t n_paths = 0, n_times = 0;
  std::vector<std::uint32_t> cum;                       // cum[i * n_times + k]: hits up to time index k
  std::vector<std::vector<std::size_t>> seen;           // per path, indices into env events
  std::vector<std::size_t> event_time_index;            // per env event (up to horizon), time index

  std::uint32_t hits(std::size_t i, std::size_t k) const { return cum[i * n_times + k]; }
  std::uint32_t total(std::size_t i) const { return cum[i * n_times + n_times - 1]; }
};

inline HitProcess count_hits(const PathBundle& b, const Environment& env, const TubeSpec& spec) {
  if (b.dim() != spec.d || env.dim() != spec.d) throw ConfigError("dimension mismatch");
  const auto& times = b.times();
  HitProcess h;
  h.n_paths = b.n_paths();
  h.n_times = times.size();
  h.cum.assign(h.n_paths * h.n_times, 0);
  h.seen.assign(h.n_paths, {});
  std::size_t m = env.count_until(b.horizon());
  h.event_time_index.resize(m);
  std::vector<std::uint32_t> inc(h.n_times);
  for (std::size_t e = 0; e < m; ++e) {
    double s = env.events()[e].time;
    auto it = std::lower_bound(times.begin(), times.end(), s);
    if (it == times.end() || *it != s) throw ConfigError("bundle grid misses an event time");
    h.event_time_index[e] = static_cast<std::size_t>(it - times.begin());
  }
  const double rho2 = spec.rho * spec.rho;
  for (std::size_t i = 0; i < h.n_paths; ++i) {
    std::fill(inc.begin(), inc.end(), 0);
    for (std::size_t e = 0; e < m; ++e) {
      std::size_t k = h.event_time_index[e];
      if (dist2(b.at(i, k), env.events()[e].pos, spec.d) <= rho2) {
        h.seen[i].push_back(e);
        ++inc[k];
      }
    }
    std::uint32_t c = 0;
    for (std::size_t k = 0; k < h.n_times; ++k) {
      c += inc[k];
      h.cum[i * h.n_times + k] = c;
    }
  }
  return h;
}

}  // namespace polylab
