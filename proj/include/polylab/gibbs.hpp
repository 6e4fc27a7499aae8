#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <optional>
#include <vector>

#include "polylab/core.hpp"
#include "polylab/environment.hpp"
#include "polylab/geometry.hpp"
#include "polylab/paths.hpp"
#include "polylab/stats.hpp"
#include "polylab/tube.hpp"

namespace polylab {

// Box half-width that keeps the path inside with overwhelming probability.
inline double default_half_width(double t, double r, double margin = 0.0) { return 6.0 * std::sqrt(t) + r + margin; }

inline double heat_kernel(double t, const Point& x, int d) {
  return std::pow(2.0 * std::numbers::pi * t, -0.5 * d) * std::exp(-norm2(x, d) / (2.0 * t));
}

// g(u) = u - log(1 + u), with a series near 0.
inline double doob_g(double u) {
  if (std::abs(u) < 1e-3) return u * u * (0.5 - u * (1.0 / 3.0 - u * (0.25 - u / 5.0)));
  return u - std::log1p(u);
}

// Bounds of g(u)/u^2 for u between 0 and lambda.
inline std::pair<double, double> doob_constants(double lam) {
  if (lam == 0.0) return {0.5, 0.5};
  double q = doob_g(lam) / (lam * lam);
  return lam > 0 ? std::pair{q, 0.5} : std::pair{0.5, q};
}

// Self-normalized weighted mean with delta-method error and effective size.
inline Estimate snis(const std::vector<double>& f, const std::vector<double>& w) {
  Estimate e;
  e.method = Method::snis;
  e.n = f.size();
  double s = 0, s2 = 0, m = 0;
  for (std::size_t i = 0; i < f.size(); ++i) s += w[i], m += w[i] * f[i], s2 += w[i] * w[i];
  m /= s;
  double v = 0;
  for (std::size_t i = 0; i < f.size(); ++i) v += w[i] * w[i] * (f[i] - m) * (f[i] - m);
  e.value = m;
  e.std_error = std::sqrt(v) / s;
  e.ess = s * s / s2;
  if (e.ess < 10.0) e.flag("degenerate");
  return e;
}

// Normalized weights from log-weights.
inline std::vector<double> normalize_log(const std::vector<double>& lw) {
  double mx = *std::max_element(lw.begin(), lw.end());
  std::vector<double> w(lw.size());
  double s = 0;
  for (std::size_t i = 0; i < lw.size(); ++i) s += (w[i] = std::exp(lw[i] - mx));
  for (double& v : w) v /= s;
  return w;
}

inline Estimate partition_from_hits(const std::vector<std::uint32_t>& hits, double beta) {
  if (hits.empty()) throw ConfigError("empty path sample");
  std::vector<double> v(hits.size());
  for (std::size_t i = 0; i < hits.size(); ++i) v[i] = std::exp(beta * hits[i]);
  return stats::mean_estimate(v);
}

// Empirical polymer measure: paths, hits and the running Boltzmann weights.
struct GibbsEnsemble {
  std::shared_ptr<const Environment> env;
  PathBundle bundle;
  HitProcess hits;
  TubeSpec spec;
  double beta = 0.0;

  double horizon() const { return bundle.horizon(); }
  std::size_t n() const { return bundle.n_paths(); }
  std::size_t n_times() const { return bundle.n_times(); }

  // Normalized weights w_i(s_k); `left` excludes the event at s_k.
  std::vector<double> weights(std::size_t k, bool left = false) const {
    std::vector<double> lw(n());
    for (std::size_t i = 0; i < n(); ++i) {
      std::uint32_t h = left ? (k == 0 ? 0 : hits.hits(i, k - 1)) : hits.hits(i, k);
      lw[i] = beta * h;
    }
    return normalize_log(lw);
  }
  std::vector<double> final_weights() const { return weights(n_times() - 1); }
  std::vector<std::uint32_t> total_hits() const {
    std::vector<std::uint32_t> h(n());
    for (std::size_t i = 0; i < n(); ++i) h[i] = hits.total(i);
    return h;
  }
  // Trapezoid weights of the time grid.
  std::vector<double> time_weights() const {
    const auto& t = bundle.times();
    std::vector<double> q(t.size(), 0.0);
    for (std::size_t k = 1; k < t.size(); ++k) {
      double h = t[k] - t[k - 1];
      q[k - 1] += 0.5 * h;
      q[k] += 0.5 * h;
    }
    return q;
  }
};

inline GibbsEnsemble make_ensemble(const Environment& env, PathBundle bundle, const TubeSpec& spec, double beta) {
  GibbsEnsemble g;
  g.env = std::make_shared<const Environment>(env);
  g.hits = count_hits(bundle, env, spec);
  g.bundle = std::move(bundle);
  g.spec = spec;
  g.beta = beta;
  return g;
}

// Dense ensemble of free paths on the event-time grid plus m uniform steps.
inline GibbsEnsemble sample_ensemble(const Environment& env, const TubeSpec& spec, double beta, double t,
                                     std::size_t n_paths, Stream& rng, std::size_t m = 0) {
  auto times = make_time_grid(env, t, m);
  return make_ensemble(env, sample_free(times, n_paths, spec.d, rng), spec, beta);
}

inline Estimate partition(const Environment& env, double beta, const PathBundle& bundle, const TubeSpec& spec) {
  if (bundle.n_paths() == 0) throw ConfigError("empty bundle");
  auto h = count_hits(bundle, env, spec);
  std::vector<std::uint32_t> tot(h.n_paths);
  for (std::size_t i = 0; i < h.n_paths; ++i) tot[i] = h.total(i);
  return partition_from_hits(tot, beta);
}

inline double annealed_rate(double beta, double nu, const TubeSpec& spec) { return nu * lambda(beta) * spec.volume(); }

inline Estimate normalized_partition(const Environment& env, double beta, const PathBundle& bundle,
                                     const TubeSpec& spec) {
  Estimate z = partition(env, beta, bundle, spec);
  double c = std::exp(-annealed_rate(beta, env.config().nu, spec) * bundle.horizon());
  z.value *= c;
  z.std_error *= c;
  return z;
}

struct SecondMoment {
  Estimate estimate;
  bool in_l2_region = false;
};

// E[W_t^2] = E[exp(lambda^2 nu |V_t ∩ V~_t|)] over independent path pairs, the
// overlap volume integrated by the trapezoid rule with `steps` steps.
inline SecondMoment second_moment_closed_form(double beta, double nu, const TubeSpec& spec, double t,
                                              std::size_t n_pairs, Stream& rng, std::size_t steps = 1000,
                                              double c_trial = 1.0) {
  if (n_pairs < 1000) throw ConfigError("second moment needs at least 1000 pairs");
  SecondMoment out;
  const double lam = lambda(beta);
  out.in_l2_region = lam * lam * nu * std::pow(spec.r, spec.d + 2) < c_trial;
  std::vector<double> v(n_pairs, 1.0);
  if (lam != 0.0) {
    const double dt = t / static_cast<double>(steps), sd = std::sqrt(dt);
    for (std::size_t p = 0; p < n_pairs; ++p) {
      Point a{0, 0, 0}, b{0, 0, 0};
      double prev = spec.volume(), integral = 0.0;
      for (std::size_t k = 1; k <= steps; ++k) {
        for (int j = 0; j < spec.d; ++j) a[j] += sd * rng.normal(), b[j] += sd * rng.normal();
        double cur = overlap_volume(a, b, spec);
        integral += 0.5 * dt * (prev + cur);
        prev = cur;
      }
      v[p] = std::exp(lam * lam * nu * integral);
    }
  }
  out.estimate = stats::mean_estimate(v, Method::closed_form);
  if (t / static_cast<double>(steps) > t / 1000.0) out.estimate.flag("coarse-grid");
  return out;
}

struct P2PResult {
  Estimate z;  // Z_t(omega, beta; x)
  Estimate w;  // W(t, x)
};

inline P2PResult p2p_partition(const Environment& env, double beta, const TubeSpec& spec, double t, const Point& x,
                               std::size_t n, Stream& rng) {
  const double L = env.config().L;
  for (int j = 0; j < spec.d; ++j)
    if (std::abs(x[j]) + spec.rho > L) throw ConfigError("endpoint violates the box margin");
  auto times = make_time_grid(env, t);
  PathBundle b = sample_bridge(times, t, x, n, spec.d, rng);
  P2PResult r;
  r.z = partition(env, beta, b, spec);
  double c = heat_kernel(t, x, spec.d) * std::exp(-annealed_rate(beta, env.config().nu, spec) * t);
  r.w = r.z;
  r.w.value *= c;
  r.w.std_error *= c;
  return r;
}

struct CoupledIdentity {
  double lhs = 0, rhs = 0;
  double residual = 0;  // relative
};

// Bridge to (t, t xi) in omega against the sheared bridges to (t, 0) in the
// environment sheared by -xi; the two sides share their path samples.
inline CoupledIdentity p2p_shear_coupled(const Environment& env, double beta, const TubeSpec& spec, double t,
                                         const Point& xi, std::size_t n, Stream& rng) {
  auto times = make_time_grid(env, t);
  Point end{t * xi[0], t * xi[1], t * xi[2]};
  PathBundle b = sample_bridge(times, t, end, n, spec.d, rng);
  Point mxi{-xi[0], -xi[1], -xi[2]};
  PathBundle back = shear_paths(b, linear_drift(mxi));
  Environment sheared = shear(env, linear_drift(mxi), "-xi");
  CoupledIdentity c;
  c.lhs = partition(env, beta, b, spec).value;
  c.rhs = partition(sheared, beta, back, spec).value;
  c.residual = std::abs(c.lhs - c.rhs) / std::abs(c.lhs);
  return c;
}

struct FreeEnergy {
  double beta = 0;
  Estimate p;        // quenched free energy at horizon t
  Estimate psi;      // excess free energy
  double annealed = 0;
  double jackknife_bias = 0;
};

// p_t for several betas from common paths and environments. ln Z_t per
// environment is jackknifed over `blocks` path blocks.
inline std::vector<FreeEnergy> free_energy(const std::vector<double>& betas, double nu, const TubeSpec& spec, double t,
                                           std::size_t n_env, std::size_t n_paths, Stream& rng,
                                           std::size_t blocks = 10, TubeOptions topt = {}) {
  if (n_env < 30) throw ConfigError("free energy needs at least 30 environments");
  if (n_paths < blocks || blocks < 2) throw ConfigError("need at least two path blocks");
  const std::size_t nb = betas.size();
  std::vector<std::vector<double>> jack(nb, std::vector<double>(n_env)), raw(nb, std::vector<double>(n_env));
  EnvConfig cfg{spec.d, nu, t, default_half_width(t, spec.r), 0};
  for (std::size_t e = 0; e < n_env; ++e) {
    Stream es = rng.child(2 * e), ps = rng.child(2 * e + 1);
    Environment env = sample_environment(cfg, es);
    TubeIndex idx(env, spec, t, topt);
    SparseSample s = sparse_paths(idx, n_paths, ps);
    const std::size_t per = n_paths / blocks;
    for (std::size_t q = 0; q < nb; ++q) {
      const double beta = betas[q];
      std::vector<double> lw(per * blocks);
      for (std::size_t i = 0; i < lw.size(); ++i) lw[i] = beta * s.hits[i];
      double full = log_mean_exp(lw);
      double loo_mean = 0.0;
      for (std::size_t b = 0; b < blocks; ++b) {
        std::vector<double> part;
        part.reserve(lw.size() - per);
        for (std::size_t i = 0; i < lw.size(); ++i)
          if (i / per != b) part.push_back(lw[i]);
        loo_mean += log_mean_exp(part);
      }
      loo_mean /= static_cast<double>(blocks);
      raw[q][e] = full;
      jack[q][e] = static_cast<double>(blocks) * full - static_cast<double>(blocks - 1) * loo_mean;
    }
  }
  std::vector<FreeEnergy> out(nb);
  for (std::size_t q = 0; q < nb; ++q) {
    FreeEnergy& f = out[q];
    f.beta = betas[q];
    f.p = stats::mean_estimate(jack[q]);
    f.p.value /= t;
    f.p.std_error /= t;
    f.annealed = annealed_rate(betas[q], nu, spec);
    f.psi = f.p;
    f.psi.value = f.annealed - f.p.value;
    f.jackknife_bias = (stats::mean(raw[q]) - stats::mean(jack[q])) / t;
  }
  return out;
}

inline FreeEnergy free_energy(double beta, double nu, const TubeSpec& spec, double t, std::size_t n_env,
                              std::size_t n_paths, Stream& rng) {
  return free_energy(std::vector<double>{beta}, nu, spec, t, n_env, n_paths, rng)[0];
}

using PathFunctional = std::function<double(const PathBundle&, std::size_t)>;

inline Estimate gibbs_expect(const GibbsEnsemble& g, const PathFunctional& f) {
  std::vector<double> v(g.n());
  for (std::size_t i = 0; i < g.n(); ++i) v[i] = f(g.bundle, i);
  return snis(v, g.final_weights());
}

namespace detail {

// Piecewise-constant occupation F(x) = sum_i w_i 1{|x - c_i| <= rho} on the
// line, as breakpoints x_0 < x_1 < ... with F = level[k] on (x_k, x_{k+1})
// and F = peak[k] at the point x_k itself.
struct Profile {
  std::vector<double> x, level, peak;

  template <class G>
  double integrate(G&& g) const {
    double s = 0;
    for (std::size_t k = 0; k + 1 < x.size(); ++k) s += g(level[k]) * (x[k + 1] - x[k]);
    return s;
  }
  // Smallest location of the maximum.
  std::pair<double, double> argmax() const {
    double best = -1, at = 0;
    for (std::size_t k = 0; k < x.size(); ++k)
      if (peak[k] > best) best = peak[k], at = x[k];
    return {at, best};
  }
};

inline Profile profile(const std::vector<double>& c, const std::vector<double>& w, double rho) {
  struct Bp {
    double x;
    double dw;
    bool start;
  };
  std::vector<Bp> bp;
  bp.reserve(2 * c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (w[i] == 0.0) continue;
    bp.push_back({c[i] - rho, w[i], true});
    bp.push_back({c[i] + rho, w[i], false});
  }
  std::sort(bp.begin(), bp.end(), [](const Bp& a, const Bp& b) { return a.x < b.x; });
  Profile p;
  double run = 0.0;
  for (std::size_t q = 0; q < bp.size();) {
    double x = bp[q].x, starts = 0, ends = 0;
    while (q < bp.size() && bp[q].x == x) {
      (bp[q].start ? starts : ends) += bp[q].dw;
      ++q;
    }
    p.x.push_back(x);
    p.peak.push_back(run + starts);
    run += starts - ends;
    p.level.push_back(std::max(run, 0.0));
  }
  if (!p.level.empty()) p.level.back() = 0.0;
  return p;
}

inline std::vector<double> coords(const GibbsEnsemble& g, std::size_t k) {
  std::vector<double> c(g.n());
  for (std::size_t i = 0; i < g.n(); ++i) c[i] = g.bundle.at(i, k)[0];
  return c;
}

// (1/r^d) sum_{i,j} w_i w_j overlap(B^i, B^j) with normalized weights.
inline double plugin_overlap(const GibbsEnsemble& g, std::size_t k, const std::vector<double>& w) {
  const double vol = g.spec.volume();
  if (g.spec.d == 1) {
    auto p = profile(coords(g, k), w, g.spec.rho);
    return p.integrate([](double f) { return f * f; }) / vol;
  }
  double s = 0;
  for (std::size_t i = 0; i < g.n(); ++i) {
    Point a = g.bundle.at(i, k);
    s += w[i] * w[i] * vol;
    for (std::size_t j = i + 1; j < g.n(); ++j) s += 2.0 * w[i] * w[j] * overlap_volume(a, g.bundle.at(j, k), g.spec);
  }
  return s / vol;
}

// Same with the diagonal removed and renormalized.
inline double ustat_overlap(const GibbsEnsemble& g, std::size_t k, const std::vector<double>& w) {
  double v = plugin_overlap(g, k, w);
  double s2 = 0;
  for (double x : w) s2 += x * x;
  if (1.0 - s2 <= 0.0) return 1.0;
  return std::clamp((v - s2) / (1.0 - s2), 0.0, 1.0);
}

}  // namespace detail

struct Overlaps {
  std::vector<double> I;          // endpoint overlap at each grid time under P_s (distinct pairs)
  std::vector<double> I_plugin;   // same including the diagonal
  std::vector<double> overlap_t;  // tube overlap at each time under P_t (distinct pairs)
  double J = 0;                   // time average of overlap_t
  double J_plugin = 0;            // time average of the diagonal-inclusive version
};

inline Overlaps overlaps(const GibbsEnsemble& g) {
  if (g.n() < 2) throw ConfigError("overlaps need at least two paths");
  Overlaps o;
  const std::size_t T = g.n_times();
  auto wt = g.final_weights();
  auto q = g.time_weights();
  const double t = g.horizon();
  o.I.resize(T);
  o.I_plugin.resize(T);
  o.overlap_t.resize(T);
  for (std::size_t k = 0; k < T; ++k) {
    auto ws = g.weights(k);
    o.I_plugin[k] = std::min(1.0, detail::plugin_overlap(g, k, ws));
    o.I[k] = detail::ustat_overlap(g, k, ws);
    double plug = detail::plugin_overlap(g, k, wt);
    o.overlap_t[k] = detail::ustat_overlap(g, k, wt);
    o.J += q[k] * o.overlap_t[k];
    o.J_plugin += q[k] * plug;
  }
  o.J /= t;
  o.J_plugin = std::min(1.0, o.J_plugin / t);
  return o;
}

struct FavoritePath {
  std::vector<Point> Y;             // favourite centre per grid time
  std::vector<double> mass;         // P_t[B_s in U(Y(s))]
  std::vector<double> R_star_path;  // per-path time fraction in the favourite tube
  Estimate R_star;                  // Gibbs average of the above
  double J_plugin = 0;              // plug-in overlap on the same grid and weights
};

// In d = 1 the argmax is exact (breakpoint sweep); for d > 1 centres are
// searched on a grid of the given pitch over the path cloud.
inline FavoritePath favorite_path(const GibbsEnsemble& g, double pitch = 0.0) {
  const int d = g.spec.d;
  if (d > 1 && !(pitch > 0 && pitch <= g.spec.rho / 2)) throw ConfigError("favourite grid pitch must be in (0, rho/2]");
  const std::size_t T = g.n_times(), n = g.n();
  auto w = g.final_weights();
  auto q = g.time_weights();
  const double t = g.horizon(), rho2 = g.spec.rho * g.spec.rho;
  FavoritePath f;
  f.Y.resize(T);
  f.mass.resize(T);
  f.R_star_path.assign(n, 0.0);
  for (std::size_t k = 0; k < T; ++k) {
    Point y{0, 0, 0};
    if (d == 1) {
      auto p = detail::profile(detail::coords(g, k), w, g.spec.rho);
      y[0] = p.argmax().first;
      f.J_plugin += q[k] * p.integrate([](double v) { return v * v; }) / g.spec.volume();
    } else {
      Point lo{0, 0, 0}, hi{0, 0, 0};
      for (int j = 0; j < d; ++j) lo[j] = INFINITY, hi[j] = -INFINITY;
      for (std::size_t i = 0; i < n; ++i) {
        Point b = g.bundle.at(i, k);
        for (int j = 0; j < d; ++j) lo[j] = std::min(lo[j], b[j]), hi[j] = std::max(hi[j], b[j]);
      }
      std::size_t m[3] = {1, 1, 1};
      for (int j = 0; j < d; ++j) m[j] = static_cast<std::size_t>(std::ceil((hi[j] - lo[j]) / pitch)) + 1;
      double best = -1;
      for (std::size_t a = 0; a < m[0]; ++a)
        for (std::size_t b2 = 0; b2 < m[1]; ++b2)
          for (std::size_t c = 0; c < m[2]; ++c) {
            Point z{lo[0] + a * pitch, d > 1 ? lo[1] + b2 * pitch : 0.0, d > 2 ? lo[2] + c * pitch : 0.0};
            double s = 0;
            for (std::size_t i = 0; i < n; ++i)
              if (dist2(g.bundle.at(i, k), z, d) <= rho2) s += w[i];
            if (s > best) best = s, y = z;
          }
      f.J_plugin += q[k] * detail::plugin_overlap(g, k, w);
    }
    f.Y[k] = y;
    double mass = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (dist2(g.bundle.at(i, k), y, d) <= rho2) {
        mass += w[i];
        f.R_star_path[i] += q[k];
      }
    f.mass[k] = mass;
  }
  for (double& v : f.R_star_path) v /= t;
  f.J_plugin = std::min(1.0, f.J_plugin / t);
  f.R_star = snis(f.R_star_path, w);
  f.R_star.value = std::clamp(f.R_star.value, 0.0, 1.0);
  return f;
}

// Genealogical particle approximation of the path measure P_t on the slab
// grid. Final weights are removed by one more systematic resampling, so the
// returned ensemble carries no events and beta = 0 (uniform weights); only
// path-space functionals such as favorite_path and overlaps are meaningful.
inline GibbsEnsemble smc_path_ensemble(const TubeIndex& idx, const Environment& env, double beta, SmcOptions opt,
                                       Stream& rng) {
  opt.keep_paths = true;
  SmcResult r = smc_partition(idx, beta, opt, rng);
  const std::size_t n = r.paths.size(), T = idx.n_slabs() + 1;
  std::vector<double> times(T);
  times[0] = 0.0;
  for (std::size_t k = 0; k < idx.n_slabs(); ++k) times[k + 1] = idx.slab_end(k);
  PathBundle b(times, n, env.dim());
  double u = rng.uniform() / static_cast<double>(n), cum = r.weight[0];
  std::size_t src = 0;
  for (std::size_t j = 0; j < n; ++j) {
    double target = u + static_cast<double>(j) / static_cast<double>(n);
    while (src + 1 < n && cum < target) cum += r.weight[++src];
    for (std::size_t k = 0; k < T; ++k) b.raw(j, k) = r.paths[src][k];
  }
  EnvConfig cfg = env.config();
  return make_ensemble(Environment(cfg, {}, {"genealogy"}), std::move(b), idx.spec(), 0.0);
}

// Constant c in c P[R*]^2 <= J: the module's geometric constant 1/(2^d c'^2),
// c' the number of balls of radius rho covering a ball of radius 2 rho.
inline double two_to_one_constant(int d) {
  switch (d) {
    case 1: return 1.0 / (2.0 * 2.0 * 2.0);
    case 2: return 1.0 / (4.0 * 7.0 * 7.0);
  }
  throw ConfigError("two-to-one constant only available for d <= 2");
}

struct DoobDecomp {
  std::vector<double> event_times;
  std::vector<double> log_factors;  // ln(1 + lambda P_{s-}[chi]) per event
  std::vector<double> A;            // compensator on the time grid
  std::vector<double> M;            // martingale part on the time grid
  std::vector<double> I_left;       // plug-in endpoint overlap under P_{s-}
  std::vector<double> cum_I;        // int_0^s I_left, same grid
  std::vector<double> times;
  double A_t = 0, M_t = 0;
  double log_W = 0;                 // ln of the telescoped W_t
  double int_I = 0;                 // time integral of I_left
  double c1 = 0, c2 = 0;            // Taylor constants times nu lambda^2 r^d
  double quadrature_error = 0;      // change of A_t on the halved grid
};

inline DoobDecomp doob_decomposition(const GibbsEnsemble& g) {
  if (g.spec.d != 1) throw ConfigError("Doob decomposition is implemented for d = 1");
  const auto& times = g.bundle.times();
  const std::size_t T = times.size();
  const auto& ev = g.env->events();
  const double lam = lambda(g.beta), nu = g.env->config().nu, vol = g.spec.volume();
  DoobDecomp D;
  std::vector<double> a_int(T), i_int(T);
  for (std::size_t k = 0; k < T; ++k) {
    auto w = g.weights(k, true);
    auto p = detail::profile(detail::coords(g, k), w, g.spec.rho);
    a_int[k] = nu * p.integrate([lam](double f) { return doob_g(lam * f); });
    i_int[k] = p.integrate([](double f) { return f * f; }) / vol;
  }
  D.I_left = i_int;
  // per-event factors
  std::vector<double> jump(T, 0.0);
  const double rho2 = g.spec.rho * g.spec.rho;
  for (std::size_t e = 0; e < g.hits.event_time_index.size(); ++e) {
    std::size_t k = g.hits.event_time_index[e];
    auto w = g.weights(k, true);
    double pm = 0;
    for (std::size_t i = 0; i < g.n(); ++i)
      if (dist2(g.bundle.at(i, k), ev[e].pos, 1) <= rho2) pm += w[i];
    double lf = std::log1p(lam * pm);
    D.event_times.push_back(ev[e].time);
    D.log_factors.push_back(lf);
    jump[k] += lf;
  }
  D.A.assign(T, 0.0);
  D.M.assign(T, 0.0);
  double A = 0, I = 0, logz = 0;
  const double rate = lam * nu * vol;
  for (std::size_t k = 0; k < T; ++k) {
    if (k > 0) {
      double h = times[k] - times[k - 1];
      A += 0.5 * h * (a_int[k - 1] + a_int[k]);
      I += 0.5 * h * (i_int[k - 1] + i_int[k]);
    }
    logz += jump[k];
    D.cum_I.push_back(I);
    D.A[k] = A;
    D.M[k] = -(logz - rate * times[k]) - A;
  }
  D.A_t = A;
  D.int_I = I;
  D.times = times;
  D.log_W = logz - rate * times.back();
  D.M_t = -D.log_W - D.A_t;
  auto [lo, hi] = doob_constants(lam);
  D.c1 = nu * lam * lam * vol * lo;
  D.c2 = nu * lam * lam * vol * hi;
  // halved grid: every other node, keeping the endpoints
  double Ac = 0;
  std::size_t prev = 0;
  for (std::size_t k = 2; k < T; k += 2) {
    Ac += 0.5 * (times[k] - times[prev]) * (a_int[prev] + a_int[k]);
    prev = k;
  }
  if (prev != T - 1) Ac += 0.5 * (times[T - 1] - times[prev]) * (a_int[prev] + a_int[T - 1]);
  D.quadrature_error = std::abs(Ac - A);
  return D;
}

// c1 int_0^s I <= -ln W_s <= c2 int_0^s I holds for large s with unknown
// constants; fit them as the extreme ratios over s >= from, all runs pooled.
struct SandwichFit {
  double c1 = INFINITY, c2 = -INFINITY;
  std::size_t points = 0;
  bool positive = false;  // c1 > 0: -ln W grows with int I
};

inline SandwichFit fit_sandwich(const std::vector<DoobDecomp>& runs, double from) {
  SandwichFit f;
  for (const auto& D : runs)
    for (std::size_t k = 0; k < D.times.size(); ++k) {
      if (D.times[k] < from || !(D.cum_I[k] > 0)) continue;
      double r = (D.M[k] + D.A[k]) / D.cum_I[k];
      f.c1 = std::min(f.c1, r);
      f.c2 = std::max(f.c2, r);
      ++f.points;
    }
  if (f.points == 0) throw ConfigError("no grid time beyond the fitting start");
  f.positive = f.c1 > 0;
  return f;
}

// ln of the telescoping product prod(1 + lambda P_{s-}[chi]) over all events.
inline double telescoped_log_partition(const GibbsEnsemble& g) {
  const auto& ev = g.env->events();
  const double lam = lambda(g.beta), rho2 = g.spec.rho * g.spec.rho;
  double s = 0;
  for (std::size_t e = 0; e < g.hits.event_time_index.size(); ++e) {
    std::size_t k = g.hits.event_time_index[e];
    auto w = g.weights(k, true);
    double pm = 0;
    for (std::size_t i = 0; i < g.n(); ++i)
      if (dist2(g.bundle.at(i, k), ev[e].pos, g.spec.d) <= rho2) pm += w[i];
    s += std::log1p(lam * pm);
  }
  return s;
}

struct LocalizationSets {
  double negligible = 0;    // Lebesgue measure within the box, per t r^d
  double predominant = 0;
  double intermediate = 0;
  double tube_negligible = 0;      // P_t[|V_t(B) ∩ N|] / (t r^d)
  double outside_predominant = 0;  // P_t[|V_t(B)^c ∩ P|] / (t r^d)
  double one_minus_R = 0;          // P_t^{⊗2}(1 - R_t), plug-in
  double bound_intermediate = 0, bound_negligible = 0, bound_predominant = 0;
};

inline LocalizationSets localization_sets(const GibbsEnsemble& g, double delta) {
  if (g.spec.d != 1) throw ConfigError("localization sets are implemented for d = 1");
  if (!(delta > 0 && delta < 0.5)) throw ConfigError("delta must lie in (0, 1/2)");
  auto w = g.final_weights();
  auto q = g.time_weights();
  const double t = g.horizon(), vol = g.spec.volume(), L = g.env->config().L;
  LocalizationSets s;
  for (std::size_t k = 0; k < g.n_times(); ++k) {
    auto p = detail::profile(detail::coords(g, k), w, g.spec.rho);
    double support_neg = 0;  // part of [-L, L] where F <= delta
    double covered = 0;
    for (std::size_t j = 0; j + 1 < p.x.size(); ++j) {
      double a = std::max(-L, p.x[j]), b = std::min(L, p.x[j + 1]);
      if (b > a) {
        covered += b - a;
        if (p.level[j] <= delta) support_neg += b - a;
      }
    }
    support_neg += 2.0 * L - covered;
    s.negligible += q[k] * support_neg;
    s.predominant += q[k] * p.integrate([&](double f) { return f >= 1 - delta ? 1.0 : 0.0; });
    s.intermediate += q[k] * p.integrate([&](double f) { return f > delta && f < 1 - delta ? 1.0 : 0.0; });
    s.tube_negligible += q[k] * p.integrate([&](double f) { return f <= delta ? f : 0.0; });
    s.outside_predominant += q[k] * p.integrate([&](double f) { return f >= 1 - delta ? 1 - f : 0.0; });
    s.one_minus_R += q[k] * p.integrate([](double f) { return f - f * f; });
  }
  const double norm = t * vol;
  s.negligible /= norm;
  s.predominant /= norm;
  s.intermediate /= norm;
  s.tube_negligible /= norm;
  s.outside_predominant /= norm;
  s.one_minus_R /= norm;
  s.bound_intermediate = s.one_minus_R / (delta * (1 - delta));
  s.bound_negligible = s.one_minus_R / (1 - delta);
  s.bound_predominant = s.one_minus_R / (1 - delta);
  return s;
}

enum class TiltMode { independent, drifted };

struct TiltedMgf {
  Estimate lhs, rhs;
};

// P_t[exp(a.B_t/sqrt t)] against exp(|a|^2/2) W_t(shifted env)/W_t(env), with
// the shift phi(s) = (s ∧ t) a / sqrt t.
inline TiltedMgf tilted_mgf(const GibbsEnsemble& g, const Point& a, TiltMode mode = TiltMode::independent) {
  const int d = g.spec.d;
  const double t = g.horizon(), st = std::sqrt(t), beta = g.beta;
  const double a2 = norm2(a, d);
  const std::size_t n = g.n(), last = g.n_times() - 1;
  Drift phi = [a, t, st](double s) {
    double u = std::min(s, t) / st;
    return Point{u * a[0], u * a[1], u * a[2]};
  };
  Drift mphi = [phi](double s) {
    Point p = phi(s);
    return Point{-p[0], -p[1], -p[2]};
  };
  auto h0 = g.total_hits();
  Environment moved = shear(*g.env, mphi, "-phi");
  HitProcess hm = count_hits(g.bundle, moved, g.spec);
  // rhs: ratio of plain means, delta-method error
  std::vector<double> num(n), den(n);
  double mx = 0;
  for (std::size_t i = 0; i < n; ++i) mx = std::max({mx, beta * hm.total(i), beta * h0[i]});
  for (std::size_t i = 0; i < n; ++i) {
    num[i] = std::exp(beta * hm.total(i) - mx);
    den[i] = std::exp(beta * h0[i] - mx);
  }
  TiltedMgf r;
  {
    double sn = 0, sd = 0;
    for (std::size_t i = 0; i < n; ++i) sn += num[i], sd += den[i];
    double R = sn / sd, v = 0;
    for (std::size_t i = 0; i < n; ++i) v += (num[i] - R * den[i]) * (num[i] - R * den[i]);
    r.rhs.value = std::exp(0.5 * a2) * R;
    r.rhs.std_error = std::exp(0.5 * a2) * std::sqrt(v) / sd;
    r.rhs.n = n;
  }
  if (mode == TiltMode::independent) {
    std::vector<double> f(n);
    for (std::size_t i = 0; i < n; ++i) f[i] = std::exp(dot(a, g.bundle.at(i, last), d) / st);
    r.lhs = snis(f, g.final_weights());
  } else {
    // Proposal B + phi, reweighted by dP/dP^phi = exp(-a.B~_t/sqrt t + |a|^2/2).
    PathBundle drifted = shear_paths(g.bundle, phi);
    HitProcess hd = count_hits(drifted, *g.env, g.spec);
    double sn = 0, sd = 0;
    std::vector<double> nn(n);
    for (std::size_t i = 0; i < n; ++i) {
      double ab = dot(a, drifted.at(i, last), d) / st;
      nn[i] = std::exp(ab) * std::exp(beta * hd.total(i) - mx) * std::exp(-ab + 0.5 * a2);
      sn += nn[i];
      sd += den[i];
    }
    double R = sn / sd, v = 0;
    for (std::size_t i = 0; i < n; ++i) v += (nn[i] - R * den[i]) * (nn[i] - R * den[i]);
    r.lhs.value = R;
    r.lhs.std_error = std::sqrt(v) / sd;
    r.lhs.n = n;
    r.lhs.method = Method::snis;
  }
  return r;
}

// Deviation (1/t) ln P_t[exp(a.B_t)] - |a|^2/2, evaluated through the
// Cameron-Martin identity as (1/t) ln(W_t(shifted)/W_t) with particle
// estimates that share their random numbers.
inline Estimate rate_function_probe(double beta, double nu, const TubeSpec& spec, double t, const Point& a,
                                    std::size_t n_env, const SmcOptions& opt, Stream& rng, TubeOptions topt = {}) {
  if (std::sqrt(norm2(a, spec.d)) > 2.0) throw ConfigError("tilt must satisfy |a| <= 2");
  double shiftmax = std::sqrt(norm2(a, spec.d)) * t;
  EnvConfig cfg{spec.d, nu, t, default_half_width(t, spec.r, shiftmax), 0};
  Drift mphi = [a, t](double s) {
    double u = -std::min(s, t);
    return Point{u * a[0], u * a[1], u * a[2]};
  };
  std::vector<double> dev(n_env);
  for (std::size_t e = 0; e < n_env; ++e) {
    Stream es = rng.child(2 * e);
    Environment env = sample_environment(cfg, es);
    Environment moved = shear(env, mphi, "-phi");
    TubeIndex i0(env, spec, t, topt), i1(moved, spec, t, topt);
    Stream s0 = rng.child(2 * e + 1), s1 = rng.child(2 * e + 1);
    double l0 = smc_partition(i0, beta, opt, s0).log_z;
    double l1 = smc_partition(i1, beta, opt, s1).log_z;
    dev[e] = (l1 - l0) / t;
    if (!std::isfinite(dev[e])) throw NumericError("weight overflow in rate probe");
  }
  Estimate e = stats::mean_estimate(dev, Method::smc);
  return e;
}

struct VarianceReport {
  Estimate var;                 // Var(ln Z_t) across environments
  Estimate bound;               // c_+^2 t nu J_t
  bool bound_ok = true;
  std::vector<double> u;
  std::vector<double> tail_upper;   // Clopper-Pearson upper limit of the exceedance probability
  std::vector<double> tail_lower;   // lower limit
  std::vector<double> tail_bound;   // 2 exp(-(u ∧ u^2/(ct))/2)
  bool tail_ok = true;
  std::vector<double> log_z;
  std::vector<double> J;
};

inline VarianceReport variance_and_concentration(double beta, double nu, const TubeSpec& spec, double t,
                                                 std::size_t n_env, std::size_t n_paths, Stream& rng,
                                                 const std::vector<double>& u_grid = {1, 2, 4},
                                                 double confidence = 0.99) {
  if (n_env < 100) throw ConfigError("variance check needs at least 100 environments");
  VarianceReport R;
  R.u = u_grid;
  EnvConfig cfg{spec.d, nu, t, default_half_width(t, spec.r), 0};
  for (std::size_t e = 0; e < n_env; ++e) {
    Stream es = rng.child(2 * e), ps = rng.child(2 * e + 1);
    Environment env = sample_environment(cfg, es);
    GibbsEnsemble g = sample_ensemble(env, spec, beta, t, n_paths, ps);
    std::vector<double> lw(g.n());
    for (std::size_t i = 0; i < g.n(); ++i) lw[i] = beta * g.hits.total(i);
    R.log_z.push_back(log_mean_exp(lw));
    R.J.push_back(overlaps(g).J);
  }
  const double cp = std::expm1(std::abs(beta));
  const double n = static_cast<double>(n_env);
  double m = stats::mean(R.log_z), v = stats::variance(R.log_z), m4 = 0;
  for (double x : R.log_z) m4 += std::pow(x - m, 4);
  m4 /= n;
  R.var.value = v;
  R.var.std_error = std::sqrt(std::max(0.0, m4 - v * v) / n);
  R.var.n = n_env;
  Estimate j = stats::mean_estimate(R.J);
  R.bound.value = cp * cp * t * nu * j.value;
  R.bound.std_error = cp * cp * t * nu * j.std_error;
  R.bound.n = n_env;
  R.bound_ok = R.var.value - R.bound.value <= 3.0 * std::hypot(R.var.std_error, R.bound.std_error);
  const double c = nu * cp * cp * std::exp(cp);
  for (double u : u_grid) {
    std::uint64_t k = 0;
    for (double x : R.log_z)
      if (std::abs(x - m) > u) ++k;
    auto [lo, hi] = stats::clopper_pearson(k, n_env, confidence);
    double b = c > 0 ? 2.0 * std::exp(-0.5 * std::min(u, u * u / (c * t))) : 0.0;
    R.tail_lower.push_back(lo);
    R.tail_upper.push_back(hi);
    R.tail_bound.push_back(b);
    if (lo > b) R.tail_ok = false;
  }
  return R;
}

// Finite-horizon Markov identity W_{t+s}(omega) = P[e_t W_s(theta_{t,B_t} omega)]:
// direct estimate against the nested one; returns the z score.
inline double markov_consistency(const Environment& env, double beta, const TubeSpec& spec, double t, double s,
                                 std::size_t n_outer, std::size_t n_inner, Stream& rng) {
  const double nu = env.config().nu, rate = annealed_rate(beta, nu, spec);
  Stream d = rng.child(0);
  PathBundle direct = sample_free(make_time_grid(env, t + s), n_outer * n_inner, spec.d, d);
  Estimate w1 = normalized_partition(env, beta, direct, spec);
  Stream o = rng.child(1);
  PathBundle outer = sample_free(make_time_grid(env, t), n_outer, spec.d, o);
  auto h = count_hits(outer, env, spec);
  std::vector<double> v(n_outer);
  for (std::size_t i = 0; i < n_outer; ++i) {
    Environment next = shift(env, t, outer.at(i, outer.n_times() - 1));
    Stream in = rng.child(2 + i);
    PathBundle inner = sample_free(make_time_grid(next, s), n_inner, spec.d, in);
    double ws = normalized_partition(next, beta, inner, spec).value;
    v[i] = std::exp(beta * h.total(i) - rate * t) * ws;
  }
  Estimate w2 = stats::mean_estimate(v);
  return z_score(w1, w2);
}

// Lipschitz diagnostic for x -> W_t(x) along the first axis, as an L1
// bracket on E|W_t(x) - W_t(0)|. Two independent mirror-coupled bundles per
// environment give estimates D1, D2 of the difference; mean |D1| sits above
// (Jensen, plus path noise) and mean sign(D1) D2 sits below. Crossings are drawn
// from the bridge law so the event grid alone is exact.
struct LipschitzProbe {
  std::vector<double> x;
  std::vector<Estimate> upper, lower;
  double C = 0;                   // max of upper / x
  stats::LinearFit loglog;        // log lower against log x
};

inline LipschitzProbe mirror_lipschitz_probe(double beta, double nu, const TubeSpec& spec, double t,
                                             const std::vector<double>& xs, std::size_t n_env, std::size_t n_paths,
                                             Stream& rng) {
  if (xs.size() < 2) throw ConfigError("need at least two offsets");
  double xmax = 0;
  for (double x : xs) {
    if (!(x > 0)) throw ConfigError("offsets must be positive");
    xmax = std::max(xmax, x);
  }
  const double c = std::exp(-annealed_rate(beta, nu, spec) * t);
  EnvConfig cfg{spec.d, nu, t, default_half_width(t, spec.r, xmax), 0};
  LipschitzProbe P;
  P.x = xs;
  for (std::size_t q = 0; q < xs.size(); ++q) {
    std::vector<double> up(n_env), lo(n_env);
    for (std::size_t e = 0; e < n_env; ++e) {
      Stream es = rng.child(e);
      Environment env = sample_environment(cfg, es);
      const auto times = make_time_grid(env, t);
      double D[2];
      for (int b = 0; b < 2; ++b) {
        Stream ps = rng.child(1000003 * (2 * q + b + 1) + e);
        MirrorCoupling m = mirror_couple(times, Point{xs[q], 0, 0}, n_paths, spec.d, ps, true);
        HitProcess h0 = count_hits(m.base, env, spec), h1 = count_hits(m.reflected, env, spec);
        double s = 0;
        for (std::size_t i = 0; i < n_paths; ++i) s += std::exp(beta * h1.total(i)) - std::exp(beta * h0.total(i));
        D[b] = c * s / static_cast<double>(n_paths);
      }
      up[e] = std::abs(D[0]);
      lo[e] = D[0] > 0 ? D[1] : D[0] < 0 ? -D[1] : 0.0;
    }
    P.upper.push_back(stats::mean_estimate(up));
    P.lower.push_back(stats::mean_estimate(lo));
  }
  std::vector<double> lx, ly, sy;
  for (std::size_t q = 0; q < xs.size(); ++q) {
    P.C = std::max(P.C, P.upper[q].value / xs[q]);
    const Estimate& l = P.lower[q];
    if (l.value > 0) {
      lx.push_back(std::log(xs[q]));
      ly.push_back(std::log(l.value));
      sy.push_back(std::max(l.std_error / l.value, 1e-12));
    }
  }
  if (lx.size() >= 2) P.loglog = stats::linear_fit(lx, ly, sy);
  return P;
}

}  // namespace polylab
