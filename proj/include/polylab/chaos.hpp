#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/quadrature/tanh_sinh.hpp>

#include "polylab/core.hpp"
#include "polylab/environment.hpp"
#include "polylab/geometry.hpp"
#include "polylab/gibbs.hpp"
#include "polylab/paths.hpp"
#include "polylab/stats.hpp"
#include "polylab/tube.hpp"

namespace polylab {

// Function of a time-ordered k-tuple (s_1 < ... < s_k) and positions.
struct SimplexIntegrand {
  int order = 0;
  std::function<double(std::span<const double>, std::span<const Point>)> eval;
};

// Sum of g over time-ordered k-tuples of distinct points with times <= t.
inline double factorial_sum(const Environment& env, int k, const SimplexIntegrand& g, double t) {
  if (k < 0) throw ConfigError("order must be non-negative");
  const std::size_t m = env.count_until(t);
  if (k == 0) return g.eval({}, {});
  if (static_cast<std::size_t>(k) > m) return 0.0;
  std::vector<double> s(k);
  std::vector<Point> x(k);
  const auto& ev = env.events();
  double total = 0;
  std::function<void(int, std::size_t)> rec = [&](int j, std::size_t from) {
    if (j == k) {
      total += g.eval(s, x);
      return;
    }
    for (std::size_t p = from; p + (k - j) <= m; ++p) {
      s[j] = ev[p].time;
      x[j] = ev[p].pos;
      rec(j + 1, p + 1);
    }
  };
  rec(0, 0);
  return total;
}

// For a product integrand prod_j v(p_j) the factorial sum of order k is the
// elementary symmetric polynomial e_k(v); returns e_0 .. e_kmax.
inline std::vector<double> elementary_symmetric(const std::vector<double>& v, std::size_t kmax) {
  std::vector<double> e(kmax + 1, 0.0);
  e[0] = 1.0;
  for (double x : v)
    for (std::size_t j = std::min(kmax, v.size()); j >= 1; --j) e[j] += e[j - 1] * x;
  return e;
}

struct QuadratureSpec {
  double tolerance = 1e-6;  // absolute
  int start_panels = 1;
  int max_panels = 8;
};

namespace detail {
struct Nodes {
  std::vector<double> x, w;  // Gauss-Legendre on [-1, 1]
};
inline const Nodes& gl5() {
  static const Nodes n = [] {
    using G = boost::math::quadrature::gauss<double, 5>;
    Nodes r;
    const auto& a = G::abscissa();
    const auto& w = G::weights();
    for (std::size_t i = 0; i < a.size(); ++i) {
      r.x.push_back(a[i]);
      r.w.push_back(w[i]);
      if (a[i] != 0.0) {
        r.x.push_back(-a[i]);
        r.w.push_back(w[i]);
      }
    }
    return r;
  }();
  return n;
}
}  // namespace detail

// Multiple Wiener-Ito integral of order k <= 3 by inclusion-exclusion over the
// coordinates that are Poisson points; the remaining coordinates integrate
// against nu ds dx with composite Gauss-Legendre panels, doubled until two
// successive values agree within the tolerance.
class WienerIto {
 public:
  WienerIto(int k, SimplexIntegrand g, double t, const EnvConfig& box, QuadratureSpec q = {})
      : k_(k), g_(std::move(g)), t_(t), box_(box), q_(q) {
    if (k < 0 || k > 3) throw ConfigError("Wiener-Ito integrals are limited to order 3");
    box.validate();
  }

  struct Value {
    double value = 0;
    bool converged = true;
  };

  Value operator()(const Environment& env) {
    if (!empty_term_) empty_term_ = adaptive({});
    Value v;
    const std::size_t m = env.count_until(t_);
    const auto& ev = env.events();
    double total = 0;
    bool ok = empty_term_->converged;
    // J enumerated as bit masks over the k coordinates
    for (unsigned mask = 0; mask < (1u << k_); ++mask) {
      int jsize = std::popcount(mask);
      double sign = ((k_ - jsize) % 2) ? -1.0 : 1.0;
      if (jsize == 0) {
        total += sign * empty_term_->value;
        continue;
      }
      if (static_cast<std::size_t>(jsize) > m) continue;
      std::vector<std::size_t> pick(jsize);
      std::function<void(int, std::size_t)> rec = [&](int j, std::size_t from) {
        if (j == jsize) {
          std::vector<std::pair<int, Event>> fixed;
          int c = 0;
          for (int q = 0; q < k_; ++q)
            if (mask & (1u << q)) fixed.push_back({q, ev[pick[c++]]});
          Value r = adaptive(fixed);
          ok = ok && r.converged;
          total += sign * r.value;
          return;
        }
        for (std::size_t p = from; p + (jsize - j) <= m; ++p) {
          pick[j] = p;
          rec(j + 1, p + 1);
        }
      };
      rec(0, 0);
    }
    v.value = total;
    v.converged = ok;
    return v;
  }

  // nu^{k-|J|} times the integral over the free coordinates with the J
  // coordinates pinned to the given events.
  double compensator(const std::vector<std::pair<int, Event>>& fixed, int panels) const {
    std::vector<double> s(k_);
    std::vector<Point> x(k_);
    std::vector<int> is_fixed(k_, -1);
    for (std::size_t c = 0; c < fixed.size(); ++c) is_fixed[fixed[c].first] = static_cast<int>(c);
    // time cap for each coordinate: the next pinned time, or t
    std::vector<double> cap(k_, t_);
    double next = t_;
    for (int q = k_ - 1; q >= 0; --q) {
      cap[q] = next;
      if (is_fixed[q] >= 0) next = fixed[is_fixed[q]].second.time;
    }
    const auto& N = detail::gl5();
    const int d = box_.d;
    const double L = box_.L;
    const int np = panels;
    std::function<double(int, double)> rec = [&](int q, double lo) -> double {
      if (q == k_) return g_.eval(s, x);
      if (is_fixed[q] >= 0) {
        const Event& e = fixed[is_fixed[q]].second;
        if (e.time <= lo) return 0.0;
        s[q] = e.time;
        x[q] = e.pos;
        return rec(q + 1, e.time);
      }
      double hi = cap[q];
      if (hi <= lo) return 0.0;
      double acc = 0;
      double hs = (hi - lo) / np, hx = 2.0 * L / np;
      for (int pt = 0; pt < np; ++pt)
        for (std::size_t it = 0; it < N.x.size(); ++it) {
          s[q] = lo + hs * (pt + 0.5 * (N.x[it] + 1.0));
          double wt = 0.5 * hs * N.w[it];
          // tensor rule in space
          std::size_t per = static_cast<std::size_t>(np) * N.x.size();
          std::size_t count = 1;
          for (int j = 0; j < d; ++j) count *= per;
          for (std::size_t c = 0; c < count; ++c) {
            std::size_t rem = c;
            double wx = 1.0;
            x[q] = {0, 0, 0};
            for (int j = 0; j < d; ++j) {
              std::size_t r = rem % per;
              rem /= per;
              std::size_t pp = r / N.x.size(), ii = r % N.x.size();
              x[q][j] = -L + hx * (pp + 0.5 * (N.x[ii] + 1.0));
              wx *= 0.5 * hx * N.w[ii];
            }
            acc += wt * wx * rec(q + 1, s[q]);
          }
        }
      return acc;
    };
    return std::pow(box_.nu, k_ - static_cast<int>(fixed.size())) * rec(0, 0.0);
  }

 private:
  Value adaptive(const std::vector<std::pair<int, Event>>& fixed) const {
    if (static_cast<int>(fixed.size()) == k_) return {compensator(fixed, 1), true};
    int p = q_.start_panels;
    double a = compensator(fixed, p);
    while (2 * p <= q_.max_panels) {
      double b = compensator(fixed, 2 * p);
      if (std::abs(b - a) <= q_.tolerance) return {b, true};
      a = b;
      p *= 2;
    }
    return {a, false};
  }

  int k_;
  SimplexIntegrand g_;
  double t_;
  EnvConfig box_;
  QuadratureSpec q_;
  std::optional<Value> empty_term_;
};

inline double wiener_ito(const Environment& env, int k, const SimplexIntegrand& g, double t, QuadratureSpec q = {}) {
  WienerIto w(k, g, t, env.config(), q);
  return w(env).value;
}

// Relative residual of exp(beta N - t lambda nu r^d) against the chaos sum
// exp(-t lambda nu r^d) sum_j omega^{(j)}((lambda chi)^{⊗j}) for path i.
inline double chaos_identity_check(const Environment& env, const PathBundle& b, std::size_t i, double beta,
                                   const TubeSpec& spec, double t) {
  const double lam = lambda(beta), nu = env.config().nu;
  const double c = -t * lam * nu * spec.volume();
  const auto& times = b.times();
  const auto& ev = env.events();
  std::size_t m = env.count_until(t);
  std::vector<double> v(m, 0.0);
  std::size_t seen = 0;
  for (std::size_t e = 0; e < m; ++e) {
    auto it = std::lower_bound(times.begin(), times.end(), ev[e].time);
    if (it == times.end() || *it != ev[e].time) throw ConfigError("bundle grid misses an event time");
    if (sees(b.at(i, static_cast<std::size_t>(it - times.begin())), ev[e].pos, spec)) {
      v[e] = lam;
      ++seen;
    }
  }
  double lhs = std::exp(beta * static_cast<double>(seen) + c);
  auto es = elementary_symmetric(v, m);
  double sum = 0;
  for (double x : es) sum += x;
  double rhs = std::exp(c) * sum;
  return std::abs(lhs - rhs) / std::abs(lhs);
}

// Psi^k(s, x) = lambda^k P[all k space-time points seen].
inline Estimate psi_k(double beta, const TubeSpec& spec, const std::vector<double>& s, const std::vector<Point>& x,
                      std::size_t n_paths, Stream& rng) {
  const std::size_t k = s.size();
  Estimate e;
  e.n = n_paths;
  if (k == 0) {
    e.value = 1.0;
    e.method = Method::closed_form;
    return e;
  }
  if (!(s[0] > 0)) throw ConfigError("times must be positive");
  auto b = sample_free(s, n_paths, spec.d, rng);
  std::size_t all = 0;
  for (std::size_t i = 0; i < n_paths; ++i) {
    bool ok = true;
    for (std::size_t j = 0; j < k && ok; ++j) ok = sees(b.at(i, j), x[j], spec);
    all += ok;
  }
  double p = static_cast<double>(all) / n_paths, lk = std::pow(lambda(beta), static_cast<double>(k));
  e.value = lk * p;
  e.std_error = std::abs(lk) * std::sqrt(p * (1 - p) / n_paths);
  return e;
}

// Per-order L2 weights nu^k ||Psi^k||^2 = (lambda^2 nu)^k E[|V_t ∩ V~_t|^k]/k!
// from path pairs, with the (lambda^2 t nu r^d)^k/k! envelope.
struct ChaosWeights {
  std::vector<Estimate> weight;
  std::vector<double> envelope;
};

inline ChaosWeights chaos_weights(double beta, double nu, const TubeSpec& spec, double t, int K, std::size_t n_pairs,
                                  Stream& rng, std::size_t steps = 1000) {
  const double lam = lambda(beta), a = lam * lam * nu;
  std::vector<std::vector<double>> v(K + 1, std::vector<double>(n_pairs));
  const double dt = t / steps, sd = std::sqrt(dt);
  for (std::size_t p = 0; p < n_pairs; ++p) {
    Point x{0, 0, 0}, y{0, 0, 0};
    double prev = spec.volume(), I = 0;
    for (std::size_t k = 1; k <= steps; ++k) {
      for (int j = 0; j < spec.d; ++j) x[j] += sd * rng.normal(), y[j] += sd * rng.normal();
      double cur = overlap_volume(x, y, spec);
      I += 0.5 * dt * (prev + cur);
      prev = cur;
    }
    double term = 1;
    for (int k = 0; k <= K; ++k) {
      v[k][p] = term;
      term *= a * I / (k + 1);
    }
  }
  ChaosWeights w;
  double env = 1;
  for (int k = 0; k <= K; ++k) {
    w.weight.push_back(stats::mean_estimate(v[k]));
    w.envelope.push_back(env);
    env *= a * t * spec.volume() / (k + 1);
  }
  return w;
}

struct ContinuumMoment {
  double value = 1.0;            // sum_{k<=K} beta*^{2k} ||rho^k||^2
  double tail = 0.0;             // bound on the omitted orders
  std::vector<double> terms;     // per order, k = 0..K
  bool tail_flag = false;
};

// E[Z_{beta*}(T)^2] for the continuum polymer in d = 1. By Brownian scaling
// ||rho^k||^2(T) = a_k T^{k/2}, and integrating out the first gap gives
// a_k = a_{k-1} (4 pi)^{-1/2} int_0^1 u^{-1/2} (1-u)^{(k-1)/2} du,
// evaluated with tanh-sinh quadrature.
inline ContinuumMoment continuum_second_moment(double beta_star, double T, int K, double tolerance = 1e-6) {
  if (K < 0 || K > 8) throw ConfigError("truncation order must lie in 0..8");
  boost::math::quadrature::tanh_sinh<double> ts;
  const double c = 1.0 / (2.0 * std::sqrt(std::numbers::pi));
  auto step = [&](int k) {
    return c * ts.integrate([k](double u) { return std::pow(u, -0.5) * std::pow(1.0 - u, 0.5 * (k - 1)); }, 0.0, 1.0);
  };
  ContinuumMoment m;
  const double b2 = beta_star * beta_star;
  double a = 1.0;
  m.terms.push_back(1.0);
  for (int k = 1; k <= K; ++k) {
    a *= step(k);
    m.terms.push_back(std::pow(b2, k) * a * std::pow(T, 0.5 * k));
  }
  m.value = 0;
  for (double x : m.terms) m.value += x;
  if (b2 == 0.0) return m;
  double next = m.terms.back() * b2 * std::sqrt(T) * step(K + 1);
  double q = b2 * std::sqrt(T) * step(K + 2);
  if (q < 1.0) {
    m.tail = next / (1.0 - q);
  } else {
    m.tail = INFINITY;
  }
  m.tail_flag = !(m.tail <= tolerance);
  return m;
}

// Intermediate-disorder schedule: lambda(beta_t) chosen so that
// nu_t r_t^2 lambda(beta_t)^2 = beta*^2 t^{-1/2} exactly.
struct CrossoverSchedule {
  double beta_star = 0.5;
  std::function<double(double)> nu = [](double) { return 1.0; };
  std::function<double(double)> r = [](double) { return 1.0; };

  struct Rung {
    double t, beta, nu, r, gamma;
  };

  Rung at(double t) const {
    double n = nu(t), rr = r(t);
    if (!(n > 0 && rr > 0)) throw ConfigError("schedule must keep nu_t, r_t positive");
    double lam = std::copysign(std::abs(beta_star) * std::pow(t, -0.25) / (rr * std::sqrt(n)), beta_star);
    if (lam <= -1.0) throw ConfigError("schedule needs lambda(beta_t) > -1");
    double beta = std::log1p(lam);
    double l = lambda(beta);
    double lhs = n * rr * rr * l * l, rhs = beta_star * beta_star / std::sqrt(t);
    if (std::abs(lhs - rhs) > 1e-12 * std::max(rhs, 1e-300)) throw ConfigError("schedule violates the scaling relation");
    double gamma = beta_star == 0.0 ? 0.0 : n * rr * rr * rr * l * l * l / (beta_star * beta_star * beta_star);
    return {t, beta, n, rr, gamma};
  }
};

struct CrossoverRow {
  CrossoverSchedule::Rung rung;
  Estimate mean;
  Estimate var;
  double var_target = 0;
  double ks_prev = NAN;
  std::vector<double> samples;
};

struct CrossoverOptions {
  SmcOptions smc{128, 1};
  TubeOptions tube{};
  int K = 8;
};

// Per rung: replicas of W_t, each from two independent particle runs in the
// same environment. Their average is the sample; the product is unbiased for
// E[W_t^2 | omega], which gives the variance against the continuum target.
inline std::vector<CrossoverRow> crossover_experiment(const CrossoverSchedule& sch, const std::vector<double>& ladder,
                                                      std::size_t replicas, Stream& rng,
                                                      const CrossoverOptions& opt = {}) {
  for (std::size_t i = 1; i < ladder.size(); ++i)
    if (!(ladder[i] > ladder[i - 1])) throw ConfigError("t ladder must be increasing");
  auto cm = continuum_second_moment(sch.beta_star, 1.0, opt.K);
  std::vector<CrossoverRow> rows;
  for (std::size_t q = 0; q < ladder.size(); ++q) {
    CrossoverRow row;
    row.rung = sch.at(ladder[q]);
    const auto& R = row.rung;
    TubeSpec spec(1, R.r);
    EnvConfig cfg{1, R.nu, R.t, default_half_width(R.t, R.r), 0};
    const double rate = annealed_rate(R.beta, R.nu, spec) * R.t;
    std::vector<double> w(replicas), prod(replicas);
    Stream rs = rng.child(q);
    for (std::size_t i = 0; i < replicas; ++i) {
      if (sch.beta_star == 0.0) {
        w[i] = prod[i] = 1.0;
        continue;
      }
      Stream es = rs.child(3 * i), s1 = rs.child(3 * i + 1), s2 = rs.child(3 * i + 2);
      Environment env = sample_environment(cfg, es);
      TubeIndex idx(env, spec, R.t, opt.tube);
      double w1 = std::exp(smc_partition(idx, R.beta, opt.smc, s1).log_z - rate);
      double w2 = std::exp(smc_partition(idx, R.beta, opt.smc, s2).log_z - rate);
      w[i] = 0.5 * (w1 + w2);
      prod[i] = w1 * w2;
    }
    row.mean = stats::mean_estimate(w, Method::smc);
    row.var = stats::mean_estimate(prod, Method::smc);
    row.var.value -= 1.0;
    row.var_target = cm.value - 1.0;
    if (!rows.empty()) row.ks_prev = stats::ks_two_sample(rows.back().samples, w).statistic;
    row.samples = std::move(w);
    rows.push_back(std::move(row));
  }
  return rows;
}

// Smooth bump exp(-1/(1 - x^2)) on (-1, 1) and its second derivative.
inline double bump(double x) {
  double u = 1.0 - x * x;
  return u > 0 ? std::exp(-1.0 / u) : 0.0;
}
inline double bump_laplacian(double x) {
  double u = 1.0 - x * x;
  if (u <= 0) return 0.0;
  double f = std::exp(-1.0 / u);
  return f * (4.0 * x * x / (u * u * u * u) - 2.0 / (u * u) - 8.0 * x * x / (u * u * u));
}

struct SheCheck {
  Estimate lhs, rhs;
  double z = 0;
};

// Weak form of the renormalized point-to-point field against a test function:
// int W(t,x) phi(x) dx = phi(0) + 1/2 int_0^t int W Laplacian(phi) + noise term,
// all evaluated along the same free paths on the event grid plus `steps`
// uniform steps. The path-wise difference is a stochastic integral with mean 0.
inline SheCheck she_weak_form_check(const Environment& env, double beta, const TubeSpec& spec,
                                    const std::function<double(double)>& phi,
                                    const std::function<double(double)>& lap_phi, double support, double t,
                                    std::size_t n, Stream& rng, std::size_t steps = 1000) {
  if (spec.d != 1) throw ConfigError("weak-form check is implemented for d = 1");
  if (support > env.config().L) throw ConfigError("test function support exceeds the box");
  const double lam = lambda(beta), nu = env.config().nu, rate = lam * nu * spec.volume();
  auto times = make_time_grid(env, t, steps);
  const auto& ev = env.events();
  std::vector<int> event_at(times.size(), -1);
  for (std::size_t e = 0; e < env.count_until(t); ++e) {
    auto it = std::lower_bound(times.begin(), times.end(), ev[e].time);
    event_at[it - times.begin()] = static_cast<int>(e);
  }
  std::vector<double> L(n), R(n), D(n);
  const double rho = spec.rho, phi0 = phi(0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double x = 0, xi = 1.0, prev_t = 0.0;
    double lap_int = 0, drift_int = 0, jumps = 0;
    double prev_lap = lap_phi(0.0), prev_phi = phi0;
    for (std::size_t k = 1; k < times.size(); ++k) {
      double h = times[k] - prev_t;
      x += std::sqrt(h) * rng.normal();
      double decay = std::exp(-rate * h);
      double xi_left = xi * decay;  // value just before times[k]
      double cl = lap_phi(x), cp = phi(x);
      lap_int += 0.5 * h * (xi * prev_lap + xi_left * cl);
      drift_int += 0.5 * h * (xi * prev_phi + xi_left * cp);
      xi = xi_left;
      int e = event_at[k];
      if (e >= 0 && std::abs(x - ev[e].pos[0]) <= rho) {
        jumps += xi * cp;
        xi *= std::exp(beta);
      }
      prev_lap = cl;
      prev_phi = cp;
      prev_t = times[k];
    }
    L[i] = xi * prev_phi;
    R[i] = phi0 + 0.5 * lap_int + lam * jumps - rate * drift_int;
    D[i] = L[i] - R[i];
  }
  SheCheck c;
  c.lhs = stats::mean_estimate(L);
  c.rhs = stats::mean_estimate(R, Method::quadrature);
  Estimate d = stats::mean_estimate(D);
  c.z = d.std_error > 0 ? d.value / d.std_error : 0.0;
  return c;
}

}  // namespace polylab
