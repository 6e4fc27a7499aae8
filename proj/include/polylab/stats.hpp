#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include <boost/math/distributions/binomial.hpp>
#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/poisson.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "polylab/core.hpp"

namespace polylab::stats {

inline double mean(const std::vector<double>& x) {
  if (x.empty()) return 0.0;
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

// Unbiased sample variance.
inline double variance(const std::vector<double>& x) {
  if (x.size() < 2) return 0.0;
  double m = mean(x), s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

inline Estimate mean_estimate(const std::vector<double>& x, Method m = Method::direct) {
  Estimate e;
  e.value = mean(x);
  e.n = x.size();
  e.std_error = x.size() > 1 ? std::sqrt(variance(x) / static_cast<double>(x.size())) : 0.0;
  e.method = m;
  return e;
}

// Sample covariance of paired data.
inline double covariance(const std::vector<double>& x, const std::vector<double>& y) {
  std::size_t n = std::min(x.size(), y.size());
  if (n < 2) return 0.0;
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) mx += x[i], my += y[i];
  mx /= n;
  my /= n;
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += (x[i] - mx) * (y[i] - my);
  return s / static_cast<double>(n - 1);
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Asymptotic Kolmogorov survival function with the usual finite-n correction.
inline double kolmogorov_pvalue(double dstat, double n_eff) {
  double sn = std::sqrt(n_eff);
  double lam = (sn + 0.12 + 0.11 / sn) * dstat;
  if (lam < 0.2) return 1.0;
  double sum = 0.0;
  for (int k = 1; k <= 100; ++k) {
    double term = std::exp(-2.0 * k * k * lam * lam);
    sum += (k % 2 ? 2.0 : -2.0) * term;
    if (term < 1e-16) break;
  }
  return std::clamp(sum, 0.0, 1.0);
}

struct KsResult {
  double statistic = 0.0;
  double pvalue = 1.0;
};

// One-sample KS against a continuous cdf; values above `censor` are treated as
// right-censored, so the supremum runs over [0, censor] only.
inline KsResult ks_one_sample(std::vector<double> x, const std::function<double(double)>& cdf,
                              double censor = INFINITY) {
  std::sort(x.begin(), x.end());
  double n = static_cast<double>(x.size());
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] > censor) {
      double f = cdf(censor);
      d = std::max(d, std::abs(i / n - f));
      break;
    }
    double f = cdf(x[i]);
    d = std::max({d, std::abs((i + 1) / n - f), std::abs(i / n - f)});
  }
  return {d, kolmogorov_pvalue(d, n)};
}

inline KsResult ks_two_sample(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double na = a.size(), nb = b.size(), d = 0.0;
  while (i < a.size() && j < b.size()) {
    double v = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= v) ++i;
    while (j < b.size() && b[j] <= v) ++j;
    d = std::max(d, std::abs(i / na - j / nb));
  }
  return {d, kolmogorov_pvalue(d, na * nb / (na + nb))};
}

struct ChiSquareResult {
  double statistic = 0.0;
  int dof = 0;
  double pvalue = 1.0;
};

// Goodness of fit of integer counts against Poisson(mean); tail classes are
// pooled until every class expects at least five observations.
inline ChiSquareResult chi_square_poisson(const std::vector<std::uint64_t>& counts, double mean_count) {
  boost::math::poisson_distribution<double> pd(mean_count);
  double n = static_cast<double>(counts.size());
  std::uint64_t lo = 0, hi = 0;
  while (boost::math::cdf(pd, static_cast<double>(lo)) * n < 5.0) ++lo;
  hi = lo;
  while (boost::math::cdf(boost::math::complement(pd, static_cast<double>(hi))) * n >= 5.0) ++hi;
  // classes: (<= lo), lo+1 .. hi-1 singletons, (>= hi)
  std::vector<double> expected, observed;
  expected.push_back(boost::math::cdf(pd, static_cast<double>(lo)) * n);
  for (std::uint64_t k = lo + 1; k < hi; ++k) expected.push_back(boost::math::pdf(pd, static_cast<double>(k)) * n);
  expected.push_back(boost::math::cdf(boost::math::complement(pd, static_cast<double>(hi - 1))) * n);
  observed.assign(expected.size(), 0.0);
  for (auto c : counts) {
    std::size_t cls = c <= lo ? 0 : (c >= hi ? expected.size() - 1 : static_cast<std::size_t>(c - lo));
    observed[cls] += 1.0;
  }
  ChiSquareResult r;
  for (std::size_t k = 0; k < expected.size(); ++k)
    r.statistic += (observed[k] - expected[k]) * (observed[k] - expected[k]) / expected[k];
  r.dof = static_cast<int>(expected.size()) - 1;
  if (r.dof < 1) return r;
  boost::math::chi_squared_distribution<double> chi(r.dof);
  r.pvalue = boost::math::cdf(boost::math::complement(chi, r.statistic));
  return r;
}

// Exact (Clopper-Pearson) two-sided interval for a binomial proportion.
inline std::pair<double, double> clopper_pearson(std::uint64_t k, std::uint64_t n, double confidence) {
  using B = boost::math::binomial_distribution<double>;
  double alpha = (1.0 - confidence) / 2.0;
  double lo = B::find_lower_bound_on_p(static_cast<double>(n), static_cast<double>(k), alpha);
  double hi = B::find_upper_bound_on_p(static_cast<double>(n), static_cast<double>(k), alpha);
  return {lo, hi};
}

struct LinearFit {
  double intercept = 0.0;
  double slope = 0.0;
  double slope_se = 0.0;
  double dof = 0.0;
};

// Weighted least squares y = a + b x with known per-point standard errors;
// with equal unit errors it is ordinary least squares with residual scaling.
inline LinearFit linear_fit(const std::vector<double>& x, const std::vector<double>& y,
                            const std::vector<double>& sy = {}) {
  std::size_t n = x.size();
  if (n < 2 || y.size() != n) throw NumericError("degenerate regression");
  bool weighted = sy.size() == n;
  double sw = 0, sx = 0, syy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double w = weighted ? 1.0 / (sy[i] * sy[i]) : 1.0;
    sw += w;
    sx += w * x[i];
    syy += w * y[i];
    sxx += w * x[i] * x[i];
    sxy += w * x[i] * y[i];
  }
  double det = sw * sxx - sx * sx;
  if (!(det > 0)) throw NumericError("degenerate regression");
  LinearFit f;
  f.slope = (sw * sxy - sx * syy) / det;
  f.intercept = (syy - f.slope * sx) / sw;
  f.dof = static_cast<double>(n) - 2.0;
  if (weighted) {
    f.slope_se = std::sqrt(sw / det);
  } else {
    double rss = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double r = y[i] - f.intercept - f.slope * x[i];
      rss += r * r;
    }
    f.slope_se = n > 2 ? std::sqrt(rss / (n - 2) * sw / det) : 0.0;
  }
  return f;
}

// Two-sided Student quantile used for regression bands.
inline double t_quantile(double p, double dof) {
  if (dof < 1) return INFINITY;
  boost::math::students_t_distribution<double> st(dof);
  return boost::math::quantile(st, p);
}

}  // namespace polylab::stats
