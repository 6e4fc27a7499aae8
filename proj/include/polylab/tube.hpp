#pragma once

// Sparse event-driven path sampling. A path is drawn on a coarse skeleton of
// time slabs; inside a slab the Brownian bridge between skeleton points is
// only evaluated at the times of events that could possibly be seen. An event
// is skipped when it lies more than rho + K sigma from the chord in some
// coordinate, where sigma bounds the bridge standard deviation in the slab;
// the probability that a skipped event would have been seen is below
// 2 d Phibar(K), about 1e-17 for the default K.

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "polylab/core.hpp"
#include "polylab/environment.hpp"
#include "polylab/geometry.hpp"

namespace polylab {

struct TubeOptions {
  double slab = 0.25;
  double cutoff = 8.5;
};

class TubeIndex {
 public:
  struct Item {
    double time;
    Point pos;
  };

  TubeIndex(const Environment& env, const TubeSpec& spec, double horizon, TubeOptions opt = {})
      : spec_(spec), horizon_(horizon), opt_(opt) {
    if (!(horizon > 0)) throw ConfigError("horizon must be positive");
    if (!(opt.slab > 0)) throw ConfigError("slab width must be positive");
    d_ = spec.d;
    n_slabs_ = static_cast<std::size_t>(std::ceil(horizon / opt.slab - 1e-12));
    if (n_slabs_ == 0) n_slabs_ = 1;
    reach_ = spec.rho + opt.cutoff * std::sqrt(opt.slab) / 2.0;
    cell_ = reach_;
    std::size_t m = env.count_until(horizon);
    const auto& ev = env.events();
    for (int j = 0; j < 3; ++j) lo_[j] = 0.0, nc_[j] = 1;
    for (int j = 0; j < d_; ++j) {
      double a = INFINITY, b = -INFINITY;
      for (std::size_t e = 0; e < m; ++e) a = std::min(a, ev[e].pos[j]), b = std::max(b, ev[e].pos[j]);
      if (m == 0) a = b = 0.0;
      lo_[j] = a;
      nc_[j] = static_cast<std::size_t>(std::floor((b - a) / cell_)) + 1;
    }
    cells_ = nc_[0] * nc_[1] * nc_[2];
    offsets_.assign(n_slabs_ * cells_ + 1, 0);
    std::vector<std::size_t> key(m);
    for (std::size_t e = 0; e < m; ++e) {
      key[e] = slab_of(ev[e].time) * cells_ + cell_of(ev[e].pos);
      ++offsets_[key[e] + 1];
    }
    for (std::size_t k = 1; k < offsets_.size(); ++k) offsets_[k] += offsets_[k - 1];
    items_.resize(m);
    std::vector<std::size_t> fill(offsets_.begin(), offsets_.end() - 1);
    for (std::size_t e = 0; e < m; ++e) items_[fill[key[e]]++] = {ev[e].time, ev[e].pos};
  }

  std::size_t n_slabs() const { return n_slabs_; }
  double slab_start(std::size_t k) const { return static_cast<double>(k) * opt_.slab; }
  double slab_end(std::size_t k) const {
    return k + 1 == n_slabs_ ? horizon_ : std::min(horizon_, static_cast<double>(k + 1) * opt_.slab);
  }
  double horizon() const { return horizon_; }
  const TubeSpec& spec() const { return spec_; }
  const TubeOptions& options() const { return opt_; }

  // Calls f(item) for every event of slab k in cells meeting the box [lo, hi].
  template <class F>
  void for_cells(std::size_t k, const Point& lo, const Point& hi, F&& f) const {
    std::size_t a[3] = {0, 0, 0}, b[3] = {0, 0, 0};
    for (int j = 0; j < d_; ++j) {
      double ca = std::floor((lo[j] - lo_[j]) / cell_), cb = std::floor((hi[j] - lo_[j]) / cell_);
      if (cb < 0 || ca >= static_cast<double>(nc_[j])) return;
      a[j] = static_cast<std::size_t>(std::max(0.0, ca));
      b[j] = static_cast<std::size_t>(std::min(static_cast<double>(nc_[j] - 1), cb));
    }
    const std::size_t base = k * cells_;
    for (std::size_t z = a[2]; z <= b[2]; ++z)
      for (std::size_t y = a[1]; y <= b[1]; ++y) {
        std::size_t row = base + (z * nc_[1] + y) * nc_[0];
        std::size_t from = offsets_[row + a[0]], to = offsets_[row + b[0] + 1];
        for (std::size_t q = from; q < to; ++q) f(items_[q]);
      }
  }

  // Advances one path across slab k from X0 (at the slab start) to X1 (at the
  // slab end), sampling the bridge at candidate event times. Returns hits and
  // calls on_hit(time) for each.
  template <class OnHit>
  std::uint32_t cross_slab(std::size_t k, const Point& X0, const Point& X1, Stream& rng,
                           std::vector<const Item*>& scratch, OnHit&& on_hit) const {
    const double s0 = slab_start(k), s1 = slab_end(k);
    const double sig = std::sqrt(s1 - s0) / 2.0;
    const double w = spec_.rho + opt_.cutoff * sig;
    Point lo{0, 0, 0}, hi{0, 0, 0};
    for (int j = 0; j < d_; ++j) {
      lo[j] = std::min(X0[j], X1[j]) - w;
      hi[j] = std::max(X0[j], X1[j]) + w;
    }
    scratch.clear();
    const double inv = 1.0 / (s1 - s0);
    for_cells(k, lo, hi, [&](const Item& it) {
      double f = (it.time - s0) * inv;
      for (int j = 0; j < d_; ++j)
        if (std::abs(it.pos[j] - (X0[j] + (X1[j] - X0[j]) * f)) > w) return;
      scratch.push_back(&it);
    });
    if (scratch.empty()) return 0;
    if (scratch.size() > 1)
      std::sort(scratch.begin(), scratch.end(), [](const Item* a, const Item* b) { return a->time < b->time; });
    const double rho2 = spec_.rho * spec_.rho;
    std::uint32_t hits = 0;
    double sa = s0;
    Point Xa = X0;
    for (const Item* it : scratch) {
      Point B;
      if (it->time >= s1) {
        B = X1;
      } else {
        double g = (it->time - sa) / (s1 - sa);
        double sd = std::sqrt((it->time - sa) * (s1 - it->time) / (s1 - sa));
        B = Xa;
        for (int j = 0; j < d_; ++j) B[j] = Xa[j] + (X1[j] - Xa[j]) * g + sd * rng.normal();
      }
      if (dist2(B, it->pos, d_) <= rho2) {
        ++hits;
        on_hit(it->time);
      }
      sa = it->time;
      Xa = B;
    }
    return hits;
  }

  // Skeleton step from (s0, X0) to s1, free or pinned at (horizon, pin).
  Point step(const Point& X0, double s0, double s1, Stream& rng, const std::optional<Point>& pin) const {
    Point X1 = X0;
    if (!pin) {
      double sd = std::sqrt(s1 - s0);
      for (int j = 0; j < d_; ++j) X1[j] = X0[j] + sd * rng.normal();
      return X1;
    }
    if (s1 >= horizon_) {
      for (int j = 0; j < d_; ++j) X1[j] = (*pin)[j];
      return X1;
    }
    double g = (s1 - s0) / (horizon_ - s0);
    double sd = std::sqrt((s1 - s0) * (horizon_ - s1) / (horizon_ - s0));
    for (int j = 0; j < d_; ++j) X1[j] = X0[j] + ((*pin)[j] - X0[j]) * g + sd * rng.normal();
    return X1;
  }

 private:
  std::size_t slab_of(double s) const {
    std::size_t k = static_cast<std::size_t>(std::ceil(s / opt_.slab)) - (s > 0 ? 1 : 0);
    if (k >= n_slabs_) k = n_slabs_ - 1;
    while (k > 0 && s <= slab_start(k)) --k;
    while (k + 1 < n_slabs_ && s > slab_end(k)) ++k;
    return k;
  }
  std::size_t cell_of(const Point& p) const {
    std::size_t c[3] = {0, 0, 0};
    for (int j = 0; j < d_; ++j) {
      double v = std::floor((p[j] - lo_[j]) / cell_);
      c[j] = static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(nc_[j] - 1)));
    }
    return (c[2] * nc_[1] + c[1]) * nc_[0] + c[0];
  }

  TubeSpec spec_;
  double horizon_;
  TubeOptions opt_;
  int d_ = 1;
  std::size_t n_slabs_ = 1;
  double reach_ = 0, cell_ = 1;
  double lo_[3];
  std::size_t nc_[3];
  std::size_t cells_ = 1;
  std::vector<std::size_t> offsets_;
  std::vector<Item> items_;
};

struct SparseSample {
  std::vector<std::uint32_t> hits;              // omega(V_t(B^i))
  std::vector<Point> endpoint;                  // B^i_t
  std::vector<std::vector<double>> hit_times;   // filled when requested
};

// Plain Monte Carlo paths against the index; hits are independent of beta,
// so one sample serves a whole beta grid.
inline SparseSample sparse_paths(const TubeIndex& idx, std::size_t n, Stream& rng, bool record_times = false,
                                 const std::optional<Point>& pin = std::nullopt) {
  SparseSample out;
  out.hits.assign(n, 0);
  out.endpoint.resize(n);
  if (record_times) out.hit_times.resize(n);
  std::vector<const TubeIndex::Item*> scratch;
  for (std::size_t i = 0; i < n; ++i) {
    Point X{0, 0, 0};
    std::uint32_t h = 0;
    for (std::size_t k = 0; k < idx.n_slabs(); ++k) {
      Point X1 = idx.step(X, idx.slab_start(k), idx.slab_end(k), rng, pin);
      if (record_times)
        h += idx.cross_slab(k, X, X1, rng, scratch, [&](double s) { out.hit_times[i].push_back(s); });
      else
        h += idx.cross_slab(k, X, X1, rng, scratch, [](double) {});
      X = X1;
    }
    out.hits[i] = h;
    out.endpoint[i] = X;
  }
  return out;
}

struct SmcOptions {
  std::size_t particles = 1000;
  std::size_t resample_every = 1;  // slabs between resampling steps
  bool keep_paths = false;         // record particle ancestry at slab ends
};

struct SmcResult {
  double log_z = 0.0;                // log of the unbiased estimate of Z_t
  std::vector<Point> endpoint;       // final particles
  std::vector<double> weight;        // normalized final weights
  double min_ess_fraction = 1.0;
  std::size_t resamples = 0;
  std::vector<std::vector<Point>> paths;  // per particle, positions at 0 and each slab end
};

// Particle estimate of Z_t = P[exp(beta omega(V_t))] with systematic
// resampling on a fixed schedule; the product of mean incremental weights is
// unbiased for Z_t.
inline SmcResult smc_partition(const TubeIndex& idx, double beta, const SmcOptions& opt, Stream& rng,
                               const std::optional<Point>& pin = std::nullopt) {
  const std::size_t n = opt.particles;
  if (n == 0) throw ConfigError("need at least one particle");
  std::vector<Point> X(n, Point{0, 0, 0}), Y(n);
  std::vector<double> logw(n, 0.0), cum(n);
  std::vector<const TubeIndex::Item*> scratch;
  SmcResult r;
  std::vector<std::vector<Point>> hist, hist2;
  if (opt.keep_paths) {
    hist.assign(n, std::vector<Point>{Point{0, 0, 0}});
    for (auto& h : hist) h.reserve(idx.n_slabs() + 1);
  }
  const std::size_t every = std::max<std::size_t>(1, opt.resample_every);
  for (std::size_t k = 0; k < idx.n_slabs(); ++k) {
    const double s0 = idx.slab_start(k), s1 = idx.slab_end(k);
    for (std::size_t i = 0; i < n; ++i) {
      Point X1 = idx.step(X[i], s0, s1, rng, pin);
      std::uint32_t h = idx.cross_slab(k, X[i], X1, rng, scratch, [](double) {});
      logw[i] += beta * h;
      X[i] = X1;
      if (opt.keep_paths) hist[i].push_back(X1);
    }
    const bool last = k + 1 == idx.n_slabs();
    if (!last && (k + 1) % every != 0) continue;
    double mx = *std::max_element(logw.begin(), logw.end());
    double mn = *std::min_element(logw.begin(), logw.end());
    if (mx == mn && !last) {
      r.log_z += mx;
      std::fill(logw.begin(), logw.end(), 0.0);
      continue;
    }
    double s = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double w = std::exp(logw[i] - mx);
      s += w;
      s2 += w * w;
      cum[i] = s;
    }
    r.min_ess_fraction = std::min(r.min_ess_fraction, s * s / s2 / static_cast<double>(n));
    r.log_z += mx + std::log(s / static_cast<double>(n));
    if (last) {
      r.weight.resize(n);
      for (std::size_t i = 0; i < n; ++i) r.weight[i] = std::exp(logw[i] - mx) / s;
      break;
    }
    double u = rng.uniform() / static_cast<double>(n);
    std::size_t src = 0;
    for (std::size_t j = 0; j < n; ++j) {
      double target = (u + static_cast<double>(j) / static_cast<double>(n)) * s;
      while (src + 1 < n && cum[src] < target) ++src;
      Y[j] = X[src];
      if (opt.keep_paths) {
        hist2.resize(n);
        hist2[j] = hist[src];
      }
    }
    X.swap(Y);
    if (opt.keep_paths) hist.swap(hist2);
    std::fill(logw.begin(), logw.end(), 0.0);
    ++r.resamples;
  }
  if (r.weight.empty()) r.weight.assign(n, 1.0 / static_cast<double>(n));
  r.endpoint = X;
  r.paths = std::move(hist);
  return r;
}

}  // namespace polylab
