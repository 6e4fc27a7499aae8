#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace polylab {

// Spatial point; coordinates beyond the working dimension stay zero.
using Point = std::array<double, 3>;

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline double dist2(const Point& a, const Point& b, int d) {
  double s = 0.0;
  for (int j = 0; j < d; ++j) {
    double u = a[j] - b[j];
    s += u * u;
  }
  return s;
}

inline double norm2(const Point& a, int d) {
  double s = 0.0;
  for (int j = 0; j < d; ++j) s += a[j] * a[j];
  return s;
}

inline double dot(const Point& a, const Point& b, int d) {
  double s = 0.0;
  for (int j = 0; j < d; ++j) s += a[j] * b[j];
  return s;
}

// Environment coordinates live on a dyadic lattice of pitch 2^-36. Sums and
// differences of lattice values below 2^16 in magnitude are then exact in
// double precision, which makes every transform exactly invertible.
inline constexpr int kLatticeBits = 36;
inline constexpr double kLatticeLimit = 65536.0;

inline double lattice(double v) {
  return std::ldexp(std::nearbyint(std::ldexp(v, kLatticeBits)), -kLatticeBits);
}

inline Point lattice(const Point& p) { return {lattice(p[0]), lattice(p[1]), lattice(p[2])}; }

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Random stream identified by (seed, key path). Children derived with
// child(k) are independent of the order in which they are created.
class Stream {
 public:
  explicit Stream(std::uint64_t seed, std::uint64_t key = 0) : seed_(seed), key_(key) {
    std::uint64_t a = splitmix64(seed), b = splitmix64(key ^ 0x5851f42d4c957f2dULL);
    std::uint64_t c = splitmix64(a ^ splitmix64(b));
    std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                      static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32),
                      static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(c >> 32)};
    engine_.seed(seq);
  }

  Stream child(std::uint64_t k) const { return Stream(seed_, splitmix64(key_ * 0x2545f4914f6cdd1dULL + k + 1)); }

  std::uint64_t seed() const { return seed_; }
  double normal() { return normal_(engine_); }
  // Uniform on [0, 1).
  double uniform() { return uniform_(engine_); }
  std::uint64_t poisson(double mean) {
    if (mean <= 0.0) return 0;
    std::poisson_distribution<std::uint64_t> p(mean);
    return p(engine_);
  }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

enum class Method { direct, snis, closed_form, quadrature, smc };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::direct: return "direct";
    case Method::snis: return "snis";
    case Method::closed_form: return "closed-form";
    case Method::quadrature: return "quadrature";
    case Method::smc: return "smc";
  }
  return "?";
}

struct Estimate {
  double value = 0.0;
  double std_error = 0.0;
  std::size_t n = 0;
  Method method = Method::direct;
  double ess = 0.0;           // effective sample size, when meaningful
  std::string flags;          // warnings, comma separated

  void flag(const std::string& f) {
    if (!flags.empty()) flags += ",";
    flags += f;
  }
  bool has_flag(const std::string& f) const { return flags.find(f) != std::string::npos; }
};

inline double z_score(const Estimate& a, double target) {
  if (a.std_error == 0.0) return a.value == target ? 0.0 : INFINITY;
  return (a.value - target) / a.std_error;
}

inline double z_score(const Estimate& a, const Estimate& b) {
  double se = std::hypot(a.std_error, b.std_error);
  if (se == 0.0) return a.value == b.value ? 0.0 : INFINITY;
  return (a.value - b.value) / se;
}

// Stable log(mean(exp(x))).
inline double log_mean_exp(const std::vector<double>& x) {
  if (x.empty()) throw NumericError("log_mean_exp of empty sample");
  double m = -INFINITY;
  for (double v : x) m = std::max(m, v);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s / static_cast<double>(x.size()));
}

}  // namespace polylab
