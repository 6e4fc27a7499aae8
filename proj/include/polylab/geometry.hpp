#pragma once

#include <cmath>
#include <numbers>

#include "polylab/core.hpp"

namespace polylab {

// Volume of the unit ball in dimension d.
inline double unit_ball_volume(int d) {
  switch (d) {
    case 1: return 2.0;
    case 2: return std::numbers::pi;
    case 3: return 4.0 * std::numbers::pi / 3.0;
  }
  throw ConfigError("unsupported dimension " + std::to_string(d));
}

inline double ball_radius(int d, double r) {
  if (!(r > 0)) throw ConfigError("tube parameter r must be positive");
  return std::pow(unit_ball_volume(d), -1.0 / d) * r;
}

inline double lambda(double beta) { return std::expm1(beta); }

// Tube around a path: closed balls of volume r^d.
struct TubeSpec {
  int d = 1;
  double r = 1.0;
  double rho = 0.5;  // ball radius

  TubeSpec() = default;
  TubeSpec(int dim, double r_) : d(dim), r(r_), rho(ball_radius(dim, r_)) {}

  double volume() const { return std::pow(r, d); }
};

inline bool sees(const Point& path_position, const Point& event_position, const TubeSpec& spec) {
  return dist2(path_position, event_position, spec.d) <= spec.rho * spec.rho;
}

// |U(x) ∩ U(y)| as a function of the centre distance s.
inline double overlap_at_distance(double s, const TubeSpec& spec) {
  const double a = spec.rho;
  if (s >= 2.0 * a) return 0.0;
  if (s <= 0.0) return spec.volume();
  switch (spec.d) {
    case 1: return 2.0 * a - s;
    case 2: return 2.0 * a * a * std::acos(s / (2.0 * a)) - 0.5 * s * std::sqrt(4.0 * a * a - s * s);
    case 3: return std::numbers::pi * (4.0 * a + s) * (2.0 * a - s) * (2.0 * a - s) / 12.0;
  }
  throw ConfigError("unsupported dimension");
}

inline double overlap_volume(const Point& x, const Point& y, const TubeSpec& spec) {
  return overlap_at_distance(std::sqrt(dist2(x, y, spec.d)), spec);
}

}  // namespace polylab
