#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "polylab/environment.hpp"

using namespace polylab;

namespace {
EnvConfig box(int d = 1, double nu = 1.0, double t = 2.0, double L = 3.0) { return EnvConfig{d, nu, t, L, 0}; }
}  // namespace

TEST(Environment, RejectsBadConfig) {
  Stream s(1);
  EXPECT_THROW(sample_environment(EnvConfig{0, 1, 1, 1, 0}, s), ConfigError);
  EXPECT_THROW(sample_environment(EnvConfig{1, -1, 1, 1, 0}, s), ConfigError);
  EXPECT_THROW(sample_environment(EnvConfig{1, 1, 0, 1, 0}, s), ConfigError);
  EXPECT_THROW(sample_environment(EnvConfig{1, 1, 1, 0, 0}, s), ConfigError);
}

TEST(Environment, EventsSortedInsideBox) {
  Stream s(2);
  auto env = sample_environment(box(2, 3.0), s);
  ASSERT_GT(env.size(), 0u);
  for (std::size_t i = 0; i < env.size(); ++i) {
    const auto& e = env.events()[i];
    EXPECT_GT(e.time, 0.0);
    EXPECT_LE(e.time, 2.0);
    EXPECT_LE(std::abs(e.pos[0]), 3.0);
    EXPECT_LE(std::abs(e.pos[1]), 3.0);
    if (i) EXPECT_FALSE(event_less(e, env.events()[i - 1]));
  }
}

TEST(Environment, SameSeedSameEnvironment) {
  EnvConfig c = box();
  c.seed = 77;
  auto a = sample_environment(c), b = sample_environment(c);
  EXPECT_EQ(a.events(), b.events());
}

TEST(Environment, CountsArePoisson) {
  EnvConfig c = box(1, 0.7, 1.5, 2.0);
  Stream root(3);
  std::vector<std::uint64_t> n(5000);
  for (std::size_t i = 0; i < n.size(); ++i) {
    Stream s = root.child(i);
    n[i] = sample_environment(c, s).size();
  }
  EXPECT_GT(stats::chi_square_poisson(n, c.mean_count()).pvalue, 0.001);
}

TEST(Environment, ShearRoundTripIsBitExact) {
  Stream s(4);
  auto env = sample_environment(box(2, 2.0), s);
  Point xi{0.37, -1.21, 0};
  auto there = shear(env, linear_drift(xi));
  auto back = shear(there, linear_drift(Point{-xi[0], -xi[1], 0}));
  EXPECT_EQ(back.events(), env.events());
  EXPECT_EQ(back.transform_log().size(), 2u);
}

TEST(Environment, ShiftComposesAndDropsPast) {
  Stream s(5);
  auto env = sample_environment(box(1, 5.0, 4.0), s);
  auto a = shift(shift(env, 1.0, {0.5, 0, 0}), 0.5, {0.25, 0, 0});
  auto b = shift(env, 1.5, {0.75, 0, 0});
  EXPECT_EQ(a.events(), b.events());
  for (const auto& e : b.events()) EXPECT_GT(e.time, 0.0);
  EXPECT_EQ(b.size(), env.size() - env.count_until(1.5));
}

TEST(Environment, ReverseIsAnInvolution) {
  Stream s(6);
  auto env = sample_environment(box(1, 3.0, 2.0), s);
  auto twice = reverse(reverse(env, 2.0, {0.3, 0, 0}), 2.0, {-0.3, 0, 0});
  EXPECT_EQ(twice.events(), env.events());
}

TEST(Environment, SuperposeAddsIntensities) {
  Stream s(7);
  auto a = sample_environment(box(1, 1.0), s), b = sample_environment(box(1, 2.0), s);
  auto c = superpose(a, b);
  EXPECT_EQ(c.size(), a.size() + b.size());
  EXPECT_DOUBLE_EQ(c.config().nu, 3.0);
  auto other = sample_environment(box(1, 1.0, 3.0), s);
  EXPECT_THROW(superpose(a, other), ConfigError);
}

TEST(Environment, WithPointAddsOneEvent) {
  Stream s(8);
  auto env = sample_environment(box(), s);
  auto more = env.with_point(1.0, {0.1, 0, 0});
  EXPECT_EQ(more.size(), env.size() + 1);
}

TEST(Environment, SerializationRoundTrip) {
  Stream s(9);
  EnvConfig c = box(3, 0.5, 1.0, 2.0);
  c.seed = 12345;
  auto env = sample_environment(c, s);
  std::stringstream ss;
  write_environment(ss, env);
  auto back = read_environment(ss);
  EXPECT_EQ(back.events(), env.events());
  EXPECT_EQ(back.config().seed, 12345u);
  std::stringstream bad("# nonsense\n");
  EXPECT_THROW(read_environment(bad), ConfigError);
}

TEST(Environment, TiltRejectsUnderstatedBound) {
  Stream s(10);
  EXPECT_THROW(tilted_sample(box(), [](double, const Point&) { return 1.0; }, 0.5, s), ConfigError);
}

// Thinning gives intensity e^f nu: the count mean is nu * int e^f.
TEST(Environment, TiltedCountMean) {
  EnvConfig c = box(1, 1.0, 1.0, 1.0);
  auto f = [](double s, const Point& x) { return 0.5 * x[0] - 0.3 * s; };
  double exact = c.nu * ((1.0 - std::exp(-0.3)) / 0.3) * (std::exp(0.5) - std::exp(-0.5)) / 0.5;
  Stream root(11);
  std::vector<double> n(20000);
  for (std::size_t i = 0; i < n.size(); ++i) {
    Stream s = root.child(i);
    n[i] = static_cast<double>(tilted_sample(c, f, 0.5, s).env.size());
  }
  auto e = stats::mean_estimate(n);
  EXPECT_LT(std::abs(z_score(e, exact)), 4.0);
}

TEST(Environment, MeckeHoldsForCountDependentIntegrand) {
  EnvConfig c = box(1, 1.5, 1.0, 1.0);
  MeckeIntegrand h = [](double s, const Point& x, const Environment& env) {
    return (1.0 + x[0] * x[0]) * static_cast<double>(env.count_until(s));
  };
  Stream s(12);
  auto r = mecke_check(c, h, 20000, s, 16);
  EXPECT_LT(std::abs(r.z), 4.0);
  EXPECT_THROW(mecke_check(c, h, 10, s), ConfigError);
}
