#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "polylab/chaos.hpp"

using namespace polylab;

namespace {

SimplexIntegrand constant(int k, double c = 1.0) {
  return {k, [c](std::span<const double>, std::span<const Point>) { return c; }};
}

Environment small_env(std::uint64_t seed, double nu = 2.0, double t = 1.0, double L = 1.0) {
  Stream s(seed);
  return sample_environment(EnvConfig{1, nu, t, L, 0}, s);
}

double Phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace

TEST(Chaos, FactorialSumCounts) {
  std::vector<Event> ev{{0.2, {0.1, 0, 0}}, {0.5, {-0.3, 0, 0}}, {0.9, {0.0, 0, 0}}};
  Environment env(EnvConfig{1, 1.0, 1.0, 1.0, 0}, ev);
  EXPECT_EQ(factorial_sum(env, 2, constant(2), 1.0), 3.0);
  EXPECT_EQ(factorial_sum(env, 3, constant(3), 1.0), 1.0);
  EXPECT_EQ(factorial_sum(env, 4, constant(4), 1.0), 0.0);
  EXPECT_EQ(factorial_sum(env, 0, constant(0, 2.5), 1.0), 2.5);
  SimplexIntegrand pos{1, [](std::span<const double>, std::span<const Point> x) { return x[0][0]; }};
  EXPECT_NEAR(factorial_sum(env, 1, pos, 1.0), -0.2, 1e-15);
  // only pairs in time order
  SimplexIntegrand order{2, [](std::span<const double> s, std::span<const Point>) { return s[0] < s[1] ? 1.0 : 100.0; }};
  EXPECT_EQ(factorial_sum(env, 2, order, 1.0), 3.0);
  EXPECT_EQ(factorial_sum(env, 2, constant(2), 0.6), 1.0);
}

TEST(Chaos, ElementarySymmetric) {
  auto e = elementary_symmetric({1.0, 2.0, 3.0}, 3);
  EXPECT_EQ(e[0], 1.0);
  EXPECT_EQ(e[1], 6.0);
  EXPECT_EQ(e[2], 11.0);
  EXPECT_EQ(e[3], 6.0);
}

// For g = 1 the compensated integrals are Charlier polynomials of the count.
TEST(Chaos, WienerItoOfConstantIsCharlier) {
  for (std::uint64_t k = 0; k < 20; ++k) {
    Environment env = small_env(k);
    const double n = env.size(), m = 2.0 * 1.0 * 2.0;  // nu t (2L)
    EXPECT_NEAR(wiener_ito(env, 1, constant(1), 1.0), n - m, 1e-9);
    EXPECT_NEAR(wiener_ito(env, 2, constant(2), 1.0), n * (n - 1) / 2 - m * n + m * m / 2, 1e-9);
    double c3 = n * (n - 1) * (n - 2) / 6 - m * n * (n - 1) / 2 + m * m * n / 2 - m * m * m / 6;
    EXPECT_NEAR(wiener_ito(env, 3, constant(3), 1.0), c3, 1e-8);
  }
  Environment env = small_env(0);
  EXPECT_THROW(wiener_ito(env, 4, constant(4), 1.0), ConfigError);
}

TEST(Chaos, WienerItoMeanZeroAndIsometry) {
  SimplexIntegrand g1{1, [](std::span<const double> s, std::span<const Point> x) { return s[0] + x[0][0]; }};
  SimplexIntegrand h2{2, [](std::span<const double> s, std::span<const Point> x) { return x[0][0] * s[1]; }};
  const std::size_t n = 4000;
  std::vector<double> a(n), b(n), ab(n), aa(n);
  EnvConfig cfg{1, 2.0, 1.0, 1.0, 0};
  WienerIto w1(1, g1, 1.0, cfg), w2(2, h2, 1.0, cfg);
  for (std::size_t i = 0; i < n; ++i) {
    Environment env = small_env(1000 + i);
    a[i] = w1(env).value;
    b[i] = w2(env).value;
    ab[i] = a[i] * b[i];
    aa[i] = a[i] * a[i];
  }
  EXPECT_LT(std::abs(z_score(stats::mean_estimate(a), 0.0)), 4.0);
  EXPECT_LT(std::abs(z_score(stats::mean_estimate(b), 0.0)), 4.0);
  EXPECT_LT(std::abs(z_score(stats::mean_estimate(ab), 0.0)), 4.0);
  // nu int_0^1 int_{-1}^1 (s + x)^2 dx ds with nu = 2
  double norm2 = 2.0 * (2.0 / 3.0 + 2.0 / 3.0);
  EXPECT_LT(std::abs(z_score(stats::mean_estimate(aa), norm2)), 4.0);
}

TEST(Chaos, ChaosIdentityExamples) {
  TubeSpec spec(1, 1.0);
  const double t = 1.0, beta = 0.7;
  // no events
  Environment empty(EnvConfig{1, 1.0, t, 8.0, 0}, {});
  Stream s(1);
  auto b = sample_free({0.5, 1.0}, 1, 1, s);
  EXPECT_EQ(chaos_identity_check(empty, b, 0, beta, spec, t), 0.0);
  // one event right on the path
  Point p = b.at(0, 0);
  Environment one(EnvConfig{1, 1.0, t, 8.0, 0}, {{0.5, p}});
  EXPECT_LT(chaos_identity_check(one, b, 0, beta, spec, t), 1e-15);
  for (std::uint64_t k = 0; k < 200; ++k) {
    Stream q(k);
    Environment env = sample_environment(EnvConfig{1, 3.0, 2.0, 4.0, 0}, q);
    auto pb = sample_free(make_time_grid(env, 2.0), 1, 1, q);
    EXPECT_LT(chaos_identity_check(env, pb, 0, 1.2, spec, 2.0), 1e-10);
  }
}

TEST(Chaos, PsiKOracle) {
  TubeSpec spec(1, 1.0);
  Stream s(2);
  EXPECT_EQ(psi_k(0.5, spec, {}, {}, 10, s).value, 1.0);
  const double x = 0.4, sd = 0.8;
  auto e = psi_k(0.5, spec, {sd}, {Point{x, 0, 0}}, 100000, s);
  double exact = lambda(0.5) * (Phi((x + 0.5) / std::sqrt(sd)) - Phi((x - 0.5) / std::sqrt(sd)));
  EXPECT_LT(std::abs(z_score(e, exact)), 4.0);
  auto far = psi_k(0.5, spec, {sd}, {Point{20.0, 0, 0}}, 1000, s);
  EXPECT_EQ(far.value, 0.0);
}

TEST(Chaos, WeightsUnderEnvelope) {
  Stream s(3);
  auto w = chaos_weights(0.4, 1.0, TubeSpec(1, 1.0), 2.0, 3, 2000, s, 400);
  for (int k = 0; k <= 3; ++k) EXPECT_LE(w.weight[k].value, w.envelope[k] * (1 + 1e-12));
  EXPECT_EQ(w.weight[0].value, 1.0);
}

TEST(Chaos, ContinuumSecondMoment) {
  EXPECT_EQ(continuum_second_moment(0.0, 1.0, 8).value, 1.0);
  auto m = continuum_second_moment(0.5, 1.0, 8);
  EXPECT_NEAR(m.terms[1], 0.25 / std::sqrt(std::numbers::pi), 1e-12);
  // closed form of each order: (T/4)^{k/2} / Gamma(k/2 + 1)
  for (int k = 0; k <= 8; ++k)
    EXPECT_NEAR(m.terms[k], std::pow(0.25, k) * std::pow(0.25, 0.5 * k) / std::tgamma(0.5 * k + 1), 1e-10);
  auto m6 = continuum_second_moment(0.5, 1.0, 6);
  EXPECT_LT(m.value - m6.value, m6.tail);
  EXPECT_GE(m.value, m6.value);
  EXPECT_GT(continuum_second_moment(0.6, 1.0, 8).value, m.value);
  EXPECT_FALSE(m.tail_flag);
  EXPECT_TRUE(continuum_second_moment(3.0, 1.0, 2).tail_flag);
  EXPECT_THROW(continuum_second_moment(0.5, 1.0, 9), ConfigError);
}

TEST(Chaos, CrossoverSchedule) {
  CrossoverSchedule sch;
  for (double t : {64.0, 256.0, 1024.0}) {
    auto R = sch.at(t);
    double l = lambda(R.beta);
    EXPECT_NEAR(R.nu * R.r * R.r * l * l, 0.25 / std::sqrt(t), 1e-15);
    EXPECT_NEAR(l, 0.5 * std::pow(t, -0.25), 1e-15);
  }
  EXPECT_LT(sch.at(1024).gamma, sch.at(64).gamma);
  CrossoverSchedule neg;
  neg.beta_star = -8.0;
  EXPECT_THROW(neg.at(1.0), ConfigError);
  CrossoverSchedule zero;
  zero.beta_star = 0.0;
  Stream s(4);
  auto rows = crossover_experiment(zero, {4.0, 16.0}, 20, s);
  EXPECT_EQ(rows[0].mean.value, 1.0);
  EXPECT_EQ(rows[1].var.value, 0.0);
  EXPECT_EQ(rows[1].ks_prev, 0.0);
  EXPECT_THROW(crossover_experiment(zero, {16.0, 4.0}, 20, s), ConfigError);
}

TEST(Chaos, BumpLaplacian) {
  for (double x : {-0.8, -0.3, 0.0, 0.5, 0.9}) {
    double h = 1e-4;
    double fd = (bump(x + h) - 2 * bump(x) + bump(x - h)) / (h * h);
    EXPECT_NEAR(bump_laplacian(x), fd, 1e-5 * std::max(1.0, std::abs(fd)));
  }
  EXPECT_EQ(bump(1.0), 0.0);
}

TEST(Chaos, SheWeakForm) {
  TubeSpec spec(1, 0.5);
  auto phi = [](double x) { return bump(x); };
  auto lap = [](double x) { return bump_laplacian(x); };
  Stream s(5);
  Environment env = sample_environment(EnvConfig{1, 1.0, 1.0, 8.0, 0}, s);
  auto heat = she_weak_form_check(env, 0.0, spec, phi, lap, 1.0, 1.0, 20000, s, 500);
  EXPECT_LT(std::abs(heat.z), 4.0);
  auto noisy = she_weak_form_check(env, 0.5, spec, phi, lap, 1.0, 1.0, 20000, s, 500);
  EXPECT_LT(std::abs(noisy.z), 4.0);
  auto early = she_weak_form_check(env, 0.5, spec, phi, lap, 1.0, 1e-3, 2000, s, 10);
  EXPECT_NEAR(early.lhs.value, bump(0.0), 4 * early.lhs.std_error + 1e-3);
  EXPECT_THROW(she_weak_form_check(env, 0.5, spec, phi, lap, 9.0, 1.0, 10, s), ConfigError);
}
