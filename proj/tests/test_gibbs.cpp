#include <gtest/gtest.h>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>
#include <numbers>

#include "polylab/gibbs.hpp"

using namespace polylab;

namespace {

Environment env1(std::uint64_t seed, double nu, double t, double r = 1.0) {
  Stream s(seed);
  return sample_environment(EnvConfig{1, nu, t, default_half_width(t, r), 0}, s);
}

double Phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// E[(1 - |Z|)_+] for Z ~ N(0, v).
double tent_mean(double v) {
  auto f = [v](double z) { return (1 - std::abs(z)) * std::exp(-z * z / (2 * v)) / std::sqrt(2 * std::numbers::pi * v); };
  return boost::math::quadrature::gauss_kronrod<double, 31>::integrate(f, -1.0, 0.0) +
         boost::math::quadrature::gauss_kronrod<double, 31>::integrate(f, 0.0, 1.0);
}

}  // namespace

TEST(Gibbs, DoobGAndConstants) {
  for (double lam : {-0.6, 0.3, 2.0}) {
    auto [lo, hi] = doob_constants(lam);
    for (int k = 1; k <= 50; ++k) {
      double u = lam * k / 50.0;
      EXPECT_GE(doob_g(u), lo * u * u * (1 - 1e-12));
      EXPECT_LE(doob_g(u), hi * u * u * (1 + 1e-12));
    }
  }
  EXPECT_NEAR(doob_g(1e-4), 1e-4 - std::log1p(1e-4), 1e-18);
}

TEST(Gibbs, AnnealedIdentity) {
  TubeSpec spec(1, 1.0);
  const double beta = 0.5, t = 1.0;
  std::vector<double> z(3000);
  for (std::size_t e = 0; e < z.size(); ++e) {
    Environment env = env1(100 + e, 1.0, t);
    TubeIndex idx(env, spec, t);
    Stream s(e, 1);
    z[e] = partition_from_hits(sparse_paths(idx, 100, s).hits, beta).value;
  }
  EXPECT_LT(std::abs(z_score(stats::mean_estimate(z), std::exp(t * lambda(beta)))), 4.0);
}

TEST(Gibbs, PointToPointAtZeroBetaIsHeatKernel) {
  Environment env = env1(1, 1.0, 2.0);
  Stream s(2);
  auto r = p2p_partition(env, 0.0, TubeSpec(1, 1.0), 2.0, {0.7, 0, 0}, 10, s);
  EXPECT_DOUBLE_EQ(r.z.value, 1.0);
  EXPECT_NEAR(r.w.value, heat_kernel(2.0, {0.7, 0, 0}, 1), 1e-15);
  EXPECT_THROW(p2p_partition(env, 0.0, TubeSpec(1, 1.0), 2.0, {100.0, 0, 0}, 10, s), ConfigError);
}

TEST(Gibbs, ShearCoupledIdentityIsExact) {
  for (std::uint64_t k = 0; k < 50; ++k) {
    Environment env = env1(10 + k, 2.0, 1.5);
    Stream s(k);
    auto c = p2p_shear_coupled(env, 0.9, TubeSpec(1, 1.0), 1.5, {0.8, 0, 0}, 30, s);
    EXPECT_LT(c.residual, 1e-12);
  }
}

TEST(Gibbs, ProfileMatchesBruteForce) {
  std::vector<double> c{0.0, 0.3, 0.31, 2.0}, w{0.1, 0.4, 0.2, 0.3};
  auto p = detail::profile(c, w, 0.5);
  double fine = 0;
  const double h = 1e-4;
  for (double x = -1.0; x < 3.0; x += h) {
    double F = 0;
    for (std::size_t i = 0; i < c.size(); ++i)
      if (std::abs(x + 0.5 * h - c[i]) <= 0.5) F += w[i];
    fine += F * F * h;
  }
  EXPECT_NEAR(p.integrate([](double f) { return f * f; }), fine, 1e-3);
  auto [at, peak] = p.argmax();
  EXPECT_NEAR(peak, 0.7, 1e-12);
  EXPECT_NEAR(at, -0.19, 1e-12);
}

// At beta = 0 the overlap of two free paths is a known Gaussian integral.
TEST(Gibbs, OverlapAtZeroBetaMatchesOracle) {
  const double t = 2.0;
  Environment env = env1(3, 0.5, t);
  Stream s(4);
  GibbsEnsemble g = sample_ensemble(env, TubeSpec(1, 1.0), 0.0, t, 3000, s, 200);
  auto o = overlaps(g);
  boost::math::quadrature::gauss_kronrod<double, 31> gk;
  double oracle = gk.integrate([](double u) { return tent_mean(2 * u); }, 0.0, t) / t;
  EXPECT_NEAR(o.J, oracle, 0.01);
  for (double v : o.I) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Gibbs, FavoriteAtZeroBetaMatchesOracle) {
  const double t = 4.0;
  Environment env = env1(5, 0.5, t);
  Stream s(6);
  GibbsEnsemble g = sample_ensemble(env, TubeSpec(1, 1.0), 0.0, t, 4000, s, 200);
  auto f = favorite_path(g);
  boost::math::quadrature::gauss_kronrod<double, 31> gk;
  double oracle = gk.integrate([](double u) { return u > 0 ? 2 * Phi(0.5 / std::sqrt(u)) - 1 : 1.0; }, 0.0, t) / t;
  EXPECT_NEAR(f.R_star.value, oracle, 0.02);
}

TEST(Gibbs, TwoToOneSandwichAndRanges) {
  for (std::uint64_t k = 0; k < 5; ++k) {
    const double t = 4.0;
    Environment env = env1(20 + k, 1.0, t);
    Stream s(k);
    GibbsEnsemble g = sample_ensemble(env, TubeSpec(1, 1.0), 0.8, t, 400, s);
    auto f = favorite_path(g);
    double R = f.R_star.value, J = f.J_plugin;
    EXPECT_LE(J, R + 1e-12);
    EXPECT_LE(two_to_one_constant(1) * R * R, J);
    EXPECT_GE(R, 0.0);
    EXPECT_LE(R, 1.0);
    EXPECT_GE(J, 0.0);
    EXPECT_LE(J, 1.0);
  }
  EXPECT_THROW(two_to_one_constant(3), ConfigError);
}

TEST(Gibbs, DoobDecompositionExact) {
  const double t = 3.0, beta = 0.8;
  Environment env = env1(30, 1.5, t);
  Stream s(31);
  GibbsEnsemble g = sample_ensemble(env, TubeSpec(1, 1.0), beta, t, 300, s, 100);
  auto D = doob_decomposition(g);
  std::vector<double> lw(g.n());
  for (std::size_t i = 0; i < g.n(); ++i) lw[i] = beta * g.hits.total(i);
  double direct = log_mean_exp(lw) - annealed_rate(beta, 1.5, g.spec) * t;
  EXPECT_NEAR(D.log_W, direct, 1e-10 * std::max(1.0, std::abs(direct)));
  for (std::size_t k = 1; k < D.A.size(); ++k) EXPECT_GE(D.A[k], D.A[k - 1]);
  EXPECT_NEAR(-D.log_W, D.M_t + D.A_t, 1e-12);
  EXPECT_LE(D.c1 * D.int_I, D.A_t * (1 + 1e-12));
  EXPECT_GE(D.c2 * D.int_I, D.A_t * (1 - 1e-12));
}

TEST(Gibbs, LocalizationBoundsHold) {
  const double t = 4.0;
  Environment env = env1(40, 1.0, t);
  Stream s(41);
  GibbsEnsemble g = sample_ensemble(env, TubeSpec(1, 1.0), 1.0, t, 300, s);
  for (double delta : {0.1, 0.25, 0.4}) {
    auto L = localization_sets(g, delta);
    EXPECT_LE(L.intermediate, L.bound_intermediate + 1e-12);
    EXPECT_LE(L.tube_negligible, L.bound_negligible + 1e-12);
    EXPECT_LE(L.outside_predominant, L.bound_predominant + 1e-12);
  }
  EXPECT_THROW(localization_sets(g, 0.6), ConfigError);
}

TEST(Gibbs, TiltedMgfIdentities) {
  const double t = 2.0;
  Stream s(50);
  Environment env = sample_environment(EnvConfig{1, 1.0, t, default_half_width(t, 1.0, 2.0), 0}, s);
  GibbsEnsemble g0 = sample_ensemble(env, TubeSpec(1, 1.0), 0.0, t, 20000, s);
  auto m0 = tilted_mgf(g0, {1.0, 0, 0});
  EXPECT_DOUBLE_EQ(m0.rhs.value, std::exp(0.5));
  EXPECT_LT(std::abs(z_score(m0.lhs, std::exp(0.5))), 4.0);
  GibbsEnsemble g = sample_ensemble(env, TubeSpec(1, 1.0), 0.6, t, 200, s);
  auto m = tilted_mgf(g, {0.7, 0, 0}, TiltMode::drifted);
  EXPECT_NEAR(m.lhs.value, m.rhs.value, 1e-12 * m.rhs.value);
}

TEST(Gibbs, RateProbeVanishesWithoutDisorder) {
  Stream s(60);
  auto e = rate_function_probe(0.0, 1.0, TubeSpec(1, 1.0), 2.0, {0.5, 0, 0}, 5, SmcOptions{20, 1}, s);
  EXPECT_EQ(e.value, 0.0);
  EXPECT_THROW(rate_function_probe(0.5, 1.0, TubeSpec(1, 1.0), 2.0, {3.0, 0, 0}, 5, SmcOptions{20, 1}, s),
               ConfigError);
}

TEST(Gibbs, FreeEnergyBounds) {
  Stream s(70);
  auto fe = free_energy(std::vector<double>{0.0, 0.5}, 1.0, TubeSpec(1, 1.0), 2.0, 60, 400, s);
  EXPECT_EQ(fe[0].p.value, 0.0);
  EXPECT_EQ(fe[0].psi.value, 0.0);
  const auto& f = fe[1];
  EXPECT_GE(f.p.value + 3 * f.p.std_error, 0.5);
  EXPECT_LE(f.p.value - 3 * f.p.std_error, lambda(0.5));
  EXPECT_THROW(free_energy(0.5, 1.0, TubeSpec(1, 1.0), 2.0, 10, 100, s), ConfigError);
}

TEST(Gibbs, SecondMomentAtZeroIsOne) {
  Stream s(80);
  auto m = second_moment_closed_form(0.0, 1.0, TubeSpec(1, 1.0), 1.0, 1000, s);
  EXPECT_EQ(m.estimate.value, 1.0);
  auto m2 = second_moment_closed_form(0.3, 1.0, TubeSpec(1, 1.0), 1.0, 2000, s, 200);
  EXPECT_GT(m2.estimate.value, 1.0);
  EXPECT_TRUE(m2.in_l2_region);
}

TEST(Gibbs, VarianceVanishesWithoutDisorder) {
  Stream s(90);
  auto v = variance_and_concentration(0.0, 1.0, TubeSpec(1, 1.0), 1.0, 100, 50, s);
  EXPECT_EQ(v.var.value, 0.0);
  EXPECT_TRUE(v.tail_ok);
}

TEST(Gibbs, MarkovConsistency) {
  Environment env = env1(100, 1.0, 3.0);
  Stream s(101);
  double z = markov_consistency(env, 0.5, TubeSpec(1, 1.0), 1.5, 1.0, 400, 200, s);
  EXPECT_LT(std::abs(z), 4.0);
}

TEST(Gibbs, SnisFlagsDegenerateWeights) {
  auto e = snis({1.0, 2.0, 3.0}, {1.0, 0.0, 0.0});
  EXPECT_TRUE(e.has_flag("degenerate"));
  EXPECT_DOUBLE_EQ(e.value, 1.0);
}

TEST(Gibbs, GenealogyEnsembleIsUniformlyWeighted) {
  const double t = 2.0;
  Environment env = env1(110, 2.0, t);
  TubeIndex idx(env, TubeSpec(1, 1.0), t);
  Stream s(111);
  GibbsEnsemble g = smc_path_ensemble(idx, env, 1.0, SmcOptions{100, 1}, s);
  EXPECT_EQ(g.n(), 100u);
  EXPECT_EQ(g.n_times(), idx.n_slabs() + 1);
  auto w = g.final_weights();
  for (double v : w) EXPECT_DOUBLE_EQ(v, 0.01);
  for (std::size_t i = 0; i < g.n(); ++i) EXPECT_EQ(g.bundle.at(i, 0)[0], 0.0);
}

TEST(Gibbs, MirrorLipschitzScaling) {
  Stream s(31);
  TubeSpec spec(1, 1.0);
  auto flat = mirror_lipschitz_probe(0.0, 1.0, spec, 2.0, {0.25, 0.5}, 5, 50, s);
  for (const auto& d : flat.upper) EXPECT_EQ(d.value, 0.0);
  const std::vector<double> xs{0.0625, 0.125, 0.25, 0.5, 1.0};
  auto P = mirror_lipschitz_probe(0.5, 1.0, spec, 2.0, xs, 200, 500, s);
  for (std::size_t q = 0; q < xs.size(); ++q) {
    RecordProperty("x" + std::to_string(q), std::to_string(P.lower[q].value) + " " + std::to_string(P.upper[q].value));
    EXPECT_LT(P.lower[q].value, P.upper[q].value + 4.0 * (P.lower[q].std_error + P.upper[q].std_error));
  }
  RecordProperty("slope", std::to_string(P.loglog.slope) + " +- " + std::to_string(P.loglog.slope_se));
  EXPECT_GT(P.C, 0.0);
  // linear in |x|: log-log slope within 4 standard errors of 1
  EXPECT_LT(std::abs(P.loglog.slope - 1.0), 4.0 * P.loglog.slope_se);
  EXPECT_LT(P.loglog.slope_se, 0.1);
  EXPECT_THROW(mirror_lipschitz_probe(0.5, 1.0, spec, 2.0, {0.0, 1.0}, 2, 2, s), ConfigError);
}

// -ln W_s against int_0^s I over the last quarter of the horizon: the fitted
// constants bracket a positive band.
TEST(Gibbs, FreeEnergySandwichShape) {
  const double beta = 1.0, nu = 4.0, t = 8.0;
  TubeSpec spec(1, 1.0);
  std::vector<DoobDecomp> runs;
  for (std::uint64_t k = 0; k < 4; ++k) {
    Environment env = env1(400 + k, nu, t);
    Stream s(500 + k);
    runs.push_back(doob_decomposition(sample_ensemble(env, spec, beta, t, 300, s, 100)));
  }
  auto f = fit_sandwich(runs, 0.75 * t);
  RecordProperty("c1", std::to_string(f.c1));
  RecordProperty("c2", std::to_string(f.c2));
  EXPECT_GT(f.points, 0u);
  EXPECT_TRUE(f.positive);
  EXPECT_LE(f.c1, f.c2);
  EXPECT_TRUE(std::isfinite(f.c2));
  EXPECT_THROW(fit_sandwich(runs, 2 * t), ConfigError);
}
