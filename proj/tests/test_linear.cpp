#include <random>

#include <gtest/gtest.h>

#include "gexp/linear.hpp"
#include "gexp/oracle.hpp"
#include "gexp/pde.hpp"

using namespace gexp;
using namespace gexp::linear;

namespace {

const VolBounds kB{1.0, 4.0};

// E[X_T xi + sum X_k src_k] along one tree path, X built from the
// general extended-space weight. Independent of the lattice code.
oracle::PathFunctional weighted_functional(const LinearBSDESpec& s) {
  return [s](const oracle::DiscretePath& p) {
    const auto at = [](const TimeFn& f, double t) { return f ? f(t) : 0.0; };
    double x = 1.0, acc = 0.0, b = 0.0, q = 0.0;
    for (std::size_t k = 0; k < p.increments.size(); ++k) {
      const double t = static_cast<double>(k) * p.dt, v = p.variances[k], db = p.increments[k];
      const double m = s.m ? s.m(t, b, q) : 0.0, n = s.n ? s.n(t, b, q) : 0.0;
      acc += x * (m + n * v) * p.dt;
      const double a = at(s.a, t), bb = at(s.b, t), c = at(s.c, t), d = at(s.d, t);
      x *= std::exp((a - bb * d) * p.dt + c * v * p.dt + d * db - 0.5 * d * d * v * p.dt + bb * db / v -
                    0.5 * bb * bb * p.dt / v);
      b += db;
      q += v * p.dt;
    }
    return acc + x * (s.xi ? s.xi(b, q) : 0.0);
  };
}

LinearBSDESpec random_spec(std::mt19937_64& rng, bool with_b, bool with_d) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  const double a0 = u(rng), a1 = u(rng), c0 = u(rng), b0 = with_b ? u(rng) : 0.0, d0 = with_d ? u(rng) : 0.0;
  const double m0 = u(rng), n0 = u(rng), x0 = u(rng), x1 = u(rng);
  LinearBSDESpec s;
  s.a = [=](double t) { return a0 + a1 * t; };
  s.c = [=](double) { return c0; };
  if (with_b) s.b = [=](double t) { return b0 * (1.0 + t); };
  if (with_d) s.d = [=](double) { return d0; };
  s.m = [=](double t, double b, double q) { return m0 * std::cos(b) + t * q; };
  s.n = [=](double, double b, double q) { return n0 * std::sin(b + q); };
  s.xi = [=](double b, double q) { return std::cos(x0 * b) + x1 * q; };
  s.bounds = kB;
  return s;
}

}  // namespace

TEST(LinearSpecial, Examples) {
  LinearBSDESpec s;
  s.bounds = kB;
  s.a = [](double) { return 0.7; };
  s.xi = [](double, double) { return 1.0; };
  s.state_use = StateUse::none;
  EXPECT_NEAR(solve_linear_special(s, 200), std::exp(0.7), 1e-12);

  LinearBSDESpec q;
  q.bounds = kB;
  q.n = [](double, double, double) { return 1.0; };
  q.state_use = StateUse::none;
  EXPECT_NEAR(solve_linear_special(q, 4), 4.0, 1e-12);
  const auto tree = oracle::TreeSpec::endpoints(4, 0.25, kB);
  EXPECT_NEAR(solve_linear_special(q, 4), oracle::enumerate_sup(tree, weighted_functional(q)), 1e-12);
}

TEST(LinearSpecial, CollapsesToGHeat) {
  LinearBSDESpec s;
  s.bounds = kB;
  s.xi = [](double b, double) { return std::cos(b); };
  s.state_use = StateUse::b_only;
  const double lattice = solve_linear_special(s, 400);
  const auto grid = pde::make_grid({pde::Axis{-12.0, 12.0, 401}}, 1.0, pde::CflHint{4.0});
  const auto field = pde::solve_gheat(kB, [](double x) { return std::cos(x); }, grid);
  EXPECT_NEAR(lattice, field.interpolate(grid.nt, {0.0, 0.0}), 5e-3);
}

TEST(LinearSpecial, RejectsZTerms) {
  LinearBSDESpec s;
  s.bounds = kB;
  s.b = [](double) { return 0.1; };
  EXPECT_THROW(solve_linear_special(s, 10), InvalidInput);
  s.b = nullptr;
  s.d = [](double t) { return t > 0.5 ? 0.1 : 0.0; };
  EXPECT_THROW(solve_linear_special(s, 10), InvalidInput);
  EXPECT_NO_THROW(solve_linear_b0(s, 10));
  s.b = [](double) { return 0.1; };
  EXPECT_THROW(solve_linear_b0(s, 10), InvalidInput);
  s.a = [](double) { return std::numeric_limits<double>::infinity(); };
  EXPECT_THROW(solve_linear_extended(s, 10), InvalidInput);
}

TEST(LinearLattice, EqualsOracleOnRandomSpecs) {
  std::mt19937_64 rng(21);
  for (int depth = 1; depth <= 4; ++depth) {
    for (int rep = 0; rep < 4; ++rep) {
      const auto tree = oracle::TreeSpec::endpoints(depth, 1.0 / depth, kB);
      auto special = random_spec(rng, false, false);
      auto b0 = random_spec(rng, false, true);
      auto ext = random_spec(rng, true, true);
      for (auto* s : {&special, &b0, &ext}) s->horizon = 1.0;
      const double o1 = oracle::enumerate_sup(tree, weighted_functional(special));
      const double o2 = oracle::enumerate_sup(tree, weighted_functional(b0));
      const double o3 = oracle::enumerate_sup(tree, weighted_functional(ext));
      EXPECT_NEAR(solve_linear_special(special, depth), o1, 1e-12);
      EXPECT_NEAR(solve_linear_b0(b0, depth), o2, 1e-12);
      EXPECT_NEAR(solve_linear_extended(ext, depth), o3, 1e-12);
    }
  }
}

TEST(LinearLattice, ReductionChainExact) {
  std::mt19937_64 rng(22);
  for (int rep = 0; rep < 5; ++rep) {
    const auto s = random_spec(rng, false, false);
    const auto sd = random_spec(rng, false, true);
    EXPECT_NEAR(solve_linear_b0(s, 30), solve_linear_special(s, 30), 1e-12);
    EXPECT_NEAR(solve_linear_extended(s, 30), solve_linear_b0(s, 30), 1e-12);
    EXPECT_NEAR(solve_linear_extended(sd, 30), solve_linear_b0(sd, 30), 1e-12);
  }
}

TEST(LinearLattice, StateUseReductionsAgree) {
  LinearBSDESpec s;
  s.bounds = kB;
  s.a = [](double t) { return 0.2 * t; };
  s.d = [](double) { return 0.3; };
  s.m = [](double, double b, double) { return std::sin(b); };
  s.xi = [](double b, double) { return std::cos(b); };
  s.state_use = StateUse::b_only;
  const double narrow = solve_linear_b0(s, 40);
  s.state_use = StateUse::full;
  EXPECT_NEAR(narrow, solve_linear_b0(s, 40), 1e-12);
}

TEST(LinearLattice, UndeclaredStateFailsLoudly) {
  LinearBSDESpec s;
  s.bounds = kB;
  s.xi = [](double, double q) { return q; };
  s.state_use = StateUse::b_only;
  EXPECT_THROW(solve_linear_special(s, 10), InvalidInput);
}

TEST(LinearB0, StochasticExponentialMeanOneUnderRefinement) {
  LinearBSDESpec s;
  s.bounds = kB;
  s.d = [](double) { return 0.8; };
  s.xi = [](double, double) { return 1.0; };
  s.state_use = StateUse::none;
  double prev = std::numeric_limits<double>::infinity();
  for (int n : {25, 50, 100, 200, 400}) {
    const double err = std::abs(solve_linear_b0(s, n) - 1.0);
    EXPECT_LT(err, prev);
    EXPECT_LT(err, 5.0 / n);
    prev = err;
  }
}

TEST(LinearExtended, MatchesFeynmanKacWithZDriver) {
  for (double beta : {-0.4, 0.3, 0.7}) {
    LinearBSDESpec s;
    s.bounds = kB;
    s.b = [beta](double) { return beta; };
    s.xi = [](double b, double) { return std::cos(b); };
    s.state_use = StateUse::b_only;
    const double lattice = solve_linear_extended(s, 400);

    pde::PDEProblem p;
    p.coeffs.sigma = [](double, const pde::Point&) { return pde::Point{1.0, 0.0}; };
    p.f_fn = [beta](double, const pde::Point&, double, double z) { return beta * z; };
    p.phi = [](const pde::Point& x) { return std::cos(x[0]); };
    p.vol = kB;
    const auto grid = pde::make_grid({pde::Axis{-13.0, 13.0, 521}}, 1.0, pde::CflHint{4.0});
    const double fk = pde::solve_feynman_kac(p, grid, pde::KeepLayers::endpoints).interpolate(0, {0.0, 0.0});
    EXPECT_NEAR(lattice, fk, 5e-3) << "beta " << beta;
  }
}

TEST(Gronwall, ClosedFormAndEquality) {
  LinearBSDESpec s;
  s.bounds = kB;
  s.a = [](double) { return 1.0; };
  s.m = [](double, double, double) { return 1.0; };
  s.state_use = StateUse::none;
  EXPECT_NEAR(gronwall_bound(s, 4000), std::exp(1.0) - 1.0, 1e-3);

  std::mt19937_64 rng(23);
  auto r = random_spec(rng, false, false);
  r.a = [](double t) { return 0.3 + t; };
  r.c = [](double) { return 0.2; };
  EXPECT_GE(gronwall_bound(r, 20), solve_linear_special(r, 20) - 1e-12);
  r.c = [](double) { return -0.2; };
  EXPECT_THROW(gronwall_bound(r, 20), InvalidInput);
  r.c = nullptr;
  r.a = [](double t) { return t - 0.5; };
  EXPECT_THROW(gronwall_bound(r, 20), InvalidInput);
}

TEST(Gronwall, ZeroRatesGiveExpectationOfSources) {
  LinearBSDESpec s;
  s.bounds = kB;
  s.n = [](double, double, double) { return 1.0; };
  s.m = [](double, double, double) { return 2.0; };
  s.xi = [](double, double q) { return -q; };
  s.state_use = StateUse::full;
  const auto tree = oracle::TreeSpec::endpoints(4, 0.25, kB);
  const oracle::PathFunctional direct = [](const oracle::DiscretePath& p) {
    return 2.0 + p.qv_terminal() - p.qv_terminal();
  };
  EXPECT_NEAR(gronwall_bound(s, 4), oracle::enumerate_sup(tree, direct), 1e-12);
}

TEST(LinearLattice, MonotoneInData) {
  std::mt19937_64 rng(24);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int rep = 0; rep < 10; ++rep) {
    auto lo = random_spec(rng, true, true);
    auto hi = lo;
    const double dm = u(rng), dn = u(rng), dx = u(rng);
    const auto m = lo.m, n = lo.n;
    const auto xi = lo.xi;
    hi.m = [=](double t, double b, double q) { return m(t, b, q) + dm * (1.0 + std::sin(b) * std::sin(b)); };
    hi.n = [=](double t, double b, double q) { return n(t, b, q) + dn; };
    hi.xi = [=](double b, double q) { return xi(b, q) + dx * std::abs(b); };
    EXPECT_GE(solve_linear_extended(hi, 12), solve_linear_extended(lo, 12) - 1e-12);
  }
}

TEST(LinearSpecial, StrictComparisonFailsExample) {
  LinearBSDESpec s;
  s.bounds = kB;
  s.xi = [](double, double q) { return q - 4.0; };
  s.state_use = StateUse::full;
  EXPECT_NEAR(solve_linear_special(s, 50), 0.0, 1e-12);
}

TEST(ExtendedPath, CovariationAndScaling) {
  std::mt19937_64 rng(25);
  std::uniform_real_distribution<double> u(1.0, 4.0);
  std::vector<double> control(64);
  std::vector<int> signs(64);
  for (std::size_t k = 0; k < 64; ++k) {
    control[k] = u(rng);
    signs[k] = (rng() & 1u) ? 1 : -1;
  }
  const double dt = 1.0 / 64;
  const auto p = make_extended_path(kB, dt, control, signs);
  for (std::size_t k = 0; k < 64; ++k) {
    EXPECT_EQ(p.cross_inc[k], dt);
    EXPECT_EQ(p.qv_tilde[k + 1], p.qv_tilde[k] + dt / control[k]);
    EXPECT_EQ(p.dBt[k], p.base.dB[k] / control[k]);
  }
  EXPECT_NEAR(p.cross.back(), 1.0, 1e-15);

  const VolBounds fixed(2.5, 2.5);
  std::vector<double> flat(64, 2.5);
  const auto q = make_extended_path(fixed, dt, flat, signs);
  for (std::size_t k = 0; k <= 64; ++k) EXPECT_EQ(q.Bt[k], q.base.B[k] / 2.5);
}

TEST(ControlledPath, RejectsBadInput) {
  std::vector<double> c{1.0, 5.0};
  std::vector<int> s{1, -1};
  EXPECT_THROW(make_controlled_path(kB, 0.5, c, s), InvalidInput);
  c[1] = 2.0;
  s[1] = 2;
  EXPECT_THROW(make_controlled_path(kB, 0.5, c, s), InvalidInput);
  s.pop_back();
  EXPECT_THROW(make_controlled_path(kB, 0.5, c, s), InvalidInput);
}
