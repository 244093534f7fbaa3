#include <random>

#include <gtest/gtest.h>

#include "gexp/girsanov.hpp"
#include "gexp/linear.hpp"

using namespace gexp;
using namespace gexp::girsanov;

namespace {

const VolBounds kB{1.0, 4.0};

BoundedLipschitz cosine() { return {[](double x) { return std::cos(x); }, 1.0, 1.0}; }

// a cos(w x + c) + e tanh(x), bounded by |a| + |e|, Lipschitz |a w| + |e|.
BoundedLipschitz random_phi(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double a = u(rng), w = 1.0 + u(rng), c = 3.0 * u(rng), e = u(rng);
  return {[=](double x) { return a * std::cos(w * x + c) + e * std::tanh(x); }, std::abs(a) + std::abs(e),
          std::abs(a * w) + std::abs(e)};
}

BoundedLipschitz sum(const BoundedLipschitz& p, const BoundedLipschitz& q) {
  return {[=](double x) { return p(x) + q(x); }, p.bound + q.bound, p.lipschitz + q.lipschitz};
}

BoundedLipschitz scaled(const BoundedLipschitz& p, double l) {
  return {[=](double x) { return l * p(x); }, l * p.bound, l * p.lipschitz};
}

}  // namespace

TEST(PiecewiseConstant, EvaluationAndIntegral) {
  const PiecewiseConstant f({0.25, 0.5}, {1.0, -2.0, 3.0});
  EXPECT_EQ(f(0.0), 1.0);
  EXPECT_EQ(f(0.25), -2.0);
  EXPECT_EQ(f(0.49), -2.0);
  EXPECT_EQ(f(0.9), 3.0);
  EXPECT_DOUBLE_EQ(f.integral(1.0), 0.25 - 0.5 + 1.5);
  EXPECT_DOUBLE_EQ(f.integral(0.3), 0.25 - 0.1);
  EXPECT_EQ(f.bound(), 3.0);
  EXPECT_THROW(PiecewiseConstant({0.5}, {1.0}), InvalidInput);
  EXPECT_THROW(PiecewiseConstant({0.5, 0.25}, {1.0, 2.0, 3.0}), InvalidInput);
  EXPECT_THROW(PiecewiseConstant(std::numeric_limits<double>::quiet_NaN()), InvalidInput);
}

TEST(BoundedLipschitz, RejectsUnboundedOrMisdeclared) {
  const auto g = desk_grid(kB, {}, 1.0, 101);
  const BoundedLipschitz identity{[](double x) { return x; }, 1.0, 1.0};
  EXPECT_THROW(tilde_expect({}, identity, kB, g), InvalidInput);
  const BoundedLipschitz infinite{[](double x) { return x; }, std::numeric_limits<double>::infinity(), 1.0};
  EXPECT_THROW(tilde_expect({}, infinite, kB, g), InvalidInput);
  const BoundedLipschitz steep{[](double x) { return std::sin(5.0 * x); }, 1.0, 1.0};
  EXPECT_THROW(tilde_expect({}, steep, kB, g), InvalidInput);
  EXPECT_NO_THROW(tilde_expect({}, clipped_identity(20.0), kB, g));
}

TEST(TildeExpect, VanishingDriftIsGHeat) {
  const auto g = desk_grid(kB, {}, 1.0, 241);
  const auto phi = cosine();
  const double heat = pde::solve_gheat(kB, phi, g).interpolate(g.nt, {0.0, 0.0});
  EXPECT_NEAR(tilde_expect({}, phi, kB, g), heat, 1e-12);
}

TEST(TildeExpect, ConstantsPreserved) {
  const DriftSpec drift{0.0, 0.5};
  const auto g = desk_grid(kB, drift, 1.0, 241);
  const BoundedLipschitz c{[](double) { return 0.7; }, 0.7, 0.0};
  EXPECT_NEAR(tilde_expect(drift, c, kB, g), 0.7, 1e-12);
  EXPECT_NEAR(tilde_expect(DriftSpec{0.3, -0.2}, c, kB, desk_grid(kB, {0.3, -0.2}, 1.0, 241)), 0.7, 1e-12);
}

TEST(TildeExpect, ClippedIdentityShiftsByDrift) {
  // E~[B_T] with b = 0.3 and d = 0 is 0.3 T away from the clip.
  const DriftSpec drift{0.3, 0.0};
  const auto g = desk_grid(kB, drift, 1.0, 481);
  EXPECT_NEAR(tilde_expect(drift, clipped_identity(30.0), kB, g), 0.3, 1e-3);
}

TEST(TildeExpectWeighted, ReductionsAndRouteAgreement) {
  const auto phi = cosine();
  linear::LinearBSDESpec spec;
  spec.bounds = kB;
  spec.xi = [](double b, double) { return std::cos(b); };
  spec.state_use = StateUse::b_only;
  EXPECT_NEAR(tilde_expect_weighted({}, phi, kB, 1.0, 200), linear::solve_linear_special(spec, 200), 1e-12);

  spec.d = [](double) { return 0.5; };
  const DriftSpec drift{0.0, 0.5};
  const double weighted = tilde_expect_weighted(drift, phi, kB, 1.0, 400);
  EXPECT_NEAR(weighted, linear::solve_linear_b0(spec, 400), 1e-12);
  const auto g = desk_grid(kB, drift, 1.0, 481);
  EXPECT_NEAR(weighted, tilde_expect(drift, phi, kB, g), 5e-3);

  EXPECT_THROW(tilde_expect_weighted(DriftSpec{0.1, 0.5}, phi, kB, 1.0, 10), InvalidInput);
}

TEST(TildeExpectWeighted, MeanOneUnderRefinement) {
  const BoundedLipschitz one{[](double) { return 1.0; }, 1.0, 0.0};
  double prev = 1.0;
  for (int n : {20, 40, 80, 160}) {
    const double err = std::abs(tilde_expect_weighted(DriftSpec{0.0, 0.9}, one, kB, 1.0, n) - 1.0);
    EXPECT_LT(err, prev);
    prev = err;
  }
  EXPECT_LT(prev, 1e-2);
}

TEST(TildeExpectWeighted, TowerPropertyOnTheLattice) {
  const DriftSpec drift{0.0, 0.6};
  const auto phi = cosine();
  const double direct = tilde_expect_weighted(drift, phi, kB, 1.0, 16);
  const BoundedLipschitz inner{[&](double b0) {
                                 const BoundedLipschitz shifted{[&](double b) { return phi(b0 + b); }, 1.0, 1.0};
                                 return tilde_expect_weighted(drift, shifted, kB, 0.5, 8);
                               },
                               10.0, 10.0};
  EXPECT_NEAR(tilde_expect_weighted(drift, inner, kB, 0.5, 8), direct, 1e-12);
}

TEST(TransformPath, Examples) {
  std::vector<double> flat(64, 4.0);
  std::vector<int> zero(64, 0), signs(64);
  for (std::size_t k = 0; k < 64; ++k) signs[k] = (k * 7 % 3 == 0) ? 1 : -1;
  const double dt = 1.0 / 64;
  const auto noise = make_controlled_path(kB, dt, flat, signs);
  EXPECT_EQ(transform_path(noise, {}).bbar, noise.B);
  EXPECT_EQ(transform_path(make_controlled_path(kB, dt, flat, zero), {1.0, 0.0}).bbar.back(), -1.0);
  EXPECT_EQ(transform_path(make_controlled_path(kB, dt, flat, zero), {0.0, 1.0}).bbar.back(), -4.0);

  const DriftSpec drift{PiecewiseConstant({0.5}, {0.3, -0.7}), 0.5};
  const auto tp = transform_path(noise, drift);
  const auto back = recover_b(tp);
  for (std::size_t k = 0; k < back.size(); ++k) EXPECT_NEAR(back[k], noise.B[k], 1e-14);
}

TEST(VerifyInvariance, VanishingDriftIsExact) {
  const auto r = verify_invariance({}, cosine(), {0.5, 1.0}, 1e-12, kB);
  EXPECT_TRUE(r.pass);
  for (double d : r.diffs) EXPECT_LE(d, 1e-12);
  const auto j = r.to_json();
  for (const char* key : {"times", "tilde_values", "hat_values", "diffs", "tol", "pass"})
    EXPECT_TRUE(j.contains(key)) << key;
}

TEST(VerifyInvariance, ClassicalCaseAtFixedVolatility) {
  // Upwind transport error is first order in dx2 and dx_line.
  const VolBounds fixed(2.0, 2.0);
  const InvarianceGrid fine{0.1, 0.004, 0.0035, 4.0};
  const auto r = verify_invariance({0.3, 0.5}, cosine(), {1.0}, 1e-3, fixed, fine);
  EXPECT_TRUE(r.pass) << r.to_json().dump();
  EXPECT_NEAR(r.hat_values[0], std::exp(-1.0), 1e-3);
}

TEST(VerifyInvariance, PiecewiseConstantDrift) {
  const DriftSpec drift{PiecewiseConstant({0.5}, {0.3, -0.2}), PiecewiseConstant({0.5}, {0.4, 0.1})};
  const auto r = verify_invariance(drift, cosine(), {1.0}, 5e-3, kB);
  EXPECT_TRUE(r.pass) << r.to_json().dump();
}

TEST(TildeAxioms, RandomPairs) {
  const DriftSpec drift{0.3, 0.5};
  const auto g = desk_grid(kB, drift, 1.0, 241);
  std::mt19937_64 rng(51);
  std::uniform_real_distribution<double> lam(0.0, 3.0);
  for (int rep = 0; rep < 8; ++rep) {
    const auto p = random_phi(rng), q = random_phi(rng);
    const double ep = tilde_expect(drift, p, kB, g), eq = tilde_expect(drift, q, kB, g);
    const BoundedLipschitz above{[=](double x) { return p(x) + 0.5 * (1.0 + std::sin(x)) * std::abs(q(x)); },
                                 p.bound + q.bound, p.lipschitz + q.lipschitz + q.bound};
    EXPECT_GE(tilde_expect(drift, above, kB, g), ep - 1e-10);
    EXPECT_LE(tilde_expect(drift, sum(p, q), kB, g), ep + eq + 1e-10);
    const double l = lam(rng);
    EXPECT_NEAR(tilde_expect(drift, scaled(p, l), kB, g), l * ep, 1e-10);
  }
}
