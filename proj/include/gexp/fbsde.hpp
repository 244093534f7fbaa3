#pragma once

// Forward G-SDE simulation and extraction of (Y, Z, K) along a path from a
// Feynman-Kac value field.
//
//   dX = b dt + h d<B> + sigma dB
//   Y_k = u(t_k, X_k),  Z_k = <sigma, D_x u>(t_k, X_k)
//   K_{k+1} - K_k = Y_{k+1} - Y_k + f dt + g v dt - Z_k dB_k
//
// K is recovered as the residual of the backward equation, so the discrete
// identity holds by construction and K carries all of the scheme's slack.

#include <algorithm>
#include <cmath>
#include <ostream>
#include <random>
#include <span>
#include <vector>

#include "gexp/gcore.hpp"
#include "gexp/oracle.hpp"
#include "gexp/path.hpp"
#include "gexp/pde.hpp"

namespace gexp::fbsde {

using pde::Point;

struct ForwardSpec {
  pde::Coefficients coeffs;
  Point x0{0.0, 0.0};
  double horizon = 1.0;
  VolBounds bounds{1.0, 1.0};
  double lipschitz = 0.0;  // recorded constant for b, h, sigma; 0 = unknown

  int state_dim() const noexcept { return coeffs.state_dim; }
  Point b(double t, const Point& x) const { return coeffs.b ? coeffs.b(t, x) : Point{0.0, 0.0}; }
  Point h(double t, const Point& x) const { return coeffs.h ? coeffs.h(t, x) : Point{0.0, 0.0}; }
  Point sigma(double t, const Point& x) const { return coeffs.sigma ? coeffs.sigma(t, x) : Point{0.0, 0.0}; }
};

/// Forward spec sharing the coefficients of a PDE problem.
inline ForwardSpec forward_of(const pde::PDEProblem& p, const Point& x0, double horizon) {
  return {p.coeffs, x0, horizon, p.vol, p.lipschitz};
}

struct StatePath {
  ControlledPath noise;
  std::vector<Point> x;  // size steps + 1
};

class PathExitsGrid : public InvalidInput {
 public:
  explicit PathExitsGrid(std::size_t step)
      : InvalidInput(detail::concat("extract_triple: path leaves the grid box at step ", step)), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// Euler scheme with dB_k = s_k sqrt(v_k dt) and dt = horizon / steps.
/// Signs of 0 give a noise-free path.
template <typename Spec>
StatePath simulate_forward(const Spec& spec, std::span<const double> control, std::span<const int> signs) {
  detail::require(!control.empty(), "simulate_forward: empty control");
  const double dt = spec.horizon / static_cast<double>(control.size());
  StatePath out{make_controlled_path(spec.bounds, dt, control, signs), {spec.x0}};
  const int dim = spec.state_dim();
  for (std::size_t k = 0; k < control.size(); ++k) {
    const double t = static_cast<double>(k) * dt;
    const Point& x = out.x.back();
    const Point b = spec.b(t, x), h = spec.h(t, x), sg = spec.sigma(t, x);
    Point next = x;
    for (int a = 0; a < dim; ++a) next[a] = x[a] + b[a] * dt + h[a] * (control[k] * dt) + sg[a] * out.noise.dB[k];
    out.x.push_back(next);
  }
  return out;
}

struct SolutionTriple {
  std::vector<double> times;
  std::vector<Point> x;
  std::vector<double> y, z, k;  // size steps + 1 (z[steps] is the terminal gradient term)
  std::vector<double> v, dB;    // size steps

  std::size_t steps() const noexcept { return v.size(); }
};

/// Default tolerances 10 (dt + dx^2) scaled by max(1, L).
struct TripleTolerances {
  double tol_k;
  double tol_res;
};

inline TripleTolerances default_tolerances(const pde::GridSpec& grid, double lipschitz) {
  double dx2 = 0.0;
  for (const auto& a : grid.axes) dx2 = std::max(dx2, a.step() * a.step());
  const double t = 10.0 * (grid.dt() + dx2) * std::max(1.0, lipschitz);
  return {t, t};
}

template <pde::FeynmanKacProblem P>
SolutionTriple extract_triple(const P& problem, const pde::ValueField& field, const StatePath& path) {
  const auto& grid = field.grid();
  const std::size_t n = path.noise.steps();
  detail::require(static_cast<int>(n) == grid.nt,
                  detail::concat("extract_triple: path has ", n, " steps but the field has ", grid.nt));
  detail::require(std::abs(path.noise.dt - grid.dt()) <= 1e-12 * grid.dt(),
                  "extract_triple: path and field use different time steps");
  SolutionTriple tr;
  for (std::size_t k = 0; k <= n; ++k) {
    if (!field.inside(path.x[k])) throw PathExitsGrid(k);
    const double t = field.time(static_cast<int>(k));
    const Point grad = field.gradient(static_cast<int>(k), path.x[k]);
    const Point sg = problem.sigma(t, path.x[k]);
    double z = 0.0;
    for (int a = 0; a < grid.dim(); ++a) z += sg[a] * grad[a];
    tr.times.push_back(t);
    tr.x.push_back(path.x[k]);
    tr.y.push_back(field.interpolate(static_cast<int>(k), path.x[k]));
    tr.z.push_back(z);
  }
  const double dt = grid.dt();
  tr.k.assign(1, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    const double t = tr.times[k];
    const double v = path.noise.v[k];
    const double f = problem.f(t, tr.x[k], tr.y[k], tr.z[k]);
    const double g = problem.g(t, tr.x[k], tr.y[k], tr.z[k]);
    const double dk = tr.y[k + 1] - tr.y[k] + f * dt + g * v * dt - tr.z[k] * path.noise.dB[k];
    tr.k.push_back(tr.k.back() + dk);
    tr.v.push_back(v);
    tr.dB.push_back(path.noise.dB[k]);
  }
  return tr;
}

/// Columns k, t, x1[, x2], Y, Z, K, v, dB; the last row has empty v and dB.
inline void write_csv(std::ostream& os, const SolutionTriple& tr, int state_dim) {
  const auto old_precision = os.precision(17);
  os << (state_dim == 2 ? "k,t,x1,x2,Y,Z,K,v,dB\n" : "k,t,x1,Y,Z,K,v,dB\n");
  for (std::size_t k = 0; k < tr.times.size(); ++k) {
    os << k << ',' << tr.times[k] << ',' << tr.x[k][0];
    if (state_dim == 2) os << ',' << tr.x[k][1];
    os << ',' << tr.y[k] << ',' << tr.z[k] << ',' << tr.k[k] << ',';
    if (k < tr.steps()) os << tr.v[k] << ',' << tr.dB[k];
    else os << ',';
    os << '\n';
  }
  os.precision(old_precision);
}

struct TripleCheck {
  bool k0_zero = false;
  double max_increase = 0.0;  // max_{i<j} (K_j - K_i)
  double max_residual = 0.0;  // per-step residual of the backward equation
  bool pass = false;
};

template <pde::FeynmanKacProblem P>
TripleCheck check_triple(const P& problem, const SolutionTriple& tr, double dt, const TripleTolerances& tol) {
  TripleCheck c;
  c.k0_zero = !tr.k.empty() && tr.k.front() == 0.0;
  double running_min = tr.k.front();
  for (std::size_t j = 1; j < tr.k.size(); ++j) {
    c.max_increase = std::max(c.max_increase, tr.k[j] - running_min);
    running_min = std::min(running_min, tr.k[j]);
  }
  for (std::size_t k = 0; k < tr.steps(); ++k) {
    const double f = problem.f(tr.times[k], tr.x[k], tr.y[k], tr.z[k]);
    const double g = problem.g(tr.times[k], tr.x[k], tr.y[k], tr.z[k]);
    const double rhs = tr.y[k + 1] + f * dt + g * tr.v[k] * dt - tr.z[k] * tr.dB[k] - (tr.k[k + 1] - tr.k[k]);
    c.max_residual = std::max(c.max_residual, std::abs(tr.y[k] - rhs));
  }
  c.pass = c.k0_zero && c.max_increase <= tol.tol_k && c.max_residual <= tol.tol_res;
  return c;
}

/// Variance maximising 1/2 v H at (t_k, x), with H assembled from layer
/// k + 1 of the field. Ties go to sigma_hi^2.
template <pde::FeynmanKacProblem P>
double optimal_control(const P& problem, const pde::ValueField& field, int k, const Point& x) {
  const int layer = std::min(k + 1, field.grid().nt);
  const double t = k * field.grid().dt();
  const Point grad = field.gradient(layer, x);
  const Point sg = problem.sigma(t, x), hh = problem.h(t, x);
  double quad = 0.0, first = 0.0, z = 0.0;
  for (int a = 0; a < field.grid().dim(); ++a) {
    quad += sg[a] * sg[a] * field.second_derivative(layer, x, a);
    first += hh[a] * grad[a];
    z += sg[a] * grad[a];
  }
  const double y = field.interpolate(layer, x);
  const double hmat = quad + 2.0 * first + 2.0 * problem.g(t, x, y, z);
  return g_argmax_1d(problem.bounds(), hmat);
}

struct MartingaleWitness {
  double mean_kt = 0.0;
  double std_error = 0.0;
  int paths = 0;
};

/// Mean of K_T over random sign paths driven by the feedback control that
/// attains the sup at every node.
template <pde::FeynmanKacProblem P, typename Spec>
MartingaleWitness k_martingale_witness(const P& problem, const Spec& spec, const pde::ValueField& field, int paths,
                                       std::uint64_t seed) {
  const auto& grid = field.grid();
  const int n = grid.nt;
  const double dt = grid.dt();
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  double sum = 0.0, sum_sq = 0.0;
  for (int p = 0; p < paths; ++p) {
    std::vector<double> control;
    std::vector<int> signs;
    Point x = spec.x0;
    for (int k = 0; k < n; ++k) {
      if (!field.inside(x)) throw PathExitsGrid(static_cast<std::size_t>(k));
      const double v = optimal_control(problem, field, k, x);
      const int s = coin(rng) ? 1 : -1;
      control.push_back(v);
      signs.push_back(s);
      const double t = k * dt;
      const Point b = spec.b(t, x), h = spec.h(t, x), sg = spec.sigma(t, x);
      const double dB = s * std::sqrt(v * dt);
      for (int a = 0; a < spec.state_dim(); ++a) x[a] += b[a] * dt + h[a] * (v * dt) + sg[a] * dB;
    }
    const StatePath path = simulate_forward(spec, control, signs);
    const SolutionTriple tr = extract_triple(problem, field, path);
    sum += tr.k.back();
    sum_sq += tr.k.back() * tr.k.back();
  }
  MartingaleWitness w;
  w.paths = paths;
  w.mean_kt = sum / paths;
  const double var = paths > 1 ? std::max(0.0, (sum_sq - paths * w.mean_kt * w.mean_kt) / (paths - 1)) : 0.0;
  w.std_error = std::sqrt(var / paths);
  return w;
}

struct ForwardEstimateReport {
  std::vector<double> deltas;
  std::vector<double> values;  // E^[sup_{s <= delta} |X_s - x0|^p]
  double slope = 0.0;          // least-squares slope of log value vs log delta
  double p = 2.0;
};

/// Estimates E^[sup_{s in [0, delta]} |X_s - x0|^p] on a depth-`depth` tree
/// over [0, delta] with endpoint variance choices, then fits the scaling
/// exponent in delta.
template <typename Spec>
ForwardEstimateReport check_forward_estimates(const Spec& spec, const std::vector<double>& deltas, double p,
                                              int depth = 6) {
  detail::require(p >= 2.0, "check_forward_estimates: p must be >= 2");
  detail::require(deltas.size() >= 2, "check_forward_estimates: need at least two deltas");
  ForwardEstimateReport r;
  r.p = p;
  const int dim = spec.state_dim();
  for (double delta : deltas) {
    detail::require(delta > 0.0, "check_forward_estimates: deltas must be positive");
    const auto tree = oracle::TreeSpec::endpoints(depth, delta / depth, spec.bounds);
    const oracle::PathFunctional sup_dev = [&](const oracle::DiscretePath& path) {
      Point x = spec.x0;
      double worst = 0.0;
      for (std::size_t k = 0; k < path.increments.size(); ++k) {
        const double t = static_cast<double>(k) * path.dt;
        const Point b = spec.b(t, x), h = spec.h(t, x), sg = spec.sigma(t, x);
        for (int a = 0; a < dim; ++a)
          x[a] += b[a] * path.dt + h[a] * (path.variances[k] * path.dt) + sg[a] * path.increments[k];
        double dist2 = 0.0;
        for (int a = 0; a < dim; ++a) dist2 += (x[a] - spec.x0[a]) * (x[a] - spec.x0[a]);
        worst = std::max(worst, std::pow(std::sqrt(dist2), p));
      }
      return worst;
    };
    const double value = oracle::policy_count(tree) <= oracle::kMaxPolicies ? oracle::enumerate_sup(tree, sup_dev)
                                                                             : oracle::backward_value(tree, sup_dev);
    r.deltas.push_back(delta);
    r.values.push_back(value);
  }
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  const double m = static_cast<double>(r.deltas.size());
  for (std::size_t i = 0; i < r.deltas.size(); ++i) {
    const double lx = std::log(r.deltas[i]), ly = std::log(r.values[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  r.slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
  return r;
}

/// Smallest C with |u(k, x) - u(k, x')| <= C (1 + |x|^m + |x'|^m) |x - x'|
/// over neighbouring nodes of a 1-d layer.
inline double fit_initial_condition_constant(const pde::ValueField& field, int k, int m) {
  const auto& ax = field.grid().axes[0];
  double c = 0.0;
  for (int i = 0; i + 1 < ax.n; ++i) {
    const double x = ax.x(i), xp = ax.x(i + 1);
    const double growth = 1.0 + std::pow(std::abs(x), m) + std::pow(std::abs(xp), m);
    c = std::max(c, std::abs(field.at(k, i + 1) - field.at(k, i)) / (growth * (xp - x)));
  }
  return c;
}

}  // namespace gexp::fbsde
