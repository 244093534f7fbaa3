#pragma once

// The nonlinear expectation E~ generated by the G-BSDE with linear driver
// f = b(t) z, g = d(t) z, and checks that Bbar = B - int b ds - int d d<B>
// is a G-Brownian motion under it.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gexp/gcore.hpp"
#include "gexp/lattice.hpp"
#include "gexp/path.hpp"
#include "gexp/pde.hpp"

namespace gexp::girsanov {

using pde::Point;

/// Right-continuous step function: values[i] on [breaks[i-1], breaks[i]),
/// with breaks[-1] = -inf and breaks[n] = +inf.
class PiecewiseConstant {
 public:
  PiecewiseConstant(double c = 0.0) : values_{c} { validate(); }  // NOLINT(google-explicit-constructor)
  PiecewiseConstant(std::vector<double> breaks, std::vector<double> values)
      : breaks_(std::move(breaks)), values_(std::move(values)) {
    validate();
  }

  double operator()(double t) const noexcept {
    const auto i = std::upper_bound(breaks_.begin(), breaks_.end(), t) - breaks_.begin();
    return values_[static_cast<std::size_t>(i)];
  }

  /// int_0^t of the function, t >= 0.
  double integral(double t) const noexcept {
    double acc = 0.0, left = 0.0;
    for (std::size_t i = 0; i < values_.size(); ++i) {
      const double right = i < breaks_.size() ? breaks_[i] : t;
      const double hi = std::min(right, t);
      if (hi > left) acc += values_[i] * (hi - left);
      left = std::max(left, right);
      if (left >= t) break;
    }
    return acc;
  }

  double bound() const noexcept {
    double m = 0.0;
    for (double v : values_) m = std::max(m, std::abs(v));
    return m;
  }
  double min_value() const noexcept { return *std::min_element(values_.begin(), values_.end()); }
  double max_value() const noexcept { return *std::max_element(values_.begin(), values_.end()); }
  bool is_zero() const noexcept { return bound() == 0.0; }
  bool is_constant() const noexcept { return breaks_.empty(); }
  const std::vector<double>& breaks() const noexcept { return breaks_; }
  const std::vector<double>& values() const noexcept { return values_; }

 private:
  void validate() const {
    detail::require(values_.size() == breaks_.size() + 1,
                    detail::concat("PiecewiseConstant: ", breaks_.size(), " breaks need ", breaks_.size() + 1,
                                   " values, got ", values_.size()));
    for (double v : values_) detail::require(std::isfinite(v), "PiecewiseConstant: values must be finite");
    for (std::size_t i = 0; i < breaks_.size(); ++i) {
      detail::require(std::isfinite(breaks_[i]) && breaks_[i] > 0.0, "PiecewiseConstant: breaks must be positive");
      if (i > 0) detail::require(breaks_[i] > breaks_[i - 1], "PiecewiseConstant: breaks must increase");
    }
  }

  std::vector<double> breaks_;
  std::vector<double> values_;
};

struct DriftSpec {
  PiecewiseConstant b;
  PiecewiseConstant d;
};

/// A payoff with a declared sup-norm bound and Lipschitz constant. Both are
/// checked on the nodes of whatever grid the payoff is used on.
struct BoundedLipschitz {
  std::function<double(double)> fn;
  double bound = 1.0;
  double lipschitz = 1.0;

  double operator()(double x) const { return fn(x); }

  void check_on(const pde::Axis& axis) const {
    detail::require(static_cast<bool>(fn), "BoundedLipschitz: empty function");
    detail::require(std::isfinite(bound) && bound >= 0.0,
                    "BoundedLipschitz: phi must be bounded (finite sup-norm bound required)");
    detail::require(std::isfinite(lipschitz) && lipschitz >= 0.0, "BoundedLipschitz: Lipschitz constant must be finite");
    const double slack = 1e-12 * std::max(1.0, bound);
    double prev = 0.0;
    for (int i = 0; i < axis.n; ++i) {
      const double x = axis.x(i), y = fn(x);
      detail::require(std::abs(y) <= bound + slack,
                      detail::concat("BoundedLipschitz: |phi(", x, ")| = ", std::abs(y), " exceeds bound ", bound));
      if (i > 0)
        detail::require(std::abs(y - prev) <= lipschitz * axis.step() * (1.0 + 1e-9) + slack,
                        detail::concat("BoundedLipschitz: Lipschitz constant ", lipschitz, " violated near x = ", x));
      prev = y;
    }
  }
};

/// min(max(x, -r), r)
inline BoundedLipschitz clipped_identity(double r) {
  return {[r](double x) { return std::clamp(x, -r, r); }, r, 1.0};
}

/// Driver f = b(t) z, g = d(t) z on state B.
struct TildeProblem {
  DriftSpec drift;
  BoundedLipschitz phi;
  VolBounds vol;

  int state_dim() const noexcept { return 1; }
  const VolBounds& bounds() const noexcept { return vol; }
  Point b(double, const Point&) const noexcept { return {0.0, 0.0}; }
  Point h(double, const Point&) const noexcept { return {0.0, 0.0}; }
  Point sigma(double, const Point&) const noexcept { return {1.0, 0.0}; }
  double f(double t, const Point&, double, double z) const { return drift.b(t) * z; }
  double g(double t, const Point&, double, double z) const { return drift.d(t) * z; }
  double terminal(const Point& x) const { return phi(x[0]); }
};

/// Symmetric 1-d grid for E~ or E^ at horizon t: half-width
/// width_sigmas * sigma_hi sqrt(t) plus the largest drift displacement.
inline pde::GridSpec desk_grid(const VolBounds& bounds, const DriftSpec& drift, double horizon, int nx,
                               double width_sigmas = 6.0) {
  const double half = width_sigmas * std::sqrt(bounds.hi() * horizon) +
                      (drift.b.bound() + bounds.hi() * drift.d.bound()) * horizon;
  pde::CflHint hint{bounds.hi(), {1.0, 0.0}, {0.0, 0.0}};
  return pde::make_grid({pde::Axis{-half, half, nx}}, horizon, hint);
}

/// Value field of E~_t[phi(B_T)] on the grid.
inline pde::ValueField tilde_field(const DriftSpec& drift, const BoundedLipschitz& phi, const VolBounds& bounds,
                                   const pde::GridSpec& grid, pde::KeepLayers keep = pde::KeepLayers::all) {
  detail::require(grid.dim() == 1, "tilde_expect: the state is B, one dimension");
  phi.check_on(grid.axes[0]);
  return pde::solve_feynman_kac(TildeProblem{drift, phi, bounds}, grid, keep);
}

/// E~[phi(B_T)] with T = grid.horizon.
inline double tilde_expect(const DriftSpec& drift, const BoundedLipschitz& phi, const VolBounds& bounds,
                           const pde::GridSpec& grid) {
  return tilde_field(drift, phi, bounds, grid, pde::KeepLayers::endpoints).interpolate(0, {0.0, 0.0});
}

/// E^[phi(B_T) exp(int d dB - 1/2 int d^2 d<B>)] on the two-point lattice.
inline double tilde_expect_weighted(const DriftSpec& drift, const BoundedLipschitz& phi, const VolBounds& bounds,
                                    double horizon, int steps) {
  const LatticeModel model{bounds, horizon, steps};
  model.validate();
  for (int k = 0; k < steps; ++k)
    detail::require(drift.b(k * model.dt()) == 0.0, "tilde_expect_weighted: requires b = 0");
  detail::require(std::isfinite(phi.bound), "tilde_expect_weighted: phi must be bounded");
  const double dt = model.dt();
  return lattice_value(
      model, StateUse::b_only,
      [&](int, double t, double v, double dB) {
        const double d = drift.d(t);
        return std::exp(d * dB - 0.5 * d * d * v * dt);
      },
      [](int, double, double, double, double) { return 0.0; }, [&](double b, double) { return phi(b); });
}

struct TransformedPath {
  ControlledPath base;
  std::vector<double> drift_ds;   // running sum of b dt
  std::vector<double> drift_dqv;  // running sum of d v dt
  std::vector<double> bbar;       // size steps + 1
};

/// Bbar_k = B_k - sum_{j<k} b(t_j) dt - sum_{j<k} d(t_j) v_j dt.
inline TransformedPath transform_path(const ControlledPath& path, const DriftSpec& drift) {
  TransformedPath tp{path, {0.0}, {0.0}, {path.B.front()}};
  for (std::size_t k = 0; k < path.steps(); ++k) {
    const double t = path.time(k);
    tp.drift_ds.push_back(tp.drift_ds.back() + drift.b(t) * path.dt);
    tp.drift_dqv.push_back(tp.drift_dqv.back() + drift.d(t) * path.v[k] * path.dt);
    tp.bbar.push_back(path.B[k + 1] - tp.drift_ds.back() - tp.drift_dqv.back());
  }
  return tp;
}

/// B recovered from Bbar and the drift sums (inverse of transform_path up
/// to rounding).
inline std::vector<double> recover_b(const TransformedPath& tp) {
  std::vector<double> b(tp.bbar.size());
  for (std::size_t k = 0; k < b.size(); ++k) b[k] = tp.bbar[k] + tp.drift_ds[k] + tp.drift_dqv[k];
  return b;
}

/// State (B, A) with A = int d d<B>: terminal phi(x1 - int_0^T b ds - x2).
struct PathSpaceProblem {
  DriftSpec drift;
  BoundedLipschitz phi;
  VolBounds vol;
  double horizon;

  int state_dim() const noexcept { return 2; }
  const VolBounds& bounds() const noexcept { return vol; }
  Point b(double, const Point&) const noexcept { return {0.0, 0.0}; }
  Point h(double t, const Point&) const { return {0.0, drift.d(t)}; }
  Point sigma(double, const Point&) const noexcept { return {1.0, 0.0}; }
  double f(double t, const Point&, double, double z) const { return drift.b(t) * z; }
  double g(double t, const Point&, double, double z) const { return drift.d(t) * z; }
  double terminal(const Point& x) const { return phi(x[0] - drift.b.integral(horizon) - x[1]); }
};

/// State Bbar directly: dBbar = -b dt - d d<B> + dB, so H picks up -2 d u_x
/// against +2 d u_x from g and the b terms cancel as well.
struct ReducedProblem {
  DriftSpec drift;
  BoundedLipschitz phi;
  VolBounds vol;

  int state_dim() const noexcept { return 1; }
  const VolBounds& bounds() const noexcept { return vol; }
  Point b(double t, const Point&) const { return {-drift.b(t), 0.0}; }
  Point h(double t, const Point&) const { return {-drift.d(t), 0.0}; }
  Point sigma(double, const Point&) const noexcept { return {1.0, 0.0}; }
  double f(double t, const Point&, double, double z) const { return drift.b(t) * z; }
  double g(double t, const Point&, double, double z) const { return drift.d(t) * z; }
  double terminal(const Point& x) const { return phi(x[0]); }
};

struct InvarianceGrid {
  double dx1 = 0.1;       // B step of the path-space route
  double dx2 = 0.02;      // step in A = int d d<B>
  double dx_line = 0.02;  // Bbar step of the reduced route
  double width_sigmas = 6.0;

  /// All steps divided by `factor`.
  InvarianceGrid refined(double factor) const { return {dx1 / factor, dx2 / factor, dx_line / factor, width_sigmas}; }
};

namespace detail_ {

inline double half_width(const DriftSpec& drift, const VolBounds& bounds, double t, double width_sigmas) {
  return width_sigmas * std::sqrt(bounds.hi() * t) + (drift.b.bound() + bounds.hi() * drift.d.bound()) * t;
}

/// Odd node count with 0 on the grid and spacing exactly dx.
inline pde::Axis centred_axis(double half, double dx) {
  const int m = static_cast<int>(std::ceil(half / dx));
  return {-m * dx, m * dx, 2 * m + 1};
}

}  // namespace detail_

/// Grid for PathSpaceProblem at horizon t.
inline pde::GridSpec path_space_grid(const DriftSpec& drift, const VolBounds& bounds, double t,
                                     const InvarianceGrid& res) {
  const pde::Axis ax1 = detail_::centred_axis(detail_::half_width(drift, bounds, t, res.width_sigmas), res.dx1);
  // A ranges over [int min(d lo, d hi), int max(d lo, d hi)] along every path.
  const double a_lo = std::min(drift.d.min_value() * bounds.hi(), drift.d.min_value() * bounds.lo());
  const double a_hi = std::max(drift.d.max_value() * bounds.hi(), drift.d.max_value() * bounds.lo());
  pde::Axis ax2{-res.dx2, res.dx2, 3};
  if (!drift.d.is_zero()) {
    const double margin = 0.1 * (a_hi - a_lo) * t + 4.0 * res.dx2;
    const int below = static_cast<int>(std::ceil((std::max(0.0, -std::min(0.0, a_lo * t)) + margin) / res.dx2));
    const int above = static_cast<int>(std::ceil((std::max(0.0, a_hi * t) + margin) / res.dx2));
    ax2 = pde::Axis{-below * res.dx2, above * res.dx2, below + above + 1};
  }
  pde::CflHint hint{bounds.hi(), {1.0, 0.0}, {0.0, bounds.hi() * drift.d.bound()}};
  return pde::make_grid({ax1, ax2}, t, hint);
}

/// One-dimensional grid with spacing dx; `transport` adds the first-order
/// CFL term of the reduced route.
inline pde::GridSpec line_grid(const DriftSpec& drift, const VolBounds& bounds, double t, double dx,
                               double width_sigmas, bool transport) {
  const pde::Axis ax = detail_::centred_axis(detail_::half_width(drift, bounds, t, width_sigmas), dx);
  const double first = transport ? drift.b.bound() + bounds.hi() * drift.d.bound() : 0.0;
  return pde::make_grid({ax}, t, pde::CflHint{bounds.hi(), {1.0, 0.0}, {first, 0.0}});
}

/// E~[phi(Bbar_t)] on the path-space state (B, int d d<B>).
inline double tilde_of_bbar(const DriftSpec& drift, const BoundedLipschitz& phi, const VolBounds& bounds, double t,
                            const InvarianceGrid& res) {
  const auto grid = path_space_grid(drift, bounds, t, res);
  phi.check_on(grid.axes[0]);
  const PathSpaceProblem p{drift, phi, bounds, t};
  return pde::solve_feynman_kac(p, grid, pde::KeepLayers::endpoints).interpolate(0, {0.0, 0.0});
}

/// E~[phi(Bbar_t)] on the one-dimensional state Bbar.
inline double tilde_of_bbar_reduced(const DriftSpec& drift, const BoundedLipschitz& phi, const VolBounds& bounds,
                                    double t, const InvarianceGrid& res) {
  const auto grid = line_grid(drift, bounds, t, res.dx_line, res.width_sigmas, true);
  phi.check_on(grid.axes[0]);
  const ReducedProblem p{drift, phi, bounds};
  return pde::solve_feynman_kac(p, grid, pde::KeepLayers::endpoints).interpolate(0, {0.0, 0.0});
}

/// E^[phi(B_t)] by the G-heat equation with B step dx.
inline double hat_of_b(const DriftSpec& drift, const BoundedLipschitz& phi, const VolBounds& bounds, double t,
                       double dx, double width_sigmas) {
  const auto grid = line_grid(drift, bounds, t, dx, width_sigmas, false);
  phi.check_on(grid.axes[0]);
  return pde::solve_gheat(bounds, phi, grid, pde::KeepLayers::endpoints).interpolate(grid.nt, {0.0, 0.0});
}

struct InvarianceReport {
  std::vector<double> times;
  std::vector<double> tilde_values;          // path-space route
  std::vector<double> tilde_values_reduced;  // Bbar-state route
  std::vector<double> hat_values;            // G-heat on the path-space B axis
  std::vector<double> hat_values_reduced;    // G-heat on the reduced route's axis
  std::vector<double> diffs;                 // worse of the two routes
  double tol = 0.0;
  bool pass = false;

  nlohmann::json to_json() const {
    return {{"times", times},
            {"tilde_values", tilde_values},
            {"tilde_values_reduced", tilde_values_reduced},
            {"hat_values", hat_values},
            {"hat_values_reduced", hat_values_reduced},
            {"diffs", diffs},
            {"tol", tol},
            {"pass", pass}};
  }
};

/// Compares E~[phi(Bbar_t)] with E^[phi(B_t)] at each t. Each route is
/// paired with a G-heat solve on its own B axis, so with b = d = 0 both
/// pairs run identical arithmetic.
inline InvarianceReport verify_invariance(const DriftSpec& drift, const BoundedLipschitz& phi,
                                          const std::vector<double>& times, double tol, const VolBounds& bounds,
                                          const InvarianceGrid& res = {}) {
  detail::require(!times.empty(), "verify_invariance: empty time list");
  detail::require(tol >= 0.0 && std::isfinite(tol), "verify_invariance: tol must be finite and nonnegative");
  InvarianceReport r;
  r.tol = tol;
  r.pass = true;
  for (double t : times) {
    detail::require(t > 0.0 && std::isfinite(t), detail::concat("verify_invariance: time ", t, " must be positive"));
    const double tilde = tilde_of_bbar(drift, phi, bounds, t, res);
    const double reduced = tilde_of_bbar_reduced(drift, phi, bounds, t, res);
    const double hat = hat_of_b(drift, phi, bounds, t, res.dx1, res.width_sigmas);
    const double hat_line = hat_of_b(drift, phi, bounds, t, res.dx_line, res.width_sigmas);
    const double diff = std::max(std::abs(tilde - hat), std::abs(reduced - hat_line));
    r.times.push_back(t);
    r.tilde_values.push_back(tilde);
    r.tilde_values_reduced.push_back(reduced);
    r.hat_values.push_back(hat);
    r.hat_values_reduced.push_back(hat_line);
    r.diffs.push_back(diff);
    r.pass = r.pass && diff <= tol;
  }
  return r;
}

}  // namespace gexp::girsanov
