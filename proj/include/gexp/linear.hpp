#pragma once

// Explicit solutions of linear G-BSDEs
//
//   Y_t = xi + int_t^T (a Y + b Z + m) ds + int_t^T (c Y + d Z + n) d<B>
//         - int_t^T Z dB - (K_T - K_t)
//
// evaluated as Y_0 = E^[X_T xi + int m X ds + int n X d<B>] with X_0 = 1,
// on the two-point control lattice. The multiplicative weight X depends on
// which coefficients are present:
//
//   b = d = 0 : X_t = exp(int a ds + int c d<B>)
//   b = 0     : X_t = exp(int a ds + int (c - d^2/2) d<B> + int d dB)
//   general   : X_t = exp(int (a - b d) ds + int c d<B>) E^B_t E^B~_t
//
// where in the general case the auxiliary B~ = int v^-1 dB carries the
// b Z term. Coefficients are deterministic in t; m, n and xi may read
// (t, B, <B>).

#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "gexp/gcore.hpp"
#include "gexp/lattice.hpp"
#include "gexp/path.hpp"

namespace gexp::linear {

using TimeFn = std::function<double(double t)>;
using SourceFn = std::function<double(double t, double b, double qv)>;
using TerminalFn = std::function<double(double b, double qv)>;

/// Empty functions are read as identically zero.
struct LinearBSDESpec {
  TimeFn a, b, c, d;
  SourceFn m, n;
  TerminalFn xi;
  double horizon = 1.0;
  VolBounds bounds{1.0, 1.0};
  StateUse state_use = StateUse::full;  // which of (B, <B>) m, n and xi read
};

namespace detail_ {

inline double at(const TimeFn& f, double t) { return f ? f(t) : 0.0; }
inline double at(const SourceFn& f, double t, double b, double qv) { return f ? f(t, b, qv) : 0.0; }
inline double at(const TerminalFn& f, double b, double qv) { return f ? f(b, qv) : 0.0; }

inline bool vanishes(const TimeFn& f, const LatticeModel& m) {
  if (!f) return true;
  for (int k = 0; k < m.steps; ++k)
    if (f(k * m.dt()) != 0.0) return false;
  return true;
}

template <typename WeightFn>
double solve(const LinearBSDESpec& spec, int steps, WeightFn&& weight) {
  const LatticeModel model{spec.bounds, spec.horizon, steps};
  model.validate();
  const double dt = model.dt();
  const auto source = [&](int, double t, double bm, double qv, double v) {
    if (!spec.m && !spec.n) return 0.0;
    return (at(spec.m, t, bm, qv) + at(spec.n, t, bm, qv) * v) * dt;
  };
  const auto terminal = [&](double bm, double qv) { return at(spec.xi, bm, qv); };
  return lattice_value(model, spec.state_use, weight, source, terminal);
}

}  // namespace detail_

/// Largest |a|, |b|, |c|, |d| on the step grid; throws if any is non-finite.
inline double coefficient_bound(const LinearBSDESpec& spec, int steps) {
  const LatticeModel model{spec.bounds, spec.horizon, steps};
  model.validate();
  double bound = 0.0;
  for (const TimeFn* f : {&spec.a, &spec.b, &spec.c, &spec.d}) {
    for (int k = 0; k <= steps; ++k) {
      const double x = detail_::at(*f, k * model.dt());
      detail::require(std::isfinite(x), "linear: coefficient is not finite on the step grid");
      bound = std::max(bound, std::abs(x));
    }
  }
  return bound;
}

/// b = d = 0 (no Z in the driver).
inline double solve_linear_special(const LinearBSDESpec& spec, int steps) {
  const LatticeModel model{spec.bounds, spec.horizon, steps};
  model.validate();
  detail::require(detail_::vanishes(spec.b, model) && detail_::vanishes(spec.d, model),
                  "solve_linear_special: requires b = 0 and d = 0");
  coefficient_bound(spec, steps);
  const double dt = model.dt();
  return detail_::solve(spec, steps, [&](int, double t, double v, double) {
    return std::exp(detail_::at(spec.a, t) * dt + detail_::at(spec.c, t) * v * dt);
  });
}

/// b = 0: the weight is a stochastic exponential in B, no auxiliary space.
inline double solve_linear_b0(const LinearBSDESpec& spec, int steps) {
  const LatticeModel model{spec.bounds, spec.horizon, steps};
  model.validate();
  detail::require(detail_::vanishes(spec.b, model), "solve_linear_b0: requires b = 0");
  coefficient_bound(spec, steps);
  const double dt = model.dt();
  return detail_::solve(spec, steps, [&](int, double t, double v, double dB) {
    const double a = detail_::at(spec.a, t), c = detail_::at(spec.c, t), d = detail_::at(spec.d, t);
    return std::exp(a * dt + (c - 0.5 * d * d) * v * dt + d * dB);
  });
}

/// General case through the extended space with dB~ = dB / v.
inline double solve_linear_extended(const LinearBSDESpec& spec, int steps) {
  coefficient_bound(spec, steps);
  const double dt = spec.horizon / steps;
  return detail_::solve(spec, steps, [&](int, double t, double v, double dB) {
    const double a = detail_::at(spec.a, t), b = detail_::at(spec.b, t);
    const double c = detail_::at(spec.c, t), d = detail_::at(spec.d, t);
    const double dBt = dB / v;
    return std::exp((a - b * d) * dt + c * v * dt + d * dB - 0.5 * d * d * v * dt + b * dBt -
                    0.5 * b * b * dt / v);
  });
}

/// Right-hand side of the Gronwall inequality at t = 0 for
/// f(s, y) = a y + m, g(s, y) = c y + n with a, c >= 0.
inline double gronwall_bound(const LinearBSDESpec& spec, int steps) {
  const LatticeModel model{spec.bounds, spec.horizon, steps};
  model.validate();
  for (int k = 0; k < steps; ++k) {
    const double t = k * model.dt();
    detail::require(detail_::at(spec.a, t) >= 0.0,
                    detail::concat("gronwall_bound: a(", t, ") = ", detail_::at(spec.a, t), " is negative"));
    detail::require(detail_::at(spec.c, t) >= 0.0,
                    detail::concat("gronwall_bound: c(", t, ") = ", detail_::at(spec.c, t), " is negative"));
  }
  return solve_linear_special(spec, steps);
}

/// A path of the auxiliary pair (B, B~) with dB~ = dB / v.
struct ExtendedPath {
  ControlledPath base;
  std::vector<double> dBt;         // B~ increments
  std::vector<double> Bt;          // size steps + 1
  std::vector<double> qv_tilde;    // <B~>, increments dt / v
  std::vector<double> cross_inc;   // <B, B~> increments, exactly dt
  std::vector<double> cross;       // <B, B~>, size steps + 1
};

/// B~ is assembled per control level: B~_k = sum_level S_level / level with
/// S_level the running sum of dB over the steps that used that level. Under
/// a single level this is B_k / level bit for bit.
inline ExtendedPath make_extended_path(const VolBounds& bounds, double dt, std::span<const double> control,
                                       std::span<const int> signs) {
  ExtendedPath p{make_controlled_path(bounds, dt, control, signs), {}, {0.0}, {0.0}, {}, {0.0}};
  std::map<double, double> level_sums;
  for (std::size_t k = 0; k < p.base.steps(); ++k) {
    const double v = p.base.v[k];
    p.dBt.push_back(p.base.dB[k] / v);
    level_sums[v] += p.base.dB[k];
    double bt = 0.0;
    for (const auto& [level, sum] : level_sums) bt += sum / level;
    p.Bt.push_back(bt);
    p.qv_tilde.push_back(p.qv_tilde.back() + dt / v);
    // Off-diagonal of [[v, 1], [1, 1/v]] is exactly 1.
    p.cross_inc.push_back(1.0 * dt);
    p.cross.push_back(p.cross.back() + dt);
  }
  return p;
}

}  // namespace gexp::linear
