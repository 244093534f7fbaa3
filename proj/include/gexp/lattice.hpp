#pragma once

// Recombining backward induction over the two-point control model.
//
// At every step the controller picks v in {lo, hi} and B moves by
// +-sqrt(v dt). The state after k steps is the count of each (choice, sign)
// pair, which pins down B and <B> exactly. The value recursion is
//
//   V_k = max_v ( 1/2 sum_{s=+-} w_k(v, s) V_{k+1}(child) + src_k(B, <B>, v) )
//
// which is the same discrete model the oracle enumerates on trees with
// vol_choices = {lo, hi}, so both agree to rounding.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "gexp/gcore.hpp"

namespace gexp {

/// Which state variables the terminal and source terms read. Narrower
/// dependence shrinks the lattice; a term that reads a variable it declared
/// unused sees NaN and the solve fails loudly.
enum class StateUse { none, b_only, full };

struct LatticeModel {
  VolBounds bounds;
  double horizon = 1.0;
  int steps = 100;

  double dt() const noexcept { return horizon / steps; }
  void validate() const {
    detail::require(horizon > 0.0 && std::isfinite(horizon), "LatticeModel: horizon must be positive");
    detail::require(steps >= 1, "LatticeModel: steps must be >= 1");
  }
};

/// Per-step one-period weights for the four (choice, sign) branches.
struct StepWeights {
  double lo_up, lo_down, hi_up, hi_down;
};

namespace lattice_detail {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

template <typename WeightFn>
StepWeights weights_at(const LatticeModel& m, int k, WeightFn& weight) {
  const double dt = m.dt();
  const double t = k * dt;
  const double lo = m.bounds.lo(), hi = m.bounds.hi();
  const double s_lo = std::sqrt(lo * dt), s_hi = std::sqrt(hi * dt);
  return {weight(k, t, lo, +s_lo), weight(k, t, lo, -s_lo), weight(k, t, hi, +s_hi),
          weight(k, t, hi, -s_hi)};
}

template <typename WeightFn, typename SourceFn, typename TerminalFn>
double solve_none(const LatticeModel& m, WeightFn& weight, SourceFn& source, TerminalFn& terminal) {
  const double dt = m.dt();
  const double lo = m.bounds.lo(), hi = m.bounds.hi();
  double v_next = terminal(kNaN, kNaN);
  for (int k = m.steps - 1; k >= 0; --k) {
    const StepWeights w = weights_at(m, k, weight);
    const double t = k * dt;
    const double a = 0.5 * (w.lo_up + w.lo_down) * v_next + source(k, t, kNaN, kNaN, lo);
    const double b = 0.5 * (w.hi_up + w.hi_down) * v_next + source(k, t, kNaN, kNaN, hi);
    v_next = std::max(a, b);
  }
  return v_next;
}

// State (net_lo, net_hi), reachable set |net_lo| + |net_hi| <= k with the
// parity of k. Stored on the (2k+1)^2 square; only reachable nodes are
// touched.
template <typename WeightFn, typename SourceFn, typename TerminalFn>
double solve_b_only(const LatticeModel& m, WeightFn& weight, SourceFn& source, TerminalFn& terminal) {
  const int n = m.steps;
  const double dt = m.dt();
  const double lo = m.bounds.lo(), hi = m.bounds.hi();
  const double u_lo = std::sqrt(lo * dt), u_hi = std::sqrt(hi * dt);
  const auto width = [](int k) { return 2 * k + 1; };

  std::vector<double> next(static_cast<std::size_t>(width(n)) * width(n));
  std::vector<double> cur;
  for (int a = -n; a <= n; ++a) {
    const int rem = n - std::abs(a);
    for (int b = -rem; b <= rem; b += 2) {
      next[static_cast<std::size_t>(a + n) * width(n) + (b + n)] = terminal(a * u_lo + b * u_hi, kNaN);
    }
  }
  for (int k = n - 1; k >= 0; --k) {
    const StepWeights w = weights_at(m, k, weight);
    const double t = k * dt;
    const int wk = width(k), wn = width(k + 1);
    cur.assign(static_cast<std::size_t>(wk) * wk, 0.0);
    const auto at_next = [&](int a, int b) {
      return next[static_cast<std::size_t>(a + k + 1) * wn + (b + k + 1)];
    };
    for (int a = -k; a <= k; ++a) {
      const int rem = k - std::abs(a);
      for (int b = -rem; b <= rem; b += 2) {
        const double bm = a * u_lo + b * u_hi;
        const double via_lo =
            0.5 * (w.lo_up * at_next(a + 1, b) + w.lo_down * at_next(a - 1, b)) + source(k, t, bm, kNaN, lo);
        const double via_hi =
            0.5 * (w.hi_up * at_next(a, b + 1) + w.hi_down * at_next(a, b - 1)) + source(k, t, bm, kNaN, hi);
        cur[static_cast<std::size_t>(a + k) * wk + (b + k)] = std::max(via_lo, via_hi);
      }
    }
    next.swap(cur);
  }
  return next[0];
}

// State (n_hi, p_lo, p_hi): n_hi steps used hi, p_lo and p_hi of them went up.
class FullIndex {
 public:
  explicit FullIndex(int k) : k_(k), offsets_(static_cast<std::size_t>(k) + 2, 0) {
    for (int j = 0; j <= k; ++j)
      offsets_[j + 1] = offsets_[j] + static_cast<std::size_t>(k - j + 1) * (j + 1);
  }
  std::size_t size() const noexcept { return offsets_.back(); }
  std::size_t operator()(int n_hi, int p_lo, int p_hi) const noexcept {
    return offsets_[n_hi] + static_cast<std::size_t>(p_lo) * (n_hi + 1) + p_hi;
  }
  int k() const noexcept { return k_; }

 private:
  int k_;
  std::vector<std::size_t> offsets_;
};

template <typename WeightFn, typename SourceFn, typename TerminalFn>
double solve_full(const LatticeModel& m, WeightFn& weight, SourceFn& source, TerminalFn& terminal) {
  const int n = m.steps;
  const double dt = m.dt();
  const double lo = m.bounds.lo(), hi = m.bounds.hi();
  const double u_lo = std::sqrt(lo * dt), u_hi = std::sqrt(hi * dt);
  const auto state = [&](int k, int n_hi, int p_lo, int p_hi, double& bm, double& qv) {
    const int n_lo = k - n_hi;
    bm = (2 * p_lo - n_lo) * u_lo + (2 * p_hi - n_hi) * u_hi;
    qv = (n_lo * lo + n_hi * hi) * dt;
  };

  FullIndex idx_next(n);
  std::vector<double> next(idx_next.size());
  for (int n_hi = 0; n_hi <= n; ++n_hi)
    for (int p_lo = 0; p_lo <= n - n_hi; ++p_lo)
      for (int p_hi = 0; p_hi <= n_hi; ++p_hi) {
        double bm, qv;
        state(n, n_hi, p_lo, p_hi, bm, qv);
        next[idx_next(n_hi, p_lo, p_hi)] = terminal(bm, qv);
      }
  std::vector<double> cur;
  for (int k = n - 1; k >= 0; --k) {
    const StepWeights w = weights_at(m, k, weight);
    const double t = k * dt;
    FullIndex idx(k);
    cur.assign(idx.size(), 0.0);
    for (int n_hi = 0; n_hi <= k; ++n_hi)
      for (int p_lo = 0; p_lo <= k - n_hi; ++p_lo)
        for (int p_hi = 0; p_hi <= n_hi; ++p_hi) {
          double bm, qv;
          state(k, n_hi, p_lo, p_hi, bm, qv);
          const double via_lo = 0.5 * (w.lo_up * next[idx_next(n_hi, p_lo + 1, p_hi)] +
                                       w.lo_down * next[idx_next(n_hi, p_lo, p_hi)]) +
                                source(k, t, bm, qv, lo);
          const double via_hi = 0.5 * (w.hi_up * next[idx_next(n_hi + 1, p_lo, p_hi + 1)] +
                                       w.hi_down * next[idx_next(n_hi + 1, p_lo, p_hi)]) +
                                source(k, t, bm, qv, hi);
          cur[idx(n_hi, p_lo, p_hi)] = std::max(via_lo, via_hi);
        }
    next.swap(cur);
    idx_next = std::move(idx);
  }
  return next[0];
}

}  // namespace lattice_detail

/// Runs the value recursion and returns V_0.
///
/// weight(k, t, v, dB) -> one-step multiplicative weight (must not depend on
/// the state); source(k, t, B, QV, v) -> additive term already multiplied by
/// dt; terminal(B, QV) -> terminal payoff.
template <typename WeightFn, typename SourceFn, typename TerminalFn>
double lattice_value(const LatticeModel& model, StateUse use, WeightFn&& weight, SourceFn&& source,
                     TerminalFn&& terminal) {
  model.validate();
  double v = 0.0;
  switch (use) {
    case StateUse::none:
      v = lattice_detail::solve_none(model, weight, source, terminal);
      break;
    case StateUse::b_only:
      v = lattice_detail::solve_b_only(model, weight, source, terminal);
      break;
    case StateUse::full:
      v = lattice_detail::solve_full(model, weight, source, terminal);
      break;
  }
  if (!std::isfinite(v))
    throw InvalidInput(
        "lattice: non-finite value; a term probably reads a state variable outside its declared StateUse");
  return v;
}

}  // namespace gexp
