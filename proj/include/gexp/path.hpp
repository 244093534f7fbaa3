#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "gexp/gcore.hpp"

namespace gexp {

/// A sampled path of (B, <B>) driven by a variance control.
///
/// Step k uses variance v[k] and sign s[k]; dB[k] = s[k] sqrt(v[k] dt).
/// A zero sign freezes the noise (dB = 0) while <B> still grows by v dt,
/// which is how deterministic test paths are built.
struct ControlledPath {
  double dt = 0.0;
  std::vector<double> v;
  std::vector<int> signs;
  std::vector<double> dB;
  std::vector<double> B;   // size steps + 1, B[0] = 0
  std::vector<double> qv;  // size steps + 1, qv[0] = 0

  std::size_t steps() const noexcept { return v.size(); }
  double time(std::size_t k) const noexcept { return static_cast<double>(k) * dt; }
};

inline ControlledPath make_controlled_path(const VolBounds& bounds, double dt, std::span<const double> control,
                                           std::span<const int> signs) {
  detail::require(dt > 0.0 && std::isfinite(dt), "path: dt must be positive");
  detail::require(control.size() == signs.size(),
                  detail::concat("path: ", control.size(), " controls but ", signs.size(), " signs"));
  ControlledPath p;
  p.dt = dt;
  p.v.assign(control.begin(), control.end());
  p.signs.assign(signs.begin(), signs.end());
  p.B.assign(1, 0.0);
  p.qv.assign(1, 0.0);
  for (std::size_t k = 0; k < control.size(); ++k) {
    detail::require(bounds.contains(control[k]), detail::concat("path: control ", control[k], " at step ", k,
                                                                " outside [", bounds.lo(), ", ", bounds.hi(), "]"));
    detail::require(signs[k] >= -1 && signs[k] <= 1, detail::concat("path: sign at step ", k, " must be -1, 0 or 1"));
    const double inc = signs[k] * std::sqrt(control[k] * dt);
    p.dB.push_back(inc);
    p.B.push_back(p.B.back() + inc);
    p.qv.push_back(p.qv.back() + control[k] * dt);
  }
  return p;
}

}  // namespace gexp
