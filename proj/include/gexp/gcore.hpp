#pragma once

// Volatility-uncertainty parameters and the sublinear generators
// G (interval and finite matrix set) and the extended two-dimensional G~.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace gexp {

/// Raised for any input that violates a documented precondition.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

template <typename... Parts>
std::string concat(const Parts&... parts) {
  std::ostringstream os;
  os.precision(17);
  (os << ... << parts);
  return os.str();
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidInput(what);
}

inline double positive_part(double x) { return x > 0.0 ? x : 0.0; }
inline double negative_part(double x) { return x < 0.0 ? -x : 0.0; }

}  // namespace detail

/// Variance interval [sigma_lo_sq, sigma_hi_sq] of a one-dimensional
/// G-Brownian motion. Always non-degenerate: 0 < lo <= hi.
class VolBounds {
 public:
  VolBounds(double sigma_lo_sq, double sigma_hi_sq)
      : lo_(sigma_lo_sq), hi_(sigma_hi_sq) {
    detail::require(std::isfinite(lo_) && std::isfinite(hi_),
                    "VolBounds: variances must be finite");
    detail::require(lo_ > 0.0, detail::concat("VolBounds: sigma_lo_sq must be > 0, got ", lo_));
    detail::require(lo_ <= hi_, detail::concat("VolBounds: sigma_lo_sq (", lo_,
                                               ") exceeds sigma_hi_sq (", hi_, ")"));
  }

  double lo() const noexcept { return lo_; }
  double hi() const noexcept { return hi_; }
  bool contains(double v) const noexcept { return v >= lo_ && v <= hi_; }
  bool degenerate() const noexcept { return lo_ == hi_; }

  friend bool operator==(const VolBounds&, const VolBounds&) = default;

 private:
  double lo_;
  double hi_;
};

/// G(alpha) = 1/2 (sigma_hi^2 alpha^+ - sigma_lo^2 alpha^-).
///
/// Non-degeneracy in this convention: for alpha >= beta,
/// G(alpha) - G(beta) >= 1/2 sigma_lo^2 (alpha - beta). The constant is
/// 1/2 sigma_lo^2 because G is piecewise linear with slopes sigma_lo^2/2 and
/// sigma_hi^2/2; the full constant sigma_lo^2 does not hold for this G.
inline double g_eval_1d(const VolBounds& bounds, double alpha) noexcept {
  return 0.5 * (bounds.hi() * detail::positive_part(alpha) -
                bounds.lo() * detail::negative_part(alpha));
}

/// Variance that attains the supremum in g_eval_1d; ties go to sigma_hi^2.
inline double g_argmax_1d(const VolBounds& bounds, double alpha) noexcept {
  return alpha >= 0.0 ? bounds.hi() : bounds.lo();
}

/// Finite set of symmetric positive semidefinite d x d matrices standing in
/// for the convex covariance set. Since tr[gamma A] is linear in gamma, the
/// extreme points of the convex hull suffice.
class GammaSet {
 public:
  explicit GammaSet(std::vector<Eigen::MatrixXd> matrices) : matrices_(std::move(matrices)) {
    detail::require(!matrices_.empty(), "GammaSet: at least one matrix required");
    const auto d = matrices_.front().rows();
    detail::require(d > 0, "GammaSet: empty matrix");
    for (std::size_t i = 0; i < matrices_.size(); ++i) {
      const auto& m = matrices_[i];
      detail::require(m.rows() == d && m.cols() == d,
                      detail::concat("GammaSet: matrix ", i, " is not ", d, "x", d));
      detail::require(m.allFinite(), detail::concat("GammaSet: matrix ", i, " has non-finite entries"));
      const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
      detail::require((m - m.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * scale,
                      detail::concat("GammaSet: matrix ", i, " is not symmetric"));
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m, Eigen::EigenvaluesOnly);
      detail::require(eig.eigenvalues().minCoeff() >= -1e-12 * scale,
                      detail::concat("GammaSet: matrix ", i, " is not positive semidefinite"));
    }
  }

  /// The two-point set {lo I, hi I} in dimension d.
  static GammaSet from_bounds(const VolBounds& bounds, Eigen::Index d = 1) {
    return GammaSet({bounds.lo() * Eigen::MatrixXd::Identity(d, d),
                     bounds.hi() * Eigen::MatrixXd::Identity(d, d)});
  }

  Eigen::Index dim() const noexcept { return matrices_.front().rows(); }
  const std::vector<Eigen::MatrixXd>& matrices() const noexcept { return matrices_; }

 private:
  std::vector<Eigen::MatrixXd> matrices_;
};

/// G(A) = 1/2 max_{gamma in Gamma} tr[gamma A].
inline double g_eval_matrix(const GammaSet& gamma, const Eigen::MatrixXd& a) {
  detail::require(a.rows() == gamma.dim() && a.cols() == gamma.dim(),
                  detail::concat("g_eval_matrix: expected ", gamma.dim(), "x", gamma.dim(),
                                 " matrix, got ", a.rows(), "x", a.cols()));
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  detail::require((a - a.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * scale,
                  "g_eval_matrix: argument is not symmetric");
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& g : gamma.matrices()) best = std::max(best, (g * a).trace());
  return 0.5 * best;
}

/// Volatility bounds of the auxiliary (B, B~) space whose covariance family
/// is [[v, 1], [1, 1/v]] for v in [lo, hi].
struct ExtendedGSpec {
  VolBounds bounds;
};

using Sym2 = std::array<double, 3>;  // {a11, a12, a22}

/// G~(A) = 1/2 sup_v (a11 v + 2 a12 + a22 / v).
inline double g_tilde_eval(const ExtendedGSpec& spec, const Sym2& a) noexcept {
  const auto [a11, a12, a22] = a;
  const auto value = [&](double v) { return 0.5 * (a11 * v + 2.0 * a12 + a22 / v); };
  const double lo = spec.bounds.lo();
  const double hi = spec.bounds.hi();
  double best = std::max(value(lo), value(hi));
  // Both entries negative: v -> a11 v + a22 / v is concave with an interior
  // maximum at sqrt(a22 / a11).
  if (a11 < 0.0 && a22 < 0.0) {
    const double v_star = std::sqrt(a22 / a11);
    if (v_star > lo && v_star < hi) best = std::max(best, value(v_star));
  }
  return best;
}

}  // namespace gexp
