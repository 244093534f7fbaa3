#pragma once

// Explicit monotone finite differences for
//
//   G-heat:        d_t u - G(u_xx) = 0,              u(0, .) = phi
//   Feynman-Kac:   d_t u + G(H) + <b, Du> + f = 0,   u(T, .) = Phi
//                  H = <D^2u sigma, sigma> + 2 <Du, h> + 2 g
//
// on 1 or 2 state dimensions driven by a one-dimensional G-Brownian motion.
// Second differences are central, <b, Du> and <Du, h> are upwinded by the
// sign of the frozen coefficient, and z = <sigma, Du> uses central
// differences. Coefficients are sampled at the left end of each step.

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <vector>

#include "gexp/gcore.hpp"

namespace gexp::pde {

using Point = std::array<double, 2>;

enum class Boundary {
  clamp_extrapolate,        // linear-extrapolation ghost nodes
  dirichlet_from_terminal,  // edge nodes frozen at the terminal / initial data
};

class CflViolation : public InvalidInput {
 public:
  CflViolation(const std::string& what, double ratio) : InvalidInput(what), ratio_(ratio) {}
  double ratio() const noexcept { return ratio_; }

 private:
  double ratio_;
};

struct Axis {
  double lo = -1.0;
  double hi = 1.0;
  int n = 3;

  double step() const noexcept { return (hi - lo) / (n - 1); }
  double x(int i) const noexcept { return i == n - 1 ? hi : lo + i * step(); }
};

struct GridSpec {
  std::vector<Axis> axes;
  double horizon = 1.0;
  int nt = 1;
  Boundary boundary = Boundary::clamp_extrapolate;

  int dim() const noexcept { return static_cast<int>(axes.size()); }
  double dt() const noexcept { return horizon / nt; }
  std::size_t nodes() const noexcept {
    std::size_t s = 1;
    for (const auto& a : axes) s *= static_cast<std::size_t>(a.n);
    return s;
  }
  int n2() const noexcept { return dim() == 2 ? axes[1].n : 1; }

  void validate() const {
    detail::require(dim() == 1 || dim() == 2, detail::concat("GridSpec: state_dim must be 1 or 2, got ", dim()));
    for (const auto& a : axes) {
      detail::require(a.n >= 3, detail::concat("GridSpec: need at least 3 points per dimension, got ", a.n));
      detail::require(a.hi > a.lo && std::isfinite(a.lo) && std::isfinite(a.hi), "GridSpec: empty axis");
    }
    detail::require(horizon > 0.0 && std::isfinite(horizon), "GridSpec: horizon must be positive");
    detail::require(nt >= 1, "GridSpec: nt must be >= 1");
  }
};

/// Bounds on coefficient magnitudes used to pick a stable time step.
struct CflHint {
  double sigma_hi_sq = 1.0;
  Point sigma_max{1.0, 0.0};   // max |sigma_a|
  Point first_order{0.0, 0.0};  // max |b_a| + sigma_hi^2 |h_a|
  double diffusion_ratio = 0.5;
};

/// Smallest nt with sum_a sigma_hi^2 sigma_a^2 dt / dx_a^2 <= ratio and a
/// nonnegative centre coefficient.
inline GridSpec make_grid(std::vector<Axis> axes, double horizon, const CflHint& hint,
                          Boundary boundary = Boundary::clamp_extrapolate) {
  GridSpec g{std::move(axes), horizon, 1, boundary};
  g.validate();
  double diff = 0.0, centre = 0.0;
  for (int a = 0; a < g.dim(); ++a) {
    const double dx = g.axes[a].step();
    diff += hint.sigma_hi_sq * hint.sigma_max[a] * hint.sigma_max[a] / (dx * dx);
    centre += hint.first_order[a] / dx;
  }
  double dt_max = horizon;
  if (diff > 0.0) dt_max = std::min(dt_max, hint.diffusion_ratio / diff);
  if (2.0 * diff + centre > 0.0) dt_max = std::min(dt_max, 1.0 / (2.0 * diff + centre));
  g.nt = std::max(1, static_cast<int>(std::ceil(horizon / dt_max * (1.0 - 1e-12))));
  while (g.dt() > dt_max) ++g.nt;
  return g;
}

enum class KeepLayers { all, endpoints };

/// u over (time index, node). Node (i, j) is stored at i + n1 * j.
class ValueField {
 public:
  ValueField() = default;
  explicit ValueField(GridSpec grid) : grid_(std::move(grid)) {}

  const GridSpec& grid() const noexcept { return grid_; }
  double time(int k) const noexcept { return k == grid_.nt ? grid_.horizon : k * grid_.dt(); }

  bool has_layer(int k) const { return layers_.count(k) != 0; }
  const std::vector<double>& layer(int k) const {
    auto it = layers_.find(k);
    detail::require(it != layers_.end(), detail::concat("ValueField: time layer ", k, " was not stored"));
    return it->second;
  }
  const std::map<int, std::vector<double>>& layers() const noexcept { return layers_; }
  void set_layer(int k, std::vector<double> u) { layers_[k] = std::move(u); }

  double at(int k, int i, int j = 0) const { return layer(k)[index(i, j)]; }
  std::size_t index(int i, int j = 0) const noexcept {
    return static_cast<std::size_t>(i) + static_cast<std::size_t>(grid_.axes[0].n) * j;
  }

  bool inside(const Point& x) const noexcept {
    for (int a = 0; a < grid_.dim(); ++a)
      if (!(x[a] >= grid_.axes[a].lo && x[a] <= grid_.axes[a].hi)) return false;
    return true;
  }

  /// Linear (1-d) or bilinear (2-d) interpolation of layer k.
  double interpolate(int k, const Point& x) const {
    return sample(k, x, [&](const std::vector<double>& u, int i, int j) { return u[index(i, j)]; });
  }

  /// Interpolated central-difference gradient (one-sided at edges).
  Point gradient(int k, const Point& x) const {
    Point g{0.0, 0.0};
    for (int a = 0; a < grid_.dim(); ++a)
      g[a] = sample(k, x, [&](const std::vector<double>& u, int i, int j) { return node_d1(u, a, i, j); });
    return g;
  }

  /// Interpolated second difference along axis a.
  double second_derivative(int k, const Point& x, int a) const {
    return sample(k, x, [&](const std::vector<double>& u, int i, int j) { return node_d2(u, a, i, j); });
  }

  /// Writes columns t, x1[, x2], u for every stored layer.
  void write_csv(std::ostream& os) const {
    const auto old_precision = os.precision(17);
    os << (grid_.dim() == 2 ? "t,x1,x2,u\n" : "t,x1,u\n");
    for (const auto& [k, u] : layers_) {
      const double t = time(k);
      for (int j = 0; j < grid_.n2(); ++j)
        for (int i = 0; i < grid_.axes[0].n; ++i) {
          os << t << ',' << grid_.axes[0].x(i);
          if (grid_.dim() == 2) os << ',' << grid_.axes[1].x(j);
          os << ',' << u[index(i, j)] << '\n';
        }
    }
    os.precision(old_precision);
  }

 private:
  double node_d1(const std::vector<double>& u, int a, int i, int j) const {
    const int n = grid_.axes[a].n;
    const int c = a == 0 ? i : j;
    const double h = grid_.axes[a].step();
    const auto val = [&](int m) { return a == 0 ? u[index(m, j)] : u[index(i, m)]; };
    if (c == 0) return (val(1) - val(0)) / h;
    if (c == n - 1) return (val(n - 1) - val(n - 2)) / h;
    return (val(c + 1) - val(c - 1)) / (2.0 * h);
  }
  double node_d2(const std::vector<double>& u, int a, int i, int j) const {
    const int n = grid_.axes[a].n;
    const int c = std::clamp(a == 0 ? i : j, 1, n - 2);
    const double h = grid_.axes[a].step();
    const auto val = [&](int m) { return a == 0 ? u[index(m, j)] : u[index(i, m)]; };
    return (val(c + 1) - 2.0 * val(c) + val(c - 1)) / (h * h);
  }

  template <typename NodeFn>
  double sample(int k, const Point& x, NodeFn&& node) const {
    const auto& u = layer(k);
    detail::require(inside(x), "ValueField: point outside the grid box");
    std::array<int, 2> cell{0, 0};
    std::array<double, 2> w{0.0, 0.0};
    for (int a = 0; a < grid_.dim(); ++a) {
      const auto& ax = grid_.axes[a];
      const double s = (x[a] - ax.lo) / ax.step();
      cell[a] = std::clamp(static_cast<int>(std::floor(s)), 0, ax.n - 2);
      w[a] = s - cell[a];
    }
    if (grid_.dim() == 1) return (1.0 - w[0]) * node(u, cell[0], 0) + w[0] * node(u, cell[0] + 1, 0);
    const int i = cell[0], j = cell[1];
    return (1.0 - w[0]) * (1.0 - w[1]) * node(u, i, j) + w[0] * (1.0 - w[1]) * node(u, i + 1, j) +
           (1.0 - w[0]) * w[1] * node(u, i, j + 1) + w[0] * w[1] * node(u, i + 1, j + 1);
  }

  GridSpec grid_;
  std::map<int, std::vector<double>> layers_;
};

/// What the Feynman-Kac stepper needs from a problem. Coefficient
/// functions take (t, x) with x padded to two components.
template <typename P>
concept FeynmanKacProblem = requires(const P& p, double t, const Point& x, double y, double z) {
  { p.state_dim() } -> std::convertible_to<int>;
  { p.bounds() } -> std::convertible_to<VolBounds>;
  { p.b(t, x) } -> std::convertible_to<Point>;
  { p.h(t, x) } -> std::convertible_to<Point>;
  { p.sigma(t, x) } -> std::convertible_to<Point>;
  { p.f(t, x, y, z) } -> std::convertible_to<double>;
  { p.g(t, x, y, z) } -> std::convertible_to<double>;
  { p.terminal(x) } -> std::convertible_to<double>;
};

using VecFn = std::function<Point(double t, const Point& x)>;
using DriverFn = std::function<double(double t, const Point& x, double y, double z)>;
using TerminalFn = std::function<double(const Point& x)>;

struct Coefficients {
  int state_dim = 1;
  VecFn b, h, sigma;  // empty means zero
};

/// Type-erased problem. Lipschitz constant and growth order of the data are
/// recorded for reporting and spot checks; zero means not recorded.
struct PDEProblem {
  Coefficients coeffs;
  DriverFn f_fn, g_fn;  // empty means zero
  TerminalFn phi;
  VolBounds vol{1.0, 1.0};
  double lipschitz = 0.0;
  int growth_order = 0;

  int state_dim() const { return coeffs.state_dim; }
  const VolBounds& bounds() const { return vol; }
  Point b(double t, const Point& x) const { return coeffs.b ? coeffs.b(t, x) : Point{0.0, 0.0}; }
  Point h(double t, const Point& x) const { return coeffs.h ? coeffs.h(t, x) : Point{0.0, 0.0}; }
  Point sigma(double t, const Point& x) const { return coeffs.sigma ? coeffs.sigma(t, x) : Point{0.0, 0.0}; }
  double f(double t, const Point& x, double y, double z) const { return f_fn ? f_fn(t, x, y, z) : 0.0; }
  double g(double t, const Point& x, double y, double z) const { return g_fn ? g_fn(t, x, y, z) : 0.0; }
  double terminal(const Point& x) const { return phi(x); }
};

namespace detail_ {

inline Point node_point(const GridSpec& g, int i, int j) {
  return {g.axes[0].x(i), g.dim() == 2 ? g.axes[1].x(j) : 0.0};
}

/// Padded copy of a layer with one ghost node per side per dimension.
class Padded {
 public:
  explicit Padded(const GridSpec& g)
      : dim_(g.dim()), n1_(g.axes[0].n), n2_(g.n2()), p1_(n1_ + 2), data_(static_cast<std::size_t>(p1_) * (dim_ == 2 ? n2_ + 2 : 1)) {}

  std::size_t at(int i, int j) const noexcept {
    return static_cast<std::size_t>(i + 1) + static_cast<std::size_t>(p1_) * (dim_ == 2 ? j + 1 : 0);
  }
  std::ptrdiff_t stride(int a) const noexcept { return a == 0 ? 1 : p1_; }
  const double* data() const noexcept { return data_.data(); }

  void load(const std::vector<double>& u) {
    for (int j = 0; j < n2_; ++j)
      for (int i = 0; i < n1_; ++i) data_[at(i, j)] = u[static_cast<std::size_t>(i) + static_cast<std::size_t>(n1_) * j];
    for (int j = 0; j < n2_; ++j) {
      data_[at(-1, j)] = 2.0 * data_[at(0, j)] - data_[at(1, j)];
      data_[at(n1_, j)] = 2.0 * data_[at(n1_ - 1, j)] - data_[at(n1_ - 2, j)];
    }
    if (dim_ == 2) {
      for (int i = -1; i <= n1_; ++i) {
        data_[at(i, -1)] = 2.0 * data_[at(i, 0)] - data_[at(i, 1)];
        data_[at(i, n2_)] = 2.0 * data_[at(i, n2_ - 1)] - data_[at(i, n2_ - 2)];
      }
    }
  }

 private:
  int dim_, n1_, n2_, p1_;
  std::vector<double> data_;
};

inline bool on_edge(const GridSpec& g, int i, int j) {
  if (i == 0 || i == g.axes[0].n - 1) return true;
  return g.dim() == 2 && (j == 0 || j == g.axes[1].n - 1);
}

inline std::vector<double> sample_terminal(const GridSpec& g, const auto& fn) {
  std::vector<double> u(g.nodes());
  for (int j = 0; j < g.n2(); ++j)
    for (int i = 0; i < g.axes[0].n; ++i)
      u[static_cast<std::size_t>(i) + static_cast<std::size_t>(g.axes[0].n) * j] = fn(node_point(g, i, j));
  return u;
}

}  // namespace detail_

/// Checks the stated diffusive condition sum_a sigma_hi^2 sigma_a^2 dt/dx_a^2
/// <= 1/2 and a nonnegative centre coefficient once first-order terms are
/// added, sampling coefficients on every node at up to five times.
template <FeynmanKacProblem P>
void check_cfl(const P& problem, const GridSpec& grid) {
  grid.validate();
  detail::require(problem.state_dim() == grid.dim(),
                  detail::concat("pde: problem has state_dim ", problem.state_dim(), " but grid has ", grid.dim()));
  const double hi = problem.bounds().hi();
  const double dt = grid.dt();
  double worst_diff = 0.0, worst_centre = 0.0;
  const int samples = std::min(grid.nt, 4);
  for (int s = 0; s <= samples; ++s) {
    const int k = grid.nt * s / std::max(samples, 1);
    const double t = k * dt;
    for (int j = 0; j < grid.n2(); ++j)
      for (int i = 0; i < grid.axes[0].n; ++i) {
        const Point x = detail_::node_point(grid, i, j);
        const Point sg = problem.sigma(t, x), b = problem.b(t, x), h = problem.h(t, x);
        double diff = 0.0, first = 0.0;
        for (int a = 0; a < grid.dim(); ++a) {
          const double dx = grid.axes[a].step();
          diff += hi * sg[a] * sg[a] * dt / (dx * dx);
          first += (std::abs(b[a]) + hi * std::abs(h[a])) * dt / dx;
        }
        worst_diff = std::max(worst_diff, diff);
        worst_centre = std::max(worst_centre, 2.0 * diff + first);
      }
  }
  if (worst_diff > 0.5 * (1.0 + 1e-12))
    throw CflViolation(detail::concat("pde: CFL violated, sigma_hi^2 sigma^2 dt/dx^2 = ", worst_diff, " > 0.5"),
                       worst_diff);
  if (worst_centre > 1.0 + 1e-12)
    throw CflViolation(detail::concat("pde: monotonicity violated, centre coefficient ratio ", worst_centre, " > 1"),
                       worst_centre);
}

/// Forward march of d_t u = G(u_xx) from u(0, .) = phi. Layer k holds
/// u(k dt, .).
template <typename PhiFn>
ValueField solve_gheat(const VolBounds& bounds, PhiFn&& phi, const GridSpec& grid,
                       KeepLayers keep = KeepLayers::all) {
  grid.validate();
  detail::require(grid.dim() == 1, "solve_gheat: one state dimension only");
  const double dx = grid.axes[0].step();
  const double ratio = bounds.hi() * grid.dt() / (dx * dx);
  if (ratio > 0.5 * (1.0 + 1e-12))
    throw CflViolation(detail::concat("solve_gheat: CFL violated, sigma_hi^2 dt/dx^2 = ", ratio, " > 0.5"), ratio);

  ValueField field(grid);
  const int n = grid.axes[0].n;
  std::vector<double> u(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) u[i] = phi(grid.axes[0].x(i));
  const std::vector<double> initial = u;
  field.set_layer(0, u);
  std::vector<double> next(u.size());
  std::vector<double> padded(u.size() + 2);
  const double dt = grid.dt(), inv_dx2 = 1.0 / (dx * dx);
  const bool dirichlet = grid.boundary == Boundary::dirichlet_from_terminal;
  for (int k = 0; k < grid.nt; ++k) {
    // Ghost nodes by linear extrapolation, as in solve_feynman_kac.
    std::copy(u.begin(), u.end(), padded.begin() + 1);
    padded[0] = 2.0 * u[0] - u[1];
    padded[n + 1] = 2.0 * u[n - 1] - u[n - 2];
    for (int i = 0; i < n; ++i) {
      const double d2 = (padded[i + 2] - 2.0 * padded[i + 1] + padded[i]) * inv_dx2;
      next[i] = u[i] + dt * g_eval_1d(bounds, d2);
    }
    if (dirichlet) {
      next[0] = initial[0];
      next[n - 1] = initial[n - 1];
    }
    u.swap(next);
    if (keep == KeepLayers::all || k + 1 == grid.nt) field.set_layer(k + 1, u);
  }
  return field;
}

/// Backward march from u(T, .) = Phi. Layer k holds u(k dt, .).
template <FeynmanKacProblem P>
ValueField solve_feynman_kac(const P& problem, const GridSpec& grid, KeepLayers keep = KeepLayers::all) {
  detail::require(problem.state_dim() == 1 || problem.state_dim() == 2,
                  detail::concat("solve_feynman_kac: state_dim must be 1 or 2, got ", problem.state_dim()));
  check_cfl(problem, grid);
  const VolBounds bounds = problem.bounds();
  const int dim = grid.dim();
  const int n1 = grid.axes[0].n, n2 = grid.n2();
  const double dt = grid.dt();
  std::array<double, 2> inv_dx{1.0 / grid.axes[0].step(), dim == 2 ? 1.0 / grid.axes[1].step() : 0.0};
  std::array<double, 2> inv_dx2{0.0, 0.0};
  for (int a = 0; a < dim; ++a) inv_dx2[a] = 1.0 / (grid.axes[a].step() * grid.axes[a].step());

  ValueField field(grid);
  std::vector<double> u = detail_::sample_terminal(grid, [&](const Point& x) { return problem.terminal(x); });
  const std::vector<double> terminal = u;
  field.set_layer(grid.nt, u);
  detail_::Padded pad(grid);
  std::vector<double> next(u.size());
  const bool dirichlet = grid.boundary == Boundary::dirichlet_from_terminal;

  for (int k = grid.nt - 1; k >= 0; --k) {
    const double t = k * dt;
    pad.load(u);
    const double* p = pad.data();
    for (int j = 0; j < n2; ++j) {
      for (int i = 0; i < n1; ++i) {
        const std::size_t out = static_cast<std::size_t>(i) + static_cast<std::size_t>(n1) * j;
        if (dirichlet && detail_::on_edge(grid, i, j)) {
          next[out] = terminal[out];
          continue;
        }
        const Point x = detail_::node_point(grid, i, j);
        const std::size_t c = pad.at(i, j);
        const double y = p[c];
        const Point sg = problem.sigma(t, x);
        const Point bb = problem.b(t, x);
        const Point hh = problem.h(t, x);

        double z = 0.0, quad = 0.0, up_h = 0.0, up_b = 0.0;
        std::array<double, 2> d0{0.0, 0.0};
        for (int a = 0; a < dim; ++a) {
          const std::ptrdiff_t s = pad.stride(a);
          const double fwd = (p[c + s] - y) * inv_dx[a];
          const double bwd = (y - p[c - s]) * inv_dx[a];
          d0[a] = (p[c + s] - p[c - s]) * 0.5 * inv_dx[a];
          const double d2 = (p[c + s] - 2.0 * y + p[c - s]) * inv_dx2[a];
          z += sg[a] * d0[a];
          quad += sg[a] * sg[a] * d2;
          up_h += hh[a] * (hh[a] > 0.0 ? fwd : bwd);
          up_b += bb[a] * (bb[a] > 0.0 ? fwd : bwd);
        }
        if (dim == 2 && sg[0] != 0.0 && sg[1] != 0.0) {
          const std::ptrdiff_t s1 = pad.stride(0), s2 = pad.stride(1);
          const double d12 =
              (p[c + s1 + s2] - p[c + s1 - s2] - p[c - s1 + s2] + p[c - s1 - s2]) * 0.25 * inv_dx[0] * inv_dx[1];
          quad += 2.0 * sg[0] * sg[1] * d12;
        }
        const double hmat = quad + 2.0 * up_h + 2.0 * problem.g(t, x, y, z);
        const double rhs = g_eval_1d(bounds, hmat) + up_b + problem.f(t, x, y, z);
        next[out] = y + dt * rhs;
      }
    }
    u.swap(next);
    if (keep == KeepLayers::all || k == 0) field.set_layer(k, u);
  }
  return field;
}

struct ConvergenceRow {
  double h;
  double value;
  std::optional<double> diff;  // value minus the previous row's value
};

/// Probe value of u(0, probe) on each grid, in order.
template <FeynmanKacProblem P>
std::vector<ConvergenceRow> convergence_table(const P& problem, const std::vector<GridSpec>& grids,
                                              const Point& probe) {
  std::vector<ConvergenceRow> rows;
  for (const auto& g : grids) {
    const auto field = solve_feynman_kac(problem, g, KeepLayers::endpoints);
    const double v = field.interpolate(0, probe);
    std::optional<double> d;
    if (!rows.empty()) d = v - rows.back().value;
    rows.push_back({g.axes[0].step(), v, d});
  }
  return rows;
}

/// Largest observed |c(t,x) - c(t,x')| / |x - x'| over b, h and sigma on
/// random pairs inside the grid box.
template <FeynmanKacProblem P>
double spot_check_lipschitz(const P& problem, const GridSpec& grid, int pairs, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto draw = [&] {
    Point x{0.0, 0.0};
    for (int a = 0; a < grid.dim(); ++a) x[a] = grid.axes[a].lo + unit(rng) * (grid.axes[a].hi - grid.axes[a].lo);
    return x;
  };
  double worst = 0.0;
  for (int n = 0; n < pairs; ++n) {
    const double t = unit(rng) * grid.horizon;
    const Point x = draw(), y = draw();
    double dist = 0.0;
    for (int a = 0; a < grid.dim(); ++a) dist += (x[a] - y[a]) * (x[a] - y[a]);
    dist = std::sqrt(dist);
    if (dist == 0.0) continue;
    double diff = 0.0;
    for (const auto& [cx, cy] : {std::pair{problem.b(t, x), problem.b(t, y)}, std::pair{problem.h(t, x), problem.h(t, y)},
                                 std::pair{problem.sigma(t, x), problem.sigma(t, y)}})
      for (int a = 0; a < grid.dim(); ++a) diff += std::abs(cx[a] - cy[a]);
    worst = std::max(worst, diff / dist);
  }
  return worst;
}

}  // namespace gexp::pde
