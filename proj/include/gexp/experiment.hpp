#pragma once

// Configuration-driven experiment runner. A config is a JSON object
//
//   {"kind": <kind>, "params": {...}, "output": <name>, "seed": <u64>}
//
// Running it writes <out>/<name>.json (report) and, for kinds with tabular
// output, <out>/<name>.csv, and yields a one-line summary. Exit codes:
// 0 pass, 1 config error, 2 verification failure.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "gexp/expr.hpp"
#include "gexp/gcore.hpp"
#include "gexp/girsanov.hpp"
#include "gexp/linear.hpp"
#include "gexp/oracle.hpp"
#include "gexp/pde.hpp"

namespace gexp::experiment {

using json = nlohmann::json;

inline constexpr int kPass = 0;
inline constexpr int kConfigError = 1;
inline constexpr int kVerificationFailure = 2;

/// Config errors outrank verification failures, which outrank a pass.
inline int severity(int code) noexcept { return code == kConfigError ? 2 : code == kVerificationFailure ? 1 : 0; }
inline int worst(int a, int b) noexcept { return severity(a) >= severity(b) ? a : b; }

class ConfigError : public InvalidInput {
 public:
  using InvalidInput::InvalidInput;
};

inline const std::vector<std::string>& kinds() {
  static const std::vector<std::string> k{"gheat",          "feynman_kac",      "linear_special",  "linear_b0",
                                          "linear_extended", "gronwall",         "comparison_suite", "girsanov_verify",
                                          "oracle_check",   "convergence"};
  return k;
}

/// Reads one JSON object, records the normalized value of every field it
/// reads (defaults filled in), and rejects fields it never read.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return path_.empty() ? "config" : path_; }
  bool has(const std::string& key) const { return j_.contains(key); }

  double number(const std::string& key, std::optional<double> def = {},
                double min = -std::numeric_limits<double>::infinity(),
                double max = std::numeric_limits<double>::infinity(), bool exclusive_min = false) {
    const json* v = fetch(key, def.has_value());
    const double x = v ? as_number(*v, field(key)) : *def;
    in_range(x, key, min, max, exclusive_min);
    out_[key] = x;
    return x;
  }

  std::optional<double> optional_number(const std::string& key,
                                        double min = -std::numeric_limits<double>::infinity()) {
    if (!has(key)) {
      mark(key);
      return std::nullopt;
    }
    return number(key, std::nullopt, min);
  }

  int integer(const std::string& key, std::optional<int> def, int min, int max) {
    const json* v = fetch(key, def.has_value());
    int x = def.value_or(0);
    if (v) {
      if (!v->is_number_integer()) throw ConfigError(field(key) + ": expected an integer");
      const auto wide = v->get<std::int64_t>();
      if (wide < min || wide > max)
        throw ConfigError(detail::concat(field(key), ": ", wide, " is outside [", min, ", ", max, "]"));
      x = static_cast<int>(wide);
    }
    if (x < min || x > max) throw ConfigError(detail::concat(field(key), ": ", x, " is outside [", min, ", ", max, "]"));
    out_[key] = x;
    return x;
  }

  std::string string(const std::string& key, std::optional<std::string> def = {},
                     const std::vector<std::string>& choices = {}) {
    const json* v = fetch(key, def.has_value());
    std::string s = def.value_or("");
    if (v) {
      if (!v->is_string()) throw ConfigError(field(key) + ": expected a string");
      s = v->get<std::string>();
    }
    if (!choices.empty() && std::find(choices.begin(), choices.end(), s) == choices.end()) {
      std::string list;
      for (const auto& c : choices) list += (list.empty() ? "" : ", ") + c;
      throw ConfigError(detail::concat(field(key), ": unknown value '", s, "' (expected one of ", list, ")"));
    }
    out_[key] = s;
    return s;
  }

  /// A number or an expression string over the allowed variables.
  expr::Expr expression(const std::string& key, const json& def, std::initializer_list<expr::Var> allowed) {
    const json* v = fetch(key, !def.is_null());
    const json& src = v ? *v : def;
    out_[key] = src;
    return to_expr(src, field(key), allowed);
  }

  static expr::Expr to_expr(const json& src, const std::string& name, std::initializer_list<expr::Var> allowed) {
    try {
      if (src.is_number()) return expr::Expr(as_number(src, name));
      if (!src.is_string()) throw ConfigError(name + ": expected a number or an expression string");
      auto e = expr::Expr::parse(src.get<std::string>());
      e.require_only(allowed, name);
      return e;
    } catch (const ConfigError&) {
      throw;
    } catch (const InvalidInput& err) {
      throw ConfigError(name + ": " + err.what());
    }
  }

  std::vector<double> numbers(const std::string& key, std::optional<std::vector<double>> def, std::size_t min_size,
                              std::size_t max_size = std::numeric_limits<std::size_t>::max()) {
    const json* v = fetch(key, def.has_value());
    std::vector<double> xs = def.value_or(std::vector<double>{});
    if (v) {
      if (!v->is_array()) throw ConfigError(field(key) + ": expected an array of numbers");
      xs.clear();
      for (std::size_t i = 0; i < v->size(); ++i) xs.push_back(as_number((*v)[i], detail::concat(field(key), "[", i, "]")));
    }
    if (xs.size() < min_size || xs.size() > max_size)
      throw ConfigError(detail::concat(field(key), ": expected between ", min_size, " and ", max_size, " entries, got ",
                                       xs.size()));
    out_[key] = xs;
    return xs;
  }

  /// Array of numbers or expression strings.
  std::vector<expr::Expr> expressions(const std::string& key, const json& def, std::size_t size,
                                      std::initializer_list<expr::Var> allowed) {
    const json* v = fetch(key, !def.is_null());
    const json& src = v ? *v : def;
    if (!src.is_array()) throw ConfigError(field(key) + ": expected an array");
    if (src.size() != size)
      throw ConfigError(detail::concat(field(key), ": expected ", size, " entries (one per state dimension), got ",
                                       src.size()));
    std::vector<expr::Expr> out;
    for (std::size_t i = 0; i < src.size(); ++i)
      out.push_back(to_expr(src[i], detail::concat(field(key), "[", i, "]"), allowed));
    out_[key] = src;
    return out;
  }

  /// Nested object; `body` reads it. Absent objects read as {} when
  /// `optional` is set.
  template <typename Body>
  auto object(const std::string& key, Body&& body, bool optional = false) {
    const json* v = fetch(key, optional);
    static const json empty = json::object();
    Reader child(v ? *v : empty, field(key));
    if constexpr (std::is_void_v<decltype(body(child))>) {
      body(child);
      child.finish();
      out_[key] = child.normalized();
    } else {
      auto result = body(child);
      child.finish();
      out_[key] = child.normalized();
      return result;
    }
  }

  /// Array of objects, each read by `body(reader, index)`.
  template <typename Body>
  void objects(const std::string& key, Body&& body, std::size_t min_size, std::size_t max_size) {
    const json* v = fetch(key, false);
    if (!v->is_array()) throw ConfigError(field(key) + ": expected an array");
    if (v->size() < min_size || v->size() > max_size)
      throw ConfigError(detail::concat(field(key), ": expected between ", min_size, " and ", max_size, " entries, got ",
                                       v->size()));
    json arr = json::array();
    for (std::size_t i = 0; i < v->size(); ++i) {
      Reader child((*v)[i], detail::concat(field(key), "[", i, "]"));
      body(child, i);
      child.finish();
      arr.push_back(child.normalized());
    }
    out_[key] = arr;
  }

  /// Raw access for fields with a union type.
  const json* raw(const std::string& key) {
    mark(key);
    return has(key) ? &j_.at(key) : nullptr;
  }
  void store(const std::string& key, json value) { out_[key] = std::move(value); }

  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key)) throw ConfigError(field(key) + ": unknown field");
  }
  const json& normalized() const noexcept { return out_; }

  static double as_number(const json& v, const std::string& name) {
    if (!v.is_number()) throw ConfigError(name + ": expected a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) throw ConfigError(name + ": must be finite");
    return x;
  }

 private:
  const json* fetch(const std::string& key, bool optional) {
    mark(key);
    if (!has(key)) {
      if (!optional) throw ConfigError(field(key) + ": required field is missing");
      return nullptr;
    }
    return &j_.at(key);
  }
  void mark(const std::string& key) { seen_.insert(key); }
  void in_range(double x, const std::string& key, double min, double max, bool exclusive_min) const {
    if (x < min || x > max || (exclusive_min && x == min))
      throw ConfigError(detail::concat(field(key), ": ", x, " is outside ", exclusive_min ? "(" : "[", min, ", ", max,
                                       "]"));
  }

  const json& j_;
  std::string path_;
  json out_ = json::object();
  std::set<std::string> seen_;
};

struct Config {
  std::string kind;
  json params = json::object();
  std::string output;
  std::uint64_t seed = 0;

  json to_json() const { return {{"kind", kind}, {"output", output}, {"params", params}, {"seed", seed}}; }
  std::string canonical() const { return to_json().dump(2); }
};

struct Context {
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

struct Result {
  double value = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> tolerance;
  bool pass = false;
  std::string message;
  json details = json::object();
  std::string csv;
};

using Plan = std::function<Result(const Context&)>;

namespace detail_ {

using expr::Var;

inline VolBounds read_bounds(Reader& r) {
  return r.object("bounds", [](Reader& b) {
    const double lo = b.number("sigma_lo_sq", std::nullopt, 0.0, std::numeric_limits<double>::infinity(), true);
    const double hi = b.number("sigma_hi_sq", std::nullopt, 0.0, std::numeric_limits<double>::infinity(), true);
    if (lo > hi)
      throw ConfigError(detail::concat(b.field("sigma_lo_sq"), ": ", lo, " exceeds sigma_hi_sq ", hi));
    return VolBounds(lo, hi);
  });
}

inline double read_horizon(Reader& r) {
  return r.number("horizon", 1.0, 0.0, std::numeric_limits<double>::infinity(), true);
}

struct Target {
  std::optional<double> expected;
  double tol;
};

inline Target read_target(Reader& r, double default_tol) {
  Target t;
  t.expected = r.optional_number("expected");
  t.tol = r.number("tol", default_tol, 0.0);
  return t;
}

/// value within tol of expected, or finite when nothing is expected.
inline Result judge(double value, const Target& target) {
  Result res;
  res.value = value;
  if (target.expected) {
    res.tolerance = target.tol;
    res.pass = std::isfinite(value) && std::abs(value - *target.expected) <= target.tol;
    res.details["expected"] = *target.expected;
    res.details["abs_error"] = std::abs(value - *target.expected);
  } else {
    res.pass = std::isfinite(value);
  }
  return res;
}

inline pde::Boundary read_boundary(Reader& r, const std::string& def) {
  const auto s = r.string("boundary", def, {"clamp_extrapolate", "dirichlet_from_terminal"});
  return s == "clamp_extrapolate" ? pde::Boundary::clamp_extrapolate : pde::Boundary::dirichlet_from_terminal;
}

inline std::vector<pde::Axis> read_axes(Reader& r, std::size_t max_dim) {
  std::vector<pde::Axis> axes;
  r.objects(
      "axes",
      [&](Reader& a, std::size_t) {
        const double lo = a.number("lo");
        const double hi = a.number("hi");
        if (!(hi > lo)) throw ConfigError(detail::concat(a.field("hi"), ": ", hi, " must exceed lo ", lo));
        const int n = a.integer("n", std::nullopt, 3, 1000000);
        axes.push_back({lo, hi, n});
      },
      1, max_dim);
  return axes;
}

inline pde::Point to_point(const std::vector<double>& v) { return {v.empty() ? 0.0 : v[0], v.size() > 1 ? v[1] : 0.0}; }

/// Problem whose coefficient functions are parsed expressions.
inline pde::PDEProblem expr_problem(int dim, std::vector<expr::Expr> b, std::vector<expr::Expr> h,
                                    std::vector<expr::Expr> sigma, expr::Expr f, expr::Expr g, expr::Expr phi,
                                    const VolBounds& bounds) {
  const auto vec = [dim](std::vector<expr::Expr> e) -> pde::VecFn {
    return [dim, e = std::move(e)](double t, const pde::Point& x) {
      const expr::Vars v{t, x[0], x[1], 0.0, 0.0};
      return pde::Point{e[0](v), dim == 2 ? e[1](v) : 0.0};
    };
  };
  pde::PDEProblem p;
  p.coeffs = {dim, vec(std::move(b)), vec(std::move(h)), vec(std::move(sigma))};
  p.f_fn = [f = std::move(f)](double t, const pde::Point& x, double y, double z) {
    return f({t, x[0], x[1], y, z});
  };
  p.g_fn = [g = std::move(g)](double t, const pde::Point& x, double y, double z) {
    return g({t, x[0], x[1], y, z});
  };
  p.phi = [phi = std::move(phi)](const pde::Point& x) { return phi({0.0, x[0], x[1], 0.0, 0.0}); };
  p.vol = bounds;
  return p;
}

/// Stable grid from coefficient magnitudes sampled on the nodes.
template <pde::FeynmanKacProblem P>
pde::GridSpec auto_grid(const P& problem, std::vector<pde::Axis> axes, double horizon, pde::Boundary boundary,
                        pde::Point extra_first_order = {0.0, 0.0}, double diffusion_ratio = 0.5) {
  const pde::GridSpec probe{axes, horizon, 4, boundary};
  probe.validate();
  const double hi = problem.bounds().hi();
  pde::CflHint hint{hi, {0.0, 0.0}, extra_first_order, diffusion_ratio};
  for (int s = 0; s <= 4; ++s) {
    const double t = horizon * s / 4.0;
    for (int j = 0; j < probe.n2(); ++j)
      for (int i = 0; i < probe.axes[0].n; ++i) {
        const pde::Point x{probe.axes[0].x(i), probe.dim() == 2 ? probe.axes[1].x(j) : 0.0};
        const auto sg = problem.sigma(t, x), b = problem.b(t, x), h = problem.h(t, x);
        for (int a = 0; a < probe.dim(); ++a) {
          hint.sigma_max[a] = std::max(hint.sigma_max[a], std::abs(sg[a]));
          hint.first_order[a] =
              std::max(hint.first_order[a], extra_first_order[a] + std::abs(b[a]) + hi * std::abs(h[a]));
        }
      }
  }
  for (int a = 0; a < 2; ++a) {
    hint.sigma_max[a] *= 1.01;
    hint.first_order[a] *= 1.01;
  }
  return pde::make_grid(std::move(axes), horizon, hint, boundary);
}

/// Grid object {axes, nt?, boundary}; with nt given the CFL condition is
/// checked, otherwise nt is chosen.
template <pde::FeynmanKacProblem P>
pde::GridSpec read_grid(Reader& r, const P& problem, double horizon, std::size_t max_dim,
                        const std::string& default_boundary) {
  return r.object("grid", [&](Reader& g) {
    auto axes = read_axes(g, max_dim);
    if (static_cast<int>(axes.size()) != problem.state_dim())
      throw ConfigError(detail::concat(g.field("axes"), ": ", axes.size(), " axes for a state of dimension ",
                                       problem.state_dim()));
    const auto boundary = read_boundary(g, default_boundary);
    pde::GridSpec grid;
    if (g.has("nt")) {
      grid = {axes, horizon, g.integer("nt", std::nullopt, 1, 100000000), boundary};
    } else {
      g.raw("nt");
      grid = auto_grid(problem, axes, horizon, boundary);
    }
    try {
      pde::check_cfl(problem, grid);
    } catch (const pde::CflViolation& e) {
      throw ConfigError(g.field("nt") + ": " + e.what());
    }
    return grid;
  });
}

inline json grid_json(const pde::GridSpec& g) {
  json axes = json::array();
  for (const auto& a : g.axes) axes.push_back({{"lo", a.lo}, {"hi", a.hi}, {"n", a.n}, {"dx", a.step()}});
  return {{"axes", axes}, {"nt", g.nt}, {"dt", g.dt()}};
}

inline std::string field_csv(const pde::ValueField& f) {
  std::ostringstream os;
  f.write_csv(os);
  return os.str();
}

// ---- kinds ----

inline Plan plan_gheat(Reader& r) {
  const auto bounds = read_bounds(r);
  const double horizon = read_horizon(r);
  const auto phi = r.expression("phi", json(), {Var::x1});
  const auto phi_fn = [phi](double x) { return phi({0.0, x, 0.0, 0.0, 0.0}); };
  pde::PDEProblem shape;
  shape.coeffs.sigma = [](double, const pde::Point&) { return pde::Point{1.0, 0.0}; };
  shape.vol = bounds;
  const auto grid = read_grid(r, shape, horizon, 1, "clamp_extrapolate");
  const double probe = r.number("probe", 0.0);
  const auto target = read_target(r, 1e-3);
  return [=](const Context&) {
    const auto field = pde::solve_gheat(bounds, phi_fn, grid, pde::KeepLayers::endpoints);
    auto res = judge(field.interpolate(grid.nt, {probe, 0.0}), target);
    res.details["grid"] = grid_json(grid);
    res.details["probe"] = probe;
    res.csv = field_csv(field);
    return res;
  };
}

struct FkRead {
  pde::PDEProblem problem;
  double horizon;
  pde::Point probe;
};

inline FkRead read_fk_problem(Reader& r) {
  const auto bounds = read_bounds(r);
  const double horizon = read_horizon(r);
  const int dim = r.integer("state_dim", 1, 1, 2);
  const std::initializer_list<Var> tx{Var::t, Var::x1, Var::x2};
  const json zeros = dim == 1 ? json::array({0}) : json::array({0, 0});
  const json unit = dim == 1 ? json::array({1}) : json::array({1, 0});
  auto b = r.expressions("b", zeros, dim, tx);
  auto h = r.expressions("h", zeros, dim, tx);
  auto sigma = r.expressions("sigma", unit, dim, tx);
  auto f = r.expression("f", 0, {Var::t, Var::x1, Var::x2, Var::y, Var::z});
  auto g = r.expression("g", 0, {Var::t, Var::x1, Var::x2, Var::y, Var::z});
  auto phi = r.expression("phi", json(), {Var::x1, Var::x2});
  const auto probe = r.numbers("probe", std::vector<double>(dim, 0.0), dim, dim);
  return {expr_problem(dim, std::move(b), std::move(h), std::move(sigma), std::move(f), std::move(g), std::move(phi),
                       bounds),
          horizon, to_point(probe)};
}

inline Plan plan_feynman_kac(Reader& r) {
  auto fk = read_fk_problem(r);
  const auto grid = read_grid(r, fk.problem, fk.horizon, 2, "clamp_extrapolate");
  const auto target = read_target(r, 1e-3);
  return [=](const Context&) {
    const auto field = pde::solve_feynman_kac(fk.problem, grid, pde::KeepLayers::endpoints);
    auto res = judge(field.interpolate(0, fk.probe), target);
    res.details["grid"] = grid_json(grid);
    res.details["probe"] = {fk.probe[0], fk.probe[1]};
    res.csv = field_csv(field);
    return res;
  };
}

inline Plan plan_convergence(Reader& r) {
  auto fk = read_fk_problem(r);
  std::vector<pde::GridSpec> grids;
  r.object("grid", [&](Reader& g) {
    const auto axes = read_axes(g, 2);
    if (static_cast<int>(axes.size()) != fk.problem.state_dim())
      throw ConfigError(detail::concat(g.field("axes"), ": ", axes.size(), " axes for a state of dimension ",
                                       fk.problem.state_dim()));
    const auto boundary = read_boundary(g, "clamp_extrapolate");
    const auto ns = g.numbers("refinements", std::nullopt, 2, 12);
    for (std::size_t i = 0; i < ns.size(); ++i) {
      if (ns[i] != std::floor(ns[i]) || ns[i] < 3 || ns[i] > 1e6)
        throw ConfigError(detail::concat(g.field("refinements"), "[", i, "]: ", ns[i], " is not a node count >= 3"));
      auto a = axes;
      a[0].n = static_cast<int>(ns[i]);
      grids.push_back(auto_grid(fk.problem, a, fk.horizon, boundary));
    }
  });
  const auto tol = r.optional_number("tol", 0.0);
  return [=](const Context&) {
    const auto rows = pde::convergence_table(fk.problem, grids, fk.probe);
    Result res;
    res.value = rows.back().value;
    res.tolerance = tol;
    bool finite = true, decreasing = true;
    json table = json::array();
    std::ostringstream csv;
    csv.precision(17);
    csv << "h,value,diff\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
      finite = finite && std::isfinite(rows[i].value);
      if (i >= 2) decreasing = decreasing && std::abs(*rows[i].diff) < std::abs(*rows[i - 1].diff);
      table.push_back({{"h", rows[i].h}, {"value", rows[i].value}, {"diff", rows[i].diff ? json(*rows[i].diff) : json()}});
      csv << rows[i].h << ',' << rows[i].value << ',';
      if (rows[i].diff) csv << *rows[i].diff;
      csv << '\n';
    }
    const double last = std::abs(*rows.back().diff);
    res.pass = finite && (!tol || last <= *tol);
    res.details["rows"] = table;
    res.details["last_abs_diff"] = last;
    res.details["monotone_decrease"] = decreasing;
    res.csv = csv.str();
    return res;
  };
}

inline linear::LinearBSDESpec read_linear_spec(Reader& r, int& steps) {
  linear::LinearBSDESpec spec;
  spec.bounds = read_bounds(r);
  spec.horizon = read_horizon(r);
  steps = r.integer("steps", 200, 1, 100000);
  const auto time_fn = [&](const char* key) -> linear::TimeFn {
    auto e = r.expression(key, 0, {Var::t});
    if (e.is_constant() && e({}) == 0.0) return {};
    return [e](double t) { return e({t}); };
  };
  spec.a = time_fn("a");
  spec.b = time_fn("b");
  spec.c = time_fn("c");
  spec.d = time_fn("d");
  const auto m = r.expression("m", 0, {Var::t, Var::x1, Var::x2});
  const auto n = r.expression("n", 0, {Var::t, Var::x1, Var::x2});
  const auto xi = r.expression("xi", json(), {Var::x1, Var::x2});
  const auto source = [](const expr::Expr& e) -> linear::SourceFn {
    if (e.is_constant() && e({}) == 0.0) return {};
    return [e](double t, double b, double qv) { return e({t, b, qv}); };
  };
  spec.m = source(m);
  spec.n = source(n);
  spec.xi = [xi](double b, double qv) { return xi({0.0, b, qv}); };
  const bool qv = m.uses(Var::x2) || n.uses(Var::x2) || xi.uses(Var::x2);
  const bool bm = m.uses(Var::x1) || n.uses(Var::x1) || xi.uses(Var::x1);
  spec.state_use = qv ? StateUse::full : bm ? StateUse::b_only : StateUse::none;
  return spec;
}

inline const char* state_use_name(StateUse u) {
  return u == StateUse::full ? "full" : u == StateUse::b_only ? "b_only" : "none";
}

template <typename Solver>
Plan plan_linear(Reader& r, Solver solver) {
  int steps = 0;
  const auto spec = read_linear_spec(r, steps);
  const auto target = read_target(r, 1e-3);
  return [=](const Context&) {
    auto res = judge(solver(spec, steps), target);
    res.details["steps"] = steps;
    res.details["state_use"] = state_use_name(spec.state_use);
    return res;
  };
}

/// Random nonnegative function of (t, B, <B>) with sup at most `scale`.
inline linear::SourceFn random_bump(std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double amp = scale * u(rng), w1 = 2.0 * u(rng), w2 = 2.0 * u(rng), w0 = 3.0 * u(rng), ph = 6.0 * u(rng);
  return [=](double t, double b, double qv) {
    const double s = std::sin(w0 * t + w1 * b + w2 * qv + ph);
    return amp * s * s;
  };
}

/// Solution of the special linear BSDE with xi, m, n each lowered by a
/// random nonnegative bump.
inline double perturbed_value(const linear::LinearBSDESpec& spec, int steps, std::mt19937_64& rng) {
  auto p = spec;
  const auto lower = [](linear::SourceFn base, linear::SourceFn bump) -> linear::SourceFn {
    return [base, bump](double t, double b, double qv) { return (base ? base(t, b, qv) : 0.0) - bump(t, b, qv); };
  };
  p.m = lower(spec.m, random_bump(rng, 1.0));
  p.n = lower(spec.n, random_bump(rng, 1.0));
  const auto dxi = random_bump(rng, 1.0);
  p.xi = [xi = spec.xi, dxi](double b, double qv) { return xi(b, qv) - dxi(1.0, b, qv); };
  p.state_use = StateUse::full;
  return linear::solve_linear_special(p, steps);
}

inline Plan plan_gronwall(Reader& r) {
  int steps = 0;
  const auto spec = read_linear_spec(r, steps);
  const int perturbations = r.integer("perturbations", 20, 0, 10000);
  const double ptol = r.number("perturbation_tol", 1e-10, 0.0);
  const auto target = read_target(r, 1e-3);
  return [=](const Context& ctx) {
    const double bound = linear::gronwall_bound(spec, steps);
    auto res = judge(bound, target);
    std::mt19937_64 rng(ctx.seed);
    int violations = 0;
    double worst_excess = -std::numeric_limits<double>::infinity();
    std::ostringstream csv;
    csv.precision(17);
    csv << "perturbation,value,bound\n";
    for (int i = 0; i < perturbations; ++i) {
      const double v = perturbed_value(spec, steps, rng);
      worst_excess = std::max(worst_excess, v - bound);
      if (!(v <= bound + ptol)) ++violations;
      csv << i << ',' << v << ',' << bound << '\n';
    }
    res.pass = res.pass && violations == 0;
    if (!res.tolerance && perturbations) res.tolerance = ptol;
    res.details["steps"] = steps;
    res.details["perturbations"] = perturbations;
    res.details["violations"] = violations;
    res.details["worst_excess"] = perturbations ? json(worst_excess) : json();
    if (violations) res.message = detail::concat(violations, " perturbed values exceed the bound");
    res.csv = csv.str();
    return res;
  };
}

/// Ordered pair of 1- or 2-d problems with data1 >= data2 pointwise.
struct MonotonePair {
  pde::PDEProblem upper, lower;
  pde::Point extra_first_order;
};

inline MonotonePair random_monotone_pair(std::mt19937_64& rng, int dim, const VolBounds& bounds) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> pos(0.0, 1.0);
  const double beta = 0.5 * u(rng), eta = 0.3 * u(rng);
  const double a1 = u(rng), w1 = 1.0 + pos(rng), c1 = 3.0 * u(rng), a2 = u(rng);
  const double fy = 0.5 * u(rng), fz = 0.3 * u(rng), fc = u(rng);
  const double gy = 0.3 * u(rng), gz = 0.2 * u(rng), gc = u(rng);
  const double dphi = pos(rng), df = pos(rng), dg = pos(rng), wb = 2.0 * pos(rng);
  pde::Coefficients co;
  co.state_dim = dim;
  co.sigma = [](double, const pde::Point&) { return pde::Point{1.0, 0.0}; };
  co.b = [beta](double, const pde::Point&) { return pde::Point{beta, 0.0}; };
  co.h = [eta, dim](double, const pde::Point&) { return pde::Point{eta, dim == 2 ? 1.0 : 0.0}; };
  const auto phi2 = [=](const pde::Point& x) { return a1 * std::cos(w1 * x[0] + c1) + a2 * std::tanh(x[0] - x[1]); };
  const auto f2 = [=](double, const pde::Point& x, double y, double z) { return fy * y + fz * z + fc * std::cos(x[0]); };
  const auto g2 = [=](double, const pde::Point& x, double y, double z) { return gy * y + gz * z + gc * std::sin(x[0]); };
  const auto bump = [wb](const pde::Point& x) { return 0.5 * (1.0 + std::sin(wb * x[0] + x[1])); };
  MonotonePair p;
  p.lower = {co, f2, g2, phi2, bounds};
  p.upper = {co,
             [=](double t, const pde::Point& x, double y, double z) { return f2(t, x, y, z) + df * bump(x); },
             [=](double t, const pde::Point& x, double y, double z) { return g2(t, x, y, z) + dg * bump(x); },
             [=](const pde::Point& x) { return phi2(x) + dphi * bump(x); }, bounds};
  p.extra_first_order = {std::abs(fz) + bounds.hi() * std::abs(gz), 0.0};
  return p;
}

inline Plan plan_comparison_suite(Reader& r) {
  const auto bounds = read_bounds(r);
  const double horizon = read_horizon(r);
  const int pairs = r.integer("pairs", 50, 1, 10000);
  std::vector<pde::Axis> axes;
  pde::Boundary boundary{};
  r.object("grid", [&](Reader& g) {
    axes = read_axes(g, 2);
    boundary = read_boundary(g, "dirichlet_from_terminal");
  });
  const double tol = r.number("tol", 1e-10, 0.0);
  return [=](const Context& ctx) {
    std::mt19937_64 rng(ctx.seed);
    const int dim = static_cast<int>(axes.size());
    int violations = 0;
    double worst = std::numeric_limits<double>::infinity();
    std::ostringstream csv;
    csv.precision(17);
    csv << "pair,min_diff\n";
    for (int i = 0; i < pairs; ++i) {
      const auto pair = random_monotone_pair(rng, dim, bounds);
      const auto grid = auto_grid(pair.upper, axes, horizon, boundary, pair.extra_first_order, 0.45);
      const auto u1 = pde::solve_feynman_kac(pair.upper, grid);
      const auto u2 = pde::solve_feynman_kac(pair.lower, grid);
      double m = std::numeric_limits<double>::infinity();
      for (const auto& [k, layer] : u1.layers()) {
        const auto& other = u2.layer(k);
        for (std::size_t n = 0; n < layer.size(); ++n) m = std::min(m, layer[n] - other[n]);
      }
      if (!(m >= -tol)) ++violations;
      worst = std::min(worst, m);
      csv << i << ',' << m << '\n';
    }
    Result res;
    res.value = worst;
    res.tolerance = tol;
    res.pass = violations == 0;
    res.details["pairs"] = pairs;
    res.details["violations"] = violations;
    if (violations) res.message = detail::concat(violations, " of ", pairs, " pairs violate comparison");
    res.csv = csv.str();
    return res;
  };
}

inline girsanov::PiecewiseConstant read_piecewise(Reader& r, const std::string& key) {
  const json* v = r.raw(key);
  if (!v) {
    r.store(key, 0.0);
    return 0.0;
  }
  if (v->is_number()) {
    const double c = Reader::as_number(*v, r.field(key));
    r.store(key, c);
    return c;
  }
  if (!v->is_object()) throw ConfigError(r.field(key) + ": expected a number or {breaks, values}");
  return r.object(key, [](Reader& p) {
    const auto breaks = p.numbers("breaks", std::nullopt, 0);
    const auto values = p.numbers("values", std::nullopt, 1);
    try {
      return girsanov::PiecewiseConstant(breaks, values);
    } catch (const InvalidInput& e) {
      throw ConfigError(p.where() + ": " + e.what());
    }
  });
}

inline json piecewise_json(const girsanov::PiecewiseConstant& f) {
  return {{"breaks", f.breaks()}, {"values", f.values()}};
}

inline Plan plan_girsanov_verify(Reader& r) {
  const auto bounds = read_bounds(r);
  const girsanov::DriftSpec drift{read_piecewise(r, "b"), read_piecewise(r, "d")};
  const auto phi_e = r.expression("phi", json(), {Var::x1});
  const double phi_bound = r.number("phi_bound", std::nullopt, 0.0);
  const double phi_lip = r.number("phi_lipschitz", std::nullopt, 0.0);
  const girsanov::BoundedLipschitz phi{[phi_e](double x) { return phi_e({0.0, x}); }, phi_bound, phi_lip};
  const auto times = r.numbers("times", std::vector<double>{1.0}, 1, 64);
  for (std::size_t i = 0; i < times.size(); ++i)
    if (!(times[i] > 0.0)) throw ConfigError(detail::concat(r.field("times"), "[", i, "]: must be positive"));
  try {
    phi.check_on(girsanov::desk_grid(bounds, drift, *std::max_element(times.begin(), times.end()), 241).axes[0]);
  } catch (const InvalidInput& e) {
    throw ConfigError(r.field("phi") + ": " + e.what());
  }
  const double tol = r.number("tol", 5e-3, 0.0);
  const auto res_grid = r.object(
      "grid",
      [](Reader& g) {
        girsanov::InvarianceGrid d;
        const double inf = std::numeric_limits<double>::infinity();
        d.dx1 = g.number("dx1", d.dx1, 0.0, inf, true);
        d.dx2 = g.number("dx2", d.dx2, 0.0, inf, true);
        d.dx_line = g.number("dx_line", d.dx_line, 0.0, inf, true);
        d.width_sigmas = g.number("width_sigmas", d.width_sigmas, 0.0, inf, true);
        return d;
      },
      true);
  const double refine = r.number("refine", 0.0, 0.0, 16.0);
  if (refine != 0.0 && refine <= 1.0) throw ConfigError(r.field("refine") + ": factor must exceed 1 (or be 0)");
  struct Weighted {
    int steps, nx;
    double tol;
  };
  std::optional<Weighted> weighted;
  if (r.has("weighted")) {
    weighted = r.object("weighted", [](Reader& w) {
      return Weighted{w.integer("steps", 400, 1, 20000), w.integer("nx", 481, 3, 100000), w.number("tol", 5e-3, 0.0)};
    });
    for (double t : {0.0, 0.5, 1.0})
      if (drift.b(t * times.back()) != 0.0) throw ConfigError(r.field("weighted") + ": the weighted route needs b = 0");
  } else {
    r.raw("weighted");
  }
  return [=](const Context&) {
    Result res;
    const auto report = girsanov::verify_invariance(drift, phi, times, tol, bounds, res_grid);
    res.value = *std::max_element(report.diffs.begin(), report.diffs.end());
    res.tolerance = tol;
    res.pass = report.pass;
    res.details["desk"] = report.to_json();
    res.details["drift"] = {{"b", piecewise_json(drift.b)}, {"d", piecewise_json(drift.d)}};
    std::ostringstream csv;
    csv.precision(17);
    csv << "grid,t,tilde,tilde_reduced,hat,hat_reduced,diff\n";
    const auto rows = [&](const char* name, const girsanov::InvarianceReport& rep) {
      for (std::size_t i = 0; i < rep.times.size(); ++i)
        csv << name << ',' << rep.times[i] << ',' << rep.tilde_values[i] << ',' << rep.tilde_values_reduced[i] << ','
            << rep.hat_values[i] << ',' << rep.hat_values_reduced[i] << ',' << rep.diffs[i] << '\n';
    };
    rows("desk", report);
    if (refine > 0.0) {
      const auto fine = girsanov::verify_invariance(drift, phi, times, tol, bounds, res_grid.refined(refine));
      bool shrinking = true;
      for (std::size_t i = 0; i < times.size(); ++i)
        shrinking = shrinking && (report.diffs[i] <= 1e-12 ? fine.diffs[i] <= 1e-12 : fine.diffs[i] < report.diffs[i]);
      res.details["refined"] = fine.to_json();
      res.details["refine_factor"] = refine;
      res.details["shrinking"] = shrinking;
      res.pass = res.pass && shrinking;
      if (!shrinking) res.message = "difference does not shrink under refinement";
      rows("refined", fine);
    }
    if (weighted) {
      const double t = times.back();
      const double lattice = girsanov::tilde_expect_weighted(drift, phi, bounds, t, weighted->steps);
      const double pde_value = girsanov::tilde_expect(drift, phi, bounds, girsanov::desk_grid(bounds, drift, t, weighted->nx));
      const double diff = std::abs(lattice - pde_value);
      res.details["weighted"] = {{"t", t},       {"lattice", lattice}, {"pde", pde_value},
                                 {"diff", diff}, {"tol", weighted->tol}, {"pass", diff <= weighted->tol}};
      res.pass = res.pass && diff <= weighted->tol;
      if (diff > weighted->tol) res.message = "weighted route disagrees with the BSDE route";
    }
    if (!report.pass) res.message = "invariance difference exceeds tol";
    res.csv = csv.str();
    return res;
  };
}

inline Plan plan_oracle_check(Reader& r) {
  const auto bounds = read_bounds(r);
  const double horizon = read_horizon(r);
  const int depth = r.integer("depth", 3, 1, oracle::kMaxDepth);
  const auto functional = r.expression("functional", json(), {Var::x1, Var::x2});
  const auto choices = r.numbers("vol_choices", std::vector<double>{bounds.lo(), bounds.hi()}, 2, 16);
  const double tol = r.number("tol", 1e-12, 0.0);
  const auto expected = r.optional_number("expected");
  const double expected_tol = r.number("expected_tol", 1e-9, 0.0);
  oracle::TreeSpec tree{depth, horizon / depth, bounds, choices};
  try {
    tree.validate();
    const double count = oracle::policy_count(tree);
    if (count > oracle::kMaxPolicies) throw oracle::PolicyLimitExceeded(count);
  } catch (const InvalidInput& e) {
    throw ConfigError(r.field("depth") + ": " + e.what());
  }
  return [=](const Context& ctx) {
    const oracle::PathFunctional phi = [functional](const oracle::DiscretePath& p) {
      return functional({0.0, p.b_terminal(), p.qv_terminal()});
    };
    const double enumerated = oracle::policy_enumeration_value(tree, phi, std::max(1u, ctx.threads));
    const double dp = oracle::backward_value(tree, phi);
    const double mismatch = std::abs(enumerated - dp);
    Result res;
    res.value = dp;
    res.tolerance = tol;
    res.pass = mismatch <= tol;
    res.details["enumeration"] = enumerated;
    res.details["backward"] = dp;
    res.details["mismatch"] = mismatch;
    res.details["policies"] = oracle::policy_count(tree);
    res.message = res.pass ? "oracle==dp exact" : "oracle and dp disagree";
    if (expected) {
      const bool ok = std::abs(dp - *expected) <= expected_tol;
      res.details["expected"] = *expected;
      res.details["abs_error"] = std::abs(dp - *expected);
      res.pass = res.pass && ok;
      if (!ok) res.message = "value differs from expected";
    }
    return res;
  };
}

inline Plan plan(const std::string& kind, Reader& r) {
  if (kind == "gheat") return plan_gheat(r);
  if (kind == "feynman_kac") return plan_feynman_kac(r);
  if (kind == "convergence") return plan_convergence(r);
  if (kind == "linear_special") return plan_linear(r, linear::solve_linear_special);
  if (kind == "linear_b0") return plan_linear(r, linear::solve_linear_b0);
  if (kind == "linear_extended") return plan_linear(r, linear::solve_linear_extended);
  if (kind == "gronwall") return plan_gronwall(r);
  if (kind == "comparison_suite") return plan_comparison_suite(r);
  if (kind == "girsanov_verify") return plan_girsanov_verify(r);
  return plan_oracle_check(r);
}

inline void check_output_name(const std::string& name) {
  if (name.empty()) throw ConfigError("output: must not be empty");
  for (char c : name)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.'))
      throw ConfigError(detail::concat("output: character '", c, "' not allowed (use letters, digits, _ - .)"));
  if (name == "." || name == ".." || name == "suite_report")
    throw ConfigError(detail::concat("output: '", name, "' is reserved"));
}

}  // namespace detail_

struct Parsed {
  Config config;
  Plan plan;
};

/// Validates and normalizes; throws ConfigError naming the offending field.
inline Parsed parse(const json& j) {
  Reader top(j, "");
  Parsed p;
  p.config.kind = top.string("kind", std::nullopt, kinds());
  p.config.output = top.string("output");
  detail_::check_output_name(p.config.output);
  if (const json* s = top.raw("seed")) {
    if (!s->is_number_unsigned() && !(s->is_number_integer() && s->get<std::int64_t>() >= 0))
      throw ConfigError("seed: expected a nonnegative integer");
    p.config.seed = s->get<std::uint64_t>();
  }
  p.config.params = top.object("params", [&](Reader& r) {
    try {
      p.plan = detail_::plan(p.config.kind, r);
    } catch (const ConfigError&) {
      throw;
    } catch (const InvalidInput& e) {
      throw ConfigError(r.where() + ": " + e.what());
    }
    r.finish();
    return r.normalized();
  });
  top.finish();
  return p;
}

inline Config parse_config(const json& j) { return parse(j).config; }

inline json parse_json_text(const std::string& text, const std::string& origin) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(origin + ": invalid JSON: " + e.what());
  }
}

inline json load_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path.string() + ": cannot open config file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_json_text(ss.str(), path.string());
}

struct RunOptions {
  std::filesystem::path out_dir = ".";
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
};

struct Outcome {
  std::string source;  // config file or "<inline>"
  std::string output;
  std::string kind;
  int code = kConfigError;
  std::optional<Result> result;
  std::string error;
  std::string summary;
};

inline std::string format_value(double v) {
  if (!std::isfinite(v)) return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

inline json report_json(const Config& c, const Outcome& o) {
  const Result& r = *o.result;
  return {{"config", c.to_json()},
          {"value", std::isfinite(r.value) ? json(r.value) : json()},
          {"tolerance", r.tolerance ? json(*r.tolerance) : json()},
          {"pass", r.pass},
          {"exit_code", o.code},
          {"message", r.message},
          {"details", r.details}};
}

/// Runs a parsed config and writes its outputs. Never throws.
inline Outcome run_json(const json& j, const RunOptions& opt, std::string source = "<inline>") {
  Outcome o;
  o.source = std::move(source);
  o.kind = j.is_object() && j.contains("kind") && j["kind"].is_string() ? j["kind"].get<std::string>() : "";
  o.output = j.is_object() && j.contains("output") && j["output"].is_string() ? j["output"].get<std::string>() : "";
  const auto fail_config = [&](const std::string& what) {
    o.code = kConfigError;
    o.error = what;
    o.summary = detail::concat(o.output.empty() ? o.source : o.output, ": CONFIG ERROR ", what);
    return o;
  };
  Parsed p;
  try {
    json in = j;
    if (opt.seed && in.is_object()) in["seed"] = *opt.seed;
    p = parse(in);
  } catch (const std::exception& e) {
    return fail_config(e.what());
  }
  try {
    o.result = p.plan(Context{p.config.seed, opt.threads});
    o.code = o.result->pass ? kPass : kVerificationFailure;
  } catch (const InvalidInput& e) {
    return fail_config(e.what());
  } catch (const std::exception& e) {
    o.result = Result{};
    o.result->message = e.what();
    o.code = kVerificationFailure;
  }
  const Result& r = *o.result;
  o.summary = detail::concat(p.config.output, ": kind=", p.config.kind, " value=", format_value(r.value),
                             " tol=", r.tolerance ? format_value(*r.tolerance) : std::string("none"), " ",
                             r.pass ? "PASS" : "FAIL", r.message.empty() ? "" : " (" + r.message + ")");
  try {
    std::filesystem::create_directories(opt.out_dir);
    const auto base = opt.out_dir / p.config.output;
    std::ofstream(base.string() + ".json", std::ios::binary) << report_json(p.config, o).dump(2) << '\n';
    if (!r.csv.empty()) std::ofstream(base.string() + ".csv", std::ios::binary) << r.csv;
  } catch (const std::exception& e) {
    return fail_config(detail::concat("cannot write outputs: ", e.what()));
  }
  return o;
}

inline Outcome run_file(const std::filesystem::path& path, const RunOptions& opt) {
  try {
    return run_json(load_json(path), opt, path.filename().string());
  } catch (const std::exception& e) {
    Outcome o;
    o.source = path.filename().string();
    o.error = e.what();
    o.summary = o.source + ": CONFIG ERROR " + o.error;
    return o;
  }
}

struct SuiteOutcome {
  int code = kConfigError;
  std::vector<Outcome> outcomes;
  std::string error;
  json report;
};

/// Runs every *.json in `dir` (sorted by name) on a worker pool and writes
/// <out>/suite_report.json.
inline SuiteOutcome run_suite(const std::filesystem::path& dir, const RunOptions& opt) {
  SuiteOutcome s;
  std::vector<std::filesystem::path> files;
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) {
    s.error = dir.string() + ": not a directory";
    return s;
  }
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) {
    s.error = dir.string() + ": no experiment configs (*.json) found";
    return s;
  }

  // Outputs must be unique; a clash is a config error for every claimant.
  std::vector<json> configs(files.size());
  std::vector<std::string> load_error(files.size());
  std::map<std::string, int> claims;
  for (std::size_t i = 0; i < files.size(); ++i) {
    try {
      configs[i] = load_json(files[i]);
      if (configs[i].is_object() && configs[i].contains("output") && configs[i]["output"].is_string())
        ++claims[configs[i]["output"].get<std::string>()];
    } catch (const std::exception& e) {
      load_error[i] = e.what();
    }
  }

  s.outcomes.resize(files.size());
  std::atomic<std::size_t> next{0};
  const auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < files.size();) {
      Outcome& o = s.outcomes[i];
      const std::string name = files[i].filename().string();
      if (!load_error[i].empty()) {
        o.source = name;
        o.error = load_error[i];
        o.summary = name + ": CONFIG ERROR " + o.error;
        continue;
      }
      const json& c = configs[i];
      if (c.is_object() && c.contains("output") && c["output"].is_string() &&
          claims[c["output"].get<std::string>()] > 1) {
        o.source = name;
        o.output = c["output"].get<std::string>();
        o.error = "output: '" + o.output + "' is used by more than one config";
        o.summary = name + ": CONFIG ERROR " + o.error;
        continue;
      }
      RunOptions single = opt;
      single.threads = 1;
      o = run_json(c, single, name);
    }
  };
  const unsigned n = std::max(1u, std::min<unsigned>(opt.threads, static_cast<unsigned>(files.size())));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  s.code = kPass;
  json list = json::array(), failing = json::array();
  int passed = 0;
  for (const auto& o : s.outcomes) {
    s.code = worst(s.code, o.code);
    json item{{"config", o.source}, {"output", o.output}, {"kind", o.kind}, {"exit_code", o.code}};
    if (o.result) {
      item["value"] = std::isfinite(o.result->value) ? json(o.result->value) : json();
      item["tolerance"] = o.result->tolerance ? json(*o.result->tolerance) : json();
      item["pass"] = o.result->pass;
      item["message"] = o.result->message;
    } else {
      item["pass"] = false;
      item["error"] = o.error;
    }
    if (o.code == kPass) ++passed;
    else failing.push_back(o.output.empty() ? o.source : o.output);
    list.push_back(std::move(item));
  }
  s.report = {{"experiments", list},       {"count", static_cast<int>(s.outcomes.size())},
              {"passed", passed},          {"failing", failing},
              {"exit_code", s.code},       {"pass", s.code == kPass}};
  try {
    std::filesystem::create_directories(opt.out_dir);
    std::ofstream(opt.out_dir / "suite_report.json", std::ios::binary) << s.report.dump(2) << '\n';
  } catch (const std::exception& e) {
    s.error = detail::concat("cannot write suite report: ", e.what());
    s.code = kConfigError;
  }
  return s;
}

}  // namespace gexp::experiment
