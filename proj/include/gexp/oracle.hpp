#pragma once

// Brute-force G-expectations on small binomial trees.
//
// Each step draws a variance v from a finite choice set and moves
// B by +-sqrt(v dt) with probability 1/2. An adapted policy picks v at every
// node of the sign history. The sup over all such policies is computed twice:
// by direct enumeration and by backward induction. The two must agree.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <thread>
#include <vector>

#include "gexp/gcore.hpp"

namespace gexp::oracle {

inline constexpr int kMaxDepth = 8;
inline constexpr double kMaxPolicies = 1e7;

class PolicyLimitExceeded : public InvalidInput {
 public:
  explicit PolicyLimitExceeded(double count)
      : InvalidInput(detail::concat("oracle: ", count, " adapted policies exceed the enumeration limit of ",
                                    kMaxPolicies)),
        count_(count) {}
  double count() const noexcept { return count_; }

 private:
  double count_;
};

struct TreeSpec {
  int depth = 1;
  double dt = 1.0;
  VolBounds bounds{1.0, 1.0};
  std::vector<double> vol_choices;

  /// Tree whose only choices are the two endpoints lo and hi.
  static TreeSpec endpoints(int depth, double dt, const VolBounds& b) {
    TreeSpec t{depth, dt, b, {b.lo(), b.hi()}};
    t.validate();
    return t;
  }

  void validate() const {
    detail::require(depth >= 1 && depth <= kMaxDepth,
                    detail::concat("TreeSpec: depth must be in [1, ", kMaxDepth, "], got ", depth));
    detail::require(dt > 0.0 && std::isfinite(dt), "TreeSpec: dt must be positive");
    detail::require(!vol_choices.empty(), "TreeSpec: vol_choices is empty");
    for (double v : vol_choices)
      detail::require(bounds.contains(v), detail::concat("TreeSpec: vol choice ", v, " outside [",
                                                         bounds.lo(), ", ", bounds.hi(), "]"));
    const auto has = [&](double x) {
      return std::find(vol_choices.begin(), vol_choices.end(), x) != vol_choices.end();
    };
    detail::require(has(bounds.lo()) && has(bounds.hi()),
                    "TreeSpec: vol_choices must contain both endpoints");
  }
};

/// A full (or partial) discrete path: increments dB_k and variances v_k.
struct DiscretePath {
  double dt;
  std::span<const double> increments;
  std::span<const double> variances;

  double b_terminal() const {
    double s = 0.0;
    for (double x : increments) s += x;
    return s;
  }
  double qv_terminal() const {
    double s = 0.0;
    for (double v : variances) s += v * dt;
    return s;
  }
};

using PathFunctional = std::function<double(const DiscretePath&)>;

/// One step of a history: the variance chosen and the sign drawn.
struct Move {
  std::size_t choice;
  int sign;
  auto operator<=>(const Move&) const = default;
};
using History = std::vector<Move>;

/// Number of adapted policies: |choices|^(2^depth - 1).
inline double policy_count(const TreeSpec& tree) {
  const double nodes = std::ldexp(1.0, tree.depth) - 1.0;
  return std::pow(static_cast<double>(tree.vol_choices.size()), nodes);
}

namespace detail_ {

struct BackwardWalker {
  const TreeSpec& tree;
  const PathFunctional& phi;
  int record_step;
  std::map<History, double>* record;
  std::vector<double> incr;
  std::vector<double> var;
  History hist;

  double run(int k) {
    if (k == tree.depth) {
      const double v = phi(DiscretePath{tree.dt, incr, var});
      if (record && k == record_step) (*record)[hist] = v;
      return v;
    }
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < tree.vol_choices.size(); ++c) {
      const double v = tree.vol_choices[c];
      const double step = std::sqrt(v * tree.dt);
      double mean = 0.0;
      for (int s : {+1, -1}) {
        incr[k] = s * step;
        var[k] = v;
        hist.push_back({c, s});
        mean += 0.5 * run(k + 1);
        hist.pop_back();
      }
      best = std::max(best, mean);
    }
    if (record && k == record_step) (*record)[hist] = best;
    return best;
  }
};

inline double policy_value(const TreeSpec& tree, const PathFunctional& phi,
                           std::span<const std::size_t> policy, std::vector<double>& incr,
                           std::vector<double>& var) {
  const int depth = tree.depth;
  const std::uint32_t n_paths = 1u << depth;
  double sum = 0.0;
  for (std::uint32_t signs = 0; signs < n_paths; ++signs) {
    for (int k = 0; k < depth; ++k) {
      const std::uint32_t node = ((1u << k) - 1u) + (signs & ((1u << k) - 1u));
      const double v = tree.vol_choices[policy[node]];
      const int s = ((signs >> k) & 1u) ? -1 : +1;
      incr[k] = s * std::sqrt(v * tree.dt);
      var[k] = v;
    }
    sum += phi(DiscretePath{tree.dt, incr, var});
  }
  return sum / n_paths;
}

}  // namespace detail_

/// Backward-induction value only. Works up to kMaxDepth regardless of the
/// policy count.
inline double backward_value(const TreeSpec& tree, const PathFunctional& phi) {
  tree.validate();
  detail_::BackwardWalker w{tree, phi, -1, nullptr, std::vector<double>(tree.depth),
                            std::vector<double>(tree.depth), {}};
  return w.run(0);
}

/// Max over all adapted policies by exhaustive enumeration. Policies are
/// split across `threads` workers; the max reduction is order independent.
inline double policy_enumeration_value(const TreeSpec& tree, const PathFunctional& phi,
                                       unsigned threads = 1) {
  tree.validate();
  const double count = policy_count(tree);
  if (count > kMaxPolicies) throw PolicyLimitExceeded(count);
  const auto n_policies = static_cast<std::uint64_t>(count);
  const std::size_t n_nodes = (std::size_t{1} << tree.depth) - 1;
  const std::size_t radix = tree.vol_choices.size();
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n_policies)));

  std::vector<double> best(threads, -std::numeric_limits<double>::infinity());
  const auto work = [&](unsigned w) {
    const std::uint64_t begin = n_policies * w / threads;
    const std::uint64_t end = n_policies * (w + 1) / threads;
    std::vector<std::size_t> policy(n_nodes, 0);
    std::uint64_t idx = begin;
    for (std::size_t i = 0; i < n_nodes; ++i) {
      policy[i] = idx % radix;
      idx /= radix;
    }
    std::vector<double> incr(tree.depth), var(tree.depth);
    for (std::uint64_t p = begin; p < end; ++p) {
      best[w] = std::max(best[w], detail_::policy_value(tree, phi, policy, incr, var));
      for (std::size_t i = 0; i < n_nodes; ++i) {  // odometer increment
        if (++policy[i] < radix) break;
        policy[i] = 0;
      }
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < threads; ++w) pool.emplace_back(work, w);
  }
  return *std::max_element(best.begin(), best.end());
}

/// sup over adapted policies of E[phi]. Computes both the enumeration and the
/// backward value, throws std::logic_error if they disagree beyond 1e-12, and
/// returns the backward value.
inline double enumerate_sup(const TreeSpec& tree, const PathFunctional& phi, unsigned threads = 1) {
  const double enumerated = policy_enumeration_value(tree, phi, threads);
  const double backward = backward_value(tree, phi);
  if (std::abs(enumerated - backward) > 1e-12 * std::max(1.0, std::abs(backward)))
    throw std::logic_error(detail::concat("oracle: enumeration ", enumerated,
                                          " != backward induction ", backward));
  return backward;
}

/// Conditional values E_k[phi] at every history node of the given step.
inline std::map<History, double> enumerate_conditional(const TreeSpec& tree, const PathFunctional& phi,
                                                       int step) {
  tree.validate();
  detail::require(step >= 0 && step <= tree.depth,
                  detail::concat("enumerate_conditional: step ", step, " outside [0, ", tree.depth, "]"));
  std::map<History, double> out;
  detail_::BackwardWalker w{tree, phi, step, &out, std::vector<double>(tree.depth),
                            std::vector<double>(tree.depth), {}};
  w.run(0);
  return out;
}

/// Increments and variances implied by a history under the tree's choices.
inline void history_path(const TreeSpec& tree, const History& h, std::vector<double>& incr,
                         std::vector<double>& var) {
  incr.clear();
  var.clear();
  for (const auto& m : h) {
    const double v = tree.vol_choices.at(m.choice);
    incr.push_back(m.sign * std::sqrt(v * tree.dt));
    var.push_back(v);
  }
}

}  // namespace gexp::oracle
