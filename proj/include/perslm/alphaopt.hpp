#pragma once

// Selection of interpolation weights from per-user perplexity curves:
// one constant alpha for everyone (two objectives), the per-user oracle, and
// the heuristic alpha = k * (1 - OOV rate) fitted on random user subsets.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "perslm/detail/parallel.hpp"
#include "perslm/error.hpp"
#include "perslm/interp.hpp"

namespace perslm {

/// Two perplexities closer than this (relative) are ties; ties go to the
/// smaller alpha. Mixing two identical models is only flat up to rounding.
inline constexpr double kTieTolerance = 1e-12;

struct AlphaGrid {
  double start = 0.0;
  double stop = 1.0;
  double step = 0.001;

  void validate() const {
    if (!std::isfinite(start) || !std::isfinite(stop) || start > stop)
      throw InvalidArgument("alpha grid needs start <= stop");
    if (!(step > 0.0)) throw InvalidArgument("alpha grid step must be positive");
  }

  /// start, start+step, ..., with stop always included as the last point.
  std::vector<double> points() const {
    validate();
    const double span = (stop - start) / step;
    if (span > 1e8) throw InvalidArgument("alpha grid too fine");
    const auto n = static_cast<std::size_t>(std::floor(span + 1e-9));
    std::vector<double> out;
    out.reserve(n + 2);
    // Rounded to 12 significant digits so that 0.105 is the double nearest 0.105.
    for (std::size_t i = 0; i <= n; ++i) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.12g", start + static_cast<double>(i) * step);
      out.push_back(std::strtod(buf, nullptr));
    }
    if (stop - out.back() > 1e-9 * step) out.push_back(stop);
    else out.back() = stop;
    return out;
  }

  /// "start:stop:step"
  static AlphaGrid parse(const std::string& s) {
    const auto a = s.find(':');
    const auto b = a == std::string::npos ? a : s.find(':', a + 1);
    if (b == std::string::npos) throw InvalidArgument("grid must look like start:stop:step");
    AlphaGrid g;
    try {
      g.start = std::stod(s.substr(0, a));
      g.stop = std::stod(s.substr(a + 1, b - a - 1));
      g.step = std::stod(s.substr(b + 1));
    } catch (const std::exception&) {
      throw InvalidArgument("grid must look like start:stop:step");
    }
    g.validate();
    return g;
  }
};

enum class Objective { MinMeanPP, MaxMeanLift };

/// PP(alpha) for one user on a shared grid, plus the global-only baseline.
struct UserCurve {
  std::string user_id;
  double oov_rate = 0.0;
  double baseline_pp = 0.0;  // global model alone, same strategy
  std::size_t scored = 0;
  std::vector<double> pp;    // one entry per grid point

  double lift_at(std::size_t i) const { return pp_lift(baseline_pp, pp[i]); }
};

struct CurveSet {
  std::vector<double> alphas;
  std::vector<UserCurve> users;
  std::vector<std::string> undefined_users;  // no scorable tokens under the strategy
};

/// PP curves from pre-scored tokens: one scoring pass per user, then cheap
/// per-alpha mixing.
inline CurveSet sweep_scored(std::span<const std::string> user_ids, std::span<const double> oov_rates,
                             std::span<const ScoredTokens> scores, const AlphaGrid& grid,
                             const OovStrategy& strategy, std::size_t threads = 1) {
  if (user_ids.size() != scores.size() || oov_rates.size() != scores.size())
    throw InvalidArgument("sweep inputs have different lengths");
  CurveSet out;
  out.alphas = grid.points();
  std::vector<UserCurve> curves(scores.size());
  std::vector<char> defined(scores.size(), 0);
  detail::parallel_for(scores.size(), threads, [&](std::size_t u) {
    const auto base = global_perplexity(scores[u], strategy);
    if (!base.defined()) return;
    UserCurve c;
    c.user_id = user_ids[u];
    c.oov_rate = oov_rates[u];
    c.baseline_pp = *base.pp;
    c.scored = base.scored;
    c.pp.reserve(out.alphas.size());
    for (double a : out.alphas) c.pp.push_back(*perplexity(scores[u], InterpolationWeight(a), strategy).pp);
    curves[u] = std::move(c);
    defined[u] = 1;
  });
  for (std::size_t u = 0; u < curves.size(); ++u) {
    if (defined[u]) out.users.push_back(std::move(curves[u]));
    else out.undefined_users.emplace_back(user_ids[u]);
  }
  return out;
}

/// Sweep over the test split of every profile.
template <SequenceScorer Global>
CurveSet alpha_sweep(std::span<const UserProfile> profiles, const Global& global, const AlphaGrid& grid,
                     const OovStrategy& strategy, std::size_t threads = 1) {
  std::vector<ScoredTokens> scores(profiles.size());
  detail::parallel_for(profiles.size(), threads, [&](std::size_t u) {
    scores[u] = score_tokens(profiles[u].personal, global, profiles[u].test);
  });
  std::vector<std::string> ids;
  std::vector<double> oov;
  for (const auto& p : profiles) {
    ids.push_back(p.user_id);
    oov.push_back(p.oov_rate);
  }
  return sweep_scored(ids, oov, scores, grid, strategy, threads);
}

// ---------------------------------------------------------------------------

struct SelectionSummary {
  std::size_t users = 0;
  double mean_pp = 0.0;
  double mean_lift = 0.0;
  double fraction_improved = 0.0;  // users with strictly positive lift
};

/// Summary when user u (index into `members`) is assigned grid index idx[u].
inline SelectionSummary summarize(const CurveSet& curves, std::span<const std::size_t> members,
                                  std::span<const std::size_t> idx) {
  SelectionSummary s;
  s.users = members.size();
  if (members.empty()) return s;
  std::size_t improved = 0;
  for (std::size_t j = 0; j < members.size(); ++j) {
    const auto& c = curves.users[members[j]];
    s.mean_pp += c.pp[idx[j]];
    const double lift = c.lift_at(idx[j]);
    s.mean_lift += lift;
    if (lift > 0.0) ++improved;
  }
  const double n = static_cast<double>(members.size());
  s.mean_pp /= n;
  s.mean_lift /= n;
  s.fraction_improved = static_cast<double>(improved) / n;
  return s;
}

inline std::vector<std::size_t> all_members(const CurveSet& curves) {
  std::vector<std::size_t> m(curves.users.size());
  std::iota(m.begin(), m.end(), std::size_t{0});
  return m;
}

struct ConstantAlpha {
  double alpha = 0.0;
  std::size_t index = 0;
  SelectionSummary summary;
};

namespace detail {

inline bool improves(double candidate, double best, Objective objective) {
  if (objective == Objective::MinMeanPP)
    return candidate < best - kTieTolerance * std::abs(best);
  return candidate > best + kTieTolerance * std::max(1.0, std::abs(best));
}

}  // namespace detail

/// Best single grid alpha for the given members: lowest mean PP or highest
/// mean lift, ties toward smaller alpha.
inline ConstantAlpha constant_alpha(const CurveSet& curves, Objective objective,
                                    std::span<const std::size_t> members) {
  if (members.empty()) throw InvalidArgument("constant alpha over no users");
  ConstantAlpha best;
  double best_value = 0.0;
  std::vector<std::size_t> idx(members.size());
  for (std::size_t i = 0; i < curves.alphas.size(); ++i) {
    std::fill(idx.begin(), idx.end(), i);
    const auto s = summarize(curves, members, idx);
    const double value = objective == Objective::MinMeanPP ? s.mean_pp : s.mean_lift;
    if (i == 0 || detail::improves(value, best_value, objective)) {
      best_value = value;
      best = {curves.alphas[i], i, s};
    }
  }
  return best;
}

inline ConstantAlpha constant_alpha(const CurveSet& curves, Objective objective) {
  if (curves.users.empty()) throw InvalidArgument("constant alpha over no users");
  return constant_alpha(curves, objective, all_members(curves));
}

struct OracleEntry {
  std::string user_id;
  double alpha = 0.0;
  std::size_t index = 0;
  double pp = 0.0;
};

struct OracleTable {
  std::vector<OracleEntry> entries;  // same order as the curve set
  std::vector<std::size_t> indices() const {
    std::vector<std::size_t> out;
    for (const auto& e : entries) out.push_back(e.index);
    return out;
  }
};

inline std::size_t oracle_index(const UserCurve& c) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < c.pp.size(); ++i)
    if (detail::improves(c.pp[i], c.pp[best], Objective::MinMeanPP)) best = i;
  return best;
}

/// Per-user argmin of PP over the grid, ties toward smaller alpha.
inline OracleTable oracle_alphas(const CurveSet& curves) {
  OracleTable t;
  for (const auto& c : curves.users) {
    const auto i = oracle_index(c);
    t.entries.push_back({c.user_id, curves.alphas[i], i, c.pp[i]});
  }
  return t;
}

/// Oracle dominance within the tie tolerance: PP(alpha*) <= PP(alpha) for
/// every user and grid point.
inline bool oracle_dominates(const CurveSet& curves, const OracleTable& oracle) {
  if (oracle.entries.size() != curves.users.size()) return false;
  for (std::size_t u = 0; u < curves.users.size(); ++u) {
    const auto& c = curves.users[u];
    const double best = c.pp[oracle.entries[u].index];
    for (double v : c.pp)
      if (best > v + kTieTolerance * std::abs(v)) return false;
  }
  return true;
}

/// Grid index nearest to alpha.
inline std::size_t nearest_grid_index(std::span<const double> alphas, double alpha) {
  auto it = std::lower_bound(alphas.begin(), alphas.end(), alpha);
  if (it == alphas.begin()) return 0;
  if (it == alphas.end()) return alphas.size() - 1;
  const auto hi = static_cast<std::size_t>(it - alphas.begin());
  return (alpha - alphas[hi - 1] <= alphas[hi] - alpha) ? hi - 1 : hi;
}

/// alpha_u = clamp(k * (1 - oov_u), 0, 1), snapped to the curve grid.
inline double heuristic_alpha(double k, double oov_rate) {
  return std::clamp(k * (1.0 - oov_rate), 0.0, 1.0);
}

inline std::vector<std::size_t> heuristic_indices(const CurveSet& curves,
                                                  std::span<const std::size_t> members, double k) {
  std::vector<std::size_t> idx;
  idx.reserve(members.size());
  for (auto m : members)
    idx.push_back(nearest_grid_index(curves.alphas, heuristic_alpha(k, curves.users[m].oov_rate)));
  return idx;
}

struct HeuristicFit {
  double k = 0.0;
  std::vector<std::string> fit_users;
  std::vector<std::string> eval_users;
  std::vector<double> eval_alphas;        // per eval user
  SelectionSummary heuristic;             // on the held-out users
  ConstantAlpha constant_min_pp;          // chosen on the fit users, summary on held-out
  ConstantAlpha constant_max_lift;
  SelectionSummary oracle;                // held-out users' own oracle
};

struct HeuristicReport {
  std::vector<HeuristicFit> repetitions;
  double mean_k = 0.0;
  SelectionSummary heuristic;             // means over repetitions
  SelectionSummary constant_min_pp;
  SelectionSummary constant_max_lift;
  SelectionSummary oracle;
};

struct HeuristicOptions {
  AlphaGrid k_grid{0.0, 1.0, 0.001};
  std::size_t repetitions = 10;
  double fit_fraction = 0.5;
  std::uint64_t seed = 0;
};

/// Repeatedly splits users at random into a fit and a held-out part, picks k
/// minimizing mean PP over the fit part (on `fit_curves`), and evaluates on the
/// held-out part (on `eval_curves`). Both curve sets must list the same users
/// on the same grid; passing one set for both fits and evaluates on the same
/// split. Constant-alpha and oracle baselines are computed on the same
/// partitions for comparison.
inline HeuristicReport fit_heuristic(const CurveSet& fit_curves, const CurveSet& eval_curves,
                                     const HeuristicOptions& opt) {
  const std::size_t n = fit_curves.users.size();
  if (n < 2) throw InvalidArgument("heuristic fitting needs at least two users");
  if (eval_curves.users.size() != n || eval_curves.alphas != fit_curves.alphas)
    throw InvalidArgument("fit and evaluation curves must cover the same users and grid");
  for (std::size_t u = 0; u < n; ++u)
    if (fit_curves.users[u].user_id != eval_curves.users[u].user_id)
      throw InvalidArgument("fit and evaluation curves list users in different orders");
  if (opt.repetitions < 1) throw InvalidArgument("need at least one repetition");
  if (!(opt.fit_fraction > 0.0 && opt.fit_fraction < 1.0))
    throw InvalidArgument("fit_fraction must lie in (0,1)");
  const auto ks = opt.k_grid.points();
  if (ks.front() < 0.0) throw InvalidArgument("k must be non-negative");

  const std::size_t n_fit =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(opt.fit_fraction * static_cast<double>(n))), 1, n - 1);
  std::mt19937_64 rng(opt.seed);
  HeuristicReport report;
  std::vector<std::size_t> perm(n);
  for (std::size_t r = 0; r < opt.repetitions; ++r) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::size_t> fit(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_fit));
    std::vector<std::size_t> held(perm.begin() + static_cast<std::ptrdiff_t>(n_fit), perm.end());
    std::sort(fit.begin(), fit.end());
    std::sort(held.begin(), held.end());

    HeuristicFit f;
    double best_pp = 0.0;
    for (std::size_t i = 0; i < ks.size(); ++i) {
      const auto s = summarize(fit_curves, fit, heuristic_indices(fit_curves, fit, ks[i]));
      if (i == 0 || detail::improves(s.mean_pp, best_pp, Objective::MinMeanPP)) {
        best_pp = s.mean_pp;
        f.k = ks[i];
      }
    }
    const auto held_idx = heuristic_indices(eval_curves, held, f.k);
    f.heuristic = summarize(eval_curves, held, held_idx);
    for (auto u : fit) f.fit_users.push_back(fit_curves.users[u].user_id);
    for (std::size_t j = 0; j < held.size(); ++j) {
      f.eval_users.push_back(eval_curves.users[held[j]].user_id);
      f.eval_alphas.push_back(eval_curves.alphas[held_idx[j]]);
    }
    for (auto objective : {Objective::MinMeanPP, Objective::MaxMeanLift}) {
      auto c = constant_alpha(fit_curves, objective, fit);
      const std::vector<std::size_t> idx(held.size(), c.index);
      c.summary = summarize(eval_curves, held, idx);
      (objective == Objective::MinMeanPP ? f.constant_min_pp : f.constant_max_lift) = c;
    }
    std::vector<std::size_t> oracle_idx;
    for (auto u : held) oracle_idx.push_back(oracle_index(eval_curves.users[u]));
    f.oracle = summarize(eval_curves, held, oracle_idx);
    report.repetitions.push_back(std::move(f));
  }

  auto accumulate = [&](SelectionSummary& into, const SelectionSummary& s) {
    into.users += s.users;
    into.mean_pp += s.mean_pp;
    into.mean_lift += s.mean_lift;
    into.fraction_improved += s.fraction_improved;
  };
  for (const auto& f : report.repetitions) {
    report.mean_k += f.k;
    accumulate(report.heuristic, f.heuristic);
    accumulate(report.constant_min_pp, f.constant_min_pp.summary);
    accumulate(report.constant_max_lift, f.constant_max_lift.summary);
    accumulate(report.oracle, f.oracle);
  }
  const double reps = static_cast<double>(report.repetitions.size());
  report.mean_k /= reps;
  for (auto* s : {&report.heuristic, &report.constant_min_pp, &report.constant_max_lift, &report.oracle}) {
    s->users = static_cast<std::size_t>(std::llround(static_cast<double>(s->users) / reps));
    s->mean_pp /= reps;
    s->mean_lift /= reps;
    s->fraction_improved /= reps;
  }
  return report;
}

}  // namespace perslm
