#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "cpdet/errors.hpp"

namespace cpdet {

namespace detail {

// Cost value carrying a secondary component for deterministic tie-breaking.
// Lexicographically ordered pairs under componentwise addition form an
// ordered group, so the augmenting-path solver below stays correct when run
// on them verbatim.
struct CostPair {
  double primary = 0.0;
  double secondary = 0.0;

  CostPair operator+(const CostPair& o) const { return {primary + o.primary, secondary + o.secondary}; }
  CostPair operator-(const CostPair& o) const { return {primary - o.primary, secondary - o.secondary}; }
  CostPair& operator+=(const CostPair& o) {
    primary += o.primary;
    secondary += o.secondary;
    return *this;
  }
  CostPair& operator-=(const CostPair& o) {
    primary -= o.primary;
    secondary -= o.secondary;
    return *this;
  }
  bool operator<(const CostPair& o) const {
    if (primary != o.primary) return primary < o.primary;
    return secondary < o.secondary;
  }
  bool operator==(const CostPair& o) const { return primary == o.primary && secondary == o.secondary; }
};

inline CostPair cost_pair_inf() {
  return {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
}

}  // namespace detail

struct MatchResult {
  std::vector<size_t> gt_to_query;  // injective, one query per ground-truth row
  double total_cost = 0.0;
};

// Minimum-cost injective assignment of G rows onto Q >= G columns via
// shortest augmenting paths (the Jonker-Volgenant variant used by common
// linear-sum-assignment solvers). Ties in total cost break lexicographically
// by (row index, column index): the tie-break is folded into a secondary
// cost channel that positionally encodes column choices, which is exact
// while (Q+1)^G fits integer-exactly in a double; beyond that the secondary
// channel degrades to plain column preference.
inline MatchResult hungarian_match(const std::vector<std::vector<double>>& cost) {
  size_t g = cost.size();
  if (g == 0) return {};
  size_t q = cost[0].size();
  if (g > q) throw ContractError("assignment needs at least as many columns as rows");
  for (const auto& row : cost) {
    if (row.size() != q) throw ContractError("ragged cost matrix");
    for (double c : row)
      if (!std::isfinite(c)) throw NumericError("non-finite assignment cost");
  }

  bool exact_lex = static_cast<double>(g) * std::log2(static_cast<double>(q) + 1.0) <= 52.0;
  std::vector<double> tiebreak_weight(g, 1.0);
  if (exact_lex)
    for (size_t i = g; i-- > 0;)
      tiebreak_weight[i] = (i + 1 < g) ? tiebreak_weight[i + 1] * static_cast<double>(q + 1) : 1.0;

  using detail::CostPair;
  auto entry = [&](size_t i, size_t j) -> CostPair {
    return {cost[i][j], static_cast<double>(j) * tiebreak_weight[i]};
  };

  std::vector<CostPair> u(g), v(q);
  std::vector<long> col4row(g, -1), row4col(q, -1);
  std::vector<long> path(q, -1);
  std::vector<CostPair> shortest(q);
  std::vector<char> sr(g), sc(q);

  for (size_t currow = 0; currow < g; ++currow) {
    std::fill(shortest.begin(), shortest.end(), detail::cost_pair_inf());
    std::fill(sr.begin(), sr.end(), 0);
    std::fill(sc.begin(), sc.end(), 0);

    CostPair min_val{};
    size_t i = currow;
    long sink = -1;
    while (sink == -1) {
      sr[i] = 1;
      for (size_t j = 0; j < q; ++j) {
        if (sc[j]) continue;
        CostPair r = min_val + entry(i, j) - u[i] - v[j];
        if (r < shortest[j]) {
          path[j] = static_cast<long>(i);
          shortest[j] = r;
        }
      }
      long best = -1;
      for (size_t j = 0; j < q; ++j) {
        if (sc[j]) continue;
        if (best == -1 || shortest[j] < shortest[best]) best = static_cast<long>(j);
      }
      if (best == -1 || shortest[best] == detail::cost_pair_inf())
        throw NumericError("assignment is infeasible");
      min_val = shortest[best];
      sc[best] = 1;
      if (row4col[best] == -1)
        sink = best;
      else
        i = static_cast<size_t>(row4col[best]);
    }

    u[currow] += min_val;
    for (size_t r = 0; r < g; ++r)
      if (sr[r] && r != currow) u[r] += min_val - shortest[static_cast<size_t>(col4row[r])];
    for (size_t j = 0; j < q; ++j)
      if (sc[j]) v[j] -= min_val - shortest[j];

    long j = sink;
    for (;;) {
      long pi = path[static_cast<size_t>(j)];
      row4col[static_cast<size_t>(j)] = pi;
      std::swap(col4row[static_cast<size_t>(pi)], j);
      if (static_cast<size_t>(pi) == currow) break;
    }
  }

  MatchResult res;
  res.gt_to_query.resize(g);
  for (size_t r = 0; r < g; ++r) res.gt_to_query[r] = static_cast<size_t>(col4row[r]);
  for (size_t r = 0; r < g; ++r) res.total_cost += cost[r][res.gt_to_query[r]];
  return res;
}

}  // namespace cpdet
