#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace nsti::metrics {

// Nominal frame rate of synthetic recordings, used only for real-time-factor
// arithmetic; never a correctness input.
inline constexpr double kFramesPerSecond = 100.0;

struct WerBreakdown {
  std::size_t substitutions = 0;
  std::size_t insertions = 0;
  std::size_t deletions = 0;
  std::size_t ref_len = 0;
  double wer = 0.0;
};

namespace detail {

struct EditCounts {
  std::size_t cost = 0;
  std::size_t s = 0;
  std::size_t i = 0;
  std::size_t d = 0;
};

// Ordering that makes the count decomposition deterministic among all
// minimal-cost alignments: prefer substitution over deletion over insertion,
// i.e. lexicographically smallest (cost, -S, -D). The objective is additive
// per edit, so dynamic programming over it is exact.
inline bool better(const EditCounts& a, const EditCounts& b) {
  if (a.cost != b.cost) return a.cost < b.cost;
  if (a.s != b.s) return a.s > b.s;
  return a.d > b.d;
}

}  // namespace detail

// Minimal-edit alignment with unit costs; ties broken toward substitutions,
// then deletions, then insertions.
inline WerBreakdown wer(const std::vector<int>& ref,
                        const std::vector<int>& hyp) {
  using detail::EditCounts;
  const std::size_t n = ref.size();
  const std::size_t m = hyp.size();
  std::vector<std::vector<EditCounts>> cell(n + 1,
                                            std::vector<EditCounts>(m + 1));
  for (std::size_t i = 1; i <= n; ++i) cell[i][0] = EditCounts{i, 0, 0, i};
  for (std::size_t j = 1; j <= m; ++j) cell[0][j] = EditCounts{j, 0, j, 0};
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const bool differ = ref[i - 1] != hyp[j - 1];
      EditCounts diag = cell[i - 1][j - 1];
      diag.cost += differ ? 1 : 0;
      diag.s += differ ? 1 : 0;
      EditCounts del = cell[i - 1][j];
      ++del.cost;
      ++del.d;
      EditCounts ins = cell[i][j - 1];
      ++ins.cost;
      ++ins.i;
      EditCounts best = diag;
      if (detail::better(del, best)) best = del;
      if (detail::better(ins, best)) best = ins;
      cell[i][j] = best;
    }
  }
  WerBreakdown out;
  out.ref_len = n;
  out.substitutions = cell[n][m].s;
  out.insertions = cell[n][m].i;
  out.deletions = cell[n][m].d;
  out.wer = static_cast<double>(cell[n][m].cost) /
            static_cast<double>(std::max<std::size_t>(1, n));
  return out;
}

// Pools alignment counts across recordings: corpus-level error rate.
inline WerBreakdown pool(const std::vector<WerBreakdown>& parts) {
  WerBreakdown out;
  for (const auto& p : parts) {
    out.substitutions += p.substitutions;
    out.insertions += p.insertions;
    out.deletions += p.deletions;
    out.ref_len += p.ref_len;
  }
  out.wer = static_cast<double>(out.substitutions + out.insertions +
                                out.deletions) /
            static_cast<double>(std::max<std::size_t>(1, out.ref_len));
  return out;
}

// Relative error reduction versus a baseline.
inline double werr(double baseline, double adapted) {
  if (baseline <= 0.0)
    throw std::invalid_argument(
        "werr: relative reduction is undefined for baseline " +
        std::to_string(baseline));
  return (baseline - adapted) / baseline;
}

// Real-time factor: processing seconds per second of signal.
inline double rtf(double processing_seconds, double duration_seconds) {
  if (!(duration_seconds > 0.0))
    throw std::invalid_argument("rtf: duration must be positive, got " +
                                std::to_string(duration_seconds));
  return processing_seconds / duration_seconds;
}

inline double frames_to_seconds(std::size_t frames) {
  return static_cast<double>(frames) / kFramesPerSecond;
}

}  // namespace nsti::metrics
