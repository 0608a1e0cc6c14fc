#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "nsti/autodiff.hpp"

// Sliding-window segmentation of long recordings and overlap-averaged
// stitching of the per-segment output lattices back into one lattice.

namespace nsti::windowing {

struct Segment {
  std::size_t start = 0;  // input-frame start; always a multiple of subsample
  Tensor slice;           // [len x F], len <= window; only the last may be shorter
  std::size_t index = 0;
};

constexpr std::size_t kDefaultWindow = 96;
constexpr double kDefaultStride = 0.125;

// Starts at 0, s, 2s, ... with s = round(stride * window) snapped down to a
// multiple of the subsample factor (at least one factor). If the regular
// grid leaves trailing frames uncovered, one extra segment is right-aligned
// to end exactly at T rather than padded.
inline std::vector<Segment> segment(const Tensor& x, std::size_t window,
                                    double stride_fraction, std::size_t subsample) {
  if (x.shape().size() != 2 || x.rows() == 0)
    throw std::invalid_argument("segment: recording must be non-empty [T x F], got " +
                                x.shape_str());
  if (subsample == 0) throw std::invalid_argument("segment: subsample factor must be positive");
  if (window < subsample)
    throw std::invalid_argument("segment: window " + std::to_string(window) +
                                " is smaller than the subsample factor " +
                                std::to_string(subsample));
  if (!(stride_fraction > 0.0) || stride_fraction > 1.0)
    throw std::invalid_argument("segment: stride fraction must be in (0, 1]");

  const std::size_t t_len = x.rows();
  std::size_t s = static_cast<std::size_t>(
      std::llround(stride_fraction * static_cast<double>(window)));
  s = (s / subsample) * subsample;
  if (s == 0) s = subsample;

  std::vector<Segment> out;
  auto push = [&](std::size_t start, std::size_t len) {
    out.push_back({start, slice_rows(x, start, start + len), out.size()});
  };
  if (t_len <= window) {
    push(0, t_len);
    return out;
  }
  std::size_t covered = 0;
  for (std::size_t start = 0; start + window <= t_len; start += s) {
    push(start, window);
    covered = start + window;
  }
  if (covered < t_len) {
    // Right-align the final segment on the subsample grid so it ends at T.
    const std::size_t tail = t_len - window;
    const std::size_t start = ((tail + subsample - 1) / subsample) * subsample;
    push(start, t_len - start);
  }
  return out;
}

// Average the probability rows of overlapping pieces, one output lattice for
// the whole recording. Offsets are output-frame positions (input start
// divided by the subsample factor). Frames covered by a single piece pass
// through bit-identically; overlapped frames use an incremental mean, which
// is exact when the covering rows are equal.
inline Tensor stitch(std::vector<std::pair<std::size_t, Tensor>> pieces) {
  if (pieces.empty()) throw std::invalid_argument("stitch: no pieces");
  const std::size_t cols = pieces[0].second.cols();
  for (const auto& [off, p] : pieces)
    if (p.shape().size() != 2 || p.rows() == 0 || p.cols() != cols)
      throw std::invalid_argument("stitch: piece lattices disagree: " +
                                  pieces[0].second.shape_str() + " vs " + p.shape_str());

  std::stable_sort(pieces.begin(), pieces.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });

  std::size_t covered = 0, total = 0;
  for (const auto& [off, p] : pieces) {
    if (off > covered)
      throw std::invalid_argument("stitch: coverage gap in output frames [" +
                                  std::to_string(covered) + ", " + std::to_string(off) + ")");
    covered = std::max(covered, off + p.rows());
    total = covered;
  }

  // `out` holds the first covering log row of each frame; `acc` carries the
  // incremental probability-domain mean once a frame sees a second cover.
  // Frames whose covering rows are all bit-identical emit the original log
  // row, so averaging equal distributions is exactly the identity.
  Tensor out({total, cols});
  std::vector<double> acc(total * cols, 0.0);
  std::vector<std::size_t> count(total, 0);
  std::vector<char> same(total, 1);
  for (const auto& [off, p] : pieces)
    for (std::size_t r = 0; r < p.rows(); ++r) {
      const std::size_t frame = off + r;
      const std::size_t k = ++count[frame];
      if (k == 1) {
        for (std::size_t j = 0; j < cols; ++j) out.at(frame, j) = p.at(r, j);
        continue;
      }
      if (k == 2)
        for (std::size_t j = 0; j < cols; ++j)
          acc[frame * cols + j] = std::exp(out.at(frame, j));
      for (std::size_t j = 0; j < cols; ++j) {
        if (p.at(r, j) != out.at(frame, j)) same[frame] = 0;
        const double v = std::exp(p.at(r, j));
        acc[frame * cols + j] += (v - acc[frame * cols + j]) / static_cast<double>(k);
      }
    }
  for (std::size_t frame = 0; frame < total; ++frame)
    if (count[frame] > 1 && !same[frame])
      for (std::size_t j = 0; j < cols; ++j)
        out.at(frame, j) = std::log(acc[frame * cols + j]);
  return out;
}

}  // namespace nsti::windowing
