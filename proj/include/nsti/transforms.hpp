#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

#include "nsti/autodiff.hpp"
#include "nsti/rng.hpp"

// Spectrogram augmentations applied to the student's input copy: identity,
// the frequency-masking component of SpecAugment, CutOut rectangles, and
// additive Gaussian noise. Spectrograms are [T x F] tensors (time rows,
// frequency columns); inputs are never mutated.

namespace nsti::transforms {

enum class Kind { identity, freq_mask, cutout, noise };

struct TransformSpec {
  Kind kind = Kind::identity;
  // freq_mask
  std::size_t n_masks = 6;
  std::size_t max_width = 13;
  // time masking, off by default; kept behind these fields for ablations
  std::size_t n_time_masks = 0;
  std::size_t max_time_width = 0;
  // cutout
  std::size_t n_rects = 3;
  std::size_t max_time = 16;
  std::size_t max_freq = 10;
  // noise
  double sigma = 0.1;
  // value written into masked cells; 0 matches the post-normalization mean
  double fill = 0.0;
};

// Mask width scales with the frequency-bin count: width 34 at reference
// resolution 160 -> 0.2125 F, truncated (6 at F=32). Wider masks destroy the
// narrowband symbol signatures outright and pseudo-label training collapses
// into hallucinated insertions, so the milder scaling is the operative one.
inline std::size_t scaled_mask_width(std::size_t f_bins) {
  return static_cast<std::size_t>(0.2125 * static_cast<double>(f_bins));
}

// Deterministic kernels; apply() draws parameters and delegates here, tests
// can force exact placements.
inline void mask_freq_band(Tensor& x, std::size_t f0, std::size_t width, double fill) {
  const std::size_t t_len = x.rows(), f_len = x.cols();
  if (f0 + width > f_len)
    throw std::invalid_argument("mask_freq_band: bins [" + std::to_string(f0) + ", " +
                                std::to_string(f0 + width) + ") exceed " +
                                std::to_string(f_len));
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t f = f0; f < f0 + width; ++f) x.at(t, f) = fill;
}

inline void mask_time_band(Tensor& x, std::size_t t0, std::size_t width, double fill) {
  if (t0 + width > x.rows())
    throw std::invalid_argument("mask_time_band: frames [" + std::to_string(t0) + ", " +
                                std::to_string(t0 + width) + ") exceed " +
                                std::to_string(x.rows()));
  for (std::size_t t = t0; t < t0 + width; ++t)
    for (std::size_t f = 0; f < x.cols(); ++f) x.at(t, f) = fill;
}

inline void mask_rect(Tensor& x, std::size_t t0, std::size_t t_width,
                      std::size_t f0, std::size_t f_width, double fill) {
  if (t0 + t_width > x.rows() || f0 + f_width > x.cols())
    throw std::invalid_argument("mask_rect: rectangle exceeds spectrogram " +
                                x.shape_str());
  for (std::size_t t = t0; t < t0 + t_width; ++t)
    for (std::size_t f = f0; f < f0 + f_width; ++f) x.at(t, f) = fill;
}

inline Tensor apply(const TransformSpec& spec, const Tensor& x, Rng& rng) {
  if (x.shape().size() != 2 || x.rows() == 0 || x.cols() == 0)
    throw std::invalid_argument("transform: spectrogram must be non-empty [T x F], got " +
                                x.shape_str());
  Tensor y = x.clone();
  const std::size_t t_len = y.rows(), f_len = y.cols();
  switch (spec.kind) {
    case Kind::identity:
      break;
    case Kind::freq_mask: {
      // Width drawn uniformly including 0 (SpecAugment convention), then a
      // uniform start among the placements that fit. Oversized settings are
      // clamped to the spectrogram.
      const std::size_t cap = std::min(spec.max_width, f_len);
      for (std::size_t m = 0; m < spec.n_masks; ++m) {
        const auto w = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(cap) + 1));
        const auto f0 = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(f_len - w) + 1));
        mask_freq_band(y, f0, w, spec.fill);
      }
      const std::size_t tcap = std::min(spec.max_time_width, t_len);
      for (std::size_t m = 0; m < spec.n_time_masks; ++m) {
        const auto w = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(tcap) + 1));
        const auto t0 = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(t_len - w) + 1));
        mask_time_band(y, t0, w, spec.fill);
      }
      break;
    }
    case Kind::cutout: {
      const std::size_t tcap = std::min(spec.max_time, t_len);
      const std::size_t fcap = std::min(spec.max_freq, f_len);
      for (std::size_t r = 0; r < spec.n_rects; ++r) {
        const auto th = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(tcap) + 1));
        const auto fw = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(fcap) + 1));
        const auto t0 = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(t_len - th) + 1));
        const auto f0 = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(f_len - fw) + 1));
        mask_rect(y, t0, th, f0, fw, spec.fill);
      }
      break;
    }
    case Kind::noise: {
      if (spec.sigma < 0)
        throw std::invalid_argument("transform: noise sigma must be non-negative");
      for (std::size_t i = 0; i < y.numel(); ++i) y[i] += rng.gaussian(0.0, spec.sigma);
      break;
    }
  }
  return y;
}

// Named presets for the transform-comparison experiments.
inline TransformSpec draw_spec(const std::string& name, std::size_t f_bins = 32) {
  TransformSpec s;
  if (name == "identity") {
    s.kind = Kind::identity;
  } else if (name == "specaugment") {
    s.kind = Kind::freq_mask;
    s.n_masks = 6;
    s.max_width = scaled_mask_width(f_bins);
  } else if (name == "cutout") {
    s.kind = Kind::cutout;
  } else if (name == "noise") {
    s.kind = Kind::noise;
  } else {
    throw std::invalid_argument(
        "transform: unknown setting '" + name +
        "' (expected specaugment, identity, noise, or cutout)");
  }
  return s;
}

inline std::string kind_name(Kind k) {
  switch (k) {
    case Kind::identity: return "identity";
    case Kind::freq_mask: return "specaugment";
    case Kind::cutout: return "cutout";
    case Kind::noise: return "noise";
  }
  return "?";
}

}  // namespace nsti::transforms
