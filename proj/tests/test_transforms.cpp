#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "nsti/rng.hpp"
#include "nsti/transforms.hpp"

using namespace nsti;
using transforms::Kind;
using transforms::TransformSpec;

namespace {

Tensor filled_spectrogram(std::size_t t, std::size_t f, double lo = 1.0, double hi = 2.0) {
  Rng rng(999);
  Tensor x({t, f});
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(lo, hi);
  return x;
}

}  // namespace

TEST_CASE("identity copies values and never aliases the input") {
  Tensor x = filled_spectrogram(10, 8);
  Rng rng(1);
  Tensor y = transforms::apply(TransformSpec{}, x, rng);
  REQUIRE(y.values() == x.values());
  REQUIRE_FALSE(y.same_storage(x));
}

TEST_CASE("forced frequency mask hits exactly the requested bins") {
  Tensor x = filled_spectrogram(5, 8);
  Tensor y = x.clone();
  transforms::mask_freq_band(y, 3, 2, 0.0);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t f = 0; f < 8; ++f) {
      if (f == 3 || f == 4)
        REQUIRE(y.at(t, f) == 0.0);
      else
        REQUIRE(y.at(t, f) == x.at(t, f));  // bit-identical
    }
  REQUIRE_THROWS_AS(transforms::mask_freq_band(y, 7, 2, 0.0), std::invalid_argument);
}

TEST_CASE("forced cutout rectangle hits exactly the requested block") {
  Tensor x = filled_spectrogram(6, 5);
  Tensor y = x.clone();
  transforms::mask_rect(y, 1, 3, 2, 2, -7.0);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t f = 0; f < 5; ++f) {
      const bool in = t >= 1 && t < 4 && f >= 2 && f < 4;
      REQUIRE(y.at(t, f) == (in ? -7.0 : x.at(t, f)));
    }
}

TEST_CASE("freq_mask leaves untouched cells bit-identical and masks whole columns") {
  Tensor x = filled_spectrogram(12, 16);  // all values >= 1, fill is 0
  TransformSpec spec;
  spec.kind = Kind::freq_mask;
  spec.n_masks = 3;
  spec.max_width = 4;
  Rng rng(42);
  Tensor y = transforms::apply(spec, x, rng);
  REQUIRE(y.shape() == x.shape());
  std::size_t masked_cols = 0;
  for (std::size_t f = 0; f < 16; ++f) {
    const bool masked = y.at(0, f) == 0.0;
    if (masked) ++masked_cols;
    for (std::size_t t = 0; t < 12; ++t) {
      if (masked)
        REQUIRE(y.at(t, f) == 0.0);  // masks span every frame of the column
      else
        REQUIRE(y.at(t, f) == x.at(t, f));
    }
  }
  REQUIRE(masked_cols <= 3 * 4);
}

TEST_CASE("masked-column fraction matches n_masks * E[w] / F") {
  // Small masks on a wide spectrogram keep overlap negligible, so the union
  // fraction sits on the analytic mean. E[w] = 1 for widths uniform{0,1,2}.
  TransformSpec spec;
  spec.kind = Kind::freq_mask;
  spec.n_masks = 6;
  spec.max_width = 2;
  const std::size_t f_bins = 256;
  const double analytic = 6.0 * 1.0 / static_cast<double>(f_bins);

  Tensor x = filled_spectrogram(2, f_bins);
  Rng rng(2024);
  double total_fraction = 0.0;
  const int trials = 10000;
  for (int i = 0; i < trials; ++i) {
    Tensor y = transforms::apply(spec, x, rng);
    std::size_t masked = 0;
    for (std::size_t f = 0; f < f_bins; ++f)
      if (y.at(0, f) == 0.0 && y.at(1, f) == 0.0) ++masked;
    total_fraction += static_cast<double>(masked) / static_cast<double>(f_bins);
  }
  const double measured = total_fraction / trials;
  REQUIRE(std::abs(measured - analytic) / analytic < 0.05);
}

TEST_CASE("mask width scaling tracks the frequency resolution") {
  REQUIRE(transforms::scaled_mask_width(32) == 6);
  REQUIRE(transforms::scaled_mask_width(160) == 34);  // the reference setting
}

TEST_CASE("noise transform shifts cells by zero-mean gaussians") {
  Tensor x = filled_spectrogram(40, 32);
  TransformSpec spec;
  spec.kind = Kind::noise;
  spec.sigma = 0.25;
  Rng rng(7);
  Tensor y = transforms::apply(spec, x, rng);
  double sum = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double d = y[i] - x[i];
    sum += d;
    sq += d * d;
  }
  const double n = static_cast<double>(x.numel());
  REQUIRE(sum / n == Catch::Approx(0.0).margin(0.02));
  REQUIRE(std::sqrt(sq / n) == Catch::Approx(0.25).epsilon(0.05));
}

TEST_CASE("cutout keeps shape and only writes the fill value") {
  Tensor x = filled_spectrogram(20, 16);  // values in [1,2], fill 0
  TransformSpec spec;
  spec.kind = Kind::cutout;
  spec.n_rects = 3;
  spec.max_time = 6;
  spec.max_freq = 5;
  Rng rng(11);
  Tensor y = transforms::apply(spec, x, rng);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < y.numel(); ++i)
    REQUIRE((y[i] == x[i] || y[i] == 0.0));
}

TEST_CASE("same seed reproduces a transform bit-for-bit") {
  Tensor x = filled_spectrogram(24, 32);
  TransformSpec spec = transforms::draw_spec("specaugment", 32);
  Rng r1(123), r2(123), r3(124);
  Tensor a = transforms::apply(spec, x, r1);
  Tensor b = transforms::apply(spec, x, r2);
  Tensor c = transforms::apply(spec, x, r3);
  REQUIRE(a.values() == b.values());
  REQUIRE(a.values() != c.values());
}

TEST_CASE("named presets cover the experiment table") {
  auto sa = transforms::draw_spec("specaugment", 32);
  REQUIRE(sa.kind == Kind::freq_mask);
  REQUIRE(sa.n_masks == 6);
  REQUIRE(sa.max_width == 6);
  REQUIRE(transforms::draw_spec("identity").kind == Kind::identity);
  REQUIRE(transforms::draw_spec("noise").kind == Kind::noise);
  REQUIRE(transforms::draw_spec("cutout").kind == Kind::cutout);
  REQUIRE_THROWS_AS(transforms::draw_spec("reverb"), std::invalid_argument);
  REQUIRE(transforms::kind_name(sa.kind) == "specaugment");
}

TEST_CASE("time masking stays off unless asked for") {
  Tensor x = filled_spectrogram(16, 8);
  TransformSpec spec;
  spec.kind = Kind::freq_mask;
  spec.n_masks = 0;          // isolate the time-mask path
  spec.n_time_masks = 2;
  spec.max_time_width = 4;
  Rng rng(5);
  Tensor y = transforms::apply(spec, x, rng);
  std::size_t masked_rows = 0;
  for (std::size_t t = 0; t < 16; ++t) {
    const bool masked = y.at(t, 0) == 0.0;
    if (masked) ++masked_rows;
    for (std::size_t f = 0; f < 8; ++f)
      REQUIRE(y.at(t, f) == (masked ? 0.0 : x.at(t, f)));
  }
  REQUIRE(masked_rows <= 8);

  spec.n_time_masks = 0;  // default-off: nothing changes
  Tensor z = transforms::apply(spec, x, rng);
  REQUIRE(z.values() == x.values());
}
