#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "nsti/autodiff.hpp"
#include "nsti/rng.hpp"

// Synthetic spectrogram corpus with controllable domain shift. Symbols are
// fixed frequency templates; a recording is a sequence of utterances
// (back-to-back symbols) separated by silence gaps, with per-recording
// nuisance factors (spectral tilt, gain, template drift) shared by every
// utterance in the recording, plus i.i.d. Gaussian noise.

namespace nsti::corpus {

struct SymbolTemplate {
  int id = 0;
  Tensor pattern;  // [F x D], values in [0, 1], at least one entry > 0.5
};

struct DomainConfig {
  double tilt_slope = 0.0;   // additive per-bin ramp, value = slope * bin
  double noise_sigma = 0.0;  // i.i.d. Gaussian per cell
  double drift_sigma = 0.0;  // per-recording template perturbation
  double gain = 1.0;         // multiplies symbol energy
  std::uint64_t seed = 0;    // root of all nuisance draws
  double fade_p = 0.0;       // intermittent fading: per-placement dropout prob
  double fade_gain = 0.0;    // residual energy of a faded placement
};

struct UtteranceSpan {
  std::size_t start = 0;  // first frame
  std::size_t end = 0;    // one past the last frame
  std::vector<int> labels;
};

// Ground-truth placement of one symbol instance; synthesis bookkeeping that
// lets an independent matched filter check the rendering.
struct SymbolPlacement {
  int label = 0;
  std::size_t start = 0;
  std::size_t length = 0;
};

struct Recording {
  Tensor spectrogram;  // [T x F]
  std::vector<int> reference;
  std::vector<UtteranceSpan> spans;
  std::vector<SymbolPlacement> placements;
  int recording_id = 0;
  std::string domain_id;
  std::uint64_t seed = 0;  // content seed this recording was built from
};

struct SynthParams {
  std::size_t target_frames = 512;  // 0: place exactly n_utterances instead
  std::size_t n_utterances = 4;
  std::size_t min_symbols = 4, max_symbols = 12;  // per utterance
  std::size_t min_gap = 2, max_gap = 6;           // silence between utterances
  bool duration_jitter = true;                    // D +/- 1 per placement
};

// Rendered values are clamped to this range; synthetic "log-mel" dynamic range.
constexpr double kClampLo = -4.0;
constexpr double kClampHi = 4.0;

namespace detail {

// Each symbol is a stack of several bands so its identity is redundant
// across frequency: masking a band subset still leaves it recognizable,
// which is what augmentation-based pseudo-label training relies on.
inline Tensor draw_template(Rng& rng, std::size_t f_bins, std::size_t d_frames) {
  Tensor p({f_bins, d_frames});
  for (std::size_t i = 0; i < p.numel(); ++i) p[i] = rng.uniform(0.0, 0.15);
  const std::size_t bands = 3 + static_cast<std::size_t>(rng.uniform_int(3));
  for (std::size_t b = 0; b < bands; ++b) {
    const std::size_t height = 3 + static_cast<std::size_t>(rng.uniform_int(4));
    const std::size_t f0 = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(f_bins - height) + 1));
    const double amp = rng.uniform(0.7, 1.0);
    for (std::size_t d = 0; d < d_frames; ++d) {
      const double env = rng.uniform(0.85, 1.0);
      for (std::size_t f = f0; f < f0 + height; ++f)
        p.at(f, d) = std::max(p.at(f, d), std::min(1.0, amp * env));
    }
  }
  return p;
}

inline bool separable(const Tensor& a, const Tensor& b) {
  std::size_t differing = 0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (std::abs(a[i] - b[i]) > 0.2) ++differing;
  return 4 * differing >= a.numel();  // at least 25% of entries
}

// Nearest-neighbor resample of a [F x D] pattern to length frames.
inline Tensor resample(const Tensor& pattern, std::size_t length) {
  const std::size_t f_bins = pattern.rows(), d = pattern.cols();
  Tensor out({f_bins, length});
  for (std::size_t j = 0; j < length; ++j) {
    const std::size_t src = j * d / length;
    for (std::size_t f = 0; f < f_bins; ++f) out.at(f, j) = pattern.at(f, src);
  }
  return out;
}

}  // namespace detail

// Deterministic template set; redraws a candidate until it is separable from
// every accepted template.
inline std::vector<SymbolTemplate> gen_templates(std::uint64_t seed, std::size_t v,
                                                 std::size_t f_bins, std::size_t d_frames) {
  if (v < 2 || f_bins < 8 || d_frames < 2)
    throw std::invalid_argument("gen_templates: need V >= 2, F >= 8, D >= 2");
  Rng rng(mix_seed(seed, 0x7e4cf));
  std::vector<SymbolTemplate> out;
  for (std::size_t sym = 0; sym < v; ++sym) {
    bool accepted = false;
    for (int attempt = 0; attempt < 100; ++attempt) {
      Tensor cand = detail::draw_template(rng, f_bins, d_frames);
      bool ok = true;
      for (const auto& t : out)
        if (!detail::separable(cand, t.pattern)) {
          ok = false;
          break;
        }
      if (ok) {
        out.push_back({static_cast<int>(sym), cand});
        accepted = true;
        break;
      }
    }
    if (!accepted)
      throw std::runtime_error("gen_templates: no separable template for symbol " +
                               std::to_string(sym) + " after 100 retries");
  }
  return out;
}

// One recording. Content (labels, lengths, gaps) is a function of
// content_seed; nuisance (tilt, gain, drift, noise) of (domain.seed,
// recording_id), so every utterance of a recording shares the same tilt,
// gain, and drifted templates.
inline Recording synth_recording(const std::vector<SymbolTemplate>& templates,
                                 const DomainConfig& domain, const SynthParams& params,
                                 int recording_id, std::uint64_t content_seed,
                                 std::string domain_id = {}) {
  if (templates.empty()) throw std::invalid_argument("synth_recording: no templates");
  if (domain.noise_sigma < 0 || domain.drift_sigma < 0)
    throw std::invalid_argument("synth_recording: sigmas must be non-negative");
  if (domain.gain <= 0) throw std::invalid_argument("synth_recording: gain must be positive");
  if (domain.fade_p < 0 || domain.fade_p > 1 || domain.fade_gain < 0)
    throw std::invalid_argument("synth_recording: bad fade parameters");
  if (params.target_frames == 0 && params.n_utterances < 1)
    throw std::invalid_argument("synth_recording: need at least one utterance");
  if (params.min_symbols < 1 || params.min_symbols > params.max_symbols ||
      params.min_gap > params.max_gap)
    throw std::invalid_argument("synth_recording: bad length ranges");

  const std::size_t f_bins = templates[0].pattern.rows();
  const std::size_t d_nom = templates[0].pattern.cols();
  const std::size_t v = templates.size();

  // Fixed nuisance draw order: tilt, gain, per-template drift, per-placement
  // fades (drawn only when fading is enabled, so fade_p = 0 reproduces the
  // legacy stream bit for bit), then noise.
  Rng nuisance(mix_seed(domain.seed, static_cast<std::uint64_t>(recording_id)));
  const double tilt = domain.tilt_slope * (1.0 + 0.25 * nuisance.gaussian());
  const double gain = domain.gain * std::exp(0.1 * nuisance.gaussian());
  std::vector<Tensor> drifted;
  drifted.reserve(v);
  for (const auto& t : templates) {
    Tensor d = t.pattern.clone();
    for (std::size_t i = 0; i < d.numel(); ++i)
      d[i] = std::clamp(d[i] + domain.drift_sigma * nuisance.gaussian(), 0.0, 1.0);
    drifted.push_back(d);
  }

  Rng content(mix_seed(content_seed, 0x5eed));
  Recording rec;
  rec.recording_id = recording_id;
  rec.domain_id = std::move(domain_id);
  rec.seed = content_seed;

  // Lay out utterances left to right; target_frames mode stops before
  // overrunning and pads the remainder with silence.
  std::size_t pos = 0, placed_utts = 0;
  const auto draw_range = [&](std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(
                    content.uniform_int(static_cast<std::int64_t>(hi - lo) + 1));
  };
  while (true) {
    if (params.target_frames == 0 && placed_utts == params.n_utterances) break;
    const std::size_t gap = draw_range(params.min_gap, params.max_gap);
    const std::size_t n_sym = draw_range(params.min_symbols, params.max_symbols);
    std::vector<int> labels(n_sym);
    std::vector<std::size_t> lengths(n_sym);
    std::size_t utt_frames = 0;
    for (std::size_t s = 0; s < n_sym; ++s) {
      labels[s] = static_cast<int>(content.uniform_int(static_cast<std::int64_t>(v)));
      lengths[s] = params.duration_jitter
                       ? d_nom - 1 + static_cast<std::size_t>(content.uniform_int(3))
                       : d_nom;
      utt_frames += lengths[s];
    }
    if (params.target_frames > 0 &&
        pos + gap + utt_frames + params.min_gap > params.target_frames) {
      if (placed_utts == 0)
        throw std::invalid_argument("synth_recording: target_frames " +
                                    std::to_string(params.target_frames) +
                                    " cannot fit one utterance");
      break;
    }
    UtteranceSpan span;
    span.start = pos + gap;
    span.labels = labels;
    std::size_t at = span.start;
    for (std::size_t s = 0; s < n_sym; ++s) {
      rec.placements.push_back({labels[s], at, lengths[s]});
      at += lengths[s];
    }
    span.end = at;
    rec.spans.push_back(span);
    rec.reference.insert(rec.reference.end(), labels.begin(), labels.end());
    pos = at;
    ++placed_utts;
  }
  const std::size_t t_len =
      params.target_frames > 0 ? params.target_frames : pos + draw_range(params.min_gap, params.max_gap);

  // Intermittent fading: each placement independently drops to fade_gain with
  // probability fade_p. Faded symbols read as (near) silence while the
  // surviving ones keep the recording's normalization anchored.
  std::vector<double> fade(rec.placements.size(), 1.0);
  if (domain.fade_p > 0)
    for (auto& fg : fade)
      if (nuisance.uniform() < domain.fade_p) fg = domain.fade_gain;

  Tensor spec({t_len, f_bins});
  for (std::size_t i = 0; i < rec.placements.size(); ++i) {
    const auto& p = rec.placements[i];
    Tensor pat = detail::resample(drifted[static_cast<std::size_t>(p.label)], p.length);
    for (std::size_t j = 0; j < p.length; ++j)
      for (std::size_t f = 0; f < f_bins; ++f)
        spec.at(p.start + j, f) += fade[i] * pat.at(f, j);
  }
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t f = 0; f < f_bins; ++f) {
      double val = gain * spec.at(t, f) + tilt * static_cast<double>(f);
      if (domain.noise_sigma > 0) val += nuisance.gaussian(0.0, domain.noise_sigma);
      spec.at(t, f) = std::clamp(val, kClampLo, kClampHi);
    }
  rec.spectrogram = spec;
  return rec;
}

// A split of recordings with globally unique ids starting at first_id; the
// i-th recording draws content from mix(seed, i) and nuisance from
// (domain.seed, first_id + i).
inline std::vector<Recording> make_split(const std::vector<SymbolTemplate>& templates,
                                         const DomainConfig& domain,
                                         const SynthParams& params, std::size_t n_recordings,
                                         std::uint64_t seed, int first_id = 0,
                                         const std::string& domain_id = {}) {
  if (n_recordings < 1) throw std::invalid_argument("make_split: need at least one recording");
  std::vector<Recording> out;
  out.reserve(n_recordings);
  for (std::size_t i = 0; i < n_recordings; ++i)
    out.push_back(synth_recording(templates, domain, params,
                                  first_id + static_cast<int>(i),
                                  mix_seed(seed, i), domain_id));
  return out;
}

// Scalar zero-mean/unit-variance normalization over all cells. Deliberately
// not per-bin: a per-bin scheme would cancel the tilt component of the
// domain shift that adaptation is supposed to face.
inline Tensor normalized(const Tensor& spec) {
  if (spec.numel() == 0) throw std::invalid_argument("normalized: empty spectrogram");
  double mean = 0.0;
  for (std::size_t i = 0; i < spec.numel(); ++i) mean += spec[i];
  mean /= static_cast<double>(spec.numel());
  double var = 0.0;
  for (std::size_t i = 0; i < spec.numel(); ++i) {
    const double d = spec[i] - mean;
    var += d * d;
  }
  var /= static_cast<double>(spec.numel());
  if (var < 1e-24) throw std::runtime_error("normalized: constant spectrogram");
  const double inv = 1.0 / std::sqrt(var);
  Tensor out(spec.shape());
  for (std::size_t i = 0; i < spec.numel(); ++i) out[i] = (spec[i] - mean) * inv;
  return out;
}

// ---- Disk format -----------------------------------------------------------
// rec_XXXXX.bin: "NSTI", version byte 1, u32 T, u32 F, then T*F f64 values,
// all little-endian, row-major. rec_XXXXX.json: metadata sidecar.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f64(std::ostream& os, double d) {
  const auto u = std::bit_cast<std::uint64_t>(d);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline double get_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(u);
}

}  // namespace detail

inline std::string recording_basename(int recording_id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "rec_%05d", recording_id);
  return buf;
}

inline void save_recording(const std::filesystem::path& dir, const Recording& rec) {
  std::filesystem::create_directories(dir);
  const auto base = dir / recording_basename(rec.recording_id);
  {
    std::ofstream os(base.string() + ".bin", std::ios::binary);
    if (!os) throw std::runtime_error("save_recording: cannot open " + base.string() + ".bin");
    os.write("NSTI", 4);
    os.put(1);  // version
    detail::put_u32(os, static_cast<std::uint32_t>(rec.spectrogram.rows()));
    detail::put_u32(os, static_cast<std::uint32_t>(rec.spectrogram.cols()));
    for (std::size_t i = 0; i < rec.spectrogram.numel(); ++i)
      detail::put_f64(os, rec.spectrogram[i]);
    if (!os) throw std::runtime_error("save_recording: write failed for " + base.string());
  }
  nlohmann::ordered_json j;
  j["recording_id"] = rec.recording_id;
  j["domain_id"] = rec.domain_id;
  j["seed"] = rec.seed;
  j["reference"] = rec.reference;
  j["spans"] = nlohmann::ordered_json::array();
  for (const auto& s : rec.spans)
    j["spans"].push_back({{"start", s.start}, {"end", s.end}, {"labels", s.labels}});
  j["placements"] = nlohmann::ordered_json::array();
  for (const auto& p : rec.placements)
    j["placements"].push_back({{"label", p.label}, {"start", p.start}, {"length", p.length}});
  std::ofstream js(base.string() + ".json");
  if (!js) throw std::runtime_error("save_recording: cannot open " + base.string() + ".json");
  js << j.dump(2) << "\n";
}

inline Recording load_recording(const std::filesystem::path& bin_path) {
  std::ifstream is(bin_path, std::ios::binary);
  if (!is) throw std::runtime_error("load_recording: cannot open " + bin_path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "NSTI")
    throw std::runtime_error("load_recording: " + bin_path.string() +
                             " is not an NSTI tensor file");
  const int version = is.get();
  if (version != 1)
    throw std::runtime_error("load_recording: unsupported version " +
                             std::to_string(version) + " in " + bin_path.string());
  const std::uint32_t t_len = detail::get_u32(is);
  const std::uint32_t f_bins = detail::get_u32(is);
  if (!is) throw std::runtime_error("load_recording: truncated header in " + bin_path.string());
  Recording rec;
  rec.spectrogram = Tensor({t_len, f_bins});
  for (std::size_t i = 0; i < rec.spectrogram.numel(); ++i)
    rec.spectrogram[i] = detail::get_f64(is);
  if (!is) throw std::runtime_error("load_recording: truncated payload in " + bin_path.string());

  auto json_path = bin_path;
  json_path.replace_extension(".json");
  std::ifstream js(json_path);
  if (!js) throw std::runtime_error("load_recording: missing sidecar " + json_path.string());
  nlohmann::json j;
  try {
    js >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_recording: bad sidecar " + json_path.string() + ": " + e.what());
  }
  rec.recording_id = j.at("recording_id").get<int>();
  rec.domain_id = j.at("domain_id").get<std::string>();
  rec.seed = j.at("seed").get<std::uint64_t>();
  rec.reference = j.at("reference").get<std::vector<int>>();
  for (const auto& s : j.at("spans")) {
    UtteranceSpan span;
    span.start = s.at("start").get<std::size_t>();
    span.end = s.at("end").get<std::size_t>();
    span.labels = s.at("labels").get<std::vector<int>>();
    rec.spans.push_back(std::move(span));
  }
  for (const auto& p : j.at("placements"))
    rec.placements.push_back({p.at("label").get<int>(), p.at("start").get<std::size_t>(),
                              p.at("length").get<std::size_t>()});
  return rec;
}

inline void save_split(const std::filesystem::path& dir, const std::vector<Recording>& recs) {
  for (const auto& r : recs) save_recording(dir, r);
}

inline std::vector<Recording> load_split(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir))
    throw std::runtime_error("load_split: no such directory " + dir.string());
  std::vector<std::filesystem::path> bins;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".bin") bins.push_back(e.path());
  std::sort(bins.begin(), bins.end());
  std::vector<Recording> out;
  out.reserve(bins.size());
  for (const auto& p : bins) out.push_back(load_recording(p));
  return out;
}

}  // namespace nsti::corpus
