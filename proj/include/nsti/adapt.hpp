#pragma once

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "nsti/autodiff.hpp"
#include "nsti/corpus.hpp"
#include "nsti/ctc.hpp"
#include "nsti/metrics.hpp"
#include "nsti/model.hpp"
#include "nsti/optim.hpp"
#include "nsti/rng.hpp"
#include "nsti/transforms.hpp"
#include "nsti/windowing.hpp"

// Per-recording test-time adaptation: the model pseudo-labels each window of
// the recording it is transcribing and trains itself toward those labels on
// augmented copies of the same window, then produces the final transcript.

namespace nsti::adapt {

enum class Setting { shuffled, ordered, online, awmc };

inline std::string setting_name(Setting s) {
  switch (s) {
    case Setting::shuffled: return "shuffled";
    case Setting::ordered: return "ordered";
    case Setting::online: return "online";
    case Setting::awmc: return "awmc";
  }
  throw std::invalid_argument("setting_name: unknown setting");
}

inline Setting parse_setting(const std::string& s) {
  if (s == "shuffled") return Setting::shuffled;
  if (s == "ordered") return Setting::ordered;
  if (s == "online") return Setting::online;
  if (s == "awmc") return Setting::awmc;
  throw std::invalid_argument(
      "unknown setting '" + s +
      "' (expected shuffled, ordered, online, or awmc)");
}

struct AdaptConfig {
  Setting setting = Setting::shuffled;
  transforms::TransformSpec transform = transforms::draw_spec("specaugment");
  std::size_t epochs = 5;   // online/awmc always run a single pass
  double lr = 9e-5;
  std::string optimizer = "madgrad";
  double momentum = 0.9;
  double eps = 1e-6;
  std::size_t copies = 2;   // augmented views per update
  double ema_alpha = 0.999; // awmc teacher decay
  std::uint64_t seed = 0;
  std::size_t window = windowing::kDefaultWindow;
  double stride = windowing::kDefaultStride;
};

// lr = 0 and epochs = 0 are permitted: both are well-defined no-op runs.
inline void validate(const AdaptConfig& cfg) {
  if (cfg.copies == 0)
    throw std::invalid_argument("adapt: copies must be positive");
  if (!(cfg.lr >= 0.0) || !std::isfinite(cfg.lr))
    throw std::invalid_argument("adapt: learning rate must be >= 0, got " +
                                std::to_string(cfg.lr));
  if (!(cfg.ema_alpha >= 0.0 && cfg.ema_alpha <= 1.0))
    throw std::invalid_argument("adapt: ema alpha must be in [0, 1], got " +
                                std::to_string(cfg.ema_alpha));
  if (cfg.optimizer != "madgrad" && cfg.optimizer != "sgd")
    throw std::invalid_argument("unknown optimizer '" + cfg.optimizer +
                                "' (expected madgrad or sgd)");
}

inline std::size_t effective_epochs(const AdaptConfig& cfg) {
  if (cfg.setting == Setting::online || cfg.setting == Setting::awmc) return 1;
  return cfg.epochs;
}

struct EpochStats {
  std::size_t epoch = 0;  // 0 = unadapted baseline
  std::vector<int> transcript;
  metrics::WerBreakdown error;
  double blank_ratio = 0.0;
  double mean_loss = 0.0;  // mean student loss over the epoch's update steps
  std::size_t steps = 0;
  std::size_t skips = 0;   // empty/infeasible pseudo-labels
  double seconds = 0.0;    // wall clock, excluded from canonical JSON
};

struct AdaptReport {
  AdaptConfig config;
  int recording_id = 0;
  std::string domain_id;
  std::size_t frames = 0;
  std::size_t segments = 0;
  std::vector<EpochStats> epochs;  // index 0 is the unadapted baseline
  std::vector<int> final_transcript;
  double total_seconds = 0.0;
};

struct StitchedEval {
  std::vector<int> transcript;
  double blank_ratio = 0.0;
};

// Overlap-averaged lattice for a full recording; segment starts are multiples
// of the model's subsampling factor, so output offsets are exact.
inline Tensor stitched_lattice(model::Checkpoint& ckpt, const Tensor& x,
                               std::size_t window, double stride) {
  const auto segs =
      windowing::segment(x, window, stride, model::ModelConfig::subsample);
  std::vector<std::pair<std::size_t, Tensor>> pieces;
  pieces.reserve(segs.size());
  for (const auto& s : segs)
    pieces.emplace_back(s.start / model::ModelConfig::subsample,
                        model::forward(ckpt, s.slice, model::Mode::eval));
  return windowing::stitch(std::move(pieces));
}

inline StitchedEval transcribe(model::Checkpoint& ckpt, const Tensor& x,
                               std::size_t window, double stride) {
  const ctc::Decoded dec =
      ctc::greedy_decode(stitched_lattice(ckpt, x, window, stride));
  return {dec.labels, dec.blank_ratio};
}

struct StepOutcome {
  double loss = 0.0;
  bool skipped = false;
};

// One pseudo-label update. The teacher labels the clean segment without
// recording gradients; the student trains on `copies` independently augmented
// views of the same segment toward that label, with frozen batch statistics,
// one backward pass, and one optimizer step.
inline StepOutcome nsti_step(model::Checkpoint& student,
                             model::Checkpoint& teacher, optim::Optimizer& opt,
                             const Tensor& segment, const AdaptConfig& cfg,
                             Rng& rng) {
  const Tensor p = model::forward(teacher, segment, model::Mode::eval);
  const ctc::Decoded pseudo = ctc::greedy_decode(p);
  if (pseudo.labels.empty() || !ctc::feasible(p.rows(), pseudo.labels))
    return {0.0, true};

  Tape tape;
  std::vector<Tensor> losses;
  losses.reserve(cfg.copies);
  for (std::size_t c = 0; c < cfg.copies; ++c) {
    const Tensor view = transforms::apply(cfg.transform, segment, rng);
    Tensor lattice =
        model::forward(student, view, model::Mode::train_frozen_stats, &tape);
    losses.push_back(ctc::loss_node(lattice, pseudo.labels, &tape));
  }
  Tensor total = losses[0];
  for (std::size_t c = 1; c < losses.size(); ++c)
    total = add(total, losses[c], &tape);
  Tensor mean = scale(total, 1.0 / static_cast<double>(cfg.copies), &tape);
  const double value = mean.item();
  tape.backward(mean);
  opt.step(student);
  student.zero_grads();
  return {value, false};
}

namespace detail {

inline double seconds_since(
    const std::chrono::steady_clock::time_point& start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                       start)
      .count();
}

inline EpochStats stitched_epoch(model::Checkpoint& ckpt, const Tensor& x,
                                 const std::vector<int>& reference,
                                 const AdaptConfig& cfg, std::size_t epoch) {
  EpochStats st;
  st.epoch = epoch;
  const StitchedEval ev = transcribe(ckpt, x, cfg.window, cfg.stride);
  st.transcript = ev.transcript;
  st.blank_ratio = ev.blank_ratio;
  st.error = metrics::wer(reference, ev.transcript);
  return st;
}

}  // namespace detail

// Offline NSTI (shuffled or ordered): n epochs over overlapping windows, then
// the stitched transcription defines the result. Parameters always start from
// the given base checkpoint; the recording's own seed keys the random stream
// so concurrent runs on different recordings stay deterministic.
inline std::pair<AdaptReport, model::Checkpoint> nsti_run(
    const model::Checkpoint& base, const corpus::Recording& rec,
    const AdaptConfig& cfg,
    std::vector<model::Checkpoint>* epoch_snapshots = nullptr) {
  if (cfg.setting != Setting::shuffled && cfg.setting != Setting::ordered)
    throw std::invalid_argument("nsti_run: setting must be shuffled or ordered");
  validate(cfg);
  const auto t0 = std::chrono::steady_clock::now();

  model::Checkpoint ckpt = base.clone();
  const Tensor x = corpus::normalized(rec.spectrogram);
  const auto segs =
      windowing::segment(x, cfg.window, cfg.stride, model::ModelConfig::subsample);
  auto opt =
      optim::make_optimizer(cfg.optimizer, cfg.lr, cfg.momentum, cfg.eps);
  Rng rng(mix_seed(cfg.seed, rec.seed));

  AdaptReport report;
  report.config = cfg;
  report.recording_id = rec.recording_id;
  report.domain_id = rec.domain_id;
  report.frames = x.rows();
  report.segments = segs.size();

  EpochStats baseline =
      detail::stitched_epoch(ckpt, x, rec.reference, cfg, 0);
  baseline.seconds = detail::seconds_since(t0);
  report.epochs.push_back(std::move(baseline));

  std::vector<std::size_t> order(segs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    const auto te = std::chrono::steady_clock::now();
    if (cfg.setting == Setting::shuffled) shuffle(order, rng);
    double loss_sum = 0.0;
    std::size_t steps = 0, skips = 0;
    for (const std::size_t idx : order) {
      const StepOutcome out =
          nsti_step(ckpt, ckpt, *opt, segs[idx].slice, cfg, rng);
      if (out.skipped) {
        ++skips;
      } else {
        ++steps;
        loss_sum += out.loss;
      }
    }
    EpochStats st = detail::stitched_epoch(ckpt, x, rec.reference, cfg, e);
    st.mean_loss = steps > 0 ? loss_sum / static_cast<double>(steps) : 0.0;
    st.steps = steps;
    st.skips = skips;
    st.seconds = detail::seconds_since(te);
    report.epochs.push_back(std::move(st));
    if (epoch_snapshots != nullptr) epoch_snapshots->push_back(ckpt.clone());
  }

  report.final_transcript = report.epochs.back().transcript;
  report.total_seconds = detail::seconds_since(t0);
  return {std::move(report), std::move(ckpt)};
}

namespace detail {

// Blends teacher parameters toward the student: theta_T <- a*theta_T +
// (1-a)*theta_S. The endpoints are exact copies, not arithmetic.
inline void ema_update(model::Checkpoint& teacher,
                       const model::Checkpoint& student, double alpha) {
  if (alpha == 1.0) return;
  for (std::size_t p = 0; p < teacher.params.size(); ++p) {
    Tensor& t = teacher.params[p].second;
    const Tensor& s = student.params[p].second;
    if (alpha == 0.0) {
      for (std::size_t i = 0; i < t.numel(); ++i) t[i] = s.values()[i];
    } else {
      for (std::size_t i = 0; i < t.numel(); ++i)
        t[i] = alpha * t[i] + (1.0 - alpha) * s.values()[i];
    }
  }
}

// Shared body of the two causal settings: non-overlapping window-sized chunks
// in natural order; each chunk's final transcript piece is the teacher's
// decode *before* that chunk's update, so predictions never see their own
// adaptation. `teacher` aliases `student` for plain online; AWMC passes a
// separate EMA teacher.
inline std::pair<AdaptReport, model::Checkpoint> causal_run(
    const model::Checkpoint& base, const corpus::Recording& rec,
    const AdaptConfig& cfg, bool ema_teacher) {
  validate(cfg);
  const auto t0 = std::chrono::steady_clock::now();

  model::Checkpoint student = base.clone();
  model::Checkpoint teacher_storage;
  if (ema_teacher) teacher_storage = base.clone();
  model::Checkpoint& teacher = ema_teacher ? teacher_storage : student;

  const Tensor x = corpus::normalized(rec.spectrogram);
  auto opt =
      optim::make_optimizer(cfg.optimizer, cfg.lr, cfg.momentum, cfg.eps);
  Rng rng(mix_seed(cfg.seed, rec.seed));

  std::vector<Tensor> chunks;
  for (std::size_t start = 0; start < x.rows(); start += cfg.window)
    chunks.push_back(
        slice_rows(x, start, std::min(start + cfg.window, x.rows())));

  AdaptReport report;
  report.config = cfg;
  report.config.epochs = 1;
  report.recording_id = rec.recording_id;
  report.domain_id = rec.domain_id;
  report.frames = x.rows();
  report.segments = chunks.size();

  EpochStats baseline = stitched_epoch(student, x, rec.reference, cfg, 0);
  baseline.seconds = seconds_since(t0);
  report.epochs.push_back(std::move(baseline));

  const auto te = std::chrono::steady_clock::now();
  EpochStats pass;
  pass.epoch = 1;
  double loss_sum = 0.0;
  double blank_frames = 0.0;
  std::size_t total_frames = 0;
  for (const Tensor& chunk : chunks) {
    const Tensor p = model::forward(teacher, chunk, model::Mode::eval);
    const ctc::Decoded dec = ctc::greedy_decode(p);
    pass.transcript.insert(pass.transcript.end(), dec.labels.begin(),
                           dec.labels.end());
    blank_frames += dec.blank_ratio * static_cast<double>(p.rows());
    total_frames += p.rows();

    const StepOutcome out = nsti_step(student, teacher, *opt, chunk, cfg, rng);
    if (out.skipped) {
      ++pass.skips;
    } else {
      ++pass.steps;
      loss_sum += out.loss;
    }
    if (ema_teacher) ema_update(teacher, student, cfg.ema_alpha);
  }
  pass.error = metrics::wer(rec.reference, pass.transcript);
  pass.blank_ratio =
      total_frames > 0 ? blank_frames / static_cast<double>(total_frames) : 0.0;
  pass.mean_loss =
      pass.steps > 0 ? loss_sum / static_cast<double>(pass.steps) : 0.0;
  pass.seconds = seconds_since(te);
  report.epochs.push_back(pass);

  report.final_transcript = pass.transcript;
  report.total_seconds = seconds_since(t0);
  return {std::move(report), std::move(student)};
}

}  // namespace detail

// Online NSTI: predictions are committed before each update, single pass.
inline std::pair<AdaptReport, model::Checkpoint> online_run(
    const model::Checkpoint& base, const corpus::Recording& rec,
    const AdaptConfig& cfg) {
  if (cfg.setting != Setting::online)
    throw std::invalid_argument("online_run: setting must be online");
  return detail::causal_run(base, rec, cfg, false);
}

// AWMC: like online, but pseudo-labels and committed predictions come from a
// separate teacher whose weights exponentially average the student's.
inline std::pair<AdaptReport, model::Checkpoint> awmc_run(
    const model::Checkpoint& base, const corpus::Recording& rec,
    const AdaptConfig& cfg) {
  if (cfg.setting != Setting::awmc)
    throw std::invalid_argument("awmc_run: setting must be awmc");
  return detail::causal_run(base, rec, cfg, true);
}

// Dispatch on the configured setting.
inline std::pair<AdaptReport, model::Checkpoint> run(
    const model::Checkpoint& base, const corpus::Recording& rec,
    const AdaptConfig& cfg,
    std::vector<model::Checkpoint>* epoch_snapshots = nullptr) {
  switch (cfg.setting) {
    case Setting::shuffled:
    case Setting::ordered:
      return nsti_run(base, rec, cfg, epoch_snapshots);
    case Setting::online:
      return online_run(base, rec, cfg);
    case Setting::awmc:
      return awmc_run(base, rec, cfg);
  }
  throw std::invalid_argument("run: unknown setting");
}

struct NstSnapshot {
  model::Checkpoint ckpt;
  double dev_error = 0.0;  // pooled token error rate on the dev split
};

// Self-training on a separate adaptation split: the same student-teacher step,
// iterated over the pooled segments of every recording (reshuffled across
// recordings each epoch), with a dev-split snapshot after every epoch.
// Snapshot 0 is the untouched base model.
inline std::vector<NstSnapshot> nst_train(
    const model::Checkpoint& base,
    const std::vector<corpus::Recording>& adapt_split, const AdaptConfig& cfg,
    const std::vector<corpus::Recording>& dev_split) {
  if (adapt_split.empty())
    throw std::invalid_argument("nst_train: adaptation split is empty");
  validate(cfg);

  std::vector<Tensor> pool;
  for (const auto& rec : adapt_split) {
    const Tensor x = corpus::normalized(rec.spectrogram);
    for (const auto& s : windowing::segment(x, cfg.window, cfg.stride,
                                            model::ModelConfig::subsample))
      pool.push_back(s.slice);
  }

  auto dev_error = [&](model::Checkpoint& ckpt) {
    std::vector<metrics::WerBreakdown> parts;
    parts.reserve(dev_split.size());
    for (const auto& rec : dev_split) {
      const Tensor x = corpus::normalized(rec.spectrogram);
      const StitchedEval ev = transcribe(ckpt, x, cfg.window, cfg.stride);
      parts.push_back(metrics::wer(rec.reference, ev.transcript));
    }
    return metrics::pool(parts).wer;
  };

  model::Checkpoint ckpt = base.clone();
  auto opt =
      optim::make_optimizer(cfg.optimizer, cfg.lr, cfg.momentum, cfg.eps);
  Rng rng(mix_seed(cfg.seed, 0x4e57));

  std::vector<NstSnapshot> out;
  out.push_back({ckpt.clone(), dev_error(ckpt)});

  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    shuffle(order, rng);
    for (const std::size_t idx : order)
      nsti_step(ckpt, ckpt, *opt, pool[idx], cfg, rng);
    out.push_back({ckpt.clone(), dev_error(ckpt)});
  }
  return out;
}

// Canonical JSON form of a report. Wall-clock fields are nondeterministic and
// stay out unless explicitly requested.
inline nlohmann::ordered_json to_json(const AdaptReport& r,
                                      bool include_timing = false) {
  nlohmann::ordered_json j;
  j["setting"] = setting_name(r.config.setting);
  j["recording_id"] = r.recording_id;
  j["domain_id"] = r.domain_id;
  j["frames"] = r.frames;
  j["segments"] = r.segments;
  nlohmann::ordered_json cfg;
  cfg["transform"] = transforms::kind_name(r.config.transform.kind);
  cfg["epochs"] = r.config.epochs;
  cfg["lr"] = r.config.lr;
  cfg["optimizer"] = r.config.optimizer;
  cfg["momentum"] = r.config.momentum;
  cfg["eps"] = r.config.eps;
  cfg["copies"] = r.config.copies;
  cfg["ema_alpha"] = r.config.ema_alpha;
  cfg["seed"] = r.config.seed;
  cfg["window"] = r.config.window;
  cfg["stride"] = r.config.stride;
  j["config"] = std::move(cfg);
  j["epochs"] = nlohmann::ordered_json::array();
  for (const auto& e : r.epochs) {
    nlohmann::ordered_json je;
    je["epoch"] = e.epoch;
    je["transcript"] = e.transcript;
    je["wer"] = e.error.wer;
    je["substitutions"] = e.error.substitutions;
    je["insertions"] = e.error.insertions;
    je["deletions"] = e.error.deletions;
    je["ref_len"] = e.error.ref_len;
    je["blank_ratio"] = e.blank_ratio;
    je["mean_loss"] = e.mean_loss;
    je["steps"] = e.steps;
    je["skips"] = e.skips;
    if (include_timing) je["seconds"] = e.seconds;
    j["epochs"].push_back(std::move(je));
  }
  j["final_transcript"] = r.final_transcript;
  if (include_timing) j["total_seconds"] = r.total_seconds;
  return j;
}

}  // namespace nsti::adapt
