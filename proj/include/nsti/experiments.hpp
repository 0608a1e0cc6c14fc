#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"
#include "nsti/adapt.hpp"
#include "nsti/corpus.hpp"
#include "nsti/metrics.hpp"
#include "nsti/model.hpp"
#include "nsti/optim.hpp"
#include "nsti/rng.hpp"

// Experiment drivers over a workspace directory: corpus splits, a trained
// base checkpoint, and canonical report emission. Reports are deterministic
// functions of (workspace, seeds); wall-clock timing is emitted separately.

namespace nsti::experiments {

// ---------------------------------------------------------------------------
// Bounded worker pool. Tasks are claimed by index from an atomic counter and
// write only to their own slot, so results are identical for any pool size.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  if (n == 0) return;
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto worker = [&]() {
    for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const std::size_t count = std::min(threads, n);
  pool.reserve(count);
  for (std::size_t t = 0; t < count; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// Workspace layout and corpus generation.

inline const std::vector<std::string>& split_names() {
  static const std::vector<std::string> names = {
      "source_train", "source_dev",  "target_adapt", "target_dev",
      "target_test",  "target_hard", "target_long"};
  return names;
}

struct GenConfig {
  std::uint64_t seed = 17;
  std::size_t recordings = 8;  // per target split
  std::size_t frames = 512;
  double target_tilt = 0.05;
  double target_noise = 0.10;
};

namespace detail {

inline void write_text(const std::filesystem::path& path,
                       const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

}  // namespace detail

// Builds every split of a fresh corpus workspace. Source and target domains
// differ in spectral tilt, gain, noise level, and template drift; the hard
// split adds intermittent fading on top of source conditions, and the long
// split stretches recordings for duration partitioning.
inline nlohmann::ordered_json gen_workspace(const std::filesystem::path& root,
                                            const GenConfig& g) {
  if (g.recordings < 2)
    throw std::invalid_argument("gen-corpus: need at least 2 recordings per split");
  if (g.frames < 128)
    throw std::invalid_argument("gen-corpus: need at least 128 frames, got " +
                                std::to_string(g.frames));
  if (!(g.target_tilt >= 0.0) || !std::isfinite(g.target_tilt))
    throw std::invalid_argument("gen-corpus: target tilt must be >= 0");
  if (!(g.target_noise >= 0.0) || !std::isfinite(g.target_noise))
    throw std::invalid_argument("gen-corpus: target noise must be >= 0");

  const auto templates = corpus::gen_templates(g.seed, 8, 32, 6);

  corpus::DomainConfig source;
  source.tilt_slope = 0.0;
  source.noise_sigma = 0.05;
  source.drift_sigma = 0.0;
  source.gain = 1.0;
  source.seed = mix_seed(g.seed, 0xd0a1);

  corpus::DomainConfig target;
  target.tilt_slope = g.target_tilt;
  target.noise_sigma = g.target_noise;
  target.drift_sigma = 0.05;
  target.gain = 1.6;
  target.seed = mix_seed(g.seed, 0xd0a2);

  // Hard split: intermittent fading drives the unadapted decode into
  // deletion-dominated territory. Most placements drop to a faint residue
  // that reads as silence, while the surviving full-amplitude symbols keep
  // the recording's normalization anchored, so the decoder emits blanks over
  // the faded spans instead of hallucinating substitutions. Purely global
  // knobs cannot reach this regime: quieter gain or louder noise re-emerge
  // as substitution pseudo-evidence once the noise floor dominates the
  // variance, and a steep tilt collapses the decode into a single constant
  // class.
  corpus::DomainConfig hard = source;
  hard.fade_p = 0.72;
  hard.fade_gain = 0.12;
  hard.seed = mix_seed(g.seed, 0xd0a3);

  // Gaps up to 24 frames keep long silences in-distribution; a model that has
  // only seen 2-6 frame gaps hallucinates tokens inside longer quiet spans,
  // which the faded hard split is full of.
  corpus::SynthParams params;
  params.target_frames = g.frames;
  params.max_gap = 24;
  corpus::SynthParams long_params;
  long_params.target_frames = std::max<std::size_t>(g.frames, 1792);
  long_params.max_gap = 24;

  const std::size_t k = g.recordings;
  const std::size_t small = std::max<std::size_t>(2, k / 2);

  struct SplitPlan {
    std::string name;
    const corpus::DomainConfig* domain;
    const corpus::SynthParams* params;
    std::size_t count;
    int first_id;
    std::string domain_id;
  };
  const std::vector<SplitPlan> plan = {
      {"source_train", &source, &params, 2 * k, 0, "source"},
      {"source_dev", &source, &params, small, 1000, "source"},
      {"target_adapt", &target, &params, k, 2000, "target"},
      {"target_dev", &target, &params, k, 3000, "target"},
      {"target_test", &target, &params, k, 4000, "target"},
      {"target_hard", &hard, &params, k, 5000, "target_hard"},
      {"target_long", &target, &long_params, small, 6000, "target_long"},
  };

  const auto corpus_dir = root / "corpus";
  std::filesystem::create_directories(corpus_dir);
  nlohmann::ordered_json manifest;
  manifest["seed"] = g.seed;
  manifest["recordings"] = g.recordings;
  manifest["frames"] = g.frames;
  manifest["target_tilt"] = g.target_tilt;
  manifest["target_noise"] = g.target_noise;
  manifest["hard_fade_p"] = hard.fade_p;
  manifest["hard_fade_gain"] = hard.fade_gain;
  manifest["splits"] = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const auto& p = plan[i];
    const auto recs = corpus::make_split(templates, *p.domain, *p.params,
                                         p.count, mix_seed(g.seed, i + 1),
                                         p.first_id, p.domain_id);
    corpus::save_split(corpus_dir / p.name, recs);
    nlohmann::ordered_json js;
    js["count"] = p.count;
    js["domain"] = p.domain_id;
    js["frames"] = p.params->target_frames;
    manifest["splits"][p.name] = std::move(js);
  }
  detail::write_text(root / "config.json", manifest.dump(2) + "\n");
  return manifest;
}

struct Workspace {
  std::filesystem::path root;
};

inline std::vector<corpus::Recording> load_split(const Workspace& ws,
                                                 const std::string& name) {
  const auto dir = ws.root / "corpus" / name;
  if (!std::filesystem::exists(dir))
    throw std::runtime_error("missing workspace artifact: corpus split '" +
                             name + "' expected at " + dir.string());
  auto recs = corpus::load_split(dir);
  if (recs.empty())
    throw std::runtime_error("workspace split '" + name + "' is empty");
  return recs;
}

inline model::Checkpoint load_base(const Workspace& ws) {
  const auto path = ws.root / "base.ckpt";
  if (!std::filesystem::exists(path))
    throw std::runtime_error(
        "missing workspace artifact: base checkpoint expected at " +
        path.string());
  return model::load(path);
}

// ---------------------------------------------------------------------------
// Supervised training of the base model on the labelled source split.

struct TrainConfig {
  std::size_t epochs = 120; // hard cap; dev early stopping usually ends sooner
  double lr = 5e-5;
  std::uint64_t seed = 1;
  std::size_t patience = 30;  // epochs without dev improvement before stopping
  std::size_t window = windowing::kDefaultWindow;
  double stride = windowing::kDefaultStride;
};

struct TrainResult {
  model::Checkpoint ckpt;          // best-dev checkpoint
  std::vector<double> dev_errors;  // index 0 = untrained model
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  std::size_t skipped_utterances = 0;
};

inline TrainResult train_base(const std::vector<corpus::Recording>& train_split,
                              const std::vector<corpus::Recording>& dev_split,
                              const TrainConfig& cfg) {
  if (train_split.empty())
    throw std::invalid_argument("train-base: training split is empty");
  if (dev_split.empty())
    throw std::invalid_argument("train-base: dev split is empty");
  if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr))
    throw std::invalid_argument("train-base: learning rate must be positive");

  model::ModelConfig mc;
  mc.seed = cfg.seed;
  model::Checkpoint ckpt = model::init(mc);

  struct Example {
    Tensor x;
    std::vector<int> labels;
  };
  std::vector<Example> examples;
  std::size_t skipped = 0;
  for (const auto& rec : train_split) {
    const Tensor x = corpus::normalized(rec.spectrogram);
    for (const auto& span : rec.spans) {
      Tensor slice = slice_rows(x, span.start, span.end);
      if (!ctc::feasible(model::output_frames(slice.rows()), span.labels)) {
        ++skipped;  // too few output frames for this label sequence
        continue;
      }
      examples.push_back({std::move(slice), span.labels});
    }
  }
  if (examples.empty())
    throw std::runtime_error("train-base: no trainable utterances in split");

  auto dev_error = [&](model::Checkpoint& m) {
    std::vector<metrics::WerBreakdown> parts;
    parts.reserve(dev_split.size());
    for (const auto& rec : dev_split) {
      const Tensor x = corpus::normalized(rec.spectrogram);
      const auto ev = adapt::transcribe(m, x, cfg.window, cfg.stride);
      parts.push_back(metrics::wer(rec.reference, ev.transcript));
    }
    return metrics::pool(parts).wer;
  };

  TrainResult result;
  result.skipped_utterances = skipped;
  result.dev_errors.push_back(dev_error(ckpt));
  result.ckpt = ckpt.clone();
  double best = result.dev_errors[0];

  optim::Madgrad opt(cfg.lr);
  Rng rng(mix_seed(cfg.seed, 0x7121));
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::size_t since_best = 0;
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    shuffle(order, rng);
    for (const std::size_t idx : order) {
      Tape tape;
      Tensor lattice = model::forward(ckpt, examples[idx].x,
                                      model::Mode::train_update_stats, &tape);
      Tensor loss = ctc::loss_node(lattice, examples[idx].labels, &tape);
      if (!std::isfinite(loss.item()))
        throw std::runtime_error("train-base: loss diverged at epoch " +
                                 std::to_string(e));
      tape.backward(loss);
      opt.step(ckpt);
      ckpt.zero_grads();
    }
    const double err = dev_error(ckpt);
    result.dev_errors.push_back(err);
    result.epochs_run = e;
    if (err < best) {
      best = err;
      result.best_epoch = e;
      result.ckpt = ckpt.clone();
      since_best = 0;
    } else {
      ++since_best;
    }
    if (best == 0.0 || since_best >= cfg.patience) break;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Experiment reports.

struct Cell {
  std::string condition;
  std::string split;
  int recording_id = 0;
  std::uint64_t seed = 0;
  metrics::WerBreakdown error;
  double blank_ratio = 0.0;
  double final_loss = 0.0;
  double seconds = 0.0;  // timing only; never part of canonical output
};

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

struct ExperimentReport {
  std::string name;
  nlohmann::ordered_json payload;  // canonical body
  std::vector<Cell> cells;         // one row per condition x recording x repeat
  std::vector<Series> plot;        // line-plot series, when the experiment has one
  double total_seconds = 0.0;
};

struct ExpConfig {
  std::size_t repeats = 3;
  std::uint64_t seed = 101;  // repeat r uses seed + r
  std::size_t threads = 4;
  adapt::AdaptConfig adapt;  // reference defaults; drivers override per condition
};

namespace detail {

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline double stdev_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline nlohmann::ordered_json stat_block(const std::vector<double>& per_repeat) {
  nlohmann::ordered_json j;
  j["mean"] = mean_of(per_repeat);
  if (per_repeat.size() >= 2) j["stdev"] = stdev_of(per_repeat);
  j["values"] = per_repeat;
  return j;
}

inline nlohmann::ordered_json adapt_echo(const adapt::AdaptConfig& cfg) {
  nlohmann::ordered_json j;
  j["epochs"] = cfg.epochs;
  j["lr"] = cfg.lr;
  j["optimizer"] = cfg.optimizer;
  j["momentum"] = cfg.momentum;
  j["eps"] = cfg.eps;
  j["copies"] = cfg.copies;
  j["ema_alpha"] = cfg.ema_alpha;
  j["window"] = cfg.window;
  j["stride"] = cfg.stride;
  return j;
}

inline nlohmann::ordered_json exp_echo(const ExpConfig& ec) {
  nlohmann::ordered_json j;
  j["repeats"] = ec.repeats;
  nlohmann::ordered_json seeds = nlohmann::ordered_json::array();
  for (std::size_t r = 0; r < ec.repeats; ++r) seeds.push_back(ec.seed + r);
  j["seeds"] = std::move(seeds);
  j["adapt"] = adapt_echo(ec.adapt);
  return j;
}

inline double elapsed(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// settings_table: shuffled / ordered / online / awmc(+/-aug) / unadapted on
// the target dev and test splits.

inline ExperimentReport settings_table(const Workspace& ws,
                                       const ExpConfig& ec) {
  const auto t0 = std::chrono::steady_clock::now();
  model::Checkpoint base = load_base(ws);
  const auto dev = load_split(ws, "target_dev");
  const auto test = load_split(ws, "target_test");

  struct Cond {
    std::string name;
    adapt::Setting setting;
    std::string transform;
    std::size_t epochs;
  };
  const std::vector<Cond> conds = {
      {"unadapted", adapt::Setting::shuffled, "identity", 0},
      {"shuffled", adapt::Setting::shuffled, "specaugment", ec.adapt.epochs},
      {"ordered", adapt::Setting::ordered, "specaugment", ec.adapt.epochs},
      {"online", adapt::Setting::online, "specaugment", 1},
      {"awmc_aug", adapt::Setting::awmc, "specaugment", 1},
      {"awmc_noaug", adapt::Setting::awmc, "identity", 1},
  };
  const std::vector<std::pair<std::string, const std::vector<corpus::Recording>*>>
      splits = {{"dev", &dev}, {"test", &test}};

  struct Job {
    std::size_t cond, split, rec, rep;
  };
  std::vector<Job> jobs;
  for (std::size_t c = 0; c < conds.size(); ++c)
    for (std::size_t s = 0; s < splits.size(); ++s)
      for (std::size_t k = 0; k < splits[s].second->size(); ++k)
        for (std::size_t r = 0; r < ec.repeats; ++r)
          jobs.push_back({c, s, k, r});

  std::vector<Cell> cells(jobs.size());
  parallel_for(jobs.size(), ec.threads, [&](std::size_t i) {
    const Job& jb = jobs[i];
    const auto& rec = (*splits[jb.split].second)[jb.rec];
    adapt::AdaptConfig cfg = ec.adapt;
    cfg.setting = conds[jb.cond].setting;
    cfg.transform = transforms::draw_spec(conds[jb.cond].transform,
                                          base.config.f_bins);
    cfg.epochs = conds[jb.cond].epochs;
    cfg.seed = ec.seed + jb.rep;
    const auto started = std::chrono::steady_clock::now();
    auto [report, ckpt] = adapt::run(base, rec, cfg);
    Cell& cell = cells[i];
    cell.condition = conds[jb.cond].name;
    cell.split = splits[jb.split].first;
    cell.recording_id = rec.recording_id;
    cell.seed = cfg.seed;
    cell.error = report.epochs.back().error;
    cell.blank_ratio = report.epochs.back().blank_ratio;
    cell.final_loss = report.epochs.back().mean_loss;
    cell.seconds = detail::elapsed(started);
  });

  auto cell_at = [&](std::size_t c, std::size_t s, std::size_t k,
                     std::size_t r) -> const Cell& {
    std::size_t idx = 0;
    for (const auto& jb : jobs) {
      if (jb.cond == c && jb.split == s && jb.rec == k && jb.rep == r)
        return cells[idx];
      ++idx;
    }
    throw std::runtime_error("settings_table: missing cell");
  };

  nlohmann::ordered_json payload;
  payload["experiment"] = "settings_table";
  payload["config"] = detail::exp_echo(ec);
  payload["conditions"] = nlohmann::ordered_json::array();

  // Pooled per-repeat error rates, then statistics over repeats.
  std::vector<std::vector<double>> unadapted_wer(splits.size());
  for (std::size_t s = 0; s < splits.size(); ++s)
    for (std::size_t r = 0; r < ec.repeats; ++r) {
      std::vector<metrics::WerBreakdown> parts;
      for (std::size_t k = 0; k < splits[s].second->size(); ++k)
        parts.push_back(cell_at(0, s, k, r).error);
      unadapted_wer[s].push_back(metrics::pool(parts).wer);
    }

  for (std::size_t c = 0; c < conds.size(); ++c) {
    nlohmann::ordered_json row;
    row["condition"] = conds[c].name;
    for (std::size_t s = 0; s < splits.size(); ++s) {
      std::vector<double> wers, werrs, blanks;
      for (std::size_t r = 0; r < ec.repeats; ++r) {
        std::vector<metrics::WerBreakdown> parts;
        double blank_sum = 0.0;
        for (std::size_t k = 0; k < splits[s].second->size(); ++k) {
          const Cell& cell = cell_at(c, s, k, r);
          parts.push_back(cell.error);
          blank_sum += cell.blank_ratio;
        }
        const double pooled = metrics::pool(parts).wer;
        wers.push_back(pooled);
        blanks.push_back(blank_sum /
                         static_cast<double>(splits[s].second->size()));
        werrs.push_back(c == 0 || unadapted_wer[s][r] <= 0.0
                            ? 0.0
                            : metrics::werr(unadapted_wer[s][r], pooled));
      }
      nlohmann::ordered_json block;
      block["wer"] = detail::stat_block(wers);
      block["werr"] = detail::stat_block(werrs);
      block["blank_ratio"] = detail::stat_block(blanks);
      row[splits[s].first] = std::move(block);
    }
    payload["conditions"].push_back(std::move(row));
  }

  ExperimentReport rep;
  rep.name = "settings_table";
  rep.payload = std::move(payload);
  rep.cells = std::move(cells);
  rep.total_seconds = detail::elapsed(t0);
  return rep;
}

// ---------------------------------------------------------------------------
// epoch_curve: error decomposition after each adaptation epoch on target_test.

inline ExperimentReport epoch_curve(const Workspace& ws, const ExpConfig& ec) {
  const auto t0 = std::chrono::steady_clock::now();
  model::Checkpoint base = load_base(ws);
  const auto test = load_split(ws, "target_test");
  const std::size_t n_epochs = ec.adapt.epochs;

  struct Job {
    std::size_t rec, rep;
  };
  std::vector<Job> jobs;
  for (std::size_t k = 0; k < test.size(); ++k)
    for (std::size_t r = 0; r < ec.repeats; ++r) jobs.push_back({k, r});

  std::vector<adapt::AdaptReport> reports(jobs.size());
  std::vector<Cell> cells(jobs.size());
  parallel_for(jobs.size(), ec.threads, [&](std::size_t i) {
    adapt::AdaptConfig cfg = ec.adapt;
    cfg.setting = adapt::Setting::shuffled;
    cfg.transform = transforms::draw_spec("specaugment", base.config.f_bins);
    cfg.seed = ec.seed + jobs[i].rep;
    const auto started = std::chrono::steady_clock::now();
    auto [report, ckpt] = adapt::nsti_run(base, test[jobs[i].rec], cfg);
    Cell& cell = cells[i];
    cell.condition = "shuffled";
    cell.split = "test";
    cell.recording_id = report.recording_id;
    cell.seed = cfg.seed;
    cell.error = report.epochs.back().error;
    cell.blank_ratio = report.epochs.back().blank_ratio;
    cell.final_loss = report.epochs.back().mean_loss;
    cell.seconds = detail::elapsed(started);
    reports[i] = std::move(report);
  });

  nlohmann::ordered_json payload;
  payload["experiment"] = "epoch_curve";
  payload["config"] = detail::exp_echo(ec);
  payload["epochs"] = nlohmann::ordered_json::array();

  ExperimentReport rep;
  rep.name = "epoch_curve";
  Series s_wer{"wer", {}}, s_sub{"substitution_rate", {}},
      s_ins{"insertion_rate", {}}, s_del{"deletion_rate", {}};

  for (std::size_t e = 0; e <= n_epochs; ++e) {
    std::vector<double> wers, subs, inss, dels, blanks;
    for (std::size_t r = 0; r < ec.repeats; ++r) {
      std::vector<metrics::WerBreakdown> parts;
      double blank_sum = 0.0;
      std::size_t count = 0;
      for (std::size_t i = 0; i < jobs.size(); ++i) {
        if (jobs[i].rep != r) continue;
        parts.push_back(reports[i].epochs[e].error);
        blank_sum += reports[i].epochs[e].blank_ratio;
        ++count;
      }
      const auto pooled = metrics::pool(parts);
      const double denom =
          static_cast<double>(std::max<std::size_t>(1, pooled.ref_len));
      wers.push_back(pooled.wer);
      subs.push_back(static_cast<double>(pooled.substitutions) / denom);
      inss.push_back(static_cast<double>(pooled.insertions) / denom);
      dels.push_back(static_cast<double>(pooled.deletions) / denom);
      blanks.push_back(blank_sum / static_cast<double>(std::max<std::size_t>(1, count)));
    }
    nlohmann::ordered_json row;
    row["epoch"] = e;
    row["wer"] = detail::stat_block(wers);
    row["substitution_rate"] = detail::stat_block(subs);
    row["insertion_rate"] = detail::stat_block(inss);
    row["deletion_rate"] = detail::stat_block(dels);
    row["blank_ratio"] = detail::stat_block(blanks);
    payload["epochs"].push_back(std::move(row));
    const double x = static_cast<double>(e);
    s_wer.points.emplace_back(x, detail::mean_of(wers));
    s_sub.points.emplace_back(x, detail::mean_of(subs));
    s_ins.points.emplace_back(x, detail::mean_of(inss));
    s_del.points.emplace_back(x, detail::mean_of(dels));
  }

  rep.payload = std::move(payload);
  rep.cells = std::move(cells);
  rep.plot = {s_wer, s_sub, s_ins, s_del};
  rep.total_seconds = detail::elapsed(t0);
  return rep;
}

// ---------------------------------------------------------------------------
// transform_table: augmentation ablation on the high-noise split, where
// pseudo-label feedback without input noise collapses toward blanks.

inline ExperimentReport transform_table(const Workspace& ws,
                                        const ExpConfig& ec) {
  const auto t0 = std::chrono::steady_clock::now();
  model::Checkpoint base = load_base(ws);
  const auto hard = load_split(ws, "target_hard");

  const std::vector<std::string> conds = {"unadapted", "specaugment",
                                          "identity", "noise", "cutout"};
  struct Job {
    std::size_t cond, rec, rep;
  };
  std::vector<Job> jobs;
  for (std::size_t c = 0; c < conds.size(); ++c)
    for (std::size_t k = 0; k < hard.size(); ++k)
      for (std::size_t r = 0; r < ec.repeats; ++r) jobs.push_back({c, k, r});

  std::vector<Cell> cells(jobs.size());
  parallel_for(jobs.size(), ec.threads, [&](std::size_t i) {
    const Job& jb = jobs[i];
    adapt::AdaptConfig cfg = ec.adapt;
    cfg.setting = adapt::Setting::shuffled;
    cfg.transform = transforms::draw_spec(
        conds[jb.cond] == "unadapted" ? "identity" : conds[jb.cond],
        base.config.f_bins);
    cfg.epochs = conds[jb.cond] == "unadapted" ? 0 : ec.adapt.epochs;
    cfg.seed = ec.seed + jb.rep;
    const auto started = std::chrono::steady_clock::now();
    auto [report, ckpt] = adapt::nsti_run(base, hard[jb.rec], cfg);
    Cell& cell = cells[i];
    cell.condition = conds[jb.cond];
    cell.split = "hard";
    cell.recording_id = report.recording_id;
    cell.seed = cfg.seed;
    cell.error = report.epochs.back().error;
    cell.blank_ratio = report.epochs.back().blank_ratio;
    cell.final_loss = report.epochs.back().mean_loss;
    cell.seconds = detail::elapsed(started);
  });

  nlohmann::ordered_json payload;
  payload["experiment"] = "transform_table";
  payload["config"] = detail::exp_echo(ec);
  payload["conditions"] = nlohmann::ordered_json::array();

  std::vector<double> unadapted_wer, unadapted_del;
  for (std::size_t r = 0; r < ec.repeats; ++r) {
    std::vector<metrics::WerBreakdown> parts;
    for (std::size_t i = 0; i < jobs.size(); ++i)
      if (jobs[i].cond == 0 && jobs[i].rep == r) parts.push_back(cells[i].error);
    const auto pooled = metrics::pool(parts);
    unadapted_wer.push_back(pooled.wer);
    unadapted_del.push_back(
        static_cast<double>(pooled.deletions) /
        static_cast<double>(std::max<std::size_t>(1, pooled.ref_len)));
  }

  for (std::size_t c = 0; c < conds.size(); ++c) {
    std::vector<double> wers, werrs, blanks, dels;
    for (std::size_t r = 0; r < ec.repeats; ++r) {
      std::vector<metrics::WerBreakdown> parts;
      double blank_sum = 0.0;
      std::size_t count = 0;
      for (std::size_t i = 0; i < jobs.size(); ++i) {
        if (jobs[i].cond != c || jobs[i].rep != r) continue;
        parts.push_back(cells[i].error);
        blank_sum += cells[i].blank_ratio;
        ++count;
      }
      const auto pooled = metrics::pool(parts);
      wers.push_back(pooled.wer);
      dels.push_back(static_cast<double>(pooled.deletions) /
                     static_cast<double>(std::max<std::size_t>(1, pooled.ref_len)));
      blanks.push_back(blank_sum / static_cast<double>(std::max<std::size_t>(1, count)));
      werrs.push_back(c == 0 || unadapted_wer[r] <= 0.0
                          ? 0.0
                          : metrics::werr(unadapted_wer[r], pooled.wer));
    }
    nlohmann::ordered_json row;
    row["condition"] = conds[c];
    row["wer"] = detail::stat_block(wers);
    row["werr"] = detail::stat_block(werrs);
    row["deletion_rate"] = detail::stat_block(dels);
    row["blank_ratio"] = detail::stat_block(blanks);
    payload["conditions"].push_back(std::move(row));
  }
  payload["unadapted_deletion_rate"] = detail::stat_block(unadapted_del);

  ExperimentReport rep;
  rep.name = "transform_table";
  rep.payload = std::move(payload);
  rep.cells = std::move(cells);
  rep.total_seconds = detail::elapsed(t0);
  return rep;
}

// ---------------------------------------------------------------------------
// duration_sweep: partition long recordings at utterance boundaries into
// chunks of roughly {1,2,4,8,16} windows (plus the whole recording) and adapt
// each chunk independently.

struct DurationChunk {
  corpus::Recording rec;  // chunk as a standalone recording
};

inline std::vector<corpus::Recording> chunk_recording(
    const corpus::Recording& rec, std::size_t budget_frames) {
  if (rec.spans.empty())
    throw std::invalid_argument("chunk_recording: recording has no utterances");
  std::vector<corpus::Recording> chunks;
  std::size_t cur_start = 0;
  std::vector<int> cur_labels;
  auto flush = [&](std::size_t end_frame) {
    corpus::Recording c;
    c.spectrogram = slice_rows(rec.spectrogram, cur_start, end_frame);
    c.reference = cur_labels;
    c.recording_id = rec.recording_id * 100 + static_cast<int>(chunks.size());
    c.domain_id = rec.domain_id;
    c.seed = mix_seed(rec.seed, chunks.size());
    chunks.push_back(std::move(c));
    cur_labels.clear();
    cur_start = end_frame;
  };
  for (std::size_t k = 0; k < rec.spans.size(); ++k) {
    const auto& span = rec.spans[k];
    cur_labels.insert(cur_labels.end(), span.labels.begin(), span.labels.end());
    const bool last = k + 1 == rec.spans.size();
    if (!last && budget_frames > 0 &&
        span.end - cur_start >= budget_frames) {
      flush((span.end + rec.spans[k + 1].start) / 2);  // cut inside the gap
    }
  }
  flush(rec.spectrogram.rows());
  return chunks;
}

inline ExperimentReport duration_sweep(const Workspace& ws,
                                       const ExpConfig& ec) {
  const auto t0 = std::chrono::steady_clock::now();
  model::Checkpoint base = load_base(ws);
  const auto longs = load_split(ws, "target_long");

  struct Cond {
    std::string name;
    std::size_t budget;  // 0 = whole recording
  };
  std::vector<Cond> conds;
  for (std::size_t mult : {1u, 2u, 4u, 8u, 16u})
    conds.push_back({"w" + std::to_string(mult), mult * ec.adapt.window});
  conds.push_back({"full", 0});

  // Chunkings are deterministic; build them up front.
  std::vector<std::vector<corpus::Recording>> chunked(conds.size());
  for (std::size_t c = 0; c < conds.size(); ++c)
    for (const auto& rec : longs) {
      auto chunks = chunk_recording(rec, conds[c].budget);
      for (auto& ch : chunks) chunked[c].push_back(std::move(ch));
    }

  struct Job {
    std::size_t cond, chunk, rep;
    bool adapted;
  };
  std::vector<Job> jobs;
  for (std::size_t c = 0; c < conds.size(); ++c)
    for (std::size_t k = 0; k < chunked[c].size(); ++k)
      for (std::size_t r = 0; r < ec.repeats; ++r) {
        jobs.push_back({c, k, r, true});
        jobs.push_back({c, k, r, false});
      }

  std::vector<metrics::WerBreakdown> errors(jobs.size());
  std::vector<double> seconds(jobs.size(), 0.0);
  parallel_for(jobs.size(), ec.threads, [&](std::size_t i) {
    const Job& jb = jobs[i];
    adapt::AdaptConfig cfg = ec.adapt;
    cfg.setting = adapt::Setting::shuffled;
    cfg.transform = transforms::draw_spec("specaugment", base.config.f_bins);
    cfg.epochs = jb.adapted ? ec.adapt.epochs : 0;
    cfg.seed = ec.seed + jb.rep;
    const auto started = std::chrono::steady_clock::now();
    auto [report, ckpt] = adapt::nsti_run(base, chunked[jb.cond][jb.chunk], cfg);
    errors[i] = report.epochs.back().error;
    seconds[i] = detail::elapsed(started);
  });

  nlohmann::ordered_json payload;
  payload["experiment"] = "duration_sweep";
  payload["config"] = detail::exp_echo(ec);
  payload["conditions"] = nlohmann::ordered_json::array();

  ExperimentReport rep;
  rep.name = "duration_sweep";
  Series s_werr{"werr", {}};

  std::vector<Cell> cells;
  for (std::size_t c = 0; c < conds.size(); ++c) {
    std::vector<double> wers, base_wers, werrs;
    for (std::size_t r = 0; r < ec.repeats; ++r) {
      std::vector<metrics::WerBreakdown> adapted_parts, base_parts;
      for (std::size_t i = 0; i < jobs.size(); ++i) {
        if (jobs[i].cond != c || jobs[i].rep != r) continue;
        (jobs[i].adapted ? adapted_parts : base_parts).push_back(errors[i]);
      }
      const double adapted = metrics::pool(adapted_parts).wer;
      const double unadapted = metrics::pool(base_parts).wer;
      wers.push_back(adapted);
      base_wers.push_back(unadapted);
      werrs.push_back(unadapted > 0.0 ? metrics::werr(unadapted, adapted) : 0.0);
    }
    nlohmann::ordered_json row;
    row["condition"] = conds[c].name;
    row["chunk_frames"] = conds[c].budget;
    row["n_chunks"] = chunked[c].size();
    row["wer"] = detail::stat_block(wers);
    row["unadapted_wer"] = detail::stat_block(base_wers);
    row["werr"] = detail::stat_block(werrs);
    payload["conditions"].push_back(std::move(row));
    const double x = conds[c].budget == 0
                         ? static_cast<double>(longs[0].spectrogram.rows())
                         : static_cast<double>(conds[c].budget);
    s_werr.points.emplace_back(x, detail::mean_of(werrs));

    // One summary cell per (condition, chunk, repeat) for the CSV.
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      if (jobs[i].cond != c || !jobs[i].adapted) continue;
      Cell cell;
      cell.condition = conds[c].name;
      cell.split = "long";
      cell.recording_id = chunked[c][jobs[i].chunk].recording_id;
      cell.seed = ec.seed + jobs[i].rep;
      cell.error = errors[i];
      cell.seconds = seconds[i];
      cells.push_back(std::move(cell));
    }
  }

  rep.payload = std::move(payload);
  rep.cells = std::move(cells);
  rep.plot = {s_werr};
  rep.total_seconds = detail::elapsed(t0);
  return rep;
}

// ---------------------------------------------------------------------------
// nst_vs_nsti: self-training on a separate adaptation split (with best-dev
// checkpoint selection) versus per-recording adaptation, plus per-recording
// adaptation started from the best self-trained checkpoint.

inline ExperimentReport nst_vs_nsti(const Workspace& ws, const ExpConfig& ec) {
  const auto t0 = std::chrono::steady_clock::now();
  model::Checkpoint base = load_base(ws);
  const auto adapt_split = load_split(ws, "target_adapt");
  const auto dev = load_split(ws, "target_dev");
  const auto test = load_split(ws, "target_test");

  auto pooled_test_error = [&](model::Checkpoint& ckpt) {
    std::vector<metrics::WerBreakdown> parts;
    for (const auto& rec : test) {
      const Tensor x = corpus::normalized(rec.spectrogram);
      const auto ev =
          adapt::transcribe(ckpt, x, ec.adapt.window, ec.adapt.stride);
      parts.push_back(metrics::wer(rec.reference, ev.transcript));
    }
    return metrics::pool(parts).wer;
  };

  struct RepeatResult {
    std::vector<double> nst_dev, nst_test;
    std::size_t best_epoch = 0;
    double nst_best_test = 0.0;
    double nsti_test = 0.0;
    double nsti_after_nst_test = 0.0;
    std::vector<Cell> cells;
  };
  std::vector<RepeatResult> per_repeat(ec.repeats);

  parallel_for(ec.repeats, ec.threads, [&](std::size_t r) {
    RepeatResult& out = per_repeat[r];
    adapt::AdaptConfig cfg = ec.adapt;
    cfg.setting = adapt::Setting::shuffled;
    cfg.transform = transforms::draw_spec("specaugment", base.config.f_bins);
    cfg.seed = ec.seed + r;

    auto snapshots = adapt::nst_train(base, adapt_split, cfg, dev);
    std::size_t best = 0;
    for (std::size_t e = 0; e < snapshots.size(); ++e) {
      out.nst_dev.push_back(snapshots[e].dev_error);
      out.nst_test.push_back(pooled_test_error(snapshots[e].ckpt));
      if (snapshots[e].dev_error < snapshots[best].dev_error) best = e;
    }
    out.best_epoch = best;
    out.nst_best_test = out.nst_test[best];

    auto run_nsti = [&](const model::Checkpoint& start, const char* tag,
                        double& pooled_out) {
      std::vector<metrics::WerBreakdown> parts;
      for (const auto& rec : test) {
        const auto started = std::chrono::steady_clock::now();
        auto [report, ckpt] = adapt::nsti_run(start, rec, cfg);
        parts.push_back(report.epochs.back().error);
        Cell cell;
        cell.condition = tag;
        cell.split = "test";
        cell.recording_id = rec.recording_id;
        cell.seed = cfg.seed;
        cell.error = report.epochs.back().error;
        cell.blank_ratio = report.epochs.back().blank_ratio;
        cell.final_loss = report.epochs.back().mean_loss;
        cell.seconds = detail::elapsed(started);
        out.cells.push_back(std::move(cell));
      }
      pooled_out = metrics::pool(parts).wer;
    };
    run_nsti(base, "nsti", out.nsti_test);
    run_nsti(snapshots[best].ckpt, "nsti_after_nst", out.nsti_after_nst_test);
  });

  nlohmann::ordered_json payload;
  payload["experiment"] = "nst_vs_nsti";
  payload["config"] = detail::exp_echo(ec);

  std::vector<double> unadapted, nst_best, nsti, after;
  for (std::size_t r = 0; r < ec.repeats; ++r) {
    unadapted.push_back(per_repeat[r].nst_test[0]);
    nst_best.push_back(per_repeat[r].nst_best_test);
    nsti.push_back(per_repeat[r].nsti_test);
    after.push_back(per_repeat[r].nsti_after_nst_test);
  }
  payload["unadapted_test_wer"] = detail::stat_block(unadapted);
  payload["nst_best_test_wer"] = detail::stat_block(nst_best);
  payload["nsti_test_wer"] = detail::stat_block(nsti);
  payload["nsti_after_nst_test_wer"] = detail::stat_block(after);

  payload["nst_epochs"] = nlohmann::ordered_json::array();
  const std::size_t n_snap = per_repeat[0].nst_dev.size();
  for (std::size_t e = 0; e < n_snap; ++e) {
    std::vector<double> devs, tests;
    for (std::size_t r = 0; r < ec.repeats; ++r) {
      devs.push_back(per_repeat[r].nst_dev[e]);
      tests.push_back(per_repeat[r].nst_test[e]);
    }
    nlohmann::ordered_json row;
    row["epoch"] = e;
    row["dev_wer"] = detail::stat_block(devs);
    row["test_wer"] = detail::stat_block(tests);
    payload["nst_epochs"].push_back(std::move(row));
  }
  nlohmann::ordered_json bests = nlohmann::ordered_json::array();
  for (std::size_t r = 0; r < ec.repeats; ++r)
    bests.push_back(per_repeat[r].best_epoch);
  payload["nst_best_epochs"] = std::move(bests);

  ExperimentReport rep;
  rep.name = "nst_vs_nsti";
  rep.payload = std::move(payload);
  for (auto& pr : per_repeat)
    for (auto& cell : pr.cells) rep.cells.push_back(std::move(cell));
  rep.total_seconds = detail::elapsed(t0);
  return rep;
}

// ---------------------------------------------------------------------------
// cross_recording: adapt on recording A, evaluate on every B (including A)
// after the first and the final epoch.

inline ExperimentReport cross_recording(const Workspace& ws,
                                        const ExpConfig& ec) {
  const auto t0 = std::chrono::steady_clock::now();
  model::Checkpoint base = load_base(ws);
  const auto test = load_split(ws, "target_test");
  const std::size_t n = test.size();
  const std::size_t n_epochs = std::max<std::size_t>(1, ec.adapt.epochs);

  struct PairResult {
    double wer_first = 0.0;
    metrics::WerBreakdown last;
  };
  // results[(a * n + b) * repeats + r]
  std::vector<PairResult> results(n * n * ec.repeats);
  std::vector<double> task_seconds(n * ec.repeats, 0.0);

  parallel_for(n * ec.repeats, ec.threads, [&](std::size_t task) {
    const std::size_t a = task / ec.repeats;
    const std::size_t r = task % ec.repeats;
    adapt::AdaptConfig cfg = ec.adapt;
    cfg.setting = adapt::Setting::shuffled;
    cfg.transform = transforms::draw_spec("specaugment", base.config.f_bins);
    cfg.epochs = n_epochs;
    cfg.seed = ec.seed + r;
    const auto started = std::chrono::steady_clock::now();
    std::vector<model::Checkpoint> snapshots;
    auto [report, ckpt] = adapt::nsti_run(base, test[a], cfg, &snapshots);
    model::Checkpoint& first = snapshots.front();
    model::Checkpoint& last = snapshots.back();
    for (std::size_t b = 0; b < n; ++b) {
      const Tensor x = corpus::normalized(test[b].spectrogram);
      const auto ev_first =
          adapt::transcribe(first, x, cfg.window, cfg.stride);
      const auto ev_last = adapt::transcribe(last, x, cfg.window, cfg.stride);
      PairResult& pr = results[(a * n + b) * ec.repeats + r];
      pr.wer_first = metrics::wer(test[b].reference, ev_first.transcript).wer;
      pr.last = metrics::wer(test[b].reference, ev_last.transcript);
    }
    task_seconds[task] = detail::elapsed(started);
  });

  nlohmann::ordered_json payload;
  payload["experiment"] = "cross_recording";
  payload["config"] = detail::exp_echo(ec);
  payload["epochs_compared"] = nlohmann::ordered_json::array({1, n_epochs});
  payload["pairs"] = nlohmann::ordered_json::array();

  std::vector<Cell> cells;
  std::size_t cross_pairs = 0, cross_worse_last = 0;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      std::vector<double> firsts, lasts;
      for (std::size_t r = 0; r < ec.repeats; ++r) {
        const PairResult& pr = results[(a * n + b) * ec.repeats + r];
        firsts.push_back(pr.wer_first);
        lasts.push_back(pr.last.wer);

        Cell cell;
        cell.condition = "adapt_on_" + std::to_string(test[a].recording_id);
        cell.split = "test";
        cell.recording_id = test[b].recording_id;
        cell.seed = ec.seed + r;
        cell.error = pr.last;
        cells.push_back(std::move(cell));
      }
      nlohmann::ordered_json row;
      row["adapt_on"] = test[a].recording_id;
      row["eval_on"] = test[b].recording_id;
      row["self"] = a == b;
      row["wer_epoch_first"] = detail::stat_block(firsts);
      row["wer_epoch_last"] = detail::stat_block(lasts);
      payload["pairs"].push_back(std::move(row));
      if (a != b) {
        ++cross_pairs;
        // Compare against the matched adaptation of b on itself.
        std::vector<double> self_lasts;
        for (std::size_t r = 0; r < ec.repeats; ++r)
          self_lasts.push_back(results[(b * n + b) * ec.repeats + r].last.wer);
        if (detail::mean_of(lasts) > detail::mean_of(self_lasts))
          ++cross_worse_last;
      }
    }
  payload["cross_pairs"] = cross_pairs;
  payload["cross_worse_than_self"] = cross_worse_last;
  payload["fraction_cross_worse"] =
      cross_pairs > 0
          ? static_cast<double>(cross_worse_last) / static_cast<double>(cross_pairs)
          : 0.0;

  ExperimentReport rep;
  rep.name = "cross_recording";
  rep.payload = std::move(payload);
  rep.cells = std::move(cells);
  rep.total_seconds = detail::elapsed(t0);
  return rep;
}

// ---------------------------------------------------------------------------

inline ExperimentReport run_experiment(const std::string& name,
                                       const Workspace& ws,
                                       const ExpConfig& ec) {
  if (name == "settings_table") return settings_table(ws, ec);
  if (name == "epoch_curve") return epoch_curve(ws, ec);
  if (name == "transform_table") return transform_table(ws, ec);
  if (name == "duration_sweep") return duration_sweep(ws, ec);
  if (name == "nst_vs_nsti") return nst_vs_nsti(ws, ec);
  if (name == "cross_recording") return cross_recording(ws, ec);
  throw std::invalid_argument(
      "unknown experiment '" + name +
      "' (expected settings_table, epoch_curve, transform_table, "
      "duration_sweep, nst_vs_nsti, or cross_recording)");
}

// ---------------------------------------------------------------------------
// Emission: canonical JSON, per-cell CSV, optional SVG line plot, and a
// separate (non-canonical) timing file.

namespace detail {

inline std::string fmt_double(double v) { return nlohmann::json(v).dump(); }

inline std::string svg_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace detail

inline std::string to_csv(const ExperimentReport& rep) {
  std::string out =
      "condition,split,recording_id,seed,wer,substitutions,insertions,"
      "deletions,ref_len,blank_ratio,final_loss\n";
  for (const auto& c : rep.cells) {
    out += c.condition + "," + c.split + "," + std::to_string(c.recording_id) +
           "," + std::to_string(c.seed) + "," + detail::fmt_double(c.error.wer) +
           "," + std::to_string(c.error.substitutions) + "," +
           std::to_string(c.error.insertions) + "," +
           std::to_string(c.error.deletions) + "," +
           std::to_string(c.error.ref_len) + "," +
           detail::fmt_double(c.blank_ratio) + "," +
           detail::fmt_double(c.final_loss) + "\n";
  }
  return out;
}

// Minimal self-contained line plot: one polyline per series.
inline std::string to_svg(const ExperimentReport& rep) {
  const double width = 640, height = 400;
  const double left = 64, right = 612, top = 40, bottom = 356;
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool seeded = false;
  for (const auto& s : rep.plot)
    for (const auto& [x, y] : s.points) {
      if (!seeded) {
        xmin = xmax = x;
        ymin = ymax = y;
        seeded = true;
      }
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;
  auto sx = [&](double x) {
    return left + (x - xmin) / (xmax - xmin) * (right - left);
  };
  auto sy = [&](double y) {
    return bottom - (y - ymin) / (ymax - ymin) * (bottom - top);
  };
  const std::vector<std::string> palette = {"#1f77b4", "#d62728", "#2ca02c",
                                            "#9467bd", "#ff7f0e", "#8c564b"};
  std::string svg =
      "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " +
      detail::svg_number(width) + " " + detail::svg_number(height) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"20\" y=\"24\" font-family=\"monospace\" font-size=\"14\">" +
         rep.name + "</text>\n";
  svg += "<line x1=\"" + detail::svg_number(left) + "\" y1=\"" +
         detail::svg_number(bottom) + "\" x2=\"" + detail::svg_number(right) +
         "\" y2=\"" + detail::svg_number(bottom) +
         "\" stroke=\"black\" stroke-width=\"1\"/>\n";
  svg += "<line x1=\"" + detail::svg_number(left) + "\" y1=\"" +
         detail::svg_number(top) + "\" x2=\"" + detail::svg_number(left) +
         "\" y2=\"" + detail::svg_number(bottom) +
         "\" stroke=\"black\" stroke-width=\"1\"/>\n";
  for (const auto& [val, px] :
       {std::pair<double, double>{xmin, sx(xmin)}, {xmax, sx(xmax)}})
    svg += "<text x=\"" + detail::svg_number(px) + "\" y=\"" +
           detail::svg_number(bottom + 18) +
           "\" font-family=\"monospace\" font-size=\"11\" "
           "text-anchor=\"middle\">" +
           detail::svg_number(val) + "</text>\n";
  for (const auto& [val, py] :
       {std::pair<double, double>{ymin, sy(ymin)}, {ymax, sy(ymax)}})
    svg += "<text x=\"" + detail::svg_number(left - 6) + "\" y=\"" +
           detail::svg_number(py + 4) +
           "\" font-family=\"monospace\" font-size=\"11\" "
           "text-anchor=\"end\">" +
           detail::svg_number(val) + "</text>\n";
  for (std::size_t s = 0; s < rep.plot.size(); ++s) {
    const auto& color = palette[s % palette.size()];
    std::string pts;
    for (const auto& [x, y] : rep.plot[s].points)
      pts += detail::svg_number(sx(x)) + "," + detail::svg_number(sy(y)) + " ";
    svg += "<polyline fill=\"none\" stroke=\"" + color +
           "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    svg += "<text x=\"" + detail::svg_number(right - 4) + "\" y=\"" +
           detail::svg_number(top + 16.0 * static_cast<double>(s)) +
           "\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\" "
           "fill=\"" +
           color + "\">" + rep.plot[s].name + "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

inline nlohmann::ordered_json timing_json(const ExperimentReport& rep) {
  nlohmann::ordered_json j;
  j["experiment"] = rep.name;
  j["total_seconds"] = rep.total_seconds;
  j["cells"] = nlohmann::ordered_json::array();
  for (const auto& c : rep.cells) {
    nlohmann::ordered_json jc;
    jc["condition"] = c.condition;
    jc["recording_id"] = c.recording_id;
    jc["seed"] = c.seed;
    jc["seconds"] = c.seconds;
    j["cells"].push_back(std::move(jc));
  }
  return j;
}

struct EmittedFiles {
  std::vector<std::filesystem::path> paths;
};

inline EmittedFiles emit(const ExperimentReport& rep,
                         const std::set<std::string>& formats,
                         const std::filesystem::path& dir) {
  for (const auto& f : formats)
    if (f != "json" && f != "csv" && f != "svg")
      throw std::invalid_argument("unknown emit format '" + f +
                                  "' (expected json, csv, or svg)");
  std::filesystem::create_directories(dir);
  EmittedFiles out;
  if (formats.count("json")) {
    const auto path = dir / (rep.name + ".json");
    detail::write_text(path, rep.payload.dump(2) + "\n");
    out.paths.push_back(path);
    const auto tpath = dir / (rep.name + ".timing.json");
    detail::write_text(tpath, timing_json(rep).dump(2) + "\n");
    out.paths.push_back(tpath);
  }
  if (formats.count("csv")) {
    const auto path = dir / (rep.name + ".csv");
    detail::write_text(path, to_csv(rep));
    out.paths.push_back(path);
  }
  if (formats.count("svg") && !rep.plot.empty()) {
    const auto path = dir / (rep.name + ".svg");
    detail::write_text(path, to_svg(rep));
    out.paths.push_back(path);
  }
  return out;
}

}  // namespace nsti::experiments
