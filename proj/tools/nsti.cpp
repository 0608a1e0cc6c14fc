// Command-line front end: corpus generation, base training, transcription,
// per-recording adaptation, and the experiment drivers.
//
// Every subcommand accepts --config FILE, a flat JSON object whose keys match
// the long flag names; explicit flags override config values. Exit codes:
// 0 success, 1 invalid usage or validation, 2 numeric/runtime failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "nsti/adapt.hpp"
#include "nsti/corpus.hpp"
#include "nsti/experiments.hpp"
#include "nsti/metrics.hpp"
#include "nsti/model.hpp"

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

// Flat JSON config overlay: applied after parsing, only to options the user
// did not pass explicitly, so flags always win.
class ConfigOverlay {
 public:
  void load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
      throw std::invalid_argument("cannot read config file: " + path);
    data_ = json::parse(is);
    if (!data_.is_object())
      throw std::invalid_argument("config file must hold a JSON object: " +
                                  path);
  }

  bool loaded() const { return !data_.is_null(); }
  bool has(const std::string& key) const {
    return loaded() && data_.contains(key);
  }

  template <typename T>
  void apply(const CLI::App* sub, const std::string& flag, T& ref) {
    const std::string key = flag.substr(2);  // strip leading "--"
    seen_.insert(key);
    if (!has(key)) return;
    if (sub->count(flag) > 0) return;  // explicit flag wins
    ref = data_.at(key).get<T>();
  }

  // Typo safety: every config key must correspond to a known flag.
  void finish(const std::string& path) const {
    if (!loaded()) return;
    for (const auto& [key, value] : data_.items())
      if (!seen_.count(key))
        throw std::invalid_argument("unknown config key '" + key + "' in " +
                                    path);
  }

 private:
  json data_;
  std::set<std::string> seen_;
};

void require_value(const std::string& value, const std::string& flag) {
  if (value.empty())
    throw std::invalid_argument("missing required option " + flag +
                                " (pass the flag or set it in --config)");
}

std::set<std::string> parse_formats(const std::string& csv) {
  std::set<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.insert(item);
  if (out.empty())
    throw std::invalid_argument("--emit: expected a comma-separated list of "
                                "json, csv, svg");
  return out;
}

ordered_json transcript_json(const std::vector<int>& labels) {
  ordered_json arr = ordered_json::array();
  for (int v : labels) arr.push_back(v);
  return arr;
}

// ---------------------------------------------------------------------------

int run_gen_corpus(const CLI::App* sub, const std::string& config_path,
                   std::string out_dir, nsti::experiments::GenConfig g) {
  ConfigOverlay cfg;
  if (!config_path.empty()) cfg.load(config_path);
  cfg.apply(sub, "--out", out_dir);
  cfg.apply(sub, "--seed", g.seed);
  cfg.apply(sub, "--recordings", g.recordings);
  cfg.apply(sub, "--frames", g.frames);
  cfg.apply(sub, "--target-tilt", g.target_tilt);
  cfg.apply(sub, "--target-noise", g.target_noise);
  cfg.finish(config_path);
  require_value(out_dir, "--out");

  const auto manifest = nsti::experiments::gen_workspace(out_dir, g);
  std::cout << manifest.dump(2) << "\n";
  return 0;
}

int run_train_base(const CLI::App* sub, const std::string& config_path,
                   std::string corpus_dir, std::string out_path,
                   nsti::experiments::TrainConfig tc) {
  ConfigOverlay cfg;
  if (!config_path.empty()) cfg.load(config_path);
  cfg.apply(sub, "--corpus", corpus_dir);
  cfg.apply(sub, "--out", out_path);
  cfg.apply(sub, "--seed", tc.seed);
  cfg.apply(sub, "--epochs", tc.epochs);
  cfg.apply(sub, "--lr", tc.lr);
  cfg.apply(sub, "--patience", tc.patience);
  cfg.apply(sub, "--window", tc.window);
  cfg.apply(sub, "--stride", tc.stride);
  cfg.finish(config_path);
  require_value(corpus_dir, "--corpus");
  require_value(out_path, "--out");

  nsti::experiments::Workspace ws{corpus_dir};
  const auto train = nsti::experiments::load_split(ws, "source_train");
  const auto dev = nsti::experiments::load_split(ws, "source_dev");
  auto result = nsti::experiments::train_base(train, dev, tc);
  nsti::model::save(result.ckpt, out_path);

  ordered_json summary;
  summary["checkpoint"] = out_path;
  summary["params"] = result.ckpt.total_params();
  summary["dev_errors"] = result.dev_errors;
  summary["best_epoch"] = result.best_epoch;
  summary["best_dev_error"] = result.dev_errors[result.best_epoch];
  summary["epochs_run"] = result.epochs_run;
  summary["skipped_utterances"] = result.skipped_utterances;
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int run_transcribe(const CLI::App* sub, const std::string& config_path,
                   std::string ckpt_path, std::string rec_path,
                   std::size_t window, double stride) {
  ConfigOverlay cfg;
  if (!config_path.empty()) cfg.load(config_path);
  cfg.apply(sub, "--ckpt", ckpt_path);
  cfg.apply(sub, "--recording", rec_path);
  cfg.apply(sub, "--window", window);
  cfg.apply(sub, "--stride", stride);
  cfg.finish(config_path);
  require_value(ckpt_path, "--ckpt");
  require_value(rec_path, "--recording");

  nsti::model::Checkpoint ckpt = nsti::model::load(ckpt_path);
  const auto rec = nsti::corpus::load_recording(rec_path);
  const nsti::Tensor x = nsti::corpus::normalized(rec.spectrogram);
  const auto ev = nsti::adapt::transcribe(ckpt, x, window, stride);
  const auto err = nsti::metrics::wer(rec.reference, ev.transcript);

  ordered_json out;
  out["recording_id"] = rec.recording_id;
  out["domain_id"] = rec.domain_id;
  out["frames"] = rec.spectrogram.rows();
  out["transcript"] = transcript_json(ev.transcript);
  out["blank_ratio"] = ev.blank_ratio;
  out["wer"] = err.wer;
  out["substitutions"] = err.substitutions;
  out["insertions"] = err.insertions;
  out["deletions"] = err.deletions;
  out["ref_len"] = err.ref_len;
  std::cout << out.dump(2) << "\n";
  return 0;
}

int run_adapt(const CLI::App* sub, const std::string& config_path,
              std::string ckpt_path, std::string rec_path, std::string setting,
              std::string transform, nsti::adapt::AdaptConfig ac,
              bool timing) {
  ConfigOverlay cfg;
  if (!config_path.empty()) cfg.load(config_path);
  cfg.apply(sub, "--ckpt", ckpt_path);
  cfg.apply(sub, "--recording", rec_path);
  cfg.apply(sub, "--setting", setting);
  cfg.apply(sub, "--transform", transform);
  cfg.apply(sub, "--epochs", ac.epochs);
  cfg.apply(sub, "--lr", ac.lr);
  cfg.apply(sub, "--seed", ac.seed);
  cfg.apply(sub, "--copies", ac.copies);
  cfg.apply(sub, "--optimizer", ac.optimizer);
  cfg.apply(sub, "--momentum", ac.momentum);
  cfg.apply(sub, "--eps", ac.eps);
  cfg.apply(sub, "--ema-alpha", ac.ema_alpha);
  cfg.apply(sub, "--window", ac.window);
  cfg.apply(sub, "--stride", ac.stride);
  cfg.finish(config_path);
  require_value(ckpt_path, "--ckpt");
  require_value(rec_path, "--recording");
  require_value(setting, "--setting");
  require_value(transform, "--transform");

  const nsti::model::Checkpoint base = nsti::model::load(ckpt_path);
  const auto rec = nsti::corpus::load_recording(rec_path);
  ac.setting = nsti::adapt::parse_setting(setting);
  ac.transform = nsti::transforms::draw_spec(transform, base.config.f_bins);

  auto [report, ckpt] = nsti::adapt::run(base, rec, ac);
  std::cout << nsti::adapt::to_json(report, timing).dump(2) << "\n";
  return 0;
}

int run_experiment_cmd(const CLI::App* sub, const std::string& config_path,
                       const std::string& name, std::string workspace,
                       nsti::experiments::ExpConfig ec, std::string emit_csv) {
  ConfigOverlay cfg;
  if (!config_path.empty()) cfg.load(config_path);
  cfg.apply(sub, "--workspace", workspace);
  cfg.apply(sub, "--repeats", ec.repeats);
  cfg.apply(sub, "--seed", ec.seed);
  cfg.apply(sub, "--emit", emit_csv);
  cfg.apply(sub, "--epochs", ec.adapt.epochs);
  cfg.apply(sub, "--lr", ec.adapt.lr);
  cfg.apply(sub, "--copies", ec.adapt.copies);
  cfg.apply(sub, "--window", ec.adapt.window);
  cfg.apply(sub, "--stride", ec.adapt.stride);
  cfg.finish(config_path);
  require_value(workspace, "--workspace");
  if (ec.repeats == 0)
    throw std::invalid_argument("--repeats must be positive");
  const auto formats = parse_formats(emit_csv);

  nsti::experiments::Workspace ws{workspace};
  const auto report = nsti::experiments::run_experiment(name, ws, ec);
  nsti::experiments::emit(report, formats,
                          std::filesystem::path(workspace) / "reports");
  std::cout << report.payload.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Per-recording test-time adaptation of a CTC acoustic model via noisy "
      "student-teacher pseudo-labelling, with synthetic corpora, baselines, "
      "and experiment drivers."};
  app.require_subcommand(1);
  std::size_t threads = 4;
  app.add_option("--threads", threads,
                 "worker pool size for experiment drivers (adaptation output "
                 "never depends on it)");

  // gen-corpus -------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-corpus",
                                 "synthesize a workspace of corpus splits");
  std::string gen_config, gen_out;
  nsti::experiments::GenConfig g;
  gen->add_option("--config", gen_config, "JSON config file");
  gen->add_option("--out", gen_out, "workspace directory to create");
  gen->add_option("--seed", g.seed, "corpus seed");
  gen->add_option("--recordings", g.recordings, "recordings per target split");
  gen->add_option("--frames", g.frames, "frames per recording");
  gen->add_option("--target-tilt", g.target_tilt,
                  "spectral tilt of the target domain");
  gen->add_option("--target-noise", g.target_noise,
                  "noise level of the target domain");

  // train-base -------------------------------------------------------------
  auto* train = app.add_subcommand(
      "train-base", "train the source-domain base checkpoint");
  std::string train_config, train_corpus, train_out;
  nsti::experiments::TrainConfig tc;
  train->add_option("--config", train_config, "JSON config file");
  train->add_option("--corpus", train_corpus, "workspace directory");
  train->add_option("--out", train_out, "checkpoint file to write");
  train->add_option("--seed", tc.seed, "model init seed");
  train->add_option("--epochs", tc.epochs, "maximum training epochs");
  train->add_option("--lr", tc.lr, "learning rate");
  train->add_option("--patience", tc.patience,
                    "epochs without dev improvement before stopping");
  train->add_option("--window", tc.window, "eval window frames");
  train->add_option("--stride", tc.stride, "eval stride fraction");

  // transcribe ---------------------------------------------------------------
  auto* tr = app.add_subcommand("transcribe",
                                "stitched greedy transcription of a recording");
  std::string tr_config, tr_ckpt, tr_rec;
  std::size_t tr_window = nsti::windowing::kDefaultWindow;
  double tr_stride = nsti::windowing::kDefaultStride;
  tr->add_option("--config", tr_config, "JSON config file");
  tr->add_option("--ckpt", tr_ckpt, "checkpoint file");
  tr->add_option("--recording", tr_rec, "recording .bin file");
  tr->add_option("--window", tr_window, "window length in frames");
  tr->add_option("--stride", tr_stride, "stride as a fraction of the window");

  // adapt --------------------------------------------------------------------
  auto* ad = app.add_subcommand(
      "adapt", "adapt to one recording and report per-epoch results");
  std::string ad_config, ad_ckpt, ad_rec, ad_setting, ad_transform;
  bool ad_timing = false;
  nsti::adapt::AdaptConfig ac;
  ad->add_option("--config", ad_config, "JSON config file");
  ad->add_option("--ckpt", ad_ckpt, "base checkpoint file");
  ad->add_option("--recording", ad_rec, "recording .bin file");
  ad->add_option("--setting", ad_setting,
                 "shuffled | ordered | online | awmc");
  ad->add_option("--transform", ad_transform,
                 "specaugment | identity | noise | cutout");
  ad->add_option("--epochs", ac.epochs, "adaptation epochs");
  ad->add_option("--lr", ac.lr, "learning rate");
  ad->add_option("--seed", ac.seed, "adaptation seed");
  ad->add_option("--copies", ac.copies, "augmented views per update");
  ad->add_option("--optimizer", ac.optimizer, "madgrad | sgd");
  ad->add_option("--momentum", ac.momentum, "optimizer momentum");
  ad->add_option("--eps", ac.eps, "optimizer epsilon");
  ad->add_option("--ema-alpha", ac.ema_alpha, "awmc teacher decay");
  ad->add_option("--window", ac.window, "window length in frames");
  ad->add_option("--stride", ac.stride, "stride as a fraction of the window");
  ad->add_flag("--timing", ad_timing,
               "include wall-clock timing in the report (non-canonical)");

  // experiment ---------------------------------------------------------------
  auto* ex = app.add_subcommand("experiment",
                                "run a full experiment over a workspace");
  std::string ex_config, ex_name, ex_workspace;
  std::string ex_emit = "json,csv,svg";
  nsti::experiments::ExpConfig ec;
  ex->add_option("name", ex_name,
                 "settings_table | epoch_curve | transform_table | "
                 "duration_sweep | nst_vs_nsti | cross_recording")
      ->required();
  ex->add_option("--config", ex_config, "JSON config file");
  ex->add_option("--workspace", ex_workspace, "workspace directory");
  ex->add_option("--repeats", ec.repeats, "independent repeats per condition");
  ex->add_option("--seed", ec.seed, "base seed; repeat r uses seed + r");
  ex->add_option("--emit", ex_emit, "comma-separated: json,csv,svg");
  ex->add_option("--epochs", ec.adapt.epochs, "adaptation epochs");
  ex->add_option("--lr", ec.adapt.lr, "adaptation learning rate");
  ex->add_option("--copies", ec.adapt.copies, "augmented views per update");
  ex->add_option("--window", ec.adapt.window, "window length in frames");
  ex->add_option("--stride", ec.adapt.stride,
                 "stride as a fraction of the window");

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return run_gen_corpus(gen, gen_config, gen_out, g);
    if (train->parsed())
      return run_train_base(train, train_config, train_corpus, train_out, tc);
    if (tr->parsed())
      return run_transcribe(tr, tr_config, tr_ckpt, tr_rec, tr_window,
                            tr_stride);
    if (ad->parsed())
      return run_adapt(ad, ad_config, ad_ckpt, ad_rec, ad_setting,
                       ad_transform, ac, ad_timing);
    if (ex->parsed()) {
      ec.threads = threads;
      return run_experiment_cmd(ex, ex_config, ex_name, ex_workspace, ec,
                                ex_emit);
    }
    std::fprintf(stderr, "nsti: no subcommand given\n");
    return 1;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    std::fprintf(stderr, "nsti: %s\n", e.what());
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "nsti: config error: %s\n", e.what());
    return 1;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "nsti: %s\n", e.what());
    return 1;
  } catch (const std::runtime_error& e) {
    std::fprintf(stderr, "nsti: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "nsti: unexpected error: %s\n", e.what());
    return 2;
  }
}
