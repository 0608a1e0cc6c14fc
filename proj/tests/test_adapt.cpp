#include <catch2/catch_amalgamated.hpp>

#include <string>
#include <vector>

#include "json.hpp"
#include "nsti/adapt.hpp"
#include "nsti/corpus.hpp"
#include "nsti/ctc.hpp"
#include "nsti/model.hpp"

using namespace nsti;

namespace {

model::ModelConfig tiny_config() {
  model::ModelConfig c;
  c.f_bins = 8;
  c.hidden = 8;
  c.blocks = 1;
  c.kernel = 3;
  c.vocab = 3;
  c.seed = 5;
  return c;
}

// Untrained random weights decode to near-arbitrary labels; nudging the head
// toward symbol 0 keeps pseudo-labels nonempty so update steps actually run.
model::Checkpoint base_model() {
  model::Checkpoint ckpt = model::init(tiny_config());
  ckpt.param("head.b")[0] += 2.0;
  return ckpt;
}

corpus::Recording make_recording(std::uint64_t content_seed,
                                 std::size_t frames = 120) {
  const auto templates = corpus::gen_templates(9, 3, 8, 3);
  corpus::DomainConfig domain;
  domain.tilt_slope = 0.01;
  domain.noise_sigma = 0.05;
  domain.drift_sigma = 0.02;
  domain.gain = 1.2;
  domain.seed = 77;
  corpus::SynthParams params;
  params.target_frames = frames;
  return corpus::synth_recording(templates, domain, params, 0, content_seed,
                                 "test");
}

adapt::AdaptConfig small_cfg() {
  adapt::AdaptConfig cfg;
  cfg.window = 32;
  cfg.stride = 0.25;
  cfg.epochs = 2;
  cfg.lr = 1e-3;
  cfg.seed = 41;
  cfg.transform = transforms::draw_spec("specaugment", 8);
  return cfg;
}

bool params_equal(const model::Checkpoint& a, const model::Checkpoint& b) {
  if (a.params.size() != b.params.size()) return false;
  for (std::size_t i = 0; i < a.params.size(); ++i)
    if (a.params[i].second.values() != b.params[i].second.values())
      return false;
  return true;
}

std::vector<int> chunked_decode(model::Checkpoint& ckpt, const Tensor& x,
                                std::size_t window) {
  std::vector<int> out;
  for (std::size_t start = 0; start < x.rows(); start += window) {
    const Tensor chunk = slice_rows(x, start, std::min(start + window, x.rows()));
    const auto dec =
        ctc::greedy_decode(model::forward(ckpt, chunk, model::Mode::eval));
    out.insert(out.end(), dec.labels.begin(), dec.labels.end());
  }
  return out;
}

}  // namespace

TEST_CASE("zero learning rate leaves parameters bit-identical") {
  model::Checkpoint base = base_model();
  const auto rec = make_recording(1);
  auto cfg = small_cfg();
  cfg.lr = 0.0;
  auto [report, adapted] = adapt::nsti_run(base, rec, cfg);
  REQUIRE(params_equal(base, adapted));
  for (const auto& e : report.epochs)
    REQUIRE(e.transcript == report.epochs[0].transcript);
}

TEST_CASE("epoch count zero is a pure transcription pass") {
  model::Checkpoint base = base_model();
  const auto rec = make_recording(2);
  auto cfg = small_cfg();
  cfg.epochs = 0;
  auto [report, adapted] = adapt::nsti_run(base, rec, cfg);
  REQUIRE(report.epochs.size() == 1);
  const Tensor x = corpus::normalized(rec.spectrogram);
  const auto plain = adapt::transcribe(base, x, cfg.window, cfg.stride);
  REQUIRE(report.final_transcript == plain.transcript);
  REQUIRE(params_equal(base, adapted));
}

TEST_CASE("identity transform with two copies repeats the single-copy loss") {
  model::Checkpoint base = base_model();
  const auto rec = make_recording(3);
  const Tensor x = corpus::normalized(rec.spectrogram);
  const Tensor seg = slice_rows(x, 0, 32);
  auto cfg = small_cfg();
  cfg.transform = transforms::draw_spec("identity", 8);

  // Identical augmented views make the mean of two losses equal one loss
  // bitwise. (Gradient accumulation sums twice as many terms, so parameter
  // trajectories may differ in the last ulp; the loss contract is exact.)
  model::Checkpoint one = base.clone();
  model::Checkpoint two = base.clone();
  auto opt1 = optim::make_optimizer(cfg.optimizer, cfg.lr);
  auto opt2 = optim::make_optimizer(cfg.optimizer, cfg.lr);
  Rng rng1(9), rng2(9);
  cfg.copies = 1;
  const auto out1 = adapt::nsti_step(one, one, *opt1, seg, cfg, rng1);
  cfg.copies = 2;
  const auto out2 = adapt::nsti_step(two, two, *opt2, seg, cfg, rng2);
  REQUIRE_FALSE(out1.skipped);
  REQUIRE_FALSE(out2.skipped);
  REQUIRE(out1.loss == out2.loss);

  auto [report, adapted] = adapt::nsti_run(base, rec, cfg);
  REQUIRE(report.epochs.back().steps > 0);  // updates actually happened
}

TEST_CASE("adaptation is deterministic and loss values are finite") {
  model::Checkpoint base = base_model();
  const auto rec = make_recording(4);
  const auto cfg = small_cfg();
  auto [ra, ca] = adapt::nsti_run(base, rec, cfg);
  auto [rb, cb] = adapt::nsti_run(base, rec, cfg);
  REQUIRE(adapt::to_json(ra).dump(2) == adapt::to_json(rb).dump(2));
  REQUIRE(params_equal(ca, cb));
  for (std::size_t e = 1; e < ra.epochs.size(); ++e) {
    if (ra.epochs[e].steps == 0) continue;
    REQUIRE(std::isfinite(ra.epochs[e].mean_loss));
    REQUIRE(ra.epochs[e].mean_loss > 0.0);
  }
  REQUIRE(ra.segments > 1);
}

TEST_CASE("every adaptation starts from the base checkpoint") {
  model::Checkpoint base = base_model();
  const auto rec_a = make_recording(5);
  const auto rec_b = make_recording(6);
  const auto cfg = small_cfg();
  auto [rb_first, cb_first] = adapt::nsti_run(base, rec_b, cfg);
  auto [ra, ca] = adapt::nsti_run(base, rec_a, cfg);  // interleaved other work
  auto [rb_second, cb_second] = adapt::nsti_run(base, rec_b, cfg);
  REQUIRE(adapt::to_json(rb_first).dump(2) ==
          adapt::to_json(rb_second).dump(2));
  REQUIRE(params_equal(cb_first, cb_second));
}

TEST_CASE("running batch statistics never move during adaptation") {
  model::Checkpoint base = base_model();
  const auto rec = make_recording(7);
  std::vector<std::vector<double>> before;
  for (const auto& [n, t] : base.stats) before.push_back(t.values());
  for (auto setting : {adapt::Setting::shuffled, adapt::Setting::ordered,
                       adapt::Setting::online, adapt::Setting::awmc}) {
    auto cfg = small_cfg();
    cfg.setting = setting;
    auto [report, adapted] = adapt::run(base, rec, cfg);
    for (std::size_t i = 0; i < base.stats.size(); ++i) {
      REQUIRE(base.stats[i].second.values() == before[i]);
      REQUIRE(adapted.stats[i].second.values() == before[i]);
    }
    REQUIRE(adapted.counter == base.counter);
  }
}

TEST_CASE("no gradients survive a run") {
  model::Checkpoint base = base_model();
  const auto rec = make_recording(8);
  auto [report, adapted] = adapt::nsti_run(base, rec, small_cfg());
  for (const auto& [n, t] : adapted.params) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) REQUIRE(g == 0.0);
  }
}

TEST_CASE("shuffled and ordered visit the same steps in different order") {
  model::Checkpoint base = base_model();
  const auto rec = make_recording(9);
  auto cfg = small_cfg();
  cfg.setting = adapt::Setting::ordered;
  auto [ro, co] = adapt::nsti_run(base, rec, cfg);
  cfg.setting = adapt::Setting::shuffled;
  auto [rs, cs] = adapt::nsti_run(base, rec, cfg);
  REQUIRE(ro.epochs.back().steps + ro.epochs.back().skips ==
          rs.epochs.back().steps + rs.epochs.back().skips);
  REQUIRE(ro.segments == rs.segments);
}

TEST_CASE("online mode commits each prediction before updating") {
  model::Checkpoint base = base_model();
  auto cfg = small_cfg();
  cfg.setting = adapt::Setting::online;

  // Single-chunk recording (window exceeds its length): the only prediction
  // precedes the only update.
  const auto short_rec = make_recording(10);
  auto single = cfg;
  single.window = 128;
  auto [r1, c1] = adapt::online_run(base, short_rec, single);
  REQUIRE(r1.segments == 1);
  const Tensor xs = corpus::normalized(short_rec.spectrogram);
  REQUIRE(r1.final_transcript == chunked_decode(base, xs, single.window));
  REQUIRE(r1.epochs.size() == 2);  // baseline + the single pass

  // Zero learning rate: every chunk decodes with base weights.
  const auto long_rec = make_recording(11, 150);
  auto lr0 = cfg;
  lr0.lr = 0.0;
  auto [r2, c2] = adapt::online_run(base, long_rec, lr0);
  const Tensor xl = corpus::normalized(long_rec.spectrogram);
  REQUIRE(r2.final_transcript == chunked_decode(base, xl, cfg.window));
  REQUIRE(params_equal(base, c2));
}

TEST_CASE("awmc with alpha 1 keeps the teacher frozen") {
  model::Checkpoint base = base_model();
  const auto rec = make_recording(12, 150);
  auto cfg = small_cfg();
  cfg.setting = adapt::Setting::awmc;
  cfg.ema_alpha = 1.0;
  auto [report, student] = adapt::awmc_run(base, rec, cfg);
  const Tensor x = corpus::normalized(rec.spectrogram);
  REQUIRE(report.final_transcript == chunked_decode(base, x, cfg.window));
  // The student still trains even though predictions never see it.
  REQUIRE_FALSE(params_equal(base, student));
}

TEST_CASE("awmc with alpha 0 degenerates to the online setting") {
  model::Checkpoint base = base_model();
  const auto rec = make_recording(13, 150);
  auto cfg = small_cfg();
  cfg.setting = adapt::Setting::awmc;
  cfg.ema_alpha = 0.0;
  auto [ra, ca] = adapt::awmc_run(base, rec, cfg);
  cfg.setting = adapt::Setting::online;
  auto [ro, co] = adapt::online_run(base, rec, cfg);
  REQUIRE(ra.final_transcript == ro.final_transcript);
  REQUIRE(params_equal(ca, co));
  REQUIRE(ra.epochs.back().mean_loss == ro.epochs.back().mean_loss);
}

TEST_CASE("empty pseudo-labels are skipped without touching parameters") {
  model::Checkpoint blanky = model::init(tiny_config());
  blanky.param("head.b")[3] += 20.0;  // blank column dominates every frame
  const auto rec = make_recording(14);
  const Tensor x = corpus::normalized(rec.spectrogram);
  const Tensor seg = slice_rows(x, 0, 32);

  auto cfg = small_cfg();
  auto opt = optim::make_optimizer(cfg.optimizer, cfg.lr);
  Rng rng(1);
  model::Checkpoint before = blanky.clone();
  const auto out = adapt::nsti_step(blanky, blanky, *opt, seg, cfg, rng);
  REQUIRE(out.skipped);
  REQUIRE(params_equal(before, blanky));

  auto [report, adapted] = adapt::nsti_run(blanky, rec, cfg);
  REQUIRE(report.epochs.back().steps == 0);
  REQUIRE(report.epochs.back().skips == report.segments);
  REQUIRE(report.epochs.back().blank_ratio == 1.0);
  REQUIRE(params_equal(blanky, adapted));
}

TEST_CASE("nst training snapshots start at the base model") {
  model::Checkpoint base = base_model();
  std::vector<corpus::Recording> split = {make_recording(15),
                                          make_recording(16)};
  std::vector<corpus::Recording> dev = {make_recording(17)};
  auto cfg = small_cfg();
  cfg.epochs = 0;
  auto only_base = adapt::nst_train(base, split, cfg, dev);
  REQUIRE(only_base.size() == 1);
  REQUIRE(params_equal(only_base[0].ckpt, base));

  cfg.epochs = 2;
  auto snaps = adapt::nst_train(base, split, cfg, dev);
  REQUIRE(snaps.size() == 3);
  REQUIRE(params_equal(snaps[0].ckpt, base));
  REQUIRE(snaps[0].dev_error == only_base[0].dev_error);
  for (const auto& s : snaps) REQUIRE(std::isfinite(s.dev_error));

  REQUIRE_THROWS_AS(adapt::nst_train(base, {}, cfg, dev),
                    std::invalid_argument);
}

TEST_CASE("config validation rejects malformed settings") {
  auto cfg = small_cfg();
  cfg.copies = 0;
  REQUIRE_THROWS_AS(adapt::validate(cfg), std::invalid_argument);
  cfg = small_cfg();
  cfg.optimizer = "adam";
  REQUIRE_THROWS_AS(adapt::validate(cfg), std::invalid_argument);
  cfg = small_cfg();
  cfg.ema_alpha = 1.5;
  REQUIRE_THROWS_AS(adapt::validate(cfg), std::invalid_argument);
  cfg = small_cfg();
  cfg.lr = -1e-3;
  REQUIRE_THROWS_AS(adapt::validate(cfg), std::invalid_argument);

  model::Checkpoint base = base_model();
  const auto rec = make_recording(18);
  cfg = small_cfg();
  cfg.setting = adapt::Setting::online;
  REQUIRE_THROWS_AS(adapt::nsti_run(base, rec, cfg), std::invalid_argument);
  cfg.setting = adapt::Setting::shuffled;
  REQUIRE_THROWS_AS(adapt::online_run(base, rec, cfg), std::invalid_argument);
  REQUIRE_THROWS_AS(adapt::awmc_run(base, rec, cfg), std::invalid_argument);
  REQUIRE_THROWS_AS(adapt::parse_setting("offline"), std::invalid_argument);
  REQUIRE(adapt::parse_setting("awmc") == adapt::Setting::awmc);
}

TEST_CASE("report json is canonical and omits timing by default") {
  model::Checkpoint base = base_model();
  const auto rec = make_recording(19);
  auto [report, adapted] = adapt::nsti_run(base, rec, small_cfg());

  const std::string dumped = adapt::to_json(report).dump(2);
  const auto parsed = nlohmann::ordered_json::parse(dumped);
  REQUIRE(parsed.dump(2) == dumped);
  REQUIRE(dumped.find("seconds") == std::string::npos);

  const std::string timed = adapt::to_json(report, true).dump(2);
  REQUIRE(timed.find("total_seconds") != std::string::npos);

  REQUIRE(parsed["config"]["lr"] == 1e-3);
  REQUIRE(parsed["epochs"].size() == report.epochs.size());
  REQUIRE(parsed["setting"] == "shuffled");
}
