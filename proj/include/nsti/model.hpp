#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "nsti/autodiff.hpp"
#include "nsti/rng.hpp"

// A small CTC acoustic model: two stride-2 depthwise+pointwise subsampling
// stages (F -> H, overall time reduction 4x), then B residual blocks of
// {feed-forward H -> 2H -> H} and {depthwise conv + batch renormalization +
// activation}, a linear head to V+1 classes, and log_softmax. SiLU is the
// activation throughout. Output lattices are [ceil(T/4) x (V+1)] log
// distributions with the blank in the last column.

namespace nsti::model {

enum class Mode { eval, train_frozen_stats, train_update_stats };

struct ModelConfig {
  std::size_t f_bins = 32;
  std::size_t hidden = 64;
  std::size_t blocks = 2;
  std::size_t kernel = 5;
  std::size_t vocab = 8;  // blank is an extra class on top
  std::uint64_t seed = 1;
  static constexpr std::size_t subsample = 4;
};

struct RenormConfig {
  double r_max = 3.0;
  double d_max = 5.0;
  double momentum = 0.99;
  double eps = 1e-5;
};

// Trainable parameters plus batch-renorm running statistics, all keyed by
// stable names in a fixed order. A checkpoint owns its tensors; clone()
// detaches storage so two checkpoints never share parameters by accident.
struct Checkpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor>> params;
  std::vector<std::pair<std::string, Tensor>> stats;
  std::uint64_t counter = 0;  // train_update_stats passes performed

  Tensor& param(const std::string& name) {
    for (auto& [n, t] : params)
      if (n == name) return t;
    throw std::invalid_argument("checkpoint: no parameter named " + name);
  }
  Tensor& stat(const std::string& name) {
    for (auto& [n, t] : stats)
      if (n == name) return t;
    throw std::invalid_argument("checkpoint: no running stat named " + name);
  }

  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : params) t.zero_grad();
  }

  Checkpoint clone() const {
    Checkpoint c;
    c.config = config;
    c.counter = counter;
    for (const auto& [n, t] : params) {
      Tensor u = t.clone();
      u.zero_grad();
      c.params.emplace_back(n, u);
    }
    for (const auto& [n, t] : stats) c.stats.emplace_back(n, t.clone());
    return c;
  }
};

inline void validate(const ModelConfig& cfg) {
  if (cfg.f_bins < 1 || cfg.vocab < 2 || cfg.hidden < 8 || cfg.blocks < 1)
    throw std::invalid_argument("model: need F >= 1, V >= 2, H >= 8, B >= 1");
  if (cfg.kernel < 3 || cfg.kernel % 2 == 0)
    throw std::invalid_argument("model: kernel size must be odd and >= 3");
}

// Scaled-uniform initialization: weights ~ uniform(-s, s) with
// s = sqrt(1 / fan_in); biases and beta start at 0, gamma at 1, running
// stats at mean 0 / variance 1.
inline Checkpoint init(const ModelConfig& cfg) {
  validate(cfg);
  Rng rng(mix_seed(cfg.seed, 0xac0de1));
  Checkpoint ckpt;
  ckpt.config = cfg;

  auto weight = [&](const std::string& name, std::vector<std::size_t> shape,
                    std::size_t fan_in) {
    Tensor t(std::move(shape), true);
    const double s = std::sqrt(1.0 / static_cast<double>(fan_in));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-s, s);
    ckpt.params.emplace_back(name, t);
  };
  auto constant = [&](const std::string& name, std::size_t n, double v) {
    Tensor t({n}, true);
    for (std::size_t i = 0; i < n; ++i) t[i] = v;
    ckpt.params.emplace_back(name, t);
  };

  const std::size_t f = cfg.f_bins, h = cfg.hidden, k = cfg.kernel, c = cfg.vocab + 1;
  weight("sub1.dw", {k, f}, k);
  weight("sub1.pw", {f, h}, f);
  constant("sub1.b", h, 0.0);
  weight("sub2.dw", {k, h}, k);
  weight("sub2.pw", {h, h}, h);
  constant("sub2.b", h, 0.0);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    weight(p + "ff.w1", {h, 2 * h}, h);
    constant(p + "ff.b1", 2 * h, 0.0);
    weight(p + "ff.w2", {2 * h, h}, 2 * h);
    constant(p + "ff.b2", h, 0.0);
    weight(p + "conv.dw", {k, h}, k);
    constant(p + "norm.gamma", h, 1.0);
    constant(p + "norm.beta", h, 0.0);
    Tensor mean({h});
    Tensor var({h});
    for (std::size_t i = 0; i < h; ++i) var[i] = 1.0;
    ckpt.stats.emplace_back(p + "norm.running_mean", mean);
    ckpt.stats.emplace_back(p + "norm.running_var", var);
  }
  weight("head.w", {h, c}, h);
  constant("head.b", c, 0.0);
  return ckpt;
}

// Batch renormalization over channels of x [T x C].
//
// train_update_stats: normalize by batch statistics, correct toward the
// running statistics with r = clip(sigma_b/sigma_r, 1/r_max, r_max) and
// d = clip((mu_b - mu_r)/sigma_r, -d_max, d_max) treated as constants in
// backward (gradients still flow through the batch statistics themselves),
// then update the running stats by EMA. train_frozen_stats and eval:
// normalize by the running statistics only — the stats never move.
inline Tensor batch_renorm(Tensor x, Tensor gamma, Tensor beta, Tensor running_mean,
                           Tensor running_var, Mode mode, Tape* tape = nullptr,
                           const RenormConfig& rc = {}) {
  if (x.shape().size() != 2)
    throw std::invalid_argument("batch_renorm: input must be [T x C], got " + x.shape_str());
  const std::size_t c = x.cols();
  if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c ||
      running_var.numel() != c)
    throw std::invalid_argument("batch_renorm: channel mismatch, input " + x.shape_str());
  for (std::size_t j = 0; j < c; ++j)
    if (!(running_var[j] > 0.0))
      throw std::runtime_error("batch_renorm: nonpositive running variance in channel " +
                               std::to_string(j));

  if (mode != Mode::train_update_stats) {
    Tensor neg_mean({c});
    Tensor inv_sigma({c});
    for (std::size_t j = 0; j < c; ++j) {
      neg_mean[j] = -running_mean[j];
      inv_sigma[j] = 1.0 / std::sqrt(running_var[j]);
    }
    Tensor xhat = mul_rowvec(add_rowvec(x, neg_mean, tape), inv_sigma, tape);
    return add_rowvec(mul_rowvec(xhat, gamma, tape), beta, tape);
  }

  Tensor mu_b = col_mean(x, tape);
  Tensor xc = add_rowvec(x, scale(mu_b, -1.0, tape), tape);
  Tensor var_b = col_mean(mul(xc, xc, tape), tape);
  Tensor sigma_b = nsti::sqrt(add_scalar(var_b, rc.eps, tape), tape);
  Tensor xhat = mul_rowvec(xc, reciprocal(sigma_b, tape), tape);

  Tensor r({c});
  Tensor d({c});
  for (std::size_t j = 0; j < c; ++j) {
    const double sigma_r = std::sqrt(running_var[j]);
    r[j] = std::clamp(sigma_b[j] / sigma_r, 1.0 / rc.r_max, rc.r_max);
    d[j] = std::clamp((mu_b[j] - running_mean[j]) / sigma_r, -rc.d_max, rc.d_max);
  }
  Tensor y = add_rowvec(mul_rowvec(xhat, r, tape), d, tape);
  Tensor out = add_rowvec(mul_rowvec(y, gamma, tape), beta, tape);

  for (std::size_t j = 0; j < c; ++j) {
    running_mean[j] = rc.momentum * running_mean[j] + (1.0 - rc.momentum) * mu_b[j];
    running_var[j] = rc.momentum * running_var[j] + (1.0 - rc.momentum) * var_b[j];
  }
  return out;
}

inline std::size_t output_frames(std::size_t t) {
  return (t + ModelConfig::subsample - 1) / ModelConfig::subsample;
}

// Full forward pass; returns the [ceil(T/4) x (V+1)] log-prob lattice.
// Modes: eval ignores the tape; train_frozen_stats records gradients but
// leaves the running statistics untouched; train_update_stats additionally
// refreshes them (base training only) and bumps the update counter.
inline Tensor forward(Checkpoint& ckpt, const Tensor& x, Mode mode, Tape* tape = nullptr) {
  const auto& cfg = ckpt.config;
  if (x.shape().size() != 2 || x.cols() != cfg.f_bins)
    throw std::invalid_argument("forward: input must be [T x " + std::to_string(cfg.f_bins) +
                                "], got " + x.shape_str());
  if (x.rows() == 0) throw std::invalid_argument("forward: empty input");
  if (mode == Mode::eval) tape = nullptr;

  Tensor h = conv1d_depthwise(x, ckpt.param("sub1.dw"), 2, tape);
  h = add_rowvec(matmul(h, ckpt.param("sub1.pw"), tape), ckpt.param("sub1.b"), tape);
  h = silu(h, tape);
  h = conv1d_depthwise(h, ckpt.param("sub2.dw"), 2, tape);
  h = add_rowvec(matmul(h, ckpt.param("sub2.pw"), tape), ckpt.param("sub2.b"), tape);
  h = silu(h, tape);

  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    Tensor u = silu(add_rowvec(matmul(h, ckpt.param(p + "ff.w1"), tape),
                               ckpt.param(p + "ff.b1"), tape), tape);
    Tensor v = add_rowvec(matmul(u, ckpt.param(p + "ff.w2"), tape),
                          ckpt.param(p + "ff.b2"), tape);
    h = add(h, v, tape);

    Tensor conv = conv1d_depthwise(h, ckpt.param(p + "conv.dw"), 1, tape);
    conv = batch_renorm(conv, ckpt.param(p + "norm.gamma"), ckpt.param(p + "norm.beta"),
                        ckpt.stat(p + "norm.running_mean"), ckpt.stat(p + "norm.running_var"),
                        mode, tape);
    conv = silu(conv, tape);
    h = add(h, conv, tape);
  }

  Tensor logits = add_rowvec(matmul(h, ckpt.param("head.w"), tape), ckpt.param("head.b"), tape);
  if (mode == Mode::train_update_stats) ++ckpt.counter;
  return log_softmax(logits, tape);
}

// ---- Checkpoint file format -------------------------------------------------
// "NSTC", version byte 1, u32 header length, JSON header (config, counter,
// tensor names/shapes/kinds in payload order), then little-endian f64 payload.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f64(std::ostream& os, double d) {
  const auto u = std::bit_cast<std::uint64_t>(d);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(u);
}

}  // namespace detail

inline void save(const Checkpoint& ckpt, const std::filesystem::path& path) {
  nlohmann::ordered_json header;
  header["config"] = {{"f_bins", ckpt.config.f_bins}, {"hidden", ckpt.config.hidden},
                      {"blocks", ckpt.config.blocks}, {"kernel", ckpt.config.kernel},
                      {"vocab", ckpt.config.vocab},   {"seed", ckpt.config.seed}};
  header["counter"] = ckpt.counter;
  header["tensors"] = nlohmann::ordered_json::array();
  for (const auto& [n, t] : ckpt.params)
    header["tensors"].push_back({{"name", n}, {"shape", t.shape()}, {"kind", "param"}});
  for (const auto& [n, t] : ckpt.stats)
    header["tensors"].push_back({{"name", n}, {"shape", t.shape()}, {"kind", "stat"}});
  const std::string hs = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save: cannot open " + path.string());
  os.write("NSTC", 4);
  os.put(1);
  detail::put_u32(os, static_cast<std::uint32_t>(hs.size()));
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [n, t] : ckpt.params)
    for (std::size_t i = 0; i < t.numel(); ++i) detail::put_f64(os, t[i]);
  for (const auto& [n, t] : ckpt.stats)
    for (std::size_t i = 0; i < t.numel(); ++i) detail::put_f64(os, t[i]);
  if (!os) throw std::runtime_error("save: write failed for " + path.string());
}

inline Checkpoint load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load: cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "NSTC")
    throw std::runtime_error("load: " + path.string() + " is not a checkpoint file");
  const int version = is.get();
  if (version != 1)
    throw std::runtime_error("load: unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t hlen = detail::get_u32(is);
  std::string hs(hlen, '\0');
  is.read(hs.data(), hlen);
  if (!is) throw std::runtime_error("load: truncated header in " + path.string());

  Checkpoint ckpt;
  try {
    const auto header = nlohmann::json::parse(hs);
    const auto& cj = header.at("config");
    ckpt.config.f_bins = cj.at("f_bins").get<std::size_t>();
    ckpt.config.hidden = cj.at("hidden").get<std::size_t>();
    ckpt.config.blocks = cj.at("blocks").get<std::size_t>();
    ckpt.config.kernel = cj.at("kernel").get<std::size_t>();
    ckpt.config.vocab = cj.at("vocab").get<std::size_t>();
    ckpt.config.seed = cj.at("seed").get<std::uint64_t>();
    ckpt.counter = header.at("counter").get<std::uint64_t>();
    for (const auto& tj : header.at("tensors")) {
      const auto name = tj.at("name").get<std::string>();
      const auto shape = tj.at("shape").get<std::vector<std::size_t>>();
      const auto kind = tj.at("kind").get<std::string>();
      if (kind == "param")
        ckpt.params.emplace_back(name, Tensor(shape, true));
      else if (kind == "stat")
        ckpt.stats.emplace_back(name, Tensor(shape));
      else
        throw std::runtime_error("load: unknown tensor kind '" + kind + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load: bad checkpoint header in " + path.string() + ": " +
                             e.what());
  }
  validate(ckpt.config);
  for (auto& [n, t] : ckpt.params)
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = detail::get_f64(is);
  for (auto& [n, t] : ckpt.stats)
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = detail::get_f64(is);
  if (!is) throw std::runtime_error("load: truncated payload in " + path.string());
  return ckpt;
}

}  // namespace nsti::model
