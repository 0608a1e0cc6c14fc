#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "nsti/model.hpp"

namespace nsti::optim {

// Applies an update rule to every named parameter of a checkpoint, consuming
// whatever gradients the tape left behind. Parameters without a recorded
// gradient are treated as having zero gradient. State is keyed by parameter
// position, so one optimizer instance must stay with one checkpoint layout.
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(model::Checkpoint& ckpt) = 0;
  virtual std::size_t steps() const = 0;
};

namespace detail {

inline void check_layout(const model::Checkpoint& ckpt,
                         const std::vector<std::size_t>& sizes) {
  if (ckpt.params.size() != sizes.size())
    throw std::invalid_argument(
        "optimizer: checkpoint has " + std::to_string(ckpt.params.size()) +
        " parameters, state was built for " + std::to_string(sizes.size()));
  for (std::size_t i = 0; i < sizes.size(); ++i)
    if (ckpt.params[i].second.numel() != sizes[i])
      throw std::invalid_argument("optimizer: parameter '" +
                                  ckpt.params[i].first +
                                  "' changed size under the optimizer state");
}

}  // namespace detail

// Dual-averaging rule: with step weight lambda_k = lr*sqrt(k+1), accumulate
// s += lambda*g and nu += lambda*g^2, form z = x0 - s/(cbrt(nu)+eps) from the
// initial parameter snapshot x0, and move x = momentum*x + (1-momentum)*z.
class Madgrad final : public Optimizer {
 public:
  explicit Madgrad(double lr, double momentum = 0.9, double eps = 1e-6)
      : lr_(lr), momentum_(momentum), eps_(eps) {
    if (!(lr >= 0.0) || !std::isfinite(lr))
      throw std::invalid_argument("madgrad: learning rate must be >= 0, got " +
                                  std::to_string(lr));
    if (!(momentum >= 0.0 && momentum < 1.0))
      throw std::invalid_argument("madgrad: momentum must be in [0, 1), got " +
                                  std::to_string(momentum));
    if (!(eps >= 0.0))
      throw std::invalid_argument("madgrad: eps must be >= 0, got " +
                                  std::to_string(eps));
  }

  struct Slot {
    std::vector<double> x0;  // parameter snapshot at first step
    std::vector<double> s;   // weighted gradient sum
    std::vector<double> nu;  // weighted squared-gradient sum, entrywise >= 0
  };

  void step(model::Checkpoint& ckpt) override {
    bind(ckpt);
    const double lambda = lr_ * std::sqrt(static_cast<double>(k_ + 1));
    for (std::size_t p = 0; p < ckpt.params.size(); ++p) {
      Tensor& x = ckpt.params[p].second;
      Slot& slot = slots_[p];
      const bool has_g = x.has_grad();
      for (std::size_t i = 0; i < x.numel(); ++i) {
        const double g = has_g ? x.grad()[i] : 0.0;
        slot.s[i] += lambda * g;
        slot.nu[i] += lambda * g * g;
        const double denom = std::cbrt(slot.nu[i]) + eps_;
        // 0/0 arises only before any nonzero gradient with eps = 0; the
        // correction is exactly zero there.
        const double corr =
            (slot.s[i] == 0.0 && denom == 0.0) ? 0.0 : slot.s[i] / denom;
        const double z = slot.x0[i] - corr;
        // The blend is algebraically the identity when z == x; honoring that
        // exactly keeps zero-gradient and zero-lr steps from drifting by ulps.
        if (z != x[i]) x[i] = momentum_ * x[i] + (1.0 - momentum_) * z;
      }
    }
    ++k_;
  }

  std::size_t steps() const override { return k_; }
  const std::vector<Slot>& state() const { return slots_; }

 private:
  void bind(const model::Checkpoint& ckpt) {
    if (slots_.empty() && sizes_.empty()) {
      for (const auto& [name, t] : ckpt.params) {
        sizes_.push_back(t.numel());
        slots_.push_back(Slot{t.values(), std::vector<double>(t.numel(), 0.0),
                              std::vector<double>(t.numel(), 0.0)});
      }
      return;
    }
    detail::check_layout(ckpt, sizes_);
  }

  double lr_;
  double momentum_;
  double eps_;
  std::size_t k_ = 0;
  std::vector<std::size_t> sizes_;
  std::vector<Slot> slots_;
};

// Heavy-ball rule: v = momentum*v + g; x -= lr*v.
class Sgd final : public Optimizer {
 public:
  explicit Sgd(double lr, double momentum = 0.9) : lr_(lr), momentum_(momentum) {
    if (!(lr >= 0.0) || !std::isfinite(lr))
      throw std::invalid_argument("sgd: learning rate must be >= 0, got " +
                                  std::to_string(lr));
    if (!(momentum >= 0.0 && momentum < 1.0))
      throw std::invalid_argument("sgd: momentum must be in [0, 1), got " +
                                  std::to_string(momentum));
  }

  void step(model::Checkpoint& ckpt) override {
    bind(ckpt);
    for (std::size_t p = 0; p < ckpt.params.size(); ++p) {
      Tensor& x = ckpt.params[p].second;
      std::vector<double>& v = velocity_[p];
      const bool has_g = x.has_grad();
      for (std::size_t i = 0; i < x.numel(); ++i) {
        const double g = has_g ? x.grad()[i] : 0.0;
        v[i] = momentum_ * v[i] + g;
        x[i] -= lr_ * v[i];
      }
    }
    ++k_;
  }

  std::size_t steps() const override { return k_; }

 private:
  void bind(const model::Checkpoint& ckpt) {
    if (velocity_.empty() && sizes_.empty()) {
      for (const auto& [name, t] : ckpt.params) {
        sizes_.push_back(t.numel());
        velocity_.emplace_back(t.numel(), 0.0);
      }
      return;
    }
    detail::check_layout(ckpt, sizes_);
  }

  double lr_;
  double momentum_;
  std::size_t k_ = 0;
  std::vector<std::size_t> sizes_;
  std::vector<std::vector<double>> velocity_;
};

inline std::unique_ptr<Optimizer> make_optimizer(const std::string& name,
                                                 double lr,
                                                 double momentum = 0.9,
                                                 double eps = 1e-6) {
  if (name == "madgrad") return std::make_unique<Madgrad>(lr, momentum, eps);
  if (name == "sgd") return std::make_unique<Sgd>(lr, momentum);
  throw std::invalid_argument("unknown optimizer '" + name +
                              "' (expected madgrad or sgd)");
}

}  // namespace nsti::optim
