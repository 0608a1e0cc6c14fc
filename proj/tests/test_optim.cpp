#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "nsti/model.hpp"
#include "nsti/optim.hpp"
#include "nsti/rng.hpp"

using namespace nsti;

namespace {

// Reference recursion written directly over scalars, independent of the
// Optimizer/Checkpoint machinery.
struct ScalarMadgrad {
  double lr, momentum, eps;
  double x0, s = 0.0, nu = 0.0;
  std::size_t k = 0;
  double apply(double x, double g) {
    const double lambda = lr * std::sqrt(static_cast<double>(k + 1));
    s += lambda * g;
    nu += lambda * g * g;
    const double z = x0 - s / (std::cbrt(nu) + eps);
    ++k;
    return momentum * x + (1.0 - momentum) * z;
  }
};

// A one-parameter checkpoint so the Optimizer interface can drive scalars.
model::Checkpoint scalar_ckpt(double x) {
  model::Checkpoint ckpt;
  ckpt.params.emplace_back("x", Tensor({1}, {x}, true));
  return ckpt;
}

void plant_grad(model::Checkpoint& ckpt, const std::vector<double>& g) {
  auto& t = ckpt.params[0].second;
  t.grad().assign(g.begin(), g.end());
}

}  // namespace

TEST_CASE("madgrad hand example: unit gradient from zero lands at -1") {
  model::Checkpoint ckpt = scalar_ckpt(0.0);
  optim::Madgrad opt(1.0, 0.0, 0.0);
  plant_grad(ckpt, {1.0});
  opt.step(ckpt);
  REQUIRE(ckpt.params[0].second[0] == -1.0);
  REQUIRE(opt.state()[0].s[0] == 1.0);
  REQUIRE(opt.state()[0].nu[0] == 1.0);
  REQUIRE(opt.steps() == 1);
}

TEST_CASE("madgrad with zero gradients never moves the parameters") {
  model::Checkpoint ckpt = scalar_ckpt(0.7);
  optim::Madgrad opt(0.05);
  for (int i = 0; i < 5; ++i) {
    plant_grad(ckpt, {0.0});
    opt.step(ckpt);
    REQUIRE(ckpt.params[0].second[0] == 0.7);
  }
  model::Checkpoint untouched = scalar_ckpt(0.7);
  optim::Madgrad opt2(0.05);
  opt2.step(untouched);  // missing gradient counts as zero
  REQUIRE(untouched.params[0].second[0] == 0.7);
}

TEST_CASE("madgrad drives a quadratic below 1e-3 in 50 steps") {
  model::Checkpoint ckpt = scalar_ckpt(1.0);
  optim::Madgrad opt(0.1);
  ScalarMadgrad ref{0.1, 0.9, 1e-6, 1.0};
  double rx = 1.0;
  for (int i = 0; i < 50; ++i) {
    const double x = ckpt.params[0].second[0];
    plant_grad(ckpt, {2.0 * x});
    opt.step(ckpt);
    rx = ref.apply(rx, 2.0 * rx);
    REQUIRE(ckpt.params[0].second[0] == Catch::Approx(rx).margin(1e-12));
  }
  const double x = ckpt.params[0].second[0];
  REQUIRE(x * x < 1e-3);
}

TEST_CASE("madgrad matches the scalar recursion on random gradient streams") {
  Rng rng(311);
  for (int trial = 0; trial < 20; ++trial) {
    const double start = rng.uniform(-2, 2);
    model::Checkpoint ckpt = scalar_ckpt(start);
    optim::Madgrad opt(0.03, 0.9, 1e-6);
    ScalarMadgrad ref{0.03, 0.9, 1e-6, start};
    double rx = start;
    for (int step = 0; step < 25; ++step) {
      const double g = rng.gaussian();
      plant_grad(ckpt, {g});
      opt.step(ckpt);
      rx = ref.apply(rx, g);
      REQUIRE(ckpt.params[0].second[0] == Catch::Approx(rx).margin(1e-12));
      REQUIRE(opt.state()[0].nu[0] >= 0.0);
    }
  }
}

TEST_CASE("sgd hand example and zero-gradient fixpoint") {
  model::Checkpoint ckpt = scalar_ckpt(0.0);
  optim::Sgd opt(0.5, 0.0);
  plant_grad(ckpt, {1.0});
  opt.step(ckpt);
  REQUIRE(ckpt.params[0].second[0] == -0.5);
  for (int i = 0; i < 3; ++i) {
    plant_grad(ckpt, {0.0});
    opt.step(ckpt);
    REQUIRE(ckpt.params[0].second[0] == -0.5);
  }
}

TEST_CASE("sgd descends a quadratic with and without momentum") {
  for (double momentum : {0.0, 0.9}) {
    model::Checkpoint ckpt = scalar_ckpt(1.0);
    optim::Sgd opt(0.1, momentum);
    for (int i = 0; i < 50; ++i) {
      plant_grad(ckpt, {2.0 * ckpt.params[0].second[0]});
      opt.step(ckpt);
    }
    const double x = ckpt.params[0].second[0];
    REQUIRE(x * x < 1e-3);
  }
}

TEST_CASE("optimizers update full checkpoints and respect layout binding") {
  model::ModelConfig small;
  small.f_bins = 8;
  small.hidden = 8;
  small.blocks = 1;
  small.kernel = 3;
  small.vocab = 3;
  model::Checkpoint a = model::init(small);
  optim::Madgrad opt(0.01);
  for (auto& [name, t] : a.params)
    t.grad().assign(t.numel(), 1.0);
  const double before = a.param("head.w")[0];
  opt.step(a);
  REQUIRE(a.param("head.w")[0] != before);

  model::ModelConfig other = small;
  other.hidden = 16;
  model::Checkpoint b = model::init(other);
  REQUIRE_THROWS_AS(opt.step(b), std::invalid_argument);
}

TEST_CASE("optimizer construction validates its hyperparameters") {
  REQUIRE_THROWS_AS(optim::Madgrad(-1.0), std::invalid_argument);
  REQUIRE_THROWS_AS(optim::Madgrad(0.1, 1.0), std::invalid_argument);
  REQUIRE_THROWS_AS(optim::Madgrad(0.1, 0.9, -1e-9), std::invalid_argument);
  REQUIRE_THROWS_AS(optim::Sgd(0.1, -0.1), std::invalid_argument);
  REQUIRE_THROWS_AS(optim::make_optimizer("adam", 0.1), std::invalid_argument);
  REQUIRE(optim::make_optimizer("madgrad", 0.1) != nullptr);
  REQUIRE(optim::make_optimizer("sgd", 0.1) != nullptr);
}
