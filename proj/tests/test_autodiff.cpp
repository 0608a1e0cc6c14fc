#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "fd_check.hpp"
#include "nsti/autodiff.hpp"
#include "nsti/rng.hpp"

using namespace nsti;
using Catch::Matchers::ContainsSubstring;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0,
                     double hi = 1.0, bool requires_grad = true) {
  Tensor t(std::move(shape), requires_grad);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Scalar readout Sum_i w[i] * t[i]; the weights keep every element of t in
// play so a wrong gradient anywhere is visible.
Tensor weighted_sum(const Tensor& t, const Tensor& w, Tape* tape) {
  return sum(mul(t, w, tape), tape);
}

}  // namespace

TEST_CASE("tensor copies alias storage, clone detaches") {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b = a;
  b[0] = 99.0;
  REQUIRE(a[0] == 99.0);
  REQUIRE(a.same_storage(b));

  Tensor c = a.clone();
  c[1] = -1.0;
  REQUIRE(a[1] == 2.0);
  REQUIRE_FALSE(a.same_storage(c));
}

TEST_CASE("tensor construction validates data length") {
  REQUIRE_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), std::invalid_argument);
}

TEST_CASE("elementwise add/sub/mul forward values") {
  Tensor a({3}, {1, 2, 3});
  Tensor b({3}, {10, 20, 30});
  REQUIRE(add(a, b).values() == std::vector<double>{11, 22, 33});
  REQUIRE(sub(a, b).values() == std::vector<double>{-9, -18, -27});
  REQUIRE(mul(a, b).values() == std::vector<double>{10, 40, 90});
}

TEST_CASE("elementwise ops reject mismatched shapes naming both") {
  Tensor a({2, 3}, true);
  Tensor b({3, 2}, true);
  REQUIRE_THROWS_MATCHES(add(a, b), std::invalid_argument,
                         Catch::Matchers::MessageMatches(
                             ContainsSubstring("[2x3]") && ContainsSubstring("[3x2]")));
}

TEST_CASE("fan-out accumulates: d/da sum(a + a) = 2") {
  Tensor a({3}, {1, 2, 3}, true);
  Tape tape;
  Tensor loss = sum(add(a, a, &tape), &tape);
  tape.backward(loss);
  REQUIRE(a.grad() == std::vector<double>{2, 2, 2});
  REQUIRE(tape.empty());
}

TEST_CASE("backward rejects non-scalar roots") {
  Tensor a({2, 2}, true);
  Tape tape;
  Tensor y = add(a, a, &tape);
  REQUIRE_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("grads accumulate across backward passes until cleared") {
  Tensor a({2}, {1, 1}, true);
  for (int pass = 0; pass < 2; ++pass) {
    Tape tape;
    Tensor loss = sum(mul(a, a, &tape), &tape);
    tape.backward(loss);
  }
  REQUIRE(a.grad() == std::vector<double>{4, 4});  // 2 passes of d(a^2)=2a
  a.zero_grad();
  REQUIRE(a.grad() == std::vector<double>{0, 0});
}

TEST_CASE("ops without a tape record nothing and mark outputs constant") {
  Tensor a({2}, {1, 2}, true);
  Tensor y = mul(a, a);
  REQUIRE_FALSE(y.requires_grad());

  Tape tape;
  Tensor b({2}, {1, 2}, false);
  Tensor z = mul(b, b, &tape);
  REQUIRE_FALSE(z.requires_grad());
  REQUIRE(tape.empty());
}

TEST_CASE("matmul forward: identity and annihilating product") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {3, 4, 5, 6});
  REQUIRE(matmul(eye, m).values() == m.values());

  Tensor r({1, 2}, {1, 0});
  Tensor c({2, 1}, {0, 5});
  Tensor p = matmul(r, c);
  REQUIRE(p.shape() == std::vector<std::size_t>{1, 1});
  REQUIRE(p[0] == 0.0);
}

TEST_CASE("matmul rejects incompatible shapes naming both") {
  Tensor a({3, 4}, true);
  Tensor b({3, 2}, true);
  REQUIRE_THROWS_MATCHES(matmul(a, b), std::invalid_argument,
                         Catch::Matchers::MessageMatches(
                             ContainsSubstring("[3x4]") && ContainsSubstring("[3x2]")));
}

TEST_CASE("matmul gradients match finite differences") {
  Rng rng(101);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  Tensor w = random_tensor({3, 2}, rng, -1, 1, false);

  Tape tape;
  Tensor loss = weighted_sum(matmul(a, b, &tape), w, &tape);
  tape.backward(loss);

  auto f = [&]() {
    double s = 0.0;
    Tensor y = matmul(a, b);
    for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * w[i];
    return s;
  };
  REQUIRE(max_rel_err(a.grad(), fd_gradient(a, f)) < 1e-6);
  REQUIRE(max_rel_err(b.grad(), fd_gradient(b, f)) < 1e-6);
  (void)loss;
}

TEST_CASE("conv1d_depthwise forward shape and values") {
  // T=4, C=1, K=3, pad=1.
  Tensor x({4, 1}, {1, 2, 3, 4});
  Tensor k({3, 1}, {1, 1, 1});

  Tensor y1 = conv1d_depthwise(x, k, 1);
  REQUIRE(y1.shape() == std::vector<std::size_t>{4, 1});
  REQUIRE(y1.values() == std::vector<double>{3, 6, 9, 7});

  Tensor y2 = conv1d_depthwise(x, k, 2);
  // T' = floor((4 + 2 - 3) / 2) + 1 = 2
  REQUIRE(y2.shape() == std::vector<std::size_t>{2, 1});
  REQUIRE(y2.values() == std::vector<double>{3, 9});
}

TEST_CASE("conv1d_depthwise output length formula across sizes") {
  for (std::size_t t : {5u, 8u, 9u, 16u, 17u})
    for (std::size_t k : {3u, 5u})
      for (std::size_t s : {1u, 2u, 3u}) {
        Tensor x({t, 2});
        Tensor ker({k, 2});
        const std::size_t pad = k / 2;
        const std::size_t expect = (t + 2 * pad - k) / s + 1;
        REQUIRE(conv1d_depthwise(x, ker, s).rows() == expect);
      }
}

TEST_CASE("conv1d_depthwise channels stay independent") {
  Tensor x({3, 2}, {1, 10, 2, 20, 3, 30});
  Tensor k({1, 2}, {2, 0});
  Tensor y = conv1d_depthwise(x, k, 1);
  REQUIRE(y.values() == std::vector<double>{2, 0, 4, 0, 6, 0});
}

TEST_CASE("conv1d_depthwise gradients match finite differences") {
  Rng rng(202);
  for (std::size_t stride : {1u, 2u}) {
    Tensor x = random_tensor({9, 3}, rng);
    Tensor k = random_tensor({5, 3}, rng);
    const std::size_t t_out = (9 + 4 - 5) / stride + 1;
    Tensor w = random_tensor({t_out, 3}, rng, -1, 1, false);

    Tape tape;
    tape.backward(weighted_sum(conv1d_depthwise(x, k, stride, &tape), w, &tape));

    auto f = [&]() {
      double s = 0.0;
      Tensor y = conv1d_depthwise(x, k, stride);
      for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * w[i];
      return s;
    };
    REQUIRE(max_rel_err(x.grad(), fd_gradient(x, f)) < 1e-6);
    REQUIRE(max_rel_err(k.grad(), fd_gradient(k, f)) < 1e-6);
  }
}

TEST_CASE("log_softmax rows exponentiate-sum to one, even at extremes") {
  Rng rng(303);
  Tensor x = random_tensor({6, 9}, rng, -5, 5, false);
  // Rows with large offsets must survive via max subtraction.
  for (std::size_t j = 0; j < 9; ++j) x.at(2, j) += 1000.0;
  for (std::size_t j = 0; j < 9; ++j) x.at(3, j) -= 1000.0;

  Tensor y = log_softmax(x);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    double sum_exp = 0.0;
    for (std::size_t j = 0; j < y.cols(); ++j) sum_exp += std::exp(y.at(r, j));
    REQUIRE(std::abs(std::log(sum_exp)) < 1e-12);
  }
}

TEST_CASE("log_softmax gradients match finite differences") {
  Rng rng(404);
  Tensor x = random_tensor({4, 6}, rng, -2, 2);
  Tensor w = random_tensor({4, 6}, rng, -1, 1, false);

  Tape tape;
  tape.backward(weighted_sum(log_softmax(x, &tape), w, &tape));

  auto f = [&]() {
    double s = 0.0;
    Tensor y = log_softmax(x);
    for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * w[i];
    return s;
  };
  REQUIRE(max_rel_err(x.grad(), fd_gradient(x, f)) < 1e-6);
}

TEST_CASE("unary op gradients match finite differences") {
  Rng rng(505);

  struct Case {
    const char* name;
    Tensor (*op)(const Tensor&, Tape*);
    double lo, hi;
  };
  const Case cases[] = {
      {"relu", [](const Tensor& t, Tape* tp) { return relu(t, tp); }, 0.2, 2.0},
      {"relu_neg", [](const Tensor& t, Tape* tp) { return relu(t, tp); }, -2.0, -0.2},
      {"silu", [](const Tensor& t, Tape* tp) { return silu(t, tp); }, -2.0, 2.0},
      {"sqrt", [](const Tensor& t, Tape* tp) { return nsti::sqrt(t, tp); }, 0.5, 2.0},
      {"reciprocal", [](const Tensor& t, Tape* tp) { return reciprocal(t, tp); }, 0.5, 2.0},
  };
  for (const auto& c : cases) {
    DYNAMIC_SECTION(c.name) {
      Tensor x = random_tensor({3, 4}, rng, c.lo, c.hi);
      Tensor w = random_tensor({3, 4}, rng, -1, 1, false);
      Tape tape;
      tape.backward(weighted_sum(c.op(x, &tape), w, &tape));
      auto f = [&]() {
        double s = 0.0;
        Tensor y = c.op(x, nullptr);
        for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * w[i];
        return s;
      };
      REQUIRE(max_rel_err(x.grad(), fd_gradient(x, f)) < 1e-6);
    }
  }
}

TEST_CASE("scale and add_scalar gradients match finite differences") {
  Rng rng(606);
  Tensor x = random_tensor({5}, rng);
  Tensor w = random_tensor({5}, rng, -1, 1, false);
  Tape tape;
  Tensor y = add_scalar(scale(x, 2.5, &tape), -0.75, &tape);
  tape.backward(weighted_sum(y, w, &tape));
  auto f = [&]() {
    double s = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) s += (x[i] * 2.5 - 0.75) * w[i];
    return s;
  };
  REQUIRE(max_rel_err(x.grad(), fd_gradient(x, f)) < 1e-6);
}

TEST_CASE("slice and concat are inverses and route gradients") {
  Tensor x({4, 2}, {0, 1, 2, 3, 4, 5, 6, 7}, true);
  Tape tape;
  Tensor top = slice_rows(x, 0, 2, &tape);
  Tensor bot = slice_rows(x, 2, 4, &tape);
  Tensor back = concat_rows({top, bot}, &tape);
  REQUIRE(back.values() == x.values());

  // Read out only the bottom slice; gradient lands in rows 2..3 alone.
  tape.backward(sum(bot, &tape));
  REQUIRE(x.grad() == std::vector<double>{0, 0, 0, 0, 1, 1, 1, 1});
}

TEST_CASE("slice_rows validates its range") {
  Tensor x({4, 2});
  REQUIRE_THROWS_AS(slice_rows(x, 2, 5), std::invalid_argument);
  REQUIRE_THROWS_AS(slice_rows(x, 3, 2), std::invalid_argument);
}

TEST_CASE("reductions and row-vector broadcasts match finite differences") {
  Rng rng(707);
  Tensor x = random_tensor({4, 3}, rng);
  Tensor v = random_tensor({3}, rng);
  Tensor w = random_tensor({3}, rng, -1, 1, false);

  Tape tape;
  // col_mean(x * v + v) read out against w, plus mean and sum in the mix.
  Tensor h = add_rowvec(mul_rowvec(x, v, &tape), v, &tape);
  Tensor cm = col_mean(h, &tape);
  Tensor loss = add(sum(mul(cm, w, &tape), &tape),
                    add(mean(h, &tape), sum(h, &tape), &tape), &tape);
  tape.backward(loss);

  auto f = [&]() {
    const std::size_t t = 4, c = 3;
    std::vector<double> hh(t * c);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < c; ++j) hh[i * c + j] = x[i * c + j] * v[j] + v[j];
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      double m = 0.0;
      for (std::size_t i = 0; i < t; ++i) m += hh[i * c + j];
      s += (m / t) * w[j];
    }
    double total = 0.0;
    for (double e : hh) total += e;
    return s + total / (t * c) + total;
  };
  REQUIRE(max_rel_err(x.grad(), fd_gradient(x, f)) < 1e-6);
  REQUIRE(max_rel_err(v.grad(), fd_gradient(v, f)) < 1e-6);
}

TEST_CASE("composed network block stays within composition tolerance") {
  Rng rng(808);
  Tensor x = random_tensor({6, 4}, rng, -1, 1, false);
  Tensor w1 = random_tensor({4, 8}, rng, -0.5, 0.5);
  Tensor b1 = random_tensor({8}, rng, -0.1, 0.1);
  Tensor w2 = random_tensor({8, 3}, rng, -0.5, 0.5);

  auto forward = [&](Tape* tape) {
    Tensor h = silu(add_rowvec(matmul(x, w1, tape), b1, tape), tape);
    Tensor y = log_softmax(matmul(h, w2, tape), tape);
    return mean(y, tape);
  };

  Tape tape;
  tape.backward(forward(&tape));

  auto f = [&]() { return forward(nullptr).item(); };
  REQUIRE(max_rel_err(w1.grad(), fd_gradient(w1, f)) < 1e-4);
  REQUIRE(max_rel_err(b1.grad(), fd_gradient(b1, f)) < 1e-4);
  REQUIRE(max_rel_err(w2.grad(), fd_gradient(w2, f)) < 1e-4);
}

TEST_CASE("repeated backward over identical graphs is bit-identical") {
  auto run = [](std::vector<double>& grad_w, std::vector<double>& grad_b) {
    Rng rng(909);
    Tensor x = random_tensor({5, 3}, rng, -1, 1, false);
    Tensor w = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4}, rng);
    Tape tape;
    Tensor y = silu(add_rowvec(matmul(x, w, &tape), b, &tape), &tape);
    tape.backward(mean(log_softmax(y, &tape), &tape));
    grad_w = w.grad();
    grad_b = b.grad();
  };
  std::vector<double> w1, b1, w2, b2;
  run(w1, b1);
  run(w2, b2);
  REQUIRE(w1 == w2);  // bitwise, not approximate
  REQUIRE(b1 == b2);
}
