#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

// Dense double-precision tensors with tape-based reverse-mode differentiation.
//
// Tensors are shallow handles onto shared storage (copying a Tensor aliases
// the same buffer; use clone() for a deep copy). Every operation takes an
// optional Tape*; with a tape the op appends a backward record, without one it
// is a pure forward computation. A Tape and the tensors recorded on it belong
// to a single thread; independent tapes on independent threads do not share
// state.

namespace nsti {

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, bool requires_grad = false)
      : d_(std::make_shared<Data>()) {
    d_->shape = std::move(shape);
    d_->values.assign(count(d_->shape), 0.0);
    d_->requires_grad = requires_grad;
  }

  Tensor(std::vector<std::size_t> shape, std::vector<double> values,
         bool requires_grad = false)
      : d_(std::make_shared<Data>()) {
    if (count(shape) != values.size())
      throw std::invalid_argument("tensor data length " +
                                  std::to_string(values.size()) +
                                  " does not match shape " + shape_str(shape));
    d_->shape = std::move(shape);
    d_->values = std::move(values);
    d_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(d_); }
  const std::vector<std::size_t>& shape() const { return d_->shape; }
  std::size_t numel() const { return d_->values.size(); }

  std::size_t rows() const { return d_->shape.empty() ? 0 : d_->shape[0]; }
  std::size_t cols() const {
    return d_->shape.size() < 2 ? (d_->shape.empty() ? 0 : 1) : d_->shape[1];
  }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool b) { d_->requires_grad = b; }

  std::vector<double>& values() { return d_->values; }
  const std::vector<double>& values() const { return d_->values; }

  double& at(std::size_t r, std::size_t c) { return d_->values[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return d_->values[r * cols() + c]; }
  double& operator[](std::size_t i) { return d_->values[i]; }
  double operator[](std::size_t i) const { return d_->values[i]; }

  double item() const {
    if (numel() != 1)
      throw std::invalid_argument("item() on tensor with " +
                                  std::to_string(numel()) + " elements");
    return d_->values[0];
  }

  bool has_grad() const { return !d_->grad.empty(); }
  // Grad buffer, allocated to zeros on first access.
  std::vector<double>& grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0);
    return d_->grad;
  }
  const std::vector<double>& grad() const { return const_cast<Tensor*>(this)->grad(); }
  void zero_grad() {
    if (!d_->grad.empty()) d_->grad.assign(d_->grad.size(), 0.0);
  }

  Tensor clone() const {
    Tensor t;
    t.d_ = std::make_shared<Data>(*d_);
    return t;
  }

  bool same_storage(const Tensor& o) const { return d_ == o.d_; }

  static std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
  }
  std::string shape_str() const { return shape_str(d_->shape); }

 private:
  struct Data {
    std::vector<std::size_t> shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until touched
    bool requires_grad = false;
  };
  std::shared_ptr<Data> d_;

  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
};

// Ordered list of backward records. Forward order is topological by
// construction; backward runs the records once, in reverse.
class Tape {
 public:
  void push(std::function<void()> fn) { records_.push_back(std::move(fn)); }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  void clear() { records_.clear(); }

  // Seeds d(root)/d(root) = 1 and propagates to every recorded input.
  // The tape is cleared afterwards; a new forward pass rebuilds it.
  void backward(Tensor root) {
    if (root.numel() != 1)
      throw std::invalid_argument("backward requires a scalar root, got shape " +
                                  root.shape_str());
    root.grad()[0] = 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    clear();
  }

 private:
  std::vector<std::function<void()>> records_;
};

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                a.shape_str() + " vs " + b.shape_str());
}

inline bool track(const Tape* tape, const Tensor& a) {
  return tape != nullptr && a.requires_grad();
}
inline bool track(const Tape* tape, const Tensor& a, const Tensor& b) {
  return tape != nullptr && (a.requires_grad() || b.requires_grad());
}

}  // namespace detail

inline Tensor add(Tensor a, Tensor b, Tape* tape = nullptr) {
  detail::check_same_shape(a, b, "add");
  Tensor out(a.shape(), detail::track(tape, a, b));
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  if (out.requires_grad()) {
    tape->push([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

inline Tensor sub(Tensor a, Tensor b, Tape* tape = nullptr) {
  detail::check_same_shape(a, b, "sub");
  Tensor out(a.shape(), detail::track(tape, a, b));
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
  if (out.requires_grad()) {
    tape->push([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(Tensor a, Tensor b, Tape* tape = nullptr) {
  detail::check_same_shape(a, b, "mul");
  Tensor out(a.shape(), detail::track(tape, a, b));
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  if (out.requires_grad()) {
    tape->push([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

inline Tensor scale(Tensor a, double c, Tape* tape = nullptr) {
  Tensor out(a.shape(), detail::track(tape, a));
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * c;
  if (out.requires_grad()) {
    tape->push([a, out, c]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      auto& ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

inline Tensor add_scalar(Tensor a, double c, Tape* tape = nullptr) {
  Tensor out(a.shape(), detail::track(tape, a));
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + c;
  if (out.requires_grad()) {
    tape->push([a, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      auto& ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

// a[m x k] * b[k x n] -> [m x n]; backward dA = dC B^T, dB = A^T dC.
inline Tensor matmul(Tensor a, Tensor b, Tape* tape = nullptr) {
  if (a.shape().size() != 2 || b.shape().size() != 2 ||
      a.shape()[1] != b.shape()[0])
    throw std::invalid_argument("matmul: incompatible shapes " + a.shape_str() +
                                " vs " + b.shape_str());
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor out({m, n}, detail::track(tape, a, b));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * b[p * n + j];
    }
  if (out.requires_grad()) {
    tape->push([a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double gv = g[i * n + j];
            for (std::size_t p = 0; p < k; ++p)
              ga[i * k + p] += gv * b[p * n + j];
          }
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j)
              gb[p * n + j] += av * g[i * n + j];
          }
      }
    });
  }
  return out;
}

// Per-channel 1-D convolution of x[T x C] with kernel[K x C], zero padding
// of floor(K/2) on both sides, output [T' x C] with
// T' = floor((T + 2 pad - K) / stride) + 1.
inline Tensor conv1d_depthwise(Tensor x, Tensor kernel,
                               std::size_t stride, Tape* tape = nullptr) {
  if (x.shape().size() != 2 || kernel.shape().size() != 2 ||
      x.shape()[1] != kernel.shape()[1])
    throw std::invalid_argument("conv1d_depthwise: incompatible shapes " +
                                x.shape_str() + " vs " + kernel.shape_str());
  if (stride == 0) throw std::invalid_argument("conv1d_depthwise: stride must be positive");
  const std::size_t t_in = x.shape()[0], c = x.shape()[1], k = kernel.shape()[0];
  const std::size_t pad = k / 2;
  if (k > t_in + 2 * pad)
    throw std::invalid_argument("conv1d_depthwise: kernel " + kernel.shape_str() +
                                " longer than padded input " + x.shape_str());
  const std::size_t t_out = (t_in + 2 * pad - k) / stride + 1;
  Tensor out({t_out, c}, detail::track(tape, x, kernel));
  for (std::size_t to = 0; to < t_out; ++to)
    for (std::size_t kk = 0; kk < k; ++kk) {
      const std::ptrdiff_t ti =
          static_cast<std::ptrdiff_t>(to * stride + kk) - static_cast<std::ptrdiff_t>(pad);
      if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(t_in)) continue;
      for (std::size_t ch = 0; ch < c; ++ch)
        out[to * c + ch] += x[static_cast<std::size_t>(ti) * c + ch] * kernel[kk * c + ch];
    }
  if (out.requires_grad()) {
    tape->push([x, kernel, out, stride, t_in, c, k, pad, t_out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      for (std::size_t to = 0; to < t_out; ++to)
        for (std::size_t kk = 0; kk < k; ++kk) {
          const std::ptrdiff_t ti =
              static_cast<std::ptrdiff_t>(to * stride + kk) - static_cast<std::ptrdiff_t>(pad);
          if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(t_in)) continue;
          const std::size_t xi = static_cast<std::size_t>(ti);
          if (x.requires_grad()) {
            auto& gx = x.grad();
            for (std::size_t ch = 0; ch < c; ++ch)
              gx[xi * c + ch] += g[to * c + ch] * kernel[kk * c + ch];
          }
          if (kernel.requires_grad()) {
            auto& gk = kernel.grad();
            for (std::size_t ch = 0; ch < c; ++ch)
              gk[kk * c + ch] += g[to * c + ch] * x[xi * c + ch];
          }
        }
    });
  }
  return out;
}

// Row-wise log softmax over the last dimension, stabilized by max
// subtraction; every output row satisfies logsumexp(row) == 0.
inline Tensor log_softmax(Tensor x, Tape* tape = nullptr) {
  if (x.shape().empty() || x.shape().back() == 0)
    throw std::invalid_argument("log_softmax: empty last dimension " + x.shape_str());
  const std::size_t v = x.shape().back();
  const std::size_t rows = x.numel() / v;
  Tensor out(x.shape(), detail::track(tape, x));
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = x.values().data() + r * v;
    double* yo = out.values().data() + r * v;
    double mx = xi[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, xi[j]);
    if (!std::isfinite(mx))
      throw std::runtime_error("log_softmax: non-finite input");
    double lse = 0.0;
    for (std::size_t j = 0; j < v; ++j) lse += std::exp(xi[j] - mx);
    lse = mx + std::log(lse);
    for (std::size_t j = 0; j < v; ++j) yo[j] = xi[j] - lse;
  }
  if (out.requires_grad()) {
    tape->push([x, out, rows, v]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      auto& gx = x.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double gsum = 0.0;
        for (std::size_t j = 0; j < v; ++j) gsum += g[r * v + j];
        for (std::size_t j = 0; j < v; ++j)
          gx[r * v + j] += g[r * v + j] - std::exp(out[r * v + j]) * gsum;
      }
    });
  }
  return out;
}

inline Tensor relu(Tensor x, Tape* tape = nullptr) {
  Tensor out(x.shape(), detail::track(tape, x));
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  if (out.requires_grad()) {
    tape->push([x, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > 0.0) gx[i] += g[i];
    });
  }
  return out;
}

// SiLU activation x * sigmoid(x); this project's pick for the smooth
// activation slot.
inline Tensor silu(Tensor x, Tape* tape = nullptr) {
  Tensor out(x.shape(), detail::track(tape, x));
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-x[i]));
    out[i] = x[i] * s;
  }
  if (out.requires_grad()) {
    tape->push([x, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-x[i]));
        gx[i] += g[i] * (s + x[i] * s * (1.0 - s));
      }
    });
  }
  return out;
}

inline Tensor sqrt(Tensor x, Tape* tape = nullptr) {
  Tensor out(x.shape(), detail::track(tape, x));
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = std::sqrt(x[i]);
  if (out.requires_grad()) {
    tape->push([x, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * 0.5 / out[i];
    });
  }
  return out;
}

inline Tensor reciprocal(Tensor x, Tape* tape = nullptr) {
  Tensor out(x.shape(), detail::track(tape, x));
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = 1.0 / x[i];
  if (out.requires_grad()) {
    tape->push([x, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= g[i] * out[i] * out[i];
    });
  }
  return out;
}

// Rows [r0, r1) of a 2-D tensor.
inline Tensor slice_rows(Tensor x, std::size_t r0, std::size_t r1,
                         Tape* tape = nullptr) {
  if (x.shape().size() != 2 || r1 > x.rows() || r0 > r1)
    throw std::invalid_argument("slice_rows: invalid range [" + std::to_string(r0) +
                                ", " + std::to_string(r1) + ") for " + x.shape_str());
  const std::size_t c = x.cols();
  Tensor out({r1 - r0, c}, detail::track(tape, x));
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[r0 * c + i];
  if (out.requires_grad()) {
    tape->push([x, out, r0, c]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[r0 * c + i] += g[i];
    });
  }
  return out;
}

// Concatenation along the time (row) axis.
inline Tensor concat_rows(std::vector<Tensor> parts, Tape* tape = nullptr) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (p.shape().size() != 2 || p.cols() != c)
      throw std::invalid_argument("concat_rows: shape mismatch " +
                                  parts[0].shape_str() + " vs " + p.shape_str());
    total += p.rows();
    needs = needs || p.requires_grad();
  }
  Tensor out({total, c}, tape != nullptr && needs);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < p.numel(); ++i) out[off + i] = p[i];
    off += p.numel();
  }
  if (out.requires_grad()) {
    tape->push([parts, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      std::size_t off = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          auto& gp = p.grad();
          for (std::size_t i = 0; i < p.numel(); ++i) gp[i] += g[off + i];
        }
        off += p.numel();
      }
    });
  }
  return out;
}

inline Tensor sum(Tensor x, Tape* tape = nullptr) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) s += x[i];
  Tensor out = Tensor::scalar(s, detail::track(tape, x));
  if (out.requires_grad()) {
    tape->push([x, out]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0];
      auto& gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

inline Tensor mean(Tensor x, Tape* tape = nullptr) {
  const double inv = 1.0 / static_cast<double>(x.numel());
  double s = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) s += x[i];
  Tensor out = Tensor::scalar(s * inv, detail::track(tape, x));
  if (out.requires_grad()) {
    tape->push([x, out, inv]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0] * inv;
      auto& gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

// Column means of x[T x C] -> [C].
inline Tensor col_mean(Tensor x, Tape* tape = nullptr) {
  if (x.shape().size() != 2 || x.rows() == 0)
    throw std::invalid_argument("col_mean: needs a non-empty 2-D tensor, got " +
                                x.shape_str());
  const std::size_t t = x.rows(), c = x.cols();
  const double inv = 1.0 / static_cast<double>(t);
  Tensor out({c}, detail::track(tape, x));
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += x[i * c + j];
  for (std::size_t j = 0; j < c; ++j) out[j] *= inv;
  if (out.requires_grad()) {
    tape->push([x, out, t, c, inv]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j] * inv;
    });
  }
  return out;
}

// x[T x C] + v[C], broadcast over rows.
inline Tensor add_rowvec(Tensor x, Tensor v, Tape* tape = nullptr) {
  if (x.shape().size() != 2 || v.numel() != x.cols())
    throw std::invalid_argument("add_rowvec: incompatible " + x.shape_str() +
                                " vs " + v.shape_str());
  const std::size_t t = x.rows(), c = x.cols();
  Tensor out({t, c}, detail::track(tape, x, v));
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] + v[j];
  if (out.requires_grad()) {
    tape->push([x, v, out, t, c]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      if (x.requires_grad()) {
        auto& gx = x.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (v.requires_grad()) {
        auto& gv = v.grad();
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < c; ++j) gv[j] += g[i * c + j];
      }
    });
  }
  return out;
}

// x[T x C] * v[C], broadcast over rows.
inline Tensor mul_rowvec(Tensor x, Tensor v, Tape* tape = nullptr) {
  if (x.shape().size() != 2 || v.numel() != x.cols())
    throw std::invalid_argument("mul_rowvec: incompatible " + x.shape_str() +
                                " vs " + v.shape_str());
  const std::size_t t = x.rows(), c = x.cols();
  Tensor out({t, c}, detail::track(tape, x, v));
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] * v[j];
  if (out.requires_grad()) {
    tape->push([x, v, out, t, c]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      if (x.requires_grad()) {
        auto& gx = x.grad();
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[i * c + j] * v[j];
      }
      if (v.requires_grad()) {
        auto& gv = v.grad();
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < c; ++j) gv[j] += g[i * c + j] * x[i * c + j];
      }
    });
  }
  return out;
}

}  // namespace nsti
