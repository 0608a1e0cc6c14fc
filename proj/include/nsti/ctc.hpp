#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "nsti/autodiff.hpp"

// CTC loss over a lattice of per-frame log-probabilities, shape [T x (V+1)]
// with the blank in the last column. Forward-backward runs in the log domain
// over the blank-interleaved extended label sequence; the gradient with
// respect to pre-softmax logits is softmax(logits) minus the state-posterior
// marginals.

namespace nsti::ctc {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double logsumexp2(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = a > b ? a : b;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

inline double logsumexp3(double a, double b, double c) {
  return logsumexp2(logsumexp2(a, b), c);
}

// Fewest frames that can carry the label sequence: one per label plus one
// separating blank per adjacent equal pair.
inline std::size_t min_frames(const std::vector<int>& labels) {
  std::size_t n = labels.size();
  for (std::size_t i = 1; i < labels.size(); ++i)
    if (labels[i] == labels[i - 1]) ++n;
  return n;
}

inline bool feasible(std::size_t frames, const std::vector<int>& labels) {
  return frames >= min_frames(labels);
}

namespace detail {

inline void validate(const Tensor& lattice, const std::vector<int>& labels) {
  if (lattice.shape().size() != 2 || lattice.rows() == 0 || lattice.cols() < 2)
    throw std::invalid_argument("ctc: lattice must be [T x (V+1)] with V >= 1, got " +
                                lattice.shape_str());
  if (labels.empty()) throw std::invalid_argument("ctc: empty label sequence");
  const int v = static_cast<int>(lattice.cols()) - 1;
  for (int l : labels)
    if (l < 0 || l >= v)
      throw std::invalid_argument("ctc: label " + std::to_string(l) +
                                  " outside vocabulary of size " + std::to_string(v));
  if (!feasible(lattice.rows(), labels))
    throw std::invalid_argument("ctc: " + std::to_string(labels.size()) +
                                " labels need " + std::to_string(min_frames(labels)) +
                                " frames, lattice has " + std::to_string(lattice.rows()));
}

// Returns -log P(labels | lattice) and fills q (row-major [T x (V+1)]) with
// the per-frame symbol posteriors; each row of q sums to 1.
inline double forward_backward(const Tensor& lattice, const std::vector<int>& labels,
                               std::vector<double>& q) {
  validate(lattice, labels);
  const std::size_t t_len = lattice.rows(), cols = lattice.cols();
  const int blank = static_cast<int>(cols) - 1;
  const std::size_t s_len = 2 * labels.size() + 1;

  std::vector<int> ext(s_len, blank);
  for (std::size_t i = 0; i < labels.size(); ++i) ext[2 * i + 1] = labels[i];

  auto allow_skip = [&](std::size_t s) {
    return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
  };

  // alpha[t][s] includes the emission at frame t.
  std::vector<double> alpha(t_len * s_len, kNegInf);
  alpha[0] = lattice.at(0, ext[0]);
  if (s_len > 1) alpha[1] = lattice.at(0, ext[1]);
  for (std::size_t t = 1; t < t_len; ++t)
    for (std::size_t s = 0; s < s_len; ++s) {
      const double stay = alpha[(t - 1) * s_len + s];
      const double step = s >= 1 ? alpha[(t - 1) * s_len + s - 1] : kNegInf;
      const double skip = allow_skip(s) ? alpha[(t - 1) * s_len + s - 2] : kNegInf;
      alpha[t * s_len + s] = logsumexp3(stay, step, skip) +
                             lattice.at(t, ext[s]);
    }

  const double log_p = s_len > 1
      ? logsumexp2(alpha[(t_len - 1) * s_len + s_len - 1],
                   alpha[(t_len - 1) * s_len + s_len - 2])
      : alpha[(t_len - 1) * s_len + s_len - 1];
  if (!(log_p > kNegInf))
    throw std::runtime_error("ctc: label sequence has zero probability");

  // beta[t][s] excludes the emission at frame t (suffix from t+1 on).
  std::vector<double> beta(t_len * s_len, kNegInf);
  beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
  if (s_len > 1) beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
  for (std::size_t t = t_len - 1; t-- > 0;)
    for (std::size_t s = 0; s < s_len; ++s) {
      const double stay = beta[(t + 1) * s_len + s] + lattice.at(t + 1, ext[s]);
      const double step = s + 1 < s_len
          ? beta[(t + 1) * s_len + s + 1] + lattice.at(t + 1, ext[s + 1])
          : kNegInf;
      const double skip = s + 2 < s_len && allow_skip(s + 2)
          ? beta[(t + 1) * s_len + s + 2] + lattice.at(t + 1, ext[s + 2])
          : kNegInf;
      beta[t * s_len + s] = logsumexp3(stay, step, skip);
    }

  q.assign(t_len * cols, 0.0);
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t s = 0; s < s_len; ++s) {
      const double w = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
      if (w > kNegInf)
        q[t * cols + static_cast<std::size_t>(ext[s])] += std::exp(w);
    }
  return -log_p;
}

}  // namespace detail

struct LossResult {
  double loss;
  Tensor grad_logits;  // d loss / d pre-softmax logits: softmax - posterior
};

// Plain loss with the analytic logit gradient, no tape involved.
inline LossResult loss(const Tensor& lattice, const std::vector<int>& labels) {
  std::vector<double> q;
  const double l = detail::forward_backward(lattice, labels, q);
  Tensor grad(lattice.shape());
  for (std::size_t i = 0; i < lattice.numel(); ++i)
    grad[i] = std::exp(lattice[i]) - q[i];
  return {l, grad};
}

// Tape node producing the scalar loss; backward adds -posterior to the
// lattice gradient (chaining through log_softmax yields softmax - posterior
// at the logits).
inline Tensor loss_node(Tensor lattice, const std::vector<int>& labels,
                        Tape* tape) {
  std::vector<double> q;
  const double l = detail::forward_backward(lattice, labels, q);
  Tensor out = Tensor::scalar(l, nsti::detail::track(tape, lattice));
  if (out.requires_grad()) {
    tape->push([lattice, out, q = std::move(q)]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0];
      auto& gl = lattice.grad();
      for (std::size_t i = 0; i < gl.size(); ++i) gl[i] -= g * q[i];
    });
  }
  return out;
}

struct Decoded {
  std::vector<int> labels;      // best path, repeats collapsed, blanks removed
  double blank_ratio;           // fraction of frames whose argmax is blank
};

// Greedy best-path decode; ties resolve to the lowest index.
inline Decoded greedy_decode(const Tensor& lattice) {
  if (lattice.shape().size() != 2 || lattice.rows() == 0 || lattice.cols() < 2)
    throw std::invalid_argument("ctc: lattice must be [T x (V+1)] with V >= 1, got " +
                                lattice.shape_str());
  const std::size_t t_len = lattice.rows(), cols = lattice.cols();
  const int blank = static_cast<int>(cols) - 1;
  Decoded out;
  std::size_t blanks = 0;
  int prev = -1;
  for (std::size_t t = 0; t < t_len; ++t) {
    int best = 0;
    for (std::size_t j = 1; j < cols; ++j)
      if (lattice.at(t, j) > lattice.at(t, best)) best = static_cast<int>(j);
    if (best == blank) ++blanks;
    if (best != prev && best != blank) out.labels.push_back(best);
    prev = best;
  }
  out.blank_ratio = static_cast<double>(blanks) / static_cast<double>(t_len);
  return out;
}

}  // namespace nsti::ctc
