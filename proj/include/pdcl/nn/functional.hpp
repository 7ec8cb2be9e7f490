#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "pdcl/core/error.hpp"
#include "pdcl/core/tensor.hpp"

namespace pdcl::nn {

template <typename T>
struct LossAndGrad {
  T loss{};
  Tensor<T> grad;
};

// Row-wise softmax of an (N, K) matrix, max-shifted.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  Tensor<T> p(logits.shape());
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    T m = logits.at(i, 0);
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, logits.at(i, j));
    T z{0};
    for (std::size_t j = 0; j < k; ++j) {
      p.at(i, j) = std::exp(logits.at(i, j) - m);
      z += p.at(i, j);
    }
    for (std::size_t j = 0; j < k; ++j) p.at(i, j) /= z;
  }
  return p;
}

// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
template <typename T>
LossAndGrad<T> softmax_cross_entropy(const Tensor<T>& logits,
                                     std::span<const int> labels) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) throw ConfigError("softmax_cross_entropy: label count mismatch");
  LossAndGrad<T> out{T{0}, softmax_rows(logits)};
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    if (y >= k) throw ConfigError("softmax_cross_entropy: label out of range");
    out.loss -= std::log(std::max(out.grad.at(i, y), T(1e-12)));
    out.grad.at(i, y) -= T{1};
  }
  out.loss /= static_cast<T>(n);
  out.grad *= T{1} / static_cast<T>(n);
  return out;
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& m) {
  std::vector<int> out(m.dim(0));
  for (std::size_t i = 0; i < m.dim(0); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < m.dim(1); ++j)
      if (m.at(i, j) > m.at(i, best)) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace pdcl::nn
