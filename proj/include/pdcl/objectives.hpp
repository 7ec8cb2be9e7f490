#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "pdcl/core/error.hpp"
#include "pdcl/core/rng.hpp"
#include "pdcl/core/tensor.hpp"
#include "pdcl/embedding_space.hpp"
#include "pdcl/nn/layers.hpp"

namespace pdcl {

// Frozen classifier tapped at a named mid layer. Features are flattened per
// sample and live in the classifier's own space; they never meet
// embedding-space features in a distance computation.
template <typename T>
class SurrogateHandle {
 public:
  SurrogateHandle(const nn::Network<T>& net, std::string tap)
      : net_(&net), tap_(std::move(tap)), end_(net.index_of(tap_) + 1) {}

  const std::string& tap() const { return tap_; }
  const nn::Network<T>& network() const { return *net_; }

  Tensor<T> features(const Tensor<T>& x, nn::Tape<T>* tape) const {
    Tensor<T> f = net_->forward_to(x, tape, end_);
    return std::move(f).reshaped({f.dim(0), f.item_size()});
  }

  // dL/dx from dL/d(features); the surrogate's weights receive nothing.
  Tensor<T> backward(const Tensor<T>& grad_features, const Shape& feature_shape,
                     nn::Tape<T>& tape) const {
    return net_->backward_from(grad_features.reshaped(feature_shape), tape, {}, end_);
  }

  Shape feature_shape(const Tensor<T>& x) const {
    return net_->forward_to(slice_rows(x, 0, 1), nullptr, end_).shape();
  }

 private:
  const nn::Network<T>* net_;
  std::string tap_;
  std::size_t end_;
};

// Mean over the batch of cos(f_adv_i, f_clean_i).
template <typename T>
T surrogate_loss(const Tensor<T>& f_adv, const Tensor<T>& f_clean) {
  f_adv.require_same_shape(f_clean, "surrogate_loss");
  const std::size_t n = f_adv.dim(0);
  if (n == 0) throw DegenerateInputError("surrogate_loss: empty batch");
  T acc{0};
  for (std::size_t i = 0; i < n; ++i) acc += cosine_sim(f_adv.item(i), f_clean.item(i));
  return acc / static_cast<T>(n);
}

// d surrogate_loss / d f_adv.
template <typename T>
Tensor<T> surrogate_loss_grad(const Tensor<T>& f_adv, const Tensor<T>& f_clean) {
  f_adv.require_same_shape(f_clean, "surrogate_loss_grad");
  const std::size_t n = f_adv.dim(0);
  Tensor<T> g(f_adv.shape());
  for (std::size_t i = 0; i < n; ++i) {
    auto a = f_adv.item(i);
    auto b = f_clean.item(i);
    const T na = l2_norm(a), nb = l2_norm(b);
    if (!(na > T{0}) || !(nb > T{0})) throw DegenerateInputError("surrogate_loss: zero feature row");
    const T c = dot(a, b) / (na * nb);
    auto out = g.item(i);
    for (std::size_t k = 0; k < a.size(); ++k) {
      out[k] = (b[k] / (na * nb) - c * a[k] / (na * na)) / static_cast<T>(n);
    }
  }
  return g;
}

enum class CandidateScope {
  SharedPerBatch,  // one candidate set per batch, argmin per sample
  PerSample,
};

struct LossConfig {
  double margin = 1.0;
  std::size_t candidates = 16;
  bool exclude_gt = true;
  CandidateScope scope = CandidateScope::SharedPerBatch;

  void validate(std::size_t num_classes) const {
    if (!(margin > 0.0)) throw ConfigError("loss: margin must be > 0");
    if (candidates == 0) throw ConfigError("loss: candidate count must be >= 1");
    const std::size_t pool =
        scope == CandidateScope::PerSample && exclude_gt ? num_classes - 1 : num_classes;
    if (candidates > pool) {
      throw ConfigError("loss: " + std::to_string(candidates) + " candidates requested but only " +
                        std::to_string(pool) + " available");
    }
    if (exclude_gt && scope == CandidateScope::SharedPerBatch && candidates < 2) {
      throw ConfigError("loss: excluding the ground truth needs at least 2 shared candidates");
    }
  }
};

// Least cosine-similar candidate; ties go to the lowest class index.
template <typename T>
int argmin_cosine(std::span<const T> phi, const FeatureBatch<T>& text_bank,
                  std::span<const std::size_t> candidates, int exclude = -1) {
  int best = -1;
  T best_cos = std::numeric_limits<T>::infinity();
  for (std::size_t c : candidates) {
    if (static_cast<int>(c) == exclude) continue;
    const T cs = cosine_sim(phi, text_bank.row(c));
    if (cs < best_cos || (cs == best_cos && static_cast<int>(c) < best)) {
      best_cos = cs;
      best = static_cast<int>(c);
    }
  }
  if (best < 0) throw ConfigError("select_adversarial_label: no eligible candidate");
  return best;
}

// Adversarial labels y': per sample, the sampled candidate whose text feature
// is least similar to the clean image feature.
template <typename T>
std::vector<int> select_adversarial_label(const FeatureBatch<T>& phi_clean,
                                          const FeatureBatch<T>& text_bank,
                                          std::span<const int> gt_labels,
                                          const LossConfig& cfg, Rng& rng) {
  text_bank.require_normalized("select_adversarial_label(text)");
  phi_clean.validate("select_adversarial_label(image)");
  const std::size_t k = text_bank.size();
  cfg.validate(k);
  if (gt_labels.size() != phi_clean.size()) {
    throw ConfigError("select_adversarial_label: label count mismatch");
  }
  std::vector<int> out(phi_clean.size());
  if (cfg.scope == CandidateScope::SharedPerBatch) {
    auto cand = rng.sample_without_replacement(k, cfg.candidates);
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = argmin_cosine(phi_clean.row(i), text_bank, cand,
                             cfg.exclude_gt ? gt_labels[i] : -1);
    }
    return out;
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::vector<std::size_t> cand;
    if (cfg.exclude_gt) {
      auto picks = rng.sample_without_replacement(k - 1, cfg.candidates);
      for (auto p : picks) cand.push_back(p >= std::size_t(gt_labels[i]) ? p + 1 : p);
    } else {
      cand = rng.sample_without_replacement(k, cfg.candidates);
    }
    out[i] = argmin_cosine(phi_clean.row(i), text_bank, cand, -1);
  }
  return out;
}

template <typename T>
std::vector<int> select_adversarial_label(const FeatureBatch<T>& phi_clean,
                                          const FeatureBatch<T>& text_bank,
                                          std::span<const int> gt_labels,
                                          const LossConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return select_adversarial_label(phi_clean, text_bank, gt_labels, cfg, rng);
}

namespace detail {
template <typename T>
void require_pdcl_inputs(const FeatureBatch<T>& a, const FeatureBatch<T>& p,
                         const FeatureBatch<T>& g, T alpha) {
  a.require_normalized("pdcl_loss(anchor)");
  p.require_normalized("pdcl_loss(positive)");
  g.require_normalized("pdcl_loss(negative)");
  if (a.size() != p.size() || a.size() != g.size() || a.dim() != p.dim() || a.dim() != g.dim()) {
    throw ContractViolation("pdcl_loss: batches must share row count and width");
  }
  if (a.size() == 0) throw DegenerateInputError("pdcl_loss: empty batch");
  if (!(alpha > T{0})) throw ConfigError("pdcl_loss: margin must be > 0");
}

template <typename T>
T sq_dist(std::span<const T> a, std::span<const T> b) {
  T acc{0};
  for (std::size_t k = 0; k < a.size(); ++k) acc += (a[k] - b[k]) * (a[k] - b[k]);
  return acc;
}
}  // namespace detail

// Mean over rows of |phi' - tau'|^2 + max(0, alpha - |phi' - tau|)^2.
// phi' is the anchor, tau' (adversarial class text) the positive, tau
// (ground-truth class text) the negative.
template <typename T>
T pdcl_loss(const FeatureBatch<T>& phi_adv, const FeatureBatch<T>& tau_adv,
            const FeatureBatch<T>& tau_gt, T alpha) {
  detail::require_pdcl_inputs(phi_adv, tau_adv, tau_gt, alpha);
  T acc{0};
  for (std::size_t i = 0; i < phi_adv.size(); ++i) {
    const T pull = detail::sq_dist(phi_adv.row(i), tau_adv.row(i));
    const T gap = std::max(T{0}, alpha - std::sqrt(detail::sq_dist(phi_adv.row(i), tau_gt.row(i))));
    acc += pull + gap * gap;
  }
  return acc / static_cast<T>(phi_adv.size());
}

// d pdcl_loss / d phi'. At phi' == tau the margin term has no direction and
// contributes zero.
template <typename T>
Tensor<T> pdcl_loss_grad(const FeatureBatch<T>& phi_adv, const FeatureBatch<T>& tau_adv,
                         const FeatureBatch<T>& tau_gt, T alpha) {
  detail::require_pdcl_inputs(phi_adv, tau_adv, tau_gt, alpha);
  const std::size_t n = phi_adv.size(), d = phi_adv.dim();
  const T inv_n = T{1} / static_cast<T>(n);
  Tensor<T> g({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    auto a = phi_adv.row(i);
    auto p = tau_adv.row(i);
    auto q = tau_gt.row(i);
    const T dist = std::sqrt(detail::sq_dist(a, q));
    const T gap = alpha - dist;
    auto out = g.item(i);
    for (std::size_t k = 0; k < d; ++k) {
      T v = T{2} * (a[k] - p[k]);
      if (gap > T{0} && dist > T{0}) v -= T{2} * gap * (a[k] - q[k]) / dist;
      out[k] = v * inv_n;
    }
  }
  return g;
}

// Unweighted sum; a non-finite result aborts training.
template <typename T>
T total_loss(T l_surr, T l_pdcl) {
  const T total = l_surr + l_pdcl;
  if (!std::isfinite(total)) {
    throw TrainingAborted("non-finite loss (surrogate=" + std::to_string(double(l_surr)) +
                          ", pdcl=" + std::to_string(double(l_pdcl)) + ")");
  }
  return total;
}

// Rows of `bank` selected by `labels`, keeping the normalized flag.
template <typename T>
FeatureBatch<T> gather_features(const FeatureBatch<T>& bank, std::span<const int> labels) {
  std::vector<std::size_t> rows(labels.begin(), labels.end());
  return FeatureBatch<T>{gather_rows(bank.vectors, rows), bank.normalized};
}

}  // namespace pdcl
