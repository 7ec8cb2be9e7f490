#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "pdcl/core/error.hpp"
#include "pdcl/core/log.hpp"
#include "pdcl/core/rng.hpp"
#include "pdcl/core/tensor.hpp"
#include "pdcl/embedding_space.hpp"
#include "pdcl/nn/functional.hpp"
#include "pdcl/nn/optim.hpp"

namespace pdcl {

// Ordered class names; index = label.
class ClassVocabulary {
 public:
  ClassVocabulary() = default;
  explicit ClassVocabulary(std::vector<std::string> names) : names_(std::move(names)) {
    if (names_.size() < 2) throw ConfigError("class vocabulary needs K >= 2 classes");
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (!index_.emplace(names_[i], static_cast<int>(i)).second) {
        throw ConfigError("duplicate class name '" + names_[i] + "'");
      }
    }
  }

  std::size_t size() const { return names_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const std::vector<std::string>& names() const { return names_; }

  int index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw LookupError("class '" + name + "' not in vocabulary");
    return it->second;
  }

 private:
  std::vector<std::string> names_;
  std::map<std::string, int> index_;
};

// The M shared context word vectors prepended to every class name.
template <typename T>
struct ContextBank {
  Tensor<T> vectors;  // M x d

  std::size_t words() const { return vectors.rank() ? vectors.dim(0) : 0; }
  std::size_t width() const { return vectors.rank() > 1 ? vectors.dim(1) : 0; }

  // Zero-mean Gaussian init.
  static ContextBank random(std::size_t words, std::size_t width, double stddev,
                            std::uint64_t seed) {
    ContextBank bank{Tensor<T>({words, width})};
    Rng rng = Rng::derive(seed, 0xC0);
    for (auto& v : bank.vectors.values()) v = static_cast<T>(rng.normal(0.0, stddev));
    return bank;
  }

  std::uint64_t hash() const {
    Fnv1a h;
    h.update(vectors.values());
    return h.digest();
  }
};

// Text-encoder input for one class: context rows, then class-name tokens.
template <typename T>
struct PromptEmbedding {
  Tensor<T> tokens;  // (M + class_len) x d
  std::size_t context_rows = 0;
  int class_index = -1;
};

template <typename T>
PromptEmbedding<T> assemble_prompt(const ContextBank<T>& bank, const std::string& class_name,
                                   const ClassVocabulary& classes,
                                   const TextEncoder<T>& text) {
  const int index = classes.index_of(class_name);
  Tensor<T> cls = text.token_rows(class_name);
  const std::size_t m = bank.words(), d = text.word_dim();
  if (m > 0 && bank.width() != d) {
    throw ConfigError("context width " + std::to_string(bank.width()) +
                      " does not match word width " + std::to_string(d));
  }
  if (m + cls.dim(0) > text.max_tokens()) {
    throw ConfigError("prompt for '" + class_name + "' needs " +
                      std::to_string(m + cls.dim(0)) + " tokens, encoder allows " +
                      std::to_string(text.max_tokens()));
  }
  PromptEmbedding<T> p{Tensor<T>({m + cls.dim(0), d}), m, index};
  if (m > 0) std::copy(bank.vectors.values().begin(), bank.vectors.values().end(), p.tokens.data());
  std::copy(cls.values().begin(), cls.values().end(), p.tokens.data() + m * d);
  return p;
}

// Where class prompts come from: a hand-written template or a learned bank.
// Templates use "{}" for the class name and "{rand}" for a word vector drawn
// fresh on every build.
template <typename T>
class Prompter {
 public:
  static Prompter heuristic(std::string templ, double rand_stddev = 1.0) {
    if (templ.find("{}") == std::string::npos) {
      throw ConfigError("prompt template '" + templ + "' lacks a {} class slot");
    }
    Prompter p;
    p.template_ = std::move(templ);
    p.rand_stddev_ = rand_stddev;
    return p;
  }
  static Prompter learned(ContextBank<T> bank) {
    Prompter p;
    p.bank_ = std::move(bank);
    return p;
  }

  bool is_learned() const { return bank_.has_value(); }
  bool is_stochastic() const {
    return !is_learned() && template_.find("{rand}") != std::string::npos;
  }
  const ContextBank<T>& bank() const { return *bank_; }
  const std::string& template_text() const { return template_; }

  std::string describe() const {
    if (is_learned()) return "learned(M=" + std::to_string(bank_->words()) + ")";
    return "heuristic(\"" + template_ + "\")";
  }

  PromptEmbedding<T> build(const std::string& class_name, const ClassVocabulary& classes,
                           const TextEncoder<T>& text, Rng* rng = nullptr) const {
    if (is_learned()) return assemble_prompt(*bank_, class_name, classes, text);
    const int index = classes.index_of(class_name);
    const std::size_t d = text.word_dim();
    std::vector<T> rows;
    std::size_t count = 0;
    for (const auto& piece : WordVocabulary::split(template_)) {
      if (piece == "{}") {
        Tensor<T> cls = text.token_rows(class_name);
        rows.insert(rows.end(), cls.values().begin(), cls.values().end());
        count += cls.dim(0);
      } else if (piece == "{rand}") {
        if (!rng) throw ConfigError("template with {rand} needs a random stream");
        for (std::size_t k = 0; k < d; ++k) rows.push_back(static_cast<T>(rng->normal(0.0, rand_stddev_)));
        ++count;
      } else {
        Tensor<T> w = text.token_rows(piece);
        rows.insert(rows.end(), w.values().begin(), w.values().end());
        count += w.dim(0);
      }
    }
    if (count > text.max_tokens()) {
      throw ConfigError("heuristic prompt for '" + class_name + "' exceeds max length");
    }
    return PromptEmbedding<T>{Tensor<T>({count, d}, std::move(rows)), 0, index};
  }

 private:
  std::string template_;
  double rand_stddev_ = 1.0;
  std::optional<ContextBank<T>> bank_;
};

// Normalized text features for every class, K x d.
template <typename T>
FeatureBatch<T> class_text_features(const EmbeddingModel<T>& model, const Prompter<T>& prompter,
                                    const ClassVocabulary& classes, Rng* rng = nullptr) {
  Tensor<T> raw({classes.size(), model.embed_dim()});
  for (std::size_t k = 0; k < classes.size(); ++k) {
    auto p = prompter.build(classes.name(k), classes, model.text_encoder(), rng);
    Tensor<T> f = model.text_encoder().encode(p.tokens, nullptr);
    std::copy(f.values().begin(), f.values().end(), raw.item(k).begin());
  }
  return normalize_rows(raw);
}

inline constexpr double kProbabilityFloor = 1e-12;

template <typename T>
struct ContextLossValue {
  T value{};
  bool clamped = false;
};

// -log p(true); p is floored at 1e-12 and the clamp reported.
template <typename T>
ContextLossValue<T> context_loss(std::span<const T> probs, std::span<const T> one_hot) {
  if (probs.size() != one_hot.size()) throw ConfigError("context_loss: length mismatch");
  std::size_t hot = probs.size();
  int hot_count = 0;
  for (std::size_t j = 0; j < one_hot.size(); ++j) {
    if (one_hot[j] == T{1}) {
      hot = j;
      ++hot_count;
    } else if (one_hot[j] != T{0}) {
      throw ContractViolation("context_loss: label vector is not one-hot");
    }
  }
  if (hot_count != 1) throw ContractViolation("context_loss: exactly one label must be hot");
  const T p = probs[hot];
  if (p < T(kProbabilityFloor)) {
    log::warn("context_loss: p(true) below floor, clamped to 1e-12");
    return {static_cast<T>(-std::log(kProbabilityFloor)), true};
  }
  return {-std::log(p), false};
}

template <typename T>
struct ContextObjective {
  T loss{};
  Tensor<T> grad;  // M x d, w.r.t. the context bank
  std::size_t clamped = 0;
};

// Mean context loss over a labelled batch of normalized image features and
// its gradient w.r.t. the bank. Encoders are only read.
template <typename T>
ContextObjective<T> context_objective(const ContextBank<T>& bank,
                                      const FeatureBatch<T>& image_features,
                                      std::span<const int> labels,
                                      const EmbeddingModel<T>& model,
                                      const ClassVocabulary& classes) {
  image_features.require_normalized("context_objective");
  const std::size_t n = image_features.size(), k = classes.size(), d = model.embed_dim();
  if (labels.size() != n) throw ConfigError("context_objective: label count mismatch");
  const auto& text = model.text_encoder();

  std::vector<nn::Tape<T>> tapes(k);
  Tensor<T> raw({k, d});
  for (std::size_t c = 0; c < k; ++c) {
    auto p = assemble_prompt(bank, classes.name(c), classes, text);
    Tensor<T> f = text.encode(p.tokens, &tapes[c]);
    std::copy(f.values().begin(), f.values().end(), raw.item(c).begin());
  }
  FeatureBatch<T> tau = normalize_rows(raw);
  Tensor<T> probs = zero_shot_probs(image_features, tau, model.temperature());

  ContextObjective<T> out{T{0}, Tensor<T>(bank.vectors.shape())};
  Tensor<T> gtau({k, d});
  for (std::size_t i = 0; i < n; ++i) {
    Tensor<T> one_hot({k});
    one_hot[static_cast<std::size_t>(labels[i])] = T{1};
    auto lv = context_loss<T>(probs.item(i), one_hot.values());
    out.loss += lv.value;
    out.clamped += lv.clamped;
    // d(-log p_y)/d logit_j = p_j - [j == y]; logit_j = phi . tau_j / lambda
    for (std::size_t j = 0; j < k; ++j) {
      const T dl = (probs.at(i, j) - one_hot[j]) / (static_cast<T>(n) * model.temperature());
      auto phi = image_features.row(i);
      auto g = gtau.item(j);
      for (std::size_t q = 0; q < d; ++q) g[q] += dl * phi[q];
    }
  }
  out.loss /= static_cast<T>(n);

  Tensor<T> graw = normalize_rows_backward(raw, gtau);
  const std::size_t m = bank.words(), w = text.word_dim();
  for (std::size_t c = 0; c < k; ++c) {
    Tensor<T> gtok = text.backward(slice_rows(graw, c, c + 1), tapes[c]);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t q = 0; q < w; ++q) out.grad.at(r, q) += gtok.at(r, q);
  }
  return out;
}

struct ContextSchedule {
  double lr = 0.002;
  std::size_t max_epochs = 50;
  std::size_t batch = 32;
  double momentum = 0.9;
  std::uint64_t seed = 0;
};

template <typename T>
struct ContextTrainResult {
  ContextBank<T> bank;
  std::vector<double> epoch_loss;
  std::size_t clamped = 0;
};

// Few-shot context optimization. Only the bank changes; the model is const.
template <typename T>
ContextTrainResult<T> train_context(ContextBank<T> bank, const Tensor<T>& images,
                                    std::span<const int> labels, const EmbeddingModel<T>& model,
                                    const ClassVocabulary& classes, const ContextSchedule& schedule) {
  if (labels.empty()) throw DegenerateInputError("train_context: no few-shot samples");
  if (schedule.batch == 0) throw ConfigError("train_context: batch must be >= 1");
  FeatureBatch<T> feats = model.encode_images_chunked(images);
  std::vector<int> label_vec(labels.begin(), labels.end());
  Rng rng = Rng::derive(schedule.seed, 0xC1);
  nn::Sgd<T> opt(schedule.momentum);
  std::vector<Tensor<T>*> params{&bank.vectors};

  ContextTrainResult<T> result;
  for (std::size_t epoch = 0; epoch < schedule.max_epochs; ++epoch) {
    const double lr = nn::cosine_annealed_lr(schedule.lr, epoch, schedule.max_epochs);
    auto order = rng.permutation(labels.size());
    double total = 0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += schedule.batch) {
      const std::size_t e = std::min(order.size(), b + schedule.batch);
      std::span<const std::size_t> idx(order.data() + b, e - b);
      FeatureBatch<T> fb{gather_rows(feats.vectors, idx), true};
      std::vector<int> lb;
      for (auto i : idx) lb.push_back(label_vec[i]);
      auto obj = context_objective(bank, fb, lb, model, classes);
      result.clamped += obj.clamped;
      opt.step(params, {obj.grad}, lr);
      total += double(obj.loss);
      ++batches;
    }
    result.epoch_loss.push_back(total / double(batches));
  }
  result.bank = std::move(bank);
  return result;
}

// Top-1 (%) of zero-shot classification against fixed class text features.
template <typename T>
double zero_shot_accuracy(const EmbeddingModel<T>& model, const FeatureBatch<T>& class_features,
                          const Tensor<T>& images, std::span<const int> labels) {
  if (labels.empty()) throw DegenerateInputError("zero_shot_accuracy: empty set");
  FeatureBatch<T> feats = model.encode_images_chunked(images);
  Tensor<T> probs = zero_shot_probs(feats, class_features, model.temperature());
  auto pred = nn::argmax_rows(probs);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i];
  return 100.0 * double(correct) / double(labels.size());
}

}  // namespace pdcl
