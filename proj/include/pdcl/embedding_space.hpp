#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pdcl/core/error.hpp"
#include "pdcl/core/hash.hpp"
#include "pdcl/core/tensor.hpp"
#include "pdcl/nn/layers.hpp"

namespace pdcl {

// Row-norm tolerance for "normalized" batches: 1e-6, loosened to the
// precision floor of the scalar type.
template <typename T>
constexpr double unit_norm_tolerance() {
  return std::max(1e-6, 100.0 * static_cast<double>(std::numeric_limits<T>::epsilon()));
}

// n x d embedding vectors.
template <typename T>
struct FeatureBatch {
  Tensor<T> vectors;
  bool normalized = false;

  std::size_t size() const { return vectors.rank() ? vectors.dim(0) : 0; }
  std::size_t dim() const { return vectors.rank() > 1 ? vectors.dim(1) : 0; }
  std::span<const T> row(std::size_t i) const { return vectors.item(i); }

  void validate(const char* who) const {
    if (vectors.rank() != 2) {
      throw ContractViolation(std::string(who) + ": feature batch must be n x d");
    }
    if (!vectors.all_finite()) {
      throw ContractViolation(std::string(who) + ": non-finite feature entries");
    }
  }

  void require_normalized(const char* who) const {
    validate(who);
    if (!normalized) {
      throw ContractViolation(std::string(who) + ": features must be l2-normalized");
    }
    for (std::size_t i = 0; i < size(); ++i) {
      double sq = 0;
      for (T v : row(i)) sq += double(v) * double(v);
      if (std::abs(std::sqrt(sq) - 1.0) > unit_norm_tolerance<T>()) {
        throw ContractViolation(std::string(who) + ": row " + std::to_string(i) +
                                " is flagged normalized but has norm " +
                                std::to_string(std::sqrt(sq)));
      }
    }
  }
};

template <typename T>
T l2_norm(std::span<const T> v) {
  T sq{0};
  for (T x : v) sq += x * x;
  return std::sqrt(sq);
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  T acc{0};
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
std::vector<T> l2_normalize(std::span<const T> v) {
  const T n = l2_norm(v);
  if (!(n > T{0})) {
    throw DegenerateInputError("l2_normalize: zero vector (encoder or data fault)");
  }
  std::vector<T> out(v.begin(), v.end());
  for (auto& x : out) x /= n;
  return out;
}

template <typename T>
T cosine_sim(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw ConfigError("cosine_sim: dimension mismatch");
  const T na = l2_norm(a), nb = l2_norm(b);
  if (!(na > T{0}) || !(nb > T{0})) {
    throw DegenerateInputError("cosine_sim: zero vector");
  }
  return std::clamp(dot(a, b) / (na * nb), T{-1}, T{1});
}

// Normalizes every row; the result is flagged normalized.
template <typename T>
FeatureBatch<T> normalize_rows(const Tensor<T>& raw) {
  FeatureBatch<T> out{raw, true};
  for (std::size_t i = 0; i < raw.dim(0); ++i) {
    auto unit = l2_normalize(raw.item(i));
    std::copy(unit.begin(), unit.end(), out.vectors.item(i).begin());
  }
  return out;
}

// Chain rule through y = v / |v|:  dv = (g - y (y.g)) / |v|.
template <typename T>
Tensor<T> normalize_rows_backward(const Tensor<T>& raw, const Tensor<T>& grad_unit) {
  Tensor<T> g(raw.shape());
  for (std::size_t i = 0; i < raw.dim(0); ++i) {
    auto v = raw.item(i);
    auto gu = grad_unit.item(i);
    const T n = l2_norm(v);
    T yg{0};
    for (std::size_t k = 0; k < v.size(); ++k) yg += v[k] / n * gu[k];
    auto out = g.item(i);
    for (std::size_t k = 0; k < v.size(); ++k) out[k] = (gu[k] - v[k] / n * yg) / n;
  }
  return g;
}

// n x K cosine similarities between normalized batches.
template <typename T>
Tensor<T> cosine_matrix(const FeatureBatch<T>& a, const FeatureBatch<T>& b) {
  if (a.dim() != b.dim()) throw ConfigError("cosine_matrix: dimension mismatch");
  Tensor<T> out({a.size(), b.size()});
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) out.at(i, j) = dot(a.row(i), b.row(j));
  return out;
}

// Softmax over cos(text_j, image_i) / lambda, one row per image.
template <typename T>
Tensor<T> zero_shot_probs(const FeatureBatch<T>& image_features,
                          const FeatureBatch<T>& class_text_features, T lambda) {
  if (!(lambda > T{0})) throw ConfigError("zero_shot_probs: temperature must be > 0");
  image_features.require_normalized("zero_shot_probs(image)");
  class_text_features.require_normalized("zero_shot_probs(text)");
  if (class_text_features.size() < 2) {
    throw ConfigError("zero_shot_probs: need at least two classes");
  }
  Tensor<T> logits = cosine_matrix(image_features, class_text_features);
  logits *= T{1} / lambda;
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    T m = logits.at(i, 0);
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, logits.at(i, j));
    T z{0};
    for (std::size_t j = 0; j < k; ++j) z += (logits.at(i, j) = std::exp(logits.at(i, j) - m));
    for (std::size_t j = 0; j < k; ++j) logits.at(i, j) /= z;
  }
  return logits;
}

// Word-level tokenizer over a closed vocabulary. Words are lower-cased and
// split on whitespace and underscores.
class WordVocabulary {
 public:
  WordVocabulary() = default;
  explicit WordVocabulary(std::vector<std::string> words) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i) {
      if (!index_.emplace(words_[i], i).second) {
        throw ConfigError("duplicate vocabulary word '" + words_[i] + "'");
      }
    }
  }

  static std::vector<std::string> split(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
      if (std::isspace(static_cast<unsigned char>(c)) || c == '_') {
        if (!cur.empty()) out.push_back(std::move(cur));
        cur.clear();
      } else {
        cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
      }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
  }

  std::vector<std::size_t> tokenize(const std::string& text) const {
    std::vector<std::size_t> ids;
    for (const auto& w : split(text)) {
      auto it = index_.find(w);
      if (it == index_.end()) throw LookupError("word '" + w + "' not in vocabulary");
      ids.push_back(it->second);
    }
    return ids;
  }

  bool contains(const std::string& word) const { return index_.count(word) > 0; }
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, std::size_t> index_;
};

// Token-averaging text encoder: word table lookup, then a small MLP over the
// mean token embedding. Input is a (tokens x word_dim) matrix so learned
// context rows can be fed in directly.
template <typename T>
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(WordVocabulary vocab, std::size_t word_dim, nn::Network<T> body,
              std::size_t max_tokens)
      : vocab_(std::move(vocab)),
        word_table_({vocab_.size(), word_dim}),
        body_(std::move(body)),
        max_tokens_(max_tokens) {}

  const WordVocabulary& vocab() const { return vocab_; }
  std::size_t word_dim() const { return word_table_.dim(1); }
  std::size_t max_tokens() const { return max_tokens_; }
  Tensor<T>& word_table() { return word_table_; }
  const Tensor<T>& word_table() const { return word_table_; }
  nn::Network<T>& body() { return body_; }
  const nn::Network<T>& body() const { return body_; }

  // Frozen word embeddings for `text`, one row per token.
  Tensor<T> token_rows(const std::string& text) const {
    auto ids = vocab_.tokenize(text);
    Tensor<T> rows({ids.size(), word_dim()});
    for (std::size_t t = 0; t < ids.size(); ++t) {
      auto src = word_table_.item(ids[t]);
      std::copy(src.begin(), src.end(), rows.item(t).begin());
    }
    return rows;
  }

  // tokens: L x word_dim -> 1 x embed_dim (unnormalized).
  Tensor<T> encode(const Tensor<T>& tokens, nn::Tape<T>* tape) const {
    if (tokens.rank() != 2 || tokens.dim(1) != word_dim()) {
      throw ConfigError("text encoder: expected L x " + std::to_string(word_dim()) +
                        " token matrix, got " + shape_str(tokens.shape()));
    }
    if (tokens.dim(0) > max_tokens_) {
      throw ConfigError("text encoder: prompt of " + std::to_string(tokens.dim(0)) +
                        " tokens exceeds max length " + std::to_string(max_tokens_));
    }
    return body_.forward(tokens.reshaped({1, tokens.dim(0), tokens.dim(1)}), tape);
  }

  // Gradient w.r.t. the token matrix; param grads only if `grads` non-empty.
  Tensor<T> backward(const Tensor<T>& grad_feature, nn::Tape<T>& tape,
                     std::span<Tensor<T>> grads = {}) const {
    Tensor<T> g = body_.backward(grad_feature, tape, grads);
    return std::move(g).reshaped({g.dim(1), g.dim(2)});
  }

  std::uint64_t weights_hash() const {
    Fnv1a h;
    h.update(word_table_.values());
    const auto bh = body_.weights_hash();
    h.update(&bh, sizeof bh);
    return h.digest();
  }

 private:
  WordVocabulary vocab_;
  Tensor<T> word_table_;
  nn::Network<T> body_;
  std::size_t max_tokens_ = 32;
};

// Frozen joint vision-language model: image encoder, text encoder, and the
// logit temperature lambda (scores are cos / lambda).
template <typename T>
class EmbeddingModel {
 public:
  EmbeddingModel() = default;
  EmbeddingModel(std::string name, std::size_t embed_dim, T lambda,
                 nn::Network<T> image_encoder, TextEncoder<T> text_encoder)
      : name_(std::move(name)),
        embed_dim_(embed_dim),
        lambda_(lambda),
        image_encoder_(std::move(image_encoder)),
        text_encoder_(std::move(text_encoder)) {
    if (!(lambda > T{0})) throw ConfigError("embedding model: temperature must be > 0");
  }

  const std::string& name() const { return name_; }
  std::size_t embed_dim() const { return embed_dim_; }
  T temperature() const { return lambda_; }
  void set_temperature(T lambda) {
    if (!(lambda > T{0})) throw ConfigError("embedding model: temperature must be > 0");
    lambda_ = lambda;
  }

  nn::Network<T>& image_encoder() { return image_encoder_; }
  const nn::Network<T>& image_encoder() const { return image_encoder_; }
  TextEncoder<T>& text_encoder() { return text_encoder_; }
  const TextEncoder<T>& text_encoder() const { return text_encoder_; }

  // Raw (unnormalized) image embeddings, n x embed_dim.
  Tensor<T> encode_images_raw(const Tensor<T>& images, nn::Tape<T>* tape) const {
    Tensor<T> f = image_encoder_.forward(images, tape);
    check_width(f, "image encoder");
    return f;
  }

  FeatureBatch<T> encode_images(const Tensor<T>& images) const {
    return normalize_rows(encode_images_raw(images, nullptr));
  }

  // Batched in chunks to bound memory.
  FeatureBatch<T> encode_images_chunked(const Tensor<T>& images, std::size_t chunk = 64) const {
    Tensor<T> all({images.dim(0), embed_dim_});
    for (std::size_t b = 0; b < images.dim(0); b += chunk) {
      const std::size_t e = std::min(images.dim(0), b + chunk);
      Tensor<T> f = encode_images_raw(slice_rows(images, b, e), nullptr);
      std::copy(f.values().begin(), f.values().end(), all.item(b).begin());
    }
    return normalize_rows(all);
  }

  std::uint64_t weights_hash() const {
    Fnv1a h;
    h.update(name_);
    const auto ih = image_encoder_.weights_hash();
    const auto th = text_encoder_.weights_hash();
    h.update(&ih, sizeof ih);
    h.update(&th, sizeof th);
    h.update(&lambda_, sizeof lambda_);
    return h.digest();
  }

 private:
  void check_width(const Tensor<T>& f, const char* who) const {
    if (f.rank() != 2 || f.dim(1) != embed_dim_) {
      throw ConfigError(std::string(who) + " emitted " + shape_str(f.shape()) +
                        ", expected width " + std::to_string(embed_dim_));
    }
  }

  std::string name_;
  std::size_t embed_dim_ = 0;
  T lambda_ = T(0.01);
  nn::Network<T> image_encoder_;
  TextEncoder<T> text_encoder_;
};

}  // namespace pdcl
