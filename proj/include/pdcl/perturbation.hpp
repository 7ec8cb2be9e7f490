#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>

#include "pdcl/core/error.hpp"
#include "pdcl/core/rng.hpp"
#include "pdcl/core/tensor.hpp"
#include "pdcl/nn/layers.hpp"

namespace pdcl {

// l-inf budget in normalized pixel units plus the valid pixel interval.
struct PerturbationBudget {
  double epsilon = 10.0 / 255.0;
  double lo = 0.0;
  double hi = 1.0;

  // `levels` in 0..255 units, as the CLI takes it.
  static PerturbationBudget from_levels(double levels, double lo = 0.0, double hi = 1.0) {
    PerturbationBudget b{levels / 255.0 * (hi - lo), lo, hi};
    b.validate();
    return b;
  }

  double levels() const { return epsilon / (hi - lo) * 255.0; }

  void validate() const {
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) {
      throw ConfigError("perturbation budget must be a finite value >= 0");
    }
    if (!(lo < hi)) throw ConfigError("data range requires lo < hi");
  }
};

// Clamp to [x - eps, x + eps], then to the data range. Total over finite input.
template <typename T>
Tensor<T> project(const Tensor<T>& x_tilde, const Tensor<T>& x, const PerturbationBudget& budget) {
  x_tilde.require_same_shape(x, "project");
  Tensor<T> out(x_tilde.shape());
  const T eps = static_cast<T>(budget.epsilon);
  const T lo = static_cast<T>(budget.lo), hi = static_cast<T>(budget.hi);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const T v = std::clamp(x_tilde[i], static_cast<T>(x[i] - eps), static_cast<T>(x[i] + eps));
    out[i] = std::clamp(v, lo, hi);
  }
  return out;
}

// Gradient of project() w.r.t. x_tilde: passes where neither clamp is active.
template <typename T>
Tensor<T> project_backward(const Tensor<T>& grad_out, const Tensor<T>& x_tilde,
                           const Tensor<T>& x, const PerturbationBudget& budget) {
  Tensor<T> g(grad_out);
  const T eps = static_cast<T>(budget.epsilon);
  const T lo = static_cast<T>(budget.lo), hi = static_cast<T>(budget.hi);
  for (std::size_t i = 0; i < g.numel(); ++i) {
    const T v = x_tilde[i];
    const bool inside = v > x[i] - eps && v < x[i] + eps && v > lo && v < hi;
    if (!inside) g[i] = T{0};
  }
  return g;
}

template <typename T>
double linf_distance(const Tensor<T>& a, const Tensor<T>& b) {
  return static_cast<double>(max_abs_diff(a, b));
}

// Hard check, used wherever adversarial images enter evaluation.
template <typename T>
void assert_within_budget(const Tensor<T>& adv, const Tensor<T>& clean,
                          const PerturbationBudget& budget, double slack = 1e-6) {
  const double d = linf_distance(adv, clean);
  if (d > budget.epsilon + slack) {
    throw InvariantViolation("adversarial batch exceeds l-inf budget: " + std::to_string(d) +
                             " > " + std::to_string(budget.epsilon));
  }
  for (T v : adv.values()) {
    if (double(v) < budget.lo - slack || double(v) > budget.hi + slack) {
      throw InvariantViolation("adversarial batch leaves the data range");
    }
  }
}

enum class GeneratorHead {
  // lo + (hi - lo) * sigmoid(logit(x) + r): identity when r = 0.
  ResidualLogit,
  // lo + (hi - lo) * (tanh(r) + 1) / 2
  Tanh,
  // x + head_scale * tanh(r), clamped to the data range: a smooth residual
  // bounded at the training budget, identity when r = 0.
  BudgetTanh,
};

struct GeneratorArch {
  std::size_t channels = 3;
  std::size_t width = 16;
  std::size_t down_blocks = 2;
  std::size_t residual_blocks = 2;
  std::size_t up_blocks = 2;
  GeneratorHead head = GeneratorHead::ResidualLogit;
  double head_init_gain = 0.1;
  double head_scale = 10.0 / 255.0;  // BudgetTanh only, in data-range units
  bool instance_norm = true;

  static GeneratorArch desk() { return {}; }

  // Mirrors the widely shared ImageNet-scale generator layout.
  static GeneratorArch imagenet_scale() {
    GeneratorArch a;
    a.width = 64;
    a.residual_blocks = 6;
    a.head = GeneratorHead::Tanh;
    a.head_init_gain = 1.0;
    return a;
  }

  void validate() const {
    if (channels == 0 || width == 0) throw ConfigError("generator: zero channels/width");
    if (head == GeneratorHead::BudgetTanh && !(head_scale > 0.0)) {
      throw ConfigError("generator: budget head needs head_scale > 0");
    }
    if (down_blocks != up_blocks) {
      throw ConfigError("generator: down and up block counts must match to preserve shape");
    }
  }

  friend bool operator==(const GeneratorArch&, const GeneratorArch&) = default;
};

NLOHMANN_JSON_SERIALIZE_ENUM(GeneratorHead, {{GeneratorHead::ResidualLogit, "residual_logit"},
                                             {GeneratorHead::Tanh, "tanh"},
                                             {GeneratorHead::BudgetTanh, "budget_tanh"}})

inline void to_json(nlohmann::json& j, const GeneratorArch& a) {
  j = nlohmann::json{{"channels", a.channels},
                     {"width", a.width},
                     {"down_blocks", a.down_blocks},
                     {"residual_blocks", a.residual_blocks},
                     {"up_blocks", a.up_blocks},
                     {"head", a.head},
                     {"head_init_gain", a.head_init_gain},
                     {"head_scale", a.head_scale},
                     {"instance_norm", a.instance_norm}};
}

inline void from_json(const nlohmann::json& j, GeneratorArch& a) {
  j.at("channels").get_to(a.channels);
  j.at("width").get_to(a.width);
  j.at("down_blocks").get_to(a.down_blocks);
  j.at("residual_blocks").get_to(a.residual_blocks);
  j.at("up_blocks").get_to(a.up_blocks);
  j.at("head").get_to(a.head);
  j.at("head_init_gain").get_to(a.head_init_gain);
  a.head_scale = j.value("head_scale", 10.0 / 255.0);
  a.instance_norm = j.value("instance_norm", true);
}

// Image-to-image perturbation generator: down-sampling, residual and
// up-sampling blocks, then a bounded head into the data range.
template <typename T>
class Generator {
 public:
  Generator() = default;
  explicit Generator(GeneratorArch arch, double lo = 0.0, double hi = 1.0)
      : arch_(arch), lo_(lo), hi_(hi) {
    arch_.validate();
    build();
  }

  const GeneratorArch& arch() const { return arch_; }
  nn::Network<T>& body() { return body_; }
  const nn::Network<T>& body() const { return body_; }
  double lo() const { return lo_; }
  double hi() const { return hi_; }

  void init(Rng& rng) { body_.init(rng); }

  // Zeroes the output conv: the generator then reproduces its input.
  void make_identity() {
    auto params = body_.parameters();
    params[params.size() - 2]->fill(T{0});
    params[params.size() - 1]->fill(T{0});
  }

  void require_compatible(const Tensor<T>& x) const {
    const std::size_t stride = std::size_t{1} << arch_.down_blocks;
    if (x.rank() != 4 || x.dim(1) != arch_.channels || x.dim(2) % stride || x.dim(3) % stride) {
      throw ConfigError("generator: input " + shape_str(x.shape()) + " incompatible with arch (" +
                        std::to_string(arch_.channels) + " channels, spatial multiple of " +
                        std::to_string(stride) + ")");
    }
  }

  // Unbounded adversarial candidates (bounded only by the data range).
  Tensor<T> forward(const Tensor<T>& x, nn::Tape<T>* tape) const {
    require_compatible(x);
    Tensor<T> r = body_.forward(x, tape);
    Tensor<T> y(x.shape());
    Tensor<T> saved(x.shape());
    const T lo = static_cast<T>(lo_), span = static_cast<T>(hi_ - lo_);
    for (std::size_t i = 0; i < y.numel(); ++i) {
      if (arch_.head == GeneratorHead::ResidualLogit) {
        const T u = std::clamp((x[i] - lo) / span, T(1e-4), T(1) - T(1e-4));
        const T z = std::log(u / (T{1} - u)) + r[i];
        const T s = T{1} / (T{1} + std::exp(-z));
        saved[i] = s;
        y[i] = lo + span * s;
      } else if (arch_.head == GeneratorHead::Tanh) {
        const T t = std::tanh(r[i]);
        saved[i] = t;
        y[i] = lo + span * (t + T{1}) / T{2};
      } else {
        const T t = std::tanh(r[i]);
        const T v = x[i] + static_cast<T>(arch_.head_scale) * t;
        // Zero gradient where the range clamp is active.
        saved[i] = v > lo && v < lo + span ? t : T{1};
        y[i] = std::clamp(v, lo, static_cast<T>(lo + span));
      }
    }
    if (tape) tape->push({saved});
    return y;
  }

  // Accumulates parameter gradients from dL/d(output).
  void backward(const Tensor<T>& grad_out, nn::Tape<T>& tape, std::span<Tensor<T>> grads) const {
    auto frame = tape.pop();
    const Tensor<T>& s = frame[0];
    const T span = static_cast<T>(hi_ - lo_);
    Tensor<T> gr(grad_out.shape());
    const T scale = static_cast<T>(arch_.head_scale);
    for (std::size_t i = 0; i < gr.numel(); ++i) {
      switch (arch_.head) {
        case GeneratorHead::ResidualLogit: gr[i] = grad_out[i] * span * s[i] * (T{1} - s[i]); break;
        case GeneratorHead::Tanh: gr[i] = grad_out[i] * span * (T{1} - s[i] * s[i]) / T{2}; break;
        case GeneratorHead::BudgetTanh: gr[i] = grad_out[i] * scale * (T{1} - s[i] * s[i]); break;
      }
    }
    body_.backward(gr, tape, grads);
  }

  std::uint64_t weights_hash() const { return body_.weights_hash(); }

 private:
  void build() {
    body_ = nn::Network<T>();
    std::size_t w = arch_.width;
    auto norm = [this](const std::string& name, std::size_t ch) {
      if (arch_.instance_norm) body_.add(name, std::make_unique<nn::InstanceNorm2d<T>>(ch));
    };
    body_.add("stem", std::make_unique<nn::Conv2d<T>>(arch_.channels, w, 3));
    norm("stem_norm", w);
    body_.add("stem_act", nn::relu<T>());
    for (std::size_t i = 0; i < arch_.down_blocks; ++i) {
      const std::string id = "down" + std::to_string(i);
      body_.add(id, std::make_unique<nn::Conv2d<T>>(w, 2 * w, 3, 2, 1));
      norm(id + "_norm", 2 * w);
      body_.add(id + "_act", nn::relu<T>());
      w *= 2;
    }
    for (std::size_t i = 0; i < arch_.residual_blocks; ++i) {
      body_.add("res" + std::to_string(i),
                std::make_unique<nn::ResidualBlock<T>>(arch_.instance_norm
                                                           ? nn::ResidualBlock<T>::conv_norm(w)
                                                           : nn::ResidualBlock<T>::conv(w)));
    }
    for (std::size_t i = 0; i < arch_.up_blocks; ++i) {
      const std::string id = "up" + std::to_string(i);
      body_.add(id, std::make_unique<nn::Upsample2x<T>>());
      body_.add(id + "_conv", std::make_unique<nn::Conv2d<T>>(w, w / 2, 3));
      norm(id + "_norm", w / 2);
      body_.add(id + "_act", nn::relu<T>());
      w /= 2;
    }
    auto head = std::make_unique<nn::Conv2d<T>>(w, arch_.channels, 3);
    head->with_init_gain(arch_.head_init_gain);
    body_.add("head", std::move(head));
  }

  GeneratorArch arch_;
  double lo_ = 0.0, hi_ = 1.0;
  nn::Network<T> body_;
};

template <typename T>
Tensor<T> generate_unbounded(const Generator<T>& gen, const Tensor<T>& x) {
  return gen.forward(x, nullptr);
}

// project(generate_unbounded(x)); deterministic for fixed parameters.
template <typename T>
Tensor<T> craft_adversarial(const Generator<T>& gen, const Tensor<T>& x,
                            const PerturbationBudget& budget) {
  budget.validate();
  return project(gen.forward(x, nullptr), x, budget);
}

}  // namespace pdcl
