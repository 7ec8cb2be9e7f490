#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "pdcl/core/error.hpp"
#include "pdcl/core/tensor.hpp"

namespace pdcl::nn {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {
    if (!(cfg.lr > 0)) throw ConfigError("adam: lr must be > 0");
    if (cfg.beta1 < 0 || cfg.beta1 >= 1 || cfg.beta2 < 0 || cfg.beta2 >= 1) {
      throw ConfigError("adam: betas must lie in [0, 1)");
    }
  }

  void step(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads) {
    if (m_.empty()) {
      for (const auto* p : params) {
        m_.emplace_back(p->shape());
        v_.emplace_back(p->shape());
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& p = *params[i];
      for (std::size_t k = 0; k < p.numel(); ++k) {
        const double g = grads[i][k];
        double m = cfg_.beta1 * m_[i][k] + (1.0 - cfg_.beta1) * g;
        double v = cfg_.beta2 * v_[i][k] + (1.0 - cfg_.beta2) * g * g;
        m_[i][k] = static_cast<T>(m);
        v_[i][k] = static_cast<T>(v);
        p[k] -= static_cast<T>(cfg_.lr * (m / c1) / (std::sqrt(v / c2) + cfg_.eps));
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  long t_ = 0;
};

// Plain SGD with heavy-ball momentum; lr is supplied per step so schedules
// live outside the optimizer.
template <typename T>
class Sgd {
 public:
  explicit Sgd(double momentum = 0.9) : momentum_(momentum) {}

  void step(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads,
            double lr) {
    if (vel_.empty()) {
      for (const auto* p : params) vel_.emplace_back(p->shape());
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (std::size_t k = 0; k < params[i]->numel(); ++k) {
        vel_[i][k] = static_cast<T>(momentum_ * vel_[i][k] + grads[i][k]);
        (*params[i])[k] -= static_cast<T>(lr * vel_[i][k]);
      }
    }
  }

 private:
  double momentum_;
  std::vector<Tensor<T>> vel_;
};

// Cosine annealing from `base` to 0 over `period` epochs.
inline double cosine_annealed_lr(double base, std::size_t epoch, std::size_t period) {
  if (period == 0) return base;
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * double(epoch) / double(period)));
}

}  // namespace pdcl::nn
