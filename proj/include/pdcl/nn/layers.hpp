#pragma once

#include <Eigen/Core>

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pdcl/core/error.hpp"
#include "pdcl/core/hash.hpp"
#include "pdcl/core/rng.hpp"
#include "pdcl/core/tensor.hpp"

namespace pdcl::nn {

// Activations saved by forward passes, consumed in reverse by backward.
// A tape belongs to one forward/backward pair; layers themselves stay const,
// so a frozen model can be shared across concurrent evaluations.
template <typename T>
class Tape {
 public:
  void push(std::vector<Tensor<T>> frame) { frames_.push_back(std::move(frame)); }

  std::vector<Tensor<T>> pop() {
    if (frames_.empty()) {
      throw ContractViolation("backward called with an exhausted tape");
    }
    auto frame = std::move(frames_.back());
    frames_.pop_back();
    return frame;
  }

  bool empty() const { return frames_.empty(); }
  std::size_t size() const { return frames_.size(); }

 private:
  std::vector<std::vector<Tensor<T>>> frames_;
};

// Parameter gradients for one layer are handed over as a span aligned with
// the layer's parameters; an empty span means "inputs only" (frozen model).
template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual std::string kind() const = 0;
  virtual Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const = 0;
  virtual Tensor<T> backward(const Tensor<T>& grad_out, Tape<T>& tape,
                             std::span<Tensor<T>> param_grads) const = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;

  virtual std::size_t param_count() const { return 0; }
  virtual void collect(std::vector<Tensor<T>*>&) {}
  virtual void collect(std::vector<const Tensor<T>*>&) const {}
  virtual void init(Rng&) {}
};

namespace detail {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using VecC = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Encodes a shape as a small tensor so it can ride on the tape.
template <typename T>
Tensor<T> shape_token(const Shape& s) {
  std::vector<T> v(s.begin(), s.end());
  return Tensor<T>({s.size()}, std::move(v));
}

template <typename T>
Shape shape_from_token(const Tensor<T>& t) {
  Shape s;
  for (T v : t.values()) s.push_back(static_cast<std::size_t>(v));
  return s;
}

inline void require_rank(std::size_t got, std::size_t want, const char* who) {
  if (got != want) {
    throw ConfigError(std::string(who) + ": expected rank " +
                      std::to_string(want) + " input, got rank " +
                      std::to_string(got));
  }
}

}  // namespace detail

template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
         std::size_t stride = 1, std::size_t pad = std::size_t(-1))
      : in_(in_ch),
        out_(out_ch),
        k_(kernel),
        stride_(stride),
        pad_(pad == std::size_t(-1) ? kernel / 2 : pad),
        weight_({out_ch, in_ch, kernel, kernel}),
        bias_({out_ch}) {}

  std::string kind() const override { return "conv2d"; }

  std::size_t out_size(std::size_t in) const {
    return (in + 2 * pad_ - k_) / stride_ + 1;
  }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const override {
    detail::require_rank(x.rank(), 4, "conv2d");
    if (x.dim(1) != in_) {
      throw ConfigError("conv2d: expected " + std::to_string(in_) +
                        " input channels, got " + std::to_string(x.dim(1)));
    }
    const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const std::size_t ho = out_size(h), wo = out_size(w);
    Tensor<T> y({n, out_, ho, wo});
    detail::MatR<T> col(in_ * k_ * k_, ho * wo);
    Eigen::Map<const detail::MatR<T>> wm(weight_.data(), out_, in_ * k_ * k_);
    Eigen::Map<const detail::VecC<T>> bv(bias_.data(), out_);
    for (std::size_t s = 0; s < n; ++s) {
      im2col(x.data() + s * in_ * h * w, h, w, ho, wo, col);
      Eigen::Map<detail::MatR<T>> ym(y.data() + s * out_ * ho * wo, out_, ho * wo);
      ym.noalias() = wm * col;
      ym.colwise() += bv;
    }
    if (tape) tape->push({x});
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy, Tape<T>& tape,
                     std::span<Tensor<T>> grads) const override {
    auto frame = tape.pop();
    const Tensor<T>& x = frame[0];
    const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const std::size_t ho = gy.dim(2), wo = gy.dim(3);
    Tensor<T> gx(x.shape());
    detail::MatR<T> col(in_ * k_ * k_, ho * wo);
    detail::MatR<T> gcol(in_ * k_ * k_, ho * wo);
    Eigen::Map<const detail::MatR<T>> wm(weight_.data(), out_, in_ * k_ * k_);
    const bool want_params = !grads.empty();
    for (std::size_t s = 0; s < n; ++s) {
      Eigen::Map<const detail::MatR<T>> gym(gy.data() + s * out_ * ho * wo, out_,
                                            ho * wo);
      if (want_params) {
        im2col(x.data() + s * in_ * h * w, h, w, ho, wo, col);
        Eigen::Map<detail::MatR<T>> gw(grads[0].data(), out_, in_ * k_ * k_);
        Eigen::Map<detail::VecC<T>> gb(grads[1].data(), out_);
        gw.noalias() += gym * col.transpose();
        gb += gym.rowwise().sum();
      }
      gcol.noalias() = wm.transpose() * gym;
      col2im(gcol, h, w, ho, wo, gx.data() + s * in_ * h * w);
    }
    return gx;
  }

  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<Conv2d>(*this);
  }
  std::size_t param_count() const override { return 2; }
  void collect(std::vector<Tensor<T>*>& out) override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }
  void collect(std::vector<const Tensor<T>*>& out) const override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

  // He-normal weights, zero bias.
  void init(Rng& rng) override {
    const double stddev = std::sqrt(2.0 / static_cast<double>(in_ * k_ * k_)) * init_gain_;
    for (auto& v : weight_.values()) v = static_cast<T>(rng.normal(0.0, stddev));
    bias_.fill(T{0});
  }

  // Scales the init std; output heads use small gains.
  Conv2d& with_init_gain(double gain) {
    init_gain_ = gain;
    return *this;
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  void im2col(const T* img, std::size_t h, std::size_t w, std::size_t ho,
              std::size_t wo, detail::MatR<T>& col) const {
    for (std::size_t c = 0; c < in_; ++c) {
      for (std::size_t kh = 0; kh < k_; ++kh) {
        for (std::size_t kw = 0; kw < k_; ++kw) {
          T* row = col.data() + ((c * k_ + kh) * k_ + kw) * ho * wo;
          for (std::size_t oh = 0; oh < ho; ++oh) {
            const long ih = static_cast<long>(oh * stride_ + kh) - static_cast<long>(pad_);
            for (std::size_t ow = 0; ow < wo; ++ow) {
              const long iw = static_cast<long>(ow * stride_ + kw) - static_cast<long>(pad_);
              row[oh * wo + ow] =
                  (ih < 0 || iw < 0 || ih >= long(h) || iw >= long(w))
                      ? T{0}
                      : img[(c * h + ih) * w + iw];
            }
          }
        }
      }
    }
  }

  void col2im(const detail::MatR<T>& col, std::size_t h, std::size_t w,
              std::size_t ho, std::size_t wo, T* img) const {
    for (std::size_t c = 0; c < in_; ++c) {
      for (std::size_t kh = 0; kh < k_; ++kh) {
        for (std::size_t kw = 0; kw < k_; ++kw) {
          const T* row = col.data() + ((c * k_ + kh) * k_ + kw) * ho * wo;
          for (std::size_t oh = 0; oh < ho; ++oh) {
            const long ih = static_cast<long>(oh * stride_ + kh) - static_cast<long>(pad_);
            if (ih < 0 || ih >= long(h)) continue;
            for (std::size_t ow = 0; ow < wo; ++ow) {
              const long iw = static_cast<long>(ow * stride_ + kw) - static_cast<long>(pad_);
              if (iw < 0 || iw >= long(w)) continue;
              img[(c * h + ih) * w + iw] += row[oh * wo + ow];
            }
          }
        }
      }
    }
  }

  std::size_t in_, out_, k_, stride_, pad_;
  double init_gain_ = 1.0;
  Tensor<T> weight_;
  Tensor<T> bias_;
};

template <typename T>
class Linear final : public Layer<T> {
 public:
  Linear(std::size_t in, std::size_t out)
      : in_(in), out_(out), weight_({out, in}), bias_({out}) {}

  std::string kind() const override { return "linear"; }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const override {
    detail::require_rank(x.rank(), 2, "linear");
    if (x.dim(1) != in_) {
      throw ConfigError("linear: expected width " + std::to_string(in_) +
                        ", got " + std::to_string(x.dim(1)));
    }
    const std::size_t n = x.dim(0);
    Tensor<T> y({n, out_});
    Eigen::Map<const detail::MatR<T>> xm(x.data(), n, in_);
    Eigen::Map<const detail::MatR<T>> wm(weight_.data(), out_, in_);
    Eigen::Map<const detail::VecC<T>> bv(bias_.data(), out_);
    Eigen::Map<detail::MatR<T>> ym(y.data(), n, out_);
    ym.noalias() = xm * wm.transpose();
    ym.rowwise() += bv.transpose();
    if (tape) tape->push({x});
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy, Tape<T>& tape,
                     std::span<Tensor<T>> grads) const override {
    auto frame = tape.pop();
    const Tensor<T>& x = frame[0];
    const std::size_t n = x.dim(0);
    Eigen::Map<const detail::MatR<T>> xm(x.data(), n, in_);
    Eigen::Map<const detail::MatR<T>> gym(gy.data(), n, out_);
    Eigen::Map<const detail::MatR<T>> wm(weight_.data(), out_, in_);
    if (!grads.empty()) {
      Eigen::Map<detail::MatR<T>> gw(grads[0].data(), out_, in_);
      Eigen::Map<detail::VecC<T>> gb(grads[1].data(), out_);
      gw.noalias() += gym.transpose() * xm;
      gb += gym.colwise().sum().transpose();
    }
    Tensor<T> gx({n, in_});
    Eigen::Map<detail::MatR<T>> gxm(gx.data(), n, in_);
    gxm.noalias() = gym * wm;
    return gx;
  }

  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<Linear>(*this);
  }
  std::size_t param_count() const override { return 2; }
  void collect(std::vector<Tensor<T>*>& out) override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }
  void collect(std::vector<const Tensor<T>*>& out) const override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }
  void init(Rng& rng) override {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
    for (auto& v : weight_.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    for (auto& v : bias_.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  std::size_t in_, out_;
  Tensor<T> weight_;
  Tensor<T> bias_;
};

template <typename T>
class LeakyReLU final : public Layer<T> {
 public:
  explicit LeakyReLU(T slope = T{0}) : slope_(slope) {}
  std::string kind() const override { return slope_ == T{0} ? "relu" : "leaky_relu"; }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const override {
    Tensor<T> y(x);
    for (auto& v : y.values()) v = v > T{0} ? v : v * slope_;
    if (tape) tape->push({x});
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy, Tape<T>& tape,
                     std::span<Tensor<T>>) const override {
    auto frame = tape.pop();
    const Tensor<T>& x = frame[0];
    Tensor<T> gx(gy);
    for (std::size_t i = 0; i < gx.numel(); ++i) {
      if (!(x[i] > T{0})) gx[i] *= slope_;
    }
    return gx;
  }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<LeakyReLU>(*this);
  }

 private:
  T slope_;
};

template <typename T>
std::unique_ptr<Layer<T>> relu() {
  return std::make_unique<LeakyReLU<T>>(T{0});
}

template <typename T>
class Tanh final : public Layer<T> {
 public:
  std::string kind() const override { return "tanh"; }
  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const override {
    Tensor<T> y(x);
    for (auto& v : y.values()) v = std::tanh(v);
    if (tape) tape->push({y});
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy, Tape<T>& tape,
                     std::span<Tensor<T>>) const override {
    auto frame = tape.pop();
    const Tensor<T>& y = frame[0];
    Tensor<T> gx(gy);
    for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] *= T{1} - y[i] * y[i];
    return gx;
  }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<Tanh>(*this);
  }
};

template <typename T>
class MaxPool2d final : public Layer<T> {
 public:
  std::string kind() const override { return "maxpool2d"; }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const override {
    detail::require_rank(x.rank(), 4, "maxpool2d");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2) / 2, w = x.dim(3) / 2;
    Tensor<T> y({n, c, h, w});
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j) {
            T m = x.at(s, ch, 2 * i, 2 * j);
            m = std::max(m, x.at(s, ch, 2 * i, 2 * j + 1));
            m = std::max(m, x.at(s, ch, 2 * i + 1, 2 * j));
            m = std::max(m, x.at(s, ch, 2 * i + 1, 2 * j + 1));
            y.at(s, ch, i, j) = m;
          }
    if (tape) tape->push({x});
    return y;
  }

  // Gradient goes to the first maximal element of each window.
  Tensor<T> backward(const Tensor<T>& gy, Tape<T>& tape,
                     std::span<Tensor<T>>) const override {
    auto frame = tape.pop();
    const Tensor<T>& x = frame[0];
    Tensor<T> gx(x.shape());
    const std::size_t n = gy.dim(0), c = gy.dim(1), h = gy.dim(2), w = gy.dim(3);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j) {
            std::size_t bi = 2 * i, bj = 2 * j;
            for (std::size_t di = 0; di < 2; ++di)
              for (std::size_t dj = 0; dj < 2; ++dj)
                if (x.at(s, ch, 2 * i + di, 2 * j + dj) > x.at(s, ch, bi, bj)) {
                  bi = 2 * i + di;
                  bj = 2 * j + dj;
                }
            gx.at(s, ch, bi, bj) += gy.at(s, ch, i, j);
          }
    return gx;
  }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<MaxPool2d>(*this);
  }
};

template <typename T>
class AvgPool2d final : public Layer<T> {
 public:
  std::string kind() const override { return "avgpool2d"; }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const override {
    detail::require_rank(x.rank(), 4, "avgpool2d");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2) / 2, w = x.dim(3) / 2;
    Tensor<T> y({n, c, h, w});
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j)
            y.at(s, ch, i, j) =
                (x.at(s, ch, 2 * i, 2 * j) + x.at(s, ch, 2 * i, 2 * j + 1) +
                 x.at(s, ch, 2 * i + 1, 2 * j) + x.at(s, ch, 2 * i + 1, 2 * j + 1)) /
                T{4};
    if (tape) tape->push({detail::shape_token<T>(x.shape())});
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy, Tape<T>& tape,
                     std::span<Tensor<T>>) const override {
    Tensor<T> gx(detail::shape_from_token(tape.pop()[0]));
    const std::size_t n = gy.dim(0), c = gy.dim(1), h = gy.dim(2), w = gy.dim(3);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j) {
            const T g = gy.at(s, ch, i, j) / T{4};
            gx.at(s, ch, 2 * i, 2 * j) += g;
            gx.at(s, ch, 2 * i, 2 * j + 1) += g;
            gx.at(s, ch, 2 * i + 1, 2 * j) += g;
            gx.at(s, ch, 2 * i + 1, 2 * j + 1) += g;
          }
    return gx;
  }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<AvgPool2d>(*this);
  }
};

// (N, C, H, W) -> (N, C)
template <typename T>
class GlobalAvgPool final : public Layer<T> {
 public:
  std::string kind() const override { return "global_avgpool"; }
  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const override {
    detail::require_rank(x.rank(), 4, "global_avgpool");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> y({n, c});
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* p = x.data() + (s * c + ch) * hw;
        T acc{0};
        for (std::size_t i = 0; i < hw; ++i) acc += p[i];
        y.at(s, ch) = acc / static_cast<T>(hw);
      }
    if (tape) tape->push({detail::shape_token<T>(x.shape())});
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy, Tape<T>& tape,
                     std::span<Tensor<T>>) const override {
    Tensor<T> gx(detail::shape_from_token(tape.pop()[0]));
    const std::size_t n = gx.dim(0), c = gx.dim(1), hw = gx.dim(2) * gx.dim(3);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T g = gy.at(s, ch) / static_cast<T>(hw);
        T* p = gx.data() + (s * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) p[i] = g;
      }
    return gx;
  }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<GlobalAvgPool>(*this);
  }
};

template <typename T>
class Flatten final : public Layer<T> {
 public:
  std::string kind() const override { return "flatten"; }
  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const override {
    if (tape) tape->push({detail::shape_token<T>(x.shape())});
    return x.reshaped({x.dim(0), x.item_size()});
  }
  Tensor<T> backward(const Tensor<T>& gy, Tape<T>& tape,
                     std::span<Tensor<T>>) const override {
    return gy.reshaped(detail::shape_from_token(tape.pop()[0]));
  }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<Flatten>(*this);
  }
};

// Nearest-neighbour 2x upsampling.
template <typename T>
class Upsample2x final : public Layer<T> {
 public:
  std::string kind() const override { return "upsample2x"; }
  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const override {
    detail::require_rank(x.rank(), 4, "upsample2x");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<T> y({n, c, 2 * h, 2 * w});
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < 2 * h; ++i)
          for (std::size_t j = 0; j < 2 * w; ++j)
            y.at(s, ch, i, j) = x.at(s, ch, i / 2, j / 2);
    if (tape) tape->push({});
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy, Tape<T>& tape,
                     std::span<Tensor<T>>) const override {
    tape.pop();
    const std::size_t n = gy.dim(0), c = gy.dim(1), h = gy.dim(2) / 2, w = gy.dim(3) / 2;
    Tensor<T> gx({n, c, h, w});
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < 2 * h; ++i)
          for (std::size_t j = 0; j < 2 * w; ++j)
            gx.at(s, ch, i / 2, j / 2) += gy.at(s, ch, i, j);
    return gx;
  }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<Upsample2x>(*this);
  }
};

// Per-sample, per-channel normalization over H x W with a learned affine.
template <typename T>
class InstanceNorm2d final : public Layer<T> {
 public:
  explicit InstanceNorm2d(std::size_t channels, T eps = T(1e-5))
      : channels_(channels), eps_(eps), gamma_({channels}, T{1}), beta_({channels}) {}

  std::string kind() const override { return "instance_norm2d"; }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const override {
    detail::require_rank(x.rank(), 4, "instance_norm2d");
    if (x.dim(1) != channels_) throw ConfigError("instance_norm2d: channel mismatch");
    const std::size_t n = x.dim(0), hw = x.dim(2) * x.dim(3);
    Tensor<T> y(x.shape()), xhat(x.shape()), inv_std({n, channels_});
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t c = 0; c < channels_; ++c) {
        const T* in = x.data() + (s * channels_ + c) * hw;
        T mean{0};
        for (std::size_t i = 0; i < hw; ++i) mean += in[i];
        mean /= static_cast<T>(hw);
        T var{0};
        for (std::size_t i = 0; i < hw; ++i) var += (in[i] - mean) * (in[i] - mean);
        var /= static_cast<T>(hw);
        const T is = T{1} / std::sqrt(var + eps_);
        inv_std.at(s, c) = is;
        T* xh = xhat.data() + (s * channels_ + c) * hw;
        T* out = y.data() + (s * channels_ + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          xh[i] = (in[i] - mean) * is;
          out[i] = gamma_[c] * xh[i] + beta_[c];
        }
      }
    if (tape) tape->push({std::move(xhat), std::move(inv_std)});
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy, Tape<T>& tape,
                     std::span<Tensor<T>> grads) const override {
    auto frame = tape.pop();
    const Tensor<T>& xhat = frame[0];
    const Tensor<T>& inv_std = frame[1];
    const std::size_t n = gy.dim(0), hw = gy.dim(2) * gy.dim(3);
    Tensor<T> gx(gy.shape());
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t c = 0; c < channels_; ++c) {
        const std::size_t off = (s * channels_ + c) * hw;
        T sum_g{0}, sum_gx{0};
        for (std::size_t i = 0; i < hw; ++i) {
          sum_g += gy[off + i];
          sum_gx += gy[off + i] * xhat[off + i];
        }
        if (!grads.empty()) {
          grads[0][c] += sum_gx;
          grads[1][c] += sum_g;
        }
        const T k = gamma_[c] * inv_std.at(s, c);
        const T mg = sum_g / static_cast<T>(hw), mgx = sum_gx / static_cast<T>(hw);
        for (std::size_t i = 0; i < hw; ++i) {
          gx[off + i] = k * (gy[off + i] - mg - xhat[off + i] * mgx);
        }
      }
    return gx;
  }

  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<InstanceNorm2d>(*this);
  }
  std::size_t param_count() const override { return 2; }
  void collect(std::vector<Tensor<T>*>& out) override {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }
  void collect(std::vector<const Tensor<T>*>& out) const override {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }
  void init(Rng&) override {
    gamma_.fill(T{1});
    beta_.fill(T{0});
  }

 private:
  std::size_t channels_;
  T eps_;
  Tensor<T> gamma_, beta_;
};

// Fixed input standardization (x - mean) / stddev; no trainable state.
template <typename T>
class Standardize final : public Layer<T> {
 public:
  Standardize(T mean, T stddev) : mean_(mean), inv_std_(T{1} / stddev) {}
  std::string kind() const override { return "standardize"; }
  Tensor<T> forward(const Tensor<T>& x, Tape<T>*) const override {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = (x[i] - mean_) * inv_std_;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy, Tape<T>&, std::span<Tensor<T>>) const override {
    Tensor<T> gx(gy);
    gx *= inv_std_;
    return gx;
  }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<Standardize>(*this);
  }

 private:
  T mean_, inv_std_;
};

// (N, tokens, d) -> (N, d), mean over tokens.
template <typename T>
class MeanTokens final : public Layer<T> {
 public:
  std::string kind() const override { return "mean_tokens"; }
  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const override {
    detail::require_rank(x.rank(), 3, "mean_tokens");
    const std::size_t n = x.dim(0), len = x.dim(1), d = x.dim(2);
    if (len == 0) throw DegenerateInputError("mean_tokens: empty token sequence");
    Tensor<T> y({n, d});
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t k = 0; k < d; ++k) y.at(s, k) += x.data()[(s * len + t) * d + k];
    y *= T{1} / static_cast<T>(len);
    if (tape) tape->push({detail::shape_token<T>(x.shape())});
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy, Tape<T>& tape,
                     std::span<Tensor<T>>) const override {
    Tensor<T> gx(detail::shape_from_token(tape.pop()[0]));
    const std::size_t n = gx.dim(0), len = gx.dim(1), d = gx.dim(2);
    const T scale = T{1} / static_cast<T>(len);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t k = 0; k < d; ++k)
          gx.data()[(s * len + t) * d + k] = gy.at(s, k) * scale;
    return gx;
  }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<MeanTokens>(*this);
  }
};

// Ordered, named stack of layers. Also a Layer, so stacks nest.
template <typename T>
class Network final : public Layer<T> {
 public:
  Network() = default;
  Network(const Network& o) : names_(o.names_) {
    for (const auto& l : o.layers_) layers_.push_back(l->clone());
  }
  Network& operator=(const Network& o) {
    if (this != &o) {
      Network tmp(o);
      *this = std::move(tmp);
    }
    return *this;
  }
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  Network& add(std::string name, std::unique_ptr<Layer<T>> layer) {
    names_.push_back(std::move(name));
    layers_.push_back(std::move(layer));
    return *this;
  }

  std::size_t size() const { return layers_.size(); }
  const std::string& layer_name(std::size_t i) const { return names_.at(i); }
  const Layer<T>& layer(std::size_t i) const { return *layers_.at(i); }

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return i;
    throw LookupError("no layer named '" + name + "'");
  }

  std::string kind() const override { return "sequential"; }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const override {
    return forward_to(x, tape, layers_.size());
  }

  // Runs layers [0, end).
  Tensor<T> forward_to(const Tensor<T>& x, Tape<T>* tape, std::size_t end) const {
    Tensor<T> h = x;
    for (std::size_t i = 0; i < end; ++i) h = layers_[i]->forward(h, tape);
    return h;
  }

  Tensor<T> backward(const Tensor<T>& gy, Tape<T>& tape,
                     std::span<Tensor<T>> grads) const override {
    return backward_from(gy, tape, grads, layers_.size());
  }

  // Reverse of forward_to(.., end). `grads` spans all network params or is empty.
  Tensor<T> backward_from(const Tensor<T>& gy, Tape<T>& tape,
                          std::span<Tensor<T>> grads, std::size_t end) const {
    std::vector<std::size_t> offset(layers_.size() + 1, 0);
    for (std::size_t i = 0; i < layers_.size(); ++i)
      offset[i + 1] = offset[i] + layers_[i]->param_count();
    Tensor<T> g = gy;
    for (std::size_t i = end; i-- > 0;) {
      auto slice = grads.empty()
                       ? std::span<Tensor<T>>()
                       : grads.subspan(offset[i], layers_[i]->param_count());
      g = layers_[i]->backward(g, tape, slice);
    }
    return g;
  }

  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<Network>(*this);
  }

  std::size_t param_count() const override {
    std::size_t c = 0;
    for (const auto& l : layers_) c += l->param_count();
    return c;
  }
  void collect(std::vector<Tensor<T>*>& out) override {
    for (auto& l : layers_) l->collect(out);
  }
  void collect(std::vector<const Tensor<T>*>& out) const override {
    for (const auto& l : layers_) l->collect(out);
  }
  void init(Rng& rng) override {
    for (auto& l : layers_) l->init(rng);
  }

  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> out;
    collect(out);
    return out;
  }
  std::vector<const Tensor<T>*> parameters() const {
    std::vector<const Tensor<T>*> out;
    collect(out);
    return out;
  }

  // Zero tensors shaped like the parameters.
  std::vector<Tensor<T>> zero_grads() const {
    std::vector<Tensor<T>> g;
    for (const auto* p : parameters()) g.emplace_back(p->shape());
    return g;
  }

  std::size_t scalar_count() const {
    std::size_t c = 0;
    for (const auto* p : parameters()) c += p->numel();
    return c;
  }

  // Fingerprint of every parameter bit.
  std::uint64_t weights_hash() const {
    Fnv1a h;
    for (const auto* p : parameters()) h.update(p->values());
    return h.digest();
  }

 private:
  std::vector<std::string> names_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

// y = x + body(x)
template <typename T>
class ResidualBlock final : public Layer<T> {
 public:
  explicit ResidualBlock(Network<T> body) : body_(std::move(body)) {}

  static ResidualBlock conv(std::size_t channels) {
    Network<T> body;
    body.add("conv1", std::make_unique<Conv2d<T>>(channels, channels, 3));
    body.add("act", relu<T>());
    body.add("conv2", std::make_unique<Conv2d<T>>(channels, channels, 3));
    return ResidualBlock(std::move(body));
  }

  // conv -> norm -> relu -> conv -> norm
  static ResidualBlock conv_norm(std::size_t channels) {
    Network<T> body;
    body.add("conv1", std::make_unique<Conv2d<T>>(channels, channels, 3));
    body.add("norm1", std::make_unique<InstanceNorm2d<T>>(channels));
    body.add("act", relu<T>());
    body.add("conv2", std::make_unique<Conv2d<T>>(channels, channels, 3));
    body.add("norm2", std::make_unique<InstanceNorm2d<T>>(channels));
    return ResidualBlock(std::move(body));
  }

  std::string kind() const override { return "residual"; }
  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const override {
    Tensor<T> y = body_.forward(x, tape);
    y += x;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy, Tape<T>& tape,
                     std::span<Tensor<T>> grads) const override {
    Tensor<T> gx = body_.backward(gy, tape, grads);
    gx += gy;
    return gx;
  }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<ResidualBlock>(*this);
  }
  std::size_t param_count() const override { return body_.param_count(); }
  void collect(std::vector<Tensor<T>*>& out) override { body_.collect(out); }
  void collect(std::vector<const Tensor<T>*>& out) const override {
    body_.collect(out);
  }
  void init(Rng& rng) override { body_.init(rng); }

 private:
  Network<T> body_;
};

// Copies parameter values from `src` into `dst`, which must share the
// architecture. Used to load float checkpoints into double models for checks.
template <typename Dst, typename Src>
void copy_parameters(Network<Dst>& dst, const Network<Src>& src) {
  auto d = dst.parameters();
  auto s = src.parameters();
  if (d.size() != s.size()) {
    throw ConfigError("copy_parameters: parameter count mismatch");
  }
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i]->shape() != s[i]->shape()) {
      throw ConfigError("copy_parameters: shape mismatch at parameter " +
                        std::to_string(i));
    }
    for (std::size_t k = 0; k < d[i]->numel(); ++k)
      (*d[i])[k] = static_cast<Dst>((*s[i])[k]);
  }
}

}  // namespace pdcl::nn
