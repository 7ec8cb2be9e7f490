#include <gtest/gtest.h>

#include "helpers.hpp"

namespace pdcl {
namespace {

using nn::Layer;

// Checks input and parameter gradients of sum(w * layer(x)).
void check_layer(Layer<double>& layer, const Shape& in_shape, std::uint64_t seed, double tol = 1e-6) {
  Rng rng(seed);
  layer.init(rng);
  Tensor<double> x = test::random_tensor(in_shape, rng);
  Tensor<double> w = test::random_tensor(layer.forward(x, nullptr).shape(), rng);
  auto objective = [&](const Tensor<double>& in) {
    auto y = layer.forward(in, nullptr);
    double acc = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) acc += w[i] * y[i];
    return acc;
  };
  std::vector<Tensor<double>*> params;
  layer.collect(params);
  std::vector<Tensor<double>> grads;
  for (auto* p : params) grads.emplace_back(p->shape());
  nn::Tape<double> tape;
  layer.forward(x, &tape);
  auto gx = layer.backward(w, tape, grads);
  EXPECT_TRUE(tape.empty());
  EXPECT_LT(test::relative_error(gx, test::numeric_gradient(objective, x)), tol) << layer.kind();
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Tensor<double> saved = *params[p];
    auto fp = [&](const Tensor<double>& v) {
      *params[p] = v;
      const double out = objective(x);
      *params[p] = saved;
      return out;
    };
    auto num = test::numeric_gradient(fp, saved);
    // A bias feeding a normalization has an identically zero gradient.
    double scale = 0;
    for (double v : num.values()) scale = std::max(scale, std::abs(v));
    if (scale < 1e-8) {
      EXPECT_LT(max_abs_diff(grads[p], num), 1e-8) << layer.kind() << " param " << p;
      continue;
    }
    EXPECT_LT(test::relative_error(grads[p], num), tol) << layer.kind() << " param " << p;
  }
}

TEST(LayerGradients, Conv2dSamePadding) {
  nn::Conv2d<double> conv(2, 3, 3);
  check_layer(conv, {2, 2, 5, 5}, 1);
}

TEST(LayerGradients, Conv2dStrided) {
  nn::Conv2d<double> conv(3, 2, 3, 2, 1);
  check_layer(conv, {1, 3, 6, 6}, 2);
}

TEST(LayerGradients, Linear) {
  nn::Linear<double> lin(5, 4);
  check_layer(lin, {3, 5}, 3);
}

TEST(LayerGradients, LeakyReLUAndTanh) {
  nn::LeakyReLU<double> lr(0.2);
  check_layer(lr, {2, 7}, 4);
  nn::Tanh<double> th;
  check_layer(th, {2, 7}, 5);
}

TEST(LayerGradients, Pools) {
  nn::MaxPool2d<double> mp;
  check_layer(mp, {2, 2, 4, 4}, 6);
  nn::AvgPool2d<double> ap;
  check_layer(ap, {2, 2, 4, 4}, 7);
  nn::GlobalAvgPool<double> gp;
  check_layer(gp, {2, 3, 4, 4}, 8);
}

TEST(LayerGradients, UpsampleFlattenStandardizeMeanTokens) {
  nn::Upsample2x<double> up;
  check_layer(up, {1, 2, 3, 3}, 9);
  nn::Flatten<double> fl;
  check_layer(fl, {2, 2, 2, 2}, 10);
  nn::Standardize<double> st(0.5, 0.25);
  check_layer(st, {2, 4}, 11);
  nn::MeanTokens<double> mt;
  check_layer(mt, {2, 3, 4}, 12);
}

TEST(LayerGradients, InstanceNorm) {
  nn::InstanceNorm2d<double> in(3);
  check_layer(in, {2, 3, 4, 4}, 13, 1e-5);
}

TEST(LayerGradients, ResidualBlockAndNetwork) {
  auto rb = nn::ResidualBlock<double>::conv_norm(2);
  check_layer(rb, {1, 2, 4, 4}, 14, 1e-5);
  nn::Network<double> net;
  net.add("conv", std::make_unique<nn::Conv2d<double>>(1, 2, 3));
  net.add("act", std::make_unique<nn::LeakyReLU<double>>(0.1));
  net.add("pool", std::make_unique<nn::AvgPool2d<double>>());
  net.add("flat", std::make_unique<nn::Flatten<double>>());
  net.add("fc", std::make_unique<nn::Linear<double>>(8, 3));
  check_layer(net, {2, 1, 4, 4}, 15);
}

TEST(Network, PartialForwardAndFrozenBackward) {
  nn::Network<double> net;
  net.add("conv", std::make_unique<nn::Conv2d<double>>(1, 2, 3));
  net.add("pool", std::make_unique<nn::AvgPool2d<double>>());
  net.add("flat", std::make_unique<nn::Flatten<double>>());
  Rng rng(16);
  net.init(rng);
  auto x = test::random_tensor({1, 1, 4, 4}, rng);
  EXPECT_EQ(net.index_of("pool"), 1u);
  EXPECT_THROW(net.index_of("nope"), LookupError);
  nn::Tape<double> tape;
  auto mid = net.forward_to(x, &tape, 2);
  EXPECT_EQ(mid.shape(), (Shape{1, 2, 2, 2}));
  const auto h = net.weights_hash();
  auto gx = net.backward_from(Tensor<double>(mid.shape(), 1.0), tape, {}, 2);
  EXPECT_EQ(gx.shape(), x.shape());
  EXPECT_EQ(net.weights_hash(), h);
  nn::Network<double> copy = net;
  EXPECT_EQ(copy.weights_hash(), h);
  (*copy.parameters()[0])[0] += 1.0;
  EXPECT_NE(copy.weights_hash(), h);
  EXPECT_EQ(net.weights_hash(), h);
}

TEST(Optim, AdamFirstStepMovesByLr) {
  Tensor<double> p({2}, {1.0, -1.0});
  std::vector<Tensor<double>*> params{&p};
  nn::Adam<double> adam(nn::AdamConfig{0.1, 0.9, 0.999, 1e-12});
  adam.step(params, {Tensor<double>({2}, {3.0, -0.5})});
  EXPECT_NEAR(p[0], 0.9, 1e-9);
  EXPECT_NEAR(p[1], -0.9, 1e-9);
  EXPECT_THROW(nn::Adam<double>(nn::AdamConfig{0.0}), ConfigError);
}

TEST(Optim, SgdMomentumAccumulates) {
  Tensor<double> p({1}, {0.0});
  std::vector<Tensor<double>*> params{&p};
  nn::Sgd<double> sgd(0.5);
  sgd.step(params, {Tensor<double>({1}, {1.0})}, 0.1);
  sgd.step(params, {Tensor<double>({1}, {1.0})}, 0.1);
  EXPECT_NEAR(p[0], -0.1 - 0.15, 1e-12);
  EXPECT_NEAR(nn::cosine_annealed_lr(1.0, 5, 10), 0.5, 1e-12);
}

}  // namespace
}  // namespace pdcl
