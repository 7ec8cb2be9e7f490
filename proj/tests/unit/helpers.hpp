#pragma once

#include <cmath>
#include <functional>

#include "pdcl/pdcl.hpp"

namespace pdcl::test {

inline Tensor<double> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(shape);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Rows drawn from a Gaussian, then normalized with a scalar loop.
inline FeatureBatch<double> random_unit_rows(std::size_t n, std::size_t d, Rng& rng) {
  Tensor<double> t({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0;
    for (std::size_t k = 0; k < d; ++k) {
      t.at(i, k) = rng.normal();
      sq += t.at(i, k) * t.at(i, k);
    }
    for (std::size_t k = 0; k < d; ++k) t.at(i, k) /= std::sqrt(sq);
  }
  return {t, true};
}

// Central differences of a scalar function of one tensor.
inline Tensor<double> numeric_gradient(const std::function<double(const Tensor<double>&)>& f,
                                       const Tensor<double>& x, double h = 1e-5) {
  Tensor<double> g(x.shape());
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

// ||a - b|| / max(||a||, ||b||, tiny)
inline double relative_error(const Tensor<double>& a, const Tensor<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-30});
}

inline double rel_diff(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300});
}

// Randomly initialized embedding model in double precision.
inline EmbeddingModel<double> tiny_embedding_model(std::size_t d, const std::vector<std::string>& classes,
                                                   double lambda = 0.5, std::uint64_t seed = 11) {
  EmbeddingArch arch{d, d, 2 * d, 24};
  auto m = build_embedding_model<double>("tiny", arch, classes, lambda);
  Rng rng(seed);
  m.image_encoder().init(rng);
  m.text_encoder().body().init(rng);
  for (auto& v : m.text_encoder().word_table().values()) v = rng.normal();
  return m;
}

// Small toy images of the source domain, double precision.
inline LabeledImages<double> toy_images(std::size_t per_class, std::size_t resolution = 16,
                                        std::uint64_t seed = 7) {
  DatasetSpec s = DatasetSpec::toy("source", seed);
  s.train_per_class = per_class;
  s.val_per_class = 1;
  s.resolution = resolution;
  return load_split<double>(s, Split::Train);
}

}  // namespace pdcl::test
