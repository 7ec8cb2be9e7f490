#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pdcl/core/error.hpp"
#include "pdcl/core/log.hpp"
#include "pdcl/core/rng.hpp"
#include "pdcl/data.hpp"
#include "pdcl/embedding_space.hpp"
#include "pdcl/io/container.hpp"
#include "pdcl/nn/functional.hpp"
#include "pdcl/nn/layers.hpp"
#include "pdcl/nn/optim.hpp"
#include "pdcl/prompter.hpp"

namespace pdcl {

// Classifier architectures known to the zoo:
//   vgg-mini   plain conv/max-pool stack; the surrogate. Mid-layer taps are
//              "pool1", "pool2", "pool3"; "pool2" sits where the third of
//              five pools sits in a full-size VGG.
//   res-mini   residual stages with average-pool downsampling.
//   wide-mini  5x5 leaky-ReLU convs with strided downsampling.
inline std::vector<std::string> classifier_archs() { return {"vgg-mini", "res-mini", "wide-mini"}; }

inline constexpr const char* kDefaultSurrogateTap = "pool2";

template <typename T>
nn::Network<T> build_classifier(const std::string& arch, std::size_t num_classes) {
  using namespace nn;
  Network<T> net;
  net.add("standardize", std::make_unique<Standardize<T>>(T(0.5), T(0.25)));
  if (arch == "vgg-mini") {
    net.add("conv1", std::make_unique<Conv2d<T>>(3, 16, 3));
    net.add("relu1", relu<T>());
    net.add("pool1", std::make_unique<MaxPool2d<T>>());
    net.add("conv2", std::make_unique<Conv2d<T>>(16, 32, 3));
    net.add("relu2", relu<T>());
    net.add("pool2", std::make_unique<MaxPool2d<T>>());
    net.add("conv3", std::make_unique<Conv2d<T>>(32, 64, 3));
    net.add("relu3", relu<T>());
    net.add("pool3", std::make_unique<MaxPool2d<T>>());
    net.add("gap", std::make_unique<GlobalAvgPool<T>>());
    net.add("fc", std::make_unique<Linear<T>>(64, num_classes));
  } else if (arch == "res-mini") {
    net.add("stem", std::make_unique<Conv2d<T>>(3, 24, 3));
    net.add("stem_relu", relu<T>());
    net.add("block1", std::make_unique<ResidualBlock<T>>(ResidualBlock<T>::conv(24)));
    net.add("down1", std::make_unique<AvgPool2d<T>>());
    net.add("block2", std::make_unique<ResidualBlock<T>>(ResidualBlock<T>::conv(24)));
    net.add("relu2", relu<T>());
    net.add("down2", std::make_unique<AvgPool2d<T>>());
    net.add("widen", std::make_unique<Conv2d<T>>(24, 48, 3));
    net.add("relu3", relu<T>());
    net.add("gap", std::make_unique<GlobalAvgPool<T>>());
    net.add("fc", std::make_unique<Linear<T>>(48, num_classes));
  } else if (arch == "wide-mini") {
    net.add("conv1", std::make_unique<Conv2d<T>>(3, 32, 5, 2, 2));
    net.add("act1", std::make_unique<LeakyReLU<T>>(T(0.1)));
    net.add("conv2", std::make_unique<Conv2d<T>>(32, 48, 5, 2, 2));
    net.add("act2", std::make_unique<LeakyReLU<T>>(T(0.1)));
    net.add("conv3", std::make_unique<Conv2d<T>>(48, 64, 3));
    net.add("act3", std::make_unique<LeakyReLU<T>>(T(0.1)));
    net.add("gap", std::make_unique<GlobalAvgPool<T>>());
    net.add("fc", std::make_unique<Linear<T>>(64, num_classes));
  } else {
    throw LookupError("unknown classifier architecture '" + arch + "'");
  }
  return net;
}

struct ClassifierTrainConfig {
  std::size_t epochs = 10;
  std::size_t batch = 32;
  double lr = 3e-3;
  std::uint64_t seed = 1;
};

// Cross-entropy training with Adam; returns per-epoch mean loss.
template <typename T>
std::vector<double> train_classifier(nn::Network<T>& net, const LabeledImages<T>& data,
                                     const ClassifierTrainConfig& cfg) {
  if (data.size() == 0) throw DegenerateInputError("train_classifier: empty dataset");
  Rng init_rng = Rng::derive(cfg.seed, 0xA0);
  net.init(init_rng);
  Rng data_rng = Rng::derive(cfg.seed, 0xA1);
  nn::Adam<T> opt({cfg.lr, 0.9, 0.999, 1e-8});
  auto params = net.parameters();
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = data_rng.permutation(data.size());
    double total = 0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
      const std::size_t e = std::min(order.size(), b + cfg.batch);
      LabeledImages<T> mb = data.subset(std::span<const std::size_t>(order.data() + b, e - b));
      nn::Tape<T> tape;
      Tensor<T> logits = net.forward(mb.images, &tape);
      auto lg = nn::softmax_cross_entropy(logits, mb.labels);
      auto grads = net.zero_grads();
      net.backward(lg.grad, tape, grads);
      opt.step(params, grads);
      total += double(lg.loss);
      ++batches;
    }
    history.push_back(total / double(batches));
  }
  return history;
}

template <typename T>
std::vector<int> predict(const nn::Network<T>& net, const Tensor<T>& images, std::size_t chunk = 128) {
  std::vector<int> out;
  out.reserve(images.dim(0));
  for (std::size_t b = 0; b < images.dim(0); b += chunk) {
    const std::size_t e = std::min(images.dim(0), b + chunk);
    auto p = nn::argmax_rows(net.forward(slice_rows(images, b, e), nullptr));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

// Words the desk text encoder knows: class-name words plus template words.
inline std::vector<std::string> embedding_words(const std::vector<std::string>& class_names) {
  std::vector<std::string> words{"a",      "an",     "the",      "photo",   "of",     "picture",
                                 "drawing", "image", "rendering", "shape",   "style",  "toy",
                                 "synthetic", "shifted", "small", "large",   "bright", "dark",
                                 "sketch", "pattern", "painting", "close",   "up",     "good"};
  for (const auto& name : class_names) {
    for (auto& w : WordVocabulary::split(name)) {
      if (std::find(words.begin(), words.end(), w) == words.end()) words.push_back(w);
    }
  }
  return words;
}

// Templates the embedding model is pretrained on; "{}" is the class slot.
inline std::vector<std::string> pretraining_templates() {
  return {"a photo of a {}",   "a picture of the {}", "a drawing of a {}", "a {} shape",
          "a rendering of a {}", "an image of a small {}", "a {}",      "a sketch of the {}"};
}

struct EmbeddingArch {
  std::size_t embed_dim = 32;
  std::size_t word_dim = 32;
  std::size_t text_hidden = 64;
  std::size_t max_tokens = 24;
};

template <typename T>
EmbeddingModel<T> build_embedding_model(const std::string& name, const EmbeddingArch& arch,
                                        const std::vector<std::string>& class_names, T lambda) {
  using namespace nn;
  Network<T> img;
  img.add("standardize", std::make_unique<Standardize<T>>(T(0.5), T(0.25)));
  img.add("conv1", std::make_unique<Conv2d<T>>(3, 16, 3));
  img.add("relu1", relu<T>());
  img.add("pool1", std::make_unique<MaxPool2d<T>>());
  img.add("conv2", std::make_unique<Conv2d<T>>(16, 32, 3));
  img.add("relu2", relu<T>());
  img.add("pool2", std::make_unique<AvgPool2d<T>>());
  img.add("conv3", std::make_unique<Conv2d<T>>(32, 64, 3));
  img.add("relu3", relu<T>());
  img.add("gap", std::make_unique<GlobalAvgPool<T>>());
  img.add("proj", std::make_unique<Linear<T>>(64, arch.embed_dim));

  Network<T> txt;
  txt.add("mean", std::make_unique<MeanTokens<T>>());
  txt.add("fc1", std::make_unique<Linear<T>>(arch.word_dim, arch.text_hidden));
  txt.add("tanh", std::make_unique<Tanh<T>>());
  txt.add("fc2", std::make_unique<Linear<T>>(arch.text_hidden, arch.embed_dim));

  TextEncoder<T> text(WordVocabulary(embedding_words(class_names)), arch.word_dim, std::move(txt),
                      arch.max_tokens);
  return EmbeddingModel<T>(name, arch.embed_dim, lambda, std::move(img), std::move(text));
}

struct EmbeddingTrainConfig {
  std::size_t epochs = 10;
  std::size_t batch = 32;
  double lr = 3e-3;
  // Softmax temperature used while pretraining; the frozen model keeps its own.
  double train_temperature = 0.07;
  double word_init_std = 1.0;
  std::uint64_t seed = 3;
};

// Image-to-prompt contrastive pretraining: each image is scored against one
// prompt per class (template drawn per batch) and trained with cross-entropy.
// Both encoders and the word table learn here; afterwards the model is frozen.
template <typename T>
std::vector<double> pretrain_embedding(EmbeddingModel<T>& model, const LabeledImages<T>& data,
                                       const ClassVocabulary& classes,
                                       const EmbeddingTrainConfig& cfg) {
  if (data.size() == 0) throw DegenerateInputError("pretrain_embedding: empty dataset");
  Rng init_rng = Rng::derive(cfg.seed, 0xB0);
  model.image_encoder().init(init_rng);
  model.text_encoder().body().init(init_rng);
  for (auto& v : model.text_encoder().word_table().values()) {
    v = static_cast<T>(init_rng.normal(0.0, cfg.word_init_std));
  }
  Rng data_rng = Rng::derive(cfg.seed, 0xB1);
  const auto templates = pretraining_templates();
  auto& text = model.text_encoder();
  const std::size_t k = classes.size(), d = model.embed_dim();
  const T inv_temp = static_cast<T>(1.0 / cfg.train_temperature);

  std::vector<Tensor<T>*> params = model.image_encoder().parameters();
  const std::size_t n_img = params.size();
  for (auto* p : text.body().parameters()) params.push_back(p);
  params.push_back(&text.word_table());
  nn::Adam<T> opt({cfg.lr, 0.9, 0.999, 1e-8});

  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = data_rng.permutation(data.size());
    double total = 0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
      const std::size_t e = std::min(order.size(), b + cfg.batch);
      LabeledImages<T> mb = data.subset(std::span<const std::size_t>(order.data() + b, e - b));
      const auto& templ = templates[data_rng.uniform_index(templates.size())];
      auto prompter = Prompter<T>::heuristic(templ);

      // Text side.
      std::vector<nn::Tape<T>> tapes(k);
      std::vector<std::vector<std::size_t>> token_ids(k);
      Tensor<T> traw({k, d});
      for (std::size_t c = 0; c < k; ++c) {
        std::string prompt = templ;
        prompt.replace(prompt.find("{}"), 2, classes.name(c));
        token_ids[c] = text.vocab().tokenize(prompt);
        auto p = prompter.build(classes.name(c), classes, text);
        Tensor<T> f = text.encode(p.tokens, &tapes[c]);
        std::copy(f.values().begin(), f.values().end(), traw.item(c).begin());
      }
      // Image side.
      nn::Tape<T> img_tape;
      Tensor<T> iraw = model.encode_images_raw(mb.images, &img_tape);
      FeatureBatch<T> phi = normalize_rows(iraw);
      FeatureBatch<T> tau = normalize_rows(traw);

      Tensor<T> logits = cosine_matrix(phi, tau);
      logits *= inv_temp;
      auto lg = nn::softmax_cross_entropy(logits, mb.labels);
      total += double(lg.loss);
      ++batches;

      // d/dphi = G tau / temp,  d/dtau = G^T phi / temp
      const std::size_t n = mb.size();
      Tensor<T> gphi({n, d}), gtau({k, d});
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) {
          const T g = lg.grad.at(i, j) * inv_temp;
          for (std::size_t q = 0; q < d; ++q) {
            gphi.at(i, q) += g * tau.vectors.at(j, q);
            gtau.at(j, q) += g * phi.vectors.at(i, q);
          }
        }
      std::vector<Tensor<T>> grads;
      for (auto* p : params) grads.emplace_back(p->shape());
      model.image_encoder().backward(normalize_rows_backward(iraw, gphi), img_tape,
                                     std::span<Tensor<T>>(grads.data(), n_img));
      Tensor<T> graw_t = normalize_rows_backward(traw, gtau);
      std::span<Tensor<T>> text_grads(grads.data() + n_img, grads.size() - n_img - 1);
      Tensor<T>& gword = grads.back();
      for (std::size_t c = 0; c < k; ++c) {
        Tensor<T> gtok = text.backward(slice_rows(graw_t, c, c + 1), tapes[c], text_grads);
        for (std::size_t t = 0; t < token_ids[c].size(); ++t) {
          auto dst = gword.item(token_ids[c][t]);
          auto src = gtok.item(t);
          for (std::size_t q = 0; q < dst.size(); ++q) dst[q] += src[q];
        }
      }
      opt.step(params, grads);
    }
    history.push_back(total / double(batches));
  }
  return history;
}

// Checkpoint helpers -------------------------------------------------------

template <typename T>
void save_classifier(const std::filesystem::path& path, const nn::Network<T>& net,
                     const std::string& id, const std::string& arch, std::size_t num_classes,
                     const std::string& dataset_id) {
  io::Container c;
  c.meta = {{"kind", "classifier"},
            {"id", id},
            {"arch", arch},
            {"num_classes", num_classes},
            {"dataset", dataset_id}};
  io::put_parameters(c, "net", net);
  c.save(path);
}

template <typename T>
struct LoadedClassifier {
  std::string id;
  std::string arch;
  std::size_t num_classes = 0;
  nn::Network<T> net;
};

template <typename T>
LoadedClassifier<T> load_classifier(const std::filesystem::path& path) {
  auto c = io::Container::load(path);
  if (c.meta.value("kind", "") != "classifier") {
    throw IoError(path.string() + ": not a classifier checkpoint");
  }
  LoadedClassifier<T> out;
  out.id = c.meta.at("id").get<std::string>();
  out.arch = c.meta.at("arch").get<std::string>();
  out.num_classes = c.meta.at("num_classes").get<std::size_t>();
  out.net = build_classifier<T>(out.arch, out.num_classes);
  io::get_parameters(c, "net", out.net);
  return out;
}

template <typename T>
void save_embedding_model(const std::filesystem::path& path, const EmbeddingModel<T>& model,
                          const EmbeddingArch& arch, const std::vector<std::string>& class_names,
                          const std::string& dataset_id) {
  io::Container c;
  c.meta = {{"kind", "embedding_model"},
            {"name", model.name()},
            {"embed_dim", arch.embed_dim},
            {"word_dim", arch.word_dim},
            {"text_hidden", arch.text_hidden},
            {"max_tokens", arch.max_tokens},
            {"temperature", double(model.temperature())},
            {"classes", class_names},
            {"dataset", dataset_id}};
  io::put_parameters(c, "image", model.image_encoder());
  io::put_parameters(c, "text", model.text_encoder().body());
  c.put("word_table", model.text_encoder().word_table());
  c.save(path);
}

template <typename T>
EmbeddingModel<T> load_embedding_model(const std::filesystem::path& path) {
  auto c = io::Container::load(path);
  if (c.meta.value("kind", "") != "embedding_model") {
    throw IoError(path.string() + ": not an embedding-model checkpoint");
  }
  EmbeddingArch arch{c.meta.at("embed_dim").get<std::size_t>(),
                     c.meta.at("word_dim").get<std::size_t>(),
                     c.meta.at("text_hidden").get<std::size_t>(),
                     c.meta.at("max_tokens").get<std::size_t>()};
  auto model = build_embedding_model<T>(c.meta.at("name").get<std::string>(), arch,
                                        c.meta.at("classes").get<std::vector<std::string>>(),
                                        static_cast<T>(c.meta.at("temperature").get<double>()));
  io::get_parameters(c, "image", model.image_encoder());
  io::get_parameters(c, "text", model.text_encoder().body());
  Tensor<T> table = c.get<T>("word_table");
  if (table.shape() != model.text_encoder().word_table().shape()) {
    throw ConfigError(path.string() + ": word table shape mismatch");
  }
  model.text_encoder().word_table() = std::move(table);
  return model;
}

template <typename T>
void save_context_bank(const std::filesystem::path& path, const ContextBank<T>& bank,
                       std::uint64_t init_seed, const std::string& dataset_id,
                       const nlohmann::json& extra = nlohmann::json::object()) {
  io::Container c;
  c.meta = {{"kind", "context_bank"},
            {"M", bank.words()},
            {"d", bank.width()},
            {"init_seed", init_seed},
            {"dataset", dataset_id}};
  for (const auto& [key, value] : extra.items()) c.meta[key] = value;
  c.put("context", bank.vectors);
  c.save(path);
}

template <typename T>
ContextBank<T> load_context_bank(const std::filesystem::path& path) {
  auto c = io::Container::load(path);
  if (c.meta.value("kind", "") != "context_bank") {
    throw IoError(path.string() + ": not a context-bank checkpoint");
  }
  ContextBank<T> bank{c.get<T>("context")};
  if (bank.words() != c.meta.at("M").get<std::size_t>() ||
      bank.width() != c.meta.at("d").get<std::size_t>()) {
    throw IoError(path.string() + ": context metadata disagrees with stored array");
  }
  return bank;
}

}  // namespace pdcl
