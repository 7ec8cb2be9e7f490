#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pdcl/core/error.hpp"
#include "pdcl/core/hash.hpp"
#include "pdcl/core/log.hpp"
#include "pdcl/core/rng.hpp"
#include "pdcl/data.hpp"
#include "pdcl/embedding_space.hpp"
#include "pdcl/io/container.hpp"
#include "pdcl/nn/optim.hpp"
#include "pdcl/objectives.hpp"
#include "pdcl/perturbation.hpp"
#include "pdcl/prompter.hpp"

namespace pdcl {

NLOHMANN_JSON_SERIALIZE_ENUM(CandidateScope, {{CandidateScope::SharedPerBatch, "shared_per_batch"},
                                              {CandidateScope::PerSample, "per_sample"}})

struct TrainConfig {
  nn::AdamConfig adam{};
  std::size_t batch = 16;
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // 0: no cap
  std::uint64_t seed = 0;
  PerturbationBudget budget{};
  bool use_pdcl = true;
  LossConfig loss{};
  std::string tap = "pool2";

  void validate() const {
    if (!(adam.lr > 0)) throw ConfigError("train: lr must be > 0");
    if (adam.beta1 < 0 || adam.beta1 >= 1 || adam.beta2 < 0 || adam.beta2 >= 1) {
      throw ConfigError("train: adam betas must lie in [0, 1)");
    }
    if (batch == 0) throw ConfigError("train: batch must be >= 1");
    if (epochs == 0) throw ConfigError("train: epochs must be >= 1");
    budget.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr", c.adam.lr},
                     {"beta1", c.adam.beta1},
                     {"beta2", c.adam.beta2},
                     {"batch", c.batch},
                     {"epochs", c.epochs},
                     {"max_steps", c.max_steps},
                     {"seed", c.seed},
                     {"epsilon", c.budget.levels()},
                     {"use_pdcl", c.use_pdcl},
                     {"margin", c.loss.margin},
                     {"candidates", c.loss.candidates},
                     {"exclude_gt", c.loss.exclude_gt},
                     {"candidate_scope", c.loss.scope},
                     {"tap", c.tap}};
}

// One optimizer step of the training log.
struct StepRecord {
  std::size_t step = 0;
  double l_surr = 0;
  double l_pdcl = 0;
  double total = 0;
  std::vector<std::size_t> adv_label_hist;  // K counts of the selected y'

  nlohmann::json to_json() const {
    return {{"step", step}, {"L_surr", l_surr}, {"L_PDCL", l_pdcl}, {"total", total},
            {"adv_label_hist", adv_label_hist}};
  }
};

struct TrainingLog {
  std::vector<StepRecord> steps;

  std::vector<double> totals() const {
    std::vector<double> t;
    for (const auto& s : steps) t.push_back(s.total);
    return t;
  }

  std::string to_jsonl() const {
    std::string out;
    for (const auto& s : steps) out += s.to_json().dump() + "\n";
    return out;
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write training log " + path.string());
    out << to_jsonl();
  }
};

// Where class text features come from during training. Deterministic
// prompters are encoded once; "{rand}" templates are re-encoded every step.
template <typename T>
struct PromptSource {
  const EmbeddingModel<T>* model = nullptr;
  Prompter<T> prompter = Prompter<T>::heuristic("a photo of a {}");
  ClassVocabulary classes;
};

// Run directory: <root>/<run_id>/{config.json, log.jsonl, ckpt-*.pdcl}.
struct RunDir {
  std::filesystem::path path;

  static RunDir create(const std::filesystem::path& root, const std::string& run_id) {
    RunDir r{root / run_id};
    std::filesystem::create_directories(r.path);
    return r;
  }
  std::filesystem::path config() const { return path / "config.json"; }
  std::filesystem::path log() const { return path / "log.jsonl"; }
  std::filesystem::path checkpoint(const std::string& tag) const {
    return path / ("ckpt-" + tag + ".pdcl");
  }
};

template <typename T>
void save_generator(const std::filesystem::path& path, const Generator<T>& gen,
                    const nlohmann::json& training_meta = nlohmann::json::object()) {
  io::Container c;
  c.meta = {{"kind", "generator"},
            {"arch", gen.arch()},
            {"range", {gen.lo(), gen.hi()}},
            {"training", training_meta}};
  io::put_parameters(c, "gen", gen.body());
  c.save(path);
}

template <typename T>
struct LoadedGenerator {
  Generator<T> gen;
  nlohmann::json training;
};

template <typename T>
LoadedGenerator<T> load_generator(const std::filesystem::path& path) {
  auto c = io::Container::load(path);
  if (c.meta.value("kind", "") != "generator") {
    throw IoError(path.string() + ": not a generator checkpoint");
  }
  LoadedGenerator<T> out{Generator<T>(c.meta.at("arch").get<GeneratorArch>(),
                                      c.meta.at("range").at(0).get<double>(),
                                      c.meta.at("range").at(1).get<double>()),
                         c.meta.at("training")};
  io::get_parameters(c, "gen", out.gen.body());
  return out;
}

template <typename T>
struct TrainResult {
  TrainingLog log;
  std::size_t steps = 0;
};

namespace detail {

template <typename T>
std::uint64_t frozen_fingerprint(const nn::Network<T>& surrogate, const EmbeddingModel<T>* model,
                                 const Prompter<T>* prompter) {
  Fnv1a h;
  const auto s = surrogate.weights_hash();
  h.update(&s, sizeof s);
  if (model) {
    const auto m = model->weights_hash();
    h.update(&m, sizeof m);
  }
  if (prompter && prompter->is_learned()) {
    const auto b = prompter->bank().hash();
    h.update(&b, sizeof b);
  }
  return h.digest();
}

}  // namespace detail

// Perturbation-generator training. Per mini-batch: generate, project, tap the
// surrogate on clean and adversarial images, optionally add the contrastive
// embedding loss, and take one Adam step on the generator only. Frozen models
// are fingerprinted before and after; drift is a hard failure.
template <typename T>
TrainResult<T> train_generator(const TrainConfig& cfg, Generator<T>& gen,
                               const nn::Network<T>& surrogate_net, const PromptSource<T>* prompts,
                               const LabeledImages<T>& data,
                               const std::optional<RunDir>& run = std::nullopt) {
  cfg.validate();
  if (data.size() == 0) throw DegenerateInputError("train_generator: empty dataset");
  if (cfg.use_pdcl && (!prompts || !prompts->model)) {
    throw ConfigError("train_generator: the contrastive loss needs an embedding model and prompts");
  }
  gen.require_compatible(slice_rows(data.images, 0, 1));
  SurrogateHandle<T> surrogate(surrogate_net, cfg.tap);
  const EmbeddingModel<T>* model = cfg.use_pdcl ? prompts->model : nullptr;
  const Prompter<T>* prompter = cfg.use_pdcl ? &prompts->prompter : nullptr;
  const std::size_t num_classes = cfg.use_pdcl ? prompts->classes.size() : 0;
  if (cfg.use_pdcl) cfg.loss.validate(num_classes);

  const std::uint64_t frozen_before = detail::frozen_fingerprint(surrogate_net, model, prompter);

  Rng shuffle_rng = Rng::derive(cfg.seed, 0xD0);
  Rng candidate_rng = Rng::derive(cfg.seed, 0xD1);
  Rng prompt_rng = Rng::derive(cfg.seed, 0xD2);

  std::optional<FeatureBatch<T>> fixed_text;
  if (cfg.use_pdcl && !prompter->is_stochastic()) {
    fixed_text = class_text_features(*model, *prompter, prompts->classes);
  }

  nn::Adam<T> opt(cfg.adam);
  auto params = gen.body().parameters();
  Generator<T> last_good = gen;
  TrainResult<T> result;
  const T alpha = static_cast<T>(cfg.loss.margin);

  auto abort_with_snapshot = [&](const TrainingAborted& e) {
    gen = last_good;
    if (run) {
      save_generator(run->checkpoint("last-good"), last_good,
                     nlohmann::json{{"config", cfg}, {"steps", result.steps}, {"aborted", e.what()}});
      result.log.write(run->log());
    }
    throw TrainingAborted(std::string(e.what()) + " at step " + std::to_string(result.steps) +
                          "; generator restored to last good state");
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = shuffle_rng.permutation(data.size());
    for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
      if (cfg.max_steps && result.steps >= cfg.max_steps) break;
      const std::size_t e = std::min(order.size(), b + cfg.batch);
      LabeledImages<T> mb = data.subset(std::span<const std::size_t>(order.data() + b, e - b));
      const Tensor<T>& x = mb.images;

      nn::Tape<T> gen_tape;
      Tensor<T> x_tilde = gen.forward(x, &gen_tape);
      if (!x_tilde.all_finite()) abort_with_snapshot(TrainingAborted("non-finite generator output"));
      Tensor<T> x_adv = project(x_tilde, x, cfg.budget);

      Tensor<T> f_clean = surrogate.features(x, nullptr);
      nn::Tape<T> sur_tape;
      Tensor<T> f_adv_raw = surrogate_net.forward_to(x_adv, &sur_tape,
                                                     surrogate_net.index_of(cfg.tap) + 1);
      const Shape fshape = f_adv_raw.shape();
      Tensor<T> f_adv = f_adv_raw.reshaped({fshape[0], f_adv_raw.item_size()});
      const T l_surr = surrogate_loss(f_adv, f_clean);
      Tensor<T> g_adv = surrogate.backward(surrogate_loss_grad(f_adv, f_clean), fshape, sur_tape);

      StepRecord rec;
      rec.step = result.steps;
      T l_pdcl{0};
      if (cfg.use_pdcl) {
        FeatureBatch<T> text = fixed_text ? *fixed_text
                                          : class_text_features(*model, *prompter, prompts->classes,
                                                                &prompt_rng);
        FeatureBatch<T> phi_clean = model->encode_images(x);
        auto adv_labels = select_adversarial_label(phi_clean, text, mb.labels, cfg.loss, candidate_rng);
        rec.adv_label_hist.assign(num_classes, 0);
        for (int y : adv_labels) ++rec.adv_label_hist[static_cast<std::size_t>(y)];

        nn::Tape<T> emb_tape;
        Tensor<T> raw = model->encode_images_raw(x_adv, &emb_tape);
        FeatureBatch<T> phi_adv = normalize_rows(raw);
        FeatureBatch<T> tau_adv = gather_features(text, adv_labels);
        FeatureBatch<T> tau_gt = gather_features(text, mb.labels);
        l_pdcl = pdcl_loss(phi_adv, tau_adv, tau_gt, alpha);
        Tensor<T> g_phi = pdcl_loss_grad(phi_adv, tau_adv, tau_gt, alpha);
        g_adv += model->image_encoder().backward(normalize_rows_backward(raw, g_phi), emb_tape, {});
      }

      try {
        rec.total = double(total_loss(l_surr, l_pdcl));
        if (!g_adv.all_finite()) throw TrainingAborted("non-finite gradient");
      } catch (const TrainingAborted& err) {
        abort_with_snapshot(err);
      }
      rec.l_surr = double(l_surr);
      rec.l_pdcl = double(l_pdcl);

      auto grads = gen.body().zero_grads();
      gen.backward(project_backward(g_adv, x_tilde, x, cfg.budget), gen_tape, grads);
      opt.step(params, grads);
      const bool finite = std::all_of(params.begin(), params.end(),
                                      [](const Tensor<T>* p) { return p->all_finite(); });
      if (!finite) abort_with_snapshot(TrainingAborted("non-finite generator parameters"));
      last_good = gen;
      result.log.steps.push_back(std::move(rec));
      ++result.steps;
    }
  }

  if (detail::frozen_fingerprint(surrogate_net, model, prompter) != frozen_before) {
    throw InvariantViolation("frozen model weights changed during generator training");
  }
  if (run) {
    result.log.write(run->log());
    save_generator(run->checkpoint("final"), gen,
                   nlohmann::json{{"config", cfg}, {"steps", result.steps}});
  }
  return result;
}

}  // namespace pdcl
