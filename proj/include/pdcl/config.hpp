#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pdcl/core/error.hpp"
#include "pdcl/core/hash.hpp"
#include "pdcl/data.hpp"
#include "pdcl/perturbation.hpp"
#include "pdcl/trainer.hpp"

namespace pdcl {

// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitInvariant = 3;

inline constexpr const char* kRunRootEnv = "PDCL_RUN_ROOT";

inline std::filesystem::path run_root() {
  const char* env = std::getenv(kRunRootEnv);
  return env && *env ? std::filesystem::path(env) : std::filesystem::path("runs");
}

// A frozen model reference; an empty checkpoint means <zoo dir>/<id>.pdcl.
struct ModelRef {
  std::string id;
  std::string checkpoint;
};

struct PromptConfig {
  std::string mode = "heuristic";  // "heuristic" or "learned"
  std::string templ = "a photo of a {}";
  std::string domain = "toy";      // fills "{domain}" in templates
  std::string bank;                // learned mode: context-bank checkpoint
  std::size_t context_words = 16;
  double init_std = 0.02;
  std::size_t shots = 16;
  double lr = 0.002;
  std::size_t epochs = 50;
  std::size_t batch = 32;
};

// Frozen models the toy pipeline trains once with `prepare`.
struct ZooConfig {
  std::string dir;  // empty: <run root>/zoo
  std::size_t classifier_epochs = 10;
  double classifier_lr = 3e-3;
  std::size_t embedding_epochs = 10;
  double embedding_lr = 3e-3;
  double temperature = 0.01;
};

struct EvalConfig {
  std::vector<std::string> victims{"vgg-mini", "res-mini", "wide-mini"};
  std::vector<std::string> domains{"source", "shifted"};
  int jpeg_quality = 75;  // 0 disables the JPEG defense rows
  std::vector<double> sweep_eps{6, 7, 8, 9, 10};
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  DatasetSpec dataset = DatasetSpec::toy();
  ModelRef embedding{"clip-mini", ""};
  ModelRef surrogate{"vgg-mini", ""};
  PromptConfig prompt;
  TrainConfig train = toy_train_defaults();
  GeneratorArch generator = GeneratorArch::desk();
  std::string generator_checkpoint;
  ZooConfig zoo;
  EvalConfig eval;

  // The toy dataset has 10 classes, too few to draw 16 candidates.
  static TrainConfig toy_train_defaults() {
    TrainConfig t;
    t.loss.candidates = 10;
    return t;
  }

  std::filesystem::path zoo_dir() const {
    return zoo.dir.empty() ? run_root() / "zoo" : std::filesystem::path(zoo.dir);
  }
  std::filesystem::path model_path(const ModelRef& m) const {
    return m.checkpoint.empty() ? zoo_dir() / (m.id + ".pdcl") : std::filesystem::path(m.checkpoint);
  }
  std::filesystem::path classifier_path(const std::string& id) const {
    if (id == surrogate.id) return model_path(surrogate);
    return zoo_dir() / (id + ".pdcl");
  }

  // Dataset spec for one domain of the same class set.
  DatasetSpec domain_spec(const std::string& domain) const {
    DatasetSpec s = dataset;
    if (domain == s.domain) return s;
    if (s.source != DataSource::Synthetic) {
      throw ConfigError("domain '" + domain + "' needs a synthetic dataset source");
    }
    s.domain = domain;
    s.id = domain == "source" ? "toy10" : "toy10-" + domain;
    return s;
  }

  std::string resolved_template() const {
    std::string t = prompt.templ;
    const std::string key = "{domain}";
    for (auto pos = t.find(key); pos != std::string::npos; pos = t.find(key)) {
      t.replace(pos, key.size(), prompt.domain);
    }
    return t;
  }

  void validate() const {
    dataset.validate();
    train.validate();
    generator.validate();
    train.loss.validate(dataset.classes.size());
    if (prompt.mode != "heuristic" && prompt.mode != "learned") {
      throw ConfigError("prompt.mode must be 'heuristic' or 'learned', got '" + prompt.mode + "'");
    }
    if (prompt.mode == "heuristic" && resolved_template().find("{}") == std::string::npos) {
      throw ConfigError("prompt.template lacks a {} class slot");
    }
    if (prompt.shots == 0) throw ConfigError("prompt.shots must be >= 1");
    if (!(prompt.lr > 0)) throw ConfigError("prompt.lr must be > 0");
    if (!(zoo.temperature > 0)) throw ConfigError("zoo.temperature must be > 0");
    if (eval.jpeg_quality < 0 || eval.jpeg_quality > 100) {
      throw ConfigError("eval.jpeg_quality must lie in [0, 100]");
    }
    if (eval.victims.empty()) throw ConfigError("eval.victims is empty");
    for (const auto& d : eval.domains) (void)domain_spec(d);
    if (!std::is_sorted(eval.sweep_eps.begin(), eval.sweep_eps.end())) {
      throw ConfigError("eval.sweep_eps must be ascending");
    }
  }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json train = c.train;
  train.erase("seed");
  j = nlohmann::json{
      {"seed", c.seed},
      {"dataset", c.dataset},
      {"embedding", {{"id", c.embedding.id}, {"checkpoint", c.embedding.checkpoint}}},
      {"surrogate", {{"id", c.surrogate.id}, {"checkpoint", c.surrogate.checkpoint}}},
      {"prompt",
       {{"mode", c.prompt.mode},
        {"template", c.prompt.templ},
        {"domain", c.prompt.domain},
        {"bank", c.prompt.bank},
        {"context_words", c.prompt.context_words},
        {"init_std", c.prompt.init_std},
        {"shots", c.prompt.shots},
        {"lr", c.prompt.lr},
        {"epochs", c.prompt.epochs},
        {"batch", c.prompt.batch}}},
      {"train", train},
      {"generator", c.generator},
      {"generator_checkpoint", c.generator_checkpoint},
      {"zoo",
       {{"dir", c.zoo.dir},
        {"classifier_epochs", c.zoo.classifier_epochs},
        {"classifier_lr", c.zoo.classifier_lr},
        {"embedding_epochs", c.zoo.embedding_epochs},
        {"embedding_lr", c.zoo.embedding_lr},
        {"temperature", c.zoo.temperature}}},
      {"eval",
       {{"victims", c.eval.victims},
        {"domains", c.eval.domains},
        {"jpeg_quality", c.eval.jpeg_quality},
        {"sweep_eps", c.eval.sweep_eps}}}};
}

// Parses a complete document (every key present, as produced by merging
// onto the defaults).
inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  c.seed = j.at("seed").get<std::uint64_t>();
  c.dataset = j.at("dataset").get<DatasetSpec>();
  c.embedding = {j.at("embedding").at("id").get<std::string>(), j.at("embedding").at("checkpoint").get<std::string>()};
  c.surrogate = {j.at("surrogate").at("id").get<std::string>(), j.at("surrogate").at("checkpoint").get<std::string>()};
  const auto& p = j.at("prompt");
  p.at("mode").get_to(c.prompt.mode);
  p.at("template").get_to(c.prompt.templ);
  p.at("domain").get_to(c.prompt.domain);
  p.at("bank").get_to(c.prompt.bank);
  p.at("context_words").get_to(c.prompt.context_words);
  p.at("init_std").get_to(c.prompt.init_std);
  p.at("shots").get_to(c.prompt.shots);
  p.at("lr").get_to(c.prompt.lr);
  p.at("epochs").get_to(c.prompt.epochs);
  p.at("batch").get_to(c.prompt.batch);
  const auto& t = j.at("train");
  t.at("lr").get_to(c.train.adam.lr);
  t.at("beta1").get_to(c.train.adam.beta1);
  t.at("beta2").get_to(c.train.adam.beta2);
  t.at("batch").get_to(c.train.batch);
  t.at("epochs").get_to(c.train.epochs);
  t.at("max_steps").get_to(c.train.max_steps);
  c.train.budget = PerturbationBudget::from_levels(t.at("epsilon").get<double>(), c.dataset.lo,
                                                   c.dataset.hi);
  t.at("use_pdcl").get_to(c.train.use_pdcl);
  t.at("margin").get_to(c.train.loss.margin);
  t.at("candidates").get_to(c.train.loss.candidates);
  t.at("exclude_gt").get_to(c.train.loss.exclude_gt);
  t.at("candidate_scope").get_to(c.train.loss.scope);
  t.at("tap").get_to(c.train.tap);
  c.train.seed = c.seed;
  c.generator = j.at("generator").get<GeneratorArch>();
  j.at("generator_checkpoint").get_to(c.generator_checkpoint);
  const auto& z = j.at("zoo");
  z.at("dir").get_to(c.zoo.dir);
  z.at("classifier_epochs").get_to(c.zoo.classifier_epochs);
  z.at("classifier_lr").get_to(c.zoo.classifier_lr);
  z.at("embedding_epochs").get_to(c.zoo.embedding_epochs);
  z.at("embedding_lr").get_to(c.zoo.embedding_lr);
  z.at("temperature").get_to(c.zoo.temperature);
  const auto& e = j.at("eval");
  e.at("victims").get_to(c.eval.victims);
  e.at("domains").get_to(c.eval.domains);
  e.at("jpeg_quality").get_to(c.eval.jpeg_quality);
  e.at("sweep_eps").get_to(c.eval.sweep_eps);
}

namespace detail {

// Overlays `patch` onto `base`; keys absent from `base` are rejected by
// their dotted path. Arrays and scalars replace wholesale.
inline void merge_known(nlohmann::json& base, const nlohmann::json& patch, const std::string& at) {
  if (!patch.is_object()) throw ConfigError("config section '" + at + "' must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = at.empty() ? key : at + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    if (base[key].is_object()) {
      merge_known(base[key], value, path);
    } else {
      base[key] = value;
    }
  }
}

// Values of --set: JSON when it parses, otherwise a bare string.
inline nlohmann::json parse_override_value(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    return text;
  }
}

}  // namespace detail

// Applies "a.b.c=value" to a config document.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  nlohmann::json patch = detail::parse_override_value(assignment.substr(eq + 1));
  std::vector<std::string> parts;
  for (std::size_t b = 0, e; b <= key.size(); b = e + 1) {
    e = key.find('.', b);
    if (e == std::string::npos) e = key.size();
    parts.push_back(key.substr(b, e - b));
  }
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = nlohmann::json{{*it, patch}};
  detail::merge_known(doc, patch, "");
}

inline ExperimentConfig parse_experiment(const nlohmann::json& doc) {
  nlohmann::json full = ExperimentConfig{};
  detail::merge_known(full, doc, "");
  ExperimentConfig c;
  try {
    c = full.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config has a value of the wrong type: ") + e.what());
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides) {
  nlohmann::json doc = nlohmann::json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
  }
  nlohmann::json full = ExperimentConfig{};
  detail::merge_known(full, doc, "");
  for (const auto& o : overrides) apply_override(full, o);
  return parse_experiment(full);
}

// Hash of the canonical (sorted-key) config document.
inline std::string config_hash(const ExperimentConfig& c) {
  return hex64(fnv1a(nlohmann::json(c).dump()));
}

// Short, deterministic run id: subcommand plus a digest of config, seed and
// any command-line inputs that are not part of the config.
inline std::string make_run_id(const std::string& subcommand, const ExperimentConfig& c,
                               const std::string& extra = "") {
  Fnv1a h;
  h.update(subcommand);
  h.update(extra);
  h.update(config_hash(c));
  h.update(&c.seed, sizeof c.seed);
  return subcommand + "-" + hex64(h.digest()).substr(0, 12);
}

}  // namespace pdcl
