// pdcl: command-line entry point for the toy attack pipeline.
//
//   pdcl prepare           train the frozen toy classifiers and embedding model
//   pdcl train-prompter    few-shot context-bank training
//   pdcl train-generator   perturbation-generator training
//   pdcl attack            write adversarial images for a split
//   pdcl evaluate          victim accuracy / ASR / PSNR / SSIM report
//   pdcl sweep-budget      the same generator re-projected over several budgets
//   pdcl report            pivot report CSVs into one table with an AVG column
//
// Exit codes: 0 ok, 2 configuration error, 3 invariant violation, 1 other.

#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "pdcl/pdcl.hpp"

namespace fs = std::filesystem;
using namespace pdcl;

namespace {

struct Options {
  std::string config;
  std::vector<std::string> sets;
  bool dry_run = false;
  bool quiet = false;
  // subcommand-specific
  std::size_t shots = 0;
  std::size_t context_words = 0;
  std::string checkpoint;
  std::string domain = "source";
  std::string split = "val";
  std::string format = "ppm";
  std::vector<double> eps;
  std::vector<std::string> inputs;
  std::string out;
  std::string export_dir;
  bool force = false;
};

struct Session {
  std::string command;
  ExperimentConfig cfg;
  std::string hash;
  std::string run_id;
  std::vector<fs::path> artifacts;  // must exist before compute
};

void require_artifacts(const Session& s) {
  std::string missing;
  for (const auto& p : s.artifacts) {
    if (!fs::exists(p)) missing += "\n  " + p.string();
  }
  if (!missing.empty()) {
    throw ConfigError("missing artifacts (run `pdcl prepare` or fix the config):" + missing);
  }
}

fs::path generator_path(const Session& s, const Options& o) {
  if (!o.checkpoint.empty()) return o.checkpoint;
  if (!s.cfg.generator_checkpoint.empty()) return s.cfg.generator_checkpoint;
  throw ConfigError(s.command + ": no generator checkpoint (use --checkpoint or generator_checkpoint)");
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  throw ConfigError("unknown split '" + name + "' (train or val)");
}

RunDir open_run(const Session& s) {
  RunDir run = RunDir::create(run_root(), s.run_id);
  nlohmann::json doc{{"command", s.command}, {"config_hash", s.hash}, {"run_id", s.run_id},
                     {"config", s.cfg}};
  write_text_file(run.config(), doc.dump(2) + "\n");
  return run;
}

Prompter<float> make_prompter(const ExperimentConfig& cfg) {
  if (cfg.prompt.mode == "learned") return Prompter<float>::learned(load_context_bank<float>(cfg.prompt.bank));
  return Prompter<float>::heuristic(cfg.resolved_template());
}

ModelIdentity identity_of(const fs::path& embedding_ckpt) {
  auto c = io::Container::load(embedding_ckpt);
  return {c.meta.at("name").get<std::string>(), c.meta.at("embed_dim").get<std::size_t>(),
          c.meta.at("temperature").get<double>()};
}

double trained_levels(const LoadedGenerator<float>& g, double fallback) {
  if (g.training.contains("config") && g.training["config"].contains("epsilon")) {
    return g.training["config"]["epsilon"].get<double>();
  }
  return fallback;
}

// --- subcommands -------------------------------------------------------------

int cmd_prepare(const Session& s, const Options& o) {
  const auto& cfg = s.cfg;
  const fs::path zoo = cfg.zoo_dir();
  fs::create_directories(zoo);
  auto train = load_split<float>(cfg.dataset, Split::Train);
  auto val = load_split<float>(cfg.dataset, Split::Val);
  ClassVocabulary classes(cfg.dataset.classes);
  nlohmann::json summary = nlohmann::json::object();

  ClassifierTrainConfig cc;
  cc.epochs = cfg.zoo.classifier_epochs;
  cc.lr = cfg.zoo.classifier_lr;
  cc.seed = cfg.seed + 1;
  for (const auto& arch : classifier_archs()) {
    const fs::path p = zoo / (arch + ".pdcl");
    nn::Network<float> net;
    if (fs::exists(p) && !o.force) {
      net = load_classifier<float>(p).net;
    } else {
      log::info("training classifier " + arch);
      net = build_classifier<float>(arch, classes.size());
      train_classifier(net, train, cc);
      save_classifier(p, net, arch, arch, classes.size(), cfg.dataset.id);
    }
    summary[arch] = evaluate_top1(net, val.images, val.labels);
    log::info(arch + " val top-1 " + AttackReport::fmt(summary[arch].get<double>()));
  }

  const fs::path ep = cfg.model_path(cfg.embedding);
  EmbeddingModel<float> model;
  if (fs::exists(ep) && !o.force) {
    model = load_embedding_model<float>(ep);
  } else {
    log::info("pretraining embedding model " + cfg.embedding.id);
    EmbeddingArch arch;
    model = build_embedding_model<float>(cfg.embedding.id, arch, cfg.dataset.classes,
                                         static_cast<float>(cfg.zoo.temperature));
    EmbeddingTrainConfig ec;
    ec.epochs = cfg.zoo.embedding_epochs;
    ec.lr = cfg.zoo.embedding_lr;
    ec.seed = cfg.seed + 3;
    pretrain_embedding(model, train, classes, ec);
    save_embedding_model(ep, model, arch, cfg.dataset.classes, cfg.dataset.id);
  }
  auto text = class_text_features(model, Prompter<float>::heuristic("a photo of a {}"), classes);
  summary[cfg.embedding.id + " zero-shot"] = zero_shot_accuracy(model, text, val.images, val.labels);

  if (!o.export_dir.empty()) {
    for (const auto& d : cfg.eval.domains) {
      DatasetSpec ds = cfg.domain_spec(d);
      for (Split sp : {Split::Train, Split::Val}) {
        export_split(load_split<float>(ds, sp), ds, sp, fs::path(o.export_dir) / ds.id);
      }
    }
  }
  write_text_file(zoo / "summary.json", summary.dump(2) + "\n");
  std::cout << summary.dump(2) << "\n";
  return kExitOk;
}

int cmd_train_prompter(const Session& s, const Options&) {
  const auto& cfg = s.cfg;
  RunDir run = open_run(s);
  auto model = load_embedding_model<float>(cfg.model_path(cfg.embedding));
  ClassVocabulary classes(cfg.dataset.classes);
  auto train = load_split<float>(cfg.dataset, Split::Train);
  auto val = load_split<float>(cfg.dataset, Split::Val);
  auto shots = few_shot_sample(train, classes.size(), cfg.prompt.shots, cfg.seed);

  auto init = ContextBank<float>::random(cfg.prompt.context_words, model.text_encoder().word_dim(),
                                         cfg.prompt.init_std, cfg.seed);
  ContextSchedule schedule;
  schedule.lr = cfg.prompt.lr;
  schedule.max_epochs = cfg.prompt.epochs;
  schedule.batch = cfg.prompt.batch;
  schedule.seed = cfg.seed;
  auto trained = train_context(init, shots.images, shots.labels, model, classes, schedule);
  if (trained.clamped) {
    log::warn("context loss clamped " + std::to_string(trained.clamped) + " probabilities at the floor");
  }

  auto acc = [&](const ContextBank<float>& bank) {
    auto text = class_text_features(model, Prompter<float>::learned(bank), classes);
    return zero_shot_accuracy(model, text, val.images, val.labels);
  };
  nlohmann::json summary{{"run_id", s.run_id},
                         {"config_hash", s.hash},
                         {"shots", cfg.prompt.shots},
                         {"context_words", cfg.prompt.context_words},
                         {"epoch_loss", trained.epoch_loss},
                         {"val_top1_random_bank", acc(init)},
                         {"val_top1_trained_bank", acc(trained.bank)}};
  save_context_bank(run.path / "bank.pdcl", trained.bank, cfg.seed, cfg.dataset.id,
                    {{"shots", cfg.prompt.shots}, {"config_hash", s.hash}});
  write_text_file(run.path / "summary.json", summary.dump(2) + "\n");
  std::cout << summary.dump(2) << "\n" << (run.path / "bank.pdcl").string() << "\n";
  return kExitOk;
}

int cmd_train_generator(const Session& s, const Options&) {
  const auto& cfg = s.cfg;
  RunDir run = open_run(s);
  auto surrogate = load_classifier<float>(cfg.model_path(cfg.surrogate));
  auto data = load_split<float>(cfg.dataset, Split::Train);
  std::optional<EmbeddingModel<float>> model;
  std::optional<PromptSource<float>> prompts;
  if (cfg.train.use_pdcl) {
    model = load_embedding_model<float>(cfg.model_path(cfg.embedding));
    prompts = PromptSource<float>{&*model, make_prompter(cfg), ClassVocabulary(cfg.dataset.classes)};
  }
  Generator<float> gen(cfg.generator, cfg.dataset.lo, cfg.dataset.hi);
  Rng init_rng = Rng::derive(cfg.seed, 0xE0);
  gen.init(init_rng);
  auto result = train_generator(cfg.train, gen, surrogate.net, prompts ? &*prompts : nullptr, data,
                                run);
  const auto& steps = result.log.steps;
  nlohmann::json summary{{"run_id", s.run_id},
                         {"config_hash", s.hash},
                         {"steps", result.steps},
                         {"first_total", steps.empty() ? 0.0 : steps.front().total},
                         {"last_total", steps.empty() ? 0.0 : steps.back().total},
                         {"checkpoint", run.checkpoint("final").string()}};
  write_text_file(run.path / "summary.json", summary.dump(2) + "\n");
  std::cout << summary.dump(2) << "\n";
  return kExitOk;
}

int cmd_attack(const Session& s, const Options& o) {
  const auto& cfg = s.cfg;
  RunDir run = open_run(s);
  auto g = load_generator<float>(generator_path(s, o));
  DatasetSpec ds = cfg.domain_spec(o.domain);
  const Split split = parse_split(o.split);
  auto data = load_split<float>(ds, split);
  // Crafting reads images only; labels are used for file layout afterwards.
  Tensor<float> adv = craft_adversarial(g.gen, data.images, cfg.train.budget);
  assert_within_budget(adv, data.images, cfg.train.budget);
  const fs::path out = o.out.empty() ? run.path / "adversarial" : fs::path(o.out);
  if (o.format == "ppm") {
    export_split(LabeledImages<float>{adv, data.labels}, ds, split, out);
  } else if (o.format == "container") {
    io::Container c;
    c.meta = {{"kind", "adversarial_batch"},
              {"dataset", ds.id},
              {"split", split_name(split)},
              {"epsilon", cfg.train.budget.levels()},
              {"config_hash", s.hash},
              {"labels", data.labels}};
    c.put("adversarial", adv);
    c.save(out / "adversarial.pdcl");
  } else {
    throw ConfigError("unknown attack output format '" + o.format + "' (ppm or container)");
  }
  std::cout << "wrote " << adv.dim(0) << " adversarial images to " << out.string() << "\n";
  return kExitOk;
}

struct EvalInputs {
  LoadedGenerator<float> gen;
  std::map<std::string, nn::Network<float>> victims;
  AttackReport report;
};

EvalInputs load_eval_inputs(const Session& s, const Options& o) {
  const auto& cfg = s.cfg;
  EvalInputs in{load_generator<float>(generator_path(s, o)), {}, {}};
  for (const auto& v : cfg.eval.victims) in.victims[v] = load_classifier<float>(cfg.classifier_path(v)).net;
  in.report.run_id = s.run_id;
  in.report.config_hash = s.hash;
  in.report.model = identity_of(cfg.model_path(cfg.embedding));
  return in;
}

void write_report(const RunDir& run, const AttackReport& report) {
  write_text_file(run.path / "report.csv", report.to_csv());
  write_text_file(run.path / "report.md", report.to_markdown());
}

int cmd_evaluate(const Session& s, const Options& o) {
  const auto& cfg = s.cfg;
  RunDir run = open_run(s);
  auto in = load_eval_inputs(s, o);
  PerturbationBudget budget = cfg.train.budget;
  if (!o.eps.empty()) {
    if (o.eps.size() != 1) throw ConfigError("evaluate takes a single --eps value");
    budget = PerturbationBudget::from_levels(o.eps[0], cfg.dataset.lo, cfg.dataset.hi);
  }
  const double trained = trained_levels(in.gen, cfg.train.budget.levels());
  for (const auto& d : cfg.eval.domains) {
    DatasetSpec ds = cfg.domain_spec(d);
    auto data = load_split<float>(ds, Split::Val);
    Tensor<float> adv = craft_adversarial(in.gen.gen, data.images, budget);
    for (const auto& v : cfg.eval.victims) {
      ReportRow row = evaluate_cell(in.victims[v], data.images, adv, data.labels, budget, ds.id, v);
      row.beyond_training_budget = budget.levels() > trained + 1e-9;
      in.report.rows.push_back(row);
      if (cfg.eval.jpeg_quality > 0) {
        if (auto j = jpeg_defense_eval(in.victims[v], data.images, adv, data.labels, budget,
                                       cfg.eval.jpeg_quality, ds.id, v)) {
          j->beyond_training_budget = row.beyond_training_budget;
          in.report.rows.push_back(*j);
        }
      }
    }
  }
  write_report(run, in.report);
  std::cout << in.report.to_markdown();
  return kExitOk;
}

int cmd_sweep(const Session& s, const Options& o) {
  const auto& cfg = s.cfg;
  RunDir run = open_run(s);
  auto in = load_eval_inputs(s, o);
  const std::vector<double> budgets = o.eps.empty() ? cfg.eval.sweep_eps : o.eps;
  const double trained = trained_levels(in.gen, cfg.train.budget.levels());
  for (const auto& d : cfg.eval.domains) {
    DatasetSpec ds = cfg.domain_spec(d);
    auto data = load_split<float>(ds, Split::Val);
    for (const auto& v : cfg.eval.victims) {
      auto rows = budget_sweep(in.gen.gen, in.victims[v], data.images, data.labels, budgets, trained,
                               ds.id, v, ds.lo, ds.hi);
      in.report.rows.insert(in.report.rows.end(), rows.begin(), rows.end());
    }
  }
  write_report(run, in.report);
  write_text_file(run.path / "sweep.svg",
                  sweep_svg(in.report.rows, "top-1 after attack vs budget (" + s.run_id + ")"));
  std::cout << in.report.to_markdown();
  return kExitOk;
}

int cmd_report(const Session&, const Options& o) {
  std::vector<ReportRow> rows;
  for (const auto& path : o.inputs) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read report " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    auto part = parse_report_csv(ss.str(), path);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  const std::string table = summary_table(rows);
  if (!o.out.empty()) write_text_file(o.out, table);
  std::cout << table;
  return kExitOk;
}

// Artifacts each subcommand reads, resolved before any compute.
std::vector<fs::path> artifacts_for(const std::string& cmd, const ExperimentConfig& cfg,
                                    const Options& o, const Session& s) {
  std::vector<fs::path> a;
  if (cmd == "train-prompter") a.push_back(cfg.model_path(cfg.embedding));
  if (cmd == "train-generator") {
    a.push_back(cfg.model_path(cfg.surrogate));
    if (cfg.train.use_pdcl) {
      a.push_back(cfg.model_path(cfg.embedding));
      if (cfg.prompt.mode == "learned") {
        if (cfg.prompt.bank.empty()) throw ConfigError("prompt.mode=learned needs prompt.bank");
        a.push_back(cfg.prompt.bank);
      }
    }
  }
  if (cmd == "attack") a.push_back(generator_path(s, o));
  if (cmd == "evaluate" || cmd == "sweep-budget") {
    a.push_back(generator_path(s, o));
    a.push_back(cfg.model_path(cfg.embedding));
    for (const auto& v : cfg.eval.victims) a.push_back(cfg.classifier_path(v));
  }
  if (cmd == "report") {
    if (o.inputs.empty()) throw ConfigError("report needs at least one report CSV");
    for (const auto& p : o.inputs) a.push_back(p);
  }
  return a;
}

int run(const std::string& cmd, Options& o) {
  if (cmd == "train-prompter") {
    if (o.shots) o.sets.push_back("prompt.shots=" + std::to_string(o.shots));
    if (o.context_words) o.sets.push_back("prompt.context_words=" + std::to_string(o.context_words));
  }
  Session s;
  s.command = cmd;
  s.cfg = load_experiment(o.config, o.sets);
  s.hash = config_hash(s.cfg);
  nlohmann::json extra{{"checkpoint", o.checkpoint}, {"domain", o.domain}, {"split", o.split},
                       {"format", o.format}, {"eps", o.eps}, {"out", o.out}, {"inputs", o.inputs}};
  s.run_id = make_run_id(cmd, s.cfg, extra.dump());
  s.artifacts = artifacts_for(cmd, s.cfg, o, s);
  if (cmd == "attack" || cmd == "evaluate") (void)parse_split(o.split);
  for (double e : o.eps) PerturbationBudget::from_levels(e).validate();
  if (o.dry_run) {
    // Resolves the config graph and artifact paths without loading weights.
    nlohmann::json doc{{"command", cmd},
                       {"config_hash", s.hash},
                       {"run_id", s.run_id},
                       {"run_dir", (run_root() / s.run_id).string()},
                       {"config", s.cfg}};
    nlohmann::json arts = nlohmann::json::array();
    for (const auto& p : s.artifacts) arts.push_back({{"path", p.string()}, {"exists", fs::exists(p)}});
    doc["artifacts"] = arts;
    std::cout << doc.dump(2) << "\n";
    require_artifacts(s);
    return kExitOk;
  }
  require_artifacts(s);
  if (cmd == "prepare") return cmd_prepare(s, o);
  if (cmd == "train-prompter") return cmd_train_prompter(s, o);
  if (cmd == "train-generator") return cmd_train_generator(s, o);
  if (cmd == "attack") return cmd_attack(s, o);
  if (cmd == "evaluate") return cmd_evaluate(s, o);
  if (cmd == "sweep-budget") return cmd_sweep(s, o);
  return cmd_report(s, o);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PDCL toy attack workbench"};
  app.require_subcommand(1);
  Options o;

  auto common = [&o](CLI::App* sub) {
    sub->add_option("-c,--config", o.config, "experiment config (JSON)");
    sub->add_option("--set", o.sets, "override a config key, e.g. --set train.epochs=3")
        ->expected(1)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    sub->add_flag("--dry-run", o.dry_run, "validate config and artifacts, then exit");
    sub->add_flag("-q,--quiet", o.quiet, "only print warnings");
  };

  auto* prepare = app.add_subcommand("prepare", "train the frozen toy classifiers and embedding model");
  common(prepare);
  prepare->add_flag("--force", o.force, "retrain even if checkpoints exist");
  prepare->add_option("--export", o.export_dir, "also write the toy datasets as PPM files here");

  auto* prompter = app.add_subcommand("train-prompter", "few-shot context-bank training");
  common(prompter);
  prompter->add_option("--shots", o.shots, "shots per class");
  prompter->add_option("--context-words", o.context_words, "context words M");

  auto* gen = app.add_subcommand("train-generator", "perturbation-generator training");
  common(gen);

  auto* attack = app.add_subcommand("attack", "write adversarial images for a split");
  common(attack);
  attack->add_option("--checkpoint", o.checkpoint, "generator checkpoint");
  attack->add_option("--domain", o.domain, "dataset domain (source or shifted)");
  attack->add_option("--split", o.split, "train or val");
  attack->add_option("--format", o.format, "ppm or container");
  attack->add_option("--out", o.out, "output directory (default: run directory)");

  auto* evaluate = app.add_subcommand("evaluate", "victim accuracy, ASR, PSNR and SSIM");
  common(evaluate);
  evaluate->add_option("--checkpoint", o.checkpoint, "generator checkpoint");
  evaluate->add_option("--eps", o.eps, "test budget in 0-255 units (default: training budget)");

  auto* sweep = app.add_subcommand("sweep-budget", "re-project one generator over several budgets");
  common(sweep);
  sweep->add_option("--checkpoint", o.checkpoint, "generator checkpoint");
  sweep->add_option("--eps", o.eps, "budgets in 0-255 units, ascending")->delimiter(',');

  auto* report = app.add_subcommand("report", "pivot report CSVs into one table");
  common(report);
  report->add_option("inputs", o.inputs, "report.csv files")->required();
  report->add_option("--out", o.out, "write the table here as well");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  if (o.quiet) log::set_level(log::Level::warn);
  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    return run(cmd, o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const LookupError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const InvariantViolation& e) {
    std::cerr << "invariant violation: " << e.what() << "\n";
    return kExitInvariant;
  } catch (const ContractViolation& e) {
    std::cerr << "invariant violation: " << e.what() << "\n";
    return kExitInvariant;
  } catch (const TrainingAborted& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return kExitInvariant;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}
