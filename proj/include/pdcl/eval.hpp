#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "pdcl/core/error.hpp"
#include "pdcl/core/log.hpp"
#include "pdcl/core/tensor.hpp"
#include "pdcl/io/image_io.hpp"
#include "pdcl/nn/functional.hpp"
#include "pdcl/nn/layers.hpp"
#include "pdcl/perturbation.hpp"

namespace pdcl {

template <typename T>
std::vector<int> classify(const nn::Network<T>& victim, const Tensor<T>& images,
                          std::size_t chunk = 128) {
  std::vector<int> out;
  out.reserve(images.dim(0));
  for (std::size_t b = 0; b < images.dim(0); b += chunk) {
    const std::size_t e = std::min(images.dim(0), b + chunk);
    auto p = nn::argmax_rows(victim.forward(slice_rows(images, b, e), nullptr));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

inline double top1_percent(std::span<const int> predictions, std::span<const int> labels) {
  if (labels.empty()) throw DegenerateInputError("top-1 over an empty set");
  if (predictions.size() != labels.size()) throw ConfigError("top-1: prediction/label count mismatch");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i];
  return 100.0 * double(correct) / double(labels.size());
}

template <typename T>
double evaluate_top1(const nn::Network<T>& victim, const Tensor<T>& images,
                     std::span<const int> labels) {
  if (labels.empty() || images.rank() == 0 || images.dim(0) == 0) {
    throw DegenerateInputError("evaluate_top1: empty image stream");
  }
  if (images.dim(0) != labels.size()) throw ConfigError("evaluate_top1: label count mismatch");
  auto pred = classify(victim, images);
  return top1_percent(pred, labels);
}

// Percent of initially-correct samples the attack flips; empty when nothing
// was correct on clean inputs.
inline std::optional<double> success_rate(std::span<const int> clean_pred,
                                          std::span<const int> adv_pred,
                                          std::span<const int> labels) {
  std::size_t correct = 0, flipped = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (clean_pred[i] != labels[i]) continue;
    ++correct;
    flipped += adv_pred[i] != labels[i];
  }
  if (correct == 0) return std::nullopt;
  return 100.0 * double(flipped) / double(correct);
}

template <typename T>
std::optional<double> attack_success_rate(const nn::Network<T>& victim, const Tensor<T>& clean,
                                          const Tensor<T>& adversarial,
                                          std::span<const int> labels) {
  clean.require_same_shape(adversarial, "attack_success_rate");
  if (clean.dim(0) != labels.size()) throw ConfigError("attack_success_rate: label count mismatch");
  return success_rate(classify(victim, clean), classify(victim, adversarial), labels);
}

// Perceptual quality ----------------------------------------------------------

inline constexpr double kPsnrCap = 99.0;

// PSNR over the data range, averaged over images; identical pairs give the cap.
template <typename T>
double psnr(const Tensor<T>& clean, const Tensor<T>& adv, double lo = 0.0, double hi = 1.0) {
  clean.require_same_shape(adv, "psnr");
  const std::size_t n = clean.dim(0);
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto a = clean.item(i);
    auto b = adv.item(i);
    double mse = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      const double d = double(a[k]) - double(b[k]);
      mse += d * d;
    }
    mse /= double(a.size());
    acc += mse == 0.0 ? kPsnrCap
                      : std::min(kPsnrCap, 10.0 * std::log10((hi - lo) * (hi - lo) / mse));
  }
  return acc / double(n);
}

struct SsimParams {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

namespace detail {
inline std::vector<double> gaussian_window(const SsimParams& p) {
  std::vector<double> g(p.window);
  const double c = double(p.window - 1) / 2.0;
  double sum = 0;
  for (std::size_t i = 0; i < p.window; ++i) {
    g[i] = std::exp(-(double(i) - c) * (double(i) - c) / (2 * p.sigma * p.sigma));
    sum += g[i];
  }
  for (auto& v : g) v /= sum;
  return g;
}
}  // namespace detail

// Mean SSIM with a Gaussian window over every fully-inside window position,
// per channel, averaged over channels and images. Images smaller than the
// window use a window of the image size.
template <typename T>
double ssim(const Tensor<T>& clean, const Tensor<T>& adv, double lo = 0.0, double hi = 1.0,
            SsimParams params = {}) {
  clean.require_same_shape(adv, "ssim");
  if (clean.rank() != 4) throw ConfigError("ssim: expected N x C x H x W");
  const std::size_t n = clean.dim(0), ch = clean.dim(1), h = clean.dim(2), w = clean.dim(3);
  params.window = std::min({params.window, h, w});
  const auto g = detail::gaussian_window(params);
  const std::size_t win = params.window;
  const double L = hi - lo;
  const double c1 = (params.k1 * L) * (params.k1 * L), c2 = (params.k2 * L) * (params.k2 * L);
  double acc = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t y = 0; y + win <= h; ++y)
        for (std::size_t x = 0; x + win <= w; ++x) {
          double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
          for (std::size_t u = 0; u < win; ++u)
            for (std::size_t v = 0; v < win; ++v) {
              const double wt = g[u] * g[v];
              const double a = clean.at(i, c, y + u, x + v), b = adv.at(i, c, y + u, x + v);
              mx += wt * a;
              my += wt * b;
              sxx += wt * a * a;
              syy += wt * b * b;
              sxy += wt * a * b;
            }
          const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
          acc += ((2 * mx * my + c1) * (2 * cxy + c2)) /
                 ((mx * mx + my * my + c1) * (vx + vy + c2));
          ++count;
        }
  return acc / double(count);
}

struct PerceptualScores {
  double psnr_db = 0;
  double ssim = 0;
};

template <typename T>
PerceptualScores perceptual_metrics(const Tensor<T>& clean, const Tensor<T>& adv, double lo = 0.0,
                                    double hi = 1.0) {
  clean.require_same_shape(adv, "perceptual_metrics");
  return {psnr(clean, adv, lo, hi), ssim(clean, adv, lo, hi)};
}

// Reports ---------------------------------------------------------------------

struct ModelIdentity {
  std::string name = "none";
  std::size_t embed_dim = 0;
  double temperature = 0;
};

struct ReportRow {
  std::string dataset;
  std::string victim;
  std::string defense = "none";
  double epsilon = 0;  // 0..255 units
  double top1_clean = 0;
  double top1_attacked = 0;
  std::optional<double> asr;
  double psnr_db = 0;
  double ssim = 0;
  bool beyond_training_budget = false;
};

struct AttackReport {
  std::string run_id;
  std::string config_hash;
  ModelIdentity model;
  std::vector<ReportRow> rows;

  static std::string fmt(double v, int decimals = 2) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    return buf;
  }

  static std::string header_csv() {
    return "run_id,config_hash,embedding_model,embed_dim,temperature,dataset,victim,defense,"
           "epsilon,top1_clean,top1_attacked,asr,psnr_db,ssim,beyond_training_budget";
  }

  std::string to_csv() const {
    std::string out = header_csv() + "\n";
    for (const auto& r : rows) {
      out += run_id + "," + config_hash + "," + model.name + "," + std::to_string(model.embed_dim) +
             "," + fmt(model.temperature, 4) + "," + r.dataset + "," + r.victim + "," + r.defense +
             "," + fmt(r.epsilon, 0) + "," + fmt(r.top1_clean) + "," + fmt(r.top1_attacked) + "," +
             (r.asr ? fmt(*r.asr) : std::string("null")) + "," + fmt(r.psnr_db) + "," +
             fmt(r.ssim, 4) + "," + (r.beyond_training_budget ? "true" : "false") + "\n";
    }
    return out;
  }

  std::string to_markdown() const {
    std::string out = "run " + run_id + "  config " + config_hash + "  embedding " + model.name +
                      " (d=" + std::to_string(model.embed_dim) +
                      ", temperature=" + fmt(model.temperature, 4) + ")\n" +
                      "ASR is over samples the victim classified correctly before the attack.\n\n";
    out += "| dataset | victim | defense | eps | top-1 clean | top-1 attacked | ASR | PSNR | SSIM |\n";
    out += "|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& r : rows) {
      out += "| " + r.dataset + " | " + r.victim + " | " + r.defense + " | " + fmt(r.epsilon, 0) +
             (r.beyond_training_budget ? "*" : "") + " | " + fmt(r.top1_clean) + " | " +
             fmt(r.top1_attacked) + " | " + (r.asr ? fmt(*r.asr) : std::string("n/a")) + " | " +
             fmt(r.psnr_db) + " | " + fmt(r.ssim, 4) + " |\n";
    }
    bool flagged = std::any_of(rows.begin(), rows.end(),
                               [](const ReportRow& r) { return r.beyond_training_budget; });
    if (flagged) out += "\n* budget larger than the one the generator was trained at\n";
    return out;
  }
};

// Unweighted mean of a row's cells, as in an "AVG." column.
inline double average_column(std::span<const double> cells) {
  if (cells.empty()) throw DegenerateInputError("average_column: no cells");
  return std::accumulate(cells.begin(), cells.end(), 0.0) / double(cells.size());
}

// Average ranks (1-based), ties share the mean rank.
inline std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = (double(i) + double(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

// Spearman rank correlation (Pearson over average ranks). Constant input
// has no defined correlation and throws.
inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("spearman: need >= 2 paired values");
  auto rx = ranks(x), ry = ranks(y);
  const double mx = average_column(rx), my = average_column(ry);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) throw DegenerateInputError("spearman: constant input");
  return sxy / std::sqrt(sxx * syy);
}

// One evaluation cell: clean and attacked top-1, ASR and image quality.
// The adversarial batch is checked against the budget here, not trusted.
template <typename T>
ReportRow evaluate_cell(const nn::Network<T>& victim, const Tensor<T>& clean,
                        const Tensor<T>& adversarial, std::span<const int> labels,
                        const PerturbationBudget& budget, std::string dataset, std::string victim_id) {
  assert_within_budget(adversarial, clean, budget);
  auto clean_pred = classify(victim, clean);
  auto adv_pred = classify(victim, adversarial);
  ReportRow row;
  row.dataset = std::move(dataset);
  row.victim = std::move(victim_id);
  row.epsilon = budget.levels();
  row.top1_clean = top1_percent(clean_pred, labels);
  row.top1_attacked = top1_percent(adv_pred, labels);
  row.asr = success_rate(clean_pred, adv_pred, labels);
  auto pm = perceptual_metrics(clean, adversarial, budget.lo, budget.hi);
  row.psnr_db = pm.psnr_db;
  row.ssim = pm.ssim;
  return row;
}

// The same generator re-projected at each budget (0..255 units, ascending).
template <typename T>
std::vector<ReportRow> budget_sweep(const Generator<T>& gen, const nn::Network<T>& victim,
                                    const Tensor<T>& images, std::span<const int> labels,
                                    std::span<const double> budgets_levels,
                                    double trained_levels, const std::string& dataset,
                                    const std::string& victim_id, double lo = 0.0,
                                    double hi = 1.0) {
  if (budgets_levels.empty()) throw ConfigError("budget_sweep: no budgets");
  if (!std::is_sorted(budgets_levels.begin(), budgets_levels.end())) {
    throw ConfigError("budget_sweep: budgets must be sorted ascending");
  }
  // The generator output does not depend on the budget; compute it once.
  Tensor<T> unbounded(images.shape());
  for (std::size_t b = 0; b < images.dim(0); b += 64) {
    const std::size_t e = std::min(images.dim(0), b + 64);
    Tensor<T> part = generate_unbounded(gen, slice_rows(images, b, e));
    std::copy(part.values().begin(), part.values().end(), unbounded.item(b).begin());
  }
  std::vector<ReportRow> rows;
  for (double levels : budgets_levels) {
    auto budget = PerturbationBudget::from_levels(levels, lo, hi);
    ReportRow row = evaluate_cell(victim, images, project(unbounded, images, budget), labels,
                                  budget, dataset, victim_id);
    row.beyond_training_budget = levels > trained_levels + 1e-9;
    if (row.beyond_training_budget) {
      log::warn("budget_sweep: eps " + AttackReport::fmt(levels, 0) +
                " exceeds the training budget " + AttackReport::fmt(trained_levels, 0));
    }
    rows.push_back(row);
  }
  return rows;
}

// Victim accuracy after JPEG compression of the adversarial images. A codec
// failure skips the row with a warning.
template <typename T>
std::optional<ReportRow> jpeg_defense_eval(const nn::Network<T>& victim, const Tensor<T>& clean,
                                           const Tensor<T>& adversarial,
                                           std::span<const int> labels,
                                           const PerturbationBudget& budget, int quality,
                                           const std::string& dataset,
                                           const std::string& victim_id) {
  if (quality < 1 || quality > 100) throw ConfigError("jpeg quality must lie in [1, 100]");
  assert_within_budget(adversarial, clean, budget);
  Tensor<T> defended;
  Tensor<T> clean_defended;
  try {
    defended = io::jpeg_roundtrip(adversarial, quality, budget.lo, budget.hi);
    clean_defended = io::jpeg_roundtrip(clean, quality, budget.lo, budget.hi);
  } catch (const IoError& e) {
    log::warn(std::string("jpeg defense row skipped: ") + e.what());
    return std::nullopt;
  }
  auto clean_pred = classify(victim, clean_defended);
  auto adv_pred = classify(victim, defended);
  ReportRow row;
  row.dataset = dataset;
  row.victim = victim_id;
  row.defense = "jpeg" + std::to_string(quality);
  row.epsilon = budget.levels();
  row.top1_clean = top1_percent(clean_pred, labels);
  row.top1_attacked = top1_percent(adv_pred, labels);
  row.asr = success_rate(clean_pred, adv_pred, labels);
  auto pm = perceptual_metrics(clean, adversarial, budget.lo, budget.hi);
  row.psnr_db = pm.psnr_db;
  row.ssim = pm.ssim;
  return row;
}

// Rows of a CSV written by AttackReport::to_csv.
inline std::vector<ReportRow> parse_report_csv(const std::string& text, const std::string& origin) {
  std::vector<ReportRow> rows;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line_no == 1) {
      if (line != AttackReport::header_csv()) throw IoError(origin + ": not a report CSV (bad header)");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> f;
    for (std::size_t b = 0, e; b <= line.size(); b = e + 1) {
      e = line.find(',', b);
      if (e == std::string::npos) e = line.size();
      f.push_back(line.substr(b, e - b));
    }
    if (f.size() != 15) {
      throw IoError(origin + ":" + std::to_string(line_no) + ": expected 15 fields, got " +
                    std::to_string(f.size()));
    }
    try {
      ReportRow r;
      r.dataset = f[5];
      r.victim = f[6];
      r.defense = f[7];
      r.epsilon = std::stod(f[8]);
      r.top1_clean = std::stod(f[9]);
      r.top1_attacked = std::stod(f[10]);
      if (f[11] != "null") r.asr = std::stod(f[11]);
      r.psnr_db = std::stod(f[12]);
      r.ssim = std::stod(f[13]);
      r.beyond_training_budget = f[14] == "true";
      rows.push_back(r);
    } catch (const std::logic_error&) {
      throw IoError(origin + ":" + std::to_string(line_no) + ": malformed number");
    }
  }
  return rows;
}

// Post-attack top-1 pivoted to one line per (victim, defense, eps) and one
// column per dataset, with an unweighted AVG column. A clean line per
// (victim, defense) comes first.
inline std::string summary_table(const std::vector<ReportRow>& rows) {
  std::vector<std::string> datasets;
  for (const auto& r : rows) {
    if (std::find(datasets.begin(), datasets.end(), r.dataset) == datasets.end()) {
      datasets.push_back(r.dataset);
    }
  }
  using Key = std::tuple<std::string, std::string, double>;
  std::map<Key, std::map<std::string, double>> attacked;
  std::map<std::pair<std::string, std::string>, std::map<std::string, double>> clean;
  for (const auto& r : rows) {
    attacked[{r.victim, r.defense, r.epsilon}][r.dataset] = r.top1_attacked;
    clean[{r.victim, r.defense}][r.dataset] = r.top1_clean;
  }
  std::string out = "| victim | defense | eps |";
  std::string rule = "|---|---|---|";
  for (const auto& d : datasets) {
    out += " " + d + " |";
    rule += "---|";
  }
  out += " AVG |\n" + rule + "---|\n";
  auto line = [&](const std::string& victim, const std::string& defense, const std::string& eps,
                  const std::map<std::string, double>& cells) {
    std::string s = "| " + victim + " | " + defense + " | " + eps + " |";
    std::vector<double> present;
    for (const auto& d : datasets) {
      auto it = cells.find(d);
      if (it == cells.end()) {
        s += " - |";
      } else {
        s += " " + AttackReport::fmt(it->second) + " |";
        present.push_back(it->second);
      }
    }
    return s + " " + AttackReport::fmt(average_column(present)) + " |\n";
  };
  for (const auto& [key, cells] : clean) out += line(key.first, key.second, "clean", cells);
  for (const auto& [key, cells] : attacked) {
    out += line(std::get<0>(key), std::get<1>(key), AttackReport::fmt(std::get<2>(key), 0), cells);
  }
  return out;
}

// Accuracy-vs-budget line plot, one polyline per (dataset, victim, defense).
inline std::string sweep_svg(const std::vector<ReportRow>& rows, const std::string& title) {
  std::map<std::string, std::vector<const ReportRow*>> series;
  double emin = 1e300, emax = -1e300;
  for (const auto& r : rows) {
    series[r.dataset + " / " + r.victim + (r.defense == "none" ? "" : " / " + r.defense)]
        .push_back(&r);
    emin = std::min(emin, r.epsilon);
    emax = std::max(emax, r.epsilon);
  }
  if (rows.empty()) emin = 0, emax = 1;
  if (emax == emin) emax = emin + 1;
  const double W = 640, H = 400, left = 60, right = 200, top = 40, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;
  auto px = [&](double e) { return left + (e - emin) / (emax - emin) * pw; };
  auto py = [&](double acc) { return top + (100.0 - acc) / 100.0 * ph; };
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" "
                  "font-family=\"sans-serif\" font-size=\"12\">\n";
  s += "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n";
  s += "<text x=\"" + AttackReport::fmt(left, 1) + "\" y=\"24\" font-size=\"14\">" + title + "</text>\n";
  s += "<line x1=\"" + AttackReport::fmt(left, 1) + "\" y1=\"" + AttackReport::fmt(top + ph, 1) +
       "\" x2=\"" + AttackReport::fmt(left + pw, 1) + "\" y2=\"" + AttackReport::fmt(top + ph, 1) +
       "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + AttackReport::fmt(left, 1) + "\" y1=\"" + AttackReport::fmt(top, 1) +
       "\" x2=\"" + AttackReport::fmt(left, 1) + "\" y2=\"" + AttackReport::fmt(top + ph, 1) +
       "\" stroke=\"black\"/>\n";
  for (int acc = 0; acc <= 100; acc += 25) {
    s += "<text x=\"" + AttackReport::fmt(left - 8, 1) + "\" y=\"" + AttackReport::fmt(py(acc) + 4, 1) +
         "\" text-anchor=\"end\">" + std::to_string(acc) + "</text>\n";
  }
  std::vector<double> ticks;
  for (const auto& r : rows) ticks.push_back(r.epsilon);
  std::sort(ticks.begin(), ticks.end());
  ticks.erase(std::unique(ticks.begin(), ticks.end()), ticks.end());
  for (double e : ticks) {
    s += "<text x=\"" + AttackReport::fmt(px(e), 1) + "\" y=\"" + AttackReport::fmt(top + ph + 18, 1) +
         "\" text-anchor=\"middle\">" + AttackReport::fmt(e, 0) + "</text>\n";
  }
  s += "<text x=\"" + AttackReport::fmt(left + pw / 2, 1) + "\" y=\"" + AttackReport::fmt(H - 10, 1) +
       "\" text-anchor=\"middle\">epsilon (/255)</text>\n";
  s += "<text x=\"16\" y=\"" + AttackReport::fmt(top + ph / 2, 1) +
       "\" transform=\"rotate(-90 16 " + AttackReport::fmt(top + ph / 2, 1) +
       ")\" text-anchor=\"middle\">top-1 after attack (%)</text>\n";
  std::size_t ci = 0;
  for (const auto& [name, pts] : series) {
    const char* col = colors[ci % 6];
    std::string poly;
    for (const auto* r : pts) {
      poly += AttackReport::fmt(px(r->epsilon), 1) + "," + AttackReport::fmt(py(r->top1_attacked), 1) + " ";
    }
    s += "<polyline fill=\"none\" stroke=\"" + std::string(col) + "\" stroke-width=\"2\" points=\"" +
         poly + "\"/>\n";
    const double ly = top + 16.0 * double(ci);
    s += "<rect x=\"" + AttackReport::fmt(left + pw + 12, 1) + "\" y=\"" + AttackReport::fmt(ly, 1) +
         "\" width=\"10\" height=\"10\" fill=\"" + col + "\"/>\n";
    s += "<text x=\"" + AttackReport::fmt(left + pw + 26, 1) + "\" y=\"" + AttackReport::fmt(ly + 9, 1) +
         "\">" + name + "</text>\n";
    ++ci;
  }
  s += "</svg>\n";
  return s;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

}  // namespace pdcl
