#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pdcl/core/error.hpp"
#include "pdcl/core/hash.hpp"
#include "pdcl/core/rng.hpp"
#include "pdcl/core/tensor.hpp"
#include "pdcl/io/image_io.hpp"

namespace pdcl {

// NCHW images with one label per image.
template <typename T>
struct LabeledImages {
  Tensor<T> images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }

  LabeledImages subset(std::span<const std::size_t> rows) const {
    LabeledImages out{gather_rows(images, rows), {}};
    for (auto r : rows) out.labels.push_back(labels[r]);
    return out;
  }
};

enum class Split { Train, Val };

inline const char* split_name(Split s) { return s == Split::Train ? "train" : "val"; }

enum class DataSource { Synthetic, Disk };

NLOHMANN_JSON_SERIALIZE_ENUM(DataSource, {{DataSource::Synthetic, "synthetic"},
                                          {DataSource::Disk, "disk"}})

// Ten real-word classes rendered by the synthetic recipe.
inline std::vector<std::string> toy_class_names() {
  return {"circle", "square",  "triangle", "cross", "ring",
          "diamond", "stripes", "checker",  "dots",  "hollow square"};
}

struct DatasetSpec {
  std::string id = "toy10";
  std::vector<std::string> classes = toy_class_names();
  std::size_t train_per_class = 200;
  std::size_t val_per_class = 50;
  std::size_t resolution = 32;
  double lo = 0.0;
  double hi = 1.0;
  DataSource source = DataSource::Synthetic;
  // Synthetic recipe.
  std::uint64_t seed = 7;
  std::string domain = "source";  // "source" or "shifted"
  // Disk layout: <path>/<split>/<class_name>/*.{ppm,jpg,jpeg}
  std::string path;

  static DatasetSpec toy(std::string domain = "source", std::uint64_t seed = 7) {
    DatasetSpec s;
    s.id = domain == "source" ? "toy10" : "toy10-" + domain;
    s.domain = std::move(domain);
    s.seed = seed;
    return s;
  }

  void validate() const {
    if (classes.size() < 2) throw ConfigError("dataset '" + id + "': needs at least 2 classes");
    std::set<std::string> uniq(classes.begin(), classes.end());
    if (uniq.size() != classes.size()) throw ConfigError("dataset '" + id + "': duplicate class names");
    if (resolution == 0) throw ConfigError("dataset '" + id + "': zero resolution");
    if (!(lo < hi)) throw ConfigError("dataset '" + id + "': data range needs lo < hi");
    if (source == DataSource::Synthetic) {
      if (domain != "source" && domain != "shifted") {
        throw ConfigError("dataset '" + id + "': unknown synthetic domain '" + domain + "'");
      }
      if (classes != toy_class_names()) {
        throw ConfigError("dataset '" + id + "': the synthetic recipe renders only the toy classes");
      }
    } else if (path.empty()) {
      throw ConfigError("dataset '" + id + "': disk source needs a path");
    }
  }
};

inline void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = nlohmann::json{{"id", s.id},
                     {"classes", s.classes},
                     {"train_per_class", s.train_per_class},
                     {"val_per_class", s.val_per_class},
                     {"resolution", s.resolution},
                     {"range", {s.lo, s.hi}},
                     {"source", s.source},
                     {"seed", s.seed},
                     {"domain", s.domain},
                     {"path", s.path}};
}

inline void from_json(const nlohmann::json& j, DatasetSpec& s) {
  static const std::set<std::string> known{"id",         "classes", "train_per_class",
                                           "val_per_class", "resolution", "range",
                                           "source",     "seed",    "domain", "path"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown dataset key '" + key + "'");
  }
  s = DatasetSpec{};
  if (j.contains("id")) j.at("id").get_to(s.id);
  if (j.contains("classes")) j.at("classes").get_to(s.classes);
  if (j.contains("train_per_class")) j.at("train_per_class").get_to(s.train_per_class);
  if (j.contains("val_per_class")) j.at("val_per_class").get_to(s.val_per_class);
  if (j.contains("resolution")) j.at("resolution").get_to(s.resolution);
  if (j.contains("range")) {
    s.lo = j.at("range").at(0).get<double>();
    s.hi = j.at("range").at(1).get<double>();
  }
  if (j.contains("source")) j.at("source").get_to(s.source);
  if (j.contains("seed")) j.at("seed").get_to(s.seed);
  if (j.contains("domain")) j.at("domain").get_to(s.domain);
  if (j.contains("path")) j.at("path").get_to(s.path);
}

namespace detail {

// Shape membership in local coordinates where the shape spans [-1, 1].
inline bool toy_shape_contains(int cls, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  const bool box = au <= 1.0 && av <= 1.0;
  switch (cls) {
    case 0: return u * u + v * v <= 1.0;                                 // circle
    case 1: return au <= 0.85 && av <= 0.85;                              // square
    case 2: return v >= -0.9 && v <= 0.9 && au <= (v + 0.9) / 1.8 * 0.95;  // triangle
    case 3: return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);  // cross
    case 4: {                                                              // ring
      const double r = std::sqrt(u * u + v * v);
      return r >= 0.55 && r <= 1.0;
    }
    case 5: return au + av <= 1.0;  // diamond
    case 6: return box && static_cast<int>(std::floor((v + 1.0) * 2.5)) % 2 == 0;  // stripes
    case 7:                                                                        // checker
      return box && (static_cast<int>(std::floor((u + 1.0) * 2.0)) +
                     static_cast<int>(std::floor((v + 1.0) * 2.0))) % 2 == 0;
    case 8: {  // dots
      if (!box) return false;
      const double gu = std::round(u / 0.67) * 0.67, gv = std::round(v / 0.67) * 0.67;
      return (u - gu) * (u - gu) + (v - gv) * (v - gv) <= 0.22 * 0.22;
    }
    case 9: {  // hollow square
      const double m = std::max(au, av);
      return m >= 0.6 && m <= 0.95;
    }
    default: return false;
  }
}

// One toy image in [0, 1], 3 x res x res. The shifted domain changes palette,
// background texture and noise level but keeps the shapes.
inline std::vector<float> render_toy_image(int cls, bool shifted, std::size_t res, Rng& rng) {
  const double r = rng.uniform(0.28, 0.40) * double(res);
  const double cx = double(res) / 2.0 + rng.uniform(-4.0, 4.0);
  const double cy = double(res) / 2.0 + rng.uniform(-4.0, 4.0);

  double bg[3], fg[3];
  if (!shifted) {
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    const double contrast = rng.uniform(0.25, 0.45);
    for (int c = 0; c < 3; ++c) {
      bg[c] = rng.uniform(0.15, 0.85);
      double f = bg[c] + sign * contrast + rng.uniform(-0.1, 0.1);
      if (f < 0.0 || f > 1.0) f = bg[c] - sign * contrast;
      fg[c] = std::clamp(f, 0.0, 1.0);
    }
  } else {
    const double grey = rng.uniform(0.3, 0.7);
    const std::size_t hue = rng.uniform_index(3);
    for (int c = 0; c < 3; ++c) {
      bg[c] = grey + rng.uniform(-0.05, 0.05);
      fg[c] = c == int(hue) ? std::min(1.0, grey + 0.45) : std::max(0.0, grey - 0.35);
    }
  }
  const double noise = shifted ? 0.06 : 0.04;
  const double tex_freq = rng.uniform(0.5, 1.0), tex_phase = rng.uniform(0.0, 2 * std::numbers::pi);

  std::vector<float> img(3 * res * res);
  for (std::size_t y = 0; y < res; ++y)
    for (std::size_t x = 0; x < res; ++x) {
      // 2x2 supersampling for soft edges.
      double cover = 0;
      for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx) {
          const double u = (double(x) + 0.25 + 0.5 * sx - cx) / r;
          const double v = (double(y) + 0.25 + 0.5 * sy - cy) / r;
          cover += toy_shape_contains(cls, u, v) ? 0.25 : 0.0;
        }
      const double tex = shifted ? 0.1 * std::sin(tex_freq * double(x + y) + tex_phase) : 0.0;
      for (int c = 0; c < 3; ++c) {
        const double v = cover * fg[c] + (1.0 - cover) * (bg[c] + tex) + rng.normal(0.0, noise);
        img[(c * res + y) * res + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return img;
}

template <typename T>
LabeledImages<T> synthesize(const DatasetSpec& spec, Split split) {
  const std::size_t per_class = split == Split::Train ? spec.train_per_class : spec.val_per_class;
  const std::size_t k = spec.classes.size(), res = spec.resolution;
  const bool shifted = spec.domain == "shifted";
  Rng rng = Rng::derive(spec.seed, fnv1a(spec.domain) ^ (split == Split::Train ? 0x7A : 0x7B));
  LabeledImages<T> out{Tensor<T>({per_class * k, 3, res, res}), {}};
  for (std::size_t i = 0; i < per_class * k; ++i) {
    const int cls = static_cast<int>(i % k);
    auto img = render_toy_image(cls, shifted, res, rng);
    auto dst = out.images.item(i);
    for (std::size_t p = 0; p < img.size(); ++p)
      dst[p] = static_cast<T>(spec.lo + (spec.hi - spec.lo) * img[p]);
    out.labels.push_back(cls);
  }
  return out;
}

template <typename T>
LabeledImages<T> load_from_disk(const DatasetSpec& spec, Split split) {
  namespace fs = std::filesystem;
  const fs::path root = fs::path(spec.path) / split_name(split);
  std::vector<std::string> problems;
  std::vector<std::pair<fs::path, int>> files;
  for (std::size_t c = 0; c < spec.classes.size(); ++c) {
    const fs::path dir = root / spec.classes[c];
    if (!fs::is_directory(dir)) {
      problems.push_back("missing class directory " + dir.string());
      continue;
    }
    std::vector<fs::path> found;
    for (const auto& e : fs::directory_iterator(dir)) {
      const auto ext = e.path().extension().string();
      if (ext == ".ppm" || ext == ".jpg" || ext == ".jpeg") found.push_back(e.path());
    }
    if (found.empty()) problems.push_back("no images in " + dir.string());
    std::sort(found.begin(), found.end());
    for (auto& f : found) files.emplace_back(std::move(f), static_cast<int>(c));
  }
  const std::size_t res = spec.resolution;
  LabeledImages<T> out{Tensor<T>({files.size(), 3, res, res}), {}};
  for (std::size_t i = 0; i < files.size(); ++i) {
    try {
      const auto ext = files[i].first.extension().string();
      io::Rgb8Image img =
          ext == ".ppm" ? io::read_ppm(files[i].first) : io::read_jpeg(files[i].first);
      io::from_rgb8(io::resize_nearest(img, res, res), out.images, i, spec.lo, spec.hi);
    } catch (const Error& e) {
      problems.push_back(e.what());
    }
    out.labels.push_back(files[i].second);
  }
  if (!problems.empty()) {
    std::string msg = "dataset '" + spec.id + "' (" + split_name(split) + "): " +
                      std::to_string(problems.size()) + " problem(s)";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw IoError(msg);
  }
  return out;
}

}  // namespace detail

// Labelled images of one split, in a fixed order for a fixed spec.
template <typename T = float>
LabeledImages<T> load_split(const DatasetSpec& spec, Split split) {
  spec.validate();
  return spec.source == DataSource::Synthetic ? detail::synthesize<T>(spec, split)
                                              : detail::load_from_disk<T>(spec, split);
}

// Writes a split in the disk layout load_split reads back.
template <typename T>
void export_split(const LabeledImages<T>& data, const DatasetSpec& spec, Split split,
                  const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  std::map<int, std::size_t> counter;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const fs::path dir = root / split_name(split) / spec.classes.at(data.labels[i]);
    fs::create_directories(dir);
    char name[32];
    std::snprintf(name, sizeof name, "%05zu.ppm", counter[data.labels[i]]++);
    io::write_ppm(dir / name, io::to_rgb8(data.images, i, spec.lo, spec.hi));
  }
}

// Exactly `shots` images per class, picked with a seeded stream; output is
// grouped by class.
template <typename T>
LabeledImages<T> few_shot_sample(const LabeledImages<T>& data, std::size_t num_classes,
                                 std::size_t shots, std::uint64_t seed) {
  if (shots == 0) throw ConfigError("few_shot_sample: shots must be >= 1");
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < data.size(); ++i) {
    by_class.at(static_cast<std::size_t>(data.labels[i])).push_back(i);
  }
  std::string short_classes;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (by_class[c].size() < shots) {
      short_classes += (short_classes.empty() ? "" : ", ") + std::to_string(c) + " (" +
                       std::to_string(by_class[c].size()) + ")";
    }
  }
  if (!short_classes.empty()) {
    throw ConfigError("few_shot_sample: fewer than " + std::to_string(shots) +
                      " images for classes " + short_classes);
  }
  Rng rng = Rng::derive(seed, 0xF5);
  std::vector<std::size_t> rows;
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (auto pick : rng.sample_without_replacement(by_class[c].size(), shots)) {
      rows.push_back(by_class[c][pick]);
    }
  }
  return data.subset(rows);
}

template <typename T>
LabeledImages<T> few_shot_sample(const DatasetSpec& spec, std::size_t shots, std::uint64_t seed) {
  return few_shot_sample(load_split<T>(spec, Split::Train), spec.classes.size(), shots, seed);
}

// Per-image content fingerprints, for split-disjointness checks.
template <typename T>
std::set<std::uint64_t> image_hashes(const LabeledImages<T>& data) {
  std::set<std::uint64_t> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Fnv1a h;
    h.update(data.images.item(i));
    out.insert(h.digest());
  }
  return out;
}

}  // namespace pdcl
