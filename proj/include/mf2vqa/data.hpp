#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mf2vqa/heads.hpp"
#include "mf2vqa/random.hpp"
#include "mf2vqa/text.hpp"
#include "mf2vqa/vision.hpp"

namespace mf2 {

struct Sample {
  std::string image;  // path relative to the dataset file's directory
  std::string question;
  std::string answer;
  std::string category;  // optional, empty when absent
  std::size_t line = 0;  // 1-based source line, 0 for in-memory samples

  bool operator==(const Sample&) const = default;
};

struct Caption {
  std::string image;
  std::string caption;
};

namespace detail {

inline std::string required_string(const nlohmann::json& obj, const char* key, std::size_t line,
                                   const std::string& path) {
  if (!obj.contains(key)) {
    throw DataError(path + ":" + std::to_string(line) + ": missing \"" + key + "\" key", line);
  }
  if (!obj[key].is_string()) throw DataError(path + ":" + std::to_string(line) + ": \"" + key + "\" must be a string", line);
  auto s = obj[key].get<std::string>();
  if (s.empty()) throw DataError(path + ":" + std::to_string(line) + ": \"" + key + "\" is empty", line);
  return s;
}

template <class F>
void for_each_json_line(const std::string& path, F&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset '" + path + "'");
  std::string text;
  std::size_t line_no = 0;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": malformed JSON (" + e.what() + ")", line_no);
    }
    if (!obj.is_object()) throw DataError(path + ":" + std::to_string(line_no) + ": expected a JSON object", line_no);
    fn(obj, line_no);
  }
}

}  // namespace detail

/// One JSON object per line: image, question, answer, optional category.
inline std::vector<Sample> load_dataset(const std::string& path) {
  std::vector<Sample> out;
  detail::for_each_json_line(path, [&](const nlohmann::json& obj, std::size_t line) {
    Sample s;
    s.image = detail::required_string(obj, "image", line, path);
    s.question = detail::required_string(obj, "question", line, path);
    s.answer = detail::required_string(obj, "answer", line, path);
    if (obj.contains("category")) {
      if (!obj["category"].is_string()) throw DataError(path + ":" + std::to_string(line) + ": bad category", line);
      s.category = obj["category"].get<std::string>();
    }
    s.line = line;
    out.push_back(std::move(s));
  });
  return out;
}

inline std::vector<Caption> load_captions(const std::string& path) {
  std::vector<Caption> out;
  detail::for_each_json_line(path, [&](const nlohmann::json& obj, std::size_t line) {
    out.push_back({detail::required_string(obj, "image", line, path), detail::required_string(obj, "caption", line, path)});
  });
  return out;
}

inline std::string to_jsonl_line(const Sample& s) {
  nlohmann::ordered_json j;
  j["image"] = s.image;
  j["question"] = s.question;
  j["answer"] = s.answer;
  if (!s.category.empty()) j["category"] = s.category;
  return j.dump();
}

inline void save_dataset(const std::string& path, const std::vector<Sample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& s : samples) out << to_jsonl_line(s) << '\n';
  if (!out) throw IoError("write failed for '" + path + "'");
}

/// Seeded shuffle, then contiguous train/val/test split.
struct Split {
  std::vector<Sample> train, val, test;
};

inline Split split_dataset(const std::vector<Sample>& samples, std::array<double, 3> fractions, std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0) || f > 1.0) throw ConfigError("split fractions must lie in [0,1]");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const std::size_t n = samples.size();
  const auto n_train = std::min(n, static_cast<std::size_t>(std::llround(fractions[0] * double(n))));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(fractions[1] * double(n))));
  Split out;
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n_train ? out.train : (i < n_train + n_val ? out.val : out.test);
    dst.push_back(samples[order[i]]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic two-scale VQA: a coarse shape filled with a fine texture.

inline const std::array<const char*, 4> kShapeNames = {"disk", "square", "cross", "triangle"};
inline const std::array<const char*, 4> kTextureNames = {"stripes", "dots", "plain", "checker"};

struct SyntheticSpec {
  std::size_t image_size = 32;
  std::size_t coarse_classes = 3;
  std::size_t fine_classes = 3;
  std::size_t train_images = 100;
  std::size_t val_images = 0;
  std::size_t test_images = 0;
  double noise = 0.05;
  std::uint64_t seed = 0;

  void validate() const {
    if (coarse_classes < 2 || coarse_classes > kShapeNames.size()) {
      throw ConfigError("coarse classes must be in [2," + std::to_string(kShapeNames.size()) + "]");
    }
    if (fine_classes < 2 || fine_classes > kTextureNames.size()) {
      throw ConfigError("fine classes must be in [2," + std::to_string(kTextureNames.size()) + "]");
    }
    if (image_size < 16) throw ConfigError("synthetic image size must be at least 16");
    if (noise < 0.0) throw ConfigError("noise must be non-negative");
  }
};

struct SyntheticImage {
  Image image;
  std::size_t shape = 0;
  std::size_t texture = 0;
};

namespace detail {

inline bool inside_shape(std::size_t shape, double dx, double dy, double r) {
  switch (shape) {
    case 0: return dx * dx + dy * dy <= r * r;
    case 1: return std::abs(dx) <= r && std::abs(dy) <= r;
    case 2: {
      const double w = r / 3.0;
      return (std::abs(dx) <= w && std::abs(dy) <= r) || (std::abs(dy) <= w && std::abs(dx) <= r);
    }
    default: {
      if (dy < -r || dy > r) return false;
      const double half = r * (dy + r) / (2.0 * r);
      return std::abs(dx) <= half;
    }
  }
}

}  // namespace detail

/// Draws one image. Every texture has mean intensity 0.5 inside the shape,
/// so a coarse (block-averaged) view carries shape but not texture.
inline SyntheticImage draw_synthetic(const SyntheticSpec& spec, Rng& rng) {
  const std::size_t n = spec.image_size;
  SyntheticImage out;
  out.shape = static_cast<std::size_t>(rng.below(spec.coarse_classes));
  out.texture = static_cast<std::size_t>(rng.below(spec.fine_classes));
  const double size = double(n);
  const double r = rng.uniform(0.34, 0.42) * size;
  const double cx = size / 2.0 + rng.uniform(-0.06, 0.06) * size;
  const double cy = size / 2.0 + rng.uniform(-0.06, 0.06) * size;
  const std::size_t period = 2 + static_cast<std::size_t>(rng.below(2));
  const std::size_t px = static_cast<std::size_t>(rng.below(period));
  const std::size_t py = static_cast<std::size_t>(rng.below(period));
  const double contrast = 0.5;
  out.image = Image{1, n, n, std::vector<float>(n * n, 0.0f)};
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      double v = 0.0;
      if (detail::inside_shape(out.shape, double(x) + 0.5 - cx, double(y) + 0.5 - cy, r)) {
        bool on = false;
        double frac = 0.0;
        switch (out.texture) {
          case 0:
            on = (y + py) % period == 0;
            frac = 1.0 / double(period);
            break;
          case 1:
            on = (x + px) % period == 0 && (y + py) % period == 0;
            frac = 1.0 / double(period * period);
            break;
          case 3:
            on = (x + y + px) % 2 == 0;
            frac = 0.5;
            break;
          default:
            break;
        }
        v = frac == 0.0 ? 0.5 : (on ? 0.5 + contrast * (1.0 - frac) : 0.5 - contrast * frac);
      }
      if (spec.noise > 0.0) v += rng.normal(0.0, spec.noise);
      out.image.at(0, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return out;
}

inline const std::array<const char*, 2> kShapeQuestions = {"what is the shape", "which shape is shown"};
inline const std::array<const char*, 2> kTextureQuestions = {"what is the texture", "which texture fills the object"};

inline std::string synthetic_caption(std::size_t shape, std::size_t texture, Rng& rng) {
  const std::string s = kShapeNames[shape], t = kTextureNames[texture];
  return rng.below(2) == 0 ? "a " + s + " with " + t + " texture" : t + " texture inside a " + s;
}

struct SyntheticDataset {
  std::vector<Sample> train, val, test;
  std::vector<Caption> captions;  // one per training image
  AnswerVocab answers;
  Vocabulary vocab;
};

/// Writes images/<split>_<index>.pgm, {train,val,test}.jsonl, captions.jsonl,
/// answers.txt and vocab.txt under `dir`. Each split draws from its own
/// seed stream, so splits never share an image.
inline SyntheticDataset generate_synthetic(const SyntheticSpec& spec, const std::string& dir) {
  spec.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "images", ec);
  if (ec) throw IoError("cannot create '" + dir + "': " + ec.message());

  SyntheticDataset ds;
  std::vector<std::string> answer_list;
  for (std::size_t i = 0; i < spec.coarse_classes; ++i) answer_list.emplace_back(kShapeNames[i]);
  for (std::size_t i = 0; i < spec.fine_classes; ++i) answer_list.emplace_back(kTextureNames[i]);
  ds.answers = AnswerVocab(answer_list);

  const std::array<std::pair<const char*, std::size_t>, 3> splits = {
      {{"train", spec.train_images}, {"val", spec.val_images}, {"test", spec.test_images}}};
  std::array<std::vector<Sample>*, 3> targets = {&ds.train, &ds.val, &ds.test};
  for (std::size_t k = 0; k < splits.size(); ++k) {
    Rng rng = Rng::derive(spec.seed, k);
    for (std::size_t i = 0; i < splits[k].second; ++i) {
      auto img = draw_synthetic(spec, rng);
      char name[64];
      std::snprintf(name, sizeof name, "images/%s_%05zu.pgm", splits[k].first, i);
      save_pgm((fs::path(dir) / name).string(), img.image);
      const std::string shape = kShapeNames[img.shape], texture = kTextureNames[img.texture];
      targets[k]->push_back({name, kShapeQuestions[rng.below(kShapeQuestions.size())], shape, "shape", 0});
      targets[k]->push_back({name, kTextureQuestions[rng.below(kTextureQuestions.size())], texture, "texture", 0});
      if (k == 0) ds.captions.push_back({name, synthetic_caption(img.shape, img.texture, rng)});
    }
  }
  std::vector<std::string> corpus;
  for (const auto* split : targets)
    for (const auto& s : *split) corpus.push_back(s.question);
  for (const auto& c : ds.captions) corpus.push_back(c.caption);
  for (const auto& a : answer_list) corpus.push_back(a);
  ds.vocab = build_vocab(corpus, 1);

  save_dataset((fs::path(dir) / "train.jsonl").string(), ds.train);
  save_dataset((fs::path(dir) / "val.jsonl").string(), ds.val);
  save_dataset((fs::path(dir) / "test.jsonl").string(), ds.test);
  {
    std::ofstream out(fs::path(dir) / "captions.jsonl", std::ios::binary);
    for (const auto& c : ds.captions) {
      nlohmann::ordered_json j;
      j["image"] = c.image;
      j["caption"] = c.caption;
      out << j.dump() << '\n';
    }
    if (!out) throw IoError("write failed for captions.jsonl");
  }
  ds.answers.save((fs::path(dir) / "answers.txt").string());
  ds.vocab.save((fs::path(dir) / "vocab.txt").string());
  return ds;
}

}  // namespace mf2
