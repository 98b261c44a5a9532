#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mf2vqa/data.hpp"

namespace mf2 {

// Lowercased, whitespace-split tokens.
inline std::vector<std::string> answer_tokens(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::string normalize_answer(const std::string& s) {
  std::string out;
  for (const auto& t : answer_tokens(s)) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

inline double accuracy(const std::vector<std::string>& predictions, const std::vector<std::string>& references) {
  if (predictions.size() != references.size()) {
    throw DimensionError("accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                         std::to_string(references.size()) + " references");
  }
  if (predictions.empty()) throw ContractError("accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i)
    hits += normalize_answer(predictions[i]) == normalize_answer(references[i]) ? 1 : 0;
  return double(hits) / double(predictions.size());
}

/// Sentence BLEU without smoothing. Uses n = 1..min(4, |prediction|), the
/// geometric mean of clipped n-gram precisions and brevity penalty
/// exp(1 - r/c) when the prediction is shorter than the reference.
inline double bleu(const std::string& prediction, const std::string& reference) {
  const auto ref = answer_tokens(reference);
  if (ref.empty()) throw ContractError("bleu: empty reference");
  const auto hyp = answer_tokens(prediction);
  if (hyp.empty()) return 0.0;
  const std::size_t max_n = std::min<std::size_t>(4, hyp.size());
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    std::map<std::vector<std::string>, std::size_t> ref_counts, hyp_counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[{ref.begin() + i, ref.begin() + i + n}];
    for (std::size_t i = 0; i + n <= hyp.size(); ++i) ++hyp_counts[{hyp.begin() + i, hyp.begin() + i + n}];
    std::size_t clipped = 0;
    for (const auto& [gram, count] : hyp_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) clipped += std::min(count, it->second);
    }
    if (clipped == 0) return 0.0;
    log_sum += std::log(double(clipped) / double(hyp.size() - n + 1));
  }
  const double c = double(hyp.size()), r = double(ref.size());
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / double(max_n));
}

struct CategoryRow {
  std::string category;
  double accuracy = 0.0;
  double bleu = 0.0;
  std::size_t count = 0;
};

/// Per-category rows in alphabetical order followed by "Overall".
inline std::vector<CategoryRow> per_category_report(const std::vector<Sample>& samples,
                                                    const std::vector<std::string>& predictions) {
  if (samples.size() != predictions.size()) {
    throw DimensionError("per_category_report: " + std::to_string(predictions.size()) + " predictions for " +
                         std::to_string(samples.size()) + " samples");
  }
  struct Acc {
    double hits = 0, bleu = 0;
    std::size_t n = 0;
  };
  std::map<std::string, Acc> by_cat;
  Acc overall;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double hit = normalize_answer(predictions[i]) == normalize_answer(samples[i].answer) ? 1.0 : 0.0;
    const double b = bleu(predictions[i], samples[i].answer);
    auto& a = by_cat[samples[i].category.empty() ? "uncategorized" : samples[i].category];
    a.hits += hit;
    a.bleu += b;
    ++a.n;
    overall.hits += hit;
    overall.bleu += b;
    ++overall.n;
  }
  std::vector<CategoryRow> rows;
  auto row = [](const std::string& name, const Acc& a) {
    return CategoryRow{name, a.n ? a.hits / double(a.n) : 0.0, a.n ? a.bleu / double(a.n) : 0.0, a.n};
  };
  for (const auto& [cat, a] : by_cat) rows.push_back(row(cat, a));
  rows.push_back(row("Overall", overall));
  return rows;
}

inline std::string report_csv(const std::vector<CategoryRow>& rows) {
  std::ostringstream out;
  out << "category,accuracy,bleu,count\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%zu\n", r.category.c_str(), r.accuracy, r.bleu, r.count);
    out << buf;
  }
  return out.str();
}

inline std::string report_text(const std::vector<CategoryRow>& rows) {
  std::size_t width = 8;
  for (const auto& r : rows) width = std::max(width, r.category.size());
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s  %8s  %8s  %6s\n", int(width), "category", "acc", "bleu", "count");
  out << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-*s  %8.2f  %8.2f  %6zu\n", int(width), r.category.c_str(), 100.0 * r.accuracy,
                  100.0 * r.bleu, r.count);
    out << buf;
  }
  return out.str();
}

}  // namespace mf2
