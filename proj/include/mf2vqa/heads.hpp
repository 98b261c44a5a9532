#pragma once

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mf2vqa/fusion.hpp"
#include "mf2vqa/random.hpp"

namespace mf2 {

/// Closed set of candidate answers, ids in insertion order.
class AnswerVocab {
 public:
  AnswerVocab() = default;
  explicit AnswerVocab(const std::vector<std::string>& answers) {
    for (const auto& a : answers) {
      if (!ids_.count(a)) {
        ids_.emplace(a, answers_.size());
        answers_.push_back(a);
      }
    }
  }

  std::size_t size() const { return answers_.size(); }
  const std::string& answer(std::size_t id) const { return answers_.at(id); }
  std::optional<std::size_t> find(const std::string& a) const {
    auto it = ids_.find(a);
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }
  const std::vector<std::string>& answers() const { return answers_; }

  std::string serialize() const {
    std::string out;
    for (std::size_t i = 0; i < answers_.size(); ++i) out += answers_[i] + "\t" + std::to_string(i) + "\n";
    return out;
  }

  static AnswerVocab parse(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::vector<std::string> answers;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto tab = line.rfind('\t');
      if (tab == std::string::npos) throw DataError("answer vocab line " + std::to_string(line_no) + ": missing tab", line_no);
      if (line.substr(tab + 1) != std::to_string(answers.size())) {
        throw DataError("answer vocab line " + std::to_string(line_no) + ": ids must be consecutive from 0", line_no);
      }
      answers.push_back(line.substr(0, tab));
    }
    AnswerVocab v(answers);
    if (v.size() != answers.size()) throw DataError("answer vocab: duplicate answers", 0);
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << serialize();
  }
  static AnswerVocab load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open answer vocabulary '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  bool operator==(const AnswerVocab& o) const { return answers_ == o.answers_; }

 private:
  std::vector<std::string> answers_;
  std::unordered_map<std::string, std::size_t> ids_;
};

namespace head_names {
inline const std::string cls_weight = "head.cls.weight";
inline const std::string cls_bias = "head.cls.bias";
inline const std::string mlm_text_bias = "head.mlm.text.bias";
inline const std::string mlm_visual_weight = "head.mlm.visual.weight";
inline const std::string mlm_visual_bias = "head.mlm.visual.bias";
}  // namespace head_names

template <class T>
void add_head_params(ParameterSet<T>& params, std::size_t hidden, std::size_t answers, std::size_t vocab_size,
                     Rng& rng) {
  if (answers < 2) throw ConfigError("classifier head needs at least 2 candidate answers");
  params.add(head_names::cls_weight, init::normal<T>({hidden, answers}, 0.02, rng));
  params.add(head_names::cls_bias, init::constant<T>({answers}, T(0)));
  params.add(head_names::mlm_text_bias, init::constant<T>({vocab_size}, T(0)));
  params.add(head_names::mlm_visual_weight, init::normal<T>({hidden, hidden}, 0.02, rng));
  params.add(head_names::mlm_visual_bias, init::constant<T>({hidden}, T(0)));
}

/// logits = h_cls W + b, h_cls is 1 x d.
template <class T>
Tensor<T> classify(const Tensor<T>& h_cls, const ParameterSet<T>& params) {
  const auto& w = params.get(head_names::cls_weight);
  if (h_cls.rank() != 2 || h_cls.dim(1) != w.dim(0)) {
    throw DimensionError("classify: h_cls " + shape_str(h_cls.shape()) + " vs weight " + shape_str(w.shape()));
  }
  return add_bias(matmul(h_cls, w), params.get(head_names::cls_bias));
}

template <class T>
std::size_t argmax(std::span<const T> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

// ---------------------------------------------------------------------------
// Masked modelling

struct MlmBatch {
  std::vector<std::size_t> corrupted_ids;   // text ids with selected ones set to [MASK]
  std::vector<std::size_t> text_positions;  // 0-based index into the text span
  std::vector<std::size_t> text_targets;    // original ids at text_positions
  std::vector<std::size_t> visual_stages;   // 1-based stages whose token is masked
  std::vector<std::uint8_t> withheld;       // per stage, 1 = masked

  std::size_t masked_count() const { return text_positions.size() + visual_stages.size(); }
};

/// Independently selects each real text token and each visual slot with
/// probability `rate`. Returns nullopt when nothing was selected.
inline std::optional<MlmBatch> try_mlm_corrupt(std::span<const std::size_t> ids, std::span<const std::uint8_t> padding,
                                               std::size_t stages, double rate, Rng& rng) {
  if (!(rate > 0.0 && rate < 1.0)) throw ContractError("mlm_corrupt: rate must be in (0,1)");
  if (!padding.empty() && padding.size() != ids.size()) throw DimensionError("mlm_corrupt: padding length mismatch");
  std::size_t maskable = stages;
  for (std::size_t i = 0; i < ids.size(); ++i) maskable += (padding.empty() || padding[i]) ? 1 : 0;
  if (maskable == 0) throw ContractError("mlm_corrupt: no maskable positions");
  MlmBatch b;
  b.corrupted_ids.assign(ids.begin(), ids.end());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!padding.empty() && !padding[i]) continue;
    if (rng.bernoulli(rate)) {
      b.text_positions.push_back(i);
      b.text_targets.push_back(ids[i]);
      b.corrupted_ids[i] = token_id::mask;
    }
  }
  b.withheld.assign(stages, 0);
  for (std::size_t s = 1; s <= stages; ++s) {
    if (rng.bernoulli(rate)) {
      b.visual_stages.push_back(s);
      b.withheld[s - 1] = 1;
    }
  }
  if (b.masked_count() == 0) return std::nullopt;
  return b;
}

inline MlmBatch mlm_corrupt(std::span<const std::size_t> ids, std::span<const std::uint8_t> padding,
                            std::size_t stages, double rate, Rng& rng) {
  auto b = try_mlm_corrupt(ids, padding, stages, rate, rng);
  if (!b) throw ContractError("mlm_corrupt: no position was selected for masking");
  return *std::move(b);
}

template <class T>
struct MlmLoss {
  Tensor<T> total;
  T text = T(0);
  T visual = T(0);
};

/// text term: cross-entropy of hidden rows against the transposed word table
/// (plus bias); visual term: MSE of a d->d regression against the original
/// projected tokens, which act as constants. total = text + beta * visual.
template <class T>
MlmLoss<T> mlm_loss(const Tensor<T>& hidden, const TokenLayout& layout, const MlmBatch& batch,
                    const Tensor<T>& visual_targets, const ParameterSet<T>& params, T beta = T(1)) {
  if (batch.masked_count() == 0) throw ContractError("mlm_loss: batch has no masked positions");
  MlmLoss<T> out;
  std::vector<Tensor<T>> terms;
  if (!batch.text_positions.empty()) {
    std::vector<std::size_t> slots;
    for (auto p : batch.text_positions) slots.push_back(layout.text_slot(p));
    auto rows = gather_rows(hidden, std::span<const std::size_t>(slots));
    auto logits = add_bias(matmul(rows, transpose(params.get(embed_names::word))), params.get(head_names::mlm_text_bias));
    auto ce = cross_entropy(logits, std::span<const std::size_t>(batch.text_targets));
    out.text = ce.item();
    terms.push_back(ce);
  }
  if (!batch.visual_stages.empty()) {
    std::vector<std::size_t> slots, rows_idx;
    for (auto s : batch.visual_stages) {
      slots.push_back(layout.visual_slot(s));
      rows_idx.push_back(s - 1);
    }
    auto pred = linear(gather_rows(hidden, std::span<const std::size_t>(slots)), params.get(head_names::mlm_visual_weight),
                       params.get(head_names::mlm_visual_bias));
    Tensor<T> target;
    {
      NoGradGuard guard;
      target = gather_rows(visual_targets.detach(), std::span<const std::size_t>(rows_idx));
    }
    auto err = mse(pred, target);
    out.visual = err.item();
    terms.push_back(scale(err, beta));
  }
  out.total = terms.size() == 1 ? terms.front() : add(terms[0], terms[1]);
  return out;
}

}  // namespace mf2
