#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mf2vqa/ops.hpp"
#include "mf2vqa/params.hpp"

namespace mf2 {

namespace token_id {
inline constexpr std::size_t pad = 0;
inline constexpr std::size_t cls = 1;
inline constexpr std::size_t sep = 2;
inline constexpr std::size_t mask = 3;
inline constexpr std::size_t unk = 4;
inline constexpr std::size_t first_free = 5;
}  // namespace token_id

/// Word-level vocabulary with the reserved ids [PAD]=0 [CLS]=1 [SEP]=2
/// [MASK]=3 [UNK]=4 followed by corpus tokens.
class Vocabulary {
 public:
  Vocabulary() {
    for (const char* t : {"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"}) append(t);
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::size_t id) const {
    if (id >= tokens_.size()) throw IndexError("vocabulary id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }
  std::size_t id(const std::string& tok) const {
    auto it = ids_.find(tok);
    return it == ids_.end() ? token_id::unk : it->second;
  }
  bool contains(const std::string& tok) const { return ids_.count(tok) > 0; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::size_t append(const std::string& tok) {
    if (ids_.count(tok)) throw ConfigError("duplicate vocabulary token '" + tok + "'");
    ids_.emplace(tok, tokens_.size());
    tokens_.push_back(tok);
    return tokens_.size() - 1;
  }

  std::string serialize() const {
    std::string out;
    for (std::size_t i = 0; i < tokens_.size(); ++i) out += tokens_[i] + "\t" + std::to_string(i) + "\n";
    return out;
  }

  static Vocabulary parse(const std::string& text) {
    Vocabulary v;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto tab = line.rfind('\t');
      if (tab == std::string::npos) throw DataError("vocabulary line " + std::to_string(line_no) + ": missing tab", line_no);
      const std::string tok = line.substr(0, tab);
      std::size_t id = 0;
      try {
        id = std::stoul(line.substr(tab + 1));
      } catch (const std::exception&) {
        throw DataError("vocabulary line " + std::to_string(line_no) + ": bad id", line_no);
      }
      if (id < token_id::first_free) {
        if (v.tokens_[id] != tok) {
          throw DataError("vocabulary line " + std::to_string(line_no) + ": reserved id " + std::to_string(id) +
                              " must be " + v.tokens_[id],
                          line_no);
        }
        continue;
      }
      if (id != v.size()) {
        throw DataError("vocabulary line " + std::to_string(line_no) + ": ids must be consecutive", line_no);
      }
      v.append(tok);
    }
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << serialize();
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open vocabulary '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> ids_;
};

// Lowercased words; whitespace and ASCII punctuation separate words and are dropped.
inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c) || (c < 128 && std::ispunct(c))) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

/// Vocabulary ordered by (count desc, token asc); tokens below min_count are dropped.
inline Vocabulary build_vocab(const std::vector<std::string>& corpus, std::size_t min_count = 1) {
  if (corpus.empty()) throw ContractError("build_vocab: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& line : corpus)
    for (auto& w : split_words(line)) ++counts[w];
  std::vector<std::pair<std::string, std::size_t>> sorted(counts.begin(), counts.end());
  std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary v;
  for (const auto& [tok, n] : sorted) {
    if (n >= min_count && !v.contains(tok)) v.append(tok);
  }
  return v;
}

inline std::vector<std::size_t> tokenize(const std::string& question, const Vocabulary& vocab,
                                         std::size_t max_len = 32) {
  std::vector<std::size_t> ids;
  for (const auto& w : split_words(question)) {
    if (ids.size() == max_len) break;
    ids.push_back(vocab.id(w));
  }
  return ids;
}

inline std::string detokenize(const std::vector<std::size_t>& ids, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embeddings: row = LayerNorm(word[id] + position[p] + segment[s])

struct EmbeddingConfig {
  std::size_t vocab_size = 0;
  std::size_t hidden = 64;
  std::size_t max_positions = 0;
  double eps = 1e-12;
};

namespace segment {
inline constexpr std::size_t text = 0;
inline constexpr std::size_t visual = 1;
}  // namespace segment

namespace embed_names {
inline const std::string word = "embed.word";
inline const std::string position = "embed.position";
inline const std::string segment = "embed.segment";
inline const std::string gain = "embed.ln.gain";
inline const std::string bias = "embed.ln.bias";
}  // namespace embed_names

template <class T>
void add_embedding_params(ParameterSet<T>& params, const EmbeddingConfig& cfg, Rng& rng) {
  if (cfg.vocab_size <= token_id::unk || cfg.max_positions == 0) throw ConfigError("embedding: invalid table sizes");
  params.add(embed_names::word, init::normal<T>({cfg.vocab_size, cfg.hidden}, 0.02, rng));
  params.add(embed_names::position, init::normal<T>({cfg.max_positions, cfg.hidden}, 0.02, rng));
  params.add(embed_names::segment, init::normal<T>({2, cfg.hidden}, 0.02, rng));
  params.add(embed_names::gain, init::constant<T>({cfg.hidden}, T(1)));
  params.add(embed_names::bias, init::constant<T>({cfg.hidden}, T(0)));
}

namespace detail {

template <class T>
Tensor<T> embedding_sum(std::span<const std::size_t> ids, std::size_t segment_id, std::size_t start_position,
                        const ParameterSet<T>& params) {
  if (ids.empty()) throw ContractError("embed_sequence: empty id list");
  const auto& word = params.get(embed_names::word);
  const auto& pos = params.get(embed_names::position);
  const auto& seg = params.get(embed_names::segment);
  for (auto id : ids) {
    if (id >= word.dim(0)) {
      throw IndexError("embed_sequence: token id " + std::to_string(id) + " >= vocabulary size " +
                       std::to_string(word.dim(0)));
    }
  }
  if (start_position + ids.size() > pos.dim(0)) {
    throw IndexError("embed_sequence: positions up to " + std::to_string(start_position + ids.size()) +
                     " exceed table of " + std::to_string(pos.dim(0)));
  }
  if (segment_id >= seg.dim(0)) throw IndexError("embed_sequence: segment id " + std::to_string(segment_id));
  std::vector<std::size_t> positions(ids.size()), segments(ids.size(), segment_id);
  for (std::size_t i = 0; i < ids.size(); ++i) positions[i] = start_position + i;
  return add(add(gather_rows(word, ids), gather_rows(pos, std::span<const std::size_t>(positions))),
             gather_rows(seg, std::span<const std::size_t>(segments)));
}

}  // namespace detail

template <class T>
Tensor<T> embed_sequence(std::span<const std::size_t> ids, std::size_t segment_id, std::size_t start_position,
                         const ParameterSet<T>& params, T eps = T(1e-12)) {
  return layer_norm(detail::embedding_sum(ids, segment_id, start_position, params), params.get(embed_names::gain),
                    params.get(embed_names::bias), eps);
}

// Same rows before the LayerNorm affine step (zero mean, unit variance).
template <class T>
std::vector<T> embed_sequence_standardized(std::span<const std::size_t> ids, std::size_t segment_id,
                                           std::size_t start_position, const ParameterSet<T>& params,
                                           T eps = T(1e-12)) {
  NoGradGuard guard;
  auto s = detail::embedding_sum(ids, segment_id, start_position, params);
  return standardize_rows<T>(s.data(), s.dim(1), eps);
}

/// Applies the same pipeline to a continuous 1 x d vector at `position`.
template <class T>
Tensor<T> embed_vector(const Tensor<T>& vec, std::size_t segment_id, std::size_t position,
                       const ParameterSet<T>& params, T eps = T(1e-12)) {
  const auto& pos = params.get(embed_names::position);
  if (position >= pos.dim(0)) {
    throw IndexError("embed_vector: position " + std::to_string(position) + " exceeds table of " +
                     std::to_string(pos.dim(0)));
  }
  const std::size_t p[1] = {position}, s[1] = {segment_id};
  auto sum = add(add(vec, gather_rows(pos, std::span<const std::size_t>(p))),
                 gather_rows(params.get(embed_names::segment), std::span<const std::size_t>(s)));
  return layer_norm(sum, params.get(embed_names::gain), params.get(embed_names::bias), eps);
}

}  // namespace mf2
