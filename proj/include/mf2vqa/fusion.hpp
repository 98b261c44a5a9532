#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mf2vqa/ops.hpp"
#include "mf2vqa/params.hpp"
#include "mf2vqa/text.hpp"

namespace mf2 {

enum class InjectMode { Replace, Add };

/// Stage s (1-based) enters the residual stream right before layer
/// injection_layer[s-1] (1-based). Stages not yet injected sit in their
/// visual slot as the embedded [MASK] token.
struct FusionSchedule {
  std::size_t layers = 0;
  std::vector<std::size_t> injection_layer;

  std::size_t stages() const { return injection_layer.size(); }
  std::size_t layer_of(std::size_t stage) const { return injection_layer.at(stage - 1); }
  // Number of transformer layers that process stage `stage` as image content.
  std::size_t layers_seen(std::size_t stage) const { return layers - layer_of(stage) + 1; }

  // Stage s -> layer s; requires one layer per stage.
  static FusionSchedule stagewise(std::size_t stages, std::size_t layers) {
    if (stages != layers) {
      throw ConfigError("staged fusion needs one transformer layer per visual stage (stages=" +
                        std::to_string(stages) + ", layers=" + std::to_string(layers) + ")");
    }
    FusionSchedule s{layers, {}};
    for (std::size_t i = 1; i <= stages; ++i) s.injection_layer.push_back(i);
    s.validate();
    return s;
  }

  // Every stage injected before layer 1.
  static FusionSchedule all_at_once(std::size_t stages, std::size_t layers) {
    FusionSchedule s{layers, std::vector<std::size_t>(stages, 1)};
    s.validate();
    return s;
  }

  void validate() const {
    if (layers == 0 || injection_layer.empty()) throw ConfigError("fusion schedule: empty");
    for (std::size_t i = 0; i < injection_layer.size(); ++i) {
      if (injection_layer[i] < 1 || injection_layer[i] > layers) {
        throw ConfigError("fusion schedule: stage " + std::to_string(i + 1) + " mapped to layer " +
                          std::to_string(injection_layer[i]) + " outside [1," + std::to_string(layers) + "]");
      }
      if (i > 0 && injection_layer[i] < injection_layer[i - 1]) {
        throw ConfigError("fusion schedule: injection layers must be non-decreasing in stage");
      }
    }
  }
};

enum class SlotRole { Cls, Text, Sep, Visual };

/// [CLS], n text slots, [SEP], S visual slots.
struct TokenLayout {
  std::size_t n_text = 0;
  std::size_t stages = 0;
  std::vector<SlotRole> roles;
  std::vector<std::size_t> segment_ids;
  std::vector<std::uint8_t> padding_mask;  // 1 = real token, 0 = padding

  std::size_t length() const { return roles.size(); }
  std::size_t text_slot(std::size_t i) const { return 1 + i; }
  std::size_t sep_slot() const { return 1 + n_text; }
  std::size_t visual_slot(std::size_t stage) const { return 1 + n_text + stage; }

  std::vector<std::string> role_labels() const {
    std::vector<std::string> out;
    std::size_t t = 0, v = 0;
    for (auto r : roles) {
      switch (r) {
        case SlotRole::Cls: out.emplace_back("CLS"); break;
        case SlotRole::Text: out.push_back("TEXT" + std::to_string(t++)); break;
        case SlotRole::Sep: out.emplace_back("SEP"); break;
        case SlotRole::Visual: out.push_back("VIS" + std::to_string(++v)); break;
      }
    }
    return out;
  }

  static TokenLayout make(std::size_t n_text, std::size_t stages, std::span<const std::uint8_t> text_padding = {}) {
    if (!text_padding.empty() && text_padding.size() != n_text) {
      throw DimensionError("token layout: padding mask has " + std::to_string(text_padding.size()) +
                           " entries for " + std::to_string(n_text) + " text tokens");
    }
    TokenLayout l;
    l.n_text = n_text;
    l.stages = stages;
    auto push = [&](SlotRole r, std::size_t seg, std::uint8_t real) {
      l.roles.push_back(r);
      l.segment_ids.push_back(seg);
      l.padding_mask.push_back(real);
    };
    push(SlotRole::Cls, segment::text, 1);
    for (std::size_t i = 0; i < n_text; ++i) push(SlotRole::Text, segment::text, text_padding.empty() ? 1 : text_padding[i]);
    push(SlotRole::Sep, segment::text, 1);
    for (std::size_t s = 0; s < stages; ++s) push(SlotRole::Visual, segment::visual, 1);
    return l;
  }
};

struct FusionConfig {
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t layers = 5;
  std::size_t ffn_mult = 4;
  std::size_t max_text_len = 32;
  double eps = 1e-12;
  double mask_value = -1e9;
  InjectMode inject = InjectMode::Replace;

  void validate() const {
    if (hidden == 0 || heads == 0 || layers == 0 || ffn_mult == 0) throw ConfigError("fusion: zero-sized config");
    if (hidden % heads != 0) {
      throw ConfigError("fusion: hidden size " + std::to_string(hidden) + " not divisible by " +
                        std::to_string(heads) + " heads");
    }
  }
};

/// Per layer, per head: T x T attention weights, row-major.
struct AttentionTrace {
  std::size_t length = 0;
  std::vector<std::vector<std::vector<double>>> weights;
  TokenLayout layout;
};

template <class T>
struct FusionOutput {
  Tensor<T> hidden;                     // T x d
  Tensor<T> h_cls;                      // 1 x d, row of the CLS slot
  std::vector<Tensor<T>> layer_outputs; // output of each layer, in order
  TokenLayout layout;
  std::vector<AttentionTrace> trace;    // at most one entry, when recording
};

namespace fusion_names {
inline std::string layer(std::size_t l, const std::string& rest) { return "fusion.layer" + std::to_string(l) + "." + rest; }
}  // namespace fusion_names

// BERT-style init: N(0, 0.02) matrices, zero biases, unit LayerNorm gains.
template <class T>
void add_fusion_params(ParameterSet<T>& params, const FusionConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.hidden, f = cfg.hidden * cfg.ffn_mult;
  for (std::size_t l = 1; l <= cfg.layers; ++l) {
    for (const char* p : {"attn.q", "attn.k", "attn.v", "attn.o"}) {
      params.add(fusion_names::layer(l, std::string(p) + ".weight"), init::normal<T>({d, d}, 0.02, rng));
      params.add(fusion_names::layer(l, std::string(p) + ".bias"), init::constant<T>({d}, T(0)));
    }
    params.add(fusion_names::layer(l, "ffn.w1.weight"), init::normal<T>({d, f}, 0.02, rng));
    params.add(fusion_names::layer(l, "ffn.w1.bias"), init::constant<T>({f}, T(0)));
    params.add(fusion_names::layer(l, "ffn.w2.weight"), init::normal<T>({f, d}, 0.02, rng));
    params.add(fusion_names::layer(l, "ffn.w2.bias"), init::constant<T>({d}, T(0)));
    for (const char* p : {"ln1", "ln2"}) {
      params.add(fusion_names::layer(l, std::string(p) + ".gain"), init::constant<T>({d}, T(1)));
      params.add(fusion_names::layer(l, std::string(p) + ".bias"), init::constant<T>({d}, T(0)));
    }
  }
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return add_bias(matmul(x, weight), bias);
}

/// softmax(Q K^T / sqrt(d_k) + mask) V. `key_mask[j] == 0` excludes key j
/// (its pre-softmax score gets `mask_value`). Weights are written to
/// `weights_out` when non-null.
template <class T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::span<const std::uint8_t> key_mask, double mask_value = -1e9,
                               std::vector<double>* weights_out = nullptr) {
  detail::require_rank(q, 2, "scaled_dot_attention");
  detail::require_rank(k, 2, "scaled_dot_attention");
  detail::require_rank(v, 2, "scaled_dot_attention");
  if (q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
    throw DimensionError("scaled_dot_attention: Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()) + ", V " +
                         shape_str(v.shape()));
  }
  const std::size_t n = k.dim(0);
  if (!key_mask.empty() && key_mask.size() != n) {
    throw DimensionError("scaled_dot_attention: mask of " + std::to_string(key_mask.size()) + " for " +
                         std::to_string(n) + " keys");
  }
  std::vector<T> bias(n, T(0));
  bool any = key_mask.empty();
  for (std::size_t j = 0; j < key_mask.size(); ++j) {
    if (key_mask[j]) {
      any = true;
    } else {
      bias[j] = static_cast<T>(mask_value);
    }
  }
  if (!any) throw ContractError("scaled_dot_attention: every key is masked");
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(q.dim(1)));
  auto scores = add_bias(scale(matmul(q, transpose(k)), inv_sqrt), Tensor<T>({n}, std::move(bias)));
  auto weights = softmax(scores, 1);
  if (weights_out) weights_out->assign(weights.data().begin(), weights.data().end());
  return matmul(weights, v);
}

template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& x, const ParameterSet<T>& params, std::size_t layer,
                               std::span<const std::uint8_t> key_mask, const FusionConfig& cfg,
                               std::vector<std::vector<double>>* head_weights = nullptr) {
  cfg.validate();
  auto p = [&](const char* name) -> const Tensor<T>& { return params.get(fusion_names::layer(layer, name)); };
  const auto q = linear(x, p("attn.q.weight"), p("attn.q.bias"));
  const auto k = linear(x, p("attn.k.weight"), p("attn.k.bias"));
  const auto v = linear(x, p("attn.v.weight"), p("attn.v.bias"));
  const std::size_t dk = cfg.hidden / cfg.heads;
  std::vector<Tensor<T>> heads;
  if (head_weights) head_weights->assign(cfg.heads, {});
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    heads.push_back(scaled_dot_attention(slice_cols(q, h * dk, dk), slice_cols(k, h * dk, dk),
                                         slice_cols(v, h * dk, dk), key_mask, cfg.mask_value,
                                         head_weights ? &(*head_weights)[h] : nullptr));
  }
  auto merged = cfg.heads == 1 ? heads.front() : concat_cols(heads);
  return linear(merged, p("attn.o.weight"), p("attn.o.bias"));
}

/// Post-norm block: x1 = LN(x + MHA(x)); out = LN(x1 + W2 gelu(W1 x1)).
template <class T>
Tensor<T> transformer_layer_forward(const Tensor<T>& x, const ParameterSet<T>& params, std::size_t layer,
                                    std::span<const std::uint8_t> key_mask, const FusionConfig& cfg,
                                    std::vector<std::vector<double>>* head_weights = nullptr) {
  auto p = [&](const char* name) -> const Tensor<T>& { return params.get(fusion_names::layer(layer, name)); };
  const T eps = static_cast<T>(cfg.eps);
  auto x1 = layer_norm(add(x, multi_head_attention(x, params, layer, key_mask, cfg, head_weights)),
                       p("ln1.gain"), p("ln1.bias"), eps);
  auto ff = linear(gelu(linear(x1, p("ffn.w1.weight"), p("ffn.w1.bias"))), p("ffn.w2.weight"), p("ffn.w2.bias"));
  return layer_norm(add(x1, ff), p("ln2.gain"), p("ln2.bias"), eps);
}

template <class T>
struct AssembledInput {
  Tensor<T> x;  // T x d
  TokenLayout layout;
};

/// Embeds question ids at positions 1..n with the text segment.
template <class T>
Tensor<T> embed_text(std::span<const std::size_t> ids, const ParameterSet<T>& params, double eps = 1e-12) {
  if (ids.empty()) return {};
  return embed_sequence(ids, segment::text, 1, params, static_cast<T>(eps));
}

/// [CLS] + text rows + [SEP] + S embedded [MASK] placeholders (visual segment).
/// `text_emb` may be undefined for an empty question.
template <class T>
AssembledInput<T> assemble_input(const Tensor<T>& text_emb, std::span<const std::uint8_t> text_padding,
                                 std::size_t stages, const ParameterSet<T>& params, const FusionConfig& cfg) {
  const std::size_t n = text_emb.defined() ? text_emb.dim(0) : 0;
  if (n > cfg.max_text_len) {
    throw LengthError("assemble_input: " + std::to_string(n) + " text tokens exceed max_len " +
                      std::to_string(cfg.max_text_len));
  }
  if (stages == 0) throw ConfigError("assemble_input: no visual stages");
  const T eps = static_cast<T>(cfg.eps);
  const std::size_t cls[1] = {token_id::cls}, sep[1] = {token_id::sep};
  std::vector<std::size_t> masks(stages, token_id::mask);
  std::vector<Tensor<T>> parts;
  parts.push_back(embed_sequence<T>(cls, segment::text, 0, params, eps));
  if (n) parts.push_back(text_emb);
  parts.push_back(embed_sequence<T>(sep, segment::text, n + 1, params, eps));
  parts.push_back(embed_sequence<T>(masks, segment::visual, n + 2, params, eps));
  return {concat_rows(parts), TokenLayout::make(n, stages, text_padding)};
}

struct StagedOptions {
  bool record_trace = false;
  // Stages whose token is withheld (the slot keeps its [MASK] content); used by MLM.
  std::vector<std::uint8_t> withheld;
};

/// Runs the L layers, placing each stage's embedded visual token into its
/// slot right before the layer the schedule assigns to it.
template <class T>
FusionOutput<T> staged_forward(const Tensor<T>& text_emb, std::span<const std::uint8_t> text_padding,
                               const Tensor<T>& visual, const FusionSchedule& schedule, const ParameterSet<T>& params,
                               const FusionConfig& cfg, const StagedOptions& opts = {}) {
  schedule.validate();
  cfg.validate();
  if (schedule.layers != cfg.layers) {
    throw ConfigError("staged_forward: schedule has " + std::to_string(schedule.layers) + " layers, model has " +
                      std::to_string(cfg.layers));
  }
  const std::size_t S = schedule.stages();
  detail::require_rank(visual, 2, "staged_forward");
  if (visual.dim(0) != S || visual.dim(1) != cfg.hidden) {
    throw DimensionError("staged_forward: visual tokens " + shape_str(visual.shape()) + " for " + std::to_string(S) +
                         " stages of width " + std::to_string(cfg.hidden));
  }
  auto in = assemble_input(text_emb, text_padding, S, params, cfg);
  FusionOutput<T> out;
  out.layout = in.layout;
  if (opts.record_trace) out.trace.push_back(AttentionTrace{in.layout.length(), {}, in.layout});
  Tensor<T> x = in.x;
  const T eps = static_cast<T>(cfg.eps);
  for (std::size_t l = 1; l <= cfg.layers; ++l) {
    for (std::size_t s = 1; s <= S; ++s) {
      if (schedule.layer_of(s) != l) continue;
      if (s <= opts.withheld.size() && opts.withheld[s - 1]) continue;
      const std::size_t slot = in.layout.visual_slot(s);
      auto tok = embed_vector(slice_rows(visual, s - 1, 1), segment::visual, slot, params, eps);
      if (cfg.inject == InjectMode::Add) tok = add(slice_rows(x, slot, 1), tok);
      x = replace_rows(x, slot, tok);
    }
    std::vector<std::vector<double>> heads;
    x = transformer_layer_forward(x, params, l, in.layout.padding_mask, cfg, opts.record_trace ? &heads : nullptr);
    if (opts.record_trace) out.trace.front().weights.push_back(std::move(heads));
    out.layer_outputs.push_back(x);
  }
  out.hidden = x;
  out.h_cls = slice_rows(x, 0, 1);
  return out;
}

/// Contrast arm: every stage injected before layer 1, all else identical.
template <class T>
FusionOutput<T> baseline_forward(const Tensor<T>& text_emb, std::span<const std::uint8_t> text_padding,
                                 const Tensor<T>& visual, const ParameterSet<T>& params, const FusionConfig& cfg,
                                 const StagedOptions& opts = {}) {
  return staged_forward(text_emb, text_padding, visual, FusionSchedule::all_at_once(visual.dim(0), cfg.layers), params,
                        cfg, opts);
}

}  // namespace mf2
