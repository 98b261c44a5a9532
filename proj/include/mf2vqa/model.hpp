#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mf2vqa/fusion.hpp"
#include "mf2vqa/heads.hpp"
#include "mf2vqa/text.hpp"
#include "mf2vqa/vision.hpp"

namespace mf2 {

enum class FusionMode { Staged, Baseline };

inline std::string to_string(FusionMode m) { return m == FusionMode::Staged ? "staged" : "baseline"; }
inline std::string to_string(InjectMode m) { return m == InjectMode::Replace ? "replace" : "add"; }

inline FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "staged") return FusionMode::Staged;
  if (s == "baseline") return FusionMode::Baseline;
  throw ConfigError("unknown fusion mode '" + s + "' (expected staged|baseline)");
}
inline InjectMode parse_inject_mode(const std::string& s) {
  if (s == "replace") return InjectMode::Replace;
  if (s == "add") return InjectMode::Add;
  throw ConfigError("unknown inject mode '" + s + "' (expected replace|add)");
}

struct ModelConfig {
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t stages = 5;
  std::size_t layers = 5;
  std::size_t ffn_mult = 4;
  std::size_t image_size = 32;
  std::size_t in_channels = 1;
  std::size_t base_channels = 8;
  std::size_t max_text_len = 32;
  bool shared_projection = false;
  FusionMode mode = FusionMode::Staged;
  InjectMode inject = InjectMode::Replace;
  double eps = 1e-12;
  std::size_t vocab_size = 0;
  std::size_t num_answers = 0;

  // Hidden size 768, five stages on 224 x 224 input.
  static ModelConfig full_scale() {
    ModelConfig c;
    c.hidden = 768;
    c.heads = 12;
    c.image_size = 224;
    return c;
  }

  std::size_t max_positions() const { return max_text_len + 2 + stages; }

  VisionConfig vision() const {
    return VisionConfig{in_channels, image_size, stages, base_channels, hidden, shared_projection};
  }
  EmbeddingConfig embedding() const { return EmbeddingConfig{vocab_size, hidden, max_positions(), eps}; }
  FusionConfig fusion() const {
    FusionConfig f;
    f.hidden = hidden;
    f.heads = heads;
    f.layers = layers;
    f.ffn_mult = ffn_mult;
    f.max_text_len = max_text_len;
    f.eps = eps;
    f.inject = inject;
    return f;
  }
  FusionSchedule schedule() const {
    return mode == FusionMode::Staged ? FusionSchedule::stagewise(stages, layers)
                                      : FusionSchedule::all_at_once(stages, layers);
  }

  void validate() const {
    if (stages != layers) {
      throw ConfigError("feature pyramid has " + std::to_string(stages) + " stages but the fusion stack has " +
                        std::to_string(layers) + " layers; they must match");
    }
    vision().validate();
    fusion().validate();
    if (vocab_size <= token_id::unk) throw ConfigError("model: vocabulary too small");
    if (num_answers < 2) throw ConfigError("model: need at least 2 candidate answers");
  }

  std::map<std::string, double> snapshot() const {
    return {{"model.hidden", double(hidden)},
            {"model.heads", double(heads)},
            {"model.stages", double(stages)},
            {"model.layers", double(layers)},
            {"model.ffn_mult", double(ffn_mult)},
            {"model.image_size", double(image_size)},
            {"model.in_channels", double(in_channels)},
            {"model.base_channels", double(base_channels)},
            {"model.max_text_len", double(max_text_len)},
            {"model.shared_projection", shared_projection ? 1.0 : 0.0},
            {"model.mode", mode == FusionMode::Staged ? 0.0 : 1.0},
            {"model.inject", inject == InjectMode::Replace ? 0.0 : 1.0},
            {"model.eps", eps},
            {"model.vocab_size", double(vocab_size)},
            {"model.num_answers", double(num_answers)}};
  }

  static ModelConfig from_snapshot(const std::map<std::string, double>& s) {
    auto get = [&](const std::string& k) {
      auto it = s.find(k);
      if (it == s.end()) throw FormatError("checkpoint config is missing '" + k + "'", 0);
      return it->second;
    };
    auto size = [&](const std::string& k) { return static_cast<std::size_t>(get(k)); };
    ModelConfig c;
    c.hidden = size("model.hidden");
    c.heads = size("model.heads");
    c.stages = size("model.stages");
    c.layers = size("model.layers");
    c.ffn_mult = size("model.ffn_mult");
    c.image_size = size("model.image_size");
    c.in_channels = size("model.in_channels");
    c.base_channels = size("model.base_channels");
    c.max_text_len = size("model.max_text_len");
    c.shared_projection = get("model.shared_projection") != 0.0;
    c.mode = get("model.mode") == 0.0 ? FusionMode::Staged : FusionMode::Baseline;
    c.inject = get("model.inject") == 0.0 ? InjectMode::Replace : InjectMode::Add;
    c.eps = get("model.eps");
    c.vocab_size = size("model.vocab_size");
    c.num_answers = size("model.num_answers");
    return c;
  }
};

struct ForwardOptions {
  bool record_trace = false;
  // Stages whose projected token is replaced by zeros before injection.
  std::vector<std::uint8_t> zero_stages;
  // Stages never injected (slot keeps [MASK]); set by masked modelling.
  std::vector<std::uint8_t> withheld;
};

template <class T>
struct ModelOutput {
  FusionOutput<T> fusion;
  Tensor<T> visual;  // S x d projected stage tokens
  Tensor<T> logits;  // 1 x A
};

/// Full pipeline: conv pyramid -> stage tokens -> staged fusion -> classifier.
template <class T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), schedule_(cfg.schedule()) {
    cfg_.validate();
    Rng vision_rng = Rng::derive(seed, 1), embed_rng = Rng::derive(seed, 2), fusion_rng = Rng::derive(seed, 3),
        head_rng = Rng::derive(seed, 4);
    vision::add_params(params_, cfg_.vision(), vision_rng);
    add_embedding_params(params_, cfg_.embedding(), embed_rng);
    add_fusion_params(params_, cfg_.fusion(), fusion_rng);
    add_head_params(params_, cfg_.hidden, cfg_.num_answers, cfg_.vocab_size, head_rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const FusionSchedule& schedule() const { return schedule_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }

  Tensor<T> visual_tokens(const Image& img) const {
    const auto vc = cfg_.vision();
    return mf2::visual_tokens(encode_image(img, params_, vc), params_, vc);
  }

  FusionOutput<T> fuse(std::span<const std::size_t> ids, const Tensor<T>& visual, const ForwardOptions& opt = {}) const {
    if (ids.size() > cfg_.max_text_len) {
      throw LengthError("question has " + std::to_string(ids.size()) + " tokens, max is " +
                        std::to_string(cfg_.max_text_len));
    }
    Tensor<T> tokens = visual;
    if (!opt.zero_stages.empty()) {
      std::vector<T> keep(visual.size(), T(1));
      for (std::size_t s = 0; s < opt.zero_stages.size() && s < cfg_.stages; ++s)
        if (opt.zero_stages[s])
          for (std::size_t j = 0; j < cfg_.hidden; ++j) keep[s * cfg_.hidden + j] = T(0);
      tokens = mul(visual, Tensor<T>(visual.shape(), std::move(keep)));
    }
    StagedOptions so{opt.record_trace, opt.withheld};
    return staged_forward(embed_text(ids, params_, cfg_.eps), {}, tokens, schedule_, params_, cfg_.fusion(), so);
  }

  ModelOutput<T> forward(std::span<const std::size_t> ids, const Image& img, const ForwardOptions& opt = {}) const {
    ModelOutput<T> out;
    out.visual = visual_tokens(img);
    out.fusion = fuse(ids, out.visual, opt);
    out.logits = classify(out.fusion.h_cls, params_);
    return out;
  }

 private:
  ModelConfig cfg_;
  FusionSchedule schedule_;
  ParameterSet<T> params_;
};

}  // namespace mf2
