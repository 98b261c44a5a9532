#pragma once

#include <map>
#include <string>
#include <vector>

#include "mf2vqa/grad_check.hpp"
#include "mf2vqa/model.hpp"

namespace mf2 {

struct ModelGradCheckOptions {
  std::size_t hidden = 16;
  std::size_t heads = 2;
  std::size_t stages = 3;  // also the layer count
  std::size_t tokens = 4;
  std::size_t image_size = 8;
  std::size_t base_channels = 2;
  std::uint64_t seed = 1;
  double step = 5e-6;  // truncation error dominates above ~1e-5 on embed.word
  // Gradients below this magnitude are compared in absolute terms; the
  // summed loss carries ~1e-14 rounding noise, i.e. ~1e-9 in a difference quotient.
  double abs_floor = 1e-3;
  bool sabotage = false;  // corrupts one analytic gradient (negative control)
};

struct ModelGradCheckReport {
  std::map<std::string, double> per_parameter;  // max relative error
  double max_rel_error = 0.0;
  std::size_t scalars = 0;
};

/// Checks every parameter of a small 64-bit model against central
/// differences. The loss combines answer cross-entropy with both masked
/// modelling terms so the classifier and both MLM heads receive gradient.
inline ModelGradCheckReport check_model_gradients(const ModelGradCheckOptions& o) {
  ModelConfig mc;
  mc.hidden = o.hidden;
  mc.heads = o.heads;
  mc.stages = o.stages;
  mc.layers = o.stages;
  mc.image_size = o.image_size;
  mc.base_channels = o.base_channels;
  mc.max_text_len = o.tokens;
  mc.vocab_size = token_id::first_free + 2 * o.tokens;
  mc.num_answers = 3;
  Model<double> model(mc, o.seed);
  // Nonzero biases and gains away from 1 so no term is trivially symmetric.
  Rng rng = Rng::derive(o.seed, 99);
  for (auto& [name, t] : model.params().entries()) {
    const bool gain = name.find("gain") != std::string::npos;
    if (gain || name.find("bias") != std::string::npos)
      for (auto& v : t.mutable_data()) v = (gain ? 1.0 : 0.0) + rng.normal(0.0, 0.1);
  }
  Image img{1, o.image_size, o.image_size, std::vector<float>(o.image_size * o.image_size)};
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < o.tokens; ++i) ids.push_back(token_id::first_free + rng.below(mc.vocab_size - token_id::first_free));
  const std::size_t answer = 1;

  MlmBatch batch;
  batch.corrupted_ids = ids;
  batch.withheld.assign(o.stages, 0);
  batch.text_positions = {0};
  batch.text_targets = {ids[0]};
  batch.corrupted_ids[0] = token_id::mask;
  batch.visual_stages = {o.stages > 1 ? 2u : 1u};
  batch.withheld[batch.visual_stages[0] - 1] = 1;

  std::vector<std::string> names;
  std::vector<Tensor<double>> inputs;
  for (auto& [name, t] : model.params().entries()) {
    names.push_back(name);
    inputs.push_back(t);
  }
  // The regression target is a constant of the objective (it is detached
  // during training), so it is computed once here.
  Tensor<double> visual_target;
  {
    NoGradGuard guard;
    visual_target = model.visual_tokens(img).detach();
  }
  auto loss = [&](std::vector<Tensor<double>>& xs) {
    for (std::size_t i = 0; i < names.size(); ++i) model.params().get(names[i]) = xs[i];
    const std::size_t target[1] = {answer};
    auto out = model.forward(ids, img);
    auto ce = cross_entropy(out.logits, std::span<const std::size_t>(target));
    ForwardOptions fo;
    fo.withheld = batch.withheld;
    auto fused = model.fuse(batch.corrupted_ids, out.visual, fo);
    auto mlm = mlm_loss(fused.hidden, fused.layout, batch, visual_target, model.params(), 1.0);
    return add(ce, mlm.total);
  };
  GradCheckOptions gc;
  gc.step = o.step;
  gc.abs_floor = o.abs_floor;
  if (o.sabotage) {
    gc.tamper = [](std::size_t input, std::vector<double>& g) {
      if (input == 0) g[0] = g[0] * 2.0 + 1e-2;
    };
  }
  auto r = grad_check(loss, inputs, gc);
  ModelGradCheckReport rep;
  rep.max_rel_error = r.max_rel_error;
  for (std::size_t i = 0; i < names.size(); ++i) {
    rep.per_parameter[names[i]] = r.per_input[i];
    rep.scalars += inputs[i].size();
  }
  return rep;
}

}  // namespace mf2
