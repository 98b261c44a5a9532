// Generates a small synthetic dataset, trains the staged model on it and
// prints the validation report. Usage: quickstart [work-dir]
#include <chrono>
#include <cstdio>
#include <iostream>

#include "mf2vqa/mf2vqa.hpp"

int main(int argc, char** argv) {
  using namespace mf2;
  const std::string dir = argc > 1 ? argv[1] : "quickstart_data";

  SyntheticSpec spec;
  spec.train_images = 150;
  spec.val_images = 50;
  spec.seed = 11;
  auto ds = generate_synthetic(spec, dir);

  ModelConfig mc;
  mc.vocab_size = ds.vocab.size();
  mc.num_answers = ds.answers.size();
  auto train = prepare_vqa(ds.train, dir, ds.vocab, ds.answers, mc);
  auto val = prepare_vqa(ds.val, dir, ds.vocab, ds.answers, mc);

  Model<float> model(mc, 1);
  TrainConfig tc;
  tc.lr = 1e-3;
  tc.steps = 600;
  tc.eval_every = 100;
  tc.seed = 3;

  const auto t0 = std::chrono::steady_clock::now();
  auto res = finetune_vqa(model, train, val, tc);
  for (const auto& e : res.history) std::printf("step %4zu  val acc %.3f\n", e.step, e.val_accuracy);
  std::printf("trained in %.1f s\n", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

  model.params().assign_from(res.best.params);
  std::vector<std::string> predictions;
  for (auto id : predict(model, val)) predictions.push_back(ds.answers.answer(id));
  std::cout << report_text(per_category_report(ds.val, predictions));
}
