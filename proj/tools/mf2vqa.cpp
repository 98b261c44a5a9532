#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "mf2vqa/mf2vqa.hpp"

namespace fs = std::filesystem;
using namespace mf2;

namespace {

struct ModelFlags {
  std::size_t hidden = 64, heads = 4, stages = 5, layers = 0, ffn_mult = 4;
  std::size_t image_size = 32, base_channels = 8, max_text_len = 32;
  bool shared_projection = false;
};

struct CommonFlags {
  std::string data, out, split;
  std::string mode, inject;
  std::size_t threads = 1;
};

struct TrainFlags {
  double lr = 0.0, beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::size_t batch_size = 16, steps = 1000, eval_every = 0;
  std::uint64_t seed = 0;
  double mask_rate = 0.15, visual_weight = 1.0, target = 0.9;
  std::string init, resume;
};

void add_model_flags(CLI::App* app, ModelFlags& m) {
  app->add_option("--hidden", m.hidden, "hidden width d")->capture_default_str();
  app->add_option("--heads", m.heads, "attention heads")->capture_default_str();
  app->add_option("--stages", m.stages, "CNN stages S")->capture_default_str();
  app->add_option("--layers", m.layers, "fusion layers L (0 = same as --stages)")->capture_default_str();
  app->add_option("--ffn-mult", m.ffn_mult, "feed-forward width multiplier")->capture_default_str();
  app->add_option("--image-size", m.image_size, "input images are resized to this square size")->capture_default_str();
  app->add_option("--base-channels", m.base_channels, "channels of the first CNN block")->capture_default_str();
  app->add_option("--max-text-len", m.max_text_len, "longest question in tokens")->capture_default_str();
  app->add_flag("--shared-projection", m.shared_projection, "one 1x1 projection for every stage");
}

void add_fusion_flags(CLI::App* app, CommonFlags& c) {
  app->add_option("--mode", c.mode, "fusion schedule: staged|baseline")
      ->check(CLI::IsMember({"staged", "baseline"}));
  app->add_option("--inject", c.inject, "slot injection: replace|add")->check(CLI::IsMember({"replace", "add"}));
}

void add_train_flags(CLI::App* app, TrainFlags& t, double default_lr) {
  t.lr = default_lr;
  app->add_option("--lr", t.lr, "Adam learning rate")->capture_default_str();
  app->add_option("--beta1", t.beta1, "Adam beta1")->capture_default_str();
  app->add_option("--beta2", t.beta2, "Adam beta2")->capture_default_str();
  app->add_option("--adam-eps", t.adam_eps, "Adam epsilon")->capture_default_str();
  app->add_option("--batch-size", t.batch_size, "samples per step")->capture_default_str();
  app->add_option("--steps", t.steps, "optimizer steps")->capture_default_str();
  app->add_option("--seed", t.seed, "seed for initialisation, batch order and masking")->capture_default_str();
}

ModelConfig model_config(const ModelFlags& m, const CommonFlags& c, const Vocabulary& vocab,
                         const AnswerVocab& answers) {
  ModelConfig mc;
  mc.hidden = m.hidden;
  mc.heads = m.heads;
  mc.stages = m.stages;
  mc.layers = m.layers ? m.layers : m.stages;
  mc.ffn_mult = m.ffn_mult;
  mc.image_size = m.image_size;
  mc.base_channels = m.base_channels;
  mc.max_text_len = m.max_text_len;
  mc.shared_projection = m.shared_projection;
  if (!c.mode.empty()) mc.mode = parse_fusion_mode(c.mode);
  if (!c.inject.empty()) mc.inject = parse_inject_mode(c.inject);
  mc.vocab_size = vocab.size();
  mc.num_answers = answers.size();
  return mc;
}

TrainConfig train_config(const TrainFlags& t, const CommonFlags& c) {
  TrainConfig tc;
  tc.lr = t.lr;
  tc.beta1 = t.beta1;
  tc.beta2 = t.beta2;
  tc.eps = t.adam_eps;
  tc.batch_size = t.batch_size;
  tc.steps = t.steps;
  tc.seed = t.seed;
  tc.mask_rate = t.mask_rate;
  tc.visual_weight = t.visual_weight;
  tc.eval_every = t.eval_every;
  tc.target_accuracy = t.target;
  tc.threads = c.threads;
  tc.validate();
  return tc;
}

void make_out(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
}

std::string in_data(const CommonFlags& c, const std::string& name) { return (fs::path(c.data) / name).string(); }

// Model rebuilt from a checkpoint's stored configuration; fusion flags override it.
Model<float> model_from(const Checkpoint<float>& ck, const CommonFlags& c) {
  auto mc = ModelConfig::from_snapshot(ck.config);
  if (!c.mode.empty()) mc.mode = parse_fusion_mode(c.mode);
  if (!c.inject.empty()) mc.inject = parse_inject_mode(c.inject);
  Model<float> model(mc, 0);
  model.params().assign_from(ck.params);
  return model;
}

void check_matches(const ModelConfig& mc, const Vocabulary& vocab, const AnswerVocab& answers) {
  if (mc.vocab_size != vocab.size() || mc.num_answers != answers.size()) {
    throw ConfigError("checkpoint was built for " + std::to_string(mc.vocab_size) + " tokens / " +
                      std::to_string(mc.num_answers) + " answers, dataset has " + std::to_string(vocab.size()) +
                      " / " + std::to_string(answers.size()));
  }
}

void write_history(const std::string& path, const std::vector<EvalPoint>& history) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  std::vector<std::string> cats;
  if (!history.empty())
    for (const auto& [k, _] : history.front().category_accuracy) cats.push_back(k);
  out << "step,overall";
  for (const auto& k : cats) out << ',' << k;
  out << '\n';
  char buf[64];
  for (const auto& e : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f", e.step, e.val_accuracy);
    out << buf;
    for (const auto& k : cats) {
      auto it = e.category_accuracy.find(k);
      std::snprintf(buf, sizeof buf, ",%.6f", it == e.category_accuracy.end() ? 0.0 : it->second);
      out << buf;
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------

int run_gen(const SyntheticSpec& spec, const std::string& out) {
  auto ds = generate_synthetic(spec, out);
  std::printf("wrote %zu train / %zu val / %zu test samples, %zu captions to %s\n", ds.train.size(), ds.val.size(),
              ds.test.size(), ds.captions.size(), out.c_str());
  return 0;
}

int run_pretrain(const ModelFlags& mf, const CommonFlags& c, const TrainFlags& t) {
  const auto vocab = Vocabulary::load(in_data(c, "vocab.txt"));
  const auto answers = AnswerVocab::load(in_data(c, "answers.txt"));
  auto tc = train_config(t, c);
  auto mc = model_config(mf, c, vocab, answers);
  const auto captions = prepare_captions(load_captions(in_data(c, "captions.jsonl")), c.data, vocab, mc);
  Model<float> model(mc, t.seed);
  make_out(c.out);
  auto res = pretrain_mlm(model, captions, tc);
  save_checkpoint((fs::path(c.out) / "pretrain.mfck").string(), res.checkpoint);
  write_loss_curve((fs::path(c.out) / "pretrain_loss.csv").string(), res.loss_curve);
  write_loss_curve((fs::path(c.out) / "pretrain_text_loss.csv").string(), res.text_curve);
  std::printf("masked text loss %.4f -> %.4f after %zu steps\n", res.initial_text_loss, res.final_text_loss, t.steps);
  return 0;
}

int run_train(const ModelFlags& mf, const CommonFlags& c, const TrainFlags& t) {
  const auto vocab = Vocabulary::load(in_data(c, "vocab.txt"));
  const auto answers = AnswerVocab::load(in_data(c, "answers.txt"));
  auto tc = train_config(t, c);
  if (!t.init.empty() && !t.resume.empty()) throw ConfigError("--init and --resume are mutually exclusive");

  std::optional<Model<float>> model;
  AdamState<float> state;
  if (!t.resume.empty()) {
    auto ck = load_checkpoint<float>(t.resume);
    model.emplace(model_from(ck, c));
    state = ck.adam;
  } else {
    auto mc = model_config(mf, c, vocab, answers);
    model.emplace(mc, t.seed);
    if (!t.init.empty()) {
      auto ck = load_checkpoint<float>(t.init);
      const auto pre = ModelConfig::from_snapshot(ck.config);
      try {
        model->params().assign_from(ck.params);
      } catch (const DimensionError& e) {
        throw ConfigError(std::string("--init checkpoint does not fit the model: ") + e.what());
      }
      if (pre.vocab_size != mc.vocab_size) throw ConfigError("--init checkpoint uses a different vocabulary");
    }
  }
  check_matches(model->config(), vocab, answers);
  const auto& mc = model->config();
  const auto train = prepare_vqa(load_dataset(in_data(c, c.split + ".jsonl")), c.data, vocab, answers, mc);
  std::vector<PreparedSample> val;
  if (fs::exists(in_data(c, "val.jsonl"))) {
    auto v = load_dataset(in_data(c, "val.jsonl"));
    if (!v.empty()) val = prepare_vqa(v, c.data, vocab, answers, mc);
  }
  make_out(c.out);
  auto res = finetune_vqa(*model, train, val, tc, false, std::move(state));
  save_checkpoint((fs::path(c.out) / "best.mfck").string(), res.best);
  save_checkpoint((fs::path(c.out) / "last.mfck").string(), res.last);
  write_loss_curve((fs::path(c.out) / "train_loss.csv").string(), res.loss_curve);
  write_history((fs::path(c.out) / "history.csv").string(), res.history);
  for (const auto& e : res.history) {
    std::printf("step %zu val %.4f", e.step, e.val_accuracy);
    for (const auto& [k, v] : e.category_accuracy) std::printf(" %s %.4f", k.c_str(), v);
    std::printf("\n");
  }
  if (!val.empty()) std::printf("best val accuracy %.4f at step %zu\n", res.best_val_accuracy, res.best_step);
  return 0;
}

int run_eval(const CommonFlags& c, const std::string& checkpoint, const std::string& trace_dir) {
  const auto vocab = Vocabulary::load(in_data(c, "vocab.txt"));
  const auto answers = AnswerVocab::load(in_data(c, "answers.txt"));
  auto model = model_from(load_checkpoint<float>(checkpoint), c);
  check_matches(model.config(), vocab, answers);
  const auto samples = load_dataset(in_data(c, c.split + ".jsonl"));
  if (samples.empty()) throw DataError("split '" + c.split + "' is empty", 0);
  const auto data = prepare_vqa(samples, c.data, vocab, answers, model.config());
  if (c.threads == 0) throw ConfigError("thread count must be positive");
  const auto ids = predict(model, data, c.threads);
  std::vector<std::string> predictions;
  for (auto id : ids) predictions.push_back(answers.answer(id));

  const auto rows = per_category_report(samples, predictions);
  std::cout << report_text(rows);
  make_out(c.out);
  {
    const auto path = (fs::path(c.out) / "report.csv").string();
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << report_csv(rows);
  }
  {
    const auto path = (fs::path(c.out) / "predictions.jsonl").string();
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    for (std::size_t i = 0; i < samples.size(); ++i) {
      nlohmann::ordered_json j;
      j["image"] = samples[i].image;
      j["question"] = samples[i].question;
      j["answer"] = samples[i].answer;
      j["prediction"] = predictions[i];
      if (!samples[i].category.empty()) j["category"] = samples[i].category;
      out << j.dump() << '\n';
    }
  }
  if (!trace_dir.empty()) {
    NoGradGuard guard;
    ForwardOptions opts;
    opts.record_trace = true;
    for (std::size_t i = 0; i < data.size(); ++i) {
      auto r = model.forward(data[i].ids, data[i].image, opts);
      char name[32];
      std::snprintf(name, sizeof name, "sample_%05zu", i);
      export_trace(r.fusion.trace.at(0), (fs::path(trace_dir) / name).string());
    }
    std::printf("wrote attention traces for %zu samples to %s\n", data.size(), trace_dir.c_str());
  }
  return 0;
}

// `key = value` lines of a --config file become `--key=value` arguments
// placed before the user's own, so flags on the command line win.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  std::string file;
  for (std::size_t i = 2; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) file = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) file = args[i].substr(9);
  }
  if (file.empty()) return args;
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot read config file '" + file + "'");
  std::vector<std::string> injected;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(file + ":" + std::to_string(n) + ": expected 'key = value'");
    auto trim = [](std::string t) {
      const auto b = t.find_first_not_of(" \t\r"), e = t.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : t.substr(b, e - b + 1);
    };
    const auto key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty() || key == "config") throw ConfigError(file + ":" + std::to_string(n) + ": bad key");
    injected.push_back("--" + key + "=" + value);
  }
  args.insert(args.begin() + 2, injected.begin(), injected.end());
  return args;
}

int run_gradcheck(const ModelGradCheckOptions& o) {
  auto rep = check_model_gradients(o);
  std::size_t width = 0;
  for (const auto& [name, _] : rep.per_parameter) width = std::max(width, name.size());
  for (const auto& [name, err] : rep.per_parameter) std::printf("%-*s  %.3e\n", int(width), name.c_str(), err);
  const bool ok = rep.max_rel_error < 1e-6;
  std::printf("checked %zu scalars, max relative error %.3e: %s\n", rep.scalars, rep.max_rel_error,
              ok ? "PASS" : "FAIL");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stage-wise multimodal fusion for visual question answering"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  std::string config_file;
  auto with_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "file of 'key = value' lines (keys are flag names without dashes); "
                                             "command-line flags take precedence");
  };

  SyntheticSpec spec;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen", "generate the synthetic two-scale VQA dataset");
  with_config(gen);
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--images", spec.train_images, "training images (two questions each)")->capture_default_str();
  gen->add_option("--val-images", spec.val_images, "validation images")->capture_default_str();
  gen->add_option("--test-images", spec.test_images, "test images")->capture_default_str();
  gen->add_option("--size", spec.image_size, "image side in pixels")->capture_default_str();
  gen->add_option("--coarse", spec.coarse_classes, "shape classes")->capture_default_str();
  gen->add_option("--fine", spec.fine_classes, "texture classes")->capture_default_str();
  gen->add_option("--noise", spec.noise, "pixel noise standard deviation")->capture_default_str();
  gen->add_option("--seed", spec.seed, "generator seed")->capture_default_str();

  ModelFlags mflags;
  CommonFlags pre_c, train_c, eval_c;
  TrainFlags pre_t, train_t;

  auto* pre = app.add_subcommand("pretrain", "masked-modelling pretraining on captions.jsonl");
  with_config(pre);
  pre->add_option("--data", pre_c.data, "dataset directory")->required();
  pre->add_option("--out", pre_c.out, "output directory")->required();
  add_model_flags(pre, mflags);
  add_fusion_flags(pre, pre_c);
  add_train_flags(pre, pre_t, TrainConfig::pretrain_defaults().lr);
  pre->add_option("--mask-rate", pre_t.mask_rate, "masking probability per position")->capture_default_str();
  pre->add_option("--visual-weight", pre_t.visual_weight, "weight of the visual regression term")
      ->capture_default_str();

  auto* train = app.add_subcommand("train", "answer-classification finetuning");
  with_config(train);
  train->add_option("--data", train_c.data, "dataset directory")->required();
  train->add_option("--out", train_c.out, "output directory")->required();
  train_c.split = "train";
  train->add_option("--split", train_c.split, "training split name (<data>/<split>.jsonl)")->capture_default_str();
  add_model_flags(train, mflags);
  add_fusion_flags(train, train_c);
  add_train_flags(train, train_t, TrainConfig::finetune_defaults().lr);
  train->add_option("--eval-every", train_t.eval_every, "validation interval in steps (0 = once per epoch)")
      ->capture_default_str();
  train->add_option("--target", train_t.target, "accuracy reported as reached in the history")->capture_default_str();
  train->add_option("--init", train_t.init, "initialise parameters from a checkpoint (e.g. pretrain.mfck)");
  train->add_option("--resume", train_t.resume, "continue from a checkpoint including optimizer state");
  train->add_option("--threads", train_c.threads, "evaluation threads")->capture_default_str();

  std::string checkpoint, trace_dir;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint and write report.csv");
  with_config(eval);
  eval->add_option("--data", eval_c.data, "dataset directory")->required();
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--out", eval_c.out, "output directory")->required();
  eval_c.split = "val";
  eval->add_option("--split", eval_c.split, "split to evaluate (<data>/<split>.jsonl)")->capture_default_str();
  add_fusion_flags(eval, eval_c);
  eval->add_option("--trace", trace_dir, "write per-sample attention CSVs and a PGM heatmap under this directory");
  eval->add_option("--threads", eval_c.threads, "evaluation threads")->capture_default_str();

  ModelGradCheckOptions gopt;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every parameter of a tiny 64-bit model");
  with_config(gc);
  gc->add_option("--hidden", gopt.hidden, "hidden width")->capture_default_str();
  gc->add_option("--heads", gopt.heads, "attention heads")->capture_default_str();
  gc->add_option("--stages", gopt.stages, "stages and layers")->capture_default_str();
  gc->add_option("--tokens", gopt.tokens, "question tokens")->capture_default_str();
  gc->add_option("--image-size", gopt.image_size, "image side")->capture_default_str();
  gc->add_option("--base-channels", gopt.base_channels, "channels of the first CNN block")->capture_default_str();
  gc->add_option("--seed", gopt.seed, "parameter seed")->capture_default_str();
  gc->add_option("--step", gopt.step, "central-difference step")->capture_default_str();
  gc->add_flag("--sabotage", gopt.sabotage, "corrupt one analytic gradient (must fail)");

  std::vector<std::string> args;
  try {
    args = expand_config(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) return run_gen(spec, gen_out);
    if (*pre) return run_pretrain(mflags, pre_c, pre_t);
    if (*train) return run_train(mflags, train_c, train_t);
    if (*eval) return run_eval(eval_c, checkpoint, trace_dir);
    if (*gc) return run_gradcheck(gopt);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const LengthError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
