#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mf2vqa/data.hpp"
#include "mf2vqa/model.hpp"
#include "mf2vqa/tnsr.hpp"

namespace mf2 {

struct AdamConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 16;
  std::size_t steps = 1000;
  std::uint64_t seed = 0;
  double mask_rate = 0.15;
  double visual_weight = 1.0;  // beta: weight of the visual regression term
  FusionMode mode = FusionMode::Staged;
  InjectMode inject = InjectMode::Replace;
  std::size_t eval_every = 0;  // 0 = once per epoch
  double target_accuracy = 0.9;
  bool target_per_category = false;  // target must hold for every category too
  std::size_t threads = 1;

  static TrainConfig pretrain_defaults() {
    TrainConfig c;
    c.lr = 2e-5;
    return c;
  }
  static TrainConfig finetune_defaults() { return TrainConfig{}; }

  AdamConfig adam() const { return {lr, beta1, beta2, eps}; }

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be a finite non-negative number");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must be in [0,1)");
    if (!(eps > 0.0)) throw ConfigError("Adam eps must be positive");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw ConfigError("mask rate must be in (0,1)");
    if (!(visual_weight >= 0.0)) throw ConfigError("visual loss weight must be non-negative");
    if (threads == 0) throw ConfigError("thread count must be positive");
  }

  std::map<std::string, double> snapshot() const {
    return {{"train.lr", lr},
            {"train.beta1", beta1},
            {"train.beta2", beta2},
            {"train.eps", eps},
            {"train.batch_size", double(batch_size)},
            {"train.steps", double(steps)},
            {"train.seed", double(seed)},
            {"train.mask_rate", mask_rate},
            {"train.visual_weight", visual_weight}};
  }
};

// ---------------------------------------------------------------------------
// Adam

template <class T>
struct AdamState {
  std::uint64_t step = 0;
  std::map<std::string, std::vector<T>> m, v;

  bool operator==(const AdamState&) const = default;
};

/// One bias-corrected Adam update of every parameter, in name order.
/// A non-finite gradient aborts before any parameter is modified.
template <class T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state, const AdamConfig& cfg) {
  for (auto& [name, p] : params.entries()) {
    if (!p.has_grad()) throw ContractError("adam_step: parameter '" + name + "' has no gradient buffer");
    if (!all_finite<T>(p.grad())) throw NumericError("adam_step: non-finite gradient in parameter '" + name + "'");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, t));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, t));
  const T lr = static_cast<T>(cfg.lr), eps = static_cast<T>(cfg.eps);
  for (auto& [name, p] : params.entries()) {
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() != p.size()) m.assign(p.size(), T(0));
    if (v.size() != p.size()) v.assign(p.size(), T(0));
    auto w = p.mutable_data();
    auto g = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      const T mhat = m[i] / c1;
      const T vhat = v[i] / c2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: "MFCK", u32 version, u32 entry count, then per entry
// u16 name length, UTF-8 name, TNSR block.

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
struct Checkpoint {
  ParameterSet<T> params;
  AdamState<T> adam;
  std::map<std::string, double> config;
  std::uint64_t step = 0;
};

template <class T>
std::string serialize_checkpoint(const Checkpoint<T>& ck) {
  std::ostringstream out(std::ios::binary);
  auto put_u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  auto put_name = [&](const std::string& name) {
    if (name.size() > 0xFFFF) throw ConfigError("checkpoint entry name too long");
    const auto len = static_cast<std::uint16_t>(name.size());
    out.write(reinterpret_cast<const char*>(&len), 2);
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
  };
  std::size_t count = ck.params.size() + ck.adam.m.size() + ck.adam.v.size() + ck.config.size() + 1;
  out.write("MFCK", 4);
  put_u32(kCheckpointVersion);
  put_u32(static_cast<std::uint32_t>(count));
  for (const auto& [name, t] : ck.params.entries()) {
    put_name("param/" + name);
    tnsr::write(out, t);
  }
  for (const auto& [prefix, moments] : {std::pair{"adam.m/", &ck.adam.m}, std::pair{"adam.v/", &ck.adam.v}}) {
    for (const auto& [name, values] : *moments) {
      put_name(prefix + name);
      tnsr::write<T>(out, {values.size()}, values);
    }
  }
  for (const auto& [key, value] : ck.config) {
    put_name("config/" + key);
    tnsr::write<double>(out, {1}, std::span<const double>(&value, 1));
  }
  put_name("meta/step");
  const double step = static_cast<double>(ck.step);
  tnsr::write<double>(out, {1}, std::span<const double>(&step, 1));
  return out.str();
}

template <class T>
Checkpoint<T> parse_checkpoint(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  tnsr::Reader r(in);
  char magic[4];
  r.read_bytes(magic, 4, "checkpoint magic");
  if (std::memcmp(magic, "MFCK", 4) != 0) throw FormatError("not a checkpoint (bad magic)", 0);
  const auto version = r.read_le<std::uint32_t>("checkpoint version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")",
                      4);
  }
  const auto count = r.read_le<std::uint32_t>("checkpoint entry count");
  Checkpoint<T> ck;
  bool have_step = false;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = r.read_le<std::uint16_t>("entry name length");
    std::string name(len, '\0');
    r.read_bytes(name.data(), len, "entry name");
    const std::size_t block_at = r.offset();
    auto block = r.read_block();
    auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
    if (starts("param/")) {
      ck.params.add(name.substr(6), tnsr::to_tensor<T>(block));
    } else if (starts("adam.m/") || starts("adam.v/")) {
      auto& dst = starts("adam.m/") ? ck.adam.m : ck.adam.v;
      dst[name.substr(7)] = tnsr::to_tensor<T>(block).vec();
    } else if (starts("config/")) {
      if (block.values.size() != 1) throw FormatError("config entry '" + name + "' must be scalar", block_at);
      ck.config[name.substr(7)] = block.values[0];
    } else if (name == "meta/step") {
      if (block.values.size() != 1) throw FormatError("meta/step must be scalar", block_at);
      ck.step = static_cast<std::uint64_t>(block.values[0]);
      have_step = true;
    } else {
      throw FormatError("unknown checkpoint entry '" + name + "'", block_at);
    }
  }
  if (!have_step) throw FormatError("checkpoint has no meta/step entry", r.offset());
  ck.adam.step = ck.step;
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint", r.offset());
  return ck;
}

template <class T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  const auto bytes = serialize_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint<T>(ss.str());
}

template <class T>
Checkpoint<T> make_checkpoint(const Model<T>& model, const AdamState<T>& adam, const TrainConfig& cfg) {
  Checkpoint<T> ck;
  ck.params = model.params().clone();
  ck.adam = adam;
  ck.config = model.config().snapshot();
  for (const auto& [k, v] : cfg.snapshot()) ck.config[k] = v;
  ck.step = adam.step;
  return ck;
}

inline void write_loss_curve(const std::string& path, const std::vector<std::pair<std::size_t, double>>& curve) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "step,loss\n";
  out.precision(9);
  for (const auto& [step, loss] : curve) out << step << ',' << loss << '\n';
}

// ---------------------------------------------------------------------------
// Prepared data

struct PreparedSample {
  std::vector<std::size_t> ids;
  Image image;
  std::size_t answer = 0;
  std::string category;
};

inline std::vector<PreparedSample> prepare_vqa(const std::vector<Sample>& samples, const std::string& root,
                                               const Vocabulary& vocab, const AnswerVocab& answers,
                                               const ModelConfig& cfg) {
  std::vector<PreparedSample> out;
  std::map<std::string, Image> cache;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    auto a = answers.find(s.answer);
    if (!a) throw DataError("sample " + std::to_string(i) + ": answer '" + s.answer + "' is not a candidate answer", i);
    auto it = cache.find(s.image);
    if (it == cache.end()) {
      it = cache.emplace(s.image, load_image((std::filesystem::path(root) / s.image).string(), cfg.image_size)).first;
    }
    out.push_back({tokenize(s.question, vocab, cfg.max_text_len), it->second, *a, s.category});
  }
  return out;
}

inline std::vector<PreparedSample> prepare_captions(const std::vector<Caption>& captions, const std::string& root,
                                                    const Vocabulary& vocab, const ModelConfig& cfg) {
  std::vector<PreparedSample> out;
  for (const auto& c : captions) {
    out.push_back({tokenize(c.caption, vocab, cfg.max_text_len),
                   load_image((std::filesystem::path(root) / c.image).string(), cfg.image_size), 0, ""});
  }
  return out;
}

// Fixed per-epoch seeded shuffle; step k always sees the same batch.
class BatchSchedule {
 public:
  BatchSchedule(std::size_t n, std::size_t batch, std::uint64_t seed) : n_(n), batch_(batch), seed_(seed) {
    if (n == 0) throw ContractError("training set is empty");
  }

  std::vector<std::size_t> batch(std::uint64_t step) {
    const std::size_t per_epoch = (n_ + batch_ - 1) / batch_;
    const std::uint64_t epoch = step / per_epoch;
    const std::size_t pos = static_cast<std::size_t>(step % per_epoch) * batch_;
    if (!cached_ || cached_epoch_ != epoch) {
      order_.resize(n_);
      for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
      Rng rng = Rng::derive(seed_, 0x0E90C000ull + epoch);
      rng.shuffle(order_);
      cached_epoch_ = epoch;
      cached_ = true;
    }
    return {order_.begin() + pos, order_.begin() + std::min(n_, pos + batch_)};
  }

  std::size_t steps_per_epoch() const { return (n_ + batch_ - 1) / batch_; }

 private:
  std::size_t n_, batch_;
  std::uint64_t seed_;
  bool cached_ = false;
  std::uint64_t cached_epoch_ = 0;
  std::vector<std::size_t> order_;
};

// ---------------------------------------------------------------------------
// Evaluation

/// Predicted answer ids; samples are split across `threads` workers that
/// read the model concurrently. Results do not depend on the thread count.
template <class T>
std::vector<std::size_t> predict(const Model<T>& model, const std::vector<PreparedSample>& data, std::size_t threads = 1,
                                 const ForwardOptions& opts = {}) {
  std::vector<std::size_t> out(data.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    NoGradGuard guard;
    for (std::size_t i = begin; i < end; ++i) {
      auto r = model.forward(data[i].ids, data[i].image, opts);
      out[i] = argmax<T>(r.logits.data());
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, data.size()));
  if (threads == 1) {
    work(0, data.size());
    return out;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (data.size() + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t b = t * chunk, e = std::min(data.size(), b + chunk);
    if (b < e) pool.emplace_back(work, b, e);
  }
  for (auto& th : pool) th.join();
  return out;
}

struct AccuracyReport {
  double overall = 0.0;
  std::map<std::string, double> by_category;
};

inline AccuracyReport score(const std::vector<PreparedSample>& data, const std::vector<std::size_t>& predicted) {
  AccuracyReport r;
  std::map<std::string, std::pair<std::size_t, std::size_t>> counts;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const bool hit = predicted[i] == data[i].answer;
    hits += hit;
    auto& c = counts[data[i].category];
    c.first += hit;
    ++c.second;
  }
  r.overall = data.empty() ? 0.0 : double(hits) / double(data.size());
  for (const auto& [cat, c] : counts) r.by_category[cat] = double(c.first) / double(c.second);
  return r;
}

// ---------------------------------------------------------------------------
// Answer classification

template <class T>
class VqaTrainer {
 public:
  VqaTrainer(Model<T>& model, const std::vector<PreparedSample>& train, const TrainConfig& cfg, AdamState<T> state = {})
      : model_(model), train_(train), cfg_(cfg), state_(std::move(state)), batches_(train.size(), cfg.batch_size, cfg.seed) {
    cfg_.validate();
  }

  /// One optimizer step on the next batch; returns the batch-mean loss.
  double step() {
    const auto idx = batches_.batch(state_.step);
    model_.params().zero_grad();
    std::vector<Tensor<T>> logits;
    std::vector<std::size_t> targets;
    for (auto i : idx) {
      logits.push_back(model_.forward(train_[i].ids, train_[i].image).logits);
      targets.push_back(train_[i].answer);
    }
    auto loss = cross_entropy(concat_rows(logits), std::span<const std::size_t>(targets));
    backward(loss);
    adam_step(model_.params(), state_, cfg_.adam());
    return static_cast<double>(loss.item());
  }

  const AdamState<T>& state() const { return state_; }
  std::size_t steps_per_epoch() const { return batches_.steps_per_epoch(); }

 private:
  Model<T>& model_;
  const std::vector<PreparedSample>& train_;
  TrainConfig cfg_;
  AdamState<T> state_;
  BatchSchedule batches_;
};

struct EvalPoint {
  std::size_t step = 0;
  double val_accuracy = 0.0;
  std::map<std::string, double> category_accuracy;
};

template <class T>
struct FinetuneResult {
  std::vector<std::pair<std::size_t, double>> loss_curve;
  std::vector<EvalPoint> history;
  double best_val_accuracy = -1.0;
  std::size_t best_step = 0;
  std::optional<std::size_t> steps_to_target;  // first evaluated step meeting the target
  Checkpoint<T> best;
  Checkpoint<T> last;  // model and optimizer state when training stopped
};

/// Trains classifier and the whole stack for `cfg.steps` steps, evaluating
/// on `val` every `eval_every` steps (and at step 0). The best checkpoint by
/// validation accuracy is kept. Stops early once `stop_at_target` is set and
/// the target accuracy is reached.
template <class T>
FinetuneResult<T> finetune_vqa(Model<T>& model, const std::vector<PreparedSample>& train,
                               const std::vector<PreparedSample>& val, const TrainConfig& cfg, bool stop_at_target = false,
                               AdamState<T> state = {}) {
  VqaTrainer<T> trainer(model, train, cfg, std::move(state));
  const std::size_t every = cfg.eval_every ? cfg.eval_every : trainer.steps_per_epoch();
  FinetuneResult<T> res;
  auto evaluate = [&](std::size_t step) {
    if (val.empty()) return false;
    auto rep = score(val, predict(model, val, cfg.threads));
    res.history.push_back({step, rep.overall, rep.by_category});
    if (rep.overall > res.best_val_accuracy) {
      res.best_val_accuracy = rep.overall;
      res.best_step = step;
      res.best = make_checkpoint(model, trainer.state(), cfg);
    }
    bool reached = rep.overall >= cfg.target_accuracy;
    if (cfg.target_per_category)
      for (const auto& [cat, acc] : rep.by_category) reached = reached && acc >= cfg.target_accuracy;
    if (!res.steps_to_target && reached) res.steps_to_target = step;
    return stop_at_target && res.steps_to_target.has_value();
  };
  const std::size_t start = trainer.state().step;
  if (!evaluate(start)) {
    for (std::size_t k = 1; k <= cfg.steps; ++k) {
      const double loss = trainer.step();
      res.loss_curve.emplace_back(trainer.state().step, loss);
      if (k % every == 0 || k == cfg.steps) {
        if (evaluate(trainer.state().step)) break;
      }
    }
  }
  res.last = make_checkpoint(model, trainer.state(), cfg);
  if (val.empty()) res.best = res.last;
  return res;
}

// ---------------------------------------------------------------------------
// Masked modelling pretraining

namespace detail {

// Redraws until at least one position is masked; deterministic in `rng`.
inline MlmBatch draw_mlm(const PreparedSample& s, std::size_t stages, double rate, Rng& rng, bool need_text = false) {
  for (int attempt = 0; attempt < 10000; ++attempt) {
    auto b = try_mlm_corrupt(s.ids, {}, stages, rate, rng);
    if (b && (!need_text || !b->text_positions.empty())) return *std::move(b);
  }
  throw ContractError("mlm: could not draw a masked position");
}

}  // namespace detail

template <class T>
struct MlmStepLoss {
  double total = 0.0, text = 0.0, visual = 0.0;
};

template <class T>
MlmLoss<T> mlm_sample_loss(const Model<T>& model, const PreparedSample& s, const MlmBatch& b, T beta) {
  auto visual = model.visual_tokens(s.image);
  ForwardOptions opts;
  opts.withheld = b.withheld;
  auto fused = model.fuse(b.corrupted_ids, visual, opts);
  return mlm_loss(fused.hidden, fused.layout, b, visual, model.params(), beta);
}

template <class T>
class MlmTrainer {
 public:
  MlmTrainer(Model<T>& model, const std::vector<PreparedSample>& captions, const TrainConfig& cfg,
             AdamState<T> state = {})
      : model_(model), data_(captions), cfg_(cfg), state_(std::move(state)),
        batches_(captions.size(), cfg.batch_size, cfg.seed) {
    cfg_.validate();
  }

  MlmStepLoss<T> step() {
    auto idx = batches_.batch(state_.step);
    std::sort(idx.begin(), idx.end());
    model_.params().zero_grad();
    std::vector<Tensor<T>> losses;
    MlmStepLoss<T> out;
    for (auto i : idx) {
      Rng rng = Rng::derive(cfg_.seed, 0x4D4C4D00000000ull + i);
      auto b = detail::draw_mlm(data_[i], model_.config().stages, cfg_.mask_rate, rng);
      auto l = mlm_sample_loss(model_, data_[i], b, static_cast<T>(cfg_.visual_weight));
      out.text += static_cast<double>(l.text);
      out.visual += static_cast<double>(l.visual);
      losses.push_back(reshape(l.total, {1, 1}));
    }
    auto total = mean(concat_rows(losses));
    backward(total);
    adam_step(model_.params(), state_, cfg_.adam());
    out.total = static_cast<double>(total.item());
    out.text /= double(idx.size());
    out.visual /= double(idx.size());
    return out;
  }

  const AdamState<T>& state() const { return state_; }

 private:
  Model<T>& model_;
  const std::vector<PreparedSample>& data_;
  TrainConfig cfg_;
  AdamState<T> state_;
  BatchSchedule batches_;
};

/// Mean masked-text cross-entropy over one fixed corruption per caption.
template <class T>
double evaluate_mlm_text(const Model<T>& model, const std::vector<PreparedSample>& captions, double rate,
                         std::uint64_t seed) {
  NoGradGuard guard;
  Rng rng = Rng::derive(seed, 0x4556414Cull);
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& s : captions) {
    if (s.ids.empty()) continue;
    auto b = detail::draw_mlm(s, model.config().stages, rate, rng, true);
    acc += static_cast<double>(mlm_sample_loss(model, s, b, T(1)).text);
    ++n;
  }
  if (n == 0) throw ContractError("evaluate_mlm_text: no captions with text");
  return acc / double(n);
}

template <class T>
struct PretrainResult {
  std::vector<std::pair<std::size_t, double>> loss_curve;  // total loss per step
  std::vector<std::pair<std::size_t, double>> text_curve;  // masked-text term per step
  double initial_text_loss = 0.0;  // fixed-mask evaluation before training
  double final_text_loss = 0.0;    // same masks after training
  Checkpoint<T> checkpoint;
};

template <class T>
PretrainResult<T> pretrain_mlm(Model<T>& model, const std::vector<PreparedSample>& captions, const TrainConfig& cfg,
                               AdamState<T> state = {}) {
  if (captions.empty()) throw ContractError("pretrain_mlm: empty dataset");
  MlmTrainer<T> trainer(model, captions, cfg, std::move(state));
  PretrainResult<T> res;
  res.initial_text_loss = evaluate_mlm_text(model, captions, cfg.mask_rate, cfg.seed);
  for (std::size_t k = 0; k < cfg.steps; ++k) {
    auto l = trainer.step();
    res.loss_curve.emplace_back(trainer.state().step, l.total);
    res.text_curve.emplace_back(trainer.state().step, l.text);
  }
  res.final_text_loss = evaluate_mlm_text(model, captions, cfg.mask_rate, cfg.seed);
  res.checkpoint = make_checkpoint(model, trainer.state(), cfg);
  return res;
}

}  // namespace mf2
