// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//   acceptance [--work DIR] [--only NAME]
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "support.hpp"

using namespace mf2;
using testing_support::random_fusion_params;
using testing_support::random_matrix;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

// Model with every bias and gain redrawn so no term is trivially symmetric.
template <class T>
Model<T> random_model(const ModelConfig& mc, std::uint64_t seed) {
  Model<T> m(mc, seed);
  Rng rng = Rng::derive(seed, 77);
  for (auto& [name, t] : m.params().entries()) {
    const bool gain = name.find("gain") != std::string::npos;
    if (gain || name.find("bias") != std::string::npos)
      for (auto& v : t.mutable_data()) v = static_cast<T>((gain ? 1.0 : 0.0) + rng.normal(0.0, 0.2));
  }
  return m;
}

Image random_image(std::size_t size, Rng& rng) {
  Image img{1, size, size, std::vector<float>(size * size)};
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  return img;
}

std::vector<std::size_t> random_ids(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back(token_id::first_free + rng.below(vocab - token_id::first_free));
  return ids;
}

ModelConfig small_config(std::size_t hidden, std::size_t heads, std::size_t stages, std::size_t image) {
  ModelConfig mc;
  mc.hidden = hidden;
  mc.heads = heads;
  mc.stages = stages;
  mc.layers = stages;
  mc.image_size = image;
  mc.base_channels = 4;
  mc.max_text_len = 8;
  mc.vocab_size = 20;
  mc.num_answers = 3;
  return mc;
}

// ---------------------------------------------------------------------------

Verdict gradient_suite() {
  const auto t0 = Clock::now();
  auto rep = check_model_gradients(ModelGradCheckOptions{});
  const double secs = seconds_since(t0);
  std::string worst;
  double w = -1;
  for (const auto& [name, e] : rep.per_parameter)
    if (e > w) w = e, worst = name;
  return {rep.max_rel_error < 1e-6 && secs < 60.0,
          fmt("%zu parameters, %zu scalars, max rel err %.2e (%s), %.1f s", rep.per_parameter.size(), rep.scalars,
              rep.max_rel_error, worst.c_str(), secs)};
}

Verdict causality_suite() {
  bool ok = true;
  std::size_t checks = 0, sensitive = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    auto mc = small_config(16, 2, 5, 32);
    auto model = random_model<double>(mc, seed);
    Rng rng = Rng::derive(seed, 5);
    const auto img = random_image(32, rng);
    const auto ids = random_ids(6, mc.vocab_size, rng);
    const auto vis = model.visual_tokens(img).detach();
    const auto base = model.fuse(ids, vis);
    for (std::size_t k = 1; k <= 5; ++k) {
      auto pv = vis.vec();
      for (std::size_t j = 0; j < mc.hidden; ++j) pv[(k - 1) * mc.hidden + j] += rng.normal();
      const auto pert = model.fuse(ids, Tensor<double>(vis.shape(), pv));
      for (std::size_t l = 1; l < k; ++l) {
        ok = ok && base.layer_outputs[l - 1].vec() == pert.layer_outputs[l - 1].vec();
        ++checks;
      }
      // the perturbation must be visible from layer k on
      ok = ok && base.layer_outputs[k - 1].vec() != pert.layer_outputs[k - 1].vec();
    }
    mc.mode = FusionMode::Baseline;
    Model<double> bm(mc, seed);
    bm.params().assign_from(model.params());
    const auto bbase = bm.fuse(ids, vis);
    for (std::size_t k = 1; k <= 5; ++k) {
      auto pv = vis.vec();
      pv[(k - 1) * mc.hidden] += 0.5;
      const auto pert = bm.fuse(ids, Tensor<double>(vis.shape(), pv));
      const bool differs = bbase.layer_outputs[0].vec() != pert.layer_outputs[0].vec();
      sensitive += differs;
      ok = ok && differs;
    }
  }
  return {ok, fmt("%zu earlier-layer comparisons bit-identical, baseline layer 1 sensitive to %zu/15 stage perturbations",
                  checks, sensitive)};
}

template <class T>
void embedding_stats(const Model<T>& model, std::span<const std::size_t> ids, double& worst_mean, double& worst_var) {
  const auto& p = model.params();
  const auto& g = p.get(embed_names::gain).data();
  const auto& b = p.get(embed_names::bias).data();
  const std::size_t d = model.config().hidden;
  auto account = [&](const Tensor<T>& rows) {
    for (std::size_t r = 0; r < rows.dim(0); ++r) {
      double mu = 0, var = 0;
      std::vector<double> z(d);
      for (std::size_t j = 0; j < d; ++j) z[j] = (double(rows.at(r, j)) - double(b[j])) / double(g[j]);
      for (double v : z) mu += v;
      mu /= double(d);
      for (double v : z) var += (v - mu) * (v - mu);
      var /= double(d);
      worst_mean = std::max(worst_mean, std::abs(mu));
      worst_var = std::max(worst_var, std::abs(var - 1.0));
    }
  };
  account(embed_text(ids, p, model.config().eps));
  const auto vis = model.visual_tokens(Image{1, model.config().image_size, model.config().image_size,
                                             std::vector<float>(model.config().image_size * model.config().image_size,
                                                                0.25f)});
  for (std::size_t s = 0; s < model.config().stages; ++s) {
    const std::size_t pos = ids.size() + 2 + s;
    account(embed_vector(slice_rows(vis, s, 1), 1, pos, p, T(model.config().eps)));
  }
}

Verdict normalization_suite() {
  double worst_row = 0;
  std::size_t rows = 0;
  double worst_mean = 0, worst_var = 0;
  for (FusionMode mode : {FusionMode::Staged, FusionMode::Baseline}) {
    for (std::uint64_t seed : {1, 2}) {
      ModelConfig mc;
      mc.vocab_size = 40;
      mc.num_answers = 4;
      mc.mode = mode;
      auto model = random_model<float>(mc, seed);
      Rng rng = Rng::derive(seed, 6);
      for (int sample = 0; sample < 3; ++sample) {
        const auto ids = random_ids(3 + 4 * sample, mc.vocab_size, rng);
        ForwardOptions fo;
        fo.record_trace = true;
        NoGradGuard guard;
        const auto out = model.forward(ids, random_image(mc.image_size, rng), fo);
        const auto& tr = out.fusion.trace.at(0);
        for (const auto& layer : tr.weights)
          for (const auto& w : layer)
            for (std::size_t i = 0; i < tr.length; ++i) {
              double s = 0;
              for (std::size_t j = 0; j < tr.length; ++j) s += w[i * tr.length + j];
              worst_row = std::max(worst_row, std::abs(s - 1.0));
              ++rows;
            }
        embedding_stats(model, ids, worst_mean, worst_var);
      }
    }
  }
  return {worst_row <= 1e-6 && worst_mean <= 1e-6 && worst_var <= 1e-4,
          fmt("%zu attention rows, max |sum-1| %.2e; embedded rows max |mean| %.2e, max |var-1| %.2e", rows,
              worst_row, worst_mean, worst_var)};
}

struct ScalarAdam {
  double m = 0, v = 0;
  int t = 0;
  double step(double theta, double g, double lr, double b1, double b2, double eps) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    return theta - lr * mh / (std::sqrt(vh) + eps);
  }
};

Verdict oracle_suite() {
  const std::vector<std::size_t> ids = {5, 9, 7, 11};
  double worst = 0;
  for (std::uint64_t seed : {22, 23, 24}) {
    for (InjectMode mode : {InjectMode::Replace, InjectMode::Add}) {
      testing_support::TinyFusion tf;
      tf.cfg.hidden = 8;
      tf.cfg.heads = 2;
      tf.cfg.layers = 2;
      tf.cfg.max_text_len = 8;
      tf.cfg.inject = mode;
      tf.stages = 2;
      tf.vocab = 12;
      auto p = random_fusion_params<double>(tf, seed);
      Rng rng(seed + 100);
      auto vis = random_matrix<double>(2, 8, rng);
      auto emb = embed_text<double>(ids, p);
      ref::Dims dm{8, 2, 2, 2};
      dm.add_inject = mode == InjectMode::Add;
      const auto table = testing_support::to_table(p);
      const auto staged = staged_forward(emb, {}, vis, FusionSchedule::stagewise(2, 2), p, tf.cfg);
      const auto so = ref::forward(table, ids, testing_support::to_mat(vis), {1, 2}, dm);
      const auto base = baseline_forward(emb, {}, vis, p, tf.cfg);
      const auto bo = ref::forward(table, ids, testing_support::to_mat(vis), {1, 1}, dm);
      for (std::size_t l = 0; l < 2; ++l) {
        worst = std::max(worst, testing_support::max_abs_diff(staged.layer_outputs[l], so[l]));
        worst = std::max(worst, testing_support::max_abs_diff(base.layer_outputs[l], bo[l]));
      }
    }
  }
  // Adam on several parameters with random gradients for 100 steps.
  ParameterSet<double> ps;
  ps.add("a", Tensor<double>({3}, 0.5));
  ps.add("b", Tensor<double>({2}, -1.0));
  AdamState<double> st;
  AdamConfig ac{1e-2, 0.85, 0.97, 1e-7};
  std::vector<ScalarAdam> ref(5);
  std::vector<double> theta = {0.5, 0.5, 0.5, -1.0, -1.0};
  Rng rng(31);
  double adam_err = 0;
  for (int step = 0; step < 100; ++step) {
    std::vector<double> g(5);
    for (auto& x : g) x = rng.normal(0.0, 1.5);
    for (std::size_t i = 0; i < 3; ++i) ps.get("a").mutable_grad()[i] = g[i];
    for (std::size_t i = 0; i < 2; ++i) ps.get("b").mutable_grad()[i] = g[3 + i];
    adam_step(ps, st, ac);
    for (std::size_t i = 0; i < 5; ++i) theta[i] = ref[i].step(theta[i], g[i], ac.lr, ac.beta1, ac.beta2, ac.eps);
    for (std::size_t i = 0; i < 3; ++i) adam_err = std::max(adam_err, std::abs(ps.get("a").data()[i] - theta[i]));
    for (std::size_t i = 0; i < 2; ++i) adam_err = std::max(adam_err, std::abs(ps.get("b").data()[i] - theta[3 + i]));
  }
  return {worst <= 1e-6 && adam_err <= 1e-9,
          fmt("fusion vs scalar reference max |diff| %.2e over 12 forwards; Adam 100-step max |diff| %.2e", worst,
              adam_err)};
}

// Synthetic two-scale data shared by the learning and pretraining suites.
struct Desk {
  SyntheticSpec spec;
  SyntheticDataset ds;
  ModelConfig mc;
  std::vector<PreparedSample> train, val, captions;
};

const Desk& desk(const std::string& work) {
  static const Desk d = [&] {
    Desk d;
    const std::string dir = work + "/desk_data";
    d.spec.train_images = 300;
    d.spec.val_images = 100;
    d.spec.seed = 11;
    d.ds = generate_synthetic(d.spec, dir);
    d.mc.vocab_size = d.ds.vocab.size();
    d.mc.num_answers = d.ds.answers.size();
    d.train = prepare_vqa(d.ds.train, dir, d.ds.vocab, d.ds.answers, d.mc);
    d.val = prepare_vqa(d.ds.val, dir, d.ds.vocab, d.ds.answers, d.mc);
    d.captions = prepare_captions(d.ds.captions, dir, d.ds.vocab, d.mc);
    return d;
  }();
  return d;
}

Verdict learning_suite(const std::string& work) {
  const auto& d = desk(work);
  Model<float> model(d.mc, 5);
  TrainConfig tc;
  tc.lr = 1e-3;
  tc.steps = 2000;
  tc.eval_every = 100;
  tc.seed = 3;
  tc.target_per_category = true;
  const auto t0 = Clock::now();
  auto res = finetune_vqa(model, d.train, d.val, tc);
  const double secs = seconds_since(t0);
  const auto& last = res.history.back();

  ForwardOptions coarse_only;
  coarse_only.zero_stages.assign(d.mc.stages, 1);
  coarse_only.zero_stages[d.mc.stages - 1] = 0;
  const auto ablated = score(d.val, predict(model, d.val, 1, coarse_only));
  const double chance = 1.0 / double(d.spec.fine_classes);
  const double texture_ablated = ablated.by_category.at("texture");
  const bool ok = res.steps_to_target.has_value() && secs < 600.0 && texture_ablated <= chance + 0.15;
  return {ok, fmt("%zu/%zu samples; shape and texture >= 90%% at step %s; final shape %.3f texture %.3f; %.0f s; "
                  "coarse-only texture %.3f (limit %.3f)",
                  d.train.size(), d.val.size(),
                  res.steps_to_target ? std::to_string(*res.steps_to_target).c_str() : "never",
                  last.category_accuracy.at("shape"), last.category_accuracy.at("texture"), secs, texture_ablated,
                  chance + 0.15)};
}

Verdict pretraining_suite(const std::string& work) {
  const auto& d = desk(work);
  std::size_t faster = 0;
  bool loss_ok = true;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    Model<float> pre(d.mc, seed);
    TrainConfig pc;
    pc.lr = 1e-3;
    pc.steps = 500;
    pc.seed = seed;
    const auto pr = pretrain_mlm(pre, d.captions, pc);
    loss_ok = loss_ok && pr.final_text_loss < 0.5 * pr.initial_text_loss;

    TrainConfig fc;
    fc.lr = 1e-3;
    fc.steps = 2000;
    fc.eval_every = 25;
    fc.seed = seed;
    Model<float> scratch(d.mc, seed);
    const auto rs = finetune_vqa(scratch, d.train, d.val, fc, true);
    const auto rp = finetune_vqa(pre, d.train, d.val, fc, true);
    const std::size_t never = fc.steps + 1;
    const std::size_t s = rs.steps_to_target.value_or(never), p = rp.steps_to_target.value_or(never);
    faster += p < s;
    detail += fmt("%sseed %llu: text loss %.3f -> %.3f, steps to 90%% scratch %zu pretrained %zu", detail.empty() ? "" : "; ",
                  static_cast<unsigned long long>(seed), pr.initial_text_loss, pr.final_text_loss, s, p);
  }
  return {loss_ok && faster >= 2, detail + fmt("; pretrained faster in %zu/3", faster)};
}

struct BleuCase {
  const char* prediction;
  const char* reference;
  double expected;
};

Verdict metrics_suite() {
  const double e = std::exp(1.0);
  const BleuCase cases[] = {
      {"t2 weighted", "t2 weighted mri", std::exp(-0.5)},
      {"axial", "axial", 1.0},
      {"yes", "no", 0.0},
      {"", "abc", 0.0},
      {"T2  Weighted MRI", "t2 weighted mri", 1.0},
      {"a b c", "a b c d e f", 1.0 / e},
      {"a b c d x", "a b c d e", std::pow(0.8 * 0.75 * (2.0 / 3.0) * 0.5, 0.25)},
      {"a", "a a b", std::exp(-2.0)},
      {"a b c d a", "a b c d e f", std::exp(-0.2) * std::pow(0.8 * 0.75 * (2.0 / 3.0) * 0.5, 0.25)},
      {"the the the the", "the cat", 0.0},
  };
  double bleu_err = 0;
  for (const auto& c : cases) bleu_err = std::max(bleu_err, std::abs(bleu(c.prediction, c.reference) - c.expected));

  // Determinism and resume on a small model.
  auto mc = small_config(16, 2, 3, 16);
  SyntheticSpec spec;
  spec.image_size = 16;
  spec.train_images = 6;
  spec.seed = 2;
  const auto dir = testing_support::temp_dir("acceptance_resume");
  auto ds = generate_synthetic(spec, dir);
  mc.vocab_size = ds.vocab.size();
  mc.num_answers = ds.answers.size();
  const auto train = prepare_vqa(ds.train, dir, ds.vocab, ds.answers, mc);
  const auto caps = prepare_captions(ds.captions, dir, ds.vocab, mc);
  TrainConfig tc;
  tc.lr = 1e-3;
  tc.batch_size = 4;
  tc.seed = 8;
  auto run = [&](std::size_t steps) {
    Model<float> m(mc, 4);
    VqaTrainer<float> t(m, train, tc);
    for (std::size_t k = 0; k < steps; ++k) t.step();
    return serialize_checkpoint(make_checkpoint(m, t.state(), tc));
  };
  auto pretrain_bytes = [&] {
    Model<float> m(mc, 4);
    auto c = tc;
    c.steps = 4;
    return serialize_checkpoint(pretrain_mlm(m, caps, c).checkpoint);
  };
  const bool deterministic = run(5) == run(5) && pretrain_bytes() == pretrain_bytes();

  const auto full = run(5);
  auto ck = parse_checkpoint<float>(run(3));
  Model<float> resumed(ModelConfig::from_snapshot(ck.config), 999);
  resumed.params().assign_from(ck.params);
  VqaTrainer<float> t(resumed, train, tc, ck.adam);
  t.step();
  t.step();
  const bool resume_exact = serialize_checkpoint(make_checkpoint(resumed, t.state(), tc)) == full;

  return {bleu_err <= 1e-9 && deterministic && resume_exact,
          fmt("10 BLEU cases max |err| %.2e; same seed -> identical checkpoints: %s; resume 3+2 == 5 bit-exact: %s",
              bleu_err, deterministic ? "yes" : "no", resume_exact ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  std::string work = "acceptance_work", only;
  for (int i = 1; i < argc; ++i) {
    if (!std::strcmp(argv[i], "--work") && i + 1 < argc) work = argv[++i];
    else if (!std::strcmp(argv[i], "--only") && i + 1 < argc) only = argv[++i];
    else {
      std::fprintf(stderr, "usage: acceptance [--work DIR] [--only NAME]\n");
      return 2;
    }
  }
  std::filesystem::create_directories(work);

  const std::vector<std::pair<std::string, std::function<Verdict()>>> suites = {
      {"gradient", gradient_suite},
      {"stage-causality", causality_suite},
      {"normalization", normalization_suite},
      {"oracle-equivalence", oracle_suite},
      {"learning", [&] { return learning_suite(work); }},
      {"pretraining", [&] { return pretraining_suite(work); }},
      {"metrics-determinism-resume", metrics_suite},
  };
  int failures = 0;
  for (const auto& [name, fn] : suites) {
    if (!only.empty() && name != only) continue;
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failures += !v.pass;
    std::printf("%s %s: %s\n", v.pass ? "PASS" : "FAIL", name.c_str(), v.detail.c_str());
    std::fflush(stdout);
  }
  return failures ? 1 : 0;
}
