#pragma once

#include <filesystem>
#include <string>

#include "mf2vqa/mf2vqa.hpp"
#include "reference/scalar_model.hpp"

namespace testing_support {

struct TinyFusion {
  mf2::FusionConfig cfg;
  std::size_t stages = 0;
  std::size_t vocab = 0;
};

/// Embedding + fusion parameters with every entry redrawn from N(0, scale)
/// (gains around 1) so no term is degenerate.
template <class T>
mf2::ParameterSet<T> random_fusion_params(const TinyFusion& tf, std::uint64_t seed, double scale = 0.5) {
  mf2::ParameterSet<T> p;
  mf2::Rng rng(seed);
  mf2::add_embedding_params(p, mf2::EmbeddingConfig{tf.vocab, tf.cfg.hidden, tf.cfg.max_text_len + 2 + tf.stages, tf.cfg.eps},
                            rng);
  mf2::add_fusion_params(p, tf.cfg, rng);
  for (auto& [name, t] : p.entries()) {
    const bool gain = name.find("gain") != std::string::npos;
    for (auto& v : t.mutable_data()) v = static_cast<T>((gain ? 1.0 : 0.0) + rng.normal(0.0, scale));
  }
  return p;
}

template <class T>
mf2::Tensor<T> random_matrix(std::size_t r, std::size_t c, mf2::Rng& rng, double scale = 1.0) {
  std::vector<T> v(r * c);
  for (auto& x : v) x = static_cast<T>(rng.normal(0.0, scale));
  return mf2::Tensor<T>({r, c}, std::move(v));
}

template <class T>
ref::Table to_table(const mf2::ParameterSet<T>& p) {
  ref::Table t;
  for (const auto& [name, v] : p.entries()) t[name] = std::vector<double>(v.data().begin(), v.data().end());
  return t;
}

inline ref::Mat to_mat(const mf2::Tensor<double>& t) {
  ref::Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i, j);
  return m;
}

inline double max_abs_diff(const mf2::Tensor<double>& a, const ref::Mat& b) {
  double e = 0;
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) e = std::max(e, std::abs(a.at(i, j) - b[i][j]));
  return e;
}

inline std::string temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mf2_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace testing_support
