#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "mf2vqa/ops.hpp"
#include "mf2vqa/params.hpp"
#include "mf2vqa/tnsr.hpp"

namespace mf2 {

/// Image as C x H x W floats in [0, 1].
struct Image {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<float> data;

  float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
  float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }

  bool operator==(const Image&) const = default;
};

struct VisionConfig {
  std::size_t in_channels = 1;
  std::size_t image_size = 32;
  std::size_t stages = 5;
  std::size_t base_channels = 8;
  std::size_t hidden = 64;
  // One 1x1 projection for all stages; the backbone then keeps a constant
  // channel width so the projection input matches at every stage.
  bool shared_projection = false;

  std::size_t stage_channels(std::size_t stage) const {
    return shared_projection ? base_channels : base_channels << (stage - 1);
  }
  std::size_t stage_resolution(std::size_t stage) const { return image_size >> stage; }

  void validate() const {
    if (stages == 0) throw ConfigError("vision: stage count must be positive");
    if (in_channels == 0 || base_channels == 0 || hidden == 0) throw ConfigError("vision: zero-sized config");
    if (stages >= 31 || (image_size >> stages) == 0 || (image_size % (std::size_t{1} << stages)) != 0) {
      throw ConfigError("vision: image size " + std::to_string(image_size) + " must be divisible by 2^" +
                        std::to_string(stages));
    }
  }
};

template <class T>
struct FeaturePyramid {
  std::vector<Tensor<T>> stages;  // stage 1 first, highest resolution
  std::vector<std::size_t> stage_channels;
  std::vector<std::size_t> stage_resolutions;
};

namespace vision {

inline std::string block_weight(std::size_t s) { return "vision.block" + std::to_string(s) + ".weight"; }
inline std::string block_bias(std::size_t s) { return "vision.block" + std::to_string(s) + ".bias"; }
inline std::string proj_weight(const VisionConfig& c, std::size_t s) {
  return c.shared_projection ? std::string("vision.proj.weight") : "vision.proj" + std::to_string(s) + ".weight";
}
inline std::string proj_bias(const VisionConfig& c, std::size_t s) {
  return c.shared_projection ? std::string("vision.proj.bias") : "vision.proj" + std::to_string(s) + ".bias";
}

// He-normal conv weights, zero biases, 1/sqrt(fan_in) projections.
template <class T>
void add_params(ParameterSet<T>& params, const VisionConfig& cfg, Rng& rng) {
  cfg.validate();
  std::size_t in = cfg.in_channels;
  for (std::size_t s = 1; s <= cfg.stages; ++s) {
    const std::size_t out = cfg.stage_channels(s);
    params.add(block_weight(s), init::normal<T>({out, in, 3, 3}, std::sqrt(2.0 / (9.0 * in)), rng));
    params.add(block_bias(s), init::constant<T>({out}, T(0)));
    in = out;
  }
  for (std::size_t s = 1; s <= cfg.stages; ++s) {
    if (cfg.shared_projection && s > 1) break;
    const std::size_t c = cfg.stage_channels(s);
    params.add(proj_weight(cfg, s), init::normal<T>({cfg.hidden, c, 1, 1}, 1.0 / std::sqrt(double(c)), rng));
    params.add(proj_bias(cfg, s), init::constant<T>({cfg.hidden}, T(0)));
  }
}

}  // namespace vision

template <class T>
Tensor<T> image_to_tensor(const Image& img) {
  std::vector<T> v(img.data.begin(), img.data.end());
  return Tensor<T>({img.channels, img.height, img.width}, std::move(v));
}

/// Runs the strided conv backbone: each stage is conv3x3(stride 2, pad 1) + ReLU.
template <class T>
FeaturePyramid<T> encode_image(const Image& img, const ParameterSet<T>& params, const VisionConfig& cfg) {
  if (img.channels != cfg.in_channels || img.height != cfg.image_size || img.width != cfg.image_size) {
    throw DimensionError("encode_image: image " + std::to_string(img.channels) + "x" + std::to_string(img.height) +
                         "x" + std::to_string(img.width) + " does not match configured " +
                         std::to_string(cfg.in_channels) + "x" + std::to_string(cfg.image_size) + "x" +
                         std::to_string(cfg.image_size));
  }
  FeaturePyramid<T> pyr;
  Tensor<T> x = image_to_tensor<T>(img);
  for (std::size_t s = 1; s <= cfg.stages; ++s) {
    x = relu(conv2d(x, params.get(vision::block_weight(s)), params.get(vision::block_bias(s)), 2, 1));
    pyr.stages.push_back(x);
    pyr.stage_channels.push_back(x.dim(0));
    pyr.stage_resolutions.push_back(x.dim(1));
  }
  return pyr;
}

/// token = GAP(conv1x1(map)), a length-d vector.
template <class T>
Tensor<T> project_stage(const Tensor<T>& map, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (map.rank() != 3 || weight.rank() != 4 || weight.dim(1) != map.dim(0)) {
    throw DimensionError("project_stage: map " + shape_str(map.shape()) + " does not match projector " +
                         shape_str(weight.shape()));
  }
  return global_avg_pool(conv2d(map, weight, bias, 1, 0));
}

/// Projects every stage and stacks the tokens as an S x d matrix.
template <class T>
Tensor<T> visual_tokens(const FeaturePyramid<T>& pyr, const ParameterSet<T>& params, const VisionConfig& cfg) {
  std::vector<Tensor<T>> rows;
  for (std::size_t s = 1; s <= pyr.stages.size(); ++s) {
    auto tok = project_stage(pyr.stages[s - 1], params.get(vision::proj_weight(cfg, s)),
                             params.get(vision::proj_bias(cfg, s)));
    rows.push_back(reshape(tok, {1, tok.size()}));
  }
  return concat_rows(rows);
}

// ---------------------------------------------------------------------------
// Image files

namespace detail {

inline Image resize_nearest(const Image& src, std::size_t size) {
  if (size == 0 || (src.height == size && src.width == size)) return src;
  Image dst{src.channels, size, size, std::vector<float>(src.channels * size * size)};
  for (std::size_t c = 0; c < src.channels; ++c)
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x)
        dst.at(c, y, x) = src.at(c, y * src.height / size, x * src.width / size);
  return dst;
}

inline Image parse_pgm(const std::string& bytes) {
  std::size_t pos = 2;  // past "P5"
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&](const char* what) {
    skip_ws();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > 1u << 20) throw FormatError(std::string("PGM ") + what + " too large", start);
      ++pos;
    }
    if (pos == start) throw FormatError(std::string("PGM header: expected ") + what, pos);
    return v;
  };
  const std::size_t width = read_uint("width");
  const std::size_t height = read_uint("height");
  const std::size_t maxval = read_uint("maxval");
  if (width == 0 || height == 0) throw FormatError("PGM dims must be positive", pos);
  if (maxval == 0 || maxval > 255) throw FormatError("PGM maxval must be in [1,255]", pos);
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw FormatError("PGM header: expected single whitespace before payload", pos);
  }
  ++pos;
  const std::size_t need = width * height;
  if (bytes.size() - pos < need) {
    throw FormatError("PGM payload truncated: need " + std::to_string(need) + " bytes, have " +
                          std::to_string(bytes.size() - pos),
                      bytes.size());
  }
  Image img{1, height, width, std::vector<float>(need)};
  for (std::size_t i = 0; i < need; ++i) {
    img.data[i] = static_cast<float>(static_cast<unsigned char>(bytes[pos + i])) / static_cast<float>(maxval);
  }
  return img;
}

}  // namespace detail

/// Loads a P5 PGM or a rank-3 (C,H,W) TNSR file and resizes it to `size`
/// by nearest neighbour (size 0 keeps the stored size). PGM values are
/// scaled to [0, 1].
inline Image load_image(const std::string& path, std::size_t size) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Image img;
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') {
    img = detail::parse_pgm(bytes);
  } else if (bytes.size() >= 4 && bytes.compare(0, 4, "TNSR") == 0) {
    std::istringstream ss(bytes);
    tnsr::Reader r(ss);
    auto block = r.read_block();
    if (block.shape.size() != 3) throw FormatError("TNSR image must be rank 3 (C,H,W)", 5);
    auto t = tnsr::to_tensor<float>(block);
    img = Image{block.shape[0], block.shape[1], block.shape[2], t.vec()};
  } else {
    throw FormatError("unrecognised image format in '" + path + "' (expected P5 PGM or TNSR)", 0);
  }
  return detail::resize_nearest(img, size);
}

/// Writes channel 0 as an 8-bit P5 PGM, values clamped to [0, 1].
inline void save_pgm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "P5\n" << img.width << " " << img.height << "\n255\n";
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const float v = std::clamp(img.at(0, y, x), 0.0f, 1.0f);
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
    }
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline void save_image_tnsr(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  tnsr::write<float>(out, {img.channels, img.height, img.width}, img.data);
}

}  // namespace mf2
