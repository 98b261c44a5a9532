#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "mf2vqa/errors.hpp"
#include "mf2vqa/tensor.hpp"

// TNSR block: "TNSR", u8 dtype (0 = f32, 1 = f64), u8 rank, rank x u32 LE dims,
// row-major LE payload.

namespace mf2::tnsr {

static_assert(std::endian::native == std::endian::little, "TNSR I/O assumes a little-endian host");

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::F32 : DType::F64;
}

template <class T>
void write(std::ostream& out, const Shape& shape, std::span<const T> values) {
  if (shape.size() > 255) throw DimensionError("TNSR rank exceeds 255");
  out.write("TNSR", 4);
  const auto dtype = static_cast<std::uint8_t>(dtype_of<T>());
  const auto rank = static_cast<std::uint8_t>(shape.size());
  out.put(static_cast<char>(dtype));
  out.put(static_cast<char>(rank));
  for (auto d : shape) {
    const auto d32 = static_cast<std::uint32_t>(d);
    out.write(reinterpret_cast<const char*>(&d32), 4);
  }
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(T)));
  if (!out) throw IoError("TNSR write failed");
}

template <class T>
void write(std::ostream& out, const Tensor<T>& t) {
  write<T>(out, t.shape(), t.data());
}

// Decoded block with payload widened or kept at its stored precision.
struct Block {
  DType dtype = DType::F32;
  Shape shape;
  std::vector<double> values;
  std::vector<float> f32;  // populated iff dtype == F32, for bit-exact reloads
};

class Reader {
 public:
  Reader(std::istream& in, std::size_t base_offset = 0) : in_(in), offset_(base_offset) {}

  std::size_t offset() const { return offset_; }

  void read_bytes(void* dst, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw FormatError(std::string("truncated input while reading ") + what, offset_ + in_.gcount());
    }
    offset_ += n;
  }

  template <class U>
  U read_le(const char* what) {
    U v{};
    read_bytes(&v, sizeof(U), what);
    return v;
  }

  Block read_block() {
    char magic[4];
    const std::size_t start = offset_;
    read_bytes(magic, 4, "TNSR magic");
    if (std::memcmp(magic, "TNSR", 4) != 0) throw FormatError("bad TNSR magic", start);
    Block b;
    const auto dtype = read_le<std::uint8_t>("TNSR dtype");
    if (dtype > 1) throw FormatError("unknown TNSR dtype " + std::to_string(dtype), offset_ - 1);
    b.dtype = static_cast<DType>(dtype);
    const auto rank = read_le<std::uint8_t>("TNSR rank");
    if (rank == 0) throw FormatError("TNSR rank must be positive", offset_ - 1);
    std::size_t count = 1;
    for (std::uint8_t i = 0; i < rank; ++i) {
      const auto d = read_le<std::uint32_t>("TNSR dim");
      if (d == 0) throw FormatError("TNSR dim must be positive", offset_ - 4);
      b.shape.push_back(d);
      count *= d;
    }
    if (b.dtype == DType::F32) {
      b.f32.resize(count);
      read_bytes(b.f32.data(), count * sizeof(float), "TNSR payload");
      b.values.assign(b.f32.begin(), b.f32.end());
    } else {
      b.values.resize(count);
      read_bytes(b.values.data(), count * sizeof(double), "TNSR payload");
    }
    return b;
  }

 private:
  std::istream& in_;
  std::size_t offset_;
};

// Converts a decoded block to Tensor<T>. Same-precision loads are bit-exact.
template <class T>
Tensor<T> to_tensor(const Block& b) {
  std::vector<T> data;
  if constexpr (std::is_same_v<T, float>) {
    if (b.dtype == DType::F32) {
      data = b.f32;
    } else {
      data.assign(b.values.begin(), b.values.end());
    }
  } else {
    data = b.values;
  }
  return Tensor<T>(b.shape, std::move(data));
}

template <class T>
void save(const std::string& path, const Tensor<T>& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  write(out, t);
}

template <class T>
Tensor<T> load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  Reader r(in);
  return to_tensor<T>(r.read_block());
}

}  // namespace mf2::tnsr
