#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mf2vqa/random.hpp"
#include "mf2vqa/tensor.hpp"

namespace mf2 {

/// Named trainable tensors. Iteration is in name order, which fixes the
/// order of every per-parameter loop (init, optimizer, serialization).
template <class T>
class ParameterSet {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  Tensor<T>& add(const std::string& name, Tensor<T> t) {
    if (entries_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
    t.set_requires_grad(true);
    return entries_.emplace(name, std::move(t)).first->second;
  }

  const Tensor<T>& get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw IndexError("unknown parameter '" + name + "'");
    return it->second;
  }
  Tensor<T>& get(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw IndexError("unknown parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return entries_.count(name) > 0; }

  const Map& entries() const { return entries_; }
  Map& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

  // Copy of values with no graph links or shared storage.
  ParameterSet clone() const {
    ParameterSet out;
    for (const auto& [name, t] : entries_) out.add(name, t.detach());
    return out;
  }

  // Overwrites values of every parameter also present in `other` (shapes must match).
  std::size_t assign_from(const ParameterSet& other) {
    std::size_t copied = 0;
    for (auto& [name, t] : entries_) {
      if (!other.contains(name)) continue;
      const auto& src = other.get(name);
      if (src.shape() != t.shape()) {
        throw DimensionError("parameter '" + name + "' shape " + shape_str(src.shape()) + " vs " +
                             shape_str(t.shape()));
      }
      std::copy(src.data().begin(), src.data().end(), t.mutable_data().begin());
      ++copied;
    }
    return copied;
  }

 private:
  Map entries_;
};

namespace init {

template <class T>
Tensor<T> normal(const Shape& shape, double stddev, Rng& rng) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
  return Tensor<T>(shape, std::move(v));
}

template <class T>
Tensor<T> constant(const Shape& shape, T value) {
  return Tensor<T>(shape, value);
}

}  // namespace init

}  // namespace mf2
