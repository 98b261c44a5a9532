#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mf2vqa/tensor.hpp"

// Differentiable operations. Every reduction accumulates in a fixed
// left-to-right order so forward passes are bit-reproducible.

namespace mf2 {

namespace detail {

template <class T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape()));
  }
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// Returns the parent's grad buffer if it participates in backward, else null.
template <class T>
T* grad_of(const std::shared_ptr<Node<T>>& n) {
  if (!n->requires_grad) return nullptr;
  n->ensure_grad();
  return n->grad.data();
}

}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dims differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(m * n, T(0));
  const T* A = a.data().data();
  const T* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = A[i * k + p];
      const T* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>({m, n}, std::move(out), {an, bn}, [an, bn, m, k, n](detail::Node<T>& o) {
    const T* g = o.grad.data();
    if (T* ga = detail::grad_of(an)) {
      const T* B = bn->data.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T acc = T(0);
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * B[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (T* gb = detail::grad_of(bn)) {
      const T* A = an->data.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T av = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
        }
    }
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  auto an = a.node();
  return detail::make_result<T>({n, m}, std::move(out), {an}, [an, m, n](detail::Node<T>& o) {
    if (T* ga = detail::grad_of(an))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += o.grad[j * m + i];
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  auto an = a.node();
  return detail::make_result<T>(std::move(shape), a.vec(), {an}, [an](detail::Node<T>& o) {
    if (T* ga = detail::grad_of(an))
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
  });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {an, bn}, [an, bn](detail::Node<T>& o) {
    if (T* ga = detail::grad_of(an))
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
    if (T* gb = detail::grad_of(bn))
      for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i] += o.grad[i];
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {an, bn}, [an, bn](detail::Node<T>& o) {
    if (T* ga = detail::grad_of(an))
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
    if (T* gb = detail::grad_of(bn))
      for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i] -= o.grad[i];
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {an, bn}, [an, bn](detail::Node<T>& o) {
    if (T* ga = detail::grad_of(an))
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i] * bn->data[i];
    if (T* gb = detail::grad_of(bn))
      for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i] += o.grad[i] * an->data[i];
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  auto an = a.node();
  return detail::make_result<T>(a.shape(), std::move(out), {an}, [an, factor](detail::Node<T>& o) {
    if (T* ga = detail::grad_of(an))
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i] * factor;
  });
}

// x + bias, with bias broadcast along the last axis (the only broadcast supported).
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t d = x.shape().back();
  if (bias.rank() != 1 || bias.dim(0) != d) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match last dim of " +
                         shape_str(x.shape()));
  }
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + bias.data()[i % d];
  auto xn = x.node(), bn = bias.node();
  return detail::make_result<T>(x.shape(), std::move(out), {xn, bn}, [xn, bn, d](detail::Node<T>& o) {
    if (T* gx = detail::grad_of(xn))
      for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
    if (T* gb = detail::grad_of(bn))
      for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i % d] += o.grad[i];
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  auto an = a.node();
  return detail::make_result<T>({1}, {acc}, {an}, [an](detail::Node<T>& o) {
    if (T* ga = detail::grad_of(an))
      for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += o.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
  auto an = a.node();
  return detail::make_result<T>(a.shape(), std::move(out), {an}, [an](detail::Node<T>& o) {
    if (T* ga = detail::grad_of(an))
      for (std::size_t i = 0; i < o.grad.size(); ++i)
        if (an->data[i] > T(0)) ga[i] += o.grad[i];
  });
}

// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.data()[i];
    out[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
  }
  auto an = a.node();
  return detail::make_result<T>(a.shape(), std::move(out), {an}, [an, inv_sqrt2](detail::Node<T>& o) {
    if (T* ga = detail::grad_of(an)) {
      const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        const T x = an->data[i];
        const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
        ga[i] += o.grad[i] * (cdf + x * pdf);
      }
    }
  });
}

/// Softmax along `axis`, max-subtracted. NaN input raises NumericError.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
  }
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  const T* in = x.data().data();
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t q = 0; q < inner; ++q) {
      const std::size_t base = o * len * inner + q;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < len; ++i) {
        const T v = in[base + i * inner];
        if (std::isnan(v)) throw NumericError("softmax: NaN input");
        mx = std::max(mx, v);
      }
      T denom = T(0);
      for (std::size_t i = 0; i < len; ++i) {
        const T e = std::exp(in[base + i * inner] - mx);
        out[base + i * inner] = e;
        denom += e;
      }
      for (std::size_t i = 0; i < len; ++i) out[base + i * inner] /= denom;
    }
  }
  auto xn = x.node();
  // The saved output is the result node's own data.
  return detail::make_result<T>(s, std::move(out), {xn}, [xn, outer, inner, len](detail::Node<T>& o) {
    T* gx = detail::grad_of(xn);
    if (!gx) return;
    const T* y = o.data.data();
    const T* g = o.grad.data();
    for (std::size_t a = 0; a < outer; ++a)
      for (std::size_t q = 0; q < inner; ++q) {
        const std::size_t base = a * len * inner + q;
        T dot = T(0);
        for (std::size_t i = 0; i < len; ++i) dot += g[base + i * inner] * y[base + i * inner];
        for (std::size_t i = 0; i < len; ++i)
          gx[base + i * inner] += y[base + i * inner] * (g[base + i * inner] - dot);
      }
  });
}

/// LayerNorm over the last axis: gain * (x - mean) / sqrt(var + eps) + bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t d = x.shape().back();
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                         shape_str(bias.shape()) + " must match last dim of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.size() / d;
  std::vector<T> xhat(x.size()), inv_std(rows), out(x.size());
  const T* in = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in + r * d;
    T m = T(0);
    for (std::size_t i = 0; i < d; ++i) m += row[i];
    m /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - m) * (row[i] - m);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t i = 0; i < d; ++i) {
      xhat[r * d + i] = (row[i] - m) * is;
      out[r * d + i] = gain.data()[i] * xhat[r * d + i] + bias.data()[i];
    }
  }
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {xn, gn, bn},
      [xn, gn, bn, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& o) {
        const T* g = o.grad.data();
        if (T* gg = detail::grad_of(gn))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < d; ++i) gg[i] += g[r * d + i] * xhat[r * d + i];
        if (T* gb = detail::grad_of(bn))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < d; ++i) gb[i] += g[r * d + i];
        if (T* gx = detail::grad_of(xn)) {
          const T* gain_v = gn->data.data();
          const T inv_d = T(1) / static_cast<T>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dx = T(0), mean_dx_xhat = T(0);
            for (std::size_t i = 0; i < d; ++i) {
              const T dxh = g[r * d + i] * gain_v[i];
              mean_dx += dxh;
              mean_dx_xhat += dxh * xhat[r * d + i];
            }
            mean_dx *= inv_d;
            mean_dx_xhat *= inv_d;
            for (std::size_t i = 0; i < d; ++i) {
              const T dxh = g[r * d + i] * gain_v[i];
              gx[r * d + i] += inv_std[r] * (dxh - mean_dx - xhat[r * d + i] * mean_dx_xhat);
            }
          }
        }
      });
}

// Pre-affine part of layer_norm, without graph recording.
template <class T>
std::vector<T> standardize_rows(std::span<const T> x, std::size_t d, T eps) {
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < x.size() / d; ++r) {
    T m = T(0);
    for (std::size_t i = 0; i < d; ++i) m += x[r * d + i];
    m /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t i = 0; i < d; ++i) var += (x[r * d + i] - m) * (x[r * d + i] - m);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = (x[r * d + i] - m) * is;
  }
  return out;
}

/// Mean negative log-softmax of the target class over the batch rows.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets) {
  detail::require_rank(logits, 2, "cross_entropy");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (targets.size() != batch) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(batch) + " rows");
  }
  for (std::size_t b = 0; b < batch; ++b) {
    if (targets[b] >= classes) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[b]) + " out of range for " +
                       std::to_string(classes) + " classes");
    }
  }
  std::vector<T> probs(logits.size());
  T total = T(0);
  const T* z = logits.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = z + b * classes;
    T mx = row[0];
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
    T denom = T(0);
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(row[c] - mx);
    const T lse = mx + std::log(denom);
    total += lse - row[targets[b]];
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] = std::exp(row[c] - lse);
  }
  total /= static_cast<T>(batch);
  auto ln = logits.node();
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return detail::make_result<T>(
      {1}, {total}, {ln},
      [ln, batch, classes, probs = std::move(probs), tgt = std::move(tgt)](detail::Node<T>& o) {
        if (T* gl = detail::grad_of(ln)) {
          const T s = o.grad[0] / static_cast<T>(batch);
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < classes; ++c) {
              const T p = probs[b * classes + c] - (c == tgt[b] ? T(1) : T(0));
              gl[b * classes + c] += s * p;
            }
        }
      });
}

// Mean squared error over all elements.
template <class T>
Tensor<T> mse(const Tensor<T>& prediction, const Tensor<T>& target) {
  detail::require_same_shape(prediction, target, "mse");
  const std::size_t n = prediction.size();
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T e = prediction.data()[i] - target.data()[i];
    acc += e * e;
  }
  acc /= static_cast<T>(n);
  auto pn = prediction.node(), tn = target.node();
  return detail::make_result<T>({1}, {acc}, {pn, tn}, [pn, tn, n](detail::Node<T>& o) {
    const T s = T(2) * o.grad[0] / static_cast<T>(n);
    if (T* gp = detail::grad_of(pn))
      for (std::size_t i = 0; i < n; ++i) gp[i] += s * (pn->data[i] - tn->data[i]);
    if (T* gt = detail::grad_of(tn))
      for (std::size_t i = 0; i < n; ++i) gt[i] -= s * (pn->data[i] - tn->data[i]);
  });
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  detail::require_rank(x, 2, "slice_rows");
  const std::size_t cols = x.dim(1);
  if (count == 0 || begin + count > x.dim(0)) {
    throw IndexError("slice_rows: rows [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                     ") out of range for " + shape_str(x.shape()));
  }
  std::vector<T> out(x.data().begin() + begin * cols, x.data().begin() + (begin + count) * cols);
  auto xn = x.node();
  return detail::make_result<T>({count, cols}, std::move(out), {xn}, [xn, begin, cols](detail::Node<T>& o) {
    if (T* gx = detail::grad_of(xn))
      for (std::size_t i = 0; i < o.grad.size(); ++i) gx[begin * cols + i] += o.grad[i];
  });
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  detail::require_rank(x, 2, "slice_cols");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (count == 0 || begin + count > cols) {
    throw IndexError("slice_cols: cols [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                     ") out of range for " + shape_str(x.shape()));
  }
  std::vector<T> out(rows * count);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < count; ++c) out[r * count + c] = x.data()[r * cols + begin + c];
  auto xn = x.node();
  return detail::make_result<T>({rows, count}, std::move(out), {xn},
                                [xn, rows, cols, begin, count](detail::Node<T>& o) {
                                  if (T* gx = detail::grad_of(xn))
                                    for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t c = 0; c < count; ++c)
                                        gx[r * cols + begin + c] += o.grad[r * count + c];
                                });
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t cols = parts.front().shape().back();
  std::size_t rows = 0;
  std::vector<std::shared_ptr<detail::Node<T>>> nodes;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_rows");
    if (p.dim(1) != cols) {
      throw DimensionError("concat_rows: width " + std::to_string(p.dim(1)) + " != " + std::to_string(cols));
    }
    rows += p.dim(0);
    nodes.push_back(p.node());
  }
  std::vector<T> out;
  out.reserve(rows * cols);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  auto captured = nodes;
  return detail::make_result<T>({rows, cols}, std::move(out), std::move(nodes),
                                [captured](detail::Node<T>& o) {
                                  std::size_t off = 0;
                                  for (const auto& n : captured) {
                                    if (T* g = detail::grad_of(n))
                                      for (std::size_t i = 0; i < n->data.size(); ++i) g[i] += o.grad[off + i];
                                    off += n->data.size();
                                  }
                                });
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t rows = parts.front().dim(0);
  std::size_t cols = 0;
  std::vector<std::shared_ptr<detail::Node<T>>> nodes;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_cols");
    if (p.dim(0) != rows) {
      throw DimensionError("concat_cols: height " + std::to_string(p.dim(0)) + " != " + std::to_string(rows));
    }
    widths.push_back(p.dim(1));
    cols += p.dim(1);
    nodes.push_back(p.node());
  }
  std::vector<T> out(rows * cols);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < widths[k]; ++c) out[r * cols + off + c] = parts[k].data()[r * widths[k] + c];
    off += widths[k];
  }
  auto captured = nodes;
  return detail::make_result<T>({rows, cols}, std::move(out), std::move(nodes),
                                [captured, widths, rows, cols](detail::Node<T>& o) {
                                  std::size_t off = 0;
                                  for (std::size_t k = 0; k < captured.size(); ++k) {
                                    if (T* g = detail::grad_of(captured[k]))
                                      for (std::size_t r = 0; r < rows; ++r)
                                        for (std::size_t c = 0; c < widths[k]; ++c)
                                          g[r * widths[k] + c] += o.grad[r * cols + off + c];
                                    off += widths[k];
                                  }
                                });
}

// Rows of `table` selected by `ids` (embedding lookup).
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::size_t> ids) {
  detail::require_rank(table, 2, "gather_rows");
  if (ids.empty()) throw ContractError("gather_rows: empty id list");
  const std::size_t cols = table.dim(1);
  std::vector<T> out(ids.size() * cols);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= table.dim(0)) {
      throw IndexError("gather_rows: id " + std::to_string(ids[r]) + " out of range for table of " +
                       std::to_string(table.dim(0)) + " rows");
    }
    std::copy_n(table.data().begin() + ids[r] * cols, cols, out.begin() + r * cols);
  }
  auto tn = table.node();
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return detail::make_result<T>({idx.size(), cols}, std::move(out), {tn}, [tn, idx, cols](detail::Node<T>& o) {
    if (T* g = detail::grad_of(tn))
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < cols; ++c) g[idx[r] * cols + c] += o.grad[r * cols + c];
  });
}

// Copy of x with rows [start, start + rows.dim(0)) overwritten by `rows`.
// Overwritten rows of x receive no gradient.
template <class T>
Tensor<T> replace_rows(const Tensor<T>& x, std::size_t start, const Tensor<T>& rows) {
  detail::require_rank(x, 2, "replace_rows");
  detail::require_rank(rows, 2, "replace_rows");
  const std::size_t cols = x.dim(1), count = rows.dim(0);
  if (rows.dim(1) != cols) {
    throw DimensionError("replace_rows: row width " + std::to_string(rows.dim(1)) + " != " + std::to_string(cols));
  }
  if (start + count > x.dim(0)) {
    throw IndexError("replace_rows: rows [" + std::to_string(start) + "," + std::to_string(start + count) +
                     ") out of range for " + shape_str(x.shape()));
  }
  std::vector<T> out = x.vec();
  std::copy(rows.data().begin(), rows.data().end(), out.begin() + start * cols);
  auto xn = x.node(), rn = rows.node();
  const std::size_t lo = start * cols, hi = (start + count) * cols;
  return detail::make_result<T>(x.shape(), std::move(out), {xn, rn}, [xn, rn, lo, hi](detail::Node<T>& o) {
    if (T* gx = detail::grad_of(xn))
      for (std::size_t i = 0; i < o.grad.size(); ++i)
        if (i < lo || i >= hi) gx[i] += o.grad[i];
    if (T* gr = detail::grad_of(rn))
      for (std::size_t i = lo; i < hi; ++i) gr[i - lo] += o.grad[i];
  });
}

/// 2-D convolution of a single image x:[C,H,W] with weight:[O,C,k,k], bias:[O].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t pad) {
  detail::require_rank(x, 3, "conv2d");
  detail::require_rank(weight, 4, "conv2d");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t O = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != C || weight.dim(3) != k) {
    throw DimensionError("conv2d: weight " + shape_str(weight.shape()) + " does not fit input " +
                         shape_str(x.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != O) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(O) + " outputs");
  }
  if (H + 2 * pad < k || W + 2 * pad < k || stride == 0) {
    throw DimensionError("conv2d: kernel larger than padded input " + shape_str(x.shape()));
  }
  const std::size_t OH = (H + 2 * pad - k) / stride + 1, OW = (W + 2 * pad - k) / stride + 1;
  const T* in = x.data().data();
  const T* w = weight.data().data();
  std::vector<T> out(O * OH * OW);
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox) {
        T acc = bias.data()[o];
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ky = 0; ky < k; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
              acc += w[((o * C + c) * k + ky) * k + kx] * in[(c * H + iy) * W + ix];
            }
          }
        out[(o * OH + oy) * OW + ox] = acc;
      }
  auto xn = x.node(), wn = weight.node(), bn = bias.node();
  return detail::make_result<T>(
      {O, OH, OW}, std::move(out), {xn, wn, bn},
      [xn, wn, bn, C, H, W, O, k, OH, OW, stride, pad](detail::Node<T>& node) {
        const T* g = node.grad.data();
        T* gx = detail::grad_of(xn);
        T* gw = detail::grad_of(wn);
        T* gb = detail::grad_of(bn);
        const T* in = xn->data.data();
        const T* w = wn->data.data();
        for (std::size_t o = 0; o < O; ++o)
          for (std::size_t oy = 0; oy < OH; ++oy)
            for (std::size_t ox = 0; ox < OW; ++ox) {
              const T go = g[(o * OH + oy) * OW + ox];
              if (gb) gb[o] += go;
              for (std::size_t c = 0; c < C; ++c)
                for (std::size_t ky = 0; ky < k; ++ky) {
                  const std::ptrdiff_t iy =
                      static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                  for (std::size_t kx = 0; kx < k; ++kx) {
                    const std::ptrdiff_t ix =
                        static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                    const std::size_t wi = ((o * C + c) * k + ky) * k + kx;
                    const std::size_t xi = (c * H + iy) * W + ix;
                    if (gw) gw[wi] += go * in[xi];
                    if (gx) gx[xi] += go * w[wi];
                  }
                }
            }
      });
}

// x:[C,H,W] -> [C], mean over spatial positions.
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank(x, 3, "global_avg_pool");
  const std::size_t C = x.dim(0), hw = x.dim(1) * x.dim(2);
  std::vector<T> out(C);
  for (std::size_t c = 0; c < C; ++c) {
    T acc = T(0);
    for (std::size_t i = 0; i < hw; ++i) acc += x.data()[c * hw + i];
    out[c] = acc / static_cast<T>(hw);
  }
  auto xn = x.node();
  return detail::make_result<T>({C}, std::move(out), {xn}, [xn, C, hw](detail::Node<T>& o) {
    if (T* gx = detail::grad_of(xn))
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < hw; ++i) gx[c * hw + i] += o.grad[c] / static_cast<T>(hw);
  });
}

}  // namespace mf2
