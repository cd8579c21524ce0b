#pragma once

#include <limits>
#include <string>
#include <vector>

#include "tdsr/nn/module.hpp"

namespace tdsr::nn {

/// K embedding vectors of dimension E, stored as a (1, 1, K, E) parameter.
template <typename T>
struct Codebook {
  Param<T> entries;

  Codebook() = default;
  Codebook(std::string name, int size, int dim) : entries(std::move(name), {1, 1, size, dim}) {
    if (size < 1 || dim < 1) throw ArgumentError("codebook needs K >= 1 and E >= 1");
  }

  int size() const noexcept { return entries.value.h(); }
  int dim() const noexcept { return entries.value.w(); }
  const T* entry(int k) const noexcept {
    return entries.value.data() + static_cast<std::size_t>(k) * dim();
  }
  T* entry(int k) noexcept { return entries.value.data() + static_cast<std::size_t>(k) * dim(); }

  /// Uniform on [-1/K, 1/K].
  void init(Rng& rng) {
    const double b = 1.0 / size();
    for (auto& v : entries.value.values()) v = static_cast<T>(rng.uniform(-b, b));
  }
};

/// Index grid (n * h * w, row-major per sample) and the dequantized map.
template <typename T>
struct QuantizedFeatureMap {
  std::vector<int> indices;
  Tensor<T> embeddings;
};

/// argmin_k sum_e (v_e - c_ke)^2, ties to the lowest k.
template <typename T>
int nearest_code(const T* v, const Codebook<T>& cb) {
  int best = 0;
  T best_d = std::numeric_limits<T>::infinity();
  const int E = cb.dim();
  for (int k = 0; k < cb.size(); ++k) {
    const T* e = cb.entry(k);
    T d = T(0);
    for (int i = 0; i < E; ++i) {
      const T diff = v[i] - e[i];
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

/// Looks up embeddings for an index grid of shape (n, h, w).
template <typename T>
Tensor<T> dequantize(const std::vector<int>& indices, const Codebook<T>& cb, int n, int h, int w) {
  if (indices.size() != static_cast<std::size_t>(n) * h * w)
    throw ShapeError("dequantize: index count does not match " + std::to_string(n) + "x" +
                     std::to_string(h) + "x" + std::to_string(w));
  const int E = cb.dim();
  Tensor<T> out(n, E, h, w);
  const std::size_t p = static_cast<std::size_t>(h) * w;
  for (int b = 0; b < n; ++b)
    for (std::size_t i = 0; i < p; ++i) {
      const int k = indices[b * p + i];
      if (k < 0 || k >= cb.size()) throw ArgumentError("dequantize: index out of range");
      const T* e = cb.entry(k);
      for (int c = 0; c < E; ++c) out.plane(b, c)[i] = e[c];
    }
  return out;
}

/// Nearest-neighbour assignment of every spatial feature vector.
template <typename T>
QuantizedFeatureMap<T> quantize(const Tensor<T>& features, const Codebook<T>& cb) {
  if (cb.size() < 1) throw ArgumentError("quantize: empty codebook");
  if (features.c() != cb.dim())
    throw ShapeError("quantize: feature channels " + std::to_string(features.c()) +
                     " != embedding dim " + std::to_string(cb.dim()));
  const int E = cb.dim();
  const std::size_t p = features.shape().plane();
  QuantizedFeatureMap<T> q;
  q.indices.resize(features.n() * p);
  std::vector<T> v(E);
  for (int b = 0; b < features.n(); ++b)
    for (std::size_t i = 0; i < p; ++i) {
      for (int c = 0; c < E; ++c) v[c] = features.plane(b, c)[i];
      q.indices[b * p + i] = nearest_code(v.data(), cb);
    }
  q.embeddings = dequantize(q.indices, cb, features.n(), features.h(), features.w());
  return q;
}

/// Scatters d(loss)/d(embeddings) onto the selected codebook rows.
template <typename T>
void accumulate_codebook_grad(const std::vector<int>& indices, const Tensor<T>& d_embeddings,
                              Codebook<T>& cb) {
  const int E = cb.dim();
  const std::size_t p = d_embeddings.shape().plane();
  for (int b = 0; b < d_embeddings.n(); ++b)
    for (std::size_t i = 0; i < p; ++i) {
      T* g = cb.entries.grad.data() + static_cast<std::size_t>(indices[b * p + i]) * E;
      for (int c = 0; c < E; ++c) g[c] += d_embeddings.plane(b, c)[i];
    }
}

/// Number of locations assigned to each code.
inline std::vector<std::size_t> code_usage(const std::vector<int>& indices, int size) {
  std::vector<std::size_t> counts(size, 0);
  for (int k : indices) ++counts[k];
  return counts;
}

}  // namespace tdsr::nn
