#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "dia/numerics/array.hpp"

// Plain (non-differentiable) kernels shared by the tape ops and the
// inference paths. Reductions accumulate in Accum<T>.
namespace dia {

namespace kernels {

template <class T>
std::vector<Accum<T>>& scratch(std::size_t n) {
  thread_local std::vector<Accum<T>> buf;
  buf.assign(n, Accum<T>(0));
  return buf;
}

/// c (+)= a[m x k] * b[k x n]
template <class T>
void matmul(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
  auto& acc = scratch<T>(static_cast<std::size_t>(n));
  for (int i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), Accum<T>(0));
    const T* ar = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const Accum<T> av = ar[p];
      if (av == 0) continue;
      const T* br = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) acc[j] += av * br[j];
    }
    T* cr = c + static_cast<std::size_t>(i) * n;
    if (accumulate) {
      for (int j = 0; j < n; ++j) cr[j] = static_cast<T>(cr[j] + acc[j]);
    } else {
      for (int j = 0; j < n; ++j) cr[j] = static_cast<T>(acc[j]);
    }
  }
}

/// c (+)= a[m x k] * b[n x k]^T
template <class T>
void matmul_nt(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
  for (int i = 0; i < m; ++i) {
    const T* ar = a + static_cast<std::size_t>(i) * k;
    T* cr = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* br = b + static_cast<std::size_t>(j) * k;
      Accum<T> s = 0;
      for (int p = 0; p < k; ++p) s += static_cast<Accum<T>>(ar[p]) * br[p];
      cr[j] = accumulate ? static_cast<T>(cr[j] + s) : static_cast<T>(s);
    }
  }
}

/// c (+)= a[k x m]^T * b[k x n]
template <class T>
void matmul_tn(const T* a, const T* b, T* c, int k, int m, int n, bool accumulate = false) {
  auto& acc = scratch<T>(static_cast<std::size_t>(m) * n);
  for (int p = 0; p < k; ++p) {
    const T* ar = a + static_cast<std::size_t>(p) * m;
    const T* br = b + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const Accum<T> av = ar[i];
      if (av == 0) continue;
      Accum<T>* accr = acc.data() + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) accr[j] += av * br[j];
    }
  }
  const std::size_t total = static_cast<std::size_t>(m) * n;
  for (std::size_t i = 0; i < total; ++i) {
    c[i] = accumulate ? static_cast<T>(c[i] + acc[i]) : static_cast<T>(acc[i]);
  }
}

template <class T>
BasicArray<T> matmul(const BasicArray<T>& a, const BasicArray<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  BasicArray<T> c = BasicArray<T>::matrix(a.rows(), b.cols());
  matmul(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
  return c;
}

/// Numerically stable softmax of one contiguous row (max subtraction).
template <class T>
void softmax_row(const T* x, T* y, int n) {
  Accum<T> mx = -std::numeric_limits<Accum<T>>::infinity();
  for (int j = 0; j < n; ++j) mx = std::max<Accum<T>>(mx, x[j]);
  Accum<T> s = 0;
  for (int j = 0; j < n; ++j) s += std::exp(static_cast<Accum<T>>(x[j]) - mx);
  for (int j = 0; j < n; ++j) y[j] = static_cast<T>(std::exp(static_cast<Accum<T>>(x[j]) - mx) / s);
}

/// Batched multi-head attention geometry. Queries are laid out as
/// [batch*tq x heads*head_dim], keys/values as [batch*tk x kv_heads*head_dim].
/// Query head h reads kv head h / (heads / kv_heads).
struct AttentionShape {
  int batch = 1;
  int tq = 1;
  int tk = 1;
  int heads = 1;
  int kv_heads = 1;
  int head_dim = 1;
  bool causal = false;
  /// Absolute position of query row 0 for causal masking (key j visible iff j <= offset + i).
  int causal_offset = 0;

  int group() const { return heads / kv_heads; }
  std::size_t prob_size() const {
    return static_cast<std::size_t>(batch) * heads * tq * tk;
  }
  void validate() const {
    if (heads <= 0 || kv_heads <= 0 || head_dim <= 0) throw ShapeError("attention: non-positive dims");
    if (heads % kv_heads != 0) {
      throw ShapeError("attention: heads (" + std::to_string(heads) +
                       ") not divisible by kv_heads (" + std::to_string(kv_heads) + ")");
    }
  }
};

/// Forward pass. `allowed` (optional) is a [batch x tq x tk] 0/1 mask.
/// `probs` receives the attention weights [batch x heads x tq x tk].
template <class T>
void attention_forward(const AttentionShape& s, const T* q, const T* k, const T* v,
                       const std::uint8_t* allowed, T* out, T* probs) {
  s.validate();
  const int qd = s.heads * s.head_dim;
  const int kd = s.kv_heads * s.head_dim;
  const Accum<T> scale = Accum<T>(1) / std::sqrt(static_cast<Accum<T>>(s.head_dim));
  std::vector<Accum<T>> scores(static_cast<std::size_t>(s.tk));
  std::vector<Accum<T>> acc(static_cast<std::size_t>(s.head_dim));
  for (int b = 0; b < s.batch; ++b) {
    for (int h = 0; h < s.heads; ++h) {
      const int g = h / s.group();
      for (int i = 0; i < s.tq; ++i) {
        const T* qr = q + (static_cast<std::size_t>(b) * s.tq + i) * qd + h * s.head_dim;
        Accum<T> mx = -std::numeric_limits<Accum<T>>::infinity();
        for (int j = 0; j < s.tk; ++j) {
          bool ok = !s.causal || j <= s.causal_offset + i;
          if (allowed) ok = ok && allowed[(static_cast<std::size_t>(b) * s.tq + i) * s.tk + j];
          if (!ok) {
            scores[j] = -std::numeric_limits<Accum<T>>::infinity();
            continue;
          }
          const T* kr = k + (static_cast<std::size_t>(b) * s.tk + j) * kd + g * s.head_dim;
          Accum<T> d = 0;
          for (int e = 0; e < s.head_dim; ++e) d += static_cast<Accum<T>>(qr[e]) * kr[e];
          scores[j] = d * scale;
          mx = std::max(mx, scores[j]);
        }
        if (!std::isfinite(mx)) throw ShapeError("attention: query row has no visible keys");
        Accum<T> z = 0;
        for (int j = 0; j < s.tk; ++j) {
          scores[j] = std::isfinite(scores[j]) ? std::exp(scores[j] - mx) : Accum<T>(0);
          z += scores[j];
        }
        std::fill(acc.begin(), acc.end(), Accum<T>(0));
        T* pr = probs + ((static_cast<std::size_t>(b) * s.heads + h) * s.tq + i) * s.tk;
        for (int j = 0; j < s.tk; ++j) {
          const Accum<T> p = scores[j] / z;
          pr[j] = static_cast<T>(p);
          if (p == 0) continue;
          const T* vr = v + (static_cast<std::size_t>(b) * s.tk + j) * kd + g * s.head_dim;
          for (int e = 0; e < s.head_dim; ++e) acc[e] += p * vr[e];
        }
        T* orow = out + (static_cast<std::size_t>(b) * s.tq + i) * qd + h * s.head_dim;
        for (int e = 0; e < s.head_dim; ++e) orow[e] = static_cast<T>(acc[e]);
      }
    }
  }
}

/// Backward pass; accumulates into dq/dk/dv (any may be null).
template <class T>
void attention_backward(const AttentionShape& s, const T* q, const T* k, const T* v,
                        const T* probs, const T* dout, T* dq, T* dk, T* dv) {
  const int qd = s.heads * s.head_dim;
  const int kd = s.kv_heads * s.head_dim;
  const Accum<T> scale = Accum<T>(1) / std::sqrt(static_cast<Accum<T>>(s.head_dim));
  std::vector<Accum<T>> dp(static_cast<std::size_t>(s.tk));
  for (int b = 0; b < s.batch; ++b) {
    for (int h = 0; h < s.heads; ++h) {
      const int g = h / s.group();
      for (int i = 0; i < s.tq; ++i) {
        const T* pr = probs + ((static_cast<std::size_t>(b) * s.heads + h) * s.tq + i) * s.tk;
        const T* gr = dout + (static_cast<std::size_t>(b) * s.tq + i) * qd + h * s.head_dim;
        Accum<T> dot = 0;
        for (int j = 0; j < s.tk; ++j) {
          if (pr[j] == 0) {
            dp[j] = 0;
            continue;
          }
          const T* vr = v + (static_cast<std::size_t>(b) * s.tk + j) * kd + g * s.head_dim;
          Accum<T> d = 0;
          for (int e = 0; e < s.head_dim; ++e) d += static_cast<Accum<T>>(gr[e]) * vr[e];
          dp[j] = d;
          dot += d * pr[j];
          if (dv) {
            T* dvr = dv + (static_cast<std::size_t>(b) * s.tk + j) * kd + g * s.head_dim;
            for (int e = 0; e < s.head_dim; ++e) dvr[e] = static_cast<T>(dvr[e] + static_cast<Accum<T>>(pr[j]) * gr[e]);
          }
        }
        const T* qr = q + (static_cast<std::size_t>(b) * s.tq + i) * qd + h * s.head_dim;
        T* dqr = dq ? dq + (static_cast<std::size_t>(b) * s.tq + i) * qd + h * s.head_dim : nullptr;
        for (int j = 0; j < s.tk; ++j) {
          if (pr[j] == 0) continue;
          const Accum<T> ds = static_cast<Accum<T>>(pr[j]) * (dp[j] - dot) * scale;
          const T* kr = k + (static_cast<std::size_t>(b) * s.tk + j) * kd + g * s.head_dim;
          if (dqr) {
            for (int e = 0; e < s.head_dim; ++e) dqr[e] = static_cast<T>(dqr[e] + ds * kr[e]);
          }
          if (dk) {
            T* dkr = dk + (static_cast<std::size_t>(b) * s.tk + j) * kd + g * s.head_dim;
            for (int e = 0; e < s.head_dim; ++e) dkr[e] = static_cast<T>(dkr[e] + ds * qr[e]);
          }
        }
      }
    }
  }
}

/// RoPE on rows laid out [rows x heads*head_dim]; row r sits at positions[r].
/// Pair (x_{2i}, x_{2i+1}) is rotated by pos * base^(-2i/head_dim).
/// `inverse` applies the transpose rotation (used by the backward pass).
template <class T>
void rope_rows(const T* x, T* y, int rows, int heads, int head_dim, std::span<const int> positions,
               double base = 10000.0, bool inverse = false) {
  if (head_dim % 2 != 0) throw ShapeError("rope: head dim must be even, got " + std::to_string(head_dim));
  const int width = heads * head_dim;
  for (int r = 0; r < rows; ++r) {
    const double pos = positions[static_cast<std::size_t>(r)];
    for (int i = 0; i < head_dim / 2; ++i) {
      const double theta = std::pow(base, -2.0 * i / head_dim);
      const double c = std::cos(pos * theta);
      const double sn = inverse ? -std::sin(pos * theta) : std::sin(pos * theta);
      for (int h = 0; h < heads; ++h) {
        const std::size_t o = static_cast<std::size_t>(r) * width + h * head_dim + 2 * i;
        const double a = x[o];
        const double b = x[o + 1];
        y[o] = static_cast<T>(a * c - b * sn);
        y[o + 1] = static_cast<T>(a * sn + b * c);
      }
    }
  }
}

}  // namespace kernels

/// Softmax along `axis`, max-subtracted.
template <class T>
BasicArray<T> softmax(const BasicArray<T>& x, int axis) {
  const int nd = static_cast<int>(x.ndim());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw ShapeError("softmax: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.shape()[d];
  for (int d = axis + 1; d < nd; ++d) inner *= x.shape()[d];
  const int n = x.shape()[axis];
  BasicArray<T> y(x.shape());
  std::vector<T> in(static_cast<std::size_t>(n)), out(static_cast<std::size_t>(n));
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      for (int j = 0; j < n; ++j) in[j] = x[(o * n + j) * inner + i];
      kernels::softmax_row(in.data(), out.data(), n);
      for (int j = 0; j < n; ++j) y[(o * n + j) * inner + i] = out[j];
    }
  }
  return y;
}

/// x / sqrt(mean(x^2) + eps) over the last axis.
template <class T>
BasicArray<T> rms_norm(const BasicArray<T>& x, double eps) {
  if (x.ndim() == 0 || x.shape().back() == 0) throw ShapeError("rms_norm: empty normalized axis");
  const int n = x.shape().back();
  const std::size_t rows = x.size() / static_cast<std::size_t>(n);
  BasicArray<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    Accum<T> ss = 0;
    for (int j = 0; j < n; ++j) ss += static_cast<Accum<T>>(x[r * n + j]) * x[r * n + j];
    const Accum<T> denom = std::sqrt(ss / n + eps);
    for (int j = 0; j < n; ++j) {
      y[r * n + j] = denom > 0 ? static_cast<T>(x[r * n + j] / denom) : T(0);
    }
  }
  return y;
}

/// Norm floor below which cosine similarity is defined as 0.
inline constexpr double kCosineNormFloor = 1e-12;

template <class T>
double cosine_sim(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) {
    throw ShapeError("cosine_sim: length mismatch " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < kCosineNormFloor || nb < kCosineNormFloor) return 0.0;
  return std::clamp(dot / (na * nb), -1.0, 1.0);
}

template <class T>
double cosine_sim(const BasicArray<T>& a, const BasicArray<T>& b) {
  if (a.size() != b.size()) {
    throw ShapeError("cosine_sim: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  return cosine_sim(std::span<const T>(a.values()), std::span<const T>(b.values()));
}

}  // namespace dia
