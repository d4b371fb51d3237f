#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <vector>

#include "dia/numerics/kernels.hpp"
#include "dia/numerics/tape.hpp"

// Differentiable ops over 2-d node values ([rows x cols]).
namespace dia::ops {

namespace detail {

template <class T>
void require_same(const BasicArray<T>& a, const BasicArray<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <class T, class F, class D>
Var<T> unary(Var<T> a, F f, D dydx) {
  const auto& x = a.value();
  BasicArray<T> y = BasicArray<T>::matrix(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<T>(f(static_cast<Accum<T>>(x[i])));
  auto out_holder = std::make_shared<int>(-1);
  Var<T> out = a.g->push(std::move(y), {a}, [a, dydx, out_holder](Graph<T>& g, const BasicArray<T>& go) {
    const auto& xv = g.value(a);
    const auto& yv = g.value(Var<T>{&g, *out_holder});
    auto& ga = g.grad(a);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      ga[i] = static_cast<T>(ga[i] + go[i] * dydx(static_cast<Accum<T>>(xv[i]), static_cast<Accum<T>>(yv[i])));
    }
  });
  *out_holder = out.id;
  return out;
}

}  // namespace detail

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  const int m = av.rows(), k = av.cols(), n = bv.cols();
  BasicArray<T> c = BasicArray<T>::matrix(m, n);
  kernels::matmul(av.data(), bv.data(), c.data(), m, k, n);
  return a.g->push(std::move(c), {a, b}, [a, b, m, k, n](Graph<T>& g, const BasicArray<T>& go) {
    if (g.needs(a)) kernels::matmul_nt(go.data(), g.value(b).data(), g.grad(a).data(), m, n, k, true);
    if (g.needs(b)) kernels::matmul_tn(g.value(a).data(), go.data(), g.grad(b).data(), m, k, n, true);
  });
}

/// a [m x k] times b^T where b is [n x k].
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw ShapeError("matmul_nt: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()) + "^T");
  }
  const int m = av.rows(), k = av.cols(), n = bv.rows();
  BasicArray<T> c = BasicArray<T>::matrix(m, n);
  kernels::matmul_nt(av.data(), bv.data(), c.data(), m, k, n);
  return a.g->push(std::move(c), {a, b}, [a, b, m, k, n](Graph<T>& g, const BasicArray<T>& go) {
    if (g.needs(a)) kernels::matmul(go.data(), g.value(b).data(), g.grad(a).data(), m, n, k, true);
    if (g.needs(b)) kernels::matmul_tn(go.data(), g.value(a).data(), g.grad(b).data(), m, n, k, true);
  });
}

/// a^T b where a is [k x m] and b is [k x n].
template <class T>
Var<T> matmul_tn(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rows() != bv.rows()) {
    throw ShapeError("matmul_tn: " + shape_str(av.shape()) + "^T x " + shape_str(bv.shape()));
  }
  const int k = av.rows(), m = av.cols(), n = bv.cols();
  BasicArray<T> c = BasicArray<T>::matrix(m, n);
  kernels::matmul_tn(av.data(), bv.data(), c.data(), k, m, n);
  return a.g->push(std::move(c), {a, b}, [a, b, k, m, n](Graph<T>& g, const BasicArray<T>& go) {
    // dA = B go^T [k x m], dB = A go [k x n]
    if (g.needs(a)) kernels::matmul_nt(g.value(b).data(), go.data(), g.grad(a).data(), k, n, m, true);
    if (g.needs(b)) kernels::matmul(g.value(a).data(), go.data(), g.grad(b).data(), k, m, n, true);
  });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same(a.value(), b.value(), "add");
  BasicArray<T> y = BasicArray<T>::matrix(a.rows(), a.cols());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  return a.g->push(std::move(y), {a, b}, [a, b](Graph<T>& g, const BasicArray<T>& go) {
    for (Var<T> v : {a, b}) {
      if (!g.needs(v)) continue;
      auto& gv = g.grad(v);
      for (std::size_t i = 0; i < go.size(); ++i) gv[i] += go[i];
    }
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same(a.value(), b.value(), "sub");
  BasicArray<T> y = BasicArray<T>::matrix(a.rows(), a.cols());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] - bv[i];
  return a.g->push(std::move(y), {a, b}, [a, b](Graph<T>& g, const BasicArray<T>& go) {
    if (g.needs(a)) {
      auto& ga = g.grad(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (g.needs(b)) {
      auto& gb = g.grad(b);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same(a.value(), b.value(), "mul");
  BasicArray<T> y = BasicArray<T>::matrix(a.rows(), a.cols());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  return a.g->push(std::move(y), {a, b}, [a, b](Graph<T>& g, const BasicArray<T>& go) {
    if (g.needs(a)) {
      auto& ga = g.grad(a);
      const auto& bv = g.value(b);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
    }
    if (g.needs(b)) {
      auto& gb = g.grad(b);
      const auto& av = g.value(a);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
    }
  });
}

/// a [r x c] + row vector b [1 x c], broadcast over rows.
template <class T>
Var<T> add_row(Var<T> a, Var<T> b) {
  const int r = a.rows(), c = a.cols();
  if (b.value().size() != static_cast<std::size_t>(c)) throw ShapeError("add_row: width mismatch");
  BasicArray<T> y = BasicArray<T>::matrix(r, c);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) y.at(i, j) = av.at(i, j) + bv[j];
  return a.g->push(std::move(y), {a, b}, [a, b, r, c](Graph<T>& g, const BasicArray<T>& go) {
    if (g.needs(a)) {
      auto& ga = g.grad(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (g.needs(b)) {
      auto& gb = g.grad(b);
      for (int j = 0; j < c; ++j) {
        Accum<T> s = 0;
        for (int i = 0; i < r; ++i) s += go.at(i, j);
        gb[j] = static_cast<T>(gb[j] + s);
      }
    }
  });
}

/// a [r x c] * row vector b [1 x c], broadcast over rows.
template <class T>
Var<T> mul_row(Var<T> a, Var<T> b) {
  const int r = a.rows(), c = a.cols();
  if (b.value().size() != static_cast<std::size_t>(c)) throw ShapeError("mul_row: width mismatch");
  BasicArray<T> y = BasicArray<T>::matrix(r, c);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) y.at(i, j) = av.at(i, j) * bv[j];
  return a.g->push(std::move(y), {a, b}, [a, b, r, c](Graph<T>& g, const BasicArray<T>& go) {
    const auto& av = g.value(a);
    const auto& bv = g.value(b);
    if (g.needs(a)) {
      auto& ga = g.grad(a);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) ga.at(i, j) += go.at(i, j) * bv[j];
    }
    if (g.needs(b)) {
      auto& gb = g.grad(b);
      for (int j = 0; j < c; ++j) {
        Accum<T> s = 0;
        for (int i = 0; i < r; ++i) s += static_cast<Accum<T>>(go.at(i, j)) * av.at(i, j);
        gb[j] = static_cast<T>(gb[j] + s);
      }
    }
  });
}

/// a [r x c] * column vector b [r x 1], broadcast over columns.
template <class T>
Var<T> mul_col(Var<T> a, Var<T> b) {
  const int r = a.rows(), c = a.cols();
  if (b.value().size() != static_cast<std::size_t>(r)) throw ShapeError("mul_col: height mismatch");
  BasicArray<T> y = BasicArray<T>::matrix(r, c);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) y.at(i, j) = av.at(i, j) * bv[i];
  return a.g->push(std::move(y), {a, b}, [a, b, r, c](Graph<T>& g, const BasicArray<T>& go) {
    const auto& av = g.value(a);
    const auto& bv = g.value(b);
    if (g.needs(a)) {
      auto& ga = g.grad(a);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) ga.at(i, j) += go.at(i, j) * bv[i];
    }
    if (g.needs(b)) {
      auto& gb = g.grad(b);
      for (int i = 0; i < r; ++i) {
        Accum<T> s = 0;
        for (int j = 0; j < c; ++j) s += static_cast<Accum<T>>(go.at(i, j)) * av.at(i, j);
        gb[i] = static_cast<T>(gb[i] + s);
      }
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, double s) {
  return detail::unary(a, [s](Accum<T> x) { return x * s; }, [s](Accum<T>, Accum<T>) { return Accum<T>(s); });
}

template <class T>
Var<T> add_scalar(Var<T> a, double s) {
  return detail::unary(a, [s](Accum<T> x) { return x + s; }, [](Accum<T>, Accum<T>) { return Accum<T>(1); });
}

template <class T>
Var<T> neg(Var<T> a) {
  return scale(a, -1.0);
}

template <class T>
Var<T> exp(Var<T> a) {
  return detail::unary(a, [](Accum<T> x) { return std::exp(x); }, [](Accum<T>, Accum<T> y) { return y; });
}

template <class T>
Var<T> log(Var<T> a) {
  return detail::unary(a, [](Accum<T> x) { return std::log(x); }, [](Accum<T> x, Accum<T>) { return 1 / x; });
}

template <class T>
Var<T> square(Var<T> a) {
  return detail::unary(a, [](Accum<T> x) { return x * x; }, [](Accum<T> x, Accum<T>) { return 2 * x; });
}

template <class T>
Var<T> tanh(Var<T> a) {
  return detail::unary(a, [](Accum<T> x) { return std::tanh(x); }, [](Accum<T>, Accum<T> y) { return 1 - y * y; });
}

template <class T>
Var<T> sigmoid(Var<T> a) {
  return detail::unary(
      a, [](Accum<T> x) { return 1 / (1 + std::exp(-x)); }, [](Accum<T> x, Accum<T>) {
        const Accum<T> s = 1 / (1 + std::exp(-x));
        return s * (1 - s);
      });
}

/// x * sigmoid(x)
template <class T>
Var<T> silu(Var<T> a) {
  return detail::unary(
      a, [](Accum<T> x) { return x / (1 + std::exp(-x)); },
      [](Accum<T> x, Accum<T>) {
        const Accum<T> s = 1 / (1 + std::exp(-x));
        return s * (1 + x * (1 - s));
      });
}

template <class T>
Var<T> relu(Var<T> a) {
  return detail::unary(
      a, [](Accum<T> x) { return x > 0 ? x : Accum<T>(0); }, [](Accum<T> x, Accum<T>) { return Accum<T>(x > 0 ? 1 : 0); });
}

/// tanh-approximation GELU.
template <class T>
Var<T> gelu(Var<T> a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return detail::unary(
      a,
      [](Accum<T> x) { return Accum<T>(0.5) * x * (1 + std::tanh(c * (x + 0.044715 * x * x * x))); },
      [](Accum<T> x, Accum<T>) {
        const Accum<T> u = c * (x + 0.044715 * x * x * x);
        const Accum<T> t = std::tanh(u);
        const Accum<T> du = c * (1 + 3 * 0.044715 * x * x);
        return Accum<T>(0.5) * (1 + t) + Accum<T>(0.5) * x * (1 - t * t) * du;
      });
}

/// Clamp to [lo, hi]; the gradient is zero where the bound is active.
template <class T>
Var<T> clamp(Var<T> a, double lo, double hi) {
  return detail::unary(
      a, [lo, hi](Accum<T> x) { return std::clamp<Accum<T>>(x, lo, hi); },
      [lo, hi](Accum<T> x, Accum<T>) { return Accum<T>(x >= lo && x <= hi ? 1 : 0); });
}

template <class T>
Var<T> sum_all(Var<T> a) {
  const auto& av = a.value();
  Accum<T> s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i];
  return a.g->push(BasicArray<T>::scalar(static_cast<T>(s)), {a}, [a](Graph<T>& g, const BasicArray<T>& go) {
    auto& ga = g.grad(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[0];
  });
}

template <class T>
Var<T> mean_all(Var<T> a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean_all: empty input");
  return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

/// Column sums over rows: [r x c] -> [1 x c].
template <class T>
Var<T> sum_rows(Var<T> a) {
  const int r = a.rows(), c = a.cols();
  const auto& av = a.value();
  std::vector<Accum<T>> s(static_cast<std::size_t>(c), 0);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) s[j] += av.at(i, j);
  BasicArray<T> y = BasicArray<T>::matrix(1, c);
  for (int j = 0; j < c; ++j) y[j] = static_cast<T>(s[j]);
  return a.g->push(std::move(y), {a}, [a, r, c](Graph<T>& g, const BasicArray<T>& go) {
    auto& ga = g.grad(a);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) ga.at(i, j) += go[j];
  });
}

template <class T>
Var<T> mean_rows(Var<T> a) {
  return scale(sum_rows(a), 1.0 / a.rows());
}

/// Row sums: [r x c] -> [r x 1].
template <class T>
Var<T> sum_cols(Var<T> a) {
  const int r = a.rows(), c = a.cols();
  const auto& av = a.value();
  BasicArray<T> y = BasicArray<T>::matrix(r, 1);
  for (int i = 0; i < r; ++i) {
    Accum<T> s = 0;
    for (int j = 0; j < c; ++j) s += av.at(i, j);
    y[i] = static_cast<T>(s);
  }
  return a.g->push(std::move(y), {a}, [a, r, c](Graph<T>& g, const BasicArray<T>& go) {
    auto& ga = g.grad(a);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) ga.at(i, j) += go[i];
  });
}

/// Row-wise softmax. `allowed` (optional, r*c entries) masks entries to probability 0.
template <class T>
Var<T> softmax_rows(Var<T> a, const std::vector<std::uint8_t>* allowed = nullptr) {
  const int r = a.rows(), c = a.cols();
  const auto& av = a.value();
  BasicArray<T> y = BasicArray<T>::matrix(r, c);
  std::vector<T> tmp(static_cast<std::size_t>(c));
  for (int i = 0; i < r; ++i) {
    if (!allowed) {
      kernels::softmax_row(&av.at(i, 0), &y.at(i, 0), c);
      continue;
    }
    Accum<T> mx = -std::numeric_limits<Accum<T>>::infinity();
    for (int j = 0; j < c; ++j)
      if ((*allowed)[static_cast<std::size_t>(i) * c + j]) mx = std::max<Accum<T>>(mx, av.at(i, j));
    if (!std::isfinite(mx)) throw ShapeError("softmax_rows: row with every entry masked");
    Accum<T> z = 0;
    for (int j = 0; j < c; ++j)
      if ((*allowed)[static_cast<std::size_t>(i) * c + j]) z += std::exp(av.at(i, j) - mx);
    for (int j = 0; j < c; ++j)
      y.at(i, j) = (*allowed)[static_cast<std::size_t>(i) * c + j]
                       ? static_cast<T>(std::exp(av.at(i, j) - mx) / z)
                       : T(0);
  }
  auto holder = std::make_shared<int>(-1);
  Var<T> out = a.g->push(std::move(y), {a}, [a, r, c, holder](Graph<T>& g, const BasicArray<T>& go) {
    const auto& yv = g.value(Var<T>{&g, *holder});
    auto& ga = g.grad(a);
    for (int i = 0; i < r; ++i) {
      Accum<T> dot = 0;
      for (int j = 0; j < c; ++j) dot += static_cast<Accum<T>>(go.at(i, j)) * yv.at(i, j);
      for (int j = 0; j < c; ++j) ga.at(i, j) = static_cast<T>(ga.at(i, j) + yv.at(i, j) * (go.at(i, j) - dot));
    }
  });
  *holder = out.id;
  return out;
}

template <class T>
Var<T> log_softmax_rows(Var<T> a) {
  const int r = a.rows(), c = a.cols();
  const auto& av = a.value();
  BasicArray<T> y = BasicArray<T>::matrix(r, c);
  for (int i = 0; i < r; ++i) {
    Accum<T> mx = -std::numeric_limits<Accum<T>>::infinity();
    for (int j = 0; j < c; ++j) mx = std::max<Accum<T>>(mx, av.at(i, j));
    Accum<T> z = 0;
    for (int j = 0; j < c; ++j) z += std::exp(av.at(i, j) - mx);
    const Accum<T> lse = mx + std::log(z);
    for (int j = 0; j < c; ++j) y.at(i, j) = static_cast<T>(av.at(i, j) - lse);
  }
  auto holder = std::make_shared<int>(-1);
  Var<T> out = a.g->push(std::move(y), {a}, [a, r, c, holder](Graph<T>& g, const BasicArray<T>& go) {
    const auto& yv = g.value(Var<T>{&g, *holder});
    auto& ga = g.grad(a);
    for (int i = 0; i < r; ++i) {
      Accum<T> s = 0;
      for (int j = 0; j < c; ++j) s += go.at(i, j);
      for (int j = 0; j < c; ++j)
        ga.at(i, j) = static_cast<T>(ga.at(i, j) + go.at(i, j) - std::exp(static_cast<Accum<T>>(yv.at(i, j))) * s);
    }
  });
  *holder = out.id;
  return out;
}

/// Row-wise x / sqrt(mean(x^2) + eps), no learned gain.
template <class T>
Var<T> rms_norm_rows(Var<T> a, double eps) {
  const int r = a.rows(), c = a.cols();
  if (c == 0) throw ShapeError("rms_norm_rows: empty rows");
  const auto& av = a.value();
  BasicArray<T> y = BasicArray<T>::matrix(r, c);
  auto inv = std::make_shared<std::vector<Accum<T>>>(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    Accum<T> ss = 0;
    for (int j = 0; j < c; ++j) ss += static_cast<Accum<T>>(av.at(i, j)) * av.at(i, j);
    const Accum<T> d = std::sqrt(ss / c + eps);
    (*inv)[i] = d > 0 ? 1 / d : 0;
    for (int j = 0; j < c; ++j) y.at(i, j) = static_cast<T>(av.at(i, j) * (*inv)[i]);
  }
  return a.g->push(std::move(y), {a}, [a, r, c, inv](Graph<T>& g, const BasicArray<T>& go) {
    const auto& xv = g.value(a);
    auto& ga = g.grad(a);
    for (int i = 0; i < r; ++i) {
      const Accum<T> s = (*inv)[i];
      Accum<T> dot = 0;
      for (int j = 0; j < c; ++j) dot += static_cast<Accum<T>>(go.at(i, j)) * xv.at(i, j) * s;
      for (int j = 0; j < c; ++j) {
        const Accum<T> yj = xv.at(i, j) * s;
        ga.at(i, j) = static_cast<T>(ga.at(i, j) + (go.at(i, j) - yj * dot / c) * s);
      }
    }
  });
}

/// Per-column standardization over the batch (rows): (x - mean) / sqrt(var + eps),
/// population variance. Batch-norm without affine parameters.
template <class T>
Var<T> batch_whiten(Var<T> a, double eps) {
  const int r = a.rows(), c = a.cols();
  if (r < 2) throw ShapeError("whiten: batch size " + std::to_string(r) + " < 2");
  const auto& av = a.value();
  BasicArray<T> y = BasicArray<T>::matrix(r, c);
  auto inv = std::make_shared<std::vector<Accum<T>>>(static_cast<std::size_t>(c));
  for (int j = 0; j < c; ++j) {
    Accum<T> m = 0;
    for (int i = 0; i < r; ++i) m += av.at(i, j);
    m /= r;
    Accum<T> v = 0;
    for (int i = 0; i < r; ++i) v += (av.at(i, j) - m) * (av.at(i, j) - m);
    v /= r;
    (*inv)[j] = 1 / std::sqrt(v + eps);
    for (int i = 0; i < r; ++i) y.at(i, j) = static_cast<T>((av.at(i, j) - m) * (*inv)[j]);
  }
  auto holder = std::make_shared<int>(-1);
  Var<T> out = a.g->push(std::move(y), {a}, [a, r, c, inv, holder](Graph<T>& g, const BasicArray<T>& go) {
    const auto& yv = g.value(Var<T>{&g, *holder});
    auto& ga = g.grad(a);
    for (int j = 0; j < c; ++j) {
      Accum<T> sg = 0, sgy = 0;
      for (int i = 0; i < r; ++i) {
        sg += go.at(i, j);
        sgy += static_cast<Accum<T>>(go.at(i, j)) * yv.at(i, j);
      }
      for (int i = 0; i < r; ++i) {
        const Accum<T> d = (*inv)[j] * (go.at(i, j) - sg / r - yv.at(i, j) * sgy / r);
        ga.at(i, j) = static_cast<T>(ga.at(i, j) + d);
      }
    }
  });
  *holder = out.id;
  return out;
}

/// out.flat[i] = a.flat[idx[i]], or 0 where idx[i] < 0.
template <class T>
Var<T> gather(Var<T> a, std::vector<int> idx, int rows, int cols) {
  if (static_cast<std::size_t>(rows) * cols != idx.size()) throw ShapeError("gather: index count mismatch");
  const auto& av = a.value();
  BasicArray<T> y = BasicArray<T>::matrix(rows, cols);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= static_cast<int>(av.size())) throw ShapeError("gather: index out of range");
    y[i] = idx[i] < 0 ? T(0) : av[static_cast<std::size_t>(idx[i])];
  }
  auto ix = std::make_shared<std::vector<int>>(std::move(idx));
  return a.g->push(std::move(y), {a}, [a, ix](Graph<T>& g, const BasicArray<T>& go) {
    auto& ga = g.grad(a);
    for (std::size_t i = 0; i < ix->size(); ++i)
      if ((*ix)[i] >= 0) ga[static_cast<std::size_t>((*ix)[i])] += go[i];
  });
}

template <class T>
Var<T> reshape(Var<T> a, int rows, int cols) {
  if (static_cast<std::size_t>(rows) * cols != a.value().size()) throw ShapeError("reshape: size mismatch");
  BasicArray<T> y({rows, cols}, a.value().values());
  return a.g->push(std::move(y), {a}, [a](Graph<T>& g, const BasicArray<T>& go) {
    auto& ga = g.grad(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
}

template <class T>
Var<T> slice_rows(Var<T> a, int r0, int n) {
  const int c = a.cols();
  if (r0 < 0 || r0 + n > a.rows()) throw ShapeError("slice_rows: out of range");
  std::vector<int> idx(static_cast<std::size_t>(n) * c);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) idx[static_cast<std::size_t>(i) * c + j] = (r0 + i) * c + j;
  return gather(a, std::move(idx), n, c);
}

template <class T>
Var<T> slice_cols(Var<T> a, int c0, int n) {
  const int r = a.rows(), c = a.cols();
  if (c0 < 0 || c0 + n > c) throw ShapeError("slice_cols: out of range");
  std::vector<int> idx(static_cast<std::size_t>(r) * n);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < n; ++j) idx[static_cast<std::size_t>(i) * n + j] = i * c + c0 + j;
  return gather(a, std::move(idx), r, n);
}

/// Selects rows by index (may repeat).
template <class T>
Var<T> take_rows(Var<T> a, const std::vector<int>& rows) {
  const int c = a.cols();
  std::vector<int> idx(rows.size() * static_cast<std::size_t>(c));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw ShapeError("take_rows: row out of range");
    for (int j = 0; j < c; ++j) idx[i * c + j] = rows[i] * c + j;
  }
  return gather(a, std::move(idx), static_cast<int>(rows.size()), c);
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const int c = parts[0].cols();
  int r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw ShapeError("concat_rows: width mismatch");
    r += p.rows();
  }
  BasicArray<T> y = BasicArray<T>::matrix(r, c);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    std::copy(v.values().begin(), v.values().end(), y.values().begin() + static_cast<std::ptrdiff_t>(off));
    off += v.size();
  }
  return parts[0].g->push(std::move(y), parts, [parts](Graph<T>& g, const BasicArray<T>& go) {
    std::size_t o = 0;
    for (const auto& p : parts) {
      const std::size_t n = g.value(p).size();
      if (g.needs(p)) {
        auto& gp = g.grad(p);
        for (std::size_t i = 0; i < n; ++i) gp[i] += go[o + i];
      }
      o += n;
    }
  });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int r = parts[0].rows();
  int c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw ShapeError("concat_cols: height mismatch");
    c += p.cols();
  }
  BasicArray<T> y = BasicArray<T>::matrix(r, c);
  int off = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < v.cols(); ++j) y.at(i, off + j) = v.at(i, j);
    off += v.cols();
  }
  return parts[0].g->push(std::move(y), parts, [parts, r](Graph<T>& g, const BasicArray<T>& go) {
    int o = 0;
    for (const auto& p : parts) {
      const int pc = g.value(p).cols();
      if (g.needs(p)) {
        auto& gp = g.grad(p);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < pc; ++j) gp.at(i, j) += go.at(i, o + j);
      }
      o += pc;
    }
  });
}

/// out[i] = a[i, targets[i]] as [r x 1].
template <class T>
Var<T> pick(Var<T> a, const std::vector<int>& targets) {
  const int r = a.rows(), c = a.cols();
  if (targets.size() != static_cast<std::size_t>(r)) throw ShapeError("pick: target count mismatch");
  std::vector<int> idx(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    if (targets[i] < 0 || targets[i] >= c) throw ShapeError("pick: target id " + std::to_string(targets[i]) + " out of range");
    idx[i] = i * c + targets[i];
  }
  return gather(a, std::move(idx), r, 1);
}

/// Embedding lookup: rows of `table` selected by ids.
template <class T>
Var<T> embed(Var<T> table, const std::vector<int>& ids) {
  for (int id : ids) {
    if (id < 0 || id >= table.rows()) {
      throw ShapeError("embed: token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(table.rows()));
    }
  }
  return take_rows(table, ids);
}

/// Row-wise cosine similarity [r x c], [r x c] -> [r x 1]; 0 when either norm < 1e-12.
template <class T>
Var<T> cosine_rows(Var<T> a, Var<T> b) {
  detail::require_same(a.value(), b.value(), "cosine_rows");
  const int r = a.rows(), c = a.cols();
  const auto& av = a.value();
  const auto& bv = b.value();
  BasicArray<T> y = BasicArray<T>::matrix(r, 1);
  for (int i = 0; i < r; ++i) {
    y[i] = static_cast<T>(cosine_sim(std::span<const T>(&av.at(i, 0), c), std::span<const T>(&bv.at(i, 0), c)));
  }
  return a.g->push(std::move(y), {a, b}, [a, b, r, c](Graph<T>& g, const BasicArray<T>& go) {
    const auto& av = g.value(a);
    const auto& bv = g.value(b);
    for (int i = 0; i < r; ++i) {
      Accum<T> dot = 0, na = 0, nb = 0;
      for (int j = 0; j < c; ++j) {
        dot += static_cast<Accum<T>>(av.at(i, j)) * bv.at(i, j);
        na += static_cast<Accum<T>>(av.at(i, j)) * av.at(i, j);
        nb += static_cast<Accum<T>>(bv.at(i, j)) * bv.at(i, j);
      }
      na = std::sqrt(na);
      nb = std::sqrt(nb);
      if (na < kCosineNormFloor || nb < kCosineNormFloor) continue;
      const Accum<T> cs = dot / (na * nb);
      if (g.needs(a)) {
        auto& ga = g.grad(a);
        for (int j = 0; j < c; ++j)
          ga.at(i, j) = static_cast<T>(ga.at(i, j) + go[i] * (bv.at(i, j) / (na * nb) - cs * av.at(i, j) / (na * na)));
      }
      if (g.needs(b)) {
        auto& gb = g.grad(b);
        for (int j = 0; j < c; ++j)
          gb.at(i, j) = static_cast<T>(gb.at(i, j) + go[i] * (av.at(i, j) / (na * nb) - cs * bv.at(i, j) / (nb * nb)));
      }
    }
  });
}

/// Fused grouped-query attention (see kernels::AttentionShape).
/// `allowed` is an optional [batch x tq x tk] visibility mask.
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const kernels::AttentionShape& s,
                 std::shared_ptr<const std::vector<std::uint8_t>> allowed = nullptr,
                 BasicArray<T>* probs_out = nullptr) {
  s.validate();
  if (q.rows() != s.batch * s.tq || q.cols() != s.heads * s.head_dim) throw ShapeError("attention: query shape");
  if (k.rows() != s.batch * s.tk || k.cols() != s.kv_heads * s.head_dim) throw ShapeError("attention: key shape");
  if (v.rows() != k.rows() || v.cols() != k.cols()) throw ShapeError("attention: value shape");
  BasicArray<T> out = BasicArray<T>::matrix(q.rows(), q.cols());
  auto probs = std::make_shared<std::vector<T>>(s.prob_size());
  kernels::attention_forward(s, q.value().data(), k.value().data(), v.value().data(),
                             allowed ? allowed->data() : nullptr, out.data(), probs->data());
  if (probs_out) *probs_out = BasicArray<T>({s.batch, s.heads, s.tq, s.tk}, *probs);
  return q.g->push(std::move(out), {q, k, v}, [q, k, v, s, probs](Graph<T>& g, const BasicArray<T>& go) {
    kernels::attention_backward(s, g.value(q).data(), g.value(k).data(), g.value(v).data(), probs->data(),
                                go.data(), g.needs(q) ? g.grad(q).data() : nullptr,
                                g.needs(k) ? g.grad(k).data() : nullptr, g.needs(v) ? g.grad(v).data() : nullptr);
  });
}

/// Rotary position embedding on [rows x heads*head_dim]; row r sits at positions[r].
template <class T>
Var<T> rope(Var<T> x, std::vector<int> positions, int heads, int head_dim) {
  if (positions.size() != static_cast<std::size_t>(x.rows())) throw ShapeError("rope: position count mismatch");
  if (x.cols() != heads * head_dim) throw ShapeError("rope: width mismatch");
  BasicArray<T> y = BasicArray<T>::matrix(x.rows(), x.cols());
  kernels::rope_rows(x.value().data(), y.data(), x.rows(), heads, head_dim, positions);
  auto pos = std::make_shared<std::vector<int>>(std::move(positions));
  return x.g->push(std::move(y), {x}, [x, pos, heads, head_dim](Graph<T>& g, const BasicArray<T>& go) {
    BasicArray<T> back = BasicArray<T>::matrix(go.rows(), go.cols());
    kernels::rope_rows(go.data(), back.data(), go.rows(), heads, head_dim, *pos, 10000.0, true);
    auto& gx = g.grad(x);
    for (std::size_t i = 0; i < back.size(); ++i) gx[i] += back[i];
  });
}

}  // namespace dia::ops
