#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dia/numerics/rng.hpp"
#include "dia/numerics/tape.hpp"

namespace dia {

/// Analytic vs central-difference gradient of one named parameter.
struct GradRecord {
  std::string name;
  ArrayD analytic;
  ArrayD numeric;
  double max_rel_error = 0.0;
  /// Flat indices that were probed (all of them unless sub-sampled).
  std::vector<int> coords;
};

class NonDeterministicLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradCheckOptions {
  double step = 1e-3;
  /// Denominator floor in |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  /// Probe at most this many coordinates per parameter (0 = all), chosen by `seed`.
  int max_coords = 0;
  std::uint64_t seed = 0;
};

template <class T>
using LossBuilder = std::function<Var<T>(Graph<T>&, ParamStore<T>&)>;

inline double relative_error(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Compares reverse-mode gradients with (f(p+h) - f(p-h)) / 2h per coordinate.
/// The builder must be deterministic; two identical evaluations that differ
/// are rejected with NonDeterministicLoss.
template <class T>
std::vector<GradRecord> grad_check(const LossBuilder<T>& build, ParamStore<T>& params,
                                   const GradCheckOptions& opt = {}) {
  if (!(opt.step > 0)) throw std::invalid_argument("grad_check: step must be positive");
  auto eval = [&]() {
    Graph<T> g(false);
    return static_cast<double>(build(g, params).item());
  };
  const double f0 = eval();
  const double f1 = eval();
  if (!(f0 == f1) && !(std::isnan(f0) && std::isnan(f1))) {
    throw NonDeterministicLoss("grad_check: loss evaluator is not deterministic (" + std::to_string(f0) +
                               " vs " + std::to_string(f1) + ")");
  }

  params.zero_grad();
  {
    Graph<T> g(true);
    Var<T> loss = build(g, params);
    g.backward(loss);
  }

  std::vector<GradRecord> out;
  CounterRng pick(opt.seed);
  for (auto& [name, p] : params) {
    GradRecord rec;
    rec.name = name;
    rec.analytic = ArrayD(p.value.shape());
    rec.numeric = ArrayD(p.value.shape());
    const int n = static_cast<int>(p.value.size());
    std::vector<int> coords(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) coords[i] = i;
    if (opt.max_coords > 0 && n > opt.max_coords) {
      for (int i = 0; i < opt.max_coords; ++i) {
        const int j = i + static_cast<int>(pick.below(static_cast<std::uint64_t>(n - i)));
        std::swap(coords[i], coords[j]);
      }
      coords.resize(static_cast<std::size_t>(opt.max_coords));
      std::sort(coords.begin(), coords.end());
    }
    for (int i = 0; i < n; ++i) rec.analytic[i] = p.grad[i];
    for (int i : coords) {
      const T saved = p.value[i];
      const T up = static_cast<T>(saved + opt.step);
      const T down = static_cast<T>(saved - opt.step);
      p.value[i] = up;
      const double fu = eval();
      p.value[i] = down;
      const double fd = eval();
      p.value[i] = saved;
      rec.numeric[i] = (fu - fd) / (static_cast<double>(up) - static_cast<double>(down));
      rec.max_rel_error = std::max(rec.max_rel_error, relative_error(rec.analytic[i], rec.numeric[i], opt.floor));
    }
    rec.coords = std::move(coords);
    out.push_back(std::move(rec));
  }
  params.zero_grad();
  return out;
}

inline double max_rel_error(const std::vector<GradRecord>& recs) {
  double m = 0;
  for (const auto& r : recs) m = std::max(m, r.max_rel_error);
  return m;
}

}  // namespace dia
