#pragma once

#include <string>
#include <vector>

#include "dia/model.hpp"
#include "dia/numerics/gradcheck.hpp"
#include "dia/synth.hpp"

namespace dia {

/// One loss of the gradient-check suite.
struct LossCheck {
  std::string loss;
  std::vector<GradRecord> records;
  double max_rel_error = 0;
};

inline const std::vector<std::string>& checked_losses() {
  static const std::vector<std::string> names = {"ce", "neg_elbo", "marginal_neg_elbo", "orth", "align", "total"};
  return names;
}

/// Small batch for gradient checks: `rows` training samples drawn from rc.data, the last
/// row context-stripped so both presence branches are exercised.
inline ModalityBatch gradcheck_batch(const RunConfig& rc, int rows, std::uint64_t seed) {
  SynthConfig c = rc.data;
  c.n_train = rows;
  c.n_val = c.n_test = 0;
  c.seed = derive_seed(seed, "gradcheck.data");
  Dataset d = make_dataset(c);
  std::vector<int> ids(static_cast<std::size_t>(rows));
  for (int i = 0; i < rows; ++i) ids[static_cast<std::size_t>(i)] = i;
  auto b = d.batch(ids);
  strip_context(b, rows - 1);
  return b;
}

/// Builds the named scalar loss for the fixed batch and noise. orth and align are checked
/// directly, independent of their lambda weights.
template <class T>
Var<T> build_checked_loss(const std::string& loss, Graph<T>& g, ParamStore<T>& ps, const RunConfig& rc,
                          const ModalityBatch& mixed, const ModalityBatch& stripped, const StepNoise<T>& noise) {
  const auto& m = rc.model;
  if (loss == "marginal_neg_elbo") {
    auto r = forward(g, ps, m, stripped, &noise);
    auto t = row_terms(g, r, m, stripped, noise);
    return ops::neg(ops::mean_all(ops::sub(ops::sub(t.recon_v, t.kl_v), t.jsd)));
  }
  auto r = forward(g, ps, m, mixed, &noise);
  if (loss == "orth") return orth_term(r.z_s, r.z_v, r.z_l, r.present);
  if (loss == "align") return align_term(r.z_s, r.z_v, r.z_l, rc.train.tau, r.present, m.in_batch_negatives);
  auto l = compute_loss(g, r, m, rc.train, mixed, &noise);
  if (loss == "ce") return l.ce;
  if (loss == "neg_elbo") return l.neg_elbo;
  if (loss == "total") return l.total;
  throw ConfigError("gradcheck: unknown loss '" + loss + "'");
}

template <class T, class U>
StepNoise<U> cast_noise(const StepNoise<T>& n) {
  StepNoise<U> o;
  o.eps_v = n.eps_v.template cast<U>();
  o.eps_l = n.eps_l.template cast<U>();
  o.eps_sv = n.eps_sv.template cast<U>();
  o.eps_sl = n.eps_sl.template cast<U>();
  o.jsd.q = n.jsd.q.template cast<U>();
  o.jsd.p = n.jsd.p.template cast<U>();
  o.jsd.samples = n.jsd.samples;
  return o;
}

/// Reverse-mode gradients of a 32-bit model against central differences of the same
/// loss evaluated in double precision at the same (32-bit representable) parameters.
/// Isolates errors in the 32-bit gradient code from finite-difference roundoff.
inline std::vector<GradRecord> grad_check_reference(const LossBuilder<float>& build32, ParamStore32& ps32,
                                                    const LossBuilder<double>& build64, const GradCheckOptions& opt) {
  ParamStoreD ps64;
  for (auto& [name, p] : ps32) ps64.add(name, p.value.template cast<double>(), p.decay);
  ps32.zero_grad();
  {
    Graph32 g(true);
    auto loss = build32(g, ps32);
    g.backward(loss);
  }
  auto eval = [&]() {
    GraphD g(false);
    return build64(g, ps64).item();
  };
  std::vector<GradRecord> out;
  CounterRng pick(opt.seed);
  for (auto& [name, p] : ps32) {
    GradRecord rec;
    rec.name = name;
    rec.analytic = p.grad.template cast<double>();
    rec.numeric = ArrayD(p.value.shape());
    auto& v64 = ps64.at(name).value;
    const int n = static_cast<int>(p.value.size());
    std::vector<int> coords(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    if (opt.max_coords > 0 && n > opt.max_coords) {
      for (int i = 0; i < opt.max_coords; ++i) {
        const int j = i + static_cast<int>(pick.below(static_cast<std::uint64_t>(n - i)));
        std::swap(coords[static_cast<std::size_t>(i)], coords[static_cast<std::size_t>(j)]);
      }
      coords.resize(static_cast<std::size_t>(opt.max_coords));
      std::sort(coords.begin(), coords.end());
    }
    for (int i : coords) {
      const double saved = v64[i];
      v64[i] = saved + opt.step;
      const double fu = eval();
      v64[i] = saved - opt.step;
      const double fd = eval();
      v64[i] = saved;
      rec.numeric[i] = (fu - fd) / (2 * opt.step);
      rec.max_rel_error = std::max(rec.max_rel_error, relative_error(rec.analytic[i], rec.numeric[i], opt.floor));
    }
    rec.coords = std::move(coords);
    out.push_back(std::move(rec));
  }
  ps32.zero_grad();
  return out;
}

/// Central-difference check of every loss in checked_losses() for a freshly initialized
/// model. Parameters are initialized from `seed`; batch and noise are derived from it.
template <class T>
std::vector<LossCheck> gradcheck_suite(const RunConfig& rc, std::uint64_t seed, int rows, const GradCheckOptions& base) {
  rc.validate();
  if (!rc.model.use_vae) throw ConfigError("gradcheck: the suite needs the latent model (use_vae = true)");
  if (rows < 2) throw ConfigError("gradcheck: need at least two rows");
  ParamStore<T> ps;
  init_model(ps, rc.model, seed);
  const ModalityBatch mixed = gradcheck_batch(rc, rows, seed);
  ModalityBatch stripped = mixed;
  strip_all_contexts(stripped);
  CounterRng nz(derive_seed(seed, "gradcheck.noise"));
  const auto noise = StepNoise<T>::draw(rc.model, rows, nz);
  std::vector<LossCheck> out;
  for (const auto& name : checked_losses()) {
    GradCheckOptions o = base;
    o.seed = derive_seed(derive_seed(seed, "gradcheck.coords"), name);
    LossBuilder<T> build = [&](Graph<T>& g, ParamStore<T>& p) {
      return build_checked_loss(name, g, p, rc, mixed, stripped, noise);
    };
    LossCheck c;
    c.loss = name;
    c.records = grad_check<T>(build, ps, o);
    c.max_rel_error = max_rel_error(c.records);
    out.push_back(std::move(c));
  }
  return out;
}

/// gradcheck_suite for the 32-bit model with double-precision finite differences.
inline std::vector<LossCheck> gradcheck_suite_reference(const RunConfig& rc, std::uint64_t seed, int rows,
                                                        const GradCheckOptions& base) {
  rc.validate();
  if (!rc.model.use_vae) throw ConfigError("gradcheck: the suite needs the latent model (use_vae = true)");
  if (rows < 2) throw ConfigError("gradcheck: need at least two rows");
  ParamStore32 ps;
  init_model(ps, rc.model, seed);
  const ModalityBatch mixed = gradcheck_batch(rc, rows, seed);
  ModalityBatch stripped = mixed;
  strip_all_contexts(stripped);
  CounterRng nz(derive_seed(seed, "gradcheck.noise"));
  const auto noise32 = StepNoise<float>::draw(rc.model, rows, nz);
  const auto noise64 = cast_noise<float, double>(noise32);
  std::vector<LossCheck> out;
  for (const auto& name : checked_losses()) {
    GradCheckOptions o = base;
    o.seed = derive_seed(derive_seed(seed, "gradcheck.coords"), name);
    LossBuilder<float> b32 = [&](Graph32& g, ParamStore32& p) {
      return build_checked_loss(name, g, p, rc, mixed, stripped, noise32);
    };
    LossBuilder<double> b64 = [&](GraphD& g, ParamStoreD& p) {
      return build_checked_loss(name, g, p, rc, mixed, stripped, noise64);
    };
    LossCheck c;
    c.loss = name;
    c.records = grad_check_reference(b32, ps, b64, o);
    c.max_rel_error = max_rel_error(c.records);
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace dia
