#pragma once

#include <optional>

#include "dia/batch.hpp"
#include "dia/decoder.hpp"
#include "dia/fusion.hpp"
#include "dia/losses.hpp"
#include "dia/vlvae.hpp"

namespace dia {

template <class T>
void init_model(ParamStore<T>& ps, const ModelConfig& m, std::uint64_t seed) {
  m.validate();
  init_fusion(ps, m, seed);
  if (m.use_vae) init_vlvae(ps, m, seed);
  init_decoder(ps, m, seed);
}

/// Reparameterization and JSD noise for one batch, drawn in a fixed order
/// (eps_v, eps_l, eps_sv, eps_sl, jsd q-side, jsd p-side) independent of presence flags.
template <class T>
struct StepNoise {
  BasicArray<T> eps_v, eps_l, eps_sv, eps_sl;
  JsdNoise<T> jsd;

  static StepNoise draw(const ModelConfig& m, int batch, CounterRng& rng) {
    StepNoise n;
    for (auto* e : {&n.eps_v, &n.eps_l, &n.eps_sv, &n.eps_sl}) {
      *e = BasicArray<T>::matrix(batch, m.latent_dim);
      for (auto& v : e->values()) v = static_cast<T>(rng.normal());
    }
    n.jsd = JsdNoise<T>::draw(batch, m.moe() ? 2 : 1, m.jsd_samples, m.latent_dim, rng);
    return n;
  }
};

struct ForwardOptions {
  /// Use posterior means instead of samples (evaluation and generation).
  bool use_means = false;
  /// Teacher-forced report logits (needs batch.reports).
  bool decode_reports = true;
  /// Evaluation-only exact categorical expert choice for z_s.
  std::optional<std::uint64_t> categorical_seed;
};

template <class T>
struct ForwardResult {
  int batch = 0;
  std::vector<std::uint8_t> present;
  FeatureMaps<T> features;
  bool has_latents = false;
  LatentGaussian<T> q_v, q_l;
  MoEPosterior<T> q_s;           // moe mode
  LatentGaussian<T> q_s_concat;  // concat mode
  Var<T> pi, pi_soft;            // [B x 2] (moe) / unused
  Var<T> z_v, z_l, z_s;
  Var<T> v_hat;                  // [B x H*W*C]
  Var<T> l_logits;               // [B*S_L x vocab]
  Var<T> report_logits;          // [B*(T-1) x vocab]
  Var<T> memory;                 // [B*M x D]
  Var<T> pooled_fused;           // [B x 2E]
};

/// Full forward pass on one batch. Noise is required unless use_means is set.
template <class T>
ForwardResult<T> forward(Graph<T>& g, ParamStore<T>& ps, const ModelConfig& m, const ModalityBatch& batch,
                         const StepNoise<T>* noise, const ForwardOptions& opt = {}) {
  validate_batch(batch, m);
  const int b = batch.batch;
  if (!opt.use_means && m.use_vae && !noise) throw std::invalid_argument("forward: sampling needs noise");
  ForwardResult<T> r;
  r.batch = b;
  r.present = batch.lang_present;

  Var<T> images = g.constant(batch.images.template cast<T>());
  Var<T> f_v = extract_vision_features(g, ps, m, images, b);
  Var<T> f_l = encode_context(g, ps, m, batch.contexts, b);
  r.features = fuse(g, ps, m, f_v, f_l, batch.contexts, b);
  const int sv = m.vision_cells(), sl = m.context_len;
  const auto ctx_pool = layers::masked_mean_matrix<T>(batch.contexts, b, sl);
  r.pooled_fused = ops::concat_cols<T>({layers::pool(g, layers::block_mean_matrix<T>(b, sv), r.features.f_v2l),
                                        layers::pool(g, ctx_pool, r.features.f_l2v)});

  if (m.use_vae) {
    r.has_latents = true;
    r.q_v = encode_vision_latent(g, ps, m, images, b);
    r.q_l = encode_language_latent(g, ps, m, batch.contexts, b);
    BasicArray<T> mask = BasicArray<T>::matrix(b, 1);
    for (int i = 0; i < b; ++i) mask[static_cast<std::size_t>(i)] = batch.lang_present[static_cast<std::size_t>(i)] ? T(1) : T(0);
    Var<T> mask_v = g.constant(mask);
    if (opt.use_means) {
      r.z_v = r.q_v.mu;
      r.z_l = ops::mul_col(r.q_l.mu, mask_v);
    } else {
      r.z_v = reparameterize(g, r.q_v, noise->eps_v);
      r.z_l = ops::mul_col(reparameterize(g, r.q_l, noise->eps_l), mask_v);
    }
    if (m.moe()) {
      Var<T> pooled_v = layers::pool(g, layers::block_mean_matrix<T>(b, sv), r.features.f_v);
      Var<T> pooled_l = layers::pool(g, ctx_pool, r.features.f_l);
      r.q_s = shared_posterior(g, ps, m, pooled_v, pooled_l, r.pooled_fused, batch.lang_present, &r.pi_soft);
      r.pi = r.q_s.pi;
      if (opt.use_means) {
        r.z_s = ops::add(ops::mul_col(r.q_s.expert_v.mu, ops::slice_cols(r.pi, 0, 1)),
                         ops::mul_col(r.q_s.expert_l.mu, ops::slice_cols(r.pi, 1, 1)));
      } else if (opt.categorical_seed || m.categorical_sampling) {
        CounterRng pick(opt.categorical_seed.value_or(0));
        r.z_s = sample_shared_categorical(g, r.q_s, noise->eps_sv, noise->eps_sl, pick);
      } else {
        r.z_s = sample_shared(g, r.q_s, noise->eps_sv, noise->eps_sl);
      }
    } else {
      r.q_s_concat = gaussian_head(expert_mlp(g, ps, "cat", r.pooled_fused), m);
      r.z_s = opt.use_means ? r.q_s_concat.mu : reparameterize(g, r.q_s_concat, noise->eps_sv);
    }
    r.v_hat = decode_vision(g, ps, m, r.z_v);
    r.l_logits = decode_language(g, ps, m, r.z_l);
  }

  r.memory = decoder_memory(g, ps, m, r.features.f_vl, b, r.has_latents ? &r.z_v : nullptr,
                            r.has_latents ? &r.z_l : nullptr, r.has_latents ? &r.z_s : nullptr);
  if (opt.decode_reports && !batch.reports.empty()) {
    const int t = batch.report_len();
    std::vector<int> in;
    in.reserve(static_cast<std::size_t>(b) * (t - 1));
    for (int i = 0; i < b; ++i)
      for (int j = 0; j < t - 1; ++j) in.push_back(batch.reports[static_cast<std::size_t>(i) * t + j]);
    r.report_logits = decoder_forward(g, ps, m, r.memory, in, b);
  }
  return r;
}

/// Per-sample loss terms, each [B x 1]. Language terms are 0 on absent rows.
template <class T>
struct RowTerms {
  Var<T> recon_v, recon_l, kl_v, kl_l, jsd;
};

template <class T>
RowTerms<T> row_terms(Graph<T>& g, const ForwardResult<T>& r, const ModelConfig& m, const ModalityBatch& batch,
                      const StepNoise<T>& noise) {
  if (!r.has_latents) throw std::logic_error("row_terms: latent model disabled");
  const int b = r.batch;
  BasicArray<T> mask = BasicArray<T>::matrix(b, 1);
  for (int i = 0; i < b; ++i) mask[static_cast<std::size_t>(i)] = r.present[static_cast<std::size_t>(i)] ? T(1) : T(0);
  Var<T> mv = g.constant(mask);
  RowTerms<T> t;
  // Gaussian pixel likelihood with unit variance, constant dropped
  t.recon_v = ops::scale(ops::sum_cols(ops::square(ops::sub(r.v_hat, g.constant(batch.images.template cast<T>())))), -0.5);
  Var<T> lp = ops::pick(ops::log_softmax_rows(r.l_logits), batch.contexts);
  t.recon_l = ops::mul(ops::sum_cols(ops::reshape(lp, b, m.context_len)), mv);
  t.kl_v = gaussian_kl_rows(r.q_v.mu, r.q_v.log_sigma);
  t.kl_l = ops::mul(gaussian_kl_rows(r.q_l.mu, r.q_l.log_sigma), mv);
  if (m.moe()) {
    Var<T> mu = ops::concat_cols<T>({r.q_s.expert_v.mu, r.q_s.expert_l.mu});
    Var<T> ls = ops::concat_cols<T>({r.q_s.expert_v.log_sigma, r.q_s.expert_l.log_sigma});
    t.jsd = jsd_mixture_prior(mu, ls, r.pi, noise.jsd);
  } else {
    Var<T> ones = g.constant(BasicArray<T>::matrix(b, 1, T(1)));
    t.jsd = jsd_mixture_prior(r.q_s_concat.mu, r.q_s_concat.log_sigma, ones, noise.jsd);
  }
  return t;
}

/// Full-modality ELBO of one sample: recon_V + recon_L - kl_v - kl_l - jsd_s.
template <class T>
double sample_elbo(const RowTerms<T>& t, const std::vector<std::uint8_t>& present, int i) {
  if (!present.at(static_cast<std::size_t>(i))) throw std::invalid_argument("elbo: language absent; use marginal_elbo");
  const auto k = static_cast<std::size_t>(i);
  return static_cast<double>(t.recon_v.value()[k]) + t.recon_l.value()[k] - t.kl_v.value()[k] - t.kl_l.value()[k] -
         t.jsd.value()[k];
}

/// Vision-only bound: recon_V - kl_v - jsd(q_s(Z_s | V), p).
template <class T>
double sample_marginal_elbo(const RowTerms<T>& t, const std::vector<std::uint8_t>& present, int i) {
  if (present.at(static_cast<std::size_t>(i))) throw std::invalid_argument("marginal_elbo: language present; use elbo");
  const auto k = static_cast<std::size_t>(i);
  return static_cast<double>(t.recon_v.value()[k]) - t.kl_v.value()[k] - t.jsd.value()[k];
}

template <class T>
struct LossResult {
  Var<T> total;
  Var<T> neg_elbo;
  Var<T> ce;
  Var<T> orth;
  Var<T> align;
  LossBreakdown breakdown;
};

/// total = ce - mean(elbo rows) + lambda1 * orth + lambda2 * align + router_weight * router.
/// Terms with a zero weight are not evaluated and report 0.
template <class T>
LossResult<T> compute_loss(Graph<T>& g, const ForwardResult<T>& r, const ModelConfig& m, const TrainConfig& tc,
                           const ModalityBatch& batch, const StepNoise<T>* noise) {
  LossResult<T> out;
  auto& bd = out.breakdown;
  bd.tau = tc.tau;
  Var<T> zero = g.constant(BasicArray<T>::scalar(T(0)));
  const int b = r.batch;
  const int t = batch.report_len();
  std::vector<int> targets;
  targets.reserve(static_cast<std::size_t>(b) * (t - 1));
  for (int i = 0; i < b; ++i)
    for (int j = 1; j < t; ++j) targets.push_back(batch.reports[static_cast<std::size_t>(i) * t + j]);
  out.ce = report_ce(r.report_logits, targets);
  bd.ce = out.ce.item();
  Var<T> total = out.ce;
  out.neg_elbo = out.orth = out.align = zero;
  if (r.has_latents) {
    if (!noise) throw std::invalid_argument("compute_loss: JSD needs noise");
    RowTerms<T> rt = row_terms(g, r, m, batch, *noise);
    Var<T> elbo_rows = ops::sub(ops::sub(ops::sub(ops::add(rt.recon_v, rt.recon_l), rt.kl_v), rt.kl_l), rt.jsd);
    out.neg_elbo = ops::neg(ops::mean_all(elbo_rows));
    bd.recon_v = ops::mean_all(rt.recon_v).item();
    bd.recon_l = ops::mean_all(rt.recon_l).item();
    bd.kl_v = ops::mean_all(rt.kl_v).item();
    bd.kl_l = ops::mean_all(rt.kl_l).item();
    bd.jsd_s = ops::mean_all(rt.jsd).item();
    total = ops::add(total, out.neg_elbo);
    if (tc.lambda1 > 0) {
      out.orth = orth_term(r.z_s, r.z_v, r.z_l, r.present);
      bd.orth = out.orth.item();
      total = ops::add(total, ops::scale(out.orth, tc.lambda1));
    }
    if (tc.lambda2 > 0) {
      out.align = align_term(r.z_s, r.z_v, r.z_l, tc.tau, r.present, m.in_batch_negatives);
      bd.align = out.align.item();
      total = ops::add(total, ops::scale(out.align, tc.lambda2));
    }
    if (m.moe() && tc.router_weight > 0) {
      std::vector<int> absent;
      for (int i = 0; i < b; ++i)
        if (!r.present[static_cast<std::size_t>(i)]) absent.push_back(i);
      if (!absent.empty()) {
        // supervise the unmasked router toward the vision expert on null contexts
        Var<T> pv = ops::slice_cols(ops::take_rows(r.pi_soft, absent), 0, 1);
        Var<T> router = ops::neg(ops::mean_all(ops::log(pv)));
        bd.router = tc.router_weight * router.item();
        total = ops::add(total, ops::scale(router, tc.router_weight));
      }
    }
  }
  out.total = total;
  total_loss(bd, tc.lambda1, tc.lambda2);
  return out;
}

}  // namespace dia
