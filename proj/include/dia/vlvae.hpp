#pragma once

#include "dia/layers.hpp"
#include "dia/losses.hpp"

namespace dia {

template <class T>
void init_vlvae(ParamStore<T>& ps, const ModelConfig& m, std::uint64_t seed) {
  const int e = m.embed_dim, dz = m.latent_dim, h = m.expert_hidden;
  // modality-specific posteriors
  layers::init_conv_stack(ps, "qv.conv", m, seed);
  layers::init_linear(ps, "qv.head", e, 2 * dz, seed, true, 0.5);
  layers::init_token_encoder(ps, "ql", m, seed);
  layers::init_linear(ps, "ql.head", e, 2 * dz, seed, true, 0.5);
  // shared posterior
  if (m.moe()) {
    layers::init_linear(ps, "moe.ev.h", e, h, seed);
    layers::init_linear(ps, "moe.ev.o", h, 2 * dz, seed, true, 0.5);
    layers::init_linear(ps, "moe.el.h", e, h, seed);
    layers::init_linear(ps, "moe.el.o", h, 2 * dz, seed, true, 0.5);
    layers::init_linear(ps, "moe.router", 2 * e, 2, seed, true, 0.1);
  } else {
    layers::init_linear(ps, "cat.h", 2 * e, h, seed);
    layers::init_linear(ps, "cat.o", h, 2 * dz, seed, true, 0.5);
  }
  // likelihood decoders
  layers::init_linear(ps, "pv.in", dz, m.vision_cells() * e, seed);
  layers::init_tconv_stack(ps, "pv.tconv", m, seed);
  layers::init_linear(ps, "pl.h", dz, m.lang_decoder_hidden, seed);
  layers::init_linear(ps, "pl.o", m.lang_decoder_hidden, m.context_len * m.context_vocab, seed);
}

/// Splits a [B x 2d] head output into (mu, clamped log_sigma).
template <class T>
LatentGaussian<T> gaussian_head(Var<T> out, const ModelConfig& m) {
  const int dz = out.cols() / 2;
  return {ops::slice_cols(out, 0, dz), ops::clamp(ops::slice_cols(out, dz, dz), m.log_sigma_min, m.log_sigma_max)};
}

template <class T>
LatentGaussian<T> encode_vision_latent(Graph<T>& g, ParamStore<T>& ps, const ModelConfig& m, Var<T> images,
                                       int batch) {
  Var<T> grid = layers::conv_stack(g, ps, "qv.conv", m, images, batch);
  Var<T> pooled = layers::pool(g, layers::block_mean_matrix<T>(batch, m.vision_cells()), grid);
  return gaussian_head(layers::linear(g, ps, "qv.head", pooled), m);
}

template <class T>
LatentGaussian<T> encode_language_latent(Graph<T>& g, ParamStore<T>& ps, const ModelConfig& m,
                                         const std::vector<int>& ids, int batch) {
  Var<T> h = layers::token_encoder(g, ps, "ql", m, ids, batch);
  Var<T> pooled = layers::pool(g, layers::masked_mean_matrix<T>(ids, batch, m.context_len), h);
  return gaussian_head(layers::linear(g, ps, "ql.head", pooled), m);
}

template <class T>
Var<T> expert_mlp(Graph<T>& g, ParamStore<T>& ps, const std::string& name, Var<T> x) {
  return layers::linear(g, ps, name + ".o", ops::gelu(layers::linear(g, ps, name + ".h", x)));
}

/// Expert heads on the unimodal summaries plus a softmax router on the fused summary.
/// With hard masking, rows without language get pi = (1, 0) exactly.
/// `pi_soft` receives the unmasked router output.
template <class T>
MoEPosterior<T> shared_posterior(Graph<T>& g, ParamStore<T>& ps, const ModelConfig& m, Var<T> pooled_v,
                                 Var<T> pooled_l, Var<T> router_in, const std::vector<std::uint8_t>& present,
                                 Var<T>* pi_soft = nullptr) {
  MoEPosterior<T> q;
  q.expert_v = gaussian_head(expert_mlp(g, ps, "moe.ev", pooled_v), m);
  q.expert_l = gaussian_head(expert_mlp(g, ps, "moe.el", pooled_l), m);
  Var<T> logits = layers::linear(g, ps, "moe.router", router_in);
  Var<T> soft = ops::softmax_rows(logits);
  if (pi_soft) *pi_soft = soft;
  bool any_absent = false;
  for (auto p : present) any_absent = any_absent || !p;
  if (m.hard_mask && any_absent) {
    std::vector<std::uint8_t> allowed;
    for (auto p : present) {
      allowed.push_back(1);
      allowed.push_back(p ? 1 : 0);
    }
    q.pi = ops::softmax_rows(logits, &allowed);
  } else {
    q.pi = soft;
  }
  return q;
}

/// z = mu + sigma * eps.
template <class T>
Var<T> reparameterize(Graph<T>& g, const LatentGaussian<T>& q, const BasicArray<T>& eps) {
  return ops::add(q.mu, ops::mul(ops::exp(q.log_sigma), g.constant(eps)));
}

/// Stratified mixture sample pi_V (mu_V + sigma_V eps_V) + pi_L (mu_L + sigma_L eps_L).
template <class T>
Var<T> sample_shared(Graph<T>& g, const MoEPosterior<T>& q, const BasicArray<T>& eps_v, const BasicArray<T>& eps_l) {
  Var<T> zv = reparameterize(g, q.expert_v, eps_v);
  Var<T> zl = reparameterize(g, q.expert_l, eps_l);
  return ops::add(ops::mul_col(zv, ops::slice_cols(q.pi, 0, 1)), ops::mul_col(zl, ops::slice_cols(q.pi, 1, 1)));
}

/// Exact mixture sampling: each row picks one expert with probability pi (not differentiable in pi).
template <class T>
Var<T> sample_shared_categorical(Graph<T>& g, const MoEPosterior<T>& q, const BasicArray<T>& eps_v,
                                 const BasicArray<T>& eps_l, CounterRng& rng) {
  Var<T> zv = reparameterize(g, q.expert_v, eps_v);
  Var<T> zl = reparameterize(g, q.expert_l, eps_l);
  const int b = zv.rows();
  std::vector<int> rows;
  for (int i = 0; i < b; ++i) {
    const double pv = q.pi.value().at(i, 0);
    rows.push_back(rng.uniform() < pv ? i : b + i);
  }
  return ops::take_rows(ops::concat_rows<T>({zv, zl}), rows);
}

/// Mean of the pixel likelihood, [B x H*W*C].
template <class T>
Var<T> decode_vision(Graph<T>& g, ParamStore<T>& ps, const ModelConfig& m, Var<T> z_v) {
  const int b = z_v.rows();
  Var<T> grid = ops::reshape(layers::linear(g, ps, "pv.in", z_v), b * m.vision_cells(), m.embed_dim);
  return layers::tconv_stack(g, ps, "pv.tconv", m, ops::gelu(grid), b);
}

/// Per-position context logits [B*S_L x vocab].
template <class T>
Var<T> decode_language(Graph<T>& g, ParamStore<T>& ps, const ModelConfig& m, Var<T> z_l) {
  const int b = z_l.rows();
  Var<T> h = ops::gelu(layers::linear(g, ps, "pl.h", z_l));
  return ops::reshape(layers::linear(g, ps, "pl.o", h), b * m.context_len, m.context_vocab);
}

}  // namespace dia
