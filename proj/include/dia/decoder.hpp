#pragma once

#include <string>
#include <vector>

#include "dia/layers.hpp"

namespace dia {

/// Geometry of the report decoder derived from ModelConfig.
struct DecoderDims {
  int dim = 0;
  int layers = 0;
  int heads = 0;
  int kv_heads = 0;
  int head_dim = 0;
  int hidden = 0;
  int vocab = 0;
  int max_len = 0;
  double eps = 1e-6;

  static DecoderDims from(const ModelConfig& m) {
    DecoderDims d;
    d.dim = m.decoder_dim;
    d.layers = m.decoder_layers;
    d.heads = m.decoder_heads;
    d.kv_heads = m.decoder_kv_heads;
    d.head_dim = m.decoder_dim / m.decoder_heads;
    d.hidden = m.swiglu_hidden();
    d.vocab = m.report_vocab;
    d.max_len = m.decoder_max_len;
    d.eps = m.norm_eps;
    return d;
  }
  int kv_width() const { return kv_heads * head_dim; }
};

inline std::string layer_name(int l) { return "dec.l" + std::to_string(l); }

template <class T>
void init_swiglu(ParamStore<T>& ps, const std::string& name, int dim, int hidden, std::uint64_t seed,
                 double out_gain = 1.0) {
  layers::init_linear(ps, name + ".w1", dim, hidden, seed, false);
  layers::init_linear(ps, name + ".w2", dim, hidden, seed, false);
  layers::init_linear(ps, name + ".w3", hidden, dim, seed, false, out_gain);
}

/// (x W1) * silu(x W2), then W3.
template <class T>
Var<T> swiglu_ffn(Graph<T>& g, ParamStore<T>& ps, const std::string& name, Var<T> x) {
  Var<T> up = layers::linear(g, ps, name + ".w1", x);
  Var<T> gate = ops::silu(layers::linear(g, ps, name + ".w2", x));
  return layers::linear(g, ps, name + ".w3", ops::mul(up, gate));
}

template <class T>
void init_decoder(ParamStore<T>& ps, const ModelConfig& m, std::uint64_t seed) {
  const auto d = DecoderDims::from(m);
  const double res_gain = 1.0 / std::sqrt(2.0 * d.layers);
  ps.add_normal("dec.emb", {d.vocab, d.dim}, 1.0, seed);
  for (int l = 0; l < d.layers; ++l) {
    const std::string p = layer_name(l);
    layers::init_gain(ps, p + ".norm1", d.dim);
    layers::init_linear(ps, p + ".self.q", d.dim, d.heads * d.head_dim, seed, false);
    layers::init_linear(ps, p + ".self.k", d.dim, d.kv_width(), seed, false);
    layers::init_linear(ps, p + ".self.v", d.dim, d.kv_width(), seed, false);
    layers::init_linear(ps, p + ".self.o", d.heads * d.head_dim, d.dim, seed, false, res_gain);
    layers::init_gain(ps, p + ".norm2", d.dim);
    layers::init_linear(ps, p + ".cross.q", d.dim, d.heads * d.head_dim, seed, false);
    layers::init_linear(ps, p + ".cross.k", d.dim, d.kv_width(), seed, false);
    layers::init_linear(ps, p + ".cross.v", d.dim, d.kv_width(), seed, false);
    layers::init_linear(ps, p + ".cross.o", d.heads * d.head_dim, d.dim, seed, false, res_gain);
    layers::init_gain(ps, p + ".norm3", d.dim);
    init_swiglu(ps, p + ".ffn", d.dim, d.hidden, seed, res_gain);
  }
  layers::init_gain(ps, "dec.norm", d.dim);
  layers::init_linear(ps, "dec.head", d.dim, d.vocab, seed, false);
  // conditioning memory projections
  layers::init_linear(ps, "dec.mem", m.embed_dim, d.dim, seed);
  if (m.use_vae) {
    layers::init_linear(ps, "dec.zv", m.latent_dim, d.dim, seed);
    layers::init_linear(ps, "dec.zl", m.latent_dim, d.dim, seed);
    layers::init_linear(ps, "dec.zs", m.latent_dim, d.dim, seed);
  }
}

/// Conditioning memory [B*M x D]: per sample the projected F_VL rows, then one row each
/// for z_v, z_l, z_s (omitted when the latent model is disabled).
template <class T>
Var<T> decoder_memory(Graph<T>& g, ParamStore<T>& ps, const ModelConfig& m, Var<T> f_vl, int batch,
                      const Var<T>* z_v, const Var<T>* z_l, const Var<T>* z_s) {
  const int rows = m.vision_cells() + m.context_len;
  Var<T> mem = layers::linear(g, ps, "dec.mem", f_vl);
  if (!z_v) return mem;
  Var<T> pv = layers::linear(g, ps, "dec.zv", *z_v);
  Var<T> pl = layers::linear(g, ps, "dec.zl", *z_l);
  Var<T> pz = layers::linear(g, ps, "dec.zs", *z_s);
  Var<T> all = ops::concat_rows<T>({mem, pv, pl, pz});
  std::vector<int> order;
  const int per = rows + 3;
  order.reserve(static_cast<std::size_t>(batch) * per);
  const int base = batch * rows;
  for (int b = 0; b < batch; ++b) {
    for (int i = 0; i < rows; ++i) order.push_back(b * rows + i);
    order.push_back(base + b);
    order.push_back(base + batch + b);
    order.push_back(base + 2 * batch + b);
  }
  return ops::take_rows(all, order);
}

inline int memory_rows(const ModelConfig& m) { return m.vision_cells() + m.context_len + (m.use_vae ? 3 : 0); }

/// Teacher-forced forward over ids [B x t] (positions 0..t-1) -> logits [B*t x vocab].
template <class T>
Var<T> decoder_forward(Graph<T>& g, ParamStore<T>& ps, const ModelConfig& m, Var<T> memory, const std::vector<int>& ids,
                       int batch) {
  const auto d = DecoderDims::from(m);
  const int t = static_cast<int>(ids.size()) / batch;
  if (t * batch != static_cast<int>(ids.size()) || t < 1) throw ShapeError("decoder: ids shape");
  if (t > d.max_len) throw ShapeError("decoder: length " + std::to_string(t) + " exceeds T_max");
  const int mrows = memory.rows() / batch;
  for (int id : ids)
    if (id < 0 || id >= d.vocab) throw ShapeError("decoder: token id out of vocabulary");
  std::vector<int> pos;
  pos.reserve(ids.size());
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < t; ++i) pos.push_back(i);

  kernels::AttentionShape self;
  self.batch = batch;
  self.tq = self.tk = t;
  self.heads = d.heads;
  self.kv_heads = d.kv_heads;
  self.head_dim = d.head_dim;
  self.causal = true;
  kernels::AttentionShape cross = self;
  cross.tk = mrows;
  cross.causal = false;

  Var<T> x = ops::embed(g.param(ps, "dec.emb"), ids);
  for (int l = 0; l < d.layers; ++l) {
    const std::string p = layer_name(l);
    Var<T> h = layers::rms_norm(g, ps, p + ".norm1", x, d.eps);
    Var<T> q = ops::rope(layers::linear(g, ps, p + ".self.q", h), pos, d.heads, d.head_dim);
    Var<T> k = ops::rope(layers::linear(g, ps, p + ".self.k", h), pos, d.kv_heads, d.head_dim);
    Var<T> v = layers::linear(g, ps, p + ".self.v", h);
    x = ops::add(x, layers::linear(g, ps, p + ".self.o", ops::attention(q, k, v, self)));
    h = layers::rms_norm(g, ps, p + ".norm2", x, d.eps);
    Var<T> cq = layers::linear(g, ps, p + ".cross.q", h);
    Var<T> ck = layers::linear(g, ps, p + ".cross.k", memory);
    Var<T> cv = layers::linear(g, ps, p + ".cross.v", memory);
    x = ops::add(x, layers::linear(g, ps, p + ".cross.o", ops::attention(cq, ck, cv, cross)));
    h = layers::rms_norm(g, ps, p + ".norm3", x, d.eps);
    x = ops::add(x, swiglu_ffn(g, ps, p + ".ffn", h));
  }
  return layers::linear(g, ps, "dec.head", layers::rms_norm(g, ps, "dec.norm", x, d.eps));
}

/// Per-generation decoding state: self-attention KV cache per layer and the
/// projected conditioning memory (fixed for the whole generation).
template <class T>
struct DecoderState {
  std::vector<std::vector<T>> keys;    // per layer, [len x kv_width] post-RoPE
  std::vector<std::vector<T>> values;  // per layer, [len x kv_width]
  std::vector<BasicArray<T>> mem_k;    // per layer, [M x kv_width]
  std::vector<BasicArray<T>> mem_v;
  int length = 0;
};

/// Builds the state for one sample from its memory rows [M x D].
template <class T>
DecoderState<T> make_decoder_state(ParamStore<T>& ps, const ModelConfig& m, const BasicArray<T>& memory) {
  const auto d = DecoderDims::from(m);
  DecoderState<T> st;
  st.keys.resize(static_cast<std::size_t>(d.layers));
  st.values.resize(static_cast<std::size_t>(d.layers));
  Graph<T> g(false);
  Var<T> mem = g.constant(memory);
  for (int l = 0; l < d.layers; ++l) {
    const std::string p = layer_name(l);
    st.mem_k.push_back(layers::linear(g, ps, p + ".cross.k", mem).value());
    st.mem_v.push_back(layers::linear(g, ps, p + ".cross.v", mem).value());
  }
  return st;
}

/// Feeds one token at position state.length; returns logits [1 x vocab] and extends the cache.
template <class T>
BasicArray<T> decode_step(ParamStore<T>& ps, const ModelConfig& m, DecoderState<T>& st, int token) {
  const auto d = DecoderDims::from(m);
  if (st.length >= d.max_len) throw ShapeError("decode_step: maximum length " + std::to_string(d.max_len) + " reached");
  if (token < 0 || token >= d.vocab) throw ShapeError("decode_step: token out of vocabulary");
  const int pos = st.length;
  const int w = d.kv_width();
  Graph<T> g(false);
  kernels::AttentionShape self;
  self.tq = 1;
  self.tk = pos + 1;
  self.heads = d.heads;
  self.kv_heads = d.kv_heads;
  self.head_dim = d.head_dim;
  kernels::AttentionShape cross = self;
  cross.tk = st.mem_k.empty() ? 0 : st.mem_k[0].rows();

  Var<T> x = ops::embed(g.param(ps, "dec.emb"), {token});
  for (int l = 0; l < d.layers; ++l) {
    const std::string p = layer_name(l);
    Var<T> h = layers::rms_norm(g, ps, p + ".norm1", x, d.eps);
    Var<T> q = ops::rope(layers::linear(g, ps, p + ".self.q", h), {pos}, d.heads, d.head_dim);
    Var<T> k = ops::rope(layers::linear(g, ps, p + ".self.k", h), {pos}, d.kv_heads, d.head_dim);
    Var<T> v = layers::linear(g, ps, p + ".self.v", h);
    auto& kc = st.keys[static_cast<std::size_t>(l)];
    auto& vc = st.values[static_cast<std::size_t>(l)];
    kc.insert(kc.end(), k.value().values().begin(), k.value().values().end());
    vc.insert(vc.end(), v.value().values().begin(), v.value().values().end());
    Var<T> kall = g.constant(BasicArray<T>({pos + 1, w}, kc));
    Var<T> vall = g.constant(BasicArray<T>({pos + 1, w}, vc));
    x = ops::add(x, layers::linear(g, ps, p + ".self.o", ops::attention(q, kall, vall, self)));
    h = layers::rms_norm(g, ps, p + ".norm2", x, d.eps);
    Var<T> cq = layers::linear(g, ps, p + ".cross.q", h);
    Var<T> att = ops::attention(cq, g.constant(st.mem_k[static_cast<std::size_t>(l)]),
                                g.constant(st.mem_v[static_cast<std::size_t>(l)]), cross);
    x = ops::add(x, layers::linear(g, ps, p + ".cross.o", att));
    h = layers::rms_norm(g, ps, p + ".norm3", x, d.eps);
    x = ops::add(x, swiglu_ffn(g, ps, p + ".ffn", h));
  }
  ++st.length;
  return layers::linear(g, ps, "dec.head", layers::rms_norm(g, ps, "dec.norm", x, d.eps)).value();
}

struct GenerateOptions {
  /// 0 = greedy (lowest index wins ties); otherwise softmax sampling at this temperature.
  double temperature = 0.0;
  std::uint64_t seed = 0;
  int max_len = 0;  // tokens to emit after BOS; 0 = report_len - 1
};

/// Index of the largest entry, lowest index on ties.
template <class T>
int argmax(const BasicArray<T>& v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

/// Emits tokens after BOS until EOS (included) or max_len tokens.
template <class T>
std::vector<int> generate(ParamStore<T>& ps, const ModelConfig& m, const BasicArray<T>& memory,
                          const GenerateOptions& opt = {}) {
  const int max_len = opt.max_len > 0 ? opt.max_len : m.report_len - 1;
  if (max_len + 1 > m.decoder_max_len) throw ShapeError("generate: max_len exceeds decoder T_max");
  DecoderState<T> st = make_decoder_state(ps, m, memory);
  CounterRng rng(opt.seed);
  std::vector<int> out;
  int tok = tokens::kBos;
  for (int i = 0; i < max_len; ++i) {
    BasicArray<T> logits = decode_step(ps, m, st, tok);
    if (opt.temperature > 0) {
      std::vector<double> p(logits.size());
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < p.size(); ++j) mx = std::max(mx, static_cast<double>(logits[j]) / opt.temperature);
      double z = 0;
      for (std::size_t j = 0; j < p.size(); ++j) z += p[j] = std::exp(logits[j] / opt.temperature - mx);
      double u = rng.uniform() * z;
      tok = static_cast<int>(p.size()) - 1;
      for (std::size_t j = 0; j < p.size(); ++j) {
        u -= p[j];
        if (u < 0) {
          tok = static_cast<int>(j);
          break;
        }
      }
    } else {
      tok = argmax(logits);
    }
    out.push_back(tok);
    if (tok == tokens::kEos) break;
  }
  return out;
}

}  // namespace dia
