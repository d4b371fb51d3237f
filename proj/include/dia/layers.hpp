#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "dia/config.hpp"
#include "dia/numerics/ops.hpp"

namespace dia::layers {

// ---------------------------------------------------------------- init

template <class T>
void init_linear(ParamStore<T>& ps, const std::string& name, int in, int out, std::uint64_t seed,
                 bool bias = true, double gain = 1.0) {
  ps.add_normal(name + ".w", {in, out}, gain / std::sqrt(static_cast<double>(in)), seed);
  if (bias) ps.add_const(name + ".b", {1, out}, T(0));
}

template <class T>
void init_gain(ParamStore<T>& ps, const std::string& name, int dim) {
  ps.add_const(name, {1, dim}, T(1));
}

// ---------------------------------------------------------------- dense

/// x [r x in] -> x W + b.
template <class T>
Var<T> linear(Graph<T>& g, ParamStore<T>& ps, const std::string& name, Var<T> x) {
  Var<T> y = ops::matmul(x, g.param(ps, name + ".w"));
  if (ps.contains(name + ".b")) y = ops::add_row(y, g.param(ps, name + ".b"));
  return y;
}

/// RMS normalization with a learned per-channel gain.
template <class T>
Var<T> rms_norm(Graph<T>& g, ParamStore<T>& ps, const std::string& name, Var<T> x, double eps) {
  return ops::mul_row(ops::rms_norm_rows(x, eps), g.param(ps, name));
}

/// Row pooling: out[b] = sum_i w[b][i] x[i]; P is [B x rows].
template <class T>
Var<T> pool(Graph<T>& g, const BasicArray<T>& p, Var<T> x) {
  return ops::matmul(g.constant(p), x);
}

/// Uniform mean over consecutive blocks of `per` rows.
template <class T>
BasicArray<T> block_mean_matrix(int batch, int per) {
  BasicArray<T> p = BasicArray<T>::matrix(batch, batch * per);
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < per; ++i) p.at(b, b * per + i) = static_cast<T>(1.0 / per);
  return p;
}

/// Mean over the non-PAD tokens of each row; an all-PAD row falls back to the plain mean.
template <class T>
BasicArray<T> masked_mean_matrix(const std::vector<int>& ids, int batch, int len) {
  BasicArray<T> p = BasicArray<T>::matrix(batch, batch * len);
  for (int b = 0; b < batch; ++b) {
    int n = 0;
    for (int i = 0; i < len; ++i) n += ids[static_cast<std::size_t>(b) * len + i] != tokens::kPad;
    for (int i = 0; i < len; ++i) {
      const bool keep = n == 0 || ids[static_cast<std::size_t>(b) * len + i] != tokens::kPad;
      if (keep) p.at(b, b * len + i) = static_cast<T>(1.0 / (n == 0 ? len : n));
    }
  }
  return p;
}

/// Row indices that repeat each of `batch` rows `per` times.
inline std::vector<int> repeat_rows(int batch, int per) {
  std::vector<int> idx;
  idx.reserve(static_cast<std::size_t>(batch) * per);
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < per; ++i) idx.push_back(b);
  return idx;
}

// ---------------------------------------------------------------- convolution

/// Channels of each feature map from the image up to the top grid.
inline std::vector<int> conv_chain(const ModelConfig& m) {
  std::vector<int> c{m.image_channels};
  c.insert(c.end(), m.conv_channels.begin(), m.conv_channels.end());
  c.push_back(m.embed_dim);
  return c;
}

template <class T>
void init_conv_stack(ParamStore<T>& ps, const std::string& name, const ModelConfig& m, std::uint64_t seed) {
  const auto ch = conv_chain(m);
  for (std::size_t i = 0; i < m.strides.size(); ++i) {
    const int k = m.strides[i];
    init_linear(ps, name + "." + std::to_string(i), k * k * ch[i], ch[i + 1], seed);
  }
}

/// Non-overlapping convolution (kernel == stride, no padding) as patch-gather plus matmul.
/// x is [B*H*W x C] with rows (b, y, x); result is [B*(H/s)*(W/s) x Cout].
template <class T>
Var<T> conv_block(Graph<T>& g, ParamStore<T>& ps, const std::string& name, Var<T> x, int batch, int h, int w,
                  int c, int s) {
  const int oh = h / s, ow = w / s;
  const int cols = s * s * c;
  std::vector<int> idx;
  idx.reserve(static_cast<std::size_t>(batch) * oh * ow * cols);
  for (int b = 0; b < batch; ++b)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox)
        for (int ky = 0; ky < s; ++ky)
          for (int kx = 0; kx < s; ++kx)
            for (int ci = 0; ci < c; ++ci)
              idx.push_back(((b * h + oy * s + ky) * w + ox * s + kx) * c + ci);
  Var<T> patches = ops::gather(x, std::move(idx), batch * oh * ow, cols);
  return linear(g, ps, name, patches);
}

/// Image batch [B x H*W*C] -> top feature grid [B*cells x embed_dim]; GELU between blocks.
template <class T>
Var<T> conv_stack(Graph<T>& g, ParamStore<T>& ps, const std::string& name, const ModelConfig& m, Var<T> images,
                  int batch) {
  const auto ch = conv_chain(m);
  int h = m.image_size;
  Var<T> x = ops::reshape(images, batch * h * h, m.image_channels);
  for (std::size_t i = 0; i < m.strides.size(); ++i) {
    x = conv_block(g, ps, name + "." + std::to_string(i), x, batch, h, h, ch[i], m.strides[i]);
    h /= m.strides[i];
    if (i + 1 < m.strides.size()) x = ops::gelu(x);
  }
  return x;
}

template <class T>
void init_tconv_stack(ParamStore<T>& ps, const std::string& name, const ModelConfig& m, std::uint64_t seed) {
  const auto ch = conv_chain(m);
  const int n = static_cast<int>(m.strides.size());
  for (int i = n - 1, j = 0; i >= 0; --i, ++j) {
    const int k = m.strides[static_cast<std::size_t>(i)];
    // block j maps ch[i+1] -> ch[i] channels, upsampling by k
    init_linear(ps, name + "." + std::to_string(j), ch[static_cast<std::size_t>(i) + 1],
                k * k * ch[static_cast<std::size_t>(i)], seed, false);
    ps.add_const(name + "." + std::to_string(j) + ".b", {1, ch[static_cast<std::size_t>(i)]}, T(0));
  }
}

/// Transposed non-overlapping convolution: [B*h*w x Cin] -> [B*(h*s)*(w*s) x Cout].
template <class T>
Var<T> tconv_block(Graph<T>& g, ParamStore<T>& ps, const std::string& name, Var<T> x, int batch, int h, int w,
                   int cout, int s) {
  Var<T> y = ops::matmul(x, g.param(ps, name + ".w"));  // [B*h*w x s*s*cout]
  const int oh = h * s, ow = w * s;
  std::vector<int> idx;
  idx.reserve(static_cast<std::size_t>(batch) * oh * ow * cout);
  for (int b = 0; b < batch; ++b)
    for (int yy = 0; yy < oh; ++yy)
      for (int xx = 0; xx < ow; ++xx)
        for (int co = 0; co < cout; ++co) {
          const int row = (b * h + yy / s) * w + xx / s;
          idx.push_back(row * s * s * cout + ((yy % s) * s + xx % s) * cout + co);
        }
  Var<T> out = ops::gather(y, std::move(idx), batch * oh * ow, cout);
  return ops::add_row(out, g.param(ps, name + ".b"));
}

/// Top grid [B*cells x embed_dim] -> image batch [B x H*W*C]; GELU between blocks, linear output.
template <class T>
Var<T> tconv_stack(Graph<T>& g, ParamStore<T>& ps, const std::string& name, const ModelConfig& m, Var<T> grid,
                   int batch) {
  const auto ch = conv_chain(m);
  const int n = static_cast<int>(m.strides.size());
  int h = m.cells_per_side();
  Var<T> x = grid;
  for (int i = n - 1, j = 0; i >= 0; --i, ++j) {
    const int s = m.strides[static_cast<std::size_t>(i)];
    x = tconv_block(g, ps, name + "." + std::to_string(j), x, batch, h, h, ch[static_cast<std::size_t>(i)], s);
    h *= s;
    if (i > 0) x = ops::gelu(x);
  }
  return ops::reshape(x, batch, m.image_size * m.image_size * m.image_channels);
}

// ---------------------------------------------------------------- attention blocks

struct MhaDims {
  int dim = 0;
  int heads = 1;
  int head_dim() const { return dim / heads; }
};

template <class T>
void init_mha(ParamStore<T>& ps, const std::string& name, int dim, std::uint64_t seed) {
  init_linear(ps, name + ".q", dim, dim, seed, false);
  init_linear(ps, name + ".k", dim, dim, seed, false);
  init_linear(ps, name + ".v", dim, dim, seed, false);
  init_linear(ps, name + ".o", dim, dim, seed, false);
}

/// Multi-head attention of xq [B*tq x E] over xkv [B*tk x E] with output projection.
template <class T>
Var<T> mha(Graph<T>& g, ParamStore<T>& ps, const std::string& name, Var<T> xq, Var<T> xkv, int batch, int tq,
           int tk, int heads, std::shared_ptr<const std::vector<std::uint8_t>> allowed = nullptr,
           BasicArray<T>* probs = nullptr) {
  const int e = xq.cols();
  if (e % heads != 0) {
    throw ShapeError("attention: key dim " + std::to_string(e) + " not divisible by " + std::to_string(heads) +
                     " heads");
  }
  kernels::AttentionShape s;
  s.batch = batch;
  s.tq = tq;
  s.tk = tk;
  s.heads = heads;
  s.kv_heads = heads;
  s.head_dim = e / heads;
  Var<T> q = linear(g, ps, name + ".q", xq);
  Var<T> k = linear(g, ps, name + ".k", xkv);
  Var<T> v = linear(g, ps, name + ".v", xkv);
  return linear(g, ps, name + ".o", ops::attention(q, k, v, s, std::move(allowed), probs));
}

/// Key-padding mask [B x len x len]: key j visible iff it is not PAD, and every query sees itself.
inline std::shared_ptr<std::vector<std::uint8_t>> self_mask(const std::vector<int>& ids, int batch, int len) {
  auto m = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(batch) * len * len, 0);
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < len; ++i)
      for (int j = 0; j < len; ++j)
        (*m)[(static_cast<std::size_t>(b) * len + i) * len + j] =
            i == j || ids[static_cast<std::size_t>(b) * len + j] != tokens::kPad;
  return m;
}

/// Cross mask [B x tq x len] hiding PAD keys; a row whose keys are all PAD sees every key.
inline std::shared_ptr<std::vector<std::uint8_t>> key_mask(const std::vector<int>& ids, int batch, int tq,
                                                           int len) {
  auto m = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(batch) * tq * len, 0);
  for (int b = 0; b < batch; ++b) {
    bool any = false;
    for (int j = 0; j < len; ++j) any = any || ids[static_cast<std::size_t>(b) * len + j] != tokens::kPad;
    for (int i = 0; i < tq; ++i)
      for (int j = 0; j < len; ++j)
        (*m)[(static_cast<std::size_t>(b) * tq + i) * len + j] =
            !any || ids[static_cast<std::size_t>(b) * len + j] != tokens::kPad;
  }
  return m;
}

// ---------------------------------------------------------------- token encoder

template <class T>
void init_token_encoder(ParamStore<T>& ps, const std::string& name, const ModelConfig& m, std::uint64_t seed) {
  ps.add_normal(name + ".emb", {m.context_vocab, m.embed_dim}, 1.0, seed);
  ps.add_normal(name + ".pos", {m.context_len, m.embed_dim}, 0.1, seed);
  for (int l = 0; l < m.encoder_layers; ++l) {
    const std::string p = name + ".l" + std::to_string(l);
    init_gain(ps, p + ".norm1", m.embed_dim);
    init_mha(ps, p + ".attn", m.embed_dim, seed);
    init_gain(ps, p + ".norm2", m.embed_dim);
    init_linear(ps, p + ".ff1", m.embed_dim, m.ffn_dim, seed);
    init_linear(ps, p + ".ff2", m.ffn_dim, m.embed_dim, seed);
  }
  init_gain(ps, name + ".norm", m.embed_dim);
}

/// Pre-norm transformer encoder over [B x S_L] ids -> [B*S_L x E].
template <class T>
Var<T> token_encoder(Graph<T>& g, ParamStore<T>& ps, const std::string& name, const ModelConfig& m,
                     const std::vector<int>& ids, int batch) {
  const int len = m.context_len;
  if (ids.size() != static_cast<std::size_t>(batch) * len) throw ShapeError("encoder: ids shape");
  for (int t : ids)
    if (t < 0 || t >= m.context_vocab)
      throw ConfigError("encoder: token id " + std::to_string(t) + " out of vocabulary " +
                        std::to_string(m.context_vocab));
  std::vector<int> pos;
  pos.reserve(ids.size());
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < len; ++i) pos.push_back(i);
  Var<T> x = ops::add(ops::embed(g.param(ps, name + ".emb"), ids), ops::embed(g.param(ps, name + ".pos"), pos));
  auto mask = self_mask(ids, batch, len);
  for (int l = 0; l < m.encoder_layers; ++l) {
    const std::string p = name + ".l" + std::to_string(l);
    Var<T> h = rms_norm(g, ps, p + ".norm1", x, m.norm_eps);
    x = ops::add(x, mha(g, ps, p + ".attn", h, h, batch, len, len, m.encoder_heads, mask));
    h = rms_norm(g, ps, p + ".norm2", x, m.norm_eps);
    x = ops::add(x, linear(g, ps, p + ".ff2", ops::gelu(linear(g, ps, p + ".ff1", h))));
  }
  return rms_norm(g, ps, name + ".norm", x, m.norm_eps);
}

}  // namespace dia::layers
