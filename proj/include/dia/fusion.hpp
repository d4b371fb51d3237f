#pragma once

#include "dia/layers.hpp"

namespace dia {

/// Feature maps of one forward pass; row blocks are per sample.
template <class T>
struct FeatureMaps {
  Var<T> f_v;    // [B*S_V x E]
  Var<T> f_l;    // [B*S_L x E]
  Var<T> f_v2l;  // [B*S_V x E]
  Var<T> f_l2v;  // [B*S_L x E]
  Var<T> f_vl;   // [B*(S_V+S_L) x E], sample b owns rows b*(S_V+S_L) ...
};

template <class T>
void init_fusion(ParamStore<T>& ps, const ModelConfig& m, std::uint64_t seed) {
  layers::init_conv_stack(ps, "fv.conv", m, seed);
  layers::init_mha(ps, "fv.gca", m.embed_dim, seed);
  layers::init_token_encoder(ps, "fl", m, seed);
  layers::init_mha(ps, "x.v2l", m.embed_dim, seed);
  layers::init_mha(ps, "x.l2v", m.embed_dim, seed);
}

/// Conv stack to S_V cells, then guided context attention: the mean cell queries all
/// cells and the attended vector is added to every cell.
template <class T>
Var<T> extract_vision_features(Graph<T>& g, ParamStore<T>& ps, const ModelConfig& m, Var<T> images, int batch) {
  const int px = m.image_size * m.image_size * m.image_channels;
  if (images.rows() != batch || images.cols() != px) {
    throw ShapeError("vision: images " + shape_str(images.value().shape()) + " do not match config [" +
                     std::to_string(batch) + " x " + std::to_string(px) + "]");
  }
  const int cells = m.vision_cells();
  Var<T> f = layers::conv_stack(g, ps, "fv.conv", m, images, batch);
  Var<T> global = layers::pool(g, layers::block_mean_matrix<T>(batch, cells), f);
  Var<T> ctx = layers::mha(g, ps, "fv.gca", global, f, batch, 1, cells, m.abstractor_heads);
  return ops::add(f, ops::take_rows(ctx, layers::repeat_rows(batch, cells)));
}

template <class T>
Var<T> encode_context(Graph<T>& g, ParamStore<T>& ps, const ModelConfig& m, const std::vector<int>& ids,
                      int batch) {
  return layers::token_encoder(g, ps, "fl", m, ids, batch);
}

/// F_q + MHA(F_q -> F_kv). `name` selects the direction's projections.
template <class T>
Var<T> cross_attend(Graph<T>& g, ParamStore<T>& ps, const std::string& name, Var<T> f_q, Var<T> f_kv, int batch,
                    int tq, int tk, int heads, std::shared_ptr<const std::vector<std::uint8_t>> allowed = nullptr,
                    BasicArray<T>* probs = nullptr) {
  if (f_q.cols() != f_kv.cols()) throw ShapeError("cross_attend: embedding dims differ");
  return ops::add(f_q, layers::mha(g, ps, name, f_q, f_kv, batch, tq, tk, heads, std::move(allowed), probs));
}

/// Bidirectional cross attention; PAD context tokens are hidden from the vision queries.
template <class T>
FeatureMaps<T> fuse(Graph<T>& g, ParamStore<T>& ps, const ModelConfig& m, Var<T> f_v, Var<T> f_l,
                    const std::vector<int>& ids, int batch, BasicArray<T>* probs_v2l = nullptr,
                    BasicArray<T>* probs_l2v = nullptr) {
  if (f_v.cols() != f_l.cols()) throw ShapeError("fuse: embedding dims differ");
  const int sv = m.vision_cells(), sl = m.context_len;
  FeatureMaps<T> out;
  out.f_v = f_v;
  out.f_l = f_l;
  out.f_v2l = cross_attend(g, ps, "x.v2l", f_v, f_l, batch, sv, sl, m.abstractor_heads,
                           layers::key_mask(ids, batch, sv, sl), probs_v2l);
  out.f_l2v = cross_attend(g, ps, "x.l2v", f_l, f_v, batch, sl, sv, m.abstractor_heads, nullptr, probs_l2v);
  std::vector<int> order;
  order.reserve(static_cast<std::size_t>(batch) * (sv + sl));
  for (int b = 0; b < batch; ++b) {
    for (int i = 0; i < sv; ++i) order.push_back(b * sv + i);
    for (int i = 0; i < sl; ++i) order.push_back(batch * sv + b * sl + i);
  }
  out.f_vl = ops::take_rows(ops::concat_rows<T>({out.f_v2l, out.f_l2v}), order);
  return out;
}

}  // namespace dia
