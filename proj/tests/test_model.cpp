#include <gtest/gtest.h>

#include <cmath>

#include "dia/model.hpp"
#include "dia/numerics/gradcheck.hpp"
#include "dia/synth.hpp"

using namespace dia;

namespace {

ModelConfig small_model() { return default_run_config(1).model; }

Dataset small_data(int n = 12) {
  auto rc = default_run_config(1);
  rc.data.n_train = n;
  rc.data.n_val = 0;
  rc.data.n_test = 0;
  return make_dataset(rc.data);
}

ModalityBatch first_rows(const Dataset& d, int n) {
  std::vector<int> ids;
  for (int i = 0; i < n; ++i) ids.push_back(i);
  return d.batch(ids);
}

ArrayD randn(int r, int c, std::uint64_t seed, double s = 1.0) {
  CounterRng rng(seed);
  ArrayD a = ArrayD::matrix(r, c);
  for (auto& v : a.values()) v = s * rng.normal();
  return a;
}

void zero_params(ParamStoreD& ps, const std::string& prefix, const std::string& suffix) {
  for (auto& [name, p] : ps)
    if (name.rfind(prefix, 0) == 0 && name.size() >= suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
      for (auto& v : ps.at(name).value.values()) v = 0;
}

}  // namespace

TEST(Fusion, ZeroImageGivesZeroFeatures) {
  auto m = small_model();
  ParamStoreD ps;
  init_fusion(ps, m, 3);
  GraphD g;
  auto f = extract_vision_features(g, ps, m, g.constant(ArrayD::matrix(2, 256)), 2);
  EXPECT_EQ(f.rows(), 2 * 4);
  EXPECT_EQ(f.cols(), m.embed_dim);
  for (double v : f.value().values()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(extract_vision_features(g, ps, m, g.constant(ArrayD::matrix(2, 255)), 2), ShapeError);
}

TEST(Fusion, ShiftByStrideShiftsCells) {
  // 2x2 cell grid with 8-pixel receptive fields: moving the image content by one cell
  // moves the pre-attention features by one cell
  auto m = small_model();
  ParamStoreD ps;
  init_fusion(ps, m, 3);
  ArrayD img = ArrayD::matrix(1, 256);
  CounterRng rng(2);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) img.at(0, y * 16 + x) = rng.uniform();
  ArrayD shifted = ArrayD::matrix(1, 256);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) shifted.at(0, y * 16 + x + 8) = img.at(0, y * 16 + x);
  GraphD g;
  auto a = layers::conv_stack(g, ps, "fv.conv", m, g.constant(img), 1).value();
  auto b = layers::conv_stack(g, ps, "fv.conv", m, g.constant(shifted), 1).value();
  for (int c = 0; c < m.embed_dim; ++c) {
    EXPECT_NEAR(a.at(0, c), b.at(1, c), 1e-12);
    EXPECT_NEAR(a.at(1, c), b.at(0, c), 1e-12);
  }
}

TEST(Fusion, CrossAttendSingleKey) {
  auto m = small_model();
  ParamStoreD ps;
  layers::init_mha(ps, "x", 4, 1);
  GraphD g;
  auto q = g.constant(randn(2, 4, 5));
  auto kv = g.constant(randn(1, 4, 6));
  auto out = cross_attend(g, ps, "x", q, kv, 1, 2, 1, 2, nullptr).value();
  // single key: weight 1, so output = q + (kv Wv) Wo
  auto vproj = ops::matmul(ops::matmul(kv, g.param(ps, "x.v.w")), g.param(ps, "x.o.w")).value();
  for (int i = 0; i < 2; ++i)
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(out.at(i, c), q.value().at(i, c) + vproj.at(0, c), 1e-12);
}

TEST(Fusion, CrossAttendMatchesDirectEvaluation) {
  ParamStoreD ps;
  layers::init_mha(ps, "x", 4, 9);
  GraphD g;
  ArrayD fq = randn(2, 4, 10), fkv = randn(3, 4, 11);
  auto out = cross_attend(g, ps, "x", g.constant(fq), g.constant(fkv), 1, 2, 3, 1, nullptr).value();
  auto W = [&](const char* n) { return ps.at(std::string("x.") + n + ".w").value; };
  auto mm = [](const ArrayD& a, const ArrayD& b) {
    ArrayD c = ArrayD::matrix(a.rows(), b.cols());
    for (int i = 0; i < a.rows(); ++i)
      for (int j = 0; j < b.cols(); ++j)
        for (int k = 0; k < a.cols(); ++k) c.at(i, j) += a.at(i, k) * b.at(k, j);
    return c;
  };
  ArrayD q = mm(fq, W("q")), k = mm(fkv, W("k")), v = mm(fkv, W("v"));
  ArrayD att = ArrayD::matrix(2, 4);
  for (int i = 0; i < 2; ++i) {
    double s[3], mx = -1e300, z = 0;
    for (int j = 0; j < 3; ++j) {
      s[j] = 0;
      for (int c = 0; c < 4; ++c) s[j] += q.at(i, c) * k.at(j, c) / 2.0;
      mx = std::max(mx, s[j]);
    }
    for (double& x : s) z += (x = std::exp(x - mx));
    for (int j = 0; j < 3; ++j)
      for (int c = 0; c < 4; ++c) att.at(i, c) += s[j] / z * v.at(j, c);
  }
  ArrayD o = mm(att, W("o"));
  for (int i = 0; i < 2; ++i)
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(out.at(i, c), fq.at(i, c) + o.at(i, c), 1e-12);
}

TEST(Fusion, ZeroValueProjectionIsConcatenation) {
  auto m = small_model();
  ParamStoreD ps;
  init_fusion(ps, m, 4);
  zero_params(ps, "x.", ".v.w");
  GraphD g;
  auto d = small_data(4);
  auto b = first_rows(d, 2);
  auto fv = g.constant(randn(2 * 4, m.embed_dim, 1));
  auto fl = g.constant(randn(2 * m.context_len, m.embed_dim, 2));
  auto f = fuse(g, ps, m, fv, fl, b.contexts, 2);
  EXPECT_EQ(f.f_vl.rows(), 2 * (4 + m.context_len));
  const int per = 4 + m.context_len;
  for (int s = 0; s < 2; ++s) {
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < m.embed_dim; ++c)
        EXPECT_EQ(f.f_vl.value().at(s * per + r, c), fv.value().at(s * 4 + r, c));
    for (int r = 0; r < m.context_len; ++r)
      for (int c = 0; c < m.embed_dim; ++c)
        EXPECT_EQ(f.f_vl.value().at(s * per + 4 + r, c), fl.value().at(s * m.context_len + r, c));
  }
}

TEST(Fusion, AllPadContextStaysFinite) {
  auto m = small_model();
  ParamStoreD ps;
  init_fusion(ps, m, 4);
  GraphD g;
  std::vector<int> pads(static_cast<std::size_t>(m.context_len), tokens::kPad);
  auto f = encode_context(g, ps, m, pads, 1);
  EXPECT_TRUE(f.value().all_finite());
  // every PAD row sees only itself and starts from the same embedding, positions differ
  std::vector<int> bad = pads;
  bad[0] = m.context_vocab;
  EXPECT_THROW(encode_context(g, ps, m, bad, 1), ConfigError);
}

TEST(Vlvae, ZeroImageZeroBiasGivesZeroMean) {
  auto m = small_model();
  ParamStoreD ps;
  init_vlvae(ps, m, 2);
  GraphD g;
  auto q = encode_vision_latent(g, ps, m, g.constant(ArrayD::matrix(3, 256)), 3);
  for (double v : q.mu.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(Vlvae, LogSigmaClamped) {
  auto m = small_model();
  GraphD g;
  ArrayD raw = ArrayD::matrix(1, 4);
  raw.at(0, 2) = 10;
  raw.at(0, 3) = -10;
  auto q = gaussian_head(g.constant(raw), m);
  EXPECT_EQ(q.log_sigma.value().at(0, 0), 2.0);
  EXPECT_EQ(q.log_sigma.value().at(0, 1), -6.0);
}

TEST(Vlvae, HardMaskAndEqualLogits) {
  auto m = small_model();
  ParamStoreD ps;
  init_vlvae(ps, m, 2);
  zero_params(ps, "moe.router", ".w");
  GraphD g;
  auto pv = g.constant(randn(2, m.embed_dim, 1));
  auto pl = g.constant(randn(2, m.embed_dim, 2));
  auto rin = g.constant(randn(2, 2 * m.embed_dim, 3));
  Var<double> soft;
  auto q = shared_posterior(g, ps, m, pv, pl, rin, {1, 0}, &soft);
  EXPECT_NEAR(q.pi.value().at(0, 0), 0.5, 1e-15);
  EXPECT_EQ(q.pi.value().at(1, 0), 1.0);
  EXPECT_EQ(q.pi.value().at(1, 1), 0.0);
  EXPECT_NEAR(soft.value().at(1, 1), 0.5, 1e-15);
}

TEST(Vlvae, MixtureMoments) {
  // experts N(0,1), N(2,1), pi = (0.5, 0.5): categorical mixture mean 1, variance 2
  const int n = 100000;
  GraphD g;
  MoEPosterior<double> q;
  q.expert_v = {g.constant(ArrayD::matrix(n, 1, 0.0)), g.constant(ArrayD::matrix(n, 1, 0.0))};
  q.expert_l = {g.constant(ArrayD::matrix(n, 1, 2.0)), g.constant(ArrayD::matrix(n, 1, 0.0))};
  ArrayD pi = ArrayD::matrix(n, 2, 0.5);
  q.pi = g.constant(pi);
  CounterRng pick(7);
  auto z = sample_shared_categorical(g, q, randn(n, 1, 1), randn(n, 1, 2), pick).value();
  double m1 = 0, m2 = 0;
  for (double v : z.values()) m1 += v / n;
  for (double v : z.values()) m2 += (v - m1) * (v - m1) / n;
  EXPECT_NEAR(m1, 1.0, 4 * std::sqrt(2.0 / n));
  EXPECT_NEAR(m2, 2.0, 0.05);
  // stratified sample mean converges to pi_V mu_V + pi_L mu_L
  auto zs = sample_shared(g, q, randn(n, 1, 3), randn(n, 1, 4)).value();
  double ms = 0;
  for (double v : zs.values()) ms += v / n;
  EXPECT_NEAR(ms, 1.0, 4 * std::sqrt(0.5 / n));
}

TEST(Vlvae, ReparameterizationFixedNoise) {
  GraphD g;
  LatentGaussian<double> q{g.constant(ArrayD::matrix(1, 2)), g.constant(ArrayD::matrix(1, 2, std::log(2.0)))};
  auto z = reparameterize(g, q, ArrayD::matrix(1, 2, 1.0)).value();
  EXPECT_NEAR(z.at(0, 0), 2.0, 1e-15);
  EXPECT_NEAR(z.at(0, 1), 2.0, 1e-15);
}

TEST(Vlvae, ZeroLatentDecodesToZeroImage) {
  auto m = small_model();
  ParamStoreD ps;
  init_vlvae(ps, m, 2);
  GraphD g;
  auto v = decode_vision(g, ps, m, g.constant(ArrayD::matrix(2, m.latent_dim)));
  EXPECT_EQ(v.rows(), 2);
  EXPECT_EQ(v.cols(), 256);
  for (double x : v.value().values()) EXPECT_EQ(x, 0.0);
  auto l = decode_language(g, ps, m, g.constant(ArrayD::matrix(2, m.latent_dim)));
  EXPECT_EQ(l.rows(), 2 * m.context_len);
  EXPECT_EQ(l.cols(), m.context_vocab);
}

TEST(Model, ForwardShapesAndFiniteLoss) {
  auto rc = default_run_config(1);
  auto& m = rc.model;
  ParamStoreD ps;
  init_model(ps, m, 5);
  auto d = small_data();
  auto b = first_rows(d, 4);
  strip_context(b, 1);
  CounterRng rng(3);
  auto noise = StepNoise<double>::draw(m, 4, rng);
  GraphD g;
  auto r = forward(g, ps, m, b, &noise);
  EXPECT_EQ(r.features.f_vl.rows(), 4 * (4 + m.context_len));
  EXPECT_EQ(r.memory.rows(), 4 * memory_rows(m));
  EXPECT_EQ(r.report_logits.rows(), 4 * (m.report_len - 1));
  EXPECT_EQ(r.pi.value().at(1, 1), 0.0);
  for (int c = 0; c < m.latent_dim; ++c) EXPECT_EQ(r.z_l.value().at(1, c), 0.0);
  auto loss = compute_loss(g, r, m, rc.train, b, &noise);
  EXPECT_TRUE(loss.breakdown.finite());
  EXPECT_NEAR(loss.total.item(), loss.breakdown.total, 1e-9 * std::abs(loss.breakdown.total));
  EXPECT_GT(loss.breakdown.router, 0.0);
  g.backward(loss.total);
}

TEST(Model, ZeroLambdasSkipTerms) {
  auto rc = default_run_config(1);
  rc.train.lambda1 = rc.train.lambda2 = 0;
  ParamStoreD ps;
  init_model(ps, rc.model, 5);
  auto b = first_rows(small_data(), 4);
  CounterRng rng(3);
  auto noise = StepNoise<double>::draw(rc.model, 4, rng);
  GraphD g;
  auto r = forward(g, ps, rc.model, b, &noise);
  auto loss = compute_loss(g, r, rc.model, rc.train, b, &noise);
  EXPECT_EQ(loss.breakdown.orth, 0.0);
  EXPECT_EQ(loss.breakdown.align, 0.0);
  EXPECT_NEAR(loss.breakdown.total, loss.breakdown.ce - loss.breakdown.elbo(), 1e-9);
}

TEST(Model, VisionPathIgnoresLanguagePresence) {
  auto m = small_model();
  ParamStoreD ps;
  init_model(ps, m, 5);
  auto b = first_rows(small_data(), 3);
  auto stripped = b;
  strip_all_contexts(stripped);
  CounterRng r1(3), r2(3);
  auto n1 = StepNoise<double>::draw(m, 3, r1);
  auto n2 = StepNoise<double>::draw(m, 3, r2);
  GraphD g;
  auto a = forward(g, ps, m, b, &n1);
  auto c = forward(g, ps, m, stripped, &n2);
  EXPECT_EQ(a.z_v.value().values(), c.z_v.value().values());
  EXPECT_EQ(a.v_hat.value().values(), c.v_hat.value().values());
  EXPECT_EQ(a.q_s.expert_v.mu.value().values(), c.q_s.expert_v.mu.value().values());
}

TEST(Model, MarginalElboIsMaskedFullElbo) {
  auto m = small_model();
  ParamStoreD ps;
  init_model(ps, m, 5);
  auto b = first_rows(small_data(), 4);
  strip_context(b, 0);
  strip_context(b, 2);
  CounterRng rng(3);
  auto noise = StepNoise<double>::draw(m, 4, rng);
  GraphD g;
  auto r = forward(g, ps, m, b, &noise);
  auto t = row_terms(g, r, m, b, noise);
  for (int i : {0, 2}) {
    const double full = t.recon_v.value()[i] + t.recon_l.value()[i] - t.kl_v.value()[i] - t.kl_l.value()[i] -
                        t.jsd.value()[i];
    EXPECT_EQ(sample_marginal_elbo(t, r.present, i), full);
    EXPECT_THROW(sample_elbo(t, r.present, i), std::invalid_argument);
  }
  EXPECT_THROW(sample_marginal_elbo(t, r.present, 1), std::invalid_argument);
  EXPECT_NO_THROW(sample_elbo(t, r.present, 3));
}

TEST(Model, ConcatBaselineRuns) {
  auto rc = default_run_config(1);
  rc.model.shared_posterior = "concat";
  ParamStoreD ps;
  init_model(ps, rc.model, 5);
  EXPECT_FALSE(ps.contains("moe.router"));
  auto b = first_rows(small_data(), 4);
  strip_context(b, 0);
  CounterRng rng(3);
  auto noise = StepNoise<double>::draw(rc.model, 4, rng);
  GraphD g;
  auto r = forward(g, ps, rc.model, b, &noise);
  auto loss = compute_loss(g, r, rc.model, rc.train, b, &noise);
  EXPECT_TRUE(loss.breakdown.finite());
  EXPECT_EQ(loss.breakdown.router, 0.0);
}

TEST(Model, NoVaeUsesCeOnly) {
  auto rc = default_run_config(1);
  rc.model.use_vae = false;
  ParamStoreD ps;
  init_model(ps, rc.model, 5);
  EXPECT_FALSE(ps.contains("qv.head.w"));
  auto b = first_rows(small_data(), 2);
  GraphD g;
  auto r = forward<double>(g, ps, rc.model, b, nullptr);
  auto loss = compute_loss<double>(g, r, rc.model, rc.train, b, nullptr);
  EXPECT_EQ(loss.breakdown.total, loss.breakdown.ce);
  EXPECT_EQ(r.memory.rows(), 2 * memory_rows(rc.model));
}

TEST(Model, TotalLossGradCheck) {
  auto rc = default_run_config(1);
  rc.model.jsd_samples = 8;
  ParamStoreD ps;
  init_model(ps, rc.model, 5);
  auto b = first_rows(small_data(), 4);
  strip_context(b, 3);
  CounterRng rng(3);
  auto noise = StepNoise<double>::draw(rc.model, 4, rng);
  auto build = [&](GraphD& g, ParamStoreD& p) {
    auto r = forward(g, p, rc.model, b, &noise);
    return compute_loss(g, r, rc.model, rc.train, b, &noise).total;
  };
  GradCheckOptions o;
  o.step = 1e-3;
  o.max_coords = 3;
  auto recs = grad_check<double>(build, ps, o);
  EXPECT_LE(max_rel_error(recs), 1e-3);
}
