#pragma once

#include <cmath>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "dia/config.hpp"
#include "dia/numerics/ops.hpp"
#include "dia/numerics/rng.hpp"

namespace dia {

/// Diagonal Gaussian over one latent factor, one row per sample.
template <class T>
struct LatentGaussian {
  Var<T> mu;         // [B x d]
  Var<T> log_sigma;  // [B x d]
};

/// Two expert Gaussians and mixture weights pi [B x 2] (column 0 = vision).
template <class T>
struct MoEPosterior {
  LatentGaussian<T> expert_v;
  LatentGaussian<T> expert_l;
  Var<T> pi;
};

// ---------------------------------------------------------------- KL

/// 0.5 * sum_d (mu^2 + sigma^2 - 1 - ln sigma^2) per row -> [B x 1].
template <class T>
Var<T> gaussian_kl_rows(Var<T> mu, Var<T> log_sigma) {
  Var<T> var = ops::exp(ops::scale(log_sigma, 2.0));
  Var<T> inner = ops::sub(ops::add(ops::square(mu), var), ops::scale(log_sigma, 2.0));
  return ops::scale(ops::add_scalar(ops::sum_cols(inner), -static_cast<double>(mu.cols())), 0.5);
}

/// Batch-averaged closed-form KL to N(0, I).
template <class T>
Var<T> gaussian_kl(const LatentGaussian<T>& q) {
  return ops::mean_all(gaussian_kl_rows(q.mu, q.log_sigma));
}

// ---------------------------------------------------------------- JSD

namespace jsd_detail {

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;

struct RowResult {
  double value = 0;  // unclamped estimate
  double se = 0;
};

/// Monte-Carlo JSD between the mixture q = sum_k pi_k N(mu_k, sigma_k^2) and N(0, I) for one row.
///
/// q-side: n draws per expert, z = mu_k + sigma_k u, weighted by pi_k (stratified).
/// p-side: n draws z = u from the prior. With w(z) = sigmoid(lq - lp):
///   JSD = ln 2 + 0.5 * (sum_k pi_k mean log w(z_k) + mean log(1 - w(z_p))).
/// Gradients (if g* non-null) are accumulated for the unclamped value, scaled by `up`.
template <class T>
RowResult row(int K, int d, int n, const T* mu, const T* ls, const T* pi, const T* uq, const T* up_noise,
              double up, double* gmu, double* gls, double* gpi) {
  const bool grads = gmu != nullptr;
  std::vector<double> m(static_cast<std::size_t>(K) * d), s(m.size()), lsd(m.size()), p(K), logp(K);
  for (std::size_t i = 0; i < m.size(); ++i) {
    m[i] = mu[i];
    lsd[i] = ls[i];
    s[i] = std::exp(lsd[i]);
  }
  std::vector<double> norm_const(K);
  for (int k = 0; k < K; ++k) {
    p[k] = pi[k];
    logp[k] = p[k] > 0 ? std::log(p[k]) : -std::numeric_limits<double>::infinity();
    double c = -d * kHalfLog2Pi;
    for (int j = 0; j < d; ++j) c -= lsd[static_cast<std::size_t>(k) * d + j];
    norm_const[k] = c;
  }
  std::vector<double> z(d), logn(K), r(K);

  // log N_k(z), lq(z), lp(z), responsibilities
  auto eval = [&](double& lq, double& lp) {
    lp = -d * kHalfLog2Pi;
    for (int j = 0; j < d; ++j) lp -= 0.5 * z[j] * z[j];
    double mx = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) {
      double a = norm_const[k];
      for (int j = 0; j < d; ++j) {
        const double u = (z[j] - m[static_cast<std::size_t>(k) * d + j]) / s[static_cast<std::size_t>(k) * d + j];
        a -= 0.5 * u * u;
      }
      logn[k] = a;
      if (p[k] > 0) mx = std::max(mx, logp[k] + a);
    }
    double acc = 0;
    for (int k = 0; k < K; ++k)
      if (p[k] > 0) acc += std::exp(logp[k] + logn[k] - mx);
    lq = mx + std::log(acc);
    for (int k = 0; k < K; ++k) r[k] = p[k] > 0 ? std::exp(logp[k] + logn[k] - lq) : 0.0;
  };

  double sum_q = 0, sum_p = 0, sp2 = 0;
  std::vector<double> sq(K, 0.0), sq2(K, 0.0);
  for (int k = 0; k < K; ++k) {
    for (int i = 0; i < n; ++i) {
      const T* u = uq + (static_cast<std::size_t>(k) * n + i) * d;
      for (int j = 0; j < d; ++j) z[j] = m[static_cast<std::size_t>(k) * d + j] + s[static_cast<std::size_t>(k) * d + j] * u[j];
      double lq, lp;
      eval(lq, lp);
      const double t = -softplus(lp - lq);  // log w
      sq[k] += t;
      sq2[k] += t * t;
      if (!grads) continue;
      const double w = std::exp(t);
      const double c = 0.5 * up * p[k] / n * (1 - w);
      gpi[k] += 0.5 * up * t / n;
      // d lq / d(pi, mu, log_sigma) at fixed z
      for (int kk = 0; kk < K; ++kk) {
        gpi[kk] += c * std::exp(logn[kk] - lq);
        if (r[kk] == 0) continue;
        for (int j = 0; j < d; ++j) {
          const std::size_t o = static_cast<std::size_t>(kk) * d + j;
          const double uu = (z[j] - m[o]) / s[o];
          gmu[o] += c * r[kk] * uu / s[o];
          gls[o] += c * r[kk] * (uu * uu - 1);
        }
      }
      // pathwise terms through z = mu_k + sigma_k u
      for (int j = 0; j < d; ++j) {
        double dlq = 0;
        for (int kk = 0; kk < K; ++kk) {
          if (r[kk] == 0) continue;
          const std::size_t o = static_cast<std::size_t>(kk) * d + j;
          dlq -= r[kk] * (z[j] - m[o]) / (s[o] * s[o]);
        }
        const double gz = c * (dlq + z[j]);
        const std::size_t o = static_cast<std::size_t>(k) * d + j;
        gmu[o] += gz;
        gls[o] += gz * s[o] * u[j];
      }
    }
  }
  for (int i = 0; i < n; ++i) {
    const T* u = up_noise + static_cast<std::size_t>(i) * d;
    for (int j = 0; j < d; ++j) z[j] = u[j];
    double lq, lp;
    eval(lq, lp);
    const double t = -softplus(lq - lp);  // log(1 - w)
    sum_p += t;
    sp2 += t * t;
    if (!grads) continue;
    const double w = 1 - std::exp(t);
    const double c = -0.5 * up * w / n;
    for (int kk = 0; kk < K; ++kk) {
      gpi[kk] += c * std::exp(logn[kk] - lq);
      if (r[kk] == 0) continue;
      for (int j = 0; j < d; ++j) {
        const std::size_t o = static_cast<std::size_t>(kk) * d + j;
        const double uu = (z[j] - m[o]) / s[o];
        gmu[o] += c * r[kk] * uu / s[o];
        gls[o] += c * r[kk] * (uu * uu - 1);
      }
    }
  }
  RowResult res;
  double var = 0;
  for (int k = 0; k < K; ++k) {
    const double mean = sq[k] / n;
    sum_q += p[k] * mean;
    const double vk = n > 1 ? (sq2[k] / n - mean * mean) * n / (n - 1) : 0.0;
    var += p[k] * p[k] * vk / n;
  }
  const double mp = sum_p / n;
  var += (n > 1 ? (sp2 / n - mp * mp) * n / (n - 1) : 0.0) / n;
  res.value = std::numbers::ln2 + 0.5 * (sum_q + mp);
  res.se = 0.5 * std::sqrt(std::max(0.0, var));
  return res;
}

}  // namespace jsd_detail

/// Noise for the JSD estimator: q-side [B x K*n*d] and p-side [B x n*d] standard normals.
template <class T>
struct JsdNoise {
  BasicArray<T> q;
  BasicArray<T> p;
  int samples = 0;

  static JsdNoise draw(int batch, int experts, int samples, int dim, CounterRng& rng) {
    JsdNoise nz;
    nz.samples = samples;
    nz.q = BasicArray<T>::matrix(batch, experts * samples * dim);
    nz.p = BasicArray<T>::matrix(batch, samples * dim);
    for (auto& v : nz.q.values()) v = static_cast<T>(rng.normal());
    for (auto& v : nz.p.values()) v = static_cast<T>(rng.normal());
    return nz;
  }
};

/// Per-row Monte-Carlo JSD(q_s || N(0, I)) clamped at 0 -> [B x 1].
/// mu, log_sigma are [B x K*d] (expert-major), pi is [B x K].
template <class T>
Var<T> jsd_mixture_prior(Var<T> mu, Var<T> log_sigma, Var<T> pi, const JsdNoise<T>& noise) {
  const int b = mu.rows(), K = pi.cols();
  if (mu.cols() % K != 0 || log_sigma.rows() != b || log_sigma.cols() != mu.cols() || pi.rows() != b)
    throw ShapeError("jsd: inconsistent posterior shapes");
  const int d = mu.cols() / K, n = noise.samples;
  if (n < 1) throw std::invalid_argument("jsd: need at least one sample");
  if (noise.q.rows() != b || noise.q.cols() != K * n * d || noise.p.cols() != n * d)
    throw ShapeError("jsd: noise shape");
  BasicArray<T> out = BasicArray<T>::matrix(b, 1);
  auto clamped = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(b), 0);
  for (int i = 0; i < b; ++i) {
    auto r = jsd_detail::row<T>(K, d, n, mu.value().data() + static_cast<std::size_t>(i) * K * d,
                                log_sigma.value().data() + static_cast<std::size_t>(i) * K * d,
                                pi.value().data() + static_cast<std::size_t>(i) * K,
                                noise.q.data() + static_cast<std::size_t>(i) * K * n * d,
                                noise.p.data() + static_cast<std::size_t>(i) * n * d, 0, nullptr, nullptr, nullptr);
    (*clamped)[static_cast<std::size_t>(i)] = r.value < 0;
    out[static_cast<std::size_t>(i)] = static_cast<T>(std::max(0.0, r.value));
  }
  auto nq = std::make_shared<BasicArray<T>>(noise.q);
  auto np = std::make_shared<BasicArray<T>>(noise.p);
  return mu.g->push(std::move(out), {mu, log_sigma, pi},
                    [mu, log_sigma, pi, nq, np, clamped, K, d, n, b](Graph<T>& g, const BasicArray<T>& go) {
                      std::vector<double> gm(static_cast<std::size_t>(K) * d), gl(gm.size()), gp(K);
                      for (int i = 0; i < b; ++i) {
                        if ((*clamped)[static_cast<std::size_t>(i)] || go[static_cast<std::size_t>(i)] == 0) continue;
                        std::fill(gm.begin(), gm.end(), 0.0);
                        std::fill(gl.begin(), gl.end(), 0.0);
                        std::fill(gp.begin(), gp.end(), 0.0);
                        jsd_detail::row<T>(K, d, n, g.value(mu).data() + static_cast<std::size_t>(i) * K * d,
                                           g.value(log_sigma).data() + static_cast<std::size_t>(i) * K * d,
                                           g.value(pi).data() + static_cast<std::size_t>(i) * K,
                                           nq->data() + static_cast<std::size_t>(i) * K * n * d,
                                           np->data() + static_cast<std::size_t>(i) * n * d,
                                           static_cast<double>(go[static_cast<std::size_t>(i)]), gm.data(), gl.data(),
                                           gp.data());
                        const std::size_t o = static_cast<std::size_t>(i) * K * d;
                        if (g.needs(mu)) {
                          auto& gmu = g.grad(mu);
                          for (std::size_t j = 0; j < gm.size(); ++j) gmu[o + j] += static_cast<T>(gm[j]);
                        }
                        if (g.needs(log_sigma)) {
                          auto& gls = g.grad(log_sigma);
                          for (std::size_t j = 0; j < gl.size(); ++j) gls[o + j] += static_cast<T>(gl[j]);
                        }
                        if (g.needs(pi)) {
                          auto& gpi = g.grad(pi);
                          for (int k = 0; k < K; ++k) gpi[static_cast<std::size_t>(i) * K + k] += static_cast<T>(gp[k]);
                        }
                      }
                    });
}

/// Standalone estimate with its Monte-Carlo standard error (double precision, for oracles and diagnostics).
struct JsdEstimate {
  double value = 0;  // clamped at 0
  double raw = 0;
  double se = 0;
};

inline JsdEstimate jsd_mixture_prior_mc(const std::vector<std::vector<double>>& mus,
                                        const std::vector<std::vector<double>>& log_sigmas,
                                        const std::vector<double>& pis, int n, CounterRng& rng) {
  const int K = static_cast<int>(pis.size());
  if (K < 1 || mus.size() != pis.size() || log_sigmas.size() != pis.size()) throw ShapeError("jsd: expert count");
  const int d = static_cast<int>(mus[0].size());
  std::vector<double> mu, ls;
  for (int k = 0; k < K; ++k) {
    if (static_cast<int>(mus[k].size()) != d || static_cast<int>(log_sigmas[k].size()) != d)
      throw ShapeError("jsd: expert dims differ");
    mu.insert(mu.end(), mus[k].begin(), mus[k].end());
    ls.insert(ls.end(), log_sigmas[k].begin(), log_sigmas[k].end());
  }
  std::vector<double> uq(static_cast<std::size_t>(K) * n * d), up(static_cast<std::size_t>(n) * d);
  for (auto& v : uq) v = rng.normal();
  for (auto& v : up) v = rng.normal();
  auto r = jsd_detail::row<double>(K, d, n, mu.data(), ls.data(), pis.data(), uq.data(), up.data(), 0, nullptr,
                                   nullptr, nullptr);
  return {std::max(0.0, r.value), r.value, r.se};
}

// ---------------------------------------------------------------- disentanglement

/// Per-dimension standardization over the batch, eps = 1e-5, population variance.
template <class T>
Var<T> whiten(Var<T> z, double eps = 1e-5) {
  if (z.rows() < 2) throw ShapeError("whiten: batch size must be >= 2, got " + std::to_string(z.rows()));
  return ops::batch_whiten(z, eps);
}

/// ||A^T B / n||_F^2 for whitened A, B with the same row count.
template <class T>
Var<T> cross_cov_sq(Var<T> a, Var<T> b) {
  if (a.rows() != b.rows()) throw ShapeError("orth: batch mismatch");
  return ops::sum_all(ops::square(ops::scale(ops::matmul_tn(a, b), 1.0 / a.rows())));
}

/// Orthogonality loss on already whitened latents.
template <class T>
Var<T> orth_loss(Var<T> ws, Var<T> wv, Var<T> wl) {
  return ops::add(ops::add(cross_cov_sq(ws, wv), cross_cov_sq(ws, wl)), cross_cov_sq(wv, wl));
}

/// Orthogonality term for a mixed batch: pairs involving z_l use only language-present
/// rows (each pair whitened over the rows it uses) and vanish with fewer than two such rows.
template <class T>
Var<T> orth_term(Var<T> zs, Var<T> zv, Var<T> zl, const std::vector<std::uint8_t>& present) {
  Var<T> out = cross_cov_sq(whiten(zs), whiten(zv));
  std::vector<int> rows;
  for (std::size_t i = 0; i < present.size(); ++i)
    if (present[i]) rows.push_back(static_cast<int>(i));
  if (rows.size() < 2) return out;
  const bool all = rows.size() == present.size();
  Var<T> ps = all ? zs : ops::take_rows(zs, rows);
  Var<T> pv = all ? zv : ops::take_rows(zv, rows);
  Var<T> pl = all ? zl : ops::take_rows(zl, rows);
  Var<T> wl = whiten(pl);
  return ops::add(out, ops::add(cross_cov_sq(whiten(ps), wl), cross_cov_sq(whiten(pv), wl)));
}

// ---------------------------------------------------------------- alignment

/// Per-row literal two-candidate InfoNCE: anchor z_s, candidates {z_v, z_l}, cosine / tau,
/// one term with z_v as positive and one with z_l. Returns [B x 1].
template <class T>
Var<T> align_rows(Var<T> zs, Var<T> zv, Var<T> zl, double tau) {
  if (!(tau > 0)) throw std::invalid_argument("align: tau must be positive");
  Var<T> c = ops::scale(ops::concat_cols<T>({ops::cosine_rows(zs, zv), ops::cosine_rows(zs, zl)}), 1.0 / tau);
  return ops::neg(ops::sum_cols(ops::log_softmax_rows(c)));
}

/// Rows scaled to unit L2 norm (zero rows stay zero).
template <class T>
Var<T> unit_rows(Var<T> z) {
  return ops::scale(ops::rms_norm_rows(z, 1e-24), 1.0 / std::sqrt(static_cast<double>(z.cols())));
}

/// In-batch variant: for anchor i the candidates are all z_v (resp. z_l) rows of the batch.
template <class T>
Var<T> align_in_batch(Var<T> zs, Var<T> zv, Var<T> zl, double tau) {
  if (!(tau > 0)) throw std::invalid_argument("align: tau must be positive");
  const int n = zs.rows();
  std::vector<int> diag(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) diag[static_cast<std::size_t>(i)] = i;
  Var<T> us = unit_rows(zs);
  auto term = [&](Var<T> zx) {
    Var<T> logits = ops::scale(ops::matmul_nt(us, unit_rows(zx)), 1.0 / tau);
    return ops::neg(ops::pick(ops::log_softmax_rows(logits), diag));
  };
  return ops::add(term(zv), term(zl));
}

/// Batch-averaged alignment over language-present rows (0 when none).
template <class T>
Var<T> align_term(Var<T> zs, Var<T> zv, Var<T> zl, double tau, const std::vector<std::uint8_t>& present,
                  bool in_batch) {
  if (!(tau > 0)) throw std::invalid_argument("align: tau must be positive");
  std::vector<int> rows;
  for (std::size_t i = 0; i < present.size(); ++i)
    if (present[i]) rows.push_back(static_cast<int>(i));
  if (rows.empty()) return zs.g->constant(BasicArray<T>::scalar(T(0)));
  const bool all = rows.size() == present.size();
  Var<T> s = all ? zs : ops::take_rows(zs, rows);
  Var<T> v = all ? zv : ops::take_rows(zv, rows);
  Var<T> l = all ? zl : ops::take_rows(zl, rows);
  if (in_batch && rows.size() >= 2) return ops::mean_all(align_in_batch(s, v, l, tau));
  return ops::mean_all(align_rows(s, v, l, tau));
}

// ---------------------------------------------------------------- report cross-entropy

/// Mean token NLL over non-PAD targets. logits [N x V], targets [N].
template <class T>
Var<T> report_ce(Var<T> logits, const std::vector<int>& targets) {
  if (targets.size() != static_cast<std::size_t>(logits.rows())) throw ShapeError("report_ce: target count");
  const int vocab = logits.cols();
  int count = 0;
  for (int t : targets) {
    if (t < 0 || t >= vocab) throw ShapeError("report_ce: target id " + std::to_string(t) + " >= vocab");
    count += t != tokens::kPad;
  }
  BasicArray<T> w = BasicArray<T>::matrix(logits.rows(), 1);
  if (count > 0)
    for (std::size_t i = 0; i < targets.size(); ++i)
      if (targets[i] != tokens::kPad) w[i] = static_cast<T>(-1.0 / count);
  return ops::sum_all(ops::mul(ops::pick(ops::log_softmax_rows(logits), targets), logits.g->constant(std::move(w))));
}

// ---------------------------------------------------------------- breakdown

/// Per-step loss terms (batch means). elbo = recon_v + recon_l - kl_v - kl_l - jsd_s.
struct LossBreakdown {
  double recon_v = 0;
  double recon_l = 0;
  double kl_v = 0;
  double kl_l = 0;
  double jsd_s = 0;
  double orth = 0;
  double align = 0;
  double ce = 0;
  double router = 0;
  double total = 0;
  double lambda1 = 0;
  double lambda2 = 0;
  double tau = 0;

  double elbo() const { return recon_v + recon_l - kl_v - kl_l - jsd_s; }
  bool finite() const {
    for (double v : {recon_v, recon_l, kl_v, kl_l, jsd_s, orth, align, ce, router, total})
      if (!std::isfinite(v)) return false;
    return true;
  }

  static std::string csv_header() { return "step,total,ce,recon_V,recon_L,kl_v,kl_l,jsd_s,orth,align,router"; }
  std::string csv_row(long step) const {
    std::ostringstream os;
    os.precision(9);
    os << step << ',' << total << ',' << ce << ',' << recon_v << ',' << recon_l << ',' << kl_v << ',' << kl_l << ','
       << jsd_s << ',' << orth << ',' << align << ',' << router;
    return os.str();
  }
  std::string describe() const {
    std::ostringstream os;
    os << "total=" << total << " ce=" << ce << " recon_V=" << recon_v << " recon_L=" << recon_l << " kl_v=" << kl_v
       << " kl_l=" << kl_l << " jsd_s=" << jsd_s << " orth=" << orth << " align=" << align << " router=" << router;
    return os.str();
  }
};

/// total = ce - elbo + lambda1 * orth + lambda2 * align (+ router supervision).
inline double total_loss(LossBreakdown& b, double lambda1, double lambda2) {
  b.lambda1 = lambda1;
  b.lambda2 = lambda2;
  b.total = b.ce - b.elbo() + lambda1 * b.orth + lambda2 * b.align + b.router;
  return b.total;
}

}  // namespace dia
