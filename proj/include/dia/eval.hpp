#pragma once

#include <Eigen/Dense>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>

#include "dia/trainer.hpp"

namespace dia {

// ---------------------------------------------------------------- latent statistics

struct CrossCorrelation {
  ArrayD matrix;  // [d_a x d_b] Pearson correlations
  double summary = 0;  // mean |entry|
};

/// Pearson correlation between the columns of a and b (population moments,
/// variance floored at 1e-12 so constant columns give 0).
inline CrossCorrelation cross_correlation(const ArrayD& a, const ArrayD& b) {
  if (a.rows() != b.rows()) throw ShapeError("cross_correlation: row counts differ");
  if (a.rows() < 2) throw ShapeError("cross_correlation: need at least 2 rows");
  const int n = a.rows();
  auto standardize = [n](const ArrayD& z) {
    ArrayD w = z;
    for (int c = 0; c < z.cols(); ++c) {
      double m = 0, v = 0;
      for (int r = 0; r < n; ++r) m += z.at(r, c);
      m /= n;
      for (int r = 0; r < n; ++r) v += (z.at(r, c) - m) * (z.at(r, c) - m);
      const double s = std::sqrt(std::max(v / n, 1e-12));
      for (int r = 0; r < n; ++r) w.at(r, c) = (z.at(r, c) - m) / s;
    }
    return w;
  };
  const ArrayD wa = standardize(a), wb = standardize(b);
  CrossCorrelation out;
  out.matrix = ArrayD::matrix(a.cols(), b.cols());
  double sum = 0;
  for (int i = 0; i < a.cols(); ++i)
    for (int j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (int r = 0; r < n; ++r) s += wa.at(r, i) * wb.at(r, j);
      out.matrix.at(i, j) = s / n;
      sum += std::abs(s / n);
    }
  out.summary = sum / (a.cols() * b.cols());
  return out;
}

inline std::vector<int> seeded_permutation(int n, std::uint64_t seed) {
  std::vector<int> p(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
  CounterRng rng(seed);
  for (std::size_t i = p.size(); i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

/// Ridge regression of y on z (with intercept) fit on a seeded train_frac of the rows;
/// returns the mean over target columns of held-out R^2.
inline double linear_probe(const ArrayD& z, const ArrayD& y, double ridge, double train_frac, std::uint64_t seed) {
  if (z.rows() != y.rows()) throw ShapeError("linear_probe: row counts differ");
  if (!(ridge >= 1e-4)) throw ConfigError("linear_probe: ridge must be >= 1e-4");
  const int n = z.rows(), d = z.cols(), k = y.cols();
  const int n_fit = static_cast<int>(std::floor(train_frac * n));
  if (n_fit < 2 || n - n_fit < 2) throw ShapeError("linear_probe: too few rows for a held-out split");
  const auto perm = seeded_permutation(n, seed);
  Eigen::MatrixXd zf(n_fit, d), yf(n_fit, k), zt(n - n_fit, d), yt(n - n_fit, k);
  for (int i = 0; i < n; ++i) {
    const int r = perm[static_cast<std::size_t>(i)];
    for (int c = 0; c < d; ++c) (i < n_fit ? zf(i, c) : zt(i - n_fit, c)) = z.at(r, c);
    for (int c = 0; c < k; ++c) (i < n_fit ? yf(i, c) : yt(i - n_fit, c)) = y.at(r, c);
  }
  const Eigen::RowVectorXd zm = zf.colwise().mean(), ym = yf.colwise().mean();
  const Eigen::MatrixXd zc = zf.rowwise() - zm, yc = yf.rowwise() - ym;
  Eigen::MatrixXd a = zc.transpose() * zc;
  a.diagonal().array() += ridge * n_fit;
  const Eigen::MatrixXd w = a.ldlt().solve(zc.transpose() * yc);
  const Eigen::MatrixXd pred = ((zt.rowwise() - zm) * w).rowwise() + ym;
  double r2 = 0;
  for (int c = 0; c < k; ++c) {
    const double mean = yt.col(c).mean();
    const double sse = (yt.col(c) - pred.col(c)).squaredNorm();
    const double sst = (yt.col(c).array() - mean).square().sum();
    r2 += sst > 0 ? 1 - sse / sst : 0.0;
  }
  return r2 / k;
}

enum class Critic { cosine, neg_sq_distance };

struct MiEstimate {
  double value = 0;
  double se = 0;  // over disjoint batches
  int batches = 0;
};

/// ln K - InfoNCE with in-batch negatives over disjoint K-row batches of a seeded
/// permutation (leftover rows are dropped). Scores are critic(a_i, b_j) / tau.
inline MiEstimate mi_lower_bound(const ArrayD& zs, const ArrayD& zx, double tau, int k, std::uint64_t seed,
                                 Critic critic = Critic::cosine) {
  if (k < 2) throw ConfigError("mi_lower_bound: K must be >= 2");
  if (!(tau > 0)) throw ConfigError("mi_lower_bound: tau must be positive");
  if (zs.rows() != zx.rows() || zs.cols() != zx.cols()) throw ShapeError("mi_lower_bound: shapes differ");
  const int n = zs.rows(), d = zs.cols();
  const int nb = n / k;
  if (nb < 1) throw ShapeError("mi_lower_bound: fewer rows than K");
  const auto perm = seeded_permutation(n, seed);
  auto row = [d](const ArrayD& z, int r) { return std::vector<double>(z.data() + static_cast<std::size_t>(r) * d, z.data() + static_cast<std::size_t>(r + 1) * d); };
  auto norm = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  std::vector<double> per_batch;
  for (int b = 0; b < nb; ++b) {
    std::vector<std::vector<double>> as, bs;
    for (int i = 0; i < k; ++i) {
      const int r = perm[static_cast<std::size_t>(b * k + i)];
      as.push_back(row(zs, r));
      bs.push_back(row(zx, r));
    }
    if (critic == Critic::cosine)
      for (auto* set : {&as, &bs})
        for (auto& v : *set) {
          const double nv = std::max(norm(v), 1e-12);
          for (double& x : v) x /= nv;
        }
    double loss = 0;
    std::vector<double> s(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < k; ++j) {
        double v = 0;
        for (int c = 0; c < d; ++c) {
          const double x = as[i][c], y = bs[j][c];
          v += critic == Critic::cosine ? x * y : -(x - y) * (x - y);
        }
        s[j] = v / tau;
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (double v : s) z += std::exp(v - mx);
      loss += -(s[i] - mx - std::log(z));
    }
    per_batch.push_back(std::log(static_cast<double>(k)) - loss / k);
  }
  MiEstimate e;
  e.batches = nb;
  for (double v : per_batch) e.value += v / nb;
  if (nb > 1) {
    double var = 0;
    for (double v : per_batch) var += (v - e.value) * (v - e.value);
    e.se = std::sqrt(var / (nb - 1) / nb);
  }
  return e;
}

// ---------------------------------------------------------------- text metrics

/// Sentence BLEU with up to 4-gram clipped precisions, uniform weights, no smoothing.
/// Any zero precision (or a candidate shorter than 4 tokens) gives 0.
inline double bleu4(const std::vector<int>& cand, const std::vector<int>& ref) {
  if (cand.empty()) return 0;
  double log_p = 0;
  for (std::size_t n = 1; n <= 4; ++n) {
    if (cand.size() < n) return 0;
    std::map<std::vector<int>, int> rc;
    if (ref.size() >= n)
      for (std::size_t i = 0; i + n <= ref.size(); ++i) ++rc[std::vector<int>(ref.begin() + i, ref.begin() + i + n)];
    std::map<std::vector<int>, int> cc;
    for (std::size_t i = 0; i + n <= cand.size(); ++i) ++cc[std::vector<int>(cand.begin() + i, cand.begin() + i + n)];
    int match = 0;
    for (const auto& [g, c] : cc) {
      auto it = rc.find(g);
      if (it != rc.end()) match += std::min(c, it->second);
    }
    if (match == 0) return 0;
    log_p += std::log(static_cast<double>(match) / static_cast<double>(cand.size() - n + 1)) / 4;
  }
  const double c = static_cast<double>(cand.size()), r = static_cast<double>(ref.size());
  const double bp = c > r ? 1.0 : std::exp(1 - r / c);
  return bp * std::exp(log_p);
}

inline int lcs_length(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<int> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// ROUGE-L F1 from the longest common subsequence.
inline double rouge_l(const std::vector<int>& cand, const std::vector<int>& ref) {
  if (cand.empty() || ref.empty()) return 0;
  const double l = lcs_length(cand, ref);
  if (l == 0) return 0;
  const double p = l / static_cast<double>(cand.size()), r = l / static_cast<double>(ref.size());
  return 2 * p * r / (p + r);
}

// ---------------------------------------------------------------- model evaluation

/// Posterior-mean latents and router outputs for a set of rows.
struct LatentTable {
  std::vector<int> ids;
  ArrayD z_v, z_l, z_s;  // [n x d_z]
  std::vector<std::uint8_t> present;
  std::vector<double> pi_l, pi_l_soft;
  std::vector<std::vector<int>> generated;  // content tokens, EOS stripped
  double report_ce = 0;
};

inline ModalityBatch maybe_stripped(const Dataset& d, const std::vector<int>& ids, bool strip) {
  auto b = d.batch(ids);
  if (strip) strip_all_contexts(b);
  return b;
}

/// Runs the model with posterior means over `ids`; optionally strips every context and
/// greedily generates reports.
inline LatentTable infer_latents(ParamStore32& ps, const ModelConfig& m, const Dataset& d, const std::vector<int>& ids,
                                 bool strip, bool generate_reports) {
  LatentTable t;
  t.ids = ids;
  const int n = static_cast<int>(ids.size()), dz = m.latent_dim;
  t.z_v = ArrayD::matrix(n, dz);
  t.z_l = ArrayD::matrix(n, dz);
  t.z_s = ArrayD::matrix(n, dz);
  double ce_sum = 0;
  long ce_tokens = 0;
  const int chunk = 50;
  const int mrows = memory_rows(m);
  for (int lo = 0; lo < n; lo += chunk) {
    std::vector<int> part(ids.begin() + lo, ids.begin() + std::min(n, lo + chunk));
    auto b = maybe_stripped(d, part, strip);
    Graph32 g(false);
    ForwardOptions fo;
    fo.use_means = true;
    auto r = forward<float>(g, ps, m, b, nullptr, fo);
    const int tl = b.report_len();
    std::vector<int> targets;
    for (int i = 0; i < b.batch; ++i)
      for (int j = 1; j < tl; ++j) targets.push_back(b.reports[static_cast<std::size_t>(i) * tl + j]);
    int count = 0;
    for (int x : targets) count += x != tokens::kPad;
    ce_sum += report_ce(r.report_logits, targets).item() * count;
    ce_tokens += count;
    for (int i = 0; i < b.batch; ++i) {
      const int row = lo + i;
      t.present.push_back(b.lang_present[static_cast<std::size_t>(i)]);
      if (r.has_latents) {
        for (int c = 0; c < dz; ++c) {
          t.z_v.at(row, c) = r.z_v.value().at(i, c);
          t.z_l.at(row, c) = r.z_l.value().at(i, c);
          t.z_s.at(row, c) = r.z_s.value().at(i, c);
        }
      }
      if (r.has_latents && m.moe()) {
        t.pi_l.push_back(r.pi.value().at(i, 1));
        t.pi_l_soft.push_back(r.pi_soft.value().at(i, 1));
      } else {
        t.pi_l.push_back(std::numeric_limits<double>::quiet_NaN());
        t.pi_l_soft.push_back(std::numeric_limits<double>::quiet_NaN());
      }
      if (generate_reports) {
        BasicArray<float> mem({mrows, m.decoder_dim});
        std::copy_n(r.memory.value().data() + static_cast<std::size_t>(i) * mrows * m.decoder_dim,
                    static_cast<std::size_t>(mrows) * m.decoder_dim, mem.data());
        auto out = generate(ps, m, mem);
        if (!out.empty() && out.back() == tokens::kEos) out.pop_back();
        t.generated.push_back(std::move(out));
      }
    }
  }
  t.report_ce = ce_tokens ? ce_sum / static_cast<double>(ce_tokens) : 0;
  return t;
}

/// Metrics for one test-set condition.
struct ConditionReport {
  std::string condition;
  int n = 0;
  int n_present = 0;
  double cc_sv = 0, cc_sl = 0, cc_vl = 0;
  double probe_shared_zs = 0, probe_shared_zv = 0, probe_shared_zl = 0;
  double leak_vision_zs = 0, leak_language_zs = 0, leak_zs = 0;
  MiEstimate mi_sv, mi_sl;
  double bleu4 = 0, rouge_l = 0;
  double report_ce = 0;
  double shared_token_acc = 0;  // F1 proxy: token accuracy on the shared-factor segment
  double pi_l_absent = 0, pi_l_soft_absent = 0;
  double retention_probe = 1, retention_bleu4 = 1;
};

inline double nan_v() { return std::numeric_limits<double>::quiet_NaN(); }

inline ArrayD take(const ArrayD& a, const std::vector<int>& rows) {
  ArrayD o = ArrayD::matrix(static_cast<int>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int c = 0; c < a.cols(); ++c) o.at(static_cast<int>(i), c) = a.at(rows[i], c);
  return o;
}

inline ConditionReport evaluate_condition(ParamStore32& ps, const RunConfig& rc, const Dataset& d,
                                          const std::vector<int>& ids, bool strip) {
  const auto& m = rc.model;
  const auto& ec = rc.eval;
  ConditionReport rep;
  rep.condition = strip ? "missing_context" : "with_context";
  LatentTable t = infer_latents(ps, m, d, ids, strip, true);
  rep.n = static_cast<int>(ids.size());
  std::vector<int> present_rows, absent_rows;
  for (int i = 0; i < rep.n; ++i) (t.present[static_cast<std::size_t>(i)] ? present_rows : absent_rows).push_back(i);
  rep.n_present = static_cast<int>(present_rows.size());
  const ArrayD shared = d.shared_factors(ids), fv = d.vision_factors(ids), fl = d.language_factors(ids);
  ArrayD specific = ArrayD::matrix(rep.n, fv.cols() + fl.cols());
  for (int i = 0; i < rep.n; ++i) {
    for (int c = 0; c < fv.cols(); ++c) specific.at(i, c) = fv.at(i, c);
    for (int c = 0; c < fl.cols(); ++c) specific.at(i, fv.cols() + c) = fl.at(i, c);
  }
  const std::uint64_t ps_seed = derive_seed(ec.seed, "probe");
  auto probe = [&](const ArrayD& z, const ArrayD& y) { return linear_probe(z, y, ec.ridge, ec.probe_train_frac, ps_seed); };
  const bool enough_present = rep.n_present >= 10;
  if (m.use_vae) {
    rep.cc_sv = cross_correlation(t.z_s, t.z_v).summary;
    rep.cc_sl = enough_present ? cross_correlation(take(t.z_s, present_rows), take(t.z_l, present_rows)).summary : nan_v();
    rep.cc_vl = enough_present ? cross_correlation(take(t.z_v, present_rows), take(t.z_l, present_rows)).summary : nan_v();
    rep.probe_shared_zs = probe(t.z_s, shared);
    rep.probe_shared_zv = probe(t.z_v, shared);
    rep.probe_shared_zl = enough_present ? probe(take(t.z_l, present_rows), take(shared, present_rows)) : nan_v();
    rep.leak_vision_zs = probe(t.z_s, fv);
    rep.leak_language_zs = probe(t.z_s, fl);
    rep.leak_zs = probe(t.z_s, specific);
    const std::uint64_t mi_seed = derive_seed(ec.seed, "mi");
    rep.mi_sv = rep.n >= ec.mi_k ? mi_lower_bound(t.z_s, t.z_v, ec.mi_tau, ec.mi_k, mi_seed) : MiEstimate{nan_v(), 0, 0};
    rep.mi_sl = rep.n_present >= ec.mi_k
                    ? mi_lower_bound(take(t.z_s, present_rows), take(t.z_l, present_rows), ec.mi_tau, ec.mi_k, mi_seed)
                    : MiEstimate{nan_v(), 0, 0};
  } else {
    rep.cc_sv = rep.cc_sl = rep.cc_vl = nan_v();
    rep.probe_shared_zs = rep.probe_shared_zv = rep.probe_shared_zl = nan_v();
    rep.leak_vision_zs = rep.leak_language_zs = rep.leak_zs = nan_v();
    rep.mi_sv = rep.mi_sl = MiEstimate{nan_v(), 0, 0};
  }
  const int seg = 2 * d.config.k_s;
  double bsum = 0, rsum = 0, acc = 0;
  for (int i = 0; i < rep.n; ++i) {
    const auto ref = detokenize(d.batch({ids[static_cast<std::size_t>(i)]}).reports);
    const auto& gen = t.generated[static_cast<std::size_t>(i)];
    bsum += bleu4(gen, ref);
    rsum += rouge_l(gen, ref);
    int hit = 0;
    for (int j = 0; j < seg; ++j)
      hit += j < static_cast<int>(gen.size()) && j < static_cast<int>(ref.size()) &&
             gen[static_cast<std::size_t>(j)] == ref[static_cast<std::size_t>(j)];
    acc += static_cast<double>(hit) / seg;
  }
  rep.bleu4 = bsum / rep.n;
  rep.rouge_l = rsum / rep.n;
  rep.shared_token_acc = acc / rep.n;
  rep.report_ce = t.report_ce;
  double pa = 0, ps_ = 0;
  for (int i : absent_rows) {
    pa += t.pi_l[static_cast<std::size_t>(i)];
    ps_ += t.pi_l_soft[static_cast<std::size_t>(i)];
  }
  rep.pi_l_absent = absent_rows.empty() ? nan_v() : pa / static_cast<double>(absent_rows.size());
  rep.pi_l_soft_absent = absent_rows.empty() ? nan_v() : ps_ / static_cast<double>(absent_rows.size());
  return rep;
}

inline double ratio(double missing, double with) { return missing == with ? 1.0 : missing / with; }

/// Evaluates the test split as-is and with every context replaced by the null sequence.
inline std::pair<ConditionReport, ConditionReport> resilience_eval(ParamStore32& ps, const RunConfig& rc,
                                                                   const Dataset& d) {
  const auto ids = d.indices(Split::test);
  if (ids.size() < 10) throw ConfigError("resilience_eval: test split too small");
  auto with = evaluate_condition(ps, rc, d, ids, false);
  auto missing = evaluate_condition(ps, rc, d, ids, true);
  missing.retention_probe = ratio(missing.probe_shared_zs, with.probe_shared_zs);
  missing.retention_bleu4 = ratio(missing.bleu4, with.bleu4);
  return {with, missing};
}

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string eval_csv_header() {
  return "condition,n,n_present,crosscorr_zs_zv,crosscorr_zs_zl,crosscorr_zv_zl,probe_shared_zs,probe_shared_zv,"
         "probe_shared_zl,leak_vision_zs,leak_language_zs,leak_specific_zs,mi_zs_zv,mi_zs_zv_se,mi_zs_zl,mi_zs_zl_se,"
         "bleu4,rouge_l,report_ce,shared_token_acc,pi_l_absent,pi_l_soft_absent,retention_probe,retention_bleu4";
}

inline std::string eval_csv_row(const ConditionReport& r) {
  std::string s = r.condition + "," + std::to_string(r.n) + "," + std::to_string(r.n_present);
  for (double v : {r.cc_sv, r.cc_sl, r.cc_vl, r.probe_shared_zs, r.probe_shared_zv, r.probe_shared_zl, r.leak_vision_zs,
                   r.leak_language_zs, r.leak_zs, r.mi_sv.value, r.mi_sv.se, r.mi_sl.value, r.mi_sl.se, r.bleu4,
                   r.rouge_l, r.report_ce, r.shared_token_acc, r.pi_l_absent, r.pi_l_soft_absent, r.retention_probe,
                   r.retention_bleu4})
    s += "," + fmt(v);
  return s;
}

inline void write_eval_report(const std::pair<ConditionReport, ConditionReport>& r, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("eval: cannot write " + path.string());
  f << eval_csv_header() << '\n' << eval_csv_row(r.first) << '\n' << eval_csv_row(r.second) << '\n';
}

/// Header: id,split,language_present,z_v_0..,z_l_0..,z_s_0..,s_0..,u_v_0..,u_l_0..
inline std::string latents_csv_header(const ModelConfig& m, const SynthConfig& c) {
  std::string h = "id,split,language_present";
  for (const char* z : {"z_v", "z_l", "z_s"})
    for (int i = 0; i < m.latent_dim; ++i) h += "," + std::string(z) + "_" + std::to_string(i);
  for (int i = 0; i < c.k_s; ++i) h += ",s_" + std::to_string(i);
  for (int i = 0; i < c.k_v; ++i) h += ",u_v_" + std::to_string(i);
  for (int i = 0; i < c.k_l; ++i) h += ",u_l_" + std::to_string(i);
  return h;
}

/// Posterior-mean latents of every sample (all splits, contexts as stored).
inline void export_latents(ParamStore32& ps, const ModelConfig& m, const Dataset& d, const std::filesystem::path& path) {
  if (!m.use_vae) throw ConfigError("export_latents: model has no latent variables");
  std::vector<int> ids(static_cast<std::size_t>(d.n));
  for (int i = 0; i < d.n; ++i) ids[static_cast<std::size_t>(i)] = i;
  auto t = infer_latents(ps, m, d, ids, false, false);
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("export_latents: cannot write " + path.string());
  f << latents_csv_header(m, d.config) << '\n';
  const int nf = d.factors.cols();
  for (int i = 0; i < d.n; ++i) {
    f << i << ',' << split_name(d.split[static_cast<std::size_t>(i)]) << ',' << int(d.lang_present[static_cast<std::size_t>(i)]);
    for (const ArrayD* z : {&t.z_v, &t.z_l, &t.z_s})
      for (int c = 0; c < m.latent_dim; ++c) f << ',' << fmt(z->at(i, c));
    for (int c = 0; c < nf; ++c) f << ',' << fmt(d.factors.at(i, c));
    f << '\n';
  }
}

}  // namespace dia
