#include <gtest/gtest.h>

#include <cmath>

#include "dia/losses.hpp"
#include "dia/numerics/gradcheck.hpp"

using namespace dia;

namespace {

BasicArray<double> mat(int r, int c, std::vector<double> v) { return BasicArray<double>({r, c}, std::move(v)); }

double kl_of(double mu, double sigma) {
  GraphD g;
  return gaussian_kl<double>({g.constant(mat(1, 1, {mu})), g.constant(mat(1, 1, {std::log(sigma)}))}).item();
}

}  // namespace

TEST(Kl, ClosedFormExamples) {
  EXPECT_NEAR(kl_of(0, 1), 0.0, 1e-12);
  EXPECT_NEAR(kl_of(1, 1), 0.5, 1e-12);
  EXPECT_NEAR(kl_of(0, 2), 0.8068528194400547, 1e-12);
}

TEST(Kl, SumsDimsAveragesBatch) {
  GraphD g;
  auto mu = g.constant(mat(2, 2, {1, 0, 0, 0}));
  auto ls = g.constant(mat(2, 2, {0, 0, 0, std::log(2.0)}));
  EXPECT_NEAR(gaussian_kl<double>({mu, ls}).item(), (0.5 + 0.8068528194400547) / 2, 1e-12);
}

TEST(Jsd, IdenticalDistributionsNearZero) {
  CounterRng rng(11);
  auto e = jsd_mixture_prior_mc({{0.0, 0.0}, {0.0, 0.0}}, {{0.0, 0.0}, {0.0, 0.0}}, {0.3, 0.7}, 20000, rng);
  EXPECT_LE(std::abs(e.raw), 3 * e.se + 1e-12);
  EXPECT_GE(e.value, 0.0);
}

TEST(Jsd, BoundedByLn2) {
  CounterRng rng(5);
  auto e = jsd_mixture_prior_mc({{9.0}, {-9.0}}, {{-2.0}, {-2.0}}, {0.5, 0.5}, 20000, rng);
  EXPECT_LE(e.value, std::log(2.0) + 3 * e.se);
}

TEST(Jsd, FarGaussianMatchesQuadrature) {
  // JSD(N(5,1), N(0,1)) by adaptive quadrature = 0.675942577
  CounterRng rng(3);
  auto e = jsd_mixture_prior_mc({{5.0}}, {{0.0}}, {1.0}, 200000, rng);
  EXPECT_NEAR(e.value, 0.675942577, 4 * e.se + 1e-4);
}

TEST(Jsd, BatchOpMatchesStandalone) {
  CounterRng rng(9);
  auto noise = JsdNoise<double>::draw(1, 2, 64, 2, rng);
  GraphD g;
  auto v = jsd_mixture_prior(g.constant(mat(1, 4, {0.5, -0.2, 1.0, 0.3})), g.constant(mat(1, 4, {-0.3, 0.1, 0.2, -0.5})),
                             g.constant(mat(1, 2, {0.4, 0.6})), noise);
  CounterRng rng2(9);
  auto e = jsd_mixture_prior_mc({{0.5, -0.2}, {1.0, 0.3}}, {{-0.3, 0.1}, {0.2, -0.5}}, {0.4, 0.6}, 64, rng2);
  EXPECT_NEAR(v.item(), e.value, 1e-12);
}

TEST(Jsd, GradientsMatchFiniteDifferences) {
  CounterRng rng(21);
  auto noise = JsdNoise<double>::draw(2, 2, 16, 2, rng);
  ParamStoreD ps;
  ps.add("mu", mat(2, 4, {0.5, -0.2, 1.0, 0.3, -1.0, 0.4, 0.1, 0.2}), true);
  ps.add("ls", mat(2, 4, {-0.3, 0.1, 0.2, -0.5, 0.0, -0.2, 0.3, 0.1}), true);
  ps.add("logit", mat(2, 2, {0.2, -0.1, 0.5, 0.3}), true);
  auto build = [&](GraphD& g, ParamStoreD& ps) {
    auto pi = ops::softmax_rows(g.param(ps, "logit"));
    return ops::sum_all(jsd_mixture_prior(g.param(ps, "mu"), g.param(ps, "ls"), pi, noise));
  };
  GradCheckOptions o;
  o.step = 1e-5;
  auto recs = grad_check<double>(build, ps, o);
  EXPECT_LE(max_rel_error(recs), 1e-6);
}

TEST(Whiten, Examples) {
  GraphD g;
  auto w = whiten(g.constant(mat(2, 2, {3, 1, 3, -1}))).value();
  EXPECT_EQ(w.at(0, 0), 0.0);
  EXPECT_EQ(w.at(1, 0), 0.0);
  EXPECT_NEAR(w.at(0, 1), 1.0, 1e-5);
  EXPECT_NEAR(w.at(1, 1), -1.0, 1e-5);
  EXPECT_THROW(whiten(g.constant(mat(1, 2, {1, 2}))), ShapeError);
}

TEST(Whiten, RandomMoments) {
  CounterRng rng(4);
  BasicArray<double> z = BasicArray<double>::matrix(8, 3);
  for (auto& v : z.values()) v = 3 * rng.normal() + 1;
  GraphD g;
  auto w = whiten(g.constant(z)).value();
  for (int c = 0; c < 3; ++c) {
    double m = 0, s = 0;
    for (int r = 0; r < 8; ++r) m += w.at(r, c) / 8;
    for (int r = 0; r < 8; ++r) s += (w.at(r, c) - m) * (w.at(r, c) - m) / 8;
    EXPECT_LE(std::abs(m), 1e-6);
    EXPECT_NEAR(s, 1.0, 1e-4);
  }
}

TEST(Orth, Examples) {
  GraphD g;
  auto zs = whiten(g.constant(mat(4, 1, {1, -1, 1, -1})));
  auto zv = whiten(g.constant(mat(4, 1, {1, 1, -1, -1})));
  auto zl = whiten(g.constant(mat(4, 1, {1, -1, -1, 1})));
  EXPECT_NEAR(orth_loss(zs, zv, zl).item(), 0.0, 1e-12);
  auto a = whiten(g.constant(mat(2, 1, {1, -1})));
  // each cross-covariance is 1/(1+eps)
  EXPECT_NEAR(orth_loss(a, a, a).item(), 2.9999400009, 1e-9);
}

TEST(Orth, PermutationInvariant) {
  CounterRng rng(8);
  auto rnd = [&] {
    BasicArray<double> z = BasicArray<double>::matrix(5, 2);
    for (auto& v : z.values()) v = rng.normal();
    return z;
  };
  auto s = rnd(), v = rnd(), l = rnd();
  std::vector<int> perm = {3, 0, 4, 1, 2};
  GraphD g;
  auto base = orth_term(g.constant(s), g.constant(v), g.constant(l), {1, 1, 1, 1, 1}).item();
  auto p = [&](const BasicArray<double>& z) { return ops::take_rows(g.constant(z), perm); };
  EXPECT_NEAR(orth_term(p(s), p(v), p(l), {1, 1, 1, 1, 1}).item(), base, 1e-12);
}

TEST(Align, Examples) {
  GraphD g;
  auto zs = g.constant(mat(1, 2, {1, 0}));
  auto same = g.constant(mat(1, 2, {0.6, 0.8}));
  EXPECT_NEAR(align_rows(zs, same, same, 0.07).item(), 2 * std::log(2.0), 1e-12);
  auto zv = g.constant(mat(1, 2, {2, 0}));
  auto zl = g.constant(mat(1, 2, {-3, 0}));
  EXPECT_NEAR(align_rows(zs, zv, zl, 1.0).item(), 2.2538560220859454, 1e-12);
  // rescaling any latent leaves cosine similarities unchanged
  EXPECT_NEAR(align_rows(ops::scale(zs, 7.0), zv, ops::scale(zl, 0.1), 1.0).item(), 2.2538560220859454, 1e-12);
  EXPECT_THROW(align_rows(zs, zv, zl, 0.0), std::invalid_argument);
}

TEST(ReportCe, Examples) {
  GraphD g;
  EXPECT_NEAR(report_ce(g.constant(mat(2, 4, {0, 0, 0, 0, 1, 1, 1, 1})), {1, 3}).item(), std::log(4.0), 1e-12);
  auto hand = g.constant(mat(2, 3, {1, 2, 0.5, 0, -1, 3}));
  EXPECT_NEAR(report_ce(hand, {2, 1}).item(), 3.015126343932687, 1e-12);
  // PAD targets are excluded from the mean
  auto padded = g.constant(mat(3, 3, {1, 2, 0.5, 0, -1, 3, 9, 9, 9}));
  EXPECT_NEAR(report_ce(padded, {2, 1, tokens::kPad}).item(), 3.015126343932687, 1e-12);
  EXPECT_THROW(report_ce(hand, {2, 3}), std::invalid_argument);
  auto sharp = g.constant(mat(1, 3, {0, 100, 0}));
  EXPECT_NEAR(report_ce(sharp, {1}).item(), 0.0, 1e-12);
}

TEST(TotalLoss, WeightedSum) {
  LossBreakdown b;
  b.ce = 1.0;
  b.recon_v = -2.0;  // -elbo = 2
  b.orth = 0.5;
  b.align = 1.0;
  EXPECT_NEAR(total_loss(b, 0.3, 0.3), 3.45, 1e-12);
  EXPECT_NEAR(total_loss(b, 0, 0), 3.0, 1e-12);
}
