#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dia/synth.hpp"

using namespace dia;
namespace fs = std::filesystem;

namespace {

SynthConfig small(int n_train, int n_test, std::uint64_t seed = 5) {
  SynthConfig c;
  c.n_train = n_train;
  c.n_val = 10;
  c.n_test = n_test;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Tokenizer, RoundTrip) {
  EXPECT_EQ(tokenize({4, 9}, 64), (std::vector<int>{1, 4, 9, 2}));
  EXPECT_EQ(detokenize({1, 4, 9, 2, 0, 0}), (std::vector<int>{4, 9}));
  EXPECT_EQ(detokenize({1, 4, 9}), (std::vector<int>{4, 9}));
  EXPECT_TRUE(detokenize({1, 2}).empty());
  EXPECT_THROW(tokenize({3}, 64), ConfigError);
  EXPECT_THROW(tokenize({64}, 64), ConfigError);
  EXPECT_THROW(detokenize({1, 4, 1, 2}), ConfigError);
  EXPECT_THROW(pad_to({1, 2, 3}, 2), ConfigError);
}

TEST(Synth, NormalBins) {
  using synth_detail::normal_bin;
  EXPECT_EQ(normal_bin(0.0, 4), 2);
  EXPECT_EQ(normal_bin(-0.6744, 4), 1);
  EXPECT_EQ(normal_bin(-0.6746, 4), 0);
  EXPECT_EQ(normal_bin(0.6746, 4), 3);
  EXPECT_EQ(normal_bin(-10.0, 4), 0);
  EXPECT_EQ(normal_bin(10.0, 4), 3);
}

TEST(Synth, ReportTemplate) {
  SynthRenderer r(small(1, 0));
  FactorSample f{{0.0, -1.0}, {2.0, -2.0}, {0.5, 0.5}};
  EXPECT_EQ(r.report(f), (std::vector<int>{1, 8, 9, 12, 13, 23, 24, 2, 0, 0, 0, 0, 0, 0, 0, 0}));
  // language-specific factors never reach the report
  FactorSample g = f;
  g.u_l = {-3.0, 3.0};
  EXPECT_EQ(r.report(g), r.report(f));
  EXPECT_EQ(r.shared_segment_len(), 4);
}

TEST(Synth, ImageAndContext) {
  SynthRenderer r(small(1, 0));
  FactorSample zero{{0, 0}, {0, 0}, {0, 0}};
  for (float v : r.image(zero, nullptr)) EXPECT_FLOAT_EQ(v, 0.5f);
  FactorSample big{{5, -5}, {5, 5}, {0, 0}};
  for (float v : r.image(big, nullptr)) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  auto ctx = r.context(big);
  ASSERT_EQ(ctx.size(), 12u);
  for (int t = 0; t < 10; ++t) {
    EXPECT_GE(ctx[t], tokens::kFirstFree);
    EXPECT_LT(ctx[t], tokens::kFirstFree + 8);
  }
  EXPECT_EQ(ctx[10], tokens::kPad);
  // the vision-specific factor does not reach the context
  FactorSample other = big;
  other.u_v = {-1, 1};
  EXPECT_EQ(r.context(other), ctx);
}

TEST(Synth, DatasetDeterministicAndMissingOnlyOnTest) {
  auto a = make_dataset(small(50, 2000));
  auto b = make_dataset(small(50, 2000));
  EXPECT_EQ(a.images.values(), b.images.values());
  EXPECT_EQ(a.contexts, b.contexts);
  EXPECT_EQ(a.n, 2060);
  int absent = 0;
  for (int i = 0; i < a.n; ++i) {
    if (a.split[i] != Split::test) {
      EXPECT_TRUE(a.lang_present[i]);
    } else if (!a.lang_present[i]) {
      ++absent;
      EXPECT_EQ(a.batch({i}).contexts, null_context(12));
    }
  }
  // binomial(2000, 0.45): sd ~ 0.011
  EXPECT_NEAR(absent / 2000.0, 0.45, 0.05);
  auto c = make_dataset(small(50, 2000, 6));
  EXPECT_NE(a.images.values(), c.images.values());
}

TEST(Synth, SampleDependsOnlyOnItsIndex) {
  auto a = make_dataset(small(20, 5));
  auto b = make_dataset(small(40, 5));
  for (int i = 0; i < 20; ++i) EXPECT_EQ(a.batch({i}).images.values(), b.batch({i}).images.values());
}

TEST(Synth, SaveLoadRoundTrip) {
  auto dir = fs::temp_directory_path() / "dia_synth_io";
  fs::remove_all(dir);
  auto d = make_dataset(small(12, 8));
  save_dataset(d, dir);
  auto e = load_dataset(dir);
  EXPECT_EQ(e.n, d.n);
  EXPECT_EQ(e.images.values(), d.images.values());
  EXPECT_EQ(e.factors.values(), d.factors.values());
  EXPECT_EQ(e.contexts, d.contexts);
  EXPECT_EQ(e.reports, d.reports);
  EXPECT_EQ(e.lang_present, d.lang_present);
  EXPECT_EQ(e.split, d.split);
  EXPECT_EQ(e.sample_seed, d.sample_seed);
  EXPECT_EQ(e.config.seed, d.config.seed);

  fs::resize_file(dir / "images.bin", fs::file_size(dir / "images.bin") - 4);
  EXPECT_THROW(load_dataset(dir), IoError);
  save_dataset(d, dir);
  { std::ofstream(dir / "reports.bin", std::ios::app) << 'x'; }
  EXPECT_THROW(load_dataset(dir), IoError);
  save_dataset(d, dir);
  fs::remove(dir / "meta.json");
  EXPECT_THROW(load_dataset(dir), IoError);
}

TEST(Synth, FactorBlocks) {
  auto d = make_dataset(small(6, 0));
  auto s = d.shared_factors({0, 1});
  auto l = d.language_factors({0, 1});
  EXPECT_EQ(s.cols(), 2);
  EXPECT_EQ(s.at(1, 1), d.factors.at(1, 1));
  EXPECT_EQ(l.at(0, 0), d.factors.at(0, 4));
}
