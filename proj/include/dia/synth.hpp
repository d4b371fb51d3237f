#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <boost/math/distributions/normal.hpp>
#include <nlohmann/json.hpp>

#include "dia/batch.hpp"
#include "dia/config.hpp"
#include "dia/numerics/rng.hpp"

namespace dia {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ground-truth factors, all drawn N(0, 1) in the order s, u_v, u_l.
struct FactorSample {
  std::vector<double> s;
  std::vector<double> u_v;
  std::vector<double> u_l;

  std::vector<double> flat() const {
    std::vector<double> f = s;
    f.insert(f.end(), u_v.begin(), u_v.end());
    f.insert(f.end(), u_l.begin(), u_l.end());
    return f;
  }
};

struct SampleRow {
  std::vector<float> image;
  std::vector<int> context;
  std::vector<int> report;
};

// ---------------------------------------------------------------- tokenizer

/// [BOS, ids..., EOS]. Content ids must avoid the reserved range.
inline std::vector<int> tokenize(const std::vector<int>& ids, int vocab) {
  std::vector<int> out;
  out.reserve(ids.size() + 2);
  out.push_back(tokens::kBos);
  for (int t : ids) {
    if (t < tokens::kFirstFree || t >= vocab)
      throw ConfigError("tokenize: id " + std::to_string(t) + " is reserved or out of vocabulary");
    out.push_back(t);
  }
  out.push_back(tokens::kEos);
  return out;
}

/// Inverse of tokenize; tolerates trailing PAD and a missing EOS (truncated generations).
inline std::vector<int> detokenize(const std::vector<int>& seq) {
  std::vector<int> out;
  std::size_t i = 0;
  if (i < seq.size() && seq[i] == tokens::kBos) ++i;
  for (; i < seq.size(); ++i) {
    const int t = seq[i];
    if (t == tokens::kEos || t == tokens::kPad) break;
    if (t == tokens::kBos || t == tokens::kNull) throw ConfigError("detokenize: reserved id inside content");
    out.push_back(t);
  }
  return out;
}

inline std::vector<int> pad_to(std::vector<int> seq, int len) {
  if (static_cast<int>(seq.size()) > len) throw ConfigError("pad_to: sequence longer than " + std::to_string(len));
  seq.resize(static_cast<std::size_t>(len), tokens::kPad);
  return seq;
}

// ---------------------------------------------------------------- generator

namespace synth_detail {

/// Bin index of x under equal-probability N(0,1) bins.
inline int normal_bin(double x, int bins) {
  static const boost::math::normal_distribution<double> unit;
  int b = 0;
  for (int k = 1; k < bins; ++k)
    if (x >= boost::math::quantile(unit, static_cast<double>(k) / bins)) b = k;
  return b;
}

/// Integer wave vectors (a, b) for the low-frequency image patterns, in a fixed order.
inline std::pair<int, int> wave(int j) {
  static const int table[][2] = {{1, 0}, {0, 1}, {1, 1}, {1, -1}, {2, 0}, {0, 2},
                                 {2, 1}, {1, 2}, {2, -1}, {1, -2}, {2, 2}, {2, -2}};
  constexpr int n = sizeof(table) / sizeof(table[0]);
  if (j < n) return {table[j][0], table[j][1]};
  return {3 + (j - n) / 3, (j - n) % 3};
}

inline constexpr int kContextBins = 8;
inline constexpr std::uint64_t kMixingSeed = 0x5EEDA11C0FFEEULL;

}  // namespace synth_detail

/// Deterministic map from factors to observations (no noise).
class SynthRenderer {
 public:
  explicit SynthRenderer(const SynthConfig& c) : c_(c) {
    c_.validate();
    const int d = c.k_s + c.k_l;
    a_l_.assign(static_cast<std::size_t>(c.context_tokens) * d, 0.0);
    CounterRng rng(synth_detail::kMixingSeed);
    for (int t = 0; t < c.context_tokens; ++t) {
      double norm = 0;
      for (int j = 0; j < d; ++j) {
        double& v = a_l_[static_cast<std::size_t>(t) * d + j];
        v = rng.normal();
        norm += v * v;
      }
      // unit rows keep each context projection ~ N(0, 1)
      for (int j = 0; j < d; ++j) a_l_[static_cast<std::size_t>(t) * d + j] /= std::sqrt(norm);
    }
  }

  const SynthConfig& config() const { return c_; }

  /// Pixel value before clipping and noise:
  /// 0.5 + 0.2 * sum_j f_j cos(2 pi (a_j x + b_j y) / H) + 0.2 * sum_d tanh(3 s_d) blob_d(x, y),
  /// with f = (s, u_v) and blob_d a Gaussian bump centred on the diagonal.
  std::vector<float> image(const FactorSample& f, CounterRng* noise_rng) const {
    const int h = c_.image_size, w = c_.image_size, ch = c_.image_channels;
    std::vector<double> coef(f.s);
    coef.insert(coef.end(), f.u_v.begin(), f.u_v.end());
    std::vector<float> img(static_cast<std::size_t>(h) * w * ch);
    const double width = h / 8.0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int c = 0; c < ch; ++c) {
          double v = 0.5;
          for (std::size_t j = 0; j < coef.size(); ++j) {
            auto [a, b] = synth_detail::wave(static_cast<int>(j) + c);
            v += 0.2 * coef[j] * std::cos(2.0 * std::numbers::pi * (a * x + b * y) / h);
          }
          for (int d = 0; d < c_.k_s; ++d) {
            const double centre = (d + 1.0) * h / (c_.k_s + 1.0);
            const double r2 = (x - centre) * (x - centre) + (y - centre) * (y - centre);
            v += 0.2 * std::tanh(3.0 * f.s[d]) * std::exp(-r2 / (2 * width * width));
          }
          img[(static_cast<std::size_t>(y) * w + x) * ch + c] = static_cast<float>(v);
        }
      }
    }
    if (noise_rng && c_.noise > 0) {
      for (auto& v : img) v = static_cast<float>(v + c_.noise * noise_rng->normal());
    }
    for (auto& v : img) v = std::clamp(v, 0.0f, 1.0f);
    return img;
  }

  /// context_tokens quantized projections of (s, u_l), then PAD.
  std::vector<int> context(const FactorSample& f) const {
    const int d = c_.k_s + c_.k_l;
    std::vector<double> in(f.s);
    in.insert(in.end(), f.u_l.begin(), f.u_l.end());
    std::vector<int> out(static_cast<std::size_t>(c_.context_len), tokens::kPad);
    for (int t = 0; t < c_.context_tokens; ++t) {
      double v = 0;
      for (int j = 0; j < d; ++j) v += a_l_[static_cast<std::size_t>(t) * d + j] * in[j];
      out[t] = tokens::kFirstFree + synth_detail::normal_bin(v, synth_detail::kContextBins);
    }
    return out;
  }

  /// BOS, two tokens per shared dim keyed by its bin, one token per vision-specific dim, EOS, PAD.
  std::vector<int> report(const FactorSample& f) const {
    std::vector<int> ids;
    for (int d = 0; d < c_.k_s; ++d) {
      const int q = synth_detail::normal_bin(f.s[d], c_.bins);
      const int a = tokens::kFirstFree + (d * c_.bins + q) * 2;
      ids.push_back(a);
      ids.push_back(a + 1);
    }
    const int base = tokens::kFirstFree + 2 * c_.k_s * c_.bins;
    for (int e = 0; e < c_.k_v; ++e) ids.push_back(base + e * c_.bins + synth_detail::normal_bin(f.u_v[e], c_.bins));
    return pad_to(tokenize(ids, c_.vocab), c_.report_len);
  }

  /// Number of leading content tokens keyed by the shared factor.
  int shared_segment_len() const { return 2 * c_.k_s; }

  static FactorSample draw_factors(const SynthConfig& c, CounterRng& rng) {
    FactorSample f;
    for (int i = 0; i < c.k_s; ++i) f.s.push_back(rng.normal());
    for (int i = 0; i < c.k_v; ++i) f.u_v.push_back(rng.normal());
    for (int i = 0; i < c.k_l; ++i) f.u_l.push_back(rng.normal());
    return f;
  }

 private:
  SynthConfig c_;
  std::vector<double> a_l_;
};

/// Draws factors then image noise from `rng`.
inline std::pair<FactorSample, SampleRow> generate_sample(const SynthRenderer& r, CounterRng& rng) {
  FactorSample f = SynthRenderer::draw_factors(r.config(), rng);
  SampleRow row{r.image(f, &rng), r.context(f), r.report(f)};
  return {std::move(f), std::move(row)};
}

// ---------------------------------------------------------------- dataset

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "'");
}

struct Dataset {
  SynthConfig config;
  int n = 0;
  Array images;                          // [N x H*W*C]
  std::vector<int> contexts;             // [N x S_L]
  std::vector<int> reports;              // [N x T]
  Array factors;                         // [N x (k_s + k_v + k_l)]
  std::vector<std::uint8_t> lang_present;
  std::vector<Split> split;
  std::vector<std::uint64_t> sample_seed;

  std::vector<int> indices(Split s) const {
    std::vector<int> out;
    for (int i = 0; i < n; ++i)
      if (split[static_cast<std::size_t>(i)] == s) out.push_back(i);
    return out;
  }

  ModalityBatch batch(const std::vector<int>& ids) const {
    ModalityBatch b;
    b.batch = static_cast<int>(ids.size());
    const int px = images.cols(), sl = config.context_len, t = config.report_len;
    b.images = Array::matrix(b.batch, px);
    b.contexts.resize(static_cast<std::size_t>(b.batch) * sl);
    b.reports.resize(static_cast<std::size_t>(b.batch) * t);
    for (int k = 0; k < b.batch; ++k) {
      const int i = ids[static_cast<std::size_t>(k)];
      if (i < 0 || i >= n) throw std::out_of_range("dataset: sample index " + std::to_string(i));
      std::copy_n(images.data() + static_cast<std::size_t>(i) * px, px, b.images.data() + static_cast<std::size_t>(k) * px);
      std::copy_n(contexts.begin() + static_cast<std::ptrdiff_t>(i) * sl, sl, b.contexts.begin() + static_cast<std::ptrdiff_t>(k) * sl);
      std::copy_n(reports.begin() + static_cast<std::ptrdiff_t>(i) * t, t, b.reports.begin() + static_cast<std::ptrdiff_t>(k) * t);
      b.lang_present.push_back(lang_present[static_cast<std::size_t>(i)]);
    }
    return b;
  }

  /// Factor block [ids x width] starting at column `col`.
  ArrayD factor_block(const std::vector<int>& ids, int col, int width) const {
    ArrayD out = ArrayD::matrix(static_cast<int>(ids.size()), width);
    for (std::size_t k = 0; k < ids.size(); ++k)
      for (int j = 0; j < width; ++j) out.at(static_cast<int>(k), j) = factors.at(ids[k], col + j);
    return out;
  }
  ArrayD shared_factors(const std::vector<int>& ids) const { return factor_block(ids, 0, config.k_s); }
  ArrayD vision_factors(const std::vector<int>& ids) const { return factor_block(ids, config.k_s, config.k_v); }
  ArrayD language_factors(const std::vector<int>& ids) const {
    return factor_block(ids, config.k_s + config.k_v, config.k_l);
  }
};

/// Generates all splits. Sample i (global index, train then val then test) uses
/// seed derive_seed(cfg.seed, i); only test rows may be flagged language-absent.
inline Dataset make_dataset(const SynthConfig& cfg) {
  cfg.validate();
  SynthRenderer r(cfg);
  Dataset d;
  d.config = cfg;
  d.n = cfg.n_train + cfg.n_val + cfg.n_test;
  const int px = cfg.image_size * cfg.image_size * cfg.image_channels;
  const int nf = cfg.k_s + cfg.k_v + cfg.k_l;
  d.images = Array::matrix(d.n, px);
  d.factors = Array::matrix(d.n, nf);
  d.contexts.reserve(static_cast<std::size_t>(d.n) * cfg.context_len);
  d.reports.reserve(static_cast<std::size_t>(d.n) * cfg.report_len);
  for (int i = 0; i < d.n; ++i) {
    const Split sp = i < cfg.n_train ? Split::train : (i < cfg.n_train + cfg.n_val ? Split::val : Split::test);
    const std::uint64_t seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(i));
    CounterRng rng(seed);
    auto [f, row] = generate_sample(r, rng);
    bool present = true;
    if (sp == Split::test) {
      CounterRng miss(derive_seed(seed, "missing"));
      present = !miss.bernoulli(cfg.missing_prob);
    }
    if (!present) row.context = null_context(cfg.context_len);
    std::copy(row.image.begin(), row.image.end(), d.images.data() + static_cast<std::size_t>(i) * px);
    const auto ff = f.flat();
    for (int j = 0; j < nf; ++j) d.factors.at(i, j) = static_cast<float>(ff[j]);
    d.contexts.insert(d.contexts.end(), row.context.begin(), row.context.end());
    d.reports.insert(d.reports.end(), row.report.begin(), row.report.end());
    d.lang_present.push_back(present ? 1 : 0);
    d.split.push_back(sp);
    d.sample_seed.push_back(seed);
  }
  return d;
}

// ---------------------------------------------------------------- binary IO
//
// Each .bin file: "DIAB" magic, u32 version, u32 dtype (0 = f32, 1 = i32),
// u32 ndims, u32 dims[ndims], then the row-major little-endian payload.

namespace io {

inline constexpr char kMagic[4] = {'D', 'I', 'A', 'B'};
inline constexpr std::uint32_t kVersion = 1;
enum class DType : std::uint32_t { f32 = 0, i32 = 1 };

static_assert(std::endian::native == std::endian::little, "binary IO assumes a little-endian host");

inline void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline std::uint32_t read_u32(std::istream& is, const std::string& what) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) throw IoError(what + ": truncated header");
  return v;
}

template <class V>
void write_tensor(const std::filesystem::path& path, DType dt, const std::vector<int>& dims, const V* data) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(kMagic, 4);
  write_u32(os, kVersion);
  write_u32(os, static_cast<std::uint32_t>(dt));
  write_u32(os, static_cast<std::uint32_t>(dims.size()));
  std::size_t n = 1;
  for (int d : dims) {
    write_u32(os, static_cast<std::uint32_t>(d));
    n *= static_cast<std::size_t>(d);
  }
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(V)));
  if (!os) throw IoError("write failed: " + path.string());
}

template <class V>
std::vector<V> read_tensor(const std::filesystem::path& path, DType dt, std::vector<int>& dims) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw IoError(path.string() + ": bad magic");
  if (read_u32(is, path.string()) != kVersion) throw IoError(path.string() + ": unsupported version");
  if (read_u32(is, path.string()) != static_cast<std::uint32_t>(dt)) throw IoError(path.string() + ": dtype mismatch");
  const std::uint32_t nd = read_u32(is, path.string());
  if (nd > 8) throw IoError(path.string() + ": implausible rank");
  dims.clear();
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < nd; ++i) {
    dims.push_back(static_cast<int>(read_u32(is, path.string())));
    n *= static_cast<std::size_t>(dims.back());
  }
  std::vector<V> out(n);
  if (!is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(n * sizeof(V))))
    throw IoError(path.string() + ": truncated payload");
  if (is.peek() != std::char_traits<char>::eof()) throw IoError(path.string() + ": trailing bytes");
  return out;
}

}  // namespace io

/// Writes index.jsonl, meta.json and the four .bin files into `dir`.
inline void save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const auto& c = d.config;
  io::write_tensor(dir / "images.bin", io::DType::f32, {d.n, c.image_size, c.image_size, c.image_channels},
                   d.images.data());
  io::write_tensor(dir / "contexts.bin", io::DType::i32, {d.n, c.context_len}, d.contexts.data());
  io::write_tensor(dir / "reports.bin", io::DType::i32, {d.n, c.report_len}, d.reports.data());
  io::write_tensor(dir / "factors.bin", io::DType::f32, {d.n, c.k_s + c.k_v + c.k_l}, d.factors.data());

  std::ofstream idx(dir / "index.jsonl");
  if (!idx) throw IoError("cannot write index.jsonl");
  for (int i = 0; i < d.n; ++i) {
    nlohmann::json rec = {{"id", i},
                          {"split", split_name(d.split[static_cast<std::size_t>(i)])},
                          {"language_present", d.lang_present[static_cast<std::size_t>(i)] != 0},
                          {"offset", i},
                          {"seed", d.sample_seed[static_cast<std::size_t>(i)]}};
    idx << rec.dump() << '\n';
  }
  RunConfig holder;
  holder.data = c;
  nlohmann::json meta = {{"data", holder.to_json()["data"]}, {"seed", c.seed}};
  std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d;
  std::ifstream mf(dir / "meta.json");
  if (!mf) throw IoError("missing " + (dir / "meta.json").string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("meta.json: " + std::string(e.what()));
  }
  try {
    d.config = SynthConfig::from_json(meta.at("data"));
    d.config.seed = meta.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("meta.json: " + std::string(e.what()));
  }
  d.config.validate();
  const auto& c = d.config;

  std::vector<int> dims;
  auto img = io::read_tensor<float>(dir / "images.bin", io::DType::f32, dims);
  if (dims.size() != 4 || dims[1] != c.image_size || dims[2] != c.image_size || dims[3] != c.image_channels)
    throw IoError("images.bin: dims do not match meta.json");
  d.n = dims[0];
  d.images = Array({d.n, c.image_size * c.image_size * c.image_channels}, std::move(img));
  d.contexts = io::read_tensor<int>(dir / "contexts.bin", io::DType::i32, dims);
  if (dims != std::vector<int>{d.n, c.context_len}) throw IoError("contexts.bin: dims mismatch");
  d.reports = io::read_tensor<int>(dir / "reports.bin", io::DType::i32, dims);
  if (dims != std::vector<int>{d.n, c.report_len}) throw IoError("reports.bin: dims mismatch");
  auto fac = io::read_tensor<float>(dir / "factors.bin", io::DType::f32, dims);
  if (dims != std::vector<int>{d.n, c.k_s + c.k_v + c.k_l}) throw IoError("factors.bin: dims mismatch");
  d.factors = Array({d.n, c.k_s + c.k_v + c.k_l}, std::move(fac));

  std::ifstream idx(dir / "index.jsonl");
  if (!idx) throw IoError("missing index.jsonl");
  std::string line;
  while (std::getline(idx, line)) {
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
      const int id = rec.at("id").get<int>();
      if (id != static_cast<int>(d.split.size())) throw IoError("index.jsonl: ids out of order");
      d.split.push_back(parse_split(rec.at("split").get<std::string>()));
      d.lang_present.push_back(rec.at("language_present").get<bool>() ? 1 : 0);
      d.sample_seed.push_back(rec.at("seed").get<std::uint64_t>());
    } catch (const nlohmann::json::exception& e) {
      throw IoError("index.jsonl: " + std::string(e.what()));
    }
  }
  if (static_cast<int>(d.split.size()) != d.n) throw IoError("index.jsonl: row count does not match images.bin");
  return d;
}

}  // namespace dia
