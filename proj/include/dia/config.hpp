#pragma once

#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dia/numerics/rng.hpp"

namespace dia {

/// Invalid configuration or input files (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reserved token ids shared by context and report vocabularies.
namespace tokens {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kNull = 3;
inline constexpr int kFirstFree = 4;
}  // namespace tokens

struct ModelConfig {
  int image_size = 16;
  int image_channels = 1;
  /// Kernel == stride, no padding; each block divides the grid by its stride.
  std::vector<int> strides{2, 2, 2};
  /// Output channels of all but the last conv block (the last emits embed_dim).
  std::vector<int> conv_channels{8, 16};
  int embed_dim = 32;
  int latent_dim = 16;
  int context_len = 12;
  int context_vocab = 64;
  int report_len = 16;
  int report_vocab = 64;
  int encoder_layers = 1;
  int encoder_heads = 2;
  int ffn_dim = 64;
  int abstractor_heads = 2;
  int expert_hidden = 32;
  int lang_decoder_hidden = 64;
  int decoder_dim = 32;
  int decoder_layers = 2;
  int decoder_heads = 4;
  int decoder_kv_heads = 2;
  int decoder_max_len = 64;
  /// "moe" (mixture of unimodal experts) or "concat" (single encoder over both modalities).
  std::string shared_posterior = "moe";
  /// false drops the latent model entirely: the report decoder sees F_VL only.
  bool use_vae = true;
  bool hard_mask = true;
  /// Exact categorical expert selection for z_s (evaluation only; not differentiable in pi).
  bool categorical_sampling = false;
  double log_sigma_min = -6.0;
  double log_sigma_max = 2.0;
  double norm_eps = 1e-6;
  int jsd_samples = 256;
  int recon_samples = 1;
  bool in_batch_negatives = false;

  int cells_per_side() const {
    int s = image_size;
    for (int st : strides) s /= st;
    return s;
  }
  int vision_cells() const { return cells_per_side() * cells_per_side(); }
  int swiglu_hidden() const {
    const int raw = (8 * decoder_dim + 2) / 3;
    return (raw + 7) / 8 * 8;
  }
  bool moe() const { return shared_posterior == "moe"; }
  void validate() const;
};

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 1e-5;
  int batch_size = 4;
  int epochs = 10;
  double lambda1 = 0.3;
  double lambda2 = 0.3;
  double tau = 0.07;
  double dropout = 0.3;
  double warmup = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  /// Weight of the router supervision term on dropped-context samples.
  double router_weight = 1.0;
  /// Stop after this many optimizer steps (0 = run all epochs).
  int max_steps = 0;
  std::uint64_t seed = 0;
  void validate() const;
};

struct SynthConfig {
  int k_s = 2;
  int k_v = 2;
  int k_l = 2;
  int image_size = 16;
  int image_channels = 1;
  int context_len = 12;
  /// Non-PAD context tokens per sample; the rest is PAD.
  int context_tokens = 10;
  int report_len = 16;
  int vocab = 64;
  double noise = 0.05;
  double missing_prob = 0.45;
  int n_train = 2000;
  int n_val = 200;
  int n_test = 500;
  int bins = 4;
  std::uint64_t seed = 0;
  void validate() const;
  /// Parses the "data" section alone (unknown keys rejected); seed is left at 0.
  static SynthConfig from_json(const nlohmann::json& j);
};

struct EvalConfig {
  double ridge = 1e-3;
  double probe_train_frac = 0.7;
  int mi_k = 128;
  double mi_tau = 0.07;
  std::uint64_t seed = 0;
  void validate() const;
};

/// One JSON document: {"seed": n, "model": {...}, "train": {...}, "data": {...}, "eval": {...}}.
struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
  SynthConfig data;
  EvalConfig eval;

  /// Derives the per-subsystem seeds from `seed`.
  void derive_seeds() {
    train.seed = derive_seed(seed, "train");
    data.seed = derive_seed(seed, "data");
    eval.seed = derive_seed(seed, "eval");
  }
  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  std::uint64_t hash() const { return fnv1a64(to_json().dump()); }
};

namespace config_detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
  }
}

template <class V>
void read(const nlohmann::json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
  if constexpr (std::is_arithmetic_v<V> && !std::is_same_v<V, bool>) {
    if (j.at(key).is_boolean()) throw ConfigError(where + "." + key + ": wrong type");
  }
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

}  // namespace config_detail

inline void ModelConfig::validate() const {
  using config_detail::require;
  require(image_size > 0 && image_channels > 0, "model: image dims must be positive");
  require(!strides.empty(), "model.strides: at least one block");
  require(conv_channels.size() + 1 == strides.size(), "model.conv_channels: need strides.size()-1 entries");
  int s = image_size;
  for (int st : strides) {
    require(st > 0 && s % st == 0, "model.strides: image size not divisible by stride schedule");
    s /= st;
  }
  for (int c : conv_channels) require(c > 0, "model.conv_channels: must be positive");
  require(embed_dim > 0 && latent_dim > 0, "model: embed/latent dims must be positive");
  require(context_len > 0 && report_len > 1, "model: sequence lengths must be positive");
  require(context_vocab > tokens::kFirstFree && report_vocab > tokens::kFirstFree, "model: vocab too small");
  require(encoder_layers >= 0 && encoder_heads > 0 && embed_dim % encoder_heads == 0,
          "model.encoder_heads must divide embed_dim");
  require(abstractor_heads > 0 && embed_dim % abstractor_heads == 0, "model.abstractor_heads must divide embed_dim");
  require(ffn_dim > 0 && expert_hidden > 0 && lang_decoder_hidden > 0, "model: hidden sizes must be positive");
  require(decoder_layers > 0 && decoder_heads > 0 && decoder_kv_heads > 0, "model: decoder dims must be positive");
  require(decoder_heads % decoder_kv_heads == 0, "model.decoder_heads must be divisible by decoder_kv_heads");
  require(decoder_dim % decoder_heads == 0, "model.decoder_heads must divide decoder_dim");
  require((decoder_dim / decoder_heads) % 2 == 0, "model: decoder head dim must be even for RoPE");
  require(decoder_max_len >= report_len, "model.decoder_max_len must cover report_len");
  require(shared_posterior == "moe" || shared_posterior == "concat", "model.shared_posterior: 'moe' or 'concat'");
  require(log_sigma_min < log_sigma_max, "model: log_sigma clamp range empty");
  require(jsd_samples >= 1 && recon_samples >= 1, "model: sample counts must be >= 1");
}

inline void TrainConfig::validate() const {
  using config_detail::require;
  require(lr > 0 && weight_decay >= 0, "train: lr must be positive, weight_decay nonnegative");
  require(batch_size >= 2, "train.batch_size must be >= 2 (whitening needs two rows)");
  require(epochs >= 0 && max_steps >= 0, "train: epochs/max_steps must be nonnegative");
  require(lambda1 >= 0 && lambda2 >= 0, "train: lambdas must be nonnegative");
  require(tau > 0, "train.tau must be positive");
  require(dropout >= 0 && dropout <= 1, "train.dropout must lie in [0,1]");
  require(warmup >= 0 && warmup <= 1, "train.warmup must lie in [0,1]");
  require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0, "train: invalid AdamW moments");
  require(grad_clip > 0 && router_weight >= 0, "train: grad_clip must be positive");
}

inline void SynthConfig::validate() const {
  using config_detail::require;
  require(k_s > 0 && k_v > 0 && k_l > 0, "data: factor dims must be positive");
  require(image_size > 0 && image_channels > 0, "data: image dims must be positive");
  require(context_tokens > 0 && context_tokens <= context_len, "data.context_tokens must lie in [1, context_len]");
  require(bins >= 2, "data.bins must be >= 2");
  require(vocab >= tokens::kFirstFree + (k_s + k_v) * 2 * bins, "data.vocab too small for the report template");
  require(report_len >= 2 + 2 * k_s + k_v, "data.report_len too short for the report template");
  require(noise >= 0, "data.noise must be nonnegative");
  require(missing_prob >= 0 && missing_prob <= 1, "data.missing_prob must lie in [0,1]");
  require(n_train >= 0 && n_val >= 0 && n_test >= 0 && n_train + n_val + n_test > 0, "data: split sizes");
}

inline void EvalConfig::validate() const {
  using config_detail::require;
  require(ridge >= 1e-4, "eval.ridge must be >= 1e-4");
  require(probe_train_frac > 0 && probe_train_frac < 1, "eval.probe_train_frac must lie in (0,1)");
  require(mi_k >= 2, "eval.mi_k must be >= 2");
  require(mi_tau > 0, "eval.mi_tau must be positive");
}

inline void RunConfig::validate() const {
  using config_detail::require;
  model.validate();
  train.validate();
  data.validate();
  eval.validate();
  require(model.image_size == data.image_size && model.image_channels == data.image_channels,
          "model/data image geometry mismatch");
  require(model.context_len == data.context_len, "model/data context_len mismatch");
  require(model.report_len == data.report_len, "model/data report_len mismatch");
  require(model.context_vocab == data.vocab && model.report_vocab == data.vocab, "model/data vocab mismatch");
}

inline nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["model"] = {{"image_size", model.image_size},
                {"image_channels", model.image_channels},
                {"strides", model.strides},
                {"conv_channels", model.conv_channels},
                {"embed_dim", model.embed_dim},
                {"latent_dim", model.latent_dim},
                {"context_len", model.context_len},
                {"context_vocab", model.context_vocab},
                {"report_len", model.report_len},
                {"report_vocab", model.report_vocab},
                {"encoder_layers", model.encoder_layers},
                {"encoder_heads", model.encoder_heads},
                {"ffn_dim", model.ffn_dim},
                {"abstractor_heads", model.abstractor_heads},
                {"expert_hidden", model.expert_hidden},
                {"lang_decoder_hidden", model.lang_decoder_hidden},
                {"decoder_dim", model.decoder_dim},
                {"decoder_layers", model.decoder_layers},
                {"decoder_heads", model.decoder_heads},
                {"decoder_kv_heads", model.decoder_kv_heads},
                {"decoder_max_len", model.decoder_max_len},
                {"shared_posterior", model.shared_posterior},
                {"use_vae", model.use_vae},
                {"hard_mask", model.hard_mask},
                {"categorical_sampling", model.categorical_sampling},
                {"log_sigma_min", model.log_sigma_min},
                {"log_sigma_max", model.log_sigma_max},
                {"norm_eps", model.norm_eps},
                {"jsd_samples", model.jsd_samples},
                {"recon_samples", model.recon_samples},
                {"in_batch_negatives", model.in_batch_negatives}};
  j["train"] = {{"lr", train.lr},
                {"weight_decay", train.weight_decay},
                {"batch_size", train.batch_size},
                {"epochs", train.epochs},
                {"lambda1", train.lambda1},
                {"lambda2", train.lambda2},
                {"tau", train.tau},
                {"dropout", train.dropout},
                {"warmup", train.warmup},
                {"beta1", train.beta1},
                {"beta2", train.beta2},
                {"adam_eps", train.adam_eps},
                {"grad_clip", train.grad_clip},
                {"router_weight", train.router_weight},
                {"max_steps", train.max_steps}};
  j["data"] = {{"k_s", data.k_s},
               {"k_v", data.k_v},
               {"k_l", data.k_l},
               {"image_size", data.image_size},
               {"image_channels", data.image_channels},
               {"context_len", data.context_len},
               {"context_tokens", data.context_tokens},
               {"report_len", data.report_len},
               {"vocab", data.vocab},
               {"noise", data.noise},
               {"missing_prob", data.missing_prob},
               {"n_train", data.n_train},
               {"n_val", data.n_val},
               {"n_test", data.n_test},
               {"bins", data.bins}};
  j["eval"] = {{"ridge", eval.ridge},
               {"probe_train_frac", eval.probe_train_frac},
               {"mi_k", eval.mi_k},
               {"mi_tau", eval.mi_tau}};
  return j;
}

inline SynthConfig SynthConfig::from_json(const nlohmann::json& d) {
  using config_detail::read;
  using config_detail::reject_unknown;
  SynthConfig o;
  reject_unknown(d,
                 {"k_s", "k_v", "k_l", "image_size", "image_channels", "context_len", "context_tokens",
                  "report_len", "vocab", "noise", "missing_prob", "n_train", "n_val", "n_test", "bins"},
                 "data");
  read(d, "k_s", o.k_s, "data");
  read(d, "k_v", o.k_v, "data");
  read(d, "k_l", o.k_l, "data");
  read(d, "image_size", o.image_size, "data");
  read(d, "image_channels", o.image_channels, "data");
  read(d, "context_len", o.context_len, "data");
  read(d, "context_tokens", o.context_tokens, "data");
  read(d, "report_len", o.report_len, "data");
  read(d, "vocab", o.vocab, "data");
  read(d, "noise", o.noise, "data");
  read(d, "missing_prob", o.missing_prob, "data");
  read(d, "n_train", o.n_train, "data");
  read(d, "n_val", o.n_val, "data");
  read(d, "n_test", o.n_test, "data");
  read(d, "bins", o.bins, "data");
  return o;
}

inline RunConfig RunConfig::from_json(const nlohmann::json& j) {
  using config_detail::read;
  using config_detail::reject_unknown;
  RunConfig c;
  reject_unknown(j, {"seed", "model", "train", "data", "eval"}, "config");
  read(j, "seed", c.seed, "config");
  if (j.contains("model")) {
    const auto& m = j["model"];
    reject_unknown(m,
                   {"image_size", "image_channels", "strides", "conv_channels", "embed_dim", "latent_dim",
                    "context_len", "context_vocab", "report_len", "report_vocab", "encoder_layers",
                    "encoder_heads", "ffn_dim", "abstractor_heads", "expert_hidden", "lang_decoder_hidden",
                    "decoder_dim", "decoder_layers", "decoder_heads", "decoder_kv_heads", "decoder_max_len",
                    "shared_posterior", "use_vae", "hard_mask", "categorical_sampling", "log_sigma_min",
                    "log_sigma_max", "norm_eps", "jsd_samples", "recon_samples", "in_batch_negatives"},
                   "model");
    auto& o = c.model;
    read(m, "image_size", o.image_size, "model");
    read(m, "image_channels", o.image_channels, "model");
    read(m, "strides", o.strides, "model");
    read(m, "conv_channels", o.conv_channels, "model");
    read(m, "embed_dim", o.embed_dim, "model");
    read(m, "latent_dim", o.latent_dim, "model");
    read(m, "context_len", o.context_len, "model");
    read(m, "context_vocab", o.context_vocab, "model");
    read(m, "report_len", o.report_len, "model");
    read(m, "report_vocab", o.report_vocab, "model");
    read(m, "encoder_layers", o.encoder_layers, "model");
    read(m, "encoder_heads", o.encoder_heads, "model");
    read(m, "ffn_dim", o.ffn_dim, "model");
    read(m, "abstractor_heads", o.abstractor_heads, "model");
    read(m, "expert_hidden", o.expert_hidden, "model");
    read(m, "lang_decoder_hidden", o.lang_decoder_hidden, "model");
    read(m, "decoder_dim", o.decoder_dim, "model");
    read(m, "decoder_layers", o.decoder_layers, "model");
    read(m, "decoder_heads", o.decoder_heads, "model");
    read(m, "decoder_kv_heads", o.decoder_kv_heads, "model");
    read(m, "decoder_max_len", o.decoder_max_len, "model");
    read(m, "shared_posterior", o.shared_posterior, "model");
    read(m, "use_vae", o.use_vae, "model");
    read(m, "hard_mask", o.hard_mask, "model");
    read(m, "categorical_sampling", o.categorical_sampling, "model");
    read(m, "log_sigma_min", o.log_sigma_min, "model");
    read(m, "log_sigma_max", o.log_sigma_max, "model");
    read(m, "norm_eps", o.norm_eps, "model");
    read(m, "jsd_samples", o.jsd_samples, "model");
    read(m, "recon_samples", o.recon_samples, "model");
    read(m, "in_batch_negatives", o.in_batch_negatives, "model");
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    reject_unknown(t,
                   {"lr", "weight_decay", "batch_size", "epochs", "lambda1", "lambda2", "tau", "dropout", "warmup",
                    "beta1", "beta2", "adam_eps", "grad_clip", "router_weight", "max_steps"},
                   "train");
    auto& o = c.train;
    read(t, "lr", o.lr, "train");
    read(t, "weight_decay", o.weight_decay, "train");
    read(t, "batch_size", o.batch_size, "train");
    read(t, "epochs", o.epochs, "train");
    read(t, "lambda1", o.lambda1, "train");
    read(t, "lambda2", o.lambda2, "train");
    read(t, "tau", o.tau, "train");
    read(t, "dropout", o.dropout, "train");
    read(t, "warmup", o.warmup, "train");
    read(t, "beta1", o.beta1, "train");
    read(t, "beta2", o.beta2, "train");
    read(t, "adam_eps", o.adam_eps, "train");
    read(t, "grad_clip", o.grad_clip, "train");
    read(t, "router_weight", o.router_weight, "train");
    read(t, "max_steps", o.max_steps, "train");
  }
  if (j.contains("data")) c.data = SynthConfig::from_json(j["data"]);
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    reject_unknown(e, {"ridge", "probe_train_frac", "mi_k", "mi_tau"}, "eval");
    auto& o = c.eval;
    read(e, "ridge", o.ridge, "eval");
    read(e, "probe_train_frac", o.probe_train_frac, "eval");
    read(e, "mi_k", o.mi_k, "eval");
    read(e, "mi_tau", o.mi_tau, "eval");
  }
  c.derive_seeds();
  c.validate();
  return c;
}

/// Defaults with derived seeds applied.
inline RunConfig default_run_config(std::uint64_t seed = 0) {
  RunConfig c;
  c.seed = seed;
  c.derive_seeds();
  return c;
}

}  // namespace dia
