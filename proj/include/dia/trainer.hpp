#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>

#include "dia/model.hpp"
#include "dia/synth.hpp"

namespace dia {

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- modality dropout

/// Replaces each present context by the null sequence with probability p.
/// One Bernoulli draw per row, in row order, whether or not the row is already absent.
inline void apply_modality_dropout(ModalityBatch& batch, double p, CounterRng& rng) {
  if (!(p >= 0 && p <= 1)) throw ConfigError("dropout probability must be in [0, 1]");
  for (int b = 0; b < batch.batch; ++b) {
    const bool drop = rng.bernoulli(p);
    if (drop && batch.lang_present[static_cast<std::size_t>(b)]) strip_context(batch, b);
  }
}

// ---------------------------------------------------------------- AdamW

template <class T>
struct AdamState {
  std::map<std::string, BasicArray<T>> m, v;
  long step = 0;  // completed updates
};

template <class T>
AdamState<T> make_adam(const ParamStore<T>& ps) {
  AdamState<T> s;
  for (const auto& [name, p] : ps) {
    s.m.emplace(name, BasicArray<T>(p.value.shape()));
    s.v.emplace(name, BasicArray<T>(p.value.shape()));
  }
  return s;
}

/// Global L2 norm of all gradients.
template <class T>
double grad_norm(const ParamStore<T>& ps) {
  double s = 0;
  for (const auto& [_, p] : ps)
    for (T g : p.grad.values()) s += static_cast<double>(g) * g;
  return std::sqrt(s);
}

/// Scales gradients so their global norm is at most max_norm; returns the pre-clip norm.
template <class T>
double clip_grad_norm(ParamStore<T>& ps, double max_norm) {
  const double n = grad_norm(ps);
  if (max_norm > 0 && n > max_norm) {
    const double s = max_norm / n;
    for (auto& [_, p] : ps)
      for (T& g : p.grad.values()) g = static_cast<T>(g * s);
  }
  return n;
}

/// One decoupled-weight-decay Adam update at learning rate lr.
template <class T>
void adamw_update(ParamStore<T>& ps, AdamState<T>& st, const TrainConfig& c, double lr) {
  ++st.step;
  const double bc1 = 1 - std::pow(c.beta1, static_cast<double>(st.step));
  const double bc2 = 1 - std::pow(c.beta2, static_cast<double>(st.step));
  for (auto& [name, p] : ps) {
    auto& m = st.m.at(name);
    auto& v = st.v.at(name);
    const double wd = p.decay ? c.weight_decay : 0.0;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      const double mi = c.beta1 * m[i] + (1 - c.beta1) * g;
      const double vi = c.beta2 * v[i] + (1 - c.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mh = static_cast<double>(m[i]) / bc1, vh = static_cast<double>(v[i]) / bc2;
      const double x = p.value[i];
      p.value[i] = static_cast<T>(x - lr * (mh / (std::sqrt(vh) + c.adam_eps) + wd * x));
    }
  }
}

/// Linear warmup over the first `warmup` fraction of steps, constant afterwards.
inline double learning_rate(const TrainConfig& c, long step, long total_steps) {
  const long warm = static_cast<long>(std::ceil(c.warmup * static_cast<double>(total_steps)));
  if (warm <= 0 || step >= warm) return c.lr;
  return c.lr * static_cast<double>(step + 1) / static_cast<double>(warm);
}

// ---------------------------------------------------------------- checkpoints
//
// "DIAC", u32 version, u64 config hash, u32 len + config JSON, i64 step, u64 rng key,
// u64 rng counter, f64 best validation score, u32 record count, then records of
// (u32 name len, name, u32 ndims, u32 dims..., f32 payload). Adam moments are stored
// as records named "adam.m/<param>" and "adam.v/<param>".

struct Checkpoint {
  RunConfig config;
  ParamStore32 params;
  AdamState<float> adam;
  long step = 0;
  CounterRng::State rng{};
  double best_val = -std::numeric_limits<double>::infinity();
};

namespace ckpt_detail {

inline constexpr char kMagic[4] = {'D', 'I', 'A', 'C'};
inline constexpr std::uint32_t kVersion = 1;

template <class V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <class V>
V get(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw IoError("checkpoint: truncated file");
  return v;
}
inline void put_str(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string get_str(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  if (n > (1u << 26)) throw IoError("checkpoint: implausible string length");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw IoError("checkpoint: truncated file");
  return s;
}
inline void put_record(std::ostream& os, const std::string& name, const Array& a) {
  put_str(os, name);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(a.ndim()));
  for (std::size_t i = 0; i < a.ndim(); ++i) put<std::uint32_t>(os, static_cast<std::uint32_t>(a.dim(i)));
  os.write(reinterpret_cast<const char*>(a.data()), static_cast<std::streamsize>(a.size() * sizeof(float)));
}

}  // namespace ckpt_detail

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  using namespace ckpt_detail;
  std::ostringstream os(std::ios::binary);
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kVersion);
  put<std::uint64_t>(os, c.config.hash());
  put_str(os, c.config.to_json().dump());
  put<std::int64_t>(os, c.step);
  put<std::uint64_t>(os, c.rng.key);
  put<std::uint64_t>(os, c.rng.counter);
  put<double>(os, c.best_val);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(3 * c.params.size()));
  for (const auto& [name, p] : c.params) put_record(os, name, p.value);
  for (const auto& [name, m] : c.adam.m) put_record(os, "adam.m/" + name, m);
  for (const auto& [name, v] : c.adam.v) put_record(os, "adam.v/" + name, v);
  // write to a temporary then rename so a crash never leaves a half-written checkpoint
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("checkpoint: cannot write " + tmp.string());
    const std::string bytes = os.str();
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  using namespace ckpt_detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw IoError("checkpoint: bad magic in " + path.string());
  if (get<std::uint32_t>(is) != kVersion) throw IoError("checkpoint: unsupported version");
  const auto hash = get<std::uint64_t>(is);
  Checkpoint c;
  c.config = RunConfig::from_json(nlohmann::json::parse(get_str(is)));
  if (c.config.hash() != hash) throw IoError("checkpoint: config hash mismatch");
  c.step = static_cast<long>(get<std::int64_t>(is));
  c.rng.key = get<std::uint64_t>(is);
  c.rng.counter = get<std::uint64_t>(is);
  c.best_val = get<double>(is);
  init_model(c.params, c.config.model, c.config.seed);
  c.adam = make_adam(c.params);
  const auto n = get<std::uint32_t>(is);
  if (n != 3 * c.params.size()) throw IoError("checkpoint: record count does not match the configured model");
  for (std::uint32_t r = 0; r < n; ++r) {
    const std::string name = get_str(is);
    Array* target = nullptr;
    if (name.rfind("adam.m/", 0) == 0) {
      auto it = c.adam.m.find(name.substr(7));
      if (it != c.adam.m.end()) target = &it->second;
    } else if (name.rfind("adam.v/", 0) == 0) {
      auto it = c.adam.v.find(name.substr(7));
      if (it != c.adam.v.end()) target = &it->second;
    } else if (c.params.contains(name)) {
      target = &c.params.at(name).value;
    }
    if (!target) throw IoError("checkpoint: unknown record " + name);
    const auto nd = get<std::uint32_t>(is);
    std::vector<int> dims;
    for (std::uint32_t i = 0; i < nd; ++i) dims.push_back(static_cast<int>(get<std::uint32_t>(is)));
    if (dims != target->shape()) throw IoError("checkpoint: shape mismatch for " + name);
    is.read(reinterpret_cast<char*>(target->data()), static_cast<std::streamsize>(target->size() * sizeof(float)));
    if (!is) throw IoError("checkpoint: truncated payload for " + name);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw IoError("checkpoint: trailing bytes");
  c.adam.step = c.step;
  return c;
}

// ---------------------------------------------------------------- training loop

inline long steps_per_epoch(const RunConfig& rc) {
  return (rc.data.n_train + rc.train.batch_size - 1) / rc.train.batch_size;
}

inline long total_steps(const RunConfig& rc) {
  const long all = steps_per_epoch(rc) * rc.train.epochs;
  return rc.train.max_steps > 0 ? std::min<long>(all, rc.train.max_steps) : all;
}

/// Sample order for one epoch: Fisher-Yates shuffle from (seed, epoch).
inline std::vector<int> epoch_order(const std::vector<int>& train_ids, std::uint64_t seed, long epoch) {
  std::vector<int> ids = train_ids;
  CounterRng rng(derive_seed(derive_seed(seed, "epoch"), static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.below(i)]);
  return ids;
}

/// Batch indices, dropout decisions and noise for one optimizer step.
struct StepPlan {
  ModalityBatch batch;
  StepNoise<float> noise;
};

inline StepPlan plan_step(const Dataset& data, const RunConfig& rc, const std::vector<int>& train_ids, long step) {
  const long spe = steps_per_epoch(rc);
  const long epoch = step / spe, within = step % spe;
  const auto order = epoch_order(train_ids, rc.train.seed, epoch);
  const std::size_t lo = static_cast<std::size_t>(within * rc.train.batch_size);
  const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(rc.train.batch_size));
  StepPlan p;
  p.batch = data.batch(std::vector<int>(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                        order.begin() + static_cast<std::ptrdiff_t>(hi)));
  const std::uint64_t s = derive_seed(derive_seed(rc.train.seed, "step"), static_cast<std::uint64_t>(step));
  CounterRng drop(derive_seed(s, "dropout"));
  apply_modality_dropout(p.batch, rc.train.dropout, drop);
  if (rc.model.use_vae) {
    CounterRng nz(derive_seed(s, "noise"));
    p.noise = StepNoise<float>::draw(rc.model, p.batch.batch, nz);
  }
  return p;
}

/// One forward/backward/update. Throws NumericalError on a non-finite loss.
inline LossBreakdown train_step(ParamStore32& ps, AdamState<float>& adam, const RunConfig& rc, const StepPlan& plan,
                                double lr) {
  Graph32 g;
  const StepNoise<float>* noise = rc.model.use_vae ? &plan.noise : nullptr;
  auto r = forward(g, ps, rc.model, plan.batch, noise);
  auto loss = compute_loss(g, r, rc.model, rc.train, plan.batch, noise);
  if (!loss.breakdown.finite() || !std::isfinite(loss.total.item()))
    throw NumericalError("non-finite loss at step " + std::to_string(adam.step) + ": " + loss.breakdown.describe());
  ps.zero_grad();
  g.backward(loss.total);
  const double norm = clip_grad_norm(ps, rc.train.grad_clip);
  if (!std::isfinite(norm))
    throw NumericalError("non-finite gradient at step " + std::to_string(adam.step) + ": " + loss.breakdown.describe());
  adamw_update(ps, adam, rc.train, lr);
  return loss.breakdown;
}

/// Mean validation score: per-sample ELBO (marginal ELBO for absent rows) for the latent
/// model, negative report CE otherwise. Fixed noise so it is comparable across epochs.
inline double validation_score(ParamStore32& ps, const RunConfig& rc, const Dataset& data, const std::vector<int>& ids) {
  if (ids.empty()) return 0;
  const int chunk = 50;
  double sum = 0;
  for (std::size_t lo = 0; lo < ids.size(); lo += chunk) {
    std::vector<int> part(ids.begin() + static_cast<std::ptrdiff_t>(lo),
                          ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), lo + chunk)));
    auto b = data.batch(part);
    Graph32 g(false);
    if (rc.model.use_vae) {
      CounterRng nz(derive_seed(derive_seed(rc.train.seed, "validation"), static_cast<std::uint64_t>(lo)));
      auto noise = StepNoise<float>::draw(rc.model, b.batch, nz);
      ForwardOptions fo;
      fo.decode_reports = false;
      auto r = forward(g, ps, rc.model, b, &noise, fo);
      auto t = row_terms(g, r, rc.model, b, noise);
      for (int i = 0; i < b.batch; ++i)
        sum += b.lang_present[static_cast<std::size_t>(i)] ? sample_elbo(t, r.present, i)
                                                            : sample_marginal_elbo(t, r.present, i);
    } else {
      auto r = forward<float>(g, ps, rc.model, b, nullptr);
      std::vector<int> targets;
      const int t = b.report_len();
      for (int i = 0; i < b.batch; ++i)
        for (int j = 1; j < t; ++j) targets.push_back(b.reports[static_cast<std::size_t>(i) * t + j]);
      sum -= report_ce(r.report_logits, targets).item() * b.batch;
    }
  }
  return sum / static_cast<double>(ids.size());
}

struct FitOptions {
  /// Continue from this checkpoint instead of initializing.
  std::optional<std::filesystem::path> resume;
  /// Stop (and checkpoint) after this global step count; the schedule is unaffected.
  long stop_after = -1;
  std::function<void(long, const LossBreakdown&)> on_step;
};

struct FitResult {
  long steps = 0;
  double best_val = 0;
  std::filesystem::path final_ckpt, best_ckpt, metrics;
};

/// Trains on the train split, writing final.ckpt, best.ckpt and metrics.csv to out_dir.
/// A resumed run appends to metrics.csv after dropping rows past the checkpoint step.
inline FitResult fit(const Dataset& data, const RunConfig& rc, const std::filesystem::path& out_dir,
                     const FitOptions& opt = {}) {
  rc.validate();
  std::filesystem::create_directories(out_dir);
  Checkpoint ck;
  if (opt.resume) {
    ck = load_checkpoint(*opt.resume);
    if (ck.config.hash() != rc.hash()) throw ConfigError("resume: checkpoint config differs from the run config");
  } else {
    ck.config = rc;
    init_model(ck.params, rc.model, rc.seed);
    ck.adam = make_adam(ck.params);
  }
  const auto train_ids = data.indices(Split::train);
  const auto val_ids = data.indices(Split::val);
  if (train_ids.empty() && rc.train.epochs > 0) throw ConfigError("fit: empty training split");
  const long total = total_steps(rc);
  const long spe = steps_per_epoch(rc);

  FitResult res;
  res.final_ckpt = out_dir / "final.ckpt";
  res.best_ckpt = out_dir / "best.ckpt";
  res.metrics = out_dir / "metrics.csv";

  std::vector<std::string> kept;
  if (opt.resume && std::filesystem::exists(res.metrics)) {
    std::ifstream in(res.metrics);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line))
      if (std::stol(line.substr(0, line.find(','))) < ck.step) kept.push_back(line);
  }
  std::ofstream csv(res.metrics, std::ios::trunc);
  if (!csv) throw IoError("fit: cannot write " + res.metrics.string());
  csv << LossBreakdown::csv_header() << '\n';
  for (const auto& l : kept) csv << l << '\n';

  if (!opt.resume) save_checkpoint(ck, res.best_ckpt);
  const long stop = opt.stop_after >= 0 ? std::min(total, opt.stop_after) : total;
  for (long step = ck.step; step < stop; ++step) {
    const StepPlan plan = plan_step(data, rc, train_ids, step);
    const double lr = learning_rate(rc.train, step, total);
    LossBreakdown b = train_step(ck.params, ck.adam, rc, plan, lr);
    csv << b.csv_row(step) << '\n';
    if (opt.on_step) opt.on_step(step, b);
    ck.step = step + 1;
    ck.rng = CounterRng(derive_seed(rc.train.seed, "step"), static_cast<std::uint64_t>(ck.step)).state();
    if (ck.step % spe == 0 || ck.step == total) {
      const double v = validation_score(ck.params, rc, data, val_ids);
      if (v > ck.best_val) {
        ck.best_val = v;
        save_checkpoint(ck, res.best_ckpt);
      }
    }
  }
  csv.flush();
  save_checkpoint(ck, res.final_ckpt);
  res.steps = ck.step;
  res.best_val = ck.best_val;
  return res;
}

}  // namespace dia
