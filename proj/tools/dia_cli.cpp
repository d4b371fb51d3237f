// dia: data generation, training, evaluation, generation and gradient checks.
//
// Exit codes: 0 ok, 2 invalid input or configuration, 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dia/diagnostics.hpp"
#include "dia/eval.hpp"
#include "dia/trainer.hpp"

namespace fs = std::filesystem;
using namespace dia;

namespace {

constexpr int kOk = 0, kInvalid = 2, kNumerical = 3;

/// Raised when a gradient check exceeds its tolerance.
struct CheckFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string one_line(std::string s) {
  for (auto& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

int fail(const char* kind, const std::string& msg, int code) {
  std::cerr << "error: " << kind << ": " << one_line(msg) << '\n';
  return code;
}

RunConfig load_config(const std::string& path, std::optional<std::uint64_t> seed) {
  nlohmann::json j = nlohmann::json::object();
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config " + path);
    try {
      j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config " + path + " is not valid JSON: " + e.what());
    }
  }
  if (seed) j["seed"] = *seed;
  return RunConfig::from_json(j);
}

/// The run config with its data section replaced by the dataset's, re-validated.
RunConfig bind_data(RunConfig rc, const Dataset& d) {
  rc.data = d.config;
  rc.data.seed = derive_seed(rc.seed, "data");
  rc.validate();
  return rc;
}

std::vector<int> parse_ids(const std::string& spec, const Dataset& d) {
  std::vector<int> ids;
  if (spec == "test" || spec == "train" || spec == "val") return d.indices(parse_split(spec));
  std::stringstream ss(spec);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto dash = tok.find('-');
    try {
      if (dash == std::string::npos) {
        ids.push_back(std::stoi(tok));
      } else {
        const int lo = std::stoi(tok.substr(0, dash)), hi = std::stoi(tok.substr(dash + 1));
        for (int i = lo; i <= hi; ++i) ids.push_back(i);
      }
    } catch (const std::logic_error&) {
      throw ConfigError("--ids: cannot parse '" + tok + "'");
    }
  }
  if (ids.empty()) throw ConfigError("--ids: no sample ids given");
  for (int i : ids)
    if (i < 0 || i >= d.n) throw ConfigError("--ids: sample " + std::to_string(i) + " outside [0, " + std::to_string(d.n) + ")");
  return ids;
}

void require_file(const std::string& p, const char* what) {
  if (!fs::exists(p)) throw ConfigError(std::string(what) + " not found: " + p);
}

struct Args {
  std::string config, data, out, checkpoint, resume, ids, precision = "f32";
  std::optional<std::uint64_t> seed;
  long stop_after = -1;
  bool strip = false, quiet = false;
  int rows = 4, max_coords = 2;
  double step = 1e-3, tol = 1e-3;
};

int cmd_make_data(const Args& a) {
  const RunConfig rc = load_config(a.config, a.seed);
  Dataset d = make_dataset(rc.data);
  save_dataset(d, a.out);
  if (!a.quiet) std::cout << "wrote " << d.n << " samples to " << a.out << '\n';
  return kOk;
}

int cmd_train(const Args& a) {
  require_file(a.data, "dataset");
  const Dataset d = load_dataset(a.data);
  const RunConfig rc = bind_data(load_config(a.config, a.seed), d);
  FitOptions fo;
  if (!a.resume.empty()) {
    require_file(a.resume, "checkpoint");
    fo.resume = a.resume;
  }
  fo.stop_after = a.stop_after;
  if (!a.quiet) {
    const long every = std::max(1L, total_steps(rc) / 20);
    fo.on_step = [every](long step, const LossBreakdown& b) {
      if (step % every == 0) std::cout << "step " << step << ' ' << b.describe() << '\n';
    };
  }
  auto r = fit(d, rc, a.out, fo);
  if (!a.quiet) std::cout << "trained " << r.steps << " steps, best validation " << r.best_val << '\n';
  return kOk;
}

Checkpoint load_for_data(const std::string& ckpt, const Dataset& d) {
  require_file(ckpt, "checkpoint");
  Checkpoint c = load_checkpoint(ckpt);
  c.config = bind_data(c.config, d);
  return c;
}

int cmd_eval(const Args& a) {
  require_file(a.data, "dataset");
  const Dataset d = load_dataset(a.data);
  Checkpoint c = load_for_data(a.checkpoint, d);
  auto rep = resilience_eval(c.params, c.config, d);
  fs::path out = a.out;
  if (fs::is_directory(out) || out.extension().empty()) {
    fs::create_directories(out);
    out /= "eval_report.csv";
  }
  write_eval_report(rep, out);
  if (!a.quiet) std::cout << eval_csv_header() << '\n' << eval_csv_row(rep.first) << '\n' << eval_csv_row(rep.second) << '\n';
  return kOk;
}

int cmd_generate(const Args& a) {
  require_file(a.data, "dataset");
  const Dataset d = load_dataset(a.data);
  Checkpoint c = load_for_data(a.checkpoint, d);
  const auto ids = parse_ids(a.ids, d);
  auto t = infer_latents(c.params, c.config.model, d, ids, a.strip, true);
  std::ofstream file;
  if (!a.out.empty()) {
    file.open(a.out, std::ios::trunc);
    if (!file) throw IoError("cannot write " + a.out);
  }
  std::ostream& os = a.out.empty() ? std::cout : file;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const auto ref = detokenize(d.batch({ids[k]}).reports);
    const auto& gen = t.generated[k];
    nlohmann::json j = {{"id", ids[k]},
                        {"strip_context", a.strip},
                        {"language_present", t.present[k] != 0},
                        {"generated", gen},
                        {"reference", ref},
                        {"bleu4", bleu4(gen, ref)},
                        {"rouge_l", rouge_l(gen, ref)}};
    os << j.dump() << '\n';
  }
  return kOk;
}

int run_gradcheck(const Args& a, const RunConfig& rc) {
  GradCheckOptions o;
  o.step = a.step;
  o.max_coords = a.max_coords;
  std::vector<LossCheck> res;
  if (a.precision == "f32") res = gradcheck_suite<float>(rc, rc.seed, a.rows, o);
  else if (a.precision == "f64") res = gradcheck_suite<double>(rc, rc.seed, a.rows, o);
  else if (a.precision == "f32-ref") res = gradcheck_suite_reference(rc, rc.seed, a.rows, o);
  else throw ConfigError("--precision must be f32, f64 or f32-ref");
  std::cout << "loss,param,coords,max_rel_error,worst_analytic,worst_numeric\n";
  double worst = 0;
  std::string worst_where;
  for (const auto& c : res) {
    for (const auto& r : c.records) {
      int wi = r.coords.empty() ? -1 : r.coords.front();
      for (int i : r.coords)
        if (relative_error(r.analytic[i], r.numeric[i], o.floor) >= relative_error(r.analytic[wi], r.numeric[wi], o.floor))
          wi = i;
      std::cout << c.loss << ',' << r.name << ',' << r.coords.size() << ',' << fmt(r.max_rel_error) << ','
                << (wi < 0 ? "nan" : fmt(r.analytic[wi])) << ',' << (wi < 0 ? "nan" : fmt(r.numeric[wi])) << '\n';
    }
    if (c.max_rel_error > worst) {
      worst = c.max_rel_error;
      worst_where = c.loss;
    }
  }
  for (const auto& c : res) std::cout << "# " << c.loss << " max_rel_error=" << fmt(c.max_rel_error) << '\n';
  std::cout << "# precision=" << a.precision << " step=" << fmt(a.step) << " tolerance=" << fmt(a.tol)
            << " worst=" << fmt(worst) << '\n';
  if (!(worst <= a.tol)) throw CheckFailed("gradcheck: max relative error " + fmt(worst) + " in " + worst_where);
  return kOk;
}

int cmd_gradcheck(const Args& a) {
  return run_gradcheck(a, load_config(a.config, a.seed));
}

int cmd_export_latents(const Args& a) {
  require_file(a.data, "dataset");
  const Dataset d = load_dataset(a.data);
  Checkpoint c = load_for_data(a.checkpoint, d);
  fs::path out = a.out;
  if (fs::is_directory(out)) out /= "latents.csv";
  export_latents(c.params, c.config.model, d, out);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dia: tri-factor vision-language MoE-VAE toolkit"};
  app.require_subcommand(1);
  Args a;
  auto seed_opt = [&](CLI::App* s) {
    s->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& v) { a.seed = v; },
                                          "Override the config seed (all randomness derives from it)");
  };
  auto quiet = [&](CLI::App* s) { s->add_flag("-q,--quiet", a.quiet, "Suppress progress output"); };

  auto* mk = app.add_subcommand("make-data", "Generate the synthetic paired dataset");
  mk->add_option("--config", a.config, "Run config JSON (defaults when omitted)");
  mk->add_option("--out", a.out, "Output dataset directory")->required();
  seed_opt(mk);
  quiet(mk);

  auto* tr = app.add_subcommand("train", "Train a model; writes final.ckpt, best.ckpt, metrics.csv");
  tr->add_option("--config", a.config, "Run config JSON (defaults when omitted)");
  tr->add_option("--data", a.data, "Dataset directory from make-data")->required();
  tr->add_option("--out", a.out, "Output run directory")->required();
  tr->add_option("--resume", a.resume, "Continue from this checkpoint");
  tr->add_option("--stop-after", a.stop_after, "Stop after this many global steps (schedule unchanged)");
  seed_opt(tr);
  quiet(tr);

  auto* ev = app.add_subcommand("eval", "Evaluate the test split with and without context");
  ev->add_option("--checkpoint", a.checkpoint, "Checkpoint file")->required();
  ev->add_option("--data", a.data, "Dataset directory")->required();
  ev->add_option("--out", a.out, "eval_report.csv path, or a directory to hold it")->required();
  quiet(ev);

  auto* gen = app.add_subcommand("generate", "Greedy report generation as JSONL");
  gen->add_option("--checkpoint", a.checkpoint, "Checkpoint file")->required();
  gen->add_option("--data", a.data, "Dataset directory")->required();
  gen->add_option("--ids", a.ids, "Sample ids: '1,4,7', ranges '10-20', or a split name")->required();
  gen->add_flag("--strip-context", a.strip, "Replace every context by the null sequence");
  gen->add_option("--out", a.out, "Output JSONL file (stdout when omitted)");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every training loss");
  gc->add_option("--config", a.config, "Run config JSON (defaults when omitted)");
  gc->add_option("--precision", a.precision, "f32 (32-bit model and differences), f64, or f32-ref (32-bit gradients, double differences)")->capture_default_str();
  gc->add_option("--rows", a.rows, "Batch rows (last row context-stripped)")->capture_default_str();
  gc->add_option("--step", a.step, "Central-difference step")->capture_default_str();
  gc->add_option("--tolerance", a.tol, "Maximum allowed relative error")->capture_default_str();
  gc->add_option("--max-coords", a.max_coords, "Probe at most this many entries per parameter (0 = all)")
      ->capture_default_str();
  seed_opt(gc);

  auto* ex = app.add_subcommand("export-latents", "Write posterior-mean latents and true factors as CSV");
  ex->add_option("--checkpoint", a.checkpoint, "Checkpoint file")->required();
  ex->add_option("--data", a.data, "Dataset directory")->required();
  ex->add_option("--out", a.out, "latents.csv path or directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), kInvalid);
  }

  try {
    if (mk->parsed()) return cmd_make_data(a);
    if (tr->parsed()) return cmd_train(a);
    if (ev->parsed()) return cmd_eval(a);
    if (gen->parsed()) return cmd_generate(a);
    if (gc->parsed()) return cmd_gradcheck(a);
    if (ex->parsed()) return cmd_export_latents(a);
  } catch (const NumericalError& e) {
    return fail("numerical", e.what(), kNumerical);
  } catch (const CheckFailed& e) {
    return fail("numerical", e.what(), kNumerical);
  } catch (const ConfigError& e) {
    return fail("config", e.what(), kInvalid);
  } catch (const IoError& e) {
    return fail("io", e.what(), kInvalid);
  } catch (const std::invalid_argument& e) {
    return fail("invalid", e.what(), kInvalid);
  } catch (const std::out_of_range& e) {
    return fail("invalid", e.what(), kInvalid);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
  return kInvalid;
}
