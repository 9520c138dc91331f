// disdiff: dataset generation, DPM pretraining, disentanglement training,
// sampling, swap grids and metric evaluation as one CLI.
//
// disdiff make-data|pretrain|disentangle|sample|swap|evaluate
//     --config PATH [--seed INT] [--out DIR] [--force]
//
// Exit code 0 on success; on failure a single machine-parsable line
//   error: category=<usage|config|io|format|state|numeric|internal> message=...
// goes to stderr. DISDIFF_OUT overrides the output root.

#include <CLI11.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "disdiff/checkpoint.hpp"
#include "disdiff/config.hpp"
#include "disdiff/data.hpp"
#include "disdiff/diffusion.hpp"
#include "disdiff/image_io.hpp"
#include "disdiff/metrics.hpp"
#include "disdiff/run_setup.hpp"
#include "disdiff/training.hpp"

namespace fs = std::filesystem;
using namespace disdiff;

namespace {

struct CliError : std::runtime_error {
  std::string category;
  CliError(std::string cat, const std::string& msg)
      : std::runtime_error(msg), category(std::move(cat)) {}
};

std::string classify(const std::exception& e) {
  std::string m = e.what();
  auto has = [&](const char* s) { return m.find(s) != std::string::npos; };
  if (dynamic_cast<const std::invalid_argument*>(&e)) return "config";
  if (has("non-finite")) return "numeric";
  if (has("not a ") || has("version") || has("unexpected end") ||
      has("implausible") || has("dtype"))
    return "format";
  if (has("cannot open") || has("write failed")) return "io";
  return "internal";
}

std::string one_line(std::string s) {
  for (auto& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

// ---- run context -----------------------------------------------------------

struct Run {
  RunConfig cfg;
  fs::path out;
  bool force = false;
  std::string hash;   // full config hash (artifact stamp)
  std::string mhash;  // dataset+model hash (checkpoint compatibility)
};

Run make_run(const std::string& config_path, int seed_override,
             const std::string& out_override, bool force) {
  Run r;
  r.force = force;
  r.cfg = load_run_config(config_path);
  if (seed_override >= 0) r.cfg.seed = static_cast<std::uint64_t>(seed_override);
  if (!out_override.empty()) {
    r.cfg.out_dir = out_override;
    r.out = out_override;
  } else if (const char* root = std::getenv("DISDIFF_OUT");
             root && *root != '\0') {
    // reroot the configured directory (absolute dirs keep their tail)
    r.out = fs::path(root) / fs::path(r.cfg.out_dir).relative_path();
  } else {
    r.out = r.cfg.out_dir;
  }
  r.hash = config_hash(r.cfg);
  r.mhash = model_hash(r.cfg);
  fs::create_directories(r.out);
  return r;
}

fs::path dataset_path(const Run& r) {
  fs::path p = r.cfg.dataset_file;
  return p.is_absolute() ? p : r.out / p;
}

std::string file_hash(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream os;
  os << is.rdbuf();
  return fnv1a_hex(os.str());
}

void write_sidecar(const fs::path& artifact, const Run& r,
                   const std::string& extra = "") {
  std::ofstream os(artifact.string() + ".meta.txt", std::ios::trunc);
  os << "config_hash=" << r.hash << "\n";
  if (!extra.empty()) os << extra;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

// ---- model plumbing --------------------------------------------------------

using S = float;

void check_checkpoint_meta(const nlohmann::json& meta, const Run& r,
                           const fs::path& path, bool full_hash) {
  std::string key = full_hash ? "config_hash" : "model_hash";
  std::string want = full_hash ? r.hash : r.mhash;
  if (!meta.contains(key) || meta[key] != want)
    throw CliError("state", "checkpoint " + path.string() +
                                " does not match the current config (" + key +
                                " mismatch)");
}

// ---- line-delimited training log with resume truncation --------------------

struct TrainLog {
  fs::path path;
  std::ofstream os;

  /// Start fresh (keep_step < 0) or keep the header plus lines whose step is
  /// <= keep_step, so a resumed run reproduces the uninterrupted log.
  void open(const fs::path& p, const std::string& hash, long keep_step) {
    path = p;
    std::vector<std::string> kept;
    if (keep_step >= 0) {
      std::ifstream is(p);
      std::string line;
      while (std::getline(is, line)) {
        if (line.rfind("# ", 0) == 0) {
          kept.push_back(line);
          continue;
        }
        long step = -1;
        if (sscanf(line.c_str(), "step=%ld", &step) == 1 && step <= keep_step)
          kept.push_back(line);
      }
    }
    os.open(p, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + p.string());
    if (kept.empty()) {
      os << "# config_hash=" << hash << "\n";
    } else {
      for (const auto& l : kept) os << l << "\n";
    }
    os.flush();
  }

  void line(const std::string& l) {
    os << l << "\n";
    os.flush();
  }
};

/// DISDIFF_MAX_STEPS caps the number of steps actually run this invocation
/// (simulating an interruption) without changing the configured target.
long effective_stop(long target) {
  if (const char* cap = std::getenv("DISDIFF_MAX_STEPS"); cap && *cap != '\0')
    return std::min(target, std::atol(cap));
  return target;
}

std::vector<std::int64_t> draw_batch(const FactorDataset& ds, int n, Rng& rng) {
  std::vector<std::int64_t> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = rng.uniform_int(ds.count());
  return idx;
}

std::vector<int> factor_subset(const FactorDataset& ds,
                               const std::string& names) {
  std::vector<int> subset;
  for (const auto& name : parse_name_list(names)) {
    int found = -1;
    for (int k = 0; k < ds.n_factors(); ++k)
      if (ds.spec[k].name == name) found = k;
    if (found < 0)
      throw std::invalid_argument("unknown factor name '" + name +
                                  "' in sampling.partial_factors");
    subset.push_back(found);
  }
  return subset;
}

// ---- commands --------------------------------------------------------------

int cmd_make_data(const Run& r) {
  fs::path p = dataset_path(r);
  if (fs::exists(p) && !r.force)
    throw CliError("exists", "dataset file " + p.string() +
                                 " already exists; pass --force to overwrite");
  auto spec = parse_factor_spec(r.cfg.factors);
  auto ds = generate_dataset(spec, r.cfg.image_size, r.cfg.dataset_seed);
  save_dataset(ds, p.string());
  write_sidecar(p, r, "dataset_hash=" + file_hash(p) + "\n");
  std::cout << "wrote " << p.string() << " (" << ds.count() << " images, hash "
            << file_hash(p) << ")\n";
  return 0;
}

int cmd_pretrain(const Run& r) {
  auto ds = load_dataset(dataset_path(r).string());
  auto sched = make_sched(r.cfg);
  auto model = build_model<S>(r.cfg);
  auto params = model.dpm_params();
  Adam<S> opt;
  opt.lr = r.cfg.lr;
  Ema<S> ema;
  ema.decay = r.cfg.ema_decay;
  ema.init_from(params);
  Rng rng(r.cfg.seed);
  fs::path ckpt = r.out / "dpm.ckpt";
  fs::path logp = r.out / "pretrain_log.txt";

  long start = 0;
  if (fs::exists(ckpt)) {
    auto st = load_checkpoint<S>(ckpt.string());
    check_checkpoint_meta(st.meta, r, ckpt, true);
    start = st.meta.value("global_step", std::int64_t{0});
    if (start >= r.cfg.pretrain_steps) {
      if (!r.force)
        throw CliError("exists", "checkpoint " + ckpt.string() +
                                     " is already complete; pass --force to "
                                     "retrain from scratch");
      start = 0;
    } else {
      unpack_params(st, params, opt);
      unpack_ema(st, params, ema);
      rng.restore(st.meta["rng"]);
    }
  }

  TrainLog log;
  log.open(logp, r.hash, start > 0 ? start : -1);

  auto save = [&](long step) {
    TrainState<S> st;
    pack_params(st, params, opt);
    pack_ema(st, ema);
    st.meta["global_step"] = step;
    st.meta["rng"] = rng.state();
    st.meta["config_hash"] = r.hash;
    st.meta["model_hash"] = r.mhash;
    RunConfig canon = r.cfg;
    canon.out_dir = "";  // a run's identity does not depend on its location
    st.meta["config"] = dump_run_config(canon);
    save_checkpoint(st, ckpt.string());
  };

  long stop = effective_stop(r.cfg.pretrain_steps);
  for (long s = start + 1; s <= stop; ++s) {
    auto x0 = ds.batch<S>(draw_batch(ds, r.cfg.batch_size, rng));
    for (auto& v : x0.data) v = S(2) * v - S(1);  // diffusion domain [-1,1]
    double loss = ddpm_train_step<S>(
        [&](GraphCtx<S>& ctx, typename Tape<S>::Var x,
            const std::vector<int>& t) {
          return model.eps_model.forward(ctx, x, t);
        },
        params, opt, &ema, sched, x0, rng);
    if (s % r.cfg.log_every == 0 || s == r.cfg.pretrain_steps)
      log.line("step=" + std::to_string(s) + " loss=" + fmt(loss));
    if (s % r.cfg.checkpoint_every == 0 || s == stop) save(s);
  }
  if (r.cfg.pretrain_steps == 0) save(0);
  std::cout << "pretrained " << r.cfg.pretrain_steps << " steps -> "
            << ckpt.string() << "\n";
  return 0;
}

/// Load the frozen DPM weights from the pretrain checkpoint.
void load_dpm_into(DisDiffModel<S>& model, const Run& r) {
  fs::path ckpt = r.out / "dpm.ckpt";
  auto st = load_checkpoint<S>(ckpt.string());
  check_checkpoint_meta(st.meta, r, ckpt, false);
  unpack_values(st, model.dpm_params());
}

int cmd_disentangle(const Run& r) {
  auto ds = load_dataset(dataset_path(r).string());
  auto sched = make_sched(r.cfg);
  auto model = build_model<S>(r.cfg);
  load_dpm_into(model, r);
  auto params = model.disdiff_params();
  Adam<S> opt;
  opt.lr = r.cfg.lr;
  Ema<S> ema;
  ema.decay = r.cfg.ema_decay;
  ema.init_from(params);
  Rng rng(r.cfg.seed + 1);  // stream distinct from pretraining
  fs::path ckpt = r.out / "disdiff.ckpt";
  fs::path logp = r.out / "disentangle_log.txt";

  long start = 0;
  if (fs::exists(ckpt)) {
    auto st = load_checkpoint<S>(ckpt.string());
    check_checkpoint_meta(st.meta, r, ckpt, true);
    start = st.meta.value("global_step", std::int64_t{0});
    if (start >= r.cfg.disentangle_steps) {
      if (!r.force)
        throw CliError("exists", "checkpoint " + ckpt.string() +
                                     " is already complete; pass --force to "
                                     "retrain from scratch");
      start = 0;
    } else {
      unpack_params(st, params, opt);
      unpack_ema(st, params, ema);
      rng.restore(st.meta["rng"]);
    }
  }

  TrainLog log;
  log.open(logp, r.hash, start > 0 ? start : -1);

  auto save = [&](long step) {
    TrainState<S> st;
    pack_params(st, params, opt);
    pack_values(st, model.dpm_params());  // frozen DPM travels along
    pack_ema(st, ema);
    st.meta["global_step"] = step;
    st.meta["rng"] = rng.state();
    st.meta["config_hash"] = r.hash;
    st.meta["model_hash"] = r.mhash;
    RunConfig canon = r.cfg;
    canon.out_dir = "";  // a run's identity does not depend on its location
    st.meta["config"] = dump_run_config(canon);
    save_checkpoint(st, ckpt.string());
  };

  long stop = effective_stop(r.cfg.disentangle_steps);
  for (long s = start + 1; s <= stop; ++s) {
    auto x0 = ds.batch<S>(draw_batch(ds, r.cfg.batch_size, rng));
    auto rep = disdiff_train_step<S>(model, x0, sched, rng, opt, &ema);
    if (s % r.cfg.log_every == 0 || s == r.cfg.disentangle_steps)
      log.line("step=" + std::to_string(s) + " L_r=" + fmt(rep.l_r) +
               " L_in=" + fmt(rep.l_in) + " L_va=" + fmt(rep.l_va) +
               " gamma_d=" + fmt(rep.gamma_d) + " L_a=" + fmt(rep.l_a));
    if (s % r.cfg.checkpoint_every == 0 || s == stop) save(s);
  }
  if (r.cfg.disentangle_steps == 0) save(0);
  std::cout << "disentangled " << r.cfg.disentangle_steps << " steps -> "
            << ckpt.string() << "\n";
  return 0;
}

DisDiffModel<S> load_trained_model(const Run& r) {
  return load_disdiff_model<S>(r.cfg, (r.out / "disdiff.ckpt").string());
}

Tensor<S> tile_rows(const Tensor<S>& one, int n) {
  std::vector<int> shape = one.shape;
  shape[0] = n;
  Tensor<S> out(shape);
  std::int64_t stride = one.numel();
  for (int i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < stride; ++j) out[i * stride + j] = one[j];
  return out;
}

Tensor<S> to_unit(Tensor<S> x) {
  for (auto& v : x.data)
    v = std::min(S(1), std::max(S(0), S(0.5) * (v + S(1))));
  return x;
}

int cmd_sample(const Run& r) {
  auto ds = load_dataset(dataset_path(r).string());
  auto sched = make_sched(r.cfg);
  auto model = load_trained_model(r);
  fs::path grid_png = r.out / "sample_grid.png";
  if (fs::exists(grid_png) && !r.force)
    throw CliError("exists", grid_png.string() +
                                 " already exists; pass --force to overwrite");
  if (r.cfg.target_index < 0 || r.cfg.target_index >= ds.count())
    throw std::invalid_argument("sampling.target_index out of range");
  auto subset = factor_subset(ds, r.cfg.partial_factors);

  auto target = ds.image<S>(r.cfg.target_index);
  auto z = tile_rows(model.encode(target), r.cfg.sample_count);
  Rng rng(r.cfg.seed + 2);
  std::vector<int> shape{r.cfg.sample_count, 3, r.cfg.image_size,
                         r.cfg.image_size};
  Tensor<S> x;
  if (r.cfg.sampler == "ddim") {
    auto grid = ddim_timesteps(sched.T, r.cfg.sample_steps);
    x = ddim_sample<S>(model.conditional_eps_fn(z, subset, &sched), sched,
                       rng.normal_tensor<S>(shape), grid);
  } else {
    x = ddpm_sample<S>(
        [&](const Tensor<S>& xt, const std::vector<int>& t) {
          return model.predict_eps(xt, t);
        },
        sched, shape, rng,
        subset.empty() ? ShiftFn<S>(nullptr)
                       : model.field_shift_fn(z, subset));
  }
  x = to_unit(std::move(x));

  int cols = std::min(8, r.cfg.sample_count);
  int rows = (r.cfg.sample_count + cols - 1) / cols;
  write_image_grid(grid_png.string(), x, rows, cols);
  TrainState<S> raw;
  raw.tensors["samples"] = x;
  raw.tensors["target"] = target;
  raw.meta["config_hash"] = r.hash;
  raw.meta["subset"] = subset;
  save_checkpoint(raw, (r.out / "samples.ckpt").string());
  write_sidecar(grid_png, r);
  std::cout << "wrote " << grid_png.string() << " (" << r.cfg.sample_count
            << " samples)\n";
  return 0;
}

int cmd_swap(const Run& r) {
  auto ds = load_dataset(dataset_path(r).string());
  auto sched = make_sched(r.cfg);
  auto model = load_trained_model(r);
  fs::path grid_png = r.out / "swap_grid.png";
  if (fs::exists(grid_png) && !r.force)
    throw CliError("exists", grid_png.string() +
                                 " already exists; pass --force to overwrite");
  int ia = r.cfg.swap_index_a, ib = r.cfg.swap_index_b;
  if (ia < 0 || ia >= ds.count() || ib < 0 || ib >= ds.count())
    throw std::invalid_argument("sampling.swap_index out of range");

  auto a = ds.image<S>(ia);
  auto b = ds.image<S>(ib);
  auto za = model.encode(a);
  auto zb = model.encode(b);
  int N = model.cfg.n_factors, d = model.cfg.z_dim;
  std::vector<int> all(N);
  std::iota(all.begin(), all.end(), 0);
  auto grid = ddim_timesteps(sched.T, r.cfg.sample_steps);

  Tensor<S> a_pm = a;
  for (auto& v : a_pm.data) v = S(2) * v - S(1);
  auto xT = ddim_invert<S>(model.conditional_eps_fn(za, all, &sched), sched,
                           a_pm, grid);

  Tensor<S> rows({N + 2, 3, r.cfg.image_size, r.cfg.image_size});
  std::int64_t stride = a.numel();
  for (std::int64_t j = 0; j < stride; ++j) {
    rows[j] = a[j];
    rows[stride + j] = b[j];
  }
  for (int c = 0; c < N; ++c) {
    Tensor<S> z_mix = za;
    for (int j = 0; j < d; ++j) z_mix[c * d + j] = zb[c * d + j];
    auto x = ddim_sample<S>(model.conditional_eps_fn(z_mix, all, &sched),
                            sched, xT, grid);
    x = to_unit(std::move(x));
    for (std::int64_t j = 0; j < stride; ++j) rows[(c + 2) * stride + j] = x[j];
  }
  write_image_grid(grid_png.string(), rows, N + 2, 1);
  TrainState<S> raw;
  raw.tensors["rows"] = rows;
  raw.meta["config_hash"] = r.hash;
  raw.meta["index_a"] = ia;
  raw.meta["index_b"] = ib;
  save_checkpoint(raw, (r.out / "swap.ckpt").string());
  write_sidecar(grid_png, r);
  std::cout << "wrote " << grid_png.string() << " (" << N + 2 << " rows)\n";
  return 0;
}

int cmd_evaluate(const Run& r) {
  auto ds = load_dataset(dataset_path(r).string());
  auto model = load_trained_model(r);
  fs::path report = r.out / "metrics.txt";
  if (fs::exists(report) && !r.force)
    throw CliError("exists", report.string() +
                                 " already exists; pass --force to overwrite");

  // representations for every dataset sample, post-processed per slot
  int n = static_cast<int>(ds.count());
  int N = model.cfg.n_factors, d = model.cfg.z_dim;
  Tensor<double> reps({n, N, d});
  const int chunk = 16;
  for (int i0 = 0; i0 < n; i0 += chunk) {
    std::vector<std::int64_t> idx;
    for (int i = i0; i < std::min(n, i0 + chunk); ++i) idx.push_back(i);
    auto z = model.encode(ds.batch<S>(idx));
    for (size_t b = 0; b < idx.size(); ++b)
      for (int j = 0; j < N * d; ++j)
        reps[(i0 + b) * N * d + j] = static_cast<double>(z[b * N * d + j]);
  }
  auto pca = pca_postprocess(reps, r.cfg.pca_components);

  auto seeds = parse_int_list(r.cfg.metric_seeds, "evaluate.metric_seeds");
  DciOptions dci_opt;
  dci_opt.predictor = r.cfg.dci_predictor;
  std::vector<double> fv, dci, mg;
  std::vector<std::string> warnings = pca.warnings;
  for (int seed : seeds) {
    Rng mr(static_cast<std::uint64_t>(seed));
    fv.push_back(factor_vae_score(pca.matrix, ds, {}, mr));
    auto dr = dci_disentanglement(pca.matrix, ds, dci_opt);
    dci.push_back(dr.disentanglement);
    warnings.insert(warnings.end(), dr.warnings.begin(), dr.warnings.end());
    mg.push_back(mig(pca.matrix, ds).mig);
  }
  auto mean_std = [](const std::vector<double>& v) {
    double m = 0, s = 0;
    for (double x : v) m += x / v.size();
    for (double x : v) s += (x - m) * (x - m);
    s = v.size() > 1 ? std::sqrt(s / (v.size() - 1)) : 0.0;
    return std::pair<double, double>(m, s);
  };

  std::ofstream os(report, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + report.string());
  os.precision(10);
  os << "# config_hash=" << r.hash << "\n";
  os << "# dataset_hash=" << file_hash(dataset_path(r)) << "\n";
  const char* names[3] = {"factor_vae", "dci", "mig"};
  const std::vector<double>* vals[3] = {&fv, &dci, &mg};
  for (int i = 0; i < 3; ++i) {
    auto [m, s] = mean_std(*vals[i]);
    os << "metric=" << names[i] << " mean=" << fmt(m) << " std=" << fmt(s)
       << " values=";
    for (size_t j = 0; j < vals[i]->size(); ++j)
      os << (j ? "," : "") << fmt((*vals[i])[j]);
    os << "\n";
  }
  for (const auto& w : warnings) os << "# warning: " << one_line(w) << "\n";
  os << "# config snapshot follows\n";
  RunConfig canon = r.cfg;
  canon.out_dir = "";
  std::istringstream snap(dump_run_config(canon));
  std::string line;
  while (std::getline(snap, line)) os << "## " << line << "\n";
  std::cout << "wrote " << report.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DisDiff: disentanglement of a pretrained DDPM"};
  app.require_subcommand(1);
  std::string config_path, out_override;
  int seed_override = -1;
  bool force = false;

  std::vector<std::string> names{"make-data", "pretrain", "disentangle",
                                 "sample",    "swap",     "evaluate"};
  for (const auto& n : names) {
    auto* sub = app.add_subcommand(n);
    sub->add_option("--config", config_path, "run config file")->required();
    sub->add_option("--seed", seed_override, "override training.seed");
    sub->add_option("--out", out_override, "override output directory");
    sub->add_flag("--force", force, "overwrite existing outputs");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error: category=usage message=" << one_line(e.what())
              << "\n";
    return 2;
  }

  try {
    Run r = make_run(config_path, seed_override, out_override, force);
    std::string cmd = app.get_subcommands()[0]->get_name();
    if (cmd == "make-data") return cmd_make_data(r);
    if (cmd == "pretrain") return cmd_pretrain(r);
    if (cmd == "disentangle") return cmd_disentangle(r);
    if (cmd == "sample") return cmd_sample(r);
    if (cmd == "swap") return cmd_swap(r);
    if (cmd == "evaluate") return cmd_evaluate(r);
    std::cerr << "error: category=usage message=unknown command\n";
    return 2;
  } catch (const CliError& e) {
    std::cerr << "error: category=" << e.category
              << " message=" << one_line(e.what()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: category=" << classify(e)
              << " message=" << one_line(e.what()) << "\n";
    return 1;
  }
}
