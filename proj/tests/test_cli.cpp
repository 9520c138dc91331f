// External CLI contracts: subcommands, error categories, overwrite refusal,
// environment overrides, reproducibility and resume.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct CmdResult {
  int exit_code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)),
                     std::istreambuf_iterator<char>());
}

CmdResult run_cli(const std::string& args, const std::string& env = "") {
  static int serial = 0;
  fs::path out = fs::temp_directory_path() /
                 ("disdiff_cli_out_" + std::to_string(serial));
  fs::path err = fs::temp_directory_path() /
                 ("disdiff_cli_err_" + std::to_string(serial));
  ++serial;
  std::string cmd = env + " " + std::string(DISDIFF_CLI_PATH) + " " + args +
                    " > " + out.string() + " 2> " + err.string();
  int status = std::system(cmd.c_str());
  CmdResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  fs::remove(out);
  fs::remove(err);
  return r;
}

fs::path fresh_dir(const std::string& name) {
  fs::path d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

/// Tiny config: everything scaled for seconds-long smoke runs.
fs::path write_config(const fs::path& dir, const std::string& extra = "") {
  fs::path p = dir / "run.cfg";
  std::ofstream os(p);
  os << "[dataset]\n"
        "factors = hue:4:hue,x:4:x-pos,scale:3:scale\n"
        "image_size = 16\n"
        "seed = 0\n"
        "[model]\n"
        "n_factors = 3\n"
        "z_dim = 8\n"
        "pos_embed_dim = 16\n"
        "base_channels = 8\n"
        "channel_mults = 1,2\n"
        "num_res_blocks = 1\n"
        "attn_resolutions = 8\n"
        "num_heads = 2\n"
        "dropout = 0.0\n"
        "time_embed_dim = 16\n"
        "timesteps = 50\n"
        "[training]\n"
        "pretrain_steps = 6\n"
        "disentangle_steps = 6\n"
        "batch_size = 2\n"
        "log_every = 2\n"
        "checkpoint_every = 3\n"
        "seed = 3\n"
        "[sampling]\n"
        "steps = 5\n"
        "count = 2\n"
        "partial_factors = hue\n"
        "target_index = 1\n"
        "swap_index_a = 0\n"
        "swap_index_b = 40\n"
        "[evaluate]\n"
        "metric_seeds = 0,1\n"
        "[output]\n"
        "dir = "
     << (dir / "out").string() << "\n"
     << extra;
  return p;
}

std::string cfg_arg(const fs::path& p) { return "--config " + p.string(); }

}  // namespace

TEST_CASE("make-data writes 48 images and refuses silent overwrite") {
  auto dir = fresh_dir("disdiff_cli_makedata");
  auto cfg = write_config(dir);
  auto r = run_cli("make-data " + cfg_arg(cfg));
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("48 images") != std::string::npos);
  REQUIRE(fs::exists(dir / "out/dataset.bin"));
  auto first = slurp(dir / "out/dataset.bin");

  auto again = run_cli("make-data " + cfg_arg(cfg));
  CHECK(again.exit_code != 0);
  CHECK(again.err.find("category=exists") != std::string::npos);
  CHECK(again.err.find('\n') == again.err.size() - 1);  // single line
  CHECK(slurp(dir / "out/dataset.bin") == first);       // untouched

  auto forced = run_cli("make-data " + cfg_arg(cfg) + " --force");
  CHECK(forced.exit_code == 0);
  CHECK(slurp(dir / "out/dataset.bin") == first);  // same seed, same bytes
}

TEST_CASE("config and usage errors are single-line and categorized") {
  auto dir = fresh_dir("disdiff_cli_errors");
  auto cfg = write_config(dir, "[dataset]\nbogus_key = 1\n");
  // duplicate section is fine; unknown key is not
  auto r = run_cli("make-data " + cfg_arg(cfg));
  CHECK(r.exit_code != 0);
  CHECK(r.err.find("category=config") != std::string::npos);
  CHECK(r.err.find("bogus_key") != std::string::npos);
  CHECK(r.err.find('\n') == r.err.size() - 1);

  auto usage = run_cli("frobnicate --config " + cfg.string());
  CHECK(usage.exit_code != 0);
  CHECK(usage.err.find("category=usage") != std::string::npos);

  auto nocfg = run_cli("pretrain");
  CHECK(nocfg.exit_code != 0);
  CHECK(nocfg.err.find("category=usage") != std::string::npos);

  auto missing = run_cli("pretrain --config " + (dir / "nope.cfg").string());
  CHECK(missing.exit_code != 0);
  CHECK(missing.err.find("category=io") != std::string::npos);
}

TEST_CASE("disentangle without a pretrain checkpoint fails cleanly") {
  auto dir = fresh_dir("disdiff_cli_nodpm");
  auto cfg = write_config(dir);
  REQUIRE(run_cli("make-data " + cfg_arg(cfg)).exit_code == 0);
  auto r = run_cli("disentangle " + cfg_arg(cfg));
  CHECK(r.exit_code != 0);
  CHECK(r.err.find("category=io") != std::string::npos);
}

TEST_CASE("full pipeline emits every artifact with config-hash stamps") {
  auto dir = fresh_dir("disdiff_cli_pipeline");
  auto cfg = write_config(dir);
  for (const char* cmd :
       {"make-data", "pretrain", "disentangle", "sample", "swap", "evaluate"}) {
    auto r = run_cli(std::string(cmd) + " " + cfg_arg(cfg));
    INFO(cmd, ": ", r.err);
    REQUIRE(r.exit_code == 0);
  }
  fs::path out = dir / "out";
  for (const char* f :
       {"dataset.bin", "dpm.ckpt", "disdiff.ckpt", "pretrain_log.txt",
        "disentangle_log.txt", "sample_grid.png", "swap_grid.png",
        "samples.ckpt", "swap.ckpt", "metrics.txt"})
    CHECK(fs::exists(out / f));

  // logs: hash header then line-delimited records with the required fields
  auto dlog = slurp(out / "disentangle_log.txt");
  CHECK(dlog.rfind("# config_hash=", 0) == 0);
  std::istringstream is(dlog);
  std::string line;
  std::getline(is, line);
  int records = 0;
  while (std::getline(is, line)) {
    for (const char* key :
         {"step=", " L_r=", " L_in=", " L_va=", " gamma_d=", " L_a="})
      CHECK(line.find(key) != std::string::npos);
    ++records;
  }
  CHECK(records == 3);  // steps 2, 4, 6

  auto plog = slurp(out / "pretrain_log.txt");
  CHECK(plog.rfind("# config_hash=", 0) == 0);
  CHECK(plog.find("loss=") != std::string::npos);

  // metric report: three metrics with mean/std, dataset hash, snapshot
  auto rep = slurp(out / "metrics.txt");
  for (const char* key : {"# config_hash=", "# dataset_hash=",
                          "metric=factor_vae", "metric=dci", "metric=mig",
                          " mean=", " std=", "# config snapshot follows"})
    CHECK(rep.find(key) != std::string::npos);

  // grids carry the config hash via sidecars
  auto side = slurp(out / "sample_grid.png.meta.txt");
  CHECK(side.rfind("config_hash=", 0) == 0);

  // PNG magic
  auto png = slurp(out / "swap_grid.png");
  REQUIRE(png.size() > 8);
  CHECK(static_cast<unsigned char>(png[0]) == 0x89);
  CHECK(png.substr(1, 3) == "PNG");
}

TEST_CASE("reruns are bit-identical; interrupted runs resume seamlessly") {
  auto dir_a = fresh_dir("disdiff_cli_rep_a");
  auto dir_b = fresh_dir("disdiff_cli_rep_b");
  auto cfg_a = write_config(dir_a);
  auto cfg_b = write_config(dir_b);

  for (const char* cmd : {"make-data", "pretrain", "disentangle"})
    REQUIRE(run_cli(std::string(cmd) + " " + cfg_arg(cfg_a)).exit_code == 0);

  // run B: interrupted after 4 steps (off the checkpoint cadence), resumed
  REQUIRE(run_cli("make-data " + cfg_arg(cfg_b)).exit_code == 0);
  for (const char* cmd : {"pretrain", "disentangle"}) {
    REQUIRE(run_cli(std::string(cmd) + " " + cfg_arg(cfg_b),
                    "DISDIFF_MAX_STEPS=4")
                .exit_code == 0);
    REQUIRE(run_cli(std::string(cmd) + " " + cfg_arg(cfg_b)).exit_code == 0);
  }
  // identical configs differ only in out dir, which artifacts exclude
  for (const char* f : {"dataset.bin", "dpm.ckpt", "disdiff.ckpt",
                        "pretrain_log.txt", "disentangle_log.txt"})
    CHECK(slurp(dir_a / "out" / f) == slurp(dir_b / "out" / f));

  // completed training refuses to restart without --force
  auto done = run_cli("pretrain " + cfg_arg(cfg_a));
  CHECK(done.exit_code != 0);
  CHECK(done.err.find("category=exists") != std::string::npos);

  // downstream artifacts are deterministic too
  for (const auto* cfg : {&cfg_a, &cfg_b}) {
    REQUIRE(run_cli("sample " + cfg_arg(*cfg)).exit_code == 0);
    REQUIRE(run_cli("evaluate " + cfg_arg(*cfg)).exit_code == 0);
  }
  CHECK(slurp(dir_a / "out/sample_grid.png") ==
        slurp(dir_b / "out/sample_grid.png"));
  CHECK(slurp(dir_a / "out/metrics.txt") == slurp(dir_b / "out/metrics.txt"));
}

TEST_CASE("seed flag, out flag and output-root env override") {
  auto dir = fresh_dir("disdiff_cli_overrides");
  auto cfg = write_config(dir);

  // DISDIFF_OUT reroots the configured relative-or-absolute dir under it
  auto r = run_cli("make-data " + cfg_arg(cfg),
                   "DISDIFF_OUT=" + (dir / "root").string());
  CHECK(r.exit_code == 0);
  // configured dir is absolute here; path concatenation keeps it under root
  CHECK(fs::exists(dir / "root"));

  // --out beats both
  auto r2 = run_cli("make-data " + cfg_arg(cfg) + " --out " +
                        (dir / "explicit").string(),
                    "DISDIFF_OUT=" + (dir / "ignored").string());
  CHECK(r2.exit_code == 0);
  CHECK(fs::exists(dir / "explicit/dataset.bin"));
  CHECK(!fs::exists(dir / "ignored"));

  // --seed changes training outputs
  auto out_a = dir / "seed_a";
  auto out_b = dir / "seed_b";
  for (const auto& o : {out_a, out_b})
    REQUIRE(
        run_cli("make-data " + cfg_arg(cfg) + " --out " + o.string())
            .exit_code == 0);
  REQUIRE(run_cli("pretrain " + cfg_arg(cfg) + " --seed 3 --out " +
                  out_a.string())
              .exit_code == 0);
  REQUIRE(run_cli("pretrain " + cfg_arg(cfg) + " --seed 4 --out " +
                  out_b.string())
              .exit_code == 0);
  CHECK(slurp(out_a / "pretrain_log.txt") != slurp(out_b / "pretrain_log.txt"));
}
