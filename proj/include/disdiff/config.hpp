#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "disdiff/data.hpp"
#include "disdiff/unet.hpp"

namespace disdiff {

// Run configuration: flat key-value text with [section] headers. Unknown
// keys are rejected so typos fail loudly. A run is reproducible from
// (config, seed) alone; every artifact is stamped with config_hash().

struct RunConfig {
  // [dataset]
  std::string factors = "hue:4:hue,x:4:x-pos,scale:3:scale";
  int image_size = 32;
  std::uint64_t dataset_seed = 0;
  std::string dataset_file = "dataset.bin";

  // [model]
  int n_factors = 3;
  int z_dim = 32;
  int pos_embed_dim = 64;
  int base_channels = 32;
  std::string channel_mults = "1,2,2";
  int num_res_blocks = 1;
  std::string attn_resolutions = "8";
  int num_heads = 4;
  double dropout = 0.1;
  int time_embed_dim = 64;
  int timesteps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  bool clamp_denoised = false;

  // [training]
  int pretrain_steps = 5000;
  int disentangle_steps = 5000;
  int batch_size = 16;
  double lr = 1e-4;
  double lambda = 0.05;
  double ema_decay = 0.9999;
  int log_every = 10;
  int checkpoint_every = 100;
  std::uint64_t seed = 0;

  // [sampling]
  int sample_steps = 200;
  std::string sampler = "ddim";
  int sample_count = 16;
  std::string partial_factors = "";  // factor subset S by name, comma-separated
  int target_index = 0;              // conditioning target for `sample`
  int swap_index_a = 0;
  int swap_index_b = 1;

  // [evaluate]
  std::string metric_seeds = "0,1,2";
  int pca_components = 1;
  std::string dci_predictor = "lasso";

  // [output]
  std::string out_dir = "runs/default";
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline int cfg_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    throw std::invalid_argument("config: key '" + key +
                                "' needs an integer, got '" + v + "'");
  }
}

inline std::uint64_t cfg_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    std::uint64_t r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    throw std::invalid_argument("config: key '" + key +
                                "' needs an unsigned integer, got '" + v + "'");
  }
}

inline double cfg_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    throw std::invalid_argument("config: key '" + key +
                                "' needs a number, got '" + v + "'");
  }
}

inline bool cfg_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: key '" + key +
                              "' needs true/false, got '" + v + "'");
}

}  // namespace detail

/// Parse "a,b,c" into integers.
inline std::vector<int> parse_int_list(const std::string& s,
                                       const std::string& what) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = detail::trim(item);
    if (item.empty()) continue;
    out.push_back(detail::cfg_int(what, item));
  }
  if (out.empty())
    throw std::invalid_argument("config: empty list for " + what);
  return out;
}

inline std::vector<std::string> parse_name_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = detail::trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// Parse "name:cardinality:role,..." into a factor spec.
inline std::vector<FactorSpec> parse_factor_spec(const std::string& s) {
  std::vector<FactorSpec> spec;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = detail::trim(item);
    if (item.empty()) continue;
    size_t p1 = item.find(':');
    size_t p2 = p1 == std::string::npos ? std::string::npos
                                        : item.find(':', p1 + 1);
    if (p2 == std::string::npos)
      throw std::invalid_argument(
          "config: factor entry '" + item +
          "' must look like name:cardinality:role");
    FactorSpec f;
    f.name = detail::trim(item.substr(0, p1));
    f.cardinality = detail::cfg_int("factors", item.substr(p1 + 1, p2 - p1 - 1));
    f.role = factor_role_from_string(detail::trim(item.substr(p2 + 1)));
    spec.push_back(std::move(f));
  }
  if (spec.empty()) throw std::invalid_argument("config: empty factor spec");
  return spec;
}

inline RunConfig parse_run_config(std::istream& is, const std::string& origin) {
  std::map<std::string, std::string> kv;
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                    ": malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                  ": expected key = value");
    std::string key = section + "." + detail::trim(line.substr(0, eq));
    if (kv.count(key))
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                  ": duplicate key '" + key + "'");
    kv[key] = detail::trim(line.substr(eq + 1));
  }

  RunConfig c;
  auto take = [&](const std::string& key, auto set) {
    auto it = kv.find(key);
    if (it != kv.end()) {
      set(key, it->second);
      kv.erase(it);
    }
  };
  auto str = [](std::string& dst) {
    return [&dst](const std::string&, const std::string& v) { dst = v; };
  };
  auto num = [](int& dst) {
    return [&dst](const std::string& k, const std::string& v) {
      dst = detail::cfg_int(k, v);
    };
  };
  auto u64 = [](std::uint64_t& dst) {
    return [&dst](const std::string& k, const std::string& v) {
      dst = detail::cfg_u64(k, v);
    };
  };
  auto dbl = [](double& dst) {
    return [&dst](const std::string& k, const std::string& v) {
      dst = detail::cfg_double(k, v);
    };
  };
  auto bol = [](bool& dst) {
    return [&dst](const std::string& k, const std::string& v) {
      dst = detail::cfg_bool(k, v);
    };
  };

  take("dataset.factors", str(c.factors));
  take("dataset.image_size", num(c.image_size));
  take("dataset.seed", u64(c.dataset_seed));
  take("dataset.file", str(c.dataset_file));

  take("model.n_factors", num(c.n_factors));
  take("model.z_dim", num(c.z_dim));
  take("model.pos_embed_dim", num(c.pos_embed_dim));
  take("model.base_channels", num(c.base_channels));
  take("model.channel_mults", str(c.channel_mults));
  take("model.num_res_blocks", num(c.num_res_blocks));
  take("model.attn_resolutions", str(c.attn_resolutions));
  take("model.num_heads", num(c.num_heads));
  take("model.dropout", dbl(c.dropout));
  take("model.time_embed_dim", num(c.time_embed_dim));
  take("model.timesteps", num(c.timesteps));
  take("model.beta_start", dbl(c.beta_start));
  take("model.beta_end", dbl(c.beta_end));
  take("model.clamp_denoised", bol(c.clamp_denoised));

  take("training.pretrain_steps", num(c.pretrain_steps));
  take("training.disentangle_steps", num(c.disentangle_steps));
  take("training.batch_size", num(c.batch_size));
  take("training.lr", dbl(c.lr));
  take("training.lambda", dbl(c.lambda));
  take("training.ema_decay", dbl(c.ema_decay));
  take("training.log_every", num(c.log_every));
  take("training.checkpoint_every", num(c.checkpoint_every));
  take("training.seed", u64(c.seed));

  take("sampling.steps", num(c.sample_steps));
  take("sampling.sampler", str(c.sampler));
  take("sampling.count", num(c.sample_count));
  take("sampling.partial_factors", str(c.partial_factors));
  take("sampling.target_index", num(c.target_index));
  take("sampling.swap_index_a", num(c.swap_index_a));
  take("sampling.swap_index_b", num(c.swap_index_b));

  take("evaluate.metric_seeds", str(c.metric_seeds));
  take("evaluate.pca_components", num(c.pca_components));
  take("evaluate.dci_predictor", str(c.dci_predictor));

  take("output.dir", str(c.out_dir));

  if (!kv.empty())
    throw std::invalid_argument("config: unknown key '" + kv.begin()->first +
                                "' in " + origin);
  if (c.sampler != "ddim" && c.sampler != "ddpm")
    throw std::invalid_argument("config: sampling.sampler must be ddim or ddpm");
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file: " + path);
  return parse_run_config(is, path);
}

/// Canonical serialization: fixed section/key order, effective values.
inline std::string dump_run_config(const RunConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "[dataset]\n"
     << "factors = " << c.factors << "\n"
     << "image_size = " << c.image_size << "\n"
     << "seed = " << c.dataset_seed << "\n"
     << "file = " << c.dataset_file << "\n"
     << "\n[model]\n"
     << "n_factors = " << c.n_factors << "\n"
     << "z_dim = " << c.z_dim << "\n"
     << "pos_embed_dim = " << c.pos_embed_dim << "\n"
     << "base_channels = " << c.base_channels << "\n"
     << "channel_mults = " << c.channel_mults << "\n"
     << "num_res_blocks = " << c.num_res_blocks << "\n"
     << "attn_resolutions = " << c.attn_resolutions << "\n"
     << "num_heads = " << c.num_heads << "\n"
     << "dropout = " << c.dropout << "\n"
     << "time_embed_dim = " << c.time_embed_dim << "\n"
     << "timesteps = " << c.timesteps << "\n"
     << "beta_start = " << c.beta_start << "\n"
     << "beta_end = " << c.beta_end << "\n"
     << "clamp_denoised = " << (c.clamp_denoised ? "true" : "false") << "\n"
     << "\n[training]\n"
     << "pretrain_steps = " << c.pretrain_steps << "\n"
     << "disentangle_steps = " << c.disentangle_steps << "\n"
     << "batch_size = " << c.batch_size << "\n"
     << "lr = " << c.lr << "\n"
     << "lambda = " << c.lambda << "\n"
     << "ema_decay = " << c.ema_decay << "\n"
     << "log_every = " << c.log_every << "\n"
     << "checkpoint_every = " << c.checkpoint_every << "\n"
     << "seed = " << c.seed << "\n"
     << "\n[sampling]\n"
     << "steps = " << c.sample_steps << "\n"
     << "sampler = " << c.sampler << "\n"
     << "count = " << c.sample_count << "\n"
     << "partial_factors = " << c.partial_factors << "\n"
     << "target_index = " << c.target_index << "\n"
     << "swap_index_a = " << c.swap_index_a << "\n"
     << "swap_index_b = " << c.swap_index_b << "\n"
     << "\n[evaluate]\n"
     << "metric_seeds = " << c.metric_seeds << "\n"
     << "pca_components = " << c.pca_components << "\n"
     << "dci_predictor = " << c.dci_predictor << "\n"
     << "\n[output]\n"
     << "dir = " << c.out_dir << "\n";
  return os.str();
}

/// FNV-1a 64-bit over bytes, hex-encoded.
inline std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

/// Hash of the canonical config text; stamped on every artifact. The output
/// directory is excluded so relocating a run does not change its identity.
inline std::string config_hash(const RunConfig& c) {
  RunConfig canon = c;
  canon.out_dir = "";
  return fnv1a_hex(dump_run_config(canon));
}

/// Hash of the dataset + model sections only: checkpoint compatibility.
/// Sampling/evaluation settings may change without invalidating a trained
/// model, so they are excluded here.
inline std::string model_hash(const RunConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << c.factors << "|" << c.image_size << "|" << c.dataset_seed << "|"
     << c.n_factors << "|" << c.z_dim << "|" << c.pos_embed_dim << "|"
     << c.base_channels << "|" << c.channel_mults << "|" << c.num_res_blocks
     << "|" << c.attn_resolutions << "|" << c.num_heads << "|" << c.dropout
     << "|" << c.time_embed_dim << "|" << c.timesteps << "|" << c.beta_start
     << "|" << c.beta_end << "|" << c.clamp_denoised;
  return fnv1a_hex(os.str());
}

/// Model plumbing derived from the config.
inline UNetConfig unet_config_from(const RunConfig& c) {
  UNetConfig u;
  u.base_channels = c.base_channels;
  u.channel_mults = parse_int_list(c.channel_mults, "model.channel_mults");
  u.num_res_blocks = c.num_res_blocks;
  u.attn_resolutions =
      parse_int_list(c.attn_resolutions, "model.attn_resolutions");
  u.num_heads = c.num_heads;
  u.dropout = c.dropout;
  u.time_embed_dim = c.time_embed_dim;
  return u;
}

}  // namespace disdiff
