#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "disdiff/nn.hpp"
#include "disdiff/tensor.hpp"

namespace disdiff {

// Named-tensor archive with a JSON metadata block.
//
// Layout (little-endian):
//   magic "DDCK" | u32 version | u64 meta_len | meta (UTF-8 JSON)
//   u64 n_tensors
//   per tensor: u32 name_len, name | u8 dtype (0 = f32, 1 = f64)
//               u32 ndim, u32 dims[ndim] | raw values
//
// Tensors are written in lexicographic name order so identical states always
// produce identical files.

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

template <typename S>
struct TrainState {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor<S>> tensors;

  const Tensor<S>& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
    return it->second;
  }
};

namespace detail {

template <typename T>
void ck_write(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T ck_read(std::istream& is, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is)
    throw std::runtime_error(
        std::string("checkpoint file: unexpected end of file while reading ") +
        what);
  return v;
}

template <typename S>
constexpr std::uint8_t dtype_tag() {
  static_assert(sizeof(S) == 4 || sizeof(S) == 8, "unsupported scalar");
  return sizeof(S) == 4 ? 0 : 1;
}

}  // namespace detail

template <typename S>
void save_checkpoint(const TrainState<S>& st, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os.write("DDCK", 4);
  detail::ck_write<std::uint32_t>(os, kCheckpointFormatVersion);
  std::string meta = st.meta.dump();
  detail::ck_write<std::uint64_t>(os, meta.size());
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  detail::ck_write<std::uint64_t>(os, st.tensors.size());
  for (const auto& [name, t] : st.tensors) {
    detail::ck_write<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::ck_write<std::uint8_t>(os, detail::dtype_tag<S>());
    detail::ck_write<std::uint32_t>(os,
                                    static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape)
      detail::ck_write<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(S)));
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

template <typename S>
TrainState<S> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint file: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DDCK", 4) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  auto version = detail::ck_read<std::uint32_t>(is, "version");
  if (version > kCheckpointFormatVersion)
    throw std::runtime_error(
        "checkpoint file " + path + " uses format version " +
        std::to_string(version) + "; this build supports up to version " +
        std::to_string(kCheckpointFormatVersion));
  TrainState<S> st;
  auto meta_len = detail::ck_read<std::uint64_t>(is, "metadata length");
  if (meta_len > (1ull << 30))
    throw std::runtime_error("checkpoint file: implausible metadata length");
  std::string meta(meta_len, '\0');
  is.read(meta.data(), static_cast<std::streamsize>(meta_len));
  if (!is)
    throw std::runtime_error(
        "checkpoint file: unexpected end of file while reading metadata");
  try {
    st.meta = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(std::string("checkpoint file: bad metadata: ") +
                             e.what());
  }
  auto n = detail::ck_read<std::uint64_t>(is, "tensor count");
  for (std::uint64_t i = 0; i < n; ++i) {
    auto name_len = detail::ck_read<std::uint32_t>(is, "tensor name length");
    if (name_len > 4096)
      throw std::runtime_error("checkpoint file: implausible tensor name");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is)
      throw std::runtime_error(
          "checkpoint file: unexpected end of file while reading tensor name");
    auto dtype = detail::ck_read<std::uint8_t>(is, "dtype");
    if (dtype != detail::dtype_tag<S>())
      throw std::runtime_error(
          "checkpoint tensor '" + name + "' has dtype tag " +
          std::to_string(dtype) + " but this build expects " +
          std::to_string(detail::dtype_tag<S>()));
    auto ndim = detail::ck_read<std::uint32_t>(is, "rank");
    if (ndim > 8) throw std::runtime_error("checkpoint file: implausible rank");
    std::vector<int> shape(ndim);
    std::int64_t numel = 1;
    for (auto& d : shape) {
      d = static_cast<int>(detail::ck_read<std::uint32_t>(is, "dimension"));
      numel *= d;
    }
    Tensor<S> t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(numel * sizeof(S)));
    if (!is)
      throw std::runtime_error(
          "checkpoint file: unexpected end of file in tensor '" + name + "'");
    st.tensors.emplace(std::move(name), std::move(t));
  }
  return st;
}

// ---- parameter <-> state plumbing -----------------------------------------

/// Store values and Adam moments of every parameter.
template <typename S>
void pack_params(TrainState<S>& st, const ParamList<S>& params,
                 const Adam<S>& opt) {
  for (const Param<S>* p : params) {
    st.tensors["param/" + p->name] = p->value;
    st.tensors["adam_m/" + p->name] = p->adam_m;
    st.tensors["adam_v/" + p->name] = p->adam_v;
  }
  st.meta["adam_step"] = opt.step_count;
}

template <typename S>
void unpack_params(const TrainState<S>& st, const ParamList<S>& params,
                   Adam<S>& opt) {
  for (Param<S>* p : params) {
    const auto& v = st.get("param/" + p->name);
    if (v.shape != p->value.shape)
      throw std::runtime_error("checkpoint: shape mismatch for '" + p->name +
                               "'");
    p->value = v;
    p->adam_m = st.get("adam_m/" + p->name);
    p->adam_v = st.get("adam_v/" + p->name);
  }
  opt.step_count = st.meta.value("adam_step", std::int64_t{0});
}

/// Store only values (frozen networks; no optimizer state).
template <typename S>
void pack_values(TrainState<S>& st, const ParamList<S>& params,
                 const std::string& prefix = "param/") {
  for (const Param<S>* p : params) st.tensors[prefix + p->name] = p->value;
}

template <typename S>
void unpack_values(const TrainState<S>& st, const ParamList<S>& params,
                   const std::string& prefix = "param/") {
  for (Param<S>* p : params) {
    const auto& v = st.get(prefix + p->name);
    if (v.shape != p->value.shape)
      throw std::runtime_error("checkpoint: shape mismatch for '" + p->name +
                               "'");
    p->value = v;
  }
}

template <typename S>
void pack_ema(TrainState<S>& st, const Ema<S>& ema) {
  for (const auto& [name, t] : ema.shadow) st.tensors["ema/" + name] = t;
  st.meta["ema_decay"] = ema.decay;
}

template <typename S>
void unpack_ema(const TrainState<S>& st, const ParamList<S>& params,
                Ema<S>& ema) {
  ema.shadow.clear();
  for (const Param<S>* p : params)
    ema.shadow[p->name] = st.get("ema/" + p->name);
  ema.decay = st.meta.value("ema_decay", ema.decay);
}

}  // namespace disdiff
