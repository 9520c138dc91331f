#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "disdiff/random.hpp"
#include "disdiff/tensor.hpp"

namespace disdiff {

/// Which visual attribute a factor drives in the procedural renderer.
enum class FactorRole : std::uint32_t {
  ObjectHue = 0,
  BackgroundHue = 1,
  XPos = 2,
  YPos = 3,
  Scale = 4,
  Shape = 5,
};

inline FactorRole factor_role_from_string(const std::string& s) {
  if (s == "hue" || s == "object-hue") return FactorRole::ObjectHue;
  if (s == "background-hue") return FactorRole::BackgroundHue;
  if (s == "x-pos") return FactorRole::XPos;
  if (s == "y-pos") return FactorRole::YPos;
  if (s == "scale") return FactorRole::Scale;
  if (s == "shape") return FactorRole::Shape;
  throw std::invalid_argument("unknown renderer role: " + s);
}

inline std::string factor_role_name(FactorRole r) {
  switch (r) {
    case FactorRole::ObjectHue: return "hue";
    case FactorRole::BackgroundHue: return "background-hue";
    case FactorRole::XPos: return "x-pos";
    case FactorRole::YPos: return "y-pos";
    case FactorRole::Scale: return "scale";
    case FactorRole::Shape: return "shape";
  }
  return "?";
}

struct FactorSpec {
  std::string name;
  int cardinality = 2;
  FactorRole role = FactorRole::ObjectHue;
};

inline std::vector<FactorSpec> default_factor_spec() {
  return {{"hue", 4, FactorRole::ObjectHue},
          {"x", 4, FactorRole::XPos},
          {"scale", 3, FactorRole::Scale}};
}

namespace detail {

inline void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0) / 60.0;
  int i = static_cast<int>(h) % 6;
  double f = h - std::floor(h);
  double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
    default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
  }
}

/// Signed distance (pixels) from point (x,y) to the object boundary.
inline double shape_sdf(int shape, double x, double y, double cx, double cy,
                        double r) {
  double dx = x - cx, dy = y - cy;
  switch (shape) {
    case 1: {  // square
      double ax = std::abs(dx) - r, ay = std::abs(dy) - r;
      double ox = std::max(ax, 0.0), oy = std::max(ay, 0.0);
      return std::sqrt(ox * ox + oy * oy) + std::min(std::max(ax, ay), 0.0);
    }
    case 2: {  // equilateral triangle, half-edge r
      const double k = std::sqrt(3.0);
      double px = std::abs(dx) - r;
      double py = dy + r / k;
      if (px + k * py > 0) {
        double nx = (px - k * py) / 2.0, ny = (-k * px - py) / 2.0;
        px = nx;
        py = ny;
      }
      px -= std::clamp(px, -2.0 * r, 0.0);
      double len = std::sqrt(px * px + py * py);
      return py > 0 ? -len : len;
    }
    case 3: {  // diamond (rotated square)
      double m = (std::abs(dx) + std::abs(dy) - r) / std::sqrt(2.0);
      return m;
    }
    default:  // circle
      return std::sqrt(dx * dx + dy * dy) - r;
  }
}

}  // namespace detail

/// Render one image (3·H·W, CHW, values in [0,1]) from a label row. Pure in
/// (spec, labels, image_size); anti-aliased via a signed-distance coverage
/// ramp one pixel wide.
inline std::vector<double> render_image(const std::vector<FactorSpec>& spec,
                                        const std::vector<int>& labels,
                                        int image_size) {
  double hue = 0.0, bg_hue = -1.0;
  double ux = 0.5, uy = 0.5, us = 0.5;
  int shape = 0;
  for (size_t k = 0; k < spec.size(); ++k) {
    int card = spec[k].cardinality;
    double u = card == 1 ? 0.5
                         : static_cast<double>(labels[k]) / (card - 1);
    switch (spec[k].role) {
      case FactorRole::ObjectHue:
        hue = 360.0 * labels[k] / card;
        break;
      case FactorRole::BackgroundHue:
        bg_hue = 360.0 * labels[k] / card;
        break;
      case FactorRole::XPos: ux = u; break;
      case FactorRole::YPos: uy = u; break;
      case FactorRole::Scale: us = u; break;
      case FactorRole::Shape: shape = labels[k] % 4; break;
    }
  }
  double S = image_size;
  double cx = S * (0.30 + 0.40 * ux);
  double cy = S * (0.30 + 0.40 * uy);
  double r = S * (0.12 + 0.13 * us);

  double fg[3], bg[3];
  detail::hsv_to_rgb(hue, 0.85, 0.90, fg);
  if (bg_hue >= 0)
    detail::hsv_to_rgb(bg_hue, 0.25, 0.92, bg);
  else
    bg[0] = bg[1] = bg[2] = 0.18;

  std::vector<double> img(3 * image_size * image_size);
  for (int y = 0; y < image_size; ++y)
    for (int x = 0; x < image_size; ++x) {
      double d = detail::shape_sdf(shape, x + 0.5, y + 0.5, cx, cy, r);
      double cov = std::clamp(0.5 - d, 0.0, 1.0);
      for (int c = 0; c < 3; ++c)
        img[(c * image_size + y) * image_size + x] =
            bg[c] + cov * (fg[c] - bg[c]);
    }
  return img;
}

struct FactorDataset {
  int image_size = 32;
  std::vector<FactorSpec> spec;
  std::uint64_t seed = 0;
  std::vector<std::uint8_t> images;   // count * 3 * H * W, CHW per image
  std::vector<std::int32_t> labels;   // count * n_factors

  int n_factors() const { return static_cast<int>(spec.size()); }
  std::int64_t count() const {
    return spec.empty() ? 0
                        : static_cast<std::int64_t>(labels.size()) /
                              static_cast<std::int64_t>(spec.size());
  }
  std::int64_t pixels() const {
    return 3ll * image_size * image_size;
  }
  int label(std::int64_t i, int k) const {
    return labels[i * n_factors() + k];
  }

  /// Row-major (last factor fastest) index of a label row.
  std::int64_t index_of(const std::vector<int>& row) const {
    std::int64_t idx = 0;
    for (int k = 0; k < n_factors(); ++k)
      idx = idx * spec[k].cardinality + row[k];
    return idx;
  }

  /// Gather a float batch [B,3,H,W] in [0,1].
  template <typename S>
  Tensor<S> batch(const std::vector<std::int64_t>& idx) const {
    int B = static_cast<int>(idx.size());
    Tensor<S> out({B, 3, image_size, image_size});
    std::int64_t px = pixels();
    for (int b = 0; b < B; ++b) {
      if (idx[b] < 0 || idx[b] >= count())
        throw std::out_of_range("dataset batch: index out of range");
      const std::uint8_t* src = images.data() + idx[b] * px;
      S* dst = out.ptr() + b * px;
      for (std::int64_t i = 0; i < px; ++i)
        dst[i] = static_cast<S>(src[i]) / S(255);
    }
    return out;
  }

  template <typename S>
  Tensor<S> image(std::int64_t i) const {
    return batch<S>({i});
  }

  /// Label row of the stored image nearest (L2) to `img` [1,3,H,W] or
  /// [3,H,W] in [0,1]; the renderer-lookup classifier.
  template <typename S>
  std::vector<int> nearest_labels(const Tensor<S>& img) const {
    std::int64_t px = pixels();
    if (img.numel() != px)
      throw std::invalid_argument("nearest_labels: wrong image size");
    std::int64_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::int64_t i = 0; i < count(); ++i) {
      const std::uint8_t* src = images.data() + i * px;
      double d = 0;
      for (std::int64_t j = 0; j < px; ++j) {
        double e = static_cast<double>(img[j]) - src[j] / 255.0;
        d += e * e;
        if (d >= best_d) break;
      }
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    std::vector<int> row(n_factors());
    for (int k = 0; k < n_factors(); ++k) row[k] = label(best, k);
    return row;
  }

  /// Per-channel mean intensity over the whole dataset.
  std::vector<double> channel_means() const {
    std::vector<double> m(3, 0.0);
    std::int64_t hw = static_cast<std::int64_t>(image_size) * image_size;
    for (std::int64_t i = 0; i < count(); ++i)
      for (int c = 0; c < 3; ++c) {
        const std::uint8_t* p = images.data() + i * pixels() + c * hw;
        for (std::int64_t j = 0; j < hw; ++j) m[c] += p[j] / 255.0;
      }
    for (auto& v : m) v /= static_cast<double>(count() * hw);
    return m;
  }
};

inline FactorDataset generate_dataset(const std::vector<FactorSpec>& spec,
                                      int image_size, std::uint64_t seed,
                                      std::int64_t cap = 100000) {
  if (image_size != 16 && image_size != 32 && image_size != 64)
    throw std::invalid_argument("generate_dataset: image_size must be 16/32/64");
  if (spec.empty())
    throw std::invalid_argument("generate_dataset: empty factor spec");
  std::uint32_t roles_seen = 0;
  std::int64_t total = 1;
  for (size_t k = 0; k < spec.size(); ++k) {
    if (spec[k].cardinality < 2)
      throw std::invalid_argument("generate_dataset: factor '" + spec[k].name +
                                  "' needs cardinality >= 2");
    for (size_t j = 0; j < k; ++j)
      if (spec[j].name == spec[k].name)
        throw std::invalid_argument("generate_dataset: duplicate factor name '" +
                                    spec[k].name + "'");
    std::uint32_t bit = 1u << static_cast<std::uint32_t>(spec[k].role);
    if (roles_seen & bit)
      throw std::invalid_argument("generate_dataset: renderer role '" +
                                  factor_role_name(spec[k].role) +
                                  "' used twice");
    roles_seen |= bit;
    total *= spec[k].cardinality;
    if (total > cap)
      throw std::invalid_argument(
          "generate_dataset: factor product exceeds cap of " +
          std::to_string(cap));
  }

  FactorDataset ds;
  ds.image_size = image_size;
  ds.spec = spec;
  ds.seed = seed;
  int N = ds.n_factors();
  ds.images.resize(total * ds.pixels());
  ds.labels.resize(total * N);

  std::vector<int> row(N, 0);
  for (std::int64_t i = 0; i < total; ++i) {
    for (int k = 0; k < N; ++k)
      ds.labels[i * N + k] = static_cast<std::int32_t>(row[k]);
    auto img = render_image(spec, row, image_size);
    std::uint8_t* dst = ds.images.data() + i * ds.pixels();
    for (std::int64_t j = 0; j < ds.pixels(); ++j)
      dst[j] = static_cast<std::uint8_t>(std::lround(img[j] * 255.0));
    // advance mixed-radix counter, last factor fastest
    for (int k = N - 1; k >= 0; --k) {
      if (++row[k] < spec[k].cardinality) break;
      row[k] = 0;
    }
  }
  return ds;
}

/// Two dataset indices sharing the value of factor k; all other factors drawn
/// independently and uniformly.
struct FixedFactorPair {
  std::int64_t a = 0, b = 0;
  int factor = 0;
};

inline FixedFactorPair sample_pair_fixed_factor(const FactorDataset& ds,
                                                int factor_index, Rng& rng) {
  int N = ds.n_factors();
  if (factor_index < 0 || factor_index >= N)
    throw std::invalid_argument("sample_pair_fixed_factor: bad factor index");
  int fixed =
      static_cast<int>(rng.uniform_int(ds.spec[factor_index].cardinality));
  std::vector<int> ra(N), rb(N);
  for (int k = 0; k < N; ++k) {
    if (k == factor_index) {
      ra[k] = rb[k] = fixed;
    } else {
      ra[k] = static_cast<int>(rng.uniform_int(ds.spec[k].cardinality));
      rb[k] = static_cast<int>(rng.uniform_int(ds.spec[k].cardinality));
    }
  }
  return {ds.index_of(ra), ds.index_of(rb), factor_index};
}

// ---- dataset archive -------------------------------------------------------
//
// Layout (little-endian):
//   magic "DDFD" | u32 version | u32 image_size | u32 n_factors
//   per factor: u32 name_len, name bytes, u32 cardinality, u32 role
//   u64 seed | u64 count | count*3*H*W u8 image bytes | count*N i32 labels

inline constexpr std::uint32_t kDatasetFormatVersion = 1;

namespace detail {

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is)
    throw std::runtime_error(std::string("dataset file: unexpected end of "
                                         "file while reading ") +
                             what);
  return v;
}

}  // namespace detail

inline void save_dataset(const FactorDataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os.write("DDFD", 4);
  detail::write_pod<std::uint32_t>(os, kDatasetFormatVersion);
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.image_size));
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.n_factors()));
  for (const auto& f : ds.spec) {
    detail::write_pod<std::uint32_t>(os,
                                     static_cast<std::uint32_t>(f.name.size()));
    os.write(f.name.data(), static_cast<std::streamsize>(f.name.size()));
    detail::write_pod<std::uint32_t>(os,
                                     static_cast<std::uint32_t>(f.cardinality));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(f.role));
  }
  detail::write_pod<std::uint64_t>(os, ds.seed);
  detail::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(ds.count()));
  os.write(reinterpret_cast<const char*>(ds.images.data()),
           static_cast<std::streamsize>(ds.images.size()));
  os.write(reinterpret_cast<const char*>(ds.labels.data()),
           static_cast<std::streamsize>(ds.labels.size() * sizeof(std::int32_t)));
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline FactorDataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open dataset file: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DDFD", 4) != 0)
    throw std::runtime_error("not a dataset file: " + path);
  auto version = detail::read_pod<std::uint32_t>(is, "version");
  if (version > kDatasetFormatVersion)
    throw std::runtime_error(
        "dataset file " + path + " uses format version " +
        std::to_string(version) + "; this build supports up to version " +
        std::to_string(kDatasetFormatVersion));
  FactorDataset ds;
  ds.image_size =
      static_cast<int>(detail::read_pod<std::uint32_t>(is, "image size"));
  auto nf = detail::read_pod<std::uint32_t>(is, "factor count");
  if (ds.image_size < 1 || ds.image_size > 4096 || nf > 64)
    throw std::runtime_error("dataset file: implausible header in " + path);
  for (std::uint32_t k = 0; k < nf; ++k) {
    FactorSpec f;
    auto len = detail::read_pod<std::uint32_t>(is, "factor name length");
    if (len > 4096)
      throw std::runtime_error("dataset file: implausible factor name length");
    f.name.resize(len);
    is.read(f.name.data(), len);
    if (!is)
      throw std::runtime_error(
          "dataset file: unexpected end of file while reading factor name");
    f.cardinality =
        static_cast<int>(detail::read_pod<std::uint32_t>(is, "cardinality"));
    auto role = detail::read_pod<std::uint32_t>(is, "role");
    if (role > 5)
      throw std::runtime_error("dataset file: unknown renderer role id " +
                               std::to_string(role));
    f.role = static_cast<FactorRole>(role);
    ds.spec.push_back(std::move(f));
  }
  ds.seed = detail::read_pod<std::uint64_t>(is, "seed");
  auto count = detail::read_pod<std::uint64_t>(is, "sample count");
  ds.images.resize(count * static_cast<std::uint64_t>(ds.pixels()));
  is.read(reinterpret_cast<char*>(ds.images.data()),
          static_cast<std::streamsize>(ds.images.size()));
  if (!is)
    throw std::runtime_error(
        "dataset file: unexpected end of file while reading images");
  ds.labels.resize(count * nf);
  is.read(reinterpret_cast<char*>(ds.labels.data()),
          static_cast<std::streamsize>(ds.labels.size() * sizeof(std::int32_t)));
  if (!is)
    throw std::runtime_error(
        "dataset file: unexpected end of file while reading labels");
  return ds;
}

}  // namespace disdiff
