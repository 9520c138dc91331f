#pragma once

#include <zlib.h>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "disdiff/tensor.hpp"

namespace disdiff {

namespace detail {

inline void png_be32(std::vector<std::uint8_t>& v, std::uint32_t x) {
  v.push_back((x >> 24) & 0xff);
  v.push_back((x >> 16) & 0xff);
  v.push_back((x >> 8) & 0xff);
  v.push_back(x & 0xff);
}

inline void png_chunk(std::ostream& os, const char type[4],
                      const std::vector<std::uint8_t>& payload) {
  std::vector<std::uint8_t> head;
  png_be32(head, static_cast<std::uint32_t>(payload.size()));
  os.write(reinterpret_cast<const char*>(head.data()), 4);
  os.write(type, 4);
  if (!payload.empty())
    os.write(reinterpret_cast<const char*>(payload.data()),
             static_cast<std::streamsize>(payload.size()));
  uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(type), 4);
  if (!payload.empty())
    crc = crc32(crc, payload.data(), static_cast<uInt>(payload.size()));
  std::vector<std::uint8_t> tail;
  png_be32(tail, static_cast<std::uint32_t>(crc));
  os.write(reinterpret_cast<const char*>(tail.data()), 4);
}

}  // namespace detail

/// Write an 8-bit RGB PNG. `rgb` is row-major H*W*3.
inline void write_png(const std::string& path,
                      const std::vector<std::uint8_t>& rgb, int width,
                      int height) {
  if (width < 1 || height < 1 ||
      rgb.size() != static_cast<size_t>(width) * height * 3)
    throw std::invalid_argument("write_png: size mismatch");

  // filter byte 0 in front of every scanline
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<size_t>(height) * (1 + 3 * width));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), rgb.begin() + static_cast<size_t>(y) * width * 3,
               rgb.begin() + static_cast<size_t>(y + 1) * width * 3);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> compressed(bound);
  if (compress2(compressed.data(), &bound, raw.data(),
                static_cast<uLong>(raw.size()), 9) != Z_OK)
    throw std::runtime_error("write_png: deflate failed");
  compressed.resize(bound);

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a,
                                      '\n'};
  os.write(reinterpret_cast<const char*>(sig), 8);
  std::vector<std::uint8_t> ihdr;
  detail::png_be32(ihdr, static_cast<std::uint32_t>(width));
  detail::png_be32(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(2);  // color type: truecolor
  ihdr.push_back(0);  // compression
  ihdr.push_back(0);  // filter
  ihdr.push_back(0);  // interlace
  detail::png_chunk(os, "IHDR", ihdr);
  detail::png_chunk(os, "IDAT", compressed);
  detail::png_chunk(os, "IEND", {});
  if (!os) throw std::runtime_error("write failed: " + path);
}

/// Tile a batch of [3,H,W] images (values clamped to [0,1]) into a grid,
/// row-major over (rows, cols), with a 2-pixel separator.
template <typename S>
void write_image_grid(const std::string& path, const Tensor<S>& batch,
                      int rows, int cols) {
  if (batch.ndim() != 4 || batch.dim(1) != 3)
    throw std::invalid_argument("write_image_grid: expected [B,3,H,W]");
  int B = batch.dim(0), H = batch.dim(2), W = batch.dim(3);
  if (rows * cols < B)
    throw std::invalid_argument("write_image_grid: grid smaller than batch");
  const int pad = 2;
  int gw = cols * W + (cols + 1) * pad;
  int gh = rows * H + (rows + 1) * pad;
  std::vector<std::uint8_t> out(static_cast<size_t>(gw) * gh * 3, 40);
  for (int b = 0; b < B; ++b) {
    int gr = b / cols, gc = b % cols;
    int oy = pad + gr * (H + pad), ox = pad + gc * (W + pad);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int c = 0; c < 3; ++c) {
          double v = static_cast<double>(batch[((b * 3 + c) * H + y) * W + x]);
          v = std::clamp(v, 0.0, 1.0);
          out[(static_cast<size_t>(oy + y) * gw + (ox + x)) * 3 + c] =
              static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
  }
  write_png(path, out, gw, gh);
}

}  // namespace disdiff
