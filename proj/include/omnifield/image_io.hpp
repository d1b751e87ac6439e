#pragma once

// PNG encoding (via zlib) for 8-bit previews and PFM for float images.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <zlib.h>

#include "omnifield/core.hpp"

namespace omnifield {

struct Image8 {
  int width = 0, height = 0, channels = 3;
  std::vector<std::uint8_t> pixels;

  Image8() = default;
  Image8(int w, int h, int c, std::uint8_t fill = 0) : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {}
  std::uint8_t* at(int x, int y) { return &pixels[(static_cast<std::size_t>(y) * width + x) * channels]; }
};

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

namespace detail {
inline void png_chunk(std::string& out, const char* type, std::string_view data) {
  const auto n = static_cast<std::uint32_t>(data.size());
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((n >> (8 * i)) & 0xFF));
  std::string body(type, 4);
  body.append(data.data(), data.size());
  out += body;
  const auto crc = crc32_of(body);
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((crc >> (8 * i)) & 0xFF));
}

inline void put_be32(std::string& s, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
}  // namespace detail

inline std::string encode_png(const Image8& img) {
  require(img.channels == 1 || img.channels == 3 || img.channels == 4, "encode_png: unsupported channel count");
  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  detail::put_be32(ihdr, static_cast<std::uint32_t>(img.width));
  detail::put_be32(ihdr, static_cast<std::uint32_t>(img.height));
  const char color_type = img.channels == 1 ? 0 : img.channels == 3 ? 2 : 6;
  ihdr += std::string{8, color_type, 0, 0, 0};
  detail::png_chunk(out, "IHDR", ihdr);

  const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
  std::string raw;
  raw.reserve((stride + 1) * img.height);
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);
    raw.append(reinterpret_cast<const char*>(&img.pixels[y * stride]), stride);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::string z(bound, '\0');
  if (compress2(reinterpret_cast<Bytef*>(z.data()), &bound, reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()), 6) != Z_OK)
    fail(ErrorKind::format, "encode_png: deflate failed");
  z.resize(bound);
  detail::png_chunk(out, "IDAT", z);
  detail::png_chunk(out, "IEND", {});
  return out;
}

inline void write_png(const std::filesystem::path& path, const Image8& img) { write_file_atomic(path, encode_png(img)); }

/// Portable float map: "PF" (3 channels) or "Pf" (1 channel), little-endian,
/// rows stored bottom-to-top.
inline std::string encode_pfm(std::span<const double> values, int width, int height, int channels) {
  require(channels == 1 || channels == 3, "encode_pfm: channels must be 1 or 3");
  require(values.size() == static_cast<std::size_t>(width) * height * channels, "encode_pfm: size mismatch");
  ByteWriter w;
  w.bytes(channels == 3 ? "PF\n" : "Pf\n");
  w.bytes(std::to_string(width) + " " + std::to_string(height) + "\n-1.0\n");
  for (int y = height - 1; y >= 0; --y)
    for (int x = 0; x < width * channels; ++x) w.f32(values[static_cast<std::size_t>(y) * width * channels + x]);
  return w.take();
}

struct FloatImage {
  int width = 0, height = 0, channels = 1;
  std::vector<double> values;
};

inline FloatImage decode_pfm(std::string_view bytes) {
  FloatImage img;
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return std::string(bytes.substr(start, pos - start));
  };
  const auto magic = token();
  if (magic != "PF" && magic != "Pf") fail(ErrorKind::format, "pfm: bad magic");
  img.channels = magic == "PF" ? 3 : 1;
  try {
    img.width = std::stoi(token());
    img.height = std::stoi(token());
    if (std::stod(token()) >= 0) fail(ErrorKind::unsupported, "pfm: big-endian payloads are not supported");
  } catch (const std::logic_error&) {
    fail(ErrorKind::format, "pfm: malformed header");
  }
  ++pos;  // single whitespace byte after the scale
  ByteReader r(bytes.substr(pos));
  img.values.assign(static_cast<std::size_t>(img.width) * img.height * img.channels, 0.0);
  for (int y = img.height - 1; y >= 0; --y)
    for (int x = 0; x < img.width * img.channels; ++x) img.values[static_cast<std::size_t>(y) * img.width * img.channels + x] = r.f32();
  return img;
}

/// Colour for integer labels, stable across runs.
inline std::array<std::uint8_t, 3> label_color(std::uint32_t label) {
  std::uint32_t h = label * 2654435761u + 0x9e3779b9u;
  h ^= h >> 15;
  h *= 0x2c1b3c6du;
  h ^= h >> 12;
  return {static_cast<std::uint8_t>(64 + (h & 0xBF)), static_cast<std::uint8_t>(64 + ((h >> 8) & 0xBF)), static_cast<std::uint8_t>(64 + ((h >> 16) & 0xBF))};
}

/// Blue-to-red ramp over [lo, hi].
inline std::array<std::uint8_t, 3> heat_color(double v, double lo, double hi) {
  const double t = hi > lo ? std::clamp((v - lo) / (hi - lo), 0.0, 1.0) : 0.0;
  return {to_byte(t), to_byte(1.0 - std::abs(2 * t - 1)), to_byte(1.0 - t)};
}

}  // namespace omnifield
