#pragma once

// Field checkpoints and rendered-view export.
//
// Checkpoint layout (little-endian):
//   "OFFC" | u32 version | u32 endian tag | u32 backend (0 surface, 1 voxel)
//   | u32 count (N points or R) | u32 dim | u32 knn | 6 x f32 bounds (lo, hi)
//   | f32 payloads | u32 CRC-32
// Surface payload order: positions N*3, colors N*3, features N*dim.
// Voxel payload order: density R^3, colors R^3*3, features R^3*dim.
// Adjacency is not stored; it is rebuilt from positions with the recorded knn.

#include <filesystem>
#include <string>
#include <variant>

#include "omnifield/field.hpp"
#include "omnifield/image_io.hpp"
#include "omnifield/pca.hpp"

namespace omnifield {

inline constexpr std::uint32_t kFieldVersion = 1;

enum class Backend : std::uint32_t { surface = 0, voxel = 1 };

inline std::string serialize_field(const FieldVariant& field) {
  ByteWriter w;
  w.magic("OFFC");
  w.u32(kFieldVersion);
  w.u32(kEndianTag);
  auto put_bounds = [&](const Bounds& b) {
    for (int a = 0; a < 3; ++a) w.f32(b.lo[a]);
    for (int a = 0; a < 3; ++a) w.f32(b.hi[a]);
  };
  auto put_all = [&](const std::vector<double>& v) {
    for (double x : v) w.f32(x);
  };
  if (const auto* s = std::get_if<SurfaceField>(&field)) {
    w.u32(static_cast<std::uint32_t>(Backend::surface));
    w.u32(static_cast<std::uint32_t>(s->size()));
    w.u32(static_cast<std::uint32_t>(s->dim));
    w.u32(s->knn);
    put_bounds(s->bounds());
    put_all(s->positions);
    put_all(s->colors);
    put_all(s->features);
  } else {
    const auto& v = std::get<VoxelField>(field);
    w.u32(static_cast<std::uint32_t>(Backend::voxel));
    w.u32(static_cast<std::uint32_t>(v.resolution));
    w.u32(static_cast<std::uint32_t>(v.dim));
    w.u32(0);
    put_bounds(v.bounds);
    put_all(v.density);
    put_all(v.colors);
    put_all(v.features);
  }
  w.seal();
  return w.take();
}

inline FieldVariant deserialize_field(std::string_view bytes) {
  ByteReader::verify_seal(bytes, "field checkpoint");
  ByteReader r(bytes.substr(0, bytes.size() - 4));
  r.expect_magic("OFFC", "field checkpoint");
  const auto version = r.u32();
  if (version != kFieldVersion) fail(ErrorKind::format, "field checkpoint: unsupported version " + std::to_string(version));
  if (r.u32() != kEndianTag) fail(ErrorKind::format, "field checkpoint: endianness tag mismatch");
  const auto backend = r.u32();
  const std::size_t count = r.u32();
  const std::size_t dim = r.u32();
  const std::uint32_t knn = r.u32();
  Bounds b;
  for (int a = 0; a < 3; ++a) b.lo[a] = r.f32();
  for (int a = 0; a < 3; ++a) b.hi[a] = r.f32();
  auto get_all = [&](std::vector<double>& v, std::size_t n) {
    v.resize(n);
    for (auto& x : v) x = r.f32();
  };
  if (backend == static_cast<std::uint32_t>(Backend::surface)) {
    if (r.remaining() != count * (6 + dim) * 4) fail(ErrorKind::format, "field checkpoint: payload size mismatch");
    SurfaceField s;
    s.dim = dim;
    get_all(s.positions, count * 3);
    get_all(s.colors, count * 3);
    get_all(s.features, count * dim);
    if (knn > 0) rebuild_adjacency(s, knn);
    return s;
  }
  if (backend == static_cast<std::uint32_t>(Backend::voxel)) {
    const std::size_t nodes = count * count * count;
    if (r.remaining() != nodes * (4 + dim) * 4) fail(ErrorKind::format, "field checkpoint: payload size mismatch");
    auto v = VoxelField::make(static_cast<int>(count), b, dim);
    get_all(v.density, nodes);
    get_all(v.colors, nodes * 3);
    get_all(v.features, nodes * dim);
    return v;
  }
  fail(ErrorKind::format, "field checkpoint: unknown backend tag " + std::to_string(backend));
}

inline void write_field(const std::filesystem::path& path, const FieldVariant& field) { write_file_atomic(path, serialize_field(field)); }
inline FieldVariant read_field(const std::filesystem::path& path) { return deserialize_field(read_file(path)); }

// ---------------------------------------------------------------------------
// View export

inline Image8 color_preview(const RenderedView& v) {
  Image8 img(v.width, v.height, 3);
  for (std::size_t p = 0; p < v.pixel_count(); ++p)
    for (int c = 0; c < 3; ++c) img.pixels[p * 3 + c] = to_byte(v.colors[p * 3 + c]);
  return img;
}

/// PCA false colour over covered pixels; uncovered pixels stay black.
inline Image8 feature_preview(const RenderedView& v) {
  Image8 img(v.width, v.height, 3);
  std::vector<std::size_t> covered;
  for (std::size_t p = 0; p < v.pixel_count(); ++p)
    if (v.opacity[p] > 0.5) covered.push_back(p);
  if (covered.empty() || v.dim == 0) return img;
  std::vector<double> feats;
  feats.reserve(covered.size() * v.dim);
  for (auto p : covered) feats.insert(feats.end(), v.feature(p).begin(), v.feature(p).end());
  const auto rgb = pca_colorize(feats, covered.size(), v.dim);
  for (std::size_t i = 0; i < covered.size(); ++i)
    for (int c = 0; c < 3; ++c) img.pixels[covered[i] * 3 + c] = to_byte(rgb[i * 3 + c]);
  return img;
}

inline Image8 depth_preview(const RenderedView& v) {
  Image8 img(v.width, v.height, 1);
  double lo = std::numeric_limits<double>::infinity(), hi = 0;
  for (std::size_t p = 0; p < v.pixel_count(); ++p)
    if (v.opacity[p] > 0.5) {
      lo = std::min(lo, v.depth[p]);
      hi = std::max(hi, v.depth[p]);
    }
  for (std::size_t p = 0; p < v.pixel_count(); ++p)
    if (v.opacity[p] > 0.5) img.pixels[p] = to_byte(hi > lo ? 1.0 - 0.8 * (v.depth[p] - lo) / (hi - lo) : 1.0);
  return img;
}

/// Raw feature map: "OFFM" | u32 W | u32 H | u32 dim | f32 values row-major.
inline std::string encode_feature_map(const RenderedView& v) {
  ByteWriter w;
  w.magic("OFFM");
  w.u32(static_cast<std::uint32_t>(v.width));
  w.u32(static_cast<std::uint32_t>(v.height));
  w.u32(static_cast<std::uint32_t>(v.dim));
  for (double x : v.features) w.f32(x);
  return w.take();
}

/// Writes <prefix>_color.pfm, _depth.pfm, _opacity.pfm, _features.bin and
/// PNG previews _color.png, _feat.png, _depth.png.
inline void export_view(const RenderedView& v, const std::filesystem::path& dir, const std::string& prefix) {
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / (prefix + "_color.pfm"), encode_pfm(v.colors, v.width, v.height, 3));
  write_file_atomic(dir / (prefix + "_depth.pfm"), encode_pfm(v.depth, v.width, v.height, 1));
  write_file_atomic(dir / (prefix + "_opacity.pfm"), encode_pfm(v.opacity, v.width, v.height, 1));
  write_file_atomic(dir / (prefix + "_features.bin"), encode_feature_map(v));
  write_png(dir / (prefix + "_color.png"), color_preview(v));
  write_png(dir / (prefix + "_feat.png"), feature_preview(v));
  write_png(dir / (prefix + "_depth.png"), depth_preview(v));
}

}  // namespace omnifield
