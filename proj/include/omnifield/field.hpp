#pragma once

// Explicit feature-field carriers and the surface (point splat) renderer.
// The volumetric backend lives in volume.hpp.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "omnifield/camera.hpp"
#include "omnifield/core.hpp"

namespace omnifield {

struct Bounds {
  Eigen::Vector3d lo = Eigen::Vector3d::Zero();
  Eigen::Vector3d hi = Eigen::Vector3d::Ones();

  Eigen::Vector3d extent() const { return hi - lo; }
  double diagonal() const { return extent().norm(); }
  bool degenerate() const { return !((hi - lo).array() > 0).all() || !hi.allFinite() || !lo.allFinite(); }
};

/// Feature field carried by surface points. Positions and colours are fixed
/// geometry; features are the optimised quantity.
struct SurfaceField {
  std::size_t dim = 0;
  std::vector<double> positions;  // N x 3
  std::vector<double> colors;     // N x 3
  std::vector<double> features;   // N x dim
  std::vector<std::vector<std::uint32_t>> adjacency;
  std::uint32_t knn = 0;

  std::size_t size() const { return positions.size() / 3; }
  Eigen::Vector3d position(std::size_t i) const { return {positions[3 * i], positions[3 * i + 1], positions[3 * i + 2]}; }
  std::span<double> feature(std::size_t i) { return {features.data() + i * dim, dim}; }
  std::span<const double> feature(std::size_t i) const { return {features.data() + i * dim, dim}; }

  Bounds bounds() const {
    Bounds b;
    if (size() == 0) return b;
    b.lo = b.hi = position(0);
    for (std::size_t i = 1; i < size(); ++i) {
      b.lo = b.lo.cwiseMin(position(i));
      b.hi = b.hi.cwiseMax(position(i));
    }
    return b;
  }
};

/// Regular grid of density/colour/feature samples at the nodes of a
/// resolution^3 lattice spanning `bounds`. Density is stored raw and mapped
/// through softplus when read.
struct VoxelField {
  int resolution = 0;
  Bounds bounds;
  std::size_t dim = 0;
  std::vector<double> density;   // R^3 raw values
  std::vector<double> colors;    // R^3 x 3
  std::vector<double> features;  // R^3 x dim
  std::uint64_t revision = 0;    // bumped whenever parameters change

  std::size_t node_count() const { return static_cast<std::size_t>(resolution) * resolution * resolution; }
  std::size_t node(int i, int j, int k) const { return (static_cast<std::size_t>(k) * resolution + j) * resolution + i; }

  static VoxelField make(int resolution, const Bounds& bounds, std::size_t dim) {
    require(resolution >= 2, "voxel resolution must be at least 2");
    VoxelField f;
    f.resolution = resolution;
    f.bounds = bounds;
    f.dim = dim;
    f.density.assign(f.node_count(), 0.0);
    f.colors.assign(f.node_count() * 3, 0.0);
    f.features.assign(f.node_count() * dim, 0.0);
    return f;
  }
};

using FieldVariant = std::variant<SurfaceField, VoxelField>;

/// Per-pixel outputs of a renderer. Depth is camera-frame z.
struct RenderedView {
  int width = 0, height = 0;
  std::size_t dim = 0;
  std::vector<double> features;  // H x W x dim
  std::vector<double> colors;    // H x W x 3
  std::vector<double> depth;     // H x W
  std::vector<double> opacity;   // H x W
  std::vector<std::int32_t> hit_index;  // H x W, -1 where uncovered (surface backend)

  static RenderedView blank(int w, int h, std::size_t dim) {
    RenderedView v;
    v.width = w;
    v.height = h;
    v.dim = dim;
    const std::size_t n = static_cast<std::size_t>(w) * h;
    v.features.assign(n * dim, 0.0);
    v.colors.assign(n * 3, 0.0);
    v.depth.assign(n, 0.0);
    v.opacity.assign(n, 0.0);
    v.hit_index.assign(n, -1);
    return v;
  }

  std::size_t pixel_count() const { return depth.size(); }
  std::size_t pixel(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
  std::span<const double> feature(std::size_t p) const { return {features.data() + p * dim, dim}; }
};

/// Cotangent of a RenderedView (depth and hit map carry no gradient).
struct ViewGrad {
  std::vector<double> features;
  std::vector<double> colors;
  std::vector<double> opacity;
};

inline std::vector<double> random_unit_features(std::size_t count, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> out(count * dim);
  for (std::size_t i = 0; i < count; ++i) {
    double n2 = 0;
    for (std::size_t d = 0; d < dim; ++d) {
      out[i * dim + d] = normal(rng);
      n2 += out[i * dim + d] * out[i * dim + d];
    }
    const double inv = n2 > 0 ? 1.0 / std::sqrt(n2) : 0.0;
    for (std::size_t d = 0; d < dim; ++d) out[i * dim + d] *= inv;
  }
  return out;
}

/// k nearest neighbours per point (brute force), then symmetric closure.
/// Lists are sorted ascending.
inline std::vector<std::vector<std::uint32_t>> knn_adjacency(std::span<const double> positions, std::size_t k) {
  const std::size_t n = positions.size() / 3;
  std::vector<std::vector<std::uint32_t>> adj(n);
  k = std::min(k, n > 0 ? n - 1 : 0);
  parallel_for(n, [&](std::size_t i) {
    std::vector<std::pair<double, std::uint32_t>> d;
    d.reserve(n);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double s = 0;
      for (int a = 0; a < 3; ++a) {
        const double t = positions[3 * i + a] - positions[3 * j + a];
        s += t * t;
      }
      d.emplace_back(s, static_cast<std::uint32_t>(j));
    }
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
    for (std::size_t m = 0; m < k; ++m) adj[i].push_back(d[m].second);
  });
  for (std::size_t i = 0; i < n; ++i)
    for (auto j : std::vector<std::uint32_t>(adj[i])) adj[j].push_back(static_cast<std::uint32_t>(i));
  for (auto& list : adj) {
    std::sort(list.begin(), list.end());
    list.erase(std::unique(list.begin(), list.end()), list.end());
  }
  return adj;
}

inline void rebuild_adjacency(SurfaceField& field, std::uint32_t k) {
  field.knn = k;
  field.adjacency = knn_adjacency(field.positions, k);
}

/// Z-buffered point splatting. A point covers the pixel containing its
/// projection and every pixel whose centre lies within `point_radius` pixels
/// of it; the nearest point wins, ties go to the lower index.
inline RenderedView render_surface(const SurfaceField& field, const Camera& camera, double point_radius) {
  require(field.size() > 0, "render_surface: empty field");
  camera.validate();
  const int W = camera.width, H = camera.height;
  const std::size_t D = field.dim;
  auto view = RenderedView::blank(W, H, D);
  std::vector<double> zbuf(static_cast<std::size_t>(W) * H, std::numeric_limits<double>::infinity());

  struct Splat {
    double u, v, z;
  };
  std::vector<Splat> splats(field.size());
  for (std::size_t i = 0; i < field.size(); ++i) {
    double z = 0;
    const auto uv = camera.project(field.position(i), &z);
    splats[i] = uv ? Splat{uv->x(), uv->y(), z} : Splat{0, 0, -1};
  }

  const double r2 = point_radius * point_radius;
  // row bands are independent; each band scans every splat
  parallel_chunks(static_cast<std::size_t>(H), [&](std::size_t y0, std::size_t y1, unsigned) {
    for (std::size_t i = 0; i < splats.size(); ++i) {
      const auto& s = splats[i];
      if (s.z <= 0) continue;
      const int cx = static_cast<int>(std::floor(s.u)), cy = static_cast<int>(std::floor(s.v));
      const int xa = std::max(0, static_cast<int>(std::floor(s.u - point_radius)) - 1);
      const int xb = std::min(W - 1, static_cast<int>(std::ceil(s.u + point_radius)) + 1);
      const int ya = std::max(static_cast<int>(y0), static_cast<int>(std::floor(s.v - point_radius)) - 1);
      const int yb = std::min(static_cast<int>(y1) - 1, static_cast<int>(std::ceil(s.v + point_radius)) + 1);
      for (int y = ya; y <= yb; ++y) {
        for (int x = xa; x <= xb; ++x) {
          const double dx = x + 0.5 - s.u, dy = y + 0.5 - s.v;
          if (!(dx * dx + dy * dy <= r2 || (x == cx && y == cy))) continue;
          const std::size_t p = static_cast<std::size_t>(y) * W + x;
          if (s.z < zbuf[p] || (s.z == zbuf[p] && static_cast<std::int32_t>(i) < view.hit_index[p])) {
            zbuf[p] = s.z;
            view.hit_index[p] = static_cast<std::int32_t>(i);
          }
        }
      }
    }
  });

  for (std::size_t p = 0; p < zbuf.size(); ++p) {
    const auto hit = view.hit_index[p];
    if (hit < 0) continue;
    const auto i = static_cast<std::size_t>(hit);
    view.depth[p] = zbuf[p];
    view.opacity[p] = 1.0;
    for (int c = 0; c < 3; ++c) view.colors[p * 3 + c] = field.colors[i * 3 + c];
    std::copy_n(field.features.begin() + static_cast<std::ptrdiff_t>(i * D), D, view.features.begin() + static_cast<std::ptrdiff_t>(p * D));
  }
  return view;
}

struct SurfaceGrad {
  std::vector<double> features;  // N x dim
  std::vector<double> colors;    // N x 3
};

/// Scatter-adds pixel cotangents onto the points that won those pixels.
inline SurfaceGrad backprop_surface(const ViewGrad& grad, std::span<const std::int32_t> hit_index, std::size_t point_count, std::size_t dim) {
  SurfaceGrad out;
  out.features.assign(point_count * dim, 0.0);
  out.colors.assign(point_count * 3, 0.0);
  for (std::size_t p = 0; p < hit_index.size(); ++p) {
    const auto hit = hit_index[p];
    if (hit < 0) continue;
    const auto i = static_cast<std::size_t>(hit);
    if (!grad.features.empty())
      for (std::size_t d = 0; d < dim; ++d) out.features[i * dim + d] += grad.features[p * dim + d];
    if (!grad.colors.empty())
      for (int c = 0; c < 3; ++c) out.colors[i * 3 + c] += grad.colors[p * 3 + c];
  }
  return out;
}

}  // namespace omnifield
