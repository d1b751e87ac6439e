#pragma once

// Volumetric rendering over a VoxelField with an exact manual adjoint.
//
//   alpha_i = 1 - exp(-sigma_i * delta_i),  T_i = prod_{j<i} (1 - alpha_j)
//   c(r) = sum_i T_i alpha_i c_i,  f(r) = sum_i T_i alpha_i f_i,  o(r) = sum_i T_i alpha_i
//
// sigma_i = softplus(trilinear(raw density)), c_i and f_i are trilinear.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "omnifield/camera.hpp"
#include "omnifield/field.hpp"

namespace omnifield {

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct Trilinear {
  std::array<std::size_t, 8> node{};
  std::array<double, 8> weight{};
};

inline Trilinear trilinear(const VoxelField& f, const Eigen::Vector3d& p) {
  const int R = f.resolution;
  const Eigen::Vector3d g = ((p - f.bounds.lo).array() / f.bounds.extent().array() * (R - 1)).matrix();
  int base[3];
  double frac[3];
  for (int a = 0; a < 3; ++a) {
    const double c = std::clamp(g[a], 0.0, static_cast<double>(R - 1));
    base[a] = std::min(static_cast<int>(std::floor(c)), R - 2);
    frac[a] = c - base[a];
  }
  Trilinear t;
  int m = 0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx, ++m) {
        t.node[m] = f.node(base[0] + dx, base[1] + dy, base[2] + dz);
        t.weight[m] = (dx ? frac[0] : 1 - frac[0]) * (dy ? frac[1] : 1 - frac[1]) * (dz ? frac[2] : 1 - frac[2]);
      }
  return t;
}

/// Entry/exit distances of a ray against an axis-aligned box, clipped to t >= 0.
inline bool intersect_box(const Ray& ray, const Bounds& b, double& t0, double& t1) {
  t0 = 0.0;
  t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double o = ray.origin[a], d = ray.direction[a];
    if (std::abs(d) < 1e-15) {
      if (o < b.lo[a] || o > b.hi[a]) return false;
      continue;
    }
    double ta = (b.lo[a] - o) / d, tb = (b.hi[a] - o) / d;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  return t1 > t0;
}

struct VolumeRenderOptions {
  int samples_per_ray = 64;
  bool jitter = false;  // stratified jitter; otherwise bin centres
  std::uint64_t seed = 0;
};

/// Sample positions recorded by a forward pass, consumed by backprop_volume.
struct VolumeTape {
  std::uint64_t revision = 0;
  int resolution = 0;
  std::size_t dim = 0;
  std::vector<std::size_t> ray_offset;  // rays + 1 entries into the sample arrays
  std::vector<double> t;                // distance along the ray
  std::vector<double> delta;
  std::vector<Eigen::Vector3d> position;
  bool valid = false;

  std::size_t ray_count() const { return ray_offset.empty() ? 0 : ray_offset.size() - 1; }
};

struct RayBatchOutput {
  std::size_t dim = 0;
  std::vector<double> colors;    // n x 3
  std::vector<double> features;  // n x dim
  std::vector<double> opacity;   // n
  std::vector<double> depth;     // n, camera-frame z (expected, normalised by opacity)
  std::vector<double> residual_transmittance;  // n, T_{N+1}
};

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t& s) {
  std::uint64_t z = (s += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline void ray_samples(const Ray& ray, const Bounds& bounds, const VolumeRenderOptions& opt, std::size_t ray_index,
                        std::vector<double>& ts, std::vector<double>& deltas) {
  ts.clear();
  deltas.clear();
  double t0, t1;
  if (!intersect_box(ray, bounds, t0, t1)) return;
  const int S = opt.samples_per_ray;
  const double bin = (t1 - t0) / S;
  std::uint64_t state = opt.seed ^ (0x2545f4914f6cdd1dull * (ray_index + 1));
  for (int i = 0; i < S; ++i) {
    const double u = opt.jitter ? static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53 : 0.5;
    ts.push_back(t0 + (i + u) * bin);
  }
  for (int i = 0; i < S; ++i) deltas.push_back((i + 1 < S ? ts[i + 1] : t1) - ts[i]);
}

inline void check_volume_inputs(const VoxelField& field, const VolumeRenderOptions& opt) {
  require(opt.samples_per_ray >= 2, "samples_per_ray must be >= 2");
  require(!field.bounds.degenerate(), "voxel field has degenerate bounds");
  require(field.resolution >= 2, "voxel resolution must be at least 2");
}
}  // namespace detail

/// Composites density/colour/features along each ray. When `tape` is given,
/// sample positions are recorded for backprop_volume.
inline RayBatchOutput render_rays(const VoxelField& field, std::span<const Ray> rays, const VolumeRenderOptions& opt, VolumeTape* tape = nullptr) {
  detail::check_volume_inputs(field, opt);
  const std::size_t n = rays.size(), D = field.dim;
  RayBatchOutput out;
  out.dim = D;
  out.colors.assign(n * 3, 0.0);
  out.features.assign(n * D, 0.0);
  out.opacity.assign(n, 0.0);
  out.depth.assign(n, 0.0);
  out.residual_transmittance.assign(n, 1.0);

  std::vector<std::vector<double>> all_t(n), all_delta(n);
  parallel_chunks(n, [&](std::size_t begin, std::size_t end, unsigned) {
    for (std::size_t r = begin; r < end; ++r) {
      auto& ts = all_t[r];
      auto& deltas = all_delta[r];
      detail::ray_samples(rays[r], field.bounds, opt, r, ts, deltas);
      double T = 1.0, weighted_t = 0.0;
      for (std::size_t i = 0; i < ts.size(); ++i) {
        const Eigen::Vector3d p = rays[r].origin + ts[i] * rays[r].direction;
        const auto tri = trilinear(field, p);
        double raw = 0;
        for (int m = 0; m < 8; ++m) raw += tri.weight[m] * field.density[tri.node[m]];
        const double alpha = 1.0 - std::exp(-softplus(raw) * deltas[i]);
        const double w = T * alpha;
        if (w != 0.0) {
          for (int m = 0; m < 8; ++m) {
            const double tw = w * tri.weight[m];
            if (tw == 0.0) continue;
            const std::size_t nd = tri.node[m];
            for (int c = 0; c < 3; ++c) out.colors[r * 3 + c] += tw * field.colors[nd * 3 + c];
            for (std::size_t d = 0; d < D; ++d) out.features[r * D + d] += tw * field.features[nd * D + d];
          }
          out.opacity[r] += w;
          weighted_t += w * ts[i];
        }
        T *= 1.0 - alpha;
      }
      out.residual_transmittance[r] = T;
      if (out.opacity[r] > 1e-12) out.depth[r] = weighted_t / out.opacity[r] * rays[r].z_per_t;
    }
  });

  if (tape) {
    tape->revision = field.revision;
    tape->resolution = field.resolution;
    tape->dim = D;
    tape->ray_offset.assign(1, 0);
    tape->t.clear();
    tape->delta.clear();
    tape->position.clear();
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t i = 0; i < all_t[r].size(); ++i) {
        tape->t.push_back(all_t[r][i]);
        tape->delta.push_back(all_delta[r][i]);
        tape->position.push_back(rays[r].origin + all_t[r][i] * rays[r].direction);
      }
      tape->ray_offset.push_back(tape->t.size());
    }
    tape->valid = true;
  }
  return out;
}

/// Per-sample compositing weights T_i * alpha_i of one ray, plus the residual
/// transmittance after the last sample.
inline std::vector<double> compositing_weights(const VoxelField& field, const Ray& ray, const VolumeRenderOptions& opt, double* residual = nullptr,
                                               std::size_t ray_index = 0) {
  detail::check_volume_inputs(field, opt);
  std::vector<double> ts, deltas, weights;
  detail::ray_samples(ray, field.bounds, opt, ray_index, ts, deltas);
  double T = 1.0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const auto tri = trilinear(field, ray.origin + ts[i] * ray.direction);
    double raw = 0;
    for (int m = 0; m < 8; ++m) raw += tri.weight[m] * field.density[tri.node[m]];
    const double alpha = 1.0 - std::exp(-softplus(raw) * deltas[i]);
    weights.push_back(T * alpha);
    T *= 1.0 - alpha;
  }
  if (residual) *residual = T;
  return weights;
}

inline RenderedView render_volume(const VoxelField& field, const Camera& camera, int samples_per_ray, bool jitter = false, std::uint64_t seed = 0) {
  camera.validate();
  std::vector<Ray> rays;
  rays.reserve(static_cast<std::size_t>(camera.width) * camera.height);
  for (int y = 0; y < camera.height; ++y)
    for (int x = 0; x < camera.width; ++x) rays.push_back(camera.pixel_ray(x, y));
  const auto out = render_rays(field, rays, {samples_per_ray, jitter, seed});
  auto view = RenderedView::blank(camera.width, camera.height, field.dim);
  view.colors = out.colors;
  view.features = out.features;
  view.opacity = out.opacity;
  view.depth = out.depth;
  return view;
}

struct VolumeGrad {
  std::vector<double> density;   // w.r.t. raw density
  std::vector<double> colors;
  std::vector<double> features;
};

/// Exact adjoint of render_rays. `grad` holds per-ray cotangents for colour
/// (n x 3), features (n x dim) and opacity (n); empty vectors mean zero.
inline VolumeGrad backprop_volume(const VoxelField& field, const VolumeTape& tape, const ViewGrad& grad) {
  if (!tape.valid || tape.revision != field.revision || tape.resolution != field.resolution || tape.dim != field.dim)
    fail(ErrorKind::invalid_argument, "backprop_volume: stale or foreign forward cache");
  const std::size_t n = tape.ray_count(), D = field.dim, nodes = field.node_count();
  require(grad.colors.empty() || grad.colors.size() == n * 3, "backprop_volume: colour cotangent size mismatch");
  require(grad.features.empty() || grad.features.size() == n * D, "backprop_volume: feature cotangent size mismatch");
  require(grad.opacity.empty() || grad.opacity.size() == n, "backprop_volume: opacity cotangent size mismatch");

  const unsigned chunks = static_cast<unsigned>(std::min<std::size_t>(thread_count(), std::max<std::size_t>(n, 1)));
  std::vector<VolumeGrad> partial(chunks);
  parallel_chunks(
      n,
      [&](std::size_t begin, std::size_t end, unsigned chunk) {
        auto& g = partial[chunk];
        g.density.assign(nodes, 0.0);
        g.colors.assign(nodes * 3, 0.0);
        g.features.assign(nodes * D, 0.0);
        std::vector<Trilinear> tri;
        std::vector<double> raw, alpha, trans, e, color, feat;
        for (std::size_t r = begin; r < end; ++r) {
          const std::size_t s0 = tape.ray_offset[r], s1 = tape.ray_offset[r + 1], S = s1 - s0;
          if (S == 0) continue;
          const double* gc = grad.colors.empty() ? nullptr : &grad.colors[r * 3];
          const double* gf = grad.features.empty() ? nullptr : &grad.features[r * D];
          const double go = grad.opacity.empty() ? 0.0 : grad.opacity[r];
          tri.resize(S);
          raw.assign(S, 0.0);
          alpha.resize(S);
          trans.resize(S);
          e.assign(S, 0.0);
          color.assign(S * 3, 0.0);
          feat.assign(S * D, 0.0);
          double T = 1.0;
          for (std::size_t i = 0; i < S; ++i) {
            tri[i] = trilinear(field, tape.position[s0 + i]);
            for (int m = 0; m < 8; ++m) {
              const double w = tri[i].weight[m];
              const std::size_t nd = tri[i].node[m];
              raw[i] += w * field.density[nd];
              for (int c = 0; c < 3; ++c) color[i * 3 + c] += w * field.colors[nd * 3 + c];
              for (std::size_t d = 0; d < D; ++d) feat[i * D + d] += w * field.features[nd * D + d];
            }
            alpha[i] = 1.0 - std::exp(-softplus(raw[i]) * tape.delta[s0 + i]);
            trans[i] = T;
            T *= 1.0 - alpha[i];
            double ei = go;
            if (gc)
              for (int c = 0; c < 3; ++c) ei += gc[c] * color[i * 3 + c];
            if (gf)
              for (std::size_t d = 0; d < D; ++d) ei += gf[d] * feat[i * D + d];
            e[i] = ei;
          }
          // dL/dalpha_k = T_k (e_k - S_k),  S_{k-1} = alpha_k e_k + (1 - alpha_k) S_k
          double tail = 0.0;
          for (std::size_t k = S; k-- > 0;) {
            const double dalpha = trans[k] * (e[k] - tail);
            tail = alpha[k] * e[k] + (1.0 - alpha[k]) * tail;
            const double dsigma = dalpha * tape.delta[s0 + k] * (1.0 - alpha[k]);
            const double draw = dsigma * sigmoid(raw[k]);
            const double w = trans[k] * alpha[k];
            for (int m = 0; m < 8; ++m) {
              const double tw = tri[k].weight[m];
              if (tw == 0.0) continue;
              const std::size_t nd = tri[k].node[m];
              g.density[nd] += tw * draw;
              if (gc)
                for (int c = 0; c < 3; ++c) g.colors[nd * 3 + c] += tw * w * gc[c];
              if (gf)
                for (std::size_t d = 0; d < D; ++d) g.features[nd * D + d] += tw * w * gf[d];
            }
          }
        }
      },
      chunks);

  VolumeGrad out;
  out.density.assign(nodes, 0.0);
  out.colors.assign(nodes * 3, 0.0);
  out.features.assign(nodes * D, 0.0);
  for (const auto& g : partial) {
    if (g.density.empty()) continue;
    for (std::size_t i = 0; i < nodes; ++i) out.density[i] += g.density[i];
    for (std::size_t i = 0; i < out.colors.size(); ++i) out.colors[i] += g.colors[i];
    for (std::size_t i = 0; i < out.features.size(); ++i) out.features[i] += g.features[i];
  }
  return out;
}

}  // namespace omnifield
