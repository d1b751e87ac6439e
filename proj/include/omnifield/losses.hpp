#pragma once

// Training objectives with analytic gradients w.r.t. the per-sample inputs.
//
// Contrastive terms work on a ClusterBatch: samples grouped by the patch id
// they fall in. Cluster means and temperatures are computed once per batch
// and treated as constants when differentiating.

#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "omnifield/core.hpp"
#include "omnifield/hier2d.hpp"

namespace omnifield {

inline constexpr double kTemperatureSmoothing = 10.0;
inline constexpr double kDefaultPhiMin = 0.05;

struct LossResult {
  double value = 0;
  std::vector<double> grad;
};

struct ClusterBatch {
  std::size_t dim = 0;
  std::vector<double> features;              // N x dim
  std::vector<std::uint32_t> patch_of_sample;  // N image patch ids
  // Clusters present in the batch, ordered by patch id.
  std::vector<std::uint32_t> cluster_patch;
  std::vector<std::uint32_t> cluster_of_sample;
  std::vector<std::vector<std::uint32_t>> members;
  std::vector<double> means;         // K x dim
  std::vector<double> temperatures;  // K

  std::size_t sample_count() const { return patch_of_sample.size(); }
  std::size_t cluster_count() const { return cluster_patch.size(); }
  std::span<const double> feature(std::size_t j) const { return {features.data() + j * dim, dim}; }
  std::span<const double> mean(std::size_t k) const { return {means.data() + k * dim, dim}; }

  /// Compact index of a patch id, or -1 when the patch has no samples.
  std::int64_t cluster_of_patch(std::uint32_t patch) const {
    const auto it = std::lower_bound(cluster_patch.begin(), cluster_patch.end(), patch);
    return it != cluster_patch.end() && *it == patch ? it - cluster_patch.begin() : -1;
  }
};

/// Groups samples by patch, then computes means and clamped temperatures
/// phi = sum ||f - mean|| / (n log(n + 10)), floored at phi_min.
inline ClusterBatch cluster_stats(std::vector<double> features, std::vector<std::uint32_t> patches, std::size_t dim,
                                  double phi_min = kDefaultPhiMin) {
  require(dim > 0 && features.size() == patches.size() * dim, "cluster_stats: feature/patch size mismatch");
  require(phi_min > 0, "cluster_stats: phi_min must be positive");
  ClusterBatch b;
  b.dim = dim;
  b.features = std::move(features);
  b.patch_of_sample = std::move(patches);
  for (auto p : b.patch_of_sample) require(p != kNullPatch, "cluster_stats: sample with null patch id");
  b.cluster_patch = b.patch_of_sample;
  std::sort(b.cluster_patch.begin(), b.cluster_patch.end());
  b.cluster_patch.erase(std::unique(b.cluster_patch.begin(), b.cluster_patch.end()), b.cluster_patch.end());
  const std::size_t K = b.cluster_patch.size();
  b.members.assign(K, {});
  b.cluster_of_sample.resize(b.sample_count());
  for (std::size_t j = 0; j < b.sample_count(); ++j) {
    const auto k = static_cast<std::uint32_t>(b.cluster_of_patch(b.patch_of_sample[j]));
    b.cluster_of_sample[j] = k;
    b.members[k].push_back(static_cast<std::uint32_t>(j));
  }
  b.means.assign(K * dim, 0.0);
  b.temperatures.assign(K, phi_min);
  for (std::size_t k = 0; k < K; ++k) {
    const double n = static_cast<double>(b.members[k].size());
    double* m = &b.means[k * dim];
    for (auto j : b.members[k])
      for (std::size_t d = 0; d < dim; ++d) m[d] += b.features[j * dim + d];
    for (std::size_t d = 0; d < dim; ++d) m[d] /= n;
    double spread = 0;
    for (auto j : b.members[k]) {
      double s = 0;
      for (std::size_t d = 0; d < dim; ++d) s += (b.features[j * dim + d] - m[d]) * (b.features[j * dim + d] - m[d]);
      spread += std::sqrt(s);
    }
    b.temperatures[k] = std::max(phi_min, spread / (n * std::log(n + kTemperatureSmoothing)));
  }
  return b;
}

namespace detail {

// Per-sample logits z_k = f . mean_k / phi_k with their log-sum-exp and softmax.
struct SampleLogits {
  std::vector<double> z, p;
  double lse = 0;
};

inline void sample_logits(const ClusterBatch& b, std::size_t j, SampleLogits& out) {
  const std::size_t K = b.cluster_count();
  out.z.resize(K);
  out.p.resize(K);
  const auto f = b.feature(j);
  double zmax = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < K; ++k) {
    const auto m = b.mean(k);
    double dot = 0;
    for (std::size_t d = 0; d < b.dim; ++d) dot += f[d] * m[d];
    out.z[k] = dot / b.temperatures[k];
    zmax = std::max(zmax, out.z[k]);
  }
  double sum = 0;
  for (std::size_t k = 0; k < K; ++k) sum += (out.p[k] = std::exp(out.z[k] - zmax));
  for (auto& v : out.p) v /= sum;
  out.lse = zmax + std::log(sum);
}

// grad_j += scale * ((sum_k coef_k) * sum_k p_k a_k - sum_k coef_k a_k), a_k = mean_k / phi_k
inline void accumulate_contrastive_grad(const ClusterBatch& b, const SampleLogits& lg, std::span<const double> coef, double* grad) {
  double total = 0;
  for (double c : coef) total += c;
  for (std::size_t k = 0; k < b.cluster_count(); ++k) {
    const double w = (total * lg.p[k] - coef[k]) / b.temperatures[k];
    if (w == 0) continue;
    const auto m = b.mean(k);
    for (std::size_t d = 0; d < b.dim; ++d) grad[d] += w * m[d];
  }
}

}  // namespace detail

/// L_CC = -(1/K) sum_j log softmax_{c(j)}(z_j), K = clusters in the batch.
inline LossResult loss_cc(const ClusterBatch& b) {
  LossResult r;
  r.grad.assign(b.features.size(), 0.0);
  const std::size_t K = b.cluster_count();
  if (K == 0) return r;
  std::vector<double> partial(K, 0.0);
  parallel_for(K, [&](std::size_t i) {
    detail::SampleLogits lg;
    std::vector<double> coef(K, 0.0);
    coef[i] = 1.0 / static_cast<double>(K);
    for (auto j : b.members[i]) {
      detail::sample_logits(b, j, lg);
      partial[i] += lg.lse - lg.z[i];
      detail::accumulate_contrastive_grad(b, lg, coef, &r.grad[j * b.dim]);
    }
  });
  for (double v : partial) r.value += v;
  r.value /= static_cast<double>(K);
  return r;
}

/// Restricts one anchor's levels to patches present in the batch, expressed as
/// compact cluster indices. Levels left empty are removed.
inline std::vector<std::vector<std::uint32_t>> batch_levels(const ClusterBatch& b, const HierLevels& levels) {
  std::vector<std::vector<std::uint32_t>> out;
  for (const auto& level : levels.levels) {
    std::vector<std::uint32_t> present;
    for (auto patch : level) {
      const auto k = b.cluster_of_patch(patch);
      if (k >= 0) present.push_back(static_cast<std::uint32_t>(k));
    }
    if (!present.empty()) out.push_back(std::move(present));
  }
  return out;
}

/// Hierarchical contrastive loss. `levels_by_patch[p]` holds the hierarchy of
/// image patch p; only patches with samples contribute. Each level term is
/// max(L(s), max_{s' in previous level} L(s')) weighted by lambda^(d-1)/(N*L),
/// where L counts (anchor, depth) pairs. The max routes the gradient to
/// whichever branch wins.
inline LossResult loss_hier(const ClusterBatch& b, const std::vector<HierLevels>& levels_by_patch, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail(ErrorKind::invalid_argument, "loss_hier: lambda must lie in [0, 1]");
  LossResult r;
  r.grad.assign(b.features.size(), 0.0);
  const std::size_t K = b.cluster_count();
  if (K == 0) return r;

  std::vector<std::vector<std::vector<std::uint32_t>>> tree(K);
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < K; ++i) {
    const auto patch = b.cluster_patch[i];
    require(patch < levels_by_patch.size(), "loss_hier: no hierarchy for a sampled patch");
    tree[i] = batch_levels(b, levels_by_patch[patch]);
    pairs += tree[i].size();
  }
  const double norm = static_cast<double>(b.sample_count()) * static_cast<double>(pairs);

  std::vector<double> partial(K, 0.0);
  parallel_for(K, [&](std::size_t i) {
    detail::SampleLogits lg;
    std::vector<double> coef(K);
    for (auto j : b.members[i]) {
      detail::sample_logits(b, j, lg);
      std::fill(coef.begin(), coef.end(), 0.0);
      double prev_max = -std::numeric_limits<double>::infinity();
      std::uint32_t prev_arg = 0;
      double sample_loss = 0;
      for (std::size_t d = 0; d < tree[i].size(); ++d) {
        const double w = std::pow(lambda, static_cast<double>(d)) / norm;
        double level_max = -std::numeric_limits<double>::infinity();
        std::uint32_t level_arg = 0;
        for (auto s : tree[i][d]) {
          const double l = lg.lse - lg.z[s];
          if (l > level_max) {
            level_max = l;
            level_arg = s;
          }
          if (w == 0) continue;
          if (l >= prev_max) {
            sample_loss += w * l;
            coef[s] += w;
          } else {
            sample_loss += w * prev_max;
            coef[prev_arg] += w;
          }
        }
        prev_max = level_max;
        prev_arg = level_arg;
      }
      partial[i] += sample_loss;
      detail::accumulate_contrastive_grad(b, lg, coef, &r.grad[j * b.dim]);
    }
  });
  for (double v : partial) r.value += v;
  return r;
}

/// mean (||f|| - 1)^2 with the zero-vector subgradient taken as 0.
inline LossResult loss_norm(std::span<const double> features, std::size_t dim) {
  require(dim > 0 && features.size() % dim == 0, "loss_norm: size mismatch");
  LossResult r;
  r.grad.assign(features.size(), 0.0);
  const std::size_t n = features.size() / dim;
  if (n == 0) return r;
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0;
    for (std::size_t d = 0; d < dim; ++d) s += features[j * dim + d] * features[j * dim + d];
    const double len = std::sqrt(s);
    r.value += (len - 1) * (len - 1);
    if (len > 0)
      for (std::size_t d = 0; d < dim; ++d) r.grad[j * dim + d] = 2 * (len - 1) * features[j * dim + d] / len / static_cast<double>(n);
  }
  r.value /= static_cast<double>(n);
  return r;
}

/// Mean over rays of the squared RGB error.
inline LossResult loss_color(std::span<const double> rendered, std::span<const double> target) {
  require(rendered.size() == target.size() && rendered.size() % 3 == 0, "loss_color: size mismatch");
  LossResult r;
  r.grad.assign(rendered.size(), 0.0);
  const std::size_t n = rendered.size() / 3;
  if (n == 0) return r;
  for (std::size_t i = 0; i < rendered.size(); ++i) {
    const double e = rendered[i] - target[i];
    r.value += e * e;
    r.grad[i] = 2 * e / static_cast<double>(n);
  }
  r.value /= static_cast<double>(n);
  return r;
}

inline constexpr double kOpacityEpsilon = 1e-6;

/// Mean of -o log o with o clamped to [1e-6, 1]; pushes rays toward empty or opaque.
inline LossResult loss_opacity(std::span<const double> opacity) {
  LossResult r;
  r.grad.assign(opacity.size(), 0.0);
  if (opacity.empty()) return r;
  const double n = static_cast<double>(opacity.size());
  for (std::size_t i = 0; i < opacity.size(); ++i) {
    const double o = std::clamp(opacity[i], kOpacityEpsilon, 1.0);
    r.value += -o * std::log(o);
    if (opacity[i] >= kOpacityEpsilon && opacity[i] <= 1.0) r.grad[i] = -(std::log(o) + 1) / n;
  }
  r.value /= n;
  return r;
}

struct LossWeights {
  double w1 = 5e-4;  // hierarchical
  double w2 = 5e2;   // norm
  double w3 = 1e-3;  // opacity
};

struct LossBreakdown {
  double l_h = 0, l_norm = 0, l_color = 0, l_opacity = 0, total = 0;
};

inline LossBreakdown total_loss(double l_h, double l_norm, double l_color, double l_opacity, const LossWeights& w) {
  return {l_h, l_norm, l_color, l_opacity, l_color + w.w1 * l_h + w.w2 * l_norm + w.w3 * l_opacity};
}

/// Whitespace-separated log, one line per step, "#"-prefixed header.
class LossLog {
 public:
  explicit LossLog(std::ostream& out) : out_(out) { out_ << "# step l_h l_norm l_color l_opacity total lr\n"; }

  void write(std::size_t step, const LossBreakdown& b, double lr) {
    char line[256];
    std::snprintf(line, sizeof line, "%zu %.9g %.9g %.9g %.9g %.9g %.9g\n", step, b.l_h, b.l_norm, b.l_color, b.l_opacity, b.total, lr);
    out_ << line;
  }

 private:
  std::ostream& out_;
};

}  // namespace omnifield
