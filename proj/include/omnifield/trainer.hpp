#pragma once

// Optimisation loop: one image per iteration (round-robin), a random batch of
// its covered pixels, the hierarchical contrastive objective plus
// regularisers, and Adam updates with a cosine learning-rate schedule.

#include <cmath>
#include <functional>
#include <iostream>
#include <random>

#include "omnifield/config.hpp"
#include "omnifield/dataset.hpp"
#include "omnifield/field_io.hpp"
#include "omnifield/losses.hpp"
#include "omnifield/volume.hpp"

namespace omnifield {

enum class Schedule { cosine, constant };

struct TrainConfig {
  std::size_t iterations = 5000;
  std::size_t rays_per_batch = 2048;
  double lr_start = 1e-2;
  double lr_end = 3e-4;
  Schedule schedule = Schedule::cosine;
  double lambda = 0.5;
  std::size_t dim = 16;
  LossWeights weights;
  std::string backend = "surface";  // surface | voxel
  std::uint64_t seed = 1;
  double phi_min = kDefaultPhiMin;
  int voxel_resolution = 32;
  int samples_per_ray = 48;
  std::size_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::uint32_t knn = 8;
  double init_noise = 0.01;  // per-point deviation from the shared initial feature direction

  /// Settings used for the published results; desk-scale runs use the defaults.
  static TrainConfig paper() {
    TrainConfig c;
    c.iterations = 50000;
    c.rays_per_batch = 8192;
    c.dim = 16;
    return c;
  }

  void validate() const {
    auto check = [](bool ok, const std::string& what) {
      if (!ok) fail(ErrorKind::bad_config, "train config: " + what);
    };
    check(iterations >= 1 && rays_per_batch >= 1, "iterations and rays_per_batch must be >= 1");
    check(lr_end > 0 && lr_start >= lr_end, "need lr_start >= lr_end > 0");
    check(lambda >= 0 && lambda <= 1, "lambda must lie in [0, 1]");
    check(dim >= 1, "dim must be >= 1");
    check(backend == "surface" || backend == "voxel", "backend must be surface or voxel");
    check(phi_min > 0, "phi_min must be positive");
    check(voxel_resolution >= 2 && samples_per_ray >= 2, "voxel_resolution and samples_per_ray must be >= 2");
    check(init_noise >= 0, "init_noise must be >= 0");
  }

  static const std::set<std::string>& keys() {
    static const std::set<std::string> k{"iterations", "rays_per_batch", "lr_start", "lr_end", "schedule", "lambda", "dim",
                                         "w1", "w2", "w3", "backend", "seed", "phi_min", "voxel_resolution", "samples_per_ray",
                                         "checkpoint_every", "knn", "init_noise", "preset"};
    return k;
  }

  /// Applies the keys present in `kv` on top of this configuration.
  void apply(const KeyValues& kv) {
    kv.check_known(keys());
    if (kv.has("preset")) {
      const auto& p = kv.entries().at("preset");
      if (p == "paper") *this = paper();
      else if (p == "desk") *this = TrainConfig{};
      else fail(ErrorKind::bad_config, "unknown preset '" + p + "'");
    }
    kv.read("iterations", iterations);
    kv.read("rays_per_batch", rays_per_batch);
    kv.read("lr_start", lr_start);
    kv.read("lr_end", lr_end);
    if (kv.has("schedule")) {
      const auto& s = kv.entries().at("schedule");
      if (s == "cosine") schedule = Schedule::cosine;
      else if (s == "constant") schedule = Schedule::constant;
      else fail(ErrorKind::bad_config, "schedule must be cosine or constant");
    }
    kv.read("lambda", lambda);
    kv.read("dim", dim);
    kv.read("w1", weights.w1);
    kv.read("w2", weights.w2);
    kv.read("w3", weights.w3);
    kv.read("backend", backend);
    kv.read("seed", seed);
    kv.read("phi_min", phi_min);
    kv.read("voxel_resolution", voxel_resolution);
    kv.read("samples_per_ray", samples_per_ray);
    kv.read("checkpoint_every", checkpoint_every);
    kv.read("knn", knn);
    kv.read("init_noise", init_noise);
    validate();
  }

  std::string to_config() const {
    std::ostringstream o;
    o << "iterations = " << iterations << "\nrays_per_batch = " << rays_per_batch << "\nlr_start = " << format_number(lr_start)
      << "\nlr_end = " << format_number(lr_end) << "\nschedule = " << (schedule == Schedule::cosine ? "cosine" : "constant") << "\nlambda = " << format_number(lambda)
      << "\ndim = " << dim << "\nw1 = " << format_number(weights.w1) << "\nw2 = " << format_number(weights.w2) << "\nw3 = " << format_number(weights.w3) << "\nbackend = " << backend
      << "\nseed = " << seed << "\nphi_min = " << format_number(phi_min) << "\nvoxel_resolution = " << voxel_resolution
      << "\nsamples_per_ray = " << samples_per_ray << "\ncheckpoint_every = " << checkpoint_every << "\nknn = " << knn
      << "\ninit_noise = " << format_number(init_noise) << "\n";
    return o.str();
  }
};

inline double lr_at(std::size_t step, const TrainConfig& c) {
  if (c.schedule == Schedule::constant) return c.lr_start;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(c.iterations));
  return c.lr_end + 0.5 * (c.lr_start - c.lr_end) * (1 + std::cos(std::numbers::pi * t));
}

struct AdamState {
  std::vector<double> m, v;
  std::size_t step = 0;
};

inline constexpr double kAdamBeta1 = 0.9, kAdamBeta2 = 0.999, kAdamEpsilon = 1e-8;

/// One bias-corrected Adam update in place.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& s, double lr) {
  require(params.size() == grads.size(), "adam_step: parameter/gradient size mismatch");
  if (s.m.size() != params.size()) {
    require(s.step == 0, "adam_step: state shape does not match parameters");
    s.m.assign(params.size(), 0.0);
    s.v.assign(params.size(), 0.0);
  }
  ++s.step;
  const double c1 = 1 - std::pow(kAdamBeta1, static_cast<double>(s.step));
  const double c2 = 1 - std::pow(kAdamBeta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m[i] = kAdamBeta1 * s.m[i] + (1 - kAdamBeta1) * grads[i];
    s.v[i] = kAdamBeta2 * s.v[i] + (1 - kAdamBeta2) * grads[i] * grads[i];
    params[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + kAdamEpsilon);
  }
}

struct PixelBatch {
  std::vector<std::uint32_t> pixels;   // row-major pixel indices
  std::vector<std::uint32_t> patches;  // patch id per pixel (kNullPatch when uncovered by masks)
};

/// Uniform sample (with replacement) over the view's eligible pixels: pixels
/// with a non-null patch, and for the surface backend also a visible point.
/// Returns an empty batch when nothing is eligible.
inline PixelBatch sample_batch(const DatasetView& view, std::size_t count, std::mt19937_64& rng, bool need_hit) {
  PixelBatch b;
  if (!view.has_evidence()) return b;
  const auto& ids = view.rep->partition.patch_index_map;
  std::vector<std::uint32_t> eligible;
  for (std::size_t p = 0; p < ids.size(); ++p)
    if (ids[p] != kNullPatch && (!need_hit || view.hit_index[p] >= 0)) eligible.push_back(static_cast<std::uint32_t>(p));
  if (eligible.empty()) return b;
  std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);
  for (std::size_t i = 0; i < count; ++i) {
    const auto p = eligible[pick(rng)];
    b.pixels.push_back(p);
    b.patches.push_back(ids[p]);
  }
  return b;
}

struct TrainHooks {
  std::ostream* loss_log = nullptr;                                     // per-step loss lines
  std::function<void(std::size_t, const LossBreakdown&, double)> progress;  // called every step
  std::filesystem::path checkpoint_path;                                // periodic and diagnostic checkpoints
  std::ostream* warnings = &std::cerr;
};

struct TrainResult {
  FieldVariant field;
  std::vector<LossBreakdown> history;
  std::size_t skipped_steps = 0;
};

namespace detail {

inline void abort_on_nan(const LossBreakdown& b, std::size_t step, const FieldVariant& field, const TrainHooks& hooks) {
  if (std::isfinite(b.total)) return;
  std::string where = "no checkpoint path configured";
  if (!hooks.checkpoint_path.empty()) {
    auto diag = hooks.checkpoint_path;
    diag += ".nan";
    write_field(diag, field);
    where = "diagnostic checkpoint written to " + diag.string();
  }
  fail(ErrorKind::numerical, "non-finite loss at step " + std::to_string(step) + "; " + where);
}

inline void maybe_checkpoint(std::size_t step, const TrainConfig& c, const FieldVariant& field, const TrainHooks& hooks) {
  if (c.checkpoint_every == 0 || hooks.checkpoint_path.empty()) return;
  if ((step + 1) % c.checkpoint_every == 0) write_field(hooks.checkpoint_path, field);
}

// Indices of the batch samples that carry a patch id.
inline std::vector<std::size_t> labelled_samples(const PixelBatch& b) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < b.patches.size(); ++i)
    if (b.patches[i] != kNullPatch) out.push_back(i);
  return out;
}

}  // namespace detail

/// Unit features normalise(u + noise * r_i): one shared random direction u
/// plus independent unit perturbations r_i.
inline std::vector<double> initial_features(std::size_t count, std::size_t dim, double noise, std::uint64_t seed) {
  const auto shared = random_unit_features(1, dim, seed ^ 0xa11ce5ull);
  auto f = random_unit_features(count, dim, seed);
  for (std::size_t i = 0; i < count; ++i) {
    double nn = 0;
    for (std::size_t d = 0; d < dim; ++d) {
      auto& x = f[i * dim + d];
      x = shared[d] + noise * x;
      nn += x * x;
    }
    for (std::size_t d = 0; d < dim; ++d) f[i * dim + d] /= std::sqrt(nn);
  }
  return f;
}

inline SurfaceField initial_surface_field(const Dataset& ds, const TrainConfig& c) {
  SurfaceField f = ds.points;
  f.dim = c.dim;
  f.features = initial_features(f.size(), c.dim, c.init_noise, c.seed ^ 0x5eedf00dull);
  rebuild_adjacency(f, c.knn);
  return f;
}

inline VoxelField initial_voxel_field(const Dataset& ds, const TrainConfig& c) {
  Bounds b = ds.points.bounds();
  const Eigen::Vector3d pad = 0.05 * b.extent() + Eigen::Vector3d::Constant(1e-3);
  b.lo -= pad;
  b.hi += pad;
  auto f = VoxelField::make(c.voxel_resolution, b, c.dim);
  std::fill(f.density.begin(), f.density.end(), -1.0);
  std::fill(f.colors.begin(), f.colors.end(), 0.5);
  f.features = initial_features(f.node_count(), c.dim, c.init_noise, c.seed ^ 0x5eedf00dull);
  return f;
}

/// Trains features on the fixed point geometry with w1 L_H + w2 L_norm.
inline TrainResult train_surface(const Dataset& ds, const TrainConfig& c, const TrainHooks& hooks = {}) {
  c.validate();
  require(!ds.views.empty(), "train: dataset has no views");
  TrainResult result;
  result.field = initial_surface_field(ds, c);
  auto& field = std::get<SurfaceField>(result.field);
  std::mt19937_64 rng(c.seed);
  AdamState adam;
  std::optional<LossLog> log;
  if (hooks.loss_log) log.emplace(*hooks.loss_log);
  std::vector<double> grad(field.features.size());

  for (std::size_t step = 0; step < c.iterations; ++step) {
    const auto& view = ds.views[step % ds.views.size()];
    const double lr = lr_at(step, c);
    const auto batch = sample_batch(view, c.rays_per_batch, rng, true);
    if (batch.pixels.empty()) {
      if (hooks.warnings && result.skipped_steps++ < ds.views.size())
        *hooks.warnings << "warning: view " << step % ds.views.size() << " has no usable pixels; skipped\n";
      continue;
    }
    std::vector<double> feats(batch.pixels.size() * c.dim);
    for (std::size_t i = 0; i < batch.pixels.size(); ++i) {
      const auto pt = static_cast<std::size_t>(view.hit_index[batch.pixels[i]]);
      std::copy_n(field.features.begin() + static_cast<std::ptrdiff_t>(pt * c.dim), c.dim, feats.begin() + static_cast<std::ptrdiff_t>(i * c.dim));
    }
    const auto cb = cluster_stats(feats, batch.patches, c.dim, c.phi_min);
    const auto lh = loss_hier(cb, view.levels, c.lambda);
    const auto ln = loss_norm(feats, c.dim);
    const auto parts = total_loss(lh.value, ln.value, 0.0, 0.0, c.weights);
    detail::abort_on_nan(parts, step, result.field, hooks);

    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t i = 0; i < batch.pixels.size(); ++i) {
      const auto pt = static_cast<std::size_t>(view.hit_index[batch.pixels[i]]);
      for (std::size_t d = 0; d < c.dim; ++d)
        grad[pt * c.dim + d] += c.weights.w1 * lh.grad[i * c.dim + d] + c.weights.w2 * ln.grad[i * c.dim + d];
    }
    adam_step(field.features, grad, adam, lr);

    result.history.push_back(parts);
    if (log) log->write(step, parts, lr);
    if (hooks.progress) hooks.progress(step, parts, lr);
    detail::maybe_checkpoint(step, c, result.field, hooks);
  }
  return result;
}

/// Trains density, colour and features of a voxel grid through volume
/// rendering: L_c + w1 L_H + w2 L_norm + w3 L_reg. All pixels feed the colour
/// and opacity terms; only pixels with a patch id feed L_H and L_norm.
inline TrainResult train_voxel(const Dataset& ds, const TrainConfig& c, const TrainHooks& hooks = {}) {
  c.validate();
  require(!ds.views.empty(), "train: dataset has no views");
  for (const auto& v : ds.views) require(!v.rgb.empty(), "train: voxel backend needs target colours for every view");
  TrainResult result;
  result.field = initial_voxel_field(ds, c);
  auto& field = std::get<VoxelField>(result.field);
  std::mt19937_64 rng(c.seed);
  AdamState adam_density, adam_colors, adam_features;
  std::optional<LossLog> log;
  if (hooks.loss_log) log.emplace(*hooks.loss_log);

  for (std::size_t step = 0; step < c.iterations; ++step) {
    const auto& view = ds.views[step % ds.views.size()];
    const double lr = lr_at(step, c);
    const auto& cam = view.camera;
    const std::size_t pixels = static_cast<std::size_t>(cam.width) * cam.height;
    PixelBatch batch;
    std::uniform_int_distribution<std::size_t> pick(0, pixels - 1);
    const auto* ids = view.rep ? &view.rep->partition.patch_index_map : nullptr;
    for (std::size_t i = 0; i < c.rays_per_batch; ++i) {
      const auto p = static_cast<std::uint32_t>(pick(rng));
      batch.pixels.push_back(p);
      batch.patches.push_back(ids ? (*ids)[p] : kNullPatch);
    }
    std::vector<Ray> rays;
    std::vector<double> target;
    for (auto p : batch.pixels) {
      rays.push_back(cam.pixel_ray(static_cast<int>(p % cam.width), static_cast<int>(p / cam.width)));
      target.insert(target.end(), view.rgb.begin() + 3 * p, view.rgb.begin() + 3 * p + 3);
    }
    VolumeTape tape;
    const auto out = render_rays(field, rays, {c.samples_per_ray, true, c.seed * 0x9e3779b97f4a7c15ull + step}, &tape);

    const auto labelled = detail::labelled_samples(batch);
    std::vector<double> feats;
    std::vector<std::uint32_t> patches;
    for (auto i : labelled) {
      feats.insert(feats.end(), out.features.begin() + static_cast<std::ptrdiff_t>(i * c.dim), out.features.begin() + static_cast<std::ptrdiff_t>((i + 1) * c.dim));
      patches.push_back(batch.patches[i]);
    }
    LossResult lh, ln;
    if (!labelled.empty()) {
      lh = loss_hier(cluster_stats(feats, patches, c.dim, c.phi_min), view.levels, c.lambda);
      ln = loss_norm(feats, c.dim);
    }
    const auto lc = loss_color(out.colors, target);
    const auto lo = loss_opacity(out.opacity);
    const auto parts = total_loss(lh.value, ln.value, lc.value, lo.value, c.weights);
    detail::abort_on_nan(parts, step, result.field, hooks);

    ViewGrad g;
    g.colors = lc.grad;
    g.opacity = lo.grad;
    for (auto& x : g.opacity) x *= c.weights.w3;
    g.features.assign(out.features.size(), 0.0);
    for (std::size_t k = 0; k < labelled.size(); ++k)
      for (std::size_t d = 0; d < c.dim; ++d)
        g.features[labelled[k] * c.dim + d] = c.weights.w1 * lh.grad[k * c.dim + d] + c.weights.w2 * ln.grad[k * c.dim + d];
    const auto grads = backprop_volume(field, tape, g);
    adam_step(field.density, grads.density, adam_density, lr);
    adam_step(field.colors, grads.colors, adam_colors, lr);
    adam_step(field.features, grads.features, adam_features, lr);
    ++field.revision;

    result.history.push_back(parts);
    if (log) log->write(step, parts, lr);
    if (hooks.progress) hooks.progress(step, parts, lr);
    detail::maybe_checkpoint(step, c, result.field, hooks);
  }
  return result;
}

inline TrainResult train_scene(const Dataset& ds, const TrainConfig& c, const TrainHooks& hooks = {}) {
  return c.backend == "voxel" ? train_voxel(ds, c, hooks) : train_surface(ds, c, hooks);
}

}  // namespace omnifield
