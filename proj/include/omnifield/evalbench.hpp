#pragma once

// Benchmarks: hierarchical query mIoU, cross-view instance propagation, and
// parameter sweeps over lambda / feature dimension.

#include <map>
#include <random>

#include "omnifield/dataset.hpp"
#include "omnifield/image_io.hpp"
#include "omnifield/trainer.hpp"
#include "omnifield/volume.hpp"

namespace omnifield {

/// Score given to pixels with no surface; below every cosine value.
inline constexpr double kUncoveredScore = -2.0;

struct ScoreMap {
  int width = 0, height = 0;
  std::vector<double> values;
  Mask valid;
  int view = -1, query_x = -1, query_y = -1;
  std::string rule;

  double at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
  Mask threshold(double t) const {
    Mask m(width, height, 0);
    for (std::size_t p = 0; p < values.size(); ++p) m.values[p] = valid.values[p] && values[p] > t;
    return m;
  }
};

namespace detail {
inline double unit_dot(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t d = 0; d < a.size(); ++d) {
    ab += a[d] * b[d];
    aa += a[d] * a[d];
    bb += b[d] * b[d];
  }
  if (aa == 0 || bb == 0) return 0;
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

inline bool covered(const RenderedView& v, std::size_t p) { return v.opacity[p] > 0.5; }
}  // namespace detail

/// Cosine similarity of every covered pixel's feature to `query` (both unit-normalised).
inline ScoreMap cosine_score_map(const RenderedView& v, std::span<const double> query) {
  ScoreMap s;
  s.width = v.width;
  s.height = v.height;
  s.values.assign(v.pixel_count(), kUncoveredScore);
  s.valid = Mask(v.width, v.height, 0);
  s.rule = "cosine";
  for (std::size_t p = 0; p < v.pixel_count(); ++p) {
    if (!detail::covered(v, p)) continue;
    s.valid.values[p] = 1;
    s.values[p] = detail::unit_dot(v.feature(p), query);
  }
  return s;
}

inline ScoreMap cosine_score_map(const RenderedView& v, int qx, int qy) {
  require(qx >= 0 && qy >= 0 && qx < v.width && qy < v.height, "query pixel outside the image");
  const auto q = v.pixel(qx, qy);
  if (!detail::covered(v, q)) fail(ErrorKind::no_surface, "query pixel (" + std::to_string(qx) + ", " + std::to_string(qy) + ") shows no surface");
  std::vector<double> query(v.feature(q).begin(), v.feature(q).end());
  auto s = cosine_score_map(v, query);
  s.query_x = qx;
  s.query_y = qy;
  return s;
}

struct ThresholdFit {
  double threshold = 0;
  double iou = 0;
};

/// Threshold t maximising IoU({score > t}, gt). Candidates are the distinct
/// score values plus one value below the minimum (select everything); among
/// equal IoUs the larger threshold wins.
inline ThresholdFit best_iou_threshold(std::span<const double> scores, const Mask& gt) {
  require(scores.size() == gt.values.size(), "best_iou_threshold: size mismatch");
  const std::size_t gt_count = count_set(gt);
  if (gt_count == 0) fail(ErrorKind::invalid_argument, "best_iou_threshold: ground-truth mask is empty");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });

  // Threshold at the i-th distinct value selects every pixel scoring above it.
  ThresholdFit best{scores[order[0]], 0.0};
  std::size_t selected = 0, hits = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double value = scores[order[i]];
    // pixels above `value` are exactly the first `selected`
    const double iou = static_cast<double>(hits) / static_cast<double>(gt_count + selected - hits);
    if (iou > best.iou) best = {value, iou};
    while (i < order.size() && scores[order[i]] == value) {
      ++selected;
      hits += gt.values[order[i]] != 0;
      ++i;
    }
  }
  const double iou_all = static_cast<double>(hits) / static_cast<double>(gt_count + selected - hits);
  if (iou_all > best.iou) best = {scores[order.back()] - 1.0, iou_all};
  return best;
}

inline RenderedView render_field(const FieldVariant& field, const Camera& cam, double point_radius, int samples_per_ray = 64) {
  if (const auto* s = std::get_if<SurfaceField>(&field)) return render_surface(*s, cam, point_radius);
  return render_volume(std::get<VoxelField>(field), cam, samples_per_ray);
}

struct QueryResult {
  Query query;
  double iou_l1 = 0, iou_l2 = 0, th_l1 = 0, th_l2 = 0;
};

struct BenchResult {
  std::vector<QueryResult> queries;
  double miou_l1 = 0, miou_l2 = 0, miou_avg = 0;
};

/// For each query: score map from the query pixel's feature, best-threshold
/// IoU against the part (L1) and object (L2) masks, then means.
inline BenchResult hierarchical_benchmark(const FieldVariant& field, const Dataset& ds) {
  require(!ds.queries.empty(), "hierarchical benchmark: dataset has no queries");
  std::map<int, RenderedView> renders;
  for (const auto& q : ds.queries)
    if (!renders.count(q.view)) renders.emplace(q.view, render_field(field, ds.views.at(static_cast<std::size_t>(q.view)).camera, ds.point_radius));
  BenchResult r;
  r.queries.resize(ds.queries.size());
  parallel_for(ds.queries.size(), [&](std::size_t i) {
    const auto& q = ds.queries[i];
    const auto score = cosine_score_map(renders.at(q.view), q.x, q.y);
    const auto f1 = best_iou_threshold(score.values, ds.query_mask(q, false));
    const auto f2 = best_iou_threshold(score.values, ds.query_mask(q, true));
    r.queries[i] = {q, f1.iou, f2.iou, f1.threshold, f2.threshold};
  });
  for (const auto& q : r.queries) {
    r.miou_l1 += q.iou_l1;
    r.miou_l2 += q.iou_l2;
  }
  r.miou_l1 /= static_cast<double>(r.queries.size());
  r.miou_l2 /= static_cast<double>(r.queries.size());
  r.miou_avg = 0.5 * (r.miou_l1 + r.miou_l2);
  return r;
}

struct OrderingResult {
  std::size_t pairs = 0;    // (anchor, view) pairs with at least two levels
  std::size_t ordered = 0;  // pairs whose per-level similarity is nonincreasing
  double fraction() const { return pairs ? static_cast<double>(ordered) / static_cast<double>(pairs) : 0.0; }
};

/// For every anchor patch of every view: mean cosine between the anchor's
/// rendered features and the feature means of the patches at each depth.
/// A pair counts as ordered when that sequence is nonincreasing in depth.
inline OrderingResult hierarchy_ordering(const FieldVariant& field, const Dataset& ds) {
  OrderingResult r;
  for (const auto& view : ds.views) {
    if (!view.has_evidence()) continue;
    const auto rv = render_field(field, view.camera, ds.point_radius);
    const auto& ids = view.rep->partition.patch_index_map;
    const std::size_t np = view.levels.size();
    std::vector<std::vector<std::size_t>> pixels(np);
    for (std::size_t p = 0; p < ids.size(); ++p)
      if (ids[p] != kNullPatch && detail::covered(rv, p)) pixels[ids[p]].push_back(p);
    std::vector<std::vector<double>> means(np, std::vector<double>(rv.dim, 0.0));
    for (std::size_t k = 0; k < np; ++k) {
      for (auto p : pixels[k])
        for (std::size_t d = 0; d < rv.dim; ++d) means[k][d] += rv.feature(p)[d];
    }
    for (std::size_t a = 0; a < np; ++a) {
      if (pixels[a].empty()) continue;
      std::vector<double> per_level;
      for (const auto& level : view.levels[a].levels) {
        double sum = 0;
        std::size_t n = 0;
        for (auto s : level) {
          if (pixels[s].empty()) continue;
          for (auto p : pixels[a]) sum += detail::unit_dot(rv.feature(p), means[s]);
          n += pixels[a].size();
        }
        if (n) per_level.push_back(sum / static_cast<double>(n));
      }
      if (per_level.size() < 2) continue;
      ++r.pairs;
      bool ok = true;
      for (std::size_t d = 1; d < per_level.size(); ++d) ok = ok && per_level[d] <= per_level[d - 1] + 1e-12;
      r.ordered += ok;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Instance propagation

inline constexpr double kNegativeWeight = 0.15;
inline constexpr double kPositivePercentile = 0.95;

/// exp(-alpha |x1 - x2|) (1 + f1 . f2) with unit-normalised features.
inline double distance_weighted_sim(const Eigen::Vector3d& x1, const Eigen::Vector3d& x2, std::span<const double> f1, std::span<const double> f2,
                                    double alpha) {
  return std::exp(-alpha * (x1 - x2).norm()) * (1 + detail::unit_dot(f1, f2));
}

inline double default_sim_alpha(const Dataset& ds) { return 4.0 / std::max(ds.points.bounds().diagonal(), 1e-9); }

/// Nearest-rank percentile of an unsorted sample.
inline double nearest_rank_percentile(std::vector<double> v, double q) {
  require(!v.empty(), "percentile of an empty sample");
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

/// Per-pixel 3D positions and features of a rendered view.
struct PixelCloud {
  const RenderedView* view = nullptr;
  std::vector<Eigen::Vector3d> position;
  std::vector<std::uint8_t> valid;

  PixelCloud(const RenderedView& v, const Camera& cam) : view(&v), position(v.pixel_count()), valid(v.pixel_count(), 0) {
    for (std::size_t p = 0; p < v.pixel_count(); ++p) {
      if (!detail::covered(v, p)) continue;
      valid[p] = 1;
      position[p] = cam.unproject(static_cast<int>(p % static_cast<std::size_t>(v.width)), static_cast<int>(p / static_cast<std::size_t>(v.width)), v.depth[p]);
    }
  }
};

struct InstancePrompt {
  std::vector<std::size_t> positives, negatives;  // pixel indices in the reference view
};

/// Samples up to `count` positives inside `mask` and negatives outside it,
/// uniformly among covered reference pixels.
inline InstancePrompt prompt_from_mask(const PixelCloud& ref, const Mask& mask, std::size_t count, std::uint64_t seed) {
  InstancePrompt pr;
  std::vector<std::size_t> in, out;
  for (std::size_t p = 0; p < ref.valid.size(); ++p)
    if (ref.valid[p]) (mask.values[p] ? in : out).push_back(p);
  std::mt19937_64 rng(seed);
  auto pick = [&](std::vector<std::size_t>& from, std::vector<std::size_t>& to) {
    std::shuffle(from.begin(), from.end(), rng);
    to.assign(from.begin(), from.begin() + static_cast<std::ptrdiff_t>(std::min(count, from.size())));
    std::sort(to.begin(), to.end());
  };
  pick(in, pr.positives);
  pick(out, pr.negatives);
  return pr;
}

/// score(p) = P95_i sim(p, pos_i) - beta * max_j sim(p, neg_j); uncovered
/// pixels get kUncoveredScore minus a margin so no threshold selects them.
inline ScoreMap propagation_scores(const PixelCloud& ref, const InstancePrompt& prompt, const PixelCloud& target, double alpha,
                                   double beta = kNegativeWeight) {
  require(!prompt.positives.empty() && !prompt.negatives.empty(), "propagation needs positive and negative samples");
  const auto& tv = *target.view;
  const auto& rv = *ref.view;
  ScoreMap s;
  s.width = tv.width;
  s.height = tv.height;
  s.values.assign(tv.pixel_count(), -1e9);
  s.valid = Mask(tv.width, tv.height, 0);
  s.rule = "propagation";
  parallel_chunks(tv.pixel_count(), [&](std::size_t begin, std::size_t end, unsigned) {
    std::vector<double> pos(prompt.positives.size());
    for (std::size_t p = begin; p < end; ++p) {
      if (!target.valid[p]) continue;
      for (std::size_t i = 0; i < prompt.positives.size(); ++i) {
        const auto r = prompt.positives[i];
        pos[i] = distance_weighted_sim(target.position[p], ref.position[r], tv.feature(p), rv.feature(r), alpha);
      }
      double neg = -std::numeric_limits<double>::infinity();
      for (auto r : prompt.negatives) neg = std::max(neg, distance_weighted_sim(target.position[p], ref.position[r], tv.feature(p), rv.feature(r), alpha));
      s.values[p] = nearest_rank_percentile(pos, kPositivePercentile) - beta * neg;
      s.valid.values[p] = 1;
    }
  });
  return s;
}

struct PropagationFit {
  double threshold = 0;
  double reference_iou = 0;
};

/// Threshold fitted on the reference view against its input mask.
inline PropagationFit fit_propagation_threshold(const PixelCloud& ref, const InstancePrompt& prompt, const Mask& mask, double alpha) {
  const auto s = propagation_scores(ref, prompt, ref, alpha);
  const auto fit = best_iou_threshold(s.values, mask);
  return {fit.threshold, fit.iou};
}

/// Threshold for scribble-only prompts: 10th percentile of the positives' own scores.
inline double scribble_threshold(const PixelCloud& ref, const InstancePrompt& prompt, double alpha) {
  const auto s = propagation_scores(ref, prompt, ref, alpha);
  std::vector<double> own;
  for (auto p : prompt.positives) own.push_back(s.values[p]);
  return nearest_rank_percentile(own, 0.10);
}

struct InstanceResult {
  struct Entry {
    std::uint32_t object = 0;
    int target_view = 0;
    double iou = 0;
  };
  std::vector<Entry> entries;
  std::vector<double> reference_iou;       // per object, IoU of the fitted threshold on the reference view
  std::vector<double> self_iou;            // per object, IoU of propagating onto the reference view itself
  double miou = 0;
};

/// Every ground-truth object visible in the reference view is propagated to
/// every other view where it is visible with at least `min_area` pixels.
inline InstanceResult instance_benchmark(const FieldVariant& field, const Dataset& ds, int reference_view = 0, std::size_t samples = 64,
                                         int min_area = 20, std::optional<double> alpha_override = std::nullopt) {
  require(reference_view >= 0 && static_cast<std::size_t>(reference_view) < ds.views.size(), "instance benchmark: bad reference view");
  const double alpha = alpha_override.value_or(default_sim_alpha(ds));
  std::vector<RenderedView> renders;
  for (const auto& v : ds.views) renders.push_back(render_field(field, v.camera, ds.point_radius));
  std::vector<PixelCloud> clouds;
  for (std::size_t k = 0; k < ds.views.size(); ++k) clouds.emplace_back(renders[k], ds.views[k].camera);

  const auto& ref_truth = ds.views[static_cast<std::size_t>(reference_view)].truth;
  require(ref_truth.has_value(), "instance benchmark: reference view has no ground truth");
  std::map<std::uint32_t, std::size_t> ref_area;
  for (auto o : ref_truth->object.values)
    if (o != kNoLabel) ++ref_area[o];

  InstanceResult r;
  for (const auto& [obj, area] : ref_area) {
    if (area < static_cast<std::size_t>(min_area)) continue;
    const auto& ref = clouds[static_cast<std::size_t>(reference_view)];
    Mask gt(ref_truth->object.width, ref_truth->object.height, 0);
    for (std::size_t p = 0; p < gt.size(); ++p) gt.values[p] = ref_truth->object.values[p] == obj;
    const auto prompt = prompt_from_mask(ref, gt, samples, ds.seed * 31 + obj);
    const auto fit = fit_propagation_threshold(ref, prompt, gt, alpha);
    r.reference_iou.push_back(fit.reference_iou);
    r.self_iou.push_back(mask_iou(propagation_scores(ref, prompt, ref, alpha).threshold(fit.threshold), gt));
    for (std::size_t k = 0; k < ds.views.size(); ++k) {
      if (static_cast<int>(k) == reference_view || !ds.views[k].truth) continue;
      const auto& t = *ds.views[k].truth;
      Mask target_gt(t.object.width, t.object.height, 0);
      for (std::size_t p = 0; p < target_gt.size(); ++p) target_gt.values[p] = t.object.values[p] == obj;
      if (count_set(target_gt) < static_cast<std::size_t>(min_area)) continue;
      const auto pred = propagation_scores(ref, prompt, clouds[k], alpha).threshold(fit.threshold);
      r.entries.push_back({obj, static_cast<int>(k), mask_iou(pred, target_gt)});
    }
  }
  for (const auto& e : r.entries) r.miou += e.iou;
  if (!r.entries.empty()) r.miou /= static_cast<double>(r.entries.size());
  return r;
}

// ---------------------------------------------------------------------------
// Sweeps, tables, overlays

struct SweepRow {
  std::string setting;
  double value = 0;
  BenchResult bench;
};

/// Trains one field per value of `setting` ("lambda" or "dim") with a shared
/// seed and benchmarks each.
inline std::vector<SweepRow> ablation_sweep(const Dataset& ds, const TrainConfig& base, const std::string& setting, const std::vector<double>& values,
                                            const std::function<void(const SweepRow&)>& on_row = {}) {
  require(setting == "lambda" || setting == "dim", "ablation sweep: setting must be lambda or dim");
  std::vector<SweepRow> rows;
  for (double v : values) {
    auto c = base;
    if (setting == "lambda") c.lambda = v;
    else c.dim = static_cast<std::size_t>(v);
    c.validate();
    const auto trained = train_scene(ds, c, TrainHooks{nullptr, {}, {}, nullptr});
    rows.push_back({setting, v, hierarchical_benchmark(trained.field, ds)});
    if (on_row) on_row(rows.back());
  }
  return rows;
}

inline std::string format_sweep_table(const std::vector<SweepRow>& rows) {
  std::ostringstream o;
  char line[160];
  const std::string name = rows.empty() ? "setting" : rows.front().setting == "lambda" ? "decay lambda" : "dimension D";
  std::snprintf(line, sizeof line, "%-14s %8s %8s %8s\n", name.c_str(), "Lv.1", "Lv.2", "Avg.");
  o << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-14g %8.1f %8.1f %8.1f\n", r.value, 100 * r.bench.miou_l1, 100 * r.bench.miou_l2, 100 * r.bench.miou_avg);
    o << line;
  }
  return o.str();
}

inline std::string sweep_record(const SweepRow& r) {
  char line[256];
  std::snprintf(line, sizeof line, "{\"setting\":\"%s\",\"value\":%.17g,\"miou_l1\":%.17g,\"miou_l2\":%.17g,\"miou_avg\":%.17g,\"queries\":%zu}",
                r.setting.c_str(), r.value, r.bench.miou_l1, r.bench.miou_l2, r.bench.miou_avg, r.bench.queries.size());
  return line;
}

/// True positives yellow, false positives red, false negatives green, over a
/// dimmed background.
inline Image8 overlay_tp_fp_fn(const Mask& pred, const Mask& gt, std::span<const double> rgb) {
  Image8 img(gt.width, gt.height, 3);
  for (std::size_t p = 0; p < gt.values.size(); ++p) {
    std::array<std::uint8_t, 3> c{0, 0, 0};
    if (!rgb.empty())
      for (int k = 0; k < 3; ++k) c[static_cast<std::size_t>(k)] = to_byte(0.35 * rgb[p * 3 + static_cast<std::size_t>(k)]);
    const bool a = pred.values[p], b = gt.values[p];
    if (a && b) c = {255, 220, 0};
    else if (a) c = {230, 40, 40};
    else if (b) c = {40, 200, 60};
    std::copy(c.begin(), c.end(), img.pixels.begin() + static_cast<std::ptrdiff_t>(p * 3));
  }
  return img;
}

inline Image8 score_image(const ScoreMap& s) {
  Image8 img(s.width, s.height, 3);
  for (std::size_t p = 0; p < s.values.size(); ++p) {
    if (!s.valid.values[p]) continue;
    const auto c = heat_color(s.values[p], -1.0, 1.0);
    std::copy(c.begin(), c.end(), img.pixels.begin() + static_cast<std::ptrdiff_t>(p * 3));
  }
  return img;
}

}  // namespace omnifield
