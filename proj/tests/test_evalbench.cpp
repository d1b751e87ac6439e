#include <gtest/gtest.h>

#include <random>

#include "omnifield/evalbench.hpp"
#include "omnifield/synthdata.hpp"

using namespace omnifield;

namespace {

RenderedView random_view(std::mt19937_64& rng, int w, int h, std::size_t dim, double coverage) {
  auto v = RenderedView::blank(w, h, dim);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unit;
  for (std::size_t p = 0; p < v.pixel_count(); ++p) {
    if (unit(rng) >= coverage) continue;
    v.opacity[p] = 1;
    v.depth[p] = 1 + unit(rng);
    for (std::size_t d = 0; d < dim; ++d) v.features[p * dim + d] = normal(rng);
  }
  return v;
}

Camera pinhole(int w, int h) {
  Camera c;
  c.fx = c.fy = w;
  c.cx = w / 2.0;
  c.cy = h / 2.0;
  c.width = w;
  c.height = h;
  return c;
}

double oracle_cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t d = 0; d < a.size(); ++d) {
    ab += a[d] * b[d];
    aa += a[d] * a[d];
    bb += b[d] * b[d];
  }
  return ab / std::sqrt(aa) / std::sqrt(bb);
}

double iou_at(std::span<const double> s, const Mask& gt, double t) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t p = 0; p < s.size(); ++p) {
    const bool a = s[p] > t, b = gt.values[p] != 0;
    inter += a && b;
    uni += a || b;
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

// Features are one-hot on the ground-truth part of each point.
SurfaceField part_indicator_field(const Dataset& ds, std::size_t parts, const std::vector<std::size_t>& relabel = {}) {
  SurfaceField f = ds.points;
  f.dim = parts;
  f.features.assign(f.size() * parts, 0.0);
  for (std::size_t i = 0; i < f.size(); ++i) {
    const std::size_t part = ds.labels[i].part;
    f.features[i * parts + (relabel.empty() ? part : relabel[part])] = 1;
  }
  return f;
}

HierSceneSpec bench_spec() {
  HierSceneSpec s;
  s.objects = 2;
  s.parts_per_object = 3;
  s.points_per_part = 200;
  s.views = 4;
  s.image_width = s.image_height = 48;
  return s;
}

}  // namespace

TEST(CosineScore, MatchesDirectComputation) {
  std::mt19937_64 rng(1);
  const auto v = random_view(rng, 20, 15, 5, 0.7);
  const std::vector<double> q{0.3, -1, 2, 0.5, 0.1};
  const auto s = cosine_score_map(v, q);
  for (std::size_t p = 0; p < v.pixel_count(); ++p) {
    if (v.opacity[p] > 0.5) {
      EXPECT_TRUE(s.valid.values[p]);
      EXPECT_NEAR(s.values[p], oracle_cosine(v.feature(p), q), 1e-12);
    } else {
      EXPECT_FALSE(s.valid.values[p]);
      EXPECT_EQ(s.values[p], kUncoveredScore);
    }
  }
}

TEST(CosineScore, SelfIsOneOrthogonalIsZero) {
  auto v = RenderedView::blank(2, 1, 2);
  v.opacity = {1, 1};
  v.features = {3, 0, 0, 0.5};
  const auto s = cosine_score_map(v, 0, 0);
  EXPECT_DOUBLE_EQ(s.at(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(s.at(1, 0), 0.0);
  v.opacity[1] = 0;
  try {
    cosine_score_map(v, 1, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::no_surface);
  }
}

TEST(BestThreshold, MatchesExhaustiveSearch) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 60; ++trial) {
    const int w = 1 + static_cast<int>(rng() % 64), h = 1 + static_cast<int>(rng() % 64);
    const int levels = 2 + static_cast<int>(rng() % 40);  // few levels force ties
    std::vector<double> s(static_cast<std::size_t>(w) * h);
    Mask gt(w, h, 0);
    for (auto& x : s) x = static_cast<double>(rng() % levels) / levels * 2 - 1;
    for (auto& g : gt.values) g = rng() % 3 == 0;
    gt.values[rng() % gt.size()] = 1;

    std::vector<double> candidates(s.begin(), s.end());
    candidates.push_back(*std::min_element(s.begin(), s.end()) - 1);
    double best = -1, best_t = 0;
    for (double t : candidates) {
      const double iou = iou_at(s, gt, t);
      if (iou > best || (iou == best && t > best_t)) {
        best = iou;
        best_t = t;
      }
    }
    const auto fit = best_iou_threshold(s, gt);
    EXPECT_NEAR(fit.iou, best, 1e-12);
    EXPECT_NEAR(iou_at(s, gt, fit.threshold), fit.iou, 1e-12);
    if (fit.threshold >= *std::min_element(s.begin(), s.end())) {
      EXPECT_EQ(fit.threshold, best_t);
    }

    // no threshold on a fine grid does better
    for (int k = 0; k <= 1024; ++k) EXPECT_LE(iou_at(s, gt, -1.0 + 2.0 * k / 1024), fit.iou + 1e-12);
  }
}

TEST(BestThreshold, SeparableAndConstantMaps) {
  const int w = 10, h = 8;
  std::vector<double> s(static_cast<std::size_t>(w) * h);
  Mask top(w, h, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      s[static_cast<std::size_t>(y) * w + x] = -y;
      top(x, y) = y < h / 2;
    }
  EXPECT_DOUBLE_EQ(best_iou_threshold(s, top).iou, 1.0);

  std::vector<double> flat(s.size(), 0.25);
  const auto fit = best_iou_threshold(flat, top);
  EXPECT_DOUBLE_EQ(fit.iou, 0.5);
  EXPECT_LT(fit.threshold, 0.25);

  EXPECT_THROW(best_iou_threshold(flat, Mask(w, h, 0)), Error);
}

TEST(ScoreMap, ThresholdMasksAreNested) {
  std::mt19937_64 rng(3);
  const auto v = random_view(rng, 24, 24, 4, 0.8);
  const auto s = cosine_score_map(v, std::vector<double>{1, 0, 0, 0});
  Mask prev = s.threshold(-1.5);
  EXPECT_EQ(count_set(prev), count_set(s.valid));
  for (int k = 0; k <= 64; ++k) {
    const auto m = s.threshold(-1 + 2.0 * k / 64);
    for (std::size_t p = 0; p < m.size(); ++p)
      if (m.values[p]) EXPECT_TRUE(prev.values[p]);
    prev = m;
  }
}

TEST(Propagation, SimilarityKernel) {
  const Eigen::Vector3d a(0, 0, 0), b(1, 2, 2);
  const std::vector<double> f{1, 0}, g{0.6, 0.8};
  EXPECT_DOUBLE_EQ(distance_weighted_sim(a, a, f, f, 3.0), 2.0);
  EXPECT_NEAR(distance_weighted_sim(a, b, f, g, 0.5), std::exp(-1.5) * 1.6, 1e-15);
  EXPECT_LT(distance_weighted_sim(a, Eigen::Vector3d(1e6, 0, 0), f, f, 1.0), 1e-300);
}

TEST(Propagation, NearestRankPercentile) {
  std::vector<double> v;
  for (int i = 20; i >= 1; --i) v.push_back(i);
  EXPECT_EQ(nearest_rank_percentile(v, 0.95), 19);
  EXPECT_EQ(nearest_rank_percentile(v, 0.10), 2);
  EXPECT_EQ(nearest_rank_percentile(v, 1.0), 20);
  EXPECT_EQ(nearest_rank_percentile(v, 0.0), 1);
  EXPECT_EQ(nearest_rank_percentile({4.0}, 0.95), 4);
  EXPECT_THROW(nearest_rank_percentile({}, 0.5), Error);
}

TEST(Propagation, MatchesPerPixelOracle) {
  std::mt19937_64 rng(11);
  const auto rv = random_view(rng, 12, 10, 3, 0.9);
  const auto tv = random_view(rng, 9, 11, 3, 0.7);
  const PixelCloud ref(rv, pinhole(12, 10)), target(tv, pinhole(9, 11));
  Mask mask(12, 10, 0);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 6; ++x) mask(x, y) = 1;
  const auto prompt = prompt_from_mask(ref, mask, 17, 5);
  ASSERT_EQ(prompt.positives.size(), 17u);
  for (auto p : prompt.positives) EXPECT_TRUE(mask.values[p] && ref.valid[p]);
  for (auto p : prompt.negatives) EXPECT_TRUE(!mask.values[p] && ref.valid[p]);

  const double alpha = 0.7;
  const auto s = propagation_scores(ref, prompt, target, alpha);
  for (std::size_t p = 0; p < tv.pixel_count(); ++p) {
    if (!target.valid[p]) {
      EXPECT_FALSE(s.valid.values[p]);
      continue;
    }
    auto sim = [&](std::size_t r) {
      const double c = oracle_cosine(tv.feature(p), rv.feature(r));
      return std::exp(-alpha * (target.position[p] - ref.position[r]).norm()) * (1 + c);
    };
    std::vector<double> pos;
    for (auto r : prompt.positives) pos.push_back(sim(r));
    std::sort(pos.begin(), pos.end());
    const double p95 = pos[static_cast<std::size_t>(std::ceil(0.95 * pos.size())) - 1];
    double neg = -1e300;
    for (auto r : prompt.negatives) neg = std::max(neg, sim(r));
    EXPECT_NEAR(s.values[p], p95 - 0.15 * neg, 1e-12);
  }

  const auto fit = fit_propagation_threshold(ref, prompt, mask, alpha);
  EXPECT_DOUBLE_EQ(mask_iou(propagation_scores(ref, prompt, ref, alpha).threshold(fit.threshold), mask), fit.reference_iou);
}

TEST(HierBenchmark, PartIndicatorFieldScoresExactly) {
  const auto spec = bench_spec();
  const auto ds = generate_dataset(spec);
  const std::size_t parts = spec.objects * spec.parts_per_object;
  const auto r = hierarchical_benchmark(FieldVariant{part_indicator_field(ds, parts)}, ds);
  ASSERT_EQ(r.queries.size(), ds.queries.size());
  double l2 = 0;
  for (const auto& q : r.queries) {
    EXPECT_DOUBLE_EQ(q.iou_l1, 1.0);
    // the query part scores 1 and every other covered pixel 0, so the two
    // candidate selections are the part and the whole footprint
    std::size_t covered = 0;
    for (auto h : ds.views[static_cast<std::size_t>(q.query.view)].hit_index) covered += h >= 0;
    const double part = count_set(ds.query_mask(q.query, false)), object = count_set(ds.query_mask(q.query, true));
    const double expected = std::max(part / object, object / static_cast<double>(covered));
    EXPECT_NEAR(q.iou_l2, expected, 1e-12);
    l2 += expected;
  }
  EXPECT_DOUBLE_EQ(r.miou_l1, 1.0);
  EXPECT_NEAR(r.miou_l2, l2 / r.queries.size(), 1e-12);
  EXPECT_NEAR(r.miou_avg, (1.0 + r.miou_l2) / 2, 1e-15);
}

TEST(HierBenchmark, InvariantToLabelPermutation) {
  const auto spec = bench_spec();
  const auto ds = generate_dataset(spec);
  const std::size_t parts = spec.objects * spec.parts_per_object;
  std::vector<std::size_t> perm(parts);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(2);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto a = hierarchical_benchmark(FieldVariant{part_indicator_field(ds, parts)}, ds);
  const auto b = hierarchical_benchmark(FieldVariant{part_indicator_field(ds, parts, perm)}, ds);
  EXPECT_DOUBLE_EQ(a.miou_l1, b.miou_l1);
  EXPECT_DOUBLE_EQ(a.miou_l2, b.miou_l2);
}

TEST(InstanceBenchmark, PartIndicatorFieldPropagates) {
  const auto spec = bench_spec();
  const auto ds = generate_dataset(spec);
  const auto r = instance_benchmark(FieldVariant{part_indicator_field(ds, spec.objects * spec.parts_per_object)}, ds);
  ASSERT_FALSE(r.entries.empty());
  ASSERT_EQ(r.self_iou.size(), r.reference_iou.size());
  for (std::size_t i = 0; i < r.self_iou.size(); ++i) EXPECT_DOUBLE_EQ(r.self_iou[i], r.reference_iou[i]);
  double sum = 0;
  for (const auto& e : r.entries) {
    EXPECT_GE(e.iou, 0.0);
    EXPECT_LE(e.iou, 1.0);
    sum += e.iou;
  }
  EXPECT_NEAR(r.miou, sum / r.entries.size(), 1e-15);
}

TEST(Ordering, PartIndicatorFieldIsOrdered) {
  const auto spec = bench_spec();
  const auto ds = generate_dataset(spec);
  const auto r = hierarchy_ordering(FieldVariant{part_indicator_field(ds, spec.objects * spec.parts_per_object)}, ds);
  EXPECT_GT(r.pairs, 0u);
  EXPECT_LE(r.ordered, r.pairs);
}

TEST(SweepOutput, TableAndRecord) {
  SweepRow row{"lambda", 0.5, {}};
  row.bench.miou_l1 = 0.619;
  row.bench.miou_l2 = 0.926;
  row.bench.miou_avg = 0.7725;
  const auto table = format_sweep_table({row});
  EXPECT_NE(table.find("decay lambda"), std::string::npos);
  EXPECT_NE(table.find("61.9"), std::string::npos);
  EXPECT_NE(table.find("92.6"), std::string::npos);
  EXPECT_EQ(sweep_record(row).rfind("{\"setting\":\"lambda\",\"value\":0.5,", 0), 0u);
}
