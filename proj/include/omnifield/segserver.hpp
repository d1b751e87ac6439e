#pragma once

// Interactive segmentation state over trained fields: per-session clicks,
// threshold masks, multi-anchor selection, region growing, discretisation
// and saved segments. HTTP routing lives in segserver_http.hpp.

#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <regex>
#include <shared_mutex>

#include "omnifield/evalbench.hpp"

namespace omnifield {

/// Immutable view of a trained field plus per-point features used for 3D
/// operations. Voxel fields are sampled at the dataset points.
struct FieldSnapshot {
  FieldVariant field;
  SurfaceField points;  // features + k-NN adjacency
  std::uint64_t generation = 0;
};

inline std::shared_ptr<const FieldSnapshot> make_snapshot(FieldVariant field, const Dataset& ds, std::uint64_t generation, std::uint32_t knn = 8) {
  auto snap = std::make_shared<FieldSnapshot>();
  if (const auto* s = std::get_if<SurfaceField>(&field)) {
    require(s->size() == ds.points.size(), "checkpoint point count does not match the dataset");
    snap->points = *s;
  } else {
    const auto& vox = std::get<VoxelField>(field);
    snap->points = ds.points;
    snap->points.dim = vox.dim;
    snap->points.features.assign(ds.points.size() * vox.dim, 0.0);
    for (std::size_t i = 0; i < ds.points.size(); ++i) {
      const auto t = trilinear(vox, ds.points.position(i));
      for (int m = 0; m < 8; ++m)
        for (std::size_t d = 0; d < vox.dim; ++d) snap->points.features[i * vox.dim + d] += t.weight[m] * vox.features[t.node[m] * vox.dim + d];
    }
  }
  if (snap->points.adjacency.size() != snap->points.size()) rebuild_adjacency(snap->points, knn);
  snap->field = std::move(field);
  snap->generation = generation;
  return snap;
}

// ---------------------------------------------------------------------------
// Point-set operations

/// Breadth-first growth from `seeds` over the k-NN graph, accepting j from i
/// when cos(f_i, f_j) >= threshold. Neighbours are visited in ascending id.
/// Returns the component sorted ascending.
inline std::vector<std::uint32_t> region_grow(const SurfaceField& f, std::vector<std::uint32_t> seeds, double threshold) {
  require(f.adjacency.size() == f.size(), "region_grow: field has no adjacency");
  std::vector<std::uint8_t> seen(f.size(), 0);
  std::sort(seeds.begin(), seeds.end());
  std::deque<std::uint32_t> queue;
  for (auto s : seeds) {
    require(s < f.size(), "region_grow: seed id out of range");
    if (!seen[s]) {
      seen[s] = 1;
      queue.push_back(s);
    }
  }
  std::vector<std::uint32_t> out;
  while (!queue.empty()) {
    const auto i = queue.front();
    queue.pop_front();
    out.push_back(i);
    for (auto j : f.adjacency[i]) {
      if (seen[j] || detail::unit_dot(f.feature(i), f.feature(j)) < threshold) continue;
      seen[j] = 1;
      queue.push_back(j);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct Discretization {
  std::vector<std::uint32_t> labels;  // per point, dense from 0 in order of lowest member id
  std::size_t component_count = 0;
};

inline Discretization auto_discretize(const SurfaceField& f, double threshold) {
  Discretization d;
  d.labels.assign(f.size(), kNoLabel);
  for (std::uint32_t i = 0; i < f.size(); ++i) {
    if (d.labels[i] != kNoLabel) continue;
    for (auto p : region_grow(f, {i}, threshold)) d.labels[p] = static_cast<std::uint32_t>(d.component_count);
    ++d.component_count;
  }
  return d;
}

/// Copy of `f` restricted to `ids` (adjacency dropped).
inline SurfaceField subset_field(const SurfaceField& f, std::span<const std::uint32_t> ids) {
  SurfaceField out;
  out.dim = f.dim;
  for (auto i : ids) {
    out.positions.insert(out.positions.end(), f.positions.begin() + 3 * i, f.positions.begin() + 3 * i + 3);
    if (!f.colors.empty()) out.colors.insert(out.colors.end(), f.colors.begin() + 3 * i, f.colors.begin() + 3 * i + 3);
    out.features.insert(out.features.end(), f.feature(i).begin(), f.feature(i).end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sessions

struct Anchor {
  std::uint32_t point = 0;
  std::vector<double> feature;
  int view = 0, x = 0, y = 0;
};

struct Click {
  int view = 0, x = 0, y = 0;
};

struct Session {
  std::string id;
  std::string scene;
  std::shared_ptr<const FieldSnapshot> snapshot;
  int view = 0;
  std::optional<Camera> camera;  // user pose overriding the dataset camera
  std::vector<Anchor> anchors;
  double threshold = 0.5;
  std::vector<std::uint32_t> grown;  // last region-growing result
  std::map<std::string, std::vector<std::uint32_t>> segments;
  std::uint64_t revision = 0;        // bumped on every mutation, used in image URLs
  std::map<std::string, std::string> images;  // latest PNGs by name
  mutable std::mutex mutex;
};

struct SceneEntry {
  std::string id;
  std::shared_ptr<const Dataset> dataset;
  std::filesystem::path checkpoint;
  std::shared_ptr<const FieldSnapshot> snapshot;
  std::uint64_t checkpoint_digest = 0;
};

struct ClickResult {
  Anchor anchor;
  ScoreMap scores;
};

/// Holds scenes and sessions. Scene snapshots are replaced atomically;
/// sessions keep their snapshot until refreshed. Operations on one session
/// are serialised by its mutex.
class SegService {
 public:
  void add_scene(const std::string& id, Dataset ds, FieldVariant field, std::filesystem::path checkpoint = {}) {
    auto entry = std::make_shared<SceneEntry>();
    entry->id = id;
    entry->dataset = std::make_shared<const Dataset>(std::move(ds));
    entry->checkpoint = std::move(checkpoint);
    if (!entry->checkpoint.empty() && std::filesystem::exists(entry->checkpoint)) entry->checkpoint_digest = content_digest(read_file(entry->checkpoint));
    entry->snapshot = make_snapshot(std::move(field), *entry->dataset, 1);
    std::unique_lock lock(mutex_);
    scenes_[id] = std::move(entry);
  }

  void load_scene(const std::string& id, const std::filesystem::path& dataset_dir, const std::filesystem::path& checkpoint) {
    add_scene(id, load_dataset(dataset_dir), read_field(checkpoint), checkpoint);
  }

  std::vector<std::string> scene_ids() const {
    std::shared_lock lock(mutex_);
    std::vector<std::string> out;
    for (const auto& [id, s] : scenes_) out.push_back(id);
    return out;
  }

  std::size_t view_count(const std::string& scene) const { return scene_entry(scene)->dataset->views.size(); }

  /// Publishes a new field for `scene`; existing sessions see it after refresh().
  void publish(const std::string& scene, FieldVariant field) {
    auto entry = scene_entry(scene);
    auto next = std::make_shared<SceneEntry>(*entry);
    next->snapshot = make_snapshot(std::move(field), *entry->dataset, entry->snapshot->generation + 1);
    std::unique_lock lock(mutex_);
    scenes_[scene] = std::move(next);
  }

  /// Re-reads the scene checkpoint and publishes it when its bytes changed.
  bool reload_checkpoint(const std::string& scene) {
    auto entry = scene_entry(scene);
    if (entry->checkpoint.empty()) return false;
    const auto bytes = read_file(entry->checkpoint);
    const auto digest = content_digest(bytes);
    if (digest == entry->checkpoint_digest) return false;
    auto next = std::make_shared<SceneEntry>(*entry);
    next->checkpoint_digest = digest;
    next->snapshot = make_snapshot(deserialize_field(bytes), *entry->dataset, entry->snapshot->generation + 1);
    std::unique_lock lock(mutex_);
    scenes_[scene] = std::move(next);
    return true;
  }

  std::string create_session(const std::string& scene) {
    auto entry = scene_entry(scene);
    auto s = std::make_shared<Session>();
    s->scene = scene;
    s->snapshot = entry->snapshot;
    std::unique_lock lock(mutex_);
    s->id = "s" + std::to_string(++session_counter_);
    sessions_[s->id] = s;
    return s->id;
  }

  void close_session(const std::string& id) {
    std::unique_lock lock(mutex_);
    if (!sessions_.erase(id)) fail(ErrorKind::not_found, "no session '" + id + "'");
  }

  std::shared_ptr<Session> session(const std::string& id) const {
    std::shared_lock lock(mutex_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) fail(ErrorKind::not_found, "no session '" + id + "'");
    return it->second;
  }

  /// Moves the session to the scene's latest snapshot. Returns its generation.
  std::uint64_t refresh(const std::string& id) {
    auto s = session(id);
    auto snap = scene_entry(s->scene)->snapshot;
    std::lock_guard lock(s->mutex);
    if (snap != s->snapshot) {
      s->snapshot = std::move(snap);
      // anchor features follow the new field; ids stay valid (same points)
      for (auto& a : s->anchors) a.feature = point_feature(*s->snapshot, a.point);
      s->grown.clear();
      ++s->revision;
    }
    return s->snapshot->generation;
  }

  // -- rendering --------------------------------------------------------------

  Camera camera_for(const Session& s, int view) const {
    const auto& ds = *scene_entry(s.scene)->dataset;
    require(view >= 0 && static_cast<std::size_t>(view) < ds.views.size(), "view index out of range");
    return ds.views[static_cast<std::size_t>(view)].camera;
  }

  RenderedView render_view(const Session& s, const Camera& cam) const {
    return render_field(s.snapshot->field, cam, scene_entry(s.scene)->dataset->point_radius);
  }

  /// PNG of layer rgb | feat | depth for a dataset view or a user camera.
  std::string render_png(const std::string& id, int view, const std::string& layer, const std::optional<Camera>& pose = std::nullopt) {
    auto s = session(id);
    std::lock_guard lock(s->mutex);
    if (pose) pose->validate();
    const Camera cam = pose ? *pose : camera_for(*s, view);
    if (pose) {
      s->camera = pose;
    } else {
      s->view = view;
      s->camera.reset();
    }
    const auto rv = render_view(*s, cam);
    if (layer == "rgb") return encode_png(color_preview(rv));
    if (layer == "feat") return encode_png(feature_preview(rv));
    if (layer == "depth") return encode_png(depth_preview(rv));
    fail(ErrorKind::invalid_argument, "layer must be rgb, feat or depth");
  }

  // -- selection --------------------------------------------------------------

  /// Replaces the selection with a single anchor at (x, y) in `view`.
  ClickResult click(const std::string& id, const Click& c) {
    auto s = session(id);
    std::lock_guard lock(s->mutex);
    const auto rv = render_view(*s, camera_for(*s, c.view));
    auto anchor = anchor_at(*s, rv, c);
    auto scores = cosine_score_map(rv, anchor.feature);
    scores.view = c.view;
    scores.query_x = c.x;
    scores.query_y = c.y;
    s->view = c.view;
    s->camera.reset();
    s->anchors = {anchor};
    s->grown.clear();
    ++s->revision;
    s->images["score"] = encode_png(score_image(scores));
    return {std::move(anchor), std::move(scores)};
  }

  /// Replaces the selection with one anchor per click; returns the union mask
  /// in the view of the first click at the current threshold.
  Mask multi_select(const std::string& id, const std::vector<Click>& clicks) {
    require(!clicks.empty(), "select needs at least one click");
    auto s = session(id);
    std::lock_guard lock(s->mutex);
    std::vector<Anchor> anchors;
    std::map<int, RenderedView> renders;
    for (const auto& c : clicks) {
      if (!renders.count(c.view)) renders.emplace(c.view, render_view(*s, camera_for(*s, c.view)));
      anchors.push_back(anchor_at(*s, renders.at(c.view), c));
    }
    s->anchors = std::move(anchors);
    s->view = clicks.front().view;
    s->camera.reset();
    s->grown.clear();
    ++s->revision;
    const auto scores = selection_scores(*s, renders.at(s->view));
    s->images["score"] = encode_png(score_image(scores));
    auto m = threshold_mask(scores, s->threshold);
    s->images["mask"] = encode_png(mask_image(m));
    return m;
  }

  /// Per-pixel max cosine over the session's anchors in its current view.
  ScoreMap scores(const std::string& id) {
    auto s = session(id);
    std::lock_guard lock(s->mutex);
    return selection_scores(*s, render_view(*s, current_camera(*s)));
  }

  /// Sets the threshold and returns {covered p : score(p) > t}; t = -1
  /// selects the whole covered footprint.
  Mask set_threshold(const std::string& id, double t) {
    require(std::isfinite(t) && t >= -1.0 && t <= 1.0, "threshold must lie in [-1, 1]");
    auto s = session(id);
    std::lock_guard lock(s->mutex);
    require(!s->anchors.empty(), "no anchors selected; click first");
    s->threshold = t;
    ++s->revision;
    auto m = threshold_mask(selection_scores(*s, render_view(*s, current_camera(*s))), t);
    s->images["mask"] = encode_png(mask_image(m));
    return m;
  }

  static Mask threshold_mask(const ScoreMap& scores, double t) {
    Mask m(scores.width, scores.height, 0);
    for (std::size_t p = 0; p < scores.values.size(); ++p) m.values[p] = scores.valid.values[p] && (t <= -1.0 || scores.values[p] > t);
    return m;
  }

  // -- 3D operations ------------------------------------------------------------

  /// Grows from the anchor points; returns the component and stores it as
  /// the session's current 3D selection.
  std::vector<std::uint32_t> grow(const std::string& id, double threshold) {
    auto s = session(id);
    std::lock_guard lock(s->mutex);
    require(!s->anchors.empty(), "no anchors selected; click first");
    std::vector<std::uint32_t> seeds;
    for (const auto& a : s->anchors) seeds.push_back(a.point);
    s->grown = region_grow(s->snapshot->points, seeds, threshold);
    ++s->revision;
    s->images["grow"] = encode_png(mask_image(project_points(*s, s->grown)));
    return s->grown;
  }

  Discretization discretize(const std::string& id, double threshold) {
    auto s = session(id);
    std::lock_guard lock(s->mutex);
    auto d = auto_discretize(s->snapshot->points, threshold);
    ++s->revision;
    const auto hits = hit_map(*s);
    const auto cam = current_camera(*s);
    Image8 img(cam.width, cam.height, 3);
    for (std::size_t p = 0; p < hits.size(); ++p) {
      if (hits[p] < 0) continue;
      const auto c = label_color(d.labels[static_cast<std::size_t>(hits[p])]);
      std::copy(c.begin(), c.end(), img.pixels.begin() + static_cast<std::ptrdiff_t>(p * 3));
    }
    s->images["labels"] = encode_png(img);
    return d;
  }

  /// Saves the last grown component, or else every point whose max anchor
  /// cosine exceeds the session threshold.
  std::size_t save_segment(const std::string& id, const std::string& name) {
    static const std::regex valid_name("[A-Za-z0-9_.-]{1,64}");
    require(std::regex_match(name, valid_name) && name != "." && name != "..", "segment name must be 1-64 characters of [A-Za-z0-9_.-]");
    auto s = session(id);
    std::lock_guard lock(s->mutex);
    std::vector<std::uint32_t> ids = s->grown;
    if (ids.empty()) {
      require(!s->anchors.empty(), "nothing selected to save");
      const auto& f = s->snapshot->points;
      for (std::uint32_t i = 0; i < f.size(); ++i) {
        double best = -1;
        for (const auto& a : s->anchors) best = std::max(best, detail::unit_dot(f.feature(i), a.feature));
        if (s->threshold <= -1.0 || best > s->threshold) ids.push_back(i);
      }
    }
    s->segments[name] = ids;
    ++s->revision;
    return ids.size();
  }

  std::map<std::string, std::vector<std::uint32_t>> segments(const std::string& id) const {
    auto s = session(id);
    std::lock_guard lock(s->mutex);
    return s->segments;
  }

  /// Writes <name>.ids (one point id per line) and <name>.field (the points
  /// with their features) per saved segment. Returns the written paths.
  std::vector<std::filesystem::path> export_segments(const std::string& id, const std::filesystem::path& dir) const {
    auto s = session(id);
    std::lock_guard lock(s->mutex);
    std::vector<std::filesystem::path> out;
    for (const auto& [name, ids] : s->segments) {
      std::string text;
      for (auto i : ids) text += std::to_string(i) + "\n";
      write_file_atomic(dir / (name + ".ids"), text);
      write_field(dir / (name + ".field"), subset_field(s->snapshot->points, ids));
      out.push_back(dir / (name + ".ids"));
      out.push_back(dir / (name + ".field"));
    }
    return out;
  }

  /// Latest PNG named score | mask | grow | labels, with the session revision.
  std::pair<std::string, std::uint64_t> image(const std::string& id, const std::string& name) const {
    auto s = session(id);
    std::lock_guard lock(s->mutex);
    const auto it = s->images.find(name);
    if (it == s->images.end()) fail(ErrorKind::not_found, "no " + name + " image for session '" + id + "'");
    return {it->second, s->revision};
  }

  std::uint64_t revision(const std::string& id) const {
    auto s = session(id);
    std::lock_guard lock(s->mutex);
    return s->revision;
  }

 private:
  std::shared_ptr<const SceneEntry> scene_entry(const std::string& id) const {
    std::shared_lock lock(mutex_);
    const auto it = scenes_.find(id);
    if (it == scenes_.end()) fail(ErrorKind::not_found, "no scene '" + id + "'");
    return it->second;
  }

  static std::vector<double> point_feature(const FieldSnapshot& snap, std::uint32_t i) {
    const auto f = snap.points.feature(i);
    return {f.begin(), f.end()};
  }

  Camera current_camera(const Session& s) const { return s.camera ? *s.camera : camera_for(s, s.view); }

  std::vector<std::int32_t> hit_map(const Session& s) const {
    return render_surface(s.snapshot->points, current_camera(s), scene_entry(s.scene)->dataset->point_radius).hit_index;
  }

  // Anchor feature is the rendered pixel feature; the point id comes from the
  // point splat hit map, falling back to the nearest point to the surface.
  Anchor anchor_at(const Session& s, const RenderedView& rv, const Click& c) const {
    require(c.x >= 0 && c.y >= 0 && c.x < rv.width && c.y < rv.height, "click outside the image");
    const auto p = rv.pixel(c.x, c.y);
    if (!detail::covered(rv, p)) fail(ErrorKind::no_surface, "no surface at pixel (" + std::to_string(c.x) + ", " + std::to_string(c.y) + ")");
    Anchor a;
    a.view = c.view;
    a.x = c.x;
    a.y = c.y;
    a.feature.assign(rv.feature(p).begin(), rv.feature(p).end());
    if (rv.hit_index[p] >= 0) {
      a.point = static_cast<std::uint32_t>(rv.hit_index[p]);
      return a;
    }
    const auto cam = camera_for(s, c.view);
    const Eigen::Vector3d x = cam.unproject(c.x, c.y, rv.depth[p]);
    const auto& pts = s.snapshot->points;
    double best = std::numeric_limits<double>::infinity();
    for (std::uint32_t i = 0; i < pts.size(); ++i) {
      const double d = (pts.position(i) - x).squaredNorm();
      if (d < best) {
        best = d;
        a.point = i;
      }
    }
    return a;
  }

  static ScoreMap selection_scores(const Session& s, const RenderedView& rv) {
    require(!s.anchors.empty(), "no anchors selected; click first");
    auto out = cosine_score_map(rv, s.anchors.front().feature);
    for (std::size_t k = 1; k < s.anchors.size(); ++k) {
      const auto next = cosine_score_map(rv, s.anchors[k].feature);
      for (std::size_t p = 0; p < out.values.size(); ++p) out.values[p] = std::max(out.values[p], next.values[p]);
    }
    out.view = s.view;
    out.rule = s.anchors.size() > 1 ? "max-cosine" : "cosine";
    return out;
  }

  Mask project_points(const Session& s, const std::vector<std::uint32_t>& ids) const {
    const auto hits = hit_map(s);
    const auto cam = current_camera(s);
    std::vector<std::uint8_t> in(s.snapshot->points.size(), 0);
    for (auto i : ids) in[i] = 1;
    Mask m(cam.width, cam.height, 0);
    for (std::size_t p = 0; p < hits.size(); ++p) m.values[p] = hits[p] >= 0 && in[static_cast<std::size_t>(hits[p])];
    return m;
  }

  static Image8 mask_image(const Mask& m) {
    Image8 img(m.width, m.height, 1);
    for (std::size_t p = 0; p < m.size(); ++p) img.pixels[p] = m.values[p] ? 255 : 0;
    return img;
  }

  mutable std::shared_mutex mutex_;
  std::map<std::string, std::shared_ptr<const SceneEntry>> scenes_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t session_counter_ = 0;
};

}  // namespace omnifield
