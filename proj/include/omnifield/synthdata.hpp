#pragma once

// Procedural multi-view scenes with a known object > part > subpart hierarchy
// and simulated, view-inconsistent mask sets.
//
// Objects are vertical stacks of primitives (one primitive per part). Subparts
// split a part into azimuth sectors around its vertical axis. Cameras sit on a
// ring looking at the scene centre.

#include <numbers>
#include <random>
#include <set>

#include "omnifield/config.hpp"
#include "omnifield/dataset.hpp"

namespace omnifield {

enum class Primitive { box, sphere, cylinder };

inline const char* primitive_name(Primitive p) {
  switch (p) {
    case Primitive::box: return "box";
    case Primitive::sphere: return "sphere";
    case Primitive::cylinder: return "cylinder";
  }
  return "?";
}

inline Primitive parse_primitive(const std::string& s) {
  if (s == "box") return Primitive::box;
  if (s == "sphere") return Primitive::sphere;
  if (s == "cylinder") return Primitive::cylinder;
  fail(ErrorKind::bad_config, "unknown primitive '" + s + "'");
}

enum class NodeLevel { object = 0, part = 1, subpart = 2 };

inline const char* level_name(NodeLevel l) {
  return l == NodeLevel::object ? "object" : l == NodeLevel::part ? "part" : "subpart";
}

struct MaskSimParams {
  double p_object = 0.3, p_part = 0.4, p_subpart = 0.3;
  double dropout = 0.1;   // probability of losing each emitted mask
  int jitter = 0;         // max dilation/erosion steps
  bool all_levels = false;  // emit every visible node instead of sampling
  int min_pixels = 6;     // nodes smaller than this are never prompted
};

struct HierSceneSpec {
  int objects = 3, parts_per_object = 3, subparts_per_part = 1;
  std::vector<Primitive> primitives{Primitive::box, Primitive::sphere, Primitive::cylinder};
  int points_per_part = 700;
  std::uint64_t seed = 1;
  int views = 12;
  int image_width = 96, image_height = 96;
  double point_radius = 1.0;
  MaskSimParams masks;
  int queries_per_view = 6;
  int min_query_area = 20;

  void validate() const {
    auto check = [](bool ok, const std::string& what) {
      if (!ok) fail(ErrorKind::bad_config, "scene spec: " + what);
    };
    check(objects >= 1 && parts_per_object >= 1 && subparts_per_part >= 1, "counts must be >= 1");
    check(!primitives.empty(), "no primitives");
    check(points_per_part >= 1 && views >= 1 && image_width >= 8 && image_height >= 8, "sizes out of range");
    check(point_radius >= 0, "point_radius must be >= 0");
    const auto& m = masks;
    check(m.p_object >= 0 && m.p_part >= 0 && m.p_subpart >= 0 && std::abs(m.p_object + m.p_part + m.p_subpart - 1) < 1e-9,
          "level probabilities must be nonnegative and sum to 1");
    check(m.dropout >= 0 && m.dropout <= 1, "dropout must lie in [0, 1]");
    check(m.jitter >= 0 && m.min_pixels >= 1, "jitter and min_mask_pixels out of range");
    check(queries_per_view >= 0 && min_query_area >= 1, "query settings out of range");
  }

  static const std::set<std::string>& keys() {
    static const std::set<std::string> k{"objects",  "parts_per_object", "subparts_per_part", "primitives", "points_per_part",
                                         "seed",     "views",            "image_width",       "image_height", "point_radius",
                                         "level_probs", "dropout",       "jitter",            "all_levels", "min_mask_pixels",
                                         "queries_per_view", "min_query_area"};
    return k;
  }

  static HierSceneSpec from_config(const KeyValues& kv) {
    kv.check_known(keys());
    HierSceneSpec s;
    kv.read("objects", s.objects);
    kv.read("parts_per_object", s.parts_per_object);
    kv.read("subparts_per_part", s.subparts_per_part);
    if (kv.has("primitives")) {
      s.primitives.clear();
      std::istringstream in(kv.entries().at("primitives"));
      std::string tok;
      while (in >> tok) s.primitives.push_back(parse_primitive(tok));
    }
    kv.read("points_per_part", s.points_per_part);
    kv.read("seed", s.seed);
    kv.read("views", s.views);
    kv.read("image_width", s.image_width);
    kv.read("image_height", s.image_height);
    kv.read("point_radius", s.point_radius);
    if (kv.has("level_probs")) {
      const auto p = KeyValues::number_list("level_probs", kv.entries().at("level_probs"));
      if (p.size() != 3) fail(ErrorKind::bad_config, "level_probs needs three values: object part subpart");
      s.masks.p_object = p[0];
      s.masks.p_part = p[1];
      s.masks.p_subpart = p[2];
    }
    kv.read("dropout", s.masks.dropout);
    kv.read("jitter", s.masks.jitter);
    kv.read("all_levels", s.masks.all_levels);
    kv.read("min_mask_pixels", s.masks.min_pixels);
    kv.read("queries_per_view", s.queries_per_view);
    kv.read("min_query_area", s.min_query_area);
    s.validate();
    return s;
  }

  std::string to_config() const {
    std::ostringstream o;
    o << "objects = " << objects << "\nparts_per_object = " << parts_per_object << "\nsubparts_per_part = " << subparts_per_part
      << "\nprimitives =";
    for (auto p : primitives) o << ' ' << primitive_name(p);
    o << "\npoints_per_part = " << points_per_part << "\nseed = " << seed << "\nviews = " << views << "\nimage_width = " << image_width
      << "\nimage_height = " << image_height << "\npoint_radius = " << format_number(point_radius) << "\nlevel_probs = " << format_number(masks.p_object) << ' '
      << format_number(masks.p_part) << ' ' << format_number(masks.p_subpart) << "\ndropout = " << format_number(masks.dropout) << "\njitter = " << masks.jitter
      << "\nall_levels = " << (masks.all_levels ? "true" : "false") << "\nmin_mask_pixels = " << masks.min_pixels
      << "\nqueries_per_view = " << queries_per_view << "\nmin_query_area = " << min_query_area << "\n";
    return o.str();
  }
};

struct PartShape {
  Primitive kind = Primitive::box;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double radius = 0.2, half_height = 0.2, yaw = 0;
};

struct ObjectShape {
  Eigen::Vector2d base = Eigen::Vector2d::Zero();  // ground-plane (x, z)
  double footprint = 0;
  std::vector<PartShape> parts;
};

/// Everything the generator knows: geometry, labels, cameras and per-view
/// ground truth, before any masks are simulated.
struct SynthScene {
  HierSceneSpec spec;
  std::vector<ObjectShape> objects;
  SurfaceField points;
  std::vector<PointLabel> labels;
  std::vector<Camera> cameras;
  std::vector<RenderedView> renders;
  std::vector<ViewTruth> truth;
};

namespace detail {

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline Eigen::Vector3d hsv(double h, double s, double v) {
  const double c = v * s, hp = std::fmod(h * 6.0, 6.0), x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  Eigen::Vector3d rgb;
  if (hp < 1) rgb = {c, x, 0};
  else if (hp < 2) rgb = {x, c, 0};
  else if (hp < 3) rgb = {0, c, x};
  else if (hp < 4) rgb = {0, x, c};
  else if (hp < 5) rgb = {x, 0, c};
  else rgb = {c, 0, x};
  return rgb.array() + (v - c);
}

// Uniform point on the primitive's surface, in the part frame before yaw.
inline Eigen::Vector3d sample_surface(const PartShape& s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double r = s.radius, h = s.half_height;
  switch (s.kind) {
    case Primitive::sphere: {
      const double z = 2 * u(rng) - 1, a = 2 * std::numbers::pi * u(rng), q = std::sqrt(1 - z * z);
      return {r * q * std::cos(a), h * z, r * q * std::sin(a)};
    }
    case Primitive::cylinder: {
      const double side = 2 * std::numbers::pi * r * 2 * h, cap = std::numbers::pi * r * r;
      const double pick = u(rng) * (side + 2 * cap);
      const double a = 2 * std::numbers::pi * u(rng);
      if (pick < side) return {r * std::cos(a), h * (2 * u(rng) - 1), r * std::sin(a)};
      const double rr = r * std::sqrt(u(rng));
      return {rr * std::cos(a), pick < side + cap ? h : -h, rr * std::sin(a)};
    }
    case Primitive::box:
    default: {
      // faces: +-x and +-z have area (2h)(2r), +-y have (2r)(2r)
      const double side = 4 * h * r, top = 4 * r * r;
      const double pick = u(rng) * (4 * side + 2 * top);
      const double a = 2 * u(rng) - 1, b = 2 * u(rng) - 1;
      if (pick < 4 * side) {
        const int face = static_cast<int>(pick / side);
        const double sign = face % 2 ? -1.0 : 1.0;
        return face < 2 ? Eigen::Vector3d{sign * r, h * a, r * b} : Eigen::Vector3d{r * b, h * a, sign * r};
      }
      return {r * a, pick < 4 * side + top ? h : -h, r * b};
    }
  }
}

inline Grid<std::uint8_t> morph(const Grid<std::uint8_t>& m, bool dilate) {
  Grid<std::uint8_t> out(m.width, m.height, 0);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      bool any = false, all = true;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const bool v = m.contains(x + dx, y + dy) && m(x + dx, y + dy);
          any |= v;
          all &= v;
        }
      out(x, y) = dilate ? any : all;
    }
  return out;
}

}  // namespace detail

inline std::uint32_t part_id(const HierSceneSpec& s, std::uint32_t object, std::uint32_t part) {
  return object * static_cast<std::uint32_t>(s.parts_per_object) + part;
}
inline std::uint32_t subpart_id(const HierSceneSpec& s, std::uint32_t part_global, std::uint32_t sub) {
  return part_global * static_cast<std::uint32_t>(s.subparts_per_part) + sub;
}

/// Builds geometry, labels, cameras, ground-truth maps and RGB renders.
/// Deterministic for a given spec; points never visible in any view are dropped.
inline SynthScene generate_scene(const HierSceneSpec& spec) {
  spec.validate();
  SynthScene scene;
  scene.spec = spec;
  std::mt19937_64 rng(detail::mix64(spec.seed));
  std::uniform_real_distribution<double> u(0.0, 1.0);

  // shapes
  for (int o = 0; o < spec.objects; ++o) {
    ObjectShape obj;
    double top = 0;
    for (int p = 0; p < spec.parts_per_object; ++p) {
      PartShape part;
      part.kind = spec.primitives[static_cast<std::size_t>(rng() % spec.primitives.size())];
      part.radius = 0.16 + 0.12 * u(rng);
      part.half_height = part.kind == Primitive::sphere ? part.radius : 0.10 + 0.10 * u(rng);
      part.yaw = 2 * std::numbers::pi * u(rng);
      part.center = {0, top + part.half_height, 0};
      top += 2 * part.half_height;
      obj.footprint = std::max(obj.footprint, part.radius * (part.kind == Primitive::box ? std::sqrt(2.0) : 1.0));
      obj.parts.push_back(part);
    }
    scene.objects.push_back(obj);
  }
  const double arena = 0.2 + 0.3 * std::sqrt(static_cast<double>(spec.objects));
  for (std::size_t o = 0; o < scene.objects.size(); ++o) {
    auto& obj = scene.objects[o];
    bool placed = false;
    for (int attempt = 0; attempt < 2000 && !placed; ++attempt) {
      const double a = 2 * std::numbers::pi * u(rng), r = arena * std::sqrt(u(rng));
      obj.base = {r * std::cos(a), r * std::sin(a)};
      placed = true;
      for (std::size_t q = 0; q < o; ++q)
        if ((obj.base - scene.objects[q].base).norm() < obj.footprint + scene.objects[q].footprint + 0.12) placed = false;
    }
    if (!placed) fail(ErrorKind::bad_config, "scene spec: could not place object " + std::to_string(o) + " without overlap");
    for (auto& part : obj.parts) {
      part.center.x() = obj.base.x();
      part.center.z() = obj.base.y();
    }
  }

  // points, labels, colours
  SurfaceField& pts = scene.points;
  for (std::size_t o = 0; o < scene.objects.size(); ++o) {
    const double hue = (static_cast<double>(o) + 0.5 * u(rng)) / static_cast<double>(spec.objects);
    for (std::size_t p = 0; p < scene.objects[o].parts.size(); ++p) {
      const auto& part = scene.objects[o].parts[p];
      const double part_hue = std::fmod(hue + 0.09 * static_cast<double>(p), 1.0);
      const double cy = std::cos(part.yaw), sy = std::sin(part.yaw);
      const auto pg = part_id(spec, static_cast<std::uint32_t>(o), static_cast<std::uint32_t>(p));
      for (int i = 0; i < spec.points_per_part; ++i) {
        const auto local = detail::sample_surface(part, rng);
        const Eigen::Vector3d rotated{cy * local.x() - sy * local.z(), local.y(), sy * local.x() + cy * local.z()};
        const Eigen::Vector3d world = part.center + rotated;
        double az = std::atan2(local.z(), local.x()) + std::numbers::pi;
        auto sub = static_cast<std::uint32_t>(az / (2 * std::numbers::pi) * spec.subparts_per_part);
        sub = std::min(sub, static_cast<std::uint32_t>(spec.subparts_per_part - 1));
        const double shade = 0.55 + 0.35 * (spec.subparts_per_part > 1 ? static_cast<double>(sub) / (spec.subparts_per_part - 1) : 0.6);
        const Eigen::Vector3d c = detail::hsv(part_hue, 0.65, shade) + Eigen::Vector3d::Constant(0.04 * (u(rng) - 0.5));
        pts.positions.insert(pts.positions.end(), {world.x(), world.y(), world.z()});
        pts.colors.insert(pts.colors.end(), {std::clamp(c.x(), 0.0, 1.0), std::clamp(c.y(), 0.0, 1.0), std::clamp(c.z(), 0.0, 1.0)});
        scene.labels.push_back({static_cast<std::uint32_t>(o), pg, subpart_id(spec, pg, sub)});
      }
    }
  }

  // cameras on a ring around the scene centre
  const Bounds b = pts.bounds();
  const Eigen::Vector3d centre = 0.5 * (b.lo + b.hi);
  const double radius = 0.5 * b.diagonal();
  const double distance = 2.4 * radius + 0.3;
  const double elevation = 0.5;
  const double focal = 0.5 * std::min(spec.image_width, spec.image_height) * distance / (1.12 * radius) * 0.95;
  const double offset = 2 * std::numbers::pi * u(rng);
  for (int k = 0; k < spec.views; ++k) {
    const double a = offset + 2 * std::numbers::pi * k / spec.views;
    const Eigen::Vector3d eye = centre + distance * Eigen::Vector3d(std::cos(a) * std::cos(elevation), std::sin(elevation), std::sin(a) * std::cos(elevation));
    scene.cameras.push_back(Camera::look_at(eye, centre, {0, 1, 0}, focal, spec.image_width, spec.image_height));
  }

  // drop points that never win a pixel
  std::vector<std::uint8_t> seen(pts.size(), 0);
  for (const auto& cam : scene.cameras)
    for (auto h : render_surface(pts, cam, spec.point_radius).hit_index)
      if (h >= 0) seen[static_cast<std::size_t>(h)] = 1;
  SurfaceField kept;
  std::vector<PointLabel> kept_labels;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (!seen[i]) continue;
    kept.positions.insert(kept.positions.end(), pts.positions.begin() + 3 * i, pts.positions.begin() + 3 * i + 3);
    kept.colors.insert(kept.colors.end(), pts.colors.begin() + 3 * i, pts.colors.begin() + 3 * i + 3);
    kept_labels.push_back(scene.labels[i]);
  }
  scene.points = std::move(kept);
  scene.labels = std::move(kept_labels);

  for (const auto& cam : scene.cameras) {
    auto view = render_surface(scene.points, cam, spec.point_radius);
    ViewTruth t{Grid<std::uint32_t>(cam.width, cam.height, kNoLabel), Grid<std::uint32_t>(cam.width, cam.height, kNoLabel),
                Grid<std::uint32_t>(cam.width, cam.height, kNoLabel)};
    for (std::size_t p = 0; p < view.hit_index.size(); ++p) {
      if (view.hit_index[p] < 0) continue;
      const auto& l = scene.labels[static_cast<std::size_t>(view.hit_index[p])];
      t.object.values[p] = l.object;
      t.part.values[p] = l.part;
      t.subpart.values[p] = l.subpart;
    }
    scene.truth.push_back(std::move(t));
    scene.renders.push_back(std::move(view));
  }
  return scene;
}

/// A hierarchy node as emitted in a simulated mask.
struct MaskNode {
  NodeLevel level = NodeLevel::object;
  std::uint32_t id = 0;
  int jitter = 0;
  auto operator<=>(const MaskNode&) const = default;
};

inline std::string format_provenance(const MaskNode& n) {
  return std::string(level_name(n.level)) + ":" + std::to_string(n.id) + " jitter=" + std::to_string(n.jitter);
}

/// Parses the "<level>:<id>" prefix of a provenance string.
inline std::optional<MaskNode> parse_provenance(const std::string& s) {
  const auto colon = s.find(':');
  if (colon == std::string::npos) return std::nullopt;
  const auto name = s.substr(0, colon);
  MaskNode n;
  if (name == "object") n.level = NodeLevel::object;
  else if (name == "part") n.level = NodeLevel::part;
  else if (name == "subpart") n.level = NodeLevel::subpart;
  else return std::nullopt;
  try {
    n.id = static_cast<std::uint32_t>(std::stoul(s.substr(colon + 1)));
  } catch (const std::logic_error&) {
    return std::nullopt;
  }
  return n;
}

// Levels that coincide with their parent (single child) collapse upward so a
// node is never emitted twice under different names.
inline MaskNode canonical_node(const HierSceneSpec& s, NodeLevel level, std::uint32_t subpart) {
  const auto part = subpart / static_cast<std::uint32_t>(s.subparts_per_part);
  const auto object = part / static_cast<std::uint32_t>(s.parts_per_object);
  if (level == NodeLevel::subpart && s.subparts_per_part == 1) level = NodeLevel::part;
  if (level == NodeLevel::part && s.parts_per_object == 1) level = NodeLevel::object;
  const auto id = level == NodeLevel::object ? object : level == NodeLevel::part ? part : subpart;
  return {level, id, 0};
}

inline Mask node_region(const ViewTruth& t, NodeLevel level, std::uint32_t id) {
  const auto& map = level == NodeLevel::object ? t.object : level == NodeLevel::part ? t.part : t.subpart;
  Mask m(map.width, map.height, 0);
  for (std::size_t p = 0; p < map.size(); ++p) m.values[p] = map.values[p] == id;
  return m;
}

struct SimulatedMasks {
  MaskSet masks;
  std::vector<MaskNode> nodes;
};

/// SAM-like evidence for one view: every visible subpart acts as a prompt that
/// picks a hierarchy level at random; the chosen nodes' regions are emitted
/// after dropout and boundary jitter. Seeded per view.
inline SimulatedMasks simulate_masks(const SynthScene& scene, std::size_t view) {
  const auto& spec = scene.spec;
  const auto& m = spec.masks;
  const auto& t = scene.truth.at(view);
  std::mt19937_64 rng(detail::mix64(spec.seed * 0x100000001b3ull + view + 1));
  std::uniform_real_distribution<double> u(0.0, 1.0);

  std::map<std::uint32_t, std::size_t> sub_pixels;
  for (auto v : t.subpart.values)
    if (v != kNoLabel) ++sub_pixels[v];

  std::set<MaskNode> chosen;
  for (const auto& [sub, px] : sub_pixels) {
    if (px < static_cast<std::size_t>(m.min_pixels)) continue;
    if (m.all_levels) {
      for (auto level : {NodeLevel::object, NodeLevel::part, NodeLevel::subpart}) chosen.insert(canonical_node(spec, level, sub));
      continue;
    }
    const double r = u(rng);
    const auto level = r < m.p_object ? NodeLevel::object : r < m.p_object + m.p_part ? NodeLevel::part : NodeLevel::subpart;
    chosen.insert(canonical_node(spec, level, sub));
  }

  SimulatedMasks out;
  out.masks.width = spec.image_width;
  out.masks.height = spec.image_height;
  for (auto node : chosen) {
    const bool dropped = u(rng) < m.dropout;
    const int amp = m.jitter > 0 ? static_cast<int>(rng() % static_cast<std::uint64_t>(2 * m.jitter + 1)) - m.jitter : 0;
    if (dropped) continue;
    auto region = node_region(t, node.level, node.id);
    for (int s = 0; s < std::abs(amp); ++s) region = detail::morph(region, amp > 0);
    if (count_set(region) == 0) continue;
    node.jitter = amp;
    out.masks.masks.push_back(std::move(region));
    out.nodes.push_back(node);
  }
  return out;
}

/// Fraction of objects whose set of emitted mask levels differs between two
/// views in which the object is visible.
inline double inconsistency_rate(const std::vector<std::vector<MaskNode>>& nodes_per_view, const std::vector<ViewTruth>& truth,
                                 const HierSceneSpec& spec) {
  std::size_t inconsistent = 0, counted = 0;
  for (std::uint32_t o = 0; o < static_cast<std::uint32_t>(spec.objects); ++o) {
    std::set<std::set<NodeLevel>> signatures;
    for (std::size_t v = 0; v < truth.size(); ++v) {
      if (std::count(truth[v].object.values.begin(), truth[v].object.values.end(), o) == 0) continue;
      std::set<NodeLevel> levels;
      for (const auto& n : nodes_per_view[v]) {
        const auto owner = n.level == NodeLevel::object ? n.id
                           : n.level == NodeLevel::part ? n.id / static_cast<std::uint32_t>(spec.parts_per_object)
                                                        : n.id / static_cast<std::uint32_t>(spec.subparts_per_part * spec.parts_per_object);
        if (owner == o) levels.insert(n.level);
      }
      signatures.insert(levels);
    }
    if (signatures.empty()) continue;
    ++counted;
    if (signatures.size() > 1) ++inconsistent;
  }
  return counted ? static_cast<double>(inconsistent) / static_cast<double>(counted) : 0.0;
}

/// Query pixels with proper part-in-object ground truth. Objects are visited
/// round-robin in order of decreasing visible area so small and large objects
/// are both represented; each query uses a fresh (object, part) pair.
inline std::vector<Query> make_benchmark_queries(const SynthScene& scene, std::size_t view, int per_view, int min_area) {
  const auto& t = scene.truth.at(view);
  std::mt19937_64 rng(detail::mix64(scene.spec.seed * 0x2545f4914f6cdd1dull + view + 7));
  std::map<std::uint32_t, std::size_t> obj_area, part_area;
  for (std::size_t p = 0; p < t.object.size(); ++p)
    if (t.object.values[p] != kNoLabel) {
      ++obj_area[t.object.values[p]];
      ++part_area[t.part.values[p]];
    }
  // eligible parts per object
  std::map<std::uint32_t, std::vector<std::uint32_t>> parts_of;
  for (const auto& [part, area] : part_area) {
    const auto obj = part / static_cast<std::uint32_t>(scene.spec.parts_per_object);
    if (area >= static_cast<std::size_t>(min_area) && obj_area[obj] >= static_cast<std::size_t>(min_area) && obj_area[obj] > area)
      parts_of[obj].push_back(part);
  }
  std::vector<std::uint32_t> order;
  for (auto& [obj, parts] : parts_of) {
    std::shuffle(parts.begin(), parts.end(), rng);
    order.push_back(obj);
  }
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return obj_area[a] > obj_area[b]; });

  std::vector<Query> out;
  std::map<std::uint32_t, std::size_t> next;
  for (bool progress = true; progress && static_cast<int>(out.size()) < per_view;) {
    progress = false;
    for (auto obj : order) {
      if (static_cast<int>(out.size()) >= per_view) break;
      if (next[obj] >= parts_of[obj].size()) continue;
      const auto part = parts_of[obj][next[obj]++];
      // prefer pixels whose 3x3 neighbourhood stays inside the part
      std::vector<std::pair<int, int>> interior, any;
      for (int y = 0; y < t.part.height; ++y)
        for (int x = 0; x < t.part.width; ++x) {
          if (t.part(x, y) != part) continue;
          any.emplace_back(x, y);
          bool inside = true;
          for (int dy = -1; dy <= 1 && inside; ++dy)
            for (int dx = -1; dx <= 1; ++dx)
              if (!t.part.contains(x + dx, y + dy) || t.part(x + dx, y + dy) != part) inside = false;
          if (inside) interior.emplace_back(x, y);
        }
      const auto& pool = interior.empty() ? any : interior;
      const auto [x, y] = pool[rng() % pool.size()];
      out.push_back({static_cast<int>(view), x, y, part, obj});
      progress = true;
    }
  }
  return out;
}

/// Full pipeline: scene, simulated masks, representations, queries.
inline Dataset build_dataset(const SynthScene& scene) {
  Dataset ds;
  ds.points = scene.points;
  ds.labels = scene.labels;
  ds.point_radius = scene.spec.point_radius;
  ds.seed = scene.spec.seed;
  ds.views.resize(scene.cameras.size());
  parallel_for(scene.cameras.size(), [&](std::size_t k) {
    auto& v = ds.views[k];
    v.camera = scene.cameras[k];
    v.rgb = scene.renders[k].colors;
    v.hit_index = scene.renders[k].hit_index;
    v.truth = scene.truth[k];
    auto sim = simulate_masks(scene, k);
    v.masks = std::move(sim.masks);
    for (const auto& n : sim.nodes) v.mask_provenance.push_back(format_provenance(n));
    attach_hierrep(v);
  });
  for (std::size_t k = 0; k < scene.cameras.size(); ++k) {
    auto q = make_benchmark_queries(scene, k, scene.spec.queries_per_view, scene.spec.min_query_area);
    ds.queries.insert(ds.queries.end(), q.begin(), q.end());
  }
  return ds;
}

inline Dataset generate_dataset(const HierSceneSpec& spec) { return build_dataset(generate_scene(spec)); }

/// Manifest lines describing the generator settings.
inline std::string scene_manifest_extra(const HierSceneSpec& spec) {
  return "objects = " + std::to_string(spec.objects) + "\nparts_per_object = " + std::to_string(spec.parts_per_object) +
         "\nsubparts_per_part = " + std::to_string(spec.subparts_per_part) + "\nwidth = " + std::to_string(spec.image_width) +
         "\nheight = " + std::to_string(spec.image_height) + "\n";
}

/// Writes the dataset plus a copy of the generating spec.
inline void export_synthetic(const Dataset& ds, const HierSceneSpec& spec, const std::filesystem::path& root) {
  export_dataset(ds, root, scene_manifest_extra(spec));
  write_file_atomic(root / "spec", spec.to_config());
}

}  // namespace omnifield
