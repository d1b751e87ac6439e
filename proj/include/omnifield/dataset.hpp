#pragma once

// Multi-view dataset: point geometry, cameras, per-view mask sets with their
// hierarchical representations, optional ground-truth labels and queries.
//
// Directory layout:
//   manifest                 key = value text, versioned
//   cameras                  one camera per line (see format_camera)
//   points                   field checkpoint of the point cloud (dim 0)
//   labels                   optional, "object part subpart" per point
//   queries                  optional, "view x y part:<id> object:<id>" per line
//   views/<k>/masks          bit-packed masks (see encode_masks)
//   views/<k>/masks.index    "<mask> <pixels> <provenance>" per mask
//   views/<k>/hierrep        hier2d container, plus hierrep.meta
//   views/<k>/gtmasks        optional ground-truth label maps
//   views/<k>/rgb.pfm        optional target colours

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "omnifield/camera.hpp"
#include "omnifield/config.hpp"
#include "omnifield/field.hpp"
#include "omnifield/field_io.hpp"
#include "omnifield/hier2d.hpp"
#include "omnifield/image_io.hpp"

namespace omnifield {

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::uint32_t kNoLabel = 0xFFFFFFFFu;

struct PointLabel {
  std::uint32_t object = kNoLabel, part = kNoLabel, subpart = kNoLabel;
  friend bool operator==(const PointLabel&, const PointLabel&) = default;
};

/// Per-pixel ground-truth node ids (kNoLabel on background).
struct ViewTruth {
  Grid<std::uint32_t> object, part, subpart;
  friend bool operator==(const ViewTruth&, const ViewTruth&) = default;
};

struct Query {
  int view = 0, x = 0, y = 0;
  std::uint32_t part = 0, object = 0;
  friend bool operator==(const Query&, const Query&) = default;
};

struct DatasetView {
  Camera camera;
  std::vector<double> rgb;                // H x W x 3, empty when unknown
  MaskSet masks;
  std::vector<std::string> mask_provenance;
  std::optional<HierRep> rep;             // absent when the view has no masks
  std::vector<HierLevels> levels;         // per patch of `rep`
  std::optional<ViewTruth> truth;
  std::vector<std::int32_t> hit_index;    // point winning each pixel, -1 if none

  bool has_evidence() const { return rep.has_value() && rep->partition.patch_count() > 0; }
};

struct Dataset {
  SurfaceField points;  // positions and colours, dim 0
  std::vector<PointLabel> labels;
  std::vector<DatasetView> views;
  std::vector<Query> queries;
  double point_radius = 1.0;
  std::uint64_t seed = 0;

  Mask query_mask(const Query& q, bool object_level) const {
    const auto& t = views.at(static_cast<std::size_t>(q.view)).truth;
    require(t.has_value(), "query refers to a view without ground truth");
    const auto& map = object_level ? t->object : t->part;
    const auto id = object_level ? q.object : q.part;
    Mask m(map.width, map.height, 0);
    for (std::size_t p = 0; p < map.size(); ++p) m.values[p] = map.values[p] == id;
    return m;
  }
};

/// Builds the representation and per-patch levels for a view from its masks.
inline void attach_hierrep(DatasetView& view, HierRep rep) {
  view.levels = all_hierarchy_levels(rep.correlation);
  view.rep = std::move(rep);
}

inline void attach_hierrep(DatasetView& view) {
  if (view.masks.masks.empty()) {
    view.rep.reset();
    view.levels.clear();
    return;
  }
  attach_hierrep(view, build_hierrep(view.masks));
}

/// Recomputes every view's hit map from the dataset geometry.
inline void compute_hit_maps(Dataset& ds) {
  for (auto& v : ds.views) v.hit_index = render_surface(ds.points, v.camera, ds.point_radius).hit_index;
}

// ---------------------------------------------------------------------------
// Binary mask files: "OFMK" | u32 version | u32 endian tag | u32 W | u32 H |
// u32 count | count x ceil(W*H/8) bytes, LSB-first, row-major | CRC-32

inline std::string encode_masks(const MaskSet& set) {
  ByteWriter w;
  w.magic("OFMK");
  w.u32(kDatasetVersion);
  w.u32(kEndianTag);
  w.u32(static_cast<std::uint32_t>(set.width));
  w.u32(static_cast<std::uint32_t>(set.height));
  w.u32(static_cast<std::uint32_t>(set.size()));
  const std::size_t pixels = static_cast<std::size_t>(set.width) * set.height;
  for (const auto& m : set.masks) {
    std::string packed((pixels + 7) / 8, '\0');
    for (std::size_t p = 0; p < pixels; ++p)
      if (m.values[p]) packed[p / 8] = static_cast<char>(packed[p / 8] | (1 << (p % 8)));
    w.bytes(packed);
  }
  w.seal();
  return w.take();
}

inline MaskSet decode_masks(std::string_view bytes) {
  ByteReader::verify_seal(bytes, "mask file");
  ByteReader r(bytes.substr(0, bytes.size() - 4));
  r.expect_magic("OFMK", "mask file");
  if (r.u32() != kDatasetVersion) fail(ErrorKind::format, "mask file: unsupported version");
  if (r.u32() != kEndianTag) fail(ErrorKind::format, "mask file: endianness tag mismatch");
  MaskSet set;
  set.width = static_cast<int>(r.u32());
  set.height = static_cast<int>(r.u32());
  const std::size_t count = r.u32();
  const std::size_t pixels = static_cast<std::size_t>(set.width) * set.height;
  if (r.remaining() != count * ((pixels + 7) / 8)) fail(ErrorKind::format, "mask file: payload size mismatch");
  for (std::size_t k = 0; k < count; ++k) {
    const auto packed = r.bytes((pixels + 7) / 8);
    Mask m(set.width, set.height, 0);
    for (std::size_t p = 0; p < pixels; ++p) m.values[p] = (static_cast<std::uint8_t>(packed[p / 8]) >> (p % 8)) & 1u;
    set.masks.push_back(std::move(m));
  }
  return set;
}

// Ground-truth maps: "OFGT" | version | endian tag | W | H | object, part,
// subpart maps as u32 row-major | CRC-32

inline std::string encode_truth(const ViewTruth& t) {
  ByteWriter w;
  w.magic("OFGT");
  w.u32(kDatasetVersion);
  w.u32(kEndianTag);
  w.u32(static_cast<std::uint32_t>(t.object.width));
  w.u32(static_cast<std::uint32_t>(t.object.height));
  for (const auto* g : {&t.object, &t.part, &t.subpart})
    for (auto v : g->values) w.u32(v);
  w.seal();
  return w.take();
}

inline ViewTruth decode_truth(std::string_view bytes) {
  ByteReader::verify_seal(bytes, "ground-truth file");
  ByteReader r(bytes.substr(0, bytes.size() - 4));
  r.expect_magic("OFGT", "ground-truth file");
  if (r.u32() != kDatasetVersion) fail(ErrorKind::format, "ground-truth file: unsupported version");
  if (r.u32() != kEndianTag) fail(ErrorKind::format, "ground-truth file: endianness tag mismatch");
  const int W = static_cast<int>(r.u32()), H = static_cast<int>(r.u32());
  if (r.remaining() != static_cast<std::size_t>(W) * H * 12) fail(ErrorKind::format, "ground-truth file: payload size mismatch");
  ViewTruth t{Grid<std::uint32_t>(W, H), Grid<std::uint32_t>(W, H), Grid<std::uint32_t>(W, H)};
  for (auto* g : {&t.object, &t.part, &t.subpart})
    for (auto& v : g->values) v = r.u32();
  return t;
}

inline std::string format_query(const Query& q) {
  return std::to_string(q.view) + " " + std::to_string(q.x) + " " + std::to_string(q.y) + " part:" + std::to_string(q.part) +
         " object:" + std::to_string(q.object);
}

inline Query parse_query(const std::string& line) {
  std::istringstream in(line);
  Query q;
  std::string l1, l2;
  if (!(in >> q.view >> q.x >> q.y >> l1 >> l2) || l1.rfind("part:", 0) != 0 || l2.rfind("object:", 0) != 0)
    fail(ErrorKind::format, "queries: malformed line '" + line + "'");
  q.part = static_cast<std::uint32_t>(std::stoul(l1.substr(5)));
  q.object = static_cast<std::uint32_t>(std::stoul(l2.substr(7)));
  return q;
}

namespace detail {
inline std::filesystem::path view_dir(const std::filesystem::path& root, std::size_t k) { return root / "views" / std::to_string(k); }

inline std::string lines_of(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  return out;
}

inline std::vector<std::string> split_lines(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line))
    if (!trim(line).empty()) out.push_back(line);
  return out;
}
}  // namespace detail

inline std::vector<std::string> read_mask_index(const std::filesystem::path& view_dir) {
  std::vector<std::string> out;
  if (!std::filesystem::exists(view_dir / "masks.index")) return out;
  for (const auto& line : detail::split_lines(read_file(view_dir / "masks.index"))) {
    std::istringstream in(line);
    std::size_t idx = 0, pixels = 0;
    std::string prov;
    in >> idx >> pixels >> std::ws;
    std::getline(in, prov);
    out.push_back(prov);
  }
  return out;
}

inline std::string mask_index_text(const DatasetView& v) {
  std::vector<std::string> lines;
  for (std::size_t k = 0; k < v.masks.size(); ++k)
    lines.push_back(std::to_string(k) + " " + std::to_string(count_set(v.masks.masks[k])) + " " +
                    (k < v.mask_provenance.size() ? v.mask_provenance[k] : std::string("unknown")));
  return detail::lines_of(lines);
}

/// Writes the representation of view `k` unless an up-to-date one exists
/// (same mask-file checksum in the sidecar). Returns true when written.
inline bool write_view_hierrep(const std::filesystem::path& root, std::size_t k, const DatasetView& v, bool force = false) {
  const auto dir = detail::view_dir(root, k);
  const auto mask_bytes = read_file(dir / "masks");
  const auto digest = content_digest(mask_bytes);
  const auto path = dir / "hierrep";
  if (!force && std::filesystem::exists(path) && std::filesystem::exists(dir / "hierrep.meta")) {
    try {
      if (parse_hierrep_meta(read_file(dir / "hierrep.meta")).masks_digest == digest) {
        deserialize_hierrep(read_file(path));
        return false;
      }
    } catch (const Error&) {
      // unreadable file: rebuild below
    }
  }
  if (!v.rep) return false;
  write_hierrep_file(path, *v.rep, HierRepMeta{"view:" + std::to_string(k), v.mask_provenance, digest});
  return true;
}

inline void export_dataset(const Dataset& ds, const std::filesystem::path& root, const std::string& extra_manifest = {}) {
  std::filesystem::create_directories(root / "views");
  std::ostringstream manifest;
  manifest << "format = omnifield-dataset\n"
           << "version = " << kDatasetVersion << "\n"
           << "views = " << ds.views.size() << "\n"
           << "points = " << ds.points.size() << "\n"
           << "point_radius = " << std::setprecision(17) << ds.point_radius << "\n"
           << "seed = " << ds.seed << "\n"
           << extra_manifest;
  write_file_atomic(root / "manifest", manifest.str());

  std::vector<std::string> cams;
  for (const auto& v : ds.views) cams.push_back(format_camera(v.camera));
  write_file_atomic(root / "cameras", detail::lines_of(cams));

  auto geometry = ds.points;
  geometry.dim = 0;
  geometry.features.clear();
  geometry.knn = 0;
  write_field(root / "points", geometry);

  if (!ds.labels.empty()) {
    std::vector<std::string> lines;
    for (const auto& l : ds.labels) lines.push_back(std::to_string(l.object) + " " + std::to_string(l.part) + " " + std::to_string(l.subpart));
    write_file_atomic(root / "labels", detail::lines_of(lines));
  }
  if (!ds.queries.empty()) {
    std::vector<std::string> lines;
    for (const auto& q : ds.queries) lines.push_back(format_query(q));
    write_file_atomic(root / "queries", detail::lines_of(lines));
  }
  for (std::size_t k = 0; k < ds.views.size(); ++k) {
    const auto& v = ds.views[k];
    const auto dir = detail::view_dir(root, k);
    std::filesystem::create_directories(dir);
    MaskSet set = v.masks;
    set.width = v.camera.width;
    set.height = v.camera.height;
    write_file_atomic(dir / "masks", encode_masks(set));
    write_file_atomic(dir / "masks.index", mask_index_text(v));
    write_view_hierrep(root, k, v, true);
    if (v.truth) write_file_atomic(dir / "gtmasks", encode_truth(*v.truth));
    if (!v.rgb.empty()) write_file_atomic(dir / "rgb.pfm", encode_pfm(v.rgb, v.camera.width, v.camera.height, 3));
  }
}

inline KeyValues read_manifest(const std::filesystem::path& root) {
  if (!std::filesystem::exists(root / "manifest")) fail(ErrorKind::missing_file, "no dataset manifest in " + root.string());
  auto kv = KeyValues::load(root / "manifest");
  std::string format;
  std::uint32_t version = 0;
  kv.read("format", format);
  kv.read("version", version);
  if (format != "omnifield-dataset") fail(ErrorKind::format, root.string() + ": not a dataset manifest");
  if (version != kDatasetVersion) fail(ErrorKind::format, root.string() + ": unsupported dataset version " + std::to_string(version));
  return kv;
}

/// Loads a dataset directory. Views whose stored representation is missing
/// or stale are rebuilt in memory (the files are left untouched).
inline Dataset load_dataset(const std::filesystem::path& root) {
  const auto kv = read_manifest(root);
  Dataset ds;
  std::size_t view_count = 0;
  kv.read("views", view_count);
  kv.read("point_radius", ds.point_radius);
  kv.read("seed", ds.seed);
  ds.points = std::get<SurfaceField>(read_field(root / "points"));

  const auto cams = detail::split_lines(read_file(root / "cameras"));
  if (cams.size() != view_count) fail(ErrorKind::format, "cameras: expected " + std::to_string(view_count) + " lines");
  if (std::filesystem::exists(root / "labels")) {
    for (const auto& line : detail::split_lines(read_file(root / "labels"))) {
      std::istringstream in(line);
      PointLabel l;
      if (!(in >> l.object >> l.part >> l.subpart)) fail(ErrorKind::format, "labels: malformed line");
      ds.labels.push_back(l);
    }
    if (ds.labels.size() != ds.points.size()) fail(ErrorKind::format, "labels: count does not match points");
  }
  if (std::filesystem::exists(root / "queries"))
    for (const auto& line : detail::split_lines(read_file(root / "queries"))) ds.queries.push_back(parse_query(line));

  ds.views.resize(view_count);
  for (std::size_t k = 0; k < view_count; ++k) {
    auto& v = ds.views[k];
    const auto dir = detail::view_dir(root, k);
    v.camera = parse_camera(cams[k]);
    const auto mask_bytes = read_file(dir / "masks");
    v.masks = decode_masks(mask_bytes);
    if (v.masks.width != v.camera.width || v.masks.height != v.camera.height)
      fail(ErrorKind::format, "view " + std::to_string(k) + ": mask size does not match camera");
    v.mask_provenance = read_mask_index(dir);
    bool loaded = false;
    if (std::filesystem::exists(dir / "hierrep") && std::filesystem::exists(dir / "hierrep.meta")) {
      const auto meta = parse_hierrep_meta(read_file(dir / "hierrep.meta"));
      if (meta.masks_digest == content_digest(mask_bytes)) {
        attach_hierrep(v, read_hierrep_file(dir / "hierrep"));
        loaded = true;
      }
    }
    if (!loaded) attach_hierrep(v);
    if (std::filesystem::exists(dir / "gtmasks")) v.truth = decode_truth(read_file(dir / "gtmasks"));
    if (std::filesystem::exists(dir / "rgb.pfm")) v.rgb = decode_pfm(read_file(dir / "rgb.pfm")).values;
  }
  for (const auto& q : ds.queries)
    if (q.view < 0 || static_cast<std::size_t>(q.view) >= view_count) fail(ErrorKind::format, "queries: view index out of range");
  compute_hit_maps(ds);
  return ds;
}

/// Writes representation files for every view whose masks changed. Returns
/// the number of views written.
inline std::size_t update_hierreps(const std::filesystem::path& root) {
  const auto kv = read_manifest(root);
  std::size_t view_count = 0, written = 0;
  kv.read("views", view_count);
  for (std::size_t k = 0; k < view_count; ++k) {
    const auto dir = detail::view_dir(root, k);
    DatasetView v;
    v.masks = decode_masks(read_file(dir / "masks"));
    v.mask_provenance = read_mask_index(dir);
    const auto path = dir / "hierrep";
    if (std::filesystem::exists(path) && std::filesystem::exists(dir / "hierrep.meta")) {
      // cheap up-to-date check before building anything
      if (parse_hierrep_meta(read_file(dir / "hierrep.meta")).masks_digest == content_digest(read_file(dir / "masks"))) continue;
    }
    attach_hierrep(v);
    if (write_view_hierrep(root, k, v, true)) ++written;
  }
  return written;
}

}  // namespace omnifield
