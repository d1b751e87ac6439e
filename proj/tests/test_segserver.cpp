#include <gtest/gtest.h>
#include <unistd.h>

#include <random>
#include <thread>

#include "omnifield/segserver.hpp"
#include "omnifield/synthdata.hpp"
// after the library headers: httplib pulls in <resolv.h>
#include "omnifield/segserver_http.hpp"

using namespace omnifield;
using json = nlohmann::json;

namespace {

const HierSceneSpec& spec() {
  static const HierSceneSpec s = [] {
    HierSceneSpec s;
    s.objects = 2;
    s.parts_per_object = 2;
    s.points_per_part = 200;
    s.views = 3;
    s.image_width = s.image_height = 40;
    return s;
  }();
  return s;
}

const Dataset& scene() {
  static const Dataset ds = generate_dataset(spec());
  return ds;
}

// One-hot features on the ground-truth part, with a small per-point tilt so
// cosines inside a part are close to but not exactly 1.
SurfaceField part_field(double tilt = 0.0, std::uint64_t seed = 1) {
  const auto& ds = scene();
  const std::size_t parts = static_cast<std::size_t>(spec().objects * spec().parts_per_object);
  SurfaceField f = ds.points;
  f.dim = parts;
  f.features.assign(f.size() * parts, 0.0);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  for (std::size_t i = 0; i < f.size(); ++i) {
    auto x = f.feature(i);
    x[ds.labels[i].part] = 1;
    for (auto& v : x) v += tilt * normal(rng);
  }
  rebuild_adjacency(f, 8);
  return f;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t d = 0; d < a.size(); ++d) {
    ab += a[d] * b[d];
    aa += a[d] * a[d];
    bb += b[d] * b[d];
  }
  return ab / std::sqrt(aa * bb);
}

// Fixed point of "add every neighbour j of a member i with cos >= t".
std::vector<std::uint32_t> closure_oracle(const SurfaceField& f, const std::vector<std::uint32_t>& seeds, double t) {
  std::set<std::uint32_t> s(seeds.begin(), seeds.end());
  for (bool changed = true; changed;) {
    changed = false;
    for (auto i : std::vector<std::uint32_t>(s.begin(), s.end()))
      for (auto j : f.adjacency[i])
        if (!s.count(j) && cosine(f.feature(i), f.feature(j)) >= t) {
          s.insert(j);
          changed = true;
        }
  }
  return {s.begin(), s.end()};
}

std::pair<int, int> covered_pixel(int view, std::uint32_t part) {
  const auto& v = scene().views[static_cast<std::size_t>(view)];
  for (int y = 0; y < v.camera.height; ++y)
    for (int x = 0; x < v.camera.width; ++x) {
      const auto h = v.hit_index[static_cast<std::size_t>(y) * v.camera.width + x];
      if (h >= 0 && scene().labels[static_cast<std::size_t>(h)].part == part) return {x, y};
    }
  return {-1, -1};
}

std::pair<int, int> empty_pixel(int view) {
  const auto& v = scene().views[static_cast<std::size_t>(view)];
  for (std::size_t p = 0; p < v.hit_index.size(); ++p)
    if (v.hit_index[p] < 0) return {static_cast<int>(p % v.camera.width), static_cast<int>(p / v.camera.width)};
  return {-1, -1};
}

std::size_t covered_count(int view) {
  std::size_t n = 0;
  for (auto h : scene().views[static_cast<std::size_t>(view)].hit_index) n += h >= 0;
  return n;
}

Mask mask_or(const Mask& a, const Mask& b) {
  Mask m = a;
  for (std::size_t p = 0; p < m.size(); ++p) m.values[p] = a.values[p] || b.values[p];
  return m;
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorKind::invalid_argument;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("omnifield_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  return p;
}

bool is_png(const std::string& bytes) { return bytes.size() > 8 && bytes.compare(0, 8, "\x89PNG\r\n\x1a\n") == 0; }

}  // namespace

// ---------------------------------------------------------------------------
// Point-set operations

TEST(RegionGrow, ThresholdExtremes) {
  const auto f = part_field(0.2);
  EXPECT_EQ(region_grow(f, {7, 3}, 1.01), (std::vector<std::uint32_t>{3, 7}));
  EXPECT_EQ(region_grow(f, {5}, -1.0), closure_oracle(f, {5}, -2.0));
}

TEST(RegionGrow, MatchesFixedPointOracle) {
  const auto f = part_field(0.2);
  std::mt19937_64 rng(4);
  for (double t : {0.95, 0.9, 0.7, 0.3}) {
    for (int trial = 0; trial < 5; ++trial) {
      std::vector<std::uint32_t> seeds{static_cast<std::uint32_t>(rng() % f.size()), static_cast<std::uint32_t>(rng() % f.size())};
      const auto got = region_grow(f, seeds, t);
      EXPECT_EQ(got, closure_oracle(f, seeds, t));
      std::reverse(seeds.begin(), seeds.end());
      EXPECT_EQ(region_grow(f, seeds, t), got);
    }
  }
  EXPECT_THROW(region_grow(f, {static_cast<std::uint32_t>(f.size())}, 0.5), Error);
}

TEST(RegionGrow, StaysInsidePart) {
  const auto f = part_field();
  const auto part = scene().labels[0].part;
  for (auto i : region_grow(f, {0}, 0.5)) EXPECT_EQ(scene().labels[i].part, part);
}

TEST(AutoDiscretize, ComponentsAreGrowthClasses) {
  const auto f = part_field(0.2);
  const auto d = auto_discretize(f, 0.8);
  std::set<std::uint32_t> labels(d.labels.begin(), d.labels.end());
  EXPECT_EQ(labels.size(), d.component_count);
  EXPECT_FALSE(labels.count(kNoLabel));
  // first member of each label in id order is a growth seed
  std::vector<std::uint8_t> done(d.component_count, 0);
  for (std::uint32_t i = 0; i < f.size(); ++i) {
    const auto l = d.labels[i];
    if (done[l]) continue;
    done[l] = 1;
    EXPECT_EQ(l, std::count(done.begin(), done.end(), 1) - 1);  // dense in order of lowest member
    for (auto j : region_grow(f, {i}, 0.8)) EXPECT_EQ(d.labels[j], l);
  }
}

TEST(SubsetField, KeepsSelectedPoints) {
  const auto f = part_field();
  const std::vector<std::uint32_t> ids{2, 9, 40};
  const auto s = subset_field(f, ids);
  ASSERT_EQ(s.size(), 3u);
  for (std::size_t k = 0; k < ids.size(); ++k) {
    EXPECT_EQ(s.position(k), f.position(ids[k]));
    EXPECT_TRUE(std::equal(s.feature(k).begin(), s.feature(k).end(), f.feature(ids[k]).begin()));
  }
}

// ---------------------------------------------------------------------------
// Sessions

class Service : public ::testing::Test {
 protected:
  void SetUp() override {
    svc.add_scene("demo", scene(), part_field());
    id = svc.create_session("demo");
  }
  SegService svc;
  std::string id;
};

TEST_F(Service, ClickOnEmptyPixelIsNoSurface) {
  const auto [x, y] = empty_pixel(0);
  ASSERT_GE(x, 0);
  EXPECT_EQ(kind_of([&] { svc.click(id, {0, x, y}); }), ErrorKind::no_surface);
  EXPECT_EQ(kind_of([&] { svc.click(id, {0, -1, 0}); }), ErrorKind::invalid_argument);
  EXPECT_EQ(kind_of([&] { svc.click(id, {9, 0, 0}); }), ErrorKind::invalid_argument);
  EXPECT_EQ(kind_of([&] { svc.click("s999", {0, 0, 0}); }), ErrorKind::not_found);
}

TEST_F(Service, ThresholdEndpoints) {
  const auto [x, y] = covered_pixel(0, 1);
  const auto r = svc.click(id, {0, x, y});
  EXPECT_EQ(scene().labels[r.anchor.point].part, 1u);
  EXPECT_EQ(count_set(svc.set_threshold(id, -1.0)), covered_count(0));
  const auto tight = svc.set_threshold(id, std::nextafter(1.0, 0.0));
  EXPECT_TRUE(tight(x, y));
  // clicked part only
  const auto& hits = scene().views[0].hit_index;
  for (std::size_t p = 0; p < tight.size(); ++p)
    EXPECT_EQ(tight.values[p] != 0, hits[p] >= 0 && scene().labels[static_cast<std::size_t>(hits[p])].part == 1u);
  EXPECT_EQ(kind_of([&] { svc.set_threshold(id, 1.5); }), ErrorKind::invalid_argument);
  EXPECT_EQ(kind_of([&] { svc.set_threshold(id, std::nan("")); }), ErrorKind::invalid_argument);
}

TEST_F(Service, ThresholdSweepIsNested) {
  svc.publish("demo", part_field(0.3));
  svc.refresh(id);
  const auto [x, y] = covered_pixel(0, 0);
  svc.click(id, {0, x, y});
  Mask prev = svc.set_threshold(id, -1.0);
  for (int k = 1; k <= 64; ++k) {
    const auto m = svc.set_threshold(id, -1.0 + 2.0 * k / 64);
    for (std::size_t p = 0; p < m.size(); ++p)
      if (m.values[p]) EXPECT_TRUE(prev.values[p]);
    prev = m;
  }
}

TEST_F(Service, MultiSelectIsUnionOfSingleClicks) {
  svc.publish("demo", part_field(0.3));
  svc.refresh(id);
  const auto [x0, y0] = covered_pixel(0, 0);
  const auto [x1, y1] = covered_pixel(0, 2);
  const double t = 0.6;
  svc.click(id, {0, x0, y0});
  const auto a = svc.set_threshold(id, t);
  svc.click(id, {0, x1, y1});
  const auto b = svc.set_threshold(id, t);
  const auto both = svc.multi_select(id, {{0, x0, y0}, {0, x1, y1}});
  EXPECT_EQ(both, mask_or(a, b));
  EXPECT_EQ(svc.session(id)->anchors.size(), 2u);
  EXPECT_EQ(kind_of([&] { svc.multi_select(id, {}); }), ErrorKind::invalid_argument);
}

TEST_F(Service, SessionsAreIsolated) {
  const auto other = svc.create_session("demo");
  EXPECT_NE(other, id);
  const auto [x, y] = covered_pixel(0, 0);
  svc.click(id, {0, x, y});
  svc.save_segment(id, "mine");
  EXPECT_TRUE(svc.segments(other).empty());
  EXPECT_EQ(kind_of([&] { svc.set_threshold(other, 0.5); }), ErrorKind::invalid_argument);
  svc.close_session(other);
  EXPECT_EQ(kind_of([&] { svc.session(other); }), ErrorKind::not_found);
  EXPECT_EQ(svc.segments(id).size(), 1u);
  EXPECT_EQ(kind_of([&] { svc.create_session("nope"); }), ErrorKind::not_found);
}

TEST_F(Service, PublishedFieldReachesSessionOnRefresh) {
  const auto [x, y] = covered_pixel(0, 0);
  const auto r = svc.click(id, {0, x, y});
  const auto old_feature = r.anchor.feature;
  const auto next = part_field(0.5, 9);
  svc.publish("demo", next);
  EXPECT_EQ(svc.session(id)->anchors.front().feature, old_feature);  // unchanged until refresh
  const auto rev = svc.revision(id);
  EXPECT_EQ(svc.refresh(id), 2u);  // the scene starts at generation 1
  EXPECT_GT(svc.revision(id), rev);
  const auto f = next.feature(r.anchor.point);
  EXPECT_EQ(svc.session(id)->anchors.front().feature, std::vector<double>(f.begin(), f.end()));
  EXPECT_EQ(svc.refresh(id), 2u);
}

TEST_F(Service, CheckpointReloadDetectsNewBytes) {
  const auto dir = temp_dir("reload");
  std::filesystem::create_directories(dir);
  const auto ckpt = dir / "field.ckpt";
  write_field(ckpt, part_field());
  svc.add_scene("disk", scene(), part_field(), ckpt);
  EXPECT_FALSE(svc.reload_checkpoint("disk"));
  write_field(ckpt, part_field(0.2));
  EXPECT_TRUE(svc.reload_checkpoint("disk"));
  EXPECT_FALSE(svc.reload_checkpoint("disk"));
  std::filesystem::remove_all(dir);
}

TEST_F(Service, GrowSaveExportRoundTrip) {
  const auto [x, y] = covered_pixel(0, 3);
  const auto r = svc.click(id, {0, x, y});
  const auto grown = svc.grow(id, 0.5);
  EXPECT_EQ(grown, region_grow(part_field(), {r.anchor.point}, 0.5));
  EXPECT_EQ(svc.save_segment(id, "part-3.a"), grown.size());
  EXPECT_EQ(kind_of([&] { svc.save_segment(id, "../escape"); }), ErrorKind::invalid_argument);
  EXPECT_EQ(kind_of([&] { svc.save_segment(id, ""); }), ErrorKind::invalid_argument);

  const auto dir = temp_dir("export");
  const auto files = svc.export_segments(id, dir);
  ASSERT_EQ(files.size(), 2u);
  std::vector<std::uint32_t> ids;
  std::istringstream in(read_file(dir / "part-3.a.ids"));
  for (std::uint32_t v; in >> v;) ids.push_back(v);
  EXPECT_EQ(ids, grown);
  const auto back = std::get<SurfaceField>(read_field(dir / "part-3.a.field"));
  ASSERT_EQ(back.size(), grown.size());
  // checkpoints store single precision
  EXPECT_LT((back.position(0) - scene().points.position(grown.front())).norm(), 1e-6);
  std::filesystem::remove_all(dir);
}

TEST_F(Service, SaveWithoutGrowUsesThresholdSelection) {
  const auto [x, y] = covered_pixel(0, 2);
  svc.click(id, {0, x, y});
  svc.set_threshold(id, 0.5);
  std::size_t in_part = 0;
  for (const auto& l : scene().labels) in_part += l.part == 2u;
  EXPECT_EQ(svc.save_segment(id, "sel"), in_part);
}

TEST_F(Service, DiscretizeAndImages) {
  EXPECT_EQ(kind_of([&] { svc.image(id, "labels"); }), ErrorKind::not_found);
  const auto d = svc.discretize(id, 0.5);
  EXPECT_GE(d.component_count, 4u);
  const auto [png, rev] = svc.image(id, "labels");
  EXPECT_TRUE(is_png(png));
  EXPECT_EQ(rev, svc.revision(id));
  for (const char* layer : {"rgb", "feat", "depth"}) EXPECT_TRUE(is_png(svc.render_png(id, 1, layer)));
  EXPECT_EQ(kind_of([&] { svc.render_png(id, 1, "normals"); }), ErrorKind::invalid_argument);
  Camera bad = scene().views[0].camera;
  bad.rotation *= 2;
  EXPECT_EQ(kind_of([&] { svc.render_png(id, 0, "rgb", bad); }), ErrorKind::invalid_argument);
}

// ---------------------------------------------------------------------------
// HTTP interface

class Http : public ::testing::Test {
 protected:
  void SetUp() override {
    svc.add_scene("demo", scene(), part_field());
    export_root = temp_dir("http_export");
    install_routes(server, svc, export_root);
    port = server.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port, 0);
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
    client = std::make_unique<httplib::Client>("127.0.0.1", port);
  }
  void TearDown() override {
    server.stop();
    thread.join();
    std::filesystem::remove_all(export_root);
  }

  json post(const std::string& path, const json& body, int expect) {
    auto r = client->Post(path, body.dump(), "application/json");
    EXPECT_TRUE(r) << path;
    if (!r) return {};
    EXPECT_EQ(r->status, expect) << path << " " << r->body;
    return json::parse(r->body);
  }
  json get(const std::string& path, int expect) {
    auto r = client->Get(path);
    EXPECT_TRUE(r) << path;
    if (!r) return {};
    EXPECT_EQ(r->status, expect) << path << " " << r->body;
    return json::parse(r->body);
  }
  std::string session() { return post("/session", {{"scene", "demo"}}, 201)["session"]; }

  SegService svc;
  httplib::Server server;
  std::thread thread;
  std::unique_ptr<httplib::Client> client;
  std::filesystem::path export_root;
  int port = 0;
};

TEST_F(Http, ScenesAndSessions) {
  const auto scenes = get("/scenes", 200);
  ASSERT_EQ(scenes["scenes"].size(), 1u);
  EXPECT_EQ(scenes["scenes"][0]["id"], "demo");
  EXPECT_EQ(scenes["scenes"][0]["views"], 3);
  const auto id = session();
  auto del = client->Delete("/session/" + id);
  ASSERT_TRUE(del);
  EXPECT_EQ(del->status, 200);
  del = client->Delete("/session/" + id);
  ASSERT_TRUE(del);
  EXPECT_EQ(del->status, 404);
  EXPECT_EQ(json::parse(del->body)["code"], "not-found");

  const auto missing = post("/session", {{"scene", "other"}}, 404);
  EXPECT_EQ(missing["code"], "not-found");
  EXPECT_FALSE(missing["message"].get<std::string>().empty());
  EXPECT_EQ(post("/session", json::object(), 400)["code"], "invalid-argument");
  auto bad = client->Post("/session", "{not json", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  EXPECT_EQ(get("/no/such/path", 404)["code"], "not-found");
}

TEST_F(Http, RenderLayers) {
  const auto id = session();
  for (const char* layer : {"rgb", "feat", "depth"}) {
    auto r = client->Get("/session/" + id + "/render?view=1&layer=" + layer);
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 200);
    EXPECT_EQ(r->get_header_value("Content-Type"), "image/png");
    EXPECT_TRUE(is_png(r->body));
  }
  const auto cam = format_camera(scene().views[2].camera);
  auto posed = client->Get("/session/" + id + "/render?layer=rgb&camera=" + httplib::detail::encode_url(cam));
  ASSERT_TRUE(posed);
  EXPECT_EQ(posed->status, 200);
  EXPECT_EQ(get("/session/" + id + "/render?view=abc", 400)["code"], "invalid-argument");
  EXPECT_EQ(get("/session/" + id + "/render?layer=normals", 400)["code"], "invalid-argument");
}

TEST_F(Http, ClickThresholdAndImages) {
  const auto id = session();
  const auto [ex, ey] = empty_pixel(0);
  EXPECT_EQ(post("/session/" + id + "/click", {{"view", 0}, {"x", ex}, {"y", ey}}, 422)["code"], "no-surface");
  EXPECT_EQ(post("/session/" + id + "/threshold", {{"t", 0.5}}, 400)["code"], "invalid-argument");

  const auto [x, y] = covered_pixel(0, 1);
  const auto c = post("/session/" + id + "/click", {{"view", 0}, {"x", x}, {"y", y}}, 200);
  EXPECT_EQ(scene().labels[c["anchor_id"].get<std::size_t>()].part, 1u);
  EXPECT_EQ(c["feature"].size(), 4u);
  EXPECT_EQ(c["view"], 0);
  const std::string score_url = c["score_map_url"];
  auto img = client->Get(score_url);
  ASSERT_TRUE(img);
  EXPECT_EQ(img->status, 200);
  EXPECT_TRUE(is_png(img->body));
  EXPECT_EQ(img->get_header_value("Cache-Control"), "no-store");

  const auto all = post("/session/" + id + "/threshold", {{"t", -1}}, 200);
  EXPECT_EQ(all["selected"], covered_count(0));
  EXPECT_EQ(all["width"], 40);
  const auto some = post("/session/" + id + "/threshold", {{"t", 0.5}}, 200);
  EXPECT_LT(some["selected"].get<std::size_t>(), all["selected"].get<std::size_t>());
  const std::string mask_url = some["mask_url"];
  EXPECT_NE(mask_url, all["mask_url"].get<std::string>());  // revision changes the URL
  img = client->Get(mask_url);
  ASSERT_TRUE(img);
  EXPECT_EQ(img->get_header_value("X-Revision"), std::to_string(svc.revision(id)));
  EXPECT_EQ(post("/session/" + id + "/threshold", {{"t", 2}}, 400)["code"], "invalid-argument");
  EXPECT_EQ(post("/session/" + id + "/threshold", {{"t", "high"}}, 400)["code"], "invalid-argument");
  EXPECT_EQ(get("/session/" + id + "/image/grow.png", 404)["code"], "not-found");
}

TEST_F(Http, SelectGrowSegmentsExport) {
  const auto id = session();
  const auto [x0, y0] = covered_pixel(0, 0);
  const auto [x1, y1] = covered_pixel(0, 2);
  const auto sel = post("/session/" + id + "/select", {{"clicks", {{{"view", 0}, {"x", x0}, {"y", y0}}, {{"view", 0}, {"x", x1}, {"y", y1}}}}}, 200);
  EXPECT_EQ(sel["anchors"], 2);
  EXPECT_GT(sel["selected"].get<std::size_t>(), 0u);
  EXPECT_EQ(post("/session/" + id + "/select", {{"clicks", 3}}, 400)["code"], "invalid-argument");

  const auto g = post("/session/" + id + "/grow", {{"threshold", 0.5}}, 200);
  const auto ids = g["point_ids"].get<std::vector<std::uint32_t>>();
  EXPECT_EQ(g["point_count"], ids.size());
  for (auto i : ids) EXPECT_TRUE(scene().labels[i].part == 0u || scene().labels[i].part == 2u);
  auto img = client->Get(g["mask_url"].get<std::string>());
  ASSERT_TRUE(img);
  EXPECT_EQ(img->status, 200);

  const auto d = post("/session/" + id + "/discretize", {{"threshold", 0.5}}, 200);
  EXPECT_GE(d["component_count"].get<std::size_t>(), 4u);
  EXPECT_TRUE(d.contains("note"));

  const auto saved = post("/session/" + id + "/segments", {{"name", "legs"}}, 201);
  EXPECT_EQ(saved["point_count"], ids.size());
  EXPECT_EQ(post("/session/" + id + "/segments", {{"name", "a/b"}}, 400)["code"], "invalid-argument");
  const auto list = get("/session/" + id + "/segments", 200);
  ASSERT_EQ(list["segments"].size(), 1u);
  EXPECT_EQ(list["segments"][0]["name"], "legs");

  const auto exported = post("/session/" + id + "/export", json::object(), 200);
  ASSERT_EQ(exported["files"].size(), 2u);
  for (const auto& f : exported["files"]) EXPECT_TRUE(std::filesystem::exists(f.get<std::string>()));

  svc.publish("demo", part_field(0.1));
  EXPECT_EQ(post("/session/" + id + "/refresh", json::object(), 200)["generation"], 2);
}

TEST_F(Http, ConcurrentSessions) {
  std::vector<std::string> ids;
  for (int k = 0; k < 4; ++k) ids.push_back(session());
  std::vector<std::thread> workers;
  std::atomic<int> ok{0};
  for (int k = 0; k < 4; ++k)
    workers.emplace_back([&, k] {
      httplib::Client c("127.0.0.1", port);
      const auto [x, y] = covered_pixel(0, static_cast<std::uint32_t>(k));
      for (int i = 0; i < 5; ++i) {
        auto r = c.Post("/session/" + ids[static_cast<std::size_t>(k)] + "/click", json{{"view", 0}, {"x", x}, {"y", y}}.dump(), "application/json");
        if (r && r->status == 200 && scene().labels[json::parse(r->body)["anchor_id"].get<std::size_t>()].part == static_cast<std::uint32_t>(k)) ++ok;
      }
    });
  for (auto& w : workers) w.join();
  EXPECT_EQ(ok.load(), 20);
}
