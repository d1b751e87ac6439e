#pragma once

// HTTP front end for SegService. JSON bodies, PNG images, and errors as
// {"code": ..., "message": ...}.

// Eigen must come first: httplib pulls in <resolv.h>, whose _res macro
// collides with Eigen parameter names.
#include "omnifield/segserver.hpp"

#include <httplib.h>
#include <json.hpp>

namespace omnifield {

inline int http_status(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument:
    case ErrorKind::bad_config:
    case ErrorKind::format: return 400;
    case ErrorKind::not_found:
    case ErrorKind::missing_file: return 404;
    case ErrorKind::no_surface: return 422;
    default: return 500;
  }
}

namespace detail {

using json = nlohmann::json;

inline void send_json(httplib::Response& res, const json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, ErrorKind kind, const std::string& message) {
  send_json(res, {{"code", error_code(kind)}, {"message", message}}, http_status(kind));
}

inline json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    auto j = json::parse(req.body);
    if (!j.is_object()) fail(ErrorKind::invalid_argument, "request body must be a JSON object");
    return j;
  } catch (const json::exception& e) {
    fail(ErrorKind::invalid_argument, std::string("malformed JSON body: ") + e.what());
  }
}

template <class T>
T field_of(const json& j, const char* key) {
  if (!j.contains(key)) fail(ErrorKind::invalid_argument, std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::invalid_argument, std::string("field '") + key + "' has the wrong type");
  }
}

inline Click click_of(const json& j) { return {field_of<int>(j, "view"), field_of<int>(j, "x"), field_of<int>(j, "y")}; }

inline std::string image_url(const std::string& session, const std::string& name, std::uint64_t revision) {
  return "/session/" + session + "/image/" + name + ".png?rev=" + std::to_string(revision);
}

inline json mask_summary(const Mask& m) { return {{"width", m.width}, {"height", m.height}, {"selected", count_set(m)}}; }

// Wraps a handler so library errors become structured responses.
template <class F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const Error& e) {
      send_error(res, e.kind(), e.what());
    } catch (const std::exception& e) {
      send_json(res, {{"code", "internal"}, {"message", e.what()}}, 500);
    }
  };
}

}  // namespace detail

/// Registers every route on `server`. `export_root` receives segment exports
/// under <export_root>/<session id>/.
inline void install_routes(httplib::Server& server, SegService& svc, std::filesystem::path export_root = "segments") {
  using detail::guarded;
  using detail::json;
  using detail::send_json;
  const std::string sid = R"(/session/([A-Za-z0-9]+))";

  server.Get("/scenes", guarded([&svc](const httplib::Request&, httplib::Response& res) {
    json scenes = json::array();
    for (const auto& id : svc.scene_ids()) scenes.push_back({{"id", id}, {"views", svc.view_count(id)}});
    send_json(res, {{"scenes", scenes}});
  }));

  server.Post("/session", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
    const auto body = detail::parse_body(req);
    const auto id = svc.create_session(detail::field_of<std::string>(body, "scene"));
    send_json(res, {{"session", id}}, 201);
  }));

  server.Delete(sid, guarded([&svc](const httplib::Request& req, httplib::Response& res) {
    svc.close_session(req.matches[1]);
    send_json(res, {{"closed", std::string(req.matches[1])}});
  }));

  server.Get(sid + "/render", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
    const std::string layer = req.has_param("layer") ? req.get_param_value("layer") : "rgb";
    std::optional<Camera> pose;
    if (req.has_param("camera")) pose = parse_camera(req.get_param_value("camera"));
    int view = 0;
    if (req.has_param("view")) {
      try {
        view = std::stoi(req.get_param_value("view"));
      } catch (const std::logic_error&) {
        fail(ErrorKind::invalid_argument, "view must be an integer");
      }
    }
    res.set_content(svc.render_png(req.matches[1], view, layer, pose), "image/png");
  }));

  server.Post(sid + "/click", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    const auto r = svc.click(id, detail::click_of(detail::parse_body(req)));
    send_json(res, {{"anchor_id", r.anchor.point},
                    {"feature", r.anchor.feature},
                    {"view", r.anchor.view},
                    {"score_map_url", detail::image_url(id, "score", svc.revision(id))}});
  }));

  server.Post(sid + "/threshold", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    const double t = detail::field_of<double>(detail::parse_body(req), "t");
    const auto m = svc.set_threshold(id, t);
    auto body = detail::mask_summary(m);
    body["t"] = t;
    body["mask_url"] = detail::image_url(id, "mask", svc.revision(id));
    send_json(res, body);
  }));

  server.Post(sid + "/select", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    const auto body = detail::parse_body(req);
    const auto list = detail::field_of<json>(body, "clicks");
    if (!list.is_array()) fail(ErrorKind::invalid_argument, "clicks must be an array");
    std::vector<Click> clicks;
    for (const auto& c : list) clicks.push_back(detail::click_of(c));
    const auto m = svc.multi_select(id, clicks);
    auto out = detail::mask_summary(m);
    out["anchors"] = clicks.size();
    out["mask_url"] = detail::image_url(id, "mask", svc.revision(id));
    out["score_map_url"] = detail::image_url(id, "score", svc.revision(id));
    send_json(res, out);
  }));

  server.Post(sid + "/grow", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    const auto ids = svc.grow(id, detail::field_of<double>(detail::parse_body(req), "threshold"));
    send_json(res, {{"point_count", ids.size()}, {"point_ids", ids}, {"mask_url", detail::image_url(id, "grow", svc.revision(id))}});
  }));

  server.Post(sid + "/discretize", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    const auto d = svc.discretize(id, detail::field_of<double>(detail::parse_body(req), "threshold"));
    send_json(res, {{"component_count", d.component_count},
                    {"label_map_url", detail::image_url(id, "labels", svc.revision(id))},
                    {"note", "components come from feature similarity alone and need not share a hierarchy level"}});
  }));

  server.Post(sid + "/segments", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
    const auto name = detail::field_of<std::string>(detail::parse_body(req), "name");
    const auto n = svc.save_segment(req.matches[1], name);
    send_json(res, {{"name", name}, {"point_count", n}}, 201);
  }));

  server.Get(sid + "/segments", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
    json list = json::array();
    for (const auto& [name, ids] : svc.segments(req.matches[1])) list.push_back({{"name", name}, {"point_count", ids.size()}});
    send_json(res, {{"segments", list}});
  }));

  server.Post(sid + "/export", guarded([&svc, export_root](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    json files = json::array();
    for (const auto& p : svc.export_segments(id, export_root / id)) files.push_back(p.string());
    send_json(res, {{"files", files}});
  }));

  server.Post(sid + "/refresh", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
    send_json(res, {{"generation", svc.refresh(req.matches[1])}});
  }));

  server.Get(sid + R"(/image/(score|mask|grow|labels)\.png)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
    const auto [png, rev] = svc.image(req.matches[1], req.matches[2]);
    res.set_header("X-Revision", std::to_string(rev));
    res.set_header("Cache-Control", "no-store");
    res.set_content(png, "image/png");
  }));

  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) {
      const int status = res.status;
      detail::send_error(res, ErrorKind::not_found, "no such endpoint");
      res.status = status;
    }
  });
}

}  // namespace omnifield
