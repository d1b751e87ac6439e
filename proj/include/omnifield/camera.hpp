#pragma once

#include <cmath>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>

#include <Eigen/Dense>

#include "omnifield/core.hpp"

namespace omnifield {

struct Ray {
  Eigen::Vector3d origin;
  Eigen::Vector3d direction;  // unit length, world frame
  double z_per_t = 1.0;       // camera-frame depth gained per unit of travel
};

/// Pinhole camera. Camera frame is x right, y down, z forward. `rotation`
/// maps camera axes to world axes and `translation` is the camera centre,
/// so x_world = rotation * x_cam + translation.
struct Camera {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  int width = 0, height = 0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  void validate() const {
    require(fx > 0 && fy > 0, "camera focal lengths must be positive");
    require(width > 0 && height > 0, "camera image size must be positive");
    const double err = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    require(err <= 1e-6 && rotation.determinant() > 0, "camera rotation is not orthonormal");
  }

  Eigen::Vector3d to_camera(const Eigen::Vector3d& world) const { return rotation.transpose() * (world - translation); }

  /// Pixel coordinates (continuous; pixel (i, j) spans [i, i+1) x [j, j+1)).
  std::optional<Eigen::Vector2d> project(const Eigen::Vector3d& world, double* depth = nullptr) const {
    const Eigen::Vector3d c = to_camera(world);
    if (depth) *depth = c.z();
    if (c.z() <= 1e-9) return std::nullopt;
    return Eigen::Vector2d(fx * c.x() / c.z() + cx, fy * c.y() / c.z() + cy);
  }

  /// Ray through the centre of pixel (x, y).
  Ray pixel_ray(int x, int y) const {
    Eigen::Vector3d d((x + 0.5 - cx) / fx, (y + 0.5 - cy) / fy, 1.0);
    const double len = d.norm();
    Ray r;
    r.origin = translation;
    r.direction = rotation * (d / len);
    r.z_per_t = 1.0 / len;
    return r;
  }

  /// World point seen at pixel (x, y) with camera-frame depth z.
  Eigen::Vector3d unproject(int x, int y, double z) const {
    Eigen::Vector3d c((x + 0.5 - cx) / fx * z, (y + 0.5 - cy) / fy * z, z);
    return rotation * c + translation;
  }

  static Camera look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, const Eigen::Vector3d& up, double focal, int w, int h) {
    Camera cam;
    cam.fx = cam.fy = focal;
    cam.cx = w / 2.0;
    cam.cy = h / 2.0;
    cam.width = w;
    cam.height = h;
    const Eigen::Vector3d forward = (target - eye).normalized();
    const Eigen::Vector3d right = forward.cross(up).normalized();
    const Eigen::Vector3d down = forward.cross(right);
    cam.rotation.col(0) = right;
    cam.rotation.col(1) = down;
    cam.rotation.col(2) = forward;
    cam.translation = eye;
    return cam;
  }
};

/// One camera per line: fx fy cx cy width height r00 r01 r02 r10 .. r22 tx ty tz
inline std::string format_camera(const Camera& c) {
  std::ostringstream out;
  out << std::setprecision(17) << c.fx << ' ' << c.fy << ' ' << c.cx << ' ' << c.cy << ' ' << c.width << ' ' << c.height;
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) out << ' ' << c.rotation(r, k);
  for (int k = 0; k < 3; ++k) out << ' ' << c.translation(k);
  return out.str();
}

inline Camera parse_camera(const std::string& line) {
  std::istringstream in(line);
  Camera c;
  in >> c.fx >> c.fy >> c.cx >> c.cy >> c.width >> c.height;
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) in >> c.rotation(r, k);
  for (int k = 0; k < 3; ++k) in >> c.translation(k);
  if (!in) fail(ErrorKind::format, "malformed camera line: " + line);
  c.validate();
  return c;
}

}  // namespace omnifield
