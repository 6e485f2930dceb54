#pragma once

#include "uvsplat/math.hpp"

namespace uvsplat {

/// Pinhole camera, OpenCV axes (x right, y down, z forward).
/// Pixel (x, y) covers [x, x+1) x [y, y+1); rays go through pixel centers.
template <typename T> struct Camera {
  T fx = T(1), fy = T(1), cx = T(0), cy = T(0);
  int width = 0, height = 0;
  Mat3<T> rotation = Mat3<T>::Identity();  // world_from_camera
  Vec3<T> position = Vec3<T>::Zero();

  void validate() const {
    if (!(fx > T(0) && fy > T(0))) throw DataError("camera: focal lengths must be positive");
    if (width <= 0 || height <= 0) throw DataError("camera: image size must be positive");
    if ((rotation.transpose() * rotation - Mat3<T>::Identity()).cwiseAbs().maxCoeff() > T(1e-5))
      throw DataError("camera: pose rotation is not orthonormal");
  }

  Vec3<T> forward() const { return rotation.col(2); }

  Vec3<T> ray_direction(int px, int py) const {
    const Vec3<T> d((T(px) + T(0.5) - cx) / fx, (T(py) + T(0.5) - cy) / fy, T(1));
    return (rotation * d).normalized();
  }

  Vec3<T> to_camera(const Vec3<T>& p) const { return rotation.transpose() * (p - position); }

  /// Camera looking from `eye` at `target` with approximate world up `up`.
  static Camera look_at(const Vec3<T>& eye, const Vec3<T>& target, const Vec3<T>& up, T focal, int w, int h) {
    Camera c;
    c.fx = c.fy = focal;
    c.cx = T(w) / T(2);
    c.cy = T(h) / T(2);
    c.width = w;
    c.height = h;
    const Vec3<T> z = (target - eye).normalized();
    const Vec3<T> x = z.cross(up).normalized();  // right
    const Vec3<T> y = z.cross(x);                // down
    c.rotation.col(0) = x;
    c.rotation.col(1) = y;
    c.rotation.col(2) = z;
    c.position = eye;
    return c;
  }

  template <typename U> Camera<U> cast() const {
    Camera<U> c;
    c.fx = U(fx);
    c.fy = U(fy);
    c.cx = U(cx);
    c.cy = U(cy);
    c.width = width;
    c.height = height;
    c.rotation = rotation.template cast<U>();
    c.position = position.template cast<U>();
    return c;
  }
};

}  // namespace uvsplat
