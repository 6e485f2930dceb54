#pragma once

#include "fixtures.hpp"

namespace uvsplat::testing {

struct OneTriangle {
  TemplateRig<double> rig;
  DeformedMesh<double> mesh;
  TriangleUVJacobians<double> jac;

  static OneTriangle make(const std::array<Vec3<double>, 3>& v, const std::array<Vec2<double>, 3>& uv) {
    OneTriangle o;
    o.rig.vertices = {v[0], v[1], v[2]};
    o.rig.triangles = {{0, 1, 2}};
    o.rig.uvs = {uv};
    o.rig.joints = {Joint{}};
    o.rig.skin_weights = {1, 1, 1};
    o.mesh = deform(o.rig, RigParams<double>::identity(o.rig));
    o.jac = build_triangle_jacobians(o.mesh, o.rig);
    return o;
  }
  static OneTriangle axis() {
    return make({Vec3<double>(0, 0, 0), Vec3<double>(1, 0, 0), Vec3<double>(0, 1, 0)},
                {Vec2<double>(0, 0), Vec2<double>(1, 0), Vec2<double>(0, 1)});
  }
};

inline SplatSet<double> one_splat(const Vec3<double>& b, double scale, double d = 0, Vec4<double> r = quat_identity<double>()) {
  SplatSet<double> s;
  s.parent = {0};
  s.bary_logits = {b.array().log().matrix()};
  s.rotation = {r};
  s.log_scales = {Vec2<double>(std::log(scale), std::log(scale))};
  s.displacement = {d};
  s.opacity_logit = {0};
  return s;
}

// Random triangle with a UV chart; skews and stretches both charts.
inline OneTriangle random_triangle(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1), t(0, 1);
  for (;;) {
    std::array<Vec3<double>, 3> v;
    for (auto& p : v) p = Vec3<double>(u(rng), u(rng), u(rng));
    std::array<Vec2<double>, 3> uv;
    for (auto& p : uv) p = Vec2<double>(t(rng), t(rng));
    const double area = (v[1] - v[0]).cross(v[2] - v[0]).norm() / 2;
    const Vec2<double> e1 = uv[1] - uv[0], e2 = uv[2] - uv[0];
    if (area > 1e-3 && std::abs(e1[0] * e2[1] - e1[1] * e2[0]) > 1e-3) return OneTriangle::make(v, uv);
  }
}


}  // namespace uvsplat::testing
