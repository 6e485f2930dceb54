#pragma once

#include "fixtures.hpp"

namespace uvsplat::testing {

struct Scene {
  WorldSplats<double> world;
  SplatUVTransform<double> xf;
  TextureAtlas<double> atlas;
  Camera<double> cam;

  void add(const Vec3<double>& p, const Mat3<double>& r, const Vec2<double>& sc, double opacity, const Vec2<double>& uv0,
           const Mat2<double>& jac) {
    world.center.push_back(p);
    world.rotation.push_back(r);
    world.scales.push_back(sc);
    world.opacity.push_back(opacity);
    world.parent.push_back(0);
    xf.uv0.push_back(uv0);
    xf.jac.push_back(jac);
  }
};

// Camera at the origin looking down +z.
inline Camera<double> front_camera(int w, int h, double focal) {
  return Camera<double>::look_at(Vec3<double>::Zero(), Vec3<double>(0, 0, 1), Vec3<double>(0, -1, 0), focal, w, h);
}

inline Scene random_scene(std::mt19937_64& rng, int max_size = 32, int max_splats = 100) {
  std::uniform_real_distribution<double> u(0, 1), c(-1, 1);
  std::uniform_int_distribution<int> sz(4, max_size), ns(1, max_splats);
  Scene s;
  const int w = sz(rng), h = sz(rng);
  const Vec3<double> eye(0.5 * c(rng), 0.5 * c(rng), -3 - u(rng));
  s.cam = Camera<double>::look_at(eye, Vec3<double>(0.2 * c(rng), 0.2 * c(rng), 0), Vec3<double>(0, -1, 0),
                                  (0.8 + u(rng)) * std::max(w, h), w, h);
  s.atlas = random_atlas<double>(16, rng);
  const int n = ns(rng);
  for (int i = 0; i < n; ++i) {
    Mat2<double> j;
    j << 0.05 * c(rng), 0.05 * c(rng), 0.05 * c(rng), 0.05 * c(rng);
    s.add(Vec3<double>(c(rng), c(rng), 0.8 * c(rng)), quat_to_matrix(random_quat<double>(rng, 1.0)),
          Vec2<double>(0.05 + 0.3 * u(rng), 0.05 + 0.3 * u(rng)), 0.05 + 0.9 * u(rng),
          Vec2<double>(0.1 + 0.8 * u(rng), 0.1 + 0.8 * u(rng)), j);
  }
  return s;
}

inline double max_diff(const GBuffers<double>& a, const GBuffers<double>& b) {
  double m = 0;
  for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}


}  // namespace uvsplat::testing
