#pragma once

#include "fixtures.hpp"

namespace uvsplat::testing {

// Smooth random lighting: an ambient term plus a few broad colored lobes.
inline CubeMap<double> smooth_env(std::mt19937_64& rng, int size = kEnvSize) {
  std::uniform_real_distribution<double> u(0, 1);
  std::normal_distribution<double> n(0, 1);
  struct Lobe {
    Eigen::Vector3d dir, color;
    double power;
  };
  std::vector<Lobe> lobes;
  for (int k = 0; k < 4; ++k)
    lobes.push_back({Eigen::Vector3d(n(rng), n(rng), n(rng)).normalized(),
                     Eigen::Vector3d(u(rng), u(rng), u(rng)) * 2.0, 1 + 5 * u(rng)});
  const Eigen::Vector3d ambient(0.2 + 0.3 * u(rng), 0.2 + 0.3 * u(rng), 0.2 + 0.3 * u(rng));
  CubeMap<double> c = CubeMap<double>::filled(size);
  std::vector<Eigen::Vector3d> dirs;
  std::vector<double> omega;
  cube_texel_geometry(size, dirs, omega);
  for (size_t i = 0; i < dirs.size(); ++i) {
    Eigen::Vector3d v = ambient;
    for (const auto& l : lobes) v += l.color * std::pow(std::max(0.0, dirs[i].dot(l.dir)), l.power);
    for (int k = 0; k < 3; ++k) c.texel(i)[k] = v[k];
  }
  return c;
}

inline Eigen::Vector3d random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0, 1);
  return Eigen::Vector3d(n(rng), n(rng), n(rng)).normalized();
}

// View direction (towards the viewer) at least `min_cos` above the surface.
inline Eigen::Vector3d random_view(std::mt19937_64& rng, const Eigen::Vector3d& n, double min_cos) {
  for (;;) {
    const Eigen::Vector3d w = random_unit(rng);
    if (w.dot(n) >= min_cos) return w;
  }
}


}  // namespace uvsplat::testing
