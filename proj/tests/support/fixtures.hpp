#pragma once

// Scene builders and numeric helpers shared by the unit tests and the acceptance run.

#include "uvsplat/pipeline.hpp"

#include <filesystem>
#include <functional>
#include <random>
#include <sstream>
#include <string>

namespace uvsplat::testing {

inline std::string temp_dir(const std::string& name) {
  namespace fs = std::filesystem;
  const auto d = fs::temp_directory_path() / ("uvsplat_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d.string();
}

/// Central difference of f around x[i].
template <typename F> double central_diff(const F& f, double& x, double h) {
  const double x0 = x;
  x = x0 + h;
  const double fp = f();
  x = x0 - h;
  const double fm = f();
  x = x0;
  return (fp - fm) / (2 * h);
}

struct GradCheck {
  double worst = 0;
  int checked = 0;
  std::string where;

  // Relative error. The floor sits above the rounding noise of a central
  // difference (about 1e-16 |f| / h with |f| ~ 10, h = 1e-6), so gradients
  // below it are compared in absolute terms.
  void add(double analytic, double numeric, const std::string& what, double floor = 1e-5) {
    const double err = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
    ++checked;
    if (err > worst) {
      worst = err;
      std::ostringstream os;
      os << what << " analytic " << analytic << " numeric " << numeric;
      where = os.str();
    }
  }
};

/// An arbitrary rotation close to identity.
template <typename T> Vec4<T> random_quat(std::mt19937_64& rng, double spread) {
  std::normal_distribution<double> n(0.0, spread);
  Vec4<T> q(T(1), T(n(rng)), T(n(rng)), T(n(rng)));
  return q.normalized();
}

/// A small curved patch of `cols` x `rows` quads facing +z, one blendshape, root
/// joint plus a child joint that drives the upper half.
template <typename T> TemplateRig<T> patch_rig(int cols, int rows, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> jitter(-0.04, 0.04);
  TemplateRig<T> rig;
  for (int y = 0; y <= rows; ++y)
    for (int x = 0; x <= cols; ++x) {
      const double u = double(x) / cols, v = double(y) / rows;
      const double px = -0.5 + u + jitter(rng), py = -0.5 + v + jitter(rng);
      rig.vertices.push_back(Vec3<T>(T(px), T(py), T(0.15 * (px * px + py * py) + jitter(rng))));
    }
  auto id = [&](int x, int y) { return y * (cols + 1) + x; };
  auto uv = [&](int x, int y) { return Vec2<T>(T(0.05 + 0.9 * x / cols), T(0.05 + 0.9 * y / rows)); };
  for (int y = 0; y < rows; ++y)
    for (int x = 0; x < cols; ++x) {
      rig.triangles.push_back({id(x, y), id(x + 1, y), id(x + 1, y + 1)});
      rig.uvs.push_back({uv(x, y), uv(x + 1, y), uv(x + 1, y + 1)});
      rig.triangles.push_back({id(x, y), id(x + 1, y + 1), id(x, y + 1)});
      rig.uvs.push_back({uv(x, y), uv(x + 1, y + 1), uv(x, y + 1)});
    }
  const int nv = rig.num_vertices();
  rig.num_blendshapes = 1;
  std::uniform_real_distribution<double> b(-0.05, 0.05);
  for (int v = 0; v < nv * 3; ++v) rig.blendshapes.push_back(T(b(rng)));
  Joint root;
  root.name = "root";
  Joint child;
  child.name = "child";
  child.parent = 0;
  child.rest_translation = Vec3<double>(0, 0.1, 0);
  rig.joints = {root, child};
  for (int v = 0; v < nv; ++v) {
    const double w = std::clamp(0.5 + 2.0 * static_cast<double>(rig.vertices[v][1]), 0.0, 1.0);
    rig.skin_weights.push_back(T(1 - w));
    rig.skin_weights.push_back(T(w));
  }
  return rig;
}

template <typename T> TextureAtlas<T> random_atlas(int res, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> m(0.15, 0.85), n(-0.3, 0.3);
  TextureAtlas<T> a = TextureAtlas<T>::constant(res);
  for (auto& v : a.material) v = T(m(rng));
  for (auto& v : a.normal) v = T(n(rng));
  return a;
}

template <typename T> EnvironmentLight<T> random_env(std::mt19937_64& rng, int size = kEnvSize) {
  std::uniform_real_distribution<double> r(0.2, 1.5);
  CubeMap<T> c = CubeMap<T>::filled(size);
  for (auto& v : c.data) v = T(r(rng));
  return EnvironmentLight<T>::from_radiance(c);
}

/// Up to ~10 splats on a 2x1-quad patch, seen by an 8x8 camera.
template <typename T> struct MicroScene {
  Model<T> model;
  Camera<T> camera;
  RigParams<T> params;
  PipelineContext<T> ctx;

  static MicroScene make(uint64_t seed, int size = 8, bool posed = true) {
    std::mt19937_64 rng(seed);
    MicroScene s;
    const auto rig = patch_rig<T>(2, 1, rng);
    std::vector<RigParams<T>> fp{RigParams<T>::identity(rig)};
    s.model = Model<T>::initial(rig, fp, 8, 2, seed, 0.7);
    std::normal_distribution<double> n01(0.0, 1.0);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto& sp = s.model.splats;
    for (size_t i = 0; i < sp.size(); ++i) {
      for (int k = 0; k < 3; ++k) sp.bary_logits[i][k] = T(0.5 * n01(rng));
      sp.rotation[i] = random_quat<T>(rng, 0.25);
      sp.log_scales[i] = Vec2<T>(T(std::log(0.18 + 0.12 * u01(rng))), T(std::log(0.18 + 0.12 * u01(rng))));
      sp.displacement[i] = T(0.03 * n01(rng));
      sp.opacity_logit[i] = T(0.8 * n01(rng));
    }
    s.model.atlas = random_atlas<T>(8, rng);
    s.model.atlas.uv_mask = build_uv_mask(rig, 8);
    s.model.env = random_env<T>(rng);
    s.params = RigParams<T>::identity(rig);
    if (posed) {
      s.params.expression[0] = T(0.7);
      s.params.joint_rotations[1] = random_quat<T>(rng, 0.1);
      s.params.root_translation = Vec3<T>(T(0.02), T(-0.01), T(0.03));
    }
    s.model.expressions = {s.params.expression};
    s.model.expressions_init = s.model.expressions;
    const Vec3<T> eye(T(0.3 * n01(rng)), T(0.3 * n01(rng)), T(2.2));
    s.camera = Camera<T>::look_at(eye, Vec3<T>(T(0), T(0), T(0.05)), Vec3<T>(T(0), T(1), T(0)), T(size * 1.6), size,
                                  size);
    TrainConfig cfg;
    s.ctx = PipelineContext<T>::make(cfg, rig, 8, bake_brdf_lut(16, 256), nullptr);
    return s;
  }
};

}  // namespace uvsplat::testing
