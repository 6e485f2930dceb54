#pragma once

#include "uvsplat/config.hpp"
#include "uvsplat/io/checkpoint.hpp"
#include "uvsplat/io/dataset.hpp"
#include "uvsplat/io/image_io.hpp"
#include "uvsplat/pipeline.hpp"

#include <cstdio>
#include <filesystem>
#include <random>
#include <string>

namespace uvsplat {

// Synthetic closed-loop scenes: a head-sized ellipsoid rig with two UV islands,
// procedural textures and lighting, and an orbiting camera.

/// Ellipsoid UV sphere: `lon` longitudes, `rings` interior latitude rings, two poles.
/// UV islands split the front (|phi| <= 90 deg, phi = atan2(x, z)) from the back.
inline TemplateRig<double> ellipsoid_rig(int lon = 16, int rings = 8, const Eigen::Vector3d& radii = {0.8, 1.0, 0.9}) {
  if (lon < 4 || lon % 4 != 0 || rings < 2) throw DataError("ellipsoid_rig: lon must be a multiple of 4, rings >= 2");
  TemplateRig<double> rig;
  const double pi = 3.14159265358979323846;
  auto pos = [&](double theta, double phi) {
    return Vec3<double>(radii[0] * std::sin(theta) * std::sin(phi), radii[1] * std::cos(theta),
                        radii[2] * std::sin(theta) * std::cos(phi));
  };
  rig.vertices.push_back(pos(0, 0));  // top pole
  for (int r = 1; r <= rings; ++r)
    for (int j = 0; j < lon; ++j) rig.vertices.push_back(pos(pi * r / (rings + 1), 2 * pi * j / lon));
  rig.vertices.push_back(pos(pi, 0));  // bottom pole
  const int bottom = static_cast<int>(rig.vertices.size()) - 1;
  auto ring_vertex = [&](int r, int j) { return 1 + (r - 1) * lon + ((j % lon) + lon) % lon; };

  // Longitude index j sits at phi = 2 pi j / lon. Front island: j in [-lon/4, lon/4].
  auto island_u = [&](bool front, double j) {
    if (front) return 0.03 + 0.44 * (j + lon / 4.0) / (lon / 2.0);
    return 0.53 + 0.44 * (j - lon / 4.0) / (lon / 2.0);
  };
  auto v_of = [&](double ring) { return 0.03 + 0.94 * ring / (rings + 1); };
  auto add = [&](std::array<int, 3> t, std::array<Vec2<double>, 3> uv) {
    rig.triangles.push_back(t);
    rig.uvs.push_back(uv);
  };
  for (int s = 0; s < lon; ++s) {
    // Segment [s, s+1] in "unwrapped" longitude relative to its island.
    const bool front = s >= 3 * lon / 4 || s < lon / 4;
    const double j0 = front ? (s >= 3 * lon / 4 ? s - lon : s) : s;
    const double j1 = j0 + 1;
    const double ua = island_u(front, j0), ub = island_u(front, j1), um = 0.5 * (ua + ub);
    // Outward winding: (a, b, c) with counter-clockwise order seen from outside.
    add({0, ring_vertex(1, s), ring_vertex(1, s + 1)},
        {Vec2<double>(um, v_of(0)), Vec2<double>(ua, v_of(1)), Vec2<double>(ub, v_of(1))});
    for (int r = 1; r < rings; ++r) {
      const int a = ring_vertex(r, s), b = ring_vertex(r, s + 1), c = ring_vertex(r + 1, s), d = ring_vertex(r + 1, s + 1);
      add({a, c, d}, {Vec2<double>(ua, v_of(r)), Vec2<double>(ua, v_of(r + 1)), Vec2<double>(ub, v_of(r + 1))});
      add({a, d, b}, {Vec2<double>(ua, v_of(r)), Vec2<double>(ub, v_of(r + 1)), Vec2<double>(ub, v_of(r))});
    }
    add({ring_vertex(rings, s), bottom, ring_vertex(rings, s + 1)},
        {Vec2<double>(ua, v_of(rings)), Vec2<double>(um, v_of(rings + 1)), Vec2<double>(ub, v_of(rings))});
  }
  // Make winding outward-facing: flip triangles whose normal points inward.
  for (size_t f = 0; f < rig.triangles.size(); ++f) {
    auto& t = rig.triangles[f];
    const Vec3<double> c = (rig.vertices[t[0]] + rig.vertices[t[1]] + rig.vertices[t[2]]) / 3.0;
    const Vec3<double> n = (rig.vertices[t[1]] - rig.vertices[t[0]]).cross(rig.vertices[t[2]] - rig.vertices[t[0]]);
    if (n.dot(c) < 0) {
      std::swap(t[1], t[2]);
      std::swap(rig.uvs[f][1], rig.uvs[f][2]);
    }
  }

  // Blendshapes: jaw drop, smile, brow raise.
  const size_t nv = rig.vertices.size();
  rig.num_blendshapes = 3;
  rig.blendshapes.assign(3 * nv * 3, 0.0);
  for (size_t v = 0; v < nv; ++v) {
    const Vec3<double>& p = rig.vertices[v];
    const double front = std::max(0.0, p.z() / radii[2]);
    const double lower = std::max(0.0, -p.y() / radii[1]);
    const double upper = std::max(0.0, p.y() / radii[1] - 0.2);
    const Vec3<double> jaw(0, -0.08 * lower * lower, 0.02 * lower * front);
    const double mouth = std::exp(-std::pow((p.y() + 0.45) / 0.2, 2)) * front;
    const Vec3<double> smile(0.06 * mouth * p.x() / radii[0], 0.03 * mouth * std::abs(p.x()) / radii[0], 0);
    const Vec3<double> brow(0, 0.05 * upper * front, 0.01 * upper * front);
    const Vec3<double> shapes[3] = {jaw, smile, brow};
    for (int k = 0; k < 3; ++k)
      for (int d = 0; d < 3; ++d) rig.blendshapes[(k * nv + v) * 3 + d] = shapes[k][d];
  }

  // Root and a jaw joint; the jaw influences the lower front.
  Joint root;
  root.name = "root";
  Joint jaw;
  jaw.parent = 0;
  jaw.name = "jaw";
  jaw.rest_translation = Vec3<double>(0, -0.15, -0.2);
  rig.joints = {root, jaw};
  rig.skin_weights.assign(nv * 2, 0.0);
  for (size_t v = 0; v < nv; ++v) {
    const Vec3<double>& p = rig.vertices[v];
    const double w = std::clamp((-p.y() / radii[1] - 0.25) / 0.35, 0.0, 1.0) * std::clamp(p.z() / radii[2] + 0.3, 0.0, 1.0);
    rig.skin_weights[v * 2] = 1 - w;
    rig.skin_weights[v * 2 + 1] = w;
  }
  rig.validate();
  return rig;
}

namespace detail {

// Multi-octave value noise on [0,1]^2, roughly in [-1, 1].
class ValueNoise {
 public:
  ValueNoise(uint64_t seed, int min_cells, int max_cells, double falloff) : falloff_(falloff) {
    std::mt19937_64 rng(seed);
    for (int c = min_cells; c <= max_cells; c *= 2) {
      std::vector<double> g(static_cast<size_t>(c + 1) * (c + 1));
      for (auto& v : g) v = 2 * uniform01(rng) - 1;
      cells_.push_back(c);
      grids_.push_back(std::move(g));
    }
  }
  double operator()(double u, double v) const {
    double sum = 0, norm = 0;
    for (size_t o = 0; o < cells_.size(); ++o) {
      const int c = cells_[o];
      const double amp = std::pow(double(cells_[0]) / c, falloff_);
      const double x = std::clamp(u, 0.0, 1.0) * c, y = std::clamp(v, 0.0, 1.0) * c;
      const int x0 = std::min(static_cast<int>(x), c - 1), y0 = std::min(static_cast<int>(y), c - 1);
      double fx = x - x0, fy = y - y0;
      fx = fx * fx * (3 - 2 * fx);
      fy = fy * fy * (3 - 2 * fy);
      const auto& g = grids_[o];
      auto at = [&](int i, int j) { return g[static_cast<size_t>(j) * (c + 1) + i]; };
      const double val = (1 - fy) * ((1 - fx) * at(x0, y0) + fx * at(x0 + 1, y0)) +
                         fy * ((1 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1));
      sum += amp * val;
      norm += amp;
    }
    return sum / norm;
  }

 private:
  double falloff_;
  std::vector<int> cells_;
  std::vector<std::vector<double>> grids_;
};

}  // namespace detail

/// Ground-truth material textures: smooth skin tone, features and fine multi-scale detail.
inline TextureAtlas<double> synth_textures(const TemplateRig<double>& rig, int res, uint64_t seed) {
  auto atlas = TextureAtlas<double>::constant(res);
  atlas.uv_mask = build_uv_mask(rig, res);
  const detail::ValueNoise coarse(seed ^ 0xA1, 4, 32, 0.6), fine(seed ^ 0xB2, 16, res / 2, 0.35),
      rough(seed ^ 0xC3, 4, 128, 0.5), spec(seed ^ 0xD4, 8, 64, 0.5);
  struct Blob {
    double u, v, r;
    Eigen::Vector3d tint;
  };
  // Features on the front island (u in [0.03, 0.47]).
  const Blob blobs[] = {{0.17, 0.38, 0.035, {0.05, 0.04, 0.04}}, {0.33, 0.38, 0.035, {0.05, 0.04, 0.04}},
                        {0.25, 0.70, 0.05, {0.45, 0.12, 0.12}},  {0.17, 0.30, 0.03, {0.12, 0.08, 0.06}},
                        {0.33, 0.30, 0.03, {0.12, 0.08, 0.06}},  {0.75, 0.25, 0.12, {0.10, 0.07, 0.05}}};
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x) {
      const size_t t = static_cast<size_t>(y) * res + x;
      if (atlas.uv_mask[t]) continue;
      const double u = (x + 0.5) / res, v = (y + 0.5) / res;
      Eigen::Vector3d a(0.55, 0.36, 0.28);
      a *= 1 + 0.25 * coarse(u, v);
      a += Eigen::Vector3d(0.10, 0.08, 0.07) * fine(u, v);
      for (const auto& b : blobs) {
        const double w = std::exp(-((u - b.u) * (u - b.u) + (v - b.v) * (v - b.v)) / (2 * b.r * b.r));
        a = (1 - w) * a + w * b.tint;
      }
      double* m = &atlas.material[t * kMaterialChannels];
      for (int c = 0; c < 3; ++c) m[c] = std::clamp(a[c], 0.02, 0.95);
      m[3] = std::clamp(0.5 + 0.2 * rough(u, v), 0.2, 0.8);
      m[4] = std::clamp(0.045 + 0.015 * spec(u, v), 0.02, 0.08);
    }
  return atlas;
}

/// Sky gradient plus a warm key light and a cool fill, as linear radiance.
inline CubeMap<double> synth_environment(int size = kEnvSize) {
  auto cube = CubeMap<double>::filled(size);
  const Eigen::Vector3d key_dir = Eigen::Vector3d(0.5, 0.6, 0.6).normalized();
  const Eigen::Vector3d fill_dir = Eigen::Vector3d(-0.7, 0.1, 0.5).normalized();
  for (int f = 0; f < 6; ++f)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const Eigen::Vector3d d = cube_direction<double>(f, (x + 0.5) / size, (y + 0.5) / size).normalized();
        const double up = 0.5 * (d.y() + 1);
        Eigen::Vector3d c = (1 - up) * Eigen::Vector3d(0.08, 0.07, 0.06) + up * Eigen::Vector3d(0.35, 0.42, 0.55);
        c += Eigen::Vector3d(4.0, 3.6, 3.0) * std::exp((d.dot(key_dir) - 1) / 0.02);
        c += Eigen::Vector3d(0.8, 0.9, 1.2) * std::exp((d.dot(fill_dir) - 1) / 0.08);
        for (int k = 0; k < 3; ++k) cube.data[((static_cast<size_t>(f) * size + y) * size + x) * 3 + k] = c[k];
      }
  return cube;
}

/// Low-resolution statistical albedo basis: the downsampled truth as mean plus smooth components.
inline void attach_albedo_basis(TemplateRig<double>& rig, const TextureAtlas<double>& truth, int res, int components,
                                uint64_t seed) {
  rig.albedo_resolution = res;
  rig.albedo_components = components;
  std::vector<double> alb(truth.texels() * 3);
  for (size_t t = 0; t < truth.texels(); ++t)
    for (int c = 0; c < 3; ++c) alb[t * 3 + c] = truth.material[t * kMaterialChannels + c];
  rig.albedo_mean = box_downsample(alb, truth.resolution, 3, res);
  rig.albedo_basis.clear();
  for (int k = 0; k < components; ++k) {
    const detail::ValueNoise n(seed + 101 * (k + 1), 2, 8, 0.5);
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x)
        for (int c = 0; c < 3; ++c)
          rig.albedo_basis.push_back(0.05 * n((x + 0.5) / res + 0.1 * c, (y + 0.5) / res));
  }
}

struct SynthOptions {
  std::string out;
  std::string rig_path;  // empty: built-in ellipsoid rig
  std::string env_path;  // empty: procedural env; otherwise an equirect .pfm
  int frames = 64;
  int image_size = 128;
  double focal = 160;
  double distance = 3.2;
  int atlas_resolution = 1024;
  int splats_per_triangle = 2;
  int prior_every = 3;
  uint64_t seed = 0;
  int threads = 0;
};

/// Per-frame camera and rig parameters of the orbit.
inline void synth_frame_setup(const SynthOptions& o, const TemplateRig<double>& rig, int i, Camera<double>& cam,
                              RigParams<double>& params) {
  const double pi = 3.14159265358979323846;
  const double t = o.frames > 1 ? double(i) / (o.frames - 1) : 0.0;
  const double az = (-70 + 140 * t) * pi / 180;
  const double el = 15 * std::sin(2 * pi * t * 1.5) * pi / 180;
  const Vec3<double> eye(o.distance * std::cos(el) * std::sin(az), o.distance * std::sin(el),
                         o.distance * std::cos(el) * std::cos(az));
  cam = Camera<double>::look_at(eye, Vec3<double>::Zero(), Vec3<double>(0, 1, 0), o.focal, o.image_size, o.image_size);
  params = RigParams<double>::identity(rig);
  for (int k = 0; k < rig.num_blendshapes; ++k) params.expression[k] = 0.6 * std::sin(0.37 * i + 1.3 * k);
  if (rig.joints.size() > 1) {
    const double open = 0.12 * 0.5 * (1 + std::sin(0.23 * i));
    params.joint_rotations[1] = quat_from_axis_angle<double>(Vec3<double>(1, 0, 0), open);
  }
}

/// Writes a ground-truth dataset to `o.out` and returns the truth checkpoint path.
inline std::string synthesize(const SynthOptions& o) {
  namespace fs = std::filesystem;
  if (o.frames < 1 || o.image_size < 8) throw DataError("synth: need at least one frame and 8x8 images");
  TemplateRig<double> rig = o.rig_path.empty() ? ellipsoid_rig() : load_rig<double>(o.rig_path);
  const auto truth_tex = synth_textures(rig, o.atlas_resolution, o.seed);
  if (rig.albedo_components == 0) attach_albedo_basis(rig, truth_tex, std::min(64, o.atlas_resolution), 8, o.seed);

  CubeMap<double> env = synth_environment();
  if (!o.env_path.empty()) env = equirect_to_cubemap(io::load_image(o.env_path, false).cast<double>(), kEnvSize);

  std::vector<Camera<double>> cams(o.frames);
  std::vector<RigParams<double>> params(o.frames);
  for (int i = 0; i < o.frames; ++i) synth_frame_setup(o, rig, i, cams[i], params[i]);

  const auto rig_f = rig.cast<float>();
  std::vector<RigParams<float>> params_f;
  for (const auto& p : params) params_f.push_back(io::cast_params<float>(p));
  Model<float> truth = Model<float>::initial(rig_f, params_f, o.atlas_resolution, o.splats_per_triangle, o.seed, 1.0);
  truth.atlas = truth_tex.cast<float>();
  truth.env = EnvironmentLight<float>::from_radiance(env.cast<float>());

  ThreadPool pool(static_cast<unsigned>(std::max(0, o.threads)));
  TrainConfig cfg;
  auto ctx = PipelineContext<float>::make(cfg, truth.rig, truth.atlas.resolution, bake_brdf_lut(), &pool);
  const EnvChain<float> chain = prefilter_env(truth.env.radiance());

  fs::create_directories(o.out);
  io::SceneDataset ds;
  ds.root = o.out;
  ds.rig = "rig.uvsr";
  ds.width = ds.height = o.image_size;
  save_rig(ds.path(ds.rig), rig_f);
  for (int i = 0; i < o.frames; ++i) {
    const auto s = forward(truth, cams[i].cast<float>(), truth.frame_params(params_f[i], i), ctx, &chain);
    char name[32];
    std::snprintf(name, sizeof(name), "%04d.pfm", i);
    io::FrameEntry e;
    e.image = std::string("images/") + name;
    e.mask = std::string("masks/") + name;
    io::save_image(ds.path(e.image), s.linear);
    io::save_image(ds.path(e.mask), gbuffer_image(s.gbuffers, kAlpha, 1));
    if (o.prior_every > 0 && i % o.prior_every == 0) {
      e.prior = std::string("priors/") + name;
      io::save_image(ds.path(e.prior), gbuffer_image(s.gbuffers, kAlbedoR, 3));
    }
    e.camera = cams[i];
    e.params = params[i];
    ds.frames.push_back(e);
  }
  io::save_dataset(ds);

  io::Checkpoint<float> ck;
  ck.model = truth;
  ck.cameras = cams;
  ck.params = params;
  ck.densify.reset(truth.splats.size());
  const std::string truth_path = ds.path("truth.ckpt");
  io::save_checkpoint(truth_path, ck);
  return truth_path;
}

}  // namespace uvsplat
