#pragma once

#include "uvsplat/atlas.hpp"
#include "uvsplat/camera.hpp"
#include "uvsplat/math.hpp"
#include "uvsplat/parallel.hpp"
#include "uvsplat/splat.hpp"
#include "uvsplat/uvmap.hpp"

#include <array>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

namespace uvsplat {

struct RenderSettings {
  double cutoff = 3.0;           // kernel support radius in sigma units
  double screen_sigma = 0.5;     // screen-space low-pass floor, pixels
  bool screen_lowpass = true;
  double min_transmittance = 1e-6;
  int tile_size = 16;
  double near = 0.01;            // hits with camera depth <= near are rejected
  bool keep_weights = false;     // retain per-pixel (splat, weight) lists

  void validate() const {
    if (!(cutoff > 0)) throw DataError("render settings: cutoff must be positive");
    if (tile_size <= 0 || (tile_size & (tile_size - 1)) != 0)
      throw DataError("render settings: tile size must be a positive power of two");
  }
};

/// G-buffer channel layout. Every channel is a blend-weighted sum over the
/// splat intersections of a pixel ray.
enum GChannel : int {
  kAlbedoR = 0,
  kAlbedoG,
  kAlbedoB,
  kRoughness,
  kF0,
  kNormalX,  // shading normal (normal-mapped), camera-facing
  kNormalY,
  kNormalZ,
  kDepth,    // camera z of the intersection
  kAlpha,
  kUvU,
  kUvV,
  kUvSq,     // |uv|^2, for the UV distortion running sums
  kGeoNormalX,  // geometric splat normal, camera-facing
  kGeoNormalY,
  kGeoNormalZ,
  kNumGChannels
};

template <typename T> struct GBuffers {
  int width = 0, height = 0;
  std::vector<T> data;  // pixel-major, kNumGChannels per pixel
  std::vector<std::vector<std::pair<int, T>>> weights;  // only with keep_weights

  static GBuffers zeros(int w, int h) {
    GBuffers g;
    g.width = w;
    g.height = h;
    g.data.assign(static_cast<size_t>(w) * h * kNumGChannels, T(0));
    return g;
  }
  T* pixel(size_t p) { return &data[p * kNumGChannels]; }
  const T* pixel(size_t p) const { return &data[p * kNumGChannels]; }
  T at(int x, int y, int c) const { return data[(static_cast<size_t>(y) * width + x) * kNumGChannels + c]; }
  size_t pixels() const { return static_cast<size_t>(width) * height; }
};

// ---------------------------------------------------------------------------
// Primitive operations.

template <typename T> struct RayHit {
  T s, t, depth;
};

/// Ray vs. the splat plane P(s,t) = p + s*S + t*T. `depth` is the ray
/// parameter. Misses when parallel or behind the origin.
template <typename T>
std::optional<RayHit<T>> intersect(const Vec3<T>& origin, const Vec3<T>& dir, const Vec3<T>& p,
                                   const Vec3<T>& s_vec, const Vec3<T>& t_vec) {
  const Vec3<T> n = s_vec.cross(t_vec).normalized();
  const T den = n.dot(dir);
  if (std::abs(static_cast<double>(den)) < 1e-9) return std::nullopt;
  const T tau = n.dot(p - origin) / den;
  if (!(tau > T(0))) return std::nullopt;
  const Vec3<T> w = origin + tau * dir - p;
  Mat32<T> j;
  j.col(0) = s_vec;
  j.col(1) = t_vec;
  const Vec2<T> st = (j.transpose() * j).inverse() * (j.transpose() * w);
  return RayHit<T>{st[0], st[1], tau};
}

/// exp(-(s^2 + t^2) / 2), zero outside the cutoff radius.
template <typename T> T kernel(T s, T t, T cutoff = T(3)) {
  const T r2 = s * s + t * t;
  return r2 > cutoff * cutoff ? T(0) : std::exp(-r2 / T(2));
}

// ---------------------------------------------------------------------------

template <typename T> struct ProjectedSplat {
  T depth_key = T(0);
  bool culled = false;
  bool center_visible = false;
  Vec2<T> center_px = Vec2<T>::Zero();
  int x0 = 0, y0 = 0, x1 = -1, y1 = -1;  // inclusive pixel bounds
};

/// Everything the adjoint pass needs besides the inputs themselves.
template <typename T> struct RenderTape {
  RenderSettings settings;
  Camera<T> camera;
  std::vector<ProjectedSplat<T>> projected;
  std::vector<int> order;          // splats sorted by (center depth, index)
  std::vector<int> tile_splats;    // concatenated per-tile lists
  std::vector<size_t> tile_begin;  // size tiles + 1
  int tiles_x = 0, tiles_y = 0;
  bool brute = false;
  bool valid = false;
};

namespace detail {

template <typename T> struct Hit {
  int splat;
  T s, t, tau, z, g, alpha, trans, sign;
  T rho3d, rho2d;
  bool screen_branch;
  bool st_clamped;  // texture lookup point pulled back to the cutoff radius
  Vec2<T> st_tex;
  Vec2<T> uv;
  BilinearTaps<T> taps;
  Eigen::Matrix<T, kMaterialChannels, 1> mat;
  Vec2<T> nraw, ndisk;
  Vec3<T> nt;
  std::array<T, kNumGChannels> c;
};

template <typename T>
bool evaluate_hit(const WorldSplats<T>& world, const SplatUVTransform<T>& xf, const TextureAtlas<T>& atlas,
                  const Camera<T>& cam, const RenderSettings& rs, const ProjectedSplat<T>& proj, int idx,
                  const Vec3<T>& dir, const Vec2<T>& pix, Hit<T>& h) {
  const Mat3<T>& r = world.rotation[idx];
  const Vec3<T> n = r.col(2);
  const T den = n.dot(dir);
  if (std::abs(static_cast<double>(den)) < 1e-9) return false;
  const Vec3<T> delta = world.center[idx] - cam.position;
  const T tau = n.dot(delta) / den;
  const T z = tau * dir.dot(cam.forward());
  if (!(static_cast<double>(z) > rs.near)) return false;
  const Vec3<T> w = tau * dir - delta;
  const Vec2<T>& sc = world.scales[idx];
  h.s = r.col(0).dot(w) / sc[0];
  h.t = r.col(1).dot(w) / sc[1];
  h.rho3d = h.s * h.s + h.t * h.t;
  h.rho2d = std::numeric_limits<T>::infinity();
  if (rs.screen_lowpass && proj.center_visible)
    h.rho2d = (pix - proj.center_px).squaredNorm() / T(rs.screen_sigma * rs.screen_sigma);
  h.screen_branch = h.rho2d < h.rho3d;
  const T rho = h.screen_branch ? h.rho2d : h.rho3d;
  if (static_cast<double>(rho) > rs.cutoff * rs.cutoff) return false;
  h.splat = idx;
  h.tau = tau;
  h.z = z;
  h.g = std::exp(-rho / T(2));
  h.alpha = world.opacity[idx] * h.g;
  h.sign = den < T(0) ? T(1) : T(-1);
  // Grazing rays inside the screen-space footprint can meet the splat plane far
  // outside the kernel; texture at the nearest point of the cutoff disk instead.
  h.st_clamped = static_cast<double>(h.rho3d) > rs.cutoff * rs.cutoff;
  h.st_tex = Vec2<T>(h.s, h.t);
  if (h.st_clamped) h.st_tex *= T(rs.cutoff) / std::sqrt(h.rho3d);
  h.uv = map_st_to_uv(xf, static_cast<size_t>(idx), h.st_tex[0], h.st_tex[1]);
  h.taps = bilinear_taps<T>(atlas.resolution, h.uv);
  h.mat = sample_raw<T, kMaterialChannels>(atlas.material, h.taps);
  h.nraw = sample_raw<T, kNormalChannels>(atlas.normal, h.taps);
  h.ndisk = clamp_to_disk(h.nraw);
  h.nt = disk_to_hemisphere(h.nraw);
  for (int c = 0; c < kMaterialChannels; ++c) h.c[kAlbedoR + c] = clamp01(h.mat[c]);
  const Vec3<T> nw = h.sign * (r * h.nt);
  const Vec3<T> ng = h.sign * n;
  for (int k = 0; k < 3; ++k) {
    h.c[kNormalX + k] = nw[k];
    h.c[kGeoNormalX + k] = ng[k];
  }
  h.c[kDepth] = z;
  h.c[kAlpha] = T(1);
  h.c[kUvU] = h.uv[0];
  h.c[kUvV] = h.uv[1];
  h.c[kUvSq] = h.uv.squaredNorm();
  return true;
}

template <typename T>
ProjectedSplat<T> project_splat(const WorldSplats<T>& world, const Camera<T>& cam, const RenderSettings& rs, int idx) {
  ProjectedSplat<T> ps;
  const Vec3<T>& p = world.center[idx];
  const Vec3<T> pc = cam.to_camera(p);
  ps.depth_key = pc[2];
  ps.center_visible = static_cast<double>(pc[2]) > rs.near;
  if (ps.center_visible)
    ps.center_px = Vec2<T>(cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy);
  const T cut = T(rs.cutoff);
  const Vec3<T> a = cut * world.tangent_s(idx), b = cut * world.tangent_t(idx);
  const Vec3<T> corners[4] = {p + a + b, p + a - b, p - a + b, p - a - b};
  int in_front = 0;
  double lo_x = 1e30, lo_y = 1e30, hi_x = -1e30, hi_y = -1e30;
  for (const auto& corner : corners) {
    const Vec3<T> cc = cam.to_camera(corner);
    if (static_cast<double>(cc[2]) <= rs.near) continue;
    ++in_front;
    const double u = static_cast<double>(cam.fx * cc[0] / cc[2] + cam.cx);
    const double v = static_cast<double>(cam.fy * cc[1] / cc[2] + cam.cy);
    lo_x = std::min(lo_x, u);
    hi_x = std::max(hi_x, u);
    lo_y = std::min(lo_y, v);
    hi_y = std::max(hi_y, v);
  }
  if (in_front == 0) {
    ps.culled = true;
    return ps;
  }
  if (in_front < 4) {
    ps.x0 = 0;
    ps.y0 = 0;
    ps.x1 = cam.width - 1;
    ps.y1 = cam.height - 1;
    return ps;
  }
  if (rs.screen_lowpass && ps.center_visible) {
    const double r = rs.cutoff * rs.screen_sigma;
    lo_x = std::min(lo_x, static_cast<double>(ps.center_px[0]) - r);
    hi_x = std::max(hi_x, static_cast<double>(ps.center_px[0]) + r);
    lo_y = std::min(lo_y, static_cast<double>(ps.center_px[1]) - r);
    hi_y = std::max(hi_y, static_cast<double>(ps.center_px[1]) + r);
  }
  const double eps = 1e-2;
  // pixel x is covered when its center x + 0.5 lies in [lo, hi]
  const double fx0 = std::ceil(lo_x - 0.5 - eps), fx1 = std::floor(hi_x - 0.5 + eps);
  const double fy0 = std::ceil(lo_y - 0.5 - eps), fy1 = std::floor(hi_y - 0.5 + eps);
  if (fx1 < 0 || fy1 < 0 || fx0 > cam.width - 1 || fy0 > cam.height - 1) {
    ps.culled = true;
    return ps;
  }
  ps.x0 = static_cast<int>(std::max(0.0, fx0));
  ps.y0 = static_cast<int>(std::max(0.0, fy0));
  ps.x1 = static_cast<int>(std::min<double>(cam.width - 1, fx1));
  ps.y1 = static_cast<int>(std::min<double>(cam.height - 1, fy1));
  return ps;
}

template <typename T>
void accumulate_hit(T* out, const Hit<T>& h, T weight) {
  for (int c = 0; c < kNumGChannels; ++c) out[c] += weight * h.c[c];
}

template <typename T>
void build_order(const std::vector<ProjectedSplat<T>>& proj, std::vector<int>& order) {
  order.resize(proj.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (proj[a].depth_key != proj[b].depth_key) return proj[a].depth_key < proj[b].depth_key;
    return a < b;
  });
}

}  // namespace detail

/// Tile-based forward pass: front-to-back blending of every G-buffer channel.
template <typename T>
GBuffers<T> render(const WorldSplats<T>& world, const SplatUVTransform<T>& xf, const TextureAtlas<T>& atlas,
                   const Camera<T>& cam, const RenderSettings& rs, RenderTape<T>* tape = nullptr,
                   ThreadPool* pool = nullptr) {
  rs.validate();
  ThreadPool& workers = pool ? *pool : default_pool();
  const int n = static_cast<int>(world.size());
  RenderTape<T> local;
  RenderTape<T>& tp = tape ? *tape : local;
  tp = RenderTape<T>{};
  tp.settings = rs;
  tp.camera = cam;
  tp.projected.resize(n);
  workers.parallel_for((n + 255) / 256, [&](size_t chunk) {
    const int end = std::min(n, static_cast<int>(chunk + 1) * 256);
    for (int i = static_cast<int>(chunk) * 256; i < end; ++i) tp.projected[i] = detail::project_splat(world, cam, rs, i);
  });
  detail::build_order(tp.projected, tp.order);

  const int ts = rs.tile_size;
  tp.tiles_x = (cam.width + ts - 1) / ts;
  tp.tiles_y = (cam.height + ts - 1) / ts;
  const size_t num_tiles = static_cast<size_t>(tp.tiles_x) * tp.tiles_y;
  std::vector<size_t> counts(num_tiles + 1, 0);
  for (int idx : tp.order) {
    const auto& ps = tp.projected[idx];
    if (ps.culled) continue;
    for (int ty = ps.y0 / ts; ty <= ps.y1 / ts; ++ty)
      for (int tx = ps.x0 / ts; tx <= ps.x1 / ts; ++tx) ++counts[static_cast<size_t>(ty) * tp.tiles_x + tx];
  }
  tp.tile_begin.assign(num_tiles + 1, 0);
  for (size_t t = 0; t < num_tiles; ++t) tp.tile_begin[t + 1] = tp.tile_begin[t] + counts[t];
  tp.tile_splats.resize(tp.tile_begin[num_tiles]);
  std::vector<size_t> fill(tp.tile_begin.begin(), tp.tile_begin.end() - 1);
  for (int idx : tp.order) {
    const auto& ps = tp.projected[idx];
    if (ps.culled) continue;
    for (int ty = ps.y0 / ts; ty <= ps.y1 / ts; ++ty)
      for (int tx = ps.x0 / ts; tx <= ps.x1 / ts; ++tx) tp.tile_splats[fill[static_cast<size_t>(ty) * tp.tiles_x + tx]++] = idx;
  }

  GBuffers<T> gb = GBuffers<T>::zeros(cam.width, cam.height);
  if (rs.keep_weights) gb.weights.resize(gb.pixels());
  const Vec3<T> fwd = cam.forward();
  (void)fwd;
  workers.parallel_for(num_tiles, [&](size_t tile) {
    const int tx = static_cast<int>(tile % tp.tiles_x), ty = static_cast<int>(tile / tp.tiles_x);
    const size_t b = tp.tile_begin[tile], e = tp.tile_begin[tile + 1];
    detail::Hit<T> h;
    for (int y = ty * ts; y < std::min(cam.height, (ty + 1) * ts); ++y)
      for (int x = tx * ts; x < std::min(cam.width, (tx + 1) * ts); ++x) {
        const size_t pid = static_cast<size_t>(y) * cam.width + x;
        T* out = gb.pixel(pid);
        const Vec3<T> dir = cam.ray_direction(x, y);
        const Vec2<T> pix(T(x) + T(0.5), T(y) + T(0.5));
        T trans = T(1);
        for (size_t k = b; k < e; ++k) {
          const int idx = tp.tile_splats[k];
          const auto& ps = tp.projected[idx];
          if (x < ps.x0 || x > ps.x1 || y < ps.y0 || y > ps.y1) continue;
          if (!detail::evaluate_hit(world, xf, atlas, cam, rs, ps, idx, dir, pix, h)) continue;
          const T w = h.alpha * trans;
          detail::accumulate_hit(out, h, w);
          if (rs.keep_weights) gb.weights[pid].emplace_back(idx, w);
          trans *= T(1) - h.alpha;
          if (static_cast<double>(trans) < rs.min_transmittance) break;
        }
      }
  });
  tp.valid = true;
  return gb;
}

/// Reference pass: every pixel against every splat in global depth order, no
/// tiling, no culling, no early termination.
template <typename T>
GBuffers<T> render_brute(const WorldSplats<T>& world, const SplatUVTransform<T>& xf, const TextureAtlas<T>& atlas,
                         const Camera<T>& cam, const RenderSettings& rs, RenderTape<T>* tape = nullptr) {
  rs.validate();
  const int n = static_cast<int>(world.size());
  RenderTape<T> local;
  RenderTape<T>& tp = tape ? *tape : local;
  tp = RenderTape<T>{};
  tp.settings = rs;
  tp.camera = cam;
  tp.brute = true;
  tp.projected.resize(n);
  for (int i = 0; i < n; ++i) tp.projected[i] = detail::project_splat(world, cam, rs, i);
  detail::build_order(tp.projected, tp.order);
  GBuffers<T> gb = GBuffers<T>::zeros(cam.width, cam.height);
  if (rs.keep_weights) gb.weights.resize(gb.pixels());
  detail::Hit<T> h;
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const size_t pid = static_cast<size_t>(y) * cam.width + x;
      T* out = gb.pixel(pid);
      const Vec3<T> dir = cam.ray_direction(x, y);
      const Vec2<T> pix(T(x) + T(0.5), T(y) + T(0.5));
      T trans = T(1);
      for (int idx : tp.order) {
        if (!detail::evaluate_hit(world, xf, atlas, cam, rs, tp.projected[idx], idx, dir, pix, h)) continue;
        const T w = h.alpha * trans;
        detail::accumulate_hit(out, h, w);
        if (rs.keep_weights) gb.weights[pid].emplace_back(idx, w);
        trans *= T(1) - h.alpha;
      }
    }
  tp.valid = true;
  return gb;
}

/// Gradients produced by render_backward.
template <typename T> struct RenderGrads {
  WorldSplatGrads<T> world;
  SplatUVGrads<T> uv;
  std::vector<T> material;  // same layout as TextureAtlas::material
  std::vector<T> normal;
  std::vector<Vec3<T>> center_grad_unused;

  static RenderGrads zeros(size_t splats, const TextureAtlas<T>& atlas) {
    RenderGrads g;
    g.world = WorldSplatGrads<T>::zeros(splats);
    g.uv = SplatUVGrads<T>::zeros(splats);
    g.material.assign(atlas.material.size(), T(0));
    g.normal.assign(atlas.normal.size(), T(0));
    return g;
  }
};

namespace detail {

template <typename T> struct SplatAdjoint {
  Vec3<T> p = Vec3<T>::Zero();
  Mat3<T> r = Mat3<T>::Zero();
  Vec2<T> scales = Vec2<T>::Zero();
  T opacity = T(0);
  Vec2<T> uv0 = Vec2<T>::Zero();
  Mat2<T> jac = Mat2<T>::Zero();
};

template <typename T> struct TexelAdjoint {
  std::array<int, 4> texel;
  std::array<T, 4> w;
  std::array<T, kMaterialChannels> mat;
  std::array<T, kNormalChannels> nrm;
};

// Reverse of evaluate_hit for one intersection given dL/dc (per channel, already
// multiplied by the blend weight) and dL/dalpha.
template <typename T>
void hit_backward(const WorldSplats<T>& world, const SplatUVTransform<T>& xf, const TextureAtlas<T>& atlas,
                  const Camera<T>& cam, const RenderSettings& rs, const ProjectedSplat<T>& proj, const Vec3<T>& dir,
                  const Vec2<T>& pix, const Hit<T>& h, const std::array<T, kNumGChannels>& gc, T g_alpha,
                  SplatAdjoint<T>& sa, std::vector<TexelAdjoint<T>>& texels) {
  const int idx = h.splat;
  const Mat3<T>& r = world.rotation[idx];
  const Vec2<T>& sc = world.scales[idx];
  Vec2<T> g_uv = Vec2<T>::Zero();

  // Material channels through clamp and bilinear sampling.
  TexelAdjoint<T> ta;
  ta.texel = h.taps.texel;
  ta.w = h.taps.w;
  for (int c = 0; c < kMaterialChannels; ++c) {
    const T g = gc[kAlbedoR + c] * clamp01_grad(h.mat[c]);
    ta.mat[c] = g;
    if (g != T(0)) {
      T du = T(0), dv = T(0);
      for (int k = 0; k < 4; ++k) {
        const T v = atlas.material[static_cast<size_t>(h.taps.texel[k]) * kMaterialChannels + c];
        du += h.taps.dw_du[k] * v;
        dv += h.taps.dw_dv[k] * v;
      }
      g_uv += g * Vec2<T>(du, dv);
    }
  }
  // Shading normal n_w = sign * R * n_t(ndisk(nraw)).
  const Vec3<T> g_nw(gc[kNormalX], gc[kNormalY], gc[kNormalZ]);
  sa.r += h.sign * g_nw * h.nt.transpose();
  const Vec3<T> g_nt = h.sign * (r.transpose() * g_nw);
  Vec2<T> g_nd(g_nt[0], g_nt[1]);
  if (h.nt[2] > T(1e-6)) g_nd -= g_nt[2] * h.ndisk / h.nt[2];
  const Vec2<T> g_nraw = clamp_to_disk_backward(h.nraw, g_nd);
  for (int c = 0; c < kNormalChannels; ++c) {
    ta.nrm[c] = g_nraw[c];
    if (g_nraw[c] != T(0)) {
      T du = T(0), dv = T(0);
      for (int k = 0; k < 4; ++k) {
        const T v = atlas.normal[static_cast<size_t>(h.taps.texel[k]) * kNormalChannels + c];
        du += h.taps.dw_du[k] * v;
        dv += h.taps.dw_dv[k] * v;
      }
      g_uv += g_nraw[c] * Vec2<T>(du, dv);
    }
  }
  texels.push_back(ta);
  sa.r.col(2) += h.sign * Vec3<T>(gc[kGeoNormalX], gc[kGeoNormalY], gc[kGeoNormalZ]);
  g_uv += Vec2<T>(gc[kUvU], gc[kUvV]) + T(2) * gc[kUvSq] * h.uv;
  T g_tau = gc[kDepth] * dir.dot(cam.forward());

  // Opacity and kernel.
  sa.opacity += g_alpha * h.g;
  const T g_g = g_alpha * world.opacity[idx];
  const T g_rho = -g_g * h.g / T(2);
  T g_s = T(0), g_t = T(0);
  if (h.screen_branch) {
    const Vec3<T> pc = cam.to_camera(world.center[idx]);
    const Vec2<T> g_px = -T(2) * (pix - proj.center_px) / T(rs.screen_sigma * rs.screen_sigma) * g_rho;
    const T iz = T(1) / pc[2];
    const Vec3<T> g_pc(g_px[0] * cam.fx * iz, g_px[1] * cam.fy * iz,
                       -(g_px[0] * cam.fx * pc[0] + g_px[1] * cam.fy * pc[1]) * iz * iz);
    sa.p += cam.rotation * g_pc;
  } else {
    g_s += T(2) * h.s * g_rho;
    g_t += T(2) * h.t * g_rho;
  }

  // uv = uv0 + J (s, t)
  sa.uv0 += g_uv;
  sa.jac += g_uv * h.st_tex.transpose();
  Vec2<T> g_st = xf.jac[idx].transpose() * g_uv;
  if (h.st_clamped) {
    const T len = std::sqrt(h.rho3d);
    const Vec2<T> qh = Vec2<T>(h.s, h.t) / len;
    g_st = (T(rs.cutoff) / len) * (g_st - qh * qh.dot(g_st));
  }
  g_s += g_st[0];
  g_t += g_st[1];

  // s = s_hat . w / sigma1, t = t_hat . w / sigma2, w = tau d - delta
  const Vec3<T> delta = world.center[idx] - cam.position;
  const Vec3<T> w = h.tau * dir - delta;
  const Vec3<T> g_w = g_s * r.col(0) / sc[0] + g_t * r.col(1) / sc[1];
  sa.r.col(0) += g_s * w / sc[0];
  sa.r.col(1) += g_t * w / sc[1];
  sa.scales[0] -= g_s * h.s / sc[0];
  sa.scales[1] -= g_t * h.t / sc[1];
  g_tau += g_w.dot(dir);
  Vec3<T> g_delta = -g_w;
  // tau = n . delta / n . d
  const Vec3<T> n = r.col(2);
  const T den = n.dot(dir);
  const T g_num = g_tau / den;
  const T g_den = -g_tau * h.tau / den;
  sa.r.col(2) += g_num * delta + g_den * dir;
  g_delta += g_num * n;
  sa.p += g_delta;
}

template <typename T> struct TileAdjoint {
  std::vector<SplatAdjoint<T>> splats;  // indexed by position in the tile list
  std::vector<TexelAdjoint<T>> texels;
};

}  // namespace detail

/// Exact reverse-mode pass through blending, kernel, intersection, UV map and
/// bilinear sampling. `grad` holds dL/d(G-buffer channel) per pixel.
/// Results are accumulated into `out` in a fixed tile order.
template <typename T>
void render_backward(const WorldSplats<T>& world, const SplatUVTransform<T>& xf, const TextureAtlas<T>& atlas,
                     const RenderTape<T>& tape, const GBuffers<T>& grad, RenderGrads<T>& out,
                     ThreadPool* pool = nullptr) {
  if (!tape.valid) throw Error("render_backward: forward pass was not taped");
  ThreadPool& workers = pool ? *pool : default_pool();
  const auto& cam = tape.camera;
  const auto& rs = tape.settings;
  const int ts = rs.tile_size;

  // Units of work: tiles, or a single full-frame unit for the brute-force tape.
  const size_t units = tape.brute ? 1 : static_cast<size_t>(tape.tiles_x) * tape.tiles_y;
  std::vector<detail::TileAdjoint<T>> tiles(units);
  workers.parallel_for(units, [&](size_t unit) {
    const int* list;
    size_t count;
    int x_lo, x_hi, y_lo, y_hi;
    if (tape.brute) {
      list = tape.order.data();
      count = tape.order.size();
      x_lo = 0, x_hi = cam.width, y_lo = 0, y_hi = cam.height;
    } else {
      list = tape.tile_splats.data() + tape.tile_begin[unit];
      count = tape.tile_begin[unit + 1] - tape.tile_begin[unit];
      const int tx = static_cast<int>(unit % tape.tiles_x), ty = static_cast<int>(unit / tape.tiles_x);
      x_lo = tx * ts, x_hi = std::min(cam.width, (tx + 1) * ts);
      y_lo = ty * ts, y_hi = std::min(cam.height, (ty + 1) * ts);
    }
    auto& ta = tiles[unit];
    ta.splats.assign(count, detail::SplatAdjoint<T>{});
    std::vector<detail::Hit<T>> hits;
    std::vector<size_t> pos;
    detail::Hit<T> h;
    for (int y = y_lo; y < y_hi; ++y)
      for (int x = x_lo; x < x_hi; ++x) {
        const size_t pid = static_cast<size_t>(y) * cam.width + x;
        const T* g = grad.pixel(pid);
        bool any = false;
        for (int c = 0; c < kNumGChannels; ++c) any = any || g[c] != T(0);
        if (!any) continue;
        const Vec3<T> dir = cam.ray_direction(x, y);
        const Vec2<T> pix(T(x) + T(0.5), T(y) + T(0.5));
        hits.clear();
        pos.clear();
        T trans = T(1);
        for (size_t k = 0; k < count; ++k) {
          const int idx = list[k];
          const auto& ps = tape.projected[idx];
          if (!tape.brute && (x < ps.x0 || x > ps.x1 || y < ps.y0 || y > ps.y1)) continue;
          if (!detail::evaluate_hit(world, xf, atlas, cam, rs, ps, idx, dir, pix, h)) continue;
          h.trans = trans;
          hits.push_back(h);
          pos.push_back(k);
          trans *= T(1) - h.alpha;
          if (!tape.brute && static_cast<double>(trans) < rs.min_transmittance) break;
        }
        T suffix = T(0);
        std::array<T, kNumGChannels> gc;
        for (size_t i = hits.size(); i-- > 0;) {
          const auto& hi = hits[i];
          T cg = T(0);
          for (int c = 0; c < kNumGChannels; ++c) cg += hi.c[c] * g[c];
          const T g_alpha = hi.trans * (cg - suffix);
          suffix = hi.alpha * cg + (T(1) - hi.alpha) * suffix;
          const T w = hi.alpha * hi.trans;
          for (int c = 0; c < kNumGChannels; ++c) gc[c] = w * g[c];
          detail::hit_backward(world, xf, atlas, cam, rs, tape.projected[hi.splat], dir, pix, hi, gc, g_alpha,
                               ta.splats[pos[i]], ta.texels);
        }
      }
  });

  for (size_t unit = 0; unit < units; ++unit) {
    const auto& ta = tiles[unit];
    const int* list = tape.brute ? tape.order.data() : tape.tile_splats.data() + tape.tile_begin[unit];
    for (size_t k = 0; k < ta.splats.size(); ++k) {
      const int idx = list[k];
      const auto& sa = ta.splats[k];
      out.world.center[idx] += sa.p;
      out.world.rotation[idx] += sa.r;
      out.world.scales[idx] += sa.scales;
      out.world.opacity[idx] += sa.opacity;
      out.uv.uv0[idx] += sa.uv0;
      out.uv.jac[idx] += sa.jac;
    }
    for (const auto& t : ta.texels)
      for (int k = 0; k < 4; ++k) {
        const size_t base = static_cast<size_t>(t.texel[k]);
        for (int c = 0; c < kMaterialChannels; ++c) out.material[base * kMaterialChannels + c] += t.w[k] * t.mat[c];
        for (int c = 0; c < kNormalChannels; ++c) out.normal[base * kNormalChannels + c] += t.w[k] * t.nrm[c];
      }
  }
}

}  // namespace uvsplat
