#pragma once

#include "uvsplat/atlas.hpp"
#include "uvsplat/camera.hpp"
#include "uvsplat/image.hpp"
#include "uvsplat/math.hpp"
#include "uvsplat/raster.hpp"

#include <Eigen/SparseCore>

#include <array>
#include <map>
#include <string>
#include <vector>

namespace uvsplat {

struct LossWeights {
  double l1 = 0.80;
  double ssim = 0.20;
  double mask = 0.10;
  double diff_albedo = 0.25;
  double stat_albedo = 0.0001;
  double expr = 0.01;
  double smooth = 0.01;
  double normal_reg = 0.01;
  double normal_consist = 0.05;
  double uv_dist = 50;
  double boundary = 1;
  double bary = 0.1;
  double lap = 200;
  double flame = 0.001;

  void validate() const {
    for (double w : {l1, ssim, mask, diff_albedo, stat_albedo, expr, smooth, normal_reg, normal_consist, uv_dist,
                     boundary, bary, lap, flame})
      if (!(w >= 0)) throw DataError("loss weights must be non-negative");
  }
};

/// Switches for the four loss groups.
struct LossGroups {
  bool photo = true, pbr = true, uv = true, geom = true;
};

/// Per-term weighted values, keyed by term name.
using LossTerms = std::map<std::string, double>;

inline double sum_terms(const LossTerms& t) {
  double s = 0;
  for (const auto& [k, v] : t) s += v;
  return s;
}

// ---------------------------------------------------------------------------
// SSIM with an 11x11 Gaussian window (sigma 1.5), zero padding.

inline constexpr int kSsimRadius = 5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

inline const std::array<double, 2 * kSsimRadius + 1>& ssim_window() {
  static const auto w = [] {
    std::array<double, 2 * kSsimRadius + 1> k{};
    double s = 0;
    for (int i = -kSsimRadius; i <= kSsimRadius; ++i) s += k[i + kSsimRadius] = std::exp(-i * i / (2 * 1.5 * 1.5));
    for (auto& v : k) v /= s;
    return k;
  }();
  return w;
}

namespace detail {

// Separable Gaussian blur of one channel plane, zero outside the image.
template <typename T> std::vector<T> blur(const std::vector<T>& src, int w, int h) {
  const auto& k = ssim_window();
  std::vector<T> tmp(src.size(), T(0)), out(src.size(), T(0));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      T acc = T(0);
      for (int d = -kSsimRadius; d <= kSsimRadius; ++d) {
        const int xx = x + d;
        if (xx >= 0 && xx < w) acc += T(k[d + kSsimRadius]) * src[static_cast<size_t>(y) * w + xx];
      }
      tmp[static_cast<size_t>(y) * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      T acc = T(0);
      for (int d = -kSsimRadius; d <= kSsimRadius; ++d) {
        const int yy = y + d;
        if (yy >= 0 && yy < h) acc += T(k[d + kSsimRadius]) * tmp[static_cast<size_t>(yy) * w + x];
      }
      out[static_cast<size_t>(y) * w + x] = acc;
    }
  return out;
}

template <typename T> std::vector<T> plane(const Image<T>& img, int c) {
  std::vector<T> p(img.pixels());
  for (size_t i = 0; i < p.size(); ++i) p[i] = img.data[i * img.channels + c];
  return p;
}

}  // namespace detail

/// Per-pixel SSIM averaged over channels (no gradient).
template <typename T> std::vector<T> ssim_map(const Image<T>& a, const Image<T>& b) {
  if (!a.same_shape(b)) throw DataError("ssim: image shapes differ");
  const int w = a.width, h = a.height;
  const size_t n = a.pixels();
  std::vector<T> out(n, T(0));
  for (int c = 0; c < a.channels; ++c) {
    const auto x = detail::plane(a, c), y = detail::plane(b, c);
    std::vector<T> xx(n), yy(n), xy(n);
    for (size_t i = 0; i < n; ++i) {
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = detail::blur(x, w, h), my = detail::blur(y, w, h);
    const auto exx = detail::blur(xx, w, h), eyy = detail::blur(yy, w, h), exy = detail::blur(xy, w, h);
    for (size_t i = 0; i < n; ++i) {
      const T n1 = T(2) * mx[i] * my[i] + T(kSsimC1);
      const T n2 = T(2) * (exy[i] - mx[i] * my[i]) + T(kSsimC2);
      const T d1 = mx[i] * mx[i] + my[i] * my[i] + T(kSsimC1);
      const T d2 = (exx[i] - mx[i] * mx[i]) + (eyy[i] - my[i] * my[i]) + T(kSsimC2);
      out[i] += (n1 * n2) / (d1 * d2) / T(a.channels);
    }
  }
  return out;
}

/// Mean SSIM over pixels and channels. When grad_b is given it receives
/// upstream * dSSIM/db.
template <typename T> T ssim(const Image<T>& a, const Image<T>& b, Image<T>* grad_b = nullptr, T upstream = T(1)) {
  if (!a.same_shape(b)) throw DataError("ssim: image shapes differ");
  const int w = a.width, h = a.height;
  const size_t n = a.pixels();
  const T norm = T(1) / T(n * a.channels);
  if (grad_b) *grad_b = Image<T>(w, h, a.channels);
  T total = T(0);
  for (int c = 0; c < a.channels; ++c) {
    const auto x = detail::plane(a, c), y = detail::plane(b, c);
    std::vector<T> xx(n), yy(n), xy(n);
    for (size_t i = 0; i < n; ++i) {
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = detail::blur(x, w, h), my = detail::blur(y, w, h);
    const auto exx = detail::blur(xx, w, h), eyy = detail::blur(yy, w, h), exy = detail::blur(xy, w, h);
    std::vector<T> g_my(n), g_eyy(n), g_exy(n);
    for (size_t i = 0; i < n; ++i) {
      const T n1 = T(2) * mx[i] * my[i] + T(kSsimC1);
      const T n2 = T(2) * (exy[i] - mx[i] * my[i]) + T(kSsimC2);
      const T d1 = mx[i] * mx[i] + my[i] * my[i] + T(kSsimC1);
      const T d2 = (exx[i] - mx[i] * mx[i]) + (eyy[i] - my[i] * my[i]) + T(kSsimC2);
      const T s = (n1 * n2) / (d1 * d2);
      total += s;
      if (grad_b) {
        const T g = upstream * norm;
        g_my[i] = g * s * (T(2) * mx[i] / n1 - T(2) * mx[i] / n2 - T(2) * my[i] / d1 + T(2) * my[i] / d2);
        g_eyy[i] = -g * s / d2;
        g_exy[i] = g * T(2) * s / n2;
      }
    }
    if (grad_b) {
      const auto bmy = detail::blur(g_my, w, h), beyy = detail::blur(g_eyy, w, h), bexy = detail::blur(g_exy, w, h);
      for (size_t i = 0; i < n; ++i)
        grad_b->data[i * a.channels + c] = bmy[i] + T(2) * y[i] * beyy[i] + x[i] * bexy[i];
    }
  }
  return total * norm;
}

// ---------------------------------------------------------------------------
// Photometric: l1 |I - I^| + ssim (1 - SSIM) + mask |M - M^|, all means.

template <typename T> struct PhotometricGrads {
  Image<T> image;  // dL/dI^
  Image<T> mask;   // dL/dM^
};

template <typename T>
LossTerms photometric(const Image<T>& target, const Image<T>& rendered, const Image<T>& mask,
                      const Image<T>& rendered_mask, const LossWeights& wt, PhotometricGrads<T>* grads = nullptr) {
  if (!target.same_shape(rendered)) throw DataError("photometric: image shapes differ");
  if (!mask.same_shape(rendered_mask) || mask.width != target.width || mask.height != target.height)
    throw DataError("photometric: mask shapes differ");
  LossTerms t;
  const T inv = T(1) / T(target.data.size());
  T l1 = T(0);
  if (grads) grads->image = Image<T>(target.width, target.height, target.channels);
  for (size_t i = 0; i < target.data.size(); ++i) {
    const T d = rendered.data[i] - target.data[i];
    l1 += std::abs(d);
    if (grads) grads->image.data[i] = T(wt.l1) * inv * (d > T(0) ? T(1) : d < T(0) ? T(-1) : T(0));
  }
  t["l1"] = static_cast<double>(T(wt.l1) * l1 * inv);
  Image<T> g_ssim;
  const T s = ssim(target, rendered, grads ? &g_ssim : nullptr, T(-wt.ssim));
  t["ssim"] = static_cast<double>(T(wt.ssim) * (T(1) - s));
  if (grads)
    for (size_t i = 0; i < g_ssim.data.size(); ++i) grads->image.data[i] += g_ssim.data[i];
  const T minv = T(1) / T(mask.data.size());
  T lm = T(0);
  if (grads) grads->mask = Image<T>(mask.width, mask.height, mask.channels);
  for (size_t i = 0; i < mask.data.size(); ++i) {
    const T d = rendered_mask.data[i] - mask.data[i];
    lm += std::abs(d);
    if (grads) grads->mask.data[i] = T(wt.mask) * minv * (d > T(0) ? T(1) : d < T(0) ? T(-1) : T(0));
  }
  t["mask"] = static_cast<double>(T(wt.mask) * lm * minv);
  return t;
}

// ---------------------------------------------------------------------------
// Atlas gradient container shared by the texture-space terms.

template <typename T> struct AtlasGrads {
  std::vector<T> material, normal;

  static AtlasGrads zeros(const TextureAtlas<T>& a) {
    return AtlasGrads{std::vector<T>(a.material.size(), T(0)), std::vector<T>(a.normal.size(), T(0))};
  }
};

namespace detail {
template <typename T> T sgn(T v) { return v > T(0) ? T(1) : v < T(0) ? T(-1) : T(0); }
}  // namespace detail

/// Anisotropic TV of one material channel over pairs of valid neighbouring texels (mean).
template <typename T>
T texture_tv(const TextureAtlas<T>& atlas, int channel, std::vector<T>* grad_material = nullptr, T scale = T(1)) {
  const int res = atlas.resolution;
  auto valid = [&](int x, int y) { return atlas.uv_mask[static_cast<size_t>(y) * res + x] == 0; };
  auto at = [&](int x, int y) { return (static_cast<size_t>(y) * res + x) * kMaterialChannels + channel; };
  size_t pairs = 0;
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x) {
      if (!valid(x, y)) continue;
      if (x + 1 < res && valid(x + 1, y)) ++pairs;
      if (y + 1 < res && valid(x, y + 1)) ++pairs;
    }
  if (pairs == 0) return T(0);
  const T inv = T(1) / T(pairs);
  T tv = T(0);
  auto pair = [&](size_t a, size_t b) {
    const T d = atlas.material[a] - atlas.material[b];
    tv += std::abs(d);
    if (grad_material) {
      const T g = scale * inv * detail::sgn(d);
      (*grad_material)[a] += g;
      (*grad_material)[b] -= g;
    }
  };
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x) {
      if (!valid(x, y)) continue;
      if (x + 1 < res && valid(x + 1, y)) pair(at(x, y), at(x + 1, y));
      if (y + 1 < res && valid(x, y + 1)) pair(at(x, y), at(x, y + 1));
    }
  return tv * inv;
}

/// diff_albedo * mean(M |I_rho - I^_rho|) + smooth * (TV(r) + TV(f0)) + normal_reg * mean|n_xy|.
/// `prior` may be null when the frame has no prior image.
template <typename T>
LossTerms pbr_priors(const Image<T>* prior, const Image<T>& rendered_albedo, const Image<T>& mask,
                     const TextureAtlas<T>& atlas, const LossWeights& wt, Image<T>* grad_albedo = nullptr,
                     AtlasGrads<T>* grad_atlas = nullptr) {
  LossTerms t;
  if (grad_albedo) *grad_albedo = Image<T>(rendered_albedo.width, rendered_albedo.height, rendered_albedo.channels);
  if (prior) {
    if (!prior->same_shape(rendered_albedo)) throw DataError("pbr_priors: prior image does not match the render");
    const T inv = T(1) / T(prior->data.size());
    T acc = T(0);
    for (size_t p = 0; p < prior->pixels(); ++p) {
      const T m = mask.data[p];
      for (int c = 0; c < prior->channels; ++c) {
        const size_t i = p * prior->channels + c;
        const T d = rendered_albedo.data[i] - prior->data[i];
        acc += m * std::abs(d);
        if (grad_albedo) grad_albedo->data[i] = T(wt.diff_albedo) * inv * m * detail::sgn(d);
      }
    }
    t["diff_albedo"] = static_cast<double>(T(wt.diff_albedo) * acc * inv);
  } else {
    t["diff_albedo"] = 0;
  }
  std::vector<T>* gm = grad_atlas ? &grad_atlas->material : nullptr;
  const T tv = texture_tv(atlas, 3, gm, T(wt.smooth)) + texture_tv(atlas, 4, gm, T(wt.smooth));
  t["smooth"] = static_cast<double>(T(wt.smooth) * tv);
  size_t valid = 0;
  for (auto m : atlas.uv_mask) valid += m == 0;
  T nreg = T(0);
  if (valid > 0) {
    const T inv = T(1) / T(valid * kNormalChannels);
    for (size_t i = 0; i < atlas.texels(); ++i) {
      if (atlas.uv_mask[i] != 0) continue;
      for (int c = 0; c < kNormalChannels; ++c) {
        const T v = atlas.normal[i * kNormalChannels + c];
        nreg += std::abs(v) * inv;
        if (grad_atlas) grad_atlas->normal[i * kNormalChannels + c] += T(wt.normal_reg) * inv * detail::sgn(v);
      }
    }
  }
  t["normal_reg"] = static_cast<double>(T(wt.normal_reg) * nreg);
  return t;
}

// ---------------------------------------------------------------------------
// UV-space terms.

/// Sum over ordered pairs i != j of w_i w_j |uv_i - uv_j|^2 from the running
/// sums W = sum w, U = sum w uv, Q = sum w |uv|^2.
template <typename T> T uv_distortion_ray(T w, const Vec2<T>& u, T q) { return T(2) * (w * q - u.squaredNorm()); }

/// Linear statistical albedo model resampled to atlas resolution.
template <typename T> struct StatAlbedoBasis {
  int resolution = 0;
  int components = 0;
  std::vector<T> mean;   // res*res*3
  std::vector<T> basis;  // [k][res*res*3]

  bool empty() const { return components == 0 || mean.empty(); }

  /// Bilinearly upsamples a rig-stored basis to `res`.
  static StatAlbedoBasis from_rig(const TemplateRig<T>& rig, int res) {
    StatAlbedoBasis b;
    if (rig.albedo_components == 0 && rig.albedo_mean.empty()) return b;
    b.resolution = res;
    b.components = rig.albedo_components;
    b.mean = bilinear_resample(rig.albedo_mean, rig.albedo_resolution, 3, res);
    const size_t stride = static_cast<size_t>(rig.albedo_resolution) * rig.albedo_resolution * 3;
    for (int k = 0; k < b.components; ++k) {
      std::vector<T> comp(rig.albedo_basis.begin() + k * stride, rig.albedo_basis.begin() + (k + 1) * stride);
      auto up = bilinear_resample(comp, rig.albedo_resolution, 3, res);
      b.basis.insert(b.basis.end(), up.begin(), up.end());
    }
    return b;
  }

  T reconstruct(size_t i, const std::vector<T>& coeffs) const {
    T v = mean[i];
    const size_t stride = mean.size();
    for (int k = 0; k < components; ++k) v += coeffs[k] * basis[k * stride + i];
    return v;
  }
};

template <typename T> struct UvLossGrads {
  GBuffers<T>* gbuffer = nullptr;  // accumulates into the distortion channels
  AtlasGrads<T>* atlas = nullptr;
  std::vector<T>* stat_coeffs = nullptr;
};

template <typename T>
LossTerms uv_losses(const GBuffers<T>& gb, const TextureAtlas<T>& atlas, const StatAlbedoBasis<T>& stat,
                    const std::vector<T>& stat_coeffs, const LossWeights& wt, UvLossGrads<T> grads = {}) {
  LossTerms t;
  const T pinv = T(1) / T(std::max<size_t>(1, gb.pixels()));
  T dist = T(0);
  for (size_t p = 0; p < gb.pixels(); ++p) {
    const T* g = gb.pixel(p);
    const Vec2<T> u(g[kUvU], g[kUvV]);
    dist += uv_distortion_ray(g[kAlpha], u, g[kUvSq]);
    if (grads.gbuffer) {
      const T s = T(wt.uv_dist) * pinv;
      T* o = grads.gbuffer->pixel(p);
      o[kAlpha] += s * T(2) * g[kUvSq];
      o[kUvSq] += s * T(2) * g[kAlpha];
      o[kUvU] -= s * T(4) * u[0];
      o[kUvV] -= s * T(4) * u[1];
    }
  }
  t["uv_dist"] = static_cast<double>(T(wt.uv_dist) * dist * pinv);

  // Gap texels pulled to their initial values.
  size_t gaps = 0;
  for (auto m : atlas.uv_mask) gaps += m != 0;
  T bnd = T(0);
  if (gaps > 0) {
    const T inv = T(1) / T(gaps * (kMaterialChannels + kNormalChannels));
    const T init[kMaterialChannels] = {TextureDefaults<T>::albedo, TextureDefaults<T>::albedo,
                                       TextureDefaults<T>::albedo, TextureDefaults<T>::roughness,
                                       TextureDefaults<T>::f0};
    for (size_t i = 0; i < atlas.texels(); ++i) {
      if (atlas.uv_mask[i] == 0) continue;
      for (int c = 0; c < kMaterialChannels; ++c) {
        const T d = atlas.material[i * kMaterialChannels + c] - init[c];
        bnd += std::abs(d);
        if (grads.atlas) grads.atlas->material[i * kMaterialChannels + c] += T(wt.boundary) * inv * detail::sgn(d);
      }
      for (int c = 0; c < kNormalChannels; ++c) {
        const T d = atlas.normal[i * kNormalChannels + c] - TextureDefaults<T>::normal;
        bnd += std::abs(d);
        if (grads.atlas) grads.atlas->normal[i * kNormalChannels + c] += T(wt.boundary) * inv * detail::sgn(d);
      }
    }
    bnd *= inv;
  }
  t["boundary"] = static_cast<double>(T(wt.boundary) * bnd);

  T st = T(0);
  if (!stat.empty()) {
    if (stat.resolution != atlas.resolution) throw DataError("uv_losses: albedo basis resolution mismatch");
    size_t valid = 0;
    for (auto m : atlas.uv_mask) valid += m == 0;
    const T inv = T(1) / T(std::max<size_t>(1, valid * 3));
    const size_t stride = stat.mean.size();
    for (size_t i = 0; i < atlas.texels(); ++i) {
      if (atlas.uv_mask[i] != 0) continue;
      for (int c = 0; c < 3; ++c) {
        const size_t j = i * 3 + c;
        const T d = atlas.material[i * kMaterialChannels + c] - stat.reconstruct(j, stat_coeffs);
        st += std::abs(d);
        const T g = T(wt.stat_albedo) * inv * detail::sgn(d);
        if (grads.atlas) grads.atlas->material[i * kMaterialChannels + c] += g;
        if (grads.stat_coeffs)
          for (int k = 0; k < stat.components; ++k) (*grads.stat_coeffs)[k] -= g * stat.basis[k * stride + j];
      }
    }
    st *= inv;
  }
  t["stat_albedo"] = static_cast<double>(T(wt.stat_albedo) * st);
  return t;
}

// ---------------------------------------------------------------------------
// Geometric terms.

inline constexpr double kNormalConsistAlpha = 0.5;

/// alpha - n~ . N per pixel, where n~ is the weight-accumulated splat normal and
/// N the normal of the surface unprojected from expected depth D / alpha.
/// Pixels count when they and their four neighbours have alpha >= 0.5.
/// Returns the unweighted mean over all pixels; grads are scaled by `scale`.
template <typename T>
T normal_consistency(const GBuffers<T>& gb, const Camera<T>& cam, GBuffers<T>* grad = nullptr, T scale = T(1)) {
  const int w = gb.width, h = gb.height;
  auto idx = [&](int x, int y) { return static_cast<size_t>(y) * w + x; };
  auto ok = [&](int x, int y) { return static_cast<double>(gb.pixel(idx(x, y))[kAlpha]) >= kNormalConsistAlpha; };
  auto ray = [&](int x, int y) {
    return Vec3<T>(cam.rotation * Vec3<T>((T(x) + T(0.5) - cam.cx) / cam.fx, (T(y) + T(0.5) - cam.cy) / cam.fy, T(1)));
  };
  auto point = [&](int x, int y) {
    const T* g = gb.pixel(idx(x, y));
    return Vec3<T>(cam.position + (g[kDepth] / g[kAlpha]) * ray(x, y));
  };
  auto point_backward = [&](int x, int y, const Vec3<T>& gp) {
    T* o = grad->pixel(idx(x, y));
    const T* g = gb.pixel(idx(x, y));
    const T gz = gp.dot(ray(x, y));
    o[kDepth] += gz / g[kAlpha];
    o[kAlpha] -= gz * g[kDepth] / (g[kAlpha] * g[kAlpha]);
  };
  const T inv = T(1) / T(std::max<size_t>(1, gb.pixels()));
  T total = T(0);
  for (int y = 1; y + 1 < h; ++y)
    for (int x = 1; x + 1 < w; ++x) {
      if (!ok(x, y) || !ok(x - 1, y) || !ok(x + 1, y) || !ok(x, y - 1) || !ok(x, y + 1)) continue;
      const Vec3<T> dx = point(x + 1, y) - point(x - 1, y);
      const Vec3<T> dy = point(x, y + 1) - point(x, y - 1);
      const Vec3<T> c = dy.cross(dx);  // faces the camera for visible surfaces
      const T cn = c.norm();
      if (!(cn > T(1e-20))) continue;
      const Vec3<T> nrm = c / cn;
      const T* g = gb.pixel(idx(x, y));
      const Vec3<T> acc(g[kGeoNormalX], g[kGeoNormalY], g[kGeoNormalZ]);
      total += g[kAlpha] - acc.dot(nrm);
      if (grad) {
        const T s = scale * inv;
        T* o = grad->pixel(idx(x, y));
        o[kAlpha] += s;
        for (int k = 0; k < 3; ++k) o[kGeoNormalX + k] -= s * nrm[k];
        const Vec3<T> gc = normalize_backward<T, 3>(c, Vec3<T>(-s * acc));
        // c = dy x dx
        const Vec3<T> gdy = dx.cross(gc);
        const Vec3<T> gdx = gc.cross(dy);
        point_backward(x + 1, y, gdx);
        point_backward(x - 1, y, Vec3<T>(-gdx));
        point_backward(x, y + 1, gdy);
        point_backward(x, y - 1, Vec3<T>(-gdy));
      }
    }
  return total * inv;
}

/// Mean over vertices of |L (V - V_ref)|^2; grad w.r.t. V.
template <typename T>
T laplacian_loss(const Eigen::SparseMatrix<T>& lap, const std::vector<Vec3<T>>& v, const std::vector<Vec3<T>>& ref,
                 std::vector<Vec3<T>>* grad = nullptr, T scale = T(1)) {
  const int n = static_cast<int>(v.size());
  Eigen::Matrix<T, Eigen::Dynamic, 3> d(n, 3);
  for (int i = 0; i < n; ++i) d.row(i) = (v[i] - ref[i]).transpose();
  const Eigen::Matrix<T, Eigen::Dynamic, 3> ld = lap * d;
  const T inv = T(1) / T(std::max(1, n));
  if (grad) {
    const Eigen::Matrix<T, Eigen::Dynamic, 3> g = Eigen::SparseMatrix<T>(lap.transpose()) * ld;
    for (int i = 0; i < n; ++i) (*grad)[i] += T(2) * scale * inv * g.row(i).transpose();
  }
  return ld.squaredNorm() * inv;
}

/// Mean squared difference of a flat parameter vector from its reference.
template <typename T>
T l2_delta(const std::vector<T>& v, const std::vector<T>& ref, std::vector<T>* grad = nullptr, T scale = T(1)) {
  if (v.size() != ref.size()) throw DataError("l2_delta: size mismatch");
  if (v.empty()) return T(0);
  const T inv = T(1) / T(v.size());
  T s = T(0);
  for (size_t i = 0; i < v.size(); ++i) {
    const T d = v[i] - ref[i];
    s += d * d;
    if (grad) (*grad)[i] += T(2) * scale * inv * d;
  }
  return s * inv;
}

/// Sum of squared differences (used for expression coefficients).
template <typename T>
T sq_delta(const std::vector<T>& v, const std::vector<T>& ref, std::vector<T>* grad = nullptr, T scale = T(1)) {
  if (v.size() != ref.size()) throw DataError("sq_delta: size mismatch");
  T s = T(0);
  for (size_t i = 0; i < v.size(); ++i) {
    const T d = v[i] - ref[i];
    s += d * d;
    if (grad) (*grad)[i] += T(2) * scale * d;
  }
  return s;
}

/// Mean over splats of |b - (1/3, 1/3, 1/3)|^2; grads w.r.t. the logits.
template <typename T> T bary_loss(const SplatSet<T>& splats, std::vector<Vec3<T>>* grad_logits = nullptr, T scale = T(1)) {
  if (splats.size() == 0) return T(0);
  const T inv = T(1) / T(splats.size());
  T s = T(0);
  for (size_t i = 0; i < splats.size(); ++i) {
    const Vec3<T> b = splats.bary(i);
    const Vec3<T> d = b - Vec3<T>::Constant(T(1) / T(3));
    s += d.squaredNorm();
    if (grad_logits) (*grad_logits)[i] += softmax_backward(b, Vec3<T>(T(2) * scale * inv * d));
  }
  return s * inv;
}

}  // namespace uvsplat
