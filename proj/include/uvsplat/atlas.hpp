#pragma once

#include "uvsplat/math.hpp"
#include "uvsplat/rig.hpp"

#include <array>
#include <vector>

namespace uvsplat {

inline constexpr int kMaterialChannels = 5;  // albedo rgb, roughness, f0
inline constexpr int kNormalChannels = 2;

/// Initial texel values; also the targets of the UV boundary loss.
template <typename T> struct TextureDefaults {
  static constexpr T albedo = T(0);
  static constexpr T roughness = T(0.5);
  static constexpr T f0 = T(0.05);
  static constexpr T normal = T(0);
};

/// Learnable material and normal textures over the template's UV layout.
///
/// uv_mask follows the loss convention: 0 inside valid triangle regions,
/// 1 in the gaps between islands.
template <typename T> struct TextureAtlas {
  int resolution = 0;
  std::vector<T> material;  // res*res*5, row-major, v selects the row
  std::vector<T> normal;    // res*res*2
  std::vector<uint8_t> uv_mask;

  size_t texels() const { return static_cast<size_t>(resolution) * resolution; }

  static TextureAtlas constant(int res) {
    TextureAtlas a;
    a.resolution = res;
    a.material.resize(a.texels() * kMaterialChannels);
    for (size_t t = 0; t < a.texels(); ++t) {
      T* m = &a.material[t * kMaterialChannels];
      m[0] = m[1] = m[2] = TextureDefaults<T>::albedo;
      m[3] = TextureDefaults<T>::roughness;
      m[4] = TextureDefaults<T>::f0;
    }
    a.normal.assign(a.texels() * kNormalChannels, TextureDefaults<T>::normal);
    a.uv_mask.assign(a.texels(), 0);
    return a;
  }

  template <typename U> TextureAtlas<U> cast() const {
    TextureAtlas<U> o;
    o.resolution = resolution;
    o.material.assign(material.begin(), material.end());
    o.normal.assign(normal.begin(), normal.end());
    o.uv_mask = uv_mask;
    return o;
  }
};

/// Four bilinear taps with clamp-to-edge addressing and their UV derivatives.
template <typename T> struct BilinearTaps {
  std::array<int, 4> texel{};
  std::array<T, 4> w{};
  std::array<T, 4> dw_du{};
  std::array<T, 4> dw_dv{};
};

namespace detail {

template <typename T> void axis_coord(T coord, int res, int& i0, int& i1, T& frac, T& dfrac) {
  T x = coord * T(res) - T(0.5);
  dfrac = T(res);
  if (!(x > T(0))) {  // also catches NaN, which must not reach the index cast
    x = T(0);
    dfrac = T(0);
  } else if (x >= T(res - 1)) {
    x = T(res - 1);
    dfrac = T(0);
  }
  i0 = std::min(static_cast<int>(std::floor(x)), std::max(res - 2, 0));
  i1 = std::min(i0 + 1, res - 1);
  frac = x - T(i0);
}

}  // namespace detail

/// Texel centers sit at (i + 0.5) / res.
template <typename T> BilinearTaps<T> bilinear_taps(int res, const Vec2<T>& uv) {
  BilinearTaps<T> b;
  int x0, x1, y0, y1;
  T fx, fy, dfx, dfy;
  detail::axis_coord(uv[0], res, x0, x1, fx, dfx);
  detail::axis_coord(uv[1], res, y0, y1, fy, dfy);
  b.texel = {y0 * res + x0, y0 * res + x1, y1 * res + x0, y1 * res + x1};
  b.w = {(T(1) - fx) * (T(1) - fy), fx * (T(1) - fy), (T(1) - fx) * fy, fx * fy};
  b.dw_du = {-(T(1) - fy) * dfx, (T(1) - fy) * dfx, -fy * dfx, fy * dfx};
  b.dw_dv = {-(T(1) - fx) * dfy, -fx * dfy, (T(1) - fx) * dfy, fx * dfy};
  return b;
}

/// Interpolated raw channels of an interleaved texture.
template <typename T, int C>
Eigen::Matrix<T, C, 1> sample_raw(const std::vector<T>& tex, const BilinearTaps<T>& taps) {
  Eigen::Matrix<T, C, 1> out = Eigen::Matrix<T, C, 1>::Zero();
  for (int k = 0; k < 4; ++k) {
    const T* p = &tex[static_cast<size_t>(taps.texel[k]) * C];
    for (int c = 0; c < C; ++c) out[c] += taps.w[k] * p[c];
  }
  return out;
}

/// Project onto the closed unit disk.
template <typename T> Vec2<T> clamp_to_disk(const Vec2<T>& n) {
  const T r2 = n.squaredNorm();
  return r2 > T(1) ? Vec2<T>(n / std::sqrt(r2)) : n;
}

/// Tangent-space normal from raw (n_x, n_y). Points on or outside the unit
/// circle decode to z = 0 exactly.
template <typename T> Vec3<T> disk_to_hemisphere(const Vec2<T>& raw) {
  const Vec2<T> d = clamp_to_disk(raw);
  const T z = raw.squaredNorm() >= T(1) ? T(0) : std::sqrt(std::max(T(0), T(1) - d.squaredNorm()));
  return Vec3<T>(d[0], d[1], z);
}

template <typename T> Vec2<T> clamp_to_disk_backward(const Vec2<T>& n, const Vec2<T>& g) {
  return n.squaredNorm() > T(1) ? normalize_backward<T, 2>(n, g) : g;
}

/// Marks texels within ~0.7 texel of any UV triangle as valid (mask 0).
template <typename T> std::vector<uint8_t> build_uv_mask(const TemplateRig<T>& rig, int res) {
  std::vector<uint8_t> mask(static_cast<size_t>(res) * res, 1);
  const double reach = 0.7072 / res;
  for (const auto& c : rig.uvs) {
    const Eigen::Vector2d a = c[0].template cast<double>(), b = c[1].template cast<double>(),
                          d = c[2].template cast<double>();
    const double lo_u = std::min({a[0], b[0], d[0]}) - reach, hi_u = std::max({a[0], b[0], d[0]}) + reach;
    const double lo_v = std::min({a[1], b[1], d[1]}) - reach, hi_v = std::max({a[1], b[1], d[1]}) + reach;
    const int x0 = std::max(0, static_cast<int>(std::floor(lo_u * res))),
              x1 = std::min(res - 1, static_cast<int>(std::floor(hi_u * res)));
    const int y0 = std::max(0, static_cast<int>(std::floor(lo_v * res))),
              y1 = std::min(res - 1, static_cast<int>(std::floor(hi_v * res)));
    const double area = (b - a)[0] * (d - a)[1] - (b - a)[1] * (d - a)[0];
    auto seg_dist = [](const Eigen::Vector2d& p, const Eigen::Vector2d& s0, const Eigen::Vector2d& s1) {
      const Eigen::Vector2d e = s1 - s0;
      const double len2 = e.squaredNorm();
      const double t = len2 > 0 ? std::clamp((p - s0).dot(e) / len2, 0.0, 1.0) : 0.0;
      return (s0 + t * e - p).norm();
    };
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const Eigen::Vector2d p((x + 0.5) / res, (y + 0.5) / res);
        auto edge = [&](const Eigen::Vector2d& s0, const Eigen::Vector2d& s1) {
          return (s1 - s0)[0] * (p - s0)[1] - (s1 - s0)[1] * (p - s0)[0];
        };
        const double e0 = edge(a, b), e1 = edge(b, d), e2 = edge(d, a);
        const bool inside = area != 0 && ((area > 0 && e0 >= 0 && e1 >= 0 && e2 >= 0) ||
                                          (area < 0 && e0 <= 0 && e1 <= 0 && e2 <= 0));
        if (inside || std::min({seg_dist(p, a, b), seg_dist(p, b, d), seg_dist(p, d, a)}) <= reach)
          mask[static_cast<size_t>(y) * res + x] = 0;
      }
  }
  return mask;
}

/// Box-filter downsample of an interleaved C-channel texture by an integer factor.
template <typename T>
std::vector<T> box_downsample(const std::vector<T>& tex, int res, int channels, int new_res) {
  if (new_res <= 0 || res % new_res != 0) throw DataError("box_downsample: size must divide the resolution");
  const int f = res / new_res;
  std::vector<T> out(static_cast<size_t>(new_res) * new_res * channels, T(0));
  const T inv = T(1) / T(f * f);
  for (int y = 0; y < new_res; ++y)
    for (int x = 0; x < new_res; ++x)
      for (int c = 0; c < channels; ++c) {
        T acc = T(0);
        for (int dy = 0; dy < f; ++dy)
          for (int dx = 0; dx < f; ++dx)
            acc += tex[(static_cast<size_t>(y * f + dy) * res + (x * f + dx)) * channels + c];
        out[(static_cast<size_t>(y) * new_res + x) * channels + c] = acc * inv;
      }
  return out;
}

/// Bilinear resample (clamp-to-edge) of an interleaved texture to another resolution.
template <typename T>
std::vector<T> bilinear_resample(const std::vector<T>& tex, int res, int channels, int new_res) {
  std::vector<T> out(static_cast<size_t>(new_res) * new_res * channels);
  for (int y = 0; y < new_res; ++y)
    for (int x = 0; x < new_res; ++x) {
      const auto taps = bilinear_taps<T>(res, Vec2<T>((x + T(0.5)) / new_res, (y + T(0.5)) / new_res));
      for (int c = 0; c < channels; ++c) {
        T acc = T(0);
        for (int k = 0; k < 4; ++k) acc += taps.w[k] * tex[static_cast<size_t>(taps.texel[k]) * channels + c];
        out[(static_cast<size_t>(y) * new_res + x) * channels + c] = acc;
      }
    }
  return out;
}

/// Downscale every channel and the validity mask to new_res.
template <typename T> TextureAtlas<T> downscale_atlas(const TextureAtlas<T>& a, int new_res) {
  TextureAtlas<T> o;
  o.resolution = new_res;
  o.material = box_downsample(a.material, a.resolution, kMaterialChannels, new_res);
  o.normal = box_downsample(a.normal, a.resolution, kNormalChannels, new_res);
  const int f = a.resolution / new_res;
  o.uv_mask.assign(static_cast<size_t>(new_res) * new_res, 1);
  for (int y = 0; y < a.resolution; ++y)
    for (int x = 0; x < a.resolution; ++x)
      if (a.uv_mask[static_cast<size_t>(y) * a.resolution + x] == 0)
        o.uv_mask[static_cast<size_t>(y / f) * new_res + x / f] = 0;
  return o;
}

}  // namespace uvsplat
