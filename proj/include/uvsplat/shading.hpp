#pragma once

#include "uvsplat/atlas.hpp"
#include "uvsplat/camera.hpp"
#include "uvsplat/image.hpp"
#include "uvsplat/math.hpp"
#include "uvsplat/parallel.hpp"
#include "uvsplat/raster.hpp"

#include <Eigen/SparseCore>

#include <array>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <random>
#include <vector>

namespace uvsplat {

inline constexpr int kCubeFaces = 6;
inline constexpr int kEnvSize = 32;
inline constexpr int kIrradianceSize = 8;
inline constexpr double kShadeMinAlpha = 1e-6;
inline constexpr double kMinNoV = 1e-4;

// ---------------------------------------------------------------------------
// Normals.

/// (n_x, n_y) -> (n_x, n_y, sqrt(1 - n_x^2 - n_y^2)), clamping to the unit disk.
template <typename T> Vec3<T> decode_normal(T nx, T ny) { return disk_to_hemisphere(Vec2<T>(nx, ny)); }

template <typename T> Vec2<T> encode_normal(const Vec3<T>& n) { return Vec2<T>(n[0], n[1]); }

template <typename T> Vec3<T> transform_normal(const Mat3<T>& r, const Vec3<T>& nt) { return r * nt; }

// ---------------------------------------------------------------------------
// Cubemaps. Faces +X, -X, +Y, -Y, +Z, -Z; (u, v) in [0,1]^2 with v selecting rows.

template <typename T> struct CubeMap {
  int size = 0;
  std::vector<T> data;  // ((face * size + y) * size + x) * 3 + c

  static CubeMap filled(int s, T value = T(0)) {
    CubeMap c;
    c.size = s;
    c.data.assign(static_cast<size_t>(kCubeFaces) * s * s * 3, value);
    return c;
  }
  size_t texels() const { return static_cast<size_t>(kCubeFaces) * size * size; }
  T* texel(size_t i) { return &data[i * 3]; }
  const T* texel(size_t i) const { return &data[i * 3]; }

  template <typename U> CubeMap<U> cast() const {
    CubeMap<U> o;
    o.size = size;
    o.data.assign(data.begin(), data.end());
    return o;
  }
};

namespace detail {

struct FaceAxes {
  int major, sc_axis, tc_axis;
  double major_sign, sc_sign, tc_sign;
};

inline const FaceAxes& face_axes(int f) {
  static const FaceAxes table[6] = {
      {0, 2, 1, 1, -1, -1}, {0, 2, 1, -1, 1, -1}, {1, 0, 2, 1, 1, 1},
      {1, 0, 2, -1, 1, -1}, {2, 0, 1, 1, 1, -1},  {2, 0, 1, -1, -1, -1},
  };
  return table[f];
}

}  // namespace detail

template <typename T> int cube_face(const Vec3<T>& d) {
  const T ax = std::abs(d[0]), ay = std::abs(d[1]), az = std::abs(d[2]);
  if (ax >= ay && ax >= az) return d[0] >= T(0) ? 0 : 1;
  if (ay >= az) return d[1] >= T(0) ? 2 : 3;
  return d[2] >= T(0) ? 4 : 5;
}

/// Face coordinates of a (not necessarily unit) direction, with d(uv)/d(dir).
template <typename T> Vec2<T> cube_face_uv(const Vec3<T>& d, int face, Mat23<T>* jac = nullptr) {
  const auto& ax = detail::face_axes(face);
  const T ma = std::abs(d[ax.major]);
  const T sc = T(ax.sc_sign) * d[ax.sc_axis], tc = T(ax.tc_sign) * d[ax.tc_axis];
  const Vec2<T> uv(T(0.5) * (sc / ma + T(1)), T(0.5) * (tc / ma + T(1)));
  if (jac) {
    jac->setZero();
    const T sgn = d[ax.major] >= T(0) ? T(1) : T(-1);
    (*jac)(0, ax.sc_axis) += T(0.5) * T(ax.sc_sign) / ma;
    (*jac)(0, ax.major) -= T(0.5) * sc * sgn / (ma * ma);
    (*jac)(1, ax.tc_axis) += T(0.5) * T(ax.tc_sign) / ma;
    (*jac)(1, ax.major) -= T(0.5) * tc * sgn / (ma * ma);
  }
  return uv;
}

/// Unnormalized direction through face coordinates (u, v).
template <typename T> Vec3<T> cube_direction(int face, T u, T v) {
  const auto& ax = detail::face_axes(face);
  Vec3<T> d;
  d[ax.major] = T(ax.major_sign);
  d[ax.sc_axis] = T(ax.sc_sign) * (T(2) * u - T(1));
  d[ax.tc_axis] = T(ax.tc_sign) * (T(2) * v - T(1));
  return d;
}

/// Unit direction and solid angle of every texel of a size^2 cubemap.
inline void cube_texel_geometry(int size, std::vector<Eigen::Vector3d>& dirs, std::vector<double>& solid_angle) {
  dirs.resize(static_cast<size_t>(kCubeFaces) * size * size);
  solid_angle.resize(dirs.size());
  for (int f = 0; f < kCubeFaces; ++f)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const size_t i = (static_cast<size_t>(f) * size + y) * size + x;
        dirs[i] = cube_direction<double>(f, (x + 0.5) / size, (y + 0.5) / size).normalized();
        const double x0 = 2.0 * x / size - 1, x1 = 2.0 * (x + 1) / size - 1;
        const double y0 = 2.0 * y / size - 1, y1 = 2.0 * (y + 1) / size - 1;
        solid_angle[i] = cube_area_element(x0, y0) - cube_area_element(x0, y1) - cube_area_element(x1, y0) +
                         cube_area_element(x1, y1);
      }
}

template <typename T> struct CubeTaps {
  int face = 0;
  BilinearTaps<T> taps;  // texel indices already offset by the face
  Mat23<T> duv_ddir;
};

template <typename T> CubeTaps<T> cube_taps(int size, const Vec3<T>& dir) {
  CubeTaps<T> c;
  c.face = cube_face(dir);
  const Vec2<T> uv = cube_face_uv(dir, c.face, &c.duv_ddir);
  c.taps = bilinear_taps<T>(size, uv);
  for (auto& t : c.taps.texel) t += c.face * size * size;
  return c;
}

/// Bilinear lookup within one face, edge-clamped (no cross-face filtering).
template <typename T> Vec3<T> sample_cube(const CubeMap<T>& cube, const Vec3<T>& dir, const CubeTaps<T>* pre = nullptr) {
  const CubeTaps<T> c = pre ? *pre : cube_taps(cube.size, dir);
  Vec3<T> out = Vec3<T>::Zero();
  for (int k = 0; k < 4; ++k) {
    const T* p = cube.texel(static_cast<size_t>(c.taps.texel[k]));
    out += c.taps.w[k] * Vec3<T>(p[0], p[1], p[2]);
  }
  return out;
}

/// Adjoint of sample_cube: accumulates texel grads, returns dL/d(dir).
template <typename T>
Vec3<T> sample_cube_backward(const CubeMap<T>& cube, const CubeTaps<T>& c, const Vec3<T>& g, CubeMap<T>* grad_cube) {
  Vec2<T> guv = Vec2<T>::Zero();
  for (int k = 0; k < 4; ++k) {
    const T* p = cube.texel(static_cast<size_t>(c.taps.texel[k]));
    const T dot = g[0] * p[0] + g[1] * p[1] + g[2] * p[2];
    guv[0] += c.taps.dw_du[k] * dot;
    guv[1] += c.taps.dw_dv[k] * dot;
    if (grad_cube) {
      T* q = grad_cube->texel(static_cast<size_t>(c.taps.texel[k]));
      for (int ch = 0; ch < 3; ++ch) q[ch] += c.taps.w[k] * g[ch];
    }
  }
  return c.duv_ddir.transpose() * guv;
}

// ---------------------------------------------------------------------------
// Environment light and prefiltering.

/// Learnable cubemap; radiance = softplus(raw) > 0.
template <typename T> struct EnvironmentLight {
  CubeMap<T> raw;

  static EnvironmentLight from_radiance(const CubeMap<T>& radiance) {
    EnvironmentLight e;
    e.raw = radiance;
    for (auto& v : e.raw.data) v = softplus_inverse(std::max(v, T(1e-6)));
    return e;
  }
  static EnvironmentLight constant(T value, int size = kEnvSize) {
    return from_radiance(CubeMap<T>::filled(size, value));
  }
  CubeMap<T> radiance() const {
    CubeMap<T> r = raw;
    for (auto& v : r.data) v = softplus(v);
    return r;
  }
  template <typename U> EnvironmentLight<U> cast() const {
    EnvironmentLight<U> e;
    e.raw = raw.template cast<U>();
    return e;
  }
};

inline int mip_count(int base) {
  int n = 1;
  while ((base >> (n - 1)) > 1) ++n;
  return n;
}

inline double mip_roughness(int mip, int count) { return count > 1 ? double(mip) / (count - 1) : 0.0; }

inline double ggx_d(double noh, double alpha) {
  const double a2 = alpha * alpha;
  const double d = noh * noh * (a2 - 1) + 1;
  return a2 / (std::numbers::pi * d * d);
}

/// Linear maps from base radiance to every mip and to the irradiance map.
/// Each row is a normalized quadrature over the base texels: GGX D(n.h) * n.l
/// around the lookup direction for the mips (n = v = r assumption), and the
/// clamped cosine for irradiance.
struct PrefilterOperators {
  using Sparse = Eigen::SparseMatrix<double, Eigen::RowMajor>;
  int base = 0, irradiance_size = 0, mips = 0;
  std::vector<Sparse> mip_ops;  // index 0 unused (identity)
  Sparse irradiance_op;

  int mip_size(int m) const { return base >> m; }
};

namespace detail {

inline PrefilterOperators::Sparse build_filter(int target_size, int base, const std::vector<Eigen::Vector3d>& src_dirs,
                                               const std::vector<double>& src_omega, double alpha, bool cosine) {
  std::vector<Eigen::Vector3d> dst_dirs;
  std::vector<double> dst_omega;
  cube_texel_geometry(target_size, dst_dirs, dst_omega);
  const size_t rows = dst_dirs.size();
  std::vector<std::vector<std::pair<int, double>>> row_entries(rows);
  default_pool().parallel_for(rows, [&](size_t r) {
    const Eigen::Vector3d& n = dst_dirs[r];
    std::vector<std::pair<int, double>> e;
    double wmax = 0;
    for (size_t j = 0; j < src_dirs.size(); ++j) {
      const double nol = n.dot(src_dirs[j]);
      if (nol <= 0) continue;
      double w;
      if (cosine) {
        w = nol * src_omega[j];
      } else {
        const Eigen::Vector3d h = (n + src_dirs[j]).normalized();
        w = ggx_d(n.dot(h), alpha) * nol * src_omega[j];
      }
      e.emplace_back(static_cast<int>(j), w);
      wmax = std::max(wmax, w);
    }
    double total = 0;
    std::vector<std::pair<int, double>> kept;
    for (const auto& [j, w] : e)
      if (w >= 1e-9 * wmax) {
        kept.emplace_back(j, w);
        total += w;
      }
    for (auto& kv : kept) kv.second /= total;
    row_entries[r] = std::move(kept);
  });
  std::vector<Eigen::Triplet<double>> trip;
  for (size_t r = 0; r < rows; ++r)
    for (const auto& [j, w] : row_entries[r]) trip.emplace_back(static_cast<int>(r), j, w);
  PrefilterOperators::Sparse m(static_cast<int>(rows), static_cast<int>(src_dirs.size()));
  m.setFromTriplets(trip.begin(), trip.end());
  (void)base;
  return m;
}

}  // namespace detail

/// Cached per (base size, irradiance size); built on first use.
inline const PrefilterOperators& prefilter_operators(int base = kEnvSize, int irradiance_size = kIrradianceSize) {
  static std::mutex mu;
  static std::map<std::pair<int, int>, std::unique_ptr<PrefilterOperators>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto& slot = cache[{base, irradiance_size}];
  if (!slot) {
    if (base <= 0 || (base & (base - 1)) != 0) throw DataError("prefilter: cubemap size must be a power of two");
    auto ops = std::make_unique<PrefilterOperators>();
    ops->base = base;
    ops->irradiance_size = irradiance_size;
    ops->mips = mip_count(base);
    std::vector<Eigen::Vector3d> dirs;
    std::vector<double> omega;
    cube_texel_geometry(base, dirs, omega);
    ops->mip_ops.resize(ops->mips);
    for (int m = 1; m < ops->mips; ++m) {
      const double r = mip_roughness(m, ops->mips);
      ops->mip_ops[m] = detail::build_filter(base >> m, base, dirs, omega, r * r, false);
    }
    ops->irradiance_op = detail::build_filter(irradiance_size, base, dirs, omega, 0, true);
    slot = std::move(ops);
  }
  return *slot;
}

/// Prefiltered radiance mips (mip 0 is the base map) plus the irradiance map.
template <typename T> struct EnvChain {
  std::vector<CubeMap<T>> mips;
  CubeMap<T> irradiance;

  int count() const { return static_cast<int>(mips.size()); }

  static EnvChain zeros_like(const EnvChain& o) {
    EnvChain z;
    for (const auto& m : o.mips) z.mips.push_back(CubeMap<T>::filled(m.size));
    z.irradiance = CubeMap<T>::filled(o.irradiance.size);
    return z;
  }
};

namespace detail {

template <typename T>
void apply_op(const PrefilterOperators::Sparse& op, const std::vector<T>& src, std::vector<T>& dst) {
  dst.assign(static_cast<size_t>(op.rows()) * 3, T(0));
  for (int r = 0; r < op.rows(); ++r) {
    double acc[3] = {0, 0, 0};
    for (PrefilterOperators::Sparse::InnerIterator it(op, r); it; ++it) {
      const size_t j = static_cast<size_t>(it.col()) * 3;
      for (int c = 0; c < 3; ++c) acc[c] += it.value() * static_cast<double>(src[j + c]);
    }
    for (int c = 0; c < 3; ++c) dst[static_cast<size_t>(r) * 3 + c] = static_cast<T>(acc[c]);
  }
}

template <typename T>
void apply_op_transpose_add(const PrefilterOperators::Sparse& op, const std::vector<T>& g, std::vector<T>& out) {
  for (int r = 0; r < op.rows(); ++r)
    for (PrefilterOperators::Sparse::InnerIterator it(op, r); it; ++it) {
      const size_t j = static_cast<size_t>(it.col()) * 3;
      for (int c = 0; c < 3; ++c) out[j + c] += static_cast<T>(it.value()) * g[static_cast<size_t>(r) * 3 + c];
    }
}

}  // namespace detail

template <typename T> EnvChain<T> prefilter_env(const CubeMap<T>& radiance, int irradiance_size = kIrradianceSize) {
  const auto& ops = prefilter_operators(radiance.size, irradiance_size);
  EnvChain<T> chain;
  chain.mips.resize(ops.mips);
  chain.mips[0] = radiance;
  for (int m = 1; m < ops.mips; ++m) {
    chain.mips[m].size = ops.mip_size(m);
    detail::apply_op(ops.mip_ops[m], radiance.data, chain.mips[m].data);
  }
  chain.irradiance.size = irradiance_size;
  detail::apply_op(ops.irradiance_op, radiance.data, chain.irradiance.data);
  return chain;
}

/// Adjoint of prefilter_env: dL/d(base radiance).
template <typename T> CubeMap<T> prefilter_env_backward(const EnvChain<T>& grad) {
  const int base = grad.mips[0].size;
  const auto& ops = prefilter_operators(base, grad.irradiance.size);
  CubeMap<T> out = grad.mips[0];
  for (int m = 1; m < ops.mips; ++m) detail::apply_op_transpose_add(ops.mip_ops[m], grad.mips[m].data, out.data);
  detail::apply_op_transpose_add(ops.irradiance_op, grad.irradiance.data, out.data);
  return out;
}

/// Trilinear lookup: bilinear within a face, linear across the two mips
/// bracketing level = r * (count - 1).
template <typename T> Vec3<T> sample_env(const EnvChain<T>& chain, const Vec3<T>& dir, T roughness) {
  const T level = clamp01(roughness) * T(chain.count() - 1);
  const int m0 = std::min(static_cast<int>(std::floor(level)), chain.count() - 1);
  const int m1 = std::min(m0 + 1, chain.count() - 1);
  const T f = level - T(m0);
  const Vec3<T> a = sample_cube(chain.mips[m0], dir);
  if (m1 == m0 || f == T(0)) return a;
  return (T(1) - f) * a + f * sample_cube(chain.mips[m1], dir);
}

/// Adjoint of sample_env. Accumulates mip grads; returns dL/d(dir) and adds dL/dr.
template <typename T>
Vec3<T> sample_env_backward(const EnvChain<T>& chain, const Vec3<T>& dir, T roughness, const Vec3<T>& g,
                            EnvChain<T>* grad_chain, T& grad_roughness) {
  const T level = clamp01(roughness) * T(chain.count() - 1);
  const int m0 = std::min(static_cast<int>(std::floor(level)), chain.count() - 1);
  const int m1 = std::min(m0 + 1, chain.count() - 1);
  const T f = level - T(m0);
  const auto t0 = cube_taps(chain.mips[m0].size, dir);
  if (m1 == m0) return sample_cube_backward(chain.mips[m0], t0, g, grad_chain ? &grad_chain->mips[m0] : nullptr);
  const auto t1 = cube_taps(chain.mips[m1].size, dir);
  const Vec3<T> a = sample_cube(chain.mips[m0], dir, &t0), b = sample_cube(chain.mips[m1], dir, &t1);
  if (roughness >= T(0) && roughness <= T(1)) grad_roughness += g.dot(b - a) * T(chain.count() - 1);
  Vec3<T> gd = sample_cube_backward(chain.mips[m0], t0, Vec3<T>((T(1) - f) * g),
                                    grad_chain ? &grad_chain->mips[m0] : nullptr);
  gd += sample_cube_backward(chain.mips[m1], t1, Vec3<T>(f * g), grad_chain ? &grad_chain->mips[m1] : nullptr);
  return gd;
}

// ---------------------------------------------------------------------------
// BRDF lookup table.

inline double radical_inverse(uint32_t bits) {
  bits = (bits << 16u) | (bits >> 16u);
  bits = ((bits & 0x55555555u) << 1u) | ((bits & 0xAAAAAAAAu) >> 1u);
  bits = ((bits & 0x33333333u) << 2u) | ((bits & 0xCCCCCCCCu) >> 2u);
  bits = ((bits & 0x0F0F0F0Fu) << 4u) | ((bits & 0xF0F0F0F0u) >> 4u);
  bits = ((bits & 0x00FF00FFu) << 8u) | ((bits & 0xFF00FF00u) >> 8u);
  return static_cast<double>(bits) * 0x1.0p-32;
}

/// GGX half-vector sample around +z.
inline Eigen::Vector3d sample_ggx(double u1, double u2, double alpha) {
  const double a2 = alpha * alpha;
  const double phi = 2 * std::numbers::pi * u1;
  const double cos_t = std::sqrt((1 - u2) / (1 + (a2 - 1) * u2));
  const double sin_t = std::sqrt(std::max(0.0, 1 - cos_t * cos_t));
  return {sin_t * std::cos(phi), sin_t * std::sin(phi), cos_t};
}

/// Height-correlated Smith visibility V = G / (4 n.l n.v).
inline double smith_visibility(double nov, double nol, double alpha) {
  const double a2 = alpha * alpha;
  const double gv = nol * std::sqrt(nov * nov * (1 - a2) + a2);
  const double gl = nov * std::sqrt(nol * nol * (1 - a2) + a2);
  return 0.5 / (gv + gl);
}

/// Scale/bias (A, B) over (n.v, roughness); R(f0) = f0 * A + B.
struct BrdfLut {
  int resolution = 0;
  int samples = 0;
  std::vector<double> a, b;  // [r_index * res + nov_index]

  struct Lookup {
    double a, b, da_dnov, db_dnov, da_dr, db_dr;
  };

  Lookup lookup(double nov, double r) const {
    const auto taps = bilinear_taps<double>(resolution, Eigen::Vector2d(nov, r));
    Lookup l{0, 0, 0, 0, 0, 0};
    for (int k = 0; k < 4; ++k) {
      const double va = a[taps.texel[k]], vb = b[taps.texel[k]];
      l.a += taps.w[k] * va;
      l.b += taps.w[k] * vb;
      l.da_dnov += taps.dw_du[k] * va;
      l.db_dnov += taps.dw_du[k] * vb;
      l.da_dr += taps.dw_dv[k] * va;
      l.db_dr += taps.dw_dv[k] * vb;
    }
    return l;
  }
};

/// Split-sum scale/bias at one (n.v, roughness) from a fixed Hammersley set.
inline std::pair<double, double> integrate_brdf(double nov, double r, int samples) {
  const double alpha = r * r;
  const Eigen::Vector3d v(std::sqrt(std::max(0.0, 1 - nov * nov)), 0, nov);
  double sa = 0, sb = 0;
  for (int i = 0; i < samples; ++i) {
    const Eigen::Vector3d h = sample_ggx(double(i) / samples, radical_inverse(static_cast<uint32_t>(i)), alpha);
    const double voh = v.dot(h);
    const Eigen::Vector3d l = 2 * voh * h - v;
    const double nol = l[2], noh = h[2];
    if (nol <= 0 || voh <= 0 || noh <= 0) continue;
    const double g_vis = 4 * smith_visibility(nov, nol, alpha) * nol * voh / noh;
    const double fc = std::pow(1 - voh, 5);
    sa += (1 - fc) * g_vis;
    sb += fc * g_vis;
  }
  return {std::clamp(sa / samples, 0.0, 1.0), std::clamp(sb / samples, 0.0, 1.0)};
}

inline BrdfLut bake_brdf_lut(int resolution = 64, int samples = 1024) {
  if (resolution < 16) throw DataError("bake_brdf_lut: resolution must be at least 16");
  if (samples < 256) throw DataError("bake_brdf_lut: need at least 256 samples");
  BrdfLut lut;
  lut.resolution = resolution;
  lut.samples = samples;
  lut.a.resize(static_cast<size_t>(resolution) * resolution);
  lut.b.resize(lut.a.size());
  default_pool().parallel_for(resolution, [&](size_t y) {
    const double r = (y + 0.5) / resolution;
    for (int x = 0; x < resolution; ++x) {
      const double nov = (x + 0.5) / resolution;
      const auto [a, b] = integrate_brdf(nov, r, samples);
      lut.a[y * resolution + x] = a;
      lut.b[y * resolution + x] = b;
    }
  });
  return lut;
}

inline constexpr char kLutMagic[8] = {'U', 'V', 'S', 'P', 'L', 'U', 'T', '1'};

inline void save_brdf_lut(const std::string& path, const BrdfLut& lut);
inline BrdfLut load_brdf_lut(const std::string& path);

/// Loads the table for (resolution, samples) from `dir` or bakes and stores it.
inline BrdfLut cached_brdf_lut(const std::string& dir, int resolution, int samples);

// ---------------------------------------------------------------------------
// Deferred shading.

/// L0 = rho * Irr(n) + (f0 A + B) * Pref(w_r, r), composited over black:
/// out = alpha * L0, evaluated from the weight-accumulated G-buffer channels.
template <typename T>
Vec3<T> shade_pixel(const T* g, const Vec3<T>& view_dir, const EnvChain<T>& chain, const BrdfLut& lut) {
  const T alpha = g[kAlpha];
  const Vec3<T> an(g[kNormalX], g[kNormalY], g[kNormalZ]);
  if (static_cast<double>(alpha) < kShadeMinAlpha || an.squaredNorm() < T(1e-20)) return Vec3<T>::Zero();
  const Vec3<T> n = an.normalized();
  const Vec3<T> wo = -view_dir;
  const T ndv = n.dot(wo);
  const T nov = std::max(ndv, T(kMinNoV));
  const Vec3<T> wr = T(2) * ndv * n - wo;
  const T r = clamp01(g[kRoughness] / alpha);
  const auto l = lut.lookup(static_cast<double>(nov), static_cast<double>(r));
  const Vec3<T> irr = sample_cube(chain.irradiance, n);
  const Vec3<T> pref = sample_env(chain, wr, r);
  const T spec = g[kF0] * T(l.a) + alpha * T(l.b);
  return Vec3<T>(g[kAlbedoR], g[kAlbedoG], g[kAlbedoB]).cwiseProduct(irr) + spec * pref;
}

template <typename T>
Image<T> shade(const GBuffers<T>& gb, const EnvChain<T>& chain, const BrdfLut& lut, const Camera<T>& cam,
               ThreadPool* pool = nullptr) {
  Image<T> img(gb.width, gb.height, 3);
  ThreadPool& workers = pool ? *pool : default_pool();
  workers.parallel_for(gb.height, [&](size_t y) {
    for (int x = 0; x < gb.width; ++x) {
      const Vec3<T> c = shade_pixel(gb.pixel(y * gb.width + x), cam.ray_direction(x, static_cast<int>(y)), chain, lut);
      for (int k = 0; k < 3; ++k) img(x, static_cast<int>(y), k) = c[k];
    }
  });
  return img;
}

template <typename T>
void shade_pixel_backward(const T* g, const Vec3<T>& view_dir, const EnvChain<T>& chain, const BrdfLut& lut,
                          const Vec3<T>& gout, T* gg, EnvChain<T>* grad_chain) {
  const T alpha = g[kAlpha];
  const Vec3<T> an(g[kNormalX], g[kNormalY], g[kNormalZ]);
  if (static_cast<double>(alpha) < kShadeMinAlpha || an.squaredNorm() < T(1e-20)) return;
  const Vec3<T> n = an.normalized();
  const Vec3<T> wo = -view_dir;
  const T ndv = n.dot(wo);
  const T nov = std::max(ndv, T(kMinNoV));
  const Vec3<T> wr = T(2) * ndv * n - wo;
  const T r_raw = g[kRoughness] / alpha;
  const T r = clamp01(r_raw);
  const auto l = lut.lookup(static_cast<double>(nov), static_cast<double>(r));
  const auto irr_taps = cube_taps(chain.irradiance.size, n);
  const Vec3<T> irr = sample_cube(chain.irradiance, n, &irr_taps);
  const Vec3<T> pref = sample_env(chain, wr, r);
  const T spec = g[kF0] * T(l.a) + alpha * T(l.b);
  const Vec3<T> albedo(g[kAlbedoR], g[kAlbedoG], g[kAlbedoB]);

  for (int c = 0; c < 3; ++c) gg[kAlbedoR + c] += gout[c] * irr[c];
  Vec3<T> gn = sample_cube_backward(chain.irradiance, irr_taps, Vec3<T>(gout.cwiseProduct(albedo)),
                                    grad_chain ? &grad_chain->irradiance : nullptr);
  const T gspec = gout.dot(pref);
  gg[kF0] += gspec * T(l.a);
  T g_alpha = gspec * T(l.b);
  const T ga = gspec * g[kF0], gb = gspec * alpha;
  T g_nov = ga * T(l.da_dnov) + gb * T(l.db_dnov);
  T g_r = ga * T(l.da_dr) + gb * T(l.db_dr);
  const Vec3<T> g_wr = sample_env_backward(chain, wr, r, Vec3<T>(spec * gout), grad_chain, g_r);
  if (r_raw >= T(0) && r_raw <= T(1)) {
    gg[kRoughness] += g_r / alpha;
    g_alpha -= g_r * g[kRoughness] / (alpha * alpha);
  }
  gg[kAlpha] += g_alpha;
  // w_r = 2 (n.wo) n - wo;  nov = max(n.wo, eps)
  T g_ndv = T(2) * n.dot(g_wr);
  gn += T(2) * ndv * g_wr;
  if (ndv > T(kMinNoV)) g_ndv += g_nov;
  gn += g_ndv * wo;
  const Vec3<T> gan = normalize_backward<T, 3>(an, gn);
  for (int c = 0; c < 3; ++c) gg[kNormalX + c] += gan[c];
}

/// Adjoint of shade. Env grads are reduced over a fixed row partition so the
/// result does not depend on the worker count.
template <typename T>
void shade_backward(const GBuffers<T>& gb, const EnvChain<T>& chain, const BrdfLut& lut, const Camera<T>& cam,
                    const Image<T>& grad, GBuffers<T>& grad_gb, EnvChain<T>* grad_chain, ThreadPool* pool = nullptr) {
  ThreadPool& workers = pool ? *pool : default_pool();
  constexpr int kBands = 16;
  const int rows_per = (gb.height + kBands - 1) / kBands;
  std::vector<EnvChain<T>> partial;
  if (grad_chain) partial.assign(kBands, EnvChain<T>::zeros_like(chain));
  workers.parallel_for(kBands, [&](size_t band) {
    const int y0 = static_cast<int>(band) * rows_per, y1 = std::min(gb.height, y0 + rows_per);
    for (int y = y0; y < y1; ++y)
      for (int x = 0; x < gb.width; ++x) {
        const Vec3<T> go(grad(x, y, 0), grad(x, y, 1), grad(x, y, 2));
        if (go.isZero(0)) continue;
        const size_t p = static_cast<size_t>(y) * gb.width + x;
        shade_pixel_backward(gb.pixel(p), cam.ray_direction(x, y), chain, lut, go, grad_gb.pixel(p),
                             grad_chain ? &partial[band] : nullptr);
      }
  });
  if (!grad_chain) return;
  for (const auto& pc : partial) {
    for (size_t m = 0; m < pc.mips.size(); ++m)
      for (size_t i = 0; i < pc.mips[m].data.size(); ++i) grad_chain->mips[m].data[i] += pc.mips[m].data[i];
    for (size_t i = 0; i < pc.irradiance.data.size(); ++i) grad_chain->irradiance.data[i] += pc.irradiance.data[i];
  }
}

/// Gradient of the shaded image w.r.t. raw (pre-softplus) environment values.
template <typename T> CubeMap<T> env_raw_grad(const EnvironmentLight<T>& env, const EnvChain<T>& grad_chain) {
  CubeMap<T> g = prefilter_env_backward(grad_chain);
  for (size_t i = 0; i < g.data.size(); ++i) g.data[i] *= softplus_grad(env.raw.data[i]);
  return g;
}

// ---------------------------------------------------------------------------
// Monte Carlo reference of the unsplit rendering integral.

struct Material {
  Eigen::Vector3d albedo = Eigen::Vector3d::Zero();
  double roughness = 0.5;
  double f0 = 0.04;
};

inline Eigen::Matrix3d basis_around(const Eigen::Vector3d& n) {
  const Eigen::Vector3d up = std::abs(n[2]) < 0.999 ? Eigen::Vector3d(0, 0, 1) : Eigen::Vector3d(1, 0, 0);
  const Eigen::Vector3d t = up.cross(n).normalized();
  Eigen::Matrix3d m;
  m.col(0) = t;
  m.col(1) = n.cross(t);
  m.col(2) = n;
  return m;
}

/// Diffuse: cosine-weighted sampling, so the estimate of rho/pi * L * cos / pdf
/// is rho * L. Specular: GGX half-vector sampling with Schlick Fresnel and the
/// same visibility as the lookup table.
inline Eigen::Vector3d mc_reference_shade(const Material& mat, const Eigen::Vector3d& normal,
                                          const Eigen::Vector3d& wo, const CubeMap<double>& env, int samples,
                                          uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const Eigen::Vector3d n = normal.normalized();
  const Eigen::Matrix3d frame = basis_around(n);
  const double nov = std::max(n.dot(wo), kMinNoV);
  const double alpha = mat.roughness * mat.roughness;
  Eigen::Vector3d diffuse = Eigen::Vector3d::Zero(), specular = Eigen::Vector3d::Zero();
  for (int i = 0; i < samples; ++i) {
    const double u1 = u01(rng), u2 = u01(rng);
    const double rad = std::sqrt(u1), phi = 2 * std::numbers::pi * u2;
    const Eigen::Vector3d l = frame * Eigen::Vector3d(rad * std::cos(phi), rad * std::sin(phi), std::sqrt(1 - u1));
    diffuse += sample_cube(env, l);

    const Eigen::Vector3d h = frame * sample_ggx(u01(rng), u01(rng), alpha);
    const double voh = wo.dot(h);
    const Eigen::Vector3d ls = 2 * voh * h - wo;
    const double nol = n.dot(ls), noh = n.dot(h);
    if (nol <= 0 || voh <= 0 || noh <= 0) continue;
    const double fres = mat.f0 + (1 - mat.f0) * std::pow(1 - voh, 5);
    const double w = fres * 4 * smith_visibility(nov, nol, alpha) * nol * voh / noh;
    specular += w * sample_cube(env, ls);
  }
  return mat.albedo.cwiseProduct(diffuse) / samples + specular / samples;
}

/// Split-sum evaluation of one material/normal/view (no G-buffer), for comparisons.
inline Eigen::Vector3d split_sum_shade(const Material& mat, const Eigen::Vector3d& normal, const Eigen::Vector3d& wo,
                                       const EnvChain<double>& chain, const BrdfLut& lut) {
  const Eigen::Vector3d n = normal.normalized();
  const double ndv = n.dot(wo);
  const Eigen::Vector3d wr = 2 * ndv * n - wo;
  const auto l = lut.lookup(std::max(ndv, kMinNoV), mat.roughness);
  return mat.albedo.cwiseProduct(sample_cube(chain.irradiance, n)) +
         (mat.f0 * l.a + l.b) * sample_env(chain, wr, mat.roughness);
}

// ---------------------------------------------------------------------------
// Equirectangular conversion (y up; u = 0.5 looks down -z).

template <typename T> Vec2<T> equirect_uv(const Vec3<T>& d) {
  const Vec3<T> n = d.normalized();
  const T u = std::atan2(n[0], -n[2]) / T(2 * std::numbers::pi) + T(0.5);
  const T v = std::acos(std::clamp(n[1], T(-1), T(1))) / T(std::numbers::pi);
  return Vec2<T>(u, v);
}

template <typename T> Vec3<T> equirect_direction(T u, T v) {
  const T phi = (u - T(0.5)) * T(2 * std::numbers::pi), theta = v * T(std::numbers::pi);
  return Vec3<T>(std::sin(theta) * std::sin(phi), std::cos(theta), -std::sin(theta) * std::cos(phi));
}

/// Bilinear equirect lookup, wrapping horizontally and clamping vertically.
template <typename T> Vec3<T> sample_equirect(const Image<T>& img, const Vec3<T>& d) {
  const Vec2<T> uv = equirect_uv(d);
  const T x = uv[0] * T(img.width) - T(0.5);
  const T y = std::clamp(uv[1] * T(img.height) - T(0.5), T(0), T(img.height - 1));
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = std::min(static_cast<int>(std::floor(y)), std::max(img.height - 2, 0));
  const int y1 = std::min(y0 + 1, img.height - 1);
  const T fx = x - T(x0), fy = y - T(y0);
  auto wrap = [&](int xi) { return ((xi % img.width) + img.width) % img.width; };
  const int xa = wrap(x0), xb = wrap(x0 + 1);
  Vec3<T> out;
  for (int c = 0; c < 3; ++c)
    out[c] = (T(1) - fy) * ((T(1) - fx) * img(xa, y0, c) + fx * img(xb, y0, c)) +
             fy * ((T(1) - fx) * img(xa, y1, c) + fx * img(xb, y1, c));
  return out;
}

template <typename T> CubeMap<T> equirect_to_cubemap(const Image<T>& img, int size) {
  if (img.channels < 3) throw DataError("equirect_to_cubemap: need an RGB image");
  CubeMap<T> cube = CubeMap<T>::filled(size);
  for (int f = 0; f < kCubeFaces; ++f)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const Vec3<T> c = sample_equirect(img, cube_direction<T>(f, (x + T(0.5)) / size, (y + T(0.5)) / size));
        T* p = cube.texel((static_cast<size_t>(f) * size + y) * size + x);
        for (int k = 0; k < 3; ++k) p[k] = c[k];
      }
  return cube;
}

template <typename T> Image<T> cubemap_to_equirect(const CubeMap<T>& cube, int width, int height) {
  Image<T> img(width, height, 3);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const Vec3<T> c = sample_cube(cube, equirect_direction<T>((x + T(0.5)) / width, (y + T(0.5)) / height));
      for (int k = 0; k < 3; ++k) img(x, y, k) = c[k];
    }
  return img;
}

// ---------------------------------------------------------------------------
// LUT cache file: magic, resolution, samples (u32), then a and b as f64.

inline void save_brdf_lut(const std::string& path, const BrdfLut& lut) {
  std::ofstream os(path + ".tmp", std::ios::binary);
  if (!os) throw DataError("cannot write " + path);
  os.write(kLutMagic, 8);
  const uint32_t hdr[2] = {static_cast<uint32_t>(lut.resolution), static_cast<uint32_t>(lut.samples)};
  os.write(reinterpret_cast<const char*>(hdr), sizeof(hdr));
  os.write(reinterpret_cast<const char*>(lut.a.data()), static_cast<std::streamsize>(lut.a.size() * sizeof(double)));
  os.write(reinterpret_cast<const char*>(lut.b.data()), static_cast<std::streamsize>(lut.b.size() * sizeof(double)));
  os.close();
  if (!os) throw DataError("failed writing " + path);
  std::rename((path + ".tmp").c_str(), path.c_str());
}

inline BrdfLut load_brdf_lut(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || !std::equal(magic, magic + 8, kLutMagic)) throw DataError(path + ": not a BRDF table");
  uint32_t hdr[2];
  is.read(reinterpret_cast<char*>(hdr), sizeof(hdr));
  if (!is || hdr[0] < 1 || hdr[0] > 4096) throw DataError(path + ": bad table header");
  BrdfLut lut;
  lut.resolution = static_cast<int>(hdr[0]);
  lut.samples = static_cast<int>(hdr[1]);
  lut.a.resize(static_cast<size_t>(hdr[0]) * hdr[0]);
  lut.b.resize(lut.a.size());
  is.read(reinterpret_cast<char*>(lut.a.data()), static_cast<std::streamsize>(lut.a.size() * sizeof(double)));
  is.read(reinterpret_cast<char*>(lut.b.data()), static_cast<std::streamsize>(lut.b.size() * sizeof(double)));
  if (!is) throw DataError(path + ": truncated table");
  return lut;
}

inline BrdfLut cached_brdf_lut(const std::string& dir, int resolution, int samples) {
  const std::string path = dir + "/brdf_lut_" + std::to_string(resolution) + "_" + std::to_string(samples) + ".bin";
  {
    std::ifstream probe(path, std::ios::binary);
    if (probe) {
      try {
        BrdfLut lut = load_brdf_lut(path);
        if (lut.resolution == resolution && lut.samples == samples) return lut;
      } catch (const DataError&) {
      }
    }
  }
  BrdfLut lut = bake_brdf_lut(resolution, samples);
  try {
    save_brdf_lut(path, lut);
  } catch (const DataError&) {
    // cache is best effort
  }
  return lut;
}

}  // namespace uvsplat
