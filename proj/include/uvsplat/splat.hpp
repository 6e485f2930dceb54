#pragma once

#include "uvsplat/math.hpp"
#include "uvsplat/rig.hpp"

#include <random>
#include <vector>

namespace uvsplat {

/// Mesh-bound splat parameters, structure-of-arrays.
///
/// Barycentric coordinates are stored as unconstrained logits and mapped to
/// the simplex by softmax; scales as logs; opacity as a logit.
template <typename T> struct SplatSet {
  std::vector<int> parent;
  std::vector<Vec3<T>> bary_logits;
  std::vector<Vec4<T>> rotation;  // (w, x, y, z) relative to the triangle frame
  std::vector<Vec2<T>> log_scales;
  std::vector<T> displacement;
  std::vector<T> opacity_logit;

  size_t size() const { return parent.size(); }

  Vec3<T> bary(size_t i) const {
    const Vec3<T>& z = bary_logits[i];
    const T m = z.maxCoeff();
    const Vec3<T> e((z.array() - m).exp());
    return e / e.sum();
  }
  Vec2<T> scales(size_t i) const { return Vec2<T>(std::exp(log_scales[i][0]), std::exp(log_scales[i][1])); }
  T opacity(size_t i) const { return sigmoid(opacity_logit[i]); }

  void push_back_from(const SplatSet& src, size_t i) {
    parent.push_back(src.parent[i]);
    bary_logits.push_back(src.bary_logits[i]);
    rotation.push_back(src.rotation[i]);
    log_scales.push_back(src.log_scales[i]);
    displacement.push_back(src.displacement[i]);
    opacity_logit.push_back(src.opacity_logit[i]);
  }

  template <typename U> SplatSet<U> cast() const {
    SplatSet<U> o;
    o.parent = parent;
    for (const auto& v : bary_logits) o.bary_logits.push_back(v.template cast<U>());
    for (const auto& v : rotation) o.rotation.push_back(v.template cast<U>());
    for (const auto& v : log_scales) o.log_scales.push_back(v.template cast<U>());
    o.displacement.assign(displacement.begin(), displacement.end());
    o.opacity_logit.assign(opacity_logit.begin(), opacity_logit.end());
    return o;
  }
};

/// Splats in world space for one mesh state.
template <typename T> struct WorldSplats {
  std::vector<Vec3<T>> center;
  std::vector<Mat3<T>> rotation;  // columns: s-hat, t-hat, geometric normal
  std::vector<Vec2<T>> scales;
  std::vector<T> opacity;
  std::vector<int> parent;

  size_t size() const { return center.size(); }
  Vec3<T> tangent_s(size_t i) const { return scales[i][0] * rotation[i].col(0); }
  Vec3<T> tangent_t(size_t i) const { return scales[i][1] * rotation[i].col(1); }
  Vec3<T> normal(size_t i) const { return rotation[i].col(2); }
};

namespace detail {

// Uniform double in [0,1) from the top 53 bits; independent of the standard
// library's distribution implementation.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

template <typename T> Vec3<T> sample_simplex(std::mt19937_64& rng) {
  Vec3<T> e;
  for (int k = 0; k < 3; ++k) e[k] = T(-std::log(1.0 - uniform01(rng)));
  return e / e.sum();
}

template <typename T> Vec3<T> logits_from_bary(const Vec3<T>& b) {
  return b.cwiseMax(T(1e-12)).array().log().matrix();
}

template <typename T> T mean_edge(const TemplateRig<T>& rig, int f) {
  const auto& t = rig.triangles[f];
  const auto& v = rig.vertices;
  return ((v[t[1]] - v[t[0]]).norm() + (v[t[2]] - v[t[1]]).norm() + (v[t[0]] - v[t[2]]).norm()) / T(3);
}

}  // namespace detail

/// n_per_triangle splats per triangle with simplex-uniform barycentrics.
template <typename T>
SplatSet<T> init_splats(const TemplateRig<T>& rig, int n_per_triangle, uint64_t seed) {
  if (n_per_triangle < 1) throw DataError("init_splats: n_per_triangle must be >= 1");
  std::mt19937_64 rng(seed);
  SplatSet<T> s;
  for (int f = 0; f < rig.num_triangles(); ++f) {
    const T scale = std::log(T(0.5) * detail::mean_edge(rig, f));
    for (int k = 0; k < n_per_triangle; ++k) {
      s.parent.push_back(f);
      s.bary_logits.push_back(detail::logits_from_bary(detail::sample_simplex<T>(rng)));
      s.rotation.push_back(quat_identity<T>());
      s.log_scales.push_back(Vec2<T>(scale, scale));
      s.displacement.push_back(T(0));
      s.opacity_logit.push_back(T(0));
    }
  }
  return s;
}

/// p = sum b_i V_i + d N; R = Frame * Rot(r).
template <typename T>
WorldSplats<T> instantiate(const SplatSet<T>& splats, const DeformedMesh<T>& mesh, const TemplateRig<T>& rig) {
  WorldSplats<T> w;
  const size_t n = splats.size();
  w.center.resize(n);
  w.rotation.resize(n);
  w.scales.resize(n);
  w.opacity.resize(n);
  w.parent = splats.parent;
  for (size_t i = 0; i < n; ++i) {
    const int f = splats.parent[i];
    if (f < 0 || f >= rig.num_triangles()) throw DataError("instantiate: splat " + std::to_string(i) + " has invalid parent");
    if (mesh.is_degenerate(f))
      throw DataError("instantiate: parent triangle " + std::to_string(f) + " is degenerate");
    const auto& tri = rig.triangles[f];
    const Vec3<T> b = splats.bary(i);
    w.center[i] = b[0] * mesh.vertices[tri[0]] + b[1] * mesh.vertices[tri[1]] + b[2] * mesh.vertices[tri[2]] +
                  splats.displacement[i] * mesh.face_normals[f];
    w.rotation[i] = mesh.frames[f] * quat_to_matrix(splats.rotation[i]);
    w.scales[i] = splats.scales(i);
    w.opacity[i] = splats.opacity(i);
  }
  return w;
}

/// Gradients w.r.t. world-space splat quantities.
template <typename T> struct WorldSplatGrads {
  std::vector<Vec3<T>> center;
  std::vector<Mat3<T>> rotation;
  std::vector<Vec2<T>> scales;
  std::vector<T> opacity;

  static WorldSplatGrads zeros(size_t n) {
    WorldSplatGrads g;
    g.center.assign(n, Vec3<T>::Zero());
    g.rotation.assign(n, Mat3<T>::Zero());
    g.scales.assign(n, Vec2<T>::Zero());
    g.opacity.assign(n, T(0));
    return g;
  }
};

/// Gradients w.r.t. the stored splat parameters.
template <typename T> struct SplatGrads {
  std::vector<Vec3<T>> bary_logits;
  std::vector<Vec4<T>> rotation;
  std::vector<Vec2<T>> log_scales;
  std::vector<T> displacement;
  std::vector<T> opacity_logit;

  static SplatGrads zeros(size_t n) {
    SplatGrads g;
    g.bary_logits.assign(n, Vec3<T>::Zero());
    g.rotation.assign(n, Vec4<T>::Zero());
    g.log_scales.assign(n, Vec2<T>::Zero());
    g.displacement.assign(n, T(0));
    g.opacity_logit.assign(n, T(0));
    return g;
  }
};

/// Adjoint of softmax at logits z given dL/db.
template <typename T> Vec3<T> softmax_backward(const Vec3<T>& b, const Vec3<T>& gb) {
  return b.cwiseProduct(gb - Vec3<T>::Constant(b.dot(gb)));
}

/// Mesh-side gradients produced by instantiate_backward.
template <typename T> struct MeshGrads {
  std::vector<Vec3<T>> vertices;
  std::vector<Mat3<T>> frames;
  std::vector<Vec3<T>> normals;

  static MeshGrads zeros(size_t nv, size_t nf) {
    MeshGrads g;
    g.vertices.assign(nv, Vec3<T>::Zero());
    g.frames.assign(nf, Mat3<T>::Zero());
    g.normals.assign(nf, Vec3<T>::Zero());
    return g;
  }
};

/// Adjoint of instantiate. Accumulates into `out` and `mesh_out`.
template <typename T>
void instantiate_backward(const SplatSet<T>& splats, const DeformedMesh<T>& mesh, const TemplateRig<T>& rig,
                          const WorldSplats<T>& world, const WorldSplatGrads<T>& g, SplatGrads<T>& out,
                          MeshGrads<T>& mesh_out) {
  for (size_t i = 0; i < splats.size(); ++i) {
    const int f = splats.parent[i];
    const auto& tri = rig.triangles[f];
    const Vec3<T> b = splats.bary(i);
    const Vec3<T>& gp = g.center[i];
    Vec3<T> gb(gp.dot(mesh.vertices[tri[0]]), gp.dot(mesh.vertices[tri[1]]), gp.dot(mesh.vertices[tri[2]]));
    out.bary_logits[i] += softmax_backward(b, gb);
    for (int c = 0; c < 3; ++c) mesh_out.vertices[tri[c]] += b[c] * gp;
    out.displacement[i] += gp.dot(mesh.face_normals[f]);
    mesh_out.normals[f] += splats.displacement[i] * gp;

    const Mat3<T> rel = quat_to_matrix(splats.rotation[i]);
    mesh_out.frames[f] += g.rotation[i] * rel.transpose();
    out.rotation[i] += quat_to_matrix_backward<T>(splats.rotation[i], mesh.frames[f].transpose() * g.rotation[i]);
    out.log_scales[i] += g.scales[i].cwiseProduct(world.scales[i]);
    const T o = world.opacity[i];
    out.opacity_logit[i] += g.opacity[i] * o * (T(1) - o);
  }
}

/// Running per-splat screen-space positional gradient statistics.
template <typename T> struct DensifyStats {
  std::vector<T> accum;
  std::vector<int> count;

  void reset(size_t n) {
    accum.assign(n, T(0));
    count.assign(n, 0);
  }
  T average(size_t i) const { return count[i] > 0 ? accum[i] / T(count[i]) : T(0); }
};

struct DensifyOptions {
  bool enabled = true;
  double grad_threshold = 2e-4;
  double prune_opacity = 0.005;
  double split_factor = 1.6;
  /// A splat is "large" if its max scale exceeds this multiple of half the
  /// parent triangle's mean edge length (the initial scale).
  double large_scale_ratio = 1.0;
  int interval = 500;
  int start_iteration = 500;
  int stop_iteration = 10000;
  uint64_t seed = 0;
};

template <typename T> struct DensifyResult {
  SplatSet<T> splats;
  std::vector<int> origin;  // source splat for each output splat
  std::vector<char> fresh;  // 1 for newly created splats
  int cloned = 0;
  int split = 0;
  int pruned = 0;
};

/// Clone/split high-gradient splats and prune transparent ones. Children keep
/// the parent's triangle and rotation; barycentrics are resampled.
template <typename T>
DensifyResult<T> densify_prune(const SplatSet<T>& splats, const TemplateRig<T>& rig, const DensifyStats<T>& stats,
                               const DensifyOptions& opts) {
  DensifyResult<T> r;
  if (!opts.enabled) {
    r.splats = splats;
    r.origin.resize(splats.size());
    for (size_t i = 0; i < splats.size(); ++i) r.origin[i] = static_cast<int>(i);
    r.fresh.assign(splats.size(), 0);
    return r;
  }
  std::mt19937_64 rng(opts.seed);
  const T log_split = std::log(T(opts.split_factor));
  std::vector<size_t> clones;
  for (size_t i = 0; i < splats.size(); ++i) {
    if (static_cast<double>(splats.opacity(i)) < opts.prune_opacity) {
      ++r.pruned;
      continue;
    }
    const bool hot = i < stats.count.size() && static_cast<double>(stats.average(i)) > opts.grad_threshold;
    if (!hot) {
      r.splats.push_back_from(splats, i);
      r.origin.push_back(static_cast<int>(i));
      r.fresh.push_back(0);
      continue;
    }
    const T init_scale = T(0.5) * detail::mean_edge(rig, splats.parent[i]);
    const bool large = splats.scales(i).maxCoeff() > T(opts.large_scale_ratio) * init_scale;
    if (large) {
      ++r.split;
      for (int c = 0; c < 2; ++c) {
        r.splats.push_back_from(splats, i);
        r.splats.bary_logits.back() = detail::logits_from_bary(detail::sample_simplex<T>(rng));
        r.splats.log_scales.back().array() -= log_split;
        r.origin.push_back(static_cast<int>(i));
        r.fresh.push_back(1);
      }
    } else {
      r.splats.push_back_from(splats, i);
      r.origin.push_back(static_cast<int>(i));
      r.fresh.push_back(0);
      clones.push_back(i);
    }
  }
  for (size_t i : clones) {
    ++r.cloned;
    r.splats.push_back_from(splats, i);
    r.splats.bary_logits.back() = detail::logits_from_bary(detail::sample_simplex<T>(rng));
    r.origin.push_back(static_cast<int>(i));
    r.fresh.push_back(1);
  }
  return r;
}

}  // namespace uvsplat
