#pragma once

#include "uvsplat/math.hpp"
#include "uvsplat/rig.hpp"
#include "uvsplat/splat.hpp"

#include <Eigen/SVD>

#include <vector>

namespace uvsplat {

/// Below this determinant of J_v^T J_v the pseudo-inverse is taken by SVD.
inline constexpr double kPinvSvdThreshold = 1e-18;
/// Same, relative to trace^2 (about the squared inverse condition number).
/// Inverting the Gram matrix squares the condition number, so needles go to
/// SVD long before their determinant is tiny.
inline constexpr double kPinvSvdRelThreshold = 1e-8;

/// Per-triangle affine maps from barycentric (b, c) to world and to UV.
template <typename T> struct TriangleUVJacobians {
  std::vector<Mat32<T>> jv;       // [V_B - V_A | V_C - V_A]
  std::vector<Mat23<T>> jv_pinv;  // left pseudo-inverse of jv
  std::vector<Mat2<T>> juv;       // [UV_B - UV_A | UV_C - UV_A]
  std::vector<Vec2<T>> uv_a;
  std::vector<Vec3<T>> v_a;
  std::vector<char> used_svd;

  size_t size() const { return jv.size(); }
};

/// Closed-form (J^T J)^-1 J^T, or SVD when J^T J is near singular.
template <typename T> Mat23<T> pseudo_inverse(const Mat32<T>& j, bool* used_svd = nullptr) {
  const Mat2<T> m = j.transpose() * j;
  const T det = m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
  const double tr = static_cast<double>(m(0, 0) + m(1, 1));
  if (static_cast<double>(det) >= kPinvSvdThreshold && static_cast<double>(det) >= kPinvSvdRelThreshold * tr * tr) {
    if (used_svd) *used_svd = false;
    Mat2<T> inv;
    inv << m(1, 1), -m(0, 1), -m(1, 0), m(0, 0);
    return (inv / det) * j.transpose();
  }
  if (used_svd) *used_svd = true;
  Eigen::JacobiSVD<Mat32<T>> svd(j, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  Mat2<T> inv_sigma = Mat2<T>::Zero();
  for (int k = 0; k < 2; ++k)
    if (sv[k] > T(0)) inv_sigma(k, k) = T(1) / sv[k];
  return svd.matrixV() * inv_sigma * svd.matrixU().leftCols(2).transpose();
}

template <typename T>
TriangleUVJacobians<T> build_triangle_jacobians(const DeformedMesh<T>& mesh, const TemplateRig<T>& rig) {
  TriangleUVJacobians<T> out;
  const int nf = rig.num_triangles();
  out.jv.resize(nf);
  out.jv_pinv.resize(nf);
  out.juv.resize(nf);
  out.uv_a.resize(nf);
  out.v_a.resize(nf);
  out.used_svd.assign(nf, 0);
  for (int f = 0; f < nf; ++f) {
    const auto& tri = rig.triangles[f];
    const Vec3<T>& a = mesh.vertices[tri[0]];
    out.jv[f].col(0) = mesh.vertices[tri[1]] - a;
    out.jv[f].col(1) = mesh.vertices[tri[2]] - a;
    if (static_cast<double>(out.jv[f].col(0).cross(out.jv[f].col(1)).norm()) * 0.5 < kDegenerateArea)
      throw DataError("build_triangle_jacobians: triangle " + std::to_string(f) + " is degenerate");
    bool svd = false;
    out.jv_pinv[f] = pseudo_inverse<T>(out.jv[f], &svd);
    out.used_svd[f] = svd ? 1 : 0;
    const auto& uv = rig.uvs[f];
    out.juv[f].col(0) = uv[1] - uv[0];
    out.juv[f].col(1) = uv[2] - uv[0];
    out.uv_a[f] = uv[0];
    out.v_a[f] = a;
  }
  return out;
}

/// Adjoint of the pseudo-inverse for a full column rank J:
/// dJ+ = -J+ dJ J+ + (J^T J)^-1 dJ^T (I - J J+).
template <typename T> Mat32<T> pseudo_inverse_backward(const Mat32<T>& j, const Mat23<T>& pinv, const Mat23<T>& g) {
  const Mat2<T> gram_inv = (j.transpose() * j).inverse();
  const Mat3<T> residual = Mat3<T>::Identity() - j * pinv;
  return -pinv.transpose() * g * pinv.transpose() + residual * g.transpose() * gram_inv;
}

/// Accumulates dL/dV_d given dL/dJ_v+ per triangle.
template <typename T>
void build_triangle_jacobians_backward(const TriangleUVJacobians<T>& jac, const TemplateRig<T>& rig,
                                       const std::vector<Mat23<T>>& grad_pinv, std::vector<Vec3<T>>& grad_verts) {
  for (size_t f = 0; f < jac.size(); ++f) {
    if (grad_pinv[f].isZero(0)) continue;
    const Mat32<T> gj = pseudo_inverse_backward<T>(jac.jv[f], jac.jv_pinv[f], grad_pinv[f]);
    const auto& tri = rig.triangles[f];
    grad_verts[tri[1]] += gj.col(0);
    grad_verts[tri[2]] += gj.col(1);
    grad_verts[tri[0]] -= gj.col(0) + gj.col(1);
  }
}

/// Per-splat affine map (s, t) -> (u, v) = uv0 + J (s, t).
template <typename T> struct SplatUVTransform {
  std::vector<Vec2<T>> uv0;
  std::vector<Mat2<T>> jac;

  size_t size() const { return uv0.size(); }
};

/// uv0 from the barycentrics; J = J_uv J_v+ [s | t]. `zero_jacobian` gives the
/// constant-UV-per-splat ablation.
template <typename T>
SplatUVTransform<T> build_splat_uv_transforms(const WorldSplats<T>& world, const TriangleUVJacobians<T>& jac,
                                              const SplatSet<T>& splats, const TemplateRig<T>& rig,
                                              bool zero_jacobian = false) {
  SplatUVTransform<T> out;
  const size_t n = splats.size();
  out.uv0.resize(n);
  out.jac.resize(n);
  for (size_t i = 0; i < n; ++i) {
    const int f = splats.parent[i];
    if (f < 0 || static_cast<size_t>(f) >= jac.size())
      throw DataError("build_splat_uv_transforms: splat " + std::to_string(i) + " has invalid parent");
    const Vec3<T> b = splats.bary(i);
    const auto& uv = rig.uvs[f];
    out.uv0[i] = b[0] * uv[0] + b[1] * uv[1] + b[2] * uv[2];
    if (zero_jacobian) {
      out.jac[i].setZero();
      continue;
    }
    Mat32<T> jst;
    jst.col(0) = world.tangent_s(i);
    jst.col(1) = world.tangent_t(i);
    out.jac[i] = jac.juv[f] * (jac.jv_pinv[f] * jst);
  }
  return out;
}

template <typename T> struct SplatUVGrads {
  std::vector<Vec2<T>> uv0;
  std::vector<Mat2<T>> jac;

  static SplatUVGrads zeros(size_t n) {
    SplatUVGrads g;
    g.uv0.assign(n, Vec2<T>::Zero());
    g.jac.assign(n, Mat2<T>::Zero());
    return g;
  }
};

/// Adjoint of build_splat_uv_transforms. Accumulates barycentric-logit grads,
/// world rotation/scale grads and per-triangle pseudo-inverse grads.
template <typename T>
void build_splat_uv_transforms_backward(const WorldSplats<T>& world, const TriangleUVJacobians<T>& jac,
                                        const SplatSet<T>& splats, const TemplateRig<T>& rig,
                                        const SplatUVGrads<T>& g, bool zero_jacobian, SplatGrads<T>& splat_out,
                                        WorldSplatGrads<T>& world_out, std::vector<Mat23<T>>& pinv_out) {
  for (size_t i = 0; i < splats.size(); ++i) {
    const int f = splats.parent[i];
    const auto& uv = rig.uvs[f];
    const Vec3<T> b = splats.bary(i);
    const Vec3<T> gb(g.uv0[i].dot(uv[0]), g.uv0[i].dot(uv[1]), g.uv0[i].dot(uv[2]));
    splat_out.bary_logits[i] += softmax_backward(b, gb);
    if (zero_jacobian) continue;
    Mat32<T> jst;
    jst.col(0) = world.tangent_s(i);
    jst.col(1) = world.tangent_t(i);
    // J = Juv * P * Jst
    const Mat2<T> gm = jac.juv[f].transpose() * g.jac[i];  // dL/d(P Jst)
    pinv_out[f] += gm * jst.transpose();
    const Mat32<T> gjst = jac.jv_pinv[f].transpose() * gm;
    const Vec2<T>& sc = world.scales[i];
    const Mat3<T>& r = world.rotation[i];
    world_out.rotation[i].col(0) += sc[0] * gjst.col(0);
    world_out.rotation[i].col(1) += sc[1] * gjst.col(1);
    world_out.scales[i][0] += gjst.col(0).dot(r.col(0));
    world_out.scales[i][1] += gjst.col(1).dot(r.col(1));
  }
}

template <typename T> Vec2<T> map_st_to_uv(const SplatUVTransform<T>& xf, size_t i, T s, T t) {
  return xf.uv0[i] + xf.jac[i] * Vec2<T>(s, t);
}

/// Baseline: orthogonal projection onto the triangle plane, barycentrics from
/// signed areas, then UV interpolation.
template <typename T>
Vec2<T> naive_project_uv(const Vec3<T>& point, int triangle, const DeformedMesh<T>& mesh, const TemplateRig<T>& rig) {
  const auto& tri = rig.triangles[triangle];
  const Vec3<T>& a = mesh.vertices[tri[0]];
  const Vec3<T> e1 = mesh.vertices[tri[1]] - a;
  const Vec3<T> e2 = mesh.vertices[tri[2]] - a;
  const Vec3<T> n = e1.cross(e2);
  const T nn = n.dot(n);
  if (static_cast<double>(std::sqrt(nn)) * 0.5 < kDegenerateArea)
    throw DataError("naive_project_uv: triangle " + std::to_string(triangle) + " is degenerate");
  // The normal component of d drops out of both triple products, so this is
  // already the orthogonal projection. Vertices map to their UVs exactly.
  const Vec3<T> d = point - a;
  const T beta = d.cross(e2).dot(n) / nn;
  const T gamma = e1.cross(d).dot(n) / nn;
  const auto& uv = rig.uvs[triangle];
  return (T(1) - beta - gamma) * uv[0] + beta * uv[1] + gamma * uv[2];
}

}  // namespace uvsplat
