#pragma once

#include "uvsplat/io/atomic.hpp"
#include "uvsplat/math.hpp"

#include <Eigen/Sparse>

#include <array>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace uvsplat {

/// Triangles with area below this (model units squared) are degenerate.
inline constexpr double kDegenerateArea = 1e-12;

struct Joint {
  int parent = -1;
  std::string name;
  Mat3<double> rest_rotation = Mat3<double>::Identity();
  Vec3<double> rest_translation = Vec3<double>::Zero();
};

/// Generic deformable template: blendshapes + linear blend skinning + per-corner UVs.
///
/// Blendshapes are stored flat as [shape][vertex][xyz], skinning weights as
/// [vertex][joint]. The optional albedo basis (mean + linear components) lives
/// at its own resolution and is resampled to the atlas on use.
template <typename T> struct TemplateRig {
  std::vector<Vec3<T>> vertices;
  std::vector<std::array<int, 3>> triangles;
  std::vector<std::array<Vec2<T>, 3>> uvs;
  std::vector<T> blendshapes;
  int num_blendshapes = 0;
  std::vector<Joint> joints;
  std::vector<T> skin_weights;
  int albedo_resolution = 0;
  std::vector<T> albedo_mean;   // res * res * 3
  std::vector<T> albedo_basis;  // count * res * res * 3
  int albedo_components = 0;

  int num_vertices() const { return static_cast<int>(vertices.size()); }
  int num_triangles() const { return static_cast<int>(triangles.size()); }
  int num_joints() const { return static_cast<int>(joints.size()); }

  Vec3<T> blendshape(int k, int v) const {
    const size_t o = (static_cast<size_t>(k) * vertices.size() + v) * 3;
    return Vec3<T>(blendshapes[o], blendshapes[o + 1], blendshapes[o + 2]);
  }

  T weight(int v, int j) const { return skin_weights[static_cast<size_t>(v) * joints.size() + j]; }

  /// Throws DataError naming the offending field.
  void validate() const {
    const auto nv = vertices.size();
    if (uvs.size() != triangles.size()) throw DataError("rig: uvs count does not match triangles");
    for (size_t f = 0; f < triangles.size(); ++f) {
      const auto& t = triangles[f];
      for (int c = 0; c < 3; ++c) {
        if (t[c] < 0 || static_cast<size_t>(t[c]) >= nv)
          throw DataError("rig: triangles[" + std::to_string(f) + "] references invalid vertex");
        const Vec2<T>& uv = uvs[f][c];
        if (!(uv[0] >= T(0) && uv[0] <= T(1) && uv[1] >= T(0) && uv[1] <= T(1)))
          throw DataError("rig: uvs[" + std::to_string(f) + "] outside [0,1]^2");
      }
      if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2])
        throw DataError("rig: triangles[" + std::to_string(f) + "] repeats a vertex");
    }
    if (blendshapes.size() != static_cast<size_t>(num_blendshapes) * nv * 3)
      throw DataError("rig: blendshapes size mismatch");
    if (joints.empty()) throw DataError("rig: joints must not be empty");
    for (size_t j = 0; j < joints.size(); ++j) {
      if (joints[j].parent >= static_cast<int>(j) || (j == 0) != (joints[j].parent < 0))
        throw DataError("rig: joints[" + std::to_string(j) + "] parent must precede it");
      const Mat3<double>& r = joints[j].rest_rotation;
      if ((r.transpose() * r - Mat3<double>::Identity()).cwiseAbs().maxCoeff() > 1e-5)
        throw DataError("rig: joints[" + std::to_string(j) + "] rest rotation not orthonormal");
    }
    if (skin_weights.size() != nv * joints.size()) throw DataError("rig: skin_weights size mismatch");
    for (size_t v = 0; v < nv; ++v) {
      double sum = 0;
      for (size_t j = 0; j < joints.size(); ++j) {
        const T w = skin_weights[v * joints.size() + j];
        if (!(w >= T(0))) throw DataError("rig: skin_weights row " + std::to_string(v) + " negative");
        sum += static_cast<double>(w);
      }
      if (std::abs(sum - 1.0) > 1e-6)
        throw DataError("rig: skin_weights row " + std::to_string(v) + " does not sum to 1");
    }
    const size_t texels = static_cast<size_t>(albedo_resolution) * albedo_resolution * 3;
    if (albedo_mean.size() != (albedo_resolution > 0 ? texels : 0) ||
        albedo_basis.size() != texels * albedo_components)
      throw DataError("rig: albedo basis size mismatch");
  }

  template <typename U> TemplateRig<U> cast() const {
    TemplateRig<U> out;
    for (const auto& v : vertices) out.vertices.push_back(v.template cast<U>());
    out.triangles = triangles;
    for (const auto& c : uvs) out.uvs.push_back({c[0].template cast<U>(), c[1].template cast<U>(), c[2].template cast<U>()});
    out.blendshapes.assign(blendshapes.begin(), blendshapes.end());
    out.num_blendshapes = num_blendshapes;
    out.joints = joints;
    out.skin_weights.assign(skin_weights.begin(), skin_weights.end());
    out.albedo_resolution = albedo_resolution;
    out.albedo_mean.assign(albedo_mean.begin(), albedo_mean.end());
    out.albedo_basis.assign(albedo_basis.begin(), albedo_basis.end());
    out.albedo_components = albedo_components;
    return out;
  }
};

/// Expression coefficients plus per-joint rotations (w,x,y,z) and root translation.
template <typename T> struct RigParams {
  std::vector<T> expression;
  std::vector<Vec4<T>> joint_rotations;
  Vec3<T> root_translation = Vec3<T>::Zero();

  static RigParams identity(const TemplateRig<T>& rig) {
    RigParams p;
    p.expression.assign(rig.num_blendshapes, T(0));
    p.joint_rotations.assign(rig.joints.size(), quat_identity<T>());
    return p;
  }
};

template <typename T> struct DeformedMesh {
  std::vector<Vec3<T>> vertices;
  std::vector<Vec3<T>> face_normals;
  std::vector<Mat3<T>> frames;  // columns: tangent, bitangent, normal
  std::vector<int> degenerate;  // triangle indices below the area threshold
  // Kept for the adjoint pass.
  std::vector<Vec3<T>> shaped;  // rest pose after blendshapes
  std::vector<Mat3<T>> skin_linear;
  std::vector<Vec3<T>> skin_offset;

  bool is_degenerate(int f) const {
    return std::binary_search(degenerate.begin(), degenerate.end(), f);
  }
};

template <typename T> struct FrameSet {
  std::vector<Mat3<T>> frames;
  std::vector<Vec3<T>> normals;
  std::vector<int> degenerate;
};

/// Orthonormal (tangent, bitangent, normal) frame per triangle. Degenerate
/// triangles get an identity frame and are listed in `degenerate`.
template <typename T>
FrameSet<T> triangle_frames(const std::vector<Vec3<T>>& verts,
                            const std::vector<std::array<int, 3>>& tris) {
  FrameSet<T> out;
  out.frames.resize(tris.size());
  out.normals.resize(tris.size());
  for (size_t f = 0; f < tris.size(); ++f) {
    const Vec3<T>& a = verts[tris[f][0]];
    const Vec3<T> e1 = verts[tris[f][1]] - a;
    const Vec3<T> e2 = verts[tris[f][2]] - a;
    const Vec3<T> c = e1.cross(e2);
    const T len = c.norm();
    if (static_cast<double>(len) * 0.5 < kDegenerateArea) {
      out.frames[f].setIdentity();
      out.normals[f] = Vec3<T>::UnitZ();
      out.degenerate.push_back(static_cast<int>(f));
      continue;
    }
    const Vec3<T> n = c / len;
    const Vec3<T> tan = (e1 - e1.dot(n) * n).normalized();
    out.frames[f].col(0) = tan;
    out.frames[f].col(1) = n.cross(tan);
    out.frames[f].col(2) = n;
    out.normals[f] = n;
  }
  return out;
}

/// For callers that cannot skip degenerate triangles.
template <typename T> void require_nondegenerate(const FrameSet<T>& fs) {
  if (fs.degenerate.empty()) return;
  std::string list;
  for (size_t i = 0; i < fs.degenerate.size() && i < 8; ++i) list += (i ? ", " : "") + std::to_string(fs.degenerate[i]);
  if (fs.degenerate.size() > 8) list += ", ...";
  throw DataError("degenerate triangle(s): " + list);
}

template <typename T>
FrameSet<T> triangle_frames(const DeformedMesh<T>& mesh, const TemplateRig<T>& rig) {
  return triangle_frames(mesh.vertices, rig.triangles);
}

/// Adjoint of triangle_frames. Accumulates into grad_verts.
template <typename T>
void triangle_frames_backward(const std::vector<Vec3<T>>& verts,
                              const std::vector<std::array<int, 3>>& tris,
                              const std::vector<Mat3<T>>& grad_frames,
                              const std::vector<Vec3<T>>& grad_normals,
                              std::vector<Vec3<T>>& grad_verts) {
  for (size_t f = 0; f < tris.size(); ++f) {
    const auto& tri = tris[f];
    const Vec3<T>& a = verts[tri[0]];
    const Vec3<T> e1 = verts[tri[1]] - a;
    const Vec3<T> e2 = verts[tri[2]] - a;
    const Vec3<T> c = e1.cross(e2);
    if (static_cast<double>(c.norm()) * 0.5 < kDegenerateArea) continue;
    const Vec3<T> n = c.normalized();
    const Vec3<T> u = e1 - e1.dot(n) * n;
    const Vec3<T> tan = u.normalized();

    Vec3<T> g_t = grad_frames[f].col(0);
    const Vec3<T> g_b = grad_frames[f].col(1);
    Vec3<T> g_n = grad_frames[f].col(2);
    if (!grad_normals.empty()) g_n += grad_normals[f];
    // b = n x t
    g_n += tan.cross(g_b);
    g_t += g_b.cross(n);
    const Vec3<T> g_u = normalize_backward<T, 3>(u, g_t);
    Vec3<T> g_e1 = g_u - n * n.dot(g_u);
    g_n += -e1.dot(n) * g_u - e1 * n.dot(g_u);
    const Vec3<T> g_c = normalize_backward<T, 3>(c, g_n);
    g_e1 += e2.cross(g_c);
    const Vec3<T> g_e2 = g_c.cross(e1);
    grad_verts[tri[1]] += g_e1;
    grad_verts[tri[2]] += g_e2;
    grad_verts[tri[0]] -= g_e1 + g_e2;
  }
}

namespace detail {

template <typename T> struct Rigid {
  Mat3<T> r = Mat3<T>::Identity();
  Vec3<T> t = Vec3<T>::Zero();
  Rigid operator*(const Rigid& o) const { return {r * o.r, r * o.t + t}; }
  Rigid inverse() const { return {r.transpose(), -(r.transpose() * t)}; }
};

}  // namespace detail

/// Blendshapes in rest pose, then linear blend skinning.
template <typename T> DeformedMesh<T> deform(const TemplateRig<T>& rig, const RigParams<T>& params) {
  if (params.expression.size() != static_cast<size_t>(rig.num_blendshapes))
    throw DataError("deform: expression has " + std::to_string(params.expression.size()) +
                    " coefficients, rig has " + std::to_string(rig.num_blendshapes) + " blendshapes");
  if (params.joint_rotations.size() != rig.joints.size())
    throw DataError("deform: joint rotation count does not match rig");
  const int nv = rig.num_vertices();
  const int nj = rig.num_joints();
  DeformedMesh<T> mesh;
  mesh.shaped = rig.vertices;
  for (int k = 0; k < rig.num_blendshapes; ++k) {
    const T c = params.expression[k];
    if (c == T(0)) continue;
    for (int v = 0; v < nv; ++v) mesh.shaped[v] += c * rig.blendshape(k, v);
  }

  std::vector<detail::Rigid<T>> rest(nj), posed(nj);
  std::vector<char> moved(nj, 0);
  for (int j = 0; j < nj; ++j) {
    moved[j] = params.joint_rotations[j] != quat_identity<T>() ||
               (rig.joints[j].parent < 0 ? !params.root_translation.isZero(0) : moved[rig.joints[j].parent]);
    const Joint& joint = rig.joints[j];
    detail::Rigid<T> local{joint.rest_rotation.template cast<T>(), joint.rest_translation.template cast<T>()};
    detail::Rigid<T> rot{quat_to_matrix(params.joint_rotations[j]), Vec3<T>::Zero()};
    if (joint.parent < 0) {
      rest[j] = local;
      posed[j] = detail::Rigid<T>{Mat3<T>::Identity(), params.root_translation} * local * rot;
    } else {
      rest[j] = rest[joint.parent] * local;
      posed[j] = posed[joint.parent] * local * rot;
    }
  }
  mesh.skin_linear.resize(nj);
  mesh.skin_offset.resize(nj);
  // Unmoved joints get an exact identity so the rest pose reproduces V_t bit for bit.
  for (int j = 0; j < nj; ++j) {
    const auto m = moved[j] ? posed[j] * rest[j].inverse() : detail::Rigid<T>{};
    mesh.skin_linear[j] = m.r;
    mesh.skin_offset[j] = m.t;
  }

  // Written as a displacement from the rest shape, which equals the usual
  // weighted sum while the weights sum to one.
  mesh.vertices.assign(nv, Vec3<T>::Zero());
  for (int v = 0; v < nv; ++v) {
    Vec3<T> acc = Vec3<T>::Zero();
    for (int j = 0; j < nj; ++j) {
      const T w = rig.weight(v, j);
      if (w == T(0) || !moved[j]) continue;
      acc += w * (mesh.skin_linear[j] * mesh.shaped[v] - mesh.shaped[v] + mesh.skin_offset[j]);
    }
    mesh.vertices[v] = mesh.shaped[v] + acc;
  }
  auto fs = triangle_frames(mesh.vertices, rig.triangles);
  mesh.frames = std::move(fs.frames);
  mesh.face_normals = std::move(fs.normals);
  mesh.degenerate = std::move(fs.degenerate);
  return mesh;
}

/// Gradients of the learnable rig attributes. Joints and pose are fixed.
template <typename T> struct RigGrads {
  std::vector<Vec3<T>> vertices;
  std::vector<T> skin_weights;
  std::vector<T> blendshapes;
  std::vector<T> expression;

  static RigGrads zeros(const TemplateRig<T>& rig) {
    RigGrads g;
    g.vertices.assign(rig.vertices.size(), Vec3<T>::Zero());
    g.skin_weights.assign(rig.skin_weights.size(), T(0));
    g.blendshapes.assign(rig.blendshapes.size(), T(0));
    g.expression.assign(rig.num_blendshapes, T(0));
    return g;
  }
};

/// Adjoint of deform given dL/dV_d. Accumulates into `out`.
template <typename T>
void deform_backward(const TemplateRig<T>& rig, const RigParams<T>& params, const DeformedMesh<T>& mesh,
                     const std::vector<Vec3<T>>& grad_deformed, RigGrads<T>& out) {
  const int nv = rig.num_vertices();
  const int nj = rig.num_joints();
  std::vector<Vec3<T>> g_shaped(nv, Vec3<T>::Zero());
  for (int v = 0; v < nv; ++v) {
    const Vec3<T>& g = grad_deformed[v];
    g_shaped[v] = g;
    for (int j = 0; j < nj; ++j) {
      const T w = rig.weight(v, j);
      out.skin_weights[static_cast<size_t>(v) * nj + j] +=
          g.dot(mesh.skin_linear[j] * mesh.shaped[v] - mesh.shaped[v] + mesh.skin_offset[j]);
      if (w != T(0)) g_shaped[v] += w * (mesh.skin_linear[j].transpose() * g - g);
    }
  }
  for (int v = 0; v < nv; ++v) out.vertices[v] += g_shaped[v];
  for (int k = 0; k < rig.num_blendshapes; ++k) {
    T acc = T(0);
    const T c = params.expression[k];
    for (int v = 0; v < nv; ++v) {
      const size_t o = (static_cast<size_t>(k) * nv + v) * 3;
      acc += g_shaped[v].dot(rig.blendshape(k, v));
      for (int d = 0; d < 3; ++d) out.blendshapes[o + d] += c * g_shaped[v][d];
    }
    out.expression[k] += acc;
  }
}

/// Uniform graph Laplacian: vertex degree on the diagonal, -1 per edge.
template <typename T> Eigen::SparseMatrix<T> laplacian(const TemplateRig<T>& rig) {
  const int nv = rig.num_vertices();
  std::vector<std::pair<int, int>> edges;
  for (const auto& t : rig.triangles)
    for (int c = 0; c < 3; ++c) {
      int a = t[c], b = t[(c + 1) % 3];
      if (a > b) std::swap(a, b);
      edges.emplace_back(a, b);
    }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  std::vector<Eigen::Triplet<T>> trip;
  std::vector<int> degree(nv, 0);
  for (const auto& [a, b] : edges) {
    trip.emplace_back(a, b, T(-1));
    trip.emplace_back(b, a, T(-1));
    ++degree[a];
    ++degree[b];
  }
  for (int v = 0; v < nv; ++v) trip.emplace_back(v, v, T(degree[v]));
  Eigen::SparseMatrix<T> lap(nv, nv);
  lap.setFromTriplets(trip.begin(), trip.end());
  return lap;
}

// ---------------------------------------------------------------------------
// Rig file: "UVSPLATR", version byte, text header terminated by "end\n",
// then a little-endian float32/uint32 payload. See docs/formats.md.

inline constexpr char kRigMagic[8] = {'U', 'V', 'S', 'P', 'L', 'A', 'T', 'R'};
inline constexpr uint8_t kRigVersion = 1;

namespace detail {

inline void write_f32(std::ostream& os, double v) {
  const float f = static_cast<float>(v);
  os.write(reinterpret_cast<const char*>(&f), 4);
}

inline void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

class PayloadReader {
 public:
  PayloadReader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

  float f32() {
    float f;
    read(&f, 4);
    return f;
  }
  uint32_t u32() {
    uint32_t u;
    read(&u, 4);
    return u;
  }

 private:
  void read(void* dst, size_t n) {
    const auto offset = is_.tellg();
    if (!is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n)))
      throw DataError(what_ + ": truncated payload at byte offset " + std::to_string(static_cast<long long>(offset)));
  }
  std::istream& is_;
  std::string what_;
};

}  // namespace detail

template <typename T> void write_rig(std::ostream& os, const TemplateRig<T>& rig) {
  os.write(kRigMagic, 8);
  os.put(static_cast<char>(kRigVersion));
  os << "\nvertices " << rig.vertices.size() << "\ntriangles " << rig.triangles.size()
     << "\nblendshapes " << rig.num_blendshapes << "\njoints " << rig.joints.size() << "\n";
  for (const auto& j : rig.joints) os << "joint " << j.parent << " " << (j.name.empty() ? "-" : j.name) << "\n";
  os << "albedo_basis " << rig.albedo_resolution << " " << rig.albedo_components << "\nend\n";
  for (const auto& v : rig.vertices)
    for (int d = 0; d < 3; ++d) detail::write_f32(os, static_cast<double>(v[d]));
  for (const auto& t : rig.triangles)
    for (int c = 0; c < 3; ++c) detail::write_u32(os, static_cast<uint32_t>(t[c]));
  for (const auto& c : rig.uvs)
    for (int k = 0; k < 3; ++k)
      for (int d = 0; d < 2; ++d) detail::write_f32(os, static_cast<double>(c[k][d]));
  for (T b : rig.blendshapes) detail::write_f32(os, static_cast<double>(b));
  for (const auto& j : rig.joints) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) detail::write_f32(os, j.rest_rotation(r, c));
    for (int d = 0; d < 3; ++d) detail::write_f32(os, j.rest_translation[d]);
  }
  for (T w : rig.skin_weights) detail::write_f32(os, static_cast<double>(w));
  for (T a : rig.albedo_mean) detail::write_f32(os, static_cast<double>(a));
  for (T a : rig.albedo_basis) detail::write_f32(os, static_cast<double>(a));
}

template <typename T> TemplateRig<T> read_rig(std::istream& is, const std::string& what = "rig") {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kRigMagic, 8) != 0)
    throw DataError(what + ": bad magic at offset 0 (expected UVSPLATR)");
  const int version = is.get();
  if (version != kRigVersion)
    throw DataError(what + ": unsupported rig format version " + std::to_string(version));

  TemplateRig<T> rig;
  size_t nv = 0, nf = 0, nj = 0;
  int line_no = 0;
  std::string line;
  std::getline(is, line);  // remainder of the version line
  bool ended = false;
  while (std::getline(is, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    auto fail = [&](const std::string& msg) {
      throw DataError(what + ": header line " + std::to_string(line_no) + ": " + msg);
    };
    if (key == "end") {
      ended = true;
      break;
    } else if (key == "vertices") {
      if (!(ls >> nv)) fail("expected vertex count");
    } else if (key == "triangles") {
      if (!(ls >> nf)) fail("expected triangle count");
    } else if (key == "blendshapes") {
      if (!(ls >> rig.num_blendshapes) || rig.num_blendshapes < 0) fail("expected blendshape count");
    } else if (key == "joints") {
      if (!(ls >> nj)) fail("expected joint count");
    } else if (key == "joint") {
      Joint j;
      if (!(ls >> j.parent >> j.name)) fail("expected 'joint <parent> <name>'");
      if (j.name == "-") j.name.clear();
      rig.joints.push_back(j);
    } else if (key == "albedo_basis") {
      if (!(ls >> rig.albedo_resolution >> rig.albedo_components) || rig.albedo_resolution < 0 ||
          rig.albedo_components < 0)
        fail("expected 'albedo_basis <res> <count>'");
    } else if (!key.empty()) {
      fail("unknown key '" + key + "'");
    }
  }
  if (!ended) throw DataError(what + ": header not terminated by 'end'");
  if (rig.joints.size() != nj) throw DataError(what + ": joint lines do not match joint count");

  detail::PayloadReader rd(is, what);
  rig.vertices.resize(nv);
  for (auto& v : rig.vertices)
    for (int d = 0; d < 3; ++d) v[d] = T(rd.f32());
  rig.triangles.resize(nf);
  for (auto& t : rig.triangles)
    for (int c = 0; c < 3; ++c) t[c] = static_cast<int>(rd.u32());
  rig.uvs.resize(nf);
  for (auto& c : rig.uvs)
    for (int k = 0; k < 3; ++k)
      for (int d = 0; d < 2; ++d) c[k][d] = T(rd.f32());
  rig.blendshapes.resize(static_cast<size_t>(rig.num_blendshapes) * nv * 3);
  for (auto& b : rig.blendshapes) b = T(rd.f32());
  for (auto& j : rig.joints) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) j.rest_rotation(r, c) = rd.f32();
    for (int d = 0; d < 3; ++d) j.rest_translation[d] = rd.f32();
  }
  rig.skin_weights.resize(nv * nj);
  for (auto& w : rig.skin_weights) w = T(rd.f32());
  const size_t texels = static_cast<size_t>(rig.albedo_resolution) * rig.albedo_resolution * 3;
  rig.albedo_mean.resize(rig.albedo_resolution > 0 ? texels : 0);
  for (auto& a : rig.albedo_mean) a = T(rd.f32());
  rig.albedo_basis.resize(texels * rig.albedo_components);
  for (auto& a : rig.albedo_basis) a = T(rd.f32());
  rig.validate();
  return rig;
}

template <typename T> TemplateRig<T> load_rig(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open rig file '" + path + "'");
  return read_rig<T>(is, path);
}

template <typename T> void save_rig(const std::string& path, const TemplateRig<T>& rig) {
  io::write_atomically(path, [&](std::ostream& os) { write_rig(os, rig); });
}

}  // namespace uvsplat
