#pragma once

#include "uvsplat/io/dataset.hpp"
#include "uvsplat/io/tensor_file.hpp"
#include "uvsplat/optim.hpp"
#include "uvsplat/pipeline.hpp"

#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

namespace uvsplat::io {

inline constexpr char kCheckpointMagic[8] = {'U', 'V', 'S', 'P', 'L', 'A', 'T', 'C'};
inline constexpr uint32_t kCheckpointVersion = 1;

/// Full training state: model, per-frame metadata, optimizer and schedule state.
template <typename T> struct Checkpoint {
  Model<T> model;
  std::vector<Camera<double>> cameras;     // per dataset frame
  std::vector<RigParams<double>> params;   // per dataset frame (pose + initial expression)
  std::map<std::string, AdamGroup<T>> adam;
  int64_t iteration = 0;
  DensifyStats<T> densify;
  std::vector<double> loss_history;
  uint64_t config_hash = 0;
  std::string config_json;
};

namespace detail {

// Stores float models as f32 and double models as f64 so round trips are exact.
template <typename T> void put_real(TensorFile& f, const std::string& name, std::vector<uint64_t> shape, const T* data) {
  if constexpr (std::is_same_v<T, double>) {
    f.put_f64(name, shape, data);
  } else {
    f.put_f32(name, shape, data);
  }
}

template <typename T> std::vector<T> get_real(const TensorFile& f, const std::string& name) {
  const auto& t = f.get(name);
  if (t.dtype == TensorFile::kF64) {
    const auto v = f.get_f64(name);
    return std::vector<T>(v.begin(), v.end());
  }
  return f.template get_f32<T>(name);
}

template <typename T, typename V> void put_vecs(TensorFile& f, const std::string& name, const std::vector<V>& v) {
  constexpr int k = V::RowsAtCompileTime;
  std::vector<T> flat;
  flat.reserve(v.size() * k);
  for (const auto& x : v)
    for (int i = 0; i < k; ++i) flat.push_back(x[i]);
  put_real<T>(f, name, {v.size(), static_cast<uint64_t>(k)}, flat.data());
}

template <typename T, typename V> std::vector<V> get_vecs(const TensorFile& f, const std::string& name) {
  constexpr int k = V::RowsAtCompileTime;
  const auto flat = get_real<T>(f, name);
  if (flat.size() % k) throw DataError("checkpoint: tensor '" + name + "' has a bad shape");
  std::vector<V> v(flat.size() / k);
  for (size_t j = 0; j < v.size(); ++j)
    for (int i = 0; i < k; ++i) v[j][i] = flat[j * k + i];
  return v;
}

inline std::vector<unsigned char> string_bytes(const std::string& s) { return {s.begin(), s.end()}; }
inline std::string bytes_string(const std::vector<unsigned char>& b) { return {b.begin(), b.end()}; }

template <typename T> std::vector<unsigned char> rig_bytes(const TemplateRig<T>& rig) {
  std::ostringstream os(std::ios::binary);
  write_rig(os, rig);
  return string_bytes(os.str());
}

template <typename T> TemplateRig<T> rig_from_bytes(const std::vector<unsigned char>& b, const std::string& what) {
  std::istringstream is(bytes_string(b), std::ios::binary);
  return read_rig<T>(is, what);
}

}  // namespace detail

template <typename T> TensorFile checkpoint_tensors(const Checkpoint<T>& ck) {
  using detail::put_real;
  using detail::put_vecs;
  TensorFile f;
  f.tag = ck.config_hash;
  const auto& m = ck.model;
  f.put_u8("rig", detail::rig_bytes(m.rig));
  f.put_u8("rig_init", detail::rig_bytes(m.rig_init));
  if constexpr (std::is_same_v<T, double>) {
    // The rig format stores f32; keep the tunable rig tensors at full precision.
    for (const auto* r : {&m.rig, &m.rig_init}) {
      const std::string p = r == &m.rig ? "rig." : "rig_init.";
      put_vecs<T>(f, p + "vertices", r->vertices);
      put_real<T>(f, p + "skin_weights", {r->skin_weights.size()}, r->skin_weights.data());
      put_real<T>(f, p + "blendshapes", {r->blendshapes.size()}, r->blendshapes.data());
    }
  }
  const auto& s = m.splats;
  f.put_i32("splats.parent", std::vector<int32_t>(s.parent.begin(), s.parent.end()));
  put_vecs<T>(f, "splats.bary_logits", s.bary_logits);
  put_vecs<T>(f, "splats.rotation", s.rotation);
  put_vecs<T>(f, "splats.log_scales", s.log_scales);
  put_real<T>(f, "splats.displacement", {s.displacement.size()}, s.displacement.data());
  put_real<T>(f, "splats.opacity_logit", {s.opacity_logit.size()}, s.opacity_logit.data());
  const uint64_t res = static_cast<uint64_t>(m.atlas.resolution);
  put_real<T>(f, "atlas.material", {res, res, kMaterialChannels}, m.atlas.material.data());
  put_real<T>(f, "atlas.normal", {res, res, kNormalChannels}, m.atlas.normal.data());
  f.put_u8("atlas.uv_mask", m.atlas.uv_mask);
  const uint64_t es = static_cast<uint64_t>(m.env.raw.size);
  put_real<T>(f, "env.raw", {6, es, es, 3}, m.env.raw.data.data());
  put_real<T>(f, "stat_coeffs", {m.stat_coeffs.size()}, m.stat_coeffs.data());
  std::vector<T> ex, ex0;
  for (const auto& e : m.expressions) ex.insert(ex.end(), e.begin(), e.end());
  for (const auto& e : m.expressions_init) ex0.insert(ex0.end(), e.begin(), e.end());
  const uint64_t k = static_cast<uint64_t>(m.rig.num_blendshapes);
  put_real<T>(f, "expressions", {m.expressions.size(), k}, ex.data());
  put_real<T>(f, "expressions_init", {m.expressions_init.size(), k}, ex0.data());

  std::vector<double> cams, params;
  for (const auto& c : ck.cameras) {
    cams.insert(cams.end(), {c.fx, c.fy, c.cx, c.cy, double(c.width), double(c.height)});
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) cams.push_back(c.rotation(i, j));
    for (int i = 0; i < 3; ++i) cams.push_back(c.position[i]);
  }
  for (const auto& p : ck.params) {
    params.insert(params.end(), p.expression.begin(), p.expression.end());
    for (const auto& q : p.joint_rotations) params.insert(params.end(), {q[0], q[1], q[2], q[3]});
    for (int i = 0; i < 3; ++i) params.push_back(p.root_translation[i]);
  }
  f.put_f64("frames.cameras", cams);
  f.put_f64("frames.params", params);
  f.put_u64("frames.count", {ck.cameras.size()});

  for (const auto& [name, g] : ck.adam) {
    put_real<T>(f, "adam." + name + ".m", {g.m.size()}, g.m.data());
    put_real<T>(f, "adam." + name + ".v", {g.v.size()}, g.v.data());
    f.put_u64("adam." + name + ".step", {static_cast<uint64_t>(g.step)});
  }
  f.put_u64("train.iteration", {static_cast<uint64_t>(ck.iteration)});
  f.put_f64("train.loss_history", ck.loss_history);
  put_real<T>(f, "densify.accum", {ck.densify.accum.size()}, ck.densify.accum.data());
  f.put_i32("densify.count", std::vector<int32_t>(ck.densify.count.begin(), ck.densify.count.end()));
  f.put_u8("config", detail::string_bytes(ck.config_json));
  return f;
}

template <typename T> Checkpoint<T> checkpoint_from_tensors(const TensorFile& f, const std::string& what) {
  using detail::get_real;
  using detail::get_vecs;
  Checkpoint<T> ck;
  ck.config_hash = f.tag;
  auto& m = ck.model;
  m.rig = detail::rig_from_bytes<T>(f.get_u8("rig"), what + ":rig");
  m.rig_init = detail::rig_from_bytes<T>(f.get_u8("rig_init"), what + ":rig_init");
  for (auto* r : {&m.rig, &m.rig_init}) {
    const std::string p = r == &m.rig ? "rig." : "rig_init.";
    if (!f.has(p + "vertices")) continue;
    auto v = detail::get_vecs<T, Vec3<T>>(f, p + "vertices");
    auto w = detail::get_real<T>(f, p + "skin_weights");
    auto b = detail::get_real<T>(f, p + "blendshapes");
    if (v.size() != r->vertices.size() || w.size() != r->skin_weights.size() || b.size() != r->blendshapes.size())
      throw DataError(what + ": " + p + "* tensors do not match the rig");
    r->vertices = std::move(v);
    r->skin_weights = std::move(w);
    r->blendshapes = std::move(b);
  }
  auto& s = m.splats;
  const auto parent = f.get_i32("splats.parent");
  s.parent.assign(parent.begin(), parent.end());
  s.bary_logits = get_vecs<T, Vec3<T>>(f, "splats.bary_logits");
  s.rotation = get_vecs<T, Vec4<T>>(f, "splats.rotation");
  s.log_scales = get_vecs<T, Vec2<T>>(f, "splats.log_scales");
  s.displacement = get_real<T>(f, "splats.displacement");
  s.opacity_logit = get_real<T>(f, "splats.opacity_logit");
  const size_t n = s.parent.size();
  if (s.bary_logits.size() != n || s.rotation.size() != n || s.log_scales.size() != n || s.displacement.size() != n ||
      s.opacity_logit.size() != n)
    throw DataError(what + ": splat tensors disagree in length");
  for (int p : s.parent)
    if (p < 0 || p >= m.rig.num_triangles()) throw DataError(what + ": splat parent out of range");
  const auto& mat = f.get("atlas.material");
  if (mat.shape.size() != 3 || mat.shape[0] != mat.shape[1] || mat.shape[2] != kMaterialChannels)
    throw DataError(what + ": bad atlas.material shape");
  m.atlas.resolution = static_cast<int>(mat.shape[0]);
  m.atlas.material = get_real<T>(f, "atlas.material");
  m.atlas.normal = get_real<T>(f, "atlas.normal");
  m.atlas.uv_mask = f.get_u8("atlas.uv_mask");
  if (m.atlas.normal.size() != m.atlas.texels() * kNormalChannels || m.atlas.uv_mask.size() != m.atlas.texels())
    throw DataError(what + ": atlas tensors disagree in size");
  const auto& env = f.get("env.raw");
  if (env.shape.size() != 4 || env.shape[0] != 6 || env.shape[1] != env.shape[2] || env.shape[3] != 3)
    throw DataError(what + ": bad env.raw shape");
  m.env.raw.size = static_cast<int>(env.shape[1]);
  m.env.raw.data = get_real<T>(f, "env.raw");
  m.stat_coeffs = get_real<T>(f, "stat_coeffs");
  if (m.stat_coeffs.size() != static_cast<size_t>(m.rig.albedo_components))
    throw DataError(what + ": stat_coeffs do not match the rig's albedo basis");
  const size_t k = static_cast<size_t>(m.rig.num_blendshapes);
  auto split = [&](const std::vector<T>& flat, std::vector<std::vector<T>>& out) {
    if (k == 0) return;
    if (flat.size() % k) throw DataError(what + ": bad expressions shape");
    for (size_t i = 0; i < flat.size(); i += k) out.emplace_back(flat.begin() + i, flat.begin() + i + k);
  };
  split(get_real<T>(f, "expressions"), m.expressions);
  split(get_real<T>(f, "expressions_init"), m.expressions_init);

  const size_t frames = static_cast<size_t>(f.get_u64("frames.count").at(0));
  if (k == 0) {
    m.expressions.assign(frames, {});
    m.expressions_init.assign(frames, {});
  }
  const auto cams = f.get_f64("frames.cameras");
  const auto params = f.get_f64("frames.params");
  const size_t nj = m.rig.joints.size();
  const size_t per_param = k + 4 * nj + 3;
  if (cams.size() != frames * 18 || params.size() != frames * per_param || m.expressions.size() != frames)
    throw DataError(what + ": frame tensors disagree with frames.count");
  for (size_t i = 0; i < frames; ++i) {
    const double* c = &cams[i * 18];
    Camera<double> cam;
    cam.fx = c[0];
    cam.fy = c[1];
    cam.cx = c[2];
    cam.cy = c[3];
    cam.width = static_cast<int>(c[4]);
    cam.height = static_cast<int>(c[5]);
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) cam.rotation(a, b) = c[6 + a * 3 + b];
    cam.position = Vec3<double>(c[15], c[16], c[17]);
    ck.cameras.push_back(cam);
    const double* p = &params[i * per_param];
    RigParams<double> rp;
    rp.expression.assign(p, p + k);
    for (size_t j = 0; j < nj; ++j) rp.joint_rotations.emplace_back(p[k + 4 * j], p[k + 4 * j + 1], p[k + 4 * j + 2], p[k + 4 * j + 3]);
    rp.root_translation = Vec3<double>(p[k + 4 * nj], p[k + 4 * nj + 1], p[k + 4 * nj + 2]);
    ck.params.push_back(rp);
  }

  for (const auto& [name, t] : f.tensors()) {
    const std::string pre = "adam.";
    if (name.rfind(pre, 0) != 0 || name.size() < 7 || name.substr(name.size() - 5) != ".step") continue;
    const std::string group = name.substr(pre.size(), name.size() - pre.size() - 5);
    AdamGroup<T> g;
    g.m = get_real<T>(f, pre + group + ".m");
    g.v = get_real<T>(f, pre + group + ".v");
    g.step = static_cast<int64_t>(f.get_u64(name).at(0));
    ck.adam[group] = std::move(g);
  }
  ck.iteration = static_cast<int64_t>(f.get_u64("train.iteration").at(0));
  ck.loss_history = f.get_f64("train.loss_history");
  ck.densify.accum = get_real<T>(f, "densify.accum");
  const auto cnt = f.get_i32("densify.count");
  ck.densify.count.assign(cnt.begin(), cnt.end());
  ck.config_json = detail::bytes_string(f.get_u8("config"));
  return ck;
}

template <typename T> void save_checkpoint(const std::string& path, const Checkpoint<T>& ck) {
  checkpoint_tensors(ck).save(path, kCheckpointMagic, kCheckpointVersion);
}

template <typename T> Checkpoint<T> load_checkpoint(const std::string& path) {
  return checkpoint_from_tensors<T>(TensorFile::load(path, kCheckpointMagic, kCheckpointVersion), path);
}

}  // namespace uvsplat::io
