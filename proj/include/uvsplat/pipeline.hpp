#pragma once

#include "uvsplat/atlas.hpp"
#include "uvsplat/camera.hpp"
#include "uvsplat/config.hpp"
#include "uvsplat/image.hpp"
#include "uvsplat/io/dataset.hpp"
#include "uvsplat/losses.hpp"
#include "uvsplat/parallel.hpp"
#include "uvsplat/raster.hpp"
#include "uvsplat/rig.hpp"
#include "uvsplat/shading.hpp"
#include "uvsplat/splat.hpp"
#include "uvsplat/uvmap.hpp"

#include <vector>

namespace uvsplat {

/// Everything the optimizer can change, plus the anchors of the regularizers.
template <typename T> struct Model {
  TemplateRig<T> rig;
  TemplateRig<T> rig_init;
  SplatSet<T> splats;
  TextureAtlas<T> atlas;
  EnvironmentLight<T> env;
  std::vector<T> stat_coeffs;
  std::vector<std::vector<T>> expressions;       // per dataset frame
  std::vector<std::vector<T>> expressions_init;

  /// Default initialization: constant textures, constant env, splats seeded by `seed`.
  static Model initial(const TemplateRig<T>& rig, const std::vector<RigParams<T>>& frame_params, int atlas_res,
                       int splats_per_triangle, uint64_t seed, double env_init) {
    rig.validate();
    Model m;
    m.rig = rig;
    m.rig_init = rig;
    m.splats = init_splats(rig, splats_per_triangle, seed);
    m.atlas = TextureAtlas<T>::constant(atlas_res);
    m.atlas.uv_mask = build_uv_mask(rig, atlas_res);
    m.env = EnvironmentLight<T>::constant(T(env_init));
    m.stat_coeffs.assign(rig.albedo_components, T(0));
    for (const auto& p : frame_params) {
      m.expressions.push_back(p.expression);
      m.expressions_init.push_back(p.expression);
    }
    return m;
  }

  RigParams<T> frame_params(const RigParams<T>& base, int frame) const {
    RigParams<T> p = base;
    if (frame >= 0 && static_cast<size_t>(frame) < expressions.size()) p.expression = expressions[frame];
    return p;
  }
};

/// Shared, read-only inputs of a forward/backward pass.
template <typename T> struct PipelineContext {
  RenderSettings render;
  LossWeights weights;
  LossGroups groups;
  bool zero_jacobian = false;
  BrdfLut lut;
  Eigen::SparseMatrix<T> laplacian;
  StatAlbedoBasis<T> stat;
  ThreadPool* pool = nullptr;

  static PipelineContext make(const TrainConfig& cfg, const TemplateRig<T>& rig, int atlas_res, BrdfLut lut,
                              ThreadPool* pool) {
    PipelineContext c;
    c.render = cfg.render;
    c.weights = cfg.weights;
    c.groups = cfg.groups;
    c.zero_jacobian = cfg.zero_jacobian;
    c.lut = std::move(lut);
    c.laplacian = uvsplat::laplacian(rig);
    c.stat = StatAlbedoBasis<T>::from_rig(rig, atlas_res);
    c.pool = pool;
    return c;
  }
};

/// Intermediate values of one frame's forward pass, kept for the adjoint.
template <typename T> struct FrameState {
  Camera<T> camera;
  RigParams<T> params;
  DeformedMesh<T> mesh;
  WorldSplats<T> world;
  TriangleUVJacobians<T> jac;
  SplatUVTransform<T> xf;
  RenderTape<T> tape;
  GBuffers<T> gbuffers;
  EnvChain<T> chain;
  Image<T> linear;  // shaded radiance, composited over black
};

template <typename T>
FrameState<T> forward(const Model<T>& model, const Camera<T>& cam, const RigParams<T>& params,
                      const PipelineContext<T>& ctx, const EnvChain<T>* chain = nullptr) {
  FrameState<T> s;
  s.camera = cam;
  s.params = params;
  s.mesh = deform(model.rig, params);
  s.world = instantiate(model.splats, s.mesh, model.rig);
  s.jac = build_triangle_jacobians(s.mesh, model.rig);
  s.xf = build_splat_uv_transforms(s.world, s.jac, model.splats, model.rig, ctx.zero_jacobian);
  s.gbuffers = render(s.world, s.xf, model.atlas, cam, ctx.render, &s.tape, ctx.pool);
  s.chain = chain ? *chain : prefilter_env(model.env.radiance());
  s.linear = shade(s.gbuffers, s.chain, ctx.lut, cam, ctx.pool);
  return s;
}

/// Gradients of every learnable quantity for one frame.
template <typename T> struct ModelGrads {
  RigGrads<T> rig;  // rig.expression is the frame's expression gradient
  SplatGrads<T> splats;
  AtlasGrads<T> atlas;
  CubeMap<T> env;  // w.r.t. raw env values
  std::vector<T> stat;
  std::vector<Vec3<T>> deformed_vertices;  // dL/dV_d, before the rig adjoint
  std::vector<Vec3<T>> world_center;       // render-only position grads (densification statistics)

  static ModelGrads zeros(const Model<T>& m) {
    ModelGrads g;
    g.rig = RigGrads<T>::zeros(m.rig);
    g.splats = SplatGrads<T>::zeros(m.splats.size());
    g.atlas = AtlasGrads<T>::zeros(m.atlas);
    g.env = CubeMap<T>::filled(m.env.raw.size);
    g.stat.assign(m.stat_coeffs.size(), T(0));
    g.deformed_vertices.assign(m.rig.vertices.size(), Vec3<T>::Zero());
    g.world_center.assign(m.splats.size(), Vec3<T>::Zero());
    return g;
  }
};

/// Adjoint of `forward` given dL/d(linear image) and extra dL/d(G-buffers).
/// `grad_deformed_extra` (optional) adds to dL/dV_d. Accumulates into `out`.
template <typename T>
void backward(const Model<T>& model, const FrameState<T>& s, const PipelineContext<T>& ctx, const Image<T>& grad_linear,
              GBuffers<T> grad_gb, ModelGrads<T>& out, const std::vector<Vec3<T>>* grad_deformed_extra = nullptr) {
  if (grad_gb.data.empty()) grad_gb = GBuffers<T>::zeros(s.gbuffers.width, s.gbuffers.height);
  EnvChain<T> grad_chain = EnvChain<T>::zeros_like(s.chain);
  shade_backward(s.gbuffers, s.chain, ctx.lut, s.camera, grad_linear, grad_gb, &grad_chain, ctx.pool);
  const CubeMap<T> genv = env_raw_grad(model.env, grad_chain);
  for (size_t i = 0; i < genv.data.size(); ++i) out.env.data[i] += genv.data[i];

  auto rg = RenderGrads<T>::zeros(model.splats.size(), model.atlas);
  render_backward(s.world, s.xf, model.atlas, s.tape, grad_gb, rg, ctx.pool);
  for (size_t i = 0; i < rg.material.size(); ++i) out.atlas.material[i] += rg.material[i];
  for (size_t i = 0; i < rg.normal.size(); ++i) out.atlas.normal[i] += rg.normal[i];
  for (size_t i = 0; i < model.splats.size(); ++i) out.world_center[i] += rg.world.center[i];

  std::vector<Mat23<T>> grad_pinv(model.rig.triangles.size(), Mat23<T>::Zero());
  build_splat_uv_transforms_backward(s.world, s.jac, model.splats, model.rig, rg.uv, ctx.zero_jacobian, out.splats,
                                     rg.world, grad_pinv);
  auto mg = MeshGrads<T>::zeros(model.rig.vertices.size(), model.rig.triangles.size());
  instantiate_backward(model.splats, s.mesh, model.rig, s.world, rg.world, out.splats, mg);
  std::vector<Vec3<T>> gv = mg.vertices;
  triangle_frames_backward(s.mesh.vertices, model.rig.triangles, mg.frames, mg.normals, gv);
  build_triangle_jacobians_backward(s.jac, model.rig, grad_pinv, gv);
  if (grad_deformed_extra)
    for (size_t v = 0; v < gv.size(); ++v) gv[v] += (*grad_deformed_extra)[v];
  for (size_t v = 0; v < gv.size(); ++v) out.deformed_vertices[v] += gv[v];
  deform_backward(model.rig, s.params, s.mesh, gv, out.rig);
}

/// Accumulated albedo channels of the G-buffers as an RGB image.
template <typename T> Image<T> gbuffer_image(const GBuffers<T>& gb, int first_channel, int channels) {
  Image<T> img(gb.width, gb.height, channels);
  for (size_t p = 0; p < gb.pixels(); ++p)
    for (int c = 0; c < channels; ++c) img.data[p * channels + c] = gb.pixel(p)[first_channel + c];
  return img;
}

/// Display transform used by the photometric loss and the metrics.
template <typename T> Image<T> to_display(const Image<T>& linear) {
  Image<T> o = linear;
  for (auto& v : o.data) v = srgb_encode(clamp01(v));
  return o;
}

namespace detail {

template <typename T> T vec3_l2_delta(const std::vector<Vec3<T>>& v, const std::vector<Vec3<T>>& ref,
                                      std::vector<Vec3<T>>* grad, T scale) {
  if (v.empty()) return T(0);
  const T inv = T(1) / T(3 * v.size());
  T s = T(0);
  for (size_t i = 0; i < v.size(); ++i) {
    const Vec3<T> d = v[i] - ref[i];
    s += d.squaredNorm();
    if (grad) (*grad)[i] += T(2) * scale * inv * d;
  }
  return s * inv;
}

}  // namespace detail

/// Full training objective of one frame. With `grads`, runs the adjoint too.
template <typename T>
LossTerms frame_loss(const Model<T>& model, const FrameState<T>& s, const io::FrameData<T>& frame,
                     const PipelineContext<T>& ctx, ModelGrads<T>* grads) {
  const auto& wt = ctx.weights;
  LossTerms terms;
  const int w = s.gbuffers.width, h = s.gbuffers.height;
  Image<T> grad_linear(w, h, 3);
  GBuffers<T> grad_gb = GBuffers<T>::zeros(w, h);
  std::vector<Vec3<T>> grad_deformed;
  if (grads) grad_deformed.assign(model.rig.vertices.size(), Vec3<T>::Zero());

  if (ctx.groups.photo) {
    const Image<T> rendered = to_display(s.linear);
    const Image<T> target = to_display(frame.image);
    const Image<T> alpha = gbuffer_image(s.gbuffers, kAlpha, 1);
    PhotometricGrads<T> pg;
    for (const auto& [k, v] : photometric(target, rendered, frame.mask, alpha, wt, grads ? &pg : nullptr)) terms[k] = v;
    if (grads) {
      for (size_t i = 0; i < grad_linear.data.size(); ++i) {
        const T x = s.linear.data[i];
        grad_linear.data[i] = pg.image.data[i] * srgb_encode_grad(clamp01(x)) * clamp01_grad(x);
      }
      for (size_t p = 0; p < grad_gb.pixels(); ++p) grad_gb.pixel(p)[kAlpha] += pg.mask.data[p];
    }
  }
  if (ctx.groups.pbr) {
    const Image<T> albedo = gbuffer_image(s.gbuffers, kAlbedoR, 3);
    Image<T> g_alb;
    const Image<T>* prior = frame.prior ? &*frame.prior : nullptr;
    for (const auto& [k, v] :
         pbr_priors(prior, albedo, frame.mask, model.atlas, wt, grads ? &g_alb : nullptr, grads ? &grads->atlas : nullptr))
      terms[k] = v;
    if (grads)
      for (size_t p = 0; p < grad_gb.pixels(); ++p)
        for (int c = 0; c < 3; ++c) grad_gb.pixel(p)[kAlbedoR + c] += g_alb.data[p * 3 + c];
  }
  if (ctx.groups.uv) {
    UvLossGrads<T> ug;
    if (grads) ug = {&grad_gb, &grads->atlas, &grads->stat};
    for (const auto& [k, v] : uv_losses(s.gbuffers, model.atlas, ctx.stat, model.stat_coeffs, wt, ug)) terms[k] = v;
  }
  if (ctx.groups.geom) {
    terms["normal_consist"] = wt.normal_consist * static_cast<double>(normal_consistency(
                                                      s.gbuffers, s.camera, grads ? &grad_gb : nullptr, T(wt.normal_consist)));
    // Laplacian of the offset between the tuned and the original rig, both posed with this frame's pose.
    RigParams<T> ref_params = s.params;
    if (frame.index >= 0 && static_cast<size_t>(frame.index) < model.expressions_init.size())
      ref_params.expression = model.expressions_init[frame.index];
    const DeformedMesh<T> ref = deform(model.rig_init, ref_params);
    terms["lap"] = wt.lap * static_cast<double>(laplacian_loss(ctx.laplacian, s.mesh.vertices, ref.vertices,
                                                               grads ? &grad_deformed : nullptr, T(wt.lap)));
    const T fl = detail::vec3_l2_delta(model.rig.vertices, model.rig_init.vertices,
                                       grads ? &grads->rig.vertices : nullptr, T(wt.flame)) +
                 l2_delta(model.rig.skin_weights, model.rig_init.skin_weights, grads ? &grads->rig.skin_weights : nullptr,
                          T(wt.flame)) +
                 l2_delta(model.rig.blendshapes, model.rig_init.blendshapes, grads ? &grads->rig.blendshapes : nullptr,
                          T(wt.flame));
    terms["flame"] = wt.flame * static_cast<double>(fl);
    if (frame.index >= 0 && static_cast<size_t>(frame.index) < model.expressions.size())
      terms["expr"] = wt.expr * static_cast<double>(sq_delta(model.expressions[frame.index],
                                                             model.expressions_init[frame.index],
                                                             grads ? &grads->rig.expression : nullptr, T(wt.expr)));
    terms["bary"] = wt.bary * static_cast<double>(bary_loss(model.splats, grads ? &grads->splats.bary_logits : nullptr,
                                                            T(wt.bary)));
  }
  if (grads) backward(model, s, ctx, grad_linear, std::move(grad_gb), *grads, &grad_deformed);
  return terms;
}

}  // namespace uvsplat
