#pragma once

#include "fixtures.hpp"

namespace uvsplat::testing {

inline Image<double> random_image(int w, int h, int c, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Image<double> img(w, h, c);
  for (auto& v : img.data) v = u(rng);
  return img;
}

// One triangle in the z = 0 plane carrying a single centred splat, seen head-on.
struct FlatScene {
  Model<double> model;
  Camera<double> camera;
  RigParams<double> params;
  PipelineContext<double> ctx;

  static FlatScene make() {
    FlatScene s;
    TemplateRig<double> rig;
    rig.vertices = {Vec3<double>(-1, -1, 0), Vec3<double>(1, -1, 0), Vec3<double>(0, 1, 0)};
    rig.triangles = {{0, 1, 2}};
    rig.uvs = {{Vec2<double>(0.1, 0.1), Vec2<double>(0.9, 0.1), Vec2<double>(0.5, 0.9)}};
    rig.joints = {Joint{}};
    rig.joints[0].name = "root";
    rig.skin_weights = {1, 1, 1};
    std::vector<RigParams<double>> fp{RigParams<double>::identity(rig)};
    s.model = Model<double>::initial(rig, fp, 16, 1, 5, 0.7);
    auto& sp = s.model.splats;
    sp.bary_logits[0] = Vec3<double>::Zero();
    sp.rotation[0] = Vec4<double>(1, 0, 0, 0);
    sp.log_scales[0] = Vec2<double>(std::log(0.3), std::log(0.3));
    sp.displacement[0] = 0;
    sp.opacity_logit[0] = 4;
    s.params = fp[0];
    s.camera = Camera<double>::look_at(Vec3<double>(0, 0, 3), Vec3<double>(0, 0, 0), Vec3<double>(0, 1, 0), 40, 16, 16);
    s.ctx = PipelineContext<double>::make(TrainConfig{}, rig, 16, bake_brdf_lut(16, 256), nullptr);
    return s;
  }

  // A frame that the current model reproduces exactly.
  io::FrameData<double> perfect_frame(const FrameState<double>& st) const {
    io::FrameData<double> f;
    f.index = 0;
    f.camera = camera;
    f.params = params;
    f.image = st.linear;
    f.mask = gbuffer_image(st.gbuffers, kAlpha, 1);
    f.prior = gbuffer_image(st.gbuffers, kAlbedoR, 3);
    return f;
  }
};


// A 13x13 wall of overlapping splats in a plane facing the camera.
struct CoplanarWall {
  GBuffers<double> gb;
  Camera<double> cam;
  int valid = 0;  // interior pixels with alpha >= 0.5

  static CoplanarWall make() {
    WorldSplats<double> world;
    SplatUVTransform<double> xf;
    const Vec3<double> n = Vec3<double>(0.2, -0.1, -1).normalized();
    const Vec3<double> s = n.cross(Vec3<double>(0, 1, 0)).normalized();
    Mat3<double> r;
    r.col(0) = s;
    r.col(1) = n.cross(s);
    r.col(2) = n;
    for (int i = -6; i <= 6; ++i)
      for (int j = -6; j <= 6; ++j) {
        world.center.push_back(Vec3<double>(0, 0, 3) + 0.15 * i * r.col(0) + 0.15 * j * r.col(1));
        world.rotation.push_back(r);
        world.scales.push_back(Vec2<double>(0.12, 0.12));
        world.opacity.push_back(0.9);
        world.parent.push_back(0);
        xf.uv0.push_back(Vec2<double>(0.5, 0.5));
        xf.jac.push_back(Mat2<double>::Zero());
      }
    CoplanarWall w;
    w.cam = Camera<double>::look_at(Vec3<double>::Zero(), Vec3<double>(0, 0, 1), Vec3<double>(0, -1, 0), 24.0, 24, 24);
    w.gb = render(world, xf, TextureAtlas<double>::constant(4), w.cam, RenderSettings{});
    for (int y = 1; y < 23; ++y)
      for (int x = 1; x < 23; ++x) w.valid += w.gb.at(x, y, kAlpha) >= 0.5;
    return w;
  }
};

inline const std::vector<std::string> kPhotoTerms{"l1", "ssim", "mask"};
inline const std::vector<std::string> kPbrTerms{"diff_albedo", "smooth", "normal_reg"};
inline const std::vector<std::string> kUvTerms{"uv_dist", "boundary", "stat_albedo"};
inline const std::vector<std::string> kGeomTerms{"normal_consist", "lap", "flame", "expr", "bary"};

// |value - expected| <= tol; tol 0 means exact.
struct IdentityCheck {
  std::string name;
  double value, expected, tol;
  bool ok() const { return std::abs(value - expected) <= tol; }
};

// Every zero/identity case of the loss terms, evaluated on concrete inputs.
inline std::vector<IdentityCheck> loss_identity_checks() {
  std::vector<IdentityCheck> out;
  auto add = [&](const std::string& n, double v, double e, double tol) { out.push_back({n, v, e, tol}); };
  std::mt19937_64 rng(101);

  {
    const auto img = random_image(20, 14, 3, rng), m = random_image(20, 14, 1, rng);
    const auto t = photometric(img, img, m, m, LossWeights{});
    add("identical images: l1", t.at("l1"), 0, 0);
    add("identical images: ssim", t.at("ssim"), 0, 0);
    add("identical masks: mask", t.at("mask"), 0, 0);
    add("ssim(I, I)", ssim(img, img), 1, 1e-12);
  }
  {
    const auto img = random_image(16, 16, 3, rng, 0.0, 0.9), m = random_image(16, 16, 1, rng);
    auto shifted = img;
    for (auto& v : shifted.data) v += 0.1;
    add("offset 0.1: l1", photometric(img, shifted, m, m, LossWeights{}).at("l1"), 0.08, 1e-12);
  }
  {
    auto atlas = random_atlas<double>(12, rng);
    for (size_t t = 0; t < atlas.texels(); ++t) atlas.material[t * kMaterialChannels + 3] = 0.42;
    add("constant roughness: roughness TV", texture_tv(atlas, 3), 0, 0);
    for (size_t t = 0; t < atlas.texels(); ++t) atlas.material[t * kMaterialChannels + 4] = 0.07;
    for (auto& v : atlas.normal) v = 0;
    const auto albedo = random_image(10, 10, 3, rng), mask = random_image(10, 10, 1, rng);
    const auto t = pbr_priors(&albedo, albedo, mask, atlas, LossWeights{});
    add("constant roughness and f0: smooth", t.at("smooth"), 0, 0);
    add("zero normals: normal_reg", t.at("normal_reg"), 0, 0);
    add("prior equals albedo: diff_albedo", t.at("diff_albedo"), 0, 0);
  }
  {
    double worst = 0;
    std::uniform_real_distribution<double> u(0, 1);
    for (int k = 0; k < 1000; ++k) {
      const double w = u(rng);
      const Vec2<double> uv(u(rng), u(rng));
      worst = std::max(worst, std::abs(uv_distortion_ray(w, Vec2<double>(w * uv), w * uv.squaredNorm())));
    }
    add("single splat on a ray: uv_dist", worst, 0, 1e-15);
    const Vec2<double> a(0.3, 0.4), b(0.36, 0.48);
    add("two intersections: uv_dist", uv_distortion_ray(0.5, Vec2<double>(0.25 * a + 0.25 * b),
                                                        0.25 * a.squaredNorm() + 0.25 * b.squaredNorm()),
        1.25e-3, 1e-15);
  }
  {
    const int res = 8;
    std::uniform_real_distribution<double> u(0.1, 0.9), d(-0.1, 0.1);
    StatAlbedoBasis<double> stat;
    stat.resolution = res;
    stat.components = 3;
    for (int i = 0; i < res * res * 3; ++i) stat.mean.push_back(u(rng));
    for (int i = 0; i < 3 * res * res * 3; ++i) stat.basis.push_back(d(rng));
    auto atlas = TextureAtlas<double>::constant(res);
    for (int t = 0; t < res * res; ++t)
      for (int c = 0; c < 3; ++c) atlas.material[t * kMaterialChannels + c] = stat.mean[t * 3 + c];
    const auto t = uv_losses(GBuffers<double>::zeros(4, 4), atlas, stat, std::vector<double>(3, 0.0), LossWeights{});
    add("basis mean, zero coefficients: stat_albedo", t.at("stat_albedo"), 0, 0);
  }
  {
    const auto w = CoplanarWall::make();
    add("coplanar wall coverage (interior pixels)", w.valid > 150 ? 1 : 0, 1, 0);
    add("coplanar camera-facing splats: normal_consist", normal_consistency(w.gb, w.cam), 0, 1e-3);
  }
  {
    const auto rig = patch_rig<double>(3, 2, rng);
    add("zero vertex deltas: lap", laplacian_loss(laplacian(rig), rig.vertices, rig.vertices), 0, 0);
    add("zero skin deltas: flame", l2_delta(rig.skin_weights, rig.skin_weights), 0, 0);
    add("zero blendshape deltas: flame", l2_delta(rig.blendshapes, rig.blendshapes), 0, 0);
    auto splats = init_splats(rig, 3, 4);
    for (auto& l : splats.bary_logits) l = Vec3<double>::Constant(1.7);
    add("centred barycentrics: bary", bary_loss(splats), 0, 1e-30);
  }
  {
    auto sc = FlatScene::make();
    const auto st = forward(sc.model, sc.camera, sc.params, sc.ctx);
    const auto t = frame_loss(sc.model, st, sc.perfect_frame(st), sc.ctx, static_cast<ModelGrads<double>*>(nullptr));
    for (const auto& [k, v] : t)
      add("perfect reconstruction: " + k, v, 0, k == "normal_consist" || k == "boundary" ? 1e-3 : 1e-6);
    add("perfect reconstruction: total", sum_terms(t), 0, 1e-3);
  }
  {
    auto sc = MicroScene<double>::make(11);
    std::mt19937_64 r2(11);
    io::FrameData<double> f;
    f.index = 0;
    f.camera = sc.camera;
    f.params = sc.params;
    f.image = random_image(8, 8, 3, r2, 0.05, 0.95);
    f.mask = random_image(8, 8, 1, r2);
    f.prior = random_image(8, 8, 3, r2);
    sc.model.expressions[0][0] += 0.2;
    sc.model.rig.vertices[2] += Vec3<double>(0.01, 0, -0.02);
    const auto st = forward(sc.model, sc.camera, sc.params, sc.ctx);
    const auto all = frame_loss(sc.model, st, f, sc.ctx, static_cast<ModelGrads<double>*>(nullptr));
    const std::vector<std::tuple<std::string, bool LossGroups::*, const std::vector<std::string>*>> groups{
        {"photo", &LossGroups::photo, &kPhotoTerms},
        {"pbr", &LossGroups::pbr, &kPbrTerms},
        {"uv", &LossGroups::uv, &kUvTerms},
        {"geom", &LossGroups::geom, &kGeomTerms}};
    for (const auto& [gname, flag, names] : groups) {
      auto ctx = sc.ctx;
      ctx.groups.*flag = false;
      const auto part = frame_loss(sc.model, st, f, ctx, static_cast<ModelGrads<double>*>(nullptr));
      double removed = 0, leaked = 0, changed = 0;
      for (const auto& k : *names) {
        leaked += static_cast<double>(part.count(k));
        removed += all.at(k);
      }
      for (const auto& [k, v] : part) changed = std::max(changed, std::abs(v - all.at(k)));
      add("group " + gname + " off: its terms absent", leaked, 0, 0);
      add("group " + gname + " off: other terms unchanged", changed, 0, 0);
      add("group " + gname + " off: total drops by its terms", sum_terms(part), sum_terms(all) - removed, 1e-12);
    }
  }
  return out;
}

}  // namespace uvsplat::testing
