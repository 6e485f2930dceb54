#include "common.hpp"
#include "support/raster_cases.hpp"

#include <chrono>

using namespace uvsplat;
using namespace uvsplat::testing;

TEST(Intersect, HeadOn) {
  const Vec3<double> p(0.25, 0.25, 0), sv(0.1, 0, 0), tv(0, 0.1, 0);
  const auto h = intersect<double>(Vec3<double>(0.25, 0.25, 1), Vec3<double>(0, 0, -1), p, sv, tv);
  ASSERT_TRUE(h);
  EXPECT_NEAR(h->s, 0, 1e-12);
  EXPECT_NEAR(h->t, 0, 1e-12);
  EXPECT_NEAR(h->depth, 1, 1e-12);
  const auto h2 = intersect<double>(Vec3<double>(0.35, 0.25, 1), Vec3<double>(0, 0, -1), p, sv, tv);
  ASSERT_TRUE(h2);
  EXPECT_NEAR(h2->s, 1, 1e-12);
  EXPECT_NEAR(h2->t, 0, 1e-12);
  EXPECT_FALSE(intersect<double>(Vec3<double>(0, 0, 1), Vec3<double>(1, 0, 0), p, sv, tv));
  EXPECT_FALSE(intersect<double>(Vec3<double>(0.25, 0.25, 1), Vec3<double>(0, 0, 1), p, sv, tv));
}

TEST(Kernel, Values) {
  EXPECT_EQ(kernel(0.0, 0.0), 1.0);
  EXPECT_NEAR(kernel(1.0, 1.0), std::exp(-1.0), 1e-15);
  EXPECT_EQ(kernel(4.0, 0.0, 3.0), 0.0);
  EXPECT_GT(kernel(2.9, 0.0, 3.0), 0.0);
}

TEST(Render, TwoSplatCompositing) {
  Scene s;
  s.cam = front_camera(1, 1, 1);
  s.atlas = TextureAtlas<double>::constant(2);
  for (int t = 0; t < 4; ++t) {
    double* m = &s.atlas.material[t * kMaterialChannels];
    m[0] = t % 2 == 0 ? 1 : 0;
    m[1] = t % 2 == 0 ? 0 : 1;
    m[2] = 0;
  }
  const Vec2<double> sc(0.1, 0.1);
  s.add(Vec3<double>(0, 0, 1), Mat3<double>::Identity(), sc, 0.6, Vec2<double>(0.25, 0.25), Mat2<double>::Zero());
  s.add(Vec3<double>(0, 0, 2), Mat3<double>::Identity(), sc, 0.8, Vec2<double>(0.75, 0.25), Mat2<double>::Zero());
  RenderSettings rs;
  rs.screen_lowpass = false;
  for (const auto& gb : {render(s.world, s.xf, s.atlas, s.cam, rs), render_brute(s.world, s.xf, s.atlas, s.cam, rs)}) {
    EXPECT_NEAR(gb.at(0, 0, kAlbedoR), 0.6, 1e-12);
    EXPECT_NEAR(gb.at(0, 0, kAlbedoG), 0.32, 1e-12);
    EXPECT_NEAR(gb.at(0, 0, kAlbedoB), 0.0, 1e-12);
    EXPECT_NEAR(gb.at(0, 0, kAlpha), 0.92, 1e-12);
  }
  // Input order does not matter, depth does.
  std::swap(s.world.center[0], s.world.center[1]);
  std::swap(s.world.opacity[0], s.world.opacity[1]);
  std::swap(s.xf.uv0[0], s.xf.uv0[1]);
  const auto gb = render(s.world, s.xf, s.atlas, s.cam, rs);
  EXPECT_NEAR(gb.at(0, 0, kAlbedoR), 0.6, 1e-12);
  EXPECT_NEAR(gb.at(0, 0, kAlbedoG), 0.32, 1e-12);
}

TEST(Render, ConstantAtlasColor) {
  Scene s;
  s.cam = front_camera(16, 16, 16);
  s.atlas = TextureAtlas<double>::constant(4);
  for (size_t t = 0; t < s.atlas.texels(); ++t) {
    s.atlas.material[t * 5 + 0] = 0.2;
    s.atlas.material[t * 5 + 1] = 0.5;
    s.atlas.material[t * 5 + 2] = 0.7;
  }
  Mat2<double> j;
  j << 0.1, 0.02, -0.03, 0.1;
  s.add(Vec3<double>(0.05, 0, 2), quat_to_matrix(quat_from_axis_angle<double>(Vec3<double>(1, 1, 0).normalized(), 0.4)),
        Vec2<double>(0.3, 0.2), 0.999, Vec2<double>(0.5, 0.5), j);
  const auto gb = render(s.world, s.xf, s.atlas, s.cam, RenderSettings{});
  int covered = 0;
  for (size_t p = 0; p < gb.pixels(); ++p) {
    const double* px = gb.pixel(p);
    if (px[kAlpha] <= 0) continue;
    ++covered;
    EXPECT_NEAR(px[kAlbedoR] / px[kAlpha], 0.2, 1e-12);
    EXPECT_NEAR(px[kAlbedoG] / px[kAlpha], 0.5, 1e-12);
    EXPECT_NEAR(px[kAlbedoB] / px[kAlpha], 0.7, 1e-12);
  }
  EXPECT_GT(covered, 20);
}

TEST(Render, EmptySceneIsBackground) {
  Scene s;
  s.cam = front_camera(8, 6, 8);
  s.atlas = TextureAtlas<double>::constant(4);
  for (const auto& gb : {render(s.world, s.xf, s.atlas, s.cam, RenderSettings{}),
                         render_brute(s.world, s.xf, s.atlas, s.cam, RenderSettings{})}) {
    EXPECT_EQ(gb.width, 8);
    EXPECT_EQ(gb.height, 6);
    for (double v : gb.data) EXPECT_EQ(v, 0.0);
  }
}

TEST(Render, BruteMatchesTiledForOneSplat) {
  std::mt19937_64 rng(1);
  auto s = random_scene(rng, 24, 1);
  EXPECT_EQ(max_diff(render(s.world, s.xf, s.atlas, s.cam, RenderSettings{}),
                     render_brute(s.world, s.xf, s.atlas, s.cam, RenderSettings{})),
            0.0);
}

TEST(Render, TiledMatchesBruteOnRandomScenes) {
  std::mt19937_64 rng(2024);
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0;
  double coverage = 0;
  for (int trial = 0; trial < 200; ++trial) {
    auto s = random_scene(rng);
    RenderSettings rs;
    rs.tile_size = trial % 3 == 0 ? 8 : 16;
    const auto a = render(s.world, s.xf, s.atlas, s.cam, rs);
    const auto b = render_brute(s.world, s.xf, s.atlas, s.cam, rs);
    worst = std::max(worst, max_diff(a, b));
    for (size_t p = 0; p < b.pixels(); ++p) coverage += b.pixel(p)[kAlpha] / double(b.pixels());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LE(worst, 1e-5);
  EXPECT_GT(coverage / 200, 0.1);  // the scenes are not mostly empty
  EXPECT_LT(secs, 60.0);
}

TEST(Render, SplatOrderInvariance) {
  std::mt19937_64 rng(3);
  auto s = random_scene(rng, 24, 40);
  const auto a = render(s.world, s.xf, s.atlas, s.cam, RenderSettings{});
  std::vector<size_t> perm(s.world.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Scene t;
  t.cam = s.cam;
  t.atlas = s.atlas;
  for (size_t i : perm)
    t.add(s.world.center[i], s.world.rotation[i], s.world.scales[i], s.world.opacity[i], s.xf.uv0[i], s.xf.jac[i]);
  EXPECT_LE(max_diff(a, render(t.world, t.xf, t.atlas, t.cam, RenderSettings{})), 1e-12);
}

TEST(Render, BlendWeightsSumToAlpha) {
  std::mt19937_64 rng(4);
  auto s = random_scene(rng, 24, 60);
  RenderSettings rs;
  rs.keep_weights = true;
  const auto gb = render(s.world, s.xf, s.atlas, s.cam, rs);
  ASSERT_EQ(gb.weights.size(), gb.pixels());
  for (size_t p = 0; p < gb.pixels(); ++p) {
    double sum = 0;
    for (const auto& [idx, w] : gb.weights[p]) {
      EXPECT_GE(w, 0.0);
      sum += w;
    }
    EXPECT_NEAR(sum, gb.pixel(p)[kAlpha], 1e-12);
    EXPECT_LE(gb.pixel(p)[kAlpha], 1.0);
  }
}

TEST(Render, ThreadCountInvariance) {
  std::mt19937_64 rng(5);
  auto s = random_scene(rng, 32, 100);
  ThreadPool one(1), many(4);
  RenderTape<double> ta, tb;
  const auto a = render(s.world, s.xf, s.atlas, s.cam, RenderSettings{}, &ta, &one);
  const auto b = render(s.world, s.xf, s.atlas, s.cam, RenderSettings{}, &tb, &many);
  EXPECT_EQ(a.data, b.data);
  GBuffers<double> g = GBuffers<double>::zeros(a.width, a.height);
  std::uniform_real_distribution<double> u(-1, 1);
  for (auto& v : g.data) v = u(rng);
  auto ga = RenderGrads<double>::zeros(s.world.size(), s.atlas);
  auto gb = RenderGrads<double>::zeros(s.world.size(), s.atlas);
  render_backward(s.world, s.xf, s.atlas, ta, g, ga, &one);
  render_backward(s.world, s.xf, s.atlas, tb, g, gb, &many);
  EXPECT_EQ(ga.material, gb.material);
  EXPECT_EQ(ga.normal, gb.normal);
  EXPECT_EQ(ga.world.center, gb.world.center);
  EXPECT_EQ(ga.uv.jac, gb.uv.jac);
}

TEST(RenderBackward, ZeroUpstreamGivesZero) {
  std::mt19937_64 rng(6);
  auto s = random_scene(rng, 16, 20);
  RenderTape<double> tape;
  const auto fw = render(s.world, s.xf, s.atlas, s.cam, RenderSettings{}, &tape);
  auto g = RenderGrads<double>::zeros(s.world.size(), s.atlas);
  render_backward(s.world, s.xf, s.atlas, tape, GBuffers<double>::zeros(fw.width, fw.height), g);
  for (double v : g.material) EXPECT_EQ(v, 0.0);
  for (double v : g.normal) EXPECT_EQ(v, 0.0);
  for (size_t i = 0; i < s.world.size(); ++i) {
    EXPECT_TRUE(g.world.center[i].isZero(0));
    EXPECT_TRUE(g.world.rotation[i].isZero(0));
    EXPECT_EQ(g.world.opacity[i], 0.0);
    EXPECT_TRUE(g.uv.jac[i].isZero(0));
  }
}

TEST(RenderBackward, TexelGradientIsBilinearWeightTimesBlendWeight) {
  Scene s;
  s.cam = front_camera(1, 1, 1);
  std::mt19937_64 rng(7);
  s.atlas = random_atlas<double>(8, rng);
  Mat2<double> j;
  j << 0.11, 0.03, -0.02, 0.09;
  const Mat3<double> r = quat_to_matrix(random_quat<double>(rng, 0.3));
  s.add(Vec3<double>(0.03, -0.02, 1.5), r, Vec2<double>(0.2, 0.15), 0.7, Vec2<double>(0.43, 0.58), j);
  RenderSettings rs;
  rs.screen_lowpass = false;
  RenderTape<double> tape;
  const auto fw = render(s.world, s.xf, s.atlas, s.cam, rs, &tape);
  auto up = GBuffers<double>::zeros(1, 1);
  up.pixel(0)[kAlbedoR] = 1;
  auto g = RenderGrads<double>::zeros(1, s.atlas);
  render_backward(s.world, s.xf, s.atlas, tape, up, g);

  const auto hit = intersect<double>(s.cam.position, s.cam.ray_direction(0, 0), s.world.center[0],
                                     s.world.tangent_s(0), s.world.tangent_t(0));
  ASSERT_TRUE(hit);
  const double omega = 0.7 * kernel(hit->s, hit->t);
  EXPECT_NEAR(fw.at(0, 0, kAlpha), omega, 1e-12);
  const auto taps = bilinear_taps(8, map_st_to_uv(s.xf, 0, hit->s, hit->t));
  std::vector<double> expect(g.material.size(), 0.0);
  for (int k = 0; k < 4; ++k) expect[taps.texel[k] * kMaterialChannels] += taps.w[k] * omega;
  for (size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(g.material[i], expect[i], 1e-12) << i;
}

TEST(Render, DenseStackStaysWithinTolerance) {
  // Many nearly opaque layers: early termination drops a tail bounded by the
  // transmittance threshold times the channel value (depth is the largest).
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 1);
  Scene s;
  s.cam = front_camera(16, 16, 16);
  s.atlas = random_atlas<double>(8, rng);
  for (int i = 0; i < 40; ++i)
    s.add(Vec3<double>(0.05 * (u(rng) - 0.5), 0.05 * (u(rng) - 0.5), 2 + 0.05 * i), Mat3<double>::Identity(),
          Vec2<double>(0.5, 0.5), 0.9 + 0.09 * u(rng), Vec2<double>(u(rng), u(rng)), Mat2<double>::Identity() * 0.02);
  const auto a = render(s.world, s.xf, s.atlas, s.cam, RenderSettings{});
  const auto b = render_brute(s.world, s.xf, s.atlas, s.cam, RenderSettings{});
  EXPECT_GT(a.at(8, 8, kAlpha), 1 - 1e-6);
  EXPECT_LE(max_diff(a, b), 1e-5);
}
