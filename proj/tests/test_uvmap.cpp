#include "common.hpp"
#include "support/uv_cases.hpp"

#include <chrono>

using namespace uvsplat;
using namespace uvsplat::testing;

TEST(PseudoInverse, AxisTriangle) {
  const auto o = OneTriangle::axis();
  Mat23<double> expect;
  expect << 1, 0, 0, 0, 1, 0;
  EXPECT_LE((o.jac.jv_pinv[0] - expect).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(PseudoInverse, ProjectorIdentities) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  double worst_left = 0, worst_idem = 0, worst_normal = 0, worst_oracle = 0;
  int svd_cases = 0;
  for (int trial = 0; trial < 3000; ++trial) {
    Mat32<double> j;
    for (int k = 0; k < 6; ++k) j(k) = u(rng);
    if (trial % 3 == 1) {
      // Needle: second edge nearly parallel to the first.
      j.col(1) = j.col(0) * u(rng) + Vec3<double>(u(rng), u(rng), u(rng)) * std::pow(10.0, -3 - trial % 4);
    } else if (trial % 3 == 2) {
      // Tiny but well shaped: J^T J below the closed-form threshold.
      j *= std::pow(10.0, -5 - trial % 3);
    }
    bool svd = false;
    const Mat23<double> p = pseudo_inverse<double>(j, &svd);
    svd_cases += svd;
    const Mat3<double> proj = j * p;
    const Vec3<double> n = j.col(0).cross(j.col(1)).normalized();
    worst_left = std::max(worst_left, (p * j - Mat2<double>::Identity()).cwiseAbs().maxCoeff());
    worst_idem = std::max(worst_idem, (proj * proj - proj).cwiseAbs().maxCoeff());
    worst_normal = std::max(worst_normal, (proj * n).cwiseAbs().maxCoeff());
    // Oracle: Eigen's complete orthogonal decomposition.
    const Mat23<double> ref = j.completeOrthogonalDecomposition().pseudoInverse();
    const Mat3<double> ref_proj = j * ref;
    worst_oracle = std::max(worst_oracle, (proj - ref_proj).cwiseAbs().maxCoeff());
  }
  EXPECT_GT(svd_cases, 500);
  EXPECT_LE(worst_left, 1e-5);
  EXPECT_LE(worst_idem, 1e-5);
  EXPECT_LE(worst_normal, 1e-6);
  EXPECT_LE(worst_oracle, 1e-6);
}

TEST(PseudoInverse, AdjointMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 20; ++trial) {
    Mat32<double> j;
    Mat23<double> w;
    for (int k = 0; k < 6; ++k) j(k) = u(rng), w(k) = u(rng);
    const Mat32<double> g = pseudo_inverse_backward<double>(j, pseudo_inverse<double>(j), w);
    GradCheck gc;
    for (int k = 0; k < 6; ++k) {
      auto f = [&]() { return (w.array() * pseudo_inverse<double>(j).array()).sum(); };
      gc.add(g(k), central_diff(f, j(k), 1e-6), "J");
    }
    EXPECT_LE(gc.worst, 1e-6) << gc.where;
  }
}

TEST(SplatUv, IdentityChart) {
  const auto o = OneTriangle::axis();
  const auto s = one_splat(Vec3<double>(0.5, 0.25, 0.25), 0.1);
  const auto w = instantiate(s, o.mesh, o.rig);
  const auto xf = build_splat_uv_transforms(w, o.jac, s, o.rig);
  EXPECT_LE((xf.uv0[0] - Vec2<double>(0.25, 0.25)).norm(), 1e-12);
  EXPECT_LE((xf.jac[0] - 0.1 * Mat2<double>::Identity()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((map_st_to_uv(xf, 0, 0.0, 0.0) - xf.uv0[0]).norm(), 1e-15);
  EXPECT_LE((map_st_to_uv(xf, 0, 1.0, 1.0) - Vec2<double>(0.35, 0.35)).norm(), 1e-12);
}

TEST(SplatUv, NormalOffsetIsDropped) {
  const auto o = OneTriangle::axis();
  const auto a = one_splat(Vec3<double>(0.5, 0.25, 0.25), 0.1);
  const auto b = one_splat(Vec3<double>(0.5, 0.25, 0.25), 0.1, 0.5);
  const auto xa = build_splat_uv_transforms(instantiate(a, o.mesh, o.rig), o.jac, a, o.rig);
  const auto xb = build_splat_uv_transforms(instantiate(b, o.mesh, o.rig), o.jac, b, o.rig);
  EXPECT_EQ(xa.uv0[0], xb.uv0[0]);
  EXPECT_EQ(xa.jac[0], xb.jac[0]);
}

TEST(SplatUv, InPlaneQuarterTurn) {
  const auto o = OneTriangle::axis();
  const auto s = one_splat(Vec3<double>(0.5, 0.25, 0.25), 0.1, 0,
                           quat_from_axis_angle<double>(Vec3<double>::UnitZ(), M_PI / 2));
  const auto w = instantiate(s, o.mesh, o.rig);
  const auto xf = build_splat_uv_transforms(w, o.jac, s, o.rig);
  Mat2<double> expect;
  expect << 0, -0.1, 0.1, 0;
  EXPECT_LE((xf.jac[0] - expect).cwiseAbs().maxCoeff(), 1e-6);
  for (double st : {-1.0, 0.5, 2.0}) {
    const Vec3<double> p = w.center[0] + st * w.tangent_s(0) - 0.5 * st * w.tangent_t(0);
    EXPECT_LE((map_st_to_uv(xf, 0, st, -0.5 * st) - naive_project_uv(p, 0, o.mesh, o.rig)).norm(), 1e-6);
  }
}

TEST(NaiveProjection, AxisExamples) {
  const auto o = OneTriangle::axis();
  EXPECT_LE((naive_project_uv(Vec3<double>(0.3, 0.4, 5.0), 0, o.mesh, o.rig) - Vec2<double>(0.3, 0.4)).norm(), 1e-12);
  const auto p = OneTriangle::make({Vec3<double>(0.1, 0.2, 0.3), Vec3<double>(1.3, -0.2, 0.1), Vec3<double>(0, 1, 1)},
                                   {Vec2<double>(0.2, 0.1), Vec2<double>(0.9, 0.3), Vec2<double>(0.4, 0.8)});
  for (int k = 0; k < 3; ++k) EXPECT_EQ(naive_project_uv(p.mesh.vertices[k], 0, p.mesh, p.rig), p.rig.uvs[0][k]);
}

TEST(SplatUv, ExactOnRandomTriangles) {
  // Split timing: only the UV comparison loop is budgeted.
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-2, 2), nd(-0.3, 0.3);
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0, worst_disp = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const auto o = random_triangle(rng);
    Vec3<double> b = detail::sample_simplex<double>(rng);
    b = b.cwiseMax(1e-6);
    b /= b.sum();
    const double scale = std::exp(nd(rng) * 3) * 0.1;
    const Vec4<double> inplane = quat_from_axis_angle<double>(Vec3<double>::UnitZ(), 6.28 * (u(rng) + 2) / 4);
    auto s = one_splat(b, scale, 0, inplane);
    s.log_scales[0][1] += nd(rng);
    const auto w = instantiate(s, o.mesh, o.rig);
    const auto xf = build_splat_uv_transforms(w, o.jac, s, o.rig);
    const double ss = u(rng), tt = u(rng);
    const Vec3<double> p = w.center[0] + ss * w.tangent_s(0) + tt * w.tangent_t(0);
    worst = std::max(worst, (map_st_to_uv(xf, 0, ss, tt) - naive_project_uv(p, 0, o.mesh, o.rig)).cwiseAbs().maxCoeff());
    // Lifting the splat along the normal changes nothing.
    auto lifted = s;
    lifted.displacement[0] = nd(rng);
    const auto wl = instantiate(lifted, o.mesh, o.rig);
    const auto xl = build_splat_uv_transforms(wl, o.jac, lifted, o.rig);
    worst_disp = std::max(worst_disp, (map_st_to_uv(xl, 0, ss, tt) - map_st_to_uv(xf, 0, ss, tt)).cwiseAbs().maxCoeff());
    const Vec3<double> pl = wl.center[0] + ss * wl.tangent_s(0) + tt * wl.tangent_t(0);
    worst_disp = std::max(worst_disp, (map_st_to_uv(xl, 0, ss, tt) - naive_project_uv(pl, 0, o.mesh, o.rig)).cwiseAbs().maxCoeff());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LE(worst, 1e-5);
  EXPECT_LE(worst_disp, 1e-5);
  EXPECT_LT(secs, 5.0);
}

TEST(SplatUv, OutOfPlaneTiltFollowsProjection) {
  // A tilted splat maps through the orthogonal projection of its tangents.
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const auto o = random_triangle(rng);
    auto s = one_splat(Vec3<double>(0.3, 0.3, 0.4), 0.05, 0.02, random_quat<double>(rng, 0.6));
    const auto w = instantiate(s, o.mesh, o.rig);
    const auto xf = build_splat_uv_transforms(w, o.jac, s, o.rig);
    for (double st : {-1.5, 0.7}) {
      const Vec3<double> p = w.center[0] + st * w.tangent_s(0) + 0.3 * w.tangent_t(0);
      EXPECT_LE((map_st_to_uv(xf, 0, st, 0.3) - naive_project_uv(p, 0, o.mesh, o.rig)).norm(), 1e-9);
    }
  }
}

TEST(SplatUv, ZeroJacobianAblation) {
  const auto o = OneTriangle::axis();
  const auto s = one_splat(Vec3<double>(0.5, 0.25, 0.25), 0.1);
  const auto xf = build_splat_uv_transforms(instantiate(s, o.mesh, o.rig), o.jac, s, o.rig, true);
  EXPECT_EQ(map_st_to_uv(xf, 0, 0.7, -0.4), xf.uv0[0]);
}
