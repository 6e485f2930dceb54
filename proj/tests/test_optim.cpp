#include "common.hpp"

#include "uvsplat/optim.hpp"

using namespace uvsplat;

TEST(Adam, ZeroGradientLeavesParameters) {
  Adam<double> adam;
  std::vector<double> p{0.5, -1.25, 3.0}, g(3, 0.0);
  const auto before = p;
  for (int k = 0; k < 5; ++k) adam.step("x", 0.1, p.data(), g.data(), p.size());
  EXPECT_EQ(p, before);
  EXPECT_EQ(adam.groups().at("x").step, 5);
}

TEST(Adam, FirstStepIsLearningRateTimesSign) {
  for (double g0 : {1e-3, 0.7, -42.0, -2e-4}) {
    Adam<double> adam;
    std::vector<double> p{1.0}, g{g0};
    adam.step("x", 0.01, p.data(), g.data(), 1);
    const double expect = 1.0 - 0.01 * g0 / (std::abs(g0) + 1e-8);
    EXPECT_NEAR(p[0], expect, 1e-15) << g0;
    // The sign identity holds up to lr * eps / |g|.
    EXPECT_NEAR(p[0], 1.0 - 0.01 * (g0 > 0 ? 1 : -1), 0.01 * 1e-8 / std::abs(g0) + 1e-15) << g0;
  }
}

TEST(Adam, MatchesReferenceRecurrence) {
  // Textbook bias-corrected Adam written out longhand.
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 1);
  Adam<double> adam;
  std::vector<double> p{0.3, -0.2}, ref = p, m(2, 0), v(2, 0);
  for (int t = 1; t <= 50; ++t) {
    std::vector<double> g{n(rng), n(rng)};
    adam.step("x", 0.05, p.data(), g.data(), 2);
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      ref[i] -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  EXPECT_NEAR(p[0], ref[0], 1e-12);
  EXPECT_NEAR(p[1], ref[1], 1e-12);
}

TEST(Adam, NonFiniteGradientNamesGroupAndKeepsState) {
  Adam<float> adam;
  std::vector<float> p{1.0f, 2.0f}, g{0.5f, 0.5f};
  adam.step("material", 0.1, p.data(), g.data(), 2);
  const auto p1 = p;
  const auto st = adam.groups().at("material");
  g[1] = std::numeric_limits<float>::quiet_NaN();
  try {
    adam.step("material", 0.1, p.data(), g.data(), 2);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("material"), std::string::npos);
  }
  EXPECT_EQ(p, p1);
  EXPECT_EQ(adam.groups().at("material").step, st.step);
  EXPECT_EQ(adam.groups().at("material").m, st.m);
}

TEST(Adam, ShapeMismatchIsRejected) {
  Adam<double> adam;
  std::vector<double> p(3, 0.0), g(3, 1.0);
  adam.step("x", 0.1, p.data(), g.data(), 3);
  EXPECT_THROW(adam.step("x", 0.1, p.data(), g.data(), 2), DataError);
}

TEST(Adam, Deterministic) {
  auto run = [] {
    std::mt19937_64 rng(9);
    std::normal_distribution<float> n(0, 1);
    Adam<float> adam;
    std::vector<float> p(64, 0.1f), g(64);
    for (int t = 0; t < 100; ++t) {
      for (auto& x : g) x = n(rng);
      adam.step("a", 1e-3, p.data(), g.data(), p.size());
    }
    return p;
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, RemapKeepsSurvivorsAndZerosFreshEntries) {
  Adam<double> adam;
  std::vector<double> p{1, 2, 3, 4}, g{0.1, 0.2, 0.3, 0.4};
  adam.step("opacity", 0.1, p.data(), g.data(), 4);
  const auto old = adam.groups().at("opacity");
  adam.remap("opacity", {2, 0, 0}, {0, 0, 1}, 1);
  const auto& now = adam.groups().at("opacity");
  ASSERT_EQ(now.m.size(), 3u);
  EXPECT_EQ(now.m[0], old.m[2]);
  EXPECT_EQ(now.v[1], old.v[0]);
  EXPECT_EQ(now.m[2], 0.0);
  EXPECT_EQ(now.step, old.step);
}
