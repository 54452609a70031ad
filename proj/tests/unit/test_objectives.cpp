#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "immunity/error.hpp"
#include "immunity/grad_check.hpp"
#include "immunity/mi_oracle.hpp"
#include "immunity/objectives.hpp"
#include "immunity/ops.hpp"

using namespace immunity;

namespace {

std::vector<double> random_distribution(std::size_t g, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.01, 1.0);
  std::vector<double> v(g);
  double s = 0.0;
  for (double& x : v) s += (x = u(rng));
  for (double& x : v) x /= s;
  return v;
}

Tensor centers_of(std::vector<double> xy) {
  const std::size_t b = xy.size() / 2;
  return Tensor({b, 2}, std::move(xy));
}

}  // namespace

TEST(LossCe, OneHotIsZero) {
  std::vector<double> onehot{0, 1, 0};
  EXPECT_NEAR(loss_ce(onehot, {onehot, onehot}, 1, 0.7), 0.0, 1e-15);
}

TEST(LossCe, HandExample) {
  std::vector<double> half{0.5, 0.5};
  EXPECT_NEAR(loss_ce(half, {half, half}, 0, 1.0), 3.0 * std::log(2.0), 1e-12);
}

TEST(LossCe, AlphaZeroIsPlainCrossEntropy) {
  std::vector<double> mix{0.2, 0.8};
  std::vector<double> other{0.9, 0.1};
  EXPECT_NEAR(loss_ce(mix, {other, other}, 1, 0.0), -std::log(0.8), 1e-15);
}

TEST(LossCe, ClampsZeroProbability) {
  std::vector<double> mix{1.0, 0.0};
  const double v = loss_ce(mix, {}, 1, 1.0);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, -std::log(kProbabilityFloor), 1e-9);
}

TEST(LossCe, RejectsLabelOutOfRange) {
  std::vector<double> mix{0.5, 0.5};
  EXPECT_THROW(loss_ce(mix, {mix}, 2, 1.0), ShapeError);
}

TEST(LossMi, IdenticalHeatmapsGiveNLogN) {
  std::mt19937_64 rng(1);
  for (std::size_t n : {2u, 3u, 5u}) {
    auto h = random_distribution(16, rng);
    std::vector<Tensor> maps(n, Tensor({4, 4}, h));
    EXPECT_NEAR(loss_mi(maps).item(), n * std::log(double(n)), 1e-12);
  }
}

TEST(LossMi, DisjointPointMassesGiveZero) {
  std::vector<double> a(16, 0.0), b(16, 0.0);
  a[0] = 1.0;
  b[15] = 1.0;
  EXPECT_NEAR(loss_mi({Tensor({4, 4}, a), Tensor({4, 4}, b)}).item(), 0.0, 1e-15);
}

TEST(LossMi, MatchesOracleIdentity) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<double>> rows;
    std::vector<Tensor> maps;
    for (int i = 0; i < 3; ++i) {
      rows.push_back(random_distribution(16, rng));
      maps.emplace_back(Shape{4, 4}, rows.back());
    }
    const double mi = oracle::mutual_information_exact({rows, {}});
    EXPECT_NEAR(loss_mi(maps).item(), 3.0 * (std::log(3.0) - mi), 1e-9);
  }
}

TEST(LossMi, BatchedAndSymmetric) {
  std::mt19937_64 rng(3);
  std::vector<double> a, b, c;
  for (int s = 0; s < 2; ++s) {
    auto x = random_distribution(9, rng), y = random_distribution(9, rng), z = random_distribution(9, rng);
    a.insert(a.end(), x.begin(), x.end());
    b.insert(b.end(), y.begin(), y.end());
    c.insert(c.end(), z.begin(), z.end());
  }
  Tensor ta({2, 3, 3}, a), tb({2, 3, 3}, b), tc({2, 3, 3}, c);
  Tensor l1 = loss_mi({ta, tb, tc});
  Tensor l2 = loss_mi({tc, ta, tb});
  ASSERT_EQ(l1.shape(), (Shape{2}));
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_NEAR(l1.at(i), l2.at(i), 1e-12);
    EXPECT_GE(l1.at(i), 0.0);
    EXPECT_LE(l1.at(i), 3.0 * std::log(3.0) + 1e-12);
  }
  Tensor first({3, 3}, std::vector<double>(a.begin(), a.begin() + 9));
  Tensor second({3, 3}, std::vector<double>(b.begin(), b.begin() + 9));
  Tensor third({3, 3}, std::vector<double>(c.begin(), c.begin() + 9));
  EXPECT_NEAR(loss_mi({first, second, third}).item(), l1.at(0), 1e-12);
}

TEST(LossMi, RejectsGridMismatch) {
  EXPECT_THROW(loss_mi({Tensor::full({2, 2}, 0.25), Tensor::full({3, 3}, 1.0 / 9)}), ShapeError);
}

TEST(LossMi, GradientMatchesCentralDifferences) {
  std::mt19937_64 rng(5);
  auto h2 = random_distribution(16, rng);
  auto h3 = random_distribution(16, rng);
  Tensor point({4, 4}, random_distribution(16, rng));
  auto fn = [&](const Tensor& h1) {
    return ops::sum(loss_mi({h1, Tensor({4, 4}, h2), Tensor({4, 4}, h3)}));
  };
  EXPECT_LE(grad_check(fn, point, 1e-5).max_relative_error, 1e-5);
}

TEST(CenterOfMass, Examples) {
  Heatmap u;
  u.height = 4;
  u.width = 4;
  u.grid.assign(16, 1.0 / 16);
  auto c = center_of_mass(u);
  EXPECT_NEAR(c.x_c, 1.5, 1e-12);
  EXPECT_NEAR(c.y_c, 1.5, 1e-12);

  Heatmap p = u;
  std::fill(p.grid.begin(), p.grid.end(), 0.0);
  p.grid[2 * 4 + 3] = 1.0;
  c = center_of_mass(p);
  EXPECT_DOUBLE_EQ(c.x_c, 2.0);
  EXPECT_DOUBLE_EQ(c.y_c, 3.0);

  Heatmap m;
  m.height = 5;
  m.width = 1;
  m.grid = {0.75, 0, 0, 0, 0.25};
  c = center_of_mass(m);
  EXPECT_DOUBLE_EQ(c.x_c, 1.0);
  EXPECT_DOUBLE_EQ(c.y_c, 0.0);
}

TEST(CenterOfMass, RejectsZeroMass) {
  EXPECT_THROW(center_of_mass(Tensor::zeros({1, 3, 3})), NumericError);
}

TEST(LossPs, HandExample) {
  // Expert 0 at the origin; expert 1 at squared distances 4 and 8.
  Tensor c0 = centers_of({0, 0, 0, 0});
  Tensor c1 = centers_of({2, 0, 2, 2});
  EXPECT_NEAR(loss_ps({c0, c1}).item(), 16.0, 1e-12);

  std::vector<std::vector<MassCenter>> per_sample{{{0, 0}, {2, 0}}, {{0, 0}, {2, 2}}};
  EXPECT_NEAR(loss_ps(per_sample), 16.0, 1e-12);
}

TEST(LossPs, IdenticalGeometryIsZero) {
  Tensor c0 = centers_of({1, 1, 5, 5, 2, 7});
  Tensor c1 = centers_of({2, 3, 6, 7, 3, 9});
  EXPECT_NEAR(loss_ps({c0, c1}).item(), 0.0, 1e-12);
}

TEST(LossPs, TranslationInvariance) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 15);
  std::vector<std::vector<double>> xy(3, std::vector<double>(8));
  for (auto& e : xy)
    for (double& v : e) v = u(rng);
  std::vector<Tensor> base;
  for (auto& e : xy) base.push_back(centers_of(e));
  const double before = loss_ps(base).item();
  // Shift every expert center of sample 2 by the same offset.
  std::vector<Tensor> moved;
  for (auto e : xy) {
    e[4] += 3.25;
    e[5] -= 1.5;
    moved.push_back(centers_of(e));
  }
  EXPECT_NEAR(loss_ps(moved).item(), before, 1e-9);
}

TEST(LossPs, SingleSampleIsZero) {
  EXPECT_EQ(loss_ps({centers_of({0, 0}), centers_of({3, 4})}).item(), 0.0);
}

TEST(LossPs, GradientThroughHeatmapsMatchesCentralDifferences) {
  std::mt19937_64 rng(9);
  std::vector<double> other;
  for (int b = 0; b < 3; ++b) {
    auto d = random_distribution(16, rng);
    other.insert(other.end(), d.begin(), d.end());
  }
  std::vector<double> start;
  for (int b = 0; b < 3; ++b) {
    auto d = random_distribution(16, rng);
    start.insert(start.end(), d.begin(), d.end());
  }
  Tensor fixed({3, 4, 4}, other);
  auto fn = [&](const Tensor& h) { return loss_ps({center_of_mass(h), center_of_mass(fixed)}); };
  EXPECT_LE(grad_check(fn, Tensor({3, 4, 4}, start), 1e-5).max_relative_error, 1e-5);
}

TEST(TotalLoss, HandExample) {
  LossCoefficients k{1.0, 1.0, 1.0};
  EXPECT_NEAR(total_loss(2.0, 1.0, 16.0, k, 2, 2), 5.25, 1e-15);
  Tensor ce({2}, {1.5, 0.5});
  Tensor mi({2}, {0.25, 0.75});
  Tensor ps({1}, {16.0});
  auto t = total_loss(ce, mi, ps, k, 2);
  EXPECT_NEAR(t.total.item(), 5.25, 1e-15);
  EXPECT_EQ(t.breakdown.mb, 2u);
  EXPECT_EQ(t.breakdown.ce, 2.0);
  EXPECT_EQ(t.breakdown.mi, 1.0);
  EXPECT_EQ(t.breakdown.ps, 16.0);
}

TEST(TotalLoss, ZeroCoefficientsGiveMeanCe) {
  LossCoefficients k{1.0, 0.0, 0.0};
  Tensor ce({4}, {1, 2, 3, 4});
  auto t = total_loss(ce, Tensor({4}, {9, 9, 9, 9}), Tensor({1}, {100.0}), k, 3);
  EXPECT_DOUBLE_EQ(t.total.item(), 2.5);
  // mi and ps are still logged when unweighted.
  EXPECT_EQ(t.breakdown.mi, 36.0);
  EXPECT_EQ(t.breakdown.ps, 100.0);
  EXPECT_EQ(total_loss(0, 0, 0, LossCoefficients{}, 3, 4), 0.0);
}

TEST(TotalLoss, RejectsNegativeCoefficients) {
  EXPECT_THROW(total_loss(1, 1, 1, LossCoefficients{1, -1, 0}, 2, 2), ConfigError);
}

TEST(TotalLoss, LoggedComponentsRecomputeTotal) {
  LossCoefficients k{1.0, 0.7, 0.3};
  Tensor ce({3}, {0.3, 1.1, 0.2});
  Tensor mi({3}, {1.0, 0.9, 1.2});
  Tensor ps({1}, {4.5});
  auto t = total_loss(ce, mi, ps, k, 4);
  const auto& b = t.breakdown;
  EXPECT_NEAR(total_loss(b.ce, b.mi, b.ps, k, 4, 3), b.total, 1e-12);
  EXPECT_EQ(b.to_json_line(7).rfind("{\"step\":7,\"ce\":", 0), 0u);
}
