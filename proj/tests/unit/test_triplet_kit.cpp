#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "cwmerge/triplet_kit.hpp"

using namespace cwmerge;

namespace {

EmbeddingTable random_table(std::mt19937_64& gen, std::size_t t, std::size_t dim) {
  std::normal_distribution<double> nd;
  EmbeddingTable tbl;
  tbl.vectors = Matrix(t, dim);
  for (std::size_t i = 0; i < t; ++i) {
    tbl.ids.push_back("e" + std::to_string(1000 + i));
    for (auto& v : tbl.vectors.row(i)) v = nd(gen);
  }
  return tbl;
}

std::size_t index_of(const EmbeddingTable& t, const std::string& id) {
  return static_cast<std::size_t>(std::find(t.ids.begin(), t.ids.end(), id) - t.ids.begin());
}

std::vector<double> rand_vec(std::mt19937_64& gen, std::size_t dim) {
  std::normal_distribution<double> nd;
  std::vector<double> v(dim);
  for (auto& x : v) x = nd(gen);
  return v;
}

}  // namespace

TEST(Mining, PositivesNearNegativesFar) {
  std::mt19937_64 gen(1);
  for (std::size_t t : {21u, 30u}) {
    const auto tbl = random_table(gen, t, 5);
    const auto trips = mine_triplets(tbl, 3, {.per_anchor = 3});
    ASSERT_EQ(trips.size(), 3 * t);
    for (const auto& tr : trips) {
      const auto a = index_of(tbl, tr.anchor_id);
      std::vector<double> d;
      for (std::size_t j = 0; j < t; ++j)
        if (j != a) d.push_back(distance(tbl.vectors.row(a), tbl.vectors.row(j)));
      std::sort(d.begin(), d.end());
      const double dp = distance(tbl.vectors.row(a), tbl.vectors.row(index_of(tbl, tr.positive_id)));
      const double dn = distance(tbl.vectors.row(a), tbl.vectors.row(index_of(tbl, tr.negative_id)));
      EXPECT_LE(dp, d[9]);
      EXPECT_GE(dn, d[d.size() - 10]);
      EXPECT_NE(tr.positive_id, tr.anchor_id);
      EXPECT_NE(tr.negative_id, tr.anchor_id);
    }
  }
}

TEST(Mining, AnchorsInInputOrder) {
  std::mt19937_64 gen(2);
  const auto tbl = random_table(gen, 25, 4);
  const auto trips = mine_triplets(tbl, 0, {.per_anchor = 2});
  for (std::size_t i = 0; i < trips.size(); ++i) EXPECT_EQ(trips[i].anchor_id, tbl.ids[i / 2]);
}

TEST(Mining, DeterministicAcrossRunsAndThreads) {
  std::mt19937_64 gen(3);
  const auto tbl = random_table(gen, 40, 6);
  const auto a = mine_triplets(tbl, 17, {.per_anchor = 2});
  EXPECT_EQ(a, mine_triplets(tbl, 17, {.per_anchor = 2}));
  EXPECT_EQ(a, mine_triplets(tbl, 17, {.per_anchor = 2, .threads = 4}));
  EXPECT_NE(a, mine_triplets(tbl, 18, {.per_anchor = 2}));
}

TEST(Mining, CosineDistanceOption) {
  std::mt19937_64 gen(4);
  auto tbl = random_table(gen, 22, 3);
  const auto trips = mine_triplets(tbl, 1, {.distance = DistanceKind::Cosine});
  for (const auto& tr : trips) {
    const auto a = index_of(tbl, tr.anchor_id);
    const auto order = rank_neighbors(tbl, a, DistanceKind::Cosine);
    const auto p = index_of(tbl, tr.positive_id);
    EXPECT_LT(std::find(order.begin(), order.end(), p) - order.begin(), 10);
  }
}

TEST(Mining, InputErrors) {
  std::mt19937_64 gen(5);
  try {
    mine_triplets(random_table(gen, 5, 3), 0);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("need at least 21 points"), std::string::npos);
  }
  auto dup = random_table(gen, 21, 3);
  dup.ids[4] = dup.ids[7];
  EXPECT_THROW(mine_triplets(dup, 0), ValidationError);
  auto nan = random_table(gen, 21, 3);
  nan.vectors(3, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(mine_triplets(nan, 0), ValidationError);
  EXPECT_THROW(mine_triplets(random_table(gen, 21, 3), 0, {.per_anchor = 0}), ValidationError);
}

TEST(TripletLoss, Examples) {
  const std::vector<double> a{0}, p{1}, n{3};
  EXPECT_DOUBLE_EQ(triplet_loss(a, p, n), 0.0);
  EXPECT_DOUBLE_EQ(triplet_loss(a, a, p, 0.5), 0.0);
  EXPECT_DOUBLE_EQ(triplet_loss(a, p, p, 0.5), 0.5);
  EXPECT_DOUBLE_EQ(triplet_loss(a, n, n, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(triplet_loss(a, p, n, 2.5), 0.5);
  EXPECT_DOUBLE_EQ(triplet_loss(std::vector<double>{0, 0}, std::vector<double>{3, 4}, std::vector<double>{1, 0}), 5.0);
  EXPECT_THROW(triplet_loss(a, p, n, -1), ValidationError);
  EXPECT_THROW(triplet_loss(a, std::vector<double>{1, 2}, n), ValidationError);
}

TEST(TripletLoss, RandomHingeAndTranslation) {
  std::mt19937_64 gen(6);
  std::uniform_real_distribution<double> ud(0.0, 3.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto a = rand_vec(gen, 4), p = rand_vec(gen, 4), n = rand_vec(gen, 4), shift = rand_vec(gen, 4);
    const double m = ud(gen);
    double dap = 0, dan = 0;
    for (int i = 0; i < 4; ++i) {
      dap += (a[i] - p[i]) * (a[i] - p[i]);
      dan += (a[i] - n[i]) * (a[i] - n[i]);
    }
    const double expect = std::max(0.0, std::sqrt(dap) - std::sqrt(dan) + m);
    const double got = triplet_loss(a, p, n, m);
    EXPECT_NEAR(got, expect, 1e-12);
    EXPECT_GE(got, 0.0);
    auto sa = a, sp = p, sn = n;
    for (int i = 0; i < 4; ++i) sa[i] += shift[i], sp[i] += shift[i], sn[i] += shift[i];
    EXPECT_NEAR(triplet_loss(sa, sp, sn, m), got, 1e-9);
  }
}

TEST(TripletGradient, OneDimensionalExample) {
  const auto g = triplet_loss_gradient(std::vector<double>{0}, std::vector<double>{1}, std::vector<double>{3}, 2.5);
  EXPECT_DOUBLE_EQ(g.positive[0], 1.0);
  EXPECT_DOUBLE_EQ(g.negative[0], -1.0);
  EXPECT_DOUBLE_EQ(g.anchor[0], 0.0);
}

TEST(TripletGradient, OneDimensionalExampleMarginThree) {
  // Differentiating |fA-fP| - |fA-fN| at fA=0, fP=1, fN=3 gives -1 for fN, not +1.
  const auto g = triplet_loss_gradient(std::vector<double>{0}, std::vector<double>{1}, std::vector<double>{3}, 3.0);
  EXPECT_DOUBLE_EQ(g.positive[0], 1.0);
  EXPECT_DOUBLE_EQ(g.negative[0], -1.0);
  EXPECT_DOUBLE_EQ(g.anchor[0], 0.0);
}

TEST(TripletGradient, InactiveHingeIsZero) {
  const auto g = triplet_loss_gradient(std::vector<double>{0}, std::vector<double>{1}, std::vector<double>{3});
  EXPECT_EQ(g.anchor, std::vector<double>{0.0});
  EXPECT_EQ(g.positive, std::vector<double>{0.0});
  EXPECT_EQ(g.negative, std::vector<double>{0.0});
  EXPECT_NO_THROW(triplet_loss_gradient(std::vector<double>{0}, std::vector<double>{0}, std::vector<double>{5}));
}

TEST(TripletGradient, ZeroDistanceWithActiveHingeIsRejected) {
  EXPECT_THROW(triplet_loss_gradient(std::vector<double>{1, 1}, std::vector<double>{1, 1}, std::vector<double>{1, 1.5}),
               ValidationError);
}

TEST(TripletGradient, MatchesFiniteDifferences) {
  std::mt19937_64 gen(7);
  int checked = 0;
  while (checked < 100) {
    std::vector<std::vector<double>> x{rand_vec(gen, 5), rand_vec(gen, 5), rand_vec(gen, 5)};
    const double m = 1.5;
    const auto loss = [&] { return triplet_loss(x[0], x[1], x[2], m); };
    if (loss() < 1e-3) continue;
    const auto g = triplet_loss_gradient(x[0], x[1], x[2], m);
    const std::vector<const std::vector<double>*> grads{&g.anchor, &g.positive, &g.negative};
    const double h = 1e-6;
    for (std::size_t which = 0; which < 3; ++which) {
      for (std::size_t i = 0; i < 5; ++i) {
        const double keep = x[which][i];
        x[which][i] = keep + h;
        const double up = loss();
        x[which][i] = keep - h;
        const double down = loss();
        x[which][i] = keep;
        const double fd = (up - down) / (2 * h);
        const double an = (*grads[which])[i];
        EXPECT_LE(std::abs(fd - an), 1e-4 * std::max(1.0, std::abs(an))) << "trial " << checked;
      }
    }
    ++checked;
  }
}

TEST(CombinedLoss, Examples) {
  EXPECT_DOUBLE_EQ(combined_loss(2.0, 1.0), 2.1);
  EXPECT_DOUBLE_EQ(combined_loss(2.0, 1.0, 0.0), 2.0);
  EXPECT_DOUBLE_EQ(combined_loss(0.5, 3.0, 0.5), 2.0);
  EXPECT_THROW(combined_loss(-1.0, 1.0), ValidationError);
  EXPECT_THROW(combined_loss(1.0, 1.0, -0.1), ValidationError);
}
