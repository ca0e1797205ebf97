#include "econgrasp/matching.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <set>

using namespace econgrasp;

namespace {

EconomicSceneLabels labels_at(const std::vector<Vec3>& points, int n_views = 3) {
  EconomicSceneLabels labels(n_views);
  for (const Vec3& p : points) {
    const std::size_t row = labels.add_point(p.cast<float>());
    for (int v = 0; v < n_views; ++v) labels.view_graspness(row)[static_cast<std::size_t>(v)] = static_cast<float>(row + v);
  }
  return labels;
}

std::int64_t brute_nearest(const Vec3& q, const EconomicSceneLabels& labels, double radius) {
  std::int64_t best = kNoMatch;
  double best_d = 0.0;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    const double d = (labels.point(k).cast<double>() - q).norm();
    if (d > radius) continue;
    if (best == kNoMatch || d < best_d) {
      best = static_cast<std::int64_t>(k);
      best_d = d;
    }
  }
  return best;
}

std::vector<Vec3> random_cloud(Rng& rng, std::size_t n, double extent) {
  std::vector<Vec3> out(n);
  for (Vec3& p : out) p = Vec3(uniform(rng, -extent, extent), uniform(rng, -extent, extent), uniform(rng, -extent, extent));
  return out;
}

// Greedy farthest-point order computed from scratch at every step.
std::vector<std::size_t> brute_fps(const std::vector<Vec3>& cloud, std::size_t count) {
  std::vector<std::size_t> chosen{0};
  while (chosen.size() < count) {
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t j = 0; j < cloud.size(); ++j) {
      double d = std::numeric_limits<double>::infinity();
      for (std::size_t c : chosen) d = std::min(d, (cloud[j] - cloud[c]).squaredNorm());
      if (d > best_d) {
        best_d = d;
        best = j;
      }
    }
    chosen.push_back(best);
  }
  return chosen;
}

}  // namespace

TEST(SamplePoints, DeterministicPerSeed) {
  Rng rng = make_rng(1);
  const auto cloud = random_cloud(rng, 500, 0.1);
  for (auto strategy : {SamplingStrategy::uniform, SamplingStrategy::farthest_point}) {
    EXPECT_EQ(sample_points(cloud, 100, 9, strategy), sample_points(cloud, 100, 9, strategy));
  }
  EXPECT_NE(sample_indices(cloud, 100, 9, SamplingStrategy::uniform), sample_indices(cloud, 100, 10, SamplingStrategy::uniform));
}

TEST(SamplePoints, UniformWithoutThenWithReplacement) {
  Rng rng = make_rng(2);
  const auto cloud = random_cloud(rng, 50, 0.1);
  const auto idx = sample_indices(cloud, 50, 3, SamplingStrategy::uniform);
  EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 50u);
  const auto more = sample_indices(cloud, 200, 3, SamplingStrategy::uniform);
  EXPECT_EQ(more.size(), 200u);
  for (std::size_t i : more) EXPECT_LT(i, 50u);
}

TEST(SamplePoints, FarthestPointOracle) {
  // unit square corners: after corner 0 comes the opposite corner
  const std::vector<Vec3> square{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0}};
  EXPECT_EQ(sample_indices(square, 2, 0, SamplingStrategy::farthest_point), (std::vector<std::size_t>{0, 3}));

  Rng rng = make_rng(3);
  for (int t = 0; t < 30; ++t) {
    const auto cloud = random_cloud(rng, 80, 0.1);
    EXPECT_EQ(sample_indices(cloud, 25, 0, SamplingStrategy::farthest_point), brute_fps(cloud, 25));
    auto all = sample_indices(cloud, cloud.size(), 0, SamplingStrategy::farthest_point);
    std::sort(all.begin(), all.end());
    for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(all[i], i);  // a permutation
  }
}

TEST(SamplePoints, Errors) {
  const std::vector<Vec3> cloud{{0, 0, 0}, {1, 0, 0}};
  EXPECT_THROW(sample_indices(cloud, 0, 0, SamplingStrategy::uniform), ValidationError);
  EXPECT_THROW(sample_indices({}, 1, 0, SamplingStrategy::uniform), ValidationError);
  EXPECT_THROW(sample_indices(cloud, 3, 0, SamplingStrategy::farthest_point), ValidationError);
}

TEST(Match, CoincidentFarAndTie) {
  const auto labels = labels_at({{0, 0, 0}, {0.004, 0, 0}, {-0.004, 0, 0}, {1, 1, 1}});
  const std::vector<Vec3> q{{1, 1, 1}, {0.5, 0.5, 0.5}, {0, 0, 0.003}};
  const MatchResult m = match(q, labels, 0.005);
  EXPECT_EQ(m.index, (std::vector<std::int64_t>{3, kNoMatch, 0}));
  EXPECT_EQ(m.mask, (std::vector<char>{1, 0, 1}));
  // equidistant from rows 1 and 2: the lower row wins
  const std::vector<Vec3> mid{{0, 0.002, 0}, {0, 0, 0}};
  const auto tie_labels = labels_at({{0.25, 0.5, 0}, {0.001, 0, 0}, {-0.001, 0, 0}});
  const Vec3 center(0, 0, 0);
  EXPECT_EQ((tie_labels.point(1).cast<double>() - center).norm(), (tie_labels.point(2).cast<double>() - center).norm());
  EXPECT_EQ(match(mid, tie_labels, 0.005).index, (std::vector<std::int64_t>{1, 1}));
  EXPECT_EQ(brute_nearest(center, tie_labels, 0.005), 1);
  EXPECT_THROW(match(q, labels, 0.0), ValidationError);
}

TEST(Match, MatchesBruteForce) {
  Rng rng = make_rng(4);
  for (int t = 0; t < 100; ++t) {
    const auto label_points = random_cloud(rng, uniform_index(rng, 1000), 0.05);
    const auto labels = labels_at(label_points, 1);
    const auto queries = random_cloud(rng, 200, 0.06);
    const double radius = uniform(rng, 0.001, 0.02);
    const MatchResult m = match(queries, labels, radius);
    for (std::size_t i = 0; i < queries.size(); ++i) {
      ASSERT_EQ(m.index[i], brute_nearest(queries[i], labels, radius));
      ASSERT_EQ(m.mask[i] != 0, m.index[i] != kNoMatch);
    }
  }
}

TEST(MakeBundle, InvariantsAndTargets) {
  Rng rng = make_rng(5);
  for (int t = 0; t < 50; ++t) {
    const auto cloud = random_cloud(rng, 400, 0.05);
    // labels on a random subset of the cloud
    std::vector<Vec3> kept;
    for (const Vec3& p : cloud) {
      if (uniform01(rng) < 0.6) kept.push_back(p);
    }
    const auto labels = labels_at(kept, 4);
    const auto idx = sample_indices(cloud, 128, static_cast<std::uint64_t>(t), SamplingStrategy::uniform);
    const SupervisionBundle b = make_bundle(cloud, idx, labels, 0.005);
    ASSERT_EQ(b.size(), 128u);
    std::size_t brute_supervised = 0;
    for (std::size_t i = 0; i < b.size(); ++i) {
      EXPECT_EQ(b.sampled_points[i], cloud[idx[i]]);
      const bool supervised = b.mask[i] != 0;
      EXPECT_EQ(supervised, b.match_index[i] != kNoMatch);
      brute_supervised += brute_nearest(cloud[idx[i]], labels, 0.005) != kNoMatch ? 1 : 0;
      if (!supervised) {
        EXPECT_TRUE(b.view_targets[i].empty());
        EXPECT_TRUE(b.records[i].empty());
        continue;
      }
      const auto row = static_cast<std::size_t>(b.match_index[i]);
      ASSERT_LT(row, labels.size());
      EXPECT_LE((labels.point(row).cast<double>() - b.sampled_points[i]).norm(), 0.005);
      EXPECT_EQ(b.view_targets[i], std::vector<float>(labels.view_graspness(row).begin(), labels.view_graspness(row).end()));
      EXPECT_EQ(b.records[i].size(), 4u);
    }
    EXPECT_EQ(b.supervised(), brute_supervised);
  }
}

TEST(MakeBundle, AllWithinAndEmptyLabels) {
  Rng rng = make_rng(6);
  const auto cloud = random_cloud(rng, 100, 0.05);
  const auto idx = sample_indices(cloud, 100, 0, SamplingStrategy::uniform);
  EXPECT_EQ(make_bundle(cloud, idx, labels_at(cloud), 0.005).supervised(), 100u);
  EXPECT_EQ(make_bundle(cloud, idx, EconomicSceneLabels(3), 0.005).supervised(), 0u);
  const std::vector<std::size_t> bad{100};
  EXPECT_THROW(make_bundle(cloud, bad, labels_at(cloud), 0.005), ValidationError);
}
