#include "econgrasp/supervision.hpp"

#include <gtest/gtest.h>

#include <tuple>

using namespace econgrasp;

namespace {

std::vector<DenseEntry> random_slice(Rng& rng, std::size_t n, double p_usable = 0.3) {
  std::vector<DenseEntry> s(n);
  for (DenseEntry& e : s) {
    const double u = uniform01(rng);
    if (u < p_usable) {
      e = {static_cast<std::uint8_t>(uniform_index(rng, 6)), 0, static_cast<float>(uniform(rng, 0.0, 0.1))};
    } else if (u < p_usable + 0.2) {
      // feasible in isolation but colliding in the scene
      e = {static_cast<std::uint8_t>(uniform_index(rng, 6)), 1, static_cast<float>(uniform(rng, 0.0, 0.1))};
    } else {
      e = {kInfeasible, static_cast<std::uint8_t>(uniform_index(rng, 2)), 0.0f};
    }
  }
  return s;
}

// Exhaustive argmax: minimal (mu, depth, angle) among usable entries.
BestGrasp brute_best(const std::vector<DenseEntry>& s, int n_angles, int n_depths) {
  std::optional<std::tuple<int, int, int>> best;
  for (int a = 0; a < n_angles; ++a) {
    for (int d = 0; d < n_depths; ++d) {
      const DenseEntry& e = s[static_cast<std::size_t>(a * n_depths + d)];
      if (e.collide || e.mu_code == kInfeasible) continue;
      const auto key = std::make_tuple(static_cast<int>(e.mu_code), d, a);
      if (!best || key < *best) best = key;
    }
  }
  if (!best) return BestGrasp::infeasible();
  const auto [mu, d, a] = *best;
  const double score = std::clamp(1.1 - GripperModel{}.friction_grid[static_cast<std::size_t>(mu)], 0.0, 1.0);
  return {static_cast<std::uint8_t>(a + 1), static_cast<std::uint8_t>(d + 1),
          static_cast<std::uint8_t>(std::lround(score / 0.2)), s[static_cast<std::size_t>(a * n_depths + d)].width};
}

double brute_graspness(const std::vector<DenseEntry>& s, double threshold, bool strict) {
  const GripperModel g;
  int count = 0;
  for (const DenseEntry& e : s) {
    if (e.collide || e.mu_code == kInfeasible) continue;
    const double mu = g.friction_grid[e.mu_code];
    if (strict ? mu < threshold : mu <= threshold) ++count;
  }
  return static_cast<double>(count) / static_cast<double>(s.size());
}

SceneDescription isolated(const SyntheticObject& obj) { return make_scene({obj}, {RigidPose::identity()}, 0, 0.0, {0}); }

}  // namespace

TEST(BestPerView, MatchesExhaustiveArgmax) {
  const GripperModel g;
  Rng rng = make_rng(1);
  for (int t = 0; t < 20000; ++t) {
    const int na = 1 + static_cast<int>(uniform_index(rng, 12));
    const int nd = 1 + static_cast<int>(uniform_index(rng, 4));
    const auto s = random_slice(rng, static_cast<std::size_t>(na * nd), uniform(rng, 0.0, 0.6));
    ASSERT_EQ(best_per_view(s, na, nd, g), brute_best(s, na, nd)) << "trial " << t;
  }
}

TEST(BestPerView, Examples) {
  const GripperModel g;
  std::vector<DenseEntry> s(48);
  EXPECT_FALSE(best_per_view(s, 12, 4, g).feasible());
  s[5 * 4 + 1] = {3, 0, 0.04f};
  EXPECT_EQ(best_per_view(s, 12, 4, g), (BestGrasp{6, 2, 2, 0.04f}));
  // equal mu at depths 2 and 3: depth 2 wins even at a larger angle
  s.assign(48, DenseEntry{});
  s[1 * 4 + 2] = {1, 0, 0.03f};
  s[7 * 4 + 1] = {1, 0, 0.05f};
  EXPECT_EQ(best_per_view(s, 12, 4, g), (BestGrasp{8, 2, 4, 0.05f}));
  // colliding entries never win
  s[0] = {0, 1, 0.01f};
  EXPECT_EQ(best_per_view(s, 12, 4, g).depth, 2);
  EXPECT_THROW(best_per_view(s, 12, 3, g), ValidationError);
}

TEST(ViewGraspness, ExamplesAndOracle) {
  const GripperModel g;
  std::vector<DenseEntry> s(48, DenseEntry{0, 0, 0.02f});
  EXPECT_EQ(view_graspness(s, g), 1.0);
  s.assign(48, DenseEntry{});
  EXPECT_EQ(view_graspness(s, g), 0.0);
  for (int i = 0; i < 12; ++i) s[static_cast<std::size_t>(i * 4)] = {2, 0, 0.02f};
  EXPECT_EQ(view_graspness(s, g), 0.25);
  // mu = 0.7 passes, 0.9 does not; 0.7 < 0.8 strict
  s.assign(48, DenseEntry{});
  s[0] = {3, 0, 0.02f};
  s[1] = {4, 0, 0.02f};
  EXPECT_EQ(view_graspness(s, g), 1.0 / 48.0);

  Rng rng = make_rng(2);
  for (int t = 0; t < 20000; ++t) {
    const auto r = random_slice(rng, 48, uniform(rng, 0.0, 1.0));
    const double threshold = std::vector<double>{0.3, 0.5, 0.7, 0.8, 0.9}[uniform_index(rng, 5)];
    const bool strict = uniform01(rng) < 0.5;
    ASSERT_NEAR(view_graspness(r, g, {threshold, strict}), brute_graspness(r, threshold, strict), 1e-9);
  }
}

TEST(ViewGraspness, ThresholdOnGridBoundary) {
  const GripperModel g;
  std::vector<DenseEntry> s(4, DenseEntry{});
  s[0] = {3, 0, 0.01f};  // mu = 0.7
  EXPECT_EQ(view_graspness(s, g, {0.7, true}), 0.0);
  EXPECT_EQ(view_graspness(s, g, {0.7, false}), 0.25);
}

class Assembly : public ::testing::Test {
 protected:
  ViewSphere sphere{12};
  GripperModel gripper;
};

TEST_F(Assembly, IsolatedObjectEqualsObjectCompilation) {
  for (const auto& obj : {make_object(Shape::box, {0.03, 0.04, 0.05}, 8000, 1),
                          make_object(Shape::plate, {0.04, 0.02}, 8000, 2)}) {
    const DenseObjectLabels dense = label_object(obj, sphere, gripper);
    const DenseObjectLabels* refs[] = {&dense};
    const auto scene = assemble_scene(isolated(obj), refs, sphere, gripper);
    EXPECT_EQ(scene, compile_object(obj, dense, gripper));
  }
}

TEST_F(Assembly, MatchesPullLiftingOracle) {
  const auto a = make_object(Shape::box, {0.03, 0.04, 0.05}, 6000, 3);
  const auto b = make_object(Shape::cylinder, {0.02, 0.05}, 6000, 4);
  const RigidPose pa = RigidPose::from_yaw(0.4, Vec3(0.0, 0.0, 0.025));
  const RigidPose pb(Eigen::AngleAxisd(0.9, Vec3(1, 2, 3).normalized()).toRotationMatrix(), Vec3(0.075, 0.01, 0.03));
  const SceneDescription scene = make_scene({a, b}, {pa, pb}, 1, 1.0, {0, 1});
  const DenseObjectLabels da = label_object(a, sphere, gripper), db = label_object(b, sphere, gripper);
  const DenseObjectLabels* refs[] = {&da, &db};
  const EconomicSceneLabels got = assemble_scene(scene, refs, sphere, gripper);
  ASSERT_EQ(got.size(), scene.size());

  std::size_t flipped = 0;
  for (std::size_t i = 0; i < scene.size(); ++i) {
    const int obj = scene.object_ids[i];
    const std::size_t local = obj == 0 ? i : i - a.size();
    const DenseObjectLabels& dense = obj == 0 ? da : db;
    const RigidPose& pose = obj == 0 ? pa : pb;
    double sum = 0.0;
    for (int v = 1; v <= 12; ++v) {
      std::vector<DenseEntry> entries(48);
      for (int an = 1; an <= 12; ++an) {
        const Mat3 scene_rot = compose_rotation(sphere, v, an);
        const ViewAngle src = quantize_rotation(pose.rotation().transpose() * scene_rot, sphere);
        for (int d = 1; d <= 4; ++d) {
          DenseEntry e = dense.at(static_cast<int>(local), src.view - 1, src.angle - 1, d - 1);
          if (e.usable()) {
            GraspPose g;
            g.frame = Frame::scene;
            g.center = scene.points[i];
            g.view = v;
            g.angle = an;
            g.depth = d;
            g.width = e.width;
            if (gripper_collision(g, scene.points, gripper, sphere).colliding) {
              e.collide = 1;
              ++flipped;
            }
          }
          entries[static_cast<std::size_t>((an - 1) * 4 + (d - 1))] = e;
        }
      }
      const double vg = brute_graspness(entries, 0.8, true);
      sum += static_cast<float>(vg);
      ASSERT_EQ(got.view_graspness(i)[static_cast<std::size_t>(v - 1)], static_cast<float>(vg)) << i << " " << v;
      ASSERT_EQ(got.best(i)[static_cast<std::size_t>(v - 1)], brute_best(entries, 12, 4)) << i << " " << v;
      if (!got.best(i)[static_cast<std::size_t>(v - 1)].feasible()) {
        EXPECT_EQ(got.view_graspness(i)[static_cast<std::size_t>(v - 1)], 0.0f);
      }
    }
    EXPECT_NEAR(got.point_graspness(i), sum / 12.0, 1e-7);
    EXPECT_EQ(got.point(i), scene.points[i].cast<float>());
  }
  EXPECT_GT(flipped, 0u);
}

TEST_F(Assembly, OccluderInClosingVolumeFlipsGrasp) {
  const auto plate = make_object(Shape::plate, {0.04, 0.02}, 8000, 5);
  const DenseObjectLabels dense = label_object(plate, sphere, gripper);
  // find a graspable label and the scene grasp it corresponds to
  int p = -1, v = -1, a = -1, d = -1;
  for (int pp = 0; pp < dense.n_points() && p < 0; ++pp) {
    for (int vv = 0; vv < 12 && p < 0; ++vv) {
      for (int aa = 0; aa < 12 && p < 0; ++aa) {
        for (int dd = 0; dd < 4 && p < 0; ++dd) {
          if (dense.at(pp, vv, aa, dd).usable() && dense.at(pp, vv, aa, dd).mu_code <= 3) std::tie(p, v, a, d) = std::tie(pp, vv, aa, dd);
        }
      }
    }
  }
  ASSERT_GE(p, 0);
  const Mat3 rot = compose_rotation(sphere, v + 1, a + 1);
  const Vec3 center = plate.points[static_cast<std::size_t>(p)];
  // a thin bar across the closing region, reaching through both fingers
  SyntheticObject bar;
  bar.shape = Shape::box;
  const double depth = gripper.depth_grid[static_cast<std::size_t>(d)];
  for (int k = -40; k <= 40; ++k) {
    bar.points.push_back(center + rot * Vec3(0.002 * k, 0.0, depth - 0.005));
    bar.normals.push_back(rot.col(2));
  }
  const SceneDescription scene = make_scene({plate, bar}, {RigidPose::identity(), RigidPose::identity()}, 0, 1.0, {0, 1});

  GraspPose g;
  g.frame = Frame::scene;
  g.center = center;
  g.view = v + 1;
  g.angle = a + 1;
  g.depth = d + 1;
  g.width = dense.at(p, v, a, d).width;
  ASSERT_TRUE(gripper_collision(g, scene.points, gripper, sphere).colliding);
  ASSERT_FALSE(gripper_collision(g, plate.points, gripper, sphere).colliding);

  DenseObjectLabels bar_dense(static_cast<int>(bar.points.size()), 12, 12, 4);
  const DenseObjectLabels* refs[] = {&dense, &bar_dense};
  const auto with = assemble_scene(scene, refs, sphere, gripper);
  AssemblyOptions off;
  off.scene_collision = false;
  const auto without = assemble_scene(scene, refs, sphere, gripper, off);
  const auto row = static_cast<std::size_t>(p);
  EXPECT_LT(with.view_graspness(row)[static_cast<std::size_t>(v)], without.view_graspness(row)[static_cast<std::size_t>(v)]);
  const BestGrasp& before = without.best(row)[static_cast<std::size_t>(v)];
  const BestGrasp& after = with.best(row)[static_cast<std::size_t>(v)];
  if (before.angle == a + 1 && before.depth == d + 1) {
    EXPECT_NE(after, before);
  }
}

TEST_F(Assembly, SceneFilteringNeverRaisesGraspness) {
  std::vector<SyntheticObject> lib{make_object(Shape::box, {0.04, 0.05, 0.06}, 5000, 1),
                                   make_object(Shape::cylinder, {0.02, 0.07}, 5000, 2),
                                   make_object(Shape::plate, {0.04, 0.02}, 5000, 3)};
  std::vector<DenseObjectLabels> dense;
  for (const auto& o : lib) dense.push_back(label_object(o, sphere, gripper));
  SceneLayout layout;
  layout.half_extent = 0.08;
  layout.gap = 0.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const SceneDescription s = generate_scene(lib, seed, layout);
    std::vector<const DenseObjectLabels*> refs;
    for (const auto& inst : s.objects) refs.push_back(&dense[static_cast<std::size_t>(inst.library_id)]);
    AssemblyOptions off;
    off.scene_collision = false;
    const auto with = assemble_scene(s, refs, sphere, gripper);
    const auto without = assemble_scene(s, refs, sphere, gripper, off);
    for (std::size_t i = 0; i < s.size(); ++i) {
      EXPECT_LE(with.point_graspness(i), without.point_graspness(i));
      for (int v = 0; v < 12; ++v) {
        EXPECT_LE(with.view_graspness(i)[static_cast<std::size_t>(v)], without.view_graspness(i)[static_cast<std::size_t>(v)]);
      }
    }
    AssemblyOptions four;
    four.jobs = 4;
    EXPECT_EQ(assemble_scene(s, refs, sphere, gripper, four), with);
  }
}

TEST_F(Assembly, RejectsMissingOrMismatchedLabels) {
  const auto obj = make_object(Shape::box, {0.03, 0.04, 0.05}, 5000, 1);
  const DenseObjectLabels* none[] = {nullptr};
  EXPECT_THROW(assemble_scene(isolated(obj), none, sphere, gripper), Error);
  const DenseObjectLabels wrong(3, 12, 12, 4);
  const DenseObjectLabels* refs[] = {&wrong};
  EXPECT_THROW(assemble_scene(isolated(obj), refs, sphere, gripper), ValidationError);
}

TEST(PrunePoints, ContractAgainstBruteForce) {
  const GripperModel g;
  Rng rng = make_rng(3);
  for (int t = 0; t < 300; ++t) {
    EconomicSceneLabels labels(8);
    const int n = static_cast<int>(uniform_index(rng, 20));
    for (int k = 0; k < n; ++k) {
      const std::size_t row = labels.add_point(Eigen::Vector3f(static_cast<float>(k), 0, 0));
      for (BestGrasp& b : labels.best(row)) {
        if (uniform01(rng) < 0.85) continue;
        b = {1, 1, static_cast<std::uint8_t>(uniform_index(rng, 6)), 0.02f};
      }
    }
    const auto kept = prune_points(labels, g);
    std::size_t j = 0;
    for (std::size_t k = 0; k < labels.size(); ++k) {
      bool graspable_view = false;
      for (const BestGrasp& b : labels.best(k)) graspable_view = graspable_view || (b.feasible() && b.score_class >= 2);
      if (!graspable_view) continue;
      ASSERT_LT(j, kept.size());
      EXPECT_EQ(kept.point(j), labels.point(k));  // order preserved
      EXPECT_TRUE(std::equal(kept.best(j).begin(), kept.best(j).end(), labels.best(k).begin()));
      ++j;
    }
    EXPECT_EQ(j, kept.size());
  }
}

TEST(PrunePoints, AllNoneAndMonotoneThreshold) {
  const GripperModel g;
  EconomicSceneLabels all(2), none(2);
  for (int k = 0; k < 5; ++k) {
    all.best(all.add_point(Eigen::Vector3f::Zero()))[0] = {1, 1, 5, 0.01f};
    none.add_point(Eigen::Vector3f::Zero());
  }
  EXPECT_EQ(prune_points(all, g), all);
  EXPECT_EQ(prune_points(none, g).size(), 0u);

  Rng rng = make_rng(4);
  EconomicSceneLabels mixed(4);
  for (int k = 0; k < 200; ++k) {
    const std::size_t row = mixed.add_point(Eigen::Vector3f(static_cast<float>(k), 0, 0));
    for (BestGrasp& b : mixed.best(row)) {
      if (uniform01(rng) < 0.5) b = {1, 1, static_cast<std::uint8_t>(uniform_index(rng, 6)), 0.02f};
    }
  }
  std::size_t previous = 0;
  for (double mu : {0.1, 0.2, 0.3, 0.5, 0.7, 0.8, 0.9, 1.1, 2.0}) {
    const std::size_t n = prune_points(mixed, g, {mu, true}).size();
    EXPECT_GE(n, previous);
    previous = n;
  }
}

TEST(GraspabilityRule, ScoreClassFrictionRoundTrip) {
  const GripperModel g;
  for (std::uint8_t code = 0; code < 6; ++code) {
    EXPECT_EQ(friction_of_score_class(score_class_of_code(code, g), g), g.friction_grid[code]);
  }
  EXPECT_EQ(score_class_of_code(0, g), 5);
  EXPECT_EQ(score_class_of_code(5, g), 0);
}
