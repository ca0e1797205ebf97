#include "econgrasp/evaluator.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace econgrasp;

namespace {

double brute_ap(const std::vector<bool>& s, int slots) {
  if (s.empty()) return 0.0;
  double sum = 0.0;
  for (int k = 1; k <= slots; ++k) {
    int hits = 0;
    for (int j = 0; j < k && j < static_cast<int>(s.size()); ++j) hits += s[static_cast<std::size_t>(j)] ? 1 : 0;
    sum += static_cast<double>(hits) / k;
  }
  return sum / slots;
}

struct PlateFixture {
  ViewSphere sphere{60};
  GripperModel gripper;
  SyntheticObject plate = make_object(Shape::plate, {0.04, 0.02}, 20000, 3);
  DenseObjectLabels dense = label_object(plate, sphere, gripper);

  // Every object-frame grasp whose label closes at the lowest friction.
  std::vector<GraspPose> top_grasps() const {
    std::vector<GraspPose> out;
    for (int p = 0; p < dense.n_points(); ++p) {
      for (int v = 0; v < dense.n_views(); ++v) {
        for (int a = 0; a < dense.n_angles(); ++a) {
          for (int d = 0; d < dense.n_depths(); ++d) {
            const DenseEntry& e = dense.at(p, v, a, d);
            if (!e.usable() || e.mu_code != 0) continue;
            GraspPose g;
            g.frame = Frame::scene;
            g.center = plate.points[static_cast<std::size_t>(p)];
            g.view = v + 1;
            g.angle = a + 1;
            g.depth = d + 1;
            g.width = e.width;
            g.score = 1.0;
            out.push_back(g);
          }
        }
      }
    }
    return out;
  }
};

}  // namespace

TEST(ApFromOutcomes, ExamplesAndBruteForce) {
  EXPECT_EQ(ap_from_outcomes({}), 0.0);
  EXPECT_EQ(ap_from_outcomes({}, TopKRule::fixed50), 0.0);
  EXPECT_DOUBLE_EQ(ap_from_outcomes(std::vector<bool>(50, true)), 1.0);
  EXPECT_DOUBLE_EQ(ap_from_outcomes(std::vector<bool>(50, true), TopKRule::fixed50), 1.0);
  EXPECT_EQ(ap_from_outcomes({true}), 1.0);
  double harmonic = 0.0;
  for (int k = 1; k <= 50; ++k) harmonic += 1.0 / k;
  EXPECT_NEAR(ap_from_outcomes({true}, TopKRule::fixed50), harmonic / 50.0, 1e-15);
  EXPECT_NEAR(ap_from_outcomes({true}, TopKRule::fixed50), 0.08998, 1e-5);

  Rng rng = make_rng(1);
  for (int t = 0; t < 5000; ++t) {
    std::vector<bool> s(uniform_index(rng, 80));
    const double p = uniform01(rng);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = uniform01(rng) < p;
    const int n = static_cast<int>(std::min<std::size_t>(s.size(), 50));
    EXPECT_NEAR(ap_from_outcomes(s), brute_ap(s, n), 1e-12);
    EXPECT_NEAR(ap_from_outcomes(s, TopKRule::fixed50), brute_ap(s, 50), 1e-12);
  }
}

TEST(ApFromOutcomes, SuccessOnTopNeverHurts) {
  Rng rng = make_rng(2);
  for (int t = 0; t < 5000; ++t) {
    std::vector<bool> s(uniform_index(rng, 60));
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = uniform01(rng) < 0.5;
    std::vector<bool> better{true};
    better.insert(better.end(), s.begin(), s.end());
    for (TopKRule rule : {TopKRule::available, TopKRule::fixed50}) {
      EXPECT_GE(ap_from_outcomes(better, rule), ap_from_outcomes(s, rule) - 1e-15);
    }
  }
}

TEST(RankGrasps, DescendingAndStable) {
  std::vector<GraspPose> g(5);
  const double scores[] = {0.2, 0.8, 0.2, 1.0, 0.8};
  for (int i = 0; i < 5; ++i) {
    g[static_cast<std::size_t>(i)].score = scores[i];
    g[static_cast<std::size_t>(i)].view = i + 1;
  }
  const auto r = rank_grasps(g);
  std::vector<int> order;
  for (const auto& x : r) order.push_back(x.view);
  EXPECT_EQ(order, (std::vector<int>{4, 2, 5, 1, 3}));
}

TEST(TopKRule, Parsing) {
  EXPECT_EQ(topk_rule_from_string("available"), TopKRule::available);
  EXPECT_EQ(topk_rule_from_string("fixed50"), TopKRule::fixed50);
  EXPECT_THROW(topk_rule_from_string("top50"), ValidationError);
}

TEST(GraspSuccess, PlateGraspsAndCollision) {
  PlateFixture f;
  const auto grasps = f.top_grasps();
  ASSERT_GT(grasps.size(), 50u);
  const SceneDescription alone = make_scene({f.plate}, {RigidPose::identity()}, 0);
  for (std::size_t i = 0; i < grasps.size(); i += grasps.size() / 50) {
    for (double mu : kEvalFrictions) EXPECT_TRUE(grasp_success(grasps[i], alone, mu, f.gripper, f.sphere));
  }

  // a wall of points across the left finger makes the same grasp fail everywhere
  const GraspPose& g = grasps.front();
  const Mat3 rot = compose_rotation(f.sphere, g.view, g.angle);
  SyntheticObject wall;
  wall.shape = Shape::box;
  for (int k = 0; k < 20; ++k) {
    wall.points.push_back(g.center + rot * Vec3(g.width / 2.0 + f.gripper.finger_thickness / 2.0, 0.0,
                                                f.gripper.depth_grid[static_cast<std::size_t>(g.depth - 1)] - 0.002 * (k + 1)));
    wall.normals.push_back(rot.col(0));
  }
  const SceneDescription blocked = make_scene({f.plate, wall}, {RigidPose::identity(), RigidPose::identity()}, 0, 1.0);
  for (double mu : kEvalFrictions) EXPECT_FALSE(grasp_success(g, blocked, mu, f.gripper, f.sphere));
}

TEST(GraspSuccess, MonotoneInFriction) {
  const GripperModel gripper;
  const ViewSphere sphere(60);
  std::vector<SyntheticObject> lib{make_object(Shape::box, {0.04, 0.05, 0.06}, 20000, 1),
                                   make_object(Shape::cylinder, {0.02, 0.07}, 20000, 2)};
  SceneLayout layout;
  layout.half_extent = 0.08;
  layout.min_objects = layout.max_objects = 2;
  const SceneDescription scene = generate_scene(lib, 4, layout);
  Rng rng = make_rng(3);
  int successes = 0;
  for (int t = 0; t < 3000; ++t) {
    GraspPose g;
    g.frame = Frame::scene;
    g.center = scene.points[uniform_index(rng, scene.size())];
    g.view = 1 + static_cast<int>(uniform_index(rng, 60));
    g.angle = 1 + static_cast<int>(uniform_index(rng, 12));
    g.depth = 1 + static_cast<int>(uniform_index(rng, 4));
    g.width = uniform(rng, 0.01, gripper.max_width);
    bool previous = false;
    for (double mu : kEvalFrictions) {
      const bool s = grasp_success(g, scene, mu, gripper, sphere);
      EXPECT_TRUE(s || !previous) << t;
      previous = s;
      successes += s ? 1 : 0;
    }
  }
  EXPECT_GT(successes, 0);
}

TEST(Evaluate, AllAndNothing) {
  PlateFixture f;
  const auto grasps = f.top_grasps();
  const SceneDescription scene = make_scene({f.plate}, {RigidPose::identity()}, 0);
  std::vector<GraspPose> good(grasps.begin(), grasps.begin() + 50);
  const EvalResult all = evaluate({good, good}, {scene, scene}, f.gripper, f.sphere);
  EXPECT_DOUBLE_EQ(all.ap, 1.0);
  EXPECT_EQ(all.failure_count, 0);

  // grasps far from every point find no contacts
  std::vector<GraspPose> bad = good;
  for (auto& g : bad) g.center += Vec3(1.0, 0.0, 0.0);
  const EvalResult none = evaluate({bad, bad, {}}, {scene, scene, scene}, f.gripper, f.sphere);
  EXPECT_EQ(none.ap, 0.0);
  EXPECT_EQ(none.failure_count, 3);
  EXPECT_EQ(none.per_scene_success_at_02, (std::vector<bool>{false, false, false}));
  EXPECT_THROW(evaluate({}, {}, f.gripper, f.sphere), ValidationError);
  EXPECT_THROW(evaluate({good}, {scene, scene}, f.gripper, f.sphere), ValidationError);
}

TEST(Evaluate, MatchesBruteForceAndInvariants) {
  const GripperModel gripper;
  const ViewSphere sphere(60);
  std::vector<SyntheticObject> lib{make_object(Shape::box, {0.04, 0.05, 0.06}, 15000, 1),
                                   make_object(Shape::plate, {0.04, 0.02}, 15000, 2),
                                   make_object(Shape::cylinder, {0.02, 0.07}, 15000, 3)};
  SceneLayout layout;
  layout.half_extent = 0.08;
  layout.min_objects = 2;
  layout.max_objects = 3;
  PlateFixture f;
  const auto plate_grasps = f.top_grasps();
  Rng rng = make_rng(5);
  std::vector<SceneDescription> scenes;
  std::vector<std::vector<GraspPose>> preds;
  for (int s = 0; s < 4; ++s) {
    scenes.push_back(generate_scene(lib, static_cast<std::uint64_t>(s), layout));
    std::vector<GraspPose> list;
    const std::size_t n = 10 + uniform_index(rng, 60);
    for (std::size_t i = 0; i < n; ++i) {
      GraspPose g;
      g.frame = Frame::scene;
      g.center = scenes.back().points[uniform_index(rng, scenes.back().size())];
      g.view = 1 + static_cast<int>(uniform_index(rng, 60));
      g.angle = 1 + static_cast<int>(uniform_index(rng, 12));
      g.depth = 1 + static_cast<int>(uniform_index(rng, 4));
      g.width = uniform(rng, 0.0, gripper.max_width);
      g.score = uniform01(rng);
      list.push_back(g);
    }
    preds.push_back(rank_grasps(list));
  }
  // one scene that is just the plate, with known good grasps mixed in
  scenes.push_back(make_scene({f.plate}, {RigidPose::identity()}, 9));
  preds.push_back(std::vector<GraspPose>(plate_grasps.begin(), plate_grasps.begin() + 7));

  for (TopKRule rule : {TopKRule::available, TopKRule::fixed50}) {
    const EvalResult r = evaluate(preds, scenes, gripper, sphere, rule);
    double mean = 0.0;
    int failures = 0;
    for (std::size_t m = 0; m < kEvalFrictions.size(); ++m) {
      double sum = 0.0;
      for (std::size_t s = 0; s < scenes.size(); ++s) {
        std::vector<bool> outcome;
        for (std::size_t i = 0; i < preds[s].size() && i < 50; ++i) {
          outcome.push_back(grasp_success(preds[s][i], scenes[s], kEvalFrictions[m], gripper, sphere));
        }
        const int slots = rule == TopKRule::available ? static_cast<int>(outcome.size()) : 50;
        sum += brute_ap(outcome, slots);
        EXPECT_NEAR(ap_mu(preds[s], scenes[s], kEvalFrictions[m], gripper, sphere, rule), brute_ap(outcome, slots), 1e-12);
        if (m == 0 && std::find(outcome.begin(), outcome.end(), true) == outcome.end()) ++failures;
      }
      EXPECT_NEAR(r.ap_by_mu.at(kEvalFrictions[m]), sum / static_cast<double>(scenes.size()), 1e-12);
      mean += r.ap_by_mu.at(kEvalFrictions[m]);
      if (m > 0) {
        EXPECT_GE(r.ap_by_mu.at(kEvalFrictions[m]), r.ap_by_mu.at(kEvalFrictions[m - 1]));
      }
    }
    EXPECT_NEAR(r.ap, mean / 5.0, 1e-9);
    EXPECT_EQ(r.failure_count, failures);
    EXPECT_EQ(r.failure_count, std::count(r.per_scene_success_at_02.begin(), r.per_scene_success_at_02.end(), false));
    EXPECT_GE(r.ap, 0.0);
    EXPECT_LE(r.ap, 1.0);
    EXPECT_GT(r.ap_by_mu.at(1.0), 0.0);

    const EvalResult parallel = evaluate(preds, scenes, gripper, sphere, rule, 3);
    EXPECT_EQ(parallel.ap, r.ap);
    EXPECT_EQ(parallel.ap_by_mu, r.ap_by_mu);
  }
}

TEST(Predictions, RoundTripAndErrors) {
  std::vector<GraspPose> g(3);
  for (int i = 0; i < 3; ++i) {
    g[static_cast<std::size_t>(i)].frame = Frame::scene;
    g[static_cast<std::size_t>(i)].center = Vec3(0.125 * i, -0.5, 0.25);
    g[static_cast<std::size_t>(i)].view = 10 + i;
    g[static_cast<std::size_t>(i)].angle = 1 + i;
    g[static_cast<std::size_t>(i)].depth = 4 - i;
    g[static_cast<std::size_t>(i)].width = 0.03125;
    g[static_cast<std::size_t>(i)].score = 0.5 + 0.125 * i;
  }
  std::ostringstream out;
  out << "# header comment\n\n";
  write_predictions(out, 7, g);
  write_predictions(out, 2, {g[0]});
  std::istringstream in(out.str());
  const auto parsed = parse_predictions(in);
  ASSERT_EQ(parsed.size(), 2u);
  ASSERT_EQ(parsed.at(7).size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    const GraspPose& p = parsed.at(7)[i];
    EXPECT_EQ(p.center, g[i].center);
    EXPECT_EQ(p.view, g[i].view);
    EXPECT_EQ(p.angle, g[i].angle);
    EXPECT_EQ(p.depth, g[i].depth);
    EXPECT_EQ(p.width, g[i].width);
    EXPECT_EQ(p.score, g[i].score);
    EXPECT_EQ(p.frame, Frame::scene);
  }
  std::istringstream short_line("1 0 0 0 1 1 1 0.02\n");
  EXPECT_THROW(parse_predictions(short_line), ValidationError);
  std::istringstream long_line("1 0 0 0 1 1 1 0.02 0.5 9\n");
  EXPECT_THROW(parse_predictions(long_line), ValidationError);
  std::istringstream text_line("1 0 0 zero 1 1 1 0.02 0.5\n");
  EXPECT_THROW(parse_predictions(text_line), ValidationError);
}
