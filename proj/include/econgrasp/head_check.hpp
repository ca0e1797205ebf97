#pragma once

// Finite-difference gradient checks for every head block, and the plate
// micro-dataset used to check that the head can actually learn.

#include "econgrasp/evaluator.hpp"
#include "econgrasp/focal_head.hpp"
#include "econgrasp/matching.hpp"
#include "econgrasp/supervision.hpp"
#include "econgrasp/synth.hpp"

#include <functional>
#include <string>
#include <vector>

namespace econgrasp::head {

inline constexpr double kFdStep = 1e-5;
// Relative error is |a - n| / max(|a|, |n|, floor). The floor keeps components
// that are zero up to rounding from dominating the report.
inline constexpr double kRelErrorFloor = 1e-5;
inline constexpr double kGradTolerance = 1e-4;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kRelErrorFloor});
}

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::string worst;  // parameter block of the worst component
  std::size_t components = 0;
  int seeds = 0;
  bool passed() const { return max_rel_error <= kGradTolerance; }
};

namespace detail {

inline void merge(GradCheckResult& into, double err, const std::string& where) {
  ++into.components;
  if (err > into.max_rel_error) {
    into.max_rel_error = err;
    into.worst = where;
  }
}

/// Central differences over the blocks whose names start with one of `prefixes`.
inline void check_params(GradCheckResult& out, HeadParams& p, const HeadParams& analytic,
                         const std::function<double(const HeadParams&)>& loss,
                         const std::vector<std::string>& prefixes) {
  std::vector<const Mat*> grads;
  analytic.for_each([&](const char*, const Mat& m) { grads.push_back(&m); });
  std::size_t block = 0;
  p.for_each([&](const char* name, Mat& m) {
    const Mat& g = *grads[block++];
    bool selected = false;
    for (const auto& pre : prefixes) selected = selected || std::string(name).rfind(pre, 0) == 0;
    if (!selected) return;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double saved = m.data()[i];
      m.data()[i] = saved + kFdStep;
      const double up = loss(p);
      m.data()[i] = saved - kFdStep;
      const double down = loss(p);
      m.data()[i] = saved;
      merge(out, relative_error(g.data()[i], (up - down) / (2.0 * kFdStep)), name);
    }
  });
}

inline void check_input(GradCheckResult& out, Mat& x, const Mat& analytic, const std::function<double(const Mat&)>& loss,
                        const std::string& name) {
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = x.data()[i];
    x.data()[i] = saved + kFdStep;
    const double up = loss(x);
    x.data()[i] = saved - kFdStep;
    const double down = loss(x);
    x.data()[i] = saved;
    merge(out, relative_error(analytic.data()[i], (up - down) / (2.0 * kFdStep)), name);
  }
}

inline Mat random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  Mat m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = scale * normal01(rng);
  }
  return m;
}

/// Random parameters with non-zero biases so every block is exercised.
inline HeadParams random_params(const HeadConfig& c, std::uint64_t seed) {
  HeadParams p = HeadParams::init(c, seed);
  Rng rng = make_rng(seed, 12);
  p.for_each([&](const char*, Mat& m) {
    if (m.cols() == 1) m = random_matrix(rng, m.rows(), 1, 0.3);
  });
  return p;
}

}  // namespace detail

inline HeadConfig gradcheck_config() {
  HeadConfig c;
  c.feature_dim = 8;
  c.n_views = 12;
  c.group_k = 16;
  return c;
}

inline GradCheckResult check_global_attention(int seeds) {
  GradCheckResult out;
  out.name = "global_attention";
  const HeadConfig c = gradcheck_config();
  for (int s = 0; s < seeds; ++s) {
    HeadParams p = detail::random_params(c, 100 + s);
    Rng rng = make_rng(static_cast<std::uint64_t>(s), 21);
    Mat x = detail::random_matrix(rng, 5 + s % 4, c.feature_dim);
    const Vec w = detail::random_matrix(rng, c.feature_dim, 1).col(0);
    GlobalCache cache;
    global_attention(x, p, &cache);
    HeadParams g = HeadParams::zeros_like(p);
    const Mat dx = global_attention_backward(cache, w, p, g);
    detail::check_params(out, p, g, [&](const HeadParams& q) { return w.dot(global_attention(x, q)); }, {"global_"});
    detail::check_input(out, x, dx, [&](const Mat& y) { return w.dot(global_attention(y, p)); }, "tokens");
    ++out.seeds;
  }
  return out;
}

inline GradCheckResult check_split_heads(int seeds) {
  GradCheckResult out;
  out.name = "split_heads";
  const HeadConfig c = gradcheck_config();
  for (int s = 0; s < seeds; ++s) {
    HeadParams p = detail::random_params(c, 200 + s);
    Rng rng = make_rng(static_cast<std::uint64_t>(s), 22);
    Mat x = detail::random_matrix(rng, c.feature_dim, 1);
    const Mat w = detail::random_matrix(rng, 4, c.feature_dim);
    const Mat u = split_heads(x.col(0), p);
    HeadParams g = HeadParams::zeros_like(p);
    const Vec dx = split_heads_backward(x.col(0), u, w, p, g);
    detail::check_params(out, p, g, [&](const HeadParams& q) { return w.cwiseProduct(split_heads(x.col(0), q)).sum(); },
                         {"split_"});
    detail::check_input(out, x, dx, [&](const Mat& y) { return w.cwiseProduct(split_heads(y.col(0), p)).sum(); },
                        "fused");
    ++out.seeds;
  }
  return out;
}

inline GradCheckResult check_local_attention(int seeds) {
  GradCheckResult out;
  out.name = "local_attention";
  const HeadConfig c = gradcheck_config();
  for (int s = 0; s < seeds; ++s) {
    HeadParams p = detail::random_params(c, 300 + s);
    Rng rng = make_rng(static_cast<std::uint64_t>(s), 23);
    Mat u = detail::random_matrix(rng, 4, c.feature_dim);
    const Mat w = detail::random_matrix(rng, 4, c.feature_dim);
    AttentionCache cache;
    local_attention(u, p, &cache);
    HeadParams g = HeadParams::zeros_like(p);
    const Mat du = local_attention_backward(cache, w, p, g);
    detail::check_params(out, p, g, [&](const HeadParams& q) { return w.cwiseProduct(local_attention(u, q)).sum(); },
                         {"local_"});
    detail::check_input(out, u, du, [&](const Mat& y) { return w.cwiseProduct(local_attention(y, p)).sum(); },
                        "features");
    ++out.seeds;
  }
  return out;
}

inline GradCheckResult check_decode(int seeds) {
  GradCheckResult out;
  out.name = "decode";
  const HeadConfig c = gradcheck_config();
  for (int s = 0; s < seeds; ++s) {
    HeadParams p = detail::random_params(c, 400 + s);
    Rng rng = make_rng(static_cast<std::uint64_t>(s), 24);
    Mat r = detail::random_matrix(rng, 4, c.feature_dim);
    const Vec wa = detail::random_matrix(rng, c.n_angles, 1).col(0);
    const Vec wd = detail::random_matrix(rng, c.n_depths, 1).col(0);
    const double ww = normal01(rng);
    const Vec ws = detail::random_matrix(rng, kScoreClasses, 1).col(0);
    auto loss = [&](const Mat& rr, const HeadParams& q) {
      const Decoded d = decode(rr, q);
      return wa.dot(d.angle_logits) + wd.dot(d.depth_logits) + ww * d.width + ws.dot(d.score_probs);
    };
    const Decoded d = decode(r, p);
    HeadParams g = HeadParams::zeros_like(p);
    const Mat dr = decode_backward(r, wa, wd, ww, softmax_backward(d.score_probs, ws), p, g);
    detail::check_params(out, p, g, [&](const HeadParams& q) { return loss(r, q); },
                         {"angle_", "depth_", "width_", "score_"});
    detail::check_input(out, r, dr, [&](const Mat& y) { return loss(y, p); }, "refined");
    ++out.seeds;
  }
  return out;
}

namespace detail {

/// Bundle of `rows` rows over `n_views` views; every third row masked.
inline SupervisionBundle random_bundle(Rng& rng, std::size_t rows, int n_views, int n_angles, int n_depths) {
  SupervisionBundle b;
  b.radius = 0.005;
  for (std::size_t i = 0; i < rows; ++i) {
    b.sampled_indices.push_back(i);
    b.sampled_points.push_back(Vec3::Zero());
    const bool sup = i % 3 != 2;
    b.mask.push_back(sup ? 1 : 0);
    b.match_index.push_back(sup ? static_cast<std::int64_t>(i) : kNoMatch);
    b.view_targets.emplace_back();
    b.records.emplace_back();
    if (!sup) continue;
    for (int v = 0; v < n_views; ++v) {
      b.view_targets.back().push_back(static_cast<float>(uniform01(rng)));
      BestGrasp rec;
      if (uniform01(rng) < 0.75) {
        rec.angle = static_cast<std::uint8_t>(1 + uniform_index(rng, static_cast<std::size_t>(n_angles)));
        rec.depth = static_cast<std::uint8_t>(1 + uniform_index(rng, static_cast<std::size_t>(n_depths)));
        rec.score_class = static_cast<std::uint8_t>(uniform_index(rng, kScoreClasses));
        rec.width = static_cast<float>(uniform(rng, 0.0, 0.1));
      }
      b.records.back().push_back(rec);
    }
  }
  return b;
}

/// Random prediction with all outputs present. Width spans both smooth-L1 zones.
inline GraspPrediction random_prediction(Rng& rng, const HeadConfig& c) {
  GraspPrediction pr;
  pr.view_scores = random_matrix(rng, c.n_views, 1, 1.5).col(0);
  pr.selected_view = 1 + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(c.n_views)));
  pr.angle_logits = random_matrix(rng, c.n_angles, 1).col(0);
  pr.depth_logits = random_matrix(rng, c.n_depths, 1).col(0);
  pr.score_logits = random_matrix(rng, kScoreClasses, 1).col(0);
  pr.score_probs = softmax(pr.score_logits);
  pr.width = uniform(rng, -2.0, 2.0);
  pr.composite_score = composite_score(pr.score_probs);
  pr.valid = true;
  return pr;
}

}  // namespace detail

/// Loss gradients with respect to the prediction outputs.
inline GradCheckResult check_losses(int seeds) {
  GradCheckResult out;
  out.name = "losses";
  const HeadConfig c = gradcheck_config();
  for (int s = 0; s < seeds; ++s) {
    Rng rng = make_rng(static_cast<std::uint64_t>(s), 25);
    const SupervisionBundle b = detail::random_bundle(rng, 6, c.n_views, c.n_angles, c.n_depths);
    std::vector<GraspPrediction> preds;
    for (std::size_t i = 0; i < b.size(); ++i) preds.push_back(detail::random_prediction(rng, c));
    LossWeights w{1.0, 0.7, 1.3, 2.0, 0.9};
    std::vector<OutputGrads> grads;
    losses(preds, b, w, &grads);
    auto total = [&] { return losses(preds, b, w).total; };
    for (std::size_t i = 0; i < preds.size(); ++i) {
      auto probe = [&](double& x, double analytic, const char* name) {
        const double saved = x;
        x = saved + kFdStep;
        const double up = total();
        x = saved - kFdStep;
        const double down = total();
        x = saved;
        detail::merge(out, relative_error(analytic, (up - down) / (2.0 * kFdStep)), name);
      };
      GraspPrediction& pr = preds[i];
      const OutputGrads& g = grads[i];
      for (Eigen::Index k = 0; k < pr.view_scores.size(); ++k) probe(pr.view_scores(k), g.view_scores(k), "view_scores");
      for (Eigen::Index k = 0; k < pr.angle_logits.size(); ++k) probe(pr.angle_logits(k), g.angle_logits(k), "angle_logits");
      for (Eigen::Index k = 0; k < pr.depth_logits.size(); ++k) probe(pr.depth_logits(k), g.depth_logits(k), "depth_logits");
      for (Eigen::Index k = 0; k < pr.score_logits.size(); ++k) probe(pr.score_logits(k), g.score_logits(k), "score_logits");
      probe(pr.width, g.width, "width");
    }
    ++out.seeds;
  }
  return out;
}

/// 16-point scene: a small plate plus a few stray points, views on a coarse sphere.
struct MicroScene {
  ViewSphere sphere{12};
  HeadConfig config = gradcheck_config();
  TrainingScene scene;
};

inline MicroScene make_gradcheck_scene(std::uint64_t seed) {
  MicroScene m;
  Rng rng = make_rng(seed, 26);
  for (int i = 0; i < 16; ++i) {
    const double side = i % 2 == 0 ? -0.01 : 0.01;
    m.scene.points.emplace_back(side + 0.001 * normal01(rng), uniform(rng, -0.02, 0.02), uniform(rng, -0.02, 0.02));
    Vec3 n(side > 0 ? 1.0 : -1.0, 0.2 * normal01(rng), 0.2 * normal01(rng));
    m.scene.normals.push_back(n.normalized());
  }
  std::vector<std::size_t> idx(16);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  SupervisionBundle b = detail::random_bundle(rng, 16, m.config.n_views, m.config.n_angles, m.config.n_depths);
  b.sampled_indices = idx;
  b.sampled_points = m.scene.points;
  m.scene.bundle = std::move(b);
  return m;
}

/// Total loss of a micro-scene with respect to every head parameter.
inline GradCheckResult check_end_to_end(int seeds) {
  GradCheckResult out;
  out.name = "end_to_end";
  for (int s = 0; s < seeds; ++s) {
    MicroScene m = make_gradcheck_scene(static_cast<std::uint64_t>(s));
    HeadParams p = detail::random_params(m.config, 500 + s);
    const std::vector<TrainingScene> batch{m.scene};
    HeadParams g;
    batch_loss(p, batch, m.sphere, m.config, {}, &g);
    detail::check_params(out, p, g, [&](const HeadParams& q) { return batch_loss(q, batch, m.sphere, m.config).total; },
                         {""});
    ++out.seeds;
  }
  return out;
}

inline std::vector<GradCheckResult> gradient_check_suite(int seeds = 20) {
  require(seeds >= 1, "need at least one seed");
  return {check_global_attention(seeds), check_split_heads(seeds), check_local_attention(seeds), check_decode(seeds),
          check_losses(seeds), check_end_to_end(seeds)};
}

/// Exact permutation invariance of the global block on random regions.
inline bool check_permutation_invariance(int seeds) {
  const HeadConfig c;
  for (int s = 0; s < seeds; ++s) {
    const HeadParams p = detail::random_params(c, 600 + s);
    Rng rng = make_rng(static_cast<std::uint64_t>(s), 27);
    const Mat x = detail::random_matrix(rng, 3 + s % 20, c.feature_dim);
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(x.rows()));
    std::iota(perm.begin(), perm.end(), Eigen::Index{0});
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(rng, i)]);
    Mat y(x.rows(), x.cols());
    for (std::size_t i = 0; i < perm.size(); ++i) y.row(static_cast<Eigen::Index>(i)) = x.row(perm[i]);
    if (global_attention(x, p) != global_attention(y, p)) return false;
  }
  return true;
}

// ---------------------------------------------------------------- plate micro-dataset

struct PlateDatasetOptions {
  int n_views = 60;
  int feature_dim = 32;
  double side = 0.04;
  double gap = 0.02;
  double density = 20000.0;
  std::size_t samples = 32;
  double match_radius = 0.005;
  double placement = 0.10;  // translations in [-p, p]^2
};

struct PlateScene {
  SceneDescription scene;
  TrainingScene training;
};

struct PlateDataset {
  ViewSphere sphere{60};
  GripperModel gripper;
  HeadConfig config;
  std::vector<PlateScene> scenes;

  std::vector<TrainingScene> batch() const {
    std::vector<TrainingScene> out;
    for (const auto& s : scenes) out.push_back(s.training);
    return out;
  }
};

/// One plate per scene, translation only; each scene seed also reseeds the
/// plate's surface sampling.
inline PlateScene make_plate_scene(std::uint64_t seed, const PlateDatasetOptions& o, const ViewSphere& sphere,
                                   const GripperModel& gripper, int jobs) {
  Rng rng = make_rng(seed, 31);
  SyntheticObject plate = make_object(Shape::plate, {o.side, o.gap}, o.density, seed);
  const DenseObjectLabels dense = label_object(plate, sphere, gripper, jobs);
  const Vec3 t(uniform(rng, -o.placement, o.placement), uniform(rng, -o.placement, o.placement), -plate.min_z());
  PlateScene ps;
  ps.scene = make_scene({plate}, {RigidPose(Mat3::Identity(), t)}, seed);
  const DenseObjectLabels* refs[] = {&dense};
  AssemblyOptions opt;
  opt.jobs = jobs;
  const EconomicSceneLabels labels = prune_points(assemble_scene(ps.scene, refs, sphere, gripper, opt), gripper);
  ps.training.points = ps.scene.points;
  ps.training.normals = ps.scene.normals;
  const auto idx = sample_indices(ps.scene.points, std::min(o.samples, ps.scene.size()), seed,
                                  SamplingStrategy::uniform);
  ps.training.bundle = make_bundle(ps.scene.points, idx, labels, o.match_radius);
  return ps;
}

inline PlateDataset make_plate_dataset(std::uint64_t seed, int n_scenes, const PlateDatasetOptions& o = {},
                                       int jobs = 1) {
  PlateDataset d;
  d.sphere = ViewSphere(o.n_views);
  d.config.feature_dim = o.feature_dim;
  d.config.n_views = o.n_views;
  for (int i = 0; i < n_scenes; ++i) {
    d.scenes.push_back(make_plate_scene(seed * 1000 + static_cast<std::uint64_t>(i), o, d.sphere, d.gripper, jobs));
  }
  return d;
}

/// Highest composite score over all points of the scene (lowest index on ties).
inline std::optional<GraspPose> top1_grasp(const HeadParams& p, const SceneDescription& scene, const ViewSphere& sphere,
                                           const HeadConfig& config, const GripperModel& gripper) {
  const PointInput in{scene.points, scene.normals};
  std::optional<GraspPose> best;
  for (std::size_t i = 0; i < scene.size(); ++i) {
    const GraspPrediction pr = head_forward(in, i, p, sphere, config);
    if (!pr.valid) continue;
    if (!best || pr.composite_score > best->score) best = to_grasp(pr, scene.points[i], gripper);
  }
  return best;
}

struct MicroTrainingReport {
  std::vector<double> history;
  double initial = 0.0;
  double final = 0.0;
  double reduction = 0.0;  // 1 - final / initial
  int heldout = 0;
  int heldout_success = 0;
  double heldout_rate = 0.0;
};

inline MicroTrainingReport micro_training(std::uint64_t seed, int steps, double rate, int n_scenes = 8,
                                          int n_heldout = 10, const PlateDatasetOptions& o = {}, int jobs = 1) {
  const PlateDataset d = make_plate_dataset(seed, n_scenes, o, jobs);
  HeadParams p = HeadParams::init(d.config, seed);
  const auto batch = d.batch();
  MicroTrainingReport r;
  r.history = train(p, batch, d.sphere, d.config, steps, rate);
  r.initial = r.history.front();
  r.final = r.history.back();
  r.reduction = r.initial > 0.0 ? 1.0 - r.final / r.initial : 0.0;
  for (int h = 0; h < n_heldout; ++h) {
    const PlateScene ps = make_plate_scene(seed * 1000 + 500 + static_cast<std::uint64_t>(h), o, d.sphere, d.gripper, jobs);
    const auto g = top1_grasp(p, ps.scene, d.sphere, d.config, d.gripper);
    ++r.heldout;
    if (g && grasp_success(*g, ps.scene, 0.8, d.gripper, d.sphere)) ++r.heldout_success;
  }
  r.heldout_rate = r.heldout > 0 ? static_cast<double>(r.heldout_success) / r.heldout : 0.0;
  return r;
}

}  // namespace econgrasp::head
