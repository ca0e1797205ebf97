#pragma once

// Small numeric grasp head with hand-written backward passes.
//
//   point feature h = lift_w [p; n] + lift_b          (backbone stand-in)
//   view scores     = view_w h + view_b, selected view = argmax
//   region tokens   = h_j + pos_w local_j               (cylinder along the view)
//   global block    = single-head self-attention, output projection, max-pool
//   split           = 4 x tanh(W_k g + b_k)             (angle, depth, width, score)
//   local block     = self-attention over the 4 tokens plus residual
//   decoders        = linear; score probabilities = softmax; composite = grid . p
//
// Token matrices hold one token per row.

#include "econgrasp/economic_labels.hpp"
#include "econgrasp/geometry.hpp"
#include "econgrasp/matching.hpp"

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace econgrasp::head {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

struct HeadConfig {
  int feature_dim = 32;
  int n_views = 300;
  int n_angles = 12;
  int n_depths = 4;
  double group_radius = 0.05;
  double group_depth_lo = -0.01;
  double group_depth_hi = 0.04;
  int group_k = 32;

  void validate() const {
    require(feature_dim >= 1, "feature_dim must be at least 1");
    require(n_views >= 1 && n_angles >= 1 && n_depths >= 1, "head grid sizes must be positive");
    require(group_radius > 0.0, "group radius must be positive");
    require(group_depth_lo < group_depth_hi, "group depth range is empty");
    require(group_k >= 1, "group_k must be at least 1");
  }
};

/// Points and per-point features, one row each.
struct FeatureCloud {
  Mat points;    // M x 3
  Mat features;  // M x F
  std::size_t size() const { return static_cast<std::size_t>(points.rows()); }
};

struct HeadParams {
  Mat lift_w, lift_b;  // F x 6, F x 1
  Mat pos_w;           // F x 3
  Mat view_w, view_b;  // V x F, V x 1
  Mat gq, gk, gv, go, gbq, gbk, gbv, gbo;
  std::array<Mat, 4> split_w, split_b;
  Mat lq, lk, lv, lbq, lbk, lbv;
  Mat angle_w, angle_b, depth_w, depth_b, width_w, width_b, score_w, score_b;

  /// fn(name, matrix) for every parameter block in a fixed order.
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn&& fn) {
    fn("lift_w", self.lift_w);
    fn("lift_b", self.lift_b);
    fn("pos_w", self.pos_w);
    fn("view_w", self.view_w);
    fn("view_b", self.view_b);
    fn("global_q", self.gq);
    fn("global_k", self.gk);
    fn("global_v", self.gv);
    fn("global_o", self.go);
    fn("global_bq", self.gbq);
    fn("global_bk", self.gbk);
    fn("global_bv", self.gbv);
    fn("global_bo", self.gbo);
    static const char* split_names[4][2] = {
        {"split_angle_w", "split_angle_b"}, {"split_depth_w", "split_depth_b"},
        {"split_width_w", "split_width_b"}, {"split_score_w", "split_score_b"}};
    for (std::size_t k = 0; k < 4; ++k) {
      fn(split_names[k][0], self.split_w[k]);
      fn(split_names[k][1], self.split_b[k]);
    }
    fn("local_q", self.lq);
    fn("local_k", self.lk);
    fn("local_v", self.lv);
    fn("local_bq", self.lbq);
    fn("local_bk", self.lbk);
    fn("local_bv", self.lbv);
    fn("angle_w", self.angle_w);
    fn("angle_b", self.angle_b);
    fn("depth_w", self.depth_w);
    fn("depth_b", self.depth_b);
    fn("width_w", self.width_w);
    fn("width_b", self.width_b);
    fn("score_w", self.score_w);
    fn("score_b", self.score_b);
  }
  template <typename Fn>
  void for_each(Fn&& fn) {
    visit(*this, fn);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    visit(*this, fn);
  }

  static HeadParams zeros(const HeadConfig& c) {
    const int f = c.feature_dim;
    HeadParams p;
    p.lift_w = Mat::Zero(f, 6);
    p.lift_b = Mat::Zero(f, 1);
    p.pos_w = Mat::Zero(f, 3);
    p.view_w = Mat::Zero(c.n_views, f);
    p.view_b = Mat::Zero(c.n_views, 1);
    for (Mat* m : {&p.gq, &p.gk, &p.gv, &p.go, &p.lq, &p.lk, &p.lv}) *m = Mat::Zero(f, f);
    for (Mat* m : {&p.gbq, &p.gbk, &p.gbv, &p.gbo, &p.lbq, &p.lbk, &p.lbv}) *m = Mat::Zero(f, 1);
    for (std::size_t k = 0; k < 4; ++k) {
      p.split_w[k] = Mat::Zero(f, f);
      p.split_b[k] = Mat::Zero(f, 1);
    }
    p.angle_w = Mat::Zero(c.n_angles, f);
    p.angle_b = Mat::Zero(c.n_angles, 1);
    p.depth_w = Mat::Zero(c.n_depths, f);
    p.depth_b = Mat::Zero(c.n_depths, 1);
    p.width_w = Mat::Zero(1, f);
    p.width_b = Mat::Zero(1, 1);
    p.score_w = Mat::Zero(kScoreClasses, f);
    p.score_b = Mat::Zero(kScoreClasses, 1);
    return p;
  }

  static HeadParams zeros_like(const HeadParams& other) {
    HeadParams p = other;
    p.for_each([](const char*, Mat& m) { m.setZero(); });
    return p;
  }

  /// Weights ~ N(0, 1/fan_in), biases zero. The lift sees coordinates in
  /// meters, so its position columns are scaled up to unit-ish features.
  /// The width decoder starts at zero.
  static HeadParams init(const HeadConfig& c, std::uint64_t seed) {
    c.validate();
    HeadParams p = zeros(c);
    Rng rng = make_rng(seed, 11);
    p.for_each([&](const char* name, Mat& m) {
      if (m.cols() == 1 && std::string(name) != "width_w") return;  // bias
      const double scale = 1.0 / std::sqrt(static_cast<double>(m.cols()));
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = scale * normal01(rng);
      }
    });
    p.lift_w.leftCols(3) *= 10.0;
    p.pos_w *= 10.0;
    p.width_w.setZero();  // widths are a few centimetres; random weights only add noise
    return p;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const char*, const Mat& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  /// this += alpha * other
  void axpy(double alpha, const HeadParams& other) {
    std::vector<const Mat*> src;
    other.for_each([&](const char*, const Mat& m) { src.push_back(&m); });
    std::size_t i = 0;
    for_each([&](const char*, Mat& m) { m += alpha * *src[i++]; });
  }

  bool all_finite() const {
    bool ok = true;
    for_each([&](const char*, const Mat& m) { ok = ok && m.allFinite(); });
    return ok;
  }
};

// ---------------------------------------------------------------- grouping

struct GroupedPoint {
  std::size_t index = 0;  // row in the source cloud
  Vec3 local;             // grasp frame: x, y radial, z along the view
};

/// Points inside the cylinder around `center` along `view_dir`; at most k,
/// nearest to the axis first (ties by index), reported in source order.
inline std::vector<GroupedPoint> cylinder_group(std::span<const Vec3> points, const Vec3& center, const Vec3& view_dir,
                                                double radius, double depth_lo, double depth_hi, int k) {
  require(k >= 1, "k must be at least 1");
  require(radius > 0.0, "radius must be positive");
  require(depth_lo < depth_hi, "depth range is empty");
  require(std::abs(view_dir.norm() - 1.0) < 1e-6, "view direction must be a unit vector");
  const Mat3 frame = approach_frame(view_dir);
  std::vector<GroupedPoint> in;
  std::vector<double> radial2;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Vec3 local = to_gripper_frame(frame, center, points[i]);
    const double r2 = local.x() * local.x() + local.y() * local.y();
    if (local.z() >= depth_lo && local.z() <= depth_hi && r2 <= radius * radius) {
      in.push_back({i, local});
      radial2.push_back(r2);
    }
  }
  if (in.size() <= static_cast<std::size_t>(k)) return in;
  std::vector<std::size_t> order(in.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return radial2[a] < radial2[b]; });
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());
  std::vector<GroupedPoint> out;
  for (std::size_t o : order) out.push_back(in[o]);
  return out;
}

/// FeatureCloud form: region points in grasp-frame coordinates.
inline FeatureCloud cylinder_group(const FeatureCloud& fc, const Vec3& center, const Vec3& view_dir, double radius,
                                   double depth_lo, double depth_hi, int k) {
  require(fc.points.cols() == 3 && fc.points.rows() == fc.features.rows(), "feature cloud rows disagree");
  std::vector<Vec3> pts(fc.size());
  for (std::size_t i = 0; i < fc.size(); ++i) pts[i] = fc.points.row(static_cast<Eigen::Index>(i)).transpose();
  const auto group = cylinder_group(pts, center, view_dir, radius, depth_lo, depth_hi, k);
  FeatureCloud out;
  out.points.resize(static_cast<Eigen::Index>(group.size()), 3);
  out.features.resize(static_cast<Eigen::Index>(group.size()), fc.features.cols());
  for (std::size_t j = 0; j < group.size(); ++j) {
    out.points.row(static_cast<Eigen::Index>(j)) = group[j].local.transpose();
    out.features.row(static_cast<Eigen::Index>(j)) = fc.features.row(static_cast<Eigen::Index>(group[j].index));
  }
  return out;
}

// ---------------------------------------------------------------- attention

struct AttentionCache {
  Mat x, q, k, v, a, z;
};

inline Mat row_softmax(const Mat& s) {
  Mat a(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double m = s.row(i).maxCoeff();
    RowVec e = (s.row(i).array() - m).exp();
    a.row(i) = e / e.sum();
  }
  return a;
}

inline Vec softmax(const Vec& logits) {
  const double m = logits.maxCoeff();
  Vec e = (logits.array() - m).exp();
  return e / e.sum();
}

/// Z = softmax(Q K^T / sqrt(F)) V with Q = X Wq^T + bq^T etc.
inline AttentionCache attention_forward(const Mat& x, const Mat& wq, const Mat& bq, const Mat& wk, const Mat& bk,
                                        const Mat& wv, const Mat& bv) {
  AttentionCache c;
  c.x = x;
  c.q = (x * wq.transpose()).rowwise() + bq.col(0).transpose();
  c.k = (x * wk.transpose()).rowwise() + bk.col(0).transpose();
  c.v = (x * wv.transpose()).rowwise() + bv.col(0).transpose();
  c.a = row_softmax(c.q * c.k.transpose() / std::sqrt(static_cast<double>(x.cols())));
  c.z = c.a * c.v;
  return c;
}

/// Accumulates parameter gradients, returns dL/dX.
inline Mat attention_backward(const AttentionCache& c, const Mat& dz, const Mat& wq, const Mat& wk, const Mat& wv,
                              Mat& dwq, Mat& dbq, Mat& dwk, Mat& dbk, Mat& dwv, Mat& dbv) {
  const Mat da = dz * c.v.transpose();
  const Mat dv = c.a.transpose() * dz;
  Mat ds = c.a.cwiseProduct(da);
  const Vec rows = ds.rowwise().sum();
  ds = c.a.cwiseProduct(da.colwise() - rows) / std::sqrt(static_cast<double>(c.x.cols()));
  const Mat dq = ds * c.k;
  const Mat dk = ds.transpose() * c.q;
  dwq += dq.transpose() * c.x;
  dwk += dk.transpose() * c.x;
  dwv += dv.transpose() * c.x;
  dbq += dq.colwise().sum().transpose();
  dbk += dk.colwise().sum().transpose();
  dbv += dv.colwise().sum().transpose();
  return dq * wq + dk * wk + dv * wv;
}

struct GlobalCache {
  std::vector<Eigen::Index> order;  // canonical row order of the tokens
  AttentionCache attn;
  Mat o;
  std::vector<Eigen::Index> argmax;  // per channel, canonical row
};

/// Tokens are processed in lexicographic row order so the result does not
/// depend on how the caller ordered them.
inline std::vector<Eigen::Index> canonical_order(const Mat& x) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(x.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (x(a, c) != x(b, c)) return x(a, c) < x(b, c);
    }
    return false;
  });
  return order;
}

inline Vec global_attention(const Mat& tokens, const HeadParams& p, GlobalCache* cache = nullptr) {
  require(tokens.rows() >= 1, "global attention needs a non-empty region");
  require(tokens.cols() == p.gq.cols(), "token width does not match the parameters");
  GlobalCache local;
  GlobalCache& c = cache ? *cache : local;
  c.order = canonical_order(tokens);
  Mat x(tokens.rows(), tokens.cols());
  for (std::size_t j = 0; j < c.order.size(); ++j) x.row(static_cast<Eigen::Index>(j)) = tokens.row(c.order[j]);
  c.attn = attention_forward(x, p.gq, p.gbq, p.gk, p.gbk, p.gv, p.gbv);
  c.o = (c.attn.z * p.go.transpose()).rowwise() + p.gbo.col(0).transpose();
  Vec fused(c.o.cols());
  c.argmax.assign(static_cast<std::size_t>(c.o.cols()), 0);
  for (Eigen::Index ch = 0; ch < c.o.cols(); ++ch) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < c.o.rows(); ++j) {
      if (c.o(j, ch) > c.o(best, ch)) best = j;
    }
    c.argmax[static_cast<std::size_t>(ch)] = best;
    fused(ch) = c.o(best, ch);
  }
  return fused;
}

/// Returns dL/dtokens in the caller's row order.
inline Mat global_attention_backward(const GlobalCache& c, const Vec& dfused, const HeadParams& p, HeadParams& g) {
  Mat d_o = Mat::Zero(c.o.rows(), c.o.cols());
  for (Eigen::Index ch = 0; ch < c.o.cols(); ++ch) d_o(c.argmax[static_cast<std::size_t>(ch)], ch) = dfused(ch);
  g.go += d_o.transpose() * c.attn.z;
  g.gbo += d_o.colwise().sum().transpose();
  const Mat dz = d_o * p.go;
  const Mat dx = attention_backward(c.attn, dz, p.gq, p.gk, p.gv, g.gq, g.gbq, g.gk, g.gbk, g.gv, g.gbv);
  Mat out(dx.rows(), dx.cols());
  for (std::size_t j = 0; j < c.order.size(); ++j) out.row(c.order[j]) = dx.row(static_cast<Eigen::Index>(j));
  return out;
}

// ---------------------------------------------------------------- split + local

/// Rows: angle, depth, width, score features.
inline Mat split_heads(const Vec& fused, const HeadParams& p) {
  Mat u(4, fused.size());
  for (std::size_t k = 0; k < 4; ++k) {
    u.row(static_cast<Eigen::Index>(k)) = (p.split_w[k] * fused + p.split_b[k].col(0)).array().tanh().matrix().transpose();
  }
  return u;
}

inline Vec split_heads_backward(const Vec& fused, const Mat& u, const Mat& du, const HeadParams& p, HeadParams& g) {
  Vec dfused = Vec::Zero(fused.size());
  for (std::size_t k = 0; k < 4; ++k) {
    const auto r = static_cast<Eigen::Index>(k);
    const Vec dpre = (du.row(r).array() * (1.0 - u.row(r).array().square())).matrix().transpose();
    g.split_w[k] += dpre * fused.transpose();
    g.split_b[k] += dpre;
    dfused += p.split_w[k].transpose() * dpre;
  }
  return dfused;
}

inline Mat local_attention(const Mat& u, const HeadParams& p, AttentionCache* cache = nullptr) {
  require(u.rows() == 4, "local attention runs over exactly four tokens");
  AttentionCache local;
  AttentionCache& c = cache ? *cache : local;
  c = attention_forward(u, p.lq, p.lbq, p.lk, p.lbk, p.lv, p.lbv);
  return u + c.z;
}

inline Mat local_attention_backward(const AttentionCache& c, const Mat& dr, const HeadParams& p, HeadParams& g) {
  return dr + attention_backward(c, dr, p.lq, p.lk, p.lv, g.lq, g.lbq, g.lk, g.lbk, g.lv, g.lbv);
}

// ---------------------------------------------------------------- decoders

struct Decoded {
  Vec angle_logits, depth_logits, score_logits, score_probs;
  double width = 0.0;
};

inline Decoded decode(const Mat& r, const HeadParams& p) {
  Decoded d;
  d.angle_logits = p.angle_w * r.row(0).transpose() + p.angle_b.col(0);
  d.depth_logits = p.depth_w * r.row(1).transpose() + p.depth_b.col(0);
  d.width = (p.width_w * r.row(2).transpose())(0) + p.width_b(0, 0);
  d.score_logits = p.score_w * r.row(3).transpose() + p.score_b.col(0);
  d.score_probs = softmax(d.score_logits);
  return d;
}

/// Gradients arrive on the logits (angle, depth, score) and on the width.
inline Mat decode_backward(const Mat& r, const Vec& dangle, const Vec& ddepth, double dwidth, const Vec& dscore,
                           const HeadParams& p, HeadParams& g) {
  Mat dr(4, r.cols());
  g.angle_w += dangle * r.row(0);
  g.angle_b += dangle;
  dr.row(0) = (p.angle_w.transpose() * dangle).transpose();
  g.depth_w += ddepth * r.row(1);
  g.depth_b += ddepth;
  dr.row(1) = (p.depth_w.transpose() * ddepth).transpose();
  g.width_w += dwidth * r.row(2);
  g.width_b(0, 0) += dwidth;
  dr.row(2) = dwidth * p.width_w;
  g.score_w += dscore * r.row(3);
  g.score_b += dscore;
  dr.row(3) = (p.score_w.transpose() * dscore).transpose();
  return dr;
}

/// Gradient of L through probs = softmax(logits), given dL/dprobs.
inline Vec softmax_backward(const Vec& probs, const Vec& dprobs) {
  return probs.cwiseProduct((dprobs.array() - probs.dot(dprobs)).matrix());
}

inline double composite_score(std::span<const double> probs) {
  require(probs.size() == static_cast<std::size_t>(kScoreClasses), "composite score needs six probabilities");
  double sum = 0.0, s = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    require(std::isfinite(probs[i]) && probs[i] >= 0.0, "score probabilities must be non-negative");
    sum += probs[i];
    s += kScoreGrid[i] * probs[i];
  }
  require(std::abs(sum - 1.0) <= 1e-6, "score probabilities must sum to 1");
  return s;
}

inline double composite_score(const Vec& probs) { return composite_score(std::span<const double>(probs.data(), static_cast<std::size_t>(probs.size()))); }

// ---------------------------------------------------------------- full head

struct GraspPrediction {
  Vec view_scores;
  int selected_view = 1;  // 1-based
  Vec angle_logits, depth_logits, score_logits, score_probs;
  double width = 0.0;
  double composite_score = 0.0;
  bool valid = false;  // false when the grouping region was empty

  int angle() const { return static_cast<int>(argmax(angle_logits)) + 1; }
  int depth() const { return static_cast<int>(argmax(depth_logits)) + 1; }

  static Eigen::Index argmax(const Vec& v) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i) {
      if (v(i) > v(best)) best = i;
    }
    return best;
  }
};

inline Vec3 centroid(std::span<const Vec3> points) {
  Vec3 c = Vec3::Zero();
  for (const Vec3& p : points) c += p;
  return points.empty() ? c : Vec3(c / static_cast<double>(points.size()));
}

/// A scene cloud with normals, the raw input of the backbone stand-in.
/// Coordinates enter the lift relative to `origin` (normally the centroid).
struct PointInput {
  std::span<const Vec3> points;
  std::span<const Vec3> normals;
  Vec3 origin = Vec3::Zero();

  PointInput(std::span<const Vec3> pts, std::span<const Vec3> nrm) : points(pts), normals(nrm), origin(centroid(pts)) {}
  PointInput(std::span<const Vec3> pts, std::span<const Vec3> nrm, const Vec3& o) : points(pts), normals(nrm), origin(o) {}
};

inline Vec lift_input(const PointInput& in, std::size_t i) {
  Vec x(6);
  x << in.points[i] - in.origin, in.normals[i];
  return x;
}

inline Vec point_feature(const PointInput& in, std::size_t i, const HeadParams& p) {
  return p.lift_w * lift_input(in, i) + p.lift_b.col(0);
}

/// Feature cloud produced by the backbone stand-in for every input point.
inline FeatureCloud lift_features(const PointInput& in, const HeadParams& p) {
  FeatureCloud fc;
  fc.points.resize(static_cast<Eigen::Index>(in.points.size()), 3);
  fc.features.resize(static_cast<Eigen::Index>(in.points.size()), p.lift_w.rows());
  for (std::size_t i = 0; i < in.points.size(); ++i) {
    fc.points.row(static_cast<Eigen::Index>(i)) = in.points[i].transpose();
    fc.features.row(static_cast<Eigen::Index>(i)) = point_feature(in, i, p).transpose();
  }
  return fc;
}

struct ForwardCache {
  std::size_t point = 0;
  Vec h;                                // center feature
  std::vector<GroupedPoint> region;
  Mat tokens;
  GlobalCache global;
  Vec fused;
  Mat u;
  AttentionCache local;
  Mat r;
};

inline int argmax_view(const Vec& scores) { return static_cast<int>(GraspPrediction::argmax(scores)) + 1; }

/// `forced_view` (1-based) replaces the argmax; used for teacher forcing.
inline GraspPrediction head_forward(const PointInput& in, std::size_t point, const HeadParams& p,
                                    const ViewSphere& sphere, const HeadConfig& config,
                                    std::optional<int> forced_view = std::nullopt, ForwardCache* cache = nullptr) {
  require(in.points.size() == in.normals.size(), "points and normals disagree");
  require(point < in.points.size(), "point index outside the cloud");
  require(sphere.size() == p.view_w.rows(), "view decoder does not match the view sphere");
  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  c.point = point;
  c.h = point_feature(in, point, p);
  GraspPrediction out;
  out.view_scores = p.view_w * c.h + p.view_b.col(0);
  out.selected_view = forced_view ? *forced_view : argmax_view(out.view_scores);
  require(out.selected_view >= 1 && out.selected_view <= sphere.size(), "selected view out of range");

  // the cylinder runs along the approach, i.e. into the surface
  c.region = cylinder_group(in.points, in.points[point], -sphere.direction(out.selected_view), config.group_radius,
                            config.group_depth_lo, config.group_depth_hi, config.group_k);
  if (c.region.empty()) return out;
  c.tokens.resize(static_cast<Eigen::Index>(c.region.size()), p.lift_w.rows());
  for (std::size_t j = 0; j < c.region.size(); ++j) {
    const Vec t = point_feature(in, c.region[j].index, p) + p.pos_w * c.region[j].local;
    c.tokens.row(static_cast<Eigen::Index>(j)) = t.transpose();
  }
  c.fused = global_attention(c.tokens, p, &c.global);
  c.u = split_heads(c.fused, p);
  c.r = local_attention(c.u, p, &c.local);
  Decoded d = decode(c.r, p);
  out.angle_logits = std::move(d.angle_logits);
  out.depth_logits = std::move(d.depth_logits);
  out.score_logits = std::move(d.score_logits);
  out.score_probs = std::move(d.score_probs);
  out.width = d.width;
  out.composite_score = composite_score(out.score_probs);
  out.valid = true;
  return out;
}

/// Gradients of a scalar loss with respect to the prediction outputs.
struct OutputGrads {
  Vec view_scores, angle_logits, depth_logits, score_logits;
  double width = 0.0;
  bool head = false;  // false: only the view decoder receives gradient
};

inline void head_backward(const PointInput& in, const ForwardCache& c, const OutputGrads& d, const HeadParams& p,
                          HeadParams& g) {
  Vec dh = p.view_w.transpose() * d.view_scores;
  g.view_w += d.view_scores * c.h.transpose();
  g.view_b += d.view_scores;
  if (d.head && !c.region.empty()) {
    const Mat dr = decode_backward(c.r, d.angle_logits, d.depth_logits, d.width, d.score_logits, p, g);
    const Mat du = local_attention_backward(c.local, dr, p, g);
    const Vec dfused = split_heads_backward(c.fused, c.u, du, p, g);
    const Mat dtokens = global_attention_backward(c.global, dfused, p, g);
    for (std::size_t j = 0; j < c.region.size(); ++j) {
      const Vec dt = dtokens.row(static_cast<Eigen::Index>(j)).transpose();
      g.pos_w += dt * c.region[j].local.transpose();
      g.lift_w += dt * lift_input(in, c.region[j].index).transpose();
      g.lift_b += dt;
    }
  }
  g.lift_w += dh * lift_input(in, c.point).transpose();
  g.lift_b += dh;
}

// ---------------------------------------------------------------- losses

struct LossWeights {
  double view = 1.0, angle = 1.0, depth = 1.0, width = 1.0, score = 1.0;
};

struct LossValues {
  double view = 0.0, angle = 0.0, depth = 0.0, width = 0.0, score = 0.0, total = 0.0;
  std::size_t supervised = 0;
};

inline double smooth_l1(double x) { return std::abs(x) < 1.0 ? 0.5 * x * x : std::abs(x) - 0.5; }
inline double smooth_l1_grad(double x) { return std::abs(x) < 1.0 ? x : (x > 0.0 ? 1.0 : -1.0); }

/// -log softmax(logits)[target] and its gradient.
inline double cross_entropy(const Vec& logits, int target, Vec* grad) {
  const Vec p = softmax(logits);
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  if (grad) {
    *grad = p;
    (*grad)(target) -= 1.0;
  }
  return lse - logits(target);
}

/// View used as the teacher during training: highest target graspness,
/// lowest index on ties (1-based).
inline int teacher_view(std::span<const float> targets) {
  int best = 0;
  for (std::size_t v = 1; v < targets.size(); ++v) {
    if (targets[v] > targets[static_cast<std::size_t>(best)]) best = static_cast<int>(v);
  }
  return best + 1;
}

/// Batch losses. Row i of `predictions` belongs to row i of the bundle; masked
/// rows are never read and get no gradient. Every term is normalised by the
/// number of supervised rows; the view term also by the view count.
inline LossValues losses(std::span<const GraspPrediction> predictions, const SupervisionBundle& bundle,
                         const LossWeights& w = {}, std::vector<OutputGrads>* grads = nullptr) {
  if (predictions.size() != bundle.size()) throw ValidationError("predictions and bundle are not batch-aligned");
  LossValues out;
  out.supervised = bundle.supervised();
  if (grads) {
    grads->assign(predictions.size(), OutputGrads{});
    for (std::size_t i = 0; i < predictions.size(); ++i) {
      OutputGrads& g = (*grads)[i];
      const GraspPrediction& pr = predictions[i];
      g.view_scores = Vec::Zero(pr.view_scores.size());
      g.angle_logits = Vec::Zero(pr.angle_logits.size());
      g.depth_logits = Vec::Zero(pr.depth_logits.size());
      g.score_logits = Vec::Zero(pr.score_logits.size());
    }
  }
  if (out.supervised == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(out.supervised);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (!bundle.mask[i]) continue;
    const GraspPrediction& pr = predictions[i];
    const auto& target = bundle.view_targets[i];
    require(static_cast<std::size_t>(pr.view_scores.size()) == target.size(), "view score length mismatch");
    OutputGrads* g = grads ? &(*grads)[i] : nullptr;
    for (std::size_t v = 0; v < target.size(); ++v) {
      const double diff = pr.view_scores(static_cast<Eigen::Index>(v)) - static_cast<double>(target[v]);
      out.view += smooth_l1(diff) * inv_n;
      if (g) g->view_scores(static_cast<Eigen::Index>(v)) = w.view * smooth_l1_grad(diff) * inv_n;
    }
    if (!pr.valid) continue;
    const BestGrasp& rec = bundle.records[i][static_cast<std::size_t>(pr.selected_view - 1)];
    if (g) g->head = true;
    Vec grad;
    if (rec.feasible()) {
      out.angle += cross_entropy(pr.angle_logits, rec.angle - 1, g ? &grad : nullptr) * inv_n;
      if (g) g->angle_logits = w.angle * inv_n * grad;
      out.depth += cross_entropy(pr.depth_logits, rec.depth - 1, g ? &grad : nullptr) * inv_n;
      if (g) g->depth_logits = w.depth * inv_n * grad;
      const double diff = pr.width - static_cast<double>(rec.width);
      out.width += smooth_l1(diff) * inv_n;
      if (g) g->width = w.width * inv_n * smooth_l1_grad(diff);
    }
    const int cls = rec.feasible() ? rec.score_class : 0;
    out.score += cross_entropy(pr.score_logits, cls, g ? &grad : nullptr) * inv_n;
    if (g) g->score_logits = w.score * inv_n * grad;
  }
  out.total = w.view * out.view + w.angle * out.angle + w.depth * out.depth + w.width * out.width + w.score * out.score;
  return out;
}

// ---------------------------------------------------------------- training

/// One scene worth of training input: cloud plus the matched supervision.
struct TrainingScene {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;
  SupervisionBundle bundle;
};

/// Total loss over a batch of scenes (scene losses are averaged). The head
/// parts are supervised at the predicted view, as at inference. Gradients are
/// summed in scene then row order.
inline LossValues batch_loss(const HeadParams& p, std::span<const TrainingScene> batch, const ViewSphere& sphere,
                             const HeadConfig& config, const LossWeights& w = {}, HeadParams* grad = nullptr) {
  require(!batch.empty(), "empty training batch");
  LossValues sum;
  if (grad) *grad = HeadParams::zeros_like(p);
  const double inv_s = 1.0 / static_cast<double>(batch.size());
  for (const TrainingScene& scene : batch) {
    const PointInput in{scene.points, scene.normals};
    const SupervisionBundle& b = scene.bundle;
    std::vector<GraspPrediction> preds(b.size());
    std::vector<ForwardCache> caches(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) {
      if (!b.mask[i]) continue;
      preds[i] = head_forward(in, b.sampled_indices[i], p, sphere, config, std::nullopt, &caches[i]);
    }
    std::vector<OutputGrads> og;
    const LossValues l = losses(preds, b, w, grad ? &og : nullptr);
    sum.view += l.view * inv_s;
    sum.angle += l.angle * inv_s;
    sum.depth += l.depth * inv_s;
    sum.width += l.width * inv_s;
    sum.score += l.score * inv_s;
    sum.total += l.total * inv_s;
    sum.supervised += l.supervised;
    if (!grad) continue;
    for (std::size_t i = 0; i < b.size(); ++i) {
      if (!b.mask[i]) continue;
      OutputGrads& d = og[i];
      d.view_scores *= inv_s;
      d.angle_logits *= inv_s;
      d.depth_logits *= inv_s;
      d.score_logits *= inv_s;
      d.width *= inv_s;
      head_backward(in, caches[i], d, p, *grad);
    }
  }
  return sum;
}

/// Plain gradient descent; returns the loss before every step and after the last.
inline std::vector<double> train(HeadParams& p, std::span<const TrainingScene> batch, const ViewSphere& sphere,
                                 const HeadConfig& config, int steps, double rate, const LossWeights& w = {}) {
  require(steps >= 0, "steps must be non-negative");
  require(rate > 0.0, "learning rate must be positive");
  std::vector<double> history;
  HeadParams grad;
  for (int s = 0; s < steps; ++s) {
    history.push_back(batch_loss(p, batch, sphere, config, w, &grad).total);
    p.axpy(-rate, grad);
  }
  history.push_back(batch_loss(p, batch, sphere, config, w).total);
  return history;
}

/// Scene-frame grasp from a valid prediction at an input point. The regressed
/// width is opened by `width_scale` before clamping to the gripper.
inline GraspPose to_grasp(const GraspPrediction& pr, const Vec3& center, const GripperModel& gripper,
                          double width_scale = 1.2) {
  require(pr.valid, "prediction is invalid");
  GraspPose g;
  g.frame = Frame::scene;
  g.center = center;
  g.view = pr.selected_view;
  g.angle = pr.angle();
  g.depth = pr.depth();
  g.width = std::clamp(width_scale * pr.width, 0.0, gripper.max_width);
  g.score = pr.composite_score;
  return g;
}

}  // namespace econgrasp::head
