#pragma once

// Spread of good grasps within a point: standard deviation of the view,
// angle and depth indices, unconditionally and with one attribute fixed to
// the point's best grasp.

#include "econgrasp/supervision.hpp"
#include "econgrasp/synth.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace econgrasp {

struct GraspTriple {
  int view = 1, angle = 1, depth = 1;  // 1-based
  friend bool operator==(const GraspTriple&, const GraspTriple&) = default;
};

enum class Conditioning { none, view, angle, depth };

inline const char* to_string(Conditioning c) {
  switch (c) {
    case Conditioning::none: return "original";
    case Conditioning::view: return "determine the view";
    case Conditioning::angle: return "determine the angle";
    case Conditioning::depth: return "determine the depth";
  }
  return "?";
}

/// Population standard deviations; the attribute fixed by conditioning is NaN.
struct AttributeStd {
  double view = 0.0, angle = 0.0, depth = 0.0;
};

/// Collision-free entries of one point with friction accepted by the rule,
/// in (view, angle, depth) order.
inline std::vector<GraspTriple> good_grasps(std::span<const DenseEntry> point_slice, int n_views, int n_angles,
                                            int n_depths, const GripperModel& gripper,
                                            const GraspabilityRule& rule = {}) {
  require(point_slice.size() == static_cast<std::size_t>(n_views) * n_angles * n_depths, "point slice has the wrong size");
  std::vector<GraspTriple> out;
  std::size_t i = 0;
  for (int v = 1; v <= n_views; ++v) {
    for (int a = 1; a <= n_angles; ++a) {
      for (int d = 1; d <= n_depths; ++d, ++i) {
        if (graspable(point_slice[i], gripper, rule)) out.push_back({v, a, d});
      }
    }
  }
  return out;
}

namespace detail {

// Welford's running variance.
struct RunningStd {
  double mean = 0.0, m2 = 0.0;
  std::size_t n = 0;
  void add(double x) {
    ++n;
    const double delta = x - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta * (x - mean);
  }
  double value() const { return n == 0 ? 0.0 : std::sqrt(std::max(0.0, m2 / static_cast<double>(n))); }
};

}  // namespace detail

/// Absent for an empty set.
inline std::optional<AttributeStd> attribute_std(std::span<const GraspTriple> set) {
  if (set.empty()) return std::nullopt;
  detail::RunningStd v, a, d;
  for (const GraspTriple& t : set) {
    v.add(t.view);
    a.add(t.angle);
    d.add(t.depth);
  }
  return AttributeStd{v.value(), a.value(), d.value()};
}

/// Restricts the set to triples sharing the anchor's fixed attribute, then
/// takes the spread of the other two.
inline std::optional<AttributeStd> conditional_std(std::span<const GraspTriple> set, Conditioning mode,
                                                   const GraspTriple& anchor) {
  if (mode == Conditioning::none) return attribute_std(set);
  std::vector<GraspTriple> restricted;
  for (const GraspTriple& t : set) {
    const bool same = mode == Conditioning::view ? t.view == anchor.view
                      : mode == Conditioning::angle ? t.angle == anchor.angle
                                                    : t.depth == anchor.depth;
    if (same) restricted.push_back(t);
  }
  auto s = attribute_std(restricted);
  if (!s) return std::nullopt;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  if (mode == Conditioning::view) s->view = nan;
  if (mode == Conditioning::angle) s->angle = nan;
  if (mode == Conditioning::depth) s->depth = nan;
  return s;
}

/// Highest-score usable entry of a point: minimal friction, then lowest view,
/// then smaller depth, then smaller angle.
inline std::optional<GraspTriple> best_grasp_of_point(std::span<const DenseEntry> point_slice, int n_views,
                                                      int n_angles, int n_depths) {
  std::optional<GraspTriple> best;
  std::uint8_t best_code = kInfeasible;
  for (int v = 0; v < n_views; ++v) {
    for (int d = 0; d < n_depths; ++d) {
      for (int a = 0; a < n_angles; ++a) {
        const DenseEntry& e = point_slice[(static_cast<std::size_t>(v) * n_angles + a) * n_depths + d];
        if (e.usable() && e.mu_code < best_code) {
          best_code = e.mu_code;
          best = GraspTriple{v + 1, a + 1, d + 1};
        }
      }
    }
  }
  return best;
}

struct AmbiguityRow {
  Conditioning mode = Conditioning::none;
  std::optional<AttributeStd> stds;  // absent when no point was counted
};

struct AmbiguityReport {
  std::array<AmbiguityRow, 4> rows{};
  std::size_t n_points_counted = 0;
  std::size_t n_points_total = 0;
  double mean_good_per_point = 0.0;  // over counted points
  GraspabilityRule rule{};
};

/// Per-point spreads averaged (unweighted) over points with a non-empty good set.
inline AmbiguityReport ambiguity_report(std::span<const DenseObjectLabels* const> dataset, const GripperModel& gripper,
                                        const GraspabilityRule& rule = {}, int jobs = 1) {
  struct PointResult {
    bool counted = false;
    std::size_t good = 0;
    std::array<AttributeStd, 4> stds{};
  };
  std::vector<std::pair<const DenseObjectLabels*, int>> points;
  for (const DenseObjectLabels* labels : dataset) {
    require(labels != nullptr, "null dense label set");
    for (int p = 0; p < labels->n_points(); ++p) points.emplace_back(labels, p);
  }
  std::vector<PointResult> results(points.size());
  parallel_for(points.size(), jobs, [&](std::size_t i) {
    const auto& [labels, p] = points[i];
    const auto slice = labels->point_slice(p);
    const auto good = good_grasps(slice, labels->n_views(), labels->n_angles(), labels->n_depths(), gripper, rule);
    if (good.empty()) return;
    const auto anchor = best_grasp_of_point(slice, labels->n_views(), labels->n_angles(), labels->n_depths());
    PointResult& r = results[i];
    r.counted = true;
    r.good = good.size();
    constexpr Conditioning modes[4] = {Conditioning::none, Conditioning::view, Conditioning::angle, Conditioning::depth};
    for (std::size_t m = 0; m < 4; ++m) r.stds[m] = *conditional_std(good, modes[m], *anchor);
  });

  AmbiguityReport report;
  report.rule = rule;
  report.n_points_total = points.size();
  std::array<AttributeStd, 4> sums{};
  double good_sum = 0.0;
  for (const PointResult& r : results) {
    if (!r.counted) continue;
    ++report.n_points_counted;
    good_sum += static_cast<double>(r.good);
    for (std::size_t m = 0; m < 4; ++m) {
      sums[m].view += r.stds[m].view;
      sums[m].angle += r.stds[m].angle;
      sums[m].depth += r.stds[m].depth;
    }
  }
  constexpr Conditioning modes[4] = {Conditioning::none, Conditioning::view, Conditioning::angle, Conditioning::depth};
  for (std::size_t m = 0; m < 4; ++m) {
    report.rows[m].mode = modes[m];
    if (report.n_points_counted > 0) {
      const double n = static_cast<double>(report.n_points_counted);
      report.rows[m].stds = AttributeStd{sums[m].view / n, sums[m].angle / n, sums[m].depth / n};
    }
  }
  if (report.n_points_counted > 0) report.mean_good_per_point = good_sum / static_cast<double>(report.n_points_counted);
  return report;
}

/// Dense labels reduced to the economic view of the world: per view only the
/// best grasp stays usable.
inline DenseObjectLabels keep_best_per_view(const DenseObjectLabels& dense, const GripperModel& gripper) {
  DenseObjectLabels out(dense.n_points(), dense.n_views(), dense.n_angles(), dense.n_depths());
  for (int p = 0; p < dense.n_points(); ++p) {
    for (int v = 0; v < dense.n_views(); ++v) {
      const BestGrasp b = best_per_view(dense.view_slice(p, v), dense.n_angles(), dense.n_depths(), gripper);
      if (!b.feasible()) continue;
      out.at(p, v, b.angle - 1, b.depth - 1) = dense.at(p, v, b.angle - 1, b.depth - 1);
    }
  }
  return out;
}

}  // namespace econgrasp
