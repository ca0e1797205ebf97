#pragma once

// Training-time feeding: sample input points, match each to the nearest
// economic label point within a radius, and mask the rest out of the loss.

#include "econgrasp/core.hpp"
#include "econgrasp/economic_labels.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <tuple>
#include <vector>

namespace econgrasp {

enum class SamplingStrategy { uniform, farthest_point };

/// Indices into `cloud`. Uniform draws without replacement when count fits
/// the cloud and with replacement otherwise; farthest-point starts at index 0.
inline std::vector<std::size_t> sample_indices(std::span<const Vec3> cloud, std::size_t count, std::uint64_t seed,
                                               SamplingStrategy strategy) {
  require(count >= 1, "sample count must be at least 1");
  require(!cloud.empty(), "cannot sample an empty cloud");
  const std::size_t n = cloud.size();
  std::vector<std::size_t> out;
  out.reserve(count);
  if (strategy == SamplingStrategy::uniform) {
    Rng rng = make_rng(seed, 3);
    if (count > n) {
      for (std::size_t i = 0; i < count; ++i) out.push_back(uniform_index(rng, n));
      return out;
    }
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    for (std::size_t i = 0; i < count; ++i) {
      std::swap(perm[i], perm[i + uniform_index(rng, n - i)]);
      out.push_back(perm[i]);
    }
    return out;
  }
  require(count <= n, "farthest-point sampling cannot draw more points than the cloud holds");
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::size_t current = 0;
  for (std::size_t s = 0; s < count; ++s) {
    out.push_back(current);
    std::size_t next = 0;
    double best = -1.0;
    for (std::size_t j = 0; j < n; ++j) {
      dist[j] = std::min(dist[j], (cloud[j] - cloud[current]).squaredNorm());
      if (dist[j] > best) {
        best = dist[j];
        next = j;
      }
    }
    current = next;
  }
  return out;
}

inline std::vector<Vec3> sample_points(std::span<const Vec3> cloud, std::size_t count, std::uint64_t seed,
                                       SamplingStrategy strategy) {
  std::vector<Vec3> out;
  for (std::size_t i : sample_indices(cloud, count, seed, strategy)) out.push_back(cloud[i]);
  return out;
}

inline constexpr std::int64_t kNoMatch = -1;

struct MatchResult {
  std::vector<std::int64_t> index;  // label row or kNoMatch
  std::vector<char> mask;           // 1 = supervised
};

/// Uniform hash grid over label points with cell size equal to the radius.
class LabelGrid {
 public:
  LabelGrid(const EconomicSceneLabels& labels, double cell) : cell_(cell) {
    points_.reserve(labels.size());
    for (std::size_t k = 0; k < labels.size(); ++k) {
      points_.push_back(labels.point(k).cast<double>());
      cells_[key(points_.back())].push_back(k);
    }
  }

  /// Nearest row within radius; ties go to the lower row.
  std::int64_t nearest(const Vec3& q, double radius) const {
    const auto [cx, cy, cz] = key(q);
    const double r2 = radius * radius;
    std::int64_t best = kNoMatch;
    double best_d = std::numeric_limits<double>::infinity();
    for (long dx = -1; dx <= 1; ++dx) {
      for (long dy = -1; dy <= 1; ++dy) {
        for (long dz = -1; dz <= 1; ++dz) {
          const auto it = cells_.find({cx + dx, cy + dy, cz + dz});
          if (it == cells_.end()) continue;
          for (std::size_t k : it->second) {
            const double d = (points_[k] - q).squaredNorm();
            if (d > r2) continue;
            if (d < best_d || (d == best_d && static_cast<std::int64_t>(k) < best)) {
              best_d = d;
              best = static_cast<std::int64_t>(k);
            }
          }
        }
      }
    }
    return best;
  }

 private:
  using Key = std::tuple<long, long, long>;
  Key key(const Vec3& p) const {
    return {static_cast<long>(std::floor(p.x() / cell_)), static_cast<long>(std::floor(p.y() / cell_)),
            static_cast<long>(std::floor(p.z() / cell_))};
  }
  double cell_;
  std::vector<Vec3> points_;
  std::map<Key, std::vector<std::size_t>> cells_;
};

inline MatchResult match(std::span<const Vec3> sampled, const EconomicSceneLabels& labels, double radius) {
  require(radius > 0.0, "match radius must be positive");
  MatchResult out;
  out.index.resize(sampled.size(), kNoMatch);
  out.mask.resize(sampled.size(), 0);
  if (labels.empty()) return out;
  const LabelGrid grid(labels, radius);
  for (std::size_t i = 0; i < sampled.size(); ++i) {
    out.index[i] = grid.nearest(sampled[i], radius);
    out.mask[i] = out.index[i] != kNoMatch ? 1 : 0;
  }
  return out;
}

/// Per sampled input point: its match and, when supervised, the matched
/// label row's view graspness and per-view best grasps.
struct SupervisionBundle {
  std::vector<std::size_t> sampled_indices;  // into the scene cloud
  std::vector<Vec3> sampled_points;
  std::vector<std::int64_t> match_index;
  std::vector<char> mask;
  std::vector<std::vector<float>> view_targets;    // empty for masked rows
  std::vector<std::vector<BestGrasp>> records;     // empty for masked rows
  double radius = 0.0;

  std::size_t size() const { return sampled_points.size(); }
  std::size_t supervised() const {
    std::size_t n = 0;
    for (char m : mask) n += m ? 1 : 0;
    return n;
  }
};

inline SupervisionBundle make_bundle(std::span<const Vec3> cloud, std::span<const std::size_t> sampled_indices,
                                     const EconomicSceneLabels& labels, double radius) {
  SupervisionBundle b;
  b.radius = radius;
  b.sampled_indices.assign(sampled_indices.begin(), sampled_indices.end());
  for (std::size_t i : sampled_indices) {
    require(i < cloud.size(), "sampled index outside the cloud");
    b.sampled_points.push_back(cloud[i]);
  }
  MatchResult m = match(b.sampled_points, labels, radius);
  b.match_index = std::move(m.index);
  b.mask = std::move(m.mask);
  b.view_targets.resize(b.size());
  b.records.resize(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (!b.mask[i]) continue;
    const auto row = static_cast<std::size_t>(b.match_index[i]);
    const auto g = labels.view_graspness(row);
    const auto r = labels.best(row);
    b.view_targets[i].assign(g.begin(), g.end());
    b.records[i].assign(r.begin(), r.end());
  }
  return b;
}

}  // namespace econgrasp
