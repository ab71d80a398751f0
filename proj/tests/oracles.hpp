#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "cmvs/refinement.hpp"
#include "cmvs/se3.hpp"

namespace cmvs::testing {

// Planar arc of length L bending by theta about z, starting along +x.
inline Vec3 arc_tip(double length, double theta) {
  const double k = theta / length;
  return {std::sin(theta) / k, (1 - std::cos(theta)) / k, 0.0};
}

// Walks the arc swept from tip 2 to tip 1 around the pivot in n steps and
// returns the point at half the polyline length.
inline Vec3 arc_sampling_midpoint(const Vec3& pivot, const Vec3& u1, const Vec3& u2, double d, int n) {
  const Vec3 axis = u2.cross(u1).normalized();
  const double theta = std::acos(std::clamp(u1.dot(u2), -1.0, 1.0));
  std::vector<Vec3> pts;
  pts.reserve(n + 1);
  for (int i = 0; i <= n; ++i) {
    const double a = theta * i / n;
    const Vec3 dir = Eigen::AngleAxisd(a, axis) * u2;
    pts.push_back(pivot + d * dir);
  }
  std::vector<double> cum(pts.size(), 0.0);
  for (std::size_t i = 1; i < pts.size(); ++i) cum[i] = cum[i - 1] + (pts[i] - pts[i - 1]).norm();
  const double half = cum.back() / 2;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    if (cum[i] >= half) {
      const double t = (half - cum[i - 1]) / (cum[i] - cum[i - 1]);
      return pts[i - 1] + t * (pts[i] - pts[i - 1]);
    }
  }
  return pts.back();
}

inline RigidTransform frame_with_x(const Vec3& pos, const Vec3& x, const Vec3& z_hint) {
  Mat3 r;
  const Vec3 y = z_hint.cross(x).normalized();
  r.col(0) = x;
  r.col(1) = y;
  r.col(2) = x.cross(y);
  return {UnitQuaternion::from_matrix(r), pos};
}

// O(N^2) nearest-foreground scan.
inline std::vector<double> brute_force_field(const PartMask& m, double gamma) {
  std::vector<double> out(m.labels.size());
  for (int v = 0; v < m.height; ++v) {
    for (int u = 0; u < m.width; ++u) {
      long best = std::numeric_limits<long>::max();
      for (int y = 0; y < m.height; ++y) {
        for (int x = 0; x < m.width; ++x) {
          if (!m.at(x, y)) continue;
          best = std::min(best, long(x - u) * (x - u) + long(y - v) * (y - v));
        }
      }
      out[static_cast<std::size_t>(v) * m.width + u] = std::sqrt(double(best)) / gamma;
    }
  }
  return out;
}

inline PartMask random_mask(std::mt19937_64& rng, int w, int h, double density) {
  PartMask m(w, h);
  std::bernoulli_distribution fg(density);
  std::uniform_int_distribution<int> cls(1, 3);
  for (auto& l : m.labels) l = fg(rng) ? static_cast<std::uint8_t>(cls(rng)) : 0;
  return m;
}

}  // namespace cmvs::testing
