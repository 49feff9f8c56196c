#include "tam/implicit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tam/rng.hpp"

namespace tam::implicit {

using geometry::PointCloud;
using geometry::Vec3;

void ImplicitConfig::validate() const {
  if (grid_resolution < 2) throw std::invalid_argument("implicit: grid resolution must be >= 2");
  if (band_lo < 0.0 || band_lo >= band_hi)
    throw std::invalid_argument("implicit: band must satisfy 0 <= lo < hi");
  if (triangle_points < 3) throw std::invalid_argument("implicit: need at least 3 triangle points");
  if (n_query < 1) throw std::invalid_argument("implicit: n_query must be positive");
  if (k_part < 1) throw std::invalid_argument("implicit: k_part must be positive");
}

namespace {

Vec3 closest_point_on_segment(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double len_sq = ab.norm_sq();
  if (len_sq < 1e-30) return a;
  const double t = std::clamp((p - a).dot(ab) / len_sq, 0.0, 1.0);
  return a + ab * t;
}

}  // namespace

Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  // Region decomposition over the triangle's barycentric Voronoi regions.
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return a;

  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return b;

  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return c;

  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
    const double denom = d1 - d3;
    if (denom > 1e-30) return a + ab * (d1 / denom);
  }

  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
    const double denom = d2 - d6;
    if (denom > 1e-30) return a + ac * (d2 / denom);
  }

  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    const double denom = (d4 - d3) + (d5 - d6);
    if (denom > 1e-30) return b + (c - b) * ((d4 - d3) / denom);
  }

  const double denom = va + vb + vc;
  if (std::abs(denom) < 1e-30) {
    // degenerate (collinear) triangle: nearest point over the three edges
    Vec3 best = closest_point_on_segment(p, a, b);
    double best_d = (p - best).norm_sq();
    for (const Vec3 q : {closest_point_on_segment(p, b, c), closest_point_on_segment(p, a, c)}) {
      const double d = (p - q).norm_sq();
      if (d < best_d) {
        best_d = d;
        best = q;
      }
    }
    return best;
  }
  const double v = vb / denom, w = vc / denom;
  return a + ab * v + ac * w;
}

std::pair<double, Vec3> approx_dist(const Vec3& c, const PointCloud& cloud, int m_points) {
  if (m_points < 3) throw std::invalid_argument("approx_dist: need at least 3 points");
  if (cloud.count() < static_cast<size_t>(m_points))
    throw std::invalid_argument("approx_dist: cloud smaller than triangle point count");

  const auto near = geometry::knn(cloud, c, m_points);
  const Vec3 p1 = cloud.points[near[0]];
  const Vec3 p2 = cloud.points[near[1]];

  double best = std::numeric_limits<double>::infinity();
  Vec3 best_point = p1;
  for (int m = 2; m < m_points; ++m) {
    const Vec3 q = closest_point_on_triangle(c, p1, p2, cloud.points[near[m]]);
    const double d = (c - q).norm();
    if (d < best) {
      best = d;
      best_point = q;
    }
  }
  return {best, best_point};
}

std::vector<QuerySignal> sample_query_points(const PointCloud& cloud, const ImplicitConfig& cfg,
                                             uint64_t seed) {
  cfg.validate();
  if (cloud.count() < static_cast<size_t>(cfg.triangle_points))
    throw std::invalid_argument("sample_query_points: cloud too small");

  Vec3 lo = cloud.points.front(), hi = cloud.points.front();
  for (const auto& p : cloud.points)
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], p[a]);
      hi[a] = std::max(hi[a], p[a]);
    }

  const int l = cfg.grid_resolution;
  std::vector<QuerySignal> survivors;
  for (int ix = 0; ix < l; ++ix)
    for (int iy = 0; iy < l; ++iy)
      for (int iz = 0; iz < l; ++iz) {
        Vec3 center;
        const int idx[3] = {ix, iy, iz};
        for (int a = 0; a < 3; ++a)
          center[a] = lo[a] + (idx[a] + 0.5) * (hi[a] - lo[a]) / l;

        auto [dist, proj] = approx_dist(center, cloud, cfg.triangle_points);
        if (dist < cfg.band_lo || dist > cfg.band_hi) continue;

        QuerySignal s;
        s.query = center;
        s.projection = proj;
        s.distance = dist;
        const Vec3 delta = proj - center;
        const double l1 = delta.norm_l1();
        s.direction = l1 > 1e-12 ? delta / l1 : Vec3{0.0, 0.0, 0.0};
        survivors.push_back(s);
      }

  if (survivors.empty())
    throw EmptyBandError("sample_query_points: no voxel center falls inside the distance band");

  if (static_cast<int>(survivors.size()) > cfg.n_query) {
    // seeded partial Fisher-Yates, then restore scan order
    Rng rng = Rng::stream(seed, {0x71e5u});
    std::vector<int> order(survivors.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    for (int i = 0; i < cfg.n_query; ++i) {
      const size_t j = i + rng.below(order.size() - i);
      std::swap(order[i], order[j]);
    }
    order.resize(cfg.n_query);
    std::sort(order.begin(), order.end());
    std::vector<QuerySignal> chosen;
    chosen.reserve(cfg.n_query);
    for (int i : order) chosen.push_back(survivors[i]);
    survivors = std::move(chosen);
  }
  return survivors;
}

std::vector<Part> make_parts(const PointCloud& cloud, const std::vector<QuerySignal>& queries,
                             int k_part) {
  if (k_part < 1 || static_cast<size_t>(k_part) > cloud.count())
    throw std::invalid_argument("make_parts: k_part out of range");

  std::vector<Part> parts;
  parts.reserve(queries.size());
  for (size_t qi = 0; qi < queries.size(); ++qi) {
    Part part;
    part.query_index = static_cast<int>(qi);
    part.members = geometry::knn(cloud, queries[qi].query, k_part);
    part.centered.reserve(k_part);
    for (int m : part.members) part.centered.push_back(cloud.points[m] - queries[qi].query);
    parts.push_back(std::move(part));
  }
  return parts;
}

}  // namespace tam::implicit
