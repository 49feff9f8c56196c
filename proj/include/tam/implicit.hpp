#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "tam/geometry.hpp"

namespace tam::implicit {

struct ImplicitConfig {
  int grid_resolution = 12;   // voxel centers per axis (l)
  double band_lo = 0.02;      // D_l
  double band_hi = 0.12;      // D_u
  int triangle_points = 10;   // M nearest points used to build triangles
  int n_query = 16;           // query points retained per cloud
  int k_part = 64;            // part members per query

  void validate() const;
};

/// A query point with its surface-projection supervision targets.
struct QuerySignal {
  geometry::Vec3 query;       // voxel center c
  geometry::Vec3 projection;  // closest surface point t_c
  geometry::Vec3 direction;   // (t_c - c), L1-normalized
  double distance = 0.0;      // Euclidean |t_c - c|
};

/// A local patch: the k points nearest to a query, re-centered on it.
struct Part {
  int query_index = -1;
  std::vector<int> members;
  std::vector<geometry::Vec3> centered;  // members minus query point
};

struct EmptyBandError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Distance from `c` to the surface approximated by triangles over the M
/// nearest cloud points: triangles (p1, p2, pm) for m = 3..M, closest point
/// taken over the closed triangles. Returns (distance, closest point).
std::pair<double, geometry::Vec3> approx_dist(const geometry::Vec3& c,
                                              const geometry::PointCloud& cloud, int m_points);

/// Exact closest point on a closed triangle (vertices a, b, c); degenerate
/// triangles fall back to the nearest point on their edges.
geometry::Vec3 closest_point_on_triangle(const geometry::Vec3& p, const geometry::Vec3& a,
                                         const geometry::Vec3& b, const geometry::Vec3& c);

/// Voxel-center query sampling over the cloud's bounding box, keeping
/// centers whose approximate surface distance lies in [band_lo, band_hi]
/// and subsampling to n_query with the given seed. Throws EmptyBandError
/// when no center survives.
std::vector<QuerySignal> sample_query_points(const geometry::PointCloud& cloud,
                                             const ImplicitConfig& cfg, uint64_t seed);

/// One part per query: the k_part nearest cloud points, centered on the query.
std::vector<Part> make_parts(const geometry::PointCloud& cloud,
                             const std::vector<QuerySignal>& queries, int k_part);

}  // namespace tam::implicit
