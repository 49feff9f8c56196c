#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "tam/implicit.hpp"
#include "tam/rng.hpp"

using namespace tam;
using geometry::PointCloud;
using geometry::Vec3;

namespace {

PointCloud plane_cloud(uint64_t seed, int n, double half_extent = 1.0) {
  Rng rng(seed);
  PointCloud c;
  for (int i = 0; i < n; ++i)
    c.points.push_back({rng.uniform(-half_extent, half_extent),
                        rng.uniform(-half_extent, half_extent), 0.0});
  return c;
}

PointCloud sphere_cloud(uint64_t seed, int n) {
  Rng rng(seed);
  PointCloud c;
  for (int i = 0; i < n; ++i) {
    Vec3 v{rng.normal(), rng.normal(), rng.normal()};
    c.points.push_back(v / v.norm());
  }
  return c;
}

}  // namespace

TEST_CASE("closest point on triangle covers all regions") {
  const Vec3 a{0, 0, 0}, b{2, 0, 0}, c{0, 2, 0};
  // interior projection
  auto q = implicit::closest_point_on_triangle({0.5, 0.5, 1.0}, a, b, c);
  CHECK((q - Vec3{0.5, 0.5, 0}).norm() < 1e-12);
  // vertex region
  q = implicit::closest_point_on_triangle({-1, -1, 0}, a, b, c);
  CHECK((q - a).norm() < 1e-12);
  // edge region
  q = implicit::closest_point_on_triangle({1, -1, 0}, a, b, c);
  CHECK((q - Vec3{1, 0, 0}).norm() < 1e-12);
  // degenerate (collinear) triangle falls back to segment distance
  q = implicit::closest_point_on_triangle({1, 1, 0}, {0, 0, 0}, {2, 0, 0}, {1, 0, 0});
  CHECK((q - Vec3{1, 0, 0}).norm() < 1e-12);
}

TEST_CASE("approx_dist is zero at a cloud point") {
  const auto cloud = plane_cloud(1, 64);
  const auto [d, proj] = implicit::approx_dist(cloud.points[5], cloud, 10);
  CHECK(d < 1e-12);
  CHECK((proj - cloud.points[5]).norm() < 1e-12);
}

TEST_CASE("approx_dist matches the analytic plane distance") {
  const auto cloud = plane_cloud(2, 2048);
  const Vec3 query{0, 0, 0.05};
  const auto [d, proj] = implicit::approx_dist(query, cloud, 10);
  CHECK(d == doctest::Approx(0.05).epsilon(0.10));
  CHECK(std::abs(proj.z) < 0.01);
  CHECK((proj - Vec3{0, 0, 0}).norm() < 0.2);
}

TEST_CASE("approx_dist matches the analytic sphere distance") {
  const auto cloud = sphere_cloud(3, 2048);
  Rng rng(4);
  int ok = 0;
  const int trials = 50;
  for (int t = 0; t < trials; ++t) {
    Vec3 dir{rng.normal(), rng.normal(), rng.normal()};
    dir = dir / dir.norm();
    const auto [d, proj] = implicit::approx_dist(dir * 0.9, cloud, 10);
    if (std::abs(d - 0.1) < 0.01) ++ok;
  }
  CHECK(ok >= trials * 0.9);
}

TEST_CASE("query sampling respects the band and the L1 constraint") {
  // two parallel planes give the voxel grid a 3D extent
  auto cloud = plane_cloud(5, 1024);
  auto upper = plane_cloud(6, 1024);
  for (auto& p : upper.points) p.z = 0.6;
  cloud.points.insert(cloud.points.end(), upper.points.begin(), upper.points.end());

  implicit::ImplicitConfig cfg;
  cfg.grid_resolution = 8;
  cfg.band_lo = 0.01;
  cfg.band_hi = 0.1;
  cfg.n_query = 64;
  const auto signals = implicit::sample_query_points(cloud, cfg, 11);
  REQUIRE(!signals.empty());
  for (const auto& s : signals) {
    CHECK(s.distance >= cfg.band_lo);
    CHECK(s.distance <= cfg.band_hi);
    if (s.distance > 1e-9) CHECK(std::abs(s.direction.norm_l1() - 1.0) < 1e-9);
    // retained centers must hug one of the two planes
    CHECK(std::min(std::abs(s.query.z), std::abs(s.query.z - 0.6)) <= cfg.band_hi * 1.2 + 1e-9);
  }
}

TEST_CASE("stepping along the direction lands on the projection point") {
  const auto cloud = sphere_cloud(6, 1024);
  implicit::ImplicitConfig cfg;
  cfg.grid_resolution = 10;
  cfg.n_query = 32;
  const auto signals = implicit::sample_query_points(cloud, cfg, 3);
  for (const auto& s : signals) {
    const double l2 = s.direction.norm();
    if (l2 < 1e-12) continue;
    const Vec3 unit = s.direction / l2;  // rescale the L1-normalized direction
    const Vec3 landed = s.query + unit * s.distance;
    CHECK((landed - s.projection).norm() < 1e-9);
  }
}

TEST_CASE("an all-accepting band keeps every voxel center") {
  const auto cloud = plane_cloud(7, 256);
  implicit::ImplicitConfig cfg;
  cfg.grid_resolution = 4;
  cfg.band_lo = 0.0;
  cfg.band_hi = 1e9;
  cfg.n_query = 1000000;
  const auto signals = implicit::sample_query_points(cloud, cfg, 1);
  CHECK(signals.size() == 64);  // 4^3
}

TEST_CASE("empty band raises") {
  const auto cloud = sphere_cloud(8, 512);
  implicit::ImplicitConfig cfg;
  cfg.grid_resolution = 2;  // centers deep inside the sphere
  cfg.band_lo = 1e-4;
  cfg.band_hi = 2e-4;
  CHECK_THROWS_AS(implicit::sample_query_points(cloud, cfg, 1), implicit::EmptyBandError);
}

TEST_CASE("query sampling is deterministic and subsamples to n_query") {
  const auto cloud = sphere_cloud(9, 1024);
  implicit::ImplicitConfig cfg;
  cfg.grid_resolution = 10;
  cfg.n_query = 8;
  const auto a = implicit::sample_query_points(cloud, cfg, 21);
  const auto b = implicit::sample_query_points(cloud, cfg, 21);
  REQUIRE(a.size() == 8);
  REQUIRE(b.size() == 8);
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].query == b[i].query);
    CHECK(a[i].distance == b[i].distance);
  }
}

TEST_CASE("parts gather the query neighborhoods") {
  const auto cloud = plane_cloud(10, 128);
  implicit::QuerySignal at_point;
  at_point.query = cloud.points[17];

  SUBCASE("k equal to the cloud size includes everything") {
    const auto parts = implicit::make_parts(cloud, {at_point}, 128);
    REQUIRE(parts.size() == 1);
    CHECK(parts[0].members.size() == 128);
  }
  SUBCASE("a query at a cloud point with k=1 centers to zero") {
    const auto parts = implicit::make_parts(cloud, {at_point}, 1);
    CHECK(parts[0].members == std::vector<int>{17});
    CHECK(parts[0].centered[0].norm() < 1e-12);
  }
  SUBCASE("k out of range") {
    CHECK_THROWS_AS(implicit::make_parts(cloud, {at_point}, 129), std::invalid_argument);
  }
}

TEST_CASE("separated queries on a dumbbell give disjoint parts") {
  Rng rng(12);
  PointCloud dumbbell;
  for (int i = 0; i < 200; ++i) {
    Vec3 v{rng.normal(), rng.normal(), rng.normal()};
    v = v / v.norm() * 0.4;
    dumbbell.points.push_back(v + Vec3{i % 2 == 0 ? 2.0 : -2.0, 0, 0});
  }
  implicit::QuerySignal left, right;
  left.query = {-2, 0, 0};
  right.query = {2, 0, 0};
  const auto parts = implicit::make_parts(dumbbell, {left, right}, 40);
  std::set<int> lm(parts[0].members.begin(), parts[0].members.end());
  for (int m : parts[1].members) CHECK(lm.count(m) == 0);
}
