#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "tam/geometry.hpp"
#include "tam/rng.hpp"

using namespace tam;
using geometry::PointCloud;
using geometry::Vec3;

namespace {

PointCloud random_cloud(uint64_t seed, int n, double scale = 1.0) {
  Rng rng(seed);
  PointCloud c;
  c.points.reserve(n);
  for (int i = 0; i < n; ++i)
    c.points.push_back({rng.uniform(-scale, scale), rng.uniform(-scale, scale),
                        rng.uniform(-scale, scale)});
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

// reference FPS: same canonical rule, implemented independently (full
// min-distance recomputation each pick instead of the incremental cache)
std::vector<int> fps_reference(const PointCloud& cloud, int n) {
  const int count = static_cast<int>(cloud.count());
  const Vec3 c = cloud.centroid();
  const auto better = [&](double key_a, int a, double key_b, int b) {
    if (key_a != key_b) return key_a > key_b;
    if (!(cloud.points[a] == cloud.points[b])) return cloud.points[a] < cloud.points[b];
    return a < b;
  };
  std::vector<int> picked;
  std::vector<char> used(count, 0);
  int best = 0;
  for (int i = 1; i < count; ++i)
    if (better((cloud.points[i] - c).norm_sq(), i, (cloud.points[best] - c).norm_sq(), best))
      best = i;
  picked.push_back(best);
  used[best] = 1;
  while (static_cast<int>(picked.size()) < n) {
    int arg = -1;
    double arg_key = -1.0;
    for (int i = 0; i < count; ++i) {
      if (used[i]) continue;
      double key = std::numeric_limits<double>::infinity();
      for (int p : picked) key = std::min(key, (cloud.points[i] - cloud.points[p]).norm_sq());
      if (arg < 0 || better(key, i, arg_key, arg)) {
        arg = i;
        arg_key = key;
      }
    }
    picked.push_back(arg);
    used[arg] = 1;
  }
  return picked;
}

}  // namespace

TEST_CASE("normalize_unit centers and scales") {
  PointCloud two{{{-1, 0, 0}, {1, 0, 0}}};
  const auto out = geometry::normalize_unit(two);
  CHECK(out.points[0] == Vec3{-1, 0, 0});
  CHECK(out.points[1] == Vec3{1, 0, 0});

  const auto cloud = random_cloud(3, 100, 5.0);
  const auto norm = geometry::normalize_unit(cloud);
  CHECK(norm.centroid().norm() < 1e-9);
  double max_norm = 0.0;
  for (const auto& p : norm.points) max_norm = std::max(max_norm, p.norm());
  CHECK(max_norm == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("normalize_unit rejects zero spread") {
  PointCloud single{{{5, 5, 5}}};
  CHECK_THROWS_AS(geometry::normalize_unit(single), geometry::DegenerateInputError);
  PointCloud repeated{{{2, 1, 0}, {2, 1, 0}, {2, 1, 0}}};
  CHECK_THROWS_AS(geometry::normalize_unit(repeated), geometry::DegenerateInputError);
}

TEST_CASE("normalize_unit is idempotent") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    const auto once = geometry::normalize_unit(random_cloud(seed, 64));
    const auto twice = geometry::normalize_unit(once);
    for (size_t i = 0; i < once.count(); ++i) {
      CHECK(std::abs(once.points[i].x - twice.points[i].x) < 1e-12);
      CHECK(std::abs(once.points[i].y - twice.points[i].y) < 1e-12);
      CHECK(std::abs(once.points[i].z - twice.points[i].z) < 1e-12);
    }
  }
}

TEST_CASE("fps seed rule and collinear example") {
  PointCloud line{{{0, 0, 0}, {0.4, 0, 0}, {1.0, 0, 0}}};
  const auto one = geometry::farthest_point_sample(line, 1);
  CHECK(one == std::vector<int>{2});  // farthest from centroid x=0.4667
  const auto two = geometry::farthest_point_sample(line, 2);
  CHECK(two == std::vector<int>{2, 0});
}

TEST_CASE("fps full selection is a permutation") {
  const auto cloud = random_cloud(11, 40);
  auto order = geometry::farthest_point_sample(cloud, 40);
  std::set<int> unique(order.begin(), order.end());
  CHECK(unique.size() == 40);
}

TEST_CASE("fps matches the brute-force reference") {
  for (uint64_t seed = 1; seed <= 6; ++seed) {
    const auto cloud = random_cloud(seed, 30);
    CHECK(geometry::farthest_point_sample(cloud, 12) == fps_reference(cloud, 12));
  }
}

TEST_CASE("fps selection is invariant to input permutation") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    const auto cloud = random_cloud(seed + 21, 50);
    PointCloud shuffled = cloud;
    Rng rng(seed);
    rng.shuffle(shuffled.points);

    const auto sel_a = geometry::farthest_point_sample(cloud, 20);
    const auto sel_b = geometry::farthest_point_sample(shuffled, 20);
    std::set<std::array<double, 3>> coords_a, coords_b;
    for (int i : sel_a) coords_a.insert({cloud.points[i].x, cloud.points[i].y, cloud.points[i].z});
    for (int i : sel_b)
      coords_b.insert({shuffled.points[i].x, shuffled.points[i].y, shuffled.points[i].z});
    CHECK(coords_a == coords_b);
  }
}

TEST_CASE("fps rejects bad n") {
  const auto cloud = random_cloud(1, 5);
  CHECK_THROWS_AS(geometry::farthest_point_sample(cloud, 6), std::invalid_argument);
  CHECK_THROWS_AS(geometry::farthest_point_sample(cloud, 0), std::invalid_argument);
}

TEST_CASE("knn basics") {
  PointCloud line{{{0, 0, 0}, {1, 0, 0}, {3, 0, 0}}};
  CHECK(geometry::knn(line, {0, 0, 0}, 2) == std::vector<int>{0, 1});
  CHECK(geometry::knn(line, {1, 0, 0}, 1) == std::vector<int>{1});  // self included
  CHECK(geometry::knn(line, {0.1, 0, 0}, 3) == std::vector<int>{0, 1, 2});
  CHECK_THROWS_AS(geometry::knn(line, {0, 0, 0}, 4), std::invalid_argument);
}

TEST_CASE("knn distances are non-decreasing and ties deterministic") {
  const auto cloud = random_cloud(5, 60);
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const Vec3 q{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const auto idx = geometry::knn(cloud, q, 12);
    for (size_t i = 1; i < idx.size(); ++i)
      CHECK((cloud.points[idx[i - 1]] - q).norm() <= (cloud.points[idx[i]] - q).norm() + 1e-15);
  }
  // exact ties resolve to the lowest index
  PointCloud tied{{{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}}};
  CHECK(geometry::knn(tied, {0, 0, 0}, 3) == std::vector<int>{0, 1, 2});
}

TEST_CASE("half-space crop removes roughly the requested fraction on a sphere") {
  const auto cloud = sphere_cloud(9, 4000);
  Rng rng(10);
  for (int trial = 0; trial < 4; ++trial) {
    Vec3 dir{rng.normal(), rng.normal(), rng.normal()};
    const auto keep = geometry::half_space_crop(cloud, dir, 0.3);
    // independent count: project and compare against the interpolated plane
    const Vec3 u = dir / dir.norm();
    double lo = 1e300, hi = -1e300;
    for (const auto& p : cloud.points) {
      lo = std::min(lo, p.dot(u));
      hi = std::max(hi, p.dot(u));
    }
    const double threshold = hi - 0.3 * (hi - lo);
    size_t expected = 0;
    for (const auto& p : cloud.points)
      if (p.dot(u) <= threshold) ++expected;
    CHECK(keep.size() == expected);
    CHECK(keep.size() > 4000 * 0.7 * 0.9);
    CHECK(keep.size() < 4000 * 0.7 * 1.1);
  }
}

TEST_CASE("generate_domain_pair is deterministic and class-balanced") {
  geometry::SynthConfig cfg;
  cfg.classes = 4;
  cfg.points_per_cloud = 96;
  cfg.train_per_class = 3;
  cfg.test_per_class = 2;
  cfg.seed = 1234;

  const auto a = geometry::generate_domain_pair(cfg);
  const auto b = geometry::generate_domain_pair(cfg);
  REQUIRE(a.source_train.size() == 12);
  REQUIRE(a.target_train.size() == 12);
  REQUIRE(a.source_test.size() == 8);
  for (size_t i = 0; i < a.source_train.size(); ++i)
    for (size_t j = 0; j < a.source_train.samples[i].cloud.count(); ++j)
      CHECK(a.source_train.samples[i].cloud.points[j] == b.source_train.samples[i].cloud.points[j]);
  for (size_t i = 0; i < a.target_train.size(); ++i)
    for (size_t j = 0; j < a.target_train.samples[i].cloud.count(); ++j)
      CHECK(a.target_train.samples[i].cloud.points[j] == b.target_train.samples[i].cloud.points[j]);

  std::vector<int> counts(4, 0);
  for (const auto& s : a.source_train.samples) counts[s.label]++;
  CHECK(counts == std::vector<int>{3, 3, 3, 3});
  for (const auto& s : a.target_train.samples) {
    CHECK(s.label_hidden);
    CHECK(s.domain == geometry::Domain::target);
    CHECK(s.cloud.count() == 96);
  }
}

TEST_CASE("zero corruption leaves the target clean") {
  geometry::SynthConfig cfg;
  cfg.classes = 4;
  cfg.points_per_cloud = 256;
  cfg.train_per_class = 4;
  cfg.test_per_class = 1;
  cfg.crop_fraction = 0.0;
  cfg.jitter_sigma = 0.0;
  cfg.outlier_count = 0;
  cfg.seed = 77;

  const auto pair = geometry::generate_domain_pair(cfg);
  const auto mean_radius = [](const geometry::Dataset& ds) {
    double acc = 0.0;
    size_t n = 0;
    for (const auto& s : ds.samples)
      for (const auto& p : s.cloud.points) {
        acc += p.norm();
        ++n;
      }
    return acc / n;
  };
  // same generator distribution on both sides
  CHECK(mean_radius(pair.source_train) ==
        doctest::Approx(mean_radius(pair.target_train)).epsilon(0.05));
}

TEST_CASE("cloud file round-trip and format errors") {
  const auto dir = std::filesystem::temp_directory_path() / "tam_geom_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "cloud.tamp";

  geometry::SynthConfig cfg;
  cfg.points_per_cloud = 1024;
  cfg.train_per_class = 1;
  cfg.test_per_class = 1;
  cfg.seed = 5;
  const auto pair = geometry::generate_domain_pair(cfg);
  const auto& cloud = pair.source_train.samples[0].cloud;

  geometry::write_cloud(cloud, path);
  CHECK(std::filesystem::file_size(path) == 12 + 1024 * 12);
  const auto back = geometry::read_cloud(path);
  REQUIRE(back.count() == cloud.count());
  for (size_t i = 0; i < cloud.count(); ++i) CHECK(back.points[i] == cloud.points[i]);

  SUBCASE("wrong magic") {
    std::ofstream os(path, std::ios::binary);
    os << "BADM";
    os.close();
    CHECK_THROWS_AS(geometry::read_cloud(path), geometry::FormatError);
  }
  SUBCASE("truncated payload") {
    geometry::write_cloud(cloud, path);
    std::filesystem::resize_file(path, 100);
    CHECK_THROWS_AS(geometry::read_cloud(path), geometry::FormatError);
  }
  SUBCASE("trailing bytes") {
    geometry::write_cloud(cloud, path);
    std::ofstream os(path, std::ios::binary | std::ios::app);
    os << "x";
    os.close();
    CHECK_THROWS_AS(geometry::read_cloud(path), geometry::FormatError);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("dataset labels file round-trip") {
  const auto dir = std::filesystem::temp_directory_path() / "tam_ds_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);

  geometry::SynthConfig cfg;
  cfg.points_per_cloud = 64;
  cfg.train_per_class = 2;
  cfg.test_per_class = 1;
  cfg.seed = 9;
  const auto pair = geometry::generate_domain_pair(cfg);

  geometry::write_dataset(pair.target_train, dir, "target_train");
  const auto back = geometry::read_dataset(dir / "target_train.labels");
  REQUIRE(back.size() == pair.target_train.size());
  CHECK(back.num_classes == 4);
  for (size_t i = 0; i < back.size(); ++i) {
    CHECK(back.samples[i].label == pair.target_train.samples[i].label);
    CHECK(back.samples[i].domain == geometry::Domain::target);
    CHECK(back.samples[i].label_hidden);
    for (size_t j = 0; j < back.samples[i].cloud.count(); ++j)
      CHECK(back.samples[i].cloud.points[j] == pair.target_train.samples[i].cloud.points[j]);
  }
  std::filesystem::remove_all(dir);
}
