#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace tam::geometry {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  Vec3& operator+=(const Vec3& o) {
    x += o.x;
    y += o.y;
    z += o.z;
    return *this;
  }

  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  double norm_sq() const { return dot(*this); }
  double norm_l1() const { return std::abs(x) + std::abs(y) + std::abs(z); }

  bool operator==(const Vec3& o) const { return x == o.x && y == o.y && z == o.z; }
  // lexicographic (x, y, z)
  bool operator<(const Vec3& o) const {
    if (x != o.x) return x < o.x;
    if (y != o.y) return y < o.y;
    return z < o.z;
  }
};

/// Ordered sequence of 3D coordinates. Coordinates are held as doubles;
/// serialization narrows to IEEE-754 f32 (see write_cloud).
struct PointCloud {
  std::vector<Vec3> points;

  size_t count() const { return points.size(); }
  bool empty() const { return points.empty(); }
  Vec3 centroid() const;
};

enum class Domain { source, target };

inline const char* domain_tag(Domain d) { return d == Domain::source ? "source" : "target"; }

struct LabeledSample {
  PointCloud cloud;
  int label = -1;        // class index; meaningful even when hidden
  bool label_hidden = false;  // true for target training samples
  Domain domain = Domain::source;
};

struct Dataset {
  std::vector<LabeledSample> samples;
  int num_classes = 0;

  size_t size() const { return samples.size(); }
};

/// Configuration for the synthetic Sim2Real benchmark generator.
struct SynthConfig {
  int classes = 4;             // shape families, 4 or 5
  int points_per_cloud = 1024;
  int train_per_class = 200;
  int test_per_class = 50;
  double crop_fraction = 0.3;  // half-space crop, target domain only
  double jitter_sigma = 0.02;
  int outlier_count = 16;
  uint64_t seed = 1;

  void validate() const;
};

struct DomainPair {
  Dataset source_train, source_test, target_train, target_test;
};

struct DegenerateInputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Centers the cloud at its centroid and scales so the farthest point has
/// unit norm. Throws DegenerateInputError when all points coincide.
PointCloud normalize_unit(const PointCloud& cloud);

/// Greedy farthest point sampling. The first pick is the point farthest
/// from the centroid; every later pick maximizes the minimum distance to
/// the already-chosen set. Ties break on lexicographic coordinates, then
/// lowest index, making the selected coordinate set independent of input
/// order.
std::vector<int> farthest_point_sample(const PointCloud& cloud, int n);

/// Indices of the k nearest points to `query`, ascending by distance,
/// ties by lowest index. A cloud point equal to the query is included.
std::vector<int> knn(const PointCloud& cloud, const Vec3& query, int k);

/// Survivors of a half-space crop: drops points on the far side of a plane
/// orthogonal to `direction`, positioned so that roughly `fraction` of the
/// cloud is removed (exact removal varies with the shape's mass profile).
std::vector<int> half_space_crop(const PointCloud& cloud, const Vec3& direction, double fraction);

/// Builds the synthetic source/target benchmark: clean parametric-surface
/// samples vs the same families after crop + jitter + outliers. Fully
/// deterministic given cfg.seed; per-sample streams are independent.
DomainPair generate_domain_pair(const SynthConfig& cfg);

/// Binary point-cloud file ("TAMP", version 1, f32 little-endian payload).
void write_cloud(const PointCloud& cloud, const std::filesystem::path& path);
PointCloud read_cloud(const std::filesystem::path& path);

/// Labels file: one `<relative cloud path>,<class index>,<domain tag>` line
/// per sample. Cloud files are written next to the labels file.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir, const std::string& split_name);
Dataset read_dataset(const std::filesystem::path& labels_file);

}  // namespace tam::geometry
