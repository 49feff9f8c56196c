#include "tam/geometry.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "tam/rng.hpp"

namespace tam::geometry {

Vec3 PointCloud::centroid() const {
  Vec3 c;
  for (const auto& p : points) c += p;
  return c / static_cast<double>(points.size());
}

void SynthConfig::validate() const {
  if (classes < 4 || classes > 5) throw std::invalid_argument("classes must be 4 or 5");
  if (points_per_cloud < 1) throw std::invalid_argument("points_per_cloud must be positive");
  if (train_per_class < 1 || test_per_class < 1)
    throw std::invalid_argument("samples per class must be positive");
  if (crop_fraction < 0.0 || crop_fraction > 0.5)
    throw std::invalid_argument("crop_fraction must lie in [0, 0.5]");
  if (jitter_sigma < 0.0) throw std::invalid_argument("jitter_sigma must be non-negative");
  if (outlier_count < 0) throw std::invalid_argument("outlier_count must be non-negative");
  if (outlier_count >= points_per_cloud)
    throw std::invalid_argument("outlier_count must be smaller than points_per_cloud");
}

PointCloud normalize_unit(const PointCloud& cloud) {
  if (cloud.empty()) throw std::invalid_argument("normalize_unit: empty cloud");
  for (const auto& p : cloud.points)
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z))
      throw std::invalid_argument("normalize_unit: non-finite coordinate");

  const Vec3 c = cloud.centroid();
  double max_norm = 0.0;
  for (const auto& p : cloud.points) max_norm = std::max(max_norm, (p - c).norm());
  if (max_norm < 1e-12)
    throw DegenerateInputError("normalize_unit: all points coincide (zero spread)");

  PointCloud out;
  out.points.reserve(cloud.count());
  for (const auto& p : cloud.points) out.points.push_back((p - c) / max_norm);
  return out;
}

namespace {

// Prefers larger key; ties prefer lexicographically smaller coordinates,
// then lower index.
struct FarthestPick {
  double key = -std::numeric_limits<double>::infinity();
  int index = -1;

  void offer(double k, const Vec3& p, int i, const PointCloud& cloud) {
    if (index < 0 || k > key || (k == key && (p < cloud.points[index] ||
                                              (p == cloud.points[index] && i < index)))) {
      key = k;
      index = i;
    }
  }
};

}  // namespace

std::vector<int> farthest_point_sample(const PointCloud& cloud, int n) {
  const int count = static_cast<int>(cloud.count());
  if (n < 1 || n > count)
    throw std::invalid_argument("farthest_point_sample: n out of range");

  const Vec3 c = cloud.centroid();
  FarthestPick seed;
  for (int i = 0; i < count; ++i) seed.offer((cloud.points[i] - c).norm_sq(), cloud.points[i], i, cloud);

  std::vector<int> picked;
  picked.reserve(n);
  picked.push_back(seed.index);

  std::vector<char> taken(count, 0);
  taken[seed.index] = 1;
  std::vector<double> min_dist(count);
  for (int i = 0; i < count; ++i)
    min_dist[i] = (cloud.points[i] - cloud.points[seed.index]).norm_sq();

  while (static_cast<int>(picked.size()) < n) {
    FarthestPick next;
    for (int i = 0; i < count; ++i) {
      if (taken[i]) continue;
      next.offer(min_dist[i], cloud.points[i], i, cloud);
    }
    picked.push_back(next.index);
    taken[next.index] = 1;
    for (int i = 0; i < count; ++i)
      min_dist[i] = std::min(min_dist[i], (cloud.points[i] - cloud.points[next.index]).norm_sq());
  }
  return picked;
}

std::vector<int> knn(const PointCloud& cloud, const Vec3& query, int k) {
  const int count = static_cast<int>(cloud.count());
  if (k < 1 || k > count) throw std::invalid_argument("knn: k out of range");

  std::vector<std::pair<double, int>> dist;
  dist.reserve(count);
  for (int i = 0; i < count; ++i) dist.emplace_back((cloud.points[i] - query).norm_sq(), i);
  std::partial_sort(dist.begin(), dist.begin() + k, dist.end());

  std::vector<int> idx(k);
  for (int i = 0; i < k; ++i) idx[i] = dist[i].second;
  return idx;
}

std::vector<int> half_space_crop(const PointCloud& cloud, const Vec3& direction, double fraction) {
  if (fraction <= 0.0) {
    std::vector<int> all(cloud.count());
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  const double dn = direction.norm();
  if (dn < 1e-12) throw std::invalid_argument("half_space_crop: zero direction");
  const Vec3 u = direction / dn;

  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  std::vector<double> t(cloud.count());
  for (size_t i = 0; i < cloud.count(); ++i) {
    t[i] = cloud.points[i].dot(u);
    lo = std::min(lo, t[i]);
    hi = std::max(hi, t[i]);
  }
  // plane offset interpolated along the projection span; the removed share
  // tracks `fraction` exactly only for mass uniform along u
  const double threshold = hi - fraction * (hi - lo);

  std::vector<int> keep;
  keep.reserve(cloud.count());
  for (size_t i = 0; i < cloud.count(); ++i)
    if (t[i] <= threshold) keep.push_back(static_cast<int>(i));
  if (keep.empty()) keep.push_back(0);  // never drop the whole cloud
  return keep;
}

namespace {

Vec3 rotate_z(const Vec3& p, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * p.x - s * p.y, s * p.x + c * p.y, p.z};
}

Vec3 sample_sphere_dir(Rng& rng) {
  for (;;) {
    Vec3 v{rng.normal(), rng.normal(), rng.normal()};
    const double n = v.norm();
    if (n > 1e-9) return v / n;
  }
}

Vec3 sample_unit_disk(Rng& rng) {
  const double r = std::sqrt(rng.uniform());
  const double a = rng.uniform(0.0, 2.0 * M_PI);
  return {r * std::cos(a), r * std::sin(a), 0.0};
}

struct ShapeParams {
  int family = 0;
  double a = 1.0, b = 1.0, c = 1.0;  // family-specific dimensions
  double rot = 0.0;                  // z rotation
};

ShapeParams draw_shape(int family, Rng& rng) {
  ShapeParams s;
  s.family = family;
  s.rot = rng.uniform(0.0, 2.0 * M_PI);
  switch (family) {
    case 0:  // sphere, mildly anisotropic
      s.a = rng.uniform(0.85, 1.15);
      s.b = rng.uniform(0.85, 1.15);
      s.c = rng.uniform(0.85, 1.15);
      break;
    case 1:  // box half extents
      s.a = 1.0;
      s.b = rng.uniform(0.55, 0.95);
      s.c = rng.uniform(0.35, 0.75);
      break;
    case 2:  // cylinder: radius, half height
      s.a = rng.uniform(0.4, 0.65);
      s.b = rng.uniform(0.8, 1.2);
      break;
    case 3:  // cone: base radius, height
      s.a = rng.uniform(0.5, 0.8);
      s.b = rng.uniform(1.2, 1.8);
      break;
    default:  // torus: ring radius, tube radius
      s.a = 0.75;
      s.b = rng.uniform(0.22, 0.35);
      break;
  }
  return s;
}

Vec3 sample_surface(const ShapeParams& s, Rng& rng) {
  Vec3 p;
  switch (s.family) {
    case 0: {
      const Vec3 d = sample_sphere_dir(rng);
      p = {d.x * s.a, d.y * s.b, d.z * s.c};
      break;
    }
    case 1: {
      const double ab = s.a * s.b, ac = s.a * s.c, bc = s.b * s.c;
      const double total = ab + ac + bc;
      const double pick = rng.uniform(0.0, total);
      const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      const double u = rng.uniform(-1.0, 1.0), v = rng.uniform(-1.0, 1.0);
      if (pick < ab)
        p = {u * s.a, v * s.b, sign * s.c};
      else if (pick < ab + ac)
        p = {u * s.a, sign * s.b, v * s.c};
      else
        p = {sign * s.a, u * s.b, v * s.c};
      break;
    }
    case 2: {
      const double side = 2.0 * M_PI * s.a * 2.0 * s.b;
      const double caps = 2.0 * M_PI * s.a * s.a;
      if (rng.uniform(0.0, side + caps) < side) {
        const double theta = rng.uniform(0.0, 2.0 * M_PI);
        p = {s.a * std::cos(theta), s.a * std::sin(theta), rng.uniform(-s.b, s.b)};
      } else {
        const Vec3 d = sample_unit_disk(rng);
        p = {d.x * s.a, d.y * s.a, rng.uniform() < 0.5 ? -s.b : s.b};
      }
      break;
    }
    case 3: {
      const double slant = std::sqrt(s.a * s.a + s.b * s.b);
      const double lateral = M_PI * s.a * slant;
      const double base = M_PI * s.a * s.a;
      if (rng.uniform(0.0, lateral + base) < lateral) {
        const double f = std::sqrt(rng.uniform());  // fraction from apex
        const double theta = rng.uniform(0.0, 2.0 * M_PI);
        const double r = f * s.a;
        p = {r * std::cos(theta), r * std::sin(theta), s.b * (1.0 - f) - s.b * 0.5};
      } else {
        const Vec3 d = sample_unit_disk(rng);
        p = {d.x * s.a, d.y * s.a, -s.b * 0.5};
      }
      break;
    }
    default: {
      const double theta = rng.uniform(0.0, 2.0 * M_PI);
      double phi;
      for (;;) {  // area element on a torus is uneven in the tube angle
        phi = rng.uniform(0.0, 2.0 * M_PI);
        const double accept = (s.a + s.b * std::cos(phi)) / (s.a + s.b);
        if (rng.uniform() < accept) break;
      }
      const double ring = s.a + s.b * std::cos(phi);
      p = {ring * std::cos(theta), ring * std::sin(theta), s.b * std::sin(phi)};
      break;
    }
  }
  return rotate_z(p, s.rot);
}

// the volatile store stops the optimizer from eliding the f32 narrowing
double snap32(double v) {
  volatile float f = static_cast<float>(v);
  return static_cast<double>(f);
}

PointCloud snap_f32(const PointCloud& cloud) {
  PointCloud out;
  out.points.reserve(cloud.count());
  for (const auto& p : cloud.points) out.points.push_back({snap32(p.x), snap32(p.y), snap32(p.z)});
  return out;
}

PointCloud make_clean_cloud(const ShapeParams& shape, int n, Rng& rng) {
  PointCloud cloud;
  cloud.points.reserve(n);
  for (int i = 0; i < n; ++i) cloud.points.push_back(sample_surface(shape, rng));
  return cloud;
}

PointCloud corrupt_cloud(PointCloud cloud, const SynthConfig& cfg, Rng& rng) {
  if (cfg.crop_fraction > 0.0) {
    const Vec3 dir = sample_sphere_dir(rng);
    const auto keep = half_space_crop(cloud, dir, cfg.crop_fraction);
    PointCloud cropped;
    cropped.points.reserve(cfg.points_per_cloud);
    for (int i : keep) cropped.points.push_back(cloud.points[i]);
    // resample with replacement back to the configured count
    while (cropped.count() < static_cast<size_t>(cfg.points_per_cloud))
      cropped.points.push_back(cropped.points[rng.below(keep.size())]);
    cloud = std::move(cropped);
  }
  if (cfg.jitter_sigma > 0.0)
    for (auto& p : cloud.points) {
      p.x += rng.normal(0.0, cfg.jitter_sigma);
      p.y += rng.normal(0.0, cfg.jitter_sigma);
      p.z += rng.normal(0.0, cfg.jitter_sigma);
    }
  if (cfg.outlier_count > 0) {
    Vec3 lo = cloud.points.front(), hi = cloud.points.front();
    for (const auto& p : cloud.points)
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::min(lo[a], p[a]);
        hi[a] = std::max(hi[a], p[a]);
      }
    // replace a random subset with uniform bounding-box outliers
    std::vector<size_t> order(cloud.count());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    for (int j = 0; j < cfg.outlier_count; ++j) {
      Vec3& p = cloud.points[order[j]];
      p = {rng.uniform(lo.x, hi.x), rng.uniform(lo.y, hi.y), rng.uniform(lo.z, hi.z)};
    }
  }
  return cloud;
}

}  // namespace

DomainPair generate_domain_pair(const SynthConfig& cfg) {
  cfg.validate();
  DomainPair pair;

  struct SplitSpec {
    Dataset* out;
    Domain domain;
    bool train;
  };
  const SplitSpec splits[] = {
      {&pair.source_train, Domain::source, true},
      {&pair.source_test, Domain::source, false},
      {&pair.target_train, Domain::target, true},
      {&pair.target_test, Domain::target, false},
  };

  for (uint64_t split_idx = 0; split_idx < 4; ++split_idx) {
    const SplitSpec& spec = splits[split_idx];
    spec.out->num_classes = cfg.classes;
    const int per_class = spec.train ? cfg.train_per_class : cfg.test_per_class;
    for (int cls = 0; cls < cfg.classes; ++cls) {
      for (int inst = 0; inst < per_class; ++inst) {
        Rng rng = Rng::stream(cfg.seed, {split_idx, static_cast<uint64_t>(cls),
                                         static_cast<uint64_t>(inst)});
        const ShapeParams shape = draw_shape(cls, rng);
        PointCloud cloud = make_clean_cloud(shape, cfg.points_per_cloud, rng);
        if (spec.domain == Domain::target) cloud = corrupt_cloud(std::move(cloud), cfg, rng);
        cloud = snap_f32(normalize_unit(cloud));

        LabeledSample sample;
        sample.cloud = std::move(cloud);
        sample.label = cls;
        sample.label_hidden = spec.domain == Domain::target;
        sample.domain = spec.domain;
        spec.out->samples.push_back(std::move(sample));
      }
    }
  }
  return pair;
}

namespace {

constexpr char kMagic[4] = {'T', 'A', 'M', 'P'};

void put_u16(std::ostream& os, uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

void put_u32(std::ostream& os, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<uint32_t>(f)); }

float get_f32(std::istream& is) { return std::bit_cast<float>(get_u32(is)); }

}  // namespace

void write_cloud(const PointCloud& cloud, const std::filesystem::path& path) {
  if (cloud.empty()) throw std::invalid_argument("write_cloud: empty cloud");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("write_cloud: cannot open " + path.string());
  os.write(kMagic, 4);
  put_u16(os, 1);
  put_u32(os, static_cast<uint32_t>(cloud.count()));
  put_u16(os, 0);
  for (const auto& p : cloud.points) {
    put_f32(os, static_cast<float>(p.x));
    put_f32(os, static_cast<float>(p.y));
    put_f32(os, static_cast<float>(p.z));
  }
  if (!os) throw FormatError("write_cloud: write failed for " + path.string());
}

PointCloud read_cloud(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("read_cloud: cannot open " + path.string());

  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("read_cloud: bad magic in " + path.string());
  const uint16_t version = get_u16(is);
  if (version != 1) throw FormatError("read_cloud: unsupported version");
  const uint32_t count = get_u32(is);
  const uint16_t reserved = get_u16(is);
  if (!is || reserved != 0) throw FormatError("read_cloud: corrupt header");
  if (count == 0) throw FormatError("read_cloud: zero point count");

  PointCloud cloud;
  cloud.points.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    const float x = get_f32(is), y = get_f32(is), z = get_f32(is);
    if (!is) throw FormatError("read_cloud: truncated payload");
    if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z))
      throw FormatError("read_cloud: non-finite coordinate");
    cloud.points.push_back({x, y, z});
  }
  if (is.peek() != EOF) throw FormatError("read_cloud: trailing data");
  return cloud;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& dir, const std::string& split_name) {
  std::filesystem::create_directories(dir / split_name);
  std::ofstream labels(dir / (split_name + ".labels"));
  if (!labels) throw FormatError("write_dataset: cannot open labels file");
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    std::ostringstream name;
    name << split_name << "/cloud_" << i << ".tamp";
    write_cloud(ds.samples[i].cloud, dir / name.str());
    labels << name.str() << ',' << ds.samples[i].label << ','
           << domain_tag(ds.samples[i].domain) << '\n';
  }
}

Dataset read_dataset(const std::filesystem::path& labels_file) {
  std::ifstream is(labels_file);
  if (!is) throw FormatError("read_dataset: cannot open " + labels_file.string());
  const auto root = labels_file.parent_path();

  Dataset ds;
  std::string line;
  int max_label = -1;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const size_t c1 = line.find(',');
    const size_t c2 = line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      throw FormatError("read_dataset: malformed line: " + line);
    LabeledSample s;
    s.cloud = read_cloud(root / line.substr(0, c1));
    s.label = std::stoi(line.substr(c1 + 1, c2 - c1 - 1));
    const std::string tag = line.substr(c2 + 1);
    if (tag == "source")
      s.domain = Domain::source;
    else if (tag == "target")
      s.domain = Domain::target;
    else
      throw FormatError("read_dataset: unknown domain tag: " + tag);
    s.label_hidden = s.domain == Domain::target;
    max_label = std::max(max_label, s.label);
    ds.samples.push_back(std::move(s));
  }
  ds.num_classes = max_label + 1;
  return ds;
}

}  // namespace tam::geometry
