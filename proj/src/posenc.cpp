#include "tam/posenc.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace tam::posenc {

void PosEncConfig::validate() const {
  if (d0 <= 0 || d0 % 6 != 0) throw std::invalid_argument("posenc: d0 must be positive and divisible by 6");
  if (alpha <= 0.0) throw std::invalid_argument("posenc: alpha must be positive");
  if (beta <= 0.0) throw std::invalid_argument("posenc: beta must be positive");
  for (const auto& s : stages) {
    if (s.downsample_ratio <= 0.0 || s.downsample_ratio > 1.0)
      throw std::invalid_argument("posenc: stage ratio must lie in (0, 1]");
    if (s.neighbors < 1) throw std::invalid_argument("posenc: stage neighbors must be positive");
  }
}

namespace {

// per-channel multipliers alpha / beta^{6m/width}
std::vector<double> frequency_ladder(int width, double alpha, double beta) {
  const int freqs = width / 6;
  std::vector<double> ladder(freqs);
  for (int m = 0; m < freqs; ++m) ladder[m] = alpha / std::pow(beta, 6.0 * m / width);
  return ladder;
}

void pos_encode_into(double* out, const geometry::Vec3& p, int width,
                     const std::vector<double>& ladder) {
  const int per_axis = width / 3;
  const int freqs = width / 6;
  for (int axis = 0; axis < 3; ++axis) {
    const double a = p[axis];
    double* dst = out + axis * per_axis;
    for (int m = 0; m < freqs; ++m) {
      const double t = ladder[m] * a;
      dst[2 * m] = std::sin(t);
      dst[2 * m + 1] = std::cos(t);
    }
  }
}

}  // namespace

std::vector<double> pos_encode(const geometry::Vec3& p, int width, double alpha, double beta) {
  if (width <= 0 || width % 6 != 0)
    throw std::invalid_argument("pos_encode: width must be divisible by 6");
  std::vector<double> out(width);
  pos_encode_into(out.data(), p, width, frequency_ladder(width, alpha, beta));
  return out;
}

StageOutput encode_stage(const geometry::PointCloud& points,
                         const std::vector<std::vector<double>>& features,
                         const StageConfig& stage, double alpha, double beta) {
  const int count = static_cast<int>(points.count());
  if (count == 0) throw std::invalid_argument("encode_stage: empty input");
  if (features.size() != points.count())
    throw std::invalid_argument("encode_stage: feature/point count mismatch");
  const int w_in = static_cast<int>(features.front().size());
  const int w_out = 2 * w_in;
  if (w_out % 6 != 0) throw std::invalid_argument("encode_stage: stage width not divisible by 6");
  if (stage.neighbors > count)
    throw std::invalid_argument("encode_stage: neighbor count exceeds point count");

  const int n_out = std::max(1, static_cast<int>(std::lround(count * stage.downsample_ratio)));
  const auto centers = geometry::farthest_point_sample(points, n_out);
  const auto ladder = frequency_ladder(w_out, alpha, beta);

  StageOutput out;
  out.points.points.reserve(n_out);
  out.features.resize(n_out);
  std::vector<double> pe(w_out);

  for (int ci = 0; ci < n_out; ++ci) {
    const int c = centers[ci];
    const geometry::Vec3 pc = points.points[c];
    out.points.points.push_back(pc);

    const auto nbrs = geometry::knn(points, pc, stage.neighbors);
    double radius = 0.0;
    for (int j : nbrs) radius = std::max(radius, (points.points[j] - pc).norm());

    std::vector<double> maxv(w_out, -std::numeric_limits<double>::infinity());
    std::vector<double> meanv(w_out, 0.0);
    for (int j : nbrs) {
      geometry::Vec3 dp{0.0, 0.0, 0.0};
      if (radius > 0.0) dp = (points.points[j] - pc) / radius;
      pos_encode_into(pe.data(), dp, w_out, ladder);
      const auto& fc = features[c];
      const auto& fj = features[j];
      for (int t = 0; t < w_out; ++t) {
        const double expanded = t < w_in ? fc[t] : fj[t - w_in];
        const double weighted = (expanded + pe[t]) * pe[t];
        maxv[t] = std::max(maxv[t], weighted);
        meanv[t] += weighted;
      }
    }
    auto& dst = out.features[ci];
    dst.resize(w_out);
    const double inv_k = 1.0 / static_cast<double>(nbrs.size());
    for (int t = 0; t < w_out; ++t) dst[t] = maxv[t] + meanv[t] * inv_k;
  }
  return out;
}

std::vector<double> encode_global(const geometry::PointCloud& cloud, const PosEncConfig& cfg) {
  cfg.validate();
  if (cloud.empty()) throw std::invalid_argument("encode_global: empty cloud");

  // check the schedule fits before doing any work
  int n = static_cast<int>(cloud.count());
  for (const auto& s : cfg.stages) {
    if (s.neighbors > n)
      throw std::invalid_argument("encode_global: too few points for the stage schedule");
    n = std::max(1, static_cast<int>(std::lround(n * s.downsample_ratio)));
  }

  std::vector<std::vector<double>> features;
  features.reserve(cloud.count());
  const auto ladder0 = frequency_ladder(cfg.d0, cfg.alpha, cfg.beta);
  for (const auto& p : cloud.points) {
    std::vector<double> f(cfg.d0);
    pos_encode_into(f.data(), p, cfg.d0, ladder0);
    features.push_back(std::move(f));
  }

  geometry::PointCloud pts = cloud;
  for (const auto& s : cfg.stages) {
    StageOutput stage_out = encode_stage(pts, features, s, cfg.alpha, cfg.beta);
    pts = std::move(stage_out.points);
    features = std::move(stage_out.features);
  }

  const int w = static_cast<int>(features.front().size());
  std::vector<double> global(w);
  std::vector<double> meanv(w, 0.0);
  std::vector<double> maxv(w, -std::numeric_limits<double>::infinity());
  for (const auto& f : features)
    for (int t = 0; t < w; ++t) {
      maxv[t] = std::max(maxv[t], f[t]);
      meanv[t] += f[t];
    }
  const double inv_n = 1.0 / static_cast<double>(features.size());
  for (int t = 0; t < w; ++t) global[t] = maxv[t] + meanv[t] * inv_n;
  return global;
}

}  // namespace tam::posenc
