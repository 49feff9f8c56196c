#pragma once

#include <array>
#include <vector>

#include "tam/geometry.hpp"

namespace tam::posenc {

struct StageConfig {
  double downsample_ratio = 0.5;  // center count relative to incoming points
  int neighbors = 16;             // k nearest points per center
};

/// Non-parametric global encoder configuration. Stage feature widths are
/// fixed at 2*d0, 4*d0, 8*d0, 16*d0; the final feature has width 16*d0.
struct PosEncConfig {
  int d0 = 36;           // initial embedding width, divisible by 6
  double alpha = 100.0;  // scale
  double beta = 500.0;   // frequency base
  std::array<StageConfig, 4> stages{};

  int global_width() const { return 16 * d0; }
  void validate() const;
};

/// Trigonometric embedding of a point into `width` channels: per axis,
/// alternating sin/cos at a geometric frequency ladder. `width` must be
/// divisible by 6.
std::vector<double> pos_encode(const geometry::Vec3& p, int width, double alpha, double beta);

struct StageOutput {
  geometry::PointCloud points;               // downsampled centers
  std::vector<std::vector<double>> features; // per-center, width doubled
};

/// One hierarchical stage: FPS-downsample centers, expand each neighbor
/// feature with the center's, weight by the local positional embedding of
/// the normalized offset, then pool (elementwise max + mean).
StageOutput encode_stage(const geometry::PointCloud& points,
                         const std::vector<std::vector<double>>& features,
                         const StageConfig& stage, double alpha, double beta);

/// Full four-stage encoding of a (normalized) cloud into a 16*d0 global
/// feature. Deterministic and free of trainable state.
std::vector<double> encode_global(const geometry::PointCloud& cloud, const PosEncConfig& cfg);

}  // namespace tam::posenc
