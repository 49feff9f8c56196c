#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tam::diagnostics {

struct GradCheckEntry {
  std::string name;
  double max_error = 0.0;
  int instances = 0;
};

/// Central-finite-difference verification of every differentiable kernel and
/// every training loss, `instances` random small instances each. Returns the
/// per-item worst relative error.
std::vector<GradCheckEntry> run_gradient_suite(uint64_t seed = 7, int instances = 20);

bool all_within(const std::vector<GradCheckEntry>& entries, double tolerance);

}  // namespace tam::diagnostics
