#pragma once

#include <vector>

namespace tam {

/// Cached per-source-sample global features with ground-truth labels;
/// positives/negatives source for the cross-domain contrastive loss.
struct FeatureBank {
  struct Entry {
    std::vector<double> feature;  // d-vector from the projected global path
    int label = -1;
  };
  std::vector<Entry> entries;

  size_t size() const { return entries.size(); }
  bool has_class(int label) const {
    for (const auto& e : entries)
      if (e.label == label) return true;
    return false;
  }
};

}  // namespace tam
