#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "tam/geometry.hpp"
#include "tam/implicit.hpp"
#include "tam/models.hpp"

namespace tam::eval {

struct EvalReport {
  double accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  std::vector<std::vector<int>> confusion;  // rows = truth, cols = prediction
  double mean_nll = 0.0;                    // of the averaged-head prediction
  int total = 0;
};

/// softmax((logits_reg + logits_pcg) / 2); the prediction rule shared by
/// evaluation and pseudo-label assignment.
std::vector<double> averaged_probability(const std::vector<double>& logits_reg,
                                         const std::vector<double>& logits_pcg);

/// Assembles the report from per-sample head logits.
EvalReport evaluate_with(
    const std::function<std::pair<std::vector<double>, std::vector<double>>(size_t)>& heads,
    const std::vector<int>& labels, int num_classes, int threads = 1);

/// Full evaluation of a dataset: encodes every cloud, runs both heads with
/// frozen statistics, and scores the averaged prediction.
EvalReport evaluate(models::ModelBundle& bundle, const geometry::Dataset& dataset,
                    uint64_t query_seed = 0, int threads = 1);

/// Domain-discrepancy proxy: a small two-layer discriminator is trained to
/// separate the two feature sets on an 80/20 split and 2 * (1 - held-out
/// error) is reported.
double a_distance(const std::vector<std::vector<double>>& features_source,
                  const std::vector<std::vector<double>>& features_target, uint64_t seed);

double a_distance_from_error(double eta);

}  // namespace tam::eval
