#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tam/autodiff.hpp"
#include "tam/bank.hpp"
#include "tam/geometry.hpp"
#include "tam/implicit.hpp"
#include "tam/rng.hpp"

namespace tam::losses {

struct LossWeights {
  double lambda_t = 1.0;
  double lambda_cdc = 1.0;
  double lambda_imp = 1.0;
  double lambda_mix = 1.0;
  double lambda_sim = 0.1;

  void validate() const;
};

/// A cross-domain mixed sample: convex point combination of a source and a
/// target cloud plus the matching prediction-derived virtual label.
struct MixPair {
  double lambda = 0.0;
  geometry::PointCloud mixed;
  std::vector<double> virtual_label;
};

/// Mean cross-entropy of softmax outputs [n, C] against integer labels,
/// with probabilities clamped at 1e-12 before the log.
ad::Value cross_entropy(ad::Tape& t, ad::Value probs, const std::vector<int>& labels);

/// Supervised source loss over the two heads' softmax outputs: cross-entropy
/// of the per-class product prediction, which equals the sum of the heads'
/// individual cross-entropies.
ad::Value source_ce(ad::Tape& t, ad::Value probs1, ad::Value probs2,
                    const std::vector<int>& labels);

/// Self-paced target objective over product predictions [n, C]: each selected
/// sample (pseudo >= 0) contributes -(log p[c] + gamma), others contribute 0;
/// the result is averaged over the selected count.
ad::Value spst_target_loss(ad::Tape& t, ad::Value product_probs,
                           const std::vector<int>& pseudo_labels, double gamma);

/// Mixes two clouds point-by-point after ranking each by canonical farthest
/// point order (clouds of unequal size are cut to the shorter FPS prefix).
/// lambda ~ Beta(kappa, kappa); the virtual label mixes the given softmax
/// predictions and carries no gradient.
MixPair cdmix(const geometry::PointCloud& source_cloud, const geometry::PointCloud& target_cloud,
              std::span<const double> pred_source, std::span<const double> pred_target,
              double kappa, Rng& rng);

/// Same, with precomputed FPS orders (they only depend on the clouds).
MixPair cdmix_with_orders(const geometry::PointCloud& source_cloud,
                          const std::vector<int>& order_source,
                          const geometry::PointCloud& target_cloud,
                          const std::vector<int>& order_target,
                          std::span<const double> pred_source,
                          std::span<const double> pred_target, double kappa, Rng& rng);

/// Deterministic mixing core with an explicit coefficient.
MixPair mix_clouds(const geometry::PointCloud& source_cloud, const std::vector<int>& order_source,
                   const geometry::PointCloud& target_cloud, const std::vector<int>& order_target,
                   std::span<const double> pred_source, std::span<const double> pred_target,
                   double lambda);

/// 1 - cosine(probs, virtual_label); bounded [0, 2]. `probs` is the softmax
/// output for the mixed cloud; the virtual label is a constant.
ad::Value mix_loss(ad::Tape& t, ad::Value probs, const std::vector<double>& virtual_label);

/// Mean Euclidean norm of the per-query residual between predicted and
/// target (direction, distance) 4-vectors.
ad::Value implicit_loss(ad::Tape& t, ad::Value predictions,
                        const std::vector<implicit::QuerySignal>& targets);

/// 1 - cosine(z_pcg, z_global); the global feature is a constant, so the
/// gradient aligns the part-graph feature to it and not vice versa.
ad::Value sim_loss(ad::Tape& t, ad::Value z_pcg, const std::vector<double>& z_global);

/// Category-based cross-domain contrastive loss against the source bank,
/// pooled over the batch: -log( sum_i phi+ / sum_i (phi+ + phi-) ) with
/// phi(a,b) = exp(cos(a,b)/tau). Samples whose pseudo-class is missing from
/// the bank are skipped and counted in *skipped when given.
ad::Value cdc_loss(ad::Tape& t, ad::Value target_feats, const std::vector<int>& pseudo_labels,
                   const FeatureBank& bank, double tau, int* skipped = nullptr);

/// Weighted total. Invalid (default) Values stand for terms absent in the
/// current phase and contribute nothing.
ad::Value total_loss(ad::Tape& t, ad::Value cls_source, ad::Value cls_target, ad::Value cdc,
                     ad::Value imp, ad::Value mix, ad::Value sim, const LossWeights& w);

}  // namespace tam::losses
