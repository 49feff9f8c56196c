#include "tam/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tam::losses {

using ad::Tape;
using ad::Value;

namespace {
constexpr double kProbFloor = 1e-12;
}

void LossWeights::validate() const {
  if (lambda_t < 0 || lambda_cdc < 0 || lambda_imp < 0 || lambda_mix < 0 || lambda_sim < 0)
    throw std::invalid_argument("loss weights must be non-negative");
}

// -mean over rows of log(clamped prob of the labelled class)
Value cross_entropy(Tape& t, Value probs, const std::vector<int>& labels) {
  const auto& shape = t.shape(probs);
  if (shape.size() != 2 || shape[0] != static_cast<int>(labels.size()))
    throw std::invalid_argument("cross-entropy: probs/labels mismatch");
  const int n = shape[0], c = shape[1];
  std::vector<double> onehot(static_cast<size_t>(n) * c, 0.0);
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= c)
      throw std::invalid_argument("cross-entropy: label out of range");
    onehot[static_cast<size_t>(i) * c + labels[i]] = 1.0;
  }
  const Value mask = t.constant({n, c}, std::move(onehot));
  const Value picked = t.sum(t.mul(mask, t.log_(t.clamp_min(probs, kProbFloor))));
  return t.affine(picked, -1.0 / n, 0.0);
}

Value source_ce(Tape& t, Value probs1, Value probs2, const std::vector<int>& labels) {
  return t.add(cross_entropy(t, probs1, labels), cross_entropy(t, probs2, labels));
}

Value spst_target_loss(Tape& t, Value product_probs, const std::vector<int>& pseudo_labels,
                       double gamma) {
  const auto& shape = t.shape(product_probs);
  if (shape.size() != 2 || shape[0] != static_cast<int>(pseudo_labels.size()))
    throw std::invalid_argument("spst_target_loss: probs/labels mismatch");
  const int n = shape[0], c = shape[1];

  int selected = 0;
  std::vector<double> onehot(static_cast<size_t>(n) * c, 0.0);
  for (int i = 0; i < n; ++i) {
    if (pseudo_labels[i] < 0) continue;
    if (pseudo_labels[i] >= c) throw std::invalid_argument("spst_target_loss: label out of range");
    onehot[static_cast<size_t>(i) * c + pseudo_labels[i]] = 1.0;
    ++selected;
  }
  if (selected == 0) return t.constant_scalar(0.0);

  const Value mask = t.constant({n, c}, std::move(onehot));
  const Value picked = t.sum(t.mul(mask, t.log_(t.clamp_min(product_probs, kProbFloor))));
  // each selected sample contributes -(log p + gamma)
  return t.affine(picked, -1.0 / selected, -gamma);
}

MixPair mix_clouds(const geometry::PointCloud& source_cloud, const std::vector<int>& order_source,
                   const geometry::PointCloud& target_cloud, const std::vector<int>& order_target,
                   std::span<const double> pred_source, std::span<const double> pred_target,
                   double lambda) {
  if (pred_source.size() != pred_target.size() || pred_source.empty())
    throw std::invalid_argument("cdmix: prediction width mismatch");
  if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("cdmix: lambda outside [0, 1]");

  MixPair out;
  out.lambda = lambda;
  const size_t n = std::min(order_source.size(), order_target.size());
  out.mixed.points.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    const auto& ps = source_cloud.points[order_source[i]];
    const auto& pt = target_cloud.points[order_target[i]];
    out.mixed.points.push_back(ps * lambda + pt * (1.0 - lambda));
  }
  out.virtual_label.resize(pred_source.size());
  for (size_t j = 0; j < pred_source.size(); ++j)
    out.virtual_label[j] = lambda * pred_source[j] + (1.0 - lambda) * pred_target[j];
  return out;
}

MixPair cdmix_with_orders(const geometry::PointCloud& source_cloud,
                          const std::vector<int>& order_source,
                          const geometry::PointCloud& target_cloud,
                          const std::vector<int>& order_target,
                          std::span<const double> pred_source,
                          std::span<const double> pred_target, double kappa, Rng& rng) {
  if (kappa <= 0.0) throw std::invalid_argument("cdmix: kappa must be positive");
  return mix_clouds(source_cloud, order_source, target_cloud, order_target, pred_source,
                    pred_target, rng.beta(kappa, kappa));
}

MixPair cdmix(const geometry::PointCloud& source_cloud, const geometry::PointCloud& target_cloud,
              std::span<const double> pred_source, std::span<const double> pred_target,
              double kappa, Rng& rng) {
  const auto order_s =
      geometry::farthest_point_sample(source_cloud, static_cast<int>(source_cloud.count()));
  const auto order_t =
      geometry::farthest_point_sample(target_cloud, static_cast<int>(target_cloud.count()));
  return cdmix_with_orders(source_cloud, order_s, target_cloud, order_t, pred_source, pred_target,
                           kappa, rng);
}

Value mix_loss(Tape& t, Value probs, const std::vector<double>& virtual_label) {
  const auto& shape = t.shape(probs);
  if (shape.size() != 1 || shape[0] != static_cast<int>(virtual_label.size()))
    throw std::invalid_argument("mix_loss: prediction/label width mismatch");
  const Value vl = t.constant({shape[0]}, virtual_label);
  return t.affine(t.cosine(probs, vl), -1.0, 1.0);
}

Value implicit_loss(Tape& t, Value predictions, const std::vector<implicit::QuerySignal>& targets) {
  const auto& shape = t.shape(predictions);
  if (targets.empty()) throw std::invalid_argument("implicit_loss: no query targets");
  if (shape.size() != 2 || shape[0] != static_cast<int>(targets.size()) || shape[1] != 4)
    throw std::invalid_argument("implicit_loss: expects predictions [N, 4]");

  std::vector<double> tgt;
  tgt.reserve(targets.size() * 4);
  for (const auto& q : targets) {
    tgt.push_back(q.direction.x);
    tgt.push_back(q.direction.y);
    tgt.push_back(q.direction.z);
    tgt.push_back(q.distance);
  }
  const Value residual = t.sub(predictions, t.constant({shape[0], 4}, std::move(tgt)));
  const Value sq = t.rowsum(t.mul(residual, residual));
  // tiny bias inside the root keeps the gradient finite at zero residual
  return t.mean(t.sqrt_(t.affine(sq, 1.0, 1e-18)));
}

Value sim_loss(Tape& t, Value z_pcg, const std::vector<double>& z_global) {
  const auto& shape = t.shape(z_pcg);
  if (shape.size() != 1 || shape[0] != static_cast<int>(z_global.size()))
    throw std::invalid_argument("sim_loss: width mismatch");
  const Value zg = t.constant({shape[0]}, z_global);
  return t.affine(t.cosine(z_pcg, zg), -1.0, 1.0);
}

Value cdc_loss(Tape& t, Value target_feats, const std::vector<int>& pseudo_labels,
               const FeatureBank& bank, double tau, int* skipped) {
  const auto& shape = t.shape(target_feats);
  if (shape.size() != 2 || shape[0] != static_cast<int>(pseudo_labels.size()))
    throw std::invalid_argument("cdc_loss: features/labels mismatch");
  if (bank.entries.empty()) throw std::invalid_argument("cdc_loss: empty feature bank");
  if (tau <= 0.0) throw std::invalid_argument("cdc_loss: tau must be positive");
  const int n = shape[0], d = shape[1];

  // rows whose pseudo-class has at least one positive in the bank
  std::vector<int> usable;
  for (int i = 0; i < n; ++i) {
    if (pseudo_labels[i] >= 0 && bank.has_class(pseudo_labels[i]))
      usable.push_back(i);
    else if (skipped)
      ++*skipped;
  }
  if (usable.empty()) return t.constant_scalar(0.0);
  const int m = static_cast<int>(usable.size());

  const int nb = static_cast<int>(bank.size());
  std::vector<double> bank_normed(static_cast<size_t>(nb) * d);
  for (int b = 0; b < nb; ++b) {
    const auto& f = bank.entries[b].feature;
    if (static_cast<int>(f.size()) != d)
      throw std::invalid_argument("cdc_loss: bank feature width mismatch");
    double norm = 0.0;
    for (double x : f) norm += x * x;
    norm = std::max(std::sqrt(norm), kProbFloor);
    for (int j = 0; j < d; ++j) bank_normed[static_cast<size_t>(b) * d + j] = f[j] / norm;
  }

  std::vector<double> pos_mask(static_cast<size_t>(m) * nb, 0.0);
  for (int r = 0; r < m; ++r)
    for (int b = 0; b < nb; ++b)
      if (bank.entries[b].label == pseudo_labels[usable[r]])
        pos_mask[static_cast<size_t>(r) * nb + b] = 1.0;

  const Value z = t.gather_rows(target_feats, usable);
  const Value row_norm =
      t.clamp_min(t.sqrt_(t.rowsum(t.mul(z, z))), kProbFloor);
  const Value z_normed = t.mul_colvec(z, t.reciprocal(row_norm));

  // transpose the normalized bank so cos = z_normed * bank^T
  std::vector<double> bank_t(static_cast<size_t>(d) * nb);
  for (int b = 0; b < nb; ++b)
    for (int j = 0; j < d; ++j)
      bank_t[static_cast<size_t>(j) * nb + b] = bank_normed[static_cast<size_t>(b) * d + j];

  const Value cos = t.matmul(z_normed, t.constant({d, nb}, std::move(bank_t)));
  const Value phi = t.exp_(t.affine(cos, 1.0 / tau, 0.0));
  const Value pos_sum = t.sum(t.mul(phi, t.constant({m, nb}, std::move(pos_mask))));
  const Value all_sum = t.sum(phi);
  return t.sub(t.log_(all_sum), t.log_(pos_sum));
}

Value total_loss(Tape& t, Value cls_source, Value cls_target, Value cdc, Value imp, Value mix,
                 Value sim, const LossWeights& w) {
  w.validate();
  Value total = cls_source.valid() ? cls_source : t.constant_scalar(0.0);
  const auto fold = [&](Value term, double weight) {
    if (term.valid() && weight != 0.0) total = t.add(total, t.affine(term, weight, 0.0));
  };
  fold(cls_target, w.lambda_t);
  fold(cdc, w.lambda_cdc);
  fold(imp, w.lambda_imp);
  fold(mix, w.lambda_mix);
  fold(sim, w.lambda_sim);
  return total;
}

}  // namespace tam::losses
