#include "tam/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "tam/autodiff.hpp"
#include "tam/losses.hpp"
#include "tam/parallel.hpp"
#include "tam/rng.hpp"

namespace tam::eval {

std::vector<double> averaged_probability(const std::vector<double>& logits_reg,
                                         const std::vector<double>& logits_pcg) {
  if (logits_reg.size() != logits_pcg.size() || logits_reg.empty())
    throw std::invalid_argument("averaged_probability: logit width mismatch");
  std::vector<double> avg(logits_reg.size());
  for (size_t i = 0; i < avg.size(); ++i) avg[i] = 0.5 * (logits_reg[i] + logits_pcg[i]);
  double mx = avg[0];
  for (double v : avg) mx = std::max(mx, v);
  double z = 0.0;
  for (double& v : avg) {
    v = std::exp(v - mx);
    z += v;
  }
  for (double& v : avg) v /= z;
  return avg;
}

EvalReport evaluate_with(
    const std::function<std::pair<std::vector<double>, std::vector<double>>(size_t)>& heads,
    const std::vector<int>& labels, int num_classes, int threads) {
  if (labels.empty()) throw std::invalid_argument("evaluate: empty dataset");
  if (num_classes < 2) throw std::invalid_argument("evaluate: need at least 2 classes");

  std::vector<int> predictions(labels.size());
  std::vector<double> nll(labels.size());
  parallel_for(labels.size(), threads, [&](size_t i) {
    const auto [l1, l2] = heads(i);
    const auto p = averaged_probability(l1, l2);
    predictions[i] =
        static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    nll[i] = -std::log(std::max(p[labels[i]], 1e-12));
  });

  EvalReport report;
  report.total = static_cast<int>(labels.size());
  report.confusion.assign(num_classes, std::vector<int>(num_classes, 0));
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw std::invalid_argument("evaluate: label out of range");
    report.confusion[labels[i]][predictions[i]] += 1;
  }
  int correct = 0;
  report.per_class_accuracy.assign(num_classes, 0.0);
  for (int c = 0; c < num_classes; ++c) {
    const int row_total = std::accumulate(report.confusion[c].begin(), report.confusion[c].end(), 0);
    correct += report.confusion[c][c];
    report.per_class_accuracy[c] =
        row_total > 0 ? static_cast<double>(report.confusion[c][c]) / row_total : 0.0;
  }
  report.accuracy = static_cast<double>(correct) / report.total;
  report.mean_nll = std::accumulate(nll.begin(), nll.end(), 0.0) / report.total;
  return report;
}

EvalReport evaluate(models::ModelBundle& bundle, const geometry::Dataset& dataset,
                    uint64_t query_seed, int threads) {
  if (dataset.samples.empty()) throw std::invalid_argument("evaluate: empty dataset");

  std::vector<int> labels(dataset.size());
  std::vector<std::pair<std::vector<double>, std::vector<double>>> logits(dataset.size());
  parallel_for(dataset.size(), threads, [&](size_t i) {
    const auto& sample = dataset.samples[i];
    labels[i] = sample.label;
    const auto reg = bundle.forward_reg(sample.cloud);
    const auto queries =
        implicit::sample_query_points(sample.cloud, bundle.config.implicit_cfg, query_seed + i);
    const auto parts = implicit::make_parts(sample.cloud, queries, bundle.config.implicit_cfg.k_part);
    const auto pcg = bundle.forward_pcg(parts);
    logits[i] = {reg.logits, pcg.logits};
  });
  return evaluate_with([&](size_t i) { return logits[i]; }, labels,
                       dataset.num_classes, 1);
}

double a_distance_from_error(double eta) { return 2.0 * (1.0 - eta); }

double a_distance(const std::vector<std::vector<double>>& features_source,
                  const std::vector<std::vector<double>>& features_target, uint64_t seed) {
  if (features_source.size() < 20 || features_target.size() < 20)
    throw std::invalid_argument("a_distance: need at least 20 features per domain");
  const int width = static_cast<int>(features_source.front().size());
  for (const auto& f : features_source)
    if (static_cast<int>(f.size()) != width)
      throw std::invalid_argument("a_distance: inconsistent feature width");
  for (const auto& f : features_target)
    if (static_cast<int>(f.size()) != width)
      throw std::invalid_argument("a_distance: inconsistent feature width");

  struct Row {
    const std::vector<double>* f;
    int domain;
  };
  std::vector<Row> rows;
  rows.reserve(features_source.size() + features_target.size());
  for (const auto& f : features_source) rows.push_back({&f, 0});
  for (const auto& f : features_target) rows.push_back({&f, 1});

  Rng rng = Rng::stream(seed, {0xad15u});
  rng.shuffle(rows);
  const size_t train_n = rows.size() * 8 / 10;
  const size_t test_n = rows.size() - train_n;
  if (train_n == 0 || test_n == 0) throw std::invalid_argument("a_distance: degenerate split");

  // feature standardization from the training split
  std::vector<double> mu(width, 0.0), sd(width, 0.0);
  for (size_t i = 0; i < train_n; ++i)
    for (int j = 0; j < width; ++j) mu[j] += (*rows[i].f)[j];
  for (int j = 0; j < width; ++j) mu[j] /= static_cast<double>(train_n);
  for (size_t i = 0; i < train_n; ++i)
    for (int j = 0; j < width; ++j) {
      const double dv = (*rows[i].f)[j] - mu[j];
      sd[j] += dv * dv;
    }
  for (int j = 0; j < width; ++j) sd[j] = std::sqrt(sd[j] / train_n + 1e-8);

  const auto standardized = [&](const Row& r) {
    std::vector<double> out(width);
    for (int j = 0; j < width; ++j) out[j] = ((*r.f)[j] - mu[j]) / sd[j];
    return out;
  };

  // 2-layer discriminator: width -> 16 -> 2
  const int hidden = 16;
  ad::ParamSet params;
  {
    Rng wrng = Rng::stream(seed, {0xd15cu});
    ad::Param& w1 = params.create("disc.fc1.w", {width, hidden});
    for (double& v : w1.value) v = wrng.normal(0.0, std::sqrt(2.0 / width));
    params.create("disc.fc1.b", {hidden});
    ad::Param& w2 = params.create("disc.fc2.w", {hidden, 2});
    for (double& v : w2.value) v = wrng.normal(0.0, std::sqrt(1.0 / hidden));
    params.create("disc.fc2.b", {2});
  }

  std::vector<double> train_flat;
  train_flat.reserve(train_n * width);
  std::vector<int> train_labels(train_n);
  for (size_t i = 0; i < train_n; ++i) {
    const auto f = standardized(rows[i]);
    train_flat.insert(train_flat.end(), f.begin(), f.end());
    train_labels[i] = rows[i].domain;
  }

  ad::Adam opt;
  const int epochs = 80;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    ad::Tape t;
    const ad::Value x = t.constant({static_cast<int>(train_n), width}, train_flat);
    ad::Value h = t.add(t.matmul(x, t.param(params, "disc.fc1.w")), t.param(params, "disc.fc1.b"));
    h = t.relu(h);
    const ad::Value logits =
        t.add(t.matmul(h, t.param(params, "disc.fc2.w")), t.param(params, "disc.fc2.b"));
    // cross-entropy against domain labels
    std::vector<double> onehot(train_n * 2, 0.0);
    for (size_t i = 0; i < train_n; ++i) onehot[i * 2 + train_labels[i]] = 1.0;
    const ad::Value picked =
        t.sum(t.mul(t.constant({static_cast<int>(train_n), 2}, std::move(onehot)),
                    t.log_(t.clamp_min(t.softmax(logits), 1e-12))));
    const ad::Value loss = t.affine(picked, -1.0 / static_cast<double>(train_n), 0.0);
    params.zero_grad();
    t.backward(loss);
    t.scatter_grads(params);
    opt.step(params, 1e-2);
  }

  // held-out error
  int wrong = 0;
  for (size_t i = train_n; i < rows.size(); ++i) {
    const auto f = standardized(rows[i]);
    ad::Tape t;
    const ad::Value x = t.constant({1, width}, f);
    ad::Value h = t.add(t.matmul(x, t.param(params, "disc.fc1.w")), t.param(params, "disc.fc1.b"));
    h = t.relu(h);
    const ad::Value logits =
        t.add(t.matmul(h, t.param(params, "disc.fc2.w")), t.param(params, "disc.fc2.b"));
    const auto ld = t.data(logits);
    const int pred = ld[1] > ld[0] ? 1 : 0;
    if (pred != rows[i].domain) ++wrong;
  }
  const double eta = static_cast<double>(wrong) / static_cast<double>(test_n);
  return a_distance_from_error(eta);
}

}  // namespace tam::eval
