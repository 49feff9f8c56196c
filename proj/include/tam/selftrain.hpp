#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <vector>

#include "tam/bank.hpp"
#include "tam/eval.hpp"
#include "tam/geometry.hpp"
#include "tam/implicit.hpp"
#include "tam/losses.hpp"
#include "tam/models.hpp"

namespace tam::selftrain {

struct SelfTrainConfig {
  int rounds = 5;
  int epochs_per_round = 10;
  double theta0 = 0.8;
  double theta_step = 0.005;  // per-round threshold increment
  int batch_size = 16;

  void validate() const;
};

struct TrainConfig {
  losses::LossWeights weights;
  SelfTrainConfig st;
  double kappa = 2.0;     // Beta parameter for the mix coefficient
  double tau = 0.1;       // contrastive temperature
  int pretrain_epochs = 50;
  int mix_per_batch = 4;  // mixed source/target pairs per batch
  double lr_semantic = 1e-3;  // cosine-annealed per phase
  double lr_implicit = 1e-4;  // constant; local encoder + decoder
  int threads = 4;
  uint64_t seed = 1;
};

struct PseudoLabelSet {
  std::vector<int> labels;           // -1 when unselected
  std::vector<uint8_t> selected;     // 0/1

  int selected_count() const;
};

/// Threshold selection over averaged-head predictions: a sample receives a
/// one-hot pseudo-label iff its top averaged softmax probability exceeds
/// theta.
PseudoLabelSet select_pseudo_labels(const std::vector<std::vector<double>>& logits_reg,
                                    const std::vector<std::vector<double>>& logits_pcg,
                                    double theta);

/// theta_r = theta_{r-1} + step, rejecting results outside (0, 1).
double update_threshold(double theta, double step);

struct EpochStats {
  double cls_s = 0.0, cls_t = 0.0, cdc = 0.0, imp = 0.0, mix = 0.0, sim = 0.0;
  int batches = 0;

  void add(const EpochStats& o);
  EpochStats averaged() const;
};

struct RoundMetrics {
  int round = 0;
  double theta = 0.0;
  int selected_count = 0;
  double source_acc = 0.0;
  double target_acc = 0.0;
  EpochStats losses;
};

/// Per-sample precomputed geometry: the non-parametric global feature, the
/// canonical FPS ordering, query signals and parts. All of it is fixed for
/// the lifetime of a dataset.
struct SampleCache {
  std::vector<double> global_feature;
  std::vector<int> fps_order;
  std::vector<implicit::QuerySignal> queries;
  std::vector<implicit::Part> parts;
};

struct DatasetCache {
  std::vector<SampleCache> samples;

  static DatasetCache build(const geometry::Dataset& ds, const models::ModelConfig& cfg,
                            uint64_t seed, uint64_t tag, int threads);
};

/// Deterministic stream tags; the trainer derives every shuffle and draw
/// from (seed, phase, epoch, ...) so phases never share randomness.
namespace phases {
constexpr uint64_t pretrain = 1;
constexpr uint64_t round_base = 100;
constexpr uint64_t shuffle_source = 0x51;
constexpr uint64_t shuffle_target = 0x52;
}  // namespace phases

struct TrainerCallbacks {
  std::function<void(int, const EpochStats&)> on_pretrain_epoch;
  std::function<void(const RoundMetrics&)> on_round;
  std::ostream* log = nullptr;
};

/// Orchestrates pretraining and the confidence-threshold self-training loop
/// over one model bundle. All randomness derives from cfg.seed; runs with
/// equal configuration are bit-identical regardless of thread count.
class Trainer {
 public:
  using Callbacks = TrainerCallbacks;

  Trainer(models::ModelBundle& bundle, const geometry::Dataset& source_train,
          const geometry::Dataset& target_train, const geometry::Dataset& source_test,
          const geometry::Dataset& target_test, TrainConfig cfg, Callbacks callbacks = {});

  /// Same, with precomputed geometry caches (they depend only on the
  /// datasets, the encoder and the seed, so ablation runs can share them).
  Trainer(models::ModelBundle& bundle, const geometry::Dataset& source_train,
          const geometry::Dataset& target_train, const geometry::Dataset& source_test,
          const geometry::Dataset& target_test, TrainConfig cfg, Callbacks callbacks,
          DatasetCache source_cache, DatasetCache target_cache, DatasetCache source_test_cache,
          DatasetCache target_test_cache);

  /// Supervised + self-supervised optimization over source (labels) and
  /// source+target (self-supervision); no target-label terms.
  void pretrain();

  /// The full round/epoch loop: joint pass, selected-target pass, threshold
  /// growth and pseudo-label refresh; returns per-round metrics (round 0 is
  /// the post-pretraining state).
  std::vector<RoundMetrics> run_self_training();

  FeatureBank build_feature_bank();
  PseudoLabelSet assign_pseudo_labels(double theta);

  double evaluate_source_test();
  double evaluate_target_test();

  const DatasetCache& source_cache() const { return src_cache_; }
  const DatasetCache& target_cache() const { return tgt_cache_; }

  /// Seeded epoch shuffle shared by every pass (exposed so tests can
  /// replicate batch schedules exactly).
  static std::vector<size_t> epoch_order(uint64_t seed, uint64_t phase, uint64_t epoch, size_t n);

 private:
  EpochStats run_joint_epoch(uint64_t phase, int epoch, int total_epochs);
  EpochStats run_target_epoch(uint64_t phase, int epoch, int total_epochs, double theta,
                              const PseudoLabelSet& pseudo, const FeatureBank& bank);
  double evaluate_cached(const geometry::Dataset& ds, const DatasetCache& cache);

  models::ModelBundle& bundle_;
  const geometry::Dataset& src_train_;
  const geometry::Dataset& tgt_train_;
  const geometry::Dataset& src_test_;
  const geometry::Dataset& tgt_test_;
  TrainConfig cfg_;
  Callbacks cb_;

  DatasetCache src_cache_, tgt_cache_, src_test_cache_, tgt_test_cache_;
  ad::Adam optimizer_;
};

}  // namespace tam::selftrain
