#include "tam/selftrain.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tam/parallel.hpp"
#include "tam/posenc.hpp"
#include "tam/rng.hpp"

namespace tam::selftrain {

using ad::Tape;
using ad::Value;

namespace {

constexpr uint64_t kTagShuffleSource = phases::shuffle_source;
constexpr uint64_t kTagShuffleTarget = phases::shuffle_target;
constexpr uint64_t kTagMix = 0x53u;
constexpr uint64_t kTagQueries = 0x54u;
constexpr uint64_t kPhasePretrain = phases::pretrain;
constexpr uint64_t kPhaseRoundBase = phases::round_base;

std::vector<double> softmax_plain(const std::vector<double>& logits) {
  std::vector<double> p(logits);
  double mx = p[0];
  for (double v : p) mx = std::max(mx, v);
  double z = 0.0;
  for (double& v : p) {
    v = std::exp(v - mx);
    z += v;
  }
  for (double& v : p) v /= z;
  return p;
}

// -log(clamped p[label]) for a probability vector on the tape
Value pick_nll(Tape& t, Value probs, int label) {
  const auto& shape = t.shape(probs);
  std::vector<double> mask(shape[0], 0.0);
  mask[label] = 1.0;
  const Value picked =
      t.dot(t.constant({shape[0]}, std::move(mask)), t.log_(t.clamp_min(probs, 1e-12)));
  return t.affine(picked, -1.0, 0.0);
}

bool is_implicit_branch(const std::string& name) {
  return name.starts_with("local.") || name.starts_with("dec.");
}

struct JobResult {
  std::vector<std::pair<std::string, std::vector<double>>> grads;
  std::vector<ad::BnPending> bn;
  double ce2 = 0.0, imp = 0.0, sim = 0.0;
  bool has_ce2 = false, has_imp = false, has_sim = false;
};

}  // namespace

void SelfTrainConfig::validate() const {
  if (rounds < 1 || epochs_per_round < 1)
    throw std::invalid_argument("self-train: rounds and epochs must be >= 1");
  if (theta0 <= 0.0 || theta0 >= 1.0)
    throw std::invalid_argument("self-train: theta0 must lie in (0, 1)");
  if (theta_step < 0.0) throw std::invalid_argument("self-train: theta_step must be >= 0");
  if (theta0 + rounds * theta_step >= 1.0)
    throw std::invalid_argument("self-train: threshold would reach 1 within the round budget");
  if (batch_size < 1) throw std::invalid_argument("self-train: batch size must be >= 1");
}

int PseudoLabelSet::selected_count() const {
  int n = 0;
  for (uint8_t s : selected) n += s;
  return n;
}

PseudoLabelSet select_pseudo_labels(const std::vector<std::vector<double>>& logits_reg,
                                    const std::vector<std::vector<double>>& logits_pcg,
                                    double theta) {
  if (logits_reg.size() != logits_pcg.size())
    throw std::invalid_argument("select_pseudo_labels: head count mismatch");
  if (theta <= 0.0 || theta >= 1.0)
    throw std::invalid_argument("select_pseudo_labels: theta must lie in (0, 1)");

  PseudoLabelSet out;
  out.labels.resize(logits_reg.size(), -1);
  out.selected.resize(logits_reg.size(), 0);
  for (size_t i = 0; i < logits_reg.size(); ++i) {
    const auto p = eval::averaged_probability(logits_reg[i], logits_pcg[i]);
    const auto arg = std::max_element(p.begin(), p.end());
    if (*arg > theta) {
      out.labels[i] = static_cast<int>(arg - p.begin());
      out.selected[i] = 1;
    }
  }
  return out;
}

double update_threshold(double theta, double step) {
  const double next = theta + step;
  if (next >= 1.0 || next <= 0.0)
    throw std::invalid_argument("update_threshold: threshold left (0, 1)");
  return next;
}

void EpochStats::add(const EpochStats& o) {
  cls_s += o.cls_s;
  cls_t += o.cls_t;
  cdc += o.cdc;
  imp += o.imp;
  mix += o.mix;
  sim += o.sim;
  batches += o.batches;
}

EpochStats EpochStats::averaged() const {
  EpochStats out = *this;
  if (batches > 0) {
    out.cls_s /= batches;
    out.cls_t /= batches;
    out.cdc /= batches;
    out.imp /= batches;
    out.mix /= batches;
    out.sim /= batches;
    out.batches = 1;
  }
  return out;
}

DatasetCache DatasetCache::build(const geometry::Dataset& ds, const models::ModelConfig& cfg,
                                 uint64_t seed, uint64_t tag, int threads) {
  DatasetCache cache;
  cache.samples.resize(ds.size());
  parallel_for(ds.size(), threads, [&](size_t i) {
    SampleCache& sc = cache.samples[i];
    const auto& cloud = ds.samples[i].cloud;
    sc.global_feature = posenc::encode_global(cloud, cfg.encoder);
    sc.fps_order = geometry::farthest_point_sample(cloud, static_cast<int>(cloud.count()));

    const uint64_t qseed = Rng::stream(seed, {kTagQueries, tag, i}).next_u64();
    implicit::ImplicitConfig icfg = cfg.implicit_cfg;
    for (int attempt = 0;; ++attempt) {
      try {
        sc.queries = implicit::sample_query_points(cloud, icfg, qseed);
        break;
      } catch (const implicit::EmptyBandError&) {
        if (attempt >= 2) throw;
        // widen the band; degenerate clouds otherwise starve the part graph
        icfg.band_lo = attempt == 0 ? icfg.band_lo * 0.5 : 0.0;
        icfg.band_hi *= 4.0;
      }
    }
    sc.parts = implicit::make_parts(cloud, sc.queries, cfg.implicit_cfg.k_part);
  });
  return cache;
}

Trainer::Trainer(models::ModelBundle& bundle, const geometry::Dataset& source_train,
                 const geometry::Dataset& target_train, const geometry::Dataset& source_test,
                 const geometry::Dataset& target_test, TrainConfig cfg, Callbacks callbacks,
                 DatasetCache source_cache, DatasetCache target_cache,
                 DatasetCache source_test_cache, DatasetCache target_test_cache)
    : bundle_(bundle),
      src_train_(source_train),
      tgt_train_(target_train),
      src_test_(source_test),
      tgt_test_(target_test),
      cfg_(std::move(cfg)),
      cb_(std::move(callbacks)),
      src_cache_(std::move(source_cache)),
      tgt_cache_(std::move(target_cache)),
      src_test_cache_(std::move(source_test_cache)),
      tgt_test_cache_(std::move(target_test_cache)) {
  cfg_.weights.validate();
  cfg_.st.validate();
  if (src_train_.samples.empty() || tgt_train_.samples.empty())
    throw std::invalid_argument("Trainer: empty training split");
  if (src_cache_.samples.size() != src_train_.size() ||
      tgt_cache_.samples.size() != tgt_train_.size() ||
      src_test_cache_.samples.size() != src_test_.size() ||
      tgt_test_cache_.samples.size() != tgt_test_.size())
    throw std::invalid_argument("Trainer: cache/dataset size mismatch");
}

Trainer::Trainer(models::ModelBundle& bundle, const geometry::Dataset& source_train,
                 const geometry::Dataset& target_train, const geometry::Dataset& source_test,
                 const geometry::Dataset& target_test, TrainConfig cfg, Callbacks callbacks)
    : Trainer(bundle, source_train, target_train, source_test, target_test, cfg, callbacks,
              DatasetCache::build(source_train, bundle.config, cfg.seed, 0, cfg.threads),
              DatasetCache::build(target_train, bundle.config, cfg.seed, 1, cfg.threads),
              DatasetCache::build(source_test, bundle.config, cfg.seed, 2, cfg.threads),
              DatasetCache::build(target_test, bundle.config, cfg.seed, 3, cfg.threads)) {}

std::vector<size_t> Trainer::epoch_order(uint64_t seed, uint64_t phase, uint64_t epoch, size_t n) {
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng::stream(seed, {phase, epoch});
  rng.shuffle(order);
  return order;
}

EpochStats Trainer::run_joint_epoch(uint64_t phase, int epoch, int total_epochs) {
  const int batch = cfg_.st.batch_size;
  const size_t n_s = src_train_.size();
  const size_t n_t = tgt_train_.size();
  const auto order_s = epoch_order(cfg_.seed, phase ^ kTagShuffleSource, epoch, n_s);
  const auto order_t = epoch_order(cfg_.seed, phase ^ kTagShuffleTarget, epoch, n_t);

  const auto& w = cfg_.weights;
  const bool use_mix = w.lambda_mix > 0.0;
  const bool use_imp = w.lambda_imp > 0.0;
  const bool use_sim = w.lambda_sim > 0.0;
  const bool target_used = use_mix || use_imp || use_sim;
  const double lr_sem = ad::cosine_annealed_lr(cfg_.lr_semantic, epoch, total_epochs);
  const int d1 = bundle_.config.global_width();

  EpochStats stats;
  const size_t n_batches = (n_s + batch - 1) / batch;
  for (size_t b = 0; b < n_batches; ++b) {
    const size_t lo = b * batch;
    const size_t hi = std::min(n_s, lo + batch);
    const int bs = static_cast<int>(hi - lo);

    std::vector<size_t> src_ids(order_s.begin() + lo, order_s.begin() + hi);
    std::vector<size_t> tgt_ids(bs);
    for (int i = 0; i < bs; ++i) tgt_ids[i] = order_t[(lo + i) % n_t];

    bundle_.params.zero_grad();

    // ---- mixed clouds: virtual labels from frozen predictions ----
    const int m = use_mix ? std::min(cfg_.mix_per_batch, bs) : 0;
    std::vector<losses::MixPair> mixes(m);
    std::vector<std::vector<double>> mix_fg(m);
    for (int k = 0; k < m; ++k) {
      const auto& sc = src_cache_.samples[src_ids[k]];
      const auto& tc = tgt_cache_.samples[tgt_ids[k]];
      const auto pred_s = softmax_plain(bundle_.forward_reg_cached(sc.global_feature).logits);
      const auto pred_t = softmax_plain(bundle_.forward_reg_cached(tc.global_feature).logits);
      Rng mix_rng = Rng::stream(cfg_.seed, {kTagMix, phase, static_cast<uint64_t>(epoch), b,
                                            static_cast<uint64_t>(k)});
      mixes[k] = losses::cdmix_with_orders(src_train_.samples[src_ids[k]].cloud, sc.fps_order,
                                           tgt_train_.samples[tgt_ids[k]].cloud, tc.fps_order,
                                           pred_s, pred_t, cfg_.kappa, mix_rng);
    }
    parallel_for(static_cast<size_t>(m), cfg_.threads, [&](size_t k) {
      mix_fg[k] = posenc::encode_global(mixes[k].mixed, bundle_.config.encoder);
    });

    // ---- frozen global features for the alignment targets ----
    std::vector<std::vector<double>> z_global_src(bs), z_global_tgt(bs);
    if (use_sim) {
      parallel_for(static_cast<size_t>(2 * bs), cfg_.threads, [&](size_t i) {
        if (i < static_cast<size_t>(bs)) {
          z_global_src[i] =
              bundle_.forward_reg_cached(src_cache_.samples[src_ids[i]].global_feature).feature;
        } else {
          const size_t j = i - bs;
          z_global_tgt[j] =
              bundle_.forward_reg_cached(tgt_cache_.samples[tgt_ids[j]].global_feature).feature;
        }
      });
    }

    // ---- batch tape: projected global path (+ mixed rows) ----
    {
      std::vector<double> fg_flat;
      fg_flat.reserve(static_cast<size_t>(bs + m) * d1);
      std::vector<int> labels(bs);
      for (int i = 0; i < bs; ++i) {
        const auto& f = src_cache_.samples[src_ids[i]].global_feature;
        fg_flat.insert(fg_flat.end(), f.begin(), f.end());
        labels[i] = src_train_.samples[src_ids[i]].label;
      }
      for (int k = 0; k < m; ++k)
        fg_flat.insert(fg_flat.end(), mix_fg[k].begin(), mix_fg[k].end());

      Tape t;
      const Value fg = t.constant({bs + m, d1}, std::move(fg_flat));
      const Value z = bundle_.project_global(t, fg, /*training=*/true);
      const Value probs = t.softmax(bundle_.classify_reg(t, z, /*training=*/true));

      std::vector<int> src_rows(bs);
      for (int i = 0; i < bs; ++i) src_rows[i] = i;
      const Value ce1 = losses::cross_entropy(t, t.gather_rows(probs, src_rows), labels);
      Value root = ce1;

      double mix_value = 0.0;
      if (m > 0) {
        Value mix_sum = t.constant_scalar(0.0);
        for (int k = 0; k < m; ++k)
          mix_sum = t.add(mix_sum, losses::mix_loss(t, t.row(probs, bs + k), mixes[k].virtual_label));
        mix_value = t.scalar_value(mix_sum) / m;
        root = t.add(root, t.affine(mix_sum, w.lambda_mix / m, 0.0));
      }

      stats.cls_s += t.scalar_value(ce1);
      stats.mix += mix_value;
      t.backward(root);
      t.scatter_grads(bundle_.params);
      t.commit_bn_updates();
    }

    // ---- per-sample tapes: part encoder, decoder, part graph ----
    struct Job {
      size_t sample;
      bool is_source;
    };
    std::vector<Job> jobs;
    for (int i = 0; i < bs; ++i) jobs.push_back({src_ids[i], true});
    if (target_used && (use_imp || use_sim))
      for (int i = 0; i < bs; ++i) jobs.push_back({tgt_ids[i], false});

    const int n_ssl = static_cast<int>(jobs.size());
    std::vector<JobResult> results(jobs.size());
    parallel_for(jobs.size(), cfg_.threads, [&](size_t ji) {
      const Job& job = jobs[ji];
      const auto& cache =
          job.is_source ? src_cache_.samples[job.sample] : tgt_cache_.samples[job.sample];
      const auto& sample =
          job.is_source ? src_train_.samples[job.sample] : tgt_train_.samples[job.sample];
      JobResult& res = results[ji];

      Tape t;
      std::vector<Value> node_feats;
      node_feats.reserve(cache.parts.size());
      for (const auto& part : cache.parts)
        node_feats.push_back(bundle_.local_encode(t, part, /*training=*/true));

      Value root = t.constant_scalar(0.0);
      const bool needs_pcg = job.is_source || use_sim;
      models::ModelBundle::PcgOut pcg;
      if (needs_pcg) pcg = bundle_.pcg_forward(t, node_feats, /*training=*/true);

      if (job.is_source) {
        const Value ce2 = pick_nll(t, t.softmax(pcg.logits), sample.label);
        res.ce2 = t.scalar_value(ce2);
        res.has_ce2 = true;
        root = t.add(root, t.affine(ce2, 1.0 / bs, 0.0));
      }
      if (use_imp) {
        const Value pred = bundle_.decode_queries(t, node_feats, cache.queries, /*training=*/true);
        const Value limp = losses::implicit_loss(t, pred, cache.queries);
        res.imp = t.scalar_value(limp);
        res.has_imp = true;
        root = t.add(root, t.affine(limp, w.lambda_imp / n_ssl, 0.0));
      }
      if (use_sim) {
        const auto& zg = job.is_source ? z_global_src[ji] : z_global_tgt[ji - bs];
        const Value lsim = losses::sim_loss(t, pcg.z_pcg, zg);
        res.sim = t.scalar_value(lsim);
        res.has_sim = true;
        root = t.add(root, t.affine(lsim, w.lambda_sim / n_ssl, 0.0));
      }

      t.backward(root);
      res.grads = t.collect_grads();
      res.bn = t.take_bn_updates();
    });

    // deterministic merge in job order
    double ce2_sum = 0.0, imp_sum = 0.0, sim_sum = 0.0;
    int ce2_n = 0, imp_n = 0, sim_n = 0;
    for (auto& res : results) {
      bundle_.params.accumulate(res.grads);
      for (const auto& u : res.bn) ad::apply_bn_update(u);
      if (res.has_ce2) {
        ce2_sum += res.ce2;
        ++ce2_n;
      }
      if (res.has_imp) {
        imp_sum += res.imp;
        ++imp_n;
      }
      if (res.has_sim) {
        sim_sum += res.sim;
        ++sim_n;
      }
    }
    if (ce2_n > 0) stats.cls_s += ce2_sum / ce2_n;
    if (imp_n > 0) stats.imp += imp_sum / imp_n;
    if (sim_n > 0) stats.sim += sim_sum / sim_n;

    if (!std::isfinite(stats.cls_s) || !std::isfinite(stats.imp) || !std::isfinite(stats.mix) ||
        !std::isfinite(stats.sim))
      throw std::runtime_error("training diverged: non-finite loss in joint pass");

    optimizer_.step(bundle_.params, lr_sem,
                    [](const std::string& n) { return !is_implicit_branch(n); });
    optimizer_.step(bundle_.params, cfg_.lr_implicit, is_implicit_branch);
    ++stats.batches;
  }
  return stats;
}

EpochStats Trainer::run_target_epoch(uint64_t phase, int epoch, int total_epochs, double theta,
                                     const PseudoLabelSet& pseudo, const FeatureBank& bank) {
  const double gamma = -std::log(theta);
  std::vector<size_t> selected;
  for (size_t i = 0; i < pseudo.selected.size(); ++i)
    if (pseudo.selected[i]) selected.push_back(i);

  EpochStats stats;
  if (selected.empty()) return stats;

  const auto order = epoch_order(cfg_.seed, phase ^ 0x7au, epoch, selected.size());
  const int batch = cfg_.st.batch_size;
  const double lr_sem = ad::cosine_annealed_lr(cfg_.lr_semantic, epoch, total_epochs);
  const auto& w = cfg_.weights;
  const int d1 = bundle_.config.global_width();

  const size_t n_batches = (selected.size() + batch - 1) / batch;
  for (size_t b = 0; b < n_batches; ++b) {
    const size_t lo = b * batch;
    const size_t hi = std::min(selected.size(), lo + batch);
    const int bt = static_cast<int>(hi - lo);
    std::vector<size_t> ids(bt);
    std::vector<int> labels(bt);
    for (int i = 0; i < bt; ++i) {
      ids[i] = selected[order[lo + i]];
      labels[i] = pseudo.labels[ids[i]];
    }

    bundle_.params.zero_grad();

    // batch tape: projected path classifies and aligns against the bank
    {
      std::vector<double> fg_flat;
      fg_flat.reserve(static_cast<size_t>(bt) * d1);
      for (int i = 0; i < bt; ++i) {
        const auto& f = tgt_cache_.samples[ids[i]].global_feature;
        fg_flat.insert(fg_flat.end(), f.begin(), f.end());
      }
      Tape t;
      const Value fg = t.constant({bt, d1}, std::move(fg_flat));
      const Value z = bundle_.project_global(t, fg, /*training=*/true);
      const Value probs = t.softmax(bundle_.classify_reg(t, z, /*training=*/true));
      const Value ce1 = losses::cross_entropy(t, probs, labels);
      int skipped = 0;
      const Value cdc = losses::cdc_loss(t, z, labels, bank, cfg_.tau, &skipped);
      const Value root = t.add(t.affine(ce1, w.lambda_t, 0.0), t.affine(cdc, w.lambda_cdc, 0.0));

      stats.cls_t += t.scalar_value(ce1);
      stats.cdc += t.scalar_value(cdc);
      t.backward(root);
      t.scatter_grads(bundle_.params);
      t.commit_bn_updates();
    }

    // per-sample tapes: part-graph head against the pseudo-labels
    std::vector<JobResult> results(bt);
    parallel_for(static_cast<size_t>(bt), cfg_.threads, [&](size_t i) {
      const auto& cache = tgt_cache_.samples[ids[i]];
      JobResult& res = results[i];
      Tape t;
      std::vector<Value> node_feats;
      node_feats.reserve(cache.parts.size());
      for (const auto& part : cache.parts)
        node_feats.push_back(bundle_.local_encode(t, part, /*training=*/true));
      const auto pcg = bundle_.pcg_forward(t, node_feats, /*training=*/true);
      const Value ce2 = pick_nll(t, t.softmax(pcg.logits), labels[i]);
      res.ce2 = t.scalar_value(ce2);
      res.has_ce2 = true;
      const Value root = t.affine(ce2, w.lambda_t / bt, 0.0);
      t.backward(root);
      res.grads = t.collect_grads();
      res.bn = t.take_bn_updates();
    });

    double ce2_sum = 0.0;
    for (auto& res : results) {
      bundle_.params.accumulate(res.grads);
      for (const auto& u : res.bn) ad::apply_bn_update(u);
      ce2_sum += res.ce2;
    }
    // the logged objective carries the per-sample -gamma of the self-paced form
    stats.cls_t += ce2_sum / bt - gamma;

    if (!std::isfinite(stats.cls_t) || !std::isfinite(stats.cdc))
      throw std::runtime_error("training diverged: non-finite loss in target pass");

    optimizer_.step(bundle_.params, lr_sem,
                    [](const std::string& n) { return !is_implicit_branch(n); });
    optimizer_.step(bundle_.params, cfg_.lr_implicit, is_implicit_branch);
    ++stats.batches;
  }
  return stats;
}

void Trainer::pretrain() {
  for (int epoch = 0; epoch < cfg_.pretrain_epochs; ++epoch) {
    EpochStats stats = run_joint_epoch(kPhasePretrain, epoch, cfg_.pretrain_epochs);
    const EpochStats avg = stats.averaged();
    if (cb_.log)
      *cb_.log << "pretrain epoch " << epoch << ": cls_s=" << avg.cls_s << " imp=" << avg.imp
               << " mix=" << avg.mix << " sim=" << avg.sim << "\n";
    if (cb_.on_pretrain_epoch) cb_.on_pretrain_epoch(epoch, avg);
  }
}

FeatureBank Trainer::build_feature_bank() {
  FeatureBank bank;
  bank.entries.resize(src_train_.size());
  parallel_for(src_train_.size(), cfg_.threads, [&](size_t i) {
    bank.entries[i].feature =
        bundle_.forward_reg_cached(src_cache_.samples[i].global_feature).feature;
    bank.entries[i].label = src_train_.samples[i].label;
  });
  return bank;
}

PseudoLabelSet Trainer::assign_pseudo_labels(double theta) {
  std::vector<std::vector<double>> logits_reg(tgt_train_.size()), logits_pcg(tgt_train_.size());
  parallel_for(tgt_train_.size(), cfg_.threads, [&](size_t i) {
    logits_reg[i] = bundle_.forward_reg_cached(tgt_cache_.samples[i].global_feature).logits;
    logits_pcg[i] = bundle_.forward_pcg(tgt_cache_.samples[i].parts).logits;
  });
  return select_pseudo_labels(logits_reg, logits_pcg, theta);
}

double Trainer::evaluate_cached(const geometry::Dataset& ds, const DatasetCache& cache) {
  std::vector<int> labels(ds.size());
  std::vector<std::pair<std::vector<double>, std::vector<double>>> logits(ds.size());
  parallel_for(ds.size(), cfg_.threads, [&](size_t i) {
    labels[i] = ds.samples[i].label;
    logits[i] = {bundle_.forward_reg_cached(cache.samples[i].global_feature).logits,
                 bundle_.forward_pcg(cache.samples[i].parts).logits};
  });
  return eval::evaluate_with([&](size_t i) { return logits[i]; }, labels, ds.num_classes, 1)
      .accuracy;
}

double Trainer::evaluate_source_test() { return evaluate_cached(src_test_, src_test_cache_); }

double Trainer::evaluate_target_test() { return evaluate_cached(tgt_test_, tgt_test_cache_); }

std::vector<RoundMetrics> Trainer::run_self_training() {
  double theta = cfg_.st.theta0;
  PseudoLabelSet pseudo = assign_pseudo_labels(theta);

  std::vector<RoundMetrics> metrics;
  RoundMetrics base;
  base.round = 0;
  base.theta = theta;
  base.selected_count = pseudo.selected_count();
  base.source_acc = evaluate_source_test();
  base.target_acc = evaluate_target_test();
  metrics.push_back(base);
  if (cb_.on_round) cb_.on_round(base);

  for (int r = 1; r <= cfg_.st.rounds; ++r) {
    EpochStats round_stats;
    const uint64_t phase = kPhaseRoundBase + static_cast<uint64_t>(r);
    for (int e = 0; e < cfg_.st.epochs_per_round; ++e) {
      const FeatureBank bank = build_feature_bank();
      round_stats.add(run_joint_epoch(phase, e, cfg_.st.epochs_per_round));
      if (pseudo.selected_count() > 0) {
        round_stats.add(run_target_epoch(phase, e, cfg_.st.epochs_per_round, theta, pseudo, bank));
      } else if (cb_.log) {
        *cb_.log << "round " << r << " epoch " << e
                 << ": no target sample above threshold, skipping target pass\n";
      }
    }

    // final round: snap to checkpoint precision before the reported metrics
    // so a reloaded checkpoint reproduces them bit-exactly
    if (r == cfg_.st.rounds) bundle_.params.quantize_f32();

    theta = update_threshold(theta, cfg_.st.theta_step);
    pseudo = assign_pseudo_labels(theta);

    RoundMetrics rm;
    rm.round = r;
    rm.theta = theta;
    rm.selected_count = pseudo.selected_count();
    rm.source_acc = evaluate_source_test();
    rm.target_acc = evaluate_target_test();
    rm.losses = round_stats.averaged();
    metrics.push_back(rm);
    if (cb_.log)
      *cb_.log << "round " << r << ": theta=" << rm.theta << " selected=" << rm.selected_count
               << " src_acc=" << rm.source_acc << " tgt_acc=" << rm.target_acc << "\n";
    if (cb_.on_round) cb_.on_round(rm);
  }
  return metrics;
}

}  // namespace tam::selftrain
