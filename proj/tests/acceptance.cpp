// Acceptance suite: runs every release criterion end to end and prints one
// pass/fail line per criterion. Exit status is the number of failures.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "tam/cli.hpp"
#include "tam/diagnostics.hpp"
#include "tam/eval.hpp"
#include "tam/geometry.hpp"
#include "tam/implicit.hpp"
#include "tam/losses.hpp"
#include "tam/models.hpp"
#include "tam/parallel.hpp"
#include "tam/posenc.hpp"
#include "tam/rng.hpp"
#include "tam/selftrain.hpp"

using namespace tam;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Criterion {
  int index;
  std::string name;
  std::function<bool(std::string&)> run;
};

// ---------------------------------------------------------------- helpers

geometry::PointCloud plane_cloud(uint64_t seed, int n) {
  Rng rng(seed);
  geometry::PointCloud c;
  for (int i = 0; i < n; ++i)
    c.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), 0.0});
  return c;
}

geometry::PointCloud sphere_cloud(uint64_t seed, int n) {
  Rng rng(seed);
  geometry::PointCloud c;
  for (int i = 0; i < n; ++i) {
    geometry::Vec3 v{rng.normal(), rng.normal(), rng.normal()};
    c.points.push_back(v / v.norm());
  }
  return c;
}

geometry::PointCloud random_cloud(uint64_t seed, int n) {
  Rng rng(seed);
  geometry::PointCloud c;
  for (int i = 0; i < n; ++i)
    c.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
  return geometry::normalize_unit(c);
}

models::ModelConfig desk_model_config() {
  models::ModelConfig cfg;  // library defaults: d0=36, alpha=100, beta=500
  cfg.implicit_cfg.n_query = 6;
  cfg.implicit_cfg.k_part = 40;
  return cfg;
}

// ------------------------------------------------------------- criteria

bool criterion_gradients(std::string& detail) {
  const auto t0 = Clock::now();
  const auto entries = diagnostics::run_gradient_suite(7, 20);
  double worst = 0.0;
  std::string worst_name;
  for (const auto& e : entries)
    if (e.max_error > worst) {
      worst = e.max_error;
      worst_name = e.name;
    }
  const double elapsed = seconds_since(t0);
  std::ostringstream os;
  os << entries.size() << " kernels/losses x20 instances, worst " << worst << " (" << worst_name
     << "), " << elapsed << "s";
  detail = os.str();
  return diagnostics::all_within(entries, 1e-4) && elapsed < 120.0;
}

bool criterion_projection_oracle(std::string& detail) {
  const auto t0 = Clock::now();
  const auto plane = plane_cloud(11, 2048);
  const auto sphere = sphere_cloud(12, 2048);
  Rng rng(13);
  int good = 0, total = 0;
  const double dists[2] = {0.05, 0.1};
  for (int trial = 0; trial < 250; ++trial) {
    const double d = dists[trial % 2];
    {
      const geometry::Vec3 q{rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8),
                             trial % 4 < 2 ? d : -d};
      const auto [approx, proj] = implicit::approx_dist(q, plane, 10);
      if (std::abs(approx - d) / d < 0.10) ++good;
      ++total;
    }
    {
      geometry::Vec3 dir{rng.normal(), rng.normal(), rng.normal()};
      dir = dir / dir.norm();
      const double radius = trial % 4 < 2 ? 1.0 - d : 1.0 + d;
      const auto [approx, proj] = implicit::approx_dist(dir * radius, sphere, 10);
      if (std::abs(approx - d) / d < 0.10) ++good;
      ++total;
    }
  }
  const double elapsed = seconds_since(t0);
  std::ostringstream os;
  os << good << "/" << total << " queries within 10%, " << elapsed << "s";
  detail = os.str();
  return total == 500 && good >= static_cast<int>(0.95 * total) && elapsed < 60.0;
}

bool criterion_positional_encoding(std::string& detail) {
  bool ok = true;
  const auto origin = posenc::pos_encode({0, 0, 0}, 36, 100.0, 500.0);
  for (size_t i = 0; i < origin.size(); ++i)
    ok = ok && origin[i] == (i % 2 == 0 ? 0.0 : 1.0);

  Rng rng(14);
  for (int i = 0; i < 500 && ok; ++i) {
    const geometry::Vec3 p{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
    for (double v : posenc::pos_encode(p, 36, 100.0, 500.0))
      ok = ok && v >= -1.0 && v <= 1.0;
  }

  const auto v = posenc::pos_encode({0.01, 0, 0}, 6, 100.0, 500.0);
  const double sin_err = std::abs(v[0] - std::sin(1.0));
  const double cos_err = std::abs(v[1] - std::cos(1.0));
  ok = ok && sin_err < 1e-12 && cos_err < 1e-12;

  std::ostringstream os;
  os << "origin pattern exact, bounds hold, sin/cos errors " << sin_err << "/" << cos_err;
  detail = os.str();
  return ok;
}

bool criterion_invariance(std::string& detail) {
  const auto t0 = Clock::now();
  auto cfg = desk_model_config();
  models::ModelBundle bundle(cfg, 15);
  double worst = 0.0;

  for (uint64_t trial = 0; trial < 50; ++trial) {
    Rng rng(900 + trial);

    // global encoder on a permuted cloud
    const auto cloud = random_cloud(1000 + trial, 256);
    auto shuffled = cloud;
    rng.shuffle(shuffled.points);
    const auto fa = posenc::encode_global(cloud, cfg.encoder);
    const auto fb = posenc::encode_global(shuffled, cfg.encoder);
    for (size_t i = 0; i < fa.size(); ++i)
      worst = std::max(worst, std::abs(fa[i] - fb[i]) / std::max(1.0, std::abs(fa[i])));

    // local encoder on a permuted part
    implicit::QuerySignal q;
    q.query = cloud.points[trial % cloud.count()];
    auto part = implicit::make_parts(cloud, {q}, cfg.implicit_cfg.k_part)[0];
    auto permuted = part;
    std::vector<size_t> order(part.centered.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (size_t i = 0; i < order.size(); ++i) {
      permuted.centered[i] = part.centered[order[i]];
      permuted.members[i] = part.members[order[i]];
    }
    const auto za = bundle.local_encode_eval(part);
    const auto zb = bundle.local_encode_eval(permuted);
    for (size_t i = 0; i < za.size(); ++i)
      worst = std::max(worst, std::abs(za[i] - zb[i]) / std::max(1.0, std::abs(za[i])));

    // part graph on permuted node sets
    const int n_nodes = 8;
    std::vector<std::vector<double>> nodes(n_nodes, std::vector<double>(cfg.feat_dim));
    for (auto& f : nodes)
      for (double& x : f) x = rng.uniform(-1, 1);
    std::vector<size_t> norder(n_nodes);
    for (size_t i = 0; i < norder.size(); ++i) norder[i] = i;
    rng.shuffle(norder);
    const auto run_pcg = [&](const std::vector<size_t>& ord) {
      ad::Tape t;
      std::vector<ad::Value> vals;
      for (size_t i : ord) vals.push_back(t.constant({cfg.feat_dim}, nodes[i]));
      const auto out = bundle.pcg_forward(t, vals, false);
      const auto zd = t.data(out.z_pcg);
      return std::vector<double>(zd.begin(), zd.end());
    };
    std::vector<size_t> identity(n_nodes);
    for (size_t i = 0; i < identity.size(); ++i) identity[i] = i;
    const auto pa = run_pcg(identity);
    const auto pb = run_pcg(norder);
    for (size_t i = 0; i < pa.size(); ++i)
      worst = std::max(worst, std::abs(pa[i] - pb[i]) / std::max(1.0, std::abs(pa[i])));
  }

  std::ostringstream os;
  os << "50 trials/component, worst relative deviation " << worst << ", " << seconds_since(t0)
     << "s";
  detail = os.str();
  return worst < 1e-6;
}

bool criterion_selftrain_mechanics(std::string& detail) {
  bool ok = true;

  double theta = 0.8;
  for (int r = 1; r <= 5; ++r) {
    theta = selftrain::update_threshold(theta, 0.005);
    ok = ok && std::abs(theta - (0.8 + 0.005 * r)) < 1e-9;
  }
  ok = ok && std::abs(theta - 0.825) < 1e-9;

  Rng rng(16);
  for (int trial = 0; trial < 100 && ok; ++trial) {
    const int n = 16, c = 4;
    std::vector<std::vector<double>> reg(n, std::vector<double>(c)), pcg = reg;
    for (auto& row : reg)
      for (double& v : row) v = rng.uniform(-3, 3);
    for (auto& row : pcg)
      for (double& v : row) v = rng.uniform(-3, 3);
    const double th = rng.uniform(0.3, 0.9);
    const auto lo = selftrain::select_pseudo_labels(reg, pcg, th);
    const auto hi = selftrain::select_pseudo_labels(reg, pcg, std::min(0.99, th + 0.05));
    for (int i = 0; i < n; ++i)
      if (hi.selected[i] && !lo.selected[i]) ok = false;
  }

  Rng beta_rng(17);
  double mean = 0.0;
  for (int i = 0; i < 10000; ++i) mean += beta_rng.beta(2.0, 2.0);
  mean /= 10000.0;
  ok = ok && std::abs(mean - 0.5) <= 0.02;

  std::ostringstream os;
  os << "threshold 0.800..0.825 exact, selection set-monotone, beta mean " << mean;
  detail = os.str();
  return ok;
}

bool criterion_loss_bounds(std::string& detail) {
  Rng rng(18);
  bool ok = true;
  double max_mix = 0, max_sim = 0, min_cdc = 1e9, min_imp = 1e9;
  for (int trial = 0; trial < 1000 && ok; ++trial) {
    ad::Tape t;
    // contrastive
    FeatureBank bank;
    for (int b = 0; b < 6; ++b) {
      FeatureBank::Entry e;
      e.feature = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1),
                   rng.uniform(-1, 1)};
      e.label = b % 3;
      bank.entries.push_back(e);
    }
    std::vector<double> zf(8);
    for (double& v : zf) v = rng.uniform(-1, 1);
    const double cdc = t.scalar_value(losses::cdc_loss(
        t, t.constant({2, 4}, zf),
        {static_cast<int>(rng.below(3)), static_cast<int>(rng.below(3))}, bank, 0.1));
    min_cdc = std::min(min_cdc, cdc);
    ok = ok && cdc >= 0.0;

    // mixup consistency
    std::vector<double> probs(4), vl(4);
    double zp = 0, zv = 0;
    for (double& v : probs) {
      v = rng.uniform(0.01, 1.0);
      zp += v;
    }
    for (double& v : vl) {
      v = rng.uniform(0.01, 1.0);
      zv += v;
    }
    for (double& v : probs) v /= zp;
    for (double& v : vl) v /= zv;
    const double mix = t.scalar_value(losses::mix_loss(t, t.constant({4}, probs), vl));
    max_mix = std::max(max_mix, mix);
    ok = ok && mix >= 0.0 && mix <= 2.0;

    // feature alignment
    std::vector<double> za(6), zb(6);
    for (double& v : za) v = rng.uniform(-1, 1);
    for (double& v : zb) v = rng.uniform(-1, 1);
    const double sim = t.scalar_value(losses::sim_loss(t, t.constant({6}, za), zb));
    max_sim = std::max(max_sim, sim);
    ok = ok && sim >= 0.0 && sim <= 2.0;

    // implicit regression
    std::vector<implicit::QuerySignal> targets(2);
    for (auto& qsig : targets) {
      geometry::Vec3 dir{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
      qsig.direction = dir / std::max(dir.norm_l1(), 1e-9);
      qsig.distance = rng.uniform(0.0, 0.5);
    }
    std::vector<double> pred(8);
    for (double& v : pred) v = rng.uniform(-1, 1);
    const double imp =
        t.scalar_value(losses::implicit_loss(t, t.constant({2, 4}, pred), targets));
    min_imp = std::min(min_imp, imp);
    ok = ok && imp >= 0.0;
  }
  std::ostringstream os;
  os << "1000 draws each: cdc>=" << min_cdc << ", imp>=" << min_imp << ", mix<=" << max_mix
     << ", sim<=" << max_sim;
  detail = os.str();
  return ok;
}

struct BenchmarkRun {
  double source_acc = 0.0;
  double target_acc = 0.0;
};

struct SharedCaches {
  selftrain::DatasetCache src, tgt, src_test, tgt_test;
};

BenchmarkRun run_benchmark(const geometry::DomainPair& data, const SharedCaches& caches,
                           uint64_t model_seed, bool use_mix, bool use_ssl, bool use_clst) {
  models::ModelBundle bundle(desk_model_config(), model_seed);

  selftrain::TrainConfig cfg;
  cfg.weights.lambda_mix = use_mix ? 1.0 : 0.0;
  cfg.weights.lambda_imp = use_ssl ? 1.0 : 0.0;
  cfg.weights.lambda_sim = use_ssl ? 0.1 : 0.0;
  cfg.pretrain_epochs = 10;
  cfg.mix_per_batch = 4;
  cfg.st.rounds = 5;
  cfg.st.epochs_per_round = 2;
  cfg.threads = 4;
  cfg.seed = model_seed;

  selftrain::Trainer trainer(bundle, data.source_train, data.target_train, data.source_test,
                             data.target_test, cfg, {}, caches.src, caches.tgt, caches.src_test,
                             caches.tgt_test);
  trainer.pretrain();
  BenchmarkRun out;
  if (use_clst) {
    const auto metrics = trainer.run_self_training();
    out.source_acc = metrics.back().source_acc;
    out.target_acc = metrics.back().target_acc;
  } else {
    out.source_acc = trainer.evaluate_source_test();
    out.target_acc = trainer.evaluate_target_test();
  }
  return out;
}

bool criterion_end_to_end(std::string& detail) {
  const auto t0 = Clock::now();
  const uint64_t seeds[3] = {101, 202, 303};
  const auto model_cfg = desk_model_config();

  double mean_src_only = 0, mean_mix = 0, mean_ssl = 0, mean_full = 0;
  std::ostringstream os;
  for (uint64_t seed : seeds) {
    geometry::SynthConfig synth;
    synth.classes = 4;
    synth.points_per_cloud = 384;
    synth.train_per_class = 200;
    synth.test_per_class = 25;
    synth.crop_fraction = 0.3;
    synth.jitter_sigma = 0.02;
    synth.outlier_count = 20;
    synth.seed = seed;
    const auto data = geometry::generate_domain_pair(synth);

    SharedCaches caches;
    caches.src = selftrain::DatasetCache::build(data.source_train, model_cfg, seed, 0, 4);
    caches.tgt = selftrain::DatasetCache::build(data.target_train, model_cfg, seed, 1, 4);
    caches.src_test = selftrain::DatasetCache::build(data.source_test, model_cfg, seed, 2, 4);
    caches.tgt_test = selftrain::DatasetCache::build(data.target_test, model_cfg, seed, 3, 4);
    printf("  [criterion 7] seed %llu: caches ready at %.0fs\n",
           static_cast<unsigned long long>(seed), seconds_since(t0));
    fflush(stdout);

    const auto report = [&](const char* name, const BenchmarkRun& r) {
      printf("  [criterion 7] seed %llu %-8s target %.4f source %.4f (t=%.0fs)\n",
             static_cast<unsigned long long>(seed), name, r.target_acc, r.source_acc,
             seconds_since(t0));
      fflush(stdout);
    };
    const auto source_only = run_benchmark(data, caches, seed, false, false, false);
    report("src-only", source_only);
    const auto mix_only = run_benchmark(data, caches, seed, true, false, false);
    report("cdmix", mix_only);
    const auto ssl_only = run_benchmark(data, caches, seed, false, true, false);
    report("ssl", ssl_only);
    const auto full = run_benchmark(data, caches, seed, true, true, true);
    report("full", full);

    os << "\n  seed " << seed << ": src-only " << source_only.target_acc << ", cdmix "
       << mix_only.target_acc << ", ssl " << ssl_only.target_acc << ", full " << full.target_acc
       << " (source split " << full.source_acc << ")";
    mean_src_only += source_only.target_acc / 3.0;
    mean_mix += mix_only.target_acc / 3.0;
    mean_ssl += ssl_only.target_acc / 3.0;
    mean_full += full.target_acc / 3.0;
  }
  const double elapsed = seconds_since(t0);
  os << "\n  means: src-only " << mean_src_only << ", cdmix " << mean_mix << ", ssl " << mean_ssl
     << ", full " << mean_full << ", runtime " << elapsed << "s";
  detail = os.str();

  const bool gap_ok = mean_full >= mean_src_only + 0.05;
  const bool ablation_ok = mean_full >= mean_mix && mean_full >= mean_ssl;
  return gap_ok && ablation_ok && elapsed <= 1800.0;
}

bool criterion_a_distance(std::string& detail) {
  const auto t0 = Clock::now();
  const auto cfg = desk_model_config();

  const auto features_of = [&](const geometry::Dataset& ds) {
    std::vector<std::vector<double>> feats(ds.size());
    parallel_for(ds.size(), 4, [&](size_t i) {
      feats[i] = posenc::encode_global(ds.samples[i].cloud, cfg.encoder);
    });
    return feats;
  };

  double mean_same = 0, mean_shifted = 0;
  for (uint64_t seed : {401u, 402u, 403u}) {
    geometry::SynthConfig synth;
    synth.classes = 4;
    synth.points_per_cloud = 512;
    synth.train_per_class = 25;
    synth.test_per_class = 1;
    synth.seed = seed;
    const auto pair_a = geometry::generate_domain_pair(synth);
    synth.seed = seed + 1000;
    const auto pair_b = geometry::generate_domain_pair(synth);

    const auto fs_a = features_of(pair_a.source_train);
    const auto fs_b = features_of(pair_b.source_train);
    const auto ft = features_of(pair_a.target_train);
    mean_same += eval::a_distance(fs_a, fs_b, seed) / 3.0;
    mean_shifted += eval::a_distance(fs_a, ft, seed) / 3.0;
  }
  std::ostringstream os;
  os << "identical-generator mean " << mean_same << ", sim-vs-corrupted mean " << mean_shifted
     << ", " << seconds_since(t0) << "s";
  detail = os.str();
  return mean_same >= 0.8 && mean_same <= 1.2 && mean_shifted > mean_same;
}

bool criterion_determinism(std::string& detail) {
  const auto t0 = Clock::now();
  const fs::path root = fs::temp_directory_path() / "tam_acceptance_det";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string data = (root / "data").string();

  const std::vector<std::string> sets = {
      "data.points_per_cloud=256", "data.train_per_class=20", "data.test_per_class=5",
      "posenc.d0=12",              "implicit.n_query=4",      "implicit.k_part=24",
      "train.pretrain_epochs=2",   "train.rounds=2",          "train.epochs_per_round=1",
      "train.mix_per_batch=2",     "threads=4",               "seed=77",
  };
  const auto run_cmd = [&](std::vector<const char*> head) {
    for (const auto& s : sets) {
      head.push_back("--set");
      head.push_back(s.c_str());
    }
    std::vector<const char*> argv{"tam"};
    argv.insert(argv.end(), head.begin(), head.end());
    return cli::run_cli(static_cast<int>(argv.size()), argv.data());
  };

  bool ok = run_cmd({"generate-data", "--out", data.c_str()}) == 0;
  const std::string run_a = (root / "run_a").string();
  const std::string run_b = (root / "run_b").string();
  ok = ok && run_cmd({"adapt", "--data", data.c_str(), "--out", run_a.c_str()}) == 0;
  ok = ok && run_cmd({"adapt", "--data", data.c_str(), "--out", run_b.c_str()}) == 0;

  const auto slurp = [](const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
  };
  const std::string ma = slurp(fs::path(run_a) / "metrics.csv");
  const std::string mb = slurp(fs::path(run_b) / "metrics.csv");
  ok = ok && !ma.empty() && ma == mb;
  ok = ok && slurp(fs::path(run_a) / "pretrain_metrics.csv") ==
                 slurp(fs::path(run_b) / "pretrain_metrics.csv");
  ok = ok && slurp(fs::path(run_a) / "model.tamw") == slurp(fs::path(run_b) / "model.tamw");

  std::ostringstream os;
  os << "two adapt runs, metrics " << (ma == mb ? "bit-identical" : "DIFFER") << ", "
     << seconds_since(t0) << "s";
  detail = os.str();
  fs::remove_all(root);
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<Criterion> criteria = {
      {1, "gradient suite vs central finite differences", criterion_gradients},
      {2, "surface-projection oracle on plane and sphere", criterion_projection_oracle},
      {3, "positional-encoding exactness and bounds", criterion_positional_encoding},
      {4, "permutation invariance of all encoders", criterion_invariance},
      {5, "self-training mechanics", criterion_selftrain_mechanics},
      {6, "loss bounds on random inputs", criterion_loss_bounds},
      {7, "end-to-end synthetic benchmark ablation trend", criterion_end_to_end},
      {8, "a-distance sanity", criterion_a_distance},
      {9, "bit-exact determinism of adapt runs", criterion_determinism},
  };

  int only = -1;
  if (argc > 1) only = std::atoi(argv[1]);

  int failures = 0;
  for (auto& c : criteria) {
    if (only > 0 && c.index != only) continue;
    std::string detail;
    bool ok = false;
    try {
      ok = c.run(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    printf("[%s] criterion %d: %s — %s\n", ok ? "PASS" : "FAIL", c.index, c.name.c_str(),
           detail.c_str());
    fflush(stdout);
    if (!ok) ++failures;
  }
  return failures;
}
