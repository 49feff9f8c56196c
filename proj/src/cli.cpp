#include "tam/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tam/config.hpp"
#include "tam/diagnostics.hpp"
#include "tam/eval.hpp"
#include "tam/geometry.hpp"
#include "tam/parallel.hpp"
#include "tam/selftrain.hpp"

namespace tam::cli {

namespace fs = std::filesystem;
using config::ConfigError;
using config::RunConfig;

namespace {

std::string fmt(double v) {
  char buf[40];
  snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key=value configuration file");
    cmd->add_option("--set", overrides, "override a single key, e.g. --set train.batch=8");
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_path.empty()) cfg.load_file(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    cfg.apply_env();
    cfg.validate();
    return cfg;
  }
};

void prepare_run_dir(const fs::path& dir) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir) || !fs::is_empty(dir))
      throw ConfigError("output path exists and is not empty: " + dir.string());
  } else {
    fs::create_directories(dir);
  }
}

void write_config_snapshot(const RunConfig& cfg, const fs::path& dir) {
  std::ofstream os(dir / "config.cfg");
  os << cfg.serialized();
  if (!os) throw std::runtime_error("failed to write config snapshot");
}

struct LoadedData {
  geometry::Dataset source_train, target_train, source_test, target_test;
};

LoadedData load_data(const fs::path& dir) {
  LoadedData d;
  d.source_train = geometry::read_dataset(dir / "source_train.labels");
  d.target_train = geometry::read_dataset(dir / "target_train.labels");
  d.source_test = geometry::read_dataset(dir / "source_test.labels");
  d.target_test = geometry::read_dataset(dir / "target_test.labels");
  const int c = d.source_train.num_classes;
  d.target_train.num_classes = std::max(d.target_train.num_classes, c);
  d.source_test.num_classes = std::max(d.source_test.num_classes, c);
  d.target_test.num_classes = std::max(d.target_test.num_classes, c);
  return d;
}

const geometry::Dataset& pick_split(const LoadedData& d, const std::string& name) {
  if (name == "source_train") return d.source_train;
  if (name == "target_train") return d.target_train;
  if (name == "source_test") return d.source_test;
  if (name == "target_test") return d.target_test;
  throw ConfigError("unknown split '" + name + "'");
}

constexpr const char* kMetricsHeader =
    "round,theta,selected_count,source_acc,target_acc,"
    "loss_cls_s,loss_cls_t,loss_cdc,loss_imp,loss_mix,loss_sim\n";

constexpr const char* kPretrainHeader =
    "epoch,loss_cls_s,loss_cls_t,loss_cdc,loss_imp,loss_mix,loss_sim\n";

void write_round_row(std::ostream& os, const selftrain::RoundMetrics& rm) {
  const auto& l = rm.losses;
  os << rm.round << ',' << fmt(rm.theta) << ',' << rm.selected_count << ','
     << fmt(rm.source_acc) << ',' << fmt(rm.target_acc) << ',' << fmt(l.cls_s) << ','
     << fmt(l.cls_t) << ',' << fmt(l.cdc) << ',' << fmt(l.imp) << ',' << fmt(l.mix) << ','
     << fmt(l.sim) << '\n';
}

RunConfig config_for_model(const CommonOpts& opts, const std::string& model_path) {
  CommonOpts effective = opts;
  if (effective.config_path.empty()) {
    const fs::path sibling = fs::path(model_path).parent_path() / "config.cfg";
    if (fs::exists(sibling)) effective.config_path = sibling.string();
  }
  return effective.resolve();
}

int cmd_generate_data(const CommonOpts& opts, const std::string& out) {
  const RunConfig cfg = opts.resolve();
  const auto pair = geometry::generate_domain_pair(cfg.synth_config());
  prepare_run_dir(out);
  write_config_snapshot(cfg, out);
  geometry::write_dataset(pair.source_train, out, "source_train");
  geometry::write_dataset(pair.source_test, out, "source_test");
  geometry::write_dataset(pair.target_train, out, "target_train");
  geometry::write_dataset(pair.target_test, out, "target_test");
  std::cout << "wrote " << pair.source_train.size() + pair.source_test.size() << " source and "
            << pair.target_train.size() + pair.target_test.size() << " target samples to " << out
            << "\n";
  return 0;
}

int run_training(const CommonOpts& opts, const std::string& data_dir, const std::string& out,
                 bool with_self_training) {
  const RunConfig cfg = opts.resolve();
  const LoadedData data = load_data(data_dir);
  prepare_run_dir(out);
  write_config_snapshot(cfg, out);

  models::ModelBundle bundle(cfg.model_config(), cfg.seed);

  std::ofstream pretrain_csv(fs::path(out) / "pretrain_metrics.csv");
  pretrain_csv << kPretrainHeader;
  std::ofstream metrics_csv;
  if (with_self_training) {
    metrics_csv.open(fs::path(out) / "metrics.csv");
    metrics_csv << kMetricsHeader;
  }

  selftrain::Trainer::Callbacks cb;
  cb.log = &std::cerr;
  cb.on_pretrain_epoch = [&](int epoch, const selftrain::EpochStats& s) {
    pretrain_csv << epoch << ',' << fmt(s.cls_s) << ',' << fmt(s.cls_t) << ',' << fmt(s.cdc) << ','
                 << fmt(s.imp) << ',' << fmt(s.mix) << ',' << fmt(s.sim) << '\n';
    pretrain_csv.flush();
  };
  if (with_self_training)
    cb.on_round = [&](const selftrain::RoundMetrics& rm) {
      write_round_row(metrics_csv, rm);
      metrics_csv.flush();
    };

  selftrain::Trainer trainer(bundle, data.source_train, data.target_train, data.source_test,
                             data.target_test, cfg.train_config(), cb);
  trainer.pretrain();
  if (with_self_training) {
    trainer.run_self_training();
  } else {
    bundle.params.quantize_f32();
  }

  ad::save_checkpoint(bundle.params, fs::path(out) / "model.tamw");
  const double src_acc = trainer.evaluate_source_test();
  const double tgt_acc = trainer.evaluate_target_test();
  std::cout << "source_test_accuracy=" << fmt(src_acc) << "\n"
            << "target_test_accuracy=" << fmt(tgt_acc) << "\n"
            << "checkpoint=" << (fs::path(out) / "model.tamw").string() << "\n";
  return 0;
}

int cmd_eval(const CommonOpts& opts, const std::string& model_path, const std::string& data_dir,
             const std::string& split, const std::string& out_csv) {
  RunConfig cfg = config_for_model(opts, model_path);
  models::ModelBundle bundle(cfg.model_config(), ad::load_checkpoint(model_path));

  const LoadedData data = load_data(data_dir);
  const geometry::Dataset& ds = pick_split(data, split);
  const auto cache = selftrain::DatasetCache::build(ds, bundle.config, cfg.seed,
                                                    config::split_tag(split), cfg.threads);

  std::vector<int> labels(ds.size());
  std::vector<std::pair<std::vector<double>, std::vector<double>>> logits(ds.size());
  parallel_for(ds.size(), cfg.threads, [&](size_t i) {
    labels[i] = ds.samples[i].label;
    logits[i] = {bundle.forward_reg_cached(cache.samples[i].global_feature).logits,
                 bundle.forward_pcg(cache.samples[i].parts).logits};
  });
  const auto report =
      eval::evaluate_with([&](size_t i) { return logits[i]; }, labels, ds.num_classes, 1);

  std::cout << "split=" << split << "\naccuracy=" << fmt(report.accuracy)
            << "\nmean_nll=" << fmt(report.mean_nll) << "\n";
  for (size_t c = 0; c < report.per_class_accuracy.size(); ++c)
    std::cout << "class_" << c << "_accuracy=" << fmt(report.per_class_accuracy[c]) << "\n";

  if (!out_csv.empty()) {
    std::ofstream os(out_csv);
    os << "accuracy," << fmt(report.accuracy) << "\nmean_nll," << fmt(report.mean_nll) << '\n';
    for (size_t c = 0; c < report.per_class_accuracy.size(); ++c)
      os << "class_accuracy," << c << ',' << fmt(report.per_class_accuracy[c]) << '\n';
    for (size_t i = 0; i < report.confusion.size(); ++i)
      for (size_t j = 0; j < report.confusion[i].size(); ++j)
        os << "confusion," << i << ',' << j << ',' << report.confusion[i][j] << '\n';
    if (!os) throw std::runtime_error("failed to write " + out_csv);
  }
  return 0;
}

std::vector<std::vector<double>> split_features(const geometry::Dataset& ds,
                                                models::ModelBundle* bundle,
                                                const models::ModelConfig& mcfg, int threads) {
  std::vector<std::vector<double>> feats(ds.size());
  parallel_for(ds.size(), threads, [&](size_t i) {
    auto fg = posenc::encode_global(ds.samples[i].cloud, mcfg.encoder);
    feats[i] = bundle ? bundle->forward_reg_cached(fg).feature : std::move(fg);
  });
  return feats;
}

int cmd_a_distance(const CommonOpts& opts, const std::string& data_dir,
                   const std::string& model_path) {
  RunConfig cfg = model_path.empty() ? opts.resolve() : config_for_model(opts, model_path);
  const LoadedData data = load_data(data_dir);

  std::optional<models::ModelBundle> bundle;
  if (!model_path.empty())
    bundle.emplace(cfg.model_config(), ad::load_checkpoint(model_path));

  const auto fs_src = split_features(data.source_train, bundle ? &*bundle : nullptr,
                                     cfg.model_config(), cfg.threads);
  const auto fs_tgt = split_features(data.target_train, bundle ? &*bundle : nullptr,
                                     cfg.model_config(), cfg.threads);
  const double dist = eval::a_distance(fs_src, fs_tgt, cfg.seed);
  std::cout << "a_distance=" << fmt(dist) << "\n";
  return 0;
}

int cmd_export_features(const CommonOpts& opts, const std::string& model_path,
                        const std::string& data_dir, const std::string& split,
                        const std::string& out_csv) {
  RunConfig cfg = config_for_model(opts, model_path);
  models::ModelBundle bundle(cfg.model_config(), ad::load_checkpoint(model_path));
  const LoadedData data = load_data(data_dir);
  const geometry::Dataset& ds = pick_split(data, split);

  std::vector<std::vector<double>> feats(ds.size());
  parallel_for(ds.size(), cfg.threads, [&](size_t i) {
    feats[i] = bundle.forward_reg(ds.samples[i].cloud).feature;
  });

  std::ofstream os(out_csv);
  os << "index,label,domain";
  for (int j = 0; j < bundle.config.feat_dim; ++j) os << ",f" << j;
  os << '\n';
  for (size_t i = 0; i < ds.size(); ++i) {
    os << i << ',' << ds.samples[i].label << ',' << geometry::domain_tag(ds.samples[i].domain);
    for (double v : feats[i]) os << ',' << fmt(v);
    os << '\n';
  }
  if (!os) throw std::runtime_error("failed to write " + out_csv);
  std::cout << "wrote " << ds.size() << " feature rows to " << out_csv << "\n";
  return 0;
}

int cmd_grad_check() {
  const auto entries = diagnostics::run_gradient_suite();
  bool ok = true;
  for (const auto& e : entries) {
    const bool pass = e.max_error < 1e-4;
    ok = ok && pass;
    std::cout << (pass ? "[PASS] " : "[FAIL] ") << e.name << " max_rel_error=" << fmt(e.max_error)
              << " (" << e.instances << " instances)\n";
  }
  if (!ok) throw std::runtime_error("gradient suite exceeded the 1e-4 tolerance");
  std::cout << "all gradients within 1e-4\n";
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Topology-aware point cloud domain adaptation toolkit"};
  app.require_subcommand(1);

  CommonOpts gen_opts, pre_opts, adapt_opts, eval_opts, ad_opts, exp_opts;
  std::string gen_out, pre_data, pre_out, adapt_data, adapt_out;
  std::string eval_model, eval_data, eval_split = "target_test", eval_out;
  std::string ad_data, ad_model;
  std::string exp_model, exp_data, exp_split = "target_test", exp_out;

  auto* gen = app.add_subcommand("generate-data", "generate the synthetic source/target benchmark");
  gen_opts.attach(gen);
  gen->add_option("--out", gen_out, "output dataset directory")->required();

  auto* pre = app.add_subcommand("pretrain", "supervised + self-supervised pretraining");
  pre_opts.attach(pre);
  pre->add_option("--data", pre_data, "dataset directory")->required();
  pre->add_option("--out", pre_out, "run output directory")->required();

  auto* adapt = app.add_subcommand("adapt", "full pipeline: pretraining plus self-training");
  adapt_opts.attach(adapt);
  adapt->add_option("--data", adapt_data, "dataset directory")->required();
  adapt->add_option("--out", adapt_out, "run output directory")->required();

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  eval_opts.attach(ev);
  ev->add_option("--model", eval_model, "checkpoint file")->required();
  ev->add_option("--data", eval_data, "dataset directory")->required();
  ev->add_option("--split", eval_split, "split name (default target_test)");
  ev->add_option("--out", eval_out, "optional report CSV path");

  auto* ad_cmd = app.add_subcommand("a-distance", "domain discrepancy of train-split features");
  ad_opts.attach(ad_cmd);
  ad_cmd->add_option("--data", ad_data, "dataset directory")->required();
  ad_cmd->add_option("--model", ad_model, "optional checkpoint; raw global features otherwise");

  auto* exp = app.add_subcommand("export-features", "write per-sample feature vectors as CSV");
  exp_opts.attach(exp);
  exp->add_option("--model", exp_model, "checkpoint file")->required();
  exp->add_option("--data", exp_data, "dataset directory")->required();
  exp->add_option("--split", exp_split, "split name (default target_test)");
  exp->add_option("--out", exp_out, "output CSV path")->required();

  app.add_subcommand("grad-check", "finite-difference verification of kernels and losses");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_generate_data(gen_opts, gen_out);
    if (pre->parsed()) return run_training(pre_opts, pre_data, pre_out, false);
    if (adapt->parsed()) return run_training(adapt_opts, adapt_data, adapt_out, true);
    if (ev->parsed()) return cmd_eval(eval_opts, eval_model, eval_data, eval_split, eval_out);
    if (ad_cmd->parsed()) return cmd_a_distance(ad_opts, ad_data, ad_model);
    if (exp->parsed()) return cmd_export_features(exp_opts, exp_model, exp_data, exp_split, exp_out);
    return cmd_grad_check();
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const geometry::FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace tam::cli
