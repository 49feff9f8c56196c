#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "tam/geometry.hpp"
#include "tam/models.hpp"
#include "tam/selftrain.hpp"

namespace tam::config {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Flat run configuration: UTF-8 `key=value` lines, `#` comments, unknown
/// keys rejected. The TAM_SEED environment variable overrides `seed`.
struct RunConfig {
  uint64_t seed = 1;
  int threads = 4;

  // synthetic benchmark
  int data_classes = 4;
  int data_points = 1024;
  int data_train_per_class = 200;
  int data_test_per_class = 50;
  double data_crop_fraction = 0.3;
  double data_jitter_sigma = 0.02;
  int data_outliers = 16;

  // global encoder
  int posenc_d0 = 36;
  double posenc_alpha = 100.0;
  double posenc_beta = 500.0;
  double posenc_stage_ratio = 0.5;
  int posenc_stage_k = 16;

  // implicit field
  int implicit_grid = 12;
  double implicit_band_lo = 0.02;
  double implicit_band_hi = 0.12;
  int implicit_tri_points = 10;
  int implicit_n_query = 16;
  int implicit_k_part = 64;

  // model dims
  int model_feat_dim = 64;
  int model_graph_k = 4;
  int model_edge_k = 8;
  int model_proj_hidden = 128;
  int model_cls_hidden_a = 32;
  int model_cls_hidden_b = 16;
  int model_edge_hidden = 24;

  // losses
  double loss_lambda_t = 1.0;
  double loss_lambda_cdc = 1.0;
  double loss_lambda_imp = 1.0;
  double loss_lambda_mix = 1.0;
  double loss_lambda_sim = 0.1;
  double loss_kappa = 2.0;
  double loss_tau = 0.1;

  // training
  int train_pretrain_epochs = 50;
  int train_rounds = 5;
  int train_epochs_per_round = 10;
  double train_theta0 = 0.8;
  double train_theta_step = 0.005;
  int train_batch = 16;
  double train_lr = 1e-3;
  double train_lr_implicit = 1e-4;
  int train_mix_per_batch = 4;

  void set(const std::string& key, const std::string& value);
  void load_file(const std::filesystem::path& path);
  void apply_env();
  std::string serialized() const;
  void validate() const;

  geometry::SynthConfig synth_config() const;
  models::ModelConfig model_config() const;
  selftrain::TrainConfig train_config() const;
};

/// Dataset split tags; they key the per-sample query-sampling streams so a
/// later `eval` reproduces the exact signals a training run used.
namespace split_tags {
constexpr uint64_t source_train = 0;
constexpr uint64_t target_train = 1;
constexpr uint64_t source_test = 2;
constexpr uint64_t target_test = 3;
}  // namespace split_tags

uint64_t split_tag(const std::string& split_name);

}  // namespace tam::config
