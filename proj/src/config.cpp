#include "tam/config.hpp"

#include <cstddef>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <vector>

namespace tam::config {

namespace {

enum class Kind { u64, i32, f64 };

struct Binding {
  const char* key;
  Kind kind;
  size_t offset;
};

#define TAM_FIELD(name, kind, member) {name, kind, offsetof(RunConfig, member)}

const std::vector<Binding>& bindings() {
  static const std::vector<Binding> table = {
      TAM_FIELD("seed", Kind::u64, seed),
      TAM_FIELD("threads", Kind::i32, threads),
      TAM_FIELD("data.classes", Kind::i32, data_classes),
      TAM_FIELD("data.points_per_cloud", Kind::i32, data_points),
      TAM_FIELD("data.train_per_class", Kind::i32, data_train_per_class),
      TAM_FIELD("data.test_per_class", Kind::i32, data_test_per_class),
      TAM_FIELD("data.crop_fraction", Kind::f64, data_crop_fraction),
      TAM_FIELD("data.jitter_sigma", Kind::f64, data_jitter_sigma),
      TAM_FIELD("data.outlier_count", Kind::i32, data_outliers),
      TAM_FIELD("posenc.d0", Kind::i32, posenc_d0),
      TAM_FIELD("posenc.alpha", Kind::f64, posenc_alpha),
      TAM_FIELD("posenc.beta", Kind::f64, posenc_beta),
      TAM_FIELD("posenc.stage_ratio", Kind::f64, posenc_stage_ratio),
      TAM_FIELD("posenc.stage_k", Kind::i32, posenc_stage_k),
      TAM_FIELD("implicit.grid", Kind::i32, implicit_grid),
      TAM_FIELD("implicit.band_lo", Kind::f64, implicit_band_lo),
      TAM_FIELD("implicit.band_hi", Kind::f64, implicit_band_hi),
      TAM_FIELD("implicit.tri_points", Kind::i32, implicit_tri_points),
      TAM_FIELD("implicit.n_query", Kind::i32, implicit_n_query),
      TAM_FIELD("implicit.k_part", Kind::i32, implicit_k_part),
      TAM_FIELD("model.feat_dim", Kind::i32, model_feat_dim),
      TAM_FIELD("model.graph_k", Kind::i32, model_graph_k),
      TAM_FIELD("model.edge_k", Kind::i32, model_edge_k),
      TAM_FIELD("model.proj_hidden", Kind::i32, model_proj_hidden),
      TAM_FIELD("model.cls_hidden_a", Kind::i32, model_cls_hidden_a),
      TAM_FIELD("model.cls_hidden_b", Kind::i32, model_cls_hidden_b),
      TAM_FIELD("model.edge_hidden", Kind::i32, model_edge_hidden),
      TAM_FIELD("loss.lambda_t", Kind::f64, loss_lambda_t),
      TAM_FIELD("loss.lambda_cdc", Kind::f64, loss_lambda_cdc),
      TAM_FIELD("loss.lambda_imp", Kind::f64, loss_lambda_imp),
      TAM_FIELD("loss.lambda_mix", Kind::f64, loss_lambda_mix),
      TAM_FIELD("loss.lambda_sim", Kind::f64, loss_lambda_sim),
      TAM_FIELD("loss.kappa", Kind::f64, loss_kappa),
      TAM_FIELD("loss.tau", Kind::f64, loss_tau),
      TAM_FIELD("train.pretrain_epochs", Kind::i32, train_pretrain_epochs),
      TAM_FIELD("train.rounds", Kind::i32, train_rounds),
      TAM_FIELD("train.epochs_per_round", Kind::i32, train_epochs_per_round),
      TAM_FIELD("train.theta0", Kind::f64, train_theta0),
      TAM_FIELD("train.theta_step", Kind::f64, train_theta_step),
      TAM_FIELD("train.batch", Kind::i32, train_batch),
      TAM_FIELD("train.lr", Kind::f64, train_lr),
      TAM_FIELD("train.lr_implicit", Kind::f64, train_lr_implicit),
      TAM_FIELD("train.mix_per_batch", Kind::i32, train_mix_per_batch),
  };
  return table;
}

#undef TAM_FIELD

std::string format_value(const RunConfig& cfg, const Binding& b) {
  const char* base = reinterpret_cast<const char*>(&cfg);
  char buf[64];
  switch (b.kind) {
    case Kind::u64:
      snprintf(buf, sizeof buf, "%llu",
               static_cast<unsigned long long>(*reinterpret_cast<const uint64_t*>(base + b.offset)));
      break;
    case Kind::i32:
      snprintf(buf, sizeof buf, "%d", *reinterpret_cast<const int*>(base + b.offset));
      break;
    case Kind::f64:
      snprintf(buf, sizeof buf, "%.17g", *reinterpret_cast<const double*>(base + b.offset));
      break;
  }
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  char* base = reinterpret_cast<char*>(this);
  for (const auto& b : bindings()) {
    if (key != b.key) continue;
    try {
      size_t used = 0;
      switch (b.kind) {
        case Kind::u64:
          *reinterpret_cast<uint64_t*>(base + b.offset) = std::stoull(value, &used);
          break;
        case Kind::i32:
          *reinterpret_cast<int*>(base + b.offset) = std::stoi(value, &used);
          break;
        case Kind::f64:
          *reinterpret_cast<double*>(base + b.offset) = std::stod(value, &used);
          break;
      }
      if (used != value.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ConfigError("config: bad value for " + key + ": '" + value + "'");
    }
    return;
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: malformed line " + std::to_string(lineno) + " in " +
                        path.string());
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void RunConfig::apply_env() {
  if (const char* env = std::getenv("TAM_SEED")) set("seed", env);
}

std::string RunConfig::serialized() const {
  std::ostringstream os;
  for (const auto& b : bindings()) os << b.key << '=' << format_value(*this, b) << '\n';
  return os.str();
}

void RunConfig::validate() const {
  synth_config().validate();
  model_config().validate();
  train_config().st.validate();
  train_config().weights.validate();
  if (threads < 1) throw ConfigError("config: threads must be >= 1");
  if (train_pretrain_epochs < 0) throw ConfigError("config: pretrain epochs must be >= 0");
  if (train_mix_per_batch < 0) throw ConfigError("config: mix_per_batch must be >= 0");
  if (train_lr <= 0 || train_lr_implicit <= 0) throw ConfigError("config: learning rates must be positive");
}

geometry::SynthConfig RunConfig::synth_config() const {
  geometry::SynthConfig s;
  s.classes = data_classes;
  s.points_per_cloud = data_points;
  s.train_per_class = data_train_per_class;
  s.test_per_class = data_test_per_class;
  s.crop_fraction = data_crop_fraction;
  s.jitter_sigma = data_jitter_sigma;
  s.outlier_count = data_outliers;
  s.seed = seed;
  return s;
}

models::ModelConfig RunConfig::model_config() const {
  models::ModelConfig m;
  m.encoder.d0 = posenc_d0;
  m.encoder.alpha = posenc_alpha;
  m.encoder.beta = posenc_beta;
  for (auto& stage : m.encoder.stages) {
    stage.downsample_ratio = posenc_stage_ratio;
    stage.neighbors = posenc_stage_k;
  }
  m.implicit_cfg.grid_resolution = implicit_grid;
  m.implicit_cfg.band_lo = implicit_band_lo;
  m.implicit_cfg.band_hi = implicit_band_hi;
  m.implicit_cfg.triangle_points = implicit_tri_points;
  m.implicit_cfg.n_query = implicit_n_query;
  m.implicit_cfg.k_part = implicit_k_part;
  m.feat_dim = model_feat_dim;
  m.num_classes = data_classes;
  m.graph_neighbors = model_graph_k;
  m.edge_neighbors = model_edge_k;
  m.proj_hidden = model_proj_hidden;
  m.cls_hidden_a = model_cls_hidden_a;
  m.cls_hidden_b = model_cls_hidden_b;
  m.edge_hidden = model_edge_hidden;
  return m;
}

selftrain::TrainConfig RunConfig::train_config() const {
  selftrain::TrainConfig t;
  t.weights.lambda_t = loss_lambda_t;
  t.weights.lambda_cdc = loss_lambda_cdc;
  t.weights.lambda_imp = loss_lambda_imp;
  t.weights.lambda_mix = loss_lambda_mix;
  t.weights.lambda_sim = loss_lambda_sim;
  t.st.rounds = train_rounds;
  t.st.epochs_per_round = train_epochs_per_round;
  t.st.theta0 = train_theta0;
  t.st.theta_step = train_theta_step;
  t.st.batch_size = train_batch;
  t.kappa = loss_kappa;
  t.tau = loss_tau;
  t.pretrain_epochs = train_pretrain_epochs;
  t.mix_per_batch = train_mix_per_batch;
  t.lr_semantic = train_lr;
  t.lr_implicit = train_lr_implicit;
  t.threads = threads;
  t.seed = seed;
  return t;
}

uint64_t split_tag(const std::string& split_name) {
  if (split_name == "source_train") return split_tags::source_train;
  if (split_name == "target_train") return split_tags::target_train;
  if (split_name == "source_test") return split_tags::source_test;
  if (split_name == "target_test") return split_tags::target_test;
  throw ConfigError("unknown split '" + split_name + "'");
}

}  // namespace tam::config
