#include "tam/models.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tam/rng.hpp"

namespace tam::models {

using ad::ParamSet;
using ad::Tape;
using ad::Value;

void ModelConfig::validate() const {
  encoder.validate();
  implicit_cfg.validate();
  if (feat_dim < 1) throw std::invalid_argument("model: feat_dim must be positive");
  if (num_classes < 2) throw std::invalid_argument("model: need at least 2 classes");
  if (graph_neighbors < 1) throw std::invalid_argument("model: graph_neighbors must be positive");
  if (edge_neighbors < 1) throw std::invalid_argument("model: edge_neighbors must be positive");
  if (implicit_cfg.k_part < edge_neighbors)
    throw std::invalid_argument("model: k_part must be at least edge_neighbors");
}

std::vector<std::vector<int>> feature_knn(const double* data, int n, int w, int k) {
  if (k < 1 || k > n) throw std::invalid_argument("feature_knn: k out of range");
  std::vector<std::vector<int>> out(n);
  std::vector<std::pair<double, int>> dist(n);
  for (int i = 0; i < n; ++i) {
    const double* xi = data + static_cast<size_t>(i) * w;
    for (int j = 0; j < n; ++j) {
      const double* xj = data + static_cast<size_t>(j) * w;
      double d = 0.0;
      for (int t = 0; t < w; ++t) {
        const double diff = xi[t] - xj[t];
        d += diff * diff;
      }
      dist[j] = {d, j};
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    out[i].reserve(k);
    for (int t = 0; t < k; ++t) out[i].push_back(dist[t].second);
  }
  return out;
}

Value max_relative_graph_conv(Tape& t, Value node_feats,
                              const std::vector<std::vector<int>>& neighbors, Value w_agg,
                              Value w_update) {
  const auto& shape = t.shape(node_feats);
  if (shape.size() != 2) throw std::invalid_argument("max_relative_graph_conv: expects [N,d]");
  const int n = shape[0];
  if (static_cast<int>(neighbors.size()) != n)
    throw std::invalid_argument("max_relative_graph_conv: neighbor list count mismatch");

  const Value projected = t.matmul(node_feats, w_agg);
  std::vector<Value> rows;
  rows.reserve(n);
  for (int i = 0; i < n; ++i) {
    std::vector<int> nbr = neighbors[i];
    if (nbr.empty()) nbr.push_back(i);  // self-loop fallback
    const Value gathered = t.gather_rows(projected, std::move(nbr));
    const Value self_row = t.row(node_feats, i);
    const Value rel = t.add(gathered, t.affine(self_row, -1.0, 0.0));
    rows.push_back(t.concat(self_row, t.colmax(rel)));
  }
  return t.matmul(t.stack_rows(rows), w_update);
}

namespace {

struct Init {
  ParamSet& ps;
  Rng& rng;

  void dense(const std::string& prefix, int in, int out, double gain = 2.0) {
    ad::Param& w = ps.create(prefix + ".w", {in, out});
    const double stddev = std::sqrt(gain / in);
    for (double& v : w.value) v = rng.normal(0.0, stddev);
    ps.create(prefix + ".b", {out});
  }

  // layers feeding a batch norm skip the bias; the norm would cancel it
  void dense_nobias_bn(const std::string& prefix, int in, int out, double gain = 2.0) {
    ad::Param& w = ps.create(prefix + ".w", {in, out});
    const double stddev = std::sqrt(gain / in);
    for (double& v : w.value) v = rng.normal(0.0, stddev);
  }

  void dense_nobias(const std::string& name, int in, int out, double gain = 2.0) {
    ad::Param& w = ps.create(name, {in, out});
    const double stddev = std::sqrt(gain / in);
    for (double& v : w.value) v = rng.normal(0.0, stddev);
  }

  void bn(const std::string& prefix, int width) {
    ad::Param& gamma = ps.create(prefix + ".gamma", {width});
    std::fill(gamma.value.begin(), gamma.value.end(), 1.0);
    ps.create(prefix + ".beta", {width});
    ps.create(prefix + ".rmean", {width}, /*trainable=*/false);
    ad::Param& rvar = ps.create(prefix + ".rvar", {width}, /*trainable=*/false);
    std::fill(rvar.value.begin(), rvar.value.end(), 1.0);
  }
};

// dense layer; the bias is optional (absent on batch-normalized layers)
Value dense_forward(Tape& t, ParamSet& ps, const std::string& prefix, Value x) {
  Value y = t.matmul(x, t.param(ps, prefix + ".w"));
  if (ps.contains(prefix + ".b")) y = t.add(y, t.param(ps, prefix + ".b"));
  return y;
}

Value bn_forward(Tape& t, ParamSet& ps, const std::string& prefix, Value x, bool training) {
  return t.batchnorm(x, t.param(ps, prefix + ".gamma"), t.param(ps, prefix + ".beta"),
                     ps.at(prefix + ".rmean"), ps.at(prefix + ".rvar"), training);
}

}  // namespace

ModelBundle::ModelBundle(ModelConfig cfg, uint64_t init_seed) : config(std::move(cfg)) {
  config.validate();
  Rng rng = Rng::stream(init_seed, {0x90de1u});
  Init init{params, rng};

  const int d1 = config.global_width();
  const int d = config.feat_dim;
  const int c = config.num_classes;

  init.dense_nobias_bn("proj.fc1", d1, config.proj_hidden);
  init.bn("proj.bn1", config.proj_hidden);
  init.dense("proj.fc2", config.proj_hidden, d, 1.0);

  init.dense_nobias_bn("cls_reg.fc1", d, config.cls_hidden_a);
  init.bn("cls_reg.bn1", config.cls_hidden_a);
  init.dense_nobias_bn("cls_reg.fc2", config.cls_hidden_a, config.cls_hidden_b);
  init.bn("cls_reg.bn2", config.cls_hidden_b);
  init.dense("cls_reg.fc3", config.cls_hidden_b, c, 1.0);

  init.dense_nobias_bn("local.ec1", 6, config.edge_hidden);
  init.bn("local.bn1", config.edge_hidden);
  init.dense_nobias_bn("local.ec2", 2 * config.edge_hidden, d);
  init.bn("local.bn2", d);

  init.dense_nobias_bn("dec.fc1", d + 3, config.dec_hidden_a);
  init.bn("dec.bn1", config.dec_hidden_a);
  init.dense_nobias_bn("dec.fc2", config.dec_hidden_a, config.dec_hidden_b);
  init.bn("dec.bn2", config.dec_hidden_b);
  init.dense("dec.fc3", config.dec_hidden_b, 4, 1.0);

  init.dense_nobias("pcg.w1", d, d);
  init.dense_nobias("pcg.w2", d, d, 1.0);
  init.dense_nobias("pcg.w3", d, d);
  init.dense_nobias("pcg.w4", d, d, 1.0);
  init.dense_nobias("pcg.wagg", d, d);
  init.dense_nobias("pcg.wupd", 2 * d, d, 1.0);

  init.dense("cls_pcg.fc1", d, config.cls_hidden_a);
  init.dense("cls_pcg.fc2", config.cls_hidden_a, config.cls_hidden_b);
  init.dense("cls_pcg.fc3", config.cls_hidden_b, c, 1.0);
}

ModelBundle::ModelBundle(ModelConfig cfg, ad::ParamSet loaded)
    : config(std::move(cfg)), params(std::move(loaded)) {
  config.validate();
  // spot-check dimensions against the architecture
  const ad::Param& proj = params.at("proj.fc1.w");
  if (proj.shape != ad::Shape{config.global_width(), config.proj_hidden})
    throw std::runtime_error("ModelBundle: checkpoint does not match configured architecture");
  const ad::Param& head = params.at("cls_pcg.fc3.w");
  if (head.shape != ad::Shape{config.cls_hidden_b, config.num_classes})
    throw std::runtime_error("ModelBundle: checkpoint class count mismatch");
}

Value ModelBundle::project_global(Tape& t, Value fg_rows, bool training) {
  Value h = dense_forward(t, params, "proj.fc1", fg_rows);
  h = t.relu(bn_forward(t, params, "proj.bn1", h, training));
  return dense_forward(t, params, "proj.fc2", h);
}

Value ModelBundle::classify_reg(Tape& t, Value z_rows, bool training) {
  Value h = dense_forward(t, params, "cls_reg.fc1", z_rows);
  h = t.relu(bn_forward(t, params, "cls_reg.bn1", h, training));
  h = dense_forward(t, params, "cls_reg.fc2", h);
  h = t.relu(bn_forward(t, params, "cls_reg.bn2", h, training));
  return dense_forward(t, params, "cls_reg.fc3", h);
}

Value ModelBundle::local_encode(Tape& t, const implicit::Part& part, bool training) {
  const int k = static_cast<int>(part.centered.size());
  const int e = config.edge_neighbors;
  if (k < e)
    throw std::invalid_argument("local_encode: part smaller than edge neighbor count");

  std::vector<double> coords;
  coords.reserve(3 * k);
  for (const auto& p : part.centered) {
    coords.push_back(p.x);
    coords.push_back(p.y);
    coords.push_back(p.z);
  }
  const Value x = t.constant({k, 3}, std::move(coords));

  const auto edge_pass = [&](Value feats, int width, const std::string& fc,
                             const std::string& bn) {
    const auto nbrs = feature_knn(t.data(feats).data(), k, width, e);
    std::vector<int> centers, flat;
    centers.reserve(static_cast<size_t>(k) * e);
    flat.reserve(static_cast<size_t>(k) * e);
    for (int i = 0; i < k; ++i)
      for (int j : nbrs[i]) {
        centers.push_back(i);
        flat.push_back(j);
      }
    const Value fc_rows = t.gather_rows(feats, std::move(centers));
    const Value fn_rows = t.gather_rows(feats, std::move(flat));
    const Value edges = t.hconcat(fc_rows, t.sub(fn_rows, fc_rows));
    Value h = dense_forward(t, params, fc, edges);
    h = t.relu(bn_forward(t, params, bn, h, training));
    return t.rowgroup_max(h, e);
  };

  const Value f1 = edge_pass(x, 3, "local.ec1", "local.bn1");
  const Value f2 = edge_pass(f1, config.edge_hidden, "local.ec2", "local.bn2");
  return t.add(t.colmax(f2), t.colmean(f2));
}

Value ModelBundle::decode_queries(Tape& t, const std::vector<Value>& part_feats,
                                  const std::vector<implicit::QuerySignal>& queries,
                                  bool training) {
  if (part_feats.empty() || part_feats.size() != queries.size())
    throw std::invalid_argument("decode_queries: feature/query count mismatch");

  std::vector<Value> rows;
  rows.reserve(part_feats.size());
  for (size_t i = 0; i < part_feats.size(); ++i) {
    const auto& q = queries[i].query;
    rows.push_back(t.concat(part_feats[i], t.constant({3}, {q.x, q.y, q.z})));
  }
  Value h = t.stack_rows(rows);
  h = dense_forward(t, params, "dec.fc1", h);
  h = t.relu(bn_forward(t, params, "dec.bn1", h, training));
  h = dense_forward(t, params, "dec.fc2", h);
  h = t.relu(bn_forward(t, params, "dec.bn2", h, training));
  return dense_forward(t, params, "dec.fc3", h);
}

ModelBundle::PcgOut ModelBundle::pcg_forward(Tape& t, const std::vector<Value>& node_feats,
                                             bool training) {
  (void)training;  // the graph block is batch-norm free
  if (node_feats.size() < 2)
    throw std::invalid_argument("pcg_forward: need at least 2 part nodes");
  const int n = static_cast<int>(node_feats.size());

  const Value z = t.stack_rows(node_feats);

  // K-NN graph over node features, excluding self
  const int k_eff = std::min(config.graph_neighbors, n - 1);
  auto nbrs = feature_knn(t.data(z).data(), n, config.feat_dim, k_eff + 1);
  for (int i = 0; i < n; ++i) {
    auto& lst = nbrs[i];
    lst.erase(std::remove(lst.begin(), lst.end(), i), lst.end());
    if (static_cast<int>(lst.size()) > k_eff) lst.resize(k_eff);
  }

  const Value projected = t.matmul(z, t.param(params, "pcg.w1"));
  const Value conv = max_relative_graph_conv(t, projected, nbrs, t.param(params, "pcg.wagg"),
                                             t.param(params, "pcg.wupd"));
  const Value f = t.add(t.matmul(t.relu(conv), t.param(params, "pcg.w2")), z);
  const Value h =
      t.add(t.matmul(t.relu(t.matmul(f, t.param(params, "pcg.w3"))), t.param(params, "pcg.w4")), f);
  const Value z_pcg = t.colmax(h);

  Value logits = t.relu(dense_forward(t, params, "cls_pcg.fc1", z_pcg));
  logits = t.relu(dense_forward(t, params, "cls_pcg.fc2", logits));
  logits = dense_forward(t, params, "cls_pcg.fc3", logits);
  return {z_pcg, logits};
}

HeadOutput ModelBundle::forward_reg(const geometry::PointCloud& cloud) {
  return forward_reg_cached(posenc::encode_global(cloud, config.encoder));
}

HeadOutput ModelBundle::forward_reg_cached(const std::vector<double>& global_feature) {
  Tape t;
  const Value fg = t.constant({1, static_cast<int>(global_feature.size())}, global_feature);
  const Value z = project_global(t, fg, /*training=*/false);
  const Value logits = classify_reg(t, z, /*training=*/false);
  const auto zd = t.data(z);
  const auto ld = t.data(logits);
  return {{zd.begin(), zd.end()}, {ld.begin(), ld.end()}};
}

HeadOutput ModelBundle::forward_pcg(const std::vector<implicit::Part>& parts) {
  Tape t;
  std::vector<Value> nodes;
  nodes.reserve(parts.size());
  for (const auto& part : parts) nodes.push_back(local_encode(t, part, /*training=*/false));
  const PcgOut out = pcg_forward(t, nodes, /*training=*/false);
  const auto zd = t.data(out.z_pcg);
  const auto ld = t.data(out.logits);
  return {{zd.begin(), zd.end()}, {ld.begin(), ld.end()}};
}

std::vector<double> ModelBundle::local_encode_eval(const implicit::Part& part) {
  Tape t;
  const Value z = local_encode(t, part, /*training=*/false);
  const auto zd = t.data(z);
  return {zd.begin(), zd.end()};
}

std::vector<double> ModelBundle::decode_implicit_eval(const std::vector<double>& part_feat,
                                                      const geometry::Vec3& query) {
  Tape t;
  const Value zc = t.constant({static_cast<int>(part_feat.size())}, part_feat);
  implicit::QuerySignal q;
  q.query = query;
  const Value out = decode_queries(t, {zc}, {q}, /*training=*/false);
  const auto od = t.data(out);
  return {od.begin(), od.end()};
}

}  // namespace tam::models
