#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tam/autodiff.hpp"
#include "tam/geometry.hpp"
#include "tam/implicit.hpp"
#include "tam/posenc.hpp"

namespace tam::models {

struct ModelConfig {
  posenc::PosEncConfig encoder;      // non-parametric global encoder
  implicit::ImplicitConfig implicit_cfg;
  int feat_dim = 64;       // d: projected / local / graph node width
  int num_classes = 4;
  int graph_neighbors = 4; // K-NN over part-graph nodes
  int edge_neighbors = 8;  // neighbors per point in the edge convolutions
  int proj_hidden = 128;
  int cls_hidden_a = 32;
  int cls_hidden_b = 16;
  int edge_hidden = 24;    // width after the first edge convolution
  int dec_hidden_a = 64;
  int dec_hidden_b = 32;

  int global_width() const { return encoder.global_width(); }
  void validate() const;
};

struct HeadOutput {
  std::vector<double> feature;  // d-vector
  std::vector<double> logits;   // C-vector, un-normalized
};

/// K nearest rows (L2, self included, ties by lowest index) for each row of
/// a row-major [n, w] feature matrix.
std::vector<std::vector<int>> feature_knn(const double* data, int n, int w, int k);

/// Max-relative graph convolution: every node keeps its own feature and the
/// elementwise max of (neighbor * w_agg - self) over its neighbor list, then
/// maps the concatenation through w_update. Empty neighbor lists fall back
/// to a self-loop.
ad::Value max_relative_graph_conv(ad::Tape& t, ad::Value node_feats,
                                  const std::vector<std::vector<int>>& neighbors,
                                  ad::Value w_agg, ad::Value w_update);

/// All trainable state: projector + classifier over the global feature,
/// the local edge-convolution encoder, the implicit decoder, and the
/// part-graph aggregation weights with its own classifier.
class ModelBundle {
 public:
  ModelBundle(ModelConfig cfg, uint64_t init_seed);
  ModelBundle(ModelConfig cfg, ad::ParamSet params);  // e.g. from a checkpoint

  ModelConfig config;
  ad::ParamSet params;

  // ---- training-graph builders ----
  ad::Value project_global(ad::Tape& t, ad::Value fg_rows, bool training);  // [B,d1] -> [B,d]
  ad::Value classify_reg(ad::Tape& t, ad::Value z_rows, bool training);     // [B,d] -> [B,C]
  ad::Value local_encode(ad::Tape& t, const implicit::Part& part, bool training);  // -> [d]
  ad::Value decode_queries(ad::Tape& t, const std::vector<ad::Value>& part_feats,
                           const std::vector<implicit::QuerySignal>& queries, bool training);
  struct PcgOut {
    ad::Value z_pcg;   // [d]
    ad::Value logits;  // [C]
  };
  PcgOut pcg_forward(ad::Tape& t, const std::vector<ad::Value>& node_feats, bool training);

  // ---- evaluation-mode conveniences (frozen batch-norm statistics) ----
  HeadOutput forward_reg(const geometry::PointCloud& cloud);
  HeadOutput forward_reg_cached(const std::vector<double>& global_feature);
  HeadOutput forward_pcg(const std::vector<implicit::Part>& parts);
  std::vector<double> local_encode_eval(const implicit::Part& part);
  std::vector<double> decode_implicit_eval(const std::vector<double>& part_feat,
                                           const geometry::Vec3& query);
};

}  // namespace tam::models
