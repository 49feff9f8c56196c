#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace tam::ad {

/// Tensor shape; empty = scalar, {n} = vector, {r, c} = matrix.
using Shape = std::vector<int>;

inline size_t numel(const Shape& s) {
  size_t n = 1;
  for (int d : s) n *= static_cast<size_t>(d);
  return n;
}

struct Param {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool trainable = true;
};

/// Named map of parameter leaves. Iteration order is lexicographic by name,
/// which keeps checkpoints, optimizer sweeps and gradient merges
/// deterministic.
class ParamSet {
 public:
  Param& create(const std::string& name, Shape shape, bool trainable = true);
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  void zero_grad();
  size_t size() const { return params_.size(); }

  std::map<std::string, Param>& entries() { return params_; }
  const std::map<std::string, Param>& entries() const { return params_; }

  /// Adds collected per-tape gradients into the grad buffers.
  void accumulate(const std::vector<std::pair<std::string, std::vector<double>>>& grads);

  /// Rounds every value through f32, the checkpoint precision; after this,
  /// a save/load round-trip reproduces the parameters bit-exactly.
  void quantize_f32();

 private:
  std::map<std::string, Param> params_;
};

struct Value {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// A queued batch-norm running-stat update. Updates are recorded during
/// training-mode forwards and applied explicitly so that parallel tapes can
/// commit them in a deterministic order.
struct BnPending {
  Param* mean;
  Param* var;
  std::vector<double> batch_mean, batch_var;
  double momentum;
};

void apply_bn_update(const BnPending& u);

/// Recorded computation graph. Forward values are computed eagerly as ops
/// are pushed; backward() runs the tape in reverse, accumulating exact
/// analytic gradients. One tape is confined to one logical thread.
class Tape {
 public:
  // ---- leaves ----
  Value constant(Shape shape, std::vector<double> data);
  Value constant_scalar(double v);
  Value param(ParamSet& ps, const std::string& name);

  // ---- elementwise / linear ----
  Value add(Value a, Value b);  // same shape, [r,c]+[c], or scalar broadcast
  Value sub(Value a, Value b);
  Value mul(Value a, Value b);  // same shape or scalar broadcast
  Value mul_colvec(Value a, Value v);  // [r,c] scaled per-row by v[r]
  Value affine(Value a, double k, double b);  // k*a + b elementwise
  Value matmul(Value a, Value b);
  Value relu(Value a);
  Value exp_(Value a);
  Value log_(Value a);  // throws std::domain_error on non-positive input
  Value sqrt_(Value a);
  Value reciprocal(Value a);
  Value clamp_min(Value a, double lo);
  Value softmax(Value a);  // vector, or row-wise on a matrix

  // ---- reductions ----
  Value sum(Value a);
  Value mean(Value a);
  Value reduce_max(Value a);  // gradient routed to the lowest-index argmax
  Value colmax(Value a);      // [r,c] -> [c]
  Value colmean(Value a);     // [r,c] -> [c]
  Value rowsum(Value a);      // [r,c] -> [r]
  Value rowgroup_max(Value a, int group_size);  // [g*k,c] -> [g,c]

  // ---- structure ----
  Value concat(Value a, Value b);   // vectors
  Value hconcat(Value a, Value b);  // matrices, same row count
  Value stack_rows(const std::vector<Value>& rows);
  Value gather_rows(Value a, std::vector<int> idx);
  Value row(Value a, int r);

  // ---- geometry-ish ----
  Value dot(Value a, Value b);
  Value l2norm(Value a);
  Value cosine(Value a, Value b);  // clamped-norm cosine similarity

  /// Per-feature batch normalization over matrix rows. Training mode uses
  /// batch statistics and queues a running-stat update (commit_bn_updates);
  /// eval mode normalizes with the frozen running statistics.
  Value batchnorm(Value x, Value gamma, Value beta, Param& running_mean, Param& running_var,
                  bool training, double momentum = 0.9, double eps = 1e-5);

  // ---- access ----
  const Shape& shape(Value v) const;
  std::span<const double> data(Value v) const;
  std::span<const double> grad(Value v) const;
  double scalar_value(Value v) const;
  size_t node_count() const { return nodes_.size(); }

  /// Reverse pass from a scalar root. Gradients are left on the tape;
  /// use collect_grads / scatter_grads to move them into parameters.
  void backward(Value root);

  /// Parameter gradients of this tape, aggregated per name, name-sorted.
  std::vector<std::pair<std::string, std::vector<double>>> collect_grads() const;

  /// backward + accumulate into the ParamSet the leaves were bound to.
  void scatter_grads(ParamSet& ps) const { ps.accumulate(collect_grads()); }

  /// Applies queued batch-norm running-stat updates in recording order.
  void commit_bn_updates();
  /// Hands the queued updates to the caller (e.g. for ordered cross-tape
  /// application) and clears the queue.
  std::vector<BnPending> take_bn_updates();
  size_t pending_bn_updates() const { return bn_updates_.size(); }

 private:
  struct Node {
    Shape shape;
    std::vector<double> x;
    std::vector<double> g;
    std::function<void(Tape&)> back;  // may be empty (leaf / constant)
    bool needs_grad = false;
    std::string bound_param;  // non-empty for trainable-parameter leaves
  };

  Node& node(Value v) { return nodes_[v.id]; }
  const Node& node(Value v) const { return nodes_[v.id]; }
  Value push(Shape shape, std::vector<double> x, bool needs,
             std::function<void(Tape&)> back = nullptr);
  std::vector<double>& grad_buf(int id);

  std::deque<Node> nodes_;
  std::vector<BnPending> bn_updates_;
};

// ---- optimization ----

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with per-parameter moment state. Parameters whose gradient contains
/// a non-finite entry are skipped for that step and counted.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  int step(ParamSet& ps, double lr);
  int step(ParamSet& ps, double lr, const std::function<bool(const std::string&)>& filter);

 private:
  struct Moments {
    std::vector<double> m, v;
    long t = 0;
  };
  AdamConfig cfg_;
  std::map<std::string, Moments> state_;
};

/// Cosine-annealed learning rate for 0-based epoch in [0, total).
double cosine_annealed_lr(double base, int epoch, int total_epochs, double min_lr = 0.0);

// ---- verification ----

using ScalarBuilder = std::function<Value(Tape&, ParamSet&)>;

/// Compares the analytic gradient of f against central finite differences.
/// Returns max over elements of |a - n| / max(|a|, |n|, 1e-8).
double grad_check(const ScalarBuilder& f, ParamSet& params, double eps = 1e-5);

// ---- persistence ----

/// Checkpoint: magic "TAMW", version u16, entry count u32; per entry a
/// length-prefixed name, rank u8, u32 dims, f32 little-endian payload.
void save_checkpoint(const ParamSet& ps, const std::filesystem::path& path);
ParamSet load_checkpoint(const std::filesystem::path& path);

}  // namespace tam::ad
