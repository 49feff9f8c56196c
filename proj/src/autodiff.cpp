#include "tam/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace tam::ad {

namespace {

bool is_scalar(const Shape& s) { return numel(s) == 1; }

void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// row-major C[m,n] += A[m,k] * B[k,n]
void matmul_nn(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const double av = arow[l];
      if (av == 0.0) continue;
      const double* brow = b + static_cast<size_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = b + static_cast<size_t>(j) * k;
      double acc = 0.0;
      for (int l = 0; l < k; ++l) acc += arow[l] * brow[l];
      crow[j] += acc;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int l = 0; l < k; ++l) {
    const double* arow = a + static_cast<size_t>(l) * m;
    const double* brow = b + static_cast<size_t>(l) * n;
    for (int i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

// ---------------------------------------------------------------- ParamSet

Param& ParamSet::create(const std::string& name, Shape shape, bool trainable) {
  if (params_.count(name)) throw std::invalid_argument("ParamSet: duplicate name " + name);
  Param p;
  p.shape = std::move(shape);
  p.value.assign(numel(p.shape), 0.0);
  p.grad.assign(p.value.size(), 0.0);
  p.trainable = trainable;
  return params_.emplace(name, std::move(p)).first->second;
}

Param& ParamSet::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::invalid_argument("ParamSet: unknown name " + name);
  return it->second;
}

const Param& ParamSet::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::invalid_argument("ParamSet: unknown name " + name);
  return it->second;
}

void ParamSet::zero_grad() {
  for (auto& [name, p] : params_) std::fill(p.grad.begin(), p.grad.end(), 0.0);
}

void ParamSet::accumulate(const std::vector<std::pair<std::string, std::vector<double>>>& grads) {
  for (const auto& [name, g] : grads) {
    Param& p = at(name);
    require(g.size() == p.grad.size(), "ParamSet::accumulate: size mismatch");
    for (size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
  }
}

void ParamSet::quantize_f32() {
  for (auto& [name, p] : params_)
    for (double& v : p.value) {
      volatile float f = static_cast<float>(v);  // keep the narrowing under -O3
      v = static_cast<double>(f);
    }
}

// -------------------------------------------------------------------- Tape

Value Tape::push(Shape shape, std::vector<double> x, bool needs, std::function<void(Tape&)> back) {
  require(numel(shape) == x.size(), "tape: node shape does not match its data");
  Node n;
  n.shape = std::move(shape);
  n.x = std::move(x);
  n.back = std::move(back);
  n.needs_grad = needs;
  nodes_.push_back(std::move(n));
  return Value{static_cast<int>(nodes_.size()) - 1};
}

std::vector<double>& Tape::grad_buf(int id) {
  Node& n = nodes_[id];
  if (n.g.empty()) n.g.assign(n.x.size(), 0.0);
  return n.g;
}

const Shape& Tape::shape(Value v) const { return node(v).shape; }

std::span<const double> Tape::data(Value v) const { return node(v).x; }

std::span<const double> Tape::grad(Value v) const { return node(v).g; }

double Tape::scalar_value(Value v) const {
  require(is_scalar(node(v).shape), "scalar_value: not a scalar");
  return node(v).x[0];
}

Value Tape::constant(Shape shape, std::vector<double> data) {
  require(numel(shape) == data.size(), "constant: shape/data mismatch");
  return push(std::move(shape), std::move(data), false);
}

Value Tape::constant_scalar(double v) { return push({}, {v}, false); }

Value Tape::param(ParamSet& ps, const std::string& name) {
  Param& p = ps.at(name);
  Value v = push(p.shape, p.value, p.trainable);
  node(v).bound_param = name;
  return v;
}

Value Tape::add(Value a, Value b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  const int self_hint = static_cast<int>(nodes_.size());
  (void)self_hint;

  if (na.shape == nb.shape) {
    std::vector<double> out(na.x.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = na.x[i] + nb.x[i];
    const bool needs = na.needs_grad || nb.needs_grad;
    const int aid = a.id, bid = b.id;
    Value v = push(na.shape, std::move(out), needs, nullptr);
    const int self = v.id;
    node(v).back = [aid, bid, self](Tape& t) {
      const auto& g = t.grad_buf(self);
      if (t.nodes_[aid].needs_grad) {
        auto& ga = t.grad_buf(aid);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (t.nodes_[bid].needs_grad) {
        auto& gb = t.grad_buf(bid);
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    };
    return v;
  }
  if (na.shape.size() == 2 && nb.shape.size() == 1 && na.shape[1] == nb.shape[0]) {
    const int r = na.shape[0], c = na.shape[1];
    std::vector<double> out(na.x.size());
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) out[i * c + j] = na.x[i * c + j] + nb.x[j];
    const bool needs = na.needs_grad || nb.needs_grad;
    const int aid = a.id, bid = b.id;
    Value v = push(na.shape, std::move(out), needs, nullptr);
    const int self = v.id;
    node(v).back = [aid, bid, self, r, c](Tape& t) {
      const auto& g = t.grad_buf(self);
      if (t.nodes_[aid].needs_grad) {
        auto& ga = t.grad_buf(aid);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (t.nodes_[bid].needs_grad) {
        auto& gb = t.grad_buf(bid);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) gb[j] += g[i * c + j];
      }
    };
    return v;
  }
  if (is_scalar(nb.shape)) {
    const double s = nb.x[0];
    std::vector<double> out(na.x.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = na.x[i] + s;
    const bool needs = na.needs_grad || nb.needs_grad;
    const int aid = a.id, bid = b.id;
    Value v = push(na.shape, std::move(out), needs, nullptr);
    const int self = v.id;
    node(v).back = [aid, bid, self](Tape& t) {
      const auto& g = t.grad_buf(self);
      if (t.nodes_[aid].needs_grad) {
        auto& ga = t.grad_buf(aid);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (t.nodes_[bid].needs_grad) {
        auto& gb = t.grad_buf(bid);
        for (size_t i = 0; i < g.size(); ++i) gb[0] += g[i];
      }
    };
    return v;
  }
  if (is_scalar(na.shape)) return add(b, a);
  throw std::invalid_argument("add: incompatible shapes");
}

Value Tape::sub(Value a, Value b) { return add(a, affine(b, -1.0, 0.0)); }

Value Tape::mul(Value a, Value b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  if (na.shape == nb.shape) {
    std::vector<double> out(na.x.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = na.x[i] * nb.x[i];
    const bool needs = na.needs_grad || nb.needs_grad;
    const int aid = a.id, bid = b.id;
    Value v = push(na.shape, std::move(out), needs, nullptr);
    const int self = v.id;
    node(v).back = [aid, bid, self](Tape& t) {
      const auto& g = t.grad_buf(self);
      const auto& xa = t.nodes_[aid].x;
      const auto& xb = t.nodes_[bid].x;
      if (t.nodes_[aid].needs_grad) {
        auto& ga = t.grad_buf(aid);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * xb[i];
      }
      if (t.nodes_[bid].needs_grad) {
        auto& gb = t.grad_buf(bid);
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * xa[i];
      }
    };
    return v;
  }
  if (is_scalar(nb.shape)) {
    const double s = nb.x[0];
    std::vector<double> out(na.x.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = na.x[i] * s;
    const bool needs = na.needs_grad || nb.needs_grad;
    const int aid = a.id, bid = b.id;
    Value v = push(na.shape, std::move(out), needs, nullptr);
    const int self = v.id;
    node(v).back = [aid, bid, self](Tape& t) {
      const auto& g = t.grad_buf(self);
      const auto& xa = t.nodes_[aid].x;
      const double sv = t.nodes_[bid].x[0];
      if (t.nodes_[aid].needs_grad) {
        auto& ga = t.grad_buf(aid);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sv;
      }
      if (t.nodes_[bid].needs_grad) {
        auto& gb = t.grad_buf(bid);
        for (size_t i = 0; i < g.size(); ++i) gb[0] += g[i] * xa[i];
      }
    };
    return v;
  }
  if (is_scalar(na.shape)) return mul(b, a);
  throw std::invalid_argument("mul: incompatible shapes");
}

Value Tape::mul_colvec(Value a, Value v) {
  const Node& na = node(a);
  const Node& nv = node(v);
  require(na.shape.size() == 2 && nv.shape.size() == 1 && na.shape[0] == nv.shape[0],
          "mul_colvec: expects [r,c] and [r]");
  const int r = na.shape[0], c = na.shape[1];
  std::vector<double> out(na.x.size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[i * c + j] = na.x[i * c + j] * nv.x[i];
  const bool needs = na.needs_grad || nv.needs_grad;
  const int aid = a.id, vid = v.id;
  Value out_v = push(na.shape, std::move(out), needs, nullptr);
  const int self = out_v.id;
  node(out_v).back = [aid, vid, self, r, c](Tape& t) {
    const auto& g = t.grad_buf(self);
    const auto& xa = t.nodes_[aid].x;
    const auto& xv = t.nodes_[vid].x;
    if (t.nodes_[aid].needs_grad) {
      auto& ga = t.grad_buf(aid);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) ga[i * c + j] += g[i * c + j] * xv[i];
    }
    if (t.nodes_[vid].needs_grad) {
      auto& gv = t.grad_buf(vid);
      for (int i = 0; i < r; ++i) {
        double acc = 0.0;
        for (int j = 0; j < c; ++j) acc += g[i * c + j] * xa[i * c + j];
        gv[i] += acc;
      }
    }
  };
  return out_v;
}

Value Tape::affine(Value a, double k, double b) {
  const Node& na = node(a);
  std::vector<double> out(na.x.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = k * na.x[i] + b;
  const int aid = a.id;
  Value v = push(na.shape, std::move(out), na.needs_grad, nullptr);
  const int self = v.id;
  node(v).back = [aid, self, k](Tape& t) {
    if (!t.nodes_[aid].needs_grad) return;
    const auto& g = t.grad_buf(self);
    auto& ga = t.grad_buf(aid);
    for (size_t i = 0; i < g.size(); ++i) ga[i] += k * g[i];
  };
  return v;
}

Value Tape::matmul(Value a, Value b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  const bool a_vec = na.shape.size() == 1;
  const bool b_vec = nb.shape.size() == 1;
  require((na.shape.size() == 2 || a_vec) && (nb.shape.size() == 2 || b_vec),
          "matmul: expects vectors or matrices");
  require(!(a_vec && b_vec), "matmul: use dot for two vectors");
  const int m = a_vec ? 1 : na.shape[0];
  const int k = a_vec ? na.shape[0] : na.shape[1];
  const int kb = b_vec ? nb.shape[0] : nb.shape[0];
  const int n = b_vec ? 1 : nb.shape[1];
  require(k == kb, "matmul: inner dimension mismatch");

  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  matmul_nn(na.x.data(), nb.x.data(), out.data(), m, k, n);

  Shape out_shape;
  if (a_vec)
    out_shape = {n};
  else if (b_vec)
    out_shape = {m};
  else
    out_shape = {m, n};

  const bool needs = na.needs_grad || nb.needs_grad;
  const int aid = a.id, bid = b.id;
  Value v = push(std::move(out_shape), std::move(out), needs, nullptr);
  const int self = v.id;
  node(v).back = [aid, bid, self, m, k, n](Tape& t) {
    const auto& g = t.grad_buf(self);
    const auto& xa = t.nodes_[aid].x;
    const auto& xb = t.nodes_[bid].x;
    if (t.nodes_[aid].needs_grad) {
      auto& ga = t.grad_buf(aid);
      matmul_nt(g.data(), xb.data(), ga.data(), m, n, k);
    }
    if (t.nodes_[bid].needs_grad) {
      auto& gb = t.grad_buf(bid);
      matmul_tn(xa.data(), g.data(), gb.data(), k, m, n);
    }
  };
  return v;
}

Value Tape::relu(Value a) {
  const Node& na = node(a);
  std::vector<double> out(na.x.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = na.x[i] > 0.0 ? na.x[i] : 0.0;
  const int aid = a.id;
  Value v = push(na.shape, std::move(out), na.needs_grad, nullptr);
  const int self = v.id;
  node(v).back = [aid, self](Tape& t) {
    if (!t.nodes_[aid].needs_grad) return;
    const auto& g = t.grad_buf(self);
    const auto& x = t.nodes_[aid].x;
    auto& ga = t.grad_buf(aid);
    for (size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) ga[i] += g[i];
  };
  return v;
}

Value Tape::exp_(Value a) {
  const Node& na = node(a);
  std::vector<double> out(na.x.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(na.x[i]);
  const int aid = a.id;
  Value v = push(na.shape, std::move(out), na.needs_grad, nullptr);
  const int self = v.id;
  node(v).back = [aid, self](Tape& t) {
    if (!t.nodes_[aid].needs_grad) return;
    const auto& g = t.grad_buf(self);
    const auto& y = t.nodes_[self].x;
    auto& ga = t.grad_buf(aid);
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
  };
  return v;
}

Value Tape::log_(Value a) {
  const Node& na = node(a);
  std::vector<double> out(na.x.size());
  for (size_t i = 0; i < out.size(); ++i) {
    if (na.x[i] <= 0.0) throw std::domain_error("log: non-positive input");
    out[i] = std::log(na.x[i]);
  }
  const int aid = a.id;
  Value v = push(na.shape, std::move(out), na.needs_grad, nullptr);
  const int self = v.id;
  node(v).back = [aid, self](Tape& t) {
    if (!t.nodes_[aid].needs_grad) return;
    const auto& g = t.grad_buf(self);
    const auto& x = t.nodes_[aid].x;
    auto& ga = t.grad_buf(aid);
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
  };
  return v;
}

Value Tape::sqrt_(Value a) {
  const Node& na = node(a);
  std::vector<double> out(na.x.size());
  for (size_t i = 0; i < out.size(); ++i) {
    if (na.x[i] < 0.0) throw std::domain_error("sqrt: negative input");
    out[i] = std::sqrt(na.x[i]);
  }
  const int aid = a.id;
  Value v = push(na.shape, std::move(out), na.needs_grad, nullptr);
  const int self = v.id;
  node(v).back = [aid, self](Tape& t) {
    if (!t.nodes_[aid].needs_grad) return;
    const auto& g = t.grad_buf(self);
    const auto& y = t.nodes_[self].x;
    auto& ga = t.grad_buf(aid);
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * 0.5 / std::max(y[i], 1e-12);
  };
  return v;
}

Value Tape::reciprocal(Value a) {
  const Node& na = node(a);
  std::vector<double> out(na.x.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / na.x[i];
  const int aid = a.id;
  Value v = push(na.shape, std::move(out), na.needs_grad, nullptr);
  const int self = v.id;
  node(v).back = [aid, self](Tape& t) {
    if (!t.nodes_[aid].needs_grad) return;
    const auto& g = t.grad_buf(self);
    const auto& y = t.nodes_[self].x;
    auto& ga = t.grad_buf(aid);
    for (size_t i = 0; i < g.size(); ++i) ga[i] -= g[i] * y[i] * y[i];
  };
  return v;
}

Value Tape::clamp_min(Value a, double lo) {
  const Node& na = node(a);
  std::vector<double> out(na.x.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::max(na.x[i], lo);
  const int aid = a.id;
  Value v = push(na.shape, std::move(out), na.needs_grad, nullptr);
  const int self = v.id;
  node(v).back = [aid, self, lo](Tape& t) {
    if (!t.nodes_[aid].needs_grad) return;
    const auto& g = t.grad_buf(self);
    const auto& x = t.nodes_[aid].x;
    auto& ga = t.grad_buf(aid);
    for (size_t i = 0; i < g.size(); ++i)
      if (x[i] > lo) ga[i] += g[i];
  };
  return v;
}

Value Tape::softmax(Value a) {
  const Node& na = node(a);
  const bool is_mat = na.shape.size() == 2;
  require(na.shape.size() == 1 || is_mat, "softmax: expects vector or matrix");
  const int rows = is_mat ? na.shape[0] : 1;
  const int cols = is_mat ? na.shape[1] : na.shape[0];

  std::vector<double> out(na.x.size());
  for (int i = 0; i < rows; ++i) {
    const double* x = na.x.data() + static_cast<size_t>(i) * cols;
    double* y = out.data() + static_cast<size_t>(i) * cols;
    double mx = x[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (int j = 0; j < cols; ++j) y[j] /= z;
  }
  const int aid = a.id;
  Value v = push(na.shape, std::move(out), na.needs_grad, nullptr);
  const int self = v.id;
  node(v).back = [aid, self, rows, cols](Tape& t) {
    if (!t.nodes_[aid].needs_grad) return;
    const auto& g = t.grad_buf(self);
    const auto& y = t.nodes_[self].x;
    auto& ga = t.grad_buf(aid);
    for (int i = 0; i < rows; ++i) {
      const double* yi = y.data() + static_cast<size_t>(i) * cols;
      const double* gi = g.data() + static_cast<size_t>(i) * cols;
      double dot = 0.0;
      for (int j = 0; j < cols; ++j) dot += gi[j] * yi[j];
      double* gai = ga.data() + static_cast<size_t>(i) * cols;
      for (int j = 0; j < cols; ++j) gai[j] += yi[j] * (gi[j] - dot);
    }
  };
  return v;
}

Value Tape::sum(Value a) {
  const Node& na = node(a);
  double acc = 0.0;
  for (double x : na.x) acc += x;
  const int aid = a.id;
  Value v = push({}, {acc}, na.needs_grad, nullptr);
  const int self = v.id;
  node(v).back = [aid, self](Tape& t) {
    if (!t.nodes_[aid].needs_grad) return;
    const double g = t.grad_buf(self)[0];
    auto& ga = t.grad_buf(aid);
    for (double& gi : ga) gi += g;
  };
  return v;
}

Value Tape::mean(Value a) {
  const Node& na = node(a);
  require(!na.x.empty(), "mean: empty input");
  return affine(sum(a), 1.0 / static_cast<double>(na.x.size()), 0.0);
}

Value Tape::reduce_max(Value a) {
  const Node& na = node(a);
  require(!na.x.empty(), "reduce_max: empty input");
  size_t arg = 0;
  for (size_t i = 1; i < na.x.size(); ++i)
    if (na.x[i] > na.x[arg]) arg = i;
  const int aid = a.id;
  Value v = push({}, {na.x[arg]}, na.needs_grad, nullptr);
  const int self = v.id;
  node(v).back = [aid, self, arg](Tape& t) {
    if (!t.nodes_[aid].needs_grad) return;
    t.grad_buf(aid)[arg] += t.grad_buf(self)[0];
  };
  return v;
}

Value Tape::colmax(Value a) {
  const Node& na = node(a);
  require(na.shape.size() == 2, "colmax: expects a matrix");
  const int r = na.shape[0], c = na.shape[1];
  std::vector<double> out(c);
  std::vector<int> arg(c, 0);
  for (int j = 0; j < c; ++j) {
    double best = na.x[j];
    int bi = 0;
    for (int i = 1; i < r; ++i)
      if (na.x[i * c + j] > best) {
        best = na.x[i * c + j];
        bi = i;
      }
    out[j] = best;
    arg[j] = bi;
  }
  const int aid = a.id;
  Value v = push({c}, std::move(out), na.needs_grad, nullptr);
  const int self = v.id;
  node(v).back = [aid, self, arg, c](Tape& t) {
    if (!t.nodes_[aid].needs_grad) return;
    const auto& g = t.grad_buf(self);
    auto& ga = t.grad_buf(aid);
    for (int j = 0; j < c; ++j) ga[arg[j] * c + j] += g[j];
  };
  return v;
}

Value Tape::colmean(Value a) {
  const Node& na = node(a);
  require(na.shape.size() == 2, "colmean: expects a matrix");
  const int r = na.shape[0], c = na.shape[1];
  std::vector<double> out(c, 0.0);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[j] += na.x[i * c + j];
  for (int j = 0; j < c; ++j) out[j] /= r;
  const int aid = a.id;
  Value v = push({c}, std::move(out), na.needs_grad, nullptr);
  const int self = v.id;
  node(v).back = [aid, self, r, c](Tape& t) {
    if (!t.nodes_[aid].needs_grad) return;
    const auto& g = t.grad_buf(self);
    auto& ga = t.grad_buf(aid);
    const double inv = 1.0 / r;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) ga[i * c + j] += g[j] * inv;
  };
  return v;
}

Value Tape::rowsum(Value a) {
  const Node& na = node(a);
  require(na.shape.size() == 2, "rowsum: expects a matrix");
  const int r = na.shape[0], c = na.shape[1];
  std::vector<double> out(r, 0.0);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[i] += na.x[i * c + j];
  const int aid = a.id;
  Value v = push({r}, std::move(out), na.needs_grad, nullptr);
  const int self = v.id;
  node(v).back = [aid, self, r, c](Tape& t) {
    if (!t.nodes_[aid].needs_grad) return;
    const auto& g = t.grad_buf(self);
    auto& ga = t.grad_buf(aid);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) ga[i * c + j] += g[i];
  };
  return v;
}

Value Tape::rowgroup_max(Value a, int group_size) {
  const Node& na = node(a);
  require(na.shape.size() == 2, "rowgroup_max: expects a matrix");
  require(group_size > 0 && na.shape[0] % group_size == 0,
          "rowgroup_max: rows must divide into groups");
  const int groups = na.shape[0] / group_size, c = na.shape[1];
  std::vector<double> out(static_cast<size_t>(groups) * c);
  std::vector<int> arg(out.size());
  for (int gidx = 0; gidx < groups; ++gidx)
    for (int j = 0; j < c; ++j) {
      int bi = gidx * group_size;
      double best = na.x[static_cast<size_t>(bi) * c + j];
      for (int i = 1; i < group_size; ++i) {
        const int rowi = gidx * group_size + i;
        const double x = na.x[static_cast<size_t>(rowi) * c + j];
        if (x > best) {
          best = x;
          bi = rowi;
        }
      }
      out[static_cast<size_t>(gidx) * c + j] = best;
      arg[static_cast<size_t>(gidx) * c + j] = bi;
    }
  const int aid = a.id;
  Value v = push({groups, c}, std::move(out), na.needs_grad, nullptr);
  const int self = v.id;
  node(v).back = [aid, self, arg, groups, c](Tape& t) {
    if (!t.nodes_[aid].needs_grad) return;
    const auto& g = t.grad_buf(self);
    auto& ga = t.grad_buf(aid);
    for (size_t k = 0; k < g.size(); ++k)
      ga[static_cast<size_t>(arg[k]) * c + (k % c)] += g[k];
  };
  return v;
}

Value Tape::concat(Value a, Value b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  require(na.shape.size() == 1 && nb.shape.size() == 1, "concat: expects vectors");
  const int total = static_cast<int>(na.x.size() + nb.x.size());
  std::vector<double> out;
  out.reserve(total);
  out.insert(out.end(), na.x.begin(), na.x.end());
  out.insert(out.end(), nb.x.begin(), nb.x.end());
  const int aid = a.id, bid = b.id;
  const int an = static_cast<int>(na.x.size());
  Value v = push({total}, std::move(out), na.needs_grad || nb.needs_grad, nullptr);
  const int self = v.id;
  node(v).back = [aid, bid, self, an](Tape& t) {
    const auto& g = t.grad_buf(self);
    if (t.nodes_[aid].needs_grad) {
      auto& ga = t.grad_buf(aid);
      for (int i = 0; i < an; ++i) ga[i] += g[i];
    }
    if (t.nodes_[bid].needs_grad) {
      auto& gb = t.grad_buf(bid);
      for (size_t i = an; i < g.size(); ++i) gb[i - an] += g[i];
    }
  };
  return v;
}

Value Tape::hconcat(Value a, Value b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  require(na.shape.size() == 2 && nb.shape.size() == 2 && na.shape[0] == nb.shape[0],
          "hconcat: expects matrices with equal row count");
  const int r = na.shape[0], ca = na.shape[1], cb = nb.shape[1];
  std::vector<double> out(static_cast<size_t>(r) * (ca + cb));
  for (int i = 0; i < r; ++i) {
    std::memcpy(out.data() + static_cast<size_t>(i) * (ca + cb), na.x.data() + static_cast<size_t>(i) * ca,
                sizeof(double) * ca);
    std::memcpy(out.data() + static_cast<size_t>(i) * (ca + cb) + ca,
                nb.x.data() + static_cast<size_t>(i) * cb, sizeof(double) * cb);
  }
  const int aid = a.id, bid = b.id;
  Value v = push({r, ca + cb}, std::move(out), na.needs_grad || nb.needs_grad, nullptr);
  const int self = v.id;
  node(v).back = [aid, bid, self, r, ca, cb](Tape& t) {
    const auto& g = t.grad_buf(self);
    if (t.nodes_[aid].needs_grad) {
      auto& ga = t.grad_buf(aid);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < ca; ++j) ga[i * ca + j] += g[static_cast<size_t>(i) * (ca + cb) + j];
    }
    if (t.nodes_[bid].needs_grad) {
      auto& gb = t.grad_buf(bid);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < cb; ++j)
          gb[i * cb + j] += g[static_cast<size_t>(i) * (ca + cb) + ca + j];
    }
  };
  return v;
}

Value Tape::stack_rows(const std::vector<Value>& rows) {
  require(!rows.empty(), "stack_rows: empty input");
  const int c = node(rows.front()).shape.empty() ? 1 : node(rows.front()).shape[0];
  bool needs = false;
  std::vector<double> out;
  out.reserve(rows.size() * c);
  std::vector<int> ids;
  ids.reserve(rows.size());
  for (const Value& rv : rows) {
    const Node& nr = node(rv);
    require(nr.shape.size() == 1 && nr.shape[0] == c, "stack_rows: inconsistent widths");
    out.insert(out.end(), nr.x.begin(), nr.x.end());
    needs = needs || nr.needs_grad;
    ids.push_back(rv.id);
  }
  Value v = push({static_cast<int>(rows.size()), c}, std::move(out), needs, nullptr);
  const int self = v.id;
  node(v).back = [ids, self, c](Tape& t) {
    const auto& g = t.grad_buf(self);
    for (size_t i = 0; i < ids.size(); ++i) {
      if (!t.nodes_[ids[i]].needs_grad) continue;
      auto& gr = t.grad_buf(ids[i]);
      for (int j = 0; j < c; ++j) gr[j] += g[i * c + j];
    }
  };
  return v;
}

Value Tape::gather_rows(Value a, std::vector<int> idx) {
  const Node& na = node(a);
  require(na.shape.size() == 2, "gather_rows: expects a matrix");
  const int r = na.shape[0], c = na.shape[1];
  for (int i : idx) require(i >= 0 && i < r, "gather_rows: index out of range");
  std::vector<double> out(idx.size() * static_cast<size_t>(c));
  for (size_t k = 0; k < idx.size(); ++k)
    std::memcpy(out.data() + k * c, na.x.data() + static_cast<size_t>(idx[k]) * c,
                sizeof(double) * c);
  const int aid = a.id;
  Value v = push({static_cast<int>(idx.size()), c}, std::move(out), na.needs_grad, nullptr);
  const int self = v.id;
  node(v).back = [aid, self, idx = std::move(idx), c](Tape& t) {
    if (!t.nodes_[aid].needs_grad) return;
    const auto& g = t.grad_buf(self);
    auto& ga = t.grad_buf(aid);
    for (size_t k = 0; k < idx.size(); ++k)
      for (int j = 0; j < c; ++j) ga[static_cast<size_t>(idx[k]) * c + j] += g[k * c + j];
  };
  return v;
}

Value Tape::row(Value a, int r) {
  const Node& na = node(a);
  require(na.shape.size() == 2, "row: expects a matrix");
  require(r >= 0 && r < na.shape[0], "row: index out of range");
  const int c = na.shape[1];
  std::vector<double> out(na.x.begin() + static_cast<size_t>(r) * c,
                          na.x.begin() + static_cast<size_t>(r + 1) * c);
  const int aid = a.id;
  Value v = push({c}, std::move(out), na.needs_grad, nullptr);
  const int self = v.id;
  node(v).back = [aid, self, r, c](Tape& t) {
    if (!t.nodes_[aid].needs_grad) return;
    const auto& g = t.grad_buf(self);
    auto& ga = t.grad_buf(aid);
    for (int j = 0; j < c; ++j) ga[static_cast<size_t>(r) * c + j] += g[j];
  };
  return v;
}

Value Tape::dot(Value a, Value b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  require(na.shape.size() == 1 && na.shape == nb.shape, "dot: expects equal-length vectors");
  double acc = 0.0;
  for (size_t i = 0; i < na.x.size(); ++i) acc += na.x[i] * nb.x[i];
  const int aid = a.id, bid = b.id;
  Value v = push({}, {acc}, na.needs_grad || nb.needs_grad, nullptr);
  const int self = v.id;
  node(v).back = [aid, bid, self](Tape& t) {
    const double g = t.grad_buf(self)[0];
    const auto& xa = t.nodes_[aid].x;
    const auto& xb = t.nodes_[bid].x;
    if (t.nodes_[aid].needs_grad) {
      auto& ga = t.grad_buf(aid);
      for (size_t i = 0; i < xa.size(); ++i) ga[i] += g * xb[i];
    }
    if (t.nodes_[bid].needs_grad) {
      auto& gb = t.grad_buf(bid);
      for (size_t i = 0; i < xb.size(); ++i) gb[i] += g * xa[i];
    }
  };
  return v;
}

Value Tape::l2norm(Value a) {
  const Node& na = node(a);
  double acc = 0.0;
  for (double x : na.x) acc += x * x;
  const double norm = std::sqrt(acc);
  const int aid = a.id;
  Value v = push({}, {norm}, na.needs_grad, nullptr);
  const int self = v.id;
  node(v).back = [aid, self](Tape& t) {
    if (!t.nodes_[aid].needs_grad) return;
    const double g = t.grad_buf(self)[0];
    const double norm = std::max(t.nodes_[self].x[0], 1e-12);
    const auto& x = t.nodes_[aid].x;
    auto& ga = t.grad_buf(aid);
    for (size_t i = 0; i < x.size(); ++i) ga[i] += g * x[i] / norm;
  };
  return v;
}

Value Tape::cosine(Value a, Value b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  require(na.shape.size() == 1 && na.shape == nb.shape, "cosine: expects equal-length vectors");
  double dot = 0.0, qa = 0.0, qb = 0.0;
  for (size_t i = 0; i < na.x.size(); ++i) {
    dot += na.x[i] * nb.x[i];
    qa += na.x[i] * na.x[i];
    qb += nb.x[i] * nb.x[i];
  }
  const double norm_a = std::sqrt(qa), norm_b = std::sqrt(qb);
  const double denom = std::max(norm_a * norm_b, 1e-12);
  const double cos_v = dot / denom;
  const int aid = a.id, bid = b.id;
  Value v = push({}, {cos_v}, na.needs_grad || nb.needs_grad, nullptr);
  const int self = v.id;
  const bool clamped = norm_a * norm_b < 1e-12;
  node(v).back = [aid, bid, self, norm_a, norm_b, denom, cos_v, clamped](Tape& t) {
    const double g = t.grad_buf(self)[0];
    const auto& xa = t.nodes_[aid].x;
    const auto& xb = t.nodes_[bid].x;
    if (t.nodes_[aid].needs_grad) {
      auto& ga = t.grad_buf(aid);
      for (size_t i = 0; i < xa.size(); ++i) {
        double d = xb[i] / denom;
        if (!clamped) d -= cos_v * xa[i] / std::max(norm_a * norm_a, 1e-24);
        ga[i] += g * d;
      }
    }
    if (t.nodes_[bid].needs_grad) {
      auto& gb = t.grad_buf(bid);
      for (size_t i = 0; i < xb.size(); ++i) {
        double d = xa[i] / denom;
        if (!clamped) d -= cos_v * xb[i] / std::max(norm_b * norm_b, 1e-24);
        gb[i] += g * d;
      }
    }
  };
  return v;
}

Value Tape::batchnorm(Value x, Value gamma, Value beta, Param& running_mean, Param& running_var,
                      bool training, double momentum, double eps) {
  const Node& nx = node(x);
  require(nx.shape.size() == 2, "batchnorm: expects a matrix");
  const int r = nx.shape[0], c = nx.shape[1];
  require(node(gamma).shape == Shape{c} && node(beta).shape == Shape{c},
          "batchnorm: gamma/beta width mismatch");
  require(static_cast<int>(running_mean.value.size()) == c &&
              static_cast<int>(running_var.value.size()) == c,
          "batchnorm: running stats width mismatch");

  std::vector<double> mu(c, 0.0), ivar(c, 0.0);
  if (training) {
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) mu[j] += nx.x[i * c + j];
    for (int j = 0; j < c; ++j) mu[j] /= r;
    std::vector<double> var(c, 0.0);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) {
        const double d = nx.x[i * c + j] - mu[j];
        var[j] += d * d;
      }
    for (int j = 0; j < c; ++j) var[j] /= r;
    for (int j = 0; j < c; ++j) ivar[j] = 1.0 / std::sqrt(var[j] + eps);
    bn_updates_.push_back({&running_mean, &running_var, mu, var, momentum});
  } else {
    mu = running_mean.value;
    for (int j = 0; j < c; ++j) ivar[j] = 1.0 / std::sqrt(running_var.value[j] + eps);
  }

  const auto& ga = node(gamma).x;
  const auto& be = node(beta).x;
  std::vector<double> out(nx.x.size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out[i * c + j] = ga[j] * (nx.x[i * c + j] - mu[j]) * ivar[j] + be[j];

  const int xid = x.id, gid = gamma.id, bid = beta.id;
  const bool needs = nx.needs_grad || node(gamma).needs_grad || node(beta).needs_grad;
  Value v = push(nx.shape, std::move(out), needs, nullptr);
  const int self = v.id;
  node(v).back = [xid, gid, bid, self, r, c, mu, ivar, training](Tape& t) {
    const auto& g = t.grad_buf(self);
    const auto& xv = t.nodes_[xid].x;
    const auto& gav = t.nodes_[gid].x;

    // xhat and per-column reductions
    std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) {
        const double xhat = (xv[i * c + j] - mu[j]) * ivar[j];
        sum_dy[j] += g[i * c + j];
        sum_dy_xhat[j] += g[i * c + j] * xhat;
      }

    if (t.nodes_[gid].needs_grad) {
      auto& gg = t.grad_buf(gid);
      for (int j = 0; j < c; ++j) gg[j] += sum_dy_xhat[j];
    }
    if (t.nodes_[bid].needs_grad) {
      auto& gb = t.grad_buf(bid);
      for (int j = 0; j < c; ++j) gb[j] += sum_dy[j];
    }
    if (t.nodes_[xid].needs_grad) {
      auto& gx = t.grad_buf(xid);
      if (training) {
        const double inv_r = 1.0 / r;
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) {
            const double xhat = (xv[i * c + j] - mu[j]) * ivar[j];
            const double dxhat = g[i * c + j] * gav[j];
            gx[i * c + j] += ivar[j] * (dxhat - inv_r * (sum_dy[j] * gav[j] +
                                                         xhat * sum_dy_xhat[j] * gav[j]));
          }
      } else {
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) gx[i * c + j] += g[i * c + j] * gav[j] * ivar[j];
      }
    }
  };
  return v;
}

void Tape::backward(Value root) {
  require(root.valid() && root.id < static_cast<int>(nodes_.size()), "backward: invalid root");
  require(is_scalar(node(root).shape), "backward: root must be a scalar");
  for (auto& n : nodes_) n.g.clear();
  grad_buf(root.id)[0] = 1.0;
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.needs_grad || !n.back || n.g.empty()) continue;
    n.back(*this);
  }
}

std::vector<std::pair<std::string, std::vector<double>>> Tape::collect_grads() const {
  std::map<std::string, std::vector<double>> agg;
  for (const auto& n : nodes_) {
    if (n.bound_param.empty() || n.g.empty()) continue;
    auto [it, inserted] = agg.try_emplace(n.bound_param, n.g);
    if (!inserted)
      for (size_t i = 0; i < n.g.size(); ++i) it->second[i] += n.g[i];
  }
  return {agg.begin(), agg.end()};
}

void apply_bn_update(const BnPending& u) {
  for (size_t j = 0; j < u.batch_mean.size(); ++j) {
    u.mean->value[j] = u.momentum * u.mean->value[j] + (1.0 - u.momentum) * u.batch_mean[j];
    u.var->value[j] = u.momentum * u.var->value[j] + (1.0 - u.momentum) * u.batch_var[j];
  }
}

void Tape::commit_bn_updates() {
  for (const auto& u : bn_updates_) apply_bn_update(u);
  bn_updates_.clear();
}

std::vector<BnPending> Tape::take_bn_updates() {
  std::vector<BnPending> out = std::move(bn_updates_);
  bn_updates_.clear();
  return out;
}

// -------------------------------------------------------------------- Adam

int Adam::step(ParamSet& ps, double lr) {
  return step(ps, lr, [](const std::string&) { return true; });
}

int Adam::step(ParamSet& ps, double lr, const std::function<bool(const std::string&)>& filter) {
  int rejected = 0;
  for (auto& [name, p] : ps.entries()) {
    if (!p.trainable || !filter(name)) continue;
    bool finite = true;
    for (double g : p.grad)
      if (!std::isfinite(g)) {
        finite = false;
        break;
      }
    if (!finite) {
      ++rejected;
      continue;
    }
    Moments& mo = state_[name];
    if (mo.m.empty()) {
      mo.m.assign(p.value.size(), 0.0);
      mo.v.assign(p.value.size(), 0.0);
    }
    ++mo.t;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(mo.t));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(mo.t));
    for (size_t i = 0; i < p.value.size(); ++i) {
      mo.m[i] = cfg_.beta1 * mo.m[i] + (1.0 - cfg_.beta1) * p.grad[i];
      mo.v[i] = cfg_.beta2 * mo.v[i] + (1.0 - cfg_.beta2) * p.grad[i] * p.grad[i];
      const double mhat = mo.m[i] / bc1;
      const double vhat = mo.v[i] / bc2;
      p.value[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
  return rejected;
}

double cosine_annealed_lr(double base, int epoch, int total_epochs, double min_lr) {
  if (total_epochs <= 1) return base;
  const double t = std::clamp(static_cast<double>(epoch) / (total_epochs - 1), 0.0, 1.0);
  return min_lr + 0.5 * (base - min_lr) * (1.0 + std::cos(M_PI * t));
}

// -------------------------------------------------------------- grad_check

double grad_check(const ScalarBuilder& f, ParamSet& params, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be positive");

  params.zero_grad();
  {
    Tape tape;
    Value root = f(tape, params);
    tape.backward(root);
    tape.scatter_grads(params);
  }
  std::map<std::string, std::vector<double>> analytic;
  for (const auto& [name, p] : params.entries())
    if (p.trainable) analytic[name] = p.grad;

  const auto eval = [&](void) -> double {
    Tape tape;
    Value root = f(tape, params);
    return tape.scalar_value(root);
  };

  double max_err = 0.0;
  for (auto& [name, p] : params.entries()) {
    if (!p.trainable) continue;
    const auto& a = analytic[name];
    for (size_t i = 0; i < p.value.size(); ++i) {
      const double keep = p.value[i];
      p.value[i] = keep + eps;
      const double fp = eval();
      p.value[i] = keep - eps;
      const double fm = eval();
      p.value[i] = keep;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double err = std::abs(a[i] - numeric) /
                         std::max({std::abs(a[i]), std::abs(numeric), 1e-8});
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

// ------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[4] = {'T', 'A', 'M', 'W'};

void put_u16(std::ostream& os, uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

void put_u32(std::ostream& os, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

bool is_state_name(const std::string& name) {
  return name.ends_with(".rmean") || name.ends_with(".rvar");
}

}  // namespace

void save_checkpoint(const ParamSet& ps, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
  os.write(kMagic, 4);
  put_u16(os, 1);
  put_u32(os, static_cast<uint32_t>(ps.size()));
  for (const auto& [name, p] : ps.entries()) {
    if (name.size() > 0xffff) throw std::invalid_argument("save_checkpoint: name too long");
    put_u16(os, static_cast<uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(static_cast<char>(p.shape.size()));
    for (int d : p.shape) put_u32(os, static_cast<uint32_t>(d));
    for (double v : p.value) {
      const float f = static_cast<float>(v);
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(os, bits);
    }
  }
  if (!os) throw std::runtime_error("save_checkpoint: write failed");
}

ParamSet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("load_checkpoint: bad magic");
  if (get_u16(is) != 1) throw std::runtime_error("load_checkpoint: unsupported version");
  const uint32_t count = get_u32(is);

  ParamSet ps;
  for (uint32_t e = 0; e < count; ++e) {
    const uint16_t name_len = get_u16(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const int rank = is.get();
    if (!is || rank < 0 || rank > 4) throw std::runtime_error("load_checkpoint: corrupt entry");
    Shape shape(rank);
    for (int d = 0; d < rank; ++d) shape[d] = static_cast<int>(get_u32(is));
    Param& p = ps.create(name, shape, !is_state_name(name));
    for (size_t i = 0; i < p.value.size(); ++i) {
      const uint32_t bits = get_u32(is);
      float f;
      std::memcpy(&f, &bits, 4);
      p.value[i] = static_cast<double>(f);
    }
    if (!is) throw std::runtime_error("load_checkpoint: truncated payload");
  }
  return ps;
}

}  // namespace tam::ad
