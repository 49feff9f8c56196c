#include "tam/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "tam/autodiff.hpp"
#include "tam/bank.hpp"
#include "tam/implicit.hpp"
#include "tam/losses.hpp"
#include "tam/rng.hpp"

namespace tam::diagnostics {

using ad::ParamSet;
using ad::ScalarBuilder;
using ad::Tape;
using ad::Value;

namespace {

std::vector<double> random_vec(Rng& rng, size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

// values pairwise separated by at least `gap`, keeping max/argmax gradients
// stable under the finite-difference step
std::vector<double> separated_vec(Rng& rng, size_t n, double gap = 5e-3) {
  for (;;) {
    auto v = random_vec(rng, n);
    bool ok = true;
    for (size_t i = 0; i < n && ok; ++i)
      for (size_t j = i + 1; j < n && ok; ++j)
        if (std::abs(v[i] - v[j]) < gap) ok = false;
    if (ok) return v;
  }
}

// keeps relu/clamp inputs away from their kinks
std::vector<double> off_kink_vec(Rng& rng, size_t n, double margin = 5e-2) {
  std::vector<double> v(n);
  for (double& x : v) {
    const double mag = rng.uniform(margin, 1.0);
    x = rng.uniform() < 0.5 ? -mag : mag;
  }
  return v;
}

ad::Param& make_param(ParamSet& ps, const std::string& name, ad::Shape shape,
                      std::vector<double> values) {
  ad::Param& p = ps.create(name, std::move(shape));
  p.value = std::move(values);
  return p;
}

struct Case {
  std::string name;
  // fills params and returns the scalar builder; invoked per instance
  std::function<ScalarBuilder(Rng&, ParamSet&)> make;
};

// reduce any tensor to a scalar in a gradient-spreading way
Value spread(Tape& t, Value v, ParamSet& ps, Rng& rng) {
  (void)ps;
  (void)rng;
  const auto& shape = t.shape(v);
  if (ad::numel(shape) == 1) return v;
  return t.sum(t.mul(v, v));  // sum of squares keeps every element in play
}

std::vector<Case> kernel_cases() {
  std::vector<Case> cases;

  cases.push_back({"matmul", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int m = 2 + static_cast<int>(rng.below(3));
                     const int k = 2 + static_cast<int>(rng.below(3));
                     const int n = 2 + static_cast<int>(rng.below(3));
                     make_param(ps, "a", {m, k}, random_vec(rng, m * k));
                     make_param(ps, "b", {k, n}, random_vec(rng, k * n));
                     return [](Tape& t, ParamSet& p) {
                       Value c = t.matmul(t.param(p, "a"), t.param(p, "b"));
                       return t.sum(t.mul(c, c));
                     };
                   }});

  cases.push_back({"add", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int r = 2 + static_cast<int>(rng.below(3));
                     const int c = 2 + static_cast<int>(rng.below(3));
                     make_param(ps, "a", {r, c}, random_vec(rng, r * c));
                     make_param(ps, "bias", {c}, random_vec(rng, c));
                     return [](Tape& t, ParamSet& p) {
                       Value y = t.add(t.param(p, "a"), t.param(p, "bias"));
                       return t.sum(t.mul(y, y));
                     };
                   }});

  cases.push_back({"mul", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int n = 3 + static_cast<int>(rng.below(4));
                     make_param(ps, "a", {n}, random_vec(rng, n));
                     make_param(ps, "b", {n}, random_vec(rng, n));
                     return [](Tape& t, ParamSet& p) {
                       return t.sum(t.mul(t.param(p, "a"), t.param(p, "b")));
                     };
                   }});

  cases.push_back({"mul_colvec", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int r = 2 + static_cast<int>(rng.below(3));
                     const int c = 2 + static_cast<int>(rng.below(3));
                     make_param(ps, "a", {r, c}, random_vec(rng, r * c));
                     make_param(ps, "v", {r}, random_vec(rng, r));
                     return [](Tape& t, ParamSet& p) {
                       Value y = t.mul_colvec(t.param(p, "a"), t.param(p, "v"));
                       return t.sum(t.mul(y, y));
                     };
                   }});

  cases.push_back({"relu", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int n = 4 + static_cast<int>(rng.below(4));
                     make_param(ps, "a", {n}, off_kink_vec(rng, n));
                     return [](Tape& t, ParamSet& p) {
                       Value y = t.relu(t.param(p, "a"));
                       return t.sum(t.mul(y, y));
                     };
                   }});

  cases.push_back({"exp", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int n = 3 + static_cast<int>(rng.below(4));
                     make_param(ps, "a", {n}, random_vec(rng, n));
                     return [](Tape& t, ParamSet& p) { return t.sum(t.exp_(t.param(p, "a"))); };
                   }});

  cases.push_back({"log", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int n = 3 + static_cast<int>(rng.below(4));
                     make_param(ps, "a", {n}, random_vec(rng, n, 0.2, 2.0));
                     return [](Tape& t, ParamSet& p) { return t.sum(t.log_(t.param(p, "a"))); };
                   }});

  cases.push_back({"sqrt", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int n = 3 + static_cast<int>(rng.below(4));
                     make_param(ps, "a", {n}, random_vec(rng, n, 0.2, 2.0));
                     return [](Tape& t, ParamSet& p) { return t.sum(t.sqrt_(t.param(p, "a"))); };
                   }});

  cases.push_back({"reciprocal", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int n = 3 + static_cast<int>(rng.below(4));
                     make_param(ps, "a", {n}, random_vec(rng, n, 0.4, 2.0));
                     return [](Tape& t, ParamSet& p) {
                       return t.sum(t.reciprocal(t.param(p, "a")));
                     };
                   }});

  cases.push_back({"clamp_min", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int n = 4 + static_cast<int>(rng.below(4));
                     make_param(ps, "a", {n}, off_kink_vec(rng, n));
                     return [](Tape& t, ParamSet& p) {
                       Value y = t.clamp_min(t.param(p, "a"), 0.0);
                       return t.sum(t.mul(y, y));
                     };
                   }});

  cases.push_back({"softmax", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int r = 2 + static_cast<int>(rng.below(3));
                     const int c = 3 + static_cast<int>(rng.below(3));
                     make_param(ps, "a", {r, c}, random_vec(rng, r * c, -2.0, 2.0));
                     std::vector<double> w = random_vec(rng, r * c);
                     return [w, r, c](Tape& t, ParamSet& p) {
                       Value y = t.softmax(t.param(p, "a"));
                       return t.sum(t.mul(y, t.constant({r, c}, w)));
                     };
                   }});

  cases.push_back({"batchnorm_train", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int r = 3 + static_cast<int>(rng.below(3));
                     const int c = 2 + static_cast<int>(rng.below(3));
                     make_param(ps, "x", {r, c}, random_vec(rng, r * c, -2.0, 2.0));
                     make_param(ps, "g", {c}, random_vec(rng, c, 0.5, 1.5));
                     make_param(ps, "b", {c}, random_vec(rng, c));
                     ps.create("bn.rmean", {c}, false);
                     ad::Param& rvar = ps.create("bn.rvar", {c}, false);
                     std::fill(rvar.value.begin(), rvar.value.end(), 1.0);
                     std::vector<double> w = random_vec(rng, r * c);
                     return [w, r, c](Tape& t, ParamSet& p) {
                       Value y = t.batchnorm(t.param(p, "x"), t.param(p, "g"), t.param(p, "b"),
                                             p.at("bn.rmean"), p.at("bn.rvar"), true);
                       return t.sum(t.mul(y, t.constant({r, c}, w)));
                     };
                   }});

  cases.push_back({"batchnorm_eval", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int r = 2 + static_cast<int>(rng.below(3));
                     const int c = 2 + static_cast<int>(rng.below(3));
                     make_param(ps, "x", {r, c}, random_vec(rng, r * c, -2.0, 2.0));
                     make_param(ps, "g", {c}, random_vec(rng, c, 0.5, 1.5));
                     make_param(ps, "b", {c}, random_vec(rng, c));
                     ad::Param& rmean = ps.create("bn.rmean", {c}, false);
                     rmean.value = random_vec(rng, c, -0.5, 0.5);
                     ad::Param& rvar = ps.create("bn.rvar", {c}, false);
                     rvar.value = random_vec(rng, c, 0.5, 1.5);
                     std::vector<double> w = random_vec(rng, r * c);
                     return [w, r, c](Tape& t, ParamSet& p) {
                       Value y = t.batchnorm(t.param(p, "x"), t.param(p, "g"), t.param(p, "b"),
                                             p.at("bn.rmean"), p.at("bn.rvar"), false);
                       return t.sum(t.mul(y, t.constant({r, c}, w)));
                     };
                   }});

  cases.push_back({"sum_mean", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int n = 3 + static_cast<int>(rng.below(5));
                     make_param(ps, "a", {n}, random_vec(rng, n));
                     return [](Tape& t, ParamSet& p) {
                       Value a = t.param(p, "a");
                       return t.add(t.sum(t.mul(a, a)), t.mean(a));
                     };
                   }});

  cases.push_back({"reduce_max", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int n = 3 + static_cast<int>(rng.below(5));
                     make_param(ps, "a", {n}, separated_vec(rng, n));
                     return [](Tape& t, ParamSet& p) {
                       Value m = t.reduce_max(t.param(p, "a"));
                       return t.mul(m, m);
                     };
                   }});

  cases.push_back({"colmax_colmean", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int r = 3, c = 3;
                     make_param(ps, "a", {r, c}, separated_vec(rng, r * c));
                     return [](Tape& t, ParamSet& p) {
                       Value a = t.param(p, "a");
                       Value y = t.add(t.colmax(a), t.colmean(a));
                       return t.sum(t.mul(y, y));
                     };
                   }});

  cases.push_back({"rowsum", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int r = 2 + static_cast<int>(rng.below(3));
                     const int c = 2 + static_cast<int>(rng.below(3));
                     make_param(ps, "a", {r, c}, random_vec(rng, r * c));
                     return [](Tape& t, ParamSet& p) {
                       Value y = t.rowsum(t.param(p, "a"));
                       return t.sum(t.mul(y, y));
                     };
                   }});

  cases.push_back({"rowgroup_max", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int groups = 2, group_size = 3, c = 2;
                     make_param(ps, "a", {groups * group_size, c},
                                separated_vec(rng, groups * group_size * c));
                     return [group_size](Tape& t, ParamSet& p) {
                       Value y = t.rowgroup_max(t.param(p, "a"), group_size);
                       return t.sum(t.mul(y, y));
                     };
                   }});

  cases.push_back({"concat_gather", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int n = 3 + static_cast<int>(rng.below(3));
                     make_param(ps, "a", {n}, random_vec(rng, n));
                     make_param(ps, "b", {n}, random_vec(rng, n));
                     make_param(ps, "m", {4, 2}, random_vec(rng, 8));
                     const std::vector<int> idx = {1, 3, 1, 0};
                     return [idx](Tape& t, ParamSet& p) {
                       Value cat = t.concat(t.param(p, "a"), t.param(p, "b"));
                       Value g = t.gather_rows(t.param(p, "m"), idx);
                       return t.add(t.sum(t.mul(cat, cat)), t.sum(t.mul(g, g)));
                     };
                   }});

  cases.push_back({"hconcat_stack_row", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     make_param(ps, "a", {3, 2}, random_vec(rng, 6));
                     make_param(ps, "b", {3, 2}, random_vec(rng, 6));
                     make_param(ps, "v", {4}, random_vec(rng, 4));
                     return [](Tape& t, ParamSet& p) {
                       Value h = t.hconcat(t.param(p, "a"), t.param(p, "b"));
                       Value s = t.stack_rows({t.row(h, 0), t.row(h, 2), t.param(p, "v")});
                       return t.sum(t.mul(s, s));
                     };
                   }});

  cases.push_back({"dot_l2norm", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int n = 3 + static_cast<int>(rng.below(4));
                     make_param(ps, "a", {n}, random_vec(rng, n, 0.2, 1.0));
                     make_param(ps, "b", {n}, random_vec(rng, n, -1.0, -0.2));
                     return [](Tape& t, ParamSet& p) {
                       Value a = t.param(p, "a");
                       Value b = t.param(p, "b");
                       return t.add(t.dot(a, b), t.l2norm(a));
                     };
                   }});

  cases.push_back({"cosine", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int n = 3 + static_cast<int>(rng.below(4));
                     make_param(ps, "a", {n}, off_kink_vec(rng, n, 0.2));
                     make_param(ps, "b", {n}, off_kink_vec(rng, n, 0.2));
                     return [](Tape& t, ParamSet& p) {
                       return t.cosine(t.param(p, "a"), t.param(p, "b"));
                     };
                   }});

  return cases;
}

std::vector<Case> loss_cases() {
  std::vector<Case> cases;

  cases.push_back({"loss_source_ce", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int n = 3, c = 4;
                     make_param(ps, "l1", {n, c}, random_vec(rng, n * c, -2.0, 2.0));
                     make_param(ps, "l2", {n, c}, random_vec(rng, n * c, -2.0, 2.0));
                     std::vector<int> labels(n);
                     for (int i = 0; i < n; ++i) labels[i] = static_cast<int>(rng.below(c));
                     return [labels](Tape& t, ParamSet& p) {
                       return losses::source_ce(t, t.softmax(t.param(p, "l1")),
                                                t.softmax(t.param(p, "l2")), labels);
                     };
                   }});

  cases.push_back({"loss_spst_target", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int n = 4, c = 3;
                     make_param(ps, "l1", {n, c}, random_vec(rng, n * c, -2.0, 2.0));
                     make_param(ps, "l2", {n, c}, random_vec(rng, n * c, -2.0, 2.0));
                     std::vector<int> pseudo(n);
                     for (int i = 0; i < n; ++i)
                       pseudo[i] = rng.uniform() < 0.3 ? -1 : static_cast<int>(rng.below(c));
                     const double gamma = rng.uniform(0.1, 0.4);
                     return [pseudo, gamma](Tape& t, ParamSet& p) {
                       Value product =
                           t.mul(t.softmax(t.param(p, "l1")), t.softmax(t.param(p, "l2")));
                       return losses::spst_target_loss(t, product, pseudo, gamma);
                     };
                   }});

  cases.push_back({"loss_mix", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int c = 4;
                     make_param(ps, "logits", {c}, random_vec(rng, c, -2.0, 2.0));
                     auto vl = random_vec(rng, c, 0.05, 1.0);
                     double z = 0.0;
                     for (double v : vl) z += v;
                     for (double& v : vl) v /= z;
                     return [vl](Tape& t, ParamSet& p) {
                       return losses::mix_loss(t, t.softmax(t.param(p, "logits")), vl);
                     };
                   }});

  cases.push_back({"loss_implicit", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int n = 3;
                     make_param(ps, "pred", {n, 4}, random_vec(rng, n * 4));
                     std::vector<implicit::QuerySignal> targets(n);
                     for (auto& q : targets) {
                       geometry::Vec3 dir{rng.uniform(-1, 1), rng.uniform(-1, 1),
                                          rng.uniform(-1, 1)};
                       const double l1 = dir.norm_l1();
                       q.direction = dir / std::max(l1, 1e-9);
                       q.distance = rng.uniform(0.05, 0.3);
                     }
                     return [targets](Tape& t, ParamSet& p) {
                       return losses::implicit_loss(t, t.param(p, "pred"), targets);
                     };
                   }});

  cases.push_back({"loss_sim", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int d = 5;
                     make_param(ps, "z", {d}, off_kink_vec(rng, d, 0.2));
                     const auto zg = off_kink_vec(rng, d, 0.2);
                     return [zg](Tape& t, ParamSet& p) {
                       return losses::sim_loss(t, t.param(p, "z"), zg);
                     };
                   }});

  cases.push_back({"loss_cdc", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int n = 3, d = 4, classes = 3;
                     make_param(ps, "z", {n, d}, off_kink_vec(rng, n * d, 0.2));
                     FeatureBank bank;
                     for (int b = 0; b < 6; ++b) {
                       FeatureBank::Entry e;
                       e.feature = off_kink_vec(rng, d, 0.2);
                       e.label = b % classes;
                       bank.entries.push_back(e);
                     }
                     std::vector<int> pseudo(n);
                     for (int i = 0; i < n; ++i) pseudo[i] = static_cast<int>(rng.below(classes));
                     return [bank, pseudo](Tape& t, ParamSet& p) {
                       return losses::cdc_loss(t, t.param(p, "z"), pseudo, bank, 0.5);
                     };
                   }});

  cases.push_back({"loss_total", [](Rng& rng, ParamSet& ps) -> ScalarBuilder {
                     const int n = 2, c = 3;
                     make_param(ps, "l1", {n, c}, random_vec(rng, n * c, -2.0, 2.0));
                     make_param(ps, "l2", {n, c}, random_vec(rng, n * c, -2.0, 2.0));
                     make_param(ps, "zsim", {4}, off_kink_vec(rng, 4, 0.2));
                     std::vector<int> labels(n);
                     for (int i = 0; i < n; ++i) labels[i] = static_cast<int>(rng.below(c));
                     const auto zg = off_kink_vec(rng, 4, 0.2);
                     losses::LossWeights w;
                     return [labels, zg, w](Tape& t, ParamSet& p) {
                       Value p1 = t.softmax(t.param(p, "l1"));
                       Value p2 = t.softmax(t.param(p, "l2"));
                       Value cls = losses::source_ce(t, p1, p2, labels);
                       Value sim = losses::sim_loss(t, t.param(p, "zsim"), zg);
                       return losses::total_loss(t, cls, {}, {}, {}, {}, sim, w);
                     };
                   }});

  return cases;
}

}  // namespace

std::vector<GradCheckEntry> run_gradient_suite(uint64_t seed, int instances) {
  std::vector<GradCheckEntry> out;
  auto cases = kernel_cases();
  auto losses_list = loss_cases();
  cases.insert(cases.end(), losses_list.begin(), losses_list.end());

  for (size_t ci = 0; ci < cases.size(); ++ci) {
    GradCheckEntry entry;
    entry.name = cases[ci].name;
    for (int inst = 0; inst < instances; ++inst) {
      Rng rng = Rng::stream(seed, {static_cast<uint64_t>(ci), static_cast<uint64_t>(inst)});
      ParamSet params;
      ScalarBuilder f = cases[ci].make(rng, params);
      entry.max_error = std::max(entry.max_error, ad::grad_check(f, params, 1e-5));
      ++entry.instances;
    }
    out.push_back(std::move(entry));
  }
  return out;
}

bool all_within(const std::vector<GradCheckEntry>& entries, double tolerance) {
  for (const auto& e : entries)
    if (!(e.max_error < tolerance)) return false;
  return true;
}

}  // namespace tam::diagnostics
