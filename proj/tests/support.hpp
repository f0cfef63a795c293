#pragma once

// Shared harness for the unit tests and the acceptance binary: random
// instance generators, oracle-equivalence and finite-difference suites.
// Every suite returns the worst deviation it saw so callers decide the
// threshold.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "madan/madan.hpp"

namespace madan::check {

using Vec = std::vector<double>;

struct Gen {
  std::mt19937_64 rng;
  explicit Gen(std::uint64_t seed) : rng(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
  Vec uniforms(std::size_t n, double lo, double hi) {
    Vec v(n);
    for (auto& x : v) x = uniform(lo, hi);
    return v;
  }
  // Probabilities with occasional exact 0/1 and near-edge values so clamping is exercised.
  Vec scores(std::size_t n) {
    Vec v(n);
    for (auto& x : v) {
      const int r = integer(0, 19);
      x = r == 0 ? 0.0 : r == 1 ? 1.0 : r == 2 ? 1e-9 : r == 3 ? 1.0 - 1e-9 : uniform(0.0, 1.0);
    }
    return v;
  }
  std::vector<int> labels(std::size_t n, int L, double ignore_rate = 0.0) {
    std::vector<int> v(n);
    for (auto& y : v) y = uniform(0.0, 1.0) < ignore_rate ? kIgnoreLabel : integer(0, L - 1);
    return v;
  }
};

inline torch::Tensor t64(const Vec& v, std::vector<std::int64_t> shape) {
  return torch::tensor(v, torch::kFloat64).reshape(shape);
}

inline torch::Tensor ti64(const std::vector<int>& v, std::vector<std::int64_t> shape) {
  return torch::tensor(std::vector<std::int64_t>(v.begin(), v.end()), torch::kInt64).reshape(shape);
}

inline Vec vec(const torch::Tensor& t) {
  const auto c = t.detach().to(torch::kFloat64).contiguous().flatten();
  return Vec(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
}

inline double value(const torch::Tensor& t) { return t.item<double>(); }

inline Vec sigmoid(const Vec& z) {
  Vec p(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) p[i] = 1.0 / (1.0 + std::exp(-z[i]));
  return p;
}

struct CheckResult {
  std::string name;
  int instances = 0;
  double worst = 0.0;  // max |impl - oracle| or max relative gradient error
};

inline void note(CheckResult& r, double dev) {
  ++r.instances;
  if (!(dev <= r.worst)) r.worst = std::isnan(dev) ? INFINITY : dev;
}

inline Score score_of(const Vec& p, std::vector<std::int64_t> shape) { return Score::from_probabilities(t64(p, shape)); }

// Patch-shaped score tensor B×1×h×w with small random extents.
struct PatchShape {
  std::int64_t b, h, w;
  std::size_t n() const { return static_cast<std::size_t>(b * h * w); }
  std::vector<std::int64_t> dims() const { return {b, 1, h, w}; }
};

inline PatchShape random_patch(Gen& g) { return {g.integer(1, 4), g.integer(1, 3), g.integer(1, 3)}; }

inline std::vector<std::optional<double>> naive_recall(const std::vector<int>& pred, const std::vector<int>& gt, int L) {
  std::vector<std::optional<double>> out(static_cast<std::size_t>(L));
  for (int l = 0; l < L; ++l) {
    int total = 0, right = 0;
    for (std::size_t i = 0; i < gt.size(); ++i)
      if (gt[i] == l) {
        ++total;
        right += pred[i] == l;
      }
    if (total > 0) out[static_cast<std::size_t>(l)] = static_cast<double>(right) / total;
  }
  return out;
}

inline double optional_gap(const std::vector<std::optional<double>>& a, const std::vector<std::optional<double>>& b) {
  if (a.size() != b.size()) return INFINITY;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].has_value() != b[i].has_value()) return INFINITY;
    if (a[i]) worst = std::max(worst, std::fabs(*a[i] - *b[i]));
  }
  return worst;
}

/// Vectorized losses and metrics against the loop oracles.
inline std::vector<CheckResult> oracle_equivalence(std::uint64_t seed, int instances = 50) {
  namespace ref = reference;
  Gen g(seed);
  std::vector<CheckResult> out;
  auto run = [&](const std::string& name, const std::function<double()>& one) {
    CheckResult r{name};
    for (int k = 0; k < instances; ++k) note(r, one());
    out.push_back(r);
  };

  for (bool literal : {false, true}) {
    const auto conv = literal ? GanConvention::paper_literal : GanConvention::standard;
    const std::string tag = literal ? "[literal]" : "[standard]";
    run("gan_loss_src_to_tgt" + tag, [&] {
      const auto sa = random_patch(g), st = random_patch(g);
      const auto a = g.scores(sa.n()), t = g.scores(st.n());
      return std::fabs(value(gan_loss_src_to_tgt(score_of(a, sa.dims()), score_of(t, st.dims()), conv)) -
                       ref::naive_gan_src_to_tgt(a, t, literal));
    });
    run("gan_loss_tgt_to_src" + tag, [&] {
      const auto ss = random_patch(g), sb = random_patch(g);
      const auto s = g.scores(ss.n()), b = g.scores(sb.n());
      return std::fabs(value(gan_loss_tgt_to_src(score_of(s, ss.dims()), score_of(b, sb.dims()), conv)) -
                       ref::naive_gan_tgt_to_src(s, b, literal));
    });
    run("fla_loss" + tag, [&] {
      const std::int64_t b = g.integer(1, 4), h = g.integer(1, 4);
      const auto a = g.scores(static_cast<std::size_t>(b * h * h)), t = g.scores(static_cast<std::size_t>(b * h * h));
      return std::fabs(value(fla_loss(score_of(a, {b, 1, h, h}), score_of(t, {b, 1, h, h}), conv)) -
                       ref::naive_fla(a, t, literal));
    });
  }

  auto one_vs_rest = [&](bool sad) {
    const int M = g.integer(2, 5);
    const auto so = random_patch(g);
    const auto own = g.scores(so.n());
    std::vector<Vec> others;
    std::vector<Score> other_scores;
    for (int j = 0; j < M - 1; ++j) {
      const auto sj = random_patch(g);
      others.push_back(g.scores(sj.n()));
      other_scores.push_back(score_of(others.back(), sj.dims()));
    }
    const auto impl = sad ? sad_loss(score_of(own, so.dims()), other_scores)
                          : ccd_loss(score_of(own, so.dims()), other_scores);
    return std::fabs(value(impl) - (sad ? ref::naive_sad(own, others) : ref::naive_ccd(own, others)));
  };
  run("sad_loss", [&] { return one_vs_rest(true); });
  run("ccd_loss", [&] { return one_vs_rest(false); });

  run("cycle_loss", [&] {
    const std::int64_t b = g.integer(1, 3), c = g.integer(1, 3), h = g.integer(1, 6);
    const auto n = static_cast<std::size_t>(b * c * h * h);
    const auto x = g.uniforms(n, -1, 1), y = g.uniforms(n, -1, 1);
    return std::fabs(value(cycle_loss(t64(x, {b, c, h, h}), t64(y, {b, c, h, h}))) - ref::naive_cycle(x, y));
  });

  run("dsc_loss", [&] {
    const int B = g.integer(1, 4), L = g.integer(2, 6), h = g.integer(1, 3);
    const auto n = static_cast<std::size_t>(B * L * h * h);
    const auto p = g.uniforms(n, -4, 4), q = g.uniforms(n, -4, 4);
    const auto impl = h == 1 ? dsc_loss(t64(p, {B, L}), t64(q, {B, L})) : dsc_loss(t64(p, {B, L, h, h}), t64(q, {B, L, h, h}));
    return std::fabs(value(impl) - ref::naive_kl(p, q, B, L, h * h));
  });

  run("cla_task_loss_classification", [&] {
    const int B = g.integer(1, 8), L = g.integer(2, 10);
    const auto z = g.uniforms(static_cast<std::size_t>(B * L), -5, 5);
    const auto y = g.labels(static_cast<std::size_t>(B), L);
    return std::fabs(value(cla_task_loss_classification(t64(z, {B, L}), ti64(y, {B}))) -
                     ref::naive_cross_entropy(z, y, B, L, 1));
  });

  run("task_loss_segmentation", [&] {
    const int B = g.integer(1, 3), L = g.integer(2, 5), H = g.integer(2, 5), W = g.integer(2, 5);
    const auto z = g.uniforms(static_cast<std::size_t>(B * L * H * W), -5, 5);
    auto y = g.labels(static_cast<std::size_t>(B * H * W), L, 0.2);
    y[0] = 0;  // at least one site counts
    return std::fabs(value(task_loss_segmentation(t64(z, {B, L, H, W}), ti64(y, {B, H, W}))) -
                     ref::naive_cross_entropy(z, y, B, L, H * W));
  });

  run("pseudo_label", [&] {
    const int B = g.integer(1, 3), L = g.integer(2, 5), H = 4, W = 4;
    auto z = g.uniforms(static_cast<std::size_t>(B * L * H * W), -2, 2);
    for (auto& v : z) v = std::round(v * 2.0) / 2.0;  // coarse grid forces ties
    const auto impl = pseudo_label(t64(z, {B, L, H, W}));
    const auto naive = ref::naive_argmax(z, B, L, H * W);
    const auto got = impl.contiguous().flatten();
    int mismatches = 0;
    for (std::size_t i = 0; i < naive.size(); ++i) mismatches += got[static_cast<long>(i)].item<std::int64_t>() != naive[i];
    return static_cast<double>(mismatches);
  });

  auto random_grid_case = [&](int& H, int& W, int& rows, int& cols, int& L, std::vector<int>& labels) {
    rows = g.integer(1, 4);
    cols = g.integer(1, 4);
    H = rows * g.integer(1, 4);
    W = cols * g.integer(1, 4);
    L = g.integer(2, 5);
    labels = g.labels(static_cast<std::size_t>(H * W), L, 0.1);
  };
  auto to_map = [](const std::vector<int>& labels, int H, int W) {
    LabelMap m(H, W);
    for (std::size_t i = 0; i < labels.size(); ++i) m.labels[i] = static_cast<std::uint8_t>(labels[i]);
    return m;
  };
  run("grid_label_histogram", [&] {
    int H, W, rows, cols, L;
    std::vector<int> labels;
    random_grid_case(H, W, rows, cols, L, labels);
    const auto naive = ref::naive_grid_histogram(labels, H, W, rows, cols, L);
    const auto impl = grid_label_histogram(to_map(labels, H, W), GridSpec{rows, cols}, L);
    const auto batched = vec(grid_label_tensor(ti64(labels, {1, H, W}), GridSpec{rows, cols}, L));
    double worst = 0.0;
    for (std::size_t i = 0; i < naive.size(); ++i)
      worst = std::max({worst, std::fabs(impl.raw[i] - naive[i]), std::fabs(batched[i] - naive[i])});
    return worst;
  });
  run("normalize_grid_labels", [&] {
    int H, W, rows, cols, L;
    std::vector<int> labels;
    random_grid_case(H, W, rows, cols, L, labels);
    const auto raw = ref::naive_grid_histogram(labels, H, W, rows, cols, L);
    const auto naive = ref::naive_normalize(raw, L, rows * cols);
    const auto impl = normalize_grid_labels(grid_label_histogram(to_map(labels, H, W), GridSpec{rows, cols}, L));
    const auto batched =
        vec(normalize_grid_tensor(grid_label_tensor(ti64(labels, {1, H, W}), GridSpec{rows, cols}, L)));
    double worst = 0.0;
    for (std::size_t i = 0; i < naive.size(); ++i)
      worst = std::max({worst, std::fabs(impl.normalized[i] - naive[i]), std::fabs(batched[i] - naive[i])});
    return worst;
  });

  run("cla_loss", [&] {
    const int B = g.integer(1, 3), L = g.integer(2, 4), r = g.integer(1, 3);
    const int N = r * r;
    const auto n = static_cast<std::size_t>(B * L * N);
    const auto da = g.scores(n), dt = g.scores(n);
    Vec na, nt;
    for (int b = 0; b < B; ++b) {
      const auto la = g.labels(static_cast<std::size_t>(4 * N), L), lt = g.labels(static_cast<std::size_t>(4 * N), L);
      const auto ra = reference::naive_normalize(reference::naive_grid_histogram(la, 2 * r, 2 * r, r, r, L), L, N);
      const auto rt = reference::naive_normalize(reference::naive_grid_histogram(lt, 2 * r, 2 * r, r, r, L), L, N);
      na.insert(na.end(), ra.begin(), ra.end());
      nt.insert(nt.end(), rt.begin(), rt.end());
    }
    const std::vector<std::int64_t> dims{B, L, r, r};
    const auto impl = cla_loss(score_of(da, dims), score_of(dt, dims), t64(na, dims), t64(nt, dims));
    return std::fabs(value(impl) - ref::naive_cla(da, dt, na, nt, B, L, N));
  });

  auto total_case = [&](bool plus) {
    const auto& names = plus ? madan_plus_terms() : madan_terms();
    std::map<std::string, double> comps;
    LossWeights w;
    Vec terms, weights;
    for (const auto& nme : names) {
      const double t = g.uniform(-3, 3);
      comps[nme] = t;
      terms.push_back(t);
    }
    for (auto& [k, ptr] : w.fields()) *ptr = g.uniform(0, 2);
    for (const auto& nme : names) weights.push_back(w.get(nme));
    const double impl = plus ? total_madan_plus_loss(comps, w) : total_madan_loss(comps, w);
    return std::fabs(impl - ref::naive_weighted_sum(terms, weights));
  };
  run("total_madan_loss", [&] { return total_case(false); });
  run("total_madan_plus_loss", [&] { return total_case(true); });

  run("confusion_matrix", [&] {
    const int L = g.integer(2, 6);
    const auto n = static_cast<std::size_t>(g.integer(1, 60));
    const auto gt = g.labels(n, L, 0.1), pred = g.labels(n, L);
    const auto impl = confusion_matrix(ti64(pred, {static_cast<std::int64_t>(n)}), ti64(gt, {static_cast<std::int64_t>(n)}), L);
    return impl == ref::naive_confusion(pred, gt, L) ? 0.0 : 1.0;
  });
  run("classification_accuracy", [&] {
    const int L = g.integer(2, 8);
    const auto n = static_cast<std::size_t>(g.integer(1, 80));
    const auto gt = g.labels(n, L), pred = g.labels(n, L);
    return std::fabs(classification_accuracy(pred, gt, L) - ref::naive_macro_accuracy(pred, gt, L));
  });
  run("per_class_accuracy", [&] {
    const int L = g.integer(2, 8);
    const auto n = static_cast<std::size_t>(g.integer(1, 80));
    const auto gt = g.labels(n, L), pred = g.labels(n, L);
    const auto s = static_cast<std::int64_t>(n);
    return optional_gap(per_class_recall(confusion_matrix(ti64(pred, {s}), ti64(gt, {s}), L)), naive_recall(pred, gt, L));
  });
  run("micro_accuracy", [&] {
    const int L = g.integer(2, 6);
    const auto n = static_cast<std::size_t>(g.integer(1, 60));
    const auto gt = g.labels(n, L, 0.1);
    auto pred = g.labels(n, L);
    if (std::all_of(gt.begin(), gt.end(), [](int v) { return v == kIgnoreLabel; })) return 0.0;
    const auto s = static_cast<std::int64_t>(n);
    return std::fabs(micro_accuracy(confusion_matrix(ti64(pred, {s}), ti64(gt, {s}), L)) -
                     ref::naive_micro_accuracy(pred, gt));
  });
  run("class_wise_iou", [&] {
    const int L = g.integer(2, 6), B = g.integer(1, 3), H = g.integer(1, 6), W = g.integer(1, 6);
    const auto n = static_cast<std::size_t>(B * H * W);
    const auto gt = g.labels(n, L, 0.1), pred = g.labels(n, L);
    return optional_gap(class_wise_iou(ti64(pred, {B, H, W}), ti64(gt, {B, H, W}), L), ref::naive_cwiou(pred, gt, L));
  });
  run("mean_iou", [&] {
    const int L = g.integer(2, 6), B = g.integer(1, 3), H = g.integer(1, 6), W = g.integer(1, 6);
    const auto n = static_cast<std::size_t>(B * H * W);
    const auto gt = g.labels(n, L, 0.1), pred = g.labels(n, L);
    return std::fabs(mean_iou(class_wise_iou(ti64(pred, {B, H, W}), ti64(gt, {B, H, W}), L)) -
                     ref::naive_miou(pred, gt, L));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Finite differences

/// Analytic gradient of `impl` (autograd, 64-bit) at `params`, checked
/// against central differences of `oracle` evaluated on the same params.
inline double gradient_error(const Vec& params, const std::function<torch::Tensor(const torch::Tensor&)>& impl,
                             const std::function<double(std::span<const double>)>& oracle) {
  auto p = torch::tensor(params, torch::kFloat64).requires_grad_(true);
  impl(p).backward();
  const auto grad = vec(p.grad());
  const auto rep = reference::finite_difference_gradient(oracle, params, grad, 1e-3, 1e-4);
  return rep.max_relative_error;
}

inline Vec slice(std::span<const double> p, std::size_t at, std::size_t n) { return Vec(p.begin() + static_cast<long>(at), p.begin() + static_cast<long>(at + n)); }

/// Every loss with respect to each of its differentiable inputs. GAN-type
/// losses are differentiated through the logistic map, as in training.
inline std::vector<CheckResult> gradient_checks(std::uint64_t seed, int instances = 20) {
  namespace ref = reference;
  Gen g(seed);
  std::vector<CheckResult> out;
  auto run = [&](const std::string& name, const std::function<double()>& one) {
    CheckResult r{name};
    for (int k = 0; k < instances; ++k) note(r, one());
    out.push_back(r);
  };
  auto sig = [](const torch::Tensor& z, std::vector<std::int64_t> shape) { return Score::from_logits(z.reshape(shape)); };

  for (bool literal : {false, true}) {
    const auto conv = literal ? GanConvention::paper_literal : GanConvention::standard;
    const std::string tag = literal ? "[literal]" : "[standard]";
    auto pair_loss = [&](int which) {
      const auto a = random_patch(g), b = random_patch(g);
      const auto na = static_cast<std::int64_t>(a.n()), nb = static_cast<std::int64_t>(b.n());
      const auto params = g.uniforms(a.n() + b.n(), -3, 3);
      auto impl = [&](const torch::Tensor& p) {
        const auto s0 = sig(p.slice(0, 0, na), a.dims()), s1 = sig(p.slice(0, na, na + nb), b.dims());
        return which == 0 ? gan_loss_src_to_tgt(s0, s1, conv)
               : which == 1 ? gan_loss_tgt_to_src(s0, s1, conv)
                            : fla_loss(s0, s1, conv);
      };
      auto oracle = [&](std::span<const double> p) {
        const auto s0 = sigmoid(slice(p, 0, a.n())), s1 = sigmoid(slice(p, a.n(), b.n()));
        return which == 0 ? ref::naive_gan_src_to_tgt(s0, s1, literal)
               : which == 1 ? ref::naive_gan_tgt_to_src(s0, s1, literal)
                            : ref::naive_fla(s0, s1, literal);
      };
      return gradient_error(params, impl, oracle);
    };
    run("gan_loss_src_to_tgt" + tag, [&] { return pair_loss(0); });
    run("gan_loss_tgt_to_src" + tag, [&] { return pair_loss(1); });
    run("fla_loss" + tag, [&] { return pair_loss(2); });
  }

  auto one_vs_rest = [&](bool sad) {
    const int M = g.integer(2, 4);
    std::vector<PatchShape> shapes;
    std::size_t total = 0;
    for (int j = 0; j < M; ++j) {
      shapes.push_back(random_patch(g));
      total += shapes.back().n();
    }
    const auto params = g.uniforms(total, -3, 3);
    auto impl = [&](const torch::Tensor& p) {
      std::vector<Score> s;
      std::int64_t at = 0;
      for (const auto& sh : shapes) {
        s.push_back(sig(p.slice(0, at, at + static_cast<std::int64_t>(sh.n())), sh.dims()));
        at += static_cast<std::int64_t>(sh.n());
      }
      const std::vector<Score> rest(s.begin() + 1, s.end());
      return sad ? sad_loss(s[0], rest) : ccd_loss(s[0], rest);
    };
    auto oracle = [&](std::span<const double> p) {
      std::vector<Vec> s;
      std::size_t at = 0;
      for (const auto& sh : shapes) {
        s.push_back(sigmoid(slice(p, at, sh.n())));
        at += sh.n();
      }
      const std::vector<Vec> rest(s.begin() + 1, s.end());
      return sad ? ref::naive_sad(s[0], rest) : ref::naive_ccd(s[0], rest);
    };
    return gradient_error(params, impl, oracle);
  };
  run("sad_loss", [&] { return one_vs_rest(true); });
  run("ccd_loss", [&] { return one_vs_rest(false); });

  run("cycle_loss", [&] {
    const std::int64_t b = g.integer(1, 2), c = g.integer(1, 3), h = g.integer(1, 3);
    const auto n = static_cast<std::size_t>(b * c * h * h);
    // keep |x - y| well above the step so the kink is never straddled
    Vec params = g.uniforms(2 * n, -1, 1);
    for (std::size_t i = 0; i < n; ++i)
      if (std::fabs(params[i] - params[n + i]) < 0.05) params[n + i] = params[i] + (params[i] < 0 ? 0.3 : -0.3);
    auto impl = [&](const torch::Tensor& p) {
      const auto ni = static_cast<std::int64_t>(n);
      return cycle_loss(p.slice(0, 0, ni).reshape({b, c, h, h}), p.slice(0, ni, 2 * ni).reshape({b, c, h, h}));
    };
    auto oracle = [&](std::span<const double> p) { return ref::naive_cycle(slice(p, 0, n), slice(p, n, n)); };
    return gradient_error(params, impl, oracle);
  });

  run("dsc_loss", [&] {
    const int B = g.integer(1, 3), L = g.integer(2, 5), h = g.integer(1, 2);
    const auto n = static_cast<std::size_t>(B * L * h * h);
    const auto params = g.uniforms(n, -2, 2);
    const auto frozen = g.uniforms(n, -2, 2);
    const std::vector<std::int64_t> dims = h == 1 ? std::vector<std::int64_t>{B, L} : std::vector<std::int64_t>{B, L, h, h};
    auto impl = [&](const torch::Tensor& p) { return dsc_loss(p.reshape(dims), t64(frozen, dims)); };
    auto oracle = [&](std::span<const double> p) { return ref::naive_kl(Vec(p.begin(), p.end()), frozen, B, L, h * h); };
    return gradient_error(params, impl, oracle);
  });

  run("cla_task_loss_classification", [&] {
    const int B = g.integer(1, 4), L = g.integer(2, 6);
    const auto params = g.uniforms(static_cast<std::size_t>(B * L), -3, 3);
    const auto y = g.labels(static_cast<std::size_t>(B), L);
    auto impl = [&](const torch::Tensor& p) { return cla_task_loss_classification(p.reshape({B, L}), ti64(y, {B})); };
    auto oracle = [&](std::span<const double> p) { return ref::naive_cross_entropy(Vec(p.begin(), p.end()), y, B, L, 1); };
    return gradient_error(params, impl, oracle);
  });

  run("task_loss_segmentation", [&] {
    const int B = g.integer(1, 2), L = g.integer(2, 4), H = g.integer(2, 3), W = g.integer(2, 3);
    const auto params = g.uniforms(static_cast<std::size_t>(B * L * H * W), -3, 3);
    auto y = g.labels(static_cast<std::size_t>(B * H * W), L, 0.2);
    y[0] = 0;
    auto impl = [&](const torch::Tensor& p) { return task_loss_segmentation(p.reshape({B, L, H, W}), ti64(y, {B, H, W})); };
    auto oracle = [&](std::span<const double> p) {
      return ref::naive_cross_entropy(Vec(p.begin(), p.end()), y, B, L, H * W);
    };
    return gradient_error(params, impl, oracle);
  });

  run("cla_loss", [&] {
    const int B = g.integer(1, 2), L = g.integer(2, 3), r = g.integer(1, 2);
    const int N = r * r;
    const auto n = static_cast<std::size_t>(B * L * N);
    Vec na, nt;
    for (int b = 0; b < B; ++b) {
      const auto la = g.labels(static_cast<std::size_t>(4 * N), L), lt = g.labels(static_cast<std::size_t>(4 * N), L);
      const auto ra = ref::naive_normalize(ref::naive_grid_histogram(la, 2 * r, 2 * r, r, r, L), L, N);
      const auto rt = ref::naive_normalize(ref::naive_grid_histogram(lt, 2 * r, 2 * r, r, r, L), L, N);
      na.insert(na.end(), ra.begin(), ra.end());
      nt.insert(nt.end(), rt.begin(), rt.end());
    }
    const std::vector<std::int64_t> dims{B, L, r, r};
    const auto params = g.uniforms(2 * n, -3, 3);
    auto impl = [&](const torch::Tensor& p) {
      const auto ni = static_cast<std::int64_t>(n);
      return cla_loss(sig(p.slice(0, 0, ni), dims), sig(p.slice(0, ni, 2 * ni), dims), t64(na, dims), t64(nt, dims));
    };
    auto oracle = [&](std::span<const double> p) {
      return ref::naive_cla(sigmoid(slice(p, 0, n)), sigmoid(slice(p, n, n)), na, nt, B, L, N);
    };
    return gradient_error(params, impl, oracle);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Analytic spot values

struct SpotValue {
  std::string name;
  double got;
  double expected;
  double tolerance;
  bool ok() const { return std::fabs(got - expected) <= tolerance; }
};

inline std::vector<SpotValue> analytic_spot_values() {
  std::vector<SpotValue> out;
  const double eps = 1e-7;
  {
    const auto dyn = torch::tensor({std::log(1.0 - eps), std::log(eps)}, torch::kFloat64).reshape({1, 2});
    const auto uni = torch::zeros({1, 2}, torch::kFloat64);
    out.push_back({"dsc_loss((1-eps, eps) || uniform)", value(dsc_loss(dyn, uni)), std::numbers::ln2, 1e-4});
  }
  for (int L : {2, 4, 10}) {
    const auto z = torch::zeros({3, L}, torch::kFloat64);
    const auto y = torch::tensor(std::vector<std::int64_t>{0, 1, L - 1});
    out.push_back({"uniform-logits cross-entropy L=" + std::to_string(L), value(cla_task_loss_classification(z, y)),
                   std::log(static_cast<double>(L)), 1e-9});
    const auto zm = torch::zeros({2, L, 3, 3}, torch::kFloat64);
    const auto ym = torch::randint(0, L, {2, 3, 3}, torch::kInt64);
    out.push_back({"uniform-logits segmentation loss L=" + std::to_string(L), value(task_loss_segmentation(zm, ym)),
                   std::log(static_cast<double>(L)), 1e-9});
  }
  const double two_ln_half = 2.0 * std::log(0.5);
  const auto half = Score::from_logits(torch::zeros({4, 1, 2, 2}, torch::kFloat64));
  for (auto c : {GanConvention::standard, GanConvention::paper_literal}) {
    const std::string tag = "[" + to_string(c) + "]";
    out.push_back({"gan_loss_src_to_tgt 0.5 " + tag, value(gan_loss_src_to_tgt(half, half, c)), two_ln_half, 1e-9});
    out.push_back({"gan_loss_tgt_to_src 0.5 " + tag, value(gan_loss_tgt_to_src(half, half, c)), two_ln_half, 1e-9});
    out.push_back({"fla_loss 0.5 " + tag, value(fla_loss(half, half, c)), two_ln_half, 1e-9});
  }
  out.push_back({"sad_loss 0.5 M=2", value(sad_loss(half, {half})), two_ln_half, 1e-9});
  out.push_back({"sad_loss 0.5 M=3", value(sad_loss(half, {half, half})), two_ln_half, 1e-9});
  out.push_back({"ccd_loss 0.5 M=2", value(ccd_loss(half, {half})), two_ln_half, 1e-9});
  {
    const auto pred = torch::tensor(std::vector<std::int64_t>{0, 0, 1, 1}).reshape({1, 2, 2});
    const auto gt = torch::tensor(std::vector<std::int64_t>{0, 1, 1, 1}).reshape({1, 2, 2});
    out.push_back({"mIoU of the 2x2 example", mean_iou(class_wise_iou(pred, gt, 2)), 7.0 / 12.0, 1e-12});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grid-label invariants

struct GridInvariantResult {
  int maps = 0;
  double worst_partition = 0.0;      // max |sum_l raw - 1| over cells with valid pixels
  double worst_normalization = 0.0;  // max distance of a class row sum to {0, 1}
};

/// Random label maps built from rectangles so classes are often absent.
inline GridInvariantResult grid_invariants(std::uint64_t seed, int maps = 100) {
  Gen g(seed);
  GridInvariantResult r;
  for (int k = 0; k < maps; ++k) {
    const int rows = g.integer(1, 8), cols = g.integer(1, 8);
    const int H = rows * g.integer(1, 6), W = cols * g.integer(1, 6);
    const int L = g.integer(2, 8);
    LabelMap m(H, W, static_cast<std::uint8_t>(g.integer(0, L - 1)));
    const int rects = g.integer(0, 4);
    for (int q = 0; q < rects; ++q) {
      const int y0 = g.integer(0, H - 1), x0 = g.integer(0, W - 1);
      const int y1 = g.integer(y0, H - 1), x1 = g.integer(x0, W - 1);
      const auto v = static_cast<std::uint8_t>(g.uniform(0, 1) < 0.15 ? kIgnoreLabel : g.integer(0, L - 1));
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) m.at(y, x) = v;
    }
    const GridSpec grid{rows, cols};
    const auto gl = normalize_grid_labels(grid_label_histogram(m, grid, L));
    const int ch = H / rows, cw = W / cols;
    for (int n = 0; n < gl.cells; ++n) {
      bool any_valid = false;
      for (int y = (n / cols) * ch; y < (n / cols + 1) * ch; ++y)
        for (int x = (n % cols) * cw; x < (n % cols + 1) * cw; ++x) any_valid |= m.at(y, x) != kIgnoreLabel;
      double s = 0.0;
      for (int l = 0; l < L; ++l) s += gl.raw_at(l, n);
      r.worst_partition = std::max(r.worst_partition, std::fabs(s - (any_valid ? 1.0 : 0.0)));
    }
    for (int l = 0; l < L; ++l) {
      double s = 0.0;
      for (int n = 0; n < gl.cells; ++n) s += gl.normalized_at(l, n);
      r.worst_normalization = std::max(r.worst_normalization, std::min(std::fabs(s), std::fabs(s - 1.0)));
    }
    ++r.maps;
  }
  return r;
}

}  // namespace madan::check
