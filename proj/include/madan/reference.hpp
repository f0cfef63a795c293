#pragma once

// Loop-based oracles for every loss, metric and grid computation, and a
// central finite-difference gradient checker.
//
// Nothing here calls into the vectorized implementations: inputs are flat
// std::vector<double> buffers with explicit shapes and every reduction is an
// explicit loop with 64-bit accumulation. Oracles refuse inputs larger than
// kMaxOracleElements.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "madan/error.hpp"

namespace madan::reference {

inline constexpr std::size_t kMaxOracleElements = 10000;
inline constexpr double kEps = 1e-7;
inline constexpr int kIgnore = 255;

inline void check_size(std::size_t n) {
  if (n > kMaxOracleElements)
    fail(ErrorKind::contract, "oracle input too large (" + std::to_string(n) + " elements)");
}

inline double clamped_log(double p) {
  if (p < kEps) p = kEps;
  if (p > 1.0 - kEps) p = 1.0 - kEps;
  return std::log(p);
}

inline double clamped_log1m(double p) {
  if (p < kEps) p = kEps;
  if (p > 1.0 - kEps) p = 1.0 - kEps;
  return std::log(1.0 - p);
}

inline double mean_of_log(const std::vector<double>& s) {
  check_size(s.size());
  double acc = 0.0;
  for (double v : s) acc += clamped_log(v);
  return acc / static_cast<double>(s.size());
}

inline double mean_of_log1m(const std::vector<double>& s) {
  check_size(s.size());
  double acc = 0.0;
  for (double v : s) acc += clamped_log1m(v);
  return acc / static_cast<double>(s.size());
}

// Source->target GAN value. literal: as printed; otherwise target = real.
inline double naive_gan_src_to_tgt(const std::vector<double>& d_adapted, const std::vector<double>& d_target,
                                   bool literal) {
  if (literal) return mean_of_log(d_adapted) + mean_of_log1m(d_target);
  return mean_of_log(d_target) + mean_of_log1m(d_adapted);
}

inline double naive_gan_tgt_to_src(const std::vector<double>& d_source, const std::vector<double>& d_back,
                                   bool literal) {
  if (literal) return mean_of_log1m(d_source) + mean_of_log(d_back);
  return mean_of_log(d_source) + mean_of_log1m(d_back);
}

inline double naive_fla(const std::vector<double>& d_adapted, const std::vector<double>& d_target, bool literal) {
  double a = 0.0, b = 0.0;
  for (double v : d_adapted) a += literal ? clamped_log(v) : clamped_log1m(v);
  for (double v : d_target) b += literal ? clamped_log1m(v) : clamped_log(v);
  check_size(d_adapted.size() + d_target.size());
  return a / static_cast<double>(d_adapted.size()) + b / static_cast<double>(d_target.size());
}

inline double naive_sad(const std::vector<double>& own, const std::vector<std::vector<double>>& others) {
  if (others.empty()) fail(ErrorKind::contract, "naive_sad: no other domains");
  double rest = 0.0;
  for (const auto& o : others) rest += mean_of_log1m(o);
  return mean_of_log(own) + rest / static_cast<double>(others.size());
}

inline double naive_ccd(const std::vector<double>& real_source, const std::vector<std::vector<double>>& cross) {
  if (cross.empty()) fail(ErrorKind::contract, "naive_ccd: no cross-cycled sets");
  double first = 0.0;
  for (double v : real_source) first += clamped_log(v);
  first /= static_cast<double>(real_source.size());
  double second = 0.0;
  for (const auto& set : cross) {
    double acc = 0.0;
    for (double v : set) acc += clamped_log1m(v);
    second += acc / static_cast<double>(set.size());
  }
  check_size(real_source.size());
  return first + second / static_cast<double>(cross.size());
}

inline double naive_cycle(const std::vector<double>& x, const std::vector<double>& y) {
  check_size(x.size());
  if (x.size() != y.size()) fail(ErrorKind::shape, "naive_cycle: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += std::fabs(x[i] - y[i]);
  return acc / static_cast<double>(x.size());
}

/// Softmax of the column at (b, :, s) in a B×L×S layout.
inline std::vector<double> site_softmax(const std::vector<double>& logits, int L, int S, int b, int s) {
  std::vector<double> p(static_cast<std::size_t>(L));
  double mx = -INFINITY;
  for (int l = 0; l < L; ++l) mx = std::max(mx, logits[(static_cast<std::size_t>(b) * L + l) * S + s]);
  double z = 0.0;
  for (int l = 0; l < L; ++l) {
    p[static_cast<std::size_t>(l)] = std::exp(logits[(static_cast<std::size_t>(b) * L + l) * S + s] - mx);
    z += p[static_cast<std::size_t>(l)];
  }
  for (auto& v : p) v /= z;
  return p;
}

/// Mean over (b, s) of KL(softmax(dynamic) || softmax(frozen)); layout B×L×S.
inline double naive_kl(const std::vector<double>& dynamic, const std::vector<double>& frozen, int B, int L, int S) {
  check_size(dynamic.size());
  double acc = 0.0;
  for (int b = 0; b < B; ++b)
    for (int s = 0; s < S; ++s) {
      const auto p = site_softmax(dynamic, L, S, b, s);
      const auto q = site_softmax(frozen, L, S, b, s);
      for (int l = 0; l < L; ++l)
        if (p[static_cast<std::size_t>(l)] > 0.0)
          acc += p[static_cast<std::size_t>(l)] * std::log(p[static_cast<std::size_t>(l)] / q[static_cast<std::size_t>(l)]);
    }
  return acc / (static_cast<double>(B) * S);
}

/// Mean negative log-softmax at the label over non-ignore sites; layout B×L×S, labels B×S.
inline double naive_cross_entropy(const std::vector<double>& logits, const std::vector<int>& labels, int B, int L,
                                  int S) {
  check_size(logits.size());
  double acc = 0.0;
  int count = 0;
  for (int b = 0; b < B; ++b)
    for (int s = 0; s < S; ++s) {
      const int y = labels[static_cast<std::size_t>(b) * S + s];
      if (y == kIgnore) continue;
      if (y < 0 || y >= L) fail(ErrorKind::contract, "naive_cross_entropy: label out of range");
      const auto p = site_softmax(logits, L, S, b, s);
      acc -= std::log(p[static_cast<std::size_t>(y)]);
      ++count;
    }
  if (count == 0) fail(ErrorKind::undefined_loss, "naive_cross_entropy: every site ignored");
  return acc / count;
}

inline std::vector<int> naive_argmax(const std::vector<double>& logits, int B, int L, int S) {
  check_size(logits.size());
  std::vector<int> out(static_cast<std::size_t>(B) * S, 0);
  for (int b = 0; b < B; ++b)
    for (int s = 0; s < S; ++s) {
      int best = 0;
      for (int l = 1; l < L; ++l)
        if (logits[(static_cast<std::size_t>(b) * L + l) * S + s] > logits[(static_cast<std::size_t>(b) * L + best) * S + s])
          best = l;
      out[static_cast<std::size_t>(b) * S + s] = best;
    }
  return out;
}

/// raw[l][n] for an H×W label map split into rows×cols cells; layout L×N.
inline std::vector<double> naive_grid_histogram(const std::vector<int>& labels, int H, int W, int rows, int cols,
                                                int L) {
  check_size(labels.size());
  if (H % rows != 0 || W % cols != 0) fail(ErrorKind::contract, "naive_grid_histogram: grid does not partition");
  const int N = rows * cols;
  std::vector<double> raw(static_cast<std::size_t>(L) * N, 0.0);
  for (int n = 0; n < N; ++n) {
    const int r = n / cols, c = n % cols;
    for (int l = 0; l < L; ++l) {
      int hits = 0, valid = 0;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          if (y / (H / rows) != r || x / (W / cols) != c) continue;
          const int v = labels[static_cast<std::size_t>(y) * W + x];
          if (v == kIgnore) continue;
          ++valid;
          if (v == l) ++hits;
        }
      raw[static_cast<std::size_t>(l) * N + n] = valid == 0 ? 0.0 : static_cast<double>(hits) / valid;
    }
  }
  return raw;
}

inline std::vector<double> naive_normalize(const std::vector<double>& raw, int L, int N) {
  check_size(raw.size());
  std::vector<double> out(raw.size(), 0.0);
  for (int l = 0; l < L; ++l) {
    double s = 0.0;
    for (int n = 0; n < N; ++n) s += raw[static_cast<std::size_t>(l) * N + n];
    for (int n = 0; n < N; ++n)
      out[static_cast<std::size_t>(l) * N + n] = s == 0.0 ? 0.0 : raw[static_cast<std::size_t>(l) * N + n] / s;
  }
  return out;
}

/// Category-level value; all arrays B×L×N.
inline double naive_cla(const std::vector<double>& d_adapted, const std::vector<double>& d_target,
                        const std::vector<double>& norm_adapted, const std::vector<double>& norm_target, int B, int L,
                        int N) {
  check_size(d_adapted.size());
  double a = 0.0, t = 0.0;
  for (int b = 0; b < B; ++b)
    for (int l = 0; l < L; ++l)
      for (int n = 0; n < N; ++n) {
        const std::size_t i = (static_cast<std::size_t>(b) * L + l) * N + n;
        a += norm_adapted[i] * clamped_log(d_adapted[i]);
        t += norm_target[i] * clamped_log1m(d_target[i]);
      }
  return a / B + t / B;
}

inline double naive_weighted_sum(const std::vector<double>& terms, const std::vector<double>& weights) {
  check_size(terms.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) acc += terms[i] * weights[i];
  return acc;
}

// ---------------------------------------------------------------------------
// Metrics

inline std::vector<std::vector<std::int64_t>> naive_confusion(const std::vector<int>& pred, const std::vector<int>& gt,
                                                              int L) {
  std::vector<std::vector<std::int64_t>> m(static_cast<std::size_t>(L), std::vector<std::int64_t>(static_cast<std::size_t>(L), 0));
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == kIgnore) continue;
    m[static_cast<std::size_t>(gt[i])][static_cast<std::size_t>(pred[i])] += 1;
  }
  return m;
}

/// Mean over classes present in ground truth of per-class recall.
inline double naive_macro_accuracy(const std::vector<int>& pred, const std::vector<int>& gt, int L) {
  check_size(gt.size());
  double acc = 0.0;
  int present = 0;
  for (int l = 0; l < L; ++l) {
    int total = 0, right = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] != l) continue;
      ++total;
      if (pred[i] == l) ++right;
    }
    if (total == 0) continue;
    acc += static_cast<double>(right) / total;
    ++present;
  }
  if (present == 0) fail(ErrorKind::contract, "naive_macro_accuracy: empty input");
  return acc / present;
}

inline double naive_micro_accuracy(const std::vector<int>& pred, const std::vector<int>& gt) {
  int right = 0, total = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == kIgnore) continue;
    ++total;
    right += pred[i] == gt[i];
  }
  return static_cast<double>(right) / total;
}

/// |P_l ∩ G_l| / |P_l ∪ G_l| by explicit pixel-set enumeration; nullopt when the union is empty.
inline std::vector<std::optional<double>> naive_cwiou(const std::vector<int>& pred, const std::vector<int>& gt, int L) {
  check_size(gt.size());
  std::vector<std::optional<double>> out(static_cast<std::size_t>(L));
  for (int l = 0; l < L; ++l) {
    std::vector<std::size_t> p_set, g_set;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == kIgnore) continue;
      if (pred[i] == l) p_set.push_back(i);
      if (gt[i] == l) g_set.push_back(i);
    }
    std::vector<std::size_t> inter, uni;
    std::set_intersection(p_set.begin(), p_set.end(), g_set.begin(), g_set.end(), std::back_inserter(inter));
    std::set_union(p_set.begin(), p_set.end(), g_set.begin(), g_set.end(), std::back_inserter(uni));
    if (!uni.empty()) out[static_cast<std::size_t>(l)] = static_cast<double>(inter.size()) / static_cast<double>(uni.size());
  }
  return out;
}

inline double naive_miou(const std::vector<int>& pred, const std::vector<int>& gt, int L) {
  const auto cw = naive_cwiou(pred, gt, L);
  double acc = 0.0;
  int n = 0;
  for (const auto& v : cw)
    if (v) {
      acc += *v;
      ++n;
    }
  return n == 0 ? 0.0 : acc / n;
}

// ---------------------------------------------------------------------------
// Finite differences

struct GradientCheckReport {
  std::vector<double> analytic;
  std::vector<double> numeric;
  std::vector<double> relative_error;
  double max_relative_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

/// Errors are scaled by the largest gradient magnitude in the vector
/// (floored at `floor`), so near-zero coordinates are compared against the
/// gradient's overall size instead of their own O(h^2) truncation noise.
inline double gradient_scale(std::span<const double> a, std::span<const double> n, double floor = 1e-6) {
  double s = floor;
  for (double v : a) s = std::max(s, std::fabs(v));
  for (double v : n) s = std::max(s, std::fabs(v));
  return s;
}

/// Central differences (f(p+h) - f(p-h)) / 2h per coordinate, compared to `analytic`.
inline GradientCheckReport finite_difference_gradient(const std::function<double(std::span<const double>)>& loss_fn,
                                                      std::vector<double> params, std::span<const double> analytic,
                                                      double step = 1e-3, double tolerance = 1e-4) {
  if (analytic.size() != params.size()) fail(ErrorKind::shape, "finite_difference_gradient: gradient size mismatch");
  GradientCheckReport rep;
  rep.tolerance = tolerance;
  rep.analytic.assign(analytic.begin(), analytic.end());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = params[i];
    params[i] = orig + step;
    const double up = loss_fn(params);
    params[i] = orig - step;
    const double down = loss_fn(params);
    params[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      fail(ErrorKind::contract, "finite_difference_gradient: non-finite loss at probe " + std::to_string(i));
    rep.numeric.push_back((up - down) / (2.0 * step));
  }
  const double scale = gradient_scale(rep.analytic, rep.numeric);
  for (std::size_t i = 0; i < params.size(); ++i) {
    rep.relative_error.push_back(std::fabs(rep.analytic[i] - rep.numeric[i]) / scale);
    rep.max_relative_error = std::max(rep.max_relative_error, rep.relative_error.back());
  }
  rep.pass = rep.max_relative_error <= tolerance;
  return rep;
}

}  // namespace madan::reference
