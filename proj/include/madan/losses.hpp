#pragma once

// Adversarial, cycle, semantic-consistency, task and alignment losses, plus
// grid-label bookkeeping for category-level alignment.
//
// All scalar losses are means over the batch (and over patches, cells or
// pixels where the output is spatial). Every log argument is clamped to
// [kScoreEps, 1 - kScoreEps].

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "madan/data.hpp"
#include "madan/error.hpp"

namespace madan {

inline constexpr double kScoreEps = 1e-7;

/// Discriminator output mapped to (0, 1) and clamped away from {0, 1}.
class Score {
 public:
  static Score from_probabilities(const torch::Tensor& p) {
    require(p.defined() && p.numel() > 0, ErrorKind::contract, "empty score tensor");
    const auto lo = p.min().item<double>();
    const auto hi = p.max().item<double>();
    require(torch::isfinite(p).all().item<bool>(), ErrorKind::contract, "score tensor: non-finite values");
    require(lo >= -1e-6 && hi <= 1.0 + 1e-6, ErrorKind::contract,
            "score outside [0, 1]: range [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    return Score(p.clamp(kScoreEps, 1.0 - kScoreEps));
  }

  static Score from_logits(const torch::Tensor& raw) { return from_probabilities(torch::sigmoid(raw)); }

  const torch::Tensor& values() const { return values_; }

 private:
  explicit Score(torch::Tensor v) : values_(std::move(v)) {}
  torch::Tensor values_;
};

inline torch::Tensor mean_log(const Score& s) { return s.values().log().mean(); }
inline torch::Tensor mean_log1m(const Score& s) { return (1.0 - s.values()).log().mean(); }

enum class GanConvention {
  standard,       // target/real scored 1 by the discriminator, generators non-saturating
  paper_literal,  // value exactly as printed; discriminators minimise it, generators maximise it
};

inline std::string to_string(GanConvention c) {
  return c == GanConvention::standard ? "standard" : "paper_literal";
}

inline GanConvention gan_convention_from_string(const std::string& s) {
  if (s == "standard") return GanConvention::standard;
  if (s == "paper_literal") return GanConvention::paper_literal;
  fail(ErrorKind::config, "unknown gan convention '" + s + "'");
}

// ---------------------------------------------------------------------------
// Adversarial games
//
// A game's value is  sum_k <w_k, log D_k>  over positive terms plus
// sum_k <w_k, log(1 - D_k)>  over negative terms. Weight tensors carry the
// averaging (1/numel for expectations, normalized grid labels / B for CLA).

struct AdversarialTerm {
  Score scores;
  torch::Tensor weights;  // broadcastable to scores
};

inline AdversarialTerm expectation(const Score& s, double scale = 1.0) {
  return {s, torch::full({}, scale / static_cast<double>(s.values().numel()), s.values().options())};
}

class AdversarialGame {
 public:
  AdversarialGame& positive(AdversarialTerm t) { positive_.push_back(std::move(t)); return *this; }
  AdversarialGame& negative(AdversarialTerm t) { negative_.push_back(std::move(t)); return *this; }

  torch::Tensor value() const { return sum(positive_, false) + sum(negative_, true); }

  /// Loss the discriminator descends.
  torch::Tensor discriminator_loss(GanConvention c) const {
    return c == GanConvention::standard ? -value() : value();
  }

  /// Loss the generators descend. Standard: label-flipped (non-saturating);
  /// literal: the negated printed value.
  torch::Tensor generator_loss(GanConvention c) const {
    if (c == GanConvention::paper_literal) return -value();
    return -(sum(positive_, true) + sum(negative_, false));
  }

 private:
  static torch::Tensor sum(const std::vector<AdversarialTerm>& terms, bool complement) {
    torch::Tensor total;
    for (const auto& t : terms) {
      const auto& v = t.scores.values();
      auto contrib = (t.weights * (complement ? (1.0 - v).log() : v.log())).sum();
      total = total.defined() ? total + contrib : contrib;
    }
    return total.defined() ? total : torch::zeros({});
  }

  std::vector<AdversarialTerm> positive_;
  std::vector<AdversarialTerm> negative_;
};

/// Pixel-level source->target game (D_T on adapted vs. real target images).
inline AdversarialGame gan_game_src_to_tgt(const Score& d_on_adapted, const Score& d_on_target, GanConvention c) {
  AdversarialGame g;
  if (c == GanConvention::paper_literal) g.positive(expectation(d_on_adapted)).negative(expectation(d_on_target));
  else g.positive(expectation(d_on_target)).negative(expectation(d_on_adapted));
  return g;
}

/// Pixel-level target->source game (D_i on real source vs. back-translated target).
inline AdversarialGame gan_game_tgt_to_src(const Score& d_on_source, const Score& d_on_backtranslated, GanConvention c) {
  AdversarialGame g;
  if (c == GanConvention::paper_literal) g.negative(expectation(d_on_source)).positive(expectation(d_on_backtranslated));
  else g.positive(expectation(d_on_source)).negative(expectation(d_on_backtranslated));
  return g;
}

/// `own` enters as log D, each of the M-1 `others` as log(1 - D) scaled by 1/(M-1).
inline AdversarialGame one_vs_rest_game(const Score& own, const std::vector<Score>& others) {
  require(!others.empty(), ErrorKind::contract, "one-vs-rest game needs at least one other domain");
  AdversarialGame g;
  g.positive(expectation(own));
  const double scale = 1.0 / static_cast<double>(others.size());
  for (const auto& o : others) g.negative(expectation(o, scale));
  return g;
}

inline AdversarialGame sad_game(const Score& d_own, const std::vector<Score>& d_others) {
  return one_vs_rest_game(d_own, d_others);
}

inline AdversarialGame ccd_game(const Score& d_on_real_source, const std::vector<Score>& d_on_cross_cycled) {
  return one_vs_rest_game(d_on_real_source, d_on_cross_cycled);
}

inline AdversarialGame fla_game(const Score& d_on_adapted_features, const Score& d_on_target_features,
                                GanConvention c) {
  return gan_game_src_to_tgt(d_on_adapted_features, d_on_target_features, c);
}

inline void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  require(a.sizes() == b.sizes(), ErrorKind::shape, std::string(what) + ": shape mismatch");
}

/// Category-level game: scores and normalized grid labels are B×L×rows×cols.
inline AdversarialGame cla_game(const Score& adapted, const Score& target, const torch::Tensor& norm_adapted,
                                const torch::Tensor& norm_target) {
  require_same_shape(adapted.values(), norm_adapted, "cla_loss adapted");
  require_same_shape(target.values(), norm_target, "cla_loss target");
  AdversarialGame g;
  g.positive({adapted, norm_adapted.to(adapted.values().dtype()) / static_cast<double>(adapted.values().size(0))});
  g.negative({target, norm_target.to(target.values().dtype()) / static_cast<double>(target.values().size(0))});
  return g;
}

// ---------------------------------------------------------------------------
// Scalar losses

inline torch::Tensor gan_loss_src_to_tgt(const Score& d_on_adapted, const Score& d_on_target,
                                         GanConvention c = GanConvention::standard) {
  return gan_game_src_to_tgt(d_on_adapted, d_on_target, c).value();
}

inline torch::Tensor gan_loss_tgt_to_src(const Score& d_on_source, const Score& d_on_backtranslated,
                                         GanConvention c = GanConvention::standard) {
  return gan_game_tgt_to_src(d_on_source, d_on_backtranslated, c).value();
}

inline torch::Tensor sad_loss(const Score& d_own, const std::vector<Score>& d_others) {
  return sad_game(d_own, d_others).value();
}

inline torch::Tensor ccd_loss(const Score& d_on_real_source, const std::vector<Score>& d_on_cross_cycled) {
  return ccd_game(d_on_real_source, d_on_cross_cycled).value();
}

inline torch::Tensor fla_loss(const Score& d_on_adapted_features, const Score& d_on_target_features,
                              GanConvention c = GanConvention::standard) {
  return fla_game(d_on_adapted_features, d_on_target_features, c).value();
}

inline torch::Tensor cla_loss(const Score& adapted, const Score& target, const torch::Tensor& norm_adapted,
                              const torch::Tensor& norm_target) {
  return cla_game(adapted, target, norm_adapted, norm_target).value();
}

/// Mean absolute difference; the caller sums both cycle directions.
inline torch::Tensor cycle_loss(const torch::Tensor& x, const torch::Tensor& x_roundtrip) {
  require_same_shape(x, x_roundtrip, "cycle_loss");
  return (x - x_roundtrip).abs().mean();
}

inline void require_finite(const torch::Tensor& t, const char* what) {
  require(torch::isfinite(t).all().item<bool>(), ErrorKind::contract, std::string(what) + ": non-finite values");
}

/// KL(softmax(dynamic) || softmax(frozen)) over the class axis (dim 1),
/// averaged over every remaining axis. The frozen side is detached.
inline torch::Tensor dsc_loss(const torch::Tensor& dynamic_logits, const torch::Tensor& frozen_source_logits) {
  require_same_shape(dynamic_logits, frozen_source_logits, "dsc_loss");
  require_finite(dynamic_logits, "dsc_loss dynamic logits");
  require_finite(frozen_source_logits, "dsc_loss frozen logits");
  const auto log_p = torch::log_softmax(dynamic_logits, 1);
  const auto log_q = torch::log_softmax(frozen_source_logits.detach(), 1);
  return (log_p.exp() * (log_p - log_q)).sum(1).mean();
}

inline torch::Tensor cla_task_loss_classification(const torch::Tensor& logits, const torch::Tensor& labels) {
  require(logits.dim() == 2 && labels.dim() == 1 && labels.size(0) == logits.size(0), ErrorKind::shape,
          "classification loss expects B×L logits and B labels");
  if (labels.numel() > 0) {
    const auto lo = labels.min().item<std::int64_t>(), hi = labels.max().item<std::int64_t>();
    require(lo >= 0 && hi < logits.size(1), ErrorKind::contract, "class label out of range");
  }
  return torch::nll_loss(torch::log_softmax(logits, 1), labels);
}

inline torch::Tensor task_loss_segmentation(const torch::Tensor& logit_maps, const torch::Tensor& label_maps) {
  require(logit_maps.dim() == 4 && label_maps.dim() == 3 && logit_maps.size(0) == label_maps.size(0) &&
              logit_maps.size(2) == label_maps.size(1) && logit_maps.size(3) == label_maps.size(2),
          ErrorKind::shape, "segmentation loss expects B×L×H×W logits and B×H×W labels");
  const auto valid = label_maps != kIgnoreLabel;
  require(valid.any().item<bool>(), ErrorKind::undefined_loss, "segmentation loss: every pixel is ignored");
  const auto in_range = label_maps.masked_select(valid);
  require(in_range.max().item<std::int64_t>() < logit_maps.size(1) && in_range.min().item<std::int64_t>() >= 0,
          ErrorKind::contract, "segmentation label out of range");
  return torch::nll_loss2d(torch::log_softmax(logit_maps, 1), label_maps, {}, at::Reduction::Mean, kIgnoreLabel);
}

inline torch::Tensor task_loss(TaskKind kind, const torch::Tensor& logits, const torch::Tensor& labels) {
  return kind == TaskKind::classification ? cla_task_loss_classification(logits, labels)
                                          : task_loss_segmentation(logits, labels);
}

/// Argmax over the class axis; ties resolve to the lowest class index.
inline torch::Tensor pseudo_label(const torch::Tensor& logits) {
  const auto n = logits.size(1);
  // Explicit tie rule: among maximal entries pick the smallest index.
  const auto maxv = std::get<0>(logits.max(1, true));
  const auto idx = torch::arange(n, logits.options().dtype(torch::kInt64));
  std::vector<int64_t> shape(static_cast<std::size_t>(logits.dim()), 1);
  shape[1] = n;
  const auto candidates = torch::where(logits == maxv, idx.view(shape), torch::full({}, n, idx.options()));
  return std::get<0>(candidates.min(1));
}

// ---------------------------------------------------------------------------
// Grid labels

struct GridSpec {
  int rows = 8;
  int cols = 8;

  int cells() const { return rows * cols; }

  void check_partitions(int height, int width) const {
    require(rows >= 1 && cols >= 1 && height % rows == 0 && width % cols == 0, ErrorKind::contract,
            "grid " + std::to_string(rows) + "x" + std::to_string(cols) + " does not partition " +
                std::to_string(height) + "x" + std::to_string(width));
  }
};

/// L×N arrays in row-major order (class, cell), cells enumerated row by row.
struct GridLabelMap {
  int num_classes = 0;
  int cells = 0;
  std::vector<double> raw;
  std::vector<double> normalized;

  double raw_at(int l, int n) const { return raw[static_cast<std::size_t>(l) * cells + n]; }
  double normalized_at(int l, int n) const { return normalized[static_cast<std::size_t>(l) * cells + n]; }
};

/// Fraction of each cell's non-ignore pixels carrying each label.
inline GridLabelMap grid_label_histogram(const LabelMap& map, const GridSpec& grid, int num_classes) {
  grid.check_partitions(map.height, map.width);
  GridLabelMap g{num_classes, grid.cells(), std::vector<double>(static_cast<std::size_t>(num_classes) * grid.cells(), 0.0), {}};
  const int ch = map.height / grid.rows, cw = map.width / grid.cols;
  for (int r = 0; r < grid.rows; ++r)
    for (int c = 0; c < grid.cols; ++c) {
      const int n = r * grid.cols + c;
      std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
      int valid = 0;
      for (int y = r * ch; y < (r + 1) * ch; ++y)
        for (int x = c * cw; x < (c + 1) * cw; ++x) {
          const auto v = map.at(y, x);
          if (v == kIgnoreLabel) continue;
          require(v < num_classes, ErrorKind::contract, "label out of range in grid histogram");
          ++counts[v];
          ++valid;
        }
      if (valid == 0) continue;
      for (int l = 0; l < num_classes; ++l)
        g.raw[static_cast<std::size_t>(l) * g.cells + n] = static_cast<double>(counts[static_cast<std::size_t>(l)]) / valid;
    }
  return g;
}

/// Per-class normalization across cells; absent classes get an all-zero row.
inline GridLabelMap normalize_grid_labels(GridLabelMap g) {
  g.normalized.assign(g.raw.size(), 0.0);
  for (int l = 0; l < g.num_classes; ++l) {
    double total = 0.0;
    for (int n = 0; n < g.cells; ++n) total += g.raw_at(l, n);
    if (total == 0.0) continue;
    for (int n = 0; n < g.cells; ++n)
      g.normalized[static_cast<std::size_t>(l) * g.cells + n] = g.raw_at(l, n) / total;
  }
  return g;
}

/// Batched raw grid histogram: B×H×W int64 labels -> B×L×rows×cols.
inline torch::Tensor grid_label_tensor(const torch::Tensor& labels, const GridSpec& grid, int num_classes) {
  grid.check_partitions(static_cast<int>(labels.size(1)), static_cast<int>(labels.size(2)));
  const auto valid = (labels != kIgnoreLabel);
  const auto safe = torch::where(valid, labels, torch::zeros({}, labels.options()));
  auto onehot = torch::one_hot(safe, num_classes).permute({0, 3, 1, 2}).to(torch::kFloat64);
  onehot = onehot * valid.unsqueeze(1).to(torch::kFloat64);
  const int ch = static_cast<int>(labels.size(1)) / grid.rows, cw = static_cast<int>(labels.size(2)) / grid.cols;
  const auto counts = onehot.view({labels.size(0), num_classes, grid.rows, ch, grid.cols, cw}).sum({3, 5});
  const auto denom = valid.to(torch::kFloat64).view({labels.size(0), 1, grid.rows, ch, grid.cols, cw}).sum({3, 5});
  return torch::where(denom > 0, counts / denom.clamp_min(1.0), torch::zeros_like(counts));
}

inline torch::Tensor normalize_grid_tensor(const torch::Tensor& raw) {
  const auto total = raw.sum({2, 3}, true);
  return torch::where(total > 0, raw / total.clamp_min(1e-300), torch::zeros_like(raw));
}

// ---------------------------------------------------------------------------
// Objective composition

struct LossWeights {
  double gan_s2t = 1.0;
  double gan_t2s = 1.0;
  double cycle = 1.0;
  double dsc = 1.0;
  double sad = 1.0;
  double ccd = 1.0;
  double task = 1.0;
  double fla = 1.0;
  double cla = 1.0;
  double cag = 1.0;

  std::vector<std::pair<std::string, double*>> fields() {
    return {{"gan_s2t", &gan_s2t}, {"gan_t2s", &gan_t2s}, {"cycle", &cycle}, {"dsc", &dsc},
            {"sad", &sad},         {"ccd", &ccd},         {"task", &task},   {"fla", &fla},
            {"cla", &cla},         {"cag", &cag}};
  }

  double get(std::string_view name) const {
    for (auto& [k, v] : const_cast<LossWeights*>(this)->fields())
      if (k == name) return *v;
    fail(ErrorKind::composition, "unknown loss term '" + std::string(name) + "'");
  }

  void validate() const {
    for (auto& [k, v] : const_cast<LossWeights*>(this)->fields())
      require(std::isfinite(*v) && *v >= 0.0, ErrorKind::config, "weights." + k + " must be finite and >= 0");
  }
};

inline const std::vector<std::string>& madan_terms() {
  static const std::vector<std::string> t{"gan_s2t", "gan_t2s", "cycle", "dsc", "sad", "ccd", "task", "fla"};
  return t;
}

/// The CAG term already sums the per-scale GAN, cycle and DSC terms.
inline const std::vector<std::string>& madan_plus_terms() {
  static const std::vector<std::string> t{"cag", "sad", "ccd", "task", "fla", "cla"};
  return t;
}

template <class T>
T weighted_total(const std::map<std::string, T>& components, const LossWeights& w,
                 const std::vector<std::string>& terms) {
  w.validate();
  T total{};
  bool first = true;
  for (const auto& name : terms) {
    const auto it = components.find(name);
    require(it != components.end(), ErrorKind::composition, "missing loss term '" + name + "'");
    T contrib = it->second * w.get(name);
    total = first ? contrib : total + contrib;
    first = false;
  }
  return total;
}

template <class T>
T total_madan_loss(const std::map<std::string, T>& components, const LossWeights& w = {}) {
  return weighted_total(components, w, madan_terms());
}

template <class T>
T total_madan_plus_loss(const std::map<std::string, T>& components, const LossWeights& w = {}) {
  return weighted_total(components, w, madan_plus_terms());
}

}  // namespace madan
