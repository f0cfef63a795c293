#pragma once

// Three-stage training: (1) per-source cycle-consistent translators and a task
// network on their output, (2) translator refinement with semantic
// consistency and adapted-domain aggregation (SAD, CCD), (3) task network on
// the aggregated domain with feature- and category-level alignment.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

#include "madan/checkpoint.hpp"
#include "madan/config.hpp"
#include "madan/data.hpp"
#include "madan/error.hpp"
#include "madan/eval.hpp"
#include "madan/losses.hpp"
#include "madan/models.hpp"

namespace madan {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Data held as tensors for the duration of a run

struct TrainingData {
  TaskKind kind = TaskKind::classification;
  int num_classes = 0;
  int channels = 0;
  int image_size = 0;
  std::vector<std::string> source_names;
  std::vector<torch::Tensor> source_images;  // N_i×C×H×W
  std::vector<torch::Tensor> source_labels;  // N_i or N_i×H×W, int64
  torch::Tensor target_images;
  std::optional<DomainBundle> test;          // labeled held-out target split

  int num_sources() const { return static_cast<int>(source_images.size()); }

  static TrainingData from_bundles(const std::vector<DomainBundle>& sources, const DomainBundle& target,
                                   const DomainBundle* test = nullptr) {
    require(sources.size() >= 2, ErrorKind::contract, "training needs at least 2 source domains");
    require(!target.labeled(), ErrorKind::contract, "target bundle must be unlabeled");
    TrainingData d;
    d.kind = sources.front().kind;
    d.num_classes = sources.front().num_classes;
    const auto& im0 = target.images.at(0);
    require(im0.height == im0.width, ErrorKind::shape, "training expects square images");
    d.channels = im0.channels;
    d.image_size = im0.height;
    for (const auto& s : sources) {
      require(s.labeled(), ErrorKind::contract, "source bundle '" + s.name + "' is unlabeled");
      require(s.kind == d.kind && s.num_classes == d.num_classes, ErrorKind::kind_mismatch,
              "source bundles disagree on task kind or class count");
      const auto& im = s.images.at(0);
      require(im.height == d.image_size && im.width == d.image_size && im.channels == d.channels, ErrorKind::shape,
              "source '" + s.name + "' image shape differs from the target");
      d.source_names.push_back(s.name);
      d.source_images.push_back(images_to_tensor(s));
      d.source_labels.push_back(labels_to_tensor(s));
    }
    d.target_images = images_to_tensor(target);
    if (test != nullptr) {
      require(test->kind == d.kind && test->num_classes == d.num_classes, ErrorKind::kind_mismatch,
              "test bundle disagrees on task kind or class count");
      d.test = *test;
    }
    return d;
  }
};

// ---------------------------------------------------------------------------
// State

struct TrainState {
  TrainConfig config;
  TaskKind kind = TaskKind::classification;
  int num_sources = 0;
  int channels = 0;
  int image_size = 0;
  int num_classes = 0;
  std::vector<std::string> source_names;

  std::vector<TranslatorPair> translators;
  DiscriminatorSet discriminators;
  TaskNetwork task{nullptr};            // F; the F_A role is this same object
  std::vector<TaskNetwork> snapshots;   // frozen F_i

  int round = 0;       // completed outer iterations
  int stage_done = 0;  // stages finished within the current round
  std::vector<json> history;

  /// F_A: the task network trained on the adapted domain. Aliases F.
  TaskNetwork& adapted_model() { return task; }

  bool finished() const { return round >= config.outer_iterations; }
};

inline TrainState init_state(const TrainConfig& config_in, TaskKind kind, int num_sources, int channels,
                             int image_size, int num_classes, std::vector<std::string> source_names = {}) {
  auto config = config_in;
  config.task_kind = kind;
  config.model.translator.channels = channels;
  config.validate();
  TrainState s;
  s.config = config;
  s.kind = kind;
  s.num_sources = num_sources;
  s.channels = channels;
  s.image_size = image_size;
  s.num_classes = num_classes;
  s.source_names = source_names;
  if (s.source_names.empty())
    for (int i = 0; i < num_sources; ++i) s.source_names.push_back(source_name(i));
  const auto seed = config.seed;
  s.task = build_task_network(kind, num_classes, channels, image_size, config.model.task, detail::mix_seed(seed, 3));
  if (config.mode != Mode::source_only) {
    for (int i = 0; i < num_sources; ++i)
      s.translators.push_back(build_translator(config.model.translator, detail::mix_seed(seed, 1, static_cast<std::uint64_t>(i))));
    s.discriminators = build_discriminators(config.model, num_sources, channels, s.task->feature_channels(),
                                            num_classes, config.mode == Mode::madan_plus, detail::mix_seed(seed, 2));
  }
  return s;
}

inline TrainState init_state(const TrainConfig& config, const TrainingData& data) {
  return init_state(config, data.kind, data.num_sources(), data.channels, data.image_size, data.num_classes,
                    data.source_names);
}

// ---------------------------------------------------------------------------
// Observer: history records, timings and stage-boundary hooks

struct TrainObserver {
  std::function<void(const json&)> on_record;
  std::function<void(const json&)> on_timing;
  std::function<void(TrainState&, const std::string&)> on_stage_end;  // tag "round<r>_stage<s>"
  std::function<void(const std::string&)> on_progress;
};

namespace detail {

inline void emit(TrainState& s, const TrainObserver* obs, json rec) {
  s.history.push_back(rec);
  if (obs != nullptr && obs->on_record) obs->on_record(rec);
}

inline void progress(const TrainObserver* obs, const std::string& msg) {
  if (obs != nullptr && obs->on_progress) obs->on_progress(msg);
}

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

/// Appends wall time to an epoch record, or routes it to the timing stream in deterministic mode.
inline void stamp_time(json& rec, double secs, bool deterministic, const TrainObserver* obs) {
  rec["wall_time"] = deterministic ? 0.0 : secs;
  if (deterministic && obs != nullptr && obs->on_timing) {
    json t{{"round", rec.value("round", 0)}, {"stage", rec.value("stage", 0)}, {"phase", rec.value("phase", "")},
           {"epoch", rec.value("epoch", 0)}, {"wall_time", secs}};
    obs->on_timing(t);
  }
}

/// Cycles through shuffled permutations of [0, n).
class Sampler {
 public:
  Sampler(std::int64_t n, std::uint64_t seed) : n_(n), rng_(seed), order_(static_cast<std::size_t>(n)) {
    std::iota(order_.begin(), order_.end(), 0);
    shuffle();
  }

  torch::Tensor next(std::int64_t count) {
    std::vector<std::int64_t> out;
    out.reserve(static_cast<std::size_t>(count));
    while (static_cast<std::int64_t>(out.size()) < count) {
      if (pos_ == order_.size()) shuffle();
      out.push_back(order_[pos_++]);
    }
    return torch::tensor(out, torch::kInt64);
  }

 private:
  void shuffle() {
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }
  std::int64_t n_;
  std::mt19937_64 rng_;
  std::vector<std::int64_t> order_;
  std::size_t pos_ = 0;
};

inline int steps_for(std::int64_t n, const TrainConfig& c) {
  const auto full = static_cast<int>((n + c.batch_size - 1) / c.batch_size);
  return c.steps_per_epoch > 0 ? std::min(full, c.steps_per_epoch) : full;
}

inline std::uint64_t stage_seed(const TrainConfig& c, int round, int stage, std::uint64_t stream = 0) {
  return mix_seed(c.seed, 100 + static_cast<std::uint64_t>(round) * 10 + static_cast<std::uint64_t>(stage), stream);
}

inline void set_requires_grad(const std::vector<torch::Tensor>& params, bool on) {
  for (const auto& p : params) const_cast<torch::Tensor&>(p).set_requires_grad(on);
}

template <class M>
void append_params(std::vector<torch::Tensor>& out, const M& m) {
  for (const auto& p : m->parameters()) out.push_back(p);
}

inline double grad_norm(const std::vector<torch::Tensor>& params) {
  double acc = 0.0;
  for (const auto& p : params)
    if (p.grad().defined()) acc += p.grad().to(torch::kFloat64).pow(2).sum().item<double>();
  return std::sqrt(acc);
}

inline torch::optim::Adam make_adam(const std::vector<torch::Tensor>& params, double lr, double beta1) {
  return torch::optim::Adam(params, torch::optim::AdamOptions(lr).betas({beta1, 0.999}));
}

/// Per-term running means over an epoch.
class TermMeans {
 public:
  void add(const std::string& k, double v) {
    auto& [sum, n] = acc_[k];
    sum += v;
    ++n;
  }
  void add(const std::string& k, const torch::Tensor& v) { add(k, v.item<double>()); }
  json to_json() const {
    json j = json::object();
    for (const auto& [k, v] : acc_) j[k] = v.first / static_cast<double>(v.second);
    return j;
  }

 private:
  std::map<std::string, std::pair<double, std::int64_t>> acc_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// One alternating min-max update

struct StepLosses {
  double discriminator = 0.0;
  double generator = 0.0;
};

/// One discriminator update followed by one generator update. `d_loss` must
/// only see detached generator outputs; discriminator parameters do not
/// accumulate gradient during the generator update.
inline StepLosses adversarial_step(torch::optim::Optimizer& d_opt, const std::vector<torch::Tensor>& d_params,
                                   torch::optim::Optimizer& g_opt, const std::vector<torch::Tensor>& g_params,
                                   const std::function<torch::Tensor()>& d_loss,
                                   const std::function<torch::Tensor()>& g_loss) {
  StepLosses out;
  detail::set_requires_grad(d_params, true);
  d_opt.zero_grad();
  const auto ld = d_loss();
  out.discriminator = ld.item<double>();
  require(std::isfinite(out.discriminator), ErrorKind::divergence, "non-finite discriminator loss");
  ld.backward();
  const double dn = detail::grad_norm(d_params);
  require(std::isfinite(dn), ErrorKind::divergence, "non-finite discriminator gradients (norm " + std::to_string(dn) + ")");
  d_opt.step();

  detail::set_requires_grad(d_params, false);
  g_opt.zero_grad();
  const auto lg = g_loss();
  out.generator = lg.item<double>();
  if (!std::isfinite(out.generator)) {
    detail::set_requires_grad(d_params, true);
    fail(ErrorKind::divergence, "non-finite generator loss");
  }
  lg.backward();
  detail::set_requires_grad(d_params, true);
  const double gn = detail::grad_norm(g_params);
  require(std::isfinite(gn), ErrorKind::divergence,
          "non-finite generator gradients (generator norm " + std::to_string(gn) + ", discriminator norm " +
              std::to_string(dn) + ")");
  g_opt.step();
  return out;
}

// ---------------------------------------------------------------------------
// Context-aware cropping

struct CropBox {
  int top = 0;
  int left = 0;
  int size = 0;
  bool operator==(const CropBox&) const = default;
};

struct CagBatch {
  std::vector<torch::Tensor> adapted;      // per scale, B×C×H×W at the training resolution
  std::vector<torch::Tensor> target;
  std::vector<torch::Tensor> labels;       // per scale when label maps were supplied
  std::vector<std::vector<CropBox>> boxes; // [scale][sample]; shared by adapted and target
};

/// Square window of side round(scale*side) centred on (cy, cx), shifted to lie inside the image.
inline CropBox crop_box(int side, double scale, int cy, int cx) {
  const int size = static_cast<int>(std::lround(scale * side));
  require(size >= 8, ErrorKind::config, "crop of " + std::to_string(size) + " px is smaller than 8 px");
  const int top = std::clamp(cy - size / 2, 0, side - size);
  const int left = std::clamp(cx - size / 2, 0, side - size);
  return {top, left, size};
}

/// Crops one sample to `box` and resizes it to out×out (bilinear, or nearest for labels).
inline torch::Tensor crop_resize(const torch::Tensor& chw, const CropBox& box, int out, bool nearest) {
  auto c = chw.slice(-2, box.top, box.top + box.size).slice(-1, box.left, box.left + box.size);
  if (box.size == out) return c;
  namespace F = torch::nn::functional;
  auto opts = F::InterpolateFuncOptions().size(std::vector<int64_t>{out, out});
  if (nearest) {
    auto l = c.unsqueeze(0).unsqueeze(0).to(torch::kFloat32);
    return F::interpolate(l, opts.mode(torch::kNearest)).squeeze(0).squeeze(0).to(chw.dtype());
  }
  return F::interpolate(c.unsqueeze(0), opts.mode(torch::kBilinear).align_corners(false)).squeeze(0);
}

inline torch::Tensor resize_batch(const torch::Tensor& b, int out) {
  if (b.size(2) == out && b.size(3) == out) return b;
  namespace F = torch::nn::functional;
  return F::interpolate(b, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{out, out})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

/// One random centre per (adapted, target) pair, reused across every scale.
inline CagBatch context_aware_crop(const torch::Tensor& adapted_batch, const torch::Tensor& target_batch,
                                   const std::vector<double>& scales, std::mt19937_64& rng,
                                   const torch::Tensor* label_maps = nullptr) {
  require(!scales.empty(), ErrorKind::config, "context_aware_crop needs at least one scale");
  require(adapted_batch.dim() == 4 && target_batch.dim() == 4 && adapted_batch.size(0) == target_batch.size(0),
          ErrorKind::shape, "context_aware_crop expects paired B×C×H×W batches");
  const int side = static_cast<int>(adapted_batch.size(2));
  require(adapted_batch.size(3) == side, ErrorKind::shape, "context_aware_crop expects square images");
  const auto target = resize_batch(target_batch, side);
  const auto B = adapted_batch.size(0);
  std::uniform_int_distribution<int> pick(0, side - 1);
  std::vector<std::pair<int, int>> centres;
  for (std::int64_t b = 0; b < B; ++b) {
    const int cy = pick(rng);
    const int cx = pick(rng);
    centres.emplace_back(cy, cx);
  }
  CagBatch out;
  for (double s : scales) {
    require(s > 0.0 && s <= 1.0, ErrorKind::config, "crop scale must be in (0, 1]");
    std::vector<CropBox> boxes;
    std::vector<torch::Tensor> a, t, l;
    for (std::int64_t b = 0; b < B; ++b) {
      const auto box = crop_box(side, s, centres[static_cast<std::size_t>(b)].first, centres[static_cast<std::size_t>(b)].second);
      boxes.push_back(box);
      a.push_back(crop_resize(adapted_batch[b], box, side, false));
      t.push_back(crop_resize(target[b], box, side, false));
      if (label_maps != nullptr) l.push_back(crop_resize((*label_maps)[b], box, side, true));
    }
    out.adapted.push_back(torch::stack(a));
    out.target.push_back(torch::stack(t));
    if (label_maps != nullptr) out.labels.push_back(torch::stack(l));
    out.boxes.push_back(std::move(boxes));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pixel-level building blocks

struct CycleOutputs {
  torch::Tensor x, t;
  torch::Tensor fake_t;  // G_{S->T}(x)
  torch::Tensor rec_x;   // G_{T->S}(G_{S->T}(x))
  torch::Tensor fake_s;  // G_{T->S}(t)
  torch::Tensor rec_t;   // G_{S->T}(G_{T->S}(t))
};

inline CycleOutputs run_cycle(TranslatorPair& g, const torch::Tensor& x, const torch::Tensor& t) {
  CycleOutputs o{x, t, {}, {}, {}, {}};
  o.fake_t = g.forward->forward(x);
  o.rec_x = g.backward->forward(o.fake_t);
  o.fake_s = g.backward->forward(t);
  o.rec_t = g.forward->forward(o.fake_s);
  return o;
}

inline Score score(PatchDiscriminator& d, const torch::Tensor& x) { return Score::from_logits(d->forward(x)); }

struct PairGames {
  AdversarialGame s2t, t2s;
};

/// The two pixel-level games of one source/target pair; `detach` cuts generator gradients.
inline PairGames pair_games(PatchDiscriminator& d_target, PatchDiscriminator& d_source, const CycleOutputs& o,
                            GanConvention c, bool detach) {
  auto cut = [&](const torch::Tensor& t) { return detach ? t.detach() : t; };
  return {gan_game_src_to_tgt(score(d_target, cut(o.fake_t)), score(d_target, o.t), c),
          gan_game_tgt_to_src(score(d_source, o.x), score(d_source, cut(o.fake_s)), c)};
}

inline torch::Tensor pair_cycle(const CycleOutputs& o) { return cycle_loss(o.x, o.rec_x) + cycle_loss(o.t, o.rec_t); }

inline std::vector<torch::Tensor> translate_all(ResnetGenerator& g, const torch::Tensor& images,
                                                std::int64_t batch = 64) {
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> parts;
  for (std::int64_t s = 0; s < images.size(0); s += batch)
    parts.push_back(g->forward(images.slice(0, s, std::min(images.size(0), s + batch))));
  return parts;
}

/// G_{S_i->T} applied to a whole source tensor.
inline torch::Tensor adapt_images(const TrainState& s, int source, const torch::Tensor& images) {
  auto g = s.translators.at(static_cast<std::size_t>(source)).forward;
  return torch::cat(translate_all(g, images));
}

inline std::vector<torch::Tensor> adapted_domains(const TrainState& s, const TrainingData& d) {
  std::vector<torch::Tensor> out;
  for (int i = 0; i < d.num_sources(); ++i)
    out.push_back(s.config.mode == Mode::source_only ? d.source_images[static_cast<std::size_t>(i)]
                                                     : adapt_images(s, i, d.source_images[static_cast<std::size_t>(i)]));
  return out;
}

/// Fixed probe batch: the first `n` images of each source and of the target.
inline std::pair<std::vector<torch::Tensor>, torch::Tensor> probe_batch(const TrainingData& d, std::int64_t n = 8) {
  std::vector<torch::Tensor> xs;
  for (const auto& x : d.source_images) xs.push_back(x.slice(0, 0, std::min(n, x.size(0))));
  return {xs, d.target_images.slice(0, 0, std::min(n, d.target_images.size(0)))};
}

inline double probe_cycle_loss(TrainState& s, const TrainingData& d) {
  torch::NoGradGuard guard;
  const auto [xs, t] = probe_batch(d);
  double acc = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto tt = t.slice(0, 0, std::min(t.size(0), xs[i].size(0)));
    acc += pair_cycle(run_cycle(s.translators[i], xs[i], tt)).item<double>();
  }
  return acc / static_cast<double>(xs.size());
}

// ---------------------------------------------------------------------------
// Task-network training on a set of labeled domains

struct TaskTrainSpec {
  std::vector<torch::Tensor> images;  // per domain
  std::vector<torch::Tensor> labels;
  bool align = false;                 // FLA (and CLA in MADAN+) against the target
};

namespace detail {

/// Mixed batch drawing an equal share from each domain; the remainder goes to random domains.
inline std::pair<torch::Tensor, torch::Tensor> mixed_batch(const TaskTrainSpec& spec, std::vector<Sampler>& samplers,
                                                           int batch, std::mt19937_64& rng) {
  const auto m = static_cast<int>(spec.images.size());
  std::vector<int> counts(static_cast<std::size_t>(m), batch / m);
  std::uniform_int_distribution<int> pick(0, m - 1);
  for (int r = 0; r < batch % m; ++r) ++counts[static_cast<std::size_t>(pick(rng))];
  std::vector<torch::Tensor> xs, ys;
  for (int i = 0; i < m; ++i) {
    if (counts[static_cast<std::size_t>(i)] == 0) continue;
    const auto idx = samplers[static_cast<std::size_t>(i)].next(counts[static_cast<std::size_t>(i)]);
    xs.push_back(spec.images[static_cast<std::size_t>(i)].index_select(0, idx));
    ys.push_back(spec.labels[static_cast<std::size_t>(i)].index_select(0, idx));
  }
  return {torch::cat(xs), torch::cat(ys)};
}

inline double probe_task_loss(TrainState& s, const TaskTrainSpec& spec) {
  torch::NoGradGuard guard;
  double acc = 0.0;
  for (std::size_t i = 0; i < spec.images.size(); ++i) {
    const auto n = std::min<std::int64_t>(16, spec.images[i].size(0));
    acc += task_loss(s.kind, s.task->forward(spec.images[i].slice(0, 0, n)), spec.labels[i].slice(0, 0, n)).item<double>();
  }
  return acc / static_cast<double>(spec.images.size());
}

}  // namespace detail

/// Trains `net` for `epochs` on `spec`, emitting one history record per epoch.
/// Returns {probe loss before, probe loss after}.
inline std::pair<double, double> train_task_network(TrainState& s, TaskNetwork& net, const TaskTrainSpec& spec,
                                                    const torch::Tensor& target_images, int epochs,
                                                    std::uint64_t seed, const json& tag, const TrainObserver* obs) {
  const auto& c = s.config;
  std::mt19937_64 rng(seed);
  torch::manual_seed(seed);
  std::vector<detail::Sampler> samplers;
  std::int64_t total = 0;
  for (std::size_t i = 0; i < spec.images.size(); ++i) {
    samplers.emplace_back(spec.images[i].size(0), detail::mix_seed(seed, 7, i));
    total += spec.images[i].size(0);
  }
  detail::Sampler target_sampler(target_images.size(0), detail::mix_seed(seed, 8));

  const bool fla = spec.align && !s.discriminators.feature.is_empty();
  const bool cla = spec.align && s.discriminators.has_class_discriminators();
  std::vector<torch::Tensor> f_params = net->parameters();
  std::vector<torch::Tensor> d_params;
  if (fla) detail::append_params(d_params, s.discriminators.feature);
  if (cla) detail::append_params(d_params, s.discriminators.per_class);
  auto f_opt = detail::make_adam(f_params, c.lr_task, 0.9);
  std::optional<torch::optim::Adam> d_opt;
  if (!d_params.empty()) d_opt.emplace(detail::make_adam(d_params, c.lr_feature, c.gan_beta1));

  const auto grid = c.grid();
  const auto& w = c.weights;
  auto probe_of = [&] {
    auto saved = s.task;
    s.task = net;
    const double v = detail::probe_task_loss(s, spec);
    s.task = saved;
    return v;
  };
  const double before = probe_of();
  const int steps = detail::steps_for(total, c);
  for (int e = 0; e < epochs; ++e) {
    const auto t0 = detail::Clock::now();
    detail::TermMeans means;
    for (int k = 0; k < steps; ++k) {
      auto [x, y] = detail::mixed_batch(spec, samplers, c.batch_size, rng);
      if (!fla && !cla) {
        f_opt.zero_grad();
        const auto loss = task_loss(s.kind, net->forward(x), y);
        const double v = loss.item<double>();
        require(std::isfinite(v), ErrorKind::divergence, "non-finite task loss");
        loss.backward();
        f_opt.step();
        means.add("task", v);
        continue;
      }
      const auto t = target_images.index_select(0, target_sampler.next(c.batch_size));
      torch::Tensor norm_a, norm_t;
      if (cla) {
        torch::NoGradGuard guard;
        norm_a = normalize_grid_tensor(grid_label_tensor(y, grid, s.num_classes));
        norm_t = normalize_grid_tensor(grid_label_tensor(pseudo_label(net->forward(t)), grid, s.num_classes));
      }
      torch::Tensor fa, ft;
      std::map<std::string, torch::Tensor> values;
      auto d_loss = [&] {
        {
          torch::NoGradGuard guard;
          fa = net->features(x);
          ft = net->features(t);
        }
        torch::Tensor total_d = torch::zeros({});
        if (fla) {
          auto g = fla_game(Score::from_logits(s.discriminators.feature->forward(fa)),
                            Score::from_logits(s.discriminators.feature->forward(ft)), c.convention);
          total_d = total_d + w.fla * g.discriminator_loss(c.convention);
        }
        if (cla) {
          auto ca = s.discriminators.per_class->forward(fa);
          require(ca.size(2) == grid.rows && ca.size(3) == grid.cols, ErrorKind::config,
                  "CLA grid must match the feature map (" + std::to_string(ca.size(2)) + "x" +
                      std::to_string(ca.size(3)) + ")");
          auto g = cla_game(Score::from_logits(ca), Score::from_logits(s.discriminators.per_class->forward(ft)),
                            norm_a, norm_t);
          total_d = total_d + w.cla * g.discriminator_loss(c.convention);
        }
        return total_d;
      };
      auto g_loss = [&] {
        const auto fa_g = net->features(x);
        const auto ft_g = net->features(t);
        std::map<std::string, torch::Tensor> comp;
        comp["task"] = task_loss(s.kind, net->logits_from_features(fa_g), y);
        std::vector<std::string> terms{"task"};
        if (fla) {
          auto g = fla_game(Score::from_logits(s.discriminators.feature->forward(fa_g)),
                            Score::from_logits(s.discriminators.feature->forward(ft_g)), c.convention);
          comp["fla"] = g.generator_loss(c.convention);
          values["fla"] = g.value().detach();
          terms.push_back("fla");
        }
        if (cla) {
          auto g = cla_game(Score::from_logits(s.discriminators.per_class->forward(fa_g)),
                            Score::from_logits(s.discriminators.per_class->forward(ft_g)), norm_a, norm_t);
          comp["cla"] = g.generator_loss(c.convention);
          values["cla"] = g.value().detach();
          terms.push_back("cla");
        }
        values["task"] = comp["task"].detach();
        return weighted_total(comp, w, terms);
      };
      const auto r = adversarial_step(*d_opt, d_params, f_opt, f_params, d_loss, g_loss);
      for (const auto& [k, v] : values) means.add(k, v);
      means.add("d_loss", r.discriminator);
      means.add("g_loss", r.generator);
    }
    json rec = tag;
    rec["epoch"] = e;
    rec["steps"] = steps;
    rec["losses"] = means.to_json();
    if (e + 1 == epochs) {
      auto saved = s.task;
      s.task = net;
      rec["probe_task_loss"] = detail::probe_task_loss(s, spec);
      s.task = saved;
    }
    detail::stamp_time(rec, detail::seconds_since(t0), c.deterministic, obs);
    detail::emit(s, obs, rec);
  }
  return {before, probe_of()};
}

// ---------------------------------------------------------------------------
// Stages

struct StageSummary {
  double probe_start = 0.0;  // stage 1/2: cycle loss on the probe batch; stage 3: task loss
  double probe_end = 0.0;
};

namespace detail {

inline void require_stage(const TrainState& s, int stage) {
  require(!s.finished(), ErrorKind::stage_order, "all outer iterations are already complete");
  require(s.stage_done == stage - 1, ErrorKind::stage_order,
          "stage " + std::to_string(stage) + " requested but stage " + std::to_string(s.stage_done) +
              " is the last completed stage of round " + std::to_string(s.round));
}

inline json tag(const TrainState& s, int stage, const std::string& phase) {
  return {{"type", "epoch"}, {"round", s.round}, {"stage", stage}, {"phase", phase}};
}

inline void finish_stage(TrainState& s, int stage, const TrainObserver* obs) {
  s.stage_done = stage;
  const std::string t = "round" + std::to_string(s.round) + "_stage" + std::to_string(stage);
  if (stage == 3) {
    s.stage_done = 0;
    ++s.round;
  }
  if (obs != nullptr && obs->on_stage_end) obs->on_stage_end(s, t);
}

}  // namespace detail

/// Translators with the two pixel-level GAN terms and cycle consistency, then F
/// on the adapted images, then (first round only) the frozen per-source F_i.
inline StageSummary stage1_pretrain(TrainState& s, const TrainingData& d, const TrainObserver* obs = nullptr) {
  detail::require_stage(s, 1);
  StageSummary out;
  const auto& c = s.config;
  if (c.mode == Mode::source_only) {
    detail::finish_stage(s, 1, obs);
    return out;
  }
  const auto seed = detail::stage_seed(c, s.round, 1);
  torch::manual_seed(seed);
  const int M = s.num_sources;
  std::vector<detail::Sampler> samplers;
  std::int64_t largest = 0;
  for (int i = 0; i < M; ++i) {
    samplers.emplace_back(d.source_images[static_cast<std::size_t>(i)].size(0), detail::mix_seed(seed, 1, static_cast<std::uint64_t>(i)));
    largest = std::max(largest, d.source_images[static_cast<std::size_t>(i)].size(0));
  }
  detail::Sampler target_sampler(d.target_images.size(0), detail::mix_seed(seed, 2));

  std::vector<torch::optim::Adam> g_opts, d_opts;
  std::vector<std::vector<torch::Tensor>> g_params(static_cast<std::size_t>(M)), d_params(static_cast<std::size_t>(M));
  for (int i = 0; i < M; ++i) {
    g_params[i] = s.translators[static_cast<std::size_t>(i)].parameters();
    detail::append_params(d_params[i], s.discriminators.target_pixel);
    detail::append_params(d_params[i], s.discriminators.per_source_pixel[static_cast<std::size_t>(i)]);
    g_opts.push_back(detail::make_adam(g_params[i], c.lr_generator, c.gan_beta1));
  }
  // D_T is shared by every pair, so a single optimizer owns it.
  std::vector<torch::Tensor> all_d;
  detail::append_params(all_d, s.discriminators.target_pixel);
  for (auto& di : s.discriminators.per_source_pixel) detail::append_params(all_d, di);
  auto d_opt = detail::make_adam(all_d, c.lr_discriminator, c.gan_beta1);

  out.probe_start = probe_cycle_loss(s, d);
  const int steps = detail::steps_for(largest, c);
  const auto& w = c.weights;
  for (int e = 0; e < c.stage1_epochs; ++e) {
    const auto t0 = detail::Clock::now();
    detail::TermMeans means;
    for (int k = 0; k < steps; ++k) {
      for (int i = 0; i < M; ++i) {
        const auto x = d.source_images[static_cast<std::size_t>(i)].index_select(0, samplers[static_cast<std::size_t>(i)].next(c.batch_size));
        const auto t = d.target_images.index_select(0, target_sampler.next(c.batch_size));
        auto& dt = s.discriminators.target_pixel;
        auto& di = s.discriminators.per_source_pixel[static_cast<std::size_t>(i)];
        const auto o = run_cycle(s.translators[static_cast<std::size_t>(i)], x, t);
        torch::Tensor v_s2t, v_t2s, v_cyc;
        auto d_loss = [&] {
          const auto g = pair_games(dt, di, o, c.convention, true);
          return w.gan_s2t * g.s2t.discriminator_loss(c.convention) + w.gan_t2s * g.t2s.discriminator_loss(c.convention);
        };
        auto g_loss = [&] {
          const auto g = pair_games(dt, di, o, c.convention, false);
          v_s2t = g.s2t.value().detach();
          v_t2s = g.t2s.value().detach();
          const auto cyc = pair_cycle(o);
          v_cyc = cyc.detach();
          std::map<std::string, torch::Tensor> comp{{"gan_s2t", g.s2t.generator_loss(c.convention)},
                                                    {"gan_t2s", g.t2s.generator_loss(c.convention)},
                                                    {"cycle", cyc}};
          return weighted_total(comp, w, {"gan_s2t", "gan_t2s", "cycle"});
        };
        const auto r = adversarial_step(d_opt, d_params[static_cast<std::size_t>(i)], g_opts[static_cast<std::size_t>(i)],
                                        g_params[static_cast<std::size_t>(i)], d_loss, g_loss);
        means.add("gan_s2t", v_s2t);
        means.add("gan_t2s", v_t2s);
        means.add("cycle", v_cyc);
        means.add("d_loss", r.discriminator);
        means.add("g_loss", r.generator);
      }
    }
    json rec = detail::tag(s, 1, "translators");
    rec["epoch"] = e;
    rec["steps"] = steps;
    rec["losses"] = means.to_json();
    rec["probe_cycle_loss"] = probe_cycle_loss(s, d);
    detail::stamp_time(rec, detail::seconds_since(t0), c.deterministic, obs);
    detail::emit(s, obs, rec);
    detail::progress(obs, "round " + std::to_string(s.round) + " stage 1 translators epoch " + std::to_string(e + 1) +
                              "/" + std::to_string(c.stage1_epochs));
  }
  out.probe_end = probe_cycle_loss(s, d);

  // F on the union of adapted domains.
  TaskTrainSpec spec{adapted_domains(s, d), d.source_labels, false};
  train_task_network(s, s.task, spec, d.target_images, c.stage1_epochs, detail::mix_seed(seed, 3),
                     detail::tag(s, 1, "task"), obs);

  // F_i: per-source fine-tunes of F, frozen from here on.
  if (s.snapshots.empty()) {
    for (int i = 0; i < M; ++i) {
      auto fi = trainable_copy(s.task);
      if (c.stage1_epochs > 0) {
        TaskTrainSpec one{{d.source_images[static_cast<std::size_t>(i)]}, {d.source_labels[static_cast<std::size_t>(i)]}, false};
        json t = detail::tag(s, 1, "snapshot");
        t["source"] = i;
        train_task_network(s, fi, one, d.target_images, c.snapshot_epochs, detail::mix_seed(seed, 4, static_cast<std::uint64_t>(i)), t, obs);
      }
      s.snapshots.push_back(frozen_copy(fi));
    }
  }
  detail::finish_stage(s, 1, obs);
  return out;
}

/// Translators refined with semantic consistency, SAD and CCD; F is not updated.
inline StageSummary stage2_aggregate(TrainState& s, const TrainingData& d, const TrainObserver* obs = nullptr) {
  detail::require_stage(s, 2);
  StageSummary out;
  const auto& c = s.config;
  if (c.mode == Mode::source_only) {
    detail::finish_stage(s, 2, obs);
    return out;
  }
  require(static_cast<int>(s.snapshots.size()) == s.num_sources || c.semantic_consistency == Consistency::none,
          ErrorKind::stage_order, "stage 2 needs the frozen per-source snapshots from stage 1");
  const auto seed = detail::stage_seed(c, s.round, 2);
  torch::manual_seed(seed);
  std::mt19937_64 crop_rng(detail::mix_seed(seed, 9));
  const int M = s.num_sources;
  const bool plus = c.mode == Mode::madan_plus;
  std::vector<detail::Sampler> samplers;
  std::int64_t largest = 0;
  for (int i = 0; i < M; ++i) {
    samplers.emplace_back(d.source_images[static_cast<std::size_t>(i)].size(0), detail::mix_seed(seed, 1, static_cast<std::uint64_t>(i)));
    largest = std::max(largest, d.source_images[static_cast<std::size_t>(i)].size(0));
  }
  detail::Sampler target_sampler(d.target_images.size(0), detail::mix_seed(seed, 2));

  std::vector<torch::Tensor> g_params, d_params;
  for (auto& tp : s.translators) {
    auto p = tp.parameters();
    g_params.insert(g_params.end(), p.begin(), p.end());
  }
  detail::append_params(d_params, s.discriminators.target_pixel);
  for (auto& di : s.discriminators.per_source_pixel) detail::append_params(d_params, di);
  for (auto& da : s.discriminators.aggregation) detail::append_params(d_params, da);
  auto g_opt = detail::make_adam(g_params, c.lr_generator, c.gan_beta1);
  auto d_opt = detail::make_adam(d_params, c.lr_discriminator, c.gan_beta1);

  // F is read-only here; gradients still flow through it into the translators.
  auto task_params = s.task->parameters();
  detail::set_requires_grad(task_params, false);
  struct Restore {
    std::vector<torch::Tensor>& p;
    ~Restore() { detail::set_requires_grad(p, true); }
  } restore{task_params};

  auto& F = s.adapted_model();
  const auto& w = c.weights;
  const auto conv = c.convention;
  auto consistency = [&](int i, const torch::Tensor& adapted, const torch::Tensor& x) -> torch::Tensor {
    if (c.semantic_consistency == Consistency::none) return torch::zeros({});
    auto& fi = s.snapshots[static_cast<std::size_t>(i)];
    torch::Tensor frozen_logits;
    {
      torch::NoGradGuard guard;
      frozen_logits = fi->forward(x);
    }
    const auto dyn = c.semantic_consistency == Consistency::dynamic ? F->forward(adapted) : fi->forward(adapted);
    return dsc_loss(dyn, frozen_logits);
  };

  out.probe_start = probe_cycle_loss(s, d);
  const int steps = detail::steps_for(largest, c);
  for (int e = 0; e < c.stage2_epochs; ++e) {
    const auto t0 = detail::Clock::now();
    detail::TermMeans means;
    for (int k = 0; k < steps; ++k) {
      const auto t = d.target_images.index_select(0, target_sampler.next(c.batch_size));
      std::vector<torch::Tensor> xs;
      for (int i = 0; i < M; ++i)
        xs.push_back(d.source_images[static_cast<std::size_t>(i)].index_select(0, samplers[static_cast<std::size_t>(i)].next(c.batch_size)));

      // Pixel-level pairs: full images, plus the CAG scales in MADAN+.
      std::vector<std::vector<CycleOutputs>> pairs(static_cast<std::size_t>(M));  // [source][scale]
      for (int i = 0; i < M; ++i) {
        auto& tp = s.translators[static_cast<std::size_t>(i)];
        pairs[i].push_back(run_cycle(tp, xs[i], t));
        if (plus) {
          const auto cag = context_aware_crop(xs[i], t, c.crop_scales, crop_rng);
          for (std::size_t sc = 0; sc < c.crop_scales.size(); ++sc) {
            if (c.crop_scales[sc] == 1.0) continue;  // identical to the full-image pair
            pairs[i].push_back(run_cycle(tp, cag.adapted[sc], cag.target[sc]));
          }
        }
      }
      const bool full_in_cag =
          std::find(c.crop_scales.begin(), c.crop_scales.end(), 1.0) != c.crop_scales.end();
      auto scales_of = [&](int i) {
        // Index range into pairs[i] that makes up the pixel-level objective.
        const std::size_t first = plus && !full_in_cag ? 1 : 0;
        return std::pair<std::size_t, std::size_t>{first, pairs[i].size()};
      };
      // CCD paths: G_{T->S_i}(G_{S_j->T}(x_j)) for j != i.
      std::vector<std::vector<torch::Tensor>> cross(static_cast<std::size_t>(M));
      for (int i = 0; i < M; ++i)
        for (int j = 0; j < M; ++j)
          if (j != i) cross[i].push_back(s.translators[static_cast<std::size_t>(i)].backward->forward(pairs[j][0].fake_t));

      auto& dt = s.discriminators.target_pixel;
      auto aggregation_game = [&](int i, bool detach) {
        auto& da = s.discriminators.aggregation[static_cast<std::size_t>(i)];
        auto cut = [&](const torch::Tensor& x) { return detach ? x.detach() : x; };
        std::vector<Score> others;
        for (int j = 0; j < M; ++j)
          if (j != i) others.push_back(score(da, cut(pairs[j][0].fake_t)));
        return sad_game(score(da, cut(pairs[i][0].fake_t)), others);
      };
      auto cross_game = [&](int i, bool detach) {
        auto& di = s.discriminators.per_source_pixel[static_cast<std::size_t>(i)];
        std::vector<Score> others;
        for (const auto& cc : cross[i]) others.push_back(score(di, detach ? cc.detach() : cc));
        return ccd_game(score(di, xs[i]), others);
      };

      std::map<std::string, double> values;
      auto d_loss = [&] {
        torch::Tensor total = torch::zeros({});
        for (int i = 0; i < M; ++i) {
          auto& di = s.discriminators.per_source_pixel[static_cast<std::size_t>(i)];
          const auto [a, b] = scales_of(i);
          for (std::size_t sc = a; sc < b; ++sc) {
            const auto g = pair_games(dt, di, pairs[i][sc], conv, true);
            total = total + (plus ? w.cag : 1.0) * (w.gan_s2t * g.s2t.discriminator_loss(conv) +
                                                   w.gan_t2s * g.t2s.discriminator_loss(conv));
          }
          total = total + w.sad * aggregation_game(i, true).discriminator_loss(conv);
          total = total + w.ccd * cross_game(i, true).discriminator_loss(conv);
        }
        return total;
      };
      auto g_loss = [&] {
        torch::Tensor total = torch::zeros({});
        double v_s2t = 0, v_t2s = 0, v_cyc = 0, v_dsc = 0, v_sad = 0, v_ccd = 0, v_cag = 0;
        for (int i = 0; i < M; ++i) {
          auto& di = s.discriminators.per_source_pixel[static_cast<std::size_t>(i)];
          const auto [a, b] = scales_of(i);
          std::map<std::string, torch::Tensor> comp;
          torch::Tensor pixel = torch::zeros({});
          for (std::size_t sc = a; sc < b; ++sc) {
            const auto& o = pairs[i][sc];
            const auto g = pair_games(dt, di, o, conv, false);
            const auto cyc = pair_cycle(o);
            const auto dsc = consistency(i, o.fake_t, o.x);
            std::map<std::string, torch::Tensor> per{{"gan_s2t", g.s2t.generator_loss(conv)},
                                                     {"gan_t2s", g.t2s.generator_loss(conv)},
                                                     {"cycle", cyc},
                                                     {"dsc", dsc}};
            pixel = pixel + weighted_total(per, w, {"gan_s2t", "gan_t2s", "cycle", "dsc"});
            if (sc == 0 || (plus && sc == a)) {
              v_s2t += g.s2t.value().item<double>();
              v_t2s += g.t2s.value().item<double>();
              v_cyc += cyc.item<double>();
              v_dsc += dsc.item<double>();
            }
          }
          const auto sad = aggregation_game(i, false);
          const auto ccd = cross_game(i, false);
          v_sad += sad.value().item<double>();
          v_ccd += ccd.value().item<double>();
          comp["sad"] = sad.generator_loss(conv);
          comp["ccd"] = ccd.generator_loss(conv);
          if (plus) {
            comp["cag"] = pixel;
            v_cag += pixel.item<double>();
            total = total + weighted_total(comp, w, {"cag", "sad", "ccd"});
          } else {
            // Pixel terms are already weighted inside `pixel`.
            total = total + pixel + weighted_total(comp, w, {"sad", "ccd"});
          }
        }
        values = {{"gan_s2t", v_s2t / M}, {"gan_t2s", v_t2s / M}, {"cycle", v_cyc / M},
                  {"dsc", v_dsc / M},     {"sad", v_sad / M},     {"ccd", v_ccd / M}};
        if (plus) values["cag"] = v_cag / M;
        return total;
      };
      const auto r = adversarial_step(d_opt, d_params, g_opt, g_params, d_loss, g_loss);
      for (const auto& [key, v] : values) means.add(key, v);
      means.add("d_loss", r.discriminator);
      means.add("g_loss", r.generator);
    }
    json rec = detail::tag(s, 2, "translators");
    rec["epoch"] = e;
    rec["steps"] = steps;
    rec["losses"] = means.to_json();
    rec["probe_cycle_loss"] = probe_cycle_loss(s, d);
    detail::stamp_time(rec, detail::seconds_since(t0), c.deterministic, obs);
    detail::emit(s, obs, rec);
    detail::progress(obs, "round " + std::to_string(s.round) + " stage 2 epoch " + std::to_string(e + 1) + "/" +
                              std::to_string(c.stage2_epochs));
  }
  out.probe_end = probe_cycle_loss(s, d);
  detail::finish_stage(s, 2, obs);
  return out;
}

/// F on the aggregated adapted domain with FLA (and CLA in MADAN+), then a
/// held-out evaluation when a labeled target split is available.
inline StageSummary stage3_task_train(TrainState& s, const TrainingData& d, const TrainObserver* obs = nullptr) {
  detail::require_stage(s, 3);
  const auto& c = s.config;
  const auto seed = detail::stage_seed(c, s.round, 3);
  torch::manual_seed(seed);
  TaskTrainSpec spec{adapted_domains(s, d), d.source_labels, c.mode != Mode::source_only};
  const auto [before, after] =
      train_task_network(s, s.task, spec, d.target_images, c.stage3_epochs, seed, detail::tag(s, 3, "task"), obs);
  detail::progress(obs, "round " + std::to_string(s.round) + " stage 3 done (probe task loss " +
                            std::to_string(before) + " -> " + std::to_string(after) + ")");
  if (d.test) {
    auto report = evaluate(s.task, *d.test);
    report.metadata["round"] = s.round;
    json rec{{"type", "eval"}, {"round", s.round}, {"domain", d.test->name}, {"report", to_json(report)}};
    detail::emit(s, obs, rec);
  }
  detail::finish_stage(s, 3, obs);
  return {before, after};
}

/// Runs the remaining stages of every outer iteration from wherever `s` stands.
inline void run_schedule(TrainState& s, const TrainingData& d, const TrainObserver* obs = nullptr) {
  if (s.config.deterministic) {
    torch::set_num_threads(1);
    at::globalContext().setDeterministicAlgorithms(true, false);
  }
  while (!s.finished()) {
    try {
      if (s.stage_done == 0) stage1_pretrain(s, d, obs);
      if (s.stage_done == 1) stage2_aggregate(s, d, obs);
      if (s.stage_done == 2) stage3_task_train(s, d, obs);
    } catch (const Error& e) {
      // a loss rejecting non-finite scores mid-run is the same failure as a non-finite loss
      const bool non_finite = e.kind() == ErrorKind::contract && std::string_view(e.what()).find("non-finite") != std::string_view::npos;
      if (e.kind() != ErrorKind::divergence && !non_finite) throw;
      fail(ErrorKind::divergence, std::string(e.what()) + " in round " + std::to_string(s.round) + " after stage " +
                                      std::to_string(s.stage_done) + "; last finite checkpoint is round" +
                                      std::to_string(s.round) + "_stage" + std::to_string(s.stage_done));
    }
  }
}

/// Fresh state, whole schedule, final report on the labeled target split (if any).
struct TrainResult {
  TrainState state;
  std::optional<MetricReport> report;
};

inline std::optional<MetricReport> last_eval(const TrainState& s) {
  for (auto it = s.history.rbegin(); it != s.history.rend(); ++it)
    if (it->value("type", "") == "eval") return metric_report_from_json(it->at("report"));
  return std::nullopt;
}

inline TrainResult train(const TrainingData& d, const TrainConfig& config, const TrainObserver* obs = nullptr) {
  TrainResult r{init_state(config, d), std::nullopt};
  run_schedule(r.state, d, obs);
  r.report = last_eval(r.state);
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline TensorArchive state_archive(const TrainState& s) {
  TensorArchive a;
  a.metadata = {{"config", to_json(s.config)},
                {"task_kind", to_string(s.kind)},
                {"num_sources", s.num_sources},
                {"channels", s.channels},
                {"image_size", s.image_size},
                {"num_classes", s.num_classes},
                {"source_names", s.source_names},
                {"round", s.round},
                {"stage_done", s.stage_done},
                {"snapshots", s.snapshots.size()}};
  for (std::size_t i = 0; i < s.translators.size(); ++i) {
    append_module(a, "translator" + std::to_string(i) + ".forward", *s.translators[i].forward);
    append_module(a, "translator" + std::to_string(i) + ".backward", *s.translators[i].backward);
  }
  const auto& ds = s.discriminators;
  if (!ds.target_pixel.is_empty()) append_module(a, "disc.target", *ds.target_pixel);
  for (std::size_t i = 0; i < ds.per_source_pixel.size(); ++i)
    append_module(a, "disc.source" + std::to_string(i), *ds.per_source_pixel[i]);
  for (std::size_t i = 0; i < ds.aggregation.size(); ++i)
    append_module(a, "disc.aggregation" + std::to_string(i), *ds.aggregation[i]);
  if (!ds.feature.is_empty()) append_module(a, "disc.feature", *ds.feature);
  if (ds.has_class_discriminators()) append_module(a, "disc.class", *ds.per_class);
  append_module(a, "task", *s.task);
  for (std::size_t i = 0; i < s.snapshots.size(); ++i) append_module(a, "snapshot" + std::to_string(i), *s.snapshots[i]);
  return a;
}

inline void save_checkpoint(const fs::path& path, const TrainState& s) { write_archive(path, state_archive(s)); }

/// Rebuilds the state from its stored config; `expected`, when given, must match that config exactly.
inline TrainState load_checkpoint(const fs::path& path, const TrainConfig* expected = nullptr) {
  const auto a = read_archive(path);
  const auto& m = a.metadata;
  TrainState s;
  try {
    const auto cfg = config_from_json(m.at("config"));
    if (expected != nullptr) {
      auto want = *expected;
      want.model.translator.channels = m.at("channels").get<int>();
      want.task_kind = task_kind_from_string(m.at("task_kind").get<std::string>());
      require(to_json(want) == to_json(cfg), ErrorKind::checkpoint,
              "checkpoint " + path.string() + " was written with a different config");
    }
    s = init_state(cfg, task_kind_from_string(m.at("task_kind").get<std::string>()), m.at("num_sources").get<int>(),
                   m.at("channels").get<int>(), m.at("image_size").get<int>(), m.at("num_classes").get<int>(),
                   m.at("source_names").get<std::vector<std::string>>());
    s.round = m.at("round").get<int>();
    s.stage_done = m.at("stage_done").get<int>();
    const auto n_snap = m.at("snapshots").get<std::size_t>();
    for (std::size_t i = 0; i < n_snap; ++i) s.snapshots.push_back(trainable_copy(s.task));
  } catch (const json::exception& e) {
    fail(ErrorKind::checkpoint, std::string("checkpoint metadata: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::checkpoint) throw;
    fail(ErrorKind::checkpoint, std::string("checkpoint config: ") + e.what());
  }
  const auto expected_tensors = state_archive(s).tensors;
  require(expected_tensors.size() == a.tensors.size(), ErrorKind::checkpoint,
          "checkpoint holds " + std::to_string(a.tensors.size()) + " tensors but the config expects " +
              std::to_string(expected_tensors.size()));
  for (std::size_t i = 0; i < s.translators.size(); ++i) {
    restore_module(a, "translator" + std::to_string(i) + ".forward", *s.translators[i].forward);
    restore_module(a, "translator" + std::to_string(i) + ".backward", *s.translators[i].backward);
  }
  auto& ds = s.discriminators;
  if (!ds.target_pixel.is_empty()) restore_module(a, "disc.target", *ds.target_pixel);
  for (std::size_t i = 0; i < ds.per_source_pixel.size(); ++i)
    restore_module(a, "disc.source" + std::to_string(i), *ds.per_source_pixel[i]);
  for (std::size_t i = 0; i < ds.aggregation.size(); ++i)
    restore_module(a, "disc.aggregation" + std::to_string(i), *ds.aggregation[i]);
  if (!ds.feature.is_empty()) restore_module(a, "disc.feature", *ds.feature);
  if (ds.has_class_discriminators()) restore_module(a, "disc.class", *ds.per_class);
  restore_module(a, "task", *s.task);
  for (std::size_t i = 0; i < s.snapshots.size(); ++i) {
    restore_module(a, "snapshot" + std::to_string(i), *s.snapshots[i]);
    s.snapshots[i] = frozen_copy(s.snapshots[i]);
  }
  return s;
}

}  // namespace madan
