#pragma once

// TrainConfig and its JSON form {"trainer": {...}, "model": {...}, "weights": {...}}.
// Unknown keys and ill-typed values are configuration errors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "madan/data.hpp"
#include "madan/error.hpp"
#include "madan/losses.hpp"
#include "madan/models.hpp"

namespace madan {

using json = nlohmann::json;

enum class Mode { madan, madan_plus, source_only };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::madan: return "madan";
    case Mode::madan_plus: return "madan+";
    case Mode::source_only: return "source_only";
  }
  return "?";
}

inline Mode mode_from_string(const std::string& s) {
  if (s == "madan") return Mode::madan;
  if (s == "madan+" || s == "madan_plus") return Mode::madan_plus;
  if (s == "source_only") return Mode::source_only;
  fail(ErrorKind::config, "unknown mode '" + s + "' (expected madan, madan+ or source_only)");
}

/// Which network scores translated images in the semantic-consistency term.
enum class Consistency {
  dynamic,  // F_A = F, the task network trained on the adapted domain
  frozen,   // the frozen per-source snapshot F_i
  none,
};

inline std::string to_string(Consistency c) {
  return c == Consistency::dynamic ? "dynamic" : c == Consistency::frozen ? "frozen" : "none";
}

inline Consistency consistency_from_string(const std::string& s) {
  if (s == "dynamic") return Consistency::dynamic;
  if (s == "frozen") return Consistency::frozen;
  if (s == "none") return Consistency::none;
  fail(ErrorKind::config, "unknown semantic_consistency '" + s + "'");
}

struct TrainConfig {
  Mode mode = Mode::madan;
  TaskKind task_kind = TaskKind::classification;
  int stage1_epochs = 20;
  int stage2_epochs = 20;
  int stage3_epochs = 40;
  int snapshot_epochs = 1;  // per-source fine-tune that produces F_i
  int outer_iterations = 2;
  int batch_size = 8;
  int steps_per_epoch = 0;  // 0 = one pass over the largest domain
  double lr_generator = 2e-4;
  double lr_discriminator = 2e-4;
  double lr_task = 1e-4;
  double lr_feature = 1e-4;
  double gan_beta1 = 0.5;
  std::vector<double> crop_scales{1.0, 0.5};
  int grid_rows = 8;
  int grid_cols = 8;
  std::uint64_t seed = 0;
  GanConvention convention = GanConvention::standard;
  Consistency semantic_consistency = Consistency::dynamic;
  bool deterministic = true;
  ModelConfig model{};
  LossWeights weights{};

  GridSpec grid() const { return {grid_rows, grid_cols}; }

  void validate() const {
    auto nonneg = [](int v, const char* k) {
      require(v >= 0, ErrorKind::config, std::string("trainer.") + k + " must be >= 0");
    };
    nonneg(stage1_epochs, "stage1_epochs");
    nonneg(stage2_epochs, "stage2_epochs");
    nonneg(stage3_epochs, "stage3_epochs");
    nonneg(snapshot_epochs, "snapshot_epochs");
    nonneg(steps_per_epoch, "steps_per_epoch");
    require(outer_iterations >= 1, ErrorKind::config, "trainer.outer_iterations must be >= 1");
    require(batch_size >= 1, ErrorKind::config, "trainer.batch_size must be >= 1");
    auto lr_ok = [](double v, const char* k) {
      require(std::isfinite(v) && v >= 0.0, ErrorKind::config, std::string("trainer.") + k + " must be finite and >= 0");
    };
    lr_ok(lr_generator, "lr_generator");
    lr_ok(lr_discriminator, "lr_discriminator");
    lr_ok(lr_task, "lr_task");
    lr_ok(lr_feature, "lr_feature");
    require(gan_beta1 >= 0.0 && gan_beta1 < 1.0, ErrorKind::config, "trainer.gan_beta1 must be in [0, 1)");
    require(!crop_scales.empty(), ErrorKind::config, "trainer.crop_scales needs at least one scale");
    for (double c : crop_scales)
      require(c > 0.0 && c <= 1.0, ErrorKind::config, "trainer.crop_scales entries must be in (0, 1]");
    require(grid_rows >= 1 && grid_cols >= 1, ErrorKind::config, "trainer.grid_rows/grid_cols must be >= 1");
    require(!(mode == Mode::madan_plus && task_kind == TaskKind::classification), ErrorKind::config,
            "trainer.mode madan+ requires task_kind segmentation");
    model.validate();
    weights.validate();
  }
};

namespace detail {

struct Binding {
  std::string key;
  std::function<json()> get;
  std::function<void(const json&)> set;
};

template <class T>
Binding bind_field(std::string key, T& ref) {
  return {key, [&ref] { return json(ref); }, [&ref](const json& j) { ref = j.get<T>(); }};
}

template <class E, class ToS, class FromS>
Binding bind_enum(std::string key, E& ref, ToS to_s, FromS from_s) {
  return {key, [&ref, to_s] { return json(to_s(ref)); },
          [&ref, from_s](const json& j) { ref = from_s(j.get<std::string>()); }};
}

inline std::vector<Binding> trainer_bindings(TrainConfig& c) {
  return {bind_enum("mode", c.mode, [](Mode m) { return to_string(m); }, mode_from_string),
          bind_enum("task_kind", c.task_kind, [](TaskKind k) { return to_string(k); }, task_kind_from_string),
          bind_field("stage1_epochs", c.stage1_epochs),
          bind_field("stage2_epochs", c.stage2_epochs),
          bind_field("stage3_epochs", c.stage3_epochs),
          bind_field("snapshot_epochs", c.snapshot_epochs),
          bind_field("outer_iterations", c.outer_iterations),
          bind_field("batch_size", c.batch_size),
          bind_field("steps_per_epoch", c.steps_per_epoch),
          bind_field("lr_generator", c.lr_generator),
          bind_field("lr_discriminator", c.lr_discriminator),
          bind_field("lr_task", c.lr_task),
          bind_field("lr_feature", c.lr_feature),
          bind_field("gan_beta1", c.gan_beta1),
          bind_field("crop_scales", c.crop_scales),
          bind_field("grid_rows", c.grid_rows),
          bind_field("grid_cols", c.grid_cols),
          bind_field("seed", c.seed),
          bind_enum("convention", c.convention, [](GanConvention g) { return to_string(g); },
                    gan_convention_from_string),
          bind_enum("semantic_consistency", c.semantic_consistency, [](Consistency s) { return to_string(s); },
                    consistency_from_string),
          bind_field("deterministic", c.deterministic)};
}

inline std::vector<Binding> model_bindings(TrainConfig& c) {
  auto& m = c.model;
  return {bind_field("translator_blocks", m.translator.residual_blocks),
          bind_field("translator_width", m.translator.base_width),
          bind_field("translator_downsamples", m.translator.downsamples),
          bind_field("discriminator_width", m.discriminator_width),
          bind_field("feature_discriminator_width", m.feature_discriminator_width),
          bind_field("class_discriminator_width", m.class_discriminator_width),
          bind_field("task_width", m.task.width)};
}

inline std::vector<Binding> weight_bindings(TrainConfig& c) {
  std::vector<Binding> out;
  for (auto& [k, v] : c.weights.fields()) out.push_back(bind_field(k, *v));
  return out;
}

inline std::vector<std::pair<std::string, std::vector<Binding>>> sections(TrainConfig& c) {
  return {{"trainer", trainer_bindings(c)}, {"model", model_bindings(c)}, {"weights", weight_bindings(c)}};
}

}  // namespace detail

inline json to_json(const TrainConfig& cfg) {
  auto c = cfg;
  json j = json::object();
  for (auto& [name, fields] : detail::sections(c)) {
    json s = json::object();
    for (auto& f : fields) s[f.key] = f.get();
    j[name] = s;
  }
  return j;
}

/// Applies the keys present in `j` on top of `base`.
inline TrainConfig apply_config_json(TrainConfig base, const json& j) {
  require(j.is_object(), ErrorKind::config, "config must be a JSON object");
  auto secs = detail::sections(base);
  for (const auto& [name, body] : j.items()) {
    auto it = std::find_if(secs.begin(), secs.end(), [&](const auto& s) { return s.first == name; });
    require(it != secs.end(), ErrorKind::config, "unknown config section '" + name + "'");
    require(body.is_object(), ErrorKind::config, "config section '" + name + "' must be an object");
    for (const auto& [key, value] : body.items()) {
      auto f = std::find_if(it->second.begin(), it->second.end(), [&](const auto& b) { return b.key == key; });
      require(f != it->second.end(), ErrorKind::config, "unknown config key '" + name + "." + key + "'");
      try {
        f->set(value);
      } catch (const json::exception&) {
        fail(ErrorKind::config, "bad value for '" + name + "." + key + "': " + value.dump());
      }
    }
  }
  return base;
}

inline TrainConfig config_from_json(const json& j) {
  auto c = apply_config_json(TrainConfig{}, j);
  c.validate();
  return c;
}

/// `section.key=value`; the value is parsed as JSON, falling back to a string.
inline TrainConfig apply_override(const TrainConfig& base, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  require(eq != std::string::npos && dot != std::string::npos && dot < eq, ErrorKind::config,
          "override must look like section.key=value: '" + assignment + "'");
  const auto section = assignment.substr(0, dot);
  const auto key = assignment.substr(dot + 1, eq - dot - 1);
  const auto text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  return apply_config_json(base, json{{section, {{key, value}}}});
}

}  // namespace madan
