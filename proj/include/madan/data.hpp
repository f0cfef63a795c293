#pragma once

// Dataset model and procedural multi-domain benchmarks.
//
// Every synthetic domain renders the same class-indexed content (glyphs for
// classification, shape layouts for segmentation) and then applies a domain
// style: brightness polarity, hue, background texture or additive noise.
// Sources are labeled; the target is not. A labeled held-out split of the
// target style is available separately for evaluation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "madan/error.hpp"

namespace madan {

inline constexpr std::uint8_t kIgnoreLabel = 255;

enum class TaskKind { classification, segmentation };

inline std::string to_string(TaskKind k) {
  return k == TaskKind::classification ? "classification" : "segmentation";
}

inline TaskKind task_kind_from_string(const std::string& s) {
  if (s == "classification") return TaskKind::classification;
  if (s == "segmentation") return TaskKind::segmentation;
  fail(ErrorKind::config, "unknown task kind '" + s + "'");
}

/// H×W×C image, interleaved channels, values in [-1, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, int c, float fill = -1.0f)
      : height(h), width(w), channels(c),
        pixels(static_cast<std::size_t>(h) * w * c, fill) {}

  float& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  float at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  void validate() const {
    require(height >= 8 && width >= 8, ErrorKind::contract,
            "image must be at least 8x8, got " + std::to_string(height) + "x" +
                std::to_string(width));
    require(channels == 1 || channels == 3, ErrorKind::contract,
            "image channels must be 1 or 3");
    require(pixels.size() == static_cast<std::size_t>(height) * width * channels,
            ErrorKind::contract, "image pixel buffer size mismatch");
    for (float v : pixels)
      require(std::isfinite(v) && v >= -1.0f && v <= 1.0f, ErrorKind::contract,
              "image pixel outside [-1, 1]");
  }
};

struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }

  void validate(int num_classes) const {
    require(labels.size() == static_cast<std::size_t>(height) * width,
            ErrorKind::contract, "label map buffer size mismatch");
    for (auto v : labels)
      require(v == kIgnoreLabel || v < num_classes, ErrorKind::contract,
              "label " + std::to_string(v) + " out of range for L=" +
                  std::to_string(num_classes));
  }
};

struct DomainBundle {
  std::string name;
  TaskKind kind = TaskKind::classification;
  int num_classes = 0;
  std::vector<Image> images;
  std::vector<int> class_labels;       // classification
  std::vector<LabelMap> label_maps;    // segmentation

  std::size_t size() const { return images.size(); }
  bool labeled() const {
    return kind == TaskKind::classification ? !class_labels.empty() : !label_maps.empty();
  }
  int height() const { return images.empty() ? 0 : images.front().height; }
  int width() const { return images.empty() ? 0 : images.front().width; }
  int channels() const { return images.empty() ? 0 : images.front().channels; }

  void validate() const {
    require(num_classes >= 2, ErrorKind::contract, name + ": need at least 2 classes");
    require(!images.empty(), ErrorKind::contract, name + ": empty bundle");
    const auto& ref = images.front();
    for (const auto& im : images) {
      im.validate();
      require(im.height == ref.height && im.width == ref.width && im.channels == ref.channels,
              ErrorKind::shape, name + ": images do not share one shape");
    }
    if (kind == TaskKind::classification) {
      require(label_maps.empty(), ErrorKind::contract, name + ": classification bundle holds label maps");
      require(class_labels.empty() || class_labels.size() == images.size(), ErrorKind::contract,
              name + ": label count differs from image count");
      for (int y : class_labels)
        require(y >= 0 && y < num_classes, ErrorKind::contract,
                name + ": class label " + std::to_string(y) + " out of range");
    } else {
      require(class_labels.empty(), ErrorKind::contract, name + ": segmentation bundle holds class labels");
      require(label_maps.empty() || label_maps.size() == images.size(), ErrorKind::contract,
              name + ": label count differs from image count");
      for (const auto& m : label_maps) {
        require(m.height == ref.height && m.width == ref.width, ErrorKind::shape,
                name + ": label map shape differs from image shape");
        m.validate(num_classes);
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Tensor views

/// Stacks the selected images into an N×C×H×W float tensor.
inline torch::Tensor images_to_tensor(const DomainBundle& b, const std::vector<std::int64_t>& idx) {
  const int h = b.height(), w = b.width(), c = b.channels();
  auto out = torch::empty({static_cast<long>(idx.size()), c, h, w}, torch::kFloat32);
  auto acc = out.accessor<float, 4>();
  for (std::size_t n = 0; n < idx.size(); ++n) {
    const Image& im = b.images.at(static_cast<std::size_t>(idx[n]));
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < c; ++ch) acc[n][ch][y][x] = im.at(y, x, ch);
  }
  return out;
}

inline torch::Tensor images_to_tensor(const DomainBundle& b) {
  std::vector<std::int64_t> idx(b.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int64_t>(i);
  return images_to_tensor(b, idx);
}

/// Class labels as an N int64 tensor, or label maps as N×H×W int64.
inline torch::Tensor labels_to_tensor(const DomainBundle& b) {
  if (b.kind == TaskKind::classification) {
    std::vector<std::int64_t> v(b.class_labels.begin(), b.class_labels.end());
    return torch::tensor(v, torch::kInt64);
  }
  const int h = b.height(), w = b.width();
  auto out = torch::empty({static_cast<long>(b.label_maps.size()), h, w}, torch::kInt64);
  auto acc = out.accessor<std::int64_t, 3>();
  for (std::size_t n = 0; n < b.label_maps.size(); ++n)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) acc[n][y][x] = b.label_maps[n].at(y, x);
  return out;
}

/// Inverse of images_to_tensor for a single N=1 slice (values are clamped to [-1, 1]).
inline Image tensor_to_image(const torch::Tensor& chw) {
  auto t = chw.detach().to(torch::kFloat32).contiguous();
  const int c = static_cast<int>(t.size(0)), h = static_cast<int>(t.size(1)),
            w = static_cast<int>(t.size(2));
  Image im(h, w, c);
  auto acc = t.accessor<float, 3>();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) im.at(y, x, ch) = std::clamp(acc[ch][y][x], -1.0f, 1.0f);
  return im;
}

// ---------------------------------------------------------------------------
// Procedural generators

struct SynthSpec {
  int num_sources = 3;
  int num_classes = 10;
  int images_per_domain = 1000;
  int image_size = 32;
  std::uint64_t seed = 0;

  void validate() const {
    require(num_sources >= 2, ErrorKind::config, "num_sources must be >= 2");
    require(num_classes >= 2, ErrorKind::config, "num_classes must be >= 2");
    require(num_classes < kIgnoreLabel, ErrorKind::config, "num_classes must be < 255");
    require(images_per_domain >= 1, ErrorKind::config, "images_per_domain must be >= 1");
    require(image_size >= 16, ErrorKind::config, "image_size must be >= 16");
  }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return splitmix64(splitmix64(splitmix64(seed) ^ a) ^ (b * 0x632BE59BD9B4E019ull));
}

using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}
inline int uniform_int(Rng& rng, int lo, int hi) {  // inclusive
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

using Rgb = std::array<double, 3>;

inline Rgb hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  Rgb rgb{0, 0, 0};
  if (hp < 1) rgb = {c, x, 0};
  else if (hp < 2) rgb = {x, c, 0};
  else if (hp < 3) rgb = {0, c, x};
  else if (hp < 4) rgb = {0, x, c};
  else if (hp < 5) rgb = {x, 0, c};
  else rgb = {c, 0, x};
  const double m = v - c;
  return {rgb[0] + m, rgb[1] + m, rgb[2] + m};
}

// 5×7 bitmaps for classes 0-9; higher classes get seeded random glyphs.
inline constexpr std::array<std::array<const char*, 7>, 10> kDigitFont{{
    {"01110", "10001", "10011", "10101", "11001", "10001", "01110"},
    {"00100", "01100", "00100", "00100", "00100", "00100", "01110"},
    {"01110", "10001", "00001", "00010", "00100", "01000", "11111"},
    {"11111", "00010", "00100", "00010", "00001", "10001", "01110"},
    {"00010", "00110", "01010", "10010", "11111", "00010", "00010"},
    {"11111", "10000", "11110", "00001", "00001", "10001", "01110"},
    {"00110", "01000", "10000", "11110", "10001", "10001", "01110"},
    {"11111", "00001", "00010", "00100", "01000", "01000", "01000"},
    {"01110", "10001", "10001", "01110", "10001", "10001", "01110"},
    {"01110", "10001", "10001", "01111", "00001", "00010", "01100"},
}};

using Glyph = std::array<std::array<bool, 5>, 7>;

inline Glyph glyph_for_class(int cls) {
  Glyph g{};
  if (cls < 10) {
    for (int r = 0; r < 7; ++r)
      for (int c = 0; c < 5; ++c) g[r][c] = kDigitFont[cls][r][c] == '1';
    return g;
  }
  Rng rng(mix_seed(0xC1A55ull, static_cast<std::uint64_t>(cls)));
  for (int r = 0; r < 7; ++r)
    for (int c = 0; c < 3; ++c) {
      const bool on = uniform(rng, 0, 1) < 0.45;
      g[r][c] = on;
      g[r][4 - c] = on;  // mirror symmetry keeps random glyphs glyph-like
    }
  return g;
}

/// Coverage mask in [0,1] of a jittered glyph, 3×3 supersampled.
inline std::vector<double> render_glyph_mask(const Glyph& g, int size, Rng& rng) {
  std::vector<double> mask(static_cast<std::size_t>(size) * size, 0.0);
  const double scale = uniform(rng, 0.62, 0.85);
  const double gh = scale * size;
  const double gw = gh * 5.0 / 7.0 * uniform(rng, 0.85, 1.1);
  const double oy = uniform(rng, 0.0, size - gh);
  const double ox = uniform(rng, 0.0, size - gw);
  const double slant = uniform(rng, -0.18, 0.18);
  const double thick = uniform(rng, 0.0, 0.35);  // in glyph-cell units
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double cover = 0.0;
      for (int sy = 0; sy < 3; ++sy)
        for (int sx = 0; sx < 3; ++sx) {
          const double py = y + (sy + 0.5) / 3.0;
          const double px = x + (sx + 0.5) / 3.0;
          const double v = (py - oy) / gh * 7.0;
          const double u = (px - ox - slant * (py - oy - gh / 2)) / gw * 5.0;
          bool hit = false;
          for (int r = std::max(0, static_cast<int>(v - 1)); r <= std::min(6, static_cast<int>(v + 1)) && !hit; ++r)
            for (int c = std::max(0, static_cast<int>(u - 1)); c <= std::min(4, static_cast<int>(u + 1)) && !hit; ++c)
              if (g[r][c] && v >= r - thick && v < r + 1 + thick && u >= c - thick && u < c + 1 + thick)
                hit = true;
          cover += hit ? 1.0 : 0.0;
        }
      mask[static_cast<std::size_t>(y) * size + x] = cover / 9.0;
    }
  return mask;
}

enum class StyleKind { plain, hue, texture, noise, inverted };

struct DomainStyle {
  StyleKind kind;
  double hue_offset = 0.0;
};

inline DomainStyle source_style(int index) {
  static constexpr std::array<StyleKind, 4> cycle{StyleKind::plain, StyleKind::hue,
                                                  StyleKind::texture, StyleKind::noise};
  return {cycle[static_cast<std::size_t>(index) % 4], 0.13 * (index / 4)};
}

inline DomainStyle target_style() { return {StyleKind::inverted, 0.0}; }

inline std::string style_name(const DomainStyle& s) {
  switch (s.kind) {
    case StyleKind::plain: return "plain";
    case StyleKind::hue: return "hue";
    case StyleKind::texture: return "texture";
    case StyleKind::noise: return "noise";
    case StyleKind::inverted: return "inverted";
  }
  return "?";
}

/// Per-image background field and foreground colour sampler for one style.
struct StyledCanvas {
  int size;
  std::vector<Rgb> background;  // size×size, [0,1]
  double noise_sigma = 0.0;
};

inline StyledCanvas make_canvas(const DomainStyle& st, int size, Rng& rng) {
  StyledCanvas cv{size, std::vector<Rgb>(static_cast<std::size_t>(size) * size), 0.0};
  auto fill = [&](const Rgb& c) { std::fill(cv.background.begin(), cv.background.end(), c); };
  switch (st.kind) {
    case StyleKind::plain:
      fill({0.0, 0.0, 0.0});
      cv.noise_sigma = 0.02;
      break;
    case StyleKind::hue: {
      const double h = 0.62 + st.hue_offset + uniform(rng, -0.05, 0.05);
      fill(hsv_to_rgb(h, 0.7, uniform(rng, 0.3, 0.42)));
      cv.noise_sigma = 0.02;
      break;
    }
    case StyleKind::texture: {
      const double theta = uniform(rng, 0, M_PI);
      const double freq = uniform(rng, 0.35, 0.8);
      const double phase = uniform(rng, 0, 2 * M_PI);
      const double base = uniform(rng, 0.25, 0.4);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const double s = std::sin(freq * (x * std::cos(theta) + y * std::sin(theta)) + phase);
          const double v = base + 0.18 * s;
          cv.background[static_cast<std::size_t>(y) * size + x] = {v, v * 0.95, v * 0.8};
        }
      cv.noise_sigma = 0.02;
      break;
    }
    case StyleKind::noise:
      fill({0.2, 0.2, 0.2});
      cv.noise_sigma = 0.22;
      break;
    case StyleKind::inverted: {
      const double h = 0.12 + st.hue_offset + uniform(rng, -0.04, 0.04);
      fill(hsv_to_rgb(h, 0.45, uniform(rng, 0.82, 0.95)));
      cv.noise_sigma = 0.04;
      break;
    }
  }
  return cv;
}

inline Rgb foreground_colour(const DomainStyle& st, Rng& rng) {
  switch (st.kind) {
    case StyleKind::plain: {
      const double v = uniform(rng, 0.85, 1.0);
      return {v, v, v};
    }
    case StyleKind::hue:
      return hsv_to_rgb(0.02 + st.hue_offset + uniform(rng, -0.06, 0.06), 0.75, uniform(rng, 0.9, 1.0));
    case StyleKind::texture: {
      const double v = uniform(rng, 0.88, 1.0);
      return {v, v, v * 0.7};
    }
    case StyleKind::noise: {
      const double v = uniform(rng, 0.8, 0.95);
      return {v, v, v};
    }
    case StyleKind::inverted:
      return hsv_to_rgb(0.7 + uniform(rng, -0.05, 0.05), 0.5, uniform(rng, 0.08, 0.2));
  }
  return {1, 1, 1};
}

/// Composites a coverage mask onto the canvas in-place; `colour` per mask channel.
inline void composite(std::vector<Rgb>& canvas, const std::vector<double>& mask, const Rgb& colour) {
  for (std::size_t i = 0; i < canvas.size(); ++i) {
    const double a = mask[i];
    if (a <= 0.0) continue;
    for (int c = 0; c < 3; ++c) canvas[i][c] = canvas[i][c] * (1.0 - a) + colour[c] * a;
  }
}

inline Image finish_image(const std::vector<Rgb>& canvas, int size, double noise_sigma, Rng& rng) {
  Image im(size, size, 3);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = canvas[static_cast<std::size_t>(y) * size + x][c] * 2.0 - 1.0;
        if (noise_sigma > 0.0) v += noise_sigma * noise(rng);
        im.at(y, x, c) = static_cast<float>(std::clamp(v, -1.0, 1.0));
      }
  return im;
}

inline DomainBundle render_classification_domain(const SynthSpec& spec, const DomainStyle& st,
                                                 const std::string& name, std::uint64_t stream,
                                                 bool labeled) {
  DomainBundle b;
  b.name = name;
  b.kind = TaskKind::classification;
  b.num_classes = spec.num_classes;
  Rng rng(mix_seed(spec.seed, stream, 1));
  std::vector<Glyph> glyphs;
  for (int c = 0; c < spec.num_classes; ++c) glyphs.push_back(glyph_for_class(c));
  b.images.reserve(static_cast<std::size_t>(spec.images_per_domain));
  for (int n = 0; n < spec.images_per_domain; ++n) {
    const int cls = uniform_int(rng, 0, spec.num_classes - 1);
    auto cv = make_canvas(st, spec.image_size, rng);
    const auto mask = render_glyph_mask(glyphs[static_cast<std::size_t>(cls)], spec.image_size, rng);
    composite(cv.background, mask, foreground_colour(st, rng));
    b.images.push_back(finish_image(cv.background, spec.image_size, cv.noise_sigma, rng));
    if (labeled) b.class_labels.push_back(cls);
  }
  return b;
}

// Figure classes are distinguished by shape only; colour comes from the style.
enum class Shape { disc, box, triangle, diamond, ring, cross };

inline Shape shape_for_class(int figure_class) {
  static constexpr std::array<Shape, 6> order{Shape::disc, Shape::box, Shape::triangle,
                                              Shape::diamond, Shape::ring, Shape::cross};
  return order[static_cast<std::size_t>(figure_class - 1) % order.size()];
}

inline bool shape_contains(Shape s, double u, double v) {  // u,v in [-1,1] shape frame
  switch (s) {
    case Shape::disc: return u * u + v * v <= 1.0;
    case Shape::box: return std::fabs(u) <= 0.85 && std::fabs(v) <= 0.85;
    case Shape::triangle: return v <= 0.9 && v >= -0.9 && std::fabs(u) <= (v + 0.9) / 1.8;
    case Shape::diamond: return std::fabs(u) + std::fabs(v) <= 1.0;
    case Shape::ring: {
      const double r = u * u + v * v;
      return r <= 1.0 && r >= 0.3;
    }
    case Shape::cross: return (std::fabs(u) <= 0.33 && std::fabs(v) <= 1.0) || (std::fabs(v) <= 0.33 && std::fabs(u) <= 1.0);
  }
  return false;
}

inline DomainBundle render_segmentation_domain(const SynthSpec& spec, const DomainStyle& st,
                                               const std::string& name, std::uint64_t stream,
                                               bool labeled) {
  DomainBundle b;
  b.name = name;
  b.kind = TaskKind::segmentation;
  b.num_classes = spec.num_classes;
  const int size = spec.image_size;
  const int figure_classes = spec.num_classes - 1;
  Rng rng(mix_seed(spec.seed, stream, 2));
  for (int n = 0; n < spec.images_per_domain; ++n) {
    auto cv = make_canvas(st, size, rng);
    LabelMap lm(size, size, 0);
    const int figures = uniform_int(rng, 2, 3);
    for (int f = 0; f < figures; ++f) {
      const int cls = 1 + uniform_int(rng, 0, figure_classes - 1);
      const Shape shape = shape_for_class(cls);
      const double radius = uniform(rng, 0.14, 0.24) * size;
      // Weak class-dependent vertical prior, so layouts share spatial statistics across domains.
      const double prior = figure_classes > 1 ? static_cast<double>(cls - 1) / (figure_classes - 1) : 0.5;
      const double cy = std::clamp(size * (0.25 + 0.5 * prior) + uniform(rng, -0.22, 0.22) * size,
                                   radius, size - radius);
      const double cx = uniform(rng, radius, size - radius);
      const double rot = uniform(rng, -0.3, 0.3);
      std::vector<double> mask(static_cast<std::size_t>(size) * size, 0.0);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          int hits = 0;
          for (int sy = 0; sy < 2; ++sy)
            for (int sx = 0; sx < 2; ++sx) {
              const double dy = (y + 0.25 + 0.5 * sy - cy) / radius;
              const double dx = (x + 0.25 + 0.5 * sx - cx) / radius;
              const double u = dx * std::cos(rot) + dy * std::sin(rot);
              const double v = -dx * std::sin(rot) + dy * std::cos(rot);
              hits += shape_contains(shape, u, v) ? 1 : 0;
            }
          const double a = hits / 4.0;
          mask[static_cast<std::size_t>(y) * size + x] = a;
          if (a >= 0.5) lm.at(y, x) = static_cast<std::uint8_t>(cls);
        }
      composite(cv.background, mask, foreground_colour(st, rng));
    }
    b.images.push_back(finish_image(cv.background, size, cv.noise_sigma, rng));
    if (labeled) b.label_maps.push_back(std::move(lm));
  }
  return b;
}

inline constexpr std::uint64_t kTargetStream = 1000;
inline constexpr std::uint64_t kTestStream = 2000;

}  // namespace detail

inline std::string source_name(int i) { return "source" + std::to_string(i); }
inline const std::string kTargetName = "target";
inline const std::string kTestName = "target_test";

/// num_sources labeled bundles followed by one unlabeled target bundle.
inline std::vector<DomainBundle> synthesize_classification_domains(const SynthSpec& spec) {
  spec.validate();
  std::vector<DomainBundle> out;
  for (int i = 0; i < spec.num_sources; ++i)
    out.push_back(detail::render_classification_domain(spec, detail::source_style(i), source_name(i),
                                                       static_cast<std::uint64_t>(i), true));
  out.push_back(detail::render_classification_domain(spec, detail::target_style(), kTargetName,
                                                     detail::kTargetStream, false));
  return out;
}

inline std::vector<DomainBundle> synthesize_segmentation_domains(const SynthSpec& spec) {
  spec.validate();
  std::vector<DomainBundle> out;
  for (int i = 0; i < spec.num_sources; ++i)
    out.push_back(detail::render_segmentation_domain(spec, detail::source_style(i), source_name(i),
                                                     static_cast<std::uint64_t>(i), true));
  out.push_back(detail::render_segmentation_domain(spec, detail::target_style(), kTargetName,
                                                   detail::kTargetStream, false));
  return out;
}

/// Labeled held-out images in the target style, drawn from an independent stream.
inline DomainBundle synthesize_target_test(const SynthSpec& spec, TaskKind kind) {
  spec.validate();
  return kind == TaskKind::classification
             ? detail::render_classification_domain(spec, detail::target_style(), kTestName,
                                                    detail::kTestStream, true)
             : detail::render_segmentation_domain(spec, detail::target_style(), kTestName,
                                                  detail::kTestStream, true);
}

}  // namespace madan
