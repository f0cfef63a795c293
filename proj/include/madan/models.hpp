#pragma once

// Network builders: cycle translators, the discriminator families and the
// task network with its feature head.

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

#include "madan/data.hpp"
#include "madan/error.hpp"

namespace madan {

namespace nn = torch::nn;

struct ConvGeometry {
  int kernel;
  int stride;
  int padding;
};

/// Receptive field of one output cell for a chain of convolutions.
inline int receptive_field(const std::vector<ConvGeometry>& layers) {
  int field = 1, jump = 1;
  for (const auto& l : layers) {
    field += (l.kernel - 1) * jump;
    jump *= l.stride;
  }
  return field;
}

inline std::int64_t count_parameters(const nn::Module& m) {
  std::int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

/// Normal(0, std) conv/linear weights, zero biases.
inline void init_normal(nn::Module& m, double stddev) {
  torch::NoGradGuard guard;
  for (auto& p : m.named_parameters()) {
    if (p.key().find("bias") != std::string::npos) p.value().zero_();
    else p.value().normal_(0.0, stddev);
  }
}

// ---------------------------------------------------------------------------
// Translator

struct TranslatorConfig {
  int residual_blocks = 9;
  int base_width = 64;
  int downsamples = 2;
  int channels = 3;
  bool zero_init_output = false;

  void validate() const {
    require(residual_blocks >= 1, ErrorKind::config, "translator.residual_blocks must be >= 1");
    require(base_width >= 1, ErrorKind::config, "translator.base_width must be >= 1");
    require(downsamples >= 0, ErrorKind::config, "translator.downsamples must be >= 0");
    require(channels == 1 || channels == 3, ErrorKind::config, "translator.channels must be 1 or 3");
  }
};

class ResidualBlockImpl : public nn::Module {
 public:
  explicit ResidualBlockImpl(int width) {
    body_ = register_module(
        "body", nn::Sequential(nn::ReflectionPad2d(1), nn::Conv2d(nn::Conv2dOptions(width, width, 3)),
                               nn::InstanceNorm2d(width), nn::ReLU(), nn::ReflectionPad2d(1),
                               nn::Conv2d(nn::Conv2dOptions(width, width, 3)), nn::InstanceNorm2d(width)));
  }
  torch::Tensor forward(const torch::Tensor& x) { return x + body_->forward(x); }

 private:
  nn::Sequential body_{nullptr};
};
TORCH_MODULE(ResidualBlock);

/// Encoder, residual trunk and decoder; tanh output keeps images in [-1, 1].
class ResnetGeneratorImpl : public nn::Module {
 public:
  explicit ResnetGeneratorImpl(const TranslatorConfig& cfg) : config_(cfg) {
    cfg.validate();
    nn::Sequential net;
    int w = cfg.base_width;
    net->push_back(nn::ReflectionPad2d(3));
    net->push_back(nn::Conv2d(nn::Conv2dOptions(cfg.channels, w, 7)));
    net->push_back(nn::InstanceNorm2d(w));
    net->push_back(nn::ReLU());
    for (int d = 0; d < cfg.downsamples; ++d) {
      net->push_back(nn::Conv2d(nn::Conv2dOptions(w, 2 * w, 3).stride(2).padding(1)));
      net->push_back(nn::InstanceNorm2d(2 * w));
      net->push_back(nn::ReLU());
      w *= 2;
    }
    for (int r = 0; r < cfg.residual_blocks; ++r) net->push_back(ResidualBlock(w));
    for (int d = 0; d < cfg.downsamples; ++d) {
      net->push_back(nn::ConvTranspose2d(
          nn::ConvTranspose2dOptions(w, w / 2, 3).stride(2).padding(1).output_padding(1)));
      net->push_back(nn::InstanceNorm2d(w / 2));
      net->push_back(nn::ReLU());
      w /= 2;
    }
    net->push_back(nn::ReflectionPad2d(3));
    output_ = nn::Conv2d(nn::Conv2dOptions(w, cfg.channels, 7));
    net->push_back(output_);
    net->push_back(nn::Tanh());
    net_ = register_module("net", net);
  }

  torch::Tensor forward(const torch::Tensor& x) { return net_->forward(x); }

  void zero_output_layer() {
    torch::NoGradGuard guard;
    output_->weight.zero_();
    output_->bias.zero_();
  }

  const TranslatorConfig& config() const { return config_; }

 private:
  TranslatorConfig config_;
  nn::Sequential net_{nullptr};
  nn::Conv2d output_{nullptr};
};
TORCH_MODULE(ResnetGenerator);

struct TranslatorPair {
  ResnetGenerator forward{nullptr};   // source -> target
  ResnetGenerator backward{nullptr};  // target -> source

  std::vector<torch::Tensor> parameters() const {
    auto p = forward->parameters();
    auto q = backward->parameters();
    p.insert(p.end(), q.begin(), q.end());
    return p;
  }
};

inline ResnetGenerator build_generator(const TranslatorConfig& cfg, std::uint64_t seed) {
  torch::manual_seed(seed);
  ResnetGenerator g(cfg);
  init_normal(*g, 0.02);
  if (cfg.zero_init_output) g->zero_output_layer();
  return g;
}

inline TranslatorPair build_translator(const TranslatorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  return {build_generator(cfg, detail::mix_seed(seed, 11)), build_generator(cfg, detail::mix_seed(seed, 12))};
}

// ---------------------------------------------------------------------------
// Discriminators. All return raw scores; the logistic map is applied by the
// losses' Score boundary.

struct PixelDiscriminatorConfig {
  int base_width = 64;
  int channels = 3;
  bool instance_norm = true;

  void validate() const {
    require(base_width >= 1, ErrorKind::config, "discriminator.base_width must be >= 1");
    require(channels == 1 || channels == 3, ErrorKind::config, "discriminator.channels must be 1 or 3");
  }
};

/// Four strided convolutions scoring overlapping patches.
class PatchDiscriminatorImpl : public nn::Module {
 public:
  explicit PatchDiscriminatorImpl(const PixelDiscriminatorConfig& cfg) {
    cfg.validate();
    const int w = cfg.base_width;
    auto lrelu = [] { return nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)); };
    nn::Sequential net;
    net->push_back(nn::Conv2d(nn::Conv2dOptions(cfg.channels, w, 4).stride(2).padding(1)));
    net->push_back(lrelu());
    net->push_back(nn::Conv2d(nn::Conv2dOptions(w, 2 * w, 4).stride(2).padding(1)));
    if (cfg.instance_norm) net->push_back(nn::InstanceNorm2d(2 * w));
    net->push_back(lrelu());
    net->push_back(nn::Conv2d(nn::Conv2dOptions(2 * w, 4 * w, 4).stride(1).padding(1)));
    if (cfg.instance_norm) net->push_back(nn::InstanceNorm2d(4 * w));
    net->push_back(lrelu());
    net->push_back(nn::Conv2d(nn::Conv2dOptions(4 * w, 1, 4).stride(1).padding(1)));
    net_ = register_module("net", net);
  }

  torch::Tensor forward(const torch::Tensor& x) { return net_->forward(x); }

  static std::vector<ConvGeometry> geometry() { return {{4, 2, 1}, {4, 2, 1}, {4, 1, 1}, {4, 1, 1}}; }

 private:
  nn::Sequential net_{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

inline PatchDiscriminator build_pixel_discriminator(const PixelDiscriminatorConfig& cfg, std::uint64_t seed) {
  torch::manual_seed(seed);
  PatchDiscriminator d(cfg);
  init_normal(*d, 0.02);
  return d;
}

/// Three convolutions over a task-network feature map, one score per cell.
class FeatureDiscriminatorImpl : public nn::Module {
 public:
  FeatureDiscriminatorImpl(int in_channels, int width) {
    require(in_channels >= 1 && width >= 1, ErrorKind::config, "feature discriminator widths must be >= 1");
    auto lrelu = [] { return nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)); };
    net_ = register_module(
        "net", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in_channels, width, 3).padding(1)), lrelu(),
                              nn::Conv2d(nn::Conv2dOptions(width, width, 3).padding(1)), lrelu(),
                              nn::Conv2d(nn::Conv2dOptions(width, 1, 1))));
  }
  torch::Tensor forward(const torch::Tensor& f) { return net_->forward(f); }

 private:
  nn::Sequential net_{nullptr};
};
TORCH_MODULE(FeatureDiscriminator);

/// Shared 1x1 trunk with one scalar head per class, scored per feature cell.
/// Output is B×L×h×w: channel l is D_C^l.
class ClassDiscriminatorImpl : public nn::Module {
 public:
  ClassDiscriminatorImpl(int in_channels, int width, int num_classes) : num_classes_(num_classes) {
    require(in_channels >= 1 && width >= 1 && num_classes >= 2, ErrorKind::config,
            "class discriminator config invalid");
    auto lrelu = [] { return nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)); };
    trunk_ = register_module("trunk", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in_channels, width, 1)), lrelu(),
                                                     nn::Conv2d(nn::Conv2dOptions(width, width, 1)), lrelu()));
    heads_ = register_module("heads", nn::Conv2d(nn::Conv2dOptions(width, num_classes, 1)));
  }
  torch::Tensor forward(const torch::Tensor& f) { return heads_->forward(trunk_->forward(f)); }
  int num_heads() const { return num_classes_; }

 private:
  int num_classes_;
  nn::Sequential trunk_{nullptr};
  nn::Conv2d heads_{nullptr};
};
TORCH_MODULE(ClassDiscriminator);

// ---------------------------------------------------------------------------
// Task network

struct TaskNetworkConfig {
  int width = 16;

  void validate() const { require(width >= 1, ErrorKind::config, "task.width must be >= 1"); }
};

/// Convolutional encoder (feature map = output of its last convolution) and
/// a head: flatten+linear for classification, 1x1 conv with bilinear
/// upsampling to the input size for segmentation.
class TaskNetworkImpl : public nn::Module {
 public:
  TaskNetworkImpl(TaskKind kind, int num_classes, int channels, int image_size, const TaskNetworkConfig& cfg)
      : kind_(kind), num_classes_(num_classes), channels_(channels), image_size_(image_size), config_(cfg) {
    cfg.validate();
    require(num_classes >= 2, ErrorKind::config, "task network needs >= 2 classes");
    require(image_size >= 16 && image_size % 8 == 0, ErrorKind::config,
            "task network image size must be a multiple of 8 and >= 16");
    const int w = cfg.width;
    auto conv = [](int in, int out, int stride, int dilation = 1) {
      return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(dilation).dilation(dilation));
    };
    nn::Sequential enc;
    if (kind == TaskKind::classification) {
      enc->push_back(conv(channels, w, 1));
      enc->push_back(nn::ReLU());
      enc->push_back(conv(w, 2 * w, 2));
      enc->push_back(nn::ReLU());
      enc->push_back(conv(2 * w, 2 * w, 2));
      enc->push_back(nn::ReLU());
      enc->push_back(conv(2 * w, 4 * w, 2));
      enc->push_back(nn::ReLU());
      feature_channels_ = 4 * w;
      feature_size_ = image_size / 8;
      linear_ = register_module(
          "head", nn::Linear(feature_channels_ * feature_size_ * feature_size_, num_classes));
    } else {
      enc->push_back(conv(channels, w, 1));
      enc->push_back(nn::ReLU());
      enc->push_back(conv(w, 2 * w, 2));
      enc->push_back(nn::ReLU());
      enc->push_back(conv(2 * w, 4 * w, 2));
      enc->push_back(nn::ReLU());
      enc->push_back(conv(4 * w, 4 * w, 1));
      enc->push_back(nn::ReLU());
      enc->push_back(conv(4 * w, 4 * w, 1, 2));
      enc->push_back(nn::ReLU());
      feature_channels_ = 4 * w;
      feature_size_ = image_size / 4;
      seg_head_ = register_module("head", nn::Conv2d(nn::Conv2dOptions(4 * w, num_classes, 1)));
    }
    encoder_ = register_module("encoder", enc);
  }

  torch::Tensor features(const torch::Tensor& x) {
    require(x.dim() == 4 && x.size(1) == channels_ && x.size(2) == image_size_ && x.size(3) == image_size_,
            ErrorKind::inference, "task network input shape mismatch");
    return encoder_->forward(x);
  }

  torch::Tensor logits_from_features(const torch::Tensor& f) {
    if (kind_ == TaskKind::classification) return linear_->forward(f.flatten(1));
    auto coarse = seg_head_->forward(f);
    return torch::nn::functional::interpolate(
        coarse, torch::nn::functional::InterpolateFuncOptions()
                    .size(std::vector<int64_t>{image_size_, image_size_})
                    .mode(torch::kBilinear)
                    .align_corners(false));
  }

  torch::Tensor forward(const torch::Tensor& x) { return logits_from_features(features(x)); }

  TaskKind kind() const { return kind_; }
  int num_classes() const { return num_classes_; }
  int channels() const { return channels_; }
  int image_size() const { return image_size_; }
  int feature_channels() const { return feature_channels_; }
  int feature_size() const { return feature_size_; }
  const TaskNetworkConfig& config() const { return config_; }

 private:
  TaskKind kind_;
  int num_classes_;
  int channels_;
  int image_size_;
  TaskNetworkConfig config_;
  int feature_channels_ = 0;
  int feature_size_ = 0;
  nn::Sequential encoder_{nullptr};
  nn::Linear linear_{nullptr};
  nn::Conv2d seg_head_{nullptr};
};
TORCH_MODULE(TaskNetwork);

inline TaskNetwork build_task_network(TaskKind kind, int num_classes, int channels, int image_size,
                                      const TaskNetworkConfig& cfg, std::uint64_t seed) {
  torch::manual_seed(seed);
  return TaskNetwork(kind, num_classes, channels, image_size, cfg);
}

inline torch::Tensor extract_features(TaskNetwork& net, const torch::Tensor& batch) { return net->features(batch); }
inline torch::Tensor predict(TaskNetwork& net, const torch::Tensor& batch) { return net->forward(batch); }

/// Independent network with identical architecture and parameter values.
inline TaskNetwork copy_task_network(const TaskNetwork& net) {
  TaskNetwork out(net->kind(), net->num_classes(), net->channels(), net->image_size(), net->config());
  torch::NoGradGuard guard;
  const auto src_p = net->named_parameters(true);
  for (auto& p : out->named_parameters(true)) p.value().copy_(src_p[p.key()]);
  const auto src_b = net->named_buffers(true);
  for (auto& b : out->named_buffers(true)) b.value().copy_(src_b[b.key()]);
  out->train(net->is_training());
  return out;
}

/// Deep copy with gradients disabled; used for frozen per-source snapshots.
inline TaskNetwork frozen_copy(const TaskNetwork& net) {
  auto frozen = copy_task_network(net);
  for (auto& p : frozen->parameters()) p.set_requires_grad(false);
  frozen->eval();
  return frozen;
}

inline TaskNetwork trainable_copy(const TaskNetwork& net) {
  auto out = copy_task_network(net);
  for (auto& p : out->parameters()) p.set_requires_grad(true);
  out->train();
  return out;
}

// ---------------------------------------------------------------------------

struct ModelConfig {
  TranslatorConfig translator{3, 8, 2, 3, false};
  int discriminator_width = 8;
  int feature_discriminator_width = 32;
  int class_discriminator_width = 32;
  TaskNetworkConfig task{};

  void validate() const {
    translator.validate();
    require(discriminator_width >= 1, ErrorKind::config, "model.discriminator_width must be >= 1");
    require(feature_discriminator_width >= 1, ErrorKind::config, "model.feature_discriminator_width must be >= 1");
    require(class_discriminator_width >= 1, ErrorKind::config, "model.class_discriminator_width must be >= 1");
    task.validate();
  }
};

struct DiscriminatorSet {
  PatchDiscriminator target_pixel{nullptr};
  std::vector<PatchDiscriminator> per_source_pixel;  // D_i, shared by the T->S_i GAN term and CCD
  std::vector<PatchDiscriminator> aggregation;       // D_A^i
  FeatureDiscriminator feature{nullptr};
  ClassDiscriminator per_class{nullptr};             // segmentation MADAN+ only

  bool has_class_discriminators() const { return !per_class.is_empty(); }
};

inline DiscriminatorSet build_discriminators(const ModelConfig& cfg, int num_sources, int channels,
                                             int feature_channels, int num_classes, bool class_level,
                                             std::uint64_t seed) {
  DiscriminatorSet set;
  const PixelDiscriminatorConfig pix{cfg.discriminator_width, channels, true};
  set.target_pixel = build_pixel_discriminator(pix, detail::mix_seed(seed, 21));
  for (int i = 0; i < num_sources; ++i) {
    set.per_source_pixel.push_back(build_pixel_discriminator(pix, detail::mix_seed(seed, 22, static_cast<std::uint64_t>(i))));
    set.aggregation.push_back(build_pixel_discriminator(pix, detail::mix_seed(seed, 23, static_cast<std::uint64_t>(i))));
  }
  torch::manual_seed(detail::mix_seed(seed, 24));
  set.feature = FeatureDiscriminator(feature_channels, cfg.feature_discriminator_width);
  init_normal(*set.feature, 0.02);
  if (class_level) {
    torch::manual_seed(detail::mix_seed(seed, 25));
    set.per_class = ClassDiscriminator(feature_channels, cfg.class_discriminator_width, num_classes);
    init_normal(*set.per_class, 0.02);
  }
  return set;
}

}  // namespace madan
