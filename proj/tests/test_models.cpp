#include <gtest/gtest.h>

#include "support.hpp"

using namespace madan;

namespace {

std::vector<torch::Tensor> params_of(nn::Module& m) { return m.parameters(); }

check::Vec flatten(const std::vector<torch::Tensor>& ps) {
  check::Vec v;
  for (const auto& p : ps) {
    const auto x = check::vec(p);
    v.insert(v.end(), x.begin(), x.end());
  }
  return v;
}

void assign(std::vector<torch::Tensor>& ps, std::span<const double> v) {
  torch::NoGradGuard g;
  std::size_t at = 0;
  for (auto& p : ps) {
    const auto n = static_cast<std::size_t>(p.numel());
    p.copy_(torch::tensor(std::vector<double>(v.begin() + static_cast<long>(at), v.begin() + static_cast<long>(at + n)),
                          torch::kFloat64)
                .reshape(p.sizes()));
    at += n;
  }
}

struct ProbeResult {
  double worst = 0.0;       // over coordinates whose stencil holds no activation kink
  double kinked_share = 0.0;
};

/// Checks d<w, f(x)>/dθ against central differences at step 1e-3 over every parameter.
/// Weights are re-drawn at std 0.5 so a 1e-3 step is small next to them. A coordinate
/// whose central differences at h and h/2 disagree straddles a ReLU kink and is skipped.
/// Without normalization the map is piecewise linear in each parameter, so there the
/// left and right slopes must agree exactly instead.
ProbeResult parameter_gradient_error(nn::Module& m, const std::function<torch::Tensor()>& forward,
                                     bool piecewise_linear = false) {
  constexpr double h = 1e-3;
  m.to(torch::kFloat64);
  torch::manual_seed(11);
  init_normal(m, 0.5);
  auto ps = params_of(m);
  const auto out0 = forward();
  torch::manual_seed(3);
  const auto w = torch::randn_like(out0);
  for (auto& p : ps) p.mutable_grad() = torch::Tensor();
  (forward() * w).sum().backward();
  check::Vec grad;
  for (auto& p : ps) {
    const auto g = check::vec(p.grad());
    grad.insert(grad.end(), g.begin(), g.end());
  }
  auto theta = flatten(ps);
  auto loss = [&](const check::Vec& v) {
    assign(ps, v);
    torch::NoGradGuard ng;
    return (forward() * w).sum().item<double>();
  };
  const double f0 = loss(theta);
  auto at = [&](std::size_t i, double step) {
    auto v = theta;
    v[i] += step;
    return loss(v);
  };
  // full: central difference at h; half: h/2, or right slope minus left slope when piecewise linear
  check::Vec full(theta.size()), half(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double fp = at(i, h), fm = at(i, -h);
    full[i] = (fp - fm) / (2 * h);
    half[i] = piecewise_linear ? full[i] + ((fp - f0) - (f0 - fm)) / h : (at(i, h / 2) - at(i, -h / 2)) / h;
  }
  assign(ps, theta);
  const double scale = std::max(reference::gradient_scale(grad, full), 1e-6);
  ProbeResult r;
  std::size_t kinked = 0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (std::fabs(full[i] - half[i]) > (piecewise_linear ? 1e-9 : 1e-4) * scale) {
      ++kinked;
      continue;
    }
    r.worst = std::max(r.worst, std::fabs(grad[i] - full[i]) / scale);
  }
  r.kinked_share = static_cast<double>(kinked) / static_cast<double>(theta.size());
  return r;
}

void expect_matches(const ProbeResult& r, const std::string& what) {
  EXPECT_LE(r.worst, 1e-3) << what;
  EXPECT_LE(r.kinked_share, 0.25) << what;
}

}  // namespace

TEST(Translator, DefaultDepthPreservesShapeAndRange) {
  auto pair = build_translator(TranslatorConfig{9, 64, 2, 3, false}, 1);
  torch::NoGradGuard g;
  const auto x = torch::rand({1, 3, 64, 64}) * 2 - 1;
  for (auto* gen : {&pair.forward, &pair.backward}) {
    const auto y = (*gen)->forward(x);
    EXPECT_EQ(y.sizes(), x.sizes());
    EXPECT_LE(y.abs().max().item<float>(), 1.0f);
  }
}

TEST(Translator, ZeroInitOutputIsConstantZero) {
  auto pair = build_translator(TranslatorConfig{3, 8, 2, 3, true}, 1);
  torch::NoGradGuard g;
  const auto y = pair.forward->forward(torch::rand({2, 3, 32, 32}));
  EXPECT_EQ(y.abs().max().item<float>(), 0.0f);
}

TEST(Translator, ParameterCountMatchesLayerFormula) {
  // conv(in, out, k) holds in*out*k*k + out; instance norm has no affine parameters
  auto conv = [](std::int64_t in, std::int64_t out, std::int64_t k) { return in * out * k * k + out; };
  const std::int64_t c = 3, w = 16;
  std::int64_t expected = conv(c, w, 7);
  expected += conv(w, 2 * w, 3) + conv(2 * w, 4 * w, 3);
  expected += 3 * 2 * conv(4 * w, 4 * w, 3);
  expected += conv(4 * w, 2 * w, 3) + conv(2 * w, w, 3);  // transposed convolutions share the count
  expected += conv(w, c, 7);
  const auto pair = build_translator(TranslatorConfig{3, 16, 2, 3, false}, 0);
  EXPECT_EQ(count_parameters(*pair.forward), expected);
  EXPECT_EQ(expected, 272515);
}

TEST(Translator, InvalidConfigRejected) {
  EXPECT_THROW(build_translator(TranslatorConfig{0, 16, 2, 3, false}, 0), Error);
  EXPECT_THROW(build_translator(TranslatorConfig{3, 0, 2, 3, false}, 0), Error);
  EXPECT_THROW(build_translator(TranslatorConfig{3, 16, 2, 2, false}, 0), Error);
}

TEST(Translator, DeterministicGivenSeed) {
  const auto a = build_translator(TranslatorConfig{1, 4, 1, 3, false}, 5);
  const auto b = build_translator(TranslatorConfig{1, 4, 1, 3, false}, 5);
  const auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(torch::equal(pa[i], pb[i]));
  EXPECT_FALSE(torch::equal(a.forward->parameters()[0], a.backward->parameters()[0]));
}

TEST(PixelDiscriminator, PatchGridAndNeutralScore) {
  auto d = build_pixel_discriminator({64, 3, true}, 1);
  torch::NoGradGuard g;
  const auto s = d->forward(torch::rand({2, 3, 64, 64}));
  EXPECT_EQ(s.size(1), 1);
  EXPECT_GT(s.size(2), 1);
  EXPECT_GT(s.size(3), 1);
  EXPECT_EQ(s.size(2), 14);  // 64 -> 32 -> 16 -> 15 -> 14
}

TEST(PixelDiscriminator, ZeroScoresMapToHalf) {
  const auto s = Score::from_logits(torch::zeros({1, 1, 6, 6}));
  EXPECT_TRUE(torch::allclose(s.values(), torch::full({1, 1, 6, 6}, 0.5)));
}

TEST(PixelDiscriminator, ReceptiveFieldMatchesTracedGradient) {
  const int recurrence = receptive_field(PatchDiscriminatorImpl::geometry());
  EXPECT_EQ(recurrence, 34);
  // trace: the input support of one interior output cell's gradient (no normalization so support is local)
  auto d = build_pixel_discriminator({4, 1, false}, 2);
  d->to(torch::kFloat64);
  {
    torch::NoGradGuard g;
    for (auto& p : d->parameters()) p.copy_(torch::rand_like(p) + 0.1);  // strictly positive avoids cancellations
  }
  auto x = torch::rand({1, 1, 96, 96}, torch::kFloat64).requires_grad_(true);
  const auto s = d->forward(x);
  s[0][0][s.size(2) / 2][s.size(3) / 2].backward();
  const auto nz = x.grad()[0][0].abs().gt(0);
  const auto rows = nz.any(1), cols = nz.any(0);
  const auto ridx = torch::nonzero(rows).flatten(), cidx = torch::nonzero(cols).flatten();
  const auto extent_r = ridx.max().item<std::int64_t>() - ridx.min().item<std::int64_t>() + 1;
  const auto extent_c = cidx.max().item<std::int64_t>() - cidx.min().item<std::int64_t>() + 1;
  EXPECT_EQ(extent_r, recurrence);
  EXPECT_EQ(extent_c, recurrence);
}

TEST(TaskNetwork, OutputShapesAndSimplex) {
  auto cls = build_task_network(TaskKind::classification, 10, 3, 32, {}, 1);
  torch::NoGradGuard g;
  const auto z = predict(cls, torch::rand({4, 3, 32, 32}));
  EXPECT_EQ(z.sizes(), (std::vector<std::int64_t>{4, 10}));
  EXPECT_TRUE(torch::allclose(torch::softmax(z, 1).sum(1), torch::ones({4}), 1e-6, 1e-6));
  auto seg = build_task_network(TaskKind::segmentation, 4, 3, 64, {}, 1);
  const auto m = predict(seg, torch::rand({4, 3, 64, 64}));
  EXPECT_EQ(m.sizes(), (std::vector<std::int64_t>{4, 4, 64, 64}));
  EXPECT_TRUE(torch::allclose(torch::softmax(m, 1).sum(1), torch::ones({4, 64, 64}), 1e-6, 1e-6));
  const auto f = extract_features(seg, torch::rand({1, 3, 64, 64}));
  EXPECT_EQ(f.size(1), seg->feature_channels());
  EXPECT_EQ(f.size(2), seg->feature_size());
  EXPECT_THROW(predict(cls, torch::rand({1, 3, 16, 16})), Error);
  EXPECT_THROW(predict(cls, torch::rand({1, 1, 32, 32})), Error);
}

TEST(TaskNetwork, CopiesAreIndependent) {
  auto net = build_task_network(TaskKind::classification, 3, 3, 16, {4}, 1);
  auto frozen = frozen_copy(net);
  const auto x = torch::rand({2, 3, 16, 16});
  torch::NoGradGuard g;
  EXPECT_TRUE(torch::equal(net->forward(x), frozen->forward(x)));
  for (const auto& p : frozen->parameters()) EXPECT_FALSE(p.requires_grad());
  net->parameters()[0].add_(1.0);
  EXPECT_FALSE(torch::equal(net->forward(x), frozen->forward(x)));
  auto again = trainable_copy(frozen);
  for (const auto& p : again->parameters()) EXPECT_TRUE(p.requires_grad());
}

TEST(Discriminators, SetStructure) {
  const ModelConfig cfg;
  const auto plain = build_discriminators(cfg, 3, 3, 64, 10, false, 1);
  EXPECT_EQ(plain.per_source_pixel.size(), 3u);
  EXPECT_EQ(plain.aggregation.size(), 3u);
  EXPECT_FALSE(plain.has_class_discriminators());
  auto plus = build_discriminators(cfg, 2, 3, 64, 4, true, 1);
  ASSERT_TRUE(plus.has_class_discriminators());
  EXPECT_EQ(plus.per_class->num_heads(), 4);
  torch::NoGradGuard g;
  EXPECT_EQ(plus.per_class->forward(torch::rand({2, 64, 8, 8})).sizes(), (std::vector<std::int64_t>{2, 4, 8, 8}));
  EXPECT_EQ(plus.feature->forward(torch::rand({2, 64, 8, 8})).sizes(), (std::vector<std::int64_t>{2, 1, 8, 8}));
}

TEST(Differentiability, MiniatureForwardMapsMatchFiniteDifferences) {
  {
    auto g = build_generator(TranslatorConfig{1, 2, 1, 1, false}, 1);
    ASSERT_LE(count_parameters(*g), 1000);
    const auto x = torch::rand({1, 1, 8, 8}, torch::kFloat64) * 2 - 1;
    expect_matches(parameter_gradient_error(*g, [&] { return g->forward(x); }), "generator");
  }
  {
    auto d = build_pixel_discriminator({2, 1, true}, 1);
    ASSERT_LE(count_parameters(*d), 1000);
    const auto x = torch::rand({1, 1, 16, 16}, torch::kFloat64);
    expect_matches(parameter_gradient_error(*d, [&] { return d->forward(x); }), "pixel discriminator");
  }
  {
    FeatureDiscriminator d(4, 8);
    ASSERT_LE(count_parameters(*d), 1000);
    const auto f = torch::rand({2, 4, 3, 3}, torch::kFloat64);
    expect_matches(parameter_gradient_error(*d, [&] { return d->forward(f); }, true), "feature discriminator");
  }
  {
    ClassDiscriminator d(4, 8, 3);
    ASSERT_LE(count_parameters(*d), 1000);
    const auto f = torch::rand({2, 4, 2, 2}, torch::kFloat64);
    expect_matches(parameter_gradient_error(*d, [&] { return d->forward(f); }, true), "class discriminator");
  }
  for (auto kind : {TaskKind::classification, TaskKind::segmentation}) {
    auto net = build_task_network(kind, 3, 1, 16, {kind == TaskKind::classification ? 2 : 1}, 1);
    ASSERT_LE(count_parameters(*net), 1000);
    const auto x = torch::rand({2, 1, 16, 16}, torch::kFloat64);
    expect_matches(parameter_gradient_error(*net, [&] { return net->forward(x); }, true), to_string(kind));
  }
}
