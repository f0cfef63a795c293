#include <gtest/gtest.h>

#include <set>

#include "madan/madan.hpp"

using namespace madan;

namespace {

double mean_pixel(const DomainBundle& b) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& im : b.images)
    for (float v : im.pixels) {
      s += v;
      ++n;
    }
  return s / static_cast<double>(n);
}

ErrorKind kind_of_spec(SynthSpec s) {
  try {
    synthesize_classification_domains(s);
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::io;
}

}  // namespace

TEST(SynthClassification, ShapesAndRoles) {
  const auto d = synthesize_classification_domains(SynthSpec{2, 10, 100, 32, 7});
  ASSERT_EQ(d.size(), 3u);
  for (const auto& b : d) {
    EXPECT_EQ(b.size(), 100u);
    EXPECT_EQ(b.height(), 32);
    EXPECT_EQ(b.width(), 32);
    EXPECT_EQ(b.channels(), 3);
    EXPECT_EQ(b.num_classes, 10);
    EXPECT_NO_THROW(b.validate());
  }
  EXPECT_TRUE(d[0].labeled());
  EXPECT_TRUE(d[1].labeled());
  EXPECT_FALSE(d[2].labeled());
  EXPECT_EQ(d[0].name, "source0");
  EXPECT_EQ(d[2].name, kTargetName);
}

TEST(SynthClassification, Deterministic) {
  const SynthSpec s{2, 10, 40, 32, 7};
  const auto a = synthesize_classification_domains(s), b = synthesize_classification_domains(s);
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i].images.size(), b[i].images.size());
    for (std::size_t k = 0; k < a[i].images.size(); ++k) EXPECT_EQ(a[i].images[k].pixels, b[i].images[k].pixels);
    EXPECT_EQ(a[i].class_labels, b[i].class_labels);
  }
  auto other = s;
  other.seed = 8;
  EXPECT_NE(synthesize_classification_domains(other)[0].images[0].pixels, a[0].images[0].pixels);
}

TEST(SynthClassification, DomainMeansDifferPairwise) {
  const auto d = synthesize_classification_domains(SynthSpec{3, 4, 50, 32, 1});
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = i + 1; j < d.size(); ++j)
      EXPECT_GT(std::fabs(mean_pixel(d[i]) - mean_pixel(d[j])), 0.05) << d[i].name << " vs " << d[j].name;
}

TEST(SynthClassification, EveryClassAppears) {
  const auto d = synthesize_classification_domains(SynthSpec{3, 10, 200, 32, 2});
  for (int i = 0; i < 3; ++i) {
    const std::set<int> seen(d[static_cast<std::size_t>(i)].class_labels.begin(), d[static_cast<std::size_t>(i)].class_labels.end());
    EXPECT_EQ(seen.size(), 10u);
  }
}

TEST(SynthClassification, InvalidSpecNamesField) {
  EXPECT_EQ(kind_of_spec(SynthSpec{1, 10, 10, 32, 0}), ErrorKind::config);
  EXPECT_EQ(kind_of_spec(SynthSpec{2, 1, 10, 32, 0}), ErrorKind::config);
  EXPECT_EQ(kind_of_spec(SynthSpec{2, 10, 0, 32, 0}), ErrorKind::config);
  EXPECT_EQ(kind_of_spec(SynthSpec{2, 10, 10, 8, 0}), ErrorKind::config);
  try {
    synthesize_classification_domains(SynthSpec{2, 10, 10, 8, 0});
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("image_size"), std::string::npos);
  }
}

TEST(SynthSegmentation, LabelRangeDeterminismAndCoverage) {
  const SynthSpec s{2, 4, 60, 64, 3};
  const auto a = synthesize_segmentation_domains(s), b = synthesize_segmentation_domains(s);
  ASSERT_EQ(a.size(), 3u);
  EXPECT_FALSE(a.back().labeled());
  for (int i = 0; i < 2; ++i) {
    const auto& d = a[static_cast<std::size_t>(i)];
    std::vector<std::int64_t> counts(4, 0);
    std::int64_t total = 0;
    for (std::size_t k = 0; k < d.size(); ++k) {
      EXPECT_EQ(d.label_maps[k].labels, b[static_cast<std::size_t>(i)].label_maps[k].labels);
      for (auto v : d.label_maps[k].labels) {
        ASSERT_LT(v, 4);
        ++counts[v];
        ++total;
      }
    }
    for (int l = 1; l < 4; ++l) EXPECT_GE(static_cast<double>(counts[static_cast<std::size_t>(l)]) / total, 0.01) << "class " << l;
  }
}

TEST(SynthTargetTest, LabeledTargetStyleDisjointFromTarget) {
  const SynthSpec s{2, 10, 30, 32, 4};
  const auto d = synthesize_classification_domains(s);
  const auto t = synthesize_target_test(s, TaskKind::classification);
  EXPECT_TRUE(t.labeled());
  EXPECT_EQ(t.name, kTestName);
  EXPECT_NE(t.images[0].pixels, d.back().images[0].pixels);
  // same style family: the held-out split's mean sits much closer to the target than to any source
  const double mt = mean_pixel(t), mtarget = mean_pixel(d.back());
  for (int i = 0; i < 2; ++i)
    EXPECT_LT(std::fabs(mt - mtarget), std::fabs(mt - mean_pixel(d[static_cast<std::size_t>(i)])));
  const auto seg = synthesize_target_test(s, TaskKind::segmentation);
  EXPECT_EQ(seg.kind, TaskKind::segmentation);
  EXPECT_TRUE(seg.labeled());
}

TEST(TensorViews, RoundTrip) {
  const auto d = synthesize_segmentation_domains(SynthSpec{2, 4, 5, 32, 1});
  const auto x = images_to_tensor(d[0]);
  EXPECT_EQ(x.sizes(), (std::vector<std::int64_t>{5, 3, 32, 32}));
  EXPECT_GE(x.min().item<float>(), -1.0f);
  EXPECT_LE(x.max().item<float>(), 1.0f);
  EXPECT_EQ(tensor_to_image(x[2]).pixels, d[0].images[2].pixels);
  const auto y = labels_to_tensor(d[0]);
  EXPECT_EQ(y.sizes(), (std::vector<std::int64_t>{5, 32, 32}));
  EXPECT_EQ(y[1][3][4].item<std::int64_t>(), d[0].label_maps[1].at(3, 4));
}

TEST(DomainBundle, ValidationRejectsBadContents) {
  auto d = synthesize_classification_domains(SynthSpec{2, 4, 3, 32, 1})[0];
  d.class_labels[0] = 9;
  EXPECT_THROW(d.validate(), Error);
  d.class_labels[0] = 0;
  d.images[1].pixels[0] = 2.0f;
  EXPECT_THROW(d.validate(), Error);
}
