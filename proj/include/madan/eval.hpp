#pragma once

// Accuracy / IoU metrics, the metric report, checkpoint-free evaluation of a
// task network, and the domain-discriminability probe.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

#include "madan/data.hpp"
#include "madan/error.hpp"
#include "madan/models.hpp"

namespace madan {

using json = nlohmann::json;

/// L×L counts; rows are ground truth, columns predictions. Ignore pixels dropped.
inline std::vector<std::vector<std::int64_t>> confusion_matrix(const torch::Tensor& pred, const torch::Tensor& gt,
                                                               int num_classes) {
  require(pred.sizes() == gt.sizes(), ErrorKind::shape, "confusion matrix: shape mismatch");
  const auto p = pred.flatten().to(torch::kInt64);
  const auto g = gt.flatten().to(torch::kInt64);
  const auto keep = g != kIgnoreLabel;
  const auto pk = p.masked_select(keep), gk = g.masked_select(keep);
  std::vector<std::vector<std::int64_t>> m(static_cast<std::size_t>(num_classes),
                                           std::vector<std::int64_t>(static_cast<std::size_t>(num_classes), 0));
  if (gk.numel() == 0) return m;
  require(gk.max().item<std::int64_t>() < num_classes && pk.max().item<std::int64_t>() < num_classes &&
              gk.min().item<std::int64_t>() >= 0 && pk.min().item<std::int64_t>() >= 0,
          ErrorKind::contract, "confusion matrix: label out of range");
  const auto counts = torch::bincount(gk * num_classes + pk, {}, num_classes * num_classes).contiguous();
  const auto* c = counts.data_ptr<std::int64_t>();
  for (int i = 0; i < num_classes; ++i)
    for (int j = 0; j < num_classes; ++j) m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = c[i * num_classes + j];
  return m;
}

inline std::vector<std::optional<double>> per_class_recall(const std::vector<std::vector<std::int64_t>>& cm) {
  std::vector<std::optional<double>> out(cm.size());
  for (std::size_t l = 0; l < cm.size(); ++l) {
    const auto total = std::accumulate(cm[l].begin(), cm[l].end(), std::int64_t{0});
    if (total > 0) out[l] = static_cast<double>(cm[l][l]) / static_cast<double>(total);
  }
  return out;
}

inline double mean_present(const std::vector<std::optional<double>>& v) {
  double acc = 0.0;
  int n = 0;
  for (const auto& x : v)
    if (x) {
      acc += *x;
      ++n;
    }
  return n == 0 ? 0.0 : acc / n;
}

inline double micro_accuracy(const std::vector<std::vector<std::int64_t>>& cm) {
  std::int64_t diag = 0, total = 0;
  for (std::size_t i = 0; i < cm.size(); ++i)
    for (std::size_t j = 0; j < cm.size(); ++j) {
      total += cm[i][j];
      if (i == j) diag += cm[i][j];
    }
  return total == 0 ? 0.0 : static_cast<double>(diag) / static_cast<double>(total);
}

/// Macro average of per-class accuracy over classes present in the labels.
inline double classification_accuracy(const std::vector<int>& predictions, const std::vector<int>& labels,
                                      int num_classes) {
  require(!labels.empty(), ErrorKind::contract, "classification_accuracy: empty input");
  require(predictions.size() == labels.size(), ErrorKind::shape, "classification_accuracy: length mismatch");
  const auto p = torch::tensor(std::vector<std::int64_t>(predictions.begin(), predictions.end()));
  const auto g = torch::tensor(std::vector<std::int64_t>(labels.begin(), labels.end()));
  return mean_present(per_class_recall(confusion_matrix(p, g, num_classes)));
}

/// Per-class IoU from integer intersection/union counts; nullopt where the union is empty.
inline std::vector<std::optional<double>> iou_from_confusion(const std::vector<std::vector<std::int64_t>>& cm) {
  const std::size_t L = cm.size();
  std::vector<std::optional<double>> out(L);
  for (std::size_t l = 0; l < L; ++l) {
    std::int64_t row = 0, col = 0;
    for (std::size_t k = 0; k < L; ++k) {
      row += cm[l][k];
      col += cm[k][l];
    }
    const std::int64_t uni = row + col - cm[l][l];
    if (uni > 0) out[l] = static_cast<double>(cm[l][l]) / static_cast<double>(uni);
  }
  return out;
}

inline std::vector<std::optional<double>> class_wise_iou(const torch::Tensor& pred_maps, const torch::Tensor& gt_maps,
                                                         int num_classes) {
  require(num_classes > 0, ErrorKind::contract, "class_wise_iou: L must be positive");
  return iou_from_confusion(confusion_matrix(pred_maps, gt_maps, num_classes));
}

inline double mean_iou(const std::vector<std::optional<double>>& cwiou) { return mean_present(cwiou); }

// ---------------------------------------------------------------------------

struct MetricReport {
  TaskKind kind = TaskKind::classification;
  double primary = 0.0;         // macro accuracy or mIoU
  double micro_accuracy = 0.0;  // trace / total
  std::vector<std::optional<double>> per_class;  // per-class accuracy or cwIoU
  std::vector<std::vector<std::int64_t>> confusion;
  std::int64_t sample_count = 0;
  json metadata = json::object();

  bool operator==(const MetricReport& o) const {
    return kind == o.kind && primary == o.primary && micro_accuracy == o.micro_accuracy &&
           per_class == o.per_class && confusion == o.confusion && sample_count == o.sample_count &&
           metadata == o.metadata;
  }
};

inline json to_json(const MetricReport& r) {
  json pc = json::array();
  for (const auto& v : r.per_class) pc.push_back(v ? json(*v) : json(nullptr));
  return {{"task_kind", to_string(r.kind)},
          {r.kind == TaskKind::classification ? "accuracy" : "miou", r.primary},
          {"primary", r.primary},
          {"micro_accuracy", r.micro_accuracy},
          {r.kind == TaskKind::classification ? "per_class_accuracy" : "cwiou", pc},
          {"confusion", r.confusion},
          {"sample_count", r.sample_count},
          {"metadata", r.metadata}};
}

inline MetricReport metric_report_from_json(const json& j) {
  MetricReport r;
  try {
    r.kind = task_kind_from_string(j.at("task_kind").get<std::string>());
    r.primary = j.at("primary").get<double>();
    r.micro_accuracy = j.at("micro_accuracy").get<double>();
    for (const auto& v : j.at(r.kind == TaskKind::classification ? "per_class_accuracy" : "cwiou"))
      r.per_class.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
    r.confusion = j.at("confusion").get<std::vector<std::vector<std::int64_t>>>();
    r.sample_count = j.at("sample_count").get<std::int64_t>();
    r.metadata = j.value("metadata", json::object());
  } catch (const json::exception& e) {
    fail(ErrorKind::load, std::string("metric report: ") + e.what());
  }
  return r;
}

/// Argmax predictions for a whole image tensor, in fixed-size batches.
inline torch::Tensor predict_labels(TaskNetwork& net, const torch::Tensor& images, std::int64_t batch = 64) {
  torch::NoGradGuard guard;
  const bool was_training = net->is_training();
  net->eval();
  std::vector<torch::Tensor> parts;
  for (std::int64_t s = 0; s < images.size(0); s += batch) {
    const auto e = std::min<std::int64_t>(images.size(0), s + batch);
    parts.push_back(net->forward(images.slice(0, s, e)).argmax(1));
  }
  net->train(was_training);
  return torch::cat(parts);
}

inline MetricReport report_from_predictions(TaskKind kind, int num_classes, const torch::Tensor& pred,
                                            const torch::Tensor& gt) {
  MetricReport r;
  r.kind = kind;
  r.confusion = confusion_matrix(pred, gt, num_classes);
  r.micro_accuracy = micro_accuracy(r.confusion);
  r.per_class = kind == TaskKind::classification ? per_class_recall(r.confusion) : iou_from_confusion(r.confusion);
  r.primary = mean_present(r.per_class);
  r.sample_count = gt.size(0);
  return r;
}

/// Full deterministic pass of `net` over a labeled bundle.
inline MetricReport evaluate(TaskNetwork& net, const DomainBundle& bundle) {
  require(bundle.labeled(), ErrorKind::contract, "evaluate: bundle '" + bundle.name + "' is unlabeled");
  require(bundle.kind == net->kind(), ErrorKind::kind_mismatch,
          "evaluate: network is " + to_string(net->kind()) + " but bundle is " + to_string(bundle.kind));
  require(bundle.num_classes == net->num_classes(), ErrorKind::kind_mismatch, "evaluate: class count mismatch");
  const auto pred = predict_labels(net, images_to_tensor(bundle));
  auto r = report_from_predictions(bundle.kind, bundle.num_classes, pred, labels_to_tensor(bundle));
  r.metadata["domain"] = bundle.name;
  return r;
}

// ---------------------------------------------------------------------------
// Domain discriminability probe

struct ProbeConfig {
  int epochs = 6;
  int batch_size = 32;
  double learning_rate = 2e-3;
  double holdout_fraction = 0.3;
  int max_per_domain = 500;
  std::uint64_t seed = 1234;
};

class ProbeNetImpl : public nn::Module {
 public:
  ProbeNetImpl(int channels, int num_domains) {
    net_ = register_module(
        "net", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(channels, 8, 3).stride(2).padding(1)), nn::ReLU(),
                              nn::Conv2d(nn::Conv2dOptions(8, 16, 3).stride(2).padding(1)), nn::ReLU(),
                              nn::Conv2d(nn::Conv2dOptions(16, 16, 3).stride(2).padding(1)), nn::ReLU(),
                              nn::AdaptiveAvgPool2d(nn::AdaptiveAvgPool2dOptions(1)), nn::Flatten(),
                              nn::Linear(16, num_domains)));
  }
  torch::Tensor forward(const torch::Tensor& x) { return net_->forward(x); }

 private:
  nn::Sequential net_{nullptr};
};
TORCH_MODULE(ProbeNet);

/// Held-out accuracy of a small fixed classifier predicting which domain an
/// image came from. Lower means the domains are harder to tell apart.
inline double domain_discriminability_probe(const std::vector<torch::Tensor>& domains, const ProbeConfig& cfg = {}) {
  require(domains.size() >= 2, ErrorKind::contract, "probe needs at least 2 domains");
  std::mt19937_64 rng(cfg.seed);
  std::vector<torch::Tensor> train_x, test_x, train_y, test_y;
  for (std::size_t d = 0; d < domains.size(); ++d) {
    const auto n = std::min<std::int64_t>(domains[d].size(0), cfg.max_per_domain);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(domains[d].size(0)));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(n));
    const auto n_test = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::llround(n * cfg.holdout_fraction)));
    const auto sel = torch::tensor(idx);
    const auto x = domains[d].detach().to(torch::kFloat32).index_select(0, sel);
    test_x.push_back(x.slice(0, 0, n_test));
    train_x.push_back(x.slice(0, n_test));
    test_y.push_back(torch::full({n_test}, static_cast<std::int64_t>(d), torch::kInt64));
    train_y.push_back(torch::full({n - n_test}, static_cast<std::int64_t>(d), torch::kInt64));
  }
  const auto xtr = torch::cat(train_x), ytr = torch::cat(train_y);
  const auto xte = torch::cat(test_x), yte = torch::cat(test_y);

  torch::manual_seed(cfg.seed);
  ProbeNet probe(static_cast<int>(xtr.size(1)), static_cast<int>(domains.size()));
  torch::optim::Adam opt(probe->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
  std::vector<std::int64_t> order(static_cast<std::size_t>(xtr.size(0)));
  std::iota(order.begin(), order.end(), 0);
  for (int e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch_size)) {
      const auto end = std::min(order.size(), s + static_cast<std::size_t>(cfg.batch_size));
      const auto sel = torch::tensor(std::vector<std::int64_t>(order.begin() + static_cast<long>(s), order.begin() + static_cast<long>(end)));
      opt.zero_grad();
      torch::nn::functional::cross_entropy(probe->forward(xtr.index_select(0, sel)), ytr.index_select(0, sel)).backward();
      opt.step();
    }
  }
  torch::NoGradGuard guard;
  const auto pred = probe->forward(xte).argmax(1);
  return pred.eq(yte).to(torch::kFloat64).mean().item<double>();
}

inline double domain_discriminability_probe(const std::vector<DomainBundle>& bundles, const ProbeConfig& cfg = {}) {
  std::vector<torch::Tensor> t;
  for (const auto& b : bundles) t.push_back(images_to_tensor(b));
  return domain_discriminability_probe(t, cfg);
}

}  // namespace madan
