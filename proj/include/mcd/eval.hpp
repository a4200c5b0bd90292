#pragma once

// Frozen-feature probing (KNN, linear) and end-to-end fine-tuning for
// single-label and multi-label classification, with the associated metrics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcd/common.hpp"
#include "mcd/image.hpp"
#include "mcd/models.hpp"
#include "mcd/optim.hpp"
#include "mcd/rng.hpp"
#include "mcd/tensor.hpp"

namespace mcd {

// --- domain types -----------------------------------------------------------

// Frozen features plus per-row labels. Exactly one label field is populated:
// `labels` for single-label banks, `multi_labels` (N,L binary) for
// multi-label banks. Unlabeled banks (straight out of extract_features) carry
// neither until the caller attaches one.
template <typename T>
struct FeatureBank {
  Tensor<T> vectors;          // (N, feature_dim)
  std::vector<int> labels;    // single-label: one class id per row
  Tensor<T> multi_labels;     // multi-label: (N, L) binary
  std::string source;         // id of the checkpoint / extractor

  int64_t size() const { return vectors.ndim() == 2 ? vectors.dim(0) : 0; }

  bool has_single_labels() const { return !labels.empty(); }
  bool has_multi_labels() const { return multi_labels.numel() > 0; }

  void validate() const {
    MCD_CHECK(vectors.ndim() == 2 && vectors.dim(0) >= 1,
              "feature bank: vectors must be a non-empty (N, D) matrix");
    for (int64_t i = 0; i < vectors.numel(); ++i)
      MCD_CHECK(std::isfinite(double(vectors[i])),
                "feature bank: non-finite feature value at flat index ", i);
    MCD_CHECK(!(has_single_labels() && has_multi_labels()),
              "feature bank: both single and multi labels set");
    if (has_single_labels())
      MCD_CHECK(int64_t(labels.size()) == size(),
                "feature bank: label count ", labels.size(),
                " does not match row count ", size());
    if (has_multi_labels())
      MCD_CHECK(multi_labels.ndim() == 2 && multi_labels.dim(0) == size(),
                "feature bank: multi-label matrix rows must match row count");
  }
};

struct SingleLabelDataset {
  std::vector<ImagePlane> images;
  std::vector<int> labels;
  int num_classes = 0;

  void validate() const {
    MCD_CHECK(!images.empty() && images.size() == labels.size(),
              "single-label dataset: need equal nonzero image and label counts");
    MCD_CHECK(num_classes >= 2, "single-label dataset: need at least 2 classes");
    for (int l : labels)
      MCD_CHECK(l >= 0 && l < num_classes,
                "single-label dataset: label ", l, " outside [0, ",
                num_classes, ")");
  }
};

struct MultiLabelDataset {
  std::vector<ImagePlane> images;
  std::vector<std::vector<int>> targets;  // per image, L values in {0,1}
  int num_labels = 0;

  void validate() const {
    MCD_CHECK(!images.empty() && images.size() == targets.size(),
              "multi-label dataset: need equal nonzero image and target counts");
    MCD_CHECK(num_labels >= 1, "multi-label dataset: need at least 1 label");
    for (const auto& row : targets) {
      MCD_CHECK(int(row.size()) == num_labels,
                "multi-label dataset: target row arity ", row.size(),
                " != ", num_labels);
      for (int v : row)
        MCD_CHECK(v == 0 || v == 1,
                  "multi-label dataset: target value ", v, " not in {0,1}");
    }
  }
};

// Result of one evaluation protocol. Every metric must land in [0,1].
struct EvalReport {
  std::string protocol;  // knn | linear | finetune-single | finetune-multi
  std::map<std::string, double> metrics;
  std::string dataset_id;
  int64_t train_size = 0;
  int64_t eval_size = 0;
  uint64_t seed = 0;

  void validate() const {
    for (const auto& [name, value] : metrics)
      MCD_CHECK(std::isfinite(value) && value >= 0.0 && value <= 1.0,
                "eval report: metric ", name, " = ", value,
                " outside [0, 1]");
  }

  std::string to_json() const {
    nlohmann::json j;
    j["protocol"] = protocol;
    j["dataset"] = dataset_id;
    j["train_size"] = train_size;
    j["eval_size"] = eval_size;
    j["seed"] = seed;
    for (const auto& [name, value] : metrics) j["metrics"][name] = value;
    return j.dump(2);
  }
};

struct FinetuneConfig {
  int epochs = 50;
  int batch_size = 32;
  double lr = 1e-3;  // single-label base rate (cosine annealed)
  // Multi-label stage rates: the base rate scaled down by ten at 60% and 80%
  // of the epochs, kept as explicit decimal literals so logged traces match
  // them bit for bit.
  std::array<double, 3> multi_lr_stages{1e-5, 1e-6, 1e-7};
  uint64_t seed = 0;
  int64_t max_steps = -1;        // > 0 caps the run (schedules unchanged)
  bool freeze_encoder = false;   // degenerate config: linear training only
  std::string dataset_id = "dataset";
};

// --- batch assembly ---------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> assemble_images(const std::vector<ImagePlane>& images,
                          const std::vector<int64_t>& order, int64_t start,
                          int64_t stop) {
  const ImagePlane& first = images[size_t(order[size_t(start)])];
  Tensor<T> x({stop - start, int64_t(first.channels), int64_t(first.height),
               int64_t(first.width)});
  const int64_t per = int64_t(first.data.size());
  for (int64_t b = start; b < stop; ++b) {
    const ImagePlane& img = images[size_t(order[size_t(b)])];
    MCD_CHECK(img.height == first.height && img.width == first.width &&
                  img.channels == first.channels,
              "batch assembly: images must share one resolution");
    T* dst = x.data() + (b - start) * per;
    for (int64_t j = 0; j < per; ++j) dst[j] = T(img.data[size_t(j)]);
  }
  return x;
}

template <typename T>
std::vector<int64_t> identity_order(int64_t n) {
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), int64_t(0));
  return order;
}

}  // namespace detail

// --- feature extraction -----------------------------------------------------

// Runs every image through the (frozen) backbone in inference mode. Images
// must share one resolution; no augmentation is applied, so repeated calls
// are deterministic.
template <typename T>
FeatureBank<T> extract_features(Backbone<T>& backbone,
                                const std::vector<ImagePlane>& images,
                                const std::string& source = "",
                                int64_t batch_size = 32) {
  MCD_CHECK(!images.empty(), "extract_features: no images");
  MCD_CHECK(batch_size >= 1, "extract_features: batch size must be >= 1");
  const int64_t n = int64_t(images.size());
  const auto order = detail::identity_order<T>(n);
  FeatureBank<T> bank;
  bank.source = source;
  bank.vectors = Tensor<T>({n, int64_t(backbone.spec().feature_dim())});
  const int64_t d = bank.vectors.dim(1);
  for (int64_t start = 0; start < n; start += batch_size) {
    const int64_t stop = std::min(n, start + batch_size);
    Tensor<T> x = detail::assemble_images<T>(images, order, start, stop);
    Tensor<T> f = backbone.forward(x, /*train=*/false);
    MCD_REQUIRE(f.dim(1) == d, "extract_features: unexpected feature dim");
    std::copy(f.data(), f.data() + f.numel(), bank.vectors.data() + start * d);
  }
  return bank;
}

// --- KNN probe --------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> l2_normalized_rows(const Tensor<T>& m) {
  Tensor<T> out = m;
  const int64_t n = m.dim(0), d = m.dim(1);
  for (int64_t i = 0; i < n; ++i) {
    T* row = out.data() + i * d;
    T sq = T(0);
    for (int64_t j = 0; j < d; ++j) sq += row[j] * row[j];
    const T norm = std::max(std::sqrt(sq), T(1e-12));
    for (int64_t j = 0; j < d; ++j) row[j] /= norm;
  }
  return out;
}

}  // namespace detail

// Cosine-similarity weighted vote among the k nearest training features,
// weight exp(sim / tau). Neighbor ties at equal similarity are broken by
// lower training index; class-vote ties by lower class id.
template <typename T>
double knn_probe(const FeatureBank<T>& train, const FeatureBank<T>& test,
                 int k = 20, double tau = 0.07) {
  train.validate();
  test.validate();
  MCD_CHECK(train.has_single_labels() && test.has_single_labels(),
            "knn_probe: both banks must carry single labels");
  MCD_CHECK(train.vectors.dim(1) == test.vectors.dim(1),
            "knn_probe: feature dimensions differ");
  MCD_CHECK(k >= 1 && int64_t(k) <= train.size(),
            "knn_probe: k = ", k, " outside [1, ", train.size(), "]");
  MCD_CHECK(tau > 0, "knn_probe: temperature must be positive");

  const int num_classes =
      1 + *std::max_element(train.labels.begin(), train.labels.end());
  const Tensor<T> tr = detail::l2_normalized_rows(train.vectors);
  const Tensor<T> te = detail::l2_normalized_rows(test.vectors);
  const int64_t ntr = tr.dim(0), nte = te.dim(0), d = tr.dim(1);

  int64_t correct = 0;
  std::vector<std::pair<double, int64_t>> sims(static_cast<size_t>(ntr));
  for (int64_t i = 0; i < nte; ++i) {
    const T* q = te.data() + i * d;
    for (int64_t j = 0; j < ntr; ++j) {
      const T* r = tr.data() + j * d;
      double dot = 0;
      for (int64_t c = 0; c < d; ++c) dot += double(q[c]) * double(r[c]);
      sims[size_t(j)] = {dot, j};
    }
    std::stable_sort(sims.begin(), sims.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<double> votes(size_t(num_classes), 0.0);
    for (int j = 0; j < k; ++j) {
      const auto& [sim, idx] = sims[size_t(j)];
      votes[size_t(train.labels[size_t(idx)])] += std::exp(sim / tau);
    }
    const int pred = int(std::max_element(votes.begin(), votes.end()) -
                         votes.begin());
    correct += pred == test.labels[size_t(i)];
  }
  return double(correct) / double(nte);
}

// --- linear probe -----------------------------------------------------------

namespace detail {

// Mean softmax cross-entropy over the batch plus the logit gradient.
template <typename T>
double softmax_xent_grad(const Tensor<T>& logits, const std::vector<int>& labels,
                         const std::vector<int64_t>& order, int64_t start,
                         Tensor<T>& dlogits) {
  const int64_t b = logits.dim(0), c = logits.dim(1);
  dlogits = Tensor<T>(logits.shape());
  double loss = 0;
  for (int64_t i = 0; i < b; ++i) {
    const T* row = logits.data() + i * c;
    T* drow = dlogits.data() + i * c;
    const int y = labels[size_t(order[size_t(start + i)])];
    T mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0;
    for (int64_t j = 0; j < c; ++j) sum += std::exp(double(row[j] - mx));
    const double lse = std::log(sum) + double(mx);
    loss += (lse - double(row[y])) / double(b);
    for (int64_t j = 0; j < c; ++j)
      drow[j] = T((std::exp(double(row[j]) - lse) - (j == y ? 1.0 : 0.0)) /
                  double(b));
  }
  return loss;
}

template <typename T>
int64_t count_top1(const Tensor<T>& logits, const std::vector<int>& labels,
                   const std::vector<int64_t>& order, int64_t start) {
  const int64_t b = logits.dim(0), c = logits.dim(1);
  int64_t correct = 0;
  for (int64_t i = 0; i < b; ++i) {
    const T* row = logits.data() + i * c;
    int64_t best = 0;
    for (int64_t j = 1; j < c; ++j)
      if (row[j] > row[best]) best = j;
    correct += int(best) == labels[size_t(order[size_t(start + i)])];
  }
  return correct;
}

}  // namespace detail

// Trains one linear map with softmax cross-entropy on frozen features and
// reports test top-1. The classifier starts at zero (the problem is convex),
// which keeps training equivariant under class-id permutation.
template <typename T>
double linear_probe(const FeatureBank<T>& train, const FeatureBank<T>& test,
                    int epochs = 100, double lr = 1e-3, int batch_size = 256,
                    uint64_t seed = 0) {
  train.validate();
  test.validate();
  MCD_CHECK(train.has_single_labels() && test.has_single_labels(),
            "linear_probe: both banks must carry single labels");
  MCD_CHECK(train.vectors.dim(1) == test.vectors.dim(1),
            "linear_probe: feature dimensions differ");
  MCD_CHECK(epochs >= 0 && lr >= 0 && batch_size >= 1,
            "linear_probe: bad hyperparameters");

  const int num_classes =
      1 + *std::max_element(train.labels.begin(), train.labels.end());
  const int64_t d = train.vectors.dim(1), ntr = train.size();

  Linear<T> fc("fc", int(d), num_classes, /*bias=*/true);  // zero-initialized
  std::vector<ParamRef<T>> params;
  fc.collect_params("probe.", params);
  SgdMomentum<T> opt(/*momentum=*/0.9, /*weight_decay=*/0.0);

  const int64_t steps_per_epoch = (ntr + batch_size - 1) / batch_size;
  const int64_t total_steps = steps_per_epoch * epochs;
  int64_t step = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    auto order = detail::identity_order<T>(ntr);
    SeededRng shuffle_rng(SeededRng::mix({seed, uint64_t(epoch), 0x70726f6265ULL}));
    shuffle_rng.shuffle(order);
    for (int64_t start = 0; start < ntr; start += batch_size, ++step) {
      const int64_t stop = std::min(ntr, start + int64_t(batch_size));
      Tensor<T> x({stop - start, d});
      for (int64_t i = start; i < stop; ++i)
        std::copy(train.vectors.data() + order[size_t(i)] * d,
                  train.vectors.data() + (order[size_t(i)] + 1) * d,
                  x.data() + (i - start) * d);
      zero_grads(params);
      Tensor<T> logits = fc.forward(x, /*train=*/true);
      Tensor<T> dlogits;
      const double loss =
          detail::softmax_xent_grad(logits, train.labels, order, start, dlogits);
      MCD_REQUIRE(std::isfinite(loss), "linear_probe: non-finite loss, aborting");
      fc.backward(dlogits);
      opt.step(params, cosine_anneal_lr(step, total_steps, lr));
    }
  }

  const auto test_order = detail::identity_order<T>(test.size());
  Tensor<T> logits = fc.forward(test.vectors, /*train=*/false);
  return double(detail::count_top1(logits, test.labels, test_order, 0)) /
         double(test.size());
}

// --- multi-label loss and MAP ----------------------------------------------

namespace detail {

template <typename T>
void check_binary_targets(const Tensor<T>& logits, const Tensor<T>& targets,
                          const char* who) {
  MCD_CHECK(logits.ndim() == 2 && targets.same_shape(logits), who,
            ": logits and targets must be matching (B, L) matrices");
  MCD_CHECK(logits.dim(0) >= 1 && logits.dim(1) >= 1, who,
            ": need at least one row and one class");
  for (int64_t i = 0; i < targets.numel(); ++i)
    MCD_CHECK(targets[i] == T(0) || targets[i] == T(1), who,
              ": target at flat index ", i, " not in {0,1}");
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// Mean over samples and classes of the per-element binary cross-entropy
// -[y log s(x) + (1-y) log(1-s(x))], evaluated in the overflow-safe
// logit form max(x,0) - x y + log(1 + exp(-|x|)).
template <typename T>
double multilabel_loss(const Tensor<T>& logits, const Tensor<T>& targets) {
  detail::check_binary_targets(logits, targets, "multilabel_loss");
  double total = 0;
  for (int64_t i = 0; i < logits.numel(); ++i) {
    const double x = double(logits[i]), y = double(targets[i]);
    total += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  return total / double(logits.numel());
}

template <typename T>
struct MultilabelGrad {
  double loss = 0;
  Tensor<T> dlogits;
};

template <typename T>
MultilabelGrad<T> multilabel_loss_grad(const Tensor<T>& logits,
                                       const Tensor<T>& targets) {
  MultilabelGrad<T> out;
  out.loss = multilabel_loss(logits, targets);
  out.dlogits = Tensor<T>(logits.shape());
  const double inv = 1.0 / double(logits.numel());
  for (int64_t i = 0; i < logits.numel(); ++i)
    out.dlogits[i] = T((detail::stable_sigmoid(double(logits[i])) -
                        double(targets[i])) *
                       inv);
  return out;
}

// Macro-averaged average precision. Per class, rows are ranked by descending
// score with ties broken by the original row order; AP is the mean of
// precision-at-rank over the ranks holding positives. Classes with no
// positive are excluded; if that excludes every class the metric is
// undefined.
template <typename T>
double mean_average_precision(const Tensor<T>& scores, const Tensor<T>& targets) {
  detail::check_binary_targets(scores, targets, "mean_average_precision");
  const int64_t n = scores.dim(0), l = scores.dim(1);
  double ap_sum = 0;
  int64_t classes_used = 0;
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t c = 0; c < l; ++c) {
    int64_t npos = 0;
    for (int64_t i = 0; i < n; ++i) npos += targets.at2(i, c) == T(1);
    if (npos == 0) continue;
    ++classes_used;
    std::iota(order.begin(), order.end(), int64_t(0));
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
      return scores.at2(a, c) > scores.at2(b, c);
    });
    int64_t hits = 0;
    double ap = 0;
    for (int64_t rank = 1; rank <= n; ++rank) {
      if (targets.at2(order[size_t(rank - 1)], c) == T(1)) {
        ++hits;
        ap += double(hits) / double(rank);
      }
    }
    ap_sum += ap / double(npos);
  }
  if (classes_used == 0)
    throw UndefinedMetric("mean_average_precision: no class has a positive");
  return ap_sum / double(classes_used);
}

// --- fine-tuning ------------------------------------------------------------

// Stage rate for the multi-label schedule: stages[0] until 60% of the
// epochs, stages[1] until 80%, stages[2] after. Boundaries are evaluated in
// integer arithmetic so epoch >= 0.6 * total holds exactly.
inline double multi_stage_lr(int epoch, int total_epochs,
                             const std::array<double, 3>& stages) {
  MCD_CHECK(total_epochs >= 1 && epoch >= 0 && epoch < total_epochs,
            "multi_stage_lr: epoch ", epoch, " outside [0, ", total_epochs, ")");
  if (5 * epoch >= 4 * total_epochs) return stages[2];
  if (5 * epoch >= 3 * total_epochs) return stages[1];
  return stages[0];
}

namespace detail {

// Shared fine-tuning loop: encoder (optionally frozen) + zero-initialized
// linear classifier. Per batch, `loss_grad` maps logits to (loss, dlogits)
// given the batch's dataset rows.
template <typename T, typename LossGrad>
void finetune_loop(Backbone<T>& encoder, Linear<T>& fc,
                   const std::vector<ImagePlane>& images, int64_t n,
                   const FinetuneConfig& cfg, Optimizer<T>& opt,
                   const std::function<double(int64_t step)>& lr_at,
                   const LossGrad& loss_grad) {
  std::vector<ParamRef<T>> params;
  fc.collect_params("fc.", params);
  if (!cfg.freeze_encoder) {
    auto enc = encoder.params("encoder.");
    params.insert(params.end(), enc.begin(), enc.end());
  }

  const int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  int64_t total_steps = steps_per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total_steps = std::min(total_steps, cfg.max_steps);

  int64_t step = 0;
  for (int epoch = 0; step < total_steps; ++epoch) {
    auto order = identity_order<T>(n);
    SeededRng shuffle_rng(
        SeededRng::mix({cfg.seed, uint64_t(epoch), 0x66696e65ULL}));
    shuffle_rng.shuffle(order);
    for (int64_t start = 0; start < n && step < total_steps;
         start += cfg.batch_size, ++step) {
      const int64_t stop = std::min(n, start + int64_t(cfg.batch_size));
      Tensor<T> x = assemble_images<T>(images, order, start, stop);
      zero_grads(params);
      Tensor<T> feat = encoder.forward(x, /*train=*/!cfg.freeze_encoder);
      Tensor<T> logits = fc.forward(feat, /*train=*/true);
      Tensor<T> dlogits;
      const double loss = loss_grad(logits, order, start, dlogits);
      MCD_REQUIRE(std::isfinite(loss),
                  "finetune: non-finite loss at step ", step, ", aborting");
      Tensor<T> dfeat = fc.backward(dlogits);
      if (!cfg.freeze_encoder) encoder.backward(dfeat);
      opt.step(params, lr_at(step));
    }
  }
}

template <typename T>
Tensor<T> predict_all(Backbone<T>& encoder, Linear<T>& fc,
                      const std::vector<ImagePlane>& images, int batch_size) {
  const int64_t n = int64_t(images.size());
  const auto order = identity_order<T>(n);
  Tensor<T> out;
  for (int64_t start = 0; start < n; start += batch_size) {
    const int64_t stop = std::min(n, start + int64_t(batch_size));
    Tensor<T> x = assemble_images<T>(images, order, start, stop);
    Tensor<T> logits = fc.forward(encoder.forward(x, false), false);
    if (out.numel() == 0) out = Tensor<T>({n, logits.dim(1)});
    std::copy(logits.data(), logits.data() + logits.numel(),
              out.data() + start * out.dim(1));
  }
  return out;
}

}  // namespace detail

// End-to-end single-label fine-tuning: backbone plus one linear classifier,
// SGD with momentum and no weight decay, cosine-annealed learning rate.
// Reports test and train top-1.
template <typename T>
EvalReport finetune_single(Backbone<T>& encoder, const SingleLabelDataset& train,
                           const SingleLabelDataset& eval_set,
                           const FinetuneConfig& cfg) {
  train.validate();
  eval_set.validate();
  MCD_CHECK(eval_set.num_classes == train.num_classes,
            "finetune_single: class count mismatch between splits");
  MCD_CHECK(cfg.epochs >= 1 && cfg.batch_size >= 1 && cfg.lr > 0,
            "finetune_single: bad hyperparameters");

  const int64_t n = int64_t(train.images.size());
  Linear<T> fc("fc", encoder.spec().feature_dim(), train.num_classes, true);
  SgdMomentum<T> opt(/*momentum=*/0.9, /*weight_decay=*/0.0);

  const int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  int64_t total_steps = steps_per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total_steps = std::min(total_steps, cfg.max_steps);
  const double base_lr = cfg.lr;
  const auto lr_at = [&](int64_t step) {
    return cosine_anneal_lr(step, total_steps, base_lr);
  };
  const auto loss_grad = [&](const Tensor<T>& logits,
                             const std::vector<int64_t>& order, int64_t start,
                             Tensor<T>& dlogits) {
    return detail::softmax_xent_grad(logits, train.labels, order, start, dlogits);
  };
  detail::finetune_loop(encoder, fc, train.images, n, cfg, opt, lr_at, loss_grad);

  EvalReport report;
  report.protocol = "finetune-single";
  report.dataset_id = cfg.dataset_id;
  report.train_size = n;
  report.eval_size = int64_t(eval_set.images.size());
  report.seed = cfg.seed;
  {
    Tensor<T> logits =
        detail::predict_all(encoder, fc, train.images, cfg.batch_size);
    report.metrics["train_top1"] =
        double(detail::count_top1(logits, train.labels,
                                  detail::identity_order<T>(n), 0)) /
        double(n);
  }
  {
    Tensor<T> logits =
        detail::predict_all(encoder, fc, eval_set.images, cfg.batch_size);
    report.metrics["top1"] =
        double(detail::count_top1(logits, eval_set.labels,
                                  detail::identity_order<T>(report.eval_size),
                                  0)) /
        double(report.eval_size);
  }
  report.validate();
  return report;
}

// End-to-end multi-label fine-tuning with the binary cross-entropy loss,
// AdamW, and the three-stage learning-rate schedule. Reports MAP on both
// splits. If `lr_trace` is given it receives the per-step learning rates.
template <typename T>
EvalReport finetune_multi(Backbone<T>& encoder, const MultiLabelDataset& train,
                          const MultiLabelDataset& eval_set,
                          const FinetuneConfig& cfg,
                          std::vector<double>* lr_trace = nullptr) {
  train.validate();
  eval_set.validate();
  MCD_CHECK(eval_set.num_labels == train.num_labels,
            "finetune_multi: label arity mismatch between splits");
  MCD_CHECK(cfg.epochs >= 1 && cfg.batch_size >= 1,
            "finetune_multi: bad hyperparameters");

  const int64_t n = int64_t(train.images.size());
  Linear<T> fc("fc", encoder.spec().feature_dim(), train.num_labels, true);
  AdamW<T> opt(/*weight_decay=*/0.01);

  const int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const auto lr_at = [&](int64_t step) {
    const int epoch = int(step / steps_per_epoch);
    const double lr = multi_stage_lr(epoch, cfg.epochs, cfg.multi_lr_stages);
    if (lr_trace) lr_trace->push_back(lr);
    return lr;
  };
  const auto loss_grad = [&](const Tensor<T>& logits,
                             const std::vector<int64_t>& order, int64_t start,
                             Tensor<T>& dlogits) {
    Tensor<T> targets(logits.shape());
    for (int64_t i = 0; i < logits.dim(0); ++i) {
      const auto& row = train.targets[size_t(order[size_t(start + i)])];
      for (int64_t c = 0; c < logits.dim(1); ++c)
        targets.at2(i, c) = T(row[size_t(c)]);
    }
    auto grad = multilabel_loss_grad(logits, targets);
    dlogits = std::move(grad.dlogits);
    return grad.loss;
  };
  detail::finetune_loop(encoder, fc, train.images, n, cfg, opt, lr_at, loss_grad);

  const auto map_for = [&](const MultiLabelDataset& ds) {
    Tensor<T> scores = detail::predict_all(encoder, fc, ds.images, cfg.batch_size);
    Tensor<T> targets(scores.shape());
    for (int64_t i = 0; i < scores.dim(0); ++i)
      for (int64_t c = 0; c < scores.dim(1); ++c)
        targets.at2(i, c) = T(ds.targets[size_t(i)][size_t(c)]);
    return mean_average_precision(scores, targets);
  };

  EvalReport report;
  report.protocol = "finetune-multi";
  report.dataset_id = cfg.dataset_id;
  report.train_size = n;
  report.eval_size = int64_t(eval_set.images.size());
  report.seed = cfg.seed;
  report.metrics["map"] = map_for(eval_set);
  report.metrics["train_map"] = map_for(train);
  report.validate();
  return report;
}

// Deterministic fractional subset (e.g. 10% training data): seeded shuffle,
// then the first ceil(frac * N) items.
template <typename Dataset>
Dataset take_fraction(const Dataset& ds, double fraction, uint64_t seed) {
  MCD_CHECK(fraction > 0 && fraction <= 1,
            "take_fraction: fraction must be in (0, 1]");
  const int64_t n = int64_t(ds.images.size());
  const int64_t keep = std::max<int64_t>(
      1, int64_t(std::ceil(fraction * double(n))));
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), int64_t(0));
  SeededRng rng(SeededRng::mix({seed, 0x66726163ULL}));
  rng.shuffle(order);
  Dataset out = ds;
  auto copy_row = [&](auto& dst, const auto& src) {
    dst.clear();
    dst.reserve(size_t(keep));
    for (int64_t i = 0; i < keep; ++i)
      dst.push_back(src[size_t(order[size_t(i)])]);
  };
  copy_row(out.images, ds.images);
  if constexpr (requires { ds.labels; }) copy_row(out.labels, ds.labels);
  if constexpr (requires { ds.targets; }) copy_row(out.targets, ds.targets);
  return out;
}

}  // namespace mcd
