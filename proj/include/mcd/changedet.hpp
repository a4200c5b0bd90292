#pragma once

// Bi-temporal change detection: both images pass a frozen convnet encoder,
// per-tap features fuse by absolute difference, and a trainable U-Net
// decoder with skip connections emits a per-pixel change logit map.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mcd/common.hpp"
#include "mcd/eval.hpp"
#include "mcd/image.hpp"
#include "mcd/models.hpp"
#include "mcd/nn.hpp"
#include "mcd/optim.hpp"
#include "mcd/rng.hpp"
#include "mcd/tensor.hpp"

namespace mcd {

// --- domain types -----------------------------------------------------------

struct ChangePair {
  ImagePlane image_a;
  ImagePlane image_b;
  ImagePlane mask;  // single channel, values in {0,1}; 1 marks change

  void validate() const {
    MCD_CHECK(image_a.height == image_b.height && image_a.width == image_b.width,
              "change pair: images must share spatial dimensions");
    MCD_CHECK(mask.height == image_a.height && mask.width == image_a.width,
              "change pair: mask must share the image dimensions");
    MCD_CHECK(image_a.channels == 3 && image_b.channels == 3,
              "change pair: images must have 3 channels");
    MCD_CHECK(mask.channels == 1, "change pair: mask must have 1 channel");
    for (float v : mask.data)
      MCD_CHECK(v == 0.f || v == 1.f, "change pair: mask value ", v,
                " not in {0,1}");
  }
};

// Encoder plus decoder layout. One decoder transition per skip level above
// the deepest tap; each transition upsamples, concatenates the skip, and
// applies a convolution block. A final upsample to input resolution and a
// 1x1 convolution produce the logit map.
struct UNetSpec {
  BackboneSpec encoder;
  std::vector<int> decoder_channels;

  static UNetSpec for_encoder(const BackboneSpec& enc) {
    UNetSpec s;
    s.encoder = enc;
    const size_t stages = enc.stage_channels.size();
    // Transition t lands on the tap below stage (stages - t); match its
    // channel count. Tap channels are (stem=c0, c0, c1, ..., c_{n-1}).
    for (size_t t = 0; t < stages; ++t) {
      const size_t level = stages - 1 - t;  // 0 = stem level
      s.decoder_channels.push_back(level == 0
                                       ? enc.stage_channels.front()
                                       : enc.stage_channels[level - 1]);
    }
    return s;
  }

  void validate() const {
    encoder.validate();
    MCD_CHECK(encoder.is_convnet(),
              "unet: encoder must be a convnet family (skip taps required)");
    MCD_CHECK(decoder_channels.size() == encoder.stage_channels.size(),
              "unet: need one decoder width per skip transition, got ",
              decoder_channels.size(), " for ", encoder.stage_channels.size(),
              " stages");
    for (int c : decoder_channels)
      MCD_CHECK(c >= 1, "unet: decoder width must be >= 1");
  }
};

// --- losses and metrics -----------------------------------------------------

namespace detail {

template <typename T>
void check_binary_mask(const Tensor<T>& logits, const Tensor<T>& mask,
                       const char* who) {
  MCD_CHECK(mask.same_shape(logits), who,
            ": logits and mask shapes must match");
  MCD_CHECK(logits.numel() >= 1, who, ": empty input");
  for (int64_t i = 0; i < mask.numel(); ++i)
    MCD_CHECK(mask[i] == T(0) || mask[i] == T(1), who, ": mask value at ", i,
              " not in {0,1}");
}

}  // namespace detail

inline constexpr double kDiceEps = 1.0;

// Mean binary cross-entropy on logits plus the soft-Dice complement
// 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps) with p = sigmoid(logits).
template <typename T>
double change_loss(const Tensor<T>& logits, const Tensor<T>& mask) {
  detail::check_binary_mask(logits, mask, "change_loss");
  const int64_t n = logits.numel();
  double bce = 0, inter = 0, psum = 0, tsum = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double x = double(logits[i]), t = double(mask[i]);
    bce += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
    const double p = detail::stable_sigmoid(x);
    inter += p * t;
    psum += p;
    tsum += t;
  }
  bce /= double(n);
  const double dice = 1.0 - (2.0 * inter + kDiceEps) / (psum + tsum + kDiceEps);
  return bce + dice;
}

template <typename T>
struct ChangeLossGrad {
  double loss = 0;
  double bce = 0;
  double dice = 0;
  Tensor<T> dlogits;
};

template <typename T>
ChangeLossGrad<T> change_loss_grad(const Tensor<T>& logits,
                                   const Tensor<T>& mask) {
  detail::check_binary_mask(logits, mask, "change_loss");
  const int64_t n = logits.numel();
  ChangeLossGrad<T> out;
  out.dlogits = Tensor<T>(logits.shape());
  std::vector<double> p(static_cast<size_t>(n));
  double inter = 0, psum = 0, tsum = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double x = double(logits[i]), t = double(mask[i]);
    out.bce += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
    p[size_t(i)] = detail::stable_sigmoid(x);
    inter += p[size_t(i)] * t;
    psum += p[size_t(i)];
    tsum += t;
  }
  out.bce /= double(n);
  const double a = 2.0 * inter + kDiceEps;
  const double b = psum + tsum + kDiceEps;
  out.dice = 1.0 - a / b;
  out.loss = out.bce + out.dice;
  for (int64_t i = 0; i < n; ++i) {
    const double t = double(mask[i]);
    const double dbce = (p[size_t(i)] - t) / double(n);
    const double ddice_dp = -(2.0 * t * b - a) / (b * b);
    const double dsig = p[size_t(i)] * (1.0 - p[size_t(i)]);
    out.dlogits[i] = T(dbce + ddice_dp * dsig);
  }
  return out;
}

// sigmoid(logit) > 0.5, i.e. logit > 0, marks a changed pixel.
template <typename T>
Tensor<T> predict_mask(const Tensor<T>& logits) {
  Tensor<T> out(logits.shape());
  for (int64_t i = 0; i < logits.numel(); ++i)
    out[i] = logits[i] > T(0) ? T(1) : T(0);
  return out;
}

struct PixelMetrics {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

namespace detail {

inline PixelMetrics metrics_from_counts(int64_t tp, int64_t fp, int64_t fn,
                                        int64_t tn) {
  PixelMetrics m;
  m.tp = tp;
  m.fp = fp;
  m.fn = fn;
  m.tn = tn;
  m.precision = tp + fp > 0 ? double(tp) / double(tp + fp) : 0.0;
  m.recall = tp + fn > 0 ? double(tp) / double(tp + fn) : 0.0;
  m.f1 = m.precision + m.recall > 0
             ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
             : 0.0;
  return m;
}

}  // namespace detail

// Precision, recall and F1 over binary masks; every zero-denominator case is
// defined as 0.
template <typename T>
PixelMetrics pixel_metrics(const Tensor<T>& pred_mask,
                           const Tensor<T>& true_mask) {
  detail::check_binary_mask(true_mask, pred_mask, "pixel_metrics");
  detail::check_binary_mask(pred_mask, true_mask, "pixel_metrics");
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (int64_t i = 0; i < pred_mask.numel(); ++i) {
    const bool p = pred_mask[i] == T(1), t = true_mask[i] == T(1);
    tp += p && t;
    fp += p && !t;
    fn += !p && t;
    tn += !p && !t;
  }
  return detail::metrics_from_counts(tp, fp, fn, tn);
}

// --- the detector -----------------------------------------------------------

template <typename T>
class ChangeDetector {
 public:
  explicit ChangeDetector(const UNetSpec& spec)
      : spec_(spec), encoder_(spec.encoder) {
    spec_.validate();
    const auto tap_channels = tap_channel_counts();
    const size_t transitions = spec_.decoder_channels.size();
    int in_ch = tap_channels.back();
    for (size_t t = 0; t < transitions; ++t) {
      const size_t level = transitions - 1 - t;  // target tap level
      const int out_ch = spec_.decoder_channels[t];
      const int cat_ch = in_ch + tap_channels[level];
      ups_.push_back(std::make_unique<BilinearUpsample<T>>());
      convs_.push_back(std::make_unique<Conv2d<T>>(
          detail::format_msg("decoder.conv", t), cat_ch, out_ch, 3, 1, 1,
          /*bias=*/false));
      norms_.push_back(std::make_unique<GroupNorm<T>>(
          detail::format_msg("decoder.norm", t), out_ch,
          norm_groups_for(out_ch)));
      acts_.push_back(std::make_unique<ReLU<T>>());
      in_ch = out_ch;
    }
    final_up_ = std::make_unique<BilinearUpsample<T>>();
    head_ = std::make_unique<Conv2d<T>>("decoder.head", in_ch, 1, 1, 1, 0,
                                        /*bias=*/true);
  }

  const UNetSpec& spec() const { return spec_; }
  Backbone<T>& encoder() { return encoder_; }

  // Initializes decoder parameters only; the encoder is loaded (or separately
  // initialized) by the caller and stays frozen during training.
  void init_decoder(SeededRng& rng) {
    for (auto& c : convs_) c->init(rng);
    for (auto& g : norms_) g->init(rng);
    head_->init(rng);
  }

  // (N,3,H,W) x 2 -> (N,1,H,W) change logits.
  Tensor<T> forward(const Tensor<T>& a, const Tensor<T>& b, bool train) {
    MCD_CHECK(a.same_shape(b), "unet_forward: image tensors must match");
    MCD_CHECK(a.ndim() == 4 && a.dim(1) == 3,
              "unet_forward: expected (N,3,H,W) inputs");
    const int64_t h = a.dim(2), w = a.dim(3);

    auto taps_a = encoder_.extract_skips(a);
    auto taps_b = encoder_.extract_skips(b);
    fused_.clear();
    for (size_t i = 0; i < taps_a.size(); ++i) {
      Tensor<T> f(taps_a[i].map.shape());
      for (int64_t j = 0; j < f.numel(); ++j)
        f[j] = std::abs(taps_a[i].map[j] - taps_b[i].map[j]);
      fused_.push_back(std::move(f));
    }

    Tensor<T> cur = fused_.back();
    skip_channels_.clear();
    for (size_t t = 0; t < convs_.size(); ++t) {
      const size_t level = convs_.size() - 1 - t;
      const Tensor<T>& skip = fused_[level];
      ups_[t]->set_target(int(skip.dim(2)), int(skip.dim(3)));
      cur = ups_[t]->forward(cur, train);
      skip_channels_.push_back(cur.dim(1));
      cur = concat_channels(cur, skip);
      cur = acts_[t]->forward(
          norms_[t]->forward(convs_[t]->forward(cur, train), train), train);
    }
    final_up_->set_target(int(h), int(w));
    cur = final_up_->forward(cur, train);
    return head_->forward(cur, train);
  }

  // Decoder-only backward; gradients never reach the frozen encoder.
  void backward(const Tensor<T>& dlogits) {
    Tensor<T> d = final_up_->backward(head_->backward(dlogits));
    for (size_t t = convs_.size(); t-- > 0;) {
      d = convs_[t]->backward(norms_[t]->backward(acts_[t]->backward(d)));
      d = split_front_channels(d, skip_channels_[t]);
      d = ups_[t]->backward(d);
    }
  }

  std::vector<ParamRef<T>> decoder_params() {
    std::vector<ParamRef<T>> out;
    for (size_t t = 0; t < convs_.size(); ++t) {
      convs_[t]->collect_params("", out);
      norms_[t]->collect_params("", out);
    }
    head_->collect_params("", out);
    return out;
  }

  std::vector<ParamRef<T>> encoder_params() { return encoder_.params(); }

 private:
  std::vector<int> tap_channel_counts() const {
    std::vector<int> ch{spec_.encoder.stage_channels.front()};
    for (int c : spec_.encoder.stage_channels) ch.push_back(c);
    return ch;
  }

  static Tensor<T> concat_channels(const Tensor<T>& x, const Tensor<T>& y) {
    MCD_REQUIRE(x.dim(0) == y.dim(0) && x.dim(2) == y.dim(2) &&
                    x.dim(3) == y.dim(3),
                "decoder concat: spatial/batch shape mismatch");
    const int64_t n = x.dim(0), cx = x.dim(1), cy = y.dim(1);
    const int64_t hw = x.dim(2) * x.dim(3);
    Tensor<T> out({n, cx + cy, x.dim(2), x.dim(3)});
    for (int64_t i = 0; i < n; ++i) {
      std::copy(x.data() + i * cx * hw, x.data() + (i + 1) * cx * hw,
                out.data() + i * (cx + cy) * hw);
      std::copy(y.data() + i * cy * hw, y.data() + (i + 1) * cy * hw,
                out.data() + (i * (cx + cy) + cx) * hw);
    }
    return out;
  }

  // Gradient of concat_channels w.r.t. its first argument.
  static Tensor<T> split_front_channels(const Tensor<T>& d, int64_t cx) {
    const int64_t n = d.dim(0), c = d.dim(1);
    const int64_t hw = d.dim(2) * d.dim(3);
    Tensor<T> out({n, cx, d.dim(2), d.dim(3)});
    for (int64_t i = 0; i < n; ++i)
      std::copy(d.data() + i * c * hw, d.data() + (i * c + cx) * hw,
                out.data() + i * cx * hw);
    return out;
  }

  UNetSpec spec_;
  Backbone<T> encoder_;
  std::vector<std::unique_ptr<BilinearUpsample<T>>> ups_;
  std::vector<std::unique_ptr<Conv2d<T>>> convs_;
  std::vector<std::unique_ptr<GroupNorm<T>>> norms_;
  std::vector<std::unique_ptr<ReLU<T>>> acts_;
  std::unique_ptr<BilinearUpsample<T>> final_up_;
  std::unique_ptr<Conv2d<T>> head_;
  std::vector<Tensor<T>> fused_;
  std::vector<int64_t> skip_channels_;
};

// --- training ---------------------------------------------------------------

struct ChangeDetConfig {
  int epochs = 20;
  int batch_size = 32;
  double lr = 6e-4;
  uint64_t seed = 0;
  int64_t max_steps = -1;
  std::string dataset_id = "change-pairs";
};

struct ChangeDetResult {
  EvalReport report;
  std::vector<double> per_pair_f1;
  std::vector<double> step_losses;
};

namespace detail {

template <typename T>
void assemble_pair_batch(const std::vector<ChangePair>& pairs,
                         const std::vector<int64_t>& order, int64_t start,
                         int64_t stop, Tensor<T>& a, Tensor<T>& b,
                         Tensor<T>& mask) {
  const ChangePair& first = pairs[size_t(order[size_t(start)])];
  const int64_t h = first.image_a.height, w = first.image_a.width;
  a = Tensor<T>({stop - start, 3, h, w});
  b = Tensor<T>({stop - start, 3, h, w});
  mask = Tensor<T>({stop - start, 1, h, w});
  for (int64_t i = start; i < stop; ++i) {
    const ChangePair& p = pairs[size_t(order[size_t(i)])];
    MCD_CHECK(p.image_a.height == h && p.image_a.width == w,
              "change batch: pairs must share one resolution");
    const int64_t off = (i - start) * 3 * h * w;
    for (size_t j = 0; j < p.image_a.data.size(); ++j) {
      a.data()[off + int64_t(j)] = T(p.image_a.data[j]);
      b.data()[off + int64_t(j)] = T(p.image_b.data[j]);
    }
    const int64_t moff = (i - start) * h * w;
    for (size_t j = 0; j < p.mask.data.size(); ++j)
      mask.data()[moff + int64_t(j)] = T(p.mask.data[j]);
  }
}

}  // namespace detail

// Trains the decoder on change pairs; the encoder is never updated. The
// report carries precision/recall/F1 aggregated over all validation pixels;
// per-pair F1 values are returned alongside.
template <typename T>
ChangeDetResult train_changedet(ChangeDetector<T>& model,
                                const std::vector<ChangePair>& train_pairs,
                                const std::vector<ChangePair>& val_pairs,
                                const ChangeDetConfig& cfg) {
  MCD_CHECK(!train_pairs.empty(), "train_changedet: no training pairs");
  MCD_CHECK(cfg.epochs >= 1 && cfg.batch_size >= 1 && cfg.lr > 0,
            "train_changedet: bad hyperparameters");
  for (const auto& p : train_pairs) p.validate();
  for (const auto& p : val_pairs) p.validate();

  auto params = model.decoder_params();
  AdamW<T> opt(/*weight_decay=*/0.0);

  const int64_t n = int64_t(train_pairs.size());
  const int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  int64_t total_steps = steps_per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total_steps = std::min(total_steps, cfg.max_steps);

  ChangeDetResult result;
  int64_t step = 0;
  for (int epoch = 0; step < total_steps; ++epoch) {
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), int64_t(0));
    SeededRng rng(SeededRng::mix({cfg.seed, uint64_t(epoch), 0x6368616e6765ULL}));
    rng.shuffle(order);
    for (int64_t start = 0; start < n && step < total_steps;
         start += cfg.batch_size, ++step) {
      const int64_t stop = std::min(n, start + int64_t(cfg.batch_size));
      Tensor<T> a, b, mask;
      detail::assemble_pair_batch(train_pairs, order, start, stop, a, b, mask);
      zero_grads(params);
      Tensor<T> logits = model.forward(a, b, /*train=*/true);
      auto grad = change_loss_grad(logits, mask);
      MCD_REQUIRE(std::isfinite(grad.loss),
                  "train_changedet: non-finite loss at step ", step);
      model.backward(grad.dlogits);
      opt.step(params, cfg.lr);
      result.step_losses.push_back(grad.loss);
    }
  }

  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (const auto& pair : val_pairs) {
    Tensor<T> a, b, mask;
    const std::vector<int64_t> one{0};
    detail::assemble_pair_batch(std::vector<ChangePair>{pair}, one, 0, 1, a, b,
                                mask);
    Tensor<T> pred = predict_mask(model.forward(a, b, /*train=*/false));
    PixelMetrics m = pixel_metrics(pred, mask);
    result.per_pair_f1.push_back(m.f1);
    tp += m.tp;
    fp += m.fp;
    fn += m.fn;
    tn += m.tn;
  }
  PixelMetrics agg = detail::metrics_from_counts(tp, fp, fn, tn);

  result.report.protocol = "changedet";
  result.report.dataset_id = cfg.dataset_id;
  result.report.train_size = n;
  result.report.eval_size = int64_t(val_pairs.size());
  result.report.seed = cfg.seed;
  if (!val_pairs.empty()) {
    result.report.metrics["precision"] = agg.precision;
    result.report.metrics["recall"] = agg.recall;
    result.report.metrics["f1"] = agg.f1;
    double mean_f1 = 0;
    for (double f : result.per_pair_f1) mean_f1 += f;
    result.report.metrics["f1_per_pair_mean"] =
        mean_f1 / double(result.per_pair_f1.size());
  }
  result.report.validate();
  return result;
}

}  // namespace mcd
