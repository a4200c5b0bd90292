#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mcd/augment.hpp"
#include "mcd/models.hpp"
#include "mcd/optim.hpp"

// Self-distillation engine: a student network is trained to match the
// sharpened, centered output distribution of a momentum (EMA) teacher across
// crops of one image. Teacher outputs are constants; only the student is
// optimized, and the teacher then drifts toward the student.

namespace mcd {

constexpr double kLogClampEps = 1e-12;

enum class PretrainMode { kMC, kTP, kBaseline };

inline std::string mode_name(PretrainMode m) {
  switch (m) {
    case PretrainMode::kMC: return "mc";
    case PretrainMode::kTP: return "tp";
    case PretrainMode::kBaseline: return "baseline";
  }
  return "?";
}

inline PretrainMode mode_from_name(const std::string& s) {
  if (s == "mc") return PretrainMode::kMC;
  if (s == "tp") return PretrainMode::kTP;
  if (s == "baseline") return PretrainMode::kBaseline;
  throw InvalidArgument("unknown pretrain mode: " + s);
}

// Loss pair count: every (teacher global, student view) pair except the view
// the teacher itself saw.
inline int num_loss_pairs(int num_globals, int num_views) {
  return num_globals * (num_views - 1);
}

// --- probability maps -------------------------------------------------------

// Row-wise softmax((logits - center) / tau_t).
template <typename T>
Tensor<T> teacher_probabilities(const Tensor<T>& logits, const Tensor<T>& center,
                                double tau_t) {
  MCD_CHECK(tau_t > 0, "teacher_probabilities: temperature must be positive");
  MCD_CHECK(logits.ndim() == 2 && center.numel() == logits.dim(1),
            "teacher_probabilities: center length must match logit columns");
  const int64_t rows = logits.dim(0), k = logits.dim(1);
  Tensor<T> out({rows, k});
  for (int64_t r = 0; r < rows; ++r) {
    const T* src = logits.data() + r * k;
    T* dst = out.data() + r * k;
    T mx = (src[0] - center[0]) / T(tau_t);
    for (int64_t j = 0; j < k; ++j) {
      dst[j] = (src[j] - center[j]) / T(tau_t);
      mx = std::max(mx, dst[j]);
    }
    T sum = T(0);
    for (int64_t j = 0; j < k; ++j) {
      dst[j] = std::exp(dst[j] - mx);
      sum += dst[j];
    }
    for (int64_t j = 0; j < k; ++j) dst[j] /= sum;
  }
  return out;
}

template <typename T>
Tensor<T> student_probabilities(const Tensor<T>& logits, double tau_s) {
  MCD_CHECK(tau_s > 0, "student_probabilities: temperature must be positive");
  Tensor<T> zero({logits.dim(1)});
  return teacher_probabilities(logits, zero, tau_s);
}

template <typename T>
T mean_row_entropy(const Tensor<T>& probs) {
  const int64_t rows = probs.dim(0), k = probs.dim(1);
  T acc = T(0);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < k; ++j) {
      const T p = probs.data()[r * k + j];
      acc -= p * std::log(std::max(p, T(kLogClampEps)));
    }
  return acc / T(rows);
}

// --- distillation loss ------------------------------------------------------

namespace detail {
template <typename T>
void check_prob_rows(const Tensor<T>& p, const char* what) {
  const int64_t rows = p.dim(0), k = p.dim(1);
  for (int64_t r = 0; r < rows; ++r) {
    T sum = T(0);
    for (int64_t j = 0; j < k; ++j) {
      const T v = p.data()[r * k + j];
      MCD_CHECK(v >= T(0), what, ": negative probability entry");
      sum += v;
    }
    MCD_CHECK(std::abs(sum - T(1)) < T(1e-6), what,
              ": probability row does not sum to 1");
  }
}
}  // namespace detail

// Mean cross-entropy over all (teacher global g, student view v != g) pairs,
// averaged over the batch. student_probs[i] for i < teacher count describes
// the same view the i-th teacher distribution saw.
template <typename T>
T distill_loss(const std::vector<Tensor<T>>& teacher_probs,
               const std::vector<Tensor<T>>& student_probs) {
  const int g = int(teacher_probs.size());
  const int v = int(student_probs.size());
  MCD_CHECK(g >= 1 && v > g, "distill_loss: need teacher globals plus extra views");
  const int64_t b = teacher_probs[0].dim(0), k = teacher_probs[0].dim(1);
  for (const auto& t : teacher_probs) {
    MCD_CHECK(t.dim(0) == b && t.dim(1) == k, "distill_loss: ragged teacher views");
    detail::check_prob_rows(t, "distill_loss teacher");
  }
  for (const auto& s : student_probs)
    MCD_CHECK(s.dim(0) == b && s.dim(1) == k, "distill_loss: ragged student views");

  const int pairs = num_loss_pairs(g, v);
  T acc = T(0);
  for (int gi = 0; gi < g; ++gi)
    for (int vi = 0; vi < v; ++vi) {
      if (vi == gi) continue;
      const Tensor<T>& pt = teacher_probs[size_t(gi)];
      const Tensor<T>& ps = student_probs[size_t(vi)];
      for (int64_t i = 0; i < b * k; ++i)
        acc -= pt[i] * std::log(std::max(ps[i], T(kLogClampEps)));
    }
  return acc / (T(pairs) * T(b));
}

// Loss plus analytic gradients, evaluated from student logits so the softmax
// and its gradient share one numerically stable log-softmax. Teacher rows are
// constants: their gradient is identically zero by construction.
template <typename T>
struct DistillGrad {
  T loss = T(0);
  T teacher_entropy = T(0);
  std::vector<Tensor<T>> dstudent_logits;
  std::vector<Tensor<T>> dteacher_logits;  // always exactly zero
};

template <typename T>
DistillGrad<T> distill_loss_grad(const std::vector<Tensor<T>>& teacher_probs,
                                 const std::vector<Tensor<T>>& student_logits,
                                 double tau_s) {
  MCD_CHECK(tau_s > 0, "distill_loss_grad: temperature must be positive");
  const int g = int(teacher_probs.size());
  const int v = int(student_logits.size());
  MCD_CHECK(g >= 1 && v > g, "distill_loss_grad: need teacher globals plus extra views");
  const int64_t b = teacher_probs[0].dim(0), k = teacher_probs[0].dim(1);
  const int pairs = num_loss_pairs(g, v);
  const T inv_scale = T(1) / (T(pairs) * T(b));

  DistillGrad<T> out;
  out.dstudent_logits.reserve(size_t(v));
  out.dteacher_logits.assign(size_t(g), Tensor<T>({b, k}));

  Tensor<T> logp({b, k});
  for (int vi = 0; vi < v; ++vi) {
    const Tensor<T>& s = student_logits[size_t(vi)];
    MCD_CHECK(s.dim(0) == b && s.dim(1) == k, "distill_loss_grad: ragged student views");
    // log-softmax of s / tau_s per row
    for (int64_t r = 0; r < b; ++r) {
      const T* src = s.data() + r * k;
      T* lp = logp.data() + r * k;
      T mx = src[0];
      for (int64_t j = 1; j < k; ++j) mx = std::max(mx, src[j]);
      T sum = T(0);
      for (int64_t j = 0; j < k; ++j) sum += std::exp((src[j] - mx) / T(tau_s));
      const T lse = std::log(sum) + mx / T(tau_s);
      for (int64_t j = 0; j < k; ++j) lp[j] = src[j] / T(tau_s) - lse;
    }
    Tensor<T> grad({b, k});
    int teachers_for_view = 0;
    for (int gi = 0; gi < g; ++gi) {
      if (gi == vi) continue;
      ++teachers_for_view;
      const Tensor<T>& pt = teacher_probs[size_t(gi)];
      for (int64_t i = 0; i < b * k; ++i) {
        out.loss -= pt[i] * logp[i] * inv_scale;
        grad[i] -= pt[i];
      }
    }
    // grad currently holds -sum_g pt; add the softmax term per teacher pair.
    if (teachers_for_view > 0) {
      const T c = T(teachers_for_view);
      for (int64_t i = 0; i < b * k; ++i)
        grad[i] = (grad[i] + c * std::exp(logp[i])) * inv_scale / T(tau_s);
    }
    out.dstudent_logits.push_back(std::move(grad));
  }
  for (const auto& t : teacher_probs) {
    const T e = mean_row_entropy(t);
    out.teacher_entropy += e / T(g);
  }
  return out;
}

// --- EMA teacher and center -------------------------------------------------

template <typename T>
void ema_update(const std::vector<ParamRef<T>>& teacher,
                const std::vector<ParamRef<T>>& student, double lambda) {
  MCD_CHECK(lambda >= 0 && lambda <= 1, "ema_update: lambda outside [0,1]");
  MCD_REQUIRE(teacher.size() == student.size(),
              "ema_update: parameter list size mismatch");
  for (size_t i = 0; i < teacher.size(); ++i) {
    Tensor<T>& t = teacher[i].param->value;
    const Tensor<T>& s = student[i].param->value;
    MCD_REQUIRE(t.same_shape(s), "ema_update: shape mismatch at ",
                teacher[i].name);
    for (int64_t j = 0; j < t.numel(); ++j)
      t[j] = T(lambda) * t[j] + T(1.0 - lambda) * s[j];
  }
}

// c' = m*c + (1-m) * mean over rows of the teacher global-view logits.
template <typename T>
void center_update(Tensor<T>& center, const Tensor<T>& teacher_logit_rows,
                   double momentum) {
  MCD_CHECK(momentum >= 0 && momentum <= 1, "center_update: momentum outside [0,1]");
  MCD_CHECK(teacher_logit_rows.ndim() == 2 && teacher_logit_rows.dim(0) >= 1,
            "center_update: need at least one logit row");
  const int64_t b = teacher_logit_rows.dim(0), k = teacher_logit_rows.dim(1);
  MCD_CHECK(center.numel() == k, "center_update: center length mismatch");
  for (int64_t j = 0; j < k; ++j) {
    T mean = T(0);
    for (int64_t r = 0; r < b; ++r) mean += teacher_logit_rows.data()[r * k + j];
    mean /= T(b);
    center[j] = T(momentum) * center[j] + T(1.0 - momentum) * mean;
  }
}

// Momentum coefficient schedule, 0.996 rising to 1 on a half cosine.
inline double lambda_at(int64_t step, int64_t total_steps) {
  MCD_CHECK(total_steps >= 1, "lambda_at: total_steps must be >= 1");
  MCD_CHECK(step >= 0 && step <= total_steps, "lambda_at: step ", step,
            " outside [0,", total_steps, "]");
  return 1.0 - (1.0 - 0.996) * (std::cos(M_PI * double(step) / double(total_steps)) + 1.0) / 2.0;
}

// --- training loop ----------------------------------------------------------

struct DistillConfig {
  BackboneSpec backbone;
  ProjectionHeadSpec head;
  ViewSetConfig views;
  PretrainMode mode = PretrainMode::kMC;
  int epochs = 30;
  int batch_size = 16;
  double base_lr = 5e-4;
  int warmup_epochs = 10;
  double weight_decay = 0.04;
  double tau_s = 0.1;
  double tau_t_start = 0.04;
  double tau_t_end = 0.07;
  int tau_t_warmup_epochs = 30;
  double center_momentum = 0.9;
  bool centering_enabled = true;  // ablation hook for collapse experiments
  uint64_t seed = 0;

  void validate() const {
    backbone.validate();
    head.validate();
    views.validate();
    MCD_CHECK(epochs >= 1 && batch_size >= 1, "distill config: epochs and batch size must be >= 1");
    MCD_CHECK(base_lr >= 0, "distill config: learning rate must be >= 0");
    MCD_CHECK(tau_s > 0 && tau_t_start > 0 && tau_t_end > 0,
              "distill config: temperatures must be positive");
    MCD_CHECK(warmup_epochs >= 0 && tau_t_warmup_epochs >= 0,
              "distill config: warmup epochs must be >= 0");
    MCD_CHECK(center_momentum >= 0 && center_momentum <= 1,
              "distill config: center momentum outside [0,1]");
  }
};

struct StepStats {
  int64_t step = 0;
  double loss = 0;
  double lambda = 0;
  double tau_t = 0;
  double teacher_entropy = 0;
  double lr = 0;
};

template <typename T>
class DistillTrainer {
 public:
  DistillTrainer(const DistillConfig& cfg, int64_t steps_per_epoch,
                 int64_t total_steps)
      : cfg_(cfg),
        steps_per_epoch_(steps_per_epoch),
        total_steps_(total_steps),
        student_(cfg.backbone, cfg.head),
        teacher_(cfg.backbone, cfg.head),
        center_({cfg.head.num_prototypes}),
        opt_(cfg.weight_decay) {
    cfg_.validate();
    MCD_CHECK(steps_per_epoch >= 1 && total_steps >= 1,
              "trainer: step counts must be >= 1");
    SeededRng rng(SeededRng::mix({cfg.seed, 0x6d6f64656cULL}));
    student_.init(rng);
    sparams_ = student_.params();
    tparams_ = teacher_.params();
    // The teacher starts as an exact copy of the student.
    for (size_t i = 0; i < sparams_.size(); ++i)
      tparams_[i].param->value = sparams_[i].param->value;
  }

  FullModel<T>& student() { return student_; }
  FullModel<T>& teacher() { return teacher_; }
  const Tensor<T>& center() const { return center_; }
  int64_t step_index() const { return step_; }
  int64_t total_steps() const { return total_steps_; }
  const std::vector<ParamRef<T>>& student_params() const { return sparams_; }
  const std::vector<ParamRef<T>>& teacher_params() const { return tparams_; }

  double current_tau_t() const {
    return teacher_temperature_at(step_ / steps_per_epoch_, cfg_.tau_t_start,
                                  cfg_.tau_t_end, cfg_.tau_t_warmup_epochs);
  }

  // One optimization step over a batch of augmented viewsets.
  StepStats train_step(const std::vector<ViewSet>& batch) {
    MCD_CHECK(!batch.empty(), "train_step: empty batch");
    const int64_t b = int64_t(batch.size());
    const int g = int(batch[0].globals.size());
    const int v = batch[0].num_views();
    MCD_CHECK(g >= 1 && v > g, "train_step: viewset needs globals plus locals");
    for (const auto& vs : batch)
      MCD_CHECK(int(vs.globals.size()) == g && vs.num_views() == v,
                "train_step: inconsistent viewset structure in batch");

    const double tau_t = current_tau_t();

    // Teacher pass over all globals in one fixed-shape batch, no caches.
    Tensor<T> teacher_logits =
        teacher_.forward_logits(assemble_globals(batch), false);
    std::vector<Tensor<T>> teacher_probs;
    Tensor<T> zero_center({cfg_.head.num_prototypes});
    const Tensor<T>& eff_center = cfg_.centering_enabled ? center_ : zero_center;
    for (int gi = 0; gi < g; ++gi) {
      Tensor<T> rows({b, int64_t(cfg_.head.num_prototypes)});
      std::copy(teacher_logits.data() + gi * b * rows.dim(1),
                teacher_logits.data() + (gi + 1) * b * rows.dim(1), rows.data());
      teacher_probs.push_back(teacher_probabilities(rows, eff_center, tau_t));
    }

    // Student passes grouped by view resolution; gradients accumulate across
    // groups, so each group backpropagates before the next forward reuses the
    // layer caches.
    zero_grads(sparams_);
    const int pairs = num_loss_pairs(g, v);
    double loss = 0;
    for (const auto& group : resolution_groups(batch[0])) {
      Tensor<T> x = assemble_views(batch, group);
      Tensor<T> logits = student_.forward_logits(x, true);
      Tensor<T> dlogits(logits.shape());
      loss += group_loss_grad(logits, dlogits, group, teacher_probs, b, pairs);
      student_.backward_from_logits(dlogits);
    }
    MCD_REQUIRE(std::isfinite(loss), "train_step: non-finite loss at step ", step_);

    const double lr = warmup_cosine_lr(step_, total_steps_,
                                       cfg_.warmup_epochs * steps_per_epoch_,
                                       cfg_.base_lr);
    opt_.step(sparams_, lr);

    const double lambda = lambda_at(step_, total_steps_);
    ema_update(tparams_, sparams_, lambda);
    if (cfg_.centering_enabled)
      center_update(center_, teacher_logits, cfg_.center_momentum);

    double entropy = 0;
    for (const auto& p : teacher_probs) entropy += double(mean_row_entropy(p)) / g;

    StepStats st;
    st.step = step_;
    st.loss = loss;
    st.lambda = lambda;
    st.tau_t = tau_t;
    st.teacher_entropy = entropy;
    st.lr = lr;
    ++step_;
    return st;
  }

 private:
  struct ViewGroup {
    int size = 0;
    std::vector<int> view_indices;  // indices into [globals..., locals...]
  };

  std::vector<ViewGroup> resolution_groups(const ViewSet& proto) const {
    std::vector<ViewGroup> groups;
    auto add = [&](int size, int idx) {
      for (auto& gr : groups)
        if (gr.size == size) {
          gr.view_indices.push_back(idx);
          return;
        }
      groups.push_back({size, {idx}});
    };
    int idx = 0;
    for (const auto& img : proto.globals) add(img.width, idx++);
    for (const auto& img : proto.locals) add(img.width, idx++);
    return groups;
  }

  static const ImagePlane& view_at(const ViewSet& vs, int idx) {
    const int g = int(vs.globals.size());
    return idx < g ? vs.globals[size_t(idx)] : vs.locals[size_t(idx - g)];
  }

  Tensor<T> assemble_globals(const std::vector<ViewSet>& batch) const {
    const int g = int(batch[0].globals.size());
    const int64_t b = int64_t(batch.size());
    const int s = batch[0].globals[0].width;
    Tensor<T> x({int64_t(g) * b, 3, s, s});
    int64_t row = 0;
    for (int gi = 0; gi < g; ++gi)
      for (int64_t bi = 0; bi < b; ++bi) copy_image(batch[size_t(bi)].globals[size_t(gi)], x, row++);
    return x;
  }

  Tensor<T> assemble_views(const std::vector<ViewSet>& batch,
                           const ViewGroup& group) const {
    const int64_t b = int64_t(batch.size());
    Tensor<T> x({int64_t(group.view_indices.size()) * b, 3, group.size, group.size});
    int64_t row = 0;
    for (int idx : group.view_indices)
      for (int64_t bi = 0; bi < b; ++bi)
        copy_image(view_at(batch[size_t(bi)], idx), x, row++);
    return x;
  }

  static void copy_image(const ImagePlane& img, Tensor<T>& x, int64_t row) {
    MCD_CHECK(img.channels == 3 && img.height == x.dim(2) && img.width == x.dim(3),
              "train_step: view does not match its group shape");
    T* dst = x.data() + row * 3 * x.dim(2) * x.dim(3);
    for (size_t i = 0; i < img.data.size(); ++i) dst[i] = T(img.data[i]);
  }

  // Loss and dlogits for one resolution group. Rows are (view-major, batch).
  double group_loss_grad(const Tensor<T>& logits, Tensor<T>& dlogits,
                         const ViewGroup& group,
                         const std::vector<Tensor<T>>& teacher_probs,
                         int64_t b, int pairs) const {
    const int g = int(teacher_probs.size());
    const int64_t k = logits.dim(1);
    const T inv_scale = T(1) / (T(pairs) * T(b));
    const T tau = T(cfg_.tau_s);
    double loss = 0;
    std::vector<T> logp(static_cast<size_t>(k));
    for (size_t gi_row = 0; gi_row < group.view_indices.size(); ++gi_row) {
      const int view = group.view_indices[gi_row];
      for (int64_t bi = 0; bi < b; ++bi) {
        const int64_t r = int64_t(gi_row) * b + bi;
        const T* src = logits.data() + r * k;
        T* drow = dlogits.data() + r * k;
        T mx = src[0];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, src[j]);
        T sum = T(0);
        for (int64_t j = 0; j < k; ++j) sum += std::exp((src[j] - mx) / tau);
        const T lse = std::log(sum) + mx / tau;
        for (int64_t j = 0; j < k; ++j) logp[size_t(j)] = src[j] / tau - lse;

        int teachers_for_view = 0;
        for (int64_t j = 0; j < k; ++j) drow[j] = T(0);
        for (int tg = 0; tg < g; ++tg) {
          if (tg == view) continue;
          ++teachers_for_view;
          const T* pt = teacher_probs[size_t(tg)].data() + bi * k;
          for (int64_t j = 0; j < k; ++j) {
            loss -= double(pt[j] * logp[size_t(j)] * inv_scale);
            drow[j] -= pt[j];
          }
        }
        const T c = T(teachers_for_view);
        for (int64_t j = 0; j < k; ++j)
          drow[j] = (drow[j] + c * std::exp(logp[size_t(j)])) * inv_scale / tau;
      }
    }
    return loss;
  }

  DistillConfig cfg_;
  int64_t steps_per_epoch_, total_steps_;
  int64_t step_ = 0;
  FullModel<T> student_, teacher_;
  std::vector<ParamRef<T>> sparams_, tparams_;
  Tensor<T> center_;
  AdamW<T> opt_;
};

// --- epoch driver -----------------------------------------------------------

// Runs the full pretraining loop over an in-memory dataset. MC and baseline
// modes consume single images; TP consumes temporal stacks. max_steps > 0
// caps the run (schedules then complete over the capped horizon).
template <typename T>
std::unique_ptr<DistillTrainer<T>> pretrain(
    const DistillConfig& cfg, const std::vector<ImagePlane>& images,
    const std::vector<std::vector<ImagePlane>>& stacks,
    const std::function<void(const StepStats&)>& on_step,
    int64_t max_steps = -1) {
  cfg.validate();
  const bool temporal = cfg.mode == PretrainMode::kTP;
  MCD_CHECK(temporal ? !stacks.empty() : !images.empty(),
            "pretrain: dataset empty or wrong kind for mode ", mode_name(cfg.mode));
  const int64_t n = temporal ? int64_t(stacks.size()) : int64_t(images.size());
  const int64_t spe = (n + cfg.batch_size - 1) / cfg.batch_size;
  int64_t total = spe * cfg.epochs;
  if (max_steps > 0) total = std::min(total, max_steps);

  auto trainer = std::make_unique<DistillTrainer<T>>(cfg, spe, total);

  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[size_t(i)] = i;

  for (int epoch = 0; trainer->step_index() < total; ++epoch) {
    SeededRng shuffle_rng(
        SeededRng::mix({cfg.seed, uint64_t(epoch), 0x73687566ULL}));
    shuffle_rng.shuffle(order);
    for (int64_t start = 0; start < n && trainer->step_index() < total;
         start += cfg.batch_size) {
      const int64_t stop = std::min(n, start + cfg.batch_size);
      std::vector<ViewSet> batch;
      batch.reserve(size_t(stop - start));
      for (int64_t i = start; i < stop; ++i) {
        const uint64_t vs_seed =
            SeededRng::mix({cfg.seed, uint64_t(epoch), uint64_t(order[size_t(i)]),
                            0x76696577ULL});
        if (temporal)
          batch.push_back(make_viewset_tp(stacks[size_t(order[size_t(i)])],
                                          cfg.views, vs_seed));
        else
          batch.push_back(make_viewset_mc(images[size_t(order[size_t(i)])],
                                          cfg.views, vs_seed));
      }
      const StepStats st = trainer->train_step(batch);
      if (on_step) on_step(st);
    }
  }
  return trainer;
}

}  // namespace mcd
