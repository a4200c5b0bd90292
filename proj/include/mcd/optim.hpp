#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mcd/nn.hpp"

namespace mcd {

template <typename T>
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(const std::vector<ParamRef<T>>& params, double lr) = 0;
};

// Adam with decoupled weight decay. Decay multiplies the parameter by
// (1 - lr*wd) before the moment update and is applied only to parameters
// with >= 2 dimensions (weights, not biases or norm scales).
template <typename T>
class AdamW final : public Optimizer<T> {
 public:
  explicit AdamW(double weight_decay = 0.04, double beta1 = 0.9,
                 double beta2 = 0.999, double eps = 1e-8)
      : wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<ParamRef<T>>& params, double lr) override {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, double(t_));
    const double bc2 = 1.0 - std::pow(beta2_, double(t_));
    for (const auto& p : params) {
      Tensor<T>& value = p.param->value;
      const Tensor<T>& grad = p.param->grad;
      Moments& mo = state_[p.name];
      if (mo.m.numel() == 0) {
        mo.m = Tensor<T>(value.shape());
        mo.v = Tensor<T>(value.shape());
      }
      const bool decay = wd_ > 0 && value.ndim() >= 2;
      for (int64_t i = 0; i < value.numel(); ++i) {
        if (decay) value[i] -= T(lr * wd_) * value[i];
        const double g = double(grad[i]);
        const double m = beta1_ * double(mo.m[i]) + (1.0 - beta1_) * g;
        const double v = beta2_ * double(mo.v[i]) + (1.0 - beta2_) * g * g;
        mo.m[i] = T(m);
        mo.v[i] = T(v);
        value[i] -= T(lr * (m / bc1) / (std::sqrt(v / bc2) + eps_));
      }
    }
  }

 private:
  struct Moments {
    Tensor<T> m, v;
  };
  double wd_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::map<std::string, Moments> state_;
};

// Classical momentum: u = mu*u + g (+ wd*p), p -= lr*u.
template <typename T>
class SgdMomentum final : public Optimizer<T> {
 public:
  explicit SgdMomentum(double momentum = 0.9, double weight_decay = 0.0)
      : mu_(momentum), wd_(weight_decay) {}

  void step(const std::vector<ParamRef<T>>& params, double lr) override {
    for (const auto& p : params) {
      Tensor<T>& value = p.param->value;
      const Tensor<T>& grad = p.param->grad;
      Tensor<T>& u = state_[p.name];
      if (u.numel() == 0) u = Tensor<T>(value.shape());
      for (int64_t i = 0; i < value.numel(); ++i) {
        const T g = grad[i] + T(wd_) * value[i];
        u[i] = T(mu_) * u[i] + g;
        value[i] -= T(lr) * u[i];
      }
    }
  }

 private:
  double mu_, wd_;
  std::map<std::string, Tensor<T>> state_;
};

// --- learning-rate schedules ------------------------------------------------

// Linear ramp to base over warmup_steps, then cosine decay to zero.
inline double warmup_cosine_lr(int64_t step, int64_t total_steps,
                               int64_t warmup_steps, double base_lr) {
  MCD_CHECK(step >= 0 && total_steps >= 1 && warmup_steps >= 0,
            "schedule: bad step arguments");
  if (step < warmup_steps) return base_lr * double(step + 1) / double(warmup_steps);
  const int64_t span = std::max<int64_t>(1, total_steps - warmup_steps);
  const double t = double(step - warmup_steps) / double(span);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * std::min(t, 1.0)));
}

// Plain cosine annealing from base to zero.
inline double cosine_anneal_lr(int64_t step, int64_t total_steps, double base_lr) {
  MCD_CHECK(step >= 0 && total_steps >= 1, "schedule: bad step arguments");
  const double t = std::min(double(step) / double(total_steps), 1.0);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * t));
}

// Linear teacher-temperature warmup per epoch, flat after warmup_epochs.
inline double teacher_temperature_at(int64_t epoch, double start, double end,
                                     int64_t warmup_epochs) {
  MCD_CHECK(epoch >= 0, "schedule: negative epoch");
  if (warmup_epochs <= 0) return end;
  const double f = std::min(double(epoch) / double(warmup_epochs), 1.0);
  return start + (end - start) * f;
}

}  // namespace mcd
