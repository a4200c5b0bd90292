#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "mcd/nn.hpp"

namespace mcd::testing {

// Symmetric relative error that degrades to scaled absolute error near zero.
inline double grad_rel_err(double analytic, double numeric) {
  const double scale = std::max(std::abs(analytic) + std::abs(numeric), 1e-6);
  return std::abs(analytic - numeric) / scale;
}

// Max error between an analytic gradient and central finite differences of
// eval() as each element of x is perturbed.
inline double fd_check_tensor(Tensor<double>& x, const Tensor<double>& analytic,
                              const std::function<double()>& eval,
                              double h = 1e-5) {
  double worst = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double fp = eval();
    x[i] = saved - h;
    const double fm = eval();
    x[i] = saved;
    worst = std::max(worst, grad_rel_err(analytic[i], (fp - fm) / (2.0 * h)));
  }
  return worst;
}

// Full module check: scalar loss = sum(w .* module(x)), analytic gradients
// from one backward pass, then finite differences over the input and every
// parameter. Returns the max relative error seen.
inline double check_module_gradients(Module<double>& m, Tensor<double>& x,
                                     SeededRng& rng, double h = 1e-5) {
  Tensor<double> probe_out = m.forward(x, true);
  Tensor<double> w(probe_out.shape());
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-1.0, 1.0);

  const auto eval = [&]() {
    Tensor<double> y = m.forward(x, true);
    double acc = 0.0;
    for (int64_t i = 0; i < y.numel(); ++i) acc += w[i] * y[i];
    return acc;
  };

  std::vector<ParamRef<double>> params;
  m.collect_params("", params);
  zero_grads(params);
  m.forward(x, true);
  Tensor<double> dx = m.backward(w);

  std::vector<Tensor<double>> saved_grads;
  saved_grads.reserve(params.size());
  for (auto& p : params) saved_grads.push_back(p.param->grad);

  double worst = fd_check_tensor(x, dx, eval, h);
  for (size_t pi = 0; pi < params.size(); ++pi)
    worst = std::max(worst,
                     fd_check_tensor(params[pi].param->value, saved_grads[pi], eval, h));
  return worst;
}

template <typename Fill>
Tensor<double> random_tensor(std::vector<int64_t> shape, SeededRng& rng, Fill fill) {
  Tensor<double> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = fill(rng);
  return t;
}

inline Tensor<double> uniform_tensor(std::vector<int64_t> shape, SeededRng& rng,
                                     double lo = -1.0, double hi = 1.0) {
  return random_tensor(std::move(shape), rng,
                       [&](SeededRng& r) { return r.uniform(lo, hi); });
}

}  // namespace mcd::testing
