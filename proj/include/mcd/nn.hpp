#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "mcd/rng.hpp"
#include "mcd/tensor.hpp"

// Minimal trainable-layer engine: each layer caches what its backward pass
// needs during a training forward, and backward() accumulates parameter
// gradients (callers zero them between steps). Everything is single-threaded
// and deterministic; math goes through Eigen maps on row-major buffers.

namespace mcd {

template <typename T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;

  void resize(std::vector<int64_t> shape) {
    value = Tensor<T>(shape);
    grad = Tensor<T>(std::move(shape));
  }
};

template <typename T>
struct ParamRef {
  std::string name;
  Param<T>* param;
};

template <typename T>
class Module {
 public:
  virtual ~Module() = default;
  virtual Tensor<T> forward(const Tensor<T>& x, bool train) = 0;
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
  virtual void collect_params(const std::string& prefix,
                              std::vector<ParamRef<T>>& out) = 0;
  virtual void init(SeededRng& rng) = 0;
};

// --- init helpers ----------------------------------------------------------

template <typename T>
void init_he_normal(Tensor<T>& w, int64_t fan_in, SeededRng& rng) {
  const double stddev = std::sqrt(2.0 / double(fan_in));
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = T(rng.normal() * stddev);
}

template <typename T>
void init_trunc_normal(Tensor<T>& w, double stddev, SeededRng& rng) {
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = T(rng.trunc_normal(stddev));
}

// --- Conv2d ----------------------------------------------------------------

enum class ConvInit { kHeNormal, kTruncNormal };

template <typename T>
class Conv2d final : public Module<T> {
 public:
  Conv2d(std::string name, int in_ch, int out_ch, int ksize, int stride,
         int pad, bool bias = false, ConvInit init_mode = ConvInit::kHeNormal)
      : name_(std::move(name)),
        in_ch_(in_ch),
        out_ch_(out_ch),
        ksize_(ksize),
        stride_(stride),
        pad_(pad),
        has_bias_(bias),
        init_mode_(init_mode) {
    MCD_CHECK(in_ch >= 1 && out_ch >= 1 && ksize >= 1 && stride >= 1 && pad >= 0,
              "bad conv geometry");
    w_.resize({out_ch_, int64_t(in_ch_) * ksize_ * ksize_});
    if (has_bias_) b_.resize({out_ch_});
  }

  void init(SeededRng& rng) override {
    if (init_mode_ == ConvInit::kHeNormal)
      init_he_normal(w_.value, int64_t(in_ch_) * ksize_ * ksize_, rng);
    else
      init_trunc_normal(w_.value, 0.02, rng);
    if (has_bias_) b_.value.zero();
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    MCD_CHECK(x.ndim() == 4 && x.dim(1) == in_ch_, "conv ", name_,
              ": expected (N,", in_ch_, ",H,W)");
    const int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const int64_t oh = (h + 2 * pad_ - ksize_) / stride_ + 1;
    const int64_t ow = (w + 2 * pad_ - ksize_) / stride_ + 1;
    MCD_CHECK(oh >= 1 && ow >= 1, "conv ", name_, ": input ", h, "x", w,
              " too small for kernel");

    in_shape_ = x.shape();
    oh_ = oh;
    ow_ = ow;
    const int64_t kk = int64_t(in_ch_) * ksize_ * ksize_;
    const int64_t patches = oh * ow;

    Tensor<T> y({n, out_ch_, oh, ow});
    const bool pointwise = ksize_ == 1 && stride_ == 1 && pad_ == 0;

    if (!pointwise) {
      cols_ = Tensor<T>({n, kk, patches});
      for (int64_t i = 0; i < n; ++i) im2col(x, i);
      for (int64_t i = 0; i < n; ++i) {
        ConstMatMap<T> col(cols_.data() + i * kk * patches, kk, patches);
        MatMap<T> yi(y.data() + i * out_ch_ * patches, out_ch_, patches);
        yi.noalias() = as_matrix(w_.value, out_ch_, kk) * col;
      }
    } else {
      // 1x1 stride-1: the input itself is the column matrix.
      for (int64_t i = 0; i < n; ++i) {
        ConstMatMap<T> col(x.data() + i * in_ch_ * patches, in_ch_, patches);
        MatMap<T> yi(y.data() + i * out_ch_ * patches, out_ch_, patches);
        yi.noalias() = as_matrix(w_.value, out_ch_, kk) * col;
      }
    }
    if (has_bias_) {
      for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 0; c < out_ch_; ++c) {
          T* row = y.data() + (i * out_ch_ + c) * patches;
          const T b = b_.value[c];
          for (int64_t p = 0; p < patches; ++p) row[p] += b;
        }
    }
    if (train) {
      x_cache_ = x;
    } else {
      x_cache_ = Tensor<T>();
      cols_ = Tensor<T>();
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    MCD_CHECK(x_cache_.numel() > 0, "conv ", name_, ": backward before forward");
    const int64_t n = in_shape_[0], h = in_shape_[2], w = in_shape_[3];
    const int64_t kk = int64_t(in_ch_) * ksize_ * ksize_;
    const int64_t patches = oh_ * ow_;
    const bool pointwise = ksize_ == 1 && stride_ == 1 && pad_ == 0;

    auto w_mat = as_matrix(w_.value, out_ch_, kk);
    auto dw_mat = as_matrix(w_.grad, out_ch_, kk);

    Tensor<T> dx(in_shape_);
    Tensor<T> dcol_buf;
    if (!pointwise) dcol_buf = Tensor<T>({kk, patches});

    for (int64_t i = 0; i < n; ++i) {
      ConstMatMap<T> dyi(dy.data() + i * out_ch_ * patches, out_ch_, patches);
      if (pointwise) {
        ConstMatMap<T> col(x_cache_.data() + i * in_ch_ * patches, in_ch_, patches);
        dw_mat.noalias() += dyi * col.transpose();
        MatMap<T> dxi(dx.data() + i * in_ch_ * patches, in_ch_, patches);
        dxi.noalias() = w_mat.transpose() * dyi;
      } else {
        ConstMatMap<T> col(cols_.data() + i * kk * patches, kk, patches);
        dw_mat.noalias() += dyi * col.transpose();
        MatMap<T> dcol(dcol_buf.data(), kk, patches);
        dcol.noalias() = w_mat.transpose() * dyi;
        col2im(dcol_buf, dx, i, h, w);
      }
      if (has_bias_) {
        for (int64_t c = 0; c < out_ch_; ++c) {
          const T* row = dy.data() + (i * out_ch_ + c) * patches;
          T acc = T(0);
          for (int64_t p = 0; p < patches; ++p) acc += row[p];
          b_.grad[c] += acc;
        }
      }
    }
    return dx;
  }

  void collect_params(const std::string& prefix,
                      std::vector<ParamRef<T>>& out) override {
    out.push_back({prefix + name_ + ".w", &w_});
    if (has_bias_) out.push_back({prefix + name_ + ".b", &b_});
  }

  int out_channels() const { return int(out_ch_); }

 private:
  void im2col(const Tensor<T>& x, int64_t i) {
    const int64_t h = in_shape_[2], w = in_shape_[3];
    const int64_t kk = int64_t(in_ch_) * ksize_ * ksize_;
    const int64_t patches = oh_ * ow_;
    T* col = cols_.data() + i * kk * patches;
    for (int64_t c = 0; c < in_ch_; ++c) {
      for (int64_t ky = 0; ky < ksize_; ++ky) {
        for (int64_t kx = 0; kx < ksize_; ++kx) {
          T* dst = col + ((c * ksize_ + ky) * ksize_ + kx) * patches;
          for (int64_t oy = 0; oy < oh_; ++oy) {
            const int64_t sy = oy * stride_ + ky - pad_;
            for (int64_t ox = 0; ox < ow_; ++ox) {
              const int64_t sx = ox * stride_ + kx - pad_;
              dst[oy * ow_ + ox] =
                  (sy >= 0 && sy < h && sx >= 0 && sx < w)
                      ? x.data()[((i * in_ch_ + c) * h + sy) * w + sx]
                      : T(0);
            }
          }
        }
      }
    }
  }

  void col2im(const Tensor<T>& dcol, Tensor<T>& dx, int64_t i, int64_t h,
              int64_t w) {
    const int64_t patches = oh_ * ow_;
    for (int64_t c = 0; c < in_ch_; ++c) {
      for (int64_t ky = 0; ky < ksize_; ++ky) {
        for (int64_t kx = 0; kx < ksize_; ++kx) {
          const T* src = dcol.data() + ((c * ksize_ + ky) * ksize_ + kx) * patches;
          for (int64_t oy = 0; oy < oh_; ++oy) {
            const int64_t sy = oy * stride_ + ky - pad_;
            if (sy < 0 || sy >= h) continue;
            for (int64_t ox = 0; ox < ow_; ++ox) {
              const int64_t sx = ox * stride_ + kx - pad_;
              if (sx < 0 || sx >= w) continue;
              dx.data()[((i * in_ch_ + c) * h + sy) * w + sx] += src[oy * ow_ + ox];
            }
          }
        }
      }
    }
  }

  std::string name_;
  int64_t in_ch_, out_ch_, ksize_, stride_, pad_;
  bool has_bias_;
  ConvInit init_mode_;
  Param<T> w_, b_;
  std::vector<int64_t> in_shape_;
  int64_t oh_ = 0, ow_ = 0;
  Tensor<T> x_cache_, cols_;
};

// --- GroupNorm -------------------------------------------------------------

template <typename T>
class GroupNorm final : public Module<T> {
 public:
  GroupNorm(std::string name, int channels, int groups = 0, double eps = 1e-5)
      : name_(std::move(name)), channels_(channels), eps_(T(eps)) {
    groups_ = groups > 0 ? groups : std::min(8, channels);
    MCD_CHECK(channels_ % groups_ == 0, "groupnorm ", name_, ": ", channels,
              " channels not divisible by ", groups_, " groups");
    gamma_.resize({channels_});
    beta_.resize({channels_});
  }

  void init(SeededRng&) override {
    gamma_.value.fill(T(1));
    beta_.value.zero();
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    MCD_CHECK(x.ndim() == 4 && x.dim(1) == channels_, "groupnorm ", name_,
              ": shape mismatch");
    const int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const int64_t cpg = channels_ / groups_;
    const int64_t gsize = cpg * h * w;

    Tensor<T> y(x.shape());
    xhat_ = Tensor<T>(x.shape());
    invstd_ = Tensor<T>({n, groups_});

    for (int64_t i = 0; i < n; ++i) {
      for (int64_t g = 0; g < groups_; ++g) {
        const T* src = x.data() + (i * channels_ + g * cpg) * h * w;
        T mean = T(0);
        for (int64_t j = 0; j < gsize; ++j) mean += src[j];
        mean /= T(gsize);
        T var = T(0);
        for (int64_t j = 0; j < gsize; ++j) {
          const T d = src[j] - mean;
          var += d * d;
        }
        var /= T(gsize);
        const T inv = T(1) / std::sqrt(var + eps_);
        invstd_.at2(i, g) = inv;
        T* xh = xhat_.data() + (i * channels_ + g * cpg) * h * w;
        T* dst = y.data() + (i * channels_ + g * cpg) * h * w;
        for (int64_t c = 0; c < cpg; ++c) {
          const T gam = gamma_.value[g * cpg + c];
          const T bet = beta_.value[g * cpg + c];
          for (int64_t p = 0; p < h * w; ++p) {
            const T v = (src[c * h * w + p] - mean) * inv;
            xh[c * h * w + p] = v;
            dst[c * h * w + p] = gam * v + bet;
          }
        }
      }
    }
    if (!train) {
      xhat_ = Tensor<T>();
      invstd_ = Tensor<T>();
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    MCD_CHECK(xhat_.numel() > 0, "groupnorm ", name_, ": backward before forward");
    const int64_t n = dy.dim(0), h = dy.dim(2), w = dy.dim(3);
    const int64_t cpg = channels_ / groups_;
    const int64_t gsize = cpg * h * w;

    Tensor<T> dx(dy.shape());
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t g = 0; g < groups_; ++g) {
        const T inv = invstd_.at2(i, g);
        const T* dyp = dy.data() + (i * channels_ + g * cpg) * h * w;
        const T* xh = xhat_.data() + (i * channels_ + g * cpg) * h * w;
        T* dxp = dx.data() + (i * channels_ + g * cpg) * h * w;

        T sum_t = T(0), sum_tx = T(0);
        for (int64_t c = 0; c < cpg; ++c) {
          const T gam = gamma_.value[g * cpg + c];
          for (int64_t p = 0; p < h * w; ++p) {
            const T t = dyp[c * h * w + p] * gam;
            sum_t += t;
            sum_tx += t * xh[c * h * w + p];
          }
        }
        const T mean_t = sum_t / T(gsize);
        const T mean_tx = sum_tx / T(gsize);
        for (int64_t c = 0; c < cpg; ++c) {
          const T gam = gamma_.value[g * cpg + c];
          for (int64_t p = 0; p < h * w; ++p) {
            const T t = dyp[c * h * w + p] * gam;
            dxp[c * h * w + p] = inv * (t - mean_t - xh[c * h * w + p] * mean_tx);
          }
        }
        for (int64_t c = 0; c < cpg; ++c) {
          T dgam = T(0), dbet = T(0);
          for (int64_t p = 0; p < h * w; ++p) {
            dgam += dyp[c * h * w + p] * xh[c * h * w + p];
            dbet += dyp[c * h * w + p];
          }
          gamma_.grad[g * cpg + c] += dgam;
          beta_.grad[g * cpg + c] += dbet;
        }
      }
    }
    return dx;
  }

  void collect_params(const std::string& prefix,
                      std::vector<ParamRef<T>>& out) override {
    out.push_back({prefix + name_ + ".gamma", &gamma_});
    out.push_back({prefix + name_ + ".beta", &beta_});
  }

 private:
  std::string name_;
  int64_t channels_, groups_;
  T eps_;
  Param<T> gamma_, beta_;
  Tensor<T> xhat_, invstd_;
};

// --- elementwise activations ----------------------------------------------

template <typename T>
class ReLU final : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    Tensor<T> y(x.shape());
    if (train) mask_.assign(size_t(x.numel()), 0);
    for (int64_t i = 0; i < x.numel(); ++i) {
      const bool pos = x[i] > T(0);
      y[i] = pos ? x[i] : T(0);
      if (train && pos) mask_[size_t(i)] = 1;
    }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dx(dy.shape());
    for (int64_t i = 0; i < dy.numel(); ++i)
      dx[i] = mask_[size_t(i)] ? dy[i] : T(0);
    return dx;
  }
  void collect_params(const std::string&, std::vector<ParamRef<T>>&) override {}
  void init(SeededRng&) override {}

 private:
  std::vector<char> mask_;
};

template <typename T>
class GELU final : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    Tensor<T> y(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) y[i] = gelu(x[i]);
    if (train) x_cache_ = x;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dx(dy.shape());
    for (int64_t i = 0; i < dy.numel(); ++i)
      dx[i] = dy[i] * gelu_grad(x_cache_[i]);
    return dx;
  }
  void collect_params(const std::string&, std::vector<ParamRef<T>>&) override {}
  void init(SeededRng&) override {}

  static T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865476)));
  }
  static T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865476)));
    const T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014327);
    return cdf + x * pdf;
  }

 private:
  Tensor<T> x_cache_;
};

// --- Linear ----------------------------------------------------------------

template <typename T>
class Linear final : public Module<T> {
 public:
  Linear(std::string name, int in_dim, int out_dim, bool bias = true)
      : name_(std::move(name)), in_(in_dim), out_(out_dim), has_bias_(bias) {
    w_.resize({out_, in_});
    if (has_bias_) b_.resize({out_});
  }

  void init(SeededRng& rng) override {
    init_trunc_normal(w_.value, 0.02, rng);
    if (has_bias_) b_.value.zero();
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    const int64_t rows = x.numel() / in_;
    MCD_CHECK(rows * in_ == x.numel(), "linear ", name_, ": last dim != ", in_);
    Tensor<T> y = make_out(x, rows);
    auto xm = as_matrix(x, rows, in_);
    auto ym = as_matrix(y, rows, out_);
    ym.noalias() = xm * as_matrix(w_.value, out_, in_).transpose();
    if (has_bias_) ym.rowwise() += as_vector(b_.value).transpose();
    if (train) x_cache_ = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    const int64_t rows = dy.numel() / out_;
    auto dym = as_matrix(dy, rows, out_);
    auto xm = as_matrix(x_cache_, rows, in_);
    as_matrix(w_.grad, out_, in_).noalias() += dym.transpose() * xm;
    if (has_bias_) as_vector(b_.grad) += dym.colwise().sum().transpose();
    Tensor<T> dx(x_cache_.shape());
    as_matrix(dx, rows, in_).noalias() = dym * as_matrix(w_.value, out_, in_);
    return dx;
  }

  void collect_params(const std::string& prefix,
                      std::vector<ParamRef<T>>& out) override {
    out.push_back({prefix + name_ + ".w", &w_});
    if (has_bias_) out.push_back({prefix + name_ + ".b", &b_});
  }

 private:
  Tensor<T> make_out(const Tensor<T>& x, int64_t rows) const {
    std::vector<int64_t> shape = x.shape();
    shape.back() = out_;
    (void)rows;
    return Tensor<T>(shape);
  }

  std::string name_;
  int64_t in_, out_;
  bool has_bias_;
  Param<T> w_, b_;
  Tensor<T> x_cache_;
};

// --- LayerNorm (over last dim) --------------------------------------------

template <typename T>
class LayerNorm final : public Module<T> {
 public:
  LayerNorm(std::string name, int dim, double eps = 1e-6)
      : name_(std::move(name)), dim_(dim), eps_(T(eps)) {
    gamma_.resize({dim_});
    beta_.resize({dim_});
  }

  void init(SeededRng&) override {
    gamma_.value.fill(T(1));
    beta_.value.zero();
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    const int64_t rows = x.numel() / dim_;
    MCD_CHECK(rows * dim_ == x.numel(), "layernorm ", name_, ": last dim != ", dim_);
    Tensor<T> y(x.shape());
    xhat_ = Tensor<T>(x.shape());
    invstd_ = Tensor<T>({rows});
    for (int64_t r = 0; r < rows; ++r) {
      const T* src = x.data() + r * dim_;
      T mean = T(0);
      for (int64_t j = 0; j < dim_; ++j) mean += src[j];
      mean /= T(dim_);
      T var = T(0);
      for (int64_t j = 0; j < dim_; ++j) {
        const T d = src[j] - mean;
        var += d * d;
      }
      var /= T(dim_);
      const T inv = T(1) / std::sqrt(var + eps_);
      invstd_[r] = inv;
      T* xh = xhat_.data() + r * dim_;
      T* dst = y.data() + r * dim_;
      for (int64_t j = 0; j < dim_; ++j) {
        xh[j] = (src[j] - mean) * inv;
        dst[j] = gamma_.value[j] * xh[j] + beta_.value[j];
      }
    }
    if (!train) {
      xhat_ = Tensor<T>();
      invstd_ = Tensor<T>();
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    const int64_t rows = dy.numel() / dim_;
    Tensor<T> dx(dy.shape());
    for (int64_t r = 0; r < rows; ++r) {
      const T* dyp = dy.data() + r * dim_;
      const T* xh = xhat_.data() + r * dim_;
      T* dxp = dx.data() + r * dim_;
      T sum_t = T(0), sum_tx = T(0);
      for (int64_t j = 0; j < dim_; ++j) {
        const T t = dyp[j] * gamma_.value[j];
        sum_t += t;
        sum_tx += t * xh[j];
        gamma_.grad[j] += dyp[j] * xh[j];
        beta_.grad[j] += dyp[j];
      }
      const T mean_t = sum_t / T(dim_);
      const T mean_tx = sum_tx / T(dim_);
      const T inv = invstd_[r];
      for (int64_t j = 0; j < dim_; ++j) {
        const T t = dyp[j] * gamma_.value[j];
        dxp[j] = inv * (t - mean_t - xh[j] * mean_tx);
      }
    }
    return dx;
  }

  void collect_params(const std::string& prefix,
                      std::vector<ParamRef<T>>& out) override {
    out.push_back({prefix + name_ + ".gamma", &gamma_});
    out.push_back({prefix + name_ + ".beta", &beta_});
  }

 private:
  std::string name_;
  int64_t dim_;
  T eps_;
  Param<T> gamma_, beta_;
  Tensor<T> xhat_, invstd_;
};

// --- row-wise L2 normalization --------------------------------------------

template <typename T>
class L2NormalizeRows final : public Module<T> {
 public:
  explicit L2NormalizeRows(int dim) : dim_(dim) {}

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    const int64_t rows = x.numel() / dim_;
    Tensor<T> y(x.shape());
    norms_ = Tensor<T>({rows});
    for (int64_t r = 0; r < rows; ++r) {
      const T* src = x.data() + r * dim_;
      T sq = T(0);
      for (int64_t j = 0; j < dim_; ++j) sq += src[j] * src[j];
      const T n = std::max(std::sqrt(sq), T(1e-12));
      norms_[r] = n;
      for (int64_t j = 0; j < dim_; ++j) y.data()[r * dim_ + j] = src[j] / n;
    }
    if (train) y_cache_ = y;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    const int64_t rows = dy.numel() / dim_;
    Tensor<T> dx(dy.shape());
    for (int64_t r = 0; r < rows; ++r) {
      const T* dyp = dy.data() + r * dim_;
      const T* yp = y_cache_.data() + r * dim_;
      T dot = T(0);
      for (int64_t j = 0; j < dim_; ++j) dot += dyp[j] * yp[j];
      for (int64_t j = 0; j < dim_; ++j)
        dx.data()[r * dim_ + j] = (dyp[j] - yp[j] * dot) / norms_[r];
    }
    return dx;
  }

  void collect_params(const std::string&, std::vector<ParamRef<T>>&) override {}
  void init(SeededRng&) override {}

 private:
  int64_t dim_;
  Tensor<T> y_cache_, norms_;
};

// --- weight-normalized linear (unit-norm rows, scale frozen at 1) ----------

template <typename T>
class WeightNormLinear final : public Module<T> {
 public:
  WeightNormLinear(std::string name, int in_dim, int out_dim)
      : name_(std::move(name)), in_(in_dim), out_(out_dim) {
    v_.resize({out_, in_});
  }

  void init(SeededRng& rng) override { init_trunc_normal(v_.value, 0.02, rng); }

  // Effective weight rows v_k / ||v_k||; always unit norm.
  Tensor<T> effective_rows() const {
    Tensor<T> w({out_, in_});
    for (int64_t k = 0; k < out_; ++k) {
      const T* v = v_.value.data() + k * in_;
      T sq = T(0);
      for (int64_t j = 0; j < in_; ++j) sq += v[j] * v[j];
      const T n = std::max(std::sqrt(sq), T(1e-12));
      for (int64_t j = 0; j < in_; ++j) w.data()[k * in_ + j] = v[j] / n;
    }
    return w;
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    const int64_t rows = x.numel() / in_;
    what_ = effective_rows();
    norms_ = Tensor<T>({out_});
    for (int64_t k = 0; k < out_; ++k) {
      const T* v = v_.value.data() + k * in_;
      T sq = T(0);
      for (int64_t j = 0; j < in_; ++j) sq += v[j] * v[j];
      norms_[k] = std::max(std::sqrt(sq), T(1e-12));
    }
    std::vector<int64_t> shape = x.shape();
    shape.back() = out_;
    Tensor<T> y(shape);
    as_matrix(y, rows, out_).noalias() =
        as_matrix(x, rows, in_) * as_matrix(what_, out_, in_).transpose();
    if (train) x_cache_ = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    const int64_t rows = dy.numel() / out_;
    auto dym = as_matrix(dy, rows, out_);
    auto xm = as_matrix(x_cache_, rows, in_);
    EigenRowMat<T> g = dym.transpose() * xm;  // (out, in)
    for (int64_t k = 0; k < out_; ++k) {
      const T* wk = what_.data() + k * in_;
      T dot = T(0);
      for (int64_t j = 0; j < in_; ++j) dot += g(k, j) * wk[j];
      for (int64_t j = 0; j < in_; ++j)
        v_.grad[k * in_ + j] += (g(k, j) - dot * wk[j]) / norms_[k];
    }
    Tensor<T> dx(x_cache_.shape());
    as_matrix(dx, rows, in_).noalias() = dym * as_matrix(what_, out_, in_);
    return dx;
  }

  void collect_params(const std::string& prefix,
                      std::vector<ParamRef<T>>& out) override {
    out.push_back({prefix + name_ + ".v", &v_});
  }

 private:
  std::string name_;
  int64_t in_, out_;
  Param<T> v_;
  Tensor<T> x_cache_, what_, norms_;
};

// --- global average pooling ------------------------------------------------

template <typename T>
class GlobalAvgPool final : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    MCD_CHECK(x.ndim() == 4, "gap: expected 4-d input");
    in_shape_ = x.shape();
    const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> y({n, c});
    for (int64_t i = 0; i < n * c; ++i) {
      const T* src = x.data() + i * hw;
      T acc = T(0);
      for (int64_t p = 0; p < hw; ++p) acc += src[p];
      y[i] = acc / T(hw);
    }
    (void)train;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) override {
    const int64_t n = in_shape_[0], c = in_shape_[1],
                  hw = in_shape_[2] * in_shape_[3];
    Tensor<T> dx(in_shape_);
    for (int64_t i = 0; i < n * c; ++i) {
      const T g = dy[i] / T(hw);
      T* dst = dx.data() + i * hw;
      for (int64_t p = 0; p < hw; ++p) dst[p] = g;
    }
    return dx;
  }
  void collect_params(const std::string&, std::vector<ParamRef<T>>&) override {}
  void init(SeededRng&) override {}

 private:
  std::vector<int64_t> in_shape_;
};

// --- bilinear upsampling to an explicit target size ------------------------

template <typename T>
class BilinearUpsample final : public Module<T> {
 public:
  void set_target(int h, int w) {
    target_h_ = h;
    target_w_ = w;
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    MCD_CHECK(x.ndim() == 4, "upsample: expected 4-d input");
    MCD_CHECK(target_h_ > 0 && target_w_ > 0, "upsample: target not set");
    in_shape_ = x.shape();
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    build_taps(h, w);
    Tensor<T> y({n, c, target_h_, target_w_});
    for (int64_t i = 0; i < n * c; ++i) {
      const T* src = x.data() + i * h * w;
      T* dst = y.data() + i * target_h_ * target_w_;
      for (int64_t oy = 0; oy < target_h_; ++oy) {
        const auto& ty = taps_y_[size_t(oy)];
        for (int64_t ox = 0; ox < target_w_; ++ox) {
          const auto& tx = taps_x_[size_t(ox)];
          dst[oy * target_w_ + ox] =
              ty.w0 * (tx.w0 * src[ty.i0 * w + tx.i0] + tx.w1 * src[ty.i0 * w + tx.i1]) +
              ty.w1 * (tx.w0 * src[ty.i1 * w + tx.i0] + tx.w1 * src[ty.i1 * w + tx.i1]);
        }
      }
    }
    (void)train;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    const int64_t n = in_shape_[0], c = in_shape_[1], h = in_shape_[2],
                  w = in_shape_[3];
    Tensor<T> dx(in_shape_);
    for (int64_t i = 0; i < n * c; ++i) {
      const T* g = dy.data() + i * target_h_ * target_w_;
      T* dst = dx.data() + i * h * w;
      for (int64_t oy = 0; oy < target_h_; ++oy) {
        const auto& ty = taps_y_[size_t(oy)];
        for (int64_t ox = 0; ox < target_w_; ++ox) {
          const auto& tx = taps_x_[size_t(ox)];
          const T v = g[oy * target_w_ + ox];
          dst[ty.i0 * w + tx.i0] += ty.w0 * tx.w0 * v;
          dst[ty.i0 * w + tx.i1] += ty.w0 * tx.w1 * v;
          dst[ty.i1 * w + tx.i0] += ty.w1 * tx.w0 * v;
          dst[ty.i1 * w + tx.i1] += ty.w1 * tx.w1 * v;
        }
      }
    }
    return dx;
  }

  void collect_params(const std::string&, std::vector<ParamRef<T>>&) override {}
  void init(SeededRng&) override {}

 private:
  struct Tap {
    int64_t i0, i1;
    T w0, w1;
  };

  void build_taps(int64_t src_h, int64_t src_w) {
    taps_y_ = make_taps(src_h, target_h_);
    taps_x_ = make_taps(src_w, target_w_);
  }

  static std::vector<Tap> make_taps(int64_t src, int64_t dst) {
    std::vector<Tap> taps(static_cast<size_t>(dst));
    const double scale = double(src) / double(dst);
    for (int64_t o = 0; o < dst; ++o) {
      double s = (double(o) + 0.5) * scale - 0.5;
      s = std::min(std::max(s, 0.0), double(src - 1));
      const int64_t i0 = int64_t(std::floor(s));
      const int64_t i1 = std::min(i0 + 1, src - 1);
      const T f = T(s - double(i0));
      taps[size_t(o)] = {i0, i1, T(1) - f, f};
    }
    return taps;
  }

  int64_t target_h_ = 0, target_w_ = 0;
  std::vector<int64_t> in_shape_;
  std::vector<Tap> taps_y_, taps_x_;
};

// --- sequential container --------------------------------------------------

template <typename T>
class Sequential final : public Module<T> {
 public:
  explicit Sequential(std::string name = "") : name_(std::move(name)) {}

  template <typename M, typename... Args>
  M* add(Args&&... args) {
    auto m = std::make_unique<M>(std::forward<Args>(args)...);
    M* ptr = m.get();
    layers_.push_back(std::move(m));
    return ptr;
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    Tensor<T> cur = x;
    for (auto& l : layers_) cur = l->forward(cur, train);
    return cur;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> cur = dy;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it)
      cur = (*it)->backward(cur);
    return cur;
  }

  void collect_params(const std::string& prefix,
                      std::vector<ParamRef<T>>& out) override {
    const std::string p = name_.empty() ? prefix : prefix + name_ + ".";
    for (auto& l : layers_) l->collect_params(p, out);
  }

  void init(SeededRng& rng) override {
    for (auto& l : layers_) l->init(rng);
  }

 private:
  std::string name_;
  std::vector<std::unique_ptr<Module<T>>> layers_;
};

// --- gradient utilities ----------------------------------------------------

template <typename T>
void zero_grads(const std::vector<ParamRef<T>>& params) {
  for (const auto& p : params) p.param->grad.zero();
}

template <typename T>
int64_t total_param_count(const std::vector<ParamRef<T>>& params) {
  int64_t n = 0;
  for (const auto& p : params) n += p.param->value.numel();
  return n;
}

}  // namespace mcd
