#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mcd/nn.hpp"

namespace mcd {

// Multi-head self-attention over token tensors shaped (N, L, D).
template <typename T>
class MultiHeadSelfAttention final : public Module<T> {
 public:
  MultiHeadSelfAttention(std::string name, int dim, int heads)
      : name_(std::move(name)),
        dim_(dim),
        heads_(heads),
        head_dim_(dim / heads),
        qkv_(name_ + ".qkv", dim, 3 * dim, true),
        proj_(name_ + ".proj", dim, dim, true) {
    MCD_CHECK(dim % heads == 0, "attention ", name_, ": dim ", dim,
              " not divisible by ", heads, " heads");
  }

  void init(SeededRng& rng) override {
    qkv_.init(rng);
    proj_.init(rng);
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    MCD_CHECK(x.ndim() == 3 && x.dim(2) == dim_, "attention ", name_,
              ": expected (N,L,", dim_, ")");
    const int64_t n = x.dim(0), l = x.dim(1);
    n_ = n;
    l_ = l;
    Tensor<T> qkv = qkv_.forward(x, train);

    q_ = Tensor<T>({n, heads_, l, head_dim_});
    k_ = Tensor<T>({n, heads_, l, head_dim_});
    v_ = Tensor<T>({n, heads_, l, head_dim_});
    split_heads(qkv);

    attn_ = Tensor<T>({n, heads_, l, l});
    Tensor<T> ctx({n, heads_, l, head_dim_});
    const T scale = T(1) / std::sqrt(T(head_dim_));
    for (int64_t i = 0; i < n * heads_; ++i) {
      ConstMatMap<T> qm(q_.data() + i * l * head_dim_, l, head_dim_);
      ConstMatMap<T> km(k_.data() + i * l * head_dim_, l, head_dim_);
      ConstMatMap<T> vm(v_.data() + i * l * head_dim_, l, head_dim_);
      MatMap<T> am(attn_.data() + i * l * l, l, l);
      am.noalias() = qm * km.transpose() * scale;
      softmax_rows(attn_.data() + i * l * l, l, l);
      MatMap<T> cm(ctx.data() + i * l * head_dim_, l, head_dim_);
      cm.noalias() = am * vm;
    }

    Tensor<T> merged({n, l, dim_});
    merge_heads(ctx, merged);
    Tensor<T> out = proj_.forward(merged, train);
    if (!train) {
      q_ = k_ = v_ = attn_ = Tensor<T>();
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    const int64_t n = n_, l = l_;
    Tensor<T> dmerged = proj_.backward(dy);
    Tensor<T> dctx({n, heads_, l, head_dim_});
    unmerge_heads(dmerged, dctx);

    Tensor<T> dq({n, heads_, l, head_dim_});
    Tensor<T> dk({n, heads_, l, head_dim_});
    Tensor<T> dv({n, heads_, l, head_dim_});
    EigenRowMat<T> da(l, l), ds(l, l);
    const T scale = T(1) / std::sqrt(T(head_dim_));
    for (int64_t i = 0; i < n * heads_; ++i) {
      ConstMatMap<T> qm(q_.data() + i * l * head_dim_, l, head_dim_);
      ConstMatMap<T> km(k_.data() + i * l * head_dim_, l, head_dim_);
      ConstMatMap<T> vm(v_.data() + i * l * head_dim_, l, head_dim_);
      ConstMatMap<T> am(attn_.data() + i * l * l, l, l);
      ConstMatMap<T> dcm(dctx.data() + i * l * head_dim_, l, head_dim_);

      da.noalias() = dcm * vm.transpose();
      MatMap<T>(dv.data() + i * l * head_dim_, l, head_dim_).noalias() =
          am.transpose() * dcm;
      // softmax backward per row: ds = (da - rowdot(da, a)) .* a
      for (int64_t r = 0; r < l; ++r) {
        T dot = T(0);
        for (int64_t c2 = 0; c2 < l; ++c2) dot += da(r, c2) * am(r, c2);
        for (int64_t c2 = 0; c2 < l; ++c2)
          ds(r, c2) = (da(r, c2) - dot) * am(r, c2);
      }
      MatMap<T>(dq.data() + i * l * head_dim_, l, head_dim_).noalias() =
          ds * km * scale;
      MatMap<T>(dk.data() + i * l * head_dim_, l, head_dim_).noalias() =
          ds.transpose() * qm * scale;
    }

    Tensor<T> dqkv({n, l, 3 * dim_});
    join_heads(dq, dk, dv, dqkv);
    return qkv_.backward(dqkv);
  }

  void collect_params(const std::string& prefix,
                      std::vector<ParamRef<T>>& out) override {
    qkv_.collect_params(prefix, out);
    proj_.collect_params(prefix, out);
  }

 private:
  static void softmax_rows(T* data, int64_t rows, int64_t cols) {
    for (int64_t r = 0; r < rows; ++r) {
      T* row = data + r * cols;
      T m = row[0];
      for (int64_t c = 1; c < cols; ++c) m = std::max(m, row[c]);
      T sum = T(0);
      for (int64_t c = 0; c < cols; ++c) {
        row[c] = std::exp(row[c] - m);
        sum += row[c];
      }
      for (int64_t c = 0; c < cols; ++c) row[c] /= sum;
    }
  }

  void split_heads(const Tensor<T>& qkv) {
    for (int64_t i = 0; i < n_; ++i)
      for (int64_t t = 0; t < l_; ++t) {
        const T* src = qkv.data() + (i * l_ + t) * 3 * dim_;
        for (int64_t h = 0; h < heads_; ++h) {
          T* qd = q_.data() + ((i * heads_ + h) * l_ + t) * head_dim_;
          T* kd = k_.data() + ((i * heads_ + h) * l_ + t) * head_dim_;
          T* vd = v_.data() + ((i * heads_ + h) * l_ + t) * head_dim_;
          for (int64_t d = 0; d < head_dim_; ++d) {
            qd[d] = src[h * head_dim_ + d];
            kd[d] = src[dim_ + h * head_dim_ + d];
            vd[d] = src[2 * dim_ + h * head_dim_ + d];
          }
        }
      }
  }

  void merge_heads(const Tensor<T>& ctx, Tensor<T>& out) const {
    for (int64_t i = 0; i < n_; ++i)
      for (int64_t t = 0; t < l_; ++t) {
        T* dst = out.data() + (i * l_ + t) * dim_;
        for (int64_t h = 0; h < heads_; ++h) {
          const T* src = ctx.data() + ((i * heads_ + h) * l_ + t) * head_dim_;
          for (int64_t d = 0; d < head_dim_; ++d) dst[h * head_dim_ + d] = src[d];
        }
      }
  }

  void unmerge_heads(const Tensor<T>& dmerged, Tensor<T>& dctx) const {
    for (int64_t i = 0; i < n_; ++i)
      for (int64_t t = 0; t < l_; ++t) {
        const T* src = dmerged.data() + (i * l_ + t) * dim_;
        for (int64_t h = 0; h < heads_; ++h) {
          T* dst = dctx.data() + ((i * heads_ + h) * l_ + t) * head_dim_;
          for (int64_t d = 0; d < head_dim_; ++d) dst[d] = src[h * head_dim_ + d];
        }
      }
  }

  void join_heads(const Tensor<T>& dq, const Tensor<T>& dk, const Tensor<T>& dv,
                  Tensor<T>& dqkv) const {
    for (int64_t i = 0; i < n_; ++i)
      for (int64_t t = 0; t < l_; ++t) {
        T* dst = dqkv.data() + (i * l_ + t) * 3 * dim_;
        for (int64_t h = 0; h < heads_; ++h) {
          const T* qs = dq.data() + ((i * heads_ + h) * l_ + t) * head_dim_;
          const T* ks = dk.data() + ((i * heads_ + h) * l_ + t) * head_dim_;
          const T* vs = dv.data() + ((i * heads_ + h) * l_ + t) * head_dim_;
          for (int64_t d = 0; d < head_dim_; ++d) {
            dst[h * head_dim_ + d] = qs[d];
            dst[dim_ + h * head_dim_ + d] = ks[d];
            dst[2 * dim_ + h * head_dim_ + d] = vs[d];
          }
        }
      }
  }

  std::string name_;
  int64_t dim_, heads_, head_dim_;
  Linear<T> qkv_, proj_;
  int64_t n_ = 0, l_ = 0;
  Tensor<T> q_, k_, v_, attn_;
};

// Pre-norm transformer block: x + attn(ln1(x)), then + mlp(ln2(.)).
template <typename T>
class TransformerBlock final : public Module<T> {
 public:
  TransformerBlock(std::string name, int dim, int heads, int mlp_ratio = 4)
      : name_(std::move(name)),
        ln1_(name_ + ".ln1", dim),
        attn_(name_ + ".attn", dim, heads),
        ln2_(name_ + ".ln2", dim),
        fc1_(name_ + ".fc1", dim, dim * mlp_ratio, true),
        fc2_(name_ + ".fc2", dim * mlp_ratio, dim, true) {}

  void init(SeededRng& rng) override {
    ln1_.init(rng);
    attn_.init(rng);
    ln2_.init(rng);
    fc1_.init(rng);
    fc2_.init(rng);
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    Tensor<T> a = attn_.forward(ln1_.forward(x, train), train);
    Tensor<T> x1(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) x1[i] = x[i] + a[i];
    Tensor<T> m =
        fc2_.forward(act_.forward(fc1_.forward(ln2_.forward(x1, train), train), train), train);
    Tensor<T> y(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) y[i] = x1[i] + m[i];
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dm = ln2_.backward(fc1_.backward(act_.backward(fc2_.backward(dy))));
    Tensor<T> dx1(dy.shape());
    for (int64_t i = 0; i < dy.numel(); ++i) dx1[i] = dy[i] + dm[i];
    Tensor<T> da = ln1_.backward(attn_.backward(dx1));
    Tensor<T> dx(dy.shape());
    for (int64_t i = 0; i < dy.numel(); ++i) dx[i] = dx1[i] + da[i];
    return dx;
  }

  void collect_params(const std::string& prefix,
                      std::vector<ParamRef<T>>& out) override {
    ln1_.collect_params(prefix, out);
    attn_.collect_params(prefix, out);
    ln2_.collect_params(prefix, out);
    fc1_.collect_params(prefix, out);
    fc2_.collect_params(prefix, out);
  }

 private:
  std::string name_;
  LayerNorm<T> ln1_;
  MultiHeadSelfAttention<T> attn_;
  LayerNorm<T> ln2_;
  Linear<T> fc1_, fc2_;
  GELU<T> act_;
};

}  // namespace mcd
