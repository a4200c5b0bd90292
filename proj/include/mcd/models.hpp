#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mcd/attention.hpp"
#include "mcd/nn.hpp"

namespace mcd {

// --- specs -----------------------------------------------------------------

enum class BackboneFamily { kResidual, kWideResidual, kPatchTransformer };

inline std::string family_name(BackboneFamily f) {
  switch (f) {
    case BackboneFamily::kResidual: return "residual";
    case BackboneFamily::kWideResidual: return "wide-residual";
    case BackboneFamily::kPatchTransformer: return "patch-transformer";
  }
  return "?";
}

inline BackboneFamily family_from_name(const std::string& s) {
  if (s == "residual") return BackboneFamily::kResidual;
  if (s == "wide-residual") return BackboneFamily::kWideResidual;
  if (s == "patch-transformer") return BackboneFamily::kPatchTransformer;
  throw InvalidArgument("unknown backbone family: " + s);
}

struct BackboneSpec {
  BackboneFamily family = BackboneFamily::kResidual;
  // Convnet families.
  std::vector<int> stage_channels{16, 32, 64, 128};
  std::vector<int> depth_per_stage{2, 2, 2, 2};
  int widening_factor = 1;
  // Patch transformer.
  int patch_size = 8;
  int embed_dim = 96;
  int num_blocks = 4;
  int num_heads = 4;
  int native_size = 96;

  bool is_convnet() const { return family != BackboneFamily::kPatchTransformer; }

  int feature_dim() const {
    return is_convnet() ? stage_channels.back() : embed_dim;
  }

  // Minimum input side so every convnet stage keeps at least one pixel
  // (stem stride 2, then stage strides 1,2,...,2 give total stride
  // 2^num_stages).
  int min_input_size() const {
    return is_convnet() ? 1 << stage_channels.size() : patch_size;
  }

  std::vector<std::string> skip_tap_names() const {
    std::vector<std::string> names{"stem"};
    for (size_t i = 0; i < stage_channels.size(); ++i)
      names.push_back("stage" + std::to_string(i + 1));
    return names;
  }

  void validate() const {
    if (is_convnet()) {
      MCD_CHECK(!stage_channels.empty() &&
                    stage_channels.size() == depth_per_stage.size(),
                "backbone spec: stage_channels and depth_per_stage must be "
                "non-empty and equal length");
      for (int c : stage_channels)
        MCD_CHECK(c >= 4 && c % 4 == 0, "backbone spec: stage channels must be "
                  "positive multiples of 4, got ", c);
      for (int d : depth_per_stage)
        MCD_CHECK(d >= 1, "backbone spec: depth_per_stage entries must be >= 1");
      MCD_CHECK(widening_factor >= 1, "backbone spec: widening factor must be >= 1");
      if (family == BackboneFamily::kResidual)
        MCD_CHECK(widening_factor == 1,
                  "backbone spec: residual family requires widening factor 1");
    } else {
      MCD_CHECK(patch_size >= 1, "backbone spec: patch size must be >= 1");
      MCD_CHECK(embed_dim >= 1 && num_heads >= 1 && embed_dim % num_heads == 0,
                "backbone spec: embed dim must be divisible by head count");
      MCD_CHECK(num_blocks >= 1, "backbone spec: transformer needs >= 1 block");
      MCD_CHECK(native_size >= patch_size && native_size % patch_size == 0,
                "backbone spec: native size must be a positive multiple of "
                "patch size");
    }
  }

  static BackboneSpec tiny_residual() { return BackboneSpec{}; }

  static BackboneSpec tiny_wide_residual(int k) {
    BackboneSpec s;
    s.family = BackboneFamily::kWideResidual;
    s.widening_factor = k;
    return s;
  }

  static BackboneSpec tiny_transformer() {
    BackboneSpec s;
    s.family = BackboneFamily::kPatchTransformer;
    return s;
  }
};

struct ProjectionHeadSpec {
  int hidden_dim = 512;
  int bottleneck_dim = 64;
  int num_prototypes = 1024;
  int layers = 3;

  void validate() const {
    MCD_CHECK(hidden_dim >= 1 && bottleneck_dim >= 1, "head spec: dims must be >= 1");
    MCD_CHECK(num_prototypes >= 2, "head spec: need at least 2 prototypes");
    MCD_CHECK(layers == 3, "head spec: only the 3-layer MLP is supported");
  }
};

// Largest group count <= 8 that divides the channel count.
inline int norm_groups_for(int channels) {
  for (int g = std::min(8, channels); g >= 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

// --- bottleneck residual block ---------------------------------------------

// 1x1 reduce -> 3x3 (carries the stride) -> 1x1 expand, each group-normalized;
// inner width is out_ch/4 scaled by the widening factor, so k=1 gives the
// plain residual baseline and k=2 doubles the bottleneck channels.
template <typename T>
class BottleneckBlock final : public Module<T> {
 public:
  BottleneckBlock(std::string name, int in_ch, int out_ch, int stride, int k)
      : name_(std::move(name)),
        inner_(out_ch / 4 * k),
        conv1_(name_ + ".conv1", in_ch, inner_, 1, 1, 0),
        norm1_(name_ + ".norm1", inner_, norm_groups_for(inner_)),
        conv2_(name_ + ".conv2", inner_, inner_, 3, stride, 1),
        norm2_(name_ + ".norm2", inner_, norm_groups_for(inner_)),
        conv3_(name_ + ".conv3", inner_, out_ch, 1, 1, 0),
        norm3_(name_ + ".norm3", out_ch, norm_groups_for(out_ch)),
        has_proj_(stride != 1 || in_ch != out_ch) {
    if (has_proj_) {
      proj_ = std::make_unique<Conv2d<T>>(name_ + ".proj", in_ch, out_ch, 1,
                                          stride, 0);
      proj_norm_ = std::make_unique<GroupNorm<T>>(name_ + ".proj_norm", out_ch,
                                                  norm_groups_for(out_ch));
    }
  }

  void init(SeededRng& rng) override {
    conv1_.init(rng);
    norm1_.init(rng);
    conv2_.init(rng);
    norm2_.init(rng);
    conv3_.init(rng);
    norm3_.init(rng);
    if (has_proj_) {
      proj_->init(rng);
      proj_norm_->init(rng);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    Tensor<T> a = act1_.forward(norm1_.forward(conv1_.forward(x, train), train), train);
    a = act2_.forward(norm2_.forward(conv2_.forward(a, train), train), train);
    a = norm3_.forward(conv3_.forward(a, train), train);
    Tensor<T> s = has_proj_
                      ? proj_norm_->forward(proj_->forward(x, train), train)
                      : x;
    MCD_REQUIRE(a.same_shape(s), "residual block ", name_, ": branch shape mismatch");
    Tensor<T> y(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) y[i] = a[i] + s[i];
    return act3_.forward(y, train);
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dsum = act3_.backward(dy);
    Tensor<T> da = conv1_.backward(norm1_.backward(act1_.backward(
        conv2_.backward(norm2_.backward(act2_.backward(
            conv3_.backward(norm3_.backward(dsum))))))));
    Tensor<T> ds = has_proj_ ? proj_->backward(proj_norm_->backward(dsum)) : dsum;
    Tensor<T> dx(da.shape());
    for (int64_t i = 0; i < da.numel(); ++i) dx[i] = da[i] + ds[i];
    return dx;
  }

  void collect_params(const std::string& prefix,
                      std::vector<ParamRef<T>>& out) override {
    conv1_.collect_params(prefix, out);
    norm1_.collect_params(prefix, out);
    conv2_.collect_params(prefix, out);
    norm2_.collect_params(prefix, out);
    conv3_.collect_params(prefix, out);
    norm3_.collect_params(prefix, out);
    if (has_proj_) {
      proj_->collect_params(prefix, out);
      proj_norm_->collect_params(prefix, out);
    }
  }

 private:
  std::string name_;
  int inner_;
  Conv2d<T> conv1_;
  GroupNorm<T> norm1_;
  Conv2d<T> conv2_;
  GroupNorm<T> norm2_;
  Conv2d<T> conv3_;
  GroupNorm<T> norm3_;
  ReLU<T> act1_, act2_, act3_;
  bool has_proj_;
  std::unique_ptr<Conv2d<T>> proj_;
  std::unique_ptr<GroupNorm<T>> proj_norm_;
};

// --- convnet backbone -------------------------------------------------------

template <typename T>
struct SkipTap {
  std::string name;
  Tensor<T> map;
};

template <typename T>
class ConvNetBackbone {
 public:
  explicit ConvNetBackbone(const BackboneSpec& spec)
      : spec_(spec),
        stem_conv_("stem.conv", 3, spec.stage_channels[0], 3, 2, 1),
        stem_norm_("stem.norm", spec.stage_channels[0],
                   norm_groups_for(spec.stage_channels[0])) {
    int in_ch = spec.stage_channels[0];
    const int k = spec.family == BackboneFamily::kWideResidual
                      ? spec.widening_factor
                      : 1;
    for (size_t s = 0; s < spec.stage_channels.size(); ++s) {
      const int out_ch = spec.stage_channels[s];
      const int stage_stride = s == 0 ? 1 : 2;
      std::vector<std::unique_ptr<BottleneckBlock<T>>> stage;
      for (int b = 0; b < spec.depth_per_stage[s]; ++b) {
        const std::string name = "stage" + std::to_string(s + 1) + ".block" +
                                 std::to_string(b + 1);
        stage.push_back(std::make_unique<BottleneckBlock<T>>(
            name, in_ch, out_ch, b == 0 ? stage_stride : 1, k));
        in_ch = out_ch;
      }
      stages_.push_back(std::move(stage));
    }
  }

  void init(SeededRng& rng) {
    stem_conv_.init(rng);
    stem_norm_.init(rng);
    for (auto& stage : stages_)
      for (auto& block : stage) block->init(rng);
  }

  Tensor<T> forward_features(const Tensor<T>& x, bool train,
                             std::vector<SkipTap<T>>* taps = nullptr) {
    check_input(x);
    Tensor<T> cur = stem_act_.forward(
        stem_norm_.forward(stem_conv_.forward(x, train), train), train);
    if (taps) taps->push_back({"stem", cur});
    for (size_t s = 0; s < stages_.size(); ++s) {
      for (auto& block : stages_[s]) cur = block->forward(cur, train);
      if (taps) taps->push_back({"stage" + std::to_string(s + 1), cur});
    }
    return cur;
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) {
    return pool_.forward(forward_features(x, train), train);
  }

  Tensor<T> backward(const Tensor<T>& dfeat) {
    Tensor<T> cur = pool_.backward(dfeat);
    for (auto it = stages_.rbegin(); it != stages_.rend(); ++it)
      for (auto bit = it->rbegin(); bit != it->rend(); ++bit)
        cur = (*bit)->backward(cur);
    return stem_conv_.backward(stem_norm_.backward(stem_act_.backward(cur)));
  }

  void collect_params(const std::string& prefix,
                      std::vector<ParamRef<T>>& out) {
    stem_conv_.collect_params(prefix, out);
    stem_norm_.collect_params(prefix, out);
    for (auto& stage : stages_)
      for (auto& block : stage) block->collect_params(prefix, out);
  }

 private:
  void check_input(const Tensor<T>& x) const {
    MCD_CHECK(x.ndim() == 4 && x.dim(1) == 3,
              "backbone: expected (N,3,H,W) input");
    MCD_CHECK(std::min(x.dim(2), x.dim(3)) >= spec_.min_input_size(),
              "backbone: input ", x.dim(2), "x", x.dim(3),
              " below minimum side ", spec_.min_input_size());
  }

  BackboneSpec spec_;
  Conv2d<T> stem_conv_;
  GroupNorm<T> stem_norm_;
  ReLU<T> stem_act_;
  std::vector<std::vector<std::unique_ptr<BottleneckBlock<T>>>> stages_;
  GlobalAvgPool<T> pool_;
};

// --- patch transformer backbone ---------------------------------------------

template <typename T>
class ViTBackbone {
 public:
  explicit ViTBackbone(const BackboneSpec& spec)
      : spec_(spec),
        grid_native_(spec.native_size / spec.patch_size),
        patch_("patch", 3, spec.embed_dim, spec.patch_size, spec.patch_size, 0,
               true, ConvInit::kTruncNormal),
        final_norm_("norm", spec.embed_dim) {
    cls_.resize({1, spec.embed_dim});
    pos_.resize({1 + int64_t(grid_native_) * grid_native_, spec.embed_dim});
    for (int b = 0; b < spec.num_blocks; ++b)
      blocks_.push_back(std::make_unique<TransformerBlock<T>>(
          "block" + std::to_string(b + 1), spec.embed_dim, spec.num_heads));
  }

  void init(SeededRng& rng) {
    patch_.init(rng);
    init_trunc_normal(cls_.value, 0.02, rng);
    init_trunc_normal(pos_.value, 0.02, rng);
    for (auto& b : blocks_) b->init(rng);
    final_norm_.init(rng);
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) {
    MCD_CHECK(x.ndim() == 4 && x.dim(1) == 3, "backbone: expected (N,3,H,W)");
    const int64_t h = x.dim(2), w = x.dim(3);
    MCD_CHECK(h % spec_.patch_size == 0 && w % spec_.patch_size == 0,
              "transformer backbone: resolution ", h, "x", w,
              " not divisible by patch size ", spec_.patch_size);
    n_ = x.dim(0);
    gh_ = h / spec_.patch_size;
    gw_ = w / spec_.patch_size;
    const int64_t l = gh_ * gw_;
    const int64_t d = spec_.embed_dim;

    Tensor<T> pm = patch_.forward(x, train);  // (N, D, gh, gw)
    Tensor<T> tok({n_, l + 1, d});
    build_pos(gh_, gw_);
    for (int64_t i = 0; i < n_; ++i) {
      for (int64_t j = 0; j < d; ++j)
        tok.data()[(i * (l + 1)) * d + j] = cls_.value[j] + pos_.value[j];
      for (int64_t t = 0; t < l; ++t) {
        T* dst = tok.data() + (i * (l + 1) + 1 + t) * d;
        const T* pv = pos_grid_.data() + t * d;
        for (int64_t j = 0; j < d; ++j)
          dst[j] = pm.data()[(i * d + j) * l + t] + pv[j];
      }
    }
    Tensor<T> cur = tok;
    for (auto& b : blocks_) cur = b->forward(cur, train);
    cur = final_norm_.forward(cur, train);
    Tensor<T> feat({n_, d});
    for (int64_t i = 0; i < n_; ++i)
      for (int64_t j = 0; j < d; ++j)
        feat.at2(i, j) = cur.data()[(i * (l + 1)) * d + j];
    return feat;
  }

  Tensor<T> backward(const Tensor<T>& dfeat) {
    const int64_t l = gh_ * gw_, d = spec_.embed_dim;
    Tensor<T> dtok({n_, l + 1, d});
    for (int64_t i = 0; i < n_; ++i)
      for (int64_t j = 0; j < d; ++j)
        dtok.data()[(i * (l + 1)) * d + j] = dfeat.at2(i, j);
    Tensor<T> cur = final_norm_.backward(dtok);
    for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it)
      cur = (*it)->backward(cur);

    Tensor<T> dpm({n_, d, gh_, gw_});
    Tensor<T> dpos_grid({l, d});
    for (int64_t i = 0; i < n_; ++i) {
      const T* row0 = cur.data() + (i * (l + 1)) * d;
      for (int64_t j = 0; j < d; ++j) {
        cls_.grad[j] += row0[j];
        pos_.grad[j] += row0[j];
      }
      for (int64_t t = 0; t < l; ++t) {
        const T* src = cur.data() + (i * (l + 1) + 1 + t) * d;
        for (int64_t j = 0; j < d; ++j) {
          dpm.data()[(i * d + j) * l + t] = src[j];
          dpos_grid.data()[t * d + j] += src[j];
        }
      }
    }
    scatter_pos_grad(dpos_grid);
    return patch_.backward(dpm);
  }

  void collect_params(const std::string& prefix,
                      std::vector<ParamRef<T>>& out) {
    patch_.collect_params(prefix, out);
    out.push_back({prefix + "cls", &cls_});
    out.push_back({prefix + "pos", &pos_});
    for (auto& b : blocks_) b->collect_params(prefix, out);
    final_norm_.collect_params(prefix, out);
  }

  // Resampled position grid for a gh x gw patch layout (row per token).
  Tensor<T> interpolated_pos_grid(int64_t gh, int64_t gw) {
    build_pos(gh, gw);
    return pos_grid_;
  }

 private:
  struct CubicTaps {
    int64_t idx[4];
    T w[4];
  };

  // Keys cubic convolution kernel with a = -0.75 (reproduces constants
  // exactly, so a uniform grid stays uniform at any output size).
  static T cubic_weight(T t) {
    const T a = T(-0.75);
    t = std::abs(t);
    if (t <= T(1)) return ((a + T(2)) * t - (a + T(3))) * t * t + T(1);
    if (t < T(2)) return (((t - T(5)) * t + T(8)) * t - T(4)) * a;
    return T(0);
  }

  static std::vector<CubicTaps> make_taps(int64_t src, int64_t dst) {
    std::vector<CubicTaps> taps(static_cast<size_t>(dst));
    const double scale = double(src) / double(dst);
    for (int64_t o = 0; o < dst; ++o) {
      const double s = (double(o) + 0.5) * scale - 0.5;
      const int64_t base = int64_t(std::floor(s));
      CubicTaps ct;
      for (int m = 0; m < 4; ++m) {
        const int64_t i = base - 1 + m;
        ct.idx[m] = std::min(std::max(i, int64_t(0)), src - 1);
        ct.w[m] = cubic_weight(T(s - double(i)));
      }
      taps[size_t(o)] = ct;
    }
    return taps;
  }

  void build_pos(int64_t gh, int64_t gw) {
    const int64_t d = spec_.embed_dim;
    if (gh == grid_native_ && gw == grid_native_) {
      interp_ = false;
      pos_grid_ = Tensor<T>({gh * gw, d});
      std::copy(pos_.value.data() + d, pos_.value.data() + (1 + gh * gw) * d,
                pos_grid_.data());
      return;
    }
    interp_ = true;
    taps_y_ = make_taps(grid_native_, gh);
    taps_x_ = make_taps(grid_native_, gw);
    pos_grid_ = Tensor<T>({gh * gw, d});
    for (int64_t oy = 0; oy < gh; ++oy) {
      const auto& ty = taps_y_[size_t(oy)];
      for (int64_t ox = 0; ox < gw; ++ox) {
        const auto& tx = taps_x_[size_t(ox)];
        T* dst = pos_grid_.data() + (oy * gw + ox) * d;
        for (int64_t j = 0; j < d; ++j) dst[j] = T(0);
        for (int a = 0; a < 4; ++a)
          for (int b = 0; b < 4; ++b) {
            const T wgt = ty.w[a] * tx.w[b];
            const T* src =
                pos_.value.data() + (1 + ty.idx[a] * grid_native_ + tx.idx[b]) * d;
            for (int64_t j = 0; j < d; ++j) dst[j] += wgt * src[j];
          }
      }
    }
  }

  void scatter_pos_grad(const Tensor<T>& dpos_grid) {
    const int64_t d = spec_.embed_dim;
    if (!interp_) {
      for (int64_t t = 0; t < gh_ * gw_; ++t)
        for (int64_t j = 0; j < d; ++j)
          pos_.grad[(1 + t) * d + j] += dpos_grid.data()[t * d + j];
      return;
    }
    for (int64_t oy = 0; oy < gh_; ++oy) {
      const auto& ty = taps_y_[size_t(oy)];
      for (int64_t ox = 0; ox < gw_; ++ox) {
        const auto& tx = taps_x_[size_t(ox)];
        const T* src = dpos_grid.data() + (oy * gw_ + ox) * d;
        for (int a = 0; a < 4; ++a)
          for (int b = 0; b < 4; ++b) {
            const T wgt = ty.w[a] * tx.w[b];
            T* dst =
                pos_.grad.data() + (1 + ty.idx[a] * grid_native_ + tx.idx[b]) * d;
            for (int64_t j = 0; j < d; ++j) dst[j] += wgt * src[j];
          }
      }
    }
  }

  BackboneSpec spec_;
  int64_t grid_native_;
  Conv2d<T> patch_;
  Param<T> cls_, pos_;
  std::vector<std::unique_ptr<TransformerBlock<T>>> blocks_;
  LayerNorm<T> final_norm_;
  int64_t n_ = 0, gh_ = 0, gw_ = 0;
  bool interp_ = false;
  Tensor<T> pos_grid_;
  std::vector<CubicTaps> taps_y_, taps_x_;
};

// --- backbone facade --------------------------------------------------------

template <typename T>
class Backbone {
 public:
  explicit Backbone(const BackboneSpec& spec) : spec_(spec) {
    spec_.validate();
    if (spec_.is_convnet())
      conv_ = std::make_unique<ConvNetBackbone<T>>(spec_);
    else
      vit_ = std::make_unique<ViTBackbone<T>>(spec_);
  }

  const BackboneSpec& spec() const { return spec_; }

  void init(SeededRng& rng) {
    if (conv_) conv_->init(rng);
    if (vit_) vit_->init(rng);
  }

  // (N,3,H,W) -> (N, feature_dim)
  Tensor<T> forward(const Tensor<T>& x, bool train) {
    return conv_ ? conv_->forward(x, train) : vit_->forward(x, train);
  }

  Tensor<T> backward(const Tensor<T>& dfeat) {
    return conv_ ? conv_->backward(dfeat) : vit_->backward(dfeat);
  }

  // Named feature maps at the stem and each stage; convnet families only.
  std::vector<SkipTap<T>> extract_skips(const Tensor<T>& x) {
    if (!conv_)
      throw UnsupportedOperation(
          "extract_skips: not defined for the patch-transformer family");
    std::vector<SkipTap<T>> taps;
    conv_->forward_features(x, /*train=*/false, &taps);
    return taps;
  }

  std::vector<ParamRef<T>> params(const std::string& prefix = "backbone.") {
    std::vector<ParamRef<T>> out;
    if (conv_) conv_->collect_params(prefix, out);
    if (vit_) vit_->collect_params(prefix, out);
    return out;
  }

 private:
  BackboneSpec spec_;
  std::unique_ptr<ConvNetBackbone<T>> conv_;
  std::unique_ptr<ViTBackbone<T>> vit_;
};

// --- projection head --------------------------------------------------------

template <typename T>
class ProjectionHead {
 public:
  ProjectionHead(const ProjectionHeadSpec& spec, int feature_dim)
      : spec_(spec),
        fc1_("fc1", feature_dim, spec.hidden_dim, true),
        fc2_("fc2", spec.hidden_dim, spec.hidden_dim, true),
        fc3_("fc3", spec.hidden_dim, spec.bottleneck_dim, true),
        norm_(spec.bottleneck_dim),
        proto_("proto", spec.bottleneck_dim, spec.num_prototypes) {
    spec_.validate();
  }

  const ProjectionHeadSpec& spec() const { return spec_; }

  void init(SeededRng& rng) {
    fc1_.init(rng);
    fc2_.init(rng);
    fc3_.init(rng);
    proto_.init(rng);
  }

  // (N, feature_dim) -> (N, K) prototype logits.
  Tensor<T> forward(const Tensor<T>& features, bool train) {
    Tensor<T> h = act1_.forward(fc1_.forward(features, train), train);
    h = act2_.forward(fc2_.forward(h, train), train);
    h = norm_.forward(fc3_.forward(h, train), train);
    return proto_.forward(h, train);
  }

  // Unit-norm bottleneck vectors, exposed for contract checks.
  Tensor<T> forward_bottleneck(const Tensor<T>& features) {
    Tensor<T> h = act1_.forward(fc1_.forward(features, false), false);
    h = act2_.forward(fc2_.forward(h, false), false);
    return norm_.forward(fc3_.forward(h, false), false);
  }

  Tensor<T> prototype_rows() const { return proto_.effective_rows(); }

  Tensor<T> backward(const Tensor<T>& dlogits) {
    Tensor<T> d = norm_.backward(proto_.backward(dlogits));
    d = act2_.backward(fc3_.backward(d));
    return fc1_.backward(act1_.backward(fc2_.backward(d)));
  }

  std::vector<ParamRef<T>> params(const std::string& prefix = "head.") {
    std::vector<ParamRef<T>> out;
    fc1_.collect_params(prefix, out);
    fc2_.collect_params(prefix, out);
    fc3_.collect_params(prefix, out);
    proto_.collect_params(prefix, out);
    return out;
  }

 private:
  ProjectionHeadSpec spec_;
  Linear<T> fc1_, fc2_, fc3_;
  GELU<T> act1_, act2_;
  L2NormalizeRows<T> norm_;
  WeightNormLinear<T> proto_;
};

// Backbone plus projection head, the unit the distillation loop trains.
template <typename T>
class FullModel {
 public:
  FullModel(const BackboneSpec& bspec, const ProjectionHeadSpec& hspec)
      : backbone_(bspec), head_(hspec, bspec.feature_dim()) {}

  void init(SeededRng& rng) {
    backbone_.init(rng);
    head_.init(rng);
  }

  Backbone<T>& backbone() { return backbone_; }
  ProjectionHead<T>& head() { return head_; }

  Tensor<T> forward_logits(const Tensor<T>& images, bool train) {
    return head_.forward(backbone_.forward(images, train), train);
  }

  // Returns the image gradient (discarded by training, used by checks).
  Tensor<T> backward_from_logits(const Tensor<T>& dlogits) {
    return backbone_.backward(head_.backward(dlogits));
  }

  std::vector<ParamRef<T>> params() {
    std::vector<ParamRef<T>> out = backbone_.params("backbone.");
    auto head = head_.params("head.");
    out.insert(out.end(), head.begin(), head.end());
    return out;
  }

 private:
  Backbone<T> backbone_;
  ProjectionHead<T> head_;
};

}  // namespace mcd
