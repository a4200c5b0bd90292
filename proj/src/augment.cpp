#include "mcd/augment.hpp"

#include <algorithm>
#include <cmath>

namespace mcd {

namespace {

// Substream keys: per-view geometry and color draws are independent streams
// so crop planning can be replayed without materializing pixels.
constexpr uint64_t kGeomStream = 0;
constexpr uint64_t kColorStream = 1;
constexpr uint64_t kSelectStream = 1000;

}  // namespace

void CropPlan::check_valid() const {
  MCD_CHECK(w >= 1 && h >= 1, "degenerate crop ", w, "x", h);
  MCD_CHECK(x >= 0 && y >= 0 && x + w <= src_w && y + h <= src_h,
            "crop region outside source");
  const double f = area_fraction();
  MCD_CHECK(f >= scale_lo - 1e-12 && f <= scale_hi + 1e-12,
            "area fraction ", f, " outside [", scale_lo, ", ", scale_hi, "]");
  MCD_CHECK(output_size >= 1, "bad output size");
}

void JitterStrengths::validate() const {
  MCD_CHECK(brightness >= 0 && brightness <= 1, "brightness strength ", brightness);
  MCD_CHECK(contrast >= 0 && contrast <= 1, "contrast strength ", contrast);
  MCD_CHECK(saturation >= 0 && saturation <= 1, "saturation strength ", saturation);
  MCD_CHECK(hue >= 0 && hue <= 0.5, "hue strength ", hue, " (max 0.5)");
}

void AugmentRecipe::validate() const {
  jitter.validate();
  MCD_CHECK(jitter_prob >= 0 && jitter_prob <= 1, "jitter_prob ", jitter_prob);
  MCD_CHECK(grayscale_prob >= 0 && grayscale_prob <= 1, "grayscale_prob ", grayscale_prob);
  MCD_CHECK(blur_prob >= 0 && blur_prob <= 1, "blur_prob ", blur_prob);
  MCD_CHECK(blur_sigma_lo > 0 && blur_sigma_lo <= blur_sigma_hi,
            "blur sigma range (", blur_sigma_lo, ", ", blur_sigma_hi, ")");
}

ViewSetConfig::ViewSetConfig() {
  global_recipe_first.grayscale_prob = 0.0;
  global_recipe_first.blur_prob = 1.0;
  global_recipe_second.grayscale_prob = 0.0;
  global_recipe_second.blur_prob = 0.1;
  local_recipe.grayscale_prob = 0.2;
  local_recipe.blur_prob = 0.5;
}

void ViewSetConfig::validate() const {
  MCD_CHECK(global_size >= 1, "global_size ", global_size);
  MCD_CHECK(!local_sizes.empty(), "no local sizes configured");
  for (int s : local_sizes) MCD_CHECK(s >= 1, "local size ", s);
  MCD_CHECK(global_scale_lo > 0 && global_scale_lo <= global_scale_hi &&
                global_scale_hi <= 1.0,
            "global scale range");
  MCD_CHECK(local_scale_lo > 0 && local_scale_lo <= local_scale_hi &&
                local_scale_hi <= 1.0,
            "local scale range");
  MCD_CHECK(tp_num_globals >= 2, "tp_num_globals ", tp_num_globals);
  global_recipe_first.validate();
  global_recipe_second.validate();
  local_recipe.validate();
}

ViewSetConfig ViewSetConfig::baseline_from(ViewSetConfig cfg, int fixed_local_size) {
  for (int& s : cfg.local_sizes) s = fixed_local_size;
  return cfg;
}

CropPlan plan_random_resized_crop(int src_h, int src_w, double scale_lo,
                                  double scale_hi, int output_size,
                                  SeededRng& rng) {
  MCD_CHECK(src_h >= 1 && src_w >= 1, "empty source ", src_h, "x", src_w);
  MCD_CHECK(scale_lo <= scale_hi && scale_lo >= 0 && scale_hi <= 1.0,
            "scale range (", scale_lo, ", ", scale_hi, ")");
  const double src_area = double(src_w) * double(src_h);
  MCD_CHECK(scale_lo * src_area >= 1.0,
            "degenerate scale range: smallest region below one pixel");
  MCD_CHECK(output_size >= 1, "output_size ", output_size);

  CropPlan plan;
  plan.src_w = src_w;
  plan.src_h = src_h;
  plan.output_size = output_size;
  plan.scale_lo = scale_lo;
  plan.scale_hi = scale_hi;

  constexpr double kLogAspectLo = -0.2876820724517809;  // log(3/4)
  constexpr double kLogAspectHi = 0.28768207245178085;  // log(4/3)

  for (int attempt = 0; attempt < 10; ++attempt) {
    const double area = rng.uniform(scale_lo, scale_hi) * src_area;
    const double aspect = std::exp(rng.uniform(kLogAspectLo, kLogAspectHi));
    const int w = int(std::lround(std::sqrt(area * aspect)));
    const int h = int(std::lround(std::sqrt(area / aspect)));
    if (w < 1 || h < 1 || w > src_w || h > src_h) continue;
    const double frac = double(w) * double(h) / src_area;
    // Rounding can nudge the region outside the requested range; only accept
    // regions that still satisfy it.
    if (frac < scale_lo || frac > scale_hi) continue;
    plan.w = w;
    plan.h = h;
    plan.x = int(rng.randint(src_w - w + 1));
    plan.y = int(rng.randint(src_h - h + 1));
    return plan;
  }

  // Fallback: centered square with area as close to mid-range as feasible.
  const int max_side = std::min(src_w, src_h);
  const double mid = 0.5 * (scale_lo + scale_hi);
  int s0 = std::clamp(int(std::lround(std::sqrt(mid * src_area))), 1, max_side);
  for (int d = 0; d <= max_side; ++d) {
    for (int s : {s0 - d, s0 + d}) {
      if (s < 1 || s > max_side) continue;
      const double frac = double(s) * double(s) / src_area;
      if (frac < scale_lo || frac > scale_hi) continue;
      plan.w = s;
      plan.h = s;
      plan.x = (src_w - s) / 2;
      plan.y = (src_h - s) / 2;
      return plan;
    }
  }
  throw InvalidArgument(detail::format_msg(
      "no feasible crop region for source ", src_h, "x", src_w, " with scale (",
      scale_lo, ", ", scale_hi, ")"));
}

ImagePlane apply_crop(const ImagePlane& img, const CropPlan& plan) {
  MCD_CHECK(plan.src_w == img.width && plan.src_h == img.height,
            "plan was made for a different source size");
  plan.check_valid();
  return resample_bilinear(img, plan.x, plan.y, plan.w, plan.h,
                           plan.output_size, plan.output_size);
}

ImagePlane random_resized_crop(const ImagePlane& img, double scale_lo,
                               double scale_hi, int output_size, SeededRng& rng) {
  img.check_valid("random_resized_crop");
  CropPlan plan = plan_random_resized_crop(img.height, img.width, scale_lo,
                                           scale_hi, output_size, rng);
  return apply_crop(img, plan);
}

namespace {

void rgb_to_hsv(float r, float g, float b, float* h, float* s, float* v) {
  const float mx = std::max({r, g, b});
  const float mn = std::min({r, g, b});
  const float d = mx - mn;
  *v = mx;
  *s = mx > 0.f ? d / mx : 0.f;
  if (d <= 0.f) {
    *h = 0.f;
    return;
  }
  float hh;
  if (mx == r) {
    hh = (g - b) / d;
    if (hh < 0.f) hh += 6.f;
  } else if (mx == g) {
    hh = (b - r) / d + 2.f;
  } else {
    hh = (r - g) / d + 4.f;
  }
  *h = hh / 6.f;
}

void hsv_to_rgb(float h, float s, float v, float* r, float* g, float* b) {
  if (s <= 0.f) {
    *r = *g = *b = v;
    return;
  }
  float hh = h * 6.f;
  if (hh >= 6.f) hh -= 6.f;
  const int sector = std::min(5, int(hh));
  const float f = hh - float(sector);
  const float p = v * (1.f - s);
  const float q = v * (1.f - s * f);
  const float t = v * (1.f - s * (1.f - f));
  switch (sector) {
    case 0: *r = v; *g = t; *b = p; break;
    case 1: *r = q; *g = v; *b = p; break;
    case 2: *r = p; *g = v; *b = t; break;
    case 3: *r = p; *g = q; *b = v; break;
    case 4: *r = t; *g = p; *b = v; break;
    default: *r = v; *g = p; *b = q; break;
  }
}

float clamp01(float v) { return std::clamp(v, 0.f, 1.f); }

void apply_brightness(ImagePlane& img, float f) {
  for (float& v : img.data) v = clamp01(v * f);
}

void apply_contrast(ImagePlane& img, float f) {
  // Blend toward the mean luminance (mean value for non-RGB images).
  double mean = 0.0;
  if (img.channels == 3) {
    for (size_t i = 0; i < img.plane_size(); ++i) {
      mean += luminance(img.data[i], img.data[img.plane_size() + i],
                        img.data[2 * img.plane_size() + i]);
    }
    mean /= double(img.plane_size());
  } else {
    for (float v : img.data) mean += v;
    mean /= double(img.data.size());
  }
  const float m = float(mean);
  for (float& v : img.data) v = clamp01(m + (v - m) * f);
}

void apply_saturation(ImagePlane& img, float f) {
  const size_t n = img.plane_size();
  for (size_t i = 0; i < n; ++i) {
    const float l = luminance(img.data[i], img.data[n + i], img.data[2 * n + i]);
    img.data[i] = clamp01(l + (img.data[i] - l) * f);
    img.data[n + i] = clamp01(l + (img.data[n + i] - l) * f);
    img.data[2 * n + i] = clamp01(l + (img.data[2 * n + i] - l) * f);
  }
}

void apply_hue(ImagePlane& img, float delta) {
  const size_t n = img.plane_size();
  for (size_t i = 0; i < n; ++i) {
    float h, s, v;
    rgb_to_hsv(img.data[i], img.data[n + i], img.data[2 * n + i], &h, &s, &v);
    h += delta;
    h -= std::floor(h);
    float r, g, b;
    hsv_to_rgb(h, s, v, &r, &g, &b);
    img.data[i] = clamp01(r);
    img.data[n + i] = clamp01(g);
    img.data[2 * n + i] = clamp01(b);
  }
}

}  // namespace

ImagePlane color_jitter(const ImagePlane& img, const JitterStrengths& s,
                        SeededRng& rng) {
  img.check_valid("color_jitter");
  s.validate();
  ImagePlane out = img;
  if (s.all_zero()) return out;

  // Ops run in a seeded random order, as in the usual jitter transforms.
  std::array<int, 4> order = {0, 1, 2, 3};
  for (int i = 3; i > 0; --i) {
    std::swap(order[size_t(i)], order[size_t(rng.randint(i + 1))]);
  }

  for (int op : order) {
    switch (op) {
      case 0:
        if (s.brightness > 0) {
          const float f = float(rng.uniform(std::max(0.0, 1.0 - s.brightness),
                                            1.0 + s.brightness));
          if (f != 1.f) apply_brightness(out, f);
        }
        break;
      case 1:
        if (s.contrast > 0) {
          const float f = float(rng.uniform(std::max(0.0, 1.0 - s.contrast),
                                            1.0 + s.contrast));
          if (f != 1.f) apply_contrast(out, f);
        }
        break;
      case 2:
        if (s.saturation > 0 && out.channels == 3) {
          const float f = float(rng.uniform(std::max(0.0, 1.0 - s.saturation),
                                            1.0 + s.saturation));
          if (f != 1.f) apply_saturation(out, f);
        }
        break;
      default:
        if (s.hue > 0 && out.channels == 3) {
          const float d = float(rng.uniform(-s.hue, s.hue));
          if (d != 0.f) apply_hue(out, d);
        }
        break;
    }
  }
  return out;
}

ImagePlane to_grayscale(const ImagePlane& img, double prob, SeededRng& rng) {
  img.check_valid("to_grayscale");
  MCD_CHECK(img.channels == 3, "to_grayscale needs 3 channels, got ", img.channels);
  MCD_CHECK(prob >= 0 && prob <= 1, "probability ", prob);
  ImagePlane out = img;
  if (!rng.bernoulli(prob)) return out;
  const size_t n = out.plane_size();
  for (size_t i = 0; i < n; ++i) {
    const float l = luminance(out.data[i], out.data[n + i], out.data[2 * n + i]);
    out.data[i] = l;
    out.data[n + i] = l;
    out.data[2 * n + i] = l;
  }
  return out;
}

std::vector<double> gaussian_kernel(double sigma) {
  MCD_CHECK(sigma > 0, "sigma must be positive, got ", sigma);
  const int radius = int(std::ceil(3.0 * sigma));
  std::vector<double> k(size_t(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double w = std::exp(-double(i) * double(i) / (2.0 * sigma * sigma));
    k[size_t(i + radius)] = w;
    sum += w;
  }
  for (double& w : k) w /= sum;
  return k;
}

namespace {

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  int m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - m;
}

}  // namespace

ImagePlane gaussian_blur(const ImagePlane& img, double sigma) {
  img.check_valid("gaussian_blur");
  const std::vector<double> k = gaussian_kernel(sigma);
  const int radius = int(k.size() / 2);

  ImagePlane tmp(img.height, img.width, img.channels);
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          acc += k[size_t(i + radius)] *
                 double(img.at(c, y, reflect_index(x + i, img.width)));
        }
        tmp.at(c, y, x) = float(acc);
      }
    }
  }
  ImagePlane out(img.height, img.width, img.channels);
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          acc += k[size_t(i + radius)] *
                 double(tmp.at(c, reflect_index(y + i, img.height), x));
        }
        out.at(c, y, x) = clamp01(float(acc));
      }
    }
  }
  return out;
}

namespace {

ImagePlane apply_recipe(ImagePlane img, const AugmentRecipe& recipe,
                        SeededRng& rng) {
  if (rng.bernoulli(recipe.jitter_prob)) {
    img = color_jitter(img, recipe.jitter, rng);
  }
  if (recipe.grayscale_prob > 0 && img.channels == 3) {
    img = to_grayscale(img, recipe.grayscale_prob, rng);
  }
  if (rng.bernoulli(recipe.blur_prob)) {
    const double sigma = rng.uniform(recipe.blur_sigma_lo, recipe.blur_sigma_hi);
    img = gaussian_blur(img, sigma);
  }
  return img;
}

void check_source_size(int h, int w, const ViewSetConfig& cfg) {
  const int min_local = *std::min_element(cfg.local_sizes.begin(),
                                          cfg.local_sizes.end());
  MCD_CHECK(std::min(h, w) >= min_local, "source ", h, "x", w,
            " smaller than smallest configured crop ", min_local);
}

}  // namespace

ViewSetPlan plan_viewset_mc(int src_h, int src_w, const ViewSetConfig& cfg,
                            uint64_t seed) {
  cfg.validate();
  check_source_size(src_h, src_w, cfg);
  const SeededRng root(seed);
  ViewSetPlan plan;
  plan.seed = seed;
  for (int g = 0; g < 2; ++g) {
    SeededRng geom = root.derive(uint64_t(g), kGeomStream);
    plan.globals.push_back(
        {plan_random_resized_crop(src_h, src_w, cfg.global_scale_lo,
                                  cfg.global_scale_hi, cfg.global_size, geom),
         "global"});
  }
  for (size_t j = 0; j < cfg.local_sizes.size(); ++j) {
    SeededRng geom = root.derive(uint64_t(2 + j), kGeomStream);
    plan.locals.push_back(
        {plan_random_resized_crop(src_h, src_w, cfg.local_scale_lo,
                                  cfg.local_scale_hi, cfg.local_sizes[j], geom),
         "local"});
  }
  return plan;
}

ViewSet make_viewset_mc(const ImagePlane& img, const ViewSetConfig& cfg,
                        uint64_t seed) {
  img.check_valid("make_viewset_mc");
  const ViewSetPlan plan = plan_viewset_mc(img.height, img.width, cfg, seed);
  const SeededRng root(seed);

  ViewSet vs;
  vs.seed = seed;
  for (int g = 0; g < 2; ++g) {
    SeededRng color = root.derive(uint64_t(g), kColorStream);
    const AugmentRecipe& recipe =
        g == 0 ? cfg.global_recipe_first : cfg.global_recipe_second;
    vs.globals.push_back(
        apply_recipe(apply_crop(img, plan.globals[size_t(g)].crop), recipe, color));
    vs.recipe_tags.push_back("global");
  }
  for (size_t j = 0; j < cfg.local_sizes.size(); ++j) {
    SeededRng color = root.derive(uint64_t(2 + j), kColorStream);
    vs.locals.push_back(apply_recipe(apply_crop(img, plan.locals[j].crop),
                                     cfg.local_recipe, color));
    vs.recipe_tags.push_back("local");
  }
  return vs;
}

std::vector<int> select_temporal_views(int stack_size, int k, uint64_t seed) {
  MCD_CHECK(stack_size >= 3, "temporal stack needs >= 3 views, got ", stack_size);
  MCD_CHECK(k >= 2 && k <= stack_size, "cannot select ", k, " of ", stack_size);
  SeededRng sel = SeededRng(seed).derive(kSelectStream, 0);
  return sel.sample_without_replacement(stack_size, k);
}

ViewSet make_viewset_tp(const std::vector<ImagePlane>& stack,
                        const ViewSetConfig& cfg, uint64_t seed) {
  cfg.validate();
  MCD_CHECK(stack.size() >= 3, "temporal stack needs >= 3 views, got ",
            stack.size());
  for (const ImagePlane& v : stack) {
    v.check_valid("make_viewset_tp");
    MCD_CHECK(v.height == stack[0].height && v.width == stack[0].width &&
                  v.channels == stack[0].channels,
              "temporal stack views must share dimensions");
  }
  check_source_size(stack[0].height, stack[0].width, cfg);

  const int n_globals = cfg.tp_num_globals;
  const std::vector<int> sel =
      select_temporal_views(int(stack.size()), n_globals, seed);
  const SeededRng root(seed);

  ViewSet vs;
  vs.seed = seed;
  // Each selected view is color-augmented as a whole, then globally cropped.
  for (int g = 0; g < n_globals; ++g) {
    SeededRng color = root.derive(uint64_t(g), kColorStream);
    SeededRng geom = root.derive(uint64_t(g), kGeomStream);
    ImagePlane k_view = apply_recipe(stack[size_t(sel[size_t(g)])],
                                     cfg.local_recipe, color);
    CropPlan plan = plan_random_resized_crop(
        k_view.height, k_view.width, cfg.global_scale_lo, cfg.global_scale_hi,
        cfg.global_size, geom);
    vs.globals.push_back(apply_crop(k_view, plan));
    vs.recipe_tags.push_back("global");
  }
  // Locals come straight from the first selected view's raw pixels.
  const ImagePlane& t0 = stack[size_t(sel[0])];
  for (size_t j = 0; j < cfg.local_sizes.size(); ++j) {
    SeededRng geom = root.derive(uint64_t(size_t(n_globals) + j), kGeomStream);
    CropPlan plan = plan_random_resized_crop(
        t0.height, t0.width, cfg.local_scale_lo, cfg.local_scale_hi,
        cfg.local_sizes[j], geom);
    vs.locals.push_back(apply_crop(t0, plan));
    vs.recipe_tags.push_back("local");
  }
  return vs;
}

}  // namespace mcd
