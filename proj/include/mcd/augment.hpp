#pragma once

#include <array>
#include <string>
#include <vector>

#include "mcd/image.hpp"
#include "mcd/rng.hpp"

namespace mcd {

// A sampled crop: region in source pixel coordinates plus the output size it
// resamples to. Accepted plans always satisfy
//   (w*h)/(src_w*src_h) in [scale_lo, scale_hi].
struct CropPlan {
  int x = 0, y = 0, w = 0, h = 0;
  int src_w = 0, src_h = 0;
  int output_size = 0;
  double scale_lo = 0.0, scale_hi = 1.0;

  double area_fraction() const {
    return double(w) * double(h) / (double(src_w) * double(src_h));
  }
  void check_valid() const;
};

struct JitterStrengths {
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.2;
  double hue = 0.1;
  void validate() const;
  bool all_zero() const {
    return brightness == 0 && contrast == 0 && saturation == 0 && hue == 0;
  }
};

// One branch's color-transform recipe.
struct AugmentRecipe {
  JitterStrengths jitter;
  double jitter_prob = 0.8;
  double grayscale_prob = 0.0;   // locals only in MC mode
  double blur_prob = 0.5;
  double blur_sigma_lo = 0.1;
  double blur_sigma_hi = 2.0;
  void validate() const;
};

// Crop geometry + per-branch recipes for one training instance.
struct ViewSetConfig {
  int global_size = 224;
  std::vector<int> local_sizes = {184, 164, 144, 124, 104, 84};
  double global_scale_lo = 0.32, global_scale_hi = 1.0;
  double local_scale_lo = 0.05, local_scale_hi = 0.32;
  AugmentRecipe global_recipe_first;    // blur always
  AugmentRecipe global_recipe_second;   // blur rarely
  AugmentRecipe local_recipe;           // jitter + grayscale + blur
  int tp_num_globals = 3;

  ViewSetConfig();
  void validate() const;

  // Baseline mode is the multi-crop pipeline with one fixed local size.
  static ViewSetConfig baseline_from(ViewSetConfig cfg, int fixed_local_size);
};

struct ViewPlan {
  CropPlan crop;
  std::string recipe_tag;  // "global" or "local"
};

// Crop geometry of a whole viewset, reproducible without touching pixels:
// plan_viewset_mc(h, w, cfg, seed) yields exactly the regions that
// make_viewset_mc(img, cfg, seed) samples.
struct ViewSetPlan {
  std::vector<ViewPlan> globals;
  std::vector<ViewPlan> locals;
  uint64_t seed = 0;
};

struct ViewSet {
  std::vector<ImagePlane> globals;
  std::vector<ImagePlane> locals;
  std::vector<std::string> recipe_tags;  // globals first, then locals
  uint64_t seed = 0;

  int num_views() const { return int(globals.size() + locals.size()); }
};

// --- elementary transforms -------------------------------------------------

CropPlan plan_random_resized_crop(int src_h, int src_w, double scale_lo,
                                  double scale_hi, int output_size,
                                  SeededRng& rng);

ImagePlane apply_crop(const ImagePlane& img, const CropPlan& plan);

ImagePlane random_resized_crop(const ImagePlane& img, double scale_lo,
                               double scale_hi, int output_size, SeededRng& rng);

// Brightness / contrast / saturation / hue in a seeded random order,
// torchvision-style factor ranges. Zero strengths are the bit-exact identity.
ImagePlane color_jitter(const ImagePlane& img, const JitterStrengths& s,
                        SeededRng& rng);

// With probability `prob` replaces all three channels by BT.601 luminance.
ImagePlane to_grayscale(const ImagePlane& img, double prob, SeededRng& rng);

// Separable Gaussian blur, reflect padding, kernel radius ceil(3*sigma).
ImagePlane gaussian_blur(const ImagePlane& img, double sigma);

// Normalized 1-d kernel, length 2*ceil(3*sigma)+1.
std::vector<double> gaussian_kernel(double sigma);

// --- viewset builders ------------------------------------------------------

ViewSetPlan plan_viewset_mc(int src_h, int src_w, const ViewSetConfig& cfg,
                            uint64_t seed);

// 2 global crops + locals at the configured (distinct) sizes, crop first,
// then the branch's color recipe.
ViewSet make_viewset_mc(const ImagePlane& img, const ViewSetConfig& cfg,
                        uint64_t seed);

// Temporal-positive viewset: picks 3 distinct views from the stack; the first
// yields the local crops straight from its raw pixels, and each of the three
// is color-augmented and then globally cropped.
ViewSet make_viewset_tp(const std::vector<ImagePlane>& stack,
                        const ViewSetConfig& cfg, uint64_t seed);

// Selection part of make_viewset_tp, exposed for tests.
std::vector<int> select_temporal_views(int stack_size, int k, uint64_t seed);

}  // namespace mcd
