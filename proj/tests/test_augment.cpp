#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "mcd/augment.hpp"
#include "test_support.hpp"

using namespace mcd;
using mcd::testing::images_equal;
using mcd::testing::max_abs_diff;
using mcd::testing::random_image;

namespace {

// Independent dense 2-d convolution oracle with its own kernel and its own
// reflect indexing.
ImagePlane blur_oracle_2d(const ImagePlane& img, double sigma) {
  const int radius = int(std::ceil(3.0 * sigma));
  const int side = 2 * radius + 1;
  std::vector<double> k2(size_t(side) * size_t(side));
  double sum = 0.0;
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      const double w = std::exp(-(double(dy) * dy + double(dx) * dx) /
                                (2.0 * sigma * sigma));
      k2[size_t((dy + radius) * side + (dx + radius))] = w;
      sum += w;
    }
  }
  for (double& w : k2) w /= sum;

  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
      if (i < 0) i = -i;
      if (i >= n) i = 2 * (n - 1) - i;
    }
    return i;
  };

  ImagePlane out(img.height, img.width, img.channels);
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        double acc = 0.0;
        for (int dy = -radius; dy <= radius; ++dy) {
          for (int dx = -radius; dx <= radius; ++dx) {
            acc += k2[size_t((dy + radius) * side + (dx + radius))] *
                   double(img.at(c, reflect(y + dy, img.height),
                                 reflect(x + dx, img.width)));
          }
        }
        out.at(c, y, x) = float(acc);
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("random_resized_crop: identity when scale is pinned to full area") {
  SeededRng rng(7);
  ImagePlane src = random_image(224, 224, 3, rng);
  SeededRng crop_rng(11);
  ImagePlane out = random_resized_crop(src, 1.0, 1.0, 224, crop_rng);
  CHECK(images_equal(src, out));
}

TEST_CASE("random_resized_crop: area fractions stay inside the scale range") {
  SeededRng seeds(3);
  for (auto [lo, hi] : {std::pair{0.05, 0.32}, std::pair{0.32, 1.0}}) {
    double min_frac = 1.0, max_frac = 0.0;
    for (int i = 0; i < 1000; ++i) {
      SeededRng rng(seeds.next_u64());
      CropPlan p = plan_random_resized_crop(96, 96, lo, hi, 32, rng);
      p.check_valid();
      min_frac = std::min(min_frac, p.area_fraction());
      max_frac = std::max(max_frac, p.area_fraction());
    }
    CHECK(min_frac >= lo);
    CHECK(max_frac <= hi);
  }
}

TEST_CASE("random_resized_crop: non-square sources and degenerate ranges") {
  SeededRng rng(5);
  for (int i = 0; i < 500; ++i) {
    SeededRng draw(rng.next_u64());
    CropPlan p = plan_random_resized_crop(48, 130, 0.05, 0.32, 24, draw);
    p.check_valid();
  }
  SeededRng r2(1);
  CHECK_THROWS_AS(plan_random_resized_crop(16, 16, 0.0, 0.0, 8, r2),
                  InvalidArgument);
  CHECK_THROWS_AS(plan_random_resized_crop(16, 16, 0.001, 0.002, 8, r2),
                  InvalidArgument);  // smallest region below one pixel
}

TEST_CASE("color_jitter: zero strengths are the bit-exact identity") {
  SeededRng rng(21);
  ImagePlane img = random_image(17, 23, 3, rng);
  SeededRng j(5);
  ImagePlane out = color_jitter(img, JitterStrengths{0, 0, 0, 0}, j);
  CHECK(images_equal(img, out));
}

TEST_CASE("color_jitter: brightness-only closed form on a constant image") {
  // With only brightness active the output is clamp(f * v) everywhere; recover
  // f from one pixel and check the whole image against the closed form.
  const float v = 0.5f;
  ImagePlane img = ImagePlane::filled(9, 9, 3, v);
  JitterStrengths s{0.4, 0, 0, 0};
  for (uint64_t seed = 0; seed < 20; ++seed) {
    SeededRng j(seed);
    ImagePlane out = color_jitter(img, s, j);
    const float f = out.data[0] / v;
    CHECK(f >= 0.6f - 1e-6f);
    CHECK(f <= 1.4f + 1e-6f);
    for (float p : out.data) {
      CHECK(p == doctest::Approx(std::clamp(f * v, 0.f, 1.f)).epsilon(1e-6));
    }
  }
}

TEST_CASE("color_jitter: deterministic for a fixed seed") {
  SeededRng rng(2);
  ImagePlane img = random_image(15, 15, 3, rng);
  JitterStrengths s;  // defaults
  SeededRng a(99), b(99);
  CHECK(images_equal(color_jitter(img, s, a), color_jitter(img, s, b)));
}

TEST_CASE("to_grayscale") {
  SeededRng rng(31);
  SUBCASE("equal channels are a fixed point") {
    ImagePlane img(6, 6, 3);
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x) {
        const float v = float((y * 6 + x) % 10) / 10.f;
        img.at(0, y, x) = img.at(1, y, x) = img.at(2, y, x) = v;
      }
    ImagePlane out = to_grayscale(img, 1.0, rng);
    CHECK(max_abs_diff(img, out) < 1e-6f);
  }
  SUBCASE("pure red maps to the red luminance weight") {
    ImagePlane img(2, 2, 3);
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) img.at(0, y, x) = 1.f;
    ImagePlane out = to_grayscale(img, 1.0, rng);
    for (int c = 0; c < 3; ++c) {
      CHECK(out.at(c, 0, 0) == doctest::Approx(0.299).epsilon(1e-6));
    }
  }
  SUBCASE("probability zero is the identity for any seed") {
    ImagePlane img = random_image(8, 8, 3, rng);
    for (uint64_t seed = 0; seed < 16; ++seed) {
      SeededRng r(seed);
      CHECK(images_equal(img, to_grayscale(img, 0.0, r)));
    }
  }
  SUBCASE("rejects non-RGB input") {
    ImagePlane img = random_image(8, 8, 1, rng);
    CHECK_THROWS_AS(to_grayscale(img, 0.5, rng), InvalidArgument);
  }
}

TEST_CASE("gaussian_blur") {
  SUBCASE("kernel is normalized") {
    for (double sigma : {0.1, 0.5, 1.0, 2.0, 3.7}) {
      const auto k = gaussian_kernel(sigma);
      CHECK(int(k.size()) == 2 * int(std::ceil(3 * sigma)) + 1);
      double sum = 0;
      for (double w : k) sum += w;
      CHECK(std::fabs(sum - 1.0) < 1e-9);
    }
  }
  SUBCASE("constant image is unchanged") {
    ImagePlane img = ImagePlane::filled(10, 12, 3, 0.37f);
    ImagePlane out = gaussian_blur(img, 1.3);
    CHECK(max_abs_diff(img, out) < 1e-6f);
  }
  SUBCASE("matches the dense 2-d convolution oracle") {
    SeededRng rng(13);
    for (double sigma : {0.4, 1.0, 2.2}) {
      ImagePlane img = random_image(16, 16, 3, rng);
      ImagePlane fast = gaussian_blur(img, sigma);
      ImagePlane slow = blur_oracle_2d(img, sigma);
      CHECK(max_abs_diff(fast, slow) < 1e-5f);
    }
  }
  SUBCASE("rejects non-positive sigma") {
    ImagePlane img = ImagePlane::filled(4, 4, 3, 0.5f);
    CHECK_THROWS_AS(gaussian_blur(img, 0.0), InvalidArgument);
    CHECK_THROWS_AS(gaussian_blur(img, -1.0), InvalidArgument);
  }
}

TEST_CASE("make_viewset_mc: default geometry and tags") {
  SeededRng rng(41);
  ImagePlane img = random_image(256, 256, 3, rng);
  ViewSetConfig cfg;
  ViewSet vs = make_viewset_mc(img, cfg, 12345);

  REQUIRE(vs.globals.size() == 2);
  REQUIRE(vs.locals.size() == 6);
  std::multiset<int> sizes;
  for (const auto& g : vs.globals) {
    CHECK(g.height == 224);
    CHECK(g.width == 224);
    sizes.insert(g.height);
  }
  for (const auto& l : vs.locals) {
    CHECK(l.height == l.width);
    sizes.insert(l.height);
  }
  CHECK(sizes == std::multiset<int>{224, 224, 184, 164, 144, 124, 104, 84});

  REQUIRE(vs.recipe_tags.size() == 8);
  for (int i = 0; i < 2; ++i) CHECK(vs.recipe_tags[size_t(i)] == "global");
  for (int i = 2; i < 8; ++i) CHECK(vs.recipe_tags[size_t(i)] == "local");
}

TEST_CASE("make_viewset_mc: bit-identical for the same seed") {
  SeededRng rng(43);
  ImagePlane img = random_image(128, 128, 3, rng);
  ViewSetConfig cfg;
  cfg.global_size = 64;
  cfg.local_sizes = {56, 48, 40, 32, 28, 24};
  ViewSet a = make_viewset_mc(img, cfg, 777);
  ViewSet b = make_viewset_mc(img, cfg, 777);
  REQUIRE(a.globals.size() == b.globals.size());
  for (size_t i = 0; i < a.globals.size(); ++i)
    CHECK(images_equal(a.globals[i], b.globals[i]));
  for (size_t i = 0; i < a.locals.size(); ++i)
    CHECK(images_equal(a.locals[i], b.locals[i]));
  ViewSet c = make_viewset_mc(img, cfg, 778);
  CHECK_FALSE(images_equal(a.globals[0], c.globals[0]));
}

TEST_CASE("plan_viewset_mc matches the materialized geometry") {
  SeededRng rng(47);
  ImagePlane img = random_image(96, 96, 3, rng);
  ViewSetConfig cfg;
  cfg.global_size = 48;
  cfg.local_sizes = {40, 36, 32, 28, 26, 24};
  const ViewSetPlan plan = plan_viewset_mc(96, 96, cfg, 31);
  const ViewSet vs = make_viewset_mc(img, cfg, 31);
  REQUIRE(plan.globals.size() == 2);
  REQUIRE(plan.locals.size() == 6);
  for (size_t i = 0; i < plan.locals.size(); ++i) {
    CHECK(plan.locals[i].crop.output_size == vs.locals[i].height);
    plan.locals[i].crop.check_valid();
  }
  // Planning twice with the same seed gives identical regions.
  const ViewSetPlan plan2 = plan_viewset_mc(96, 96, cfg, 31);
  for (size_t i = 0; i < plan.globals.size(); ++i) {
    CHECK(plan.globals[i].crop.x == plan2.globals[i].crop.x);
    CHECK(plan.globals[i].crop.y == plan2.globals[i].crop.y);
    CHECK(plan.globals[i].crop.w == plan2.globals[i].crop.w);
    CHECK(plan.globals[i].crop.h == plan2.globals[i].crop.h);
  }
}

TEST_CASE("make_viewset_mc: rejects sources below the smallest crop") {
  SeededRng rng(51);
  ImagePlane img = random_image(64, 64, 3, rng);
  ViewSetConfig cfg;  // smallest local is 84
  CHECK_THROWS_AS(make_viewset_mc(img, cfg, 1), InvalidArgument);
}

TEST_CASE("make_viewset_tp: selection and shape contract") {
  SeededRng rng(61);
  ViewSetConfig cfg;
  cfg.global_size = 48;
  cfg.local_sizes = {40, 36, 32, 28, 26, 24};

  std::vector<ImagePlane> stack;
  for (int t = 0; t < 5; ++t) stack.push_back(random_image(96, 96, 3, rng));

  ViewSet vs = make_viewset_tp(stack, cfg, 99);
  CHECK(vs.globals.size() == 3);
  CHECK(vs.locals.size() == 6);
  for (const auto& g : vs.globals) CHECK(g.height == 48);

  SUBCASE("three distinct views are selected") {
    for (int s = 0; s < 50; ++s) {
      auto sel = select_temporal_views(5, 3, uint64_t(s));
      std::set<int> uniq(sel.begin(), sel.end());
      CHECK(uniq.size() == 3);
      for (int i : sel) {
        CHECK(i >= 0);
        CHECK(i < 5);
      }
    }
  }
  SUBCASE("a 3-stack selects the whole stack in some order") {
    auto sel = select_temporal_views(3, 3, 4);
    std::set<int> uniq(sel.begin(), sel.end());
    CHECK(uniq == std::set<int>{0, 1, 2});
  }
  SUBCASE("deterministic for the same seed") {
    ViewSet a = make_viewset_tp(stack, cfg, 1234);
    ViewSet b = make_viewset_tp(stack, cfg, 1234);
    for (size_t i = 0; i < a.globals.size(); ++i)
      CHECK(images_equal(a.globals[i], b.globals[i]));
    for (size_t i = 0; i < a.locals.size(); ++i)
      CHECK(images_equal(a.locals[i], b.locals[i]));
  }
  SUBCASE("rejects stacks with fewer than 3 views") {
    std::vector<ImagePlane> two(stack.begin(), stack.begin() + 2);
    CHECK_THROWS_AS(make_viewset_tp(two, cfg, 1), InvalidArgument);
  }
}

TEST_CASE("property: every transform maps valid images to valid images") {
  SeededRng rng(71);
  for (int trial = 0; trial < 30; ++trial) {
    const int h = 10 + int(rng.randint(30));
    const int w = 10 + int(rng.randint(30));
    ImagePlane img = random_image(h, w, 3, rng);
    SeededRng op_rng(rng.next_u64());

    ImagePlane jit = color_jitter(img, JitterStrengths{}, op_rng);
    jit.check_valid("jitter output");
    ImagePlane gray = to_grayscale(img, 0.5, op_rng);
    gray.check_valid("grayscale output");
    ImagePlane blur = gaussian_blur(img, 0.1 + 2.0 * op_rng.uniform());
    blur.check_valid("blur output");
    ImagePlane crop = random_resized_crop(img, 0.2, 0.9, 16, op_rng);
    crop.check_valid("crop output");
    CHECK(crop.height == 16);
  }
}

TEST_CASE("baseline config forces one local size") {
  ViewSetConfig cfg;
  ViewSetConfig base = ViewSetConfig::baseline_from(cfg, 96);
  CHECK(base.local_sizes == std::vector<int>{96, 96, 96, 96, 96, 96});
}
