#pragma once

// Procedural dataset generators. Every generator is a pure function of
// (kind, n, seed, size): rerunning with the same arguments produces
// byte-identical files.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mcd/common.hpp"
#include "mcd/image.hpp"
#include "mcd/image_io.hpp"
#include "mcd/rng.hpp"

namespace mcd {

namespace detail {

constexpr uint64_t kSynthTag = 0x73796e7468ULL;  // "synth"

inline std::string index_name(const char* prefix, int i, int digits,
                              const char* suffix) {
  std::string num = std::to_string(i);
  while (int(num.size()) < digits) num.insert(num.begin(), '0');
  return std::string(prefix) + num + suffix;
}

inline double clamp01(double v) { return v < 0 ? 0 : (v > 1 ? 1 : v); }

// Smooth low-frequency background: a few random cosine waves per channel.
inline ImagePlane wave_background(int size, SeededRng& rng, double lo,
                                  double hi) {
  ImagePlane img(size, size, 3);
  for (int c = 0; c < 3; ++c) {
    const double fx = rng.uniform(0.5, 2.5), fy = rng.uniform(0.5, 2.5);
    const double px = rng.uniform(0, 6.283), py = rng.uniform(0, 6.283);
    const double mid = rng.uniform(lo + 0.15, hi - 0.15);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double v = mid + 0.12 * std::cos(6.283 * fx * x / size + px) +
                         0.12 * std::cos(6.283 * fy * y / size + py);
        img.at(c, y, x) = float(v < lo ? lo : (v > hi ? hi : v));
      }
  }
  return img;
}

inline void add_pixel_noise(ImagePlane& img, SeededRng& rng, double sigma) {
  for (float& v : img.data) v = float(clamp01(double(v) + sigma * rng.normal()));
}

// --- textures-4class -------------------------------------------------------
// Class identity is carried by the spatial pattern (stripes / checker /
// diagonal / dots), so it survives color jitter and grayscale conversion.
inline ImagePlane texture_image(int cls, int size, SeededRng& rng) {
  ImagePlane img(size, size, 3);
  // Per-class base palette, jittered per image.
  static const double palettes[4][3] = {{0.68, 0.32, 0.30},
                                        {0.30, 0.62, 0.34},
                                        {0.30, 0.38, 0.68},
                                        {0.64, 0.60, 0.30}};
  double bg[3], fg[3];
  for (int c = 0; c < 3; ++c) {
    bg[c] = clamp01(palettes[cls][c] + rng.uniform(-0.08, 0.08));
    fg[c] = clamp01(bg[c] + rng.uniform(0.22, 0.34));
  }
  const int period = 3 + int(rng.randint(4));  // stripe / cell width
  const int phase = int(rng.randint(period * 2));
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      bool on = false;
      switch (cls) {
        case 0: on = ((y + phase) / period) % 2 == 0; break;
        case 1: on = ((x + phase) / period) % 2 == 0; break;
        case 2:
          on = (((x + phase) / period) % 2) == (((y + phase) / period) % 2);
          break;
        default: on = ((x + y + phase) / period) % 2 == 0; break;
      }
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = float(on ? fg[c] : bg[c]);
    }
  add_pixel_noise(img, rng, 0.02);
  return img;
}

// --- multilabel motifs -----------------------------------------------------
// Three independent motif types; the label vector marks which are present.
inline void paint_disk(ImagePlane& img, int cy, int cx, int r,
                       const double color[3]) {
  for (int y = std::max(0, cy - r); y <= std::min(img.height - 1, cy + r); ++y)
    for (int x = std::max(0, cx - r); x <= std::min(img.width - 1, cx + r); ++x)
      if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r)
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = float(color[c]);
}

inline void paint_cross(ImagePlane& img, int cy, int cx, int r, int half_w,
                        const double color[3]) {
  for (int y = std::max(0, cy - r); y <= std::min(img.height - 1, cy + r); ++y)
    for (int x = std::max(0, cx - r); x <= std::min(img.width - 1, cx + r); ++x)
      if (std::abs(y - cy) <= half_w || std::abs(x - cx) <= half_w)
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = float(color[c]);
}

inline void paint_frame(ImagePlane& img, int cy, int cx, int r, int thick,
                        const double color[3]) {
  for (int y = std::max(0, cy - r); y <= std::min(img.height - 1, cy + r); ++y)
    for (int x = std::max(0, cx - r); x <= std::min(img.width - 1, cx + r); ++x) {
      const int d = std::max(std::abs(y - cy), std::abs(x - cx));
      if (d >= r - thick && d <= r)
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = float(color[c]);
    }
}

inline ImagePlane motif_image(int size, SeededRng& rng,
                              std::vector<int>& labels_out) {
  ImagePlane img = wave_background(size, rng, 0.15, 0.55);
  labels_out.assign(3, 0);
  static const double colors[3][3] = {
      {0.92, 0.25, 0.25}, {0.25, 0.92, 0.35}, {0.30, 0.45, 0.95}};
  const int r = std::max(3, size / 8);
  for (int m = 0; m < 3; ++m) {
    if (!rng.bernoulli(0.5)) continue;
    labels_out[size_t(m)] = 1;
    const int cy = r + int(rng.randint(std::max(1, size - 2 * r)));
    const int cx = r + int(rng.randint(std::max(1, size - 2 * r)));
    if (m == 0) paint_disk(img, cy, cx, r, colors[m]);
    else if (m == 1) paint_cross(img, cy, cx, r, std::max(1, r / 3), colors[m]);
    else paint_frame(img, cy, cx, r, std::max(1, r / 3), colors[m]);
  }
  add_pixel_noise(img, rng, 0.015);
  return img;
}

// --- temporal drift stacks -------------------------------------------------
// One base scene per location; each view applies a per-channel affine
// photometric drift. Ranges keep values inside [0,1] so the drift never
// clips and the spatial structure stays exactly constant.
inline ImagePlane drift_view(const ImagePlane& base, SeededRng& rng) {
  ImagePlane out = base;
  for (int c = 0; c < 3; ++c) {
    const double gain = rng.uniform(0.88, 1.12);
    const double bias = rng.uniform(-0.05, 0.05);
    for (int y = 0; y < base.height; ++y)
      for (int x = 0; x < base.width; ++x)
        out.at(c, y, x) = float(double(base.at(c, y, x)) * gain + bias);
  }
  return out;
}

// --- change pairs ----------------------------------------------------------
// image_b = image_a plus inserted or removed bright shapes; the mask marks
// exactly the painted pixels. Shape colors live in [0.85, 1] while the
// background stays below 0.8, so painted pixels always differ.
inline void paint_rect_masked(ImagePlane& img, std::vector<uint8_t>* mask,
                              int y0, int x0, int h, int w,
                              const double color[3]) {
  for (int y = y0; y < std::min(img.height, y0 + h); ++y)
    for (int x = x0; x < std::min(img.width, x0 + w); ++x) {
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = float(color[c]);
      if (mask) (*mask)[size_t(y * img.width + x)] = 1;
    }
}

inline void paint_disk_masked(ImagePlane& img, std::vector<uint8_t>* mask,
                              int cy, int cx, int r, const double color[3]) {
  for (int y = std::max(0, cy - r); y <= std::min(img.height - 1, cy + r); ++y)
    for (int x = std::max(0, cx - r); x <= std::min(img.width - 1, cx + r); ++x)
      if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) {
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = float(color[c]);
        if (mask) (*mask)[size_t(y * img.width + x)] = 1;
      }
}

struct ChangePairFiles {
  ImagePlane a, b;
  std::vector<uint8_t> mask;  // {0,1}, row-major
};

inline ChangePairFiles change_pair_images(int size, SeededRng& rng) {
  ChangePairFiles out;
  out.a = wave_background(size, rng, 0.1, 0.6);
  // Static distractor shapes present in both images (mid-bright, unmasked).
  const int distractors = int(rng.randint(3));
  for (int d = 0; d < distractors; ++d) {
    double color[3];
    for (double& c : color) c = rng.uniform(0.55, 0.75);
    const int r = 2 + int(rng.randint(std::max(2, size / 10)));
    paint_disk_masked(out.a, nullptr, int(rng.randint(size)),
                      int(rng.randint(size)), r, color);
  }
  // Shared texture noise goes in before the copy so unchanged pixels stay
  // byte-identical between a and b. Background tops out at 0.82; changed
  // shapes start at 0.85, so painted pixels always differ after 8-bit
  // quantization and the mask is exactly the a/b difference set.
  add_pixel_noise(out.a, rng, 0.01);
  for (float& v : out.a.data) v = std::min(v, 0.82f);
  out.b = out.a;
  out.mask.assign(size_t(size) * size_t(size), 0);
  // All changed shapes of one pair land in the same image: painted into b
  // (insertion) or into a (removal, i.e. b lacks them).
  ImagePlane& target = rng.bernoulli(0.5) ? out.b : out.a;
  const int changes = 1 + int(rng.randint(2));
  for (int k = 0; k < changes; ++k) {
    double color[3];
    for (double& c : color) c = rng.uniform(0.85, 1.0);
    if (rng.bernoulli(0.5)) {
      const int h = size / 6 + int(rng.randint(std::max(1, size / 6)));
      const int w = size / 6 + int(rng.randint(std::max(1, size / 6)));
      paint_rect_masked(target, &out.mask, int(rng.randint(size - h)),
                        int(rng.randint(size - w)), h, w, color);
    } else {
      const int r = size / 10 + int(rng.randint(std::max(1, size / 10)));
      paint_disk_masked(target, &out.mask, r + int(rng.randint(size - 2 * r)),
                        r + int(rng.randint(size - 2 * r)), r, color);
    }
  }
  return out;
}

}  // namespace detail

// Writes one of the procedural datasets under out_dir. Layouts:
//   textures-4class:       class0..class3/img_NNNNN.png (n per class)
//   multilabel-motifs:     images/img_NNNNN.png + labels.csv ("name,l0,l1,l2")
//   temporal-drift-stacks: loc_NNNN/t0..t4.png (5 views per location)
//   change-pairs:          pair_NNNN/{a,b,mask}.png
inline void synth_generate(const std::string& kind, int n, uint64_t seed,
                           const std::string& out_dir, int size = 64) {
  MCD_CHECK(n >= 1, "synth_generate: n must be >= 1");
  MCD_CHECK(size >= 16, "synth_generate: size must be >= 16");
  namespace fs = std::filesystem;
  const SeededRng root(SeededRng::mix({seed, detail::kSynthTag}));

  if (kind == "textures-4class") {
    for (int cls = 0; cls < 4; ++cls) {
      const fs::path dir = fs::path(out_dir) / ("class" + std::to_string(cls));
      fs::create_directories(dir);
      for (int i = 0; i < n; ++i) {
        SeededRng rng = root.derive(uint64_t(cls), uint64_t(i));
        write_image8((dir / detail::index_name("img_", i, 5, ".png")).string(),
                     detail::texture_image(cls, size, rng));
      }
    }
  } else if (kind == "multilabel-motifs") {
    const fs::path dir = fs::path(out_dir) / "images";
    fs::create_directories(dir);
    std::string csv;
    for (int i = 0; i < n; ++i) {
      SeededRng rng = root.derive(uint64_t(i));
      std::vector<int> labels;
      const ImagePlane img = detail::motif_image(size, rng, labels);
      const std::string name = detail::index_name("img_", i, 5, ".png");
      write_image8((dir / name).string(), img);
      csv += name;
      for (int l : labels) csv += "," + std::to_string(l);
      csv += "\n";
    }
    std::ofstream manifest(fs::path(out_dir) / "labels.csv",
                           std::ios::binary | std::ios::trunc);
    MCD_REQUIRE(manifest.good(), "synth_generate: cannot write labels.csv");
    manifest << csv;
  } else if (kind == "temporal-drift-stacks") {
    for (int i = 0; i < n; ++i) {
      const fs::path dir = fs::path(out_dir) / detail::index_name("loc_", i, 4, "");
      fs::create_directories(dir);
      SeededRng rng = root.derive(uint64_t(i));
      const ImagePlane base = detail::wave_background(size, rng, 0.2, 0.8);
      for (int t = 0; t < 5; ++t) {
        SeededRng view_rng = rng.derive(uint64_t(t) + 1);
        write_image8((dir / ("t" + std::to_string(t) + ".png")).string(),
                     detail::drift_view(base, view_rng));
      }
    }
  } else if (kind == "change-pairs") {
    for (int i = 0; i < n; ++i) {
      const fs::path dir = fs::path(out_dir) / detail::index_name("pair_", i, 4, "");
      fs::create_directories(dir);
      SeededRng rng = root.derive(uint64_t(i));
      const detail::ChangePairFiles pair = detail::change_pair_images(size, rng);
      write_image8((dir / "a.png").string(), pair.a);
      write_image8((dir / "b.png").string(), pair.b);
      write_mask((dir / "mask.png").string(), pair.mask, size, size);
    }
  } else {
    throw InvalidArgument("synth_generate: unknown kind '" + kind + "'");
  }
}

}  // namespace mcd
