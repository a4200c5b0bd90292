#pragma once

// Dataset ingestion from disk folders. Each layout walks the directory in
// sorted order, validates every item, and collects problems into an itemized
// report; any problem at all aborts the ingest with the full list.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mcd/changedet.hpp"
#include "mcd/common.hpp"
#include "mcd/eval.hpp"
#include "mcd/image_io.hpp"
#include "mcd/rng.hpp"

namespace mcd {

// Per-location stacks of co-registered views (>= 3 views, default 5).
struct TemporalStackIndex {
  std::vector<std::string> locations;           // sorted directory names
  std::vector<std::vector<std::string>> files;  // per location, sorted paths
  std::vector<std::vector<ImagePlane>> stacks;  // decoded views
};

namespace detail {

struct IngestReport {
  std::vector<std::string> errors;

  void add(const std::string& msg) { errors.push_back(msg); }

  // Throws with every collected item; partial datasets are never returned.
  void check(const std::string& what) const {
    if (errors.empty()) return;
    std::string msg = "ingest failed for " + what + " (" +
                      std::to_string(errors.size()) + " problem(s)):";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw RuntimeFailure(msg);
  }
};

inline std::vector<std::filesystem::path> sorted_entries(
    const std::filesystem::path& dir, bool dirs_only) {
  namespace fs = std::filesystem;
  MCD_REQUIRE(fs::exists(dir) && fs::is_directory(dir),
              "ingest: path does not exist or is not a directory: ",
              dir.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (dirs_only ? entry.is_directory() : entry.is_regular_file())
      out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline bool is_image_file(const std::filesystem::path& p) {
  return p.extension() == ".png";
}

inline bool try_read_image(const std::filesystem::path& path, ImagePlane* out,
                           IngestReport& report) {
  try {
    *out = read_image(path.string());
    return true;
  } catch (const std::exception& e) {
    report.add(path.string() + ": " + e.what());
    return false;
  }
}

}  // namespace detail

// Layout: one subdirectory per class, each holding image files. Class ids
// follow the sorted directory names.
inline SingleLabelDataset ingest_classfolders(const std::string& path) {
  namespace fs = std::filesystem;
  detail::IngestReport report;
  SingleLabelDataset ds;
  const auto class_dirs = detail::sorted_entries(path, true);
  if (class_dirs.size() < 2)
    report.add(path + ": need at least 2 class directories, found " +
               std::to_string(class_dirs.size()));
  int h = -1, w = -1;
  for (size_t cls = 0; cls < class_dirs.size(); ++cls) {
    bool any = false;
    for (const auto& file : detail::sorted_entries(class_dirs[cls], false)) {
      if (!detail::is_image_file(file)) continue;
      ImagePlane img;
      if (!detail::try_read_image(file, &img, report)) continue;
      if (h < 0) { h = img.height; w = img.width; }
      if (img.height != h || img.width != w) {
        report.add(file.string() + ": size " + std::to_string(img.height) + "x" +
                   std::to_string(img.width) + " differs from first image " +
                   std::to_string(h) + "x" + std::to_string(w));
        continue;
      }
      ds.images.push_back(std::move(img));
      ds.labels.push_back(int(cls));
      any = true;
    }
    if (!any)
      report.add(class_dirs[cls].string() + ": class directory has no images");
  }
  report.check(path);
  ds.num_classes = int(class_dirs.size());
  return ds;
}

// Layout: images/ plus labels.csv with rows "name,l0,l1,...". Every row's
// label count must match the first row; labels must be 0 or 1.
inline MultiLabelDataset ingest_multilabel_manifest(const std::string& path) {
  namespace fs = std::filesystem;
  detail::IngestReport report;
  MultiLabelDataset ds;
  const fs::path manifest_path = fs::path(path) / "labels.csv";
  std::ifstream manifest(manifest_path);
  MCD_REQUIRE(manifest.good(), "ingest: cannot open manifest ",
              manifest_path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(manifest, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::stringstream row(line);
    std::string name;
    std::getline(row, name, ',');
    if (name.empty()) {
      report.add(manifest_path.string() + " line " + std::to_string(lineno) +
                 ": missing image name");
      continue;
    }
    std::vector<int> labels;
    std::string field;
    bool row_ok = true;
    while (std::getline(row, field, ',')) {
      if (field == "0") labels.push_back(0);
      else if (field == "1") labels.push_back(1);
      else {
        report.add(manifest_path.string() + " line " + std::to_string(lineno) +
                   ": label '" + field + "' is not 0 or 1");
        row_ok = false;
        break;
      }
    }
    if (!row_ok) continue;
    if (labels.empty()) {
      report.add(manifest_path.string() + " line " + std::to_string(lineno) +
                 ": row has no labels");
      continue;
    }
    if (ds.num_labels == 0) ds.num_labels = int(labels.size());
    if (int(labels.size()) != ds.num_labels) {
      report.add(manifest_path.string() + " line " + std::to_string(lineno) +
                 ": row has " + std::to_string(labels.size()) +
                 " labels, expected " + std::to_string(ds.num_labels));
      continue;
    }
    ImagePlane img;
    if (!detail::try_read_image(fs::path(path) / "images" / name, &img, report))
      continue;
    if (!ds.images.empty() && (img.height != ds.images[0].height ||
                               img.width != ds.images[0].width)) {
      report.add(name + ": image size differs from first image");
      continue;
    }
    ds.images.push_back(std::move(img));
    ds.targets.push_back(std::move(labels));
  }
  if (ds.images.empty())
    report.add(manifest_path.string() + ": manifest lists no usable images");
  report.check(path);
  return ds;
}

// Layout: one subdirectory per location holding >= 3 co-registered views.
inline TemporalStackIndex ingest_temporal_stacks(const std::string& path) {
  detail::IngestReport report;
  TemporalStackIndex index;
  const auto loc_dirs = detail::sorted_entries(path, true);
  if (loc_dirs.empty()) report.add(path + ": no location directories");
  for (const auto& dir : loc_dirs) {
    std::vector<std::string> names;
    std::vector<ImagePlane> views;
    bool ok = true;
    for (const auto& file : detail::sorted_entries(dir, false)) {
      if (!detail::is_image_file(file)) continue;
      ImagePlane img;
      if (!detail::try_read_image(file, &img, report)) { ok = false; continue; }
      if (!views.empty() && (img.height != views[0].height ||
                             img.width != views[0].width)) {
        report.add(file.string() + ": view size differs within stack " +
                   dir.filename().string());
        ok = false;
        continue;
      }
      names.push_back(file.string());
      views.push_back(std::move(img));
    }
    if (views.size() < 3) {
      report.add(dir.string() + ": stack has " + std::to_string(views.size()) +
                 " views, need at least 3");
      ok = false;
    }
    if (!ok) continue;
    index.locations.push_back(dir.filename().string());
    index.files.push_back(std::move(names));
    index.stacks.push_back(std::move(views));
  }
  report.check(path);
  return index;
}

// Layout: one subdirectory per pair holding a.png, b.png, mask.png.
inline std::vector<ChangePair> ingest_change_pairs(const std::string& path) {
  namespace fs = std::filesystem;
  detail::IngestReport report;
  std::vector<ChangePair> pairs;
  const auto pair_dirs = detail::sorted_entries(path, true);
  if (pair_dirs.empty()) report.add(path + ": no pair directories");
  for (const auto& dir : pair_dirs) {
    bool ok = true;
    for (const char* part : {"a.png", "b.png", "mask.png"})
      if (!fs::exists(dir / part)) {
        report.add(dir.string() + ": missing " + part);
        ok = false;
      }
    if (!ok) continue;
    ChangePair pair;
    ok &= detail::try_read_image(dir / "a.png", &pair.image_a, report);
    ok &= detail::try_read_image(dir / "b.png", &pair.image_b, report);
    int mh = 0, mw = 0;
    std::vector<uint8_t> mask;
    try {
      mask = read_mask((dir / "mask.png").string(), &mh, &mw);
    } catch (const std::exception& e) {
      report.add((dir / "mask.png").string() + ": " + e.what());
      ok = false;
    }
    if (!ok) continue;
    if (pair.image_a.height != pair.image_b.height ||
        pair.image_a.width != pair.image_b.width ||
        pair.image_a.height != mh || pair.image_a.width != mw) {
      report.add(dir.string() + ": a/b/mask dimensions disagree");
      continue;
    }
    pair.mask = ImagePlane(mh, mw, 1);
    for (size_t i = 0; i < mask.size(); ++i)
      pair.mask.data[i] = mask[i] ? 1.f : 0.f;
    pairs.push_back(std::move(pair));
  }
  report.check(path);
  return pairs;
}

// Deterministic train/validation split: seeded shuffle of [0, n), first
// ceil(val_fraction * n) go to validation, remainder to training; both halves
// are then restored to ascending order.
struct SplitIndices {
  std::vector<int64_t> train, val;
};

inline SplitIndices split_indices(int64_t n, double val_fraction, uint64_t seed) {
  MCD_CHECK(n >= 2, "split: need at least 2 items, got ", n);
  MCD_CHECK(val_fraction > 0 && val_fraction < 1,
            "split: val_fraction must be in (0,1)");
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[size_t(i)] = i;
  SeededRng rng(SeededRng::mix({seed, 0x73706c6974ULL}));
  rng.shuffle(order);
  const int64_t nval = std::max<int64_t>(
      1, std::min<int64_t>(n - 1, int64_t(std::ceil(val_fraction * double(n)))));
  SplitIndices out;
  out.val.assign(order.begin(), order.begin() + nval);
  out.train.assign(order.begin() + nval, order.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.train.begin(), out.train.end());
  return out;
}

}  // namespace mcd
