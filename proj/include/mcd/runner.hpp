#pragma once

// Run orchestration: output-directory ownership (lock file), the step-indexed
// metrics log, and the four end-to-end run drivers the CLI dispatches to.

#include <fcntl.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcd/changedet.hpp"
#include "mcd/checkpoint.hpp"
#include "mcd/config.hpp"
#include "mcd/distill.hpp"
#include "mcd/eval.hpp"
#include "mcd/ingest.hpp"

namespace mcd {

// Environment variable that re-roots all output directories (e.g. for tests
// or scratch disks). The configured path keeps its relative structure.
inline constexpr const char* kOutputRootEnv = "MCD_OUTPUT_ROOT";

inline std::string resolve_output_dir(const std::string& configured) {
  const char* root = std::getenv(kOutputRootEnv);
  if (root == nullptr || *root == '\0') return configured;
  const std::filesystem::path p(configured);
  return (std::filesystem::path(root) / p.relative_path()).string();
}

// Creates the output directory and takes exclusive ownership of it via a
// lock file; a second writer fails immediately. The lock is released when
// the object is destroyed.
class OutputDir {
 public:
  explicit OutputDir(const std::string& configured)
      : path_(resolve_output_dir(configured)) {
    std::filesystem::create_directories(path_);
    lock_path_ = (std::filesystem::path(path_) / ".lock").string();
    fd_ = ::open(lock_path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    MCD_REQUIRE(fd_ >= 0, "output dir '", path_,
                "' is owned by another run (lock file exists)");
    const std::string pid = std::to_string(::getpid()) + "\n";
    (void)!::write(fd_, pid.data(), pid.size());
  }

  OutputDir(const OutputDir&) = delete;
  OutputDir& operator=(const OutputDir&) = delete;

  ~OutputDir() {
    if (fd_ >= 0) {
      ::close(fd_);
      ::unlink(lock_path_.c_str());
    }
  }

  const std::string& path() const { return path_; }
  std::string file(const std::string& name) const {
    return (std::filesystem::path(path_) / name).string();
  }

 private:
  std::string path_;
  std::string lock_path_;
  int fd_ = -1;
};

// Line-delimited JSON, one record per optimization step with exactly the
// fields {step, loss, lambda, tau_t, teacher_entropy}.
class MetricsLog {
 public:
  explicit MetricsLog(const std::string& path)
      : out_(path, std::ios::binary | std::ios::trunc) {
    MCD_REQUIRE(out_.good(), "cannot open metrics log '", path, "'");
  }

  void append(const StepStats& st) {
    nlohmann::json j;
    j["step"] = st.step;
    j["loss"] = st.loss;
    j["lambda"] = st.lambda;
    j["tau_t"] = st.tau_t;
    j["teacher_entropy"] = st.teacher_entropy;
    out_ << j.dump() << "\n";
    MCD_REQUIRE(out_.good(), "metrics log write failed");
  }

  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
};

namespace detail {

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  MCD_REQUIRE(out.good(), "cannot open '", path, "' for writing");
  out << text;
  MCD_REQUIRE(out.good(), "short write to '", path, "'");
}

inline SingleLabelDataset subset_single(const SingleLabelDataset& ds,
                                        const std::vector<int64_t>& idx) {
  SingleLabelDataset out;
  out.num_classes = ds.num_classes;
  for (int64_t i : idx) {
    out.images.push_back(ds.images[size_t(i)]);
    out.labels.push_back(ds.labels[size_t(i)]);
  }
  return out;
}

inline MultiLabelDataset subset_multi(const MultiLabelDataset& ds,
                                      const std::vector<int64_t>& idx) {
  MultiLabelDataset out;
  out.num_labels = ds.num_labels;
  for (int64_t i : idx) {
    out.images.push_back(ds.images[size_t(i)]);
    out.targets.push_back(ds.targets[size_t(i)]);
  }
  return out;
}

template <typename V>
void apply_limit(std::vector<V>& items, int64_t limit) {
  if (limit > 0 && int64_t(items.size()) > limit)
    items.resize(static_cast<size_t>(limit));
}

// Teacher arrays carry FullModel names ("backbone.*", "head.*"); a standalone
// encoder only wants the backbone subset.
template <typename T>
void load_encoder_from_checkpoint(const Checkpoint& ck, Backbone<T>& encoder) {
  std::vector<NamedArray> subset;
  for (const auto& a : ck.teacher)
    if (a.name.rfind("backbone.", 0) == 0) subset.push_back(a);
  load_arrays_into_params(subset, encoder.params());
}

}  // namespace detail

// --- run drivers ------------------------------------------------------------
// Each driver owns its output directory for the duration of the run and
// leaves behind: config.ini (canonical snapshot), plus its artifacts
// (checkpoint.mcd / metrics.jsonl / report.json).

template <typename T>
void run_pretrain(const RunConfig& cfg) {
  cfg.validate();
  MCD_CHECK(cfg.mode.rfind("pretrain", 0) == 0,
            "run_pretrain: mode must be a pretrain variant");
  OutputDir out(cfg.output_dir);
  const std::string snapshot = serialize_run_config(cfg);
  detail::write_text_file(out.file("config.ini"), snapshot);

  std::vector<ImagePlane> images;
  std::vector<std::vector<ImagePlane>> stacks;
  if (cfg.mode == "pretrain-tp") {
    MCD_CHECK(cfg.layout == "temporal-stacks",
              "run_pretrain: pretrain-tp needs layout temporal-stacks");
    TemporalStackIndex index = ingest_temporal_stacks(cfg.data_dir);
    stacks = std::move(index.stacks);
    detail::apply_limit(stacks, cfg.limit);
  } else {
    MCD_CHECK(cfg.layout == "classfolders",
              "run_pretrain: image pretraining needs layout classfolders");
    images = std::move(ingest_classfolders(cfg.data_dir).images);
    detail::apply_limit(images, cfg.limit);
  }

  MetricsLog log(out.file("metrics.jsonl"));
  const DistillConfig dcfg = cfg.to_distill_config();
  auto trainer = pretrain<T>(
      dcfg, images, stacks, [&](const StepStats& st) { log.append(st); },
      cfg.max_steps);
  log.flush();

  Checkpoint ck;
  ck.float_width = cfg.float_width;
  ck.step = trainer->step_index();
  ck.backbone = cfg.backbone;
  ck.head = dcfg.head;
  ck.config_snapshot = snapshot;
  ck.teacher = arrays_from_params(trainer->teacher_params());
  ck.student = arrays_from_params(trainer->student_params());
  const Tensor<T>& center = trainer->center();
  ck.center.resize(static_cast<size_t>(center.numel()));
  for (int64_t i = 0; i < center.numel(); ++i) ck.center[size_t(i)] = double(center[i]);
  save_checkpoint(ck, out.file("checkpoint.mcd"));
}

template <typename T>
EvalReport run_probe(const RunConfig& cfg) {
  cfg.validate();
  MCD_CHECK(!cfg.checkpoint.empty(), "run_probe: checkpoint path required");
  MCD_CHECK(cfg.layout == "classfolders", "run_probe: needs layout classfolders");
  OutputDir out(cfg.output_dir);
  detail::write_text_file(out.file("config.ini"), serialize_run_config(cfg));

  const Checkpoint ck = load_checkpoint(cfg.checkpoint);
  FullModel<T> model = model_from_checkpoint<T>(ck);

  SingleLabelDataset ds = ingest_classfolders(cfg.data_dir);
  if (cfg.limit > 0 && int64_t(ds.images.size()) > cfg.limit) {
    ds.images.resize(static_cast<size_t>(cfg.limit));
    ds.labels.resize(static_cast<size_t>(cfg.limit));
  }
  const SplitIndices split =
      split_indices(int64_t(ds.images.size()), cfg.val_fraction, cfg.seed);
  const SingleLabelDataset train = detail::subset_single(ds, split.train);
  const SingleLabelDataset val = detail::subset_single(ds, split.val);

  FeatureBank<T> train_bank =
      extract_features(model.backbone(), train.images, cfg.data_dir);
  train_bank.labels = train.labels;
  FeatureBank<T> val_bank =
      extract_features(model.backbone(), val.images, cfg.data_dir);
  val_bank.labels = val.labels;

  EvalReport report;
  report.protocol = cfg.protocol;
  report.dataset_id = cfg.data_dir;
  report.train_size = int64_t(train.images.size());
  report.eval_size = int64_t(val.images.size());
  report.seed = cfg.seed;
  if (cfg.protocol == "knn") {
    report.metrics["top1"] = knn_probe(train_bank, val_bank, cfg.knn_k, cfg.knn_tau);
  } else {
    report.metrics["top1"] =
        linear_probe(train_bank, val_bank, cfg.probe_epochs, cfg.probe_lr,
                     cfg.probe_batch_size, cfg.seed);
  }
  report.validate();
  detail::write_text_file(out.file("report.json"), report.to_json() + "\n");
  return report;
}

template <typename T>
EvalReport run_finetune(const RunConfig& cfg) {
  cfg.validate();
  MCD_CHECK(!cfg.checkpoint.empty(), "run_finetune: checkpoint path required");
  OutputDir out(cfg.output_dir);
  detail::write_text_file(out.file("config.ini"), serialize_run_config(cfg));

  const Checkpoint ck = load_checkpoint(cfg.checkpoint);
  FullModel<T> model = model_from_checkpoint<T>(ck);

  FinetuneConfig fcfg;
  fcfg.epochs = cfg.finetune_epochs;
  fcfg.batch_size = cfg.finetune_batch_size;
  fcfg.lr = cfg.finetune_lr;
  fcfg.multi_lr_stages = cfg.finetune_multi_lr;
  fcfg.seed = cfg.seed;
  fcfg.max_steps = cfg.max_steps;
  fcfg.dataset_id = cfg.data_dir;

  EvalReport report;
  if (cfg.finetune_task == "single") {
    MCD_CHECK(cfg.layout == "classfolders",
              "run_finetune: single-label task needs layout classfolders");
    SingleLabelDataset ds = ingest_classfolders(cfg.data_dir);
    const SplitIndices split =
        split_indices(int64_t(ds.images.size()), cfg.val_fraction, cfg.seed);
    SingleLabelDataset train = detail::subset_single(ds, split.train);
    const SingleLabelDataset val = detail::subset_single(ds, split.val);
    if (cfg.finetune_fraction < 1.0)
      train = take_fraction(train, cfg.finetune_fraction, cfg.seed);
    report = finetune_single(model.backbone(), train, val, fcfg);
  } else {
    MCD_CHECK(cfg.layout == "multilabel-manifest",
              "run_finetune: multi-label task needs layout multilabel-manifest");
    MultiLabelDataset ds = ingest_multilabel_manifest(cfg.data_dir);
    const SplitIndices split =
        split_indices(int64_t(ds.images.size()), cfg.val_fraction, cfg.seed);
    MultiLabelDataset train = detail::subset_multi(ds, split.train);
    const MultiLabelDataset val = detail::subset_multi(ds, split.val);
    if (cfg.finetune_fraction < 1.0)
      train = take_fraction(train, cfg.finetune_fraction, cfg.seed);
    report = finetune_multi(model.backbone(), train, val, fcfg);
  }
  detail::write_text_file(out.file("report.json"), report.to_json() + "\n");
  return report;
}

template <typename T>
EvalReport run_changedet(const RunConfig& cfg) {
  cfg.validate();
  MCD_CHECK(!cfg.checkpoint.empty(), "run_changedet: checkpoint path required");
  MCD_CHECK(cfg.layout == "pair-mask", "run_changedet: needs layout pair-mask");
  OutputDir out(cfg.output_dir);
  detail::write_text_file(out.file("config.ini"), serialize_run_config(cfg));

  const Checkpoint ck = load_checkpoint(cfg.checkpoint);
  ChangeDetector<T> detector(UNetSpec::for_encoder(ck.backbone));
  detail::load_encoder_from_checkpoint(ck, detector.encoder());
  SeededRng rng(SeededRng::mix({cfg.seed, 0x6368616e6765ULL, 1}));
  detector.init_decoder(rng);

  std::vector<ChangePair> pairs = ingest_change_pairs(cfg.data_dir);
  detail::apply_limit(pairs, cfg.limit);
  const SplitIndices split =
      split_indices(int64_t(pairs.size()), cfg.val_fraction, cfg.seed);
  std::vector<ChangePair> train, val;
  for (int64_t i : split.train) train.push_back(pairs[size_t(i)]);
  for (int64_t i : split.val) val.push_back(pairs[size_t(i)]);

  ChangeDetConfig ccfg;
  ccfg.epochs = cfg.changedet_epochs;
  ccfg.batch_size = cfg.changedet_batch_size;
  ccfg.lr = cfg.changedet_lr;
  ccfg.seed = cfg.seed;
  ccfg.max_steps = cfg.max_steps;
  ccfg.dataset_id = cfg.data_dir;
  const ChangeDetResult result = train_changedet(detector, train, val, ccfg);
  detail::write_text_file(out.file("report.json"), result.report.to_json() + "\n");
  return result.report;
}

}  // namespace mcd
