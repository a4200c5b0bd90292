// Command-line front end. Subcommands: pretrain, probe, finetune, changedet,
// synth, inspect. Behaviour lives in the library; this file only parses
// flags, loads the config file, applies overrides, and dispatches.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mcd/config.hpp"
#include "mcd/runner.hpp"
#include "mcd/synth.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string output_dir, data_dir, checkpoint, device;
  int64_t seed = -1;
  int float_width = 0;
};

void add_common_flags(CLI::App* cmd, CommonFlags* flags) {
  cmd->add_option("--config", flags->config_path, "Run config file (INI-style)");
  cmd->add_option("--set", flags->overrides,
                  "Override a config value, e.g. --set schedule.epochs=5");
  cmd->add_option("--output", flags->output_dir, "Output directory");
  cmd->add_option("--data", flags->data_dir, "Dataset directory");
  cmd->add_option("--checkpoint", flags->checkpoint, "Checkpoint file");
  cmd->add_option("--seed", flags->seed, "Random seed");
  cmd->add_option("--device", flags->device, "Compute device (cpu)");
  cmd->add_option("--float-width", flags->float_width,
                  "Parameter precision on this run")
      ->check(CLI::IsMember({32, 64}));
}

mcd::RunConfig build_config(const CommonFlags& flags) {
  mcd::RunConfig cfg;
  if (!flags.config_path.empty()) {
    std::ifstream in(flags.config_path);
    if (!in.good())
      throw mcd::InvalidArgument("cannot open config file '" +
                                 flags.config_path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    cfg = mcd::parse_run_config(buf.str());
  }
  for (const std::string& assignment : flags.overrides)
    mcd::apply_override(cfg, assignment);
  if (!flags.output_dir.empty()) cfg.output_dir = flags.output_dir;
  if (!flags.data_dir.empty()) cfg.data_dir = flags.data_dir;
  if (!flags.checkpoint.empty()) cfg.checkpoint = flags.checkpoint;
  if (!flags.device.empty()) cfg.device = flags.device;
  if (flags.seed >= 0) cfg.seed = uint64_t(flags.seed);
  if (flags.float_width != 0) cfg.float_width = flags.float_width;
  return cfg;
}

// The execution mode dictates the dataset layout; fill it in while the config
// still carries the schema default so plain invocations work unchanged. An
// explicitly configured non-default layout is left alone (and rejected by the
// runner if it conflicts with the mode).
void default_layout(mcd::RunConfig& cfg) {
  if (cfg.layout != "classfolders") return;
  if (cfg.mode == "pretrain-tp") {
    cfg.layout = "temporal-stacks";
  } else if (cfg.mode == "changedet") {
    cfg.layout = "pair-mask";
  } else if (cfg.mode == "finetune" && cfg.finetune_task == "multi") {
    cfg.layout = "multilabel-manifest";
  }
}

template <typename Fn>
void dispatch_width(const mcd::RunConfig& cfg, Fn&& fn) {
  if (cfg.float_width == 64)
    fn.template operator()<double>();
  else
    fn.template operator()<float>();
}

int run_inspect(const std::string& path) {
  const mcd::Checkpoint ck = mcd::load_checkpoint(path);
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  const uint64_t hash = mcd::detail::get_u64le(bytes, bytes.size() - 8);

  int64_t teacher_count = 0, student_count = 0;
  for (const auto& a : ck.teacher) teacher_count += a.numel();
  for (const auto& a : ck.student) student_count += a.numel();
  std::printf("checkpoint: %s\n", path.c_str());
  std::printf("  format_version: %d\n", ck.format_version);
  std::printf("  float_width:    %d\n", ck.float_width);
  std::printf("  step:           %lld\n", static_cast<long long>(ck.step));
  std::printf("  backbone:       %s, feature_dim %d\n",
              mcd::family_name(ck.backbone.family).c_str(),
              ck.backbone.feature_dim());
  std::printf("  head:           %d -> %d -> %d prototypes\n",
              ck.head.hidden_dim, ck.head.bottleneck_dim, ck.head.num_prototypes);
  std::printf("  teacher params: %lld values in %zu arrays\n",
              static_cast<long long>(teacher_count), ck.teacher.size());
  std::printf("  student params: %lld values in %zu arrays\n",
              static_cast<long long>(student_count), ck.student.size());
  std::printf("  center size:    %zu\n", ck.center.size());
  std::printf("  content hash:   %016llx\n",
              static_cast<unsigned long long>(hash));
  return 0;
}

void print_report(const mcd::EvalReport& report) {
  std::printf("%s\n", report.to_json().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-distillation pretraining and evaluation toolkit"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string pretrain_mode = "mc";
  std::string probe_protocol, finetune_task;
  std::string synth_kind, synth_out;
  int synth_n = 1, synth_size = 64;
  int64_t synth_seed = 0;
  std::string inspect_path;

  CLI::App* pretrain = app.add_subcommand("pretrain", "Self-distillation pretraining");
  add_common_flags(pretrain, &flags);
  pretrain->add_option("--mode", pretrain_mode, "Crop strategy")
      ->check(CLI::IsMember({"mc", "tp", "baseline"}));

  CLI::App* probe = app.add_subcommand("probe", "Frozen-feature evaluation");
  add_common_flags(probe, &flags);
  probe->add_option("--protocol", probe_protocol, "knn or linear")
      ->check(CLI::IsMember({"knn", "linear"}));

  CLI::App* finetune = app.add_subcommand("finetune", "Supervised fine-tuning");
  add_common_flags(finetune, &flags);
  finetune->add_option("--task", finetune_task, "single or multi")
      ->check(CLI::IsMember({"single", "multi"}));

  CLI::App* changedet = app.add_subcommand("changedet", "Change detection training");
  add_common_flags(changedet, &flags);

  CLI::App* synth = app.add_subcommand("synth", "Generate a procedural dataset");
  synth->add_option("--kind", synth_kind, "Dataset kind")
      ->required()
      ->check(CLI::IsMember({"textures-4class", "multilabel-motifs",
                             "temporal-drift-stacks", "change-pairs"}));
  synth->add_option("--n", synth_n, "Items per class / total items")->required();
  synth->add_option("--seed", synth_seed, "Generator seed");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--size", synth_size, "Image side length");

  CLI::App* inspect = app.add_subcommand("inspect", "Describe a checkpoint");
  inspect->add_option("--checkpoint", inspect_path, "Checkpoint file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      mcd::synth_generate(synth_kind, synth_n, uint64_t(synth_seed), synth_out,
                          synth_size);
      return 0;
    }
    if (inspect->parsed()) return run_inspect(inspect_path);

    mcd::RunConfig cfg = build_config(flags);
    if (pretrain->parsed()) {
      cfg.mode = "pretrain-" + pretrain_mode;
      default_layout(cfg);
      cfg.validate();
      dispatch_width(cfg, [&]<typename T>() { mcd::run_pretrain<T>(cfg); });
      return 0;
    }
    if (probe->parsed()) {
      cfg.mode = "probe";
      if (!probe_protocol.empty()) cfg.protocol = probe_protocol;
      default_layout(cfg);
      cfg.validate();
      dispatch_width(cfg, [&]<typename T>() { print_report(mcd::run_probe<T>(cfg)); });
      return 0;
    }
    if (finetune->parsed()) {
      cfg.mode = "finetune";
      if (!finetune_task.empty()) cfg.finetune_task = finetune_task;
      default_layout(cfg);
      cfg.validate();
      dispatch_width(cfg,
                     [&]<typename T>() { print_report(mcd::run_finetune<T>(cfg)); });
      return 0;
    }
    if (changedet->parsed()) {
      cfg.mode = "changedet";
      default_layout(cfg);
      cfg.validate();
      dispatch_width(cfg,
                     [&]<typename T>() { print_report(mcd::run_changedet<T>(cfg)); });
      return 0;
    }
  } catch (const mcd::InvalidArgument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
