#pragma once

// Plain-text run configuration: INI-style sections, strict key checking,
// canonical serialization (parse -> serialize -> parse is a fixpoint), and
// dotted-key overrides for command-line flags.

#include <array>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mcd/augment.hpp"
#include "mcd/common.hpp"
#include "mcd/distill.hpp"
#include "mcd/models.hpp"

namespace mcd {

// Every knob of a run, across all subcommands; sections that a given mode
// does not use are simply ignored by it (but still validated).
struct RunConfig {
  // top level
  std::string mode = "pretrain-mc";  // pretrain-mc | pretrain-tp |
                                     // pretrain-baseline | probe | finetune |
                                     // changedet
  uint64_t seed = 0;
  std::string output_dir = "runs/out";
  int float_width = 32;
  std::string device = "cpu";
  std::string checkpoint;  // input checkpoint for probe/finetune/changedet

  // [backbone] / [head]
  BackboneSpec backbone;
  ProjectionHeadSpec head;

  // [augment]
  int global_size = 224;
  std::vector<int> local_sizes{184, 164, 144, 124, 104, 84};
  double global_scale_lo = 0.32, global_scale_hi = 1.0;
  double local_scale_lo = 0.05, local_scale_hi = 0.32;
  int baseline_local_size = 96;  // pretrain-baseline: six copies of this size

  // [optimizer]
  double base_lr = 5e-4;
  double weight_decay = 0.04;
  int batch_size = 16;

  // [schedule]
  int epochs = 30;
  int warmup_epochs = 10;
  int64_t max_steps = -1;
  double tau_s = 0.1;
  double teacher_temp_start = 0.04;
  double teacher_temp_end = 0.07;
  int teacher_temp_warmup_epochs = 30;
  double center_momentum = 0.9;
  bool centering = true;

  // [data]
  std::string data_dir;
  std::string layout = "classfolders";  // classfolders | multilabel-manifest |
                                        // temporal-stacks | pair-mask
  double val_fraction = 0.2;
  int64_t limit = 0;  // 0 = use everything

  // [probe]
  std::string protocol = "knn";  // knn | linear
  int knn_k = 20;
  double knn_tau = 0.07;
  int probe_epochs = 100;
  double probe_lr = 1e-3;
  int probe_batch_size = 256;

  // [finetune]
  std::string finetune_task = "single";  // single | multi
  int finetune_epochs = 50;
  int finetune_batch_size = 32;
  double finetune_lr = 1e-3;
  std::array<double, 3> finetune_multi_lr{1e-5, 1e-6, 1e-7};
  double finetune_fraction = 1.0;

  // [changedet]
  int changedet_epochs = 20;
  int changedet_batch_size = 32;
  double changedet_lr = 6e-4;

  void validate() const;
  DistillConfig to_distill_config() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s, const std::string& key) {
  try {
    size_t used = 0;
    const double v = std::stod(s, &used);
    MCD_CHECK(used == s.size(), "config: trailing characters after number");
    return v;
  } catch (const InvalidArgument&) {
    throw;
  } catch (const std::exception&) {
    throw InvalidArgument("config: key '" + key + "' needs a number, got '" +
                          s + "'");
  }
}

inline int64_t parse_int(const std::string& s, const std::string& key) {
  try {
    size_t used = 0;
    const long long v = std::stoll(s, &used);
    MCD_CHECK(used == s.size(), "config: trailing characters after integer");
    return v;
  } catch (const InvalidArgument&) {
    throw;
  } catch (const std::exception&) {
    throw InvalidArgument("config: key '" + key + "' needs an integer, got '" +
                          s + "'");
  }
}

inline uint64_t parse_uint(const std::string& s, const std::string& key) {
  // stoull accepts and wraps negative input, so reject the sign up front.
  MCD_CHECK(!s.empty() && s[0] != '-', "config: key '", key,
            "' needs a non-negative integer, got '", s, "'");
  try {
    size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    MCD_CHECK(used == s.size(), "config: trailing characters after integer");
    return v;
  } catch (const InvalidArgument&) {
    throw;
  } catch (const std::exception&) {
    throw InvalidArgument("config: key '" + key +
                          "' needs a non-negative integer, got '" + s + "'");
  }
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw InvalidArgument("config: key '" + key + "' needs true or false, got '" +
                        s + "'");
}

inline std::vector<int> parse_int_list(const std::string& s,
                                       const std::string& key) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty())
      throw InvalidArgument("config: empty element in list for key '" + key +
                            "'");
    out.push_back(int(parse_int(item, key)));
  }
  MCD_CHECK(!out.empty(), "config: key '", key, "' needs a non-empty list");
  return out;
}

inline std::string format_int_list(const std::vector<int>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

// One schema entry: canonical location plus string conversion both ways.
struct ConfigField {
  std::string section;  // "" = top level
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline const std::vector<ConfigField>& config_schema() {
  static const std::vector<ConfigField> schema = [] {
    std::vector<ConfigField> f;
    auto str = [&](const std::string& sec, const std::string& key,
                   std::string RunConfig::* member) {
      f.push_back({sec, key, [member](const RunConfig& c) { return c.*member; },
                   [member](RunConfig& c, const std::string& v) { c.*member = v; }});
    };
    auto dbl = [&](const std::string& sec, const std::string& key,
                   double RunConfig::* member) {
      f.push_back({sec, key,
                   [member](const RunConfig& c) { return format_double(c.*member); },
                   [member, key](RunConfig& c, const std::string& v) {
                     c.*member = parse_double(v, key);
                   }});
    };
    auto num = [&](const std::string& sec, const std::string& key,
                   int RunConfig::* member) {
      f.push_back({sec, key,
                   [member](const RunConfig& c) { return std::to_string(c.*member); },
                   [member, key](RunConfig& c, const std::string& v) {
                     c.*member = int(parse_int(v, key));
                   }});
    };

    str("", "mode", &RunConfig::mode);
    f.push_back({"", "seed",
                 [](const RunConfig& c) { return std::to_string(c.seed); },
                 [](RunConfig& c, const std::string& v) {
                   c.seed = parse_uint(v, "seed");
                 }});
    str("", "output_dir", &RunConfig::output_dir);
    num("", "float_width", &RunConfig::float_width);
    str("", "device", &RunConfig::device);
    str("", "checkpoint", &RunConfig::checkpoint);

    f.push_back({"backbone", "family",
                 [](const RunConfig& c) { return family_name(c.backbone.family); },
                 [](RunConfig& c, const std::string& v) {
                   c.backbone.family = family_from_name(v);
                 }});
    f.push_back({"backbone", "stage_channels",
                 [](const RunConfig& c) {
                   return format_int_list(c.backbone.stage_channels);
                 },
                 [](RunConfig& c, const std::string& v) {
                   c.backbone.stage_channels = parse_int_list(v, "stage_channels");
                 }});
    f.push_back({"backbone", "depth_per_stage",
                 [](const RunConfig& c) {
                   return format_int_list(c.backbone.depth_per_stage);
                 },
                 [](RunConfig& c, const std::string& v) {
                   c.backbone.depth_per_stage = parse_int_list(v, "depth_per_stage");
                 }});
    auto bnum = [&](const std::string& key, int BackboneSpec::* member) {
      f.push_back({"backbone", key,
                   [member](const RunConfig& c) {
                     return std::to_string(c.backbone.*member);
                   },
                   [member, key](RunConfig& c, const std::string& v) {
                     c.backbone.*member = int(parse_int(v, key));
                   }});
    };
    bnum("widening_factor", &BackboneSpec::widening_factor);
    bnum("patch_size", &BackboneSpec::patch_size);
    bnum("embed_dim", &BackboneSpec::embed_dim);
    bnum("num_blocks", &BackboneSpec::num_blocks);
    bnum("num_heads", &BackboneSpec::num_heads);
    bnum("native_size", &BackboneSpec::native_size);

    auto hnum = [&](const std::string& key, int ProjectionHeadSpec::* member) {
      f.push_back({"head", key,
                   [member](const RunConfig& c) {
                     return std::to_string(c.head.*member);
                   },
                   [member, key](RunConfig& c, const std::string& v) {
                     c.head.*member = int(parse_int(v, key));
                   }});
    };
    hnum("hidden_dim", &ProjectionHeadSpec::hidden_dim);
    hnum("bottleneck_dim", &ProjectionHeadSpec::bottleneck_dim);
    hnum("num_prototypes", &ProjectionHeadSpec::num_prototypes);

    num("augment", "global_size", &RunConfig::global_size);
    f.push_back({"augment", "local_sizes",
                 [](const RunConfig& c) { return format_int_list(c.local_sizes); },
                 [](RunConfig& c, const std::string& v) {
                   c.local_sizes = parse_int_list(v, "local_sizes");
                 }});
    dbl("augment", "global_scale_lo", &RunConfig::global_scale_lo);
    dbl("augment", "global_scale_hi", &RunConfig::global_scale_hi);
    dbl("augment", "local_scale_lo", &RunConfig::local_scale_lo);
    dbl("augment", "local_scale_hi", &RunConfig::local_scale_hi);
    num("augment", "baseline_local_size", &RunConfig::baseline_local_size);

    dbl("optimizer", "base_lr", &RunConfig::base_lr);
    dbl("optimizer", "weight_decay", &RunConfig::weight_decay);
    num("optimizer", "batch_size", &RunConfig::batch_size);

    num("schedule", "epochs", &RunConfig::epochs);
    num("schedule", "warmup_epochs", &RunConfig::warmup_epochs);
    f.push_back({"schedule", "max_steps",
                 [](const RunConfig& c) { return std::to_string(c.max_steps); },
                 [](RunConfig& c, const std::string& v) {
                   c.max_steps = parse_int(v, "max_steps");
                 }});
    dbl("schedule", "tau_s", &RunConfig::tau_s);
    dbl("schedule", "teacher_temp_start", &RunConfig::teacher_temp_start);
    dbl("schedule", "teacher_temp_end", &RunConfig::teacher_temp_end);
    num("schedule", "teacher_temp_warmup_epochs",
        &RunConfig::teacher_temp_warmup_epochs);
    dbl("schedule", "center_momentum", &RunConfig::center_momentum);
    f.push_back({"schedule", "centering",
                 [](const RunConfig& c) { return c.centering ? "true" : "false"; },
                 [](RunConfig& c, const std::string& v) {
                   c.centering = parse_bool(v, "centering");
                 }});

    str("data", "dir", &RunConfig::data_dir);
    str("data", "layout", &RunConfig::layout);
    dbl("data", "val_fraction", &RunConfig::val_fraction);
    f.push_back({"data", "limit",
                 [](const RunConfig& c) { return std::to_string(c.limit); },
                 [](RunConfig& c, const std::string& v) {
                   c.limit = parse_int(v, "limit");
                 }});

    str("probe", "protocol", &RunConfig::protocol);
    num("probe", "k", &RunConfig::knn_k);
    dbl("probe", "tau", &RunConfig::knn_tau);
    num("probe", "epochs", &RunConfig::probe_epochs);
    dbl("probe", "lr", &RunConfig::probe_lr);
    num("probe", "batch_size", &RunConfig::probe_batch_size);

    str("finetune", "task", &RunConfig::finetune_task);
    num("finetune", "epochs", &RunConfig::finetune_epochs);
    num("finetune", "batch_size", &RunConfig::finetune_batch_size);
    dbl("finetune", "lr", &RunConfig::finetune_lr);
    for (size_t stage = 0; stage < 3; ++stage) {
      const std::string key = "multi_lr_stage" + std::to_string(stage + 1);
      f.push_back({"finetune", key,
                   [stage](const RunConfig& c) {
                     return format_double(c.finetune_multi_lr[stage]);
                   },
                   [stage, key](RunConfig& c, const std::string& v) {
                     c.finetune_multi_lr[stage] = parse_double(v, key);
                   }});
    }
    dbl("finetune", "fraction", &RunConfig::finetune_fraction);

    num("changedet", "epochs", &RunConfig::changedet_epochs);
    num("changedet", "batch_size", &RunConfig::changedet_batch_size);
    dbl("changedet", "lr", &RunConfig::changedet_lr);
    return f;
  }();
  return schema;
}

inline const ConfigField* find_field(const std::string& section,
                                     const std::string& key) {
  for (const auto& field : config_schema())
    if (field.section == section && field.key == key) return &field;
  return nullptr;
}

}  // namespace detail

// Parses the INI-style text. Unknown sections or keys, malformed lines, and
// duplicate keys are all rejected; unset keys keep their defaults.
inline RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string line = detail::trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      MCD_CHECK(line.back() == ']', "config line ", lineno,
                ": unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      bool known = false;
      for (const auto& field : detail::config_schema())
        known |= field.section == section;
      MCD_CHECK(known, "config line ", lineno, ": unknown section [", section,
                "]");
      continue;
    }
    const size_t eq = line.find('=');
    MCD_CHECK(eq != std::string::npos, "config line ", lineno,
              ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const detail::ConfigField* field = detail::find_field(section, key);
    MCD_CHECK(field != nullptr, "config line ", lineno, ": unknown key '",
              section.empty() ? key : section + "." + key, "'");
    const std::string full = section + "." + key;
    MCD_CHECK(seen.insert(full).second, "config line ", lineno,
              ": duplicate key '", key, "'");
    field->set(cfg, value);
  }
  return cfg;
}

// Canonical form: every known key in schema order, top-level keys first,
// then one block per section.
inline std::string serialize_run_config(const RunConfig& cfg) {
  std::string out;
  std::string section;
  bool first = true;
  for (const auto& field : detail::config_schema()) {
    if (field.section != section || first) {
      if (!field.section.empty()) {
        if (!first) out += "\n";
        out += "[" + field.section + "]\n";
      }
      section = field.section;
      first = false;
    }
    out += field.key + " = " + field.get(cfg) + "\n";
  }
  return out;
}

// Command-line override: "key=value" or "section.key=value".
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const size_t eq = assignment.find('=');
  MCD_CHECK(eq != std::string::npos,
            "override must look like section.key=value: ", assignment);
  std::string path = detail::trim(assignment.substr(0, eq));
  const std::string value = detail::trim(assignment.substr(eq + 1));
  std::string section;
  const size_t dot = path.find('.');
  if (dot != std::string::npos) {
    section = path.substr(0, dot);
    path = path.substr(dot + 1);
  }
  const detail::ConfigField* field = detail::find_field(section, path);
  MCD_CHECK(field != nullptr, "unknown config key in override: ", assignment);
  field->set(cfg, value);
}

inline void RunConfig::validate() const {
  static const std::set<std::string> kModes{
      "pretrain-mc", "pretrain-tp", "pretrain-baseline",
      "probe",       "finetune",    "changedet"};
  MCD_CHECK(kModes.count(mode) == 1, "config: unknown mode '", mode, "'");
  MCD_CHECK(float_width == 32 || float_width == 64,
            "config: float_width must be 32 or 64");
  MCD_CHECK(device == "cpu", "config: only device cpu is supported");
  MCD_CHECK(!output_dir.empty(), "config: output_dir must be set");
  backbone.validate();
  head.validate();
  MCD_CHECK(global_size >= 1 && baseline_local_size >= 1,
            "config: crop sizes must be >= 1");
  for (int s : local_sizes)
    MCD_CHECK(s >= 1, "config: local sizes must be >= 1");
  MCD_CHECK(global_scale_lo > 0 && global_scale_lo <= global_scale_hi &&
                global_scale_hi <= 1.0,
            "config: global scale range invalid");
  MCD_CHECK(local_scale_lo > 0 && local_scale_lo <= local_scale_hi &&
                local_scale_hi <= 1.0,
            "config: local scale range invalid");
  MCD_CHECK(base_lr >= 0 && weight_decay >= 0, "config: optimizer values negative");
  MCD_CHECK(batch_size >= 1 && epochs >= 1 && warmup_epochs >= 0,
            "config: schedule counts invalid");
  MCD_CHECK(tau_s > 0 && teacher_temp_start > 0 && teacher_temp_end > 0,
            "config: temperatures must be positive");
  MCD_CHECK(teacher_temp_warmup_epochs >= 0,
            "config: teacher_temp_warmup_epochs must be >= 0");
  MCD_CHECK(center_momentum >= 0 && center_momentum <= 1,
            "config: center_momentum outside [0,1]");
  static const std::set<std::string> kLayouts{
      "classfolders", "multilabel-manifest", "temporal-stacks", "pair-mask"};
  MCD_CHECK(kLayouts.count(layout) == 1, "config: unknown layout '", layout, "'");
  MCD_CHECK(val_fraction > 0 && val_fraction < 1,
            "config: val_fraction must be in (0,1)");
  MCD_CHECK(limit >= 0, "config: limit must be >= 0");
  MCD_CHECK(protocol == "knn" || protocol == "linear",
            "config: probe protocol must be knn or linear");
  MCD_CHECK(knn_k >= 1 && knn_tau > 0, "config: knn parameters invalid");
  MCD_CHECK(probe_epochs >= 0 && probe_lr > 0 && probe_batch_size >= 1,
            "config: probe training parameters invalid");
  MCD_CHECK(finetune_task == "single" || finetune_task == "multi",
            "config: finetune task must be single or multi");
  MCD_CHECK(finetune_epochs >= 1 && finetune_batch_size >= 1 && finetune_lr > 0,
            "config: finetune parameters invalid");
  for (double lr : finetune_multi_lr)
    MCD_CHECK(lr > 0, "config: finetune stage rates must be positive");
  MCD_CHECK(finetune_fraction > 0 && finetune_fraction <= 1,
            "config: finetune fraction must be in (0,1]");
  MCD_CHECK(changedet_epochs >= 1 && changedet_batch_size >= 1 &&
                changedet_lr > 0,
            "config: changedet parameters invalid");
}

inline DistillConfig RunConfig::to_distill_config() const {
  DistillConfig d;
  d.backbone = backbone;
  d.head = head;
  d.views.global_size = global_size;
  d.views.local_sizes = local_sizes;
  d.views.global_scale_lo = global_scale_lo;
  d.views.global_scale_hi = global_scale_hi;
  d.views.local_scale_lo = local_scale_lo;
  d.views.local_scale_hi = local_scale_hi;
  if (mode == "pretrain-baseline")
    d.views = ViewSetConfig::baseline_from(d.views, baseline_local_size);
  d.mode = mode == "pretrain-tp" ? PretrainMode::kTP
           : mode == "pretrain-baseline" ? PretrainMode::kBaseline
                                         : PretrainMode::kMC;
  d.epochs = epochs;
  d.batch_size = batch_size;
  d.base_lr = base_lr;
  d.warmup_epochs = warmup_epochs;
  d.weight_decay = weight_decay;
  d.tau_s = tau_s;
  d.tau_t_start = teacher_temp_start;
  d.tau_t_end = teacher_temp_end;
  d.tau_t_warmup_epochs = teacher_temp_warmup_epochs;
  d.center_momentum = center_momentum;
  d.centering_enabled = centering;
  d.seed = seed;
  return d;
}

}  // namespace mcd
