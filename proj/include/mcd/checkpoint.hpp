#pragma once

// Checkpoint container: one file holding a JSON manifest (format version,
// model specs, config snapshot, parameter names + shapes) followed by one
// little-endian binary blob per named parameter at the declared float width,
// and a trailing FNV-1a content hash that is verified on load.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcd/common.hpp"
#include "mcd/models.hpp"

namespace mcd {

struct NamedArray {
  std::string name;
  std::vector<int64_t> shape;
  std::vector<double> values;  // always double in memory; width applies on disk

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
  }
};

struct Checkpoint {
  int format_version = 1;
  int float_width = 32;
  int64_t step = 0;
  BackboneSpec backbone;
  ProjectionHeadSpec head;
  std::string config_snapshot;       // canonical serialized run config
  std::vector<NamedArray> teacher;   // blob order: teacher, student, center
  std::vector<NamedArray> student;   // empty when not saved
  std::vector<double> center;
};

namespace detail {

inline constexpr char kCheckpointMagic[9] = "MCDCKPT1";

inline uint64_t fnv1a64(const char* data, size_t n) {
  uint64_t h = 14695981039346656037ULL;
  for (size_t i = 0; i < n; ++i) {
    h ^= uint64_t(uint8_t(data[i]));
    h *= 1099511628211ULL;
  }
  return h;
}

inline void put_u64le(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline uint64_t get_u64le(const std::string& in, size_t off) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(in[off + size_t(i)])) << (8 * i);
  return v;
}

inline void put_values_le(std::string& out, const std::vector<double>& vals,
                          int width) {
  if (width == 64) {
    for (double v : vals) {
      uint64_t bits;
      std::memcpy(&bits, &v, 8);
      put_u64le(out, bits);
    }
  } else {
    for (double v : vals) {
      const float f = float(v);
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      for (int i = 0; i < 4; ++i) out.push_back(char((bits >> (8 * i)) & 0xff));
    }
  }
}

inline std::vector<double> get_values_le(const std::string& in, size_t off,
                                         int64_t count, int width) {
  std::vector<double> vals(static_cast<size_t>(count));
  if (width == 64) {
    for (int64_t i = 0; i < count; ++i) {
      const uint64_t bits = get_u64le(in, off + size_t(i) * 8);
      double v;
      std::memcpy(&v, &bits, 8);
      vals[size_t(i)] = v;
    }
  } else {
    for (int64_t i = 0; i < count; ++i) {
      uint32_t bits = 0;
      for (int b = 0; b < 4; ++b)
        bits |= uint32_t(uint8_t(in[off + size_t(i) * 4 + size_t(b)])) << (8 * b);
      float f;
      std::memcpy(&f, &bits, 4);
      vals[size_t(i)] = double(f);
    }
  }
  return vals;
}

inline nlohmann::json backbone_spec_json(const BackboneSpec& s) {
  return {{"family", family_name(s.family)},
          {"stage_channels", s.stage_channels},
          {"depth_per_stage", s.depth_per_stage},
          {"widening_factor", s.widening_factor},
          {"patch_size", s.patch_size},
          {"embed_dim", s.embed_dim},
          {"num_blocks", s.num_blocks},
          {"num_heads", s.num_heads},
          {"native_size", s.native_size}};
}

inline BackboneSpec backbone_spec_from_json(const nlohmann::json& j) {
  BackboneSpec s;
  s.family = family_from_name(j.at("family").get<std::string>());
  s.stage_channels = j.at("stage_channels").get<std::vector<int>>();
  s.depth_per_stage = j.at("depth_per_stage").get<std::vector<int>>();
  s.widening_factor = j.at("widening_factor").get<int>();
  s.patch_size = j.at("patch_size").get<int>();
  s.embed_dim = j.at("embed_dim").get<int>();
  s.num_blocks = j.at("num_blocks").get<int>();
  s.num_heads = j.at("num_heads").get<int>();
  s.native_size = j.at("native_size").get<int>();
  return s;
}

inline nlohmann::json head_spec_json(const ProjectionHeadSpec& s) {
  return {{"hidden_dim", s.hidden_dim},
          {"bottleneck_dim", s.bottleneck_dim},
          {"num_prototypes", s.num_prototypes},
          {"layers", s.layers}};
}

inline ProjectionHeadSpec head_spec_from_json(const nlohmann::json& j) {
  ProjectionHeadSpec s;
  s.hidden_dim = j.at("hidden_dim").get<int>();
  s.bottleneck_dim = j.at("bottleneck_dim").get<int>();
  s.num_prototypes = j.at("num_prototypes").get<int>();
  s.layers = j.at("layers").get<int>();
  return s;
}

inline nlohmann::json arrays_manifest(const std::vector<NamedArray>& arrays) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& a : arrays)
    out.push_back({{"name", a.name}, {"shape", a.shape}});
  return out;
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  MCD_CHECK(ck.float_width == 32 || ck.float_width == 64,
            "checkpoint: float_width must be 32 or 64");
  MCD_CHECK(!ck.teacher.empty(), "checkpoint: teacher parameters missing");
  nlohmann::json manifest = {
      {"format_version", ck.format_version},
      {"float_width", ck.float_width},
      {"step", ck.step},
      {"backbone", detail::backbone_spec_json(ck.backbone)},
      {"head", detail::head_spec_json(ck.head)},
      {"config_snapshot", ck.config_snapshot},
      {"teacher", detail::arrays_manifest(ck.teacher)},
      {"student", detail::arrays_manifest(ck.student)},
      {"center_size", int64_t(ck.center.size())},
  };
  const std::string mbytes = manifest.dump();

  std::string out(detail::kCheckpointMagic, 8);
  detail::put_u64le(out, uint64_t(mbytes.size()));
  out += mbytes;
  for (const auto& a : ck.teacher) {
    MCD_CHECK(int64_t(a.values.size()) == a.numel(),
              "checkpoint: array '", a.name, "' size does not match its shape");
    detail::put_values_le(out, a.values, ck.float_width);
  }
  for (const auto& a : ck.student) {
    MCD_CHECK(int64_t(a.values.size()) == a.numel(),
              "checkpoint: array '", a.name, "' size does not match its shape");
    detail::put_values_le(out, a.values, ck.float_width);
  }
  detail::put_values_le(out, ck.center, ck.float_width);
  detail::put_u64le(out, detail::fnv1a64(out.data(), out.size()));
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  MCD_REQUIRE(bytes.size() >= 24, "checkpoint: file too short");
  MCD_REQUIRE(bytes.compare(0, 8, detail::kCheckpointMagic, 8) == 0,
              "checkpoint: bad magic, not a checkpoint file");
  const uint64_t stored = detail::get_u64le(bytes, bytes.size() - 8);
  const uint64_t actual = detail::fnv1a64(bytes.data(), bytes.size() - 8);
  MCD_REQUIRE(stored == actual,
              "checkpoint: content hash mismatch, file is corrupt");

  const uint64_t mlen = detail::get_u64le(bytes, 8);
  MCD_REQUIRE(16 + mlen + 8 <= bytes.size(), "checkpoint: truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(16, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw RuntimeFailure(std::string("checkpoint: manifest is not valid JSON: ") +
                         e.what());
  }

  Checkpoint ck;
  try {
    ck.format_version = manifest.at("format_version").get<int>();
    MCD_REQUIRE(ck.format_version == 1, "checkpoint: unsupported format version ",
                ck.format_version);
    ck.float_width = manifest.at("float_width").get<int>();
    MCD_REQUIRE(ck.float_width == 32 || ck.float_width == 64,
                "checkpoint: bad float width ", ck.float_width);
    ck.step = manifest.at("step").get<int64_t>();
    ck.backbone = detail::backbone_spec_from_json(manifest.at("backbone"));
    ck.head = detail::head_spec_from_json(manifest.at("head"));
    ck.config_snapshot = manifest.at("config_snapshot").get<std::string>();

    auto read_arrays = [&](const nlohmann::json& list) {
      std::vector<NamedArray> arrays;
      for (const auto& item : list) {
        NamedArray a;
        a.name = item.at("name").get<std::string>();
        a.shape = item.at("shape").get<std::vector<int64_t>>();
        arrays.push_back(std::move(a));
      }
      return arrays;
    };
    ck.teacher = read_arrays(manifest.at("teacher"));
    ck.student = read_arrays(manifest.at("student"));

    const int width_bytes = ck.float_width / 8;
    size_t off = 16 + mlen;
    auto fill = [&](std::vector<NamedArray>& arrays) {
      for (auto& a : arrays) {
        const int64_t n = a.numel();
        MCD_REQUIRE(off + size_t(n) * size_t(width_bytes) + 8 <= bytes.size(),
                    "checkpoint: blob for '", a.name, "' is truncated");
        a.values = detail::get_values_le(bytes, off, n, ck.float_width);
        off += size_t(n) * size_t(width_bytes);
      }
    };
    fill(ck.teacher);
    fill(ck.student);
    const int64_t csize = manifest.at("center_size").get<int64_t>();
    MCD_REQUIRE(off + size_t(csize) * size_t(width_bytes) + 8 == bytes.size(),
                "checkpoint: blob section has wrong total size");
    ck.center = detail::get_values_le(bytes, off, csize, ck.float_width);
  } catch (const nlohmann::json::exception& e) {
    throw RuntimeFailure(std::string("checkpoint: manifest field error: ") +
                         e.what());
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  const std::string bytes = encode_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  MCD_REQUIRE(out.good(), "checkpoint: cannot open '", path, "' for writing");
  out.write(bytes.data(), std::streamsize(bytes.size()));
  out.close();
  MCD_REQUIRE(out.good(), "checkpoint: short write to '", path, "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  MCD_REQUIRE(in.good(), "checkpoint: cannot open '", path, "'");
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

// --- model <-> checkpoint transfer -----------------------------------------

template <typename T>
std::vector<NamedArray> arrays_from_params(const std::vector<ParamRef<T>>& params) {
  std::vector<NamedArray> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    NamedArray a;
    a.name = p.name;
    a.shape = p.param->value.shape();
    a.values.resize(static_cast<size_t>(p.param->value.numel()));
    for (int64_t i = 0; i < p.param->value.numel(); ++i)
      a.values[size_t(i)] = double(p.param->value[i]);
    out.push_back(std::move(a));
  }
  return out;
}

// Copies by name; every parameter must be present with the matching shape.
template <typename T>
void load_arrays_into_params(const std::vector<NamedArray>& arrays,
                             const std::vector<ParamRef<T>>& params) {
  MCD_REQUIRE(arrays.size() == params.size(),
              "checkpoint: parameter count mismatch (", arrays.size(), " vs ",
              params.size(), ")");
  for (size_t i = 0; i < params.size(); ++i) {
    const NamedArray* found = nullptr;
    for (const auto& a : arrays)
      if (a.name == params[i].name) {
        found = &a;
        break;
      }
    MCD_REQUIRE(found != nullptr, "checkpoint: missing parameter '",
                params[i].name, "'");
    MCD_REQUIRE(found->shape == params[i].param->value.shape(),
                "checkpoint: shape mismatch for '", params[i].name, "'");
    for (int64_t j = 0; j < params[i].param->value.numel(); ++j)
      params[i].param->value[j] = T(found->values[size_t(j)]);
  }
}

// Builds a model from the checkpoint specs and installs the teacher weights.
template <typename T>
FullModel<T> model_from_checkpoint(const Checkpoint& ck) {
  ck.backbone.validate();
  ck.head.validate();
  FullModel<T> model(ck.backbone, ck.head);
  load_arrays_into_params(ck.teacher, model.params());
  return model;
}

}  // namespace mcd
