#pragma once

// Checkpoint container:
//   line 1: "DUODIFF-CKPT v1"
//   line 2: one JSON header (model config, schedule, step, optimizer info,
//           config hash, tool version)
//   then, per array: "ARRAY <name> <count>\n" + count raw little-endian
//   float32 values + "\n"
//   final line: "END"
//
// Parameter arrays use their registry names; optimizer moments are stored as
// "opt.m.<name>" / "opt.v.<name>". Loading parses the entire file before any
// state is constructed, so a truncated or mismatched file never yields a
// partially-restored model. Saving a restored checkpoint reproduces the
// original bytes.

#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "duodiff/adamw.hpp"
#include "duodiff/model.hpp"
#include "duodiff/schedule.hpp"
#include "duodiff/serialize.hpp"
#include "duodiff/util.hpp"

namespace duodiff {

inline constexpr const char* checkpoint_magic = "DUODIFF-CKPT v1";

struct checkpoint {
  model_config model_cfg;
  int schedule_T = 0;
  float beta_start = 0.0f, beta_end = 0.0f;
  int64_t step = 0;
  bool has_optimizer = false;
  int64_t optimizer_step = 0;
  std::map<std::string, std::vector<float>> arrays;

  noise_schedule make_schedule() const {
    return noise_schedule::linear(schedule_T, beta_start, beta_end);
  }
};

namespace ckptdetail {

inline void append_array(std::string& out, const std::string& name,
                         std::span<const float> vals) {
  out += "ARRAY " + name + " " + std::to_string(vals.size()) + "\n";
  size_t at = out.size();
  out.resize(at + vals.size() * sizeof(float));
  std::memcpy(out.data() + at, vals.data(), vals.size() * sizeof(float));
  out += "\n";
}

}  // namespace ckptdetail

inline void save_checkpoint(const std::string& path, const denoiser& model,
                            const noise_schedule& s, int64_t step,
                            const adamw* opt = nullptr) {
  json header{{"magic_version", 1},
              {"tool", tool_version},
              {"model", model_to_json(model.config())},
              {"schedule", schedule_to_json(s)},
              {"step", step},
              {"optimizer",
               json{{"present", opt != nullptr},
                    {"step_count", opt ? opt->step_count() : 0}}},
              {"config_hash", hex64(config_hash(model.config(), s))}};
  std::string out = std::string(checkpoint_magic) + "\n" + header.dump() + "\n";
  const auto& registry = model.params();
  for (const auto& np : registry) ckptdetail::append_array(out, np.name, np.t.values());
  if (opt) {
    if (opt->param_count() != registry.size())
      throw std::runtime_error("save_checkpoint: optimizer is not bound to this model");
    for (size_t i = 0; i < registry.size(); ++i)
      ckptdetail::append_array(out, "opt.m." + registry[i].name, opt->moment1(i));
    for (size_t i = 0; i < registry.size(); ++i)
      ckptdetail::append_array(out, "opt.v." + registry[i].name, opt->moment2(i));
  }
  out += "END\n";
  write_file(path, out);
}

inline checkpoint read_checkpoint(const std::string& path) {
  std::string data = read_file(path);
  size_t pos = 0;
  auto read_line = [&]() -> std::string {
    size_t nl = data.find('\n', pos);
    if (nl == std::string::npos)
      throw std::runtime_error("checkpoint: " + path + ": truncated (missing newline)");
    std::string line = data.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };

  if (read_line() != checkpoint_magic)
    throw std::runtime_error("checkpoint: " + path + ": bad magic line");
  json header;
  try {
    header = json::parse(read_line());
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint: " + path + ": bad header: " + e.what());
  }

  checkpoint ck;
  ck.model_cfg = model_from_json(header.at("model"));
  const json& sj = header.at("schedule");
  ck.schedule_T = sj.at("T").get<int>();
  ck.beta_start = sj.at("beta_start").get<float>();
  ck.beta_end = sj.at("beta_end").get<float>();
  ck.step = header.at("step").get<int64_t>();
  ck.has_optimizer = header.at("optimizer").at("present").get<bool>();
  ck.optimizer_step = header.at("optimizer").at("step_count").get<int64_t>();

  uint64_t stored_hash = u64_from_json(header.at("config_hash"));
  uint64_t actual = config_hash(ck.model_cfg, ck.make_schedule());
  if (stored_hash != actual)
    throw std::runtime_error("checkpoint: " + path + ": config hash mismatch (stored " +
                             hex64(stored_hash) + ", recomputed " + hex64(actual) + ")");

  while (true) {
    std::string line = read_line();
    if (line == "END") break;
    if (line.rfind("ARRAY ", 0) != 0)
      throw std::runtime_error("checkpoint: " + path + ": unexpected record '" + line + "'");
    size_t sp = line.rfind(' ');
    std::string name = line.substr(6, sp - 6);
    size_t count = std::stoull(line.substr(sp + 1));
    size_t bytes = count * sizeof(float);
    if (data.size() - pos < bytes + 1)
      throw std::runtime_error("checkpoint: " + path + ": truncated array '" + name + "'");
    std::vector<float> vals(count);
    std::memcpy(vals.data(), data.data() + pos, bytes);
    pos += bytes;
    if (data[pos] != '\n')
      throw std::runtime_error("checkpoint: " + path + ": array '" + name +
                               "' missing terminator");
    ++pos;
    if (!ck.arrays.emplace(name, std::move(vals)).second)
      throw std::runtime_error("checkpoint: " + path + ": duplicate array '" + name + "'");
  }
  return ck;
}

// Builds a fresh model and overwrites every registered parameter from the
// checkpoint; every parameter must be present with a matching size.
inline denoiser restore_model(const checkpoint& ck) {
  denoiser model(ck.model_cfg, /*init_seed=*/0);
  for (const auto& np : model.params()) {
    auto it = ck.arrays.find(np.name);
    if (it == ck.arrays.end())
      throw std::runtime_error("checkpoint: missing parameter array '" + np.name + "'");
    if (static_cast<int64_t>(it->second.size()) != np.t.size())
      throw std::runtime_error("checkpoint: parameter '" + np.name + "' has " +
                               std::to_string(it->second.size()) + " values, expected " +
                               std::to_string(np.t.size()));
    tensor t = np.t;  // handle copy; storage is shared
    std::copy(it->second.begin(), it->second.end(), t.values_mut().begin());
  }
  return model;
}

// Rebuilds an optimizer bound to `model` with moments and step count
// restored. The checkpoint must contain optimizer state.
inline adamw restore_optimizer(const checkpoint& ck, const denoiser& model,
                               const adamw_config& cfg) {
  if (!ck.has_optimizer)
    throw std::runtime_error("checkpoint: no optimizer state to restore");
  adamw opt(cfg, model.trainable());
  const auto& registry = model.params();
  for (size_t i = 0; i < registry.size(); ++i) {
    for (const char* kind : {"m", "v"}) {
      std::string key = std::string("opt.") + kind + "." + registry[i].name;
      auto it = ck.arrays.find(key);
      if (it == ck.arrays.end())
        throw std::runtime_error("checkpoint: missing optimizer array '" + key + "'");
      auto& dst = kind[0] == 'm' ? opt.moment1(i) : opt.moment2(i);
      if (it->second.size() != dst.size())
        throw std::runtime_error("checkpoint: optimizer array '" + key + "' size mismatch");
      dst = it->second;
    }
  }
  opt.set_step_count(ck.optimizer_step);
  return opt;
}

}  // namespace duodiff
