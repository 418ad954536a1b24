#pragma once

// JSON (de)serialization for the config structs, plus a canonical config
// hash. nlohmann::json keeps object keys sorted, so dumps are deterministic
// and hashing the dump is stable across runs.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "duodiff/diffusion.hpp"
#include "duodiff/model.hpp"
#include "duodiff/phantom.hpp"
#include "duodiff/schedule.hpp"
#include "duodiff/train.hpp"
#include "duodiff/util.hpp"

namespace duodiff {

using json = nlohmann::json;

inline constexpr const char* tool_version = "duodiff 0.1.0";
inline constexpr const char* sampler_name = "ddpm_ancestral";

// ---- prompt_spec ----
inline json prompt_to_json(const prompt_spec& p) {
  auto f = [](const std::optional<std::string>& v) {
    return v ? json(*v) : json(nullptr);
  };
  return json{{"label", f(p.label)},
              {"modality", f(p.modality)},
              {"region", f(p.region)},
              {"condition", f(p.condition)}};
}

inline prompt_spec prompt_from_json(const json& j) {
  auto f = [&](const char* key) -> std::optional<std::string> {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<std::string>();
  };
  prompt_spec p;
  p.label = f("label");
  p.modality = f("modality");
  p.region = f("region");
  p.condition = f("condition");
  p.validate();
  return p;
}

// ---- corpus_config ----
inline json corpus_to_json(const corpus_config& c) {
  return json{{"image_size", c.image_size}, {"channels", c.channels}, {"classes", c.classes}};
}

inline corpus_config corpus_from_json(const json& j) {
  corpus_config c;
  c.image_size = j.at("image_size").get<int>();
  c.channels = j.at("channels").get<int>();
  c.classes = j.at("classes").get<int>();
  c.validate();
  return c;
}

// ---- model_config ----
inline json model_to_json(const model_config& m) {
  return json{{"image_size", m.image_size},
              {"image_channels", m.image_channels},
              {"codec", m.codec},
              {"base_width", m.base_width},
              {"channel_mult", m.channel_mult},
              {"bottleneck_mult", m.bottleneck_mult},
              {"heads", m.heads},
              {"gn_groups", m.gn_groups},
              {"time_dim", m.time_dim},
              {"time_hidden", m.time_hidden},
              {"text_dim", m.text_dim},
              {"attn_stages", m.attn_stages},
              {"jca_stages", m.jca_stages},
              {"jca_mask_to_image", m.jca_mask_to_image},
              {"jca_image_to_mask", m.jca_image_to_mask},
              {"schedule_T", m.schedule_T}};
}

inline model_config model_from_json(const json& j) {
  model_config m;
  m.image_size = j.at("image_size").get<int>();
  m.image_channels = j.at("image_channels").get<int>();
  m.codec = j.at("codec").get<std::string>();
  m.base_width = j.at("base_width").get<int>();
  m.channel_mult = j.at("channel_mult").get<std::vector<int>>();
  m.bottleneck_mult = j.at("bottleneck_mult").get<int>();
  m.heads = j.at("heads").get<int>();
  m.gn_groups = j.at("gn_groups").get<int>();
  m.time_dim = j.at("time_dim").get<int>();
  m.time_hidden = j.at("time_hidden").get<int>();
  m.text_dim = j.at("text_dim").get<int>();
  m.attn_stages = j.at("attn_stages").get<std::vector<int>>();
  m.jca_stages = j.at("jca_stages").get<std::vector<int>>();
  m.jca_mask_to_image = j.at("jca_mask_to_image").get<bool>();
  m.jca_image_to_mask = j.at("jca_image_to_mask").get<bool>();
  m.schedule_T = j.at("schedule_T").get<int>();
  m.validate();
  return m;
}

// ---- train_config ----
inline json train_to_json(const train_config& t) {
  return json{{"steps", t.steps},
              {"batch_size", t.batch_size},
              {"lr", t.lr},
              {"weight_decay", t.weight_decay},
              {"p_drop", t.p_drop},
              {"loss", t.loss},
              {"seed", hex64(t.seed)},
              {"checkpoint_every", t.checkpoint_every},
              {"log_every", t.log_every}};
}

// 64-bit values are serialized as 16-digit hex strings (JSON numbers cannot
// hold them losslessly); plain numbers are accepted for hand-written configs.
inline uint64_t u64_from_json(const json& j) {
  if (j.is_string()) {
    std::string s = j.get<std::string>();
    size_t used = 0;
    uint64_t v = std::stoull(s, &used, 16);
    if (used != s.size()) throw config_error("bad hex value '" + s + "'");
    return v;
  }
  return j.get<uint64_t>();
}

inline train_config train_from_json(const json& j) {
  train_config t;
  t.steps = j.at("steps").get<int>();
  t.batch_size = j.at("batch_size").get<int>();
  t.lr = j.at("lr").get<float>();
  t.weight_decay = j.at("weight_decay").get<float>();
  t.p_drop = j.at("p_drop").get<float>();
  t.loss = j.at("loss").get<std::string>();
  t.seed = u64_from_json(j.at("seed"));
  t.checkpoint_every = j.at("checkpoint_every").get<int>();
  t.log_every = j.at("log_every").get<int>();
  t.validate();
  return t;
}

// ---- sampler_config ----
inline json sampler_to_json(const sampler_config& s) {
  return json{{"steps", s.steps},
              {"guidance", s.guidance},
              {"conditional_only", s.conditional_only}};
}

inline sampler_config sampler_from_json(const json& j) {
  sampler_config s;
  s.steps = j.at("steps").get<int>();
  s.guidance = j.at("guidance").get<float>();
  if (j.contains("conditional_only")) s.conditional_only = j.at("conditional_only").get<bool>();
  return s;
}

// ---- schedule ----
inline json schedule_to_json(const noise_schedule& s) {
  return json{{"T", s.T}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end}};
}

inline noise_schedule schedule_from_json(const json& j) {
  return noise_schedule::linear(j.at("T").get<int>(), j.at("beta_start").get<float>(),
                                j.at("beta_end").get<float>());
}

// Canonical identity of a trained model: architecture + schedule + prompt
// vocabulary. Two checkpoints are interchangeable iff these hashes agree.
inline uint64_t config_hash(const model_config& m, const noise_schedule& s) {
  json j{{"model", model_to_json(m)},
         {"schedule", schedule_to_json(s)},
         {"vocabulary", vocabulary::instance().to_string()}};
  return fnv1a64(j.dump());
}

}  // namespace duodiff
