#pragma once

// Structured prompts over a closed vocabulary, and their frozen embeddings.
//
// A prompt has four axes: target label, imaging modality, region, condition.
// Embeddings are rows of a frozen random table (seeded once, never trained);
// the image-stream and mask-stream embeddings differ only in a reserved
// stream-tag slot. The learned null embedding pair used for classifier-free
// guidance lives with the model parameters, not here.

#include <array>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "duodiff/rng.hpp"
#include "duodiff/tensor.hpp"
#include "duodiff/util.hpp"

namespace duodiff {

struct vocabulary {
  std::vector<std::string> labels = {"round_dim", "elongated_dim", "round_bright",
                                     "elongated_bright"};
  std::vector<std::string> modalities = {"smooth", "grainy", "striped"};
  std::vector<std::string> regions = {"nw", "ne", "sw", "se"};
  std::vector<std::string> conditions = {"solitary", "paired", "scattered"};

  static const vocabulary& instance() {
    static vocabulary v;
    return v;
  }

  std::string to_string() const {
    auto join = [](const std::vector<std::string>& v) {
      std::string s;
      for (size_t i = 0; i < v.size(); ++i) s += (i ? "|" : "") + v[i];
      return s;
    };
    return "label:" + join(labels) + ";modality:" + join(modalities) +
           ";region:" + join(regions) + ";condition:" + join(conditions);
  }

  static int index_of(const std::vector<std::string>& v, const std::string& tok,
                      const char* axis) {
    for (size_t i = 0; i < v.size(); ++i)
      if (v[i] == tok) return static_cast<int>(i);
    std::string known;
    for (size_t i = 0; i < v.size(); ++i) known += (i ? ", " : "") + v[i];
    throw config_error(std::string("unknown ") + axis + " token '" + tok +
                       "'; vocabulary: " + known);
  }
};

// Any field may be empty (null); the all-null spec selects the learned null
// embedding pair used as the unconditional branch.
struct prompt_spec {
  std::optional<std::string> label;
  std::optional<std::string> modality;
  std::optional<std::string> region;
  std::optional<std::string> condition;

  bool all_null() const { return !label && !modality && !region && !condition; }

  static prompt_spec null_spec() { return {}; }

  void validate(const vocabulary& v = vocabulary::instance()) const {
    if (label) vocabulary::index_of(v.labels, *label, "label");
    if (modality) vocabulary::index_of(v.modalities, *modality, "modality");
    if (region) vocabulary::index_of(v.regions, *region, "region");
    if (condition) vocabulary::index_of(v.conditions, *condition, "condition");
  }

  std::string to_string() const {
    auto f = [](const std::optional<std::string>& v) { return v ? *v : "null"; };
    return "label=" + f(label) + ",modality=" + f(modality) + ",region=" + f(region) +
           ",condition=" + f(condition);
  }

  // Parses "label=...,modality=...,region=...,condition=..."; missing keys
  // and the literal value "null" mean a null field. Unknown keys are errors.
  static prompt_spec parse(const std::string& s,
                           const vocabulary& v = vocabulary::instance()) {
    static const char* grammar =
        "expected \"label=<tok>,modality=<tok>,region=<tok>,condition=<tok>\" "
        "(any field may be omitted or 'null')";
    prompt_spec p;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      auto eq = item.find('=');
      if (eq == std::string::npos)
        throw config_error("bad prompt fragment '" + item + "'; " + grammar);
      std::string key = item.substr(0, eq), val = item.substr(eq + 1);
      if (val.empty())
        throw config_error("empty value for prompt key '" + key + "'; " + grammar);
      std::optional<std::string> opt =
          val == "null" ? std::nullopt : std::optional<std::string>(val);
      if (key == "label")
        p.label = opt;
      else if (key == "modality")
        p.modality = opt;
      else if (key == "region")
        p.region = opt;
      else if (key == "condition")
        p.condition = opt;
      else
        throw config_error("unknown prompt key '" + key + "'; " + grammar);
    }
    p.validate(v);
    return p;
  }
};

// Frozen embedding table. Token row layout:
//   0: image stream tag, 1: mask stream tag, 2: null-field token,
//   then labels, modalities, regions, conditions in vocabulary order.
// Slot layout of an encoded prompt (sequence length 5):
//   [stream tag, label, modality, region, condition].
class prompt_embedder {
 public:
  static constexpr int seq_len = 5;

  prompt_embedder(const vocabulary& vocab, int dim, uint64_t table_seed)
      : vocab_(vocab), dim_(dim) {
    n_tokens_ = 3 + static_cast<int>(vocab.labels.size() + vocab.modalities.size() +
                                     vocab.regions.size() + vocab.conditions.size());
    table_ = tensor({n_tokens_, dim_});
    counter_rng rng = counter_rng(table_seed).stream(rng_streams::param_init).stream(0x7ab1e);
    rng.fill_normal(table_.values_mut());
  }

  int dim() const { return dim_; }
  const tensor& table() const { return table_; }

  // Frozen embedding for one stream. Null fields use the null-field token
  // row; the all-null prompt is handled by the caller (learned pair).
  tensor encode_stream(const prompt_spec& p, bool mask_stream) const {
    p.validate(vocab_);
    tensor out({seq_len, dim_});
    auto ov = out.values_mut();
    auto copy_row = [&](int slot, int token) {
      auto tv = table_.values();
      std::copy_n(tv.data() + static_cast<int64_t>(token) * dim_, dim_,
                  ov.data() + static_cast<int64_t>(slot) * dim_);
    };
    copy_row(0, mask_stream ? 1 : 0);
    int base = 3;
    copy_row(1, p.label ? base + vocabulary::index_of(vocab_.labels, *p.label, "label") : 2);
    base += static_cast<int>(vocab_.labels.size());
    copy_row(2, p.modality
                    ? base + vocabulary::index_of(vocab_.modalities, *p.modality, "modality")
                    : 2);
    base += static_cast<int>(vocab_.modalities.size());
    copy_row(3, p.region ? base + vocabulary::index_of(vocab_.regions, *p.region, "region")
                         : 2);
    base += static_cast<int>(vocab_.regions.size());
    copy_row(4, p.condition ? base + vocabulary::index_of(vocab_.conditions, *p.condition,
                                                          "condition")
                            : 2);
    return out;
  }

 private:
  vocabulary vocab_;
  int dim_;
  int n_tokens_;
  tensor table_;
};

}  // namespace duodiff
