#pragma once

// On-disk dataset layout:
//   <dir>/manifest.json
//   <dir>/images/NNNNN.pgm   8-bit grayscale, 0..255 <-> [0,1]
//   <dir>/masks/NNNNN.pgm    8-bit raw class ids (0..classes-1)
//
// The manifest records the corpus parameters, a class palette (display gray
// level per class id), and per-sample prompt / provenance / generation seed.
// Export is byte-deterministic for a given sample list.

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include "duodiff/phantom.hpp"
#include "duodiff/serialize.hpp"
#include "duodiff/util.hpp"

namespace duodiff {

inline constexpr int manifest_format_version = 1;

// ---- PGM (binary P5, maxval 255) ----
inline void write_pgm(const std::string& path, int w, int h,
                      const std::vector<uint8_t>& bytes) {
  if (static_cast<size_t>(w) * h != bytes.size())
    throw std::invalid_argument("write_pgm: byte count does not match dimensions");
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.append(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  write_file(path, out);
}

struct pgm_image {
  int w = 0, h = 0;
  std::vector<uint8_t> bytes;
};

inline pgm_image read_pgm(const std::string& path) {
  std::string data = read_file(path);
  size_t pos = 0;
  auto next_token = [&]() -> std::string {
    while (pos < data.size() && (std::isspace(static_cast<unsigned char>(data[pos])) != 0))
      ++pos;
    if (pos < data.size() && data[pos] == '#') {  // comment line
      while (pos < data.size() && data[pos] != '\n') ++pos;
      while (pos < data.size() && (std::isspace(static_cast<unsigned char>(data[pos])) != 0))
        ++pos;
    }
    size_t start = pos;
    while (pos < data.size() && (std::isspace(static_cast<unsigned char>(data[pos])) == 0))
      ++pos;
    return data.substr(start, pos - start);
  };
  if (next_token() != "P5") throw std::runtime_error("read_pgm: " + path + ": not binary P5");
  pgm_image img;
  img.w = std::stoi(next_token());
  img.h = std::stoi(next_token());
  int maxval = std::stoi(next_token());
  if (maxval != 255) throw std::runtime_error("read_pgm: " + path + ": maxval must be 255");
  if (img.w <= 0 || img.h <= 0) throw std::runtime_error("read_pgm: " + path + ": bad size");
  ++pos;  // single whitespace byte after maxval
  size_t need = static_cast<size_t>(img.w) * img.h;
  if (data.size() - pos < need)
    throw std::runtime_error("read_pgm: " + path + ": truncated pixel data");
  img.bytes.assign(data.begin() + static_cast<int64_t>(pos),
                   data.begin() + static_cast<int64_t>(pos + need));
  return img;
}

// ---- tensor <-> 8-bit ----
inline std::vector<uint8_t> image_to_bytes(const tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 1)
    throw std::invalid_argument("image_to_bytes: expected [1,h,w] image");
  std::vector<uint8_t> out(static_cast<size_t>(image.dim(1)) * image.dim(2));
  auto v = image.values();
  for (size_t i = 0; i < out.size(); ++i) {
    float x = std::min(1.0f, std::max(0.0f, v[i]));
    out[i] = static_cast<uint8_t>(std::lround(x * 255.0f));
  }
  return out;
}

inline tensor bytes_to_image(const pgm_image& img) {
  tensor out({1, img.h, img.w});
  auto v = out.values_mut();
  for (size_t i = 0; i < img.bytes.size(); ++i)
    v[i] = static_cast<float>(img.bytes[i]) / 255.0f;
  return out;
}

inline std::vector<int> class_palette(int classes) {
  std::vector<int> p(static_cast<size_t>(classes));
  for (int c = 0; c < classes; ++c)
    p[static_cast<size_t>(c)] = static_cast<int>(std::lround(255.0 * c / (classes - 1)));
  return p;
}

// ---- export ----
inline std::string sample_stem(size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05zu", i);
  return buf;
}

inline std::string export_dataset(const std::string& dir,
                                  const std::vector<paired_sample>& samples,
                                  const corpus_config& cfg, uint64_t master_seed) {
  cfg.validate();
  if (samples.empty()) throw config_error("export_dataset: no samples");
  std::set<uint64_t> seen;
  json entries = json::array();
  for (size_t i = 0; i < samples.size(); ++i) {
    const paired_sample& ps = samples[i];
    if (ps.image.rank() != 3 || ps.image.dim(0) != cfg.channels ||
        ps.image.dim(1) != cfg.image_size || ps.image.dim(2) != cfg.image_size)
      throw std::runtime_error("export_dataset: sample " + std::to_string(i) +
                               " image shape does not match corpus config");
    if (ps.mask.h != cfg.image_size || ps.mask.w != cfg.image_size)
      throw std::runtime_error("export_dataset: sample " + std::to_string(i) +
                               " mask shape does not match corpus config");
    for (uint8_t id : ps.mask.ids)
      if (static_cast<int>(id) >= cfg.classes)
        throw std::runtime_error("export_dataset: sample " + std::to_string(i) +
                                 " has class id out of range");
    if (!seen.insert(ps.seed).second)
      throw std::runtime_error("export_dataset: duplicate sample seed " + hex64(ps.seed));

    std::string stem = sample_stem(i);
    write_pgm(dir + "/images/" + stem + ".pgm", cfg.image_size, cfg.image_size,
              image_to_bytes(ps.image));
    write_pgm(dir + "/masks/" + stem + ".pgm", cfg.image_size, cfg.image_size, ps.mask.ids);
    entries.push_back(json{{"image", "images/" + stem + ".pgm"},
                           {"mask", "masks/" + stem + ".pgm"},
                           {"prompt", prompt_to_json(ps.prompt)},
                           {"provenance", provenance_str(ps.prov)},
                           {"seed", hex64(ps.seed)}});
  }
  json manifest{{"format_version", manifest_format_version},
                {"corpus", corpus_to_json(cfg)},
                {"class_palette", class_palette(cfg.classes)},
                {"master_seed", hex64(master_seed)},
                {"count", samples.size()},
                {"entries", entries}};
  std::string path = dir + "/manifest.json";
  write_file(path, manifest.dump(2) + "\n");
  return path;
}

// ---- import ----
struct dataset {
  corpus_config config;
  uint64_t master_seed = 0;
  std::vector<paired_sample> samples;
};

inline dataset import_dataset(const std::string& dir) {
  std::string mpath = dir + "/manifest.json";
  json manifest;
  try {
    manifest = json::parse(read_file(mpath));
  } catch (const json::exception& e) {
    throw std::runtime_error("import_dataset: " + mpath + ": " + e.what());
  }
  if (!manifest.contains("format_version") ||
      manifest.at("format_version").get<int>() != manifest_format_version)
    throw std::runtime_error("import_dataset: " + mpath + ": unsupported format_version");
  dataset ds;
  ds.config = corpus_from_json(manifest.at("corpus"));
  ds.master_seed = u64_from_json(manifest.at("master_seed"));
  size_t count = manifest.at("count").get<size_t>();
  const json& entries = manifest.at("entries");
  if (entries.size() != count)
    throw std::runtime_error("import_dataset: " + mpath + ": count does not match entries");

  std::set<uint64_t> seen;
  ds.samples.reserve(count);
  for (const json& e : entries) {
    paired_sample ps;
    std::string ipath = dir + "/" + e.at("image").get<std::string>();
    std::string kpath = dir + "/" + e.at("mask").get<std::string>();
    pgm_image img = read_pgm(ipath);
    if (img.w != ds.config.image_size || img.h != ds.config.image_size)
      throw std::runtime_error("import_dataset: " + ipath + ": size does not match manifest");
    pgm_image msk = read_pgm(kpath);
    if (msk.w != ds.config.image_size || msk.h != ds.config.image_size)
      throw std::runtime_error("import_dataset: " + kpath + ": size does not match manifest");
    ps.image = bytes_to_image(img);
    ps.mask = label_map(msk.h, msk.w);
    for (size_t i = 0; i < msk.bytes.size(); ++i) {
      if (static_cast<int>(msk.bytes[i]) >= ds.config.classes)
        throw std::runtime_error("import_dataset: " + kpath + ": class id out of range");
      ps.mask.ids[i] = msk.bytes[i];
    }
    ps.prompt = prompt_from_json(e.at("prompt"));
    ps.prov = provenance_from_str(e.at("provenance").get<std::string>());
    ps.seed = u64_from_json(e.at("seed"));
    if (!seen.insert(ps.seed).second)
      throw std::runtime_error("import_dataset: duplicate sample seed " + hex64(ps.seed));
    ds.samples.push_back(std::move(ps));
  }
  return ds;
}

// Deterministic train/test split by position (the corpus is already i.i.d.
// by construction, so a prefix split is unbiased).
struct split_view {
  std::vector<paired_sample> train, test;
};

inline split_view split_dataset(const std::vector<paired_sample>& samples,
                                double train_fraction) {
  if (train_fraction <= 0.0 || train_fraction >= 1.0)
    throw config_error("split: train_fraction must be in (0,1)");
  size_t n_train = static_cast<size_t>(std::llround(train_fraction * samples.size()));
  n_train = std::min(std::max<size_t>(1, n_train), samples.size() - 1);
  split_view sv;
  sv.train.assign(samples.begin(), samples.begin() + static_cast<int64_t>(n_train));
  sv.test.assign(samples.begin() + static_cast<int64_t>(n_train), samples.end());
  return sv;
}

}  // namespace duodiff
