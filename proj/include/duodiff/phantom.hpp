#pragma once

// Procedural paired-sample generator. Every sample is built from analytic
// ellipse geometry on a textured background, so exact ground-truth masks are
// known by construction and an intensity-band oracle can re-derive the class
// of every foreground component from the image alone.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "duodiff/prompt.hpp"
#include "duodiff/rng.hpp"
#include "duodiff/tensor.hpp"

namespace duodiff {

// Dense class-id raster. id 0 is background.
struct label_map {
  int h = 0;
  int w = 0;
  std::vector<uint8_t> ids;

  label_map() = default;
  label_map(int h_, int w_) : h(h_), w(w_), ids(static_cast<size_t>(h_) * w_, 0) {}
  uint8_t& at(int y, int x) { return ids[static_cast<size_t>(y) * w + x]; }
  uint8_t at(int y, int x) const { return ids[static_cast<size_t>(y) * w + x]; }
};

enum class provenance { real, synthetic };

inline std::string provenance_str(provenance p) {
  return p == provenance::real ? "real" : "synthetic";
}
inline provenance provenance_from_str(const std::string& s) {
  if (s == "real") return provenance::real;
  if (s == "synthetic") return provenance::synthetic;
  throw config_error("unknown provenance '" + s + "' (expected real|synthetic)");
}

struct corpus_config {
  int image_size = 32;
  int channels = 1;
  int classes = 2;  // background + (classes-1) target classes

  void validate() const {
    if (image_size < 16 || image_size % 2 != 0)
      throw config_error("corpus: image_size must be even and >= 16");
    if (channels != 1) throw config_error("corpus: only single-channel images supported");
    if (classes < 2 || classes > 4) throw config_error("corpus: classes must be in [2,4]");
  }
};

struct paired_sample {
  tensor image;  // [channels, h, w], values in [0,1]
  label_map mask;
  prompt_spec prompt;
  provenance prov = provenance::real;
  uint64_t seed = 0;
};

// Intensity layout. Background texture occupies [bg_lo, bg_hi]; foreground
// blobs occupy [fg_lo, fg_hi] split into one equal sub-band per label in
// vocabulary order. The segmentation threshold sits midway in the gap.
namespace bands {
inline constexpr float bg_lo = 0.02f;
inline constexpr float bg_hi = 0.45f;
inline constexpr float fg_lo = 0.60f;
inline constexpr float fg_hi = 0.98f;
inline constexpr float fg_threshold = 0.525f;

inline int label_count() { return static_cast<int>(vocabulary::instance().labels.size()); }

inline float band_width() { return (fg_hi - fg_lo) / static_cast<float>(label_count()); }

inline float band_lo(int label_idx) { return fg_lo + band_width() * static_cast<float>(label_idx); }

inline int band_of(float intensity) {
  int b = static_cast<int>(std::floor((intensity - fg_lo) / band_width()));
  return std::clamp(b, 0, label_count() - 1);
}
}  // namespace bands

// Class id assigned to a label when the corpus has `classes` ids total.
inline int class_of_label(int label_idx, int classes) {
  if (classes == 2) return 1;
  return 1 + label_idx % (classes - 1);
}

namespace phantomdetail {

// Bilinearly interpolated value-noise lattice, values in [-1,1].
inline std::vector<float> value_noise(counter_rng rng, int size, int lattice) {
  std::vector<float> lat(static_cast<size_t>(lattice) * lattice);
  for (size_t i = 0; i < lat.size(); ++i)
    lat[i] = 2.0f * static_cast<float>(rng.uniform(static_cast<uint64_t>(i))) - 1.0f;
  std::vector<float> out(static_cast<size_t>(size) * size);
  float scale = static_cast<float>(lattice - 1) / static_cast<float>(size - 1);
  for (int y = 0; y < size; ++y) {
    float fy = y * scale;
    int y0 = std::min(static_cast<int>(fy), lattice - 2);
    float ty = fy - y0;
    for (int x = 0; x < size; ++x) {
      float fx = x * scale;
      int x0 = std::min(static_cast<int>(fx), lattice - 2);
      float tx = fx - x0;
      float a = lat[static_cast<size_t>(y0) * lattice + x0];
      float b = lat[static_cast<size_t>(y0) * lattice + x0 + 1];
      float c = lat[static_cast<size_t>(y0 + 1) * lattice + x0];
      float d = lat[static_cast<size_t>(y0 + 1) * lattice + x0 + 1];
      out[static_cast<size_t>(y) * size + x] =
          (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
    }
  }
  return out;
}

struct region_corner {
  float cy, cx;
};

inline region_corner corner_of(const std::string& region, int size) {
  float last = static_cast<float>(size - 1);
  if (region == "nw") return {0.0f, 0.0f};
  if (region == "ne") return {0.0f, last};
  if (region == "sw") return {last, 0.0f};
  if (region == "se") return {last, last};
  throw config_error("unknown region '" + region + "'");
}

// Background texture: per-modality base level plus value noise, a stripe
// field for the striped modality, and a gradient rising toward the region
// corner. Result is clamped into the background band.
inline std::vector<float> background(const std::string& modality, const std::string& region,
                                     int size, counter_rng rng) {
  float base = 0.0f;
  std::vector<float> noise;
  float noise_amp = 0.0f;
  if (modality == "smooth") {
    base = 0.16f;
    noise = value_noise(rng.stream(1), size, 4);
    noise_amp = 0.05f;
  } else if (modality == "grainy") {
    base = 0.22f;
    noise = value_noise(rng.stream(1), size, size / 2);
    noise_amp = 0.16f;
  } else if (modality == "striped") {
    base = 0.18f;
    noise = value_noise(rng.stream(1), size, 4);
    noise_amp = 0.04f;
  } else {
    throw config_error("unknown modality '" + modality + "'");
  }
  region_corner rc = corner_of(region, size);
  float maxdist = std::hypot(static_cast<float>(size - 1), static_cast<float>(size - 1));
  float grad_amp = 0.12f;

  bool striped = modality == "striped";
  float stripe_amp = 0.09f;
  float stripe_period = 5.0f;
  float stripe_phase = static_cast<float>(rng.uniform(0xf0)) * 6.2831853f;
  // Stripes run perpendicular to the corner diagonal, so orientation follows
  // the requested region.
  float sy = rc.cy == 0.0f ? 1.0f : -1.0f;
  float sx = rc.cx == 0.0f ? 1.0f : -1.0f;

  std::vector<float> out(static_cast<size_t>(size) * size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      float v = base + noise_amp * noise[static_cast<size_t>(y) * size + x];
      float dist = std::hypot(y - rc.cy, x - rc.cx);
      v += grad_amp * (1.0f - dist / maxdist);
      if (striped) {
        float proj = sy * y + sx * x;
        v += stripe_amp * std::sin(6.2831853f * proj / stripe_period + stripe_phase);
      }
      out[static_cast<size_t>(y) * size + x] = std::clamp(v, bands::bg_lo, bands::bg_hi);
    }
  }
  return out;
}

struct blob {
  float cy, cx;     // center
  float a, b;       // semi-axes (a along phi)
  float phi;        // orientation
  float intensity;  // constant fill level
};

inline bool inside(const blob& e, float y, float x) {
  float dy = y - e.cy;
  float dx = x - e.cx;
  float c = std::cos(e.phi);
  float s = std::sin(e.phi);
  float u = dx * c + dy * s;
  float v = -dx * s + dy * c;
  return (u * u) / (e.a * e.a) + (v * v) / (e.b * e.b) <= 1.0f;
}

inline float uniform_in(counter_rng& rng, uint64_t counter, float lo, float hi) {
  return lo + (hi - lo) * static_cast<float>(rng.uniform(counter));
}

}  // namespace phantomdetail

// Deterministically generates one sample. Null prompt fields are resolved to
// uniformly drawn vocabulary tokens; the returned sample carries the resolved
// prompt. The target label must still be present (or resolvable), and drives
// both blob intensity band and mask class.
inline paired_sample generate_sample(const corpus_config& cfg, const prompt_spec& spec,
                                     uint64_t seed) {
  cfg.validate();
  spec.validate();
  const vocabulary& vocab = vocabulary::instance();
  counter_rng rng = counter_rng(seed).stream(rng_streams::corpus);

  counter_rng pick = rng.stream(1);
  prompt_spec p = spec;
  if (!p.label) p.label = vocab.labels[pick.uniform_index(0, vocab.labels.size())];
  if (!p.modality) p.modality = vocab.modalities[pick.uniform_index(1, vocab.modalities.size())];
  if (!p.region) p.region = vocab.regions[pick.uniform_index(2, vocab.regions.size())];
  if (!p.condition) p.condition = vocab.conditions[pick.uniform_index(3, vocab.conditions.size())];

  int label_idx = vocabulary::index_of(vocab.labels, *p.label, "label");
  int size = cfg.image_size;
  float geom_scale = static_cast<float>(size) / 32.0f;

  std::vector<float> img =
      phantomdetail::background(*p.modality, *p.region, size, rng.stream(2));
  label_map mask(size, size);

  int count = 1;
  if (*p.condition == "paired") count = 2;
  else if (*p.condition == "scattered") count = 3;

  bool elongated = p.label->rfind("elongated", 0) == 0;
  float ecc_lo = elongated ? 1.45f : 1.0f;
  float ecc_hi = elongated ? 1.8f : 1.15f;
  float lo = bands::band_lo(label_idx);
  float wband = bands::band_width();
  int cls = class_of_label(label_idx, cfg.classes);

  phantomdetail::region_corner rc = phantomdetail::corner_of(*p.region, size);
  bool north = rc.cy == 0.0f;
  bool west = rc.cx == 0.0f;

  for (int bi = 0; bi < count; ++bi) {
    counter_rng brng = rng.stream(3).stream(static_cast<uint64_t>(bi));
    float base_r = phantomdetail::uniform_in(brng, 0, 2.9f, 4.2f) * geom_scale;
    float ecc = phantomdetail::uniform_in(brng, 1, ecc_lo, ecc_hi);
    phantomdetail::blob e;
    e.a = base_r * ecc;
    e.b = base_r / ecc;
    e.phi = phantomdetail::uniform_in(brng, 2, 0.0f, 3.1415927f);
    // Inner 80% of the band keeps component means safely inside it.
    e.intensity = phantomdetail::uniform_in(brng, 3, lo + 0.1f * wband, lo + 0.9f * wband);
    float m = e.a + 1.0f;
    float half_lo = (size - 1) / 2.0f;
    float half_hi = half_lo + 1.0f;
    float xlo = west ? m : half_hi;
    float xhi = west ? half_lo : static_cast<float>(size - 1) - m;
    float ylo = north ? m : half_hi;
    float yhi = north ? half_lo : static_cast<float>(size - 1) - m;
    if (xlo > xhi || ylo > yhi)
      throw std::runtime_error("phantom: blob does not fit in quadrant (image too small)");
    e.cx = phantomdetail::uniform_in(brng, 4, xlo, xhi);
    e.cy = phantomdetail::uniform_in(brng, 5, ylo, yhi);

    int y0 = std::max(0, static_cast<int>(std::floor(e.cy - e.a - 1)));
    int y1 = std::min(size - 1, static_cast<int>(std::ceil(e.cy + e.a + 1)));
    int x0 = std::max(0, static_cast<int>(std::floor(e.cx - e.a - 1)));
    int x1 = std::min(size - 1, static_cast<int>(std::ceil(e.cx + e.a + 1)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (phantomdetail::inside(e, static_cast<float>(y), static_cast<float>(x))) {
          img[static_cast<size_t>(y) * size + x] = e.intensity;
          mask.at(y, x) = static_cast<uint8_t>(cls);
        }
  }

  paired_sample out;
  out.image = tensor({cfg.channels, size, size});
  auto iv = out.image.values_mut();
  for (int c = 0; c < cfg.channels; ++c)
    std::copy(img.begin(), img.end(), iv.begin() + static_cast<size_t>(c) * img.size());
  out.mask = std::move(mask);
  out.prompt = p;
  out.prov = provenance::real;
  out.seed = seed;
  return out;
}

// Re-derives a class mask from an image alone: threshold, 4-connected
// components, then classify each component by which intensity sub-band its
// mean falls into. Exact on generated samples by construction.
inline label_map oracle_segment(const tensor& image, int classes) {
  if (image.rank() != 3) throw std::invalid_argument("oracle_segment: image must be [c,h,w]");
  if (classes < 2 || classes > 4) throw std::invalid_argument("oracle_segment: classes in [2,4]");
  int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  auto v = image.values();
  std::vector<float> gray(static_cast<size_t>(h) * w, 0.0f);
  for (int ch = 0; ch < c; ++ch)
    for (size_t i = 0; i < gray.size(); ++i)
      gray[i] += v[static_cast<size_t>(ch) * gray.size() + i] / static_cast<float>(c);

  label_map out(h, w);
  std::vector<int> comp(gray.size(), -1);
  std::vector<double> comp_sum;
  std::vector<int> comp_n;
  std::deque<int> queue;
  for (size_t i = 0; i < gray.size(); ++i) {
    if (gray[i] <= bands::fg_threshold || comp[i] >= 0) continue;
    int id = static_cast<int>(comp_sum.size());
    comp_sum.push_back(0.0);
    comp_n.push_back(0);
    comp[i] = id;
    queue.push_back(static_cast<int>(i));
    while (!queue.empty()) {
      int cur = queue.front();
      queue.pop_front();
      comp_sum[id] += gray[cur];
      comp_n[id] += 1;
      int y = cur / w, x = cur % w;
      const int dy[4] = {-1, 1, 0, 0};
      const int dx[4] = {0, 0, -1, 1};
      for (int k = 0; k < 4; ++k) {
        int ny = y + dy[k], nx = x + dx[k];
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
        int ni = ny * w + nx;
        if (gray[ni] <= bands::fg_threshold || comp[ni] >= 0) continue;
        comp[ni] = id;
        queue.push_back(ni);
      }
    }
  }
  std::vector<uint8_t> comp_cls(comp_sum.size());
  for (size_t id = 0; id < comp_sum.size(); ++id) {
    float mean = static_cast<float>(comp_sum[id] / comp_n[id]);
    comp_cls[id] = static_cast<uint8_t>(class_of_label(bands::band_of(mean), classes));
  }
  for (size_t i = 0; i < gray.size(); ++i)
    if (comp[i] >= 0) out.ids[i] = comp_cls[static_cast<size_t>(comp[i])];
  return out;
}

// Mask <-> gray-image conversions. Class k renders at level k/(classes-1).
inline tensor mask_to_image(const label_map& m, int classes, int channels = 1) {
  tensor out({channels, m.h, m.w});
  auto v = out.values_mut();
  float denom = static_cast<float>(classes - 1);
  size_t plane = m.ids.size();
  for (size_t i = 0; i < plane; ++i) {
    float level = static_cast<float>(m.ids[i]) / denom;
    for (int c = 0; c < channels; ++c) v[static_cast<size_t>(c) * plane + i] = level;
  }
  return out;
}

inline label_map quantize_mask(const tensor& image, int classes) {
  if (image.rank() != 3) throw std::invalid_argument("quantize_mask: image must be [c,h,w]");
  int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  label_map out(h, w);
  auto v = image.values();
  size_t plane = out.ids.size();
  float denom = static_cast<float>(classes - 1);
  for (size_t i = 0; i < plane; ++i) {
    float g = 0.0f;
    for (int ch = 0; ch < c; ++ch) g += v[static_cast<size_t>(ch) * plane + i] / c;
    int cls = static_cast<int>(std::lround(g * denom));
    out.ids[i] = static_cast<uint8_t>(std::clamp(cls, 0, classes - 1));
  }
  return out;
}

// Deterministic corpus: sample i gets its own seed and a uniformly drawn
// fully-specified prompt, both derived from the master seed.
inline std::vector<paired_sample> generate_corpus(const corpus_config& cfg, int count,
                                                  uint64_t master_seed) {
  cfg.validate();
  if (count <= 0) throw config_error("corpus: count must be positive");
  const vocabulary& vocab = vocabulary::instance();
  counter_rng root = counter_rng(master_seed).stream(rng_streams::corpus);
  std::vector<paired_sample> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    counter_rng prng = root.stream(static_cast<uint64_t>(i));
    prompt_spec p;
    p.label = vocab.labels[prng.uniform_index(0, vocab.labels.size())];
    p.modality = vocab.modalities[prng.uniform_index(1, vocab.modalities.size())];
    p.region = vocab.regions[prng.uniform_index(2, vocab.regions.size())];
    p.condition = vocab.conditions[prng.uniform_index(3, vocab.conditions.size())];
    uint64_t sample_seed = root.bits(static_cast<uint64_t>(i) + 0x5eed0000ull);
    out.push_back(generate_sample(cfg, p, sample_seed));
  }
  return out;
}

// Foreground fraction of a mask (any non-zero class).
inline double foreground_fraction(const label_map& m) {
  size_t fg = 0;
  for (uint8_t id : m.ids) fg += id != 0;
  return static_cast<double>(fg) / static_cast<double>(m.ids.size());
}

}  // namespace duodiff
