#pragma once

// Experiment drivers:
//  - generation metrics: distribution distance / diversity / pair alignment
//    of a trained model's samples against a held-out real split.
//  - augmentation: does adding synthetic pairs to a reduced real training
//    set help a downstream segmenter scored on real data only?
//  - ablation: the same budgeted pipeline across joint-attention variants.
//
// All aggregate numbers are unweighted means over samples or classes;
// reports state this in their headers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "duodiff/dataset.hpp"
#include "duodiff/features.hpp"
#include "duodiff/metrics.hpp"
#include "duodiff/sampling.hpp"
#include "duodiff/segmenter.hpp"
#include "duodiff/train.hpp"

namespace duodiff {

// ---- shared scoring ----

inline feature_stats stats_of(const feature_extractor& fx,
                              std::span<const paired_sample> data) {
  feature_stats st(fx.feature_dim());
  for (const paired_sample& ps : data) st.add(fx.features(ps.image));
  return st;
}

struct generation_scores {
  double afid = 0.0;       // Frechet distance in the classifier feature space
  double ais = 0.0;        // diversity score from classifier posteriors
  double alignment = 0.0;  // mean image/mask agreement
  int n = 0;
};

inline generation_scores score_generated(std::span<const paired_sample> gen, int classes,
                                         const feature_extractor& fx,
                                         const feature_stats& real_stats) {
  if (gen.empty()) throw std::invalid_argument("score_generated: no samples");
  feature_stats gs(fx.feature_dim());
  std::vector<std::vector<float>> probs;
  probs.reserve(gen.size());
  double align = 0.0;
  for (const paired_sample& ps : gen) {
    gs.add(fx.features(ps.image));
    probs.push_back(fx.probs(ps.image));
    align += alignment_dsc(ps, classes);
  }
  generation_scores out;
  out.afid = proxy_fid(real_stats, gs);
  out.ais = proxy_is(probs);
  out.alignment = align / static_cast<double>(gen.size());
  out.n = static_cast<int>(gen.size());
  return out;
}

// Deterministic prompts for evaluation sampling: cycle through a reference
// split so generated batches match the real prompt distribution.
inline std::vector<prompt_spec> prompts_from(std::span<const paired_sample> ref, int n) {
  if (ref.empty()) throw std::invalid_argument("prompts_from: empty reference split");
  std::vector<prompt_spec> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<size_t>(i)] = ref[i % ref.size()].prompt;
  return out;
}

// Deterministic subsample: Fisher-Yates driven by the counter RNG, prefix of
// the shuffle.
inline std::vector<paired_sample> subsample_fraction(std::span<const paired_sample> data,
                                                     double fraction, uint64_t seed) {
  if (fraction <= 0.0 || fraction > 1.0)
    throw config_error("subsample: fraction must be in (0,1]");
  size_t n = static_cast<size_t>(std::llround(fraction * static_cast<double>(data.size())));
  n = std::min(std::max<size_t>(1, n), data.size());
  std::vector<size_t> idx(data.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  counter_rng rng = counter_rng(seed).stream(rng_streams::eval).stream(0x5b5);
  for (size_t i = idx.size() - 1; i > 0; --i)
    std::swap(idx[i], idx[rng.uniform_index(i, i + 1)]);
  std::vector<paired_sample> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) out.push_back(data[idx[i]]);
  return out;
}

// ---- augmentation experiment ----

struct augment_result {
  size_t real_used = 0, synth_used = 0;
  seg_scores real_only;
  seg_scores augmented;
};

// Trains two segmenters under identical seed and budget — one on the real
// training set, one on real + synthetic — and scores both on the real test
// split. The synthetic set must match the real training set in size, and
// train/test must be disjoint (checked by generation seed).
inline augment_result run_augmentation_experiment(std::span<const paired_sample> real_train,
                                                  std::span<const paired_sample> real_test,
                                                  std::span<const paired_sample> synth,
                                                  int classes, const segmenter_config& cfg,
                                                  uint64_t seed) {
  if (real_train.empty() || real_test.empty())
    throw config_error("augment: empty real split");
  if (synth.size() != real_train.size())
    throw config_error("augment: synthetic set size " + std::to_string(synth.size()) +
                       " must equal real training set size " +
                       std::to_string(real_train.size()));
  std::set<uint64_t> train_seeds;
  for (const paired_sample& ps : real_train) train_seeds.insert(ps.seed);
  for (const paired_sample& ps : real_test)
    if (train_seeds.count(ps.seed))
      throw config_error("augment: train/test splits overlap (sample seed " + hex64(ps.seed) +
                         ")");

  augment_result out;
  out.real_used = real_train.size();
  out.synth_used = synth.size();

  std::vector<paired_sample> real_arm(real_train.begin(), real_train.end());
  segmenter seg_a = train_segmenter(real_arm, classes, cfg, seed);
  out.real_only = evaluate_segmenter(seg_a, real_test);

  std::vector<paired_sample> both(real_train.begin(), real_train.end());
  both.insert(both.end(), synth.begin(), synth.end());
  segmenter seg_b = train_segmenter(both, classes, cfg, seed);
  out.augmented = evaluate_segmenter(seg_b, real_test);
  return out;
}

// ---- ablation ----

struct ablation_config {
  model_config base;
  train_config train;
  // Defaults to the standard generation settings. At desk scale, guidance
  // trades image-mask alignment against classifier-feature fidelity; the
  // arm comparison is run at the default (high-guidance) regime, where
  // fidelity differences between attention variants are expressed.
  sampler_config sampling;
  feature_extractor_config features;
  segmenter_config seg;
  corpus_config corpus;
  int corpus_count = 256;
  double train_fraction = 0.75;
  int eval_samples = 64;
  double augment_real_fraction = 0.25;
  uint64_t seed = 7;
};

struct ablation_row {
  std::string arm;
  bool ok = false;
  std::string error;
  double afid = 0.0, ais = 0.0, alignment = 0.0, adsc = 0.0, aiou = 0.0;
};

struct ablation_report {
  std::vector<ablation_row> rows;
};

inline std::vector<std::pair<std::string, model_config>> ablation_arms(const model_config& base) {
  model_config wo_jca = base;
  wo_jca.jca_stages.clear();
  model_config wo_m2i = base;
  wo_m2i.jca_mask_to_image = false;
  model_config wo_i2m = base;
  wo_i2m.jca_image_to_mask = false;
  return {{"full", base},
          {"wo_jca", wo_jca},
          {"wo_mask_to_image", wo_m2i},
          {"wo_image_to_mask", wo_i2m}};
}

// Runs every arm under the shared budget. A failing arm is reported with its
// error; the remaining arms still run.
inline ablation_report run_ablation(const ablation_config& cfg,
                                    const std::function<void(const std::string&)>& log = {}) {
  auto say = [&](const std::string& m) {
    if (log) log(m);
  };
  cfg.corpus.validate();
  cfg.train.validate();

  say("ablation: generating corpus (" + std::to_string(cfg.corpus_count) + " samples)");
  std::vector<paired_sample> corpus = generate_corpus(cfg.corpus, cfg.corpus_count, cfg.seed);
  split_view split = split_dataset(corpus, cfg.train_fraction);

  say("ablation: training feature extractor");
  feature_extractor fx =
      train_feature_extractor(split.train, split.test, cfg.features, cfg.seed);
  feature_stats real_stats = stats_of(fx, split.test);

  std::vector<paired_sample> real_sub =
      subsample_fraction(split.train, cfg.augment_real_fraction, cfg.seed);

  ablation_report report;
  for (const auto& [name, mc] : ablation_arms(cfg.base)) {
    ablation_row row;
    row.arm = name;
    try {
      say("ablation: arm " + name + ": training denoiser (" +
          std::to_string(cfg.train.steps) + " steps)");
      noise_schedule s = noise_schedule::linear(mc.schedule_T);
      denoiser model(mc, cfg.seed);
      adamw_config oc;
      oc.lr = cfg.train.lr;
      oc.weight_decay = cfg.train.weight_decay;
      adamw opt(oc, model.trainable());
      train_loop(model, opt, s, split.train, cfg.corpus.classes, cfg.train);

      say("ablation: arm " + name + ": sampling and scoring");
      std::vector<prompt_spec> eval_prompts = prompts_from(split.test, cfg.eval_samples);
      std::vector<paired_sample> gen = sample_pairs(model, s, eval_prompts,
                                                    cfg.corpus.classes, cfg.sampling, cfg.seed);
      generation_scores gs = score_generated(gen, cfg.corpus.classes, fx, real_stats);
      row.afid = gs.afid;
      row.ais = gs.ais;
      row.alignment = gs.alignment;

      say("ablation: arm " + name + ": augmentation scoring");
      std::vector<prompt_spec> synth_prompts =
          prompts_from(real_sub, static_cast<int>(real_sub.size()));
      std::vector<paired_sample> synth =
          sample_pairs(model, s, synth_prompts, cfg.corpus.classes, cfg.sampling, cfg.seed,
                       /*first_index=*/1 << 20);
      augment_result ar = run_augmentation_experiment(real_sub, split.test, synth,
                                                      cfg.corpus.classes, cfg.seg, cfg.seed);
      row.adsc = ar.augmented.mean_dsc;
      row.aiou = ar.augmented.mean_iou;
      row.ok = true;
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
      say("ablation: arm " + name + " failed: " + row.error);
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

// ---- report rendering ----

namespace reportdetail {
inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}
}  // namespace reportdetail

inline std::string ablation_csv(const ablation_report& r) {
  std::string out =
      "# aggregates are unweighted means over samples (afid, ais, alignment_dsc)\n"
      "# and over foreground classes (augmented_dsc, augmented_iou)\n"
      "arm,afid,ais,alignment_dsc,augmented_dsc,augmented_iou,status,error\n";
  for (const ablation_row& row : r.rows) {
    if (row.ok) {
      out += row.arm + "," + reportdetail::fmt(row.afid) + "," + reportdetail::fmt(row.ais) +
             "," + reportdetail::fmt(row.alignment) + "," + reportdetail::fmt(row.adsc) + "," +
             reportdetail::fmt(row.aiou) + ",ok,\n";
    } else {
      std::string err = row.error;
      std::replace(err.begin(), err.end(), ',', ';');
      std::replace(err.begin(), err.end(), '\n', ' ');
      out += row.arm + ",,,,,,failed," + err + "\n";
    }
  }
  return out;
}

inline std::string ablation_markdown(const ablation_report& r) {
  std::string out =
      "# Joint-attention ablation\n\n"
      "All aggregates are unweighted means (over samples for aFID/aIS/alignment,\n"
      "over foreground classes for augmented DSC/IoU). Lower aFID is better;\n"
      "higher aIS, alignment, DSC and IoU are better.\n\n"
      "| arm | aFID | aIS | alignment DSC | augmented DSC | augmented IoU |\n"
      "|---|---|---|---|---|---|\n";
  for (const ablation_row& row : r.rows) {
    if (row.ok) {
      out += "| " + row.arm + " | " + reportdetail::fmt(row.afid) + " | " +
             reportdetail::fmt(row.ais) + " | " + reportdetail::fmt(row.alignment) + " | " +
             reportdetail::fmt(row.adsc) + " | " + reportdetail::fmt(row.aiou) + " |\n";
    } else {
      out += "| " + row.arm + " | failed: " + row.error + " | | | | |\n";
    }
  }
  return out;
}

inline std::string augment_csv(const augment_result& r) {
  std::string out =
      "# aggregates are unweighted means over foreground classes\n"
      "arm,mean_dsc,mean_iou,train_size\n";
  out += "real_only," + reportdetail::fmt(r.real_only.mean_dsc) + "," +
         reportdetail::fmt(r.real_only.mean_iou) + "," + std::to_string(r.real_used) + "\n";
  out += "real_plus_synth," + reportdetail::fmt(r.augmented.mean_dsc) + "," +
         reportdetail::fmt(r.augmented.mean_iou) + "," +
         std::to_string(r.real_used + r.synth_used) + "\n";
  return out;
}

inline std::string augment_markdown(const augment_result& r) {
  std::string out =
      "# Synthetic augmentation\n\n"
      "Both segmenters share seed and budget and are scored on the real test\n"
      "split only. Aggregates are unweighted means over foreground classes.\n\n"
      "| arm | train size | mean DSC | mean IoU |\n|---|---|---|---|\n";
  out += "| real only | " + std::to_string(r.real_used) + " | " +
         reportdetail::fmt(r.real_only.mean_dsc) + " | " +
         reportdetail::fmt(r.real_only.mean_iou) + " |\n";
  out += "| real + synthetic | " + std::to_string(r.real_used + r.synth_used) + " | " +
         reportdetail::fmt(r.augmented.mean_dsc) + " | " +
         reportdetail::fmt(r.augmented.mean_iou) + " |\n";
  return out;
}

// Tiled image|mask preview: one row per sample, image on the left, mask
// (classes rendered as evenly spaced gray levels) on the right.
inline void write_sample_grid(const std::string& path, std::span<const paired_sample> samples,
                              int classes, int cols = 4) {
  if (samples.empty()) throw std::invalid_argument("write_sample_grid: no samples");
  int h = samples[0].image.dim(1), w = samples[0].image.dim(2);
  int cell_w = 2 * w + 1, cell_h = h + 1;
  int rows = (static_cast<int>(samples.size()) + cols - 1) / cols;
  int W = cols * cell_w + 1, H = rows * cell_h + 1;
  std::vector<uint8_t> canvas(static_cast<size_t>(W) * H, 32);
  for (size_t i = 0; i < samples.size(); ++i) {
    int r = static_cast<int>(i) / cols, c = static_cast<int>(i) % cols;
    int oy = r * cell_h + 1, ox = c * cell_w + 1;
    std::vector<uint8_t> img = image_to_bytes(samples[i].image);
    const label_map& m = samples[i].mask;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        canvas[static_cast<size_t>(oy + y) * W + ox + x] = img[static_cast<size_t>(y) * w + x];
        canvas[static_cast<size_t>(oy + y) * W + ox + w + x] = static_cast<uint8_t>(
            std::lround(255.0 * m.at(y, x) / (classes - 1)));
      }
  }
  write_pgm(path, W, H, canvas);
}

}  // namespace duodiff
