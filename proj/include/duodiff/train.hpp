#pragma once

// Training loop for the dual-stream denoiser.
//
// Each batch element draws its own data index, its own shared timestep t
// (one t per sample, used by both streams) and an independent noise pair.
// Prompt dropout replaces both streams' embeddings with the learned null
// pair together, at rate p_drop, decided per (step, batch position) from the
// training RNG stream so the decision is reproducible in isolation.

#include <chrono>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "duodiff/adamw.hpp"
#include "duodiff/model.hpp"
#include "duodiff/ops.hpp"
#include "duodiff/phantom.hpp"
#include "duodiff/rng.hpp"
#include "duodiff/schedule.hpp"
#include "duodiff/tape.hpp"

namespace duodiff {

struct train_config {
  int steps = 3000;
  int batch_size = 16;
  float lr = 1e-4f;
  float weight_decay = 1e-4f;
  float p_drop = 0.1f;
  std::string loss = "l1";  // l1 | l2
  uint64_t seed = 1234;
  int checkpoint_every = 1000;
  int log_every = 25;

  void validate() const {
    if (steps < 1) throw config_error("train: steps must be >= 1");
    if (batch_size < 1) throw config_error("train: batch_size must be >= 1");
    if (!(lr > 0.0f)) throw config_error("train: lr must be positive");
    if (weight_decay < 0.0f) throw config_error("train: weight_decay must be >= 0");
    if (p_drop < 0.0f || p_drop > 1.0f) throw config_error("train: p_drop must be in [0,1]");
    if (loss != "l1" && loss != "l2") throw config_error("train: loss must be l1 or l2");
    if (checkpoint_every < 1) throw config_error("train: checkpoint_every must be >= 1");
    if (log_every < 1) throw config_error("train: log_every must be >= 1");
  }
};

// Joint objective: per-stream mean elementwise error, summed over the two
// streams with equal weight.
inline tensor loss_joint(tape& tp, const noise_pair& pred, const noise_pair& target,
                         bool l2 = false) {
  auto term = [&](const tensor& p, const tensor& t) {
    tensor d = ops::sub(tp, p, t);
    return ops::mean(tp, l2 ? ops::square(tp, d) : ops::abs(tp, d));
  };
  return ops::add(tp, term(pred.eps_x, target.eps_x), term(pred.eps_m, target.eps_m));
}

namespace traindetail {

inline counter_rng step_rng(uint64_t seed, int step) {
  return counter_rng(seed).stream(rng_streams::train).stream(static_cast<uint64_t>(step));
}

inline constexpr uint64_t index_branch = 0xba7c4;   // batch data indices
inline constexpr uint64_t sample_branch = 0x5a;     // per-position draws

inline counter_rng position_rng(uint64_t seed, int step, int i) {
  return step_rng(seed, step).stream(sample_branch).stream(static_cast<uint64_t>(i));
}

}  // namespace traindetail

// Exact dropout decision for batch position i at a given step: the training
// loop calls this, so its frequency can be measured without running a model.
inline bool prompt_dropped(uint64_t seed, int step, int i, float p_drop) {
  return traindetail::position_rng(seed, step, i).uniform(1) < p_drop;
}

// Pre-encoded latent targets for one sample: image and rendered mask pushed
// through the codec once, reused every time the sample is drawn.
struct latent_targets {
  tensor z0, y0;
};

inline std::vector<latent_targets> encode_corpus_latents(const latent_codec& codec,
                                                         std::span<const paired_sample> data,
                                                         int classes) {
  std::vector<latent_targets> out(data.size());
  for (size_t i = 0; i < data.size(); ++i) {
    out[i].z0 = codec.encode(data[i].image);
    out[i].y0 = codec.encode(mask_to_image(data[i].mask, classes, data[i].image.dim(0)));
  }
  return out;
}

struct train_step_stats {
  float loss = 0.0f;
  int dropped = 0;                  // batch positions that used the null pair
  std::vector<uint64_t> batch_seeds;  // generation seeds of the drawn samples
};

// One optimization step. Throws on non-finite loss/gradients, naming the
// generation seeds of the offending batch.
inline train_step_stats train_step(denoiser& model, adamw& opt, const noise_schedule& s,
                                   std::span<const paired_sample> data,
                                   std::span<const latent_targets> latents,
                                   const train_config& cfg, int step) {
  if (data.empty()) throw std::invalid_argument("train_step: empty dataset");
  if (data.size() != latents.size())
    throw std::invalid_argument("train_step: latents/data size mismatch");
  const model_config& mc = model.config();
  int B = cfg.batch_size;
  int C = mc.latent_channels(), S = mc.latent_size();
  int64_t per = static_cast<int64_t>(C) * S * S;

  counter_rng idx_rng = traindetail::step_rng(cfg.seed, step).stream(traindetail::index_branch);

  tensor z_t({B, C, S, S}), y_t({B, C, S, S});
  tensor tgt_x({B, C, S, S}), tgt_m({B, C, S, S});
  std::vector<int> ts(static_cast<size_t>(B));
  std::vector<tensor> ex_parts, em_parts;
  ex_parts.reserve(static_cast<size_t>(B));
  em_parts.reserve(static_cast<size_t>(B));

  train_step_stats stats;
  for (int i = 0; i < B; ++i) {
    size_t idx = static_cast<size_t>(
        idx_rng.uniform_index(static_cast<uint64_t>(i), data.size()));
    stats.batch_seeds.push_back(data[idx].seed);
    counter_rng pr = traindetail::position_rng(cfg.seed, step, i);
    int t = 1 + static_cast<int>(pr.uniform_index(0, static_cast<uint64_t>(s.T)));
    ts[static_cast<size_t>(i)] = t;
    bool drop = prompt_dropped(cfg.seed, step, i, cfg.p_drop);
    stats.dropped += drop;

    noise_pair eps = draw_noise_pair(latents[idx].z0.shape(), pr.stream(1), pr.stream(2));
    paired_latent noised = forward_diffuse(s, latents[idx].z0, latents[idx].y0, t, eps);
    std::copy_n(noised.z.values().data(), per, z_t.values_mut().data() + i * per);
    std::copy_n(noised.y.values().data(), per, y_t.values_mut().data() + i * per);
    std::copy_n(eps.eps_x.values().data(), per, tgt_x.values_mut().data() + i * per);
    std::copy_n(eps.eps_m.values().data(), per, tgt_m.values_mut().data() + i * per);

    if (drop) {
      ex_parts.push_back(model.null_embedding_x());
      em_parts.push_back(model.null_embedding_m());
    } else {
      ex_parts.push_back(model.encode_prompt_stream(data[idx].prompt, false));
      em_parts.push_back(model.encode_prompt_stream(data[idx].prompt, true));
    }
  }

  try {
    tape tp;
    tensor e_x = ops::stack(tp, ex_parts);
    tensor e_m = ops::stack(tp, em_parts);
    noise_pair pred = model.denoise(tp, z_t, y_t, ts, e_x, e_m);
    noise_pair target{tgt_x, tgt_m};
    tensor loss = loss_joint(tp, pred, target, cfg.loss == "l2");
    stats.loss = loss.item();
    tp.backward(loss);
    opt.step();
    opt.zero_grad();
  } catch (const std::exception& e) {
    std::string seeds;
    for (size_t i = 0; i < stats.batch_seeds.size(); ++i)
      seeds += (i ? ", " : "") + hex64(stats.batch_seeds[i]);
    throw std::runtime_error("training aborted at step " + std::to_string(step) + ": " +
                             e.what() + "; batch sample seeds: [" + seeds + "]");
  }
  return stats;
}

struct train_callbacks {
  // Called after every step with the step number (1-based), loss, lr and
  // wall time of the step in milliseconds.
  std::function<void(int, float, float, double)> on_log;
  // Called when a checkpoint is due (checkpoint_every and the final step).
  std::function<void(int)> on_checkpoint;
};

// Runs steps start_step+1 .. cfg.steps. `classes` is the corpus class count
// (it fixes the gray levels masks are rendered at before encoding). Returns
// the per-step losses.
inline std::vector<float> train_loop(denoiser& model, adamw& opt, const noise_schedule& s,
                                     std::span<const paired_sample> data, int classes,
                                     const train_config& cfg, const train_callbacks& cb = {},
                                     int start_step = 0) {
  cfg.validate();
  if (data.empty()) throw config_error("train: empty dataset");
  if (classes < 2 || classes > 4) throw config_error("train: classes must be in [2,4]");
  latent_codec codec = model.config().make_codec();
  std::vector<latent_targets> latents = encode_corpus_latents(codec, data, classes);

  std::vector<float> losses;
  losses.reserve(static_cast<size_t>(std::max(0, cfg.steps - start_step)));
  for (int step = start_step + 1; step <= cfg.steps; ++step) {
    auto t0 = std::chrono::steady_clock::now();
    train_step_stats st = train_step(model, opt, s, data, latents, cfg, step);
    double ms = std::chrono::duration<double, std::milli>(
                    std::chrono::steady_clock::now() - t0)
                    .count();
    losses.push_back(st.loss);
    if (cb.on_log) cb.on_log(step, st.loss, cfg.lr, ms);
    if (cb.on_checkpoint && (step % cfg.checkpoint_every == 0 || step == cfg.steps))
      cb.on_checkpoint(step);
  }
  return losses;
}

}  // namespace duodiff
