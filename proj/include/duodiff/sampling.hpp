#pragma once

// Model-level sampling: binds a denoiser into the latent sampler, then
// decodes latents back to image space and quantizes the mask stream into a
// class map. Produces samples marked as synthetic that downstream evaluation
// and dataset export consume exactly like generated-from-geometry ones.

#include <cstdint>
#include <span>
#include <vector>

#include "duodiff/diffusion.hpp"
#include "duodiff/model.hpp"
#include "duodiff/phantom.hpp"
#include "duodiff/schedule.hpp"

namespace duodiff {

// Generates prompts.size() pairs; sample i is conditioned on prompts[i] and
// keyed by (seed, first_index + i), so regenerating any subset reproduces the
// same bytes regardless of batch composition.
inline std::vector<paired_sample> sample_pairs(const denoiser& model, const noise_schedule& s,
                                               std::span<const prompt_spec> prompts, int classes,
                                               const sampler_config& cfg, uint64_t seed,
                                               int64_t first_index = 0) {
  if (prompts.empty()) throw std::invalid_argument("sample_pairs: no prompts");
  if (classes < 2 || classes > 4)
    throw std::invalid_argument("sample_pairs: classes must be in [2,4]");
  model.check_finite_params();
  int n = static_cast<int>(prompts.size());
  const model_config& mc = model.config();
  int L = prompt_embedder::seq_len;
  int d = mc.text_dim;

  tensor e_x({n, L, d}), e_m({n, L, d});
  for (int i = 0; i < n; ++i) {
    auto emb = model.encode_prompt(prompts[i]);
    std::copy_n(emb.e_x.values().data(), emb.e_x.size(),
                e_x.values_mut().data() + static_cast<int64_t>(i) * L * d);
    std::copy_n(emb.e_m.values().data(), emb.e_m.size(),
                e_m.values_mut().data() + static_cast<int64_t>(i) * L * d);
  }

  denoise_fn fn = [&](const tensor& z, const tensor& y, std::span<const int> ts,
                      const tensor& ex, const tensor& em) {
    tape tp;
    tp.set_recording(false);
    return model.denoise(tp, z, y, ts, ex, em);
  };

  counter_rng root = counter_rng(seed).stream(rng_streams::sampler);
  shape_t latent_chw = {mc.latent_channels(), mc.latent_size(), mc.latent_size()};
  latent_pair_batch lat = sample_pairs_latent(s, fn, n, latent_chw, e_x, e_m,
                                              model.null_embedding_x(),
                                              model.null_embedding_m(), cfg, root, first_index);

  latent_codec codec = mc.make_codec();
  int64_t per = shape_numel(latent_chw);
  std::vector<paired_sample> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    tensor zi(latent_chw, std::vector<float>(lat.z.values().begin() + i * per,
                                             lat.z.values().begin() + (i + 1) * per));
    tensor yi(latent_chw, std::vector<float>(lat.y.values().begin() + i * per,
                                             lat.y.values().begin() + (i + 1) * per));
    tensor img = codec.decode(zi);
    tensor msk = codec.decode(yi);
    out[static_cast<size_t>(i)].image = img;
    out[static_cast<size_t>(i)].mask = quantize_mask(msk, classes);
    out[static_cast<size_t>(i)].prompt = prompts[i];
    out[static_cast<size_t>(i)].prov = provenance::synthetic;
    out[static_cast<size_t>(i)].seed = root.stream(static_cast<uint64_t>(first_index + i)).key();
  }
  return out;
}

// Single-prompt convenience: n pairs all conditioned on the same prompt.
inline std::vector<paired_sample> sample_pairs(const denoiser& model, const noise_schedule& s,
                                               const prompt_spec& prompt, int n, int classes,
                                               const sampler_config& cfg, uint64_t seed,
                                               int64_t first_index = 0) {
  std::vector<prompt_spec> prompts(static_cast<size_t>(n), prompt);
  return sample_pairs(model, s, std::span<const prompt_spec>(prompts), classes, cfg, seed,
                      first_index);
}

}  // namespace duodiff
