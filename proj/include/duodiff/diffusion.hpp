#pragma once

// Ancestral sampling over the paired streams with classifier-free guidance.
//
// Inference walks an evenly strided subsequence of the training schedule and
// applies the DDPM posterior for each effective step. Every noise draw is
// keyed by (sample index, timestep, stream) on a counter RNG, so trajectories
// are independent of batch assembly and of whether the unconditional branch
// was evaluated.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "duodiff/rng.hpp"
#include "duodiff/schedule.hpp"
#include "duodiff/tensor.hpp"

namespace duodiff {

// eps_uncond + scale * (eps_cond - eps_uncond). The degenerate scales return
// the corresponding input exactly (bit-identical), not via arithmetic.
inline tensor cfg_combine(const tensor& eps_uncond, const tensor& eps_cond, float scale) {
  if (eps_uncond.shape() != eps_cond.shape())
    throw std::invalid_argument("cfg_combine: shape mismatch " +
                                shape_str(eps_uncond.shape()) + " vs " +
                                shape_str(eps_cond.shape()));
  if (scale == 1.0f) return eps_cond;
  if (scale == 0.0f) return eps_uncond;
  tensor out(eps_cond.shape());
  auto u = eps_uncond.values();
  auto c = eps_cond.values();
  auto o = out.values_mut();
  for (int64_t i = 0; i < out.size(); ++i) o[i] = u[i] + scale * (c[i] - u[i]);
  return out;
}

struct sampler_config {
  int steps = 50;
  float guidance = 7.5f;
  // Never construct or evaluate the unconditional branch. Only meaningful at
  // guidance == 1 (where cfg_combine is the identity on the conditional
  // prediction); other scales need both branches.
  bool conditional_only = false;
};

using denoise_fn = std::function<noise_pair(const tensor& z, const tensor& y,
                                            std::span<const int> ts, const tensor& e_x,
                                            const tensor& e_m)>;

struct latent_pair_batch {
  tensor z;  // [n, C, S, S]
  tensor y;
};

namespace detail {

inline void sampler_validate(const noise_schedule& s, const sampler_config& cfg) {
  if (cfg.steps < 1) throw std::invalid_argument("sampler: steps must be >= 1");
  if (s.T % cfg.steps != 0)
    throw std::invalid_argument("sampler: steps = " + std::to_string(cfg.steps) +
                                " must evenly divide T = " + std::to_string(s.T));
  if (!std::isfinite(cfg.guidance))
    throw std::invalid_argument("sampler: non-finite guidance");
  if (cfg.conditional_only && cfg.guidance != 1.0f)
    throw std::invalid_argument("sampler: conditional_only requires guidance = 1");
}

// One posterior update x_{t-stride} <- x_t for a whole stream batch.
// x0_hat is clamped to [-1,1]; the final step (t_prev = 0) has zero posterior
// variance and therefore delivers the mean (= x0_hat) with no noise. Noise for
// batch row i comes from rng_of(i).stream(t).stream(stream_tag).
template <typename RngOf>
inline void posterior_step(const noise_schedule& s, tensor& x, const tensor& eps, int t,
                           int t_prev, int n, uint64_t stream_tag, RngOf rng_of) {
  float ab_t = s.alpha_bar[static_cast<size_t>(t)];
  float ab_prev = t_prev == 0 ? 1.0f : s.alpha_bar[static_cast<size_t>(t_prev)];
  float alpha_eff = ab_t / ab_prev;
  float beta_eff = 1.0f - alpha_eff;
  float inv_sqrt_ab = 1.0f / std::sqrt(ab_t);
  float sqrt_om_ab = std::sqrt(1.0f - ab_t);
  float c0 = std::sqrt(ab_prev) * beta_eff / (1.0f - ab_t);
  float c1 = std::sqrt(alpha_eff) * (1.0f - ab_prev) / (1.0f - ab_t);
  float var = beta_eff * (1.0f - ab_prev) / (1.0f - ab_t);
  float sigma = std::sqrt(std::max(var, 0.0f));

  auto xv = x.values_mut();
  auto ev = eps.values();
  int64_t per = x.size() / n;
  for (int i = 0; i < n; ++i) {
    counter_rng noise_rng =
        rng_of(i).stream(static_cast<uint64_t>(t)).stream(stream_tag);
    float* xs = xv.data() + static_cast<int64_t>(i) * per;
    const float* es = ev.data() + static_cast<int64_t>(i) * per;
    for (int64_t j = 0; j < per; ++j) {
      float x0 = (xs[j] - sqrt_om_ab * es[j]) * inv_sqrt_ab;
      x0 = std::min(1.0f, std::max(-1.0f, x0));
      float mean = c0 * x0 + c1 * xs[j];
      xs[j] = t_prev == 0 ? mean : mean + sigma * noise_rng.normal(static_cast<uint64_t>(j));
    }
  }
}

}  // namespace detail

// Evolves n paired latents from independent standard-normal noise to t = 0.
// e_x/e_m are the stacked conditional embeddings [n, L, d]; null_x/null_m the
// unconditional pair [L, d]. Sample i draws all of its noise from
// sample_rng.stream(first_index + i), so results are independent of batching.
inline latent_pair_batch sample_pairs_latent(const noise_schedule& s, const denoise_fn& fn,
                                             int n, const shape_t& latent_chw,
                                             const tensor& e_x, const tensor& e_m,
                                             const tensor& null_x, const tensor& null_m,
                                             const sampler_config& cfg,
                                             const counter_rng& sample_rng,
                                             int64_t first_index = 0) {
  detail::sampler_validate(s, cfg);
  if (latent_chw.size() != 3)
    throw std::invalid_argument("sampler: latent shape must be [C,S,S]");
  if (n < 1) throw std::invalid_argument("sampler: n must be >= 1");
  auto rng_of = [&](int i) {
    return sample_rng.stream(static_cast<uint64_t>(first_index + i));
  };

  shape_t batch_shape = {n, latent_chw[0], latent_chw[1], latent_chw[2]};
  latent_pair_batch lat{tensor(batch_shape), tensor(batch_shape)};
  int64_t per = shape_numel(latent_chw);
  for (int i = 0; i < n; ++i) {
    counter_rng sr = rng_of(i);
    sr.stream(0).stream(1).fill_normal(
        std::span<float>(lat.z.values_mut().data() + i * per, static_cast<size_t>(per)));
    sr.stream(0).stream(2).fill_normal(
        std::span<float>(lat.y.values_mut().data() + i * per, static_cast<size_t>(per)));
  }

  tensor null_xb, null_mb;
  if (!cfg.conditional_only) {
    null_xb = tensor({n, null_x.dim(0), null_x.dim(1)});
    null_mb = tensor({n, null_m.dim(0), null_m.dim(1)});
    for (int i = 0; i < n; ++i) {
      std::copy_n(null_x.values().data(), null_x.size(),
                  null_xb.values_mut().data() + i * null_x.size());
      std::copy_n(null_m.values().data(), null_m.size(),
                  null_mb.values_mut().data() + i * null_m.size());
    }
  }

  int stride = s.T / cfg.steps;
  std::vector<int> ts(static_cast<size_t>(n));
  for (int t = s.T; t >= stride; t -= stride) {
    std::fill(ts.begin(), ts.end(), t);
    noise_pair cond = fn(lat.z, lat.y, ts, e_x, e_m);
    tensor eps_x = cond.eps_x, eps_m = cond.eps_m;
    if (!cfg.conditional_only) {
      noise_pair unc = fn(lat.z, lat.y, ts, null_xb, null_mb);
      eps_x = cfg_combine(unc.eps_x, cond.eps_x, cfg.guidance);
      eps_m = cfg_combine(unc.eps_m, cond.eps_m, cfg.guidance);
    }
    if (eps_x.shape() != lat.z.shape() || eps_m.shape() != lat.y.shape())
      throw std::runtime_error("sampler: denoiser returned mismatched shapes");
    int t_prev = t - stride;
    detail::posterior_step(s, lat.z, eps_x, t, t_prev, n, 1, rng_of);
    detail::posterior_step(s, lat.y, eps_m, t, t_prev, n, 2, rng_of);
  }
  return lat;
}

}  // namespace duodiff
