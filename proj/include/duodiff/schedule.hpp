#pragma once

// Linear-beta noise schedule and the closed-form forward noising process.
// Accumulations run in double; stored tables are float32.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "duodiff/rng.hpp"
#include "duodiff/tensor.hpp"

namespace duodiff {

struct noise_schedule {
  int T = 1000;
  float beta_start = 1e-4f;
  float beta_end = 2e-2f;
  // Indexed 1..T; index 0 is a placeholder so t maps directly.
  std::vector<float> beta;           // beta_t
  std::vector<float> alpha;          // 1 - beta_t
  std::vector<float> alpha_bar;      // prod_{s<=t} alpha_s; alpha_bar[0] = 1
  std::vector<float> sqrt_alpha_bar;
  std::vector<float> sqrt_one_minus_alpha_bar;

  static noise_schedule linear(int T = 1000, float beta_start = 1e-4f,
                               float beta_end = 2e-2f) {
    if (T < 1) throw std::invalid_argument("noise_schedule: T must be >= 1");
    if (!(beta_start > 0.0f) || !(beta_end < 1.0f) || beta_start > beta_end)
      throw std::invalid_argument("noise_schedule: need 0 < beta_start <= beta_end < 1");
    noise_schedule s;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.beta.assign(static_cast<size_t>(T) + 1, 0.0f);
    s.alpha.assign(static_cast<size_t>(T) + 1, 1.0f);
    s.alpha_bar.assign(static_cast<size_t>(T) + 1, 1.0f);
    s.sqrt_alpha_bar.assign(static_cast<size_t>(T) + 1, 1.0f);
    s.sqrt_one_minus_alpha_bar.assign(static_cast<size_t>(T) + 1, 0.0f);
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
      double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / (T - 1);
      double b = beta_start + (beta_end - beta_start) * frac;
      double a = 1.0 - b;
      prod *= a;
      s.beta[t] = static_cast<float>(b);
      s.alpha[t] = static_cast<float>(a);
      s.alpha_bar[t] = static_cast<float>(prod);
      s.sqrt_alpha_bar[t] = static_cast<float>(std::sqrt(prod));
      s.sqrt_one_minus_alpha_bar[t] = static_cast<float>(std::sqrt(1.0 - prod));
    }
    return s;
  }

  void check_t(int t) const {
    if (t < 1 || t > T)
      throw std::invalid_argument("noise_schedule: t = " + std::to_string(t) +
                                  " outside [1, " + std::to_string(T) + "]");
  }
};

// z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps
inline tensor forward_diffuse(const noise_schedule& s, const tensor& z0, const tensor& eps,
                              int t) {
  s.check_t(t);
  if (z0.shape() != eps.shape())
    throw std::invalid_argument("forward_diffuse: shape mismatch " + shape_str(z0.shape()) +
                                " vs " + shape_str(eps.shape()));
  float a = s.sqrt_alpha_bar[static_cast<size_t>(t)];
  float b = s.sqrt_one_minus_alpha_bar[static_cast<size_t>(t)];
  tensor out(z0.shape());
  auto zv = z0.values();
  auto ev = eps.values();
  auto ov = out.values_mut();
  for (int64_t i = 0; i < z0.size(); ++i) ov[i] = a * zv[i] + b * ev[i];
  return out;
}

// The model predicts one noise tensor per stream.
struct noise_pair {
  tensor eps_x;  // image-stream noise
  tensor eps_m;  // mask-stream noise
};

// Both streams at a shared timestep.
struct paired_latent {
  tensor z;  // image latent
  tensor y;  // mask latent
  int t = 0;
};

// Noise both streams with one shared t; the noises are the caller's
// independent per-stream draws.
inline paired_latent forward_diffuse(const noise_schedule& s, const tensor& z0,
                                     const tensor& y0, int t, const noise_pair& noise) {
  paired_latent p;
  p.z = forward_diffuse(s, z0, noise.eps_x, t);
  p.y = forward_diffuse(s, y0, noise.eps_m, t);
  p.t = t;
  return p;
}

// Independent standard-normal noise for the two streams from two rng streams.
inline noise_pair draw_noise_pair(const shape_t& shape, const counter_rng& rng_z,
                                  const counter_rng& rng_y) {
  noise_pair n;
  n.eps_x = tensor(shape);
  n.eps_m = tensor(shape);
  rng_z.fill_normal(n.eps_x.values_mut());
  rng_y.fill_normal(n.eps_m.values_mut());
  return n;
}

}  // namespace duodiff
