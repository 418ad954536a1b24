// Noise schedule invariants, the forward-diffusion distribution against a
// Monte Carlo oracle, guidance combination exactness, and the ancestral
// sampler's determinism/keying contract.

#include <cmath>
#include <cstdint>
#include <vector>

#include <gtest/gtest.h>

#include "test_helpers.hpp"

using namespace duodiff;

TEST(schedule, linear_tables_and_invariants) {
  noise_schedule s = noise_schedule::linear();
  ASSERT_EQ(s.T, 1000);
  ASSERT_EQ(s.beta.size(), 1001u);
  EXPECT_FLOAT_EQ(s.beta[1], 1e-4f);
  EXPECT_FLOAT_EQ(s.beta[1000], 2e-2f);
  EXPECT_FLOAT_EQ(s.alpha_bar[0], 1.0f);

  for (int t = 2; t <= s.T; ++t) {
    EXPECT_GT(s.beta[static_cast<size_t>(t)], s.beta[static_cast<size_t>(t - 1)]);
    EXPECT_LT(s.alpha_bar[static_cast<size_t>(t)], s.alpha_bar[static_cast<size_t>(t - 1)]);
  }
  for (int t = 1; t <= s.T; ++t) {
    double ab = s.alpha_bar[static_cast<size_t>(t)];
    double sa = s.sqrt_alpha_bar[static_cast<size_t>(t)];
    double so = s.sqrt_one_minus_alpha_bar[static_cast<size_t>(t)];
    EXPECT_FLOAT_EQ(s.alpha[static_cast<size_t>(t)], 1.0f - s.beta[static_cast<size_t>(t)]);
    // Check the defining identities (sqrt(1-ab) near t=1 would cancel badly
    // if recomputed in float).
    EXPECT_NEAR(sa * sa, ab, 1e-7);
    EXPECT_NEAR(so * so + ab, 1.0, 2e-7);
  }

  // Endpoint products of the linear schedule.
  EXPECT_GT(s.alpha_bar[1], 0.99f);
  EXPECT_LE(s.alpha_bar[1], 1.0f);
  EXPECT_FLOAT_EQ(s.alpha_bar[1], 1.0f - 1e-4f);
  EXPECT_LT(s.alpha_bar[1000], 0.05f);
  EXPECT_NEAR(s.alpha_bar[1000], 4.03583e-05f, 1e-9);
}

TEST(schedule, construction_and_bounds_errors) {
  EXPECT_THROW(noise_schedule::linear(0), std::invalid_argument);
  EXPECT_THROW(noise_schedule::linear(10, 0.0f, 0.5f), std::invalid_argument);
  EXPECT_THROW(noise_schedule::linear(10, 1e-4f, 1.0f), std::invalid_argument);
  EXPECT_THROW(noise_schedule::linear(10, 0.5f, 0.1f), std::invalid_argument);

  noise_schedule one = noise_schedule::linear(1, 1e-4f, 2e-2f);
  EXPECT_FLOAT_EQ(one.beta[1], 1e-4f);

  noise_schedule s = noise_schedule::linear(10);
  EXPECT_NO_THROW(s.check_t(1));
  EXPECT_NO_THROW(s.check_t(10));
  EXPECT_THROW(s.check_t(0), std::invalid_argument);
  EXPECT_THROW(s.check_t(11), std::invalid_argument);

  tensor z0({2, 2}, 0.5f);
  tensor eps({2, 2}, 0.0f);
  EXPECT_THROW(forward_diffuse(s, z0, eps, 0), std::invalid_argument);
  EXPECT_THROW(forward_diffuse(s, z0, tensor({3}, 0.0f), 3), std::invalid_argument);
}

TEST(schedule, forward_diffuse_closed_form) {
  noise_schedule s = noise_schedule::linear(100);
  tensor z0({4}, {0.8f, -0.3f, 0.1f, -0.9f});
  tensor eps({4}, {1.0f, -2.0f, 0.5f, 0.0f});
  for (int t : {1, 37, 100}) {
    tensor zt = forward_diffuse(s, z0, eps, t);
    float a = s.sqrt_alpha_bar[static_cast<size_t>(t)];
    float b = s.sqrt_one_minus_alpha_bar[static_cast<size_t>(t)];
    for (int i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(zt.at(i), a * z0.at(i) + b * eps.at(i));
  }
}

TEST(schedule, forward_diffuse_monte_carlo) {
  noise_schedule s = noise_schedule::linear();
  const int elems = 8;
  tensor z0({elems}, {0.9f, -0.7f, 0.25f, -0.1f, 0.0f, 0.6f, -0.95f, 0.4f});
  const int draws = 10000;
  counter_rng rng(41);

  for (int t : {1, s.T / 2, s.T}) {
    float m = s.sqrt_alpha_bar[static_cast<size_t>(t)];
    double want_var = 1.0 - static_cast<double>(s.alpha_bar[static_cast<size_t>(t)]);
    std::vector<double> mean(elems, 0.0);
    double var_acc = 0.0;
    counter_rng trng = rng.stream(static_cast<uint64_t>(t));
    for (int d = 0; d < draws; ++d) {
      tensor eps({elems});
      trng.stream(static_cast<uint64_t>(d)).fill_normal(eps.values_mut());
      tensor zt = forward_diffuse(s, z0, eps, t);
      for (int i = 0; i < elems; ++i) {
        double resid = zt.at(i) - m * z0.at(i);
        mean[static_cast<size_t>(i)] += zt.at(i);
        var_acc += resid * resid;
      }
    }
    // Per-element mean within three standard errors of sqrt(ab)*z0.
    double sigma = std::sqrt(want_var);
    double se = sigma / std::sqrt(static_cast<double>(draws));
    for (int i = 0; i < elems; ++i) {
      double got = mean[static_cast<size_t>(i)] / draws;
      EXPECT_NEAR(got, m * z0.at(i), 3.0 * se) << "t=" << t << " elem=" << i;
    }
    // Pooled variance within 5%.
    double got_var = var_acc / (static_cast<double>(draws) * elems);
    EXPECT_NEAR(got_var, want_var, 0.05 * want_var) << "t=" << t;
  }
}

TEST(guidance, exact_special_cases_and_formula) {
  tensor u({2, 2}, {1, 2, 3, 4});
  tensor c({2, 2}, {5, 6, 7, 8});

  tensor g1 = cfg_combine(u, c, 1.0f);
  // scale 1 returns the conditional tensor itself (same storage).
  EXPECT_EQ(g1.values().data(), c.values().data());
  tensor g0 = cfg_combine(u, c, 0.0f);
  EXPECT_EQ(g0.values().data(), u.values().data());

  tensor g2 = cfg_combine(u, c, 2.5f);
  for (int i = 0; i < 4; ++i)
    EXPECT_FLOAT_EQ(g2.at(i), u.at(i) + 2.5f * (c.at(i) - u.at(i)));

  EXPECT_THROW(cfg_combine(u, tensor({3}, 0.0f), 2.0f), std::invalid_argument);
}

namespace {

// Deterministic stand-in denoiser: eps = 0.2*x + 0.05*mean(e) per stream.
// Depends on the embeddings so guidance paths are distinguishable.
denoise_fn fake_denoiser() {
  return [](const tensor& z, const tensor& y, std::span<const int> ts, const tensor& e_x,
            const tensor& e_m) {
    (void)ts;
    auto mean_of = [](const tensor& t) {
      double s = 0;
      for (float v : t.values()) s += v;
      return static_cast<float>(s / static_cast<double>(t.size()));
    };
    noise_pair out{tensor(z.shape()), tensor(y.shape())};
    float bx = 0.05f * mean_of(e_x), bm = 0.05f * mean_of(e_m);
    for (int64_t i = 0; i < z.size(); ++i)
      out.eps_x.values_mut()[i] = 0.2f * z.at(i) + bx;
    for (int64_t i = 0; i < y.size(); ++i)
      out.eps_m.values_mut()[i] = 0.2f * y.at(i) + bm;
    return out;
  };
}

latent_pair_batch run_sampler(int n, sampler_config cfg, uint64_t seed,
                              int64_t first_index = 0) {
  noise_schedule s = noise_schedule::linear(40);
  shape_t lat{2, 4, 4};
  tensor e_x({n, 2, 3}, 0.7f);
  tensor e_m({n, 2, 3}, -0.4f);
  tensor null_x({2, 3}, 0.1f);
  tensor null_m({2, 3}, 0.2f);
  return sample_pairs_latent(s, fake_denoiser(), n, lat, e_x, e_m, null_x, null_m, cfg,
                             counter_rng(seed).stream(rng_streams::sampler), first_index);
}

}  // namespace

TEST(sampler, deterministic_and_batch_invariant) {
  sampler_config cfg;
  cfg.steps = 8;
  cfg.guidance = 2.0f;
  latent_pair_batch a = run_sampler(3, cfg, 99);
  latent_pair_batch b = run_sampler(3, cfg, 99);
  ASSERT_EQ(a.z.size(), b.z.size());
  for (int64_t i = 0; i < a.z.size(); ++i) {
    ASSERT_EQ(a.z.at(i), b.z.at(i));
    ASSERT_EQ(a.y.at(i), b.y.at(i));
  }
  // Different seed changes the output.
  latent_pair_batch c = run_sampler(3, cfg, 100);
  bool any_diff = false;
  for (int64_t i = 0; i < a.z.size(); ++i) any_diff |= a.z.at(i) != c.z.at(i);
  EXPECT_TRUE(any_diff);

  // Per-sample noise keying: one batch of 3 equals three batches of 1.
  int64_t per = a.z.size() / 3;
  for (int i = 0; i < 3; ++i) {
    latent_pair_batch solo = run_sampler(1, cfg, 99, i);
    for (int64_t j = 0; j < per; ++j) {
      ASSERT_EQ(solo.z.at(j), a.z.at(i * per + j)) << "row " << i;
      ASSERT_EQ(solo.y.at(j), a.y.at(i * per + j)) << "row " << i;
    }
  }
}

TEST(sampler, outputs_are_finite_and_bounded) {
  sampler_config cfg;
  cfg.steps = 10;
  cfg.guidance = 3.0f;
  latent_pair_batch out = run_sampler(2, cfg, 7);
  // The final update delivers the clamped x0 estimate.
  for (int64_t i = 0; i < out.z.size(); ++i) {
    ASSERT_TRUE(std::isfinite(out.z.at(i)));
    ASSERT_GE(out.z.at(i), -1.0f);
    ASSERT_LE(out.z.at(i), 1.0f);
  }
}

TEST(sampler, validation_errors) {
  sampler_config cfg;
  cfg.steps = 7;  // does not divide 40
  EXPECT_THROW(run_sampler(1, cfg, 1), std::invalid_argument);
  cfg.steps = 0;
  EXPECT_THROW(run_sampler(1, cfg, 1), std::invalid_argument);
  cfg.steps = 8;
  cfg.guidance = std::numeric_limits<float>::infinity();
  EXPECT_THROW(run_sampler(1, cfg, 1), std::invalid_argument);
  cfg.guidance = 2.0f;
  cfg.conditional_only = true;  // only legal at guidance 1
  EXPECT_THROW(run_sampler(1, cfg, 1), std::invalid_argument);
}

TEST(sampler, conditional_only_matches_guided_at_scale_one) {
  sampler_config both;
  both.steps = 8;
  both.guidance = 1.0f;
  sampler_config cond = both;
  cond.conditional_only = true;
  latent_pair_batch a = run_sampler(2, both, 55);
  latent_pair_batch b = run_sampler(2, cond, 55);
  for (int64_t i = 0; i < a.z.size(); ++i) {
    ASSERT_EQ(a.z.at(i), b.z.at(i));
    ASSERT_EQ(a.y.at(i), b.y.at(i));
  }
}

TEST(sampler, posterior_step_hand_computed) {
  noise_schedule s = noise_schedule::linear(10);
  const int t = 10, t_prev = 5;
  double ab_t = s.alpha_bar[10], ab_prev = s.alpha_bar[5];
  double alpha_eff = ab_t / ab_prev, beta_eff = 1.0 - alpha_eff;

  const std::vector<float> x0v{0.4f, -1.9f};
  tensor x({1, 1, 1, 2}, x0v);  // tensors share storage, so keep a plain copy
  tensor eps({1, 1, 1, 2}, {0.3f, -0.6f});
  counter_rng root(17);
  auto rng_of = [&](int i) { return root.stream(static_cast<uint64_t>(i)); };
  tensor x_in({1, 1, 1, 2}, x0v);
  detail::posterior_step(s, x_in, eps, t, t_prev, 1, 9u, rng_of);

  for (int j = 0; j < 2; ++j) {
    double x0 = (x.at(j) - std::sqrt(1.0 - ab_t) * eps.at(j)) / std::sqrt(ab_t);
    x0 = std::min(1.0, std::max(-1.0, x0));
    double c0 = std::sqrt(ab_prev) * beta_eff / (1.0 - ab_t);
    double c1 = std::sqrt(alpha_eff) * (1.0 - ab_prev) / (1.0 - ab_t);
    double var = beta_eff * (1.0 - ab_prev) / (1.0 - ab_t);
    double noise = rng_of(0).stream(10).stream(9).normal(static_cast<uint64_t>(j));
    double want = c0 * x0 + c1 * x.at(j) + std::sqrt(var) * noise;
    EXPECT_NEAR(x_in.at(j), want, 1e-5) << "elem " << j;
  }

  // Final step: zero variance, returns the clamped x0 estimate exactly.
  tensor xf({1, 1, 1, 2}, {0.4f, -1.9f});
  detail::posterior_step(s, xf, eps, 5, 0, 1, 9u, rng_of);
  for (int j = 0; j < 2; ++j) {
    double ab5 = s.alpha_bar[5];
    double x0 = (x.at(j) - std::sqrt(1.0 - ab5) * eps.at(j)) / std::sqrt(ab5);
    x0 = std::min(1.0, std::max(-1.0, x0));
    EXPECT_NEAR(xf.at(j), x0, 1e-6);
  }
}
