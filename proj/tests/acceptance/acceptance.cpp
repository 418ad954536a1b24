// Acceptance harness: ten numbered end-to-end checks with hard thresholds,
// from gradient oracles to full reference training, ablation and
// augmentation runs. Prints one [PASS]/[FAIL] line per check; exit code is
// the number of failures. Optional arguments select checks by number:
//
//   acceptance            # run all ten
//   acceptance 1 5 10     # run a subset
//
// The reference training run (check 7) is cached and reused by check 9, so
// running "7 9" trains once.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "duodiff/duodiff.hpp"
#include "test_helpers.hpp"

using namespace duodiff;

namespace {

struct check_result {
  bool ok = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

bool bit_equal(const tensor& a, const tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto av = a.values(), bv = b.values();
  return std::equal(av.begin(), av.end(), bv.begin());
}

// ---- 1: every differentiable op against central finite differences ----

check_result check_gradient_oracle() {
  int checked = 0;
  for (const ddtest::fd_scenario& sc : ddtest::fd_all_scenarios()) {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
      ddtest::fd_failure f = ddtest::fd_check(sc, seed);
      if (f.failed) return {false, f.detail};
      ++checked;
    }
  }
  return {true, std::to_string(checked) + " op/seed combinations, h=1e-3, rel tol 1e-3"};
}

// ---- 2: forward-diffusion marginals by Monte Carlo ----

check_result check_forward_marginals() {
  noise_schedule s = noise_schedule::linear(1000);
  const int elems = 8, draws = 10000;
  tensor x0({elems});
  {
    auto v = x0.values_mut();
    for (int i = 0; i < elems; ++i) v[i] = -1.0f + 2.0f * static_cast<float>(i) / (elems - 1);
  }
  counter_rng root(0x5eadbeef);
  for (int t : {1, 500, 1000}) {
    double sab = s.sqrt_alpha_bar[static_cast<size_t>(t)];
    double var_want = 1.0 - s.alpha_bar[static_cast<size_t>(t)];
    std::vector<double> sum(elems, 0.0), sumsq(elems, 0.0);
    for (int k = 0; k < draws; ++k) {
      tensor eps({elems});
      root.stream(static_cast<uint64_t>(t)).stream(static_cast<uint64_t>(k)).fill_normal(
          eps.values_mut());
      tensor xt = forward_diffuse(s, x0, eps, t);
      auto v = xt.values();
      for (int i = 0; i < elems; ++i) {
        sum[i] += v[i];
        sumsq[i] += static_cast<double>(v[i]) * v[i];
      }
    }
    double pooled_var = 0.0;
    double sigma_mean = std::sqrt(var_want / draws);
    for (int i = 0; i < elems; ++i) {
      double mean = sum[i] / draws;
      double want = sab * x0.values()[static_cast<size_t>(i)];
      if (std::abs(mean - want) > 3.0 * sigma_mean)
        return {false, "t=" + std::to_string(t) + " elem " + std::to_string(i) + ": mean " +
                           fmt(mean, 5) + " vs " + fmt(want, 5) + " (3-sigma " +
                           fmt(3.0 * sigma_mean, 5) + ")"};
      pooled_var += sumsq[i] / draws - mean * mean;
    }
    pooled_var /= elems;
    if (std::abs(pooled_var - var_want) > 0.05 * var_want)
      return {false, "t=" + std::to_string(t) + ": pooled var " + fmt(pooled_var, 5) +
                         " vs " + fmt(var_want, 5) + " (tol 5%)"};
  }
  return {true, "10^4 draws at t in {1,500,1000}: means within 3 sigma, variance within 5%"};
}

// ---- 3: role-swap symmetry, bit-exact ----

check_result check_role_swap() {
  model_config mc = ddtest::tiny_model_config();
  denoiser model(mc, 0x913);
  ddtest::randomize_params(model, 0x5eed);
  int L = prompt_embedder::seq_len, d = mc.text_dim;
  shape_t lat{mc.latent_channels(), mc.latent_size(), mc.latent_size()};
  tape tp;
  tp.set_recording(false);
  counter_rng rng(0x305);
  for (int i = 0; i < 100; ++i) {
    counter_rng r = rng.stream(static_cast<uint64_t>(i));
    tensor z = ddtest::rand_tensor(r.stream(1), lat, -1.0f, 1.0f, false);
    tensor y = ddtest::rand_tensor(r.stream(2), lat, -1.0f, 1.0f, false);
    tensor ex = ddtest::rand_tensor(r.stream(3), {L, d}, -1.0f, 1.0f, false);
    tensor em = ddtest::rand_tensor(r.stream(4), {L, d}, -1.0f, 1.0f, false);
    int t = 1 + static_cast<int>(r.stream(5).uniform_index(0, mc.schedule_T));
    noise_pair ab = model.denoise_one(tp, z, y, t, ex, em);
    noise_pair ba = model.denoise_one(tp, y, z, t, em, ex);
    if (!bit_equal(ab.eps_x, ba.eps_m) || !bit_equal(ab.eps_m, ba.eps_x))
      return {false, "input " + std::to_string(i) + " (t=" + std::to_string(t) +
                         "): swapped outputs are not bit-identical"};
  }
  return {true, "100 random inputs: swapped-argument outputs bit-identical"};
}

// ---- 4: cross-stream attention is the only coupling path ----

check_result check_cross_stream_structure() {
  model_config base = ddtest::tiny_model_config();
  int L = prompt_embedder::seq_len, d = base.text_dim;
  shape_t lat{base.latent_channels(), base.latent_size(), base.latent_size()};
  counter_rng rng(0xced);
  tensor z1 = ddtest::rand_tensor(rng.stream(1), lat, -1.0f, 1.0f, false);
  tensor z2 = ddtest::rand_tensor(rng.stream(2), lat, -1.0f, 1.0f, false);
  tensor y1 = ddtest::rand_tensor(rng.stream(3), lat, -1.0f, 1.0f, false);
  tensor y2 = ddtest::rand_tensor(rng.stream(4), lat, -1.0f, 1.0f, false);
  tensor ex = ddtest::rand_tensor(rng.stream(5), {L, d}, -1.0f, 1.0f, false);
  tensor em = ddtest::rand_tensor(rng.stream(6), {L, d}, -1.0f, 1.0f, false);
  const int t = 17;
  tape tp;
  tp.set_recording(false);

  model_config no_jca = base;
  no_jca.jca_stages.clear();
  denoiser a(no_jca, 3);
  ddtest::randomize_params(a, 0xaaa);
  noise_pair a1 = a.denoise_one(tp, z1, y1, t, ex, em);
  noise_pair a2 = a.denoise_one(tp, z1, y2, t, ex, em);
  if (!bit_equal(a1.eps_x, a2.eps_x))
    return {false, "without joint attention, image output still depends on the mask stream"};

  model_config no_i2m = base;
  no_i2m.jca_image_to_mask = false;
  denoiser b(no_i2m, 3);
  ddtest::randomize_params(b, 0xbbb);
  noise_pair b1 = b.denoise_one(tp, z1, y1, t, ex, em);
  noise_pair b2 = b.denoise_one(tp, z2, y1, t, ex, em);
  if (!bit_equal(b1.eps_m, b2.eps_m))
    return {false, "with image-to-mask disabled, mask output still depends on the image stream"};
  noise_pair b3 = b.denoise_one(tp, z1, y2, t, ex, em);
  if (bit_equal(b1.eps_x, b3.eps_x))
    return {false, "with only image-to-mask disabled, image output ignores the mask stream"};
  return {true, "stream coupling appears exactly where the attention flags enable it"};
}

// ---- 5: metric implementations against independent oracles ----

check_result check_metric_oracles() {
  // Distribution distance vs a nonsymmetric-eigendecomposition oracle:
  // trace term via the eigenvalues of cov_r * cov_g.
  const int dim = 8, rows = 64;
  for (uint64_t seed = 1; seed <= 8; ++seed) {
    counter_rng rng = counter_rng(seed).stream(0xf1d);
    feature_stats real(dim), gen(dim);
    std::vector<float> buf(dim);
    for (int i = 0; i < rows; ++i) {
      counter_rng ri = rng.stream(1).stream(static_cast<uint64_t>(i));
      for (int j = 0; j < dim; ++j)
        buf[static_cast<size_t>(j)] = static_cast<float>(2.0 * ri.uniform(j) - 1.0);
      real.add(buf);
      counter_rng gi = rng.stream(2).stream(static_cast<uint64_t>(i));
      for (int j = 0; j < dim; ++j)
        buf[static_cast<size_t>(j)] =
            static_cast<float>(2.0 * gi.uniform(j) - 1.0 + 0.1 * (j % 3));
      gen.add(buf);
    }
    double got = proxy_fid(real, gen);

    Eigen::VectorXd mr = real.mean(), mg = gen.mean();
    Eigen::MatrixXd cr = real.covariance(), cg = gen.covariance();
    double oracle = (mr - mg).squaredNorm() + cr.trace() + cg.trace();
    Eigen::EigenSolver<Eigen::MatrixXd> es(cr * cg);
    for (int i = 0; i < dim; ++i)
      oracle -= 2.0 * std::sqrt(std::max(0.0, es.eigenvalues()[i].real()));
    if (std::abs(got - oracle) > 1e-4 * std::max(1.0, std::abs(oracle)))
      return {false, "distribution distance " + fmt(got, 8) + " vs eigen oracle " +
                         fmt(oracle, 8) + " (seed " + std::to_string(seed) + ")"};
  }

  // Diversity score vs a scalar double-precision loop.
  {
    counter_rng rng(0x15c0);
    std::vector<std::vector<float>> probs;
    for (int i = 0; i < 16; ++i) {
      std::vector<float> p(5);
      counter_rng ri = rng.stream(static_cast<uint64_t>(i));
      float sum = 0.0f;
      for (int j = 0; j < 5; ++j) {
        p[static_cast<size_t>(j)] = 0.05f + static_cast<float>(ri.uniform(static_cast<uint64_t>(j)));
        sum += p[static_cast<size_t>(j)];
      }
      for (float& v : p) v /= sum;
      probs.push_back(std::move(p));
    }
    std::vector<double> marg(5, 0.0);
    for (const auto& p : probs)
      for (int j = 0; j < 5; ++j) marg[static_cast<size_t>(j)] += p[static_cast<size_t>(j)];
    for (double& m : marg) m /= probs.size();
    double kl = 0.0;
    for (const auto& p : probs)
      for (int j = 0; j < 5; ++j)
        if (p[static_cast<size_t>(j)] > 0.0f)
          kl += p[static_cast<size_t>(j)] *
                std::log(p[static_cast<size_t>(j)] / marg[static_cast<size_t>(j)]);
    double oracle = std::exp(kl / static_cast<double>(probs.size()));
    double got = proxy_is(probs);
    if (std::abs(got - oracle) > 1e-9)
      return {false, "diversity score " + fmt(got, 12) + " vs loop oracle " + fmt(oracle, 12)};
  }

  // Overlap fixed points.
  label_map full(4, 4), empty(4, 4), left(4, 4), right(4, 4), half(4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      full.at(y, x) = 1;
      left.at(y, x) = x < 2 ? 1 : 0;
      right.at(y, x) = x >= 2 ? 1 : 0;
      half.at(y, x) = x >= 1 && x < 3 ? 1 : 0;  // overlaps half of `left`
    }
  auto near = [](double a, double b) { return std::abs(a - b) < 1e-12; };
  if (!near(dsc(full, full, 1), 1.0) || !near(iou(full, full, 1), 1.0))
    return {false, "identical masks must score 1"};
  if (!near(dsc(left, right, 1), 0.0) || !near(iou(left, right, 1), 0.0))
    return {false, "disjoint masks must score 0"};
  if (!near(dsc(left, half, 1), 0.5) || !near(iou(left, half, 1), 1.0 / 3.0))
    return {false, "half-overlap must score DSC 0.5 / IoU 1/3, got DSC " +
                       fmt(dsc(left, half, 1), 6) + " IoU " + fmt(iou(left, half, 1), 6)};
  if (!near(dsc(empty, empty, 1), 1.0) || !near(iou(empty, empty, 1), 1.0))
    return {false, "mutually absent class must score 1"};
  return {true, "distance matches eigen oracle (1e-4), diversity matches loop oracle (1e-9), "
                "overlap fixed points exact"};
}

// ---- 6: guidance scale 1 equals the conditional-only sampler ----

check_result check_guidance_degeneracy() {
  model_config mc = ddtest::tiny_model_config();
  denoiser model(mc, 0x6de);
  ddtest::randomize_params(model, 0x40d);
  noise_schedule s = noise_schedule::linear(mc.schedule_T);
  sampler_config guided;
  guided.steps = 10;
  guided.guidance = 1.0f;
  sampler_config cond = guided;
  cond.conditional_only = true;

  std::vector<prompt_spec> prompts(3, ddtest::example_prompt());
  prompts[1] = prompt_spec::null_spec();
  prompts[2].region = "se";
  std::vector<paired_sample> a =
      sample_pairs(model, s, std::span<const prompt_spec>(prompts), 4, guided, 0xabcd);
  std::vector<paired_sample> b =
      sample_pairs(model, s, std::span<const prompt_spec>(prompts), 4, cond, 0xabcd);
  for (size_t i = 0; i < a.size(); ++i) {
    if (!bit_equal(a[i].image, b[i].image) || a[i].mask.ids != b[i].mask.ids)
      return {false, "sample " + std::to_string(i) +
                         ": guided trajectory at scale 1 differs from conditional-only"};
  }
  return {true, "3 prompts, 10 steps: trajectories bit-identical"};
}

// ---- 7 + 9 shared state: the reference training run ----

struct reference_bundle {
  run_config rc;
  split_view split;
  noise_schedule sched = noise_schedule::linear(1);
  std::unique_ptr<denoiser> model;
  std::vector<float> losses;
};

reference_bundle& reference_run() {
  static reference_bundle bundle;
  static bool built = false;
  if (built) return bundle;
  bundle.rc = make_preset("desk32");
  const run_config& rc = bundle.rc;
  std::printf("  [reference] generating %d-sample corpus and training %d steps...\n",
              rc.corpus_count, rc.train.steps);
  std::fflush(stdout);
  std::vector<paired_sample> corpus = generate_corpus(rc.corpus, rc.corpus_count, rc.seed);
  bundle.split = split_dataset(corpus, rc.train_fraction);
  bundle.sched = noise_schedule::linear(rc.model.schedule_T);
  bundle.model = std::make_unique<denoiser>(rc.model, rc.seed);
  adamw_config oc;
  oc.lr = rc.train.lr;
  oc.weight_decay = rc.train.weight_decay;
  adamw opt(oc, bundle.model->trainable());
  train_callbacks cb;
  cb.on_log = [&](int step, float loss, float, double) {
    bundle.losses.push_back(loss);
    if (step % 500 == 0) {
      std::printf("  [reference] step %d loss %.4f\n", step, loss);
      std::fflush(stdout);
    }
  };
  train_loop(*bundle.model, opt, bundle.sched, bundle.split.train, rc.corpus.classes,
             rc.train, cb);
  built = true;
  return bundle;
}

check_result check_reference_training() {
  reference_bundle& ref = reference_run();
  const run_config& rc = ref.rc;
  const auto& losses = ref.losses;
  if (losses.size() < 20) return {false, "training produced too few loss records"};

  double early = std::accumulate(losses.begin(), losses.begin() + 10, 0.0) / 10.0;
  double late = std::accumulate(losses.end() - 10, losses.end(), 0.0) / 10.0;
  if (!(late < 0.5 * early))
    return {false, "final loss " + fmt(late) + " not below 50% of step-10 average " +
                       fmt(early)};

  feature_extractor fx =
      train_feature_extractor(ref.split.train, ref.split.test, rc.features, rc.seed);
  std::vector<prompt_spec> prompts = prompts_from(ref.split.test, 64);
  std::vector<paired_sample> gen = sample_pairs(*ref.model, ref.sched, prompts,
                                                rc.corpus.classes, rc.sampling, rc.seed);
  double align = 0.0;
  for (const paired_sample& ps : gen) align += alignment_dsc(ps, rc.corpus.classes);
  align /= static_cast<double>(gen.size());
  if (!(align >= 0.60))
    return {false, "mean alignment DSC " + fmt(align) + " below 0.60 over 64 samples"};

  std::vector<prompt_spec> dp(prompts.begin(), prompts.begin() + 8);
  std::vector<paired_sample> ga = sample_pairs(*ref.model, ref.sched,
                                               std::span<const prompt_spec>(dp),
                                               rc.corpus.classes, rc.sampling, 1234);
  std::vector<paired_sample> gb = sample_pairs(*ref.model, ref.sched,
                                               std::span<const prompt_spec>(dp),
                                               rc.corpus.classes, rc.sampling, 4321);
  double l1 = 0.0;
  for (size_t i = 0; i < ga.size(); ++i) {
    auto av = ga[i].image.values(), bv = gb[i].image.values();
    for (size_t j = 0; j < av.size(); ++j) l1 += std::abs(av[j] - bv[j]);
  }
  l1 /= static_cast<double>(ga.size() * ga[0].image.size());
  if (!(l1 > 0.0))
    return {false, "two master seeds produced identical samples (mean L1 = 0)"};

  return {true, "loss " + fmt(early) + " -> " + fmt(late) + " (<50%), alignment DSC " +
                    fmt(align) + " >= 0.60, seed diversity L1 " + fmt(l1)};
}

// ---- 8: joint-attention ablation ordering ----

check_result check_attention_ablation() {
  run_config rc = make_preset("desk32");
  ablation_config ac;
  ac.base = rc.model;
  ac.train = rc.train;
  // Arms keep the default generation settings (see ablation_config).
  ac.features = rc.features;
  ac.seg = rc.seg;
  ac.corpus = rc.corpus;
  ac.corpus_count = rc.corpus_count;
  ac.train_fraction = rc.train_fraction;
  ac.eval_samples = 64;
  ac.augment_real_fraction = rc.augment_real_fraction;
  ac.seed = rc.seed;
  ablation_report rep = run_ablation(ac, [](const std::string& m) {
    std::printf("  [ablation] %s\n", m.c_str());
    std::fflush(stdout);
  });

  std::map<std::string, ablation_row> rows;
  for (const ablation_row& r : rep.rows) rows[r.arm] = r;
  for (const char* arm : {"full", "wo_jca", "wo_mask_to_image", "wo_image_to_mask"}) {
    auto it = rows.find(arm);
    if (it == rows.end()) return {false, std::string("missing arm ") + arm};
    if (!it->second.ok) return {false, std::string(arm) + " arm failed: " + it->second.error};
  }
  const ablation_row& full = rows["full"];
  const ablation_row& wo = rows["wo_jca"];
  if (!(full.alignment > wo.alignment))
    return {false, "alignment DSC full " + fmt(full.alignment) + " not strictly above w/o-JCA " +
                       fmt(wo.alignment)};
  if (!(full.afid <= wo.afid))
    return {false, "distribution distance full " + fmt(full.afid) + " above w/o-JCA " +
                       fmt(wo.afid)};
  return {true, "alignment full " + fmt(full.alignment) + " > w/o-JCA " + fmt(wo.alignment) +
                    "; distance full " + fmt(full.afid) + " <= w/o-JCA " + fmt(wo.afid)};
}

// ---- 9: synthetic augmentation does not degrade the downstream segmenter ----

check_result check_augmentation() {
  reference_bundle& ref = reference_run();
  const run_config& rc = ref.rc;
  std::vector<paired_sample> real_sub =
      subsample_fraction(ref.split.train, rc.augment_real_fraction, rc.seed);
  std::vector<prompt_spec> prompts = prompts_from(real_sub, static_cast<int>(real_sub.size()));
  std::printf("  [augment] sampling %zu synthetic pairs...\n", prompts.size());
  std::fflush(stdout);
  std::vector<paired_sample> synth =
      sample_pairs(*ref.model, ref.sched, prompts, rc.corpus.classes, rc.sampling, rc.seed,
                   /*first_index=*/1 << 20);
  augment_result ar = run_augmentation_experiment(real_sub, ref.split.test, synth,
                                                  rc.corpus.classes, rc.seg, rc.seed);
  if (!(ar.augmented.mean_dsc >= ar.real_only.mean_dsc - 0.01))
    return {false, "augmented DSC " + fmt(ar.augmented.mean_dsc) + " degrades real-only " +
                       fmt(ar.real_only.mean_dsc) + " by more than 0.01"};
  return {true, "held-out DSC real-only " + fmt(ar.real_only.mean_dsc) + " vs real+synth " +
                    fmt(ar.augmented.mean_dsc) + " at 25% real data"};
}

// ---- 10: determinism and persistence ----

check_result check_determinism_persistence() {
  namespace fs = std::filesystem;
  fs::path root = fs::temp_directory_path() / "duodiff_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);

  corpus_config cc;
  cc.image_size = 16;
  cc.classes = 3;
  std::vector<paired_sample> c1 = generate_corpus(cc, 24, 99);
  std::vector<paired_sample> c2 = generate_corpus(cc, 24, 99);
  for (size_t i = 0; i < c1.size(); ++i)
    if (!bit_equal(c1[i].image, c2[i].image) || c1[i].mask.ids != c2[i].mask.ids ||
        c1[i].seed != c2[i].seed)
      return {false, "corpus regeneration is not bit-identical at sample " + std::to_string(i)};
  export_dataset((root / "ca").string(), c1, cc, 99);
  export_dataset((root / "cb").string(), c2, cc, 99);
  for (const auto& e : fs::recursive_directory_iterator(root / "ca")) {
    if (!e.is_regular_file()) continue;
    fs::path rel = fs::relative(e.path(), root / "ca");
    if (read_file(e.path()) != read_file(root / "cb" / rel))
      return {false, "exported corpora differ at " + rel.string()};
  }

  // Two identically seeded trainings produce byte-identical checkpoints.
  model_config mc = ddtest::tiny_model_config();
  train_config tc;
  tc.steps = 20;
  tc.batch_size = 4;
  tc.lr = 1e-3f;
  tc.seed = 31;
  tc.checkpoint_every = 1000;
  noise_schedule s = noise_schedule::linear(mc.schedule_T);
  auto train_once = [&](const fs::path& out) {
    denoiser model(mc, 31);
    adamw_config oc;
    adamw opt(oc, model.trainable());
    train_loop(model, opt, s, c1, cc.classes, tc);
    save_checkpoint(out.string(), model, s, tc.steps, &opt);
    return model;
  };
  denoiser m1 = train_once(root / "run1.ckpt");
  denoiser m2 = train_once(root / "run2.ckpt");
  if (read_file(root / "run1.ckpt") != read_file(root / "run2.ckpt"))
    return {false, "identically seeded trainings produced different checkpoints"};

  // Checkpoint round trip restores the exact parameters and bytes.
  checkpoint ck = read_checkpoint((root / "run1.ckpt").string());
  denoiser restored = restore_model(ck);
  auto p1 = m1.params();
  auto p2 = restored.params();
  if (p1.size() != p2.size()) return {false, "restored model has a different parameter set"};
  for (size_t i = 0; i < p1.size(); ++i)
    if (!bit_equal(p1[i].t, p2[i].t))
      return {false, "restored parameter " + p1[i].name + " is not bit-identical"};
  adamw_config oc;
  adamw ropt = restore_optimizer(ck, restored, oc);
  save_checkpoint((root / "resaved.ckpt").string(), restored, ck.make_schedule(),
                  static_cast<int>(ck.step), &ropt);
  if (read_file(root / "run1.ckpt") != read_file(root / "resaved.ckpt"))
    return {false, "checkpoint save/load round trip is not byte-identical"};

  // Identical seeds reproduce identical samples, from disk and from memory.
  sampler_config sc;
  sc.steps = 10;
  sc.guidance = 1.5f;
  std::vector<paired_sample> g1 =
      sample_pairs(m1, s, ddtest::example_prompt(), 4, cc.classes, sc, 777);
  std::vector<paired_sample> g2 =
      sample_pairs(restored, s, ddtest::example_prompt(), 4, cc.classes, sc, 777);
  for (size_t i = 0; i < g1.size(); ++i)
    if (!bit_equal(g1[i].image, g2[i].image) || g1[i].mask.ids != g2[i].mask.ids)
      return {false, "restored model sampled different pairs at index " + std::to_string(i)};
  export_dataset((root / "sa").string(), g1, cc, 777);
  export_dataset((root / "sb").string(), g2, cc, 777);
  if (read_file(root / "sa" / "manifest.json") != read_file(root / "sb" / "manifest.json"))
    return {false, "exported sample manifests differ"};

  fs::remove_all(root);
  return {true, "corpora, checkpoints and samples reproduce byte-identically; "
                "save/load round trip exact"};
}

struct named_check {
  int number;
  const char* name;
  std::function<check_result()> fn;
};

}  // namespace

int main(int argc, char** argv) {
  std::vector<named_check> checks = {
      {1, "gradient-oracle", check_gradient_oracle},
      {2, "forward-marginals", check_forward_marginals},
      {3, "role-swap", check_role_swap},
      {4, "cross-stream-structure", check_cross_stream_structure},
      {5, "metric-oracles", check_metric_oracles},
      {6, "guidance-degeneracy", check_guidance_degeneracy},
      {7, "reference-training", check_reference_training},
      {8, "attention-ablation", check_attention_ablation},
      {9, "augmentation", check_augmentation},
      {10, "determinism-persistence", check_determinism_persistence},
  };

  std::vector<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.push_back(std::atoi(argv[i]));
  int failures = 0, ran = 0;
  for (const named_check& c : checks) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), c.number) == wanted.end())
      continue;
    ++ran;
    auto t0 = std::chrono::steady_clock::now();
    check_result r;
    try {
      r = c.fn();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("[%s] %2d %s (%.1fs): %s\n", r.ok ? "PASS" : "FAIL", c.number, c.name, secs,
                r.detail.c_str());
    std::fflush(stdout);
    failures += r.ok ? 0 : 1;
  }
  std::printf("acceptance: %d/%d passed\n", ran - failures, ran);
  return failures;
}
