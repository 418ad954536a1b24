// Command-line front end.
//
//   duodiff gen-corpus  --out DIR [--count N --seed S ...]
//   duodiff train       [--corpus DIR] [--resume CKPT] --out DIR ...
//   duodiff sample      --ckpt CKPT [--prompt "label=...,..."] ...
//   duodiff eval        --ckpt CKPT --mode metrics|augment|ablate ...
//
// Exit codes: 0 success, 2 configuration/usage errors, 1 runtime failures.
// Every run writes its resolved config and run metadata into the output
// directory.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>

#include "CLI11.hpp"

#include "duodiff/duodiff.hpp"

namespace dd = duodiff;

namespace {

struct common_opts {
  std::string preset = "desk32";
  std::string config_file;
  std::string out_dir;
  uint64_t seed = 0;
  bool seed_set = false;
};

void add_common(CLI::App* cmd, common_opts& c) {
  cmd->add_option("--preset", c.preset, "configuration preset (desk32|smoke|wide64)");
  cmd->add_option("--config", c.config_file, "JSON config file overlaying the preset");
  cmd->add_option("--out", c.out_dir, "output directory");
  cmd->add_option("--seed", c.seed, "master seed")->each([&](const std::string&) {
    c.seed_set = true;
  });
}

dd::run_config resolve(const common_opts& c) {
  dd::run_config rc =
      c.config_file.empty() ? dd::make_preset(c.preset) : dd::load_run_config(c.config_file);
  if (!c.config_file.empty() && c.preset != "desk32") {
    // --preset together with --config: the file's preset wins unless the file
    // omits it.
    dd::json j = dd::json::parse(dd::read_file(c.config_file));
    if (!j.contains("preset")) {
      rc = dd::make_preset(c.preset);
      dd::overlay_run_config(rc, j);
      rc.validate();
    }
  }
  if (c.seed_set) {
    rc.seed = c.seed;
    rc.train.seed = c.seed;
  }
  if (!c.out_dir.empty()) rc.out_dir = c.out_dir;
  return rc;
}

std::string out_dir_for(const dd::run_config& rc, const std::string& leaf) {
  return rc.out_dir.empty() ? rc.resolved_out_dir() + "/" + leaf : rc.out_dir;
}

void write_resolved(const std::string& dir, const dd::run_config& rc,
                    const std::string& command) {
  dd::write_file(dir + "/resolved_config.json", dd::run_to_json(rc).dump(2) + "\n");
  dd::write_run_metadata(dir, rc, command);
}

// ---- gen-corpus ----
int cmd_gen_corpus(const common_opts& copt, int count_override) {
  dd::run_config rc = resolve(copt);
  if (count_override > 0) rc.corpus_count = count_override;
  rc.validate();
  std::string dir = out_dir_for(rc, "corpus");
  std::vector<dd::paired_sample> samples =
      dd::generate_corpus(rc.corpus, rc.corpus_count, rc.seed);
  dd::export_dataset(dir, samples, rc.corpus, rc.seed);
  dd::write_sample_grid(dir + "/preview.pgm",
                        std::span<const dd::paired_sample>(samples.data(),
                                                           std::min<size_t>(16, samples.size())),
                        rc.corpus.classes);
  write_resolved(dir, rc, "gen-corpus");
  std::printf("wrote %d samples to %s\n", rc.corpus_count, dir.c_str());
  return 0;
}

// ---- train ----
int cmd_train(const common_opts& copt, const std::string& corpus_dir,
              const std::string& resume_path, int steps_override) {
  dd::run_config rc = resolve(copt);
  if (steps_override > 0) rc.train.steps = steps_override;
  rc.validate();
  std::string dir = out_dir_for(rc, "train");

  std::vector<dd::paired_sample> samples;
  if (!corpus_dir.empty()) {
    dd::dataset ds = dd::import_dataset(corpus_dir);
    if (ds.config.image_size != rc.corpus.image_size ||
        ds.config.channels != rc.corpus.channels || ds.config.classes != rc.corpus.classes)
      throw dd::config_error("train: corpus at " + corpus_dir +
                             " does not match the configured corpus shape");
    samples = std::move(ds.samples);
  } else {
    std::printf("no --corpus given; generating %d samples in memory\n", rc.corpus_count);
    samples = dd::generate_corpus(rc.corpus, rc.corpus_count, rc.seed);
  }
  dd::split_view split = dd::split_dataset(samples, rc.train_fraction);

  dd::noise_schedule sched = dd::noise_schedule::linear(rc.model.schedule_T);
  dd::adamw_config oc;
  oc.lr = rc.train.lr;
  oc.weight_decay = rc.train.weight_decay;

  int start_step = 0;
  std::unique_ptr<dd::denoiser> model;
  std::unique_ptr<dd::adamw> opt;
  if (!resume_path.empty()) {
    dd::checkpoint ck = dd::read_checkpoint(resume_path);
    if (dd::config_hash(ck.model_cfg, ck.make_schedule()) !=
        dd::config_hash(rc.model, sched))
      throw dd::config_error("train: checkpoint " + resume_path +
                             " was produced by a different model/schedule config");
    model = std::make_unique<dd::denoiser>(dd::restore_model(ck));
    opt = ck.has_optimizer
              ? std::make_unique<dd::adamw>(dd::restore_optimizer(ck, *model, oc))
              : std::make_unique<dd::adamw>(oc, model->trainable());
    start_step = static_cast<int>(ck.step);
    if (start_step >= rc.train.steps)
      throw dd::config_error("train: checkpoint is already at step " +
                             std::to_string(start_step) + " >= train.steps " +
                             std::to_string(rc.train.steps));
    std::printf("resuming from %s at step %d\n", resume_path.c_str(), start_step);
  } else {
    model = std::make_unique<dd::denoiser>(rc.model, rc.seed);
    opt = std::make_unique<dd::adamw>(oc, model->trainable());
  }

  write_resolved(dir, rc, "train");
  std::ofstream log(dir + "/train_log.jsonl", std::ios::app);
  if (!log) throw std::runtime_error("train: cannot open " + dir + "/train_log.jsonl");

  dd::train_callbacks cb;
  cb.on_log = [&](int step, float loss, float lr, double ms) {
    log << dd::json{{"step", step}, {"loss", loss}, {"lr", lr}, {"wall_ms", ms}}.dump()
        << "\n";
    if (step % rc.train.log_every == 0 || step == rc.train.steps) {
      std::printf("step %6d  loss %.5f  (%.0f ms)\n", step, loss, ms);
      std::fflush(stdout);
      log.flush();
    }
  };
  cb.on_checkpoint = [&](int step) {
    std::string path = dir + "/ckpt-" + std::to_string(step) + ".ckpt";
    dd::save_checkpoint(path, *model, sched, step, opt.get());
    dd::save_checkpoint(dir + "/ckpt-latest.ckpt", *model, sched, step, opt.get());
  };

  dd::train_loop(*model, *opt, sched, split.train, rc.corpus.classes, rc.train, cb,
                 start_step);
  std::printf("trained to step %d; checkpoints in %s\n", rc.train.steps, dir.c_str());
  return 0;
}

// ---- sample ----
int cmd_sample(const common_opts& copt, const std::string& ckpt_path,
               const std::string& prompt_str, int n, int steps, float guidance) {
  dd::run_config rc = resolve(copt);
  if (ckpt_path.empty()) throw dd::config_error("sample: --ckpt is required");
  if (n > 0) rc.sample_count = n;
  if (steps > 0) rc.sampling.steps = steps;
  if (guidance >= 0.0f) rc.sampling.guidance = guidance;

  dd::checkpoint ck = dd::read_checkpoint(ckpt_path);
  dd::denoiser model = dd::restore_model(ck);
  dd::noise_schedule sched = ck.make_schedule();
  rc.model = ck.model_cfg;  // resolved config reflects the loaded model
  rc.corpus.image_size = ck.model_cfg.image_size;
  rc.corpus.channels = ck.model_cfg.image_channels;
  rc.validate();

  dd::prompt_spec prompt =
      prompt_str.empty() ? dd::prompt_spec::null_spec() : dd::prompt_spec::parse(prompt_str);

  std::string dir = out_dir_for(rc, "samples");
  std::vector<dd::paired_sample> gen = dd::sample_pairs(
      model, sched, prompt, rc.sample_count, rc.corpus.classes, rc.sampling, rc.seed);
  dd::export_dataset(dir, gen, rc.corpus, rc.seed);
  dd::write_sample_grid(dir + "/preview.pgm", gen, rc.corpus.classes);
  write_resolved(dir, rc, "sample");
  std::printf("wrote %d sampled pairs (prompt \"%s\", %d steps, guidance %.2f) to %s\n",
              rc.sample_count, prompt.to_string().c_str(), rc.sampling.steps,
              static_cast<double>(rc.sampling.guidance), dir.c_str());
  return 0;
}

// ---- eval ----
int cmd_eval(const common_opts& copt, const std::string& ckpt_path,
             const std::string& corpus_dir, const std::string& mode) {
  dd::run_config rc = resolve(copt);
  rc.validate();
  std::string dir = out_dir_for(rc, "eval-" + mode);

  std::vector<dd::paired_sample> samples;
  if (!corpus_dir.empty()) {
    dd::dataset ds = dd::import_dataset(corpus_dir);
    rc.corpus = ds.config;
    samples = std::move(ds.samples);
  } else {
    samples = dd::generate_corpus(rc.corpus, rc.corpus_count, rc.seed);
  }
  dd::split_view split = dd::split_dataset(samples, rc.train_fraction);

  if (mode == "ablate") {
    dd::ablation_config ac;
    ac.base = rc.model;
    ac.train = rc.train;
    // Arms sample at the default generation settings, not the preset's
    // alignment-tuned guidance: the fidelity ordering between arms is a
    // property of the standard generation regime.
    ac.features = rc.features;
    ac.seg = rc.seg;
    ac.corpus = rc.corpus;
    ac.corpus_count = rc.corpus_count;
    ac.train_fraction = rc.train_fraction;
    ac.eval_samples = rc.eval_samples;
    ac.augment_real_fraction = rc.augment_real_fraction;
    ac.seed = rc.seed;
    dd::ablation_report rep =
        dd::run_ablation(ac, [](const std::string& m) { std::printf("%s\n", m.c_str()); });
    dd::write_file(dir + "/ablation.csv", dd::ablation_csv(rep));
    dd::write_file(dir + "/ablation.md", dd::ablation_markdown(rep));
    write_resolved(dir, rc, "eval");
    std::printf("%s", dd::ablation_markdown(rep).c_str());
    bool any_fail = false;
    for (const auto& row : rep.rows) any_fail = any_fail || !row.ok;
    std::printf("report written to %s\n", dir.c_str());
    return any_fail ? 1 : 0;
  }

  if (ckpt_path.empty()) throw dd::config_error("eval: --ckpt is required for this mode");
  dd::checkpoint ck = dd::read_checkpoint(ckpt_path);
  dd::denoiser model = dd::restore_model(ck);
  dd::noise_schedule sched = ck.make_schedule();
  if (ck.model_cfg.image_size != rc.corpus.image_size ||
      ck.model_cfg.image_channels != rc.corpus.channels)
    throw dd::config_error("eval: checkpoint image shape does not match the corpus");

  if (mode == "metrics") {
    dd::feature_extractor fx =
        dd::train_feature_extractor(split.train, split.test, rc.features, rc.seed);
    dd::feature_stats real_stats = dd::stats_of(fx, split.test);
    std::vector<dd::prompt_spec> prompts = dd::prompts_from(split.test, rc.eval_samples);
    std::vector<dd::paired_sample> gen =
        dd::sample_pairs(model, sched, prompts, rc.corpus.classes, rc.sampling, rc.seed);
    dd::generation_scores sc = dd::score_generated(gen, rc.corpus.classes, fx, real_stats);
    dd::json out{{"afid", sc.afid},
                 {"ais", sc.ais},
                 {"alignment_dsc", sc.alignment},
                 {"samples", sc.n}};
    dd::write_file(dir + "/metrics.json", out.dump(2) + "\n");
    dd::write_sample_grid(dir + "/preview.pgm", gen, rc.corpus.classes);
    write_resolved(dir, rc, "eval");
    std::printf("%s\n", out.dump(2).c_str());
    return 0;
  }

  if (mode == "augment") {
    std::vector<dd::paired_sample> real_sub =
        dd::subsample_fraction(split.train, rc.augment_real_fraction, rc.seed);
    std::vector<dd::prompt_spec> prompts =
        dd::prompts_from(real_sub, static_cast<int>(real_sub.size()));
    std::vector<dd::paired_sample> synth = dd::sample_pairs(
        model, sched, prompts, rc.corpus.classes, rc.sampling, rc.seed, /*first_index=*/1 << 20);
    dd::augment_result ar = dd::run_augmentation_experiment(
        real_sub, split.test, synth, rc.corpus.classes, rc.seg, rc.seed);
    dd::write_file(dir + "/augment.csv", dd::augment_csv(ar));
    dd::write_file(dir + "/augment.md", dd::augment_markdown(ar));
    write_resolved(dir, rc, "eval");
    std::printf("%s", dd::augment_markdown(ar).c_str());
    std::printf("report written to %s\n", dir.c_str());
    return 0;
  }

  throw dd::config_error("eval: unknown --mode '" + mode + "' (metrics|augment|ablate)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-stream diffusion for paired image/mask generation"};
  app.require_subcommand(1);

  common_opts gc, tr, sa, ev;
  int gc_count = 0;
  auto* c_gen = app.add_subcommand("gen-corpus", "generate and export a phantom corpus");
  add_common(c_gen, gc);
  c_gen->add_option("--count", gc_count, "number of samples");

  std::string tr_corpus, tr_resume;
  int tr_steps = 0;
  auto* c_train = app.add_subcommand("train", "train the denoiser");
  add_common(c_train, tr);
  c_train->add_option("--corpus", tr_corpus, "exported corpus directory (else in-memory)");
  c_train->add_option("--resume", tr_resume, "checkpoint to resume from");
  c_train->add_option("--steps", tr_steps, "override total training steps");

  std::string sa_ckpt, sa_prompt;
  int sa_n = 0, sa_steps = 0;
  float sa_guidance = -1.0f;
  auto* c_sample = app.add_subcommand("sample", "generate pairs from a checkpoint");
  add_common(c_sample, sa);
  c_sample->add_option("--ckpt", sa_ckpt, "checkpoint path")->required();
  c_sample->add_option("--prompt", sa_prompt,
                       "prompt, e.g. label=round_bright,modality=smooth");
  c_sample->add_option("--n", sa_n, "number of pairs");
  c_sample->add_option("--steps", sa_steps, "sampler steps (default 50)");
  c_sample->add_option("--guidance", sa_guidance, "guidance scale (default 7.5)");

  std::string ev_ckpt, ev_corpus, ev_mode = "metrics";
  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint or run experiments");
  add_common(c_eval, ev);
  c_eval->add_option("--ckpt", ev_ckpt, "checkpoint path");
  c_eval->add_option("--corpus", ev_corpus, "exported corpus directory (else in-memory)");
  c_eval->add_option("--mode", ev_mode, "metrics|augment|ablate");

  try {
    app.parse(argc, argv);
    if (c_gen->parsed()) return cmd_gen_corpus(gc, gc_count);
    if (c_train->parsed()) return cmd_train(tr, tr_corpus, tr_resume, tr_steps);
    if (c_sample->parsed()) return cmd_sample(sa, sa_ckpt, sa_prompt, sa_n, sa_steps, sa_guidance);
    if (c_eval->parsed()) return cmd_eval(ev, ev_ckpt, ev_corpus, ev_mode);
    return 2;
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const dd::config_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
