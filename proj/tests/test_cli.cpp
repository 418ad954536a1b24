// End-to-end command-line checks: corpus export, training with resume,
// sampling, metric evaluation, determinism of re-runs, and exit codes.
// The binary path arrives in the DUODIFF_CLI environment variable.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include <gtest/gtest.h>

#include "test_helpers.hpp"

using namespace duodiff;
namespace fs = std::filesystem;

namespace {

std::string cli() {
  const char* p = std::getenv("DUODIFF_CLI");
  return p ? p : "";
}

fs::path work_root() {
  static fs::path root = [] {
    fs::path p = fs::temp_directory_path() / "duodiff_cli_test";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

struct run_result {
  int code = -1;
  std::string output;
};

run_result run_cli(const std::string& args, const std::string& tag) {
  fs::path log = work_root() / (tag + ".log");
  std::string cmd = cli() + " " + args + " >" + log.string() + " 2>&1";
  int ret = std::system(cmd.c_str());
  run_result r;
  r.code = ret == -1 ? -1 : WEXITSTATUS(ret);
  r.output = read_file(log);
  return r;
}

std::string slurp(const fs::path& p) { return read_file(p); }

}  // namespace

class cli_test : public ::testing::Test {
 protected:
  void SetUp() override {
    if (cli().empty()) GTEST_SKIP() << "DUODIFF_CLI not set";
  }
};

TEST_F(cli_test, usage_and_config_errors_exit_2) {
  EXPECT_EQ(run_cli("", "noargs").code, 2);
  EXPECT_EQ(run_cli("frobnicate", "badcmd").code, 2);
  EXPECT_EQ(run_cli("sample --preset smoke", "nockpt").code, 2);
  EXPECT_EQ(run_cli("train --preset nosuchpreset", "badpreset").code, 2);

  fs::path cfg = work_root() / "bad_key.json";
  write_file(cfg, R"({"preset":"smoke","no_such_field":1})");
  run_result r = run_cli("train --config " + cfg.string(), "badkey");
  EXPECT_EQ(r.code, 2) << r.output;
  EXPECT_NE(r.output.find("no_such_field"), std::string::npos) << r.output;
}

TEST_F(cli_test, gen_corpus_is_deterministic) {
  fs::path a = work_root() / "corpus_a";
  fs::path b = work_root() / "corpus_b";
  run_result ra =
      run_cli("gen-corpus --preset smoke --count 8 --seed 5 --out " + a.string(), "gen_a");
  ASSERT_EQ(ra.code, 0) << ra.output;
  run_result rb =
      run_cli("gen-corpus --preset smoke --count 8 --seed 5 --out " + b.string(), "gen_b");
  ASSERT_EQ(rb.code, 0) << rb.output;

  ASSERT_TRUE(fs::exists(a / "manifest.json"));
  EXPECT_EQ(slurp(a / "manifest.json"), slurp(b / "manifest.json"));
  for (int i = 0; i < 8; ++i) {
    std::string stem = sample_stem(static_cast<size_t>(i)) + ".pgm";
    EXPECT_EQ(slurp(a / "images" / stem), slurp(b / "images" / stem));
    EXPECT_EQ(slurp(a / "masks" / stem), slurp(b / "masks" / stem));
  }
  dataset ds = import_dataset(a.string());
  EXPECT_EQ(ds.samples.size(), 8u);
}

TEST_F(cli_test, train_sample_eval_pipeline) {
  fs::path train_dir = work_root() / "run_train";
  run_result tr = run_cli(
      "train --preset smoke --steps 12 --seed 9 --out " + train_dir.string(), "train");
  ASSERT_EQ(tr.code, 0) << tr.output;

  fs::path latest = train_dir / "ckpt-latest.ckpt";
  ASSERT_TRUE(fs::exists(latest));
  EXPECT_TRUE(fs::exists(train_dir / "ckpt-12.ckpt"));
  EXPECT_TRUE(fs::exists(train_dir / "resolved_config.json"));
  EXPECT_TRUE(fs::exists(train_dir / "run_metadata.json"));

  // One JSONL record per step.
  std::string log = slurp(train_dir / "train_log.jsonl");
  int lines = 0;
  for (char c : log) lines += c == '\n';
  EXPECT_EQ(lines, 12);
  checkpoint ck = read_checkpoint(latest.string());
  EXPECT_EQ(ck.step, 12);
  EXPECT_TRUE(ck.has_optimizer);

  // Resume three more steps from the checkpoint.
  fs::path resume_dir = work_root() / "run_resume";
  run_result rs = run_cli("train --preset smoke --steps 15 --seed 9 --resume " +
                              latest.string() + " --out " + resume_dir.string(),
                          "resume");
  ASSERT_EQ(rs.code, 0) << rs.output;
  EXPECT_EQ(read_checkpoint((resume_dir / "ckpt-latest.ckpt").string()).step, 15);

  // Resuming into a run whose step budget is already spent is a config error.
  run_result done = run_cli("train --preset smoke --steps 12 --seed 9 --resume " +
                                latest.string() + " --out " +
                                (work_root() / "run_done").string(),
                            "resume_done");
  EXPECT_EQ(done.code, 2) << done.output;

  // Resuming with an incompatible model shape is a config error.
  fs::path other_cfg = work_root() / "wider.json";
  write_file(other_cfg, R"({"preset":"smoke","model":{"base_width":16},"train":{"steps":20}})");
  run_result mis = run_cli("train --config " + other_cfg.string() + " --seed 9 --resume " +
                               latest.string() + " --out " +
                               (work_root() / "run_mismatch").string(),
                           "resume_mismatch");
  EXPECT_EQ(mis.code, 2) << mis.output;

  // Sampling from the checkpoint.
  fs::path samp_a = work_root() / "samp_a";
  std::string samp_args = " --ckpt " + latest.string() +
                          " --n 3 --steps 10 --guidance 1.5 --seed 123"
                          " --prompt label=round_bright,region=nw --out ";
  run_result sa = run_cli("sample" + samp_args + samp_a.string(), "sample_a");
  ASSERT_EQ(sa.code, 0) << sa.output;
  dataset gen = import_dataset(samp_a.string());
  ASSERT_EQ(gen.samples.size(), 3u);
  for (const auto& s : gen.samples) {
    EXPECT_EQ(s.prov, provenance::synthetic);
    ASSERT_TRUE(s.prompt.label.has_value());
    EXPECT_EQ(*s.prompt.label, "round_bright");
  }

  // Same seed, same outputs, byte for byte.
  fs::path samp_b = work_root() / "samp_b";
  run_result sb = run_cli("sample" + samp_args + samp_b.string(), "sample_b");
  ASSERT_EQ(sb.code, 0) << sb.output;
  for (int i = 0; i < 3; ++i) {
    std::string stem = sample_stem(static_cast<size_t>(i)) + ".pgm";
    EXPECT_EQ(slurp(samp_a / "images" / stem), slurp(samp_b / "images" / stem));
    EXPECT_EQ(slurp(samp_a / "masks" / stem), slurp(samp_b / "masks" / stem));
  }

  // Bad prompt tokens are usage errors.
  run_result bp = run_cli("sample --ckpt " + latest.string() +
                              " --prompt label=banana --out " +
                              (work_root() / "samp_bad").string(),
                          "sample_bad");
  EXPECT_EQ(bp.code, 2) << bp.output;

  // Metric evaluation end to end (extractor + sampler + scores).
  fs::path eval_dir = work_root() / "run_eval";
  run_result ev = run_cli("eval --mode metrics --preset smoke --seed 9 --ckpt " +
                              latest.string() + " --out " + eval_dir.string(),
                          "eval");
  ASSERT_EQ(ev.code, 0) << ev.output;
  json m = json::parse(slurp(eval_dir / "metrics.json"));
  for (const char* k : {"afid", "ais", "alignment_dsc"}) {
    ASSERT_TRUE(m.contains(k)) << m.dump(2);
    EXPECT_TRUE(std::isfinite(m[k].get<double>())) << k;
  }
  EXPECT_GE(m["ais"].get<double>(), 1.0);
  EXPECT_EQ(m["samples"].get<int>(), 8);
}

TEST_F(cli_test, train_rejects_corpus_with_wrong_shape) {
  // A corpus overlay alone fails validation: model and corpus shapes must agree.
  fs::path cfg_bad = work_root() / "corpus_only.json";
  write_file(cfg_bad, R"({"preset":"smoke","corpus":{"image_size":16}})");
  run_result v = run_cli("gen-corpus --config " + cfg_bad.string() + " --out " +
                             (work_root() / "never").string(),
                         "gen_shape_mismatch");
  EXPECT_EQ(v.code, 2) << v.output;

  // Export a consistent 16x16 corpus, then feed it to the 32x32 smoke model.
  fs::path cfg = work_root() / "tiny16.json";
  write_file(cfg,
             R"({"preset":"smoke","corpus":{"image_size":16},"model":{"image_size":16}})");
  fs::path cdir = work_root() / "corpus_tiny";
  run_result g = run_cli(
      "gen-corpus --config " + cfg.string() + " --count 6 --seed 2 --out " + cdir.string(),
      "gen_tiny");
  ASSERT_EQ(g.code, 0) << g.output;

  run_result t = run_cli("train --preset smoke --steps 4 --corpus " + cdir.string() +
                             " --out " + (work_root() / "run_wrong").string(),
                         "train_wrong");
  EXPECT_EQ(t.code, 2) << t.output;

  // A nonexistent corpus directory is a runtime failure, not a usage error.
  run_result nx = run_cli("train --preset smoke --steps 4 --corpus " +
                              (work_root() / "no_such_corpus").string() + " --out " +
                              (work_root() / "run_nx").string(),
                          "train_nx");
  EXPECT_EQ(nx.code, 1) << nx.output;
}
