#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "sml/corpus.hpp"
#include "sml/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kCli = SML_CLI_PATH;

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::path(SML_TEST_TMP) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run(const std::string& args, std::string* output = nullptr) {
  const fs::path out = fs::path(SML_TEST_TMP) / "cmd_output.txt";
  const std::string cmd = kCli + " " + args + " > " + out.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  if (output) *output = sml::io::read_file(out);
  return WEXITSTATUS(rc);
}

void write(const fs::path& p, const std::string& text) { sml::io::atomic_write(p, text); }

std::string copy_tsv(int pairs) {
  std::string tsv;
  for (int i = 0; i < pairs; ++i) {
    const std::string line = "tok" + std::to_string(i % 7) + " tok" + std::to_string(i % 5);
    tsv += line + "\t" + line + "\n";
  }
  return tsv;
}

const char* kTinyModelCfg =
    "layers = 1\nhidden = 16\nheads = 2\nffn = 24\nmax_turns = 6\nmax_pos = 64\n"
    "label_smoothing = 0.1\n";

std::string stage_cfg(const std::string& stage, const fs::path& corpus, int steps,
                      const std::string& extra = "") {
  return "stage = " + stage + "\ncorpus = " + corpus.string() + "\nsteps = " +
         std::to_string(steps) + "\nbatch_tokens = 6\nwarmup_steps = 10\nlr_scale = 0.05\n" +
         extra;
}

}  // namespace

TEST_CASE("prepare windows, dedups and writes corpus plus vocab") {
  auto dir = fresh_dir("prepare");
  write(dir / "in.tsv", copy_tsv(9));
  std::string out;
  const int rc = run("prepare --input " + (dir / "in.tsv").string() + " --out-dir " +
                         (dir / "out").string() + " --window 4 --min-freq 1",
                     &out);
  REQUIRE(rc == 0);
  auto convs = sml::corpus::conversations_from_jsonl(sml::io::read_file(dir / "out/corpus.jsonl"));
  REQUIRE(convs.size() == 2);  // 9 pairs, window 4, remainder dropped
  REQUIRE(convs[0].length() == 4);
  REQUIRE(fs::exists(dir / "out/vocab.txt"));
  REQUIRE(fs::exists(dir / "out/manifest.json"));
  auto manifest = json::parse(sml::io::read_file(dir / "out/manifest.json"));
  REQUIRE(manifest["command"] == "prepare");
  REQUIRE(manifest["outputs"].size() == 2);
}

TEST_CASE("prepare dedup count matches a set oracle") {
  auto dir = fresh_dir("prepare_dedup");
  // 12 pairs -> 3 windows of 4; two windows identical
  std::string tsv;
  auto block = [&](int salt) {
    for (int i = 0; i < 4; ++i) {
      const std::string line = "w" + std::to_string(salt) + "_" + std::to_string(i);
      tsv += line + "\t" + line + "\n";
    }
  };
  block(1);
  block(2);
  block(1);
  write(dir / "in.tsv", tsv);
  std::string out;
  REQUIRE(run("prepare --input " + (dir / "in.tsv").string() + " --out-dir " +
                  (dir / "out").string() + " --window 4",
              &out) == 0);
  auto convs = sml::corpus::conversations_from_jsonl(sml::io::read_file(dir / "out/corpus.jsonl"));
  REQUIRE(convs.size() == 2);
  REQUIRE(out.find("after dedup: 2") != std::string::npos);
}

TEST_CASE("prepare on empty input warns and writes empty outputs") {
  auto dir = fresh_dir("prepare_empty");
  write(dir / "in.tsv", "");
  std::string out;
  REQUIRE(run("prepare --input " + (dir / "in.tsv").string() + " --out-dir " +
                  (dir / "out").string(),
              &out) == 0);
  REQUIRE(out.find("warning") != std::string::npos);
  REQUIRE(sml::io::read_file(dir / "out/corpus.jsonl").empty());

  REQUIRE(run("prepare --input /nonexistent.tsv --out-dir " + (dir / "out2").string()) == 1);
}

TEST_CASE("train runs three toy stages and emits three checkpoints") {
  auto dir = fresh_dir("train3");
  write(dir / "in.tsv", copy_tsv(16));
  REQUIRE(run("prepare --input " + (dir / "in.tsv").string() + " --out-dir " +
              (dir / "data").string() + " --window 4") == 0);
  write(dir / "model.cfg", kTinyModelCfg);
  write(dir / "s1.cfg", stage_cfg("general_pretrain", dir / "data/corpus.jsonl", 3));
  write(dir / "s2.cfg", stage_cfg("indomain_pretrain", dir / "data/corpus.jsonl", 3));
  write(dir / "s3.cfg", stage_cfg("finetune", dir / "data/corpus.jsonl", 2));

  std::string out;
  const int rc = run("train --model " + (dir / "model.cfg").string() + " --vocab " +
                         (dir / "data/vocab.txt").string() + " --stage " +
                         (dir / "s1.cfg").string() + " --stage " + (dir / "s2.cfg").string() +
                         " --stage " + (dir / "s3.cfg").string() + " --out " +
                         (dir / "run").string() + " --seed 7",
                     &out);
  INFO(out);
  REQUIRE(rc == 0);
  REQUIRE(fs::exists(dir / "run/stage1_general_pretrain.ckpt"));
  REQUIRE(fs::exists(dir / "run/stage2_indomain_pretrain.ckpt"));
  REQUIRE(fs::exists(dir / "run/stage3_finetune.ckpt"));
  REQUIRE(fs::exists(dir / "run/manifest.json"));

  // the log is one JSON object per line with the expected fields
  bool saw_aux = false;
  for (const auto& line : sml::io::read_lines(dir / "run/train_log.jsonl")) {
    if (line.empty()) continue;
    auto j = json::parse(line);
    for (const char* k : {"step", "stage", "task", "loss", "alpha", "grad_norm"})
      REQUIRE(j.contains(k));
    if (j["task"] == "mrg") saw_aux = true;
  }
  REQUIRE(saw_aux);

  // out-of-order stages are rejected
  const int rc2 = run("train --model " + (dir / "model.cfg").string() + " --vocab " +
                      (dir / "data/vocab.txt").string() + " --stage " + (dir / "s2.cfg").string() +
                      " --stage " + (dir / "s1.cfg").string() + " --out " +
                      (dir / "run2").string());
  REQUIRE(rc2 == 1);

  // the five strategy names are all accepted
  for (const char* strat :
       {"conventional", "random", "prior_based", "sml", "sml_no_inverse"}) {
    const int rc3 = run("train --model " + (dir / "model.cfg").string() + " --vocab " +
                        (dir / "data/vocab.txt").string() + " --stage " + (dir / "s3.cfg").string() +
                        " --out " + (dir / ("run_" + std::string(strat))).string() +
                        " --seed 3 --strategy " + strat);
    REQUIRE(rc3 == 0);
  }
}

TEST_CASE("train is deterministic and resume reproduces the continuous run") {
  auto dir = fresh_dir("train_resume");
  write(dir / "in.tsv", copy_tsv(12));
  REQUIRE(run("prepare --input " + (dir / "in.tsv").string() + " --out-dir " +
              (dir / "data").string() + " --window 4") == 0);
  write(dir / "model.cfg", kTinyModelCfg);
  write(dir / "s2.cfg", stage_cfg("indomain_pretrain", dir / "data/corpus.jsonl", 10));

  auto train_once = [&](const std::string& out_dir, const std::string& extra) {
    return run("train --model " + (dir / "model.cfg").string() + " --vocab " +
               (dir / "data/vocab.txt").string() + " --stage " + (dir / "s2.cfg").string() +
               " --out " + (dir / out_dir).string() + " --seed 11 " + extra);
  };
  REQUIRE(train_once("a", "") == 0);
  REQUIRE(train_once("b", "") == 0);
  const auto ckpt_a = sml::io::read_file(dir / "a/stage1_indomain_pretrain.ckpt");
  REQUIRE(ckpt_a == sml::io::read_file(dir / "b/stage1_indomain_pretrain.ckpt"));

  // run with periodic snapshots, resume from the mid-stage snapshot
  REQUIRE(train_once("c", "--save-every 4") == 0);
  REQUIRE(fs::exists(dir / "c/last.ckpt"));
  // last.ckpt holds step 8 of 10; resuming finishes the stage identically
  REQUIRE(run("train --model " + (dir / "model.cfg").string() + " --vocab " +
              (dir / "data/vocab.txt").string() + " --stage " + (dir / "s2.cfg").string() +
              " --out " + (dir / "d").string() + " --seed 11 --resume " +
              (dir / "c/last.ckpt").string()) == 0);
  REQUIRE(ckpt_a == sml::io::read_file(dir / "d/stage1_indomain_pretrain.ckpt"));
}

TEST_CASE("translate, eval and the metrics json") {
  auto dir = fresh_dir("translate");
  write(dir / "in.tsv", copy_tsv(20));
  REQUIRE(run("prepare --input " + (dir / "in.tsv").string() + " --out-dir " +
              (dir / "data").string() + " --window 4") == 0);
  write(dir / "model.cfg", kTinyModelCfg);
  write(dir / "s1.cfg", stage_cfg("general_pretrain", dir / "data/corpus.jsonl", 5));
  REQUIRE(run("train --model " + (dir / "model.cfg").string() + " --vocab " +
              (dir / "data/vocab.txt").string() + " --stage " + (dir / "s1.cfg").string() +
              " --out " + (dir / "run").string() + " --seed 5") == 0);

  const std::string ckpt = (dir / "run/stage1_general_pretrain.ckpt").string();
  REQUIRE(run("translate --checkpoint " + ckpt + " --corpus " +
              (dir / "data/corpus.jsonl").string() + " --out " + (dir / "hyps.txt").string() +
              " --beam 2 --max-len 8") == 0);
  auto hyps = sml::io::read_lines(dir / "hyps.txt");
  auto convs = sml::corpus::conversations_from_jsonl(sml::io::read_file(dir / "data/corpus.jsonl"));
  REQUIRE(hyps.size() == convs.size());
  REQUIRE(fs::exists(dir / "hyps.txt.manifest.json"));

  REQUIRE(run("translate --checkpoint /missing.ckpt --corpus " +
              (dir / "data/corpus.jsonl").string() + " --out " + (dir / "x.txt").string()) == 1);

  // eval: identical files give BLEU 100
  write(dir / "refs.txt", "alpha beta gamma\ndelta epsilon\n");
  std::string out;
  REQUIRE(run("eval --hyps " + (dir / "refs.txt").string() + " --refs " +
                  (dir / "refs.txt").string() + " --mode word --out " +
                  (dir / "metrics.json").string(),
              &out) == 0);
  auto metrics = json::parse(sml::io::read_file(dir / "metrics.json"));
  REQUIRE(metrics["bleu"].get<double>() == 100.0);
  REQUIRE(metrics["mode"] == "word");
  REQUIRE(metrics["n_examples"] == 2);
  REQUIRE(metrics["coherence_at"].is_null());
  REQUIRE(fs::exists(dir / "metrics.json.manifest.json"));

  // eval with coherence against the trained model's word vectors
  std::string refs;
  for (const auto& c : convs) refs += c.target_side.back().raw_text + "\n";
  write(dir / "tgt_refs.txt", refs);
  REQUIRE(run("eval --hyps " + (dir / "hyps.txt").string() + " --refs " +
                  (dir / "tgt_refs.txt").string() + " --corpus " +
                  (dir / "data/corpus.jsonl").string() + " --vectors-from " + ckpt + " --out " +
                  (dir / "metrics2.json").string(),
              &out) == 0);
  auto m2 = json::parse(sml::io::read_file(dir / "metrics2.json"));
  REQUIRE(m2["coherence_at"].contains("1"));
  REQUIRE(m2["coherence_at"].contains("3"));
}

TEST_CASE("gradcheck command exits zero on the default config") {
  std::string out;
  const int rc = run("gradcheck --seed 3", &out);
  INFO(out);
  REQUIRE(rc == 0);
  REQUIRE(out.find("gradcheck PASS") != std::string::npos);
  for (const char* t : {"nct", "mrg", "xrg", "nud", "xnud"})
    REQUIRE(out.find(t) != std::string::npos);
}

TEST_CASE("sched-demo writes steps x strategies csv rows") {
  auto dir = fresh_dir("sched_demo");
  std::string out;
  REQUIRE(run("sched-demo --dim 8 --steps 40 --out " + (dir / "demo.csv").string() + " --seed 2",
              &out) == 0);
  auto lines = sml::io::read_lines(dir / "demo.csv");
  REQUIRE(lines.size() == 1 + 40 * 5);  // header + rows for 5 strategies
  REQUIRE(lines[0] == "step,strategy,distance_to_optimum,cosine");
  REQUIRE(fs::exists(dir / "demo.csv.manifest.json"));

  // determinism under a fixed seed
  REQUIRE(run("sched-demo --dim 8 --steps 40 --out " + (dir / "demo2.csv").string() +
              " --seed 2") == 0);
  REQUIRE(sml::io::read_file(dir / "demo.csv") == sml::io::read_file(dir / "demo2.csv"));
}

TEST_CASE("SML_SEED environment variable seeds commands") {
  auto dir = fresh_dir("env_seed");
  const std::string base = "sched-demo --dim 6 --steps 10 --out ";
  REQUIRE(std::system(("SML_SEED=99 " + kCli + " " + base + (dir / "a.csv").string() +
                       " > /dev/null 2>&1")
                          .c_str()) == 0);
  REQUIRE(std::system(("SML_SEED=99 " + kCli + " " + base + (dir / "b.csv").string() +
                       " > /dev/null 2>&1")
                          .c_str()) == 0);
  REQUIRE(sml::io::read_file(dir / "a.csv") == sml::io::read_file(dir / "b.csv"));
  auto manifest = json::parse(sml::io::read_file(dir / "a.csv.manifest.json"));
  REQUIRE(manifest["seed"] == 99);
}
