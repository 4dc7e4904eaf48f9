#include <gtest/gtest.h>
#include <sys/wait.h>

#include <json.hpp>

#include <filesystem>
#include <fstream>

#include "subedit/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int status = -1;
  std::string err;
};

Result run_cli(const std::string& args, const fs::path& dir) {
  const fs::path err = dir / "stderr.txt";
  const std::string cmd = std::string(SUBEDIT_CLI) + " " + args + " > /dev/null 2> " + err.string();
  const int raw = std::system(cmd.c_str());
  Result r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.err = subedit::pipeline::read_file(err.string());
  return r;
}

json error_of(const Result& r) { return json::parse(r.err).at("error"); }

/// Small experiment: 60 facts, one batch of 4 edits per mode, two-point sweeps.
fs::path write_small_config(const fs::path& dir) {
  const json cfg = {{"corpus", {{"n_subjects", 120}, {"n_facts", 60}, {"n_objects", 10}, {"n_relations", 4}}},
                    {"train", {{"steps", 600}}},
                    {"batches", 1},
                    {"batch_size", 4},
                    {"tau_grid", {0.0, 0.4}},
                    {"lambda_grid", {0.3}},
                    {"out", (dir / "out").string()}};
  const fs::path p = dir / "small.json";
  std::ofstream(p) << cfg.dump(2);
  return p;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("subedit_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

}  // namespace

TEST_F(Cli, MissingInputsNameTheProducer) {
  const auto cfg = write_small_config(dir_);
  const auto r = run_cli("eval --config " + cfg.string(), dir_);
  EXPECT_EQ(r.status, 2);
  const json e = error_of(r);
  EXPECT_EQ(e.at("code"), "missing_prerequisite");
  EXPECT_EQ(e.at("command"), "eval");
  EXPECT_TRUE(e.contains("producer"));

  const auto t = run_cli("train --config " + cfg.string(), dir_);
  EXPECT_EQ(t.status, 2);
  EXPECT_EQ(error_of(t).at("producer"), "subedit gen-corpus");
}

TEST_F(Cli, RejectsBadValues) {
  const auto cfg = write_small_config(dir_);
  const auto m = run_cli("gen-corpus --config " + cfg.string() + " --mode rome", dir_);
  EXPECT_EQ(m.status, 2);
  EXPECT_EQ(error_of(m).at("code"), "invalid_input");
  const auto t = run_cli("gen-corpus --config " + cfg.string() + " --tau-energy 1.5", dir_);
  EXPECT_EQ(t.status, 2);
  EXPECT_EQ(error_of(t).at("code"), "invalid_input");

  std::ofstream(dir_ / "broken.json") << "{\"batches\": ";
  const auto p = run_cli("gen-corpus --config " + (dir_ / "broken.json").string(), dir_);
  EXPECT_EQ(p.status, 2);
  EXPECT_EQ(error_of(p).at("code"), "parse");
}

TEST_F(Cli, FullRunWritesConsistentArtifacts) {
  const auto cfg = write_small_config(dir_);
  const auto r = run_cli("all --config " + cfg.string() + " --seed 4", dir_);
  ASSERT_EQ(r.status, 0) << r.err;
  const fs::path root = dir_ / "out" / "seed-4";
  for (const char* p : {"config.json", "corpus/corpus.jsonl", "model/model.bin", "model/train.json",
                        "edits/suit/model.bin", "edits/memit/session.json", "reports/suit.json", "reports/alphaedit.csv",
                        "reports/summary.csv", "analysis/leakage.csv", "analysis/decomposition.csv",
                        "analysis/sweep_tau_energy.csv", "analysis/sweep_lambda_penalty.csv", "analysis/analysis.json"})
    EXPECT_TRUE(fs::exists(root / p)) << p;

  const json cfg_out = json::parse(subedit::pipeline::read_file((root / "config.json").string()));
  EXPECT_EQ(cfg_out.at("seed"), 4);
  EXPECT_EQ(cfg_out.at("corpus").at("seed"), 4);

  const json manifest = json::parse(subedit::pipeline::read_file((root / "manifest.json").string()));
  ASSERT_FALSE(manifest.at("artifacts").empty());
  for (const auto& a : manifest.at("artifacts")) {
    const std::string bytes = subedit::pipeline::read_file((root / a.at("path").get<std::string>()).string());
    EXPECT_EQ(a.at("bytes"), bytes.size());
    EXPECT_EQ(a.at("fnv1a64"), subedit::pipeline::hex64(subedit::pipeline::fnv1a(bytes)));
  }

  const json suit = json::parse(subedit::pipeline::read_file((root / "reports/suit.json").string()));
  EXPECT_EQ(suit.at("schema_version"), 1);
  EXPECT_EQ(suit.at("edits").size(), 4u);

  // The unedited checkpoint has not learned any new object.
  const auto e = run_cli("eval --config " + cfg.string() + " --seed 4 --checkpoint " + (root / "model/model.bin").string() +
                             " --label unedited",
                         dir_);
  ASSERT_EQ(e.status, 0) << e.err;
  const json base = json::parse(subedit::pipeline::read_file((root / "reports/unedited.json").string()));
  EXPECT_EQ(base.at("probability_based").at("efficacy"), 0.0);
  EXPECT_EQ(base.at("generation_based").at("specificity"), 100.0);
}
