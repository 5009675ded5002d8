#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ssmil/checkpoint.hpp"
#include "ssmil/data.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;  // stdout and stderr
};

Result run(const std::string& args) {
  const std::string cmd = std::string(SSMIL_CLI) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ssmil_cli_" + name);
  fs::remove_all(p);
  return p;
}

const std::string kTiny =
    " --dataset.n_classes 3 --dataset.n_bags_per_class 6 --dataset.min_instances 8 --dataset.max_instances 12"
    " --dataset.feature_dim 16 --dataset.planted_fraction 0.25 --encoder.widths 16,8 --ssl.epochs 2"
    " --ssl.batch_size 32 --simclr.head 8,4 --mil.epochs 3 --mil.patience 3 --mil.reduced_dim 4"
    " --mil.attention_hidden 6 --mil.accumulation 2 --cv.k 2 --cv.runs 1";

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

}  // namespace

TEST(Cli, UsageErrorsExitWithOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("generate --no-such-flag 3").code, 1);
  EXPECT_EQ(run("gradcheck --scope bogus").code, 1);
  EXPECT_EQ(run("generate --dataset.planted_fraction 2 --output.dir " + scratch("bad").string()).code, 1);
  EXPECT_EQ(run("--help").code, 0);
}

TEST(Cli, MissingDatasetIsAnIoError) {
  const fs::path out = scratch("missing");
  EXPECT_EQ(run("train-mil --ssl.method none-random --dataset.path " + (out / "nowhere").string() +
                " --output.dir " + out.string())
                .code,
            3);
}

TEST(Cli, GradcheckPassesAndNamesCorruptedComponent) {
  const Result ok = run("gradcheck --shapes 3");
  EXPECT_EQ(ok.code, 0) << ok.output;
  for (const char* c : {"nt_xent", "swav", "dino", "mil"}) EXPECT_NE(ok.output.find(c), std::string::npos) << c;

  const Result bad = run("gradcheck --shapes 3 --scope swav --scope dino --corrupt swav");
  EXPECT_EQ(bad.code, 2) << bad.output;
  std::istringstream lines(bad.output);
  bool named = false;
  for (std::string line; std::getline(lines, line);)
    if (line.find("swav") != std::string::npos && line.find("FAIL") != std::string::npos) named = true;
  EXPECT_TRUE(named) << bad.output;
}

TEST(Cli, GenerateIsDeterministic) {
  const fs::path a = scratch("gen_a"), b = scratch("gen_b"), c = scratch("gen_c");
  ASSERT_EQ(run("generate" + kTiny + " --output.dir " + a.string()).code, 0);
  ASSERT_EQ(run("generate" + kTiny + " --output.dir " + b.string()).code, 0);
  ASSERT_EQ(run("generate" + kTiny + " --dataset.seed 2 --output.dir " + c.string()).code, 0);
  const auto blob = [](const fs::path& p) { return ssmil::file_hash(p / "dataset" / "instances.bin"); };
  EXPECT_EQ(blob(a), blob(b));
  EXPECT_NE(blob(a), blob(c));
  EXPECT_TRUE(fs::exists(a / "config.txt"));
  EXPECT_TRUE(fs::exists(a / "dataset" / "planted_truth"));

  const fs::path d = scratch("gen_default");
  ASSERT_EQ(run("generate --output.dir " + d.string()).code, 0);
  EXPECT_EQ(ssmil::read_dataset(d / "dataset").manifest.n_bags(), 200u);
  for (const auto& p : {a, b, c, d}) fs::remove_all(p);
}

TEST(Cli, EvalRefusesTrainingBagsAndExportsEmbeddings) {
  const fs::path out = scratch("eval");
  const std::string common = kTiny + " --output.dir " + out.string();
  ASSERT_EQ(run("pretrain" + common).code, 0);
  const Result trained = run("train-mil" + common);
  ASSERT_EQ(trained.code, 0) << trained.output;
  const fs::path run_dir = out / "simclr" / "mil" / "fold0_run0";
  ASSERT_TRUE(fs::exists(run_dir / "record.json"));

  EXPECT_EQ(run("eval" + common + " --run " + run_dir.string() + " --split train").code, 1);
  const Result forced =
      run("eval" + common + " --run " + run_dir.string() + " --split train --allow-training-bags");
  EXPECT_EQ(forced.code, 0) << forced.output;

  const Result test = run("eval" + common + " --run " + run_dir.string() + " --split test");
  ASSERT_EQ(test.code, 0) << test.output;
  const fs::path exports = run_dir / "eval_test";
  // header plus one row per evaluated instance
  EXPECT_EQ(line_count(exports / "embeddings.csv"), line_count(exports / "attention.csv"));
  EXPECT_EQ(line_count(exports / "predictions.csv"), line_count(run_dir / "predictions.csv"));

  const Result rep = run("report" + common);
  EXPECT_EQ(rep.code, 0) << rep.output;
  EXPECT_NE(rep.output.find("prediction_sets = 2"), std::string::npos) << rep.output;
  fs::remove_all(out);
}
