#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "maxprune/cli.hpp"
#include "maxprune/persist.hpp"

namespace fs = std::filesystem;
using maxprune::dispatch;
using nlohmann::json;

namespace {

const fs::path kFixtures = MAXPRUNE_FIXTURES;
const std::string kData = (kFixtures / "mnist").string();
const std::string kModel = (kFixtures / "tiny_mfc.mxpn").string();

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "maxprune_cli_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

std::size_t lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

// Tiny architecture so that training commands finish in milliseconds.
std::vector<std::string> tiny(std::vector<std::string> args, const fs::path& out) {
  for (const char* a : {"--data", "", "--out", "", "--variant", "mfc", "--fc-size", "8", "--k", "2",
                        "--conv1", "2", "--conv2", "2", "--validation", "50", "--iterations", "5",
                        "--retrain-iterations", "3", "--batch-size", "16"})
    args.emplace_back(a);
  const auto at = [&](const char* flag) {
    return std::find(args.begin(), args.end(), flag) - args.begin() + 1;
  };
  args[at("--data")] = kData;
  args[at("--out")] = out.string();
  return args;
}

}  // namespace

TEST(Cli, UnknownFlagIsUsageError) {
  const Outcome r = run({"train", "--frobnicate"});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("maxprune: error: usage: ", 0), 0u) << r.err;
  EXPECT_EQ(lines(r.err), 1u);
}

TEST(Cli, MissingSubcommandIsUsageError) { EXPECT_EQ(run({}).code, 2); }

TEST(Cli, InvalidConfigIsUsageErrorBeforeCompute) {
  const fs::path out = scratch("invalid");
  const Outcome r = run({"train", "--data", kData, "--out", out.string(), "--k", "1"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("k must lie"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(out / "run.json"));
  EXPECT_EQ(run({"train", "--data", kData, "--out", out.string(), "--fc-size", "10"}).code, 2);
  EXPECT_EQ(run({"sweep", "--checkpoint", kModel, "--fractions", "0.5,0.2"}).code, 2);
  EXPECT_EQ(run({"prune-weights", "--checkpoint", kModel, "--fraction", "1.0"}).code, 2);
}

TEST(Cli, MissingInputsAreUsageErrors) {
  const Outcome r = run({"eval", "--checkpoint", "/nonexistent/model.mxpn", "--data", kData});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("/nonexistent/model.mxpn"), std::string::npos);
  EXPECT_EQ(run({"eval", "--checkpoint", kModel, "--data", "/nonexistent"}).code, 2);
  EXPECT_EQ(run({"verify", "--embeddings", "/nonexistent.txt"}).code, 2);
}

TEST(Cli, RuntimeFailureExitsOne) {
  const fs::path out = scratch("runtime");
  std::ofstream(out / "bad.mxpn") << "not a checkpoint";
  const Outcome r = run({"eval", "--checkpoint", (out / "bad.mxpn").string(), "--data", kData,
                     "--out", out.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("maxprune: error: format: ", 0), 0u) << r.err;
}

TEST(Cli, BinaryExitCodes) {
  const fs::path out = scratch("binary");
  const std::string cli = MAXPRUNE_CLI;
  const int usage = std::system((cli + " frobnicate 2> " + (out / "err.txt").string()).c_str());
  EXPECT_EQ(WEXITSTATUS(usage), 2);
  EXPECT_EQ(slurp(out / "err.txt").rfind("maxprune: error: usage", 0), 0u);
  const int ok = std::system((cli + " --help > " + (out / "help.txt").string()).c_str());
  EXPECT_EQ(WEXITSTATUS(ok), 0);
  EXPECT_NE(slurp(out / "help.txt").find("prune-neurons"), std::string::npos);
}

TEST(Cli, EvalMatchesFrozenFixture) {
  const fs::path out = scratch("eval");
  const json expected = read_json(kFixtures / "expected.json");
  const Outcome r = run({"eval", "--checkpoint", kModel, "--data", kData, "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const json got = read_json(out / "eval.json");
  EXPECT_EQ(got["accuracy"].get<double>(), expected["accuracy"].get<double>());
  EXPECT_EQ(got["samples"], expected["samples"]);
  EXPECT_EQ(got["correct"].get<std::string>().size(), 100u);
  EXPECT_EQ(r.out.rfind("accuracy ", 0), 0u);
}

TEST(Cli, RunJsonEchoesResolvedConfig) {
  const fs::path out = scratch("runjson");
  ASSERT_EQ(run({"eval", "--checkpoint", kModel, "--data", kData, "--out", out.string()}).code, 0);
  const json j = read_json(out / "run.json");
  EXPECT_EQ(j["command"], "eval");
  EXPECT_EQ(j["inputs"]["checkpoint"], kModel);
  EXPECT_EQ(j["config"]["k"], 4);  // defaults are echoed too
  EXPECT_DOUBLE_EQ(j["config"]["base_lr"].get<double>(), 0.01);
  EXPECT_EQ(j["config"]["batch_size"], 64);
}

TEST(Cli, ThreadsDoNotChangeResults) {
  const fs::path a = scratch("threads1"), b = scratch("threads3");
  ASSERT_EQ(run({"eval", "--checkpoint", kModel, "--data", kData, "--out", a.string()}).code, 0);
  ASSERT_EQ(run({"eval", "--checkpoint", kModel, "--data", kData, "--out", b.string(), "--threads", "3"}).code, 0);
  EXPECT_EQ(slurp(a / "eval.json"), slurp(b / "eval.json"));
  ASSERT_EQ(run({"count", "--checkpoint", kModel, "--data", kData, "--validation", "50", "--out", a.string()}).code, 0);
  ASSERT_EQ(run({"count", "--checkpoint", kModel, "--data", kData, "--validation", "50", "--out", b.string(),
                 "--threads", "3"}).code, 0);
  EXPECT_EQ(slurp(a / "counts.json"), slurp(b / "counts.json"));
  EXPECT_EQ(read_json(a / "counts.json")["positions"], 250);
}

TEST(Cli, TrainIsDeterministic) {
  const fs::path a = scratch("train_a"), b = scratch("train_b");
  ASSERT_EQ(run(tiny({"train"}, a)).code, 0);
  ASSERT_EQ(run(tiny({"train"}, b)).code, 0);
  for (const char* f : {"model.mxpn", "report.csv", "history.csv"}) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  EXPECT_EQ(lines(slurp(a / "history.csv")), 6u);
  EXPECT_EQ(lines(slurp(a / "report.csv")), 2u);
}

TEST(Cli, ConfigFileWithFlagOverride) {
  const fs::path out = scratch("config");
  std::ofstream(out / "c.json") << R"({"fc_size": 16, "iterations": 3, "seed": 9})";
  auto args = tiny({"train", "--config", (out / "c.json").string()}, out);
  // tiny() passes --fc-size 8 and --iterations 5: flags beat the file.
  ASSERT_EQ(run(args).code, 0);
  const json cfg = read_json(out / "run.json")["config"];
  EXPECT_EQ(cfg["fc_size"], 8);
  EXPECT_EQ(cfg["iterations"], 5);
  EXPECT_EQ(cfg["seed"], 9);
  std::ofstream(out / "bad.json") << R"({"fc_sise": 16})";
  EXPECT_EQ(run({"train", "--config", (out / "bad.json").string(), "--data", kData}).code, 2);
}

TEST(Cli, PruneNeuronsReducesKWithoutTouchingInput) {
  const fs::path out = scratch("prune_neurons");
  const std::string before = slurp(kModel);
  const Outcome r = run({"prune-neurons", "--checkpoint", kModel, "--data", kData, "--validation", "50",
                     "--steps", "1", "--retrain-iterations", "3", "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(kModel), before);
  const auto records = maxprune::read_report(out / "report.csv");
  ASSERT_EQ(records.size(), 1u);
  EXPECT_EQ(records[0].k, 1u);
  EXPECT_EQ(maxprune::load_checkpoint(out / "model.mxpn").maxout->k_current, 1u);
  EXPECT_EQ(run({"prune-neurons", "--checkpoint", kModel, "--data", kData, "--validation", "50",
                 "--steps", "2", "--out", out.string()}).code, 1);  // k = 2 allows one step
}

TEST(Cli, PruneWeightsWritesSparseModel) {
  const fs::path out = scratch("prune_weights");
  const Outcome r = run({"prune-weights", "--checkpoint", kModel, "--data", kData, "--fraction", "0.8",
                     "--no-retrain", "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_LT(fs::file_size(out / "model.mxpn"), fs::file_size(kModel) / 2);
  const auto rec = maxprune::read_report(out / "report.csv").at(0);
  EXPECT_NEAR(static_cast<double>(rec.masked_weights) / static_cast<double>(rec.remaining_weights), 0.8, 1e-3);
}

TEST(Cli, SweepWritesOneRowPerFraction) {
  const fs::path out = scratch("sweep");
  const Outcome r = run({"sweep", "--checkpoint", kModel, "--data", kData, "--fractions", "0,0.5,0.9",
                     "--no-retrain", "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = maxprune::read_report(out / "sweep.csv");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_DOUBLE_EQ(rows[0].accuracy, read_json(kFixtures / "expected.json")["accuracy"].get<double>());
}

TEST(Cli, VerifyComputesEer) {
  const fs::path out = scratch("verify");
  std::ofstream(out / "pairs.txt") << "d 2\nm 1 0 1 0\nm 1 1 1 0\nn 1 0 0 1\nn 0 1 1 0\n";
  const Outcome r = run({"verify", "--embeddings", (out / "pairs.txt").string(), "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = read_json(out / "verify.json");
  EXPECT_DOUBLE_EQ(j["eer"].get<double>(), 0.0);  // matched {0, 1/3} vs non-matched {1, 1}
  EXPECT_TRUE(fs::exists(out / "rates.csv"));
  std::ofstream(out / "broken.txt") << "d 2\nm 1 0 1\n";
  EXPECT_EQ(run({"verify", "--embeddings", (out / "broken.txt").string(), "--out", out.string()}).code, 1);
}

TEST(Cli, CompareIdenticalRunsGivesPValueOne) {
  const fs::path out = scratch("compare");
  ASSERT_EQ(run({"eval", "--checkpoint", kModel, "--data", kData, "--out", out.string()}).code, 0);
  const std::string e = (out / "eval.json").string();
  const Outcome r = run({"compare", "--a", e, "--b", e, "--permutations", "200", "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_DOUBLE_EQ(read_json(out / "compare.json")["p_value"].get<double>(), 1.0);
  EXPECT_EQ(r.out, "p_value 1\n");
}

TEST(Cli, ReportMergesCsvs) {
  const fs::path a = scratch("report_a"), out = scratch("report");
  ASSERT_EQ(run({"sweep", "--checkpoint", kModel, "--data", kData, "--fractions", "0,0.5",
                 "--no-retrain", "--out", a.string()}).code, 0);
  const std::string csv = (a / "sweep.csv").string();
  const Outcome r = run({"report", csv, csv, "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(maxprune::read_report(out / "report.csv").size(), 4u);
  EXPECT_EQ(lines(r.out), 5u);
}
