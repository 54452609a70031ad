#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "immunity/data_io.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int status = -1;
  std::string out;
};

Run cli(const std::string& args) {
  const char* exe = std::getenv("IMMUNITY_CLI");
  const std::string cmd = std::string(exe ? exe : "immunity") + " " + args + " 2>/dev/null";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / ("immunity_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }
  static std::string path(const std::string& name) { return (dir_ / name).string(); }

  // A tiny trained model shared by the attack and explain tests.
  static void ensure_model() {
    if (fs::exists(dir_ / "model.immu")) return;
    ASSERT_EQ(cli("gen-data --out " + path("train.imds") + " --n 64 --classes 4 --size 12 --seed 1").status, 0);
    std::ofstream(path("run.cfg")) << "alpha = 1\nbeta = 1\ngamma = 0.1\nn_experts = 5\nepochs = 1\n"
                                      "batch_size = 16\nwidths = 4,4,4\nseed = 3\n";
    auto r = cli("train --config " + path("run.cfg") + " --data " + path("train.imds") + " --out-model " +
                 path("model.immu") + " --log " + path("train.log"));
    ASSERT_EQ(r.status, 0) << r.out;
  }

  static fs::path dir_;
};

fs::path Cli::dir_;

}  // namespace

TEST_F(Cli, GenDataCountAndDeterminism) {
  ASSERT_EQ(cli("gen-data --out " + path("a.imds") + " --n 200 --classes 4 --size 16 --seed 7").status, 0);
  ASSERT_EQ(cli("gen-data --out " + path("b.imds") + " --n 200 --classes 4 --size 16 --seed 7").status, 0);
  EXPECT_EQ(immunity::load_dataset(path("a.imds")).size(), 200u);
  EXPECT_EQ(slurp(path("a.imds")), slurp(path("b.imds")));
  // Refuses to overwrite without --force.
  EXPECT_EQ(cli("gen-data --out " + path("a.imds") + " --n 10 --seed 1").status, 1);
  EXPECT_EQ(cli("gen-data --out " + path("a.imds") + " --n 10 --seed 1 --force").status, 0);
  EXPECT_EQ(immunity::load_dataset(path("a.imds")).size(), 10u);
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(cli("gen-data --out " + path("c.imds") + " --classes 99").status, 1);
  EXPECT_FALSE(fs::exists(path("c.imds")));
  EXPECT_EQ(cli("verify-mi --trials 0").status, 1);
  EXPECT_EQ(cli("no-such-command").status, 1);
  EXPECT_EQ(cli("--help").status, 0);
}

TEST_F(Cli, VerifyMiPasses) {
  auto r = cli("verify-mi");
  EXPECT_EQ(r.status, 0) << r.out;
  std::size_t passes = 0;
  for (std::size_t pos = 0; (pos = r.out.find("PASS", pos)) != std::string::npos; ++pos) ++passes;
  EXPECT_EQ(passes, 4u) << r.out;
  auto coarse = cli("verify-mi --resolution 0.5 --trials 20");
  EXPECT_EQ(coarse.status, 0) << coarse.out;
}

TEST_F(Cli, TrainRejectsBadConfigAtOnce) {
  ensure_model();
  std::ofstream(path("bad.cfg")) << "alpha = 1\nbetta = 1\nlearning_rate = x\n";
  auto r = cli("train --config " + path("bad.cfg") + " --data " + path("train.imds") + " --out-model " +
               path("bad.immu") + " 2>&1");
  EXPECT_EQ(r.status, 1);
  EXPECT_FALSE(fs::exists(path("bad.immu")));
}

TEST_F(Cli, TrainLogsAndIsDeterministic) {
  ensure_model();
  auto r = cli("train --config " + path("run.cfg") + " --data " + path("train.imds") + " --out-model " +
               path("model2.immu"));
  ASSERT_EQ(r.status, 0);
  EXPECT_EQ(slurp(path("model.immu")), slurp(path("model2.immu")));
  EXPECT_NE(r.out.find("\"gamma\":0.1"), std::string::npos) << r.out;

  std::ifstream log(path("train.log"));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) {
    auto j = nlohmann::json::parse(line);
    for (const char* key : {"step", "ce", "mi", "ps", "total"}) EXPECT_TRUE(j.contains(key)) << line;
    ++lines;
  }
  EXPECT_EQ(lines, 4u);
  // No temporary files are left next to the model.
  for (const auto& e : fs::directory_iterator(dir_)) EXPECT_EQ(e.path().string().find(".tmp"), std::string::npos);
}

TEST_F(Cli, UnweightedRegularizersAreStillLogged) {
  ensure_model();
  auto r = cli("train --config " + path("run.cfg") + " --set beta=0 --set gamma=0 --data " + path("train.imds") +
               " --out-model " + path("plain.immu") + " --log " + path("plain.log"));
  ASSERT_EQ(r.status, 0);
  std::ifstream log(path("plain.log"));
  std::string line;
  ASSERT_TRUE(std::getline(log, line));
  auto j = nlohmann::json::parse(line);
  EXPECT_GT(j["mi"].get<double>(), 0.0);
  EXPECT_GE(j["ps"].get<double>(), 0.0);
}

TEST_F(Cli, AttackReport) {
  ensure_model();
  auto r = cli("attack --model " + path("model.immu") + " --data " + path("train.imds") +
               " --attack pgd --eps 8/255 --steps 2 --seeds 2 --seed 5 --out-report " + path("report.json"));
  ASSERT_EQ(r.status, 0) << r.out;
  auto j = nlohmann::json::parse(slurp(path("report.json")));
  EXPECT_EQ(j["attack"]["epsilon"].get<double>(), 0.03137254901960784);
  EXPECT_EQ(j["attack"]["iterations"].get<int>(), 2);
  EXPECT_EQ(j["seed"].get<int>(), 5);
  EXPECT_EQ(j["seeds"].size(), 2u);
  EXPECT_TRUE(j["config"].is_object());
  EXPECT_TRUE(j["attack_accuracy"].contains("pgd"));
  std::size_t total = 0;
  for (const auto& c : j["per_class"]) total += c["total"].get<std::size_t>();
  EXPECT_EQ(total, 64u);
  for (const char* key : {"clean_accuracy", "iscore", "cscore"}) EXPECT_TRUE(j.contains(key));

  auto again = cli("attack --model " + path("model.immu") + " --data " + path("train.imds") +
                   " --attack pgd --eps 8/255 --steps 2 --seeds 2 --seed 5 --out-report " + path("report2.json"));
  ASSERT_EQ(again.status, 0);
  EXPECT_EQ(slurp(path("report.json")), slurp(path("report2.json")));
}

TEST_F(Cli, AttackNoneAndUnknownAttack) {
  ensure_model();
  auto r = cli("attack --model " + path("model.immu") + " --data " + path("train.imds") + " --attack none");
  ASSERT_EQ(r.status, 0);
  auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["attack"], "none");
  EXPECT_TRUE(j["attack_accuracy"].empty());
  EXPECT_EQ(cli("attack --model " + path("model.immu") + " --data " + path("train.imds") + " --attack cw").status, 1);
  EXPECT_EQ(cli("attack --model " + path("missing.immu") + " --data " + path("train.imds")).status, 2);
}

TEST_F(Cli, ExplainWritesNormalizedHeatmaps) {
  ensure_model();
  const std::string out = path("explain");
  ASSERT_EQ(cli("explain --model " + path("model.immu") + " --data " + path("train.imds") + " --indices 3 --out-dir " +
                out)
                .status,
            0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(out)) {
    ++files;
    if (e.path().extension() != ".csv") continue;
    std::ifstream csv(e.path());
    std::string line, cell;
    double sum = 0.0;
    while (std::getline(csv, line)) {
      std::stringstream ss(line);
      while (std::getline(ss, cell, ',')) {
        const double v = std::stod(cell);
        EXPECT_GE(v, 0.0);
        sum += v;
      }
    }
    EXPECT_NEAR(sum, 1.0, 1e-9) << e.path();
  }
  EXPECT_EQ(files, 11u);
  EXPECT_TRUE(fs::exists(fs::path(out) / "sample3_expert0.pgm"));
  EXPECT_TRUE(fs::exists(fs::path(out) / "sample3_input.pgm"));

  const std::string out2 = path("explain2");
  ASSERT_EQ(cli("explain --model " + path("model.immu") + " --data " + path("train.imds") + " --indices 3 --out-dir " +
                out2)
                .status,
            0);
  for (const auto& e : fs::directory_iterator(out)) {
    EXPECT_EQ(slurp(e.path()), slurp(fs::path(out2) / e.path().filename()));
  }
  EXPECT_EQ(cli("explain --model " + path("model.immu") + " --data " + path("train.imds") + " --indices 64 --out-dir " +
                out)
                .status,
            1);
}
