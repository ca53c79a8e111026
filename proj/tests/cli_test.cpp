#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "enprompt/checkpoint.hpp"
#include "enprompt/cli.hpp"
#include "enprompt/encoder.hpp"
#include "gtest/gtest.h"

namespace enprompt::cli {
namespace {

namespace fs = std::filesystem;

struct Outcome {
  int status;
  std::string out;
  std::string err;
};

Outcome run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int status = run_cli(args, out, err);
  return {status, out.str(), err.str()};
}

// Fresh directory per test; the output root env var is cleared.
class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / ("enprompt_cli_" + std::string(info->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    unsetenv(kOutputRootEnv);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  std::string write(const std::string& name, const std::string& text) const {
    write_file_atomic(path(name), text);
    return path(name);
  }

  // Untrained encoder saved where the commands look for it by default.
  void place_random_encoder(const std::string& out) const {
    const auto u = world::make_universe(7);
    auto enc = encoders::init_encoder(encoders::EncoderConfig::for_world(u.dims), u, 1);
    enc.weights.freeze_all();
    enc.frozen = true;
    fs::create_directories(out);
    encoders::save_encoder((fs::path(out) / "encoder.json").string(), enc);
  }

  fs::path dir_;
};

TEST(Config, ExitCodesPerCategory) {
  EXPECT_EQ(exit_code(ErrorCategory::usage), 2);
  EXPECT_EQ(exit_code(ErrorCategory::config), 3);
  EXPECT_EQ(exit_code(ErrorCategory::resource), 4);
  EXPECT_EQ(exit_code(ErrorCategory::numeric), 5);
}

TEST(Config, FileOverridesDefaultsAndFlagsOverrideFile) {
  const std::string ini = "[world]\nrender_gap = 0.5\nnum_classes = 6\n";
  const auto c = RunConfig::resolve(ini, "t.ini", {{"world.render_gap", "0.25"}}, std::nullopt);
  EXPECT_EQ(c.real("world.render_gap"), 0.25);
  EXPECT_EQ(c.count("world.num_classes"), 6u);
  EXPECT_EQ(c.count("train.shots"), 16u);
}

TEST(Config, OutputRootPrecedence) {
  const std::string ini = "[run]\noutput = from_file\n";
  EXPECT_EQ(RunConfig::resolve(ini, "t", {}, std::nullopt).text("run.output"), "from_file");
  EXPECT_EQ(RunConfig::resolve(ini, "t", {}, std::string("from_env")).text("run.output"),
            "from_env");
  EXPECT_EQ(RunConfig::resolve(ini, "t", {{"run.output", "from_flag"}}, std::string("from_env"))
                .text("run.output"),
            "from_flag");
}

TEST(Config, UnknownKeysAreRejected) {
  try {
    RunConfig::resolve("[world]\nrender_gapp = 1\n", "t.ini", {}, std::nullopt);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("world.render_gapp"), std::string::npos);
  }
  EXPECT_THROW(RunConfig::resolve("", "t", {{"bogus.key", "1"}}, std::nullopt), ConfigError);
  EXPECT_THROW(RunConfig::resolve("loose = 1\n", "t", {}, std::nullopt), ConfigError);
}

TEST(Config, ParseErrorsNameLineOrKey) {
  try {
    RunConfig::resolve("[run]\njobs = 2\n[world\n", "t.ini", {}, std::nullopt);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("t.ini:3"), std::string::npos) << e.what();
  }
  try {
    RunConfig::resolve("[train]\nepochs = ten\n", "t.ini", {}, std::nullopt);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.epochs"), std::string::npos);
  }
  EXPECT_THROW(RunConfig::resolve("[run]\njobs = 0\n", "t", {}, std::nullopt), ConfigError);
  EXPECT_THROW(RunConfig::resolve("[world]\nrender_gap = nan\n", "t", {}, std::nullopt),
               ConfigError);
}

TEST(Config, CanonicalFormIsIdempotentAndNormalized) {
  const auto a = RunConfig::resolve("[world]\nrender_gap = 0.90\n[run]\nseeds = 0, 1 ,2\n", "t",
                                    {}, std::nullopt);
  const auto b = RunConfig::resolve("", "t", a.as_flags(), std::nullopt);
  EXPECT_EQ(a.canonical(), b.canonical());
  EXPECT_EQ(RunConfig::resolve("", "t", b.as_flags(), std::nullopt).canonical().dump(),
            b.canonical().dump());
  const auto c = RunConfig::resolve("[world]\nrender_gap = 9e-1\n", "t", {{"run.seeds", "0,1,2"}},
                                    std::nullopt);
  EXPECT_EQ(a.digest(), c.digest());
  EXPECT_EQ(a.integers("run.seeds"), (std::vector<std::uint64_t>{0, 1, 2}));
}

TEST(Config, DigestIgnoresOutputAndJobs) {
  const auto a = RunConfig::defaults();
  const auto b = RunConfig::resolve("", "t", {{"run.output", "x"}, {"run.jobs", "4"}},
                                    std::nullopt);
  const auto c = RunConfig::resolve("", "t", {{"train.shots", "8"}}, std::nullopt);
  EXPECT_EQ(a.digest(), b.digest());
  EXPECT_NE(a.digest(), c.digest());
  EXPECT_EQ(a.digest().size(), 16u);
}

TEST_F(CliTest, HelpListsEveryKey) {
  for (const char* cmd : {"pretrain", "train", "eval", "ablate", "report"}) {
    const auto r = run({cmd, "--help"});
    EXPECT_EQ(r.status, 0);
    for (const auto& k : config_keys()) {
      EXPECT_NE(r.out.find("--" + k.name), std::string::npos) << cmd << " " << k.name;
    }
  }
}

TEST_F(CliTest, UsageErrors) {
  EXPECT_EQ(run({}).status, 2);
  EXPECT_EQ(run({"train", "--no-such-flag"}).status, 2);
  place_random_encoder(path("out"));
  const auto r = run({"train", "--run.output", path("out"), "--run.protocol", "zero_shot"});
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.err.find("zero_shot"), std::string::npos);
}

TEST_F(CliTest, ConfigAndResourceErrors) {
  const auto bad = write("bad.ini", "[method]\ndepthh = 3\n");
  const auto r = run({"eval", "--config", bad});
  EXPECT_EQ(r.status, 3);
  EXPECT_NE(r.err.find("method.depthh"), std::string::npos);
  EXPECT_EQ(run({"eval", "--config", path("missing.ini")}).status, 4);
  EXPECT_EQ(run({"train", "--run.output", path("out")}).status, 4);
}

TEST_F(CliTest, ReportOnEmptyDirectoryFails) {
  const auto r = run({"report", dir_.string()});
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find("no reports found"), std::string::npos);
}

TEST_F(CliTest, EvalOfFrozenOnlyNeedsNoTrainedState) {
  place_random_encoder(path("out"));
  const auto r = run({"eval", "--run.output", path("out"), "--run.variants", "frozen_only",
                      "--train.test_per_class", "5", "--seed", "3"});
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_NE(r.out.find("HM"), std::string::npos);
  EXPECT_TRUE(fs::exists(path("out/eval.json")));
  const auto missing = run({"eval", "--run.output", path("out"), "--run.variants", "coop"});
  EXPECT_EQ(missing.status, 4);
}

TEST_F(CliTest, OutputRootFromEnvironment) {
  place_random_encoder(path("env_out"));
  setenv(kOutputRootEnv, path("env_out").c_str(), 1);
  const auto r = run({"eval", "--run.variants", "frozen_only", "--train.test_per_class", "2"});
  unsetenv(kOutputRootEnv);
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_TRUE(fs::exists(path("env_out/eval.json")));
}

TEST_F(CliTest, PretrainIsReproducibleAndWritesManifest) {
  const auto ini = write("p.ini", "[pretrain]\nsteps = 5\nbatch = 8\n");
  ASSERT_EQ(run({"pretrain", "--config", ini, "--run.output", path("a")}).status, 0);
  ASSERT_EQ(run({"pretrain", "--config", ini, "--run.output", path("b")}).status, 0);
  ASSERT_EQ(run({"pretrain", "--config", ini, "--run.output", path("c"), "--seed", "9"}).status, 0);
  EXPECT_EQ(read_file(path("a/encoder.json")), read_file(path("b/encoder.json")));
  EXPECT_NE(read_file(path("a/encoder.json")), read_file(path("c/encoder.json")));
  const auto m = nlohmann::json::parse(read_file(path("a/pretrain_manifest.json")));
  EXPECT_TRUE(m.at("final_loss").is_number());
  EXPECT_EQ(m.at("steps"), 5);
  EXPECT_EQ(m.at("config_digest"),
            nlohmann::json::parse(read_file(path("b/pretrain_manifest.json"))).at("config_digest"));
  for (const auto& e : fs::recursive_directory_iterator(dir_)) {
    EXPECT_NE(e.path().extension(), ".tmp") << e.path();
  }
}

TEST_F(CliTest, TrainArtifactsAreBitReproducibleAcrossJobs) {
  place_random_encoder(path("a"));
  place_random_encoder(path("b"));
  const std::vector<std::string> common = {"--run.variants", "coop,enprompt", "--run.seeds", "0,1",
                                           "--train.epochs", "1", "--train.test_per_class", "3",
                                           "--train.shots", "2"};
  auto args_a = std::vector<std::string>{"train", "--run.output", path("a"), "--jobs", "1"};
  auto args_b = std::vector<std::string>{"train", "--run.output", path("b"), "--jobs", "3"};
  args_a.insert(args_a.end(), common.begin(), common.end());
  args_b.insert(args_b.end(), common.begin(), common.end());
  ASSERT_EQ(run(args_a).status, 0);
  ASSERT_EQ(run(args_b).status, 0);
  for (const char* f : {"train_base_to_novel.json", "train_base_to_novel.csv",
                        "states/enprompt_seed1.json"}) {
    EXPECT_EQ(read_file(path(std::string("a/") + f)), read_file(path(std::string("b/") + f))) << f;
  }
  const auto m = nlohmann::json::parse(read_file(path("a/train_base_to_novel_manifest.json")));
  EXPECT_EQ(m.at("runs").size(), 4u);

  auto eval_args = std::vector<std::string>{"eval", "--run.output", path("a")};
  eval_args.insert(eval_args.end(), common.begin(), common.end());
  const auto e = run(eval_args);
  ASSERT_EQ(e.status, 0) << e.err;
  const auto train = nlohmann::json::parse(read_file(path("a/train_base_to_novel.json")));
  const auto eval = nlohmann::json::parse(read_file(path("a/eval.json")));
  EXPECT_EQ(train.at("reports")[1].at("metrics").at("hm"), eval.at("reports")[1].at("metrics").at("hm"));

  const auto rep = run({"report", path("a")});
  ASSERT_EQ(rep.status, 0);
  for (const char* col : {"Base", "Novel", "HM"}) EXPECT_NE(rep.out.find(col), std::string::npos);
}

}  // namespace
}  // namespace enprompt::cli
