#include <gtest/gtest.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <sstream>
#include <thread>

#include "splitshield/cli.hpp"

using namespace splitshield;
namespace fs = std::filesystem;
using json = nlohmann::json;

extern char** environ;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "splitshield");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) { return data::detail::read_file(p); }

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("splitshield_cli_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    config_ = (dir_ / "cfg.json").string();
    data::detail::write_file(config_, R"({
      "seed": 11,
      "data": {"synthetic": {"n_examples": 400, "shape": [1, 8, 8], "target_classes": 3, "noise_std": 0.3,
               "hidden": {"h": {"classes": 2, "coupling": "correlated", "rho": 0.5}}}},
      "model": {"arch": "reference", "widths": [4, 6, 8, 16, 8], "split_index": 3},
      "train": {"epochs": 3, "lr": 0.01, "lr_drop_epochs": [], "batch_size": 32},
      "sweep": {"splits": [2, 5], "grid": [{"mode": "free"}, {"mode": "topm", "m_prime": 1}],
                "adversary_seeds": 2, "adversary": {"epochs": 2, "lr": 0.01}},
      "at": {"attribute": "h", "outer_epochs": 2, "split_index": 3, "inner_adversary_steps": 2}
    })");
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string out(const std::string& name) const { return (dir_ / name).string(); }

  std::string trained() {
    const auto r = run({"train", "--config", config_, "--out", out("train")});
    EXPECT_EQ(r.code, 0) << r.err;
    return out("train/model.ckpt");
  }

  fs::path dir_;
  std::string config_;
};

}  // namespace

TEST_F(CliTest, HelpAndVersionSucceed) {
  const auto h = run({"--help"});
  EXPECT_EQ(h.code, 0);
  EXPECT_NE(h.out.find("prune-sweep"), std::string::npos);
  EXPECT_EQ(h.out.find(cli::kVersion), std::string::npos);
  EXPECT_NE(run({"train", "--help"}).out.find("--data"), std::string::npos);
  const auto v = run({"--version"});
  EXPECT_EQ(v.code, 0);
  EXPECT_NE(v.out.find(cli::kVersion), std::string::npos);
}

TEST_F(CliTest, MissingOrUnknownSubcommandIsConfigError) {
  EXPECT_EQ(run({}).code, cli::kExitConfig);
  EXPECT_EQ(run({"frobnicate"}).code, cli::kExitConfig);
  EXPECT_EQ(run({"train", "--no-such-flag"}).code, cli::kExitConfig);
}

TEST_F(CliTest, UnknownConfigKeysAreRejected) {
  data::detail::write_file(out("bad.json"), R"({"train": {"epochs": 1, "learning_rate": 0.1}})");
  const auto r = run({"train", "--config", out("bad.json"), "--out", out("x")});
  EXPECT_EQ(r.code, cli::kExitConfig);
  EXPECT_NE(r.err.find("train.learning_rate"), std::string::npos);
  const auto j = run({"train", "--config", out("bad.json"), "--out", out("x"), "--json"});
  EXPECT_EQ(j.code, cli::kExitConfig);
  const auto doc = json::parse(j.out);
  EXPECT_FALSE(doc["ok"].get<bool>());
  EXPECT_EQ(doc["error"]["code"], "ConfigError");
  EXPECT_EQ(doc["error"]["exit"], 2);
}

TEST_F(CliTest, MissingFilesAreConfigErrors) {
  EXPECT_EQ(run({"train", "--config", out("none.json"), "--out", out("x")}).code, cli::kExitConfig);
  EXPECT_EQ(run({"evaluate", "--data", out("none.json"), "--checkpoint", out("n.ckpt"), "--out", out("x")}).code,
            cli::kExitConfig);
  EXPECT_EQ(run({"profile", "--config", config_, "--out", out("x")}).code, cli::kExitConfig);  // no checkpoint
}

TEST_F(CliTest, RuntimeFailuresExitWithThree) {
  data::detail::write_file(out("at.json"), R"({
    "data": {"synthetic": {"n_examples": 100, "shape": [6], "target_classes": 2}},
    "model": {"arch": "mlp", "hidden": [4]},
    "at": {"attribute": "absent", "outer_epochs": 1}})");
  const auto r = run({"at-train", "--config", out("at.json"), "--out", out("x"), "--json"});
  EXPECT_EQ(r.code, cli::kExitRuntime);
  EXPECT_EQ(json::parse(r.out)["error"]["code"], "MissingHiddenLabels");
}

TEST_F(CliTest, ObfuscateWithNoCoefficientsWritesZeros) {
  data::detail::write_file(out("z.csv"), "1,2,3\n-4,0.5,2\n");
  data::detail::write_file(out("w.csv"), "3,0,0\n0,1,0\n");
  const auto r = run({"obfuscate", "--input", out("z.csv"), "--weights", out("w.csv"), "--mode", "topm", "--m-prime", "0",
                      "--out", out("o")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(out("o/coefficients.csv")), "0,0\n0,0\n");
  EXPECT_EQ(slurp(out("o/obfuscated.csv")), "0,0,0\n0,0,0\n");
}

TEST_F(CliTest, ObfuscateBudgetReproducesHandExample) {
  data::detail::write_file(out("z.csv"), "1,2,4\n");
  data::detail::write_file(out("w.csv"), "3,0,0\n0,1,0\n");
  ASSERT_EQ(run({"obfuscate", "--input", out("z.csv"), "--weights", out("w.csv"), "--mode", "budget", "--epsilon", "1.5",
                 "--out", out("o")})
                .code,
            0);
  const auto rows = cli::detail::read_csv(out("o/obfuscated.csv"));
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_NEAR(rows[0][0], 1.0, 1e-12);
  EXPECT_NEAR(rows[0][1], 0.5, 1e-12);
  EXPECT_NEAR(rows[0][2], 0.0, 1e-12);
  const auto info = json::parse(slurp(out("o/obfuscate.json")));
  EXPECT_EQ(info["m_prime"][0], 2);
  EXPECT_EQ(run({"obfuscate", "--input", out("z.csv"), "--weights", out("w.csv"), "--mode", "budget", "--out", out("o")}).code,
            cli::kExitConfig);  // epsilon missing
}

TEST_F(CliTest, TrainRerunFromManifestIsByteIdentical) {
  trained();
  const auto m = json::parse(slurp(out("train/manifest.json")));
  EXPECT_EQ(m["command"], "train");
  EXPECT_EQ(m["seed"], 11);
  EXPECT_EQ(m["config_hash"].get<std::string>().substr(0, 8), "fnv1a64:");
  ASSERT_EQ(run({"train", "--config", out("train/manifest.json"), "--out", out("again")}).code, 0);
  for (const char* f : {"model.ckpt", "history.csv", "metrics.json", "manifest.json"})
    EXPECT_EQ(slurp(out(std::string("train/") + f)), slurp(out(std::string("again/") + f))) << f;
  ASSERT_EQ(run({"train", "--config", config_, "--seed", "12", "--out", out("other")}).code, 0);
  EXPECT_NE(slurp(out("train/model.ckpt")), slurp(out("other/model.ckpt")));
}

TEST_F(CliTest, SweepIsReproducibleAcrossRerunsAndJobCounts) {
  const auto ckpt = trained();
  ASSERT_EQ(run({"sweep", "--config", config_, "--checkpoint", ckpt, "--out", out("s1")}).code, 0);
  ASSERT_EQ(run({"sweep", "--config", out("s1/manifest.json"), "--jobs", "3", "--out", out("s2")}).code, 0);
  const std::string csv = slurp(out("s1/sweep.csv"));
  EXPECT_EQ(csv, slurp(out("s2/sweep.csv")));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 2 * 2);
}

TEST_F(CliTest, AdversarialTrainingIsReproducible) {
  ASSERT_EQ(run({"at-train", "--config", config_, "--out", out("a1")}).code, 0);
  ASSERT_EQ(run({"at-train", "--config", out("a1/manifest.json"), "--out", out("a2")}).code, 0);
  EXPECT_EQ(slurp(out("a1/model.ckpt")), slurp(out("a2/model.ckpt")));
  EXPECT_EQ(slurp(out("a1/at_log.csv")), slurp(out("a2/at_log.csv")));
}

TEST_F(CliTest, ProfileCumulativeAndPruneSweepWriteTheirTables) {
  const auto ckpt = trained();
  ASSERT_EQ(run({"profile", "--config", config_, "--checkpoint", ckpt, "--out", out("p")}).code, 0);
  const auto prof = eval::profile_from_json(json::parse(slurp(out("p/profile.json"))));
  EXPECT_EQ(prof.rows.size(), 6u * 5u);
  ASSERT_EQ(run({"cumulative", "--config", config_, "--checkpoint", ckpt, "--out", out("c")}).code, 0);
  EXPECT_EQ(slurp(out("c/cumulative.csv")).substr(0, 13), "split_index,n");
  data::detail::write_file(out("prune.json"), R"({"seed": 11,
    "data": {"synthetic": {"n_examples": 400, "shape": [1, 8, 8], "target_classes": 3, "noise_std": 0.3,
             "hidden": {"h": {"classes": 2, "coupling": "correlated", "rho": 0.5}}}},
    "sweep": {"splits": [4], "grid": [{"mode": "topm", "m_prime": 4}], "adversary_seeds": 1, "adversary": {"epochs": 1}},
    "prune": {"finetune_epochs": 1}})");
  const auto r = run({"prune-sweep", "--config", out("prune.json"), "--checkpoint", ckpt, "--out", out("ps")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(slurp(out("ps/prune_sweep.csv")).find("4,prune,4,"), std::string::npos);
}

TEST_F(CliTest, GenDataRoundTripsThroughTrain) {
  ASSERT_EQ(run({"gen-data", "--config", config_, "--out", out("g")}).code, 0);
  const auto ds = data::load_idx(out("g/data.json"));
  EXPECT_EQ(ds.size(), 400u);
  data::detail::write_file(out("t.json"), R"({"model": {"arch": "mlp", "hidden": [8]}, "train": {"epochs": 1}})");
  const auto r = run({"train", "--config", out("t.json"), "--data", out("g/data.json"), "--out", out("t"), "--json"});
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(json::parse(r.out)["ok"].get<bool>());
}

TEST_F(CliTest, RemoteInferenceMatchesLocalEvaluation) {
  const auto ckpt = trained();
  ASSERT_EQ(run({"profile", "--config", config_, "--checkpoint", ckpt, "--out", out("p")}).code, 0);
  const std::string bin = SPLITSHIELD_CLI_PATH;
  std::vector<std::string> args{bin, "serve", "--checkpoint", ckpt, "--port", "0", "--profile", out("p/profile.json"),
                                "--out", out("sv")};
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);
  pid_t pid = 0;
  ASSERT_EQ(posix_spawn(&pid, bin.c_str(), nullptr, nullptr, argv.data(), environ), 0);
  const fs::path info = out("sv/serve.json");
  for (int i = 0; i < 200 && !fs::exists(info); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(25));
  std::this_thread::sleep_for(std::chrono::milliseconds(50));
  ASSERT_TRUE(fs::exists(info));
  const std::string port = std::to_string(json::parse(slurp(info))["port"].get<int>());

  for (const auto& [split, m] : {std::pair<std::string, std::string>{"4", ""}, {"5", "3"}}) {
    std::vector<std::string> mode = m.empty() ? std::vector<std::string>{"--mode", "free"}
                                              : std::vector<std::string>{"--mode", "topm", "--m-prime", m};
    std::vector<std::string> inf{"infer", "--config", config_, "--checkpoint", ckpt, "--port", port, "--split", split,
                                 "--out", out("i" + split)};
    std::vector<std::string> ev{"evaluate", "--config", config_, "--checkpoint", ckpt, "--out", out("e" + split)};
    inf.insert(inf.end(), mode.begin(), mode.end());
    if (!m.empty()) {
      ev.insert(ev.end(), {"--split", split});
      ev.insert(ev.end(), mode.begin(), mode.end());
    }
    ASSERT_EQ(run(inf).code, 0);
    ASSERT_EQ(run(ev).code, 0);
    EXPECT_EQ(slurp(out("i" + split + "/predictions.csv")), slurp(out("e" + split + "/predictions.csv")));
  }
  const auto i5 = json::parse(slurp(out("i5/infer.json")));
  EXPECT_DOUBLE_EQ(i5["comm_ratio"].get<double>(), 3.0 / i5["features"].get<double>());
  EXPECT_DOUBLE_EQ(i5["request_bytes"].get<double>(), i5["n"].get<double>() * (26 + 4 * 3));

  const auto auto_choice = run({"infer", "--config", config_, "--checkpoint", ckpt, "--port", port, "--max-drop", "1",
                                "--limit", "5", "--out", out("ia"), "--json"});
  ASSERT_EQ(auto_choice.code, 0);
  const auto s = json::parse(auto_choice.out)["summary"];
  EXPECT_EQ(s["split"], 6);
  EXPECT_EQ(s["keep_fraction"], 0.1);

  ::kill(pid, SIGTERM);
  int status = 0;
  ::waitpid(pid, &status, 0);
  EXPECT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 0);
  EXPECT_TRUE(fs::exists(out("sv/manifest.json")));
}
