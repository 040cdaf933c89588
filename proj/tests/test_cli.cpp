// Copyright 2026 The AgentPS Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include "agentps/cli.hpp"
#include "test_util.hpp"

namespace agentps {
namespace {

using testing::TempDir;

const std::vector<std::string> kTiny = {
    "dataset.n_samples=48",  "dataset.test_samples=24", "dataset.image_size=8", "dataset.blob_radius=1.5",
    "model.image_size=8",    "model.d_enc=8",           "model.d_model=16",     "model.n_layers=1",
    "train.epochs=2",        "train.batch_size=8",      "ablation.seeds=[1]"};

struct Result {
  int code;
  std::string out, err;
};

Result run_cli(const TempDir& dir, std::vector<std::string> args, std::vector<std::string> extra_sets = {}) {
  std::vector<std::string> argv_s{"agentps"};
  argv_s.insert(argv_s.end(), args.begin(), args.end());
  if (!args.empty() && args[0].rfind("-", 0) != 0) {
    argv_s.push_back("--out");
    argv_s.push_back(dir.path().string());
    argv_s.push_back("--set");
    for (const auto& s : kTiny) argv_s.push_back(s);
    for (const auto& s : extra_sets) argv_s.push_back(s);
  }
  std::vector<char*> argv;
  for (auto& s : argv_s) argv.push_back(s.data());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), {out, err});
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

TEST(Cli, GenerateWritesSplitsManifestAndConfig) {
  TempDir dir("cli");
  const auto r = run_cli(dir, {"generate"});
  ASSERT_EQ(r.code, 0) << r.err;
  RunLayout layout{dir.path()};
  EXPECT_EQ(count_lines(slurp(layout.train_data())), 48u);
  EXPECT_EQ(count_lines(slurp(layout.test_data())), 24u);
  const auto manifest = nlohmann::json::parse(slurp(layout.manifest()));
  EXPECT_EQ(manifest["train"]["n_samples"], 48);
  EXPECT_EQ(manifest["train"]["content_hash"], hex_digest(dataset_hash(read_jsonl(layout.train_data()))));
  EXPECT_TRUE(std::filesystem::exists(layout.config_copy()));
  EXPECT_TRUE(std::filesystem::exists(layout.resolved_config()));
}

TEST(Cli, GenerateRefusesToOverwriteWithoutForce) {
  TempDir dir("cli");
  ASSERT_EQ(run_cli(dir, {"generate"}).code, 0);
  const std::string manifest = slurp(RunLayout{dir.path()}.manifest());
  const auto again = run_cli(dir, {"generate"});
  EXPECT_EQ(again.code, 1);
  EXPECT_NE(again.err.find("--force"), std::string::npos);
  const auto forced = run_cli(dir, {"generate", "--force"});
  EXPECT_EQ(forced.code, 0) << forced.err;
  // Same seed, same manifest.
  EXPECT_EQ(slurp(RunLayout{dir.path()}.manifest()), manifest);
}

TEST(Cli, RegenerationFromManifestIsBytewiseIdentical) {
  TempDir a("cli"), b("cli");
  ASSERT_EQ(run_cli(a, {"generate"}, {"dataset.seed=77"}).code, 0);
  const RunLayout la{a.path()}, lb{b.path()};
  // Different config in b; the manifest decides what is generated.
  const auto r = run_cli(b, {"generate", "--from-manifest", la.manifest().string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(la.train_data()), slurp(lb.train_data()));
  EXPECT_EQ(slurp(la.test_data()), slurp(lb.test_data()));
  EXPECT_EQ(slurp(la.manifest()), slurp(lb.manifest()));
}

TEST(Cli, SimulatedAnnotationRunsOffline) {
  TempDir dir("cli");
  ASSERT_EQ(run_cli(dir, {"generate"}).code, 0);
  // Unreachable endpoint and no key: simulated mode must not care.
  setenv("AGENTPS_ANNOTATOR_URL", "http://127.0.0.1:1", 1);
  unsetenv("AGENTPS_ANNOTATOR_KEY");
  const auto r = run_cli(dir, {"annotate", "--mode", "simulated"});
  unsetenv("AGENTPS_ANNOTATOR_URL");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto ann = read_annotations(RunLayout{dir.path()}.annotations("simulated"));
  EXPECT_EQ(ann.size(), 48u);
  for (const auto& a : ann) EXPECT_EQ(a.source, AnnotationSource::kSimulated);
}

TEST(Cli, RemoteAnnotationWithoutCredentialFailsAtStartup) {
  TempDir dir("cli");
  ASSERT_EQ(run_cli(dir, {"generate"}).code, 0);
  const auto cfg = RunConfig::defaults();
  unsetenv(cfg.remote.url_env.c_str());
  unsetenv(cfg.remote.key_env.c_str());
  const auto r = run_cli(dir, {"annotate", "--mode", "remote"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find(cfg.remote.url_env), std::string::npos) << r.err;
  EXPECT_FALSE(std::filesystem::exists(RunLayout{dir.path()}.annotations("remote")));
}

TEST(Cli, TrainEvalAndResume) {
  TempDir dir("cli");
  ASSERT_EQ(run_cli(dir, {"generate"}).code, 0);
  const RunLayout layout{dir.path()};

  const auto v = run_cli(dir, {"train", "--variant", "vanilla"}, {"train.epochs=1"});
  ASSERT_EQ(v.code, 0) << v.err;
  EXPECT_NE(v.err.find("ancillary loss weights are ignored"), std::string::npos);

  ASSERT_EQ(run_cli(dir, {"train", "--variant", "agentps"}, {"train.epochs=1"}).code, 0);
  const auto resumed = run_cli(dir, {"train", "--variant", "agentps", "--resume"}, {"train.epochs=3"});
  ASSERT_EQ(resumed.code, 0) << resumed.err;
  EXPECT_NE(resumed.err.find("resuming agentps_seed"), std::string::npos);
  const std::string log = slurp(layout.epoch_log("agentps_seed1"));
  std::vector<std::string> epochs;
  std::istringstream lines(log);
  for (std::string line; std::getline(lines, line);) epochs.push_back(line.substr(0, line.find(',')));
  EXPECT_EQ(epochs, (std::vector<std::string>{"epoch", "1", "2", "3"}));

  const auto ckpt = layout.checkpoint("agentps_seed1").string();
  const auto e1 = run_cli(dir, {"eval", "--checkpoint", ckpt});
  ASSERT_EQ(e1.code, 0) << e1.err;
  const std::string report = slurp(layout.report("agentps_seed1", "json"));
  const auto e2 = run_cli(dir, {"eval", "--checkpoint", ckpt});
  EXPECT_EQ(e1.out, e2.out);
  EXPECT_EQ(report, slurp(layout.report("agentps_seed1", "json")));
  const auto j = nlohmann::json::parse(report);
  EXPECT_EQ(j["question_accuracy"].size(), 4u);
  EXPECT_FALSE(j["question_accuracy"][0].is_null());

  const auto missing = run_cli(dir, {"eval", "--checkpoint", ckpt, "--test", (dir / "nope.jsonl").string()});
  EXPECT_EQ(missing.code, 2);
}

TEST(Cli, AblateWritesReportsAndSummary) {
  TempDir dir("cli");
  const auto r = run_cli(dir, {"ablate", "--seeds", "3"}, {"train.epochs=1"});
  ASSERT_EQ(r.code, 0) << r.err;
  const RunLayout layout{dir.path()};
  std::size_t reports = 0;
  for (const auto& e : std::filesystem::directory_iterator(layout.reports_dir())) {
    const auto name = e.path().filename().string();
    if (e.path().extension() == ".json" && name.rfind("summary", 0) != 0) ++reports;
  }
  EXPECT_EQ(reports, 9u);
  const auto summary = nlohmann::json::parse(slurp(layout.reports_dir() / "summary.json"));
  ASSERT_EQ(summary["rows"].size(), 3u);
  bool any_best = false;
  for (const auto& row : summary["rows"]) {
    EXPECT_TRUE(row["best"].is_array());
    any_best = any_best || !row["best"].empty();
  }
  EXPECT_TRUE(any_best);
  const auto& g = summary["f1_gaps"];
  auto tenths = [](const nlohmann::json& s) { return std::llround(std::stod(s.get<std::string>()) * 10); };
  EXPECT_EQ(tenths(g["multitask_minus_vanilla"]) + tenths(g["agentps_minus_multitask"]),
            tenths(g["agentps_minus_vanilla"]));
  EXPECT_EQ(count_lines(slurp(layout.reports_dir() / "ablation.csv")), 10u);
}

TEST(Cli, ExitCodes) {
  TempDir dir("cli");
  EXPECT_EQ(run_cli(dir, {"--help"}).code, 0);
  EXPECT_EQ(run_cli(dir, {"frobnicate"}).code, 1);
  EXPECT_EQ(run_cli(dir, {"generate"}, {"train.nonsense=1"}).code, 1);
  EXPECT_EQ(run_cli(dir, {"train", "--variant", "bogus"}).code, 1);
  // No dataset yet.
  EXPECT_EQ(run_cli(dir, {"train"}).code, 2);

  ASSERT_EQ(run_cli(dir, {"generate"}).code, 0);
  const RunLayout layout{dir.path()};
  std::string data = slurp(layout.train_data());
  std::ofstream(layout.train_data(), std::ios::trunc) << data.substr(0, data.size() / 2);
  const auto truncated = run_cli(dir, {"train"});
  EXPECT_EQ(truncated.code, 2);
  EXPECT_NE(truncated.err.find("line"), std::string::npos);

  ASSERT_EQ(run_cli(dir, {"generate", "--force"}).code, 0);
  const auto nan = run_cli(dir, {"train"}, {"train.learning_rate=1e30", "train.lr_schedule=constant"});
  EXPECT_EQ(nan.code, 3) << nan.err;
  EXPECT_NE(nan.err.find("non-finite"), std::string::npos);
}

#ifdef AGENTPS_CLI_PATH
// Runs the real binary and SIGKILLs it mid-training. The last checkpoint must
// load, and resuming must finish with the same state as an uninterrupted run.
TEST(Cli, KillAndResume) {
  TempDir dir("cli");
  ASSERT_EQ(run_cli(dir, {"generate"}, {"dataset.n_samples=400"}).code, 0);
  const RunLayout layout{dir.path()};
  const std::vector<std::string> sets = {"train.epochs=40", "dataset.n_samples=400"};

  auto spawn = [&](bool resume) {
    std::vector<std::string> args{AGENTPS_CLI_PATH, "train", "--variant", "agentps", "--out", dir.path().string()};
    if (resume) args.push_back("--resume");
    args.push_back("--set");
    for (const auto& s : kTiny) args.push_back(s);
    for (const auto& s : sets) args.push_back(s);
    const pid_t pid = fork();
    if (pid == 0) {
      std::vector<char*> argv;
      for (auto& s : args) argv.push_back(s.data());
      argv.push_back(nullptr);
      const int devnull = open("/dev/null", O_WRONLY);
      dup2(devnull, STDOUT_FILENO);
      dup2(devnull, STDERR_FILENO);
      execv(argv[0], argv.data());
      _exit(127);
    }
    return pid;
  };

  const auto ckpt = layout.checkpoint("agentps_seed1");
  const pid_t pid = spawn(false);
  ASSERT_GT(pid, 0);
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(120);
  while (!std::filesystem::exists(ckpt) && std::chrono::steady_clock::now() < deadline) {
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  // Let it get into a later epoch before the kill.
  std::this_thread::sleep_for(std::chrono::milliseconds(150));
  kill(pid, SIGKILL);
  int status = 0;
  waitpid(pid, &status, 0);
  ASSERT_TRUE(WIFSIGNALED(status)) << "training finished before it could be interrupted";

  const auto interrupted = load_checkpoint<float>(ckpt);
  ASSERT_GE(interrupted.state.epoch, 1u);
  ASSERT_LT(interrupted.state.epoch, 40u);

  const pid_t again = spawn(true);
  waitpid(again, &status, 0);
  ASSERT_TRUE(WIFEXITED(status));
  ASSERT_EQ(WEXITSTATUS(status), 0);
  const auto resumed = load_checkpoint<float>(ckpt);
  EXPECT_EQ(resumed.state.epoch, 40u);

  // Reference: the same training without interruption, in process.
  auto [cfg, text] = load_run_config("", [&] {
    auto all = kTiny;
    all.insert(all.end(), sets.begin(), sets.end());
    return all;
  }());
  TrainConfig tc = cfg.train;
  tc.variant = Variant::kAgentPS;
  const auto mc = cfg.resolved_model(Variant::kAgentPS);
  const auto data = make_examples<float>(read_jsonl(layout.train_data()), cfg.vocabulary(), mc);
  auto reference = initial_state<float>(mc, tc);
  Trainer<float>(reference, tc).train(data);
  const Json meta = resumed.metadata;
  EXPECT_EQ(serialize_checkpoint(resumed), serialize_checkpoint(Checkpoint<float>{reference, meta}));
}
#endif

}  // namespace
}  // namespace agentps
