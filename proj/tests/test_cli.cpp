#include <gtest/gtest.h>

#include <filesystem>
#include <string>
#include <vector>

#include "pncnn/cli.hpp"
#include "pncnn/io.hpp"
#include "pncnn/synth.hpp"

using namespace pncnn;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code;
  std::string err;
};

RunResult run(std::vector<std::string> args) {
  args.insert(args.begin(), "pncnn");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  testing::internal::CaptureStderr();
  testing::internal::CaptureStdout();
  const int code = cli_main(static_cast<int>(argv.size()), argv.data());
  testing::internal::GetCapturedStdout();
  return {code, testing::internal::GetCapturedStderr()};
}

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

class CliTest : public testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("pncnn_cli_" + std::string(testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  std::string path(const std::string& rel) const { return (root_ / rel).string(); }

  void make_data(std::size_t n = 4) {
    ASSERT_EQ(run({"synth", "--out", path("data"), "--n", std::to_string(n), "--rows", "24", "--cols", "24",
                   "--seed", "3"})
                  .code,
              0);
  }

  fs::path root_;
};

}  // namespace

TEST_F(CliTest, SynthWritesRequestedSamples) {
  make_data(5);
  const Dataset d = load_dataset(path("data"));
  ASSERT_EQ(d.size(), 5u);
  EXPECT_EQ(d[0].gt.rows, 24u);
}

TEST_F(CliTest, TrainOneEpochWritesLoadableCheckpoint) {
  make_data();
  const auto r = run({"train", "--data", path("data"), "--out", path("m.ckpt"), "--variant", "pncnn", "--epochs",
                      "1", "--unet-channels", "4,4,8", "--val-frac", "0.25", "--log", path("log.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  KeyValues meta;
  const Pipeline p = load_pipeline(path("m.ckpt"), &meta);
  EXPECT_EQ(p.config().variant, Variant::Pncnn);
  EXPECT_EQ(count_lines(read_file_bytes(path("log.csv"))), 2u);

  ASSERT_EQ(run({"eval", "--data", path("data"), "--checkpoint", path("m.ckpt"), "--out", path("ev"),
                 "--write-predictions"})
                .code,
            0);
  const KeyValues rep = read_kv_file(path("ev/report.txt"));
  EXPECT_TRUE(rep.count("ause"));
  EXPECT_TRUE(fs::exists(path("ev/sparsification.csv")));
  EXPECT_TRUE(fs::exists(path("ev/unc")));
}

TEST_F(CliTest, ConfigFileWithFlagOverride) {
  make_data();
  atomic_write_text(path("cfg.txt"), "variant=ncnn-conf\nunet_channels=4,4,8\nepochs=3\nval_frac=0.25\n");
  ASSERT_EQ(run({"train", "--data", path("data"), "--out", path("m.ckpt"), "--config", path("cfg.txt"),
                 "--epochs", "1", "--log", path("log.csv")})
                .code,
            0);
  EXPECT_EQ(load_pipeline(path("m.ckpt")).config().variant, Variant::NcnnConf);
  EXPECT_EQ(count_lines(read_file_bytes(path("log.csv"))), 2u);
}

TEST_F(CliTest, EvalOfGroundTruthIsPerfect) {
  make_data();
  const Dataset d = load_dataset(path("data"));
  for (const auto& s : d) {
    write_grid_file(path("gtpred/pred/" + s.name + ".cgrd"), s.gt);
    Grid unc(s.gt.rows, s.gt.cols, 1.0);
    write_grid_file(path("gtpred/unc/" + s.name + ".cgrd"), unc);
  }
  ASSERT_EQ(run({"eval", "--data", path("data"), "--pred-dir", path("gtpred"), "--split", "all", "--out", path("ev")})
                .code,
            0);
  const KeyValues rep = read_kv_file(path("ev/report.txt"));
  EXPECT_EQ(std::stod(rep.at("rmse")), 0.0);
  EXPECT_EQ(std::stod(rep.at("ause")), 0.0);
}

TEST_F(CliTest, FuseWeightedMeanOfIdenticalMembersIsIdentity) {
  make_data();
  const Dataset d = load_dataset(path("data"));
  for (std::size_t i = 0; i < d.size(); ++i) {
    Grid pred = d[i].gt;
    Grid unc(pred.rows, pred.cols);
    for (std::size_t j = 0; j < pred.size(); ++j) {
      pred.data[j] += 0.25 * static_cast<double>((i + j) % 7) - 0.5;
      unc.data[j] = 0.1 + 0.05 * static_cast<double>(j % 5);
    }
    for (const char* m : {"a", "b"}) {
      write_grid_file(path(std::string(m) + "/pred/" + d[i].name + ".cgrd"), pred);
      write_grid_file(path(std::string(m) + "/unc/" + d[i].name + ".cgrd"), unc);
    }
  }
  ASSERT_EQ(run({"fuse", "--data", path("data"), "--pred-dir", path("a"), "--pred-dir", path("b"), "--scheme",
                 "wmean", "--split", "all", "--out", path("fused")})
                .code,
            0);
  for (const auto& s : d) {
    EXPECT_EQ(read_grid_file(path("fused/pred/" + s.name + ".cgrd")).data,
              read_grid_file(path("a/pred/" + s.name + ".cgrd")).data);
  }
}

TEST_F(CliTest, PredictWritesOutputs) {
  make_data();
  ASSERT_EQ(run({"train", "--data", path("data"), "--out", path("m.ckpt"), "--variant", "pncnn-exp", "--epochs",
                 "1", "--unet-channels", "4,4,8", "--val-frac", "0.25"})
                .code,
            0);
  const Dataset d = load_dataset(path("data"));
  ASSERT_EQ(run({"predict", "--checkpoint", path("m.ckpt"), "--input", path("data/sparse/" + d[0].name + ".png"),
                 "--out", path("p.png"), "--out-conf", path("c.cgrd"), "--out-unc", path("u.cgrd")})
                .code,
            0);
  EXPECT_TRUE(read_depth_png(path("p.png")).same_shape(d[0].gt));
  EXPECT_TRUE(read_grid_file(path("c.cgrd")).same_shape(d[0].gt));
  for (double u : read_grid_file(path("u.cgrd")).data) EXPECT_GT(u, 0.0);
}

TEST_F(CliTest, FailuresGiveOneLineDiagnostic) {
  make_data();
  atomic_write_text(path("bad.ckpt"), "PNCNN-CHECKPOINT 1\ngarbage");
  const std::vector<std::vector<std::string>> cases = {
      {"train", "--data", path("data"), "--out", path("x"), "--no-such-flag", "1"},
      {"eval", "--data", path("missing"), "--pred-dir", path("data"), "--out", path("ev")},
      {"eval", "--data", path("data"), "--checkpoint", path("bad.ckpt"), "--out", path("ev")},
      {"predict", "--checkpoint", path("bad.ckpt"), "--input", path("nope.png"), "--out", path("p.png")},
      {"train", "--data", path("data"), "--out", path("x"), "--variant", "bogus"},
      {"fuse", "--data", path("data"), "--out", path("f")},
  };
  for (const auto& args : cases) {
    const auto r = run(args);
    EXPECT_NE(r.code, 0) << args[0];
    EXPECT_EQ(count_lines(r.err), 1u) << r.err;
    EXPECT_EQ(r.err.rfind("pncnn: error: ", 0), 0u) << r.err;
  }
}
