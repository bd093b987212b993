// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "cli.hpp"
#include "libkd/config.hpp"
#include "libkd/error.hpp"

namespace libkd {
namespace {

namespace fs = std::filesystem;

struct Result {
  int rc;
  std::string out, err;
};

// Tiny runs: 100 training and 40 test images.
const std::vector<std::string> kSmall = {"--seed", "3", "--set", "synth.per_class=10", "--set",
                                         "synth.test_per_class=4"};

Result run(std::vector<std::string> args, bool small = true) {
  if (small) args.insert(args.end(), kSmall.begin(), kSmall.end());
  std::ostringstream out, err;
  const int rc = run_cli(args, out, err);
  return {rc, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// report.csv without its wall-time column.
std::string without_seconds(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

class Cli : public ::testing::Test {
 protected:
  static fs::path root;

  static void SetUpTestSuite() {
    // Per-process directory: ctest runs every test case in its own process.
    root = fs::temp_directory_path() / ("libkd_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
    for (const char* f : {"cnn", "inn"}) {
      const Result r = run({"train-teacher", "--family", f, "--epochs", "1", "--out", (root / f).string()});
      ASSERT_EQ(r.rc, 0) << r.err;
      fs::copy_file(root / f / "model.ckpt", root / (std::string(f) + ".ckpt"));
    }
    const Result c = run({"cache-logits", "--teachers", ckpt("cnn") + "," + ckpt("inn"), "--out",
                          (root / "cache").string()});
    ASSERT_EQ(c.rc, 0) << c.err;
  }
  static void TearDownTestSuite() { fs::remove_all(root); }

  static std::string ckpt(const std::string& name) { return (root / (name + ".ckpt")).string(); }
  static std::string cache() { return (root / "cache" / "logits.lkdl").string(); }
};

fs::path Cli::root;

TEST_F(Cli, TrainTeacherWritesArtifactsAndReplaysByteIdentically) {
  const fs::path dir = root / "cnn";
  for (const char* f : {"model.ckpt", "report.csv", "resolved.cfg"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  const std::string ckpt_bytes = slurp(dir / "model.ckpt"), report = slurp(dir / "report.csv");
  const std::string cfg = slurp(dir / "resolved.cfg");
  const Result r = run({"train-teacher", "--family", "cnn", "--epochs", "1", "--out", dir.string()});
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_EQ(slurp(dir / "model.ckpt"), ckpt_bytes);
  EXPECT_EQ(without_seconds(slurp(dir / "report.csv")), without_seconds(report));
  EXPECT_EQ(slurp(dir / "resolved.cfg"), cfg);
  EXPECT_NE(cfg.find("model.family=cnn_teacher"), std::string::npos);
}

TEST_F(Cli, ResolvedConfigAloneReproducesTheRun) {
  const fs::path dir = root / "replay";
  const Result r = run({"train-teacher", "--config", (root / "inn" / "resolved.cfg").string(), "--out", dir.string()},
                       false);
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_EQ(slurp(dir / "model.ckpt"), slurp(root / "inn" / "model.ckpt"));
  EXPECT_EQ(without_seconds(slurp(dir / "report.csv")), without_seconds(slurp(root / "inn" / "report.csv")));
}

TEST_F(Cli, FlagsOverrideFileValues) {
  const fs::path cfg = root / "two_epochs.cfg";
  {
    std::ofstream f(cfg);
    f << "# hand written\ntrain.epochs = 1\nmodel.family = inn\n";
  }
  const fs::path dir = root / "override";
  const Result r = run({"train-teacher", "--config", cfg.string(), "--epochs", "2", "--out", dir.string()});
  ASSERT_EQ(r.rc, 0) << r.err;
  const RunConfig rc = RunConfig::resolve(Command::train_teacher, read_config_file(dir / "resolved.cfg"));
  EXPECT_EQ(rc.count("train.epochs"), 2u);
  EXPECT_EQ(rc.str("model.family"), "inn_teacher");
  std::istringstream report(slurp(dir / "report.csv"));
  std::string line;
  std::size_t rows = 0;
  while (std::getline(report, line)) ++rows;
  EXPECT_EQ(rows, 4u);  // header + epochs 0..2
}

TEST_F(Cli, MissingDatasetFailsWithoutOutputs) {
  const fs::path dir = root / "missing";
  const Result r = run({"train-teacher", "--data", "/nonexistent/cifar", "--out", dir.string()});
  EXPECT_NE(r.rc, 0);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir));
}

TEST_F(Cli, BadSettingsAreRejected) {
  EXPECT_NE(run({"train-teacher", "--set", "train.epochz=3"}).rc, 0);
  EXPECT_NE(run({"train-teacher", "--family", "vit"}).rc, 0);
  EXPECT_NE(run({"train-teacher", "--epochs", "three"}).rc, 0);
  EXPECT_NE(run({"distill", "--out", (root / "noteachers").string()}).rc, 0);
  EXPECT_NE(run({"frobnicate"}, false).rc, 0);
  EXPECT_FALSE(fs::exists(root / "noteachers"));
}

TEST_F(Cli, CacheLogitsIsDeterministic) {
  const fs::path dir = root / "cache2";
  const Result r = run({"cache-logits", "--teachers", ckpt("cnn") + "," + ckpt("inn"), "--workers", "3", "--out",
                        dir.string()});
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_EQ(slurp(dir / "logits.lkdl"), slurp(cache()));
  EXPECT_FALSE(fs::exists(dir / "logits.lkdl.partial"));
}

TEST_F(Cli, DistillFromCacheReplaysAndAlphaOneEqualsBaseline) {
  const fs::path a = root / "kd", b = root / "alpha1", c = root / "baseline";
  ASSERT_EQ(run({"distill", "--cache", cache(), "--epochs", "2", "--out", a.string()}).rc, 0);
  const std::string first = slurp(a / "model.ckpt");
  const Result again = run({"distill", "--cache", cache(), "--epochs", "2", "--out", a.string()});
  ASSERT_EQ(again.rc, 0) << again.err;
  EXPECT_NE(again.out.find("top1"), std::string::npos);
  EXPECT_EQ(slurp(a / "model.ckpt"), first);

  ASSERT_EQ(run({"distill", "--cache", cache(), "--alpha", "1", "--epochs", "2", "--out", b.string()}).rc, 0);
  ASSERT_EQ(run({"distill", "--mode", "none", "--epochs", "2", "--out", c.string()}).rc, 0);
  EXPECT_EQ(slurp(b / "model.ckpt"), slurp(c / "model.ckpt"));
  EXPECT_EQ(without_seconds(slurp(b / "report.csv")), without_seconds(slurp(c / "report.csv")));
}

TEST_F(Cli, DistillRejectsIncompleteCacheAndForeignCheckpoints) {
  std::vector<std::string> bigger = {"distill", "--cache", cache(), "--epochs", "1", "--out",
                                     (root / "bigger").string(), "--set", "synth.per_class=12", "--set",
                                     "synth.test_per_class=4", "--seed", "3"};
  const Result r = run(bigger, false);
  EXPECT_NE(r.rc, 0);
  EXPECT_NE(r.err.find("missing"), std::string::npos) << r.err;

  // A checkpoint named like a cache teacher but holding other weights.
  const fs::path other = root / "other";
  fs::create_directories(other);
  fs::copy_file(ckpt("inn"), other / "cnn.ckpt");
  const Result m = run({"distill", "--cache", cache(), "--teachers", (other / "cnn.ckpt").string(), "--epochs", "1",
                        "--out", (root / "foreign").string()});
  EXPECT_NE(m.rc, 0);
  EXPECT_NE(m.err.find("CRC"), std::string::npos) << m.err;
  EXPECT_FALSE(fs::exists(root / "foreign"));
}

TEST_F(Cli, EvalReportsMembersAndEnsemble) {
  const fs::path dir = root / "eval";
  const Result r = run({"eval", "--models", ckpt("cnn") + "," + ckpt("inn"), "--out", dir.string()});
  ASSERT_EQ(r.rc, 0) << r.err;
  const std::string csv = slurp(dir / "eval.csv");
  EXPECT_EQ(csv.rfind("model,top1,top5\n", 0), 0u);
  EXPECT_NE(csv.find("ensemble:soft_average,"), std::string::npos);
}

TEST_F(Cli, AnalyzeIdenticalModelsAndHeatmapFiles) {
  const fs::path same = root / "same", pair = root / "pair";
  ASSERT_EQ(run({"analyze", "--a", ckpt("cnn"), "--b", ckpt("cnn"), "--probe", "32", "--out", same.string()}).rc, 0);
  const std::string report = slurp(same / "analysis.txt");
  EXPECT_NE(report.find("disagreement_rate=0\n"), std::string::npos) << report;
  std::istringstream csv(slurp(same / "cka.csv"));
  std::string line;
  std::getline(csv, line);
  std::size_t row = 0;
  while (std::getline(csv, line)) {
    std::istringstream cells(line);
    std::string cell;
    std::getline(cells, cell, ',');
    for (std::size_t col = 0; std::getline(cells, cell, ','); ++col) {
      if (col == row) EXPECT_NEAR(std::stod(cell), 1.0, 1e-9);
    }
    ++row;
  }

  ASSERT_EQ(run({"analyze", "--a", ckpt("cnn"), "--b", ckpt("inn"), "--probe", "32", "--out", pair.string()}).rc, 0);
  const std::string pgm = slurp(pair / "cka.pgm");
  std::istringstream table(slurp(pair / "cka.csv"));
  std::getline(table, line);
  std::vector<double> values;
  std::size_t rows = 0;
  while (std::getline(table, line)) {
    std::istringstream cells(line);
    std::string cell;
    std::getline(cells, cell, ',');
    while (std::getline(cells, cell, ',')) values.push_back(std::stod(cell));
    ++rows;
  }
  const std::string header = "P5\n" + std::to_string(values.size() / rows) + " " + std::to_string(rows) + "\n255\n";
  ASSERT_EQ(pgm.size(), header.size() + values.size());
  EXPECT_EQ(pgm.substr(0, header.size()), header);
  for (std::size_t i = 0; i < values.size(); ++i) {
    EXPECT_EQ(static_cast<std::uint8_t>(pgm[header.size() + i]), static_cast<std::uint8_t>(std::lround(255.0 * values[i])));
  }
  EXPECT_NE(slurp(pair / "analysis.txt").find("minimizer_max_linf_to_arithmetic="), std::string::npos);
}

TEST(ConfigText, ParsesAndRejectsMalformedLines) {
  const KeyValues kv = parse_config_text("# c\n\n a.b = 1 \nc.d=x,y\n");
  EXPECT_EQ(kv.at("a.b"), "1");
  EXPECT_EQ(kv.at("c.d"), "x,y");
  EXPECT_THROW(parse_config_text("novalue\n"), ConfigError);
  EXPECT_THROW(parse_config_text("a=1\na=2\n"), ConfigError);
}

TEST(ConfigText, ResolvedTextRoundTrips) {
  const RunConfig a = RunConfig::resolve(Command::distill, {}, {{"distill.mode", "soft"}, {"run.seed", "9"}});
  const RunConfig b = RunConfig::resolve(Command::distill, parse_config_text(a.to_text()));
  EXPECT_EQ(a.values(), b.values());
  EXPECT_EQ(b.str("distill.mode"), "soft");
  EXPECT_EQ(b.u64("synth.seed"), 9u);
  const RunConfig paper = RunConfig::resolve(Command::train_teacher, {}, {{"run.preset", "paper"}});
  EXPECT_EQ(paper.real("optim.lr"), 0.1);
  EXPECT_EQ(paper.str("model.base_channels"), "64");
}

}  // namespace
}  // namespace libkd
