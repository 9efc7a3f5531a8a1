// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "bsr/cli.hpp"
#include "bsr/memory_model.hpp"
#include "bsr/train.hpp"
#include "bsr/vit_model.hpp"

namespace bsr {
namespace {

namespace fs = std::filesystem;

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

CliRun bsr_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  CliRun r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("bsr_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  std::string write(const std::string& name, const std::string& text) const {
    std::ofstream(path(name)) << text;
    return path(name);
  }

  static std::string read(const std::string& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  fs::path dir_;
};

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) {
      cells.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') {
      cells.emplace_back();
    }
    rows.push_back(cells);
  }
  return rows;
}

TEST_F(Cli, AnalyzeDefaultPlanDeitSmall) {
  const CliRun r = bsr_cli({"analyze", "--config", "deit-s", "--plan", "default", "--batch", "128", "--mode", "paper",
                         "--out", path("a.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = memory::parse_csv(read(path("a.csv")));
  std::size_t total = 0;
  for (const auto& row : rows) {
    total += row.bytes;
  }
  EXPECT_NEAR(memory::to_mb(total), 1433, 143.3);
  EXPECT_EQ(total, memory::estimate_total(deit_small(), {policy::Strategy::Bsr, policy::default_plan(12)}, 128,
                                          memory::Mode::Paper)
                       .grand_total);
  EXPECT_NE(r.out.find("total"), std::string::npos);
  EXPECT_TRUE(r.err.empty());
}

TEST_F(Cli, AnalyzeFullPlan) {
  const CliRun r = bsr_cli({"analyze", "--config", "deit-s", "--plan", "full", "--batch", "128", "--out", path("f.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::size_t total = 0;
  for (const auto& row : memory::parse_csv(read(path("f.csv")))) {
    total += row.bytes;
  }
  EXPECT_NEAR(memory::to_mb(total), 8649, 8649 * 0.05);
}

TEST_F(Cli, ValidationErrorsExitTwo) {
  EXPECT_EQ(bsr_cli({"analyze", "--bogus"}).code, 2);
  EXPECT_EQ(bsr_cli({"teleport"}).code, 2);
  EXPECT_EQ(bsr_cli({}).code, 2);
  EXPECT_EQ(bsr_cli({"analyze", "--mode", "approximate"}).code, 2);
  EXPECT_EQ(bsr_cli({"analyze", "--batch", "0"}).code, 2);
  EXPECT_EQ(bsr_cli({"analyze", "--config", "resnet"}).code, 2);
  EXPECT_EQ(bsr_cli({"analyze", "--plan", path("missing.plan")}).code, 2);
  EXPECT_EQ(bsr_cli({"analyze", "--plan", write("early.plan", "trainable = 3\ndrops = 1\nstrict = true\n")}).code, 2);
  EXPECT_EQ(bsr_cli({"analyze", "--plan", write("odd.plan", "trainable = 3\nfavourite = 7\n")}).code, 2);
  EXPECT_EQ(bsr_cli({"gradcheck", "--config", "deit-s"}).code, 2);
  EXPECT_EQ(bsr_cli({"finetune"}).code, 2);
  EXPECT_EQ(bsr_cli({"pretrain"}).code, 2);
  EXPECT_EQ(bsr_cli({"finetune", "--checkpoint", path("none.ckpt")}).code, 2);
}

TEST_F(Cli, PlanWarningsGoToStderr) {
  const CliRun r = bsr_cli({"analyze", "--plan", write("late.plan", "trainable = 10,11\ndrops = 3,6,9\n")});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.err.find("warning"), std::string::npos);
}

TEST_F(Cli, HelpExitsZero) {
  const CliRun r = bsr_cli({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("plan-search"), std::string::npos);
}

TEST_F(Cli, FlopsCsvSumsToTotal) {
  const CliRun r = bsr_cli({"flops", "--config", "deit-s", "--batch", "128", "--out", path("flops.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = csv_rows(read(path("flops.csv")));
  ASSERT_EQ(rows.front(), (std::vector<std::string>{"part", "macs"}));
  std::size_t sum = 0, total = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i][0] == "total") {
      total = std::stoull(rows[i][1]);
    } else {
      sum += std::stoull(rows[i][1]);
    }
  }
  EXPECT_EQ(sum, total);
  EXPECT_EQ(total,
            memory::count_flops(deit_small(), {policy::Strategy::Bsr, policy::default_plan(12)}, 128).total);
}

TEST_F(Cli, GradcheckPassesAndCatchesCorruption) {
  const std::string plan = write("g.plan", "trainable = 3\ndrops = 2\n");
  const CliRun ok = bsr_cli({"gradcheck", "--plan", plan});
  EXPECT_EQ(ok.code, 0) << ok.out << ok.err;
  EXPECT_NE(ok.out.find("PASS"), std::string::npos);
  const CliRun bad = bsr_cli({"gradcheck", "--plan", plan, "--corrupt-backward"});
  EXPECT_EQ(bad.code, 3);
  EXPECT_NE(bad.out.find("FAIL"), std::string::npos);
}

TEST_F(Cli, AuditToy) {
  const CliRun r = bsr_cli({"audit", "--plan", "default", "--out", path("audit.csv")});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("matches"), std::string::npos);
  const auto rows = memory::parse_csv(read(path("audit.csv")));
  ASSERT_FALSE(rows.empty());
  EXPECT_EQ(rows.front().mode, memory::Mode::Exact);
}

TEST_F(Cli, EmptyPlanSearchGrid) {
  const CliRun r = bsr_cli({"plan-search", "--grid", write("empty.grid", "# nothing\n\n"), "--out", path("s.csv")});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("(empty grid)"), std::string::npos);
  EXPECT_EQ(csv_rows(read(path("s.csv"))).size(), 1u);
}

TEST_F(Cli, PlanSearchOrdersByMemory) {
  const CliRun r = bsr_cli({"plan-search", "--candidate", "trainable=3,7,11 drops=3,6,9 rate=0.5", "--candidate",
                         "trainable=9,10,11 drops=3,6,9 rate=0.5", "--candidate",
                         "trainable=4,11 drops=3,6,9 rate=0.5", "--out", path("s.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = csv_rows(read(path("s.csv")));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0][0], "rank");
  EXPECT_EQ(rows[1][1], "9 10 11");
  EXPECT_EQ(rows[2][1], "4 11");
  EXPECT_EQ(rows[3][1], "3 7 11");
  EXPECT_LT(std::stod(rows[1][4]), std::stod(rows[2][4]));
  EXPECT_LT(std::stod(rows[2][4]), std::stod(rows[3][4]));
}

TEST_F(Cli, PlanSearchOrdersByFlops) {
  const std::string grid = write("t8.grid",
                                 "trainable=3,7,11 drops=5,7,9 rate=0.7\n"
                                 "trainable=3,7,11 drops=1,3,5,7,9 rate=0.3\n"
                                 "trainable=3,7,11 drops=3,6,9 rate=0.5\n");
  const CliRun r = bsr_cli({"plan-search", "--grid", grid, "--sort", "flops", "--out", path("s.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = csv_rows(read(path("s.csv")));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[1][2], "1 3 5 7 9");
  EXPECT_EQ(rows[2][2], "3 6 9");
  EXPECT_EQ(rows[3][2], "5 7 9");
}

TEST_F(Cli, PlanSearchRejectsInvalidCandidate) {
  EXPECT_EQ(bsr_cli({"plan-search", "--candidate", "trainable=12"}).code, 2);
  EXPECT_EQ(bsr_cli({"plan-search", "--candidate", "trainable=3 colour=blue"}).code, 2);
}

TEST_F(Cli, CompareMemoryEqualsAnalyze) {
  const CliRun r = bsr_cli({"compare", "--config", "deit-s", "--batch", "128", "--out", path("c.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = csv_rows(read(path("c.csv")));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"strategy", "memory_bytes", "memory_mb", "gmacs", "accuracy"}));
  const std::map<std::string, std::string> plan_of = {{"ft-full", "full"}, {"ft-last", "head-only"}, {"bsr", "default"}};
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const CliRun a = bsr_cli({"analyze", "--config", "deit-s", "--batch", "128", "--plan", plan_of.at(rows[i][0]),
                           "--out", path("a.csv")});
    ASSERT_EQ(a.code, 0);
    std::size_t total = 0;
    for (const auto& row : memory::parse_csv(read(path("a.csv")))) {
      total += row.bytes;
    }
    EXPECT_EQ(std::to_string(total), rows[i][1]) << rows[i][0];
  }
}

TEST_F(Cli, PretrainFinetuneCompareRoundTrip) {
  const std::string ckpt = path("src.ckpt");
  const std::vector<std::string> small = {"--epochs", "1", "--train-size", "32", "--test-size", "32"};
  std::vector<std::string> pre = {"pretrain", "--out", ckpt, "--metrics", path("pre.csv")};
  pre.insert(pre.end(), small.begin(), small.end());
  const CliRun p = bsr_cli(pre);
  ASSERT_EQ(p.code, 0) << p.err;
  ASSERT_NO_THROW(load_checkpoint(ckpt));
  const auto pre_rows = train::parse_metrics_csv(read(path("pre.csv")));
  EXPECT_FALSE(pre_rows.empty());

  std::vector<std::string> ft = {"finetune", "--checkpoint", ckpt, "--metrics", path("ft.csv"), "--out",
                                 path("ft.ckpt")};
  ft.insert(ft.end(), small.begin(), small.end());
  const CliRun f = bsr_cli(ft);
  ASSERT_EQ(f.code, 0) << f.err;
  const auto ft_rows = train::parse_metrics_csv(read(path("ft.csv")));
  ASSERT_FALSE(ft_rows.empty());
  EXPECT_EQ(ft_rows.back().split, "test");
  EXPECT_TRUE(fs::exists(path("ft.ckpt")));

  std::vector<std::string> cmp = {"compare", "--checkpoint", ckpt, "--out", path("cmp.csv")};
  cmp.insert(cmp.end(), small.begin(), small.end());
  const CliRun c = bsr_cli(cmp);
  ASSERT_EQ(c.code, 0) << c.err;
  const auto rows = csv_rows(read(path("cmp.csv")));
  ASSERT_EQ(rows.size(), 4u);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    ASSERT_EQ(rows[i].size(), 5u);
    const double acc = std::stod(rows[i][4]);
    EXPECT_GE(acc, 0.0);
    EXPECT_LE(acc, 1.0);
  }
}

}  // namespace
}  // namespace bsr
