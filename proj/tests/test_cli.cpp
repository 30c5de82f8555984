#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include <gtest/gtest.h>

#include "oodforge/oodforge.hpp"

using namespace oodforge;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out, err;
};

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("oodforge_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  Outcome cli(const std::string& args) const {
    const fs::path out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd = std::string(OOD_FORGE_BIN) + " " + args + " >" + out.string() + " 2>" +
                            err.string();
    const int status = std::system(cmd.c_str());
    Outcome o;
    o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    o.out = read_file_bytes(out);
    o.err = read_file_bytes(err);
    return o;
  }

  fs::path write(const std::string& name, const std::string& text) const {
    write_file_atomic(dir_ / name, text);
    return dir_ / name;
  }

  // Synthetic data plus a baseline run config pointing at it.
  fs::path prepare(const std::string& extra = "") const {
    const fs::path spec = write("spec.json", R"({"kind": "separated", "per_class": 60, "seed": 7})");
    const Outcome g = cli("gen-synthetic --spec " + spec.string() + " --out " + (dir_ / "data").string());
    EXPECT_EQ(g.code, 0) << g.err;
    return write("run.json", R"({"id_train": "data/id_train.emb", "id_test": "data/id_test.emb",
                                 "ood": ["data/ood.emb"], "seed": 7)" + extra + "}");
  }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, GenRunReportFlow) {
  const fs::path cfg = prepare();
  for (const char* f : {"id_train.emb", "id_test.emb", "ood.emb"}) {
    EXPECT_TRUE(fs::is_regular_file(dir_ / "data" / f)) << f;
  }

  const Outcome check = cli("run --check --config " + cfg.string() + " --out " + (dir_ / "out").string());
  EXPECT_EQ(check.code, 0) << check.err;
  EXPECT_EQ(check.out, "config ok\n");
  EXPECT_FALSE(fs::exists(dir_ / "out" / "report.csv"));

  const Outcome r = cli("run --config " + cfg.string() + " --out " + (dir_ / "out").string());
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = read_file_bytes(dir_ / "out" / "report.csv");
  EXPECT_EQ(r.out, csv);
  EXPECT_EQ(parse_report_csv(csv).rows.size(), 7u);

  const Outcome md = cli("report --csv " + (dir_ / "out" / "report.csv").string());
  ASSERT_EQ(md.code, 0) << md.err;
  EXPECT_EQ(md.out, render_markdown(parse_report_csv(csv)));
}

TEST_F(CliTest, RunIsByteIdenticalAcrossInvocations) {
  const fs::path cfg = prepare(R"(, "condition": "cider", "cider": {"projection_dim": 16, "epochs": 3})");
  ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + (dir_ / "a").string()).code, 0);
  ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + (dir_ / "b").string()).code, 0);
  EXPECT_EQ(read_file_bytes(dir_ / "a" / "report.csv"), read_file_bytes(dir_ / "b" / "report.csv"));
  EXPECT_EQ(read_file_bytes(dir_ / "a" / "cider.ckpt"), read_file_bytes(dir_ / "b" / "cider.ckpt"));
}

TEST_F(CliTest, StepwiseCommandsMatchRun) {
  const fs::path cfg = prepare(R"(, "detectors": ["Mahalanobis"])");
  ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + (dir_ / "out").string()).code, 0);
  const std::string d = (dir_ / "data").string() + "/";
  const std::string w = dir_.string() + "/";
  Outcome o = cli("probe-train --train " + d + "id_train.emb --seed 7 --out " + w + "probe.ckpt");
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_EQ(o.out.rfind("final loss ", 0), 0u);
  o = cli("fit --method Mahalanobis --train " + d + "id_train.emb --probe " + w +
          "probe.ckpt --out " + w + "maha.state");
  ASSERT_EQ(o.code, 0) << o.err;
  for (const char* set : {"id_test", "ood"}) {
    o = cli(std::string("score --state ") + w + "maha.state --probe " + w + "probe.ckpt --data " + d +
            set + ".emb --out " + w + set + ".scores");
    ASSERT_EQ(o.code, 0) << o.err;
  }
  o = cli("evaluate --id " + w + "id_test.scores --ood " + w + "ood.scores --detector Mahalanobis");
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_EQ(read_file_bytes(dir_ / "probe.ckpt"), read_file_bytes(dir_ / "out" / "probe.ckpt"));
  EXPECT_EQ(parse_report_csv(o.out).rows,
            parse_report_csv(read_file_bytes(dir_ / "out" / "report.csv")).rows);
}

TEST_F(CliTest, ConfigErrorsExitWithTwo) {
  const fs::path cfg = prepare();
  const std::string out = " --out " + (dir_ / "out").string();
  EXPECT_EQ(cli("run --config " + (dir_ / "missing.json").string() + out).code, 2);
  EXPECT_EQ(cli("run --config " + write("broken.json", "{").string() + out).code, 2);
  EXPECT_EQ(cli("run --config " + cfg.string()).code, 2);  // no output directory
  EXPECT_EQ(cli("run --bogus").code, 2);
  EXPECT_EQ(cli("").code, 2);

  const Outcome unknown = cli(
      "run --check --config " +
      write("unknown.json", R"({"id_train": "data/id_train.emb", "id_test": "data/id_test.emb",
                               "ood": "data/ood.emb", "detectors": ["Gram"]})").string() + out);
  EXPECT_EQ(unknown.code, 2);
  EXPECT_NE(unknown.err.find("Gram"), std::string::npos);

  const Outcome missing = cli(
      "run --config " +
      write("nofile.json", R"({"id_train": "data/id_train.emb", "id_test": "data/id_test.emb",
                               "ood": "data/absent.emb"})").string() + out);
  EXPECT_EQ(missing.code, 2);
  EXPECT_NE(missing.err.find("absent.emb"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir_ / "out"));

  const Outcome cider = cli(
      "run --check --config " +
      write("nocider.json", R"({"id_train": "data/id_train.emb", "id_test": "data/id_test.emb",
                               "ood": "data/ood.emb", "condition": "cider"})").string() + out);
  EXPECT_EQ(cider.code, 2);
  EXPECT_EQ(cli("gen-synthetic --spec " + write("s.json", R"({"kind": "blobs"})").string() +
                " --out " + (dir_ / "g").string()).code, 2);
}

TEST_F(CliTest, MalformedDataExitsWithThree) {
  prepare();
  write("data/ood.emb", "EMB2\n{}\n");
  const fs::path cfg = write("run2.json", R"({"id_train": "data/id_train.emb",
      "id_test": "data/id_test.emb", "ood": "data/ood.emb"})");
  const Outcome o = cli("run --config " + cfg.string() + " --out " + (dir_ / "out").string());
  EXPECT_EQ(o.code, 3);
  EXPECT_NE(o.err.find("format error"), std::string::npos);

  std::string bytes = read_file_bytes(dir_ / "data" / "id_test.emb");
  bytes.resize(bytes.size() - 3);
  write("data/short.emb", bytes);
  EXPECT_EQ(cli("evaluate --id " + (dir_ / "data" / "short.emb").string() + " --ood " +
                (dir_ / "data" / "id_test.emb").string()).code, 3);
  // Score files must be N x 1.
  EXPECT_EQ(cli("evaluate --id " + (dir_ / "data" / "id_test.emb").string() + " --ood " +
                (dir_ / "data" / "id_test.emb").string()).code, 3);
}

TEST_F(CliTest, NumericalFailureExitsWithFour) {
  prepare();
  LabeledEmbeddings train = read_emb(dir_ / "data" / "id_train.emb");
  for (std::size_t k = 0; k < train.dim(); ++k) train.features(0, k) = 0.0;  // cannot be normalised
  write_emb(train, dir_ / "data" / "id_train.emb");
  const Outcome o = cli("run --config " + (dir_ / "run.json").string() + " --out " +
                        (dir_ / "out").string());
  EXPECT_EQ(o.code, 4);
  EXPECT_NE(o.err.find("numerical error"), std::string::npos);
}

TEST_F(CliTest, DetectorFailureIsReportedNotFatal) {
  const fs::path cfg = prepare(R"(, "detector_params": {"openmax": {"tail": 1000}})");
  const Outcome o = cli("run --config " + cfg.string() + " --out " + (dir_ / "out").string());
  EXPECT_EQ(o.code, 0) << o.err;
  EXPECT_NE(o.err.find("detector error"), std::string::npos);
  EXPECT_NE(read_file_bytes(dir_ / "out" / "report.md").find("OpenMax"), std::string::npos);
}
