#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "testing_util.hpp"

// End-to-end tests drive the installed binary (path injected by the build)
// through a shell, checking exit codes and on-disk artifacts.

namespace {

using fedabc::test::TempDir;

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  EXPECT_TRUE(f.good()) << "cannot open " << path;
  std::ostringstream buf;
  buf << f.rdbuf();
  return buf.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path);
  f << text;
  ASSERT_TRUE(f.good()) << path;
}

int count_lines(const std::string& text) {
  int n = 0;
  for (char c : text) {
    if (c == '\n') ++n;
  }
  return n;
}

/// Runs the CLI through /bin/sh from inside `workdir`, capturing stdout+stderr
/// into out_capture. Returns the process exit code.
int run_cli(const std::string& args, const std::filesystem::path& workdir,
            std::string* out_capture = nullptr, const std::string& env_prefix = "") {
  const std::filesystem::path log = workdir / "cli_output.log";
  const std::string cmd = "cd '" + workdir.string() + "' && " + env_prefix + " '" +
                          FEDABC_CLI_PATH + "' " + args + " >'" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  if (out_capture != nullptr) *out_capture = read_file(log);
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  return -1;
}

std::string small_config(const std::string& output_dir, const std::string& extra = "") {
  return "dataset.kind = blobs\n"
         "dataset.blobs.classes = 3\n"
         "dataset.blobs.per_class = 30\n"
         "dataset.blobs.dim = 4\n"
         "dataset.blobs.spread = 0.6\n"
         "partition.alpha = 0.8\n"
         "partition.num_clients = 3\n"
         "federation.rounds = 2\n"
         "federation.local_epochs = 1\n"
         "federation.participation_rate = 1\n"
         "federation.batch_size = 16\n"
         "federation.lr = 0.05\n"
         "model.hidden_sizes = 8\n"
         "eval.iid_per_class = 6\n"
         "seeds = 1,2\n"
         "output_dir = " +
         output_dir + "\n" + extra;
}

void write_be32(std::ofstream& f, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

void write_idx_images(const std::filesystem::path& path, int count) {
  std::ofstream f(path, std::ios::binary);
  write_be32(f, 2051);
  write_be32(f, static_cast<std::uint32_t>(count));
  write_be32(f, 28);
  write_be32(f, 28);
  std::vector<unsigned char> pixels(784);
  for (int i = 0; i < count; ++i) {
    // A crude class-dependent pattern so the task is learnable in principle.
    for (std::size_t p = 0; p < pixels.size(); ++p) {
      pixels[p] = static_cast<unsigned char>((p + 31u * static_cast<unsigned>(i)) % 251u);
    }
    f.write(reinterpret_cast<const char*>(pixels.data()), 784);
  }
  ASSERT_TRUE(f.good());
}

void write_idx_labels(const std::filesystem::path& path, int count) {
  std::ofstream f(path, std::ios::binary);
  write_be32(f, 2049);
  write_be32(f, static_cast<std::uint32_t>(count));
  for (int i = 0; i < count; ++i) {
    const auto label = static_cast<unsigned char>(i % 10);  // all ten classes present
    f.write(reinterpret_cast<const char*>(&label), 1);
  }
  ASSERT_TRUE(f.good());
}

TEST(CliRun, SucceedsAndWritesArtifacts) {
  TempDir dir("cli_run");
  write_file(dir.path() / "exp.cfg", small_config("run_out"));
  std::string output;
  const int rc = run_cli("run --config exp.cfg", dir.path(), &output);
  EXPECT_EQ(rc, 0) << output;
  EXPECT_NE(output.find("metrics.csv"), std::string::npos) << output;
  for (const char* name : {"metrics.csv", "partition_manifest.txt", "config_resolved.txt",
                           "checkpoint_seed1.bin", "checkpoint_seed2.bin"}) {
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "run_out" / name)) << name;
  }
}

TEST(CliRun, PositionalOverridesApply) {
  TempDir dir("cli_override");
  write_file(dir.path() / "exp.cfg", small_config("run_out"));
  std::string output;
  const int rc = run_cli("run --config exp.cfg federation.rounds=1 seeds=5", dir.path(),
                         &output);
  EXPECT_EQ(rc, 0) << output;
  const std::string csv = read_file(dir.path() / "run_out" / "metrics.csv");
  EXPECT_EQ(count_lines(csv), 1 + 1 * 1 + 1);  // header + 1 seed x 1 round + summary
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "run_out" / "checkpoint_seed5.bin"));
}

TEST(CliRun, ConfigErrorsExitWithCode2) {
  TempDir dir("cli_cfg_err");
  write_file(dir.path() / "bad.cfg", small_config("run_out", "loss.m_p = 1.5\n"));
  std::string output;
  EXPECT_EQ(run_cli("run --config bad.cfg", dir.path(), &output), 2);
  EXPECT_NE(output.find("loss.m_p"), std::string::npos) << output;

  EXPECT_EQ(run_cli("run --config missing.cfg", dir.path(), &output), 2);
  EXPECT_NE(output.find("missing.cfg"), std::string::npos) << output;
}

TEST(CliRun, UsageErrorsExitWithCode2) {
  TempDir dir("cli_usage");
  EXPECT_EQ(run_cli("run", dir.path()), 2);         // missing required --config
  EXPECT_EQ(run_cli("", dir.path()), 2);            // missing subcommand
  EXPECT_EQ(run_cli("plot --config x", dir.path()), 2);
}

TEST(CliRun, RuntimeErrorsExitWithCode3) {
  TempDir dir("cli_rt_err");
  // Valid config, but 3 samples cannot be split across 4 clients.
  write_file(dir.path() / "exp.cfg",
             small_config("run_out",
                          "dataset.blobs.per_class = 1\npartition.num_clients = 4\n"));
  std::string output;
  EXPECT_EQ(run_cli("run --config exp.cfg", dir.path(), &output), 3);
  EXPECT_NE(output.find("seed 1"), std::string::npos) << output;
}

TEST(CliRun, RerunProducesByteIdenticalMetrics) {
  TempDir dir("cli_rerun");
  write_file(dir.path() / "exp.cfg", small_config("unused"));
  ASSERT_EQ(run_cli("run --config exp.cfg output_dir=a", dir.path()), 0);
  ASSERT_EQ(run_cli("run --config exp.cfg output_dir=b", dir.path()), 0);
  EXPECT_EQ(read_file(dir.path() / "a" / "metrics.csv"),
            read_file(dir.path() / "b" / "metrics.csv"));
  EXPECT_EQ(read_file(dir.path() / "a" / "checkpoint_seed1.bin"),
            read_file(dir.path() / "b" / "checkpoint_seed1.bin"));
}

TEST(CliRun, OutputDirEnvVarBeatsFileValue) {
  TempDir dir("cli_env");
  write_file(dir.path() / "exp.cfg", small_config("file_out"));
  const int rc =
      run_cli("run --config exp.cfg", dir.path(), nullptr, "FEDABC_OUTPUT_DIR=env_out");
  EXPECT_EQ(rc, 0);
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "env_out" / "metrics.csv"));
  EXPECT_FALSE(std::filesystem::exists(dir.path() / "file_out"));
}

TEST(CliCompare, PrintsTableAndWritesCsv) {
  TempDir dir("cli_compare");
  write_file(dir.path() / "exp.cfg", small_config("unused"));
  ASSERT_EQ(run_cli("run --config exp.cfg output_dir=a", dir.path()), 0);
  ASSERT_EQ(run_cli("run --config exp.cfg output_dir=b strategy.name=local_only", dir.path()),
            0);
  std::string output;
  const int rc = run_cli("compare a b", dir.path(), &output);
  EXPECT_EQ(rc, 0) << output;
  EXPECT_NE(output.find("fedabc"), std::string::npos) << output;
  EXPECT_NE(output.find("local_only"), std::string::npos) << output;
  EXPECT_NE(output.find("±"), std::string::npos) << output;

  const std::filesystem::path csv_path = dir.path() / "comparison.csv";
  ASSERT_TRUE(std::filesystem::exists(csv_path));
  const std::string csv = read_file(csv_path);
  EXPECT_EQ(count_lines(csv), 3);  // header + one row per run
}

TEST(CliCompare, MissingMetricsExitsWithCode3) {
  TempDir dir("cli_compare_err");
  std::filesystem::create_directories(dir.path() / "empty_run");
  std::string output;
  EXPECT_EQ(run_cli("compare empty_run", dir.path(), &output), 3);
  EXPECT_NE(output.find("metrics.csv"), std::string::npos) << output;
}

TEST(CliAblation, RunsFourArmsAndPrintsSignedDifference) {
  TempDir dir("cli_ablation");
  write_file(dir.path() / "exp.cfg",
             small_config("abl", "seeds = 1\nfederation.rounds = 1\n"));
  std::string output;
  const int rc = run_cli("ablation --config exp.cfg", dir.path(), &output);
  EXPECT_EQ(rc, 0) << output;
  for (const char* arm : {"us0_hm0", "us0_hm1", "us1_hm0", "us1_hm1"}) {
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "abl" / arm / "metrics.csv")) << arm;
    EXPECT_NE(output.find(arm), std::string::npos) << output;
  }
  EXPECT_NE(output.find("full minus both-off"), std::string::npos) << output;
  const std::size_t pos = output.find("full minus both-off (final pfl_acc): ");
  ASSERT_NE(pos, std::string::npos);
  const char sign = output[pos + std::string("full minus both-off (final pfl_acc): ").size()];
  EXPECT_TRUE(sign == '+' || sign == '-') << output;
}

TEST(CliRun, MnistPipelineRunsOnFabricatedIdxFiles) {
  TempDir dir("cli_mnist");
  write_idx_images(dir.path() / "train-images.idx", 120);
  write_idx_labels(dir.path() / "train-labels.idx", 120);
  write_idx_images(dir.path() / "t10k-images.idx", 60);
  write_idx_labels(dir.path() / "t10k-labels.idx", 60);
  write_file(dir.path() / "exp.cfg",
             "dataset.kind = mnist\n"
             "dataset.mnist.train_images = train-images.idx\n"
             "dataset.mnist.train_labels = train-labels.idx\n"
             "dataset.mnist.test_images = t10k-images.idx\n"
             "dataset.mnist.test_labels = t10k-labels.idx\n"
             "partition.alpha = 2\n"
             "partition.num_clients = 2\n"
             "federation.rounds = 1\n"
             "federation.local_epochs = 1\n"
             "federation.batch_size = 16\n"
             "model.hidden_sizes = 8\n"
             "eval.iid_per_class = 3\n"
             "seeds = 1\n"
             "output_dir = mnist_out\n");
  std::string output;
  const int rc = run_cli("run --config exp.cfg", dir.path(), &output);
  EXPECT_EQ(rc, 0) << output;
  const std::string csv = read_file(dir.path() / "mnist_out" / "metrics.csv");
  EXPECT_NE(csv.find("per_class_acc_9"), std::string::npos);  // ten-class header
  EXPECT_EQ(count_lines(csv), 1 + 1 + 1);
}

}  // namespace
