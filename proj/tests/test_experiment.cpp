#include "fedabc/experiment.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "testing_util.hpp"

namespace {

using namespace fedabc;
using fedabc::test::TempDir;
using fedabc::test::expect_throws_with;

ExperimentConfig small_cfg(const std::string& out_dir, const std::string& extra = "",
                           const std::vector<std::string>& overrides = {}) {
  const std::string text =
      "dataset.kind = blobs\n"
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
      "seeds = 1,2\n" +
      extra;
  std::vector<std::string> all = {"output_dir=" + out_dir};
  all.insert(all.end(), overrides.begin(), overrides.end());
  return parse_config_text(text, all);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  EXPECT_TRUE(f.good()) << "cannot open " << path;
  std::ostringstream buf;
  buf << f.rdbuf();
  return buf.str();
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t begin = 0;
  while (true) {
    const std::size_t comma = line.find(',', begin);
    cells.push_back(line.substr(begin, comma - begin));
    if (comma == std::string::npos) break;
    begin = comma + 1;
  }
  return cells;
}

std::vector<double> flatten(const ModelParams& p) {
  std::vector<double> out;
  for (const auto& layer : p.layers) {
    out.insert(out.end(), layer.weight.data(), layer.weight.data() + layer.weight.size());
    out.insert(out.end(), layer.bias.begin(), layer.bias.end());
  }
  return out;
}

double final_pfl_mean(const RunOutput& out) {
  double sum = 0.0;
  for (const auto& sr : out.seed_runs) sum += sr.metrics.back().pfl_accuracy;
  return sum / static_cast<double>(out.seed_runs.size());
}

TEST(RunExperiment, WritesAllArtifacts) {
  TempDir dir("exp_artifacts");
  const std::string out_dir = (dir.path() / "nested" / "run").string();
  const RunOutput out = run_experiment(small_cfg(out_dir));
  EXPECT_EQ(out.seed_runs.size(), 2u);
  for (const char* name : {"metrics.csv", "partition_manifest.txt", "config_resolved.txt",
                           "checkpoint_seed1.bin", "checkpoint_seed2.bin"}) {
    EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(out_dir) / name))
        << "missing " << name;
  }
}

TEST(RunExperiment, CsvHeaderRowCountAndFixedColumnOrder) {
  TempDir dir("exp_csv");
  const std::string out_dir = (dir.path() / "run").string();
  const ExperimentConfig cfg = small_cfg(out_dir);
  const RunOutput out = run_experiment(cfg);

  const std::string csv = read_file(std::filesystem::path(out_dir) / "metrics.csv");
  EXPECT_EQ(csv, out.csv_text);
  const std::vector<std::string> lines = split_lines(csv);
  // header + seeds*rounds data rows + summary
  ASSERT_EQ(lines.size(), 1u + 2u * 2u + 1u);
  EXPECT_EQ(lines[0],
            "seed,round,strategy,alpha,pfl_acc,drift,global_pfl_acc,mean_train_loss,"
            "per_class_acc_0,per_class_acc_1,per_class_acc_2,pfl_acc_macro");

  const std::vector<std::vector<std::string>> want_prefix = {
      {"1", "1"}, {"1", "2"}, {"2", "1"}, {"2", "2"}};
  for (std::size_t i = 0; i < want_prefix.size(); ++i) {
    const std::vector<std::string> cells = split_csv(lines[1 + i]);
    ASSERT_EQ(cells.size(), 12u) << lines[1 + i];
    EXPECT_EQ(cells[0], want_prefix[i][0]);
    EXPECT_EQ(cells[1], want_prefix[i][1]);
    EXPECT_EQ(cells[2], "fedabc");
    EXPECT_EQ(cells[3], format_double(0.8));
  }
  EXPECT_EQ(split_csv(lines.back())[0], "summary");
}

TEST(RunExperiment, CsvCellsRoundTripReturnedMetricsBitExact) {
  TempDir dir("exp_cells");
  const std::string out_dir = (dir.path() / "run").string();
  const RunOutput out = run_experiment(small_cfg(out_dir));

  const std::vector<std::string> lines = split_lines(out.csv_text);
  // seed 2, round 2 lives on the last data row.
  const std::vector<std::string> cells = split_csv(lines[4]);
  const MetricsRecord& rec = out.seed_runs[1].metrics[1];
  EXPECT_EQ(std::stod(cells[4]), rec.pfl_accuracy);
  EXPECT_EQ(std::stod(cells[5]), rec.drift_score);
  EXPECT_EQ(std::stod(cells[6]), rec.global_model_pfl_accuracy);
  EXPECT_EQ(std::stod(cells[7]), rec.mean_train_loss);
  EXPECT_EQ(std::stod(cells[8]), rec.per_class_accuracy.at(0));
  EXPECT_EQ(std::stod(cells[11]), rec.pfl_accuracy_macro);
}

TEST(RunExperiment, MatchesDirectPipelineOracleForOneSeed) {
  TempDir dir("exp_oracle");
  const std::string out_dir = (dir.path() / "run").string();
  const ExperimentConfig cfg = small_cfg(out_dir);
  const RunOutput out = run_experiment(cfg);

  const std::uint64_t seed = 1;
  const std::vector<Sample> base =
      make_blobs(3, 30, 4, 0.6, derive_seed(seed, kBlobsDataSalt));
  PartitionSpec ps = cfg.partition;
  ps.seed = derive_seed(seed, kPartitionSalt);
  const std::vector<ClientDataset> clients = partition_dirichlet(base, ps);
  const std::vector<Sample> pool =
      make_blobs(3, cfg.iid_per_class, 4, 0.6, derive_seed(seed, kIidPoolSalt));
  const IidTestSet iid =
      build_iid_test(pool, cfg.iid_per_class, derive_seed(seed, kIidPickSalt));
  FederationConfig fed = cfg.federation;
  fed.seed = seed;
  const FederationRun oracle =
      run_federation(clients, iid, {4, 8, 3}, cfg.strategy, fed);

  ASSERT_EQ(out.seed_runs[0].seed, seed);
  ASSERT_EQ(out.seed_runs[0].metrics.size(), oracle.metrics.size());
  for (std::size_t r = 0; r < oracle.metrics.size(); ++r) {
    EXPECT_EQ(out.seed_runs[0].metrics[r].pfl_accuracy, oracle.metrics[r].pfl_accuracy);
    EXPECT_EQ(out.seed_runs[0].metrics[r].drift_score, oracle.metrics[r].drift_score);
    EXPECT_EQ(out.seed_runs[0].metrics[r].mean_train_loss,
              oracle.metrics[r].mean_train_loss);
  }

  const std::vector<ModelParams> models =
      load_checkpoint((std::filesystem::path(out_dir) / "checkpoint_seed1.bin").string());
  ASSERT_EQ(models.size(), 1u + 3u);  // global first, then one model per client
  EXPECT_EQ(flatten(models[0]), flatten(oracle.state.global_params));
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(flatten(models[1 + i]), flatten(oracle.state.personalized[i]));
  }
}

TEST(RunExperiment, SummaryRowIsMeanPlusMinusPopulationStddev) {
  TempDir dir("exp_summary");
  const std::string out_dir = (dir.path() / "run").string();
  const RunOutput out = run_experiment(small_cfg(out_dir));

  std::vector<double> finals;
  for (const auto& sr : out.seed_runs) finals.push_back(sr.metrics.back().pfl_accuracy);
  const double mean = (finals[0] + finals[1]) / 2.0;
  double var = 0.0;
  for (double v : finals) var += (v - mean) * (v - mean);
  const double stddev = std::sqrt(var / 2.0);

  const std::vector<std::string> lines = split_lines(out.csv_text);
  const std::vector<std::string> cells = split_csv(lines.back());
  ASSERT_EQ(cells.size(), 12u);
  EXPECT_EQ(cells[0], "summary");
  EXPECT_EQ(cells[1], "2");
  EXPECT_EQ(cells[2], "fedabc");
  EXPECT_EQ(cells[4], format_double(mean, 9) + "±" + format_double(stddev, 9));
}

TEST(RunExperiment, RerunIsByteIdenticalIncludingCheckpoints) {
  TempDir dir("exp_rerun");
  const std::string out_a = (dir.path() / "a").string();
  const std::string out_b = (dir.path() / "b").string();
  run_experiment(small_cfg(out_a));
  run_experiment(small_cfg(out_b));
  EXPECT_EQ(read_file(std::filesystem::path(out_a) / "metrics.csv"),
            read_file(std::filesystem::path(out_b) / "metrics.csv"));
  EXPECT_EQ(read_file(std::filesystem::path(out_a) / "checkpoint_seed2.bin"),
            read_file(std::filesystem::path(out_b) / "checkpoint_seed2.bin"));
  EXPECT_EQ(read_file(std::filesystem::path(out_a) / "partition_manifest.txt"),
            read_file(std::filesystem::path(out_b) / "partition_manifest.txt"));
}

TEST(RunExperiment, ParallelSeedsProduceIdenticalBytes) {
  TempDir dir("exp_parallel");
  const std::string out_seq = (dir.path() / "seq").string();
  const std::string out_par = (dir.path() / "par").string();
  run_experiment(small_cfg(out_seq));
  run_experiment(small_cfg(out_par, "parallel_seeds = true\n"));
  EXPECT_EQ(read_file(std::filesystem::path(out_seq) / "metrics.csv"),
            read_file(std::filesystem::path(out_par) / "metrics.csv"));
  EXPECT_EQ(read_file(std::filesystem::path(out_seq) / "checkpoint_seed1.bin"),
            read_file(std::filesystem::path(out_par) / "checkpoint_seed1.bin"));
}

TEST(RunExperiment, ManifestCoversEverySeedAndClient) {
  TempDir dir("exp_manifest");
  const std::string out_dir = (dir.path() / "run").string();
  run_experiment(small_cfg(out_dir));
  const std::string manifest =
      read_file(std::filesystem::path(out_dir) / "partition_manifest.txt");
  EXPECT_NE(manifest.find("seed=1"), std::string::npos);
  EXPECT_NE(manifest.find("seed=2"), std::string::npos);
  EXPECT_NE(manifest.find("alpha=" + format_double(0.8)), std::string::npos);
  int client_lines = 0;
  for (const std::string& line : split_lines(manifest)) {
    if (line.rfind("client=", 0) == 0) ++client_lines;
  }
  EXPECT_EQ(client_lines, 2 * 3);  // seeds x clients
}

TEST(RunExperiment, ResolvedConfigReparsesToTheSameConfig) {
  TempDir dir("exp_resolved_cfg");
  const std::string out_dir = (dir.path() / "run").string();
  const ExperimentConfig cfg = small_cfg(out_dir);
  run_experiment(cfg);
  const ExperimentConfig back = parse_config_text(
      read_file(std::filesystem::path(out_dir) / "config_resolved.txt"));
  EXPECT_EQ(back, cfg);
}

TEST(RunExperiment, PipelineErrorsCarrySeedContext) {
  TempDir dir("exp_err");
  // 3 samples in total but 4 clients: the partition step must fail, and the
  // experiment should say which seed it was working on.
  const ExperimentConfig cfg =
      small_cfg((dir.path() / "run").string(),
                "dataset.blobs.per_class = 1\npartition.num_clients = 4\n");
  expect_throws_with([&] { run_experiment(cfg); }, "seed 1");
}

TEST(RunExperiment, ZeroRoundsIsRejectedUpFront) {
  TempDir dir("exp_zero");
  const ExperimentConfig cfg =
      small_cfg((dir.path() / "run").string(), "federation.rounds = 0\n");
  EXPECT_THROW(run_experiment(cfg), ConfigError);
  expect_throws_with([&] { run_experiment(cfg); }, "federation.rounds");
}

TEST(Ablation, RunsTheFourToggleArmsIntoSubdirectories) {
  TempDir dir("abl_arms");
  const std::string out_dir = (dir.path() / "abl").string();
  const AblationOutput out = run_ablation(small_cfg(out_dir, "seeds = 1\n"));
  ASSERT_EQ(out.arms.size(), 4u);
  EXPECT_FALSE(out.arms[0].undersampling);
  EXPECT_FALSE(out.arms[0].hard_mining);
  EXPECT_TRUE(out.arms[3].undersampling);
  EXPECT_TRUE(out.arms[3].hard_mining);
  for (const char* arm : {"us0_hm0", "us0_hm1", "us1_hm0", "us1_hm1"}) {
    EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(out_dir) / arm / "metrics.csv"))
        << arm;
  }
  const std::string resolved =
      read_file(std::filesystem::path(out_dir) / "us0_hm1" / "config_resolved.txt");
  EXPECT_NE(resolved.find("strategy.name = fedabc"), std::string::npos);
  EXPECT_NE(resolved.find("loss.enable_undersampling = false"), std::string::npos);
  EXPECT_NE(resolved.find("loss.enable_hard_mining = true"), std::string::npos);
}

TEST(Ablation, SignedDifferenceIsFullArmMinusBothOff) {
  TempDir dir("abl_diff");
  const AblationOutput out = run_ablation(small_cfg((dir.path() / "abl").string(),
                                                    "seeds = 1\n"));
  EXPECT_DOUBLE_EQ(out.full_minus_off,
                   final_pfl_mean(out.arms[3].output) - final_pfl_mean(out.arms[0].output));
}

TEST(Ablation, ForcesFedAbcEvenIfConfigSaysOtherwise) {
  TempDir dir("abl_force");
  const AblationOutput out = run_ablation(small_cfg(
      (dir.path() / "abl").string(), "seeds = 1\nstrategy.name = fedavg_softmax\n"));
  for (const auto& arm : out.arms) {
    EXPECT_EQ(arm.output.config.strategy.kind, StrategyKind::kFedAbc);
  }
}

TEST(CompareRuns, SingleRunRowMatchesRecomputedSeedStatistics) {
  TempDir dir("cmp_single");
  const std::string out_dir = (dir.path() / "run").string();
  const RunOutput out = run_experiment(small_cfg(out_dir));

  const std::vector<ComparisonRow> rows = compare_runs({out_dir});
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].dir, out_dir);
  EXPECT_EQ(rows[0].strategy, "fedabc");
  EXPECT_DOUBLE_EQ(rows[0].alpha, 0.8);
  EXPECT_EQ(rows[0].num_seeds, 2);
  EXPECT_EQ(rows[0].final_round, 2);

  std::vector<double> pfl, drift;
  for (const auto& sr : out.seed_runs) {
    pfl.push_back(sr.metrics.back().pfl_accuracy);
    drift.push_back(sr.metrics.back().drift_score);
  }
  const double pfl_mean = (pfl[0] + pfl[1]) / 2.0;
  const double drift_mean = (drift[0] + drift[1]) / 2.0;
  EXPECT_DOUBLE_EQ(rows[0].pfl_mean, pfl_mean);
  EXPECT_DOUBLE_EQ(rows[0].drift_mean, drift_mean);
  double var = 0.0;
  for (double v : pfl) var += (v - pfl_mean) * (v - pfl_mean);
  EXPECT_DOUBLE_EQ(rows[0].pfl_std, std::sqrt(var / 2.0));
}

TEST(CompareRuns, IdenticalRunsGiveIdenticalRowsAndCsvHasOneRowPerRun) {
  TempDir dir("cmp_two");
  const std::string out_a = (dir.path() / "a").string();
  const std::string out_b = (dir.path() / "b").string();
  run_experiment(small_cfg(out_a));
  run_experiment(small_cfg(out_b));

  const std::vector<ComparisonRow> rows = compare_runs({out_a, out_b});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].pfl_mean, rows[1].pfl_mean);
  EXPECT_EQ(rows[0].drift_std, rows[1].drift_std);
  EXPECT_EQ(rows[0].strategy, rows[1].strategy);

  const std::string csv = comparison_csv(rows);
  const std::vector<std::string> lines = split_lines(csv);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0].rfind("dir,strategy,alpha,", 0), 0u) << lines[0];
  EXPECT_NE(lines[1].find(out_a), std::string::npos);
  EXPECT_NE(lines[2].find(out_b), std::string::npos);

  const std::string table = comparison_table(rows);
  EXPECT_NE(table.find("fedabc"), std::string::npos);
  EXPECT_NE(table.find("±"), std::string::npos);
}

TEST(CompareRuns, MalformedCsvNamesFileAndLine) {
  TempDir dir("cmp_bad");
  const std::filesystem::path bad = dir.path() / "bad";
  std::filesystem::create_directories(bad);
  {
    std::ofstream f(bad / "metrics.csv");
    f << "seed,round,strategy,alpha,pfl_acc,drift,global_pfl_acc,mean_train_loss,"
         "per_class_acc_0,pfl_acc_macro\n";
    f << "1,1,fedabc,0.5,0.9,0.8,0.9,0.1,0.9,0.9\n";
    f << "1,2,fedabc,0.5,0.9\n";  // wrong cell count
  }
  expect_throws_with([&] { compare_runs({bad.string()}); }, "metrics.csv");
  expect_throws_with([&] { compare_runs({bad.string()}); }, "line 3");

  const std::filesystem::path empty_dir = dir.path() / "no_csv";
  std::filesystem::create_directories(empty_dir);
  expect_throws_with([&] { compare_runs({empty_dir.string()}); }, empty_dir.string());
}

TEST(CompareRuns, NonNumericMetricCellNamesItsLine) {
  TempDir dir("cmp_nan");
  const std::filesystem::path bad = dir.path() / "bad";
  std::filesystem::create_directories(bad);
  {
    std::ofstream f(bad / "metrics.csv");
    f << "seed,round,strategy,alpha,pfl_acc,drift,global_pfl_acc,mean_train_loss,"
         "per_class_acc_0,pfl_acc_macro\n";
    f << "1,1,fedabc,0.5,high,0.8,0.9,0.1,0.9,0.9\n";
  }
  expect_throws_with([&] { compare_runs({bad.string()}); }, "line 2");
}

}  // namespace
