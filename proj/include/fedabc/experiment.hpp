#pragma once

#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fedabc/config.hpp"
#include "fedabc/data.hpp"
#include "fedabc/federation.hpp"

namespace fedabc {

struct SeedRunResult {
  std::uint64_t seed = 0;
  std::vector<MetricsRecord> metrics;  // one record per round
};

/// Everything run_experiment produced, mirroring the files it wrote:
/// csv_text holds the exact bytes of metrics.csv.
struct RunOutput {
  ExperimentConfig config;
  std::vector<SeedRunResult> seed_runs;  // in cfg.seeds order
  std::string csv_text;
};

namespace detail {

inline int experiment_num_classes(const ExperimentConfig& cfg) {
  return cfg.dataset_kind == DatasetKind::kBlobs ? cfg.blobs.classes : 10;
}

inline std::vector<int> experiment_widths(const ExperimentConfig& cfg) {
  std::vector<int> widths;
  widths.push_back(cfg.dataset_kind == DatasetKind::kBlobs ? cfg.blobs.dim : 28 * 28);
  widths.insert(widths.end(), cfg.hidden_sizes.begin(), cfg.hidden_sizes.end());
  widths.push_back(experiment_num_classes(cfg));
  return widths;
}

struct SeedArtifacts {
  SeedRunResult result;
  std::vector<ModelParams> checkpoint_models;  // global model, then one per client
  std::string manifest_section;
};

/// One seed's full pipeline. Every deterministic draw hangs off the run seed
/// through a distinct salt, so seeds are fully independent streams.
inline SeedArtifacts run_seed(const ExperimentConfig& cfg, std::uint64_t seed,
                              const MnistData* mnist) {
  std::vector<ClientDataset> clients;
  IidTestSet iid;
  if (cfg.dataset_kind == DatasetKind::kBlobs) {
    const std::vector<Sample> base =
        make_blobs(cfg.blobs.classes, cfg.blobs.per_class, cfg.blobs.dim, cfg.blobs.spread,
                   derive_seed(seed, kBlobsDataSalt));
    PartitionSpec ps = cfg.partition;
    ps.seed = derive_seed(seed, kPartitionSalt);
    clients = partition_dirichlet(base, ps);
    const std::vector<Sample> pool =
        make_blobs(cfg.blobs.classes, cfg.iid_per_class, cfg.blobs.dim, cfg.blobs.spread,
                   derive_seed(seed, kIidPoolSalt));
    iid = build_iid_test(pool, cfg.iid_per_class, derive_seed(seed, kIidPickSalt));
  } else {
    PartitionSpec ps = cfg.partition;
    ps.seed = derive_seed(seed, kPartitionSalt);
    clients = partition_dirichlet(mnist->train, ps);
    iid = build_iid_test(mnist->test, cfg.iid_per_class, derive_seed(seed, kIidPickSalt));
  }

  FederationConfig fed = cfg.federation;
  fed.seed = seed;
  FederationRun run = run_federation(clients, iid, experiment_widths(cfg), cfg.strategy, fed);

  SeedArtifacts art;
  art.result.seed = seed;
  art.result.metrics = std::move(run.metrics);
  art.checkpoint_models.reserve(1 + run.state.personalized.size());
  art.checkpoint_models.push_back(std::move(run.state.global_params));
  for (ModelParams& p : run.state.personalized) {
    art.checkpoint_models.push_back(std::move(p));
  }
  std::ostringstream manifest;
  write_partition_manifest(manifest, clients, seed, cfg.partition.alpha);
  art.manifest_section = manifest.str();
  return art;
}

inline std::string metrics_csv_header(int num_classes) {
  std::string h = "seed,round,strategy,alpha,pfl_acc,drift,global_pfl_acc,mean_train_loss";
  for (int c = 0; c < num_classes; ++c) h += ",per_class_acc_" + std::to_string(c);
  h += ",pfl_acc_macro";
  return h;
}

inline std::string metrics_csv_row(std::uint64_t seed, const ExperimentConfig& cfg,
                                   const MetricsRecord& rec) {
  std::string row = std::to_string(seed) + "," + std::to_string(rec.round) + "," +
                    cfg.strategy.name() + "," + format_double(cfg.partition.alpha);
  row += "," + format_double(rec.pfl_accuracy);
  row += "," + format_double(rec.drift_score);
  row += "," + format_double(rec.global_model_pfl_accuracy);
  row += "," + format_double(rec.mean_train_loss);
  for (double v : rec.per_class_accuracy) row += "," + format_double(v);
  row += "," + format_double(rec.pfl_accuracy_macro);
  return row;
}

inline std::string mean_std_cell(const std::vector<double>& xs) {
  const auto n = static_cast<double>(xs.size());
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= n;
  double var = 0.0;  // population variance: seeds are the whole population here
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= n;
  return format_double(mean, 9) + "±" + format_double(std::sqrt(var), 9);
}

inline std::string metrics_summary_row(const ExperimentConfig& cfg,
                                       const std::vector<SeedRunResult>& seed_runs) {
  std::vector<const MetricsRecord*> finals;
  finals.reserve(seed_runs.size());
  for (const auto& sr : seed_runs) finals.push_back(&sr.metrics.back());

  const auto cell = [&](auto&& get) {
    std::vector<double> xs;
    xs.reserve(finals.size());
    for (const MetricsRecord* rec : finals) xs.push_back(get(*rec));
    return mean_std_cell(xs);
  };

  std::string row = "summary," + std::to_string(finals.front()->round) + "," +
                    cfg.strategy.name() + "," + format_double(cfg.partition.alpha);
  row += "," + cell([](const MetricsRecord& m) { return m.pfl_accuracy; });
  row += "," + cell([](const MetricsRecord& m) { return m.drift_score; });
  row += "," + cell([](const MetricsRecord& m) { return m.global_model_pfl_accuracy; });
  row += "," + cell([](const MetricsRecord& m) { return m.mean_train_loss; });
  const int num_classes = experiment_num_classes(cfg);
  for (int c = 0; c < num_classes; ++c) {
    row += "," + cell([c](const MetricsRecord& m) {
      return m.per_class_accuracy[static_cast<std::size_t>(c)];
    });
  }
  row += "," + cell([](const MetricsRecord& m) { return m.pfl_accuracy_macro; });
  return row;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) {
    throw std::runtime_error("cannot open " + path.string() + " for writing");
  }
  f << text;
  f.flush();
  if (!f) {
    throw std::runtime_error("write failed for " + path.string());
  }
}

}  // namespace detail

/// Runs the configured experiment over every seed (sequentially, or in
///.parallel_seeds threads with identical output bytes) and writes
/// metrics.csv, partition_manifest.txt, config_resolved.txt, and one
/// checkpoint_seed<seed>.bin per seed into cfg.output_dir.
inline RunOutput run_experiment(const ExperimentConfig& cfg) {
  try {
    cfg.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (cfg.federation.rounds < 1) {
    throw ConfigError("federation.rounds must be >= 1 to run an experiment");
  }

  MnistData mnist;  // loaded once, shared read-only across seeds
  const MnistData* mnist_ptr = nullptr;
  if (cfg.dataset_kind == DatasetKind::kMnist) {
    mnist = load_mnist(cfg.mnist.train_images, cfg.mnist.train_labels, cfg.mnist.test_images,
                       cfg.mnist.test_labels);
    mnist_ptr = &mnist;
  }

  std::vector<detail::SeedArtifacts> artifacts(cfg.seeds.size());
  const auto seed_context = [&](std::size_t i, const char* what) {
    return "seed " + std::to_string(cfg.seeds[i]) + ": " + what;
  };
  if (cfg.parallel_seeds && cfg.seeds.size() > 1) {
    std::vector<std::exception_ptr> errors(cfg.seeds.size());
    std::vector<std::thread> threads;
    threads.reserve(cfg.seeds.size());
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
      threads.emplace_back([&, i] {
        try {
          artifacts[i] = detail::run_seed(cfg, cfg.seeds[i], mnist_ptr);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
    }
    for (auto& t : threads) t.join();
    for (std::size_t i = 0; i < errors.size(); ++i) {
      if (!errors[i]) continue;
      try {
        std::rethrow_exception(errors[i]);
      } catch (const std::exception& e) {
        throw std::runtime_error(seed_context(i, e.what()));
      }
    }
  } else {
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
      try {
        artifacts[i] = detail::run_seed(cfg, cfg.seeds[i], mnist_ptr);
      } catch (const std::exception& e) {
        throw std::runtime_error(seed_context(i, e.what()));
      }
    }
  }

  RunOutput out;
  out.config = cfg;
  out.seed_runs.reserve(artifacts.size());
  for (auto& art : artifacts) out.seed_runs.push_back(std::move(art.result));

  std::string csv = detail::metrics_csv_header(detail::experiment_num_classes(cfg)) + "\n";
  for (const auto& sr : out.seed_runs) {
    for (const MetricsRecord& rec : sr.metrics) {
      csv += detail::metrics_csv_row(sr.seed, cfg, rec) + "\n";
    }
  }
  csv += detail::metrics_summary_row(cfg, out.seed_runs) + "\n";
  out.csv_text = std::move(csv);

  const std::filesystem::path dir(cfg.output_dir);
  std::filesystem::create_directories(dir);
  detail::write_text_file(dir / "metrics.csv", out.csv_text);
  detail::write_text_file(dir / "config_resolved.txt", emit_config(cfg));
  std::string manifest;
  for (const auto& art : artifacts) manifest += art.manifest_section;
  detail::write_text_file(dir / "partition_manifest.txt", manifest);
  for (std::size_t i = 0; i < artifacts.size(); ++i) {
    save_checkpoint(
        (dir / ("checkpoint_seed" + std::to_string(out.seed_runs[i].seed) + ".bin")).string(),
        artifacts[i].checkpoint_models);
  }
  return out;
}

struct AblationArm {
  bool undersampling = false;
  bool hard_mining = false;
  RunOutput output;
};

struct AblationOutput {
  std::vector<AblationArm> arms;  // us0_hm0, us0_hm1, us1_hm0, us1_hm1
  double full_minus_off = 0.0;    // final PFL seed-mean: full arm minus both-off arm
};

/// The 2x2 toggle grid (under-sampling x hard mining), one run_experiment per
/// arm in an us<u>_hm<h> subdirectory of cfg.output_dir. The strategy is
/// forced to FedABC since the toggles only exist there.
inline AblationOutput run_ablation(const ExperimentConfig& cfg) {
  AblationOutput out;
  const std::filesystem::path parent(cfg.output_dir);
  for (int us = 0; us <= 1; ++us) {
    for (int hm = 0; hm <= 1; ++hm) {
      ExperimentConfig arm_cfg = cfg;
      arm_cfg.strategy.kind = StrategyKind::kFedAbc;
      arm_cfg.strategy.loss.enable_undersampling = us == 1;
      arm_cfg.strategy.loss.enable_hard_mining = hm == 1;
      arm_cfg.output_dir =
          (parent / ("us" + std::to_string(us) + "_hm" + std::to_string(hm))).string();
      AblationArm arm;
      arm.undersampling = us == 1;
      arm.hard_mining = hm == 1;
      arm.output = run_experiment(arm_cfg);
      out.arms.push_back(std::move(arm));
    }
  }
  const auto final_mean = [](const RunOutput& run) {
    double sum = 0.0;
    for (const auto& sr : run.seed_runs) sum += sr.metrics.back().pfl_accuracy;
    return sum / static_cast<double>(run.seed_runs.size());
  };
  out.full_minus_off = final_mean(out.arms[3].output) - final_mean(out.arms[0].output);
  return out;
}

/// One stored run, reduced to its final-round cross-seed statistics
/// (population stddev, like the CSV summary row).
struct ComparisonRow {
  std::string dir;
  std::string strategy;
  double alpha = 0.0;
  int num_seeds = 0;
  int final_round = 0;
  double pfl_mean = 0.0;
  double pfl_std = 0.0;
  double drift_mean = 0.0;
  double drift_std = 0.0;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
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

inline std::size_t column_index(const std::vector<std::string>& header, const std::string& name,
                                const std::string& path) {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw std::runtime_error(path + ": line 1: missing column " + name);
}

}  // namespace detail

/// Recomputes each run's final-round statistics from its metrics.csv data
/// rows (the summary row is ignored, not trusted).
inline std::vector<ComparisonRow> compare_runs(const std::vector<std::string>& dirs) {
  std::vector<ComparisonRow> rows;
  rows.reserve(dirs.size());
  for (const std::string& dir : dirs) {
    const std::string path = (std::filesystem::path(dir) / "metrics.csv").string();
    std::ifstream f(path);
    if (!f) {
      throw std::runtime_error("compare: cannot open " + path);
    }
    std::string line;
    if (!std::getline(f, line)) {
      throw std::runtime_error(path + ": line 1: empty file");
    }
    const std::vector<std::string> header = detail::split_csv_line(line);
    const std::size_t seed_col = detail::column_index(header, "seed", path);
    const std::size_t round_col = detail::column_index(header, "round", path);
    const std::size_t strategy_col = detail::column_index(header, "strategy", path);
    const std::size_t alpha_col = detail::column_index(header, "alpha", path);
    const std::size_t pfl_col = detail::column_index(header, "pfl_acc", path);
    const std::size_t drift_col = detail::column_index(header, "drift", path);

    struct Final {
      int round = -1;
      double pfl = 0.0;
      double drift = 0.0;
    };
    std::map<std::string, Final> finals;  // per seed, keep the highest round
    ComparisonRow row;
    row.dir = dir;

    int lineno = 1;
    while (std::getline(f, line)) {
      ++lineno;
      if (detail::trim(line).empty()) continue;
      const std::vector<std::string> cells = detail::split_csv_line(line);
      if (cells.size() != header.size()) {
        throw std::runtime_error(path + ": line " + std::to_string(lineno) + ": expected " +
                                 std::to_string(header.size()) + " cells, got " +
                                 std::to_string(cells.size()));
      }
      if (cells[seed_col] == "summary") continue;
      const auto number = [&](std::size_t col) {
        double v = 0.0;
        std::size_t pos = 0;
        try {
          v = std::stod(cells[col], &pos);
        } catch (const std::exception&) {
          pos = std::string::npos;
        }
        if (pos != cells[col].size()) {
          throw std::runtime_error(path + ": line " + std::to_string(lineno) + ": cell \"" +
                                   cells[col] + "\" in column " + header[col] +
                                   " is not a number");
        }
        return v;
      };
      const int round = static_cast<int>(number(round_col));
      row.strategy = cells[strategy_col];
      row.alpha = number(alpha_col);
      Final& slot = finals[cells[seed_col]];
      if (round >= slot.round) {
        slot = {round, number(pfl_col), number(drift_col)};
      }
    }
    if (finals.empty()) {
      throw std::runtime_error(path + ": no data rows");
    }

    row.num_seeds = static_cast<int>(finals.size());
    std::vector<double> pfl, drift;
    for (const auto& [seed, fin] : finals) {
      row.final_round = std::max(row.final_round, fin.round);
      pfl.push_back(fin.pfl);
      drift.push_back(fin.drift);
    }
    const auto mean_of = [](const std::vector<double>& xs) {
      double sum = 0.0;
      for (double x : xs) sum += x;
      return sum / static_cast<double>(xs.size());
    };
    const auto std_of = [](const std::vector<double>& xs, double mean) {
      double var = 0.0;
      for (double x : xs) var += (x - mean) * (x - mean);
      return std::sqrt(var / static_cast<double>(xs.size()));
    };
    row.pfl_mean = mean_of(pfl);
    row.pfl_std = std_of(pfl, row.pfl_mean);
    row.drift_mean = mean_of(drift);
    row.drift_std = std_of(drift, row.drift_mean);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string comparison_csv(const std::vector<ComparisonRow>& rows) {
  std::string out =
      "dir,strategy,alpha,seeds,final_round,pfl_acc_mean,pfl_acc_std,drift_mean,drift_std\n";
  for (const ComparisonRow& r : rows) {
    out += r.dir + "," + r.strategy + "," + format_double(r.alpha) + "," +
           std::to_string(r.num_seeds) + "," + std::to_string(r.final_round) + "," +
           format_double(r.pfl_mean, 9) + "," + format_double(r.pfl_std, 9) + "," +
           format_double(r.drift_mean, 9) + "," + format_double(r.drift_std, 9) + "\n";
  }
  return out;
}

inline std::string comparison_table(const std::vector<ComparisonRow>& rows) {
  std::size_t dir_width = 3;
  for (const ComparisonRow& r : rows) dir_width = std::max(dir_width, r.dir.size());
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-*s  %-16s %7s %7s  %-15s  %-15s\n",
                static_cast<int>(dir_width), "run", "strategy", "alpha", "seeds", "pfl_acc",
                "drift");
  out << buf;
  for (const ComparisonRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-*s  %-16s %7.3g %7d  %.4f±%.4f   %.4f±%.4f\n",
                  static_cast<int>(dir_width), r.dir.c_str(), r.strategy.c_str(), r.alpha,
                  r.num_seeds, r.pfl_mean, r.pfl_std, r.drift_mean, r.drift_std);
    out << buf;
  }
  return out.str();
}

}  // namespace fedabc
