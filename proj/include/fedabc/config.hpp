#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fedabc/common.hpp"
#include "fedabc/data.hpp"
#include "fedabc/federation.hpp"

namespace fedabc {

enum class DatasetKind { kBlobs, kMnist };

struct BlobsConfig {
  int classes = 10;
  int per_class = 60;
  int dim = 16;
  double spread = 1.0;

  friend bool operator==(const BlobsConfig&, const BlobsConfig&) = default;
};

struct MnistPaths {
  std::string train_images;
  std::string train_labels;
  std::string test_images;
  std::string test_labels;

  friend bool operator==(const MnistPaths&, const MnistPaths&) = default;
};

/// Fully resolved experiment description. Produced by parse_config*, which
/// fills dataset-dependent defaults (hidden layer sizes, IID test size), so a
/// parsed config always has every field populated. Only the active dataset
/// block is validated; the inactive one is carried through untouched.
struct ExperimentConfig {
  DatasetKind dataset_kind = DatasetKind::kBlobs;
  BlobsConfig blobs;
  MnistPaths mnist;
  PartitionSpec partition{.num_clients = 8};
  FederationConfig federation;
  Strategy strategy;
  std::vector<int> hidden_sizes;  // dataset default: mnist 260,200 / blobs 32
  int iid_per_class = 0;          // dataset default: mnist 100 / blobs 20
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "out";
  bool parallel_seeds = false;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;

  void validate() const {
    if (dataset_kind == DatasetKind::kMnist) {
      const auto require = [](const std::string& value, const char* key) {
        if (value.empty()) {
          throw std::invalid_argument(std::string(key) +
                                      " is required when dataset.kind = mnist");
        }
      };
      require(mnist.train_images, "dataset.mnist.train_images");
      require(mnist.train_labels, "dataset.mnist.train_labels");
      require(mnist.test_images, "dataset.mnist.test_images");
      require(mnist.test_labels, "dataset.mnist.test_labels");
    } else {
      if (blobs.classes < 2) {
        throw std::invalid_argument("dataset.blobs.classes must be >= 2");
      }
      if (blobs.per_class < 1) {
        throw std::invalid_argument("dataset.blobs.per_class must be >= 1");
      }
      if (blobs.dim < 1) {
        throw std::invalid_argument("dataset.blobs.dim must be >= 1");
      }
      if (!(blobs.spread >= 0.0)) {
        throw std::invalid_argument("dataset.blobs.spread must be >= 0");
      }
    }
    partition.validate();
    federation.validate();
    strategy.validate();
    if (hidden_sizes.empty()) {
      throw std::invalid_argument("model.hidden_sizes must list at least one layer size");
    }
    for (int h : hidden_sizes) {
      if (h < 1) {
        throw std::invalid_argument("model.hidden_sizes entries must be >= 1");
      }
    }
    if (iid_per_class < 1) {
      throw std::invalid_argument("eval.iid_per_class must be >= 1");
    }
    if (seeds.empty()) {
      throw std::invalid_argument("seeds must list at least one seed");
    }
    std::set<std::uint64_t> seen;
    for (std::uint64_t s : seeds) {
      if (!seen.insert(s).second) {
        throw std::invalid_argument("seeds: duplicate seed " + std::to_string(s));
      }
    }
    if (output_dir.empty()) {
      throw std::invalid_argument("output_dir must not be empty");
    }
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] inline void bad_value(const std::string& key, const std::string& expected,
                                   const std::string& value) {
  throw ConfigError(key + ": expected " + expected + ", got \"" + value + "\"");
}

inline int parse_int(const std::string& key, const std::string& value) {
  long long v = 0;
  std::size_t pos = 0;
  try {
    v = std::stoll(value, &pos);
  } catch (const std::exception&) {
    bad_value(key, "an integer", value);
  }
  if (pos != value.size() || v < std::numeric_limits<int>::min() ||
      v > std::numeric_limits<int>::max()) {
    bad_value(key, "an integer", value);
  }
  return static_cast<int>(v);
}

inline double parse_double(const std::string& key, const std::string& value) {
  double v = 0.0;
  std::size_t pos = 0;
  try {
    v = std::stod(value, &pos);
  } catch (const std::exception&) {
    bad_value(key, "a number", value);
  }
  if (pos != value.size() || !std::isfinite(v)) {
    bad_value(key, "a number", value);
  }
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true") return true;
  if (value == "false") return false;
  bad_value(key, "true or false", value);
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  if (value.empty() || value[0] == '-') {
    bad_value(key, "a non-negative integer", value);
  }
  std::uint64_t v = 0;
  std::size_t pos = 0;
  try {
    v = std::stoull(value, &pos);
  } catch (const std::exception&) {
    bad_value(key, "a non-negative integer", value);
  }
  if (pos != value.size()) {
    bad_value(key, "a non-negative integer", value);
  }
  return v;
}

inline std::vector<std::string> split_list(const std::string& key, const std::string& value) {
  if (trim(value).empty()) {
    bad_value(key, "a comma-separated list", value);
  }
  std::vector<std::string> items;
  std::size_t begin = 0;
  while (true) {
    const std::size_t comma = value.find(',', begin);
    const std::string item = trim(value.substr(begin, comma - begin));
    if (item.empty()) {
      bad_value(key, "a comma-separated list", value);
    }
    items.push_back(item);
    if (comma == std::string::npos) break;
    begin = comma + 1;
  }
  return items;
}

struct SetFlags {
  bool iid_per_class = false;
};

inline void apply_kv(ExperimentConfig& cfg, SetFlags& flags, const std::string& key,
                     const std::string& value) {
  if (key == "dataset.kind") {
    if (value == "blobs") {
      cfg.dataset_kind = DatasetKind::kBlobs;
    } else if (value == "mnist") {
      cfg.dataset_kind = DatasetKind::kMnist;
    } else {
      bad_value(key, "\"blobs\" or \"mnist\"", value);
    }
  } else if (key == "dataset.blobs.classes") {
    cfg.blobs.classes = parse_int(key, value);
  } else if (key == "dataset.blobs.per_class") {
    cfg.blobs.per_class = parse_int(key, value);
  } else if (key == "dataset.blobs.dim") {
    cfg.blobs.dim = parse_int(key, value);
  } else if (key == "dataset.blobs.spread") {
    cfg.blobs.spread = parse_double(key, value);
  } else if (key == "dataset.mnist.train_images") {
    cfg.mnist.train_images = value;
  } else if (key == "dataset.mnist.train_labels") {
    cfg.mnist.train_labels = value;
  } else if (key == "dataset.mnist.test_images") {
    cfg.mnist.test_images = value;
  } else if (key == "dataset.mnist.test_labels") {
    cfg.mnist.test_labels = value;
  } else if (key == "partition.alpha") {
    cfg.partition.alpha = parse_double(key, value);
  } else if (key == "partition.num_clients") {
    cfg.partition.num_clients = parse_int(key, value);
  } else if (key == "partition.test_fraction") {
    cfg.partition.test_fraction = parse_double(key, value);
  } else if (key == "federation.rounds") {
    cfg.federation.rounds = parse_int(key, value);
  } else if (key == "federation.local_epochs") {
    cfg.federation.local_epochs = parse_int(key, value);
  } else if (key == "federation.participation_rate") {
    cfg.federation.participation_rate = parse_double(key, value);
  } else if (key == "federation.batch_size") {
    cfg.federation.batch_size = parse_int(key, value);
  } else if (key == "federation.lr") {
    cfg.federation.learning_rate = parse_double(key, value);
  } else if (key == "federation.momentum") {
    cfg.federation.momentum = parse_double(key, value);
  } else if (key == "federation.weight_decay") {
    cfg.federation.weight_decay = parse_double(key, value);
  } else if (key == "federation.uniform_aggregation") {
    cfg.federation.uniform_aggregation = parse_bool(key, value);
  } else if (key == "federation.parallel_clients") {
    cfg.federation.parallel_clients = parse_bool(key, value);
  } else if (key == "strategy.name") {
    try {
      cfg.strategy.kind = parse_strategy_kind(value);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  } else if (key == "strategy.fedprox_mu") {
    cfg.strategy.prox_mu = parse_double(key, value);
  } else if (key == "loss.m_p") {
    cfg.strategy.loss.positive_keep_threshold = parse_double(key, value);
  } else if (key == "loss.m_n") {
    cfg.strategy.loss.negative_keep_threshold = parse_double(key, value);
  } else if (key == "loss.m_nn") {
    cfg.strategy.loss.absent_negative_keep_threshold = parse_double(key, value);
  } else if (key == "loss.focal_exponent") {
    cfg.strategy.loss.focal_exponent = parse_double(key, value);
  } else if (key == "loss.enable_undersampling") {
    cfg.strategy.loss.enable_undersampling = parse_bool(key, value);
  } else if (key == "loss.enable_hard_mining") {
    cfg.strategy.loss.enable_hard_mining = parse_bool(key, value);
  } else if (key == "model.hidden_sizes") {
    cfg.hidden_sizes.clear();
    for (const auto& item : split_list(key, value)) {
      cfg.hidden_sizes.push_back(parse_int(key, item));
    }
  } else if (key == "eval.iid_per_class") {
    cfg.iid_per_class = parse_int(key, value);
    flags.iid_per_class = true;
  } else if (key == "seeds") {
    cfg.seeds.clear();
    for (const auto& item : split_list(key, value)) {
      cfg.seeds.push_back(parse_u64(key, item));
    }
  } else if (key == "output_dir") {
    cfg.output_dir = value;
  } else if (key == "parallel_seeds") {
    cfg.parallel_seeds = parse_bool(key, value);
  } else {
    throw ConfigError("unknown key \"" + key + "\"");
  }
}

inline void apply_overrides(ExperimentConfig& cfg, SetFlags& flags,
                            const std::vector<std::string>& overrides) {
  for (const std::string& entry : overrides) {
    const std::size_t eq = entry.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("override \"" + entry + "\": expected key=value");
    }
    const std::string key = trim(entry.substr(0, eq));
    const std::string value = trim(entry.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("override \"" + entry + "\": expected key=value");
    }
    try {
      apply_kv(cfg, flags, key, value);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError("override \"" + entry + "\": " + e.what());
    }
  }
}

}  // namespace detail

/// Parses the flat dotted-key = value schema, applies `overrides` on top
/// (each "key=value"), fills dataset-dependent defaults, and validates.
/// Every failure is reported as ConfigError naming the offending key.
inline ExperimentConfig parse_config_text(const std::string& text,
                                          const std::vector<std::string>& overrides = {}) {
  ExperimentConfig cfg;
  detail::SetFlags flags;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::size_t eq = t.find('=');
    const std::string key = eq == std::string::npos ? "" : detail::trim(t.substr(0, eq));
    if (key.empty()) {
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key = value, got \"" + t + "\"");
    }
    try {
      detail::apply_kv(cfg, flags, key, detail::trim(t.substr(eq + 1)));
    } catch (const std::exception& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  detail::apply_overrides(cfg, flags, overrides);

  if (cfg.hidden_sizes.empty()) {
    cfg.hidden_sizes = cfg.dataset_kind == DatasetKind::kMnist ? std::vector<int>{260, 200}
                                                               : std::vector<int>{32};
  }
  if (!flags.iid_per_class) {
    cfg.iid_per_class = cfg.dataset_kind == DatasetKind::kMnist ? 100 : 20;
  }
  try {
    cfg.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

/// File-based variant. The FEDABC_OUTPUT_DIR environment variable, when set,
/// overrides the file's output_dir; explicit CLI overrides beat both.
inline ExperimentConfig parse_config(const std::string& path,
                                     const std::vector<std::string>& overrides = {}) {
  std::ifstream f(path);
  if (!f) {
    throw ConfigError("config: cannot open " + path);
  }
  std::ostringstream buf;
  buf << f.rdbuf();
  std::vector<std::string> all;
  all.reserve(overrides.size() + 1);
  if (const char* env = std::getenv("FEDABC_OUTPUT_DIR")) {
    all.push_back(std::string("output_dir=") + env);
  }
  all.insert(all.end(), overrides.begin(), overrides.end());
  return parse_config_text(buf.str(), all);
}

/// Canonical text form: every documented key once, doubles at full precision,
/// so parse_config_text(emit_config(cfg)) == cfg for any parsed config.
inline std::string emit_config(const ExperimentConfig& cfg) {
  const auto join_ints = [](const auto& values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (i > 0) out += ",";
      out += std::to_string(values[i]);
    }
    return out;
  };
  std::ostringstream out;
  out << "# fedabc configuration (resolved, version " << kVersion << ")\n";
  out << "dataset.kind = " << (cfg.dataset_kind == DatasetKind::kMnist ? "mnist" : "blobs")
      << "\n";
  out << "dataset.blobs.classes = " << cfg.blobs.classes << "\n";
  out << "dataset.blobs.per_class = " << cfg.blobs.per_class << "\n";
  out << "dataset.blobs.dim = " << cfg.blobs.dim << "\n";
  out << "dataset.blobs.spread = " << format_double(cfg.blobs.spread) << "\n";
  out << "dataset.mnist.train_images = " << cfg.mnist.train_images << "\n";
  out << "dataset.mnist.train_labels = " << cfg.mnist.train_labels << "\n";
  out << "dataset.mnist.test_images = " << cfg.mnist.test_images << "\n";
  out << "dataset.mnist.test_labels = " << cfg.mnist.test_labels << "\n";
  out << "partition.alpha = " << format_double(cfg.partition.alpha) << "\n";
  out << "partition.num_clients = " << cfg.partition.num_clients << "\n";
  out << "partition.test_fraction = " << format_double(cfg.partition.test_fraction) << "\n";
  out << "federation.rounds = " << cfg.federation.rounds << "\n";
  out << "federation.local_epochs = " << cfg.federation.local_epochs << "\n";
  out << "federation.participation_rate = " << format_double(cfg.federation.participation_rate)
      << "\n";
  out << "federation.batch_size = " << cfg.federation.batch_size << "\n";
  out << "federation.lr = " << format_double(cfg.federation.learning_rate) << "\n";
  out << "federation.momentum = " << format_double(cfg.federation.momentum) << "\n";
  out << "federation.weight_decay = " << format_double(cfg.federation.weight_decay) << "\n";
  out << "federation.uniform_aggregation = "
      << (cfg.federation.uniform_aggregation ? "true" : "false") << "\n";
  out << "federation.parallel_clients = "
      << (cfg.federation.parallel_clients ? "true" : "false") << "\n";
  out << "strategy.name = " << cfg.strategy.name() << "\n";
  out << "strategy.fedprox_mu = " << format_double(cfg.strategy.prox_mu) << "\n";
  out << "loss.m_p = " << format_double(cfg.strategy.loss.positive_keep_threshold) << "\n";
  out << "loss.m_n = " << format_double(cfg.strategy.loss.negative_keep_threshold) << "\n";
  out << "loss.m_nn = " << format_double(cfg.strategy.loss.absent_negative_keep_threshold)
      << "\n";
  out << "loss.focal_exponent = " << format_double(cfg.strategy.loss.focal_exponent) << "\n";
  out << "loss.enable_undersampling = "
      << (cfg.strategy.loss.enable_undersampling ? "true" : "false") << "\n";
  out << "loss.enable_hard_mining = "
      << (cfg.strategy.loss.enable_hard_mining ? "true" : "false") << "\n";
  out << "model.hidden_sizes = " << join_ints(cfg.hidden_sizes) << "\n";
  out << "eval.iid_per_class = " << cfg.iid_per_class << "\n";
  out << "seeds = " << join_ints(cfg.seeds) << "\n";
  out << "output_dir = " << cfg.output_dir << "\n";
  out << "parallel_seeds = " << (cfg.parallel_seeds ? "true" : "false") << "\n";
  return out.str();
}

}  // namespace fedabc
