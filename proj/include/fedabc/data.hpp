#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fedabc/common.hpp"
#include "fedabc/loss.hpp"
#include "fedabc/matrix.hpp"

namespace fedabc {

/// One labeled example. Features are pixel intensities in [0,1] for MNIST or
/// raw coordinates for synthetic blobs.
struct Sample {
  std::vector<double> features;
  int label = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

/// Dirichlet non-IID partition settings. Smaller alpha means more skewed
/// per-client label distributions.
struct PartitionSpec {
  double alpha = 0.5;
  int num_clients = 1;
  std::uint64_t seed = 0;
  double test_fraction = 1.0 / 6.0;

  friend bool operator==(const PartitionSpec&, const PartitionSpec&) = default;

  void validate() const {
    if (!(alpha > 0.0)) {
      throw std::invalid_argument("partition.alpha must be > 0");
    }
    if (num_clients < 1) {
      throw std::invalid_argument("partition.num_clients must be >= 1");
    }
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
      throw std::invalid_argument("partition.test_fraction must be in (0,1)");
    }
  }
};

/// A client's local data: disjoint train/test splits with matched label
/// distributions, plus the derived class-presence split.
struct ClientDataset {
  int client_id = 0;
  std::vector<Sample> train;
  std::vector<Sample> test;
  ClassPresence presence;
};

/// Balanced test set shared by all clients; used for the drift metric.
struct IidTestSet {
  std::vector<Sample> samples;
  int per_class = 0;
  int num_classes = 0;
};

inline int num_classes_of(const std::vector<Sample>& data) {
  if (data.empty()) {
    throw std::invalid_argument("num_classes_of: empty dataset");
  }
  int max_label = 0;
  for (const Sample& s : data) {
    if (s.label < 0) {
      throw std::invalid_argument("num_classes_of: negative label");
    }
    max_label = std::max(max_label, s.label);
  }
  return max_label + 1;
}

inline Matrix features_matrix(const std::vector<Sample>& samples) {
  if (samples.empty()) {
    throw std::invalid_argument("features_matrix: empty sample list");
  }
  const std::size_t dim = samples.front().features.size();
  Matrix x(samples.size(), dim);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].features.size() != dim) {
      throw std::invalid_argument("features_matrix: inconsistent feature dims");
    }
    std::copy(samples[i].features.begin(), samples[i].features.end(), x.data() + i * dim);
  }
  return x;
}

inline std::vector<int> labels_vector(const std::vector<Sample>& samples) {
  std::vector<int> labels;
  labels.reserve(samples.size());
  for (const Sample& s : samples) labels.push_back(s.label);
  return labels;
}

/// Synthetic Gaussian blobs: `per_class` points per class around separated
/// centers of norm 4 (scaled standard basis when dim >= num_classes, a
/// circle in the first two coordinates otherwise). Labels come out in class
/// blocks: all of class 0, then class 1, ...
inline std::vector<Sample> make_blobs(int num_classes, int per_class, int dim, double spread,
                                      std::uint64_t seed) {
  if (num_classes < 2) {
    throw std::invalid_argument("make_blobs: need at least 2 classes");
  }
  if (per_class < 1) {
    throw std::invalid_argument("make_blobs: per_class must be >= 1");
  }
  if (dim < 1) {
    throw std::invalid_argument("make_blobs: dim must be >= 1");
  }
  if (spread < 0.0) {
    throw std::invalid_argument("make_blobs: spread must be >= 0");
  }
  constexpr double kRadius = 4.0;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);

  std::vector<Sample> data;
  data.reserve(static_cast<std::size_t>(num_classes) * per_class);
  for (int c = 0; c < num_classes; ++c) {
    std::vector<double> center(static_cast<std::size_t>(dim), 0.0);
    if (dim >= num_classes) {
      center[static_cast<std::size_t>(c)] = kRadius;
    } else if (dim >= 2) {
      const double theta = 2.0 * M_PI * c / num_classes;
      center[0] = kRadius * std::cos(theta);
      center[1] = kRadius * std::sin(theta);
    } else {
      // 1-D fallback: centers evenly spaced on a segment.
      center[0] = -kRadius + 2.0 * kRadius * c / (num_classes - 1);
    }
    for (int i = 0; i < per_class; ++i) {
      Sample s;
      s.label = c;
      s.features.resize(static_cast<std::size_t>(dim));
      for (int d = 0; d < dim; ++d) {
        s.features[static_cast<std::size_t>(d)] =
            center[static_cast<std::size_t>(d)] + spread * noise(rng);
      }
      data.push_back(std::move(s));
    }
  }
  return data;
}

/// Class-wise Dirichlet partition: for each class, draw p ~ Dir(alpha * 1_m)
/// over the clients and hand out that class's shuffled samples in those
/// proportions (largest-remainder rounding, so class totals are conserved
/// exactly). Each client's allocation is then split per class into train and
/// matched-distribution test parts.
inline std::vector<ClientDataset> partition_dirichlet(const std::vector<Sample>& data,
                                                      const PartitionSpec& spec) {
  spec.validate();
  if (data.empty()) {
    throw std::invalid_argument("partition_dirichlet: empty dataset");
  }
  const int num_classes = num_classes_of(data);
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < data.size(); ++i) {
    by_class[static_cast<std::size_t>(data[i].label)].push_back(i);
  }
  for (int c = 0; c < num_classes; ++c) {
    if (by_class[static_cast<std::size_t>(c)].empty()) {
      throw std::invalid_argument("partition_dirichlet: class " + std::to_string(c) +
                                  " has no samples");
    }
  }
  const std::size_t m = static_cast<std::size_t>(spec.num_clients);
  if (data.size() < m) {
    throw std::invalid_argument("partition_dirichlet: fewer samples than clients");
  }

  std::mt19937_64 rng(spec.seed);
  std::vector<std::vector<std::size_t>> alloc(m);
  for (auto& idx : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);

    std::gamma_distribution<double> gamma(spec.alpha, 1.0);
    std::vector<double> weight(m);
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      weight[i] = gamma(rng);
      total += weight[i];
    }
    if (!(total > 0.0)) {  // all draws underflowed to zero (tiny alpha)
      std::fill(weight.begin(), weight.end(), 1.0);
      total = static_cast<double>(m);
    }

    // Largest-remainder rounding of n * p_i.
    const std::size_t n = idx.size();
    std::vector<std::size_t> counts(m);
    std::vector<std::pair<double, std::size_t>> remainders(m);
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < m; ++i) {
      const double target = static_cast<double>(n) * weight[i] / total;
      counts[i] = static_cast<std::size_t>(std::floor(target));
      remainders[i] = {target - std::floor(target), i};
      assigned += counts[i];
    }
    std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    for (std::size_t r = 0; assigned < n; ++r, ++assigned) ++counts[remainders[r].second];

    std::size_t pos = 0;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t k = 0; k < counts[i]; ++k) alloc[i].push_back(idx[pos++]);
    }
  }

  // Empty-client repair: move one random sample from the largest client.
  while (true) {
    std::size_t empty = m;
    for (std::size_t i = 0; i < m; ++i) {
      if (alloc[i].empty()) {
        empty = i;
        break;
      }
    }
    if (empty == m) break;
    std::size_t largest = 0;
    for (std::size_t i = 1; i < m; ++i) {
      if (alloc[i].size() > alloc[largest].size()) largest = i;
    }
    std::uniform_int_distribution<std::size_t> pick(0, alloc[largest].size() - 1);
    const std::size_t j = pick(rng);
    alloc[empty].push_back(alloc[largest][j]);
    alloc[largest][j] = alloc[largest].back();
    alloc[largest].pop_back();
  }

  std::vector<ClientDataset> clients;
  clients.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    ClientDataset cd;
    cd.client_id = static_cast<int>(i);

    // Stratify the client's allocation per class (allocation order is
    // already shuffled), then carve off the rounded test fraction.
    std::vector<std::vector<std::size_t>> mine(static_cast<std::size_t>(num_classes));
    for (std::size_t idx : alloc[i]) {
      mine[static_cast<std::size_t>(data[idx].label)].push_back(idx);
    }
    for (const auto& class_idx : mine) {
      const std::size_t k = class_idx.size();
      const auto test_count =
          static_cast<std::size_t>(std::llround(static_cast<double>(k) * spec.test_fraction));
      for (std::size_t j = 0; j < k; ++j) {
        (j < k - test_count ? cd.train : cd.test).push_back(data[class_idx[j]]);
      }
    }
    // Never leave a client without training data, and give it a test sample
    // when it can spare one.
    if (cd.train.empty() && !cd.test.empty()) {
      cd.train.push_back(std::move(cd.test.back()));
      cd.test.pop_back();
    }
    if (cd.test.empty() && cd.train.size() >= 2) {
      cd.test.push_back(std::move(cd.train.back()));
      cd.train.pop_back();
    }
    cd.presence = ClassPresence::from_labels(labels_vector(cd.train), num_classes);
    clients.push_back(std::move(cd));
  }
  return clients;
}

/// Balanced IID test set: per_class samples of every class, drawn without
/// replacement from the global test pool.
inline IidTestSet build_iid_test(const std::vector<Sample>& global_test, int per_class,
                                 std::uint64_t seed) {
  if (per_class < 1) {
    throw std::invalid_argument("build_iid_test: per_class must be >= 1");
  }
  const int num_classes = num_classes_of(global_test);
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < global_test.size(); ++i) {
    by_class[static_cast<std::size_t>(global_test[i].label)].push_back(i);
  }
  std::mt19937_64 rng(seed);
  IidTestSet iid;
  iid.per_class = per_class;
  iid.num_classes = num_classes;
  for (int c = 0; c < num_classes; ++c) {
    auto& idx = by_class[static_cast<std::size_t>(c)];
    if (idx.size() < static_cast<std::size_t>(per_class)) {
      throw std::invalid_argument("build_iid_test: class " + std::to_string(c) + " has " +
                                  std::to_string(idx.size()) + " samples, need " +
                                  std::to_string(per_class));
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    for (int j = 0; j < per_class; ++j) {
      iid.samples.push_back(global_test[idx[static_cast<std::size_t>(j)]]);
    }
  }
  return iid;
}

// --- MNIST IDX loading ----------------------------------------------------

namespace detail {

inline std::uint32_t read_be32(std::ifstream& f, const std::string& path) {
  unsigned char bytes[4];
  if (!f.read(reinterpret_cast<char*>(bytes), 4)) {
    throw std::runtime_error("mnist: truncated header in " + path);
  }
  return (static_cast<std::uint32_t>(bytes[0]) << 24) |
         (static_cast<std::uint32_t>(bytes[1]) << 16) |
         (static_cast<std::uint32_t>(bytes[2]) << 8) | static_cast<std::uint32_t>(bytes[3]);
}

inline std::vector<std::vector<double>> load_idx_images(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw std::runtime_error("mnist: cannot open " + path);
  }
  if (const std::uint32_t magic = read_be32(f, path); magic != 2051) {
    throw std::runtime_error("mnist: bad magic " + std::to_string(magic) + " in " + path +
                             " (expected 2051)");
  }
  const std::uint32_t count = read_be32(f, path);
  const std::uint32_t rows = read_be32(f, path);
  const std::uint32_t cols = read_be32(f, path);
  if (rows != 28 || cols != 28) {
    throw std::runtime_error("mnist: expected 28x28 images in " + path);
  }
  std::vector<std::vector<double>> images(count);
  std::vector<unsigned char> raw(784);
  for (auto& img : images) {
    if (!f.read(reinterpret_cast<char*>(raw.data()), 784)) {
      throw std::runtime_error("mnist: truncated image data in " + path);
    }
    img.resize(784);
    for (std::size_t i = 0; i < 784; ++i) img[i] = raw[i] / 255.0;
  }
  return images;
}

inline std::vector<int> load_idx_labels(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw std::runtime_error("mnist: cannot open " + path);
  }
  if (const std::uint32_t magic = read_be32(f, path); magic != 2049) {
    throw std::runtime_error("mnist: bad magic " + std::to_string(magic) + " in " + path +
                             " (expected 2049)");
  }
  const std::uint32_t count = read_be32(f, path);
  std::vector<unsigned char> raw(count);
  if (count > 0 && !f.read(reinterpret_cast<char*>(raw.data()), count)) {
    throw std::runtime_error("mnist: truncated label data in " + path);
  }
  std::vector<int> labels(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    if (raw[i] > 9) {
      throw std::runtime_error("mnist: label " + std::to_string(raw[i]) + " out of range in " +
                               path);
    }
    labels[i] = raw[i];
  }
  return labels;
}

inline std::vector<Sample> zip_samples(std::vector<std::vector<double>> images,
                                       const std::vector<int>& labels,
                                       const std::string& what) {
  if (images.size() != labels.size()) {
    throw std::runtime_error("mnist: " + what + " image/label count mismatch (" +
                             std::to_string(images.size()) + " vs " +
                             std::to_string(labels.size()) + ")");
  }
  std::vector<Sample> samples(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    samples[i] = {std::move(images[i]), labels[i]};
  }
  return samples;
}

}  // namespace detail

struct MnistData {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

inline MnistData load_mnist(const std::string& train_images_path,
                            const std::string& train_labels_path,
                            const std::string& test_images_path,
                            const std::string& test_labels_path) {
  MnistData data;
  data.train = detail::zip_samples(detail::load_idx_images(train_images_path),
                                   detail::load_idx_labels(train_labels_path), "train");
  data.test = detail::zip_samples(detail::load_idx_images(test_images_path),
                                  detail::load_idx_labels(test_labels_path), "test");
  return data;
}

/// One auditable record per client: the partition can be regenerated from
/// (seed, alpha) and cross-checked against these counts.
inline void write_partition_manifest(std::ostream& out,
                                     const std::vector<ClientDataset>& clients,
                                     std::uint64_t seed, double alpha) {
  out << "# fedabc partition manifest\n";
  out << "# client=<id> seed=<seed> alpha=<alpha> train=<per-class counts> "
         "test=<per-class counts>\n";
  for (const auto& c : clients) {
    const int num_classes = c.presence.num_classes();
    std::vector<int> train_counts(static_cast<std::size_t>(num_classes), 0);
    std::vector<int> test_counts(static_cast<std::size_t>(num_classes), 0);
    for (const Sample& s : c.train) ++train_counts[static_cast<std::size_t>(s.label)];
    for (const Sample& s : c.test) ++test_counts[static_cast<std::size_t>(s.label)];

    out << "client=" << c.client_id << " seed=" << seed << " alpha=" << format_double(alpha)
        << " train=";
    for (int k = 0; k < num_classes; ++k) {
      out << (k ? "," : "") << train_counts[static_cast<std::size_t>(k)];
    }
    out << " test=";
    for (int k = 0; k < num_classes; ++k) {
      out << (k ? "," : "") << test_counts[static_cast<std::size_t>(k)];
    }
    out << "\n";
  }
}

}  // namespace fedabc
