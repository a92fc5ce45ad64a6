#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fedabc/common.hpp"
#include "fedabc/data.hpp"
#include "fedabc/evaluation.hpp"
#include "fedabc/loss.hpp"
#include "fedabc/matrix.hpp"
#include "fedabc/net.hpp"

namespace fedabc {

/// Training strategy. FedABC trains C one-vs-all binary heads with the
/// personalized loss; the baselines train the same network with softmax
/// cross entropy. LocalOnly never aggregates or broadcasts after
/// initialization; FedProx adds a client-side proximal pull toward the
/// broadcast params.
enum class StrategyKind { kFedAbc, kFedAvgSoftmax, kFedProxSoftmax, kLocalOnly };

struct Strategy {
  StrategyKind kind = StrategyKind::kFedAbc;
  LossConfig loss;       // FedABC only
  double prox_mu = 0.0;  // FedProx only

  static Strategy fedabc(LossConfig cfg = {}) { return {StrategyKind::kFedAbc, cfg, 0.0}; }
  static Strategy fedavg_softmax() { return {StrategyKind::kFedAvgSoftmax, {}, 0.0}; }
  static Strategy fedprox_softmax(double mu) {
    return {StrategyKind::kFedProxSoftmax, {}, mu};
  }
  static Strategy local_only() { return {StrategyKind::kLocalOnly, {}, 0.0}; }

  friend bool operator==(const Strategy&, const Strategy&) = default;

  std::string name() const {
    switch (kind) {
      case StrategyKind::kFedAbc: return "fedabc";
      case StrategyKind::kFedAvgSoftmax: return "fedavg_softmax";
      case StrategyKind::kFedProxSoftmax: return "fedprox_softmax";
      case StrategyKind::kLocalOnly: return "local_only";
    }
    return "unknown";
  }

  void validate() const {
    if (prox_mu < 0.0) {
      throw std::invalid_argument("strategy.fedprox_mu must be >= 0");
    }
    if (kind == StrategyKind::kFedAbc) loss.validate();
  }
};

inline StrategyKind parse_strategy_kind(const std::string& name) {
  if (name == "fedabc") return StrategyKind::kFedAbc;
  if (name == "fedavg_softmax") return StrategyKind::kFedAvgSoftmax;
  if (name == "fedprox_softmax") return StrategyKind::kFedProxSoftmax;
  if (name == "local_only") return StrategyKind::kLocalOnly;
  throw std::invalid_argument("strategy.name: unknown strategy \"" + name +
                              "\" (expected fedabc, fedavg_softmax, fedprox_softmax, "
                              "or local_only)");
}

struct FederationConfig {
  int rounds = 30;
  int local_epochs = 5;
  double participation_rate = 0.5;
  int batch_size = 64;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  bool uniform_aggregation = false;  // 1/k instead of |train_i|/|total|
  bool parallel_clients = false;
  std::uint64_t seed = 0;

  friend bool operator==(const FederationConfig&, const FederationConfig&) = default;

  void validate() const {
    if (rounds < 0) {
      throw std::invalid_argument("federation.rounds must be >= 0");
    }
    if (local_epochs < 1) {
      throw std::invalid_argument("federation.local_epochs must be >= 1");
    }
    if (!(participation_rate > 0.0 && participation_rate <= 1.0)) {
      throw std::invalid_argument("federation.participation_rate must be in (0,1]");
    }
    if (batch_size < 1) {
      throw std::invalid_argument("federation.batch_size must be >= 1");
    }
    if (!(learning_rate >= 0.0)) {
      throw std::invalid_argument("federation.lr must be >= 0");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw std::invalid_argument("federation.momentum must be in [0,1)");
    }
    if (!(weight_decay >= 0.0)) {
      throw std::invalid_argument("federation.weight_decay must be >= 0");
    }
  }
};

/// Everything the coordinator tracks between rounds. The per-client RNG
/// streams drive each client's epoch shuffles, so adding or removing clients
/// never perturbs another client's trajectory.
struct FederationState {
  int round = 0;
  ModelParams global_params;
  std::vector<ModelParams> personalized;
  std::mt19937_64 selection_rng;
  std::vector<std::mt19937_64> client_rngs;
};

inline FederationState init_federation(std::size_t num_clients, const std::vector<int>& widths,
                                       std::uint64_t seed) {
  if (num_clients < 1) {
    throw std::invalid_argument("init_federation: need at least one client");
  }
  FederationState st;
  st.global_params = init_params(widths, derive_seed(seed, kInitSalt));
  st.personalized.assign(num_clients, st.global_params);
  st.selection_rng.seed(derive_seed(seed, kSelectionSalt));
  st.client_rngs.reserve(num_clients);
  for (std::size_t i = 0; i < num_clients; ++i) {
    st.client_rngs.emplace_back(derive_seed(seed, kClientSaltBase + i));
  }
  return st;
}

/// k distinct client ids drawn uniformly without replacement, returned
/// sorted ascending.
inline std::vector<int> sample_clients(std::mt19937_64& rng, int num_clients, int k) {
  if (k < 1 || k > num_clients) {
    throw std::invalid_argument("sample_clients: k out of range");
  }
  std::vector<int> ids(static_cast<std::size_t>(num_clients));
  std::iota(ids.begin(), ids.end(), 0);
  for (int j = 0; j < k; ++j) {  // partial Fisher-Yates
    std::uniform_int_distribution<int> pick(j, num_clients - 1);
    std::swap(ids[static_cast<std::size_t>(j)], ids[static_cast<std::size_t>(pick(rng))]);
  }
  ids.resize(static_cast<std::size_t>(k));
  std::sort(ids.begin(), ids.end());
  return ids;
}

struct WeightedParams {
  ModelParams params;
  double weight;  // client dataset size (or 1 for uniform averaging)
};

/// Element-wise convex combination with weights w_i / sum(w).
inline ModelParams aggregate(const std::vector<WeightedParams>& updates) {
  if (updates.empty()) {
    throw std::invalid_argument("aggregate: no updates");
  }
  double total = 0.0;
  for (const auto& u : updates) {
    if (!(u.weight > 0.0)) {
      throw std::invalid_argument("aggregate: weights must be positive");
    }
    if (!u.params.same_arch(updates.front().params)) {
      throw std::invalid_argument("aggregate: architecture mismatch between updates");
    }
    total += u.weight;
  }
  ModelParams out = zeros_like(updates.front().params);
  for (const auto& u : updates) out.add_scaled(u.params, u.weight / total);
  return out;
}

struct LocalTrainResult {
  ModelParams params;
  std::vector<double> epoch_mean_losses;
  double mean_batch_loss = 0.0;  // over every batch of every epoch
};

namespace detail {

inline Matrix gather_features(const std::vector<Sample>& samples,
                              const std::vector<std::size_t>& order, std::size_t begin,
                              std::size_t end) {
  const std::size_t dim = samples[order[begin]].features.size();
  Matrix x(end - begin, dim);
  for (std::size_t i = begin; i < end; ++i) {
    const auto& f = samples[order[i]].features;
    std::copy(f.begin(), f.end(), x.data() + (i - begin) * dim);
  }
  return x;
}

}  // namespace detail

/// Local update of Algorithm 1: local_epochs passes of shuffled mini-batch
/// SGD starting from `init` (left unmodified). The strategy picks the batch
/// loss; FedProx additionally pulls toward `init` with gradient
/// mu * (theta - init) and adds (mu/2) * ||theta - init||^2 to the reported
/// batch loss. Momentum state is local to this call.
inline LocalTrainResult local_train(const ModelParams& init, const ClientDataset& client,
                                    const Strategy& strategy, const FederationConfig& cfg,
                                    std::mt19937_64& rng) {
  if (client.train.empty()) {
    throw std::invalid_argument("local_train: client " + std::to_string(client.client_id) +
                                " has no training samples");
  }
  const std::size_t n = client.train.size();
  const auto batch_size = static_cast<std::size_t>(cfg.batch_size);

  LocalTrainResult result;
  result.params = init;
  OptimizerState opt;
  opt.learning_rate = cfg.learning_rate;
  opt.momentum = cfg.momentum;
  opt.weight_decay = cfg.weight_decay;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  double total_loss = 0.0;
  std::size_t total_batches = 0;
  for (int epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t epoch_batches = 0;
    for (std::size_t begin = 0; begin < n; begin += batch_size) {
      const std::size_t end = std::min(begin + batch_size, n);
      const Matrix x = detail::gather_features(client.train, order, begin, end);
      std::vector<int> labels(end - begin);
      for (std::size_t i = begin; i < end; ++i) labels[i - begin] = client.train[order[i]].label;

      const ForwardTrace trace = forward(result.params, x);
      double batch_loss;
      Matrix logit_grads;
      if (strategy.kind == StrategyKind::kFedAbc) {
        BatchLossResult b =
            client_empirical_loss(trace.logits(), labels, client.presence, strategy.loss);
        batch_loss = b.loss_value;
        logit_grads = std::move(b.logit_grads);
      } else {
        SoftmaxCeResult b = softmax_ce(trace.logits(), labels);
        batch_loss = b.loss;
        logit_grads = std::move(b.logit_grads);
      }
      ModelParams grads = backward(result.params, trace, logit_grads);

      if (strategy.kind == StrategyKind::kFedProxSoftmax && strategy.prox_mu != 0.0) {
        double sq_norm = 0.0;
        for (std::size_t l = 0; l < grads.layers.size(); ++l) {
          double* gw = grads.layers[l].weight.data();
          const double* pw = result.params.layers[l].weight.data();
          const double* iw = init.layers[l].weight.data();
          for (std::size_t e = 0; e < grads.layers[l].weight.size(); ++e) {
            const double d = pw[e] - iw[e];
            sq_norm += d * d;
            gw[e] += strategy.prox_mu * d;
          }
          for (std::size_t e = 0; e < grads.layers[l].bias.size(); ++e) {
            const double d = result.params.layers[l].bias[e] - init.layers[l].bias[e];
            sq_norm += d * d;
            grads.layers[l].bias[e] += strategy.prox_mu * d;
          }
        }
        batch_loss += 0.5 * strategy.prox_mu * sq_norm;
      }

      sgd_step(result.params, grads, opt);
      if (!result.params.all_finite()) {
        throw std::runtime_error("local_train: client " + std::to_string(client.client_id) +
                                 ": parameters diverged (non-finite) in epoch " +
                                 std::to_string(epoch + 1));
      }
      epoch_loss += batch_loss;
      ++epoch_batches;
    }
    result.epoch_mean_losses.push_back(epoch_loss / static_cast<double>(epoch_batches));
    total_loss += epoch_loss;
    total_batches += epoch_batches;
  }
  result.mean_batch_loss = total_loss / static_cast<double>(total_batches);
  return result;
}

struct RoundStats {
  std::vector<int> selected;
  double mean_train_loss = 0.0;  // mean over participants' mean batch losses
};

/// One round of Algorithm 1: sample ceil(rate*m) clients, train each from
/// the current global params (LocalOnly: from its own personalized params),
/// replace their personalized entries, and aggregate a new global model
/// (except LocalOnly). Non-participants are untouched.
inline RoundStats run_round(FederationState& state, const std::vector<ClientDataset>& clients,
                            const Strategy& strategy, const FederationConfig& cfg) {
  cfg.validate();
  strategy.validate();
  const int m = static_cast<int>(clients.size());
  if (state.personalized.size() != clients.size() ||
      state.client_rngs.size() != clients.size()) {
    throw std::invalid_argument("run_round: state was initialized for a different client count");
  }
  const int k = std::max(1, static_cast<int>(std::ceil(cfg.participation_rate * m)));
  RoundStats stats;
  stats.selected = sample_clients(state.selection_rng, m, std::min(k, m));

  std::vector<LocalTrainResult> results(stats.selected.size());
  const auto train_one = [&](std::size_t j) {
    const int id = stats.selected[j];
    const ModelParams& start = strategy.kind == StrategyKind::kLocalOnly
                                   ? state.personalized[static_cast<std::size_t>(id)]
                                   : state.global_params;
    results[j] = local_train(start, clients[static_cast<std::size_t>(id)], strategy, cfg,
                             state.client_rngs[static_cast<std::size_t>(id)]);
  };
  const auto context = [&](std::size_t j, const char* what) {
    return "round " + std::to_string(state.round + 1) + ", client " +
           std::to_string(stats.selected[j]) + ": " + what;
  };

  if (cfg.parallel_clients && stats.selected.size() > 1) {
    std::vector<std::exception_ptr> errors(stats.selected.size());
    std::vector<std::thread> threads;
    threads.reserve(stats.selected.size());
    for (std::size_t j = 0; j < stats.selected.size(); ++j) {
      threads.emplace_back([&, j] {
        try {
          train_one(j);
        } catch (...) {
          errors[j] = std::current_exception();
        }
      });
    }
    for (auto& t : threads) t.join();
    for (std::size_t j = 0; j < errors.size(); ++j) {
      if (!errors[j]) continue;
      try {
        std::rethrow_exception(errors[j]);
      } catch (const std::exception& e) {
        throw std::runtime_error(context(j, e.what()));
      }
    }
  } else {
    for (std::size_t j = 0; j < stats.selected.size(); ++j) {
      try {
        train_one(j);
      } catch (const std::exception& e) {
        throw std::runtime_error(context(j, e.what()));
      }
    }
  }

  double loss_sum = 0.0;
  for (const auto& r : results) loss_sum += r.mean_batch_loss;
  stats.mean_train_loss = loss_sum / static_cast<double>(results.size());

  if (strategy.kind != StrategyKind::kLocalOnly) {
    std::vector<WeightedParams> updates;
    updates.reserve(results.size());
    for (std::size_t j = 0; j < results.size(); ++j) {
      const auto id = static_cast<std::size_t>(stats.selected[j]);
      updates.push_back({results[j].params,
                         cfg.uniform_aggregation
                             ? 1.0
                             : static_cast<double>(clients[id].train.size())});
    }
    state.global_params = aggregate(updates);
  }
  for (std::size_t j = 0; j < results.size(); ++j) {
    state.personalized[static_cast<std::size_t>(stats.selected[j])] =
        std::move(results[j].params);
  }
  ++state.round;
  return stats;
}

struct FederationRun {
  FederationState state;
  std::vector<MetricsRecord> metrics;  // one record per round, in order
};

/// Algorithm 1 in full: seeded global initialization broadcast to every
/// client as its initial personalized model, cfg.rounds rounds, and a
/// metrics record after each round.
inline FederationRun run_federation(const std::vector<ClientDataset>& clients,
                                    const IidTestSet& iid, const std::vector<int>& widths,
                                    const Strategy& strategy, const FederationConfig& cfg) {
  if (clients.empty()) {
    throw std::invalid_argument("run_federation: no clients");
  }
  cfg.validate();
  strategy.validate();
  FederationRun run;
  run.state = init_federation(clients.size(), widths, cfg.seed);
  run.metrics.reserve(static_cast<std::size_t>(cfg.rounds));
  for (int t = 0; t < cfg.rounds; ++t) {
    const RoundStats stats = run_round(run.state, clients, strategy, cfg);
    run.metrics.push_back(evaluate_round(run.state.round, run.state.personalized,
                                         run.state.global_params, clients, iid,
                                         stats.mean_train_loss));
  }
  return run;
}

// --- Checkpointing ----------------------------------------------------------
//
// Flat binary layout: 8-byte magic "FABCKPT1", then a little-endian u32 model
// count; per model a u32 width count and the widths as u32s, then each
// layer's weights (row-major) and biases as little-endian IEEE-754 doubles.

namespace detail {

inline void write_u32_le(std::ostream& f, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_f64_le(std::ostream& f, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  f.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t read_u32_le(std::istream& f, const std::string& path) {
  unsigned char b[4];
  if (!f.read(reinterpret_cast<char*>(b), 4)) {
    throw std::runtime_error("checkpoint: truncated file " + path);
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline double read_f64_le(std::istream& f, const std::string& path) {
  unsigned char b[8];
  if (!f.read(reinterpret_cast<char*>(b), 8)) {
    throw std::runtime_error("checkpoint: truncated file " + path);
  }
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'F', 'A', 'B', 'C', 'K', 'P', 'T', '1'};

inline void save_checkpoint(const std::string& path, const std::vector<ModelParams>& models) {
  std::ofstream f(path, std::ios::binary);
  if (!f) {
    throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  }
  f.write(kCheckpointMagic, 8);
  detail::write_u32_le(f, static_cast<std::uint32_t>(models.size()));
  for (const auto& model : models) {
    const std::vector<int> widths = model.widths();
    detail::write_u32_le(f, static_cast<std::uint32_t>(widths.size()));
    for (int w : widths) detail::write_u32_le(f, static_cast<std::uint32_t>(w));
    for (const auto& layer : model.layers) {
      for (std::size_t i = 0; i < layer.weight.size(); ++i) {
        detail::write_f64_le(f, layer.weight.data()[i]);
      }
      for (double b : layer.bias) detail::write_f64_le(f, b);
    }
  }
  f.flush();
  if (!f) {
    throw std::runtime_error("checkpoint: write failed for " + path);
  }
}

inline std::vector<ModelParams> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw std::runtime_error("checkpoint: cannot open " + path);
  }
  char magic[8];
  if (!f.read(magic, 8) || !std::equal(magic, magic + 8, kCheckpointMagic)) {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  const std::uint32_t count = detail::read_u32_le(f, path);
  std::vector<ModelParams> models;
  models.reserve(count);
  for (std::uint32_t mi = 0; mi < count; ++mi) {
    const std::uint32_t num_widths = detail::read_u32_le(f, path);
    if (num_widths < 2 || num_widths > 64) {
      throw std::runtime_error("checkpoint: implausible architecture in " + path);
    }
    std::vector<int> widths(num_widths);
    for (auto& w : widths) {
      const std::uint32_t v = detail::read_u32_le(f, path);
      if (v < 1 || v > (1u << 24)) {
        throw std::runtime_error("checkpoint: implausible layer width in " + path);
      }
      w = static_cast<int>(v);
    }
    ModelParams model;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      const auto rows = static_cast<std::size_t>(widths[l + 1]);
      const auto cols = static_cast<std::size_t>(widths[l]);
      LayerParams layer{Matrix(rows, cols), std::vector<double>(rows, 0.0)};
      for (std::size_t i = 0; i < layer.weight.size(); ++i) {
        layer.weight.data()[i] = detail::read_f64_le(f, path);
      }
      for (double& b : layer.bias) b = detail::read_f64_le(f, path);
      model.layers.push_back(std::move(layer));
    }
    models.push_back(std::move(model));
  }
  return models;
}

}  // namespace fedabc
