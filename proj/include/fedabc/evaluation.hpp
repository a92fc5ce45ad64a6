#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedabc/data.hpp"
#include "fedabc/matrix.hpp"
#include "fedabc/net.hpp"

namespace fedabc {

/// Per-round metrics. pfl_accuracy is the micro average over the clients'
/// own non-IID test sets; drift_score evaluates every personalized model on
/// the shared balanced IID set (lower = more drift toward local data);
/// global_model_pfl_accuracy is the same PFL formula with the global model
/// standing in for every personalized one.
struct MetricsRecord {
  int round = 0;
  double pfl_accuracy = 0.0;
  double drift_score = 0.0;
  double global_model_pfl_accuracy = 0.0;
  double mean_train_loss = 0.0;
  std::vector<double> per_class_accuracy;  // on the IID set, averaged over clients
  double pfl_accuracy_macro = 0.0;         // unweighted mean of per-client accuracies
};

/// Argmax over raw logits; ties break toward the lowest class id. The final
/// activation (sigmoid or softmax) is monotone, so argmax over logits equals
/// argmax over activations.
inline std::vector<int> predict_classes(const ModelParams& model, const Matrix& features) {
  const ForwardTrace trace = forward(model, features);
  const Matrix& logits = trace.logits();
  std::vector<int> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    int best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c) {
      if (logits(r, c) > logits(r, best)) best = static_cast<int>(c);
    }
    out[r] = best;
  }
  return out;
}

namespace detail {

/// (correct, total) for one model over one sample list.
inline std::pair<std::size_t, std::size_t> count_correct(const ModelParams& model,
                                                         const std::vector<Sample>& samples) {
  if (samples.empty()) return {0, 0};
  const std::vector<int> predicted = predict_classes(model, features_matrix(samples));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (predicted[i] == samples[i].label) ++correct;
  }
  return {correct, samples.size()};
}

}  // namespace detail

/// Micro-averaged PFL accuracy: total correct predictions over the total
/// size of all clients' test sets. Clients with empty test sets contribute
/// nothing; it is an error only if every test set is empty.
inline double pfl_accuracy(const std::vector<ModelParams>& personalized,
                           const std::vector<ClientDataset>& clients) {
  if (personalized.size() != clients.size()) {
    throw std::invalid_argument("pfl_accuracy: need one personalized model per client (" +
                                std::to_string(personalized.size()) + " models, " +
                                std::to_string(clients.size()) + " clients)");
  }
  std::size_t correct = 0, total = 0;
  for (std::size_t i = 0; i < clients.size(); ++i) {
    const auto [c, n] = detail::count_correct(personalized[i], clients[i].test);
    correct += c;
    total += n;
  }
  if (total == 0) {
    throw std::invalid_argument("pfl_accuracy: all client test sets are empty");
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

/// Generic-FL reading: the shared model evaluated with the same formula.
inline double pfl_accuracy(const ModelParams& shared_model,
                           const std::vector<ClientDataset>& clients) {
  std::size_t correct = 0, total = 0;
  for (const auto& client : clients) {
    const auto [c, n] = detail::count_correct(shared_model, client.test);
    correct += c;
    total += n;
  }
  if (total == 0) {
    throw std::invalid_argument("pfl_accuracy: all client test sets are empty");
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

/// Unweighted mean of per-client accuracies (clients with empty test sets
/// are skipped). Emitted alongside the micro average for analysis.
inline double pfl_accuracy_macro(const std::vector<ModelParams>& personalized,
                                 const std::vector<ClientDataset>& clients) {
  if (personalized.size() != clients.size()) {
    throw std::invalid_argument("pfl_accuracy_macro: need one personalized model per client");
  }
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < clients.size(); ++i) {
    const auto [c, n] = detail::count_correct(personalized[i], clients[i].test);
    if (n == 0) continue;
    sum += static_cast<double>(c) / static_cast<double>(n);
    ++counted;
  }
  if (counted == 0) {
    throw std::invalid_argument("pfl_accuracy_macro: all client test sets are empty");
  }
  return sum / static_cast<double>(counted);
}

/// Every personalized model evaluated on the same balanced IID set,
/// micro-averaged: sum_i correct(theta_i) / (m * |iid|). Low values mean the
/// personalized models drifted away from globally useful features.
inline double drift_score(const std::vector<ModelParams>& personalized, const IidTestSet& iid) {
  if (personalized.empty()) {
    throw std::invalid_argument("drift_score: no personalized models");
  }
  if (iid.samples.empty()) {
    throw std::invalid_argument("drift_score: empty IID test set");
  }
  const Matrix features = features_matrix(iid.samples);
  std::size_t correct = 0;
  for (const auto& model : personalized) {
    const std::vector<int> predicted = predict_classes(model, features);
    for (std::size_t i = 0; i < iid.samples.size(); ++i) {
      if (predicted[i] == iid.samples[i].label) ++correct;
    }
  }
  return static_cast<double>(correct) /
         (static_cast<double>(personalized.size()) * static_cast<double>(iid.samples.size()));
}

/// Accuracy restricted to each class's IID samples.
inline std::vector<double> per_class_accuracy(const ModelParams& model, const IidTestSet& iid) {
  if (iid.samples.empty()) {
    throw std::invalid_argument("per_class_accuracy: empty IID test set");
  }
  const std::vector<int> predicted = predict_classes(model, features_matrix(iid.samples));
  std::vector<double> correct(static_cast<std::size_t>(iid.num_classes), 0.0);
  std::vector<double> total(static_cast<std::size_t>(iid.num_classes), 0.0);
  for (std::size_t i = 0; i < iid.samples.size(); ++i) {
    const auto label = static_cast<std::size_t>(iid.samples[i].label);
    total[label] += 1.0;
    if (predicted[i] == iid.samples[i].label) correct[label] += 1.0;
  }
  std::vector<double> acc(static_cast<std::size_t>(iid.num_classes), 0.0);
  for (std::size_t c = 0; c < acc.size(); ++c) {
    acc[c] = total[c] > 0.0 ? correct[c] / total[c] : 0.0;
  }
  return acc;
}

inline std::vector<double> mean_per_class_accuracy(const std::vector<ModelParams>& personalized,
                                                   const IidTestSet& iid) {
  if (personalized.empty()) {
    throw std::invalid_argument("mean_per_class_accuracy: no personalized models");
  }
  std::vector<double> mean(static_cast<std::size_t>(iid.num_classes), 0.0);
  for (const auto& model : personalized) {
    const std::vector<double> acc = per_class_accuracy(model, iid);
    for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += acc[c];
  }
  for (double& v : mean) v /= static_cast<double>(personalized.size());
  return mean;
}

inline MetricsRecord evaluate_round(int round, const std::vector<ModelParams>& personalized,
                                    const ModelParams& global_params,
                                    const std::vector<ClientDataset>& clients,
                                    const IidTestSet& iid, double mean_train_loss) {
  MetricsRecord rec;
  rec.round = round;
  rec.pfl_accuracy = pfl_accuracy(personalized, clients);
  rec.pfl_accuracy_macro = pfl_accuracy_macro(personalized, clients);
  rec.drift_score = drift_score(personalized, iid);
  rec.global_model_pfl_accuracy = pfl_accuracy(global_params, clients);
  rec.per_class_accuracy = mean_per_class_accuracy(personalized, iid);
  rec.mean_train_loss = mean_train_loss;
  return rec;
}

}  // namespace fedabc
