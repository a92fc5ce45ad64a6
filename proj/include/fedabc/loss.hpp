#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedabc/matrix.hpp"

namespace fedabc {

// Probabilities are clamped to [kProbEpsilon, 1 - kProbEpsilon] before any
// log so every loss value is finite. Gradients use the unclamped analytic
// form so there is no dead zone near the ends of the interval.
inline constexpr double kProbEpsilon = 1e-7;
// sigmoid() itself clamps tighter, just enough to stay strictly inside (0,1).
inline constexpr double kSigmoidBound = 1e-15;

/// One-vs-all training loss settings. The three keep thresholds drive
/// under-sampling: confident positives (q >= positive_keep_threshold) and
/// unconfident negatives (q below the relevant negative threshold) are
/// dropped from the batch. The focal exponent scales each kept term by
/// (1-q)^sigma (positives) or q^sigma (negatives).
struct LossConfig {
  double positive_keep_threshold = 0.75;
  double negative_keep_threshold = 0.25;         // classes with positive samples
  double absent_negative_keep_threshold = 0.3;   // classes without positive samples
  double focal_exponent = 2.0;
  bool enable_undersampling = true;
  bool enable_hard_mining = true;

  friend bool operator==(const LossConfig&, const LossConfig&) = default;

  void validate() const {
    if (!(positive_keep_threshold > 0.0 && positive_keep_threshold <= 1.0)) {
      throw std::invalid_argument("loss.m_p must be in (0,1]");
    }
    if (!(negative_keep_threshold >= 0.0 && negative_keep_threshold < 1.0)) {
      throw std::invalid_argument("loss.m_n must be in [0,1)");
    }
    if (!(absent_negative_keep_threshold >= 0.0 && absent_negative_keep_threshold < 1.0)) {
      throw std::invalid_argument("loss.m_nn must be in [0,1)");
    }
    if (!(focal_exponent >= 0.0)) {
      throw std::invalid_argument("loss.focal_exponent must be >= 0");
    }
  }
};

/// Whether a class has any positive samples in the client's train split.
enum class ClassKind { kPositivesPresent, kPositivesAbsent };

/// Per-client class split: which classes have at least one positive training
/// sample. The two sets are disjoint and cover [0, num_classes).
class ClassPresence {
 public:
  ClassPresence() = default;

  static ClassPresence from_labels(const std::vector<int>& labels, int num_classes) {
    ClassPresence p;
    p.has_positive_.assign(static_cast<std::size_t>(num_classes), false);
    for (int label : labels) {
      if (label < 0 || label >= num_classes) {
        throw std::invalid_argument("ClassPresence: label " + std::to_string(label) +
                                    " outside [0," + std::to_string(num_classes) + ")");
      }
      p.has_positive_[static_cast<std::size_t>(label)] = true;
    }
    return p;
  }

  int num_classes() const { return static_cast<int>(has_positive_.size()); }

  bool is_present(int class_id) const {
    return has_positive_.at(static_cast<std::size_t>(class_id));
  }

  ClassKind kind(int class_id) const {
    return is_present(class_id) ? ClassKind::kPositivesPresent
                                : ClassKind::kPositivesAbsent;
  }

  std::vector<int> positives_present() const {
    std::vector<int> out;
    for (int c = 0; c < num_classes(); ++c) {
      if (has_positive_[static_cast<std::size_t>(c)]) out.push_back(c);
    }
    return out;
  }

  std::vector<int> positives_absent() const {
    std::vector<int> out;
    for (int c = 0; c < num_classes(); ++c) {
      if (!has_positive_[static_cast<std::size_t>(c)]) out.push_back(c);
    }
    return out;
  }

 private:
  std::vector<bool> has_positive_;
};

/// Numerically stable sigmoid, clamped to stay strictly inside (0,1).
inline double sigmoid(double logit) {
  if (!std::isfinite(logit)) {
    throw std::invalid_argument("sigmoid: non-finite logit");
  }
  double q;
  if (logit >= 0.0) {
    q = 1.0 / (1.0 + std::exp(-logit));
  } else {
    const double e = std::exp(logit);
    q = e / (1.0 + e);
  }
  return std::clamp(q, kSigmoidBound, 1.0 - kSigmoidBound);
}

inline double clamped_prob(double q) {
  return std::clamp(q, kProbEpsilon, 1.0 - kProbEpsilon);
}

/// Plain binary cross entropy -[y log q + (1-y) log(1-q)].
inline double bce(double q, int y) {
  const double qc = clamped_prob(q);
  return -(static_cast<double>(y) * std::log(qc) +
           (1.0 - static_cast<double>(y)) * std::log(1.0 - qc));
}

struct TermResult {
  double loss = 0.0;
  double dloss_dlogit = 0.0;
  bool kept = false;
};

/// One binary term of the personalized loss: under-sampling filter plus
/// focal weighting. The keep decision is a stop-gradient mask; the returned
/// derivative is the exact analytic d(loss)/d(logit) through the sigmoid.
inline TermResult fedabc_term(double q, int y, ClassKind kind, const LossConfig& cfg) {
  if (y != 0 && y != 1) {
    throw std::invalid_argument("fedabc_term: label must be 0 or 1");
  }
  if (kind == ClassKind::kPositivesAbsent && y == 1) {
    throw std::invalid_argument(
        "fedabc_term: positive sample for a class marked positives-absent");
  }
  if (!std::isfinite(q)) {
    throw std::invalid_argument("fedabc_term: non-finite probability");
  }
  q = std::clamp(q, kSigmoidBound, 1.0 - kSigmoidBound);

  bool keep = true;
  if (cfg.enable_undersampling) {
    if (y == 1) {
      keep = q < cfg.positive_keep_threshold;
    } else if (kind == ClassKind::kPositivesPresent) {
      keep = q > cfg.negative_keep_threshold;
    } else {
      keep = q > cfg.absent_negative_keep_threshold;
    }
  }
  if (!keep) return {0.0, 0.0, false};

  const double sigma = cfg.enable_hard_mining ? cfg.focal_exponent : 0.0;
  const double qc = clamped_prob(q);
  TermResult r;
  r.kept = true;
  if (y == 1) {
    const double factor = sigma == 0.0 ? 1.0 : std::pow(1.0 - q, sigma);
    r.loss = factor * -std::log(qc);
    r.dloss_dlogit =
        sigma * q * std::pow(1.0 - q, sigma) * std::log(q) - std::pow(1.0 - q, sigma + 1.0);
  } else {
    const double factor = sigma == 0.0 ? 1.0 : std::pow(q, sigma);
    r.loss = factor * -std::log(1.0 - qc);
    r.dloss_dlogit = -sigma * std::pow(q, sigma) * (1.0 - q) * std::log(1.0 - q) +
                     std::pow(q, sigma + 1.0);
  }
  return r;
}

/// One mini-batch of the one-vs-all loss over all classes. loss_value and
/// logit_grads are normalized by the batch size (not by the kept-term
/// count), so dropping terms shrinks the effective loss.
struct BatchLossResult {
  double loss_value = 0.0;
  Matrix logit_grads;                // [B x C], zero where filtered
  std::vector<int> kept_positives;   // per class
  std::vector<int> kept_negatives;   // per class
  std::size_t total_terms = 0;       // B * C
};

inline BatchLossResult client_empirical_loss(const Matrix& logits,
                                             const std::vector<int>& labels,
                                             const ClassPresence& presence,
                                             const LossConfig& cfg) {
  const std::size_t batch = logits.rows();
  const std::size_t classes = logits.cols();
  if (batch == 0) {
    throw std::invalid_argument("client_empirical_loss: empty batch");
  }
  if (labels.size() != batch) {
    throw std::invalid_argument("client_empirical_loss: label count != batch size");
  }
  if (static_cast<std::size_t>(presence.num_classes()) != classes) {
    throw std::invalid_argument("client_empirical_loss: presence/class count mismatch");
  }

  BatchLossResult out;
  out.logit_grads = Matrix(batch, classes);
  out.kept_positives.assign(classes, 0);
  out.kept_negatives.assign(classes, 0);
  out.total_terms = batch * classes;

  const double inv_batch = 1.0 / static_cast<double>(batch);
  double loss_sum = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw std::invalid_argument("client_empirical_loss: label out of range");
    }
    for (std::size_t c = 0; c < classes; ++c) {
      const int y = static_cast<std::size_t>(label) == c ? 1 : 0;
      const double q = sigmoid(logits(b, c));
      const TermResult term = fedabc_term(q, y, presence.kind(static_cast<int>(c)), cfg);
      if (!term.kept) continue;
      loss_sum += term.loss;
      out.logit_grads(b, c) = term.dloss_dlogit * inv_batch;
      if (y == 1) {
        ++out.kept_positives[c];
      } else {
        ++out.kept_negatives[c];
      }
    }
  }
  out.loss_value = loss_sum * inv_batch;
  return out;
}

struct SoftmaxCeResult {
  double loss = 0.0;
  Matrix logit_grads;  // [B x C], (softmax - onehot) / B
};

/// Mean softmax cross entropy with log-sum-exp stabilization.
inline SoftmaxCeResult softmax_ce(const Matrix& logits, const std::vector<int>& labels) {
  const std::size_t batch = logits.rows();
  const std::size_t classes = logits.cols();
  if (batch == 0) {
    throw std::invalid_argument("softmax_ce: empty batch");
  }
  if (labels.size() != batch) {
    throw std::invalid_argument("softmax_ce: label count != batch size");
  }

  SoftmaxCeResult out;
  out.logit_grads = Matrix(batch, classes);
  const double inv_batch = 1.0 / static_cast<double>(batch);
  double loss_sum = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw std::invalid_argument("softmax_ce: label out of range");
    }
    double max_logit = logits(b, 0);
    for (std::size_t c = 1; c < classes; ++c) max_logit = std::max(max_logit, logits(b, c));
    double sum_exp = 0.0;
    for (std::size_t c = 0; c < classes; ++c) sum_exp += std::exp(logits(b, c) - max_logit);
    const double lse = max_logit + std::log(sum_exp);
    loss_sum += lse - logits(b, label);
    for (std::size_t c = 0; c < classes; ++c) {
      const double p = std::exp(logits(b, c) - lse);
      const double onehot = static_cast<std::size_t>(label) == c ? 1.0 : 0.0;
      out.logit_grads(b, c) = (p - onehot) * inv_batch;
    }
  }
  out.loss = loss_sum * inv_batch;
  return out;
}

}  // namespace fedabc
