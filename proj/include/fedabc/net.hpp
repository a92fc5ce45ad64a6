#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedabc/matrix.hpp"

namespace fedabc {

/// One fully connected layer: weight is [fan_out x fan_in], so the forward
/// pass computes act_in * weight^T + bias.
struct LayerParams {
  Matrix weight;
  std::vector<double> bias;
};

/// Parameters of an MLP with ReLU hidden activations and a linear final
/// layer. Element order (layer by layer, weights row-major then bias) is the
/// flattening order used by checkpoints and aggregation.
struct ModelParams {
  std::vector<LayerParams> layers;

  std::vector<int> widths() const {
    std::vector<int> w;
    if (layers.empty()) return w;
    w.push_back(static_cast<int>(layers.front().weight.cols()));
    for (const auto& layer : layers) w.push_back(static_cast<int>(layer.weight.rows()));
    return w;
  }

  bool same_arch(const ModelParams& other) const {
    if (layers.size() != other.layers.size()) return false;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (layers[l].weight.rows() != other.layers[l].weight.rows() ||
          layers[l].weight.cols() != other.layers[l].weight.cols() ||
          layers[l].bias.size() != other.layers[l].bias.size()) {
        return false;
      }
    }
    return true;
  }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& layer : layers) n += layer.weight.size() + layer.bias.size();
    return n;
  }

  /// this += s * other, elementwise.
  void add_scaled(const ModelParams& other, double s) {
    if (!same_arch(other)) {
      throw std::invalid_argument("ModelParams::add_scaled: architecture mismatch");
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
      double* w = layers[l].weight.data();
      const double* ow = other.layers[l].weight.data();
      for (std::size_t i = 0; i < layers[l].weight.size(); ++i) w[i] += s * ow[i];
      for (std::size_t i = 0; i < layers[l].bias.size(); ++i) {
        layers[l].bias[i] += s * other.layers[l].bias[i];
      }
    }
  }

  void scale(double s) {
    for (auto& layer : layers) {
      double* w = layer.weight.data();
      for (std::size_t i = 0; i < layer.weight.size(); ++i) w[i] *= s;
      for (double& b : layer.bias) b *= s;
    }
  }

  bool all_finite() const {
    for (const auto& layer : layers) {
      if (!layer.weight.all_finite()) return false;
      for (double b : layer.bias) {
        if (!std::isfinite(b)) return false;
      }
    }
    return true;
  }
};

inline ModelParams zeros_like(const ModelParams& p) {
  ModelParams z;
  z.layers.reserve(p.layers.size());
  for (const auto& layer : p.layers) {
    z.layers.push_back({Matrix(layer.weight.rows(), layer.weight.cols()),
                        std::vector<double>(layer.bias.size(), 0.0)});
  }
  return z;
}

/// Seeded initialization: hidden layers He-uniform (bound sqrt(6/fan_in),
/// suits ReLU), final layer Xavier-uniform (bound sqrt(6/(fan_in+fan_out)),
/// keeps initial logits small), biases zero.
inline ModelParams init_params(const std::vector<int>& widths, std::uint64_t seed) {
  if (widths.size() < 2) {
    throw std::invalid_argument("init_params: need at least input and output widths");
  }
  for (int w : widths) {
    if (w <= 0) throw std::invalid_argument("init_params: widths must be positive");
  }
  std::mt19937_64 rng(seed);
  ModelParams p;
  const std::size_t num_layers = widths.size() - 1;
  for (std::size_t l = 0; l < num_layers; ++l) {
    const auto fan_in = static_cast<std::size_t>(widths[l]);
    const auto fan_out = static_cast<std::size_t>(widths[l + 1]);
    const bool is_final = l + 1 == num_layers;
    const double bound =
        is_final ? std::sqrt(6.0 / static_cast<double>(fan_in + fan_out))
                 : std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    LayerParams layer{Matrix(fan_out, fan_in), std::vector<double>(fan_out, 0.0)};
    for (std::size_t i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = dist(rng);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

/// Everything the backward pass needs: the input batch, pre-activations of
/// every layer (pre.back() is the logits), and ReLU outputs per hidden layer.
struct ForwardTrace {
  Matrix input;
  std::vector<Matrix> pre;
  std::vector<Matrix> act;

  const Matrix& logits() const { return pre.back(); }
};

inline ForwardTrace forward(const ModelParams& p, const Matrix& input) {
  if (p.layers.empty()) {
    throw std::invalid_argument("forward: model has no layers");
  }
  if (input.cols() != p.layers.front().weight.cols()) {
    throw std::invalid_argument("forward: input width " + std::to_string(input.cols()) +
                                " does not match model input width " +
                                std::to_string(p.layers.front().weight.cols()));
  }
  ForwardTrace t;
  t.input = input;
  const Matrix* current = &t.input;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    Matrix pre = matmul(*current, transposed(p.layers[l].weight));
    for (std::size_t r = 0; r < pre.rows(); ++r) {
      double* row = pre.data() + r * pre.cols();
      for (std::size_t c = 0; c < pre.cols(); ++c) row[c] += p.layers[l].bias[c];
    }
    t.pre.push_back(std::move(pre));
    if (l + 1 < p.layers.size()) {
      Matrix act = t.pre.back();
      double* d = act.data();
      for (std::size_t i = 0; i < act.size(); ++i) d[i] = d[i] > 0.0 ? d[i] : 0.0;
      t.act.push_back(std::move(act));
      current = &t.act.back();
    }
  }
  return t;
}

/// Backpropagation from d(loss)/d(logits). Gradients are plain sums over the
/// batch rows; any 1/B normalization lives in logit_grads itself.
inline ModelParams backward(const ModelParams& p, const ForwardTrace& trace,
                            const Matrix& logit_grads) {
  const std::size_t num_layers = p.layers.size();
  if (trace.pre.size() != num_layers || trace.act.size() + 1 != num_layers) {
    throw std::invalid_argument("backward: trace does not match model depth");
  }
  if (logit_grads.rows() != trace.input.rows() ||
      logit_grads.cols() != p.layers.back().weight.rows()) {
    throw std::invalid_argument("backward: logit grad shape does not match logits");
  }

  ModelParams grads = zeros_like(p);
  Matrix dz = logit_grads;
  for (std::size_t l = num_layers; l-- > 0;) {
    const Matrix& a_in = l == 0 ? trace.input : trace.act[l - 1];
    grads.layers[l].weight = matmul_transposed_a(dz, a_in);
    for (std::size_t r = 0; r < dz.rows(); ++r) {
      const double* row = dz.data() + r * dz.cols();
      for (std::size_t c = 0; c < dz.cols(); ++c) grads.layers[l].bias[c] += row[c];
    }
    if (l == 0) break;
    Matrix da = matmul(dz, p.layers[l].weight);
    const Matrix& pre = trace.pre[l - 1];
    for (std::size_t i = 0; i < da.size(); ++i) {
      da.data()[i] = pre.data()[i] > 0.0 ? da.data()[i] : 0.0;
    }
    dz = std::move(da);
  }
  return grads;
}

/// SGD with classical momentum and decoupled-from-nothing L2 weight decay
/// folded into the gradient: v <- mu*v + (g + wd*p); p <- p - lr*v.
struct OptimizerState {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  ModelParams velocity;  // zeros on first step

  void validate() const {
    if (!(learning_rate >= 0.0)) {
      throw std::invalid_argument("optimizer: learning rate must be >= 0");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw std::invalid_argument("optimizer: momentum must be in [0,1)");
    }
    if (!(weight_decay >= 0.0)) {
      throw std::invalid_argument("optimizer: weight decay must be >= 0");
    }
  }
};

inline void sgd_step(ModelParams& params, const ModelParams& grads, OptimizerState& opt) {
  opt.validate();
  if (!params.same_arch(grads)) {
    throw std::invalid_argument("sgd_step: gradient architecture mismatch");
  }
  if (!grads.all_finite()) {
    throw std::invalid_argument("sgd_step: non-finite gradient");
  }
  if (opt.velocity.layers.empty()) {
    opt.velocity = zeros_like(params);
  } else if (!opt.velocity.same_arch(params)) {
    throw std::invalid_argument("sgd_step: velocity architecture mismatch");
  }

  const auto update = [&](double& p, double g, double& v) {
    v = opt.momentum * v + (g + opt.weight_decay * p);
    p -= opt.learning_rate * v;
  };
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    double* pw = params.layers[l].weight.data();
    const double* gw = grads.layers[l].weight.data();
    double* vw = opt.velocity.layers[l].weight.data();
    for (std::size_t i = 0; i < params.layers[l].weight.size(); ++i) {
      update(pw[i], gw[i], vw[i]);
    }
    for (std::size_t i = 0; i < params.layers[l].bias.size(); ++i) {
      update(params.layers[l].bias[i], grads.layers[l].bias[i],
             opt.velocity.layers[l].bias[i]);
    }
  }
}

}  // namespace fedabc
