#pragma once

// Layers with hand-derived forward/backward passes and the Chebyshev GCN model
// built from them: conv -> ReLU (-> dropout) repeated, global average pooling,
// dense classifier.
//
// Batched node signals are stored sample-major: a batch of B samples on d
// nodes with F channels is a (B*d) x F matrix whose rows s*d .. s*d+d-1 belong
// to sample s.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "chebcam/errors.hpp"
#include "chebcam/random.hpp"
#include "chebcam/spectral.hpp"

namespace chebcam {

/// B samples x d nodes x F channels.
struct NodeTensor {
  Index batch = 0;
  Index nodes = 0;
  MatrixXd data;

  NodeTensor() = default;
  NodeTensor(Index batch_size, Index num_nodes, MatrixXd values)
      : batch(batch_size), nodes(num_nodes), data(std::move(values)) {
    if (data.rows() != batch * nodes)
      throw InvalidInput("NodeTensor: expected " + std::to_string(batch * nodes) + " rows, got " +
                         std::to_string(data.rows()));
  }

  Index channels() const noexcept { return data.cols(); }
  auto sample(Index s) { return data.middleRows(s * nodes, nodes); }
  auto sample(Index s) const { return data.middleRows(s * nodes, nodes); }
};

/// Stacks d x F matrices into one batch.
inline NodeTensor make_batch(std::span<const MatrixXd* const> samples) {
  if (samples.empty()) throw InvalidInput("make_batch: empty batch");
  const Index d = samples.front()->rows();
  const Index f = samples.front()->cols();
  NodeTensor out(static_cast<Index>(samples.size()), d, MatrixXd(static_cast<Index>(samples.size()) * d, f));
  for (std::size_t s = 0; s < samples.size(); ++s) {
    if (samples[s]->rows() != d || samples[s]->cols() != f) throw InvalidInput("make_batch: ragged sample shapes");
    out.sample(static_cast<Index>(s)) = *samples[s];
  }
  return out;
}

inline NodeTensor make_batch(std::span<const MatrixXd> samples) {
  std::vector<const MatrixXd*> ptrs;
  ptrs.reserve(samples.size());
  for (const auto& m : samples) ptrs.push_back(&m);
  return make_batch(std::span<const MatrixXd* const>(ptrs));
}

enum class Mode { Train, Eval };

// ---------------------------------------------------------------------------
// Parameters

/// Chebyshev coefficients theta[i, o, k] for F_in x F_out x K, plus a bias per
/// output channel. Stored as a (K*F_in) x F_out matrix, row k*F_in + i, so the
/// forward pass is a single product with the stacked T_k(L~) X.
struct ChebConvParams {
  MatrixXd coeffs;
  VectorXd bias;
  int num_coeffs = 1;

  ChebConvParams() = default;
  ChebConvParams(Index in_channels, Index out_channels, int k)
      : coeffs(MatrixXd::Zero(k * in_channels, out_channels)), bias(VectorXd::Zero(out_channels)), num_coeffs(k) {
    if (k < 1) throw InvalidInput("ChebConvParams: K must be >= 1");
  }

  Index in_channels() const noexcept { return coeffs.rows() / num_coeffs; }
  Index out_channels() const noexcept { return coeffs.cols(); }
  double& theta(Index i, Index o, Index k) { return coeffs(k * in_channels() + i, o); }
  double theta(Index i, Index o, Index k) const { return coeffs(k * in_channels() + i, o); }
};

/// Dense classifier: logits = pooled * weights + bias. weights(i, c) is w_i^c.
struct DenseParams {
  MatrixXd weights;
  VectorXd bias;
};

struct Parameters {
  std::vector<ChebConvParams> conv;
  DenseParams dense;

  /// Same shapes, all zeros.
  Parameters zeros_like() const {
    Parameters z = *this;
    for (auto& layer : z.conv) {
      layer.coeffs.setZero();
      layer.bias.setZero();
    }
    z.dense.weights.setZero();
    z.dense.bias.setZero();
    return z;
  }
};

struct TensorInfo {
  std::string name;
  bool is_weight;  // biases are excluded from weight decay
};

/// Calls f(info, a_tensor, b_tensor, ...) for every trainable tensor, walking
/// several same-shaped Parameters in lockstep.
template <class F, class First, class... Rest>
void for_each_tensor(F&& f, First& first, Rest&... rest) {
  for (std::size_t l = 0; l < first.conv.size(); ++l) {
    const std::string prefix = "conv" + std::to_string(l);
    f(TensorInfo{prefix + ".coeffs", true}, first.conv[l].coeffs, rest.conv[l].coeffs...);
    f(TensorInfo{prefix + ".bias", false}, first.conv[l].bias, rest.conv[l].bias...);
  }
  f(TensorInfo{"dense.weights", true}, first.dense.weights, rest.dense.weights...);
  f(TensorInfo{"dense.bias", false}, first.dense.bias, rest.dense.bias...);
}

inline std::size_t parameter_count(const Parameters& params) {
  std::size_t n = 0;
  for_each_tensor([&](const TensorInfo&, const auto& t) { n += static_cast<std::size_t>(t.size()); }, params);
  return n;
}

/// Layer widths and regularisation. Dropout layer indices are 0-based conv
/// layer positions; the default {1, 3, 4} is the 2nd, 4th and 5th layer.
struct ModelConfig {
  std::vector<int> channels{32, 32, 64, 64, 128};
  int num_coeffs = 9;
  std::set<int> dropout_layers{1, 3, 4};
  double dropout_rate = 0.5;
  int num_classes = 2;
  int input_channels = 55;

  void validate() const {
    if (channels.empty()) throw InvalidInput("model config: channels must be non-empty");
    for (int c : channels)
      if (c < 1) throw InvalidInput("model config: channel widths must be positive");
    if (num_coeffs < 1) throw InvalidInput("model config: num_coeffs must be >= 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw InvalidInput("model config: dropout rate must be in [0, 1)");
    if (num_classes < 2) throw InvalidInput("model config: need at least 2 classes");
    if (input_channels < 1) throw InvalidInput("model config: input_channels must be positive");
    for (int l : dropout_layers)
      if (l < 0 || l >= static_cast<int>(channels.size()))
        throw InvalidInput("model config: dropout layer " + std::to_string(l) + " out of range");
  }
};

struct Model {
  ModelConfig config;
  Parameters params;

  /// Shape chaining between config and parameters.
  void check_consistent() const {
    config.validate();
    if (params.conv.size() != config.channels.size()) throw InvalidInput("model: conv layer count mismatch");
    Index fan_in = config.input_channels;
    for (std::size_t l = 0; l < params.conv.size(); ++l) {
      const auto& layer = params.conv[l];
      if (layer.num_coeffs != config.num_coeffs || layer.in_channels() != fan_in ||
          layer.out_channels() != config.channels[l] || layer.bias.size() != config.channels[l] ||
          layer.coeffs.rows() != layer.num_coeffs * fan_in)
        throw InvalidInput("model: conv layer " + std::to_string(l) + " has inconsistent shape");
      fan_in = config.channels[l];
    }
    if (params.dense.weights.rows() != fan_in || params.dense.weights.cols() != config.num_classes ||
        params.dense.bias.size() != config.num_classes)
      throw InvalidInput("model: dense layer has inconsistent shape");
  }
};

/// Glorot-style uniform init with fan-in F_in*K; biases zero.
inline Model init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  Model model{config, {}};
  Index fan_in = config.input_channels;
  for (int width : config.channels) {
    ChebConvParams layer(fan_in, width, config.num_coeffs);
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in * config.num_coeffs + width));
    for (Index i = 0; i < fan_in; ++i)
      for (Index o = 0; o < width; ++o)
        for (Index k = 0; k < config.num_coeffs; ++k) layer.theta(i, o, k) = uniform(rng, -limit, limit);
    model.params.conv.push_back(std::move(layer));
    fan_in = width;
  }
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + config.num_classes));
  model.params.dense.weights.resize(fan_in, config.num_classes);
  for (Index i = 0; i < fan_in; ++i)
    for (Index c = 0; c < config.num_classes; ++c) model.params.dense.weights(i, c) = uniform(rng, -limit, limit);
  model.params.dense.bias = VectorXd::Zero(config.num_classes);
  return model;
}

// ---------------------------------------------------------------------------
// Chebyshev graph convolution

/// Batched T_k(L~) X for k < K, laid out as (B*d) x (K*F) with column block k.
inline MatrixXd cheb_stack(const ScaledLaplacian& ltilde, const NodeTensor& x, int num_coeffs) {
  if (x.nodes != ltilde.num_nodes())
    throw InvalidInput("cheb_stack: signal has " + std::to_string(x.nodes) + " nodes, Laplacian has " +
                       std::to_string(ltilde.num_nodes()));
  const Index d = x.nodes;
  const Index f = x.channels();
  const MatrixXd& lap = ltilde.matrix;
  MatrixXd stack(x.data.rows(), num_coeffs * f);
  stack.leftCols(f) = x.data;
  for (int k = 1; k < num_coeffs; ++k) {
    for (Index s = 0; s < x.batch; ++s) {
      auto out = stack.block(s * d, k * f, d, f);
      const auto prev = stack.block(s * d, (k - 1) * f, d, f);
      if (k == 1) {
        out.noalias() = lap * prev;
      } else {
        out.noalias() = 2.0 * lap * prev;
        out -= stack.block(s * d, (k - 2) * f, d, f);
      }
    }
  }
  return stack;
}

struct ChebConvCache {
  MatrixXd stack;  // cheb_stack of the layer input
  Index batch = 0;
  Index nodes = 0;
};

inline NodeTensor cheb_conv_forward(const ChebConvParams& params, const ScaledLaplacian& ltilde, const NodeTensor& x,
                                    ChebConvCache* cache = nullptr) {
  if (x.channels() != params.in_channels())
    throw InvalidInput("cheb_conv_forward: input has " + std::to_string(x.channels()) + " channels, layer expects " +
                       std::to_string(params.in_channels()));
  MatrixXd stack = cheb_stack(ltilde, x, params.num_coeffs);
  MatrixXd y = stack * params.coeffs;
  y.rowwise() += params.bias.transpose();
  if (cache) *cache = ChebConvCache{std::move(stack), x.batch, x.nodes};
  return NodeTensor(x.batch, x.nodes, std::move(y));
}

struct ChebConvGrads {
  NodeTensor grad_x;
  ChebConvParams grad_params;
};

/// T_k(L~) is symmetric, so the input gradient reuses the forward recurrence on grad_out.
inline ChebConvGrads cheb_conv_backward(const ChebConvParams& params, const ScaledLaplacian& ltilde,
                                        const ChebConvCache& cache, const NodeTensor& grad_out) {
  if (grad_out.batch != cache.batch || grad_out.nodes != cache.nodes || grad_out.channels() != params.out_channels() ||
      cache.stack.cols() != params.coeffs.rows())
    throw InvalidInput("cheb_conv_backward: gradient shape does not match the cached forward pass");
  const Index fin = params.in_channels();
  const Index fout = params.out_channels();
  ChebConvGrads g;
  g.grad_params.num_coeffs = params.num_coeffs;
  g.grad_params.coeffs.noalias() = cache.stack.transpose() * grad_out.data;
  g.grad_params.bias = grad_out.data.colwise().sum().transpose();

  const MatrixXd out_stack = cheb_stack(ltilde, grad_out, params.num_coeffs);
  MatrixXd grad_x = MatrixXd::Zero(grad_out.data.rows(), fin);
  for (int k = 0; k < params.num_coeffs; ++k)
    grad_x.noalias() += out_stack.middleCols(k * fout, fout) * params.coeffs.middleRows(k * fin, fin).transpose();
  g.grad_x = NodeTensor(grad_out.batch, grad_out.nodes, std::move(grad_x));
  return g;
}

// ---------------------------------------------------------------------------
// Elementwise layers, pooling, classifier

inline MatrixXd relu_forward(const MatrixXd& x) { return x.cwiseMax(0.0); }

/// Subgradient 0 at exactly 0.
inline MatrixXd relu_backward(const MatrixXd& grad_out, const MatrixXd& pre_activation) {
  return (pre_activation.array() > 0.0).select(grad_out, 0.0);
}

struct DropoutResult {
  MatrixXd output;
  MatrixXd mask;  // 0 or 1/(1-p) per entry; empty in eval mode
};

/// Inverted dropout. Eval mode returns the input unchanged.
inline DropoutResult dropout_forward(const MatrixXd& x, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw InvalidInput("dropout: rate must be in [0, 1)");
  if (mode == Mode::Eval) return {x, MatrixXd()};
  const double keep_scale = 1.0 / (1.0 - rate);
  MatrixXd mask(x.rows(), x.cols());
  for (Index j = 0; j < mask.cols(); ++j)
    for (Index i = 0; i < mask.rows(); ++i) mask(i, j) = uniform01(rng) < rate ? 0.0 : keep_scale;
  return {x.cwiseProduct(mask), std::move(mask)};
}

inline MatrixXd dropout_backward(const MatrixXd& grad_out, const MatrixXd& mask) {
  if (mask.size() == 0) return grad_out;
  if (mask.rows() != grad_out.rows() || mask.cols() != grad_out.cols())
    throw InvalidInput("dropout_backward: mask shape mismatch");
  return grad_out.cwiseProduct(mask);
}

/// Node mean per sample and channel: (B*d) x F -> B x F.
inline MatrixXd gap_forward(const NodeTensor& x) {
  MatrixXd pooled(x.batch, x.channels());
  for (Index s = 0; s < x.batch; ++s) pooled.row(s) = x.sample(s).colwise().mean();
  return pooled;
}

inline NodeTensor gap_backward(const MatrixXd& grad_pooled, Index nodes) {
  const Index batch = grad_pooled.rows();
  NodeTensor g(batch, nodes, MatrixXd(batch * nodes, grad_pooled.cols()));
  const double inv = 1.0 / static_cast<double>(nodes);
  for (Index s = 0; s < batch; ++s) g.sample(s).rowwise() = inv * grad_pooled.row(s);
  return g;
}

inline MatrixXd dense_forward(const DenseParams& params, const MatrixXd& pooled) {
  if (pooled.cols() != params.weights.rows())
    throw InvalidInput("dense_forward: input width " + std::to_string(pooled.cols()) + " != " +
                       std::to_string(params.weights.rows()));
  MatrixXd logits = pooled * params.weights;
  logits.rowwise() += params.bias.transpose();
  return logits;
}

struct DenseGrads {
  MatrixXd grad_pooled;
  DenseParams grad_params;
};

inline DenseGrads dense_backward(const DenseParams& params, const MatrixXd& pooled, const MatrixXd& grad_logits) {
  if (grad_logits.rows() != pooled.rows() || grad_logits.cols() != params.weights.cols())
    throw InvalidInput("dense_backward: gradient shape mismatch");
  DenseGrads g;
  g.grad_pooled.noalias() = grad_logits * params.weights.transpose();
  g.grad_params.weights.noalias() = pooled.transpose() * grad_logits;
  g.grad_params.bias = grad_logits.colwise().sum().transpose();
  return g;
}

// ---------------------------------------------------------------------------
// Loss

struct LossResult {
  double loss = 0.0;
  MatrixXd grad_logits;
};

/// Mean negative log-likelihood of the labels under softmax(logits).
inline LossResult softmax_cross_entropy(const MatrixXd& logits, std::span<const int> labels) {
  const Index batch = logits.rows();
  if (batch == 0 || static_cast<std::size_t>(batch) != labels.size())
    throw InvalidInput("softmax_cross_entropy: logits/labels size mismatch");
  if (!logits.allFinite()) throw NumericalError("softmax_cross_entropy: non-finite logits");
  LossResult r;
  r.grad_logits.resize(batch, logits.cols());
  double total = 0.0;
  for (Index s = 0; s < batch; ++s) {
    const int label = labels[static_cast<std::size_t>(s)];
    if (label < 0 || label >= logits.cols())
      throw InvalidInput("softmax_cross_entropy: label " + std::to_string(label) + " out of range");
    const double peak = logits.row(s).maxCoeff();
    const Eigen::RowVectorXd shifted = logits.row(s).array() - peak;
    const double log_norm = std::log(shifted.array().exp().sum());
    total += log_norm - shifted(label);
    r.grad_logits.row(s) = (shifted.array() - log_norm).exp();
    r.grad_logits(s, label) -= 1.0;
  }
  const double inv = 1.0 / static_cast<double>(batch);
  r.loss = total * inv;
  r.grad_logits *= inv;
  return r;
}

struct PenaltyResult {
  double loss = 0.0;
  Parameters grad;
};

/// decay * sum of squared conv coefficients and dense weights; biases excluded.
inline PenaltyResult l2_penalty(const Parameters& params, double decay) {
  if (!(decay >= 0.0)) throw InvalidInput("l2_penalty: decay must be >= 0");
  PenaltyResult r{0.0, params.zeros_like()};
  for_each_tensor(
      [&](const TensorInfo& info, const auto& p, auto& g) {
        if (!info.is_weight) return;
        r.loss += decay * p.squaredNorm();
        g = 2.0 * decay * p;
      },
      params, r.grad);
  return r;
}

// ---------------------------------------------------------------------------
// Model

struct ConvLayerTrace {
  ChebConvCache conv;
  MatrixXd pre_activation;
  MatrixXd dropout_mask;
};

/// Everything model_backward and class activation mapping need.
/// last_conv_features is the tensor fed to global average pooling: the final
/// conv block's post-ReLU maps (after dropout when that layer drops in train mode).
struct ForwardTrace {
  Mode mode = Mode::Eval;
  std::vector<ConvLayerTrace> layers;
  NodeTensor last_conv_features;
  MatrixXd pooled;
  MatrixXd logits;
};

/// Dropout masks are drawn from a stream seeded by `seed`, layer by layer.
inline ForwardTrace model_forward(const Model& model, const ScaledLaplacian& ltilde, const NodeTensor& batch, Mode mode,
                                  std::uint64_t seed = 0) {
  const auto& cfg = model.config;
  if (batch.channels() != cfg.input_channels)
    throw InvalidInput("model_forward: batch has " + std::to_string(batch.channels()) + " input channels, model expects " +
                       std::to_string(cfg.input_channels));
  if (batch.nodes != ltilde.num_nodes()) throw InvalidInput("model_forward: batch/graph node count mismatch");
  if (model.params.conv.size() != cfg.channels.size()) throw InvalidInput("model_forward: malformed model");

  Rng rng(seed);
  ForwardTrace trace;
  trace.mode = mode;
  trace.layers.resize(model.params.conv.size());
  NodeTensor h = batch;
  for (std::size_t l = 0; l < model.params.conv.size(); ++l) {
    auto& lt = trace.layers[l];
    NodeTensor z = cheb_conv_forward(model.params.conv[l], ltilde, h, &lt.conv);
    MatrixXd a = relu_forward(z.data);
    lt.pre_activation = std::move(z.data);
    if (mode == Mode::Train && cfg.dropout_layers.contains(static_cast<int>(l))) {
      auto dropped = dropout_forward(a, cfg.dropout_rate, mode, rng);
      a = std::move(dropped.output);
      lt.dropout_mask = std::move(dropped.mask);
    }
    h = NodeTensor(batch.batch, batch.nodes, std::move(a));
  }
  trace.pooled = gap_forward(h);
  trace.logits = dense_forward(model.params.dense, trace.pooled);
  trace.last_conv_features = std::move(h);
  return trace;
}

/// Reverse pass through dense, GAP, dropout (cached masks), ReLU and conv.
inline Parameters model_backward(const Model& model, const ScaledLaplacian& ltilde, const ForwardTrace& trace,
                                 const MatrixXd& grad_logits) {
  if (trace.mode != Mode::Train) throw InvalidState("model_backward: trace was not produced by a train-mode forward");
  if (trace.layers.size() != model.params.conv.size())
    throw InvalidState("model_backward: trace does not belong to this model");
  if (grad_logits.rows() != trace.logits.rows() || grad_logits.cols() != trace.logits.cols())
    throw InvalidInput("model_backward: grad_logits shape mismatch");

  Parameters grads;
  grads.conv.resize(model.params.conv.size());
  auto dense = dense_backward(model.params.dense, trace.pooled, grad_logits);
  grads.dense = std::move(dense.grad_params);
  NodeTensor g = gap_backward(dense.grad_pooled, trace.last_conv_features.nodes);
  for (std::size_t l = model.params.conv.size(); l-- > 0;) {
    const auto& lt = trace.layers[l];
    g.data = relu_backward(dropout_backward(g.data, lt.dropout_mask), lt.pre_activation);
    auto conv = cheb_conv_backward(model.params.conv[l], ltilde, lt.conv, g);
    grads.conv[l] = std::move(conv.grad_params);
    g = std::move(conv.grad_x);
  }
  return grads;
}

/// Eval-mode logits in chunks of at most `chunk` samples.
inline MatrixXd predict_logits(const Model& model, const ScaledLaplacian& ltilde,
                               std::span<const MatrixXd* const> samples, std::size_t chunk = 256) {
  MatrixXd logits(static_cast<Index>(samples.size()), model.config.num_classes);
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    const std::size_t n = std::min(chunk, samples.size() - start);
    const auto trace = model_forward(model, ltilde, make_batch(samples.subspan(start, n)), Mode::Eval);
    logits.middleRows(static_cast<Index>(start), static_cast<Index>(n)) = trace.logits;
  }
  return logits;
}

}  // namespace chebcam
