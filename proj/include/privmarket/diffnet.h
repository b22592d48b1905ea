// Copyright 2026 The privmarket Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// A small feed-forward network engine: batched forward evaluation with a
// tape, exact reverse-mode gradients for parameters and inputs, Adam, and a
// versioned text checkpoint format.
//
// Batches are row-major in the logical sense: one sample per row. A dense
// layer stores its weight as (fan_in x fan_out) so that Z = X * W + 1 b.

#ifndef PRIVMARKET_DIFFNET_H_
#define PRIVMARKET_DIFFNET_H_

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace privmarket {

enum class Activation { kIdentity, kRelu, kSigmoid, kSoftmax };

inline const char* ActivationName(Activation a) {
  switch (a) {
    case Activation::kIdentity:
      return "identity";
    case Activation::kRelu:
      return "relu";
    case Activation::kSigmoid:
      return "sigmoid";
    case Activation::kSoftmax:
      return "softmax";
  }
  return "identity";
}

inline Activation ParseActivation(const std::string& s) {
  if (s == "identity") return Activation::kIdentity;
  if (s == "relu") return Activation::kRelu;
  if (s == "sigmoid") return Activation::kSigmoid;
  if (s == "softmax") return Activation::kSoftmax;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

template <typename T>
using MatrixT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using RowVectorT = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using VectorT = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
inline T Sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// Softmax down each column: entry (i, j) = exp(h_ij) / sum_i' exp(h_i'j).
template <typename Derived>
MatrixT<typename Derived::Scalar> SoftmaxColumns(
    const Eigen::MatrixBase<Derived>& logits) {
  using T = typename Derived::Scalar;
  MatrixT<T> out(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const T mx = logits.col(j).maxCoeff();
    out.col(j) = (logits.col(j).array() - mx).exp();
    out.col(j) /= out.col(j).sum();
  }
  return out;
}

template <typename T>
struct BasicDenseLayer {
  MatrixT<T> weight;  // fan_in x fan_out
  RowVectorT<T> bias;
};

// Hidden layers use ReLU; the last layer uses `output_activation`.
template <typename T>
class BasicMlp {
 public:
  using Scalar = T;
  using Layer = BasicDenseLayer<T>;

  BasicMlp() = default;

  // Zero-initialised parameters.
  BasicMlp(std::vector<int> dims, Activation output_activation)
      : dims_(std::move(dims)), output_(output_activation) {
    if (dims_.size() < 2) {
      throw std::invalid_argument("Mlp: need at least input and output dims");
    }
    for (int d : dims_) {
      if (d < 1) throw std::invalid_argument("Mlp: dims must be positive");
    }
    layers_.resize(dims_.size() - 1);
    for (size_t l = 0; l + 1 < dims_.size(); ++l) {
      layers_[l].weight = MatrixT<T>::Zero(dims_[l], dims_[l + 1]);
      layers_[l].bias = RowVectorT<T>::Zero(dims_[l + 1]);
    }
  }

  // Fan-balanced uniform weights, zero biases.
  template <typename Rng>
  static BasicMlp Glorot(std::vector<int> dims, Activation output_activation,
                         Rng& rng) {
    BasicMlp net(std::move(dims), output_activation);
    for (auto& layer : net.layers_) {
      const double limit =
          std::sqrt(6.0 / static_cast<double>(layer.weight.rows() +
                                              layer.weight.cols()));
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) {
        for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
          layer.weight(r, c) = static_cast<T>(dist(rng));
        }
      }
    }
    return net;
  }

  // Same architecture with every parameter converted to `U`.
  template <typename U>
  BasicMlp<U> Cast() const {
    BasicMlp<U> out(dims_, output_);
    for (int l = 0; l < num_layers(); ++l) {
      auto& dst = out.mutable_layer(l);
      dst.weight = layers_[l].weight.template cast<U>();
      dst.bias = layers_[l].bias.template cast<U>();
    }
    return out;
  }

  const std::vector<int>& dims() const { return dims_; }
  int input_dim() const { return dims_.front(); }
  int output_dim() const { return dims_.back(); }
  int num_layers() const { return static_cast<int>(layers_.size()); }
  Activation output_activation() const { return output_; }
  const Layer& layer(int l) const { return layers_[l]; }

  // Any mutable access invalidates outstanding tapes.
  Layer& mutable_layer(int l) {
    ++version_;
    return layers_[l];
  }
  uint64_t version() const { return version_; }

  int64_t num_parameters() const {
    int64_t n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
  }

  // Weight then bias per layer; the same order as Gradients::Spans().
  std::vector<std::span<T>> ParameterSpans() {
    ++version_;
    std::vector<std::span<T>> spans;
    for (auto& l : layers_) {
      spans.emplace_back(l.weight.data(), static_cast<size_t>(l.weight.size()));
      spans.emplace_back(l.bias.data(), static_cast<size_t>(l.bias.size()));
    }
    return spans;
  }

  bool AllFinite() const {
    for (const auto& l : layers_) {
      if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
    }
    return true;
  }

 private:
  std::vector<int> dims_;
  Activation output_ = Activation::kIdentity;
  std::vector<Layer> layers_;
  uint64_t version_ = 0;
};

// Cached post-activations; activations[0] is the input.
template <typename T>
struct BasicTape {
  std::vector<MatrixT<T>> activations;
  const BasicMlp<T>* net = nullptr;
  uint64_t net_version = 0;
};

template <typename T>
struct BasicMlpOutput {
  MatrixT<T> output;
  BasicTape<T> tape;
};

template <typename T>
struct BasicGradients {
  std::vector<BasicDenseLayer<T>> layers;
  MatrixT<T> input;

  static BasicGradients ZerosLike(const BasicMlp<T>& net) {
    BasicGradients g;
    g.layers.resize(net.num_layers());
    for (int l = 0; l < net.num_layers(); ++l) {
      g.layers[l].weight = MatrixT<T>::Zero(net.layer(l).weight.rows(),
                                            net.layer(l).weight.cols());
      g.layers[l].bias = RowVectorT<T>::Zero(net.layer(l).bias.size());
    }
    return g;
  }

  // Accumulates parameter gradients (input gradients are not summed).
  BasicGradients& operator+=(const BasicGradients& other) {
    if (layers.empty()) {
      layers = other.layers;
      return *this;
    }
    for (size_t l = 0; l < layers.size(); ++l) {
      layers[l].weight += other.layers[l].weight;
      layers[l].bias += other.layers[l].bias;
    }
    return *this;
  }

  BasicGradients& operator*=(T s) {
    for (auto& l : layers) {
      l.weight *= s;
      l.bias *= s;
    }
    return *this;
  }

  std::vector<std::span<const T>> Spans() const {
    std::vector<std::span<const T>> spans;
    for (const auto& l : layers) {
      spans.emplace_back(l.weight.data(), static_cast<size_t>(l.weight.size()));
      spans.emplace_back(l.bias.data(), static_cast<size_t>(l.bias.size()));
    }
    return spans;
  }

  bool AllFinite() const {
    for (const auto& l : layers) {
      if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
    }
    return true;
  }
};

using DenseLayer = BasicDenseLayer<double>;
using Mlp = BasicMlp<double>;
using Tape = BasicTape<double>;
using MlpOutput = BasicMlpOutput<double>;
using Gradients = BasicGradients<double>;

namespace internal {

template <typename T>
void ApplyActivation(Activation a, MatrixT<T>& z) {
  switch (a) {
    case Activation::kIdentity:
      return;
    case Activation::kRelu:
      z = z.cwiseMax(T(0));
      return;
    case Activation::kSigmoid:
      z = z.unaryExpr([](T x) { return Sigmoid(x); });
      return;
    case Activation::kSoftmax:
      // Per sample, i.e. across each row.
      z = SoftmaxColumns(z.transpose()).transpose();
      return;
  }
}

// Turns dL/d(post-activation) into dL/d(pre-activation) in place.
template <typename T>
void ActivationBackward(Activation a, const MatrixT<T>& post,
                        MatrixT<T>& grad) {
  switch (a) {
    case Activation::kIdentity:
      return;
    case Activation::kRelu:
      grad = (post.array() > T(0)).select(grad, T(0));
      return;
    case Activation::kSigmoid:
      grad.array() *= post.array() * (T(1) - post.array());
      return;
    case Activation::kSoftmax: {
      const VectorT<T> dot = (grad.array() * post.array()).rowwise().sum();
      grad = (post.array() * (grad.colwise() - dot).array()).matrix();
      return;
    }
  }
}

}  // namespace internal

template <typename T>
BasicMlpOutput<T> Forward(const BasicMlp<T>& net, const MatrixT<T>& input) {
  if (input.cols() != net.input_dim()) {
    throw std::invalid_argument(
        "Forward: input width " + std::to_string(input.cols()) +
        " does not match layer_dims[0] = " + std::to_string(net.input_dim()));
  }
  BasicMlpOutput<T> out;
  out.tape.net = &net;
  out.tape.net_version = net.version();
  out.tape.activations.reserve(net.num_layers() + 1);
  out.tape.activations.push_back(input);
  for (int l = 0; l < net.num_layers(); ++l) {
    const auto& layer = net.layer(l);
    MatrixT<T> z(out.tape.activations.back().rows(), layer.weight.cols());
    z.noalias() = out.tape.activations.back() * layer.weight;
    z.rowwise() += layer.bias;
    internal::ApplyActivation<T>(
        l + 1 == net.num_layers() ? net.output_activation() : Activation::kRelu,
        z);
    out.tape.activations.push_back(std::move(z));
  }
  out.output = out.tape.activations.back();
  return out;
}

// Reverse pass. With `param_grads` false only the input gradient is formed.
template <typename T>
BasicGradients<T> Backward(const BasicMlp<T>& net, const BasicTape<T>& tape,
                           const MatrixT<T>& output_grad,
                           bool param_grads = true) {
  if (tape.net != &net || tape.net_version != net.version() ||
      static_cast<int>(tape.activations.size()) != net.num_layers() + 1) {
    throw std::logic_error("Backward: stale or mismatched tape");
  }
  const MatrixT<T>& out = tape.activations.back();
  if (output_grad.rows() != out.rows() || output_grad.cols() != out.cols()) {
    throw std::invalid_argument("Backward: output_grad shape mismatch");
  }
  BasicGradients<T> g;
  if (param_grads) g.layers.resize(net.num_layers());
  MatrixT<T> delta = output_grad;
  internal::ActivationBackward<T>(net.output_activation(), out, delta);
  for (int l = net.num_layers() - 1; l >= 0; --l) {
    const MatrixT<T>& in = tape.activations[l];
    if (param_grads) {
      g.layers[l].weight.noalias() = in.transpose() * delta;
      g.layers[l].bias = delta.colwise().sum();
    }
    MatrixT<T> upstream(delta.rows(), net.layer(l).weight.rows());
    upstream.noalias() = delta * net.layer(l).weight.transpose();
    if (l > 0) {
      internal::ActivationBackward<T>(Activation::kRelu, in, upstream);
    }
    delta = std::move(upstream);
  }
  g.input = std::move(delta);
  return g;
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(AdamConfig config) : config_(config) {}

  const AdamConfig& config() const { return config_; }
  int64_t step() const { return step_; }

  // Bias-corrected adaptive-moment update over matching parameter blocks.
  void Step(std::span<const std::span<double>> params,
            std::span<const std::span<const double>> grads) {
    if (params.size() != grads.size()) {
      throw std::invalid_argument("Adam: parameter/gradient block mismatch");
    }
    if (first_.empty()) {
      for (const auto& p : params) {
        first_.emplace_back(p.size(), 0.0);
        second_.emplace_back(p.size(), 0.0);
      }
    }
    if (first_.size() != params.size()) {
      throw std::invalid_argument("Adam: parameter layout changed");
    }
    ++step_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    for (size_t b = 0; b < params.size(); ++b) {
      if (params[b].size() != grads[b].size() ||
          params[b].size() != first_[b].size()) {
        throw std::invalid_argument("Adam: block shape mismatch");
      }
      auto& m = first_[b];
      auto& v = second_[b];
      for (size_t k = 0; k < params[b].size(); ++k) {
        const double g = grads[b][k];
        m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * g;
        v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * g * g;
        params[b][k] -= config_.learning_rate * (m[k] / c1) /
                        (std::sqrt(v[k] / c2) + config_.epsilon);
      }
    }
  }

 private:
  AdamConfig config_;
  int64_t step_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

inline void AdamStep(AdamState& state, Mlp& net, const Gradients& grads) {
  const auto params = net.ParameterSpans();
  const auto g = grads.Spans();
  state.Step(params, g);
}

// Checkpoint layout (text, one token stream):
//   mlp v1
//   dims <L+1> d0 d1 ... dL
//   output <activation>
//   then per layer: weight rows (fan_in lines of fan_out values, row-major),
//   followed by one line of fan_out bias values.
// Values are written with 17 significant digits, which round-trips doubles.
inline void WriteMlp(std::ostream& os, const Mlp& net) {
  os << "mlp v1\n";
  os << "dims " << net.dims().size();
  for (int d : net.dims()) os << ' ' << d;
  os << "\noutput " << ActivationName(net.output_activation()) << '\n';
  os << std::setprecision(17);
  for (int l = 0; l < net.num_layers(); ++l) {
    const DenseLayer& layer = net.layer(l);
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) {
        os << (c ? " " : "") << layer.weight(r, c);
      }
      os << '\n';
    }
    for (Eigen::Index c = 0; c < layer.bias.size(); ++c) {
      os << (c ? " " : "") << layer.bias(c);
    }
    os << '\n';
  }
}

inline Mlp ReadMlp(std::istream& is) {
  std::string tag, version;
  if (!(is >> tag >> version) || tag != "mlp" || version != "v1") {
    throw std::runtime_error("ReadMlp: bad header (expected 'mlp v1')");
  }
  std::string key;
  size_t count = 0;
  if (!(is >> key >> count) || key != "dims" || count < 2 || count > 64) {
    throw std::runtime_error("ReadMlp: bad dims record");
  }
  std::vector<int> dims(count);
  for (auto& d : dims) {
    if (!(is >> d) || d < 1 || d > (1 << 20)) {
      throw std::runtime_error("ReadMlp: bad dimension");
    }
  }
  std::string act;
  if (!(is >> key >> act) || key != "output") {
    throw std::runtime_error("ReadMlp: bad output record");
  }
  Mlp net(dims, ParseActivation(act));
  for (int l = 0; l < net.num_layers(); ++l) {
    DenseLayer& layer = net.mutable_layer(l);
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) {
        if (!(is >> layer.weight(r, c))) {
          throw std::runtime_error("ReadMlp: truncated weights");
        }
      }
    }
    for (Eigen::Index c = 0; c < layer.bias.size(); ++c) {
      if (!(is >> layer.bias(c))) {
        throw std::runtime_error("ReadMlp: truncated biases");
      }
    }
  }
  if (!net.AllFinite()) throw std::runtime_error("ReadMlp: non-finite value");
  return net;
}

}  // namespace privmarket

#endif  // PRIVMARKET_DIFFNET_H_
