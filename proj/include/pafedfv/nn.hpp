#pragma once

// Small fully connected networks with analytic gradients.
//
// Parameters live in one flat vector per network. Each dense layer stores its
// weight matrix row-major (out x in) followed by the optional bias (out).

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pafedfv/errors.hpp"
#include "pafedfv/random.hpp"

namespace pafedfv {

namespace detail {

inline bool all_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

inline void require_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": length " + std::to_string(a) + " vs " + std::to_string(b));
  }
}

}  // namespace detail

// Flat, finite, non-empty vector of reals. The tag keeps parameters and
// gradients from being mixed up at compile time.
template <typename Tag>
class FlatVector {
public:
  FlatVector() = default;

  explicit FlatVector(std::vector<double> values) : values_(std::move(values)) {
    if (values_.empty()) throw DomainError(std::string(Tag::name) + " must be non-empty");
    if (!detail::all_finite(values_)) throw DomainError(std::string(Tag::name) + " has non-finite entries");
  }

  static FlatVector zeros(std::size_t n) { return FlatVector(std::vector<double>(n, 0.0)); }

  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }
  double operator[](std::size_t i) const { return values_[i]; }
  std::span<const double> view() const noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }

  // Bitwise comparison; -0.0 and +0.0 differ, NaN never occurs.
  friend bool operator==(const FlatVector& a, const FlatVector& b) {
    return a.values_.size() == b.values_.size() &&
           (a.values_.empty() ||
            std::memcmp(a.values_.data(), b.values_.data(), a.values_.size() * sizeof(double)) == 0);
  }

  // FNV-1a over the raw bytes.
  std::uint64_t checksum() const noexcept {
    const std::string_view bytes(reinterpret_cast<const char*>(values_.data()), values_.size() * sizeof(double));
    return fnv1a(bytes);
  }

private:
  std::vector<double> values_;
};

struct ParamTag {
  static constexpr const char* name = "ParamVector";
};
struct GradientTag {
  static constexpr const char* name = "GradientRecord";
};

using ParamVector = FlatVector<ParamTag>;
using GradientRecord = FlatVector<GradientTag>;

enum class Activation { Identity, Tanh };

struct LayerSpec {
  std::size_t in = 0;
  std::size_t out = 0;
  bool bias = true;
  Activation activation = Activation::Identity;

  std::size_t param_count() const noexcept { return in * out + (bias ? out : 0); }
};

// Result of a backward pass: parameter gradient plus gradient w.r.t. the input,
// which lets callers chain networks.
struct Backprop {
  GradientRecord params;
  std::vector<double> input;
};

// Stack of dense layers over one flat parameter vector.
class Network {
public:
  Network() = default;

  Network(std::vector<LayerSpec> layers, ParamVector params) : layers_(std::move(layers)), params_(std::move(params)) {
    validate_layers(layers_);
    detail::require_same_length(params_.size(), param_count(layers_), "Network parameters");
  }

  static std::size_t param_count(const std::vector<LayerSpec>& layers) {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.param_count();
    return n;
  }

  // Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases.
  static ParamVector init_params(const std::vector<LayerSpec>& layers, Rng& rng) {
    validate_layers(layers);
    std::vector<double> p;
    p.reserve(param_count(layers));
    for (const auto& l : layers) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(l.in));
      for (std::size_t i = 0; i < l.param_count(); ++i) p.push_back(rng.uniform(-bound, bound));
    }
    return ParamVector(std::move(p));
  }

  std::size_t in_dim() const { return layers_.front().in; }
  std::size_t out_dim() const { return layers_.back().out; }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  const ParamVector& params() const noexcept { return params_; }

  void set_params(ParamVector p) {
    detail::require_same_length(p.size(), params_.size(), "Network::set_params");
    params_ = std::move(p);
  }

  std::vector<double> forward(std::span<const double> input) const {
    check_input(input);
    std::vector<double> x(input.begin(), input.end());
    std::size_t offset = 0;
    for (const auto& l : layers_) {
      x = apply_layer(l, offset, x);
      offset += l.param_count();
    }
    return x;
  }

  Backprop backward(std::span<const double> input, std::span<const double> upstream) const {
    std::vector<double> grad(params_.size(), 0.0);
    auto dx = backward_into(input, upstream, grad, 1.0);
    return Backprop{GradientRecord(std::move(grad)), std::move(dx)};
  }

  // Adds scale * dL/dparams into `grad` and returns dL/dinput (unscaled).
  std::vector<double> backward_into(std::span<const double> input, std::span<const double> upstream,
                                    std::span<double> grad, double scale) const {
    check_input(input);
    detail::require_same_length(upstream.size(), out_dim(), "backward upstream gradient");
    detail::require_same_length(grad.size(), params_.size(), "backward gradient buffer");

    // Keep every layer's input and output for the reverse sweep.
    std::vector<std::vector<double>> acts;
    acts.reserve(layers_.size() + 1);
    acts.emplace_back(input.begin(), input.end());
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const auto& l : layers_) {
      offsets.push_back(offset);
      acts.push_back(apply_layer(l, offset, acts.back()));
      offset += l.param_count();
    }

    const auto& p = params_.values();
    std::vector<double> delta(upstream.begin(), upstream.end());
    for (std::size_t li = layers_.size(); li-- > 0;) {
      const auto& l = layers_[li];
      const auto& x = acts[li];
      const auto& y = acts[li + 1];
      if (l.activation == Activation::Tanh) {
        for (std::size_t o = 0; o < l.out; ++o) delta[o] *= 1.0 - y[o] * y[o];
      }
      const std::size_t w0 = offsets[li];
      std::vector<double> dx(l.in, 0.0);
      for (std::size_t o = 0; o < l.out; ++o) {
        const double d = delta[o];
        const double sd = scale * d;
        const std::size_t row = w0 + o * l.in;
        for (std::size_t i = 0; i < l.in; ++i) {
          grad[row + i] += sd * x[i];
          dx[i] += d * p[row + i];
        }
        if (l.bias) grad[w0 + l.in * l.out + o] += sd;
      }
      delta = std::move(dx);
    }
    return delta;
  }

private:
  static void validate_layers(const std::vector<LayerSpec>& layers) {
    if (layers.empty()) throw ShapeError("Network needs at least one layer");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].in == 0 || layers[i].out == 0) throw ShapeError("Network layer with zero width");
      if (i > 0 && layers[i].in != layers[i - 1].out) throw ShapeError("Network layer widths do not chain");
    }
  }

  void check_input(std::span<const double> input) const {
    detail::require_same_length(input.size(), in_dim(), "forward input");
    if (!detail::all_finite(input)) throw DomainError("forward input has non-finite entries");
  }

  std::vector<double> apply_layer(const LayerSpec& l, std::size_t offset, std::span<const double> x) const {
    const auto& p = params_.values();
    std::vector<double> y(l.out);
    for (std::size_t o = 0; o < l.out; ++o) {
      const std::size_t row = offset + o * l.in;
      double acc = l.bias ? p[offset + l.in * l.out + o] : 0.0;
      for (std::size_t i = 0; i < l.in; ++i) acc += p[row + i] * x[i];
      y[o] = l.activation == Activation::Tanh ? std::tanh(acc) : acc;
    }
    return y;
  }

  std::vector<LayerSpec> layers_;
  ParamVector params_;
};

// Layer widths from input to embedding, e.g. {32, 64, 16}. Hidden layers use
// `activation`; the output layer is affine.
struct ChannelArch {
  std::vector<std::size_t> widths;
  Activation activation = Activation::Tanh;

  std::vector<LayerSpec> layers() const {
    if (widths.size() < 2) throw ShapeError("ChannelArch needs at least input and output widths");
    std::vector<LayerSpec> out;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      const bool last = i + 2 == widths.size();
      out.push_back({widths[i], widths[i + 1], true, last ? Activation::Identity : activation});
    }
    return out;
  }

  friend bool operator==(const ChannelArch&, const ChannelArch&) = default;
};

// Feature extractor: the local or the federated channel of a client model.
class ChannelModel {
public:
  ChannelModel() = default;

  ChannelModel(ChannelArch arch, ParamVector params) : arch_(std::move(arch)), net_(arch_.layers(), std::move(params)) {}

  static ChannelModel init(ChannelArch arch, Rng& rng) {
    auto layers = arch.layers();
    auto params = Network::init_params(layers, rng);
    return ChannelModel(std::move(arch), std::move(params));
  }

  static std::size_t param_count(const ChannelArch& arch) { return Network::param_count(arch.layers()); }

  const ChannelArch& arch() const noexcept { return arch_; }
  std::size_t in_dim() const { return net_.in_dim(); }
  std::size_t out_dim() const { return net_.out_dim(); }
  const ParamVector& params() const noexcept { return net_.params(); }
  void set_params(ParamVector p) { net_.set_params(std::move(p)); }
  const Network& network() const noexcept { return net_; }

private:
  ChannelArch arch_;
  Network net_;
};

enum class HeadKind {
  Classifier,  // bias-free linear layer (local-channel and fused classifiers)
  Fusion,      // bias-free linear layer followed by tanh
};

class Head {
public:
  Head() = default;

  Head(HeadKind kind, std::size_t in_dim, std::size_t out_dim, ParamVector params)
      : kind_(kind), net_(layers_for(kind, in_dim, out_dim), std::move(params)) {}

  static Head init(HeadKind kind, std::size_t in_dim, std::size_t out_dim, Rng& rng) {
    return Head(kind, in_dim, out_dim, Network::init_params(layers_for(kind, in_dim, out_dim), rng));
  }

  // Identity weights on the leading diagonal; used for wiring checks.
  static Head identity(HeadKind kind, std::size_t in_dim, std::size_t out_dim) {
    std::vector<double> w(in_dim * out_dim, 0.0);
    for (std::size_t i = 0; i < std::min(in_dim, out_dim); ++i) w[i * in_dim + i] = 1.0;
    return Head(kind, in_dim, out_dim, ParamVector(std::move(w)));
  }

  static std::vector<LayerSpec> layers_for(HeadKind kind, std::size_t in_dim, std::size_t out_dim) {
    return {LayerSpec{in_dim, out_dim, false, kind == HeadKind::Fusion ? Activation::Tanh : Activation::Identity}};
  }

  HeadKind kind() const noexcept { return kind_; }
  std::size_t in_dim() const { return net_.in_dim(); }
  std::size_t out_dim() const { return net_.out_dim(); }
  const ParamVector& params() const noexcept { return net_.params(); }
  void set_params(ParamVector p) { net_.set_params(std::move(p)); }
  const Network& network() const noexcept { return net_; }

private:
  HeadKind kind_ = HeadKind::Classifier;
  Network net_;
};

template <typename M>
concept Differentiable = requires(const M& m) {
  { m.network() } -> std::same_as<const Network&>;
};

template <Differentiable M>
std::vector<double> forward(const M& model, std::span<const double> input) {
  return model.network().forward(input);
}

template <Differentiable M>
Backprop backward(const M& model, std::span<const double> input, std::span<const double> upstream) {
  return model.network().backward(input, upstream);
}

// params - lr * grads. lr = 0 is accepted and returns params unchanged.
inline ParamVector sgd_step(const ParamVector& params, const GradientRecord& grads, double lr) {
  detail::require_same_length(params.size(), grads.size(), "sgd_step");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw DomainError("sgd_step: learning rate must be finite and >= 0");
  std::vector<double> out(params.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = params[i] - lr * grads[i];
  return ParamVector(std::move(out));
}

// Sum of gradients, each scaled by `scale`. Used to average minibatch gradients.
class GradientAccumulator {
public:
  explicit GradientAccumulator(std::size_t n) : sum_(n, 0.0) {}

  void add(const GradientRecord& g, double scale = 1.0) {
    detail::require_same_length(g.size(), sum_.size(), "GradientAccumulator::add");
    for (std::size_t i = 0; i < sum_.size(); ++i) sum_[i] += scale * g[i];
  }

  // Backpropagates through `model`, adding scale * dL/dparams; returns dL/dinput.
  template <typename M>
  std::vector<double> add_backward(const M& model, std::span<const double> input, std::span<const double> upstream,
                                   double scale = 1.0) {
    return model.network().backward_into(input, upstream, sum_, scale);
  }

  GradientRecord result() const { return GradientRecord(sum_); }

private:
  std::vector<double> sum_;
};

}  // namespace pafedfv
