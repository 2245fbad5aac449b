#pragma once
// Parameterized building blocks over the tensor core.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "bevx/tensor.hpp"

namespace bevx {

/// Named handle to a learned tensor; names are stable dotted paths.
struct NamedParam {
  std::string name;
  Tensor* tensor;
};
using ParamList = std::vector<NamedParam>;

using Rng = std::mt19937_64;

inline Tensor normal_param(const Shape& shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> d(numel(shape));
  for (double& v : d) v = stddev * dist(rng);
  return Tensor(shape, std::move(d), true);
}

/// y = x W (+ b) over the last axis; W is [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;
  bool has_bias = true;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, bool with_bias, Rng& rng, double gain = 1.0)
      : weight(normal_param({in, out}, gain / std::sqrt(static_cast<double>(in)), rng)),
        bias(Tensor::zeros({out}, true)),
        has_bias(with_bias) {}

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor operator()(const Tensor& x) const {
    if (x.rank() == 0 || x.shape().back() != in_features()) {
      throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " +
                       shape_str(weight.shape()));
    }
    Tensor y = matmul(x, weight);
    return has_bias ? add(y, bias) : y;
  }

  void collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".weight", &weight});
    if (has_bias) out.push_back({prefix + ".bias", &bias});
  }
};

/// Square-kernel convolution with "same" padding.
struct Conv2d {
  Tensor weight;
  Tensor bias;
  std::size_t stride = 1;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride_, Rng& rng)
      : weight(normal_param({out, in, kernel, kernel},
                            1.0 / std::sqrt(static_cast<double>(in * kernel * kernel)), rng)),
        bias(Tensor::zeros({out}, true)),
        stride(stride_) {}

  std::size_t kernel() const { return weight.dim(2); }
  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t out_channels() const { return weight.dim(0); }

  Tensor operator()(const Tensor& x) const {
    return conv2d(x, weight, bias, stride, kernel() / 2);
  }

  void collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }
};

struct LayerNorm {
  Tensor gain;
  Tensor shift;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t width)
      : gain(Tensor::full({width}, 1.0, true)), shift(Tensor::zeros({width}, true)) {}

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, shift); }

  void collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".gain", &gain});
    out.push_back({prefix + ".shift", &shift});
  }
};

/// Two-layer perceptron with GELU.
struct Mlp {
  Linear fc1;
  Linear fc2;

  Mlp() = default;
  Mlp(std::size_t width, std::size_t hidden, Rng& rng)
      : fc1(width, hidden, true, rng), fc2(hidden, width, true, rng) {}

  Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }

  void collect(const std::string& prefix, ParamList& out) {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

}  // namespace bevx
