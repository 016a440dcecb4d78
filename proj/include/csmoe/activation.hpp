#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <string_view>

#include "csmoe/errors.hpp"

namespace csmoe {

enum class Activation { softplus, relu, sigmoid, silu, gelu, softmax };

inline Activation parse_activation(std::string_view name) {
  if (name == "softplus") return Activation::softplus;
  if (name == "relu") return Activation::relu;
  if (name == "sigmoid") return Activation::sigmoid;
  if (name == "silu") return Activation::silu;
  if (name == "gelu") return Activation::gelu;
  if (name == "softmax") return Activation::softmax;
  throw ConfigError("unknown activation kind '" + std::string(name) + "'");
}

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::softplus: return "softplus";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::silu: return "silu";
    case Activation::gelu: return "gelu";
    case Activation::softmax: return "softmax";
  }
  return "?";
}

namespace scalar {

// max(x,0) + log1p(exp(-|x|)); never overflows.
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

/// Elementwise value; softmax is row-wise and not handled here.
inline double apply(Activation a, double x) {
  switch (a) {
    case Activation::softplus: return softplus(x);
    case Activation::relu: return x > 0 ? x : 0.0;
    case Activation::sigmoid: return sigmoid(x);
    case Activation::silu: return x * sigmoid(x);
    case Activation::gelu: return gelu(x);
    case Activation::softmax: break;
  }
  throw ConfigError("softmax is not an elementwise activation");
}

inline double derivative(Activation a, double x) {
  switch (a) {
    case Activation::softplus: return sigmoid(x);
    case Activation::relu: return x > 0 ? 1.0 : 0.0;
    case Activation::sigmoid: {
      double s = sigmoid(x);
      return s * (1.0 - s);
    }
    case Activation::silu: {
      double s = sigmoid(x);
      return s + x * s * (1.0 - s);
    }
    case Activation::gelu: return gelu_grad(x);
    case Activation::softmax: break;
  }
  throw ConfigError("softmax is not an elementwise activation");
}

}  // namespace scalar
}  // namespace csmoe
