#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>

#include "csmoe/errors.hpp"
#include "csmoe/tape.hpp"
#include "csmoe/tensor.hpp"

namespace csmoe {

/// Named trainable tensors. std::map keeps iteration order (and therefore
/// every derived computation) deterministic.
class ParamStore {
 public:
  using Bound = std::map<std::string, ad::Var>;

  void add(const std::string& name, Tensor value) {
    if (!params_.emplace(name, std::move(value)).second) throw ContractError("duplicate parameter name: " + name);
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const { return const_cast<ParamStore*>(this)->at(name); }

  const std::map<std::string, Tensor>& all() const { return params_; }
  std::map<std::string, Tensor>& all() { return params_; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

  bool all_finite() const {
    for (const auto& [_, t] : params_)
      if (!t.all_finite()) return false;
    return true;
  }

  /// Registers every parameter on the tape as a named variable, or as a
  /// constant for inference-only passes.
  Bound bind(ad::Tape& tape, bool trainable = true) const {
    Bound out;
    for (const auto& [name, t] : params_) out.emplace(name, trainable ? tape.variable(t, name) : tape.constant(t));
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) { return a.params_ == b.params_; }

 private:
  std::map<std::string, Tensor> params_;
};

/// Cosine step-size schedule from lr_max down to lr_min over total steps.
inline double cosine_step_size(std::size_t t, std::size_t total, double lr_max, double lr_min) {
  if (total == 0) return lr_max;
  const double frac = std::min(1.0, static_cast<double>(t) / static_cast<double>(total));
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Plain SGD or Adam. Moment buffers are part of the checkpoint.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamStore& params, const ad::GradientMap& grads, double lr) {
    ++steps_;
    for (auto& [name, p] : params.all()) {
      auto it = grads.find(name);
      if (it == grads.end()) continue;
      const Tensor& g = it->second;
      if (cfg_.kind == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
        continue;
      }
      auto& m = moment1_.try_emplace(name, p.shape(), 0.0).first->second;
      auto& v = moment2_.try_emplace(name, p.shape(), 0.0).first->second;
      const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
      const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
      }
    }
  }

  const OptimizerConfig& config() const { return cfg_; }
  std::size_t steps() const { return steps_; }
  void set_steps(std::size_t s) { steps_ = s; }
  std::map<std::string, Tensor>& moment1() { return moment1_; }
  std::map<std::string, Tensor>& moment2() { return moment2_; }
  const std::map<std::string, Tensor>& moment1() const { return moment1_; }
  const std::map<std::string, Tensor>& moment2() const { return moment2_; }

 private:
  OptimizerConfig cfg_;
  std::size_t steps_ = 0;
  std::map<std::string, Tensor> moment1_;
  std::map<std::string, Tensor> moment2_;
};

}  // namespace csmoe
