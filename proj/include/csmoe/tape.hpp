#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "csmoe/errors.hpp"
#include "csmoe/tensor.hpp"

namespace csmoe::ad {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
/// tape is alive.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  inline const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using GradientMap = std::map<std::string, Tensor>;

/// Define-by-run record of primitive operations. Nodes are appended in
/// evaluation order, so the vector is already topologically sorted.
class Tape {
 public:
  // Receives the tape and the adjoint of the node's output; adds adjoints into
  // the node's inputs via accumulate().
  using BackwardFn = std::function<void(Tape&, const Tensor&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), false, {}); }

  /// Leaf that receives a gradient. A non-empty name makes it show up in the
  /// GradientMap returned by backward().
  Var variable(Tensor value, std::string name = {}) {
    Var v = push(std::move(value), true, {});
    if (!name.empty()) {
      if (named_.count(name)) throw ContractError("duplicate variable name on tape: " + name);
      named_.emplace(std::move(name), v.id());
    }
    return v;
  }

  /// Records a derived node. requires_grad is inherited from the inputs; when
  /// no input needs a gradient the closure is dropped.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(fn));
  }

  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
    bool rg = false;
    for (const auto& in : inputs) {
      if (in.tape() != this) throw ContractError("mixing variables from different tapes");
      rg = rg || nodes_[in.id()].requires_grad;
    }
    return push(std::move(value), rg, rg ? std::move(fn) : BackwardFn{});
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  void accumulate(Var v, const Tensor& g) {
    auto& node = nodes_[v.id()];
    if (!node.requires_grad) return;
    auto& buf = grads_[v.id()];
    if (buf.empty()) {
      buf = g;
    } else {
      buf += g;
    }
  }

  /// Reverse sweep from a scalar output. Each node is visited once, from the
  /// last recorded to the first.
  GradientMap backward(Var output) {
    if (output.tape() != this) throw ContractError("output belongs to another tape");
    if (value(output.id()).size() != 1) {
      throw ContractError("backward() requires a scalar output, got shape " + shape_str(value(output.id()).shape()));
    }
    grads_.assign(nodes_.size(), Tensor{});
    grads_[output.id()] = Tensor(value(output.id()).shape(), 1.0);
    for (std::size_t i = output.id() + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (grads_[i].empty() || !node.backward) continue;
      node.backward(*this, grads_[i]);
    }
    GradientMap out;
    for (const auto& [name, id] : named_) {
      out.emplace(name, grads_[id].empty() ? Tensor(value(id).shape(), 0.0) : grads_[id]);
    }
    return out;
  }

  /// Adjoint of an arbitrary node after backward(); zeros when unreached.
  Tensor gradient(Var v) const {
    if (v.id() < grads_.size() && !grads_[v.id()].empty()) return grads_[v.id()];
    return Tensor(value(v.id()).shape(), 0.0);
  }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor value, bool rg, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), rg, std::move(fn)});
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;  // deque: value references stay valid while recording
  std::vector<Tensor> grads_;
  std::map<std::string, std::size_t> named_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

}  // namespace csmoe::ad
