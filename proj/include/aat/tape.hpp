#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aat/errors.hpp"
#include "aat/tensor.hpp"

namespace aat {

using NodeId = std::uint32_t;

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  NodeId id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

/// What a backward rule sees for one record.
struct BackwardArgs {
  const Tensor& out;
  const Tensor& grad;
  std::span<const Tensor* const> in;
  /// Accumulators for the inputs; null where the input needs no gradient.
  std::span<Tensor* const> grad_in;
};

using BackwardFn = std::function<void(const BackwardArgs&)>;

/// Gradient map produced by Tape::backward, indexed by node id.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor> grads, std::vector<bool> present)
      : grads_(std::move(grads)), present_(std::move(present)) {}

  /// Gradient of the loss with respect to `v`. Zero-filled when the node needs
  /// a gradient but was not reached from the loss.
  const Tensor& operator[](Var v) const { return at(v.id()); }

  const Tensor& at(NodeId id) const {
    if (id >= grads_.size() || !present_[id]) {
      throw ContractError("no gradient recorded for node " + std::to_string(id));
    }
    return grads_[id];
  }

  bool has(NodeId id) const { return id < present_.size() && present_[id]; }

 private:
  std::vector<Tensor> grads_;
  std::vector<bool> present_;
};

/// Define-by-run differentiation tape. Records are appended in evaluation
/// order, so inputs always precede the records that consume them.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), {}, "leaf", {}, requires_grad, true});
    return Var(this, static_cast<NodeId>(nodes_.size() - 1));
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Append a computed node. `backward` is only kept when some input needs a
  /// gradient.
  Var record(const char* tag, Tensor value, std::initializer_list<Var> inputs,
             BackwardFn backward) {
    return record(tag, std::move(value), std::vector<Var>(inputs), std::move(backward));
  }

  Var record(const char* tag, Tensor value, const std::vector<Var>& inputs,
             BackwardFn backward) {
    Node node{std::move(value), {}, tag, {}, false, false};
    node.inputs.reserve(inputs.size());
    for (const Var& v : inputs) {
      if (&v.tape() != this) throw ContractError("input from a different tape");
      node.inputs.push_back(v.id());
      node.requires_grad = node.requires_grad || nodes_[v.id()].requires_grad;
    }
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var(this, static_cast<NodeId>(nodes_.size() - 1));
  }

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  const std::string& tag(NodeId id) const { return nodes_.at(id).tag; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Test hook: scale the upstream gradient fed to every rule with `tag`.
  /// Used to prove that gradient checks detect a broken rule.
  void inject_fault(std::string tag, double scale) {
    fault_tag_ = std::move(tag);
    fault_scale_ = scale;
  }

  /// Reverse sweep from a scalar loss. Every record is visited at most once,
  /// in reverse order; multiple uses of a node sum their contributions.
  Gradients backward(Var loss) const {
    if (&loss.tape() != this) throw ContractError("loss is on a different tape");
    const Tensor& lv = nodes_.at(loss.id()).value;
    if (lv.size() != 1) {
      throw ContractError("backward needs a scalar loss, got shape " +
                          shape_str(lv.shape()));
    }
    const std::size_t n = nodes_.size();
    std::vector<Tensor> grads(n);
    std::vector<bool> present(n, false);
    auto ensure = [&](NodeId id) -> Tensor* {
      if (!present[id]) {
        grads[id] = Tensor(nodes_[id].value.shape(), 0.0);
        present[id] = true;
      }
      return &grads[id];
    };
    if (nodes_[loss.id()].requires_grad) {
      ensure(loss.id())->fill(1.0);
    }

    std::vector<const Tensor*> in;
    std::vector<Tensor*> grad_in;
    for (std::size_t k = loss.id() + 1; k-- > 0;) {
      const Node& node = nodes_[k];
      if (node.leaf || !node.requires_grad || !present[k]) continue;
      in.clear();
      grad_in.clear();
      for (NodeId i : node.inputs) {
        in.push_back(&nodes_[i].value);
        grad_in.push_back(nodes_[i].requires_grad ? ensure(i) : nullptr);
      }
      if (!fault_tag_.empty() && node.tag == fault_tag_) {
        Tensor scaled = grads[k];
        for (double& g : scaled.data()) g *= fault_scale_;
        node.backward(BackwardArgs{node.value, scaled, in, grad_in});
      } else {
        node.backward(BackwardArgs{node.value, grads[k], in, grad_in});
      }
    }
    for (std::size_t k = 0; k < n; ++k) {
      if (nodes_[k].leaf && nodes_[k].requires_grad) ensure(static_cast<NodeId>(k));
    }
    return Gradients(std::move(grads), std::move(present));
  }

 private:
  struct Node {
    Tensor value;
    std::vector<NodeId> inputs;
    std::string tag;
    BackwardFn backward;
    bool requires_grad;
    bool leaf;
  };

  std::vector<Node> nodes_;
  std::string fault_tag_;
  double fault_scale_ = 1.0;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

}  // namespace aat
