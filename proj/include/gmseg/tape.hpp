#pragma once

#include <functional>
#include <vector>

#include "gmseg/tensor.hpp"

namespace gmseg {

class Tape;

// Handle to a value recorded on a Tape.
struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

// Gradient accumulator passed to backward rules. needs() lets a rule skip
// work for inputs that do not require gradients.
class GradSink {
 public:
  bool needs(Var v) const;
  void accum(Var v, const Tensor& g);

 private:
  friend class Tape;
  GradSink(const Tape& tape, std::vector<Tensor>& grads, std::vector<char>& present)
      : tape_(tape), grads_(grads), present_(present) {}
  const Tape& tape_;
  std::vector<Tensor>& grads_;
  std::vector<char>& present_;
};

// d(loss)/d(leaf) per requires-grad leaf reachable from the loss, keyed by
// the leaf's Var. Leaves the loss never touched are simply absent.
class GradMap {
 public:
  const Tensor* find(Var leaf) const;
  const Tensor& at(Var leaf) const;  // throws if absent

 private:
  friend class Tape;
  std::vector<Tensor> grads_;
  std::vector<char> present_;
};

using BackwardFn = std::function<void(const Tensor& grad_out, GradSink& sink)>;

// Recorded computation graph for one forward pass. Entries are appended in
// execution order, so operands always precede their consumers and one
// reverse sweep visits each entry exactly once. A tape is confined to a
// single thread and consumed by a single backward() call.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(const Tensor& value);  // requires-grad taken from the tensor flag
  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Record an op result. The backward factory is invoked only when some
  // input requires a gradient, so closures are never built on no-grad paths.
  Var record(Tensor value, std::span<const Var> inputs,
             const std::function<BackwardFn()>& make_backward);
  Var record(Tensor value, std::initializer_list<Var> inputs,
             const std::function<BackwardFn()>& make_backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from a scalar loss. Consumes the tape: backward rules are
  // released and a second call is a contract error.
  GradMap backward(Var loss);

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
  bool consumed_ = false;
};

}  // namespace gmseg
