#include "gmseg/tape.hpp"

#include <stdexcept>

namespace gmseg {

bool GradSink::needs(Var v) const { return tape_.requires_grad(v); }

void GradSink::accum(Var v, const Tensor& g) {
  if (!tape_.requires_grad(v)) return;
  const Tensor& val = tape_.value(v);
  if (!shapes_equal(g.shape(), val.shape())) {
    throw std::logic_error("tape: gradient shape " + shape_str(g.shape()) +
                           " does not match value shape " + shape_str(val.shape()));
  }
  auto idx = static_cast<size_t>(v.id);
  if (!present_[idx]) {
    grads_[idx] = g;
    present_[idx] = 1;
    return;
  }
  double* dst = grads_[idx].mutable_data();
  std::span<const double> src = g.data();
  for (std::int64_t i = 0; i < g.size(); ++i) dst[i] += src[i];
}

const Tensor* GradMap::find(Var leaf) const {
  if (!leaf.valid() || static_cast<size_t>(leaf.id) >= grads_.size()) return nullptr;
  if (!present_[static_cast<size_t>(leaf.id)]) return nullptr;
  return &grads_[static_cast<size_t>(leaf.id)];
}

const Tensor& GradMap::at(Var leaf) const {
  const Tensor* g = find(leaf);
  if (!g) throw std::out_of_range("gradmap: no gradient recorded for leaf");
  return *g;
}

Var Tape::leaf(const Tensor& value) { return leaf(value, value.requires_grad()); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (consumed_) throw std::logic_error("tape: already consumed by backward");
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_ && requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, std::span<const Var> inputs,
                 const std::function<BackwardFn()>& make_backward) {
  if (consumed_) throw std::logic_error("tape: already consumed by backward");
  bool needs = false;
  for (Var v : inputs) {
    if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size()) {
      throw std::logic_error("tape: operand is not on this tape");
    }
    needs = needs || nodes_[static_cast<size_t>(v.id)].requires_grad;
  }
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_ && needs;
  if (n.requires_grad) n.backward = make_backward();
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs,
                 const std::function<BackwardFn()>& make_backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                make_backward);
}

const Tensor& Tape::value(Var v) const {
  if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size()) {
    throw std::logic_error("tape: invalid var");
  }
  return nodes_[static_cast<size_t>(v.id)].value;
}

bool Tape::requires_grad(Var v) const {
  if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size()) return false;
  return nodes_[static_cast<size_t>(v.id)].requires_grad;
}

GradMap Tape::backward(Var loss) {
  if (consumed_) throw std::logic_error("tape: already consumed by backward");
  if (!loss.valid() || static_cast<size_t>(loss.id) >= nodes_.size()) {
    throw std::logic_error("tape: loss var is not on this tape");
  }
  if (value(loss).size() != 1) {
    throw std::invalid_argument("tape: backward requires a scalar loss, got shape " +
                                shape_str(value(loss).shape()));
  }
  consumed_ = true;

  std::vector<Tensor> grads(nodes_.size());
  std::vector<char> present(nodes_.size(), 0);
  GradSink sink(*this, grads, present);

  auto lid = static_cast<size_t>(loss.id);
  if (nodes_[lid].requires_grad) {
    grads[lid] = Tensor::full(value(loss).shape(), 1.0);
    present[lid] = 1;
  }

  for (std::int64_t i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!present[static_cast<size_t>(i)] || !n.backward) continue;
    n.backward(grads[static_cast<size_t>(i)], sink);
    n.backward = nullptr;
    // interior gradients are not part of the result; free them eagerly
    grads[static_cast<size_t>(i)] = Tensor();
    present[static_cast<size_t>(i)] = 0;
  }

  GradMap out;
  out.grads_ = std::move(grads);
  out.present_ = std::move(present);
  return out;
}

}  // namespace gmseg
