#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gmseg/tensor.hpp"

namespace gmseg {

// Scalar-valued function of a set of tensors; the probe perturbs one of them.
using ScalarFn = std::function<double(std::span<const Tensor>)>;

// Central-difference gradient of fn w.r.t. inputs[which], step h per coordinate.
// Throws if fn returns a non-finite value, naming the offending coordinate.
Tensor finite_difference_grad(const ScalarFn& fn, std::span<const Tensor> inputs, size_t which,
                              double h = 1e-5);

struct GradDelta {
  double max_abs = 0.0;   // max |a - b|
  double max_rel = 0.0;   // max |a-b| / (max(|a|,|b|) + atol-guard)
  std::int64_t worst = -1;  // flat index of the worst coordinate
  double a_at_worst = 0.0;
  double b_at_worst = 0.0;
  bool pass = true;

  std::string describe() const;
};

// Elementwise |a-b| <= rtol*max(|a|,|b|) + atol, reporting the worst violator.
GradDelta compare_grads(const Tensor& a, const Tensor& b, double rtol, double atol = 1e-7);

}  // namespace gmseg
