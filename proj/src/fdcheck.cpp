#include "gmseg/fdcheck.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace gmseg {

Tensor finite_difference_grad(const ScalarFn& fn, std::span<const Tensor> inputs, size_t which,
                              double h) {
  if (which >= inputs.size()) throw std::invalid_argument("fdcheck: input index out of range");
  std::vector<Tensor> probe(inputs.begin(), inputs.end());
  const Tensor& x = inputs[which];
  std::vector<double> grad(static_cast<size_t>(x.size()));
  for (std::int64_t i = 0; i < x.size(); ++i) {
    auto u = static_cast<size_t>(i);
    const double orig = x.data()[u];

    std::vector<double> bumped(x.data().begin(), x.data().end());
    bumped[u] = orig + h;
    probe[which] = Tensor::raw(x.shape(), std::move(bumped));
    const double fp = fn(probe);

    std::vector<double> dipped(x.data().begin(), x.data().end());
    dipped[u] = orig - h;
    probe[which] = Tensor::raw(x.shape(), std::move(dipped));
    const double fm = fn(probe);

    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::runtime_error("fdcheck: non-finite probe value at input " +
                               std::to_string(which) + " coordinate " + std::to_string(i));
    }
    grad[u] = (fp - fm) / (2.0 * h);
  }
  return Tensor::raw(x.shape(), std::move(grad));
}

GradDelta compare_grads(const Tensor& a, const Tensor& b, double rtol, double atol) {
  if (!shapes_equal(a.shape(), b.shape())) {
    throw std::invalid_argument("fdcheck: gradient shapes differ, " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
  GradDelta d;
  auto pa = a.data();
  auto pb = b.data();
  double worst_margin = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    auto u = static_cast<size_t>(i);
    const double av = pa[u], bv = pb[u];
    const double abs_err = std::abs(av - bv);
    const double scale = std::max(std::abs(av), std::abs(bv));
    const double allowed = rtol * scale + atol;
    const double margin = abs_err - allowed;
    d.max_abs = std::max(d.max_abs, abs_err);
    if (scale > 0.0) d.max_rel = std::max(d.max_rel, abs_err / (scale + atol));
    if (margin > worst_margin || d.worst < 0) {
      worst_margin = std::max(margin, 0.0);
      if (margin > 0.0 || d.worst < 0) {
        d.worst = i;
        d.a_at_worst = av;
        d.b_at_worst = bv;
      }
    }
    if (margin > 0.0) d.pass = false;
  }
  return d;
}

std::string GradDelta::describe() const {
  std::ostringstream os;
  os << (pass ? "ok" : "MISMATCH") << " max_abs=" << max_abs << " max_rel=" << max_rel;
  if (worst >= 0) {
    os << " worst@" << worst << " analytic=" << a_at_worst << " numeric=" << b_at_worst;
  }
  return os.str();
}

}  // namespace gmseg
