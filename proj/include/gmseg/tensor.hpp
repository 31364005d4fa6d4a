#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace gmseg {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool shapes_equal(const Shape& a, const Shape& b);

// Dense row-major array of doubles. Copies share the underlying buffer;
// mutable_data() does copy-on-write, so a Tensor handed to someone else is
// effectively immutable.
class Tensor {
 public:
  Tensor();  // scalar 0

  // Validated construction: extent product must equal value count and all
  // values must be finite.
  static Tensor from(Shape shape, std::vector<double> values);
  // Internal unchecked path for op outputs (no finiteness scan).
  static Tensor raw(Shape shape, std::vector<double>&& values);
  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double v);
  static Tensor scalar(double v);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int extent(int axis) const { return shape_[static_cast<size_t>(axis)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(buf_->size()); }

  std::span<const double> data() const { return {buf_->data(), buf_->size()}; }
  double* mutable_data();

  // Scalar access; contract error if numel != 1.
  double value() const;
  double at(std::span<const int> index) const;

  // Same buffer, new extents (numel must match).
  Tensor reshaped(Shape shape) const;

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool rg) {
    requires_grad_ = rg;
    return *this;
  }

  bool all_finite() const;

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> buf_;
  bool requires_grad_ = false;
};

// Deterministic random source for parameter init and synthetic data.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  double uniform(double lo, double hi);
  double normal(double mean, double sd);
  int uniform_int(int lo, int hi);  // inclusive bounds
  std::uint64_t next() { return eng_(); }

  Tensor normal_tensor(const Shape& shape, double mean, double sd);
  Tensor uniform_tensor(const Shape& shape, double lo, double hi);

 private:
  std::mt19937_64 eng_;
};

}  // namespace gmseg
