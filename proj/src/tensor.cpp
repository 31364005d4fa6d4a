#include "gmseg/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace gmseg {

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

bool shapes_equal(const Shape& a, const Shape& b) { return a == b; }

Tensor::Tensor() : shape_{}, buf_(std::make_shared<std::vector<double>>(1, 0.0)) {}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  for (int e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor: non-positive extent in " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match " +
                                std::to_string(values.size()) + " values");
  }
  for (size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw std::invalid_argument("tensor: non-finite value at flat index " + std::to_string(i));
    }
  }
  return raw(std::move(shape), std::move(values));
}

Tensor Tensor::raw(Shape shape, std::vector<double>&& values) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.buf_ = std::make_shared<std::vector<double>>(std::move(values));
  return t;
}

Tensor Tensor::zeros(const Shape& shape) {
  for (int e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor: non-positive extent in " + shape_str(shape));
  }
  return raw(Shape(shape), std::vector<double>(static_cast<size_t>(shape_numel(shape)), 0.0));
}

Tensor Tensor::full(const Shape& shape, double v) {
  Tensor t = zeros(shape);
  std::fill(t.buf_->begin(), t.buf_->end(), v);
  return t;
}

Tensor Tensor::scalar(double v) { return raw({}, std::vector<double>{v}); }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != size()) {
    throw std::invalid_argument("tensor: reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                                " changes element count");
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.buf_ = buf_;
  return t;
}

double* Tensor::mutable_data() {
  if (buf_.use_count() > 1) {
    buf_ = std::make_shared<std::vector<double>>(*buf_);
  }
  return buf_->data();
}

double Tensor::value() const {
  if (size() != 1) {
    throw std::invalid_argument("tensor: scalar access on shape " + shape_str(shape_));
  }
  return (*buf_)[0];
}

double Tensor::at(std::span<const int> index) const {
  if (static_cast<int>(index.size()) != rank()) {
    throw std::invalid_argument("tensor: index rank mismatch");
  }
  std::int64_t flat = 0;
  for (size_t a = 0; a < index.size(); ++a) {
    if (index[a] < 0 || index[a] >= shape_[a]) throw std::out_of_range("tensor: index out of range");
    flat = flat * shape_[a] + index[a];
  }
  return (*buf_)[static_cast<size_t>(flat)];
}

bool Tensor::all_finite() const {
  for (double v : *buf_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double Rng::uniform(double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  return d(eng_);
}

double Rng::normal(double mean, double sd) {
  std::normal_distribution<double> d(mean, sd);
  return d(eng_);
}

int Rng::uniform_int(int lo, int hi) {
  std::uniform_int_distribution<int> d(lo, hi);
  return d(eng_);
}

Tensor Rng::normal_tensor(const Shape& shape, double mean, double sd) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (double& x : v) x = normal(mean, sd);
  return Tensor::raw(Shape(shape), std::move(v));
}

Tensor Rng::uniform_tensor(const Shape& shape, double lo, double hi) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (double& x : v) x = uniform(lo, hi);
  return Tensor::raw(Shape(shape), std::move(v));
}

}  // namespace gmseg
