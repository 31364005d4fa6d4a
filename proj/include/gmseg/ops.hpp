#pragma once

#include <array>
#include <cstdint>
#include <optional>

#include "gmseg/tape.hpp"

namespace gmseg {

// Integer label volume (class ids), used for targets, metrics and file IO.
struct ByteVolume {
  Shape shape;
  std::vector<std::uint8_t> data;

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  static ByteVolume zeros(Shape s) {
    ByteVolume v;
    v.data.assign(static_cast<size_t>(shape_numel(s)), 0);
    v.shape = std::move(s);
    return v;
  }
};

enum class Act { silu, gelu, leaky_relu, sigmoid };

// Trailing-dimension broadcast: shapes aligned at the last axis; extents must
// match or be 1 (missing leading axes count as 1).
Shape broadcast_shape(const Shape& a, const Shape& b);
// Sum a gradient down to an operand's shape (inverse of broadcasting).
Tensor reduce_to_shape(const Tensor& g, const Shape& target);

// elementwise binary (broadcasting)
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var div(Tape& t, Var a, Var b);

// k*x + b with scalar constants
Var scale(Tape& t, Var x, double k, double b = 0.0);
Var neg(Tape& t, Var x);

// elementwise unary
Var exp_op(Tape& t, Var x);
Var log_op(Tape& t, Var x);
Var sqrt_op(Tape& t, Var x);
Var sigmoid(Tape& t, Var x);
Var silu(Tape& t, Var x);
Var gelu(Tape& t, Var x);
Var softplus(Tape& t, Var x);
Var leaky_relu(Tape& t, Var x, double slope = 0.01);
Var activation(Tape& t, Var x, Act kind, double slope = 0.01);

Var softmax(Tape& t, Var x, int axis);
Var log_softmax(Tape& t, Var x, int axis);

// reductions
Var sum_all(Tape& t, Var x);   // -> scalar
Var mean_all(Tape& t, Var x);  // -> scalar
Var sum_spatial(Tape& t, Var x);  // [N,C,sp...] -> [N,C]

// affine map over the trailing axis: x[...,Ci] * w[Ci,Co] + b[Co]
Var linear(Tape& t, Var x, Var w, std::optional<Var> b);

// shape ops
Var reshape(Tape& t, Var x, Shape target);
Var vol_to_seq(Tape& t, Var x);  // [N,C,D,H,W] -> [N,L=D*H*W,C], raster D->H->W
Var seq_to_vol(Tape& t, Var x, int d, int h, int w);  // exact inverse
Var concat_channels(Tape& t, Var a, Var b);           // axis 1 of [N,C,...]
Var slice_channels(Tape& t, Var x, int from, int len);

// half-open spatial box in (D,H,W)
struct Box {
  int d0, d1, h0, h1, w0, w1;
  std::int64_t voxels() const {
    return static_cast<std::int64_t>(d1 - d0) * (h1 - h0) * (w1 - w0);
  }
};
Var spatial_slice(Tape& t, Var x, const Box& box);  // x: [N,C,D,H,W]

// out[n,vox] = x[n, labels[n,vox], vox] for x: [N,C,sp...], labels: [N,sp...]
Var gather_class(Tape& t, Var x, const ByteVolume& labels);

// non-differentiable helpers
Tensor one_hot(const ByteVolume& labels, int class_count);  // [N,sp]->[N,C,sp]
ByteVolume downsample_labels_nn(const ByteVolume& labels, const Shape& target);

}  // namespace gmseg
