#pragma once

#include "gmseg/tape.hpp"
#include "gmseg/tensor.hpp"

namespace gmseg {

// Normalizes the trailing axis to mean 0 / variance 1 before affine.
// x [..., C], gamma/beta [C].
Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps = 1e-5);

struct BatchStats {
  Tensor mean;  // [C], batch mean
  Tensor var;   // [C], biased batch variance
};

// Train mode: normalizes with batch statistics computed over (N, spatial) per
// channel and reports them so the caller can update running estimates.
// x [N,C,...], gamma/beta [C].
Var batch_norm_train(Tape& t, Var x, Var gamma, Var beta, double eps, BatchStats* stats_out);

// Eval mode: normalizes with the provided running estimates (constants).
Var batch_norm_eval(Tape& t, Var x, Var gamma, Var beta, const Tensor& running_mean,
                    const Tensor& running_var, double eps);

}  // namespace gmseg
