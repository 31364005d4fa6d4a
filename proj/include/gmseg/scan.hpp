#pragma once

#include "gmseg/tape.hpp"
#include "gmseg/tensor.hpp"

namespace gmseg {

// One token's contribution to the state recurrence h <- a*h + b.
struct ScanElement {
  double a = 1.0;
  double b = 0.0;
};

// lhs applied first: (a1,b1)∘(a2,b2) = (a1*a2, a2*b1 + b2)
inline ScanElement combine(ScanElement lhs, ScanElement rhs) {
  return {lhs.a * rhs.a, rhs.a * lhs.b + rhs.b};
}

// Zero-order hold. delta [L,C] (>0), a [C,N] (<0), b [L,N].
// abar = exp(delta*a); bbar = ((exp(delta*a) - 1)/a) * b, both [L,C,N].
// The (e^z - 1)/z factor switches to its series below |z| = 1e-8.
void discretize(const Tensor& delta, const Tensor& a, const Tensor& b, Tensor* abar,
                Tensor* bbar);

// h_t = abar_t h_{t-1} + bbar_t x_t (h_0 = 0); y_t[c] = sum_n cout_t[n] h_t[c,n] + d[c] x_t[c].
// x [L,C], abar/bbar [L,C,N], cout [L,N], d [C] -> y [L,C].
Tensor scan_sequential(const Tensor& x, const Tensor& abar, const Tensor& bbar,
                       const Tensor& cout, const Tensor& d);

// Same contract, evaluated as a chunked associative scan; result must match
// scan_sequential within 1e-10 for any chunk size.
Tensor scan_parallel(const Tensor& x, const Tensor& abar, const Tensor& bbar, const Tensor& cout,
                     const Tensor& d, int chunk = 64);

enum class ScanMode { sequential, parallel };

// Fused differentiable selective scan over a batch of sequences.
// x, delta [B,L,C] (delta > 0); a [C,N] (< 0); b, c [B,L,N]; d [C] -> y [B,L,C].
Var selective_scan(Tape& t, Var x, Var delta, Var a, Var b, Var c, Var d,
                   ScanMode mode = ScanMode::parallel, int chunk = 64);

}  // namespace gmseg
