#pragma once

#include <array>
#include <optional>

#include "gmseg/ops.hpp"
#include "gmseg/tape.hpp"
#include "gmseg/tensor.hpp"

namespace gmseg {

struct Conv3dSpec {
  int in_channels = 0;
  int out_channels = 0;
  std::array<int, 3> kernel{1, 1, 1};
  std::array<int, 3> stride{1, 1, 1};
  std::array<int, 3> pad{0, 0, 0};
  int groups = 1;

  void validate() const;
  // floor((I + 2p - k) / s) + 1 per axis
  std::array<int, 3> out_extents(const std::array<int, 3>& in) const;
  // transposed: (I - 1) * s - 2p + k per axis
  std::array<int, 3> out_extents_transposed(const std::array<int, 3>& in) const;
};

// x [N,Cin,D,H,W], w [Cout, Cin/groups, kd,kh,kw], bias [Cout]
Var conv3d(Tape& t, Var x, Var w, std::optional<Var> bias, const Conv3dSpec& spec);

// x [N,Cin,D,H,W], w [Cin, Cout, kd,kh,kw], bias [Cout]; groups must be 1
Var conv_transpose3d(Tape& t, Var x, Var w, std::optional<Var> bias, const Conv3dSpec& spec);

// Causal depthwise conv over sequences. x [N,L,C], w [C,K]; tap K-1 reads the
// current step, earlier taps read the past, positions before the start are zero.
Var dwconv1d_seq(Tape& t, Var x, Var w);

}  // namespace gmseg
