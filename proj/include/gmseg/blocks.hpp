#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gmseg/conv.hpp"
#include "gmseg/norm.hpp"
#include "gmseg/ops.hpp"
#include "gmseg/params.hpp"
#include "gmseg/scan.hpp"

namespace gmseg {

// Incremented on every residual-block forward; tests assert reuse of Res(h).
std::int64_t& res_eval_counter();

struct Conv3dLayer {
  Conv3dSpec spec;
  Param* w = nullptr;
  Param* b = nullptr;
  static Conv3dLayer make(ParamRegistry& reg, Rng& rng, const std::string& name, Conv3dSpec spec,
                          bool bias = true);
  Var forward(Ctx& cx, Var x) const;
};

struct ConvT3dLayer {
  Conv3dSpec spec;
  Param* w = nullptr;
  Param* b = nullptr;
  static ConvT3dLayer make(ParamRegistry& reg, Rng& rng, const std::string& name, Conv3dSpec spec,
                           bool bias = true);
  Var forward(Ctx& cx, Var x) const;
};

struct LinearLayer {
  Param* w = nullptr;  // [in, out]
  Param* b = nullptr;
  static LinearLayer make(ParamRegistry& reg, Rng& rng, const std::string& name, int in, int out,
                          bool bias = true);
  Var forward(Ctx& cx, Var x) const;
};

struct LayerNormLayer {
  Param* gamma = nullptr;
  Param* beta = nullptr;
  double eps = 1e-5;
  static LayerNormLayer make(ParamRegistry& reg, const std::string& name, int channels);
  Var forward(Ctx& cx, Var x) const;
};

struct BatchNormLayer {
  Param* gamma = nullptr;
  Param* beta = nullptr;
  Param* running_mean = nullptr;  // non-trainable, checkpointed
  Param* running_var = nullptr;
  Param* batches_seen = nullptr;  // non-trainable scalar count
  double eps = 1e-5;
  double momentum = 0.1;
  static BatchNormLayer make(ParamRegistry& reg, const std::string& name, int channels);
  Var forward(Ctx& cx, Var x) const;  // train mode updates running stats
};

struct DwConv1dLayer {
  Param* w = nullptr;  // [C,K], tap K-1 is the current token
  Param* b = nullptr;
  static DwConv1dLayer make(ParamRegistry& reg, Rng& rng, const std::string& name, int channels,
                            int width);
  Var forward(Ctx& cx, Var x) const;
};

// Selective state-space layer over [N,L,C] tokens.
struct SsmLayer {
  int channels = 0;
  int state = 16;
  LinearLayer wb, wc, wdelta;  // C->S, C->S, C->C (delta bias lives in wdelta)
  Param* a_log = nullptr;      // [C,S]; A = -exp(a_log)
  Param* dskip = nullptr;      // [C]
  static SsmLayer make(ParamRegistry& reg, Rng& rng, const std::string& name, int channels,
                       int state);
  Var forward(Ctx& cx, Var u) const;
};

// C_in -> C_out, two 3x3x3 convs + norm + activation, projected shortcut when
// the channel count changes.
struct ResidualBlock {
  Conv3dLayer conv1, conv2;
  BatchNormLayer bn1, bn2;
  std::optional<Conv3dLayer> proj;
  Act act = Act::leaky_relu;
  static ResidualBlock make(ParamRegistry& reg, Rng& rng, const std::string& name, int c_in,
                            int c_out, Act act);
  Var forward(Ctx& cx, Var x) const;
};

// [U0 share, V0..V_{n-1} shares]; entries sum to 2*cw, last equals cw.
std::vector<int> channel_partition(int cw, int order);

struct HgConv {
  int cw = 0;     // working channels C'
  int order = 2;  // n
  double gate_scale = 0.5;
  bool multiplicative = false;
  Conv3dLayer pw_in;               // C' -> 2C', pointwise
  Conv3dLayer dw;                  // depthwise 3^3 over 2C'
  std::vector<Conv3dLayer> phi;    // pointwise C'_{j-1} -> C'_j
  std::vector<int> partition;
  static HgConv make(ParamRegistry& reg, Rng& rng, const std::string& name, int cw, int order,
                     double gate_scale, bool multiplicative);
  Var forward(Ctx& cx, Var x) const;
};

struct HgcnBlock {
  int c_stage = 0;    // C0
  int cw = 0;         // C'
  ResidualBlock res;
  Conv3dLayer stem;
  BatchNormLayer stem_bn;
  LayerNormLayer ln1, ln2;
  HgConv hg;
  Conv3dLayer out_proj;  // C' -> C0, pointwise
  Act act = Act::leaky_relu;
  static HgcnBlock make(ParamRegistry& reg, Rng& rng, const std::string& name, int c_stage,
                        int order, double gate_scale, bool multiplicative, Act act);
  Var forward(Ctx& cx, Var x) const;
};

struct MambaBlock {
  int channels = 0;
  int expand = 2;
  Conv3dLayer pre;
  BatchNormLayer pre_bn;
  LayerNormLayer ln_in, ln_mid;
  LinearLayer in_ssm, in_gate;  // C -> E*C each
  DwConv1dLayer dwc;
  SsmLayer ssm;
  LinearLayer mlp1, mlp2;  // E*C -> 4C -> C
  Act act = Act::leaky_relu;
  static MambaBlock make(ParamRegistry& reg, Rng& rng, const std::string& name, int channels,
                         int expand, int state, int dw_width, Act act);
  Var forward(Ctx& cx, Var x) const;
};

// C' = C0 rounded up to a multiple of 2^(order-1)
int hgcn_working_channels(int c_stage, int order);

}  // namespace gmseg
