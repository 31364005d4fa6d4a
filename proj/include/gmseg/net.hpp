#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "gmseg/blocks.hpp"
#include "gmseg/config.hpp"

namespace gmseg {

enum class BlockKind { hgcn, mamba };
enum class Gating { additive, multiplicative };

struct NetworkPlan {
  int stages = 0;
  std::vector<BlockKind> blocks;             // one per stage
  std::vector<int> orders;                   // one per HGCN stage, in stage order
  std::vector<int> channels;                 // one per stage
  std::vector<std::array<int, 3>> strides;   // one per stage; first is 1x1x1
  std::array<int, 3> patch{};
  int batch = 1;
  bool deep_supervision = true;
  Act activation = Act::leaky_relu;
  Gating gating = Gating::additive;
  double gate_scale = 0.0;  // <= 0 means 1/order per block

  void validate() const;
  std::string serialize() const;  // canonical key order, byte-stable
  static NetworkPlan parse_text(const std::string& text);
  static NetworkPlan from_config(const KvConfig& cfg);
  KvConfig to_config() const;

  // spatial extents at stage i = patch / cumulative stride product
  std::array<int, 3> stage_extents(int stage) const;
};

// pcd | lungt | livert | abd | brats | toy
NetworkPlan preset_plan(const std::string& name);

struct Fingerprint {
  std::array<int, 3> median_shape{};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  int class_count = 2;
  double memory_budget_gb = 0.0;  // <= 0: unconstrained
};

NetworkPlan derive_plan(const Fingerprint& fp);

struct EncoderStage {
  Conv3dLayer down;  // kernel == stride; stage 0 lifts channels at stride 1
  BlockKind kind = BlockKind::hgcn;
  std::unique_ptr<HgcnBlock> hgcn;
  std::unique_ptr<MambaBlock> mamba;
};

struct DecoderStage {
  ConvT3dLayer up;
  ResidualBlock blk;   // 2C -> C after skip concat
  Conv3dLayer head;    // 1x1x1 -> class count
};

class Network {
 public:
  NetworkPlan plan;
  int in_channels = 0;
  int class_count = 0;
  ParamRegistry params;
  std::vector<EncoderStage> enc;
  std::vector<DecoderStage> dec;  // dec[l] emits the scale-l logits

  // logits per supervised scale, full resolution first
  std::vector<Var> forward(Ctx& cx, Var x) const;

  int scale_count() const { return static_cast<int>(dec.size()); }
  std::array<int, 3> scale_extents(int scale) const { return plan.stage_extents(scale); }
};

std::unique_ptr<Network> build(const NetworkPlan& plan, int in_channels, int class_count,
                               std::uint64_t seed);

// normalized deep-supervision weights, w_l ∝ 2^{-l}
std::vector<double> supervision_weights(int scales);

}  // namespace gmseg
