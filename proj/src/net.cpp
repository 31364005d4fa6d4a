#include "gmseg/net.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace gmseg {

namespace {

std::string act_name(Act a) {
  switch (a) {
    case Act::silu: return "silu";
    case Act::gelu: return "gelu";
    case Act::leaky_relu: return "leaky_relu";
    case Act::sigmoid: return "sigmoid";
  }
  throw std::invalid_argument("plan: unknown activation");
}

Act act_from(const std::string& s) {
  if (s == "silu") return Act::silu;
  if (s == "gelu") return Act::gelu;
  if (s == "leaky_relu") return Act::leaky_relu;
  if (s == "sigmoid") return Act::sigmoid;
  throw std::invalid_argument("plan: unknown activation '" + s + "'");
}

std::string triple_str(const std::array<int, 3>& t) {
  return std::to_string(t[0]) + "x" + std::to_string(t[1]) + "x" + std::to_string(t[2]);
}

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

}  // namespace

void NetworkPlan::validate() const {
  if (stages < 2) throw std::invalid_argument("plan: need at least 2 stages");
  if (static_cast<int>(blocks.size()) != stages ||
      static_cast<int>(channels.size()) != stages ||
      static_cast<int>(strides.size()) != stages) {
    throw std::invalid_argument("plan: blocks/channels/strides must each have one entry per stage");
  }
  int h_count = 0;
  for (BlockKind k : blocks) h_count += k == BlockKind::hgcn ? 1 : 0;
  if (static_cast<int>(orders.size()) != h_count) {
    throw std::invalid_argument("plan: orders count " + std::to_string(orders.size()) +
                                " != HGCN stage count " + std::to_string(h_count));
  }
  for (int o : orders) {
    if (o < 2 || o > 6) {
      throw std::invalid_argument("plan: order " + std::to_string(o) + " outside [2,6]");
    }
  }
  for (int c : channels) {
    if (c <= 0) throw std::invalid_argument("plan: nonpositive channel count");
  }
  if (strides[0] != std::array<int, 3>{1, 1, 1}) {
    throw std::invalid_argument("plan: first stage stride must be 1x1x1");
  }
  std::array<int, 3> cum{1, 1, 1};
  for (int i = 0; i < stages; ++i) {
    for (size_t a = 0; a < 3; ++a) {
      const int s = strides[static_cast<size_t>(i)][a];
      if (s != 1 && s != 2) {
        throw std::invalid_argument("plan: stage " + std::to_string(i + 1) +
                                    " stride must be 1 or 2");
      }
      cum[a] *= s;
    }
  }
  for (size_t a = 0; a < 3; ++a) {
    if (patch[a] <= 0 || patch[a] % cum[a] != 0) {
      throw std::invalid_argument("plan: patch axis " + std::to_string(a) + " (" +
                                  std::to_string(patch[a]) +
                                  ") not divisible by cumulative stride " +
                                  std::to_string(cum[a]));
    }
  }
  if (batch <= 0) throw std::invalid_argument("plan: batch must be positive");
  // HGCN stages need channels compatible with their order's partition
  int oi = 0;
  for (int i = 0; i < stages; ++i) {
    if (blocks[static_cast<size_t>(i)] == BlockKind::hgcn) {
      channel_partition(hgcn_working_channels(channels[static_cast<size_t>(i)], orders[
                            static_cast<size_t>(oi)]),
                        orders[static_cast<size_t>(oi)]);
      ++oi;
    }
  }
}

std::array<int, 3> NetworkPlan::stage_extents(int stage) const {
  std::array<int, 3> e = patch;
  for (int i = 0; i <= stage; ++i) {
    for (size_t a = 0; a < 3; ++a) e[a] /= strides[static_cast<size_t>(i)][a];
  }
  return e;
}

KvConfig NetworkPlan::to_config() const {
  KvConfig cfg;
  cfg.set("stages", std::to_string(stages));
  std::string bl;
  for (size_t i = 0; i < blocks.size(); ++i) {
    if (i) bl += ",";
    bl += blocks[i] == BlockKind::hgcn ? "H" : "M";
  }
  cfg.set("blocks", bl);
  cfg.set("orders", join_ints(orders));
  cfg.set("channels", join_ints(channels));
  std::string st;
  for (size_t i = 0; i < strides.size(); ++i) {
    if (i) st += ",";
    st += triple_str(strides[i]);
  }
  cfg.set("strides", st);
  cfg.set("patch", triple_str(patch));
  cfg.set("batch", std::to_string(batch));
  cfg.set("deep_supervision", deep_supervision ? "true" : "false");
  cfg.set("activation", act_name(activation));
  cfg.set("gating", gating == Gating::additive ? "additive" : "multiplicative");
  cfg.set("gate_scale", gate_scale > 0.0 ? format_double(gate_scale) : "auto");
  return cfg;
}

std::string NetworkPlan::serialize() const { return to_config().serialize(); }

NetworkPlan NetworkPlan::from_config(const KvConfig& cfg) {
  NetworkPlan p;
  p.stages = cfg.get_int("stages");
  for (const auto& b : split(cfg.get("blocks"), ',')) {
    if (b == "H") {
      p.blocks.push_back(BlockKind::hgcn);
    } else if (b == "M") {
      p.blocks.push_back(BlockKind::mamba);
    } else {
      throw std::invalid_argument("plan: block kind must be H or M, got '" + b + "'");
    }
  }
  p.orders = cfg.get_int_list("orders");
  p.channels = cfg.get_int_list("channels");
  p.strides = cfg.get_triples("strides");
  p.patch = cfg.get_triple("patch");
  p.batch = cfg.get_int("batch");
  p.deep_supervision = cfg.get_bool("deep_supervision");
  p.activation = act_from(cfg.get("activation"));
  const std::string g = cfg.get("gating");
  if (g == "additive") {
    p.gating = Gating::additive;
  } else if (g == "multiplicative") {
    p.gating = Gating::multiplicative;
  } else {
    throw std::invalid_argument("plan: gating must be additive or multiplicative");
  }
  const std::string gs = cfg.get("gate_scale");
  p.gate_scale = gs == "auto" ? 0.0 : std::stod(gs);
  p.validate();
  return p;
}

NetworkPlan NetworkPlan::parse_text(const std::string& text) {
  return from_config(KvConfig::parse(text));
}

namespace {

NetworkPlan six_stage_plan(std::array<int, 3> patch, std::array<int, 3> halvings) {
  NetworkPlan p;
  p.stages = 6;
  p.blocks = {BlockKind::hgcn, BlockKind::hgcn, BlockKind::hgcn,
              BlockKind::mamba, BlockKind::mamba, BlockKind::mamba};
  p.orders = {2, 3, 4};
  p.channels = {32, 64, 128, 256, 320, 320};
  p.strides.push_back({1, 1, 1});
  for (int t = 1; t <= 5; ++t) {
    std::array<int, 3> s{};
    for (size_t a = 0; a < 3; ++a) s[a] = t <= halvings[a] ? 2 : 1;
    p.strides.push_back(s);
  }
  p.patch = patch;
  p.batch = 2;
  return p;
}

}  // namespace

NetworkPlan preset_plan(const std::string& name) {
  NetworkPlan p;
  if (name == "pcd") {
    p = six_stage_plan({80, 192, 160}, {4, 5, 5});
  } else if (name == "lungt") {
    p = six_stage_plan({96, 160, 160}, {5, 5, 5});
  } else if (name == "livert") {
    p = six_stage_plan({64, 192, 192}, {4, 5, 5});
  } else if (name == "abd") {
    p = six_stage_plan({40, 224, 192}, {3, 5, 5});
  } else if (name == "brats") {
    p = six_stage_plan({128, 128, 128}, {5, 5, 5});
  } else if (name == "toy") {
    p.stages = 4;
    p.blocks = {BlockKind::hgcn, BlockKind::hgcn, BlockKind::mamba, BlockKind::mamba};
    p.orders = {2, 3};
    p.channels = {8, 16, 32, 64};
    p.strides = {{1, 1, 1}, {2, 2, 2}, {2, 2, 2}, {2, 2, 2}};
    p.patch = {24, 24, 24};
    p.batch = 1;
  } else {
    throw std::invalid_argument("preset_plan: unknown preset '" + name + "'");
  }
  p.validate();
  return p;
}

NetworkPlan derive_plan(const Fingerprint& fp) {
  for (size_t a = 0; a < 3; ++a) {
    if (fp.median_shape[a] <= 0) throw std::invalid_argument("derive_plan: nonpositive extent");
    if (fp.spacing[a] <= 0.0) throw std::invalid_argument("derive_plan: nonpositive spacing");
  }
  std::array<int, 3> halvings{};
  int max_h = 0;
  for (size_t a = 0; a < 3; ++a) {
    int e = fp.median_shape[a];
    int h = 0;
    while (e >= 8 && h < 5) {
      e /= 2;
      ++h;
    }
    halvings[a] = h;
    max_h = std::max(max_h, h);
  }
  if (max_h == 0) {
    throw std::invalid_argument("derive_plan: every axis is too short to halve (extent < 8)");
  }
  const int stages = std::min(6, std::max(4, 1 + max_h));
  for (size_t a = 0; a < 3; ++a) halvings[a] = std::min(halvings[a], stages - 1);

  NetworkPlan p;
  p.stages = stages;
  const int h_stages = (stages + 1) / 2;
  for (int i = 0; i < stages; ++i) {
    p.blocks.push_back(i < h_stages ? BlockKind::hgcn : BlockKind::mamba);
  }
  for (int i = 0; i < h_stages; ++i) p.orders.push_back(2 + i);
  int ch = 32;
  for (int i = 0; i < stages; ++i) {
    p.channels.push_back(std::min(ch, 320));
    ch *= 2;
  }
  p.strides.push_back({1, 1, 1});
  for (int t = 1; t < stages; ++t) {
    std::array<int, 3> s{};
    for (size_t a = 0; a < 3; ++a) s[a] = t <= halvings[a] ? 2 : 1;
    p.strides.push_back(s);
  }
  for (size_t a = 0; a < 3; ++a) {
    const int gran = 1 << halvings[a];
    int e = fp.median_shape[a] / gran * gran;
    p.patch[a] = std::max(e, gran * 4);
  }
  if (fp.memory_budget_gb > 0.0) {
    // shrink the largest axis a granularity step at a time until the patch fits
    const double budget_vox = fp.memory_budget_gb * 1e9 / 4096.0;
    auto vox = [&p]() {
      return static_cast<double>(p.patch[0]) * p.patch[1] * p.patch[2];
    };
    while (vox() > budget_vox) {
      size_t biggest = 0;
      for (size_t a = 1; a < 3; ++a) {
        if (p.patch[a] > p.patch[biggest]) biggest = a;
      }
      const int gran = 1 << halvings[biggest];
      if (p.patch[biggest] - gran < gran * 4) break;
      p.patch[biggest] -= gran;
    }
  }
  p.batch = 2;
  p.validate();
  return p;
}

std::vector<double> supervision_weights(int scales) {
  std::vector<double> w(static_cast<size_t>(scales));
  double sum = 0.0;
  for (int l = 0; l < scales; ++l) {
    w[static_cast<size_t>(l)] = std::pow(2.0, -static_cast<double>(l));
    sum += w[static_cast<size_t>(l)];
  }
  for (auto& x : w) x /= sum;
  return w;
}

std::unique_ptr<Network> build(const NetworkPlan& plan, int in_channels, int class_count,
                               std::uint64_t seed) {
  plan.validate();
  if (in_channels <= 0 || class_count < 2) {
    throw std::invalid_argument("build: need in_channels >= 1 and class_count >= 2");
  }
  auto net = std::make_unique<Network>();
  net->plan = plan;
  net->in_channels = in_channels;
  net->class_count = class_count;
  Rng rng(seed);
  ParamRegistry& reg = net->params;

  int oi = 0;
  for (int i = 0; i < plan.stages; ++i) {
    EncoderStage st;
    const int cin = i == 0 ? in_channels : plan.channels[static_cast<size_t>(i - 1)];
    const int cout = plan.channels[static_cast<size_t>(i)];
    const auto& sv = plan.strides[static_cast<size_t>(i)];
    Conv3dSpec down{cin, cout, {sv[0], sv[1], sv[2]}, {sv[0], sv[1], sv[2]}, {0, 0, 0}, 1};
    const std::string base = "enc" + std::to_string(i);
    st.down = Conv3dLayer::make(reg, rng, base + ".down", down);
    st.kind = plan.blocks[static_cast<size_t>(i)];
    if (st.kind == BlockKind::hgcn) {
      const int order = plan.orders[static_cast<size_t>(oi++)];
      const double gs = plan.gate_scale > 0.0 ? plan.gate_scale : 1.0 / order;
      st.hgcn = std::make_unique<HgcnBlock>(
          HgcnBlock::make(reg, rng, base + ".hgcn", cout, order, gs,
                          plan.gating == Gating::multiplicative, plan.activation));
    } else {
      st.mamba = std::make_unique<MambaBlock>(
          MambaBlock::make(reg, rng, base + ".mamba", cout, 2, 16, 4, plan.activation));
    }
    net->enc.push_back(std::move(st));
  }

  for (int l = 0; l < plan.stages - 1; ++l) {
    DecoderStage st;
    const int cdeep = plan.channels[static_cast<size_t>(l + 1)];
    const int cskip = plan.channels[static_cast<size_t>(l)];
    const auto& sv = plan.strides[static_cast<size_t>(l + 1)];
    Conv3dSpec up{cdeep, cskip, {sv[0], sv[1], sv[2]}, {sv[0], sv[1], sv[2]}, {0, 0, 0}, 1};
    const std::string base = "dec" + std::to_string(l);
    st.up = ConvT3dLayer::make(reg, rng, base + ".up", up);
    st.blk = ResidualBlock::make(reg, rng, base + ".blk", 2 * cskip, cskip, plan.activation);
    Conv3dSpec head{cskip, class_count, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, 1};
    st.head = Conv3dLayer::make(reg, rng, base + ".head", head);
    net->dec.push_back(std::move(st));
  }
  return net;
}

std::vector<Var> Network::forward(Ctx& cx, Var x) const {
  Tape& t = cx.tape;
  const Tensor& xv = t.value(x);
  if (xv.rank() != 5 || xv.extent(1) != in_channels) {
    throw std::invalid_argument("network: input must be [N," + std::to_string(in_channels) +
                                ",D,H,W], got " + shape_str(xv.shape()));
  }
  if (xv.extent(2) != plan.patch[0] || xv.extent(3) != plan.patch[1] ||
      xv.extent(4) != plan.patch[2]) {
    throw std::invalid_argument("network: input extents " + shape_str(xv.shape()) +
                                " do not match patch " + std::to_string(plan.patch[0]) + "x" +
                                std::to_string(plan.patch[1]) + "x" +
                                std::to_string(plan.patch[2]));
  }
  std::vector<Var> skips;
  Var h = x;
  for (const auto& st : enc) {
    h = st.down.forward(cx, h);
    h = st.kind == BlockKind::hgcn ? st.hgcn->forward(cx, h) : st.mamba->forward(cx, h);
    skips.push_back(h);
  }
  std::vector<Var> logits(dec.size());
  for (int l = static_cast<int>(dec.size()) - 1; l >= 0; --l) {
    const auto& st = dec[static_cast<size_t>(l)];
    Var up = st.up.forward(cx, h);
    Var merged = concat_channels(t, up, skips[static_cast<size_t>(l)]);
    h = st.blk.forward(cx, merged);
    logits[static_cast<size_t>(l)] = st.head.forward(cx, h);
  }
  if (!plan.deep_supervision) return {logits[0]};
  return logits;
}

}  // namespace gmseg
