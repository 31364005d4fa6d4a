#include "gmseg/blocks.hpp"

#include <cmath>
#include <stdexcept>

namespace gmseg {

Param* ParamRegistry::add(std::string name, Tensor init, bool trainable) {
  if (index_.count(name)) throw std::invalid_argument("params: duplicate name " + name);
  auto p = std::make_unique<Param>(Param{name, std::move(init), trainable});
  Param* raw = p.get();
  index_.emplace(raw->name, items_.size());
  items_.push_back(std::move(p));
  return raw;
}

Param* ParamRegistry::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : items_[it->second].get();
}

const Param* ParamRegistry::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : items_[it->second].get();
}

std::int64_t ParamRegistry::trainable_count() const {
  std::int64_t n = 0;
  for (const auto& p : items_) {
    if (p->trainable) n += p->value.size();
  }
  return n;
}

Var Ctx::use(Param* p) {
  auto it = bound_.find(p);
  if (it != bound_.end()) return it->second;
  Var v = tape.leaf(p->value, p->trainable);
  bound_.emplace(p, v);
  return v;
}

Var Ctx::bound(const Param* p) const {
  auto it = bound_.find(const_cast<Param*>(p));
  return it == bound_.end() ? Var{} : it->second;
}

std::int64_t& res_eval_counter() {
  static std::int64_t n = 0;
  return n;
}

namespace {

Tensor he_normal(Rng& rng, const Shape& shape, std::int64_t fan_in) {
  return rng.normal_tensor(shape, 0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

// LN acts on the trailing axis; volumes go through token layout and back.
Var channel_ln(Ctx& cx, const LayerNormLayer& ln, Var x_vol) {
  const Tensor& xv = cx.tape.value(x_vol);
  const int d = xv.extent(2), h = xv.extent(3), w = xv.extent(4);
  Var tok = vol_to_seq(cx.tape, x_vol);
  tok = ln.forward(cx, tok);
  return seq_to_vol(cx.tape, tok, d, h, w);
}

}  // namespace

Conv3dLayer Conv3dLayer::make(ParamRegistry& reg, Rng& rng, const std::string& name,
                              Conv3dSpec spec, bool bias) {
  spec.validate();
  Conv3dLayer l;
  l.spec = spec;
  const int cg = spec.in_channels / spec.groups;
  const std::int64_t fan_in =
      static_cast<std::int64_t>(cg) * spec.kernel[0] * spec.kernel[1] * spec.kernel[2];
  l.w = reg.add(name + ".w",
                he_normal(rng, {spec.out_channels, cg, spec.kernel[0], spec.kernel[1],
                                spec.kernel[2]},
                          fan_in));
  if (bias) l.b = reg.add(name + ".b", Tensor::zeros({spec.out_channels}));
  return l;
}

Var Conv3dLayer::forward(Ctx& cx, Var x) const {
  std::optional<Var> bv;
  if (b) bv = cx.use(b);
  return conv3d(cx.tape, x, cx.use(w), bv, spec);
}

ConvT3dLayer ConvT3dLayer::make(ParamRegistry& reg, Rng& rng, const std::string& name,
                                Conv3dSpec spec, bool bias) {
  spec.validate();
  ConvT3dLayer l;
  l.spec = spec;
  const std::int64_t fan_in = static_cast<std::int64_t>(spec.in_channels) * spec.kernel[0] *
                              spec.kernel[1] * spec.kernel[2];
  l.w = reg.add(name + ".w",
                he_normal(rng, {spec.in_channels, spec.out_channels, spec.kernel[0],
                                spec.kernel[1], spec.kernel[2]},
                          fan_in));
  if (bias) l.b = reg.add(name + ".b", Tensor::zeros({spec.out_channels}));
  return l;
}

Var ConvT3dLayer::forward(Ctx& cx, Var x) const {
  std::optional<Var> bv;
  if (b) bv = cx.use(b);
  return conv_transpose3d(cx.tape, x, cx.use(w), bv, spec);
}

LinearLayer LinearLayer::make(ParamRegistry& reg, Rng& rng, const std::string& name, int in,
                              int out, bool bias) {
  LinearLayer l;
  l.w = reg.add(name + ".w", he_normal(rng, {in, out}, in));
  if (bias) l.b = reg.add(name + ".b", Tensor::zeros({out}));
  return l;
}

Var LinearLayer::forward(Ctx& cx, Var x) const {
  std::optional<Var> bv;
  if (b) bv = cx.use(b);
  return linear(cx.tape, x, cx.use(w), bv);
}

LayerNormLayer LayerNormLayer::make(ParamRegistry& reg, const std::string& name, int channels) {
  LayerNormLayer l;
  l.gamma = reg.add(name + ".g", Tensor::full({channels}, 1.0));
  l.beta = reg.add(name + ".b", Tensor::zeros({channels}));
  return l;
}

Var LayerNormLayer::forward(Ctx& cx, Var x) const {
  return layer_norm(cx.tape, x, cx.use(gamma), cx.use(beta), eps);
}

BatchNormLayer BatchNormLayer::make(ParamRegistry& reg, const std::string& name, int channels) {
  BatchNormLayer l;
  l.gamma = reg.add(name + ".g", Tensor::full({channels}, 1.0));
  l.beta = reg.add(name + ".b", Tensor::zeros({channels}));
  l.running_mean = reg.add(name + ".rm", Tensor::zeros({channels}), false);
  l.running_var = reg.add(name + ".rv", Tensor::full({channels}, 1.0), false);
  l.batches_seen = reg.add(name + ".n", Tensor::zeros({1}), false);
  return l;
}

Var BatchNormLayer::forward(Ctx& cx, Var x) const {
  if (cx.training) {
    BatchStats stats;
    Var y = batch_norm_train(cx.tape, x, cx.use(gamma), cx.use(beta), eps, &stats);
    const Tensor& xv = cx.tape.value(x);
    std::int64_t m = xv.extent(0);
    for (int a = 2; a < xv.rank(); ++a) m *= xv.extent(a);
    const double corr = m > 1 ? static_cast<double>(m) / static_cast<double>(m - 1) : 1.0;
    const int c = stats.mean.extent(0);
    double* rm = running_mean->value.mutable_data();
    double* rv = running_var->value.mutable_data();
    for (int i = 0; i < c; ++i) {
      rm[i] = (1.0 - momentum) * rm[i] + momentum * stats.mean.data()[static_cast<size_t>(i)];
      rv[i] =
          (1.0 - momentum) * rv[i] + momentum * corr * stats.var.data()[static_cast<size_t>(i)];
    }
    batches_seen->value.mutable_data()[0] += 1.0;
    return y;
  }
  if (batches_seen->value.data()[0] < 1.0) {
    throw std::logic_error("batch_norm: eval mode before any running statistics exist (" +
                           gamma->name + ")");
  }
  return batch_norm_eval(cx.tape, x, cx.use(gamma), cx.use(beta), running_mean->value,
                         running_var->value, eps);
}

DwConv1dLayer DwConv1dLayer::make(ParamRegistry& reg, Rng& rng, const std::string& name,
                                  int channels, int width) {
  DwConv1dLayer l;
  l.w = reg.add(name + ".w", he_normal(rng, {channels, width}, width));
  l.b = reg.add(name + ".b", Tensor::zeros({channels}));
  return l;
}

Var DwConv1dLayer::forward(Ctx& cx, Var x) const {
  Var y = dwconv1d_seq(cx.tape, x, cx.use(w));
  return add(cx.tape, y, cx.use(b));
}

SsmLayer SsmLayer::make(ParamRegistry& reg, Rng& rng, const std::string& name, int channels,
                        int state) {
  SsmLayer l;
  l.channels = channels;
  l.state = state;
  l.wb = LinearLayer::make(reg, rng, name + ".wb", channels, state, false);
  l.wc = LinearLayer::make(reg, rng, name + ".wc", channels, state, false);
  l.wdelta = LinearLayer::make(reg, rng, name + ".wd", channels, channels, true);

  std::vector<double> alog(static_cast<size_t>(channels) * state);
  for (int c = 0; c < channels; ++c) {
    for (int n = 0; n < state; ++n) {
      alog[static_cast<size_t>(c * state + n)] = std::log(static_cast<double>(n + 1));
    }
  }
  l.a_log = reg.add(name + ".a_log", Tensor::raw({channels, state}, std::move(alog)));
  l.dskip = reg.add(name + ".d", Tensor::full({channels}, 1.0));

  // delta bias: softplus(bias) log-uniform in [1e-3, 1e-1]
  std::vector<double> db(static_cast<size_t>(channels));
  for (int c = 0; c < channels; ++c) {
    const double u = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    db[static_cast<size_t>(c)] = std::log(std::expm1(u));
  }
  l.wdelta.b->value = Tensor::raw({channels}, std::move(db));
  return l;
}

Var SsmLayer::forward(Ctx& cx, Var u) const {
  Tape& t = cx.tape;
  Var b = wb.forward(cx, u);
  Var c = wc.forward(cx, u);
  Var dpre = wdelta.forward(cx, u);
  Var dl = softplus(t, dpre);
  Var a = neg(t, exp_op(t, cx.use(a_log)));
  return selective_scan(t, u, dl, a, b, c, cx.use(dskip), cx.scan_mode);
}

ResidualBlock ResidualBlock::make(ParamRegistry& reg, Rng& rng, const std::string& name, int c_in,
                                  int c_out, Act act) {
  ResidualBlock blk;
  blk.act = act;
  Conv3dSpec s1{c_in, c_out, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, 1};
  Conv3dSpec s2{c_out, c_out, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, 1};
  blk.conv1 = Conv3dLayer::make(reg, rng, name + ".conv1", s1);
  blk.conv2 = Conv3dLayer::make(reg, rng, name + ".conv2", s2);
  blk.bn1 = BatchNormLayer::make(reg, name + ".bn1", c_out);
  blk.bn2 = BatchNormLayer::make(reg, name + ".bn2", c_out);
  if (c_in != c_out) {
    Conv3dSpec sp{c_in, c_out, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, 1};
    blk.proj = Conv3dLayer::make(reg, rng, name + ".proj", sp, false);
  }
  return blk;
}

Var ResidualBlock::forward(Ctx& cx, Var x) const {
  ++res_eval_counter();
  Tape& t = cx.tape;
  Var h = activation(t, bn1.forward(cx, conv1.forward(cx, x)), act);
  h = bn2.forward(cx, conv2.forward(cx, h));
  Var skip = proj ? proj->forward(cx, x) : x;
  return activation(t, add(t, h, skip), act);
}

std::vector<int> channel_partition(int cw, int order) {
  if (order < 2 || order > 6) {
    throw std::invalid_argument("hgconv: order " + std::to_string(order) + " outside [2,6]");
  }
  const int denom = 1 << (order - 1);
  if (cw <= 0 || cw % denom != 0) {
    throw std::invalid_argument("hgconv: working channels " + std::to_string(cw) +
                                " not divisible by " + std::to_string(denom));
  }
  std::vector<int> parts;
  parts.push_back(cw / denom);  // U0
  for (int j = 0; j < order; ++j) parts.push_back(cw / (1 << (order - 1 - j)));
  return parts;
}

HgConv HgConv::make(ParamRegistry& reg, Rng& rng, const std::string& name, int cw, int order,
                    double gate_scale, bool multiplicative) {
  HgConv h;
  h.cw = cw;
  h.order = order;
  h.gate_scale = gate_scale;
  h.multiplicative = multiplicative;
  h.partition = channel_partition(cw, order);
  Conv3dSpec pin{cw, 2 * cw, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, 1};
  h.pw_in = Conv3dLayer::make(reg, rng, name + ".pw", pin);
  Conv3dSpec sdw{2 * cw, 2 * cw, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, 2 * cw};
  h.dw = Conv3dLayer::make(reg, rng, name + ".dw", sdw);
  for (int j = 1; j < order; ++j) {
    // phi_j: C'_{j-1} -> C'_j (partition[j] holds V_{j-1}'s share == U_j's width)
    Conv3dSpec sp{h.partition[static_cast<size_t>(j)], h.partition[static_cast<size_t>(j + 1)],
                  {1, 1, 1},
                  {1, 1, 1},
                  {0, 0, 0},
                  1};
    h.phi.push_back(Conv3dLayer::make(reg, rng, name + ".phi" + std::to_string(j), sp));
  }
  return h;
}

Var HgConv::forward(Ctx& cx, Var x) const {
  Tape& t = cx.tape;
  const Tensor& xv = t.value(x);
  if (xv.extent(1) != cw) {
    throw std::invalid_argument("hgconv: input has " + std::to_string(xv.extent(1)) +
                                " channels, expected " + std::to_string(cw));
  }
  Var y = dw.forward(cx, pw_in.forward(cx, x));
  int off = 0;
  Var u = slice_channels(t, y, off, partition[0]);
  off += partition[0];
  Var v0 = slice_channels(t, y, off, partition[1]);
  off += partition[1];
  u = add(t, v0, u);
  for (int j = 1; j < order; ++j) {
    Var vj = slice_channels(t, y, off, partition[static_cast<size_t>(j + 1)]);
    off += partition[static_cast<size_t>(j + 1)];
    Var g = scale(t, phi[static_cast<size_t>(j - 1)].forward(cx, u), gate_scale);
    u = multiplicative ? mul(t, vj, g) : add(t, vj, g);
  }
  return u;
}

int hgcn_working_channels(int c_stage, int order) {
  const int denom = 1 << (order - 1);
  return (c_stage + denom - 1) / denom * denom;
}

HgcnBlock HgcnBlock::make(ParamRegistry& reg, Rng& rng, const std::string& name, int c_stage,
                          int order, double gate_scale, bool multiplicative, Act act) {
  HgcnBlock b;
  b.c_stage = c_stage;
  b.cw = hgcn_working_channels(c_stage, order);
  b.act = act;
  b.res = ResidualBlock::make(reg, rng, name + ".res", c_stage, c_stage, act);
  Conv3dSpec stem{c_stage, b.cw, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, 1};
  b.stem = Conv3dLayer::make(reg, rng, name + ".stem", stem);
  b.stem_bn = BatchNormLayer::make(reg, name + ".stem_bn", b.cw);
  b.ln1 = LayerNormLayer::make(reg, name + ".ln1", b.cw);
  b.ln2 = LayerNormLayer::make(reg, name + ".ln2", b.cw);
  b.hg = HgConv::make(reg, rng, name + ".hg", b.cw, order, gate_scale, multiplicative);
  Conv3dSpec op{b.cw, c_stage, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, 1};
  b.out_proj = Conv3dLayer::make(reg, rng, name + ".out", op);
  return b;
}

Var HgcnBlock::forward(Ctx& cx, Var x) const {
  Tape& t = cx.tape;
  Var r = res.forward(cx, x);
  Var hp = stem_bn.forward(cx, stem.forward(cx, r));
  Var hpp = add(t, hg.forward(cx, channel_ln(cx, ln1, hp)), hp);
  return activation(t, add(t, out_proj.forward(cx, channel_ln(cx, ln2, hpp)), r), act);
}

MambaBlock MambaBlock::make(ParamRegistry& reg, Rng& rng, const std::string& name, int channels,
                            int expand, int state, int dw_width, Act act) {
  MambaBlock b;
  b.channels = channels;
  b.expand = expand;
  b.act = act;
  const int inner = expand * channels;
  Conv3dSpec pre{channels, channels, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, 1};
  b.pre = Conv3dLayer::make(reg, rng, name + ".pre", pre);
  b.pre_bn = BatchNormLayer::make(reg, name + ".pre_bn", channels);
  b.ln_in = LayerNormLayer::make(reg, name + ".ln_in", channels);
  b.ln_mid = LayerNormLayer::make(reg, name + ".ln_mid", inner);
  b.in_ssm = LinearLayer::make(reg, rng, name + ".in_ssm", channels, inner, false);
  b.in_gate = LinearLayer::make(reg, rng, name + ".in_gate", channels, inner, false);
  b.dwc = DwConv1dLayer::make(reg, rng, name + ".dwc", inner, dw_width);
  b.ssm = SsmLayer::make(reg, rng, name + ".ssm", inner, state);
  b.mlp1 = LinearLayer::make(reg, rng, name + ".mlp1", inner, 4 * channels);
  b.mlp2 = LinearLayer::make(reg, rng, name + ".mlp2", 4 * channels, channels);
  return b;
}

Var MambaBlock::forward(Ctx& cx, Var x) const {
  Tape& t = cx.tape;
  const Tensor& xv = t.value(x);
  const int d = xv.extent(2), h = xv.extent(3), w = xv.extent(4);
  Var mt = add(t, activation(t, pre_bn.forward(cx, pre.forward(cx, x)), act), x);
  Var tok = vol_to_seq(t, mt);
  Var ln_t = ln_in.forward(cx, tok);
  Var u = silu(t, dwc.forward(cx, in_ssm.forward(cx, ln_t)));
  Var m1 = ssm.forward(cx, u);
  Var m2 = silu(t, in_gate.forward(cx, ln_t));
  Var g = mul(t, m1, m2);
  Var o = mlp2.forward(cx, gelu(t, mlp1.forward(cx, ln_mid.forward(cx, g))));
  return add(t, seq_to_vol(t, o, d, h, w), mt);
}

}  // namespace gmseg
