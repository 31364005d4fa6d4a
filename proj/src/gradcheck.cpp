#include "gmseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "gmseg/blocks.hpp"
#include "gmseg/config.hpp"
#include "gmseg/conv.hpp"
#include "gmseg/fdcheck.hpp"
#include "gmseg/loss.hpp"
#include "gmseg/net.hpp"
#include "gmseg/norm.hpp"
#include "gmseg/ops.hpp"
#include "gmseg/scan.hpp"

namespace gmseg {

namespace {

constexpr double kH = 1e-5;
constexpr double kAtol = 1e-7;

Var project(Tape& t, Var x, const Tensor& w) { return sum_all(t, mul(t, x, t.constant(w))); }

// ---- free-tensor cases: every input is a leaf, FD probes all coordinates ----

struct FreeCase {
  std::string name;
  std::vector<Tensor> inputs;
  std::function<Var(Tape&, std::span<const Var>)> scalar;  // must return a scalar Var
  double rtol = 1e-4;
};

GradCheckItem run_free(const FreeCase& c) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(c.inputs.size());
  for (const Tensor& in : c.inputs) vars.push_back(tape.leaf(in, true));
  GradMap gm = tape.backward(c.scalar(tape, vars));

  ScalarFn fn = [&c](std::span<const Tensor> in) {
    Tape t2(/*grad_enabled=*/false);
    std::vector<Var> vs;
    vs.reserve(in.size());
    for (const Tensor& x : in) vs.push_back(t2.leaf(x, false));
    return t2.value(c.scalar(t2, vs)).value();
  };

  GradCheckItem item{c.name, 0.0, 0.0, c.rtol, true};
  for (size_t i = 0; i < c.inputs.size(); ++i) {
    const Tensor* g = gm.find(vars[i]);
    const Tensor analytic = g != nullptr ? *g : Tensor::zeros(c.inputs[i].shape());
    const Tensor fd = finite_difference_grad(fn, c.inputs, i, kH);
    const GradDelta d = compare_grads(analytic, fd, c.rtol, kAtol);
    item.max_rel = std::max(item.max_rel, d.max_rel);
    item.max_abs = std::max(item.max_abs, d.max_abs);
    item.pass = item.pass && d.pass;
  }
  return item;
}

// ---- parameter cases: forward reads ParamRegistry values through a Ctx ----

std::vector<std::int64_t> pick_coords(std::int64_t n, int cap, Rng& rng) {
  std::vector<std::int64_t> coords;
  if (n <= cap) {
    coords.resize(static_cast<size_t>(n));
    for (std::int64_t k = 0; k < n; ++k) coords[static_cast<size_t>(k)] = k;
    return coords;
  }
  coords.push_back(0);
  coords.push_back(n - 1);
  while (static_cast<int>(coords.size()) < cap) {
    coords.push_back(rng.uniform_int(1, static_cast<int>(n - 2)));
  }
  std::sort(coords.begin(), coords.end());
  coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
  return coords;
}

void fold_coord(GradCheckItem& item, double a, double b) {
  const double diff = std::abs(a - b);
  const double scale = std::max(std::abs(a), std::abs(b));
  item.max_abs = std::max(item.max_abs, diff);
  if (scale > 0.0) item.max_rel = std::max(item.max_rel, diff / (scale + kAtol));
  item.pass = item.pass && diff <= item.rtol * scale + kAtol;
}

// fwd must map (Ctx, input Var) to a scalar Var and reread parameter values on
// every call, so coordinate bumps on p->value reach the next evaluation.
using ParamFwd = std::function<Var(Ctx&, Var)>;

std::vector<GradCheckItem> check_params(const std::string& name, ParamRegistry& reg,
                                        const Tensor& x, const ParamFwd& fwd, double rtol,
                                        int max_coords, Rng& rng) {
  Tape tape;
  Ctx cx(tape);
  cx.training = true;
  Var xv = tape.leaf(x, true);
  GradMap gm = tape.backward(fwd(cx, xv));

  auto eval_with_input = [&fwd](const Tensor& xt) {
    Tape t2(/*grad_enabled=*/false);
    Ctx c2(t2);
    c2.training = true;
    return t2.value(fwd(c2, t2.leaf(xt, false))).value();
  };

  std::vector<GradCheckItem> items;

  GradCheckItem xi{name + "/input", 0.0, 0.0, rtol, true};
  {
    const Tensor* g = gm.find(xv);
    const Tensor analytic = g != nullptr ? *g : Tensor::zeros(x.shape());
    auto ga = analytic.data();
    for (std::int64_t k : pick_coords(x.size(), max_coords, rng)) {
      std::vector<double> probe(x.data().begin(), x.data().end());
      const double orig = probe[static_cast<size_t>(k)];
      probe[static_cast<size_t>(k)] = orig + kH;
      const double up = eval_with_input(Tensor::raw(x.shape(), std::move(probe)));
      std::vector<double> probe2(x.data().begin(), x.data().end());
      probe2[static_cast<size_t>(k)] = orig - kH;
      const double dn = eval_with_input(Tensor::raw(x.shape(), std::move(probe2)));
      fold_coord(xi, ga[static_cast<size_t>(k)], (up - dn) / (2.0 * kH));
    }
  }
  items.push_back(std::move(xi));

  for (const auto& up : reg.items()) {
    Param* p = up.get();
    if (!p->trainable) continue;
    GradCheckItem pi{name + "/" + p->name, 0.0, 0.0, rtol, true};
    const Var leaf = cx.bound(p);
    const Tensor* g = leaf.valid() ? gm.find(leaf) : nullptr;
    const Tensor analytic = g != nullptr ? *g : Tensor::zeros(p->value.shape());
    auto ga = analytic.data();
    const Tensor saved = p->value;
    for (std::int64_t k : pick_coords(p->value.size(), max_coords, rng)) {
      const double orig = saved.data()[static_cast<size_t>(k)];
      p->value = saved;
      p->value.mutable_data()[k] = orig + kH;
      const double fup = eval_with_input(x);
      p->value = saved;
      p->value.mutable_data()[k] = orig - kH;
      const double fdn = eval_with_input(x);
      fold_coord(pi, ga[static_cast<size_t>(k)], (fup - fdn) / (2.0 * kH));
    }
    p->value = saved;
    items.push_back(std::move(pi));
  }
  return items;
}

// ---- case construction ----

// signed values bounded away from zero, safe around kinked activations
Tensor away_from_zero(Rng& rng, const Shape& s, double lo, double hi) {
  Tensor t = rng.uniform_tensor(s, lo, hi);
  double* p = t.mutable_data();
  for (std::int64_t i = 0; i < t.size(); ++i) {
    if (rng.uniform(0.0, 1.0) < 0.5) p[i] = -p[i];
  }
  return t;
}

ByteVolume random_labels(Rng& rng, const Shape& s, int classes) {
  ByteVolume v = ByteVolume::zeros(s);
  for (auto& b : v.data) b = static_cast<std::uint8_t>(rng.uniform_int(0, classes - 1));
  return v;
}

FreeCase with_projection(std::string name, std::vector<Tensor> inputs,
                         std::function<Var(Tape&, std::span<const Var>)> raw, double rtol,
                         Rng& rng) {
  Tensor w;
  {
    Tape t0(/*grad_enabled=*/false);
    std::vector<Var> vs;
    vs.reserve(inputs.size());
    for (const Tensor& x : inputs) vs.push_back(t0.leaf(x, false));
    w = rng.uniform_tensor(t0.value(raw(t0, vs)).shape(), -1.0, 1.0);
  }
  FreeCase c;
  c.name = std::move(name);
  c.inputs = std::move(inputs);
  c.scalar = [raw = std::move(raw), w](Tape& t, std::span<const Var> vs) {
    return project(t, raw(t, vs), w);
  };
  c.rtol = rtol;
  return c;
}

std::vector<FreeCase> op_cases(Rng& rng) {
  std::vector<FreeCase> cases;
  auto add_case = [&](std::string name, std::vector<Tensor> inputs,
                      std::function<Var(Tape&, std::span<const Var>)> raw, double rtol = 1e-4) {
    cases.push_back(with_projection(std::move(name), std::move(inputs), std::move(raw), rtol, rng));
  };

  add_case("add_broadcast", {rng.normal_tensor({2, 3, 4}, 0, 1), rng.normal_tensor({4}, 0, 1)},
           [](Tape& t, std::span<const Var> v) { return add(t, v[0], v[1]); });
  add_case("sub", {rng.normal_tensor({2, 3}, 0, 1), rng.normal_tensor({2, 3}, 0, 1)},
           [](Tape& t, std::span<const Var> v) { return sub(t, v[0], v[1]); });
  add_case("mul_broadcast", {rng.normal_tensor({2, 3, 4}, 0, 1), rng.normal_tensor({3, 4}, 0, 1)},
           [](Tape& t, std::span<const Var> v) { return mul(t, v[0], v[1]); });
  add_case("div", {rng.normal_tensor({2, 3}, 0, 1), rng.uniform_tensor({2, 3}, 0.5, 1.5)},
           [](Tape& t, std::span<const Var> v) { return div(t, v[0], v[1]); });
  add_case("scale_affine", {rng.normal_tensor({3, 2}, 0, 1)},
           [](Tape& t, std::span<const Var> v) { return scale(t, v[0], 1.7, -0.3); });
  add_case("neg", {rng.normal_tensor({5}, 0, 1)},
           [](Tape& t, std::span<const Var> v) { return neg(t, v[0]); });
  add_case("exp", {rng.uniform_tensor({2, 3}, -1.0, 1.0)},
           [](Tape& t, std::span<const Var> v) { return exp_op(t, v[0]); });
  add_case("log", {rng.uniform_tensor({2, 3}, 0.5, 2.0)},
           [](Tape& t, std::span<const Var> v) { return log_op(t, v[0]); });
  add_case("sqrt", {rng.uniform_tensor({2, 3}, 0.5, 2.0)},
           [](Tape& t, std::span<const Var> v) { return sqrt_op(t, v[0]); });
  add_case("sigmoid", {rng.normal_tensor({2, 5}, 0, 2)},
           [](Tape& t, std::span<const Var> v) { return sigmoid(t, v[0]); });
  add_case("silu", {rng.normal_tensor({2, 5}, 0, 2)},
           [](Tape& t, std::span<const Var> v) { return silu(t, v[0]); });
  add_case("gelu", {rng.normal_tensor({2, 5}, 0, 2)},
           [](Tape& t, std::span<const Var> v) { return gelu(t, v[0]); });
  add_case("softplus", {rng.normal_tensor({2, 5}, 0, 2)},
           [](Tape& t, std::span<const Var> v) { return softplus(t, v[0]); });
  add_case("leaky_relu", {away_from_zero(rng, {3, 4}, 0.2, 1.0)},
           [](Tape& t, std::span<const Var> v) { return leaky_relu(t, v[0], 0.01); });
  add_case("softmax", {rng.normal_tensor({2, 3, 4}, 0, 1)},
           [](Tape& t, std::span<const Var> v) { return softmax(t, v[0], 1); });
  add_case("log_softmax", {rng.normal_tensor({2, 3, 4}, 0, 1)},
           [](Tape& t, std::span<const Var> v) { return log_softmax(t, v[0], 1); });
  add_case("linear",
           {rng.normal_tensor({2, 3}, 0, 1), rng.normal_tensor({3, 4}, 0, 0.7),
            rng.normal_tensor({4}, 0, 0.2)},
           [](Tape& t, std::span<const Var> v) { return linear(t, v[0], v[1], v[2]); });
  add_case("mean_all", {rng.normal_tensor({3, 4}, 0, 1)},
           [](Tape& t, std::span<const Var> v) { return mean_all(t, v[0]); });
  add_case("sum_spatial", {rng.normal_tensor({2, 3, 2, 2, 2}, 0, 1)},
           [](Tape& t, std::span<const Var> v) { return sum_spatial(t, v[0]); });
  add_case("vol_seq_roundtrip", {rng.normal_tensor({1, 2, 2, 3, 2}, 0, 1)},
           [](Tape& t, std::span<const Var> v) {
             return seq_to_vol(t, vol_to_seq(t, v[0]), 2, 3, 2);
           });
  add_case("concat_slice",
           {rng.normal_tensor({1, 2, 2, 2, 2}, 0, 1), rng.normal_tensor({1, 3, 2, 2, 2}, 0, 1)},
           [](Tape& t, std::span<const Var> v) {
             return slice_channels(t, concat_channels(t, v[0], v[1]), 1, 3);
           });
  add_case("spatial_slice", {rng.normal_tensor({1, 2, 4, 4, 4}, 0, 1)},
           [](Tape& t, std::span<const Var> v) {
             return spatial_slice(t, v[0], Box{1, 3, 0, 2, 2, 4});
           });
  {
    ByteVolume labels = random_labels(rng, {1, 2, 2, 2}, 3);
    add_case("gather_class", {rng.normal_tensor({1, 3, 2, 2, 2}, 0, 1)},
             [labels](Tape& t, std::span<const Var> v) { return gather_class(t, v[0], labels); });
  }
  {
    Conv3dSpec spec{2, 3, {2, 3, 3}, {1, 1, 1}, {0, 1, 1}, 1};
    add_case("conv3d",
             {rng.normal_tensor({1, 2, 4, 4, 5}, 0, 1), rng.normal_tensor({3, 2, 2, 3, 3}, 0, 0.4),
              rng.normal_tensor({3}, 0, 0.2)},
             [spec](Tape& t, std::span<const Var> v) { return conv3d(t, v[0], v[1], v[2], spec); });
  }
  {
    Conv3dSpec spec{4, 4, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}, 2};
    add_case("conv3d_strided_grouped",
             {rng.normal_tensor({1, 4, 5, 5, 4}, 0, 1), rng.normal_tensor({4, 2, 3, 3, 3}, 0, 0.3)},
             [spec](Tape& t, std::span<const Var> v) {
               return conv3d(t, v[0], v[1], std::nullopt, spec);
             });
  }
  {
    Conv3dSpec spec{3, 2, {2, 2, 2}, {2, 2, 2}, {0, 0, 0}, 1};
    add_case("conv_transpose3d",
             {rng.normal_tensor({1, 3, 2, 3, 2}, 0, 1), rng.normal_tensor({3, 2, 2, 2, 2}, 0, 0.4),
              rng.normal_tensor({2}, 0, 0.2)},
             [spec](Tape& t, std::span<const Var> v) {
               return conv_transpose3d(t, v[0], v[1], v[2], spec);
             });
  }
  add_case("dwconv1d",
           {rng.normal_tensor({1, 5, 3}, 0, 1), rng.normal_tensor({3, 4}, 0, 0.5)},
           [](Tape& t, std::span<const Var> v) { return dwconv1d_seq(t, v[0], v[1]); });
  add_case("layer_norm",
           {rng.normal_tensor({2, 3, 4}, 0, 1), rng.uniform_tensor({4}, 0.5, 1.5),
            rng.normal_tensor({4}, 0, 0.2)},
           [](Tape& t, std::span<const Var> v) { return layer_norm(t, v[0], v[1], v[2]); });
  add_case("batch_norm_train",
           {rng.normal_tensor({2, 3, 2, 2, 2}, 0, 1), rng.uniform_tensor({3}, 0.5, 1.5),
            rng.normal_tensor({3}, 0, 0.2)},
           [](Tape& t, std::span<const Var> v) {
             return batch_norm_train(t, v[0], v[1], v[2], 1e-5, nullptr);
           });
  {
    Tensor rm = rng.normal_tensor({3}, 0, 0.3);
    Tensor rv = rng.uniform_tensor({3}, 0.5, 1.5);
    add_case("batch_norm_eval",
             {rng.normal_tensor({2, 3, 2, 2, 2}, 0, 1), rng.uniform_tensor({3}, 0.5, 1.5),
              rng.normal_tensor({3}, 0, 0.2)},
             [rm, rv](Tape& t, std::span<const Var> v) {
               return batch_norm_eval(t, v[0], v[1], v[2], rm, rv, 1e-5);
             });
  }
  for (ScanMode mode : {ScanMode::sequential, ScanMode::parallel}) {
    std::vector<Tensor> in = {
        rng.normal_tensor({1, 6, 2}, 0, 1),      // x
        rng.uniform_tensor({1, 6, 2}, 0.05, 0.3),  // delta > 0
        rng.uniform_tensor({2, 3}, -1.2, -0.1),    // a < 0
        rng.normal_tensor({1, 6, 3}, 0, 1),        // b
        rng.normal_tensor({1, 6, 3}, 0, 1),        // c
        rng.normal_tensor({2}, 0, 0.5),            // d
    };
    add_case(mode == ScanMode::sequential ? "selective_scan_seq" : "selective_scan_par",
             std::move(in), [mode](Tape& t, std::span<const Var> v) {
               return selective_scan(t, v[0], v[1], v[2], v[3], v[4], v[5], mode, /*chunk=*/3);
             });
  }

  // losses at rtol 1e-5, probed through the softmax that feeds them
  {
    ByteVolume labels = random_labels(rng, {1, 3, 3, 3}, 3);
    Tensor onehot = one_hot(labels, 3);
    add_case("dice_loss", {rng.normal_tensor({1, 3, 3, 3, 3}, 0, 1)},
             [onehot](Tape& t, std::span<const Var> v) {
               return dice_loss(t, softmax(t, v[0], 1), onehot);
             },
             1e-5);
    add_case("tversky_loss", {rng.normal_tensor({1, 3, 3, 3, 3}, 0, 1)},
             [onehot](Tape& t, std::span<const Var> v) {
               return tversky_loss(t, softmax(t, v[0], 1), onehot, 0.3, 0.7);
             },
             1e-5);
    add_case("cross_entropy", {rng.normal_tensor({1, 3, 3, 3, 3}, 0, 1)},
             [labels](Tape& t, std::span<const Var> v) { return cross_entropy(t, v[0], labels); },
             1e-5);
  }
  {
    ByteVolume labels = random_labels(rng, {1, 4, 4, 4}, 2);
    Tensor onehot = one_hot(labels, 2);
    RegionPartition part = RegionPartition::splits({4, 4, 4}, {2, 1, 1});
    add_case("region_tversky_loss", {rng.normal_tensor({1, 2, 4, 4, 4}, 0, 1)},
             [onehot, part](Tape& t, std::span<const Var> v) {
               return region_tversky_loss(t, softmax(t, v[0], 1), onehot, part, 0.3, 0.7);
             },
             1e-5);
    std::vector<std::pair<double, double>> ab{{0.3, 0.7}, {0.6, 0.4}};
    add_case("region_tversky_per_region_ab", {rng.normal_tensor({1, 2, 4, 4, 4}, 0, 1)},
             [onehot, part, ab](Tape& t, std::span<const Var> v) {
               return region_tversky_loss(t, softmax(t, v[0], 1), onehot, part,
                                          std::span<const std::pair<double, double>>(ab));
             },
             1e-5);
    LossConfig cfg;
    cfg.variant = LossVariant::compound;
    cfg.region_splits = {2, 2, 2};
    add_case("compound_loss", {rng.normal_tensor({1, 2, 4, 4, 4}, 0, 1)},
             [labels, cfg](Tape& t, std::span<const Var> v) {
               return compound_loss(t, v[0], labels, cfg);
             },
             1e-5);
    LossConfig scfg;
    scfg.variant = LossVariant::region_tversky;
    scfg.alpha = 0.3;
    scfg.beta = 0.7;
    scfg.region_splits = {2, 2, 2};
    add_case("supervise",
             {rng.normal_tensor({1, 2, 4, 4, 4}, 0, 1), rng.normal_tensor({1, 2, 2, 2, 2}, 0, 1)},
             [labels, scfg](Tape& t, std::span<const Var> v) {
               std::vector<Var> scales(v.begin(), v.end());
               return supervise(t, scales, labels, scfg);
             },
             1e-5);
  }
  return cases;
}

std::vector<GradCheckItem> block_cases(Rng& rng) {
  std::vector<GradCheckItem> items;

  {
    ParamRegistry reg;
    ResidualBlock blk = ResidualBlock::make(reg, rng, "res", 3, 4, Act::leaky_relu);
    Tensor x = rng.normal_tensor({1, 3, 3, 3, 3}, 0, 1);
    Tensor w = rng.uniform_tensor({1, 4, 3, 3, 3}, -1.0, 1.0);
    auto fwd = [&blk, w](Ctx& cx, Var xv) { return project(cx.tape, blk.forward(cx, xv), w); };
    auto sub = check_params("residual_block", reg, x, fwd, 1e-4, 24, rng);
    items.insert(items.end(), sub.begin(), sub.end());
  }
  for (bool multiplicative : {false, true}) {
    ParamRegistry reg;
    HgcnBlock blk =
        HgcnBlock::make(reg, rng, "hgcn", 4, 2, 0.5, multiplicative, Act::leaky_relu);
    Tensor x = rng.normal_tensor({1, 4, 3, 3, 3}, 0, 1);
    Tensor w = rng.uniform_tensor({1, 4, 3, 3, 3}, -1.0, 1.0);
    auto fwd = [&blk, w](Ctx& cx, Var xv) { return project(cx.tape, blk.forward(cx, xv), w); };
    auto sub = check_params(multiplicative ? "hgcn_block_mult" : "hgcn_block", reg, x, fwd, 1e-4,
                            20, rng);
    items.insert(items.end(), sub.begin(), sub.end());
  }
  {
    ParamRegistry reg;
    MambaBlock blk = MambaBlock::make(reg, rng, "mamba", 2, 2, 4, 3, Act::leaky_relu);
    Tensor x = rng.normal_tensor({1, 2, 2, 2, 2}, 0, 1);
    Tensor w = rng.uniform_tensor({1, 2, 2, 2, 2}, -1.0, 1.0);
    auto fwd = [&blk, w](Ctx& cx, Var xv) { return project(cx.tape, blk.forward(cx, xv), w); };
    auto sub = check_params("residual_mamba_block", reg, x, fwd, 1e-4, 20, rng);
    items.insert(items.end(), sub.begin(), sub.end());
  }
  return items;
}

std::vector<GradCheckItem> network_cases(Rng& rng, std::uint64_t seed) {
  NetworkPlan plan;
  plan.stages = 3;
  plan.blocks = {BlockKind::hgcn, BlockKind::mamba, BlockKind::mamba};
  plan.orders = {2};
  plan.channels = {4, 6, 8};
  plan.strides = {{1, 1, 1}, {2, 2, 2}, {2, 2, 2}};
  plan.patch = {8, 8, 8};
  plan.batch = 1;
  plan.deep_supervision = true;
  plan.validate();
  auto net = build(plan, 1, 2, seed);

  Tensor x = rng.normal_tensor({1, 1, 8, 8, 8}, 0, 1);
  std::vector<Tensor> ws;
  for (int l = 0; l < net->scale_count(); ++l) {
    const auto e = net->scale_extents(l);
    ws.push_back(rng.uniform_tensor({1, 2, e[0], e[1], e[2]}, -1.0, 1.0));
  }
  Network* np = net.get();
  auto fwd = [np, ws](Ctx& cx, Var xv) {
    std::vector<Var> logits = np->forward(cx, xv);
    Var total = project(cx.tape, logits[0], ws[0]);
    for (size_t l = 1; l < logits.size(); ++l) {
      total = add(cx.tape, total, project(cx.tape, logits[l], ws[l]));
    }
    return total;
  };
  return check_params("micro_network", net->params, x, fwd, 1e-4, 10, rng);
}

}  // namespace

std::string GradCheckReport::csv() const {
  std::string out = "group,max_rel,max_abs,rtol,pass\n";
  for (const GradCheckItem& it : items) {
    out += it.group + "," + format_double(it.max_rel) + "," + format_double(it.max_abs) + "," +
           format_double(it.rtol) + "," + (it.pass ? "1" : "0") + "\n";
  }
  return out;
}

GradCheckReport run_gradcheck(GradScope scope, std::uint64_t seed) {
  Rng rng(seed);
  GradCheckReport rep;
  switch (scope) {
    case GradScope::op:
      for (const FreeCase& c : op_cases(rng)) rep.items.push_back(run_free(c));
      break;
    case GradScope::block:
      rep.items = block_cases(rng);
      break;
    case GradScope::network:
      rep.items = network_cases(rng, seed);
      break;
  }
  for (const GradCheckItem& it : rep.items) rep.all_pass = rep.all_pass && it.pass;
  return rep;
}

}  // namespace gmseg
