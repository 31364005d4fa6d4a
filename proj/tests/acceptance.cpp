// Integration gate: one [PASS]/[FAIL] line per criterion, nonzero exit on any
// failure. Budgets assume a single desktop core.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "gmseg/blocks.hpp"
#include "gmseg/evaluate.hpp"
#include "gmseg/gradcheck.hpp"
#include "gmseg/loss.hpp"
#include "gmseg/net.hpp"
#include "gmseg/scan.hpp"
#include "gmseg/synth.hpp"
#include "gmseg/train.hpp"
#include "support/oracles.hpp"

using namespace gmseg;

namespace {

// pinned tolerances and budgets
constexpr double kScanTol = 1e-10;        // parallel vs sequential scan
constexpr double kCombineTol = 1e-12;     // combine-rule associativity
constexpr double kIdentityTol = 1e-12;    // loss identities
constexpr double kGradSeconds = 120.0;    // full gradient suite budget
constexpr double kOverfitDsc = 0.95;      // toy overfit target
constexpr int kOverfitSteps = 200;        // step budget per gating mode
constexpr double kOverfitSeconds = 300.0; // wall budget for both modes

int failures = 0;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void report(int idx, const std::string& label, bool pass, const std::string& detail) {
  std::printf("[%s] %d. %s (%s)\n", pass ? "PASS" : "FAIL", idx, label.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

void run(int idx, const std::string& label, const std::function<std::pair<bool, std::string>()>& fn) {
  try {
    auto [pass, detail] = fn();
    report(idx, label, pass, detail);
  } catch (const std::exception& e) {
    report(idx, label, false, std::string("exception: ") + e.what());
  }
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

// ---- 1. gradient suite ----------------------------------------------------

std::pair<bool, std::string> gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  int groups = 0;
  bool all = true;
  double worst = 0.0;
  std::string worst_group = "-";
  for (GradScope scope : {GradScope::op, GradScope::block, GradScope::network}) {
    const GradCheckReport rep = run_gradcheck(scope, 17);
    all = all && rep.all_pass;
    for (const GradCheckItem& it : rep.items) {
      ++groups;
      if (!it.pass) all = false;
      if (it.max_rel > worst) {
        worst = it.max_rel;
        worst_group = it.group;
      }
    }
  }
  const double dt = seconds_since(t0);
  const bool in_budget = dt < kGradSeconds;
  return {all && in_budget, std::to_string(groups) + " groups, worst rel " + fmt(worst) + " in " +
                                worst_group + ", " + fmt(dt) + " s / " + fmt(kGradSeconds) + " s"};
}

// ---- 2. scan agreement ----------------------------------------------------

std::pair<bool, std::string> scan_agreement() {
  Rng rng(29);
  double worst = 0.0;
  int instances = 0;
  auto one = [&](int L, int C, int N) {
    const Tensor delta = rng.uniform_tensor({L, C}, 1e-3, 0.1);
    const Tensor a = rng.uniform_tensor({C, N}, -1.0, -0.01);
    const Tensor bin = rng.normal_tensor({L, N}, 0.0, 1.0);
    const Tensor cout = rng.normal_tensor({L, N}, 0.0, 1.0);
    const Tensor x = rng.normal_tensor({L, C}, 0.0, 1.0);
    const Tensor d = rng.normal_tensor({C}, 0.0, 1.0);
    Tensor abar, bbar;
    discretize(delta, a, bin, &abar, &bbar);
    const Tensor ys = scan_sequential(x, abar, bbar, cout, d);
    for (int chunk : {1, 7, 64, 1024}) {
      worst = std::max(worst, oracle::max_abs_diff(ys, scan_parallel(x, abar, bbar, cout, d, chunk)));
    }
    ++instances;
  };
  one(1024, 8, 16);  // maximal extents
  one(1, 1, 1);
  for (int i = 0; i < 98; ++i) {
    one(rng.uniform_int(1, 1024), rng.uniform_int(1, 8), rng.uniform_int(1, 16));
  }

  double assoc = 0.0;
  for (int i = 0; i < 1000; ++i) {
    auto el = [&rng] { return ScanElement{rng.uniform(-1.0, 1.0), rng.uniform(-2.0, 2.0)}; };
    const ScanElement p = el(), q = el(), r = el();
    const ScanElement lhs = combine(combine(p, q), r);
    const ScanElement rhs = combine(p, combine(q, r));
    assoc = std::max({assoc, std::abs(lhs.a - rhs.a), std::abs(lhs.b - rhs.b)});
  }
  const bool pass = worst <= kScanTol && assoc <= kCombineTol;
  return {pass, std::to_string(instances) + " instances, max |par-seq| " + fmt(worst) + " <= " +
                    fmt(kScanTol) + ", assoc " + fmt(assoc) + " <= " + fmt(kCombineTol)};
}

// ---- 3. channel partition arithmetic ---------------------------------------

std::pair<bool, std::string> partition_arithmetic() {
  int checked = 0, rejected = 0;
  for (int order = 2; order <= 6; ++order) {
    const int gran = 1 << (order - 1);
    for (int k = 1; k <= 10; ++k) {
      const int cw = gran * k;
      const std::vector<int> part = channel_partition(cw, order);
      int sum = 0;
      for (int w : part) sum += w;
      if (sum != 2 * cw || part.back() != cw ||
          static_cast<int>(part.size()) != order + 1) {
        return {false, "order " + std::to_string(order) + ", width " + std::to_string(cw) +
                           ": bad partition"};
      }
      ++checked;
      if (gran > 1) {
        try {
          channel_partition(cw + 1, order);  // not a multiple of 2^(order-1)
          return {false, "order " + std::to_string(order) + ": width " +
                             std::to_string(cw + 1) + " was not rejected"};
        } catch (const std::invalid_argument&) {
          ++rejected;
        }
      }
    }
  }
  return {true, std::to_string(checked) + " partitions sum to 2C with final width C, " +
                    std::to_string(rejected) + " invalid widths rejected"};
}

// ---- 4. loss identities -----------------------------------------------------

Tensor random_prob(Rng& rng, const Shape& spatial, std::vector<std::uint8_t>& labels_out) {
  std::int64_t vox = 1;
  for (int e : spatial) vox *= e;
  std::vector<double> p1(static_cast<size_t>(vox));
  labels_out.resize(static_cast<size_t>(vox));
  for (std::int64_t v = 0; v < vox; ++v) {
    p1[static_cast<size_t>(v)] = rng.uniform(0.05, 0.95);
    labels_out[static_cast<size_t>(v)] = static_cast<std::uint8_t>(rng.uniform_int(0, 1));
  }
  Shape s{1, 2};
  for (int e : spatial) s.push_back(e);
  std::vector<double> data;
  data.reserve(p1.size() * 2);
  for (double p : p1) data.push_back(1.0 - p);
  for (double p : p1) data.push_back(p);
  return Tensor::from(s, std::move(data));
}

double value_of(const std::function<Var(Tape&)>& build) {
  Tape t(false);
  return t.value(build(t)).value();
}

std::pair<bool, std::string> loss_identities() {
  Rng rng(41);
  double worst_dice = 0.0, worst_region = 0.0;
  for (int it = 0; it < 50; ++it) {
    const Shape spatial{rng.uniform_int(2, 4), rng.uniform_int(2, 4), rng.uniform_int(2, 4)};
    std::vector<std::uint8_t> lv;
    const Tensor prob = random_prob(rng, spatial, lv);
    ByteVolume lab;
    lab.shape = {1, spatial[0], spatial[1], spatial[2]};
    lab.data = lv;
    const Tensor onehot = one_hot(lab, 2);

    // at the eps -> 0 limit the dice and tversky(0.5,0.5) denominators agree
    const double tiny = 1e-300;
    const double d = value_of([&](Tape& t) { return dice_loss(t, t.constant(prob), onehot, tiny); });
    const double tv05 = value_of(
        [&](Tape& t) { return tversky_loss(t, t.constant(prob), onehot, 0.5, 0.5, tiny); });
    worst_dice = std::max(worst_dice, std::abs(d - tv05));

    const RegionPartition whole =
        RegionPartition::make(spatial, {spatial[0], spatial[1], spatial[2]});
    const double rt = value_of([&](Tape& t) {
      return region_tversky_loss(t, t.constant(prob), onehot, whole, 0.3, 0.7);
    });
    const double tv =
        value_of([&](Tape& t) { return tversky_loss(t, t.constant(prob), onehot, 0.3, 0.7); });
    worst_region = std::max(worst_region, std::abs(rt - tv));
  }

  // under-segmented fixed instance: misses dominate, so the loss must grow
  // with the miss weight (alpha = 1 - beta keeps the pair admissible)
  const Tensor prob = [&] {
    Shape s{1, 2, 1, 1, 4};
    return Tensor::from(s, {0.7, 0.8, 0.6, 0.9, 0.3, 0.2, 0.4, 0.1});
  }();
  ByteVolume lab;
  lab.shape = {1, 1, 1, 4};
  lab.data = {1, 1, 1, 0};
  const Tensor onehot = one_hot(lab, 2);
  bool increasing = true;
  double prev = -1.0;
  for (double beta : {0.5, 0.6, 0.7, 0.8, 0.9}) {
    const double v = value_of([&](Tape& t) {
      return tversky_loss(t, t.constant(prob), onehot, 1.0 - beta, beta);
    });
    increasing = increasing && v > prev;
    prev = v;
  }

  // gradients of a two-box partition: the untouched box's entries are bitwise
  // unchanged when only the other box's probabilities move
  const RegionPartition two = RegionPartition::make({2, 2, 2}, {1, 2, 2});
  ByteVolume lab8;
  lab8.shape = {1, 2, 2, 2};
  lab8.data = {1, 0, 1, 1, 0, 0, 1, 0};
  const Tensor oh8 = one_hot(lab8, 2);
  auto grad_of = [&](const std::vector<double>& p1) {
    std::vector<double> data;
    for (double p : p1) data.push_back(1.0 - p);
    for (double p : p1) data.push_back(p);
    Tape t;
    Var pred = t.leaf(Tensor::from({1, 2, 2, 2, 2}, std::move(data)), true);
    return t.backward(region_tversky_loss(t, pred, oh8, two, 0.3, 0.7)).at(pred);
  };
  const std::vector<double> base{0.7, 0.2, 0.9, 0.4, 0.3, 0.8, 0.5, 0.6};
  std::vector<double> poked = base;
  for (size_t i = 4; i < 8; ++i) poked[i] = 1.0 - poked[i];
  const Tensor g0 = grad_of(base), g1 = grad_of(poked);
  bool local = true;
  for (int c = 0; c < 2 && local; ++c) {
    for (int v = 0; v < 4; ++v) {
      local = local && g0.data()[static_cast<size_t>(c * 8 + v)] ==
                           g1.data()[static_cast<size_t>(c * 8 + v)];
    }
  }

  const bool pass =
      worst_dice <= kIdentityTol && worst_region <= kIdentityTol && increasing && local;
  return {pass, "50 instances: |tversky(.5,.5)-dice| " + fmt(worst_dice) + ", |region(k=1)-tversky| " +
                    fmt(worst_region) + " <= " + fmt(kIdentityTol) +
                    (increasing ? ", beta sweep increasing" : ", BETA SWEEP NOT MONOTONE") +
                    (local ? ", region gradients box-local (bitwise)" : ", REGION GRADIENT LEAKED")};
}

// ---- 5. derived plan structure ---------------------------------------------

std::pair<bool, std::string> derived_plan_structure() {
  Fingerprint fp;
  fp.median_shape = {64, 256, 256};
  fp.spacing = {1.0, 1.0, 1.0};
  const std::string got = derive_plan(fp).serialize();

  NetworkPlan want;
  want.stages = 6;
  want.blocks = {BlockKind::hgcn, BlockKind::hgcn, BlockKind::hgcn,
                 BlockKind::mamba, BlockKind::mamba, BlockKind::mamba};
  want.orders = {2, 3, 4};
  want.channels = {32, 64, 128, 256, 320, 320};
  // 256 halves five times; 64 only four, so the last stride spares that axis
  want.strides = {{1, 1, 1}, {2, 2, 2}, {2, 2, 2}, {2, 2, 2}, {2, 2, 2}, {1, 2, 2}};
  want.patch = {64, 256, 256};
  want.batch = 2;
  const std::string expect = want.serialize();
  if (got != expect) {
    return {false, "serialized plan differs from the expected six-stage layout:\n" + got};
  }
  return {true, "six stages, blocks H,H,H,M,M,M, orders 2,3,4, byte-identical serialization (" +
                    std::to_string(got.size()) + " bytes)"};
}

// ---- 6. stage extent telescoping ---------------------------------------------

std::pair<bool, std::string> extent_telescoping() {
  auto trace = [](const NetworkPlan& plan, std::uint64_t seed) -> std::string {
    // closed form: divide the patch by each stage stride in turn
    std::array<int, 3> e = plan.patch;
    for (int s = 0; s < plan.stages; ++s) {
      for (size_t a = 0; a < 3; ++a) e[a] /= plan.strides[static_cast<size_t>(s)][a];
      const std::array<int, 3> got = plan.stage_extents(s);
      if (got != e) return "stage " + std::to_string(s) + " extents mismatch";
    }
    // the real forward must land every supervision head on its scale
    auto net = build(plan, 1, 2, seed);
    Tape t(false);
    Ctx cx(t);
    cx.training = true;
    Rng rng(seed);
    Var x = t.constant(
        rng.normal_tensor({1, 1, plan.patch[0], plan.patch[1], plan.patch[2]}, 0.0, 1.0));
    const std::vector<Var> logits = net->forward(cx, x);
    if (static_cast<int>(logits.size()) != plan.stages - 1) return "wrong scale count";
    for (size_t l = 0; l < logits.size(); ++l) {
      const Tensor& lg = t.value(logits[l]);
      const std::array<int, 3> want = plan.stage_extents(static_cast<int>(l));
      if (lg.rank() != 5 || lg.extent(0) != 1 || lg.extent(1) != 2 || lg.extent(2) != want[0] ||
          lg.extent(3) != want[1] || lg.extent(4) != want[2]) {
        return "head " + std::to_string(l) + " extents mismatch";
      }
    }
    return "";
  };

  NetworkPlan abd = preset_plan("abd");
  abd.patch = {40, 32, 32};  // desk-scale crop; stride schedule unchanged
  abd.validate();
  const std::string abd_err = trace(abd, 3);
  if (!abd_err.empty()) return {false, "abd@40x32x32: " + abd_err};

  const std::string toy_err = trace(preset_plan("toy"), 4);
  if (!toy_err.empty()) return {false, "toy: " + toy_err};

  return {true, "abd@40x32x32 and toy: per-stage extents match the stride closed form; every "
                "supervision head sits on its scale"};
}

// ---- 7. toy overfit ----------------------------------------------------------

std::pair<bool, std::string> toy_overfit() {
  const auto t0 = std::chrono::steady_clock::now();
  SynthSpec spec;
  spec.extents = {24, 24, 24};
  spec.seed = 7;
  const auto data = synth_generate(spec, 1);

  TrainConfig cfg;
  cfg.plan = "toy";
  cfg.epochs = 10;
  cfg.steps_per_epoch = 20;  // 200-step budget
  cfg.lr = 1e-3;
  cfg.stop_dsc = kOverfitDsc;
  cfg.loss.variant = LossVariant::compound;  // CE + region tversky (0.3, 0.7)

  std::string detail;
  bool pass = true;
  for (Gating g : {Gating::additive, Gating::multiplicative}) {
    NetworkPlan plan = preset_plan("toy");
    plan.gating = g;
    auto net = build(plan, 1, 2, 7);
    const TrainResult r = train(*net, data, cfg);
    const bool ok = !r.aborted_nan && r.final_dsc >= kOverfitDsc &&
                    r.steps <= static_cast<std::uint64_t>(kOverfitSteps);
    pass = pass && ok;
    detail += std::string(g == Gating::additive ? "additive" : "multiplicative") + " DSC " +
              fmt(r.final_dsc) + " @ " + std::to_string(r.steps) + " steps; ";
  }
  const double dt = seconds_since(t0);
  pass = pass && dt < kOverfitSeconds;
  return {pass, detail + "target " + fmt(kOverfitDsc) + " within " +
                    std::to_string(kOverfitSteps) + " steps, " + fmt(dt) + " s / " +
                    fmt(kOverfitSeconds) + " s"};
}

// ---- 8. recall direction under beta ------------------------------------------

std::pair<bool, std::string> recall_direction() {
  NetworkPlan plan;
  plan.stages = 3;
  plan.blocks = {BlockKind::hgcn, BlockKind::mamba, BlockKind::mamba};
  plan.orders = {2};
  plan.channels = {8, 16, 32};
  plan.strides = {{1, 1, 1}, {2, 2, 2}, {2, 2, 2}};
  plan.patch = {20, 20, 20};
  plan.batch = 1;

  SynthSpec spec;  // sparse foreground, small blobs
  spec.extents = {20, 20, 20};
  spec.seed = 11;
  spec.tw_min = 0.002;
  spec.tw_max = 0.005;
  spec.radius_min = 1.2;
  spec.radius_max = 2.2;
  spec.blobs_min = 1;
  spec.blobs_max = 1;
  const auto data = synth_generate(spec, 3);

  auto mean_recall_at = [&](double beta) {
    double sum = 0.0;
    for (std::uint64_t seed : {1, 2, 3}) {
      TrainConfig cfg;
      cfg.plan = "hmm-20";
      cfg.epochs = 2;
      cfg.steps_per_epoch = 20;
      cfg.lr = 5e-4;
      cfg.loss.variant = LossVariant::tversky;  // CE + tversky(alpha, beta)
      cfg.loss.alpha = 1.0 - beta;
      cfg.loss.beta = beta;
      auto net = build(plan, 1, 2, seed);
      train(*net, data, cfg);
      sum += evaluate(*net, data).mean_recall;
    }
    return sum / 3.0;
  };

  const double even = mean_recall_at(0.5);
  const double tilted = mean_recall_at(0.7);
  return {tilted >= even, "mean foreground recall over seeds {1,2,3}: beta 0.7 -> " + fmt(tilted) +
                              " vs beta 0.5 -> " + fmt(even)};
}

// ---- 9. determinism and checkpoint round trip ---------------------------------

std::pair<bool, std::string> determinism_and_checkpoints() {
  NetworkPlan plan;
  plan.stages = 3;
  plan.blocks = {BlockKind::hgcn, BlockKind::mamba, BlockKind::mamba};
  plan.orders = {2};
  plan.channels = {2, 4, 6};
  plan.strides = {{1, 1, 1}, {2, 2, 2}, {2, 2, 2}};
  plan.patch = {8, 8, 8};
  plan.batch = 1;

  SynthSpec spec;
  spec.extents = {8, 8, 8};
  spec.seed = 31;
  spec.radius_min = 1.2;
  spec.radius_max = 2.2;
  spec.tw_min = 0.01;
  spec.tw_max = 0.30;
  spec.blobs_min = 1;
  spec.blobs_max = 2;
  const auto data = synth_generate(spec, 2);

  TrainConfig cfg;
  cfg.plan = "micro";
  cfg.epochs = 2;
  cfg.steps_per_epoch = 5;
  cfg.lr = 1e-3;
  cfg.loss.region_splits = {2, 2, 2};

  auto net1 = build(plan, 1, 2, 55);
  auto net2 = build(plan, 1, 2, 55);
  const TrainResult r1 = train(*net1, data, cfg);
  const TrainResult r2 = train(*net2, data, cfg);
  bool curves = r1.loss_curve.size() == r2.loss_curve.size();
  for (size_t i = 0; curves && i < r1.loss_curve.size(); ++i) {
    curves = r1.loss_curve[i] == r2.loss_curve[i];  // bitwise
  }

  auto forward_eval = [&](const Network& n) {
    Tape t(false);
    Ctx cx(t);
    cx.training = false;
    Rng rng(9);
    Var x = t.constant(rng.normal_tensor({1, 1, 8, 8, 8}, 0.0, 1.0));
    return t.value(n.forward(cx, x)[0]);
  };
  const Tensor before = forward_eval(*net1);
  auto clone = network_from_checkpoint(snapshot(*net1, r1.steps));
  const Tensor after = forward_eval(*clone);
  bool bitwise = shapes_equal(before.shape(), after.shape());
  for (std::int64_t i = 0; bitwise && i < before.size(); ++i) {
    bitwise = before.data()[static_cast<size_t>(i)] == after.data()[static_cast<size_t>(i)];
  }

  const bool pass = curves && bitwise;
  return {pass, std::string(curves ? "identical seeds give bit-identical loss curves"
                                   : "LOSS CURVES DIVERGED") +
                    "; " + (bitwise ? "restored checkpoint reproduces the forward bitwise"
                                    : "RESTORED FORWARD DIFFERS")};
}

}  // namespace

int main() {
  const auto t0 = std::chrono::steady_clock::now();
  run(1, "gradient suite vs central differences", gradient_suite);
  run(2, "parallel scan matches the sequential recurrence", scan_agreement);
  run(3, "channel partition arithmetic", partition_arithmetic);
  run(4, "loss identities and recall weighting", loss_identities);
  run(5, "derived plan structure", derived_plan_structure);
  run(6, "stage extent telescoping", extent_telescoping);
  run(7, "toy overfit under both gating modes", toy_overfit);
  run(8, "recall direction under beta", recall_direction);
  run(9, "determinism and checkpoint round trip", determinism_and_checkpoints);
  std::printf("%d/9 criteria passed in %.1f s\n", 9 - failures, seconds_since(t0));
  return failures == 0 ? 0 : 1;
}
