#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "gmseg/net.hpp"
#include "support/oracles.hpp"

using namespace gmseg;

namespace {

NetworkPlan micro_plan() {
  NetworkPlan p;
  p.stages = 3;
  p.blocks = {BlockKind::hgcn, BlockKind::mamba, BlockKind::mamba};
  p.orders = {2};
  p.channels = {2, 4, 6};
  p.strides = {{1, 1, 1}, {2, 2, 2}, {2, 2, 2}};
  p.patch = {8, 8, 8};
  p.batch = 1;
  p.deep_supervision = true;
  p.activation = Act::leaky_relu;
  p.gating = Gating::additive;
  p.gate_scale = 0.0;
  return p;
}

}  // namespace

TEST_CASE("plan validation") {
  NetworkPlan p = micro_plan();
  CHECK_NOTHROW(p.validate());

  NetworkPlan bad = p;
  bad.stages = 1;
  bad.blocks = {BlockKind::hgcn};
  bad.channels = {2};
  bad.strides = {{1, 1, 1}};
  bad.orders = {2};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = p;
  bad.channels.pop_back();
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = p;
  bad.orders = {2, 3};  // only one hgcn stage
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = p;
  bad.orders = {7};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = p;
  bad.channels[1] = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = p;
  bad.strides[0] = {1, 2, 1};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = p;
  bad.strides[2] = {3, 1, 1};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = p;
  bad.patch = {8, 8, 10};  // not divisible by cumulative stride 4
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = p;
  bad.batch = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("plan serialization round-trips byte for byte") {
  for (const char* name : {"toy", "pcd", "abd"}) {
    const NetworkPlan p = preset_plan(name);
    const std::string s = p.serialize();
    const NetworkPlan q = NetworkPlan::parse_text(s);
    CHECK(q.serialize() == s);
  }

  NetworkPlan p = micro_plan();
  p.gate_scale = 0.25;
  p.gating = Gating::multiplicative;
  p.deep_supervision = false;
  p.activation = Act::silu;
  const std::string s = p.serialize();
  const NetworkPlan q = NetworkPlan::parse_text(s);
  CHECK(q.gate_scale == 0.25);
  CHECK(q.gating == Gating::multiplicative);
  CHECK_FALSE(q.deep_supervision);
  CHECK(q.activation == Act::silu);
  CHECK(q.serialize() == s);

  // config form carries the same information
  const NetworkPlan r = NetworkPlan::from_config(p.to_config());
  CHECK(r.serialize() == s);

  CHECK_THROWS_AS(NetworkPlan::parse_text("stages = banana\n"), std::exception);
}

TEST_CASE("presets") {
  for (const char* name : {"pcd", "lungt", "livert", "abd", "brats", "toy"}) {
    CHECK_NOTHROW(preset_plan(name).validate());
  }
  CHECK_THROWS_AS(preset_plan("nope"), std::invalid_argument);

  const NetworkPlan toy = preset_plan("toy");
  CHECK(toy.stages == 4);
  CHECK(toy.blocks == std::vector<BlockKind>{BlockKind::hgcn, BlockKind::hgcn, BlockKind::mamba,
                                             BlockKind::mamba});
  CHECK(toy.orders == std::vector<int>{2, 3});
  CHECK(toy.channels == std::vector<int>{8, 16, 32, 64});
  CHECK(toy.strides[0] == std::array<int, 3>{1, 1, 1});
  CHECK(toy.strides[1] == std::array<int, 3>{2, 2, 2});
  CHECK(toy.patch == std::array<int, 3>{24, 24, 24});
  CHECK(toy.batch == 1);

  const NetworkPlan pcd = preset_plan("pcd");
  CHECK(pcd.stages == 6);
  CHECK(pcd.channels == std::vector<int>{32, 64, 128, 256, 320, 320});
  CHECK(pcd.orders == std::vector<int>{2, 3, 4});
  CHECK(pcd.patch == std::array<int, 3>{80, 192, 160});
  CHECK(pcd.batch == 2);
  // depth stops halving after 4 steps, the in-plane axes go all 5
  CHECK(pcd.strides[4] == std::array<int, 3>{2, 2, 2});
  CHECK(pcd.strides[5] == std::array<int, 3>{1, 2, 2});
  for (int i = 0; i < 3; ++i) CHECK(pcd.blocks[static_cast<size_t>(i)] == BlockKind::hgcn);
  for (int i = 3; i < 6; ++i) CHECK(pcd.blocks[static_cast<size_t>(i)] == BlockKind::mamba);
}

TEST_CASE("stage extents telescope through the strides") {
  const NetworkPlan toy = preset_plan("toy");
  CHECK(toy.stage_extents(0) == std::array<int, 3>{24, 24, 24});
  CHECK(toy.stage_extents(1) == std::array<int, 3>{12, 12, 12});
  CHECK(toy.stage_extents(2) == std::array<int, 3>{6, 6, 6});
  CHECK(toy.stage_extents(3) == std::array<int, 3>{3, 3, 3});

  const NetworkPlan abd = preset_plan("abd");
  CHECK(abd.patch == std::array<int, 3>{40, 224, 192});
  CHECK(abd.stage_extents(3) == std::array<int, 3>{5, 28, 24});
  CHECK(abd.stage_extents(5) == std::array<int, 3>{5, 7, 6});
}

TEST_CASE("derive_plan picks geometry from the data fingerprint") {
  Fingerprint fp;
  fp.median_shape = {48, 48, 48};
  fp.class_count = 3;
  const NetworkPlan p = derive_plan(fp);
  CHECK_NOTHROW(p.validate());
  CHECK(p.stages == 4);
  CHECK(p.blocks == std::vector<BlockKind>{BlockKind::hgcn, BlockKind::hgcn, BlockKind::mamba,
                                           BlockKind::mamba});
  CHECK(p.orders == std::vector<int>{2, 3});
  CHECK(p.channels == std::vector<int>{32, 64, 128, 256});
  CHECK(p.patch == std::array<int, 3>{48, 48, 48});
  CHECK(p.batch == 2);
  for (int i = 1; i < 4; ++i) CHECK(p.strides[static_cast<size_t>(i)] == std::array<int, 3>{2, 2, 2});

  // channel ladder saturates at 320
  Fingerprint big;
  big.median_shape = {256, 256, 256};
  const NetworkPlan q = derive_plan(big);
  CHECK(q.stages == 6);
  CHECK(q.channels == std::vector<int>{32, 64, 128, 256, 320, 320});

  // anisotropic: a 16-voxel axis halves twice and then stops
  Fingerprint thin;
  thin.median_shape = {16, 128, 128};
  const NetworkPlan r = derive_plan(thin);
  CHECK(r.strides[1] == std::array<int, 3>{2, 2, 2});
  CHECK(r.strides[2] == std::array<int, 3>{2, 2, 2});
  CHECK(r.strides[3] == std::array<int, 3>{1, 2, 2});

  Fingerprint flat;
  flat.median_shape = {4, 6, 7};
  CHECK_THROWS_AS(derive_plan(flat), std::invalid_argument);
  Fingerprint zero;
  zero.median_shape = {0, 10, 10};
  CHECK_THROWS_AS(derive_plan(zero), std::invalid_argument);
}

TEST_CASE("derive_plan shrinks the patch under a memory budget") {
  Fingerprint fp;
  fp.median_shape = {48, 48, 48};
  fp.memory_budget_gb = 0.41;  // ~100k voxels at 4096 B each: one shrink step fits
  const NetworkPlan p = derive_plan(fp);
  CHECK_NOTHROW(p.validate());
  CHECK(p.patch == std::array<int, 3>{40, 48, 48});
  const double vox = static_cast<double>(p.patch[0]) * p.patch[1] * p.patch[2];
  CHECK(vox <= fp.memory_budget_gb * 1e9 / 4096.0);
  // an unreachable budget bottoms out at 4 granules per axis
  fp.memory_budget_gb = 0.001;
  CHECK(derive_plan(fp).patch == std::array<int, 3>{32, 32, 32});
  // unconstrained plan keeps the full patch
  fp.memory_budget_gb = 0.0;
  CHECK(derive_plan(fp).patch == std::array<int, 3>{48, 48, 48});
}

TEST_CASE("supervision weights halve per scale and sum to one") {
  const std::vector<double> w = supervision_weights(4);
  REQUIRE(w.size() == 4);
  CHECK(w[0] == doctest::Approx(8.0 / 15).epsilon(1e-12));
  CHECK(w[1] == doctest::Approx(4.0 / 15).epsilon(1e-12));
  CHECK(w[2] == doctest::Approx(2.0 / 15).epsilon(1e-12));
  CHECK(w[3] == doctest::Approx(1.0 / 15).epsilon(1e-12));
  CHECK(supervision_weights(1) == std::vector<double>{1.0});
}

TEST_CASE("build produces a runnable network with per-scale heads") {
  const NetworkPlan plan = micro_plan();
  auto net = build(plan, 1, 3, 5);
  REQUIRE(net != nullptr);
  CHECK(net->enc.size() == 3);
  CHECK(net->dec.size() == 2);
  CHECK(net->scale_count() == 2);
  CHECK(net->params.trainable_count() > 0);

  Tape t;
  Ctx cx(t);
  cx.training = true;
  const Tensor x = Rng(77).uniform_tensor({1, 1, 8, 8, 8}, -1.0, 1.0);
  const std::vector<Var> logits = net->forward(cx, t.constant(x));
  REQUIRE(logits.size() == 2);
  CHECK(t.value(logits[0]).shape() == Shape{1, 3, 8, 8, 8});
  CHECK(t.value(logits[1]).shape() == Shape{1, 3, 4, 4, 4});
  const auto e1 = net->scale_extents(1);
  CHECK(e1 == std::array<int, 3>{4, 4, 4});

  // without deep supervision only the full-resolution head runs
  NetworkPlan shallow = plan;
  shallow.deep_supervision = false;
  auto net2 = build(shallow, 1, 3, 5);
  Tape t2;
  Ctx cx2(t2);
  cx2.training = true;
  const std::vector<Var> lg2 = net2->forward(cx2, t2.constant(x));
  REQUIRE(lg2.size() == 1);
  CHECK(t2.value(lg2[0]).shape() == Shape{1, 3, 8, 8, 8});  // full resolution only

  CHECK_THROWS_AS(build(plan, 0, 3, 5), std::invalid_argument);
  CHECK_THROWS_AS(build(plan, 1, 1, 5), std::invalid_argument);
}

TEST_CASE("network rejects inputs that do not match the plan") {
  auto net = build(micro_plan(), 2, 2, 9);
  Tape t;
  Ctx cx(t);
  cx.training = true;
  Rng rng(1);
  CHECK_THROWS_AS(net->forward(cx, t.constant(rng.uniform_tensor({1, 1, 8, 8, 8}, -1, 1))),
                  std::invalid_argument);
  CHECK_THROWS_AS(net->forward(cx, t.constant(rng.uniform_tensor({1, 2, 6, 8, 8}, -1, 1))),
                  std::invalid_argument);
  CHECK_THROWS_AS(net->forward(cx, t.constant(rng.uniform_tensor({2, 8, 8, 8}, -1, 1))),
                  std::invalid_argument);
}

TEST_CASE("builds are deterministic in the seed") {
  auto n1 = build(micro_plan(), 1, 2, 1234);
  auto n2 = build(micro_plan(), 1, 2, 1234);
  auto n3 = build(micro_plan(), 1, 2, 4321);
  REQUIRE(n1->params.items().size() == n2->params.items().size());
  bool any_diff_seed_differs = false;
  for (size_t i = 0; i < n1->params.items().size(); ++i) {
    const Param& a = *n1->params.items()[i];
    const Param& b = *n2->params.items()[i];
    const Param& c = *n3->params.items()[i];
    REQUIRE(a.name == b.name);
    CHECK(oracle::max_abs_diff(a.value, b.value) == 0.0);
    if (oracle::max_abs_diff(a.value, c.value) != 0.0) any_diff_seed_differs = true;
  }
  CHECK(any_diff_seed_differs);

  const Tensor x = Rng(3).uniform_tensor({1, 1, 8, 8, 8}, -1.0, 1.0);
  auto run = [&x](Network& net) {
    Tape t;
    Ctx cx(t);
    cx.training = true;
    return t.value(net.forward(cx, t.constant(x))[0]);
  };
  CHECK(oracle::max_abs_diff(run(*n1), run(*n2)) == 0.0);
}

TEST_CASE("every trainable parameter receives a gradient under deep supervision") {
  auto net = build(micro_plan(), 1, 2, 42);
  Tape t;
  Ctx cx(t);
  cx.training = true;
  const Tensor x = Rng(11).uniform_tensor({1, 1, 8, 8, 8}, -1.0, 1.0);
  const std::vector<Var> logits = net->forward(cx, t.constant(x));
  Var loss = mean_all(t, logits[0]);
  for (size_t l = 1; l < logits.size(); ++l) loss = add(t, loss, mean_all(t, logits[l]));
  GradMap gm = t.backward(loss);
  int missing = 0;
  for (const auto& p : net->params.items()) {
    if (!p->trainable) continue;
    const Var bound = cx.bound(p.get());
    if (!bound.valid() || gm.find(bound) == nullptr) {
      ++missing;
      MESSAGE("no gradient for ", p->name);
    }
  }
  CHECK(missing == 0);
}
