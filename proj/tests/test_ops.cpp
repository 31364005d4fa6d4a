#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "gmseg/fdcheck.hpp"
#include "gmseg/ops.hpp"

using namespace gmseg;

namespace {

// Analytic tape gradients vs central differences for a scalar built from
// `inputs`. `build` must be pure so it can rerun on perturbed tensors.
void check_fd(const std::vector<Tensor>& inputs,
              const std::function<Var(Tape&, const std::vector<Var>&)>& build, double rtol = 1e-4) {
  Tape t;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& x : inputs) vars.push_back(t.leaf(x, true));
  GradMap gm = t.backward(build(t, vars));

  ScalarFn fn = [&build](std::span<const Tensor> xs) {
    Tape ft(false);
    std::vector<Var> vs;
    vs.reserve(xs.size());
    for (const Tensor& x : xs) vs.push_back(ft.leaf(x, false));
    return ft.value(build(ft, vs)).value();
  };
  for (size_t i = 0; i < inputs.size(); ++i) {
    const Tensor fd = finite_difference_grad(fn, inputs, i);
    const Tensor* g = gm.find(vars[i]);
    REQUIRE(g != nullptr);
    const GradDelta d = compare_grads(*g, fd, rtol);
    INFO("input ", i, ": ", d.describe());
    CHECK(d.pass);
  }
}

}  // namespace

TEST_CASE("broadcast shape and gradient reduction") {
  CHECK(broadcast_shape({4, 1, 3}, {2, 1}) == Shape{4, 2, 3});
  CHECK(broadcast_shape({3}, {2, 3}) == Shape{2, 3});
  CHECK(broadcast_shape({}, {2}) == Shape{2});
  CHECK_THROWS_AS(broadcast_shape({2, 3}, {4}), std::invalid_argument);

  const Tensor g = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor r = reduce_to_shape(g, {3});
  CHECK(r.shape() == Shape{3});
  CHECK(r.data()[0] == 5.0);
  CHECK(r.data()[2] == 9.0);
  r = reduce_to_shape(g, {1, 3});
  CHECK(r.shape() == Shape{1, 3});
  CHECK(r.data()[1] == 7.0);
  CHECK(reduce_to_shape(g, {2, 3}).data()[5] == 6.0);
  CHECK(reduce_to_shape(g, {}).value() == 21.0);
}

TEST_CASE("elementwise arithmetic values") {
  Tape t;
  Var a = t.leaf(Tensor::from({2}, {1, 2}), false);
  Var b = t.leaf(Tensor::from({2}, {10, 20}), false);
  CHECK(t.value(add(t, a, b)).data()[1] == 22.0);
  CHECK(t.value(sub(t, a, b)).data()[0] == -9.0);
  CHECK(t.value(mul(t, a, b)).data()[1] == 40.0);
  CHECK(t.value(div(t, a, b)).data()[0] == doctest::Approx(0.1));
  CHECK(t.value(scale(t, a, 2.0, 1.0)).data()[1] == 5.0);
  CHECK(t.value(neg(t, a)).data()[0] == -1.0);

  // row broadcast
  Var m = t.leaf(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}), false);
  Var row = t.leaf(Tensor::from({3}, {10, 20, 30}), false);
  const Tensor s = t.value(add(t, m, row));
  CHECK(s.shape() == Shape{2, 3});
  CHECK(s.data()[0] == 11.0);
  CHECK(s.data()[5] == 36.0);
  // scalar broadcast
  CHECK(t.value(add(t, m, t.constant(Tensor::scalar(100)))).data()[3] == 104.0);
}

TEST_CASE("unary op values") {
  Tape t;
  auto one = [&t](Var v) { return t.value(v).value(); };
  auto at = [&t](double x) { return t.leaf(Tensor::scalar(x), false); };
  CHECK(one(exp_op(t, at(0))) == 1.0);
  CHECK(one(exp_op(t, at(1))) == doctest::Approx(std::exp(1.0)));
  CHECK(one(log_op(t, at(std::exp(1.0)))) == doctest::Approx(1.0));
  CHECK(one(sqrt_op(t, at(4))) == doctest::Approx(2.0));
  CHECK(one(sigmoid(t, at(0))) == 0.5);
  CHECK(one(silu(t, at(0))) == 0.0);
  CHECK(one(silu(t, at(1))) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
  CHECK(one(gelu(t, at(0))) == doctest::Approx(0.0));
  CHECK(one(gelu(t, at(10))) == doctest::Approx(10.0));
  CHECK(one(softplus(t, at(0))) == doctest::Approx(std::log(2.0)));
  CHECK(one(softplus(t, at(20))) == doctest::Approx(20.0).epsilon(1e-8));
  CHECK(one(leaky_relu(t, at(-2), 0.1)) == doctest::Approx(-0.2));
  CHECK(one(leaky_relu(t, at(3), 0.1)) == 3.0);
  CHECK(one(activation(t, at(-2), Act::leaky_relu, 0.1)) == doctest::Approx(-0.2));
  CHECK(one(activation(t, at(1), Act::silu)) == one(silu(t, at(1))));
  CHECK(one(activation(t, at(1), Act::gelu)) == one(gelu(t, at(1))));
  CHECK(one(activation(t, at(1), Act::sigmoid)) == one(sigmoid(t, at(1))));
}

TEST_CASE("softmax rows are distributions and shift-invariant") {
  Tape t;
  Var x = t.leaf(Tensor::from({2, 3}, {0, std::log(2.0), std::log(3.0), 5, 1, -2}), false);
  const Tensor p = t.value(softmax(t, x, 1));
  CHECK(p.data()[0] == doctest::Approx(1.0 / 6).epsilon(1e-12));
  CHECK(p.data()[1] == doctest::Approx(2.0 / 6).epsilon(1e-12));
  CHECK(p.data()[2] == doctest::Approx(3.0 / 6).epsilon(1e-12));
  for (int r = 0; r < 2; ++r) {
    double sum = 0.0;
    for (int c = 0; c < 3; ++c) sum += p.data()[r * 3 + c];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }

  Var shifted = add(t, x, t.constant(Tensor::scalar(100)));
  const Tensor ps = t.value(softmax(t, shifted, 1));
  for (std::int64_t i = 0; i < p.size(); ++i) {
    CHECK(std::abs(p.data()[i] - ps.data()[i]) <= 1e-12);
  }

  const Tensor lp = t.value(log_softmax(t, x, 1));
  for (std::int64_t i = 0; i < p.size(); ++i) {
    CHECK(lp.data()[i] == doctest::Approx(std::log(p.data()[i])).epsilon(1e-12));
  }

  // axis 0: columns are distributions
  const Tensor pc = t.value(softmax(t, x, 0));
  for (int c = 0; c < 3; ++c) {
    CHECK(pc.data()[c] + pc.data()[3 + c] == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(softmax(t, x, 2), std::invalid_argument);
}

TEST_CASE("reductions") {
  Tape t;
  Var x = t.leaf(Tensor::from({2, 2}, {1, 2, 3, 4}), false);
  CHECK(t.value(sum_all(t, x)).value() == 10.0);
  CHECK(t.value(mean_all(t, x)).value() == 2.5);

  Var v = t.leaf(Tensor::from({1, 2, 3}, {1, 2, 3, 4, 5, 6}), false);
  const Tensor sp = t.value(sum_spatial(t, v));
  CHECK(sp.shape() == Shape{1, 2});
  CHECK(sp.data()[0] == 6.0);
  CHECK(sp.data()[1] == 15.0);
  CHECK_THROWS_AS(sum_spatial(t, x), std::invalid_argument);
}

TEST_CASE("linear") {
  Tape t;
  Var x = t.leaf(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}), false);
  Var w = t.leaf(Tensor::from({3, 2}, {1, 0, 0, 1, 1, 1}), false);
  Var b = t.leaf(Tensor::from({2}, {10, 20}), false);
  const Tensor y = t.value(linear(t, x, w, b));
  CHECK(y.shape() == Shape{2, 2});
  CHECK(y.data()[0] == 14.0);
  CHECK(y.data()[1] == 25.0);
  CHECK(y.data()[2] == 20.0);
  CHECK(y.data()[3] == 31.0);
  CHECK(t.value(linear(t, x, w, std::nullopt)).data()[3] == 11.0);

  Var w_bad = t.leaf(Tensor::from({2, 2}, {1, 0, 0, 1}), false);
  CHECK_THROWS_AS(linear(t, x, w_bad, std::nullopt), std::invalid_argument);
  Var b_bad = t.leaf(Tensor::from({3}, {0, 0, 0}), false);
  CHECK_THROWS_AS(linear(t, x, w, b_bad), std::invalid_argument);
}

TEST_CASE("reshape and volume/sequence layout") {
  Tape t;
  Var x = t.leaf(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}), false);
  const Tensor r = t.value(reshape(t, x, {3, 2}));
  CHECK(r.shape() == Shape{3, 2});
  CHECK(r.data()[4] == 5.0);  // row-major order preserved
  CHECK_THROWS_AS(reshape(t, x, {4, 2}), std::invalid_argument);

  // [N=1,C=2,D=1,H=2,W=2]; channel planes {0..3} and {10..13}
  Var v = t.leaf(Tensor::from({1, 2, 1, 2, 2}, {0, 1, 2, 3, 10, 11, 12, 13}), false);
  Var tok = vol_to_seq(t, v);
  const Tensor tv = t.value(tok);
  CHECK(tv.shape() == Shape{1, 4, 2});
  const std::vector<double> want = {0, 10, 1, 11, 2, 12, 3, 13};
  for (size_t i = 0; i < want.size(); ++i) CHECK(tv.data()[i] == want[i]);

  const Tensor back = t.value(seq_to_vol(t, tok, 1, 2, 2));
  CHECK(back.shape() == Shape{1, 2, 1, 2, 2});
  for (std::int64_t i = 0; i < back.size(); ++i) CHECK(back.data()[i] == t.value(v).data()[i]);

  CHECK_THROWS_AS(vol_to_seq(t, x), std::invalid_argument);
  CHECK_THROWS_AS(seq_to_vol(t, tok, 2, 2, 2), std::invalid_argument);
}

TEST_CASE("concat and channel slice") {
  Tape t;
  Var a = t.leaf(Tensor::from({1, 2, 2}, {1, 2, 3, 4}), false);
  Var b = t.leaf(Tensor::from({1, 3, 2}, {5, 6, 7, 8, 9, 10}), false);
  Var cc = concat_channels(t, a, b);
  const Tensor c = t.value(cc);
  CHECK(c.shape() == Shape{1, 5, 2});
  CHECK(c.data()[0] == 1.0);
  CHECK(c.data()[4] == 5.0);
  CHECK(c.data()[9] == 10.0);

  const Tensor sa = t.value(slice_channels(t, cc, 0, 2));
  for (int i = 0; i < 4; ++i) CHECK(sa.data()[i] == t.value(a).data()[i]);
  const Tensor sb = t.value(slice_channels(t, cc, 2, 3));
  for (int i = 0; i < 6; ++i) CHECK(sb.data()[i] == t.value(b).data()[i]);

  Var bad_batch = t.leaf(Tensor::from({2, 2, 2}, {0, 0, 0, 0, 0, 0, 0, 0}), false);
  CHECK_THROWS_AS(concat_channels(t, a, bad_batch), std::invalid_argument);
  Var bad_sp = t.leaf(Tensor::from({1, 2, 3}, {0, 0, 0, 0, 0, 0}), false);
  CHECK_THROWS_AS(concat_channels(t, a, bad_sp), std::invalid_argument);
  CHECK_THROWS_AS(slice_channels(t, cc, 4, 2), std::invalid_argument);
  CHECK_THROWS_AS(slice_channels(t, cc, 0, 0), std::invalid_argument);
}

TEST_CASE("spatial slice extracts a box") {
  Tape t;
  std::vector<double> vals(24);
  for (size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<double>(i);
  Var x = t.leaf(Tensor::from({1, 1, 2, 3, 4}, std::move(vals)), false);
  const Tensor y = t.value(spatial_slice(t, x, Box{1, 2, 0, 2, 1, 3}));
  CHECK(y.shape() == Shape{1, 1, 1, 2, 2});
  CHECK(y.data()[0] == 13.0);
  CHECK(y.data()[1] == 14.0);
  CHECK(y.data()[2] == 17.0);
  CHECK(y.data()[3] == 18.0);
  CHECK_THROWS_AS(spatial_slice(t, x, Box{0, 3, 0, 1, 0, 1}), std::invalid_argument);
  CHECK_THROWS_AS(spatial_slice(t, x, Box{1, 1, 0, 1, 0, 1}), std::invalid_argument);
  CHECK(Box{0, 2, 0, 3, 1, 4}.voxels() == 18);
}

TEST_CASE("gather_class, one_hot, label downsampling") {
  Tape t;
  Var x = t.leaf(Tensor::from({1, 2, 3}, {1, 2, 3, 4, 5, 6}), false);
  ByteVolume lab;
  lab.shape = {1, 3};
  lab.data = {0, 1, 0};
  const Tensor g = t.value(gather_class(t, x, lab));
  CHECK(g.shape() == Shape{1, 3});
  CHECK(g.data()[0] == 1.0);
  CHECK(g.data()[1] == 5.0);
  CHECK(g.data()[2] == 3.0);
  ByteVolume bad = lab;
  bad.data[1] = 2;
  CHECK_THROWS_AS(gather_class(t, x, bad), std::invalid_argument);
  bad.shape = {1, 2};
  bad.data = {0, 1};
  CHECK_THROWS_AS(gather_class(t, x, bad), std::invalid_argument);

  ByteVolume lv;
  lv.shape = {1, 2, 2};
  lv.data = {0, 1, 2, 1};
  const Tensor oh = one_hot(lv, 3);
  CHECK(oh.shape() == Shape{1, 3, 2, 2});
  CHECK(oh.at(std::array{0, 0, 0, 0}) == 1.0);
  CHECK(oh.at(std::array{0, 1, 0, 1}) == 1.0);
  CHECK(oh.at(std::array{0, 2, 1, 0}) == 1.0);
  CHECK(oh.at(std::array{0, 1, 1, 1}) == 1.0);
  double total = 0.0;
  for (double v : oh.data()) total += v;
  CHECK(total == 4.0);  // exactly one hot per voxel
  CHECK_THROWS_AS(one_hot(lv, 2), std::invalid_argument);

  ByteVolume line;
  line.shape = {4};
  line.data = {5, 6, 7, 8};
  ByteVolume half = downsample_labels_nn(line, {2});
  CHECK(half.data == std::vector<std::uint8_t>{5, 7});
  ByteVolume same = downsample_labels_nn(line, {4});
  CHECK(same.data == line.data);
  CHECK_THROWS_AS(downsample_labels_nn(line, {2, 2}), std::invalid_argument);

  ByteVolume grid;
  grid.shape = {1, 2, 4};
  grid.data = {0, 1, 2, 3, 4, 5, 6, 7};
  ByteVolume ds = downsample_labels_nn(grid, {1, 1, 2});
  CHECK(ds.data == std::vector<std::uint8_t>{0, 2});
}

TEST_CASE("gradients match finite differences") {
  Rng rng(42);
  const Tensor x23 = rng.uniform_tensor({2, 3}, -1.0, 1.0);
  const Tensor y3 = rng.uniform_tensor({3}, 0.5, 1.5);
  const Tensor pos = rng.uniform_tensor({4}, 0.5, 2.0);

  SUBCASE("mul with broadcast") {
    check_fd({x23, y3},
             [](Tape& t, const std::vector<Var>& v) { return sum_all(t, mul(t, v[0], v[1])); });
  }
  SUBCASE("div") {
    check_fd({pos, rng.uniform_tensor({4}, 1.0, 2.0)},
             [](Tape& t, const std::vector<Var>& v) { return sum_all(t, div(t, v[0], v[1])); });
  }
  SUBCASE("exp log sqrt chain") {
    check_fd({pos}, [](Tape& t, const std::vector<Var>& v) {
      return sum_all(t, log_op(t, sqrt_op(t, exp_op(t, v[0]))));
    });
  }
  SUBCASE("activations") {
    // keep leaky_relu probes away from the kink at 0
    const Tensor far = Tensor::from({4}, {-2.0, -0.7, 0.9, 1.8});
    for (Act kind : {Act::silu, Act::gelu, Act::sigmoid, Act::leaky_relu}) {
      check_fd({far}, [kind](Tape& t, const std::vector<Var>& v) {
        return sum_all(t, activation(t, v[0], kind, 0.1));
      });
    }
    check_fd({far},
             [](Tape& t, const std::vector<Var>& v) { return sum_all(t, softplus(t, v[0])); });
  }
  SUBCASE("softmax and log_softmax") {
    const Tensor c = rng.uniform_tensor({2, 3}, 0.0, 1.0);
    check_fd({x23}, [c](Tape& t, const std::vector<Var>& v) {
      return sum_all(t, mul(t, softmax(t, v[0], 1), t.constant(c)));
    });
    check_fd({x23}, [c](Tape& t, const std::vector<Var>& v) {
      return sum_all(t, mul(t, log_softmax(t, v[0], 1), t.constant(c)));
    });
  }
  SUBCASE("linear") {
    const Tensor w = rng.uniform_tensor({3, 2}, -1.0, 1.0);
    const Tensor b = rng.uniform_tensor({2}, -1.0, 1.0);
    check_fd({x23, w, b}, [](Tape& t, const std::vector<Var>& v) {
      return sum_all(t, linear(t, v[0], v[1], v[2]));
    });
  }
  SUBCASE("sum_spatial and mean") {
    const Tensor v5 = rng.uniform_tensor({1, 2, 2, 2, 2}, -1.0, 1.0);
    const Tensor c = rng.uniform_tensor({1, 2}, 0.0, 1.0);
    check_fd({v5}, [c](Tape& t, const std::vector<Var>& v) {
      return mean_all(t, mul(t, sum_spatial(t, v[0]), t.constant(c)));
    });
  }
  SUBCASE("spatial_slice") {
    const Tensor v5 = rng.uniform_tensor({1, 2, 2, 3, 3}, -1.0, 1.0);
    check_fd({v5}, [](Tape& t, const std::vector<Var>& v) {
      return sum_all(t, spatial_slice(t, v[0], Box{0, 1, 1, 3, 0, 2}));
    });
  }
  SUBCASE("gather_class") {
    ByteVolume lab;
    lab.shape = {1, 4};
    lab.data = {0, 2, 1, 2};
    const Tensor x = rng.uniform_tensor({1, 3, 4}, -1.0, 1.0);
    check_fd({x}, [lab](Tape& t, const std::vector<Var>& v) {
      return sum_all(t, gather_class(t, v[0], lab));
    });
  }
  SUBCASE("concat, slice, sequence reshaping") {
    const Tensor a = rng.uniform_tensor({1, 2, 2}, -1.0, 1.0);
    const Tensor b = rng.uniform_tensor({1, 3, 2}, -1.0, 1.0);
    check_fd({a, b}, [](Tape& t, const std::vector<Var>& v) {
      Var cc = concat_channels(t, v[0], v[1]);
      return sum_all(t, mul(t, slice_channels(t, cc, 1, 3), slice_channels(t, cc, 2, 3)));
    });
    const Tensor v5 = rng.uniform_tensor({1, 2, 1, 2, 2}, -1.0, 1.0);
    const Tensor c = rng.uniform_tensor({1, 4, 2}, 0.0, 1.0);
    check_fd({v5}, [c](Tape& t, const std::vector<Var>& v) {
      Var tok = mul(t, vol_to_seq(t, v[0]), t.constant(c));
      return sum_all(t, seq_to_vol(t, tok, 1, 2, 2));
    });
  }
  SUBCASE("scale and neg") {
    check_fd({x23}, [](Tape& t, const std::vector<Var>& v) {
      return sum_all(t, neg(t, scale(t, v[0], 3.0, -1.0)));
    });
  }
}
