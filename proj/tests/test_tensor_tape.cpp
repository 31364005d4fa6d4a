#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <limits>
#include <stdexcept>

#include "doctest.h"
#include "gmseg/tape.hpp"
#include "gmseg/tensor.hpp"

using namespace gmseg;

TEST_CASE("shape helpers") {
  CHECK(shape_numel({2, 3, 4}) == 24);
  CHECK(shape_numel({}) == 1);  // rank-0 scalar
  CHECK(shapes_equal({2, 3}, {2, 3}));
  CHECK_FALSE(shapes_equal({2, 3}, {3, 2}));
  CHECK(shape_str({1, 2, 3}) == "[1,2,3]");
}

TEST_CASE("tensor construction and validation") {
  Tensor t = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(t.rank() == 2);
  CHECK(t.extent(1) == 2);
  CHECK(t.size() == 4);
  CHECK(t.at(std::array{1, 0}) == 3.0);

  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::from({0, 2}, {}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::from({1}, {std::nan("")}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::from({1}, {std::numeric_limits<double>::infinity()}),
                  std::invalid_argument);

  CHECK(Tensor::zeros({3}).data()[2] == 0.0);
  CHECK(Tensor::full({2}, 7.0).data()[1] == 7.0);
  CHECK(Tensor::scalar(5.0).value() == 5.0);
  CHECK_THROWS_AS(Tensor::from({2}, {1, 2}).value(), std::invalid_argument);
  CHECK_THROWS_AS(t.at(std::array{2, 0}), std::out_of_range);
}

TEST_CASE("tensor copies share the buffer; mutable_data copies on write") {
  Tensor a = Tensor::from({3}, {1, 2, 3});
  Tensor b = a;                   // same buffer
  Tensor r = a.reshaped({3, 1});  // same buffer, new extents
  CHECK(r.data().data() == a.data().data());

  b.mutable_data()[0] = 42.0;  // detaches b
  CHECK(a.data()[0] == 1.0);
  CHECK(b.data()[0] == 42.0);
  CHECK(r.data()[0] == 1.0);

  CHECK_THROWS_AS(a.reshaped({2, 2}), std::invalid_argument);
}

TEST_CASE("rng determinism and bounds") {
  Rng r1(99), r2(99);
  for (int i = 0; i < 100; ++i) {
    CHECK(r1.uniform(-1, 1) == r2.uniform(-1, 1));
    const int v = r1.uniform_int(3, 5);
    (void)r2.uniform_int(3, 5);
    CHECK(v >= 3);
    CHECK(v <= 5);
  }
  CHECK(Rng(7).normal_tensor({4, 5}, 0.0, 1.0).size() == 20);
  // inclusive upper bound is reachable
  Rng r3(1);
  bool saw_hi = false;
  for (int i = 0; i < 200 && !saw_hi; ++i) saw_hi = r3.uniform_int(0, 2) == 2;
  CHECK(saw_hi);
}

TEST_CASE("tape records, differentiates, and accumulates fan-out") {
  Tape t;
  Var x = t.leaf(Tensor::from({2}, {3, 4}), true);
  Var c = t.constant(Tensor::from({2}, {10, 20}));
  CHECK(t.requires_grad(x));
  CHECK_FALSE(t.requires_grad(c));

  // y = x * c elementwise; the rule accumulates the x-gradient twice to
  // exercise fan-in addition. loss = y0 + y1.
  Var y = t.record(Tensor::raw({2}, {3.0 * 10, 4.0 * 20}), {x, c}, [&t, x, c] {
    const Tensor cv = t.value(c);
    return [cv, x, c](const Tensor& g, GradSink& sink) {
      CHECK(sink.needs(x));
      CHECK_FALSE(sink.needs(c));
      const Tensor gx =
          Tensor::raw({2}, {g.data()[0] * cv.data()[0], g.data()[1] * cv.data()[1]});
      sink.accum(x, gx);
      sink.accum(x, gx);
    };
  });
  Var loss = t.record(Tensor::scalar(t.value(y).data()[0] + t.value(y).data()[1]), {y}, [y] {
    return [y](const Tensor& g, GradSink& sink) {
      sink.accum(y, Tensor::from({2}, {g.value(), g.value()}));
    };
  });

  GradMap gm = t.backward(loss);
  const Tensor* gx = gm.find(x);
  REQUIRE(gx != nullptr);
  CHECK(gx->data()[0] == 20.0);  // 2 * c0
  CHECK(gx->data()[1] == 40.0);  // 2 * c1
  CHECK(gm.find(c) == nullptr);
  CHECK_THROWS_AS(gm.at(c), std::out_of_range);

  // a consumed tape rejects further use
  CHECK_THROWS_AS(t.backward(loss), std::logic_error);
  CHECK_THROWS_AS(t.leaf(Tensor::scalar(1.0), true), std::logic_error);
}

TEST_CASE("backward factory is skipped when no input needs gradients") {
  Tape t;
  Var c = t.constant(Tensor::from({2}, {1, 2}));
  bool factory_ran = false;
  (void)t.record(Tensor::scalar(3.0), {c}, [&factory_ran] {
    factory_ran = true;
    return [](const Tensor&, GradSink&) {};
  });
  CHECK_FALSE(factory_ran);
}

TEST_CASE("no-grad tape downgrades leaves and skips rules") {
  Tape t(false);
  CHECK_FALSE(t.grad_enabled());
  Var x = t.leaf(Tensor::from({2}, {1, 2}), true);
  CHECK_FALSE(t.requires_grad(x));
  bool factory_ran = false;
  Var y = t.record(Tensor::scalar(3.0), {x}, [&factory_ran] {
    factory_ran = true;
    return [](const Tensor&, GradSink&) {};
  });
  CHECK_FALSE(factory_ran);
  GradMap gm = t.backward(y);
  CHECK(gm.find(x) == nullptr);
}

TEST_CASE("tape contract errors") {
  Tape t;
  Var x = t.leaf(Tensor::from({2}, {1, 2}), true);
  CHECK_THROWS_AS(t.backward(x), std::invalid_argument);  // non-scalar loss

  // foreign vars are caught by id range (ids are per-tape indices)
  Tape other;
  (void)other.leaf(Tensor::scalar(1.0), true);
  Var ox = other.leaf(Tensor::scalar(2.0), true);
  CHECK_THROWS_AS(t.value(ox), std::logic_error);
  CHECK_THROWS_AS(t.value(Var{}), std::logic_error);
  CHECK_THROWS_AS(
      t.record(Tensor::scalar(0.0), {ox}, [] { return [](const Tensor&, GradSink&) {}; }),
      std::logic_error);
  CHECK_FALSE(Var{}.valid());
}
