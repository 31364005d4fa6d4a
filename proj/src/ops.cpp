#include "gmseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace gmseg {

namespace {

constexpr std::int64_t kParallelCutoff = 16384;

template <class F>
Tensor unary_apply(const Tensor& x, F f) {
  const std::int64_t n = x.size();
  std::vector<double> out(static_cast<size_t>(n));
  auto src = x.data();
#pragma omp parallel for if (n > kParallelCutoff) schedule(static)
  for (std::int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = f(src[static_cast<size_t>(i)]);
  return Tensor::raw(x.shape(), std::move(out));
}

// strides of `shape` seen through `out` (0 on broadcast axes)
std::vector<std::int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
  std::vector<std::int64_t> strides(out.size(), 0);
  std::int64_t s = 1;
  int off = static_cast<int>(out.size()) - static_cast<int>(shape.size());
  for (int a = static_cast<int>(shape.size()) - 1; a >= 0; --a) {
    if (shape[static_cast<size_t>(a)] != 1) strides[static_cast<size_t>(a + off)] = s;
    s *= shape[static_cast<size_t>(a)];
  }
  return strides;
}

template <class F>
Tensor bin_apply(const Tensor& a, const Tensor& b, F f) {
  if (shapes_equal(a.shape(), b.shape())) {
    const std::int64_t n = a.size();
    std::vector<double> out(static_cast<size_t>(n));
    auto pa = a.data();
    auto pb = b.data();
#pragma omp parallel for if (n > kParallelCutoff) schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
      out[static_cast<size_t>(i)] = f(pa[static_cast<size_t>(i)], pb[static_cast<size_t>(i)]);
    }
    return Tensor::raw(a.shape(), std::move(out));
  }
  Shape os = broadcast_shape(a.shape(), b.shape());
  auto astr = broadcast_strides(a.shape(), os);
  auto bstr = broadcast_strides(b.shape(), os);
  const std::int64_t n = shape_numel(os);
  std::vector<double> out(static_cast<size_t>(n));
  auto pa = a.data();
  auto pb = b.data();
  const int rank = static_cast<int>(os.size());
  std::vector<int> idx(os.size(), 0);
  std::int64_t ai = 0, bi = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    out[static_cast<size_t>(i)] = f(pa[static_cast<size_t>(ai)], pb[static_cast<size_t>(bi)]);
    for (int a2 = rank - 1; a2 >= 0; --a2) {
      auto ua = static_cast<size_t>(a2);
      ++idx[ua];
      ai += astr[ua];
      bi += bstr[ua];
      if (idx[ua] < os[ua]) break;
      idx[ua] = 0;
      ai -= astr[ua] * os[ua];
      bi -= bstr[ua] * os[ua];
    }
  }
  return Tensor::raw(std::move(os), std::move(out));
}

void axis_split(const Shape& s, int axis, std::int64_t* outer, std::int64_t* m,
                std::int64_t* inner) {
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw std::invalid_argument("ops: axis " + std::to_string(axis) + " out of range for " +
                                shape_str(s));
  }
  *outer = 1;
  *inner = 1;
  for (int a = 0; a < axis; ++a) *outer *= s[static_cast<size_t>(a)];
  *m = s[static_cast<size_t>(axis)];
  for (size_t a = static_cast<size_t>(axis) + 1; a < s.size(); ++a) *inner *= s[a];
}

double sum_block_reduce(std::span<const double> v) {
  constexpr std::int64_t kBlock = 4096;
  const auto n = static_cast<std::int64_t>(v.size());
  const std::int64_t nb = (n + kBlock - 1) / kBlock;
  std::vector<double> partial(static_cast<size_t>(nb));
#pragma omp parallel for if (nb > 4) schedule(static)
  for (std::int64_t b = 0; b < nb; ++b) {
    double s = 0.0;
    const std::int64_t hi = std::min(n, (b + 1) * kBlock);
    for (std::int64_t i = b * kBlock; i < hi; ++i) s += v[static_cast<size_t>(i)];
    partial[static_cast<size_t>(b)] = s;
  }
  double total = 0.0;
  for (double p : partial) total += p;
  return total;
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

}  // namespace

Tensor ew_mul(const Tensor& a, const Tensor& b) {
  return bin_apply(a, b, [](double x, double y) { return x * y; });
}

Tensor ew_add(const Tensor& a, const Tensor& b) {
  return bin_apply(a, b, [](double x, double y) { return x + y; });
}

Tensor ew_scale(const Tensor& x, double k, double c) {
  return unary_apply(x, [k, c](double v) { return k * v + c; });
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const int rank = std::max(static_cast<int>(a.size()), static_cast<int>(b.size()));
  Shape out(static_cast<size_t>(rank));
  for (int i = 0; i < rank; ++i) {
    int ea = i < static_cast<int>(a.size()) ? a[a.size() - 1 - static_cast<size_t>(i)] : 1;
    int eb = i < static_cast<int>(b.size()) ? b[b.size() - 1 - static_cast<size_t>(i)] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw std::invalid_argument("ops: shapes " + shape_str(a) + " and " + shape_str(b) +
                                  " do not broadcast");
    }
    out[static_cast<size_t>(rank - 1 - i)] = std::max(ea, eb);
  }
  return out;
}

Tensor reduce_to_shape(const Tensor& g, const Shape& target) {
  if (shapes_equal(g.shape(), target)) return g;
  Tensor out = Tensor::zeros(target);
  double* dst = out.mutable_data();
  auto src = g.data();
  const Shape& gs = g.shape();
  auto tstr = broadcast_strides(target, gs);
  const int rank = static_cast<int>(gs.size());
  std::vector<int> idx(gs.size(), 0);
  std::int64_t ti = 0;
  const std::int64_t n = g.size();
  for (std::int64_t i = 0; i < n; ++i) {
    dst[ti] += src[static_cast<size_t>(i)];
    for (int a = rank - 1; a >= 0; --a) {
      auto ua = static_cast<size_t>(a);
      ++idx[ua];
      ti += tstr[ua];
      if (idx[ua] < gs[ua]) break;
      idx[ua] = 0;
      ti -= tstr[ua] * gs[ua];
    }
  }
  return out;
}

namespace {

Var record_binary(Tape& t, Var a, Var b, const Tensor& out,
                  const std::function<void(const Tensor&, GradSink&, Var, Var)>& bw) {
  return t.record(out, {a, b}, [&]() -> BackwardFn {
    return [a, b, bw](const Tensor& g, GradSink& s) { bw(g, s, a, b); };
  });
}

}  // namespace

Var add(Tape& t, Var a, Var b) {
  Tensor out = bin_apply(t.value(a), t.value(b), [](double x, double y) { return x + y; });
  Shape as = t.value(a).shape(), bs = t.value(b).shape();
  return record_binary(t, a, b, out, [as, bs](const Tensor& g, GradSink& s, Var va, Var vb) {
    if (s.needs(va)) s.accum(va, reduce_to_shape(g, as));
    if (s.needs(vb)) s.accum(vb, reduce_to_shape(g, bs));
  });
}

Var sub(Tape& t, Var a, Var b) {
  Tensor out = bin_apply(t.value(a), t.value(b), [](double x, double y) { return x - y; });
  Shape as = t.value(a).shape(), bs = t.value(b).shape();
  return record_binary(t, a, b, out, [as, bs](const Tensor& g, GradSink& s, Var va, Var vb) {
    if (s.needs(va)) s.accum(va, reduce_to_shape(g, as));
    if (s.needs(vb)) s.accum(vb, reduce_to_shape(ew_scale(g, -1.0, 0.0), bs));
  });
}

Var mul(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  Tensor out = bin_apply(av, bv, [](double x, double y) { return x * y; });
  return record_binary(t, a, b, out, [av, bv](const Tensor& g, GradSink& s, Var va, Var vb) {
    if (s.needs(va)) s.accum(va, reduce_to_shape(ew_mul(g, bv), av.shape()));
    if (s.needs(vb)) s.accum(vb, reduce_to_shape(ew_mul(g, av), bv.shape()));
  });
}

Var div(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  Tensor out = bin_apply(av, bv, [](double x, double y) { return x / y; });
  return record_binary(t, a, b, out, [av, bv](const Tensor& g, GradSink& s, Var va, Var vb) {
    if (s.needs(va)) {
      s.accum(va, reduce_to_shape(bin_apply(g, bv, [](double x, double y) { return x / y; }),
                                  av.shape()));
    }
    if (s.needs(vb)) {
      Tensor ga = ew_mul(g, av);  // broadcast to out shape
      Tensor gb = bin_apply(ga, bv, [](double x, double y) { return -x / (y * y); });
      s.accum(vb, reduce_to_shape(gb, bv.shape()));
    }
  });
}

Var scale(Tape& t, Var x, double k, double b) {
  Tensor out = ew_scale(t.value(x), k, b);
  return t.record(out, {x}, [&t, x, k]() -> BackwardFn {
    return [x, k](const Tensor& g, GradSink& s) { s.accum(x, ew_scale(g, k, 0.0)); };
  });
}

Var neg(Tape& t, Var x) { return scale(t, x, -1.0); }

namespace {

// generic unary with derivative expressed from (input, output)
template <class F, class DF>
Var record_unary(Tape& t, Var x, F f, DF df) {
  const Tensor& xin = t.value(x);
  Tensor out = unary_apply(xin, f);
  return t.record(out, {x}, [&]() -> BackwardFn {
    return [x, xin, out, df](const Tensor& g, GradSink& s) {
      const std::int64_t n = g.size();
      std::vector<double> dx(static_cast<size_t>(n));
      auto pg = g.data();
      auto px = xin.data();
      auto py = out.data();
#pragma omp parallel for if (n > kParallelCutoff) schedule(static)
      for (std::int64_t i = 0; i < n; ++i) {
        auto u = static_cast<size_t>(i);
        dx[u] = pg[u] * df(px[u], py[u]);
      }
      s.accum(x, Tensor::raw(xin.shape(), std::move(dx)));
    };
  });
}

}  // namespace

Var exp_op(Tape& t, Var x) {
  return record_unary(
      t, x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log_op(Tape& t, Var x) {
  return record_unary(
      t, x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var sqrt_op(Tape& t, Var x) {
  return record_unary(
      t, x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / y; });
}

Var sigmoid(Tape& t, Var x) {
  return record_unary(
      t, x, [](double v) { return stable_sigmoid(v); },
      [](double, double y) { return y * (1.0 - y); });
}

Var silu(Tape& t, Var x) {
  return record_unary(
      t, x, [](double v) { return v * stable_sigmoid(v); },
      [](double v, double) {
        double sg = stable_sigmoid(v);
        return sg * (1.0 + v * (1.0 - sg));
      });
}

Var gelu(Tape& t, Var x) {
  return record_unary(
      t, x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        return cdf + v * pdf;
      });
}

Var softplus(Tape& t, Var x) {
  return record_unary(
      t, x, [](double v) { return stable_softplus(v); },
      [](double v, double) { return stable_sigmoid(v); });
}

Var leaky_relu(Tape& t, Var x, double slope) {
  return record_unary(
      t, x, [slope](double v) { return v > 0 ? v : slope * v; },
      [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

Var activation(Tape& t, Var x, Act kind, double slope) {
  switch (kind) {
    case Act::silu: return silu(t, x);
    case Act::gelu: return gelu(t, x);
    case Act::leaky_relu: return leaky_relu(t, x, slope);
    case Act::sigmoid: return sigmoid(t, x);
  }
  throw std::invalid_argument("ops: unknown activation kind");
}

Var softmax(Tape& t, Var x, int axis) {
  const Tensor& xin = t.value(x);
  std::int64_t outer, m, inner;
  axis_split(xin.shape(), axis, &outer, &m, &inner);
  std::vector<double> out(static_cast<size_t>(xin.size()));
  auto px = xin.data();
#pragma omp parallel for if (outer * inner > 256) schedule(static) collapse(2)
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * m * inner + i;
      double mx = px[static_cast<size_t>(base)];
      for (std::int64_t j = 1; j < m; ++j) {
        mx = std::max(mx, px[static_cast<size_t>(base + j * inner)]);
      }
      double z = 0.0;
      for (std::int64_t j = 0; j < m; ++j) {
        double e = std::exp(px[static_cast<size_t>(base + j * inner)] - mx);
        out[static_cast<size_t>(base + j * inner)] = e;
        z += e;
      }
      for (std::int64_t j = 0; j < m; ++j) out[static_cast<size_t>(base + j * inner)] /= z;
    }
  }
  Tensor y = Tensor::raw(xin.shape(), std::move(out));
  return t.record(y, {x}, [&t, x, y, outer, m, inner]() -> BackwardFn {
    return [x, y, outer, m, inner](const Tensor& g, GradSink& s) {
      std::vector<double> dx(static_cast<size_t>(g.size()));
      auto pg = g.data();
      auto py = y.data();
#pragma omp parallel for if (outer * inner > 256) schedule(static) collapse(2)
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
          const std::int64_t base = o * m * inner + i;
          double dot = 0.0;
          for (std::int64_t j = 0; j < m; ++j) {
            auto u = static_cast<size_t>(base + j * inner);
            dot += pg[u] * py[u];
          }
          for (std::int64_t j = 0; j < m; ++j) {
            auto u = static_cast<size_t>(base + j * inner);
            dx[u] = py[u] * (pg[u] - dot);
          }
        }
      }
      s.accum(x, Tensor::raw(y.shape(), std::move(dx)));
    };
  });
}

Var log_softmax(Tape& t, Var x, int axis) {
  const Tensor& xin = t.value(x);
  std::int64_t outer, m, inner;
  axis_split(xin.shape(), axis, &outer, &m, &inner);
  std::vector<double> out(static_cast<size_t>(xin.size()));
  auto px = xin.data();
#pragma omp parallel for if (outer * inner > 256) schedule(static) collapse(2)
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * m * inner + i;
      double mx = px[static_cast<size_t>(base)];
      for (std::int64_t j = 1; j < m; ++j) {
        mx = std::max(mx, px[static_cast<size_t>(base + j * inner)]);
      }
      double z = 0.0;
      for (std::int64_t j = 0; j < m; ++j) {
        z += std::exp(px[static_cast<size_t>(base + j * inner)] - mx);
      }
      const double lz = mx + std::log(z);
      for (std::int64_t j = 0; j < m; ++j) {
        auto u = static_cast<size_t>(base + j * inner);
        out[u] = px[u] - lz;
      }
    }
  }
  Tensor y = Tensor::raw(xin.shape(), std::move(out));
  return t.record(y, {x}, [&t, x, y, outer, m, inner]() -> BackwardFn {
    return [x, y, outer, m, inner](const Tensor& g, GradSink& s) {
      std::vector<double> dx(static_cast<size_t>(g.size()));
      auto pg = g.data();
      auto py = y.data();
#pragma omp parallel for if (outer * inner > 256) schedule(static) collapse(2)
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
          const std::int64_t base = o * m * inner + i;
          double gsum = 0.0;
          for (std::int64_t j = 0; j < m; ++j) gsum += pg[static_cast<size_t>(base + j * inner)];
          for (std::int64_t j = 0; j < m; ++j) {
            auto u = static_cast<size_t>(base + j * inner);
            dx[u] = pg[u] - std::exp(py[u]) * gsum;
          }
        }
      }
      s.accum(x, Tensor::raw(y.shape(), std::move(dx)));
    };
  });
}

Var sum_all(Tape& t, Var x) {
  const Tensor& xin = t.value(x);
  Tensor out = Tensor::scalar(sum_block_reduce(xin.data()));
  Shape xs = xin.shape();
  return t.record(out, {x}, [&t, x, xs]() -> BackwardFn {
    return [x, xs](const Tensor& g, GradSink& s) { s.accum(x, Tensor::full(xs, g.value())); };
  });
}

Var mean_all(Tape& t, Var x) {
  const Tensor& xin = t.value(x);
  const double inv = 1.0 / static_cast<double>(xin.size());
  Tensor out = Tensor::scalar(sum_block_reduce(xin.data()) * inv);
  Shape xs = xin.shape();
  return t.record(out, {x}, [&t, x, xs, inv]() -> BackwardFn {
    return
        [x, xs, inv](const Tensor& g, GradSink& s) { s.accum(x, Tensor::full(xs, g.value() * inv)); };
  });
}

Var sum_spatial(Tape& t, Var x) {
  const Tensor& xin = t.value(x);
  if (xin.rank() < 3) {
    throw std::invalid_argument("sum_spatial: need rank >= 3, got " + std::to_string(xin.rank()));
  }
  const int n = xin.extent(0);
  const int c = xin.extent(1);
  const std::int64_t sp = xin.size() / (static_cast<std::int64_t>(n) * c);
  std::vector<double> out(static_cast<size_t>(n) * c, 0.0);
  const double* xp = xin.data().data();
#pragma omp parallel for if (n * c > 4) schedule(static)
  for (std::int64_t row = 0; row < static_cast<std::int64_t>(n) * c; ++row) {
    out[static_cast<size_t>(row)] = sum_block_reduce({xp + row * sp, static_cast<size_t>(sp)});
  }
  Tensor res = Tensor::raw({n, c}, std::move(out));
  Shape xs = xin.shape();
  return t.record(res, {x}, [&t, x, xs, n, c, sp]() -> BackwardFn {
    return [x, xs, n, c, sp](const Tensor& g, GradSink& s) {
      std::vector<double> dx(static_cast<size_t>(shape_numel(xs)));
      const double* gp = g.data().data();
#pragma omp parallel for if (n * c > 4) schedule(static)
      for (std::int64_t row = 0; row < static_cast<std::int64_t>(n) * c; ++row) {
        std::fill_n(dx.begin() + row * sp, sp, gp[row]);
      }
      s.accum(x, Tensor::raw(xs, std::move(dx)));
    };
  });
}

Var linear(Tape& t, Var x, Var w, std::optional<Var> b) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  if (xv.rank() < 1 || wv.rank() != 2) {
    throw std::invalid_argument("linear: need x rank>=1 and w rank 2");
  }
  const int ci = xv.extent(xv.rank() - 1);
  const int co = wv.extent(1);
  if (wv.extent(0) != ci) {
    throw std::invalid_argument("linear: trailing extent " + std::to_string(ci) +
                                " does not match weight rows " + std::to_string(wv.extent(0)));
  }
  const std::int64_t rows = xv.size() / ci;
  std::vector<double> out(static_cast<size_t>(rows * co), 0.0);
  auto px = xv.data();
  auto pw = wv.data();
  if (b) {
    const Tensor& bv = t.value(*b);
    if (bv.rank() != 1 || bv.extent(0) != co) throw std::invalid_argument("linear: bias extent");
    auto pb = bv.data();
#pragma omp parallel for if (rows > 8) schedule(static)
    for (std::int64_t r = 0; r < rows; ++r) {
      double* orow = out.data() + r * co;
      for (int o = 0; o < co; ++o) orow[o] = pb[static_cast<size_t>(o)];
    }
  }
#pragma omp parallel for if (rows > 8) schedule(static)
  for (std::int64_t r = 0; r < rows; ++r) {
    double* orow = out.data() + r * co;
    const double* xrow = px.data() + r * ci;
    for (int i = 0; i < ci; ++i) {
      const double xv2 = xrow[i];
      const double* wrow = pw.data() + static_cast<std::int64_t>(i) * co;
      for (int o = 0; o < co; ++o) orow[o] += xv2 * wrow[o];
    }
  }
  Shape os = xv.shape();
  os.back() = co;
  Tensor y = Tensor::raw(std::move(os), std::move(out));

  std::vector<Var> ins{x, w};
  if (b) ins.push_back(*b);
  return t.record(y, std::span<const Var>(ins),
                  [&t, x, w, b, xv, wv, rows, ci, co]() -> BackwardFn {
    return [x, w, b, xv, wv, rows, ci, co](const Tensor& g, GradSink& s) {
      auto pg = g.data();
      auto px = xv.data();
      auto pw = wv.data();
      if (s.needs(x)) {
        std::vector<double> dx(static_cast<size_t>(rows * ci));
#pragma omp parallel for if (rows > 8) schedule(static)
        for (std::int64_t r = 0; r < rows; ++r) {
          const double* grow = pg.data() + r * co;
          double* dxr = dx.data() + r * ci;
          for (int i = 0; i < ci; ++i) {
            const double* wrow = pw.data() + static_cast<std::int64_t>(i) * co;
            double acc = 0.0;
            for (int o = 0; o < co; ++o) acc += grow[o] * wrow[o];
            dxr[i] = acc;
          }
        }
        s.accum(x, Tensor::raw(xv.shape(), std::move(dx)));
      }
      if (s.needs(w)) {
        std::vector<double> dw(static_cast<size_t>(ci) * co, 0.0);
#pragma omp parallel for if (ci > 4) schedule(static)
        for (int i = 0; i < ci; ++i) {
          double* dwr = dw.data() + static_cast<std::int64_t>(i) * co;
          for (std::int64_t r = 0; r < rows; ++r) {
            const double xv2 = px[static_cast<size_t>(r * ci + i)];
            const double* grow = pg.data() + r * co;
            for (int o = 0; o < co; ++o) dwr[o] += xv2 * grow[o];
          }
        }
        s.accum(w, Tensor::raw(wv.shape(), std::move(dw)));
      }
      if (b && s.needs(*b)) {
        std::vector<double> db(static_cast<size_t>(co), 0.0);
        for (std::int64_t r = 0; r < rows; ++r) {
          const double* grow = pg.data() + r * co;
          for (int o = 0; o < co; ++o) db[static_cast<size_t>(o)] += grow[o];
        }
        s.accum(*b, Tensor::raw({co}, std::move(db)));
      }
    };
  });
}

Var reshape(Tape& t, Var x, Shape target) {
  const Tensor& xv = t.value(x);
  Tensor out = xv.reshaped(std::move(target));
  Shape xs = xv.shape();
  return t.record(out, {x}, [&t, x, xs]() -> BackwardFn {
    return [x, xs](const Tensor& g, GradSink& s) { s.accum(x, g.reshaped(xs)); };
  });
}

namespace {

// [N,C,L] <-> [N,L,C] transposes shared by vol_to_seq / seq_to_vol
Tensor transpose_cl(const Tensor& x, int n, int c, std::int64_t l, bool c_first_in) {
  const int total = static_cast<int>(x.size());
  std::vector<double> out(static_cast<size_t>(x.size()));
  auto px = x.data();
#pragma omp parallel for if (n * c > 4) schedule(static) collapse(2)
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      if (c_first_in) {
        const double* src = px.data() + (static_cast<std::int64_t>(b) * c + ch) * l;
        double* dst = out.data() + static_cast<std::int64_t>(b) * l * c + ch;
        for (std::int64_t i = 0; i < l; ++i) dst[i * c] = src[i];
      } else {
        const double* src = px.data() + static_cast<std::int64_t>(b) * l * c + ch;
        double* dst = out.data() + (static_cast<std::int64_t>(b) * c + ch) * l;
        for (std::int64_t i = 0; i < l; ++i) dst[i] = src[i * c];
      }
    }
  }
  return Tensor::raw({total}, std::move(out));  // caller reshapes
}

}  // namespace

Var vol_to_seq(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  if (xv.rank() != 5) throw std::invalid_argument("vol_to_seq: expected [N,C,D,H,W]");
  const int n = xv.extent(0), c = xv.extent(1);
  const std::int64_t l =
      static_cast<std::int64_t>(xv.extent(2)) * xv.extent(3) * xv.extent(4);
  Tensor out = transpose_cl(xv, n, c, l, true).reshaped({n, static_cast<int>(l), c});
  Shape xs = xv.shape();
  return t.record(out, {x}, [&t, x, xs, n, c, l]() -> BackwardFn {
    return [x, xs, n, c, l](const Tensor& g, GradSink& s) {
      s.accum(x, transpose_cl(g, n, c, l, false).reshaped(xs));
    };
  });
}

Var seq_to_vol(Tape& t, Var x, int d, int h, int w) {
  const Tensor& xv = t.value(x);
  if (xv.rank() != 3) throw std::invalid_argument("seq_to_vol: expected [N,L,C]");
  const int n = xv.extent(0), c = xv.extent(2);
  const std::int64_t l = static_cast<std::int64_t>(d) * h * w;
  if (xv.extent(1) != l) {
    throw std::invalid_argument("seq_to_vol: L " + std::to_string(xv.extent(1)) +
                                " does not match extents " + std::to_string(l));
  }
  Tensor out = transpose_cl(xv, n, c, l, false).reshaped({n, c, d, h, w});
  Shape xs = xv.shape();
  return t.record(out, {x}, [&t, x, xs, n, c, l]() -> BackwardFn {
    return [x, xs, n, c, l](const Tensor& g, GradSink& s) {
      s.accum(x, transpose_cl(g, n, c, l, true).reshaped(xs));
    };
  });
}

Var concat_channels(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.rank() != bv.rank() || av.rank() < 2 || av.extent(0) != bv.extent(0)) {
    throw std::invalid_argument("concat: incompatible ranks/batch");
  }
  for (int ax = 2; ax < av.rank(); ++ax) {
    if (av.extent(ax) != bv.extent(ax)) throw std::invalid_argument("concat: spatial mismatch");
  }
  const int n = av.extent(0), c1 = av.extent(1), c2 = bv.extent(1);
  std::int64_t sp = 1;
  for (int ax = 2; ax < av.rank(); ++ax) sp *= av.extent(ax);
  Shape os = av.shape();
  os[1] = c1 + c2;
  std::vector<double> out(static_cast<size_t>(shape_numel(os)));
  auto pa = av.data();
  auto pb = bv.data();
  for (int i = 0; i < n; ++i) {
    std::copy_n(pa.data() + static_cast<std::int64_t>(i) * c1 * sp, c1 * sp,
                out.data() + static_cast<std::int64_t>(i) * (c1 + c2) * sp);
    std::copy_n(pb.data() + static_cast<std::int64_t>(i) * c2 * sp, c2 * sp,
                out.data() + static_cast<std::int64_t>(i) * (c1 + c2) * sp + c1 * sp);
  }
  Tensor y = Tensor::raw(std::move(os), std::move(out));
  Shape as = av.shape(), bs = bv.shape();
  return t.record(y, {a, b}, [&t, a, b, as, bs, n, c1, c2, sp]() -> BackwardFn {
    return [a, b, as, bs, n, c1, c2, sp](const Tensor& g, GradSink& s) {
      auto pg = g.data();
      if (s.needs(a)) {
        std::vector<double> da(static_cast<size_t>(shape_numel(as)));
        for (int i = 0; i < n; ++i) {
          std::copy_n(pg.data() + static_cast<std::int64_t>(i) * (c1 + c2) * sp, c1 * sp,
                      da.data() + static_cast<std::int64_t>(i) * c1 * sp);
        }
        s.accum(a, Tensor::raw(as, std::move(da)));
      }
      if (s.needs(b)) {
        std::vector<double> db(static_cast<size_t>(shape_numel(bs)));
        for (int i = 0; i < n; ++i) {
          std::copy_n(pg.data() + static_cast<std::int64_t>(i) * (c1 + c2) * sp + c1 * sp, c2 * sp,
                      db.data() + static_cast<std::int64_t>(i) * c2 * sp);
        }
        s.accum(b, Tensor::raw(bs, std::move(db)));
      }
    };
  });
}

Var slice_channels(Tape& t, Var x, int from, int len) {
  const Tensor& xv = t.value(x);
  if (xv.rank() < 2) throw std::invalid_argument("slice_channels: rank < 2");
  const int n = xv.extent(0), c = xv.extent(1);
  if (from < 0 || len <= 0 || from + len > c) {
    throw std::invalid_argument("slice_channels: range [" + std::to_string(from) + "," +
                                std::to_string(from + len) + ") outside " + std::to_string(c));
  }
  std::int64_t sp = 1;
  for (int ax = 2; ax < xv.rank(); ++ax) sp *= xv.extent(ax);
  Shape os = xv.shape();
  os[1] = len;
  std::vector<double> out(static_cast<size_t>(shape_numel(os)));
  auto px = xv.data();
  for (int i = 0; i < n; ++i) {
    std::copy_n(px.data() + (static_cast<std::int64_t>(i) * c + from) * sp, len * sp,
                out.data() + static_cast<std::int64_t>(i) * len * sp);
  }
  Tensor y = Tensor::raw(std::move(os), std::move(out));
  Shape xs = xv.shape();
  return t.record(y, {x}, [&t, x, xs, n, c, from, len, sp]() -> BackwardFn {
    return [x, xs, n, c, from, len, sp](const Tensor& g, GradSink& s) {
      std::vector<double> dx(static_cast<size_t>(shape_numel(xs)), 0.0);
      auto pg = g.data();
      for (int i = 0; i < n; ++i) {
        std::copy_n(pg.data() + static_cast<std::int64_t>(i) * len * sp, len * sp,
                    dx.data() + (static_cast<std::int64_t>(i) * c + from) * sp);
      }
      s.accum(x, Tensor::raw(xs, std::move(dx)));
    };
  });
}

Var spatial_slice(Tape& t, Var x, const Box& box) {
  const Tensor& xv = t.value(x);
  if (xv.rank() != 5) throw std::invalid_argument("spatial_slice: expected [N,C,D,H,W]");
  const int n = xv.extent(0), c = xv.extent(1);
  const int dd = xv.extent(2), hh = xv.extent(3), ww = xv.extent(4);
  if (box.d0 < 0 || box.d1 > dd || box.h0 < 0 || box.h1 > hh || box.w0 < 0 || box.w1 > ww ||
      box.d0 >= box.d1 || box.h0 >= box.h1 || box.w0 >= box.w1) {
    throw std::invalid_argument("spatial_slice: box outside volume");
  }
  const int bd = box.d1 - box.d0, bh = box.h1 - box.h0, bw = box.w1 - box.w0;
  std::vector<double> out(static_cast<size_t>(n) * c * bd * bh * bw);
  auto px = xv.data();
  std::int64_t o = 0;
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      for (int d = box.d0; d < box.d1; ++d) {
        for (int h = box.h0; h < box.h1; ++h) {
          const double* src =
              px.data() + (((static_cast<std::int64_t>(i) * c + ch) * dd + d) * hh + h) * ww +
              box.w0;
          std::copy_n(src, bw, out.data() + o);
          o += bw;
        }
      }
    }
  }
  Tensor y = Tensor::raw({n, c, bd, bh, bw}, std::move(out));
  Shape xs = xv.shape();
  return t.record(y, {x}, [&t, x, xs, box, n, c, dd, hh, ww]() -> BackwardFn {
    return [x, xs, box, n, c, dd, hh, ww](const Tensor& g, GradSink& s) {
      std::vector<double> dx(static_cast<size_t>(shape_numel(xs)), 0.0);
      auto pg = g.data();
      const int bw = box.w1 - box.w0;
      std::int64_t o = 0;
      for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
          for (int d = box.d0; d < box.d1; ++d) {
            for (int h = box.h0; h < box.h1; ++h) {
              double* dst =
                  dx.data() + (((static_cast<std::int64_t>(i) * c + ch) * dd + d) * hh + h) * ww +
                  box.w0;
              std::copy_n(pg.data() + o, bw, dst);
              o += bw;
            }
          }
        }
      }
      s.accum(x, Tensor::raw(xs, std::move(dx)));
    };
  });
}

Var gather_class(Tape& t, Var x, const ByteVolume& labels) {
  const Tensor& xv = t.value(x);
  if (xv.rank() < 2) throw std::invalid_argument("gather_class: rank < 2");
  const int n = xv.extent(0), c = xv.extent(1);
  std::int64_t sp = 1;
  for (int ax = 2; ax < xv.rank(); ++ax) sp *= xv.extent(ax);
  if (static_cast<std::int64_t>(labels.data.size()) != static_cast<std::int64_t>(n) * sp) {
    throw std::invalid_argument("gather_class: label count mismatch");
  }
  Shape os;
  os.push_back(n);
  for (int ax = 2; ax < xv.rank(); ++ax) os.push_back(xv.extent(ax));
  std::vector<double> out(static_cast<size_t>(n) * sp);
  auto px = xv.data();
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(n) * sp; ++i) {
    const std::int64_t b = i / sp, v = i % sp;
    const int lab = labels.data[static_cast<size_t>(i)];
    if (lab >= c) {
      throw std::invalid_argument("gather_class: label " + std::to_string(lab) +
                                  " out of range for " + std::to_string(c) + " classes");
    }
    out[static_cast<size_t>(i)] = px[static_cast<size_t>((b * c + lab) * sp + v)];
  }
  Tensor y = Tensor::raw(std::move(os), std::move(out));
  Shape xs = xv.shape();
  std::vector<std::uint8_t> lab_copy(labels.data);
  return t.record(y, {x}, [&t, x, xs, n, c, sp, lab_copy = std::move(lab_copy)]() -> BackwardFn {
    return [x, xs, n, c, sp, lab_copy](const Tensor& g, GradSink& s) {
      std::vector<double> dx(static_cast<size_t>(shape_numel(xs)), 0.0);
      auto pg = g.data();
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(n) * sp; ++i) {
        const std::int64_t b = i / sp, v = i % sp;
        const int lab = lab_copy[static_cast<size_t>(i)];
        dx[static_cast<size_t>((b * c + lab) * sp + v)] = pg[static_cast<size_t>(i)];
      }
      s.accum(x, Tensor::raw(xs, std::move(dx)));
    };
  });
}

Tensor one_hot(const ByteVolume& labels, int class_count) {
  if (labels.shape.empty()) throw std::invalid_argument("one_hot: empty label volume");
  const int n = labels.shape[0];
  std::int64_t sp = 1;
  for (size_t ax = 1; ax < labels.shape.size(); ++ax) sp *= labels.shape[ax];
  Shape os;
  os.push_back(n);
  os.push_back(class_count);
  for (size_t ax = 1; ax < labels.shape.size(); ++ax) os.push_back(labels.shape[ax]);
  std::vector<double> out(static_cast<size_t>(n * class_count * sp), 0.0);
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(labels.data.size()); ++i) {
    const std::int64_t b = i / sp, v = i % sp;
    const int lab = labels.data[static_cast<size_t>(i)];
    if (lab >= class_count) {
      throw std::invalid_argument("one_hot: label " + std::to_string(lab) + " out of range");
    }
    out[static_cast<size_t>((b * class_count + lab) * sp + v)] = 1.0;
  }
  return Tensor::raw(std::move(os), std::move(out));
}

ByteVolume downsample_labels_nn(const ByteVolume& labels, const Shape& target) {
  if (labels.shape.size() != target.size()) {
    throw std::invalid_argument("downsample_labels: rank mismatch");
  }
  const int rank = static_cast<int>(target.size());
  ByteVolume out = ByteVolume::zeros(target);
  std::vector<std::int64_t> src_strides(target.size(), 1);
  for (int a = rank - 2; a >= 0; --a) {
    src_strides[static_cast<size_t>(a)] =
        src_strides[static_cast<size_t>(a + 1)] * labels.shape[static_cast<size_t>(a + 1)];
  }
  std::vector<int> idx(target.size(), 0);
  const std::int64_t n = shape_numel(target);
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t si = 0;
    for (int a = 0; a < rank; ++a) {
      const std::int64_t src =
          static_cast<std::int64_t>(idx[static_cast<size_t>(a)]) *
          labels.shape[static_cast<size_t>(a)] / target[static_cast<size_t>(a)];
      si += src * src_strides[static_cast<size_t>(a)];
    }
    out.data[static_cast<size_t>(i)] = labels.data[static_cast<size_t>(si)];
    for (int a = rank - 1; a >= 0; --a) {
      auto ua = static_cast<size_t>(a);
      if (++idx[ua] < target[ua]) break;
      idx[ua] = 0;
    }
  }
  return out;
}

}  // namespace gmseg
