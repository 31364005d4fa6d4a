#include "gmseg/scan.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace gmseg {

namespace {

// phi(z) = (e^z - 1)/z, phi(0) = 1
double phi(double z) {
  if (std::abs(z) < 1e-8) return 1.0 + 0.5 * z + z * z / 6.0;
  return std::expm1(z) / z;
}

// psi(z) = (e^z - phi(z))/z = sum_{k>=0} (k+1) z^k/(k+2)!, psi(0) = 1/2
double psi(double z) {
  if (std::abs(z) < 0.5) {
    double term = 0.5, acc = 0.5;
    for (int k = 1; k < 32; ++k) {
      term *= z * (k + 1) / (static_cast<double>(k) * (k + 2));
      acc += term;
      if (std::abs(term) < 1e-18 * std::abs(acc)) break;
    }
    return acc;
  }
  return (std::exp(z) - std::expm1(z) / z) / z;
}

void scan_lane_seq(const double* a, const double* b, double* h, int l) {
  double s = 0.0;
  for (int t = 0; t < l; ++t) {
    s = a[t] * s + b[t];
    h[t] = s;
  }
}

// Chunked work-efficient scan: local prefixes per chunk, carry scan over
// chunk summaries, then carry application. Passes 1 and 3 are independent
// per chunk; results do not depend on how chunks are scheduled.
void scan_lane_par(const double* a, const double* b, double* h, double* pa, int l, int chunk) {
  const int nc = (l + chunk - 1) / chunk;
  for (int c = 0; c < nc; ++c) {
    const int lo = c * chunk, hi = std::min(l, lo + chunk);
    double prod = 1.0, s = 0.0;
    for (int t = lo; t < hi; ++t) {
      prod *= a[t];
      s = a[t] * s + b[t];
      pa[t] = prod;
      h[t] = s;
    }
  }
  std::vector<double> carry(static_cast<size_t>(nc), 0.0);
  for (int c = 1; c < nc; ++c) {
    const int end = std::min(l, c * chunk) - 1;
    carry[static_cast<size_t>(c)] =
        pa[end] * carry[static_cast<size_t>(c - 1)] + h[end];
  }
  for (int c = 1; c < nc; ++c) {
    const int lo = c * chunk, hi = std::min(l, lo + chunk);
    const double cr = carry[static_cast<size_t>(c)];
    for (int t = lo; t < hi; ++t) h[t] += pa[t] * cr;
  }
}

void check_scan_shapes(const Tensor& x, const Tensor& abar, const Tensor& bbar,
                       const Tensor& cout, const Tensor& d) {
  if (x.rank() != 2) throw std::invalid_argument("scan: x must be [L,C]");
  const int l = x.extent(0), c = x.extent(1);
  if (abar.rank() != 3 || abar.extent(0) != l || abar.extent(1) != c) {
    throw std::invalid_argument("scan: abar must be [L,C,N], got " + shape_str(abar.shape()));
  }
  if (!shapes_equal(bbar.shape(), abar.shape())) {
    throw std::invalid_argument("scan: bbar shape " + shape_str(bbar.shape()) +
                                " != abar shape " + shape_str(abar.shape()));
  }
  const int n = abar.extent(2);
  if (cout.rank() != 2 || cout.extent(0) != l || cout.extent(1) != n) {
    throw std::invalid_argument("scan: cout must be [L,N], got " + shape_str(cout.shape()));
  }
  if (d.rank() != 1 || d.extent(0) != c) {
    throw std::invalid_argument("scan: d must be [C], got " + shape_str(d.shape()));
  }
}

Tensor scan_common(const Tensor& x, const Tensor& abar, const Tensor& bbar, const Tensor& cout,
                   const Tensor& d, bool parallel, int chunk) {
  check_scan_shapes(x, abar, bbar, cout, d);
  const int l = x.extent(0), c_ = x.extent(1), n_ = abar.extent(2);
  std::vector<double> y(static_cast<size_t>(l) * c_, 0.0);
  auto px = x.data();
  auto pa = abar.data();
  auto pb = bbar.data();
  auto pc = cout.data();
  auto pd = d.data();
#pragma omp parallel for if (c_ > 1) schedule(static)
  for (int c = 0; c < c_; ++c) {
    std::vector<double> ea(static_cast<size_t>(l)), eb(static_cast<size_t>(l)),
        h(static_cast<size_t>(l));
    std::vector<double> prefix(parallel ? static_cast<size_t>(l) : 0);
    for (int n = 0; n < n_; ++n) {
      for (int t = 0; t < l; ++t) {
        const std::int64_t i = (static_cast<std::int64_t>(t) * c_ + c) * n_ + n;
        ea[static_cast<size_t>(t)] = pa[static_cast<size_t>(i)];
        eb[static_cast<size_t>(t)] =
            pb[static_cast<size_t>(i)] * px[static_cast<size_t>(t * c_ + c)];
      }
      if (parallel) {
        scan_lane_par(ea.data(), eb.data(), h.data(), prefix.data(), l, chunk);
      } else {
        scan_lane_seq(ea.data(), eb.data(), h.data(), l);
      }
      for (int t = 0; t < l; ++t) {
        y[static_cast<size_t>(t * c_ + c)] +=
            pc[static_cast<size_t>(t * n_ + n)] * h[static_cast<size_t>(t)];
      }
    }
    for (int t = 0; t < l; ++t) {
      y[static_cast<size_t>(t * c_ + c)] +=
          pd[static_cast<size_t>(c)] * px[static_cast<size_t>(t * c_ + c)];
    }
  }
  return Tensor::raw(x.shape(), std::move(y));
}

}  // namespace

void discretize(const Tensor& delta, const Tensor& a, const Tensor& b, Tensor* abar,
                Tensor* bbar) {
  if (delta.rank() != 2) throw std::invalid_argument("discretize: delta must be [L,C]");
  const int l = delta.extent(0), c_ = delta.extent(1);
  if (a.rank() != 2 || a.extent(0) != c_) {
    throw std::invalid_argument("discretize: a must be [C,N], got " + shape_str(a.shape()));
  }
  const int n_ = a.extent(1);
  if (b.rank() != 2 || b.extent(0) != l || b.extent(1) != n_) {
    throw std::invalid_argument("discretize: b must be [L,N], got " + shape_str(b.shape()));
  }
  auto pdl = delta.data();
  auto pa = a.data();
  auto pb = b.data();
  for (std::int64_t i = 0; i < delta.size(); ++i) {
    if (!(pdl[static_cast<size_t>(i)] > 0.0)) {
      throw std::invalid_argument("discretize: delta must be positive, got " +
                                  std::to_string(pdl[static_cast<size_t>(i)]) + " at " +
                                  std::to_string(i));
    }
  }
  for (std::int64_t i = 0; i < a.size(); ++i) {
    if (!(pa[static_cast<size_t>(i)] < 0.0)) {
      throw std::invalid_argument("discretize: a must be negative");
    }
  }
  std::vector<double> oa(static_cast<size_t>(l) * c_ * n_);
  std::vector<double> ob(static_cast<size_t>(l) * c_ * n_);
  const std::int64_t rows = static_cast<std::int64_t>(l) * c_;
#pragma omp parallel for if (rows > 64) schedule(static)
  for (std::int64_t row = 0; row < rows; ++row) {
    const int t = static_cast<int>(row / c_);
    const int c = static_cast<int>(row % c_);
    const double dl = pdl[static_cast<size_t>(row)];
    for (int n = 0; n < n_; ++n) {
      const double z = dl * pa[static_cast<size_t>(c * n_ + n)];
      oa[static_cast<size_t>(row * n_ + n)] = std::exp(z);
      ob[static_cast<size_t>(row * n_ + n)] =
          dl * phi(z) * pb[static_cast<size_t>(t * n_ + n)];
    }
  }
  *abar = Tensor::raw({l, c_, n_}, std::move(oa));
  *bbar = Tensor::raw({l, c_, n_}, std::move(ob));
}

Tensor scan_sequential(const Tensor& x, const Tensor& abar, const Tensor& bbar,
                       const Tensor& cout, const Tensor& d) {
  return scan_common(x, abar, bbar, cout, d, false, 0);
}

Tensor scan_parallel(const Tensor& x, const Tensor& abar, const Tensor& bbar, const Tensor& cout,
                     const Tensor& d, int chunk) {
  if (chunk <= 0) throw std::invalid_argument("scan_parallel: chunk must be positive");
  return scan_common(x, abar, bbar, cout, d, true, chunk);
}

Var selective_scan(Tape& t, Var x, Var delta, Var a, Var b, Var c, Var d, ScanMode mode,
                   int chunk) {
  const Tensor& xv = t.value(x);
  const Tensor& dlv = t.value(delta);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  const Tensor& cv = t.value(c);
  const Tensor& dv = t.value(d);
  if (xv.rank() != 3) throw std::invalid_argument("selective_scan: x must be [B,L,C]");
  const int bb = xv.extent(0), ll = xv.extent(1), cc = xv.extent(2);
  if (!shapes_equal(dlv.shape(), xv.shape())) {
    throw std::invalid_argument("selective_scan: delta shape " + shape_str(dlv.shape()) +
                                " != x shape " + shape_str(xv.shape()));
  }
  if (av.rank() != 2 || av.extent(0) != cc) {
    throw std::invalid_argument("selective_scan: a must be [C,N]");
  }
  const int ss = av.extent(1);
  const Shape want_proj{bb, ll, ss};
  if (!shapes_equal(bv.shape(), want_proj) || !shapes_equal(cv.shape(), want_proj)) {
    throw std::invalid_argument("selective_scan: b/c must be " + shape_str(want_proj));
  }
  if (dv.rank() != 1 || dv.extent(0) != cc) {
    throw std::invalid_argument("selective_scan: d must be [C]");
  }
  if (chunk <= 0) throw std::invalid_argument("selective_scan: chunk must be positive");
  auto pdl = dlv.data();
  auto pa = av.data();
  for (std::int64_t i = 0; i < dlv.size(); ++i) {
    if (!(pdl[static_cast<size_t>(i)] > 0.0)) {
      throw std::invalid_argument("selective_scan: delta must be positive");
    }
  }
  for (std::int64_t i = 0; i < av.size(); ++i) {
    if (!(pa[static_cast<size_t>(i)] < 0.0)) {
      throw std::invalid_argument("selective_scan: a must be negative");
    }
  }

  // states stored lane-major [B,C,N,L] so each recurrence runs contiguously
  std::vector<double> hbuf(static_cast<size_t>(bb) * cc * ss * ll);
  auto px = xv.data();
  auto pb = bv.data();
  const std::int64_t lanesets = static_cast<std::int64_t>(bb) * cc;
#pragma omp parallel for if (lanesets > 1) schedule(static)
  for (std::int64_t bc = 0; bc < lanesets; ++bc) {
    const int bi = static_cast<int>(bc / cc);
    const int ci = static_cast<int>(bc % cc);
    std::vector<double> ea(static_cast<size_t>(ll)), eb(static_cast<size_t>(ll));
    std::vector<double> prefix(mode == ScanMode::parallel ? static_cast<size_t>(ll) : 0);
    for (int n = 0; n < ss; ++n) {
      const double an = pa[static_cast<size_t>(ci * ss + n)];
      for (int ti = 0; ti < ll; ++ti) {
        const std::int64_t xi = (static_cast<std::int64_t>(bi) * ll + ti) * cc + ci;
        const double z = pdl[static_cast<size_t>(xi)] * an;
        ea[static_cast<size_t>(ti)] = std::exp(z);
        eb[static_cast<size_t>(ti)] =
            pdl[static_cast<size_t>(xi)] * phi(z) *
            pb[static_cast<size_t>((static_cast<std::int64_t>(bi) * ll + ti) * ss + n)] *
            px[static_cast<size_t>(xi)];
      }
      double* hl = hbuf.data() + ((bc * ss) + n) * ll;
      if (mode == ScanMode::parallel) {
        scan_lane_par(ea.data(), eb.data(), hl, prefix.data(), ll, chunk);
      } else {
        scan_lane_seq(ea.data(), eb.data(), hl, ll);
      }
    }
  }
  Tensor h = Tensor::raw({bb, cc, ss, ll}, std::move(hbuf));

  std::vector<double> y(static_cast<size_t>(bb) * ll * cc);
  auto ph = h.data();
  auto pcv = cv.data();
  auto pdv = dv.data();
  const std::int64_t trows = static_cast<std::int64_t>(bb) * ll;
#pragma omp parallel for if (trows > 16) schedule(static)
  for (std::int64_t bt = 0; bt < trows; ++bt) {
    const int bi = static_cast<int>(bt / ll);
    const int ti = static_cast<int>(bt % ll);
    const double* crow = pcv.data() + bt * ss;
    double* yrow = y.data() + bt * cc;
    for (int ci = 0; ci < cc; ++ci) {
      double acc = pdv[static_cast<size_t>(ci)] * px[static_cast<size_t>(bt * cc + ci)];
      const double* hl = ph.data() + ((static_cast<std::int64_t>(bi) * cc + ci) * ss) * ll + ti;
      for (int n = 0; n < ss; ++n) acc += crow[n] * hl[static_cast<std::int64_t>(n) * ll];
      yrow[ci] = acc;
    }
  }
  Tensor yt = Tensor::raw(xv.shape(), std::move(y));

  return t.record(yt, {x, delta, a, b, c, d}, [&]() -> BackwardFn {
    return [x, delta, a, b, c, d, xv, dlv, av, bv, cv, dv, h, bb, ll, cc,
            ss](const Tensor& gy, GradSink& sink) {
      auto pg = gy.data();
      auto px = xv.data();
      auto pdl = dlv.data();
      auto pa = av.data();
      auto pb = bv.data();
      auto pcv = cv.data();
      auto pdv = dv.data();
      auto ph = h.data();
      std::vector<double> dx(static_cast<size_t>(xv.size()), 0.0);
      std::vector<double> ddl(static_cast<size_t>(dlv.size()), 0.0);
      std::vector<double> da(static_cast<size_t>(av.size()), 0.0);
      std::vector<double> dbp(static_cast<size_t>(bv.size()), 0.0);
      std::vector<double> dcp(static_cast<size_t>(cv.size()), 0.0);
      std::vector<double> dd(static_cast<size_t>(dv.size()), 0.0);
      std::vector<double> lam(static_cast<size_t>(cc) * ss * ll);
      for (int bi = 0; bi < bb; ++bi) {
        // adjoint sweep: one thread per channel owns its dx/ddelta columns,
        // its rows of da/dd, and its slice of the lambda buffer
#pragma omp parallel for if (cc > 1) schedule(static)
        for (int ci = 0; ci < cc; ++ci) {
          std::vector<double> acc_dx(static_cast<size_t>(ll), 0.0);
          std::vector<double> acc_ddl(static_cast<size_t>(ll), 0.0);
          for (int n = 0; n < ss; ++n) {
            const double an = pa[static_cast<size_t>(ci * ss + n)];
            double lam_next = 0.0, e_next = 0.0;
            double da_acc = 0.0;
            double* lamrow = lam.data() + (static_cast<std::int64_t>(ci) * ss + n) * ll;
            const double* hl =
                ph.data() + ((static_cast<std::int64_t>(bi) * cc + ci) * ss + n) * ll;
            for (int ti = ll - 1; ti >= 0; --ti) {
              const std::int64_t xi = (static_cast<std::int64_t>(bi) * ll + ti) * cc + ci;
              const std::int64_t si = (static_cast<std::int64_t>(bi) * ll + ti) * ss + n;
              const double dl = pdl[static_cast<size_t>(xi)];
              const double z = dl * an;
              const double e = std::exp(z);
              const double l =
                  pg[static_cast<size_t>(xi)] * pcv[static_cast<size_t>(si)] + e_next * lam_next;
              lamrow[ti] = l;
              const double h_prev = ti > 0 ? hl[ti - 1] : 0.0;
              const double dabar = l * h_prev;
              const double bpv = pb[static_cast<size_t>(si)];
              const double g_coef = dl * phi(z) * bpv;
              const double dg = l * px[static_cast<size_t>(xi)];
              acc_dx[static_cast<size_t>(ti)] += l * g_coef;
              acc_ddl[static_cast<size_t>(ti)] += dabar * an * e + dg * e * bpv;
              da_acc += dabar * dl * e + dg * bpv * dl * dl * psi(z);
              lam_next = l;
              e_next = e;
            }
            da[static_cast<size_t>(ci * ss + n)] += da_acc;
          }
          double dd_acc = 0.0;
          for (int ti = 0; ti < ll; ++ti) {
            const std::int64_t xi = (static_cast<std::int64_t>(bi) * ll + ti) * cc + ci;
            dx[static_cast<size_t>(xi)] = acc_dx[static_cast<size_t>(ti)] +
                                          pg[static_cast<size_t>(xi)] *
                                              pdv[static_cast<size_t>(ci)];
            ddl[static_cast<size_t>(xi)] = acc_ddl[static_cast<size_t>(ti)];
            dd_acc += pg[static_cast<size_t>(xi)] * px[static_cast<size_t>(xi)];
          }
          dd[static_cast<size_t>(ci)] += dd_acc;
        }
        // projection adjoints: one thread per token owns its db/dc rows
#pragma omp parallel for if (ll > 16) schedule(static)
        for (int ti = 0; ti < ll; ++ti) {
          for (int n = 0; n < ss; ++n) {
            double acc_c = 0.0, acc_b = 0.0;
            for (int ci = 0; ci < cc; ++ci) {
              const std::int64_t xi = (static_cast<std::int64_t>(bi) * ll + ti) * cc + ci;
              const double* hl =
                  ph.data() + ((static_cast<std::int64_t>(bi) * cc + ci) * ss + n) * ll;
              acc_c += pg[static_cast<size_t>(xi)] * hl[ti];
              const double dl = pdl[static_cast<size_t>(xi)];
              const double z = dl * pa[static_cast<size_t>(ci * ss + n)];
              acc_b += lam[static_cast<size_t>((static_cast<std::int64_t>(ci) * ss + n) * ll +
                                               ti)] *
                       px[static_cast<size_t>(xi)] * dl * phi(z);
            }
            const std::int64_t si = (static_cast<std::int64_t>(bi) * ll + ti) * ss + n;
            dcp[static_cast<size_t>(si)] += acc_c;
            dbp[static_cast<size_t>(si)] += acc_b;
          }
        }
      }
      if (sink.needs(x)) sink.accum(x, Tensor::raw(xv.shape(), std::move(dx)));
      if (sink.needs(delta)) sink.accum(delta, Tensor::raw(dlv.shape(), std::move(ddl)));
      if (sink.needs(a)) sink.accum(a, Tensor::raw(av.shape(), std::move(da)));
      if (sink.needs(b)) sink.accum(b, Tensor::raw(bv.shape(), std::move(dbp)));
      if (sink.needs(c)) sink.accum(c, Tensor::raw(cv.shape(), std::move(dcp)));
      if (sink.needs(d)) sink.accum(d, Tensor::raw(dv.shape(), std::move(dd)));
    };
  });
}

}  // namespace gmseg
