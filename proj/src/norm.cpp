#include "gmseg/norm.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace gmseg {

Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps) {
  const Tensor& xv = t.value(x);
  const Tensor& gv = t.value(gamma);
  const Tensor& bv = t.value(beta);
  if (xv.rank() < 1) throw std::invalid_argument("layer_norm: rank 0 input");
  const int c = xv.extent(xv.rank() - 1);
  if (gv.rank() != 1 || gv.extent(0) != c || bv.rank() != 1 || bv.extent(0) != c) {
    throw std::invalid_argument("layer_norm: scale/shift extent != " + std::to_string(c));
  }
  const std::int64_t rows = xv.size() / c;
  std::vector<double> out(static_cast<size_t>(xv.size()));
  std::vector<double> xhat(static_cast<size_t>(xv.size()));
  std::vector<double> inv_std(static_cast<size_t>(rows));
  auto px = xv.data();
  auto pgm = gv.data();
  auto pbt = bv.data();
#pragma omp parallel for if (rows > 16) schedule(static)
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = px.data() + r * c;
    double mu = 0.0;
    for (int i = 0; i < c; ++i) mu += xr[i];
    mu /= c;
    double var = 0.0;
    for (int i = 0; i < c; ++i) {
      const double d = xr[i] - mu;
      var += d * d;
    }
    var /= c;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = is;
    double* hr = xhat.data() + r * c;
    double* yr = out.data() + r * c;
    for (int i = 0; i < c; ++i) {
      hr[i] = (xr[i] - mu) * is;
      yr[i] = pgm[static_cast<size_t>(i)] * hr[i] + pbt[static_cast<size_t>(i)];
    }
  }
  Tensor y = Tensor::raw(xv.shape(), std::move(out));
  Tensor xhat_t = Tensor::raw(xv.shape(), std::move(xhat));
  Tensor is_t = Tensor::raw({static_cast<int>(rows)}, std::move(inv_std));
  return t.record(y, {x, gamma, beta}, [&]() -> BackwardFn {
    return [x, gamma, beta, xv, gv, xhat_t, is_t, rows, c](const Tensor& g_, GradSink& s) {
      auto pg = g_.data();
      auto ph = xhat_t.data();
      auto pis = is_t.data();
      auto pgm = gv.data();
      if (s.needs(x)) {
        std::vector<double> dx(static_cast<size_t>(xv.size()));
#pragma omp parallel for if (rows > 16) schedule(static)
        for (std::int64_t r = 0; r < rows; ++r) {
          const double* gr = pg.data() + r * c;
          const double* hr = ph.data() + r * c;
          double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat*xhat)
          for (int i = 0; i < c; ++i) {
            const double dh = gr[i] * pgm[static_cast<size_t>(i)];
            m1 += dh;
            m2 += dh * hr[i];
          }
          m1 /= c;
          m2 /= c;
          const double is = pis[static_cast<size_t>(r)];
          double* dxr = dx.data() + r * c;
          for (int i = 0; i < c; ++i) {
            const double dh = gr[i] * pgm[static_cast<size_t>(i)];
            dxr[i] = is * (dh - m1 - hr[i] * m2);
          }
        }
        s.accum(x, Tensor::raw(xv.shape(), std::move(dx)));
      }
      if (s.needs(gamma) || s.needs(beta)) {
        std::vector<double> dg(static_cast<size_t>(c), 0.0);
        std::vector<double> db(static_cast<size_t>(c), 0.0);
#pragma omp parallel for if (c > 16) schedule(static)
        for (int i = 0; i < c; ++i) {
          double ag = 0.0, ab = 0.0;
          for (std::int64_t r = 0; r < rows; ++r) {
            ag += pg[static_cast<size_t>(r * c + i)] * ph[static_cast<size_t>(r * c + i)];
            ab += pg[static_cast<size_t>(r * c + i)];
          }
          dg[static_cast<size_t>(i)] = ag;
          db[static_cast<size_t>(i)] = ab;
        }
        if (s.needs(gamma)) s.accum(gamma, Tensor::raw({c}, std::move(dg)));
        if (s.needs(beta)) s.accum(beta, Tensor::raw({c}, std::move(db)));
      }
    };
  });
}

namespace {

void check_bn_shapes(const Tensor& xv, const Tensor& gv, const Tensor& bv) {
  if (xv.rank() < 2) throw std::invalid_argument("batch_norm: rank < 2");
  const int c = xv.extent(1);
  if (gv.rank() != 1 || gv.extent(0) != c || bv.rank() != 1 || bv.extent(0) != c) {
    throw std::invalid_argument("batch_norm: scale/shift extent != " + std::to_string(c));
  }
}

}  // namespace

Var batch_norm_train(Tape& t, Var x, Var gamma, Var beta, double eps, BatchStats* stats_out) {
  const Tensor& xv = t.value(x);
  const Tensor& gv = t.value(gamma);
  const Tensor& bv = t.value(beta);
  check_bn_shapes(xv, gv, bv);
  const int n = xv.extent(0), c = xv.extent(1);
  std::int64_t sp = 1;
  for (int a = 2; a < xv.rank(); ++a) sp *= xv.extent(a);
  const std::int64_t m = static_cast<std::int64_t>(n) * sp;

  std::vector<double> mean(static_cast<size_t>(c));
  std::vector<double> var(static_cast<size_t>(c));
  std::vector<double> inv_std(static_cast<size_t>(c));
  auto px = xv.data();
#pragma omp parallel for if (c > 4) schedule(static)
  for (int ch = 0; ch < c; ++ch) {
    double mu = 0.0;
    for (int b = 0; b < n; ++b) {
      const double* blk = px.data() + (static_cast<std::int64_t>(b) * c + ch) * sp;
      for (std::int64_t i = 0; i < sp; ++i) mu += blk[i];
    }
    mu /= static_cast<double>(m);
    double v = 0.0;
    for (int b = 0; b < n; ++b) {
      const double* blk = px.data() + (static_cast<std::int64_t>(b) * c + ch) * sp;
      for (std::int64_t i = 0; i < sp; ++i) {
        const double d = blk[i] - mu;
        v += d * d;
      }
    }
    v /= static_cast<double>(m);
    mean[static_cast<size_t>(ch)] = mu;
    var[static_cast<size_t>(ch)] = v;
    inv_std[static_cast<size_t>(ch)] = 1.0 / std::sqrt(v + eps);
  }
  if (stats_out) {
    stats_out->mean = Tensor::raw({c}, std::vector<double>(mean));
    stats_out->var = Tensor::raw({c}, std::vector<double>(var));
  }

  std::vector<double> out(static_cast<size_t>(xv.size()));
  std::vector<double> xhat(static_cast<size_t>(xv.size()));
  auto pgm = gv.data();
  auto pbt = bv.data();
  const std::int64_t blocks = static_cast<std::int64_t>(n) * c;
#pragma omp parallel for if (blocks > 4) schedule(static)
  for (std::int64_t blk = 0; blk < blocks; ++blk) {
    const int ch = static_cast<int>(blk % c);
    const double mu = mean[static_cast<size_t>(ch)];
    const double is = inv_std[static_cast<size_t>(ch)];
    const double gm = pgm[static_cast<size_t>(ch)];
    const double bt = pbt[static_cast<size_t>(ch)];
    const double* xp = px.data() + blk * sp;
    double* hp = xhat.data() + blk * sp;
    double* yp = out.data() + blk * sp;
    for (std::int64_t i = 0; i < sp; ++i) {
      hp[i] = (xp[i] - mu) * is;
      yp[i] = gm * hp[i] + bt;
    }
  }
  Tensor y = Tensor::raw(xv.shape(), std::move(out));
  Tensor xhat_t = Tensor::raw(xv.shape(), std::move(xhat));
  Tensor is_t = Tensor::raw({c}, std::move(inv_std));
  return t.record(y, {x, gamma, beta}, [&]() -> BackwardFn {
    return [x, gamma, beta, xv, gv, xhat_t, is_t, n, c, sp, m](const Tensor& g_, GradSink& s) {
      auto pg = g_.data();
      auto ph = xhat_t.data();
      auto pis = is_t.data();
      auto pgm = gv.data();
      // per-channel sums of g and g*xhat drive every piece of the backward
      std::vector<double> sum_g(static_cast<size_t>(c), 0.0);
      std::vector<double> sum_gh(static_cast<size_t>(c), 0.0);
#pragma omp parallel for if (c > 4) schedule(static)
      for (int ch = 0; ch < c; ++ch) {
        double sg = 0.0, sgh = 0.0;
        for (int b = 0; b < n; ++b) {
          const std::int64_t off = (static_cast<std::int64_t>(b) * c + ch) * sp;
          const double* gp = pg.data() + off;
          const double* hp = ph.data() + off;
          for (std::int64_t i = 0; i < sp; ++i) {
            sg += gp[i];
            sgh += gp[i] * hp[i];
          }
        }
        sum_g[static_cast<size_t>(ch)] = sg;
        sum_gh[static_cast<size_t>(ch)] = sgh;
      }
      if (s.needs(x)) {
        std::vector<double> dx(static_cast<size_t>(xv.size()));
        const std::int64_t blocks = static_cast<std::int64_t>(n) * c;
        const double inv_m = 1.0 / static_cast<double>(m);
#pragma omp parallel for if (blocks > 4) schedule(static)
        for (std::int64_t blk = 0; blk < blocks; ++blk) {
          const int ch = static_cast<int>(blk % c);
          const double k = pgm[static_cast<size_t>(ch)] * pis[static_cast<size_t>(ch)] * inv_m;
          const double sg = sum_g[static_cast<size_t>(ch)];
          const double sgh = sum_gh[static_cast<size_t>(ch)];
          const double* gp = pg.data() + blk * sp;
          const double* hp = ph.data() + blk * sp;
          double* dxp = dx.data() + blk * sp;
          for (std::int64_t i = 0; i < sp; ++i) {
            dxp[i] = k * (static_cast<double>(m) * gp[i] - sg - hp[i] * sgh);
          }
        }
        s.accum(x, Tensor::raw(xv.shape(), std::move(dx)));
      }
      if (s.needs(gamma)) s.accum(gamma, Tensor::raw({c}, std::vector<double>(sum_gh)));
      if (s.needs(beta)) s.accum(beta, Tensor::raw({c}, std::vector<double>(sum_g)));
    };
  });
}

Var batch_norm_eval(Tape& t, Var x, Var gamma, Var beta, const Tensor& running_mean,
                    const Tensor& running_var, double eps) {
  const Tensor& xv = t.value(x);
  const Tensor& gv = t.value(gamma);
  const Tensor& bv = t.value(beta);
  check_bn_shapes(xv, gv, bv);
  const int n = xv.extent(0), c = xv.extent(1);
  if (running_mean.size() != c || running_var.size() != c) {
    throw std::invalid_argument("batch_norm: running statistics extent != " + std::to_string(c));
  }
  std::int64_t sp = 1;
  for (int a = 2; a < xv.rank(); ++a) sp *= xv.extent(a);

  std::vector<double> inv_std(static_cast<size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    inv_std[static_cast<size_t>(ch)] =
        1.0 / std::sqrt(running_var.data()[static_cast<size_t>(ch)] + eps);
  }
  std::vector<double> out(static_cast<size_t>(xv.size()));
  std::vector<double> xhat(static_cast<size_t>(xv.size()));
  auto px = xv.data();
  auto pgm = gv.data();
  auto pbt = bv.data();
  auto pmu = running_mean.data();
  const std::int64_t blocks = static_cast<std::int64_t>(n) * c;
#pragma omp parallel for if (blocks > 4) schedule(static)
  for (std::int64_t blk = 0; blk < blocks; ++blk) {
    const int ch = static_cast<int>(blk % c);
    const double mu = pmu[static_cast<size_t>(ch)];
    const double is = inv_std[static_cast<size_t>(ch)];
    const double gm = pgm[static_cast<size_t>(ch)];
    const double bt = pbt[static_cast<size_t>(ch)];
    const double* xp = px.data() + blk * sp;
    double* hp = xhat.data() + blk * sp;
    double* yp = out.data() + blk * sp;
    for (std::int64_t i = 0; i < sp; ++i) {
      hp[i] = (xp[i] - mu) * is;
      yp[i] = gm * hp[i] + bt;
    }
  }
  Tensor y = Tensor::raw(xv.shape(), std::move(out));
  Tensor xhat_t = Tensor::raw(xv.shape(), std::move(xhat));
  Tensor is_t = Tensor::raw({c}, std::move(inv_std));
  return t.record(y, {x, gamma, beta}, [&]() -> BackwardFn {
    return [x, gamma, beta, xv, gv, xhat_t, is_t, n, c, sp](const Tensor& g_, GradSink& s) {
      auto pg = g_.data();
      auto ph = xhat_t.data();
      auto pis = is_t.data();
      auto pgm = gv.data();
      if (s.needs(x)) {
        std::vector<double> dx(static_cast<size_t>(xv.size()));
        const std::int64_t blocks = static_cast<std::int64_t>(n) * c;
#pragma omp parallel for if (blocks > 4) schedule(static)
        for (std::int64_t blk = 0; blk < blocks; ++blk) {
          const int ch = static_cast<int>(blk % c);
          const double k = pgm[static_cast<size_t>(ch)] * pis[static_cast<size_t>(ch)];
          const double* gp = pg.data() + blk * sp;
          double* dxp = dx.data() + blk * sp;
          for (std::int64_t i = 0; i < sp; ++i) dxp[i] = k * gp[i];
        }
        s.accum(x, Tensor::raw(xv.shape(), std::move(dx)));
      }
      if (s.needs(gamma) || s.needs(beta)) {
        std::vector<double> dg(static_cast<size_t>(c), 0.0);
        std::vector<double> db(static_cast<size_t>(c), 0.0);
#pragma omp parallel for if (c > 4) schedule(static)
        for (int ch = 0; ch < c; ++ch) {
          double ag = 0.0, ab = 0.0;
          for (int b = 0; b < n; ++b) {
            const std::int64_t off = (static_cast<std::int64_t>(b) * c + ch) * sp;
            const double* gp = pg.data() + off;
            const double* hp = ph.data() + off;
            for (std::int64_t i = 0; i < sp; ++i) {
              ag += gp[i] * hp[i];
              ab += gp[i];
            }
          }
          dg[static_cast<size_t>(ch)] = ag;
          db[static_cast<size_t>(ch)] = ab;
        }
        if (s.needs(gamma)) s.accum(gamma, Tensor::raw({c}, std::move(dg)));
        if (s.needs(beta)) s.accum(beta, Tensor::raw({c}, std::move(db)));
      }
    };
  });
}

}  // namespace gmseg
