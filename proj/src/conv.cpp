#include "gmseg/conv.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace gmseg {

namespace {

// Iterate j in [j_lo, j_hi] so that m = base + j*s stays inside [0, m_len),
// with j itself limited to [0, j_len). Empty range when j_lo > j_hi.
struct AxisRange {
  int lo = 0;
  int hi = -1;
};

AxisRange mapped_range(int base, int s, int j_len, int m_len) {
  AxisRange r;
  r.lo = base >= 0 ? 0 : (-base + s - 1) / s;
  const int m_room = m_len - 1 - base;
  r.hi = m_room < 0 ? -1 : std::min(j_len - 1, m_room / s);
  return r;
}

// o = (i + p - k) / s if nonnegative and divisible, else -1 (or >= limit)
int back_map(int i, int p, int k, int s, int limit) {
  const int num = i + p - k;
  if (num < 0 || num % s != 0) return -1;
  const int o = num / s;
  return o < limit ? o : -1;
}

}  // namespace

void Conv3dSpec::validate() const {
  if (in_channels <= 0 || out_channels <= 0) throw std::invalid_argument("conv: channels <= 0");
  if (groups <= 0 || in_channels % groups != 0 || out_channels % groups != 0) {
    throw std::invalid_argument("conv: groups " + std::to_string(groups) +
                                " must divide channels " + std::to_string(in_channels) + "/" +
                                std::to_string(out_channels));
  }
  for (int a = 0; a < 3; ++a) {
    if (kernel[static_cast<size_t>(a)] <= 0 || stride[static_cast<size_t>(a)] <= 0 ||
        pad[static_cast<size_t>(a)] < 0) {
      throw std::invalid_argument("conv: bad kernel/stride/pad on axis " + std::to_string(a));
    }
  }
}

std::array<int, 3> Conv3dSpec::out_extents(const std::array<int, 3>& in) const {
  std::array<int, 3> out{};
  for (size_t a = 0; a < 3; ++a) {
    const int num = in[a] + 2 * pad[a] - kernel[a];
    if (num < 0) {
      throw std::invalid_argument("conv: kernel larger than padded input on axis " +
                                  std::to_string(a));
    }
    out[a] = num / stride[a] + 1;
  }
  return out;
}

std::array<int, 3> Conv3dSpec::out_extents_transposed(const std::array<int, 3>& in) const {
  std::array<int, 3> out{};
  for (size_t a = 0; a < 3; ++a) {
    out[a] = (in[a] - 1) * stride[a] - 2 * pad[a] + kernel[a];
    if (out[a] <= 0) {
      throw std::invalid_argument("conv_transpose: nonpositive output extent on axis " +
                                  std::to_string(a));
    }
  }
  return out;
}

Var conv3d(Tape& t, Var x, Var w, std::optional<Var> bias, const Conv3dSpec& spec) {
  spec.validate();
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  if (xv.rank() != 5) throw std::invalid_argument("conv3d: expected [N,C,D,H,W]");
  const int n = xv.extent(0), ci = xv.extent(1);
  const int di = xv.extent(2), hi_ = xv.extent(3), wi = xv.extent(4);
  const int co = spec.out_channels;
  const int cg = ci / spec.groups;       // input channels per group
  const int og = co / spec.groups;       // output channels per group
  if (ci != spec.in_channels) {
    throw std::invalid_argument("conv3d: input has " + std::to_string(ci) +
                                " channels, spec says " + std::to_string(spec.in_channels));
  }
  const Shape want_w{co, cg, spec.kernel[0], spec.kernel[1], spec.kernel[2]};
  if (!shapes_equal(wv.shape(), want_w)) {
    throw std::invalid_argument("conv3d: weight " + shape_str(wv.shape()) + ", expected " +
                                shape_str(want_w));
  }
  const auto oe = spec.out_extents({di, hi_, wi});
  const int od_ = oe[0], oh_ = oe[1], ow_ = oe[2];
  const int kd = spec.kernel[0], kh = spec.kernel[1], kw = spec.kernel[2];
  const int sd = spec.stride[0], sh = spec.stride[1], sw = spec.stride[2];
  const int pd = spec.pad[0], ph = spec.pad[1], pw = spec.pad[2];

  std::vector<double> out(static_cast<size_t>(n) * co * od_ * oh_ * ow_, 0.0);
  auto px = xv.data();
  auto pw_ = wv.data();
  if (bias) {
    const Tensor& bv = t.value(*bias);
    if (bv.rank() != 1 || bv.extent(0) != co) throw std::invalid_argument("conv3d: bias extent");
    auto pb = bv.data();
    const std::int64_t sp = static_cast<std::int64_t>(od_) * oh_ * ow_;
    for (int b = 0; b < n; ++b) {
      for (int oc = 0; oc < co; ++oc) {
        std::fill_n(out.data() + (static_cast<std::int64_t>(b) * co + oc) * sp, sp,
                    pb[static_cast<size_t>(oc)]);
      }
    }
  }

  const std::int64_t rows = static_cast<std::int64_t>(n) * co * od_ * oh_;
#pragma omp parallel for if (rows > 4) schedule(static)
  for (std::int64_t row = 0; row < rows; ++row) {
    const int oh = static_cast<int>(row % oh_);
    const int od = static_cast<int>((row / oh_) % od_);
    const int oc = static_cast<int>((row / (static_cast<std::int64_t>(oh_) * od_)) % co);
    const int b = static_cast<int>(row / (static_cast<std::int64_t>(oh_) * od_ * co));
    const int g = oc / og;
    double* orow = out.data() + row * ow_;
    for (int icg = 0; icg < cg; ++icg) {
      const int ic = g * cg + icg;
      for (int zd = 0; zd < kd; ++zd) {
        const int id = od * sd - pd + zd;
        if (id < 0 || id >= di) continue;
        for (int zh = 0; zh < kh; ++zh) {
          const int ih = oh * sh - ph + zh;
          if (ih < 0 || ih >= hi_) continue;
          const double* xrow =
              px.data() + (((static_cast<std::int64_t>(b) * ci + ic) * di + id) * hi_ + ih) * wi;
          const double* wrow =
              pw_.data() + ((((static_cast<std::int64_t>(oc) * cg + icg) * kd + zd) * kh + zh)) * kw;
          for (int zw = 0; zw < kw; ++zw) {
            const double wval = wrow[zw];
            const int base = zw - pw;
            const auto r = mapped_range(base, sw, ow_, wi);
            const double* xp = xrow + base + static_cast<std::int64_t>(r.lo) * sw;
            for (int ow = r.lo; ow <= r.hi; ++ow, xp += sw) orow[ow] += wval * *xp;
          }
        }
      }
    }
  }

  Shape os{n, co, od_, oh_, ow_};
  Tensor y = Tensor::raw(std::move(os), std::move(out));
  std::vector<Var> ins{x, w};
  if (bias) ins.push_back(*bias);
  return t.record(y, std::span<const Var>(ins), [&]() -> BackwardFn {
    return [x, w, bias, xv, wv, n, ci, co, cg, og, di, hi_, wi, od_, oh_, ow_,
            kd, kh, kw, sd, sh, sw, pd, ph, pw](const Tensor& g_, GradSink& s) {
      auto pg = g_.data();
      auto px = xv.data();
      auto pwv = wv.data();
      if (s.needs(x)) {
        std::vector<double> dx(static_cast<size_t>(xv.size()), 0.0);
        const std::int64_t rows = static_cast<std::int64_t>(n) * ci * di * hi_;
#pragma omp parallel for if (rows > 4) schedule(static)
        for (std::int64_t row = 0; row < rows; ++row) {
          const int ih = static_cast<int>(row % hi_);
          const int id = static_cast<int>((row / hi_) % di);
          const int ic = static_cast<int>((row / (static_cast<std::int64_t>(hi_) * di)) % ci);
          const int b = static_cast<int>(row / (static_cast<std::int64_t>(hi_) * di * ci));
          const int grp = ic / cg;
          const int icg = ic % cg;
          double* dxrow = dx.data() + row * wi;
          for (int ocg = 0; ocg < og; ++ocg) {
            const int oc = grp * og + ocg;
            for (int zd = 0; zd < kd; ++zd) {
              const int od = back_map(id, pd, zd, sd, od_);
              if (od < 0) continue;
              for (int zh = 0; zh < kh; ++zh) {
                const int oh = back_map(ih, ph, zh, sh, oh_);
                if (oh < 0) continue;
                const double* grow =
                    pg.data() +
                    (((static_cast<std::int64_t>(b) * co + oc) * od_ + od) * oh_ + oh) * ow_;
                const double* wrow =
                    pwv.data() +
                    ((((static_cast<std::int64_t>(oc) * cg + icg) * kd + zd) * kh + zh)) * kw;
                for (int zw = 0; zw < kw; ++zw) {
                  const double wval = wrow[zw];
                  const int base = zw - pw;
                  const auto r = mapped_range(base, sw, ow_, wi);
                  double* dxp = dxrow + base + static_cast<std::int64_t>(r.lo) * sw;
                  for (int ow = r.lo; ow <= r.hi; ++ow, dxp += sw) *dxp += wval * grow[ow];
                }
              }
            }
          }
        }
        s.accum(x, Tensor::raw(xv.shape(), std::move(dx)));
      }
      if (s.needs(w)) {
        std::vector<double> dw(static_cast<size_t>(wv.size()), 0.0);
        const std::int64_t welems = wv.size();
#pragma omp parallel for if (welems > 8) schedule(static)
        for (std::int64_t wi_flat = 0; wi_flat < welems; ++wi_flat) {
          const int zw = static_cast<int>(wi_flat % kw);
          const int zh = static_cast<int>((wi_flat / kw) % kh);
          const int zd = static_cast<int>((wi_flat / (static_cast<std::int64_t>(kw) * kh)) % kd);
          const int icg =
              static_cast<int>((wi_flat / (static_cast<std::int64_t>(kw) * kh * kd)) % cg);
          const int oc = static_cast<int>(wi_flat / (static_cast<std::int64_t>(kw) * kh * kd * cg));
          const int ic = (oc / og) * cg + icg;
          double acc = 0.0;
          for (int b = 0; b < n; ++b) {
            for (int od = 0; od < od_; ++od) {
              const int id = od * sd - pd + zd;
              if (id < 0 || id >= di) continue;
              for (int oh = 0; oh < oh_; ++oh) {
                const int ih = oh * sh - ph + zh;
                if (ih < 0 || ih >= hi_) continue;
                const double* grow =
                    pg.data() +
                    (((static_cast<std::int64_t>(b) * co + oc) * od_ + od) * oh_ + oh) * ow_;
                const double* xrow =
                    px.data() +
                    (((static_cast<std::int64_t>(b) * ci + ic) * di + id) * hi_ + ih) * wi;
                const int base = zw - pw;
                const auto r = mapped_range(base, sw, ow_, wi);
                const double* xp = xrow + base + static_cast<std::int64_t>(r.lo) * sw;
                for (int ow = r.lo; ow <= r.hi; ++ow, xp += sw) acc += grow[ow] * *xp;
              }
            }
          }
          dw[static_cast<size_t>(wi_flat)] = acc;
        }
        s.accum(w, Tensor::raw(wv.shape(), std::move(dw)));
      }
      if (bias && s.needs(*bias)) {
        std::vector<double> db(static_cast<size_t>(co), 0.0);
        const std::int64_t sp = static_cast<std::int64_t>(od_) * oh_ * ow_;
#pragma omp parallel for if (co > 4) schedule(static)
        for (int oc = 0; oc < co; ++oc) {
          double acc = 0.0;
          for (int b = 0; b < n; ++b) {
            const double* grow = pg.data() + (static_cast<std::int64_t>(b) * co + oc) * sp;
            for (std::int64_t i = 0; i < sp; ++i) acc += grow[i];
          }
          db[static_cast<size_t>(oc)] = acc;
        }
        s.accum(*bias, Tensor::raw({co}, std::move(db)));
      }
    };
  });
}

Var conv_transpose3d(Tape& t, Var x, Var w, std::optional<Var> bias, const Conv3dSpec& spec) {
  spec.validate();
  if (spec.groups != 1) throw std::invalid_argument("conv_transpose3d: groups must be 1");
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  if (xv.rank() != 5) throw std::invalid_argument("conv_transpose3d: expected [N,C,D,H,W]");
  const int n = xv.extent(0), ci = xv.extent(1);
  const int di = xv.extent(2), hi_ = xv.extent(3), wi = xv.extent(4);
  const int co = spec.out_channels;
  if (ci != spec.in_channels) {
    throw std::invalid_argument("conv_transpose3d: input has " + std::to_string(ci) +
                                " channels, spec says " + std::to_string(spec.in_channels));
  }
  const Shape want_w{ci, co, spec.kernel[0], spec.kernel[1], spec.kernel[2]};
  if (!shapes_equal(wv.shape(), want_w)) {
    throw std::invalid_argument("conv_transpose3d: weight " + shape_str(wv.shape()) +
                                ", expected " + shape_str(want_w));
  }
  const auto oe = spec.out_extents_transposed({di, hi_, wi});
  const int od_ = oe[0], oh_ = oe[1], ow_ = oe[2];
  const int kd = spec.kernel[0], kh = spec.kernel[1], kw = spec.kernel[2];
  const int sd = spec.stride[0], sh = spec.stride[1], sw = spec.stride[2];
  const int pd = spec.pad[0], ph = spec.pad[1], pw = spec.pad[2];

  std::vector<double> out(static_cast<size_t>(n) * co * od_ * oh_ * ow_, 0.0);
  auto px = xv.data();
  auto pwv = wv.data();
  if (bias) {
    const Tensor& bv = t.value(*bias);
    if (bv.rank() != 1 || bv.extent(0) != co) {
      throw std::invalid_argument("conv_transpose3d: bias extent");
    }
    auto pb = bv.data();
    const std::int64_t sp = static_cast<std::int64_t>(od_) * oh_ * ow_;
    for (int b = 0; b < n; ++b) {
      for (int oc = 0; oc < co; ++oc) {
        std::fill_n(out.data() + (static_cast<std::int64_t>(b) * co + oc) * sp, sp,
                    pb[static_cast<size_t>(oc)]);
      }
    }
  }

  const std::int64_t rows = static_cast<std::int64_t>(n) * co * od_ * oh_;
#pragma omp parallel for if (rows > 4) schedule(static)
  for (std::int64_t row = 0; row < rows; ++row) {
    const int oh = static_cast<int>(row % oh_);
    const int od = static_cast<int>((row / oh_) % od_);
    const int oc = static_cast<int>((row / (static_cast<std::int64_t>(oh_) * od_)) % co);
    const int b = static_cast<int>(row / (static_cast<std::int64_t>(oh_) * od_ * co));
    double* orow = out.data() + row * ow_;
    for (int ic = 0; ic < ci; ++ic) {
      for (int zd = 0; zd < kd; ++zd) {
        const int id = back_map(od, pd, zd, sd, di);
        if (id < 0) continue;
        for (int zh = 0; zh < kh; ++zh) {
          const int ih = back_map(oh, ph, zh, sh, hi_);
          if (ih < 0) continue;
          const double* xrow =
              px.data() + (((static_cast<std::int64_t>(b) * ci + ic) * di + id) * hi_ + ih) * wi;
          const double* wrow =
              pwv.data() +
              ((((static_cast<std::int64_t>(ic) * co + oc) * kd + zd) * kh + zh)) * kw;
          for (int zw = 0; zw < kw; ++zw) {
            const double wval = wrow[zw];
            // ow = base + iw*sw, iw in range
            const int base = zw - pw;
            const auto r = mapped_range(base, sw, wi, ow_);
            double* op = orow + base + static_cast<std::int64_t>(r.lo) * sw;
            const double* xp = xrow + r.lo;
            for (int iw = r.lo; iw <= r.hi; ++iw, op += sw, ++xp) *op += wval * *xp;
          }
        }
      }
    }
  }

  Shape os{n, co, od_, oh_, ow_};
  Tensor y = Tensor::raw(std::move(os), std::move(out));
  std::vector<Var> ins{x, w};
  if (bias) ins.push_back(*bias);
  return t.record(y, std::span<const Var>(ins), [&]() -> BackwardFn {
    return [x, w, bias, xv, wv, n, ci, co, di, hi_, wi, od_, oh_, ow_, kd, kh, kw, sd, sh, sw,
            pd, ph, pw](const Tensor& g_, GradSink& s) {
      auto pg = g_.data();
      auto px = xv.data();
      auto pwv = wv.data();
      if (s.needs(x)) {
        // forward-conv style gather: dx[id] = sum_k g[od = id*s - p + k] * w
        std::vector<double> dx(static_cast<size_t>(xv.size()), 0.0);
        const std::int64_t rows = static_cast<std::int64_t>(n) * ci * di * hi_;
#pragma omp parallel for if (rows > 4) schedule(static)
        for (std::int64_t row = 0; row < rows; ++row) {
          const int ih = static_cast<int>(row % hi_);
          const int id = static_cast<int>((row / hi_) % di);
          const int ic = static_cast<int>((row / (static_cast<std::int64_t>(hi_) * di)) % ci);
          const int b = static_cast<int>(row / (static_cast<std::int64_t>(hi_) * di * ci));
          double* dxrow = dx.data() + row * wi;
          for (int oc = 0; oc < co; ++oc) {
            for (int zd = 0; zd < kd; ++zd) {
              const int od = id * sd - pd + zd;
              if (od < 0 || od >= od_) continue;
              for (int zh = 0; zh < kh; ++zh) {
                const int oh = ih * sh - ph + zh;
                if (oh < 0 || oh >= oh_) continue;
                const double* grow =
                    pg.data() +
                    (((static_cast<std::int64_t>(b) * co + oc) * od_ + od) * oh_ + oh) * ow_;
                const double* wrow =
                    pwv.data() +
                    ((((static_cast<std::int64_t>(ic) * co + oc) * kd + zd) * kh + zh)) * kw;
                for (int zw = 0; zw < kw; ++zw) {
                  const double wval = wrow[zw];
                  const int base = zw - pw;
                  const auto r = mapped_range(base, sw, wi, ow_);
                  const double* gp = grow + base + static_cast<std::int64_t>(r.lo) * sw;
                  for (int iw = r.lo; iw <= r.hi; ++iw, gp += sw) dxrow[iw] += wval * *gp;
                }
              }
            }
          }
        }
        s.accum(x, Tensor::raw(xv.shape(), std::move(dx)));
      }
      if (s.needs(w)) {
        std::vector<double> dw(static_cast<size_t>(wv.size()), 0.0);
        const std::int64_t welems = wv.size();
#pragma omp parallel for if (welems > 8) schedule(static)
        for (std::int64_t wflat = 0; wflat < welems; ++wflat) {
          const int zw = static_cast<int>(wflat % kw);
          const int zh = static_cast<int>((wflat / kw) % kh);
          const int zd = static_cast<int>((wflat / (static_cast<std::int64_t>(kw) * kh)) % kd);
          const int oc = static_cast<int>((wflat / (static_cast<std::int64_t>(kw) * kh * kd)) % co);
          const int ic = static_cast<int>(wflat / (static_cast<std::int64_t>(kw) * kh * kd * co));
          double acc = 0.0;
          for (int b = 0; b < n; ++b) {
            for (int id = 0; id < di; ++id) {
              const int od = id * sd - pd + zd;
              if (od < 0 || od >= od_) continue;
              for (int ih = 0; ih < hi_; ++ih) {
                const int oh = ih * sh - ph + zh;
                if (oh < 0 || oh >= oh_) continue;
                const double* xrow =
                    px.data() +
                    (((static_cast<std::int64_t>(b) * ci + ic) * di + id) * hi_ + ih) * wi;
                const double* grow =
                    pg.data() +
                    (((static_cast<std::int64_t>(b) * co + oc) * od_ + od) * oh_ + oh) * ow_;
                const int base = zw - pw;
                const auto r = mapped_range(base, sw, wi, ow_);
                const double* gp = grow + base + static_cast<std::int64_t>(r.lo) * sw;
                const double* xp = xrow + r.lo;
                for (int iw = r.lo; iw <= r.hi; ++iw, gp += sw, ++xp) acc += *gp * *xp;
              }
            }
          }
          dw[static_cast<size_t>(wflat)] = acc;
        }
        s.accum(w, Tensor::raw(wv.shape(), std::move(dw)));
      }
      if (bias && s.needs(*bias)) {
        std::vector<double> db(static_cast<size_t>(co), 0.0);
        const std::int64_t sp = static_cast<std::int64_t>(od_) * oh_ * ow_;
#pragma omp parallel for if (co > 4) schedule(static)
        for (int oc = 0; oc < co; ++oc) {
          double acc = 0.0;
          for (int b = 0; b < n; ++b) {
            const double* grow = pg.data() + (static_cast<std::int64_t>(b) * co + oc) * sp;
            for (std::int64_t i = 0; i < sp; ++i) acc += grow[i];
          }
          db[static_cast<size_t>(oc)] = acc;
        }
        s.accum(*bias, Tensor::raw({co}, std::move(db)));
      }
    };
  });
}

Var dwconv1d_seq(Tape& t, Var x, Var w) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  if (xv.rank() != 3) throw std::invalid_argument("dwconv1d_seq: expected [N,L,C]");
  if (wv.rank() != 2) throw std::invalid_argument("dwconv1d_seq: expected weight [C,K]");
  const int n = xv.extent(0), l = xv.extent(1), c = xv.extent(2);
  const int k = wv.extent(1);
  if (wv.extent(0) != c) {
    throw std::invalid_argument("dwconv1d_seq: weight rows " + std::to_string(wv.extent(0)) +
                                " != channels " + std::to_string(c));
  }
  // transpose weights so tap rows are contiguous over channels
  std::vector<double> wt(static_cast<size_t>(k) * c);
  {
    auto pwv = wv.data();
    for (int ch = 0; ch < c; ++ch) {
      for (int z = 0; z < k; ++z) {
        wt[static_cast<size_t>(z) * c + ch] = pwv[static_cast<size_t>(ch) * k + z];
      }
    }
  }
  std::vector<double> out(static_cast<size_t>(xv.size()), 0.0);
  auto px = xv.data();
  const std::int64_t rows = static_cast<std::int64_t>(n) * l;
#pragma omp parallel for if (rows > 16) schedule(static)
  for (std::int64_t row = 0; row < rows; ++row) {
    const int li = static_cast<int>(row % l);
    double* orow = out.data() + row * c;
    for (int shift = 0; shift < k && shift <= li; ++shift) {
      const double* xrow = px.data() + (row - shift) * c;
      const double* wrow = wt.data() + static_cast<std::int64_t>(k - 1 - shift) * c;
      for (int ch = 0; ch < c; ++ch) orow[ch] += wrow[ch] * xrow[ch];
    }
  }
  Tensor y = Tensor::raw(xv.shape(), std::move(out));
  return t.record(y, {x, w}, [&]() -> BackwardFn {
    return [x, w, xv, wv, n, l, c, k, wt = std::move(wt)](const Tensor& g_, GradSink& s) {
      auto pg = g_.data();
      auto px = xv.data();
      if (s.needs(x)) {
        std::vector<double> dx(static_cast<size_t>(xv.size()), 0.0);
        const std::int64_t rows = static_cast<std::int64_t>(n) * l;
#pragma omp parallel for if (rows > 16) schedule(static)
        for (std::int64_t row = 0; row < rows; ++row) {
          const int li = static_cast<int>(row % l);
          double* dxrow = dx.data() + row * c;
          for (int shift = 0; shift < k && li + shift < l; ++shift) {
            const double* grow = pg.data() + (row + shift) * c;
            const double* wrow = wt.data() + static_cast<std::int64_t>(k - 1 - shift) * c;
            for (int ch = 0; ch < c; ++ch) dxrow[ch] += wrow[ch] * grow[ch];
          }
        }
        s.accum(x, Tensor::raw(xv.shape(), std::move(dx)));
      }
      if (s.needs(w)) {
        std::vector<double> dw(static_cast<size_t>(wv.size()), 0.0);
#pragma omp parallel for if (c > 8) schedule(static)
        for (int ch = 0; ch < c; ++ch) {
          double* dwrow = dw.data() + static_cast<std::int64_t>(ch) * k;
          for (int b = 0; b < n; ++b) {
            const double* gb = pg.data() + static_cast<std::int64_t>(b) * l * c + ch;
            const double* xb = px.data() + static_cast<std::int64_t>(b) * l * c + ch;
            for (int z = 0; z < k; ++z) {
              const int shift = k - 1 - z;
              double acc = 0.0;
              for (int li = shift; li < l; ++li) {
                acc += gb[static_cast<std::int64_t>(li) * c] *
                       xb[static_cast<std::int64_t>(li - shift) * c];
              }
              dwrow[z] += acc;
            }
          }
        }
        s.accum(w, Tensor::raw(wv.shape(), std::move(dw)));
      }
    };
  });
}

}  // namespace gmseg
