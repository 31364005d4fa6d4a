#include "gmseg/bench.hpp"

#include <chrono>
#include <cmath>

#include "gmseg/blocks.hpp"
#include "gmseg/config.hpp"
#include "gmseg/scan.hpp"

namespace gmseg {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

double hgconv_flops(int cw, int order, std::int64_t voxels) {
  const std::vector<int> part = channel_partition(cw, order);
  const double v = static_cast<double>(voxels);
  double f = 2.0 * cw * (2.0 * cw) * v;  // pointwise lift C' -> 2C'
  f += 2.0 * 27.0 * (2.0 * cw) * v;      // depthwise 3^3 over 2C'
  // recursion: U_{j+1} = V_j (+|*) Phi_j(U_j) * gate
  for (int j = 0; j + 1 < order; ++j) {
    const double cj = part[static_cast<size_t>(j) + 1];      // width of U_j
    const double cj1 = part[static_cast<size_t>(j) + 2];     // width of U_{j+1}
    f += 2.0 * cj * cj1 * v;  // Phi_j pointwise
    f += 3.0 * cj1 * v;       // gate scale + combine
  }
  return f;
}

BenchReport bench_scan(std::span<const int> lengths, int channels, int state, int reps,
                       std::uint64_t seed) {
  BenchReport rep;
  rep.csv = "kind,L,C,N,mode,seconds,elements_per_s,max_abs_diff\n";
  Rng rng(seed);
  for (int len : lengths) {
    Tensor delta = rng.uniform_tensor({len, channels}, 0.05, 0.5);
    Tensor a = rng.uniform_tensor({channels, state}, -1.5, -0.1);
    Tensor b = rng.normal_tensor({len, state}, 0.0, 1.0);
    Tensor x = rng.normal_tensor({len, channels}, 0.0, 1.0);
    Tensor cout = rng.normal_tensor({len, state}, 0.0, 1.0);
    Tensor d = rng.normal_tensor({channels}, 0.0, 0.3);
    Tensor abar, bbar;
    discretize(delta, a, b, &abar, &bbar);

    Tensor ys = scan_sequential(x, abar, bbar, cout, d);  // warmup + reference
    Tensor yp = scan_parallel(x, abar, bbar, cout, d);
    double diff = 0.0;
    for (std::int64_t i = 0; i < ys.size(); ++i) {
      diff = std::max(diff, std::abs(ys.data()[static_cast<size_t>(i)] -
                                     yp.data()[static_cast<size_t>(i)]));
    }
    rep.correctness_ok = rep.correctness_ok && diff <= 1e-10;

    const double elems =
        static_cast<double>(len) * channels * state * static_cast<double>(reps);
    auto t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < reps; ++r) ys = scan_sequential(x, abar, bbar, cout, d);
    const double ts = seconds_since(t0);
    t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < reps; ++r) yp = scan_parallel(x, abar, bbar, cout, d);
    const double tp = seconds_since(t0);

    auto row = [&](const char* mode, double secs) {
      rep.csv += std::string("scan,") + std::to_string(len) + "," + std::to_string(channels) +
                 "," + std::to_string(state) + "," + mode + "," + format_double(secs) + "," +
                 format_double(secs > 0.0 ? elems / secs : 0.0) + "," + format_double(diff) + "\n";
    };
    row("sequential", ts);
    row("parallel", tp);
  }
  return rep;
}

BenchReport bench_hgconv(int c_stage, std::array<int, 3> extents, int reps, std::uint64_t seed) {
  BenchReport rep;
  rep.csv = "kind,order,cw,voxels,seconds,voxels_per_s,flops_est\n";
  const std::int64_t voxels =
      static_cast<std::int64_t>(extents[0]) * extents[1] * extents[2];
  for (int order = 2; order <= 6; ++order) {
    ParamRegistry reg;
    Rng rng(seed + static_cast<std::uint64_t>(order));
    const int cw = hgcn_working_channels(c_stage, order);
    HgConv hg = HgConv::make(reg, rng, "hg", cw, order, 1.0 / order, false);
    Tensor x = rng.normal_tensor({1, cw, extents[0], extents[1], extents[2]}, 0.0, 1.0);

    {
      Tape warm(false);
      Ctx cx(warm);
      (void)hg.forward(cx, warm.leaf(x, false));
    }
    auto t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < reps; ++r) {
      Tape tape(false);
      Ctx cx(tape);
      (void)hg.forward(cx, tape.leaf(x, false));
    }
    const double secs = seconds_since(t0);
    const double vox = static_cast<double>(voxels) * reps;
    rep.csv += "hgconv," + std::to_string(order) + "," + std::to_string(cw) + "," +
               std::to_string(voxels) + "," + format_double(secs) + "," +
               format_double(secs > 0.0 ? vox / secs : 0.0) + "," +
               format_double(hgconv_flops(cw, order, voxels)) + "\n";
  }
  return rep;
}

}  // namespace gmseg
