#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>

namespace gmseg {

// Analytic FLOP estimate (multiply + add counted separately) for one hgconv
// forward at working width cw and the given order over that many voxels.
double hgconv_flops(int cw, int order, std::int64_t voxels);

struct BenchReport {
  std::string csv;
  bool correctness_ok = true;  // dual-path agreement re-asserted during timing
};

// CSV: kind,L,C,N,mode,seconds,elements_per_s,max_abs_diff
BenchReport bench_scan(std::span<const int> lengths, int channels, int state, int reps,
                       std::uint64_t seed);

// CSV: kind,order,cw,voxels,seconds,voxels_per_s,flops_est   (orders 2..6)
BenchReport bench_hgconv(int c_stage, std::array<int, 3> extents, int reps, std::uint64_t seed);

}  // namespace gmseg
