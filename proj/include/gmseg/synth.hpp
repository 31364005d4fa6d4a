#pragma once

#include <array>
#include <string>
#include <vector>

#include "gmseg/config.hpp"
#include "gmseg/ops.hpp"
#include "gmseg/tensor.hpp"

namespace gmseg {

struct VolumeSample {
  Tensor image;        // [C_in, D, H, W]
  ByteVolume labels;   // [D, H, W]
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::string id;
};

// Labeled ellipsoidal blobs on a noisy background, with the foreground/total
// voxel ratio (T/W) held inside a requested band by rejection resampling.
struct SynthSpec {
  std::array<int, 3> extents{24, 24, 24};  // D,H,W
  int channels = 1;
  int class_count = 2;
  int blobs_min = 1, blobs_max = 3;
  double radius_min = 2.0, radius_max = 6.0;
  double tw_min = 0.005, tw_max = 0.25;
  double contrast = 2.0;  // mean intensity lift of foreground voxels
  double noise = 0.25;    // background noise sigma
  std::uint64_t seed = 1;
  int max_retries = 64;

  void validate() const;
  static SynthSpec from_config(const KvConfig& cfg);  // keys match field names
  KvConfig to_config() const;
};

std::vector<VolumeSample> synth_generate(const SynthSpec& spec, int count);

// Foreground voxels over total voxels.
double tw_ratio(const ByteVolume& labels);

}  // namespace gmseg
