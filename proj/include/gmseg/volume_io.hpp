#pragma once

#include <string>
#include <vector>

#include "gmseg/synth.hpp"

namespace gmseg {

// Sample container: two consecutive records in one file.
//   record := magic "MCVX" | u16 version | u8 dtype (0 = f64 image, 1 = u8
//             labels) | u8 rank | rank x u32 extents | 3 x f64 spacing | raw
//             little-endian payload
// Record 1 is the [C,D,H,W] image, record 2 the [D,H,W] labels. Bit-exact.
inline constexpr std::uint16_t kVolumeFormatVersion = 1;

void write_volume(const std::string& path, const VolumeSample& sample);
VolumeSample read_volume(const std::string& path);

// All *.mcvx files under dir, sorted by filename.
std::vector<VolumeSample> read_volume_dir(const std::string& dir);

}  // namespace gmseg
