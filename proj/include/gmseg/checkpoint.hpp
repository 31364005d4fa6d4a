#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "gmseg/net.hpp"

namespace gmseg {

// On-disk layout, all little-endian:
//   magic "MCKP" | u16 version | u32 plan length + plan text |
//   u32 in_channels | u32 class_count |
//   u32 count + parameter records | u32 count + optimizer records | u64 step
// A record is u16 name length + name, u8 rank, rank x u32 extents, f64 payload.
// Round trips are bit-exact.
inline constexpr std::uint16_t kCheckpointFormatVersion = 1;

struct Checkpoint {
  std::string plan_text;
  int in_channels = 0;
  int class_count = 0;
  std::vector<std::pair<std::string, Tensor>> params;
  std::vector<std::pair<std::string, Tensor>> opt_state;
  std::uint64_t step = 0;
};

void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

// Capture every registered parameter (trainable or not) in registry order.
Checkpoint snapshot(const Network& net, std::uint64_t step);
// Copy parameter values back by name; missing/extra/reshaped names are errors.
void restore_params(Network& net, const Checkpoint& c);
// Rebuild the network a checkpoint was saved from and restore its parameters.
std::unique_ptr<Network> network_from_checkpoint(const Checkpoint& c);

}  // namespace gmseg
