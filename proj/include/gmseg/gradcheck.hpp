#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace gmseg {

enum class GradScope { op, block, network };

struct GradCheckItem {
  std::string group;
  double max_rel = 0.0;
  double max_abs = 0.0;
  double rtol = 1e-4;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckItem> items;
  bool all_pass = true;

  std::string csv() const;  // "group,max_rel,max_abs,rtol,pass"
};

// Reverse-mode vs central finite differences (h = 1e-5, atol 1e-7). Ops and
// blocks at rtol 1e-4, losses at 1e-5. Large parameter tensors are probed at a
// seeded coordinate subset; small ones exhaustively.
GradCheckReport run_gradcheck(GradScope scope, std::uint64_t seed);

}  // namespace gmseg
