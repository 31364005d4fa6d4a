#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "gmseg/scan.hpp"
#include "gmseg/tape.hpp"
#include "gmseg/tensor.hpp"

namespace gmseg {

struct Param {
  std::string name;
  Tensor value;
  bool trainable = true;
};

// Owns all named parameters of a network in registration order.
class ParamRegistry {
 public:
  Param* add(std::string name, Tensor init, bool trainable = true);
  Param* find(const std::string& name);
  const Param* find(const std::string& name) const;
  const std::vector<std::unique_ptr<Param>>& items() const { return items_; }
  std::int64_t trainable_count() const;

 private:
  std::vector<std::unique_ptr<Param>> items_;
  std::unordered_map<std::string, size_t> index_;
};

// Per-forward state: binds parameters to tape leaves exactly once each.
struct Ctx {
  explicit Ctx(Tape& t) : tape(t) {}
  Tape& tape;
  bool training = false;
  ScanMode scan_mode = ScanMode::parallel;

  Var use(Param* p);
  // Leaf bound to p during this forward; invalid Var when p was never used.
  Var bound(const Param* p) const;

 private:
  std::unordered_map<Param*, Var> bound_;
};

}  // namespace gmseg
