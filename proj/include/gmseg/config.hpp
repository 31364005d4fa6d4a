#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace gmseg {

// "key = value" lines; '#' starts a comment; insertion order preserved so
// serialization is canonical.
class KvConfig {
 public:
  void set(const std::string& key, std::string value);
  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;  // throws on missing key
  std::optional<std::string> maybe(const std::string& key) const;

  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<int> get_int_list(const std::string& key) const;       // "1,2,3"
  std::array<int, 3> get_triple(const std::string& key) const;       // "2x2x2"
  std::vector<std::array<int, 3>> get_triples(const std::string& key) const;

  std::string serialize() const;
  static KvConfig parse(const std::string& text);
  static KvConfig load(const std::string& path);
  void save(const std::string& path) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

std::vector<std::string> split(const std::string& s, char sep);
std::string format_double(double v);  // shortest round-trip decimal

}  // namespace gmseg
