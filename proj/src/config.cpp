#include "gmseg/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace gmseg {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw std::runtime_error("config: cannot format double");
  return std::string(buf, end);
}

void KvConfig::set(const std::string& key, std::string value) {
  for (auto& [k, v] : entries_) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  entries_.emplace_back(key, std::move(value));
}

bool KvConfig::has(const std::string& key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return true;
  }
  return false;
}

const std::string& KvConfig::get(const std::string& key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return v;
  }
  throw std::invalid_argument("config: missing key '" + key + "'");
}

std::optional<std::string> KvConfig::maybe(const std::string& key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return v;
  }
  return std::nullopt;
}

int KvConfig::get_int(const std::string& key) const {
  const std::string& v = get(key);
  size_t pos = 0;
  int out = std::stoi(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("config: bad integer for '" + key + "': " + v);
  return out;
}

double KvConfig::get_double(const std::string& key) const {
  const std::string& v = get(key);
  size_t pos = 0;
  double out = std::stod(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("config: bad number for '" + key + "': " + v);
  return out;
}

bool KvConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: bad boolean for '" + key + "': " + v);
}

std::vector<int> KvConfig::get_int_list(const std::string& key) const {
  std::vector<int> out;
  for (const auto& part : split(get(key), ',')) {
    const std::string p = trim(part);
    size_t pos = 0;
    out.push_back(std::stoi(p, &pos));
    if (pos != p.size()) throw std::invalid_argument("config: bad list entry for '" + key + "'");
  }
  return out;
}

std::array<int, 3> KvConfig::get_triple(const std::string& key) const {
  auto parts = split(get(key), 'x');
  if (parts.size() != 3) {
    throw std::invalid_argument("config: '" + key + "' must be AxBxC, got " + get(key));
  }
  std::array<int, 3> out{};
  for (size_t i = 0; i < 3; ++i) out[i] = std::stoi(trim(parts[i]));
  return out;
}

std::vector<std::array<int, 3>> KvConfig::get_triples(const std::string& key) const {
  std::vector<std::array<int, 3>> out;
  for (const auto& part : split(get(key), ',')) {
    auto sub = split(trim(part), 'x');
    if (sub.size() != 3) {
      throw std::invalid_argument("config: '" + key + "' entries must be AxBxC");
    }
    std::array<int, 3> tr{};
    for (size_t i = 0; i < 3; ++i) tr[i] = std::stoi(trim(sub[i]));
    out.push_back(tr);
  }
  return out;
}

std::string KvConfig::serialize() const {
  std::ostringstream os;
  for (const auto& [k, v] : entries_) os << k << " = " << v << "\n";
  return os.str();
}

KvConfig KvConfig::parse(const std::string& text) {
  KvConfig cfg;
  int lineno = 0;
  for (const auto& rawline : split(text, '\n')) {
    ++lineno;
    std::string line = rawline;
    if (auto hash = line.find('#'); hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config: line " + std::to_string(lineno) + " has no '='");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw std::invalid_argument("config: line " + std::to_string(lineno) + " has empty key");
    }
    cfg.set(key, std::move(value));
  }
  return cfg;
}

KvConfig KvConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void KvConfig::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("config: cannot write " + path);
  out << serialize();
}

}  // namespace gmseg
