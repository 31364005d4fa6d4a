#include "gmseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace gmseg {

static_assert(std::endian::native == std::endian::little,
              "checkpoints are little-endian; big-endian hosts are unsupported");

namespace {

[[noreturn]] void fail(const std::string& path, std::uint64_t offset, const std::string& what) {
  throw std::runtime_error(path + ": format error at byte " + std::to_string(offset) + ": " + what);
}

class Reader {
 public:
  Reader(const std::string& path, std::istream& in) : path_(path), in_(in) {}
  std::uint64_t offset() const { return off_; }
  void bytes(void* dst, size_t n, const char* what) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in_.gcount()) != n) {
      fail(path_, off_ + static_cast<std::uint64_t>(std::max<std::streamsize>(in_.gcount(), 0)),
           std::string("truncated ") + what);
    }
    off_ += n;
  }
  template <typename T>
  T scalar(const char* what) {
    T v;
    bytes(&v, sizeof(T), what);
    return v;
  }
  bool at_eof() { return in_.peek() == std::char_traits<char>::eof(); }
  [[noreturn]] void reject(const std::string& what) { fail(path_, off_, what); }
  [[noreturn]] void reject_at(std::uint64_t off, const std::string& what) {
    fail(path_, off, what);
  }

 private:
  const std::string& path_;
  std::istream& in_;
  std::uint64_t off_ = 0;
};

void write_record(std::ostream& out, const std::string& name, const Tensor& t) {
  const auto nlen = static_cast<std::uint16_t>(name.size());
  out.write(reinterpret_cast<const char*>(&nlen), sizeof(nlen));
  out.write(name.data(), nlen);
  const auto rank = static_cast<std::uint8_t>(t.rank());
  out.write(reinterpret_cast<const char*>(&rank), 1);
  for (int e : t.shape()) {
    const auto u = static_cast<std::uint32_t>(e);
    out.write(reinterpret_cast<const char*>(&u), sizeof(u));
  }
  out.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(t.size())));
}

std::pair<std::string, Tensor> read_record(Reader& r) {
  const auto nlen = r.scalar<std::uint16_t>("record name length");
  std::string name(nlen, '\0');
  r.bytes(name.data(), nlen, "record name");
  const auto rank = r.scalar<std::uint8_t>("record rank");
  if (rank > 8) r.reject("record rank " + std::to_string(rank));
  Shape shape;
  std::int64_t numel = 1;
  for (int a = 0; a < rank; ++a) {
    const std::uint64_t off = r.offset();
    const auto e = r.scalar<std::uint32_t>("record extent");
    if (e == 0 || e > (1u << 24)) r.reject_at(off, "record extent " + std::to_string(e));
    shape.push_back(static_cast<int>(e));
    numel *= e;
  }
  std::vector<double> payload(static_cast<size_t>(numel));
  r.bytes(payload.data(), sizeof(double) * static_cast<size_t>(numel), "record payload");
  return {std::move(name), Tensor::raw(std::move(shape), std::move(payload))};
}

void write_named(std::ostream& out, const std::vector<std::pair<std::string, Tensor>>& v) {
  const auto n = static_cast<std::uint32_t>(v.size());
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  for (const auto& [name, t] : v) write_record(out, name, t);
}

std::vector<std::pair<std::string, Tensor>> read_named(Reader& r, const char* what) {
  const auto n = r.scalar<std::uint32_t>(what);
  if (n > (1u << 20)) r.reject(std::string("implausible record count for ") + what);
  std::vector<std::pair<std::string, Tensor>> v;
  v.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) v.push_back(read_record(r));
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out.write("MCKP", 4);
  const std::uint16_t ver = kCheckpointFormatVersion;
  out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  const auto plen = static_cast<std::uint32_t>(c.plan_text.size());
  out.write(reinterpret_cast<const char*>(&plen), sizeof(plen));
  out.write(c.plan_text.data(), plen);
  const auto ic = static_cast<std::uint32_t>(c.in_channels);
  const auto cc = static_cast<std::uint32_t>(c.class_count);
  out.write(reinterpret_cast<const char*>(&ic), sizeof(ic));
  out.write(reinterpret_cast<const char*>(&cc), sizeof(cc));
  write_named(out, c.params);
  write_named(out, c.opt_state);
  out.write(reinterpret_cast<const char*>(&c.step), sizeof(c.step));
  if (!out) throw std::runtime_error(path + ": write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open");
  Reader r(path, in);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, "MCKP", 4) != 0) fail(path, 0, "bad magic");
  const std::uint64_t ver_off = r.offset();
  const auto ver = r.scalar<std::uint16_t>("version");
  if (ver != kCheckpointFormatVersion) {
    fail(path, ver_off, "unsupported version " + std::to_string(ver));
  }
  const auto plen = r.scalar<std::uint32_t>("plan length");
  if (plen > (1u << 20)) r.reject("implausible plan length");
  Checkpoint c;
  c.plan_text.resize(plen);
  r.bytes(c.plan_text.data(), plen, "plan text");
  c.in_channels = static_cast<int>(r.scalar<std::uint32_t>("in_channels"));
  c.class_count = static_cast<int>(r.scalar<std::uint32_t>("class_count"));
  c.params = read_named(r, "parameter count");
  c.opt_state = read_named(r, "optimizer record count");
  c.step = r.scalar<std::uint64_t>("step");
  if (!r.at_eof()) r.reject("trailing bytes after step counter");
  return c;
}

Checkpoint snapshot(const Network& net, std::uint64_t step) {
  Checkpoint c;
  c.plan_text = net.plan.serialize();
  c.in_channels = net.in_channels;
  c.class_count = net.class_count;
  for (const auto& p : net.params.items()) c.params.emplace_back(p->name, p->value);
  c.step = step;
  return c;
}

void restore_params(Network& net, const Checkpoint& c) {
  const auto& items = net.params.items();
  if (items.size() != c.params.size()) {
    throw std::runtime_error("restore_params: checkpoint has " + std::to_string(c.params.size()) +
                             " parameters, network has " + std::to_string(items.size()));
  }
  for (const auto& [name, value] : c.params) {
    Param* p = net.params.find(name);
    if (p == nullptr) throw std::runtime_error("restore_params: unknown parameter '" + name + "'");
    if (!shapes_equal(p->value.shape(), value.shape())) {
      throw std::runtime_error("restore_params: shape mismatch for '" + name + "': " +
                               shape_str(value.shape()) + " vs " + shape_str(p->value.shape()));
    }
    p->value = value;
  }
}

std::unique_ptr<Network> network_from_checkpoint(const Checkpoint& c) {
  NetworkPlan plan = NetworkPlan::parse_text(c.plan_text);
  auto net = build(plan, c.in_channels, c.class_count, /*seed=*/0);
  restore_params(*net, c);
  return net;
}

}  // namespace gmseg
