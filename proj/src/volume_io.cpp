#include "gmseg/volume_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace gmseg {

static_assert(std::endian::native == std::endian::little,
              "volume files are little-endian; big-endian hosts are unsupported");

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
  bool at_eof() {
    return in_.peek() == std::char_traits<char>::eof();
  }
  [[noreturn]] void reject(const std::string& what) { fail(path_, off_, what); }

 private:
  const std::string& path_;
  std::istream& in_;
  std::uint64_t off_ = 0;
};

struct Record {
  std::uint8_t dtype = 0;
  Shape extents;
  std::array<double, 3> spacing{};
  std::vector<double> f64;
  std::vector<std::uint8_t> u8;
};

void write_record(std::ostream& out, std::uint8_t dtype, const Shape& extents,
                  const std::array<double, 3>& spacing, const void* payload, size_t bytes) {
  out.write("MCVX", 4);
  const std::uint16_t ver = kVolumeFormatVersion;
  out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  out.write(reinterpret_cast<const char*>(&dtype), 1);
  const auto rank = static_cast<std::uint8_t>(extents.size());
  out.write(reinterpret_cast<const char*>(&rank), 1);
  for (int e : extents) {
    const auto u = static_cast<std::uint32_t>(e);
    out.write(reinterpret_cast<const char*>(&u), sizeof(u));
  }
  out.write(reinterpret_cast<const char*>(spacing.data()), sizeof(double) * 3);
  out.write(static_cast<const char*>(payload), static_cast<std::streamsize>(bytes));
}

}  // namespace

void write_volume(const std::string& path, const VolumeSample& sample) {
  if (sample.image.rank() != 4) {
    throw std::invalid_argument("write_volume: image must be [C,D,H,W]");
  }
  if (sample.labels.shape.size() != 3 ||
      sample.image.extent(1) != sample.labels.shape[0] ||
      sample.image.extent(2) != sample.labels.shape[1] ||
      sample.image.extent(3) != sample.labels.shape[2]) {
    throw std::invalid_argument("write_volume: image/label spatial extents differ");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  write_record(out, 0, sample.image.shape(), sample.spacing, sample.image.data().data(),
               sizeof(double) * static_cast<size_t>(sample.image.size()));
  write_record(out, 1, sample.labels.shape, sample.spacing, sample.labels.data.data(),
               sample.labels.data.size());
  if (!out) throw std::runtime_error(path + ": write failed");
}

namespace {

Record parse_record(const std::string& path, Reader& r, std::uint8_t expect_dtype,
                    std::uint8_t expect_rank) {
  char magic[4];
  const std::uint64_t magic_off = r.offset();
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, "MCVX", 4) != 0) fail(path, magic_off, "bad magic");
  const std::uint64_t ver_off = r.offset();
  const auto ver = r.scalar<std::uint16_t>("version");
  if (ver != kVolumeFormatVersion) {
    fail(path, ver_off, "unsupported version " + std::to_string(ver));
  }
  Record rec;
  const std::uint64_t dtype_off = r.offset();
  rec.dtype = r.scalar<std::uint8_t>("dtype");
  if (rec.dtype != expect_dtype) {
    fail(path, dtype_off, "dtype " + std::to_string(rec.dtype) + ", expected " +
                              std::to_string(expect_dtype));
  }
  const std::uint64_t rank_off = r.offset();
  const auto rank = r.scalar<std::uint8_t>("rank");
  if (rank != expect_rank) {
    fail(path, rank_off, "rank " + std::to_string(rank) + ", expected " +
                             std::to_string(expect_rank));
  }
  std::int64_t numel = 1;
  for (int a = 0; a < rank; ++a) {
    const std::uint64_t ext_off = r.offset();
    const auto e = r.scalar<std::uint32_t>("extent");
    if (e == 0 || e > (1u << 24)) fail(path, ext_off, "extent " + std::to_string(e));
    rec.extents.push_back(static_cast<int>(e));
    numel *= e;
  }
  r.bytes(rec.spacing.data(), sizeof(double) * 3, "spacing");
  if (rec.dtype == 0) {
    rec.f64.resize(static_cast<size_t>(numel));
    r.bytes(rec.f64.data(), sizeof(double) * static_cast<size_t>(numel), "image payload");
  } else {
    rec.u8.resize(static_cast<size_t>(numel));
    r.bytes(rec.u8.data(), static_cast<size_t>(numel), "label payload");
  }
  return rec;
}

}  // namespace

VolumeSample read_volume(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open");
  Reader r(path, in);
  Record img = parse_record(path, r, 0, 4);
  Record lab = parse_record(path, r, 1, 3);
  if (!r.at_eof()) r.reject("trailing bytes after label record");
  if (img.extents[1] != lab.extents[0] || img.extents[2] != lab.extents[1] ||
      img.extents[3] != lab.extents[2]) {
    r.reject("image/label spatial extents differ");
  }
  if (img.spacing != lab.spacing) r.reject("image/label spacing differ");
  VolumeSample s;
  s.image = Tensor::raw(img.extents, std::move(img.f64));
  s.labels.shape = lab.extents;
  s.labels.data = std::move(lab.u8);
  s.spacing = img.spacing;
  s.id = std::filesystem::path(path).stem().string();
  return s;
}

std::vector<VolumeSample> read_volume_dir(const std::string& dir) {
  std::vector<std::string> paths;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".mcvx") {
      paths.push_back(e.path().string());
    }
  }
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw std::runtime_error(dir + ": no .mcvx volumes found");
  std::vector<VolumeSample> out;
  out.reserve(paths.size());
  for (const std::string& p : paths) out.push_back(read_volume(p));
  return out;
}

}  // namespace gmseg
