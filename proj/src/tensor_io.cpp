#include "spongelab/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "spongelab/error.hpp"

namespace spongelab {
namespace io {

namespace {

template <typename U>
void put_le(std::ostream& out, U v) {
  std::array<char, sizeof(U)> buf{};
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    buf[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  }
  out.write(buf.data(), buf.size());
}

template <typename U>
U get_le(std::istream& in, const std::string& what) {
  std::array<unsigned char, sizeof(U)> buf{};
  in.read(reinterpret_cast<char*>(buf.data()), buf.size());
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) {
    throw FormatError(what + ": truncated file");
  }
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void put_u32(std::ostream& out, std::uint32_t v) { put_le(out, v); }
void put_u64(std::ostream& out, std::uint64_t v) { put_le(out, v); }
void put_f64(std::ostream& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }
std::uint32_t get_u32(std::istream& in, const std::string& what) {
  return get_le<std::uint32_t>(in, what);
}
std::uint64_t get_u64(std::istream& in, const std::string& what) {
  return get_le<std::uint64_t>(in, what);
}
double get_f64(std::istream& in, const std::string& what) {
  return std::bit_cast<double>(get_le<std::uint64_t>(in, what));
}

void put_f64s(std::ostream& out, std::span<const double> values) {
  for (double v : values) put_f64(out, v);
}

std::vector<double> get_f64s(std::istream& in, std::size_t count, const std::string& what) {
  std::vector<double> values(count);
  for (auto& v : values) v = get_f64(in, what);
  return values;
}

}  // namespace io

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write(kTensorMagic, 4);
  io::put_u32(out, kTensorVersion);
  io::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) io::put_u64(out, d);
  io::put_f64s(out, t.data());
}

Tensor read_tensor(std::istream& in, const std::string& what) {
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4) throw FormatError(what + ": truncated file");
  if (std::memcmp(magic, kTensorMagic, 4) != 0) throw FormatError(what + ": bad magic bytes");
  const std::uint32_t version = io::get_u32(in, what);
  if (version != kTensorVersion) {
    throw FormatError(what + ": unsupported tensor version " + std::to_string(version));
  }
  const std::uint32_t rank = io::get_u32(in, what);
  if (rank > 16) throw FormatError(what + ": implausible rank " + std::to_string(rank));
  Shape shape(rank);
  std::size_t count = 1;
  for (auto& d : shape) {
    d = io::get_u64(in, what);
    if (d != 0 && count > (std::size_t{1} << 34) / d) {
      throw FormatError(what + ": implausible extents");
    }
    count *= d;
  }
  auto data = io::get_f64s(in, count, what);
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
  if (!out) throw Error("failed writing " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": missing file");
  return read_tensor(in, path.string());
}

}  // namespace spongelab
