#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "spongelab/tensor.hpp"

namespace spongelab {

/// Binary tensor file: "VDTN", u32 version (1), u32 rank, rank x u64 extents,
/// then the row-major payload as little-endian IEEE-754 doubles.
inline constexpr char kTensorMagic[4] = {'V', 'D', 'T', 'N'};
inline constexpr std::uint32_t kTensorVersion = 1;

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in, const std::string& what = "tensor stream");

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

namespace io {

// Little-endian primitives shared by the binary formats.
void put_u32(std::ostream& out, std::uint32_t v);
void put_u64(std::ostream& out, std::uint64_t v);
void put_f64(std::ostream& out, double v);
std::uint32_t get_u32(std::istream& in, const std::string& what);
std::uint64_t get_u64(std::istream& in, const std::string& what);
double get_f64(std::istream& in, const std::string& what);
void put_f64s(std::ostream& out, std::span<const double> values);
std::vector<double> get_f64s(std::istream& in, std::size_t count, const std::string& what);

}  // namespace io
}  // namespace spongelab
