#pragma once

// Flat little-endian array files with a self-describing header:
//   8 bytes   magic "XREGARR1"
//   4 bytes   dtype (1 = float64, 2 = int64)
//   4 bytes   rank
//   8*rank    dimensions (uint64)
//   payload   row-major values

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace xreg::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint32_t { f64 = 1, i64 = 2 };

struct ArrayF64 {
  std::vector<std::uint64_t> shape;
  std::vector<double> values;
};

struct ArrayI64 {
  std::vector<std::uint64_t> shape;
  std::vector<std::int64_t> values;
};

void write_array(const std::filesystem::path& path, const ArrayF64& array);
void write_array(const std::filesystem::path& path, const ArrayI64& array);
ArrayF64 read_f64(const std::filesystem::path& path);
ArrayI64 read_i64(const std::filesystem::path& path);

// FNV-1a 64-bit digest of a file's bytes, as 16 hex digits.
std::string file_digest(const std::filesystem::path& path);
std::string digest_bytes(const void* data, std::size_t size);

}  // namespace xreg::io
