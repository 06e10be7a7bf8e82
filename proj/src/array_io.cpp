#include "xreg/array_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace xreg::io {

static_assert(std::endian::native == std::endian::little, "array files are little-endian; big-endian hosts need byte swapping");

namespace {

constexpr char kMagic[8] = {'X', 'R', 'E', 'G', 'A', 'R', 'R', '1'};

template <typename T>
void write_impl(const std::filesystem::path& path, DType dtype, const std::vector<std::uint64_t>& shape,
                const std::vector<T>& values) {
  std::uint64_t expected = 1;
  for (auto d : shape) expected *= d;
  if (expected != values.size()) throw FormatError("array payload does not match its shape: " + path.string());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open for writing: " + path.string());
  const auto code = static_cast<std::uint32_t>(dtype);
  const auto rank = static_cast<std::uint32_t>(shape.size());
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&code), sizeof code);
  out.write(reinterpret_cast<const char*>(&rank), sizeof rank);
  out.write(reinterpret_cast<const char*>(shape.data()), static_cast<std::streamsize>(shape.size() * sizeof(std::uint64_t)));
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(T)));
  if (!out) throw FormatError("write failed: " + path.string());
}

template <typename T>
void read_impl(const std::filesystem::path& path, DType dtype, std::vector<std::uint64_t>& shape, std::vector<T>& values) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open array file: " + path.string());
  char magic[8];
  std::uint32_t code = 0, rank = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&code), sizeof code);
  in.read(reinterpret_cast<char*>(&rank), sizeof rank);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw FormatError("bad array header: " + path.string());
  if (code != static_cast<std::uint32_t>(dtype)) {
    throw FormatError("dtype code " + std::to_string(code) + " unexpected in " + path.string());
  }
  if (rank > 8) throw FormatError("implausible rank in " + path.string());
  shape.resize(rank);
  in.read(reinterpret_cast<char*>(shape.data()), static_cast<std::streamsize>(rank * sizeof(std::uint64_t)));
  std::uint64_t count = 1;
  for (auto d : shape) count *= d;
  values.resize(count);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * sizeof(T)));
  if (!in) throw FormatError("truncated array payload: " + path.string());
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after payload: " + path.string());
}

}  // namespace

void write_array(const std::filesystem::path& path, const ArrayF64& array) {
  write_impl(path, DType::f64, array.shape, array.values);
}

void write_array(const std::filesystem::path& path, const ArrayI64& array) {
  write_impl(path, DType::i64, array.shape, array.values);
}

ArrayF64 read_f64(const std::filesystem::path& path) {
  ArrayF64 a;
  read_impl(path, DType::f64, a.shape, a.values);
  return a;
}

ArrayI64 read_i64(const std::filesystem::path& path) {
  ArrayI64 a;
  read_impl(path, DType::i64, a.shape, a.values);
  return a;
}

std::string digest_bytes(const void* data, std::size_t size) {
  std::uint64_t h = 1469598103934665603ull;
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open for digest: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return digest_bytes(bytes.data(), bytes.size());
}

}  // namespace xreg::io
