#pragma once

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "mccl/tensor.hpp"

namespace mccl {

// Tensor wire format (little-endian):
//   magic "MCCL" | version u32 | rank u32 | extents u64[rank]
//   | element type tag u32 (1 = f32, 2 = f64, 3 = i32) | row-major payload
inline constexpr char kTensorMagic[4] = {'M', 'C', 'C', 'L'};
inline constexpr std::uint32_t kTensorFormatVersion = 1;

template <typename T>
constexpr std::uint32_t dtype_tag();
template <>
constexpr std::uint32_t dtype_tag<float>() {
  return 1;
}
template <>
constexpr std::uint32_t dtype_tag<double>() {
  return 2;
}
template <>
constexpr std::uint32_t dtype_tag<std::int32_t>() {
  return 3;
}

template <typename U>
void write_pod(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U read_pod(std::istream& is) {
  U v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  check(static_cast<bool>(is), "unexpected end of stream");
  return v;
}

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write(kTensorMagic, 4);
  write_pod<std::uint32_t>(os, kTensorFormatVersion);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(e));
  write_pod<std::uint32_t>(os, dtype_tag<T>());
  os.write(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(T));
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  check(static_cast<bool>(is) && std::memcmp(magic, kTensorMagic, 4) == 0,
        "tensor stream: bad magic");
  const auto version = read_pod<std::uint32_t>(is);
  check(version == kTensorFormatVersion, "tensor stream: unsupported version");
  const auto rank = read_pod<std::uint32_t>(is);
  check(rank <= 8, "tensor stream: implausible rank");
  Shape shape(rank);
  for (auto& e : shape) e = static_cast<std::int64_t>(read_pod<std::uint64_t>(is));
  const auto tag = read_pod<std::uint32_t>(is);
  check(tag == dtype_tag<T>(), "tensor stream: element type mismatch");
  Tensor<T> t(shape);
  is.read(reinterpret_cast<char*>(t.data()), t.size() * sizeof(T));
  check(static_cast<bool>(is), "tensor stream: truncated payload");
  return t;
}

template <typename T>
void save_tensor_file(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  check(os.is_open(), "cannot open for write: " + path);
  write_tensor(os, t);
  check(static_cast<bool>(os), "write failed: " + path);
}

template <typename T>
Tensor<T> load_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.is_open(), "cannot open: " + path);
  return read_tensor<T>(is);
}

}  // namespace mccl
