#pragma once

// RTN1 raw tensor files: magic "RTN1", u32 rank, rank x u64 extents, then
// little-endian IEEE-754 doubles in row-major order.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "deshadow/tensor.hpp"

namespace deshadow {

class IoError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <class T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  out.append(bytes.data(), bytes.size());
}

template <class T>
T get_le(const char* p) {
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace detail

inline std::string encode_rtn(const Tensor& t) {
  std::string out = "RTN1";
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) {
    detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(e));
  }
  out.reserve(out.size() + 8 * t.numel());
  for (double v : t.data()) detail::put_le<double>(out, v);
  return out;
}

inline Tensor decode_rtn(const std::string& bytes, const std::string& what = "") {
  auto fail = [&](const std::string& msg) {
    return IoError("RTN1 " + (what.empty() ? std::string() : what + ": ") + msg);
  };
  if (bytes.size() < 8 || bytes.compare(0, 4, "RTN1") != 0) {
    throw fail("bad magic");
  }
  const auto rank = detail::get_le<std::uint32_t>(bytes.data() + 4);
  std::size_t off = 8;
  if (bytes.size() < off + 8ull * rank) throw fail("truncated header");
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape[i] = static_cast<std::size_t>(
        detail::get_le<std::uint64_t>(bytes.data() + off));
    off += 8;
  }
  const std::size_t n = shape_numel(shape);
  if (bytes.size() != off + 8 * n) throw fail("payload size mismatch");
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    data[i] = detail::get_le<double>(bytes.data() + off + 8 * i);
  }
  return Tensor(std::move(shape), std::move(data));
}

inline void save_rtn(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  const std::string bytes = encode_rtn(t);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed for " + path.string());
}

inline Tensor load_rtn(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)),
                    std::istreambuf_iterator<char>());
  return decode_rtn(bytes, path.string());
}

}  // namespace deshadow
