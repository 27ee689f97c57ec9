#pragma once

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "dpnas/errors.hpp"

namespace dpnas {

// Dense CHW tensor. One sample, channel-major, row-major planes.
template <typename T>
struct Tensor {
  int c = 0;
  int h = 0;
  int w = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int c_, int h_, int w_)
      : c(c_), h(h_), w(w_),
        data(static_cast<std::size_t>(c_) * h_ * w_, T(0)) {}

  std::int64_t size() const {
    return static_cast<std::int64_t>(c) * h * w;
  }

  T* plane(int ci) { return data.data() + static_cast<std::size_t>(ci) * h * w; }
  const T* plane(int ci) const {
    return data.data() + static_cast<std::size_t>(ci) * h * w;
  }

  T& at(int ci, int hi, int wi) {
    return data[(static_cast<std::size_t>(ci) * h + hi) * w + wi];
  }
  T at(int ci, int hi, int wi) const {
    return data[(static_cast<std::size_t>(ci) * h + hi) * w + wi];
  }

  bool same_shape(const Tensor& o) const {
    return c == o.c && h == o.h && w == o.w;
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(c, h, w);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
    return out;
  }
};

namespace detail {

// Little-endian byte streams built value-wise, so dumps match across hosts.
template <typename T>
void write_le(std::ostream& os, T v) {
  std::uint64_t bits;
  if constexpr (std::is_same_v<T, double>) {
    bits = std::bit_cast<std::uint64_t>(v);
  } else {
    bits = static_cast<std::uint64_t>(v);
  }
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i)
    buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!is) throw TruncatedFileError("unexpected end of file");
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  if constexpr (std::is_same_v<T, double>) {
    return std::bit_cast<double>(bits);
  } else {
    return static_cast<T>(bits);
  }
}

}  // namespace detail

// Raw dump format: u32 rank, u64 dims[rank], f64 payload in storage order,
// all little-endian.
inline void write_raw_dims(std::ostream& os, const std::vector<std::int64_t>& dims) {
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) detail::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(d));
}

inline void write_raw_payload(std::ostream& os, const double* p, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) detail::write_le<double>(os, p[i]);
}

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  write_raw_dims(os, {t.c, t.h, t.w});
  for (auto v : t.data) detail::write_le<double>(os, static_cast<double>(v));
}

template <typename T>
void write_tensor_file(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open for writing: " + path);
  write_tensor(os, t);
}

inline std::vector<std::int64_t> read_raw_dims(std::istream& is) {
  const auto rank = detail::read_le<std::uint32_t>(is);
  if (rank > 8) throw ParseError("implausible tensor rank in raw dump");
  std::vector<std::int64_t> dims(rank);
  for (auto& d : dims)
    d = static_cast<std::int64_t>(detail::read_le<std::uint64_t>(is));
  return dims;
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  const auto dims = read_raw_dims(is);
  if (dims.size() != 3) throw ParseError("raw tensor dump must have rank 3");
  Tensor<T> t(static_cast<int>(dims[0]), static_cast<int>(dims[1]),
              static_cast<int>(dims[2]));
  for (auto& v : t.data) v = static_cast<T>(detail::read_le<double>(is));
  return t;
}

template <typename T>
Tensor<T> read_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open for reading: " + path);
  return read_tensor<T>(is);
}

}  // namespace dpnas
