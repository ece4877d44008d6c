#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "attnkit/tensor.hpp"

namespace attnkit {

// Binary tensor file layout:
//   magic "DTNSR1" | dtype byte (0=f32, 1=f64) | rank byte |
//   rank x uint32 little-endian dims | raw little-endian scalars, row-major.
inline constexpr char kTensorMagic[6] = {'D', 'T', 'N', 'S', 'R', '1'};
inline constexpr std::uint8_t kMaxRank = 8;

namespace detail {

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw io_error("tensor write failed");
}

inline void read_bytes(std::istream& is, void* p, std::size_t n, const std::string& path) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw io_error(msg("truncated tensor file: ", path));
}

inline bool host_is_little_endian() {
  const std::uint16_t probe = 0x0102;
  std::uint8_t b;
  std::memcpy(&b, &probe, 1);
  return b == 0x02;
}

template <class T>
T to_le(T v) {
  if (host_is_little_endian()) return v;
  T out;
  auto* src = reinterpret_cast<const std::uint8_t*>(&v);
  auto* dst = reinterpret_cast<std::uint8_t*>(&out);
  for (std::size_t i = 0; i < sizeof(T); ++i) dst[i] = src[sizeof(T) - 1 - i];
  return out;
}

}  // namespace detail

template <class Scalar>
void write_tensor(std::ostream& os, const Tensor<Scalar>& t) {
  if (t.rank() > kMaxRank) throw io_error(msg("tensor rank ", t.rank(), " exceeds format limit ", int(kMaxRank)));
  detail::write_bytes(os, kTensorMagic, sizeof(kTensorMagic));
  const std::uint8_t dtype = static_cast<std::uint8_t>(Tensor<Scalar>::dtype());
  const std::uint8_t rank = static_cast<std::uint8_t>(t.rank());
  detail::write_bytes(os, &dtype, 1);
  detail::write_bytes(os, &rank, 1);
  for (Index i = 0; i < t.rank(); ++i) {
    const std::uint32_t d = detail::to_le(static_cast<std::uint32_t>(t.dim(i)));
    detail::write_bytes(os, &d, 4);
  }
  if (detail::host_is_little_endian()) {
    detail::write_bytes(os, t.data(), sizeof(Scalar) * static_cast<std::size_t>(t.numel()));
  } else {
    for (Index i = 0; i < t.numel(); ++i) {
      Scalar v = t[i];
      if constexpr (sizeof(Scalar) == 4) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        bits = detail::to_le(bits);
        detail::write_bytes(os, &bits, 4);
      } else {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        bits = detail::to_le(bits);
        detail::write_bytes(os, &bits, 8);
      }
    }
  }
}

template <class Scalar>
void save_tensor(const std::filesystem::path& path, const Tensor<Scalar>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error(msg("cannot open for write: ", path.string()));
  write_tensor(os, t);
}

struct TensorHeader {
  DType dtype;
  Shape shape;
};

inline TensorHeader read_tensor_header(std::istream& is, const std::string& path) {
  char magic[6];
  detail::read_bytes(is, magic, 6, path);
  if (std::memcmp(magic, kTensorMagic, 6) != 0) throw io_error(msg("bad magic in tensor file: ", path));
  std::uint8_t dtype_byte = 0, rank = 0;
  detail::read_bytes(is, &dtype_byte, 1, path);
  detail::read_bytes(is, &rank, 1, path);
  if (dtype_byte > 1) throw io_error(msg("unknown dtype code ", int(dtype_byte), " in ", path));
  if (rank > kMaxRank) throw io_error(msg("rank ", int(rank), " exceeds format limit in ", path));
  TensorHeader h;
  h.dtype = static_cast<DType>(dtype_byte);
  h.shape.resize(rank);
  for (std::uint8_t i = 0; i < rank; ++i) {
    std::uint32_t d;
    detail::read_bytes(is, &d, 4, path);
    h.shape[i] = static_cast<Index>(detail::to_le(d));
  }
  return h;
}

namespace detail {
template <class Stored, class Scalar>
Tensor<Scalar> read_payload(std::istream& is, const Shape& shape, const std::string& path) {
  Tensor<Stored> raw(shape);
  read_bytes(is, raw.data(), sizeof(Stored) * static_cast<std::size_t>(raw.numel()), path);
  if (!host_is_little_endian()) {
    for (Index i = 0; i < raw.numel(); ++i) {
      if constexpr (sizeof(Stored) == 4) {
        std::uint32_t bits;
        std::memcpy(&bits, &raw[i], 4);
        bits = to_le(bits);
        std::memcpy(&raw[i], &bits, 4);
      } else {
        std::uint64_t bits;
        std::memcpy(&bits, &raw[i], 8);
        bits = to_le(bits);
        std::memcpy(&raw[i], &bits, 8);
      }
    }
  }
  if constexpr (std::is_same_v<Stored, Scalar>)
    return raw;
  else
    return raw.template cast<Scalar>();
}
}  // namespace detail

// Reads a tensor, converting the stored scalar type to Scalar if needed.
template <class Scalar>
Tensor<Scalar> read_tensor(std::istream& is, const std::string& path = "<stream>") {
  const TensorHeader h = read_tensor_header(is, path);
  if (h.dtype == DType::f32) return detail::read_payload<float, Scalar>(is, h.shape, path);
  return detail::read_payload<double, Scalar>(is, h.shape, path);
}

template <class Scalar>
Tensor<Scalar> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error(msg("cannot open tensor file: ", path.string()));
  return read_tensor<Scalar>(is, path.string());
}

}  // namespace attnkit
