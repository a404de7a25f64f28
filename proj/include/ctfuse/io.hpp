#pragma once

// Tensor (de)serialization.
//
// Binary format ("TNSR1"): the 5 magic bytes `TNSR1`, a uint32 little-endian
// order N, N uint32 little-endian dimensions, then size(T) float64
// little-endian values in storage order (first index fastest).
//
// Text format: one header line with the space-separated dimensions, then the
// values in storage order separated by arbitrary whitespace. Intended for
// small hand-made inputs; the binary format is the tool default.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ctfuse/errors.hpp"
#include "ctfuse/tensor.hpp"

namespace ctfuse {

static_assert(std::endian::native == std::endian::little,
              "tensor file I/O assumes a little-endian host");

namespace detail {
inline constexpr char kTensorMagic[5] = {'T', 'N', 'S', 'R', '1'};
}

/// Writes `t` to `path` in the binary TNSR1 format.
inline void write_tensor(const std::filesystem::path& path, const DenseTensor& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open for writing: " + path.string());
  out.write(detail::kTensorMagic, sizeof(detail::kTensorMagic));
  const auto order = static_cast<std::uint32_t>(t.order());
  out.write(reinterpret_cast<const char*>(&order), sizeof(order));
  for (Index d : t.dims()) {
    const auto dim = static_cast<std::uint32_t>(d);
    out.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
  }
  out.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(sizeof(double)) * t.size());
  if (!out) throw io_error("write failed: " + path.string());
}

/// Reads a binary TNSR1 tensor from `path`.
inline DenseTensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open for reading: " + path.string());
  char magic[sizeof(detail::kTensorMagic)] = {};
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(std::begin(magic), std::end(magic), std::begin(detail::kTensorMagic))) {
    throw io_error("bad magic (not a TNSR1 file): " + path.string());
  }
  std::uint32_t order = 0;
  in.read(reinterpret_cast<char*>(&order), sizeof(order));
  if (!in || order == 0 || order > 64) throw io_error("bad tensor order in " + path.string());
  std::vector<Index> dims(order);
  for (auto& d : dims) {
    std::uint32_t dim = 0;
    in.read(reinterpret_cast<char*>(&dim), sizeof(dim));
    if (!in || dim == 0) throw io_error("bad dimension in " + path.string());
    d = static_cast<Index>(dim);
  }
  DenseTensor t(dims);
  in.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(sizeof(double)) * t.size());
  if (!in || in.gcount() != static_cast<std::streamsize>(sizeof(double)) * t.size()) {
    throw io_error("truncated tensor payload in " + path.string());
  }
  return t;
}

/// Writes `t` to `path` as text (dimension header line + values).
inline void write_tensor_text(const std::filesystem::path& path, const DenseTensor& t) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("cannot open for writing: " + path.string());
  for (Index n = 0; n < t.order(); ++n) out << (n ? " " : "") << t.dims()[static_cast<std::size_t>(n)];
  out << "\n";
  out.precision(17);
  for (Index i = 0; i < t.size(); ++i) out << t.values()[i] << ((i + 1) % 8 == 0 ? "\n" : " ");
  out << "\n";
  if (!out) throw io_error("write failed: " + path.string());
}

/// Reads a text tensor (dimension header line + whitespace-separated values).
inline DenseTensor read_tensor_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open for reading: " + path.string());
  std::string header;
  if (!std::getline(in, header)) throw io_error("missing header line in " + path.string());
  std::istringstream hs(header);
  std::vector<Index> dims;
  for (long long d = 0; hs >> d;) {
    if (d <= 0) throw io_error("bad dimension in " + path.string());
    dims.push_back(static_cast<Index>(d));
  }
  if (dims.empty()) throw io_error("empty dimension header in " + path.string());
  DenseTensor t(dims);
  for (Index i = 0; i < t.size(); ++i) {
    if (!(in >> t.values()[i])) throw io_error("too few values in " + path.string());
  }
  return t;
}

/// Convenience wrappers for matrices stored as order-2 tensors.
inline void write_matrix(const std::filesystem::path& path, const Matrix& m) {
  write_tensor(path, DenseTensor::from_matrix(m));
}
inline Matrix read_matrix(const std::filesystem::path& path) {
  const DenseTensor t = read_tensor(path);
  return t.as_matrix();
}

}  // namespace ctfuse
