#pragma once

// LRTF binary tensor files: "LRTF", u8 version (1), u8 rank, rank x u64 LE dims,
// then the row-major float-64 LE payload.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lr2flow/tensor.hpp"

namespace lr2flow {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace lrtf_detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace lrtf_detail

inline std::string encode_lrtf(const Tensor& t) {
  if (t.rank() > 255) throw FormatError("lrtf: rank too large");
  std::string out = "LRTF";
  out.push_back(static_cast<char>(1));
  out.push_back(static_cast<char>(t.rank()));
  for (std::size_t d : t.shape()) lrtf_detail::put_u64(out, d);
  for (double v : t.data()) lrtf_detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline Tensor decode_lrtf(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 6 || std::memcmp(p, "LRTF", 4) != 0) throw FormatError("lrtf: bad magic");
  if (p[4] != 1) throw FormatError("lrtf: unsupported version " + std::to_string(p[4]));
  const std::size_t rank = p[5];
  std::size_t off = 6;
  if (bytes.size() < off + 8 * rank) throw FormatError("lrtf: truncated header");
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i, off += 8) shape[i] = lrtf_detail::get_u64(p + off);
  const std::size_t n = numel(shape);
  if (bytes.size() != off + 8 * n) throw FormatError("lrtf: payload length does not match shape " + shape_str(shape));
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i, off += 8) data[i] = std::bit_cast<double>(lrtf_detail::get_u64(p + off));
  return Tensor(std::move(shape), std::move(data));
}

inline void save_lrtf(const std::string& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  const std::string bytes = encode_lrtf(t);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline Tensor load_lrtf(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_lrtf(bytes);
}

}  // namespace lr2flow
