#pragma once

// 8-bit binary PGM (P5) and PPM (P6) images mapped to [0, 1] by v / 255.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "lr2flow/tensor.hpp"

namespace lr2flow {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ImageBuffer {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;   // 1 or 3
  std::vector<double> data;   // row-major, channel-last

  double& at(std::size_t r, std::size_t c, std::size_t ch = 0) { return data[(r * width + c) * channels + ch]; }
  double at(std::size_t r, std::size_t c, std::size_t ch = 0) const { return data[(r * width + c) * channels + ch]; }
};

namespace image_detail {

inline void skip_space(const std::string& s, std::size_t& pos) {
  while (pos < s.size()) {
    if (s[pos] == '#') {
      while (pos < s.size() && s[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(s[pos]))) {
      ++pos;
    } else {
      break;
    }
  }
}

inline std::size_t read_uint(const std::string& s, std::size_t& pos, const std::string& path) {
  skip_space(s, pos);
  const std::size_t start = pos;
  std::size_t v = 0;
  while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) {
    v = v * 10 + static_cast<std::size_t>(s[pos] - '0');
    if (v > 1u << 30) throw ImageError(path + ": header value too large");
    ++pos;
  }
  if (pos == start) throw ImageError(path + ": malformed header");
  return v;
}

}  // namespace image_detail

inline ImageBuffer decode_image(const std::string& bytes, const std::string& path = "<memory>") {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw ImageError(path + ": not a binary PGM (P5) or PPM (P6) file");
  }
  std::size_t pos = 2;
  ImageBuffer img;
  img.channels = bytes[1] == '5' ? 1 : 3;
  img.width = image_detail::read_uint(bytes, pos, path);
  img.height = image_detail::read_uint(bytes, pos, path);
  const std::size_t maxval = image_detail::read_uint(bytes, pos, path);
  if (img.width == 0 || img.height == 0) throw ImageError(path + ": zero image dimension");
  if (maxval != 255) throw ImageError(path + ": unsupported maxval " + std::to_string(maxval) + " (only 8-bit, maxval 255)");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) throw ImageError(path + ": malformed header");
  ++pos;
  const std::size_t n = img.width * img.height * img.channels;
  if (bytes.size() - pos < n) throw ImageError(path + ": truncated pixel data");
  img.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) img.data[i] = static_cast<unsigned char>(bytes[pos + i]) / 255.0;
  return img;
}

inline ImageBuffer load_image(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ImageError("cannot open " + path);
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_image(bytes, path);
}

/// Values are clamped to [0, 1] and rounded half-to-even to 8 bits.
inline std::string encode_image(const ImageBuffer& img) {
  if (img.channels != 1 && img.channels != 3) throw ImageError("encode_image: channels must be 1 or 3");
  if (img.data.size() != img.width * img.height * img.channels) throw ImageError("encode_image: data length mismatch");
  std::string out = (img.channels == 1 ? "P5\n" : "P6\n") + std::to_string(img.width) + " " + std::to_string(img.height) +
                    "\n255\n";
  for (double v : img.data) {
    const double q = std::nearbyint(std::clamp(v, 0.0, 1.0) * 255.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(q)));
  }
  return out;
}

inline void save_image(const std::string& path, const ImageBuffer& img) {
  const std::string bytes = encode_image(img);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ImageError("cannot write " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ImageError("write failed for " + path);
}

/// Y = 0.299 R + 0.587 G + 0.114 B; grayscale images pass through.
inline ImageBuffer to_luma(const ImageBuffer& img) {
  if (img.channels == 1) return img;
  ImageBuffer y;
  y.width = img.width;
  y.height = img.height;
  y.channels = 1;
  y.data.resize(img.width * img.height);
  for (std::size_t i = 0; i < y.data.size(); ++i)
    y.data[i] = 0.299 * img.data[3 * i] + 0.587 * img.data[3 * i + 1] + 0.114 * img.data[3 * i + 2];
  return y;
}

/// Luma as an [H, W] tensor.
inline Tensor image_to_tensor(const ImageBuffer& img) {
  const ImageBuffer y = to_luma(img);
  return Tensor(Shape{y.height, y.width}, y.data);
}

inline ImageBuffer tensor_to_image(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("tensor_to_image: expected [H, W], got " + shape_str(t.shape()));
  ImageBuffer img;
  img.height = t.dim(0);
  img.width = t.dim(1);
  img.channels = 1;
  img.data.assign(t.data().begin(), t.data().end());
  for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
  return img;
}

}  // namespace lr2flow
