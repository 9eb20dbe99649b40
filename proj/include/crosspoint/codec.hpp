#pragma once

// File codecs.
//   PCF1 point file: "PCF1", u32 LE point count, count x 3 f64 LE coordinates.
//   Images: binary PPM (P6), 8-bit channels, value = round(pixel * 255).

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "crosspoint/errors.hpp"
#include "crosspoint/pointcloud.hpp"
#include "crosspoint/render.hpp"

namespace crosspoint {

namespace le {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

// Bounds-checked little-endian reader over a byte buffer.
class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IoError("unexpected end of data");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace le

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes to a sibling temporary file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename into " + path.string() + ": " + ec.message());
}

inline std::string encode_pcf(const PointCloud& cloud) {
  std::string out = "PCF1";
  le::put_u32(out, static_cast<std::uint32_t>(cloud.size()));
  for (const auto& p : cloud.points) {
    for (double c : p) le::put_f64(out, c);
  }
  return out;
}

inline PointCloud decode_pcf(std::string_view bytes) {
  le::Reader r(bytes);
  if (r.bytes(4) != "PCF1") throw IoError("not a PCF1 point file");
  const std::uint32_t count = r.u32();
  if (r.remaining() != static_cast<std::size_t>(count) * 24) {
    throw IoError("PCF1 payload size does not match the point count");
  }
  PointCloud cloud;
  cloud.points.resize(count);
  for (auto& p : cloud.points) {
    for (double& c : p) c = r.f64();
  }
  return cloud;
}

inline void save_pcf(const std::filesystem::path& path, const PointCloud& cloud) {
  write_file_atomic(path, encode_pcf(cloud));
}

inline PointCloud load_pcf(const std::filesystem::path& path) {
  return decode_pcf(read_file(path));
}

inline std::uint8_t quantize_pixel(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Rounds every pixel to the nearest value an 8-bit PPM can represent.
inline ImageTensor quantize(ImageTensor img) {
  for (double& v : img.pixels) v = quantize_pixel(v) / 255.0;
  return img;
}

inline std::string encode_ppm(const ImageTensor& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.reserve(out.size() + img.height * img.width * 3);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = img.at(y, x, img.channels == 1 ? 0 : c);
        out.push_back(static_cast<char>(quantize_pixel(v)));
      }
    }
  }
  return out;
}

inline ImageTensor decode_ppm(std::string_view bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return std::string(bytes.substr(start, pos - start));
  };
  if (token() != "P6") throw IoError("not a binary PPM (P6)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw IoError("malformed PPM header");
  }
  if (maxval != 255 || w == 0 || h == 0) throw IoError("only 8-bit PPM images are supported");
  ++pos;  // single whitespace after maxval
  if (bytes.size() < pos + w * h * 3) throw IoError("truncated PPM payload");
  ImageTensor img(h, w, 3);
  for (std::size_t i = 0; i < w * h * 3; ++i) {
    img.pixels[i] = static_cast<unsigned char>(bytes[pos + i]) / 255.0;
  }
  return img;
}

inline void save_ppm(const std::filesystem::path& path, const ImageTensor& img) {
  write_file_atomic(path, encode_ppm(img));
}

inline ImageTensor load_ppm(const std::filesystem::path& path) {
  return decode_ppm(read_file(path));
}

}  // namespace crosspoint
