#pragma once

// Single-channel images, binary masks and binary PGM (P5, maxval 255) I/O.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "galn/errors.hpp"

namespace galn {

/// Grey image, row-major, pixel values in [0, 1].
struct ImageSample {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;

  double at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
  friend bool operator==(const ImageSample&, const ImageSample&) = default;
};

struct BinaryMask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> bits;

  static BinaryMask empty(std::size_t w, std::size_t h) { return {w, h, std::vector<std::uint8_t>(w * h, 0)}; }
  bool at(std::size_t x, std::size_t y) const { return bits[y * width + x] != 0; }
  void set(std::size_t x, std::size_t y, bool v = true) { bits[y * width + x] = v ? 1 : 0; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto b : bits) n += b != 0;
    return n;
  }
  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

/// Raw 8-bit grey raster as stored in a PGM file.
struct GreyRaster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> data;
};

inline void write_pgm(const std::filesystem::path& path, const GreyRaster& r) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << "P5\n" << r.width << ' ' << r.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(r.data.data()), static_cast<std::streamsize>(r.data.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline GreyRaster read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image: " + path.string());
  auto token = [&]() {
    std::string t;
    while (in) {
      const int c = in.peek();
      if (c == '#') {
        std::string line;
        std::getline(in, line);
      } else if (std::isspace(c)) {
        in.get();
      } else {
        break;
      }
    }
    in >> t;
    return t;
  };
  if (token() != "P5") throw DataError("not a binary PGM (P5): " + path.string());
  GreyRaster r;
  std::size_t maxval = 0;
  try {
    r.width = std::stoul(token());
    r.height = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw DataError("malformed PGM header: " + path.string());
  }
  if (maxval != 255) throw DataError("PGM maxval must be 255: " + path.string());
  in.get();  // single whitespace after maxval
  r.data.resize(r.width * r.height);
  in.read(reinterpret_cast<char*>(r.data.data()), static_cast<std::streamsize>(r.data.size()));
  if (static_cast<std::size_t>(in.gcount()) != r.data.size()) throw DataError("truncated PGM: " + path.string());
  return r;
}

inline std::uint8_t to_byte(double v01) {
  const double c = std::min(1.0, std::max(0.0, v01));
  return static_cast<std::uint8_t>(std::lround(255.0 * c));
}

inline ImageSample load_image(const std::filesystem::path& path) {
  const auto r = read_pgm(path);
  ImageSample img{r.width, r.height, std::vector<double>(r.data.size())};
  for (std::size_t i = 0; i < r.data.size(); ++i) img.pixels[i] = r.data[i] / 255.0;
  return img;
}

inline void save_image(const std::filesystem::path& path, const ImageSample& img) {
  GreyRaster r{img.width, img.height, std::vector<std::uint8_t>(img.pixels.size())};
  for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] = to_byte(img.pixels[i]);
  write_pgm(path, r);
}

/// Masks are stored as 0/255; any non-zero byte reads back as set.
inline BinaryMask load_mask(const std::filesystem::path& path) {
  const auto r = read_pgm(path);
  BinaryMask m{r.width, r.height, std::vector<std::uint8_t>(r.data.size())};
  for (std::size_t i = 0; i < r.data.size(); ++i) m.bits[i] = r.data[i] != 0;
  return m;
}

inline void save_mask(const std::filesystem::path& path, const BinaryMask& m) {
  GreyRaster r{m.width, m.height, std::vector<std::uint8_t>(m.bits.size())};
  for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] = m.bits[i] ? 255 : 0;
  write_pgm(path, r);
}

}  // namespace galn
