// Copyright Contributors to the NPCD Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>

#include "npcd/core/binary_io.hpp"
#include "npcd/core/error.hpp"
#include "npcd/core/tape.hpp"

namespace npcd {

/// RGB image with values in [0, 1]. Pixel (x, y) lives in row y * width + x.
struct Image {
  int width = 0;
  int height = 0;
  Matrix<double> rgb;  // (width * height) x 3

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(Matrix<double>::Zero(static_cast<Eigen::Index>(w) * h, 3)) {}

  [[nodiscard]] Eigen::Index pixel_index(int x, int y) const { return static_cast<Eigen::Index>(y) * width + x; }
  [[nodiscard]] Eigen::Index pixel_count() const { return static_cast<Eigen::Index>(width) * height; }
};

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Binary PPM (P6, maxval 255).
inline void write_ppm(const Image& img, const std::string& path) {
  auto out = binary::open_for_write(path);
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  binary::write_bytes(out, header);
  std::string bytes(static_cast<std::size_t>(img.pixel_count()) * 3, '\0');
  for (Eigen::Index i = 0; i < img.pixel_count(); ++i) {
    for (int c = 0; c < 3; ++c) bytes[static_cast<std::size_t>(i * 3 + c)] = static_cast<char>(to_byte(img.rgb(i, c)));
  }
  binary::write_bytes(out, bytes);
  binary::finish_write(out, path);
}

inline Image read_ppm(const std::string& path) {
  auto in = binary::open_for_read(path);
  auto token = [&]() {
    std::string tok;
    int ch = in.get();
    while (ch != EOF) {
      if (ch == '#') {
        while (ch != EOF && ch != '\n') ch = in.get();
      } else if (std::isspace(ch) == 0) {
        break;
      }
      ch = in.get();
    }
    while (ch != EOF && std::isspace(ch) == 0) {
      tok.push_back(static_cast<char>(ch));
      ch = in.get();
    }
    if (tok.empty()) throw FormatError("truncated PPM header: " + path);
    return tok;
  };
  if (token() != "P6") throw FormatError("not a binary PPM (P6): " + path);
  int w = 0;
  int h = 0;
  int maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::logic_error&) {
    throw FormatError("malformed PPM header: " + path);
  }
  if (w <= 0 || h <= 0 || w > 1 << 15 || h > 1 << 15) throw FormatError("bad PPM dimensions: " + path);
  if (maxval != 255) throw FormatError("only maxval 255 PPM files are supported: " + path);
  Image img(w, h);
  const std::string bytes = binary::read_bytes(in, static_cast<std::size_t>(w) * h * 3, "PPM pixels");
  for (Eigen::Index i = 0; i < img.pixel_count(); ++i) {
    for (int c = 0; c < 3; ++c) {
      img.rgb(i, c) = static_cast<unsigned char>(bytes[static_cast<std::size_t>(i * 3 + c)]) / 255.0;
    }
  }
  return img;
}

/// Rounds every channel to the nearest 1/255 step, matching a PPM round trip.
inline Image quantize_8bit(Image img) {
  img.rgb = img.rgb.unaryExpr([](double v) { return to_byte(v) / 255.0; });
  return img;
}

}  // namespace npcd
