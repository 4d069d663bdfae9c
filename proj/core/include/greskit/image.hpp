#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace greskit {

// 8-bit interleaved RGB, row-major.
struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // height * width * 3

  RgbImage() = default;
  RgbImage(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, 0) {}

  std::uint8_t* at(int row, int col) {
    return pixels.data() + (static_cast<std::size_t>(row) * width + col) * 3;
  }
  const std::uint8_t* at(int row, int col) const {
    return pixels.data() + (static_cast<std::size_t>(row) * width + col) * 3;
  }

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

// Binary PPM (P6, maxval 255).
void write_ppm(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_ppm(const std::filesystem::path& path);

}  // namespace greskit
