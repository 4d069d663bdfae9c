#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

namespace greskit {

// Dense binary mask, row-major. Every metric in the library is computed on
// these at annotation resolution; there is no resizing here.
class BinaryMask {
 public:
  // All-background mask.
  BinaryMask(int height, int width);
  BinaryMask(int height, int width, std::vector<std::uint8_t> bits);

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::int64_t size() const noexcept { return static_cast<std::int64_t>(bits_.size()); }

  bool at(int row, int col) const { return bits_[index(row, col)] != 0; }
  void set(int row, int col, bool value = true) { bits_[index(row, col)] = value ? 1 : 0; }

  std::span<const std::uint8_t> bits() const noexcept { return bits_; }

  bool same_shape(const BinaryMask& other) const noexcept {
    return height_ == other.height_ && width_ == other.width_;
  }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  std::size_t index(int row, int col) const {
    return static_cast<std::size_t>(row) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(col);
  }

  int height_;
  int width_;
  std::vector<std::uint8_t> bits_;
};

// Uncompressed COCO-style run-length encoding: column-major scan, runs
// alternate background/foreground and the first run counts background
// pixels (it is 0 when pixel (0,0) is foreground).
struct RunLengthMask {
  int height = 0;
  int width = 0;
  std::vector<std::int64_t> counts;

  friend bool operator==(const RunLengthMask&, const RunLengthMask&) = default;
};

// Inclusive pixel box.
struct BBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;

  std::int64_t area() const noexcept {
    return static_cast<std::int64_t>(x_max - x_min + 1) * (y_max - y_min + 1);
  }
  friend bool operator==(const BBox&, const BBox&) = default;
};

// Throws MalformedEncoding if the counts do not cover height*width exactly,
// contain a negative run, or contain a zero-length run past index 0.
void validate_rle(const RunLengthMask& rle);

BinaryMask decode_rle(const RunLengthMask& rle);
RunLengthMask encode_rle(const BinaryMask& mask);

std::int64_t positive_pixel_count(const BinaryMask& mask);
std::int64_t intersection_area(const BinaryMask& a, const BinaryMask& b);
std::int64_t union_area(const BinaryMask& a, const BinaryMask& b);

// IoU of two masks. When both masks are empty the result is 1.0: an empty
// prediction on an empty target is a perfect answer, which is what the GRES
// scoring credits for a correct rejection.
double iou(const BinaryMask& a, const BinaryMask& b);

// Pixelwise OR. An empty list yields an all-background height x width mask.
BinaryMask merge_masks(std::span<const BinaryMask> masks, int height, int width);

std::optional<BBox> mask_to_bbox(const BinaryMask& mask);
double bbox_iou(const BBox& a, const BBox& b);

// {"size":[height,width],"counts":[...]}
nlohmann::json rle_to_json(const RunLengthMask& rle);
RunLengthMask rle_from_json(const nlohmann::json& j);

}  // namespace greskit
