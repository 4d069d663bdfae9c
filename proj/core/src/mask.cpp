#include "greskit/mask.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "greskit/error.hpp"

namespace greskit {
namespace {

void require_same_shape(const BinaryMask& a, const BinaryMask& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionMismatch(std::string(op) + ": mask dimensions differ (" +
                            std::to_string(a.height()) + "x" + std::to_string(a.width()) +
                            " vs " + std::to_string(b.height()) + "x" +
                            std::to_string(b.width()) + ")");
  }
}

void require_positive_dims(int height, int width) {
  if (height < 1 || width < 1) {
    throw DimensionMismatch("mask dimensions must be positive, got " + std::to_string(height) +
                            "x" + std::to_string(width));
  }
}

}  // namespace

BinaryMask::BinaryMask(int height, int width) : height_(height), width_(width) {
  require_positive_dims(height, width);
  bits_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), 0);
}

BinaryMask::BinaryMask(int height, int width, std::vector<std::uint8_t> bits)
    : height_(height), width_(width), bits_(std::move(bits)) {
  require_positive_dims(height, width);
  if (bits_.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width)) {
    throw DimensionMismatch("mask bit count " + std::to_string(bits_.size()) +
                            " does not match " + std::to_string(height) + "x" +
                            std::to_string(width));
  }
  for (auto& b : bits_) b = b ? 1 : 0;
}

void validate_rle(const RunLengthMask& rle) {
  if (rle.height < 1 || rle.width < 1) {
    throw MalformedEncoding("RLE size must be positive, got " + std::to_string(rle.height) + "x" +
                            std::to_string(rle.width));
  }
  std::int64_t total = 0;
  for (std::size_t i = 0; i < rle.counts.size(); ++i) {
    const auto run = rle.counts[i];
    if (run < 0) throw MalformedEncoding("RLE run " + std::to_string(i) + " is negative");
    if (run == 0 && i > 0) {
      throw MalformedEncoding("RLE run " + std::to_string(i) + " has zero length");
    }
    total += run;
  }
  const std::int64_t expected = static_cast<std::int64_t>(rle.height) * rle.width;
  if (total != expected) {
    throw MalformedEncoding("RLE counts sum to " + std::to_string(total) + ", expected " +
                            std::to_string(expected));
  }
}

BinaryMask decode_rle(const RunLengthMask& rle) {
  validate_rle(rle);
  BinaryMask mask(rle.height, rle.width);
  std::int64_t pos = 0;
  bool foreground = false;
  for (const auto run : rle.counts) {
    if (foreground) {
      for (std::int64_t k = pos; k < pos + run; ++k) {
        mask.set(static_cast<int>(k % rle.height), static_cast<int>(k / rle.height));
      }
    }
    pos += run;
    foreground = !foreground;
  }
  return mask;
}

RunLengthMask encode_rle(const BinaryMask& mask) {
  RunLengthMask rle{mask.height(), mask.width(), {}};
  bool current = false;
  std::int64_t run = 0;
  for (int c = 0; c < mask.width(); ++c) {
    for (int r = 0; r < mask.height(); ++r) {
      const bool v = mask.at(r, c);
      if (v != current) {
        rle.counts.push_back(run);
        run = 0;
        current = v;
      }
      ++run;
    }
  }
  rle.counts.push_back(run);
  return rle;
}

std::int64_t positive_pixel_count(const BinaryMask& mask) {
  const auto bits = mask.bits();
  return std::count(bits.begin(), bits.end(), std::uint8_t{1});
}

std::int64_t intersection_area(const BinaryMask& a, const BinaryMask& b) {
  require_same_shape(a, b, "intersection_area");
  const auto x = a.bits();
  const auto y = b.bits();
  std::int64_t n = 0;
  for (std::size_t i = 0; i < x.size(); ++i) n += x[i] & y[i];
  return n;
}

std::int64_t union_area(const BinaryMask& a, const BinaryMask& b) {
  require_same_shape(a, b, "union_area");
  const auto x = a.bits();
  const auto y = b.bits();
  std::int64_t n = 0;
  for (std::size_t i = 0; i < x.size(); ++i) n += x[i] | y[i];
  return n;
}

double iou(const BinaryMask& a, const BinaryMask& b) {
  const auto u = union_area(a, b);
  if (u == 0) return 1.0;
  return static_cast<double>(intersection_area(a, b)) / static_cast<double>(u);
}

BinaryMask merge_masks(std::span<const BinaryMask> masks, int height, int width) {
  BinaryMask out(height, width);
  std::vector<std::uint8_t> bits(out.bits().begin(), out.bits().end());
  for (const auto& m : masks) {
    require_same_shape(out, m, "merge_masks");
    const auto src = m.bits();
    for (std::size_t i = 0; i < bits.size(); ++i) bits[i] |= src[i];
  }
  return BinaryMask(height, width, std::move(bits));
}

std::optional<BBox> mask_to_bbox(const BinaryMask& mask) {
  int x_min = mask.width(), y_min = mask.height(), x_max = -1, y_max = -1;
  for (int r = 0; r < mask.height(); ++r) {
    for (int c = 0; c < mask.width(); ++c) {
      if (!mask.at(r, c)) continue;
      x_min = std::min(x_min, c);
      x_max = std::max(x_max, c);
      y_min = std::min(y_min, r);
      y_max = std::max(y_max, r);
    }
  }
  if (x_max < 0) return std::nullopt;
  return BBox{x_min, y_min, x_max, y_max};
}

double bbox_iou(const BBox& a, const BBox& b) {
  const int ix0 = std::max(a.x_min, b.x_min);
  const int iy0 = std::max(a.y_min, b.y_min);
  const int ix1 = std::min(a.x_max, b.x_max);
  const int iy1 = std::min(a.y_max, b.y_max);
  if (ix1 < ix0 || iy1 < iy0) return 0.0;
  const std::int64_t inter = static_cast<std::int64_t>(ix1 - ix0 + 1) * (iy1 - iy0 + 1);
  const std::int64_t uni = a.area() + b.area() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

nlohmann::json rle_to_json(const RunLengthMask& rle) {
  return nlohmann::json{{"size", {rle.height, rle.width}}, {"counts", rle.counts}};
}

RunLengthMask rle_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("size") || !j.contains("counts")) {
    throw MalformedEncoding("RLE object must have \"size\" and \"counts\"");
  }
  const auto& size = j.at("size");
  if (!size.is_array() || size.size() != 2 || !size[0].is_number_integer() ||
      !size[1].is_number_integer()) {
    throw MalformedEncoding("RLE \"size\" must be [height,width]");
  }
  const auto& counts = j.at("counts");
  if (!counts.is_array()) {
    // Compressed string counts are not supported.
    throw MalformedEncoding("RLE \"counts\" must be an integer array");
  }
  RunLengthMask rle{size[0].get<int>(), size[1].get<int>(), {}};
  rle.counts.reserve(counts.size());
  for (const auto& c : counts) {
    if (!c.is_number_integer()) throw MalformedEncoding("RLE counts must be integers");
    rle.counts.push_back(c.get<std::int64_t>());
  }
  validate_rle(rle);
  return rle;
}

}  // namespace greskit
