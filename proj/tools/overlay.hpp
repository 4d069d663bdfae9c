#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "greskit/image.hpp"
#include "greskit/protocol.hpp"

namespace greskit::cli {

using Rgb = std::array<std::uint8_t, 3>;

// Target colors, cycled by position within an image.
const std::vector<Rgb>& overlay_palette();

struct OverlayItem {
  const Prediction* prediction = nullptr;
  std::string expression;
};

struct OverlayResult {
  RgbImage image;         // source rows on top, banner rows (if any) below
  int source_height = 0;  // rows above this belong to the source image
  std::vector<int> color_index;  // per item, -1 for rejected targets
};

// Paints each [SEG] mask in its own opaque palette color, in item order.
// Rejected items are listed as "REJ <expression>" lines in a banner under
// the image.
OverlayResult render_overlay(const RgbImage& source, std::span<const OverlayItem> items);

// 3x5 glyphs, upper-cased; characters without a glyph render as blanks.
void draw_text(RgbImage& image, int row, int col, std::string_view text, const Rgb& color);
inline constexpr int kGlyphWidth = 4;   // including one column of spacing
inline constexpr int kGlyphHeight = 6;  // including one row of spacing

}  // namespace greskit::cli
