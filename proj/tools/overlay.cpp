#include "overlay.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <utility>

namespace greskit::cli {
namespace {

// Rows top to bottom, '#' set.
const std::map<char, std::array<const char*, 5>>& glyphs() {
  static const std::map<char, std::array<const char*, 5>> g{
      {'A', {"###", "#.#", "###", "#.#", "#.#"}}, {'B', {"##.", "#.#", "##.", "#.#", "##."}},
      {'C', {"###", "#..", "#..", "#..", "###"}}, {'D', {"##.", "#.#", "#.#", "#.#", "##."}},
      {'E', {"###", "#..", "##.", "#..", "###"}}, {'F', {"###", "#..", "##.", "#..", "#.."}},
      {'G', {"###", "#..", "#.#", "#.#", "###"}}, {'H', {"#.#", "#.#", "###", "#.#", "#.#"}},
      {'I', {"###", ".#.", ".#.", ".#.", "###"}}, {'J', {"..#", "..#", "..#", "#.#", "###"}},
      {'K', {"#.#", "#.#", "##.", "#.#", "#.#"}}, {'L', {"#..", "#..", "#..", "#..", "###"}},
      {'M', {"#.#", "###", "###", "#.#", "#.#"}}, {'N', {"##.", "#.#", "#.#", "#.#", "#.#"}},
      {'O', {"###", "#.#", "#.#", "#.#", "###"}}, {'P', {"###", "#.#", "###", "#..", "#.."}},
      {'Q', {"###", "#.#", "#.#", "###", "..#"}}, {'R', {"##.", "#.#", "##.", "#.#", "#.#"}},
      {'S', {"###", "#..", "###", "..#", "###"}}, {'T', {"###", ".#.", ".#.", ".#.", ".#."}},
      {'U', {"#.#", "#.#", "#.#", "#.#", "###"}}, {'V', {"#.#", "#.#", "#.#", "#.#", ".#."}},
      {'W', {"#.#", "#.#", "###", "###", "#.#"}}, {'X', {"#.#", "#.#", ".#.", "#.#", "#.#"}},
      {'Y', {"#.#", "#.#", ".#.", ".#.", ".#."}}, {'Z', {"###", "..#", ".#.", "#..", "###"}},
      {'0', {"###", "#.#", "#.#", "#.#", "###"}}, {'1', {".#.", "##.", ".#.", ".#.", "###"}},
      {'2', {"###", "..#", "###", "#..", "###"}}, {'3', {"###", "..#", "###", "..#", "###"}},
      {'4', {"#.#", "#.#", "###", "..#", "..#"}}, {'5', {"###", "#..", "###", "..#", "###"}},
      {'6', {"###", "#..", "###", "#.#", "###"}}, {'7', {"###", "..#", "..#", "..#", "..#"}},
      {'8', {"###", "#.#", "###", "#.#", "###"}}, {'9', {"###", "#.#", "###", "..#", "###"}},
      {':', {"...", ".#.", "...", ".#.", "..."}}, {'-', {"...", "...", "###", "...", "..."}},
      {'.', {"...", "...", "...", "...", ".#."}}, {',', {"...", "...", "...", ".#.", "#.."}},
  };
  return g;
}

std::vector<std::string> wrap(const std::string& text, std::size_t width) {
  std::vector<std::string> lines;
  std::string line;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find(' ', start);
    if (end == std::string::npos) end = text.size();
    std::string word = text.substr(start, end - start);
    while (word.size() > width) {
      if (!line.empty()) lines.push_back(std::exchange(line, {}));
      lines.push_back(word.substr(0, width));
      word.erase(0, width);
    }
    if (!line.empty() && line.size() + 1 + word.size() > width) lines.push_back(std::exchange(line, {}));
    if (!word.empty()) line += (line.empty() ? "" : " ") + word;
    start = end + 1;
  }
  if (!line.empty()) lines.push_back(line);
  return lines;
}

}  // namespace

const std::vector<Rgb>& overlay_palette() {
  // Away from the synthetic shape colors so painted pixels always change.
  static const std::vector<Rgb> p{{255, 220, 0},  {255, 0, 255}, {0, 255, 255}, {255, 140, 0},
                                  {160, 255, 60}, {255, 255, 255}, {150, 80, 255}, {0, 120, 120},
                                  {255, 150, 200}, {120, 60, 0}};
  return p;
}

void draw_text(RgbImage& image, int row, int col, std::string_view text, const Rgb& color) {
  for (char raw : text) {
    const char ch = static_cast<char>(std::toupper(static_cast<unsigned char>(raw)));
    const auto it = glyphs().find(ch);
    if (it != glyphs().end()) {
      for (int y = 0; y < 5; ++y) {
        for (int x = 0; x < 3; ++x) {
          const int r = row + y, c = col + x;
          if (it->second[y][x] != '#' || r < 0 || c < 0 || r >= image.height || c >= image.width) continue;
          std::copy(color.begin(), color.end(), image.at(r, c));
        }
      }
    }
    col += kGlyphWidth;
  }
}

OverlayResult render_overlay(const RgbImage& source, std::span<const OverlayItem> items) {
  const auto& palette = overlay_palette();
  const std::size_t chars = static_cast<std::size_t>(std::max(1, (source.width - 2) / kGlyphWidth));

  std::vector<std::string> banner;
  for (const auto& item : items) {
    if (item.prediction->decision == Decision::kRej) {
      for (auto& l : wrap("REJ " + item.expression, chars)) banner.push_back(std::move(l));
    }
  }
  const int banner_rows = banner.empty() ? 0 : static_cast<int>(banner.size()) * kGlyphHeight + 2;

  OverlayResult out;
  out.source_height = source.height;
  out.image = RgbImage(source.height + banner_rows, source.width);
  std::copy(source.pixels.begin(), source.pixels.end(), out.image.pixels.begin());

  int next_color = 0;
  for (const auto& item : items) {
    const auto& p = *item.prediction;
    if (p.decision == Decision::kRej) {
      out.color_index.push_back(-1);
      continue;
    }
    const int ci = next_color++ % static_cast<int>(palette.size());
    out.color_index.push_back(ci);
    if (!p.mask) continue;
    const auto& m = *p.mask;
    for (int r = 0; r < std::min(m.height(), source.height); ++r) {
      for (int c = 0; c < std::min(m.width(), source.width); ++c) {
        if (m.at(r, c)) std::copy(palette[ci].begin(), palette[ci].end(), out.image.at(r, c));
      }
    }
  }

  if (banner_rows > 0) {
    for (int r = source.height; r < out.image.height; ++r) {
      for (int c = 0; c < out.image.width; ++c) {
        auto* px = out.image.at(r, c);
        px[0] = 90;
        px[1] = 0;
        px[2] = 0;
      }
    }
    for (std::size_t i = 0; i < banner.size(); ++i) {
      draw_text(out.image, source.height + 1 + static_cast<int>(i) * kGlyphHeight, 1, banner[i],
                {255, 255, 255});
    }
  }
  return out;
}

}  // namespace greskit::cli
