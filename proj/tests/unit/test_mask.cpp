#include <doctest.h>

#include <random>

#include "greskit/error.hpp"
#include "greskit/mask.hpp"
#include "oracle.hpp"

using namespace greskit;

namespace {

BinaryMask random_mask(std::mt19937_64& rng, int h, int w, double p) {
  BinaryMask m(h, w);
  std::bernoulli_distribution on(p);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) m.set(r, c, on(rng));
  }
  return m;
}

}  // namespace

TEST_CASE("rle: first run counts background, scan is column-major") {
  BinaryMask m(2, 3);
  m.set(1, 0);  // column 0 = [0,1], column 1 = [0,0], column 2 = [1,1]
  m.set(0, 2);
  m.set(1, 2);
  const auto rle = encode_rle(m);
  CHECK(rle.counts == std::vector<std::int64_t>{1, 1, 2, 2});
  CHECK(decode_rle(rle) == m);

  BinaryMask full(2, 2);
  for (int r = 0; r < 2; ++r) {
    for (int c = 0; c < 2; ++c) full.set(r, c);
  }
  CHECK(encode_rle(full).counts == std::vector<std::int64_t>{0, 4});
  CHECK(encode_rle(BinaryMask(3, 3)).counts == std::vector<std::int64_t>{9});
}

TEST_CASE("rle: random roundtrip matches an independent decoder") {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 300; ++t) {
    const int h = 1 + static_cast<int>(rng() % 20), w = 1 + static_cast<int>(rng() % 20);
    const auto m = random_mask(rng, h, w, (rng() % 100) / 100.0);
    const auto rle = encode_rle(m);
    REQUIRE(decode_rle(rle) == m);
    CHECK(oracle::decode_counts(h, w, rle.counts) == oracle::bits_of(m));
    CHECK(rle_from_json(rle_to_json(rle)) == rle);
  }
}

TEST_CASE("rle: malformed counts are rejected") {
  CHECK_THROWS_AS(decode_rle({2, 2, {1, 2}}), MalformedEncoding);       // short
  CHECK_THROWS_AS(decode_rle({2, 2, {3, 2}}), MalformedEncoding);       // long
  CHECK_THROWS_AS(decode_rle({2, 2, {5, -1}}), MalformedEncoding);      // negative
  CHECK_THROWS_AS(decode_rle({2, 2, {2, 0, 2}}), MalformedEncoding);    // empty run past index 0
  CHECK_THROWS_AS(rle_from_json(nlohmann::json{{"size", {2}}, {"counts", {4}}}), ValidationError);
  CHECK_NOTHROW(decode_rle({2, 2, {0, 4}}));
}

TEST_CASE("iou and areas") {
  BinaryMask a(4, 4), b(4, 4);
  CHECK(iou(a, b) == 1.0);  // both empty
  a.set(0, 0);
  a.set(0, 1);
  b.set(0, 1);
  b.set(1, 1);
  CHECK(intersection_area(a, b) == 1);
  CHECK(union_area(a, b) == 3);
  CHECK(iou(a, b) == doctest::Approx(1.0 / 3.0));
  CHECK(iou(a, BinaryMask(4, 4)) == 0.0);
  CHECK_THROWS_AS(iou(a, BinaryMask(3, 4)), DimensionMismatch);
}

TEST_CASE("iou is symmetric and bounded") {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 100; ++t) {
    const auto a = random_mask(rng, 9, 7, 0.3), b = random_mask(rng, 9, 7, 0.3);
    const double v = iou(a, b);
    CHECK(v == iou(b, a));
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(iou(a, a) == 1.0);
  }
}

TEST_CASE("bounding boxes are inclusive") {
  BinaryMask m(10, 10);
  CHECK_FALSE(mask_to_bbox(m).has_value());
  m.set(2, 3);
  auto box = mask_to_bbox(m);
  REQUIRE(box);
  CHECK(*box == BBox{3, 2, 3, 2});
  CHECK(box->area() == 1);
  m.set(5, 7);
  box = mask_to_bbox(m);
  CHECK(*box == BBox{3, 2, 7, 5});
  CHECK(box->area() == 5 * 4);

  CHECK(bbox_iou({0, 0, 1, 1}, {0, 0, 1, 1}) == 1.0);
  CHECK(bbox_iou({0, 0, 1, 1}, {1, 0, 2, 1}) == doctest::Approx(2.0 / 6.0));
  CHECK(bbox_iou({0, 0, 0, 0}, {2, 2, 3, 3}) == 0.0);
}

TEST_CASE("merge is a pixelwise or") {
  std::mt19937_64 rng(3);
  std::vector<BinaryMask> parts;
  for (int i = 0; i < 3; ++i) parts.push_back(random_mask(rng, 5, 6, 0.2));
  const auto merged = merge_masks(parts, 5, 6);
  for (int r = 0; r < 5; ++r) {
    for (int c = 0; c < 6; ++c) {
      CHECK(merged.at(r, c) == (parts[0].at(r, c) || parts[1].at(r, c) || parts[2].at(r, c)));
    }
  }
  CHECK(positive_pixel_count(merge_masks({}, 5, 6)) == 0);
}
