#include <doctest.h>

#include <filesystem>

#include "greskit/annotations.hpp"
#include "greskit/error.hpp"
#include "oracle.hpp"

using namespace greskit;

namespace {

RunLengthMask box_rle(int h, int w, int r0, int c0, int r1, int c1) {
  BinaryMask m(h, w);
  for (int r = r0; r <= r1; ++r) {
    for (int c = c0; c <= c1; ++c) m.set(r, c);
  }
  return encode_rle(m);
}

Dataset small() {
  return Dataset({{1, "a.ppm", 8, 8}, {2, "b.ppm", 4, 6}},
                 {{10, 1, box_rle(8, 8, 0, 0, 1, 1)}, {11, 1, box_rle(8, 8, 4, 4, 5, 6)}},
                 {{100, 1, "left", {10}, Split::kVal},
                  {101, 1, "both", {10, 11}, Split::kVal},
                  {102, 2, "nothing", {}, Split::kTestA},
                  {103, 1, "train one", {11}, Split::kTrain}});
}

}  // namespace

TEST_CASE("dataset lookups and splits") {
  const auto ds = small();
  CHECK(ds.refs_in_split(Split::kVal) == std::vector<RefId>{100, 101});
  CHECK(ds.refs_of_image(1) == std::vector<RefId>{100, 101, 103});
  CHECK(split_refs(ds, "testA") == std::vector<RefId>{102});
  CHECK(split_refs(ds, "nope").empty());
  CHECK(is_empty_target(ds.ref(102)));
  CHECK_THROWS_AS(ds.ref(5), IntegrityError);
}

TEST_CASE("ground truth is the union of the referred objects") {
  const auto ds = small();
  CHECK(positive_pixel_count(ground_truth_mask(ds, 100)) == 4);
  CHECK(positive_pixel_count(ground_truth_mask(ds, 101)) == 4 + 6);
  const auto empty = ground_truth_mask(ds, 102);
  CHECK(empty.height() == 4);
  CHECK(empty.width() == 6);
  CHECK(positive_pixel_count(empty) == 0);
  CHECK(oracle::bits_of(ground_truth_mask(ds, 101)) == oracle::ground_truth(ds, ds.ref(101)));
}

TEST_CASE("referential integrity is checked at construction") {
  const auto rle = box_rle(8, 8, 0, 0, 0, 0);
  CHECK_THROWS_AS(Dataset({{1, "a", 8, 8}}, {{10, 2, rle}}, {}), IntegrityError);           // unknown image
  CHECK_THROWS_AS(Dataset({{1, "a", 8, 8}}, {}, {{1, 1, "x", {99}, Split::kVal}}), IntegrityError);
  CHECK_THROWS_AS(Dataset({{1, "a", 8, 8}, {1, "b", 8, 8}}, {}, {}), IntegrityError);        // duplicate id
  CHECK_THROWS_AS(Dataset({{1, "a", 4, 4}}, {{10, 1, rle}}, {}), ValidationError);           // wrong size
  CHECK_THROWS_AS(Dataset({{1, "a", 8, 8}, {2, "b", 8, 8}}, {{10, 1, rle}},
                          {{1, 2, "x", {10}, Split::kVal}}),
                  IntegrityError);  // object on another image
}

TEST_CASE("dataset json roundtrip") {
  const auto ds = small();
  const auto back = Dataset::from_json(ds.to_json());
  CHECK(back.to_json() == ds.to_json());
  const auto path = std::filesystem::temp_directory_path() / "greskit_ds_roundtrip.json";
  save_dataset(path, ds);
  CHECK(load_dataset(path).to_json() == ds.to_json());
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_dataset("/nonexistent/greskit.json"), IoError);
  CHECK_THROWS_AS(Dataset::from_json(nlohmann::json{{"images", 3}}), ValidationError);
}

TEST_CASE("split names") {
  for (auto s : {Split::kTrain, Split::kVal, Split::kTestA, Split::kTestB, Split::kTest}) {
    CHECK(parse_split(split_name(s)) == s);
  }
  CHECK_FALSE(parse_split("Val").has_value());
}
