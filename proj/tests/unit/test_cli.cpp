#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "greskit/error.hpp"
#include "greskit/protocol.hpp"
#include "overlay.hpp"

using namespace greskit;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run greskit_cmd(std::vector<std::string> args) {
  args.insert(args.begin(), "greskit");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

// A synthesized dataset shared by the tests below.
struct Workspace {
  fs::path root;
  fs::path data;
  Workspace() {
    root = fs::temp_directory_path() / "greskit_cli_test";
    fs::remove_all(root);
    fs::create_directories(root);
    data = root / "data";
    const auto r = greskit_cmd({"synth", "--out", data.string(), "--samples", "40", "--seed", "11"});
    REQUIRE(r.code == 0);
  }
  fs::path path(const std::string& name) const { return root / name; }
};

const Workspace& ws() {
  static const Workspace w;
  return w;
}

fs::path write_predictions_file(const std::string& name, const std::vector<Prediction>& preds) {
  const auto p = ws().path(name);
  write_predictions(p, preds);
  return p;
}

std::vector<Prediction> perfect(const Dataset& ds, Split split) {
  std::vector<Prediction> out;
  for (auto id : ds.refs_in_split(split)) {
    Prediction p;
    p.ref_id = id;
    if (ds.ref(id).ann_ids.empty()) {
      p.decision = Decision::kRej;
    } else {
      p.mask = ground_truth_mask(ds, id);
    }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

TEST_CASE("synth writes a loadable dataset") {
  const auto& w = ws();
  CHECK(fs::exists(w.data / "dataset.json"));
  CHECK(fs::exists(w.data / "config.json"));
  const auto loaded = cli::load_dataset_dir(w.data);
  CHECK(loaded.dataset.refs().size() == 40);
  CHECK(loaded.images.size() == loaded.dataset.images().size());
  CHECK(greskit_cmd({"synth", "--out", w.path("zero").string(), "--samples", "0"}).code == 2);
}

TEST_CASE("eval scores perfect predictions as 1") {
  const auto ds = cli::load_dataset_dir(ws().data, false).dataset;
  const auto preds = write_predictions_file("perfect.jsonl", perfect(ds, Split::kTrain));
  const auto report = ws().path("perfect_report.json");
  const auto r = greskit_cmd({"eval", "--predictions", preds.string(), "--dataset", ws().data.string(),
                              "--split", "train", "--out", report.string()});
  REQUIRE(r.code == 0);
  const auto j = read_json(report);
  CHECK(j.at("gIoU").get<double>() == 1.0);
  CHECK(j.at("cIoU").get<double>() == 1.0);
  CHECK(j.at("N_acc").get<double>() == 1.0);
  CHECK(r.out.find("100.00") != std::string::npos);
  CHECK(fs::exists(ws().path("perfect_report.config.json")));

  const auto rz = greskit_cmd({"eval", "--predictions", preds.string(), "--dataset", ws().data.string(),
                               "--split", "train", "--suite", "refzom"});
  CHECK(rz.code == 0);
}

TEST_CASE("eval rejects predictions that do not match the split") {
  const auto ds = cli::load_dataset_dir(ws().data, false).dataset;
  auto preds = perfect(ds, Split::kTrain);
  preds.back().ref_id = 999999;
  const auto path = write_predictions_file("bad.jsonl", preds);
  const auto r = greskit_cmd({"eval", "--predictions", path.string(), "--dataset", ws().data.string(),
                              "--split", "train"});
  CHECK(r.code == static_cast<int>(ExitCode::kValidation));
  preds.pop_back();
  const auto missing = write_predictions_file("missing.jsonl", preds);
  CHECK(greskit_cmd({"eval", "--predictions", missing.string(), "--dataset", ws().data.string(), "--split",
                     "train"})
            .code != 0);
}

TEST_CASE("the two empty policies agree when rejections carry no pixels") {
  const auto ds = cli::load_dataset_dir(ws().data, false).dataset;
  const auto path = write_predictions_file("policy.jsonl", perfect(ds, Split::kTrain));
  const auto a = ws().path("explicit.json"), b = ws().path("pixel.json");
  REQUIRE(greskit_cmd({"eval", "--predictions", path.string(), "--dataset", ws().data.string(), "--split",
                       "train", "--out", a.string()})
              .code == 0);
  REQUIRE(greskit_cmd({"eval", "--predictions", path.string(), "--dataset", ws().data.string(), "--split",
                       "train", "--policy", "pixel:1", "--out", b.string()})
              .code == 0);
  CHECK(read_json(a).at("accumulators") == read_json(b).at("accumulators"));
}

TEST_CASE("overlay paints targets and lists rejections") {
  const auto ds = cli::load_dataset_dir(ws().data, true);
  // An image with at least one [SEG] and one [REJ] ref.
  ImageId chosen = -1;
  for (const auto& [img, _] : ds.dataset.images()) {
    bool has_seg = false, has_rej = false;
    for (auto r : ds.dataset.refs_of_image(img)) {
      (ds.dataset.ref(r).ann_ids.empty() ? has_rej : has_seg) = true;
    }
    if (has_seg && has_rej) {
      chosen = img;
      break;
    }
  }
  REQUIRE(chosen > 0);
  std::vector<Prediction> preds;
  for (const auto& p : perfect(ds.dataset, ds.dataset.ref(ds.dataset.refs_of_image(chosen)[0]).split)) {
    if (ds.dataset.ref(p.ref_id).image_id == chosen) preds.push_back(p);
  }
  const auto path = write_predictions_file("overlay.jsonl", preds);
  const auto out = ws().path("overlay");
  REQUIRE(greskit_cmd({"overlay", "--predictions", path.string(), "--dataset", ws().data.string(), "--out",
                       out.string()})
              .code == 0);
  const auto legend = read_json(out / "overlay.json");
  REQUIRE(legend.size() == 1);
  const auto image = read_ppm(out / legend[0].at("file").get<std::string>());
  const auto& source = ds.images.at(chosen);
  CHECK(legend[0].at("source_height").get<int>() == source.height);
  CHECK(image.height > source.height);  // banner present

  std::set<std::vector<int>> colors;
  const Prediction* last_seg = nullptr;
  std::vector<int> last_color;
  for (const auto& e : legend[0].at("refs")) {
    const auto& p = *std::find_if(preds.begin(), preds.end(),
                                  [&](const Prediction& q) { return q.ref_id == e.at("ref_id").get<RefId>(); });
    if (p.decision == Decision::kRej) {
      CHECK(e.at("color").is_null());
      continue;
    }
    last_seg = &p;
    last_color = e.at("color").get<std::vector<int>>();
    colors.insert(last_color);
  }
  REQUIRE(last_seg != nullptr);
  // Painted pixels only take legend colors; the last target is painted on top.
  for (int r = 0; r < source.height; ++r) {
    for (int c = 0; c < source.width; ++c) {
      const auto* px = image.at(r, c);
      const auto* src = source.at(r, c);
      const std::vector<int> rgb{px[0], px[1], px[2]};
      if (!std::equal(px, px + 3, src)) CHECK(colors.contains(rgb));
      if (last_seg->mask->at(r, c)) CHECK(rgb == last_color);
    }
  }
}

TEST_CASE("render_overlay gives distinct colors and a banner only for rejections") {
  RgbImage src(20, 20);
  Prediction a, b, rej;
  a.ref_id = 1;
  a.mask = BinaryMask(20, 20);
  a.mask->set(1, 1);
  b.ref_id = 2;
  b.mask = BinaryMask(20, 20);
  b.mask->set(5, 5);
  rej.ref_id = 3;
  rej.decision = Decision::kRej;

  const std::vector<cli::OverlayItem> two{{&a, "red circle"}, {&b, "blue square"}};
  const auto r = cli::render_overlay(src, two);
  CHECK(r.image.height == 20);
  CHECK(r.color_index == std::vector<int>{0, 1});
  const auto& pal = cli::overlay_palette();
  CHECK(std::equal(pal[0].begin(), pal[0].end(), r.image.at(1, 1)));
  CHECK(std::equal(pal[1].begin(), pal[1].end(), r.image.at(5, 5)));

  const std::vector<cli::OverlayItem> only_rej{{&rej, "green triangle"}};
  const auto banner = cli::render_overlay(src, only_rej);
  CHECK(banner.image.height > 20);
  CHECK(banner.color_index == std::vector<int>{-1});
  for (int r2 = 0; r2 < 20; ++r2) {
    for (int c = 0; c < 20; ++c) CHECK(banner.image.at(r2, c)[0] == 0);
  }
  int text = 0;
  for (int r2 = 20; r2 < banner.image.height; ++r2) {
    for (int c = 0; c < 20; ++c) text += banner.image.at(r2, c)[1] == 255;
  }
  CHECK(text > 0);
}

TEST_CASE("gradcheck modes") {
  auto r = greskit_cmd({"gradcheck", "--mode", "linear"});
  CHECK(r.code == 0);
  CHECK(json::parse(r.out).at("max_rel_error").get<double>() < 1e-7);
  r = greskit_cmd({"gradcheck", "--mode", "softmax"});
  CHECK(r.code == 0);
  r = greskit_cmd({"gradcheck", "--mode", "linear", "--epsilon", "1e-2", "--tolerance", "1"});
  CHECK(std::isfinite(json::parse(r.out).at("max_rel_error").get<double>()));
}

TEST_CASE("train and infer are reproducible") {
  const auto& w = ws();
  const auto cfg = w.path("small.json");
  std::ofstream(cfg) << R"({"model": {"d_model": 32, "decoder_layers": 1}, "train": {"batch_size": 2}})";
  const auto run_dir = w.path("run");
  auto r = greskit_cmd({"train", "--dataset", w.data.string(), "--out", run_dir.string(), "--config", cfg.string(),
                        "--steps", "3", "--seed", "2"});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(run_dir / "model.ckpt"));
  CHECK(fs::exists(run_dir / "train_log.jsonl"));
  CHECK(fs::exists(run_dir / "config.json"));

  const auto ds = cli::load_dataset_dir(w.data, false).dataset;
  const auto p1 = w.path("p1.jsonl"), p2 = w.path("p2.jsonl");
  for (const auto& p : {p1, p2}) {
    REQUIRE(greskit_cmd({"infer", "--checkpoint", (run_dir / "model.ckpt").string(), "--dataset",
                         w.data.string(), "--split", "train", "--out", p.string()})
                .code == 0);
  }
  CHECK(slurp(p1) == slurp(p2));
  const auto preds = read_predictions(p1);
  CHECK(preds.size() == ds.refs_in_split(Split::kTrain).size());
  std::istringstream lines(slurp(p1));
  std::string line;
  while (std::getline(lines, line)) {
    const auto j = json::parse(line);
    if (j.at("decision") == "rej") CHECK(j.at("mask").is_null());
  }
}

TEST_CASE("usage errors exit with 2") {
  CHECK(greskit_cmd({}).code == 2);
  CHECK(greskit_cmd({"bogus"}).code == 2);
  CHECK(greskit_cmd({"eval", "--predictions", "x"}).code == 2);
  CHECK(greskit_cmd({"eval", "--predictions", "x", "--dataset", "y", "--suite", "nope"}).code == 2);
  CHECK(greskit_cmd({"--help"}).code == 0);
  CHECK(greskit_cmd({"eval", "--predictions", ws().path("nope.jsonl").string(), "--dataset",
                     ws().data.string()})
            .code == static_cast<int>(ExitCode::kIo));
}
