#include "greskit/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "greskit/error.hpp"

namespace greskit {
namespace {

using nlohmann::json;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Distribution helpers written out so the stream is identical across
// standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  int below(int n) { return static_cast<int>(uniform() * n); }
  int between(int lo, int hi) { return lo + below(hi - lo + 1); }

 private:
  std::mt19937_64 engine_;
};

struct PlacedShape {
  ShapeKind kind;
  int color;
  int cx, cy, radius;
};

bool inside(const PlacedShape& s, double px, double py) {
  const double dx = px - s.cx;
  const double dy = py - s.cy;
  const double r = s.radius;
  switch (s.kind) {
    case ShapeKind::kCircle: return dx * dx + dy * dy <= r * r;
    case ShapeKind::kSquare: return std::abs(dx) <= r && std::abs(dy) <= r;
    case ShapeKind::kTriangle: {
      // Apex up; base along y = cy + r.
      if (dy > r || dy < -r) return false;
      const double half = (dy + r) / 2.0;
      return std::abs(dx) <= half;
    }
  }
  return false;
}

BinaryMask rasterize(const PlacedShape& s, int size) {
  BinaryMask m(size, size);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      if (inside(s, c + 0.5, r + 0.5)) m.set(r, c);
    }
  }
  return m;
}

std::string position_of(const PlacedShape& s, int size) {
  const bool top = s.cy < size / 2;
  const bool left = s.cx < size / 2;
  return position_names()[(top ? 0 : 2) + (left ? 0 : 1)];
}

struct ImageDraft {
  Split split = Split::kTrain;
  RgbImage image;
  std::vector<BinaryMask> objects;
  struct Ref {
    std::string expression;
    std::vector<int> objects;  // indices into `objects`
  };
  std::vector<Ref> refs;
};

ImageDraft draft_image(const SynthConfig& cfg, std::uint64_t index, int n_refs) {
  Rng rng(mix_seed(cfg.seed, index));
  ImageDraft d;
  const double u = rng.uniform();
  if (u < cfg.val_fraction) {
    d.split = Split::kVal;
  } else if (u < cfg.val_fraction + cfg.testa_fraction) {
    d.split = Split::kTestA;
  } else if (u < cfg.val_fraction + cfg.testa_fraction + cfg.testb_fraction) {
    d.split = Split::kTestB;
  }

  const int size = cfg.image_size;
  const int r_lo = std::max(3, size / 8);
  const int r_hi = std::max(r_lo, size / 5);
  const int n_combos = static_cast<int>(cfg.shapes.size() * cfg.colors.size());
  const int wanted = rng.between(1, cfg.max_shapes);

  std::vector<PlacedShape> placed;
  std::set<int> used_combos;
  for (int attempt = 0; attempt < 200 && static_cast<int>(placed.size()) < wanted; ++attempt) {
    PlacedShape s;
    const int combo = rng.below(n_combos);
    s.kind = cfg.shapes[combo / cfg.colors.size()];
    s.color = combo % static_cast<int>(cfg.colors.size());
    s.radius = rng.between(r_lo, r_hi);
    s.cx = rng.between(s.radius, size - 1 - s.radius);
    s.cy = rng.between(s.radius, size - 1 - s.radius);
    if (used_combos.contains(combo)) continue;
    bool clear = true;
    for (const auto& o : placed) {
      const int gap = s.radius + o.radius + 2;
      if (std::abs(s.cx - o.cx) < gap && std::abs(s.cy - o.cy) < gap) {
        clear = false;
        break;
      }
    }
    if (!clear) continue;
    used_combos.insert(combo);
    placed.push_back(s);
  }

  d.image = RgbImage(size, size);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      auto* px = d.image.at(r, c);
      px[0] = px[1] = px[2] = 24;
    }
  }
  for (const auto& s : placed) {
    auto mask = rasterize(s, size);
    const auto& rgb = cfg.colors[s.color].rgb;
    for (int r = 0; r < size; ++r) {
      for (int c = 0; c < size; ++c) {
        if (!mask.at(r, c)) continue;
        std::copy(rgb.begin(), rgb.end(), d.image.at(r, c));
      }
    }
    d.objects.push_back(std::move(mask));
  }

  auto describe = [&](const PlacedShape& s) {
    std::string text = cfg.colors[s.color].name + " " + shape_name(s.kind);
    if (rng.uniform() < cfg.position_prob) text += " at " + position_of(s, size);
    return text;
  };

  const int n_objects = static_cast<int>(placed.size());
  for (int k = 0; k < n_refs; ++k) {
    ImageDraft::Ref ref;
    if (rng.uniform() < cfg.empty_target_prob) {
      std::vector<int> absent;
      for (int combo = 0; combo < n_combos; ++combo) {
        if (!used_combos.contains(combo)) absent.push_back(combo);
      }
      const int combo = absent[rng.below(static_cast<int>(absent.size()))];
      PlacedShape ghost{cfg.shapes[combo / cfg.colors.size()],
                        combo % static_cast<int>(cfg.colors.size()), 0, 0, 0};
      ref.expression = cfg.colors[ghost.color].name + " " + shape_name(ghost.kind);
      if (rng.uniform() < cfg.position_prob) {
        ref.expression += " at " + position_names()[rng.below(4)];
      }
    } else if (n_objects >= 2 && rng.uniform() < cfg.multi_target_prob) {
      const int count = n_objects >= 3 ? rng.between(2, 3) : 2;
      std::vector<int> order(n_objects);
      for (int i = 0; i < n_objects; ++i) order[i] = i;
      for (int i = 0; i < count; ++i) {
        std::swap(order[i], order[i + rng.below(n_objects - i)]);
      }
      for (int i = 0; i < count; ++i) {
        if (i > 0) ref.expression += " and ";
        ref.expression += describe(placed[order[i]]);
        ref.objects.push_back(order[i]);
      }
    } else {
      const int obj = rng.below(n_objects);
      ref.expression = describe(placed[obj]);
      ref.objects.push_back(obj);
    }
    d.refs.push_back(std::move(ref));
  }
  return d;
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(splitmix64(seed) ^ (index * 0xD1B54A32D192ED03ULL));
}

std::string shape_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kCircle: return "circle";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
  }
  return "circle";
}

ShapeKind parse_shape(const std::string& name) {
  if (name == "circle") return ShapeKind::kCircle;
  if (name == "square") return ShapeKind::kSquare;
  if (name == "triangle") return ShapeKind::kTriangle;
  throw ConfigError("unknown shape kind \"" + name + "\"");
}

std::vector<NamedColor> default_palette() {
  return {{"red", {220, 50, 50}}, {"green", {50, 200, 70}}, {"blue", {60, 90, 235}}};
}

const std::vector<std::string>& position_names() {
  static const std::vector<std::string> names{"top left", "top right", "bottom left",
                                              "bottom right"};
  return names;
}

std::vector<std::string> grammar_words(const SynthConfig& config) {
  std::vector<std::string> words;
  for (const auto& c : config.colors) words.push_back(c.name);
  for (auto s : config.shapes) words.push_back(shape_name(s));
  for (const char* w : {"at", "and", "top", "bottom", "left", "right"}) words.emplace_back(w);
  return words;
}

void SynthConfig::validate() const {
  if (image_size < 16) throw ConfigError("image_size must be >= 16");
  if (samples < 1) throw ConfigError("samples must be >= 1");
  if (refs_per_image < 1) throw ConfigError("refs_per_image must be >= 1");
  if (shapes.empty()) throw ConfigError("shape set is empty");
  if (colors.empty()) throw ConfigError("color palette is empty");
  if (max_shapes < 1) throw ConfigError("max_shapes must be >= 1");
  for (double p : {empty_target_prob, multi_target_prob, position_prob, val_fraction,
                   testa_fraction, testb_fraction}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("probabilities must lie in [0,1]");
  }
  if (val_fraction + testa_fraction + testb_fraction > 1.0) {
    throw ConfigError("split fractions exceed 1");
  }
  std::set<std::pair<ShapeKind, std::string>> combos;
  for (auto s : shapes) {
    for (const auto& c : colors) {
      if (c.name.empty()) throw ConfigError("color names must be non-empty");
      combos.emplace(s, c.name);
    }
  }
  if (combos.size() != shapes.size() * colors.size()) {
    throw ConfigError("duplicate shape kinds or color names");
  }
  const int n_combos = static_cast<int>(combos.size());
  if (empty_target_prob > 0.0 && max_shapes >= n_combos) {
    throw ConfigError("max_shapes leaves no absent color/shape combination for empty targets");
  }
}

json SynthConfig::to_json() const {
  json jshapes = json::array();
  for (auto s : shapes) jshapes.push_back(shape_name(s));
  json jcolors = json::array();
  for (const auto& c : colors) jcolors.push_back({{"name", c.name}, {"rgb", c.rgb}});
  return json{{"image_size", image_size},
              {"samples", samples},
              {"refs_per_image", refs_per_image},
              {"shapes", jshapes},
              {"colors", jcolors},
              {"max_shapes", max_shapes},
              {"empty_target_prob", empty_target_prob},
              {"multi_target_prob", multi_target_prob},
              {"position_prob", position_prob},
              {"val_fraction", val_fraction},
              {"testA_fraction", testa_fraction},
              {"testB_fraction", testb_fraction},
              {"seed", seed}};
}

SynthConfig SynthConfig::from_json(const json& j) {
  SynthConfig c;
  if (!j.is_object()) throw ConfigError("synth config must be a JSON object");
  try {
    c.image_size = j.value("image_size", c.image_size);
    c.samples = j.value("samples", c.samples);
    c.refs_per_image = j.value("refs_per_image", c.refs_per_image);
    if (j.contains("shapes")) {
      c.shapes.clear();
      for (const auto& s : j.at("shapes")) c.shapes.push_back(parse_shape(s.get<std::string>()));
    }
    if (j.contains("colors")) {
      c.colors.clear();
      for (const auto& col : j.at("colors")) {
        c.colors.push_back({col.at("name").get<std::string>(),
                            col.at("rgb").get<std::array<std::uint8_t, 3>>()});
      }
    }
    c.max_shapes = j.value("max_shapes", c.max_shapes);
    c.empty_target_prob = j.value("empty_target_prob", c.empty_target_prob);
    c.multi_target_prob = j.value("multi_target_prob", c.multi_target_prob);
    c.position_prob = j.value("position_prob", c.position_prob);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.testa_fraction = j.value("testA_fraction", c.testa_fraction);
    c.testb_fraction = j.value("testB_fraction", c.testb_fraction);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("synth config: ") + e.what());
  }
  return c;
}

SynthOutput synth_generate(const SynthConfig& config, int jobs) {
  config.validate();
  const int n_images = (config.samples + config.refs_per_image - 1) / config.refs_per_image;
  std::vector<ImageDraft> drafts(static_cast<std::size_t>(n_images));
  auto work = [&](int begin, int end) {
    for (int i = begin; i < end; ++i) {
      const int n_refs = std::min(config.refs_per_image, config.samples - i * config.refs_per_image);
      drafts[i] = draft_image(config, static_cast<std::uint64_t>(i), n_refs);
    }
  };
  jobs = std::clamp(jobs, 1, std::max(1, n_images));
  if (jobs == 1) {
    work(0, n_images);
  } else {
    std::vector<std::jthread> pool;
    const int chunk = (n_images + jobs - 1) / jobs;
    for (int b = 0; b < n_images; b += chunk) pool.emplace_back(work, b, std::min(n_images, b + chunk));
  }

  std::vector<ImageEntry> images;
  std::vector<ObjectAnnotation> anns;
  std::vector<ReferringSample> refs;
  SynthOutput out;
  AnnId next_ann = 1;
  RefId next_ref = 1;
  for (int i = 0; i < n_images; ++i) {
    auto& d = drafts[i];
    const ImageId image_id = i + 1;
    std::ostringstream name;
    name << "images/";
    name.width(6);
    name.fill('0');
    name << image_id << ".ppm";
    images.push_back({image_id, name.str(), config.image_size, config.image_size});
    std::vector<AnnId> ids;
    for (const auto& m : d.objects) {
      ids.push_back(next_ann);
      anns.push_back({next_ann++, image_id, encode_rle(m)});
    }
    for (const auto& r : d.refs) {
      ReferringSample s{next_ref++, image_id, r.expression, {}, d.split};
      for (int o : r.objects) s.ann_ids.push_back(ids[o]);
      refs.push_back(std::move(s));
    }
    out.images.emplace(image_id, std::move(d.image));
  }
  out.dataset = Dataset(std::move(images), std::move(anns), std::move(refs));
  return out;
}

void write_synth_output(const std::filesystem::path& dir, const SynthOutput& out,
                        const SynthConfig& config) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create " + (dir / "images").string() + ": " + ec.message());
  const std::string dataset_text = out.dataset.to_json().dump() + "\n";
  {
    std::ofstream f(dir / "dataset.json");
    if (!f) throw IoError("cannot write " + (dir / "dataset.json").string());
    f << dataset_text;
  }
  for (const auto& [id, img] : out.images) {
    write_ppm(dir / out.dataset.image(id).file_name, img);
  }
  json manifest{{"seed", config.seed},
                {"images", out.dataset.images().size()},
                {"annotations", out.dataset.annotations().size()},
                {"refs", out.dataset.refs().size()},
                {"dataset_fnv1a64", hex64(fnv1a(dataset_text))},
                {"config", config.to_json()}};
  std::ofstream f(dir / "manifest.json");
  if (!f) throw IoError("cannot write " + (dir / "manifest.json").string());
  f << manifest.dump(2) << '\n';
}

std::map<ImageId, RgbImage> load_images(const Dataset& dataset, const std::filesystem::path& root) {
  std::map<ImageId, RgbImage> out;
  for (const auto& [id, entry] : dataset.images()) {
    auto img = read_ppm(root / entry.file_name);
    if (img.height != entry.height || img.width != entry.width) {
      throw IntegrityError("image " + std::to_string(id) + ": file size differs from dataset entry");
    }
    out.emplace(id, std::move(img));
  }
  return out;
}

}  // namespace greskit
