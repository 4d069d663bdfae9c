#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "greskit/annotations.hpp"
#include "greskit/image.hpp"

namespace greskit {

enum class ShapeKind { kCircle, kSquare, kTriangle };

std::string shape_name(ShapeKind kind);
ShapeKind parse_shape(const std::string& name);

struct NamedColor {
  std::string name;
  std::array<std::uint8_t, 3> rgb{};
};

std::vector<NamedColor> default_palette();
// Quadrant words used by the "at <position>" qualifier.
const std::vector<std::string>& position_names();

// Synthetic GRES benchmark: flat-colored shapes on a dark background,
// referred to by "<color> <shape> [at <position>]" expressions, with
// "and"-joined multi-object referents and absent color/shape combinations
// as empty targets.
struct SynthConfig {
  int image_size = 64;
  int samples = 2000;  // number of referring expressions
  int refs_per_image = 5;
  std::vector<ShapeKind> shapes{ShapeKind::kCircle, ShapeKind::kSquare, ShapeKind::kTriangle};
  std::vector<NamedColor> colors = default_palette();
  int max_shapes = 3;
  double empty_target_prob = 0.3;
  double multi_target_prob = 0.2;
  double position_prob = 0.3;
  double val_fraction = 0.1;
  double testa_fraction = 0.1;
  double testb_fraction = 0.1;
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void validate() const;

  nlohmann::json to_json() const;
  // Missing keys keep their defaults.
  static SynthConfig from_json(const nlohmann::json& j);
};

struct SynthOutput {
  Dataset dataset;
  std::map<ImageId, RgbImage> images;
};

// Pure function of the config. Each image (and the refs on it) draws from
// its own generator seeded by hash(seed, image index), so the result does
// not depend on `jobs`.
SynthOutput synth_generate(const SynthConfig& config, int jobs = 1);

// Writes dataset.json, images/<id>.ppm and manifest.json under `dir`.
void write_synth_output(const std::filesystem::path& dir, const SynthOutput& out,
                        const SynthConfig& config);

// Loads the images referenced by a dataset, resolving file names against `root`.
std::map<ImageId, RgbImage> load_images(const Dataset& dataset, const std::filesystem::path& root);

// Every word the expression grammar can produce for this config.
std::vector<std::string> grammar_words(const SynthConfig& config);

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace greskit
