#pragma once

#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "greskit/annotations.hpp"
#include "greskit/image.hpp"

namespace greskit::cli {

// Runs one command line (args[0] is the program name) and returns the
// process exit code. Library errors map to their ExitCode; usage errors
// exit with 2.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Applies GRESKIT_LOG (trace|debug|info|warn|error|critical|off).
void configure_logging();

struct LoadedDataset {
  Dataset dataset;
  std::map<ImageId, RgbImage> images;
};

// `path` is a dataset directory (holding dataset.json) or a dataset file;
// image file names resolve against the directory.
LoadedDataset load_dataset_dir(const std::filesystem::path& path, bool with_images = true);

}  // namespace greskit::cli
