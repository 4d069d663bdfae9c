#pragma once

#include <filesystem>

#include "greskit/toymodel.hpp"

namespace greskit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary layout: "GRESKIT\0", u32 version, u64 header length, header JSON
// ({"config", "vocabulary"}), u32 tensor count, then per tensor: u32 name
// length, name, u32 rank, u32 dims..., little-endian f64 values.
void save_checkpoint(const std::filesystem::path& path, const ToyModel& model);
// Throws IoError when the file cannot be read and ValidationError when it
// is not a checkpoint or does not match the model its header describes.
ToyModel load_checkpoint(const std::filesystem::path& path);

}  // namespace greskit
