#include "greskit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "greskit/error.hpp"

namespace greskit {
namespace {

constexpr char kMagic[8] = {'G', 'R', 'E', 'S', 'K', 'I', 'T', '\0'};

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

template <typename T>
void put(std::ostream& os, T v) {
  v = to_little(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw ValidationError("checkpoint " + path.string() + " is truncated");
  }
  return to_little(v);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ToyModel& model) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  const nlohmann::json header{{"config", model.config().to_json()},
                              {"vocabulary", model.vocab().words()}};
  const std::string text = header.dump();
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto& params = model.params();
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (int i = 0; i < params.size(); ++i) {
    const auto& name = params.name(i);
    const auto& t = params.value(i);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (double v : t.values()) put<double>(os, v);
  }
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

ToyModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  char magic[sizeof(kMagic)];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ValidationError(path.string() + " is not a checkpoint");
  }
  const auto version = get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw ValidationError("checkpoint version " + std::to_string(version) + " is not supported");
  }
  const auto header_len = get<std::uint64_t>(is, path);
  if (header_len > (1u << 26)) throw ValidationError("checkpoint header is implausibly large");
  std::string text(header_len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(header_len))) {
    throw ValidationError("checkpoint " + path.string() + " is truncated");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint header: ") + e.what());
  }
  if (!header.contains("config") || !header.contains("vocabulary")) {
    throw ValidationError("checkpoint header lacks config or vocabulary");
  }
  ToyModel model(ToyConfig::from_json(header.at("config")),
                 Vocabulary(header.at("vocabulary").get<std::vector<std::string>>()));

  auto& params = model.params();
  const auto count = get<std::uint32_t>(is, path);
  if (count != static_cast<std::uint32_t>(params.size())) {
    throw ValidationError("checkpoint holds " + std::to_string(count) + " tensors, model has " +
                          std::to_string(params.size()));
  }
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name_len = get<std::uint32_t>(is, path);
    if (name_len > 4096) throw ValidationError("checkpoint tensor name too long");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw ValidationError("checkpoint is truncated");
    const int idx = params.index(name);
    auto& t = params.value(idx);
    const auto rank = get<std::uint32_t>(is, path);
    std::vector<int> shape;
    for (std::uint32_t r = 0; r < rank && r < 8; ++r) shape.push_back(static_cast<int>(get<std::uint32_t>(is, path)));
    if (rank >= 8 || shape != t.shape()) {
      throw ValidationError("checkpoint tensor " + name + " has shape " + ad::shape_string(shape) +
                            ", model expects " + ad::shape_string(t.shape()));
    }
    for (auto& v : t.values()) v = get<double>(is, path);
  }
  return model;
}

}  // namespace greskit
