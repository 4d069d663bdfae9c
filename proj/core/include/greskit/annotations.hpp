#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "greskit/mask.hpp"

namespace greskit {

using ImageId = std::int64_t;
using AnnId = std::int64_t;
using RefId = std::int64_t;

enum class Split { kTrain, kVal, kTestA, kTestB, kTest };

std::string_view split_name(Split split);
std::optional<Split> parse_split(std::string_view name);

struct ImageEntry {
  ImageId id = 0;
  std::string file_name;
  int height = 0;
  int width = 0;
};

struct ObjectAnnotation {
  AnnId id = 0;
  ImageId image_id = 0;
  RunLengthMask segmentation;
};

// One referring expression. An empty ann_ids list is an empty target: the
// expression names something that is not in the image.
struct ReferringSample {
  RefId ref_id = 0;
  ImageId image_id = 0;
  std::string expression;
  std::vector<AnnId> ann_ids;
  Split split = Split::kTrain;
};

inline bool is_empty_target(const ReferringSample& ref) { return ref.ann_ids.empty(); }

// Images, objects and referring expressions with referential integrity
// checked at construction. Immutable afterwards; segmentations stay
// run-length encoded until a mask is requested.
class Dataset {
 public:
  Dataset() = default;
  // Throws IntegrityError naming the first offending record.
  Dataset(std::vector<ImageEntry> images, std::vector<ObjectAnnotation> annotations,
          std::vector<ReferringSample> refs);

  static Dataset from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  const std::map<ImageId, ImageEntry>& images() const noexcept { return images_; }
  const std::map<AnnId, ObjectAnnotation>& annotations() const noexcept { return annotations_; }
  const std::map<RefId, ReferringSample>& refs() const noexcept { return refs_; }

  const ImageEntry& image(ImageId id) const;
  const ObjectAnnotation& annotation(AnnId id) const;
  const ReferringSample& ref(RefId id) const;
  bool has_ref(RefId id) const { return refs_.contains(id); }

  // Sorted by ref_id.
  std::vector<RefId> refs_in_split(Split split) const;
  // Sorted by ref_id.
  std::vector<RefId> refs_of_image(ImageId image_id) const;

 private:
  std::map<ImageId, ImageEntry> images_;
  std::map<AnnId, ObjectAnnotation> annotations_;
  std::map<RefId, ReferringSample> refs_;
};

Dataset load_dataset(const std::filesystem::path& path);
void save_dataset(const std::filesystem::path& path, const Dataset& dataset);

// Union of every object the expression refers to, at image resolution.
// Empty targets give an all-background mask.
BinaryMask ground_truth_mask(const Dataset& dataset, RefId ref_id);
BinaryMask object_mask(const Dataset& dataset, AnnId ann_id);

// Unknown split names yield an empty list and a logged warning.
std::vector<RefId> split_refs(const Dataset& dataset, std::string_view split);

}  // namespace greskit
