#include "greskit/annotations.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "greskit/error.hpp"

namespace greskit {
namespace {

using nlohmann::json;

const json& field(const json& record, const char* name, const std::string& where) {
  if (!record.is_object() || !record.contains(name)) {
    throw ValidationError(where + ": missing field \"" + name + "\"");
  }
  return record.at(name);
}

std::int64_t int_field(const json& record, const char* name, const std::string& where) {
  const auto& v = field(record, name, where);
  if (!v.is_number_integer()) {
    throw ValidationError(where + ": field \"" + name + "\" must be an integer");
  }
  return v.get<std::int64_t>();
}

std::string string_field(const json& record, const char* name, const std::string& where) {
  const auto& v = field(record, name, where);
  if (!v.is_string()) throw ValidationError(where + ": field \"" + name + "\" must be a string");
  return v.get<std::string>();
}

const json& array_field(const json& record, const char* name, const std::string& where) {
  const auto& v = field(record, name, where);
  if (!v.is_array()) throw ValidationError(where + ": field \"" + name + "\" must be an array");
  return v;
}

std::string label(const char* collection, std::size_t index, const char* key, std::int64_t id) {
  std::ostringstream os;
  os << collection << '[' << index << "] (" << key << ' ' << id << ')';
  return os.str();
}

}  // namespace

std::string_view split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTestA: return "testA";
    case Split::kTestB: return "testB";
    case Split::kTest: return "test";
  }
  return "train";
}

std::optional<Split> parse_split(std::string_view name) {
  for (auto s : {Split::kTrain, Split::kVal, Split::kTestA, Split::kTestB, Split::kTest}) {
    if (split_name(s) == name) return s;
  }
  return std::nullopt;
}

Dataset::Dataset(std::vector<ImageEntry> images, std::vector<ObjectAnnotation> annotations,
                 std::vector<ReferringSample> refs) {
  for (auto& img : images) {
    if (img.height < 1 || img.width < 1) {
      throw IntegrityError("image " + std::to_string(img.id) + ": non-positive dimensions");
    }
    if (!images_.emplace(img.id, std::move(img)).second) {
      throw IntegrityError("duplicate image id " + std::to_string(img.id));
    }
  }
  for (auto& ann : annotations) {
    const auto it = images_.find(ann.image_id);
    if (it == images_.end()) {
      throw IntegrityError("annotation " + std::to_string(ann.id) + ": unknown image_id " +
                           std::to_string(ann.image_id));
    }
    if (ann.segmentation.height != it->second.height ||
        ann.segmentation.width != it->second.width) {
      throw IntegrityError("annotation " + std::to_string(ann.id) +
                           ": segmentation size does not match image " +
                           std::to_string(ann.image_id));
    }
    try {
      validate_rle(ann.segmentation);
    } catch (const MalformedEncoding& e) {
      throw IntegrityError("annotation " + std::to_string(ann.id) + ": " + e.what());
    }
    const auto id = ann.id;
    if (!annotations_.emplace(id, std::move(ann)).second) {
      throw IntegrityError("duplicate annotation id " + std::to_string(id));
    }
  }
  for (auto& ref : refs) {
    const auto id = ref.ref_id;
    if (!images_.contains(ref.image_id)) {
      throw IntegrityError("ref " + std::to_string(id) + ": unknown image_id " +
                           std::to_string(ref.image_id));
    }
    std::set<AnnId> seen;
    for (const auto ann_id : ref.ann_ids) {
      const auto it = annotations_.find(ann_id);
      if (it == annotations_.end()) {
        throw IntegrityError("ref " + std::to_string(id) + ": ann_id " + std::to_string(ann_id) +
                             " does not resolve to an annotation");
      }
      if (it->second.image_id != ref.image_id) {
        throw IntegrityError("ref " + std::to_string(id) + ": ann_id " + std::to_string(ann_id) +
                             " belongs to a different image");
      }
      if (!seen.insert(ann_id).second) {
        throw IntegrityError("ref " + std::to_string(id) + ": duplicate ann_id " +
                             std::to_string(ann_id));
      }
    }
    if (!refs_.emplace(id, std::move(ref)).second) {
      throw IntegrityError("duplicate ref_id " + std::to_string(id));
    }
  }
}

const ImageEntry& Dataset::image(ImageId id) const {
  const auto it = images_.find(id);
  if (it == images_.end()) throw IntegrityError("unknown image_id " + std::to_string(id));
  return it->second;
}

const ObjectAnnotation& Dataset::annotation(AnnId id) const {
  const auto it = annotations_.find(id);
  if (it == annotations_.end()) throw IntegrityError("unknown ann_id " + std::to_string(id));
  return it->second;
}

const ReferringSample& Dataset::ref(RefId id) const {
  const auto it = refs_.find(id);
  if (it == refs_.end()) throw IntegrityError("unknown ref_id " + std::to_string(id));
  return it->second;
}

std::vector<RefId> Dataset::refs_in_split(Split split) const {
  std::vector<RefId> out;
  for (const auto& [id, ref] : refs_) {
    if (ref.split == split) out.push_back(id);
  }
  return out;
}

std::vector<RefId> Dataset::refs_of_image(ImageId image_id) const {
  std::vector<RefId> out;
  for (const auto& [id, ref] : refs_) {
    if (ref.image_id == image_id) out.push_back(id);
  }
  return out;
}

Dataset Dataset::from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("dataset: top level must be an object");
  std::vector<ImageEntry> images;
  std::vector<ObjectAnnotation> annotations;
  std::vector<ReferringSample> refs;

  const auto& jimages = array_field(j, "images", "dataset");
  for (std::size_t i = 0; i < jimages.size(); ++i) {
    const auto& r = jimages[i];
    const std::string where = "images[" + std::to_string(i) + "]";
    ImageEntry e;
    e.id = int_field(r, "id", where);
    const std::string w = label("images", i, "id", e.id);
    e.file_name = string_field(r, "file_name", w);
    e.height = static_cast<int>(int_field(r, "height", w));
    e.width = static_cast<int>(int_field(r, "width", w));
    images.push_back(std::move(e));
  }

  const auto& janns = array_field(j, "annotations", "dataset");
  for (std::size_t i = 0; i < janns.size(); ++i) {
    const auto& r = janns[i];
    ObjectAnnotation a;
    a.id = int_field(r, "id", "annotations[" + std::to_string(i) + "]");
    const std::string w = label("annotations", i, "id", a.id);
    a.image_id = int_field(r, "image_id", w);
    try {
      a.segmentation = rle_from_json(field(r, "segmentation", w));
    } catch (const MalformedEncoding& e) {
      throw ValidationError(w + ": " + e.what());
    }
    annotations.push_back(std::move(a));
  }

  const auto& jrefs = array_field(j, "refs", "dataset");
  for (std::size_t i = 0; i < jrefs.size(); ++i) {
    const auto& r = jrefs[i];
    ReferringSample s;
    s.ref_id = int_field(r, "ref_id", "refs[" + std::to_string(i) + "]");
    const std::string w = label("refs", i, "ref_id", s.ref_id);
    s.image_id = int_field(r, "image_id", w);
    s.expression = string_field(r, "expression", w);
    for (const auto& a : array_field(r, "ann_ids", w)) {
      if (!a.is_number_integer()) throw ValidationError(w + ": ann_ids must be integers");
      s.ann_ids.push_back(a.get<AnnId>());
    }
    const auto split = string_field(r, "split", w);
    const auto parsed = parse_split(split);
    if (!parsed) throw ValidationError(w + ": unknown split \"" + split + "\"");
    s.split = *parsed;
    refs.push_back(std::move(s));
  }
  return Dataset(std::move(images), std::move(annotations), std::move(refs));
}

json Dataset::to_json() const {
  json jimages = json::array();
  for (const auto& [id, e] : images_) {
    jimages.push_back({{"id", id}, {"file_name", e.file_name}, {"height", e.height},
                       {"width", e.width}});
  }
  json janns = json::array();
  for (const auto& [id, a] : annotations_) {
    janns.push_back({{"id", id}, {"image_id", a.image_id},
                     {"segmentation", rle_to_json(a.segmentation)}});
  }
  json jrefs = json::array();
  for (const auto& [id, r] : refs_) {
    jrefs.push_back({{"ref_id", id}, {"image_id", r.image_id}, {"expression", r.expression},
                     {"ann_ids", r.ann_ids}, {"split", std::string(split_name(r.split))}});
  }
  return json{{"images", std::move(jimages)}, {"annotations", std::move(janns)},
              {"refs", std::move(jrefs)}};
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": invalid JSON: " + e.what());
  }
  return Dataset::from_json(j);
}

void save_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << dataset.to_json().dump() << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

BinaryMask object_mask(const Dataset& dataset, AnnId ann_id) {
  return decode_rle(dataset.annotation(ann_id).segmentation);
}

BinaryMask ground_truth_mask(const Dataset& dataset, RefId ref_id) {
  const auto& ref = dataset.ref(ref_id);
  const auto& img = dataset.image(ref.image_id);
  std::vector<BinaryMask> masks;
  masks.reserve(ref.ann_ids.size());
  for (const auto ann_id : ref.ann_ids) masks.push_back(object_mask(dataset, ann_id));
  return merge_masks(masks, img.height, img.width);
}

std::vector<RefId> split_refs(const Dataset& dataset, std::string_view split) {
  const auto parsed = parse_split(split);
  if (!parsed) {
    spdlog::warn("unknown split \"{}\"; no refs selected", split);
    return {};
  }
  return dataset.refs_in_split(*parsed);
}

}  // namespace greskit
