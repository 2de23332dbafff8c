#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "roivit/errors.hpp"
#include "roivit/image.hpp"

namespace roivit {

struct DatasetEntry {
  std::filesystem::path path;
  std::string rel_path;  // "<class>/<file>", '/' separated
  std::size_t label = 0;
};

// root/<class>/<image>.ppm. Classes are the sorted subdirectory names and the
// label is the position in that order; entries are sorted by class, then file.
struct DatasetIndex {
  std::filesystem::path root;
  std::string split;  // "train" or "test" when the root is so named, else "all"
  std::vector<std::string> class_names;
  std::vector<DatasetEntry> entries;

  std::size_t size() const { return entries.size(); }
  std::size_t count(std::size_t label) const {
    return static_cast<std::size_t>(
        std::count_if(entries.begin(), entries.end(), [&](const DatasetEntry& e) { return e.label == label; }));
  }
};

inline DatasetIndex load_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw DatasetError(root.string() + ": not a dataset directory");
  DatasetIndex index;
  index.root = root;
  const std::string leaf = fs::path(root).lexically_normal().filename().string();
  const std::string base = leaf.empty() ? fs::path(root).lexically_normal().parent_path().filename().string() : leaf;
  index.split = (base == "train" || base == "test") ? base : "all";
  for (const auto& dir : fs::directory_iterator(root)) {
    if (dir.is_directory()) index.class_names.push_back(dir.path().filename().string());
  }
  std::sort(index.class_names.begin(), index.class_names.end());
  if (index.class_names.empty()) throw DatasetError(root.string() + ": no class directories");
  for (std::size_t label = 0; label < index.class_names.size(); ++label) {
    const auto& name = index.class_names[label];
    if (name.find_first_of(", \t\n") != std::string::npos) {
      throw DatasetError(root.string() + ": class name '" + name + "' contains a comma or whitespace");
    }
    std::vector<std::string> files;
    for (const auto& f : fs::directory_iterator(root / name)) {
      if (f.is_regular_file() && f.path().extension() == ".ppm") files.push_back(f.path().filename().string());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DatasetError((root / name).string() + ": class directory holds no .ppm images");
    for (const auto& f : files) index.entries.push_back({root / name / f, name + "/" + f, label});
  }
  return index;
}

// Decodes every entry, resized by nearest neighbour to size x size.
inline std::vector<ImageTensor> load_images(const DatasetIndex& index, std::size_t size) {
  std::vector<ImageTensor> out;
  out.reserve(index.size());
  for (const auto& e : index.entries) {
    auto img = resize_nearest(read_ppm(e.path), size, size);
    img.clamp();
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace roivit
