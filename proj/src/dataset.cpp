#include "morph/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "morph/errors.hpp"

namespace morph {

namespace fs = std::filesystem;

int DatasetIndex::total_images() const {
  int n = 0;
  for (const auto& ident : identities) n += static_cast<int>(ident.images.size());
  return n;
}

const DatasetIndex::Identity* DatasetIndex::find(const std::string& id) const {
  for (const auto& ident : identities)
    if (ident.id == id) return &ident;
  return nullptr;
}

const DatasetIndex::Identity& DatasetIndex::identity_of(const std::string& rel_path) const {
  for (const auto& ident : identities)
    for (const auto& img : ident.images)
      if (img == rel_path) return ident;
  throw DataError("dataset: image not in index: " + rel_path);
}

IndexResult index_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw DataError("dataset: not a directory: " + root.string());
  IndexResult result;
  result.index.root = root;

  std::vector<fs::path> id_dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) id_dirs.push_back(entry.path());
  std::sort(id_dirs.begin(), id_dirs.end());
  if (id_dirs.empty()) throw DataError("dataset: no identity directories in " + root.string());

  for (const auto& dir : id_dirs) {
    DatasetIndex::Identity ident;
    ident.id = dir.filename().string();
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file()) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::string rel = fs::relative(f, root).generic_string();
      try {
        Rgb8Image img = load_png_rgb8(f);
        if (img.width != kFaceSize || img.height != kFaceSize) {
          result.warnings.push_back(rel + ": wrong size " + std::to_string(img.width) +
                                    "x" + std::to_string(img.height) + ", excluded");
          continue;
        }
      } catch (const DataError& e) {
        result.warnings.push_back(rel + ": unreadable (" + e.what() + "), excluded");
        continue;
      }
      ident.images.push_back(rel);
    }
    if (!ident.images.empty()) result.index.identities.push_back(std::move(ident));
  }
  if (result.index.identities.empty())
    throw DataError("dataset: no usable images under " + root.string());
  return result;
}

void write_index_csv(const fs::path& csv_path, const DatasetIndex& index) {
  std::ofstream os(csv_path, std::ios::binary);
  if (!os) throw DataError("index: cannot write " + csv_path.string());
  os << "identity_id,image_path,identity_image_count\n";
  for (const auto& ident : index.identities)
    for (const auto& img : ident.images)
      os << ident.id << "," << img << "," << ident.images.size() << "\n";
}

DatasetIndex load_index_csv(const fs::path& csv_path) {
  std::ifstream is(csv_path);
  if (!is) throw DataError("index: cannot open " + csv_path.string());
  DatasetIndex index;
  index.root = csv_path.parent_path();
  std::string line;
  if (!std::getline(is, line)) throw DataError("index: empty file " + csv_path.string());
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, img, count;
    if (!std::getline(ss, id, ',') || !std::getline(ss, img, ','))
      throw DataError("index: malformed row: " + line);
    std::getline(ss, count, ',');
    if (index.identities.empty() || index.identities.back().id != id)
      index.identities.push_back({id, {}});
    index.identities.back().images.push_back(img);
  }
  if (index.identities.empty()) throw DataError("index: no rows in " + csv_path.string());
  return index;
}

const FaceImage& ImageCache::get(const std::string& rel_path) {
  auto it = cache_.find(rel_path);
  if (it == cache_.end())
    it = cache_.emplace(rel_path, load_face_png(index_->resolve(rel_path))).first;
  return it->second;
}

}  // namespace morph
