#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "morph/image.hpp"

namespace morph {

// Directory-per-identity layout. Image paths are stored relative to the
// dataset root so an index file is byte-stable across machines.
struct DatasetIndex {
  struct Identity {
    std::string id;
    std::vector<std::string> images;  // relative paths, sorted
  };

  std::filesystem::path root;
  std::vector<Identity> identities;  // sorted by id

  int identity_count() const { return static_cast<int>(identities.size()); }
  int total_images() const;
  const Identity* find(const std::string& id) const;
  std::filesystem::path resolve(const std::string& rel_path) const { return root / rel_path; }
  // Identity owning a relative image path; throws DataError if unknown.
  const Identity& identity_of(const std::string& rel_path) const;
};

struct IndexResult {
  DatasetIndex index;
  std::vector<std::string> warnings;  // rejected files, one line each
};

// Scans a dataset tree, rejecting files that are not valid 112x112 PNGs.
IndexResult index_dataset(const std::filesystem::path& root);

void write_index_csv(const std::filesystem::path& csv_path, const DatasetIndex& index);
DatasetIndex load_index_csv(const std::filesystem::path& csv_path);

// In-memory image cache keyed by relative path; loads lazily, single-threaded.
class ImageCache {
 public:
  explicit ImageCache(const DatasetIndex& index) : index_(&index) {}
  const FaceImage& get(const std::string& rel_path);

 private:
  const DatasetIndex* index_;
  std::map<std::string, FaceImage> cache_;  // node-based: stable references
};

}  // namespace morph
