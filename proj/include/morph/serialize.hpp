#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "morph/nn.hpp"
#include "morph/tensor.hpp"

namespace morph {

// Checkpoints are versioned binary blobs: magic, version, then a list of
// named tensors. A JSON sidecar (written by the owning module) carries the
// architecture metadata needed to rebuild the module before loading.
inline constexpr std::uint32_t kBlobVersion = 1;

void save_blob(const std::filesystem::path& path, const ParamCollector& pc);
// Loads into an already-constructed module; names and shapes must match.
void load_blob(const std::filesystem::path& path, ParamCollector& pc);

std::uint64_t fnv1a_file(const std::filesystem::path& path);
std::uint64_t fnv1a_bytes(const void* data, std::size_t n,
                          std::uint64_t seed = 1469598103934665603ull);
std::string hex64(std::uint64_t v);

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace morph
