#pragma once

#include <filesystem>

#include "morph/dataset.hpp"

namespace morph {

// Procedural stand-in for a real face dataset: every identity is a distinct
// parameterized pattern (geometry plus color signature); images of one
// identity differ by shift, brightness and noise. Layout: one directory per
// identity, PNG files inside. Deterministic bytes under a fixed seed.
DatasetIndex generate_synthetic_faces(const std::filesystem::path& out_dir,
                                      int n_identities, int images_per_identity,
                                      std::uint64_t seed);

}  // namespace morph
