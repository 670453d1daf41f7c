#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

#include <unistd.h>

#include "morph/rng.hpp"
#include "morph/tensor.hpp"

namespace test_support {

// Fresh per-test scratch directory, removed and recreated on entry.
inline std::filesystem::path scratch_dir(const std::string& name) {
  std::filesystem::path dir = std::filesystem::temp_directory_path() /
                              ("facemorph_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline morph::Tensor random_tensor(std::vector<int> shape, morph::Rng& rng,
                                   double lo = -1.0, double hi = 1.0) {
  morph::Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Alphas on a dyadic grid: 1 - alpha is exact in floating point, so
// alpha-swap identities can be asserted bitwise.
inline double grid_alpha(morph::Rng& rng, int denom = 1024) {
  return static_cast<double>(rng.uniform_int(denom + 1)) / denom;
}

inline bool bitwise_equal(const morph::Tensor& a, const morph::Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

}  // namespace test_support
