#pragma once

#include <filesystem>

#include "morph/image.hpp"
#include "morph/nn.hpp"

namespace morph {

struct DiscriminatorConfig {
  // Four 4x4 conv layers, the first two with stride 2, then a fully
  // connected layer and sigmoid.
  double channel_scale = 1.0;  // base widths 64,128,256,512
  int width(int layer) const {
    static const int base[4] = {64, 128, 256, 512};
    int v = static_cast<int>(base[layer] * channel_scale + 0.5);
    return v < 1 ? 1 : v;
  }
  static DiscriminatorConfig desk() {
    DiscriminatorConfig c;
    c.channel_scale = 1.0 / 8.0;
    return c;
  }
};

class Discriminator {
 public:
  Discriminator(const DiscriminatorConfig& config, Rng rng);

  // [N,3,112,112] -> [N,1] probabilities clamped into [eps, 1-eps] so both
  // adversarial log terms stay finite.
  Var forward(const Var& images, bool training);

  // Single-image convenience; deterministic with frozen weights.
  double discriminate(const FaceImage& image);

  std::vector<Var> parameters();
  void collect(ParamCollector& pc);

  void save(const std::filesystem::path& path_prefix);
  static Discriminator load(const std::filesystem::path& path_prefix);

  static constexpr double kProbEps = 1e-7;

 private:
  DiscriminatorConfig config_;
  Conv2d conv1_, conv2_, conv3_, conv4_;
  BatchNorm2d bn2_, bn3_, bn4_;
  Linear fc_;
  int fc_in_ = 0;
};

}  // namespace morph
