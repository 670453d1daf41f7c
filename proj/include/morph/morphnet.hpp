#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <vector>

#include "morph/encoder.hpp"
#include "morph/image.hpp"
#include "morph/nn.hpp"

namespace morph {

struct GeneratorConfig {
  // Base schedule 512 -> 512 -> 256 -> 128 -> 64 -> 32; the first block keeps
  // the width, every later block halves it. channel_scale shrinks the whole
  // schedule for desk-scale runs while preserving the ratios.
  double channel_scale = 1.0;
  int cond_vector_dim = 256;   // f
  int cond_map_channels = 1024;  // C4 of the conditioning encoder
  double z_init_stddev = 0.02;

  int z_channels() const { return scaled(512); }
  // in/out widths for block k in [0,5).
  int block_in(int k) const { return scaled(k == 0 ? 512 : widths()[k - 1]); }
  int block_out(int k) const { return scaled(widths()[k]); }
  int scaled(int base) const {
    int v = static_cast<int>(base * channel_scale + 0.5);
    return v < 1 ? 1 : v;
  }

  static GeneratorConfig desk(int cond_map_channels) {
    GeneratorConfig c;
    c.channel_scale = 1.0 / 8.0;
    c.cond_map_channels = cond_map_channels;
    return c;
  }

 private:
  static const std::array<int, 5>& widths() {
    static const std::array<int, 5> w = {512, 256, 128, 64, 32};
    return w;
  }
};

// Intermediates of one attentional de-normalization, exposed for inspection.
struct AadBlockIO {
  Tensor h;      // input map
  Tensor h_bar;  // normalized map
  Tensor mask;   // [N,1,H,W], strictly inside (0,1)
  Tensor a1, a2; // de-normalized maps
  Tensor h_out;
  double alpha = 0.5;
};

// One attentional de-normalization: batch-norm, sigmoid mask, a single shared
// projection applied to both conditions, and the alpha blend
// H_out = M * (alpha*A1 + (1-alpha)*A2). The shared projection plus the
// commutative blend make the whole stage invariant to swapping
// (cond1, cond2) together with alpha -> 1-alpha.
struct AadBlend {
  BatchNorm2d bn;
  Conv2d mask_conv;   // C -> 1
  Linear cond_proj;   // cond_dim -> 2C, one parameter set for both slots
  int channels = 0;

  AadBlend() = default;
  AadBlend(int channels_, int cond_dim, Rng rng);

  // A = gamma ⊙ H̄ + beta, with gamma/beta split from the shared projection
  // of one condition; gamma and beta broadcast spatially.
  Var denormalize(const Var& h_bar, const Var& cond);

  Var forward(const Var& h, const Var& cond1, const Var& cond2, double alpha,
              bool training, AadBlockIO* io = nullptr);

  void collect(const std::string& prefix, ParamCollector& pc);
};

// Residual block: [blend -> relu -> 3x3 conv] twice on the main path; the
// shortcut is the identity when widths match, else blend -> relu -> 3x3 conv.
struct AadResBlock {
  AadBlend blend1, blend2;
  Conv2d conv1, conv2;
  std::optional<AadBlend> blend_skip;
  std::optional<Conv2d> conv_skip;
  int c_in = 0, c_out = 0;

  AadResBlock() = default;
  AadResBlock(int c_in_, int c_out_, int cond_dim, Rng rng);

  Var forward(const Var& h, const Var& cond1, const Var& cond2, double alpha,
              bool training);
  void collect(const std::string& prefix, ParamCollector& pc);
};

// Condition inputs for a batch of pairs.
struct GeneratorConds {
  Var map1, map2;  // flattened F4, [N, C4*49]
  Var vec1, vec2;  // f, [N, 256]
};

class Generator {
 public:
  Generator(const GeneratorConfig& config, Rng rng);

  const GeneratorConfig& config() const { return config_; }

  // Batched forward; spatial chain 7 -> 14 -> 28 -> 56 -> 112.
  Var forward(const GeneratorConds& conds, double alpha, bool training);

  std::vector<Var> parameters();
  void collect(ParamCollector& pc);
  Var z() const { return z_; }

  void save(const std::filesystem::path& path_prefix);
  static Generator load(const std::filesystem::path& path_prefix);
  std::uint64_t weights_hash();

 private:
  GeneratorConfig config_;
  Var z_;  // [1,512*scale,7,7]
  std::vector<AadResBlock> blocks_;
  Conv2d head3x3_, head1x1_;
};

Generator init_generator(const GeneratorConfig& config, std::uint64_t seed);

// Single-pair inference. Requires alpha in [0,1] (DomainError otherwise) and
// feature taps matching the generator's condition dims (ValidationError).
FaceImage generate_morph(Generator& gen, const FaceFeatures& feats1,
                         const FaceFeatures& feats2, double alpha);

// Packs single-sample features into batch-of-one condition constants.
GeneratorConds make_conds(const GeneratorConfig& config, const FaceFeatures& feats1,
                          const FaceFeatures& feats2);

}  // namespace morph
