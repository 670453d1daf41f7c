#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "morph/dataset.hpp"
#include "morph/image.hpp"
#include "morph/nn.hpp"
#include "morph/rng.hpp"

namespace morph {

// Identity vector plus the intermediate maps tapped from one encoder pass.
struct FaceFeatures {
  Tensor f;   // [256]
  Tensor f3;  // [C3,14,14]
  Tensor f4;  // [C4,7,7]
  Tensor f5;  // [C5,7,7]
};

// Batched graph outputs used when gradients must flow through the encoder.
struct EncoderTaps {
  Var f;   // [N,256]
  Var f3;  // [N,C3,14,14]
  Var f4;  // [N,C4,7,7]
  Var f5;  // [N,C5,7,7]
  Var logits;  // [N,n_classes], only when the classifier head is attached
};

struct EncoderConfig {
  // Channel schedule stem -> stride-2 stages; taps come off stages 3..5.
  int c_stem = 64;
  int c1 = 128;
  int c2 = 256;
  int c3 = 512;   // F3 tap, 14x14
  int c4 = 1024;  // F4 tap, 7x7
  int c5 = 2048;  // F5 tap, 7x7
  int feature_dim = 256;
  int n_classes = 0;  // >0 attaches the softmax training head
  double pixel_norm = 127.5;  // 8-bit mapping constant, recorded in metadata

  static EncoderConfig desk(int n_classes);
};

// Small residual CNN with the tap shapes 14x14 / 7x7 / 7x7 and f in R^256.
// After training the weights are frozen; encode() is then a pure function.
class Encoder {
 public:
  explicit Encoder(const EncoderConfig& config, Rng rng);

  const EncoderConfig& config() const { return config_; }

  // Batched forward on [N,3,112,112]. `training` selects batch-norm mode.
  EncoderTaps forward(const Var& images, bool training);

  // Single-image inference path; validates invariants on both ends.
  FaceFeatures encode(const FaceImage& image);

  std::vector<Var> parameters();
  void collect(ParamCollector& pc);

  void save(const std::filesystem::path& path_prefix);
  static Encoder load(const std::filesystem::path& path_prefix);

  std::uint64_t weights_hash();

 private:
  EncoderConfig config_;
  Conv2d stem_, down1_, down2_, down3_, down4_;
  BatchNorm2d bn_stem_, bn1_, bn2_, bn3_, bn4_;
  Conv2d res_a_, res_b_, res_skip_;
  BatchNorm2d bn_res_a_, bn_res_b_;
  Linear fc_feat_;
  Linear head_;  // classifier, only valid when n_classes > 0
};

// 1 - <a,b>/(|a||b|), in [0,2]. Throws DomainError on zero-norm input.
double cosine_distance(const Tensor& a, const Tensor& b);

struct EncoderTrainConfig {
  int epochs = 15;
  int batch_size = 32;
  double lr = 1e-3;
  double holdout_fraction = 0.25;
  std::uint64_t seed = 1;
  EncoderConfig arch;  // n_classes is overwritten from the dataset
};

struct EncoderTrainResult {
  double holdout_accuracy = 0.0;
  double final_loss = 0.0;
};

// Trains the desk-scale backbone with softmax cross-entropy; returns the
// frozen encoder. Throws ConfigError when fewer than 2 identities are given.
std::pair<Encoder, EncoderTrainResult> train_desk_encoder(
    const DatasetIndex& dataset, const EncoderTrainConfig& config);

}  // namespace morph
