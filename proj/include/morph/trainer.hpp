#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "morph/adversary.hpp"
#include "morph/dataset.hpp"
#include "morph/encoder.hpp"
#include "morph/losses.hpp"
#include "morph/morphnet.hpp"
#include "morph/rng.hpp"

namespace morph {

enum class AlphaMode { fixed_half, truncated_gaussian };
enum class TrainPhase { pretrain, finetune };

struct TrainConfig {
  int pretrain_epochs = 5;
  int finetune_epochs = 10;
  int batch_faces = 32;          // 2 x identities_per_batch
  int identities_per_batch = 16;
  double gen_lr = 1e-4;
  double disc_lr = 1e-5;
  double lr_decay = 0.5;
  int decay_interval = 3;        // epochs
  int disc_update_period = 4;    // batches
  AlphaMode alpha_mode = AlphaMode::truncated_gaussian;
  double alpha_mu = 0.5;
  double alpha_sigma = 0.2;      // standard deviation of the truncated Gaussian
  std::uint64_t seed = 1;
  LossWeights weights;
  GeneratorConfig gen_arch;
  DiscriminatorConfig disc_arch;
  // Desk-scale overrides; always explicit, never inferred silently.
  int batches_per_epoch = 0;     // 0 = floor(images / batch_faces)
  int checkpoint_every = 0;      // epochs between checkpoints; 0 = final only

  void validate() const;
  int total_epochs() const { return pretrain_epochs + finetune_epochs; }
  double gen_lr_at(int epoch) const;
  double disc_lr_at(int epoch) const;
};

double sample_alpha(AlphaMode mode, double mu, double sigma, Rng& rng);

struct PairSample {
  std::string id1, img1;
  std::string id2, img2;
};

// Pretrain pairs each image with itself; finetune pairs distinct identities.
// Every batch covers exactly identities_per_batch identities across
// batch_faces slots.
std::vector<PairSample> make_batch(const DatasetIndex& dataset,
                                   const TrainConfig& config, TrainPhase phase,
                                   Rng& rng);

struct StepRecord {
  int step = 0;
  int epoch = 0;
  TrainPhase phase = TrainPhase::pretrain;
  double lr_gen = 0.0, lr_disc = 0.0;
  bool disc_updated = false;
  double alpha = 0.5;
  LossBreakdown losses;
};

// Owns the generator/discriminator optimization; the encoder stays frozen
// and is only read through its forward pass.
class TrainSession {
 public:
  TrainSession(const TrainConfig& config, const DatasetIndex& dataset,
               Encoder& frozen_encoder);

  StepRecord step(const std::vector<PairSample>& batch, double alpha);

  Generator& generator() { return gen_; }
  Discriminator& discriminator() { return disc_; }
  int global_step() const { return global_step_; }
  int epoch() const { return epoch_; }
  void set_epoch(int e) { epoch_ = e; }

 private:
  const TrainConfig config_;
  const DatasetIndex& dataset_;
  Encoder& encoder_;
  Generator gen_;
  Discriminator disc_;
  Adam gen_opt_, disc_opt_;
  ImageCache images_;
  std::map<std::string, FaceFeatures> feature_cache_;
  int global_step_ = 0;
  int epoch_ = 0;

  const FaceFeatures& features_of(const std::string& rel_path);
};

struct TrainArtifacts {
  std::filesystem::path run_dir;
  std::filesystem::path generator_prefix;      // final checkpoint
  std::filesystem::path discriminator_prefix;
  std::filesystem::path loss_csv;
  std::filesystem::path schedule_csv;
  std::filesystem::path batches_csv;
};

// Full schedule: pretrain then finetune epochs, periodic checkpoints, CSV
// logs (losses, schedule, batch composition), config snapshot and seed file.
TrainArtifacts run_training(const TrainConfig& config, const DatasetIndex& dataset,
                            Encoder& frozen_encoder,
                            const std::filesystem::path& run_dir);

}  // namespace morph
