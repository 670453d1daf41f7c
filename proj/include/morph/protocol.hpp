#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "morph/dataset.hpp"
#include "morph/encoder.hpp"
#include "morph/morphnet.hpp"

namespace morph {

// Verification pair: y=1 genuine (same identity), y=0 imposter.
struct Triplet {
  std::string id1, img1;
  std::string id2, img2;
  int y = 0;
  int fold = -1;  // -1 = unassigned; builders then assign contiguously
};

// Triplet extended with one extra image per identity so morph inputs and
// evaluation references differ.
struct Quintuple {
  std::string id1, img1;
  std::string id2, img2;
  std::string img1p, img2p;
  int y = 0;
  int fold = 0;
};

struct MorphDistances {
  double d1 = 0.0, d2 = 0.0;  // d(f_m, side reference)
  int y = 0;
  int fold = 0;
};

enum class ThresholdMode { max_accuracy, far };

struct MorphReport {
  std::vector<double> fold_thresholds;
  double acc_morph_diff = 0.0;  // percent, y=0 subset
  double acc_morph_same = 0.0;  // percent, y=1 subset
  double acc_side1 = 0.0;       // percent, y=0 subset
  double acc_side2 = 0.0;
  bool quintuple_refs = true;   // false = triplet-mode evaluation references
  ThresholdMode threshold_mode = ThresholdMode::max_accuracy;
  double far = 0.001;
  double alpha = 0.5;
  int n_same = 0, n_diff = 0;
  std::vector<MorphDistances> distances;  // one row per protocol entry
};

// Synthetic triplet list with per-fold label balance; counts must divide by
// the fold count.
std::vector<Triplet> build_triplets(const DatasetIndex& dataset, int n_genuine,
                                    int n_imposter, std::uint64_t seed,
                                    int folds = 10);

// Extends triplets with x1' != x1 and x2' != x2 of matching identity. Pairs
// whose identity lacks a second image are replaced by a freshly sampled pair
// of the same label over identities with >= 2 images.
std::vector<Quintuple> build_quintuples(const std::vector<Triplet>& triplets,
                                        const DatasetIndex& dataset,
                                        std::uint64_t seed);

// Threshold maximizing count(d < t, y=1) + count(d >= t, y=0) over midpoint
// candidates; ties resolve to the smallest optimal candidate.
double compute_threshold(const std::vector<double>& distances,
                         const std::vector<int>& labels);

// Largest t with (fraction of imposter distances < t) <= far.
double compute_far_threshold(std::vector<double> imposter_distances, double far);

// Eq.-style failure rate on the subset with label subset_y, in percent:
// 100 * (1 - |{d1 < t and d2 < t}| / N_subset).
double acc_morph(const std::vector<MorphDistances>& distances, double t,
                 int subset_y);

// Per-side accuracy (side 1 or 2) on the subset with label subset_y.
double acc_per_side(const std::vector<MorphDistances>& distances, double t,
                    int side, int subset_y);

struct EvaluateOptions {
  double alpha = 0.5;
  bool quintuple_refs = true;  // evaluate against x1'/x2'; false = x1/x2
  ThresholdMode threshold_mode = ThresholdMode::max_accuracy;
  double far = 0.001;
  // When set, per-quintuple morph distances are cached keyed by
  // (generator hash, test-encoder hash, alpha, protocol hash).
  std::optional<std::filesystem::path> cache_dir;
};

// 10-fold cross-validated evaluation: thresholds from the 9 training folds'
// reference-pair distances, metrics on the held-out fold, averaged.
MorphReport evaluate(Generator& gen, Encoder& enc_gen, Encoder& enc_test,
                     const std::vector<Quintuple>& quintuples,
                     const DatasetIndex& dataset, const EvaluateOptions& options);

struct SweepRow {
  double alpha = 0.0;
  double acc_morph_diff = 0.0;
  double acc_side1 = 0.0;
  double acc_side2 = 0.0;
};

std::vector<SweepRow> sweep_alpha(Generator& gen, Encoder& enc_gen, Encoder& enc_test,
                                  const std::vector<Quintuple>& quintuples,
                                  const DatasetIndex& dataset,
                                  const std::vector<double>& alphas,
                                  EvaluateOptions options);

// Protocol CSV: "fold,y,id1,img1,id2,img2,img1p,img2p"; triplet files omit
// the last two columns.
void save_protocol_csv(const std::filesystem::path& path,
                       const std::vector<Quintuple>& quintuples);
void save_protocol_csv(const std::filesystem::path& path,
                       const std::vector<Triplet>& triplets);
std::vector<Quintuple> load_quintuples_csv(const std::filesystem::path& path);
std::vector<Triplet> load_triplets_csv(const std::filesystem::path& path);

std::uint64_t protocol_hash(const std::vector<Quintuple>& quintuples);

void save_report_json(const std::filesystem::path& path, const MorphReport& report);
void save_scatter_csv(const std::filesystem::path& path, const MorphReport& report);

}  // namespace morph
