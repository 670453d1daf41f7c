#include "morph/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "morph/errors.hpp"
#include "morph/serialize.hpp"

namespace morph {

using nlohmann::json;
namespace fs = std::filesystem;

std::vector<Triplet> build_triplets(const DatasetIndex& dataset, int n_genuine,
                                    int n_imposter, std::uint64_t seed, int folds) {
  if (folds <= 0) throw ConfigError("build_triplets: folds must be positive");
  if (n_genuine % folds != 0 || n_imposter % folds != 0)
    throw ConfigError("build_triplets: counts must divide evenly into folds");
  if (dataset.identity_count() < 2)
    throw ProtocolError("build_triplets: need at least 2 identities");

  std::vector<int> genuine_ids;  // identities with >= 2 images
  for (int i = 0; i < dataset.identity_count(); ++i)
    if (dataset.identities[i].images.size() >= 2) genuine_ids.push_back(i);
  if (n_genuine > 0 && genuine_ids.empty())
    throw ProtocolError("build_triplets: no identity has 2 images");

  Rng rng = Rng(seed).split("triplets");
  std::vector<Triplet> out;
  for (int fold = 0; fold < folds; ++fold) {
    for (int g = 0; g < n_genuine / folds; ++g) {
      const auto& ident =
          dataset.identities[genuine_ids[rng.uniform_int(genuine_ids.size())]];
      auto n = static_cast<std::int64_t>(ident.images.size());
      std::int64_t a = rng.uniform_int(n);
      std::int64_t b = rng.uniform_int(n - 1);
      if (b >= a) ++b;
      out.push_back({ident.id, ident.images[a], ident.id, ident.images[b], 1, fold});
    }
    for (int m = 0; m < n_imposter / folds; ++m) {
      std::int64_t i = rng.uniform_int(dataset.identity_count());
      std::int64_t j = rng.uniform_int(dataset.identity_count() - 1);
      if (j >= i) ++j;
      const auto& a = dataset.identities[i];
      const auto& b = dataset.identities[j];
      out.push_back({a.id, a.images[rng.uniform_int(a.images.size())], b.id,
                     b.images[rng.uniform_int(b.images.size())], 0, fold});
    }
  }
  return out;
}

namespace {

std::string pick_other(const DatasetIndex::Identity& ident, const std::string& img,
                       Rng& rng) {
  std::vector<const std::string*> pool;
  for (const auto& candidate : ident.images)
    if (candidate != img) pool.push_back(&candidate);
  if (pool.empty())
    throw ProtocolError("build_quintuples: identity " + ident.id +
                        " has no second image");
  return *pool[rng.uniform_int(static_cast<std::int64_t>(pool.size()))];
}

}  // namespace

std::vector<Quintuple> build_quintuples(const std::vector<Triplet>& triplets,
                                        const DatasetIndex& dataset,
                                        std::uint64_t seed) {
  if (triplets.empty()) throw ProtocolError("build_quintuples: empty triplet list");
  std::vector<int> eligible;  // identities with >= 2 images
  for (int i = 0; i < dataset.identity_count(); ++i)
    if (dataset.identities[i].images.size() >= 2) eligible.push_back(i);
  if (eligible.empty())
    throw ProtocolError("build_quintuples: every identity has a single image");

  Rng rng = Rng(seed).split("quintuples");
  bool assign_contiguous =
      std::all_of(triplets.begin(), triplets.end(),
                  [](const Triplet& t) { return t.fold < 0; });

  std::vector<Quintuple> out;
  for (std::size_t i = 0; i < triplets.size(); ++i) {
    const Triplet& t = triplets[i];
    int fold = assign_contiguous
                   ? static_cast<int>(i * 10 / triplets.size())
                   : t.fold;
    const auto* id1 = dataset.find(t.id1);
    const auto* id2 = dataset.find(t.id2);
    if (!id1 || !id2)
      throw ProtocolError("build_quintuples: unknown identity in triplet");

    Quintuple q;
    q.y = t.y;
    q.fold = fold;
    if (id1->images.size() >= 2 && id2->images.size() >= 2) {
      q.id1 = t.id1;
      q.img1 = t.img1;
      q.id2 = t.id2;
      q.img2 = t.img2;
    } else if (t.y == 1) {
      // Replace with a fresh same-label pair over identities with spares.
      const auto& ident = dataset.identities[eligible[rng.uniform_int(eligible.size())]];
      auto n = static_cast<std::int64_t>(ident.images.size());
      std::int64_t a = rng.uniform_int(n);
      std::int64_t b = rng.uniform_int(n - 1);
      if (b >= a) ++b;
      q.id1 = ident.id;
      q.img1 = ident.images[a];
      q.id2 = ident.id;
      q.img2 = ident.images[b];
    } else {
      if (eligible.size() < 2)
        throw ProtocolError("build_quintuples: cannot replace imposter pair, fewer "
                            "than 2 identities have 2 images");
      std::int64_t a = rng.uniform_int(eligible.size());
      std::int64_t b = rng.uniform_int(eligible.size() - 1);
      if (b >= a) ++b;
      const auto& ia = dataset.identities[eligible[a]];
      const auto& ib = dataset.identities[eligible[b]];
      q.id1 = ia.id;
      q.img1 = ia.images[rng.uniform_int(ia.images.size())];
      q.id2 = ib.id;
      q.img2 = ib.images[rng.uniform_int(ib.images.size())];
    }
    q.img1p = pick_other(*dataset.find(q.id1), q.img1, rng);
    q.img2p = pick_other(*dataset.find(q.id2), q.img2, rng);
    out.push_back(std::move(q));
  }
  return out;
}

double compute_threshold(const std::vector<double>& distances,
                         const std::vector<int>& labels) {
  if (distances.empty() || distances.size() != labels.size())
    throw ProtocolError("compute_threshold: empty or mismatched inputs");
  std::vector<double> sorted = distances;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  std::vector<double> candidates;
  candidates.push_back(sorted.front() - 1.0);
  for (std::size_t i = 0; i + 1 < sorted.size(); ++i)
    candidates.push_back(0.5 * (sorted[i] + sorted[i + 1]));
  candidates.push_back(sorted.back() + 1.0);

  double best_t = candidates.front();
  std::size_t best_correct = 0;
  for (double t : candidates) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < distances.size(); ++i)
      if ((distances[i] < t && labels[i] == 1) || (distances[i] >= t && labels[i] == 0))
        ++correct;
    if (correct > best_correct) {
      best_correct = correct;
      best_t = t;
    }
  }
  return best_t;
}

double compute_far_threshold(std::vector<double> imposter_distances, double far) {
  if (imposter_distances.empty())
    throw ProtocolError("compute_far_threshold: empty imposter distances");
  if (far < 0.0 || far > 1.0)
    throw DomainError("compute_far_threshold: far outside [0,1]");
  std::sort(imposter_distances.begin(), imposter_distances.end());
  auto m = static_cast<std::int64_t>(imposter_distances.size());
  auto allowed = static_cast<std::int64_t>(std::floor(far * static_cast<double>(m)));
  if (allowed >= m) return imposter_distances.back() + 1.0;
  return imposter_distances[allowed];
}

double acc_morph(const std::vector<MorphDistances>& distances, double t,
                 int subset_y) {
  std::int64_t n_subset = 0, matched = 0;
  for (const auto& d : distances) {
    if (d.y != subset_y) continue;
    ++n_subset;
    if (d.d1 < t && d.d2 < t) ++matched;
  }
  if (n_subset == 0) throw ProtocolError("acc_morph: empty subset");
  return 100.0 * (1.0 - static_cast<double>(matched) / static_cast<double>(n_subset));
}

double acc_per_side(const std::vector<MorphDistances>& distances, double t,
                    int side, int subset_y) {
  if (side != 1 && side != 2) throw DomainError("acc_per_side: side must be 1 or 2");
  std::int64_t n_subset = 0, matched = 0;
  for (const auto& d : distances) {
    if (d.y != subset_y) continue;
    ++n_subset;
    double v = side == 1 ? d.d1 : d.d2;
    if (v < t) ++matched;
  }
  if (n_subset == 0) throw ProtocolError("acc_per_side: empty subset");
  return 100.0 * (1.0 - static_cast<double>(matched) / static_cast<double>(n_subset));
}

namespace {

struct FeatureStore {
  Encoder* enc;
  ImageCache* images;
  std::map<std::string, FaceFeatures> cache;
  const FaceFeatures& get(const std::string& rel_path) {
    auto it = cache.find(rel_path);
    if (it == cache.end())
      it = cache.emplace(rel_path, enc->encode(images->get(rel_path))).first;
    return it->second;
  }
};

fs::path cache_file(const fs::path& dir, std::uint64_t gen_hash,
                    std::uint64_t enc_hash, double alpha, std::uint64_t proto_hash) {
  std::uint64_t alpha_bits;
  std::memcpy(&alpha_bits, &alpha, sizeof alpha_bits);
  return dir / ("distances_" + hex64(gen_hash) + "_" + hex64(enc_hash) + "_" +
                hex64(alpha_bits) + "_" + hex64(proto_hash) + ".csv");
}

std::optional<std::vector<std::pair<double, double>>> load_distance_cache(
    const fs::path& file, std::size_t expected) {
  std::ifstream is(file);
  if (!is) return std::nullopt;
  std::vector<std::pair<double, double>> out;
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string a, b;
    std::getline(ss, a, ',');
    std::getline(ss, b, ',');
    out.emplace_back(std::stod(a), std::stod(b));
  }
  if (out.size() != expected) return std::nullopt;
  return out;
}

}  // namespace

MorphReport evaluate(Generator& gen, Encoder& enc_gen, Encoder& enc_test,
                     const std::vector<Quintuple>& quintuples,
                     const DatasetIndex& dataset, const EvaluateOptions& options) {
  if (quintuples.empty()) throw ProtocolError("evaluate: empty protocol");
  if (options.alpha < 0.0 || options.alpha > 1.0)
    throw DomainError("evaluate: alpha outside [0,1]");

  ImageCache images(dataset);
  FeatureStore gen_feats{&enc_gen, &images, {}};
  FeatureStore test_feats{&enc_test, &images, {}};

  MorphReport report;
  report.alpha = options.alpha;
  report.quintuple_refs = options.quintuple_refs;
  report.threshold_mode = options.threshold_mode;
  report.far = options.far;

  // Morph distances, optionally cached: morphs depend only on (generator,
  // enc_gen inputs, alpha, protocol), so sweeps can reuse them.
  std::vector<std::pair<double, double>> morph_dist;
  std::optional<fs::path> cache_path;
  if (options.cache_dir) {
    fs::create_directories(*options.cache_dir);
    std::uint64_t enc_pair_hash =
        enc_gen.weights_hash() ^ (enc_test.weights_hash() * 1099511628211ull) ^
        (options.quintuple_refs ? 0x9E37ull : 0x79B9ull);
    cache_path = cache_file(*options.cache_dir, gen.weights_hash(), enc_pair_hash,
                            options.alpha, protocol_hash(quintuples));
    if (auto cached = load_distance_cache(*cache_path, quintuples.size()))
      morph_dist = std::move(*cached);
  }
  if (morph_dist.empty()) {
    for (const auto& q : quintuples) {
      FaceImage morph = generate_morph(gen, gen_feats.get(q.img1),
                                       gen_feats.get(q.img2), options.alpha);
      FaceFeatures fm = enc_test.encode(morph);
      const std::string& ref1 = options.quintuple_refs ? q.img1p : q.img1;
      const std::string& ref2 = options.quintuple_refs ? q.img2p : q.img2;
      morph_dist.emplace_back(cosine_distance(fm.f, test_feats.get(ref1).f),
                              cosine_distance(fm.f, test_feats.get(ref2).f));
    }
    if (cache_path) {
      std::ofstream os(*cache_path, std::ios::binary);
      os << "d1,d2\n";
      os.precision(17);
      for (const auto& [d1, d2] : morph_dist) os << d1 << "," << d2 << "\n";
    }
  }

  report.distances.resize(quintuples.size());
  for (std::size_t i = 0; i < quintuples.size(); ++i) {
    report.distances[i] = {morph_dist[i].first, morph_dist[i].second,
                           quintuples[i].y, quintuples[i].fold};
    if (quintuples[i].y == 0)
      ++report.n_diff;
    else
      ++report.n_same;
  }

  // Reference verification distances used for threshold selection.
  std::vector<double> verif_dist(quintuples.size());
  for (std::size_t i = 0; i < quintuples.size(); ++i) {
    const auto& q = quintuples[i];
    const std::string& ref1 = options.quintuple_refs ? q.img1p : q.img1;
    const std::string& ref2 = options.quintuple_refs ? q.img2p : q.img2;
    verif_dist[i] = cosine_distance(test_feats.get(ref1).f, test_feats.get(ref2).f);
  }

  std::vector<int> fold_ids;
  for (const auto& q : quintuples)
    if (std::find(fold_ids.begin(), fold_ids.end(), q.fold) == fold_ids.end())
      fold_ids.push_back(q.fold);
  std::sort(fold_ids.begin(), fold_ids.end());

  struct Acc {
    double sum = 0.0;
    int n = 0;
    void add(double v) { sum += v; ++n; }
    double mean() const { return n > 0 ? sum / n : 0.0; }
  };
  Acc acc_diff, acc_same, acc_s1, acc_s2;

  for (int fold : fold_ids) {
    std::vector<double> train_dist;
    std::vector<int> train_labels;
    std::vector<double> train_imposter;
    std::vector<MorphDistances> held_out;
    for (std::size_t i = 0; i < quintuples.size(); ++i) {
      if (quintuples[i].fold == fold) {
        held_out.push_back(report.distances[i]);
      } else {
        train_dist.push_back(verif_dist[i]);
        train_labels.push_back(quintuples[i].y);
        if (quintuples[i].y == 0) train_imposter.push_back(verif_dist[i]);
      }
    }
    if (train_dist.empty()) {
      // Single-fold protocol: fall back to in-fold threshold selection.
      for (std::size_t i = 0; i < quintuples.size(); ++i) {
        train_dist.push_back(verif_dist[i]);
        train_labels.push_back(quintuples[i].y);
        if (quintuples[i].y == 0) train_imposter.push_back(verif_dist[i]);
      }
    }
    double t = options.threshold_mode == ThresholdMode::max_accuracy
                   ? compute_threshold(train_dist, train_labels)
                   : compute_far_threshold(train_imposter, options.far);
    report.fold_thresholds.push_back(t);

    bool has_diff = std::any_of(held_out.begin(), held_out.end(),
                                [](const MorphDistances& d) { return d.y == 0; });
    bool has_same = std::any_of(held_out.begin(), held_out.end(),
                                [](const MorphDistances& d) { return d.y == 1; });
    if (has_diff) {
      acc_diff.add(acc_morph(held_out, t, 0));
      acc_s1.add(acc_per_side(held_out, t, 1, 0));
      acc_s2.add(acc_per_side(held_out, t, 2, 0));
    }
    if (has_same) acc_same.add(acc_morph(held_out, t, 1));
  }

  if (report.n_diff > 0 && acc_diff.n == 0)
    throw ProtocolError("evaluate: no fold contained imposter pairs");
  report.acc_morph_diff = acc_diff.mean();
  report.acc_morph_same = acc_same.mean();
  report.acc_side1 = acc_s1.mean();
  report.acc_side2 = acc_s2.mean();
  return report;
}

std::vector<SweepRow> sweep_alpha(Generator& gen, Encoder& enc_gen, Encoder& enc_test,
                                  const std::vector<Quintuple>& quintuples,
                                  const DatasetIndex& dataset,
                                  const std::vector<double>& alphas,
                                  EvaluateOptions options) {
  std::vector<SweepRow> rows;
  for (double alpha : alphas) {
    if (alpha < 0.0 || alpha > 1.0)
      throw DomainError("sweep_alpha: alpha outside [0,1]");
    options.alpha = alpha;
    MorphReport report = evaluate(gen, enc_gen, enc_test, quintuples, dataset, options);
    rows.push_back({alpha, report.acc_morph_diff, report.acc_side1, report.acc_side2});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

void save_protocol_csv(const fs::path& path, const std::vector<Quintuple>& quintuples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("protocol: cannot write " + path.string());
  os << "fold,y,id1,img1,id2,img2,img1p,img2p\n";
  for (const auto& q : quintuples)
    os << q.fold << "," << q.y << "," << q.id1 << "," << q.img1 << "," << q.id2 << ","
       << q.img2 << "," << q.img1p << "," << q.img2p << "\n";
}

void save_protocol_csv(const fs::path& path, const std::vector<Triplet>& triplets) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("protocol: cannot write " + path.string());
  os << "fold,y,id1,img1,id2,img2\n";
  for (const auto& t : triplets)
    os << t.fold << "," << t.y << "," << t.id1 << "," << t.img1 << "," << t.id2 << ","
       << t.img2 << "\n";
}

namespace {

std::vector<std::vector<std::string>> read_csv_rows(const fs::path& path,
                                                    std::size_t min_cols,
                                                    std::string* header) {
  std::ifstream is(path);
  if (!is) throw DataError("protocol: cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw DataError("protocol: empty file " + path.string());
  if (header) *header = line;
  std::vector<std::vector<std::string>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < min_cols)
      throw DataError("protocol: malformed row: " + line);
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace

std::vector<Quintuple> load_quintuples_csv(const fs::path& path) {
  auto rows = read_csv_rows(path, 8, nullptr);
  std::vector<Quintuple> out;
  for (const auto& r : rows)
    out.push_back({r[2], r[3], r[4], r[5], r[6], r[7], std::stoi(r[1]), std::stoi(r[0])});
  return out;
}

std::vector<Triplet> load_triplets_csv(const fs::path& path) {
  auto rows = read_csv_rows(path, 6, nullptr);
  std::vector<Triplet> out;
  for (const auto& r : rows)
    out.push_back({r[2], r[3], r[4], r[5], std::stoi(r[1]), std::stoi(r[0])});
  return out;
}

std::uint64_t protocol_hash(const std::vector<Quintuple>& quintuples) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix_str = [&h](const std::string& s) {
    h = fnv1a_bytes(s.data(), s.size(), h);
    h = fnv1a_bytes("|", 1, h);
  };
  for (const auto& q : quintuples) {
    mix_str(q.id1);
    mix_str(q.img1);
    mix_str(q.id2);
    mix_str(q.img2);
    mix_str(q.img1p);
    mix_str(q.img2p);
    h = fnv1a_bytes(&q.y, sizeof q.y, h);
    h = fnv1a_bytes(&q.fold, sizeof q.fold, h);
  }
  return h;
}

void save_report_json(const fs::path& path, const MorphReport& report) {
  json j;
  j["alpha"] = report.alpha;
  j["quintuple_refs"] = report.quintuple_refs;
  j["threshold_mode"] =
      report.threshold_mode == ThresholdMode::max_accuracy ? "max_accuracy" : "far";
  j["far"] = report.far;
  j["fold_thresholds"] = report.fold_thresholds;
  j["acc_morph_diff"] = report.acc_morph_diff;
  j["acc_morph_same"] = report.acc_morph_same;
  j["acc_side1"] = report.acc_side1;
  j["acc_side2"] = report.acc_side2;
  j["n_diff"] = report.n_diff;
  j["n_same"] = report.n_same;
  write_text_file(path, j.dump(2) + "\n");
}

void save_scatter_csv(const fs::path& path, const MorphReport& report) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("report: cannot write " + path.string());
  os << "d1,d2,y\n";
  os.precision(17);
  for (const auto& d : report.distances) os << d.d1 << "," << d.d2 << "," << d.y << "\n";
}

}  // namespace morph
