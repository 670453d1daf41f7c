#include "morph/encoder.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "morph/errors.hpp"
#include "morph/serialize.hpp"

namespace morph {

using nlohmann::json;

EncoderConfig EncoderConfig::desk(int n_classes) {
  EncoderConfig c;
  c.c_stem = 4;
  c.c1 = 8;
  c.c2 = 16;
  c.c3 = 32;
  c.c4 = 64;
  c.c5 = 128;
  c.n_classes = n_classes;
  return c;
}

Encoder::Encoder(const EncoderConfig& config, Rng rng) : config_(config) {
  if (config.feature_dim <= 0 || config.c3 <= 0 || config.c4 <= 0 || config.c5 <= 0)
    throw ConfigError("encoder: channel counts must be positive");
  stem_ = Conv2d(3, config.c_stem, 3, 1, 1, rng.split("stem"));
  bn_stem_ = BatchNorm2d(config.c_stem);
  down1_ = Conv2d(config.c_stem, config.c1, 3, 2, 1, rng.split("down1"));
  bn1_ = BatchNorm2d(config.c1);
  down2_ = Conv2d(config.c1, config.c2, 3, 2, 1, rng.split("down2"));
  bn2_ = BatchNorm2d(config.c2);
  down3_ = Conv2d(config.c2, config.c3, 3, 2, 1, rng.split("down3"));
  bn3_ = BatchNorm2d(config.c3);
  down4_ = Conv2d(config.c3, config.c4, 3, 2, 1, rng.split("down4"));
  bn4_ = BatchNorm2d(config.c4);
  res_a_ = Conv2d(config.c4, config.c5, 3, 1, 1, rng.split("res_a"));
  bn_res_a_ = BatchNorm2d(config.c5);
  res_b_ = Conv2d(config.c5, config.c5, 3, 1, 1, rng.split("res_b"));
  bn_res_b_ = BatchNorm2d(config.c5);
  res_skip_ = Conv2d(config.c4, config.c5, 1, 1, 0, rng.split("res_skip"));
  fc_feat_ = Linear(config.c5, config.feature_dim, rng.split("fc_feat"));
  if (config.n_classes > 0)
    head_ = Linear(config.feature_dim, config.n_classes, rng.split("head"));
}

EncoderTaps Encoder::forward(const Var& images, bool training) {
  if (images->value.rank() != 4 || images->value.dim(1) != 3 ||
      images->value.dim(2) != kFaceSize || images->value.dim(3) != kFaceSize)
    throw ShapeError("encoder: input must be [N,3,112,112], got " +
                     images->value.shape_str());
  EncoderTaps out;
  Var h = relu(bn_stem_.forward(stem_.forward(images), training));   // 112
  h = relu(bn1_.forward(down1_.forward(h), training));               // 56
  h = relu(bn2_.forward(down2_.forward(h), training));               // 28
  h = relu(bn3_.forward(down3_.forward(h), training));               // 14
  out.f3 = h;
  h = relu(bn4_.forward(down4_.forward(h), training));               // 7
  out.f4 = h;
  Var main = relu(bn_res_a_.forward(res_a_.forward(h), training));
  main = bn_res_b_.forward(res_b_.forward(main), training);
  Var skip = res_skip_.forward(h);
  out.f5 = relu(add(main, skip));                                    // 7x7xC5
  // Global average pool -> feature vector.
  int n = images->value.dim(0);
  Var pooled = mul_scalar(sample_sum(reshape(out.f5, {n * config_.c5, 7 * 7})),
                          1.0 / 49.0);
  out.f = fc_feat_.forward(reshape(pooled, {n, config_.c5}));
  if (config_.n_classes > 0) out.logits = head_.forward(out.f);
  return out;
}

FaceFeatures Encoder::encode(const FaceImage& image) {
  validate_face_image(image.pixels);
  Var input = make_const(stack_faces({&image}));
  EncoderTaps taps = forward(input, /*training=*/false);
  FaceFeatures feats;
  feats.f = taps.f->value.reshaped({config_.feature_dim});
  feats.f3 = taps.f3->value.reshaped({config_.c3, 14, 14});
  feats.f4 = taps.f4->value.reshaped({config_.c4, 7, 7});
  feats.f5 = taps.f5->value.reshaped({config_.c5, 7, 7});
  double norm_sq = 0.0;
  for (std::int64_t i = 0; i < feats.f.numel(); ++i) norm_sq += feats.f[i] * feats.f[i];
  if (!feats.f.all_finite() || norm_sq == 0.0)
    throw NumericError("encoder: feature vector is degenerate");
  return feats;
}

void Encoder::collect(ParamCollector& pc) {
  stem_.collect("stem", pc);
  bn_stem_.collect("bn_stem", pc);
  down1_.collect("down1", pc);
  bn1_.collect("bn1", pc);
  down2_.collect("down2", pc);
  bn2_.collect("bn2", pc);
  down3_.collect("down3", pc);
  bn3_.collect("bn3", pc);
  down4_.collect("down4", pc);
  bn4_.collect("bn4", pc);
  res_a_.collect("res_a", pc);
  bn_res_a_.collect("bn_res_a", pc);
  res_b_.collect("res_b", pc);
  bn_res_b_.collect("bn_res_b", pc);
  res_skip_.collect("res_skip", pc);
  fc_feat_.collect("fc_feat", pc);
  if (config_.n_classes > 0) head_.collect("head", pc);
}

std::vector<Var> Encoder::parameters() {
  ParamCollector pc;
  collect(pc);
  std::vector<Var> out;
  for (auto& p : pc.params) out.push_back(p.var);
  return out;
}

void Encoder::save(const std::filesystem::path& path_prefix) {
  ParamCollector pc;
  collect(pc);
  save_blob(path_prefix.string() + ".bin", pc);
  json meta;
  meta["kind"] = "encoder";
  meta["format_version"] = kBlobVersion;
  meta["channels"] = {{"c_stem", config_.c_stem}, {"c1", config_.c1},
                      {"c2", config_.c2},         {"c3", config_.c3},
                      {"c4", config_.c4},         {"c5", config_.c5}};
  meta["tap_shapes"] = {{"f3", {config_.c3, 14, 14}},
                        {"f4", {config_.c4, 7, 7}},
                        {"f5", {config_.c5, 7, 7}}};
  meta["feature_dim"] = config_.feature_dim;
  meta["n_classes"] = config_.n_classes;
  meta["pixel_norm"] = config_.pixel_norm;
  write_text_file(path_prefix.string() + ".json", meta.dump(2) + "\n");
}

Encoder Encoder::load(const std::filesystem::path& path_prefix) {
  json meta = json::parse(read_text_file(path_prefix.string() + ".json"));
  if (meta.value("kind", "") != "encoder")
    throw DataError("encoder: sidecar is not an encoder checkpoint");
  EncoderConfig config;
  config.c_stem = meta["channels"]["c_stem"];
  config.c1 = meta["channels"]["c1"];
  config.c2 = meta["channels"]["c2"];
  config.c3 = meta["channels"]["c3"];
  config.c4 = meta["channels"]["c4"];
  config.c5 = meta["channels"]["c5"];
  config.feature_dim = meta["feature_dim"];
  config.n_classes = meta["n_classes"];
  config.pixel_norm = meta["pixel_norm"];
  Encoder enc(config, Rng(0));
  ParamCollector pc;
  enc.collect(pc);
  load_blob(path_prefix.string() + ".bin", pc);
  return enc;
}

std::uint64_t Encoder::weights_hash() {
  ParamCollector pc;
  collect(pc);
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& p : pc.params)
    h = fnv1a_bytes(p.var->value.data(), p.var->value.numel() * sizeof(double), h);
  for (const auto& b : pc.buffers)
    h = fnv1a_bytes(b.tensor->data(), b.tensor->numel() * sizeof(double), h);
  return h;
}

double cosine_distance(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw ShapeError("cosine_distance: size mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw DomainError("cosine_distance: zero-norm input");
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

std::pair<Encoder, EncoderTrainResult> train_desk_encoder(
    const DatasetIndex& dataset, const EncoderTrainConfig& config) {
  if (dataset.identity_count() < 2)
    throw ConfigError("train_desk_encoder: need at least 2 identities, got " +
                      std::to_string(dataset.identity_count()));
  Rng rng(config.seed);

  EncoderConfig arch = config.arch;
  arch.n_classes = dataset.identity_count();
  Encoder enc(arch, rng.split("init"));

  // Per-identity holdout split, deterministic under the seed.
  struct Example {
    std::string path;
    int label;
  };
  std::vector<Example> train, holdout;
  Rng split_rng = rng.split("split");
  for (int id = 0; id < dataset.identity_count(); ++id) {
    std::vector<std::string> images = dataset.identities[id].images;
    split_rng.shuffle(images);
    int n_hold = static_cast<int>(images.size() > 1
                                      ? std::max<std::size_t>(1, static_cast<std::size_t>(
                                            config.holdout_fraction * images.size()))
                                      : 0);
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (static_cast<int>(i) < n_hold)
        holdout.push_back({images[i], id});
      else
        train.push_back({images[i], id});
    }
  }
  if (train.size() < 2) throw ConfigError("train_desk_encoder: dataset too small");

  ImageCache cache(dataset);
  Adam opt(enc.parameters(), 0.9, 0.999);

  double final_loss = 0.0;
  Rng epoch_rng = rng.split("epochs");
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    epoch_rng.shuffle(train);
    std::size_t batch = std::min<std::size_t>(config.batch_size, train.size());
    for (std::size_t start = 0; start + batch <= train.size(); start += batch) {
      std::vector<const FaceImage*> faces;
      std::vector<int> labels;
      for (std::size_t i = start; i < start + batch; ++i) {
        faces.push_back(&cache.get(train[i].path));
        labels.push_back(train[i].label);
      }
      Var input = make_const(stack_faces(faces));
      EncoderTaps taps = enc.forward(input, /*training=*/true);
      Var loss = softmax_cross_entropy(taps.logits, labels);
      if (!std::isfinite(loss->value[0]))
        throw NumericError("train_desk_encoder: non-finite loss");
      opt.zero_grad();
      backward(loss);
      opt.step(config.lr);
      final_loss = loss->value[0];
    }
  }

  // Held-out top-1 accuracy in inference mode.
  EncoderTrainResult result;
  result.final_loss = final_loss;
  if (!holdout.empty()) {
    int correct = 0;
    for (const auto& ex : holdout) {
      std::vector<const FaceImage*> faces{&cache.get(ex.path)};
      EncoderTaps taps = enc.forward(make_const(stack_faces(faces)), false);
      int best = 0;
      for (int c = 1; c < arch.n_classes; ++c)
        if (taps.logits->value.at(0, c) > taps.logits->value.at(0, best)) best = c;
      if (best == ex.label) ++correct;
    }
    result.holdout_accuracy = static_cast<double>(correct) / holdout.size();
  }
  return {std::move(enc), result};
}

}  // namespace morph
