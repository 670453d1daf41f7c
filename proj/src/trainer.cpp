#include "morph/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

#include <nlohmann/json.hpp>

#include "morph/errors.hpp"
#include "morph/serialize.hpp"

namespace morph {

using nlohmann::json;
namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (batch_faces != 2 * identities_per_batch)
    throw ConfigError("train: batch_faces must equal 2 * identities_per_batch");
  if (identities_per_batch < 2) throw ConfigError("train: need >= 2 identities per batch");
  if (gen_lr <= 0 || disc_lr <= 0 || lr_decay <= 0 || decay_interval <= 0 ||
      disc_update_period <= 0)
    throw ConfigError("train: rates and periods must be positive");
  if (pretrain_epochs < 0 || finetune_epochs < 0)
    throw ConfigError("train: epoch counts must be nonnegative");
  if (alpha_sigma <= 0) throw ConfigError("train: alpha_sigma must be positive");
  weights.validate();
}

double TrainConfig::gen_lr_at(int epoch) const {
  return gen_lr * std::pow(lr_decay, epoch / decay_interval);
}
double TrainConfig::disc_lr_at(int epoch) const {
  return disc_lr * std::pow(lr_decay, epoch / decay_interval);
}

double sample_alpha(AlphaMode mode, double mu, double sigma, Rng& rng) {
  if (mode == AlphaMode::fixed_half) return 0.5;
  return rng.truncated_normal(mu, sigma, 0.0, 1.0);
}

std::vector<PairSample> make_batch(const DatasetIndex& dataset,
                                   const TrainConfig& config, TrainPhase phase,
                                   Rng& rng) {
  int k = config.identities_per_batch;
  if (dataset.identity_count() < k)
    throw ConfigError("make_batch: dataset has " +
                      std::to_string(dataset.identity_count()) +
                      " identities, need " + std::to_string(k));
  std::vector<int> order(dataset.identity_count());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  rng.shuffle(order);
  order.resize(k);

  std::vector<PairSample> batch;
  if (phase == TrainPhase::pretrain) {
    // X1 = X2: one image per identity, paired with itself.
    for (int id : order) {
      const auto& ident = dataset.identities[id];
      const std::string& img =
          ident.images[rng.uniform_int(static_cast<std::int64_t>(ident.images.size()))];
      batch.push_back({ident.id, img, ident.id, img});
    }
  } else {
    // Two images per identity; ring pairing guarantees id(X1) != id(X2)
    // while every batch still covers exactly k identities.
    std::vector<std::string> first(k), second(k);
    for (int i = 0; i < k; ++i) {
      const auto& ident = dataset.identities[order[i]];
      auto n = static_cast<std::int64_t>(ident.images.size());
      first[i] = ident.images[rng.uniform_int(n)];
      second[i] = ident.images[rng.uniform_int(n)];
    }
    for (int i = 0; i < k; ++i) {
      const auto& id_a = dataset.identities[order[i]];
      const auto& id_b = dataset.identities[order[(i + 1) % k]];
      batch.push_back({id_a.id, first[i], id_b.id, second[(i + 1) % k]});
    }
  }
  return batch;
}

TrainSession::TrainSession(const TrainConfig& config, const DatasetIndex& dataset,
                           Encoder& frozen_encoder)
    : config_(config),
      dataset_(dataset),
      encoder_(frozen_encoder),
      gen_(config.gen_arch, Rng(config.seed).split("gen_init")),
      disc_(config.disc_arch, Rng(config.seed).split("disc_init")),
      gen_opt_(gen_.parameters()),
      disc_opt_(disc_.parameters()),
      images_(dataset) {
  config.validate();
  if (config.gen_arch.cond_map_channels != frozen_encoder.config().c4)
    throw ConfigError("train: generator cond_map_channels " +
                      std::to_string(config.gen_arch.cond_map_channels) +
                      " does not match encoder c4 " +
                      std::to_string(frozen_encoder.config().c4));
  // The encoder is frozen for the whole session: constant weights, gradients
  // pass through to the image input only.
  for (auto& p : encoder_.parameters()) p->requires_grad = false;
}

const FaceFeatures& TrainSession::features_of(const std::string& rel_path) {
  auto it = feature_cache_.find(rel_path);
  if (it == feature_cache_.end())
    it = feature_cache_.emplace(rel_path, encoder_.encode(images_.get(rel_path))).first;
  return it->second;
}

namespace {

void set_requires_grad(const std::vector<Var>& params, bool value) {
  for (const auto& p : params) p->requires_grad = value;
}

GeneratorConds stack_conds(const GeneratorConfig& config,
                           const std::vector<const FaceFeatures*>& f1,
                           const std::vector<const FaceFeatures*>& f2) {
  int n = static_cast<int>(f1.size());
  int map_dim = config.cond_map_channels * 7 * 7;
  Tensor map1({n, map_dim}), map2({n, map_dim});
  Tensor vec1({n, config.cond_vector_dim}), vec2({n, config.cond_vector_dim});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < map_dim; ++j) {
      map1.at(i, j) = f1[i]->f4[j];
      map2.at(i, j) = f2[i]->f4[j];
    }
    for (int j = 0; j < config.cond_vector_dim; ++j) {
      vec1.at(i, j) = f1[i]->f[j];
      vec2.at(i, j) = f2[i]->f[j];
    }
  }
  GeneratorConds conds;
  conds.map1 = make_const(std::move(map1));
  conds.map2 = make_const(std::move(map2));
  conds.vec1 = make_const(std::move(vec1));
  conds.vec2 = make_const(std::move(vec2));
  return conds;
}

Tensor stack_features(const std::vector<const FaceFeatures*>& feats,
                      const Tensor FaceFeatures::*member) {
  int n = static_cast<int>(feats.size());
  const Tensor& first = feats[0]->*member;
  std::vector<int> shape{n};
  for (int d : first.shape()) shape.push_back(d);
  Tensor out(shape);
  std::int64_t per = first.numel();
  for (int i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < per; ++j) out[i * per + j] = (feats[i]->*member)[j];
  return out;
}

}  // namespace

StepRecord TrainSession::step(const std::vector<PairSample>& batch, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw DomainError("train_step: alpha outside [0,1]");
  StepRecord rec;
  rec.step = global_step_;
  rec.epoch = epoch_;
  rec.alpha = alpha;
  rec.lr_gen = config_.gen_lr_at(epoch_);
  rec.lr_disc = config_.disc_lr_at(epoch_);

  std::vector<const FaceFeatures*> f1s, f2s;
  std::vector<const FaceImage*> x1s, x2s;
  for (const auto& pair : batch) {
    f1s.push_back(&features_of(pair.img1));
    f2s.push_back(&features_of(pair.img2));
    x1s.push_back(&images_.get(pair.img1));
    x2s.push_back(&images_.get(pair.img2));
  }

  // --- generator update (every step) ---
  GeneratorConds conds = stack_conds(config_.gen_arch, f1s, f2s);
  Var morph = gen_.forward(conds, alpha, /*training=*/true);
  EncoderTaps morph_taps = encoder_.forward(morph, /*training=*/false);

  Var f1_const = make_const(stack_features(f1s, &FaceFeatures::f));
  Var f2_const = make_const(stack_features(f2s, &FaceFeatures::f));
  std::vector<Var> maps1{make_const(stack_features(f1s, &FaceFeatures::f4)),
                         make_const(stack_features(f1s, &FaceFeatures::f5))};
  std::vector<Var> maps2{make_const(stack_features(f2s, &FaceFeatures::f4)),
                         make_const(stack_features(f2s, &FaceFeatures::f5))};
  std::vector<Var> mapsm{morph_taps.f4, morph_taps.f5};

  // Freeze the discriminator while scoring the generator.
  set_requires_grad(disc_opt_.params(), false);
  Var p_m = disc_.forward(morph, /*training=*/true);
  set_requires_grad(disc_opt_.params(), true);

  Var l_adv_g = loss_adv_generator(p_m);
  Var l_id = loss_identity(morph_taps.f, f1_const, f2_const, alpha);
  Var l_per = loss_perceptual(maps1, maps2, mapsm, alpha);
  Var l_style = loss_style(maps1, maps2, mapsm, alpha);
  Var total = loss_total(l_adv_g, l_id, l_per, l_style, config_.weights, &rec.losses);

  if (!std::isfinite(rec.losses.total))
    throw NumericError("train_step: non-finite generator loss at step " +
                       std::to_string(global_step_));

  gen_opt_.zero_grad();
  backward(total);
  gen_opt_.step(rec.lr_gen);

  // --- discriminator: loss logged every step, update on the cadence ---
  Var morph_detached = make_const(morph->value);
  Var p_m_d = disc_.forward(morph_detached, /*training=*/true);
  Var p_x1 = disc_.forward(make_const(stack_faces(x1s)), /*training=*/true);
  Var p_x2 = disc_.forward(make_const(stack_faces(x2s)), /*training=*/true);
  Var l_adv_d = loss_adv_discriminator(p_m_d, p_x1, p_x2);
  rec.losses.adv_d = l_adv_d->value[0];
  if (!std::isfinite(rec.losses.adv_d))
    throw NumericError("train_step: non-finite discriminator loss at step " +
                       std::to_string(global_step_));

  if (global_step_ % config_.disc_update_period == 0) {
    disc_opt_.zero_grad();
    backward(l_adv_d);
    disc_opt_.step(rec.lr_disc);
    rec.disc_updated = true;
  }

  ++global_step_;
  return rec;
}

namespace {

std::string csv_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

json config_to_json(const TrainConfig& c) {
  json j;
  j["pretrain_epochs"] = c.pretrain_epochs;
  j["finetune_epochs"] = c.finetune_epochs;
  j["batch_faces"] = c.batch_faces;
  j["identities_per_batch"] = c.identities_per_batch;
  j["gen_lr"] = c.gen_lr;
  j["disc_lr"] = c.disc_lr;
  j["lr_decay"] = c.lr_decay;
  j["decay_interval"] = c.decay_interval;
  j["disc_update_period"] = c.disc_update_period;
  j["alpha_mode"] =
      c.alpha_mode == AlphaMode::fixed_half ? "fixed_half" : "truncated_gaussian";
  j["alpha_mu"] = c.alpha_mu;
  j["alpha_sigma"] = c.alpha_sigma;
  j["seed"] = c.seed;
  j["weights"] = {{"lambda_adv", c.weights.lambda_adv},
                  {"lambda_id", c.weights.lambda_id},
                  {"lambda_per", c.weights.lambda_per},
                  {"lambda_style", c.weights.lambda_style}};
  j["gen_arch"] = {{"channel_scale", c.gen_arch.channel_scale},
                   {"cond_vector_dim", c.gen_arch.cond_vector_dim},
                   {"cond_map_channels", c.gen_arch.cond_map_channels},
                   {"z_init_stddev", c.gen_arch.z_init_stddev}};
  j["disc_arch"] = {{"channel_scale", c.disc_arch.channel_scale}};
  j["batches_per_epoch"] = c.batches_per_epoch;
  j["checkpoint_every"] = c.checkpoint_every;
  return j;
}

}  // namespace

TrainArtifacts run_training(const TrainConfig& config, const DatasetIndex& dataset,
                            Encoder& frozen_encoder, const fs::path& run_dir) {
  config.validate();
  fs::create_directories(run_dir);

  TrainArtifacts artifacts;
  artifacts.run_dir = run_dir;
  artifacts.loss_csv = run_dir / "loss.csv";
  artifacts.schedule_csv = run_dir / "schedule.csv";
  artifacts.batches_csv = run_dir / "batches.csv";
  artifacts.generator_prefix = run_dir / "generator_final";
  artifacts.discriminator_prefix = run_dir / "discriminator_final";

  write_text_file(run_dir / "config.json", config_to_json(config).dump(2) + "\n");
  write_text_file(run_dir / "seed.txt", std::to_string(config.seed) + "\n");

  std::ofstream loss_csv(artifacts.loss_csv, std::ios::binary);
  std::ofstream sched_csv(artifacts.schedule_csv, std::ios::binary);
  std::ofstream batch_csv(artifacts.batches_csv, std::ios::binary);
  loss_csv << "step,epoch,adv_g,adv_d,id,per,style,total,alpha\n";
  sched_csv << "step,epoch,phase,lr_gen,lr_disc,disc_updated\n";
  batch_csv << "step,pair_index,id1,img1,id2,img2\n";

  TrainSession session(config, dataset, frozen_encoder);
  Rng root(config.seed);
  Rng batch_rng = root.split("batches");
  Rng alpha_rng = root.split("alpha");

  int batches_per_epoch = config.batches_per_epoch > 0
                              ? config.batches_per_epoch
                              : std::max(1, dataset.total_images() / config.batch_faces);

  for (int epoch = 0; epoch < config.total_epochs(); ++epoch) {
    session.set_epoch(epoch);
    TrainPhase phase =
        epoch < config.pretrain_epochs ? TrainPhase::pretrain : TrainPhase::finetune;
    for (int b = 0; b < batches_per_epoch; ++b) {
      auto batch = make_batch(dataset, config, phase, batch_rng);
      double alpha = phase == TrainPhase::pretrain
                         ? 0.5
                         : sample_alpha(config.alpha_mode, config.alpha_mu,
                                        config.alpha_sigma, alpha_rng);
      StepRecord rec = session.step(batch, alpha);

      loss_csv << rec.step << "," << rec.epoch << "," << csv_double(rec.losses.adv_g)
               << "," << csv_double(rec.losses.adv_d) << ","
               << csv_double(rec.losses.id) << "," << csv_double(rec.losses.per)
               << "," << csv_double(rec.losses.style) << ","
               << csv_double(rec.losses.total) << "," << csv_double(rec.alpha) << "\n";
      sched_csv << rec.step << "," << rec.epoch << ","
                << (phase == TrainPhase::pretrain ? "pretrain" : "finetune") << ","
                << csv_double(rec.lr_gen) << "," << csv_double(rec.lr_disc) << ","
                << (rec.disc_updated ? 1 : 0) << "\n";
      for (std::size_t p = 0; p < batch.size(); ++p)
        batch_csv << rec.step << "," << p << "," << batch[p].id1 << ","
                  << batch[p].img1 << "," << batch[p].id2 << "," << batch[p].img2
                  << "\n";
    }
    if (config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 &&
        epoch + 1 < config.total_epochs()) {
      session.generator().save(run_dir / ("generator_epoch" + std::to_string(epoch)));
    }
  }

  session.generator().save(artifacts.generator_prefix);
  session.discriminator().save(artifacts.discriminator_prefix);
  return artifacts;
}

}  // namespace morph
