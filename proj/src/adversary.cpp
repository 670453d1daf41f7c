#include "morph/adversary.hpp"

#include <nlohmann/json.hpp>

#include "morph/errors.hpp"
#include "morph/serialize.hpp"

namespace morph {

using nlohmann::json;

Discriminator::Discriminator(const DiscriminatorConfig& config, Rng rng)
    : config_(config) {
  // 112 -> 56 -> 28 -> 27 -> 26 with 4x4 kernels, pad 1.
  conv1_ = Conv2d(3, config.width(0), 4, 2, 1, rng.split("conv1"));
  conv2_ = Conv2d(config.width(0), config.width(1), 4, 2, 1, rng.split("conv2"));
  bn2_ = BatchNorm2d(config.width(1));
  conv3_ = Conv2d(config.width(1), config.width(2), 4, 1, 1, rng.split("conv3"));
  bn3_ = BatchNorm2d(config.width(2));
  conv4_ = Conv2d(config.width(2), config.width(3), 4, 1, 1, rng.split("conv4"));
  bn4_ = BatchNorm2d(config.width(3));
  fc_in_ = config.width(3) * 26 * 26;
  fc_ = Linear(fc_in_, 1, rng.split("fc"));
}

Var Discriminator::forward(const Var& images, bool training) {
  if (images->value.rank() != 4 || images->value.dim(1) != 3 ||
      images->value.dim(2) != kFaceSize || images->value.dim(3) != kFaceSize)
    throw ShapeError("discriminator: input must be [N,3,112,112], got " +
                     images->value.shape_str());
  const double slope = 0.2;
  Var h = leaky_relu(conv1_.forward(images), slope);
  h = leaky_relu(bn2_.forward(conv2_.forward(h), training), slope);
  h = leaky_relu(bn3_.forward(conv3_.forward(h), training), slope);
  h = leaky_relu(bn4_.forward(conv4_.forward(h), training), slope);
  int n = images->value.dim(0);
  Var logits = fc_.forward(reshape(h, {n, fc_in_}));
  return clamp(sigmoid(logits), kProbEps, 1.0 - kProbEps);
}

double Discriminator::discriminate(const FaceImage& image) {
  validate_face_image(image.pixels);
  Var p = forward(make_const(stack_faces({&image})), /*training=*/false);
  return p->value[0];
}

std::vector<Var> Discriminator::parameters() {
  ParamCollector pc;
  collect(pc);
  std::vector<Var> out;
  for (auto& p : pc.params) out.push_back(p.var);
  return out;
}

void Discriminator::collect(ParamCollector& pc) {
  conv1_.collect("conv1", pc);
  conv2_.collect("conv2", pc);
  bn2_.collect("bn2", pc);
  conv3_.collect("conv3", pc);
  bn3_.collect("bn3", pc);
  conv4_.collect("conv4", pc);
  bn4_.collect("bn4", pc);
  fc_.collect("fc", pc);
}

void Discriminator::save(const std::filesystem::path& path_prefix) {
  ParamCollector pc;
  collect(pc);
  save_blob(path_prefix.string() + ".bin", pc);
  json meta;
  meta["kind"] = "discriminator";
  meta["format_version"] = kBlobVersion;
  meta["channel_scale"] = config_.channel_scale;
  write_text_file(path_prefix.string() + ".json", meta.dump(2) + "\n");
}

Discriminator Discriminator::load(const std::filesystem::path& path_prefix) {
  json meta = json::parse(read_text_file(path_prefix.string() + ".json"));
  if (meta.value("kind", "") != "discriminator")
    throw DataError("discriminator: sidecar is not a discriminator checkpoint");
  DiscriminatorConfig config;
  config.channel_scale = meta["channel_scale"];
  Discriminator d(config, Rng(0));
  ParamCollector pc;
  d.collect(pc);
  load_blob(path_prefix.string() + ".bin", pc);
  return d;
}

}  // namespace morph
