#include "morph/morphnet.hpp"

#include <array>
#include <cmath>

#include <nlohmann/json.hpp>

#include "morph/errors.hpp"
#include "morph/serialize.hpp"

namespace morph {

using nlohmann::json;

AadBlend::AadBlend(int channels_, int cond_dim, Rng rng) : channels(channels_) {
  bn = BatchNorm2d(channels);
  mask_conv = Conv2d(channels, 1, 3, 1, 1, rng.split("mask"));
  cond_proj = Linear(cond_dim, 2 * channels, rng.split("proj"));
}

Var AadBlend::denormalize(const Var& h_bar, const Var& cond) {
  if (cond->value.rank() != 2 || cond->value.dim(1) != cond_proj.w->value.dim(0))
    throw ShapeError("aad_denormalize: condition dim " + cond->value.shape_str() +
                     " does not match projection input " +
                     std::to_string(cond_proj.w->value.dim(0)));
  if (h_bar->value.dim(1) != channels)
    throw ShapeError("aad_denormalize: channel mismatch");
  Var p = cond_proj.forward(cond);
  Var gamma = slice_cols(p, 0, channels);
  Var beta = slice_cols(p, channels, channels);
  return channel_affine(h_bar, gamma, beta);
}

Var AadBlend::forward(const Var& h, const Var& cond1, const Var& cond2,
                      double alpha, bool training, AadBlockIO* io) {
  if (alpha < 0.0 || alpha > 1.0)
    throw DomainError("aad_blend: alpha outside [0,1]");
  if (h->value.dim(1) != channels)
    throw ShapeError("aad_blend: expected " + std::to_string(channels) +
                     " channels, got " + std::to_string(h->value.dim(1)));
  if (!cond1->value.same_shape(cond2->value))
    throw ShapeError("aad_blend: condition shapes differ");

  Var h_bar = bn.forward(h, training);
  // Bounded logits keep the sigmoid strictly inside (0,1).
  Var mask = sigmoid(clamp(mask_conv.forward(h_bar), -30.0, 30.0));

  Var a1 = denormalize(h_bar, cond1);
  Var a2 = denormalize(h_bar, cond2);

  double one_minus_alpha = 1.0 - alpha;
  Var blended = scale_add(a1, a2, alpha, one_minus_alpha);
  Var h_out = mul_mask(blended, mask);
  if (io) {
    io->h = h->value;
    io->h_bar = h_bar->value;
    io->mask = mask->value;
    io->a1 = a1->value;
    io->a2 = a2->value;
    io->h_out = h_out->value;
    io->alpha = alpha;
  }
  return h_out;
}

void AadBlend::collect(const std::string& prefix, ParamCollector& pc) {
  bn.collect(prefix + ".bn", pc);
  mask_conv.collect(prefix + ".mask_conv", pc);
  cond_proj.collect(prefix + ".cond_proj", pc);
}

AadResBlock::AadResBlock(int c_in_, int c_out_, int cond_dim, Rng rng)
    : c_in(c_in_), c_out(c_out_) {
  blend1 = AadBlend(c_in, cond_dim, rng.split("blend1"));
  conv1 = Conv2d(c_in, c_out, 3, 1, 1, rng.split("conv1"));
  blend2 = AadBlend(c_out, cond_dim, rng.split("blend2"));
  conv2 = Conv2d(c_out, c_out, 3, 1, 1, rng.split("conv2"));
  if (c_in != c_out) {
    blend_skip.emplace(c_in, cond_dim, rng.split("blend_skip"));
    conv_skip.emplace(c_in, c_out, 3, 1, 1, rng.split("conv_skip"));
  }
}

Var AadResBlock::forward(const Var& h, const Var& cond1, const Var& cond2,
                         double alpha, bool training) {
  if (h->value.dim(1) != c_in)
    throw ConfigError("aad_residual_block: input width " +
                      std::to_string(h->value.dim(1)) + " does not match schedule " +
                      std::to_string(c_in));
  Var main = conv1.forward(relu(blend1.forward(h, cond1, cond2, alpha, training)));
  main = conv2.forward(relu(blend2.forward(main, cond1, cond2, alpha, training)));
  Var skip = h;
  if (blend_skip)
    skip = conv_skip->forward(
        relu(blend_skip->forward(h, cond1, cond2, alpha, training)));
  return add(main, skip);
}

void AadResBlock::collect(const std::string& prefix, ParamCollector& pc) {
  blend1.collect(prefix + ".blend1", pc);
  conv1.collect(prefix + ".conv1", pc);
  blend2.collect(prefix + ".blend2", pc);
  conv2.collect(prefix + ".conv2", pc);
  if (blend_skip) {
    blend_skip->collect(prefix + ".blend_skip", pc);
    conv_skip->collect(prefix + ".conv_skip", pc);
  }
}

Generator::Generator(const GeneratorConfig& config, Rng rng) : config_(config) {
  if (config.cond_vector_dim <= 0 || config.cond_map_channels <= 0)
    throw ConfigError("generator: condition dims must be positive");
  z_ = make_param(gaussian_tensor({1, config.z_channels(), 7, 7},
                                  config.z_init_stddev, rng.split("z")));
  int map_dim = config.cond_map_channels * 7 * 7;
  for (int k = 0; k < 5; ++k) {
    int cond_dim = k == 0 ? map_dim : config.cond_vector_dim;
    blocks_.emplace_back(config.block_in(k), config.block_out(k), cond_dim,
                         rng.split("block" + std::to_string(k)));
  }
  int c_last = config.block_out(4);
  head3x3_ = Conv2d(c_last, c_last, 3, 1, 1, rng.split("head3x3"));
  head1x1_ = Conv2d(c_last, 3, 1, 1, 0, rng.split("head1x1"));
}

Var Generator::forward(const GeneratorConds& conds, double alpha, bool training) {
  if (alpha < 0.0 || alpha > 1.0)
    throw DomainError("generate_morph: alpha outside [0,1]");
  int n = conds.vec1->value.dim(0);
  Var h = batch_tile(z_, n);
  h = blocks_[0].forward(h, conds.map1, conds.map2, alpha, training);  // 7
  for (int k = 1; k < 5; ++k) {
    h = upsample_bilinear_x2(h);  // 14, 28, 56, 112
    h = blocks_[k].forward(h, conds.vec1, conds.vec2, alpha, training);
  }
  h = head1x1_.forward(head3x3_.forward(h));
  return clamp(h, -1.0, 1.0);
}

std::vector<Var> Generator::parameters() {
  ParamCollector pc;
  collect(pc);
  std::vector<Var> out;
  for (auto& p : pc.params) out.push_back(p.var);
  return out;
}

void Generator::collect(ParamCollector& pc) {
  pc.add("z", z_);
  for (int k = 0; k < 5; ++k)
    blocks_[k].collect("block" + std::to_string(k), pc);
  head3x3_.collect("head3x3", pc);
  head1x1_.collect("head1x1", pc);
}

void Generator::save(const std::filesystem::path& path_prefix) {
  ParamCollector pc;
  collect(pc);
  save_blob(path_prefix.string() + ".bin", pc);
  json meta;
  meta["kind"] = "generator";
  meta["format_version"] = kBlobVersion;
  meta["channel_scale"] = config_.channel_scale;
  meta["cond_vector_dim"] = config_.cond_vector_dim;
  meta["cond_map_channels"] = config_.cond_map_channels;
  meta["z_init_stddev"] = config_.z_init_stddev;
  json schedule = json::array();
  for (int k = 0; k < 5; ++k) schedule.push_back(config_.block_out(k));
  meta["channel_schedule"] = schedule;
  meta["normalization"] = "batchnorm: batch stats in training, running averages at inference";
  write_text_file(path_prefix.string() + ".json", meta.dump(2) + "\n");
}

Generator Generator::load(const std::filesystem::path& path_prefix) {
  json meta = json::parse(read_text_file(path_prefix.string() + ".json"));
  if (meta.value("kind", "") != "generator")
    throw DataError("generator: sidecar is not a generator checkpoint");
  GeneratorConfig config;
  config.channel_scale = meta["channel_scale"];
  config.cond_vector_dim = meta["cond_vector_dim"];
  config.cond_map_channels = meta["cond_map_channels"];
  config.z_init_stddev = meta["z_init_stddev"];
  Generator gen(config, Rng(0));
  ParamCollector pc;
  gen.collect(pc);
  load_blob(path_prefix.string() + ".bin", pc);
  return gen;
}

std::uint64_t Generator::weights_hash() {
  ParamCollector pc;
  collect(pc);
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& p : pc.params)
    h = fnv1a_bytes(p.var->value.data(), p.var->value.numel() * sizeof(double), h);
  for (const auto& b : pc.buffers)
    h = fnv1a_bytes(b.tensor->data(), b.tensor->numel() * sizeof(double), h);
  return h;
}

Generator init_generator(const GeneratorConfig& config, std::uint64_t seed) {
  return Generator(config, Rng(seed));
}

GeneratorConds make_conds(const GeneratorConfig& config, const FaceFeatures& feats1,
                          const FaceFeatures& feats2) {
  auto check = [&](const FaceFeatures& f, const char* which) {
    if (f.f4.empty())
      throw ValidationError(std::string("generate_morph: missing F4 tap on ") + which);
    if (f.f4.rank() != 3 || f.f4.dim(0) != config.cond_map_channels ||
        f.f4.dim(1) != 7 || f.f4.dim(2) != 7)
      throw ValidationError(std::string("generate_morph: F4 tap shape ") +
                            f.f4.shape_str() + " does not match generator config");
    if (f.f.numel() != config.cond_vector_dim)
      throw ValidationError("generate_morph: feature dim mismatch");
  };
  check(feats1, "input 1");
  check(feats2, "input 2");
  int map_dim = config.cond_map_channels * 7 * 7;
  GeneratorConds conds;
  conds.map1 = make_const(feats1.f4.reshaped({1, map_dim}));
  conds.map2 = make_const(feats2.f4.reshaped({1, map_dim}));
  conds.vec1 = make_const(feats1.f.reshaped({1, config.cond_vector_dim}));
  conds.vec2 = make_const(feats2.f.reshaped({1, config.cond_vector_dim}));
  return conds;
}

FaceImage generate_morph(Generator& gen, const FaceFeatures& feats1,
                         const FaceFeatures& feats2, double alpha) {
  GeneratorConds conds = make_conds(gen.config(), feats1, feats2);
  Var out = gen.forward(conds, alpha, /*training=*/false);
  Tensor pixels = out->value.reshaped({3, kFaceSize, kFaceSize});
  return FaceImage::from_tensor(std::move(pixels));
}

}  // namespace morph
