#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "morph/encoder.hpp"
#include "morph/errors.hpp"
#include "morph/synth.hpp"
#include "test_support.hpp"

using namespace morph;
using test_support::scratch_dir;

namespace {

EncoderConfig micro_arch() {
  EncoderConfig c;
  c.c_stem = 2;
  c.c1 = 4;
  c.c2 = 8;
  c.c3 = 8;
  c.c4 = 16;
  c.c5 = 16;
  c.feature_dim = 32;
  return c;
}

FaceImage random_face(std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({3, kFaceSize, kFaceSize});
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-1.0, 1.0);
  return FaceImage{std::move(t)};
}

}  // namespace

TEST_CASE("cosine distance: identity, orthogonal, antipodal, symmetry") {
  Tensor a({2}, {1.0, 0.0});
  Tensor b({2}, {0.0, 1.0});
  Tensor c({2}, {-1.0, 0.0});
  CHECK(cosine_distance(a, a) == doctest::Approx(0.0));
  CHECK(cosine_distance(a, b) == doctest::Approx(1.0));
  CHECK(cosine_distance(a, c) == doctest::Approx(2.0));

  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    Tensor u = test_support::random_tensor({8}, rng);
    Tensor v = test_support::random_tensor({8}, rng);
    double uv = cosine_distance(u, v);
    double vu = cosine_distance(v, u);
    CHECK(uv == vu);
    double s = rng.uniform(0.1, 5.0);
    Tensor su(u.shape());
    for (std::int64_t j = 0; j < u.numel(); ++j) su[j] = s * u[j];
    CHECK(std::abs(cosine_distance(u, su)) < 1e-12);
    double d = cosine_distance(u, v);
    CHECK(d >= -1e-12);
    CHECK(d <= 2.0 + 1e-12);
  }

  Tensor zero({2}, {0.0, 0.0});
  CHECK_THROWS_AS(cosine_distance(a, zero), DomainError);
}

TEST_CASE("encode: shapes, determinism, validation") {
  EncoderConfig arch = EncoderConfig::desk(0);
  Encoder enc(arch, Rng(11));
  FaceImage img = random_face(5);

  FaceFeatures f1 = enc.encode(img);
  CHECK(f1.f.numel() == 256);
  CHECK(f1.f3.shape() == std::vector<int>({arch.c3, 14, 14}));
  CHECK(f1.f4.shape() == std::vector<int>({arch.c4, 7, 7}));
  CHECK(f1.f5.shape() == std::vector<int>({arch.c5, 7, 7}));

  FaceFeatures f2 = enc.encode(img);
  CHECK(test_support::bitwise_equal(f1.f, f2.f));
  CHECK(test_support::bitwise_equal(f1.f4, f2.f4));

  // Continuity probe: a 1e-6 per-pixel bump moves f by a small finite amount.
  FaceImage bumped = img;
  for (std::int64_t i = 0; i < bumped.pixels.numel(); ++i)
    bumped.pixels[i] = std::min(1.0, bumped.pixels[i] + 1e-6);
  FaceFeatures f3 = enc.encode(bumped);
  double delta = 0.0, norm = 0.0;
  for (std::int64_t i = 0; i < f1.f.numel(); ++i) {
    delta += (f3.f[i] - f1.f[i]) * (f3.f[i] - f1.f[i]);
    norm += f1.f[i] * f1.f[i];
  }
  delta = std::sqrt(delta);
  norm = std::sqrt(norm);
  CHECK(std::isfinite(delta));
  CHECK(delta < 1e-2 * std::max(1.0, norm));

  // Shape and finiteness violations.
  Tensor bad_shape({3, 64, 64});
  CHECK_THROWS_AS(validate_face_image(bad_shape), ShapeError);
  Tensor nan_img = img.pixels;
  nan_img[0] = std::nan("");
  CHECK_THROWS_AS(validate_face_image(nan_img), ValidationError);
}

TEST_CASE("encoder save/load round-trips bitwise") {
  auto dir = scratch_dir("enc_roundtrip");
  Encoder enc(micro_arch(), Rng(17));
  FaceImage img = random_face(9);
  FaceFeatures before = enc.encode(img);
  enc.save(dir / "enc");
  Encoder loaded = Encoder::load(dir / "enc");
  FaceFeatures after = loaded.encode(img);
  CHECK(test_support::bitwise_equal(before.f, after.f));
  CHECK(test_support::bitwise_equal(before.f5, after.f5));
  CHECK(enc.weights_hash() == loaded.weights_hash());
}

TEST_CASE("train_desk_encoder: beats chance, deterministic, rejects 1 identity") {
  auto dir = scratch_dir("enc_train");
  DatasetIndex data = generate_synthetic_faces(dir / "data", 4, 6, 101);

  EncoderTrainConfig cfg;
  cfg.arch = micro_arch();
  cfg.epochs = 6;
  cfg.batch_size = 8;
  cfg.lr = 2e-3;
  cfg.seed = 5;
  auto [enc, result] = train_desk_encoder(data, cfg);
  CHECK(result.holdout_accuracy > 1.0 / 4.0);

  auto [enc2, result2] = train_desk_encoder(data, cfg);
  CHECK(result.holdout_accuracy == result2.holdout_accuracy);
  CHECK(enc.weights_hash() == enc2.weights_hash());

  DatasetIndex single;
  single.root = data.root;
  single.identities = {data.identities[0]};
  CHECK_THROWS_AS(train_desk_encoder(single, cfg), ConfigError);
}
