#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "morph/errors.hpp"
#include "morph/losses.hpp"
#include "morph/morphnet.hpp"
#include "test_support.hpp"

using namespace morph;
using test_support::bitwise_equal;
using test_support::grid_alpha;
using test_support::random_tensor;
using test_support::scratch_dir;

namespace {

GeneratorConfig tiny_config() {
  GeneratorConfig c;
  c.channel_scale = 1.0 / 16.0;
  c.cond_map_channels = 16;
  return c;
}

FaceFeatures fake_features(const GeneratorConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  FaceFeatures f;
  f.f = random_tensor({config.cond_vector_dim}, rng);
  f.f3 = random_tensor({8, 14, 14}, rng);
  f.f4 = random_tensor({config.cond_map_channels, 7, 7}, rng);
  f.f5 = random_tensor({16, 7, 7}, rng);
  return f;
}

// Loop-based oracle for the full blend pipeline on small maps, recomputing
// batch-norm, mask convolution, projections and the alpha blend from the raw
// parameter tensors.
Tensor blend_oracle(AadBlend& blend, const Tensor& h, const Tensor& cond1,
                    const Tensor& cond2, double alpha) {
  int n = h.dim(0), c = h.dim(1), hh = h.dim(2), ww = h.dim(3);
  double eps = blend.bn.eps;

  // Batch statistics per channel over (N,H,W).
  Tensor h_bar(h.shape());
  for (int ch = 0; ch < c; ++ch) {
    double m = 0.0, v = 0.0;
    for (int b = 0; b < n; ++b)
      for (int y = 0; y < hh; ++y)
        for (int x = 0; x < ww; ++x) m += h.at(b, ch, y, x);
    m /= n * hh * ww;
    for (int b = 0; b < n; ++b)
      for (int y = 0; y < hh; ++y)
        for (int x = 0; x < ww; ++x) {
          double d = h.at(b, ch, y, x) - m;
          v += d * d;
        }
    v /= n * hh * ww;
    for (int b = 0; b < n; ++b)
      for (int y = 0; y < hh; ++y)
        for (int x = 0; x < ww; ++x)
          h_bar.at(b, ch, y, x) = blend.bn.gamma->value[ch] *
                                      (h.at(b, ch, y, x) - m) / std::sqrt(v + eps) +
                                  blend.bn.beta->value[ch];
  }

  // Mask: 3x3 conv, pad 1, sigmoid.
  const Tensor& mw = blend.mask_conv.w->value;
  const Tensor& mb = blend.mask_conv.b->value;
  Tensor mask({n, 1, hh, ww});
  for (int b = 0; b < n; ++b)
    for (int y = 0; y < hh; ++y)
      for (int x = 0; x < ww; ++x) {
        double acc = mb[0];
        for (int ch = 0; ch < c; ++ch)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              int iy = y + ky - 1, ix = x + kx - 1;
              if (iy >= 0 && iy < hh && ix >= 0 && ix < ww)
                acc += h_bar.at(b, ch, iy, ix) * mw.at(0, ch, ky, kx);
            }
        acc = std::min(30.0, std::max(-30.0, acc));
        mask.at(b, 0, y, x) = 1.0 / (1.0 + std::exp(-acc));
      }

  // Shared projection -> per-sample gamma/beta for each condition.
  const Tensor& pw = blend.cond_proj.w->value;
  const Tensor& pb = blend.cond_proj.b->value;
  int cond_dim = pw.dim(0);
  auto project = [&](const Tensor& cond, int b, int out_col) {
    double acc = pb[out_col];
    for (int k = 0; k < cond_dim; ++k) acc += cond.at(b, k) * pw.at(k, out_col);
    return acc;
  };

  Tensor out(h.shape());
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      double g1 = project(cond1, b, ch), b1 = project(cond1, b, c + ch);
      double g2 = project(cond2, b, ch), b2 = project(cond2, b, c + ch);
      for (int y = 0; y < hh; ++y)
        for (int x = 0; x < ww; ++x) {
          double a1 = g1 * h_bar.at(b, ch, y, x) + b1;
          double a2 = g2 * h_bar.at(b, ch, y, x) + b2;
          out.at(b, ch, y, x) =
              mask.at(b, 0, y, x) * (alpha * a1 + (1.0 - alpha) * a2);
        }
    }
  return out;
}

}  // namespace

TEST_CASE("aad_denormalize: forced identity and constant projections") {
  Rng rng(3);
  AadBlend blend(3, 5, rng);
  Var h_bar = make_const(random_tensor({2, 3, 2, 2}, rng));
  Var cond = make_const(random_tensor({2, 5}, rng));

  // Zero weights; bias = [1,1,1, 0,0,0] makes gamma=1, beta=0: A == H̄.
  std::fill(blend.cond_proj.w->value.data(),
            blend.cond_proj.w->value.data() + blend.cond_proj.w->value.numel(), 0.0);
  for (int i = 0; i < 3; ++i) blend.cond_proj.b->value[i] = 1.0;
  for (int i = 3; i < 6; ++i) blend.cond_proj.b->value[i] = 0.0;
  CHECK(bitwise_equal(blend.denormalize(h_bar, cond)->value, h_bar->value));

  // gamma=0, beta=c: constant map per channel.
  for (int i = 0; i < 3; ++i) blend.cond_proj.b->value[i] = 0.0;
  blend.cond_proj.b->value[3] = 2.5;
  blend.cond_proj.b->value[4] = -1.0;
  blend.cond_proj.b->value[5] = 0.25;
  Var a = blend.denormalize(h_bar, cond);
  for (int b = 0; b < 2; ++b)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) {
        CHECK(a->value.at(b, 0, y, x) == 2.5);
        CHECK(a->value.at(b, 1, y, x) == -1.0);
        CHECK(a->value.at(b, 2, y, x) == 0.25);
      }

  // Random de-normalization against an elementwise loop oracle.
  Rng rng2(9);
  blend.cond_proj.w->value = random_tensor({5, 6}, rng2);
  blend.cond_proj.b->value = random_tensor({6}, rng2);
  Var a2 = blend.denormalize(h_bar, cond);
  for (int b = 0; b < 2; ++b)
    for (int ch = 0; ch < 3; ++ch) {
      double g = blend.cond_proj.b->value[ch];
      double bb = blend.cond_proj.b->value[3 + ch];
      for (int k = 0; k < 5; ++k) {
        g += cond->value.at(b, k) * blend.cond_proj.w->value.at(k, ch);
        bb += cond->value.at(b, k) * blend.cond_proj.w->value.at(k, 3 + ch);
      }
      for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x)
          CHECK(a2->value.at(b, ch, y, x) ==
                doctest::Approx(g * h_bar->value.at(b, ch, y, x) + bb)
                    .epsilon(1e-12));
    }

  // Projection/channel mismatch.
  Var bad_cond = make_const(random_tensor({2, 4}, rng2));
  CHECK_THROWS_AS(blend.denormalize(h_bar, bad_cond), ShapeError);
}

TEST_CASE("aad_blend matches the loop oracle on 2x2x3 maps") {
  Rng rng(17);
  AadBlend blend(3, 4, rng);
  Tensor h = random_tensor({2, 3, 2, 2}, rng);
  Tensor c1 = random_tensor({2, 4}, rng);
  Tensor c2 = random_tensor({2, 4}, rng);

  for (double alpha : {0.0, 0.3, 0.5, 0.75, 1.0}) {
    Tensor expected = blend_oracle(blend, h, c1, c2, alpha);
    Var got = blend.forward(make_const(h), make_const(c1), make_const(c2), alpha,
                            /*training=*/true);
    REQUIRE(got->value.same_shape(expected));
    for (std::int64_t i = 0; i < expected.numel(); ++i) {
      double scale = std::max(1.0, std::abs(expected[i]));
      CHECK(std::abs(got->value[i] - expected[i]) / scale < 1e-6);
    }
  }
}

TEST_CASE("aad_blend: alpha=1 boundary gives exactly mask * A1") {
  Rng rng(23);
  AadBlend blend(3, 4, rng);
  Var h = make_const(random_tensor({1, 3, 2, 2}, rng));
  Var c1 = make_const(random_tensor({1, 4}, rng));
  Var c2 = make_const(random_tensor({1, 4}, rng));
  AadBlockIO io;
  Var out = blend.forward(h, c1, c2, 1.0, true, &io);
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x)
        CHECK(out->value.at(0, ch, y, x) ==
              io.mask.at(0, 0, y, x) * io.a1.at(0, ch, y, x));
  // Mask strictly inside (0,1).
  for (std::int64_t i = 0; i < io.mask.numel(); ++i) {
    CHECK(io.mask[i] > 0.0);
    CHECK(io.mask[i] < 1.0);
  }
}

TEST_CASE("aad_blend: equal conditions ignore alpha; swap symmetry is bitwise") {
  Rng rng(31);
  AadBlend blend(4, 6, rng);
  Var h = make_const(random_tensor({2, 4, 3, 3}, rng));
  Var c1 = make_const(random_tensor({2, 6}, rng));
  Var c2 = make_const(random_tensor({2, 6}, rng));

  Var out_a = blend.forward(h, c1, c1, 0.0, true);
  Var out_b = blend.forward(h, c1, c1, 0.3, true);
  Var out_c = blend.forward(h, c1, c1, 1.0, true);
  for (std::int64_t i = 0; i < out_a->value.numel(); ++i) {
    CHECK(out_a->value[i] == doctest::Approx(out_b->value[i]).epsilon(1e-12));
    CHECK(out_a->value[i] == doctest::Approx(out_c->value[i]).epsilon(1e-12));
  }

  Rng alpha_rng(5);
  for (int i = 0; i < 20; ++i) {
    double alpha = grid_alpha(alpha_rng);
    Var fwd = blend.forward(h, c1, c2, alpha, true);
    Var swapped = blend.forward(h, c2, c1, 1.0 - alpha, true);
    CHECK(bitwise_equal(fwd->value, swapped->value));
  }

  CHECK_THROWS_AS(blend.forward(h, c1, c2, 1.5, true), DomainError);
  CHECK_THROWS_AS(blend.forward(h, c1, c2, -0.1, true), DomainError);
}

TEST_CASE("aad_residual_block: zero main path reduces to the identity skip") {
  Rng rng(41);
  AadResBlock block(4, 4, 6, rng);  // same width: identity shortcut
  REQUIRE(!block.blend_skip.has_value());
  auto zero_out = [](Conv2d& conv) {
    std::fill(conv.w->value.data(), conv.w->value.data() + conv.w->value.numel(), 0.0);
    std::fill(conv.b->value.data(), conv.b->value.data() + conv.b->value.numel(), 0.0);
  };
  zero_out(block.conv1);
  zero_out(block.conv2);
  Var h = make_const(random_tensor({2, 4, 3, 3}, rng));
  Var c1 = make_const(random_tensor({2, 6}, rng));
  Var c2 = make_const(random_tensor({2, 6}, rng));
  Var out = block.forward(h, c1, c2, 0.5, true);
  CHECK(bitwise_equal(out->value, h->value));
}

TEST_CASE("channel schedule: paper widths at full scale, halving preserved") {
  GeneratorConfig full;
  CHECK(full.z_channels() == 512);
  int expected[5] = {512, 256, 128, 64, 32};
  for (int k = 0; k < 5; ++k) CHECK(full.block_out(k) == expected[k]);
  CHECK(full.block_in(0) == 512);

  GeneratorConfig tiny = tiny_config();
  Generator gen(tiny, Rng(1));
  FaceFeatures a = fake_features(tiny, 1), b = fake_features(tiny, 2);
  GeneratorConds conds = make_conds(tiny, a, b);
  Var out = gen.forward(conds, 0.5, false);
  CHECK(out->value.shape() == std::vector<int>({1, 3, 112, 112}));
}

TEST_CASE("residual block output widths follow the scaled schedule") {
  GeneratorConfig tiny = tiny_config();
  Rng rng(7);
  Var cond = make_const(random_tensor({1, 8}, rng));
  int h = 7;
  Var x = make_const(random_tensor({1, tiny.z_channels(), 7, 7}, rng));
  for (int k = 0; k < 5; ++k) {
    AadResBlock block(tiny.block_in(k), tiny.block_out(k), 8, rng.split(k));
    x = block.forward(x, cond, cond, 0.5, false);
    CHECK(x->value.dim(1) == tiny.block_out(k));
    if (k < 4) {
      x = upsample_bilinear_x2(x);
      h *= 2;
    }
    CHECK(x->value.dim(2) == h);
  }
  CHECK(h == 112);
}

TEST_CASE("generate_morph: order invariance, range, equal-input degeneracy") {
  GeneratorConfig tiny = tiny_config();
  Generator gen = init_generator(tiny, 99);
  FaceFeatures fa = fake_features(tiny, 11), fb = fake_features(tiny, 12);

  Rng alpha_rng(13);
  for (int i = 0; i < 20; ++i) {
    double alpha = grid_alpha(alpha_rng);
    FaceImage m1 = generate_morph(gen, fa, fb, alpha);
    FaceImage m2 = generate_morph(gen, fb, fa, 1.0 - alpha);
    CHECK(bitwise_equal(m1.pixels, m2.pixels));
  }

  FaceImage m = generate_morph(gen, fa, fb, 0.5);
  CHECK(m.pixels.dim(1) == 112);
  CHECK(m.pixels.dim(2) == 112);
  for (std::int64_t i = 0; i < m.pixels.numel(); ++i) {
    CHECK(m.pixels[i] >= -1.0);
    CHECK(m.pixels[i] <= 1.0);
  }

  FaceImage e0 = generate_morph(gen, fa, fa, 0.0);
  FaceImage e1 = generate_morph(gen, fa, fa, 1.0);
  for (std::int64_t i = 0; i < e0.pixels.numel(); ++i)
    CHECK(e0.pixels[i] == doctest::Approx(e1.pixels[i]).epsilon(1e-12));

  CHECK_THROWS_AS(generate_morph(gen, fa, fb, 1.3), DomainError);
  FaceFeatures bad = fa;
  bad.f4 = Tensor({tiny.cond_map_channels, 14, 14});
  CHECK_THROWS_AS(generate_morph(gen, fa, bad, 0.5), ValidationError);
}

TEST_CASE("init_generator: seeded determinism, Z shape, parameter counts") {
  GeneratorConfig tiny = tiny_config();
  Generator g1 = init_generator(tiny, 7);
  Generator g2 = init_generator(tiny, 7);
  CHECK(g1.weights_hash() == g2.weights_hash());
  Generator g3 = init_generator(tiny, 8);
  CHECK(g1.weights_hash() != g3.weights_hash());

  CHECK(g1.z()->value.shape() ==
        std::vector<int>({1, tiny.z_channels(), 7, 7}));
  GeneratorConfig full;
  CHECK(full.z_channels() == 512);  // 7x7x512 latent at full scale

  ParamCollector pc;
  g1.collect(pc);
  CHECK(pc.params.size() > 0);
  for (const auto& p : pc.params) CHECK(p.var->value.numel() > 0);
}

TEST_CASE("generator checkpoint round-trips bitwise") {
  auto dir = scratch_dir("gen_roundtrip");
  GeneratorConfig tiny = tiny_config();
  Generator gen = init_generator(tiny, 5);
  FaceFeatures fa = fake_features(tiny, 1), fb = fake_features(tiny, 2);
  FaceImage before = generate_morph(gen, fa, fb, 0.25);
  gen.save(dir / "gen");
  Generator loaded = Generator::load(dir / "gen");
  CHECK(loaded.weights_hash() == gen.weights_hash());
  FaceImage after = generate_morph(loaded, fa, fb, 0.25);
  CHECK(bitwise_equal(before.pixels, after.pixels));
}

TEST_CASE("gradient flow reaches every generator parameter including Z") {
  GeneratorConfig tiny = tiny_config();
  Generator gen = init_generator(tiny, 3);
  FaceFeatures fa = fake_features(tiny, 21), fb = fake_features(tiny, 22);
  GeneratorConds conds = make_conds(tiny, fa, fb);
  Var out = gen.forward(conds, 0.5, /*training=*/true);
  // Simple differentiable objective on the image.
  Var loss = mean(square(out));
  backward(loss);
  ParamCollector pc;
  gen.collect(pc);
  for (const auto& p : pc.params) {
    REQUIRE(!p.var->grad.empty());
    bool any_nonzero = false;
    for (std::int64_t i = 0; i < p.var->grad.numel(); ++i)
      if (p.var->grad[i] != 0.0) {
        any_nonzero = true;
        break;
      }
    CHECK_MESSAGE(any_nonzero, p.name, " has an all-zero gradient");
  }
}
