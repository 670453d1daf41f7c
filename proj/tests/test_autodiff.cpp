#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "morph/autodiff.hpp"
#include "morph/errors.hpp"
#include "morph/nn.hpp"
#include "morph/rng.hpp"

using namespace morph;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Central-difference check of d(eval)/d(param) for every entry of every
// parameter. `eval` must rebuild the graph from the current parameter values.
void gradcheck(const std::vector<Var>& params, const std::function<Var()>& eval,
               double h = 1e-5, double tol = 1e-6) {
  Var loss = eval();
  for (const auto& p : params)
    if (!p->grad.empty())
      std::fill(p->grad.data(), p->grad.data() + p->grad.numel(), 0.0);
  backward(loss);
  for (const auto& p : params) {
    REQUIRE(!p->grad.empty());
    for (std::int64_t i = 0; i < p->value.numel(); ++i) {
      double orig = p->value[i];
      p->value[i] = orig + h;
      double up = eval()->value[0];
      p->value[i] = orig - h;
      double down = eval()->value[0];
      p->value[i] = orig;
      double numeric = (up - down) / (2.0 * h);
      double analytic = p->grad[i];
      double scale = std::max({1.0, std::abs(numeric), std::abs(analytic)});
      CHECK(std::abs(numeric - analytic) / scale < tol);
    }
  }
}

// Scalarize a tensor output with fixed random weights so every output entry
// influences the loss.
Var scalarize(const Var& out, Rng rng) {
  Tensor w(out->value.shape());
  for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(0.5, 1.5);
  return sum(mul(out, make_const(std::move(w))));
}

}  // namespace

TEST_CASE("elementwise ops match reference values") {
  Var a = make_const(Tensor({3}, {1.0, -2.0, 0.5}));
  Var b = make_const(Tensor({3}, {2.0, 3.0, -1.0}));
  CHECK(add(a, b)->value[1] == doctest::Approx(1.0));
  CHECK(sub(a, b)->value[0] == doctest::Approx(-1.0));
  CHECK(mul(a, b)->value[2] == doctest::Approx(-0.5));
  CHECK(div(a, b)->value[0] == doctest::Approx(0.5));
  CHECK(relu(a)->value[1] == 0.0);
  CHECK(leaky_relu(a, 0.2)->value[1] == doctest::Approx(-0.4));
  CHECK(sigmoid(make_scalar(0.0))->value[0] == doctest::Approx(0.5));
  CHECK(clamp(a, -1.0, 1.0)->value[1] == -1.0);
  CHECK(sum(a)->value[0] == doctest::Approx(-0.5));
  CHECK(mean(a)->value[0] == doctest::Approx(-0.5 / 3));
}

TEST_CASE("shape mismatches are rejected") {
  Var a = make_const(Tensor({3}));
  Var b = make_const(Tensor({4}));
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("gradcheck: elementwise and reductions") {
  Rng rng(7);
  Var a = make_param(random_tensor({2, 3}, rng, 0.2, 1.5));
  Var b = make_param(random_tensor({2, 3}, rng, 0.3, 1.2));
  gradcheck({a, b}, [&] { return scalarize(mul(add(a, b), sub(a, b)), Rng(1)); });
  gradcheck({a, b}, [&] { return scalarize(div(a, b), Rng(2)); });
  gradcheck({a}, [&] { return scalarize(log_(a), Rng(3)); });
  gradcheck({a}, [&] { return scalarize(sqrt_(a), Rng(4)); });
  gradcheck({a}, [&] { return scalarize(sigmoid(a), Rng(5)); });
  gradcheck({a}, [&] { return scalarize(abs_(sub(a, b)), Rng(6)); });
  gradcheck({a, b}, [&] { return scalarize(scale_add(a, b, 0.3, 0.7), Rng(7)); });
  gradcheck({a}, [&] { return mean(square(a)); });
  gradcheck({a}, [&] { return scalarize(sample_sum(a), Rng(8)); });
  gradcheck({a}, [&] { return scalarize(slice_cols(a, 1, 2), Rng(9)); });
  gradcheck({a}, [&] { return scalarize(slice_rows(a, 0, 1), Rng(10)); });
}

TEST_CASE("gradcheck: relu family off the kink") {
  Rng rng(11);
  Tensor t = random_tensor({2, 4}, rng);
  for (std::int64_t i = 0; i < t.numel(); ++i)
    if (std::abs(t[i]) < 0.05) t[i] = 0.1;  // keep finite differences valid
  Var a = make_param(t);
  gradcheck({a}, [&] { return scalarize(relu(a), Rng(1)); });
  gradcheck({a}, [&] { return scalarize(leaky_relu(a, 0.2), Rng(2)); });
  gradcheck({a}, [&] { return scalarize(clamp(a, -2.0, 2.0), Rng(3)); });
}

TEST_CASE("gradcheck: matmul and linear") {
  Rng rng(21);
  Var a = make_param(random_tensor({3, 4}, rng));
  Var b = make_param(random_tensor({4, 2}, rng));
  Var bias = make_param(random_tensor({2}, rng));
  gradcheck({a, b}, [&] { return scalarize(matmul(a, b), Rng(1)); });
  gradcheck({a, b, bias}, [&] { return scalarize(linear(a, b, bias), Rng(2)); });
}

TEST_CASE("conv2d matches a plain loop oracle") {
  Rng rng(31);
  Tensor x = random_tensor({1, 2, 5, 5}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng);
  Tensor b = random_tensor({3}, rng);
  Var out = conv2d(make_const(x), make_const(w), make_const(b), 2, 1);
  int oh = (5 + 2 - 3) / 2 + 1;
  REQUIRE(out->value.dim(2) == oh);
  for (int co = 0; co < 3; ++co)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < oh; ++ox) {
        double acc = b[co];
        for (int ci = 0; ci < 2; ++ci)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              int iy = oy * 2 + ky - 1, ix = ox * 2 + kx - 1;
              if (iy >= 0 && iy < 5 && ix >= 0 && ix < 5)
                acc += x.at(0, ci, iy, ix) * w.at(co, ci, ky, kx);
            }
        CHECK(out->value.at(0, co, oy, ox) == doctest::Approx(acc).epsilon(1e-12));
      }
}

TEST_CASE("gradcheck: conv2d stride 1 and 2") {
  Rng rng(41);
  Var x = make_param(random_tensor({2, 2, 5, 5}, rng));
  Var w = make_param(random_tensor({3, 2, 3, 3}, rng));
  Var b = make_param(random_tensor({3}, rng));
  gradcheck({x, w, b},
            [&] { return scalarize(conv2d(x, w, b, 1, 1), Rng(1)); }, 1e-5, 1e-5);
  gradcheck({x, w, b},
            [&] { return scalarize(conv2d(x, w, b, 2, 1), Rng(2)); }, 1e-5, 1e-5);
}

TEST_CASE("batchnorm2d normalizes and gradchecks in both modes") {
  Rng rng(51);
  Var x = make_param(random_tensor({3, 2, 4, 4}, rng, -2.0, 2.0));
  Var gamma = make_param(Tensor({2}, {1.0, 1.3}));
  Var beta = make_param(Tensor({2}, {0.0, -0.2}));
  Tensor rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1.0);

  Var y = batchnorm2d(x, gamma, beta, rm, rv, true, 0.1, 1e-5);
  for (int c = 0; c < 2; ++c) {
    double m = 0.0, v = 0.0;
    for (int n = 0; n < 3; ++n)
      for (int h = 0; h < 4; ++h)
        for (int w = 0; w < 4; ++w) m += y->value.at(n, c, h, w);
    m /= 48;
    for (int n = 0; n < 3; ++n)
      for (int h = 0; h < 4; ++h)
        for (int w = 0; w < 4; ++w) {
          double d = y->value.at(n, c, h, w) - m;
          v += d * d;
        }
    v /= 48;
    CHECK(m == doctest::Approx(beta->value[c]).epsilon(1e-9));
    CHECK(v == doctest::Approx(gamma->value[c] * gamma->value[c]).epsilon(1e-3));
  }

  gradcheck({x, gamma, beta}, [&] {
    Tensor rm2 = Tensor::zeros({2}), rv2 = Tensor::full({2}, 1.0);
    return scalarize(batchnorm2d(x, gamma, beta, rm2, rv2, true, 0.1, 1e-5), Rng(1));
  }, 1e-5, 1e-5);
  gradcheck({x, gamma, beta}, [&] {
    Tensor rm2 = Tensor::full({2}, 0.2), rv2 = Tensor::full({2}, 0.8);
    return scalarize(batchnorm2d(x, gamma, beta, rm2, rv2, false, 0.1, 1e-5), Rng(2));
  });
}

TEST_CASE("bilinear upsample doubles size and gradchecks") {
  Rng rng(61);
  Var x = make_param(random_tensor({1, 2, 3, 3}, rng));
  Var y = upsample_bilinear_x2(x);
  REQUIRE(y->value.dim(2) == 6);
  REQUIRE(y->value.dim(3) == 6);
  // Constant input stays constant under interpolation.
  Var c = make_const(Tensor::full({1, 1, 2, 2}, 3.5));
  Var yc = upsample_bilinear_x2(c);
  for (std::int64_t i = 0; i < yc->value.numel(); ++i)
    CHECK(yc->value[i] == doctest::Approx(3.5).epsilon(1e-12));
  gradcheck({x}, [&] { return scalarize(upsample_bilinear_x2(x), Rng(1)); });
}

TEST_CASE("gradcheck: channel_affine, mul_mask, batch_tile, gram") {
  Rng rng(71);
  Var x = make_param(random_tensor({2, 3, 2, 2}, rng));
  Var gamma = make_param(random_tensor({2, 3}, rng));
  Var beta = make_param(random_tensor({2, 3}, rng));
  gradcheck({x, gamma, beta},
            [&] { return scalarize(channel_affine(x, gamma, beta), Rng(1)); });

  Var m = make_param(random_tensor({2, 1, 2, 2}, rng, 0.1, 0.9));
  gradcheck({x, m}, [&] { return scalarize(mul_mask(x, m), Rng(2)); });

  Var z = make_param(random_tensor({1, 2, 3, 3}, rng));
  gradcheck({z}, [&] { return scalarize(batch_tile(z, 4), Rng(3)); });

  gradcheck({x}, [&] { return scalarize(gram(x), Rng(4)); });
}

TEST_CASE("gram scaling: constant map") {
  // 2 channels, 4 positions, all ones: G[c,c'] = 4 / (2*4) = 0.5.
  Var x = make_const(Tensor::full({1, 2, 2, 2}, 1.0));
  Var g = gram(x);
  REQUIRE(g->value.numel() == 4);
  for (std::int64_t i = 0; i < 4; ++i)
    CHECK(g->value[i] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("gradcheck: softmax cross entropy and cosine distance") {
  Rng rng(81);
  Var logits = make_param(random_tensor({3, 4}, rng, -2.0, 2.0));
  std::vector<int> labels{1, 3, 0};
  gradcheck({logits}, [&] { return softmax_cross_entropy(logits, labels); });

  Var a = make_param(random_tensor({2, 5}, rng, 0.2, 1.0));
  Var b = make_param(random_tensor({2, 5}, rng, 0.2, 1.0));
  gradcheck({a, b},
            [&] { return scalarize(rowwise_cosine_distance(a, b), Rng(1)); });
}

TEST_CASE("softmax cross entropy value") {
  // Uniform logits over K classes: loss = log K.
  Var logits = make_const(Tensor::zeros({2, 4}));
  std::vector<int> labels{0, 2};
  CHECK(softmax_cross_entropy(logits, labels)->value[0] ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("backward accumulates only into requires_grad parents") {
  Var a = make_param(Tensor::scalar(2.0));
  Var c = make_const(Tensor::scalar(3.0));
  Var loss = mul(a, c);
  backward(loss);
  REQUIRE(!a->grad.empty());
  CHECK(a->grad[0] == doctest::Approx(3.0));
  CHECK(c->grad.empty());
}

TEST_CASE("adam converges on a quadratic") {
  Var x = make_param(Tensor({2}, {5.0, -3.0}));
  Adam opt({x}, 0.9, 0.999);
  for (int i = 0; i < 400; ++i) {
    opt.zero_grad();
    Var loss = mean(square(x));
    backward(loss);
    opt.step(0.05);
  }
  CHECK(std::abs(x->value[0]) < 0.05);
  CHECK(std::abs(x->value[1]) < 0.05);
}

TEST_CASE("rng determinism and splitting") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c = Rng(42).split("x"), d = Rng(42).split("y");
  CHECK(c.next_u64() != d.next_u64());
  Rng e(7);
  for (int i = 0; i < 1000; ++i) {
    double v = e.truncated_normal(0.5, 0.2, 0.0, 1.0);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}
