#include "morph/losses.hpp"

#include <cmath>

#include "morph/errors.hpp"

namespace morph {

void LossWeights::validate() const {
  if (lambda_adv < 0 || lambda_id < 0 || lambda_per < 0 || lambda_style < 0)
    throw ConfigError("loss weights must be nonnegative");
}

namespace {

void check_probs(const Var& p, const char* who) {
  for (std::int64_t i = 0; i < p->value.numel(); ++i)
    if (!(p->value[i] > 0.0 && p->value[i] < 1.0))
      throw DomainError(std::string(who) + ": probability outside (0,1)");
}

Var to_batch(const Tensor& t) {
  std::vector<int> shape{1};
  for (int d : t.shape()) shape.push_back(d);
  return make_const(t.reshaped(shape));
}

}  // namespace

Var loss_adv_generator(const Var& p_m) {
  check_probs(p_m, "loss_adv_generator");
  return mean(neg(log_(p_m)));
}

Var loss_adv_discriminator(const Var& p_m, const Var& p_real1, const Var& p_real2) {
  check_probs(p_m, "loss_adv_discriminator");
  check_probs(p_real1, "loss_adv_discriminator");
  check_probs(p_real2, "loss_adv_discriminator");
  Var fake_term = neg(log_(add_scalar(neg(p_m), 1.0)));
  Var real_term = mul_scalar(add(log_(p_real1), log_(p_real2)), 0.5);
  return mean(sub(fake_term, real_term));
}

Var loss_identity(const Var& f_m, const Var& f_1, const Var& f_2, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw DomainError("loss_identity: alpha outside [0,1]");
  Var d1 = rowwise_cosine_distance(f_m, f_1);
  Var d2 = rowwise_cosine_distance(f_m, f_2);
  return mean(scale_add(d1, d2, alpha, 1.0 - alpha));
}

Var loss_perceptual(const std::vector<Var>& maps_1, const std::vector<Var>& maps_2,
                    const std::vector<Var>& maps_m, double alpha) {
  if (maps_1.size() != maps_2.size() || maps_1.size() != maps_m.size() ||
      maps_1.empty())
    throw ShapeError("loss_perceptual: tap lists must match and be nonempty");
  if (alpha < 0.0 || alpha > 1.0)
    throw DomainError("loss_perceptual: alpha outside [0,1]");
  Var total;
  for (std::size_t i = 0; i < maps_1.size(); ++i) {
    double n_elems = static_cast<double>(maps_1[i]->value.numel() /
                                         maps_1[i]->value.dim(0));
    Var t1 = sample_sum(abs_(sub(maps_1[i], maps_m[i])));
    Var t2 = sample_sum(abs_(sub(maps_2[i], maps_m[i])));
    Var tap = scale_add(t1, t2, alpha / n_elems, (1.0 - alpha) / n_elems);
    total = total ? add(total, tap) : tap;
  }
  return mean(total);
}

Var loss_style(const std::vector<Var>& maps_1, const std::vector<Var>& maps_2,
               const std::vector<Var>& maps_m, double alpha) {
  if (maps_1.size() != maps_2.size() || maps_1.size() != maps_m.size() ||
      maps_1.empty())
    throw ShapeError("loss_style: tap lists must match and be nonempty");
  if (alpha < 0.0 || alpha > 1.0) throw DomainError("loss_style: alpha outside [0,1]");
  Var total;
  for (std::size_t i = 0; i < maps_1.size(); ++i) {
    Var gm = gram(maps_m[i]);
    Var t1 = sample_sum(square(sub(gram(maps_1[i]), gm)));
    Var t2 = sample_sum(square(sub(gram(maps_2[i]), gm)));
    Var tap = scale_add(t1, t2, alpha, 1.0 - alpha);
    total = total ? add(total, tap) : tap;
  }
  return mean(total);
}

Var loss_total(const Var& adv_g, const Var& id, const Var& per, const Var& style,
               const LossWeights& weights, LossBreakdown* breakdown) {
  weights.validate();
  Var total = add(add(add(mul_scalar(adv_g, weights.lambda_adv),
                          mul_scalar(id, weights.lambda_id)),
                      mul_scalar(per, weights.lambda_per)),
                  mul_scalar(style, weights.lambda_style));
  if (breakdown) {
    breakdown->adv_g = adv_g->value[0];
    breakdown->id = id->value[0];
    breakdown->per = per->value[0];
    breakdown->style = style->value[0];
    breakdown->total = total->value[0];
  }
  return total;
}

double loss_adv_generator(double p_m) {
  if (!(p_m > 0.0 && p_m < 1.0))
    throw DomainError("loss_adv_generator: probability outside (0,1)");
  return -std::log(p_m);
}

double loss_adv_discriminator(double p_m, double p_1, double p_2) {
  for (double p : {p_m, p_1, p_2})
    if (!(p > 0.0 && p < 1.0))
      throw DomainError("loss_adv_discriminator: probability outside (0,1)");
  return -std::log(1.0 - p_m) - 0.5 * (std::log(p_1) + std::log(p_2));
}

double loss_identity(const Tensor& f_m, const Tensor& f_1, const Tensor& f_2,
                     double alpha) {
  return loss_identity(to_batch(f_m), to_batch(f_1), to_batch(f_2), alpha)->value[0];
}

namespace {
std::vector<Var> to_batches(const std::vector<Tensor>& maps) {
  std::vector<Var> out;
  for (const auto& m : maps) out.push_back(to_batch(m));
  return out;
}
}  // namespace

double loss_perceptual(const std::vector<Tensor>& maps_1,
                       const std::vector<Tensor>& maps_2,
                       const std::vector<Tensor>& maps_m, double alpha) {
  return loss_perceptual(to_batches(maps_1), to_batches(maps_2), to_batches(maps_m),
                         alpha)->value[0];
}

double loss_style(const std::vector<Tensor>& maps_1,
                  const std::vector<Tensor>& maps_2,
                  const std::vector<Tensor>& maps_m, double alpha) {
  return loss_style(to_batches(maps_1), to_batches(maps_2), to_batches(maps_m),
                    alpha)->value[0];
}

LossBreakdown compose_total(double adv_g, double id, double per, double style,
                            const LossWeights& weights) {
  weights.validate();
  LossBreakdown b;
  b.adv_g = adv_g;
  b.id = id;
  b.per = per;
  b.style = style;
  b.total = weights.lambda_adv * adv_g + weights.lambda_id * id +
            weights.lambda_per * per + weights.lambda_style * style;
  return b;
}

Tensor gram_matrix(const Tensor& map) {
  if (map.rank() != 3) throw ShapeError("gram_matrix: map must be [C,H,W]");
  std::vector<int> shape{1};
  for (int d : map.shape()) shape.push_back(d);
  Var g = gram(make_const(map.reshaped(shape)));
  return g->value.reshaped({map.dim(0), map.dim(0)});
}

}  // namespace morph
