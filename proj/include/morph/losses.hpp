#pragma once

#include <vector>

#include "morph/autodiff.hpp"

namespace morph {

struct LossWeights {
  double lambda_adv = 1.0;
  double lambda_id = 2.0;
  double lambda_per = 0.5;
  double lambda_style = 120.0;
  void validate() const;  // ConfigError on negative weights
};

struct LossBreakdown {
  double adv_g = 0.0;
  double id = 0.0;
  double per = 0.0;
  double style = 0.0;
  double total = 0.0;
  double adv_d = 0.0;
};

// Batched graph losses; probabilities are [N,1], features [N,D], maps
// [N,C,H,W]. Every alpha-weighted loss satisfies
// L(inputs1, inputs2, alpha) == L(inputs2, inputs1, 1-alpha) bitwise whenever
// alpha and 1-alpha are exactly complementary doubles.
Var loss_adv_generator(const Var& p_m);
Var loss_adv_discriminator(const Var& p_m, const Var& p_real1, const Var& p_real2);
Var loss_identity(const Var& f_m, const Var& f_1, const Var& f_2, double alpha);
Var loss_perceptual(const std::vector<Var>& maps_1, const std::vector<Var>& maps_2,
                    const std::vector<Var>& maps_m, double alpha);
Var loss_style(const std::vector<Var>& maps_1, const std::vector<Var>& maps_2,
               const std::vector<Var>& maps_m, double alpha);
Var loss_total(const Var& adv_g, const Var& id, const Var& per, const Var& style,
               const LossWeights& weights, LossBreakdown* breakdown = nullptr);

// Plain single-sample forms used by tools and oracle tests.
double loss_adv_generator(double p_m);
double loss_adv_discriminator(double p_m, double p_1, double p_2);
double loss_identity(const Tensor& f_m, const Tensor& f_1, const Tensor& f_2,
                     double alpha);
double loss_perceptual(const std::vector<Tensor>& maps_1,
                       const std::vector<Tensor>& maps_2,
                       const std::vector<Tensor>& maps_m, double alpha);
double loss_style(const std::vector<Tensor>& maps_1,
                  const std::vector<Tensor>& maps_2,
                  const std::vector<Tensor>& maps_m, double alpha);
LossBreakdown compose_total(double adv_g, double id, double per, double style,
                            const LossWeights& weights);

// [C,H,W] -> [C,C], normalized by channels * spatial positions.
Tensor gram_matrix(const Tensor& map);

}  // namespace morph
