#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "morph/autodiff.hpp"
#include "morph/rng.hpp"

namespace morph {

struct NamedParam {
  std::string name;
  Var var;
};

// Running statistics are buffers, not parameters: serialized with the
// checkpoint but never touched by the optimizer.
struct NamedBuffer {
  std::string name;
  Tensor* tensor;
};

struct ParamCollector {
  std::vector<NamedParam> params;
  std::vector<NamedBuffer> buffers;
  void add(const std::string& name, const Var& v) { params.push_back({name, v}); }
  void add_buffer(const std::string& name, Tensor* t) { buffers.push_back({name, t}); }
};

inline Tensor gaussian_tensor(std::vector<int> shape, double stddev, Rng rng) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, stddev);
  return t;
}

struct Linear {
  Var w, b;
  Linear() = default;
  Linear(int in, int out, Rng rng) {
    double stddev = std::sqrt(2.0 / in);
    w = make_param(gaussian_tensor({in, out}, stddev, rng));
    b = make_param(Tensor::zeros({out}));
  }
  Var forward(const Var& x) const { return linear(x, w, b); }
  void collect(const std::string& prefix, ParamCollector& pc) const {
    pc.add(prefix + ".w", w);
    pc.add(prefix + ".b", b);
  }
};

struct Conv2d {
  Var w, b;
  int stride = 1, pad = 1;
  Conv2d() = default;
  Conv2d(int c_in, int c_out, int kernel, int stride_, int pad_, Rng rng)
      : stride(stride_), pad(pad_) {
    double stddev = std::sqrt(2.0 / (static_cast<double>(c_in) * kernel * kernel));
    w = make_param(gaussian_tensor({c_out, c_in, kernel, kernel}, stddev, rng));
    b = make_param(Tensor::zeros({c_out}));
  }
  Var forward(const Var& x) const { return conv2d(x, w, b, stride, pad); }
  void collect(const std::string& prefix, ParamCollector& pc) const {
    pc.add(prefix + ".w", w);
    pc.add(prefix + ".b", b);
  }
};

struct BatchNorm2d {
  Var gamma, beta;
  Tensor running_mean, running_var;
  double momentum = 0.1, eps = 1e-5;
  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels) {
    gamma = make_param(Tensor::full({channels}, 1.0));
    beta = make_param(Tensor::zeros({channels}));
    running_mean = Tensor::zeros({channels});
    running_var = Tensor::full({channels}, 1.0);
  }
  Var forward(const Var& x, bool training) {
    return batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                       momentum, eps);
  }
  void collect(const std::string& prefix, ParamCollector& pc) {
    pc.add(prefix + ".gamma", gamma);
    pc.add(prefix + ".beta", beta);
    pc.add_buffer(prefix + ".running_mean", &running_mean);
    pc.add_buffer(prefix + ".running_var", &running_var);
  }
};

// Adam with GAN-typical betas; learning rate is set per step by the caller so
// the decay schedule lives in the trainer, not here.
class Adam {
 public:
  Adam(std::vector<Var> params, double beta1 = 0.5, double beta2 = 0.999,
       double eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_)
      slots_.push_back({Tensor::zeros(p->value.shape()), Tensor::zeros(p->value.shape())});
  }

  void zero_grad() {
    for (auto& p : params_)
      if (!p->grad.empty()) std::fill(p->grad.data(), p->grad.data() + p->grad.numel(), 0.0);
  }

  void step(double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, t_);
    double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (p->grad.empty()) continue;
      auto& m = slots_[i].m;
      auto& v = slots_[i].v;
      for (std::int64_t j = 0; j < p->value.numel(); ++j) {
        double g = p->grad[j];
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
        p->value[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
      }
    }
  }

  const std::vector<Var>& params() const { return params_; }

 private:
  struct Slot {
    Tensor m, v;
  };
  std::vector<Var> params_;
  std::vector<Slot> slots_;
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

}  // namespace morph
