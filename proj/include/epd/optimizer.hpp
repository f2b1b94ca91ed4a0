#pragma once

#include <cmath>
#include <string>

#include "epd/params.hpp"
#include "epd/tensor.hpp"

namespace epd {

// Adaptive-moment first-order optimizer. Moment tensors mirror the parameter
// store shape-for-shape; step count strictly increases.
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8, double grad_clip = 0.0)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), grad_clip_(grad_clip) {}

  long step_count() const { return step_; }
  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }

  const ParamStore& first_moments() const { return m_; }
  const ParamStore& second_moments() const { return v_; }

  void step(ParamStore& params, const ParamStore& grads) {
    if (m_.size() == 0) {
      m_ = params.zeros_like();
      v_ = params.zeros_like();
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
      const auto& [name, g] = grads.item(i);
      if (!g.all_finite())
        throw NumericError("non-finite gradient for parameter '" + name + "'");
    }
    double scale = 1.0;
    if (grad_clip_ > 0.0) {
      double sq = 0.0;
      for (std::size_t i = 0; i < grads.size(); ++i)
        for (double v : grads.item(i).second.data) sq += v * v;
      const double nrm = std::sqrt(sq);
      if (nrm > grad_clip_) scale = grad_clip_ / nrm;
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& [name, p] = params.item(i);
      const Tensor& g = grads.at(name);
      require_same_shape(p, g, "optimizer step");
      Tensor& m = m_.at(name);
      Tensor& v = v_.at(name);
      for (std::size_t j = 0; j < p.numel(); ++j) {
        const double gj = g.data[j] * scale;
        m.data[j] = beta1_ * m.data[j] + (1.0 - beta1_) * gj;
        v.data[j] = beta2_ * v.data[j] + (1.0 - beta2_) * gj * gj;
        const double mhat = m.data[j] / bc1;
        const double vhat = v.data[j] / bc2;
        p.data[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_, grad_clip_;
  long step_ = 0;
  ParamStore m_, v_;
};

}  // namespace epd
