#pragma once
// Adam with decoupled weight decay.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "bevx/nn.hpp"

namespace bevx {

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class AdamW {
 public:
  AdamW(ParamList params, AdamWOptions opt) : params_(std::move(params)), opt_(opt) {
    if (!(opt_.lr > 0.0)) throw std::invalid_argument("adamw: lr must be positive");
    if (!(opt_.beta1 >= 0.0 && opt_.beta1 < 1.0) || !(opt_.beta2 >= 0.0 && opt_.beta2 < 1.0)) {
      throw std::invalid_argument("adamw: betas must be in [0,1)");
    }
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor->size(), 0.0);
      v_.emplace_back(p.tensor->size(), 0.0);
    }
  }

  /// Applies one update from the accumulated gradients, then clears them.
  /// Parameters without a gradient are left untouched.
  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor& p = *params_[k].tensor;
      if (!p.has_grad()) continue;
      const auto g = p.grad();
      auto w = p.mutable_data();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g[i];
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g[i] * g[i];
        w[i] -= opt_.lr * ((m[i] / c1) / (std::sqrt(v[i] / c2) + opt_.eps) + opt_.weight_decay * w[i]);
      }
      p.zero_grad();
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor->zero_grad();
  }

  std::size_t steps() const { return t_; }

 private:
  ParamList params_;
  AdamWOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace bevx
