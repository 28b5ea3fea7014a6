#pragma once

// Rectified Adam: Adam whose adaptive step is switched on only once the
// variance of the adaptive learning rate is tractable (rho_t > 5).

#include <cmath>
#include <vector>

#include "mscl/autograd.hpp"
#include "mscl/error.hpp"

namespace mscl {

struct RAdamConfig {
  double lr = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
class RAdam {
 public:
  RAdam(std::vector<ag::Var<T>> params, RAdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    if (!(cfg.lr > 0)) throw ConfigError("RAdam: learning rate must be positive");
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  /// One update from the gradients currently stored on the parameters (missing gradient = zero).
  void step() {
    ++t_;
    const double b1t = std::pow(cfg_.beta1, double(t_)), b2t = std::pow(cfg_.beta2, double(t_));
    const double rho_inf = 2.0 / (1.0 - cfg_.beta2) - 1.0;
    const double rho_t = rho_inf - 2.0 * double(t_) * b2t / (1.0 - b2t);
    const bool rectified = rho_t > 5.0;
    double r = 0.0;
    if (rectified)
      r = std::sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      auto g = p.has_grad() ? p.grad() : std::span<const T>{};
      auto val = p.value_mut();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < val.size(); ++i) {
        const double gi = g.empty() ? 0.0 : double(g[i]);
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double m_hat = m[i] / (1.0 - b1t);
        double update;
        if (rectified)
          update = m_hat * r * std::sqrt(1.0 - b2t) / (std::sqrt(v[i]) + cfg_.eps);
        else
          update = m_hat;
        if (update != 0.0) val[i] = static_cast<T>(double(val[i]) - cfg_.lr * update);
      }
    }
  }

  long steps() const { return t_; }

 private:
  std::vector<ag::Var<T>> params_;
  RAdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace mscl
