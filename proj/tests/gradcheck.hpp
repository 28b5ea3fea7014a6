#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "mscl/autograd.hpp"

namespace testutil {

using mscl::ag::Var;

inline Var<double> random_leaf(mscl::ag::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(mscl::ag::numel(shape));
  for (auto& x : v) x = u(rng);
  return Var<double>::leaf(std::move(shape), std::move(v), true);
}

/// Largest relative error between the tape gradient and central differences
/// of `f` with respect to every entry of every input.
inline double max_grad_error(const std::function<Var<double>()>& f, std::vector<Var<double>> inputs,
                             double h = 1e-6) {
  for (auto& in : inputs) in.zero_grad();
  Var<double> out = f();
  mscl::ag::backward(out);
  double worst = 0.0;
  for (auto& in : inputs) {
    std::vector<double> analytic(in.grad().begin(), in.grad().end());
    if (analytic.empty()) analytic.assign(in.size(), 0.0);
    for (std::size_t i = 0; i < in.size(); ++i) {
      const double x0 = in.value()[i];
      in.value_mut()[i] = x0 + h;
      const double fp = f().item();
      in.value_mut()[i] = x0 - h;
      const double fm = f().item();
      in.value_mut()[i] = x0;
      const double numeric = (fp - fm) / (2 * h);
      const double err = std::abs(numeric - analytic[i]) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace testutil
