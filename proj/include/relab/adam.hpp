#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "relab/autodiff.hpp"

namespace relab {

template <typename T>
using ParamMap = std::map<std::string, Tensor<T>>;

// Adam with bias-corrected moments. Learning rates are per parameter so that
// reinitialised layers can be given a multiplier.
template <typename T>
struct AdamState {
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double default_learning_rate = 1e-3;
  std::map<std::string, double> learning_rate;  // overrides by parameter name
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;

  double rate_for(const std::string& name) const {
    auto it = learning_rate.find(name);
    return it == learning_rate.end() ? default_learning_rate : it->second;
  }
};

// Updates every parameter that has a gradient. Throws NumericError (naming the
// parameter) when a gradient contains NaN or infinity; params are untouched then.
template <typename T>
void adam_step(ParamMap<T>& params, const GradientMap<T>& grads, AdamState<T>& state) {
  for (const auto& [name, g] : grads) {
    auto p = params.find(name);
    if (p == params.end()) throw InvalidArgument("adam_step: gradient for unknown parameter " + name);
    if (p->second.shape() != g.shape()) {
      throw ShapeError("adam_step: gradient shape " + shape_to_string(g.shape()) + " for parameter " + name +
                       " of shape " + shape_to_string(p->second.shape()));
    }
    if (!g.all_finite()) throw NumericError("adam_step: non-finite gradient for parameter " + name);
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  const T inv_c1 = static_cast<T>(1.0 / c1), inv_c2 = static_cast<T>(1.0 / c2);
  const T eps = static_cast<T>(state.eps);
  for (const auto& [name, g] : grads) {
    auto& param = params.at(name);
    auto m = state.m.try_emplace(name, g.shape()).first->second.data();
    auto v = state.v.try_emplace(name, g.shape()).first->second.data();
    auto w = param.data();
    auto gd = g.data();
    const T lr = static_cast<T>(state.rate_for(name));
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * gd[i];
      v[i] = b2 * v[i] + (T(1) - b2) * gd[i] * gd[i];
      const T mhat = m[i] * inv_c1;
      const T vhat = v[i] * inv_c2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

}  // namespace relab
