#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "volsynth/error.hpp"
#include "volsynth/tensor.hpp"

namespace volsynth {

struct AdamParams {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

/// First and second moment estimates, one buffer per parameter tensor.
template <class T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t step = 0;

  static AdamState for_params(const std::vector<BasicTensor<T>>& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.numel(), T(0));
      s.v.emplace_back(p.numel(), T(0));
    }
    return s;
  }
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// One bias-corrected Adam update, applied in place to the parameter leaves.
template <class T>
void adam_step(std::vector<BasicTensor<T>>& params, const std::vector<BasicTensor<T>>& grads, AdamState<T>& state,
               const AdamParams& hp) {
  if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size())
    throw UsageError("adam_step: parameter, gradient and state counts differ");
  ++state.step;
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].mutable_data();
    const auto& g = grads[i].data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (w.size() != g.size() || w.size() != m.size() || w.size() != v.size())
      throw DimensionError("adam_step: state dimensions do not match parameter " + std::to_string(i));
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      m[j] = static_cast<T>(hp.beta1 * static_cast<double>(m[j]) + (1.0 - hp.beta1) * gj);
      v[j] = static_cast<T>(hp.beta2 * static_cast<double>(v[j]) + (1.0 - hp.beta2) * gj * gj);
      const double mhat = static_cast<double>(m[j]) / c1;
      const double vhat = static_cast<double>(v[j]) / c2;
      w[j] = static_cast<T>(static_cast<double>(w[j]) - hp.lr * mhat / (std::sqrt(vhat) + hp.eps));
    }
    check_finite(w, "adam_step");
  }
}

}  // namespace volsynth
