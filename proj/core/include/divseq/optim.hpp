#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "divseq/error.hpp"
#include "divseq/tensor.hpp"

namespace divseq {

// Adam moments for one named parameter set, in declaration order.
template <typename Real>
struct AdamState {
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-8;
  std::vector<std::vector<Real>> m;
  std::vector<std::vector<Real>> v;

  template <typename Params>
  void init(const Params& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(static_cast<std::size_t>(p.tensor->size()), Real(0));
      v.emplace_back(static_cast<std::size_t>(p.tensor->size()), Real(0));
    }
  }
};

template <typename Real>
struct NamedParam {
  std::string name;
  TensorPtr<Real> tensor;
};

// One bias-corrected Adam update over all parameters. `skip` entries are left
// untouched entirely (used to freeze the target encoder).
template <typename Real>
void adam_step(std::vector<NamedParam<Real>>& params, AdamState<Real>& state, double lr,
               const std::vector<bool>* skip = nullptr) {
  if (state.m.size() != params.size()) throw ContractError("adam_step: state not initialized for parameter set");
  state.step += 1;
  const double b1 = state.beta1, b2 = state.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    if (skip && (*skip)[pi]) continue;
    auto& t = *params[pi].tensor;
    t.ensure_grad();
    if (!t.grad_all_finite()) {
      throw Error("adam_step: non-finite gradient in parameter '" + params[pi].name + "'");
    }
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    const Real* g = t.grad();
    Real* w = t.data();
    const std::int64_t n = t.size();
    for (std::int64_t i = 0; i < n; ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = b1 * static_cast<double>(m[static_cast<std::size_t>(i)]) + (1.0 - b1) * gi;
      const double vi = b2 * static_cast<double>(v[static_cast<std::size_t>(i)]) + (1.0 - b2) * gi * gi;
      m[static_cast<std::size_t>(i)] = static_cast<Real>(mi);
      v[static_cast<std::size_t>(i)] = static_cast<Real>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      w[i] = static_cast<Real>(static_cast<double>(w[i]) - lr * mhat / (std::sqrt(vhat) + state.epsilon));
    }
  }
}

// Warmup then inverse-sqrt decay, anchored so the peak value is lr_peak at
// step == warmup: lr = lr_peak * min(step / warmup, sqrt(warmup / step)).
inline double lr_schedule(std::int64_t step, std::int64_t warmup, double lr_peak) {
  if (step < 1) throw ContractError("lr_schedule: step must be >= 1");
  if (warmup < 1) throw ContractError("lr_schedule: warmup must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return lr_peak * std::min(s / w, std::sqrt(w / s));
}

}  // namespace divseq
