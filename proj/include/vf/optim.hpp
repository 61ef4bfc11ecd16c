#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vf/error.hpp"

namespace vf {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;  // number of updates applied so far

  bool operator==(const AdamState&) const = default;
};

// One AdamW update (bias-corrected moments, decoupled weight decay). State
// vectors are zero-initialized on first use. Scalars are computed in double
// and moments are kept in double; parameters are rounded once per update.
template <typename T>
void adamw_step(std::span<T> params, std::span<const T> grads, AdamState& state, double lr,
                const AdamWConfig& cfg = {}) {
  if (grads.size() != params.size())
    throw Error(ErrorKind::Dimension, "adamw: gradient length differs from parameter length");
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw Error(ErrorKind::Dimension, "adamw: optimizer state does not match parameters");
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!std::isfinite(grads[i]))
      throw Error(ErrorKind::Training,
                  "non-finite gradient at optimizer step " + std::to_string(state.step + 1));

  const auto t = static_cast<double>(++state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    const double m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    const double v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    state.m[i] = m;
    state.v[i] = v;
    double p = params[i];
    p -= lr * cfg.weight_decay * p;
    p -= lr * (m / c1) / (std::sqrt(v / c2) + cfg.eps);
    params[i] = static_cast<T>(p);
  }
}

// Linear warmup from 0 at step 0 to `peak` at step `warmup`, then either
// constant or cosine decay to `floor` at step `total`.
inline double warmup_constant_lr(double peak, std::uint64_t step, std::uint64_t warmup) {
  if (warmup == 0 || step >= warmup) return peak;
  return peak * static_cast<double>(step) / static_cast<double>(warmup);
}

inline double warmup_cosine_lr(double peak, std::uint64_t step, std::uint64_t warmup,
                               std::uint64_t total, double floor = 0.0) {
  if (warmup > 0 && step < warmup)
    return peak * static_cast<double>(step) / static_cast<double>(warmup);
  if (total <= warmup) return peak;
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(total - warmup));
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

}  // namespace vf
