#pragma once

#include <cstdint>
#include <vector>

#include "marlcpc/autodiff.hpp"

namespace marlcpc {

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> value_targets;
};

// Generalized advantage estimation over one contiguous segment.
//
//   delta_t = r_t + gamma * V_{t+1} * (1 - done_t) - V_t
//   A_t     = delta_t + gamma * lambda * (1 - done_t) * A_{t+1}
//   V^targ  = A_t + V_t
//
// `values` carries T+1 entries, the last being the bootstrap value at the
// truncation point of the segment. Episode boundaries (done_t = 1) zero both
// the bootstrap and the advantage chain. At lambda = 1 the targets reduce to
// the discounted empirical return bootstrapped with V at the segment end.
inline GaeResult compute_gae(const std::vector<double>& rewards,
                             const std::vector<double>& values,
                             const std::vector<std::uint8_t>& dones,
                             double gamma, double lambda) {
  const std::size_t T = rewards.size();
  ad::check(values.size() == T + 1, "compute_gae: values must have T+1 entries");
  ad::check(dones.size() == T, "compute_gae: dones must have T entries");

  GaeResult out;
  out.advantages.resize(T);
  out.value_targets.resize(T);
  double running = 0.0;
  for (std::size_t i = T; i-- > 0;) {
    const double cont = dones[i] ? 0.0 : 1.0;
    const double delta = rewards[i] + gamma * values[i + 1] * cont - values[i];
    running = delta + gamma * lambda * cont * running;
    out.advantages[i] = running;
    out.value_targets[i] = running + values[i];
  }
  return out;
}

}  // namespace marlcpc
