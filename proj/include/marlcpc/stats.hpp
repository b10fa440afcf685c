#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "marlcpc/agents.hpp"
#include "marlcpc/envs.hpp"

namespace marlcpc {

// Interquartile mean: average of the middle 50% of the sorted samples, with
// linear-interpolation partial weights on the boundary samples when n is not
// divisible by 4.
inline double iqm(std::vector<double> samples) {
  ad::check(!samples.empty(), "iqm: empty input");
  std::sort(samples.begin(), samples.end());
  const double n = static_cast<double>(samples.size());
  const double lo = 0.25 * n;
  const double hi = 0.75 * n;
  double wsum = 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double a = std::max(lo, static_cast<double>(i));
    const double b = std::min(hi, static_cast<double>(i + 1));
    const double w = std::max(0.0, b - a);
    acc += w * samples[i];
    wsum += w;
  }
  return acc / wsum;
}

using Statistic = std::function<double(const std::vector<double>&)>;

inline double percentile_sorted(const std::vector<double>& sorted, double p) {
  const double rank = p * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

// Percentile bootstrap confidence interval for a statistic (IQM by default):
// resample with replacement, recompute, take the (1-conf)/2 tails.
inline std::pair<double, double> bootstrap_ci(
    const std::vector<double>& samples, RandomStream& rng,
    const Statistic& statistic = [](const std::vector<double>& s) { return iqm(s); },
    int resamples = 2000, double confidence = 0.95) {
  ad::check(samples.size() >= 2, "bootstrap_ci: need at least 2 samples");
  ad::check(resamples > 0, "bootstrap_ci: resamples must be positive");
  const int n = static_cast<int>(samples.size());
  std::vector<double> stats(resamples);
  std::vector<double> draw(n);
  for (int b = 0; b < resamples; ++b) {
    for (int i = 0; i < n; ++i) draw[i] = samples[rng.uniform_int(n)];
    stats[b] = statistic(draw);
  }
  std::sort(stats.begin(), stats.end());
  const double alpha = (1.0 - confidence) / 2.0;
  return {percentile_sorted(stats, alpha), percentile_sorted(stats, 1.0 - alpha)};
}

// ---------------------------------------------------------------------------
// Message ablations (evaluation-time interventions on frozen agents).
// ---------------------------------------------------------------------------

enum class AblationMode { None, RandomMessage, ZeroMessage };

inline AblationMode parse_ablation(const std::string& s) {
  if (s == "none") return AblationMode::None;
  if (s == "random") return AblationMode::RandomMessage;
  if (s == "zero") return AblationMode::ZeroMessage;
  throw ad::ContractError("unknown ablation mode: " + s);
}

inline std::string ablation_name(AblationMode m) {
  switch (m) {
    case AblationMode::None: return "none";
    case AblationMode::RandomMessage: return "random";
    case AblationMode::ZeroMessage: return "zero";
  }
  return "?";
}

// Replaces every agent's block: RandomMessage draws a uniform one-hot per
// block, ZeroMessage clears the block entirely (index -1 encodes the all-zero
// vector, deliberately not a valid one-hot).
inline JointMessage apply_ablation(AblationMode mode, const JointMessage& joint,
                                   RandomStream& rng) {
  JointMessage out = joint;
  switch (mode) {
    case AblationMode::None: break;
    case AblationMode::RandomMessage:
      for (auto& m : out.per_agent) {
        m.index = rng.uniform_int(out.vocab);
        m.logprob = -std::log(static_cast<double>(out.vocab));
      }
      break;
    case AblationMode::ZeroMessage:
      for (auto& m : out.per_agent) {
        m.index = -1;
        m.logprob = 0.0;
      }
      break;
  }
  return out;
}

inline MessageIntervention make_intervention(AblationMode mode, RandomStream& rng) {
  return [mode, &rng](JointMessage& joint) { joint = apply_ablation(mode, joint, rng); };
}

// ---------------------------------------------------------------------------
// Evaluation records.
// ---------------------------------------------------------------------------

struct RunRecord {
  std::uint64_t seed = 0;
  int iteration = 0;
  long long env_steps = 0;
  long long episodes = 0;
  std::string condition;
  std::string env;
  std::vector<double> agent_returns;  // mean per-agent episodic return
  double welfare = 0.0;               // sum of agent returns
  double episode_length = 0.0;        // mean
};

struct SummaryPoint {
  std::string metric;
  std::string condition;
  std::string env;
  long long steps = 0;
  double iqm_value = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  int n_runs = 0;
  bool has_ci = false;
};

struct EvalResult {
  std::vector<double> agent_returns;
  double welfare = 0.0;
  double episode_length = 0.0;
  std::vector<double> episode_welfares;  // per episode, for trial-level CIs
  std::vector<double> episode_lengths;
};

// Runs n_episodes with sampled (non-greedy) policies on frozen bundles,
// applying `ablation` to every exchanged joint message.
inline EvalResult evaluate(std::vector<AgentBundle>& bundles, Env& env,
                           int n_episodes, AblationMode ablation,
                           RandomStream& rng) {
  ad::check(n_episodes >= 1, "evaluate: need at least one episode");
  const int N = static_cast<int>(bundles.size());
  EvalResult res;
  res.agent_returns.assign(N, 0.0);
  MessageIntervention intervene = make_intervention(ablation, rng);
  const MessageIntervention* hook =
      ablation == AblationMode::None ? nullptr : &intervene;

  for (int e = 0; e < n_episodes; ++e) {
    std::vector<Vec> obs = env.reset(rng);
    std::vector<double> ep_ret(N, 0.0);
    int len = 0;
    while (true) {
      ActResult act = act_all(bundles, obs, rng, hook);
      StepResult sr = env.step(act.actions, rng);
      for (int i = 0; i < N; ++i) ep_ret[i] += sr.rewards[i];
      ++len;
      if (sr.done) break;
      obs = sr.obs;
    }
    double w = 0.0;
    for (int i = 0; i < N; ++i) {
      res.agent_returns[i] += ep_ret[i];
      w += ep_ret[i];
    }
    res.episode_welfares.push_back(w);
    res.episode_lengths.push_back(static_cast<double>(len));
    res.episode_length += len;
  }
  for (double& r : res.agent_returns) r /= n_episodes;
  res.episode_length /= n_episodes;
  // welfare is exactly the sum of the recorded per-agent returns
  for (double r : res.agent_returns) res.welfare += r;
  return res;
}

}  // namespace marlcpc
