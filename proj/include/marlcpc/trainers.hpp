#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "marlcpc/agents.hpp"
#include "marlcpc/envs.hpp"
#include "marlcpc/gae.hpp"
#include "marlcpc/stats.hpp"

namespace marlcpc {

struct TrainerConfig {
  double learning_rate = 3e-4;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip_epsilon = 0.2;
  double value_coef = 0.5;    // c1
  double entropy_coef = 0.01; // c2
  int minibatches = 4;
  int epochs = 4;              // PPO passes per iteration
  int batch_episodes = 256;    // bandit episodes per iteration
  int rollout_steps = 1024;    // observer steps per iteration
  int workers = 8;
  bool advantage_norm = true;
  long long budget_episodes = 30000;   // bandit
  long long budget_steps = 3000000;    // observer
  int eval_interval = 10;              // iterations between evaluations
  int eval_episodes = 100;
  int checkpoint_interval = 0;         // 0 = final checkpoint only
};

// Per-step record for one agent, written at sampling time with the snapshot
// parameters.
struct Transition {
  Vec obs;
  Vec rl_input;
  Vec msg_input;                // MessageAction first pass
  std::vector<int> joint_msgs;  // one symbol per agent; empty if no messaging
  int action = 0;
  int own_msg = -1;
  double logpi_old = 0.0;
  double value_old = 0.0;
  double reward = 0.0;
  std::uint8_t done = 0;
};

struct AgentRollout {
  std::vector<Transition> steps;
  std::vector<double> advantages;
  std::vector<double> value_targets;
};

struct UpdateMetrics {
  double loss = 0.0;
  double j_rl = 0.0;
  double j_pi = 0.0;
  double j_v = 0.0;
  double entropy = 0.0;
  double j_cpc = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  double ratio_max_dev_first = 0.0;  // |ratio-1| max on the first minibatch
  int updates = 0;
};

namespace detail {

// Minibatch view: indices into an AgentRollout.
struct MinibatchData {
  Mat obs;
  Mat rl_inputs;
  Mat msg_inputs;
  std::vector<std::vector<int>> joint_msgs;  // [agent][col]
  std::vector<int> actions;
  std::vector<int> own_msgs;
  Mat logpi_old;   // 1 x B
  Mat values_old;  // 1 x B
  Mat rewards;     // 1 x B
  Mat advantages;  // 1 x B
  Mat vtargets;    // 1 x B
};

inline MinibatchData gather_minibatch(const AgentRollout& roll,
                                      const std::vector<int>& idx, int n_agents,
                                      bool with_gae) {
  const int B = static_cast<int>(idx.size());
  const Transition& t0 = roll.steps[idx[0]];
  MinibatchData mb;
  mb.obs.resize(t0.obs.size(), B);
  mb.rl_inputs.resize(t0.rl_input.size(), B);
  if (t0.msg_input.size() > 0) mb.msg_inputs.resize(t0.msg_input.size(), B);
  const bool has_msgs = !t0.joint_msgs.empty();
  if (has_msgs) mb.joint_msgs.assign(n_agents, std::vector<int>(B));
  mb.actions.resize(B);
  mb.own_msgs.resize(B);
  mb.logpi_old.resize(1, B);
  mb.values_old.resize(1, B);
  mb.rewards.resize(1, B);
  if (with_gae) {
    mb.advantages.resize(1, B);
    mb.vtargets.resize(1, B);
  }
  for (int j = 0; j < B; ++j) {
    const Transition& tr = roll.steps[idx[j]];
    mb.obs.col(j) = tr.obs;
    mb.rl_inputs.col(j) = tr.rl_input;
    if (tr.msg_input.size() > 0) mb.msg_inputs.col(j) = tr.msg_input;
    if (has_msgs)
      for (int i = 0; i < n_agents; ++i) mb.joint_msgs[i][j] = tr.joint_msgs[i];
    mb.actions[j] = tr.action;
    mb.own_msgs[j] = tr.own_msg;
    mb.logpi_old(0, j) = tr.logpi_old;
    mb.values_old(0, j) = tr.value_old;
    mb.rewards(0, j) = tr.reward;
    if (with_gae) {
      mb.advantages(0, j) = roll.advantages[idx[j]];
      mb.vtargets(0, j) = roll.value_targets[idx[j]];
    }
  }
  return mb;
}

struct RlGraph {
  Var logpi;       // 1 x B, action (+ message) log-probability
  Var value;       // 1 x B
  Var entropy;     // 1 x B
  Var jcpc;        // 1 x B, zero-filled when the agent has no CPC head
  bool has_cpc = false;
  CpcGraph cpc;
};

// Shared forward wiring for both trainers. The policy/value input is
// recomputed through the encoder (behind stop-gradient) under the CPC
// condition and taken as recorded data otherwise.
inline RlGraph build_rl_graph(Tape& t, AgentBundle& b, const MinibatchData& mb) {
  RlGraph g;
  Var pol_in;
  if (b.condition == Condition::Cpc) {
    g.has_cpc = true;
    g.cpc = build_cpc_graph(t, *b.cpc, mb.obs, mb.joint_msgs, b.index);
    g.jcpc = g.cpc.jcpc;
    const int B = static_cast<int>(mb.obs.cols());
    const int K = b.vocab;
    Mat M = Mat::Zero(static_cast<Eigen::Index>(b.n_agents) * K, B);
    for (int i = 0; i < b.n_agents; ++i)
      for (int j = 0; j < B; ++j) {
        const int idx = mb.joint_msgs[i][j];
        if (idx >= 0) M(static_cast<Eigen::Index>(i) * K + idx, j) = 1.0;
      }
    pol_in = t.concat_rows({t.stop_gradient(g.cpc.z), t.constant(M)});
  } else {
    pol_in = t.constant(mb.rl_inputs);
    g.jcpc = t.constant(Mat::Zero(1, mb.rl_inputs.cols()));
  }

  auto pol = b.policy.forward_detail(t, pol_in);
  Var lsm = t.log_softmax(pol.out);
  g.logpi = t.gather(lsm, mb.actions);
  Var p = t.softmax(pol.out);
  Var ent = t.scale(t.sum_rows(t.mul(p, lsm)), -1.0);

  if (b.condition == Condition::MessageAction) {
    Var msg_in = t.constant(mb.msg_inputs);
    auto trunk = b.policy.forward_detail(t, msg_in);
    Var mlogits = b.message_head->forward(t, trunk.last_hidden);
    Var mlsm = t.log_softmax(mlogits);
    g.logpi = t.add(g.logpi, t.gather(mlsm, mb.own_msgs));
    Var mp = t.softmax(mlogits);
    ent = t.add(ent, t.scale(t.sum_rows(t.mul(mp, mlsm)), -1.0));
  }
  g.entropy = ent;
  g.value = b.value.forward(t, pol_in);
  return g;
}

inline std::vector<std::vector<int>> split_minibatches(int n, int k,
                                                       RandomStream& rng) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = n - 1; i > 0; --i) std::swap(idx[i], idx[rng.uniform_int(i + 1)]);
  std::vector<std::vector<int>> out;
  const int base = n / k;
  int extra = n % k;
  int at = 0;
  for (int m = 0; m < k; ++m) {
    int len = base + (m < extra ? 1 : 0);
    if (len == 0) continue;
    out.emplace_back(idx.begin() + at, idx.begin() + at + len);
    at += len;
  }
  return out;
}

}  // namespace detail

// One Bandit-CPC update over a batch of completed episodes: per agent,
// ascend  E[ r * log pi(a | input) + J_CPC ]  by minibatch Adam steps.
// No value function, no entropy bonus, single pass over the data.
inline std::vector<UpdateMetrics> bandit_update(
    std::vector<AgentBundle>& bundles, const std::vector<AgentRollout>& batch,
    const TrainerConfig& cfg, RandomStream& rng) {
  ad::check(!batch.empty() && !batch[0].steps.empty(),
            "bandit_update: empty batch");
  const int N = static_cast<int>(bundles.size());
  std::vector<UpdateMetrics> metrics(N);

  for (int i = 0; i < N; ++i) {
    AgentBundle& b = bundles[i];
    const int n = static_cast<int>(batch[i].steps.size());
    auto minibatches =
        detail::split_minibatches(n, std::min(cfg.minibatches, n), rng);
    Tape t;
    for (const auto& mbidx : minibatches) {
      t.clear();
      auto mb = detail::gather_minibatch(batch[i], mbidx, N, false);
      auto g = detail::build_rl_graph(t, b, mb);
      Var jrl = t.mul_const(g.logpi, mb.rewards);
      Var obj = t.add(jrl, g.jcpc);
      Var loss = t.scale(t.mean_all(obj), -1.0);
      ad::check(t.value(loss).allFinite(), "bandit_update: non-finite loss");
      t.backward(loss);
      b.opt.step();

      auto& m = metrics[i];
      m.loss += t.value(loss)(0, 0);
      m.j_rl += t.value(jrl).mean();
      if (g.has_cpc) {
        m.j_cpc += t.value(g.jcpc).mean();
        m.recon += t.value(g.cpc.recon).mean();
        m.kl += t.value(g.cpc.kl).mean();
      }
      ++m.updates;
    }
    auto& m = metrics[i];
    if (m.updates > 0) {
      m.loss /= m.updates;
      m.j_rl /= m.updates;
      m.j_cpc /= m.updates;
      m.recon /= m.updates;
      m.kl /= m.updates;
    }
  }
  return metrics;
}

// One IPPO-CPC update: per agent, `epochs` passes of `minibatches` clipped-PPO
// steps with the combined objective
//   J_pi - c1 * J_V + c2 * H + J_CPC.
inline std::vector<UpdateMetrics> ppo_update(std::vector<AgentBundle>& bundles,
                                             const std::vector<AgentRollout>& batch,
                                             const TrainerConfig& cfg,
                                             RandomStream& rng) {
  ad::check(!batch.empty() && !batch[0].steps.empty(), "ppo_update: empty batch");
  const int N = static_cast<int>(bundles.size());
  std::vector<UpdateMetrics> metrics(N);

  for (int i = 0; i < N; ++i) {
    AgentBundle& b = bundles[i];
    const int n = static_cast<int>(batch[i].steps.size());
    ad::check(batch[i].advantages.size() == static_cast<std::size_t>(n),
              "ppo_update: advantages not computed");
    Tape t;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      auto minibatches =
          detail::split_minibatches(n, std::min(cfg.minibatches, n), rng);
      for (std::size_t mbi = 0; mbi < minibatches.size(); ++mbi) {
        t.clear();
        auto mb = detail::gather_minibatch(batch[i], minibatches[mbi], N, true);

        Mat adv = mb.advantages;
        if (cfg.advantage_norm && adv.cols() > 1) {
          const double mean = adv.mean();
          const double var = (adv.array() - mean).square().mean();
          adv = (adv.array() - mean) / (std::sqrt(var) + 1e-8);
        }

        auto g = detail::build_rl_graph(t, b, mb);
        Var ratio = t.exp(t.sub_const(g.logpi, mb.logpi_old));
        Var surr1 = t.mul_const(ratio, adv);
        Var surr2 = t.mul_const(
            t.clip(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon), adv);
        Var jpi = t.minimum(surr1, surr2);
        Var jv = t.square(t.sub_const(g.value, mb.vtargets));
        Var jrl = t.add(t.sub(jpi, t.scale(jv, cfg.value_coef)),
                        t.scale(g.entropy, cfg.entropy_coef));
        Var obj = t.add(jrl, g.jcpc);
        Var loss = t.scale(t.mean_all(obj), -1.0);
        if (!t.value(loss).allFinite())
          throw ad::ContractError(
              "ppo_update: non-finite loss (agent " + std::to_string(i) +
              ", epoch " + std::to_string(epoch) + ")");
        t.backward(loss);
        b.opt.step();

        auto& m = metrics[i];
        if (epoch == 0 && mbi == 0)
          m.ratio_max_dev_first =
              (t.value(ratio).array() - 1.0).abs().maxCoeff();
        m.loss += t.value(loss)(0, 0);
        m.j_pi += t.value(jpi).mean();
        m.j_v += t.value(jv).mean();
        m.entropy += t.value(g.entropy).mean();
        m.j_rl += t.value(jrl).mean();
        if (g.has_cpc) {
          m.j_cpc += t.value(g.jcpc).mean();
          m.recon += t.value(g.cpc.recon).mean();
          m.kl += t.value(g.cpc.kl).mean();
        }
        ++m.updates;
      }
    }
    auto& m = metrics[i];
    if (m.updates > 0) {
      m.loss /= m.updates;
      m.j_pi /= m.updates;
      m.j_v /= m.updates;
      m.entropy /= m.updates;
      m.j_rl /= m.updates;
      m.j_cpc /= m.updates;
      m.recon /= m.updates;
      m.kl /= m.updates;
    }
  }
  return metrics;
}

// ---------------------------------------------------------------------------
// Collection.
// ---------------------------------------------------------------------------

inline Transition make_transition(const ActResult& act, int agent,
                                  const std::vector<Vec>& obs, double reward,
                                  bool done) {
  Transition tr;
  tr.obs = obs[agent];
  tr.rl_input = act.rl_inputs[agent];
  if (!act.msg_inputs.empty()) tr.msg_input = act.msg_inputs[agent];
  if (act.joint) {
    tr.joint_msgs.resize(act.joint->n_agents());
    for (int k = 0; k < act.joint->n_agents(); ++k)
      tr.joint_msgs[k] = act.joint->per_agent[k].index;
  }
  tr.action = act.actions[agent];
  tr.own_msg = act.own_msg[agent];
  tr.logpi_old = act.logpi[agent];
  tr.value_old = act.values[agent];
  tr.reward = reward;
  tr.done = done ? 1 : 0;
  return tr;
}

// Collects complete bandit episodes (one decision step each).
inline std::vector<AgentRollout> collect_bandit_episodes(
    std::vector<AgentBundle>& bundles, Env& env, int n_episodes,
    RandomStream& rng) {
  const int N = static_cast<int>(bundles.size());
  std::vector<AgentRollout> out(N);
  for (int e = 0; e < n_episodes; ++e) {
    std::vector<Vec> obs = env.reset(rng);
    ActResult act = act_all(bundles, obs, rng);
    StepResult sr = env.step(act.actions, rng);
    for (int i = 0; i < N; ++i)
      out[i].steps.push_back(make_transition(act, i, obs, sr.rewards[i], true));
  }
  return out;
}

// One persistent rollout worker: owns an environment instance and an RNG
// stream; episodes continue across iteration boundaries.
struct RolloutWorker {
  std::unique_ptr<Env> env;
  RandomStream rng;
  std::vector<Vec> obs;
  bool need_reset = true;

  RolloutWorker(std::unique_ptr<Env> e, std::uint64_t seed)
      : env(std::move(e)), rng(seed) {}
};

// Gathers steps_per_worker transitions from each worker in index order and
// computes GAE per worker segment, bootstrapping truncated segments with the
// value at the truncation point.
inline std::vector<AgentRollout> collect_rollout(
    std::vector<AgentBundle>& bundles, std::vector<RolloutWorker>& workers,
    int steps_per_worker, const TrainerConfig& cfg) {
  const int N = static_cast<int>(bundles.size());
  std::vector<AgentRollout> out(N);

  for (auto& w : workers) {
    if (w.need_reset) {
      w.obs = w.env->reset(w.rng);
      w.need_reset = false;
    }
    std::vector<std::vector<double>> rewards(N), values(N);
    std::vector<std::vector<std::uint8_t>> dones(N);

    for (int s = 0; s < steps_per_worker; ++s) {
      ActResult act = act_all(bundles, w.obs, w.rng);
      StepResult sr = w.env->step(act.actions, w.rng);
      for (int i = 0; i < N; ++i) {
        out[i].steps.push_back(
            make_transition(act, i, w.obs, sr.rewards[i], sr.done));
        rewards[i].push_back(sr.rewards[i]);
        values[i].push_back(act.values[i]);
        dones[i].push_back(sr.done ? 1 : 0);
      }
      if (sr.done) {
        w.obs = w.env->reset(w.rng);
      } else {
        w.obs = sr.obs;
      }
    }

    std::vector<double> boot = values_at(bundles, w.obs, w.rng);
    for (int i = 0; i < N; ++i) {
      values[i].push_back(boot[i]);
      GaeResult gae =
          compute_gae(rewards[i], values[i], dones[i], cfg.gamma, cfg.gae_lambda);
      out[i].advantages.insert(out[i].advantages.end(), gae.advantages.begin(),
                               gae.advantages.end());
      out[i].value_targets.insert(out[i].value_targets.end(),
                                  gae.value_targets.begin(),
                                  gae.value_targets.end());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop (Bandit-CPC for single-step environments, IPPO-CPC otherwise).
// ---------------------------------------------------------------------------

struct RunSetup {
  std::string env_name = "bandit";
  Condition condition = Condition::Cpc;
  std::uint64_t seed = 1;
  TrainerConfig trainer;
  AgentHyper hyper;
};

struct RunHooks {
  std::function<void(const RunRecord&)> on_record;
  // (iteration, bundles, is_final)
  std::function<void(int, std::vector<AgentBundle>&, bool)> on_checkpoint;
};

struct RunResult {
  std::vector<RunRecord> records;
  std::vector<AgentBundle> bundles;
  int iterations = 0;
  long long env_steps = 0;
  long long episodes = 0;
};

inline std::vector<AgentBundle> build_team(const RunSetup& setup,
                                           const EnvSpec& spec) {
  AgentHyper hyper = setup.hyper;
  hyper.adam.lr = setup.trainer.learning_rate;
  std::vector<AgentBundle> bundles;
  bundles.reserve(spec.n_agents);
  for (int i = 0; i < spec.n_agents; ++i)
    bundles.push_back(build_bundle(setup.condition, spec, i, hyper, setup.seed));
  return bundles;
}

// Collect -> per-agent minibatch updates -> periodic evaluation, until the
// episode/step budget is reached. Deterministic given (seed, worker count).
// `warm_start` resumes from checkpointed bundles instead of fresh ones.
inline RunResult run_training(const RunSetup& setup, const RunHooks& hooks = {},
                              std::vector<AgentBundle>* warm_start = nullptr) {
  std::unique_ptr<Env> env = make_env(setup.env_name);
  const EnvSpec& spec = env->spec();
  const TrainerConfig& cfg = setup.trainer;

  RunResult result;
  result.bundles = warm_start ? std::move(*warm_start) : build_team(setup, spec);
  auto& bundles = result.bundles;

  RandomStream update_rng(RandomStream::derive(setup.seed, 0x01));
  RandomStream collect_rng(RandomStream::derive(setup.seed, 0x02));

  const bool is_bandit = spec.max_episode_steps == 1;
  long long iterations_total = 0;
  if (is_bandit) {
    iterations_total = (cfg.budget_episodes + cfg.batch_episodes - 1) /
                       std::max(1, cfg.batch_episodes);
  } else {
    ad::check(cfg.rollout_steps % cfg.workers == 0,
              "run_training: rollout_steps must divide evenly across workers");
    iterations_total = cfg.budget_steps / cfg.rollout_steps;
  }

  std::vector<RolloutWorker> workers;
  if (!is_bandit) {
    for (int w = 0; w < cfg.workers; ++w)
      workers.emplace_back(env->clone_fresh(),
                           RandomStream::derive(setup.seed, 0x100 + w));
  }

  auto run_eval = [&](int iteration) {
    RandomStream eval_rng(RandomStream::derive(setup.seed, 0x8000 + iteration));
    std::unique_ptr<Env> eval_env = env->clone_fresh();
    EvalResult ev = evaluate(bundles, *eval_env, cfg.eval_episodes,
                             AblationMode::None, eval_rng);
    RunRecord rec;
    rec.seed = setup.seed;
    rec.iteration = iteration;
    rec.env_steps = result.env_steps;
    rec.episodes = result.episodes;
    rec.condition = condition_name(setup.condition);
    rec.env = setup.env_name;
    rec.agent_returns = ev.agent_returns;
    rec.welfare = ev.welfare;
    rec.episode_length = ev.episode_length;
    result.records.push_back(rec);
    if (hooks.on_record) hooks.on_record(rec);
  };

  run_eval(0);

  for (int iter = 1; iter <= iterations_total; ++iter) {
    if (is_bandit) {
      const long long remaining = cfg.budget_episodes - result.episodes;
      const int n = static_cast<int>(
          std::min<long long>(cfg.batch_episodes, remaining));
      if (n <= 0) break;
      auto batch = collect_bandit_episodes(bundles, *env, n, collect_rng);
      bandit_update(bundles, batch, cfg, update_rng);
      result.episodes += n;
      result.env_steps += n;
    } else {
      auto batch = collect_rollout(bundles, workers,
                                   cfg.rollout_steps / cfg.workers, cfg);
      for (const auto& tr : batch[0].steps)
        if (tr.done) ++result.episodes;
      ppo_update(bundles, batch, cfg, update_rng);
      result.env_steps += cfg.rollout_steps;
    }
    result.iterations = iter;

    const bool last = iter == iterations_total;
    if (cfg.eval_interval > 0 && (iter % cfg.eval_interval == 0 || last))
      run_eval(iter);
    if (hooks.on_checkpoint && cfg.checkpoint_interval > 0 &&
        iter % cfg.checkpoint_interval == 0 && !last)
      hooks.on_checkpoint(iter, bundles, false);
  }

  if (hooks.on_checkpoint)
    hooks.on_checkpoint(result.iterations, bundles, true);
  return result;
}

}  // namespace marlcpc
