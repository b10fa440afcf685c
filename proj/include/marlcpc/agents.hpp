#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "marlcpc/cpc.hpp"
#include "marlcpc/envs.hpp"
#include "marlcpc/nn.hpp"
#include "marlcpc/optim.hpp"

namespace marlcpc {

enum class Condition { NoComm, MessageAction, Cpc, Shared };

inline Condition parse_condition(const std::string& s) {
  if (s == "no-comm") return Condition::NoComm;
  if (s == "message") return Condition::MessageAction;
  if (s == "cpc") return Condition::Cpc;
  if (s == "shared") return Condition::Shared;
  throw ad::ContractError("unknown condition: " + s);
}

inline std::string condition_name(Condition c) {
  switch (c) {
    case Condition::NoComm: return "no-comm";
    case Condition::MessageAction: return "message";
    case Condition::Cpc: return "cpc";
    case Condition::Shared: return "shared";
  }
  return "?";
}

inline bool condition_communicates(Condition c) {
  return c == Condition::MessageAction || c == Condition::Cpc;
}

struct AgentHyper {
  int policy_hidden = 64;
  int cpc_hidden = 64;
  int vocab = 5;
  double beta = 1.0;
  StEstimator st_estimator = StEstimator::VectorLogProb;
  Adam::Hyper adam;
};

// One agent's networks and optimizer state. Each agent owns distinct
// parameters; nothing is shared across bundles.
struct AgentBundle {
  int index = 0;
  Condition condition = Condition::NoComm;
  int n_agents = 0;
  int n_actions = 0;
  int vocab = 0;
  int rl_input_dim = 0;
  std::vector<int> env_obs_dims;

  Mlp policy;                        // rl_input -> 64 -> 64 -> n_actions
  std::optional<Mlp> message_head;   // trunk hidden -> K (MessageAction)
  Mlp value;                         // rl_input -> 64 -> 64 -> 1
  std::optional<CpcHead> cpc;
  Adam opt;

  // Fixed ordering used by the optimizer and the checkpoint format. Param
  // storage lives on the layer vectors' heap buffers, so the registered
  // pointers stay valid when a bundle is moved.
  std::vector<Param*> params() {
    std::vector<Param*> out;
    policy.collect_params(out);
    if (message_head) message_head->collect_params(out);
    value.collect_params(out);
    if (cpc) cpc->collect_params(out);
    return out;
  }
};

// Policy/value input width for a condition. Incoming messages exclude the
// agent's own block under MessageAction; the CPC condition sees the full
// joint message next to its stop-gradient hidden state.
inline int rl_input_dim(Condition c, const EnvSpec& env, int agent,
                        const AgentHyper& h) {
  switch (c) {
    case Condition::NoComm: return env.obs_dims[agent];
    case Condition::MessageAction:
      return env.obs_dims[agent] + (env.n_agents - 1) * h.vocab;
    case Condition::Cpc: return h.cpc_hidden + env.n_agents * h.vocab;
    case Condition::Shared: {
      int total = 0;
      for (int d : env.obs_dims) total += d;
      return total;
    }
  }
  throw ad::ContractError("rl_input_dim: bad condition");
}

inline AgentBundle build_bundle(Condition condition, const EnvSpec& env,
                                int agent, const AgentHyper& hyper,
                                std::uint64_t seed) {
  AgentBundle b;
  b.index = agent;
  b.condition = condition;
  b.n_agents = env.n_agents;
  b.n_actions = env.act_dims[agent];
  b.vocab = hyper.vocab;
  b.env_obs_dims = env.obs_dims;
  b.rl_input_dim = rl_input_dim(condition, env, agent, hyper);

  RandomStream rng(RandomStream::derive(seed, 0x10 + agent));
  const int H = hyper.policy_hidden;
  b.policy = Mlp({b.rl_input_dim, H, H, b.n_actions}, Act::Tanh, rng);
  if (condition == Condition::MessageAction)
    b.message_head = Mlp({H, hyper.vocab}, Act::Tanh, rng);
  b.value = Mlp({b.rl_input_dim, H, H, 1}, Act::Tanh, rng);
  if (condition == Condition::Cpc)
    b.cpc = CpcHead(env.obs_dims[agent], env.n_agents, hyper.vocab,
                    hyper.cpc_hidden, hyper.beta, rng, hyper.st_estimator);

  b.opt = Adam(hyper.adam);
  b.opt.register_params(b.params());
  return b;
}

// Full fixed-order concatenation of one message per agent.
inline JointMessage message_exchange(const std::vector<Message>& msgs) {
  JointMessage j;
  j.per_agent = msgs;
  j.vocab = msgs.empty() ? 0 : msgs.front().vocab;
  for (const auto& m : msgs)
    ad::check(m.vocab == j.vocab, "message_exchange: inconsistent vocab");
  return j;
}

// Other agents' blocks in fixed order, skipping `agent` (MessageAction input).
inline Vec incoming_onehot(const JointMessage& joint, int agent) {
  const int K = joint.vocab;
  Vec v = Vec::Zero(static_cast<Eigen::Index>(joint.n_agents() - 1) * K);
  int slot = 0;
  for (int i = 0; i < joint.n_agents(); ++i) {
    if (i == agent) continue;
    const int idx = joint.per_agent[i].index;
    if (idx >= 0) v[slot * K + idx] = 1.0;
    ++slot;
  }
  return v;
}

// Per-step sampling output for the whole team.
struct ActResult {
  std::vector<int> actions;
  std::vector<double> logpi;      // action log-prob (+ message log-prob under MessageAction)
  std::vector<double> values;
  std::optional<JointMessage> joint;   // after any intervention
  std::vector<Vec> rl_inputs;          // composed policy/value input per agent
  std::vector<Vec> msg_inputs;         // MessageAction first-pass inputs
  std::vector<int> own_msg;            // sampled symbol per agent, -1 if none
  std::vector<double> logpi_msg;       // MessageAction message log-prob
  std::vector<Vec> z;                  // encoder hidden per agent (Cpc)
};

using MessageIntervention = std::function<void(JointMessage&)>;

// Runs one decision step for all agents: message sampling/exchange first,
// then action selection from the composed inputs. `intervene` (evaluation
// ablations) edits the exchanged joint message before any agent consumes it.
inline ActResult act_all(std::vector<AgentBundle>& bundles,
                         const std::vector<Vec>& obs, RandomStream& rng,
                         const MessageIntervention* intervene = nullptr) {
  const int N = static_cast<int>(bundles.size());
  ad::check(static_cast<int>(obs.size()) == N, "act_all: observation count");
  const Condition cond = bundles.front().condition;

  ActResult r;
  r.actions.resize(N);
  r.logpi.resize(N);
  r.values.resize(N);
  r.rl_inputs.resize(N);
  r.own_msg.assign(N, -1);
  r.logpi_msg.assign(N, 0.0);

  // message phase
  if (cond == Condition::Cpc) {
    r.z.resize(N);
    std::vector<Message> msgs;
    for (int i = 0; i < N; ++i) {
      auto [m, z] = bundles[i].cpc->sample_message(obs[i], rng);
      msgs.push_back(m);
      r.z[i] = z;
      r.own_msg[i] = m.index;
    }
    r.joint = message_exchange(msgs);
  } else if (cond == Condition::MessageAction) {
    r.msg_inputs.resize(N);
    std::vector<Message> msgs;
    for (int i = 0; i < N; ++i) {
      AgentBundle& b = bundles[i];
      Vec in = Vec::Zero(b.rl_input_dim);
      in.head(obs[i].size()) = obs[i];  // incoming slots zero on the message pass
      r.msg_inputs[i] = in;
      auto detail = b.policy.forward_raw_detail(in);
      Mat logits = b.message_head->forward_raw(detail.last_hidden);
      Mat logp = ad::math::log_softmax_cols(logits);
      Vec probs = logp.col(0).array().exp();
      const int idx = rng.categorical(probs);
      msgs.push_back(Message{idx, logp(idx, 0), b.vocab});
      r.own_msg[i] = idx;
      r.logpi_msg[i] = logp(idx, 0);
    }
    r.joint = message_exchange(msgs);
  }

  if (r.joint && intervene) (*intervene)(*r.joint);

  // action phase
  for (int i = 0; i < N; ++i) {
    AgentBundle& b = bundles[i];
    Vec in;
    switch (cond) {
      case Condition::NoComm: in = obs[i]; break;
      case Condition::Shared: {
        int total = 0;
        for (const auto& o : obs) total += static_cast<int>(o.size());
        in = Vec(total);
        int at = 0;
        for (const auto& o : obs) {
          in.segment(at, o.size()) = o;
          at += static_cast<int>(o.size());
        }
        break;
      }
      case Condition::MessageAction: {
        Vec inc = incoming_onehot(*r.joint, i);
        in = Vec(obs[i].size() + inc.size());
        in << obs[i], inc;
        break;
      }
      case Condition::Cpc: {
        Vec m = r.joint->concat_onehot();
        in = Vec(r.z[i].size() + m.size());
        in << r.z[i], m;
        break;
      }
    }
    ad::check(in.size() == b.rl_input_dim, "act_all: composed input dim mismatch");
    r.rl_inputs[i] = in;

    Mat logits = b.policy.forward_raw(in);
    Mat logp = ad::math::log_softmax_cols(logits);
    Vec probs = logp.col(0).array().exp();
    const int a = rng.categorical(probs);
    r.actions[i] = a;
    r.logpi[i] = logp(a, 0) + r.logpi_msg[i];
    r.values[i] = b.value.forward_raw(in)(0, 0);
  }
  return r;
}

// Value-only pass used to bootstrap truncated segments: samples messages the
// same way a step would, composes the inputs, and evaluates V.
inline std::vector<double> values_at(std::vector<AgentBundle>& bundles,
                                     const std::vector<Vec>& obs,
                                     RandomStream& rng) {
  ActResult r = act_all(bundles, obs, rng);
  return r.values;
}

}  // namespace marlcpc
