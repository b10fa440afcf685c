#pragma once

#include <optional>
#include <vector>

#include "marlcpc/nn.hpp"
#include "marlcpc/rng.hpp"

namespace marlcpc {

// Discrete symbol from a K-way vocabulary together with the log-probability
// it was sampled at.
struct Message {
  int index = 0;  // -1 encodes the all-zero block (ablation intervention)
  double logprob = 0.0;
  int vocab = 0;

  Vec onehot() const {
    Vec v = Vec::Zero(vocab);
    if (index >= 0) v[index] = 1.0;
    return v;
  }
};

// Fixed-agent-order concatenation of all agents' messages (dimension N*K).
struct JointMessage {
  std::vector<Message> per_agent;
  int vocab = 0;

  int n_agents() const { return static_cast<int>(per_agent.size()); }

  Vec concat_onehot() const {
    Vec v = Vec::Zero(static_cast<Eigen::Index>(per_agent.size()) * vocab);
    for (std::size_t i = 0; i < per_agent.size(); ++i)
      if (per_agent[i].index >= 0)
        v[static_cast<Eigen::Index>(i) * vocab + per_agent[i].index] = 1.0;
    return v;
  }
};

// Sampling-based divergence estimate used by the communication objective:
// (kappa - 1) - log kappa with kappa = q/p. Non-negative, zero iff q == p.
inline double kl_estimate(double q_prob, double p_prob) {
  ad::check(q_prob > 0.0 && q_prob <= 1.0, "kl_estimate: q_prob must be in (0,1]");
  ad::check(p_prob > 0.0 && p_prob <= 1.0, "kl_estimate: p_prob must be in (0,1]");
  const double kappa = q_prob / p_prob;
  return (kappa - 1.0) - std::log(kappa);
}

// Gradient route for the sampled message's straight-through node.
// ScalarBroadcast adds the scalar log Q(m|x) to every component of the
// one-hot; VectorLogProb adds the full log-pmf so each component carries its
// own gradient. The forward value is the exact one-hot either way.
enum class StEstimator { ScalarBroadcast, VectorLogProb };

inline StEstimator parse_st_estimator(const std::string& s) {
  if (s == "scalar") return StEstimator::ScalarBroadcast;
  if (s == "vector") return StEstimator::VectorLogProb;
  throw ad::ContractError("unknown straight-through estimator: " + s);
}

inline std::string st_estimator_name(StEstimator e) {
  return e == StEstimator::ScalarBroadcast ? "scalar" : "vector";
}

// Communication head of one agent: categorical encoder over own observation,
// joint-message decoder with independent-Bernoulli output, flat prior.
struct CpcHead {
  Mlp encoder;  // obs_dim -> hidden -> K logits
  Mlp decoder;  // N*K -> hidden -> obs_dim Bernoulli logits
  int vocab = 0;
  int n_agents = 0;
  int obs_dim = 0;
  double beta = 1.0;
  StEstimator st_estimator = StEstimator::VectorLogProb;

  static constexpr double kProbFloor = 1e-8;

  CpcHead() = default;

  CpcHead(int obs_dim_, int n_agents_, int vocab_, int hidden, double beta_,
          RandomStream& rng,
          StEstimator st = StEstimator::VectorLogProb)
      : encoder({obs_dim_, hidden, vocab_}, Act::Gelu, rng),
        decoder({n_agents_ * vocab_, hidden, obs_dim_}, Act::Gelu, rng),
        vocab(vocab_),
        n_agents(n_agents_),
        obs_dim(obs_dim_),
        beta(beta_),
        st_estimator(st) {}

  double flat_prior() const { return 1.0 / static_cast<double>(vocab); }

  void collect_params(std::vector<Param*>& out) {
    encoder.collect_params(out);
    decoder.collect_params(out);
  }

  // Samples m ~ Q(m|x) and returns the encoder's post-activation hidden
  // representation alongside.
  std::pair<Message, Vec> sample_message(const Vec& x, RandomStream& rng) {
    ad::check(x.size() == obs_dim, "sample_message: observation dim mismatch");
    Mat hidden;
    Mat logits = encoder.forward_raw_hidden(x, hidden);
    Mat logp = ad::math::log_softmax_cols(logits);
    Vec probs = logp.col(0).array().exp();
    const int idx = rng.categorical(probs);
    return {Message{idx, logp(idx, 0), vocab}, Vec(hidden.col(0))};
  }
};

// Pieces of the per-agent communication objective built on a tape over a
// minibatch. The encoder forward is shared with the policy input path (z).
struct CpcGraph {
  Var z;           // hidden x B, pre stop-gradient
  Var enc_logits;  // K x B
  Var logq;        // 1 x B, log Q(m_i | x_i) of the stored samples
  Var recon;       // 1 x B, log P(x_i | m)
  Var kl;          // 1 x B
  Var jcpc;        // 1 x B, recon - beta * kl
};

// Builds J_CPC for agent `agent` over a minibatch: observations X
// (obs_dim x B) and the stored joint messages msgs[agent][col]. Only the
// agent's own block of the decoder input carries gradient (through the
// straight-through node); peer blocks are constants.
inline CpcGraph build_cpc_graph(Tape& t, CpcHead& head, const Mat& X,
                                const std::vector<std::vector<int>>& msgs,
                                int agent) {
  const int B = static_cast<int>(X.cols());
  const int K = head.vocab;
  const int N = head.n_agents;
  ad::check(static_cast<int>(msgs.size()) == N, "build_cpc_graph: agent count");
  for (const auto& m : msgs)
    ad::check(static_cast<int>(m.size()) == B, "build_cpc_graph: batch size");

  CpcGraph g;
  Var x_in = t.constant(X);
  g.enc_logits = head.encoder.forward_hidden(t, x_in, g.z);

  Var lsm = t.log_softmax(g.enc_logits);
  g.logq = t.gather(lsm, msgs[agent]);

  // kl estimate per column, with a probability floor against saturated encoders
  Var q = t.clamp_min(t.exp(g.logq), CpcHead::kProbFloor);
  Var kappa = t.scale(q, static_cast<double>(K));
  g.kl = t.sub(t.add_scalar(kappa, -1.0), t.log(kappa));

  // decoder input: peer blocks constant, own block straight-through
  Mat own_onehots = Mat::Zero(K, B);
  for (int j = 0; j < B; ++j) own_onehots(msgs[agent][j], j) = 1.0;
  Var st = head.st_estimator == StEstimator::ScalarBroadcast
               ? t.straight_through(own_onehots, g.logq)
               : t.straight_through_vector(own_onehots, lsm);

  std::vector<Var> blocks;
  blocks.reserve(N);
  for (int i = 0; i < N; ++i) {
    if (i == agent) {
      blocks.push_back(st);
    } else {
      Mat peer = Mat::Zero(K, B);
      for (int j = 0; j < B; ++j) peer(msgs[i][j], j) = 1.0;
      blocks.push_back(t.constant(peer));
    }
  }
  Var dec_in = t.concat_rows(blocks);
  Var dec_logits = head.decoder.forward(t, dec_in);
  g.recon = t.bernoulli_loglik(dec_logits, X);

  g.jcpc = t.sub(g.recon, t.scale(g.kl, head.beta));
  return g;
}

// Single-sample convenience: scalar J_CPC node for one observation and one
// stored joint message.
inline Var cpc_loss(Tape& t, CpcHead& head, const Vec& x,
                    const JointMessage& joint, int agent) {
  ad::check(x.size() == head.obs_dim, "cpc_loss: observation dim mismatch");
  ad::check(joint.n_agents() == head.n_agents && joint.vocab == head.vocab,
            "cpc_loss: joint message shape mismatch");
  std::vector<std::vector<int>> msgs(head.n_agents);
  for (int i = 0; i < head.n_agents; ++i)
    msgs[i] = {joint.per_agent[i].index};
  CpcGraph g = build_cpc_graph(t, head, Mat(x), msgs, agent);
  return t.mean_all(g.jcpc);
}

// Raw decoder log-likelihood of an observation given a joint message; used
// for readout diagnostics.
inline double decoder_loglik(CpcHead& head, const Vec& joint_onehot, const Vec& x) {
  Mat logits = head.decoder.forward_raw(joint_onehot);
  double acc = 0.0;
  for (Eigen::Index c = 0; c < x.size(); ++c) {
    const double l = logits(c, 0);
    acc -= x[c] * ad::math::softplus(-l) + (1.0 - x[c]) * ad::math::softplus(l);
  }
  return acc;
}

}  // namespace marlcpc
