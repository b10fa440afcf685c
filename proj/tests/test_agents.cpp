#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace marlcpc;
using ad::Mat;
using ad::Param;
using ad::Tape;
using ad::Var;
using ad::Vec;

namespace {

AgentHyper bandit_hyper() {
  AgentHyper h;
  h.vocab = 5;
  return h;
}

AgentHyper observer_hyper() {
  AgentHyper h;
  h.vocab = 20;
  return h;
}

std::vector<AgentBundle> make_team(Condition c, const EnvSpec& spec,
                                   const AgentHyper& h, std::uint64_t seed = 1) {
  std::vector<AgentBundle> team;
  for (int i = 0; i < spec.n_agents; ++i)
    team.push_back(build_bundle(c, spec, i, h, seed));
  return team;
}

void force_uniform_policy(AgentBundle& b) {
  for (auto& l : b.policy.layers) {
    l.W.value.setZero();
    l.b.value.setZero();
  }
  if (b.message_head)
    for (auto& l : b.message_head->layers) {
      l.W.value.setZero();
      l.b.value.setZero();
    }
}

}  // namespace

TEST(Conditions, ParseAndName) {
  EXPECT_EQ(parse_condition("no-comm"), Condition::NoComm);
  EXPECT_EQ(parse_condition("message"), Condition::MessageAction);
  EXPECT_EQ(parse_condition("cpc"), Condition::Cpc);
  EXPECT_EQ(parse_condition("shared"), Condition::Shared);
  EXPECT_THROW(parse_condition("telepathy"), ad::ContractError);
  EXPECT_EQ(condition_name(Condition::Cpc), "cpc");
}

TEST(Bundles, InputDimensionsPerConditionBandit) {
  BanditEnv env;
  const EnvSpec& spec = env.spec();
  AgentHyper h = bandit_hyper();
  EXPECT_EQ(rl_input_dim(Condition::NoComm, spec, 0, h), 2);
  EXPECT_EQ(rl_input_dim(Condition::MessageAction, spec, 0, h), 2 + 5);
  EXPECT_EQ(rl_input_dim(Condition::Cpc, spec, 0, h), 64 + 2 * 5);  // = 74
  EXPECT_EQ(rl_input_dim(Condition::Shared, spec, 0, h), 4);
}

TEST(Bundles, InputDimensionsPerConditionObserver) {
  ObserverEnv env;
  const EnvSpec& spec = env.spec();
  AgentHyper h = observer_hyper();
  EXPECT_EQ(rl_input_dim(Condition::NoComm, spec, 1, h), 16);
  EXPECT_EQ(rl_input_dim(Condition::MessageAction, spec, 1, h), 16 + 20);
  EXPECT_EQ(rl_input_dim(Condition::Cpc, spec, 1, h), 64 + 40);
  EXPECT_EQ(rl_input_dim(Condition::Shared, spec, 1, h), 32);
}

TEST(Bundles, BuildAssertsTheDimensionalContract) {
  BanditEnv env;
  for (Condition c : {Condition::NoComm, Condition::MessageAction,
                      Condition::Cpc, Condition::Shared}) {
    auto team = make_team(c, env.spec(), bandit_hyper());
    for (auto& b : team) {
      EXPECT_EQ(b.policy.input_dim(), b.rl_input_dim);
      EXPECT_EQ(b.value.input_dim(), b.rl_input_dim);
      EXPECT_EQ(b.policy.output_dim(), env.spec().act_dims[b.index]);
      EXPECT_EQ(b.value.output_dim(), 1);
      EXPECT_EQ(b.message_head.has_value(), c == Condition::MessageAction);
      EXPECT_EQ(b.cpc.has_value(), c == Condition::Cpc);
    }
  }
}

TEST(Bundles, NoParameterSharingBetweenAgents) {
  BanditEnv env;
  auto team = make_team(Condition::Cpc, env.spec(), bandit_hyper());
  auto p0 = team[0].params();
  auto p1 = team[1].params();
  for (Param* a : p0)
    for (Param* b : p1) EXPECT_NE(a, b);
  // distinct init draws as well
  EXPECT_NE(team[0].policy.layers[0].W.value, team[1].policy.layers[0].W.value);
}

TEST(MessageExchange, ConcatenationLayout) {
  Message m0{2, -0.1, 5}, m1{4, -0.2, 5};
  JointMessage j = message_exchange({m0, m1});
  Vec v = j.concat_onehot();
  EXPECT_EQ(v.size(), 10);
  EXPECT_DOUBLE_EQ(v.sum(), 2.0);
  EXPECT_DOUBLE_EQ(v[2], 1.0);
  EXPECT_DOUBLE_EQ(v[9], 1.0);
}

TEST(MessageExchange, SingleAgentEcho) {
  Message m{3, -0.5, 5};
  JointMessage j = message_exchange({m});
  EXPECT_EQ(j.concat_onehot(), m.onehot());
}

TEST(MessageExchange, PureFunction) {
  std::vector<Message> msgs = {Message{1, -0.3, 5}, Message{0, -0.9, 5}};
  JointMessage a = message_exchange(msgs);
  JointMessage b = message_exchange(msgs);
  EXPECT_EQ(a.concat_onehot(), b.concat_onehot());
}

TEST(MessageExchange, IncomingSkipsOwnBlock) {
  JointMessage j = message_exchange({Message{2, -0.1, 5}, Message{4, -0.2, 5}});
  Vec inc0 = incoming_onehot(j, 0);
  EXPECT_EQ(inc0.size(), 5);
  EXPECT_DOUBLE_EQ(inc0[4], 1.0);
  Vec inc1 = incoming_onehot(j, 1);
  EXPECT_DOUBLE_EQ(inc1[2], 1.0);
}

TEST(Act, NoCommUniformPolicyGivesHalfProbability) {
  BanditEnv env;
  auto team = make_team(Condition::NoComm, env.spec(), bandit_hyper());
  for (auto& b : team) force_uniform_policy(b);
  RandomStream rng(5);
  auto obs = env.reset(rng);
  ActResult r = act_all(team, obs, rng);
  for (int i = 0; i < 2; ++i) EXPECT_NEAR(r.logpi[i], std::log(0.5), 1e-12);
  EXPECT_FALSE(r.joint.has_value());
}

TEST(Act, SharedSeesBothObservations) {
  BanditEnv env;
  auto team = make_team(Condition::Shared, env.spec(), bandit_hyper());
  RandomStream rng(6);
  auto obs = env.reset(rng);
  ActResult r = act_all(team, obs, rng);
  Vec expect(4);
  expect << obs[0], obs[1];
  EXPECT_EQ(r.rl_inputs[0], expect);
  EXPECT_EQ(r.rl_inputs[1], expect);
}

TEST(Act, CpcComposesStopGradientHiddenAndJointMessage) {
  BanditEnv env;
  auto team = make_team(Condition::Cpc, env.spec(), bandit_hyper());
  RandomStream rng(7);
  auto obs = env.reset(rng);
  ActResult r = act_all(team, obs, rng);
  ASSERT_TRUE(r.joint.has_value());
  EXPECT_EQ(r.rl_inputs[0].size(), 74);
  EXPECT_EQ(r.rl_inputs[0].head(64), r.z[0]);
  EXPECT_EQ(r.rl_inputs[0].tail(10), r.joint->concat_onehot());
  EXPECT_EQ(r.own_msg[0], r.joint->per_agent[0].index);
}

TEST(Act, MessageActionSumsActionAndMessageLogProbs) {
  BanditEnv env;
  auto team = make_team(Condition::MessageAction, env.spec(), bandit_hyper());
  RandomStream rng(8);
  auto obs = env.reset(rng);
  ActResult r = act_all(team, obs, rng);
  ASSERT_TRUE(r.joint.has_value());
  for (int i = 0; i < 2; ++i) {
    // message pass: zero-padded incoming slots
    Vec expect_msg_in = Vec::Zero(7);
    expect_msg_in.head(2) = obs[i];
    EXPECT_EQ(r.msg_inputs[i], expect_msg_in);
    // action pass input carries the other agent's one-hot
    EXPECT_EQ(r.rl_inputs[i].head(2), obs[i]);
    EXPECT_DOUBLE_EQ(r.rl_inputs[i].tail(5).sum(), 1.0);

    // recompute both heads from raw paths
    auto d1 = team[i].policy.forward_raw_detail(r.msg_inputs[i]);
    Mat mlogits = team[i].message_head->forward_raw(d1.last_hidden);
    const double lpm =
        ad::math::log_softmax_cols(mlogits)(r.own_msg[i], 0);
    Mat alogits = team[i].policy.forward_raw(r.rl_inputs[i]);
    const double lpa =
        ad::math::log_softmax_cols(alogits)(r.actions[i], 0);
    EXPECT_DOUBLE_EQ(r.logpi[i], lpa + lpm);
    EXPECT_DOUBLE_EQ(r.logpi_msg[i], lpm);
  }
}

TEST(Act, InterventionRewritesTheExchangedJoint) {
  BanditEnv env;
  auto team = make_team(Condition::Cpc, env.spec(), bandit_hyper());
  RandomStream rng(9);
  auto obs = env.reset(rng);
  MessageIntervention zero_all = [](JointMessage& j) {
    for (auto& m : j.per_agent) m.index = -1;
  };
  ActResult r = act_all(team, obs, rng, &zero_all);
  EXPECT_TRUE(r.rl_inputs[0].tail(10).isZero(0.0));
}

TEST(Act, ObservationCountMismatchIsContractViolation) {
  BanditEnv env;
  auto team = make_team(Condition::NoComm, env.spec(), bandit_hyper());
  RandomStream rng(10);
  std::vector<Vec> bad_obs = {Vec::Zero(2)};
  EXPECT_THROW(act_all(team, bad_obs, rng), ad::ContractError);
}
