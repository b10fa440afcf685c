#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace marlcpc;
using ad::Mat;
using ad::Param;
using ad::Tape;
using ad::Var;
using ad::Vec;
using testutil::rel_err;

namespace {

CpcHead make_head(int obs_dim, int n_agents, int vocab, std::uint64_t seed,
                  int hidden = 16,
                  StEstimator st = StEstimator::VectorLogProb) {
  RandomStream rng(seed);
  return CpcHead(obs_dim, n_agents, vocab, hidden, 1.0, rng, st);
}

// Zero the net and write fixed output logits into the last bias.
void force_constant_logits(Mlp& net, const Vec& logits) {
  for (auto& l : net.layers) {
    l.W.value.setZero();
    l.b.value.setZero();
  }
  net.layers.back().b.value.col(0) = logits;
}

// Raw log Q(m|x) under the encoder.
double encoder_logq(CpcHead& head, const Vec& x, int m) {
  Mat logits = head.encoder.forward_raw(x);
  return ad::math::log_softmax_cols(logits)(m, 0);
}

}  // namespace

TEST(SampleMessage, UniformLogitsSampleUniformly) {
  CpcHead head = make_head(2, 2, 5, 3);
  force_constant_logits(head.encoder, Vec::Zero(5));
  RandomStream rng(123);
  const int n = 100000;
  std::vector<int> counts(5, 0);
  const Vec x = Vec::Zero(2);
  for (int i = 0; i < n; ++i) counts[head.sample_message(x, rng).first.index]++;
  // chi^2 with 4 dof; 99.9th percentile ~ 18.5
  double chi2 = 0.0;
  for (int k = 0; k < 5; ++k) {
    const double expect = n / 5.0;
    chi2 += (counts[k] - expect) * (counts[k] - expect) / expect;
  }
  EXPECT_LT(chi2, 18.5);
}

TEST(SampleMessage, DominantLogitIsNearDeterministic) {
  CpcHead head = make_head(2, 2, 5, 3);
  Vec logits(5);
  logits << 20, -20, -20, -20, -20;
  force_constant_logits(head.encoder, logits);
  RandomStream rng(7);
  const int n = 20000;
  int zero_count = 0;
  const Vec x = Vec::Zero(2);
  for (int i = 0; i < n; ++i)
    if (head.sample_message(x, rng).first.index == 0) ++zero_count;
  EXPECT_GT(zero_count / static_cast<double>(n), 0.999);
}

TEST(SampleMessage, FrequenciesMatchSoftmaxWithinThreeSigma) {
  CpcHead head = make_head(3, 2, 5, 11);
  RandomStream lrng(17);
  Vec logits = testutil::random_vec(5, lrng, -1.5, 1.5);
  force_constant_logits(head.encoder, logits);
  Vec probs = ad::math::softmax_cols(logits).col(0);

  RandomStream rng(29);
  const int n = 100000;
  std::vector<int> counts(5, 0);
  const Vec x = Vec::Zero(3);
  for (int i = 0; i < n; ++i) counts[head.sample_message(x, rng).first.index]++;
  for (int k = 0; k < 5; ++k) {
    const double sigma = std::sqrt(n * probs[k] * (1 - probs[k]));
    EXPECT_NEAR(counts[k], n * probs[k], 3.0 * sigma) << "symbol " << k;
  }
}

TEST(SampleMessage, ExposesEncoderHiddenAsZ) {
  CpcHead head = make_head(2, 2, 5, 5, 64);
  RandomStream rng(1);
  Vec x(2);
  x << 1, 0;
  auto [msg, z] = head.sample_message(x, rng);
  EXPECT_EQ(z.size(), 64);
  Mat pre = head.encoder.layers[0].W.value * x + head.encoder.layers[0].b.value;
  for (int i = 0; i < 64; ++i)
    EXPECT_DOUBLE_EQ(z[i], ad::math::gelu(pre(i, 0)));
  EXPECT_LE(msg.logprob, 0.0);
}

TEST(KlEstimate, ClosedFormCases) {
  EXPECT_DOUBLE_EQ(kl_estimate(0.2, 0.2), 0.0);
  EXPECT_NEAR(kl_estimate(0.4, 0.2), 1.0 - std::log(2.0), 1e-12);
  EXPECT_THROW(kl_estimate(0.0, 0.2), ad::ContractError);
  EXPECT_THROW(kl_estimate(0.2, -0.1), ad::ContractError);
  EXPECT_THROW(kl_estimate(1.2, 0.5), ad::ContractError);
}

TEST(KlEstimate, NonNegativeWithEqualityIffEqual) {
  RandomStream rng(5);
  for (int i = 0; i < 2000; ++i) {
    const double q = rng.uniform_range(1e-6, 1.0);
    const double p = rng.uniform_range(1e-6, 1.0);
    const double v = kl_estimate(q, p);
    EXPECT_GE(v, 0.0);
    if (std::abs(q - p) > 1e-3) EXPECT_GT(v, 0.0);
  }
}

// Sample-mean of the estimator over m ~ Q against exact enumeration
//   sum_m Q(m) [ (Q(m)/P(m) - 1) - log(Q(m)/P(m)) ].
TEST(KlEstimate, SampleAverageMatchesEnumeration) {
  RandomStream lrng(31);
  for (int trial = 0; trial < 3; ++trial) {
    const int K = 5;
    Vec logits = testutil::random_vec(K, lrng, -2.5, 2.5);
    Vec q = ad::math::softmax_cols(logits).col(0);
    const double p = 1.0 / K;

    double exact = 0.0;
    for (int m = 0; m < K; ++m) exact += q[m] * kl_estimate(q[m], p);

    RandomStream rng(1000 + trial);
    const int n = 1000000;
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += kl_estimate(q[rng.categorical(q)], p);
    acc /= n;
    EXPECT_LT(rel_err(acc, exact), 0.01) << "exact " << exact << " est " << acc;
  }
}

TEST(StraightThrough, ForwardEqualsOneHotForAnyLogits) {
  CpcHead head = make_head(2, 2, 5, 77);
  RandomStream rng(3);
  Vec x(2);
  x << 0, 1;
  auto [msg, z] = head.sample_message(x, rng);

  Tape t;
  std::vector<std::vector<int>> msgs = {{msg.index}, {2}};
  CpcGraph g = build_cpc_graph(t, head, Mat(x), msgs, 0);
  // the decoder input's own block is exactly the one-hot
  Vec onehot = Vec::Zero(5);
  onehot[msg.index] = 1.0;
  (void)g;
  Mat st_value = t.value(t.straight_through(Mat(onehot), g.logq));
  EXPECT_EQ(st_value, Mat(onehot));
}

// Downstream loss L = sum of the components of the straight-through block:
// dL/dphi must equal K * d(logQ)/dphi. The finite-difference oracle evaluates
// the written-out formula with the subtracted stop-gradient term frozen at
// the base parameters.
TEST(StraightThrough, BroadcastGradientMatchesFrozenFiniteDifference) {
  CpcHead head = make_head(3, 2, 5, 13);
  RandomStream rng(9);
  Vec x(3);
  x << 1, 0, 1;
  auto [msg, z] = head.sample_message(x, rng);
  const int m = msg.index;
  const int K = head.vocab;

  std::vector<Param*> enc_params;
  head.encoder.collect_params(enc_params);
  testutil::zero_grads(enc_params);

  Tape t;
  Var enc_logits = head.encoder.forward(t, t.constant(x));
  Var logq = t.gather(t.log_softmax(enc_logits), {m});
  Mat onehot = Mat::Zero(K, 1);
  onehot(m, 0) = 1.0;
  Var st = t.straight_through(onehot, logq);
  t.backward(t.sum_all(st));

  const double logq0 = encoder_logq(head, x, m);
  auto frozen_loss = [&]() {
    // sum_k [ onehot_k + logq(phi) - logq0 ] = 1 + K * (logq(phi) - logq0)
    return 1.0 + K * (encoder_logq(head, x, m) - logq0);
  };
  EXPECT_LT(testutil::max_fd_rel_err(enc_params, frozen_loss), 1e-5);
}

// Vector form: each component of the one-hot carries the gradient of its own
// log-probability. Oracle freezes the subtracted stop-gradient term.
TEST(StraightThrough, VectorFormGradientMatchesFrozenFiniteDifference) {
  CpcHead head = make_head(3, 2, 5, 14);
  RandomStream rng(19);
  Vec x(3);
  x << 0, 1, 1;
  auto [msg, z] = head.sample_message(x, rng);
  const int K = head.vocab;
  const Vec probe = testutil::random_vec(K, rng);

  std::vector<Param*> enc_params;
  head.encoder.collect_params(enc_params);
  testutil::zero_grads(enc_params);

  Tape t;
  Var lsm = t.log_softmax(head.encoder.forward(t, t.constant(x)));
  Mat onehot = Mat::Zero(K, 1);
  onehot(msg.index, 0) = 1.0;
  Var st = t.straight_through_vector(onehot, lsm);
  t.backward(t.sum_all(t.mul(st, t.constant(probe))));

  Mat logits0 = head.encoder.forward_raw(x);
  Vec logp0 = ad::math::log_softmax_cols(logits0).col(0);
  auto frozen_loss = [&]() {
    Mat logits = head.encoder.forward_raw(x);
    Vec logp = ad::math::log_softmax_cols(logits).col(0);
    double acc = 0.0;
    for (int k = 0; k < K; ++k)
      acc += probe[k] * (onehot(k, 0) + logp[k] - logp0[k]);
    return acc;
  };
  EXPECT_LT(testutil::max_fd_rel_err(enc_params, frozen_loss), 1e-5);
}

TEST(CpcLoss, MaxEntropyDecoderValue) {
  CpcHead head = make_head(2, 2, 5, 21);
  force_constant_logits(head.decoder, Vec::Zero(2));
  force_constant_logits(head.encoder, Vec::Zero(5));  // q = p = 0.2

  Vec x(2);
  x << 1, 0;
  JointMessage joint = message_exchange(
      {Message{1, std::log(0.2), 5}, Message{3, std::log(0.2), 5}});
  Tape t;
  Var j = cpc_loss(t, head, x, joint, 0);
  // reconstruction 2*ln(0.5); KL estimate zero since q == p
  EXPECT_NEAR(t.value(j)(0, 0), 2.0 * std::log(0.5), 1e-12);
}

TEST(CpcLoss, PerfectDecoderSaturatesToZero) {
  CpcHead head = make_head(2, 2, 5, 22);
  Vec x(2);
  x << 1, 0;
  Vec dec_logits(2);
  dec_logits << 20, -20;
  force_constant_logits(head.decoder, dec_logits);
  force_constant_logits(head.encoder, Vec::Zero(5));

  JointMessage joint = message_exchange(
      {Message{0, std::log(0.2), 5}, Message{0, std::log(0.2), 5}});
  Tape t;
  Var j = cpc_loss(t, head, x, joint, 0);
  EXPECT_NEAR(t.value(j)(0, 0), 0.0, 1e-8);
}

// Full J_CPC gradients for theta and phi against the frozen-stop-gradient
// finite-difference oracle (hand-rolled raw forward, no tape), in both
// straight-through modes.
TEST(CpcLoss, GradientsMatchFrozenFiniteDifferenceOracle) {
  for (StEstimator st :
       {StEstimator::ScalarBroadcast, StEstimator::VectorLogProb}) {
    CpcHead head = make_head(4, 2, 5, 33, 16, st);
    RandomStream rng(55);
    Vec x(4);
    x << 1, 0, 1, 1;
    auto [msg, z] = head.sample_message(x, rng);
    std::vector<std::vector<int>> msgs = {{msg.index}, {3}};
    const int K = head.vocab;

    const double logq0 = encoder_logq(head, x, msg.index);
    Mat base_logits = head.encoder.forward_raw(x);
    const Vec logp0 = ad::math::log_softmax_cols(base_logits).col(0);

    auto frozen_loss = [&]() {
      Mat logits = head.encoder.forward_raw(x);
      Vec logp = ad::math::log_softmax_cols(logits).col(0);
      Vec dec_in = Vec::Zero(2 * K);
      dec_in[msg.index] = 1.0;
      if (st == StEstimator::ScalarBroadcast)
        dec_in.head(K).array() += logp[msg.index] - logq0;
      else
        dec_in.head(K) += logp - logp0;
      dec_in[K + 3] = 1.0;
      Mat dlogits = head.decoder.forward_raw(dec_in);
      double recon = 0.0;
      for (int c = 0; c < 4; ++c)
        recon -= x[c] * ad::math::softplus(-dlogits(c, 0)) +
                 (1 - x[c]) * ad::math::softplus(dlogits(c, 0));
      const double q = std::max(std::exp(logp[msg.index]), CpcHead::kProbFloor);
      const double kl = (q * K - 1.0) - std::log(q * K);
      return recon - head.beta * kl;
    };

    std::vector<Param*> params;
    head.collect_params(params);
    testutil::zero_grads(params);
    Tape t;
    CpcGraph g = build_cpc_graph(t, head, Mat(x), msgs, 0);
    t.backward(t.mean_all(g.jcpc));

    EXPECT_LT(testutil::max_fd_rel_err(params, frozen_loss), 1e-4)
        << st_estimator_name(st);
  }
}

TEST(CpcLoss, PeerParametersReceiveExactlyZeroGradient) {
  std::vector<CpcHead> heads;
  heads.push_back(make_head(2, 2, 5, 101));
  heads.push_back(make_head(2, 2, 5, 102));

  RandomStream rng(66);
  Vec x0(2), x1(2);
  x0 << 1, 0;
  x1 << 0, 0;
  auto [m0, z0] = heads[0].sample_message(x0, rng);
  auto [m1, z1] = heads[1].sample_message(x1, rng);
  std::vector<std::vector<int>> msgs = {{m0.index}, {m1.index}};

  std::vector<Param*> p0, p1;
  heads[0].collect_params(p0);
  heads[1].collect_params(p1);
  testutil::zero_grads(p0);
  testutil::zero_grads(p1);

  Tape t;
  CpcGraph g = build_cpc_graph(t, heads[0], Mat(x0), msgs, 0);
  t.backward(t.mean_all(g.jcpc));

  double own = 0.0;
  for (Param* p : p0) own += p->grad.cwiseAbs().sum();
  EXPECT_GT(own, 0.0);
  for (Param* p : p1) EXPECT_EQ(p->grad.cwiseAbs().maxCoeff(), 0.0);

  // Perturbing the peer encoder changes agent 0's loss value through the
  // resampled joint message, not through any differentiable path.
  const double before = t.value(g.jcpc)(0, 0);
  heads[1].encoder.layers.back().b.value.array() += 5.0;
  RandomStream rng2(66);
  auto [m0b, z0b] = heads[0].sample_message(x0, rng2);
  auto [m1b, z1b] = heads[1].sample_message(x1, rng2);
  std::vector<std::vector<int>> msgs2 = {{m0b.index}, {m1b.index}};
  Tape t2;
  CpcGraph g2 = build_cpc_graph(t2, heads[0], Mat(x0), msgs2, 0);
  const double after = t2.value(g2.jcpc)(0, 0);
  if (m1b.index != m1.index) EXPECT_NE(before, after);
}

TEST(CpcLoss, SaturatedEncoderStaysFiniteThroughProbabilityFloor) {
  CpcHead head = make_head(2, 2, 5, 44);
  Vec logits(5);
  logits << 800, -800, -800, -800, -800;
  force_constant_logits(head.encoder, logits);
  Vec x(2);
  x << 1, 0;
  // picked symbol has log-prob ~ -1600: without the floor kappa would be 0
  std::vector<std::vector<int>> msgs = {{1}, {0}};
  Tape t;
  CpcGraph g = build_cpc_graph(t, head, Mat(x), msgs, 0);
  EXPECT_TRUE(t.value(g.jcpc).allFinite());
  t.backward(t.mean_all(g.jcpc));
}

// Training both CPC heads alone on a fixed set of bandit observations: the
// batch-mean reconstruction term improves across 500-update windows and the
// decoder afterwards identifies the informed observation from the joint
// message. The combined J_CPC trace itself is not monotone under the written
// kappa=Q/P divergence estimate (its penalty grows faster than the
// reconstruction gain once codes sharpen), so the window check is on the
// reconstruction term.
TEST(CpcTraining, ReconstructionImprovesAndMessagesBecomeIdentifiable) {
  const int K = 5;
  const int n_obs = 512;
  RandomStream data_rng(2024);

  // dataset: (x0, x1, state, informed)
  struct Sample {
    Vec x0, x1;
    int state, informed;
  };
  std::vector<Sample> dataset;
  for (int i = 0; i < n_obs; ++i) {
    Sample s;
    s.state = data_rng.uniform_int(2);
    s.informed = data_rng.uniform_int(2);
    s.x0 = Vec::Zero(2);
    s.x1 = Vec::Zero(2);
    (s.informed == 0 ? s.x0 : s.x1)[s.state] = 1.0;
    dataset.push_back(s);
  }

  std::vector<CpcHead> heads;
  heads.push_back(make_head(2, 2, K, 501, 64));
  heads.push_back(make_head(2, 2, K, 502, 64));
  std::vector<Adam> opts(2);
  for (int i = 0; i < 2; ++i) {
    std::vector<Param*> ps;
    heads[i].collect_params(ps);
    opts[i] = Adam(Adam::Hyper{3e-4, 0.9, 0.999, 1e-8});
    opts[i].register_params(ps);
  }

  RandomStream train_rng(77);
  const int updates = 2000;
  const int batch = 128;
  std::vector<double> recon_trace;

  for (int u = 0; u < updates; ++u) {
    Mat X0(2, batch), X1(2, batch);
    std::vector<std::vector<int>> msgs(2, std::vector<int>(batch));
    for (int j = 0; j < batch; ++j) {
      const Sample& s = dataset[train_rng.uniform_int(n_obs)];
      X0.col(j) = s.x0;
      X1.col(j) = s.x1;
      msgs[0][j] = heads[0].sample_message(s.x0, train_rng).first.index;
      msgs[1][j] = heads[1].sample_message(s.x1, train_rng).first.index;
    }
    double rsum = 0.0;
    for (int i = 0; i < 2; ++i) {
      Tape t;
      CpcGraph g = build_cpc_graph(t, heads[i], i == 0 ? X0 : X1, msgs, i);
      Var loss = t.scale(t.mean_all(g.jcpc), -1.0);
      t.backward(loss);
      opts[i].step();
      rsum += t.value(t.mean_all(g.recon))(0, 0);
    }
    recon_trace.push_back(rsum / 2.0);
  }

  auto window_mean = [&](int from, int len) {
    double acc = 0.0;
    for (int i = from; i < from + len; ++i) acc += recon_trace[i];
    return acc / len;
  };
  const double w0 = window_mean(0, 500);
  const double w1 = window_mean(500, 500);
  const double w2 = window_mean(1000, 500);
  const double w3 = window_mean(1500, 500);
  EXPECT_GT(w1, w0 + 0.05);
  EXPECT_GT(w2, w1 - 0.03);  // plateau allowed, regression is not
  EXPECT_GT(w3, w2 - 0.03);

  // identifiability: decoder readout of the informed observation
  RandomStream eval_rng(88);
  int correct = 0;
  const int trials = 1000;
  for (int i = 0; i < trials; ++i) {
    const int state = eval_rng.uniform_int(2);
    const int informed = eval_rng.uniform_int(2);
    Vec x0 = Vec::Zero(2), x1 = Vec::Zero(2);
    (informed == 0 ? x0 : x1)[state] = 1.0;
    auto m0 = heads[0].sample_message(x0, eval_rng).first;
    auto m1 = heads[1].sample_message(x1, eval_rng).first;
    JointMessage joint = message_exchange({m0, m1});
    Vec jm = joint.concat_onehot();

    CpcHead& informed_head = heads[informed];
    Vec left = Vec::Zero(2), right = Vec::Zero(2);
    left[0] = 1.0;
    right[1] = 1.0;
    const double ll_left = decoder_loglik(informed_head, jm, left);
    const double ll_right = decoder_loglik(informed_head, jm, right);
    const int decoded = ll_left >= ll_right ? 0 : 1;
    if (decoded == state) ++correct;
  }
  EXPECT_GT(correct / static_cast<double>(trials), 0.95)
      << "decoder readout accuracy " << correct / 10.0 << "%";
}
