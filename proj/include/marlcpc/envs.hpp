#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "marlcpc/autodiff.hpp"
#include "marlcpc/rng.hpp"

namespace marlcpc {

struct StepResult {
  std::vector<Vec> obs;         // next observation per agent
  std::vector<double> rewards;  // per agent
  bool done = false;
  bool timeout = false;  // done due to the step cap rather than task success
  int episode_len = 0;   // valid when done
};

struct EnvSpec {
  std::string name;
  int n_agents = 0;
  std::vector<int> obs_dims;
  std::vector<int> act_dims;
  int max_episode_steps = 1;
};

// Factorized-observation multi-agent environment: each agent sees only its
// own component of the state and collects an individual reward.
class Env {
 public:
  virtual ~Env() = default;
  virtual const EnvSpec& spec() const = 0;
  virtual std::vector<Vec> reset(RandomStream& rng) = 0;
  virtual StepResult step(const std::vector<int>& actions, RandomStream& rng) = 0;
  virtual std::unique_ptr<Env> clone_fresh() const = 0;
};

// Two-agent contextual bandit: a uniformly sampled binary state, observed by
// exactly one agent per episode; one decision step.
//
// Non-cooperative: r_i = +1 if a_i matches the state else -0.1, independently.
// Cooperative: both get +1 only when both match, else both get -0.1.
class BanditEnv final : public Env {
 public:
  static constexpr int kLeft = 0;
  static constexpr int kRight = 1;

  explicit BanditEnv(bool cooperative = false,
                     std::optional<int> fixed_informed = std::nullopt)
      : cooperative_(cooperative), fixed_informed_(fixed_informed) {
    spec_.name = cooperative ? "bandit-coop" : "bandit";
    spec_.n_agents = 2;
    spec_.obs_dims = {2, 2};
    spec_.act_dims = {2, 2};
    spec_.max_episode_steps = 1;
  }

  const EnvSpec& spec() const override { return spec_; }

  std::vector<Vec> reset(RandomStream& rng) override {
    state_ = rng.uniform_int(2);
    informed_ = fixed_informed_ ? *fixed_informed_ : rng.uniform_int(2);
    std::vector<Vec> obs(2, Vec::Zero(2));
    obs[informed_][state_] = 1.0;
    return obs;
  }

  StepResult step(const std::vector<int>& actions, RandomStream&) override {
    ad::check(actions.size() == 2, "bandit: need one action per agent");
    for (int a : actions) ad::check(a == kLeft || a == kRight, "bandit: bad action");
    StepResult r;
    if (cooperative_) {
      const bool both = actions[0] == state_ && actions[1] == state_;
      r.rewards = {both ? 1.0 : -0.1, both ? 1.0 : -0.1};
    } else {
      r.rewards = {actions[0] == state_ ? 1.0 : -0.1,
                   actions[1] == state_ ? 1.0 : -0.1};
    }
    r.done = true;
    r.episode_len = 1;
    r.obs = {Vec::Zero(2), Vec::Zero(2)};  // terminal; callers reset next
    return r;
  }

  std::unique_ptr<Env> clone_fresh() const override {
    return std::make_unique<BanditEnv>(cooperative_, fixed_informed_);
  }

  int state() const { return state_; }
  int informed_agent() const { return informed_; }
  bool cooperative() const { return cooperative_; }

 private:
  EnvSpec spec_;
  bool cooperative_;
  std::optional<int> fixed_informed_;
  int state_ = kLeft;
  int informed_ = 0;
};

// 4x4 gridworld: agent A is stationary, rewardless, and observes the buried
// reward cell; agent B observes its own position and must dig on the right
// cell. Cells are indexed row-major (index = 4*row + col).
class ObserverEnv final : public Env {
 public:
  enum Action { kUp = 0, kDown = 1, kLeft = 2, kRight = 3, kStay = 4, kDig = 5 };
  static constexpr int kGrid = 4;
  static constexpr int kCells = kGrid * kGrid;
  static constexpr int kMaxSteps = 1000;
  static constexpr double kStepPenalty = -0.01;

  ObserverEnv() {
    spec_.name = "observer";
    spec_.n_agents = 2;
    spec_.obs_dims = {kCells, kCells};
    spec_.act_dims = {1, 6};  // A has a single dummy action
    spec_.max_episode_steps = kMaxSteps;
  }

  const EnvSpec& spec() const override { return spec_; }

  std::vector<Vec> reset(RandomStream& rng) override {
    reward_cell_ = rng.uniform_int(kCells);
    b_pos_ = rng.uniform_int(kCells);
    step_count_ = 0;
    return observations();
  }

  StepResult step(const std::vector<int>& actions, RandomStream&) override {
    ad::check(actions.size() == 2, "observer: need one action per agent");
    ad::check(actions[0] == 0, "observer: agent A has a single dummy action");
    const int a = actions[1];
    ad::check(a >= 0 && a < 6, "observer: agent B action out of range");

    ++step_count_;
    StepResult r;
    r.rewards = {0.0, kStepPenalty};

    int row = b_pos_ / kGrid;
    int col = b_pos_ % kGrid;
    switch (a) {
      case kUp: row = std::max(0, row - 1); break;
      case kDown: row = std::min(kGrid - 1, row + 1); break;
      case kLeft: col = std::max(0, col - 1); break;
      case kRight: col = std::min(kGrid - 1, col + 1); break;
      default: break;  // stand-still and dig do not move
    }
    b_pos_ = kGrid * row + col;

    if (a == kDig && b_pos_ == reward_cell_) {
      r.rewards[1] = 1.0;
      r.done = true;
    } else if (step_count_ >= kMaxSteps) {
      r.done = true;
      r.timeout = true;
    }
    r.episode_len = step_count_;
    r.obs = observations();
    return r;
  }

  std::unique_ptr<Env> clone_fresh() const override {
    return std::make_unique<ObserverEnv>();
  }

  int reward_cell() const { return reward_cell_; }
  int b_position() const { return b_pos_; }
  int step_count() const { return step_count_; }

  // Direct state injection for exhaustive tests.
  void set_state(int reward_cell, int b_pos, int step_count = 0) {
    ad::check(reward_cell >= 0 && reward_cell < kCells, "set_state: reward cell");
    ad::check(b_pos >= 0 && b_pos < kCells, "set_state: b position");
    reward_cell_ = reward_cell;
    b_pos_ = b_pos;
    step_count_ = step_count;
  }

  std::vector<Vec> current_observations() const { return observations(); }

 private:
  std::vector<Vec> observations() const {
    Vec xa = Vec::Zero(kCells);
    xa[reward_cell_] = 1.0;
    Vec xb = Vec::Zero(kCells);
    xb[b_pos_] = 1.0;
    return {xa, xb};
  }

  EnvSpec spec_;
  int reward_cell_ = 0;
  int b_pos_ = 0;
  int step_count_ = 0;
};

inline std::unique_ptr<Env> make_env(const std::string& name) {
  if (name == "bandit") return std::make_unique<BanditEnv>(false);
  if (name == "bandit-coop") return std::make_unique<BanditEnv>(true);
  if (name == "observer") return std::make_unique<ObserverEnv>();
  throw ad::ContractError("unknown env: " + name);
}

}  // namespace marlcpc
