#pragma once

#include <cmath>
#include <vector>

#include "marlcpc/autodiff.hpp"

namespace marlcpc {

// Adam over a fixed set of registered parameters. step() consumes the
// accumulated gradients (descent direction) and clears them.
class Adam {
 public:
  struct Hyper {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
  };

  Adam() = default;
  explicit Adam(Hyper h) : hyper_(h) {}

  void register_params(const std::vector<ad::Param*>& params) {
    for (ad::Param* p : params) {
      Slot s;
      s.param = p;
      s.m = ad::Mat::Zero(p->value.rows(), p->value.cols());
      s.v = ad::Mat::Zero(p->value.rows(), p->value.cols());
      slots_.push_back(std::move(s));
    }
  }

  const Hyper& hyper() const { return hyper_; }
  void set_lr(double lr) { hyper_.lr = lr; }
  std::size_t num_params() const { return slots_.size(); }
  int step_count() const { return t_; }

  void zero_grad() {
    for (auto& s : slots_) s.param->zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(hyper_.beta1, t_);
    const double bc2 = 1.0 - std::pow(hyper_.beta2, t_);
    for (auto& s : slots_) {
      ad::check(s.param->grad.allFinite(), "adam_step: non-finite gradient");
      s.m = hyper_.beta1 * s.m + (1.0 - hyper_.beta1) * s.param->grad;
      s.v = hyper_.beta2 * s.v.array() +
            (1.0 - hyper_.beta2) * s.param->grad.array().square();
      s.param->value.array() -=
          hyper_.lr * (s.m.array() / bc1) /
          ((s.v.array() / bc2).sqrt() + hyper_.epsilon);
      ad::check(s.param->value.allFinite(), "adam_step: non-finite parameter");
      s.param->zero_grad();
    }
  }

  // Checkpoint access to the moment buffers, in registration order.
  struct Slot {
    ad::Param* param = nullptr;
    ad::Mat m;
    ad::Mat v;
  };
  std::vector<Slot>& slots() { return slots_; }
  void set_step_count(int t) { t_ = t; }

 private:
  Hyper hyper_;
  std::vector<Slot> slots_;
  int t_ = 0;
};

}  // namespace marlcpc
