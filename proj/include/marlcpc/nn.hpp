#pragma once

#include <cstdint>
#include <vector>

#include "marlcpc/autodiff.hpp"
#include "marlcpc/rng.hpp"

namespace marlcpc {

using ad::Mat;
using ad::Param;
using ad::Tape;
using ad::Var;
using ad::Vec;

enum class Act { Tanh, Gelu };

// Feed-forward MLP: activation after every layer except the last (linear
// output). Weight init is uniform fan-in scaling, biases zero, deterministic
// given the stream.
struct Mlp {
  struct Layer {
    Param W;
    Param b;
  };

  std::vector<Layer> layers;
  Act act = Act::Tanh;

  Mlp() = default;

  Mlp(const std::vector<int>& sizes, Act activation, RandomStream& rng)
      : act(activation) {
    ad::check(sizes.size() >= 2, "Mlp: need at least input and output size");
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
      ad::check(sizes[i] > 0 && sizes[i + 1] > 0, "Mlp: sizes must be positive");
      const int fan_in = sizes[i];
      const int fan_out = sizes[i + 1];
      const double limit = 1.0 / std::sqrt(static_cast<double>(fan_in));
      Mat W(fan_out, fan_in);
      for (int r = 0; r < fan_out; ++r)
        for (int c = 0; c < fan_in; ++c) W(r, c) = rng.uniform_range(-limit, limit);
      Layer layer;
      layer.W = Param(std::move(W));
      layer.b = Param(Mat::Zero(fan_out, 1));
      layers.push_back(std::move(layer));
    }
  }

  int input_dim() const { return static_cast<int>(layers.front().W.value.cols()); }
  int output_dim() const { return static_cast<int>(layers.back().W.value.rows()); }

  void collect_params(std::vector<Param*>& out) {
    for (auto& l : layers) {
      out.push_back(&l.W);
      out.push_back(&l.b);
    }
  }

  // Tape-free forward over a (dim x batch) matrix. Same math as the graph
  // path so sampling-time values agree with update-time recomputation.
  struct RawDetail {
    Mat out;
    Mat first_hidden;  // post-activation
    Mat last_hidden;
  };

  RawDetail forward_raw_detail(const Mat& x) const {
    ad::check(x.rows() == input_dim(), "Mlp: input dimension mismatch");
    RawDetail d;
    Mat h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = (layers[i].W.value * h).colwise() + Vec(layers[i].b.value.col(0));
      if (i + 1 < layers.size()) {
        if (act == Act::Tanh)
          h = h.array().tanh();
        else
          h = h.unaryExpr([](double v) { return ad::math::gelu(v); });
        if (i == 0) d.first_hidden = h;
        d.last_hidden = h;
      }
    }
    d.out = h;
    return d;
  }

  Mat forward_raw(const Mat& x) const { return forward_raw_detail(x).out; }

  Mat forward_raw_hidden(const Mat& x, Mat& first_hidden) const {
    RawDetail d = forward_raw_detail(x);
    first_hidden = d.first_hidden;
    return d.out;
  }

  struct GraphDetail {
    Var out;
    Var first_hidden;
    Var last_hidden;
  };

  GraphDetail forward_detail(Tape& t, Var x) {
    ad::check(t.value(x).rows() == input_dim(), "Mlp: input dimension mismatch");
    GraphDetail d;
    Var h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto& l = layers[i];
      h = t.linear(l.W, l.b, h);
      if (i + 1 < layers.size()) {
        h = (act == Act::Tanh) ? t.tanh(h) : t.gelu(h);
        if (i == 0) d.first_hidden = h;
        d.last_hidden = h;
      }
    }
    d.out = h;
    return d;
  }

  Var forward(Tape& t, Var x) { return forward_detail(t, x).out; }

  Var forward_hidden(Tape& t, Var x, Var& first_hidden) {
    GraphDetail d = forward_detail(t, x);
    first_hidden = d.first_hidden;
    return d.out;
  }
};

}  // namespace marlcpc
