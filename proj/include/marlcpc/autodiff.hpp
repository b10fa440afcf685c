#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace marlcpc::ad {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

// Learnable tensor. Gradients accumulate across backward passes until the
// optimizer consumes and clears them.
struct Param {
  Mat value;
  Mat grad;

  Param() = default;
  explicit Param(Mat v) : value(std::move(v)) {
    grad = Mat::Zero(value.rows(), value.cols());
  }
  void zero_grad() { grad.setZero(); }
};

// --------------------------------------------------------------------------
// Elementwise math shared by the tape ops and the tape-free forward path.
// Keeping one definition per function guarantees the two paths agree.
// --------------------------------------------------------------------------
namespace math {

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
}

inline double gelu_deriv(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                  : std::exp(x) / (1.0 + std::exp(x));
}

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Column-wise softmax with max-shift; safe for logits up to ~1e300.
inline Mat softmax_cols(const Mat& logits) {
  Mat out(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const double m = logits.col(j).maxCoeff();
    out.col(j) = (logits.col(j).array() - m).exp();
    out.col(j) /= out.col(j).sum();
  }
  return out;
}

inline Mat log_softmax_cols(const Mat& logits) {
  Mat out(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const double m = logits.col(j).maxCoeff();
    const double lse = std::log((logits.col(j).array() - m).exp().sum()) + m;
    out.col(j) = logits.col(j).array() - lse;
  }
  return out;
}

}  // namespace math

// --------------------------------------------------------------------------
// Reverse-mode tape over matrix-valued nodes.
//
// Node values are (dim x batch) matrices; scalars are 1x1. The tape order is
// a topological order by construction, so backward is a single reverse scan.
// Graphs are rebuilt per forward pass.
// --------------------------------------------------------------------------

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  struct Node {
    Mat value;
    Mat grad;
    bool has_grad = false;
    bool needs_grad = false;  // some ancestor is a Param
    std::function<void(Tape&, const Node&)> back;
  };

  void clear() { nodes_.clear(); }
  int size() const { return static_cast<int>(nodes_.size()); }

  const Mat& value(Var v) const { return node(v).value; }

  // Gradient of the last backward root w.r.t. this node (zeros if untouched).
  Mat grad(Var v) const {
    const Node& n = node(v);
    if (n.has_grad) return n.grad;
    return Mat::Zero(n.value.rows(), n.value.cols());
  }

  // ---- leaves ----

  template <typename Derived>
  Var constant(const Eigen::MatrixBase<Derived>& v) {
    return push(Mat(v), false, nullptr);
  }

  Var scalar(double x) { return push(Mat::Constant(1, 1, x), false, nullptr); }

  // Parameter leaf: backward adds straight into the parameter's accumulator.
  Var param(Param& p) {
    Param* pp = &p;
    return push(p.value, true,
                [pp](Tape&, const Node& n) { pp->grad += n.grad; });
  }

  // ---- parameterized ops ----

  // W*x + b (b broadcast over columns).
  Var linear(Param& W, Param& b, Var x) {
    const Mat& X = value(x);
    check(W.value.cols() == X.rows(), "linear: dimension mismatch");
    check(b.value.rows() == W.value.rows() && b.value.cols() == 1,
          "linear: bias shape mismatch");
    Mat out = (W.value * X).colwise() + Eigen::VectorXd(b.value.col(0));
    Param* Wp = &W;
    Param* bp = &b;
    const int xi = x.id;
    const bool xneeds = node(x).needs_grad;
    return push(std::move(out), true, [Wp, bp, xi, xneeds](Tape& t, const Node& n) {
      const Mat& X = t.nodes_[xi].value;
      Wp->grad.noalias() += n.grad * X.transpose();
      bp->grad.col(0).noalias() += n.grad.rowwise().sum();
      if (xneeds) t.accumulate(xi, Wp->value.transpose() * n.grad);
    });
  }

  // ---- unary elementwise ----

  Var tanh(Var x) {
    Mat out = value(x).array().tanh();
    return unary(x, std::move(out), [](const Mat& y, const Mat&, const Mat& g) {
      return Mat((1.0 - y.array().square()) * g.array());
    });
  }

  Var gelu(Var x) {
    Mat out = value(x).unaryExpr([](double v) { return math::gelu(v); });
    return unary(x, std::move(out), [](const Mat&, const Mat& xv, const Mat& g) {
      return Mat(xv.unaryExpr([](double v) { return math::gelu_deriv(v); }).array() *
                 g.array());
    });
  }

  Var sigmoid(Var x) {
    Mat out = value(x).unaryExpr([](double v) { return math::sigmoid(v); });
    return unary(x, std::move(out), [](const Mat& y, const Mat&, const Mat& g) {
      return Mat(y.array() * (1.0 - y.array()) * g.array());
    });
  }

  Var exp(Var x) {
    Mat out = value(x).array().exp();
    return unary(x, std::move(out), [](const Mat& y, const Mat&, const Mat& g) {
      return Mat(y.array() * g.array());
    });
  }

  Var log(Var x) {
    Mat out = value(x).array().log();
    return unary(x, std::move(out), [](const Mat&, const Mat& xv, const Mat& g) {
      return Mat(g.array() / xv.array());
    });
  }

  Var square(Var x) {
    Mat out = value(x).array().square();
    return unary(x, std::move(out), [](const Mat&, const Mat& xv, const Mat& g) {
      return Mat(2.0 * xv.array() * g.array());
    });
  }

  Var scale(Var x, double c) {
    Mat out = c * value(x);
    return unary(x, std::move(out), [c](const Mat&, const Mat&, const Mat& g) {
      return Mat(c * g);
    });
  }

  Var add_scalar(Var x, double c) {
    Mat out = value(x).array() + c;
    return unary(x, std::move(out), [](const Mat&, const Mat&, const Mat& g) {
      return g;
    });
  }

  // max(x, c) elementwise; gradient passes only where x > c.
  Var clamp_min(Var x, double c) {
    Mat out = value(x).cwiseMax(c);
    return unary(x, std::move(out), [c](const Mat&, const Mat& xv, const Mat& g) {
      return Mat((xv.array() > c).cast<double>() * g.array());
    });
  }

  // clip(x, lo, hi); gradient passes only strictly inside the band.
  Var clip(Var x, double lo, double hi) {
    Mat out = value(x).cwiseMax(lo).cwiseMin(hi);
    return unary(x, std::move(out), [lo, hi](const Mat&, const Mat& xv, const Mat& g) {
      return Mat(((xv.array() > lo) && (xv.array() < hi)).cast<double>() * g.array());
    });
  }

  // ---- binary elementwise ----

  Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    return binary(a, b, value(a) + value(b),
                  [](const Mat& g, const Mat&, const Mat&) { return g; },
                  [](const Mat& g, const Mat&, const Mat&) { return g; });
  }

  Var sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    return binary(a, b, value(a) - value(b),
                  [](const Mat& g, const Mat&, const Mat&) { return g; },
                  [](const Mat& g, const Mat&, const Mat&) { return Mat(-g); });
  }

  Var mul(Var a, Var b) {
    check_same_shape(a, b, "mul");
    return binary(a, b, Mat(value(a).array() * value(b).array()),
                  [](const Mat& g, const Mat&, const Mat& bv) {
                    return Mat(g.array() * bv.array());
                  },
                  [](const Mat& g, const Mat& av, const Mat&) {
                    return Mat(g.array() * av.array());
                  });
  }

  Var mul_const(Var a, const Mat& c) {
    check(value(a).rows() == c.rows() && value(a).cols() == c.cols(),
          "mul_const: shape mismatch");
    Mat cc = c;
    Mat out = value(a).array() * c.array();
    return unary(a, std::move(out), [cc](const Mat&, const Mat&, const Mat& g) {
      return Mat(g.array() * cc.array());
    });
  }

  Var sub_const(Var a, const Mat& c) {
    check(value(a).rows() == c.rows() && value(a).cols() == c.cols(),
          "sub_const: shape mismatch");
    Mat out = value(a) - c;
    return unary(a, std::move(out), [](const Mat&, const Mat&, const Mat& g) {
      return g;
    });
  }

  // min(a, b) elementwise; gradient follows the selected branch (a on ties).
  Var minimum(Var a, Var b) {
    check_same_shape(a, b, "minimum");
    Mat sel = (value(a).array() <= value(b).array()).cast<double>();
    Mat out = value(a).cwiseMin(value(b));
    return binary(a, b, std::move(out),
                  [sel](const Mat& g, const Mat&, const Mat&) {
                    return Mat(g.array() * sel.array());
                  },
                  [sel](const Mat& g, const Mat&, const Mat&) {
                    return Mat(g.array() * (1.0 - sel.array()));
                  });
  }

  // ---- column-wise distribution ops ----

  Var softmax(Var x) {
    Mat out = math::softmax_cols(value(x));
    return unary(x, std::move(out), [](const Mat& y, const Mat&, const Mat& g) {
      Mat gx(y.rows(), y.cols());
      for (Eigen::Index j = 0; j < y.cols(); ++j) {
        const double dot = g.col(j).dot(y.col(j));
        gx.col(j) = y.col(j).array() * (g.col(j).array() - dot);
      }
      return gx;
    });
  }

  Var log_softmax(Var x) {
    Mat out = math::log_softmax_cols(value(x));
    return unary(x, std::move(out), [](const Mat& y, const Mat&, const Mat& g) {
      Mat gx(y.rows(), y.cols());
      for (Eigen::Index j = 0; j < y.cols(); ++j) {
        const double gsum = g.col(j).sum();
        gx.col(j) = g.col(j) - gsum * y.col(j).array().exp().matrix();
      }
      return gx;
    });
  }

  // out(0, j) = x(rows[j], j). One picked entry per column.
  Var gather(Var x, const std::vector<int>& rows) {
    const Mat& X = value(x);
    check(static_cast<int>(rows.size()) == X.cols(), "gather: index count mismatch");
    Mat out(1, X.cols());
    for (Eigen::Index j = 0; j < X.cols(); ++j) {
      check(rows[j] >= 0 && rows[j] < X.rows(), "gather: row index out of range");
      out(0, j) = X(rows[j], j);
    }
    std::vector<int> idx = rows;
    return unary(x, std::move(out), [idx](const Mat&, const Mat& xv, const Mat& g) {
      Mat gx = Mat::Zero(xv.rows(), xv.cols());
      for (Eigen::Index j = 0; j < xv.cols(); ++j) gx(idx[j], j) = g(0, j);
      return gx;
    });
  }

  // ---- reductions / structure ----

  // 1 x B row of column sums.
  Var sum_rows(Var x) {
    Mat out = value(x).colwise().sum();
    return unary(x, std::move(out), [](const Mat&, const Mat& xv, const Mat& g) {
      Mat gx(xv.rows(), xv.cols());
      gx = Mat::Ones(xv.rows(), 1) * g;
      return gx;
    });
  }

  Var sum_all(Var x) {
    Mat out = Mat::Constant(1, 1, value(x).sum());
    return unary(x, std::move(out), [](const Mat&, const Mat& xv, const Mat& g) {
      return Mat(Mat::Constant(xv.rows(), xv.cols(), g(0, 0)));
    });
  }

  Var mean_all(Var x) {
    const double n = static_cast<double>(value(x).size());
    Mat out = Mat::Constant(1, 1, value(x).sum() / n);
    return unary(x, std::move(out), [n](const Mat&, const Mat& xv, const Mat& g) {
      return Mat(Mat::Constant(xv.rows(), xv.cols(), g(0, 0) / n));
    });
  }

  // Stack inputs vertically (shared batch width).
  Var concat_rows(const std::vector<Var>& parts) {
    check(!parts.empty(), "concat_rows: empty");
    const Eigen::Index cols = value(parts[0]).cols();
    Eigen::Index rows = 0;
    bool needs = false;
    for (Var p : parts) {
      check(value(p).cols() == cols, "concat_rows: column mismatch");
      rows += value(p).rows();
      needs = needs || node(p).needs_grad;
    }
    Mat out(rows, cols);
    Eigen::Index r = 0;
    for (Var p : parts) {
      out.middleRows(r, value(p).rows()) = value(p);
      r += value(p).rows();
    }
    std::vector<std::pair<int, Eigen::Index>> blocks;
    for (Var p : parts) blocks.emplace_back(p.id, value(p).rows());
    return push(std::move(out), needs, [blocks](Tape& t, const Node& n) {
      Eigen::Index r = 0;
      for (const auto& [pid, nrows] : blocks) {
        if (t.nodes_[pid].needs_grad) t.accumulate(pid, n.grad.middleRows(r, nrows));
        r += nrows;
      }
    });
  }

  // ---- special ops ----

  // Forward value is exactly x; no gradient flows upstream.
  Var stop_gradient(Var x) { return push(value(x), false, nullptr); }

  // Straight-through message node, scalar broadcast: forward value is exactly
  // the one-hot block; backward adds the column-sum of the incoming gradient
  // to the scalar log-probability of the sampled symbol ("onehot + logq -
  // sg[logq]" with the scalar logq broadcast across the block).
  Var straight_through(const Mat& onehots, Var logq_row) {
    check(value(logq_row).rows() == 1 && value(logq_row).cols() == onehots.cols(),
          "straight_through: logq must be 1 x batch");
    const int li = logq_row.id;
    const bool needs = node(logq_row).needs_grad;
    return push(Mat(onehots), needs, [li](Tape& t, const Node& n) {
      if (t.nodes_[li].needs_grad) t.accumulate(li, n.grad.colwise().sum());
    });
  }

  // Straight-through message node, vector form: "onehot + logp - sg[logp]"
  // with the full log-pmf block, so each component's gradient flows into its
  // own log-probability. Forward value is exactly the one-hot block.
  Var straight_through_vector(const Mat& onehots, Var logp_block) {
    check(value(logp_block).rows() == onehots.rows() &&
              value(logp_block).cols() == onehots.cols(),
          "straight_through_vector: log-pmf block shape mismatch");
    const int li = logp_block.id;
    const bool needs = node(logp_block).needs_grad;
    return push(Mat(onehots), needs, [li](Tape& t, const Node& n) {
      if (t.nodes_[li].needs_grad) t.accumulate(li, n.grad);
    });
  }

  // Sum over components of independent-Bernoulli log-likelihoods per column:
  // out(0,j) = sum_c [ x_cj * log sigmoid(l_cj) + (1-x_cj) * log(1-sigmoid(l_cj)) ]
  // computed in softplus form for stability.
  Var bernoulli_loglik(Var logits, const Mat& targets) {
    const Mat& L = value(logits);
    check(L.rows() == targets.rows() && L.cols() == targets.cols(),
          "bernoulli_loglik: shape mismatch");
    Mat out(1, L.cols());
    for (Eigen::Index j = 0; j < L.cols(); ++j) {
      double acc = 0.0;
      for (Eigen::Index c = 0; c < L.rows(); ++c) {
        const double l = L(c, j);
        const double x = targets(c, j);
        acc -= x * math::softplus(-l) + (1.0 - x) * math::softplus(l);
      }
      out(0, j) = acc;
    }
    Mat T = targets;
    return unary(logits, std::move(out), [T](const Mat&, const Mat& lv, const Mat& g) {
      Mat gx(lv.rows(), lv.cols());
      for (Eigen::Index j = 0; j < lv.cols(); ++j)
        for (Eigen::Index c = 0; c < lv.rows(); ++c)
          gx(c, j) = g(0, j) * (T(c, j) - math::sigmoid(lv(c, j)));
      return gx;
    });
  }

  // ---- backward ----

  // Seeds the (scalar) root with gradient 1 and runs a reverse scan.
  // Parameter gradients accumulate; node gradients are local to this tape.
  void backward(Var root) {
    Node& r = node(root);
    check(r.value.rows() == 1 && r.value.cols() == 1,
          "backward: root must be scalar");
    ensure_grad(root.id);
    r.grad(0, 0) += 1.0;
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.has_grad || !n.back) continue;
      check(n.grad.allFinite(), "backward: non-finite gradient encountered");
      n.back(*this, n);
    }
  }

  void accumulate(int id, const Mat& g) {
    ensure_grad(id);
    nodes_[id].grad += g;
  }

 private:
  std::vector<Node> nodes_;

  Node& node(Var v) {
    check(v.valid() && v.id < size(), "invalid Var");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    check(v.valid() && v.id < size(), "invalid Var");
    return nodes_[v.id];
  }

  void ensure_grad(int id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Mat::Zero(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
  }

  Var push(Mat value, bool needs_grad, std::function<void(Tape&, const Node&)> back) {
    check(value.allFinite(), "node value is not finite");
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{size() - 1};
  }

  // Unary op helper: dfn(out_value, in_value, out_grad) -> in_grad.
  Var unary(Var x, Mat out,
            std::function<Mat(const Mat&, const Mat&, const Mat&)> dfn) {
    const int xi = x.id;
    const bool needs = node(x).needs_grad;
    if (!needs) return push(std::move(out), false, nullptr);
    return push(std::move(out), true, [xi, dfn](Tape& t, const Node& n) {
      t.accumulate(xi, dfn(n.value, t.nodes_[xi].value, n.grad));
    });
  }

  // Binary op helper: each dfn(out_grad, a_value, b_value) -> input grad.
  Var binary(Var a, Var b, Mat out,
             std::function<Mat(const Mat&, const Mat&, const Mat&)> da,
             std::function<Mat(const Mat&, const Mat&, const Mat&)> db) {
    const int ai = a.id;
    const int bi = b.id;
    const bool aneeds = node(a).needs_grad;
    const bool bneeds = node(b).needs_grad;
    if (!aneeds && !bneeds) return push(std::move(out), false, nullptr);
    return push(std::move(out), true, [ai, bi, aneeds, bneeds, da, db](Tape& t, const Node& n) {
      const Mat& av = t.nodes_[ai].value;
      const Mat& bv = t.nodes_[bi].value;
      if (aneeds) t.accumulate(ai, da(n.grad, av, bv));
      if (bneeds) t.accumulate(bi, db(n.grad, av, bv));
    });
  }

  void check_same_shape(Var a, Var b, const char* op) {
    check(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(),
          std::string(op) + ": shape mismatch");
  }
};

}  // namespace marlcpc::ad
