#pragma once

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace backflush {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Rows [offset, offset + length) of a packed activation matrix belong to one sequence.
struct Segment {
  Eigen::Index offset = 0;
  Eigen::Index length = 0;
};

/// Matrix-valued reverse-mode differentiation tape.
///
/// Every operation appends a node holding its value and a pullback closure.
/// Nodes are created in topological order, so `backward` simply walks the
/// tape in reverse. Gradients are only accumulated into nodes that depend on
/// at least one parameter leaf.
template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;

  struct Var {
    int id = -1;
  };

  Var constant(Mat value) { return push(std::move(value), false); }
  Var parameter(const Mat& value) { return push(value, true); }

  const Mat& value(Var v) const { return nodes_[v.id].value; }
  Scalar scalar(Var v) const { return nodes_[v.id].value(0, 0); }

  /// Gradient of the last `backward` root with respect to `v` (zero if unreached).
  Mat grad(Var v) const {
    const auto& n = nodes_[v.id];
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  Var matmul(Var a, Var b) {
    Var out = push(value(a) * value(b), needs(a) || needs(b));
    pullback(out, [this, a, b, out] {
      const Mat& g = nodes_[out.id].grad;
      if (needs(a)) accumulate(a, g * value(b).transpose());
      if (needs(b)) accumulate(b, value(a).transpose() * g);
    });
    return out;
  }

  Var add(Var a, Var b) {
    Var out = push(value(a) + value(b), needs(a) || needs(b));
    pullback(out, [this, a, b, out] {
      const Mat& g = nodes_[out.id].grad;
      if (needs(a)) accumulate(a, g);
      if (needs(b)) accumulate(b, g);
    });
    return out;
  }

  /// x (n x k) plus a 1 x k row broadcast to every row.
  Var add_bias(Var x, Var bias) {
    Mat v = value(x);
    v.rowwise() += value(bias).row(0);
    Var out = push(std::move(v), needs(x) || needs(bias));
    pullback(out, [this, x, bias, out] {
      const Mat& g = nodes_[out.id].grad;
      if (needs(x)) accumulate(x, g);
      if (needs(bias)) accumulate(bias, g.colwise().sum());
    });
    return out;
  }

  Var scale(Var a, Scalar c) {
    Var out = push(value(a) * c, needs(a));
    pullback(out, [this, a, c, out] { accumulate(a, nodes_[out.id].grad * c); });
    return out;
  }

  /// Scalar min(a, ceiling); the gradient is cut above the ceiling.
  Var clamp_max(Var a, Scalar ceiling) {
    const bool clipped = scalar(a) > ceiling;
    Mat v = value(a);
    if (clipped) v(0, 0) = ceiling;
    Var out = push(std::move(v), needs(a) && !clipped);
    pullback(out, [this, a, out] { accumulate(a, nodes_[out.id].grad); });
    return out;
  }

  /// Row lookup: out.row(i) = table.row(ids[i]).
  Var embed(Var table, std::span<const int> ids) {
    const Mat& t = value(table);
    Mat v(static_cast<Eigen::Index>(ids.size()), t.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) v.row(static_cast<Eigen::Index>(i)) = t.row(ids[i]);
    Var out = push(std::move(v), needs(table));
    pullback(out, [this, table, idx = std::vector<int>(ids.begin(), ids.end()), out] {
      const Mat& g = nodes_[out.id].grad;
      Mat& gt = grad_ref(table);
      for (std::size_t i = 0; i < idx.size(); ++i) gt.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    });
    return out;
  }

  /// Tanh-approximated GELU, elementwise.
  Var gelu(Var x) {
    const Mat& in = value(x);
    const Scalar c = static_cast<Scalar>(0.7978845608028654);  // sqrt(2 / pi)
    const Scalar k = static_cast<Scalar>(0.044715);
    Mat th = (c * (in.array() + k * in.array().cube())).tanh().matrix();
    Mat v = (Scalar(0.5) * in.array() * (Scalar(1) + th.array())).matrix();
    Var out = push(std::move(v), needs(x));
    pullback(out, [this, x, th = std::move(th), c, k, out] {
      const auto& in = value(x).array();
      const auto d = Scalar(0.5) * (Scalar(1) + th.array()) +
                     Scalar(0.5) * in * (Scalar(1) - th.array().square()) * c *
                         (Scalar(1) + Scalar(3) * k * in.square());
      accumulate(x, (nodes_[out.id].grad.array() * d).matrix());
    });
    return out;
  }

  /// Per-row layer normalization with learned 1 x k gain and bias.
  Var layer_norm(Var x, Var gain, Var bias, Scalar eps = Scalar(1e-5)) {
    const Mat& in = value(x);
    const Eigen::Index k = in.cols();
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(in.rows());
    Mat xhat(in.rows(), k);
    for (Eigen::Index r = 0; r < in.rows(); ++r) {
      const Scalar mean = in.row(r).mean();
      const Scalar var = (in.row(r).array() - mean).square().mean();
      inv_std(r) = Scalar(1) / std::sqrt(var + eps);
      xhat.row(r) = (in.row(r).array() - mean) * inv_std(r);
    }
    Mat v = (xhat.array().rowwise() * value(gain).row(0).array()).matrix();
    v.rowwise() += value(bias).row(0);
    Var out = push(std::move(v), needs(x) || needs(gain) || needs(bias));
    pullback(out, [this, x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), out] {
      const Mat& g = nodes_[out.id].grad;
      if (needs(gain)) accumulate(gain, (g.array() * xhat.array()).colwise().sum().matrix());
      if (needs(bias)) accumulate(bias, g.colwise().sum());
      if (needs(x)) {
        Mat dxhat = (g.array().rowwise() * value(gain).row(0).array()).matrix();
        Mat dx(g.rows(), g.cols());
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          const Scalar m1 = dxhat.row(r).mean();
          const Scalar m2 = (dxhat.row(r).array() * xhat.row(r).array()).mean();
          dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
        }
        accumulate(x, dx);
      }
    });
    return out;
  }

  /// Multi-head causal self-attention over packed sequences.
  /// `qkv` is n x 3d laid out as [Q | K | V]; returns the n x d head concatenation.
  Var causal_attention(Var qkv, std::span<const Segment> segments, int n_heads) {
    const Mat& in = value(qkv);
    const Eigen::Index d = in.cols() / 3;
    const Eigen::Index dh = d / n_heads;
    const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
    Mat v = Mat::Zero(in.rows(), d);
    std::vector<Mat> probs;
    probs.reserve(segments.size() * static_cast<std::size_t>(n_heads));
    for (const auto& s : segments) {
      for (int h = 0; h < n_heads; ++h) {
        const auto q = in.block(s.offset, h * dh, s.length, dh);
        const auto kk = in.block(s.offset, d + h * dh, s.length, dh);
        const auto vv = in.block(s.offset, 2 * d + h * dh, s.length, dh);
        Mat scores = (q * kk.transpose()) * inv_sqrt;
        for (Eigen::Index i = 0; i < s.length; ++i) {
          const Scalar mx = scores.row(i).head(i + 1).maxCoeff();
          Scalar sum = 0;
          for (Eigen::Index j = 0; j <= i; ++j) {
            scores(i, j) = std::exp(scores(i, j) - mx);
            sum += scores(i, j);
          }
          for (Eigen::Index j = 0; j <= i; ++j) scores(i, j) /= sum;
          for (Eigen::Index j = i + 1; j < s.length; ++j) scores(i, j) = 0;
        }
        v.block(s.offset, h * dh, s.length, dh) = scores * vv;
        probs.push_back(std::move(scores));
      }
    }
    Var out = push(std::move(v), needs(qkv));
    pullback(out, [this, qkv, segs = std::vector<Segment>(segments.begin(), segments.end()), n_heads, d, dh,
                   inv_sqrt, probs = std::move(probs), out] {
      const Mat& g = nodes_[out.id].grad;
      const Mat& in = value(qkv);
      Mat& gin = grad_ref(qkv);
      std::size_t p = 0;
      for (const auto& s : segs) {
        for (int h = 0; h < n_heads; ++h, ++p) {
          const Mat& P = probs[p];
          const auto q = in.block(s.offset, h * dh, s.length, dh);
          const auto kk = in.block(s.offset, d + h * dh, s.length, dh);
          const auto vv = in.block(s.offset, 2 * d + h * dh, s.length, dh);
          const auto go = g.block(s.offset, h * dh, s.length, dh);
          gin.block(s.offset, 2 * d + h * dh, s.length, dh).noalias() += P.transpose() * go;
          Mat dP = go * vv.transpose();
          Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rowdot = (dP.array() * P.array()).rowwise().sum();
          Mat dS = (P.array() * (dP.colwise() - rowdot).array()).matrix() * inv_sqrt;
          gin.block(s.offset, h * dh, s.length, dh).noalias() += dS * kk;
          gin.block(s.offset, d + h * dh, s.length, dh).noalias() += dS.transpose() * q;
        }
      }
    });
    return out;
  }

  /// Weighted mean token cross-entropy: sum_i w_i * -log softmax(logits_i)[t_i] / sum_i w_i.
  /// Rows with zero weight are skipped. The log-likelihood is accumulated in double.
  Var cross_entropy(Var logits, std::span<const int> targets, std::span<const Scalar> weights) {
    const Mat& z = value(logits);
    double total_w = 0;
    for (Scalar w : weights) total_w += static_cast<double>(w);
    if (total_w <= 0) throw std::invalid_argument("cross_entropy: no weighted target rows");
    Mat probs = Mat::Zero(z.rows(), z.cols());
    double nll = 0;
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      const Scalar w = weights[static_cast<std::size_t>(r)];
      if (w == Scalar(0)) continue;
      const Scalar mx = z.row(r).maxCoeff();
      probs.row(r) = (z.row(r).array() - mx).exp();
      const Scalar sum = probs.row(r).sum();
      probs.row(r) /= sum;
      const double logp = static_cast<double>(z(r, targets[static_cast<std::size_t>(r)]) - mx) -
                          std::log(static_cast<double>(sum));
      nll -= static_cast<double>(w) * logp;
    }
    Mat v(1, 1);
    v(0, 0) = static_cast<Scalar>(nll / total_w);
    exact_.emplace_back(static_cast<int>(nodes_.size()), nll / total_w);
    Var out = push(std::move(v), needs(logits));
    pullback(out, [this, logits, probs = std::move(probs), tg = std::vector<int>(targets.begin(), targets.end()),
                   ws = std::vector<Scalar>(weights.begin(), weights.end()), total_w, out] {
      const Scalar g = nodes_[out.id].grad(0, 0) / static_cast<Scalar>(total_w);
      Mat& gz = grad_ref(logits);
      for (Eigen::Index r = 0; r < probs.rows(); ++r) {
        const Scalar w = ws[static_cast<std::size_t>(r)];
        if (w == Scalar(0)) continue;
        gz.row(r) += (g * w) * probs.row(r);
        gz(r, tg[static_cast<std::size_t>(r)]) -= g * w;
      }
    });
    return out;
  }

  /// The double-precision value of a cross-entropy node (falls back to the stored scalar).
  double exact(Var v) const {
    for (auto it = exact_.rbegin(); it != exact_.rend(); ++it)
      if (it->first == v.id) return it->second;
    return static_cast<double>(scalar(v));
  }

  /// One row per segment: the mean of that segment's rows.
  Var segment_mean(Var x, std::span<const Segment> segments) {
    const Mat& in = value(x);
    Mat v(static_cast<Eigen::Index>(segments.size()), in.cols());
    for (std::size_t i = 0; i < segments.size(); ++i) {
      const auto& s = segments[i];
      v.row(static_cast<Eigen::Index>(i)) = in.middleRows(s.offset, s.length).colwise().mean();
    }
    Var out = push(std::move(v), needs(x));
    pullback(out, [this, x, segs = std::vector<Segment>(segments.begin(), segments.end()), out] {
      const Mat& g = nodes_[out.id].grad;
      Mat& gx = grad_ref(x);
      for (std::size_t i = 0; i < segs.size(); ++i) {
        const auto& s = segs[i];
        const auto row = g.row(static_cast<Eigen::Index>(i)) / static_cast<Scalar>(s.length);
        gx.middleRows(s.offset, s.length).rowwise() += row;
      }
    });
    return out;
  }

  /// mean_i (1 - cos(h_i, t_i)) over the rows of h against constant targets.
  Var cosine_loss(Var h, const Mat& targets) {
    const Mat& in = value(h);
    const Eigen::Index n = in.rows();
    double total = 0;
    for (Eigen::Index r = 0; r < n; ++r) {
      const Scalar hn = in.row(r).norm();
      const Scalar tn = targets.row(r).norm();
      if (hn == Scalar(0) || tn == Scalar(0)) throw std::domain_error("cosine_loss: zero-norm vector");
      total += 1.0 - static_cast<double>(in.row(r).dot(targets.row(r)) / (hn * tn));
    }
    Mat v(1, 1);
    v(0, 0) = static_cast<Scalar>(total / static_cast<double>(n));
    Var out = push(std::move(v), needs(h));
    pullback(out, [this, h, targets, n, out] {
      const Scalar g = nodes_[out.id].grad(0, 0) / static_cast<Scalar>(n);
      const Mat& in = value(h);
      Mat gh(in.rows(), in.cols());
      for (Eigen::Index r = 0; r < in.rows(); ++r) {
        const Scalar hn = in.row(r).norm();
        const Scalar tn = targets.row(r).norm();
        const Scalar c = in.row(r).dot(targets.row(r)) / (hn * tn);
        gh.row(r) = -g * (targets.row(r) / (hn * tn) - c * in.row(r) / (hn * hn));
      }
      accumulate(h, gh);
    });
    return out;
  }

  /// Runs the reverse sweep from a 1 x 1 root.
  void backward(Var root) {
    for (auto& n : nodes_) n.grad.resize(0, 0);
    auto& r = nodes_[root.id];
    r.grad = Mat::Ones(1, 1);
    for (int i = root.id; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (n.grad.size() != 0 && n.pullback) n.pullback();
    }
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    std::function<void()> pullback;
  };

  Var push(Mat value, bool needs_grad) {
    nodes_.push_back({std::move(value), Mat(), needs_grad, {}});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  template <typename F>
  void pullback(Var out, F&& f) {
    if (nodes_[out.id].needs_grad) nodes_[out.id].pullback = std::forward<F>(f);
  }

  bool needs(Var v) const { return nodes_[v.id].needs_grad; }

  Mat& grad_ref(Var v) {
    auto& n = nodes_[v.id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  template <typename Derived>
  void accumulate(Var v, const Eigen::MatrixBase<Derived>& g) {
    if (!needs(v)) return;
    auto& n = nodes_[v.id];
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::pair<int, double>> exact_;
};

}  // namespace backflush
