#pragma once

// Tape-based reverse-mode differentiation over whole matrices, plus Adam.
//
// A Graph records nodes in creation order, so the tape is topologically
// sorted by construction and backward is a single reverse sweep. Shapes are
// validated when an op is recorded; backward never sees a shape error.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "ivit/matrix.hpp"
#include "ivit/numerics.hpp"
#include "ivit/tensors.hpp"

namespace ivit {

struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
};

inline constexpr double kLayerNormEps = 1e-5;

enum class Op {
  Leaf,
  MatMul,
  Transpose,
  Add,
  AddRow,
  Subtract,
  Scale,
  Multiply,
  SoftmaxRows,
  Gelu,
  Relu,
  LayerNorm,
  MeanPoolRows,
  MeanPoolBlocks,
  Sum,
  MseToConstant,
  SoftmaxCrossEntropy,
  SliceCols,
  ConcatCols,
  TileRows,
  BlockMatMulNT,
  BlockMatMul,
  DepthwiseConvWrap,
};

// tanh-approximated GELU. tanh is evaluated as 1 - 2 / (exp(2u) + 1) so that
// Eigen's vectorized exp does the work; libm's scalar tanh dominated the
// training profile.
inline Eigen::ArrayXd gelu_tanh_term(const double* x, std::size_t n) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  const Eigen::Map<const Eigen::ArrayXd> xa(x, static_cast<Eigen::Index>(n));
  const Eigen::ArrayXd two_u = 2.0 * c * (xa + 0.044715 * xa.cube());
  return 1.0 - 2.0 / (two_u.exp() + 1.0);
}

namespace detail {

/// Rows [row0, row0 + rows) of m as an Eigen view.
inline MapR block(Matrix& m, std::size_t row0, std::size_t rows) {
  return MapR(m.data().data() + row0 * m.cols(), static_cast<Eigen::Index>(rows),
              static_cast<Eigen::Index>(m.cols()));
}
inline MapC block(const Matrix& m, std::size_t row0, std::size_t rows) {
  return MapC(m.data().data() + row0 * m.cols(), static_cast<Eigen::Index>(rows),
              static_cast<Eigen::Index>(m.cols()));
}

}  // namespace detail

class Gradients {
 public:
  Gradients(std::vector<Matrix> grads, NamedTensors by_name)
      : grads_(std::move(grads)), by_name_(std::move(by_name)) {}

  const Matrix& operator[](Var v) const { return grads_.at(v.id); }
  /// Gradients of every trainable parameter, keyed by parameter name.
  const NamedTensors& parameters() const { return by_name_; }

 private:
  std::vector<Matrix> grads_;
  NamedTensors by_name_;
};

class Graph {
 public:
  /// Constant input; never receives a gradient.
  Var input(Matrix value) { return push(Op::Leaf, {}, std::move(value), false); }

  /// Named leaf. Only trainable parameters receive gradients.
  Var parameter(std::string name, Matrix value, bool trainable = true) {
    Var v = push(Op::Leaf, {}, std::move(value), trainable);
    nodes_[v.id].name = std::move(name);
    nodes_[v.id].is_parameter = true;
    return v;
  }

  const Matrix& value(Var v) const { return node(v).value; }
  std::size_t size() const { return nodes_.size(); }

  Var matmul(Var a, Var b) {
    return push(Op::MatMul, {a.id, b.id}, ivit::matmul(value(a), value(b)));
  }

  Var transpose(Var a) { return push(Op::Transpose, {a.id}, ivit::transpose(value(a))); }

  Var add(Var a, Var b) { return push(Op::Add, {a.id, b.id}, ivit::add(value(a), value(b))); }

  /// x + 1 * row, broadcasting a 1 x C row over every row of x.
  Var add_row(Var x, Var row) {
    const Matrix& xv = value(x);
    const Matrix& rv = value(row);
    require(rv.rows() == 1 && rv.cols() == xv.cols(),
            "add_row: expected 1x" + std::to_string(xv.cols()) + " row, got " + rv.shape_string());
    Matrix out = xv;
    for (std::size_t r = 0; r < out.rows(); ++r)
      for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += rv(0, c);
    return push(Op::AddRow, {x.id, row.id}, std::move(out));
  }

  Var subtract(Var a, Var b) {
    return push(Op::Subtract, {a.id, b.id}, ivit::subtract(value(a), value(b)));
  }

  Var scale(Var a, double s) {
    Var v = push(Op::Scale, {a.id}, ivit::scale(value(a), s));
    nodes_[v.id].scalar = s;
    return v;
  }

  Var multiply(Var a, Var b) {
    return push(Op::Multiply, {a.id, b.id}, hadamard(value(a), value(b)));
  }

  Var softmax_rows(Var a, double sigma) {
    Var v = push(Op::SoftmaxRows, {a.id}, ivit::softmax_rows(value(a), sigma));
    nodes_[v.id].scalar = sigma;
    return v;
  }

  Var gelu(Var a) {
    const Matrix& x = value(a);
    Matrix t(x.rows(), x.cols());
    Eigen::Map<Eigen::ArrayXd> ta(t.data().data(), static_cast<Eigen::Index>(t.size()));
    ta = gelu_tanh_term(x.data().data(), x.size());
    Matrix out(x.rows(), x.cols());
    Eigen::Map<Eigen::ArrayXd>(out.data().data(), static_cast<Eigen::Index>(out.size())) =
        0.5 * Eigen::Map<const Eigen::ArrayXd>(x.data().data(), static_cast<Eigen::Index>(x.size())) * (1.0 + ta);
    Var v = push(Op::Gelu, {a.id}, std::move(out));
    nodes_[v.id].cache = std::move(t);
    return v;
  }

  Var relu(Var a) {
    Matrix out = value(a);
    for (double& x : out.data()) x = x > 0.0 ? x : 0.0;
    return push(Op::Relu, {a.id}, std::move(out));
  }

  /// Per-row normalization followed by a learnable 1 x C gain and bias.
  Var layer_norm(Var x, Var gain, Var bias) {
    const Matrix& xv = value(x);
    const std::size_t n = xv.rows(), c = xv.cols();
    require(value(gain).rows() == 1 && value(gain).cols() == c, "layer_norm: gain shape mismatch");
    require(value(bias).rows() == 1 && value(bias).cols() == c, "layer_norm: bias shape mismatch");
    Matrix xhat(n, c);
    std::vector<double> inv_std(n);
    for (std::size_t r = 0; r < n; ++r) {
      auto row = xv.row(r);
      double mean = 0.0;
      for (double v : row) mean += v;
      mean /= static_cast<double>(c);
      double var = 0.0;
      for (double v : row) var += (v - mean) * (v - mean);
      var /= static_cast<double>(c);
      inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEps);
      for (std::size_t j = 0; j < c; ++j) xhat(r, j) = (row[j] - mean) * inv_std[r];
    }
    Matrix out(n, c);
    const Matrix& g = value(gain);
    const Matrix& b = value(bias);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < c; ++j) out(r, j) = xhat(r, j) * g(0, j) + b(0, j);
    Var v = push(Op::LayerNorm, {x.id, gain.id, bias.id}, std::move(out));
    nodes_[v.id].cache = std::move(xhat);
    nodes_[v.id].row_scalars = std::move(inv_std);
    return v;
  }

  /// Mean over rows: N x C -> 1 x C.
  Var mean_pool_rows(Var x) { return mean_pool_blocks(x, 1, Op::MeanPoolRows); }

  /// Mean over each of `blocks` equal consecutive row groups: (B*N) x C -> B x C.
  Var mean_pool_blocks(Var x, std::size_t blocks) { return mean_pool_blocks(x, blocks, Op::MeanPoolBlocks); }

  Var sum(Var x) {
    double s = 0.0;
    for (double v : value(x).data()) s += v;
    return push(Op::Sum, {x.id}, Matrix(1, 1, s));
  }

  /// Mean squared error against a constant target, averaged over all entries.
  Var mse_to_constant(Var x, Matrix target) {
    const Matrix& xv = value(x);
    detail::require_same_shape(xv, target, "mse_to_constant");
    double s = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double d = xv.data()[i] - target.data()[i];
      s += d * d;
    }
    Var v = push(Op::MseToConstant, {x.id}, Matrix(1, 1, s / static_cast<double>(xv.size())));
    nodes_[v.id].cache = std::move(target);
    return v;
  }

  /// Mean over rows of -log softmax(logits)[label].
  Var softmax_cross_entropy(Var logits, std::vector<int> labels) {
    const Matrix& lv = value(logits);
    require(labels.size() == lv.rows(), "softmax_cross_entropy: label count mismatch");
    Matrix probs = ivit::softmax_rows(lv, 1.0);
    double loss = 0.0;
    for (std::size_t r = 0; r < lv.rows(); ++r) {
      require(labels[r] >= 0 && static_cast<std::size_t>(labels[r]) < lv.cols(),
              "softmax_cross_entropy: label out of range");
      auto row = lv.row(r);
      double peak = *std::max_element(row.begin(), row.end());
      double z = 0.0;
      for (double v : row) z += std::exp(v - peak);
      loss += -(row[static_cast<std::size_t>(labels[r])] - peak - std::log(z));
    }
    Var v = push(Op::SoftmaxCrossEntropy, {logits.id},
                 Matrix(1, 1, loss / static_cast<double>(lv.rows())));
    nodes_[v.id].cache = std::move(probs);
    nodes_[v.id].labels = std::move(labels);
    return v;
  }

  Var slice_cols(Var x, std::size_t start, std::size_t width) {
    Var v = push(Op::SliceCols, {x.id}, ivit::slice_cols(value(x), start, width));
    nodes_[v.id].ints = {start, width};
    return v;
  }

  Var concat_cols(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_cols: no inputs");
    const std::size_t rows = value(parts.front()).rows();
    std::size_t cols = 0;
    std::vector<std::size_t> ids;
    for (Var p : parts) {
      require(value(p).rows() == rows, "concat_cols: row count mismatch");
      cols += value(p).cols();
      ids.push_back(p.id);
    }
    Matrix out(rows, cols);
    std::size_t offset = 0;
    for (Var p : parts) {
      const Matrix& pv = value(p);
      for (std::size_t r = 0; r < rows; ++r)
        std::copy(pv.row(r).begin(), pv.row(r).end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(offset));
      offset += pv.cols();
    }
    return push(Op::ConcatCols, std::move(ids), std::move(out));
  }

  /// Stack `times` copies of x vertically.
  Var tile_rows(Var x, std::size_t times) {
    require(times >= 1, "tile_rows: times must be positive");
    const Matrix& xv = value(x);
    Matrix out(xv.rows() * times, xv.cols());
    for (std::size_t t = 0; t < times; ++t)
      std::copy(xv.data().begin(), xv.data().end(),
                out.data().begin() + static_cast<std::ptrdiff_t>(t * xv.size()));
    Var v = push(Op::TileRows, {x.id}, std::move(out));
    nodes_[v.id].ints = {times};
    return v;
  }

  /// Per block b: a_b * b_b^T, blocks stacked vertically.
  /// a: (B*n) x k, b: (B*m) x k -> (B*n) x m.
  Var block_matmul_nt(Var a, Var b, std::size_t blocks) {
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    require(blocks >= 1 && av.rows() % blocks == 0 && bv.rows() % blocks == 0,
            "block_matmul_nt: rows not divisible by block count");
    require(av.cols() == bv.cols(), "block_matmul_nt: inner dimension mismatch");
    const std::size_t n = av.rows() / blocks, m = bv.rows() / blocks;
    Matrix out(av.rows(), m);
    for (std::size_t blk = 0; blk < blocks; ++blk)
      detail::block(out, blk * n, n).noalias() = detail::block(av, blk * n, n) * detail::block(bv, blk * m, m).transpose();
    Var v = push(Op::BlockMatMulNT, {a.id, b.id}, std::move(out));
    nodes_[v.id].ints = {blocks};
    return v;
  }

  /// Per block b: m_b * v_b. m: (B*n) x k, v: (B*k) x d -> (B*n) x d.
  Var block_matmul(Var m, Var v, std::size_t blocks) {
    const Matrix& mv = value(m);
    const Matrix& vv = value(v);
    require(blocks >= 1 && mv.rows() % blocks == 0 && vv.rows() % blocks == 0,
            "block_matmul: rows not divisible by block count");
    const std::size_t n = mv.rows() / blocks, k = vv.rows() / blocks;
    require(mv.cols() == k, "block_matmul: inner dimension mismatch");
    Matrix out(mv.rows(), vv.cols());
    for (std::size_t blk = 0; blk < blocks; ++blk)
      detail::block(out, blk * n, n).noalias() = detail::block(mv, blk * n, n) * detail::block(vv, blk * k, k);
    Var r = push(Op::BlockMatMul, {m.id, v.id}, std::move(out));
    nodes_[r.id].ints = {blocks};
    return r;
  }

  /// Depthwise wrap-around cross-correlation on a token grid. x holds
  /// `blocks` stacked images of grid_h*grid_w tokens (row-major) with C
  /// channels; taps is C x f^2, row c holding channel c's filter.
  Var depthwise_conv_wrap(Var x, Var taps, std::size_t grid_h, std::size_t grid_w, std::size_t blocks) {
    const Matrix& xv = value(x);
    const Matrix& tv = value(taps);
    const std::size_t n = grid_h * grid_w;
    require(xv.rows() == n * blocks, "depthwise_conv_wrap: token count does not match grid");
    require(tv.rows() == xv.cols(), "depthwise_conv_wrap: one filter per channel required");
    const auto f = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(tv.cols()))));
    require(f * f == tv.cols() && f % 2 == 1, "depthwise_conv_wrap: taps must be odd square filters");
    Matrix out(xv.rows(), xv.cols());
    for_each_conv_tap(grid_h, grid_w, f, blocks, [&](std::size_t dst, std::size_t src, std::size_t tap) {
      auto o = out.row(dst);
      auto in = xv.row(src);
      for (std::size_t c = 0; c < o.size(); ++c) o[c] += tv(c, tap) * in[c];
    });
    Var v = push(Op::DepthwiseConvWrap, {x.id, taps.id}, std::move(out));
    nodes_[v.id].ints = {grid_h, grid_w, blocks, f};
    return v;
  }

  /// Reverse sweep from a scalar loss. Parameters the loss does not depend
  /// on receive zero gradients.
  Gradients backward(Var loss) const {
    const Node& ln = node(loss);
    require(ln.value.rows() == 1 && ln.value.cols() == 1, "backward: loss must be a 1x1 scalar");
    std::vector<Matrix> grads(nodes_.size());
    if (ln.requires_grad) grads[loss.id] = Matrix(1, 1, 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      const Node& nd = nodes_[i];
      if (!nd.requires_grad || grads[i].empty() || nd.op == Op::Leaf) continue;
      propagate(i, grads);
    }
    NamedTensors named;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& nd = nodes_[i];
      if (grads[i].empty()) grads[i] = Matrix(nd.value.rows(), nd.value.cols());
      if (nd.is_parameter && nd.requires_grad) named.set(nd.name, grads[i]);
    }
    return Gradients(std::move(grads), std::move(named));
  }

 private:
  struct Node {
    Op op = Op::Leaf;
    std::vector<std::size_t> inputs;
    Matrix value;
    bool requires_grad = false;
    bool is_parameter = false;
    std::string name;
    double scalar = 0.0;
    std::vector<std::size_t> ints;
    Matrix cache;
    std::vector<double> row_scalars;
    std::vector<int> labels;
  };

  template <typename F>
  static void for_each_conv_tap(std::size_t gh, std::size_t gw, std::size_t f, std::size_t blocks, F&& fn) {
    const auto half = static_cast<std::ptrdiff_t>(f / 2);
    const auto h = static_cast<std::ptrdiff_t>(gh), w = static_cast<std::ptrdiff_t>(gw);
    for (std::size_t blk = 0; blk < blocks; ++blk) {
      const std::size_t base = blk * gh * gw;
      for (std::ptrdiff_t i = 0; i < h; ++i)
        for (std::ptrdiff_t j = 0; j < w; ++j)
          for (std::ptrdiff_t u = 0; u < static_cast<std::ptrdiff_t>(f); ++u)
            for (std::ptrdiff_t v = 0; v < static_cast<std::ptrdiff_t>(f); ++v) {
              const std::ptrdiff_t si = ((i + u - half) % h + h) % h;
              const std::ptrdiff_t sj = ((j + v - half) % w + w) % w;
              fn(base + static_cast<std::size_t>(i * w + j), base + static_cast<std::size_t>(si * w + sj),
                 static_cast<std::size_t>(u) * f + static_cast<std::size_t>(v));
            }
    }
  }

  const Node& node(Var v) const {
    require(v.id < nodes_.size(), "graph: invalid node handle");
    return nodes_[v.id];
  }

  Var push(Op op, std::vector<std::size_t> inputs, Matrix value, bool leaf_requires_grad = false) {
    Node nd;
    nd.op = op;
    nd.requires_grad = leaf_requires_grad;
    for (std::size_t in : inputs) {
      require(in < nodes_.size(), "graph: input node does not exist");
      nd.requires_grad = nd.requires_grad || nodes_[in].requires_grad;
    }
    nd.inputs = std::move(inputs);
    nd.value = std::move(value);
    nodes_.push_back(std::move(nd));
    return Var{nodes_.size() - 1};
  }

  Var mean_pool_blocks(Var x, std::size_t blocks, Op op) {
    const Matrix& xv = value(x);
    require(blocks >= 1 && xv.rows() % blocks == 0, "mean_pool: rows not divisible by block count");
    const std::size_t n = xv.rows() / blocks;
    Matrix out(blocks, xv.cols());
    for (std::size_t b = 0; b < blocks; ++b)
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < xv.cols(); ++c) out(b, c) += xv(b * n + r, c);
    for (double& v : out.data()) v /= static_cast<double>(n);
    Var v = push(op, {x.id}, std::move(out));
    nodes_[v.id].ints = {blocks};
    return v;
  }

  void accumulate(std::vector<Matrix>& grads, std::size_t id, Matrix g) const {
    if (!nodes_[id].requires_grad) return;
    if (grads[id].empty())
      grads[id] = std::move(g);
    else
      add_inplace(grads[id], g);
  }

  bool wants(std::size_t id) const { return nodes_[id].requires_grad; }

  void propagate(std::size_t i, std::vector<Matrix>& grads) const {
    const Node& nd = nodes_[i];
    const Matrix& g = grads[i];
    const auto& in = nd.inputs;
    switch (nd.op) {
      case Op::Leaf:
        break;
      case Op::MatMul:
        if (wants(in[0])) accumulate(grads, in[0], matmul_nt(g, nodes_[in[1]].value));
        if (wants(in[1])) accumulate(grads, in[1], matmul_tn(nodes_[in[0]].value, g));
        break;
      case Op::Transpose:
        accumulate(grads, in[0], ivit::transpose(g));
        break;
      case Op::Add:
        accumulate(grads, in[0], g);
        accumulate(grads, in[1], g);
        break;
      case Op::AddRow: {
        accumulate(grads, in[0], g);
        if (wants(in[1])) {
          Matrix gr(1, g.cols());
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) gr(0, c) += g(r, c);
          accumulate(grads, in[1], std::move(gr));
        }
        break;
      }
      case Op::Subtract:
        accumulate(grads, in[0], g);
        if (wants(in[1])) accumulate(grads, in[1], ivit::scale(g, -1.0));
        break;
      case Op::Scale:
        accumulate(grads, in[0], ivit::scale(g, nd.scalar));
        break;
      case Op::Multiply:
        if (wants(in[0])) accumulate(grads, in[0], hadamard(g, nodes_[in[1]].value));
        if (wants(in[1])) accumulate(grads, in[1], hadamard(g, nodes_[in[0]].value));
        break;
      case Op::SoftmaxRows: {
        // dx = sigma * y * (dy - <dy, y>_row)
        const Matrix& y = nd.value;
        Matrix dx(y.rows(), y.cols());
        const auto ya = detail::view(y).array();
        const auto ga = detail::view(g).array();
        const Eigen::ArrayXd dot = (ga * ya).rowwise().sum();
        detail::view(dx).array() = nd.scalar * ya * (ga.colwise() - dot);
        accumulate(grads, in[0], std::move(dx));
        break;
      }
      case Op::Gelu: {
        constexpr double c = 0.7978845608028654;
        const Matrix& x = nodes_[in[0]].value;
        const auto n = static_cast<Eigen::Index>(x.size());
        const Eigen::Map<const Eigen::ArrayXd> xa(x.data().data(), n), ta(nd.cache.data().data(), n),
            ga(g.data().data(), n);
        Matrix dx(x.rows(), x.cols());
        Eigen::Map<Eigen::ArrayXd>(dx.data().data(), n) =
            ga * (0.5 * (1.0 + ta) + 0.5 * xa * (1.0 - ta.square()) * c * (1.0 + 3.0 * 0.044715 * xa.square()));
        accumulate(grads, in[0], std::move(dx));
        break;
      }
      case Op::Relu: {
        Matrix dx = g;
        const Matrix& x = nodes_[in[0]].value;
        for (std::size_t k = 0; k < dx.size(); ++k)
          if (x.data()[k] <= 0.0) dx.data()[k] = 0.0;
        accumulate(grads, in[0], std::move(dx));
        break;
      }
      case Op::LayerNorm: {
        const Matrix& xhat = nd.cache;
        const Matrix& gain = nodes_[in[1]].value;
        const std::size_t n = xhat.rows(), c = xhat.cols();
        if (wants(in[0])) {
          Matrix dx(n, c);
          for (std::size_t r = 0; r < n; ++r) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double d = g(r, j) * gain(0, j);
              mean_d += d;
              mean_dx += d * xhat(r, j);
            }
            mean_d /= static_cast<double>(c);
            mean_dx /= static_cast<double>(c);
            for (std::size_t j = 0; j < c; ++j)
              dx(r, j) = nd.row_scalars[r] * (g(r, j) * gain(0, j) - mean_d - xhat(r, j) * mean_dx);
          }
          accumulate(grads, in[0], std::move(dx));
        }
        if (wants(in[1]) || wants(in[2])) {
          Matrix dg(1, c), db(1, c);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < c; ++j) {
              dg(0, j) += g(r, j) * xhat(r, j);
              db(0, j) += g(r, j);
            }
          accumulate(grads, in[1], std::move(dg));
          accumulate(grads, in[2], std::move(db));
        }
        break;
      }
      case Op::MeanPoolRows:
      case Op::MeanPoolBlocks: {
        const Matrix& x = nodes_[in[0]].value;
        const std::size_t blocks = nd.ints[0], n = x.rows() / blocks;
        Matrix dx(x.rows(), x.cols());
        const double inv = 1.0 / static_cast<double>(n);
        for (std::size_t b = 0; b < blocks; ++b)
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < x.cols(); ++c) dx(b * n + r, c) = g(b, c) * inv;
        accumulate(grads, in[0], std::move(dx));
        break;
      }
      case Op::Sum: {
        const Matrix& x = nodes_[in[0]].value;
        accumulate(grads, in[0], Matrix(x.rows(), x.cols(), g(0, 0)));
        break;
      }
      case Op::MseToConstant: {
        const Matrix& x = nodes_[in[0]].value;
        Matrix dx(x.rows(), x.cols());
        const double k = 2.0 * g(0, 0) / static_cast<double>(x.size());
        for (std::size_t j = 0; j < x.size(); ++j) dx.data()[j] = k * (x.data()[j] - nd.cache.data()[j]);
        accumulate(grads, in[0], std::move(dx));
        break;
      }
      case Op::SoftmaxCrossEntropy: {
        Matrix dx = nd.cache;
        const double k = g(0, 0) / static_cast<double>(dx.rows());
        for (std::size_t r = 0; r < dx.rows(); ++r) {
          dx(r, static_cast<std::size_t>(nd.labels[r])) -= 1.0;
          for (double& v : dx.row(r)) v *= k;
        }
        accumulate(grads, in[0], std::move(dx));
        break;
      }
      case Op::SliceCols: {
        const Matrix& x = nodes_[in[0]].value;
        Matrix dx(x.rows(), x.cols());
        const std::size_t start = nd.ints[0], width = nd.ints[1];
        for (std::size_t r = 0; r < x.rows(); ++r)
          for (std::size_t c = 0; c < width; ++c) dx(r, start + c) = g(r, c);
        accumulate(grads, in[0], std::move(dx));
        break;
      }
      case Op::ConcatCols: {
        std::size_t offset = 0;
        for (std::size_t id : in) {
          const std::size_t width = nodes_[id].value.cols();
          if (wants(id)) accumulate(grads, id, ivit::slice_cols(g, offset, width));
          offset += width;
        }
        break;
      }
      case Op::TileRows: {
        const Matrix& x = nodes_[in[0]].value;
        Matrix dx(x.rows(), x.cols());
        for (std::size_t t = 0; t < nd.ints[0]; ++t)
          for (std::size_t k = 0; k < x.size(); ++k) dx.data()[k] += g.data()[t * x.size() + k];
        accumulate(grads, in[0], std::move(dx));
        break;
      }
      case Op::BlockMatMulNT: {
        const Matrix& a = nodes_[in[0]].value;
        const Matrix& b = nodes_[in[1]].value;
        const std::size_t blocks = nd.ints[0], n = a.rows() / blocks, m = b.rows() / blocks;
        if (wants(in[0])) {
          Matrix da(a.rows(), a.cols());
          for (std::size_t blk = 0; blk < blocks; ++blk)
            detail::block(da, blk * n, n).noalias() = detail::block(g, blk * n, n) * detail::block(b, blk * m, m);
          accumulate(grads, in[0], std::move(da));
        }
        if (wants(in[1])) {
          Matrix db(b.rows(), b.cols());
          for (std::size_t blk = 0; blk < blocks; ++blk)
            detail::block(db, blk * m, m).noalias() = detail::block(g, blk * n, n).transpose() * detail::block(a, blk * n, n);
          accumulate(grads, in[1], std::move(db));
        }
        break;
      }
      case Op::BlockMatMul: {
        const Matrix& mm = nodes_[in[0]].value;
        const Matrix& vv = nodes_[in[1]].value;
        const std::size_t blocks = nd.ints[0], n = mm.rows() / blocks, k = vv.rows() / blocks;
        if (wants(in[0])) {
          Matrix dm(mm.rows(), mm.cols());
          for (std::size_t blk = 0; blk < blocks; ++blk)
            detail::block(dm, blk * n, n).noalias() = detail::block(g, blk * n, n) * detail::block(vv, blk * k, k).transpose();
          accumulate(grads, in[0], std::move(dm));
        }
        if (wants(in[1])) {
          Matrix dv(vv.rows(), vv.cols());
          for (std::size_t blk = 0; blk < blocks; ++blk)
            detail::block(dv, blk * k, k).noalias() = detail::block(mm, blk * n, n).transpose() * detail::block(g, blk * n, n);
          accumulate(grads, in[1], std::move(dv));
        }
        break;
      }
      case Op::DepthwiseConvWrap: {
        const Matrix& x = nodes_[in[0]].value;
        const Matrix& taps = nodes_[in[1]].value;
        const std::size_t gh = nd.ints[0], gw = nd.ints[1], blocks = nd.ints[2], f = nd.ints[3];
        Matrix dx(x.rows(), x.cols());
        Matrix dt(taps.rows(), taps.cols());
        const bool want_x = wants(in[0]), want_t = wants(in[1]);
        for_each_conv_tap(gh, gw, f, blocks, [&](std::size_t dst, std::size_t src, std::size_t tap) {
          auto go = g.row(dst);
          for (std::size_t c = 0; c < go.size(); ++c) {
            if (want_x) dx(src, c) += taps(c, tap) * go[c];
            if (want_t) dt(c, tap) += go[c] * x(src, c);
          }
        });
        if (want_x) accumulate(grads, in[0], std::move(dx));
        if (want_t) accumulate(grads, in[1], std::move(dt));
        break;
      }
    }
  }

  std::vector<Node> nodes_;
};

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam. Moments are created lazily per parameter name.
class AdamState {
 public:
  explicit AdamState(AdamOptions options = {}) : options_(options) {}

  /// Updates every parameter that has an entry in `grads`; others are left
  /// untouched. Throws "diverged" before modifying anything if a gradient is
  /// non-finite.
  void step(NamedTensors& params, const NamedTensors& grads) {
    for (const auto& [name, g] : grads) {
      require(g.all_finite(), "diverged: non-finite gradient for '" + name + "' at step " +
                                  std::to_string(step_ + 1));
      require(params.at(name).same_shape(g), "adam: gradient shape mismatch for '" + name + "'");
    }
    ++step_;
    const double t = static_cast<double>(step_);
    const double c1 = 1.0 - std::pow(options_.beta1, t);
    const double c2 = 1.0 - std::pow(options_.beta2, t);
    for (const auto& [name, g] : grads) {
      Matrix& w = params.at(name);
      if (!first_.contains(name)) {
        first_.set(name, Matrix(g.rows(), g.cols()));
        second_.set(name, Matrix(g.rows(), g.cols()));
      }
      auto m = first_.at(name).data();
      auto v = second_.at(name).data();
      auto wd = w.data();
      auto gd = g.data();
      for (std::size_t k = 0; k < wd.size(); ++k) {
        m[k] = options_.beta1 * m[k] + (1.0 - options_.beta1) * gd[k];
        v[k] = options_.beta2 * v[k] + (1.0 - options_.beta2) * gd[k] * gd[k];
        const double mhat = m[k] / c1;
        const double vhat = v[k] / c2;
        wd[k] -= options_.lr * mhat / (std::sqrt(vhat) + options_.eps);
      }
    }
  }

  std::uint64_t steps() const { return step_; }
  const AdamOptions& options() const { return options_; }
  const NamedTensors& first_moments() const { return first_; }
  const NamedTensors& second_moments() const { return second_; }

 private:
  AdamOptions options_;
  std::uint64_t step_ = 0;
  NamedTensors first_;
  NamedTensors second_;
};

}  // namespace ivit
