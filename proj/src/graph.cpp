#include "icleq/graph.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#if defined(__AVX__)
#include <immintrin.h>
#endif

namespace icleq {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch (" +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
}

// Scalar libm calls run as legacy SSE code. If a preceding vectorized kernel
// left the upper AVX halves dirty, every such call pays a transition penalty
// (measured at ~18x on gelu), so clear the state before libm-heavy loops.
inline void clear_upper_simd_state() {
#if defined(__AVX__)
  _mm256_zeroupper();
#endif
}

}  // namespace

const char* op_name(Graph::Op op) {
  switch (op) {
    case Graph::Op::constant: return "constant";
    case Graph::Op::parameter: return "parameter";
    case Graph::Op::matmul: return "matmul";
    case Graph::Op::matmul_tn: return "matmul_tn";
    case Graph::Op::add: return "add";
    case Graph::Op::add_bias: return "add_bias";
    case Graph::Op::add_positional: return "add_positional";
    case Graph::Op::attention: return "attention";
    case Graph::Op::concat_rows: return "concat_rows";
    case Graph::Op::layer_norm: return "layer_norm";
    case Graph::Op::gelu: return "gelu";
    case Graph::Op::select_columns: return "select_columns";
    case Graph::Op::softmax_columns: return "softmax_columns";
    case Graph::Op::weighted_squared_error: return "weighted_squared_error";
  }
  return "unknown";
}

Graph::Node Graph::push(NodeData data) {
  const Node id = static_cast<Node>(nodes_.size());
  nodes_.push_back(std::move(data));
  NodeData& n = nodes_.back();
  if (n.value_ptr == nullptr) n.value_ptr = &n.value;
  for (Node in : n.inputs) n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
  if (!n.value_ptr->allFinite()) {
    throw NonFiniteError("non-finite value at node #" + std::to_string(id) + " (" +
                         op_name(n.op) + (n.label.empty() ? "" : ", " + n.label) + ")");
  }
  return id;
}

Graph::Node Graph::constant(Matrix value, std::string label) {
  NodeData n(Op::constant);
  n.value = std::move(value);
  n.label = std::move(label);
  return push(std::move(n));
}

Graph::Node Graph::parameter(const Matrix& value, Matrix* grad, std::string label) {
  NodeData n(Op::parameter);
  n.value_ptr = &value;
  n.external_grad = grad;
  n.requires_grad = grad != nullptr;
  n.label = std::move(label);
  return push(std::move(n));
}

Graph::Node Graph::matmul(Node a, Node b) {
  const Matrix& va = value(a);
  const Matrix& vb = value(b);
  if (va.cols() != vb.rows()) throw std::invalid_argument("Graph::matmul: inner dimensions differ");
  NodeData n(Op::matmul, {a, b});
  n.value.noalias() = va * vb;
  return push(std::move(n));
}

Graph::Node Graph::matmul_tn(Node a, Node b) {
  const Matrix& va = value(a);
  const Matrix& vb = value(b);
  if (va.rows() != vb.rows()) throw std::invalid_argument("Graph::matmul_tn: inner dimensions differ");
  NodeData n(Op::matmul_tn, {a, b});
  n.value.noalias() = va.transpose() * vb;
  return push(std::move(n));
}

Graph::Node Graph::add(Node a, Node b) {
  require_same_shape(value(a), value(b), "Graph::add");
  NodeData n(Op::add, {a, b});
  n.value = value(a) + value(b);
  return push(std::move(n));
}

Graph::Node Graph::add_bias(Node x, Node bias) {
  const Matrix& vx = value(x);
  const Matrix& vb = value(bias);
  if (vb.cols() != 1 || vb.rows() != vx.rows()) {
    throw std::invalid_argument("Graph::add_bias: bias must be a column of matching height");
  }
  NodeData n(Op::add_bias, {x, bias});
  n.value = vx.colwise() + vb.col(0);
  return push(std::move(n));
}

Graph::Node Graph::add_positional(Node x, Node table, int seq_len) {
  const Matrix& vx = value(x);
  const Matrix& vt = value(table);
  if (seq_len < 1 || vx.cols() % seq_len != 0 || vt.rows() != vx.rows() || vt.cols() < seq_len) {
    throw std::invalid_argument("Graph::add_positional: incompatible shapes");
  }
  NodeData n(Op::add_positional, {x, table});
  n.seq_len = seq_len;
  n.value = vx;
  for (Eigen::Index j = 0; j < vx.cols(); ++j) n.value.col(j) += vt.col(j % seq_len);
  return push(std::move(n));
}

Graph::Node Graph::attention(Node q, Node k, Node v, int seq_len, bool causal) {
  const Matrix& vq = value(q);
  const Matrix& vk = value(k);
  const Matrix& vv = value(v);
  if (vq.rows() != vk.rows() || vq.cols() != vk.cols() || vv.cols() != vq.cols() ||
      seq_len < 1 || vq.cols() % seq_len != 0) {
    throw std::invalid_argument("Graph::attention: incompatible shapes");
  }
  NodeData n(Op::attention, {q, k, v});
  n.seq_len = seq_len;
  n.causal = causal;
  const double scale = 1.0 / std::sqrt(static_cast<double>(vq.rows()));
  const Eigen::Index blocks = vq.cols() / seq_len;
  n.value.resize(vv.rows(), vv.cols());
  n.cache.reserve(blocks);
  for (Eigen::Index b = 0; b < blocks; ++b) {
    const Eigen::Index off = b * seq_len;
    Matrix s(seq_len, seq_len);
    s.noalias() = vk.middleCols(off, seq_len).transpose() * vq.middleCols(off, seq_len);
    s *= scale;
    clear_upper_simd_state();
    for (Eigen::Index col = 0; col < seq_len; ++col) {
      const Eigen::Index active = causal ? col + 1 : seq_len;
      auto c = s.col(col);
      const double m = c.head(active).maxCoeff();
      double z = 0.0;
      for (Eigen::Index r = 0; r < active; ++r) {
        c(r) = std::exp(c(r) - m);
        z += c(r);
      }
      c.head(active) /= z;
      if (active < seq_len) c.tail(seq_len - active).setZero();
    }
    n.value.middleCols(off, seq_len).noalias() = vv.middleCols(off, seq_len) * s;
    n.cache.push_back(std::move(s));
  }
  return push(std::move(n));
}

Graph::Node Graph::concat_rows(std::span<const Node> parts) {
  if (parts.empty()) throw std::invalid_argument("Graph::concat_rows: no inputs");
  Eigen::Index rows = 0;
  const Eigen::Index cols = value(parts[0]).cols();
  for (Node p : parts) {
    if (value(p).cols() != cols) throw std::invalid_argument("Graph::concat_rows: column counts differ");
    rows += value(p).rows();
  }
  NodeData n(Op::concat_rows, {parts.begin(), parts.end()});
  n.value.resize(rows, cols);
  Eigen::Index off = 0;
  for (Node p : parts) {
    n.value.middleRows(off, value(p).rows()) = value(p);
    off += value(p).rows();
  }
  return push(std::move(n));
}

Graph::Node Graph::layer_norm(Node x, Node gain, Node bias, double eps) {
  const Matrix& vx = value(x);
  const Matrix& vg = value(gain);
  const Matrix& vb = value(bias);
  if (vg.rows() != vx.rows() || vg.cols() != 1 || vb.rows() != vx.rows() || vb.cols() != 1) {
    throw std::invalid_argument("Graph::layer_norm: gain/bias must be columns of matching height");
  }
  NodeData n(Op::layer_norm, {x, gain, bias});
  n.eps = eps;
  const double d = static_cast<double>(vx.rows());
  const Eigen::RowVectorXd mean = vx.colwise().sum() / d;
  Matrix centered = vx.rowwise() - mean;
  const Eigen::RowVectorXd var = centered.colwise().squaredNorm() / d;
  const Eigen::RowVectorXd inv = (var.array() + eps).rsqrt().matrix();
  Matrix xhat = centered.array().rowwise() * inv.array();
  n.value = (xhat.array().colwise() * vg.col(0).array()).colwise() + vb.col(0).array();
  n.cache.push_back(std::move(xhat));
  n.cache.emplace_back(inv);
  return push(std::move(n));
}

Graph::Node Graph::gelu(Node x) {
  NodeData n(Op::gelu, {x});
  const Matrix& vx = value(x);
  clear_upper_simd_state();
  Matrix cdf = vx.unaryExpr([](double t) { return 0.5 * (1.0 + std::erf(t * kInvSqrt2)); });
  n.value = vx.cwiseProduct(cdf);
  // Backward needs Phi(x) again; keep it rather than recomputing erf.
  if (nodes_[x].requires_grad) n.cache.push_back(std::move(cdf));
  return push(std::move(n));
}

Graph::Node Graph::select_columns(Node x, std::vector<int> columns) {
  const Matrix& vx = value(x);
  NodeData n(Op::select_columns, {x});
  n.value.resize(vx.rows(), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (columns[i] < 0 || columns[i] >= vx.cols()) {
      throw std::out_of_range("Graph::select_columns: column out of range");
    }
    n.value.col(static_cast<Eigen::Index>(i)) = vx.col(columns[i]);
  }
  n.columns = std::move(columns);
  return push(std::move(n));
}

Graph::Node Graph::softmax_columns(Node x) {
  NodeData n(Op::softmax_columns, {x});
  n.value = value(x);
  for (Eigen::Index j = 0; j < n.value.cols(); ++j) {
    auto c = n.value.col(j);
    c.array() = (c.array() - c.maxCoeff()).exp();
    c /= c.sum();
  }
  return push(std::move(n));
}

Graph::Node Graph::weighted_squared_error(Node pred, Matrix target, std::vector<double> weights) {
  const Matrix& vp = value(pred);
  require_same_shape(vp, target, "Graph::weighted_squared_error");
  if (static_cast<Eigen::Index>(weights.size()) != vp.cols()) {
    throw std::invalid_argument("Graph::weighted_squared_error: one weight per column required");
  }
  NodeData n(Op::weighted_squared_error, {pred});
  double acc = 0.0;
  for (Eigen::Index j = 0; j < vp.cols(); ++j) {
    acc += weights[j] * (vp.col(j) - target.col(j)).squaredNorm();
  }
  n.value = Matrix::Constant(1, 1, acc);
  n.cache.push_back(std::move(target));
  n.weights = std::move(weights);
  return push(std::move(n));
}

const std::vector<Matrix>& Graph::attention_weights(Node n) const {
  const NodeData& d = nodes_.at(n);
  if (d.op != Op::attention) throw std::invalid_argument("Graph::attention_weights: not an attention node");
  return d.cache;
}

Matrix& Graph::grad_buffer(Node id) {
  NodeData& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value_ptr->rows(), n.value_ptr->cols());
  return n.grad;
}

void Graph::accumulate(Node id, const Matrix& g) {
  if (!nodes_[id].requires_grad) return;
  grad_buffer(id) += g;
}

void Graph::backward(Node scalar) {
  NodeData& root = nodes_.at(scalar);
  if (root.value_ptr->size() != 1) throw std::invalid_argument("Graph::backward: root must be 1x1");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  root.grad = Matrix::Ones(1, 1);
  for (Node id = scalar; id >= 0; --id) {
    NodeData& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (!n.grad.allFinite()) {
      throw NonFiniteError("non-finite gradient at node #" + std::to_string(id) + " (" +
                           op_name(n.op) + (n.label.empty() ? "" : ", " + n.label) + ")");
    }
    backward_node(n);
  }
}

void Graph::backward_node(NodeData& n) {
  const Matrix& g = n.grad;
  switch (n.op) {
    case Op::constant:
      return;
    case Op::parameter:
      if (n.external_grad != nullptr) *n.external_grad += g;
      return;
    case Op::matmul: {
      const Node a = n.inputs[0], b = n.inputs[1];
      if (nodes_[a].requires_grad) grad_buffer(a).noalias() += g * value(b).transpose();
      if (nodes_[b].requires_grad) grad_buffer(b).noalias() += value(a).transpose() * g;
      return;
    }
    case Op::matmul_tn: {
      const Node a = n.inputs[0], b = n.inputs[1];
      if (nodes_[a].requires_grad) grad_buffer(a).noalias() += value(b) * g.transpose();
      if (nodes_[b].requires_grad) grad_buffer(b).noalias() += value(a) * g;
      return;
    }
    case Op::add:
      accumulate(n.inputs[0], g);
      accumulate(n.inputs[1], g);
      return;
    case Op::add_bias:
      accumulate(n.inputs[0], g);
      if (nodes_[n.inputs[1]].requires_grad) grad_buffer(n.inputs[1]) += g.rowwise().sum();
      return;
    case Op::add_positional: {
      accumulate(n.inputs[0], g);
      if (nodes_[n.inputs[1]].requires_grad) {
        Matrix& gt = grad_buffer(n.inputs[1]);
        for (Eigen::Index j = 0; j < g.cols(); ++j) gt.col(j % n.seq_len) += g.col(j);
      }
      return;
    }
    case Op::attention: {
      const Node q = n.inputs[0], k = n.inputs[1], v = n.inputs[2];
      const Matrix& vq = value(q);
      const Matrix& vk = value(k);
      const Matrix& vv = value(v);
      const int t = n.seq_len;
      const double scale = 1.0 / std::sqrt(static_cast<double>(vq.rows()));
      const bool gq = nodes_[q].requires_grad, gk = nodes_[k].requires_grad,
                 gv = nodes_[v].requires_grad;
      Matrix dp(t, t), ds(t, t);
      for (std::size_t b = 0; b < n.cache.size(); ++b) {
        const Eigen::Index off = static_cast<Eigen::Index>(b) * t;
        const Matrix& p = n.cache[b];
        const auto gb = g.middleCols(off, t);
        if (gv) grad_buffer(v).middleCols(off, t).noalias() += gb * p.transpose();
        if (!gq && !gk) continue;
        dp.noalias() = vv.middleCols(off, t).transpose() * gb;
        const Eigen::RowVectorXd inner = p.cwiseProduct(dp).colwise().sum();
        ds = p.cwiseProduct(dp - Matrix::Ones(t, 1) * inner) * scale;
        if (gq) grad_buffer(q).middleCols(off, t).noalias() += vk.middleCols(off, t) * ds;
        if (gk) grad_buffer(k).middleCols(off, t).noalias() += vq.middleCols(off, t) * ds.transpose();
      }
      return;
    }
    case Op::concat_rows: {
      Eigen::Index off = 0;
      for (Node p : n.inputs) {
        const Eigen::Index rows = value(p).rows();
        if (nodes_[p].requires_grad) grad_buffer(p) += g.middleRows(off, rows);
        off += rows;
      }
      return;
    }
    case Op::layer_norm: {
      const Node x = n.inputs[0], gain = n.inputs[1], bias = n.inputs[2];
      const Matrix& xhat = n.cache[0];
      const Matrix& inv = n.cache[1];
      if (nodes_[gain].requires_grad) grad_buffer(gain) += g.cwiseProduct(xhat).rowwise().sum();
      if (nodes_[bias].requires_grad) grad_buffer(bias) += g.rowwise().sum();
      if (nodes_[x].requires_grad) {
        const double d = static_cast<double>(g.rows());
        const Matrix dxhat = g.array().colwise() * value(gain).col(0).array();
        const Eigen::RowVectorXd mean_d = dxhat.colwise().sum() / d;
        const Eigen::RowVectorXd mean_dx = dxhat.cwiseProduct(xhat).colwise().sum() / d;
        Matrix dx = dxhat;
        dx.rowwise() -= mean_d;
        dx -= (xhat.array().rowwise() * mean_dx.array()).matrix();
        dx.array().rowwise() *= inv.row(0).array();
        grad_buffer(x) += dx;
      }
      return;
    }
    case Op::gelu: {
      const Node x = n.inputs[0];
      if (!nodes_[x].requires_grad) return;
      const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
      const auto t = value(x).array();
      const Matrix pdf = inv_sqrt_2pi * (-0.5 * t.square()).exp();
      grad_buffer(x).array() += g.array() * (n.cache[0].array() + t * pdf.array());
      return;
    }
    case Op::select_columns: {
      const Node x = n.inputs[0];
      if (!nodes_[x].requires_grad) return;
      Matrix& gx = grad_buffer(x);
      for (std::size_t i = 0; i < n.columns.size(); ++i) {
        gx.col(n.columns[i]) += g.col(static_cast<Eigen::Index>(i));
      }
      return;
    }
    case Op::softmax_columns: {
      const Node x = n.inputs[0];
      if (!nodes_[x].requires_grad) return;
      const Matrix& p = n.value;
      const Eigen::RowVectorXd inner = p.cwiseProduct(g).colwise().sum();
      grad_buffer(x) += p.cwiseProduct(g - Matrix::Ones(g.rows(), 1) * inner);
      return;
    }
    case Op::weighted_squared_error: {
      const Node pred = n.inputs[0];
      if (!nodes_[pred].requires_grad) return;
      const Matrix& target = n.cache[0];
      Matrix& gp = grad_buffer(pred);
      const double seed = g(0, 0);
      for (Eigen::Index j = 0; j < target.cols(); ++j) {
        gp.col(j) += (2.0 * seed * n.weights[j]) * (value(pred).col(j) - target.col(j));
      }
      return;
    }
  }
}

}  // namespace icleq
