#pragma once

#include <Eigen/Dense>
#include <span>
#include <stdexcept>
#include <string>
#include <deque>
#include <utility>
#include <vector>

namespace icleq {

using Matrix = Eigen::MatrixXd;

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reverse-mode computation graph over dense real matrices. Nodes are
/// appended in evaluation order, so the node list is already topologically
/// sorted and backward() is a single reverse sweep. Every op works on
/// token matrices whose columns are tokens of one or more concatenated
/// sequences of equal length.
class Graph {
 public:
  using Node = int;

  enum class Op {
    constant,
    parameter,
    matmul,
    matmul_tn,
    add,
    add_bias,
    add_positional,
    attention,
    concat_rows,
    layer_norm,
    gelu,
    select_columns,
    softmax_columns,
    weighted_squared_error,
  };

  Node constant(Matrix value, std::string label = {});
  /// Leaf referring to an external parameter tensor. Gradients are added
  /// into `*grad` by backward(); `grad` may be null.
  Node parameter(const Matrix& value, Matrix* grad, std::string label = {});

  /// a·b
  Node matmul(Node a, Node b);
  /// aᵀ·b
  Node matmul_tn(Node a, Node b);
  Node add(Node a, Node b);
  /// Adds column vector `bias` to every column of `x`.
  Node add_bias(Node x, Node bias);
  /// Adds column (j mod seq_len) of `table` to column j of `x`.
  Node add_positional(Node x, Node table, int seq_len);
  /// Per sequence block: V·softmax(KᵀQ/√d) with the softmax taken over key
  /// positions (rows) for each query column; causal masking restricts
  /// query t to keys ≤ t.
  Node attention(Node q, Node k, Node v, int seq_len, bool causal);
  Node concat_rows(std::span<const Node> parts);
  /// Per-column layer norm with gain and bias column vectors.
  Node layer_norm(Node x, Node gain, Node bias, double eps = 1e-5);
  /// Exact GELU, x·Φ(x).
  Node gelu(Node x);
  Node select_columns(Node x, std::vector<int> columns);
  Node softmax_columns(Node x);
  /// Σ_j w_j ‖pred(:, j) − target(:, j)‖² as a 1×1 node.
  Node weighted_squared_error(Node pred, Matrix target, std::vector<double> weights);

  const Matrix& value(Node n) const { return *nodes_.at(n).value_ptr; }
  const Matrix& grad(Node n) const { return nodes_.at(n).grad; }
  Op op(Node n) const { return nodes_.at(n).op; }
  std::size_t size() const { return nodes_.size(); }

  /// Softmax weight matrices (seq_len × seq_len, one per sequence) of an
  /// attention node.
  const std::vector<Matrix>& attention_weights(Node n) const;

  /// Seeds d(node)/d(node) = 1 for a 1×1 node and propagates to all
  /// inputs, accumulating into parameter gradient buffers.
  void backward(Node scalar);

 private:
  struct NodeData {
    explicit NodeData(Op o, std::vector<Node> in = {}) : op(o), inputs(std::move(in)) {}

    Op op;
    std::vector<Node> inputs;
    Matrix value;
    const Matrix* value_ptr = nullptr;
    Matrix grad;
    bool requires_grad = false;
    Matrix* external_grad = nullptr;
    std::string label;
    // Op-specific state.
    int seq_len = 0;
    bool causal = false;
    double eps = 0.0;
    std::vector<int> columns;
    std::vector<double> weights;
    std::vector<Matrix> cache;
  };

  Node push(NodeData data);
  NodeData& input_node(const NodeData& n, std::size_t i) { return nodes_[n.inputs[i]]; }
  void accumulate(Node n, const Matrix& g);
  Matrix& grad_buffer(Node n);
  void backward_node(NodeData& n);

  std::deque<NodeData> nodes_;
};

const char* op_name(Graph::Op op);

}  // namespace icleq
