#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "icleq/channel.hpp"
#include "icleq/graph.hpp"
#include "icleq/numerics.hpp"
#include "icleq/rng.hpp"

namespace icleq {

/// Shape of the decoder-only equalizer.
struct ModelConfig {
  int n_t = 2;
  int n_r = 2;
  int n_layers = 2;
  int n_heads = 4;
  int d_e = 64;
  int d_f = 128;
  /// Longest supported context (number of pilot pairs).
  int n_max = 20;
  bool use_causal_mask = true;
  bool use_positional = true;

  /// Token input width 2·max(n_t, n_r).
  int d_s() const { return 2 * (n_t > n_r ? n_t : n_r); }
  /// Joint 4-QAM input count 4^n_t.
  int n_classes() const;
  int head_dim() const { return d_e / n_heads; }
  int max_tokens() const { return 2 * n_max + 1; }

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
  std::vector<Matrix> w_k;  // per head, head_dim × d_e
  std::vector<Matrix> w_q;  // per head, head_dim × d_e
  std::vector<Matrix> w_v;  // per head, head_dim × d_e
  Matrix w_o;               // (n_heads·head_dim) × d_e
  Matrix w_1;               // d_e × d_f
  Matrix w_2;               // d_f × d_e
  Matrix ln_gain;           // d_e × 1
  Matrix ln_bias;           // d_e × 1
};

/// All trainable tensors. Vectors are stored as single-column matrices so
/// every tensor can be visited uniformly.
struct ModelParams {
  Matrix embed;       // d_e × d_s
  Matrix positional;  // d_e × (2·n_max + 1)
  std::vector<LayerParams> layers;
  Matrix head_w;  // n_classes × d_e
  Matrix head_b;  // n_classes × 1

  /// Zero tensors of the right shapes.
  static ModelParams zeros(const ModelConfig& config);
  /// Gaussian weights (std 0.02), unit layer-norm gain, zero biases.
  static ModelParams initialize(const ModelConfig& config, RngStream& rng);

  /// Calls f(name, tensor) for every tensor in a fixed order.
  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t parameter_count() const;
  bool all_finite() const;

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    f(std::string("embed"), self.embed);
    f(std::string("positional"), self.positional);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& layer = self.layers[l];
      const std::string p = "layer" + std::to_string(l) + ".";
      for (std::size_t h = 0; h < layer.w_k.size(); ++h) {
        f(p + "w_k." + std::to_string(h), layer.w_k[h]);
      }
      for (std::size_t h = 0; h < layer.w_q.size(); ++h) {
        f(p + "w_q." + std::to_string(h), layer.w_q[h]);
      }
      for (std::size_t h = 0; h < layer.w_v.size(); ++h) {
        f(p + "w_v." + std::to_string(h), layer.w_v[h]);
      }
      f(p + "w_o", layer.w_o);
      f(p + "w_1", layer.w_1);
      f(p + "w_2", layer.w_2);
      f(p + "ln_gain", layer.ln_gain);
      f(p + "ln_bias", layer.ln_bias);
    }
    f(std::string("head_w"), self.head_w);
    f(std::string("head_b"), self.head_b);
  }
};

/// Real and imaginary parts concatenated, zero-padded to d_s.
Eigen::VectorXd realify(std::span<const Complex> v, int d_s);

/// Realified joint inputs as columns, 2·n_t × n_classes.
Matrix constellation_matrix(const Constellation& constellation);

/// Interleaved token inputs (ỹ_1, x̃_1, …, ỹ_N, x̃_N, ỹ), d_s × (2N+1).
Matrix sequence_inputs(const ModelConfig& config, const ContextSet& context,
                       std::span<const Complex> y);

/// Column indices of the y tokens of a length-(2N+1) sequence.
std::vector<int> y_positions(int n_context);

/// Nodes of one forward pass recorded on a graph.
struct ForwardNodes {
  Graph::Node embedded = -1;
  std::vector<Graph::Node> layer_outputs;
  std::vector<std::vector<Graph::Node>> attention;  // [layer][head]
  Graph::Node probs = -1;      // n_classes × |head columns|
  Graph::Node estimates = -1;  // 2·n_t × |head columns|
};

/// Records the model on `graph`. `inputs` holds one or more sequences of
/// `seq_len` tokens side by side; `head_columns` selects the token columns
/// fed to the classifier. Parameter gradients go to `grads` when non-null.
ForwardNodes build_forward(Graph& graph, const ModelParams& params, ModelParams* grads,
                           const ModelConfig& config, const Matrix& inputs, int seq_len,
                           const std::vector<int>& head_columns,
                           const Matrix& constellation_real);

/// Embedded token matrix d_e × (2N+1).
Matrix embed(const ModelParams& params, const ModelConfig& config, const ContextSet& context,
             std::span<const Complex> y);

/// One attention/feed-forward block applied to a single token sequence.
Matrix attention_layer(const Matrix& tokens, const LayerParams& layer, const ModelConfig& config);

struct ForwardResult {
  /// One row per y position (N+1 rows), n_classes entries each.
  std::vector<std::vector<double>> class_probs;
  /// Soft estimate at every y position; the last one is the equalizer output.
  std::vector<CVector> soft_estimates;
};

ForwardResult forward(const ModelParams& params, const ModelConfig& config,
                      const Constellation& constellation, const ContextSet& context,
                      std::span<const Complex> y);

/// Final-position soft estimates for several test observations sharing one
/// context, evaluated as a single batch.
std::vector<CVector> estimate_batch(const ModelParams& params, const ModelConfig& config,
                                    const Constellation& constellation,
                                    const ContextSet& context, std::span<const CVector> ys);

/// Σ_c probs_c · x_c; throws if probs do not sum to 1.
CVector soft_estimate(std::span<const double> probs, const Constellation& constellation);

}  // namespace icleq
