#include "icleq/transformer.hpp"

#include <cmath>
#include <stdexcept>

namespace icleq {

namespace {

constexpr double kInitStd = 0.02;

Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, RngStream& rng) {
  Matrix m(rows, cols);
  // Row-major fill so the draw order matches the checkpoint layout.
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = kInitStd * rng.normal();
  }
  return m;
}

Graph::Node param_node(Graph& g, const Matrix& value, Matrix* grad, const std::string& label) {
  return g.parameter(value, grad, label);
}

Graph::Node build_layer(Graph& g, Graph::Node e, const LayerParams& layer, LayerParams* grads,
                        const ModelConfig& config, int seq_len, std::size_t layer_index,
                        std::vector<Graph::Node>* heads_out) {
  const std::string prefix = "layer" + std::to_string(layer_index) + ".";
  std::vector<Graph::Node> heads;
  heads.reserve(config.n_heads);
  for (int h = 0; h < config.n_heads; ++h) {
    const std::string hs = std::to_string(h);
    const auto wq = param_node(g, layer.w_q[h], grads ? &grads->w_q[h] : nullptr, prefix + "w_q." + hs);
    const auto wk = param_node(g, layer.w_k[h], grads ? &grads->w_k[h] : nullptr, prefix + "w_k." + hs);
    const auto wv = param_node(g, layer.w_v[h], grads ? &grads->w_v[h] : nullptr, prefix + "w_v." + hs);
    const auto q = g.matmul(wq, e);
    const auto k = g.matmul(wk, e);
    const auto v = g.matmul(wv, e);
    heads.push_back(g.attention(q, k, v, seq_len, config.use_causal_mask));
  }
  if (heads_out != nullptr) *heads_out = heads;
  const auto merged = g.concat_rows(heads);
  const auto wo = param_node(g, layer.w_o, grads ? &grads->w_o : nullptr, prefix + "w_o");
  const auto a = g.matmul_tn(wo, merged);
  const auto residual = g.add(a, e);
  const auto gain = param_node(g, layer.ln_gain, grads ? &grads->ln_gain : nullptr, prefix + "ln_gain");
  const auto bias = param_node(g, layer.ln_bias, grads ? &grads->ln_bias : nullptr, prefix + "ln_bias");
  const auto normed = g.layer_norm(residual, gain, bias);
  const auto w2 = param_node(g, layer.w_2, grads ? &grads->w_2 : nullptr, prefix + "w_2");
  const auto hidden = g.gelu(g.matmul(w2, normed));
  const auto w1 = param_node(g, layer.w_1, grads ? &grads->w_1 : nullptr, prefix + "w_1");
  return g.add(g.matmul(w1, hidden), residual);
}

Graph::Node build_embedding(Graph& g, const ModelParams& params, ModelParams* grads,
                            const ModelConfig& config, const Matrix& inputs, int seq_len) {
  if (inputs.rows() != config.d_s()) {
    throw std::invalid_argument("build_forward: token inputs must have d_s rows");
  }
  if (seq_len > config.max_tokens()) {
    throw std::invalid_argument("build_forward: context longer than n_max");
  }
  const auto in = g.constant(inputs, "inputs");
  const auto me = param_node(g, params.embed, grads ? &grads->embed : nullptr, "embed");
  auto e = g.matmul(me, in);
  if (config.use_positional) {
    const auto pos =
        param_node(g, params.positional, grads ? &grads->positional : nullptr, "positional");
    e = g.add_positional(e, pos, seq_len);
  }
  return e;
}

void check_context(const ModelConfig& config, const ContextSet& context) {
  if (static_cast<int>(context.size()) > config.n_max) {
    throw std::invalid_argument("context of " + std::to_string(context.size()) +
                                " pairs exceeds n_max = " + std::to_string(config.n_max));
  }
}

}  // namespace

int ModelConfig::n_classes() const {
  int c = 1;
  for (int i = 0; i < n_t; ++i) c *= 4;
  return c;
}

void ModelConfig::validate() const {
  if (n_t < 1 || n_r < 1) throw std::invalid_argument("ModelConfig: antenna counts must be positive");
  if (n_layers < 1 || n_heads < 1 || d_e < 1 || d_f < 1 || n_max < 0) {
    throw std::invalid_argument("ModelConfig: sizes must be positive");
  }
  if (d_e % n_heads != 0) throw std::invalid_argument("ModelConfig: d_e must be divisible by n_heads");
}

ModelParams ModelParams::zeros(const ModelConfig& config) {
  config.validate();
  const int de = config.d_e, dw = config.head_dim();
  ModelParams p;
  p.embed = Matrix::Zero(de, config.d_s());
  p.positional = Matrix::Zero(de, config.max_tokens());
  p.layers.resize(config.n_layers);
  for (auto& layer : p.layers) {
    layer.w_k.assign(config.n_heads, Matrix::Zero(dw, de));
    layer.w_q.assign(config.n_heads, Matrix::Zero(dw, de));
    layer.w_v.assign(config.n_heads, Matrix::Zero(dw, de));
    layer.w_o = Matrix::Zero(config.n_heads * dw, de);
    layer.w_1 = Matrix::Zero(de, config.d_f);
    layer.w_2 = Matrix::Zero(config.d_f, de);
    layer.ln_gain = Matrix::Zero(de, 1);
    layer.ln_bias = Matrix::Zero(de, 1);
  }
  p.head_w = Matrix::Zero(config.n_classes(), de);
  p.head_b = Matrix::Zero(config.n_classes(), 1);
  return p;
}

ModelParams ModelParams::initialize(const ModelConfig& config, RngStream& rng) {
  ModelParams p = zeros(config);
  p.visit([&](const std::string& name, Matrix& t) {
    if (name.ends_with("ln_gain")) {
      t.setOnes();
    } else if (name.ends_with("ln_bias") || name == "head_b") {
      t.setZero();
    } else {
      t = gaussian_matrix(t.rows(), t.cols(), rng);
    }
  });
  return p;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Matrix& t) { n += static_cast<std::size_t>(t.size()); });
  return n;
}

bool ModelParams::all_finite() const {
  bool ok = true;
  visit([&](const std::string&, const Matrix& t) { ok = ok && t.allFinite(); });
  return ok;
}

Eigen::VectorXd realify(std::span<const Complex> v, int d_s) {
  if (2 * static_cast<int>(v.size()) > d_s) {
    throw std::invalid_argument("realify: vector of length " + std::to_string(v.size()) +
                                " does not fit d_s = " + std::to_string(d_s));
  }
  Eigen::VectorXd out = Eigen::VectorXd::Zero(d_s);
  const auto n = static_cast<Eigen::Index>(v.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    out(i) = v[i].real();
    out(n + i) = v[i].imag();
  }
  return out;
}

Matrix constellation_matrix(const Constellation& constellation) {
  Matrix c(2 * constellation.n_t, static_cast<Eigen::Index>(constellation.size()));
  for (std::size_t i = 0; i < constellation.size(); ++i) {
    c.col(static_cast<Eigen::Index>(i)) = realify(constellation[i], 2 * constellation.n_t);
  }
  return c;
}

Matrix sequence_inputs(const ModelConfig& config, const ContextSet& context,
                       std::span<const Complex> y) {
  check_context(config, context);
  const int ds = config.d_s();
  const auto n = static_cast<Eigen::Index>(context.size());
  Matrix s(ds, 2 * n + 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& p = context.pairs[i];
    s.col(2 * i) = realify(p.y, ds);
    s.col(2 * i + 1) = realify(p.x, ds);
  }
  s.col(2 * n) = realify(y, ds);
  return s;
}

std::vector<int> y_positions(int n_context) {
  std::vector<int> out;
  out.reserve(n_context + 1);
  for (int i = 0; i <= n_context; ++i) out.push_back(2 * i);
  return out;
}

ForwardNodes build_forward(Graph& g, const ModelParams& params, ModelParams* grads,
                           const ModelConfig& config, const Matrix& inputs, int seq_len,
                           const std::vector<int>& head_columns,
                           const Matrix& constellation_real) {
  config.validate();
  if (constellation_real.cols() != config.n_classes()) {
    throw std::invalid_argument("build_forward: constellation size differs from n_classes");
  }
  ForwardNodes out;
  out.embedded = build_embedding(g, params, grads, config, inputs, seq_len);
  auto e = out.embedded;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    std::vector<Graph::Node> heads;
    e = build_layer(g, e, params.layers[l], grads ? &grads->layers[l] : nullptr, config, seq_len,
                    l, &heads);
    out.attention.push_back(std::move(heads));
    out.layer_outputs.push_back(e);
  }
  const auto selected = g.select_columns(e, head_columns);
  const auto hw = param_node(g, params.head_w, grads ? &grads->head_w : nullptr, "head_w");
  const auto hb = param_node(g, params.head_b, grads ? &grads->head_b : nullptr, "head_b");
  const auto logits = g.add_bias(g.matmul(hw, selected), hb);
  out.probs = g.softmax_columns(logits);
  out.estimates = g.matmul(g.constant(constellation_real, "constellation"), out.probs);
  return out;
}

Matrix embed(const ModelParams& params, const ModelConfig& config, const ContextSet& context,
             std::span<const Complex> y) {
  const Matrix inputs = sequence_inputs(config, context, y);
  Graph g;
  const auto e = build_embedding(g, params, nullptr, config, inputs,
                                 static_cast<int>(inputs.cols()));
  return g.value(e);
}

Matrix attention_layer(const Matrix& tokens, const LayerParams& layer, const ModelConfig& config) {
  config.validate();
  if (tokens.rows() != config.d_e) throw std::invalid_argument("attention_layer: tokens must have d_e rows");
  Graph g;
  const auto e = g.constant(tokens);
  const auto out = build_layer(g, e, layer, nullptr, config, static_cast<int>(tokens.cols()), 0,
                               nullptr);
  return g.value(out);
}

ForwardResult forward(const ModelParams& params, const ModelConfig& config,
                      const Constellation& constellation, const ContextSet& context,
                      std::span<const Complex> y) {
  const Matrix inputs = sequence_inputs(config, context, y);
  const int n = static_cast<int>(context.size());
  Graph g;
  const auto nodes = build_forward(g, params, nullptr, config, inputs, 2 * n + 1, y_positions(n),
                                   constellation_matrix(constellation));
  const Matrix& probs = g.value(nodes.probs);
  const Matrix& est = g.value(nodes.estimates);
  ForwardResult r;
  for (Eigen::Index j = 0; j < probs.cols(); ++j) {
    r.class_probs.emplace_back(probs.col(j).data(), probs.col(j).data() + probs.rows());
    CVector x(constellation.n_t);
    for (int a = 0; a < constellation.n_t; ++a) x[a] = {est(a, j), est(constellation.n_t + a, j)};
    r.soft_estimates.push_back(std::move(x));
  }
  return r;
}

std::vector<CVector> estimate_batch(const ModelParams& params, const ModelConfig& config,
                                    const Constellation& constellation,
                                    const ContextSet& context, std::span<const CVector> ys) {
  if (ys.empty()) return {};
  check_context(config, context);
  const int n = static_cast<int>(context.size());
  const int t = 2 * n + 1;
  const Matrix single = sequence_inputs(config, context, ys[0]);
  Matrix inputs(single.rows(), t * static_cast<Eigen::Index>(ys.size()));
  std::vector<int> heads;
  for (std::size_t b = 0; b < ys.size(); ++b) {
    const Eigen::Index off = static_cast<Eigen::Index>(b) * t;
    inputs.middleCols(off, t - 1) = single.leftCols(t - 1);
    inputs.col(off + t - 1) = realify(ys[b], config.d_s());
    heads.push_back(static_cast<int>(off + t - 1));
  }
  Graph g;
  const auto nodes = build_forward(g, params, nullptr, config, inputs, t, heads,
                                   constellation_matrix(constellation));
  const Matrix& est = g.value(nodes.estimates);
  std::vector<CVector> out;
  out.reserve(ys.size());
  for (Eigen::Index j = 0; j < est.cols(); ++j) {
    CVector x(constellation.n_t);
    for (int a = 0; a < constellation.n_t; ++a) x[a] = {est(a, j), est(constellation.n_t + a, j)};
    out.push_back(std::move(x));
  }
  return out;
}

CVector soft_estimate(std::span<const double> probs, const Constellation& constellation) {
  if (probs.size() != constellation.size()) {
    throw DimensionError("soft_estimate: probability count differs from constellation size");
  }
  double total = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw std::invalid_argument("soft_estimate: negative probability");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw std::invalid_argument("soft_estimate: probabilities sum to " + std::to_string(total));
  }
  CVector out(constellation.n_t);
  for (std::size_t c = 0; c < probs.size(); ++c) {
    for (int j = 0; j < constellation.n_t; ++j) out[j] += probs[c] * constellation[c][j];
  }
  return out;
}

}  // namespace icleq
