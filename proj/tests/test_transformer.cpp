#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "icleq/estimators.hpp"
#include "icleq/transformer.hpp"
#include "support.hpp"

using namespace icleq;
using icleq::testing::max_abs_diff;
using icleq::testing::random_cmatrix;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_e = 16;
  c.d_f = 32;
  c.n_max = 8;
  return c;
}

// Larger weights than the default init so perturbations are visible.
ModelParams random_params(const ModelConfig& config, std::uint64_t seed, double scale = 0.3) {
  RngStream rng(seed, 0);
  ModelParams p = ModelParams::initialize(config, rng);
  p.visit([&](const std::string&, Matrix& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = scale * rng.normal();
  });
  return p;
}

ContextSet random_context(std::size_t n, RngStream& rng) {
  static const Constellation c = Constellation::qam4(2);
  const Task t{random_cmatrix(2, 2, rng), 0.1};
  return sample_context(t, Quantizer(4), c, n, rng);
}

}  // namespace

TEST_CASE("realify") {
  CHECK(realify(CVector{{1, 2}}, 4) == Eigen::Vector4d(1, 2, 0, 0));
  CHECK(realify(CVector(2), 4).isZero());
  CHECK(realify(CVector{{1, 2}, {3, 4}}, 4) == Eigen::Vector4d(1, 3, 2, 4));
  CHECK_THROWS(realify(CVector(3), 4));
}

TEST_CASE("model configuration") {
  ModelConfig c;
  CHECK(c.d_s() == 4);
  CHECK(c.n_classes() == 16);
  CHECK(c.head_dim() == 16);
  CHECK(c.max_tokens() == 41);
  c.n_heads = 3;
  CHECK_THROWS(c.validate());

  const ModelParams p = ModelParams::zeros(ModelConfig{});
  CHECK(p.embed.rows() == 64);
  CHECK(p.embed.cols() == 4);
  CHECK(p.positional.cols() == 41);
  CHECK(p.layers.size() == 2);
  CHECK(p.layers[0].w_k.size() == 4);
  CHECK(p.layers[0].w_k[0].rows() == 16);
  CHECK(p.layers[0].w_o.rows() == 64);
  CHECK(p.layers[0].w_1.cols() == 128);
  CHECK(p.head_w.rows() == 16);

  RngStream rng(60, 0);
  const ModelParams init = ModelParams::initialize(ModelConfig{}, rng);
  CHECK(init.layers[0].ln_gain.isOnes());
  CHECK(init.layers[0].ln_bias.isZero());
  CHECK(init.head_b.isZero());
  const double sd = std::sqrt(init.layers[1].w_1.squaredNorm() / init.layers[1].w_1.size());
  CHECK(sd == doctest::Approx(0.02).epsilon(0.05));
}

TEST_CASE("embedding layout") {
  const ModelConfig c = small_config();
  RngStream rng(61, 0);
  const ModelParams p = random_params(c, 62);
  const CVector y{{0.25, -0.75}, {1.25, 0.25}};
  const Matrix e0 = embed(p, c, ContextSet{}, y);
  CHECK(e0.cols() == 1);
  CHECK((e0.col(0) - (p.embed * realify(y, 4) + p.positional.col(0))).norm() < 1e-14);

  const ContextSet ctx = random_context(8, rng);
  const Matrix e = embed(p, c, ctx, y);
  CHECK(e.cols() == 17);
  CHECK((e.col(3) - (p.embed * realify(ctx.pairs[1].x, 4) + p.positional.col(3))).norm() < 1e-14);
  CHECK(y_positions(3) == std::vector<int>{0, 2, 4, 6});
  CHECK_THROWS(embed(p, c, random_context(9, rng), y));

  ModelConfig nopos = c;
  nopos.use_positional = false;
  ModelParams zero = p;
  zero.embed.setZero();
  CHECK(embed(zero, nopos, ctx, y).isZero());

  ModelConfig paper;
  paper.n_max = 20;
  CHECK(embed(ModelParams::zeros(paper), paper, random_context(20, rng), y).cols() == 41);
}

TEST_CASE("single-token attention routes the value projection") {
  ModelConfig c = small_config();
  const ModelParams p = random_params(c, 63);
  const Eigen::VectorXd tok = Eigen::VectorXd::LinSpaced(16, -1, 1);
  const Matrix out = attention_layer(tok, p.layers[0], c);

  const auto& l = p.layers[0];
  Eigen::VectorXd stacked(16);
  for (int h = 0; h < 2; ++h) stacked.segment(8 * h, 8) = l.w_v[h] * tok;
  const Eigen::VectorXd a = l.w_o.transpose() * stacked;
  const Eigen::VectorXd r = a + tok;
  const double mean = r.mean();
  const double var = (r.array() - mean).square().mean();
  const Eigen::VectorXd n =
      ((r.array() - mean) / std::sqrt(var + 1e-5)).matrix().cwiseProduct(l.ln_gain) + l.ln_bias;
  // E' = W_1·gelu(W_2·LN(A+E)) + A + E with W_1: d_e×d_f, W_2: d_f×d_e
  const Eigen::VectorXd expect = l.w_1 * (l.w_2 * n).unaryExpr([](double v) {
    return v * 0.5 * std::erfc(-v / std::sqrt(2.0));
  }) + r;
  CHECK((out.col(0) - expect).norm() < 1e-12);
}

TEST_CASE("forward pass shapes and bounds") {
  const ModelConfig c = small_config();
  const Constellation cons = Constellation::qam4(2);
  const ModelParams p = random_params(c, 64);
  RngStream rng(65, 0);
  for (int n = 0; n <= c.n_max; ++n) {
    const ContextSet ctx = random_context(n, rng);
    const CVector y{{0.25, 0.25}, {-1.75, 0.75}};
    const ForwardResult r = forward(p, c, cons, ctx, y);
    REQUIRE(r.class_probs.size() == static_cast<std::size_t>(n + 1));
    REQUIRE(r.soft_estimates.size() == static_cast<std::size_t>(n + 1));
    for (const auto& row : r.class_probs) {
      double s = 0.0;
      for (double v : row) s += v;
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
    for (const auto& e : r.soft_estimates) {
      for (const auto& v : e) {
        CHECK(std::abs(v.real()) <= cons.max_coordinate() + 1e-15);
        CHECK(std::abs(v.imag()) <= cons.max_coordinate() + 1e-15);
      }
    }
  }
}

TEST_CASE("causal mask isolates earlier positions") {
  const ModelConfig c = small_config();
  const Constellation cons = Constellation::qam4(2);
  const ModelParams p = random_params(c, 66);
  RngStream rng(67, 0);
  const ContextSet ctx = random_context(6, rng);
  const CVector y{{0.25, 0.25}, {-1.75, 0.75}};
  const ForwardResult base = forward(p, c, cons, ctx, y);
  for (int i = 0; i < 6; ++i) {
    // Perturb every token after y-position 2i: x_i onwards, later y's, the query.
    ContextSet pert = ctx;
    pert.pairs[i].x = cons[(pert.pairs[i].x_index + 5) % 16];
    for (std::size_t j = i + 1; j < pert.size(); ++j) {
      pert.pairs[j].y = {{-3.75, 3.75}, {2.25, -0.25}};
      pert.pairs[j].x = cons[(pert.pairs[j].x_index + 3) % 16];
    }
    const ForwardResult r = forward(p, c, cons, pert, CVector{{3.75, 3.75}, {3.75, 3.75}});
    for (int k = 0; k <= i; ++k) {
      CHECK(max_abs_diff(r.soft_estimates[k], base.soft_estimates[k]) <= 1e-12);
    }
    CHECK(max_abs_diff(r.soft_estimates.back(), base.soft_estimates.back()) > 1e-6);
  }
}

TEST_CASE("without mask or positions the context is a set") {
  ModelConfig c = small_config();
  c.use_causal_mask = false;
  c.use_positional = false;
  const Constellation cons = Constellation::qam4(2);
  const ModelParams p = random_params(c, 68);
  RngStream rng(69, 0);
  const ContextSet ctx = random_context(7, rng);
  const CVector y{{0.25, -0.25}, {0.75, 1.25}};
  ContextSet perm = ctx;
  std::reverse(perm.pairs.begin(), perm.pairs.end());
  std::swap(perm.pairs[0], perm.pairs[3]);
  const auto a = forward(p, c, cons, ctx, y).soft_estimates.back();
  const auto b = forward(p, c, cons, perm, y).soft_estimates.back();
  CHECK(max_abs_diff(a, b) <= 1e-9);
}

TEST_CASE("forward is deterministic and batches agree") {
  const ModelConfig c = small_config();
  const Constellation cons = Constellation::qam4(2);
  const ModelParams p = random_params(c, 70);
  RngStream rng(71, 0);
  const ContextSet ctx = random_context(8, rng);
  std::vector<CVector> ys;
  for (int i = 0; i < 5; ++i) ys.push_back(apply_channel(Task{random_cmatrix(2, 2, rng), 0.1}, Quantizer(4), cons[i], rng));
  const auto batch = estimate_batch(p, c, cons, ctx, ys);
  for (int i = 0; i < 5; ++i) {
    const auto a = forward(p, c, cons, ctx, ys[i]).soft_estimates.back();
    const auto b = forward(p, c, cons, ctx, ys[i]).soft_estimates.back();
    CHECK(a == b);
    CHECK(max_abs_diff(a, batch[i]) <= 1e-12);
  }
}

TEST_CASE("fresh initialization predicts near zero on average") {
  const ModelConfig c;
  const Constellation cons = Constellation::qam4(2);
  RngStream init(72, 0);
  const ModelParams p = ModelParams::initialize(c, init);
  RngStream rng(73, 0);
  Complex acc[2] = {0, 0};
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    const Task t{random_cmatrix(2, 2, rng), 0.1};
    const ContextSet ctx = sample_context(t, Quantizer(4), cons, 20, rng);
    const CVector y = apply_channel(t, Quantizer(4), cons[rng.uniform_index(16)], rng);
    const auto e = forward(p, c, cons, ctx, y).soft_estimates.back();
    acc[0] += e[0];
    acc[1] += e[1];
  }
  CHECK(std::sqrt(std::norm(acc[0] / double(n)) + std::norm(acc[1] / double(n))) <= 0.1);
}

TEST_CASE("soft estimate") {
  const Constellation cons = Constellation::qam4(2);
  std::vector<double> one_hot(16, 0.0);
  one_hot[9] = 1.0;
  CHECK(soft_estimate(one_hot, cons) == cons[9]);
  CHECK(max_abs_diff(soft_estimate(std::vector<double>(16, 1.0 / 16), cons), CVector(2)) < 1e-16);
  CHECK_THROWS(soft_estimate(std::vector<double>(16, 0.1), cons));

  RngStream rng(74, 0);
  const Task t{random_cmatrix(2, 2, rng), 0.3};
  const CVector y = apply_channel(t, Quantizer(3), cons[4], rng);
  const auto post = input_posterior(t, Quantizer(3), cons, y);
  CHECK(max_abs_diff(soft_estimate(post.probs, cons), mmse_known_task(t, Quantizer(3), cons, y)) <= 1e-12);
}
