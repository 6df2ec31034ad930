#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "rticket/errors.hpp"
#include "rticket/model.hpp"
#include "test_support.hpp"

using namespace rticket;
using namespace rticket::testing;

namespace {

// Straight-line scalar forward pass of a single-layer, single-head model,
// written independently of the Eigen implementation.
std::vector<double> scalar_logits(const MaskedModel& m, const std::vector<int>& tokens) {
  const auto& c = m.config();
  const int D = c.embed_dim, M = c.mlp_dim, C = c.num_classes, T = static_cast<int>(tokens.size());
  auto P = [&](const char* name) { return m.tensor(name); };
  auto ln = [&](const std::vector<double>& x, std::span<const double> g, std::span<const double> b) {
    double mu = 0, var = 0;
    for (double v : x) mu += v;
    mu /= D;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= D;
    std::vector<double> y(D);
    for (int i = 0; i < D; ++i) y[i] = (x[i] - mu) / std::sqrt(var + 1e-5) * g[i] + b[i];
    return y;
  };
  auto affine = [](const std::vector<double>& x, std::span<const double> w, std::span<const double> b, int in, int out) {
    std::vector<double> y(out);
    for (int j = 0; j < out; ++j) {
      double s = b[j];
      for (int i = 0; i < in; ++i) s += x[i] * w[i * out + j];
      y[j] = s;
    }
    return y;
  };
  std::vector<std::vector<double>> h(T, std::vector<double>(D));
  for (int t = 0; t < T; ++t)
    for (int i = 0; i < D; ++i) h[t][i] = P("embed.token")[tokens[t] * D + i] + P("embed.position")[t * D + i];
  std::vector<std::vector<double>> q(T), k(T), v(T);
  for (int t = 0; t < T; ++t) {
    auto a = ln(h[t], P("layer0.ln1.gain"), P("layer0.ln1.bias"));
    q[t] = affine(a, P("layer0.attn.query.weight"), P("layer0.attn.query.bias"), D, D);
    k[t] = affine(a, P("layer0.attn.key.weight"), P("layer0.attn.key.bias"), D, D);
    v[t] = affine(a, P("layer0.attn.value.weight"), P("layer0.attn.value.bias"), D, D);
  }
  for (int t = 0; t < T; ++t) {
    std::vector<double> score(T);
    double mx = -1e300, z = 0;
    for (int j = 0; j < T; ++j) {
      score[j] = std::inner_product(q[t].begin(), q[t].end(), k[j].begin(), 0.0) / std::sqrt(double(D));
      mx = std::max(mx, score[j]);
    }
    for (int j = 0; j < T; ++j) z += (score[j] = std::exp(score[j] - mx));
    std::vector<double> o(D, 0.0);
    for (int j = 0; j < T; ++j)
      for (int i = 0; i < D; ++i) o[i] += score[j] / z * v[j][i];
    auto y = affine(o, P("layer0.attn.output.weight"), P("layer0.attn.output.bias"), D, D);
    for (int i = 0; i < D; ++i) h[t][i] += y[i];
  }
  for (int t = 0; t < T; ++t) {
    auto a = ln(h[t], P("layer0.ln2.gain"), P("layer0.ln2.bias"));
    auto u = affine(a, P("layer0.mlp.in.weight"), P("layer0.mlp.in.bias"), D, M);
    for (double& x : u) x = 0.5 * x * (1 + std::tanh(std::sqrt(2 / M_PI) * (x + 0.044715 * x * x * x)));
    auto z = affine(u, P("layer0.mlp.out.weight"), P("layer0.mlp.out.bias"), M, D);
    for (int i = 0; i < D; ++i) h[t][i] += z[i];
  }
  auto f = ln(h[0], P("final_ln.gain"), P("final_ln.bias"));
  return affine(f, P("classifier.weight"), P("classifier.bias"), D, C);
}

Batch single_example(std::vector<std::int32_t> tokens, int label) {
  Batch b;
  b.size = 1;
  b.seq_len = static_cast<int>(tokens.size());
  b.token_ids = std::move(tokens);
  b.pad_mask.assign(b.token_ids.size(), 0);
  b.labels = {label};
  return b;
}

}  // namespace

TEST_CASE("layout: maskable index covers exactly attention and MLP matrices") {
  const auto cfg = tiny_config(2, 2);
  const ParamLayout layout(cfg);
  std::size_t expected = 0;
  for (const auto& s : layout.slots()) {
    const bool attn_or_mlp = s.name.find(".attn.") != std::string::npos || s.name.find(".mlp.") != std::string::npos;
    const bool weight = s.name.ends_with(".weight");
    CHECK(s.maskable == (attn_or_mlp && weight));
    if (s.maskable) expected += s.size();
  }
  CHECK(layout.maskable_count() == expected);
  CHECK(layout.maskable_count() == 2u * (4 * 16 + 2 * 24));
  const MaskedModel m(cfg, 1);
  const auto values = m.maskable_values();
  for (std::size_t j = 0; j < values.size(); j += 7) {
    CHECK(values[j] == m.theta()[layout.theta_offset_of_mask(j)]);
  }
}

TEST_CASE("config validation") {
  auto cfg = tiny_config();
  cfg.num_heads = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.mlp_dim = 0;
  CHECK_THROWS_AS(MaskedModel(cfg, 1), ConfigError);
}

TEST_CASE("forward matches a scalar single-layer single-head oracle") {
  auto cfg = tiny_config(1, 1);
  const MaskedModel m(cfg, 77);
  const auto b = single_example({2, 5}, 0);
  const auto logits = forward(m, b).logits;
  const auto oracle = scalar_logits(m, {2, 5});
  for (int c = 0; c < cfg.num_classes; ++c) {
    CHECK(logits(0, c) == doctest::Approx(oracle[static_cast<std::size_t>(c)]).epsilon(1e-12));
  }
}

TEST_CASE("all-ones mask is bit-identical to the unmasked forward") {
  const auto cfg = tiny_config(2, 2);
  const MaskedModel m(cfg, 3);
  const auto b = random_batch(cfg, 4, 5, 9, 2);
  const std::vector<double> ones(m.maskable_count(), 1.0);
  const auto a = forward(m, b).logits;
  const auto c = forward(m, b, {.mask_values = ones}).logits;
  CHECK(a == c);
}

TEST_CASE("all-zero mask leaves only the residual path of the [CLS] position") {
  const auto cfg = tiny_config(2, 2);
  const MaskedModel m(cfg, 3);
  const std::vector<double> zeros(m.maskable_count(), 0.0);
  auto b1 = random_batch(cfg, 1, 5, 1);
  auto b2 = b1;
  b2.token_ids[3] = (b2.token_ids[3] % 6) + 1;
  b2.token_ids[4] = (b2.token_ids[4] % 6) + 1;
  const auto l1 = forward(m, b1, {.mask_values = zeros}).logits;
  const auto l2 = forward(m, b2, {.mask_values = zeros}).logits;
  CHECK(l1.isApprox(l2, 1e-14));
  const auto full1 = forward(m, b1).logits;
  const auto full2 = forward(m, b2).logits;
  CHECK_FALSE(full1.isApprox(full2, 1e-6));
}

TEST_CASE("padding positions do not influence the logits") {
  const auto cfg = tiny_config(2, 2);
  const MaskedModel m(cfg, 5);
  auto b = random_batch(cfg, 2, 5, 4, 2);
  const auto before = forward(m, b).logits;
  b.token_ids[1 * 5 + 4] = 3;  // padded slot of example 1
  const auto after = forward(m, b).logits;
  CHECK(before == after);
}

TEST_CASE("uniform logits give loss ln C") {
  const auto cfg = tiny_config();
  MaskedModel m(cfg, 1);
  for (auto& w : m.tensor("classifier.weight")) w = 0.0;
  for (auto& w : m.tensor("classifier.bias")) w = 0.0;
  const auto r = loss_and_grads(m, random_batch(cfg, 3, 4, 2), {}, {});
  CHECK(r.loss == doctest::Approx(std::log(3.0)).epsilon(1e-14));
}

TEST_CASE("batch row permutation permutes logits") {
  const auto cfg = tiny_config(2, 2);
  const MaskedModel m(cfg, 8);
  const auto b = random_batch(cfg, 4, 5, 12, 2);
  Batch p = b;
  const int order[4] = {2, 0, 3, 1};
  for (int i = 0; i < 4; ++i) {
    for (int t = 0; t < 5; ++t) {
      p.token_ids[static_cast<std::size_t>(i * 5 + t)] = b.token(order[i], t);
      p.pad_mask[static_cast<std::size_t>(i * 5 + t)] = b.pad_mask[static_cast<std::size_t>(order[i] * 5 + t)];
    }
  }
  const auto lb = forward(m, b).logits;
  const auto lp = forward(m, p).logits;
  for (int i = 0; i < 4; ++i) {
    CHECK(lp.row(i) == lb.row(order[i]));
  }
}

TEST_CASE("forward is deterministic") {
  const auto cfg = tiny_config(2, 2);
  const MaskedModel m(cfg, 8);
  const auto b = random_batch(cfg, 3, 5, 1);
  const auto mask = random_vector(m.maskable_count(), 3, 0.0, 1.0);
  const auto delta = random_vector(3 * 5 * 4, 4, -0.1, 0.1);
  const ForwardOptions o{.mask_values = mask, .perturbation = delta};
  CHECK(forward(m, b, o).logits == forward(m, b, o).logits);
}

TEST_CASE("contract violations") {
  const auto cfg = tiny_config();
  const MaskedModel m(cfg, 1);
  const auto b = random_batch(cfg, 2, 4, 1);
  const std::vector<double> short_mask(3, 1.0);
  CHECK_THROWS_AS(forward(m, b, {.mask_values = short_mask}), ContractViolation);
  const std::vector<double> short_delta(5, 0.0);
  CHECK_THROWS_AS(forward(m, b, {.perturbation = short_delta}), ContractViolation);
  CHECK_THROWS_AS(loss_and_grads(m, b, {}, {.mask = true}), ContractViolation);
  auto bad = b;
  bad.token_ids[1] = cfg.vocab_size;
  CHECK_THROWS_AS(forward(m, bad), ContractViolation);
  bad = b;
  bad.labels[0] = cfg.num_classes;
  CHECK_THROWS_AS(loss_and_grads(m, bad, {}, {}), ContractViolation);
}

TEST_CASE("snapshot semantics") {
  MaskedModel m(tiny_config(), 2);
  CHECK_THROWS_AS(m.theta0(), StateError);
  CHECK_THROWS_AS(m.reset_to_pretrained(), StateError);
  m.snapshot_pretrained();
  CHECK_THROWS_AS(m.snapshot_pretrained(), StateError);
  const std::vector<double> snap(m.theta().begin(), m.theta().end());
  for (auto& v : m.theta()) v += 0.5;
  CHECK(std::vector<double>(m.theta0().begin(), m.theta0().end()) == snap);
  m.reset_to_pretrained();
  CHECK(std::vector<double>(m.theta().begin(), m.theta().end()) == snap);
}

TEST_CASE("gradient w.r.t. a zero perturbation is the gradient w.r.t. embedding outputs") {
  const auto cfg = tiny_config(2, 2);
  const MaskedModel m(cfg, 21);
  const auto b = random_batch(cfg, 3, 5, 6, 1);
  const std::vector<double> zero(3 * 5 * 4, 0.0);
  const auto with = loss_and_grads(m, b, {.perturbation = zero}, {.theta = true, .perturbation = true});
  const auto without = loss_and_grads(m, b, {}, {.theta = true, .perturbation = true});
  CHECK(with.perturbation == without.perturbation);
  // token-embedding gradient is the per-token sum of embedding-output gradients
  const auto& tok = m.layout().slot("embed.token");
  std::vector<double> summed(tok.size(), 0.0);
  for (int i = 0; i < b.size * b.seq_len; ++i) {
    for (int d = 0; d < 4; ++d) {
      summed[static_cast<std::size_t>(b.token_ids[static_cast<std::size_t>(i)] * 4 + d)] += with.perturbation[static_cast<std::size_t>(i * 4 + d)];
    }
  }
  for (std::size_t i = 0; i < summed.size(); ++i) {
    CHECK(summed[i] == doctest::Approx(with.theta[tok.offset + i]).epsilon(1e-12).scale(1e-15));
  }
}

TEST_CASE("theta, mask and perturbation gradients match central differences") {
  const double h = 1e-5;
  for (std::uint64_t trial = 0; trial < 6; ++trial) {
    const auto cfg = tiny_config(trial % 2 == 0 ? 1 : 2, trial % 3 == 0 ? 1 : 2);
    MaskedModel m(cfg, 100 + trial);
    const auto b = random_batch(cfg, 3, 5, 200 + trial, 2);
    auto mask = random_vector(m.maskable_count(), 300 + trial, 0.2, 1.0);
    auto delta = random_vector(3 * 5 * 4, 400 + trial, -0.3, 0.3);
    const auto r = loss_and_grads(m, b, {.mask_values = mask, .perturbation = delta},
                                  {.theta = true, .mask = true, .perturbation = true});
    std::vector<double> theta(m.theta().begin(), m.theta().end());
    auto loss_at = [&] {
      std::copy(theta.begin(), theta.end(), m.theta().begin());
      return loss_and_grads(m, b, {.mask_values = mask, .perturbation = delta}, {}).loss;
    };
    int bad = 0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      if (!m.layout().slots().empty() && i >= m.layout().slot("mlm.weight").offset) break;
      const double fd = central_difference(theta, i, h, loss_at);
      if (!gradients_agree(r.theta[i], fd)) ++bad;
    }
    for (std::size_t i = 0; i < mask.size(); ++i) {
      const double fd = central_difference(mask, i, h, loss_at);
      if (!gradients_agree(r.mask[i], fd)) ++bad;
    }
    for (std::size_t i = 0; i < delta.size(); ++i) {
      const double fd = central_difference(delta, i, h, loss_at);
      if (!gradients_agree(r.perturbation[i], fd)) ++bad;
    }
    CHECK(bad == 0);
  }
}

TEST_CASE("gradients with dropout active match finite differences under a fixed dropout seed") {
  const auto cfg = tiny_config(2, 2);
  MaskedModel m(cfg, 55);
  const auto b = random_batch(cfg, 2, 5, 56);
  const ForwardOptions o{.dropout = 0.3, .dropout_seed = 99};
  const auto r = loss_and_grads(m, b, o, {.theta = true});
  std::vector<double> theta(m.theta().begin(), m.theta().end());
  auto loss_at = [&] {
    std::copy(theta.begin(), theta.end(), m.theta().begin());
    return loss_and_grads(m, b, o, {}).loss;
  };
  int bad = 0;
  for (std::size_t i = 0; i < m.layout().slot("mlm.weight").offset; i += 3) {
    if (!gradients_agree(r.theta[i], central_difference(theta, i, 1e-5, loss_at))) ++bad;
  }
  CHECK(bad == 0);
}

TEST_CASE("masked-LM gradients match finite differences") {
  const auto cfg = tiny_config(1, 2);
  MaskedModel m(cfg, 31);
  const auto b = random_batch(cfg, 2, 5, 32);
  std::vector<std::int32_t> targets(10, -1);
  targets[2] = 4;
  targets[6] = 1;
  targets[9] = 5;
  const auto r = masked_lm_loss_and_grads(m, b, targets, {});
  std::vector<double> theta(m.theta().begin(), m.theta().end());
  auto loss_at = [&] {
    std::copy(theta.begin(), theta.end(), m.theta().begin());
    return masked_lm_loss_and_grads(m, b, targets, {}).loss;
  };
  int bad = 0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (!gradients_agree(r.theta[i], central_difference(theta, i, 1e-5, loss_at))) ++bad;
  }
  CHECK(bad == 0);
  // the classifier head is untouched by the masked-LM objective
  const auto& head = m.layout().slot("classifier.weight");
  for (std::size_t i = 0; i < head.size(); ++i) CHECK(r.theta[head.offset + i] == 0.0);
}

TEST_CASE("reinitialize redraws only selected entries") {
  MaskedModel m(tiny_config(), 4);
  const std::vector<double> before(m.theta().begin(), m.theta().end());
  std::vector<std::uint8_t> which(before.size(), 0);
  which[3] = which[10] = 1;
  m.reinitialize(which, 999);
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (which[i] != 0) CHECK(m.theta()[i] != before[i]);
    else CHECK(m.theta()[i] == before[i]);
  }
}
