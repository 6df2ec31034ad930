#include <doctest.h>

#include <cmath>
#include <vector>

#include "rticket/advloss.hpp"
#include "rticket/errors.hpp"
#include "test_support.hpp"

using namespace rticket;

namespace {

double frob(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) {
    s += v * v;
  }
  return std::sqrt(s);
}

double loss_at(const MaskedModel& m, const Batch& b, std::span<const double> mask, std::span<const double> delta) {
  ForwardOptions o;
  o.mask_values = mask;
  o.perturbation = delta;
  return loss_and_grads(m, b, o, {}).loss;
}

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.vocab_size = 12;
  cfg.embed_dim = 8;
  cfg.num_layers = 1;
  cfg.num_heads = 2;
  cfg.mlp_dim = 12;
  cfg.max_seq_len = 6;
  cfg.num_classes = 2;
  return cfg;
}

}  // namespace

TEST_CASE("init_perturbation") {
  CHECK(init_perturbation(3, 10, 0.0, 7) == std::vector<double>(30, 0.0));
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto d = init_perturbation(4, 15, 0.37, seed);
    for (std::size_t b = 0; b < 4; ++b) {
      CHECK(std::abs(frob(std::span<const double>(d).subspan(b * 15, 15)) - 0.37) < 1e-6);
    }
    CHECK(init_perturbation(4, 15, 0.37, seed) == d);
  }
  CHECK(init_perturbation(1, 8, 1.0, 1) != init_perturbation(1, 8, 1.0, 2));
}

TEST_CASE("projection and step rules") {
  std::vector<double> d{3.0, 4.0};
  project_to_ball(d, 1.0);
  CHECK(d[0] == doctest::Approx(0.6));
  CHECK(d[1] == doctest::Approx(0.8));

  std::vector<double> inside{0.1, 0.2};
  project_to_ball(inside, 1.0);
  CHECK(inside == std::vector<double>{0.1, 0.2});

  AdvConfig cfg;
  cfg.eta = 0.5;
  std::vector<double> delta{0.25, -1.0};
  pgd_step(delta, std::vector<double>{0.0, 0.0}, cfg);
  CHECK(delta == std::vector<double>{0.25, -1.0});

  // Unbounded: a normalized step of length eta.
  std::vector<double> z{0.0, 0.0};
  pgd_step(z, std::vector<double>{3.0, 4.0}, cfg);
  CHECK(z[0] == doctest::Approx(0.3));
  CHECK(z[1] == doctest::Approx(0.4));

  // Per-example normalization: one slice skipped, the other stepped.
  std::vector<double> two{0.0, 0.0, 0.0, 0.0};
  pgd_step(two, std::vector<double>{0.0, 0.0, 0.0, 2.0}, cfg, 2);
  CHECK(two == std::vector<double>{0.0, 0.0, 0.0, 0.5});
}

TEST_CASE("config validation") {
  AdvConfig cfg;
  cfg.steps = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.steps = 1;
  cfg.epsilon = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(parse_adv_variant("pgd") == AdvVariant::pgd);
  CHECK_THROWS_AS(parse_adv_variant("fgsm"), ConfigError);
}

TEST_CASE("adversarial loss properties") {
  const auto cfg_model = small_config();
  MaskedModel model(cfg_model, 3);
  const auto batch = testing::random_batch(cfg_model, 4, 6, 9, 2);
  const std::vector<double> ones(model.maskable_count(), 1.0);
  const auto per = static_cast<std::size_t>(6 * cfg_model.embed_dim);

  SUBCASE("eta zero leaves the loss at the random start") {
    AdvConfig cfg;
    cfg.eta = 0.0;
    const auto r = adversarial_loss(model, batch, ones, cfg, 5);
    const auto d0 = init_perturbation(4, per, cfg.epsilon0, 5);
    CHECK(r.loss == loss_at(model, batch, ones, d0));
    CHECK(r.perturbation == d0);
  }

  SUBCASE("single step matches a hand-rolled ascent") {
    AdvConfig cfg;
    cfg.steps = 1;
    cfg.eta = 0.2;
    const auto r = adversarial_loss(model, batch, ones, cfg, 11);
    auto d = init_perturbation(4, per, cfg.epsilon0, 11);
    ForwardOptions o;
    o.mask_values = ones;
    o.perturbation = d;
    const auto g = loss_and_grads(model, batch, o, GradRequest{.perturbation = true}).perturbation;
    for (std::size_t b = 0; b < 4; ++b) {
      double n = 0.0;
      for (std::size_t i = 0; i < per; ++i) n += g[b * per + i] * g[b * per + i];
      n = std::sqrt(n);
      for (std::size_t i = 0; i < per; ++i) d[b * per + i] += 0.2 * g[b * per + i] / n;
    }
    for (std::size_t i = 0; i < d.size(); ++i) {
      CHECK(r.perturbation[i] == doctest::Approx(d[i]).epsilon(1e-12));
    }
    CHECK(r.loss == doctest::Approx(loss_at(model, batch, ones, d)).epsilon(1e-12));
  }

  SUBCASE("forward pass accounting") {
    AdvConfig cfg;
    for (int k : {1, 3, 5}) {
      cfg.steps = k;
      cfg.variant = AdvVariant::pgd;
      CHECK(adversarial_loss(model, batch, ones, cfg, 1).forward_passes == k + 1);
      cfg.variant = AdvVariant::freelb_accumulate;
      CHECK(adversarial_loss(model, batch, ones, cfg, 1).forward_passes == k);
    }
  }

  SUBCASE("bounded perturbations stay inside the ball") {
    AdvConfig cfg;
    cfg.eta = 0.5;
    cfg.epsilon = 0.3;
    cfg.epsilon0 = 0.1;
    for (int k = 1; k <= 6; ++k) {
      cfg.steps = k;
      const auto r = adversarial_loss(model, batch, ones, cfg, 2);
      for (std::size_t b = 0; b < 4; ++b) {
        CHECK(frob(std::span<const double>(r.perturbation).subspan(b * per, per)) <= 0.3 + 1e-12);
      }
    }
  }

  SUBCASE("deterministic per seed") {
    AdvConfig cfg;
    const auto a = adversarial_loss(model, batch, ones, cfg, 8);
    const auto b = adversarial_loss(model, batch, ones, cfg, 8);
    CHECK(a.loss == b.loss);
    CHECK(a.mask_grad == b.mask_grad);
  }

  SUBCASE("freelb gradient is the mean over ascent passes") {
    AdvConfig cfg;
    cfg.variant = AdvVariant::freelb_accumulate;
    cfg.steps = 3;
    const auto r = adversarial_loss(model, batch, ones, cfg, 4);
    auto d = init_perturbation(4, per, cfg.epsilon0, 4);
    std::vector<double> acc(ones.size(), 0.0);
    double loss = 0.0;
    for (int k = 0; k < 3; ++k) {
      ForwardOptions o;
      o.mask_values = ones;
      o.perturbation = d;
      const auto g = loss_and_grads(model, batch, o, GradRequest{.mask = true, .perturbation = true});
      loss += g.loss / 3.0;
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g.mask[i] / 3.0;
      pgd_step(d, g.perturbation, cfg, 4);
    }
    CHECK(r.loss == doctest::Approx(loss).epsilon(1e-12));
    for (std::size_t i = 0; i < acc.size(); i += 17) {
      CHECK(r.mask_grad[i] == doctest::Approx(acc[i]).epsilon(1e-10));
    }
  }

  SUBCASE("mask size mismatch") {
    std::vector<double> wrong(3, 1.0);
    CHECK_THROWS_AS(adversarial_loss(model, batch, wrong, AdvConfig{}, 0), ContractViolation);
  }
}

TEST_CASE("PGD ascends the clean loss on nearly every batch") {
  const auto cfg_model = small_config();
  int ascended = 0;
  for (int trial = 0; trial < 100; ++trial) {
    MaskedModel model(cfg_model, 1000 + static_cast<std::uint64_t>(trial));
    const auto batch = testing::random_batch(cfg_model, 8, 6, 77 + static_cast<std::uint64_t>(trial), 2);
    const auto gates = GateParams::initialized(model.maskable_count(), trial, kDefaultBeta);
    const auto mask = sample_gates(gates, trial).m;
    AdvConfig cfg;
    const double clean = loss_at(model, batch, mask, {});
    const auto r = adversarial_loss(model, batch, mask, cfg, static_cast<std::uint64_t>(trial));
    ascended += r.loss >= clean ? 1 : 0;
  }
  CHECK(ascended >= 95);
}
