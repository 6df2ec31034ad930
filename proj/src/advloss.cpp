#include "rticket/advloss.hpp"

#include <cmath>

#include "rticket/errors.hpp"
#include "rticket/rng.hpp"

namespace rticket {

std::string to_string(AdvVariant v) { return v == AdvVariant::pgd ? "pgd" : "freelb_accumulate"; }

AdvVariant parse_adv_variant(const std::string& name) {
  if (name == "pgd") {
    return AdvVariant::pgd;
  }
  if (name == "freelb_accumulate" || name == "freelb") {
    return AdvVariant::freelb_accumulate;
  }
  throw ConfigError("unknown adversarial variant '" + name + "' (expected pgd or freelb_accumulate)");
}

void AdvConfig::validate() const {
  if (!(eta >= 0.0) || !std::isfinite(eta)) {
    throw ConfigError("adv.eta must be non-negative");
  }
  if (!(epsilon0 >= 0.0)) {
    throw ConfigError("adv.epsilon0 must be non-negative");
  }
  if (steps < 1) {
    throw ConfigError("adv.steps must be >= 1");
  }
  if (epsilon && !(*epsilon > 0.0)) {
    throw ConfigError("adv.epsilon must be positive when bounded");
  }
}

namespace {

double norm(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) {
    s += v * v;
  }
  return std::sqrt(s);
}

std::size_t slice_size(std::size_t total, std::size_t examples) {
  if (examples == 0 || total % examples != 0) {
    throw ContractViolation("perturbation size is not a multiple of the example count");
  }
  return total / examples;
}

}  // namespace

std::vector<double> init_perturbation(std::size_t examples, std::size_t per_example, double epsilon0,
                                      std::uint64_t seed) {
  std::vector<double> delta(examples * per_example, 0.0);
  if (epsilon0 == 0.0) {
    return delta;
  }
  for (std::size_t i = 0; i < delta.size(); ++i) {
    delta[i] = 2.0 * hashed_uniform(seed, i) - 1.0;
  }
  for (std::size_t b = 0; b < examples; ++b) {
    std::span<double> slice(delta.data() + b * per_example, per_example);
    const double n = norm(slice);
    if (n > 0.0) {
      for (auto& v : slice) {
        v *= epsilon0 / n;
      }
    }
  }
  return delta;
}

void project_to_ball(std::span<double> delta, double epsilon) {
  const double n = norm(delta);
  if (n > epsilon) {
    const double scale = epsilon / n;
    for (auto& v : delta) {
      v *= scale;
    }
  }
}

void pgd_step(std::span<double> delta, std::span<const double> grad, const AdvConfig& cfg, std::size_t examples) {
  if (delta.size() != grad.size()) {
    throw ContractViolation("pgd_step: delta and gradient sizes differ");
  }
  const std::size_t per = slice_size(delta.size(), examples);
  for (std::size_t b = 0; b < examples; ++b) {
    auto d = delta.subspan(b * per, per);
    auto g = grad.subspan(b * per, per);
    const double gn = norm(g);
    if (gn < kMinAscentNorm) {
      continue;
    }
    for (std::size_t i = 0; i < per; ++i) {
      d[i] += cfg.eta * g[i] / gn;
    }
    if (cfg.epsilon) {
      project_to_ball(d, *cfg.epsilon);
    }
  }
}

AdvResult adversarial_loss(const MaskedModel& model, const Batch& batch, std::span<const double> mask_values,
                           const AdvConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (mask_values.size() != model.maskable_count()) {
    throw ContractViolation("adversarial_loss: mask has " + std::to_string(mask_values.size()) +
                            " values, model has " + std::to_string(model.maskable_count()) + " maskable weights");
  }
  const auto examples = static_cast<std::size_t>(batch.size);
  const auto per = static_cast<std::size_t>(batch.seq_len) * static_cast<std::size_t>(model.config().embed_dim);

  AdvResult out;
  out.perturbation = init_perturbation(examples, per, cfg.epsilon0, seed);
  ForwardOptions opts;
  opts.mask_values = mask_values;

  if (cfg.variant == AdvVariant::pgd) {
    for (int k = 0; k < cfg.steps; ++k) {
      opts.perturbation = out.perturbation;
      const auto g = loss_and_grads(model, batch, opts, GradRequest{.perturbation = true});
      ++out.forward_passes;
      pgd_step(out.perturbation, g.perturbation, cfg, examples);
    }
    opts.perturbation = out.perturbation;
    auto g = loss_and_grads(model, batch, opts, GradRequest{.mask = true});
    ++out.forward_passes;
    out.loss = g.loss;
    out.mask_grad = std::move(g.mask);
    return out;
  }

  out.mask_grad.assign(mask_values.size(), 0.0);
  const double inv = 1.0 / static_cast<double>(cfg.steps);
  for (int k = 0; k < cfg.steps; ++k) {
    opts.perturbation = out.perturbation;
    const auto g = loss_and_grads(model, batch, opts, GradRequest{.mask = true, .perturbation = true});
    ++out.forward_passes;
    out.loss += g.loss * inv;
    for (std::size_t i = 0; i < out.mask_grad.size(); ++i) {
      out.mask_grad[i] += g.mask[i] * inv;
    }
    if (k + 1 < cfg.steps) {
      pgd_step(out.perturbation, g.perturbation, cfg, examples);
    }
  }
  return out;
}

}  // namespace rticket
