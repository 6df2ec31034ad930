#include "rticket/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "rticket/errors.hpp"

namespace rticket {

void AdamWConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) {
    throw ConfigError("optimizer lr must be positive, got " + std::to_string(lr));
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("optimizer betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) {
    throw ConfigError("optimizer eps must be positive");
  }
  if (weight_decay < 0.0) {
    throw ConfigError("weight decay must be non-negative");
  }
}

AdamW::AdamW(std::size_t size, AdamWConfig cfg) : cfg_(cfg), m_(size, 0.0), v_(size, 0.0) { cfg_.validate(); }

double AdamW::current_lr() const {
  if (cfg_.total_steps == 0) {
    return cfg_.lr;
  }
  const double frac = static_cast<double>(std::min(t_, cfg_.total_steps)) / static_cast<double>(cfg_.total_steps);
  return cfg_.lr * (1.0 - frac);
}

void AdamW::step(std::span<double> params, std::span<const double> grads, std::span<const std::uint8_t> frozen) {
  if (params.size() != m_.size() || grads.size() != m_.size() || (!frozen.empty() && frozen.size() != m_.size())) {
    throw ContractViolation("AdamW::step size mismatch");
  }
  const double lr = current_lr();
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!frozen.empty() && frozen[i] != 0) {
      continue;
    }
    double g = grads[i];
    if (cfg_.clip > 0.0) {
      g = std::clamp(g, -cfg_.clip, cfg_.clip);
    }
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g * g;
    const double mh = m_[i] / bc1;
    const double vh = v_[i] / bc2;
    params[i] -= lr * cfg_.weight_decay * params[i];
    params[i] -= lr * mh / (std::sqrt(vh) + cfg_.eps);
  }
}

}  // namespace rticket
