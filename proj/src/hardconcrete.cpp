#include "rticket/hardconcrete.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "rticket/errors.hpp"
#include "rticket/rng.hpp"

namespace rticket {

double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace {

double stretch_clamp(double s, double gamma, double zeta) {
  return std::clamp(s * (zeta - gamma) + gamma, 0.0, 1.0);
}

}  // namespace

GateParams::GateParams(std::vector<double> log_alpha, double beta, double gamma, double zeta)
    : log_alpha_(std::move(log_alpha)), beta_(log_alpha_.size(), beta), gamma_(gamma), zeta_(zeta) {
  if (!(beta > 0.0)) {
    throw DomainError("hard-concrete temperature must be positive, got " + std::to_string(beta));
  }
  validate();
}

GateParams::GateParams(std::vector<double> log_alpha, std::vector<double> beta, double gamma,
                       double zeta)
    : log_alpha_(std::move(log_alpha)), beta_(std::move(beta)), gamma_(gamma), zeta_(zeta) {
  validate();
}

void GateParams::validate() const {
  if (beta_.size() != log_alpha_.size()) {
    throw ContractViolation("gate temperature count does not match gate count");
  }
  for (std::size_t i = 0; i < beta_.size(); ++i) {
    if (!(beta_[i] > 0.0)) {
      throw DomainError("hard-concrete temperature must be positive (gate " + std::to_string(i) +
                        ")");
    }
  }
  if (!(gamma_ < 0.0 && zeta_ > 1.0)) {
    throw DomainError("stretch interval must satisfy gamma < 0 < 1 < zeta");
  }
}

GateParams GateParams::initialized(std::size_t count, std::uint64_t seed, double beta, double mean,
                                   double stddev) {
  Rng rng(derive_seed(seed, 0x6A7E));
  std::vector<double> log_alpha(count);
  for (double& v : log_alpha) {
    v = rng.normal(mean, stddev);
  }
  return GateParams(std::move(log_alpha), beta);
}

GateSample sample_gates_with_uniforms(const GateParams& params, std::span<const double> uniforms) {
  if (uniforms.size() != params.size()) {
    throw ContractViolation("uniform draw count does not match gate count");
  }
  const std::size_t n = params.size();
  const auto log_alpha = params.log_alpha();
  const auto beta = params.beta();
  GateSample out;
  out.u.resize(n);
  out.s.resize(n);
  out.m.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = std::clamp(uniforms[i], kUniformClamp, 1.0 - kUniformClamp);
    const double s = sigmoid((std::log(u / (1.0 - u)) + log_alpha[i]) / beta[i]);
    out.u[i] = u;
    out.s[i] = s;
    out.m[i] = stretch_clamp(s, params.gamma(), params.zeta());
  }
  return out;
}

GateSample sample_gates(const GateParams& params, std::uint64_t seed) {
  std::vector<double> u(params.size());
  for (std::size_t i = 0; i < u.size(); ++i) {
    u[i] = hashed_uniform(seed, i);
  }
  return sample_gates_with_uniforms(params, u);
}

double expected_l0(const GateParams& params) {
  if (params.empty()) {
    throw DomainError("expected_l0 of an empty gate set");
  }
  const double shift = std::log(-params.gamma() / params.zeta());
  const auto log_alpha = params.log_alpha();
  const auto beta = params.beta();
  double total = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    total += sigmoid(log_alpha[i] - beta[i] * shift);
  }
  return total / static_cast<double>(params.size());
}

std::vector<double> expected_l0_gradient(const GateParams& params) {
  if (params.empty()) {
    throw DomainError("expected_l0 of an empty gate set");
  }
  const double shift = std::log(-params.gamma() / params.zeta());
  const double inv_n = 1.0 / static_cast<double>(params.size());
  const auto log_alpha = params.log_alpha();
  const auto beta = params.beta();
  std::vector<double> grad(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double p = sigmoid(log_alpha[i] - beta[i] * shift);
    grad[i] = p * (1.0 - p) * inv_n;
  }
  return grad;
}

std::vector<double> inference_gate(const GateParams& params) {
  std::vector<double> out(params.size());
  const auto log_alpha = params.log_alpha();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = stretch_clamp(sigmoid(log_alpha[i]), params.gamma(), params.zeta());
  }
  return out;
}

std::vector<double> gate_gradients(const GateParams& params, const GateSample& sample,
                                   std::span<const double> upstream) {
  if (sample.s.size() != params.size() || upstream.size() != params.size()) {
    throw ContractViolation("gate_gradients: sample/upstream size does not match gate count");
  }
  const double width = params.zeta() - params.gamma();
  const auto beta = params.beta();
  std::vector<double> grad(params.size(), 0.0);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double stretched = sample.s[i] * width + params.gamma();
    if (stretched <= 0.0 || stretched >= 1.0) {
      continue;
    }
    const double s = sample.s[i];
    grad[i] = upstream[i] * width * s * (1.0 - s) / beta[i];
  }
  return grad;
}

double polarization_fraction(const GateParams& params, double tolerance) {
  if (params.empty()) {
    return 0.0;
  }
  const auto gates = inference_gate(params);
  const auto polarized = std::count_if(gates.begin(), gates.end(), [tolerance](double g) {
    return g <= tolerance || g >= 1.0 - tolerance;
  });
  return static_cast<double>(polarized) / static_cast<double>(gates.size());
}

}  // namespace rticket
