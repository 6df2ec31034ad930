#pragma once

// Hard-concrete stochastic gates: reparameterized sampling, the expected-L0
// penalty, deterministic inference gating and the gradients of all three with
// respect to the gate locations (log alpha).

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace rticket {

inline constexpr double kDefaultGamma = -0.1;
inline constexpr double kDefaultZeta = 1.1;
inline constexpr double kDefaultBeta = 2.0 / 3.0;
/// Uniform draws are clamped to (kUniformClamp, 1 - kUniformClamp) before the logit.
inline constexpr double kUniformClamp = 1e-6;

double sigmoid(double x);

class GateParams {
 public:
  GateParams() = default;
  /// One temperature shared by every gate.
  GateParams(std::vector<double> log_alpha, double beta, double gamma = kDefaultGamma,
             double zeta = kDefaultZeta);
  GateParams(std::vector<double> log_alpha, std::vector<double> beta, double gamma = kDefaultGamma,
             double zeta = kDefaultZeta);

  /// log_alpha ~ Normal(mean, stddev), so gates start near open.
  static GateParams initialized(std::size_t count, std::uint64_t seed, double beta = kDefaultBeta,
                                double mean = 2.0, double stddev = 0.01);

  std::size_t size() const { return log_alpha_.size(); }
  bool empty() const { return log_alpha_.empty(); }

  std::span<double> log_alpha() { return log_alpha_; }
  std::span<const double> log_alpha() const { return log_alpha_; }
  std::span<const double> beta() const { return beta_; }
  double gamma() const { return gamma_; }
  double zeta() const { return zeta_; }

 private:
  void validate() const;

  std::vector<double> log_alpha_;
  std::vector<double> beta_;
  double gamma_ = kDefaultGamma;
  double zeta_ = kDefaultZeta;
};

struct GateSample {
  std::vector<double> u;  ///< uniform draw, clamped into (0,1)
  std::vector<double> s;  ///< binary-concrete variable
  std::vector<double> m;  ///< stretched and clamped gate value in [0,1]
};

/// Draws u_i as a pure function of (seed, i), so partitioned evaluation is
/// reproducible regardless of order.
GateSample sample_gates(const GateParams& params, std::uint64_t seed);

/// Same transform with caller-provided uniforms (clamped like the seeded path).
GateSample sample_gates_with_uniforms(const GateParams& params, std::span<const double> uniforms);

/// Expected fraction of non-zero gates, in [0,1].
double expected_l0(const GateParams& params);

/// d expected_l0 / d log_alpha_i = sigmoid'(log_alpha_i - beta_i log(-gamma/zeta)) / n.
std::vector<double> expected_l0_gradient(const GateParams& params);

/// clamp(sigmoid(log_alpha)(zeta - gamma) + gamma, 0, 1).
std::vector<double> inference_gate(const GateParams& params);

/// upstream_i * dm_i/dlog_alpha_i, with u held fixed. Zero where m was clamped.
std::vector<double> gate_gradients(const GateParams& params, const GateSample& sample,
                                   std::span<const double> upstream);

/// Fraction of inference gates within `tolerance` of 0 or 1.
double polarization_fraction(const GateParams& params, double tolerance = 0.05);

}  // namespace rticket
