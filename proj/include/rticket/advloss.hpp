#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rticket/model.hpp"

namespace rticket {

enum class AdvVariant { pgd, freelb_accumulate };

std::string to_string(AdvVariant v);
AdvVariant parse_adv_variant(const std::string& name);

struct AdvConfig {
  double eta = 0.03;       ///< ascent step size
  double epsilon0 = 0.05;  ///< norm of the random start
  int steps = 5;           ///< ascent steps
  std::optional<double> epsilon;  ///< ball radius; empty means unbounded
  AdvVariant variant = AdvVariant::pgd;

  void validate() const;
};

/// Gradient norms below this skip the ascent step.
inline constexpr double kMinAscentNorm = 1e-12;

/// Uniform noise on [-1, 1] scaled so each of the `examples` equal slices has
/// Frobenius norm epsilon0. Zero tensor when epsilon0 == 0.
std::vector<double> init_perturbation(std::size_t examples, std::size_t per_example, double epsilon0,
                                      std::uint64_t seed);

/// Scale `delta` onto the Frobenius ball of radius epsilon when it lies outside.
void project_to_ball(std::span<double> delta, double epsilon);

/// delta <- Proj(delta + eta * grad / ||grad||), applied independently to each
/// of the `examples` equal slices.
void pgd_step(std::span<double> delta, std::span<const double> grad, const AdvConfig& cfg,
              std::size_t examples = 1);

struct AdvResult {
  double loss = 0.0;               ///< loss at the final (pgd) or averaged over passes (freelb)
  std::vector<double> mask_grad;   ///< dL/dm per maskable weight; chain with gate_gradients
  std::vector<double> perturbation;  ///< final delta
  int forward_passes = 0;
};

/// Inner maximization over embedding-output perturbations with frozen weights.
/// pgd: K ascent passes then one loss pass (K+1 forward passes).
/// freelb_accumulate: K passes, each contributing loss and mask gradient / K.
AdvResult adversarial_loss(const MaskedModel& model, const Batch& batch, std::span<const double> mask_values,
                           const AdvConfig& cfg, std::uint64_t seed);

}  // namespace rticket
