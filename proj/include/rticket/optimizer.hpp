#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace rticket {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// Elementwise gradient clip to [-clip, clip]; <= 0 disables.
  double clip = 1.0;
  /// Linear decay from lr to 0 over this many steps; 0 keeps lr constant.
  std::size_t total_steps = 0;

  void validate() const;
};

/// Decoupled weight decay Adam with bias correction.
class AdamW {
 public:
  AdamW(std::size_t size, AdamWConfig cfg);

  /// Entries with frozen[i] != 0 are left untouched (no moment update, no decay).
  void step(std::span<double> params, std::span<const double> grads, std::span<const std::uint8_t> frozen = {});

  double current_lr() const;
  std::size_t steps_taken() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::size_t t_ = 0;
};

}  // namespace rticket
