#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "rticket/model.hpp"
#include "rticket/rng.hpp"

namespace rticket::testing {

inline ModelConfig tiny_config(int layers = 1, int heads = 2) {
  ModelConfig cfg;
  cfg.vocab_size = 7;
  cfg.embed_dim = 4;
  cfg.num_layers = layers;
  cfg.num_heads = heads;
  cfg.mlp_dim = 6;
  cfg.max_seq_len = 5;
  cfg.num_classes = 3;
  return cfg;
}

/// Random batch; the final `pad_tail` positions of odd examples are padding.
inline Batch random_batch(const ModelConfig& cfg, int size, int seq_len, std::uint64_t seed, int pad_tail = 0) {
  Rng rng(seed);
  Batch b;
  b.size = size;
  b.seq_len = seq_len;
  for (int i = 0; i < size; ++i) {
    for (int t = 0; t < seq_len; ++t) {
      const bool pad = (i % 2 == 1) && t >= seq_len - pad_tail && t > 0;
      b.token_ids.push_back(pad ? 0 : static_cast<std::int32_t>(1 + rng.below(static_cast<std::uint64_t>(cfg.vocab_size - 1))));
      b.pad_mask.push_back(pad ? 1 : 0);
    }
    b.labels.push_back(static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(cfg.num_classes))));
  }
  return b;
}

inline std::vector<double> random_vector(std::size_t n, std::uint64_t seed, double lo, double hi) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) {
    x = rng.uniform(lo, hi);
  }
  return v;
}

/// Central finite difference of f with respect to coordinate i of x.
inline double central_difference(std::vector<double>& x, std::size_t i, double h,
                                 const std::function<double()>& f) {
  const double saved = x[i];
  x[i] = saved + h;
  const double up = f();
  x[i] = saved - h;
  const double dn = f();
  x[i] = saved;
  return (up - dn) / (2.0 * h);
}

/// Relative agreement with an absolute floor for entries that are numerically zero.
inline bool gradients_agree(double analytic, double numeric, double rel_tol = 1e-4, double abs_floor = 1e-9) {
  return std::abs(analytic - numeric) <= rel_tol * std::max(std::abs(analytic), std::abs(numeric)) + abs_floor;
}

}  // namespace rticket::testing
