#pragma once

// Ticket file (little-endian):
//   magic "RTTICKET", version u32, count u64, target_sparsity f64 (as u64 bits),
//   provenance string, source string (u32 length + bytes),
//   keep_mask bit-packed, LSB first, ceil(count / 8) bytes,
//   scores f64[count] (as u64 bits).

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "rticket/hardconcrete.hpp"
#include "rticket/model.hpp"

namespace rticket {

inline constexpr std::uint32_t kTicketVersion = 1;

struct LayerSparsity {
  int layer = 0;
  MatrixKind kind = MatrixKind::other;
  std::size_t total = 0;
  std::size_t pruned = 0;

  double sparsity() const { return total == 0 ? 0.0 : static_cast<double>(pruned) / static_cast<double>(total); }
  bool operator==(const LayerSparsity&) const = default;
};

struct Ticket {
  std::vector<std::uint8_t> keep_mask;  ///< 1 keeps the weight, 0 prunes it
  std::vector<double> scores;           ///< ranking key per maskable weight
  double target_sparsity = 0.0;
  std::vector<LayerSparsity> layer_sparsity;  ///< one entry per maskable matrix
  std::string provenance;                     ///< robust | imp | random | ablation tag
  std::string source;                         ///< free-form origin (run directory, seed, ...)

  std::size_t size() const { return keep_mask.size(); }
  std::size_t pruned_count() const;
  double sparsity() const;
};

/// Pruned counts per maskable matrix.
std::vector<LayerSparsity> compute_layer_sparsity(const ParamLayout& layout, std::span<const std::uint8_t> keep);

/// Keep mask with the floor(p * N) lowest scores pruned; ties go to the lower index first.
std::vector<std::uint8_t> prune_lowest(std::span<const double> scores, double target_sparsity);

/// prune_lowest plus per-matrix accounting.
Ticket draw_ticket(std::span<const double> scores, const ParamLayout& layout, double target_sparsity,
                   std::string provenance = "robust");
Ticket draw_ticket(const GateParams& gates, const ParamLayout& layout, double target_sparsity);

/// Uniformly random pruning with the reference's pruned count in every matrix.
Ticket random_ticket(const Ticket& reference, const ParamLayout& layout, std::uint64_t seed);

Ticket identity_ticket(const ParamLayout& layout);

void write_ticket(const Ticket& ticket, std::ostream& out);
Ticket read_ticket(std::istream& in, const ParamLayout& layout);
void save_ticket(const Ticket& ticket, const std::filesystem::path& path);
Ticket load_ticket(const std::filesystem::path& path, const ParamLayout& layout);

}  // namespace rticket
