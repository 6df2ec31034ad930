#include "rticket/ticket.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "rticket/checkpoint.hpp"
#include "rticket/errors.hpp"
#include "rticket/rng.hpp"

namespace rticket {

std::size_t Ticket::pruned_count() const {
  return static_cast<std::size_t>(std::count(keep_mask.begin(), keep_mask.end(), std::uint8_t{0}));
}

double Ticket::sparsity() const {
  return keep_mask.empty() ? 0.0 : static_cast<double>(pruned_count()) / static_cast<double>(keep_mask.size());
}

std::vector<LayerSparsity> compute_layer_sparsity(const ParamLayout& layout, std::span<const std::uint8_t> keep) {
  if (keep.size() != layout.maskable_count()) {
    throw ContractViolation("keep mask has " + std::to_string(keep.size()) + " entries, layout has " +
                            std::to_string(layout.maskable_count()) + " maskable weights");
  }
  std::vector<LayerSparsity> out;
  for (const auto& b : layout.maskable_blocks()) {
    LayerSparsity ls{b.layer, b.kind, b.size, 0};
    for (std::size_t j = b.mask_offset; j < b.mask_offset + b.size; ++j) {
      ls.pruned += keep[j] == 0 ? 1 : 0;
    }
    out.push_back(ls);
  }
  return out;
}

std::vector<std::uint8_t> prune_lowest(std::span<const double> scores, double target_sparsity) {
  if (!(target_sparsity >= 0.0 && target_sparsity < 1.0)) {
    throw ConfigError("target sparsity must lie in [0, 1), got " + std::to_string(target_sparsity));
  }
  const auto n = scores.size();
  const auto n_prune = static_cast<std::size_t>(std::floor(target_sparsity * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<std::uint8_t> keep(n, 1);
  for (std::size_t k = 0; k < n_prune; ++k) {
    keep[order[k]] = 0;
  }
  return keep;
}

Ticket draw_ticket(std::span<const double> scores, const ParamLayout& layout, double target_sparsity,
                   std::string provenance) {
  if (scores.size() != layout.maskable_count()) {
    throw ContractViolation("score count does not match the maskable weights");
  }
  Ticket t;
  t.keep_mask = prune_lowest(scores, target_sparsity);
  t.scores.assign(scores.begin(), scores.end());
  t.target_sparsity = target_sparsity;
  t.layer_sparsity = compute_layer_sparsity(layout, t.keep_mask);
  t.provenance = std::move(provenance);
  return t;
}

Ticket draw_ticket(const GateParams& gates, const ParamLayout& layout, double target_sparsity) {
  return draw_ticket(gates.log_alpha(), layout, target_sparsity, "robust");
}

Ticket random_ticket(const Ticket& reference, const ParamLayout& layout, std::uint64_t seed) {
  const auto ref_layers = compute_layer_sparsity(layout, reference.keep_mask);
  Ticket t;
  t.keep_mask.assign(layout.maskable_count(), 1);
  t.scores.assign(layout.maskable_count(), 0.0);
  const auto& blocks = layout.maskable_blocks();
  for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
    const auto& b = blocks[bi];
    std::vector<std::size_t> idx(b.size);
    std::iota(idx.begin(), idx.end(), b.mask_offset);
    Rng rng(derive_seed(seed, bi));
    rng.shuffle(std::span<std::size_t>(idx));
    for (std::size_t k = 0; k < ref_layers[bi].pruned; ++k) {
      t.keep_mask[idx[k]] = 0;
    }
  }
  t.target_sparsity = reference.target_sparsity;
  t.layer_sparsity = compute_layer_sparsity(layout, t.keep_mask);
  t.provenance = "random";
  t.source = reference.provenance;
  return t;
}

Ticket identity_ticket(const ParamLayout& layout) {
  return draw_ticket(std::vector<double>(layout.maskable_count(), 0.0), layout, 0.0, "identity");
}

namespace {
constexpr char kTicketMagic[8] = {'R', 'T', 'T', 'I', 'C', 'K', 'E', 'T'};
}

void write_ticket(const Ticket& ticket, std::ostream& out) {
  if (ticket.scores.size() != ticket.keep_mask.size()) {
    throw ContractViolation("ticket scores and keep mask differ in length");
  }
  out.write(kTicketMagic, sizeof(kTicketMagic));
  io::write_u32(out, kTicketVersion);
  io::write_u64(out, ticket.keep_mask.size());
  io::write_u64(out, std::bit_cast<std::uint64_t>(ticket.target_sparsity));
  io::write_string(out, ticket.provenance);
  io::write_string(out, ticket.source);
  std::vector<char> bits((ticket.keep_mask.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < ticket.keep_mask.size(); ++i) {
    if (ticket.keep_mask[i] != 0) {
      bits[i / 8] = static_cast<char>(bits[i / 8] | (1 << (i % 8)));
    }
  }
  out.write(bits.data(), static_cast<std::streamsize>(bits.size()));
  for (double s : ticket.scores) {
    io::write_u64(out, std::bit_cast<std::uint64_t>(s));
  }
  if (!out) {
    throw FormatError("failed to write ticket");
  }
}

Ticket read_ticket(std::istream& in, const ParamLayout& layout) {
  char magic[8] = {};
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kTicketMagic, sizeof(magic)) != 0) {
    throw FormatError("not a ticket file (bad magic)");
  }
  if (const auto v = io::read_u32(in); v != kTicketVersion) {
    throw FormatError("unsupported ticket version " + std::to_string(v));
  }
  const auto n = io::read_u64(in);
  if (n != layout.maskable_count()) {
    throw FormatError("ticket covers " + std::to_string(n) + " weights, model has " +
                      std::to_string(layout.maskable_count()));
  }
  Ticket t;
  t.target_sparsity = std::bit_cast<double>(io::read_u64(in));
  t.provenance = io::read_string(in);
  t.source = io::read_string(in);
  std::vector<char> bits((n + 7) / 8);
  in.read(bits.data(), static_cast<std::streamsize>(bits.size()));
  if (!in) {
    throw FormatError("truncated ticket mask");
  }
  t.keep_mask.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    t.keep_mask[i] = static_cast<std::uint8_t>((bits[i / 8] >> (i % 8)) & 1);
  }
  t.scores.resize(n);
  for (auto& s : t.scores) {
    s = std::bit_cast<double>(io::read_u64(in));
  }
  t.layer_sparsity = compute_layer_sparsity(layout, t.keep_mask);
  return t;
}

void save_ticket(const Ticket& ticket, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw FormatError("cannot open '" + path.string() + "' for writing");
  }
  write_ticket(ticket, out);
}

Ticket load_ticket(const std::filesystem::path& path, const ParamLayout& layout) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw FormatError("cannot open ticket '" + path.string() + "'");
  }
  return read_ticket(in, layout);
}

}  // namespace rticket
