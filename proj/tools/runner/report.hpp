#pragma once

// Aggregation of per-seed metrics into summary tables.
//
//   sweep.csv     clean accuracy / Aua / success rate / queries vs sparsity per method and split
//   layers.csv    surviving-weight percentage per (layer, matrix) for every ticket
//   curves.csv    per-epoch loss, accuracy, Aua, expected L0 and polarization
//   ablation.csv  robust ticket against its ablated variants
//
// Each statistic is a mean and a sample standard deviation over seeds (0 for one seed).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace rticket::runner {

struct Stat {
  int n = 0;
  double mean = 0.0;
  double std = 0.0;
};

Stat stat_of(const std::vector<double>& values);

struct SweepRow {
  std::string method;
  double sparsity = 0.0;
  std::string split;
  Stat clean, aua, suc, queries;
};

struct LayerRow {
  std::string method;
  double sparsity = 0.0;
  int layer = 0;
  std::string kind;
  Stat surviving;  ///< percent of weights kept
};

struct CurveRow {
  std::string stage;
  std::string model;
  int epoch = 0;
  Stat loss;
  std::optional<Stat> clean, aua, l0, polarization;
};

struct AblationRow {
  std::string variant;
  Stat sparsity, clean, aua;
};

struct Report {
  std::string config_hash;
  std::vector<std::uint64_t> seeds;
  std::vector<SweepRow> sweep;
  std::vector<LayerRow> layers;
  std::vector<CurveRow> curves;
  std::vector<AblationRow> ablation;

  const SweepRow* find_sweep(const std::string& method, double sparsity, const std::string& split) const;
  const AblationRow* find_ablation(const std::string& variant) const;
};

/// Reads every seed-* directory under `run_dir`. Throws StateError listing missing
/// inputs, or records whose config hash differs from `expected_hash` (or from each
/// other) unless `force`.
Report build_report(const std::filesystem::path& run_dir, const std::optional<std::string>& expected_hash, bool force);

void write_report(const Report& report, const std::filesystem::path& dir);

}  // namespace rticket::runner
