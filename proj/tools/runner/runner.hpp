#pragma once

// Stage orchestration over an output directory:
//
//   <out>/config.ini                    canonical settings and their hash
//   <out>/seed-<s>/pretrained.ckpt      pretrain
//   <out>/seed-<s>/finetuned.ckpt       finetune
//   <out>/seed-<s>/masks.ckpt           learn-masks (fine-tuned weights plus gates)
//   <out>/seed-<s>/tickets/*.ticket     draw, random-ticket, imp
//   <out>/seed-<s>/retrained/*.ckpt     retrain, one per ticket
//   <out>/seed-<s>/ablation/*.ckpt      ablate
//   <out>/seed-<s>/attack/*.json        attack, full per-example reports
//   <out>/seed-<s>/metrics/<stage>.jsonl
//   <out>/report/*.csv                  report
//
// Binary artifacts carry a `<file>.json` sidecar with the config hash and seed;
// every metrics line carries both as well. Loading an artifact written under a
// different config hash is refused unless `force` is set.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "config.hpp"
#include "rticket/data.hpp"
#include "rticket/model.hpp"
#include "rticket/ticket.hpp"

namespace rticket::runner {

struct RunOptions {
  std::optional<std::uint64_t> seed;  ///< run only this seed
  std::optional<std::filesystem::path> out;
  bool force = false;
};

struct TaskData {
  Corpus train;
  Corpus dev;
  Corpus test;
  Corpus pretrain;
  SubstitutionTable substitutions;
};

/// Seed-derived streams used by the stages.
enum class SeedStream : std::uint64_t { init = 1, pretrain = 2, finetune = 3, masks = 4, random = 5, reinit = 6 };

std::uint64_t stage_seed(std::uint64_t seed, SeedStream stream);

class Runner {
 public:
  Runner(RunConfig cfg, RunOptions opts = {});

  const RunConfig& config() const { return cfg_; }
  const std::filesystem::path& out_dir() const { return out_; }
  std::vector<std::uint64_t> seeds() const;
  std::filesystem::path seed_dir(std::uint64_t seed) const;

  /// One stage for every selected seed (report runs once).
  void run(Stage stage);
  /// The configured stage list, or every stage when it is empty.
  void run_all();

  TaskData load_data(std::uint64_t seed) const;
  ModelConfig model_config(const TaskData& data) const;

 private:
  void pretrain_stage(std::uint64_t seed);
  void finetune_stage(std::uint64_t seed);
  void masks_stage(std::uint64_t seed);
  void draw_stage(std::uint64_t seed);
  void random_stage(std::uint64_t seed);
  void imp_stage(std::uint64_t seed);
  void retrain_stage(std::uint64_t seed);
  void attack_stage(std::uint64_t seed);
  void ablate_stage(std::uint64_t seed);

  MaskedModel load_model(std::uint64_t seed, const std::string& name, const std::string& producer) const;
  void save_model(const MaskedModel& model, std::uint64_t seed, const std::string& name, const std::string& stage) const;
  void save_ticket_artifact(const Ticket& ticket, std::uint64_t seed, const std::string& name,
                            const std::string& stage) const;
  Ticket load_ticket_artifact(std::uint64_t seed, const std::filesystem::path& path, const ParamLayout& layout) const;
  void check_sidecar(const std::filesystem::path& artifact, std::uint64_t seed) const;
  void write_sidecar(const std::filesystem::path& artifact, std::uint64_t seed, const std::string& stage) const;
  void write_config_snapshot() const;

  RunConfig cfg_;
  RunOptions opts_;
  std::filesystem::path out_;
  std::string hash_;
};

/// Appends JSON lines to one metrics file, stamping each with the config hash and seed.
class MetricsWriter {
 public:
  MetricsWriter(const std::filesystem::path& path, std::string config_hash, std::uint64_t seed, std::string stage);
  void write(nlohmann::json record);

 private:
  std::filesystem::path path_;
  std::string hash_;
  std::uint64_t seed_;
  std::string stage_;
};

std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);

/// Name used for ticket and retrained-model files, e.g. robust-0.3.
std::string ticket_name(const std::string& provenance, double sparsity);

/// Sparsity of the robust ticket with the highest dev Aua; ties go to the lower sparsity.
double best_robust_sparsity(const std::vector<nlohmann::json>& attack_records);

}  // namespace rticket::runner
