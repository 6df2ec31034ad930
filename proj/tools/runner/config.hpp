#pragma once

// Experiment configuration: one INI file, `key = value` grouped in sections.
//
//   [run]         stages, seeds, out
//   [data]        source = synthetic | tsv, plus generator fields or file paths
//   [model]       embed_dim, layers, heads, mlp_dim
//   [pretrain]    epochs, lr, weight_decay, batch_size, mask_prob, clip
//   [finetune]    epochs, lr, weight_decay, batch_size, dropout, clip, linear_decay
//   [masks]       lambda, mask_lr, epochs, weight_decay, batch_size, beta, init_mean, init_std,
//                 adversarial, linear_decay
//   [adversarial] eta, epsilon0, steps, epsilon (none | radius), variant (pgd | freelb)
//   [prune]       sparsities, random_sparsities, imp_sparsities, imp_rounds
//   [attack]      max_examples, max_candidates, curves
//   [ablation]    sparsity (best | value), modes

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rticket/data.hpp"
#include "rticket/model.hpp"
#include "rticket/pipeline.hpp"

namespace rticket::runner {

enum class Stage { pretrain, finetune, learn_masks, draw, random_ticket, imp, retrain, attack, ablate, report };

std::string to_string(Stage s);
Stage parse_stage(const std::string& name);
/// Canonical execution order.
std::vector<Stage> all_stages();

struct TsvSource {
  std::filesystem::path train;
  std::filesystem::path dev;  ///< empty: carve dev_fraction out of train
  std::filesystem::path test;
  std::filesystem::path pretrain;  ///< empty: train text is reused
  std::filesystem::path substitutions;
  int seq_len = 31;
  double dev_fraction = 0.1;
};

struct RunConfig {
  std::vector<Stage> stages;
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path out = "runs/default";

  bool synthetic = true;
  SyntheticSpec synth;
  TsvSource tsv;

  int embed_dim = 32;
  int num_layers = 2;
  int num_heads = 2;
  int mlp_dim = 64;

  PretrainConfig pretrain;
  FinetuneConfig finetune;
  MaskTrainConfig masks;

  std::vector<double> sparsities{0.1, 0.3, 0.5, 0.7, 0.9};
  std::vector<double> random_sparsities;  ///< empty: every sparsity
  std::vector<double> imp_sparsities;
  int imp_rounds = 3;

  std::size_t attack_max_examples = 200;
  int max_candidates = 8;
  bool curves = true;

  std::optional<double> ablation_sparsity;  ///< empty: best robust ticket by dev Aua
  std::vector<AblationMode> ablation_modes{AblationMode::reinit_ticket, AblationMode::full_model_reinit_outside,
                                           AblationMode::full_model_reinit_outside_longer};

  /// Field-level checks; throws ConfigError listing every problem found.
  void validate() const;

  /// Every setting that changes results, one `section.key = value` per line.
  /// Stage list, seeds and output directory are excluded.
  std::string canonical() const;

  /// FNV-1a 64 of canonical(), as 16 hex digits.
  std::string hash() const;
};

RunConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
RunConfig load_config(const std::filesystem::path& path);

std::uint64_t fnv1a64(const std::string& bytes);

}  // namespace rticket::runner
