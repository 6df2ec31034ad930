#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rticket/advloss.hpp"
#include "rticket/attack.hpp"
#include "rticket/data.hpp"
#include "rticket/hardconcrete.hpp"
#include "rticket/model.hpp"
#include "rticket/ticket.hpp"

namespace rticket {

struct PretrainConfig {
  int epochs = 3;
  double lr = 1e-3;
  double weight_decay = 0.01;
  int batch_size = 32;
  double mask_prob = 0.15;
  double clip = 1.0;

  void validate() const;
};

struct FinetuneConfig {
  int epochs = 3;
  double lr = 1e-3;
  double weight_decay = 0.01;
  int batch_size = 32;
  double dropout = 0.1;
  double clip = 1.0;
  bool linear_decay = false;

  void validate() const;
};

struct MaskTrainConfig {
  double lambda = 0.5;
  double mask_lr = 0.25;
  int epochs = 20;
  double weight_decay = 1e-6;
  int batch_size = 8;
  double beta = kDefaultBeta;
  double init_mean = 2.0;
  double init_std = 0.01;
  bool adversarial = true;
  bool linear_decay = true;
  AdvConfig adv;

  void validate() const;
};

/// Optional per-epoch evaluation for training curves.
struct EpochEval {
  const Corpus* corpus = nullptr;
  const SubstitutionTable* table = nullptr;  ///< attack each epoch when set
  std::size_t max_examples = 200;
};

struct EpochRecord {
  std::string stage;
  int epoch = 0;
  double loss = 0.0;
  std::optional<double> l0;
  std::optional<double> polarization;
  std::optional<double> clean_acc;
  std::optional<double> aua;
};

void to_json(nlohmann::json& j, const EpochRecord& r);

/// Percent of `corpus` classified correctly (all examples when max_examples == 0).
double accuracy(const MaskedModel& model, const Corpus& corpus, std::span<const double> mask_values = {},
                std::size_t max_examples = 0);

/// Masked-token training on unlabeled text, then the pretrained snapshot.
/// The classifier head is left at its initialization.
std::vector<EpochRecord> pretrain(MaskedModel& model, const Corpus& corpus, const PretrainConfig& cfg,
                                  std::uint64_t seed);

/// Clean fine-tuning of every task parameter. Entries of `keep` (maskable-sized,
/// may be empty) equal to 0 are held at zero. Throws DivergenceError on a
/// non-finite loss.
std::vector<EpochRecord> finetune(MaskedModel& model, const Corpus& train, const FinetuneConfig& cfg,
                                  std::uint64_t seed, std::span<const std::uint8_t> keep = {},
                                  const EpochEval& eval = {}, const std::string& stage = "finetune");

struct MaskLearningResult {
  GateParams gates;
  std::vector<EpochRecord> history;
};

/// Trains gate locations against the adversarial loss plus lambda * expected L0.
/// Model weights are read only.
MaskLearningResult learn_masks(const MaskedModel& model, const Corpus& train, const MaskTrainConfig& cfg,
                               std::uint64_t seed, const EpochEval& eval = {});

/// theta := theta0, pruned weights zeroed and frozen, then fine-tuning.
std::vector<EpochRecord> retrain(MaskedModel& model, const Ticket& ticket, const Corpus& train,
                                 const FinetuneConfig& cfg, std::uint64_t seed, const EpochEval& eval = {});

struct ImpResult {
  Ticket ticket;
  std::vector<double> round_sparsity;  ///< cumulative sparsity after each round
  std::vector<std::vector<std::uint8_t>> round_masks;
};

/// Iterative magnitude pruning with rewinding to theta0. The model is left at theta0.
ImpResult imp_baseline(MaskedModel& model, const Corpus& train, const FinetuneConfig& cfg, double target_sparsity,
                       int rounds, std::uint64_t seed);

/// Zero count after round r of `rounds` for N weights.
std::size_t imp_pruned_after(std::size_t n, double target_sparsity, int round, int rounds);

enum class AblationMode { reinit_ticket, full_model_reinit_outside, full_model_reinit_outside_longer };

std::string to_string(AblationMode m);
AblationMode parse_ablation_mode(const std::string& name);

inline constexpr int kLongerAblationEpochs = 10;

/// Table-5 style variants. `init_seed` drives the fresh random weights.
std::vector<EpochRecord> run_ablation(MaskedModel& model, const Ticket& ticket, AblationMode mode,
                                      const Corpus& train, const FinetuneConfig& cfg, std::uint64_t seed,
                                      std::uint64_t init_seed, const EpochEval& eval = {});

/// Maskable-sized keep mask expanded to a theta-sized freeze mask (1 = frozen).
std::vector<std::uint8_t> frozen_from_keep(const ParamLayout& layout, std::span<const std::uint8_t> keep);

/// theta entries of pruned maskable weights set to zero.
void apply_keep(MaskedModel& model, std::span<const std::uint8_t> keep);

}  // namespace rticket
