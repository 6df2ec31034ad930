#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rticket/data.hpp"
#include "rticket/model.hpp"
#include "rticket/substitution.hpp"

namespace rticket {

using TokenSeq = std::vector<std::int32_t>;

/// Anything that maps content sequences ([CLS] excluded) to class probabilities.
class Classifier {
 public:
  virtual ~Classifier() = default;
  /// One row of probabilities per sequence; every row is one query.
  virtual Matrix probabilities(std::span<const TokenSeq> sequences) const = 0;
};

/// Unmasked forward pass of a model; [CLS] is prepended and kPadId positions are masked.
class ModelClassifier : public Classifier {
 public:
  explicit ModelClassifier(const MaskedModel& model) : model_(model) {}
  Matrix probabilities(std::span<const TokenSeq> sequences) const override;

 private:
  const MaskedModel& model_;
};

/// Wraps a classifier and counts every row it evaluates.
class CountingClassifier : public Classifier {
 public:
  explicit CountingClassifier(const Classifier& inner) : inner_(inner) {}
  Matrix probabilities(std::span<const TokenSeq> sequences) const override;
  long count() const { return count_; }
  void reset() { count_ = 0; }

 private:
  const Classifier& inner_;
  mutable long count_ = 0;
};

enum class AttackOutcome {
  skipped,  ///< clean prediction already wrong; not attempted
  success,  ///< label flipped
  failure,  ///< search exhausted without a flip
  empty,    ///< no content tokens; excluded from the report
};

std::string to_string(AttackOutcome o);

struct AttackResult {
  AttackOutcome outcome = AttackOutcome::failure;
  long queries = 0;
  TokenSeq original;
  std::optional<TokenSeq> perturbed;  ///< the flipping sequence on success
  std::int32_t label = 0;
  std::int32_t final_prediction = 0;
};

/// Index of the largest probability, lowest index on ties.
std::int32_t argmax_row(const Matrix& probs, Eigen::Index row);

/// Deletion-ranked greedy substitution. One query for the clean prediction, one per
/// deleted position, one per tried candidate; stops at the first flip.
AttackResult greedy_attack(const Classifier& model, const Example& example, const SubstitutionTable& table,
                           std::size_t max_candidates = SubstitutionTable::kDefaultMaxCandidates);

inline constexpr double kMaxBruteForceSpace = 1e5;

/// Exhaustive search over every combination of per-position substitutions.
/// Throws DomainError when the combination count exceeds kMaxBruteForceSpace.
AttackResult bruteforce_attack(const Classifier& model, const Example& example, const SubstitutionTable& table,
                               std::size_t max_candidates = SubstitutionTable::kDefaultMaxCandidates);

struct AttackReport {
  double clean_acc = 0.0;    ///< percent of evaluated examples classified correctly
  double aua = 0.0;          ///< percent of evaluated examples still correct after the attack
  double suc = 0.0;          ///< percent of attempted examples successfully perturbed
  double avg_queries = 0.0;  ///< mean queries over attempted examples
  int evaluated = 0;
  int attempted = 0;
  int successes = 0;
  std::vector<AttackResult> per_example;
};

/// Greedy attack on the first `max_examples` examples (all when 0).
AttackReport evaluate_attack(const Classifier& model, const Corpus& corpus, const SubstitutionTable& table,
                             std::size_t max_examples = 200,
                             std::size_t max_candidates = SubstitutionTable::kDefaultMaxCandidates);

/// Aggregate per-example results into the four metrics.
AttackReport summarize(std::vector<AttackResult> results);

void to_json(nlohmann::json& j, const AttackResult& r);
void to_json(nlohmann::json& j, const AttackReport& r);

}  // namespace rticket
