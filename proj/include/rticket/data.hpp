#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "rticket/model.hpp"
#include "rticket/substitution.hpp"

namespace rticket {

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kClsId = 1;
inline constexpr std::int32_t kMaskId = 2;
inline constexpr std::int32_t kUnkId = 3;

/// Token <-> id map. Ids 0..3 are reserved for [PAD], [CLS], [MASK], [UNK].
class Vocab {
 public:
  Vocab();

  /// Id of `token`, adding it when absent.
  std::int32_t add(std::string_view token);
  /// Id of `token`, or the unknown id.
  std::int32_t id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(std::int32_t id) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
};

/// One token per line; id = zero-based line number.
void save_vocab(const Vocab& vocab, const std::filesystem::path& path);
Vocab load_vocab(const std::filesystem::path& path);

struct Example {
  std::vector<std::int32_t> tokens;  ///< exactly `seq_len` ids, padded with kPadId
  std::int32_t label = 0;
  bool operator==(const Example&) const = default;
};

struct Corpus {
  std::vector<Example> examples;
  Vocab vocab;
  int seq_len = 0;      ///< content length; batches prepend [CLS]
  int num_classes = 0;
  std::string split;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }
  void validate() const;
};

struct SyntheticSpec {
  int num_classes = 2;
  int signal_per_class = 4;
  int shortcut_per_class = 4;
  int filler_tokens = 20;
  int seq_len = 8;
  int signal_count = 1;       ///< signal tokens per example
  int shortcut_count = 3;     ///< shortcut tokens per example, all from one class
  double shortcut_rate_train = 0.95;  ///< P(shortcut class == label), train, dev and pretraining text
  double shortcut_rate_test = 0.95;
  double noise_rate = 0.0;    ///< fraction of labels replaced by another class
  int train_size = 1000;
  int dev_size = 200;
  int test_size = 200;
  int pretrain_size = 4000;
  int max_candidates = 8;

  int vocab_size() const;
  void validate() const;
};

struct SyntheticTask {
  Corpus train;
  Corpus dev;
  Corpus test;
  Corpus pretrain;  ///< unlabeled-use text for the masked-token objective
  SubstitutionTable substitutions;
  std::vector<std::vector<std::int32_t>> signal_tokens;    ///< per class
  std::vector<std::vector<std::int32_t>> shortcut_tokens;  ///< per class
};

SyntheticTask generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

struct TsvOptions {
  int seq_len = 31;
  /// Grow the vocabulary with unseen tokens; otherwise map them to [UNK].
  bool build_vocab = true;
};

/// `label<TAB>text` rows. Lowercases, splits on whitespace, truncates/pads to seq_len.
Corpus load_tsv(const std::filesystem::path& path, Vocab vocab, const TsvOptions& opts);

/// Move a deterministic `fraction` of `train` into a dev corpus.
Corpus split_dev(Corpus& train, double fraction, std::uint64_t seed);

/// Example order for one epoch; identity when `shuffle` is false.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch, bool shuffle);

/// Model batch for the selected examples, with [CLS] prepended.
Batch make_batch(const Corpus& corpus, std::span<const std::size_t> indices);

/// Every example exactly once, in `batch_size` chunks (last may be short).
std::vector<Batch> batches(const Corpus& corpus, int batch_size, std::uint64_t seed, std::uint64_t epoch,
                           bool shuffle);

}  // namespace rticket
