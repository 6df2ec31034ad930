#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <vector>

namespace rticket {

class Vocab;

/// Candidate replacements per token id.
class SubstitutionTable {
 public:
  static constexpr std::size_t kDefaultMaxCandidates = 8;

  SubstitutionTable() = default;

  /// Self-mappings and duplicates are dropped; the list is truncated to max_candidates.
  void set(std::int32_t token, std::vector<std::int32_t> candidates,
           std::size_t max_candidates = kDefaultMaxCandidates);

  const std::vector<std::int32_t>& candidates(std::int32_t token) const;
  bool empty() const { return table_.empty(); }
  std::size_t size() const { return table_.size(); }
  const std::map<std::int32_t, std::vector<std::int32_t>>& entries() const { return table_; }

  bool operator==(const SubstitutionTable&) const = default;

 private:
  std::map<std::int32_t, std::vector<std::int32_t>> table_;
};

/// `token<TAB>candidate1,candidate2,...`, tokens written as vocabulary strings.
void save_substitutions(const SubstitutionTable& table, const Vocab& vocab, const std::filesystem::path& path);
SubstitutionTable load_substitutions(const std::filesystem::path& path, const Vocab& vocab,
                                     std::size_t max_candidates = SubstitutionTable::kDefaultMaxCandidates);

}  // namespace rticket
