#include "rticket/attack.hpp"

#include <algorithm>
#include <numeric>

#include "rticket/errors.hpp"
#include "rticket/log.hpp"

namespace rticket {

std::string to_string(AttackOutcome o) {
  switch (o) {
    case AttackOutcome::skipped:
      return "skipped";
    case AttackOutcome::success:
      return "success";
    case AttackOutcome::failure:
      return "failure";
    case AttackOutcome::empty:
      return "empty";
  }
  return "unknown";
}

Matrix ModelClassifier::probabilities(std::span<const TokenSeq> sequences) const {
  Batch b;
  b.size = static_cast<int>(sequences.size());
  b.seq_len = sequences.empty() ? 1 : static_cast<int>(sequences.front().size()) + 1;
  for (const auto& s : sequences) {
    if (static_cast<int>(s.size()) + 1 != b.seq_len) {
      throw ContractViolation("sequences in one query batch must share a length");
    }
    b.token_ids.push_back(kClsId);
    b.pad_mask.push_back(0);
    for (auto t : s) {
      b.token_ids.push_back(t);
      b.pad_mask.push_back(t == kPadId ? 1 : 0);
    }
  }
  return predict_proba(model_, b);
}

Matrix CountingClassifier::probabilities(std::span<const TokenSeq> sequences) const {
  count_ += static_cast<long>(sequences.size());
  return inner_.probabilities(sequences);
}

std::int32_t argmax_row(const Matrix& probs, Eigen::Index row) {
  Eigen::Index best = 0;
  for (Eigen::Index c = 1; c < probs.cols(); ++c) {
    if (probs(row, c) > probs(row, best)) {
      best = c;
    }
  }
  return static_cast<std::int32_t>(best);
}

namespace {

struct Query {
  const Classifier& model;
  long count = 0;

  Matrix operator()(std::span<const TokenSeq> seqs) {
    count += static_cast<long>(seqs.size());
    return model.probabilities(seqs);
  }
  Matrix one(const TokenSeq& seq) { return (*this)(std::span<const TokenSeq>(&seq, 1)); }
};

std::vector<std::size_t> content_positions(const Example& e) {
  std::vector<std::size_t> pos;
  for (std::size_t i = 0; i < e.tokens.size(); ++i) {
    if (e.tokens[i] != kPadId) {
      pos.push_back(i);
    }
  }
  return pos;
}

std::vector<std::int32_t> limited(const SubstitutionTable& table, std::int32_t token, std::size_t max_candidates) {
  const auto& c = table.candidates(token);
  return {c.begin(), c.begin() + static_cast<std::ptrdiff_t>(std::min(c.size(), max_candidates))};
}

AttackResult start(const Example& e) {
  AttackResult r;
  r.original = e.tokens;
  r.label = e.label;
  return r;
}

}  // namespace

AttackResult greedy_attack(const Classifier& model, const Example& example, const SubstitutionTable& table,
                           std::size_t max_candidates) {
  auto r = start(example);
  const auto positions = content_positions(example);
  if (positions.empty()) {
    log_warning("skipping attack on an example with no tokens");
    r.outcome = AttackOutcome::empty;
    return r;
  }
  Query query{model};
  const Matrix p0 = query.one(example.tokens);
  const auto y = example.label;
  r.final_prediction = argmax_row(p0, 0);
  if (r.final_prediction != y) {
    r.outcome = AttackOutcome::skipped;
    r.queries = query.count;
    return r;
  }

  std::vector<TokenSeq> deleted;
  for (auto i : positions) {
    auto s = example.tokens;
    s[i] = kPadId;
    deleted.push_back(std::move(s));
  }
  const Matrix pd = query(deleted);
  std::vector<std::pair<double, std::size_t>> ranked;
  for (std::size_t k = 0; k < positions.size(); ++k) {
    ranked.emplace_back(p0(0, y) - pd(static_cast<Eigen::Index>(k), y), positions[k]);
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

  TokenSeq current = example.tokens;
  double current_p = p0(0, y);
  for (const auto& [importance, i] : ranked) {
    const auto cands = limited(table, example.tokens[i], max_candidates);
    std::optional<std::pair<double, std::int32_t>> best;
    for (auto c : cands) {
      auto trial = current;
      trial[i] = c;
      const Matrix p = query.one(trial);
      const auto pred = argmax_row(p, 0);
      if (pred != y) {
        r.outcome = AttackOutcome::success;
        r.perturbed = std::move(trial);
        r.final_prediction = pred;
        r.queries = query.count;
        return r;
      }
      if (!best || p(0, y) < best->first) {
        best = {p(0, y), c};
      }
    }
    if (best && best->first < current_p) {
      current[i] = best->second;
      current_p = best->first;
    }
  }
  r.outcome = AttackOutcome::failure;
  r.queries = query.count;
  return r;
}

AttackResult bruteforce_attack(const Classifier& model, const Example& example, const SubstitutionTable& table,
                               std::size_t max_candidates) {
  auto r = start(example);
  const auto positions = content_positions(example);
  if (positions.empty()) {
    r.outcome = AttackOutcome::empty;
    return r;
  }
  std::vector<std::size_t> slots;
  std::vector<std::vector<std::int32_t>> options;
  double space = 1.0;
  for (auto i : positions) {
    auto cands = limited(table, example.tokens[i], max_candidates);
    if (!cands.empty()) {
      space *= static_cast<double>(cands.size() + 1);
      slots.push_back(i);
      options.push_back(std::move(cands));
    }
  }
  if (space > kMaxBruteForceSpace) {
    throw DomainError("brute-force search space " + std::to_string(space) + " exceeds the limit of 1e5");
  }
  Query query{model};
  const auto y = example.label;
  const Matrix p0 = query.one(example.tokens);
  r.final_prediction = argmax_row(p0, 0);
  if (r.final_prediction != y) {
    r.outcome = AttackOutcome::skipped;
    r.queries = query.count;
    return r;
  }
  // Odometer over choices: 0 keeps the original token, k selects candidate k-1.
  std::vector<std::size_t> digit(slots.size(), 0);
  while (true) {
    std::size_t k = 0;
    while (k < digit.size() && ++digit[k] > options[k].size()) {
      digit[k] = 0;
      ++k;
    }
    if (k == digit.size()) {
      break;
    }
    auto trial = example.tokens;
    for (std::size_t s = 0; s < slots.size(); ++s) {
      if (digit[s] > 0) {
        trial[slots[s]] = options[s][digit[s] - 1];
      }
    }
    const Matrix p = query.one(trial);
    const auto pred = argmax_row(p, 0);
    if (pred != y) {
      r.outcome = AttackOutcome::success;
      r.perturbed = std::move(trial);
      r.final_prediction = pred;
      r.queries = query.count;
      return r;
    }
  }
  r.outcome = AttackOutcome::failure;
  r.queries = query.count;
  return r;
}

AttackReport summarize(std::vector<AttackResult> results) {
  AttackReport rep;
  long queries = 0;
  int correct = 0;
  int survived = 0;
  for (const auto& r : results) {
    if (r.outcome == AttackOutcome::empty) {
      continue;
    }
    ++rep.evaluated;
    if (r.outcome == AttackOutcome::skipped) {
      continue;
    }
    ++rep.attempted;
    ++correct;
    queries += r.queries;
    if (r.outcome == AttackOutcome::success) {
      ++rep.successes;
    } else {
      ++survived;
    }
  }
  if (rep.evaluated > 0) {
    rep.clean_acc = 100.0 * correct / rep.evaluated;
    rep.aua = 100.0 * survived / rep.evaluated;
  }
  if (rep.attempted > 0) {
    rep.suc = 100.0 * rep.successes / rep.attempted;
    rep.avg_queries = static_cast<double>(queries) / rep.attempted;
  }
  rep.per_example = std::move(results);
  return rep;
}

AttackReport evaluate_attack(const Classifier& model, const Corpus& corpus, const SubstitutionTable& table,
                             std::size_t max_examples, std::size_t max_candidates) {
  if (corpus.empty()) {
    throw ConfigError("cannot evaluate an attack on an empty corpus");
  }
  const auto n = max_examples == 0 ? corpus.size() : std::min(max_examples, corpus.size());
  std::vector<AttackResult> results;
  results.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    results.push_back(greedy_attack(model, corpus.examples[i], table, max_candidates));
  }
  return summarize(std::move(results));
}

void to_json(nlohmann::json& j, const AttackResult& r) {
  j = nlohmann::json{{"original", r.original},
                     {"perturbed", r.perturbed ? nlohmann::json(*r.perturbed) : nlohmann::json(nullptr)},
                     {"queries", r.queries},
                     {"outcome", to_string(r.outcome)},
                     {"label", r.label},
                     {"prediction", r.final_prediction}};
}

void to_json(nlohmann::json& j, const AttackReport& r) {
  j = nlohmann::json{{"clean_acc", r.clean_acc}, {"aua", r.aua},
                     {"suc", r.suc},             {"avg_queries", r.avg_queries},
                     {"evaluated", r.evaluated}, {"attempted", r.attempted},
                     {"successes", r.successes}, {"per_example", r.per_example}};
}

}  // namespace rticket
