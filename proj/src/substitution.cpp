#include "rticket/substitution.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "rticket/data.hpp"
#include "rticket/errors.hpp"

namespace rticket {

void SubstitutionTable::set(std::int32_t token, std::vector<std::int32_t> candidates, std::size_t max_candidates) {
  std::vector<std::int32_t> clean;
  for (auto c : candidates) {
    if (c != token && std::find(clean.begin(), clean.end(), c) == clean.end() && clean.size() < max_candidates) {
      clean.push_back(c);
    }
  }
  if (clean.empty()) {
    table_.erase(token);
  } else {
    table_[token] = std::move(clean);
  }
}

const std::vector<std::int32_t>& SubstitutionTable::candidates(std::int32_t token) const {
  static const std::vector<std::int32_t> none;
  auto it = table_.find(token);
  return it == table_.end() ? none : it->second;
}

void save_substitutions(const SubstitutionTable& table, const Vocab& vocab, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw FormatError("cannot open '" + path.string() + "' for writing");
  }
  for (const auto& [token, cands] : table.entries()) {
    out << vocab.token(token) << '\t';
    for (std::size_t i = 0; i < cands.size(); ++i) {
      out << (i ? "," : "") << vocab.token(cands[i]);
    }
    out << '\n';
  }
}

SubstitutionTable load_substitutions(const std::filesystem::path& path, const Vocab& vocab,
                                     std::size_t max_candidates) {
  std::ifstream in(path);
  if (!in) {
    throw FormatError("cannot open substitution file '" + path.string() + "'");
  }
  SubstitutionTable table;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    if (line.empty()) {
      continue;
    }
    auto fail = [&](const std::string& why) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + why);
    };
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      fail("expected 'token<TAB>candidate,...'");
    }
    const auto token = line.substr(0, tab);
    if (!vocab.contains(token)) {
      fail("token '" + token + "' is not in the vocabulary");
    }
    std::vector<std::int32_t> cands;
    std::istringstream list(line.substr(tab + 1));
    for (std::string c; std::getline(list, c, ',');) {
      if (c.empty()) {
        continue;
      }
      if (!vocab.contains(c)) {
        fail("candidate '" + c + "' is not in the vocabulary");
      }
      cands.push_back(vocab.id(c));
    }
    table.set(vocab.id(token), std::move(cands), max_candidates);
  }
  return table;
}

}  // namespace rticket
