#include "rticket/data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <numeric>
#include <sstream>

#include "rticket/errors.hpp"
#include "rticket/log.hpp"
#include "rticket/rng.hpp"

namespace rticket {

Vocab::Vocab() {
  for (const char* t : {"[PAD]", "[CLS]", "[MASK]", "[UNK]"}) {
    add(t);
  }
}

std::int32_t Vocab::add(std::string_view token) {
  const std::string key(token);
  if (auto it = ids_.find(key); it != ids_.end()) {
    return it->second;
  }
  const auto id = static_cast<std::int32_t>(tokens_.size());
  tokens_.push_back(key);
  ids_.emplace(key, id);
  return id;
}

std::int32_t Vocab::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnkId : it->second;
}

bool Vocab::contains(std::string_view token) const { return ids_.contains(std::string(token)); }

const std::string& Vocab::token(std::int32_t id) const {
  if (id < 0 || id >= size()) {
    throw ContractViolation("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

void save_vocab(const Vocab& vocab, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw FormatError("cannot open '" + path.string() + "' for writing");
  }
  for (const auto& t : vocab.tokens()) {
    out << t << '\n';
  }
}

Vocab load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw FormatError("cannot open vocabulary '" + path.string() + "'");
  }
  Vocab v;
  std::string line;
  std::int32_t expected = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line.find_first_of(" \t") != std::string::npos) {
      throw FormatError(path.string() + ":" + std::to_string(expected + 1) + ": invalid vocabulary token");
    }
    if (expected < 4) {
      if (v.token(expected) != line) {
        throw FormatError(path.string() + ":" + std::to_string(expected + 1) + ": expected reserved token " +
                          v.token(expected));
      }
    } else if (v.add(line) != expected) {
      throw FormatError(path.string() + ":" + std::to_string(expected + 1) + ": duplicate token '" + line + "'");
    }
    ++expected;
  }
  if (expected < 4) {
    throw FormatError(path.string() + ": vocabulary is missing reserved tokens");
  }
  return v;
}

void Corpus::validate() const {
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& e = examples[i];
    if (static_cast<int>(e.tokens.size()) != seq_len) {
      throw ContractViolation("example " + std::to_string(i) + " has length " + std::to_string(e.tokens.size()));
    }
    for (auto t : e.tokens) {
      if (t < 0 || t >= vocab.size()) {
        throw ContractViolation("example " + std::to_string(i) + " has out-of-vocabulary id " + std::to_string(t));
      }
    }
    if (e.label < 0 || e.label >= num_classes) {
      throw ContractViolation("example " + std::to_string(i) + " has label " + std::to_string(e.label));
    }
  }
}

int SyntheticSpec::vocab_size() const {
  return 4 + num_classes * (signal_per_class + shortcut_per_class) + filler_tokens;
}

void SyntheticSpec::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("synthetic spec: " + msg);
  };
  require(num_classes >= 2, "num_classes must be >= 2");
  require(signal_per_class >= 1 && shortcut_per_class >= 1, "token sets must be non-empty");
  require(filler_tokens >= 1, "filler_tokens must be >= 1");
  require(signal_count >= 1 && shortcut_count >= 0, "signal_count >= 1 and shortcut_count >= 0 required");
  require(signal_count + shortcut_count <= seq_len, "signal_count + shortcut_count exceeds seq_len");
  require(shortcut_rate_train >= 0.0 && shortcut_rate_train <= 1.0, "shortcut_rate_train must be in [0,1]");
  require(shortcut_rate_test >= 0.0 && shortcut_rate_test <= 1.0, "shortcut_rate_test must be in [0,1]");
  require(noise_rate >= 0.0 && noise_rate <= 1.0, "noise_rate must be in [0,1]");
  require(train_size >= 1 && dev_size >= 1 && test_size >= 1 && pretrain_size >= 0, "split sizes must be >= 1");
  require(max_candidates >= 1, "max_candidates must be >= 1");
}

namespace {

std::int32_t pick(Rng& rng, const std::vector<std::int32_t>& pool) {
  return pool[static_cast<std::size_t>(rng.below(pool.size()))];
}

std::int32_t other_class(Rng& rng, int num_classes, int excluded) {
  auto c = static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes - 1)));
  return c >= excluded ? c + 1 : c;
}

Corpus make_split(const SyntheticSpec& spec, const SyntheticTask& task, const Vocab& vocab,
                  const std::vector<std::int32_t>& fillers, int n, double shortcut_rate, std::uint64_t seed,
                  const std::string& name) {
  Corpus c;
  c.vocab = vocab;
  c.seq_len = spec.seq_len;
  c.num_classes = spec.num_classes;
  c.split = name;
  Rng rng(seed);
  std::vector<std::size_t> positions(static_cast<std::size_t>(spec.seq_len));
  for (int i = 0; i < n; ++i) {
    Example e;
    const auto y = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.num_classes)));
    e.tokens.resize(static_cast<std::size_t>(spec.seq_len));
    for (auto& t : e.tokens) {
      t = pick(rng, fillers);
    }
    std::iota(positions.begin(), positions.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(positions));
    const int shortcut_class = rng.bernoulli(shortcut_rate) ? y : other_class(rng, spec.num_classes, y);
    for (int k = 0; k < spec.signal_count; ++k) {
      e.tokens[positions[static_cast<std::size_t>(k)]] = pick(rng, task.signal_tokens[static_cast<std::size_t>(y)]);
    }
    for (int k = 0; k < spec.shortcut_count; ++k) {
      e.tokens[positions[static_cast<std::size_t>(spec.signal_count + k)]] =
          pick(rng, task.shortcut_tokens[static_cast<std::size_t>(shortcut_class)]);
    }
    e.label = rng.bernoulli(spec.noise_rate) ? other_class(rng, spec.num_classes, y) : y;
    c.examples.push_back(std::move(e));
  }
  return c;
}

}  // namespace

SyntheticTask generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  SyntheticTask task;
  Vocab vocab;
  task.signal_tokens.resize(static_cast<std::size_t>(spec.num_classes));
  task.shortcut_tokens.resize(static_cast<std::size_t>(spec.num_classes));
  for (int c = 0; c < spec.num_classes; ++c) {
    for (int i = 0; i < spec.signal_per_class; ++i) {
      task.signal_tokens[static_cast<std::size_t>(c)].push_back(
          vocab.add("sig" + std::to_string(c) + "_" + std::to_string(i)));
    }
  }
  for (int c = 0; c < spec.num_classes; ++c) {
    for (int i = 0; i < spec.shortcut_per_class; ++i) {
      task.shortcut_tokens[static_cast<std::size_t>(c)].push_back(
          vocab.add("cut" + std::to_string(c) + "_" + std::to_string(i)));
    }
  }
  std::vector<std::int32_t> fillers;
  for (int i = 0; i < spec.filler_tokens; ++i) {
    fillers.push_back(vocab.add("w" + std::to_string(i)));
  }

  for (int c = 0; c < spec.num_classes; ++c) {
    std::vector<std::int32_t> others;
    for (int d = 0; d < spec.num_classes; ++d) {
      if (d != c) {
        const auto& pool = task.shortcut_tokens[static_cast<std::size_t>(d)];
        others.insert(others.end(), pool.begin(), pool.end());
      }
    }
    for (auto t : task.shortcut_tokens[static_cast<std::size_t>(c)]) {
      task.substitutions.set(t, others, static_cast<std::size_t>(spec.max_candidates));
    }
  }

  task.train = make_split(spec, task, vocab, fillers, spec.train_size, spec.shortcut_rate_train,
                          derive_seed(seed, 1), "train");
  task.dev = make_split(spec, task, vocab, fillers, spec.dev_size, spec.shortcut_rate_train, derive_seed(seed, 2),
                        "dev");
  task.test = make_split(spec, task, vocab, fillers, spec.test_size, spec.shortcut_rate_test, derive_seed(seed, 3),
                         "test");
  task.pretrain = make_split(spec, task, vocab, fillers, spec.pretrain_size, spec.shortcut_rate_train,
                             derive_seed(seed, 4), "pretrain");
  return task;
}

Corpus load_tsv(const std::filesystem::path& path, Vocab vocab, const TsvOptions& opts) {
  if (opts.seq_len < 1) {
    throw ConfigError("seq_len must be >= 1");
  }
  std::ifstream in(path);
  if (!in) {
    throw FormatError("cannot open '" + path.string() + "'");
  }
  Corpus c;
  c.seq_len = opts.seq_len;
  c.split = path.stem().string();
  std::vector<std::pair<std::vector<std::string>, std::int32_t>> rows;
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
    const auto tab = line.find('\t');
    auto fail = [&](const std::string& why) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + why);
    };
    if (tab == std::string::npos) {
      fail("expected 'label<TAB>text'");
    }
    std::int32_t label = 0;
    const char* first = line.data();
    const char* last = line.data() + tab;
    auto [ptr, ec] = std::from_chars(first, last, label);
    if (ec != std::errc() || ptr != last || label < 0) {
      fail("label '" + line.substr(0, tab) + "' is not a non-negative integer");
    }
    std::string text = line.substr(tab + 1);
    std::transform(text.begin(), text.end(), text.begin(),
                   [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    std::istringstream words(text);
    std::vector<std::string> toks;
    for (std::string w; words >> w;) {
      toks.push_back(w);
    }
    if (toks.empty()) {
      fail("row has no text");
    }
    rows.emplace_back(std::move(toks), label);
  }
  if (rows.empty()) {
    log_warning("'" + path.string() + "' contains no examples");
  }
  for (auto& [toks, label] : rows) {
    Example e;
    for (const auto& w : toks) {
      if (static_cast<int>(e.tokens.size()) == opts.seq_len) {
        break;
      }
      e.tokens.push_back(opts.build_vocab ? vocab.add(w) : vocab.id(w));
    }
    e.tokens.resize(static_cast<std::size_t>(opts.seq_len), kPadId);
    e.label = label;
    c.num_classes = std::max(c.num_classes, label + 1);
    c.examples.push_back(std::move(e));
  }
  c.vocab = std::move(vocab);
  return c;
}

Corpus split_dev(Corpus& train, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) {
    throw ConfigError("dev fraction must be in [0, 1)");
  }
  auto order = epoch_order(train.size(), seed, 0, true);
  const auto n_dev = static_cast<std::size_t>(fraction * static_cast<double>(train.size()));
  std::vector<std::uint8_t> is_dev(train.size(), 0);
  for (std::size_t i = 0; i < n_dev; ++i) {
    is_dev[order[i]] = 1;
  }
  Corpus dev;
  dev.vocab = train.vocab;
  dev.seq_len = train.seq_len;
  dev.num_classes = train.num_classes;
  dev.split = "dev";
  std::vector<Example> kept;
  for (std::size_t i = 0; i < train.size(); ++i) {
    (is_dev[i] ? dev.examples : kept).push_back(std::move(train.examples[i]));
  }
  train.examples = std::move(kept);
  return dev;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch, bool shuffle) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    Rng rng(derive_seed(seed, epoch));
    rng.shuffle(std::span<std::size_t>(order));
  }
  return order;
}

Batch make_batch(const Corpus& corpus, std::span<const std::size_t> indices) {
  Batch b;
  b.size = static_cast<int>(indices.size());
  b.seq_len = corpus.seq_len + 1;
  b.token_ids.reserve(indices.size() * static_cast<std::size_t>(b.seq_len));
  for (auto i : indices) {
    const auto& e = corpus.examples.at(i);
    b.token_ids.push_back(kClsId);
    b.pad_mask.push_back(0);
    for (auto t : e.tokens) {
      b.token_ids.push_back(t);
      b.pad_mask.push_back(t == kPadId ? 1 : 0);
    }
    b.labels.push_back(e.label);
  }
  return b;
}

std::vector<Batch> batches(const Corpus& corpus, int batch_size, std::uint64_t seed, std::uint64_t epoch,
                           bool shuffle) {
  if (batch_size < 1) {
    throw ConfigError("batch_size must be >= 1");
  }
  const auto order = epoch_order(corpus.size(), seed, epoch, shuffle);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
    out.push_back(make_batch(corpus, std::span<const std::size_t>(order).subspan(start, end - start)));
  }
  return out;
}

}  // namespace rticket
