#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "rticket/data.hpp"
#include "rticket/errors.hpp"
#include "rticket/log.hpp"

using namespace rticket;

namespace {

std::filesystem::path temp_file(const std::string& name, const std::string& contents) {
  const auto path = std::filesystem::temp_directory_path() / name;
  std::ofstream(path) << contents;
  return path;
}

int class_of(const std::vector<std::vector<std::int32_t>>& sets, std::int32_t token) {
  for (std::size_t c = 0; c < sets.size(); ++c) {
    if (std::find(sets[c].begin(), sets[c].end(), token) != sets[c].end()) {
      return static_cast<int>(c);
    }
  }
  return -1;
}

double classifier_accuracy(const Corpus& corpus, const std::vector<std::vector<std::int32_t>>& sets) {
  int correct = 0;
  for (const auto& e : corpus.examples) {
    int vote = -1;
    for (auto t : e.tokens) {
      if (int c = class_of(sets, t); c >= 0) vote = c;
    }
    correct += vote == e.label ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(corpus.size());
}

}  // namespace

TEST_CASE("synthetic task structure") {
  SyntheticSpec spec;
  const auto task = generate_synthetic(spec, 3);
  CHECK(task.train.size() == 1000);
  CHECK(task.dev.size() == 200);
  CHECK(task.test.size() == 200);
  CHECK(task.train.vocab.size() == spec.vocab_size());
  task.train.validate();
  task.test.validate();
  for (const auto& e : task.train.examples) {
    int signals = 0;
    int shortcuts = 0;
    std::set<int> shortcut_classes;
    for (auto t : e.tokens) {
      signals += class_of(task.signal_tokens, t) >= 0 ? 1 : 0;
      if (int c = class_of(task.shortcut_tokens, t); c >= 0) {
        ++shortcuts;
        shortcut_classes.insert(c);
      }
    }
    CHECK(signals == spec.signal_count);
    CHECK(shortcuts == spec.shortcut_count);
    CHECK(shortcut_classes.size() == 1);
  }
}

TEST_CASE("signal-only classifier is perfect without label noise") {
  SyntheticSpec spec;
  spec.noise_rate = 0.0;
  const auto task = generate_synthetic(spec, 1);
  for (const auto* c : {&task.train, &task.dev, &task.test}) {
    CHECK(classifier_accuracy(*c, task.signal_tokens) == 1.0);
  }
}

TEST_CASE("shortcut-only classifier tracks the configured correlation") {
  SyntheticSpec spec;
  spec.shortcut_rate_train = 0.95;
  spec.shortcut_rate_test = 0.5;
  spec.train_size = 4000;
  spec.test_size = 4000;
  const auto task = generate_synthetic(spec, 2);
  // Three binomial standard deviations at n = 4000.
  CHECK(std::abs(classifier_accuracy(task.train, task.shortcut_tokens) - 0.95) < 0.011);
  CHECK(std::abs(classifier_accuracy(task.test, task.shortcut_tokens) - 0.5) < 0.024);
}

TEST_CASE("generation is deterministic per seed and splits do not overlap") {
  SyntheticSpec spec;
  const auto a = generate_synthetic(spec, 9);
  const auto b = generate_synthetic(spec, 9);
  CHECK(a.train.examples == b.train.examples);
  CHECK(a.test.examples == b.test.examples);
  CHECK(a.substitutions == b.substitutions);
  CHECK(generate_synthetic(spec, 10).train.examples != a.train.examples);

  std::set<std::vector<std::int32_t>> train;
  for (const auto& e : a.train.examples) train.insert(e.tokens);
  for (const auto& e : a.test.examples) CHECK_FALSE(train.contains(e.tokens));
}

TEST_CASE("substitution table maps shortcut tokens across classes") {
  SyntheticSpec spec;
  spec.num_classes = 3;
  const auto task = generate_synthetic(spec, 0);
  CHECK(task.substitutions.size() == 12);
  for (const auto& [token, cands] : task.substitutions.entries()) {
    const int own = class_of(task.shortcut_tokens, token);
    CHECK(own >= 0);
    CHECK(cands.size() <= 8);
    for (auto c : cands) {
      CHECK(c != token);
      CHECK(class_of(task.shortcut_tokens, c) != own);
    }
  }
  for (const auto& pool : task.signal_tokens) {
    for (auto t : pool) CHECK(task.substitutions.candidates(t).empty());
  }
}

TEST_CASE("spec validation") {
  SyntheticSpec spec;
  spec.signal_count = 5;
  spec.shortcut_count = 4;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = {};
  spec.num_classes = 1;
  CHECK_THROWS_AS(generate_synthetic(spec, 0), ConfigError);
}

TEST_CASE("tsv loading") {
  Vocab vocab;
  vocab.add("a");
  vocab.add("hello");
  vocab.add("b");
  vocab.add("world");
  REQUIRE(vocab.id("hello") == 5);
  REQUIRE(vocab.id("world") == 7);

  SUBCASE("direct lookup with padding") {
    const auto path = temp_file("rticket_one.tsv", "1\thello world\n");
    const auto c = load_tsv(path, vocab, TsvOptions{.seq_len = 4, .build_vocab = false});
    REQUIRE(c.size() == 1);
    CHECK(c.examples[0].tokens == std::vector<std::int32_t>{5, 7, kPadId, kPadId});
    CHECK(c.examples[0].label == 1);
  }
  SUBCASE("lowercasing, unknown words and truncation") {
    const auto path = temp_file("rticket_two.tsv", "0\tHELLO there World again\n");
    const auto c = load_tsv(path, vocab, TsvOptions{.seq_len = 3, .build_vocab = false});
    CHECK(c.examples[0].tokens == std::vector<std::int32_t>{5, kUnkId, 7});
  }
  SUBCASE("vocabulary growth") {
    const auto path = temp_file("rticket_three.tsv", "0\tnew words\n1\twords here\n");
    const auto c = load_tsv(path, vocab, TsvOptions{.seq_len = 2, .build_vocab = true});
    CHECK(c.vocab.size() == vocab.size() + 3);
    CHECK(c.examples[1].tokens[0] == c.vocab.id("words"));
    CHECK(c.num_classes == 2);
  }
  SUBCASE("empty file warns and yields an empty corpus") {
    std::vector<std::string> warnings;
    auto prev = set_log_sink([&](LogLevel level, const std::string& msg) {
      if (level == LogLevel::warning) warnings.push_back(msg);
    });
    const auto c = load_tsv(temp_file("rticket_empty.tsv", ""), vocab, {});
    set_log_sink(prev);
    CHECK(c.empty());
    CHECK(warnings.size() == 1);
  }
  SUBCASE("malformed rows report their line number") {
    const auto path = temp_file("rticket_bad.tsv", "0\tfine\nnot a row\n");
    try {
      (void)load_tsv(path, vocab, {});
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find(":2:") != std::string::npos);
    }
    CHECK_THROWS_AS(load_tsv(temp_file("rticket_bad2.tsv", "x\thello\n"), vocab, {}), FormatError);
  }
}

TEST_CASE("vocabulary and substitution files round trip") {
  const auto task = generate_synthetic(SyntheticSpec{}, 4);
  const auto vpath = std::filesystem::temp_directory_path() / "rticket_vocab.txt";
  save_vocab(task.train.vocab, vpath);
  const auto loaded = load_vocab(vpath);
  CHECK(loaded == task.train.vocab);
  for (int i = 0; i < loaded.size(); ++i) {
    CHECK(loaded.id(loaded.token(i)) == i);
  }
  const auto spath = std::filesystem::temp_directory_path() / "rticket_subs.tsv";
  save_substitutions(task.substitutions, loaded, spath);
  CHECK(load_substitutions(spath, loaded) == task.substitutions);
  CHECK_THROWS_AS(load_substitutions(temp_file("rticket_badsubs.tsv", "zzz\tw1\n"), loaded), FormatError);
}

TEST_CASE("batching") {
  SyntheticSpec spec;
  spec.train_size = 53;
  const auto task = generate_synthetic(spec, 5);
  const auto& corpus = task.train;

  SUBCASE("single batch") {
    const auto all = batches(corpus, 53, 0, 0, true);
    REQUIRE(all.size() == 1);
    CHECK(all[0].size == 53);
    CHECK(all[0].seq_len == spec.seq_len + 1);
  }
  SUBCASE("every example exactly once") {
    const auto bs = batches(corpus, 8, 11, 2, true);
    CHECK(bs.size() == 7);
    std::multiset<std::vector<std::int32_t>> seen;
    std::multiset<std::vector<std::int32_t>> expected;
    for (const auto& b : bs) {
      for (int i = 0; i < b.size; ++i) {
        std::vector<std::int32_t> row(b.token_ids.begin() + i * b.seq_len + 1, b.token_ids.begin() + (i + 1) * b.seq_len);
        row.push_back(b.labels[static_cast<std::size_t>(i)]);
        seen.insert(row);
        CHECK(b.token(i, 0) == kClsId);
      }
    }
    for (const auto& e : corpus.examples) {
      auto row = e.tokens;
      row.push_back(e.label);
      expected.insert(row);
    }
    CHECK(seen == expected);
  }
  SUBCASE("shuffle off preserves order") {
    CHECK(epoch_order(10, 3, 1, false) == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  }
  SUBCASE("shuffle depends on seed and epoch only") {
    CHECK(epoch_order(50, 3, 1, true) == epoch_order(50, 3, 1, true));
    CHECK(epoch_order(50, 3, 1, true) != epoch_order(50, 3, 2, true));
    CHECK(epoch_order(50, 3, 1, true) != epoch_order(50, 4, 1, true));
  }
  SUBCASE("invalid batch size") { CHECK_THROWS_AS(batches(corpus, 0, 0, 0, false), ConfigError); }
}

TEST_CASE("dev split takes ten percent") {
  SyntheticSpec spec;
  auto task = generate_synthetic(spec, 6);
  auto train = task.train;
  const auto dev = split_dev(train, 0.1, 1);
  CHECK(dev.size() == 100);
  CHECK(train.size() == 900);
}
