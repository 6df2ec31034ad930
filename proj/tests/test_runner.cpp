#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "rticket/errors.hpp"
#include "rticket/log.hpp"
#include "runner/config.hpp"
#include "runner/report.hpp"
#include "runner/runner.hpp"

using namespace rticket;
using namespace rticket::runner;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"(
[run]
seeds = 3
[data]
train_size = 120
dev_size = 30
test_size = 30
pretrain_size = 150
[model]
embed_dim = 8
layers = 1
heads = 2
mlp_dim = 16
[pretrain]
epochs = 1
[finetune]
epochs = 1
lr = 1e-3
[masks]
epochs = 1
batch_size = 32
[adversarial]
steps = 1
[prune]
sparsities = 0,0.5
random_sparsities = 0.5
[attack]
max_examples = 30
)";

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("rticket-runner-" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct QuietLog {
  LogSink previous = set_log_sink([](LogLevel, const std::string&) {});
  ~QuietLog() { set_log_sink(previous); }
};

std::string error_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("config defaults and overrides") {
  const auto c = parse_config(kTiny);
  CHECK(c.seeds == std::vector<std::uint64_t>{3});
  CHECK(c.synth.train_size == 120);
  CHECK(c.finetune.lr == 1e-3);
  CHECK(c.finetune.dropout == 0.1);
  CHECK(c.finetune.clip == 1.0);
  CHECK(c.masks.lambda == 0.5);
  CHECK_FALSE(c.masks.adv.epsilon.has_value());
  CHECK_FALSE(c.ablation_sparsity.has_value());
  CHECK(parse_config("").finetune.lr == 2e-5);
  CHECK(parse_config("[adversarial]\nepsilon = 0.5\nvariant = freelb\n").masks.adv.epsilon == 0.5);
}

TEST_CASE("config errors name every offending field") {
  const auto msg = error_of("[finetune]\nlr = fast\n[masks]\nlambda = -1\n[bogus]\nx = 1\n[run]\nseeds =\n");
  CHECK(msg.find("finetune.lr") != std::string::npos);
  CHECK(msg.find("bogus.x: unknown key") != std::string::npos);
  CHECK(error_of("[masks]\nlambda = -1\n").find("masks") != std::string::npos);
  CHECK(error_of("[run]\nseeds =\n").find("run.seeds") != std::string::npos);
  CHECK(error_of("[run]\nstages = pretrain,polish\n").find("unknown stage 'polish'") != std::string::npos);
  CHECK(error_of("[prune]\nsparsities = 0.2,1.0\n").find("prune.sparsities") != std::string::npos);
  CHECK(error_of("[prune]\nrandom_sparsities = 0.4\n").find("prune.random_sparsities") != std::string::npos);
  CHECK(error_of("[data]\nsource = tsv\ntrain = /nonexistent.tsv\n").find("data.train") != std::string::npos);
  CHECK(error_of("[model]\nembed_dim = 10\nheads = 3\n").find("model.heads") != std::string::npos);
  CHECK(error_of("[ablation]\nmodes = reinit_ticket,shuffle\n").find("ablation.modes") != std::string::npos);
}

TEST_CASE("config hash tracks settings, not formatting") {
  const auto a = parse_config(kTiny);
  const auto b = parse_config(std::string(kTiny) + "\n; trailing comment\n");
  CHECK(a.hash() == b.hash());
  CHECK(a.hash().size() == 16);
  auto c = a;
  c.seeds = {7, 8};
  c.out = "elsewhere";
  CHECK(c.hash() == a.hash());
  c.masks.lambda = 0.6;
  CHECK(c.hash() != a.hash());
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("stages refuse to run without their inputs") {
  QuietLog quiet;
  const auto dir = scratch("prereq");
  Runner r(parse_config(kTiny), {.seed = std::nullopt, .out = dir, .force = false});
  try {
    r.run(Stage::retrain);
    FAIL("retrain ran without a pretrained checkpoint");
  } catch (const StateError& e) {
    CHECK(std::string(e.what()).find("run `pretrain`") != std::string::npos);
  }
  CHECK_THROWS_AS(r.run(Stage::report), StateError);
  fs::remove_all(dir);
}

TEST_CASE("full run: determinism, report identities and hash guard") {
  QuietLog quiet;
  const auto dir_a = scratch("a");
  const auto dir_b = scratch("b");
  const auto cfg = parse_config(kTiny);
  Runner(cfg, {.seed = std::nullopt, .out = dir_a, .force = false}).run_all();
  Runner(cfg, {.seed = std::nullopt, .out = dir_b, .force = false}).run_all();

  for (const auto& e : fs::recursive_directory_iterator(dir_a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir_a);
    CHECK_MESSAGE(slurp(e.path()) == slurp(dir_b / rel), rel.string());
  }

  const auto rep = build_report(dir_a, cfg.hash(), false);
  const auto* full = rep.find_sweep("full", 0.0, "test");
  const auto* identity = rep.find_sweep("robust", 0.0, "test");
  REQUIRE(full);
  REQUIRE(identity);
  CHECK(full->clean.mean == identity->clean.mean);
  CHECK(full->aua.mean == identity->aua.mean);
  CHECK(full->aua.std == 0.0);
  CHECK(full->clean.n == 1);
  CHECK(rep.find_ablation("reinit_ticket"));
  CHECK(rep.find_sweep("random", 0.5, "test"));
  for (const auto& row : rep.layers) {
    if (row.method == "robust" && row.sparsity == 0.0) CHECK(row.surviving.mean == 100.0);
  }

  auto other = cfg;
  other.masks.lambda = 0.9;
  CHECK_THROWS_AS(build_report(dir_a, other.hash(), false), StateError);
  CHECK_NOTHROW(build_report(dir_a, other.hash(), true));
  CHECK_THROWS_AS(Runner(other, {.seed = std::nullopt, .out = dir_a, .force = false}).run(Stage::finetune), StateError);

  fs::remove(dir_a / "seed-3" / "metrics" / "attack.jsonl");
  try {
    build_report(dir_a, cfg.hash(), false);
    FAIL("report ran without attack metrics");
  } catch (const StateError& e) {
    CHECK(std::string(e.what()).find("attack.jsonl") != std::string::npos);
  }
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}

TEST_CASE("best sparsity selection uses dev Aua with ties to the lower sparsity") {
  std::vector<nlohmann::json> recs = {
      {{"method", "robust"}, {"split", "dev"}, {"sparsity", 0.5}, {"aua", 40.0}},
      {{"method", "robust"}, {"split", "dev"}, {"sparsity", 0.3}, {"aua", 40.0}},
      {{"method", "robust"}, {"split", "test"}, {"sparsity", 0.7}, {"aua", 90.0}},
      {{"method", "random"}, {"split", "dev"}, {"sparsity", 0.9}, {"aua", 95.0}},
  };
  CHECK(best_robust_sparsity(recs) == 0.3);
  CHECK_THROWS_AS(best_robust_sparsity({}), StateError);
}

TEST_CASE("sample statistics") {
  const auto one = stat_of({4.0});
  CHECK(one.mean == 4.0);
  CHECK(one.std == 0.0);
  const auto s = stat_of({1.0, 2.0, 3.0, 4.0});
  CHECK(s.mean == doctest::Approx(2.5));
  CHECK(s.std == doctest::Approx(1.2909944487358056));
}
