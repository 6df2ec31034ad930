#include <cstdio>
#include <exception>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "rticket/errors.hpp"
#include "rticket/log.hpp"
#include "runner/config.hpp"
#include "runner/runner.hpp"

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Experiment configuration (INI)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Run a single seed instead of the configured list");
  cmd->add_option("--out", c.out, "Output directory (overrides run.out)");
  cmd->add_flag("--force", c.force, "Accept artifacts written under a different config hash");
}

}  // namespace

int main(int argc, char** argv) {
  using namespace rticket::runner;
  CLI::App app{"Robust lottery ticket experiments on a small transformer"};
  app.require_subcommand(1);

  Common common;
  std::optional<Stage> selected;
  bool run_configured = false;
  const std::map<Stage, std::string> help = {
      {Stage::pretrain, "Masked-token pretraining; writes the theta0 snapshot"},
      {Stage::finetune, "Clean fine-tuning of the full model"},
      {Stage::learn_masks, "Learn hard-concrete gates against the adversarial loss"},
      {Stage::draw, "Draw robust tickets at every configured sparsity"},
      {Stage::random_ticket, "Random tickets with the robust tickets' layer-wise sparsity"},
      {Stage::imp, "Iterative magnitude pruning baseline"},
      {Stage::retrain, "Retrain every ticket from theta0"},
      {Stage::attack, "Word-substitution attack on the full and retrained models"},
      {Stage::ablate, "Initialization and structure ablations of the best robust ticket"},
      {Stage::report, "Aggregate metrics over seeds into CSV tables"},
  };
  for (auto stage : all_stages()) {
    auto* cmd = app.add_subcommand(to_string(stage), help.at(stage));
    add_common(cmd, common);
    cmd->callback([&selected, stage] { selected = stage; });
  }
  auto* run_cmd = app.add_subcommand("run", "Run the stages listed in run.stages (all stages when empty)");
  add_common(run_cmd, common);
  run_cmd->callback([&] { run_configured = true; });

  CLI11_PARSE(app, argc, argv);

  try {
    RunOptions opts;
    opts.seed = common.seed;
    if (common.out) opts.out = *common.out;
    opts.force = common.force;
    Runner runner(load_config(common.config), opts);
    if (run_configured) {
      runner.run_all();
    } else {
      runner.run(*selected);
    }
  } catch (const rticket::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const rticket::StateError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
